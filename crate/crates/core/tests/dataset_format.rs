use std::fs;

use categorical_td::env::{tabular_value_iteration, GridConfig};
use categorical_td::replay::{collect_offline, CollectionPolicy, OfflineDataset};
use categorical_td::Error;

fn sample() -> OfflineDataset {
    let env = GridConfig {
        random_start: true,
        reward_noise: 0.3,
        ..GridConfig::default()
    };
    let q = tabular_value_iteration(&env.noise_free(), 0.99).unwrap();
    collect_offline(&env, &CollectionPolicy::EpsilonGreedy { q, epsilon: 0.5 }, 10, 7).unwrap()
}

#[test]
fn save_load_round_trip_is_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("d.jsonl");
    let d = sample();
    d.save(&path).unwrap();
    let back = OfflineDataset::load(&path).unwrap();
    assert_eq!(back.transitions(), d.transitions());
    assert_eq!(back.content_hash(), d.content_hash());
    assert_eq!(back.meta().state_dim, d.meta().state_dim);
}

fn corrupt(line_no: usize, replace: impl Fn(&str) -> String) -> Error {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("d.jsonl");
    sample().save(&path).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let edited: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i + 1 == line_no { replace(l) } else { l.to_string() })
        .collect();
    fs::write(&path, edited.join("\n")).unwrap();
    OfflineDataset::load(&path).unwrap_err()
}

fn reason(e: &Error) -> String {
    match e {
        Error::Format { reason, .. } => reason.clone(),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn malformed_lines_report_their_line_number() {
    let e = corrupt(4, |l| l.replacen(',', ",x", 1));
    assert!(reason(&e).starts_with("line 4:"), "{e}");

    let e = corrupt(3, |l| format!("{l},0"));
    assert!(reason(&e).contains("line 3: expected"), "{e}");

    let e = corrupt(5, |l| {
        let mut f: Vec<&str> = l.split(',').collect();
        *f.last_mut().unwrap() = "2";
        f.join(",")
    });
    assert!(reason(&e).contains("line 5: bad terminal flag"), "{e}");

    let e = corrupt(1, |_| "{not json".into());
    assert!(reason(&e).starts_with("line 1:"), "{e}");
}

#[test]
fn empty_file_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("empty.jsonl");
    fs::write(&path, "").unwrap();
    assert!(reason(&OfflineDataset::load(&path).unwrap_err()).contains("missing header"));
}
