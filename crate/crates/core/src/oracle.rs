//! Independent reference computations used by the `verify` command and the
//! test suites. Nothing here calls into the production projection, network
//! or statistics paths it is meant to check.

use rand::{Rng, SeedableRng};
use rand_pcg_like::Pcg32;

/// Per-bin mass of `N(mean, sigma^2)` truncated to `[edges[0], edges[m]]`,
/// integrated numerically from the density.
pub fn hl_gauss_quadrature(mean: f64, sigma: f64, edges: &[f64]) -> Vec<f64> {
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let pdf = |x: f64| norm * (-0.5 * ((x - mean) / sigma).powi(2)).exp();
    let masses: Vec<f64> = edges
        .windows(2)
        .map(|w| adaptive_simpson(&pdf, w[0], w[1], 1e-15, 60))
        .collect();
    let total: f64 = masses.iter().sum();
    masses.into_iter().map(|m| m / total).collect()
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    // Start from two panels so a narrow peak between the first probes is seen.
    let c = (a + b) / 2.0;
    let (fa, fb, fc) = (f(a), f(b), f(c));
    simpson_rec(f, a, c, fa, fc, f((a + c) / 2.0), tol / 2.0, depth)
        + simpson_rec(f, c, b, fc, fb, f((c + b) / 2.0), tol / 2.0, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fm: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = (a + b) / 2.0;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let lm = (a + m) / 2.0;
    let rm = (m + b) / 2.0;
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, m, fa, fm, flm, tol / 2.0, depth - 1)
            + simpson_rec(f, m, b, fm, fb, frm, tol / 2.0, depth - 1)
    }
}

/// Categorical projection evaluated bin by bin: for every target center
/// `z_i` and every atom, apply the triangular interpolation weight
/// `xi_i(x)` built from the floor/ceiling neighbours of the clipped atom.
pub fn c51_double_loop(atoms: &[(f64, f64)], centers: &[f64]) -> Vec<f64> {
    let m = centers.len();
    let mut out = vec![0.0; m];
    for (i, slot) in out.iter_mut().enumerate() {
        for &(loc, mass) in atoms {
            let x = loc.max(centers[0]).min(centers[m - 1]);
            // floor(x): largest center <= x; ceil(x): smallest center >= x.
            let floor = (0..m).filter(|&j| centers[j] <= x).max().unwrap();
            let ceil = (0..m).filter(|&j| centers[j] >= x).min().unwrap();
            let xi = if floor == ceil {
                if i == floor {
                    1.0
                } else {
                    0.0
                }
            } else if i == floor {
                (centers[ceil] - x) / (centers[ceil] - centers[floor])
            } else if i == ceil {
                (x - centers[floor]) / (centers[ceil] - centers[floor])
            } else {
                0.0
            };
            *slot += mass * xi;
        }
    }
    out
}

/// Interquartile mean by explicit sorting and trimming.
pub fn iqm_brute(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    // insertion sort, deliberately not the production sort
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let cut = v.len() / 4;
    let kept = &v[cut..v.len() - cut];
    let mut sum = 0.0;
    for x in kept {
        sum += x;
    }
    sum / kept.len() as f64
}

/// Stratified percentile bootstrap of the pooled IQM, driven by its own
/// generator so that its Monte Carlo noise is independent of the
/// production routine.
pub fn bootstrap_ci_brute(
    scores: &[Vec<f64>],
    resamples: usize,
    confidence: f64,
    seed: u64,
) -> (f64, f64) {
    let mut rng = Pcg32::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut pooled = Vec::new();
        for task in scores {
            for _ in 0..task.len() {
                pooled.push(task[rng.random_range(0..task.len())]);
            }
        }
        stats.push(iqm_brute(&pooled));
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let alpha = (1.0 - confidence) / 2.0;
    (
        percentile_linear(&stats, alpha),
        percentile_linear(&stats, 1.0 - alpha),
    )
}

fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Central finite difference of a scalar function of a parameter vector.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error with an absolute floor, as used by gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

mod rand_pcg_like {
    use rand::{RngCore, SeedableRng};

    /// 64-bit PCG-style generator (XSH-RR output), used only by the
    /// bootstrap oracle so it draws from a different stream than ChaCha.
    pub struct Pcg32 {
        state: u64,
    }

    impl RngCore for Pcg32 {
        fn next_u32(&mut self) -> u32 {
            let old = self.state;
            self.state = old
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
            let rot = (old >> 59) as u32;
            xorshifted.rotate_right(rot)
        }

        fn next_u64(&mut self) -> u64 {
            ((self.next_u32() as u64) << 32) | self.next_u32() as u64
        }

        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for chunk in dest.chunks_mut(4) {
                let v = self.next_u32().to_le_bytes();
                chunk.copy_from_slice(&v[..chunk.len()]);
            }
        }
    }

    impl SeedableRng for Pcg32 {
        type Seed = [u8; 8];

        fn from_seed(seed: Self::Seed) -> Self {
            let mut rng = Pcg32 {
                state: u64::from_le_bytes(seed) ^ 0x853c49e6748fea9b,
            };
            rng.next_u32();
            rng
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_standard_normal() {
        let edges: Vec<f64> = (0..=80).map(|i| -8.0 + 0.2 * i as f64).collect();
        let p = hl_gauss_quadrature(0.0, 1.0, &edges);
        // mass of [-0.2, 0] under N(0, 1)
        assert!((p[39] - 0.079259709439103).abs() < 1e-12);
    }

    #[test]
    fn double_loop_splits_between_neighbours() {
        let centers = [0.0, 1.0, 2.0];
        let p = c51_double_loop(&[(0.25, 1.0)], &centers);
        assert_eq!(p, vec![0.75, 0.25, 0.0]);
    }

    #[test]
    fn brute_iqm() {
        assert_eq!(iqm_brute(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn central_difference_of_square() {
        let g = central_difference(&mut |x: &[f64]| x[0] * x[0], &[3.0], 1e-6);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }
}
