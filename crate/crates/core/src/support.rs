//! The categorical value grid and distributions that live on it.
//!
//! A [`Support`] holds `m + 1` evenly spaced bin edges over `[v_min, v_max]`
//! and the `m` bin centers between them. Two-Hot and C51 place mass on
//! centers; HL-Gauss integrates a density between edges.

use crate::error::{Error, Result};

/// Identity of a support, used to check that a [`ProbVector`] is read on
/// the grid it was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SupportKey {
    v_min: u64,
    v_max: u64,
    bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    v_min: f64,
    v_max: f64,
    edges: Vec<f64>,
    centers: Vec<f64>,
    bin_width: f64,
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, bins: usize) -> Result<Self> {
        if !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::InvalidSupport(format!(
                "bounds must be finite, got [{v_min}, {v_max}]"
            )));
        }
        if v_min >= v_max {
            return Err(Error::InvalidSupport(format!(
                "v_min ({v_min}) must be below v_max ({v_max})"
            )));
        }
        if bins < 2 {
            return Err(Error::InvalidSupport(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        let range = v_max - v_min;
        let bin_width = range / bins as f64;
        let mut edges: Vec<f64> = (0..=bins)
            .map(|i| v_min + range * (i as f64 / bins as f64))
            .collect();
        edges[0] = v_min;
        edges[bins] = v_max;
        let centers = edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        Ok(Self {
            v_min,
            v_max,
            edges,
            centers,
            bin_width,
        })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    /// Number of bins `m`.
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn bin_width(&self) -> f64 {
        self.bin_width
    }

    pub fn midpoint(&self) -> f64 {
        (self.v_min + self.v_max) / 2.0
    }

    pub fn key(&self) -> SupportKey {
        SupportKey {
            v_min: self.v_min.to_bits(),
            v_max: self.v_max.to_bits(),
            bins: self.len(),
        }
    }

    /// Index of the bin whose half-open interval `[edge_i, edge_{i+1})`
    /// contains `x`; values outside the range map to the end bins.
    pub fn bin_of(&self, x: f64) -> usize {
        let i = self.edges.partition_point(|&e| e <= x);
        i.saturating_sub(1).min(self.len() - 1)
    }

    /// Clamp a scalar to the span of the bin centers.
    pub fn clip_to_centers(&self, x: f64) -> f64 {
        x.clamp(self.centers[0], self.centers[self.len() - 1])
    }

    /// Expectation of `p` over the bin centers.
    pub fn mean(&self, p: &ProbVector) -> Result<f64> {
        if p.key != self.key() {
            return Err(Error::SupportMismatch);
        }
        Ok(self.mean_of(&p.probs))
    }

    /// Expectation over centers for raw probabilities already known to be
    /// aligned with this support.
    pub(crate) fn mean_of(&self, probs: &[f64]) -> f64 {
        let m: f64 = probs.iter().zip(&self.centers).map(|(p, z)| p * z).sum();
        m.clamp(self.v_min, self.v_max)
    }

    pub fn uniform(&self) -> ProbVector {
        let m = self.len();
        ProbVector {
            probs: vec![1.0 / m as f64; m],
            key: self.key(),
        }
    }

    pub fn one_hot(&self, index: usize) -> ProbVector {
        let mut probs = vec![0.0; self.len()];
        probs[index] = 1.0;
        ProbVector {
            probs,
            key: self.key(),
        }
    }
}

/// A normalized probability vector over the bins of one [`Support`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
    key: SupportKey,
}

impl ProbVector {
    /// Wrap raw probabilities, checking length, range and normalization.
    pub fn new(probs: Vec<f64>, support: &Support) -> Result<Self> {
        if probs.len() != support.len() {
            return Err(Error::Shape {
                expected: format!("{} probabilities", support.len()),
                got: probs.len().to_string(),
            });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::InvalidParameter {
                name: "probs",
                reason: "entries must lie in [0, 1]".into(),
            });
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter {
                name: "probs",
                reason: format!("entries sum to {total}, not 1"),
            });
        }
        Ok(Self {
            probs,
            key: support.key(),
        })
    }

    pub(crate) fn from_raw(probs: Vec<f64>, key: SupportKey) -> Self {
        Self { probs, key }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn support_key(&self) -> SupportKey {
        self.key
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn atari_support() {
        let s = Support::new(-10.0, 10.0, 51).unwrap();
        let w = 20.0 / 51.0;
        assert!((s.bin_width() - w).abs() < 1e-15);
        assert!((s.bin_width() - 0.3922).abs() < 1e-4);
        assert!((s.centers()[0] - (-10.0 + w / 2.0)).abs() < 1e-12);
        assert!((s.centers()[50] - (10.0 - w / 2.0)).abs() < 1e-12);
        assert_eq!(s.edges().len(), 52);
    }

    #[test]
    fn two_bins() {
        let s = Support::new(0.0, 1.0, 2).unwrap();
        assert_eq!(s.edges(), &[0.0, 0.5, 1.0]);
        assert_eq!(s.centers(), &[0.25, 0.75]);
    }

    #[test]
    fn chess_support() {
        let s = Support::new(0.0, 1.0, 128).unwrap();
        assert_eq!(s.bin_width(), 1.0 / 128.0);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Support::new(1.0, 1.0, 10).is_err());
        assert!(Support::new(2.0, 1.0, 10).is_err());
        assert!(Support::new(0.0, 1.0, 1).is_err());
        assert!(Support::new(f64::NAN, 1.0, 10).is_err());
        assert!(Support::new(0.0, f64::INFINITY, 10).is_err());
    }

    #[test]
    fn mean_of_point_mass_is_its_center() {
        let s = Support::new(-3.0, 5.0, 16).unwrap();
        for k in 0..16 {
            assert_eq!(s.mean(&s.one_hot(k)).unwrap(), s.centers()[k]);
        }
    }

    #[test]
    fn mean_rejects_foreign_vector() {
        let a = Support::new(0.0, 1.0, 4).unwrap();
        let b = Support::new(0.0, 2.0, 4).unwrap();
        assert!(matches!(b.mean(&a.uniform()), Err(Error::SupportMismatch)));
    }

    #[test]
    fn mean_matches_direct_dot_product() {
        use rand::{Rng, SeedableRng};
        let s = Support::new(-10.0, 10.0, 51).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..51).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|r| r / total).collect();
            let mut expected = 0.0;
            for i in 0..51 {
                let z = -10.0 + (i as f64 + 0.5) * 20.0 / 51.0;
                expected += probs[i] * z;
            }
            let p = ProbVector::new(probs, &s).unwrap();
            assert!((s.mean(&p).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_lookup() {
        let s = Support::new(0.0, 1.0, 4).unwrap();
        assert_eq!(s.bin_of(-1.0), 0);
        assert_eq!(s.bin_of(0.0), 0);
        assert_eq!(s.bin_of(0.25), 1);
        assert_eq!(s.bin_of(0.99), 3);
        assert_eq!(s.bin_of(1.0), 3);
        assert_eq!(s.bin_of(7.0), 3);
    }

    proptest! {
        #[test]
        fn grid_is_uniform(lo in -1e3f64..1e3, span in 1e-3f64..1e3, bins in 2usize..400) {
            let s = Support::new(lo, lo + span, bins).unwrap();
            let w = s.bin_width();
            for pair in s.edges().windows(2) {
                prop_assert!(((pair[1] - pair[0]) - w).abs() <= 1e-12 * w.max(lo.abs() + span));
            }
            for (i, c) in s.centers().iter().enumerate() {
                prop_assert_eq!(*c, (s.edges()[i] + s.edges()[i + 1]) / 2.0);
            }
            let again = Support::new(lo, lo + span, bins).unwrap();
            prop_assert_eq!(&s, &again);
        }

        #[test]
        fn uniform_mean_is_midpoint(lo in -1e3f64..1e3, span in 1e-3f64..1e3, bins in 2usize..400) {
            let s = Support::new(lo, lo + span, bins).unwrap();
            let mean = s.mean(&s.uniform()).unwrap();
            prop_assert!((mean - s.midpoint()).abs() <= 1e-9 * (1.0 + lo.abs() + span));
        }

        #[test]
        fn mean_stays_in_range(raw in prop::collection::vec(0.0f64..1.0, 2..64)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-6);
            let s = Support::new(-2.0, 7.0, raw.len()).unwrap();
            let p = ProbVector::new(raw.iter().map(|r| r / total).collect(), &s).unwrap();
            let mean = s.mean(&p).unwrap();
            prop_assert!(mean >= s.v_min() && mean <= s.v_max());
        }
    }
}
