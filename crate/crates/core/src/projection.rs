//! Target constructions: scalar targets or shifted categorical returns
//! projected onto a [`Support`].

use crate::error::{Error, Result};
use crate::support::{ProbVector, Support};

/// Smoothing ratio used unless configured otherwise.
pub const DEFAULT_SMOOTHING_RATIO: f64 = 0.75;

/// Gaussian width for HL-Gauss, always derived from a ratio to the bin width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlGaussParams {
    sigma: f64,
    smoothing_ratio: f64,
}

impl HlGaussParams {
    pub fn from_ratio(smoothing_ratio: f64, support: &Support) -> Result<Self> {
        if !(smoothing_ratio.is_finite() && smoothing_ratio > 0.0) {
            return Err(Error::InvalidParameter {
                name: "smoothing_ratio",
                reason: format!("must be positive and finite, got {smoothing_ratio}"),
            });
        }
        Ok(Self {
            sigma: smoothing_ratio * support.bin_width(),
            smoothing_ratio,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn smoothing_ratio(&self) -> f64 {
        self.smoothing_ratio
    }
}

/// Mean-preserving projection onto the two centers bracketing the target.
///
/// The target is first clipped to `[centers[0], centers[m-1]]`. The lower
/// center receives `(z_{k+1} - y) / ς` and the upper `(y - z_k) / ς`, so the
/// expectation reproduces the clipped target.
pub fn two_hot(target: f64, support: &Support) -> Result<ProbVector> {
    if !target.is_finite() {
        return Err(Error::NonFinite("two-hot target"));
    }
    let centers = support.centers();
    let m = centers.len();
    let y = support.clip_to_centers(target);
    let mut probs = vec![0.0; m];
    // Largest k with centers[k] <= y.
    let k = centers.partition_point(|&z| z <= y).saturating_sub(1);
    if k == m - 1 || centers[k] == y {
        probs[k] = 1.0;
    } else {
        let upper = ((y - centers[k]) / (centers[k + 1] - centers[k])).clamp(0.0, 1.0);
        probs[k] = 1.0 - upper;
        probs[k + 1] = upper;
    }
    Ok(ProbVector::from_raw(probs, support.key()))
}

fn normal_cdf_scaled(x: f64, sigma: f64) -> f64 {
    libm::erf(x / (std::f64::consts::SQRT_2 * sigma))
}

/// Histogram projection of `N(target, sigma^2)` onto the support bins,
/// renormalized by the Gaussian mass that falls inside `[v_min, v_max]`.
pub fn hl_gauss(target: f64, params: &HlGaussParams, support: &Support) -> Result<ProbVector> {
    if !target.is_finite() {
        return Err(Error::NonFinite("HL-Gauss target"));
    }
    let sigma = params.sigma;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            reason: format!("must be positive, got {sigma}"),
        });
    }
    let cdf: Vec<f64> = support
        .edges()
        .iter()
        .map(|&e| normal_cdf_scaled(e - target, sigma))
        .collect();
    let z = cdf[cdf.len() - 1] - cdf[0];
    // erf differences carry a factor of 2 relative to CDF differences; it
    // cancels in the ratio.
    if z.is_nan() || z <= 1e-300 {
        return Err(Error::TargetOutOfRange {
            target,
            v_min: support.v_min(),
            v_max: support.v_max(),
            sigma,
        });
    }
    let probs = cdf
        .windows(2)
        .map(|w| ((w[1] - w[0]) / z).clamp(0.0, 1.0))
        .collect();
    Ok(ProbVector::from_raw(probs, support.key()))
}

/// Expected value of an HL-Gauss histogram; same as [`Support::mean`].
pub fn hl_gauss_mean(p: &ProbVector, support: &Support) -> Result<f64> {
    support.mean(p)
}

/// Categorical projection of weighted atoms onto the support.
///
/// Each atom location is clipped to the center range and its mass is split
/// between the two neighbouring centers by linear interpolation.
pub fn c51_project(atoms: &[(f64, f64)], support: &Support) -> Result<ProbVector> {
    if atoms.is_empty() {
        return Err(Error::InvalidAtoms("no atoms".into()));
    }
    let mut total = 0.0;
    for &(loc, mass) in atoms {
        if !loc.is_finite() || !mass.is_finite() {
            return Err(Error::InvalidAtoms("non-finite atom".into()));
        }
        if mass < 0.0 {
            return Err(Error::InvalidAtoms(format!("negative mass {mass}")));
        }
        total += mass;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidAtoms(format!("masses sum to {total}, not 1")));
    }
    Ok(ProbVector::from_raw(
        project_unchecked(atoms.iter().copied(), support),
        support.key(),
    ))
}

pub(crate) fn project_unchecked(
    atoms: impl Iterator<Item = (f64, f64)>,
    support: &Support,
) -> Vec<f64> {
    let centers = support.centers();
    let m = centers.len();
    let mut probs = vec![0.0; m];
    for (loc, mass) in atoms {
        if mass == 0.0 {
            continue;
        }
        let x = support.clip_to_centers(loc);
        let l = centers.partition_point(|&z| z <= x).saturating_sub(1);
        if l == m - 1 || centers[l] == x {
            probs[l] += mass;
        } else {
            let upper = ((x - centers[l]) / (centers[l + 1] - centers[l])).clamp(0.0, 1.0);
            probs[l] += mass * (1.0 - upper);
            probs[l + 1] += mass * upper;
        }
    }
    probs
}

/// Distributional Bellman target: shift and scale the next-state
/// distribution by `r + gamma * z`, then project back onto the support.
pub fn c51_target(
    reward: f64,
    gamma: f64,
    next_dist: &ProbVector,
    support: &Support,
    terminal: bool,
) -> Result<ProbVector> {
    if next_dist.support_key() != support.key() {
        return Err(Error::SupportMismatch);
    }
    if !reward.is_finite() {
        return Err(Error::NonFinite("C51 reward"));
    }
    if terminal {
        return c51_project(&[(reward, 1.0)], support);
    }
    let atoms: Vec<(f64, f64)> = support
        .centers()
        .iter()
        .zip(next_dist.probs())
        .map(|(&z, &p)| (reward + gamma * z, p))
        .collect();
    c51_project(&atoms, support)
}
