//! Gaussianity diagnostics: how far is a transformed sample from
//! N(0, I)?
//!
//! The total divergence J of a joint distribution from N(0, I) splits
//! into the dependence between dimensions I plus the sum of marginal
//! divergences J_m; marginal Gaussianization drives J_m down while
//! rotations reshuffle what remains into the marginals. This module
//! estimates J_m (any dimension), J (2D only, where a histogram is
//! still dense enough), the residual I = J − J_m, and per-dimension
//! Kolmogorov-Smirnov statistics.
//!
//! All estimators are deterministic functions of the input array:
//! fixed-range histograms with exact normal bin masses, no nearest
//! neighbors, no randomness.

use ndarray::ArrayView2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::special::std_normal_cdf;

/// Histograms cover [−RANGE, RANGE] per dimension.
const RANGE: f64 = 6.0;

/// A histogram KL estimate plus its bias bookkeeping.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct KlEstimate {
    /// Σ p̂ ln(p̂/q) over occupied bins, in nats.
    pub kl: f64,
    /// True N(0,1) mass of empty or out-of-range bins: the part of the
    /// reference distribution the estimate never saw.
    pub skipped_true_mass: f64,
    /// Fraction of samples outside the histogram range, dropped.
    pub dropped_sample_mass: f64,
}

/// KL divergence of a 1D sample to N(0,1), estimated on `n_bins`
/// equal-width bins over [−6, 6]. Bin masses of the reference are
/// exact CDF differences; empty bins contribute nothing to the sum but
/// their true mass is recorded as a bias note.
pub fn marginal_kl(samples: &[f64], n_bins: usize) -> Result<KlEstimate> {
    if samples.len() < 100 {
        return Err(Error::contract(format!(
            "need >= 100 samples for a marginal KL estimate, got {}",
            samples.len()
        )));
    }
    if n_bins < 2 {
        return Err(Error::contract("need >= 2 bins"));
    }
    if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite sample at index {pos}")));
    }

    let mut counts = vec![0usize; n_bins];
    let mut dropped = 0usize;
    for &x in samples {
        match bin_index(x, n_bins) {
            Some(i) => counts[i] += 1,
            None => dropped += 1,
        }
    }

    let n = samples.len() as f64;
    let width = 2.0 * RANGE / n_bins as f64;
    let mut kl = 0.0;
    let mut skipped = 1.0 - (std_normal_cdf(RANGE) - std_normal_cdf(-RANGE));
    for (i, &c) in counts.iter().enumerate() {
        let lo = -RANGE + i as f64 * width;
        let q = std_normal_cdf(lo + width) - std_normal_cdf(lo);
        if c == 0 {
            skipped += q;
        } else {
            let p = c as f64 / n;
            kl += p * (p / q).ln();
        }
    }
    Ok(KlEstimate {
        kl,
        skipped_true_mass: skipped,
        dropped_sample_mass: dropped as f64 / n,
    })
}

/// KL divergence of a 2D sample to N(0, I₂) on a `grid` × `grid`
/// histogram over [−6, 6]². Reference cell masses are products of
/// exact 1D masses.
pub fn total_kl_2d(samples: &ArrayView2<f64>, grid: usize) -> Result<KlEstimate> {
    let (n, d) = samples.dim();
    if d != 2 {
        return Err(Error::contract(format!(
            "joint KL estimate is 2D only, got {d} dimensions"
        )));
    }
    if n < 10_000 {
        return Err(Error::contract(format!(
            "need >= 10000 samples for a joint KL estimate, got {n}"
        )));
    }
    if grid < 2 {
        return Err(Error::contract("need a grid of >= 2 cells per side"));
    }
    if let Some((idx, _)) = samples.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::domain(format!(
            "non-finite sample at row {}, column {}",
            idx.0, idx.1
        )));
    }

    let mut counts = vec![0usize; grid * grid];
    let mut dropped = 0usize;
    for row in samples.rows() {
        match (bin_index(row[0], grid), bin_index(row[1], grid)) {
            (Some(i), Some(j)) => counts[i * grid + j] += 1,
            _ => dropped += 1,
        }
    }

    let width = 2.0 * RANGE / grid as f64;
    let masses: Vec<f64> = (0..grid)
        .map(|i| {
            let lo = -RANGE + i as f64 * width;
            std_normal_cdf(lo + width) - std_normal_cdf(lo)
        })
        .collect();
    let in_range = std_normal_cdf(RANGE) - std_normal_cdf(-RANGE);

    let nf = n as f64;
    let mut kl = 0.0;
    let mut skipped = 1.0 - in_range * in_range;
    for i in 0..grid {
        for j in 0..grid {
            let q = masses[i] * masses[j];
            let c = counts[i * grid + j];
            if c == 0 {
                skipped += q;
            } else {
                let p = c as f64 / nf;
                kl += p * (p / q).ln();
            }
        }
    }
    Ok(KlEstimate {
        kl,
        skipped_true_mass: skipped,
        dropped_sample_mass: dropped as f64 / nf,
    })
}

/// Kolmogorov-Smirnov statistic of a 1D sample against N(0,1):
/// sup |ECDF − Φ|.
pub fn ks_statistic(samples: &[f64]) -> Result<f64> {
    if samples.len() < 10 {
        return Err(Error::contract(format!(
            "need >= 10 samples for a KS statistic, got {}",
            samples.len()
        )));
    }
    if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite sample at index {pos}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut sup = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let phi = std_normal_cdf(x);
        sup = sup.max((phi - i as f64 / n).abs());
        sup = sup.max(((i + 1) as f64 / n - phi).abs());
    }
    Ok(sup)
}

/// Bundle of per-dimension and joint diagnostics for one sample.
#[derive(Debug, Clone, Serialize)]
pub struct GaussianityReport {
    pub sample_size: usize,
    /// Histogram bins per dimension (and per grid side in 2D).
    pub n_bins: usize,
    /// KL-to-N(0,1) estimate per dimension.
    pub per_dim_kl: Vec<f64>,
    /// Sum of the per-dimension estimates, J_m.
    pub j_marginal: f64,
    /// Joint KL to N(0, I₂); present only for 2D samples large enough
    /// for the joint histogram.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total_kl: Option<f64>,
    /// I = J − J_m, the dependence left after marginal correction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_dependence: Option<f64>,
    /// KS statistic per dimension.
    pub per_dim_ks: Vec<f64>,
    /// Total reference mass skipped across per-dimension estimates.
    pub skipped_true_mass: f64,
    /// True if any KL estimate came out negative (possible from
    /// estimation noise when in-range masses do not sum to one).
    pub has_negative_estimates: bool,
}

impl GaussianityReport {
    /// Estimate every diagnostic for one sample matrix.
    pub fn measure(samples: &ArrayView2<f64>, n_bins: usize) -> Result<Self> {
        let (n, d) = samples.dim();
        if d == 0 {
            return Err(Error::contract("samples must have >= 1 column"));
        }
        let mut per_dim_kl = Vec::with_capacity(d);
        let mut per_dim_ks = Vec::with_capacity(d);
        let mut skipped = 0.0;
        for j in 0..d {
            let col: Vec<f64> = samples.column(j).to_vec();
            let est = marginal_kl(&col, n_bins)?;
            per_dim_kl.push(est.kl);
            skipped += est.skipped_true_mass;
            per_dim_ks.push(ks_statistic(&col)?);
        }
        let j_marginal = per_dim_kl.iter().sum();

        let (total_kl, residual) = if d == 2 && n >= 10_000 {
            let joint = total_kl_2d(samples, n_bins)?;
            (Some(joint.kl), Some(joint.kl - j_marginal))
        } else {
            (None, None)
        };

        Ok(Self {
            sample_size: n,
            n_bins,
            per_dim_kl: per_dim_kl.clone(),
            j_marginal,
            total_kl,
            residual_dependence: residual,
            per_dim_ks,
            skipped_true_mass: skipped,
            has_negative_estimates: per_dim_kl.iter().chain(total_kl.iter()).any(|&v| v < 0.0),
        })
    }

    /// JSON rendering for the CLI's report output.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Bin holding `x`, or None outside [−RANGE, RANGE).
fn bin_index(x: f64, n_bins: usize) -> Option<usize> {
    if !(-RANGE..RANGE).contains(&x) {
        return None;
    }
    let i = ((x + RANGE) / (2.0 * RANGE) * n_bins as f64).floor() as usize;
    Some(i.min(n_bins - 1))
}
