//! Trainable element-wise Gaussianization layer.
//!
//! Each dimension carries K logistic kernels with anchors μ and
//! bandwidths h = exp(ρ). The mixture CDF
//!
//! ```text
//! F(x) = (1/K) Σ_j σ((x − μ_j) / h_j)
//! ```
//!
//! is strictly increasing with uniform, non-trainable weights, and the
//! layer maps each coordinate through Ψ(x) = Φ⁻¹(F(x)). The log-det of
//! the Jacobian is exact:
//!
//! ```text
//! log |Ψ'(x)| = log f(x) − log φ(Ψ(x))
//! ```
//!
//! where f = F' is the mixture density and φ the standard normal
//! density. Inversion runs bracketed bisection per coordinate, and
//! [`KernelLayer::backward`] implements hand-derived reverse-mode
//! gradients of (z, logdet) with respect to anchors, log-bandwidths,
//! and inputs.
//!
//! Numerical strategy: the mixture log-density and the softmax weights
//! in the gradient are evaluated in log space (log-sum-exp), so nothing
//! here divides by a density that may have underflowed. CDF values are
//! clamped into `[EPS_P, 1 − EPS_P]` before the quantile function;
//! clamped coordinates contribute zero gradient through the clamp,
//! which is the exact subgradient of the saturated map.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::Rng;
use rand::seq::index::sample as sample_indices;

use crate::error::{Error, Result};
use crate::special::{
    clamp_probability, log_sigmoid, sigmoid, std_normal_cdf, std_normal_icdf, std_normal_logpdf,
};

/// Floor on initial bandwidths; keeps degenerate (constant) columns from
/// collapsing the layer to a step function.
pub const H_MIN: f64 = 1e-3;

/// Bisection terminates when the bracket width falls below this.
pub const BISECT_TOL: f64 = 1e-10;

/// Hard cap on bisection iterations per coordinate.
pub const MAX_BISECT_ITERS: usize = 200;

/// Maximum outward doublings when the initial bracket misses the target.
pub const MAX_EXPAND: usize = 60;

/// Per-dimension mixture of K logistic kernels; 2KD trainable values.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLayer {
    /// Anchor locations μ, shape (D, K), in data units.
    anchors: Array2<f64>,
    /// log-bandwidths ρ, shape (D, K); h = exp(ρ) > 0 by construction.
    log_bandwidths: Array2<f64>,
}

/// Forward outputs plus the cache consumed by [`KernelLayer::backward`].
#[derive(Debug, Clone)]
pub struct KernelForward {
    /// Mapped batch, shape (n, D).
    pub z: Array2<f64>,
    /// Per-row log |det J|, length n.
    pub logdet: Array1<f64>,
    /// Intermediates for the reverse pass.
    pub cache: KernelCache,
}

/// Intermediates recorded by the forward pass.
#[derive(Debug, Clone)]
pub struct KernelCache {
    /// Input batch, shape (n, D).
    x: Array2<f64>,
    /// Clamped mixture CDF values, shape (n, D).
    u: Array2<f64>,
    /// Outputs z = Φ⁻¹(u), shape (n, D).
    z: Array2<f64>,
    /// Mixture log-density per element, shape (n, D).
    log_pdf: Array2<f64>,
    /// Sigmoid activations σ((x − μ_j)/h_j), shape (n, D, K).
    activations: Array3<f64>,
    /// Whether the CDF value was clamped, shape (n, D).
    clamped: Array2<bool>,
}

impl KernelCache {
    /// Rows in the cached batch.
    pub fn batch_len(&self) -> usize {
        self.x.nrows()
    }

    /// Clamped mixture CDF values from the forward pass.
    pub fn cdf_values(&self) -> &Array2<f64> {
        &self.u
    }

    /// Coordinates whose CDF value hit the clamp.
    pub fn clamp_count(&self) -> usize {
        self.clamped.iter().filter(|&&c| c).count()
    }
}

/// Gradients accumulated over a batch by [`KernelLayer::backward`].
#[derive(Debug, Clone)]
pub struct KernelGrad {
    /// d/dμ, shape (D, K).
    pub d_anchors: Array2<f64>,
    /// d/dρ, shape (D, K).
    pub d_log_bandwidths: Array2<f64>,
    /// d/dx, shape (n, D).
    pub dx: Array2<f64>,
}

impl KernelLayer {
    /// Build a layer from explicit parameter matrices.
    ///
    /// Both must have shape (D, K) with D, K ≥ 1 and finite entries.
    pub fn new(anchors: Array2<f64>, log_bandwidths: Array2<f64>) -> Result<Self> {
        if anchors.dim() != log_bandwidths.dim() {
            return Err(Error::contract(format!(
                "anchor shape {:?} != log-bandwidth shape {:?}",
                anchors.dim(),
                log_bandwidths.dim()
            )));
        }
        if anchors.nrows() == 0 || anchors.ncols() == 0 {
            return Err(Error::contract("kernel layer needs D >= 1 and K >= 1"));
        }
        if !anchors.iter().all(|v| v.is_finite()) || !log_bandwidths.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite kernel layer parameter"));
        }
        Ok(KernelLayer {
            anchors,
            log_bandwidths,
        })
    }

    /// Number of dimensions D.
    pub fn dim(&self) -> usize {
        self.anchors.nrows()
    }

    /// Anchors per dimension K.
    pub fn num_anchors(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn anchors(&self) -> &Array2<f64> {
        &self.anchors
    }

    pub fn log_bandwidths(&self) -> &Array2<f64> {
        &self.log_bandwidths
    }

    /// Mutable anchor access for optimizers.
    pub fn anchors_mut(&mut self) -> &mut Array2<f64> {
        &mut self.anchors
    }

    /// Mutable log-bandwidth access for optimizers.
    pub fn log_bandwidths_mut(&mut self) -> &mut Array2<f64> {
        &mut self.log_bandwidths
    }

    /// Mixture CDF per element; values in (0, 1), strictly increasing in x.
    pub fn mixture_cdf(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let (n, d) = x.dim();
        let k = self.num_anchors();
        let mut u = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let mut acc = 0.0;
                for a in 0..k {
                    let h = self.log_bandwidths[[j, a]].exp();
                    acc += sigmoid((x[[i, j]] - self.anchors[[j, a]]) / h);
                }
                u[[i, j]] = acc / k as f64;
            }
        }
        Ok(u)
    }

    /// Per-element log of the mixture density f = F'.
    ///
    /// Evaluated as a log-sum-exp over anchors of
    /// `log σ(t) + log σ(−t) − ρ` minus log K.
    pub fn mixture_logpdf(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let (n, d) = x.dim();
        let k = self.num_anchors();
        let mut out = Array2::zeros((n, d));
        let mut terms = vec![0.0; k];
        for i in 0..n {
            for j in 0..d {
                for a in 0..k {
                    let rho = self.log_bandwidths[[j, a]];
                    let t = (x[[i, j]] - self.anchors[[j, a]]) / rho.exp();
                    terms[a] = log_sigmoid(t) + log_sigmoid(-t) - rho;
                }
                out[[i, j]] = log_sum_exp(&terms) - (k as f64).ln();
            }
        }
        Ok(out)
    }

    /// Map a batch through Ψ = Φ⁻¹ ∘ F and return the exact per-row
    /// log-det together with the reverse-pass cache.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<KernelForward> {
        self.check_batch(x)?;
        let (n, d) = x.dim();
        let k = self.num_anchors();
        let kf = k as f64;

        let mut z = Array2::zeros((n, d));
        let mut logdet = Array1::zeros(n);
        let mut u_arr = Array2::zeros((n, d));
        let mut log_pdf = Array2::zeros((n, d));
        let mut activations = Array3::zeros((n, d, k));
        let mut clamped = Array2::from_elem((n, d), false);

        let mut terms = vec![0.0; k];
        for i in 0..n {
            let mut ld = 0.0;
            for j in 0..d {
                let mut acc = 0.0;
                for a in 0..k {
                    let rho = self.log_bandwidths[[j, a]];
                    let t = (x[[i, j]] - self.anchors[[j, a]]) / rho.exp();
                    // One exponential serves both the sigmoid and its
                    // log-derivative: with e = exp(−|t|),
                    //   σ(t)           = 1/(1+e)  or  e/(1+e)
                    //   log σ'(t)      = −|t| − 2 ln(1+e)
                    let e = (-t.abs()).exp();
                    let s = if t >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                    activations[[i, j, a]] = s;
                    acc += s;
                    terms[a] = -t.abs() - 2.0 * e.ln_1p() - rho;
                }
                let u_raw = acc / kf;
                let u = clamp_probability(u_raw);
                let zij = std_normal_icdf(u);
                let lf = log_sum_exp(&terms) - kf.ln();

                clamped[[i, j]] = u != u_raw;
                u_arr[[i, j]] = u;
                z[[i, j]] = zij;
                log_pdf[[i, j]] = lf;
                ld += lf - std_normal_logpdf(zij);
            }
            logdet[i] = ld;
        }

        let cache = KernelCache {
            x: x.to_owned(),
            u: u_arr,
            z: z.clone(),
            log_pdf,
            activations,
            clamped,
        };
        Ok(KernelForward { z, logdet, cache })
    }

    /// Invert a batch of z-values coordinate-wise by bracketed bisection.
    ///
    /// The target CDF value Φ(z) is clamped into [EPS_P, 1 − EPS_P]
    /// first — the same pinch the forward map applies — so every finite
    /// z has a well-defined preimage. The initial bracket per dimension
    /// is [μ_min − 10 h_max, μ_max + 10 h_max], doubled outward up to
    /// [`MAX_EXPAND`] times if it misses.
    pub fn inverse(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(z)?;
        let (n, d) = z.dim();
        let k = self.num_anchors();

        // Per-dimension brackets and bandwidths, computed once.
        let mut h = Array2::zeros((d, k));
        let mut lo0 = vec![0.0; d];
        let mut hi0 = vec![0.0; d];
        for j in 0..d {
            let mut mu_min = f64::INFINITY;
            let mut mu_max = f64::NEG_INFINITY;
            let mut h_max: f64 = 0.0;
            for a in 0..k {
                let hv = self.log_bandwidths[[j, a]].exp();
                h[[j, a]] = hv;
                mu_min = mu_min.min(self.anchors[[j, a]]);
                mu_max = mu_max.max(self.anchors[[j, a]]);
                h_max = h_max.max(hv);
            }
            lo0[j] = mu_min - 10.0 * h_max;
            hi0[j] = mu_max + 10.0 * h_max;
        }

        let mut x = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                let target = clamp_probability(std_normal_cdf(z[[i, j]]));
                x[[i, j]] = self.bisect_coord(j, &h, lo0[j], hi0[j], target)?;
            }
        }
        Ok(x)
    }

    /// Solve F_j(x) = target on a monotone coordinate map.
    fn bisect_coord(
        &self,
        j: usize,
        h: &Array2<f64>,
        mut lo: f64,
        mut hi: f64,
        target: f64,
    ) -> Result<f64> {
        let k = self.num_anchors();
        let eval = |x: f64| -> f64 {
            let mut acc = 0.0;
            for a in 0..k {
                acc += sigmoid((x - self.anchors[[j, a]]) / h[[j, a]]);
            }
            acc / k as f64
        };

        let mut expansions = 0;
        while eval(lo) > target {
            let w = hi - lo;
            lo -= w;
            expansions += 1;
            if expansions > MAX_EXPAND || !lo.is_finite() {
                return Err(Error::numerical(format!(
                    "bisection bracket expansion failed for dimension {j} (target {target:.3e})"
                )));
            }
        }
        while eval(hi) < target {
            let w = hi - lo;
            hi += w;
            expansions += 1;
            if expansions > MAX_EXPAND || !hi.is_finite() {
                return Err(Error::numerical(format!(
                    "bisection bracket expansion failed for dimension {j} (target {target:.3e})"
                )));
            }
        }

        for _ in 0..MAX_BISECT_ITERS {
            if hi - lo <= BISECT_TOL {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if eval(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Reverse-mode gradients of (z, logdet) under upstream cotangents
    /// `dz` (shape of z) and `dlogdet` (per row).
    ///
    /// Parameter gradients are summed over the batch in row order, so
    /// results are deterministic for a fixed shard split.
    pub fn backward(
        &self,
        cache: &KernelCache,
        dz: &ArrayView2<f64>,
        dlogdet: &ArrayView1<f64>,
    ) -> Result<KernelGrad> {
        let (n, d) = cache.x.dim();
        let k = self.num_anchors();
        if d != self.dim() {
            return Err(Error::contract(format!(
                "cache dim {d} != layer dim {}",
                self.dim()
            )));
        }
        if dz.dim() != (n, d) {
            return Err(Error::contract(format!(
                "dz shape {:?} != batch shape {:?}",
                dz.dim(),
                (n, d)
            )));
        }
        if dlogdet.len() != n {
            return Err(Error::contract(format!(
                "dlogdet length {} != batch rows {n}",
                dlogdet.len()
            )));
        }

        let kf = k as f64;
        let ln_k = kf.ln();
        let mut d_mu = Array2::zeros((d, k));
        let mut d_rho = Array2::zeros((d, k));
        let mut dx = Array2::zeros((n, d));

        for i in 0..n {
            let gl = dlogdet[i];
            for j in 0..d {
                let z = cache.z[[i, j]];
                let lf = cache.log_pdf[[i, j]];

                // u-path: dz/du = 1/φ(z), killed by the clamp.
                let a_coef = if cache.clamped[[i, j]] {
                    0.0
                } else {
                    (dz[[i, j]] + gl * z) * (-std_normal_logpdf(z)).exp()
                };

                let mut dxi = a_coef * lf.exp();
                for a in 0..k {
                    let rho = self.log_bandwidths[[j, a]];
                    let hinv = (-rho).exp();
                    let t = (cache.x[[i, j]] - self.anchors[[j, a]]) * hinv;
                    let s = cache.activations[[i, j, a]];
                    // σ'(t) in log space, as in the forward pass. The
                    // linear product s(1−s) rounds to zero once |t|
                    // pushes s onto 1.0 (|t| ≳ 37), which would silently
                    // drop this anchor's log-density gradient even
                    // though log f still depends on every parameter.
                    let log_g = -t.abs() - 2.0 * (-t.abs()).exp().ln_1p();
                    let g = log_g.exp();
                    // Softmax weight of anchor `a` in the log-density:
                    // w = exp(log g − ρ − log f − log K) ∈ [0, 1].
                    let w = (log_g - rho - lf - ln_k).exp();
                    let one_m2s = 1.0 - 2.0 * s;

                    d_mu[[j, a]] +=
                        -a_coef * g * hinv / kf - gl * w * one_m2s * hinv;
                    d_rho[[j, a]] +=
                        -a_coef * t * g / kf - gl * w * (one_m2s * t + 1.0);
                    dxi += gl * w * one_m2s * hinv;
                }
                dx[[i, j]] = dxi;
            }
        }

        Ok(KernelGrad {
            d_anchors: d_mu,
            d_log_bandwidths: d_rho,
            dx,
        })
    }

    /// Initialize from data: anchors are the columns of K rows sampled
    /// without replacement; bandwidths follow the Silverman rule
    /// `0.9 · min(σ̂, IQR/1.34) · K^(−1/5)` per dimension, floored at
    /// [`H_MIN`].
    pub fn init_from_data(
        samples: &ArrayView2<f64>,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (n, d) = samples.dim();
        if k == 0 {
            return Err(Error::contract("K must be >= 1"));
        }
        if n < k {
            return Err(Error::contract(format!(
                "need at least K = {k} rows to draw anchors, got {n}"
            )));
        }
        if d == 0 {
            return Err(Error::contract("samples must have >= 1 column"));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite sample"));
        }

        let rows = sample_indices(rng, n, k).into_vec();
        let mut anchors = Array2::zeros((d, k));
        for (a, &r) in rows.iter().enumerate() {
            for j in 0..d {
                anchors[[j, a]] = samples[[r, j]];
            }
        }

        let mut log_bandwidths = Array2::zeros((d, k));
        for j in 0..d {
            let col: Vec<f64> = samples.column(j).to_vec();
            let h = silverman_bandwidth(&col, k).max(H_MIN);
            let rho = h.ln();
            for a in 0..k {
                log_bandwidths[[j, a]] = rho;
            }
        }

        KernelLayer::new(anchors, log_bandwidths)
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::contract(format!(
                "batch has {} columns, layer expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        for (idx, v) in x.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite input at row {}, column {}",
                    idx.0, idx.1
                )));
            }
        }
        Ok(())
    }
}

/// Silverman's rule of thumb for a sample of `count` kernel centers:
/// `0.9 · min(σ̂, IQR/1.34) · count^(−1/5)`, with spread statistics
/// estimated from `col`. Returns 0 for degenerate columns; callers
/// apply their own floor.
pub(crate) fn silverman_bandwidth(col: &[f64], count: usize) -> f64 {
    let spread = sample_std(col).min(interquartile_range(col) / 1.34);
    0.9 * spread * (count as f64).powf(-0.2)
}

fn sample_std(col: &[f64]) -> f64 {
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mean = col.iter().sum::<f64>() / n as f64;
    let ss = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (ss / (n - 1) as f64).sqrt()
}

/// IQR with linearly interpolated quantiles (the common "type 7" rule).
fn interquartile_range(col: &[f64]) -> f64 {
    let mut sorted = col.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25)
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Stable log Σ exp(v).
pub(crate) fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = vals.iter().map(|v| (v - m).exp()).sum();
    m + sum.ln()
}
