//! Rotation-based iterative Gaussianization, the frozen baseline.
//!
//! RBIG alternates two steps, each repeated for a fixed number of
//! iterations: Gaussianize every dimension independently with a frozen
//! kernel-density map, then rotate the result by an orthogonal matrix
//! (PCA eigenvectors or a random rotation). Nothing is trained; the
//! marginal maps are fit once per iteration and never revisited. The
//! procedure converges toward a standard normal slowly, which is what
//! makes it a useful floor when judging a trained flow: a
//! data-dependent flow initialization reproduces one RBIG iteration
//! exactly, so any trained improvement over RBIG is attributable to
//! learning.
//!
//! The marginal map reuses the trainable layer's math with uniform
//! mixture weights and one shared bandwidth per dimension, so its
//! forward map and log-det carry the same accuracy guarantees.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{check_flat, to_matrix, FlatArray};
use crate::kernel::{silverman_bandwidth, KernelLayer, H_MIN};
use crate::special::std_normal_logpdf;

/// Version tag of the serialized model document. Distinct from the
/// trainable flow's tag so the two formats cannot be confused.
pub const RBIG_CHECKPOINT_VERSION: &str = "gaussianize.rbig.v1";

/// Default kernel-density subsample size per iteration.
pub const KDE_POINTS_DEFAULT: usize = 10_000;

/// Bandwidth estimator recorded in every serialized model.
pub const BANDWIDTH_RULE: &str = "silverman";

/// λ_min ≤ RANK_EPS · λ_max marks a covariance as rank-deficient.
const RANK_EPS: f64 = 1e-9;

/// Activation-buffer budget (f64 count) for one forward chunk.
const CHUNK_ELEMS: usize = 1 << 22;

/// How the rotation of each iteration is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbigRotation {
    /// Eigenvectors of the sample covariance, strongest direction first.
    Pca,
    /// Haar-random orthogonal matrix.
    Random,
}

/// Per-dimension kernel-density Gaussianization map, frozen after fit.
///
/// Each dimension gets its own set of kernel centers and a single
/// bandwidth from [`rule_of_thumb_bandwidth`]. Internally this is a
/// kernel layer whose log-bandwidth rows are constant, so the map is
/// Φ⁻¹ of a uniform logistic mixture CDF, with the exact log-det that
/// entails.
#[derive(Debug, Clone)]
pub struct MarginalGaussianizer {
    layer: KernelLayer,
}

impl MarginalGaussianizer {
    /// Fit per-dimension KDE maps on `data`, drawing `kde_points` rows
    /// without replacement as kernel centers. Bandwidths are estimated
    /// from the full columns with the subsample size in the exponent,
    /// matching the flow's data-dependent kernel initialization.
    pub fn fit(data: &ArrayView2<f64>, kde_points: usize, rng: &mut impl Rng) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 {
            return Err(Error::contract(format!("need >= 2 rows to fit, got {n}")));
        }
        if d == 0 {
            return Err(Error::contract("data must have >= 1 column"));
        }
        if kde_points < 2 || kde_points > n {
            return Err(Error::contract(format!(
                "kde_points must be in [2, rows = {n}], got {kde_points}"
            )));
        }
        if let Some((idx, _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite value at row {}, column {}",
                idx.0, idx.1
            )));
        }

        let rows = sample_indices(rng, n, kde_points).into_vec();
        let mut points = Array2::zeros((d, kde_points));
        for (a, &r) in rows.iter().enumerate() {
            for j in 0..d {
                points[[j, a]] = data[[r, j]];
            }
        }

        let mut log_bandwidths = Array2::zeros((d, kde_points));
        for j in 0..d {
            let col: Vec<f64> = data.column(j).to_vec();
            let h = silverman_bandwidth(&col, kde_points).max(H_MIN);
            log_bandwidths.row_mut(j).fill(h.ln());
        }

        Ok(Self {
            layer: KernelLayer::new(points, log_bandwidths)?,
        })
    }

    /// Rebuild from stored kernel centers (D × K) and one log-bandwidth
    /// per dimension.
    pub fn from_parts(points: Array2<f64>, log_bandwidths: Array1<f64>) -> Result<Self> {
        let (d, k) = points.dim();
        if log_bandwidths.len() != d {
            return Err(Error::contract(format!(
                "expected {d} log-bandwidths, got {}",
                log_bandwidths.len()
            )));
        }
        let mut rho = Array2::zeros((d, k));
        for j in 0..d {
            rho.row_mut(j).fill(log_bandwidths[j]);
        }
        Ok(Self {
            layer: KernelLayer::new(points, rho)?,
        })
    }

    /// Dimensionality of the map.
    pub fn dim(&self) -> usize {
        self.layer.dim()
    }

    /// Kernel centers per dimension.
    pub fn num_points(&self) -> usize {
        self.layer.num_anchors()
    }

    /// Kernel centers, shape (D, K).
    pub fn points(&self) -> &Array2<f64> {
        self.layer.anchors()
    }

    /// Log-bandwidth of dimension `j`.
    pub fn log_bandwidth(&self, j: usize) -> f64 {
        self.layer.log_bandwidths()[[j, 0]]
    }

    /// Bandwidth of dimension `j`.
    pub fn bandwidth(&self, j: usize) -> f64 {
        self.log_bandwidth(j).exp()
    }

    /// Map a batch to (z, per-row log |det J|). Processes the batch in
    /// row chunks so the K-wide activation buffer stays bounded even
    /// with 10⁴ kernel centers.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let (n, d) = x.dim();
        let k = self.layer.num_anchors();
        let chunk = (CHUNK_ELEMS / (d * k).max(1)).clamp(1, n.max(1));
        let mut z = Array2::zeros((n, d));
        let mut logdet = Array1::zeros(n);
        let mut r0 = 0;
        while r0 < n {
            let r1 = (r0 + chunk).min(n);
            let out = self.layer.forward(&x.slice(s![r0..r1, ..]))?;
            z.slice_mut(s![r0..r1, ..]).assign(&out.z);
            logdet.slice_mut(s![r0..r1]).assign(&out.logdet);
            r0 = r1;
        }
        Ok((z, logdet))
    }
}

/// A fitted RBIG stack: `n_iters` pairs of (marginal map, rotation).
#[derive(Debug, Clone)]
pub struct RbigModel {
    dim: usize,
    iterations: Vec<(MarginalGaussianizer, Array2<f64>)>,
    random_fallbacks: Vec<usize>,
}

impl RbigModel {
    /// Fit `n_iters` iterations on `data`. Each iteration fits the
    /// marginal maps on the current state, transforms, then rotates by
    /// PCA eigenvectors or a random orthogonal matrix. A PCA request on
    /// a rank-deficient covariance falls back to a random rotation for
    /// that iteration; the affected indices are recorded on the model.
    ///
    /// `n_iters == 0` produces the identity model.
    pub fn fit(
        data: &ArrayView2<f64>,
        n_iters: usize,
        rotation: RbigRotation,
        kde_points: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 {
            return Err(Error::contract(format!("need >= 2 rows to fit, got {n}")));
        }
        if d == 0 {
            return Err(Error::contract("data must have >= 1 column"));
        }
        if kde_points > n {
            return Err(Error::contract(format!(
                "kde_points = {kde_points} exceeds rows = {n}"
            )));
        }

        let mut state = data.to_owned();
        let mut iterations = Vec::with_capacity(n_iters);
        let mut random_fallbacks = Vec::new();
        for it in 0..n_iters {
            let marg = MarginalGaussianizer::fit(&state.view(), kde_points, rng)?;
            let (z, _) = marg.forward(&state.view())?;
            let rot = match rotation {
                RbigRotation::Random => random_rotation(d, rng)?,
                RbigRotation::Pca => {
                    let (rot, spectrum) = pca_rotation_with_spectrum(&z.view())?;
                    let lam_max = spectrum[0].max(0.0);
                    if lam_max <= 0.0 || spectrum[d - 1] <= RANK_EPS * lam_max {
                        random_fallbacks.push(it);
                        random_rotation(d, rng)?
                    } else {
                        rot
                    }
                }
            };
            state = z.dot(&rot.t());
            iterations.push((marg, rot));
        }

        Ok(Self {
            dim: d,
            iterations,
            random_fallbacks,
        })
    }

    /// Dimensionality of the model.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fitted (marginal map, rotation) pairs in application order.
    pub fn iterations(&self) -> &[(MarginalGaussianizer, Array2<f64>)] {
        &self.iterations
    }

    /// Iterations where PCA fell back to a random rotation.
    pub fn random_fallbacks(&self) -> &[usize] {
        &self.random_fallbacks
    }

    /// Push a batch through the full stack. Returns (z, per-row
    /// log |det J|); the orthogonal rotations contribute nothing to the
    /// log-det, so it is the sum of the marginal maps' terms.
    pub fn transform(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        if x.ncols() != self.dim {
            return Err(Error::contract(format!(
                "batch has {} columns, model expects {}",
                x.ncols(),
                self.dim
            )));
        }
        if let Some((idx, _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite input at row {}, column {}",
                idx.0, idx.1
            )));
        }
        let mut z = x.to_owned();
        let mut logdet = Array1::zeros(x.nrows());
        for (marg, rot) in &self.iterations {
            let (zk, ld) = marg.forward(&z.view())?;
            logdet += &ld;
            z = zk.dot(&rot.t());
        }
        Ok((z, logdet))
    }

    /// Per-row log-density in nats under the change-of-variables
    /// formula with a standard normal base.
    pub fn log_likelihood(&self, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let (z, mut ll) = self.transform(x)?;
        for (row, z_row) in ll.iter_mut().zip(z.rows()) {
            *row += z_row.iter().map(|&v| std_normal_logpdf(v)).sum::<f64>();
        }
        Ok(ll)
    }

    // --- checkpointing ---

    /// Serialize to the versioned JSON model document.
    pub fn to_json(&self) -> String {
        let mut layers = Vec::with_capacity(2 * self.iterations.len());
        for (marg, rot) in &self.iterations {
            let d = marg.dim();
            layers.push(RbigLayerDoc::FrozenKde {
                points: FlatArray {
                    shape: vec![d, marg.num_points()],
                    data: marg.points().iter().copied().collect(),
                },
                log_bandwidths: FlatArray {
                    shape: vec![1, d],
                    data: (0..d).map(|j| marg.log_bandwidth(j)).collect(),
                },
            });
            layers.push(RbigLayerDoc::DenseRotation {
                matrix: FlatArray {
                    shape: vec![rot.nrows(), rot.ncols()],
                    data: rot.iter().copied().collect(),
                },
            });
        }
        let doc = RbigDoc {
            version: RBIG_CHECKPOINT_VERSION.to_string(),
            dim: self.dim,
            bandwidth_rule: BANDWIDTH_RULE.to_string(),
            random_fallbacks: self.random_fallbacks.clone(),
            layers,
        };
        serde_json::to_string_pretty(&doc).expect("model serialization cannot fail")
    }

    /// Parse a model document produced by [`to_json`](Self::to_json).
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("invalid JSON: {e}")))?;
        let found = value
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("missing version field".into()))?;
        if found != RBIG_CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: found.to_string(),
                expected: RBIG_CHECKPOINT_VERSION.to_string(),
            });
        }
        let doc: RbigDoc = serde_json::from_value(value)
            .map_err(|e| Error::Checkpoint(format!("malformed model document: {e}")))?;

        if doc.dim == 0 {
            return Err(Error::Checkpoint("dim must be >= 1".into()));
        }
        if doc.layers.len() % 2 != 0 {
            return Err(Error::Checkpoint(format!(
                "expected alternating KDE/rotation layers, got {} entries",
                doc.layers.len()
            )));
        }
        let mut iterations = Vec::with_capacity(doc.layers.len() / 2);
        let mut layers = doc.layers.into_iter();
        while let (Some(a), Some(b)) = (layers.next(), layers.next()) {
            let (points, log_bandwidths) = match a {
                RbigLayerDoc::FrozenKde {
                    points,
                    log_bandwidths,
                } => (points, log_bandwidths),
                RbigLayerDoc::DenseRotation { .. } => {
                    return Err(Error::Checkpoint(
                        "expected a KDE layer at an even position".into(),
                    ));
                }
            };
            let matrix = match b {
                RbigLayerDoc::DenseRotation { matrix } => matrix,
                RbigLayerDoc::FrozenKde { .. } => {
                    return Err(Error::Checkpoint(
                        "expected a rotation layer at an odd position".into(),
                    ));
                }
            };

            let points = to_matrix(&points, "KDE points")?;
            check_flat(&log_bandwidths, "log-bandwidths")?;
            if points.nrows() != doc.dim {
                return Err(Error::Checkpoint(format!(
                    "KDE points are {}-dimensional, document says {}",
                    points.nrows(),
                    doc.dim
                )));
            }
            let rho = Array1::from_vec(log_bandwidths.data);
            let marg = MarginalGaussianizer::from_parts(points, rho)?;

            let rot = to_matrix(&matrix, "rotation matrix")?;
            if rot.dim() != (doc.dim, doc.dim) {
                return Err(Error::Checkpoint(format!(
                    "rotation matrix has shape {:?}, expected ({d}, {d})",
                    rot.dim(),
                    d = doc.dim
                )));
            }
            let defect = orthogonality_defect(&rot);
            if !(defect <= 1e-8) {
                return Err(Error::Checkpoint(format!(
                    "stored rotation is not orthogonal (defect {defect:.2e})"
                )));
            }
            iterations.push((marg, rot));
        }

        Ok(Self {
            dim: doc.dim,
            iterations,
            random_fallbacks: doc.random_fallbacks,
        })
    }

    /// Write the model document to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Load a model file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RbigModel::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum RbigLayerDoc {
    FrozenKde {
        points: FlatArray,
        log_bandwidths: FlatArray,
    },
    DenseRotation {
        matrix: FlatArray,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct RbigDoc {
    version: String,
    dim: usize,
    bandwidth_rule: String,
    random_fallbacks: Vec<usize>,
    layers: Vec<RbigLayerDoc>,
}

/// Bandwidth for one marginal KDE: `0.9 · min(σ̂, IQR/1.34) · n^{−1/5}`,
/// floored at [`H_MIN`] so a (near-)constant column still yields a
/// positive bandwidth.
pub fn rule_of_thumb_bandwidth(column: &[f64]) -> Result<f64> {
    if column.len() < 2 {
        return Err(Error::contract(format!(
            "need >= 2 values to estimate a bandwidth, got {}",
            column.len()
        )));
    }
    if let Some(pos) = column.iter().position(|v| !v.is_finite()) {
        return Err(Error::domain(format!("non-finite value at index {pos}")));
    }
    Ok(silverman_bandwidth(column, column.len()).max(H_MIN))
}

/// Rows are unit eigenvectors of the sample covariance of `data`,
/// sorted by descending eigenvalue, each sign-fixed so its
/// largest-magnitude entry is positive.
pub fn pca_rotation(data: &ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(pca_rotation_with_spectrum(data)?.0)
}

/// [`pca_rotation`] plus the eigenvalues (descending); the fit loop
/// needs the spectrum to detect rank deficiency.
fn pca_rotation_with_spectrum(data: &ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(Error::contract(format!(
            "need >= 2 rows for a covariance, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::contract("data must have >= 1 column"));
    }

    let mut means = vec![0.0; d];
    for row in data.rows() {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in data.rows() {
        for p in 0..d {
            let dp = row[p] - means[p];
            for q in p..d {
                cov[[p, q]] += dp * (row[q] - means[q]);
            }
        }
    }
    let scale = 1.0 / (n - 1) as f64;
    for p in 0..d {
        for q in p..d {
            let v = cov[[p, q]] * scale;
            cov[[p, q]] = v;
            cov[[q, p]] = v;
        }
    }
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::contract("sample covariance is not finite"));
    }

    let (mut eigvals, mut vecs) = jacobi_eigh(cov);

    // Descending eigenvalue order; ties keep their relative order.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    eigvals = order.iter().map(|&i| eigvals[i]).collect();

    let mut rot = Array2::zeros((d, d));
    for (r, &i) in order.iter().enumerate() {
        let mut col = vecs.column_mut(i);
        let lead = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(idx, _)| idx)
            .unwrap();
        if col[lead] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        rot.row_mut(r).assign(&col);
    }
    Ok((rot, eigvals))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), unordered.
fn jacobi_eigh(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = a.nrows();
    let mut v = Array2::<f64>::eye(d);
    if d == 1 {
        return (vec![a[[0, 0]]], v);
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = (frob * 1e-15).max(f64::MIN_POSITIVE);
    for _sweep in 0..64 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| a[[p, q]] * a[[p, q]])
            .sum::<f64>()
            .sqrt();
        if off <= stop {
            break;
        }
        for p in 0..d - 1 {
            for q in p + 1..d {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[[p, i]];
                    let aqi = a[[q, i]];
                    a[[p, i]] = c * api - s * aqi;
                    a[[q, i]] = s * api + c * aqi;
                }
                for i in 0..d {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    ((0..d).map(|i| a[[i, i]]).collect(), v)
}

/// Haar-random orthogonal matrix: Gram-Schmidt (two passes, for
/// orthogonality to machine precision) applied to a standard normal
/// matrix. Normalizing with positive norms is the QR sign correction
/// that makes the distribution uniform.
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::contract("dim must be >= 1"));
    }
    let mut q = Array2::<f64>::zeros((dim, dim));
    for j in 0..dim {
        loop {
            let mut v = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
            for _pass in 0..2 {
                for i in 0..j {
                    let qi = q.column(i);
                    let coeff = qi.dot(&v);
                    v.zip_mut_with(&qi, |vk, &qk| *vk -= coeff * qk);
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                v /= norm;
                q.column_mut(j).assign(&v);
                break;
            }
        }
    }
    Ok(q)
}

fn orthogonality_defect(r: &Array2<f64>) -> f64 {
    let d = r.nrows();
    let gram = r.dot(&r.t());
    let mut worst = 0.0f64;
    for p in 0..d {
        for q in 0..d {
            let target = if p == q { 1.0 } else { 0.0 };
            worst = worst.max((gram[[p, q]] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, GaussianizationFlow, RotationKind};
    use crate::special::std_normal_cdf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    /// sup |ECDF − Φ| over the sample points.
    fn ks_to_normal(col: &[f64]) -> f64 {
        let mut sorted = col.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        let mut worst = 0.0f64;
        for (i, &x) in sorted.iter().enumerate() {
            let phi = std_normal_cdf(x);
            worst = worst.max((phi - i as f64 / n).abs());
            worst = worst.max(((i + 1) as f64 / n - phi).abs());
        }
        worst
    }

    #[test]
    fn bandwidth_matches_known_sigma() {
        // Unit-normal column of 1000 values: 0.9·min(σ̂, IQR/1.34)·n^{-1/5}
        // with σ = 1 gives ≈ 0.2259 up to the sampling error of σ̂.
        let col: Vec<f64> = normal_matrix(1000, 1, 7).column(0).to_vec();
        let h = rule_of_thumb_bandwidth(&col).unwrap();
        assert!(
            (h / 0.2259 - 1.0).abs() < 0.1,
            "h = {h}, expected about 0.2259"
        );
    }

    #[test]
    fn bandwidth_scale_equivariance() {
        let col: Vec<f64> = normal_matrix(200, 1, 8).column(0).to_vec();
        let scaled: Vec<f64> = col.iter().map(|v| 3.7 * v).collect();
        let h = rule_of_thumb_bandwidth(&col).unwrap();
        let hs = rule_of_thumb_bandwidth(&scaled).unwrap();
        assert!((hs / (3.7 * h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_constant_column_floors() {
        let h = rule_of_thumb_bandwidth(&[5.0; 50]).unwrap();
        assert_eq!(h, H_MIN);
    }

    #[test]
    fn bandwidth_rejects_short_and_non_finite() {
        assert!(matches!(
            rule_of_thumb_bandwidth(&[1.0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            rule_of_thumb_bandwidth(&[1.0, f64::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn pca_recovers_diagonal_covariance() {
        // Exactly diagonal sample covariance diag(16/3, 4/3): the
        // strongest axis is e₁ and the sign rule keeps it positive.
        let data = ndarray::array![[2.0, 1.0], [2.0, -1.0], [-2.0, 1.0], [-2.0, -1.0]];
        let r = pca_rotation(&data.view()).unwrap();
        assert!((r[[0, 0]] - 1.0).abs() < 1e-10, "first row {:?}", r.row(0));
        assert!(r[[0, 1]].abs() < 1e-10);
        assert!((r[[1, 1]] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pca_sign_rule_flips_dominant_negative_entry() {
        // Data concentrated along (1, -2): the leading eigenvector's
        // largest-magnitude entry is the second, forced positive.
        let mut rows = Vec::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..500 {
            let t: f64 = StandardNormal.sample(&mut rng);
            let e0: f64 = StandardNormal.sample(&mut rng);
            let e1: f64 = StandardNormal.sample(&mut rng);
            rows.push([t + 0.01 * e0, -2.0 * t + 0.01 * e1]);
        }
        let data = Array2::from_shape_fn((500, 2), |(i, j)| rows[i][j]);
        let r = pca_rotation(&data.view()).unwrap();
        assert!(r[[0, 1]] > 0.85, "leading row {:?}", r.row(0));
        assert!(r[[0, 0]] < 0.0);
    }

    #[test]
    fn pca_rows_are_orthonormal() {
        let data = normal_matrix(40, 5, 9);
        let r = pca_rotation(&data.view()).unwrap();
        assert!(orthogonality_defect(&r) <= 1e-10);
    }

    #[test]
    fn random_rotation_is_orthogonal_at_dim_64() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let r = random_rotation(64, &mut rng).unwrap();
        assert!(orthogonality_defect(&r) <= 1e-10);
    }

    #[test]
    fn random_rotation_is_deterministic() {
        let a = random_rotation(6, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        let b = random_rotation(6, &mut ChaCha20Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let data = normal_matrix(50, 3, 12);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let model = RbigModel::fit(&data.view(), 0, RbigRotation::Pca, 50, &mut rng).unwrap();
        let (z, logdet) = model.transform(&data.view()).unwrap();
        assert_eq!(z, data);
        assert_eq!(logdet, Array1::<f64>::zeros(50));
    }

    #[test]
    fn gaussian_data_stays_gaussian_marginally() {
        // Already-N(0,I) input: one iteration must keep every marginal
        // close to N(0,1); KS < 0.05 at n = 10⁴.
        let data = normal_matrix(10_000, 2, 13);
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let model = RbigModel::fit(&data.view(), 1, RbigRotation::Pca, 1000, &mut rng).unwrap();
        let (z, _) = model.transform(&data.view()).unwrap();
        for j in 0..2 {
            let ks = ks_to_normal(&z.column(j).to_vec());
            assert!(ks < 0.05, "dimension {j}: KS = {ks}");
        }
    }

    #[test]
    fn rotations_add_nothing_to_logdet() {
        let data = normal_matrix(200, 3, 15);
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        let model = RbigModel::fit(&data.view(), 1, RbigRotation::Random, 100, &mut rng).unwrap();
        let (_, ld_model) = model.transform(&data.view()).unwrap();
        let (_, ld_marg) = model.iterations()[0].0.forward(&data.view()).unwrap();
        assert_eq!(ld_model, ld_marg);
    }

    #[test]
    fn log_likelihood_close_to_true_entropy() {
        // 2D standard normal has differential entropy ln(2πe) ≈ 2.8379
        // nats; a fitted model's mean NLL should land near it.
        let data = normal_matrix(2000, 2, 17);
        let mut rng = ChaCha20Rng::seed_from_u64(18);
        let model = RbigModel::fit(&data.view(), 2, RbigRotation::Pca, 500, &mut rng).unwrap();
        let ll = model.log_likelihood(&data.view()).unwrap();
        let nll = -ll.mean().unwrap();
        assert!(
            (2.3..3.3).contains(&nll),
            "mean NLL = {nll}, expected near 2.84"
        );
    }

    #[test]
    fn rank_deficient_covariance_falls_back_to_random() {
        let mut data = normal_matrix(200, 2, 19);
        data.column_mut(1).fill(4.0);
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let model = RbigModel::fit(&data.view(), 1, RbigRotation::Pca, 100, &mut rng).unwrap();
        assert_eq!(model.random_fallbacks(), &[0]);

        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let model = RbigModel::fit(&data.view(), 1, RbigRotation::Random, 100, &mut rng).unwrap();
        assert!(model.random_fallbacks().is_empty());
    }

    #[test]
    fn fit_rejects_bad_shapes() {
        let data = normal_matrix(10, 2, 21);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let one_row = normal_matrix(1, 2, 22);
        assert!(RbigModel::fit(&one_row.view(), 1, RbigRotation::Pca, 1, &mut rng).is_err());
        assert!(RbigModel::fit(&data.view(), 1, RbigRotation::Pca, 11, &mut rng).is_err());
        assert!(MarginalGaussianizer::fit(&data.view(), 1, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let data = normal_matrix(100, 3, 23);
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        let model = RbigModel::fit(&data.view(), 2, RbigRotation::Pca, 64, &mut rng).unwrap();
        let json = model.to_json();
        let reloaded = RbigModel::from_json(&json).unwrap();
        assert_eq!(json, reloaded.to_json());

        let batch = normal_matrix(17, 3, 25);
        let (z0, ld0) = model.transform(&batch.view()).unwrap();
        let (z1, ld1) = reloaded.transform(&batch.view()).unwrap();
        assert_eq!(z0, z1);
        assert_eq!(ld0, ld1);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let data = normal_matrix(20, 2, 26);
        let mut rng = ChaCha20Rng::seed_from_u64(27);
        let model = RbigModel::fit(&data.view(), 1, RbigRotation::Random, 10, &mut rng).unwrap();
        let json = model.to_json().replace(RBIG_CHECKPOINT_VERSION, "rbig.v0");
        match RbigModel::from_json(&json) {
            Err(Error::CheckpointVersion { found, expected }) => {
                assert_eq!(found, "rbig.v0");
                assert_eq!(expected, RBIG_CHECKPOINT_VERSION);
            }
            other => panic!("expected a version error, got {other:?}"),
        }
    }

    #[test]
    fn flow_checkpoint_is_not_an_rbig_model() {
        let data = normal_matrix(50, 2, 28);
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let config = FlowConfig {
            dim: 2,
            layers: 1,
            anchors: 8,
            rotation: RotationKind::Householder { reflections: 2 },
        };
        let flow = GaussianizationFlow::init_data_dependent(&data.view(), &config, &mut rng).unwrap();
        assert!(matches!(
            RbigModel::from_json(&flow.to_json()),
            Err(Error::CheckpointVersion { .. })
        ));
    }

    #[test]
    fn marginal_map_matches_flow_initialization() {
        // A data-dependent flow layer pair and one RBIG iteration built
        // from the same inputs are the same marginal map: anchors are
        // the full sample in both, bandwidths use the same rule, so
        // only summation order may differ.
        let data = normal_matrix(120, 3, 30);
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let config = FlowConfig {
            dim: 3,
            layers: 1,
            anchors: 120,
            rotation: RotationKind::Householder { reflections: 3 },
        };
        let flow = GaussianizationFlow::init_data_dependent(&data.view(), &config, &mut rng).unwrap();
        let (rot, kern) = &flow.pairs()[0];
        let rotated = rot.apply(&data.view()).unwrap();

        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let marg = MarginalGaussianizer::fit(&rotated.view(), 120, &mut rng).unwrap();

        let probe = rot.apply(&normal_matrix(40, 3, 33).view()).unwrap();
        let flow_out = kern.forward(&probe.view()).unwrap();
        let (z, logdet) = marg.forward(&probe.view()).unwrap();
        let dz = (&z - &flow_out.z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dld = (&logdet - &flow_out.logdet)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dz < 1e-6, "max |Δz| = {dz:.2e}");
        assert!(dld < 1e-6, "max |Δlogdet| = {dld:.2e}");
    }

    #[test]
    fn fit_is_deterministic() {
        let data = normal_matrix(80, 2, 34);
        let a = RbigModel::fit(
            &data.view(),
            2,
            RbigRotation::Pca,
            40,
            &mut ChaCha20Rng::seed_from_u64(35),
        )
        .unwrap();
        let b = RbigModel::fit(
            &data.view(),
            2,
            RbigRotation::Pca,
            40,
            &mut ChaCha20Rng::seed_from_u64(35),
        )
        .unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn chunked_forward_matches_single_pass() {
        // A marginal map with enough centers to force several chunks
        // must agree bitwise with the underlying layer's single pass.
        let data = normal_matrix(600, 2, 36);
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        let marg = MarginalGaussianizer::fit(&data.view(), 600, &mut rng).unwrap();
        let probe = normal_matrix(50, 2, 38);
        let (z_chunked, ld_chunked) = marg.forward(&probe.view()).unwrap();
        // Forcing chunk = 1 by calling row by row.
        for r in 0..50 {
            let row = probe.slice(s![r..r + 1, ..]);
            let out = marg.layer.forward(&row).unwrap();
            assert_eq!(out.z.row(0), z_chunked.row(0 + r));
            assert_eq!(out.logdet[0], ld_chunked[r]);
        }
    }
}
