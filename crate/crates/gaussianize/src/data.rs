//! Dataset plumbing: toy generators with density oracles, CSV
//! ingestion, train-split normalization, deterministic splits, the
//! stretch transforms used to probe numerical robustness, and uniform
//! dequantization for integer-valued (image-like) data.
//!
//! A [`Dataset`] is immutable after construction; every operation
//! returns a new value carrying forward the bookkeeping records
//! (normalization statistics, stretch kind plus original values,
//! dequantization offset). The records exist so that likelihoods
//! measured in a preprocessed space can be restated exactly in the
//! original data space.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::log_sum_exp;
use crate::special::std_normal_logpdf;

/// Standard deviations below this are clamped before dividing, so a
/// constant column normalizes to zeros instead of blowing up.
pub const STD_FLOOR: f64 = 1e-8;

/// Row membership after [`Dataset::split`]. Unsplit datasets tag every
/// row as training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-dimension affine record of a normalization pass: the stored
/// transform is `z = (x − mean) / std`, so de-normalization is exact
/// up to rounding.
#[derive(Debug, Clone)]
pub struct Normalization {
    pub mean: Array1<f64>,
    /// Already floored at [`STD_FLOOR`].
    pub std: Array1<f64>,
}

impl Serialize for Normalization {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("Normalization", 2)?;
        st.serialize_field("mean", &self.mean.to_vec())?;
        st.serialize_field("std", &self.std.to_vec())?;
        st.end()
    }
}

impl Normalization {
    /// Σ_d ln std_d: the log-det the normalization contributes per row
    /// when restating a normalized-space likelihood in the un-normalized
    /// space.
    pub fn logdet_nats(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// Element-wise stretch applied to every entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StretchKind {
    /// f(x) = x³.
    Cubic,
    /// f(x) = a·x + b.
    Affine { a: f64, b: f64 },
}

impl StretchKind {
    /// The conventional harsh affine stretch, f(x) = 1000x + 51.
    pub const AFFINE_DEFAULT: StretchKind = StretchKind::Affine { a: 1000.0, b: 51.0 };

    fn apply(&self, x: f64) -> f64 {
        match self {
            StretchKind::Cubic => x * x * x,
            StretchKind::Affine { a, b } => a * x + b,
        }
    }

    fn invert(&self, y: f64) -> f64 {
        match self {
            StretchKind::Cubic => y.cbrt(),
            StretchKind::Affine { a, b } => (y - b) / a,
        }
    }

    /// log |f′(x)| at an original-space value.
    fn log_abs_derivative(&self, x: f64) -> f64 {
        match self {
            StretchKind::Cubic => (3.0 * x * x).ln(),
            StretchKind::Affine { a, .. } => a.abs().ln(),
        }
    }
}

/// Dequantization record: integer levels and the per-row offset
/// `D · ln(levels)` that converts continuous-model nats to discrete
/// bits per dimension.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Dequant {
    pub levels: u32,
    pub offset_nats: f64,
}

/// The four synthetic 2D distributions, each with a density oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyName {
    /// 0.5·N((−2,0), I) + 0.5·N((2,0), I).
    TwoGaussians,
    /// Radius ~ N(2, 0.2), angle uniform.
    Ring,
    /// Uniform over the 8 black unit cells of a 4×4 board on [−2,2]².
    Checkerboard,
    /// Archimedean spiral arm convolved with isotropic noise.
    Spiral,
}

impl ToyName {
    pub const ALL: [ToyName; 4] = [
        ToyName::TwoGaussians,
        ToyName::Ring,
        ToyName::Checkerboard,
        ToyName::Spiral,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ToyName::TwoGaussians => "two_gaussians",
            ToyName::Ring => "ring",
            ToyName::Checkerboard => "checkerboard",
            ToyName::Spiral => "spiral",
        }
    }
}

impl FromStr for ToyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyName::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown toy distribution {s:?}; expected one of two_gaussians, ring, checkerboard, spiral"
                ))
            })
    }
}

const RING_RADIUS: f64 = 2.0;
const RING_SIGMA: f64 = 0.2;
const SPIRAL_PITCH: f64 = 0.4;
const SPIRAL_TURNS: f64 = 3.0 * std::f64::consts::PI;
const SPIRAL_SIGMA: f64 = 0.1;
/// Quadrature nodes for the spiral's arc-length integral.
const SPIRAL_NODES: usize = 800;

/// Exact (or brute-force-integrated) log-density of a toy distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyDensity {
    name: ToyName,
}

impl ToyDensity {
    /// log p(x, y) in nats. Off-support points of the checkerboard
    /// return −∞.
    pub fn log_density(&self, x: f64, y: f64) -> f64 {
        match self.name {
            ToyName::TwoGaussians => {
                let a = std_normal_logpdf(x + 2.0) + std_normal_logpdf(y);
                let b = std_normal_logpdf(x - 2.0) + std_normal_logpdf(y);
                log_sum_exp(&[a, b]) + 0.5f64.ln()
            }
            ToyName::Ring => {
                let rho = x.hypot(y);
                if rho == 0.0 {
                    return f64::NEG_INFINITY;
                }
                // Signed-radius construction: radius ρ receives mass
                // from r = ρ and r = −ρ.
                let lp = normal_logpdf(rho, RING_RADIUS, RING_SIGMA);
                let lm = normal_logpdf(-rho, RING_RADIUS, RING_SIGMA);
                log_sum_exp(&[lp, lm]) - (2.0 * std::f64::consts::PI * rho).ln()
            }
            ToyName::Checkerboard => {
                if checkerboard_cell(x, y).is_some() {
                    (1.0 / 8.0f64).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            ToyName::Spiral => {
                // p(x) = (1/T) ∫₀ᵀ φ_σ(x − c(t)) dt by Simpson's rule
                // in log space; c(t) = a·t·(cos t, sin t).
                let n = SPIRAL_NODES;
                let h = SPIRAL_TURNS / n as f64;
                let mut terms = Vec::with_capacity(n + 1);
                for i in 0..=n {
                    let t = i as f64 * h;
                    let cx = SPIRAL_PITCH * t * t.cos();
                    let cy = SPIRAL_PITCH * t * t.sin();
                    let lp = normal_logpdf(x, cx, SPIRAL_SIGMA)
                        + normal_logpdf(y, cy, SPIRAL_SIGMA);
                    let w: f64 = if i == 0 || i == n {
                        1.0
                    } else if i % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    terms.push(lp + w.ln());
                }
                log_sum_exp(&terms) + (h / 3.0).ln() - SPIRAL_TURNS.ln()
            }
        }
    }

    /// Mean log-density over a batch of rows.
    pub fn mean_log_density(&self, rows: &ArrayView2<f64>) -> f64 {
        let n = rows.nrows().max(1) as f64;
        rows.rows()
            .into_iter()
            .map(|r| self.log_density(r[0], r[1]))
            .sum::<f64>()
            / n
    }
}

fn normal_logpdf(x: f64, mean: f64, sigma: f64) -> f64 {
    std_normal_logpdf((x - mean) / sigma) - sigma.ln()
}

/// Index of the black cell containing (x, y), if any: a 4×4 board on
/// [−2, 2]² with black cells where column + row is even.
fn checkerboard_cell(x: f64, y: f64) -> Option<(usize, usize)> {
    if !(-2.0..2.0).contains(&x) || !(-2.0..2.0).contains(&y) {
        return None;
    }
    let cx = (x + 2.0).floor() as usize;
    let cy = (y + 2.0).floor() as usize;
    ((cx + cy) % 2 == 0).then_some((cx, cy))
}

/// An immutable sample matrix with its preprocessing records.
#[derive(Debug, Clone)]
pub struct Dataset {
    matrix: Array2<f64>,
    splits: Vec<Split>,
    normalization: Option<Normalization>,
    stretch: Option<StretchKind>,
    /// Pre-stretch values; kept so the Jacobian correction is evaluated
    /// at exact original inputs rather than round-tripped ones.
    original: Option<Array2<f64>>,
    dequant: Option<Dequant>,
    density: Option<ToyDensity>,
    toy: Option<ToyName>,
    seed: Option<u64>,
}

impl Dataset {
    /// Wrap a raw matrix; every row starts tagged as training data.
    pub fn from_matrix(matrix: Array2<f64>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::contract("dataset must have >= 1 row and column"));
        }
        let rows = matrix.nrows();
        Ok(Self {
            matrix,
            splits: vec![Split::Train; rows],
            normalization: None,
            stretch: None,
            original: None,
            dequant: None,
            density: None,
            toy: None,
            seed: None,
        })
    }

    /// Record the seed that produced this dataset; surfaces in the
    /// manifest only.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn stretch_kind(&self) -> Option<StretchKind> {
        self.stretch
    }

    pub fn dequant(&self) -> Option<Dequant> {
        self.dequant
    }

    /// Density oracle, present on generated toy datasets.
    pub fn density(&self) -> Option<ToyDensity> {
        self.density
    }

    /// Row indices tagged with `split`.
    pub fn rows_for(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s == split).then_some(i))
            .collect()
    }

    /// Copy of the rows tagged with `split`; empty-height matrix if none.
    pub fn subset(&self, split: Split) -> Array2<f64> {
        self.matrix.select(Axis(0), &self.rows_for(split))
    }

    /// Draw i.i.d. samples from a named toy distribution. The returned
    /// dataset carries a density oracle for likelihood comparisons.
    pub fn gen_toy(name: ToyName, n: usize, rng: &mut impl Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("need n >= 1 samples"));
        }
        let mut m = Array2::zeros((n, 2));
        for i in 0..n {
            let (x, y) = match name {
                ToyName::TwoGaussians => {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let gx: f64 = StandardNormal.sample(rng);
                    let gy: f64 = StandardNormal.sample(rng);
                    (sign * 2.0 + gx, gy)
                }
                ToyName::Ring => {
                    let g: f64 = StandardNormal.sample(rng);
                    let r = RING_RADIUS + RING_SIGMA * g;
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    (r * theta.cos(), r * theta.sin())
                }
                ToyName::Checkerboard => {
                    // Black cells of the 4×4 board, uniform within.
                    let cell = rng.random_range(0..8u32);
                    let row = cell / 2;
                    let col = 2 * (cell % 2) + row % 2;
                    let x = col as f64 - 2.0 + rng.random_range(0.0..1.0);
                    let y = row as f64 - 2.0 + rng.random_range(0.0..1.0);
                    (x, y)
                }
                ToyName::Spiral => {
                    let t = rng.random_range(0.0..SPIRAL_TURNS);
                    let gx: f64 = StandardNormal.sample(rng);
                    let gy: f64 = StandardNormal.sample(rng);
                    (
                        SPIRAL_PITCH * t * t.cos() + SPIRAL_SIGMA * gx,
                        SPIRAL_PITCH * t * t.sin() + SPIRAL_SIGMA * gy,
                    )
                }
            };
            m[[i, 0]] = x;
            m[[i, 1]] = y;
        }
        let mut ds = Dataset::from_matrix(m)?;
        ds.density = Some(ToyDensity { name });
        ds.toy = Some(name);
        Ok(ds)
    }

    /// Load a rectangular numeric CSV. A non-numeric first row is
    /// treated as a header and skipped; ragged or non-numeric data rows
    /// fail with the 1-based line number.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                other => Error::contract(format!("CSV open: {other:?}")),
            })?;

        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut width: Option<usize> = None;
        for (idx, record) in reader.records().enumerate() {
            let line = idx + 1;
            let record = record.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            let parsed: std::result::Result<Vec<f64>, usize> = record
                .iter()
                .enumerate()
                .map(|(c, field)| field.parse::<f64>().map_err(|_| c))
                .collect();
            match parsed {
                Ok(values) => {
                    if let Some(w) = width {
                        if values.len() != w {
                            return Err(Error::Parse {
                                line,
                                message: format!("expected {w} fields, got {}", values.len()),
                            });
                        }
                    } else {
                        width = Some(values.len());
                    }
                    rows.push(values);
                }
                Err(col) if idx == 0 => {
                    // Header row: remember the width it promises.
                    let _ = col;
                    width = Some(record.len());
                }
                Err(col) => {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "field {} ({:?}) is not numeric",
                            col + 1,
                            record.get(col).unwrap_or("")
                        ),
                    });
                }
            }
        }

        let w = width.unwrap_or(0);
        if rows.is_empty() || w == 0 {
            return Err(Error::contract("CSV contains no data rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let matrix = Array2::from_shape_vec((rows.len(), w), flat)
            .map_err(|e| Error::contract(format!("CSV shape: {e}")))?;
        Dataset::from_matrix(matrix)
    }

    /// Tag rows as train/val/test by shuffling indices. Fractions must
    /// be non-negative and sum to 1 (within 1e-9); counts are floors of
    /// the first two fractions, with the remainder tagged test.
    pub fn split(&self, fractions: [f64; 3], rng: &mut impl Rng) -> Result<Self> {
        let sum: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "fractions must be non-negative and sum to 1, got {fractions:?}"
            )));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_train = (fractions[0] * n as f64).floor() as usize;
        let n_val = (fractions[1] * n as f64).floor() as usize;
        let mut splits = vec![Split::Test; n];
        for &i in &order[..n_train] {
            splits[i] = Split::Train;
        }
        for &i in &order[n_train..(n_train + n_val).min(n)] {
            splits[i] = Split::Val;
        }
        let mut out = self.clone();
        out.splits = splits;
        Ok(out)
    }

    /// Normalize every row by the training split's per-dimension mean
    /// and floored standard deviation. Applied to already-normalized
    /// data, the stored record composes, so de-normalization always
    /// recovers the original raw values.
    pub fn normalize(&self) -> Result<Self> {
        let train = self.subset(Split::Train);
        if train.nrows() < 2 {
            return Err(Error::contract(format!(
                "need >= 2 training rows to estimate statistics, got {}",
                train.nrows()
            )));
        }
        let d = self.dim();
        let mut mean = Array1::zeros(d);
        let mut std = Array1::zeros(d);
        for j in 0..d {
            let col = train.column(j);
            let m = col.sum() / col.len() as f64;
            let ss: f64 = col.iter().map(|v| (v - m) * (v - m)).sum();
            mean[j] = m;
            std[j] = (ss / (col.len() - 1) as f64).sqrt().max(STD_FLOOR);
        }

        let mut matrix = self.matrix.clone();
        for mut row in matrix.rows_mut() {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }

        let record = match &self.normalization {
            None => Normalization { mean, std },
            // Compose with the existing record: x_raw = s0·x + m0 and
            // x = s1·z + m1 give x_raw = (s0·s1)·z + (s0·m1 + m0).
            Some(prev) => Normalization {
                mean: &prev.mean + &(&prev.std * &mean),
                std: &prev.std * &std,
            },
        };
        let mut out = self.clone();
        out.matrix = matrix;
        out.normalization = Some(record);
        Ok(out)
    }

    /// Undo [`normalize`](Self::normalize) exactly, dropping the record.
    pub fn de_normalize(&self) -> Result<Self> {
        let record = self
            .normalization
            .as_ref()
            .ok_or_else(|| Error::contract("dataset carries no normalization record"))?;
        let d = self.dim();
        let mut matrix = self.matrix.clone();
        for mut row in matrix.rows_mut() {
            for j in 0..d {
                row[j] = row[j] * record.std[j] + record.mean[j];
            }
        }
        let mut out = self.clone();
        out.matrix = matrix;
        out.normalization = None;
        Ok(out)
    }

    /// Apply an element-wise stretch, recording the original values.
    pub fn stretch(&self, kind: StretchKind) -> Result<Self> {
        if self.stretch.is_some() {
            return Err(Error::contract(
                "dataset is already stretched; un-stretch first",
            ));
        }
        if let StretchKind::Affine { a, .. } = kind {
            if a == 0.0 || !kind.apply(1.0).is_finite() {
                return Err(Error::contract("affine stretch must be invertible"));
            }
        }
        let mut out = self.clone();
        out.original = Some(self.matrix.clone());
        out.matrix = self.matrix.mapv(|v| kind.apply(v));
        out.stretch = Some(kind);
        Ok(out)
    }

    /// Invert the stretch arithmetically (cube root or inverse affine),
    /// dropping the stretch records.
    pub fn un_stretch(&self) -> Result<Self> {
        let kind = self
            .stretch
            .ok_or_else(|| Error::contract("dataset carries no stretch record"))?;
        let mut out = self.clone();
        out.matrix = self.matrix.mapv(|v| kind.invert(v));
        out.stretch = None;
        out.original = None;
        Ok(out)
    }

    /// Per-row Σ_d log|f′(x_d)| evaluated at the recorded original
    /// values. Zero rows when no stretch is applied (f = identity).
    /// Subtracting the mean correction from a stretched-space mean NLL
    /// restates it in the original space.
    pub fn log_abs_jacobian_correction(&self) -> Array1<f64> {
        match (self.stretch, &self.original) {
            (Some(kind), Some(original)) => {
                let mut c = Array1::zeros(original.nrows());
                for (row, orig) in c.iter_mut().zip(original.rows()) {
                    *row = orig.iter().map(|&x| kind.log_abs_derivative(x)).sum();
                }
                c
            }
            _ => Array1::zeros(self.len()),
        }
    }

    /// Dequantize integer-valued data: add U[0,1) noise and scale to
    /// [0,1), recording the `D·ln(levels)` offset used when reporting
    /// bits per dimension.
    pub fn dequantize_uniform(&self, levels: u32, rng: &mut impl Rng) -> Result<Self> {
        if levels < 2 {
            return Err(Error::contract("levels must be >= 2"));
        }
        for (idx, &v) in self.matrix.indexed_iter() {
            if v.fract() != 0.0 || v < 0.0 || v >= levels as f64 {
                return Err(Error::contract(format!(
                    "value {v} at row {}, column {} is not an integer in [0, {levels})",
                    idx.0, idx.1
                )));
            }
        }
        let mut out = self.clone();
        out.matrix = self
            .matrix
            .mapv(|v| (v + rng.random_range(0.0..1.0)) / levels as f64);
        out.dequant = Some(Dequant {
            levels,
            offset_nats: self.dim() as f64 * (levels as f64).ln(),
        });
        Ok(out)
    }

    /// JSON manifest describing shape, splits, and every preprocessing
    /// record; written next to saved datasets so a run is replayable.
    pub fn manifest_json(&self) -> String {
        #[derive(Serialize)]
        struct SplitCounts {
            train: usize,
            val: usize,
            test: usize,
        }
        #[derive(Serialize)]
        struct Manifest<'a> {
            rows: usize,
            dim: usize,
            splits: SplitCounts,
            #[serde(skip_serializing_if = "Option::is_none")]
            toy: Option<&'a str>,
            #[serde(skip_serializing_if = "Option::is_none")]
            seed: Option<u64>,
            #[serde(skip_serializing_if = "Option::is_none")]
            normalization: Option<&'a Normalization>,
            #[serde(skip_serializing_if = "Option::is_none")]
            stretch: Option<StretchKind>,
            #[serde(skip_serializing_if = "Option::is_none")]
            dequantization: Option<Dequant>,
        }
        let manifest = Manifest {
            rows: self.len(),
            dim: self.dim(),
            splits: SplitCounts {
                train: self.rows_for(Split::Train).len(),
                val: self.rows_for(Split::Val).len(),
                test: self.rows_for(Split::Test).len(),
            },
            toy: self.toy.map(|t| t.as_str()),
            seed: self.seed,
            normalization: self.normalization.as_ref(),
            stretch: self.stretch,
            dequantization: self.dequant,
        };
        serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail")
    }

    /// Write [`manifest_json`](Self::manifest_json) to a file.
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.manifest_json())?;
        Ok(())
    }
}
