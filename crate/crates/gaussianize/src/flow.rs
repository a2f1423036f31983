//! The full flow: alternating rotation and element-wise
//! Gaussianization layers.
//!
//! A [`GaussianizationFlow`] of depth L applies
//!
//! ```text
//! z = Ψ_L(R_L( … Ψ_1(R_1 x) … ))
//! ```
//!
//! where each R is an orthogonal layer ([`Rotation`]) and each Ψ is an
//! element-wise kernel CDF map ([`KernelLayer`]). Rotations have unit
//! Jacobian determinant, so the per-row log |det J| is the sum of the
//! kernel layers' contributions, and the exact log-likelihood under a
//! standard normal base follows from the change of variables.
//!
//! Inversion runs the layers backwards (bisection through each kernel
//! map, transposition of each rotation), which makes sampling a single
//! batched inverse of Gaussian noise. The reverse pass replays cached
//! intermediates from a [`FlowTape`] to produce exact gradients for
//! every anchor, log-bandwidth, and reflection vector.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{KernelCache, KernelGrad, KernelLayer};
use crate::rotation::{HouseholderStack, PatchRotation, Rotation, RotationCache, RotationGrad};
use crate::special::std_normal_logpdf;

/// Format tag written into every checkpoint; readers reject others.
pub const CHECKPOINT_VERSION: &str = "gaussianize.flow.v1";

/// How each rotation layer is parameterized when building a flow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RotationKind {
    /// Dense Householder product with this many reflection vectors.
    Householder { reflections: usize },
    /// Patch rotation for flattened `image_side`×`image_side` inputs:
    /// a random circular shift plus per-patch Householder stacks of
    /// `reflections` vectors each.
    Patch {
        image_side: usize,
        patch_side: usize,
        reflections: usize,
    },
}

/// Architecture of a flow: what [`GaussianizationFlow::init_data_dependent`]
/// builds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowConfig {
    /// Data dimension D.
    pub dim: usize,
    /// Number of rotation/kernel pairs L.
    pub layers: usize,
    /// Mixture components per coordinate K.
    pub anchors: usize,
    /// Rotation parameterization shared by all layers.
    pub rotation: RotationKind,
}

impl FlowConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::contract("flow dim must be >= 1"));
        }
        if self.layers == 0 {
            return Err(Error::contract("flow depth must be >= 1"));
        }
        if self.anchors == 0 {
            return Err(Error::contract("anchor count must be >= 1"));
        }
        if let RotationKind::Patch {
            image_side,
            patch_side,
            ..
        } = self.rotation
        {
            if image_side * image_side != self.dim {
                return Err(Error::contract(format!(
                    "patch rotations need dim = image_side², got dim {} with side {image_side}",
                    self.dim
                )));
            }
            if patch_side == 0 || image_side % patch_side != 0 {
                return Err(Error::contract(format!(
                    "patch side {patch_side} must divide image side {image_side}"
                )));
            }
        }
        Ok(())
    }
}

/// Provenance recorded on a flow and carried through checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowMeta {
    /// Seed used for the data-dependent init, when known.
    pub seed: Option<u64>,
    /// Preset name the architecture came from, when any.
    pub preset: Option<String>,
}

/// Alternating rotation/kernel flow with exact likelihoods.
#[derive(Debug, Clone)]
pub struct GaussianizationFlow {
    dim: usize,
    /// Pair l applies its rotation first, then its kernel layer.
    pairs: Vec<(Rotation, KernelLayer)>,
    meta: FlowMeta,
}

/// Outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct FlowForward {
    /// Mapped batch, shape (n, D).
    pub z: Array2<f64>,
    /// Per-row log |det J| accumulated over kernel layers, length n.
    pub logdet: Array1<f64>,
}

/// Per-pair caches recorded by a forward pass.
#[derive(Debug)]
struct PairTape {
    rotation: RotationCache,
    kernel: KernelCache,
}

/// Cached intermediates for one reverse pass.
///
/// A tape is consumed by [`GaussianizationFlow::backward`]; feeding it
/// in a second time is a contract error.
#[derive(Debug)]
pub struct FlowTape {
    entries: Option<Vec<PairTape>>,
    batch: usize,
    dim: usize,
}

impl FlowTape {
    /// Rows in the batch this tape was recorded from.
    pub fn batch_len(&self) -> usize {
        self.batch
    }

    /// Whether [`GaussianizationFlow::backward`] has already consumed
    /// this tape.
    pub fn is_consumed(&self) -> bool {
        self.entries.is_none()
    }
}

/// Gradients for one rotation/kernel pair.
#[derive(Debug, Clone)]
pub struct PairGradients {
    pub rotation: RotationGrad,
    pub kernel: KernelGrad,
}

/// Gradients for every parameter in the flow, keyed structurally:
/// `pairs[l]` holds pair l's rotation and kernel gradients.
#[derive(Debug, Clone)]
pub struct FlowGradients {
    pub pairs: Vec<PairGradients>,
    /// Gradient with respect to the input batch.
    pub dx: Array2<f64>,
}

impl FlowGradients {
    /// Concatenate in the canonical parameter order (see
    /// [`GaussianizationFlow::flatten_params`]).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for pair in &self.pairs {
            match &pair.rotation {
                RotationGrad::Householder(g) => {
                    for dv in &g.d_vectors {
                        out.extend(dv.iter());
                    }
                }
                RotationGrad::Patch(g) => {
                    for block in &g.d_blocks {
                        for dv in block {
                            out.extend(dv.iter());
                        }
                    }
                }
            }
            out.extend(pair.kernel.d_anchors.iter());
            out.extend(pair.kernel.d_log_bandwidths.iter());
        }
        out
    }

    /// Human-readable location of the first non-finite gradient entry,
    /// if any: used to name the offending layer on aborts.
    pub fn first_non_finite(&self) -> Option<String> {
        for (l, pair) in self.pairs.iter().enumerate() {
            let rot_bad = match &pair.rotation {
                RotationGrad::Householder(g) => {
                    g.d_vectors.iter().any(|v| !v.iter().all(|c| c.is_finite()))
                }
                RotationGrad::Patch(g) => g
                    .d_blocks
                    .iter()
                    .any(|b| b.iter().any(|v| !v.iter().all(|c| c.is_finite()))),
            };
            if rot_bad {
                return Some(format!("rotation of layer pair {l}"));
            }
            if !pair.kernel.d_anchors.iter().all(|c| c.is_finite()) {
                return Some(format!("kernel anchors of layer pair {l}"));
            }
            if !pair.kernel.d_log_bandwidths.iter().all(|c| c.is_finite()) {
                return Some(format!("kernel bandwidths of layer pair {l}"));
            }
        }
        None
    }
}

impl GaussianizationFlow {
    /// Build from explicit pairs. Every layer must share `dim`, and at
    /// least one pair is required.
    pub fn new(dim: usize, pairs: Vec<(Rotation, KernelLayer)>, meta: FlowMeta) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("flow depth must be >= 1"));
        }
        for (l, (rot, kern)) in pairs.iter().enumerate() {
            if rot.dim() != dim {
                return Err(Error::contract(format!(
                    "rotation of pair {l} has dim {}, flow has {dim}",
                    rot.dim()
                )));
            }
            if kern.dim() != dim {
                return Err(Error::contract(format!(
                    "kernel of pair {l} has dim {}, flow has {dim}",
                    kern.dim()
                )));
            }
        }
        Ok(GaussianizationFlow { dim, pairs, meta })
    }

    /// Data-dependent construction: rotations are drawn at random, and
    /// each kernel layer is initialized from a subsample of the data
    /// pushed through everything built so far, so layer l+1's anchors
    /// live where layer l's output actually puts mass.
    ///
    /// The subsample has N = min(K, rows) rows drawn without
    /// replacement; at least K data rows are required.
    pub fn init_data_dependent(
        data: &ArrayView2<f64>,
        config: &FlowConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (rows, d) = data.dim();
        if d != config.dim {
            return Err(Error::contract(format!(
                "data has {d} columns, config.dim is {}",
                config.dim
            )));
        }
        if rows < config.anchors {
            return Err(Error::contract(format!(
                "need at least K = {} rows for initialization, got {rows}",
                config.anchors
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite entry in initialization data"));
        }

        let n_init = config.anchors.min(rows);
        let idx = sample_rows(rng, rows, n_init);
        let mut state = Array2::zeros((n_init, d));
        for (out_row, &src) in idx.iter().enumerate() {
            state.row_mut(out_row).assign(&data.row(src));
        }

        let mut pairs = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let rotation = match config.rotation {
                RotationKind::Householder { reflections } => {
                    Rotation::Householder(HouseholderStack::init_random(d, reflections, rng))
                }
                RotationKind::Patch {
                    image_side,
                    patch_side,
                    reflections,
                } => {
                    let shift = rng.random_range(0..d);
                    Rotation::Patch(PatchRotation::init_random(
                        image_side, patch_side, reflections, shift, rng,
                    )?)
                }
            };
            state = rotation.apply(&state.view())?;
            let kernel = KernelLayer::init_from_data(&state.view(), config.anchors, rng)?;
            state = kernel.forward(&state.view())?.z;
            pairs.push((rotation, kernel));
        }

        GaussianizationFlow::new(
            d,
            pairs,
            FlowMeta {
                seed: None,
                preset: None,
            },
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rotation/kernel pairs L.
    pub fn depth(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(Rotation, KernelLayer)] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [(Rotation, KernelLayer)] {
        &mut self.pairs
    }

    pub fn meta(&self) -> &FlowMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut FlowMeta {
        &mut self.meta
    }

    /// z = T(x) with the accumulated per-row log |det J|.
    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<FlowForward> {
        Ok(self.forward_impl(x, false)?.0)
    }

    /// As [`forward`](Self::forward), also recording the caches the
    /// reverse pass needs.
    pub fn forward_with_tape(&self, x: &ArrayView2<f64>) -> Result<(FlowForward, FlowTape)> {
        let (out, tape) = self.forward_impl(x, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    fn forward_impl(
        &self,
        x: &ArrayView2<f64>,
        want_tape: bool,
    ) -> Result<(FlowForward, Option<FlowTape>)> {
        self.check_batch(x)?;
        let n = x.nrows();
        let mut state = x.to_owned();
        let mut logdet = Array1::zeros(n);
        let mut entries = want_tape.then(|| Vec::with_capacity(self.pairs.len()));
        for (l, (rot, kern)) in self.pairs.iter().enumerate() {
            if let Some(entries) = entries.as_mut() {
                let (rotated, rcache) = rot.apply_with_cache(&state.view())?;
                let kf = kern
                    .forward(&rotated.view())
                    .map_err(|e| e.at_layer_pair(l))?;
                logdet += &kf.logdet;
                state = kf.z;
                entries.push(PairTape {
                    rotation: rcache,
                    kernel: kf.cache,
                });
            } else {
                let rotated = rot.apply(&state.view())?;
                let kf = kern
                    .forward(&rotated.view())
                    .map_err(|e| e.at_layer_pair(l))?;
                logdet += &kf.logdet;
                state = kf.z;
            }
        }
        let tape = entries.map(|e| FlowTape {
            entries: Some(e),
            batch: n,
            dim: self.dim,
        });
        Ok((FlowForward { z: state, logdet }, tape))
    }

    /// Per-row log p(x) in nats: Σ_d log φ(z_d) + log |det J|.
    pub fn log_likelihood(&self, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        let fwd = self.forward(x)?;
        let mut ll = fwd.logdet;
        for (row, z_row) in ll.iter_mut().zip(fwd.z.rows()) {
            *row += z_row.iter().map(|&z| std_normal_logpdf(z)).sum::<f64>();
        }
        Ok(ll)
    }

    /// Mean negative log-likelihood in nats.
    pub fn mean_nll(&self, x: &ArrayView2<f64>) -> Result<f64> {
        let ll = self.log_likelihood(x)?;
        Ok(-ll.mean().expect("nonempty batch"))
    }

    /// x = T⁻¹(z): layers inverted in reverse order, kernel maps by
    /// bisection and rotations by transposition.
    pub fn inverse(&self, z: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(z)?;
        let mut state = z.to_owned();
        for (l, (rot, kern)) in self.pairs.iter().enumerate().rev() {
            let pre_kernel = kern
                .inverse(&state.view())
                .map_err(|e| e.at_layer_pair(l))?;
            state = rot.apply_transpose(&pre_kernel.view())?;
        }
        Ok(state)
    }

    /// Draw n rows: z ~ N(0, I_D) from the rng, mapped through the
    /// inverse.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::contract("sample count must be >= 1"));
        }
        let z = Array2::from_shape_fn((n, self.dim), |_| StandardNormal.sample(rng));
        self.inverse(&z.view())
    }

    /// Reverse pass: given cotangents for z and for the per-row
    /// log-det, accumulate gradients for every parameter.
    ///
    /// For the mean NLL over a batch of B rows the seeds are
    /// dz = z / B and dlogdet = −1/B per row.
    ///
    /// Consumes the tape; a second call with the same tape is a
    /// contract error.
    pub fn backward(
        &self,
        tape: &mut FlowTape,
        dz: &ArrayView2<f64>,
        dlogdet: &ArrayView1<f64>,
    ) -> Result<FlowGradients> {
        if tape.dim != self.dim {
            return Err(Error::contract(format!(
                "tape dim {} != flow dim {}",
                tape.dim, self.dim
            )));
        }
        let entries = tape
            .entries
            .take()
            .ok_or_else(|| Error::contract("flow tape already consumed by a previous backward"))?;
        if entries.len() != self.pairs.len() {
            return Err(Error::contract(format!(
                "tape has {} entries, flow has {} pairs",
                entries.len(),
                self.pairs.len()
            )));
        }
        if dz.nrows() != tape.batch || dz.ncols() != self.dim {
            return Err(Error::contract(format!(
                "dz shape {:?} != taped batch shape {:?}",
                dz.dim(),
                (tape.batch, self.dim)
            )));
        }
        if dlogdet.len() != tape.batch {
            return Err(Error::contract(format!(
                "dlogdet length {} != taped batch {}",
                dlogdet.len(),
                tape.batch
            )));
        }

        let mut grad = dz.to_owned();
        let mut rev: Vec<PairGradients> = Vec::with_capacity(self.pairs.len());
        for ((rot, kern), entry) in self.pairs.iter().zip(entries.iter()).rev() {
            let kg = kern.backward(&entry.kernel, &grad.view(), dlogdet)?;
            let rg = rot.backward(&entry.rotation, &kg.dx.view())?;
            grad = rg.dx().clone();
            rev.push(PairGradients {
                rotation: rg,
                kernel: kg,
            });
        }
        rev.reverse();
        Ok(FlowGradients {
            pairs: rev,
            dx: grad,
        })
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.pairs
            .iter()
            .map(|(rot, kern)| {
                rotation_param_count(rot) + 2 * kern.dim() * kern.num_anchors()
            })
            .sum()
    }

    /// All parameters in canonical order: for each pair, rotation
    /// vectors first (Householder stacks in reflection order; patch
    /// blocks in chunk order, reflections within), then kernel anchors
    /// row-major, then log-bandwidths row-major.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (rot, kern) in &self.pairs {
            for_each_vector(rot, |v| out.extend(v.iter()));
            out.extend(kern.anchors().iter());
            out.extend(kern.log_bandwidths().iter());
        }
        out
    }

    /// Overwrite every parameter from a flat slice in the canonical
    /// order of [`flatten_params`](Self::flatten_params).
    pub fn set_params_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "flat parameter vector has {} entries, flow has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        for (rot, kern) in &mut self.pairs {
            for_each_vector_mut(rot, |v| {
                for c in v.iter_mut() {
                    *c = flat[pos];
                    pos += 1;
                }
            });
            for c in kern.anchors_mut().iter_mut() {
                *c = flat[pos];
                pos += 1;
            }
            for c in kern.log_bandwidths_mut().iter_mut() {
                *c = flat[pos];
                pos += 1;
            }
        }
        debug_assert_eq!(pos, flat.len());
        Ok(())
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::contract("empty batch"));
        }
        if x.ncols() != self.dim {
            return Err(Error::contract(format!(
                "batch has {} columns, flow has dim {}",
                x.ncols(),
                self.dim
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite entry in batch"));
        }
        Ok(())
    }

    // --- checkpointing ---

    /// Serialize to the versioned JSON checkpoint document.
    pub fn to_json(&self) -> String {
        let doc = self.to_doc();
        serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail")
    }

    /// Parse a checkpoint document produced by [`to_json`](Self::to_json).
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("invalid JSON: {e}")))?;
        let found = value
            .get("version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("missing version field".into()))?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: found.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let doc: CheckpointDoc = serde_json::from_value(value)
            .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        GaussianizationFlow::from_doc(doc)
    }

    /// Write the checkpoint document to a file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Load a checkpoint file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        GaussianizationFlow::from_json(&text)
    }

    fn to_doc(&self) -> CheckpointDoc {
        let mut layers = Vec::with_capacity(2 * self.pairs.len());
        for (rot, kern) in &self.pairs {
            layers.push(match rot {
                Rotation::Householder(h) => {
                    let m = h.num_reflections();
                    let mut data = Vec::with_capacity(m * h.dim());
                    for v in h.vectors() {
                        data.extend(v.iter());
                    }
                    LayerDoc::Householder {
                        dim: h.dim(),
                        vectors: FlatArray {
                            shape: vec![m, h.dim()],
                            data,
                        },
                    }
                }
                Rotation::Patch(p) => LayerDoc::PatchRotation {
                    image_side: p.image_side(),
                    patch_side: p.patch_side(),
                    shift: p.shift(),
                    blocks: p
                        .blocks()
                        .iter()
                        .map(|b| {
                            let mut data = Vec::with_capacity(b.num_reflections() * b.dim());
                            for v in b.vectors() {
                                data.extend(v.iter());
                            }
                            FlatArray {
                                shape: vec![b.num_reflections(), b.dim()],
                                data,
                            }
                        })
                        .collect(),
                },
            });
            layers.push(LayerDoc::Kernel {
                anchors: FlatArray {
                    shape: vec![kern.dim(), kern.num_anchors()],
                    data: kern.anchors().iter().copied().collect(),
                },
                log_bandwidths: FlatArray {
                    shape: vec![kern.dim(), kern.num_anchors()],
                    data: kern.log_bandwidths().iter().copied().collect(),
                },
            });
        }
        CheckpointDoc {
            version: CHECKPOINT_VERSION.to_string(),
            dim: self.dim,
            seed: self.meta.seed,
            preset: self.meta.preset.clone(),
            layers,
        }
    }

    fn from_doc(doc: CheckpointDoc) -> Result<Self> {
        if doc.layers.len() % 2 != 0 {
            return Err(Error::Checkpoint(format!(
                "layer list has odd length {}",
                doc.layers.len()
            )));
        }
        let mut pairs = Vec::with_capacity(doc.layers.len() / 2);
        let mut iter = doc.layers.into_iter();
        while let Some(first) = iter.next() {
            let second = iter.next().expect("even length checked");
            let rotation = match first {
                LayerDoc::Householder { dim, vectors } => {
                    let rows = unflatten_matrix(&vectors, "householder vectors")?;
                    if vectors.shape.len() != 2 || vectors.shape[1] != dim {
                        return Err(Error::Checkpoint(format!(
                            "householder vector shape {:?} does not match dim {dim}",
                            vectors.shape
                        )));
                    }
                    Rotation::Householder(HouseholderStack::new(dim, rows)?)
                }
                LayerDoc::PatchRotation {
                    image_side,
                    patch_side,
                    shift,
                    blocks,
                } => {
                    let stacks = blocks
                        .iter()
                        .map(|b| {
                            let rows = unflatten_matrix(b, "patch block vectors")?;
                            HouseholderStack::new(patch_side * patch_side, rows)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Rotation::Patch(PatchRotation::new(image_side, patch_side, shift, stacks)?)
                }
                LayerDoc::Kernel { .. } => {
                    return Err(Error::Checkpoint(
                        "expected a rotation layer at an even position".into(),
                    ));
                }
            };
            let kernel = match second {
                LayerDoc::Kernel {
                    anchors,
                    log_bandwidths,
                } => {
                    let a = to_matrix(&anchors, "anchors")?;
                    let h = to_matrix(&log_bandwidths, "log_bandwidths")?;
                    KernelLayer::new(a, h)?
                }
                _ => {
                    return Err(Error::Checkpoint(
                        "expected a kernel layer at an odd position".into(),
                    ));
                }
            };
            pairs.push((rotation, kernel));
        }
        let mut flow = GaussianizationFlow::new(doc.dim, pairs, FlowMeta::default())?;
        flow.meta.seed = doc.seed;
        flow.meta.preset = doc.preset;
        Ok(flow)
    }
}

fn rotation_param_count(rot: &Rotation) -> usize {
    match rot {
        Rotation::Householder(h) => h.num_reflections() * h.dim(),
        Rotation::Patch(p) => p
            .blocks()
            .iter()
            .map(|b| b.num_reflections() * b.dim())
            .sum(),
    }
}

fn for_each_vector(rot: &Rotation, mut f: impl FnMut(&Array1<f64>)) {
    match rot {
        Rotation::Householder(h) => h.vectors().iter().for_each(&mut f),
        Rotation::Patch(p) => {
            for b in p.blocks() {
                b.vectors().iter().for_each(&mut f);
            }
        }
    }
}

fn for_each_vector_mut(rot: &mut Rotation, mut f: impl FnMut(&mut Array1<f64>)) {
    match rot {
        Rotation::Householder(h) => h.vectors_mut().iter_mut().for_each(&mut f),
        Rotation::Patch(p) => {
            for b in p.blocks_mut() {
                b.vectors_mut().iter_mut().for_each(&mut f);
            }
        }
    }
}

/// Draw `k` distinct indices from 0..n, order randomized.
fn sample_rows(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut chosen = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let i = rng.random_range(0..n);
        if chosen.insert(i) {
            out.push(i);
        }
    }
    out
}

// --- checkpoint document ---

/// Column-count-carrying flat array, the only numeric container in a
/// checkpoint. Values round-trip exactly: the writer emits the
/// shortest decimal that parses back to the same f64, never more than
/// 17 significant digits.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct FlatArray {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerDoc {
    Householder {
        dim: usize,
        vectors: FlatArray,
    },
    PatchRotation {
        image_side: usize,
        patch_side: usize,
        shift: usize,
        blocks: Vec<FlatArray>,
    },
    Kernel {
        anchors: FlatArray,
        log_bandwidths: FlatArray,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    version: String,
    dim: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    preset: Option<String>,
    layers: Vec<LayerDoc>,
}

pub(crate) fn check_flat(arr: &FlatArray, what: &str) -> Result<()> {
    let expected: usize = arr.shape.iter().product();
    if arr.shape.len() != 2 {
        return Err(Error::Checkpoint(format!(
            "{what}: expected a rank-2 shape, got {:?}",
            arr.shape
        )));
    }
    if arr.data.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{what}: shape {:?} wants {expected} values, got {}",
            arr.shape,
            arr.data.len()
        )));
    }
    Ok(())
}

fn unflatten_matrix(arr: &FlatArray, what: &str) -> Result<Vec<Array1<f64>>> {
    check_flat(arr, what)?;
    let (rows, cols) = (arr.shape[0], arr.shape[1]);
    Ok((0..rows)
        .map(|r| Array1::from_iter(arr.data[r * cols..(r + 1) * cols].iter().copied()))
        .collect())
}

pub(crate) fn to_matrix(arr: &FlatArray, what: &str) -> Result<Array2<f64>> {
    check_flat(arr, what)?;
    Array2::from_shape_vec((arr.shape[0], arr.shape[1]), arr.data.clone())
        .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn symmetric_kernel(dim: usize) -> KernelLayer {
        KernelLayer::new(Array2::zeros((dim, 1)), Array2::zeros((dim, 1))).unwrap()
    }

    fn random_flow(dim: usize, layers: usize, anchors: usize, seed: u64) -> GaussianizationFlow {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((200, dim), |_| StandardNormal.sample(&mut rng));
        let config = FlowConfig {
            dim,
            layers,
            anchors,
            rotation: RotationKind::Householder { reflections: dim },
        };
        GaussianizationFlow::init_data_dependent(&data.view(), &config, &mut rng).unwrap()
    }

    #[test]
    fn identity_like_flow_fixes_origin() {
        // K=1 kernel with anchor 0 maps 0 to σ(0)=1/2 and on to
        // Φ⁻¹(1/2)=0; rotations fix 0; so the whole flow fixes 0.
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let pairs = (0..2)
            .map(|_| {
                (
                    Rotation::Householder(HouseholderStack::init_random(2, 3, &mut rng)),
                    symmetric_kernel(2),
                )
            })
            .collect();
        let flow = GaussianizationFlow::new(2, pairs, FlowMeta::default()).unwrap();
        let out = flow.forward(&Array2::zeros((1, 2)).view()).unwrap();
        assert_eq!(out.z, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn single_pair_matches_kernel_layer() {
        let kern = KernelLayer::new(
            array![[-1.0, 0.5, 2.0]],
            array![[-0.2, 0.1, 0.0]],
        )
        .unwrap();
        let flow = GaussianizationFlow::new(
            1,
            vec![(
                Rotation::Householder(HouseholderStack::identity(1)),
                kern.clone(),
            )],
            FlowMeta::default(),
        )
        .unwrap();
        let x = array![[-2.0], [0.3], [1.9]];
        let via_flow = flow.forward(&x.view()).unwrap();
        let via_kernel = kern.forward(&x.view()).unwrap();
        assert_eq!(via_flow.z, via_kernel.z);
        assert_eq!(via_flow.logdet, via_kernel.logdet);
    }

    #[test]
    fn anchor_shift_equivariance() {
        // With identity rotations, shifting the data and the anchors by
        // the same offset leaves every likelihood bit unchanged.
        let kern = KernelLayer::new(array![[-1.0, 0.0, 1.5]], Array2::zeros((1, 3))).unwrap();
        let shifted = KernelLayer::new(array![[-1.0 + 0.7, 0.7, 1.5 + 0.7]], Array2::zeros((1, 3)))
            .unwrap();
        let base = GaussianizationFlow::new(
            1,
            vec![(Rotation::Householder(HouseholderStack::identity(1)), kern)],
            FlowMeta::default(),
        )
        .unwrap();
        let moved = GaussianizationFlow::new(
            1,
            vec![(
                Rotation::Householder(HouseholderStack::identity(1)),
                shifted,
            )],
            FlowMeta::default(),
        )
        .unwrap();
        let x = array![[-0.9], [0.1], [2.0]];
        let x_shift = x.mapv(|v| v + 0.7);
        let ll_base = base.log_likelihood(&x.view()).unwrap();
        let ll_moved = moved.log_likelihood(&x_shift.view()).unwrap();
        assert_eq!(ll_base, ll_moved);
    }

    #[test]
    fn inverse_round_trip() {
        for (dim, layers) in [(1, 1), (3, 2), (10, 5)] {
            let flow = random_flow(dim, layers, 12, 7 + dim as u64);
            let mut rng = ChaCha20Rng::seed_from_u64(40 + dim as u64);
            let x = Array2::from_shape_fn((30, dim), |_| {
                let s: f64 = StandardNormal.sample(&mut rng);
                s
            });
            let fwd = flow.forward(&x.view()).unwrap();
            let back = flow.inverse(&fwd.z.view()).unwrap();
            let max_err = (&back - &x).iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(
                max_err < 1e-6,
                "round trip error {max_err:e} at dim {dim}, depth {layers}"
            );
        }
    }

    #[test]
    fn inverse_of_origin_is_anchor() {
        let kern = KernelLayer::new(array![[1.7], [-0.4]], array![[0.3], [-0.1]]).unwrap();
        let flow = GaussianizationFlow::new(
            2,
            vec![(Rotation::Householder(HouseholderStack::identity(2)), kern)],
            FlowMeta::default(),
        )
        .unwrap();
        let x = flow.inverse(&Array2::zeros((1, 2)).view()).unwrap();
        assert!((x[[0, 0]] - 1.7).abs() < 1e-8);
        assert!((x[[0, 1]] + 0.4).abs() < 1e-8);
    }

    #[test]
    fn sampling_is_seeded() {
        let flow = random_flow(3, 2, 10, 50);
        let a = flow.sample(20, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        let b = flow.sample(20, &mut ChaCha20Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = flow.sample(20, &mut ChaCha20Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_mean_near_origin_for_symmetric_flow() {
        // Single symmetric kernel: the pushforward is a logistic
        // distribution centered at 0, so the sample mean concentrates
        // there at the usual 1/√n rate.
        let flow = GaussianizationFlow::new(
            2,
            vec![(
                Rotation::Householder(HouseholderStack::identity(2)),
                symmetric_kernel(2),
            )],
            FlowMeta::default(),
        )
        .unwrap();
        let n = 4096;
        let samples = flow.sample(n, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
        let bound = 4.0 / (n as f64).sqrt();
        for d in 0..2 {
            let mean = samples.column(d).mean().unwrap();
            assert!(mean.abs() < bound, "coordinate {d} mean {mean}");
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let flow = random_flow(2, 1, 8, 60);
        let err = flow.forward(&Array2::zeros((0, 2)).view()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(matches!(
            flow.sample(0, &mut ChaCha20Rng::seed_from_u64(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_depth_rejected() {
        let err = GaussianizationFlow::new(2, Vec::new(), FlowMeta::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tape_reuse_is_contract_error() {
        let flow = random_flow(2, 2, 8, 61);
        let mut rng = ChaCha20Rng::seed_from_u64(62);
        let x = Array2::from_shape_fn((5, 2), |_| StandardNormal.sample(&mut rng));
        let (fwd, mut tape) = flow.forward_with_tape(&x.view()).unwrap();
        let dz = fwd.z.mapv(|v| v / 5.0);
        let dld = Array1::from_elem(5, -1.0 / 5.0);
        flow.backward(&mut tape, &dz.view(), &dld.view()).unwrap();
        assert!(tape.is_consumed());
        let err = flow
            .backward(&mut tape, &dz.view(), &dld.view())
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn rotation_gradients_vanish_at_origin() {
        // A zero input batch makes every reflection see the zero
        // vector, where rotating cannot change anything: all reflection
        // gradients must vanish identically.
        let flow = random_flow(3, 1, 8, 63);
        let x = Array2::zeros((4, 3));
        let (fwd, mut tape) = flow.forward_with_tape(&x.view()).unwrap();
        let dz = fwd.z.mapv(|v| v / 4.0);
        let dld = Array1::from_elem(4, -0.25);
        let grads = flow.backward(&mut tape, &dz.view(), &dld.view()).unwrap();
        match &grads.pairs[0].rotation {
            RotationGrad::Householder(g) => {
                for dv in &g.d_vectors {
                    assert!(dv.iter().all(|&v| v == 0.0), "nonzero rotation gradient");
                }
            }
            RotationGrad::Patch(_) => unreachable!("flow built with householder rotations"),
        }
    }

    #[test]
    fn init_uses_rotated_subsample_as_anchors() {
        // With exactly K data rows the initialization subsample is the
        // whole dataset, so the first kernel's anchor columns are the
        // rotated data rows (in some order).
        let k = 6;
        let mut rng = ChaCha20Rng::seed_from_u64(64);
        let data = Array2::from_shape_fn((k, 2), |_| StandardNormal.sample(&mut rng));
        let config = FlowConfig {
            dim: 2,
            layers: 1,
            anchors: k,
            rotation: RotationKind::Householder { reflections: 2 },
        };
        let flow =
            GaussianizationFlow::init_data_dependent(&data.view(), &config, &mut rng).unwrap();
        let (rot, kern) = &flow.pairs()[0];
        let rotated = rot.apply(&data.view()).unwrap();
        let mut expected: Vec<(f64, f64)> = rotated
            .rows()
            .into_iter()
            .map(|r| (r[0], r[1]))
            .collect();
        let mut got: Vec<(f64, f64)> = (0..k)
            .map(|j| (kern.anchors()[[0, j]], kern.anchors()[[1, j]]))
            .collect();
        expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(expected, got);
    }

    #[test]
    fn init_is_seeded() {
        let mut rng_data = ChaCha20Rng::seed_from_u64(65);
        let data = Array2::from_shape_fn((100, 3), |_| StandardNormal.sample(&mut rng_data));
        let config = FlowConfig {
            dim: 3,
            layers: 2,
            anchors: 10,
            rotation: RotationKind::Householder { reflections: 3 },
        };
        let a = GaussianizationFlow::init_data_dependent(
            &data.view(),
            &config,
            &mut ChaCha20Rng::seed_from_u64(7),
        )
        .unwrap();
        let b = GaussianizationFlow::init_data_dependent(
            &data.view(),
            &config,
            &mut ChaCha20Rng::seed_from_u64(7),
        )
        .unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn init_requires_enough_rows() {
        let data = Array2::zeros((5, 2));
        let config = FlowConfig {
            dim: 2,
            layers: 1,
            anchors: 10,
            rotation: RotationKind::Householder { reflections: 2 },
        };
        let err = GaussianizationFlow::init_data_dependent(
            &data.view(),
            &config,
            &mut ChaCha20Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn patch_flow_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(66);
        let data = Array2::from_shape_fn((80, 16), |_| StandardNormal.sample(&mut rng));
        let config = FlowConfig {
            dim: 16,
            layers: 2,
            anchors: 12,
            rotation: RotationKind::Patch {
                image_side: 4,
                patch_side: 2,
                reflections: 4,
            },
        };
        let flow =
            GaussianizationFlow::init_data_dependent(&data.view(), &config, &mut rng).unwrap();
        let x = Array2::from_shape_fn((10, 16), |_| {
            let s: f64 = StandardNormal.sample(&mut rng);
            s
        });
        let fwd = flow.forward(&x.view()).unwrap();
        let back = flow.inverse(&fwd.z.view()).unwrap();
        let max_err = (&back - &x).iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(max_err < 1e-6, "round trip error {max_err:e}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_document() {
        let flow = random_flow(3, 2, 6, 70);
        let json = flow.to_json();
        let reloaded = GaussianizationFlow::from_json(&json).unwrap();
        assert_eq!(json, reloaded.to_json());
        // Behavior is preserved too, bit for bit.
        let x = array![[0.1, -0.5, 2.0]];
        assert_eq!(
            flow.log_likelihood(&x.view()).unwrap(),
            reloaded.log_likelihood(&x.view()).unwrap()
        );
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flow.json");
        let mut flow = random_flow(2, 1, 5, 71);
        flow.meta_mut().seed = Some(123);
        flow.meta_mut().preset = Some("toy2d".into());
        flow.save(&path).unwrap();
        let reloaded = GaussianizationFlow::load(&path).unwrap();
        assert_eq!(reloaded.meta().seed, Some(123));
        assert_eq!(reloaded.meta().preset.as_deref(), Some("toy2d"));
        assert_eq!(flow.to_json(), reloaded.to_json());
    }

    #[test]
    fn checkpoint_version_mismatch() {
        let flow = random_flow(2, 1, 5, 72);
        let doctored = flow
            .to_json()
            .replace(CHECKPOINT_VERSION, "gaussianize.flow.v0");
        let err = GaussianizationFlow::from_json(&doctored).unwrap_err();
        match err {
            Error::CheckpointVersion { found, expected } => {
                assert_eq!(found, "gaussianize.flow.v0");
                assert_eq!(expected, CHECKPOINT_VERSION);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_rejects_malformed_shapes() {
        let flow = random_flow(2, 1, 5, 73);
        let json = flow.to_json();
        // Truncate one data array: shape product no longer matches.
        let bad = json.replacen("\"data\": [", "\"data\": [99.0,", 1);
        let err = GaussianizationFlow::from_json(&bad).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
    }

    #[test]
    fn flat_params_round_trip() {
        let mut flow = random_flow(3, 2, 7, 74);
        let flat = flow.flatten_params();
        assert_eq!(flat.len(), flow.num_params());
        let before = flow.to_json();
        flow.set_params_from_flat(&flat).unwrap();
        assert_eq!(before, flow.to_json());
        let err = flow.set_params_from_flat(&flat[1..]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn gradient_flatten_matches_param_layout() {
        let flow = random_flow(2, 2, 6, 75);
        let mut rng = ChaCha20Rng::seed_from_u64(76);
        let x = Array2::from_shape_fn((8, 2), |_| StandardNormal.sample(&mut rng));
        let (fwd, mut tape) = flow.forward_with_tape(&x.view()).unwrap();
        let dz = fwd.z.mapv(|v| v / 8.0);
        let dld = Array1::from_elem(8, -1.0 / 8.0);
        let grads = flow.backward(&mut tape, &dz.view(), &dld.view()).unwrap();
        assert_eq!(grads.flatten().len(), flow.num_params());
        assert!(grads.first_non_finite().is_none());
    }
}
