//! Trainable orthogonal layers.
//!
//! Two parameterizations, both exactly invertible by transposition and
//! both with zero log-det:
//!
//! - [`HouseholderStack`]: a product R = H_1 H_2 … H_m of reflections
//!   H = I − 2vvᵀ/‖v‖², applied right-to-left (v_m touches the input
//!   first). Each H is symmetric and involutive, so Rᵀ is the same
//!   stack walked in the opposite order. Applying a stack costs O(m·D)
//!   per row; R is never materialized outside tests and diagnostics.
//! - [`PatchRotation`]: for flattened L×L images, a circular shift by c
//!   positions followed by an independent Householder stack on each of
//!   the k² contiguous p²-sized patches (L = p·k). The shift is a
//!   permutation and the blocks are orthogonal, so the composite is
//!   orthogonal; its transpose un-reflects each block and then shifts
//!   back.
//!
//! Reflection vectors are free parameters. Divisions use ‖v‖² + V_EPS
//! so a vector driven toward zero during training degrades the
//! reflection toward identity instead of exploding.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Lower bound on ‖v‖² at construction; also the additive guard added
/// to ‖v‖² in every division.
pub const V_EPS: f64 = 1e-12;

/// Materialization guard: refuse to build matrices larger than this.
pub const MAX_MATERIALIZE_DIM: usize = 4096;

/// Ordered product of Householder reflections.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholderStack {
    dim: usize,
    /// v_1 .. v_m; the represented transform is H_1 H_2 … H_m.
    vectors: Vec<Array1<f64>>,
}

/// Per-reflection inputs recorded by [`HouseholderStack::apply_with_cache`].
#[derive(Debug, Clone)]
pub struct HouseholderCache {
    /// `inputs[j]` is the batch entering reflection j (application
    /// order runs j = m−1 down to 0).
    inputs: Vec<Array2<f64>>,
    batch: usize,
}

/// Gradients for one stack: per-reflection dv plus dx.
#[derive(Debug, Clone)]
pub struct HouseholderGrad {
    pub d_vectors: Vec<Array1<f64>>,
    pub dx: Array2<f64>,
}

impl HouseholderStack {
    /// Build from explicit reflection vectors (may be empty: identity).
    pub fn new(dim: usize, vectors: Vec<Array1<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("rotation dim must be >= 1"));
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::contract(format!(
                    "reflection vector {i} has length {}, expected {dim}",
                    v.len()
                )));
            }
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::domain(format!("non-finite reflection vector {i}")));
            }
            if v.dot(v) < V_EPS {
                return Err(Error::contract(format!(
                    "reflection vector {i} has squared norm below {V_EPS:e}"
                )));
            }
        }
        Ok(HouseholderStack { dim, vectors })
    }

    /// The identity transform (no reflections).
    pub fn identity(dim: usize) -> Self {
        HouseholderStack {
            dim,
            vectors: Vec::new(),
        }
    }

    /// Draw `m` reflection vectors with i.i.d. standard normal entries,
    /// redrawing any vector whose squared norm falls below [`V_EPS`].
    pub fn init_random(dim: usize, m: usize, rng: &mut impl Rng) -> Self {
        let mut vectors = Vec::with_capacity(m);
        for _ in 0..m {
            let v = loop {
                let v = Array1::from_iter((0..dim).map(|_| StandardNormal.sample(rng)));
                if v.dot(&v) >= V_EPS {
                    break v;
                }
            };
            vectors.push(v);
        }
        HouseholderStack { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_reflections(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[Array1<f64>] {
        &self.vectors
    }

    /// Mutable access for optimizers.
    pub fn vectors_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.vectors
    }

    /// y = R x for every batch row.
    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let mut y = x.to_owned();
        for v in self.vectors.iter().rev() {
            reflect_in_place(v, &mut y);
        }
        Ok(y)
    }

    /// As [`apply`](Self::apply), recording each reflection's input for
    /// the reverse pass.
    pub fn apply_with_cache(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, HouseholderCache)> {
        self.check_batch(x)?;
        let m = self.vectors.len();
        let mut inputs = vec![Array2::zeros((0, 0)); m];
        let mut y = x.to_owned();
        for j in (0..m).rev() {
            inputs[j] = y.clone();
            reflect_in_place(&self.vectors[j], &mut y);
        }
        Ok((
            y,
            HouseholderCache {
                inputs,
                batch: x.nrows(),
            },
        ))
    }

    /// x = Rᵀ y: the same reflections in the opposite order.
    pub fn apply_transpose(&self, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(y)?;
        let mut x = y.to_owned();
        for v in self.vectors.iter() {
            reflect_in_place(v, &mut x);
        }
        Ok(x)
    }

    /// Reverse-mode gradients under upstream cotangent `dy`.
    ///
    /// For H x = x − 2v(vᵀx)/s with s = ‖v‖² + V_EPS:
    ///
    /// ```text
    /// x̄ = H ȳ
    /// v̄ = −(2/s)[(vᵀȳ)x + (vᵀx)ȳ] + (4(vᵀx)(vᵀȳ)/s²)v,  summed over rows
    /// ```
    pub fn backward(
        &self,
        cache: &HouseholderCache,
        dy: &ArrayView2<f64>,
    ) -> Result<HouseholderGrad> {
        let m = self.vectors.len();
        if cache.inputs.len() != m {
            return Err(Error::contract(format!(
                "cache has {} stages, stack has {m} reflections",
                cache.inputs.len()
            )));
        }
        if dy.nrows() != cache.batch || dy.ncols() != self.dim {
            return Err(Error::contract(format!(
                "dy shape {:?} != cached batch shape {:?}",
                dy.dim(),
                (cache.batch, self.dim)
            )));
        }

        let mut d_vectors = vec![Array1::zeros(self.dim); m];
        let mut grad = dy.to_owned();
        // Reflection 0 was applied last, so the reverse pass walks
        // j = 0 .. m−1, consuming the cached input of each stage.
        for j in 0..m {
            let v = &self.vectors[j];
            let x = &cache.inputs[j];
            let s = v.dot(v) + V_EPS;
            let dv = &mut d_vectors[j];
            for (x_row, g_row) in x.rows().into_iter().zip(grad.rows()) {
                let vx = x_row.dot(v);
                let vg = g_row.dot(v);
                let c1 = -2.0 / s;
                let c2 = 4.0 * vx * vg / (s * s);
                for ((dvi, &xi), (&gi, &vi)) in dv
                    .iter_mut()
                    .zip(x_row.iter())
                    .zip(g_row.iter().zip(v.iter()))
                {
                    *dvi += c1 * (vg * xi + vx * gi) + c2 * vi;
                }
            }
            // Propagate through the reflection: x̄ = H ȳ.
            reflect_in_place(v, &mut grad);
        }

        Ok(HouseholderGrad {
            d_vectors,
            dx: grad,
        })
    }

    /// Dense D×D matrix with column i = R e_i. Test/diagnostic path.
    pub fn materialize(&self) -> Result<Array2<f64>> {
        materialize_guard(self.dim)?;
        let eye = Array2::<f64>::eye(self.dim);
        // Row i of apply(I) is R e_i, i.e. column i of R.
        Ok(self.apply(&eye.view())?.reversed_axes())
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::contract(format!(
                "batch has {} columns, rotation expects {}",
                x.ncols(),
                self.dim
            )));
        }
        Ok(())
    }
}

/// Apply H(v) to every row of `batch` in place.
fn reflect_in_place(v: &Array1<f64>, batch: &mut Array2<f64>) {
    let s = v.dot(v) + V_EPS;
    for mut row in batch.rows_mut() {
        let coef = 2.0 * row.dot(v) / s;
        for (r, &vi) in row.iter_mut().zip(v.iter()) {
            *r -= coef * vi;
        }
    }
}

fn materialize_guard(dim: usize) -> Result<()> {
    if dim > MAX_MATERIALIZE_DIM {
        return Err(Error::contract(format!(
            "refusing to materialize a {dim}×{dim} matrix (limit {MAX_MATERIALIZE_DIM})"
        )));
    }
    Ok(())
}

/// Patch-based rotation for flattened L×L inputs: circular shift by c,
/// then an independent Householder stack per contiguous p²-chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRotation {
    image_side: usize,
    patch_side: usize,
    shift: usize,
    /// k² stacks of dim p², in chunk order.
    blocks: Vec<HouseholderStack>,
}

/// Cache for [`PatchRotation::apply_with_cache`]: one stack cache per block.
#[derive(Debug, Clone)]
pub struct PatchCache {
    block_caches: Vec<HouseholderCache>,
    batch: usize,
}

/// Gradients for a patch rotation: per-block reflection gradients + dx.
#[derive(Debug, Clone)]
pub struct PatchGrad {
    /// `d_blocks[b]` holds the dv list for block b.
    pub d_blocks: Vec<Vec<Array1<f64>>>,
    pub dx: Array2<f64>,
}

impl PatchRotation {
    /// Build from explicit blocks. Requires L divisible by p, shift in
    /// [0, L²), and exactly (L/p)² blocks of dim p².
    pub fn new(
        image_side: usize,
        patch_side: usize,
        shift: usize,
        blocks: Vec<HouseholderStack>,
    ) -> Result<Self> {
        if image_side == 0 || patch_side == 0 || image_side % patch_side != 0 {
            return Err(Error::contract(format!(
                "patch side {patch_side} must divide image side {image_side}"
            )));
        }
        let n = image_side * image_side;
        if shift >= n {
            return Err(Error::contract(format!(
                "shift {shift} out of range for {n} pixels"
            )));
        }
        let k = image_side / patch_side;
        let expected_blocks = k * k;
        if blocks.len() != expected_blocks {
            return Err(Error::contract(format!(
                "expected {expected_blocks} blocks, got {}",
                blocks.len()
            )));
        }
        let block_dim = patch_side * patch_side;
        for (b, stack) in blocks.iter().enumerate() {
            if stack.dim() != block_dim {
                return Err(Error::contract(format!(
                    "block {b} has dim {}, expected {block_dim}",
                    stack.dim()
                )));
            }
        }
        Ok(PatchRotation {
            image_side,
            patch_side,
            shift,
            blocks,
        })
    }

    /// Random blocks (`reflections` vectors each) and the given shift.
    pub fn init_random(
        image_side: usize,
        patch_side: usize,
        reflections: usize,
        shift: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if image_side == 0 || patch_side == 0 || image_side % patch_side != 0 {
            return Err(Error::contract(format!(
                "patch side {patch_side} must divide image side {image_side}"
            )));
        }
        let k = image_side / patch_side;
        let block_dim = patch_side * patch_side;
        let blocks = (0..k * k)
            .map(|_| HouseholderStack::init_random(block_dim, reflections, rng))
            .collect();
        PatchRotation::new(image_side, patch_side, shift, blocks)
    }

    /// Total dimension L².
    pub fn dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn blocks(&self) -> &[HouseholderStack] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [HouseholderStack] {
        &mut self.blocks
    }

    /// Shift then per-block reflections.
    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(x)?;
        let mut y = self.shifted(x);
        let bd = self.patch_side * self.patch_side;
        for (b, stack) in self.blocks.iter().enumerate() {
            let cols = b * bd..(b + 1) * bd;
            let chunk = y.slice(ndarray::s![.., cols.clone()]).to_owned();
            let out = stack.apply(&chunk.view())?;
            y.slice_mut(ndarray::s![.., cols]).assign(&out);
        }
        Ok(y)
    }

    /// As [`apply`](Self::apply), caching per-block reflection inputs.
    pub fn apply_with_cache(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, PatchCache)> {
        self.check_batch(x)?;
        let mut y = self.shifted(x);
        let bd = self.patch_side * self.patch_side;
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (b, stack) in self.blocks.iter().enumerate() {
            let cols = b * bd..(b + 1) * bd;
            let chunk = y.slice(ndarray::s![.., cols.clone()]).to_owned();
            let (out, cache) = stack.apply_with_cache(&chunk.view())?;
            y.slice_mut(ndarray::s![.., cols]).assign(&out);
            block_caches.push(cache);
        }
        Ok((
            y,
            PatchCache {
                block_caches,
                batch: x.nrows(),
            },
        ))
    }

    /// Transpose: per-block transposes, then the inverse shift.
    pub fn apply_transpose(&self, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(y)?;
        let bd = self.patch_side * self.patch_side;
        let mut t = y.to_owned();
        for (b, stack) in self.blocks.iter().enumerate() {
            let cols = b * bd..(b + 1) * bd;
            let chunk = t.slice(ndarray::s![.., cols.clone()]).to_owned();
            let out = stack.apply_transpose(&chunk.view())?;
            t.slice_mut(ndarray::s![.., cols]).assign(&out);
        }
        Ok(self.unshifted(&t))
    }

    /// Reverse-mode gradients under upstream cotangent `dy`.
    pub fn backward(&self, cache: &PatchCache, dy: &ArrayView2<f64>) -> Result<PatchGrad> {
        if cache.block_caches.len() != self.blocks.len() {
            return Err(Error::contract(format!(
                "cache has {} blocks, rotation has {}",
                cache.block_caches.len(),
                self.blocks.len()
            )));
        }
        if dy.nrows() != cache.batch || dy.ncols() != self.dim() {
            return Err(Error::contract(format!(
                "dy shape {:?} != cached batch shape {:?}",
                dy.dim(),
                (cache.batch, self.dim())
            )));
        }
        let bd = self.patch_side * self.patch_side;
        let mut d_blocks = Vec::with_capacity(self.blocks.len());
        let mut d_shifted = Array2::zeros(dy.raw_dim());
        for (b, stack) in self.blocks.iter().enumerate() {
            let cols = b * bd..(b + 1) * bd;
            let dchunk = dy.slice(ndarray::s![.., cols.clone()]).to_owned();
            let g = stack.backward(&cache.block_caches[b], &dchunk.view())?;
            d_shifted.slice_mut(ndarray::s![.., cols]).assign(&g.dx);
            d_blocks.push(g.d_vectors);
        }
        // The shift is a permutation; its adjoint is the inverse shift.
        Ok(PatchGrad {
            d_blocks,
            dx: self.unshifted(&d_shifted),
        })
    }

    /// Dense matrix; test/diagnostic path.
    pub fn materialize(&self) -> Result<Array2<f64>> {
        materialize_guard(self.dim())?;
        let eye = Array2::<f64>::eye(self.dim());
        Ok(self.apply(&eye.view())?.reversed_axes())
    }

    /// shifted[i] = x[(i + c) mod n] per row.
    fn shifted(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let n = self.dim();
        let c = self.shift;
        let mut out = Array2::zeros(x.raw_dim());
        for (src, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
            for i in 0..n {
                dst[i] = src[(i + c) % n];
            }
        }
        out
    }

    /// Inverse permutation of [`shifted`](Self::shifted).
    fn unshifted(&self, y: &Array2<f64>) -> Array2<f64> {
        let n = self.dim();
        let c = self.shift;
        let mut out = Array2::zeros(y.raw_dim());
        for (src, mut dst) in y.rows().into_iter().zip(out.rows_mut()) {
            for i in 0..n {
                dst[(i + c) % n] = src[i];
            }
        }
        out
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(Error::contract(format!(
                "batch has {} columns, patch rotation expects {}",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Either rotation parameterization, as stored in a flow layer pair.
#[derive(Debug, Clone, PartialEq)]
pub enum Rotation {
    Householder(HouseholderStack),
    Patch(PatchRotation),
}

/// Cache matching the [`Rotation`] variant it came from.
#[derive(Debug, Clone)]
pub enum RotationCache {
    Householder(HouseholderCache),
    Patch(PatchCache),
}

/// Gradients matching the [`Rotation`] variant.
#[derive(Debug, Clone)]
pub enum RotationGrad {
    Householder(HouseholderGrad),
    Patch(PatchGrad),
}

impl RotationGrad {
    /// dx regardless of variant.
    pub fn dx(&self) -> &Array2<f64> {
        match self {
            RotationGrad::Householder(g) => &g.dx,
            RotationGrad::Patch(g) => &g.dx,
        }
    }
}

impl Rotation {
    pub fn dim(&self) -> usize {
        match self {
            Rotation::Householder(h) => h.dim(),
            Rotation::Patch(p) => p.dim(),
        }
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Rotation::Householder(h) => h.apply(x),
            Rotation::Patch(p) => p.apply(x),
        }
    }

    pub fn apply_with_cache(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, RotationCache)> {
        match self {
            Rotation::Householder(h) => {
                let (y, c) = h.apply_with_cache(x)?;
                Ok((y, RotationCache::Householder(c)))
            }
            Rotation::Patch(p) => {
                let (y, c) = p.apply_with_cache(x)?;
                Ok((y, RotationCache::Patch(c)))
            }
        }
    }

    pub fn apply_transpose(&self, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Rotation::Householder(h) => h.apply_transpose(y),
            Rotation::Patch(p) => p.apply_transpose(y),
        }
    }

    pub fn backward(&self, cache: &RotationCache, dy: &ArrayView2<f64>) -> Result<RotationGrad> {
        match (self, cache) {
            (Rotation::Householder(h), RotationCache::Householder(c)) => {
                Ok(RotationGrad::Householder(h.backward(c, dy)?))
            }
            (Rotation::Patch(p), RotationCache::Patch(c)) => {
                Ok(RotationGrad::Patch(p.backward(c, dy)?))
            }
            _ => Err(Error::contract("rotation cache variant mismatch")),
        }
    }

    pub fn materialize(&self) -> Result<Array2<f64>> {
        match self {
            Rotation::Householder(h) => h.materialize(),
            Rotation::Patch(p) => p.materialize(),
        }
    }
}
