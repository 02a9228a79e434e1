//! One learnable kernel branch evaluated from boundary faces to targets.
//!
//! Pair rows are laid out target-major: row `t * S + s` holds the pair
//! (target `t`, source `s`). Per pair, the vector bag is
//! `[n̂_s, face vectors.., global vectors.., r]` and the scalar bag is
//! `face scalars ++ global scalars`. The Padé output is split into
//! `n_scalar_out` scalar channels followed by one coefficient group per
//! output vector, each group spanning the reprojection basis.

use std::ops::Range;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Face;
use crate::invariants::{self, dot, norm, ScalarBag, VectorBag, ZERO_NORM};
use crate::netcore::{Bound, Pade, ParamId, ParameterStore, Tape, Var};

/// `(1 - e^-q) / (q + 1)^((d-1)/2)` and its derivative with respect to
/// `q = |r|^2`.
pub(crate) fn envelope_scalar(q: f64, dim: usize) -> (f64, f64) {
    let h = (dim as f64 - 1.0) / 2.0;
    let num = -(-q).exp_m1();
    let den = (q + 1.0).powf(h);
    let value = num / den;
    let deriv = (-q).exp() / den - h * num / (den * (q + 1.0));
    (value, deriv)
}

/// Far-field envelope: zero at `r = 0`, decaying as `|r|^-(d-1)`.
pub fn envelope(r: &[f64], dim: usize) -> Result<f64> {
    if dim != 2 && dim != 3 {
        return Err(Error::Domain(format!("envelope is defined for d = 2 or 3, got {dim}")));
    }
    Ok(envelope_scalar(dot(r, r), dim).0)
}

/// Construction-time channel layout of one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub dim: usize,
    /// Whether the source normal enters the vector bag. Always true in the
    /// model; switching it off gives the radially symmetric test kernel.
    pub include_normal: bool,
    pub n_face_scalars: usize,
    pub n_global_scalars: usize,
    pub n_face_vectors: usize,
    pub n_global_vectors: usize,
    pub n_harmonics: usize,
    pub hidden: Vec<usize>,
    pub order_n: u32,
    pub order_d: u32,
    pub n_scalar_out: usize,
    pub n_vector_out: usize,
    /// Test hook: a fixed vector added to `r̂`, which breaks equivariance.
    #[doc(hidden)]
    pub basis_leak: Option<Vec<f64>>,
}

impl KernelSpec {
    /// Vectors other than `r`.
    pub fn n_source_vectors(&self) -> usize {
        usize::from(self.include_normal) + self.n_face_vectors + self.n_global_vectors
    }

    pub fn n_vectors(&self) -> usize {
        self.n_source_vectors() + 1
    }

    pub fn n_scalars(&self) -> usize {
        self.n_face_scalars + self.n_global_scalars
    }

    /// `r̂` plus an axis and a dipole entry per non-`r` vector.
    pub fn basis_len(&self) -> usize {
        1 + 2 * self.n_source_vectors()
    }

    pub fn input_width(&self) -> usize {
        self.n_scalars() + invariants::encoded_len(self.n_vectors(), self.n_harmonics)
    }

    pub fn pade_width(&self) -> usize {
        self.n_scalar_out + self.n_vector_out * self.basis_len()
    }

    /// Columns of an evaluated output: scalars, then `d` per vector.
    pub fn output_width(&self) -> usize {
        self.n_scalar_out + self.n_vector_out * self.dim
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(&self.hidden);
        sizes.push(self.pade_width());
        sizes
    }

    /// Padé weights plus the scale offset.
    pub fn num_parameters(&self) -> usize {
        Pade::num_scalars(&self.layer_sizes()) + 1
    }

    fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::Config(format!("dimension must be 2 or 3, got {}", self.dim)));
        }
        if self.n_harmonics == 0 {
            return Err(Error::Config("n_harmonics must be >= 1".into()));
        }
        if self.pade_width() == 0 {
            return Err(Error::Config("kernel has no outputs".into()));
        }
        Ok(())
    }
}

/// One kernel at one reference length: Padé core plus learned scale offset.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBranch {
    pub spec: KernelSpec,
    pub pade: Pade,
    pub alpha: ParamId,
}

impl KernelBranch {
    pub fn init<R: Rng>(store: &mut ParameterStore, prefix: &str, spec: KernelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let pade = Pade::init(store, prefix, &spec.layer_sizes(), spec.order_n, spec.order_d, rng);
        let alpha = store.add(format!("{prefix}/alpha"), Array2::zeros((1, 1)));
        Ok(KernelBranch { spec, pade, alpha })
    }

    pub fn attach(store: &ParameterStore, prefix: &str, spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        let pade = Pade::attach(store, prefix, &spec.layer_sizes(), spec.order_n, spec.order_d)?;
        let alpha = store
            .id(&format!("{prefix}/alpha"))
            .ok_or_else(|| Error::Shape(format!("missing parameter {prefix}/alpha")))?;
        Ok(KernelBranch { spec, pade, alpha })
    }

    /// Kernel values for prepared pair rows.
    ///
    /// `r`: `[P, d]`; `vectors`: the non-`r` vector bag, each `[P, d]`;
    /// `scalars`: `[P, k]` or `None` when the kernel has no scalar inputs.
    /// Returns `[P, output_width]`.
    pub fn pair_core(
        &self,
        tape: &mut Tape,
        params: &Bound,
        r: Var,
        vectors: &[Var],
        scalars: Option<Var>,
    ) -> Result<Var> {
        let spec = &self.spec;
        if vectors.len() != spec.n_source_vectors() {
            return Err(Error::Shape(format!(
                "kernel expects {} source vectors, got {}",
                spec.n_source_vectors(),
                vectors.len()
            )));
        }
        let mut bag: Vec<Var> = vectors.to_vec();
        bag.push(r);
        let mut features = Vec::new();
        if let Some(s) = scalars {
            features.push(s);
        }
        for &v in &bag {
            features.push(tape.smoothlog_norm(v));
        }
        for a in 0..bag.len() {
            for b in a + 1..bag.len() {
                features.push(tape.legendre_pairs(bag[a], bag[b], spec.n_harmonics));
            }
        }
        let xi = tape.concat_cols(&features);
        let raw = self.pade.forward(tape, params, xi)?;
        let env = tape.envelope(r);
        let z = tape.mul(raw, env);

        let mut outputs = Vec::with_capacity(1 + spec.n_vector_out);
        if spec.n_scalar_out > 0 {
            outputs.push(tape.slice_cols(z, 0, spec.n_scalar_out));
        }
        if spec.n_vector_out > 0 {
            let basis = self.basis(tape, r, vectors);
            for k in 0..spec.n_vector_out {
                let offset = spec.n_scalar_out + k * basis.len();
                outputs.push(tape.contract(z, offset, &basis));
            }
        }
        Ok(if outputs.len() == 1 { outputs[0] } else { tape.concat_cols(&outputs) })
    }

    fn basis(&self, tape: &mut Tape, r: Var, vectors: &[Var]) -> Vec<Var> {
        let mut r_hat = tape.unit_vec(r);
        if let Some(leak) = &self.spec.basis_leak {
            let c = tape.constant(Array2::from_shape_vec((1, leak.len()), leak.clone()).unwrap());
            r_hat = tape.add(r_hat, c);
        }
        let mut basis = vec![r_hat];
        for &v in vectors {
            let axis = tape.axis_basis(v);
            basis.push(axis);
            basis.push(tape.reject(axis, r_hat));
        }
        basis
    }

    /// Aggregated output `[T, output_width]` at `targets` from `sources`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Bound,
        sources: &SourceInputs,
        globals: &GlobalInputs,
        targets: &Array2<f64>,
        ell: f64,
    ) -> Result<Var> {
        let spec = &self.spec;
        let (n_src, n_tgt, dim) = (sources.len(), targets.nrows(), spec.dim);
        sources.check(tape, spec)?;
        globals.check(spec)?;
        if targets.ncols() != dim {
            return Err(Error::Shape(format!("targets have {} columns, expected {dim}", targets.ncols())));
        }
        if !(ell > 0.0) {
            return Err(Error::Domain(format!("reference length must be > 0, got {ell}")));
        }
        let n_pairs = n_src * n_tgt;

        let mut diff = Array2::zeros((n_pairs, dim));
        for t in 0..n_tgt {
            for s in 0..n_src {
                let mut row = diff.row_mut(t * n_src + s);
                for k in 0..dim {
                    row[k] = (targets[[t, k]] - sources.centroids[[s, k]]) / ell;
                }
            }
        }
        let diff = tape.constant(diff);
        let neg_alpha = tape.scale(params.var(self.alpha), -1.0);
        let inv_scale = tape.exp(neg_alpha);
        let r = tape.mul(diff, inv_scale);

        let mut vectors = Vec::with_capacity(spec.n_source_vectors());
        if spec.include_normal {
            let n = tape.constant(sources.normals.clone());
            vectors.push(tape.tile_rows(n, n_tgt));
        }
        for &v in &sources.vectors {
            vectors.push(tape.tile_rows(v, n_tgt));
        }
        for g in &globals.vectors {
            let c = tape.constant(g.clone().insert_axis(Axis(0)));
            vectors.push(tape.tile_rows(c, n_pairs));
        }

        let mut scalar_parts = Vec::new();
        if let Some(fs) = sources.scalars {
            scalar_parts.push(tape.tile_rows(fs, n_tgt));
        }
        if !globals.scalars.is_empty() {
            let c = tape.constant(globals.scalars.clone().insert_axis(Axis(0)));
            scalar_parts.push(tape.tile_rows(c, n_pairs));
        }
        let scalars = match scalar_parts.len() {
            0 => None,
            1 => Some(scalar_parts[0]),
            _ => Some(tape.concat_cols(&scalar_parts)),
        };

        let pairs = self.pair_core(tape, params, r, &vectors, scalars)?;
        let areas = tape.constant(sources.areas.clone().insert_axis(Axis(1)));
        let weights = tape.mul(sources.strengths, areas);
        Ok(tape.pair_aggregate(pairs, weights))
    }
}

/// Per-face kernel inputs of one source partition.
#[derive(Debug, Clone)]
pub struct SourceInputs {
    pub centroids: Array2<f64>,
    pub normals: Array2<f64>,
    pub areas: Array1<f64>,
    /// `[S, 1]` strengths `w_s`.
    pub strengths: Var,
    /// `[S, n_face_scalars]`, absent when the kernel takes none.
    pub scalars: Option<Var>,
    /// `n_face_vectors` entries of `[S, d]`.
    pub vectors: Vec<Var>,
}

impl SourceInputs {
    /// Geometry of `mesh` with unit strengths and no face latents.
    pub fn from_mesh(tape: &mut Tape, mesh: &crate::geometry::BoundaryMesh) -> Self {
        SourceInputs {
            centroids: mesh.centroids(),
            normals: mesh.normals(),
            areas: mesh.areas(),
            strengths: tape.constant(Array2::ones((mesh.len(), 1))),
            scalars: None,
            vectors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, tape: &Tape, spec: &KernelSpec) -> Result<()> {
        let (n, d) = (self.len(), spec.dim);
        let mut bad = Vec::new();
        if self.centroids.ncols() != d || self.normals.dim() != (n, d) || self.areas.len() != n {
            bad.push("geometry".to_string());
        }
        if tape.shape(self.strengths) != (n, 1) {
            bad.push("strengths".into());
        }
        match (self.scalars, spec.n_face_scalars) {
            (None, 0) => {}
            (Some(v), k) if tape.shape(v) == (n, k) => {}
            _ => bad.push("face scalars".into()),
        }
        if self.vectors.len() != spec.n_face_vectors || self.vectors.iter().any(|&v| tape.shape(v) != (n, d)) {
            bad.push("face vectors".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Shape(format!("inconsistent source inputs: {}", bad.join(", "))))
        }
    }
}

/// Problem-wide dimensionless inputs shared by every pair.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalInputs {
    pub scalars: Array1<f64>,
    pub vectors: Vec<Array1<f64>>,
}

impl GlobalInputs {
    fn check(&self, spec: &KernelSpec) -> Result<()> {
        if self.scalars.len() != spec.n_global_scalars {
            return Err(Error::Shape(format!(
                "kernel expects {} global scalars, got {}",
                spec.n_global_scalars,
                self.scalars.len()
            )));
        }
        if self.vectors.len() != spec.n_global_vectors || self.vectors.iter().any(|v| v.len() != spec.dim) {
            return Err(Error::Shape(format!(
                "kernel expects {} global vectors of dimension {}",
                spec.n_global_vectors, spec.dim
            )));
        }
        Ok(())
    }
}

/// Inputs of a single source-target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairContext {
    pub r: Vec<f64>,
    /// `[n̂_s, face vectors.., global vectors.., r]`.
    pub vectors: VectorBag,
    /// Face scalars followed by global scalars.
    pub scalars: ScalarBag,
}

impl PairContext {
    fn source_vectors(&self) -> &[Vec<f64>] {
        &self.vectors.0[..self.vectors.0.len() - 1]
    }
}

pub fn build_pair_context(
    face: &Face,
    target: &[f64],
    ell_eff: f64,
    face_vectors: &VectorBag,
    face_scalars: &ScalarBag,
    global_vectors: &VectorBag,
    global_scalars: &ScalarBag,
) -> Result<PairContext> {
    let d = face.dim();
    if target.len() != d || face_vectors.0.iter().chain(&global_vectors.0).any(|v| v.len() != d) {
        return Err(Error::Shape(format!("pair inputs must all be {d}-dimensional")));
    }
    let r = invariants::relative_position(target, &face.centroid, ell_eff)?;
    let mut vectors = vec![face.normal.clone()];
    vectors.extend(face_vectors.0.iter().cloned());
    vectors.extend(global_vectors.0.iter().cloned());
    vectors.push(r.clone());
    let mut scalars = face_scalars.0.clone();
    scalars.extend(&global_scalars.0);
    Ok(PairContext {
        r,
        vectors: VectorBag(vectors),
        scalars: ScalarBag(scalars),
    })
}

/// Reprojection basis, smoothlog weights included.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionBasis(pub Vec<Vec<f64>>);

/// `r̂` (zero at `r = 0`), then per non-`r` vector `S(|v|) v̂` and
/// `-(S(|v|) v̂)` with its `r̂` component removed. No renormalization.
pub fn build_basis(ctx: &PairContext) -> ReprojectionBasis {
    let unit = |v: &[f64]| -> Vec<f64> {
        let n = norm(v);
        if n < ZERO_NORM {
            vec![0.0; v.len()]
        } else {
            v.iter().map(|x| x / n).collect()
        }
    };
    let r_hat = unit(&ctx.r);
    let mut basis = vec![r_hat.clone()];
    for v in ctx.source_vectors() {
        let n = norm(v);
        let w = invariants::smoothlog_unchecked(n);
        let axis: Vec<f64> = unit(v).iter().map(|x| w * x).collect();
        let along = dot(&axis, &r_hat);
        let dipole = axis.iter().zip(&r_hat).map(|(a, r)| -a + along * r).collect();
        basis.push(axis);
        basis.push(dipole);
    }
    ReprojectionBasis(basis)
}

/// Scalar and vector outputs of `branch` for one pair.
pub fn kernel_pair(
    store: &ParameterStore,
    branch: &KernelBranch,
    ctx: &PairContext,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let spec = &branch.spec;
    let dim = ctx.r.len();
    let rowvec = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
    if ctx.scalars.0.len() != spec.n_scalars() {
        return Err(Error::Shape(format!(
            "kernel expects {} scalars, context has {}",
            spec.n_scalars(),
            ctx.scalars.0.len()
        )));
    }
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let r = tape.constant(rowvec(&ctx.r));
    let source_vectors = if spec.include_normal {
        ctx.source_vectors()
    } else {
        &ctx.source_vectors()[1..]
    };
    let vectors: Vec<Var> = source_vectors.iter().map(|v| tape.constant(rowvec(v))).collect();
    let scalars = (!ctx.scalars.0.is_empty()).then(|| tape.constant(rowvec(&ctx.scalars.0)));
    let out = branch.pair_core(&mut tape, &params, r, &vectors, scalars)?;
    tape.check_finite()?;
    let row = tape.value(out).row(0).to_vec();
    let scalars = row[..spec.n_scalar_out].to_vec();
    let vectors = row[spec.n_scalar_out..].chunks(dim).map(<[f64]>::to_vec).collect();
    Ok((scalars, vectors))
}

/// `K_t = Σ_s w_s a_s K_ts` with compensated summation over sources.
/// `per_pair` rows are target-major (`t * S + s`).
pub fn aggregate(per_pair: &Array2<f64>, strengths: &[f64], areas: &[f64]) -> Result<Array2<f64>> {
    let n_src = strengths.len();
    if areas.len() != n_src || (n_src == 0 && per_pair.nrows() != 0) || (n_src > 0 && per_pair.nrows() % n_src != 0) {
        return Err(Error::Shape("pair rows must be targets x sources".into()));
    }
    let n_tgt = if n_src == 0 { 0 } else { per_pair.nrows() / n_src };
    let m = per_pair.ncols();
    let mut out = Array2::zeros((n_tgt, m));
    for t in 0..n_tgt {
        for c in 0..m {
            out[[t, c]] = crate::sum::neumaier((0..n_src).map(|s| strengths[s] * areas[s] * per_pair[[t * n_src + s, c]]));
        }
    }
    Ok(out)
}

/// Evaluates `eval` on consecutive target ranges of at most `chunk_size`
/// and stacks the rows. Each target is evaluated exactly once.
pub fn evaluate_chunked<F>(n_targets: usize, n_cols: usize, chunk_size: usize, mut eval: F) -> Result<Array2<f64>>
where
    F: FnMut(Range<usize>) -> Result<Array2<f64>>,
{
    if chunk_size == 0 {
        return Err(Error::Domain("chunk size must be >= 1".into()));
    }
    let mut out = Array2::zeros((n_targets, n_cols));
    let mut start = 0;
    while start < n_targets {
        let end = (start + chunk_size).min(n_targets);
        let block = eval(start..end)?;
        if block.dim() != (end - start, n_cols) {
            return Err(Error::Shape(format!(
                "chunk {start}..{end} returned shape {:?}",
                block.dim()
            )));
        }
        out.slice_mut(s![start..end, ..]).assign(&block);
        start = end;
    }
    Ok(out)
}

/// [`evaluate_chunked`] with chunks spread over `threads` workers. Every
/// row is computed by the same code path as in the serial version, so the
/// result is identical for any thread count.
pub fn evaluate_chunked_par<F>(
    n_targets: usize,
    n_cols: usize,
    chunk_size: usize,
    threads: usize,
    eval: F,
) -> Result<Array2<f64>>
where
    F: Fn(Range<usize>) -> Result<Array2<f64>> + Sync,
{
    if threads <= 1 || chunk_size == 0 || n_targets <= chunk_size {
        return evaluate_chunked(n_targets, n_cols, chunk_size, eval);
    }
    let n_chunks = n_targets.div_ceil(chunk_size);
    let per = n_chunks.div_ceil(threads) * chunk_size;
    let blocks: Vec<Result<Array2<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_targets)
            .step_by(per)
            .map(|start| {
                let end = (start + per).min(n_targets);
                let eval = &eval;
                scope.spawn(move || evaluate_chunked(end - start, n_cols, chunk_size, |r| eval(r.start + start..r.end + start)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Array2::zeros((n_targets, n_cols));
    for (b, start) in blocks.into_iter().zip((0..n_targets).step_by(per)) {
        let b = b?;
        out.slice_mut(s![start..start + b.nrows(), ..]).assign(&b);
    }
    Ok(out)
}

/// Plain-value evaluation of one branch with unit-free globals and no face
/// latents.
pub fn evaluate_branch(
    store: &ParameterStore,
    branch: &KernelBranch,
    mesh: &crate::geometry::BoundaryMesh,
    strengths: &[f64],
    globals: &GlobalInputs,
    targets: &Array2<f64>,
    ell: f64,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let params = store.bind_frozen(&mut tape);
    let mut src = SourceInputs::from_mesh(&mut tape, mesh);
    src.strengths = tape.constant(Array2::from_shape_vec((strengths.len(), 1), strengths.to_vec()).unwrap());
    let out = branch.forward(&mut tape, &params, &src, globals, targets, ell)?;
    tape.check_finite()?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundaryMesh;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn spec(dim: usize, n_global_vectors: usize) -> KernelSpec {
        KernelSpec {
            dim,
            include_normal: true,
            n_face_scalars: 0,
            n_global_scalars: 1,
            n_face_vectors: 0,
            n_global_vectors,
            n_harmonics: 2,
            hidden: vec![8, 8],
            order_n: 2,
            order_d: 2,
            n_scalar_out: 2,
            n_vector_out: 2,
            basis_leak: None,
        }
    }

    fn branch(spec: KernelSpec, seed: u64) -> (ParameterStore, KernelBranch) {
        let mut store = ParameterStore::new();
        let b = KernelBranch::init(&mut store, "k", spec, &mut rng::stream(seed, "init")).unwrap();
        (store, b)
    }

    fn random_mesh(dim: usize, n: usize, seed: u64) -> BoundaryMesh {
        let mut r = rng::stream(seed, "mesh");
        let faces = (0..n)
            .map(|_| {
                let c: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
                let nrm: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
                Face::new(c, nrm, r.random_range(0.1..1.0)).unwrap()
            })
            .collect();
        BoundaryMesh::new(dim, "wall", faces).unwrap()
    }

    fn random_points(dim: usize, n: usize, seed: u64, scale: f64) -> Array2<f64> {
        let mut r = rng::stream(seed, "pts");
        Array2::from_shape_fn((n, dim), |_| scale * r.random_range(-1.0..1.0))
    }

    fn globals(dim: usize, nv: usize) -> GlobalInputs {
        GlobalInputs {
            scalars: array![0.3],
            vectors: (0..nv).map(|i| Array1::from_shape_fn(dim, |k| 0.5 + (i + k) as f64 * 0.25)).collect(),
        }
    }

    fn random_orthogonal(dim: usize, seed: u64, reflect: bool) -> Array2<f64> {
        use nalgebra::DMatrix;
        let mut r = rng::stream(seed, "rot");
        let m = DMatrix::from_fn(dim, dim, |_, _| r.random_range(-1.0..1.0));
        let mut q = m.qr().q();
        if (q.determinant() < 0.0) != reflect {
            q.column_mut(0).neg_mut();
        }
        Array2::from_shape_fn((dim, dim), |(i, j)| q[(i, j)])
    }

    /// Applies `m` to the vector columns of an output block.
    fn rotate_outputs(out: &Array2<f64>, spec: &KernelSpec, m: &Array2<f64>) -> Array2<f64> {
        let mut res = out.clone();
        for k in 0..spec.n_vector_out {
            let c0 = spec.n_scalar_out + k * spec.dim;
            let block = out.slice(s![.., c0..c0 + spec.dim]).dot(&m.t());
            res.slice_mut(s![.., c0..c0 + spec.dim]).assign(&block);
        }
        res
    }

    fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
        a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn envelope_values() {
        assert_eq!(envelope(&[0.0, 0.0], 2).unwrap(), 0.0);
        let e = envelope(&[1.0, 0.0], 2).unwrap();
        assert!((e - (1.0 - (-1.0f64).exp()) / 2f64.sqrt()).abs() < 1e-15);
        assert!((e - 0.44697).abs() < 1e-5);
        let far = envelope(&[1e3, 0.0, 0.0], 3).unwrap() * 1e6;
        assert!((0.999..=1.001).contains(&far));
        assert!(envelope(&[1.0], 1).is_err());
    }

    #[test]
    fn envelope_derivative_matches_differences() {
        for dim in [2, 3] {
            for q in [1e-3, 0.2, 1.0, 4.0, 50.0] {
                let h = 1e-6 * (1.0 + q);
                let fd = (envelope_scalar(q + h, dim).0 - envelope_scalar(q - h, dim).0) / (2.0 * h);
                let d = envelope_scalar(q, dim).1;
                assert!((fd - d).abs() <= 1e-7 * (1.0 + d.abs()), "q={q} fd={fd} d={d}");
            }
        }
    }

    #[test]
    fn pair_context_layout() {
        let face = Face::new(vec![1.0, 0.0], vec![0.0, 1.0], 0.5).unwrap();
        let ctx = build_pair_context(
            &face,
            &[1.0, 0.0],
            1.0,
            &VectorBag::default(),
            &ScalarBag(vec![2.0]),
            &VectorBag::default(),
            &ScalarBag(vec![3.0]),
        )
        .unwrap();
        assert_eq!(ctx.r, vec![0.0, 0.0]);
        assert_eq!(ctx.vectors.0, vec![vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert_eq!(ctx.scalars.0, vec![2.0, 3.0]);
        let enc = invariants::encode_vectors(&ctx.vectors, 1).unwrap();
        assert_eq!(enc.0[1], 0.0);
        assert_eq!(enc.0[2], 0.0);
        let bad = build_pair_context(
            &face,
            &[1.0, 0.0, 0.0],
            1.0,
            &VectorBag::default(),
            &ScalarBag::default(),
            &VectorBag::default(),
            &ScalarBag::default(),
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    fn ctx_with(r: Vec<f64>, vectors: Vec<Vec<f64>>) -> PairContext {
        let mut all = vectors;
        all.push(r.clone());
        PairContext {
            r,
            vectors: VectorBag(all),
            scalars: ScalarBag(vec![0.3]),
        }
    }

    #[test]
    fn basis_special_cases() {
        let b = build_basis(&ctx_with(vec![2.0, 0.0], vec![vec![3.0, 0.0], vec![0.0, 0.0]]));
        assert_eq!(b.0.len(), 5);
        assert_eq!(b.0[0], vec![1.0, 0.0]);
        assert_eq!(b.0[2], vec![0.0, 0.0], "parallel vector has no dipole entry");
        assert_eq!(b.0[3], vec![0.0, 0.0]);
        assert_eq!(b.0[4], vec![0.0, 0.0]);
        let at_origin = build_basis(&ctx_with(vec![0.0, 0.0], vec![vec![0.0, 1.0]]));
        assert_eq!(at_origin.0[0], vec![0.0, 0.0]);
        let s1 = invariants::smoothlog(1.0).unwrap();
        assert_eq!(at_origin.0[1], vec![0.0, s1]);
        assert_eq!(at_origin.0[2], vec![0.0, -s1]);
    }

    #[test]
    fn basis_rotates_with_inputs() {
        for seed in 0..20 {
            let m = random_orthogonal(3, seed, seed % 2 == 1);
            let mut r = rng::stream(seed, "v");
            let mut v = || (0..3).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<f64>>();
            let (rr, a, b) = (v(), v(), v());
            let rot = |x: &Vec<f64>| (0..3).map(|i| (0..3).map(|j| m[[i, j]] * x[j]).sum()).collect::<Vec<f64>>();
            let base = build_basis(&ctx_with(rr.clone(), vec![a.clone(), b.clone()]));
            let moved = build_basis(&ctx_with(rot(&rr), vec![rot(&a), rot(&b)]));
            for (x, y) in base.0.iter().zip(&moved.0) {
                for (p, q) in rot(x).iter().zip(y) {
                    assert!((p - q).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn self_pair_output_is_zero() {
        let (store, b) = branch(spec(2, 1), 3);
        let face = Face::new(vec![0.2, -0.4], vec![1.0, 1.0], 1.0).unwrap();
        let ctx = build_pair_context(
            &face,
            &[0.2, -0.4],
            1.0,
            &VectorBag::default(),
            &ScalarBag::default(),
            &VectorBag(vec![vec![1.0, 0.0]]),
            &ScalarBag(vec![0.3]),
        )
        .unwrap();
        let (s, v) = kernel_pair(&store, &b, &ctx).unwrap();
        assert!(s.iter().all(|&x| x == 0.0));
        assert!(v.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn kernel_pair_agrees_with_batched_forward() {
        let (store, b) = branch(spec(3, 1), 5);
        let mesh = random_mesh(3, 1, 1);
        let g = globals(3, 1);
        let targets = random_points(3, 4, 2, 3.0);
        let batched = evaluate_branch(&store, &b, &mesh, &[1.0], &g, &targets, 0.7).unwrap();
        let area = mesh.faces[0].area;
        for t in 0..4 {
            let ctx = build_pair_context(
                &mesh.faces[0],
                targets.row(t).as_slice().unwrap(),
                0.7,
                &VectorBag::default(),
                &ScalarBag::default(),
                &VectorBag(vec![g.vectors[0].to_vec()]),
                &ScalarBag(g.scalars.to_vec()),
            )
            .unwrap();
            let (s, v) = kernel_pair(&store, &b, &ctx).unwrap();
            let flat: Vec<f64> = s.into_iter().chain(v.into_iter().flatten()).collect();
            for (x, y) in flat.iter().zip(batched.row(t)) {
                assert!((x * area - y).abs() <= 1e-14 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn radial_kernel_depends_only_on_distance() {
        let mut sp = spec(2, 0);
        sp.include_normal = false;
        sp.n_global_scalars = 0;
        let (store, b) = branch(sp, 7);
        let eval = |target: [f64; 2]| {
            let ctx = PairContext {
                r: target.to_vec(),
                vectors: VectorBag(vec![vec![0.0, 0.0], target.to_vec()]),
                scalars: ScalarBag::default(),
            };
            // the first bag entry stands in for the absent normal
            kernel_pair(&store, &b, &ctx).unwrap().0
        };
        let a = eval([1.3, 0.0]);
        let c = eval([1.3 * 0.6, 1.3 * 0.8]);
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() <= 1e-14 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate(&array![[0.5]], &[1.0], &[2.0]).unwrap(), array![[1.0]]);
        let k = array![[0.1, 2.0], [0.7, -1.0]];
        assert_eq!(aggregate(&k, &[0.0, 0.0], &[1.0, 3.0]).unwrap(), array![[0.0, 0.0]]);
        let dup = array![[0.1, 2.0], [0.1, 2.0], [0.7, -1.0]];
        let a = aggregate(&k, &[1.0, 1.0], &[1.0, 3.0]).unwrap();
        let b = aggregate(&dup, &[1.0, 1.0, 1.0], &[0.5, 0.5, 3.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_matches_tape_op() {
        let mut r = rng::stream(1, "agg");
        let pairs = Array2::from_shape_fn((12, 3), |_| r.random_range(-1.0..1.0));
        let w: Vec<f64> = (0..4).map(|_| r.random_range(0.0..2.0)).collect();
        let a: Vec<f64> = (0..4).map(|_| r.random_range(0.0..2.0)).collect();
        let plain = aggregate(&pairs, &w, &a).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(pairs);
        let wa = Array2::from_shape_fn((4, 1), |(s, _)| w[s] * a[s]);
        let wv = tape.constant(wa);
        let out = tape.pair_aggregate(x, wv);
        assert_eq!(tape.value(out), &plain);
    }

    #[test]
    fn chunked_evaluation_partitions_targets() {
        let mut seen = vec![0; 100];
        let out = evaluate_chunked(100, 1, 7, |range| {
            for i in range.clone() {
                seen[i] += 1;
            }
            Ok(Array2::from_shape_fn((range.len(), 1), |(i, _)| (range.start + i) as f64))
        })
        .unwrap();
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(out.column(0).to_vec(), (0..100).map(f64::from).collect::<Vec<_>>());
        assert!(evaluate_chunked(3, 1, 0, |_| unreachable!()).is_err());
    }

    #[test]
    fn chunked_equals_unchunked() {
        let (store, b) = branch(spec(2, 1), 9);
        let mesh = random_mesh(2, 6, 4);
        let g = globals(2, 1);
        let targets = random_points(2, 23, 5, 4.0);
        let w = vec![1.0; 6];
        let full = evaluate_branch(&store, &b, &mesh, &w, &g, &targets, 0.5).unwrap();
        for chunk in [1, 7, 23, 4096] {
            let out = evaluate_chunked(23, b.spec.output_width(), chunk, |range| {
                let t = targets.slice(s![range, ..]).to_owned();
                evaluate_branch(&store, &b, &mesh, &w, &g, &t, 0.5)
            })
            .unwrap();
            assert!(max_rel(&out, &full) < 1e-12);
        }
    }

    #[test]
    fn translation_leaves_outputs_unchanged() {
        let (store, b) = branch(spec(3, 1), 2);
        let mesh = random_mesh(3, 5, 8);
        let g = globals(3, 1);
        let targets = random_points(3, 9, 6, 3.0);
        let base = evaluate_branch(&store, &b, &mesh, &[1.0; 5], &g, &targets, 0.8).unwrap();
        // dyadic shift: differences are computed exactly
        let shift = [0.5, -0.25, 2.0];
        let moved_mesh = mesh.transformed(&Array2::eye(3), &shift);
        let moved_targets = &targets + &Array1::from(shift.to_vec());
        let moved = evaluate_branch(&store, &b, &moved_mesh, &[1.0; 5], &g, &moved_targets, 0.8).unwrap();
        assert_eq!(base, moved);
        let shift = [0.1234, -3.7, 1.01];
        let moved_mesh = mesh.transformed(&Array2::eye(3), &shift);
        let moved_targets = &targets + &Array1::from(shift.to_vec());
        let moved = evaluate_branch(&store, &b, &moved_mesh, &[1.0; 5], &g, &moved_targets, 0.8).unwrap();
        assert!(max_rel(&moved, &base) < 1e-12);
    }

    fn check_orthogonal_equivariance(dim: usize, reflect: bool) {
        let (store, b) = branch(spec(dim, 1), 11);
        let mesh = random_mesh(dim, 4, 12);
        let g = globals(dim, 1);
        let targets = random_points(dim, 7, 13, 3.0);
        let base = evaluate_branch(&store, &b, &mesh, &[1.0; 4], &g, &targets, 0.6).unwrap();
        for trial in 0..100 {
            let m = random_orthogonal(dim, trial, reflect);
            let zero = vec![0.0; dim];
            let mesh_m = mesh.transformed(&m, &zero);
            let g_m = GlobalInputs {
                scalars: g.scalars.clone(),
                vectors: g.vectors.iter().map(|v| m.dot(v)).collect(),
            };
            let out = evaluate_branch(&store, &b, &mesh_m, &[1.0; 4], &g_m, &targets.dot(&m.t()), 0.6).unwrap();
            let expect = rotate_outputs(&base, &b.spec, &m);
            assert!(max_rel(&out, &expect) < 1e-10, "trial {trial}: {}", max_rel(&out, &expect));
        }
    }

    #[test]
    fn rotation_equivariance() {
        check_orthogonal_equivariance(2, false);
        check_orthogonal_equivariance(3, false);
    }

    #[test]
    fn parity_equivariance() {
        check_orthogonal_equivariance(2, true);
        check_orthogonal_equivariance(3, true);
    }

    #[test]
    fn leaked_basis_breaks_equivariance() {
        let mut sp = spec(2, 1);
        sp.basis_leak = Some(vec![0.3, -0.2]);
        let (store, b) = branch(sp, 11);
        let mesh = random_mesh(2, 4, 12);
        let g = globals(2, 1);
        let targets = random_points(2, 7, 13, 3.0);
        let base = evaluate_branch(&store, &b, &mesh, &[1.0; 4], &g, &targets, 0.6).unwrap();
        let m = random_orthogonal(2, 1, false);
        let mesh_m = mesh.transformed(&m, &[0.0, 0.0]);
        let g_m = GlobalInputs {
            scalars: g.scalars.clone(),
            vectors: g.vectors.iter().map(|v| m.dot(v)).collect(),
        };
        let out = evaluate_branch(&store, &b, &mesh_m, &[1.0; 4], &g_m, &targets.dot(&m.t()), 0.6).unwrap();
        assert!(max_rel(&out, &rotate_outputs(&base, &b.spec, &m)) > 1e-6);
    }

    #[test]
    fn mirror_symmetry_about_normal_axis() {
        let mut sp = spec(2, 0);
        sp.n_global_scalars = 0;
        let (store, b) = branch(sp, 4);
        let mesh = BoundaryMesh::new(2, "wall", vec![Face::new(vec![0.0, 0.0], vec![0.0, 1.0], 1.0).unwrap()]).unwrap();
        let g = GlobalInputs::default();
        let targets = random_points(2, 10, 3, 2.0);
        let mirrored = targets.dot(&array![[-1.0, 0.0], [0.0, 1.0]]);
        let a = evaluate_branch(&store, &b, &mesh, &[1.0], &g, &targets, 1.0).unwrap();
        let m = evaluate_branch(&store, &b, &mesh, &[1.0], &g, &mirrored, 1.0).unwrap();
        let expect = rotate_outputs(&a, &b.spec, &array![[-1.0, 0.0], [0.0, 1.0]]);
        assert!(max_rel(&m, &expect) < 1e-13);
    }

    /// `d ln max|K| / d ln R` between two probe radii.
    fn decay_slope(dim: usize, seed: u64, r0: f64, r1: f64) -> f64 {
        let mut sp = spec(dim, 1);
        sp.hidden = vec![64, 64, 64];
        let (store, b) = branch(sp, seed);
        let mesh = random_mesh(dim, 5, 22);
        let g = globals(dim, 1);
        let dirs = random_points(dim, 16, 23, 1.0);
        let dirs = &dirs / &dirs.map_axis(Axis(1), |r| r.dot(&r).sqrt()).insert_axis(Axis(1));
        let peak = |radius: f64| {
            let out = evaluate_branch(&store, &b, &mesh, &[1.0; 5], &g, &(&dirs * radius), 1.0).unwrap();
            out.iter().fold(0.0f64, |m, x| m.max(x.abs()))
        };
        (peak(r1).ln() - peak(r0).ln()) / (r1.ln() - r0.ln())
    }

    #[test]
    fn far_field_slope_approaches_inverse_power() {
        // Padé inputs grow like ln R, so the inverse-power law is reached
        // only once the denominator network dominates; the slope error
        // shrinks monotonically with distance.
        for dim in [2usize, 3] {
            for seed in 0..3 {
                let target = -(dim as f64 - 1.0);
                let near = decay_slope(dim, seed, 1e2, 1e4);
                let far = decay_slope(dim, seed, 1e60, 1e64);
                assert!((far - target).abs() < 0.05, "d={dim} seed={seed}: far slope {far}");
                assert!((far - target).abs() < (near - target).abs());
            }
        }
    }

    #[test]
    fn split_faces_give_identical_field() {
        let (store, b) = branch(spec(2, 1), 31);
        let mesh = random_mesh(2, 6, 32);
        let split = BoundaryMesh::new(
            2,
            "wall",
            mesh.faces
                .iter()
                .flat_map(|f| {
                    let half = Face::new(f.centroid.clone(), f.normal.clone(), f.area / 2.0).unwrap();
                    [half.clone(), half]
                })
                .collect(),
        )
        .unwrap();
        let g = globals(2, 1);
        let targets = random_points(2, 8, 33, 3.0);
        let a = evaluate_branch(&store, &b, &mesh, &[1.0; 6], &g, &targets, 0.5).unwrap();
        let c = evaluate_branch(&store, &b, &split, &[1.0; 12], &g, &targets, 0.5).unwrap();
        assert!(max_rel(&c, &a) < 1e-12);
    }

    #[test]
    fn face_order_does_not_matter() {
        let (store, b) = branch(spec(3, 1), 41);
        let mesh = random_mesh(3, 9, 42);
        let mut shuffled = mesh.clone();
        shuffled.faces.reverse();
        shuffled.faces.swap(0, 4);
        let g = globals(3, 1);
        let targets = random_points(3, 8, 43, 3.0);
        let a = evaluate_branch(&store, &b, &mesh, &[1.0; 9], &g, &targets, 0.5).unwrap();
        let c = evaluate_branch(&store, &b, &shuffled, &[1.0; 9], &g, &targets, 0.5).unwrap();
        assert!(max_rel(&c, &a) < 1e-10);
    }

    #[test]
    fn discretization_converges() {
        // smooth closed curve with smooth strength; midpoint faces
        let (store, b) = branch(spec(2, 0), 51);
        let curve = |n: usize| {
            let faces = (0..n)
                .map(|i| {
                    let t = (i as f64 + 0.5) / n as f64 * std::f64::consts::TAU;
                    let (x, y) = (1.5 * t.cos(), t.sin());
                    let (dx, dy) = (-1.5 * t.sin(), t.cos());
                    let speed = (dx * dx + dy * dy).sqrt();
                    Face::new(vec![x, y], vec![dy, -dx], speed * std::f64::consts::TAU / n as f64).unwrap()
                })
                .collect();
            let strengths: Vec<f64> = (0..n)
                .map(|i| 1.0 + 0.5 * ((i as f64 + 0.5) / n as f64 * std::f64::consts::TAU).cos())
                .collect();
            (BoundaryMesh::new(2, "wall", faces).unwrap(), strengths)
        };
        let g = GlobalInputs {
            scalars: array![0.3],
            vectors: vec![],
        };
        let probes = random_points(2, 16, 52, 1.0) + 3.0;
        let field = |n| {
            let (m, w) = curve(n);
            evaluate_branch(&store, &b, &m, &w, &g, &probes, 1.0).unwrap()
        };
        let (f20, f40, f80, f160) = (field(20), field(40), field(80), field(160));
        let d1 = (&f20 - &f160).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let d2 = (&f40 - &f160).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let d3 = (&f80 - &f160).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(d2 <= 0.5 * d1 && d3 <= 0.5 * d2, "{d1} {d2} {d3}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn self_influence_vanishes_for_any_parameters(seed in 0u64..1000, x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let (store, b) = branch(spec(2, 1), seed);
            let mesh = BoundaryMesh::new(2, "wall", vec![Face::new(vec![x, y], vec![0.3, 1.0], 1.0).unwrap()]).unwrap();
            let out = evaluate_branch(&store, &b, &mesh, &[1.0], &globals(2, 1), &array![[x, y]], 0.9).unwrap();
            prop_assert!(out.iter().all(|&v| v == 0.0));
        }
    }
}
