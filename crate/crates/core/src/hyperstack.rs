//! The full model: communication hyperlayers between boundary partitions,
//! a final boundary-to-query evaluation and per-field calibration.
//!
//! With `H` hyperlayers, layers `0..H-1` map boundary faces to every
//! boundary face and produce the next strengths and latents; layer `H-1`
//! maps to the query points. Outputs of all source partitions are summed
//! before they are split.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::BoundaryMesh;
use crate::kernel::{evaluate_chunked_par, GlobalInputs, KernelSpec, SourceInputs};
use crate::multiscale::{ratio_feature_count, MultiscaleKernel};
use crate::netcore::{Bound, ParamId, ParameterStore, Tape, Var};
use crate::pipeline::{FieldSchema, FieldSet, Sample};

/// Architecture of a model. Defaults follow the published configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    /// Kernel layers including the final one; `H - 1` communication rounds.
    pub hyperlayers: usize,
    pub latent_scalars: usize,
    pub latent_vectors: usize,
    pub harmonics: usize,
    pub hidden: Vec<usize>,
    pub pade_n: u32,
    pub pade_d: u32,
    pub fields: FieldSchema,
    pub bc_types: Vec<String>,
    pub n_scales: usize,
    pub global_scalars: Vec<String>,
    pub global_vectors: Vec<String>,
    #[doc(hidden)]
    pub basis_leak: Option<Vec<f64>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 2,
            hyperlayers: 2,
            latent_scalars: 6,
            latent_vectors: 3,
            harmonics: 1,
            hidden: vec![64, 64, 64],
            pade_n: 2,
            pade_d: 2,
            fields: FieldSchema::aerodynamic(),
            bc_types: vec!["no_slip".into()],
            n_scales: 2,
            global_scalars: Vec::new(),
            global_vectors: vec![crate::pipeline::FREESTREAM_DIRECTION.into()],
            basis_leak: None,
        }
    }
}

impl ModelConfig {
    /// Single-layer model for superposed Laplace sources.
    pub fn laplace() -> Self {
        ModelConfig {
            hyperlayers: 1,
            hidden: vec![32, 32],
            fields: FieldSchema::laplace(),
            bc_types: vec!["source_neg".into(), "source_pos".into()],
            n_scales: 1,
            global_vectors: Vec::new(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim != 2 && self.dim != 3 {
            return bad(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.hyperlayers == 0 {
            return bad("hyperlayers must be >= 1".into());
        }
        if self.harmonics == 0 {
            return bad("harmonics must be >= 1".into());
        }
        if self.n_scales == 0 {
            return bad("scales must be >= 1".into());
        }
        if self.bc_types.is_empty() {
            return bad("at least one BC type is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = self.bc_types.iter().find(|b| !seen.insert(b.as_str())) {
            return bad(format!("BC type {d:?} listed twice"));
        }
        if self.fields.n_fields() == 0 {
            return bad("no output fields".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be >= 1".into());
        }
        Ok(())
    }

    fn is_final(&self, layer: usize) -> bool {
        layer + 1 == self.hyperlayers
    }

    /// Channel layout of the kernels of hyperlayer `layer`.
    pub fn layer_spec(&self, layer: usize) -> KernelSpec {
        let (n_face_scalars, n_face_vectors) = if layer == 0 {
            (0, 0)
        } else {
            (self.latent_scalars, self.latent_vectors)
        };
        let (n_scalar_out, n_vector_out) = if self.is_final(layer) {
            (self.fields.scalars.len(), self.fields.vectors.len())
        } else {
            (self.n_scales + self.latent_scalars, self.latent_vectors)
        };
        KernelSpec {
            dim: self.dim,
            include_normal: true,
            n_face_scalars,
            n_global_scalars: self.global_scalars.len() + ratio_feature_count(self.n_scales),
            n_face_vectors,
            n_global_vectors: self.global_vectors.len(),
            n_harmonics: self.harmonics,
            hidden: self.hidden.clone(),
            order_n: self.pade_n,
            order_d: self.pade_d,
            n_scalar_out,
            n_vector_out,
            basis_leak: self.basis_leak.clone(),
        }
    }
}

/// Per-field output map: affine for scalars, scale-only for vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub scalar_scale: ParamId,
    pub scalar_bias: ParamId,
    pub vector_scale: ParamId,
}

impl Calibration {
    fn init(store: &mut ParameterStore, fields: &FieldSchema) -> Self {
        let (ns, nv) = (fields.scalars.len(), fields.vectors.len());
        Calibration {
            scalar_scale: store.add("calib/scalar_scale", Array2::ones((1, ns))),
            scalar_bias: store.add("calib/scalar_bias", Array2::zeros((1, ns))),
            vector_scale: store.add("calib/vector_scale", Array2::ones((1, nv))),
        }
    }

    fn attach(store: &ParameterStore, fields: &FieldSchema) -> Result<Self> {
        let (ns, nv) = (fields.scalars.len(), fields.vectors.len());
        let get = |path: &str, n: usize| {
            let id = store
                .id(path)
                .ok_or_else(|| Error::Config(format!("parameter {path} is missing")))?;
            if store.get(id).dim() != (1, n) {
                return Err(Error::Shape(format!("parameter {path} must be [1, {n}]")));
            }
            Ok(id)
        };
        Ok(Calibration {
            scalar_scale: get("calib/scalar_scale", ns)?,
            scalar_bias: get("calib/scalar_bias", ns)?,
            vector_scale: get("calib/vector_scale", nv)?,
        })
    }

    fn apply(&self, tape: &mut Tape, params: &Bound, raw: Var, ns: usize, nv: usize, dim: usize) -> Var {
        let mut parts = Vec::with_capacity(1 + nv);
        if ns > 0 {
            let x = tape.slice_cols(raw, 0, ns);
            let x = tape.mul(x, params.var(self.scalar_scale));
            parts.push(tape.add(x, params.var(self.scalar_bias)));
        }
        for j in 0..nv {
            let v = tape.slice_cols(raw, ns + j * dim, dim);
            let k = tape.slice_cols(params.var(self.vector_scale), j, 1);
            parts.push(tape.mul(v, k));
        }
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)
        }
    }
}

/// Per-face strengths and latents of one boundary partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceState {
    /// `[S, n_scales]`, one column per branch.
    pub strengths: Array2<f64>,
    /// `[S, n_latent_s]`, empty before the first hyperlayer.
    pub scalars: Array2<f64>,
    /// `n_latent_v` entries of `[S, d]`, empty before the first hyperlayer.
    pub vectors: Vec<Array2<f64>>,
}

/// Strengths and latents of every partition entering hyperlayer `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub layer: usize,
    pub faces: BTreeMap<String, FaceState>,
}

#[derive(Clone)]
struct StateVars {
    strengths: Vec<Var>,
    scalars: Option<Var>,
    vectors: Vec<Var>,
}

/// Inputs of a sample in model order.
struct Prepared<'a> {
    parts: Vec<(usize, &'a str, &'a BoundaryMesh)>,
    globals: GlobalInputs,
    scales: Vec<f64>,
    face_targets: Array2<f64>,
    offsets: Vec<usize>,
}

/// A model bound to its parameters in a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `layers[i][b]`: kernel of hyperlayer `i` for source BC `b`.
    pub layers: Vec<Vec<MultiscaleKernel>>,
    pub calibration: Calibration,
}

fn kernel_prefix(layer: usize, bc: &str) -> String {
    format!("layer{layer}/{bc}")
}

impl Model {
    /// Registers freshly initialized parameters under `layer{i}/{bc}` and
    /// `calib`.
    pub fn init<R: Rng>(store: &mut ParameterStore, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hyperlayers);
        for i in 0..config.hyperlayers {
            let spec = config.layer_spec(i);
            let row = config
                .bc_types
                .iter()
                .map(|bc| MultiscaleKernel::init(store, &kernel_prefix(i, bc), &spec, config.n_scales, rng))
                .collect::<Result<_>>()?;
            layers.push(row);
        }
        let calibration = Calibration::init(store, &config.fields);
        Ok(Model {
            config: config.clone(),
            layers,
            calibration,
        })
    }

    /// Binds to parameters already in `store`, checking every shape.
    pub fn attach(store: &ParameterStore, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.hyperlayers);
        for i in 0..config.hyperlayers {
            let spec = config.layer_spec(i);
            let row = config
                .bc_types
                .iter()
                .map(|bc| MultiscaleKernel::attach(store, &kernel_prefix(i, bc), &spec, config.n_scales))
                .collect::<Result<_>>()?;
            layers.push(row);
        }
        Ok(Model {
            config: config.clone(),
            layers,
            calibration: Calibration::attach(store, &config.fields)?,
        })
    }

    /// Strengths 1, no latents.
    pub fn initial_state(&self, sample: &Sample) -> Result<LatentState> {
        let prep = self.prepare(sample)?;
        let faces = prep
            .parts
            .iter()
            .map(|&(_, bc, mesh)| {
                let n = mesh.len();
                let state = FaceState {
                    strengths: Array2::ones((n, self.config.n_scales)),
                    scalars: Array2::zeros((n, 0)),
                    vectors: Vec::new(),
                };
                (bc.to_string(), state)
            })
            .collect();
        Ok(LatentState { layer: 0, faces })
    }

    fn prepare<'a>(&self, sample: &'a Sample) -> Result<Prepared<'a>> {
        let c = &self.config;
        if sample.dim != c.dim {
            return Err(Error::Shape(format!("sample is {}-D, model is {}-D", sample.dim, c.dim)));
        }
        if let Some(bc) = sample.boundaries.keys().find(|bc| !c.bc_types.contains(bc)) {
            return Err(Error::Config(format!("boundary type {bc:?} is not in the model's BC list")));
        }
        let mut missing: Vec<String> = c
            .global_scalars
            .iter()
            .filter(|n| sample.global_scalar(n).is_none())
            .chain(c.global_vectors.iter().filter(|n| sample.global_vector(n).is_none()))
            .cloned()
            .collect();
        if sample.reference_lengths.len() != c.n_scales {
            missing.push(format!("{} reference lengths (got {})", c.n_scales, sample.reference_lengths.len()));
        }
        if !missing.is_empty() {
            return Err(Error::Schema { missing });
        }
        let globals = GlobalInputs {
            scalars: c.global_scalars.iter().map(|n| sample.global_scalar(n).unwrap()).collect(),
            vectors: c
                .global_vectors
                .iter()
                .map(|n| Array1::from(sample.global_vector(n).unwrap().to_vec()))
                .collect(),
        };
        let parts: Vec<_> = c
            .bc_types
            .iter()
            .enumerate()
            .filter_map(|(b, bc)| {
                sample
                    .boundaries
                    .get_key_value(bc)
                    .filter(|(_, m)| !m.is_empty())
                    .map(|(k, m)| (b, k.as_str(), m))
            })
            .collect();
        if parts.is_empty() {
            return Err(Error::Domain("sample has no boundary faces".into()));
        }
        let mut offsets = vec![0];
        for (_, _, m) in &parts {
            offsets.push(offsets.last().unwrap() + m.len());
        }
        let mut face_targets = Array2::zeros((*offsets.last().unwrap(), c.dim));
        for (k, (_, _, m)) in parts.iter().enumerate() {
            face_targets
                .slice_mut(s![offsets[k]..offsets[k + 1], ..])
                .assign(&m.centroids());
        }
        Ok(Prepared {
            parts,
            globals,
            scales: sample.reference_lengths.clone(),
            face_targets,
            offsets,
        })
    }

    fn state_constants(&self, tape: &mut Tape, prep: &Prepared, state: &LatentState) -> Result<Vec<StateVars>> {
        let c = &self.config;
        prep.parts
            .iter()
            .map(|&(_, bc, mesh)| {
                let f = state
                    .faces
                    .get(bc)
                    .ok_or_else(|| Error::Shape(format!("latent state has no partition {bc:?}")))?;
                let n = mesh.len();
                let latent = state.layer > 0;
                let (ls, lv) = if latent { (c.latent_scalars, c.latent_vectors) } else { (0, 0) };
                if f.strengths.dim() != (n, c.n_scales)
                    || f.scalars.dim() != (n, ls)
                    || f.vectors.len() != lv
                    || f.vectors.iter().any(|v| v.dim() != (n, c.dim))
                {
                    return Err(Error::Shape(format!("latent state of {bc:?} does not match its boundary")));
                }
                Ok(StateVars {
                    strengths: (0..c.n_scales)
                        .map(|k| tape.constant(f.strengths.slice(s![.., k..k + 1]).to_owned()))
                        .collect(),
                    scalars: (ls > 0).then(|| tape.constant(f.scalars.clone())),
                    vectors: f.vectors.iter().map(|v| tape.constant(v.clone())).collect(),
                })
            })
            .collect()
    }

    /// Sum over source partitions of hyperlayer `layer` evaluated at `targets`.
    fn layer_output(
        &self,
        tape: &mut Tape,
        params: &Bound,
        prep: &Prepared,
        state: &[StateVars],
        layer: usize,
        targets: &Array2<f64>,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (&(b, _, mesh), sv) in prep.parts.iter().zip(state) {
            let sources = SourceInputs {
                centroids: mesh.centroids(),
                normals: mesh.normals(),
                areas: mesh.areas(),
                strengths: sv.strengths[0],
                scalars: sv.scalars,
                vectors: sv.vectors.clone(),
            };
            let out = self.layers[layer][b].forward(
                tape,
                params,
                &sources,
                &sv.strengths,
                &prep.globals,
                targets,
                &prep.scales,
            )?;
            total = Some(match total {
                None => out,
                Some(acc) => tape.add(acc, out),
            });
        }
        Ok(total.expect("at least one partition"))
    }

    /// One communication round: new strengths and latents on every face.
    fn step_vars(
        &self,
        tape: &mut Tape,
        params: &Bound,
        prep: &Prepared,
        state: &[StateVars],
        layer: usize,
    ) -> Result<Vec<StateVars>> {
        let c = &self.config;
        let out = self.layer_output(tape, params, prep, state, layer, &prep.face_targets)?;
        let (k, ls, lv, d) = (c.n_scales, c.latent_scalars, c.latent_vectors, c.dim);
        let mut next = Vec::with_capacity(prep.parts.len());
        for p in 0..prep.parts.len() {
            let rows = tape.slice_rows(out, prep.offsets[p], prep.offsets[p + 1] - prep.offsets[p]);
            next.push(StateVars {
                strengths: (0..k).map(|j| tape.slice_cols(rows, j, 1)).collect(),
                scalars: (ls > 0).then(|| tape.slice_cols(rows, k, ls)),
                vectors: (0..lv).map(|j| tape.slice_cols(rows, k + ls + j * d, d)).collect(),
            });
        }
        Ok(next)
    }

    fn final_vars(
        &self,
        tape: &mut Tape,
        params: &Bound,
        prep: &Prepared,
        state: &[StateVars],
        queries: &Array2<f64>,
    ) -> Result<Var> {
        let c = &self.config;
        let raw = self.layer_output(tape, params, prep, state, c.hyperlayers - 1, queries)?;
        Ok(self
            .calibration
            .apply(tape, params, raw, c.fields.scalars.len(), c.fields.vectors.len(), c.dim))
    }

    fn initial_vars(&self, tape: &mut Tape, prep: &Prepared) -> Vec<StateVars> {
        prep.parts
            .iter()
            .map(|&(_, _, mesh)| {
                let one = tape.constant(Array2::ones((mesh.len(), 1)));
                StateVars {
                    strengths: vec![one; self.config.n_scales],
                    scalars: None,
                    vectors: Vec::new(),
                }
            })
            .collect()
    }

    /// Differentiable end-to-end forward pass: `[n_queries, fields.width(d)]`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, sample: &Sample) -> Result<Var> {
        let prep = self.prepare(sample)?;
        let mut state = self.initial_vars(tape, &prep);
        for layer in 0..self.config.hyperlayers - 1 {
            state = self.step_vars(tape, params, &prep, &state, layer)?;
        }
        self.final_vars(tape, params, &prep, &state, &sample.queries)
    }

    /// Advances `state` through hyperlayer `state.layer`, evaluating
    /// `chunk_size` target faces per tape.
    pub fn hyperlayer_step(
        &self,
        store: &ParameterStore,
        sample: &Sample,
        state: &LatentState,
        chunk_size: usize,
    ) -> Result<LatentState> {
        self.hyperlayer_step_par(store, sample, state, chunk_size, 1)
    }

    fn hyperlayer_step_par(
        &self,
        store: &ParameterStore,
        sample: &Sample,
        state: &LatentState,
        chunk_size: usize,
        threads: usize,
    ) -> Result<LatentState> {
        let c = &self.config;
        if state.layer + 1 >= c.hyperlayers {
            return Err(Error::Domain(format!(
                "layer {} is the final layer of a {}-layer model",
                state.layer, c.hyperlayers
            )));
        }
        let prep = self.prepare(sample)?;
        let (k, ls, lv, d) = (c.n_scales, c.latent_scalars, c.latent_vectors, c.dim);
        let width = k + ls + lv * d;
        let n_targets = prep.face_targets.nrows();
        let out = evaluate_chunked_par(n_targets, width, chunk_size, threads, |range: Range<usize>| {
            let mut tape = Tape::new();
            let params = store.bind_frozen(&mut tape);
            let vars = self.state_constants(&mut tape, &prep, state)?;
            let targets = prep.face_targets.slice(s![range, ..]).to_owned();
            let v = self.layer_output(&mut tape, &params, &prep, &vars, state.layer, &targets)?;
            tape.check_finite()?;
            Ok(tape.value(v).clone())
        })?;
        let faces = prep
            .parts
            .iter()
            .enumerate()
            .map(|(p, &(_, bc, _))| {
                let rows = out.slice(s![prep.offsets[p]..prep.offsets[p + 1], ..]);
                let fs = FaceState {
                    strengths: rows.slice(s![.., 0..k]).to_owned(),
                    scalars: rows.slice(s![.., k..k + ls]).to_owned(),
                    vectors: (0..lv)
                        .map(|j| rows.slice(s![.., k + ls + j * d..k + ls + (j + 1) * d]).to_owned())
                        .collect(),
                };
                (bc.to_string(), fs)
            })
            .collect();
        Ok(LatentState {
            layer: state.layer + 1,
            faces,
        })
    }

    /// Evaluates the final layer from `state` at `queries`, `chunk_size`
    /// queries per tape.
    pub fn final_eval(
        &self,
        store: &ParameterStore,
        sample: &Sample,
        state: &LatentState,
        queries: &Array2<f64>,
        chunk_size: usize,
    ) -> Result<FieldSet> {
        self.final_eval_par(store, sample, state, queries, chunk_size, 1)
    }

    fn final_eval_par(
        &self,
        store: &ParameterStore,
        sample: &Sample,
        state: &LatentState,
        queries: &Array2<f64>,
        chunk_size: usize,
        threads: usize,
    ) -> Result<FieldSet> {
        let c = &self.config;
        if state.layer + 1 != c.hyperlayers {
            return Err(Error::Domain(format!(
                "final evaluation needs the state entering layer {}, got {}",
                c.hyperlayers - 1,
                state.layer
            )));
        }
        if queries.ncols() != c.dim {
            return Err(Error::Shape(format!("queries must have {} columns", c.dim)));
        }
        if let Some(i) = queries.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteField {
                field: "query".into(),
                index: i,
            });
        }
        let prep = self.prepare(sample)?;
        let width = c.fields.width(c.dim);
        let values = evaluate_chunked_par(queries.nrows(), width, chunk_size, threads, |range: Range<usize>| {
            let mut tape = Tape::new();
            let params = store.bind_frozen(&mut tape);
            let vars = self.state_constants(&mut tape, &prep, state)?;
            let q = queries.slice(s![range, ..]).to_owned();
            let out = self.final_vars(&mut tape, &params, &prep, &vars, &q)?;
            tape.check_finite()?;
            Ok(tape.value(out).clone())
        })?;
        FieldSet::new(c.dim, c.fields.clone(), values)
    }

    /// Full inference at the sample's query points. `chunk_size` bounds the
    /// targets (faces or queries) evaluated per tape.
    pub fn predict(&self, store: &ParameterStore, sample: &Sample, chunk_size: usize) -> Result<FieldSet> {
        self.predict_par(store, sample, chunk_size, 1)
    }

    /// [`Model::predict`] with chunks spread over `threads` workers; the
    /// output does not depend on `threads`.
    pub fn predict_par(&self, store: &ParameterStore, sample: &Sample, chunk_size: usize, threads: usize) -> Result<FieldSet> {
        let mut state = self.initial_state(sample)?;
        while state.layer + 1 < self.config.hyperlayers {
            state = self.hyperlayer_step_par(store, sample, &state, chunk_size, threads)?;
        }
        self.final_eval_par(store, sample, &state, &sample.queries, chunk_size, threads)
    }
}

/// Learnable scalar count, in total and per component.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterCount {
    pub total: usize,
    /// `(component, count)`: per hyperlayer, BC type and branch, split into
    /// Padé weights and scale offset; then calibration.
    pub breakdown: Vec<(String, usize)>,
}

/// Counts parameters by construction arithmetic.
pub fn count_parameters(config: &ModelConfig) -> Result<ParameterCount> {
    config.validate()?;
    let mut breakdown = Vec::new();
    for i in 0..config.hyperlayers {
        let spec = config.layer_spec(i);
        let pade = crate::netcore::Pade::num_scalars(&spec.layer_sizes());
        for bc in &config.bc_types {
            for k in 0..config.n_scales {
                breakdown.push((format!("{}/branch{k}/pade", kernel_prefix(i, bc)), pade));
                breakdown.push((format!("{}/branch{k}/alpha", kernel_prefix(i, bc)), 1));
            }
        }
    }
    let (ns, nv) = (config.fields.scalars.len(), config.fields.vectors.len());
    breakdown.push(("calib/scalar".into(), 2 * ns));
    breakdown.push(("calib/vector".into(), nv));
    Ok(ParameterCount {
        total: breakdown.iter().map(|(_, n)| n).sum(),
        breakdown,
    })
}
