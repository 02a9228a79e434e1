//! Architectural property suites. Each property holds for any parameter
//! values, so the suites pass on a freshly initialized model.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{BoundaryMesh, Face};
use crate::hyperstack::{Model, ModelConfig};
use crate::netcore::{gradcheck, ParameterStore};
use crate::pipeline::{gen_cylinder_raw, nondimensionalize, CylinderConfig, FieldSet, Sample};
use crate::rng;
use crate::training::{field_loss_tape, LossConfig};

pub const EQUIVARIANCE_TOL: f64 = 1e-9;
pub const DECAY_SLOPE_TOL: f64 = 0.05;
pub const DISCRETIZATION_RATIO: f64 = 0.6;
pub const GRADCHECK_TOL: f64 = 1e-5;
pub const UNITS_TOL: f64 = 1e-12;
pub const CHUNK_TOL: f64 = 1e-12;

/// The named property suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Equivariance,
    Decay,
    Discretization,
    Gradcheck,
    Units,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Equivariance,
        Suite::Decay,
        Suite::Discretization,
        Suite::Gradcheck,
        Suite::Units,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivariance => "equivariance",
            Suite::Decay => "decay",
            Suite::Discretization => "discretization",
            Suite::Gradcheck => "gradcheck",
            Suite::Units => "units",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// One measured property. `gating == false` marks a reported value that does
/// not decide the suite outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub gating: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match (self.gating, self.passed) {
            (false, _) => "INFO",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        write!(f, "{tag} {} value={:.3e} tol={:.1e}", self.name, self.value, self.tolerance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().filter(|c| c.gating).all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{}/{c}", self.suite.name())?;
        }
        write!(f, "{} {}", self.suite.name(), if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn upper(name: impl Into<String>, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        value,
        tolerance,
        passed: value <= tolerance,
        gating: true,
    }
}

pub fn run(suite: Suite, model: &Model, store: &ParameterStore, seed: u64) -> Result<Report> {
    let checks = match suite {
        Suite::Equivariance => equivariance(model, store, seed, 50)?,
        Suite::Decay => decay(model, store, seed)?,
        Suite::Discretization => discretization(model, store)?,
        Suite::Gradcheck => gradient(&model.config, seed)?,
        Suite::Units => units(model, store, seed)?,
    };
    Ok(Report { suite, checks })
}

/// Uniformly random orthogonal matrix; reflections when `reflect`.
pub fn random_orthogonal<R: Rng>(dim: usize, reflect: bool, r: &mut R) -> Array2<f64> {
    let mut m = if dim == 2 {
        let t: f64 = r.random_range(0.0..TAU);
        ndarray::array![[t.cos(), -t.sin()], [t.sin(), t.cos()]]
    } else {
        // unit quaternion
        let q: Vec<f64> = (0..4).map(|_| StandardNormal.sample(r)).collect();
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        ndarray::array![
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)]
        ]
    };
    if reflect {
        m.column_mut(0).mapv_inplace(|v| -v);
    }
    m
}

fn random_unit<R: Rng>(dim: usize, r: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(r)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// A random problem matching `config`: a few faces per BC type, random
/// globals and reference lengths, queries in a box around the faces.
pub fn random_problem(config: &ModelConfig, n_faces: usize, n_queries: usize, seed: u64) -> Result<Sample> {
    let d = config.dim;
    let mut r = rng::stream(seed, "problem");
    let mut boundaries = BTreeMap::new();
    for (b, bc) in config.bc_types.iter().enumerate() {
        let faces = (0..n_faces)
            .map(|_| {
                let c: Vec<f64> = (0..d).map(|k| r.random_range(-1.0..1.0) + if k == 0 { 2.0 * b as f64 } else { 0.0 }).collect();
                Face::new(c, random_unit(d, &mut r), r.random_range(0.05..0.3))
            })
            .collect::<Result<Vec<_>>>()?;
        boundaries.insert(bc.clone(), BoundaryMesh::new(d, bc.as_str(), faces)?);
    }
    let reference_lengths = (0..config.n_scales).map(|k| 10f64.powi(-(k as i32)) * r.random_range(0.5..2.0)).collect();
    Ok(Sample {
        dim: d,
        boundaries,
        global_scalars: config.global_scalars.iter().map(|n| (n.clone(), r.random_range(-1.0..1.0))).collect(),
        global_vectors: config.global_vectors.iter().map(|n| (n.clone(), random_unit(d, &mut r))).collect(),
        reference_lengths,
        queries: Array2::from_shape_fn((n_queries, d), |_| r.random_range(-3.0..3.0)),
        targets: None,
        mask: None,
        surface: Vec::new(),
    })
}

/// `sample` under `x ↦ m x + t`, with global vectors rotated.
pub fn transform_sample(sample: &Sample, m: &Array2<f64>, t: &[f64]) -> Sample {
    let mut queries = sample.queries.dot(&m.t());
    queries += &Array1::from(t.to_vec());
    Sample {
        boundaries: sample
            .boundaries
            .iter()
            .map(|(k, b)| (k.clone(), b.transformed(m, t)))
            .collect(),
        global_vectors: sample
            .global_vectors
            .iter()
            .map(|(n, v)| (n.clone(), m.dot(&Array1::from(v.clone())).to_vec()))
            .collect(),
        queries,
        ..sample.clone()
    }
}

/// Scalar columns unchanged, vector columns rotated by `m`.
pub fn transform_fields(f: &FieldSet, m: &Array2<f64>) -> FieldSet {
    let mut out = f.clone();
    for (k, _) in f.schema.vectors.iter().enumerate() {
        let field = f.schema.scalars.len() + k;
        let cols: Vec<usize> = f.schema.columns(field, f.dim).collect();
        let v = f.values.select(Axis(1), &cols).dot(&m.t());
        for (j, &c) in cols.iter().enumerate() {
            out.values.column_mut(c).assign(&v.column(j));
        }
    }
    out
}

/// `max |a - b| / max |b|`.
pub fn max_rel_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 { err } else { err / scale }
}

/// Worst relative error over `n_motions` random rigid motions, half of
/// them improper, of a random problem.
pub fn equivariance(model: &Model, store: &ParameterStore, seed: u64, n_motions: usize) -> Result<Vec<Check>> {
    let d = model.config.dim;
    let s = random_problem(&model.config, 6, 16, rng::child_seed(seed, "equivariance", 0))?;
    let base = model.predict(store, &s, 4096)?;
    let mut r = rng::stream(seed, "motions");
    let (mut proper, mut improper) = (0.0f64, 0.0f64);
    let mut translation = 0.0f64;
    for k in 0..n_motions {
        let reflect = k % 2 == 1;
        let m = random_orthogonal(d, reflect, &mut r);
        let t: Vec<f64> = (0..d).map(|_| r.random_range(-10.0..10.0)).collect();
        let out = model.predict(store, &transform_sample(&s, &m, &t), 4096)?;
        let err = max_rel_error(&out.values, &transform_fields(&base, &m).values);
        if reflect {
            improper = improper.max(err);
        } else {
            proper = proper.max(err);
        }
    }
    let eye = Array2::eye(d);
    for _ in 0..3 {
        let t: Vec<f64> = (0..d).map(|_| r.random_range(-100.0..100.0)).collect();
        let out = model.predict(store, &transform_sample(&s, &eye, &t), 4096)?;
        translation = translation.max(max_rel_error(&out.values, &base.values));
    }
    Ok(vec![
        upper("rotation", proper, EQUIVARIANCE_TOL),
        upper("reflection", improper, EQUIVARIANCE_TOL),
        upper("translation", translation, EQUIVARIANCE_TOL),
    ])
}

/// Least-squares slope of `ln max|f - bias|` against `ln R` for probes at
/// `R` in `[lo, hi]` along several directions.
pub fn decay_slope(model: &Model, store: &ParameterStore, seed: u64, lo: f64, hi: f64) -> Result<f64> {
    let c = &model.config;
    let s = random_problem(c, 6, 0, rng::child_seed(seed, "decay", 0))?;
    let mut r = rng::stream(seed, "directions");
    let dirs: Vec<Vec<f64>> = (0..4).map(|_| random_unit(c.dim, &mut r)).collect();
    let radii: Vec<f64> = (0..9).map(|k| lo * (hi / lo).powf(k as f64 / 8.0)).collect();
    let mut queries = Array2::zeros((radii.len() * dirs.len(), c.dim));
    for (i, &rad) in radii.iter().enumerate() {
        for (j, u) in dirs.iter().enumerate() {
            for k in 0..c.dim {
                queries[[i * dirs.len() + j, k]] = rad * u[k];
            }
        }
    }
    let out = model.predict(store, &Sample { queries, ..s }, 4096)?;
    let bias = store.get(model.calibration.scalar_bias);
    let ns = c.fields.scalars.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &rad) in radii.iter().enumerate() {
        let mut m = 0.0f64;
        for j in 0..dirs.len() {
            let row = out.values.row(i * dirs.len() + j);
            for (col, v) in row.iter().enumerate() {
                let b = if col < ns { bias[[0, col]] } else { 0.0 };
                m = m.max((v - b).abs());
            }
        }
        if m > 0.0 {
            xs.push(rad.ln());
            ys.push(m.ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::Domain("field vanishes identically; no decay slope".into()));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// The envelope guarantees `|r|^-(d-1)` decay once the learned factor has
/// saturated. At desk distances the Padé inputs still grow like `ln R`,
/// so that slope is reported but does not gate the suite.
pub fn decay(model: &Model, store: &ParameterStore, seed: u64) -> Result<Vec<Check>> {
    let target = -(model.config.dim as f64 - 1.0);
    let near = decay_slope(model, store, seed, 1e2, 1e4)?;
    let far = decay_slope(model, store, seed, 1e60, 1e64)?;
    Ok(vec![
        Check {
            name: format!("slope_1e2_1e4={near:.4} (target {target})"),
            value: (near - target).abs(),
            tolerance: DECAY_SLOPE_TOL,
            passed: (near - target).abs() <= DECAY_SLOPE_TOL,
            gating: false,
        },
        upper(format!("slope_1e60_1e64={far:.4} (target {target})"), (far - target).abs(), DECAY_SLOPE_TOL),
    ])
}

/// Midpoint faces of a smooth closed boundary: an ellipse in 2-D, a
/// latitude-longitude sphere with `level` latitude bands in 3-D.
pub fn smooth_boundary(dim: usize, level: usize, bc: &str) -> Result<BoundaryMesh> {
    let faces = if dim == 2 {
        (0..level)
            .map(|i| {
                let (a, b) = (1.0, 0.6);
                let t0 = i as f64 / level as f64 * TAU;
                let t1 = (i + 1) as f64 / level as f64 * TAU;
                let p = |t: f64| [a * t.cos(), b * t.sin()];
                let (p0, p1) = (p(t0), p(t1));
                let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
                let len = dx.hypot(dy);
                Face::new(vec![(p0[0] + p1[0]) / 2.0, (p0[1] + p1[1]) / 2.0], vec![dy / len, -dx / len], len)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let n_lon = 2 * level;
        let mut faces = Vec::with_capacity(level * n_lon);
        for i in 0..level {
            let (th0, th1) = (i as f64 * PI / level as f64, (i + 1) as f64 * PI / level as f64);
            let th = 0.5 * (th0 + th1);
            for j in 0..n_lon {
                let ph = (j as f64 + 0.5) * TAU / n_lon as f64;
                let n = vec![th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()];
                let area = (TAU / n_lon as f64) * (th0.cos() - th1.cos());
                faces.push(Face::new(n.clone(), n, area)?);
            }
        }
        faces
    };
    BoundaryMesh::new(dim, bc, faces)
}

fn smooth_problem(config: &ModelConfig, level: usize) -> Result<Sample> {
    let mut s = random_problem(config, 1, 0, 7)?;
    s.boundaries.clear();
    let bc = config.bc_types[0].clone();
    s.boundaries.insert(bc.clone(), smooth_boundary(config.dim, level, &bc)?);
    // 32 probes on a ring well outside the body
    s.queries = Array2::from_shape_fn((32, config.dim), |(i, k)| {
        let t = (i as f64 + 0.25) / 32.0 * TAU;
        match k {
            0 => 2.5 * t.cos(),
            1 => 2.5 * t.sin(),
            _ => 0.7 * (3.0 * t).sin(),
        }
    });
    Ok(s)
}

/// Successive-refinement differences at fixed probes and their ratios.
pub fn discretization_ratios(model: &Model, store: &ParameterStore, levels: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let fields = levels
        .iter()
        .map(|&l| model.predict(store, &smooth_problem(&model.config, l)?, 64))
        .collect::<Result<Vec<_>>>()?;
    let diffs: Vec<f64> = fields
        .windows(2)
        .map(|w| w[0].values.iter().zip(&w[1].values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
        .collect();
    let ratios = diffs.windows(2).map(|w| w[1] / w[0]).collect();
    Ok((diffs, ratios))
}

/// 2-D: faces on the curve. 3-D: latitude bands; coarser sphere levels
/// are not yet in the asymptotic regime once hyperlayers couple faces.
pub fn discretization_levels(dim: usize) -> Vec<usize> {
    if dim == 2 { vec![20, 40, 80, 160] } else { vec![6, 12, 24] }
}

pub fn discretization(model: &Model, store: &ParameterStore) -> Result<Vec<Check>> {
    let (_, ratios) = discretization_ratios(model, store, &discretization_levels(model.config.dim))?;
    Ok(ratios
        .iter()
        .enumerate()
        .map(|(k, &q)| upper(format!("refinement_ratio_{k}"), q, DISCRETIZATION_RATIO))
        .collect())
}

/// Tiny model in the layout of `config`: 2 faces, 3 queries, 1 branch,
/// one hidden layer of width 4.
pub fn tiny_model_gradient(config: &ModelConfig, seed: u64) -> Result<f64> {
    let cfg = ModelConfig {
        hidden: vec![4],
        n_scales: 1,
        latent_scalars: config.latent_scalars.min(1),
        latent_vectors: config.latent_vectors.min(1),
        bc_types: vec![config.bc_types[0].clone()],
        basis_leak: None,
        ..config.clone()
    };
    let mut store = ParameterStore::new();
    let model = Model::init(&mut store, &cfg, &mut rng::stream(seed, "tiny"))?;
    let mut r = rng::stream(seed, "tiny-perturb");
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|v| v + 0.1 * r.random_range(-1.0..1.0));
    }
    let mut s = random_problem(&cfg, 2, 3, seed)?;
    let width = cfg.fields.width(cfg.dim);
    let values = Array2::from_shape_fn((3, width), |_| r.random_range(-1.0..1.0));
    let targets = FieldSet::new(cfg.dim, cfg.fields.clone(), values)?;
    s.targets = Some(targets.clone());
    let loss = LossConfig {
        huber_delta: 0.3,
        ..Default::default()
    };
    gradcheck::check(&store, |tape, p| {
        let pred = model.forward(tape, p, &s)?;
        field_loss_tape(tape, pred, &targets, None, &loss)
    })
}

pub fn gradient(config: &ModelConfig, seed: u64) -> Result<Vec<Check>> {
    let mut checks: Vec<Check> = gradcheck::primitive_checks(seed)?
        .into_iter()
        .map(|(name, err)| upper(name, err, GRADCHECK_TOL))
        .collect();
    checks.push(upper("tiny_model_loss", tiny_model_gradient(config, seed)?, GRADCHECK_TOL));
    Ok(checks)
}

/// A cylinder sample relabelled to fit `config`: boundary under the first
/// BC type, configured globals filled in, and as many reference lengths
/// as the model has scales.
pub fn adapt_sample(sample: &Sample, config: &ModelConfig) -> Sample {
    let mut s = sample.clone();
    let meshes: Vec<BoundaryMesh> = s.boundaries.values().cloned().collect();
    s.boundaries.clear();
    let bc = config.bc_types[0].clone();
    let faces = meshes.into_iter().flat_map(|m| m.faces).collect();
    s.boundaries.insert(bc.clone(), BoundaryMesh { dim: s.dim, bc, faces });
    let dir = sample.global_vectors.first().map(|(_, v)| v.clone());
    s.global_vectors = config
        .global_vectors
        .iter()
        .map(|n| (n.clone(), sample.global_vector(n).map(<[f64]>::to_vec).or(dir.clone()).unwrap_or_else(|| {
            let mut e = vec![0.0; s.dim];
            e[0] = 1.0;
            e
        })))
        .collect();
    s.global_scalars = config
        .global_scalars
        .iter()
        .map(|n| (n.clone(), sample.global_scalar(n).unwrap_or(0.5)))
        .collect();
    let last = *sample.reference_lengths.last().unwrap();
    s.reference_lengths = (0..config.n_scales)
        .map(|k| sample.reference_lengths.get(k).copied().unwrap_or(last * 0.1f64.powi(k as i32)))
        .collect();
    s
}

/// Unit systems `(length, time, mass)` used by the units suite.
pub const UNIT_SYSTEMS: [(f64, f64, f64); 3] = [(1.0 / 0.3048, 1.0, 1.0), (100.0, 1.0, 1000.0), (0.3048, 7.0, 0.45359237)];

/// Nondimensional sample and model output under several unit systems.
pub fn units(model: &Model, store: &ParameterStore, seed: u64) -> Result<Vec<Check>> {
    let cfg = CylinderConfig {
        angle: 0.4,
        n_faces: 24,
        n_query: 32,
        ..Default::default()
    };
    let (raw, consts) = gen_cylinder_raw(&cfg, rng::child_seed(seed, "units", 0))?;
    let base = nondimensionalize(&raw, &consts)?;
    let base_pred = (model.config.dim == 2)
        .then(|| model.predict(store, &adapt_sample(&base, &model.config), 4096))
        .transpose()?;
    let (mut data, mut pred) = (0.0f64, 0.0f64);
    for (l, t, m) in UNIT_SYSTEMS {
        let (r2, c2) = raw.in_units(&consts, l, t, m);
        let s = nondimensionalize(&r2, &c2)?;
        data = data
            .max(max_rel_error(&s.targets.as_ref().unwrap().values, &base.targets.as_ref().unwrap().values))
            .max(max_rel_error(&s.queries, &base.queries))
            .max(max_rel_error(&s.boundaries["free_slip"].areas().insert_axis(Axis(1)), &base.boundaries["free_slip"].areas().insert_axis(Axis(1))))
            .max(
                s.reference_lengths
                    .iter()
                    .zip(&base.reference_lengths)
                    .fold(0.0f64, |a, (x, y)| a.max((x - y).abs() / y)),
            );
        if let Some(bp) = &base_pred {
            let out = model.predict(store, &adapt_sample(&s, &model.config), 4096)?;
            pred = pred.max(max_rel_error(&out.values, &bp.values));
        }
    }
    let mut checks = vec![upper("nondimensional_sample", data, UNITS_TOL)];
    if base_pred.is_some() {
        checks.push(upper("model_output", pred, UNITS_TOL));
    }
    Ok(checks)
}

/// Worst relative deviation of chunked from unchunked inference.
pub fn chunking(model: &Model, store: &ParameterStore, sample: &Sample, chunk_sizes: &[usize]) -> Result<f64> {
    let whole = model.predict(store, sample, sample.n_queries().max(1))?;
    let mut worst = 0.0f64;
    for &c in chunk_sizes {
        worst = worst.max(max_rel_error(&model.predict(store, sample, c)?.values, &whole.values));
    }
    Ok(worst)
}
