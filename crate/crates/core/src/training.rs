//! Losses, query subsampling, the optimization loop and evaluation metrics.

use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::hyperstack::Model;
use crate::netcore::{grad, AdamW, Bound, Gradients, ParameterStore, Tape, Var};
use crate::netcore::optim::ReduceOnPlateau;
use crate::pipeline::{FieldSchema, FieldSet, Sample};
use crate::rng;

/// `½e²` for `|e| ≤ δ`, else `δ(|e| − ½δ)`.
pub fn huber(e: f64, delta: f64) -> f64 {
    crate::netcore::tape::huber_scalar(e, delta)
}

/// Per-field loss weights and the Huber threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Fields not listed have weight 1.
    pub scales: Vec<(String, f64)>,
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scales: [("dU", 1.0), ("Cp", 1.0), ("Cpt", 1.0), ("ln_nut", 5.0), ("CF_shear", 1e-2)]
                .into_iter()
                .map(|(n, s)| (n.to_string(), s))
                .collect(),
            huber_delta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn scale(&self, field: &str) -> f64 {
        self.scales.iter().find(|(n, _)| n == field).map_or(1.0, |(_, s)| *s)
    }
}

/// Loss value with its per-field terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_field: Vec<(String, f64)>,
    /// Fields with every point masked; they contribute 0.
    pub fully_masked: Vec<String>,
}

/// Per-point weights `scale / n_unmasked` of every field.
fn loss_weights(target: &FieldSet, mask: Option<&Array2<bool>>, cfg: &LossConfig) -> Result<Vec<Option<Vec<f64>>>> {
    let (n, nf) = (target.len(), target.schema.n_fields());
    if let Some(m) = mask {
        if m.dim() != (n, nf) {
            return Err(Error::Shape(format!("mask is {:?}, expected ({n}, {nf})", m.dim())));
        }
    }
    if !(cfg.huber_delta > 0.0) {
        return Err(Error::Domain(format!("huber delta must be > 0, got {}", cfg.huber_delta)));
    }
    Ok(target
        .schema
        .names()
        .enumerate()
        .map(|(f, name)| {
            let keep: Vec<bool> = (0..n).map(|i| mask.is_none_or(|m| m[[i, f]])).collect();
            let count = keep.iter().filter(|&&k| k).count();
            (count > 0).then(|| {
                let w = cfg.scale(name) / count as f64;
                keep.iter().map(|&k| if k { w } else { 0.0 }).collect()
            })
        })
        .collect())
}

/// Masked mean of `scale · huber` per field, summed over fields. Vector
/// fields use the Huber of the error magnitude, which is rotation-invariant.
pub fn field_loss(pred: &FieldSet, target: &FieldSet, mask: Option<&Array2<bool>>, cfg: &LossConfig) -> Result<LossValue> {
    if pred.schema != target.schema || pred.values.dim() != target.values.dim() {
        return Err(Error::Shape("prediction and target layouts differ".into()));
    }
    let weights = loss_weights(target, mask, cfg)?;
    let d = target.dim;
    let mut per_field = Vec::new();
    let mut fully_masked = Vec::new();
    for (f, name) in target.schema.names().enumerate() {
        let Some(w) = &weights[f] else {
            fully_masked.push(name.to_string());
            per_field.push((name.to_string(), 0.0));
            continue;
        };
        let cols = target.schema.columns(f, d);
        let terms = (0..target.len()).filter(|&i| w[i] != 0.0).map(|i| {
            let e: Vec<f64> = cols.clone().map(|c| pred.values[[i, c]] - target.values[[i, c]]).collect();
            let mag = if target.schema.is_vector(f) { crate::invariants::norm(&e) } else { e[0] };
            w[i] * huber(mag, cfg.huber_delta)
        });
        per_field.push((name.to_string(), crate::sum::neumaier(terms)));
    }
    Ok(LossValue {
        total: crate::sum::neumaier(per_field.iter().map(|(_, v)| *v)),
        per_field,
        fully_masked,
    })
}

/// Differentiable [`field_loss`] of a `[n, width]` prediction node.
pub fn field_loss_tape(
    tape: &mut Tape,
    pred: Var,
    target: &FieldSet,
    mask: Option<&Array2<bool>>,
    cfg: &LossConfig,
) -> Result<Var> {
    let d = target.dim;
    if tape.shape(pred) != target.values.dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?}, targets are {:?}",
            tape.shape(pred),
            target.values.dim()
        )));
    }
    let weights = loss_weights(target, mask, cfg)?;
    let mut terms = Vec::new();
    for (f, w) in weights.into_iter().enumerate() {
        let Some(w) = w else { continue };
        let cols = target.schema.columns(f, d);
        let (start, len) = (cols.start, cols.len());
        let p = tape.slice_cols(pred, start, len);
        let t = tape.constant(target.values.slice(ndarray::s![.., start..start + len]).to_owned());
        let e = tape.sub(p, t);
        terms.push(if target.schema.is_vector(f) {
            tape.vec_huber_sum(e, w, cfg.huber_delta)
        } else {
            let w = Array2::from_shape_vec((w.len(), 1), w).unwrap();
            tape.huber_sum(e, w, cfg.huber_delta)
        });
    }
    let mut total = tape.constant(Array2::zeros((1, 1)));
    for t in terms {
        total = tape.add(total, t);
    }
    Ok(total)
}

/// `n` query points drawn uniformly without replacement, in ascending
/// index order; the whole sample when `n ≥ n_queries`.
pub fn subsample_queries(sample: &Sample, n: usize, seed: u64) -> Result<Sample> {
    if n == 0 {
        return Err(Error::Domain("subsample size must be >= 1".into()));
    }
    let total = sample.n_queries();
    if n >= total {
        return Ok(sample.clone());
    }
    let mut idx = rand::seq::index::sample(&mut rng::stream(seed, "subsample"), total, n).into_vec();
    idx.sort_unstable();
    Ok(sample.select_queries(&idx))
}

/// Optimization settings. Defaults follow the published protocol except
/// that Adam with decoupled weight decay is used throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Query points per sample and step.
    pub subsample: usize,
    /// Samples whose gradients are averaged into one step.
    pub batch_size: usize,
    /// Worker threads for per-sample gradients. Results do not depend on it.
    pub threads: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-3,
            weight_decay: 1e-4,
            patience: 400,
            factor: 0.5,
            min_lr: 6.25e-5,
            subsample: 4096,
            batch_size: 1,
            threads: 1,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean sample loss over the epoch, measured before each step.
    pub loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Lowest epoch loss so far.
    pub best: f64,
}

/// `epoch,loss,lr` CSV of a trajectory.
pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{:?},{:?}", r.epoch, r.loss, r.lr);
    }
    out
}

/// Loss and gradient of one sample against the model's field schema.
pub fn sample_gradient(model: &Model, store: &ParameterStore, sample: &Sample, cfg: &LossConfig) -> Result<(f64, Gradients)> {
    let targets = sample
        .targets
        .as_ref()
        .ok_or_else(|| Error::Schema {
            missing: model.config.fields.names().map(str::to_string).collect(),
        })?
        .project(&model.config.fields)?;
    let mask = sample.mask_or_default().map(|m| project_mask(&m, &sample.targets.as_ref().unwrap().schema, &model.config.fields));
    grad(store, |tape: &mut Tape, params: &Bound| {
        let pred = model.forward(tape, params, sample)?;
        field_loss_tape(tape, pred, &targets, mask.as_ref(), cfg)
    })
}

/// Mask columns reordered to `to`; every field of `to` must be in `from`.
pub fn project_mask(mask: &Array2<bool>, from: &FieldSchema, to: &FieldSchema) -> Array2<bool> {
    let cols: Vec<usize> = to.names().map(|n| from.index(n).expect("projected schema")).collect();
    mask.select(Axis(1), &cols)
}

/// Trains `store` in place and returns the per-epoch trajectory.
///
/// Each epoch visits the samples in a seeded random order, draws a fresh
/// query subset per sample, and takes one optimizer step per batch.
pub fn train(model: &Model, store: &mut ParameterStore, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.threads == 0 {
        return Err(Error::Domain("batch size and thread count must be >= 1".into()));
    }
    for s in data {
        s.targets
            .as_ref()
            .ok_or_else(|| Error::Schema {
                missing: model.config.fields.names().map(str::to_string).collect(),
            })?
            .project(&model.config.fields)?;
    }
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut sched = ReduceOnPlateau::new(cfg.lr, cfg.factor, cfg.patience, cfg.min_lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = sched.lr();
        order.sort_unstable();
        order.shuffle(&mut rng::stream(rng::child_seed(cfg.seed, "shuffle", epoch as u64), "order"));
        let mut losses = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let results = batch_gradients(model, store, data, batch, epoch, cfg)?;
            let mut total = Gradients::zeros_like(store);
            for (&idx, (loss, g)) in batch.iter().zip(&results) {
                if !loss.is_finite() || !g.global_norm().is_finite() {
                    return Err(Error::Diverged { epoch, sample: idx });
                }
                losses.push(*loss);
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            opt.step(store, &total, lr);
        }
        let loss = crate::sum::neumaier(losses.iter().copied()) / losses.len() as f64;
        sched.observe(loss);
        history.push(EpochRecord {
            epoch,
            loss,
            lr,
            best: sched.best(),
        });
    }
    Ok(history)
}

/// Per-sample losses and gradients of `batch`, in batch order.
fn batch_gradients(
    model: &Model,
    store: &ParameterStore,
    data: &[Sample],
    batch: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<Vec<(f64, Gradients)>> {
    let one = |idx: usize| -> Result<(f64, Gradients)> {
        let key = (epoch * data.len() + idx) as u64;
        let sub = subsample_queries(&data[idx], cfg.subsample, rng::child_seed(cfg.seed, "subsample", key))?;
        match sample_gradient(model, store, &sub, &cfg.loss) {
            Err(Error::NonFinite { .. }) => Err(Error::Diverged { epoch, sample: idx }),
            other => other,
        }
    };
    if cfg.threads == 1 || batch.len() == 1 {
        return batch.iter().map(|&i| one(i)).collect();
    }
    let per = batch.len().div_ceil(cfg.threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = batch
            .chunks(per)
            .map(|part| scope.spawn(move || part.iter().map(|&i| one(i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        for h in handles {
            out.extend(h.join().expect("gradient worker panicked")?);
        }
        Ok(out)
    })
}

/// Errors of one output component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMetrics {
    /// Field name, with `_x`/`_y`/`_z` for vector components.
    pub name: String,
    pub mse: f64,
    pub mae: f64,
    /// `None` when the true values have zero spread.
    pub z_mse: Option<f64>,
    pub surface_mse: Option<f64>,
    pub surface_mae: Option<f64>,
    pub surface_z_mse: Option<f64>,
    /// Points that entered the statistics.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub components: Vec<ComponentMetrics>,
}

const AXES: [&str; 3] = ["x", "y", "z"];

/// Component names and their `(field index, column)` in schema order.
pub fn component_names(schema: &FieldSchema, dim: usize) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for (f, name) in schema.names().enumerate() {
        let cols = schema.columns(f, dim);
        if schema.is_vector(f) {
            for (k, c) in cols.enumerate() {
                out.push((format!("{name}_{}", AXES[k]), f, c));
            }
        } else {
            out.push((name.to_string(), f, cols.start));
        }
    }
    out
}

/// Population standard deviation of every component's unmasked true values,
/// pooled over `sets`.
pub fn pooled_sigma(sets: &[(&FieldSet, Option<&Array2<bool>>)]) -> Result<Vec<f64>> {
    let first = sets.first().ok_or_else(|| Error::Domain("no evaluation data".into()))?.0;
    let comps = component_names(&first.schema, first.dim);
    let mut out = Vec::with_capacity(comps.len());
    for (_, f, c) in &comps {
        let mut vals = Vec::new();
        for (t, m) in sets {
            if t.schema != first.schema {
                return Err(Error::Shape("evaluation sets use different schemas".into()));
            }
            vals.extend((0..t.len()).filter(|&i| m.is_none_or(|m| m[[i, *f]])).map(|i| t.values[[i, *c]]));
        }
        out.push(std_dev(&vals));
    }
    Ok(out)
}

fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = crate::sum::neumaier(v.iter().copied()) / n;
    (crate::sum::neumaier(v.iter().map(|x| (x - mean).powi(2))) / n).sqrt()
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = v.collect();
    (!v.is_empty()).then(|| crate::sum::neumaier(v.iter().copied()) / v.len() as f64)
}

/// Physical and z-score errors with `σ` from the true values of this set.
pub fn metrics(pred: &FieldSet, target: &FieldSet, mask: Option<&Array2<bool>>, surface: &[bool]) -> Result<MetricReport> {
    let sigma = pooled_sigma(&[(target, mask)])?;
    metrics_with_sigma(pred, target, mask, surface, &sigma)
}

/// As [`metrics`] with externally pooled per-component `σ`.
pub fn metrics_with_sigma(
    pred: &FieldSet,
    target: &FieldSet,
    mask: Option<&Array2<bool>>,
    surface: &[bool],
    sigma: &[f64],
) -> Result<MetricReport> {
    if pred.schema != target.schema || pred.values.dim() != target.values.dim() {
        return Err(Error::Shape("prediction and target layouts differ".into()));
    }
    let comps = component_names(&target.schema, target.dim);
    if sigma.len() != comps.len() {
        return Err(Error::Shape(format!("{} sigmas for {} components", sigma.len(), comps.len())));
    }
    if !surface.is_empty() && surface.len() != target.len() {
        return Err(Error::Shape("surface flags do not match points".into()));
    }
    let components = comps
        .into_iter()
        .zip(sigma)
        .map(|((name, f, c), &s)| {
            let rows: Vec<usize> = (0..target.len()).filter(|&i| mask.is_none_or(|m| m[[i, f]])).collect();
            let err = |i: usize| pred.values[[i, c]] - target.values[[i, c]];
            let on_surface: Vec<usize> = rows.iter().copied().filter(|&i| surface.get(i) == Some(&true)).collect();
            let z = |rows: &[usize]| (s > 0.0).then(|| mean(rows.iter().map(|&i| (err(i) / s).powi(2)))).flatten();
            ComponentMetrics {
                mse: mean(rows.iter().map(|&i| err(i).powi(2))).unwrap_or(0.0),
                mae: mean(rows.iter().map(|&i| err(i).abs())).unwrap_or(0.0),
                z_mse: if rows.is_empty() { None } else { z(&rows) },
                surface_mse: mean(on_surface.iter().map(|&i| err(i).powi(2))),
                surface_mae: mean(on_surface.iter().map(|&i| err(i).abs())),
                surface_z_mse: z(&on_surface),
                count: rows.len(),
                name,
            }
        })
        .collect();
    Ok(MetricReport { components })
}

impl MetricReport {
    pub fn component(&self, name: &str) -> Option<&ComponentMetrics> {
        self.components.iter().find(|c| c.name == name)
    }

    /// Mean physical MAE over the components of field `name`.
    pub fn field_mae(&self, name: &str) -> Option<f64> {
        let prefix = format!("{name}_");
        mean(
            self.components
                .iter()
                .filter(|c| c.name == name || c.name.strip_prefix(&prefix).is_some_and(|a| AXES.contains(&a)))
                .map(|c| c.mae),
        )
    }

    /// Component-wise mean of several reports with identical layout.
    pub fn mean_of(reports: &[MetricReport]) -> Result<MetricReport> {
        let first = reports.first().ok_or_else(|| Error::Domain("no reports to average".into()))?;
        let avg = |get: &dyn Fn(&MetricReport) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = reports.iter().map(get).collect();
            v.and_then(|v| mean(v.into_iter()))
        };
        let mut components = Vec::with_capacity(first.components.len());
        for (k, c) in first.components.iter().enumerate() {
            if reports.iter().any(|r| r.components.get(k).is_none_or(|o| o.name != c.name)) {
                return Err(Error::Shape("reports have different components".into()));
            }
            components.push(ComponentMetrics {
                name: c.name.clone(),
                mse: avg(&|r| Some(r.components[k].mse)).unwrap(),
                mae: avg(&|r| Some(r.components[k].mae)).unwrap(),
                z_mse: avg(&|r| r.components[k].z_mse),
                surface_mse: avg(&|r| r.components[k].surface_mse),
                surface_mae: avg(&|r| r.components[k].surface_mae),
                surface_z_mse: avg(&|r| r.components[k].surface_z_mse),
                count: reports.iter().map(|r| r.components[k].count).sum(),
            });
        }
        Ok(MetricReport { components })
    }

    /// `component,mse,mae,z_mse,surface_mse,surface_mae,surface_z_mse,count`.
    /// An undefined z-score is written `nan-undefined`; a missing surface
    /// statistic is left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,mse,mae,z_mse,surface_mse,surface_mae,surface_z_mse,count\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
        let z = |v: Option<f64>| v.map_or("nan-undefined".to_string(), |v| format!("{v:?}"));
        for c in &self.components {
            let surface_z = if c.surface_mse.is_some() { z(c.surface_z_mse) } else { String::new() };
            let _ = writeln!(
                out,
                "{},{:?},{:?},{},{},{},{},{}",
                c.name,
                c.mse,
                c.mae,
                z(c.z_mse),
                opt(c.surface_mse),
                opt(c.surface_mae),
                surface_z,
                c.count
            );
        }
        out
    }
}
