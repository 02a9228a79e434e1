use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use globe::config::{model_config_from, train_config_from, write_model_config, ConfigMap};
use globe::hyperstack::{Model, ModelConfig};
use globe::netcore::{checkpoint, ParameterStore};
use globe::pipeline::{gen_cylinder_sample, gen_laplace_source_sample, CylinderConfig, LaplaceConfig};
use globe::pipeline::{read_sample, write_sample, FieldSet, Sample};
use globe::rng::{child_seed, stream};
use globe::training::{self, component_names, MetricReport, TrainConfig};
use globe::verify::{self, Suite};
use rand::Rng;

use crate::run::DEFAULT_CHUNK;

pub type CliResult<T> = Result<T, String>;

/// Extension of sample files inside data directories.
pub const SAMPLE_EXT: &str = "globe";

fn value<T: FromStr>(map: &ConfigMap, key: &str, default: T) -> CliResult<T> {
    Ok(map.value(key).map_err(|e| e.to_string())?.unwrap_or(default))
}

fn required(map: &ConfigMap, key: &str, what: &str) -> CliResult<PathBuf> {
    map.get(key)
        .map(PathBuf::from)
        .ok_or_else(|| format!("missing {what} (`{key}` in the config or on the command line)"))
}

fn at(path: &Path) -> impl Fn(globe::Error) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

fn seed(map: &ConfigMap) -> CliResult<u64> {
    value(map, "seed", 0)
}

fn chunk_size(map: &ConfigMap) -> CliResult<usize> {
    let c = value(map, "chunk_size", DEFAULT_CHUNK)?;
    if c == 0 {
        return Err("chunk_size must be >= 1".into());
    }
    Ok(c)
}

fn threads(map: &ConfigMap) -> CliResult<usize> {
    Ok(value(map, "threads", 1usize)?.max(1))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn gen(map: &ConfigMap) -> CliResult<()> {
    let out = required(map, "out", "output directory")?;
    let kind: String = value(map, "kind", "cylinder".to_string())?;
    let count: usize = value(map, "count", 1)?;
    let seed = seed(map)?;
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "kind = {kind}\ncount = {count}\nseed = {seed}");
    match kind.as_str() {
        "cylinder" => {
            let base = CylinderConfig {
                n_query: value(map, "n_query", CylinderConfig::default().n_query)?,
                n_faces: value(map, "n_faces", CylinderConfig::default().n_faces)?,
                ..Default::default()
            };
            let _ = writeln!(
                manifest,
                "radius = {:?}\nspeed = {:?}\nrho = {:?}\ndelta_ratio = {:?}\nn_faces = {}\nn_query = {}",
                base.radius, base.speed, base.rho, base.delta_ratio, base.n_faces, base.n_query
            );
            for i in 0..count {
                let s = child_seed(seed, "data", i as u64);
                let angle = stream(s, "angle").random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let cfg = CylinderConfig { angle, ..base.clone() };
                let name = format!("sample_{i:04}.{SAMPLE_EXT}");
                let sample = gen_cylinder_sample(&cfg, s).map_err(|e| e.to_string())?;
                let path = out.join(&name);
                write_sample(&sample, &path).map_err(at(&path))?;
                let _ = writeln!(manifest, "sample.{i:04} = {name} seed={s} angle={angle:?}");
            }
        }
        "laplace" => {
            let cfg = LaplaceConfig::default();
            let n_query = value(map, "n_query", 256)?;
            let _ = writeln!(
                manifest,
                "sources = {}..{}\nstrength = {:?}..{:?}\nsource_half_width = {:?}\nquery_half_width = {:?}\nring_radius = {:?}\nfaces_per_source = {}\nn_query = {n_query}",
                cfg.min_sources,
                cfg.max_sources,
                cfg.min_strength,
                cfg.max_strength,
                cfg.source_half_width,
                cfg.query_half_width,
                cfg.ring_radius,
                cfg.faces_per_source
            );
            for i in 0..count {
                let s = child_seed(seed, "data", i as u64);
                let sources = cfg.random_monopoles(s);
                let name = format!("sample_{i:04}.{SAMPLE_EXT}");
                let sample = gen_laplace_source_sample(&sources, &cfg, n_query, s).map_err(|e| e.to_string())?;
                let path = out.join(&name);
                write_sample(&sample, &path).map_err(at(&path))?;
                let list: Vec<String> = sources
                    .iter()
                    .map(|m| format!("{:?}:{:?}:{:?}", m.position[0], m.position[1], m.strength))
                    .collect();
                let _ = writeln!(manifest, "sample.{i:04} = {name} seed={s} sources={}", list.join(";"));
            }
        }
        other => return Err(format!("unknown sample kind {other:?}; use cylinder or laplace")),
    }
    write(&out.join("manifest.txt"), &manifest)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

/// Sorted `*.globe` files of `dir`, parsed.
pub fn load_dir(dir: &Path) -> CliResult<Vec<(PathBuf, Sample)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| format!("{}: {e}", dir.display()))?.path();
        if p.extension().is_some_and(|e| e == SAMPLE_EXT) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(format!("{}: no .{SAMPLE_EXT} samples", dir.display()));
    }
    paths
        .into_iter()
        .map(|p| {
            let s = read_sample(&p).map_err(at(&p))?;
            Ok((p, s))
        })
        .collect()
}

/// Named base configuration. `auto` picks one from the boundary labels of
/// `data`.
pub fn preset(name: &str, data: &[Sample]) -> CliResult<ModelConfig> {
    match name {
        "airfrans" => Ok(ModelConfig::default()),
        "cylinder" => Ok(ModelConfig {
            bc_types: vec!["free_slip".into()],
            ..ModelConfig::default()
        }),
        "laplace" => Ok(ModelConfig::laplace()),
        "auto" => {
            let has = |bc: &str| data.iter().any(|s| s.boundaries.contains_key(bc));
            let name = if has("source_pos") || has("source_neg") {
                "laplace"
            } else if has("free_slip") {
                "cylinder"
            } else {
                "airfrans"
            };
            preset(name, data)
        }
        other => Err(format!("unknown preset {other:?}; use auto, airfrans, cylinder or laplace")),
    }
}

pub fn model_config(map: &ConfigMap, data: &[Sample]) -> CliResult<ModelConfig> {
    let base = preset(&value(map, "preset", "auto".to_string())?, data)?;
    model_config_from(map, base).map_err(|e| e.to_string())
}

pub fn init_model(config: &ModelConfig, seed: u64) -> CliResult<(ParameterStore, Model)> {
    let mut store = ParameterStore::new();
    let model = Model::init(&mut store, config, &mut stream(seed, "init")).map_err(|e| e.to_string())?;
    Ok((store, model))
}

pub fn load_model(path: &Path) -> CliResult<(ParameterStore, Model)> {
    let (store, text) = checkpoint::load(path).map_err(at(path))?;
    let map = ConfigMap::parse(&text).map_err(at(path))?;
    let config = model_config_from(&map, ModelConfig::default()).map_err(at(path))?;
    let model = Model::attach(&store, &config).map_err(at(path))?;
    Ok((store, model))
}

/// Loss history path next to a checkpoint: `model.ckpt` → `model.loss.csv`.
pub fn loss_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

pub fn train(map: &ConfigMap) -> CliResult<()> {
    let data_dir = required(map, "data", "data directory")?;
    let out = required(map, "out", "checkpoint path")?;
    let data: Vec<Sample> = load_dir(&data_dir)?.into_iter().map(|(_, s)| s).collect();
    let config = model_config(map, &data)?;
    let cfg = train_config_from(map, TrainConfig::default()).map_err(|e| e.to_string())?;
    let (mut store, model) = init_model(&config, cfg.seed)?;
    println!("# model\n{}", write_model_config(&config));
    let history = training::train(&model, &mut store, &data, &cfg).map_err(|e| e.to_string())?;
    checkpoint::save(&out, &store, &write_model_config(&config)).map_err(at(&out))?;
    write(&loss_path(&out), &training::loss_csv(&history))?;
    if let Some(last) = history.last() {
        println!("epoch {} loss {:?} lr {:?}", last.epoch, last.loss, last.lr);
    }
    println!("wrote {} and {}", out.display(), loss_path(&out).display());
    Ok(())
}

/// Coordinates then one column per field component.
pub fn prediction_csv(sample: &Sample, pred: &FieldSet) -> String {
    let axes = ["x", "y", "z"];
    let comps = component_names(&pred.schema, pred.dim);
    let mut header: Vec<String> = axes[..sample.dim].iter().map(|a| a.to_string()).collect();
    header.extend(comps.iter().map(|(n, _, _)| n.clone()));
    let mut out = header.join(",");
    out.push('\n');
    for (q, row) in sample.queries.rows().into_iter().zip(pred.values.rows()) {
        let cells: Vec<String> = q.iter().chain(comps.iter().map(|(_, _, c)| &row[*c])).map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn infer(map: &ConfigMap) -> CliResult<()> {
    let ckpt = required(map, "ckpt", "checkpoint")?;
    let sample_path = required(map, "sample", "sample file")?;
    let out = required(map, "out", "output CSV")?;
    let (store, model) = load_model(&ckpt)?;
    let sample = read_sample(&sample_path).map_err(at(&sample_path))?;
    let pred = model
        .predict_par(&store, &sample, chunk_size(map)?, threads(map)?)
        .map_err(at(&sample_path))?;
    write(&out, &prediction_csv(&sample, &pred))?;
    println!("wrote {} rows to {}", pred.len(), out.display());
    Ok(())
}

pub fn eval(map: &ConfigMap) -> CliResult<()> {
    let ckpt = required(map, "ckpt", "checkpoint")?;
    let data_dir = required(map, "data", "data directory")?;
    let out = required(map, "out", "report directory")?;
    let (store, model) = load_model(&ckpt)?;
    let fields = &model.config.fields;
    let (chunk, threads) = (chunk_size(map)?, threads(map)?);
    let mut rows = Vec::new();
    for (path, sample) in load_dir(&data_dir)? {
        let target = sample
            .targets
            .as_ref()
            .ok_or_else(|| format!("{}: sample has no targets", path.display()))?
            .project(fields)
            .map_err(at(&path))?;
        let mask = sample
            .mask
            .as_ref()
            .map(|m| training::project_mask(m, &sample.targets.as_ref().unwrap().schema, fields));
        let pred = model.predict_par(&store, &sample, chunk, threads).map_err(at(&path))?;
        rows.push((path, sample.surface.clone(), target, mask, pred));
    }
    let pooled: Vec<_> = rows.iter().map(|(_, _, t, m, _)| (t, m.as_ref())).collect();
    let sigma = training::pooled_sigma(&pooled).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    let mut per_sample = String::new();
    for (path, surface, target, mask, pred) in &rows {
        let r = training::metrics_with_sigma(pred, target, mask.as_ref(), surface, &sigma).map_err(at(path))?;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let csv = r.to_csv();
        let mut lines = csv.lines();
        if per_sample.is_empty() {
            let _ = writeln!(per_sample, "sample,{}", lines.next().unwrap_or_default());
        } else {
            lines.next();
        }
        for line in lines {
            let _ = writeln!(per_sample, "{name},{line}");
        }
        reports.push(r);
    }
    let aggregate = MetricReport::mean_of(&reports).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    write(&out.join("per_sample.csv"), &per_sample)?;
    write(&out.join("aggregate.csv"), &aggregate.to_csv())?;
    let mut sig = String::from("component,sigma\n");
    for ((n, _, _), s) in component_names(fields, model.config.dim).iter().zip(&sigma) {
        let _ = writeln!(sig, "{n},{s:?}");
    }
    write(&out.join("sigma.csv"), &sig)?;
    print!("{}", aggregate.to_csv());
    println!("wrote per_sample.csv, aggregate.csv and sigma.csv to {}", out.display());
    Ok(())
}

pub fn verify(map: &ConfigMap) -> CliResult<bool> {
    let seed = seed(map)?;
    let suite: String = value(map, "suite", "all".to_string())?;
    let suites: Vec<Suite> = if suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![suite.parse().map_err(|e: globe::Error| e.to_string())?]
    };
    let (store, model) = match map.get("ckpt") {
        Some(p) => load_model(Path::new(p))?,
        None => init_model(&model_config(map, &[])?, seed)?,
    };
    let mut all = true;
    for s in suites {
        let report = verify::run(s, &model, &store, seed).map_err(|e| format!("{}: {e}", s.name()))?;
        let worst = report
            .checks
            .iter()
            .filter(|c| c.gating)
            .map(|c| c.value / c.tolerance)
            .fold(0.0, f64::max);
        println!("{report}");
        println!("{} worst value/tolerance {worst:.3e}", s.name());
        all &= report.passed();
    }
    println!("verify {}", if all { "PASS" } else { "FAIL" });
    Ok(all)
}
