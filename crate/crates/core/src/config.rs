//! `key = value` text configs for models and runs.
//!
//! ```
//! use globe::config::{model_config_from, write_model_config, ConfigMap};
//! use globe::hyperstack::ModelConfig;
//!
//! let map = ConfigMap::parse("hyperlayers = 1\nhidden = 16, 16  # two layers\n").unwrap();
//! let cfg = model_config_from(&map, ModelConfig::default()).unwrap();
//! assert_eq!(cfg.hidden, vec![16, 16]);
//! let again = model_config_from(&ConfigMap::parse(&write_model_config(&cfg)).unwrap(), ModelConfig::laplace()).unwrap();
//! assert_eq!(again, cfg);
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::strip_comment;
use crate::hyperstack::ModelConfig;
use crate::pipeline::FieldSchema;
use crate::training::TrainConfig;

/// Keys read by [`model_config_from`].
pub const MODEL_KEYS: &[&str] = &[
    "dim",
    "hyperlayers",
    "latent_scalars",
    "latent_vectors",
    "harmonics",
    "hidden",
    "pade_n",
    "pade_d",
    "scalar_fields",
    "vector_fields",
    "bc_types",
    "scales",
    "global_scalars",
    "global_vectors",
];

/// Keys read by [`train_config_from`], besides `loss_scale.<field>`.
pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "lr",
    "weight_decay",
    "patience",
    "factor",
    "min_lr",
    "subsample",
    "batch_size",
    "threads",
    "huber_delta",
    "seed",
];

/// Ordered `key = value` entries; later assignments win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            map.entries.insert(k.to_string(), (v.trim().to_string(), i + 1));
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Typed value of `key`, if present.
    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|_| bad_value(key, v, *line)),
        }
    }

    /// Comma-separated list; an empty value is the empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad_value(key, v, *line)))
                .collect::<Result<_>>()
                .map(Some),
        }
    }

    /// Keys not in `known` and not matching a `prefix.` in `prefixes`.
    pub fn unknown_keys(&self, known: &[&str], prefixes: &[&str]) -> Vec<String> {
        self.keys()
            .filter(|k| !known.contains(k) && !prefixes.iter().any(|p| k.strip_prefix(p).is_some_and(|r| r.starts_with('.'))))
            .map(str::to_string)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, (v, _)) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn bad_value(key: &str, value: &str, line: usize) -> Error {
    if line == 0 {
        Error::Config(format!("invalid value {value:?} for {key}"))
    } else {
        Error::Parse {
            line,
            msg: format!("invalid value {value:?} for {key}"),
        }
    }
}

/// `base` with every model key present in `map` replaced.
pub fn model_config_from(map: &ConfigMap, base: ModelConfig) -> Result<ModelConfig> {
    let mut c = base;
    macro_rules! take {
        ($key:literal, $field:expr) => {
            if let Some(v) = map.value($key)? {
                $field = v;
            }
        };
    }
    macro_rules! take_list {
        ($key:literal, $field:expr) => {
            if let Some(v) = map.list($key)? {
                $field = v;
            }
        };
    }
    take!("dim", c.dim);
    take!("hyperlayers", c.hyperlayers);
    take!("latent_scalars", c.latent_scalars);
    take!("latent_vectors", c.latent_vectors);
    take!("harmonics", c.harmonics);
    take_list!("hidden", c.hidden);
    take!("pade_n", c.pade_n);
    take!("pade_d", c.pade_d);
    let mut scalars = c.fields.scalars.clone();
    let mut vectors = c.fields.vectors.clone();
    take_list!("scalar_fields", scalars);
    take_list!("vector_fields", vectors);
    c.fields = FieldSchema::new(scalars, vectors);
    take_list!("bc_types", c.bc_types);
    take!("scales", c.n_scales);
    take_list!("global_scalars", c.global_scalars);
    take_list!("global_vectors", c.global_vectors);
    c.validate()?;
    Ok(c)
}

/// Every model key, in [`MODEL_KEYS`] order.
pub fn write_model_config(c: &ModelConfig) -> String {
    let join = |v: &[String]| v.join(",");
    let hidden: Vec<String> = c.hidden.iter().map(|h| h.to_string()).collect();
    let values = [
        c.dim.to_string(),
        c.hyperlayers.to_string(),
        c.latent_scalars.to_string(),
        c.latent_vectors.to_string(),
        c.harmonics.to_string(),
        hidden.join(","),
        c.pade_n.to_string(),
        c.pade_d.to_string(),
        join(&c.fields.scalars),
        join(&c.fields.vectors),
        join(&c.bc_types),
        c.n_scales.to_string(),
        join(&c.global_scalars),
        join(&c.global_vectors),
    ];
    let mut out = String::new();
    for (k, v) in MODEL_KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

/// `base` with every training key present in `map` replaced.
pub fn train_config_from(map: &ConfigMap, base: TrainConfig) -> Result<TrainConfig> {
    let mut c = base;
    macro_rules! take {
        ($key:literal, $field:expr) => {
            if let Some(v) = map.value($key)? {
                $field = v;
            }
        };
    }
    take!("epochs", c.epochs);
    take!("lr", c.lr);
    take!("weight_decay", c.weight_decay);
    take!("patience", c.patience);
    take!("factor", c.factor);
    take!("min_lr", c.min_lr);
    take!("subsample", c.subsample);
    take!("batch_size", c.batch_size);
    take!("threads", c.threads);
    take!("huber_delta", c.loss.huber_delta);
    take!("seed", c.seed);
    for key in map.keys() {
        if let Some(field) = key.strip_prefix("loss_scale.") {
            let v: f64 = map.value(key)?.expect("present");
            match c.loss.scales.iter_mut().find(|(n, _)| n == field) {
                Some(entry) => entry.1 = v,
                None => c.loss.scales.push((field.to_string(), v)),
            }
        }
    }
    if !(c.lr > 0.0) || !(c.factor > 0.0 && c.factor < 1.0) || c.subsample == 0 || c.batch_size == 0 || c.threads == 0 {
        return Err(Error::Config(
            "need lr > 0, 0 < factor < 1 and positive subsample, batch_size and threads".into(),
        ));
    }
    Ok(c)
}

/// Every training key with its value.
pub fn write_train_config(c: &TrainConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "epochs = {}", c.epochs);
    let _ = writeln!(out, "lr = {:?}", c.lr);
    let _ = writeln!(out, "weight_decay = {:?}", c.weight_decay);
    let _ = writeln!(out, "patience = {}", c.patience);
    let _ = writeln!(out, "factor = {:?}", c.factor);
    let _ = writeln!(out, "min_lr = {:?}", c.min_lr);
    let _ = writeln!(out, "subsample = {}", c.subsample);
    let _ = writeln!(out, "batch_size = {}", c.batch_size);
    let _ = writeln!(out, "threads = {}", c.threads);
    let _ = writeln!(out, "huber_delta = {:?}", c.loss.huber_delta);
    let _ = writeln!(out, "seed = {}", c.seed);
    for (f, s) in &c.loss.scales {
        let _ = writeln!(out, "loss_scale.{f} = {s:?}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip() {
        for c in [ModelConfig::default(), ModelConfig::laplace()] {
            let text = write_model_config(&c);
            let back = model_config_from(&ConfigMap::parse(&text).unwrap(), ModelConfig::default()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn train_round_trip_and_overrides() {
        let c = TrainConfig {
            epochs: 7,
            lr: 3e-3,
            ..Default::default()
        };
        let mut map = ConfigMap::parse(&write_train_config(&c)).unwrap();
        assert_eq!(train_config_from(&map, TrainConfig::default()).unwrap(), c);
        map.set("epochs", 9);
        map.set("loss_scale.phi", 2.5);
        let o = train_config_from(&map, TrainConfig::default()).unwrap();
        assert_eq!(o.epochs, 9);
        assert_eq!(o.loss.scale("phi"), 2.5);
    }

    #[test]
    fn errors_carry_lines() {
        assert!(matches!(ConfigMap::parse("a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        let m = ConfigMap::parse("\n\nhidden = 4, x\n").unwrap();
        assert!(matches!(model_config_from(&m, ModelConfig::default()), Err(Error::Parse { line: 3, .. })));
        let m = ConfigMap::parse("hyperlayers = 0").unwrap();
        assert!(matches!(model_config_from(&m, ModelConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_listed() {
        let m = ConfigMap::parse("dim = 2\nloss_scale.Cp = 1\nbogus = 3\n").unwrap();
        assert_eq!(m.unknown_keys(MODEL_KEYS, &["loss_scale"]), vec!["bogus".to_string()]);
    }

    #[test]
    fn empty_lists() {
        let m = ConfigMap::parse("global_vectors =\nglobal_scalars = \n").unwrap();
        let c = model_config_from(&m, ModelConfig::default()).unwrap();
        assert!(c.global_vectors.is_empty() && c.global_scalars.is_empty());
    }
}
