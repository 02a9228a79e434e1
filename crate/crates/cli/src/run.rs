use std::path::PathBuf;

use globe::config::{ConfigMap, MODEL_KEYS, TRAIN_KEYS};

use crate::commands::{self, CliResult};
use crate::{Cli, Command, Kind};

/// Run keys besides the model and training keys.
pub const RUN_KEYS: &[&str] = &[
    "preset",
    "chunk_size",
    "deterministic",
    "kind",
    "count",
    "n_query",
    "n_faces",
    "out",
    "data",
    "ckpt",
    "sample",
    "suite",
];

pub const DEFAULT_CHUNK: usize = 4096;

/// Config file entries overridden by command-line flags.
pub fn effective_config(cli: &Cli) -> CliResult<ConfigMap> {
    let mut map = match &cli.common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            ConfigMap::parse(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => ConfigMap::default(),
    };
    let known: Vec<&str> = MODEL_KEYS.iter().chain(TRAIN_KEYS).chain(RUN_KEYS).copied().collect();
    let unknown = map.unknown_keys(&known, &["loss_scale"]);
    if !unknown.is_empty() {
        return Err(format!("unknown config keys: {}", unknown.join(", ")));
    }
    let c = &cli.common;
    let path = |p: &PathBuf| p.display().to_string();
    set(&mut map, "seed", c.seed);
    set(&mut map, "out", c.out.as_ref().map(path));
    set(&mut map, "chunk_size", c.chunk_size);
    set(&mut map, "threads", c.threads);
    if c.deterministic {
        map.set("deterministic", true);
    }
    match &cli.command {
        Command::Gen { kind, count, n_query } => {
            set(
                &mut map,
                "kind",
                kind.map(|k| match k {
                    Kind::Cylinder => "cylinder",
                    Kind::Laplace => "laplace",
                }),
            );
            set(&mut map, "count", *count);
            set(&mut map, "n_query", *n_query);
        }
        Command::Train {
            data,
            epochs,
            lr,
            wd,
            subsample,
            batch_size,
            preset,
        } => {
            set(&mut map, "data", data.as_ref().map(path));
            set(&mut map, "epochs", *epochs);
            set(&mut map, "lr", *lr);
            set(&mut map, "weight_decay", *wd);
            set(&mut map, "subsample", *subsample);
            set(&mut map, "batch_size", *batch_size);
            set(&mut map, "preset", preset.clone());
        }
        Command::Infer { ckpt, sample } => {
            set(&mut map, "ckpt", ckpt.as_ref().map(path));
            set(&mut map, "sample", sample.as_ref().map(path));
        }
        Command::Eval { ckpt, data } => {
            set(&mut map, "ckpt", ckpt.as_ref().map(path));
            set(&mut map, "data", data.as_ref().map(path));
        }
        Command::Verify { suite, ckpt, preset } => {
            set(&mut map, "suite", suite.clone());
            set(&mut map, "ckpt", ckpt.as_ref().map(path));
            set(&mut map, "preset", preset.clone());
        }
    }
    Ok(map)
}

fn set<T: ToString>(map: &mut ConfigMap, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.set(key, v);
    }
}

/// `Ok(false)` means the command ran but a property check failed.
pub fn dispatch(cli: Cli) -> CliResult<bool> {
    let map = effective_config(&cli)?;
    println!("# effective config");
    print!("{}", map.to_text());
    match cli.command {
        Command::Gen { .. } => commands::gen(&map).map(|()| true),
        Command::Train { .. } => commands::train(&map).map(|()| true),
        Command::Infer { .. } => commands::infer(&map).map(|()| true),
        Command::Eval { .. } => commands::eval(&map).map(|()| true),
        Command::Verify { .. } => commands::verify(&map),
    }
}
