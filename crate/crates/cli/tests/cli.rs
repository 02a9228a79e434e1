use std::path::Path;
use std::process::{Command, Output};

use globe::config::{model_config_from, ConfigMap};
use globe::hyperstack::{Model, ModelConfig};
use globe::netcore::{checkpoint, ParameterStore};
use globe::pipeline::{read_sample, write_sample, FieldSchema, FieldSet};
use globe::rng::stream;
use ndarray::Array2;
use tempfile::TempDir;

fn globe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_globe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = globe(dir, args);
    assert!(
        out.status.success(),
        "globe {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    (header, lines.map(|l| l.split(',').map(str::to_string).collect()).collect())
}

const SMALL: &str = "hidden = 8, 8\n";

/// Laplace data plus a briefly trained small model.
fn laplace_setup() -> TempDir {
    let t = TempDir::new().unwrap();
    let d = t.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();
    ok(d, &["gen", "laplace", "--count", "3", "--n-query", "40", "--seed", "4", "--out", "data"]);
    ok(d, &["train", "data", "--config", "small.cfg", "--epochs", "2", "--subsample", "16", "--out", "m.ckpt"]);
    t
}

#[test]
fn gen_zero_count_writes_empty_manifest() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["gen", "cylinder", "--count", "0", "--out", "d"]);
    let m = ConfigMap::parse(&read(t.path().join("d/manifest.txt"))).unwrap();
    assert_eq!(m.get("count"), Some("0"));
    assert!(m.keys().all(|k| !k.starts_with("sample.")));
    assert_eq!(std::fs::read_dir(t.path().join("d")).unwrap().count(), 1);
}

#[test]
fn gen_is_reproducible_and_seed_sensitive() {
    let t = TempDir::new().unwrap();
    for (dir, seed) in [("a", "9"), ("b", "9"), ("c", "10")] {
        ok(t.path(), &["gen", "laplace", "--count", "2", "--seed", seed, "--out", dir]);
    }
    let f = |d: &str| read(t.path().join(d).join("sample_0001.globe"));
    assert_eq!(f("a"), f("b"));
    assert_ne!(f("a"), f("c"));
    assert_eq!(read(t.path().join("a/manifest.txt")), read(t.path().join("b/manifest.txt")));
}

#[test]
fn gen_cylinder_total_pressure_is_one() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["gen", "cylinder", "--count", "50", "--n-query", "32", "--out", "d"]);
    let mut angles = Vec::new();
    for i in 0..50 {
        let s = read_sample(t.path().join(format!("d/sample_{i:04}.globe"))).unwrap();
        let tg = s.targets.as_ref().unwrap();
        let f = tg.schema.index("Cpt").unwrap();
        let mask = s.mask_or_default().unwrap();
        let cpt = tg.scalar("Cpt").unwrap();
        for (q, v) in cpt.iter().enumerate() {
            if mask[[q, f]] {
                assert!((v - 1.0).abs() < 1e-9, "sample {i} point {q}: Cpt = {v}");
            }
        }
        angles.push(s.global_vector("U_dir").unwrap()[1]);
    }
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    assert_eq!(angles.len(), 50, "free-stream directions vary");
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let t = TempDir::new().unwrap();
    std::fs::write(t.path().join("run.cfg"), "kind = laplace\ncount = 5\nout = from_file\n").unwrap();
    let stdout = ok(t.path(), &["gen", "--config", "run.cfg", "--count", "1"]);
    let echoed = ConfigMap::parse(stdout.split("wrote").next().unwrap()).unwrap();
    assert_eq!(echoed.get("count"), Some("1"));
    assert_eq!(echoed.get("kind"), Some("laplace"));
    assert!(t.path().join("from_file/sample_0000.globe").exists());
    assert!(!t.path().join("from_file/sample_0001.globe").exists());

    std::fs::write(t.path().join("bad.cfg"), "colour = blue\n").unwrap();
    let out = globe(t.path(), &["gen", "--config", "bad.cfg", "--out", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();
    ok(d, &["gen", "laplace", "--count", "1", "--out", "data"]);
    ok(d, &["train", "data", "--config", "small.cfg", "--epochs", "0", "--seed", "12", "--out", "m.ckpt"]);
    let (store, text) = checkpoint::load(&d.join("m.ckpt")).unwrap();
    let config = model_config_from(&ConfigMap::parse(&text).unwrap(), ModelConfig::default()).unwrap();
    assert_eq!(config.hidden, vec![8, 8]);
    assert_eq!(config.bc_types, ModelConfig::laplace().bc_types);
    let mut fresh = ParameterStore::new();
    Model::init(&mut fresh, &config, &mut stream(12, "init")).unwrap();
    assert_eq!(store, fresh);
    assert_eq!(read(d.join("m.loss.csv")), "epoch,loss,lr\n");
}

#[test]
fn training_is_reproducible_across_runs_and_threads() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    std::fs::write(d.join("small.cfg"), SMALL).unwrap();
    ok(d, &["gen", "laplace", "--count", "4", "--n-query", "30", "--out", "data"]);
    let common = ["train", "data", "--config", "small.cfg", "--epochs", "3", "--batch-size", "2", "--subsample", "12"];
    for (out, threads) in [("a.ckpt", "1"), ("b.ckpt", "1"), ("c.ckpt", "2")] {
        let mut args = common.to_vec();
        args.extend(["--threads", threads, "--deterministic", "--out", out]);
        ok(d, &args);
    }
    let a = read(d.join("a.loss.csv"));
    assert_eq!(a.lines().count(), 4);
    assert_eq!(a, read(d.join("b.loss.csv")));
    assert_eq!(a, read(d.join("c.loss.csv")));
    assert_eq!(std::fs::read(d.join("a.ckpt")).unwrap(), std::fs::read(d.join("c.ckpt")).unwrap());
}

#[test]
fn training_errors() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    std::fs::create_dir(d.join("data")).unwrap();
    std::fs::write(d.join("data/broken.globe"), "globe-sample v1 d=2\n[queries]\n1 2 3\n").unwrap();
    let out = globe(d, &["train", "data", "--out", "m.ckpt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.globe"));

    ok(d, &["gen", "laplace", "--count", "1", "--out", "good"]);
    let out = globe(d, &["train", "good", "--epochs", "3", "--lr", "1e300", "--out", "m.ckpt"]);
    assert!(!out.status.success(), "a huge learning rate must diverge");
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    assert!(!d.join("m.ckpt").exists());
}

#[test]
fn infer_chunking_threads_and_layout() {
    let t = laplace_setup();
    let d = t.path();
    ok(d, &["infer", "--ckpt", "m.ckpt", "data/sample_0001.globe", "--chunk-size", "1", "--out", "a.csv"]);
    ok(d, &["infer", "--ckpt", "m.ckpt", "data/sample_0001.globe", "--chunk-size", "1000000", "--out", "b.csv"]);
    ok(d, &["infer", "--ckpt", "m.ckpt", "data/sample_0001.globe", "--chunk-size", "3", "--threads", "4", "--out", "c.csv"]);
    let (ha, ra) = csv(&read(d.join("a.csv")));
    let (_, rb) = csv(&read(d.join("b.csv")));
    assert_eq!(ha, ["x", "y", "phi", "grad_phi_x", "grad_phi_y"]);
    assert_eq!(ra.len(), 40);
    for (x, y) in ra.iter().flatten().zip(rb.iter().flatten()) {
        let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
        assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300), "{x} vs {y}");
    }
    assert_eq!(read(d.join("c.csv")), read(d.join("a.csv")));
    let s = read_sample(d.join("data/sample_0001.globe")).unwrap();
    assert_eq!(ra[5][0].parse::<f64>().unwrap(), s.queries[[5, 0]]);
}

#[test]
fn infer_without_targets_and_with_empty_queries() {
    let t = laplace_setup();
    let d = t.path();
    let mut s = read_sample(d.join("data/sample_0000.globe")).unwrap();
    s.targets = None;
    s.mask = None;
    write_sample(&s, d.join("bare.globe")).unwrap();
    ok(d, &["infer", "--ckpt", "m.ckpt", "bare.globe", "--out", "bare.csv"]);
    assert_eq!(read(d.join("bare.csv")).lines().count(), 41);

    s.queries = Array2::zeros((0, 2));
    s.surface.clear();
    write_sample(&s, d.join("empty.globe")).unwrap();
    ok(d, &["infer", "--ckpt", "m.ckpt", "empty.globe", "--out", "empty.csv"]);
    assert_eq!(read(d.join("empty.csv")), "x,y,phi,grad_phi_x,grad_phi_y\n");
}

#[test]
fn infer_reports_incompatible_samples() {
    let t = laplace_setup();
    let d = t.path();
    ok(d, &["gen", "cylinder", "--count", "1", "--out", "cyl"]);
    let out = globe(d, &["infer", "--ckpt", "m.ckpt", "cyl/sample_0000.globe", "--out", "x.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample_0000.globe"));
}

/// Replaces every sample's targets with the checkpoint's own predictions.
fn self_targets(d: &Path, data: &str, out: &str) {
    let (store, text) = checkpoint::load(&d.join("m.ckpt")).unwrap();
    let config = model_config_from(&ConfigMap::parse(&text).unwrap(), ModelConfig::default()).unwrap();
    let model = Model::attach(&store, &config).unwrap();
    std::fs::create_dir_all(d.join(out)).unwrap();
    for e in std::fs::read_dir(d.join(data)).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "globe") {
            let mut s = read_sample(&p).unwrap();
            s.targets = Some(model.predict(&store, &s, 64).unwrap());
            write_sample(&s, d.join(out).join(p.file_name().unwrap())).unwrap();
        }
    }
}

#[test]
fn eval_of_own_predictions_is_zero() {
    let t = laplace_setup();
    let d = t.path();
    self_targets(d, "data", "own");
    ok(d, &["eval", "--ckpt", "m.ckpt", "own", "--out", "rep"]);
    let (h, rows) = csv(&read(d.join("rep/aggregate.csv")));
    let mse = h.iter().position(|c| c == "mse").unwrap();
    let z = h.iter().position(|c| c == "z_mse").unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r[mse].parse::<f64>().unwrap() < 1e-24, "{r:?}");
        assert!(r[z].parse::<f64>().unwrap() < 1e-20, "{r:?}");
    }
}

#[test]
fn eval_aggregate_is_the_per_sample_mean() {
    let t = laplace_setup();
    let d = t.path();
    ok(d, &["eval", "--ckpt", "m.ckpt", "data", "--out", "rep"]);
    let (hp, per) = csv(&read(d.join("rep/per_sample.csv")));
    let (ha, agg) = csv(&read(d.join("rep/aggregate.csv")));
    assert_eq!(hp[0], "sample");
    assert_eq!(&hp[1..], &ha[..]);
    assert_eq!(per.len(), 9);
    for (k, row) in agg.iter().enumerate() {
        for col in 1..4 {
            let vals: Vec<f64> = per.iter().filter(|r| r[1] == row[0]).map(|r| r[col + 1].parse().unwrap()).collect();
            assert_eq!(vals.len(), 3);
            let mean = vals.iter().sum::<f64>() / 3.0;
            let a: f64 = row[col].parse().unwrap();
            assert!((a - mean).abs() <= 1e-14 * mean.abs(), "component {k} column {col}");
        }
    }
    let (_, sig) = csv(&read(d.join("rep/sigma.csv")));
    assert!(sig.iter().all(|r| r[1].parse::<f64>().unwrap() > 0.0));
}

#[test]
fn eval_constant_field_and_missing_targets() {
    let t = laplace_setup();
    let d = t.path();
    std::fs::create_dir(d.join("flat")).unwrap();
    let mut s = read_sample(d.join("data/sample_0000.globe")).unwrap();
    let tg = s.targets.as_mut().unwrap();
    tg.values.column_mut(0).fill(0.25);
    write_sample(&s, d.join("flat/a.globe")).unwrap();
    ok(d, &["eval", "--ckpt", "m.ckpt", "flat", "--out", "rep"]);
    let agg = read(d.join("rep/aggregate.csv"));
    let phi = agg.lines().find(|l| l.starts_with("phi,")).unwrap();
    assert!(phi.contains("nan-undefined"), "{phi}");
    assert!(!agg.lines().find(|l| l.starts_with("grad_phi_x,")).unwrap().contains("nan-undefined"));

    let grad_only = FieldSchema::new([] as [&str; 0], ["grad_phi"]);
    let tg = s.targets.as_ref().unwrap().project(&grad_only).unwrap();
    s.targets = Some(FieldSet::new(2, grad_only, tg.values).unwrap());
    s.mask = None;
    std::fs::create_dir(d.join("partial")).unwrap();
    write_sample(&s, d.join("partial/b.globe")).unwrap();
    let out = globe(d, &["eval", "--ckpt", "m.ckpt", "partial", "--out", "rep2"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("phi") && err.contains("b.globe"), "{err}");

    s.targets = None;
    write_sample(&s, d.join("partial/b.globe")).unwrap();
    let out = globe(d, &["eval", "--ckpt", "m.ckpt", "partial", "--out", "rep2"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no targets"));
}

#[test]
fn verify_passes_on_fresh_and_trained_models() {
    let t = laplace_setup();
    let d = t.path();
    let stdout = ok(d, &["verify", "--ckpt", "m.ckpt"]);
    for suite in ["equivariance", "decay", "discretization", "gradcheck", "units"] {
        assert!(stdout.contains(&format!("{suite} PASS")), "{suite}:\n{stdout}");
    }
    assert!(stdout.trim_end().ends_with("verify PASS"));
    let stdout = ok(d, &["verify", "equivariance", "--config", "small.cfg", "--preset", "airfrans", "--seed", "3"]);
    assert!(stdout.contains("equivariance PASS") && !stdout.contains("units"));
    let out = globe(d, &["verify", "sorcery"]);
    assert_eq!(out.status.code(), Some(2));
}
