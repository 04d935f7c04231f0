use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ggode::cli::{run_from, RolloutHeader, ROLLOUT_KIND};
use ggode::container;
use ggode::dataset::{read_catalog, read_dataset};
use ggode::run::{LossLog, MetricsReport, RunConfig, SplitManifest};
use ggode::Error;
use ggode_core::datagen::EnvKind;
use ggode_core::training::chunk_split;

fn cli(args: &[&str]) -> Result<String, Error> {
    let mut out = Vec::new();
    let mut full = vec!["ggode"];
    full.extend_from_slice(args);
    run_from(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_lj(dir: &Path, name: &str, envs: usize, per_env: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    cli(&[
        "gen-data", "--kind", "lj", "--envs", &envs.to_string(), "--trajs-per-env", &per_env.to_string(),
        "--particles", "4", "--steps", "12", "--dt", "0.005", "--record-every", "2", "--seed", &seed.to_string(),
        "--boundary", "reflective", "--damping", "0", "1", "--out", p(&out),
    ])
    .unwrap();
    out
}

const TINY_CONFIG: &str = r#"{
  "model": {"d": 4, "gnn_layers": 1, "trans_hidden": 8, "ode_hidden": 8, "disc_hidden": 8, "disc_out": 4, "substeps": 2},
  "train": {"epochs": 2, "batch_size": 4, "contra_negatives": 2}
}"#;

/// Data, split and a two-epoch run in `dir`.
fn trained_run(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let data = gen_lj(dir, "data.bin", 5, 3, 1);
    let splits = dir.join("splits.json");
    cli(&[
        "split", "--data", p(&data), "--obs-len", "4", "--pred-len", "4", "--interval", "4", "--seed", "3",
        "--out", p(&splits),
    ])
    .unwrap();
    let config = dir.join("train.json");
    fs::write(&config, TINY_CONFIG).unwrap();
    let run = dir.join("run");
    cli(&[
        "train", "--data", p(&data), "--splits", p(&splits), "--config", p(&config), "--out-dir", p(&run),
        "--deterministic",
    ])
    .unwrap();
    (data, splits, run)
}

#[test]
fn gen_data_counts_records_and_catalog_entries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lj.bin");
    let line = cli(&[
        "gen-data", "--kind", "lj", "--envs", "5", "--trajs-per-env", "4", "--particles", "4", "--steps", "5",
        "--dt", "0.005", "--out", p(&out),
    ])
    .unwrap();
    assert!(line.contains("20 records from 5 environments"), "{line}");
    let (records, stats) = read_dataset(&out).unwrap();
    assert_eq!(records.len(), 20);
    assert!(stats.is_none());
    let catalog = read_catalog(&dir.path().join("lj.catalog.json")).unwrap();
    assert_eq!(catalog.len(), 5);
}

#[test]
fn gen_data_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        cli(&[
            "gen-data", "--kind", "lj", "--envs", "3", "--trajs-per-env", "3", "--particles", "5", "--steps", "6",
            "--dt", "0.002", "--seed", "9", "--threads", threads, "--out", p(out),
        ])
        .unwrap();
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn ramp_box_catalog_has_ramps_not_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rb.bin");
    cli(&[
        "gen-data", "--kind", "ramp_box", "--envs", "3", "--trajs-per-env", "1", "--particles", "3", "--steps",
        "5", "--dt", "0.001", "--out", p(&out),
    ])
    .unwrap();
    let catalog = read_catalog(&dir.path().join("rb.catalog.json")).unwrap();
    assert_eq!(catalog.len(), 3);
    for env in &catalog {
        assert_eq!(env.kind, EnvKind::RampBox);
        assert!(env.temperature.is_none());
        assert!(!env.ramp_segments.is_empty());
    }
    let text = fs::read_to_string(dir.path().join("rb.catalog.json")).unwrap();
    assert!(text.contains("ramp_segments"));
}

#[test]
fn split_manifest_matches_chunk_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_lj(dir.path(), "d.bin", 5, 4, 2);
    let splits = dir.path().join("s.json");
    cli(&[
        "split", "--data", p(&data), "--obs-len", "3", "--pred-len", "4", "--interval", "2", "--out", p(&splits),
    ])
    .unwrap();
    let m = SplitManifest::read(&splits).unwrap();
    // (12 - 3 - 4) / 2 + 1 = 3 windows per trajectory
    assert_eq!(m.samples.train.len(), 3 * m.trajectories.train.len());
    assert_eq!(m.samples.test_induct.len(), 3 * m.trajectories.test_induct.len());
    m.check_data(&data).unwrap();
}

#[test]
fn infeasible_split_lengths_fail_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_lj(dir.path(), "d.bin", 5, 2, 2);
    let err = cli(&[
        "split", "--data", p(&data), "--obs-len", "10", "--pred-len", "10", "--interval", "1", "--out",
        p(&dir.path().join("s.json")),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn train_eval_rollout_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, run) = trained_run(dir.path());
    let config: RunConfig = ggode::dataset::read_json(&run.join("config.json")).unwrap();
    assert_eq!(config.train.epochs, 2);
    assert_eq!(config.model.pos_dim, 2);
    assert_eq!(LossLog::read(&run.join("loss_log.jsonl")).unwrap().len(), 2);
    assert!(run.join("checkpoint.bin").is_file());

    let line = cli(&["eval", "--run-dir", p(&run)]).unwrap();
    assert!(line.contains("transductive") && line.contains("inductive"), "{line}");
    let m: MetricsReport = ggode::dataset::read_json(&run.join("metrics.json")).unwrap();
    for map in [m.transductive.unwrap(), m.inductive.unwrap()] {
        assert_eq!(map.keys().collect::<Vec<_>>(), ["100", "30", "60"]);
        assert!(map.values().all(|v| v.is_finite() && *v > 0.0));
    }

    cli(&["eval", "--run-dir", p(&run), "--split", "induct"]).unwrap();
    let m: MetricsReport = ggode::dataset::read_json(&run.join("metrics.json")).unwrap();
    assert!(m.transductive.is_none() && m.inductive.is_some());

    let out = dir.path().join("roll.bin");
    cli(&["rollout", "--run-dir", p(&run), "--traj-id", "0", "--obs-len", "5", "--out", p(&out)]).unwrap();
    let (h, payload): (RolloutHeader, Vec<f64>) = container::read_file(&out, ROLLOUT_KIND).unwrap();
    assert_eq!(h.steps, 12 - 5);
    assert_eq!(h.times.slice(&payload).unwrap().len(), 12 - 5);
    assert_eq!(h.predicted.slice(&payload).unwrap().len(), 7 * 4 * 2);
    assert!(h.predicted.slice(&payload).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn oracle_predictor_gives_zero_mse() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, run) = trained_run(dir.path());
    cli(&["eval", "--run-dir", p(&run), "--predictor", "oracle"]).unwrap();
    let m: MetricsReport = ggode::dataset::read_json(&run.join("metrics.json")).unwrap();
    assert_eq!(m.predictor, "oracle");
    for map in [m.transductive.unwrap(), m.inductive.unwrap()] {
        assert!(map.values().all(|v| *v == 0.0), "{map:?}");
    }
}

#[test]
fn export_embeddings_on_two_environment_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (_, splits, run) = trained_run(dir.path());
    let two = gen_lj(dir.path(), "two.bin", 2, 3, 5);
    let out = dir.path().join("emb.csv");
    cli(&["export-embeddings", "--run-dir", p(&run), "--data", p(&two), "--out", p(&out)]).unwrap();
    let manifest = SplitManifest::read(&splits).unwrap();
    let (records, _) = read_dataset(&two).unwrap();
    let samples: usize = records
        .iter()
        .enumerate()
        .map(|(k, r)| chunk_split(r.len(), k, r.env_id, &manifest.config).len())
        .sum();
    let mut reader = csv::Reader::from_path(&out).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 4 + 2);
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), samples);
    let envs: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(envs.len(), 2);
    for r in &rows {
        assert_eq!(r.len(), 6);
        for v in r.iter().skip(2) {
            let x: f64 = v.parse().unwrap();
            assert_eq!(format!("{x:.16e}"), v);
        }
    }
}

#[test]
fn training_twice_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (data, splits, run) = trained_run(dir.path());
    let again = dir.path().join("again");
    cli(&[
        "train", "--data", p(&data), "--splits", p(&splits), "--config", p(&dir.path().join("train.json")),
        "--out-dir", p(&again), "--deterministic",
    ])
    .unwrap();
    for f in ["loss_log.jsonl", "checkpoint.bin"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn mismatched_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, splits, _) = trained_run(dir.path());
    let other = gen_lj(dir.path(), "other.bin", 5, 3, 99);
    let err = cli(&[
        "train", "--data", p(&other), "--splits", p(&splits), "--out-dir", p(&dir.path().join("r2")),
    ])
    .unwrap_err();
    assert!(err.to_string().contains("does not match"), "{err}");
    assert_eq!(err.exit_code(), 2);
    // the resolved configuration is still written first
    assert!(dir.path().join("r2/config.json").is_file());
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, run) = trained_run(dir.path());
    fs::remove_file(run.join("checkpoint.bin")).unwrap();
    let err = cli(&["eval", "--run-dir", p(&run)]).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ggode"))
}

#[test]
fn exit_codes() {
    let status = binary().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(status.status.code(), Some(1));
    let line = String::from_utf8(status.stderr).unwrap();
    assert!(!line.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let status = binary()
        .args(["eval", "--run-dir", p(&dir.path().join("nope"))])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    let err = String::from_utf8(status.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");

    // an absurd learning rate overflows the parameters
    let (data, splits, _) = trained_run(dir.path());
    let config = dir.path().join("hot.json");
    fs::write(&config, TINY_CONFIG.replace(r#""epochs": 2"#, r#""epochs": 3, "lr": 1e300"#)).unwrap();
    let status = binary()
        .args(["train", "--data", p(&data), "--splits", p(&splits), "--config", p(&config), "--out-dir"])
        .arg(dir.path().join("hot"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn threads_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let status = binary()
        .env("GGODE_THREADS", "0")
        .args([
            "gen-data", "--kind", "lj", "--envs", "1", "--trajs-per-env", "1", "--particles", "2", "--steps", "4",
            "--dt", "0.01", "--out",
        ])
        .arg(dir.path().join("x.bin"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
}
