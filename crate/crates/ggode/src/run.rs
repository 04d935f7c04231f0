//! Split manifests and run directories: the resolved configuration, the
//! per-epoch loss log, the checkpoint and the metrics report.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ggode_core::datagen::TrajectoryRecord;
use ggode_core::model::ModelConfig;
use ggode_core::training::{chunk_split, env_split, EnvSplit, EpochLog, Sample, SplitConfig, TrainConfig};
use ggode_core::Rng;
use serde::{Deserialize, Serialize};

use crate::container::FORMAT_VERSION;
use crate::dataset::{file_hash, read_json, write_json};
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.json";

/// Stream for the environment split, derived from the split seed.
const SPLIT_STREAM: u64 = 0x5917;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test_trans: Vec<Sample>,
    pub test_induct: Vec<Sample>,
}

/// Trajectory and sample lists per partition, bound to one dataset file by
/// its hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub data_hash: String,
    pub seed: u64,
    pub config: SplitConfig,
    pub trajectories: EnvSplit,
    pub samples: PartitionSamples,
}

impl SplitManifest {
    pub fn build(records: &[TrajectoryRecord], config: SplitConfig, seed: u64, data_hash: String) -> Result<Self> {
        let envs: Vec<u32> = records.iter().map(|r| r.env_id).collect();
        let split = env_split(&envs, &config, &mut Rng::new(seed).derive(&[SPLIT_STREAM]))?;
        let chunks = |idx: &[usize]| -> Vec<Sample> {
            idx.iter()
                .flat_map(|&k| chunk_split(records[k].len(), k, records[k].env_id, &config))
                .collect()
        };
        let samples = PartitionSamples {
            train: chunks(&split.train),
            val: chunks(&split.val),
            test_trans: chunks(&split.test_trans),
            test_induct: chunks(&split.test_induct),
        };
        if samples.train.is_empty() {
            return Err(Error::data(format!(
                "no training samples: trajectories are shorter than obs_len + pred_len = {}",
                config.sample_len()
            )));
        }
        Ok(SplitManifest {
            version: FORMAT_VERSION,
            data_hash,
            seed,
            config,
            trajectories: split,
            samples,
        })
    }

    /// Fails unless `data` hashes to the recorded value.
    pub fn check_data(&self, data: &Path) -> Result<()> {
        let hash = file_hash(data)?;
        if hash != self.data_hash {
            return Err(Error::data(format!(
                "{} does not match the split manifest (hash {}, manifest {})",
                data.display(),
                &hash[..12],
                &self.data_hash[..self.data_hash.len().min(12)]
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: SplitManifest = read_json(path)?;
        if m.version != FORMAT_VERSION {
            return Err(Error::format(format!("split manifest version {} is not supported", m.version)));
        }
        Ok(m)
    }
}

/// Model and training blocks of a run, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The resolved configuration a run directory was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub data: PathBuf,
    pub splits: PathBuf,
    pub data_hash: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(RunDir(path.to_path_buf()))
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::data(format!("run directory {} does not exist", path.display())));
        }
        Ok(RunDir(path.to_path_buf()))
    }

    pub fn config(&self) -> PathBuf {
        self.0.join(CONFIG_FILE)
    }

    pub fn loss_log(&self) -> PathBuf {
        self.0.join(LOSS_LOG_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.0.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.0.join(METRICS_FILE)
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        let path = self.config();
        if !path.is_file() {
            return Err(Error::data(format!("{} is missing", path.display())));
        }
        read_json(&path)
    }
}

/// One JSON object per line, flushed as each epoch completes.
pub struct LossLog {
    file: File,
    path: PathBuf,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(LossLog {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, log: &EpochLog) -> Result<()> {
        let mut line = serde_json::to_string(log)?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<EpochLog>> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        BufReader::new(file)
            .lines()
            .map(|line| {
                let line = line.map_err(|e| Error::io(path, e))?;
                Ok(serde_json::from_str(&line)?)
            })
            .collect()
    }
}

/// Rollout MSE keyed by percentage, per test setting; absent settings were
/// not evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub obs_len: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transductive: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub inductive: Option<BTreeMap<String, f64>>,
}

pub fn percent_map(values: &[(u32, f64)]) -> BTreeMap<String, f64> {
    values.iter().map(|(p, v)| (p.to_string(), *v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(envs: u32, per_env: usize, steps: usize) -> Vec<TrajectoryRecord> {
        let mut rng = Rng::new(3);
        (0..envs)
            .flat_map(|e| (0..per_env).map(move |_| e))
            .map(|e| TrajectoryRecord::from_positions(e, 0.1, 2, 2, rng.normal_vec(steps * 4, 1.0)).unwrap())
            .collect()
    }

    #[test]
    fn manifest_partitions_cover_every_trajectory() {
        let recs = records(5, 4, 12);
        let cfg = SplitConfig {
            obs_len: 4,
            pred_len: 4,
            interval: 2,
            ..SplitConfig::default()
        };
        let m = SplitManifest::build(&recs, cfg, 7, "h".into()).unwrap();
        let t = &m.trajectories;
        let mut all: Vec<usize> = [&t.train, &t.val, &t.test_trans, &t.test_induct]
            .iter()
            .flat_map(|v| v.iter().copied())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        // (12 - 8) / 2 + 1 = 3 chunks per trajectory
        assert_eq!(m.samples.train.len(), 3 * t.train.len());
        assert!(m.samples.test_induct.iter().all(|s| t.inductive_envs.contains(&s.env_id)));
    }

    #[test]
    fn infeasible_lengths_are_rejected() {
        let recs = records(5, 2, 6);
        let cfg = SplitConfig {
            obs_len: 4,
            pred_len: 4,
            ..SplitConfig::default()
        };
        assert!(matches!(SplitManifest::build(&recs, cfg, 0, "h".into()), Err(Error::Data(_))));
    }

    #[test]
    fn loss_log_lines_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.jsonl");
        let mut log = LossLog::create(&path).unwrap();
        let a = EpochLog { epoch: 1, total: 2.5, ..EpochLog::default() };
        let b = EpochLog { epoch: 2, val_elbo: Some(0.1), ..EpochLog::default() };
        log.append(&a).unwrap();
        log.append(&b).unwrap();
        assert_eq!(LossLog::read(&path).unwrap(), vec![a, b]);
    }
}
