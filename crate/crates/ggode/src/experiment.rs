//! Small multi-environment experiments: a toy Lennard-Jones dataset, a full
//! train and evaluate cycle, and embedding export.

use ggode_core::datagen::{
    default_lj_box, fit_zscore, generate_dataset, lj_catalog, Boundary, EnvironmentSpec, NormStats, SimSettings,
    TrajectoryRecord,
};
use ggode_core::model::{embedding_of, Model, ModelConfig, PreparedTrajectory};
use ggode_core::training::{evaluate_rollout_mse, train, EnvSplit, EpochLog, ModelPredictor, SplitConfig, TrainConfig};

use crate::error::Result;
use crate::run::SplitManifest;

/// A 2-D Lennard-Jones family in a reflective box whose environments differ
/// in temperature and linear drag.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub envs: usize,
    pub trajs_per_env: usize,
    pub particles: usize,
    pub steps: usize,
    pub dt: f64,
    pub record_every: usize,
    pub temperature: (f64, f64),
    pub damping: (f64, f64),
}

impl Default for ToyDataset {
    fn default() -> Self {
        ToyDataset {
            envs: 8,
            trajs_per_env: 10,
            particles: 5,
            steps: 30,
            dt: 0.005,
            record_every: 10,
            temperature: (0.5, 1.5),
            damping: (0.0, 2.0),
        }
    }
}

impl ToyDataset {
    pub fn catalog(&self) -> Vec<EnvironmentSpec> {
        lj_catalog(
            self.envs,
            self.temperature,
            self.damping,
            &default_lj_box(self.particles, 2),
            Boundary::Reflective,
        )
    }

    pub fn settings(&self) -> SimSettings {
        SimSettings {
            n_particles: self.particles,
            steps: self.steps,
            dt: self.dt,
            record_every: self.record_every,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<TrajectoryRecord>> {
        Ok(generate_dataset(&self.catalog(), self.trajs_per_env, &self.settings(), seed)?)
    }
}

/// Model defaults sized for the toy dataset.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        pos_dim: 2,
        d: 32,
        gnn_layers: 2,
        trans_hidden: 64,
        ode_hidden: 32,
        disc_hidden: 64,
        disc_out: 32,
        radius: 2.5,
        substeps: 1,
        ..ModelConfig::default()
    }
}

/// Optimizer settings for the toy experiments.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        lr: 0.001,
        contra_negatives: 4,
        ..TrainConfig::default()
    }
}

pub fn toy_split_config() -> SplitConfig {
    SplitConfig {
        obs_len: 10,
        pred_len: 20,
        interval: 10,
        ..SplitConfig::default()
    }
}

/// Rollout MSE at 30/60/100% for both test settings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub transductive: [f64; 3],
    pub inductive: [f64; 3],
}

pub const PERCENTAGES: [u32; 3] = [30, 60, 100];

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub model: Model,
    pub split: EnvSplit,
    pub history: Vec<EpochLog>,
    pub metrics: Metrics,
}

/// Prepared trajectories and the normalization fitted on `fit_on`.
pub fn prepare(records: &[TrajectoryRecord], fit_on: &[usize]) -> Result<(Vec<PreparedTrajectory>, NormStats)> {
    let subset: Vec<TrajectoryRecord> = fit_on.iter().map(|&k| records[k].clone()).collect();
    let stats = fit_zscore(&subset)?;
    let trajs = records
        .iter()
        .map(|r| PreparedTrajectory::new(r, &stats))
        .collect::<ggode_core::Result<Vec<_>>>()?;
    Ok((trajs, stats))
}

pub fn evaluate(model: &Model, trajs: &[PreparedTrajectory], idx: &[usize], obs_len: usize) -> Result<[f64; 3]> {
    let refs: Vec<&PreparedTrajectory> = idx.iter().map(|&k| &trajs[k]).collect();
    let m = evaluate_rollout_mse(&mut ModelPredictor(model), &refs, obs_len, &PERCENTAGES)?;
    Ok([m[0].1, m[1].1, m[2].1])
}

/// Split by environment, train, and evaluate on both test partitions.
pub fn run(
    records: &[TrajectoryRecord],
    model_cfg: &ModelConfig,
    split_cfg: &SplitConfig,
    train_cfg: &TrainConfig,
) -> Result<ExperimentResult> {
    let split = SplitManifest::build(records, *split_cfg, train_cfg.seed, String::new())?.trajectories;
    let (trajs, stats) = prepare(records, &split.train)?;
    let model = Model::new(model_cfg.clone(), stats, train_cfg.seed)?;
    let out = train(model, &trajs, &split.train, &split.val, split_cfg, train_cfg, &mut |_| {})?;
    let metrics = Metrics {
        transductive: evaluate(&out.model, &trajs, &split.test_trans, split_cfg.obs_len)?,
        inductive: evaluate(&out.model, &trajs, &split.test_induct, split_cfg.obs_len)?,
    };
    Ok(ExperimentResult {
        model: out.model,
        split,
        history: out.history,
        metrics,
    })
}

/// Environment embedding of every chunk of every listed trajectory.
pub fn embeddings(
    model: &Model,
    trajs: &[PreparedTrajectory],
    idx: &[usize],
    split_cfg: &SplitConfig,
) -> Result<Vec<(u32, usize, Vec<f64>)>> {
    let mut out = Vec::new();
    for &k in idx {
        let t = &trajs[k];
        for s in ggode_core::training::chunk_split(t.steps, k, t.env_id, split_cfg) {
            let u = embedding_of(model, t, s.offset, s.obs_len)?;
            out.push((t.env_id, out.len(), u.into_data()));
        }
    }
    Ok(out)
}
