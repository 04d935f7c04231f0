//! The full model: encoders, latent ODE, decoder and discriminator sharing
//! one parameter store, plus the per-sample forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::{apply_zscore, NormStats, TrajectoryRecord};
use crate::encoders::{encode_environment, encode_initial_state, EncoderParams, GraphContext, Posterior};
use crate::error::{Error, Result};
use crate::graph::{build_temporal_graph, Window};
use crate::losses::Discriminator;
use crate::nn::{Bound, ParamId, ParamStore};
use crate::ode::{rollout, rollout_blocks, OdeFuncParams, PositionScale, RolloutVars};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ModelConfig {
    /// Spatial dimension of the observed positions.
    pub pos_dim: usize,
    /// Latent and embedding width (even).
    pub d: usize,
    pub gnn_layers: usize,
    pub trans_hidden: usize,
    pub ode_hidden: usize,
    pub disc_hidden: usize,
    pub disc_out: usize,
    /// Connectivity radius in raw position units.
    pub radius: f64,
    /// RK4 steps per observation interval.
    pub substeps: usize,
    /// Use the initial-state encoder's parameters for the environment branch.
    pub share_encoders: bool,
    /// Replace the environment embedding by zeros.
    pub zero_env: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pos_dim: 3,
            d: 64,
            gnn_layers: 2,
            trans_hidden: 128,
            ode_hidden: 64,
            disc_hidden: 128,
            disc_out: 64,
            radius: 2.5,
            substeps: 5,
            share_encoders: false,
            zero_env: false,
        }
    }
}

impl ModelConfig {
    /// Node features are normalized position, velocity and acceleration.
    pub fn feat_dim(&self) -> usize {
        3 * self.pos_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::invalid(format!("d must be even and >= 2, got {}", self.d)));
        }
        if self.pos_dim == 0 || self.substeps == 0 {
            return Err(Error::invalid("pos_dim and substeps must be positive"));
        }
        if !self.radius.is_finite() {
            return Err(Error::invalid("radius must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub enc: EncoderParams,
    pub ode: OdeFuncParams,
    pub disc: Discriminator,
    pub stats: NormStats,
    pub scale: PositionScale,
}

impl Model {
    /// Fresh parameters drawn from `seed`; `stats` normalize the inputs.
    pub fn new(config: ModelConfig, stats: NormStats, seed: u64) -> Result<Self> {
        config.validate()?;
        if stats.dim() != config.pos_dim {
            return Err(Error::invalid(format!(
                "stats have dimension {}, model expects {}",
                stats.dim(),
                config.pos_dim
            )));
        }
        let mut rng = Rng::new(seed).derive(&[0x1417]);
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(
            &mut store,
            config.feat_dim(),
            config.d,
            config.gnn_layers,
            config.trans_hidden,
            config.share_encoders,
            &mut rng,
        )?;
        let ode = OdeFuncParams::new(&mut store, config.d, config.ode_hidden, config.pos_dim, config.radius, &mut rng);
        let disc = Discriminator::new(&mut store, config.d, config.disc_hidden, config.disc_out, &mut rng);
        let scale = PositionScale {
            mean: stats.pos_mean.clone(),
            std: stats.pos_std.clone(),
        };
        Ok(Model {
            config,
            store,
            enc,
            ode,
            disc,
            stats,
            scale,
        })
    }

    pub fn disc_ids(&self) -> Vec<ParamId> {
        self.disc.param_ids().to_vec()
    }

    pub fn is_disc(&self, id: ParamId) -> bool {
        self.disc.param_ids().contains(&id)
    }
}

/// A trajectory ready for the model: raw positions for connectivity and
/// normalized node features `[pos | vel | acc]` per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrajectory {
    pub env_id: u32,
    pub n_agents: usize,
    pub dim: usize,
    pub steps: usize,
    pub raw_positions: Vec<f64>,
    pub norm_positions: Vec<f64>,
    pub features: Vec<f64>,
}

impl PreparedTrajectory {
    pub fn new(record: &TrajectoryRecord, stats: &NormStats) -> Result<Self> {
        record.validate()?;
        let z = apply_zscore(record, stats)?;
        let (n, dim, steps) = (record.n_agents, record.dim, record.len());
        let mut features = Vec::with_capacity(steps * n * 3 * dim);
        for k in 0..steps * n {
            let r = k * dim..(k + 1) * dim;
            features.extend_from_slice(&z.positions[r.clone()]);
            features.extend_from_slice(&z.velocities[r.clone()]);
            features.extend_from_slice(&z.accelerations[r]);
        }
        Ok(PreparedTrajectory {
            env_id: record.env_id,
            n_agents: n,
            dim,
            steps,
            raw_positions: record.positions.clone(),
            norm_positions: z.positions,
            features,
        })
    }

    pub fn window(&self, start: usize, len: usize) -> Result<Window> {
        if start + len > self.steps {
            return Err(Error::data(format!(
                "window [{start}, {}) exceeds trajectory of {} steps",
                start + len,
                self.steps
            )));
        }
        let wp = self.n_agents * self.dim;
        let wf = 3 * wp;
        Ok(Window {
            n_agents: self.n_agents,
            steps: len,
            pos_dim: self.dim,
            feat_dim: 3 * self.dim,
            positions: self.raw_positions[start * wp..(start + len) * wp].to_vec(),
            features: self.features[start * wf..(start + len) * wf].to_vec(),
        })
    }

    /// Normalized positions of step `t` as an `[n, D]` tensor.
    pub fn target(&self, t: usize) -> Tensor {
        let w = self.n_agents * self.dim;
        Tensor::new(
            alloc::vec![self.n_agents, self.dim],
            self.norm_positions[t * w..(t + 1) * w].to_vec(),
        )
        .expect("sizes agree")
    }
}

/// Graph context and feature matrix of a window, reusable across tapes.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    pub ctx: GraphContext,
    pub features: Tensor,
}

impl EncodedInput {
    pub fn new(model: &Model, traj: &PreparedTrajectory, start: usize, len: usize) -> Result<Self> {
        let w = traj.window(start, len)?;
        let g = build_temporal_graph(&w, model.config.radius, traj.env_id)?;
        let ctx = GraphContext::new(&g, model.config.d)?;
        let features = Tensor::new(alloc::vec![len * traj.n_agents, w.feat_dim], w.features)?;
        Ok(EncodedInput { ctx, features })
    }
}

/// Environment embedding of a window, `[1, d]` (zeros under the ablation).
pub fn environment_of(tape: &mut Tape, p: &Bound, model: &Model, input: &EncodedInput) -> Result<Var> {
    if model.config.zero_env {
        return tape.constant(Tensor::zeros(&[1, model.config.d]));
    }
    let x = tape.constant(input.features.clone())?;
    encode_environment(tape, p, &model.enc, &input.ctx, x)
}

/// Encoder outputs and decoded path of one sample.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub posterior: Posterior,
    pub u: Var,
    pub rollout: RolloutVars,
}

/// Observe `obs_len` steps from `offset`, start the ODE at the last observed
/// step and predict the following `pred_len` steps. `eps` is the
/// reparameterization noise (`[n, d]`; zeros give the posterior mean).
/// `rollout.y_path[k]` predicts step `offset + obs_len - 1 + k`.
pub fn forward_sample(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    input: &EncodedInput,
    pred_len: usize,
    eps: &Tensor,
) -> Result<SampleOutput> {
    let mut outs = forward_batch(tape, p, model, &[input], pred_len, core::slice::from_ref(eps))?;
    Ok(outs.remove(0))
}

/// [`forward_sample`] for several windows of equal length. Their latent
/// systems are integrated together as one block-diagonal system, which is
/// equivalent to separate rollouts.
pub fn forward_batch(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    inputs: &[&EncodedInput],
    pred_len: usize,
    eps: &[Tensor],
) -> Result<Vec<SampleOutput>> {
    let Some(first) = inputs.first() else {
        return Err(Error::Empty("forward_batch inputs"));
    };
    let obs_len = first.ctx.steps;
    if inputs.iter().any(|i| i.ctx.steps != obs_len) || eps.len() != inputs.len() {
        return Err(Error::invalid("forward_batch needs equal window lengths and one noise tensor per window"));
    }
    let mut encoded = Vec::with_capacity(inputs.len());
    for (input, e) in inputs.iter().zip(eps) {
        let x = tape.constant(input.features.clone())?;
        let posterior = encode_initial_state(tape, p, &model.enc, &input.ctx, x, e)?;
        let u = environment_of(tape, p, model, input)?;
        encoded.push((posterior, u));
    }
    let times: Vec<f64> = (0..=pred_len).map(|k| (obs_len - 1 + k) as f64).collect();
    let substeps = model.config.substeps;
    if encoded.len() == 1 {
        let (posterior, u) = encoded.remove(0);
        let rollout = rollout(tape, p, &model.ode, posterior.z, u, &times, substeps, &model.scale)?;
        return Ok(vec![SampleOutput { posterior, u, rollout }]);
    }
    let sizes: Vec<usize> = inputs.iter().map(|i| i.ctx.n_agents).collect();
    let zs: Vec<Var> = encoded.iter().map(|(post, _)| post.z).collect();
    let z0 = tape.stack_rows(&zs)?;
    let mut u_rows = Vec::with_capacity(encoded.len());
    for ((_, u), &n) in encoded.iter().zip(&sizes) {
        u_rows.push(tape.broadcast_rows(*u, n)?);
    }
    let u_rows = tape.stack_rows(&u_rows)?;
    let joint = rollout_blocks(tape, p, &model.ode, z0, u_rows, &times, substeps, &model.scale, sizes.clone())?;
    let mut outs = Vec::with_capacity(encoded.len());
    let mut offset = 0;
    for ((posterior, u), n) in encoded.into_iter().zip(sizes) {
        let part = |path: &[Var], tape: &mut Tape| -> Result<Vec<Var>> {
            path.iter().map(|&v| tape.slice_rows(v, offset, offset + n)).collect()
        };
        let rollout = RolloutVars {
            z_path: part(&joint.z_path, tape)?,
            y_path: part(&joint.y_path, tape)?,
        };
        outs.push(SampleOutput { posterior, u, rollout });
        offset += n;
    }
    Ok(outs)
}

/// Predicted normalized positions for steps `obs_len..steps` of a trajectory,
/// starting from the posterior mean.
pub fn predict_trajectory(model: &Model, traj: &PreparedTrajectory, obs_len: usize) -> Result<Vec<Tensor>> {
    if obs_len < 2 || obs_len >= traj.steps {
        return Err(Error::data(format!(
            "need 2 <= obs_len < {} steps, got {obs_len}",
            traj.steps
        )));
    }
    let input = EncodedInput::new(model, traj, 0, obs_len)?;
    let mut tape = Tape::new();
    let p = model.store.bind_with(&mut tape, |_| false);
    let eps = Tensor::zeros(&[traj.n_agents, model.config.d]);
    let out = forward_sample(&mut tape, &p, model, &input, traj.steps - obs_len, &eps)?;
    let ys: Vec<Tensor> = out.rollout.y_path[1..].iter().map(|&y| tape.value(y).clone()).collect();
    for y in &ys {
        y.check_finite("prediction")?;
    }
    Ok(ys)
}

/// The environment embedding of a window, as plain values.
pub fn embedding_of(model: &Model, traj: &PreparedTrajectory, start: usize, len: usize) -> Result<Tensor> {
    let input = EncodedInput::new(model, traj, start, len)?;
    let mut tape = Tape::new();
    let p = model.store.bind_with(&mut tape, |_| false);
    let u = environment_of(&mut tape, &p, model, &input)?;
    Ok(tape.value(u).clone())
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    /// Three agents in uniform straight-line motion, alternating env ids.
    pub(crate) fn toy_records(n_traj: usize, steps: usize, seed: u64) -> Vec<TrajectoryRecord> {
        let mut rng = Rng::new(seed);
        (0..n_traj)
            .map(|k| {
                let n = 3;
                let start = rng.uniform_tensor(&[n * 2], 2.0).into_data();
                let vel = rng.normal_vec(n * 2, 0.1);
                let pos: Vec<f64> = (0..steps)
                    .flat_map(|t| start.iter().zip(&vel).map(move |(p, v)| p + v * t as f64).collect::<Vec<_>>())
                    .collect();
                TrajectoryRecord::from_positions((k % 2) as u32, 0.1, n, 2, pos).unwrap()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::toy_records;
    use super::*;
    use crate::datagen::fit_zscore;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            pos_dim: 2,
            d: 4,
            gnn_layers: 1,
            trans_hidden: 6,
            ode_hidden: 6,
            disc_hidden: 6,
            disc_out: 4,
            radius: 1.5,
            substeps: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_shapes_and_prediction_length() {
        let recs = toy_records(2, 12, 1);
        let stats = fit_zscore(&recs).unwrap();
        let model = Model::new(tiny_config(), stats.clone(), 3).unwrap();
        let traj = PreparedTrajectory::new(&recs[0], &stats).unwrap();
        assert_eq!(traj.features.len(), 12 * 3 * 6);
        let ys = predict_trajectory(&model, &traj, 5).unwrap();
        assert_eq!(ys.len(), 7);
        assert!(ys.iter().all(|y| y.shape() == [3, 2]));
        let u = embedding_of(&model, &traj, 0, 5).unwrap();
        assert_eq!(u.shape(), [1, 4]);
    }

    #[test]
    fn zero_env_gives_zero_embedding() {
        let recs = toy_records(1, 8, 2);
        let stats = fit_zscore(&recs).unwrap();
        let cfg = ModelConfig { zero_env: true, ..tiny_config() };
        let model = Model::new(cfg, stats.clone(), 3).unwrap();
        let traj = PreparedTrajectory::new(&recs[0], &stats).unwrap();
        assert!(embedding_of(&model, &traj, 0, 4).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let recs = toy_records(1, 8, 2);
        let stats = fit_zscore(&recs).unwrap();
        let a = Model::new(tiny_config(), stats.clone(), 9).unwrap();
        let b = Model::new(tiny_config(), stats.clone(), 9).unwrap();
        let c = Model::new(tiny_config(), stats, 10).unwrap();
        assert_eq!(a.store.flatten(), b.store.flatten());
        assert_ne!(a.store.flatten(), c.store.flatten());
    }

    #[test]
    fn window_bounds_checked() {
        let recs = toy_records(1, 8, 2);
        let stats = fit_zscore(&recs).unwrap();
        let traj = PreparedTrajectory::new(&recs[0], &stats).unwrap();
        assert!(traj.window(5, 4).is_err());
        assert!(traj.window(4, 4).is_ok());
    }
}
