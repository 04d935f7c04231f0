//! Data splitting, the optimizer, the training loop and rollout evaluation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{
    contrastive_loss, elbo_loss, mi_loss, sample_contrastive_pairs, sample_mi_negative, total_loss, EnvIndex,
    LossWeights, SampleRef,
};
use crate::math;
use crate::model::{
    environment_of, forward_batch, predict_trajectory, EncodedInput, Model, PreparedTrajectory, SampleOutput,
};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SplitConfig {
    pub obs_len: usize,
    pub pred_len: usize,
    pub interval: usize,
    pub inductive_env_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            obs_len: 20,
            pred_len: 50,
            interval: 10,
            inductive_env_fraction: 0.2,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_len < 2 || self.pred_len == 0 || self.interval == 0 {
            return Err(Error::invalid(
                "obs_len must be >= 2 and pred_len, interval >= 1",
            ));
        }
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        let fractions = [
            self.inductive_env_fraction,
            self.train_fraction,
            self.val_fraction,
            self.test_fraction,
        ];
        if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("split fractions must lie in [0, 1] and train/val/test must sum to 1"));
        }
        Ok(())
    }

    pub fn sample_len(&self) -> usize {
        self.obs_len + self.pred_len
    }
}

/// A contiguous observed-then-predicted segment of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub env_id: u32,
    pub traj: usize,
    pub offset: usize,
    pub obs_len: usize,
    pub pred_len: usize,
}

impl Sample {
    pub fn as_ref(&self) -> SampleRef {
        SampleRef {
            env_id: self.env_id,
            traj: self.traj,
            offset: self.offset,
            len: self.obs_len + self.pred_len,
        }
    }
}

/// `(T - O - M) / I + 1` samples at offsets `0, I, 2I, ...`.
pub fn chunk_split(t_len: usize, traj: usize, env_id: u32, cfg: &SplitConfig) -> Vec<Sample> {
    let len = cfg.sample_len();
    if t_len < len || cfg.interval == 0 {
        log::warn!("trajectory {traj} has {t_len} steps, fewer than one sample of {len}");
        return Vec::new();
    }
    let count = (t_len - len) / cfg.interval + 1;
    (0..count)
        .map(|j| Sample {
            env_id,
            traj,
            offset: j * cfg.interval,
            obs_len: cfg.obs_len,
            pred_len: cfg.pred_len,
        })
        .collect()
}

/// Trajectory indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test_trans: Vec<usize>,
    pub test_induct: Vec<usize>,
    pub inductive_envs: Vec<u32>,
}

fn round_count(n: usize, f: f64) -> usize {
    (math::round(n as f64 * f) as usize).min(n)
}

/// Hold out a fraction of environments entirely, then split the remaining
/// trajectories into train, validation and transductive test.
pub fn env_split(traj_envs: &[u32], cfg: &SplitConfig, rng: &mut Rng) -> Result<EnvSplit> {
    cfg.validate()?;
    let envs: Vec<u32> = traj_envs.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if envs.len() < 5 {
        return Err(Error::data(format!(
            "environment split needs at least 5 environments, got {}",
            envs.len()
        )));
    }
    let mut shuffled = envs.clone();
    rng.shuffle(&mut shuffled);
    let n_ind = round_count(envs.len(), cfg.inductive_env_fraction).max(1);
    let mut inductive_envs: Vec<u32> = shuffled[..n_ind].to_vec();
    inductive_envs.sort_unstable();
    let mut test_induct = Vec::new();
    let mut rest = Vec::new();
    for (k, e) in traj_envs.iter().enumerate() {
        if inductive_envs.contains(e) {
            test_induct.push(k);
        } else {
            rest.push(k);
        }
    }
    rng.shuffle(&mut rest);
    let n_train = round_count(rest.len(), cfg.train_fraction);
    let n_val = round_count(rest.len(), cfg.val_fraction).min(rest.len() - n_train);
    let mut train = rest[..n_train].to_vec();
    let mut val = rest[n_train..n_train + n_val].to_vec();
    let mut test_trans = rest[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test_trans.sort_unstable();
    Ok(EnvSplit {
        train,
        val,
        test_trans,
        test_induct,
        inductive_envs,
    })
}

/// Adam moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            expected: vec![params.len()],
            found: vec![grads.len(), state.m.len()],
        });
    }
    state.t += 1;
    let c1 = 1.0 - math::powf(beta1, state.t as f64);
    let c2 = 1.0 - math::powf(beta2, state.t as f64);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
        let mh = state.m[k] / c1;
        let vh = state.v[k] / c2;
        params[k] -= lr * mh / (math::sqrt(vh) + eps);
    }
    Ok(())
}

/// Adam over a parameter store with one state (and step count) per tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            states: store.ids().map(|id| AdamState::new(store.get(id).len())).collect(),
        }
    }

    /// Update every tensor selected by `which` with its gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], which: impl Fn(ParamId) -> bool) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !which(id) {
                continue;
            }
            let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
            adam_step(
                store.get_mut(id).data_mut(),
                grads[id.0].data(),
                &mut self.states[id.0],
                lr,
                b1,
                b2,
                eps,
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub lr: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Recorded for reproducibility; the core loop is always sequential.
    pub deterministic: bool,
    pub disable_contra: bool,
    pub disable_mi: bool,
    /// Negative windows per contrastive anchor.
    pub contra_negatives: usize,
    /// Largest global gradient norm per step; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            batch_size: 8,
            epochs: 100,
            weights: LossWeights::default(),
            seed: 0,
            deterministic: true,
            disable_contra: false,
            disable_mi: false,
            contra_negatives: 8,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::invalid(format!("grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        if !self.disable_contra && self.contra_negatives == 0 {
            return Err(Error::invalid("contrastive loss needs at least one negative"));
        }
        self.weights.validate()
    }
}

/// Per-epoch means over training samples plus the validation ELBO.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub contra: f64,
    pub mi: f64,
    pub total: f64,
    pub val_elbo: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation ELBO (the last
    /// epoch when there is no validation data).
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn check_grads(grads: &[Tensor]) -> Result<()> {
    for g in grads {
        g.check_finite("gradient")?;
    }
    Ok(())
}

/// Rescale `grads` so their joint Euclidean norm is at most `max_norm`
/// (no-op when `max_norm` is 0). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = math::sqrt(grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

struct Prepared {
    samples: Vec<Sample>,
    inputs: Vec<EncodedInput>,
}

fn prepare(model: &Model, trajs: &[PreparedTrajectory], idx: &[usize], split: &SplitConfig) -> Result<Prepared> {
    let mut samples = Vec::new();
    for &k in idx {
        let t = trajs.get(k).ok_or_else(|| Error::data(format!("trajectory {k} out of range")))?;
        samples.extend(chunk_split(t.steps, k, t.env_id, split));
    }
    let inputs = samples
        .iter()
        .map(|s| EncodedInput::new(model, &trajs[s.traj], s.offset, s.obs_len))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { samples, inputs })
}

fn targets(traj: &PreparedTrajectory, s: &Sample) -> Vec<Tensor> {
    (0..s.pred_len).map(|k| traj.target(s.offset + s.obs_len + k)).collect()
}

/// Mean validation ELBO with the posterior mean as the initial state.
pub fn validation_elbo(model: &Model, trajs: &[PreparedTrajectory], samples: &[Sample], inputs: &[EncodedInput]) -> Result<f64> {
    let mut total = 0.0;
    let all: Vec<usize> = (0..samples.len()).collect();
    for chunk in all.chunks(VALIDATION_CHUNK) {
        let mut tape = Tape::new();
        let p = model.store.bind_with(&mut tape, |_| false);
        let eps: Vec<Tensor> = chunk
            .iter()
            .map(|&k| Tensor::zeros(&[trajs[samples[k].traj].n_agents, model.config.d]))
            .collect();
        let outs = forward_samples(&mut tape, &p, model, samples, inputs, chunk, &eps)?;
        for (&k, out) in chunk.iter().zip(&outs) {
            let s = &samples[k];
            let e = elbo_loss(
                &mut tape,
                &out.rollout.y_path[1..],
                &targets(&trajs[s.traj], s),
                out.posterior.mu,
                out.posterior.sigma,
            )?;
            total += tape.scalar_value(e.total);
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Validation windows integrated together per chunk.
const VALIDATION_CHUNK: usize = 16;

/// Forward passes of `which` samples, batching runs of equal window lengths.
fn forward_samples(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    samples: &[Sample],
    inputs: &[EncodedInput],
    which: &[usize],
    eps: &[Tensor],
) -> Result<Vec<SampleOutput>> {
    let mut outs = Vec::with_capacity(which.len());
    let mut start = 0;
    while start < which.len() {
        let key = |k: usize| (samples[which[k]].obs_len, samples[which[k]].pred_len);
        let mut end = start + 1;
        while end < which.len() && key(end) == key(start) {
            end += 1;
        }
        let group: Vec<&EncodedInput> = which[start..end].iter().map(|&si| &inputs[si]).collect();
        let pred_len = samples[which[start]].pred_len;
        outs.extend(forward_batch(tape, p, model, &group, pred_len, &eps[start..end])?);
        start = end;
    }
    Ok(outs)
}

/// Train with the two-phase schedule: each batch first takes one
/// discriminator step that raises the mutual-information bound, then one
/// step of every other parameter on the total loss with the discriminator
/// frozen. `on_epoch` sees each epoch's log as soon as it is complete.
pub fn train(
    mut model: Model,
    trajs: &[PreparedTrajectory],
    train_idx: &[usize],
    val_idx: &[usize],
    split: &SplitConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    split.validate()?;
    let train_set = prepare(&model, trajs, train_idx, split)?;
    let val_set = prepare(&model, trajs, val_idx, split)?;
    if train_set.samples.is_empty() {
        return Err(Error::data("training split produced no samples"));
    }
    let refs: Vec<SampleRef> = train_set.samples.iter().map(Sample::as_ref).collect();
    let index = EnvIndex::new(&refs);
    let zero_env = model.config.zero_env;
    let mut use_contra = !cfg.disable_contra && cfg.weights.lambda1 > 0.0 && !zero_env;
    let mut use_mi = !cfg.disable_mi && cfg.weights.lambda2 > 0.0 && !zero_env;
    if (use_contra || use_mi) && index.env_count() < 2 {
        log::warn!("only one training environment: contrastive and mutual-information terms skipped");
        use_contra = false;
        use_mi = false;
    }
    let base = Rng::new(cfg.seed);
    let disc_ids = model.disc_ids();
    let mut adam = Adam::new(&model.store, cfg.lr);

    // Detached environment embeddings of every training sample, the pool for
    // mutual-information negatives.
    let table_envs: Vec<u32> = train_set.samples.iter().map(|s| s.env_id).collect();
    let mut table: Vec<Tensor> = Vec::new();
    if use_mi {
        for input in &train_set.inputs {
            let mut tape = Tape::new();
            let p = model.store.bind_with(&mut tape, |_| false);
            let u = environment_of(&mut tape, &p, &model, input)?;
            table.push(tape.value(u).clone());
        }
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let n_samples = train_set.samples.len();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut rng = base.derive(&[epoch as u64]);
        rng.shuffle(&mut order);
        let mut log = EpochLog { epoch, ..EpochLog::default() };
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut brng = base.derive(&[epoch as u64, b as u64]);
            let mut tape = Tape::new();
            let mut p = model.store.bind_with(&mut tape, |id| !disc_ids.contains(&id));
            let eps: Vec<Tensor> = batch
                .iter()
                .map(|&si| brng.normal_tensor(&[trajs[train_set.samples[si].traj].n_agents, model.config.d], 1.0))
                .collect();
            let outs = forward_samples(&mut tape, &p, &model, &train_set.samples, &train_set.inputs, batch, &eps)?;
            if use_mi {
                for (&si, out) in batch.iter().zip(&outs) {
                    table[si] = tape.value(out.u).clone();
                }
            }
            let scale = 1.0 / batch.len() as f64;

            // Phase 1: discriminator ascent on the bound, inputs detached.
            let negatives: Vec<usize> = if use_mi {
                batch
                    .iter()
                    .map(|&si| sample_mi_negative(&table_envs, table_envs[si], &mut brng))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            if use_mi {
                let mut dt = Tape::new();
                let dp = model.store.bind_with(&mut dt, |id| disc_ids.contains(&id));
                let mut acc: Option<Var> = None;
                for (out, &k) in outs.iter().zip(&negatives) {
                    let z = dt.constant(tape.value(out.posterior.z).clone())?;
                    let u = dt.constant(tape.value(out.u).clone())?;
                    let uo = dt.constant(table[k].clone())?;
                    let mi = mi_loss(&mut dt, &dp, &model.disc, z, u, uo)?;
                    acc = Some(match acc {
                        Some(a) => dt.add(a, mi)?,
                        None => mi,
                    });
                }
                let mean = dt.scale(acc.expect("non-empty batch"), -scale);
                dt.backward(mean)?;
                let mut grads = dp.grads(&dt, &model.store);
                check_grads(&grads)?;
                clip_global_norm(&mut grads, cfg.grad_clip);
                adam.step(&mut model.store, &grads, |id| disc_ids.contains(&id))?;
                p.rebind_constants(&mut tape, &model.store, &disc_ids);
            }

            // Phase 2: everything else on the total loss.
            let mut acc: Option<Var> = None;
            for (j, (&si, out)) in batch.iter().zip(&outs).enumerate() {
                let s = &train_set.samples[si];
                let traj = &trajs[s.traj];
                let elbo = elbo_loss(
                    &mut tape,
                    &out.rollout.y_path[1..],
                    &targets(traj, s),
                    out.posterior.mu,
                    out.posterior.sigma,
                )?;
                let mi = if use_mi {
                    let uo = tape.constant(table[negatives[j]].clone())?;
                    Some(mi_loss(&mut tape, &p, &model.disc, out.posterior.z, out.u, uo)?)
                } else {
                    None
                };
                let contra = if use_contra {
                    let t = sample_contrastive_pairs(&refs, &index, si, s.obs_len, cfg.contra_negatives, &mut brng)?;
                    let emb = |w: crate::losses::WindowRef, tape: &mut Tape| -> Result<Var> {
                        let input = EncodedInput::new(&model, &trajs[w.traj], w.start, w.len)?;
                        environment_of(tape, &p, &model, &input)
                    };
                    let a = emb(t.anchor, &mut tape)?;
                    let pos = emb(t.positive, &mut tape)?;
                    let negs = t
                        .negatives
                        .iter()
                        .map(|&w| emb(w, &mut tape))
                        .collect::<Result<Vec<_>>>()?;
                    Some(contrastive_loss(&mut tape, a, pos, &negs, cfg.weights.tau)?)
                } else {
                    None
                };
                let total = total_loss(&mut tape, elbo.total, contra, mi, &cfg.weights)?;
                log.elbo += tape.scalar_value(elbo.total);
                log.recon += tape.scalar_value(elbo.recon);
                log.kl += tape.scalar_value(elbo.kl);
                log.contra += contra.map_or(0.0, |c| tape.scalar_value(c));
                log.mi += mi.map_or(0.0, |m| tape.scalar_value(m));
                log.total += tape.scalar_value(total);
                acc = Some(match acc {
                    Some(a) => tape.add(a, total)?,
                    None => total,
                });
            }
            let loss = tape.scale(acc.expect("non-empty batch"), scale);
            if !tape.scalar_value(loss).is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let mut grads = p.grads(&tape, &model.store);
            check_grads(&grads)?;
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut model.store, &grads, |id| !disc_ids.contains(&id))?;
        }
        let n = n_samples as f64;
        for v in [
            &mut log.elbo,
            &mut log.recon,
            &mut log.kl,
            &mut log.contra,
            &mut log.mi,
            &mut log.total,
        ] {
            *v /= n;
        }
        model.store.check_finite()?;
        if !val_set.samples.is_empty() {
            let v = validation_elbo(&model, trajs, &val_set.samples, &val_set.inputs)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
            }
            log.val_elbo = Some(v);
            if best.as_ref().map_or(true, |b| v < b.0) {
                best = Some((v, model.store.clone(), epoch));
            }
        }
        on_epoch(&log);
        history.push(log);
    }
    let best_epoch = match best {
        Some((_, store, epoch)) => {
            model.store = store;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Anything that predicts the unobserved positions of a trajectory.
pub trait Predictor {
    /// Normalized positions for steps `obs_len..steps`, one `[n, D]` tensor each.
    fn predict(&mut self, traj: &PreparedTrajectory, obs_len: usize) -> Result<Vec<Tensor>>;
}

pub struct ModelPredictor<'a>(pub &'a Model);

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, traj: &PreparedTrajectory, obs_len: usize) -> Result<Vec<Tensor>> {
        predict_trajectory(self.0, traj, obs_len)
    }
}

/// Returns the ground truth; a test double for the metric pipeline.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&mut self, traj: &PreparedTrajectory, obs_len: usize) -> Result<Vec<Tensor>> {
        Ok((obs_len..traj.steps).map(|t| traj.target(t)).collect())
    }
}

/// Repeats the last observed positions.
pub struct LastObservedPredictor;

impl Predictor for LastObservedPredictor {
    fn predict(&mut self, traj: &PreparedTrajectory, obs_len: usize) -> Result<Vec<Tensor>> {
        let last = traj.target(obs_len - 1);
        Ok((obs_len..traj.steps).map(|_| last.clone()).collect())
    }
}

/// Number of predicted steps evaluated at `percent` of a horizon.
pub fn rollout_steps(percent: u32, horizon: usize) -> usize {
    (percent as usize * horizon).div_ceil(100).clamp(1, horizon)
}

/// Rollout MSE per percentage: for each trajectory, the mean squared error
/// over the first `ceil(p% * (T - obs_len))` predicted steps, all agents and
/// dimensions; then the mean over trajectories.
pub fn evaluate_rollout_mse(
    predictor: &mut dyn Predictor,
    trajs: &[&PreparedTrajectory],
    obs_len: usize,
    percentages: &[u32],
) -> Result<Vec<(u32, f64)>> {
    if trajs.is_empty() {
        return Err(Error::Empty("evaluation trajectories"));
    }
    let mut sums = vec![0.0; percentages.len()];
    for traj in trajs {
        if traj.steps < obs_len + 1 {
            return Err(Error::data(format!(
                "trajectory of {} steps is too short for obs_len {obs_len}",
                traj.steps
            )));
        }
        let horizon = traj.steps - obs_len;
        let preds = predictor.predict(traj, obs_len)?;
        if preds.len() != horizon {
            return Err(Error::data(format!(
                "predictor returned {} steps, expected {horizon}",
                preds.len()
            )));
        }
        let per_step: Vec<f64> = preds
            .iter()
            .enumerate()
            .map(|(k, y)| {
                let t = traj.target(obs_len + k);
                let se: f64 = y.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                se / t.len() as f64
            })
            .collect();
        for (s, &pct) in sums.iter_mut().zip(percentages) {
            let h = rollout_steps(pct, horizon);
            *s += per_step[..h].iter().sum::<f64>() / h as f64;
        }
    }
    Ok(percentages
        .iter()
        .zip(sums)
        .map(|(&p, s)| (p, s / trajs.len() as f64))
        .collect())
}

/// Mean silhouette coefficient under Euclidean distance. Points in
/// singleton clusters score 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::invalid("silhouette needs one label per point"));
    }
    let clusters: BTreeMap<u32, usize> = labels.iter().fold(BTreeMap::new(), |mut m, &l| {
        *m.entry(l).or_insert(0) += 1;
        m
    });
    if clusters.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    let dist = |a: &[f64], b: &[f64]| math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
    let mut total = 0.0;
    for i in 0..points.len() {
        if clusters[&labels[i]] == 1 {
            continue;
        }
        let mut sums: BTreeMap<u32, f64> = BTreeMap::new();
        for j in 0..points.len() {
            if i != j {
                *sums.entry(labels[j]).or_insert(0.0) += dist(&points[i], &points[j]);
            }
        }
        let a = sums[&labels[i]] / (clusters[&labels[i]] - 1) as f64;
        let b = sums
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(l, s)| s / clusters[l] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{fit_zscore, TrajectoryRecord};
    use crate::model::ModelConfig;

    fn cfg(o: usize, m: usize, i: usize) -> SplitConfig {
        SplitConfig {
            obs_len: o,
            pred_len: m,
            interval: i,
            ..SplitConfig::default()
        }
    }

    #[test]
    fn algorithm_one_counts() {
        let s = chunk_split(100, 0, 0, &cfg(20, 50, 10));
        assert_eq!(s.iter().map(|s| s.offset).collect::<Vec<_>>(), vec![0, 10, 20, 30]);
        assert_eq!(chunk_split(70, 0, 0, &cfg(20, 50, 10)).len(), 1);
        assert!(chunk_split(69, 0, 0, &cfg(20, 50, 10)).is_empty());
        for t in 2..60 {
            for o in 2..6 {
                for m in 1..6 {
                    for i in 1..5 {
                        let n = chunk_split(t, 0, 0, &cfg(o, m, i)).len();
                        let expect = if t >= o + m { (t - o - m) / i + 1 } else { 0 };
                        assert_eq!(n, expect);
                    }
                }
            }
        }
    }

    #[test]
    fn env_split_counts() {
        let envs: Vec<u32> = (0..10).flat_map(|e| core::iter::repeat(e).take(10)).collect();
        let s = env_split(&envs, &SplitConfig::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(s.inductive_envs.len(), 2);
        assert_eq!(s.test_induct.len(), 20);
        assert_eq!((s.train.len(), s.val.len(), s.test_trans.len()), (64, 8, 8));
        let train_envs: BTreeSet<u32> = s.train.iter().map(|&k| envs[k]).collect();
        assert!(s.inductive_envs.iter().all(|e| !train_envs.contains(e)));
        let mut all: Vec<usize> = [&s.train[..], &s.val, &s.test_trans, &s.test_induct].concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, env_split(&envs, &SplitConfig::default(), &mut Rng::new(1)).unwrap());
    }

    #[test]
    fn env_split_needs_five_environments() {
        let envs: Vec<u32> = (0..4).flat_map(|e| core::iter::repeat(e).take(3)).collect();
        assert!(env_split(&envs, &SplitConfig::default(), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn clipping_rescales_to_the_limit() {
        let mut g = vec![Tensor::row(vec![3.0, 0.0]), Tensor::row(vec![0.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 0.0), 5.0);
        assert_eq!(g[1].data(), &[0.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 0.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.005, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[3.0, -0.2, 1e-3], &mut st, 0.005, 0.9, 0.999, 1e-8).unwrap();
        for (x, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.005 * s).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn adam_decreases_a_quadratic() {
        let mut p = vec![3.0];
        let mut st = AdamState::new(1);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let loss = p[0] * p[0];
            assert!(loss < prev);
            prev = loss;
            let g = [2.0 * p[0]];
            adam_step(&mut p, &g, &mut st, 0.005, 0.9, 0.999, 1e-8).unwrap();
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut [0.0, 0.0], &[1.0], &mut st, 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    fn drifting(n_traj: usize, steps: usize) -> (Vec<PreparedTrajectory>, crate::datagen::NormStats) {
        let mut rng = Rng::new(3);
        let recs: Vec<TrajectoryRecord> = (0..n_traj)
            .map(|k| {
                let v = rng.uniform_range(0.5, 1.0);
                let pos: Vec<f64> = (0..steps).flat_map(|t| [v * t as f64, 0.5 * v * t as f64]).collect();
                TrajectoryRecord::from_positions(k as u32, 0.1, 1, 2, pos).unwrap()
            })
            .collect();
        let stats = fit_zscore(&recs).unwrap();
        (recs.iter().map(|r| PreparedTrajectory::new(r, &stats).unwrap()).collect(), stats)
    }

    #[test]
    fn oracle_scores_zero() {
        let (trajs, _) = drifting(3, 20);
        let refs: Vec<&PreparedTrajectory> = trajs.iter().collect();
        let m = evaluate_rollout_mse(&mut OraclePredictor, &refs, 5, &[30, 60, 100]).unwrap();
        assert!(m.iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn constant_baseline_error_grows_with_horizon() {
        let (trajs, _) = drifting(3, 20);
        let refs: Vec<&PreparedTrajectory> = trajs.iter().collect();
        let m = evaluate_rollout_mse(&mut LastObservedPredictor, &refs, 5, &[30, 60, 100]).unwrap();
        assert!(m[0].1 < m[1].1 && m[1].1 < m[2].1);
    }

    #[test]
    fn full_horizon_matches_brute_force() {
        let (trajs, _) = drifting(4, 17);
        let refs: Vec<&PreparedTrajectory> = trajs.iter().collect();
        let m = evaluate_rollout_mse(&mut LastObservedPredictor, &refs, 6, &[100]).unwrap();
        let mut total = 0.0;
        for t in &trajs {
            let w = t.n_agents * t.dim;
            let last = &t.norm_positions[5 * w..6 * w];
            let mut acc = 0.0;
            let mut count = 0;
            for step in 6..17 {
                for k in 0..w {
                    acc += (t.norm_positions[step * w + k] - last[k]).powi(2);
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        assert!((m[0].1 - total / 4.0).abs() < 1e-12);
    }

    #[test]
    fn rollout_step_counts() {
        assert_eq!(rollout_steps(30, 80), 24);
        assert_eq!(rollout_steps(30, 20), 6);
        assert_eq!(rollout_steps(30, 21), 7);
        assert_eq!(rollout_steps(100, 21), 21);
        assert_eq!(rollout_steps(1, 3), 1);
    }

    #[test]
    fn short_trajectory_rejected() {
        let (trajs, _) = drifting(1, 5);
        assert!(evaluate_rollout_mse(&mut OraclePredictor, &[&trajs[0]], 5, &[100]).is_err());
    }

    #[test]
    fn silhouette_cases() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let s = silhouette_score(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.95);
        let s = silhouette_score(&pts, &[0, 1, 0, 1]).unwrap();
        assert!(s < 0.0);
        assert!(silhouette_score(&pts, &[0, 0, 0, 0]).is_err());
    }

    fn micro() -> (Vec<PreparedTrajectory>, Model) {
        let recs = crate::model::tests_support::toy_records(4, 10, 5);
        let stats = fit_zscore(&recs).unwrap();
        let trajs: Vec<_> = recs.iter().map(|r| PreparedTrajectory::new(r, &stats).unwrap()).collect();
        let cfg = ModelConfig {
            pos_dim: 2,
            d: 4,
            gnn_layers: 1,
            trans_hidden: 6,
            ode_hidden: 6,
            disc_hidden: 6,
            disc_out: 4,
            radius: 1.0,
            substeps: 2,
            ..ModelConfig::default()
        };
        (trajs, Model::new(cfg, stats, 1).unwrap())
    }

    fn quick(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            seed,
            contra_negatives: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (trajs, model) = micro();
        let split = cfg(4, 3, 3);
        let run = || train(model.clone(), &trajs, &[0, 1, 2], &[3], &split, &quick(3, 7), &mut |_| {}).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.store.flatten(), b.model.store.flatten());
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|h| h.val_elbo.is_some()));
    }

    #[test]
    fn disabled_regularizers_leave_pure_elbo() {
        let (trajs, model) = micro();
        let split = cfg(4, 3, 3);
        let c = TrainConfig { disable_contra: true, disable_mi: true, ..quick(2, 1) };
        let out = train(model, &trajs, &[0, 1, 2], &[], &split, &c, &mut |_| {}).unwrap();
        for h in &out.history {
            assert_eq!(h.contra, 0.0);
            assert_eq!(h.mi, 0.0);
            assert!((h.total - h.elbo).abs() < 1e-9 * h.elbo.abs());
        }
        assert_eq!(out.best_epoch, 2);
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let (trajs, model) = micro();
        let split = cfg(8, 8, 1);
        assert!(train(model, &trajs, &[0], &[], &split, &quick(1, 0), &mut |_| {}).is_err());
    }

    #[test]
    fn discriminator_moves_only_in_phase_one() {
        // With lambda2 = 0 the discriminator never updates.
        let (trajs, model) = micro();
        let split = cfg(4, 3, 3);
        let before: Vec<Tensor> = model.disc_ids().iter().map(|&id| model.store.get(id).clone()).collect();
        let c = TrainConfig {
            weights: LossWeights { lambda2: 0.0, ..LossWeights::default() },
            ..quick(2, 3)
        };
        let out = train(model, &trajs, &[0, 1, 2], &[], &split, &c, &mut |_| {}).unwrap();
        let after: Vec<Tensor> = out.model.disc_ids().iter().map(|&id| out.model.store.get(id).clone()).collect();
        assert_eq!(before, after);
    }
}
