//! Training objectives: the ELBO, the contrastive time-invariance loss and
//! the Jensen-Shannon mutual-information bound, plus their pair samplers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Bound, Linear, Mlp2, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    /// Contrastive weight.
    pub lambda1: f64,
    /// Mutual-information weight.
    pub lambda2: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.5,
            lambda2: 0.5,
            tau: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// `Psi(z | u) = head(tanh(mlp(z | u)))`, a scalar score per row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discriminator {
    pub body: Mlp2,
    pub head: Linear,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, d: usize, hidden: usize, out: usize, rng: &mut Rng) -> Self {
        Discriminator {
            body: Mlp2::new(store, "disc.body", 2 * d, hidden, out, rng),
            head: Linear::new(store, "disc.head", out, 1, rng),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.body.l1.w,
            self.body.l1.b,
            self.body.l2.w,
            self.body.l2.b,
            self.head.w,
            self.head.b,
        ]
    }

    /// Scores of `z [n, d]` each paired with `u [1, d]`; returns `[n, 1]`.
    pub fn score(&self, tape: &mut Tape, p: &Bound, z: Var, u: Var) -> Result<Var> {
        let (n, _) = tape.shape(z);
        let ub = tape.broadcast_rows(u, n)?;
        let x = tape.concat_cols(z, ub)?;
        let h = self.body.forward(tape, p, x)?;
        let h = tape.tanh(h);
        self.head.forward(tape, p, h)
    }
}

/// The ELBO and its two parts.
#[derive(Debug, Clone, Copy)]
pub struct Elbo {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

/// `1/2 sum (mu^2 + sigma^2 - 1 - ln sigma^2)`.
pub fn kl_standard_normal(tape: &mut Tape, mu: Var, sigma: Var) -> Result<Var> {
    if tape.value(sigma).data().iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("posterior scale must be positive"));
    }
    let mu2 = tape.square(mu)?;
    let s2 = tape.square(sigma)?;
    let ln_s2 = tape.ln(s2);
    let a = tape.add(mu2, s2)?;
    let b = tape.sub(a, ln_s2)?;
    let b = tape.add_scalar(b, -1.0);
    let total = tape.sum(b);
    Ok(tape.scale(total, 0.5))
}

/// Unit-variance Gaussian reconstruction (`1/2` squared error, summed over
/// agents, times and dimensions) plus the KL to the standard normal prior.
pub fn elbo_loss(tape: &mut Tape, preds: &[Var], targets: &[Tensor], mu: Var, sigma: Var) -> Result<Elbo> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "elbo_loss",
            expected: alloc::vec![targets.len()],
            found: alloc::vec![preds.len()],
        });
    }
    let mut recon = tape.constant(Tensor::scalar(0.0))?;
    for (&y, t) in preds.iter().zip(targets) {
        let tv = tape.constant(t.clone())?;
        let diff = tape.sub(y, tv)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq);
        recon = tape.add(recon, s)?;
    }
    let recon = tape.scale(recon, 0.5);
    let kl = kl_standard_normal(tape, mu, sigma)?;
    let total = tape.add(recon, kl)?;
    Ok(Elbo { recon, kl, total })
}

fn cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let na = math::sqrt(tape.value(a).data().iter().map(|v| v * v).sum());
    let nb = math::sqrt(tape.value(b).data().iter().map(|v| v * v).sum());
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot = tape.row_dot(a, b)?;
    let a2 = tape.row_dot(a, a)?;
    let b2 = tape.row_dot(b, b)?;
    let norms = tape.mul(a2, b2)?;
    let norms = tape.sqrt(norms);
    tape.div(dot, norms)
}

/// `-ln[exp(cos(a, p)/tau) / sum_neg exp(cos(a, n)/tau)]` with the positive
/// left out of the denominator. Vectors are `[1, d]`.
pub fn contrastive_loss(tape: &mut Tape, anchor: Var, pos: Var, negs: &[Var], tau: f64) -> Result<Var> {
    if negs.is_empty() {
        return Err(Error::Empty("contrastive negatives"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let cp = cosine(tape, anchor, pos)?;
    let mut logits = cosine(tape, anchor, negs[0])?;
    for &n in &negs[1..] {
        let c = cosine(tape, anchor, n)?;
        logits = tape.concat_cols(logits, c)?;
    }
    let logits = tape.scale(logits, 1.0 / tau);
    // log-sum-exp with a constant shift
    let m = tape.value(logits).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -m);
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let lse = tape.ln(s);
    let lse = tape.add_scalar(lse, m);
    let pos_term = tape.scale(cp, 1.0 / tau);
    tape.sub(lse, pos_term)
}

/// `mean(-sp(-s_pos)) - mean(sp(s_neg))` for score columns.
pub fn mi_from_scores(tape: &mut Tape, pos_scores: Var, neg_scores: Var) -> Var {
    let neg_pos = tape.neg(pos_scores);
    let a = tape.softplus(neg_pos);
    let a = tape.mean(a);
    let a = tape.neg(a);
    let b = tape.softplus(neg_scores);
    let b = tape.mean(b);
    let t = tape.neg(b);
    tape.add(a, t).expect("scalars")
}

/// The Jensen-Shannon bound with each row of `z` paired once with its own
/// environment's `u_same` and once with `u_other`.
pub fn mi_loss(tape: &mut Tape, p: &Bound, disc: &Discriminator, z: Var, u_same: Var, u_other: Var) -> Result<Var> {
    let sp = disc.score(tape, p, z, u_same)?;
    let sn = disc.score(tape, p, z, u_other)?;
    Ok(mi_from_scores(tape, sp, sn))
}

/// `elbo + lambda1 * contra + lambda2 * mi`; absent terms contribute nothing.
pub fn total_loss(tape: &mut Tape, elbo: Var, contra: Option<Var>, mi: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut total = elbo;
    if let Some(c) = contra {
        if w.lambda1 != 0.0 {
            let c = tape.scale(c, w.lambda1);
            total = tape.add(total, c)?;
        }
    }
    if let Some(m) = mi {
        if w.lambda2 != 0.0 {
            let m = tape.scale(m, w.lambda2);
            total = tape.add(total, m)?;
        }
    }
    Ok(total)
}

/// A training sample as seen by the samplers: a contiguous segment of one
/// trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub env_id: u32,
    pub traj: usize,
    pub offset: usize,
    pub len: usize,
}

/// `len` consecutive steps of trajectory `traj` starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub env_id: u32,
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveTriple {
    pub anchor: WindowRef,
    pub positive: WindowRef,
    pub negatives: Vec<WindowRef>,
    /// Whether the positive came from the anchor's own sample.
    pub intra: bool,
}

fn window_in(s: &SampleRef, len: usize, rng: &mut Rng) -> Result<WindowRef> {
    if s.len < len {
        return Err(Error::data(format!(
            "sample of length {} cannot hold a window of {len}",
            s.len
        )));
    }
    Ok(WindowRef {
        env_id: s.env_id,
        traj: s.traj,
        start: s.offset + rng.below(s.len - len + 1),
        len,
    })
}

/// Sample indices grouped by environment.
#[derive(Debug, Clone)]
pub struct EnvIndex {
    by_env: BTreeMap<u32, Vec<usize>>,
}

impl EnvIndex {
    pub fn new(samples: &[SampleRef]) -> Self {
        let mut by_env: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (k, s) in samples.iter().enumerate() {
            by_env.entry(s.env_id).or_default().push(k);
        }
        EnvIndex { by_env }
    }

    pub fn env_count(&self) -> usize {
        self.by_env.len()
    }

    pub fn samples_of(&self, env: u32) -> &[usize] {
        self.by_env.get(&env).map(Vec::as_slice).unwrap_or(&[])
    }

    /// A uniformly chosen environment other than `env`.
    pub fn other_env(&self, env: u32, rng: &mut Rng) -> Option<u32> {
        let others: Vec<u32> = self.by_env.keys().copied().filter(|&e| e != env).collect();
        if others.is_empty() {
            None
        } else {
            Some(others[rng.below(others.len())])
        }
    }
}

/// Anchor and positive windows of length `obs_len` from the same environment
/// (own sample or, half the time, another sample of that environment) and
/// `k_neg` negatives from uniformly chosen other environments.
pub fn sample_contrastive_pairs(
    samples: &[SampleRef],
    index: &EnvIndex,
    anchor_sample: usize,
    obs_len: usize,
    k_neg: usize,
    rng: &mut Rng,
) -> Result<ContrastiveTriple> {
    let s = samples
        .get(anchor_sample)
        .ok_or_else(|| Error::invalid("anchor sample out of range"))?;
    if index.env_count() < 2 {
        return Err(Error::data("contrastive pairs need at least two environments"));
    }
    let anchor = window_in(s, obs_len, rng)?;
    let siblings: Vec<usize> = index
        .samples_of(s.env_id)
        .iter()
        .copied()
        .filter(|&k| k != anchor_sample)
        .collect();
    let want_cross = rng.uniform() < 0.5;
    let (positive, intra) = if want_cross && !siblings.is_empty() {
        let other = &samples[siblings[rng.below(siblings.len())]];
        (window_in(other, obs_len, rng)?, false)
    } else {
        (window_in(s, obs_len, rng)?, true)
    };
    let mut negatives = Vec::with_capacity(k_neg);
    for _ in 0..k_neg {
        let env = index.other_env(s.env_id, rng).expect("two environments checked");
        let pool = index.samples_of(env);
        let neg = &samples[pool[rng.below(pool.len())]];
        negatives.push(window_in(neg, obs_len, rng)?);
    }
    Ok(ContrastiveTriple {
        anchor,
        positive,
        negatives,
        intra,
    })
}

/// Index into `table_envs` of an embedding from a uniformly chosen other
/// environment, then a uniformly chosen entry of it.
pub fn sample_mi_negative(table_envs: &[u32], env: u32, rng: &mut Rng) -> Result<usize> {
    let mut by_env: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (k, &e) in table_envs.iter().enumerate() {
        if e != env {
            by_env.entry(e).or_default().push(k);
        }
    }
    if by_env.is_empty() {
        return Err(Error::data("mutual-information negatives need another environment"));
    }
    let pick = rng.below(by_env.len());
    let pool = by_env.values().nth(pick).expect("index in range");
    Ok(pool[rng.below(pool.len())])
}

/// Positive and negative `(z, u)` pairings of one sample: every agent row of
/// `z` is paired with the sample's own embedding and with `u_other`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiPairs {
    pub positives: Vec<(usize, u32)>,
    pub negatives: Vec<(usize, u32)>,
}

pub fn sample_mi_pairs(n_agents: usize, env: u32, table_envs: &[u32], rng: &mut Rng) -> Result<(MiPairs, usize)> {
    let k = sample_mi_negative(table_envs, env, rng)?;
    let other = table_envs[k];
    Ok((
        MiPairs {
            positives: (0..n_agents).map(|i| (i, env)).collect(),
            negatives: (0..n_agents).map(|i| (i, other)).collect(),
        },
        k,
    ))
}
