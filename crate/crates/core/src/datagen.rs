//! Ground-truth trajectory generation, finite-difference features and
//! z-score normalization.
//!
//! Lennard-Jones runs use reduced units (`epsilon = sigma = m = 1`), a
//! truncated-and-shifted potential with cutoff 2.5 and velocity Verlet. The
//! ramp box is a 2-D stand-in for container-with-obstacles fluids: gravity,
//! a purely repulsive short-range pair force and elastic reflection off walls
//! and ramp segments.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

pub const LJ_CUTOFF: f64 = 2.5;
/// Closest allowed pair distance in a freshly initialized configuration.
pub const MIN_INIT_DISTANCE: f64 = 0.5;
const INIT_RETRIES: usize = 100;

fn sq(x: f64) -> f64 {
    x * x
}
/// Floor applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EnvKind {
    LennardJones,
    RampBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Boundary {
    Periodic,
    Reflective,
}

/// A 2-D line segment.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Segment {
    pub fn length(&self) -> f64 {
        math::sqrt(sq(self.b[0] - self.a[0]) + sq(self.b[1] - self.a[1]))
    }

    /// Unit normal (left of `a -> b`).
    fn normal(&self) -> [f64; 2] {
        let l = self.length();
        [-(self.b[1] - self.a[1]) / l, (self.b[0] - self.a[0]) / l]
    }

    fn signed_distance(&self, p: [f64; 2]) -> f64 {
        let n = self.normal();
        (p[0] - self.a[0]) * n[0] + (p[1] - self.a[1]) * n[1]
    }

    /// Position of the projection of `p` along the segment, 0 at `a`, 1 at `b`.
    fn param(&self, p: [f64; 2]) -> f64 {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        ((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / (d[0] * d[0] + d[1] * d[1])
    }
}

/// One environment: the exogenous setting shared by all its trajectories.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnvironmentSpec {
    pub env_id: u32,
    pub kind: EnvKind,
    /// Reduced temperature; variance of each initial velocity component.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub temperature: Option<f64>,
    /// Linear drag coefficient (Lennard-Jones only).
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub damping: Option<f64>,
    /// Downward acceleration (ramp box only).
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub gravity: Option<f64>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Vec::is_empty"))]
    pub ramp_segments: Vec<Segment>,
    /// Box extent per dimension; the box spans `[0, extent)`.
    pub box_extent: Vec<f64>,
    pub boundary: Boundary,
}

impl EnvironmentSpec {
    pub fn lennard_jones(env_id: u32, temperature: f64, box_extent: Vec<f64>, boundary: Boundary) -> Self {
        EnvironmentSpec {
            env_id,
            kind: EnvKind::LennardJones,
            temperature: Some(temperature),
            damping: None,
            gravity: None,
            ramp_segments: Vec::new(),
            box_extent,
            boundary,
        }
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = Some(damping);
        self
    }

    pub fn ramp_box(env_id: u32, ramp_segments: Vec<Segment>, box_extent: [f64; 2]) -> Self {
        EnvironmentSpec {
            env_id,
            kind: EnvKind::RampBox,
            temperature: None,
            damping: None,
            gravity: Some(1.0),
            ramp_segments,
            box_extent: box_extent.to_vec(),
            boundary: Boundary::Reflective,
        }
    }

    pub fn dim(&self) -> usize {
        self.box_extent.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.box_extent.is_empty() || self.box_extent.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid(format!(
                "env {}: box extents must be positive, got {:?}",
                self.env_id, self.box_extent
            )));
        }
        match self.kind {
            EnvKind::LennardJones => {
                match self.temperature {
                    Some(t) if t > 0.0 && t.is_finite() => {}
                    other => {
                        return Err(Error::invalid(format!(
                            "env {}: Lennard-Jones temperature must be > 0, got {other:?}",
                            self.env_id
                        )))
                    }
                }
                if let Some(g) = self.damping {
                    if !(g >= 0.0) || !g.is_finite() {
                        return Err(Error::invalid(format!("env {}: damping must be >= 0", self.env_id)));
                    }
                }
            }
            EnvKind::RampBox => {
                if self.dim() != 2 {
                    return Err(Error::invalid(format!("env {}: ramp box is 2-D only", self.env_id)));
                }
                for (k, s) in self.ramp_segments.iter().enumerate() {
                    if !(s.length() > 0.0) {
                        return Err(Error::invalid(format!(
                            "env {}: ramp segment {k} has zero length",
                            self.env_id
                        )));
                    }
                    for p in [s.a, s.b] {
                        if p[0] < 0.0 || p[1] < 0.0 || p[0] > self.box_extent[0] || p[1] > self.box_extent[1] {
                            return Err(Error::invalid(format!(
                                "env {}: ramp segment {k} leaves the box",
                                self.env_id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// One simulated run. Arrays are `T x N x D`, row-major.
///
/// `velocities` and `accelerations` hold finite-difference features of the
/// positions (not divided by `dt`), see [`finite_difference_features`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrajectoryRecord {
    pub env_id: u32,
    pub dt: f64,
    pub n_agents: usize,
    pub dim: usize,
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub accelerations: Vec<f64>,
}

impl TrajectoryRecord {
    /// Build a record from positions, deriving the feature channels.
    pub fn from_positions(env_id: u32, dt: f64, n_agents: usize, dim: usize, positions: Vec<f64>) -> Result<Self> {
        let width = n_agents * dim;
        if width == 0 || positions.len() % width != 0 {
            return Err(Error::invalid("positions must be T x N x D"));
        }
        let t_len = positions.len() / width;
        let (velocities, accelerations) = finite_difference_features(&positions, t_len, width)?;
        Ok(TrajectoryRecord {
            env_id,
            dt,
            n_agents,
            dim,
            times: (0..t_len).map(|t| t as f64 * dt).collect(),
            positions,
            velocities,
            accelerations,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn frame_width(&self) -> usize {
        self.n_agents * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.times.len();
        let w = self.frame_width();
        if t < 3 {
            return Err(Error::data(format!("trajectory needs at least 3 steps, got {t}")));
        }
        if !self.times.windows(2).all(|p| p[1] > p[0]) {
            return Err(Error::data("trajectory times must be strictly increasing"));
        }
        for (name, a) in [
            ("positions", &self.positions),
            ("velocities", &self.velocities),
            ("accelerations", &self.accelerations),
        ] {
            if a.len() != t * w {
                return Err(Error::data(format!("{name} has {} values, expected {}", a.len(), t * w)));
            }
        }
        Ok(())
    }
}

/// `v_t = p_t - p_{t-1}` and `a_t = p_t - 2 p_{t-1} + p_{t-2}`; rows before the
/// first defined one are copies of it. `positions` is `t_len` rows of `width`.
pub fn finite_difference_features(positions: &[f64], t_len: usize, width: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if t_len < 3 {
        return Err(Error::invalid(format!(
            "finite differences need at least 3 steps, got {t_len}"
        )));
    }
    if positions.len() != t_len * width {
        return Err(Error::ShapeMismatch {
            op: "finite_difference_features",
            expected: vec![t_len, width],
            found: vec![positions.len()],
        });
    }
    let p = |t: usize, k: usize| positions[t * width + k];
    let mut vel = vec![0.0; t_len * width];
    let mut acc = vec![0.0; t_len * width];
    for t in 1..t_len {
        for k in 0..width {
            vel[t * width + k] = p(t, k) - p(t - 1, k);
        }
    }
    for t in 2..t_len {
        for k in 0..width {
            acc[t * width + k] = p(t, k) - 2.0 * p(t - 1, k) + p(t - 2, k);
        }
    }
    vel.copy_within(width..2 * width, 0);
    acc.copy_within(2 * width..3 * width, 0);
    acc.copy_within(2 * width..3 * width, width);
    Ok((vel, acc))
}

/// Per-dimension z-score statistics for each feature family.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormStats {
    pub pos_mean: Vec<f64>,
    pub pos_std: Vec<f64>,
    pub vel_mean: Vec<f64>,
    pub vel_std: Vec<f64>,
    pub acc_mean: Vec<f64>,
    pub acc_std: Vec<f64>,
}

fn channel_stats<'a>(arrays: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for a in arrays.clone() {
        for row in a.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count.max(1) as f64;
    }
    let mut var = vec![0.0; dim];
    for a in arrays {
        for row in a.chunks(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|s| math::sqrt(s / count.max(1) as f64).max(STD_FLOOR))
        .collect();
    (mean, std)
}

/// Pooled per-dimension mean and population standard deviation.
pub fn fit_zscore(records: &[TrajectoryRecord]) -> Result<NormStats> {
    let first = records.first().ok_or(Error::Empty("fit_zscore"))?;
    let dim = first.dim;
    if records.iter().any(|r| r.dim != dim) {
        return Err(Error::data("records disagree on spatial dimension"));
    }
    let (pos_mean, pos_std) = channel_stats(records.iter().map(|r| r.positions.as_slice()), dim);
    let (vel_mean, vel_std) = channel_stats(records.iter().map(|r| r.velocities.as_slice()), dim);
    let (acc_mean, acc_std) = channel_stats(records.iter().map(|r| r.accelerations.as_slice()), dim);
    Ok(NormStats {
        pos_mean,
        pos_std,
        vel_mean,
        vel_std,
        acc_mean,
        acc_std,
    })
}

fn affine(values: &[f64], mean: &[f64], std: &[f64], forward: bool) -> Vec<f64> {
    let dim = mean.len();
    values
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let d = k % dim;
            if forward {
                (v - mean[d]) / std[d]
            } else {
                v * std[d] + mean[d]
            }
        })
        .collect()
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.pos_mean.len()
    }

    pub fn normalize_positions(&self, p: &[f64]) -> Vec<f64> {
        affine(p, &self.pos_mean, &self.pos_std, true)
    }

    pub fn denormalize_positions(&self, p: &[f64]) -> Vec<f64> {
        affine(p, &self.pos_mean, &self.pos_std, false)
    }
}

fn map_record(record: &TrajectoryRecord, stats: &NormStats, forward: bool) -> Result<TrajectoryRecord> {
    if record.dim != stats.dim() {
        return Err(Error::data(format!(
            "record has dimension {}, stats have {}",
            record.dim,
            stats.dim()
        )));
    }
    Ok(TrajectoryRecord {
        positions: affine(&record.positions, &stats.pos_mean, &stats.pos_std, forward),
        velocities: affine(&record.velocities, &stats.vel_mean, &stats.vel_std, forward),
        accelerations: affine(&record.accelerations, &stats.acc_mean, &stats.acc_std, forward),
        ..record.clone()
    })
}

pub fn apply_zscore(record: &TrajectoryRecord, stats: &NormStats) -> Result<TrajectoryRecord> {
    map_record(record, stats, true)
}

pub fn invert_zscore(record: &TrajectoryRecord, stats: &NormStats) -> Result<TrajectoryRecord> {
    map_record(record, stats, false)
}

// ---------------------------------------------------------------------------
// Lennard-Jones

/// Potential of the truncated, shifted Lennard-Jones pair term.
pub fn lj_potential(r: f64) -> f64 {
    fn raw(r: f64) -> f64 {
        let s6 = 1.0 / (r * r * r * r * r * r);
        4.0 * (s6 * s6 - s6)
    }
    if r >= LJ_CUTOFF {
        0.0
    } else {
        raw(r) - raw(LJ_CUTOFF)
    }
}

/// `-dV/dr / r`, so the force on `i` from `j` is this times `(p_i - p_j)`.
fn lj_force_over_r(r2: f64) -> f64 {
    let inv2 = 1.0 / r2;
    let s6 = inv2 * inv2 * inv2;
    24.0 * inv2 * (2.0 * s6 * s6 - s6)
}

/// Mutable state of a Lennard-Jones system, exposed for diagnostics.
#[derive(Debug, Clone)]
pub struct LjSystem {
    pub dim: usize,
    pub box_extent: Vec<f64>,
    pub boundary: Boundary,
    pub damping: f64,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    forces: Vec<f64>,
}

impl LjSystem {
    pub fn new(env: &EnvironmentSpec, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        let dim = env.dim();
        if positions.len() != velocities.len() || positions.len() % dim != 0 {
            return Err(Error::invalid("positions and velocities must both be N x D"));
        }
        let mut sys = LjSystem {
            dim,
            box_extent: env.box_extent.clone(),
            boundary: env.boundary,
            damping: env.damping.unwrap_or(0.0),
            forces: vec![0.0; positions.len()],
            positions,
            velocities,
        };
        sys.forces = sys.compute_forces();
        Ok(sys)
    }

    pub fn n(&self) -> usize {
        self.positions.len() / self.dim
    }

    fn displacement(&self, i: usize, j: usize, out: &mut [f64]) -> f64 {
        let mut r2 = 0.0;
        for d in 0..self.dim {
            let mut x = self.positions[i * self.dim + d] - self.positions[j * self.dim + d];
            if self.boundary == Boundary::Periodic {
                let l = self.box_extent[d];
                x -= l * math::round(x / l);
            }
            out[d] = x;
            r2 += x * x;
        }
        r2
    }

    fn compute_forces(&self) -> Vec<f64> {
        let n = self.n();
        let dim = self.dim;
        let mut f = vec![0.0; n * dim];
        let mut dx = vec![0.0; dim];
        let rc2 = LJ_CUTOFF * LJ_CUTOFF;
        for i in 0..n {
            for j in i + 1..n {
                let r2 = self.displacement(i, j, &mut dx);
                if r2 < rc2 {
                    let s = lj_force_over_r(r2);
                    for d in 0..dim {
                        f[i * dim + d] += s * dx[d];
                        f[j * dim + d] -= s * dx[d];
                    }
                }
            }
        }
        f
    }

    pub fn potential_energy(&self) -> f64 {
        let n = self.n();
        let mut dx = vec![0.0; self.dim];
        let mut e = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let r2 = self.displacement(i, j, &mut dx);
                e += lj_potential(math::sqrt(r2));
            }
        }
        e
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.velocities.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn total_energy(&self) -> f64 {
        self.kinetic_energy() + self.potential_energy()
    }

    pub fn momentum(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.dim];
        for row in self.velocities.chunks(self.dim) {
            for (a, v) in p.iter_mut().zip(row) {
                *a += v;
            }
        }
        p
    }

    pub fn min_pair_distance(&self) -> f64 {
        let n = self.n();
        let mut dx = vec![0.0; self.dim];
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                best = best.min(self.displacement(i, j, &mut dx));
            }
        }
        math::sqrt(best)
    }

    /// One velocity Verlet step; drag is treated implicitly in the second half-kick.
    pub fn step(&mut self, dt: f64) {
        let g = self.damping;
        let half = 0.5 * dt;
        for k in 0..self.positions.len() {
            let v_half = self.velocities[k] + half * (self.forces[k] - g * self.velocities[k]);
            self.velocities[k] = v_half;
            self.positions[k] += dt * v_half;
        }
        if self.boundary == Boundary::Reflective {
            for k in 0..self.positions.len() {
                let l = self.box_extent[k % self.dim];
                reflect_wall(&mut self.positions[k], &mut self.velocities[k], l);
            }
        }
        self.forces = self.compute_forces();
        let denom = 1.0 + half * g;
        for k in 0..self.positions.len() {
            self.velocities[k] = (self.velocities[k] + half * self.forces[k]) / denom;
        }
    }
}

fn reflect_wall(x: &mut f64, v: &mut f64, l: f64) {
    // A particle can only cross a wall by less than one box length per step.
    if *x < 0.0 {
        *x = -*x;
        *v = -*v;
    } else if *x > l {
        *x = 2.0 * l - *x;
        *v = -*v;
    }
}

/// Random lattice-based placement with a minimum pair distance.
pub fn lattice_positions(box_extent: &[f64], n: usize, periodic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
    let dim = box_extent.len();
    let mut per_dim = 1usize;
    while per_dim.pow(dim as u32) < n {
        per_dim += 1;
    }
    let total = per_dim.pow(dim as u32);
    for _ in 0..INIT_RETRIES {
        let mut sites: Vec<usize> = (0..total).collect();
        rng.shuffle(&mut sites);
        let mut pos = Vec::with_capacity(n * dim);
        for &s in sites.iter().take(n) {
            let mut rem = s;
            for &l in box_extent {
                let c = rem % per_dim;
                rem /= per_dim;
                let a = l / per_dim as f64;
                let jitter = rng.uniform_range(-0.1, 0.1) * a;
                pos.push((c as f64 + 0.5) * a + jitter);
            }
        }
        let ok = (0..n).all(|i| {
            (i + 1..n).all(|j| {
                let mut r2 = 0.0;
                for d in 0..dim {
                    let mut x = pos[i * dim + d] - pos[j * dim + d];
                    if periodic {
                        x -= box_extent[d] * math::round(x / box_extent[d]);
                    }
                    r2 += x * x;
                }
                r2 >= MIN_INIT_DISTANCE * MIN_INIT_DISTANCE
            })
        });
        if ok {
            return Ok(pos);
        }
    }
    Err(Error::Simulation(format!(
        "could not place {n} particles without overlap after {INIT_RETRIES} attempts"
    )))
}

/// Gaussian velocities with per-component variance `temperature`, centre of
/// mass motion removed.
pub fn thermal_velocities(n: usize, dim: usize, temperature: f64, rng: &mut Rng) -> Vec<f64> {
    let mut v = rng.normal_vec(n * dim, math::sqrt(temperature));
    if n > 1 {
        let mut com = vec![0.0; dim];
        for row in v.chunks(dim) {
            for (c, x) in com.iter_mut().zip(row) {
                *c += x / n as f64;
            }
        }
        for row in v.chunks_mut(dim) {
            for (x, c) in row.iter_mut().zip(&com) {
                *x -= c;
            }
        }
    }
    v
}

/// How a generator samples a run.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimSettings {
    pub n_particles: usize,
    /// Recorded frames.
    pub steps: usize,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps between recorded frames.
    pub record_every: usize,
}

impl SimSettings {
    pub fn new(n_particles: usize, steps: usize, dt: f64) -> Self {
        SimSettings {
            n_particles,
            steps,
            dt,
            record_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_particles == 0 || self.steps == 0 || self.record_every == 0 {
            return Err(Error::invalid("particles, steps and record_every must be positive"));
        }
        Ok(())
    }
}

/// Run a Lennard-Jones system for `steps` recorded frames of `dt`.
pub fn simulate_lj(env: &EnvironmentSpec, n_particles: usize, steps: usize, dt: f64, rng: &mut Rng) -> Result<TrajectoryRecord> {
    simulate_lj_with(env, &SimSettings::new(n_particles, steps, dt), rng)
}

pub fn simulate_lj_with(env: &EnvironmentSpec, settings: &SimSettings, rng: &mut Rng) -> Result<TrajectoryRecord> {
    if env.kind != EnvKind::LennardJones {
        return Err(Error::invalid("simulate_lj needs a lennard_jones environment"));
    }
    env.validate()?;
    settings.validate()?;
    let n = settings.n_particles;
    let pos = lattice_positions(&env.box_extent, n, env.boundary == Boundary::Periodic, rng)?;
    let vel = thermal_velocities(n, env.dim(), env.temperature.unwrap_or(0.0), rng);
    let mut sys = LjSystem::new(env, pos, vel)?;
    run_recorded(env.env_id, settings, &mut sys.positions.clone(), |out| {
        for _ in 0..settings.record_every {
            sys.step(settings.dt);
        }
        out.copy_from_slice(&sys.positions);
    }, n, env.dim())
}

fn run_recorded(
    env_id: u32,
    settings: &SimSettings,
    initial: &mut Vec<f64>,
    mut advance: impl FnMut(&mut [f64]),
    n: usize,
    dim: usize,
) -> Result<TrajectoryRecord> {
    let w = n * dim;
    let mut positions = Vec::with_capacity(settings.steps * w);
    positions.extend_from_slice(initial);
    let mut frame = vec![0.0; w];
    for _ in 1..settings.steps {
        advance(&mut frame);
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation("state became non-finite".into()));
        }
        positions.extend_from_slice(&frame);
    }
    let frame_dt = settings.dt * settings.record_every as f64;
    if settings.steps >= 3 {
        TrajectoryRecord::from_positions(env_id, frame_dt, n, dim, positions)
    } else {
        Ok(TrajectoryRecord {
            env_id,
            dt: frame_dt,
            n_agents: n,
            dim,
            times: (0..settings.steps).map(|t| t as f64 * frame_dt).collect(),
            velocities: vec![0.0; positions.len()],
            accelerations: vec![0.0; positions.len()],
            positions,
        })
    }
}

// ---------------------------------------------------------------------------
// Ramp box

/// Cut-off of the purely repulsive pair term, at the Lennard-Jones minimum.
pub const REPULSION_CUTOFF: f64 = 1.122_462_048_309_373;

/// State of a 2-D ramp-box system.
#[derive(Debug, Clone)]
pub struct RampBoxSystem {
    pub box_extent: [f64; 2],
    pub gravity: f64,
    pub ramps: Vec<Segment>,
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    acc: Vec<f64>,
}

impl RampBoxSystem {
    pub fn new(env: &EnvironmentSpec, positions: Vec<f64>, velocities: Vec<f64>) -> Result<Self> {
        if env.kind != EnvKind::RampBox {
            return Err(Error::invalid("ramp box system needs a ramp_box environment"));
        }
        env.validate()?;
        if positions.len() != velocities.len() || positions.len() % 2 != 0 {
            return Err(Error::invalid("positions and velocities must both be N x 2"));
        }
        let mut sys = RampBoxSystem {
            box_extent: [env.box_extent[0], env.box_extent[1]],
            gravity: env.gravity.unwrap_or(1.0),
            ramps: env.ramp_segments.clone(),
            acc: vec![0.0; positions.len()],
            positions,
            velocities,
        };
        sys.acc = sys.accelerations();
        Ok(sys)
    }

    fn accelerations(&self) -> Vec<f64> {
        let n = self.positions.len() / 2;
        let mut a = vec![0.0; 2 * n];
        for i in 0..n {
            a[2 * i + 1] -= self.gravity;
        }
        let rc2 = REPULSION_CUTOFF * REPULSION_CUTOFF;
        for i in 0..n {
            for j in i + 1..n {
                let dx = self.positions[2 * i] - self.positions[2 * j];
                let dy = self.positions[2 * i + 1] - self.positions[2 * j + 1];
                let r2 = dx * dx + dy * dy;
                if r2 < rc2 && r2 > 0.0 {
                    let inv2 = 1.0 / r2;
                    let s6 = inv2 * inv2 * inv2;
                    let s = 48.0 * inv2 * s6 * s6;
                    a[2 * i] += s * dx;
                    a[2 * i + 1] += s * dy;
                    a[2 * j] -= s * dx;
                    a[2 * j + 1] -= s * dy;
                }
            }
        }
        a
    }

    fn collide(&self, old: [f64; 2], p: &mut [f64; 2], v: &mut [f64; 2]) {
        for _ in 0..4 {
            let mut hit = false;
            for s in &self.ramps {
                let s_old = s.signed_distance(old);
                let s_new = s.signed_distance(*p);
                let crossed = (s_old > 0.0 && s_new <= 0.0) || (s_old < 0.0 && s_new >= 0.0);
                if !crossed {
                    continue;
                }
                let f = s_old / (s_old - s_new);
                let x = [old[0] + f * (p[0] - old[0]), old[1] + f * (p[1] - old[1])];
                let u = s.param(x);
                if !(0.0..=1.0).contains(&u) {
                    continue;
                }
                let n = s.normal();
                p[0] -= 2.0 * s_new * n[0];
                p[1] -= 2.0 * s_new * n[1];
                let vn = v[0] * n[0] + v[1] * n[1];
                v[0] -= 2.0 * vn * n[0];
                v[1] -= 2.0 * vn * n[1];
                hit = true;
            }
            for d in 0..2 {
                let before = p[d];
                reflect_wall(&mut p[d], &mut v[d], self.box_extent[d]);
                hit |= before != p[d];
            }
            if !hit {
                break;
            }
        }
        for d in 0..2 {
            p[d] = p[d].clamp(0.0, self.box_extent[d]);
        }
    }

    pub fn step(&mut self, dt: f64) {
        let n = self.positions.len() / 2;
        for i in 0..n {
            let old = [self.positions[2 * i], self.positions[2 * i + 1]];
            let mut v = [
                self.velocities[2 * i] + 0.5 * dt * self.acc[2 * i],
                self.velocities[2 * i + 1] + 0.5 * dt * self.acc[2 * i + 1],
            ];
            let mut p = [old[0] + dt * v[0], old[1] + dt * v[1]];
            self.collide(old, &mut p, &mut v);
            self.positions[2 * i] = p[0];
            self.positions[2 * i + 1] = p[1];
            self.velocities[2 * i] = v[0];
            self.velocities[2 * i + 1] = v[1];
        }
        self.acc = self.accelerations();
        for k in 0..self.velocities.len() {
            self.velocities[k] += 0.5 * dt * self.acc[k];
        }
    }
}

/// Uniform placement away from walls, with a minimum pair distance.
fn random_box_positions(box_extent: [f64; 2], n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let margin = 0.25;
    'attempt: for _ in 0..INIT_RETRIES {
        let mut pos: Vec<f64> = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let mut placed = false;
            for _ in 0..1000 {
                let x = rng.uniform_range(margin, box_extent[0] - margin);
                let y = rng.uniform_range(margin, box_extent[1] - margin);
                let clear = pos
                    .chunks(2)
                    .all(|q| sq(q[0] - x) + sq(q[1] - y) >= sq(MIN_INIT_DISTANCE));
                if clear {
                    pos.push(x);
                    pos.push(y);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }
        return Ok(pos);
    }
    Err(Error::Simulation(format!(
        "could not place {n} particles without overlap after {INIT_RETRIES} attempts"
    )))
}

pub fn simulate_rampbox(env: &EnvironmentSpec, n_particles: usize, steps: usize, dt: f64, rng: &mut Rng) -> Result<TrajectoryRecord> {
    simulate_rampbox_with(env, &SimSettings::new(n_particles, steps, dt), rng)
}

pub fn simulate_rampbox_with(env: &EnvironmentSpec, settings: &SimSettings, rng: &mut Rng) -> Result<TrajectoryRecord> {
    if env.kind != EnvKind::RampBox {
        return Err(Error::invalid("simulate_rampbox needs a ramp_box environment"));
    }
    env.validate()?;
    settings.validate()?;
    let n = settings.n_particles;
    let b = [env.box_extent[0], env.box_extent[1]];
    let pos = random_box_positions(b, n, rng)?;
    let vel = thermal_velocities(n, 2, env.temperature.unwrap_or(0.0).max(0.0), rng);
    let mut sys = RampBoxSystem::new(env, pos, vel)?;
    run_recorded(env.env_id, settings, &mut sys.positions.clone(), |out| {
        for _ in 0..settings.record_every {
            sys.step(settings.dt);
        }
        out.copy_from_slice(&sys.positions);
    }, n, 2)
}

/// Generate one record of `env`; the random stream is derived from
/// `(seed, env_id, index)` so records can be produced in any order.
pub fn generate_record(env: &EnvironmentSpec, index: usize, settings: &SimSettings, seed: u64) -> Result<TrajectoryRecord> {
    let mut rng = Rng::new(seed).derive(&[u64::from(env.env_id), index as u64]);
    match env.kind {
        EnvKind::LennardJones => simulate_lj_with(env, settings, &mut rng),
        EnvKind::RampBox => simulate_rampbox_with(env, settings, &mut rng),
    }
}

/// All records of a catalog, environment-major.
pub fn generate_dataset(
    catalog: &[EnvironmentSpec],
    trajs_per_env: usize,
    settings: &SimSettings,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    let mut out = Vec::with_capacity(catalog.len() * trajs_per_env);
    for env in catalog {
        for k in 0..trajs_per_env {
            out.push(generate_record(env, k, settings, seed)?);
        }
    }
    Ok(out)
}

/// Smallest cubic box that fits `n` particles at lattice spacing 1.3 and
/// still exceeds twice the cutoff, so the minimum image is unambiguous.
pub fn default_lj_box(n: usize, dim: usize) -> Vec<f64> {
    let mut per_dim = 1usize;
    while per_dim.pow(dim as u32) < n {
        per_dim += 1;
    }
    let l = (1.3 * per_dim as f64).max(2.0 * LJ_CUTOFF + 0.2);
    vec![l; dim]
}

/// Environments with temperatures (and optionally drag) spread evenly over
/// the given ranges.
pub fn lj_catalog(
    n_envs: usize,
    temperature: (f64, f64),
    damping: (f64, f64),
    box_extent: &[f64],
    boundary: Boundary,
) -> Vec<EnvironmentSpec> {
    let lerp = |(lo, hi): (f64, f64), k: usize| {
        if n_envs <= 1 {
            lo
        } else {
            lo + (hi - lo) * k as f64 / (n_envs - 1) as f64
        }
    };
    (0..n_envs)
        .map(|k| {
            let env = EnvironmentSpec::lennard_jones(k as u32, lerp(temperature, k), box_extent.to_vec(), boundary);
            if damping.1 > 0.0 || damping.0 > 0.0 {
                env.with_damping(lerp(damping, k))
            } else {
                env
            }
        })
        .collect()
}

/// Ramp boxes with one to three randomly placed ramps each.
pub fn rampbox_catalog(n_envs: usize, box_extent: [f64; 2], rng: &mut Rng) -> Vec<EnvironmentSpec> {
    (0..n_envs)
        .map(|k| {
            let count = 1 + rng.below(3);
            let ramps = (0..count)
                .map(|_| {
                    let cx = rng.uniform_range(0.2, 0.8) * box_extent[0];
                    let cy = rng.uniform_range(0.15, 0.6) * box_extent[1];
                    let half = rng.uniform_range(0.1, 0.25) * box_extent[0];
                    let tilt = rng.uniform_range(-0.5, 0.5);
                    let (dx, dy) = (half * math::cos(tilt), half * math::sin(tilt));
                    let clamp = |x: f64, l: f64| x.clamp(0.0, l);
                    Segment {
                        a: [clamp(cx - dx, box_extent[0]), clamp(cy - dy, box_extent[1])],
                        b: [clamp(cx + dx, box_extent[0]), clamp(cy + dy, box_extent[1])],
                    }
                })
                .collect();
            EnvironmentSpec::ramp_box(k as u32, ramps, box_extent)
        })
        .collect()
}
