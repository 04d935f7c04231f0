//! The environment-conditioned latent ODE, its fixed-step RK4 solver and the
//! position decoder.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::neighbors::radius_neighbors;
use crate::nn::{Bound, Mlp2, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Networks of the ODE function and the decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeFuncParams {
    pub f_env: Mlp2,
    pub f_e1: Mlp2,
    pub f_v1: Mlp2,
    pub f_e2: Mlp2,
    pub f_self: Mlp2,
    pub f_dec: Mlp2,
    pub radius: f64,
}

impl OdeFuncParams {
    pub fn new(store: &mut ParamStore, d: usize, hidden: usize, out_dim: usize, radius: f64, rng: &mut Rng) -> Self {
        OdeFuncParams {
            f_env: Mlp2::new(store, "ode.f_env", 2 * d, hidden, d, rng),
            f_e1: Mlp2::new(store, "ode.f_e1", 2 * d, hidden, d, rng),
            f_v1: Mlp2::new(store, "ode.f_v1", d, hidden, d, rng),
            f_e2: Mlp2::new(store, "ode.f_e2", 2 * d, hidden, d, rng),
            f_self: Mlp2::new(store, "ode.f_self", d, hidden, d, rng),
            f_dec: Mlp2::new(store, "dec", d, hidden, out_dim, rng),
            radius,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.f_self.input_width()
    }

    pub fn out_dim(&self) -> usize {
        self.f_dec.output_width()
    }
}

/// Maps decoded (normalized) positions back to the units of the radius.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PositionScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PositionScale {
    pub fn identity(dim: usize) -> Self {
        PositionScale {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        y.iter()
            .enumerate()
            .map(|(k, v)| v * self.std[k % dim] + self.mean[k % dim])
            .collect()
    }
}

/// Row-wise decoder, `Z [n, d] -> Y [n, D]`.
pub fn decode(tape: &mut Tape, p: &Bound, params: &OdeFuncParams, z: Var) -> Result<Var> {
    params.f_dec.forward(tape, p, z)
}

/// Directed neighbor lists: `src[k] -> dst[k]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Neighbors {
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
}

impl Neighbors {
    pub fn none() -> Self {
        Neighbors {
            src: Rc::from(Vec::new()),
            dst: Rc::from(Vec::new()),
        }
    }

    /// Both directions of every pair within `radius` of the given positions.
    pub fn within(positions: &[f64], dim: usize, radius: f64) -> Self {
        let pairs = radius_neighbors(positions, dim, radius);
        let mut src = Vec::with_capacity(2 * pairs.len());
        let mut dst = Vec::with_capacity(2 * pairs.len());
        for (i, j) in pairs {
            src.push(i);
            dst.push(j);
            src.push(j);
            dst.push(i);
        }
        Neighbors {
            src: src.into(),
            dst: dst.into(),
        }
    }

    /// [`Neighbors::within`] applied separately to consecutive blocks of
    /// `sizes[k]` rows; indices refer to the stacked rows.
    pub fn within_blocks(positions: &[f64], dim: usize, radius: f64, sizes: &[usize]) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offset = 0;
        for &n in sizes {
            let block = &positions[offset * dim..(offset + n) * dim];
            for (i, j) in radius_neighbors(block, dim, radius) {
                src.extend([offset + i, offset + j]);
                dst.extend([offset + j, offset + i]);
            }
            offset += n;
        }
        Neighbors {
            src: src.into(),
            dst: dst.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// `dZ/dt` for latent states `z [n, d]`, environment `u` (`[1, d]` shared or
/// `[n, d]` per row) and a fixed neighbor set:
///
/// `zt = f_env(z | u)`, `e_ij = f_e1(zt_i | zt_j)`, `z' = f_v1(sum_i e_ij)`,
/// `dz_j/dt = f_e2(zt_j | z'_j) + f_self(zt_j)`.
pub fn ode_derivative(
    tape: &mut Tape,
    p: &Bound,
    params: &OdeFuncParams,
    z: Var,
    u: Var,
    neighbors: &Neighbors,
) -> Result<Var> {
    let (n, d) = tape.shape(z);
    let ub = if tape.shape(u).0 == n { u } else { tape.broadcast_rows(u, n)? };
    let zu = tape.concat_cols(z, ub)?;
    let zt = params.f_env.forward(tape, p, zu)?;
    let agg = if neighbors.is_empty() {
        tape.constant(Tensor::zeros(&[n, d]))?
    } else {
        // f_e1 evaluated per node then gathered per edge: the first layer
        // splits over the two halves of its input and the second is linear,
        // so it is applied after aggregation with the bias scaled by degree.
        let (l1, l2) = (params.f_e1.l1, params.f_e1.l2);
        let w1 = p.var(l1.w);
        let w_src = tape.slice_rows(w1, 0, d)?;
        let w_dst = tape.slice_rows(w1, d, 2 * d)?;
        let h_src = tape.matmul(zt, w_src)?;
        let h_dst = tape.matmul(zt, w_dst)?;
        let h_src = tape.gather_rows(h_src, neighbors.src.clone())?;
        let h_dst = tape.gather_rows(h_dst, neighbors.dst.clone())?;
        let pre = tape.add(h_src, h_dst)?;
        let pre = tape.add_row(pre, p.var(l1.b))?;
        let hidden = tape.tanh(pre);
        let summed = tape.scatter_add_rows(hidden, neighbors.dst.clone(), n)?;
        let mut degree = vec![0.0; n];
        for &j in neighbors.dst.iter() {
            degree[j] += 1.0;
        }
        let degree = tape.constant(Tensor::new(vec![n, 1], degree)?)?;
        let out = tape.matmul(summed, p.var(l2.w))?;
        let bias = tape.matmul(degree, p.var(l2.b))?;
        tape.add(out, bias)?
    };
    let zp = params.f_v1.forward(tape, p, agg)?;
    let both = tape.concat_cols(zt, zp)?;
    let inter = params.f_e2.forward(tape, p, both)?;
    let own = params.f_self.forward(tape, p, zt)?;
    tape.add(inter, own)
}

/// A right-hand side for [`rk4_solve`]. `begin_step` runs once at the start
/// of each internal step, before the four stage evaluations.
pub trait OdeFunction {
    fn begin_step(&mut self, _tape: &mut Tape, _z: Var) -> Result<()> {
        Ok(())
    }

    fn eval(&mut self, tape: &mut Tape, z: Var) -> Result<Var>;
}

/// Closures without per-step state.
pub struct FnOde<F>(pub F);

impl<F: FnMut(&mut Tape, Var) -> Result<Var>> OdeFunction for FnOde<F> {
    fn eval(&mut self, tape: &mut Tape, z: Var) -> Result<Var> {
        (self.0)(tape, z)
    }
}

/// Classical RK4 with `substeps` uniform internal steps between consecutive
/// requested times. Returns the state at every requested time, the first
/// being `z0` itself.
pub fn rk4_solve<F: OdeFunction>(tape: &mut Tape, f: &mut F, z0: Var, times: &[f64], substeps: usize) -> Result<Vec<Var>> {
    if times.is_empty() {
        return Err(Error::Empty("rk4_solve times"));
    }
    if substeps == 0 {
        return Err(Error::invalid("substeps must be at least 1"));
    }
    if !times.windows(2).all(|w| w[1] > w[0]) || times.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("requested times must be finite and strictly increasing"));
    }
    let mut out = Vec::with_capacity(times.len());
    out.push(z0);
    let mut z = z0;
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for _ in 0..substeps {
            f.begin_step(tape, z)?;
            let k1 = f.eval(tape, z)?;
            let s = tape.scale(k1, 0.5 * h);
            let z2 = tape.add(z, s)?;
            let k2 = f.eval(tape, z2)?;
            let s = tape.scale(k2, 0.5 * h);
            let z3 = tape.add(z, s)?;
            let k3 = f.eval(tape, z3)?;
            let s = tape.scale(k3, h);
            let z4 = tape.add(z, s)?;
            let k4 = f.eval(tape, z4)?;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0);
            let acc = tape.add(k1, k23)?;
            let acc = tape.add(acc, k4)?;
            let step = tape.scale(acc, h / 6.0);
            z = tape.add(z, step)?;
        }
        out.push(z);
    }
    Ok(out)
}

/// The latent ODE of one or more independent systems stacked by rows:
/// neighbors come from decoded positions at the start of each internal step
/// and never cross between blocks.
pub struct LatentOde<'a> {
    pub bound: &'a Bound,
    pub params: &'a OdeFuncParams,
    pub u: Var,
    pub scale: &'a PositionScale,
    /// Rows per system; empty means a single system.
    pub blocks: Vec<usize>,
    neighbors: Neighbors,
}

impl<'a> LatentOde<'a> {
    pub fn new(bound: &'a Bound, params: &'a OdeFuncParams, u: Var, scale: &'a PositionScale) -> Self {
        LatentOde {
            bound,
            params,
            u,
            scale,
            blocks: Vec::new(),
            neighbors: Neighbors::none(),
        }
    }
}

impl OdeFunction for LatentOde<'_> {
    fn begin_step(&mut self, tape: &mut Tape, z: Var) -> Result<()> {
        if !(self.params.radius > 0.0) {
            self.neighbors = Neighbors::none();
            return Ok(());
        }
        let y = decode(tape, self.bound, self.params, z)?;
        let dim = self.params.out_dim();
        let raw = self.scale.apply(tape.value(y).data());
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("decoded positions during integration")));
        }
        self.neighbors = if self.blocks.is_empty() {
            Neighbors::within(&raw, dim, self.params.radius)
        } else {
            Neighbors::within_blocks(&raw, dim, self.params.radius, &self.blocks)
        };
        Ok(())
    }

    fn eval(&mut self, tape: &mut Tape, z: Var) -> Result<Var> {
        ode_derivative(tape, self.bound, self.params, z, self.u, &self.neighbors)
    }
}

/// Latent and decoded paths as tape variables.
#[derive(Debug, Clone)]
pub struct RolloutVars {
    pub z_path: Vec<Var>,
    pub y_path: Vec<Var>,
}

/// Integrate from `z0` over `times` and decode at every requested time.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    tape: &mut Tape,
    p: &Bound,
    params: &OdeFuncParams,
    z0: Var,
    u: Var,
    times: &[f64],
    substeps: usize,
    scale: &PositionScale,
) -> Result<RolloutVars> {
    rollout_blocks(tape, p, params, z0, u, times, substeps, scale, Vec::new())
}

/// [`rollout`] of independent systems stacked by rows, `blocks[k]` rows each;
/// `u` holds one row per stacked row.
#[allow(clippy::too_many_arguments)]
pub fn rollout_blocks(
    tape: &mut Tape,
    p: &Bound,
    params: &OdeFuncParams,
    z0: Var,
    u: Var,
    times: &[f64],
    substeps: usize,
    scale: &PositionScale,
    blocks: Vec<usize>,
) -> Result<RolloutVars> {
    let mut f = LatentOde::new(p, params, u, scale);
    f.blocks = blocks;
    let z_path = rk4_solve(tape, &mut f, z0, times, substeps)?;
    let y_path = z_path
        .iter()
        .map(|&z| decode(tape, p, params, z))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutVars { z_path, y_path })
}

/// Plain-value rollout output.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub times: Vec<f64>,
    pub z_path: Vec<Tensor>,
    pub y_path: Vec<Tensor>,
}

impl RolloutResult {
    pub fn from_vars(tape: &Tape, times: &[f64], vars: &RolloutVars) -> Self {
        RolloutResult {
            times: times.to_vec(),
            z_path: vars.z_path.iter().map(|&v| tape.value(v).clone()).collect(),
            y_path: vars.y_path.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}
