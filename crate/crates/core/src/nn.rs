//! Parameter storage and the neural primitives shared by every module.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamId(pub usize);

/// Named learnable tensors, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::ShapeMismatch {
                op: "set_flat",
                expected: vec![self.num_scalars()],
                found: vec![flat.len()],
            });
        }
        let mut at = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Replace a tensor by name, keeping its shape contract.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                expected: self.tensors[id.0].shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.iter() {
            t.check_finite(name)?;
        }
        Ok(())
    }

    /// Register every tensor on a fresh tape; all are trainable.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, |_| true)
    }

    /// Register every tensor; those for which `trainable` is false become
    /// constants.
    pub fn bind_with(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .ids()
            .map(|id| {
                let t = self.tensors[id.0].clone();
                if trainable(id) {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
                .expect("parameters are 2-D")
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Re-register `ids` on the tape as constants holding their current
    /// values in `store`, e.g. after an update made mid-step.
    pub fn rebind_constants(&mut self, tape: &mut Tape, store: &ParamStore, ids: &[ParamId]) {
        for &id in ids {
            self.vars[id.0] = tape.constant(store.get(id).clone()).expect("parameters are 2-D");
        }
    }

    /// Gradients in store order; parameters untouched by backward get zeros.
    pub fn grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                tape.grad(self.vars[id.0])
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }

    pub fn flat_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<f64> {
        self.grads(tape, store)
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect()
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

fn init_bound(fan_in: usize) -> f64 {
    1.0 / math::sqrt(fan_in.max(1) as f64)
}

/// A `[rows, cols]` matrix drawn from `U(-1/sqrt(rows), 1/sqrt(rows))`.
pub fn init_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    rng.uniform_tensor(&[rows, cols], init_bound(rows))
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_matrix(rng, fan_in, fan_out));
        let b = store.add(
            format!("{name}.b"),
            rng.uniform_tensor(&[1, fan_out], init_bound(fan_in)),
        );
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.fan_in {
            return Err(Error::ShapeMismatch {
                op: "Linear::forward",
                expected: vec![self.fan_in],
                found: vec![cols],
            });
        }
        let xw = tape.matmul(x, p.var(self.w))?;
        tape.add_row(xw, p.var(self.b))
    }
}

/// Two affine layers with a tanh hidden activation:
/// `y = tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        let l1 = Linear::new(store, &format!("{name}.l1"), input, hidden, rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), hidden, output, rng);
        Mlp2 { l1, l2 }
    }

    pub fn input_width(&self) -> usize {
        self.l1.fan_in
    }

    pub fn output_width(&self) -> usize {
        self.l2.fan_out
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, p, x)?;
        let h = tape.tanh(h);
        self.l2.forward(tape, p, h)
    }
}

/// Per-row LayerNorm parameters, gain initialized to 1 and bias to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[1, width], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, width]));
        LayerNorm {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, p.var(self.gain), p.var(self.bias), self.eps)
    }
}

/// Softmax of a vector held as `[n,1]` or `[1,n]`; output has the same shape.
pub fn softmax(tape: &mut Tape, v: Var) -> Result<Var> {
    let (r, c) = tape.shape(v);
    let n = r * c;
    if n == 0 {
        return Err(Error::Empty("softmax"));
    }
    let col = tape.reshape(v, n, 1)?;
    let seg: Rc<[usize]> = vec![0usize; n].into();
    let s = tape.segment_softmax(col, seg, 1)?;
    tape.reshape(s, r, c)
}

/// Softmax on plain values, max-shifted.
pub fn softmax_values(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| math::exp(x - m)).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// `gain * (x - mean) / sqrt(var + eps) + bias` over a single vector.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let (r, c) = tape.shape(x);
    let row = tape.reshape(x, 1, r * c)?;
    let y = tape.layer_norm_rows(row, gain, bias, eps)?;
    tape.reshape(y, r, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn tiny_net(rng: &mut Rng) -> (ParamStore, Mlp2) {
        let mut store = ParamStore::new();
        let net = Mlp2::new(&mut store, "net", 2, 3, 2, rng);
        (store, net)
    }

    fn run(store: &ParamStore, net: &Mlp2, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(Tensor::row(x.to_vec())).unwrap();
        let y = net.forward(&mut tape, &p, xv).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn zero_weights_output_bias() {
        let (mut store, net) = tiny_net(&mut Rng::new(0));
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        *store.get_mut(net.l2.b) = Tensor::row(vec![0.25, -4.0]);
        assert_eq!(run(&store, &net, &[3.0, -7.0]), vec![0.25, -4.0]);
    }

    #[test]
    fn identity_layers_map_zero_to_zero() {
        let mut store = ParamStore::new();
        let net = Mlp2::new(&mut store, "id", 2, 2, 2, &mut Rng::new(0));
        *store.get_mut(net.l1.w) = Tensor::identity(2);
        *store.get_mut(net.l2.w) = Tensor::identity(2);
        *store.get_mut(net.l1.b) = Tensor::zeros(&[1, 2]);
        *store.get_mut(net.l2.b) = Tensor::zeros(&[1, 2]);
        assert_eq!(run(&store, &net, &[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn matches_scalar_hand_evaluation() {
        let (store, net) = tiny_net(&mut Rng::new(11));
        let x = [1.0, -1.0];
        let w1 = store.get(net.l1.w);
        let b1 = store.get(net.l1.b);
        let w2 = store.get(net.l2.w);
        let b2 = store.get(net.l2.b);
        let mut hidden = [0.0; 3];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = b1.data()[j];
            for (i, xi) in x.iter().enumerate() {
                s += xi * w1.get2(i, j);
            }
            *h = s.tanh();
        }
        let mut expect = [0.0; 2];
        for (k, e) in expect.iter_mut().enumerate() {
            let mut s = b2.data()[k];
            for (j, h) in hidden.iter().enumerate() {
                s += h * w2.get2(j, k);
            }
            *e = s;
        }
        let got = run(&store, &net, &x);
        for k in 0..2 {
            assert!((got[k] - expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, net) = tiny_net(&mut Rng::new(0));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(
            net.forward(&mut tape, &p, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mlp_loss_passes_grad_check() {
        let (store, net) = tiny_net(&mut Rng::new(5));
        let x = Tensor::matrix(2, 2, vec![0.3, -1.2, 0.8, 0.1]).unwrap();
        let loss_of = |s: &ParamStore, grad: bool| {
            let mut tape = Tape::new();
            let p = s.bind(&mut tape);
            let xv = tape.constant(x.clone()).unwrap();
            let y = net.forward(&mut tape, &p, xv).unwrap();
            let sq = tape.square(y).unwrap();
            let l = tape.sum(sq);
            let v = tape.scalar_value(l);
            if grad {
                tape.backward(l).unwrap();
                (v, p.flat_grads(&tape, s))
            } else {
                (v, Vec::new())
            }
        };
        let (_, analytic) = loss_of(&store, true);
        let theta = store.flatten();
        let err = grad_check(
            |th| {
                let mut s = store.clone();
                s.set_flat(th).unwrap();
                loss_of(&s, false).0
            },
            &theta,
            &analytic,
            1e-5,
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_values(&[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        for c in [-50.0, 0.0, 3.0, 700.0] {
            let s = softmax_values(&[c; 4]).unwrap();
            assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        }
        let s = softmax_values(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (k, v) in s.iter().enumerate() {
            assert!((v - (k + 1) as f64 / 6.0).abs() < 1e-15);
        }
        assert!(matches!(softmax_values(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn softmax_on_tape_matches_values() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(vec![0.1, 2.0, -1.0])).unwrap();
        let s = softmax(&mut tape, v).unwrap();
        let expect = softmax_values(&[0.1, 2.0, -1.0]).unwrap();
        assert_eq!(tape.value(s).data(), expect.as_slice());
        assert_eq!(tape.shape(s), (1, 3));
    }

    #[test]
    fn softmax_dot_passes_grad_check() {
        let w = [0.5, -1.0, 2.0, 0.25];
        let f = |th: &[f64], grad: bool| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::column(th.to_vec())).unwrap();
            let s = softmax(&mut tape, v).unwrap();
            let wv = tape.constant(Tensor::column(w.to_vec())).unwrap();
            let d = tape.row_dot(s, wv).unwrap();
            let l = tape.sum(d);
            let val = tape.scalar_value(l);
            if grad {
                tape.backward(l).unwrap();
                (val, tape.grad(v).unwrap().into_data())
            } else {
                (val, Vec::new())
            }
        };
        let theta = [0.3, -0.2, 1.5, 0.0];
        let (_, g) = f(&theta, true);
        let err = grad_check(|th| f(th, false).0, &theta, &g, 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::full(&[1, 3], 1.0)).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let c = tape.constant(Tensor::row(vec![4.0; 3])).unwrap();
        let y = layer_norm(&mut tape, c, ones, zeros, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);

        let g1 = tape.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let b1 = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let x = tape.constant(Tensor::row(vec![1.0, -1.0])).unwrap();
        let y = layer_norm(&mut tape, x, g1, b1, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -1.0]);

        let g0 = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let bb = tape.constant(Tensor::row(vec![0.7, -0.2])).unwrap();
        let x = tape.constant(Tensor::row(vec![3.0, 9.0])).unwrap();
        let y = layer_norm(&mut tape, x, g0, bb, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -0.2]);
    }

    #[test]
    fn set_flat_round_trips() {
        let (mut store, _) = tiny_net(&mut Rng::new(2));
        let flat = store.flatten();
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        store.set_flat(&doubled).unwrap();
        assert_eq!(store.flatten(), doubled);
        assert!(store.set_flat(&flat[1..]).is_err());
    }
}
