//! Fixed-radius neighbor search.
//!
//! Two indexes answer the same query, "every pair `i < j` with
//! `|p_i - p_j| <= r`": a uniform cell grid with cell width `r` for dense,
//! box-bounded point sets and a k-d tree otherwise. Both are checked against
//! the quadratic scan in [`brute_force_pairs`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Which index answers a radius query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Grid when the occupied bounding box holds few cells per point, k-d tree otherwise.
    Auto,
    Grid,
    KdTree,
    BruteForce,
}

#[inline]
fn dist2(points: &[f64], dim: usize, i: usize, j: usize) -> f64 {
    let a = &points[i * dim..(i + 1) * dim];
    let b = &points[j * dim..(j + 1) * dim];
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// All pairs `(i, j)`, `i < j`, with Euclidean distance `<= r` (closed ball),
/// sorted lexicographically. A radius `<= 0` or non-finite radius disables
/// connectivity and yields no pairs.
pub fn radius_neighbors(points: &[f64], dim: usize, r: f64) -> Vec<(usize, usize)> {
    radius_neighbors_with(points, dim, r, Strategy::Auto)
}

pub fn radius_neighbors_with(points: &[f64], dim: usize, r: f64, strategy: Strategy) -> Vec<(usize, usize)> {
    if dim == 0 || points.len() < 2 * dim || !(r > 0.0) || !r.is_finite() {
        return Vec::new();
    }
    let n = points.len() / dim;
    let strategy = match strategy {
        Strategy::Auto => choose(points, dim, n, r),
        s => s,
    };
    let mut pairs = match strategy {
        Strategy::Grid => CellGrid::build(points, dim, r).pairs(points, r),
        Strategy::KdTree => KdTree::build(points, dim).pairs_within(points, r),
        _ => brute_force_pairs(points, dim, r),
    };
    pairs.sort_unstable();
    pairs
}

fn choose(points: &[f64], dim: usize, n: usize, r: f64) -> Strategy {
    if n <= 16 {
        return Strategy::BruteForce;
    }
    let mut cells = 1.0f64;
    for d in 0..dim {
        let (lo, hi) = points
            .iter()
            .skip(d)
            .step_by(dim)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        cells *= ((hi - lo) / r).max(0.0) + 1.0;
    }
    if cells <= 8.0 * n as f64 {
        Strategy::Grid
    } else {
        Strategy::KdTree
    }
}

/// Quadratic reference scan.
pub fn brute_force_pairs(points: &[f64], dim: usize, r: f64) -> Vec<(usize, usize)> {
    if dim == 0 || !(r > 0.0) {
        return Vec::new();
    }
    let n = points.len() / dim;
    let r2 = r * r;
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if dist2(points, dim, i, j) <= r2 {
                out.push((i, j));
            }
        }
    }
    out
}

/// Uniform grid keyed by `floor(x / r)` per axis.
#[derive(Debug, Clone)]
pub struct CellGrid {
    dim: usize,
    width: f64,
    cells: BTreeMap<Vec<i64>, Vec<usize>>,
}

impl CellGrid {
    pub fn build(points: &[f64], dim: usize, width: f64) -> Self {
        let mut cells: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
        for (i, p) in points.chunks(dim).enumerate() {
            let key = p.iter().map(|x| math::floor(x / width) as i64).collect();
            cells.entry(key).or_default().push(i);
        }
        CellGrid { dim, width, cells }
    }

    pub fn pairs(&self, points: &[f64], r: f64) -> Vec<(usize, usize)> {
        debug_assert!(r <= self.width);
        let r2 = r * r;
        let dim = self.dim;
        let offsets = stencil(dim);
        let mut out = Vec::new();
        let mut probe = vec![0i64; dim];
        for (key, members) in &self.cells {
            for off in &offsets {
                for d in 0..dim {
                    probe[d] = key[d] + off[d];
                }
                let Some(others) = self.cells.get(&probe) else {
                    continue;
                };
                for &i in members {
                    for &j in others {
                        if j > i && dist2(points, dim, i, j) <= r2 {
                            out.push((i, j));
                        }
                    }
                }
            }
        }
        out
    }
}

fn stencil(dim: usize) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|v| {
                (-1..=1).map(move |o| {
                    let mut w = v.clone();
                    w.push(o);
                    w
                })
            })
            .collect();
    }
    out
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf(Vec<usize>),
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Median-split k-d tree over point indices.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn build(points: &[f64], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut tree = KdTree {
            dim,
            nodes: Vec::new(),
        };
        let idx: Vec<usize> = (0..n).collect();
        tree.build_rec(points, idx);
        tree
    }

    fn build_rec(&mut self, points: &[f64], mut idx: Vec<usize>) -> usize {
        let dim = self.dim;
        if idx.len() <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf(idx));
            return self.nodes.len() - 1;
        }
        let axis = (0..dim)
            .map(|d| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = points[i * dim + d];
                    (lo.min(v), hi.max(v))
                });
                (d, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
            .0;
        idx.sort_by(|&a, &b| {
            points[a * dim + axis]
                .partial_cmp(&points[b * dim + axis])
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        let mid = idx.len() / 2;
        let value = points[idx[mid] * dim + axis];
        let right_idx = idx.split_off(mid);
        let slot = self.nodes.len();
        self.nodes.push(KdNode::Leaf(Vec::new()));
        let left = self.build_rec(points, idx);
        let right = self.build_rec(points, right_idx);
        self.nodes[slot] = KdNode::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    /// Indices within `r` of `query` (closed ball).
    pub fn within(&self, points: &[f64], query: &[f64], r: f64, out: &mut Vec<usize>) {
        if self.nodes.is_empty() {
            return;
        }
        let r2 = r * r;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match &self.nodes[n] {
                KdNode::Leaf(members) => {
                    for &j in members {
                        let p = &points[j * self.dim..(j + 1) * self.dim];
                        let d2: f64 = p.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
                        if d2 <= r2 {
                            out.push(j);
                        }
                    }
                }
                KdNode::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    // left holds coordinates <= value, right holds >= value
                    let q = query[*axis];
                    if q - r <= *value {
                        stack.push(*left);
                    }
                    if q + r >= *value {
                        stack.push(*right);
                    }
                }
            }
        }
    }

    pub fn pairs_within(&self, points: &[f64], r: f64) -> Vec<(usize, usize)> {
        let n = points.len() / self.dim;
        let mut out = Vec::new();
        let mut hits = Vec::new();
        for i in 0..n {
            hits.clear();
            self.within(points, &points[i * self.dim..(i + 1) * self.dim], r, &mut hits);
            out.extend(hits.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }
}
