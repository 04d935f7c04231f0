//! The observation temporal graph and temporal encodings.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::neighbors::radius_neighbors;

/// A slice of `steps` consecutive observations of `n_agents` agents.
///
/// `positions` are raw coordinates used for connectivity (`steps x n x pos_dim`);
/// `features` are the normalized node inputs (`steps x n x feat_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub n_agents: usize,
    pub steps: usize,
    pub pos_dim: usize,
    pub feat_dim: usize,
    pub positions: Vec<f64>,
    pub features: Vec<f64>,
}

impl Window {
    pub fn validate(&self) -> Result<()> {
        let n = self.steps * self.n_agents;
        if self.positions.len() != n * self.pos_dim || self.features.len() != n * self.feat_dim {
            return Err(Error::ShapeMismatch {
                op: "Window",
                expected: alloc::vec![self.steps, self.n_agents, self.pos_dim, self.feat_dim],
                found: alloc::vec![self.positions.len(), self.features.len()],
            });
        }
        Ok(())
    }

    pub fn positions_at(&self, t: usize) -> &[f64] {
        let w = self.n_agents * self.pos_dim;
        &self.positions[t * w..(t + 1) * w]
    }
}

/// Observation nodes `(agent, time)` joined by bidirectional spatial edges
/// inside each time slice and directed temporal edges along each agent.
///
/// Node `(i, t)` has index `t * n_agents + i`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TemporalGraph {
    pub env_id: u32,
    pub n_agents: usize,
    pub steps: usize,
    /// Unordered node pairs `(a, b)`, `a < b`, same time slice.
    pub spatial_edges: Vec<(usize, usize)>,
    /// Directed `(i, t-1) -> (i, t)` node pairs.
    pub temporal_edges: Vec<(usize, usize)>,
}

/// Directed message edges with the time offset `t' - t` of the sender.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub dt: Vec<f64>,
}

impl TemporalGraph {
    pub fn node_count(&self) -> usize {
        self.n_agents * self.steps
    }

    pub fn node(&self, agent: usize, t: usize) -> usize {
        t * self.n_agents + agent
    }

    pub fn agent_of(&self, node: usize) -> usize {
        node % self.n_agents
    }

    pub fn time_of(&self, node: usize) -> usize {
        node / self.n_agents
    }

    /// Spatial edges in both directions plus temporal edges, sorted by receiver.
    pub fn message_edges(&self) -> MessageEdges {
        let mut edges: Vec<(usize, usize, f64)> =
            Vec::with_capacity(2 * self.spatial_edges.len() + self.temporal_edges.len());
        for &(a, b) in &self.spatial_edges {
            edges.push((a, b, 0.0));
            edges.push((b, a, 0.0));
        }
        for &(src, dst) in &self.temporal_edges {
            let dt = self.time_of(src) as f64 - self.time_of(dst) as f64;
            edges.push((src, dst, dt));
        }
        edges.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
        MessageEdges {
            src: edges.iter().map(|e| e.0).collect(),
            dst: edges.iter().map(|e| e.1).collect(),
            dt: edges.iter().map(|e| e.2).collect(),
        }
    }
}

/// Build the temporal graph of a window; spatial edges come from
/// [`radius_neighbors`] on each slice's raw positions.
pub fn build_temporal_graph(window: &Window, radius: f64, env_id: u32) -> Result<TemporalGraph> {
    window.validate()?;
    if window.steps < 2 {
        return Err(Error::invalid(format!(
            "temporal graph needs at least 2 steps, got {}",
            window.steps
        )));
    }
    let n = window.n_agents;
    let mut spatial_edges = Vec::new();
    for t in 0..window.steps {
        for (i, j) in radius_neighbors(window.positions_at(t), window.pos_dim, radius) {
            spatial_edges.push((t * n + i, t * n + j));
        }
    }
    let temporal_edges = (1..window.steps)
        .flat_map(|t| (0..n).map(move |i| ((t - 1) * n + i, t * n + i)))
        .collect();
    Ok(TemporalGraph {
        env_id,
        n_agents: n,
        steps: window.steps,
        spatial_edges,
        temporal_edges,
    })
}

/// Sinusoidal encoding: entry `2i` is `sin(dt / 10000^(2i/d))`, entry `2i+1`
/// the matching cosine.
pub fn temporal_encoding(dt: f64, d: usize) -> Result<Vec<f64>> {
    if d < 2 || d % 2 != 0 {
        return Err(Error::invalid(format!(
            "temporal encoding width must be even and >= 2, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let freq = math::powf(10000.0, (2 * i) as f64 / d as f64);
        let x = dt / freq;
        out.push(math::sin(x));
        out.push(math::cos(x));
    }
    Ok(out)
}
