//! Graph convolution building blocks.
//!
//! The layer computes a spatial propagation within each timestep followed by
//! a temporal propagation over arbitrary temporal links:
//!
//! ```text
//! H_s     = N(A_s) · H · W_s
//! H_next  = relu(N(A_t) · H_s · W_t)
//! N(A)    = D̂^{-1/2} (I + A) D̂^{-1/2},  D̂_ii = Σ_j (I + A)_ij
//! ```
//!
//! Nodes whose feature vectors differ in length are fed as row groups, each
//! with its own spatial weight, and scattered into a shared `N_t × d` matrix
//! before propagation.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{dim_err, invalid, Error, Result};
use crate::graph::{AdjacencyPair, NodeType};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `D̂^{-1/2}(I + A)D̂^{-1/2}` for a symmetric nonnegative `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency(Tensor);

impl NormalizedAdjacency {
    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

pub fn normalize_adjacency(a: &Tensor) -> Result<NormalizedAdjacency> {
    a.expect_rank(2, "adjacency")?;
    let n = a.rows();
    if a.cols() != n {
        return Err(dim_err!("adjacency must be square, got {:?}", a.shape()));
    }
    for i in 0..n {
        for j in 0..n {
            let v = a.at(i, j);
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid!("adjacency entry ({i}, {j}) = {v} is negative or non-finite"));
            }
            let w = a.at(j, i);
            if (v - w).abs() > 1e-6 * (1.0 + v.abs().max(w.abs())) {
                return Err(invalid!("adjacency is not symmetric at ({i}, {j}): {v} vs {w}"));
            }
        }
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| 1.0 + a.row(i).iter().map(|&v| v as f64).sum::<f64>())
        .collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut out = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let hat = a.at(i, j) as f64 + if i == j { 1.0 } else { 0.0 };
            if hat != 0.0 {
                out[i * n + j] = (hat * inv_sqrt[i] * inv_sqrt[j]) as f32;
            }
        }
    }
    Ok(NormalizedAdjacency(Tensor::new(&[n, n], out)?))
}

/// Normalized spatial blocks and temporal matrix at one resolution.
#[derive(Clone, Debug)]
pub struct NormalizedPair {
    pub steps: usize,
    pub nodes: usize,
    pub spatial: Arc<Vec<Tensor>>,
    pub temporal: Tensor,
}

impl NormalizedPair {
    pub fn from_raw(adj: &AdjacencyPair) -> Result<Self> {
        let spatial = adj
            .spatial
            .iter()
            .map(|b| normalize_adjacency(b).map(NormalizedAdjacency::into_tensor))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            steps: adj.steps,
            nodes: adj.nodes,
            spatial: Arc::new(spatial),
            temporal: normalize_adjacency(&adj.temporal)?.into_tensor(),
        })
    }

    pub fn flat_len(&self) -> usize {
        self.steps * self.nodes
    }
}

/// Rows of the flattened node matrix that share one input weight.
#[derive(Clone, Debug)]
pub struct RowGroup {
    pub rows: Arc<Vec<usize>>,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub enum LayerInput {
    /// `N_t × d` features shared by every node.
    Dense(Var),
    /// Per-cluster features; group `i` is projected by spatial weight `i`.
    Grouped { groups: Vec<RowGroup>, total_rows: usize },
}

#[derive(Clone, Debug)]
pub struct StgcnWeights {
    /// One `d_in × d_spatial` matrix per input group (one for dense input).
    pub spatial: Vec<Var>,
    /// `d_spatial × d_out`.
    pub temporal: Var,
    pub bias: Option<Var>,
}

/// `H · W_s`, evaluated group by group and scattered into place.
fn project(tape: &mut Tape, input: &LayerInput, spatial: &[Var]) -> Result<Var> {
    match input {
        LayerInput::Dense(h) => {
            let [w] = spatial else {
                return Err(dim_err!("dense input needs exactly one spatial weight, got {}", spatial.len()));
            };
            tape.matmul(*h, *w)
        }
        LayerInput::Grouped { groups, total_rows } => {
            if groups.len() != spatial.len() {
                return Err(dim_err!(
                    "{} input clusters but {} spatial weights",
                    groups.len(),
                    spatial.len()
                ));
            }
            let width = spatial
                .first()
                .map(|&w| tape.value(w).cols())
                .ok_or_else(|| dim_err!("no spatial weights"))?;
            scatter_sum(tape, groups.iter().zip(spatial).map(|(g, &w)| (g, w)), *total_rows, width)
        }
    }
}

fn scatter_sum<'a>(
    tape: &mut Tape,
    parts: impl Iterator<Item = (&'a RowGroup, Var)>,
    total_rows: usize,
    width: usize,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (g, w) in parts {
        if g.rows.is_empty() {
            continue;
        }
        if tape.value(w).cols() != width {
            return Err(dim_err!("projection widths differ: {:?}", tape.value(w).shape()));
        }
        let p = tape.matmul(g.features, w)?;
        let s = tape.scatter_rows(p, g.rows.clone(), total_rows)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(match acc {
        Some(a) => a,
        None => tape.constant(Tensor::zeros(&[total_rows, width])),
    })
}

fn finish(tape: &mut Tape, x: Var, bias: Option<Var>) -> Result<Var> {
    let x = match bias {
        Some(b) => tape.add_bias(x, b)?,
        None => x,
    };
    tape.relu(x)
}

/// Generalized STGCN layer: spatial propagation per timestep, then
/// temporal propagation and ReLU.
pub fn stgcn_layer(tape: &mut Tape, input: &LayerInput, adj: &NormalizedPair, w: &StgcnWeights) -> Result<Var> {
    let p = project(tape, input, &w.spatial)?;
    if tape.value(p).rows() != adj.flat_len() {
        return Err(dim_err!(
            "input has {} rows, adjacency expects {}",
            tape.value(p).rows(),
            adj.flat_len()
        ));
    }
    let hs = tape.block_diag_matmul(adj.spatial.clone(), p)?;
    let hw = tape.matmul(hs, w.temporal)?;
    let at = tape.constant(adj.temporal.clone());
    let ht = tape.matmul(at, hw)?;
    finish(tape, ht, w.bias)
}

/// The grid-temporal degenerate form `relu(N(A_s) · H · W_s · W_t)`, where
/// temporal mixing is left to ordinary convolutions.
pub fn stgcn_layer_grid(tape: &mut Tape, input: &LayerInput, adj: &NormalizedPair, w: &StgcnWeights) -> Result<Var> {
    let p = project(tape, input, &w.spatial)?;
    if tape.value(p).rows() != adj.flat_len() {
        return Err(dim_err!(
            "input has {} rows, adjacency expects {}",
            tape.value(p).rows(),
            adj.flat_len()
        ));
    }
    let hs = tape.block_diag_matmul(adj.spatial.clone(), p)?;
    let hw = tape.matmul(hs, w.temporal)?;
    finish(tape, hw, w.bias)
}

/// Maps each node type's features to a common width with a per-type
/// `d_type × d_model` kernel (a 1×1 convolution). Rows not covered by any
/// group stay zero.
pub fn harmonize_projection(
    tape: &mut Tape,
    groups: &[(NodeType, RowGroup)],
    kernels: &BTreeMap<NodeType, Var>,
    total_rows: usize,
    d_model: usize,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(groups.len());
    for (ty, g) in groups {
        if g.rows.is_empty() {
            continue;
        }
        let k = *kernels
            .get(ty)
            .ok_or_else(|| Error::Config(format!("no projection kernel for node type {ty:?}")))?;
        parts.push((g, k));
    }
    scatter_sum(tape, parts.into_iter(), total_rows, d_model)
}

/// Per-timestep row groups of present nodes, for mean subtraction.
pub fn timestep_groups(presence_flat: &[bool], nodes: usize) -> Vec<Vec<usize>> {
    presence_flat
        .chunks(nodes)
        .enumerate()
        .map(|(t, chunk)| {
            chunk
                .iter()
                .enumerate()
                .filter(|(_, &p)| p)
                .map(|(n, _)| t * nodes + n)
                .collect()
        })
        .collect()
}

/// Subtracts, per timestep and channel, the mean over present nodes.
/// Absent rows come out zero.
pub fn subtract_mean(tape: &mut Tape, h: Var, presence_flat: &[bool], nodes: usize) -> Result<Var> {
    if tape.value(h).rows() != presence_flat.len() {
        return Err(dim_err!(
            "{} rows vs {} presence flags",
            tape.value(h).rows(),
            presence_flat.len()
        ));
    }
    tape.center_rows(h, Arc::new(timestep_groups(presence_flat, nodes)))
}
