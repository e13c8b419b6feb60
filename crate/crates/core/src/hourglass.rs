//! Encoder-decoder hourglass over STGCN layers.
//!
//! Encoder level `ℓ`: STGCN layer on the level-`ℓ` graph, then a strided
//! temporal convolution down to level `ℓ + 1`. The bottleneck applies one
//! more STGCN layer. Decoder level `ℓ`: transposed convolution back to the
//! level-`ℓ` extent (cropped at the end), plus the level-`ℓ` encoder output
//! when skips are enabled.

use std::sync::Arc;

use crate::conv::deconv_output_len;
use crate::error::{dim_err, Result};
use crate::gcn::{stgcn_layer, LayerInput, NormalizedPair, StgcnWeights};
use crate::graph::AdjacencyPair;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HourglassShape {
    pub levels: usize,
    pub stride: usize,
    pub kernel: usize,
    pub skip: bool,
    pub decoder_gcn: bool,
}

/// Keeps timestep blocks `0, s, 2s, …` of both matrices.
pub fn subsample_adjacency(adj: &AdjacencyPair, stride: usize) -> Result<AdjacencyPair> {
    if stride == 0 {
        return Err(dim_err!("stride must be positive"));
    }
    if stride == 1 {
        return Ok(adj.clone());
    }
    let kept: Vec<usize> = (0..adj.steps).step_by(stride).collect();
    let n = adj.nodes;
    let nt = adj.flat_len();
    let rows: Vec<usize> = kept.iter().flat_map(|&t| (0..n).map(move |i| t * n + i)).collect();
    let m = rows.len();
    let mut temporal = Vec::with_capacity(m * m);
    for &r in &rows {
        let src = &adj.temporal.data()[r * nt..(r + 1) * nt];
        temporal.extend(rows.iter().map(|&c| src[c]));
    }
    Ok(AdjacencyPair {
        steps: kept.len(),
        nodes: n,
        spatial: kept.iter().map(|&t| adj.spatial[t].clone()).collect(),
        temporal: Tensor::new(&[m, m], temporal)?,
    })
}

/// Normalized adjacency for levels `0..=levels`, each level subsampled from
/// the raw graph of the level above and renormalized.
#[derive(Clone, Debug)]
pub struct LevelAdjacency {
    pub levels: Vec<NormalizedPair>,
}

impl LevelAdjacency {
    pub fn build(raw: &AdjacencyPair, levels: usize, stride: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(levels + 1);
        let mut cur = raw.clone();
        out.push(NormalizedPair::from_raw(&cur)?);
        for _ in 0..levels {
            cur = subsample_adjacency(&cur, stride)?;
            out.push(NormalizedPair::from_raw(&cur)?);
        }
        Ok(Self { levels: out })
    }

    pub fn level(&self, l: usize) -> &NormalizedPair {
        &self.levels[l]
    }
}

#[derive(Clone, Debug)]
pub struct HourglassWeights {
    pub encoder: Vec<StgcnWeights>,
    pub down: Vec<Var>,
    pub bottleneck: StgcnWeights,
    pub up: Vec<Var>,
    /// Present only when the decoder also runs STGCN layers.
    pub decoder: Vec<StgcnWeights>,
}

/// Resamples `h` (`T_from · N × d`) to `T_to` timesteps with a strided
/// convolution, padding or trimming the tail so the window count is
/// `T_to`.
fn downsample(tape: &mut Tape, h: Var, nodes: usize, t_from: usize, t_to: usize, kernel: Var, stride: usize) -> Result<Var> {
    let d = tape.value(h).cols();
    let k = tape.value(kernel).shape()[0];
    let needed = (t_to - 1) * stride + k;
    let h3 = tape.reshape(h, &[t_from, nodes, d])?;
    let h3 = if needed > t_from {
        tape.pad_end(h3, 0, needed - t_from)?
    } else if needed < t_from {
        tape.slice(h3, 0, 0, needed)?
    } else {
        h3
    };
    let y = tape.conv1d_temporal(h3, kernel, stride)?;
    let out_t = tape.value(y).shape()[0];
    if out_t != t_to {
        return Err(dim_err!("downsampling produced {out_t} steps, expected {t_to}"));
    }
    let dout = tape.value(y).cols();
    tape.reshape(y, &[t_to * nodes, dout])
}

fn upsample(tape: &mut Tape, h: Var, nodes: usize, t_from: usize, t_to: usize, kernel: Var, stride: usize) -> Result<Var> {
    let d = tape.value(h).cols();
    let k = tape.value(kernel).shape()[0];
    let produced = deconv_output_len(t_from, k, stride);
    if produced < t_to {
        return Err(dim_err!(
            "upsampling yields {produced} steps, short of {t_to}; kernel must be at least the stride"
        ));
    }
    let h3 = tape.reshape(h, &[t_from, nodes, d])?;
    let y = tape.deconv1d_temporal(h3, kernel, stride)?;
    let y = if produced > t_to { tape.slice(y, 0, 0, t_to)? } else { y };
    let dout = tape.value(y).cols();
    tape.reshape(y, &[t_to * nodes, dout])
}

/// One hourglass block. The output has the level-0 row count.
pub fn hourglass_forward(
    tape: &mut Tape,
    input: &LayerInput,
    adj: &LevelAdjacency,
    w: &HourglassWeights,
    shape: &HourglassShape,
) -> Result<Var> {
    let levels = shape.levels;
    if adj.levels.len() != levels + 1 {
        return Err(dim_err!(
            "{} adjacency levels for a {levels}-level hourglass",
            adj.levels.len()
        ));
    }
    if w.encoder.len() != levels || w.down.len() != levels || w.up.len() != levels {
        return Err(dim_err!("hourglass weights do not match {levels} levels"));
    }
    let nodes = adj.level(0).nodes;
    let mut cur = input.clone();
    let mut skips = Vec::with_capacity(levels);
    for l in 0..levels {
        let h = stgcn_layer(tape, &cur, adj.level(l), &w.encoder[l])?;
        skips.push(h);
        let down = downsample(tape, h, nodes, adj.level(l).steps, adj.level(l + 1).steps, w.down[l], shape.stride)?;
        cur = LayerInput::Dense(down);
    }
    let mut h = stgcn_layer(tape, &cur, adj.level(levels), &w.bottleneck)?;
    for l in (0..levels).rev() {
        let up = upsample(tape, h, nodes, adj.level(l + 1).steps, adj.level(l).steps, w.up[l], shape.stride)?;
        h = if shape.skip { tape.add(up, skips[l])? } else { up };
        if shape.decoder_gcn {
            h = stgcn_layer(tape, &LayerInput::Dense(h), adj.level(l), &w.decoder[l])?;
        }
    }
    Ok(h)
}

/// Sequential composition of hourglass blocks; only the first block sees
/// the (possibly grouped) raw input.
pub fn stack_forward(
    tape: &mut Tape,
    input: &LayerInput,
    adj: &LevelAdjacency,
    blocks: &[HourglassWeights],
    shape: &HourglassShape,
) -> Result<Var> {
    let mut cur = input.clone();
    let mut out = None;
    for w in blocks {
        let h = hourglass_forward(tape, &cur, adj, w, shape)?;
        cur = LayerInput::Dense(h);
        out = Some(h);
    }
    out.ok_or_else(|| dim_err!("stack needs at least one hourglass block"))
}

/// `T × N_t` matrix averaging the present nodes of each timestep.
pub fn pooling_matrix(presence_flat: &[bool], nodes: usize) -> Result<Tensor> {
    let steps = presence_flat.len() / nodes;
    let nt = presence_flat.len();
    let mut data = vec![0.0f32; steps * nt];
    for t in 0..steps {
        let present: Vec<usize> = (0..nodes).filter(|&n| presence_flat[t * nodes + n]).collect();
        for &n in &present {
            data[t * nt + t * nodes + n] = 1.0 / present.len() as f32;
        }
    }
    Tensor::new(&[steps, nt], data)
}

/// Mean-pools present nodes per timestep and maps to class scores.
/// No output nonlinearity; losses apply sigmoid or softmax.
pub fn head_forward(tape: &mut Tape, h: Var, pool: Arc<Tensor>, weight: Var, bias: Var) -> Result<Var> {
    let p = tape.constant((*pool).clone());
    let pooled = tape.matmul(p, h)?;
    let s = tape.matmul(pooled, weight)?;
    tape.add_bias(s, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, tests::toy_sequence};

    #[test]
    fn unit_stride_is_identity() {
        let seq = toy_sequence(2, 5, 2);
        let adj = build_adjacency(&seq, 2, false).unwrap();
        assert_eq!(subsample_adjacency(&adj, 1).unwrap(), adj);
    }

    #[test]
    fn surviving_steps_link_iff_span_reaches() {
        for (span, linked) in [(1, false), (2, true)] {
            let seq = toy_sequence(1, 4, span);
            let adj = build_adjacency(&seq, span, false).unwrap();
            let sub = subsample_adjacency(&adj, 2).unwrap();
            assert_eq!(sub.temporal.shape(), &[2, 2]);
            assert_eq!(sub.temporal.at(0, 1) != 0.0, linked);
            assert_eq!(sub.temporal.at(0, 0), 0.0);
        }
    }

    #[test]
    fn halves_dimensions() {
        let seq = toy_sequence(2, 4, 1);
        let adj = build_adjacency(&seq, 1, false).unwrap();
        assert_eq!(adj.flat_len(), 8);
        let sub = subsample_adjacency(&adj, 2).unwrap();
        assert_eq!(sub.flat_len(), 4);
        assert_eq!(sub.spatial.len(), 2);
        assert_eq!(sub.spatial[0].shape(), &[2, 2]);
    }

    #[test]
    fn odd_extents_keep_ceil_survivors() {
        let seq = toy_sequence(1, 7, 1);
        let adj = build_adjacency(&seq, 1, false).unwrap();
        let levels = LevelAdjacency::build(&adj, 2, 2).unwrap();
        let steps: Vec<usize> = levels.levels.iter().map(|l| l.steps).collect();
        assert_eq!(steps, vec![7, 4, 2]);
    }

    #[test]
    fn pooling_ignores_absent_nodes() {
        let p = pooling_matrix(&[true, false, false, false], 2).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
