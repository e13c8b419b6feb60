//! Central finite-difference checks of tape gradients.
//!
//! The checked function's output is reduced to a scalar by a fixed random
//! projection. A coordinate agrees when its relative error is within
//! `rel`; a check passes when at least `min_rel_fraction` of coordinates
//! agree that way and every other coordinate is within `abs`. Coordinates
//! whose step flips the sign of any ReLU input are skipped and counted.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gcn::{
    harmonize_projection, stgcn_layer, stgcn_layer_grid, subtract_mean, LayerInput, NormalizedPair, RowGroup,
    StgcnWeights,
};
use crate::graph::{build_adjacency, FeatureCluster, LabelMode, Labels, NodeTrack, NodeType, StgSequence};
use crate::hourglass::{head_forward, pooling_matrix};
use crate::model::{Harmonization, ModelConfig, StackedStgcn, TypeBinding};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::sequence_loss;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub step: f32,
    pub rel: f64,
    pub abs: f64,
    pub min_rel_fraction: f64,
    /// Probe at most this many random coordinates per input tensor.
    pub max_coords: Option<usize>,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel: 1e-2,
            abs: 1e-3,
            min_rel_fraction: 0.95,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub coords: usize,
    pub rel_ok: usize,
    /// Coordinates whose step moved some ReLU input across zero.
    pub kinked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("positive extents")
}

fn projected(out: &Tensor, proj: &Tensor) -> f64 {
    out.data().iter().zip(proj.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Checks `build` at `inputs`, all of which are differentiated.
pub fn check(name: &str, inputs: &[Tensor], build: &Build, tol: &Tolerance, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let eval = |vals: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (mut tape, vars, out) = eval(inputs)?;
    let proj = uniform(&mut rng, tape.value(out).shape());
    let loss = tape.weighted_sum(out, &proj)?;
    let grads = tape.backward(loss)?;

    let (mut coords, mut rel_ok, mut kinked, mut max_abs, mut max_rel, mut abs_fail) = (0, 0, 0, 0.0f64, 0.0f64, false);
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let picks: Vec<usize> = match tol.max_coords {
            Some(m) if m < x.len() => {
                let mut p = sample(&mut rng, x.len(), m).into_vec();
                p.sort_unstable();
                p
            }
            _ => (0..x.len()).collect(),
        };
        for j in picks {
            let side = |sign: f32| -> Result<(f64, Vec<bool>)> {
                let mut vals = inputs.to_vec();
                let mut d = vals[i].data().to_vec();
                d[j] += sign * tol.step;
                vals[i] = Tensor::new(x.shape(), d)?;
                let (tape, _, out) = eval(&vals)?;
                Ok((projected(tape.value(out), &proj), tape.relu_pattern()))
            };
            let ((up, up_kinks), (down, down_kinks)) = (side(1.0)?, side(-1.0)?);
            if up_kinks != down_kinks {
                kinked += 1;
                continue;
            }
            // the f32 sum x + step is rounded, so divide by the step actually taken
            let x0 = x.data()[j];
            let numeric = (up - down) / ((x0 + tol.step) as f64 - (x0 - tol.step) as f64);
            let a = analytic.data()[j] as f64;
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { abs / scale };
            coords += 1;
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            if rel <= tol.rel {
                rel_ok += 1;
            } else if abs > tol.abs {
                abs_fail = true;
            }
        }
    }
    let passed = !abs_fail && rel_ok as f64 >= tol.min_rel_fraction * coords as f64;
    Ok(CheckReport {
        name: name.to_string(),
        coords,
        rel_ok,
        kinked,
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        passed,
    })
}

/// Random sequence fitting `cfg`: tracks cycle through the type bindings
/// (projection) or clusters (per-cluster), with one absent point.
pub fn random_instance(cfg: &ModelConfig, nodes: usize, steps: usize, seed: u64) -> Result<StgSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots: Vec<(NodeType, usize)> = match cfg.harmonization {
        Harmonization::Projection => cfg.node_types.iter().map(|b| (b.node_type, b.cluster)).collect(),
        Harmonization::PerCluster => (0..cfg.clusters.len()).map(|c| (NodeType::Other, c)).collect(),
    };
    let nodes = nodes.max(slots.len());
    let mut tracks = Vec::with_capacity(nodes);
    for n in 0..nodes {
        let (node_type, cluster) = slots[n % slots.len()];
        let len = cfg.clusters[cluster];
        let mut presence = vec![true; steps];
        if n == nodes - 1 && nodes > 1 && steps > 1 {
            presence[1] = false;
        }
        let mut features = uniform(&mut rng, &[steps, len]).into_data();
        for (t, &p) in presence.iter().enumerate() {
            if !p {
                features[t * len..(t + 1) * len].fill(0.0);
            }
        }
        tracks.push(NodeTrack {
            track_id: format!("n{n}"),
            node_type,
            cluster,
            presence,
            features: Tensor::new(&[steps, len], features)?,
        });
    }
    let labels = match cfg.mode {
        LabelMode::Single => Labels::Single((0..steps).map(|_| rng.random_range(0..cfg.num_classes)).collect()),
        LabelMode::Multi => Labels::Multi(Tensor::new(
            &[steps, cfg.num_classes],
            (0..steps * cfg.num_classes).map(|_| rng.random_range(0..2) as f32).collect(),
        )?),
    };
    let mut seq = StgSequence {
        num_steps: steps,
        num_classes: cfg.num_classes,
        clusters: cfg
            .clusters
            .iter()
            .enumerate()
            .map(|(id, &feature_len)| FeatureCluster { id, feature_len })
            .collect(),
        tracks,
        spatial_edges: Vec::new(),
        temporal_edges: Vec::new(),
        labels,
        label_mask: (0..steps).map(|t| t + 1 != steps).collect(),
    };
    seq.spatial_edges = seq.fully_connected_spatial_edges(0.1);
    seq.temporal_edges = seq.chain_temporal_edges(cfg.temporal_span, 1.0);
    Ok(seq)
}

/// Checks the full model: every parameter, through projected scores and
/// through the training loss.
pub fn check_model(cfg: &ModelConfig, nodes: usize, steps: usize, tol: &Tolerance, seed: u64) -> Result<Vec<CheckReport>> {
    let model = StackedStgcn::new(cfg.clone(), seed)?;
    let seq = random_instance(cfg, nodes, steps, seed.wrapping_add(1))?;
    let input = model.prepare(&seq)?;
    let names: Vec<String> = model.params.names().cloned().collect();
    // Parameters are redrawn in [-1, 1] like every other input: the
    // initializer's small scale leaves deep gradients under f32 noise, and
    // zero biases put absent rows exactly on the ReLU kink.
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let values: Vec<Tensor> = model.params.iter().map(|(_, t)| uniform(&mut rng, t.shape())).collect();
    let run = |tape: &mut Tape, vars: &[Var], with_loss: bool| -> Result<Var> {
        let mut m = model.clone();
        for (n, v) in names.iter().zip(vars) {
            m.params.insert(n.clone(), tape.value(*v).clone());
        }
        let bound = crate::model::Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let scores = m.forward(tape, &bound, &input)?;
        if with_loss {
            sequence_loss(tape, scores, &seq)
        } else {
            Ok(scores)
        }
    };
    Ok(vec![
        check("model.scores", &values, &|t, v| run(t, v, false), tol, seed)?,
        check("model.loss", &values, &|t, v| run(t, v, true), tol, seed + 1)?,
    ])
}

/// The tiny two-level, two-block model of the gradient suite.
pub fn tiny_model_config(harmonization: Harmonization, mode: LabelMode) -> ModelConfig {
    ModelConfig {
        clusters: vec![4, 3],
        node_types: vec![
            TypeBinding { node_type: NodeType::Actor, cluster: 0 },
            TypeBinding { node_type: NodeType::Object, cluster: 1 },
        ],
        d_model: 4,
        d_spatial: None,
        harmonization,
        temporal_span: 2,
        levels: 2,
        stride: 2,
        conv_kernel: None,
        stack_depth: 2,
        skip: true,
        decoder_gcn: false,
        bias: true,
        subtract_mean: true,
        mode,
        num_classes: 3,
    }
}

/// Every differentiable tape operation and layer on random inputs in
/// `[-1, 1]`.
pub fn op_suite(tol: &Tolerance, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| uniform(&mut rng, shape);
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, f: &Build| -> Result<()> {
        out.push(check(name, &inputs, f, tol, seed)?);
        Ok(())
    };
    run("add", vec![r(&[3, 4]), r(&[3, 4])], &|t, v| t.add(v[0], v[1]))?;
    run("sub", vec![r(&[3, 4]), r(&[3, 4])], &|t, v| t.sub(v[0], v[1]))?;
    run("scale", vec![r(&[5])], &|t, v| t.scale(v[0], -1.7))?;
    run("mul", vec![r(&[2, 3, 2]), r(&[2, 3, 2])], &|t, v| t.mul(v[0], v[1]))?;
    run("matmul", vec![r(&[3, 4]), r(&[4, 2])], &|t, v| t.matmul(v[0], v[1]))?;
    run("relu", vec![r(&[4, 5])], &|t, v| t.relu(v[0]))?;
    run("sigmoid", vec![r(&[4, 5])], &|t, v| t.sigmoid(v[0]))?;
    run("sum", vec![r(&[3, 3])], &|t, v| t.sum(v[0]))?;
    for axis in 0..3 {
        run(&format!("mean_axis{axis}"), vec![r(&[2, 3, 4])], &|t, v| t.mean_axis(v[0], axis))?;
    }
    for axis in 0..2 {
        run(&format!("concat{axis}"), vec![r(&[2, 3]), r(&[2, 3])], &|t, v| t.concat(&[v[0], v[1]], axis))?;
    }
    run("slice", vec![r(&[5, 2, 3])], &|t, v| t.slice(v[0], 0, 1, 3))?;
    run("pad_end", vec![r(&[3, 2, 2])], &|t, v| t.pad_end(v[0], 0, 2))?;
    run("reshape", vec![r(&[2, 6])], &|t, v| t.reshape(v[0], &[3, 2, 2]))?;
    run("add_bias", vec![r(&[4, 3]), r(&[3])], &|t, v| t.add_bias(v[0], v[1]))?;
    let rows = Arc::new(vec![4, 0, 2]);
    run("scatter_rows", vec![r(&[3, 2])], &|t, v| t.scatter_rows(v[0], rows.clone(), 5))?;
    run("gather_rows", vec![r(&[5, 2])], &|t, v| t.gather_rows(v[0], rows.clone()))?;
    let blocks = Arc::new(vec![r(&[2, 2]), r(&[2, 2]), r(&[2, 2])]);
    run("block_diag_matmul", vec![r(&[6, 3])], &|t, v| t.block_diag_matmul(blocks.clone(), v[0]))?;
    let groups = Arc::new(vec![vec![0, 1, 3], vec![4, 5]]);
    run("center_rows", vec![r(&[6, 2])], &|t, v| t.center_rows(v[0], groups.clone()))?;
    run("conv1d_temporal", vec![r(&[7, 2, 3]), r(&[3, 3, 2])], &|t, v| t.conv1d_temporal(v[0], v[1], 2))?;
    run("deconv1d_temporal", vec![r(&[3, 2, 3]), r(&[3, 3, 2])], &|t, v| t.deconv1d_temporal(v[0], v[1], 2))?;
    let targets = Tensor::new(&[4, 3], vec![1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 1., 0.])?;
    let mask = vec![true, false, true, true];
    run("masked_bce_loss", vec![r(&[4, 3])], &|t, v| t.masked_bce_loss(v[0], &targets, &mask))?;
    run("masked_ce_loss", vec![r(&[4, 3])], &|t, v| t.masked_ce_loss(v[0], &[2, 0, 1, 1], &mask))?;
    let w = r(&[3, 2]);
    run("weighted_sum", vec![r(&[3, 2])], &|t, v| t.weighted_sum(v[0], &w))?;

    let cfg = tiny_model_config(Harmonization::PerCluster, LabelMode::Single);
    let seq = random_instance(&cfg, 3, 4, seed)?;
    let adj = NormalizedPair::from_raw(&build_adjacency(&seq, 2, true)?)?;
    let nt = adj.flat_len();
    let dense = |v: &[Var]| StgcnWeights {
        spatial: vec![v[1]],
        temporal: v[2],
        bias: Some(v[3]),
    };
    let layer_inputs = vec![r(&[nt, 3]), r(&[3, 4]), r(&[4, 2]), r(&[2])];
    run("stgcn_layer", layer_inputs.clone(), &|t, v| {
        stgcn_layer(t, &LayerInput::Dense(v[0]), &adj, &dense(v))
    })?;
    run("stgcn_layer_grid", layer_inputs, &|t, v| {
        stgcn_layer_grid(t, &LayerInput::Dense(v[0]), &adj, &dense(v))
    })?;
    let rows_a = Arc::new(vec![0, 3, 6, 9]);
    let rows_b = Arc::new(vec![1, 2, 5, 8, 11]);
    run(
        "stgcn_layer_grouped",
        vec![r(&[4, 4]), r(&[5, 3]), r(&[4, 3]), r(&[3, 3]), r(&[3, 2])],
        &|t, v| {
            let input = LayerInput::Grouped {
                groups: vec![
                    RowGroup { rows: rows_a.clone(), features: v[0] },
                    RowGroup { rows: rows_b.clone(), features: v[1] },
                ],
                total_rows: nt,
            };
            let w = StgcnWeights {
                spatial: vec![v[2], v[3]],
                temporal: v[4],
                bias: None,
            };
            stgcn_layer(t, &input, &adj, &w)
        },
    )?;
    run("harmonize_projection", vec![r(&[4, 4]), r(&[5, 3]), r(&[4, 2]), r(&[3, 2])], &|t, v| {
        let groups = vec![
            (NodeType::Actor, RowGroup { rows: rows_a.clone(), features: v[0] }),
            (NodeType::Object, RowGroup { rows: rows_b.clone(), features: v[1] }),
        ];
        let kernels = [(NodeType::Actor, v[2]), (NodeType::Object, v[3])].into_iter().collect();
        harmonize_projection(t, &groups, &kernels, nt, 2)
    })?;
    let presence = seq.presence_flat();
    run("subtract_mean", vec![r(&[nt, 2])], &|t, v| subtract_mean(t, v[0], &presence, 3))?;
    let pool = Arc::new(pooling_matrix(&presence, 3)?);
    run("head", vec![r(&[nt, 4]), r(&[4, 3]), r(&[3])], &|t, v| {
        head_forward(t, v[0], pool.clone(), v[1], v[2])
    })?;
    Ok(out)
}

/// Op suite plus the tiny model in both harmonization modes and both
/// label modes.
pub fn full_suite(tol: &Tolerance, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = op_suite(tol, seed)?;
    for (h, m) in [
        (Harmonization::Projection, LabelMode::Single),
        (Harmonization::PerCluster, LabelMode::Multi),
    ] {
        for mut rep in check_model(&tiny_model_config(h, m), 3, 8, tol, seed)? {
            rep.name = format!("{}[{h:?},{m:?}]", rep.name);
            out.push(rep);
        }
    }
    Ok(out)
}
