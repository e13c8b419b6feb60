//! The stacked hourglass STGCN model: configuration, parameters, input
//! preparation and the forward pass.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gcn::{harmonize_projection, subtract_mean, LayerInput, RowGroup, StgcnWeights};
use crate::graph::{build_adjacency, LabelMode, NodeType, StgSequence};
use crate::hourglass::{head_forward, pooling_matrix, stack_forward, HourglassShape, HourglassWeights, LevelAdjacency};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How nodes with different feature lengths reach a common width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Harmonization {
    /// A per-type 1×1 projection to `d_model` ahead of the first layer.
    Projection,
    /// One spatial weight per feature cluster in the first layer;
    /// cross-cluster spatial edges are carried by the temporal adjacency.
    PerCluster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeBinding {
    pub node_type: NodeType,
    pub cluster: usize,
}

fn default_d_model() -> usize {
    512
}
fn default_span() -> usize {
    3
}
fn default_stride() -> usize {
    2
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature length of each cluster, indexed by cluster id.
    pub clusters: Vec<usize>,
    /// Node types and the cluster whose feature length they carry; one
    /// projection kernel is created per entry.
    #[serde(default)]
    pub node_types: Vec<TypeBinding>,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Width of the spatial step output; defaults to `d_model`.
    #[serde(default)]
    pub d_spatial: Option<usize>,
    pub harmonization: Harmonization,
    #[serde(default = "default_span")]
    pub temporal_span: usize,
    pub levels: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Temporal kernel length of the strided (de)convolutions; defaults to
    /// the stride.
    #[serde(default)]
    pub conv_kernel: Option<usize>,
    pub stack_depth: usize,
    #[serde(default = "default_true")]
    pub skip: bool,
    #[serde(default)]
    pub decoder_gcn: bool,
    #[serde(default)]
    pub bias: bool,
    #[serde(default)]
    pub subtract_mean: bool,
    pub mode: LabelMode,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn d_spatial(&self) -> usize {
        self.d_spatial.unwrap_or(self.d_model)
    }

    pub fn kernel(&self) -> usize {
        self.conv_kernel.unwrap_or(self.stride)
    }

    pub fn cross_cluster_in_temporal(&self) -> bool {
        self.harmonization == Harmonization::PerCluster
    }

    pub fn hourglass_shape(&self) -> HourglassShape {
        HourglassShape {
            levels: self.levels,
            stride: self.stride,
            kernel: self.kernel(),
            skip: self.skip,
            decoder_gcn: self.decoder_gcn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clusters.is_empty() || self.clusters.contains(&0) {
            return bad(format!("cluster feature lengths must be positive: {:?}", self.clusters));
        }
        if self.d_model == 0 || self.d_spatial() == 0 {
            return bad("model widths must be positive".into());
        }
        if self.temporal_span == 0 {
            return bad("temporal span must be at least 1".into());
        }
        if self.stride == 0 || self.kernel() < self.stride {
            return bad(format!(
                "need stride >= 1 and kernel >= stride, got stride {} kernel {}",
                self.stride,
                self.kernel()
            ));
        }
        if self.stack_depth == 0 {
            return bad("stack depth must be at least 1".into());
        }
        if self.num_classes == 0 {
            return bad("at least one class is required".into());
        }
        let mut seen = Vec::new();
        for b in &self.node_types {
            if b.cluster >= self.clusters.len() {
                return bad(format!("node type {:?} references missing cluster {}", b.node_type, b.cluster));
            }
            if seen.contains(&b.node_type) {
                return bad(format!("node type {:?} bound twice", b.node_type));
            }
            seen.push(b.node_type);
        }
        if self.harmonization == Harmonization::Projection && self.node_types.is_empty() {
            return bad("projection harmonization needs node type bindings".into());
        }
        Ok(())
    }

    /// Checks that a sequence can be fed to a model with this config.
    pub fn check_sequence(&self, seq: &StgSequence) -> Result<()> {
        if seq.num_classes != self.num_classes {
            return Err(invalid!(
                "sequence has {} classes, model expects {}",
                seq.num_classes,
                self.num_classes
            ));
        }
        if seq.mode() != self.mode {
            return Err(invalid!("sequence label mode {:?} vs model {:?}", seq.mode(), self.mode));
        }
        for tr in &seq.tracks {
            let len = tr.feature_len();
            if self.clusters.get(tr.cluster) != Some(&len) {
                return Err(invalid!(
                    "track {} (cluster {}, length {len}) does not match model clusters {:?}",
                    tr.track_id,
                    tr.cluster,
                    self.clusters
                ));
            }
            if self.harmonization == Harmonization::Projection {
                match self.node_types.iter().find(|b| b.node_type == tr.node_type) {
                    Some(b) if self.clusters[b.cluster] == len => {}
                    Some(_) => {
                        return Err(invalid!(
                            "track {} of type {:?} has length {len}, kernel expects another",
                            tr.track_id,
                            tr.node_type
                        ))
                    }
                    None => {
                        return Err(Error::Config(format!(
                            "no projection kernel for node type {:?}",
                            tr.node_type
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new(map: BTreeMap<String, Tensor>) -> Self {
        Self(map)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.0.insert(name, t);
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.0.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect())
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self(vars.into_iter().collect())
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

/// Row group of the raw input, keyed by cluster id or node type.
#[derive(Clone, Debug)]
pub struct InputGroup {
    pub node_type: Option<NodeType>,
    pub rows: Arc<Vec<usize>>,
    /// `rows × feature_len`; a single zero row when `rows` is empty.
    pub features: Tensor,
}

/// Everything the forward pass needs from one sequence.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub steps: usize,
    pub nodes: usize,
    pub groups: Vec<InputGroup>,
    pub adjacency: LevelAdjacency,
    pub presence: Vec<bool>,
    pub pool: Arc<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackedStgcn {
    pub config: ModelConfig,
    pub params: Params,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

impl StackedStgcn {
    /// Fresh model with fan-in uniform initialization:
    /// `U(-1/√fan_in, 1/√fan_in)` for weights, zeros for biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for spec in Self::param_specs(&config) {
            let len = spec.shape.iter().product();
            let data = if spec.fan_in == 0 {
                vec![0.0; len]
            } else {
                let bound = 1.0 / (spec.fan_in as f32).sqrt();
                (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            map.insert(spec.name, Tensor::new(&spec.shape, data)?);
        }
        Ok(Self { config, params: Params(map) })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let specs = Self::param_specs(&config);
        if specs.len() != params.len() {
            return Err(invalid!(
                "config describes {} parameters, got {}",
                specs.len(),
                params.len()
            ));
        }
        for s in &specs {
            match params.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => return Err(invalid!("parameter {} has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)),
                None => return Err(invalid!("parameter {} missing", s.name)),
            }
        }
        Ok(Self { config, params })
    }

    fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let d = cfg.d_model;
        let ds = cfg.d_spatial();
        let k = cfg.kernel();
        let mut push = |name: String, shape: Vec<usize>, fan_in: usize| specs.push(ParamSpec { name, shape, fan_in });
        if cfg.harmonization == Harmonization::Projection {
            for b in &cfg.node_types {
                let din = cfg.clusters[b.cluster];
                push(format!("proj.{}", type_key(b.node_type)), vec![din, d], din);
            }
        }
        let gcn = |prefix: String, first: bool, push: &mut dyn FnMut(String, Vec<usize>, usize)| {
            if first && cfg.harmonization == Harmonization::PerCluster {
                for (c, &len) in cfg.clusters.iter().enumerate() {
                    push(format!("{prefix}.ws.c{c}"), vec![len, ds], len);
                }
            } else {
                push(format!("{prefix}.ws"), vec![d, ds], d);
            }
            push(format!("{prefix}.wt"), vec![ds, d], ds);
            if cfg.bias {
                push(format!("{prefix}.bias"), vec![d], 0);
            }
        };
        for b in 0..cfg.stack_depth {
            for l in 0..cfg.levels {
                gcn(format!("b{b}.enc{l}"), b == 0 && l == 0, &mut push);
                push(format!("b{b}.down{l}"), vec![k, d, d], k * d);
                push(format!("b{b}.up{l}"), vec![k, d, d], k * d);
                if cfg.decoder_gcn {
                    gcn(format!("b{b}.dec{l}"), false, &mut push);
                }
            }
            gcn(format!("b{b}.mid"), b == 0 && cfg.levels == 0, &mut push);
        }
        push("head.w".into(), vec![d, cfg.num_classes], d);
        push("head.b".into(), vec![cfg.num_classes], 0);
        specs
    }

    /// Builds adjacency levels, pooling and input groups for `seq`.
    pub fn prepare(&self, seq: &StgSequence) -> Result<PreparedInput> {
        let cfg = &self.config;
        cfg.check_sequence(seq)?;
        let raw = build_adjacency(seq, cfg.temporal_span, cfg.cross_cluster_in_temporal())?;
        let adjacency = LevelAdjacency::build(&raw, cfg.levels, cfg.stride)?;
        let nodes = seq.num_nodes();
        let presence = seq.presence_flat();
        let pool = Arc::new(pooling_matrix(&presence, nodes)?);

        let keys: Vec<(Option<NodeType>, usize)> = match cfg.harmonization {
            Harmonization::PerCluster => (0..cfg.clusters.len()).map(|c| (None, c)).collect(),
            Harmonization::Projection => cfg.node_types.iter().map(|b| (Some(b.node_type), b.cluster)).collect(),
        };
        let mut groups = Vec::with_capacity(keys.len());
        for (ty, cluster) in keys {
            let len = cfg.clusters[cluster];
            let member = |n: usize| match ty {
                Some(ty) => seq.tracks[n].node_type == ty,
                None => seq.tracks[n].cluster == cluster,
            };
            let mut rows = Vec::new();
            let mut data = Vec::new();
            for t in 0..seq.num_steps {
                let mut step_rows = Vec::new();
                for n in (0..nodes).filter(|&n| member(n) && seq.is_present(n, t)) {
                    rows.push(t * nodes + n);
                    step_rows.push(n);
                }
                let start = data.len();
                for &n in &step_rows {
                    data.extend_from_slice(seq.tracks[n].features.row(t));
                }
                if cfg.subtract_mean && ty.is_none() && !step_rows.is_empty() {
                    center_block(&mut data[start..], len);
                }
            }
            let features = if rows.is_empty() {
                Tensor::zeros(&[1, len])
            } else {
                Tensor::new(&[rows.len(), len], data)?
            };
            groups.push(InputGroup {
                node_type: ty,
                rows: Arc::new(rows),
                features,
            });
        }
        Ok(PreparedInput {
            steps: seq.num_steps,
            nodes,
            groups,
            adjacency,
            presence,
            pool,
        })
    }

    fn layer_weights(&self, bound: &Bound, prefix: &str, first: bool) -> Result<StgcnWeights> {
        let cfg = &self.config;
        let spatial = if first && cfg.harmonization == Harmonization::PerCluster {
            (0..cfg.clusters.len())
                .map(|c| bound.var(&format!("{prefix}.ws.c{c}")))
                .collect::<Result<_>>()?
        } else {
            vec![bound.var(&format!("{prefix}.ws"))?]
        };
        Ok(StgcnWeights {
            spatial,
            temporal: bound.var(&format!("{prefix}.wt"))?,
            bias: if cfg.bias { Some(bound.var(&format!("{prefix}.bias"))?) } else { None },
        })
    }

    fn block_weights(&self, bound: &Bound, b: usize) -> Result<HourglassWeights> {
        let cfg = &self.config;
        let mut w = HourglassWeights {
            encoder: Vec::new(),
            down: Vec::new(),
            bottleneck: self.layer_weights(bound, &format!("b{b}.mid"), b == 0 && cfg.levels == 0)?,
            up: Vec::new(),
            decoder: Vec::new(),
        };
        for l in 0..cfg.levels {
            w.encoder.push(self.layer_weights(bound, &format!("b{b}.enc{l}"), b == 0 && l == 0)?);
            w.down.push(bound.var(&format!("b{b}.down{l}"))?);
            w.up.push(bound.var(&format!("b{b}.up{l}"))?);
            if cfg.decoder_gcn {
                w.decoder.push(self.layer_weights(bound, &format!("b{b}.dec{l}"), false)?);
            }
        }
        Ok(w)
    }

    /// Class scores `T × C` for a prepared input.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: &PreparedInput) -> Result<Var> {
        let cfg = &self.config;
        let total_rows = input.steps * input.nodes;
        let groups: Vec<(Option<NodeType>, RowGroup)> = input
            .groups
            .iter()
            .map(|g| {
                let features = tape.constant(g.features.clone());
                (g.node_type, RowGroup { rows: g.rows.clone(), features })
            })
            .collect();
        let layer_input = match cfg.harmonization {
            Harmonization::PerCluster => LayerInput::Grouped {
                groups: groups.into_iter().map(|(_, g)| g).collect(),
                total_rows,
            },
            Harmonization::Projection => {
                let mut kernels = BTreeMap::new();
                for b in &cfg.node_types {
                    kernels.insert(b.node_type, bound.var(&format!("proj.{}", type_key(b.node_type)))?);
                }
                let typed: Vec<(NodeType, RowGroup)> = groups
                    .into_iter()
                    .map(|(ty, g)| (ty.expect("projection groups are typed"), g))
                    .collect();
                let mut h = harmonize_projection(tape, &typed, &kernels, total_rows, cfg.d_model)?;
                if cfg.subtract_mean {
                    h = subtract_mean(tape, h, &input.presence, input.nodes)?;
                }
                LayerInput::Dense(h)
            }
        };
        let blocks = (0..cfg.stack_depth)
            .map(|b| self.block_weights(bound, b))
            .collect::<Result<Vec<_>>>()?;
        let h = stack_forward(tape, &layer_input, &input.adjacency, &blocks, &cfg.hourglass_shape())?;
        head_forward(tape, h, input.pool.clone(), bound.var("head.w")?, bound.var("head.b")?)
    }

    /// Scores for one sequence, without keeping the tape.
    pub fn predict(&self, seq: &StgSequence) -> Result<Tensor> {
        let input = self.prepare(seq)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, &input)?;
        Ok(tape.value(out).clone())
    }
}

pub fn type_key(t: NodeType) -> &'static str {
    match t {
        NodeType::Actor => "actor",
        NodeType::Object => "object",
        NodeType::Scene => "scene",
        NodeType::Action => "action",
        NodeType::Other => "other",
    }
}

/// Centers consecutive rows of width `len` on their column means.
fn center_block(data: &mut [f32], len: usize) {
    let rows = data.len() / len;
    for c in 0..len {
        let mean = (0..rows).map(|r| data[r * len + c] as f64).sum::<f64>() / rows as f64;
        for r in 0..rows {
            data[r * len + c] = (data[r * len + c] as f64 - mean) as f32;
        }
    }
}
