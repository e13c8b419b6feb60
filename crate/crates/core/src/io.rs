//! On-disk formats: STGS sequences, dataset manifests, checkpoints, loss
//! curves, CAD120-style ingestion and the bundled presets.
//!
//! An STGS sequence `<name>` is a JSON manifest `<name>.stgs.json` plus one
//! blob `<name>.track<k>.bin` per track holding its `[T, len]` feature
//! tensor in the tensor wire format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{FeatureCluster, LabelMode, Labels, NodeTrack, NodeType, SpatialEdge, StgSequence, TemporalEdge};
use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;
use crate::train::{Checkpoint, CurveRow, RngState, TrainConfig};

const STGS_VERSION: u32 = 1;
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TrackEntry {
    track_id: String,
    node_type: NodeType,
    cluster: usize,
    presence: Vec<bool>,
    blob: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelEntry {
    Single(Vec<usize>),
    /// Active class indices per timestep.
    Multi(Vec<Vec<usize>>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StgsManifest {
    version: u32,
    num_steps: usize,
    num_classes: usize,
    mode: LabelMode,
    clusters: Vec<FeatureCluster>,
    tracks: Vec<TrackEntry>,
    spatial_edges: Vec<SpatialEdge>,
    temporal_edges: Vec<TemporalEdge>,
    labels: LabelEntry,
    label_mask: Vec<bool>,
}

pub fn stgs_manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.stgs.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

/// Writes `seq` as `<dir>/<name>.stgs.json` and its track blobs; returns the
/// manifest path.
pub fn write_stgs(dir: &Path, name: &str, seq: &StgSequence) -> Result<PathBuf> {
    seq.validate()?;
    let mut tracks = Vec::with_capacity(seq.tracks.len());
    for (k, tr) in seq.tracks.iter().enumerate() {
        let blob = format!("{name}.track{k}.bin");
        fs::write(dir.join(&blob), tr.features.to_bytes())?;
        tracks.push(TrackEntry {
            track_id: tr.track_id.clone(),
            node_type: tr.node_type,
            cluster: tr.cluster,
            presence: tr.presence.clone(),
            blob,
        });
    }
    let labels = match &seq.labels {
        Labels::Single(v) => LabelEntry::Single(v.clone()),
        Labels::Multi(t) => LabelEntry::Multi(
            (0..t.rows())
                .map(|r| (0..t.cols()).filter(|&c| t.at(r, c) == 1.0).collect())
                .collect(),
        ),
    };
    let manifest = StgsManifest {
        version: STGS_VERSION,
        num_steps: seq.num_steps,
        num_classes: seq.num_classes,
        mode: seq.mode(),
        clusters: seq.clusters.clone(),
        tracks,
        spatial_edges: seq.spatial_edges.clone(),
        temporal_edges: seq.temporal_edges.clone(),
        labels,
        label_mask: seq.label_mask.clone(),
    };
    let path = stgs_manifest_path(dir, name);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Reads an STGS manifest and its blobs (resolved next to the manifest).
pub fn read_stgs(path: &Path) -> Result<StgSequence> {
    let m: StgsManifest = read_json(path)?;
    if m.version != STGS_VERSION {
        return Err(invalid!("unsupported STGS version {}", m.version));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tracks = Vec::with_capacity(m.tracks.len());
    for t in m.tracks {
        let features = Tensor::from_bytes(&fs::read(dir.join(&t.blob))?)?;
        tracks.push(NodeTrack {
            track_id: t.track_id,
            node_type: t.node_type,
            cluster: t.cluster,
            presence: t.presence,
            features,
        });
    }
    let labels = match (m.mode, m.labels) {
        (LabelMode::Single, LabelEntry::Single(v)) => Labels::Single(v),
        (LabelMode::Multi, LabelEntry::Multi(sets)) => {
            let mut d = vec![0.0; sets.len() * m.num_classes];
            for (t, set) in sets.iter().enumerate() {
                for &c in set {
                    if c >= m.num_classes {
                        return Err(invalid!("label {c} outside [0, {})", m.num_classes));
                    }
                    d[t * m.num_classes + c] = 1.0;
                }
            }
            Labels::Multi(Tensor::new(&[sets.len(), m.num_classes], d)?)
        }
        (mode, _) => return Err(invalid!("labels do not match declared mode {mode:?}")),
    };
    let seq = StgSequence {
        num_steps: m.num_steps,
        num_classes: m.num_classes,
        clusters: m.clusters,
        tracks,
        spatial_edges: m.spatial_edges,
        temporal_edges: m.temporal_edges,
        labels,
        label_mask: m.label_mask,
    };
    seq.validate()?;
    Ok(seq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// STGS manifest path, relative to the dataset manifest.
    pub path: String,
    pub split: Split,
    #[serde(default)]
    pub subject: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sequences: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub entry: ManifestEntry,
    pub seq: StgSequence,
}

impl DatasetManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Loads every referenced sequence; fails on the first missing or
    /// malformed file.
    pub fn load(path: &Path) -> Result<Vec<LoadedSequence>> {
        let m = Self::read(path)?;
        if m.sequences.is_empty() {
            return Err(invalid!("dataset manifest {} lists no sequences", path.display()));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        m.sequences
            .into_iter()
            .map(|entry| {
                let seq = read_stgs(&dir.join(&entry.path))?;
                Ok(LoadedSequence { entry, seq })
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorKey {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    rng: RngState,
    keys: Vec<TensorKey>,
    /// Velocity tensors follow the parameters, in the same key order.
    has_velocity: bool,
    blob: String,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Writes `path` (JSON) and a sibling `.bin` with every tensor in key order.
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let blob = blob_path(path);
    let mut w = BufWriter::new(fs::File::create(&blob)?);
    let mut keys = Vec::with_capacity(ck.params.len());
    for (name, t) in ck.params.iter() {
        t.write_to(&mut w)?;
        keys.push(TensorKey {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
    }
    if let Some(v) = &ck.velocity {
        for name in ck.params.names() {
            v.get(name)
                .ok_or_else(|| invalid!("velocity lacks {name}"))?
                .write_to(&mut w)?;
        }
    }
    w.flush()?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        model: ck.model.clone(),
        train: ck.train.clone(),
        epoch: ck.epoch,
        rng: ck.rng.clone(),
        keys,
        has_velocity: ck.velocity.is_some(),
        blob: blob
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid!("checkpoint path has no file name"))?
            .to_string(),
    };
    write_json(path, &manifest)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let m: CheckpointManifest = read_json(path)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(invalid!("unsupported checkpoint version {}", m.version));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&m.blob))?;
    let mut r = bytes.as_slice();
    let mut read_all = |what: &str| -> Result<Params> {
        let mut map = BTreeMap::new();
        for k in &m.keys {
            let t = Tensor::read_from(&mut r)?;
            if t.shape() != k.shape.as_slice() {
                return Err(invalid!("{what} {} has shape {:?}, manifest says {:?}", k.name, t.shape(), k.shape));
            }
            map.insert(k.name.clone(), t);
        }
        Ok(Params::new(map))
    };
    let params = read_all("parameter")?;
    let velocity = if m.has_velocity { Some(read_all("velocity")?) } else { None };
    if !r.is_empty() {
        return Err(invalid!("{} trailing bytes in checkpoint blob", r.len()));
    }
    let ck = Checkpoint {
        model: m.model,
        train: m.train,
        epoch: m.epoch,
        params,
        velocity,
        rng: m.rng,
    };
    ck.to_model()?;
    Ok(ck)
}

/// CSV with header `epoch,split,loss,metric`; missing metrics are empty.
pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,split,loss,metric")?;
    for r in rows {
        let metric = r.metric.map(|m| m.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.epoch, r.split, r.loss, metric)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("epoch,split,loss,metric") {
        return Err(invalid!("{} is not a loss curve", path.display()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(invalid!("bad curve row {line:?}"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| invalid!("bad number {s:?}"));
            Ok(CurveRow {
                epoch: f[0].parse().map_err(|_| invalid!("bad epoch {:?}", f[0]))?,
                split: f[1].to_string(),
                loss: num(f[2])?,
                metric: if f[3].is_empty() { None } else { Some(num(f[3])?) },
            })
        })
        .collect()
}

/// One node of a CAD120-style table: a feature row per segment, `null`
/// where the node is not observed.
#[derive(Clone, Debug, Deserialize)]
pub struct IngestNode {
    pub id: String,
    pub node_type: NodeType,
    pub features: Vec<Option<Vec<f32>>>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct IngestSpatialEdge {
    pub t: usize,
    pub a: String,
    pub b: String,
    pub weight: f32,
}

#[derive(Clone, Debug, Deserialize)]
pub struct IngestTemporalEdge {
    pub a: String,
    pub t_a: usize,
    pub b: String,
    pub t_b: usize,
    pub weight: f32,
}

/// Per-segment node features, edge weights and labels of one video.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestTable {
    pub num_classes: usize,
    pub segment_labels: Vec<usize>,
    pub nodes: Vec<IngestNode>,
    #[serde(default)]
    pub spatial_edges: Vec<IngestSpatialEdge>,
    /// When absent, each node is chained to itself at the next segment.
    #[serde(default)]
    pub temporal_edges: Option<Vec<IngestTemporalEdge>>,
}

/// Builds a single-label sequence with one timestep per segment. Clusters
/// are the distinct feature lengths in order of first appearance; edge
/// weights are copied through.
pub fn ingest_cad120_style(table: &IngestTable) -> Result<StgSequence> {
    let steps = table.segment_labels.len();
    if steps == 0 || table.nodes.is_empty() {
        return Err(invalid!("table needs at least one segment and one node"));
    }
    let mut lengths: Vec<usize> = Vec::new();
    let mut tracks = Vec::with_capacity(table.nodes.len());
    for node in &table.nodes {
        if node.features.len() != steps {
            return Err(invalid!(
                "node {} has {} feature rows for {steps} segments",
                node.id,
                node.features.len()
            ));
        }
        let mut lens = node.features.iter().flatten().map(Vec::len);
        let len = lens.next().ok_or_else(|| invalid!("node {} is never observed", node.id))?;
        if len == 0 || lens.any(|l| l != len) {
            return Err(invalid!("node {} has ragged feature rows", node.id));
        }
        let cluster = match lengths.iter().position(|&l| l == len) {
            Some(c) => c,
            None => {
                lengths.push(len);
                lengths.len() - 1
            }
        };
        let mut data = Vec::with_capacity(steps * len);
        for row in &node.features {
            match row {
                Some(r) => data.extend_from_slice(r),
                None => data.extend(std::iter::repeat_n(0.0, len)),
            }
        }
        tracks.push(NodeTrack {
            track_id: node.id.clone(),
            node_type: node.node_type,
            cluster,
            presence: node.features.iter().map(Option::is_some).collect(),
            features: Tensor::new(&[steps, len], data)?,
        });
    }
    let index = |id: &str| {
        table
            .nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| invalid!("edge references unknown node {id}"))
    };
    let check_weight = |w: f32| {
        if w.is_finite() && w >= 0.0 {
            Ok(w)
        } else {
            Err(invalid!("edge weight {w} is not a nonnegative number"))
        }
    };
    let spatial_edges = table
        .spatial_edges
        .iter()
        .map(|e| {
            Ok(SpatialEdge {
                t: e.t,
                a: index(&e.a)?,
                b: index(&e.b)?,
                weight: check_weight(e.weight)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seq = StgSequence {
        num_steps: steps,
        num_classes: table.num_classes,
        clusters: lengths
            .iter()
            .enumerate()
            .map(|(id, &feature_len)| FeatureCluster { id, feature_len })
            .collect(),
        tracks,
        spatial_edges,
        temporal_edges: Vec::new(),
        labels: Labels::Single(table.segment_labels.clone()),
        label_mask: vec![true; steps],
    };
    seq.temporal_edges = match &table.temporal_edges {
        Some(edges) => edges
            .iter()
            .map(|e| {
                Ok(TemporalEdge {
                    a: index(&e.a)?,
                    t_a: e.t_a,
                    b: index(&e.b)?,
                    t_b: e.t_b,
                    weight: check_weight(e.weight)?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        None => seq.chain_temporal_edges(1, 1.0),
    };
    seq.validate()?;
    Ok(seq)
}

/// Model and training settings shipped for a dataset family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESET_NAMES: [&str; 3] = ["cad120", "charades-vgg", "charades-i3d"];

pub fn preset(name: &str) -> Result<Preset> {
    let text = match name {
        "cad120" => include_str!("../presets/cad120.json"),
        "charades-vgg" => include_str!("../presets/charades-vgg.json"),
        "charades-i3d" => include_str!("../presets/charades-i3d.json"),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {PRESET_NAMES:?}"
            )))
        }
    };
    let p: Preset = serde_json::from_str(text)?;
    p.model.validate()?;
    p.train.validate()?;
    Ok(p)
}
