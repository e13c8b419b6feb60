//! Spatio-temporal graph sequences.
//!
//! A sequence holds `N_s` node tracks over `T` timesteps. Node `n` at
//! timestep `t` is flattened to row `t * N_s + n` (timestep-major), so every
//! temporal subsampling is a selection of whole timestep blocks.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Actor,
    Object,
    Scene,
    Action,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Single,
    Multi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCluster {
    pub id: usize,
    pub feature_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeTrack {
    pub track_id: String,
    pub node_type: NodeType,
    pub cluster: usize,
    pub presence: Vec<bool>,
    /// `[T, feature_len]`; rows where the node is absent are zero.
    pub features: Tensor,
}

impl NodeTrack {
    pub fn feature_len(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialEdge {
    pub t: usize,
    pub a: usize,
    pub b: usize,
    pub weight: f32,
}

/// Edge from track `a` at `t_a` to track `b` at `t_b > t_a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEdge {
    pub a: usize,
    pub t_a: usize,
    pub b: usize,
    pub t_b: usize,
    pub weight: f32,
}

impl TemporalEdge {
    pub fn gap(&self) -> usize {
        self.t_b - self.t_a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class index per timestep.
    Single(Vec<usize>),
    /// `[T, C]` binary indicators.
    Multi(Tensor),
}

impl Labels {
    pub fn mode(&self) -> LabelMode {
        match self {
            Labels::Single(_) => LabelMode::Single,
            Labels::Multi(_) => LabelMode::Multi,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StgSequence {
    pub num_steps: usize,
    pub num_classes: usize,
    pub clusters: Vec<FeatureCluster>,
    pub tracks: Vec<NodeTrack>,
    pub spatial_edges: Vec<SpatialEdge>,
    pub temporal_edges: Vec<TemporalEdge>,
    pub labels: Labels,
    pub label_mask: Vec<bool>,
}

/// Raw (unnormalized) spatial and temporal adjacency of one sequence.
///
/// The spatial part is block-diagonal over time and stored as one
/// `N_s × N_s` block per timestep; the temporal part is a dense
/// `N_t × N_t` matrix with `N_t = T · N_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyPair {
    pub steps: usize,
    pub nodes: usize,
    pub spatial: Vec<Tensor>,
    pub temporal: Tensor,
}

impl AdjacencyPair {
    pub fn flat_len(&self) -> usize {
        self.steps * self.nodes
    }

    /// Dense `N_t × N_t` form of the block-diagonal spatial adjacency.
    pub fn spatial_dense(&self) -> Tensor {
        let n = self.nodes;
        let nt = self.flat_len();
        let mut out = vec![0.0; nt * nt];
        for (t, b) in self.spatial.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    out[(t * n + i) * nt + t * n + j] = b.at(i, j);
                }
            }
        }
        Tensor::new(&[nt, nt], out).expect("square")
    }
}

/// Writes `w` at `(i, j)` and `(j, i)`, keeping the larger of any existing
/// weight.
fn set_sym(data: &mut [f32], n: usize, i: usize, j: usize, w: f32) {
    let v = data[i * n + j].max(w);
    data[i * n + j] = v;
    data[j * n + i] = v;
}

impl StgSequence {
    pub fn num_nodes(&self) -> usize {
        self.tracks.len()
    }

    pub fn flat_len(&self) -> usize {
        self.num_steps * self.num_nodes()
    }

    pub fn flat_index(&self, t: usize, node: usize) -> usize {
        t * self.num_nodes() + node
    }

    pub fn mode(&self) -> LabelMode {
        self.labels.mode()
    }

    pub fn is_present(&self, node: usize, t: usize) -> bool {
        self.tracks[node].presence[t]
    }

    /// Presence flags in flattening order.
    pub fn presence_flat(&self) -> Vec<bool> {
        (0..self.num_steps)
            .flat_map(|t| self.tracks.iter().map(move |tr| tr.presence[t]))
            .collect()
    }

    /// Checks every structural invariant of the sequence.
    pub fn validate(&self) -> Result<()> {
        let t_len = self.num_steps;
        if t_len == 0 {
            return Err(invalid!("sequence has no timesteps"));
        }
        if self.num_classes == 0 {
            return Err(invalid!("sequence declares zero classes"));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.id != i || c.feature_len == 0 {
                return Err(invalid!("cluster {i} malformed: {c:?}"));
            }
        }
        for (n, tr) in self.tracks.iter().enumerate() {
            let cluster = self
                .clusters
                .get(tr.cluster)
                .ok_or_else(|| invalid!("track {n} references missing cluster {}", tr.cluster))?;
            if tr.features.shape() != [t_len, cluster.feature_len] {
                return Err(invalid!(
                    "track {n} features {:?}, expected [{t_len}, {}]",
                    tr.features.shape(),
                    cluster.feature_len
                ));
            }
            if tr.presence.len() != t_len {
                return Err(invalid!("track {n} presence length {}", tr.presence.len()));
            }
            if !tr.features.is_finite() {
                return Err(invalid!("track {n} has non-finite features"));
            }
            for t in 0..t_len {
                if !tr.presence[t] && tr.features.row(t).iter().any(|&v| v != 0.0) {
                    return Err(invalid!("track {n} carries features while absent at t={t}"));
                }
            }
        }
        let n_s = self.num_nodes();
        let present = |node: usize, t: usize| node < n_s && t < t_len && self.tracks[node].presence[t];
        for e in &self.spatial_edges {
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(invalid!("spatial edge weight {} is not a nonnegative number", e.weight));
            }
            if !present(e.a, e.t) || !present(e.b, e.t) {
                return Err(invalid!("spatial edge {e:?} touches an absent or unknown node"));
            }
        }
        for e in &self.temporal_edges {
            if !(e.weight.is_finite() && e.weight >= 0.0) {
                return Err(invalid!("temporal edge weight {} is not a nonnegative number", e.weight));
            }
            if e.t_b <= e.t_a {
                return Err(invalid!("temporal edge {e:?} does not move forward in time"));
            }
            if !present(e.a, e.t_a) || !present(e.b, e.t_b) {
                return Err(invalid!("temporal edge {e:?} touches an absent or unknown node"));
            }
        }
        if self.label_mask.len() != t_len || self.labels.len() != t_len {
            return Err(invalid!(
                "labels ({}) / mask ({}) must cover {t_len} timesteps",
                self.labels.len(),
                self.label_mask.len()
            ));
        }
        match &self.labels {
            Labels::Single(v) => {
                if let Some(&l) = v.iter().find(|&&l| l >= self.num_classes) {
                    return Err(invalid!("label {l} outside [0, {})", self.num_classes));
                }
            }
            Labels::Multi(t) => {
                if t.shape() != [t_len, self.num_classes] {
                    return Err(invalid!("multi-label targets have shape {:?}", t.shape()));
                }
                if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(invalid!("multi-label targets must be 0 or 1"));
                }
            }
        }
        Ok(())
    }

    /// Same-track temporal edges `(n, t) → (n, t + δ)` for `1 ≤ δ ≤ span`
    /// between present endpoints.
    pub fn chain_temporal_edges(&self, span: usize, weight: f32) -> Vec<TemporalEdge> {
        let mut out = Vec::new();
        for (n, tr) in self.tracks.iter().enumerate() {
            for t in 0..self.num_steps {
                if !tr.presence[t] {
                    continue;
                }
                for d in 1..=span {
                    let u = t + d;
                    if u < self.num_steps && tr.presence[u] {
                        out.push(TemporalEdge {
                            a: n,
                            t_a: t,
                            b: n,
                            t_b: u,
                            weight,
                        });
                    }
                }
            }
        }
        out
    }

    /// Every pair of distinct present nodes within each timestep.
    pub fn fully_connected_spatial_edges(&self, weight: f32) -> Vec<SpatialEdge> {
        let mut out = Vec::new();
        for t in 0..self.num_steps {
            for a in 0..self.num_nodes() {
                for b in a + 1..self.num_nodes() {
                    if self.is_present(a, t) && self.is_present(b, t) {
                        out.push(SpatialEdge { t, a, b, weight });
                    }
                }
            }
        }
        out
    }

    /// Timesteps `[start, start + len)` as a new sequence. Edges leaving the
    /// window are dropped.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.num_steps {
            return Err(invalid!(
                "window [{start}, {}) outside {} steps",
                start + len,
                self.num_steps
            ));
        }
        let end = start + len;
        let tracks = self
            .tracks
            .iter()
            .map(|tr| {
                let d = tr.feature_len();
                Ok(NodeTrack {
                    presence: tr.presence[start..end].to_vec(),
                    features: Tensor::new(&[len, d], tr.features.data()[start * d..end * d].to_vec())?,
                    ..tr.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spatial_edges = self
            .spatial_edges
            .iter()
            .filter(|e| (start..end).contains(&e.t))
            .map(|e| SpatialEdge { t: e.t - start, ..*e })
            .collect();
        let temporal_edges = self
            .temporal_edges
            .iter()
            .filter(|e| e.t_a >= start && e.t_b < end)
            .map(|e| TemporalEdge {
                t_a: e.t_a - start,
                t_b: e.t_b - start,
                ..*e
            })
            .collect();
        let labels = match &self.labels {
            Labels::Single(v) => Labels::Single(v[start..end].to_vec()),
            Labels::Multi(t) => {
                let c = t.cols();
                Labels::Multi(Tensor::new(&[len, c], t.data()[start * c..end * c].to_vec())?)
            }
        };
        Ok(Self {
            num_steps: len,
            num_classes: self.num_classes,
            clusters: self.clusters.clone(),
            tracks,
            spatial_edges,
            temporal_edges,
            labels,
            label_mask: self.label_mask[start..end].to_vec(),
        })
    }

    /// Extends the sequence to `len` steps with absent nodes and masked-out
    /// labels.
    pub fn pad_to(&self, len: usize) -> Result<Self> {
        if len < self.num_steps {
            return Err(invalid!("cannot pad {} steps down to {len}", self.num_steps));
        }
        let extra = len - self.num_steps;
        let mut out = self.clone();
        out.num_steps = len;
        for tr in &mut out.tracks {
            tr.presence.extend(std::iter::repeat_n(false, extra));
            let mut data = tr.features.data().to_vec();
            data.extend(std::iter::repeat_n(0.0, extra * tr.feature_len()));
            tr.features = Tensor::new(&[len, tr.feature_len()], data)?;
        }
        out.labels = match &self.labels {
            Labels::Single(v) => {
                let mut v = v.clone();
                v.extend(std::iter::repeat_n(0, extra));
                Labels::Single(v)
            }
            Labels::Multi(t) => {
                let mut d = t.data().to_vec();
                d.extend(std::iter::repeat_n(0.0, extra * t.cols()));
                Labels::Multi(Tensor::new(&[len, t.cols()], d)?)
            }
        };
        out.label_mask.extend(std::iter::repeat_n(false, extra));
        Ok(out)
    }
}

/// Builds raw spatial and temporal adjacency.
///
/// Temporal edges with gap above `span` are ignored. With
/// `cross_cluster_in_temporal`, spatial edges joining nodes of different
/// feature clusters are written into the temporal matrix instead of the
/// spatial blocks; otherwise every spatial edge stays spatial.
pub fn build_adjacency(seq: &StgSequence, span: usize, cross_cluster_in_temporal: bool) -> Result<AdjacencyPair> {
    seq.validate()?;
    if span == 0 {
        return Err(Error::Config("temporal span must be at least 1".into()));
    }
    let n = seq.num_nodes();
    let nt = seq.flat_len();
    let mut spatial = vec![vec![0.0f32; n * n]; seq.num_steps];
    let mut temporal = vec![0.0f32; nt * nt];
    for e in &seq.spatial_edges {
        if e.a == e.b {
            continue;
        }
        let cross = seq.tracks[e.a].cluster != seq.tracks[e.b].cluster;
        if cross && cross_cluster_in_temporal {
            set_sym(&mut temporal, nt, seq.flat_index(e.t, e.a), seq.flat_index(e.t, e.b), e.weight);
        } else {
            set_sym(&mut spatial[e.t], n, e.a, e.b, e.weight);
        }
    }
    for e in seq.temporal_edges.iter().filter(|e| e.gap() <= span) {
        set_sym(&mut temporal, nt, seq.flat_index(e.t_a, e.a), seq.flat_index(e.t_b, e.b), e.weight);
    }
    Ok(AdjacencyPair {
        steps: seq.num_steps,
        nodes: n,
        spatial: spatial
            .into_iter()
            .map(|b| Tensor::new(&[n, n], b))
            .collect::<Result<_>>()?,
        temporal: Tensor::new(&[nt, nt], temporal)?,
    })
}

/// Marks scheduled `(track, timestep)` points absent, zeroes their features
/// and removes every incident edge. Labels are untouched.
pub fn apply_deformation(seq: &StgSequence, drops: &[(usize, usize)]) -> Result<StgSequence> {
    let mut out = seq.clone();
    for &(node, t) in drops {
        if node >= out.num_nodes() || t >= out.num_steps {
            return Err(invalid!("drop ({node}, {t}) outside the sequence"));
        }
        let tr = &mut out.tracks[node];
        tr.presence[t] = false;
        let d = tr.feature_len();
        let mut data = tr.features.data().to_vec();
        data[t * d..(t + 1) * d].fill(0.0);
        tr.features = Tensor::new(&[out.num_steps, d], data)?;
    }
    let tracks = &out.tracks;
    out.spatial_edges
        .retain(|e| tracks[e.a].presence[e.t] && tracks[e.b].presence[e.t]);
    out.temporal_edges
        .retain(|e| tracks[e.a].presence[e.t_a] && tracks[e.b].presence[e.t_b]);
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// One cluster of width 2, every node present, chain temporal edges up
    /// to `span`, fully connected spatial edges of weight 0.1.
    pub(crate) fn toy_sequence(nodes: usize, steps: usize, span: usize) -> StgSequence {
        let tracks = (0..nodes)
            .map(|n| NodeTrack {
                track_id: format!("n{n}"),
                node_type: if n == 0 { NodeType::Actor } else { NodeType::Object },
                cluster: 0,
                presence: vec![true; steps],
                features: Tensor::new(
                    &[steps, 2],
                    (0..steps * 2).map(|i| (i + n) as f32 * 0.1).collect(),
                )
                .unwrap(),
            })
            .collect();
        let mut seq = StgSequence {
            num_steps: steps,
            num_classes: 2,
            clusters: vec![FeatureCluster { id: 0, feature_len: 2 }],
            tracks,
            spatial_edges: vec![],
            temporal_edges: vec![],
            labels: Labels::Single(vec![0; steps]),
            label_mask: vec![true; steps],
        };
        seq.spatial_edges = seq.fully_connected_spatial_edges(0.1);
        seq.temporal_edges = seq.chain_temporal_edges(span, 1.0);
        seq
    }

    fn nonzero_pairs(t: &Tensor) -> Vec<(usize, usize)> {
        let n = t.rows();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| t.at(i, j) != 0.0)
            .collect()
    }

    #[test]
    fn chain_with_span_capped_by_length() {
        let seq = toy_sequence(1, 3, 3);
        let adj = build_adjacency(&seq, 3, false).unwrap();
        assert_eq!(
            nonzero_pairs(&adj.temporal),
            vec![(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)]
        );
    }

    #[test]
    fn span_filters_long_edges() {
        let seq = toy_sequence(1, 4, 3);
        let adj = build_adjacency(&seq, 1, false).unwrap();
        assert_eq!(
            nonzero_pairs(&adj.temporal),
            vec![(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)]
        );
    }

    #[test]
    fn empty_edges_give_zero_adjacency() {
        let mut seq = toy_sequence(2, 3, 1);
        seq.spatial_edges.clear();
        seq.temporal_edges.clear();
        let adj = build_adjacency(&seq, 3, false).unwrap();
        assert!(adj.temporal.data().iter().all(|&v| v == 0.0));
        assert!(adj.spatial.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn charades_span_three() {
        let seq = toy_sequence(1, 6, 3);
        let adj = build_adjacency(&seq, 3, false).unwrap();
        let row0: Vec<usize> = (0..6).filter(|&j| adj.temporal.at(0, j) != 0.0).collect();
        assert_eq!(row0, vec![1, 2, 3]);
    }

    #[test]
    fn cross_cluster_edges_move_to_temporal() {
        let mut seq = toy_sequence(2, 1, 1);
        seq.clusters.push(FeatureCluster { id: 1, feature_len: 1 });
        seq.tracks[1].cluster = 1;
        seq.tracks[1].features = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let folded = build_adjacency(&seq, 1, true).unwrap();
        assert_eq!(folded.spatial[0].data(), &[0.0; 4]);
        assert_eq!(folded.temporal.data(), &[0.0, 0.1, 0.1, 0.0]);
        let kept = build_adjacency(&seq, 1, false).unwrap();
        assert_eq!(kept.spatial[0].data(), &[0.0, 0.1, 0.1, 0.0]);
        assert_eq!(kept.temporal.data(), &[0.0; 4]);
    }

    #[test]
    fn directed_input_is_symmetrized_by_max() {
        let mut seq = toy_sequence(2, 1, 1);
        seq.spatial_edges = vec![
            SpatialEdge { t: 0, a: 0, b: 1, weight: 0.2 },
            SpatialEdge { t: 0, a: 1, b: 0, weight: 0.7 },
        ];
        let adj = build_adjacency(&seq, 1, false).unwrap();
        assert_eq!(adj.spatial[0].data(), &[0.0, 0.7, 0.7, 0.0]);
    }

    #[test]
    fn edge_on_absent_node_is_rejected() {
        let mut seq = toy_sequence(1, 3, 1);
        seq.tracks[0].presence[1] = false;
        seq.tracks[0].features = apply_deformation(&seq, &[(0, 1)]).unwrap().tracks[0].features.clone();
        assert!(matches!(build_adjacency(&seq, 1, false), Err(Error::Validation(_))));
    }

    #[test]
    fn negative_weight_is_rejected() {
        let mut seq = toy_sequence(2, 2, 1);
        seq.spatial_edges[0].weight = -0.5;
        assert!(seq.validate().is_err());
    }

    #[test]
    fn empty_schedule_is_identity() {
        let seq = toy_sequence(2, 4, 2);
        assert_eq!(apply_deformation(&seq, &[]).unwrap(), seq);
    }

    #[test]
    fn drop_middle_of_chain_keeps_bridging_edge() {
        let seq = toy_sequence(1, 3, 2);
        let out = apply_deformation(&seq, &[(0, 1)]).unwrap();
        let gaps: Vec<(usize, usize)> = out.temporal_edges.iter().map(|e| (e.t_a, e.t_b)).collect();
        assert_eq!(gaps, vec![(0, 2)]);
        assert_eq!(out.labels, seq.labels);
        assert_eq!(out.tracks[0].features.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn dropping_a_whole_track_zeroes_its_rows() {
        let seq = toy_sequence(2, 3, 2);
        let out = apply_deformation(&seq, &[(1, 0), (1, 1), (1, 2)]).unwrap();
        let adj = build_adjacency(&out, 2, false).unwrap();
        for t in 0..3 {
            let r = out.flat_index(t, 1);
            assert!(adj.temporal.row(r).iter().all(|&v| v == 0.0));
            assert!(adj.spatial[t].row(1).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn crop_and_pad() {
        let seq = toy_sequence(2, 6, 2);
        let w = seq.crop(2, 3).unwrap();
        w.validate().unwrap();
        assert_eq!(w.num_steps, 3);
        assert!(w.temporal_edges.iter().all(|e| e.t_b < 3));
        assert_eq!(w.tracks[0].features.row(0), seq.tracks[0].features.row(2));
        let p = w.pad_to(5).unwrap();
        p.validate().unwrap();
        assert_eq!(p.label_mask, vec![true, true, true, false, false]);
        assert!(!p.tracks[1].presence[4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_sequence() -> impl Strategy<Value = (StgSequence, usize, bool, Vec<(usize, usize)>)> {
            (1usize..4, 1usize..6, 1usize..4, any::<bool>()).prop_flat_map(|(nodes, steps, span, flag)| {
                let presence = prop::collection::vec(prop::bool::weighted(0.8), nodes * steps);
                let weights = prop::collection::vec(0.0f32..2.0, nodes * nodes * steps + nodes * steps * 4);
                let drops = prop::collection::vec((0..nodes, 0..steps), 0..4);
                let clusters = prop::collection::vec(0usize..2, nodes);
                (presence, weights, drops, clusters).prop_map(move |(presence, weights, drops, clusters)| {
                    let mut seq = toy_sequence(nodes, steps, span);
                    seq.clusters.push(FeatureCluster { id: 1, feature_len: 2 });
                    for (n, tr) in seq.tracks.iter_mut().enumerate() {
                        tr.cluster = clusters[n];
                    }
                    let absent: Vec<(usize, usize)> = (0..nodes)
                        .flat_map(|n| (0..steps).map(move |t| (n, t)))
                        .filter(|&(n, t)| !presence[t * nodes + n])
                        .collect();
                    let mut seq = apply_deformation(&seq, &absent).unwrap();
                    let mut w = weights.iter().cycle();
                    for e in &mut seq.spatial_edges {
                        e.weight = *w.next().unwrap();
                    }
                    for e in &mut seq.temporal_edges {
                        e.weight = *w.next().unwrap();
                    }
                    (seq, span, flag, drops)
                })
            })
        }

        proptest! {
            #[test]
            fn adjacency_is_symmetric_and_nonnegative((seq, span, flag, _) in random_sequence()) {
                let adj = build_adjacency(&seq, span, flag).unwrap();
                for m in adj.spatial.iter().chain(std::iter::once(&adj.temporal)) {
                    prop_assert_eq!(m, &m.transpose().unwrap());
                    prop_assert!(m.data().iter().all(|&v| v >= 0.0));
                }
            }

            #[test]
            fn zero_rows_exactly_for_isolated_or_absent((seq, span, flag, _) in random_sequence()) {
                let adj = build_adjacency(&seq, span, flag).unwrap();
                let present = seq.presence_flat();
                for i in 0..seq.flat_len() {
                    let zero = adj.temporal.row(i).iter().all(|&v| v == 0.0);
                    if !present[i] {
                        prop_assert!(zero);
                    }
                }
                // a present node has a nonzero row iff some temporal or folded
                // cross-cluster edge touches it with positive weight
                let mut touched = vec![false; seq.flat_len()];
                for e in seq.temporal_edges.iter().filter(|e| e.gap() <= span && e.weight > 0.0) {
                    touched[seq.flat_index(e.t_a, e.a)] = true;
                    touched[seq.flat_index(e.t_b, e.b)] = true;
                }
                if flag {
                    for e in seq.spatial_edges.iter().filter(|e| e.weight > 0.0 && e.a != e.b) {
                        if seq.tracks[e.a].cluster != seq.tracks[e.b].cluster {
                            touched[seq.flat_index(e.t, e.a)] = true;
                            touched[seq.flat_index(e.t, e.b)] = true;
                        }
                    }
                }
                for i in 0..seq.flat_len() {
                    let zero = adj.temporal.row(i).iter().all(|&v| v == 0.0);
                    prop_assert_eq!(zero, !touched[i]);
                }
            }

            #[test]
            fn deformation_commutes_with_adjacency((seq, span, flag, drops) in random_sequence()) {
                let deformed = build_adjacency(&apply_deformation(&seq, &drops).unwrap(), span, flag).unwrap();
                let mut expected = build_adjacency(&seq, span, flag).unwrap();
                let n = seq.num_nodes();
                let nt = seq.flat_len();
                let mut t_data = expected.temporal.data().to_vec();
                for &(node, t) in &drops {
                    let r = seq.flat_index(t, node);
                    for j in 0..nt {
                        t_data[r * nt + j] = 0.0;
                        t_data[j * nt + r] = 0.0;
                    }
                    let mut b = expected.spatial[t].data().to_vec();
                    for j in 0..n {
                        b[node * n + j] = 0.0;
                        b[j * n + node] = 0.0;
                    }
                    expected.spatial[t] = Tensor::new(&[n, n], b).unwrap();
                }
                expected.temporal = Tensor::new(&[nt, nt], t_data).unwrap();
                prop_assert_eq!(deformed, expected);
            }
        }
    }
}
