//! Synthetic labeled graph sequences with a known generative model.
//!
//! Every (node type, cluster) pair owns one mean vector per class. A
//! present node's features are the mean of its pair for the active class
//! (summed over active classes in multi-label mode) plus isotropic Gaussian
//! noise. Labels are piecewise constant over random-length segments.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{FeatureCluster, LabelMode, Labels, NodeTrack, NodeType, StgSequence};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTrack {
    pub node_type: NodeType,
    pub cluster: usize,
}

fn one() -> f32 {
    1.0
}
fn eps() -> f32 {
    0.1
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub mode: LabelMode,
    /// Feature length per cluster.
    pub clusters: Vec<usize>,
    pub tracks: Vec<SynthTrack>,
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub noise: f32,
    #[serde(default = "one")]
    pub mean_scale: f32,
    #[serde(default = "eps")]
    pub spatial_weight: f32,
    #[serde(default = "three")]
    pub temporal_span: usize,
    #[serde(default = "one")]
    pub temporal_weight: f32,
    /// Chance that a track other than the first is missing at a timestep.
    #[serde(default)]
    pub absence_prob: f32,
    pub num_sequences: usize,
    /// Sequence `i` belongs to subject `i mod num_subjects`.
    #[serde(default = "four")]
    pub num_subjects: usize,
}

impl SynthConfig {
    /// The two-cluster, five-class benchmark task.
    pub fn benchmark(num_sequences: usize) -> Self {
        Self {
            num_classes: 5,
            mode: LabelMode::Single,
            clusters: vec![6, 4],
            tracks: vec![
                SynthTrack { node_type: NodeType::Actor, cluster: 0 },
                SynthTrack { node_type: NodeType::Object, cluster: 1 },
                SynthTrack { node_type: NodeType::Object, cluster: 1 },
            ],
            min_steps: 30,
            max_steps: 80,
            min_segment: 6,
            max_segment: 20,
            noise: 0.3,
            mean_scale: 1.0,
            spatial_weight: 0.1,
            temporal_span: 3,
            temporal_weight: 1.0,
            absence_prob: 0.0,
            num_sequences,
            num_subjects: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(invalid!("synthesis needs at least 2 classes"));
        }
        if self.clusters.is_empty() || self.clusters.contains(&0) {
            return Err(invalid!("synthesis needs at least one cluster of positive length"));
        }
        if self.tracks.is_empty() {
            return Err(invalid!("synthesis needs at least one track"));
        }
        if let Some(t) = self.tracks.iter().find(|t| t.cluster >= self.clusters.len()) {
            return Err(invalid!("track references missing cluster {}", t.cluster));
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return Err(invalid!("bad step range [{}, {}]", self.min_steps, self.max_steps));
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return Err(invalid!("bad segment range [{}, {}]", self.min_segment, self.max_segment));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.mean_scale > 0.0) {
            return Err(invalid!("noise must be nonnegative and mean scale positive"));
        }
        if !(self.spatial_weight >= 0.0 && self.temporal_weight >= 0.0) {
            return Err(invalid!("edge weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.absence_prob) {
            return Err(invalid!("absence probability must lie in [0, 1)"));
        }
        if self.temporal_span == 0 || self.num_subjects == 0 {
            return Err(invalid!("span and subject count must be positive"));
        }
        if self.mode == LabelMode::Multi && self.num_classes > 16 {
            return Err(invalid!("multi-label synthesis supports at most 16 classes"));
        }
        Ok(())
    }

    fn bindings(&self) -> Vec<SynthTrack> {
        let mut out: Vec<SynthTrack> = Vec::new();
        for t in &self.tracks {
            if !out.contains(t) {
                out.push(*t);
            }
        }
        out
    }
}

/// Class means of one (node type, cluster) pair; `means[c]` has the
/// cluster's feature length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub node_type: NodeType,
    pub cluster: usize,
    pub means: Vec<Vec<f32>>,
}

/// Generative ground truth, written next to synthesized data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOracle {
    pub seed: u64,
    pub config: SynthConfig,
    pub means: Vec<ClassMeans>,
    /// Subject of each sequence.
    pub subjects: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthWorld {
    config: SynthConfig,
    seed: u64,
    means: Vec<ClassMeans>,
}

impl SynthWorld {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = config
            .bindings()
            .into_iter()
            .map(|b| {
                let len = config.clusters[b.cluster];
                let means = (0..config.num_classes)
                    .map(|_| {
                        (0..len)
                            .map(|_| config.mean_scale * rng.sample::<f32, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                ClassMeans {
                    node_type: b.node_type,
                    cluster: b.cluster,
                    means,
                }
            })
            .collect();
        Ok(Self { config, seed, means })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn oracle(&self) -> SynthOracle {
        SynthOracle {
            seed: self.seed,
            config: self.config.clone(),
            means: self.means.clone(),
            subjects: (0..self.config.num_sequences).map(|i| self.subject(i)).collect(),
        }
    }

    pub fn subject(&self, index: usize) -> usize {
        index % self.config.num_subjects
    }

    fn means_for(&self, track: &SynthTrack) -> &ClassMeans {
        self.means
            .iter()
            .find(|m| m.node_type == track.node_type && m.cluster == track.cluster)
            .expect("every track binding has means")
    }

    /// Sequence `index`; independent of how many others are generated.
    pub fn sequence(&self, index: usize) -> Result<StgSequence> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let steps = rng.random_range(cfg.min_steps..=cfg.max_steps);
        let active = self.draw_labels(&mut rng, steps);
        let clusters = cfg
            .clusters
            .iter()
            .enumerate()
            .map(|(id, &feature_len)| FeatureCluster { id, feature_len })
            .collect();
        let mut tracks = Vec::with_capacity(cfg.tracks.len());
        for (k, spec) in cfg.tracks.iter().enumerate() {
            let len = cfg.clusters[spec.cluster];
            let means = self.means_for(spec);
            let mut presence = Vec::with_capacity(steps);
            let mut data = Vec::with_capacity(steps * len);
            for classes in &active {
                let present = k == 0 || cfg.absence_prob == 0.0 || !rng.random_bool(cfg.absence_prob as f64);
                presence.push(present);
                for j in 0..len {
                    if present {
                        let mu: f32 = classes.iter().map(|&c| means.means[c][j]).sum();
                        let z: f32 = rng.sample(StandardNormal);
                        data.push(mu + cfg.noise * z);
                    } else {
                        data.push(0.0);
                    }
                }
            }
            tracks.push(NodeTrack {
                track_id: format!("s{index}.k{k}"),
                node_type: spec.node_type,
                cluster: spec.cluster,
                presence,
                features: Tensor::new(&[steps, len], data)?,
            });
        }
        let labels = match cfg.mode {
            LabelMode::Single => Labels::Single(active.iter().map(|c| c[0]).collect()),
            LabelMode::Multi => {
                let mut d = vec![0.0; steps * cfg.num_classes];
                for (t, cs) in active.iter().enumerate() {
                    for &c in cs {
                        d[t * cfg.num_classes + c] = 1.0;
                    }
                }
                Labels::Multi(Tensor::new(&[steps, cfg.num_classes], d)?)
            }
        };
        let mut seq = StgSequence {
            num_steps: steps,
            num_classes: cfg.num_classes,
            clusters,
            tracks,
            spatial_edges: Vec::new(),
            temporal_edges: Vec::new(),
            labels,
            label_mask: vec![true; steps],
        };
        seq.spatial_edges = seq.fully_connected_spatial_edges(cfg.spatial_weight);
        seq.temporal_edges = seq.chain_temporal_edges(cfg.temporal_span, cfg.temporal_weight);
        seq.validate()?;
        Ok(seq)
    }

    /// Active classes per timestep. Consecutive segments differ.
    fn draw_labels(&self, rng: &mut ChaCha8Rng, steps: usize) -> Vec<Vec<usize>> {
        let cfg = &self.config;
        let choices = label_sets(cfg.num_classes, cfg.mode);
        let mut out = Vec::with_capacity(steps);
        let mut prev: Option<&Vec<usize>> = None;
        while out.len() < steps {
            let seg = rng.random_range(cfg.min_segment..=cfg.max_segment);
            let pick = loop {
                let c = choices.choose(rng).expect("at least two label sets");
                if prev != Some(c) {
                    break c;
                }
            };
            for _ in 0..seg.min(steps - out.len()) {
                out.push(pick.clone());
            }
            prev = Some(pick);
        }
        out
    }

    /// Maximum-likelihood label set per timestep given the true means:
    /// the candidate minimizing the summed squared distance over present
    /// nodes.
    pub fn bayes_predict(&self, seq: &StgSequence) -> Vec<Vec<usize>> {
        let candidates = label_sets(self.config.num_classes, self.config.mode);
        (0..seq.num_steps)
            .map(|t| {
                let mut best = (f64::INFINITY, &candidates[0]);
                for cand in &candidates {
                    let mut dist = 0.0f64;
                    for tr in seq.tracks.iter().filter(|tr| tr.presence[t]) {
                        let spec = SynthTrack {
                            node_type: tr.node_type,
                            cluster: tr.cluster,
                        };
                        let means = self.means_for(&spec);
                        for (j, &x) in tr.features.row(t).iter().enumerate() {
                            let mu: f32 = cand.iter().map(|&c| means.means[c][j]).sum();
                            dist += ((x - mu) as f64).powi(2);
                        }
                    }
                    if dist < best.0 {
                        best = (dist, cand);
                    }
                }
                best.1.clone()
            })
            .collect()
    }
}

/// Candidate label sets: singletons, plus unordered pairs in multi mode.
fn label_sets(classes: usize, mode: LabelMode) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..classes).map(|c| vec![c]).collect();
    if mode == LabelMode::Multi {
        for a in 0..classes {
            for b in a + 1..classes {
                out.push(vec![a, b]);
            }
        }
    }
    out
}

/// All `num_sequences` sequences of a world plus its oracle.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<(Vec<StgSequence>, SynthOracle)> {
    let world = SynthWorld::new(config.clone(), seed)?;
    let seqs = (0..config.num_sequences)
        .map(|i| world.sequence(i))
        .collect::<Result<Vec<_>>>()?;
    Ok((seqs, world.oracle()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn same_seed_same_sequences() {
        let cfg = SynthConfig::benchmark(3);
        let (a, _) = synth_generate(&cfg, 5).unwrap();
        let (b, _) = synth_generate(&cfg, 5).unwrap();
        assert_eq!(a, b);
        let (c, _) = synth_generate(&cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sequence_does_not_depend_on_count() {
        let a = SynthWorld::new(SynthConfig::benchmark(2), 1).unwrap();
        let b = SynthWorld::new(SynthConfig::benchmark(9), 1).unwrap();
        assert_eq!(a.sequence(1).unwrap(), b.sequence(1).unwrap());
    }

    #[test]
    fn zero_noise_gives_exact_means() {
        let mut cfg = SynthConfig::benchmark(1);
        cfg.noise = 0.0;
        let world = SynthWorld::new(cfg, 2).unwrap();
        let seq = world.sequence(0).unwrap();
        let Labels::Single(labels) = &seq.labels else { panic!() };
        for tr in &seq.tracks {
            let m = world.means_for(&SynthTrack {
                node_type: tr.node_type,
                cluster: tr.cluster,
            });
            for t in 0..seq.num_steps {
                assert_eq!(tr.features.row(t), m.means[labels[t]].as_slice());
            }
        }
    }

    #[test]
    fn adjacent_segments_differ_and_lengths_in_range() {
        let cfg = SynthConfig::benchmark(10);
        let world = SynthWorld::new(cfg.clone(), 3).unwrap();
        for i in 0..10 {
            let seq = world.sequence(i).unwrap();
            assert!((cfg.min_steps..=cfg.max_steps).contains(&seq.num_steps));
            let Labels::Single(l) = &seq.labels else { panic!() };
            let changes = l.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(changes >= 1, "at least one boundary in {} steps", l.len());
        }
    }

    #[test]
    fn bayes_oracle_is_exact_without_noise() {
        for mode in [LabelMode::Single, LabelMode::Multi] {
            let mut cfg = SynthConfig::benchmark(4);
            cfg.noise = 0.0;
            cfg.mode = mode;
            let world = SynthWorld::new(cfg, 4).unwrap();
            for i in 0..4 {
                let seq = world.sequence(i).unwrap();
                let pred = world.bayes_predict(&seq);
                for (t, p) in pred.iter().enumerate() {
                    match &seq.labels {
                        Labels::Single(l) => assert_eq!(p, &vec![l[t]]),
                        Labels::Multi(m) => {
                            let truth: Vec<usize> = (0..m.cols()).filter(|&c| m.at(t, c) == 1.0).collect();
                            assert_eq!(p, &truth);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn absence_keeps_first_track() {
        let mut cfg = SynthConfig::benchmark(2);
        cfg.absence_prob = 0.5;
        let (seqs, _) = synth_generate(&cfg, 8).unwrap();
        for s in &seqs {
            assert!(s.tracks[0].presence.iter().all(|&p| p));
            assert!(s.tracks[1..].iter().any(|tr| tr.presence.contains(&false)));
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut one_class = SynthConfig::benchmark(1);
        one_class.num_classes = 1;
        assert!(matches!(SynthWorld::new(one_class, 0), Err(Error::Validation(_))));
        let mut no_clusters = SynthConfig::benchmark(1);
        no_clusters.clusters.clear();
        assert!(matches!(SynthWorld::new(no_clusters, 0), Err(Error::Validation(_))));
    }
}
