//! Sliding-window inference and dataset evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{LabelMode, Labels, StgSequence};
use crate::metrics::{f1_score, mean_ap, ApReport, F1Report};
use crate::model::StackedStgcn;
use crate::tensor::Tensor;

/// Anything that maps a window-sized sequence to `T × C` raw scores.
pub trait WindowScorer: Sync {
    fn mode(&self) -> LabelMode;
    fn score_window(&self, seq: &StgSequence) -> Result<Tensor>;
}

impl WindowScorer for StackedStgcn {
    fn mode(&self) -> LabelMode {
        self.config.mode
    }

    fn score_window(&self, seq: &StgSequence) -> Result<Tensor> {
        self.predict(seq)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Every covering window counts equally.
    #[default]
    Uniform,
    /// Windows count more near their centre.
    Triangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window: usize,
    pub hop: usize,
    #[serde(default)]
    pub fusion: Fusion,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window: 50,
            hop: 10,
            fusion: Fusion::Uniform,
        }
    }
}

/// Window starts `0, hop, 2·hop, …` plus one window flush with the end.
/// Sequences no longer than the window get the single start 0.
pub fn window_starts(steps: usize, window: usize, hop: usize) -> Result<Vec<usize>> {
    if window == 0 || hop == 0 {
        return Err(invalid!("window and hop must be positive"));
    }
    if steps <= window {
        return Ok(vec![0]);
    }
    let mut starts: Vec<usize> = (0..=steps - window).step_by(hop).collect();
    if *starts.last().expect("non-empty") + window < steps {
        starts.push(steps - window);
    }
    Ok(starts)
}

fn position_weight(fusion: Fusion, offset: usize, len: usize) -> f64 {
    match fusion {
        Fusion::Uniform => 1.0,
        Fusion::Triangular => (offset + 1).min(len - offset) as f64,
    }
}

/// For every timestep, the `(window index, weight)` pairs that fuse into it.
/// Weights of a covered timestep sum to one.
pub fn fusion_weights(steps: usize, cfg: &WindowConfig) -> Result<Vec<Vec<(usize, f64)>>> {
    let starts = window_starts(steps, cfg.window, cfg.hop)?;
    let mut raw: Vec<Vec<(usize, f64)>> = vec![Vec::new(); steps];
    for (w, &s) in starts.iter().enumerate() {
        let len = cfg.window.min(steps - s);
        for off in 0..len {
            raw[s + off].push((w, position_weight(cfg.fusion, off, cfg.window)));
        }
    }
    for entry in &mut raw {
        let total: f64 = entry.iter().map(|e| e.1).sum();
        for e in entry.iter_mut() {
            e.1 /= total;
        }
    }
    Ok(raw)
}

/// Fused per-timestep class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTimeline {
    pub mode: LabelMode,
    /// `T × C`; sigmoid probabilities in multi mode, softmax otherwise.
    pub probs: Tensor,
    pub coverage: Vec<usize>,
}

/// Row-wise softmax or elementwise sigmoid of raw scores.
pub fn to_probabilities(scores: &Tensor, mode: LabelMode) -> Tensor {
    match mode {
        LabelMode::Multi => scores.map(|s| (1.0 / (1.0 + (-s as f64).exp())) as f32),
        LabelMode::Single => {
            let c = scores.cols();
            let mut out = Vec::with_capacity(scores.len());
            for r in 0..scores.rows() {
                let row = scores.row(r);
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
                let exps: Vec<f64> = row.iter().map(|&s| (s as f64 - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| (e / z) as f32));
            }
            Tensor::new(&[scores.rows(), c], out).expect("same shape")
        }
    }
}

pub fn sliding_infer(seq: &StgSequence, scorer: &dyn WindowScorer, cfg: &WindowConfig) -> Result<ScoreTimeline> {
    let steps = seq.num_steps;
    let starts = window_starts(steps, cfg.window, cfg.hop)?;
    let weights = fusion_weights(steps, cfg)?;
    let mut window_probs = Vec::with_capacity(starts.len());
    for &s in &starts {
        let win = if steps <= cfg.window {
            seq.pad_to(cfg.window)?
        } else {
            seq.crop(s, cfg.window)?
        };
        let scores = scorer.score_window(&win)?;
        if scores.rows() != cfg.window {
            return Err(invalid!("scorer returned {} rows for a {}-step window", scores.rows(), cfg.window));
        }
        window_probs.push(to_probabilities(&scores, scorer.mode()));
    }
    let c = window_probs[0].cols();
    let mut acc = vec![0.0f64; steps * c];
    for (t, ws) in weights.iter().enumerate() {
        for &(w, weight) in ws {
            let row = window_probs[w].row(t - starts[w]);
            for (k, &p) in row.iter().enumerate() {
                acc[t * c + k] += weight * p as f64;
            }
        }
    }
    Ok(ScoreTimeline {
        mode: scorer.mode(),
        probs: Tensor::new(&[steps, c], acc.into_iter().map(|v| v as f32).collect())?,
        coverage: weights.iter().map(Vec::len).collect(),
    })
}

/// `k` indices spread evenly over `[0, steps − 1]`, rounded to nearest.
pub fn select_eval_points(steps: usize, k: usize) -> Result<Vec<usize>> {
    if steps == 0 || k == 0 {
        return Err(invalid!("need at least one timestep and one point"));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    Ok((0..k)
        .map(|i| (i as f64 * (steps - 1) as f64 / (k - 1) as f64).round() as usize)
        .collect())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Maximal runs of equal ground-truth labels over masked-in steps.
pub fn label_segments(labels: &[usize], mask: &[bool]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        if !mask[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < labels.len() && mask[t] && labels[t] == labels[start] {
            t += 1;
        }
        out.push((start, t, labels[start]));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Single-label scoring per frame instead of per labeled segment.
    pub per_frame: bool,
    /// Evaluation points per sequence in multi-label mode.
    pub points: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            per_frame: false,
            points: 25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<F1Report>,
    /// mAP at the evenly spaced evaluation points.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_points: Option<ApReport>,
    /// mAP over every labeled timestep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_full: Option<ApReport>,
}

/// Predicted and true labels for single-label F1.
pub fn single_label_pairs(seq: &StgSequence, tl: &ScoreTimeline, per_frame: bool) -> Result<(Vec<usize>, Vec<usize>)> {
    let Labels::Single(labels) = &seq.labels else {
        return Err(invalid!("single-label scoring of a multi-label sequence"));
    };
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    if per_frame {
        for t in (0..seq.num_steps).filter(|&t| seq.label_mask[t]) {
            pred.push(argmax(tl.probs.row(t)));
            truth.push(labels[t]);
        }
    } else {
        let c = tl.probs.cols();
        for (s, e, l) in label_segments(labels, &seq.label_mask) {
            let mut mean = vec![0.0f32; c];
            for t in s..e {
                for (m, &p) in mean.iter_mut().zip(tl.probs.row(t)) {
                    *m += p;
                }
            }
            pred.push(argmax(&mean));
            truth.push(l);
        }
    }
    Ok((pred, truth))
}

/// Runs sliding inference on every sequence (in parallel) and scores the
/// dataset.
pub fn evaluate(
    seqs: &[StgSequence],
    scorer: &dyn WindowScorer,
    window: &WindowConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let timelines = infer_all(seqs, scorer, window)?;
    evaluate_timelines(seqs, &timelines, opts)
}

pub fn infer_all(seqs: &[StgSequence], scorer: &dyn WindowScorer, window: &WindowConfig) -> Result<Vec<ScoreTimeline>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seqs.len().max(1));
    let chunk = seqs.len().div_ceil(threads).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| sliding_infer(s, scorer, window))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(seqs.len());
        for h in handles {
            out.extend(h.join().expect("inference thread panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate_timelines(seqs: &[StgSequence], timelines: &[ScoreTimeline], opts: &EvalOptions) -> Result<EvalReport> {
    if seqs.is_empty() || seqs.len() != timelines.len() {
        return Err(invalid!("{} sequences for {} timelines", seqs.len(), timelines.len()));
    }
    let num_classes = seqs[0].num_classes;
    if let Some(s) = seqs.iter().find(|s| s.num_classes != num_classes) {
        return Err(invalid!("mixed class counts {} and {}", num_classes, s.num_classes));
    }
    if let Some(tl) = timelines.iter().find(|tl| tl.probs.cols() != num_classes) {
        return Err(invalid!("scores have {} classes, labels {}", tl.probs.cols(), num_classes));
    }
    match seqs[0].mode() {
        LabelMode::Single => {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for (s, tl) in seqs.iter().zip(timelines) {
                let (p, t) = single_label_pairs(s, tl, opts.per_frame)?;
                pred.extend(p);
                truth.extend(t);
            }
            Ok(EvalReport {
                f1: Some(f1_score(&pred, &truth, num_classes)?),
                map_points: None,
                map_full: None,
            })
        }
        LabelMode::Multi => {
            let (mut ps, mut pt, mut fs, mut ft) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (s, tl) in seqs.iter().zip(timelines) {
                let Labels::Multi(m) = &s.labels else {
                    return Err(invalid!("mixed label modes in one dataset"));
                };
                let avail: Vec<usize> = (0..s.num_steps).filter(|&t| s.label_mask[t]).collect();
                if avail.is_empty() {
                    continue;
                }
                let row = |t: usize| -> (Vec<f32>, Vec<bool>) {
                    (tl.probs.row(t).to_vec(), m.row(t).iter().map(|&v| v == 1.0).collect())
                };
                for i in select_eval_points(avail.len(), opts.points)? {
                    let (a, b) = row(avail[i]);
                    ps.push(a);
                    pt.push(b);
                }
                for &t in &avail {
                    let (a, b) = row(t);
                    fs.push(a);
                    ft.push(b);
                }
            }
            Ok(EvalReport {
                f1: None,
                map_points: Some(mean_ap(&ps, &pt)?),
                map_full: Some(mean_ap(&fs, &ft)?),
            })
        }
    }
}
