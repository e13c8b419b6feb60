//! SGD training on windowed sequences.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{LabelMode, Labels, StgSequence};
use crate::infer::{evaluate, EvalOptions, EvalReport, WindowConfig};
use crate::model::{ModelConfig, Params, StackedStgcn};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn default_max_steps() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LabelMode,
    pub lr0: f32,
    /// Epochs between learning-rate drops.
    pub sched_step: usize,
    pub sched_drop: f32,
    /// Training window length.
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Heavy-ball coefficient; plain SGD when absent.
    #[serde(default)]
    pub momentum: Option<f32>,
}

impl TrainConfig {
    pub fn cad120(seed: u64) -> Self {
        Self {
            mode: LabelMode::Single,
            lr0: 0.0004,
            sched_step: 1,
            sched_drop: 0.9,
            max_steps: 50,
            epochs: 30,
            seed,
            momentum: None,
        }
    }

    pub fn charades_vgg(seed: u64) -> Self {
        Self {
            mode: LabelMode::Multi,
            lr0: 0.001,
            sched_step: 10,
            sched_drop: 0.999,
            max_steps: 50,
            epochs: 30,
            seed,
            momentum: None,
        }
    }

    pub fn charades_i3d(seed: u64) -> Self {
        Self {
            lr0: 0.0005,
            sched_drop: 0.995,
            ..Self::charades_vgg(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.sched_drop > 0.0 && self.sched_drop <= 1.0) {
            return Err(Error::Config(format!("drop rate must lie in (0, 1], got {}", self.sched_drop)));
        }
        if self.sched_step == 0 || self.max_steps == 0 {
            return Err(Error::Config("schedule step and window length must be positive".into()));
        }
        if let Some(m) = self.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("momentum must lie in [0, 1), got {m}")));
            }
        }
        Ok(())
    }
}

/// `lr0 · drop^⌊epoch / step⌋`.
pub fn step_lr(epoch: usize, cfg: &TrainConfig) -> f32 {
    let k = (epoch / cfg.sched_step) as i32;
    (cfg.lr0 as f64 * (cfg.sched_drop as f64).powi(k)) as f32
}

/// `p ← p − lr · g` for every parameter with a gradient.
pub fn sgd_step(params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f32) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| invalid!("gradient for unknown parameter {name}"))?;
        *p = p.zip_map(g, |w, d| w - lr * d)?;
    }
    Ok(())
}

/// A random `max_steps` window of `seq`, or the whole sequence padded to
/// `max_steps` with masked, absent steps when it is shorter.
pub fn train_window_sample(seq: &StgSequence, max_steps: usize, rng: &mut impl Rng) -> Result<StgSequence> {
    if max_steps == 0 {
        return Err(invalid!("window length must be positive"));
    }
    if seq.num_steps >= max_steps {
        let start = rng.random_range(0..=seq.num_steps - max_steps);
        seq.crop(start, max_steps)
    } else {
        seq.pad_to(max_steps)
    }
}

/// Masked loss matching the label mode.
pub fn sequence_loss(tape: &mut Tape, scores: Var, seq: &StgSequence) -> Result<Var> {
    match &seq.labels {
        Labels::Single(l) => tape.masked_ce_loss(scores, l, &seq.label_mask),
        Labels::Multi(t) => tape.masked_bce_loss(scores, t, &seq.label_mask),
    }
}

/// ChaCha8 generator position, enough to resume the sample stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        if self.seed.len() != 64 {
            return Err(invalid!("rng seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|_| invalid!("rng seed is not hex"))?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| invalid!("bad rng word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub params: Params,
    /// Momentum buffers, when momentum is on.
    pub velocity: Option<Params>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_model(&self) -> Result<StackedStgcn> {
        StackedStgcn::from_params(self.model.clone(), self.params.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
}

/// Runs `cfg.epochs` epochs from a fresh model, or continues `resume`.
/// `on_epoch` sees each finished epoch with its checkpoint and may return
/// extra curve rows (validation metrics, say).
pub fn train(
    data: &[StgSequence],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochStats, &Checkpoint) -> Result<Vec<CurveRow>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if cfg.mode != model_cfg.mode {
        return Err(Error::Config(format!(
            "train mode {:?} differs from model mode {:?}",
            cfg.mode, model_cfg.mode
        )));
    }
    for s in data {
        model_cfg.check_sequence(s)?;
    }
    let (mut model, mut velocity, mut rng, start) = match resume {
        Some(ck) => {
            if &ck.model != model_cfg {
                return Err(Error::Config("checkpoint model config differs".into()));
            }
            (ck.to_model()?, ck.velocity, ck.rng.restore()?, ck.epoch)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            (StackedStgcn::new(model_cfg.clone(), cfg.seed)?, None, rng, 0)
        }
    };
    if cfg.momentum.is_some() && velocity.is_none() {
        velocity = Some(Params::new(
            model.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        ));
    }
    let mut curve = Vec::new();
    for epoch in start..cfg.epochs {
        let lr = step_lr(epoch, cfg);
        // shuffle from the identity so a resumed run sees the same order
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for &i in &order {
            let window = train_window_sample(&data[i], cfg.max_steps, &mut rng)?;
            let input = model.prepare(&window)?;
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let scores = model.forward(&mut tape, &bound, &input)?;
            let loss = sequence_loss(&mut tape, scores, &window)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss {value} at epoch {epoch}, sequence {i}")));
            }
            total += value as f64;
            let grads = tape.backward(loss)?;
            let mut named = BTreeMap::new();
            for (name, var) in bound.iter() {
                if let Some(g) = grads.get(*var) {
                    named.insert(name.clone(), g.clone());
                }
            }
            match (&mut velocity, cfg.momentum) {
                (Some(v), Some(mu)) => {
                    for (name, g) in &named {
                        let buf = v.get_mut(name).expect("velocity mirrors params");
                        *buf = buf.zip_map(g, |b, d| mu * b + d)?;
                    }
                    let steps: BTreeMap<String, Tensor> =
                        named.keys().map(|k| (k.clone(), v.get(k).expect("present").clone())).collect();
                    sgd_step(&mut model.params, &steps, lr)?;
                }
                _ => sgd_step(&mut model.params, &named, lr)?,
            }
        }
        if let Some((name, _)) = model.params.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Numerical(format!("parameter {name} diverged at epoch {epoch}")));
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            lr,
            train_loss: total / data.len() as f64,
        };
        curve.push(CurveRow {
            epoch: stats.epoch,
            split: "train".into(),
            loss: stats.train_loss,
            metric: None,
        });
        let ck = Checkpoint {
            model: model.config.clone(),
            train: cfg.clone(),
            epoch: stats.epoch,
            params: model.params.clone(),
            velocity: velocity.clone(),
            rng: RngState::capture(&rng),
        };
        curve.extend(on_epoch(&stats, &ck)?);
    }
    let checkpoint = Checkpoint {
        model: model.config.clone(),
        train: cfg.clone(),
        epoch: cfg.epochs.max(start),
        params: model.params,
        velocity,
        rng: RngState::capture(&rng),
    };
    Ok(TrainOutcome { checkpoint, curve })
}

/// Headline number of a report: macro F1 or full-timeline mAP.
pub fn headline(report: &EvalReport) -> f64 {
    report
        .f1
        .as_ref()
        .map(|f| f.macro_f1)
        .or(report.map_full.as_ref().map(|m| m.map))
        .unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub held_out_subject: usize,
    pub report: EvalReport,
}

/// Leave-one-subject-out cross-validation; fold `k` holds out subject `k`.
/// Folds run concurrently as independent training runs.
pub fn cross_validate(
    data: &[(StgSequence, usize)],
    folds: usize,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    window: &WindowConfig,
    opts: &EvalOptions,
) -> Result<Vec<FoldResult>> {
    if folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..folds)
            .map(|k| {
                scope.spawn(move || -> Result<FoldResult> {
                    let train_set: Vec<StgSequence> =
                        data.iter().filter(|(_, s)| s % folds != k).map(|(q, _)| q.clone()).collect();
                    let test_set: Vec<StgSequence> =
                        data.iter().filter(|(_, s)| s % folds == k).map(|(q, _)| q.clone()).collect();
                    if test_set.is_empty() {
                        return Err(invalid!("fold {k} has no held-out sequences"));
                    }
                    let out = train(&train_set, model_cfg, cfg, None, &mut |_, _| Ok(Vec::new()))?;
                    let model = out.checkpoint.to_model()?;
                    Ok(FoldResult {
                        fold: k,
                        held_out_subject: k,
                        report: evaluate(&test_set, &model, window, opts)?,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("fold thread panicked"))
            .collect()
    })
}
