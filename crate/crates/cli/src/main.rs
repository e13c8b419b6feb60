//! `stgcn` command-line driver.
//!
//! Exit codes: 0 on success, 2 for invalid input or configuration, 3 for
//! numerical failures (including a failed gradient check), 1 for I/O.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use stgcn::gradcheck::{self, CheckReport, Tolerance};
use stgcn::graph::{LabelMode, StgSequence};
use stgcn::infer::{self, EvalOptions, Fusion, WindowConfig};
use stgcn::io::{self, DatasetManifest, IngestTable, LoadedSequence, ManifestEntry, Split};
use stgcn::model::{Harmonization, ModelConfig, StackedStgcn};
use stgcn::synth::{SynthConfig, SynthWorld};
use stgcn::train::{self, Checkpoint, CurveRow, TrainConfig};
use stgcn::{Error, Tape};

#[derive(Parser)]
#[command(name = "stgcn", version, about = "Stacked spatio-temporal GCN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with its ground-truth oracle.
    Synth(SynthArgs),
    /// Convert a per-segment feature table into an STGS sequence.
    Ingest(IngestArgs),
    /// Train a model, writing a checkpoint per epoch and a loss curve.
    Train(TrainArgs),
    /// Write fused per-timestep probabilities for each sequence.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Share of sequences, taken from the end, assigned to the test split.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct IngestArgs {
    /// JSON feature table.
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base name of the written files.
    #[arg(long)]
    name: String,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// Shipped preset: cad120, charades-vgg or charades-i3d.
    #[arg(long, conflicts_with_all = ["model_config", "train_config"])]
    preset: Option<String>,
    #[arg(long, requires = "train_config")]
    model_config: Option<PathBuf>,
    #[arg(long, requires = "model_config")]
    train_config: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    temporal_span: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    stack_depth: Option<usize>,
    #[arg(long)]
    harmonization: Option<HarmonizationArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f32>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    momentum: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HarmonizationArg {
    Projection,
    PerCluster,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Add test-split loss and metric rows to the curve after each epoch.
    #[arg(long)]
    eval_test: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn keeps(self, s: Split) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => s == Split::Train,
            SplitArg::Test => s == Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Uniform,
    Triangular,
}

#[derive(Args)]
struct WindowArgs {
    #[arg(long, default_value_t = 50)]
    window: usize,
    #[arg(long, default_value_t = 10)]
    hop: usize,
    #[arg(long, value_enum, default_value_t = FusionArg::Uniform)]
    fusion: FusionArg,
}

impl WindowArgs {
    fn config(&self) -> WindowConfig {
        WindowConfig {
            window: self.window,
            hop: self.hop,
            fusion: match self.fusion {
                FusionArg::Uniform => Fusion::Uniform,
                FusionArg::Triangular => Fusion::Triangular,
            },
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[command(flatten)]
    window: WindowArgs,
    /// Score single-label predictions per frame instead of per segment.
    #[arg(long)]
    per_frame: bool,
    /// Evaluation points per sequence for multi-label mAP.
    #[arg(long, default_value_t = 25)]
    points: usize,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check this model instead of the built-in tiny models.
    #[arg(long, conflicts_with = "preset")]
    model_config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: u64,
    /// Skip the whole-model checks.
    #[arg(long)]
    ops_only: bool,
    /// Probe at most this many coordinates per tensor; defaults to 4 for
    /// user-supplied models.
    #[arg(long)]
    max_coords: Option<usize>,
    #[arg(long, default_value_t = 3)]
    nodes: usize,
    #[arg(long, default_value_t = 8)]
    steps: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Dimension(_) | Error::Contract(_) => 2,
        Error::Numerical(_) => 3,
        Error::Io(_) => 1,
        // malformed JSON is bad input; other serde failures are I/O
        Error::Json(j) if j.is_data() || j.is_syntax() || j.is_eof() => 2,
        Error::Json(_) => 1,
    }
}

type Result<T> = std::result::Result<T, Error>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::Validation(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    if !(0.0..=1.0).contains(&a.test_fraction) {
        return Err(Error::Config(format!("test fraction {} outside [0, 1]", a.test_fraction)));
    }
    let config: SynthConfig = read_json(&a.config)?;
    let world = SynthWorld::new(config, a.seed)?;
    prepare_out_dir(&a.out, a.force)?;
    let n = world.config().num_sequences;
    let num_test = (n as f64 * a.test_fraction).round() as usize;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("seq{i:04}");
        let seq = world.sequence(i)?;
        io::write_stgs(&a.out, &name, &seq)?;
        entries.push(ManifestEntry {
            path: format!("{name}.stgs.json"),
            split: if i + num_test >= n { Split::Test } else { Split::Train },
            subject: world.subject(i),
        });
    }
    write_json(&a.out.join("oracle.json"), &world.oracle())?;
    DatasetManifest { sequences: entries }.write(&a.out.join("manifest.json"))?;
    println!("wrote {n} sequences to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_ingest(a: IngestArgs) -> Result<ExitCode> {
    let table: IngestTable = read_json(&a.table)?;
    let seq = io::ingest_cad120_style(&table)?;
    let path = io::stgs_manifest_path(&a.out, &a.name);
    if path.exists() && !a.force {
        return Err(Error::Validation(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    fs::create_dir_all(&a.out)?;
    let path = io::write_stgs(&a.out, &a.name, &seq)?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Preset or explicit config files, then flag overrides.
fn resolve_configs(c: &ConfigArgs, seed: u64) -> Result<(ModelConfig, TrainConfig)> {
    let (mut model, mut train) = match (&c.preset, &c.model_config, &c.train_config) {
        (Some(name), _, _) => {
            let p = io::preset(name)?;
            (p.model, p.train)
        }
        (None, Some(m), Some(t)) => (read_json::<ModelConfig>(m)?, read_json::<TrainConfig>(t)?),
        _ => {
            return Err(Error::Config(
                "give --preset or both --model-config and --train-config".into(),
            ))
        }
    };
    if let Some(v) = c.d_model {
        model.d_model = v;
    }
    if let Some(v) = c.temporal_span {
        model.temporal_span = v;
    }
    if let Some(v) = c.levels {
        model.levels = v;
    }
    if let Some(v) = c.stack_depth {
        model.stack_depth = v;
    }
    if let Some(h) = c.harmonization {
        model.harmonization = match h {
            HarmonizationArg::Projection => Harmonization::Projection,
            HarmonizationArg::PerCluster => Harmonization::PerCluster,
        };
    }
    if let Some(v) = c.epochs {
        train.epochs = v;
    }
    if let Some(v) = c.lr0 {
        train.lr0 = v;
    }
    if let Some(v) = c.max_steps {
        train.max_steps = v;
    }
    if c.momentum.is_some() {
        train.momentum = c.momentum;
    }
    train.seed = seed;
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn load_split(manifest: &Path, split: SplitArg) -> Result<Vec<LoadedSequence>> {
    let all = DatasetManifest::load(manifest)?;
    let kept: Vec<_> = all.into_iter().filter(|l| split.keeps(l.entry.split)).collect();
    if kept.is_empty() {
        return Err(Error::Validation(format!(
            "{} has no sequences in the requested split",
            manifest.display()
        )));
    }
    Ok(kept)
}

/// Mean full-sequence loss without recording gradients.
fn mean_loss(model: &StackedStgcn, seqs: &[StgSequence]) -> Result<f64> {
    let mut total = 0.0;
    for s in seqs {
        let input = model.prepare(s)?;
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let scores = model.forward(&mut tape, &bound, &input)?;
        let loss = train::sequence_loss(&mut tape, scores, s)?;
        total += tape.value(loss).item() as f64;
    }
    Ok(total / seqs.len() as f64)
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let (model_cfg, train_cfg) = resolve_configs(&a.config, a.seed)?;
    let data = DatasetManifest::load(&a.manifest)?;
    let (train_set, test_set): (Vec<_>, Vec<_>) = data.into_iter().partition(|l| l.entry.split == Split::Train);
    let train_seqs: Vec<StgSequence> = train_set.into_iter().map(|l| l.seq).collect();
    let test_seqs: Vec<StgSequence> = test_set.into_iter().map(|l| l.seq).collect();
    if a.eval_test && test_seqs.is_empty() {
        return Err(Error::Validation("--eval-test needs test sequences in the manifest".into()));
    }
    let resume = a.resume.as_deref().map(io::read_checkpoint).transpose()?;
    if resume.is_none() {
        prepare_out_dir(&a.out, a.force)?;
    } else {
        fs::create_dir_all(&a.out)?;
    }
    let out = a.out.clone();
    let mut on_epoch = |stats: &train::EpochStats, ck: &Checkpoint| -> Result<Vec<CurveRow>> {
        io::write_checkpoint(&out.join(format!("epoch{:03}.ckpt.json", stats.epoch)), ck)?;
        let mut line = format!("epoch {} lr {:.6} train loss {:.6}", stats.epoch, stats.lr, stats.train_loss);
        let mut rows = Vec::new();
        if a.eval_test {
            let model = ck.to_model()?;
            let loss = mean_loss(&model, &test_seqs)?;
            let report = infer::evaluate(&test_seqs, &model, &WindowConfig::default(), &EvalOptions::default())?;
            let metric = train::headline(&report);
            line += &format!(" test loss {loss:.6} metric {metric:.4}");
            rows.push(CurveRow {
                epoch: stats.epoch,
                split: "test".into(),
                loss,
                metric: Some(metric),
            });
        }
        eprintln!("{line}");
        Ok(rows)
    };
    let outcome = train::train(&train_seqs, &model_cfg, &train_cfg, resume, &mut on_epoch)?;
    let curve_path = a.out.join("curve.csv");
    let mut curve = if a.resume.is_some() && curve_path.exists() {
        io::read_curve(&curve_path)?
    } else {
        Vec::new()
    };
    curve.extend(outcome.curve);
    io::write_curve(&curve_path, &curve)?;
    io::write_checkpoint(&a.out.join("final.ckpt.json"), &outcome.checkpoint)?;
    println!("{}", a.out.join("final.ckpt.json").display());
    Ok(ExitCode::SUCCESS)
}

/// Loads the checkpoint and the requested sequences, checking that they
/// fit the model.
fn model_and_data(manifest: &Path, checkpoint: &Path, split: SplitArg) -> Result<(StackedStgcn, Vec<LoadedSequence>)> {
    let model = io::read_checkpoint(checkpoint)?.to_model()?;
    let data = load_split(manifest, split)?;
    for l in &data {
        model
            .config
            .check_sequence(&l.seq)
            .map_err(|e| Error::Validation(format!("{}: {e}", l.entry.path)))?;
    }
    Ok((model, data))
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode> {
    let (model, data) = model_and_data(&a.manifest, &a.checkpoint, a.split)?;
    prepare_out_dir(&a.out, a.force)?;
    let seqs: Vec<StgSequence> = data.iter().map(|l| l.seq.clone()).collect();
    let timelines = infer::infer_all(&seqs, &model, &a.window.config())?;
    for (l, tl) in data.iter().zip(&timelines) {
        let stem = l.entry.path.trim_end_matches(".stgs.json").replace(['/', '\\'], "_");
        let probs: Vec<&[f32]> = (0..tl.probs.rows()).map(|t| tl.probs.row(t)).collect();
        write_json(
            &a.out.join(format!("{stem}.scores.json")),
            &json!({
                "sequence": l.entry.path,
                "mode": tl.mode,
                "coverage": tl.coverage,
                "probs": probs,
            }),
        )?;
    }
    println!("wrote {} timelines to {}", timelines.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let (model, data) = model_and_data(&a.manifest, &a.checkpoint, a.split)?;
    let seqs: Vec<StgSequence> = data.into_iter().map(|l| l.seq).collect();
    let opts = EvalOptions {
        per_frame: a.per_frame,
        points: a.points,
    };
    let report = infer::evaluate(&seqs, &model, &a.window.config(), &opts)?;
    let metrics = match model.config.mode {
        LabelMode::Single => {
            let f1 = report.f1.expect("single mode reports F1");
            json!({
                "mode": "single",
                "scoring": if a.per_frame { "frame" } else { "segment" },
                "per_class": f1.per_class,
                "macro_f1": f1.macro_f1,
            })
        }
        LabelMode::Multi => json!({
            "mode": "multi",
            "points": report.map_points,
            "full": report.map_full,
        }),
    };
    let text = serde_json::to_string_pretty(&metrics)?;
    if let Some(path) = &a.out {
        fs::write(path, text.clone() + "\n")?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let user_model = match (&a.model_config, &a.preset) {
        (Some(p), _) => Some(read_json::<ModelConfig>(p)?),
        (None, Some(name)) => Some(io::preset(name)?.model),
        (None, None) => None,
    };
    let mut tol = Tolerance::default();
    let mut reports: Vec<CheckReport> = Vec::new();
    match user_model {
        Some(cfg) if !a.ops_only => {
            cfg.validate()?;
            tol.max_coords = Some(a.max_coords.unwrap_or(4));
            reports.extend(gradcheck::op_suite(&Tolerance { max_coords: a.max_coords, ..tol }, a.seed)?);
            reports.extend(gradcheck::check_model(&cfg, a.nodes, a.steps, &tol, a.seed)?);
        }
        _ => {
            tol.max_coords = a.max_coords;
            reports.extend(if a.ops_only {
                gradcheck::op_suite(&tol, a.seed)?
            } else {
                gradcheck::full_suite(&tol, a.seed)?
            });
        }
    }
    let passed = reports.iter().all(|r| r.passed);
    let summary: Value = json!({ "passed": passed, "tolerance": tol, "checks": reports });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    for r in reports.iter().filter(|r| !r.passed) {
        eprintln!(
            "FAIL {}: {}/{} coordinates within relative tolerance, max abs error {:.3e}",
            r.name, r.rel_ok, r.coords, r.max_abs_err
        );
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(3) })
}
