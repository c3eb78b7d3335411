use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use earlyhalt::backbones::{
    BackboneConfig, BackboneKind, Checkpoint, ConvShapeletConfig, EarlyClassifier, LstmConfig, ModelConfig, RunMeta,
};
use earlyhalt::dataio::{
    load_ucr_dir, read_metadata, resolve_normalization, synth_pattern_dataset, write_metadata, write_ucr, Dataset,
    DatasetMeta, LabeledSeries, Normalize, SynthConfig,
};
use earlyhalt::evalreport::{
    domination_table, evaluate, export_scatter, export_trace, load_competitors, read_records, EvalRecord,
    SeriesOutcome,
};
use earlyhalt::halting::StopMode;
use earlyhalt::objective::TradeOff;
use earlyhalt::trainer::{
    grid_search_cv, train_phase1, train_phase2, write_log, CvSettings, EpochRecord, GridSpec, TrainConfig,
    DEFAULT_BATCH_SIZE, DEFAULT_LEARNING_RATE,
};
use earlyhalt::{Error, Scalar};

/// Exit status when `compare` is pointed at competitor results that do not
/// exist.
const EXIT_REFERENCE_MISSING: u8 = 3;

#[derive(Parser)]
#[command(name = "earlyhalt", version, about = "Early time-series classification with a learned stopping head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train (phase 1) or fine-tune (phase 2) a model on a UCR-format dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Cross-validated grid search over backbone configurations.
    Sweep(SweepArgs),
    /// Export the per-step outputs of one series as CSV.
    Trace(TraceArgs),
    /// Win/loss/tie counts of evaluation reports against competitor results.
    Compare(CompareArgs),
    /// Write the synthetic pattern dataset in UCR format.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding <name>_TRAIN and <name>_TEST files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = BackboneKind::Conv)]
    backbone: BackboneKind,
    /// 1 = classification pre-training, 2 = fine-tuning with the stopping head.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: u8,
    /// Trade-off weight, phase 2 only.
    #[arg(long)]
    alpha: Option<f64>,
    /// Learning rate; phase 2 defaults to the rate stored in the --init checkpoint.
    #[arg(long)]
    lr: Option<f64>,
    /// Defaults to 30 for phase 1 and 50 for phase 2.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Phase-1 checkpoint to fine-tune (required for phase 2).
    #[arg(long)]
    init: Option<PathBuf>,
    /// JSON-lines log; defaults to <out>.log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = Normalize::Auto)]
    normalize: Normalize,
    /// Report accuracy on the test split after every epoch.
    #[arg(long)]
    validate: bool,
    /// Record wall-clock epoch durations in the log (makes logs differ between runs).
    #[arg(long)]
    record_wall_time: bool,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Phase 2: only train the stopping head.
    #[arg(long)]
    freeze_classifier: bool,
    #[command(flatten)]
    shape: ShapeArgs,
}

/// Backbone hyperparameters; unset values take the desk-scale defaults.
#[derive(Args)]
struct ShapeArgs {
    /// Conv: number of convolution blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Conv: kernels per block.
    #[arg(long)]
    kernels: Option<usize>,
    /// Conv: kernel-width increase per block.
    #[arg(long)]
    width_step: Option<usize>,
    /// Conv: dropout rate on the hidden state.
    #[arg(long)]
    dropout: Option<f64>,
    /// LSTM: stacked layers.
    #[arg(long)]
    layers: Option<usize>,
    /// LSTM: hidden units per layer.
    #[arg(long)]
    hidden: Option<usize>,
}

impl ShapeArgs {
    fn backbone(&self, kind: BackboneKind, input_dim: usize) -> BackboneConfig {
        match BackboneConfig::default_for(kind, input_dim) {
            BackboneConfig::Conv(c) => BackboneConfig::Conv(ConvShapeletConfig {
                num_blocks: self.blocks.unwrap_or(c.num_blocks),
                kernels_per_block: self.kernels.unwrap_or(c.kernels_per_block),
                width_step: self.width_step.unwrap_or(c.width_step),
                dropout_rate: self.dropout.unwrap_or(c.dropout_rate),
                input_dim,
            }),
            BackboneConfig::Lstm(c) => BackboneConfig::Lstm(LstmConfig {
                num_layers: self.layers.unwrap_or(c.num_layers),
                hidden_dim: self.hidden.unwrap_or(c.hidden_dim),
                input_dim,
            }),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = StopMode::Bernoulli)]
    mode: StopMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON grid description.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = Normalize::Auto)]
    normalize: Normalize,
    /// Cross-validation table as JSON; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Series index within the split.
    #[arg(long)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Args)]
struct CompareArgs {
    /// Glob matching evaluation report files.
    #[arg(long)]
    ours: String,
    /// Competitor CSV with columns method,dataset,param,accuracy,earliness.
    #[arg(long)]
    theirs: PathBuf,
    #[arg(long)]
    alpha: f64,
    /// Restrict to one competitor method.
    #[arg(long)]
    method: Option<String>,
    /// Domination tables as JSON; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Long-format scatter data (CSV) against the selected method.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 200)]
    n_test: usize,
    #[arg(long, default_value_t = 100)]
    length: usize,
    #[arg(long, default_value_t = 0.3)]
    signal_pos: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

type CliResult<T = ()> = Result<T, CliError>;

enum CliError {
    Lib(Error),
    ReferenceMissing(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Lib(Error::Argument(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => match a.precision {
            Precision::F64 => train::<f64>(&a),
            Precision::F32 => train::<f32>(&a),
        },
        Command::Eval(a) => with_checkpoint_precision(&a.ckpt, |ck| match ck.scalar.as_str() {
            "f32" => eval::<f32>(&a, ck),
            _ => eval::<f64>(&a, ck),
        }),
        Command::Sweep(a) => sweep(&a),
        Command::Trace(a) => with_checkpoint_precision(&a.ckpt, |ck| match ck.scalar.as_str() {
            "f32" => trace::<f32>(&a, ck),
            _ => trace::<f64>(&a, ck),
        }),
        Command::Compare(a) => compare(&a),
        Command::Synth(a) => synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
        Err(CliError::ReferenceMissing(msg)) => {
            eprintln!("reference data required: {msg}");
            ExitCode::from(EXIT_REFERENCE_MISSING)
        }
    }
}

fn with_checkpoint_precision(path: &Path, run: impl FnOnce(Checkpoint) -> CliResult) -> CliResult {
    run(Checkpoint::load(path)?)
}

/// Loads a dataset and applies the normalization decision.
fn load_dataset<T: Scalar>(dir: &Path, policy: Normalize) -> CliResult<(Dataset<T>, bool)> {
    let raw: Dataset<T> = load_ucr_dir(dir)?;
    let normalize = resolve_normalization(policy, dir, &raw)?;
    let ds = if normalize { raw.z_normalized() } else { raw };
    Ok((ds, normalize))
}

fn fixed(flag: bool) -> Normalize {
    if flag {
        Normalize::On
    } else {
        Normalize::Off
    }
}

fn split<T>(ds: &Dataset<T>, which: Split) -> &[LabeledSeries<T>] {
    match which {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    }
}

fn train<T: Scalar>(a: &TrainArgs) -> CliResult {
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let (mut model, mut meta, ds, cfg) = if a.phase == 1 {
        if a.alpha.is_some() {
            return Err(usage("--alpha applies to phase 2 only"));
        }
        if a.init.is_some() {
            return Err(usage("--init applies to phase 2 only"));
        }
        let (ds, normalize) = load_dataset::<T>(&a.data, a.normalize)?;
        let config = ModelConfig {
            backbone: a.shape.backbone(a.backbone, ds.input_dim()),
            num_classes: ds.num_classes,
            init_seed: a.seed,
        };
        let model = EarlyClassifier::<T>::new(config)?;
        let lr = a.lr.unwrap_or(DEFAULT_LEARNING_RATE);
        let cfg = TrainConfig::classification(lr, a.epochs.unwrap_or(30), a.seed).clipped_for(a.backbone);
        let meta = RunMeta {
            z_normalize: normalize,
            ..RunMeta::default()
        };
        (model, meta, ds, cfg)
    } else {
        let init = a.init.as_ref().ok_or_else(|| usage("phase 2 needs --init <phase-1 checkpoint>"))?;
        let alpha = TradeOff::new(a.alpha.ok_or_else(|| usage("phase 2 needs --alpha"))?)?;
        let ck = Checkpoint::load(init)?;
        let model: EarlyClassifier<T> = ck.to_model()?;
        let (ds, _) = load_dataset::<T>(&a.data, fixed(ck.meta.z_normalize))?;
        if ds.num_classes != model.num_classes() {
            return Err(usage(format!(
                "checkpoint has {} classes, dataset has {}",
                model.num_classes(),
                ds.num_classes
            )));
        }
        let lr = a.lr.or(ck.meta.learning_rate).unwrap_or(DEFAULT_LEARNING_RATE);
        let kind = model.config().backbone.kind();
        let mut cfg = TrainConfig::finetune(alpha, lr, a.epochs.unwrap_or(50), a.seed).clipped_for(kind);
        cfg.freeze_classifier = a.freeze_classifier;
        (model, ck.meta, ds, cfg)
    };
    let mut cfg = cfg;
    cfg.batch_size = a.batch_size;
    cfg.record_wall_time = a.record_wall_time;

    let log_file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut log_out = std::io::BufWriter::new(log_file);
    let mut write_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        if write_err.is_none() {
            if let Err(e) = write_log(std::slice::from_ref(r), &mut log_out) {
                write_err = Some(e);
            }
        }
    };
    let val = a.validate.then_some(ds.test.as_slice());
    let records = if a.phase == 1 {
        train_phase1(&mut model, &ds.train, val, &cfg, &mut on_epoch)?
    } else {
        train_phase2(&mut model, &ds.train, val, &cfg, &mut on_epoch)?
    };
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log_out.flush().map_err(|e| io_err(&log_path, e))?;

    meta.data_dir = Some(a.data.clone());
    meta.dataset = Some(ds.name.clone());
    meta.phases.push(a.phase);
    meta.alpha = cfg.alpha.map(f64::from);
    meta.learning_rate = Some(cfg.learning_rate);
    meta.epochs = Some(cfg.epochs);
    meta.seed = Some(cfg.seed);
    Checkpoint::from_model(&model, meta).save(&a.out)?;
    if let Some(last) = records.last() {
        println!(
            "phase {} epoch {}: loss {:.6} train_acc {:.4}{}",
            last.phase,
            last.epoch,
            last.loss,
            last.train_acc,
            last.val_acc.map(|v| format!(" test_acc {v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    records: Vec<EvalRecord>,
    checkpoint: &'a Path,
    model: ModelConfig,
    outcomes: Vec<SeriesOutcome>,
}

fn eval<T: Scalar>(a: &EvalArgs, ck: Checkpoint) -> CliResult {
    let alpha = TradeOff::new(a.alpha)?;
    let model: EarlyClassifier<T> = ck.to_model()?;
    let (ds, _) = load_dataset::<T>(&a.data, fixed(ck.meta.z_normalize))?;
    if ds.num_classes != model.num_classes() {
        return Err(usage(format!(
            "checkpoint has {} classes, dataset has {}",
            model.num_classes(),
            ds.num_classes
        )));
    }
    let (record, outcomes) = evaluate(&model, &ds.name, split(&ds, a.split), alpha, a.mode, a.seed)?;
    println!(
        "{}: accuracy {:.4} earliness {:.4} cost {:.4} ({} series, {} mode)",
        record.dataset, record.accuracy, record.earliness, record.mean_cost, record.num_series, record.stop_mode
    );
    let report = EvalReport {
        records: vec![record],
        checkpoint: &a.ckpt,
        model: *model.config(),
        outcomes,
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&a.report, text).map_err(|e| io_err(&a.report, e))
}

fn sweep(a: &SweepArgs) -> CliResult {
    let spec = GridSpec::load(&a.grid)?;
    let (ds, _) = load_dataset::<f64>(&a.data, a.normalize)?;
    let grid = spec.expand(ds.input_dim())?;
    let mut settings = CvSettings::new(a.folds, a.epochs, a.seed);
    settings.batch_size = a.batch_size;
    let report = grid_search_cv(&ds.train, ds.num_classes, &grid, &settings)?;
    let best = &report.rows[report.best];
    eprintln!(
        "best grid point {} of {}: mean accuracy {:.4}, {} parameters",
        report.best,
        grid.len(),
        best.mean_accuracy,
        best.num_parameters
    );
    emit_json(&report, a.report.as_deref())
}

fn trace<T: Scalar>(a: &TraceArgs, ck: Checkpoint) -> CliResult {
    let dir = a
        .data
        .clone()
        .or_else(|| ck.meta.data_dir.clone())
        .ok_or_else(|| usage("checkpoint records no dataset; pass --data"))?;
    let model: EarlyClassifier<T> = ck.to_model()?;
    let (ds, _) = load_dataset::<T>(&dir, fixed(ck.meta.z_normalize))?;
    let series = split(&ds, a.split);
    let s = series.get(a.index).ok_or({
        CliError::Lib(Error::Index {
            op: "trace",
            index: a.index,
            len: series.len(),
        })
    })?;
    let rows = export_trace(&model, s, &ds.label_map, &a.out)?;
    eprintln!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

fn compare(a: &CompareArgs) -> CliResult {
    if !a.theirs.is_file() {
        return Err(CliError::ReferenceMissing(format!(
            "competitor results file {} not found",
            a.theirs.display()
        )));
    }
    let tables = load_competitors(&a.theirs)?;
    let paths = glob::glob(&a.ours).map_err(|e| usage(format!("bad --ours pattern: {e}")))?;
    let mut ours = Vec::new();
    for p in paths {
        let p = p.map_err(|e| usage(e.to_string()))?;
        ours.extend(read_records(&p)?);
    }
    if ours.is_empty() {
        return Err(usage(format!("no evaluation reports match {}", a.ours)));
    }
    let selected: Vec<_> = tables
        .iter()
        .filter(|t| a.method.as_ref().is_none_or(|m| m.eq_ignore_ascii_case(&t.method)))
        .collect();
    if selected.is_empty() {
        return Err(usage("no competitor method matches --method"));
    }
    let mut results = Vec::new();
    for t in &selected {
        let d = domination_table(&ours, t, a.alpha)?;
        eprintln!("{} at alpha {}: {} wins / {} losses / {} ties", d.method, d.alpha, d.wins, d.losses, d.ties);
        results.push(d);
    }
    if let Some(path) = &a.scatter {
        export_scatter(&ours, selected[0], path)?;
    }
    emit_json(&results, a.report.as_deref())
}

fn synth(a: &SynthArgs) -> CliResult {
    let cfg = SynthConfig {
        n_train_per_class: a.n_train,
        n_test_per_class: a.n_test,
        length: a.length,
        signal_pos: a.signal_pos,
        sigma: a.sigma,
        seed: a.seed,
    };
    let ds: Dataset<f64> = synth_pattern_dataset(&cfg)?;
    write_ucr(&ds, &a.out)?;
    write_metadata(
        &a.out,
        &DatasetMeta {
            name: ds.name.clone(),
            z_normalize: Some(false),
            generator: Some(cfg),
        },
    )?;
    debug_assert!(read_metadata(&a.out).is_ok());
    eprintln!("wrote {} in {}", ds.name, a.out.display());
    Ok(())
}

fn emit_json<S: Serialize>(value: &S, path: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
