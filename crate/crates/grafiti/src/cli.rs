//! Command-line surface: generate data, inspect it, train, evaluate,
//! and benchmark scaling.
//!
//! Every command reads an optional flat TOML config file; each key has
//! a CLI flag twin and flags win. Each run writes its fully resolved
//! configuration next to its outputs, so results stay reproducible.
//! Exit codes: 0 success, 2 usage error, 1 runtime failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate, ingest_csv, make_tasks, stats, write_csv, DatasetMeta, Horizon, SyntheticSpec,
    TaskInstance, TaskWindow,
};
use crate::graph::ts2graph;
use crate::model::{forward_graph, Checkpoint, ModelConfig, ModelParams};
use crate::numerics::Tape;
use crate::training::{
    baseline_carry_forward, baseline_train_mean, evaluate, make_splits, run_cv_resumable,
    select_hyperparameters, TrainConfig,
};

pub enum CliError {
    /// Bad flags or config values; exit code 2.
    Usage(String),
    /// Everything that fails after the invocation was well-formed; exit 1.
    Runtime(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Parser)]
#[command(
    name = "grafiti",
    version,
    about = "Forecasting irregular time series via sparsity-graph edge prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV with a JSON sidecar.
    Generate(GenerateArgs),
    /// Print dataset statistics as JSON.
    Stats(StatsArgs),
    /// Cross-validated training with hyperparameter search.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the per-fold test splits.
    Evaluate(EvaluateArgs),
    /// Measure forward and backward wall time against edge count.
    Benchmark(BenchmarkArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    }
}

/// Optional keys of the flat TOML config file; every key has a flag twin.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    instances: Option<usize>,
    channels: Option<usize>,
    events_min: Option<usize>,
    events_max: Option<usize>,
    window: Option<f64>,
    horizon_steps: Option<usize>,
    horizon_span: Option<f64>,
    sparsity: Option<f64>,
    noise_std: Option<f64>,
    mixing: Option<f64>,
    amplitude_min: Option<f64>,
    amplitude_max: Option<f64>,
    frequency_min: Option<f64>,
    frequency_max: Option<f64>,
    seed: Option<u64>,
    observe_until: Option<f64>,
    forecast_steps: Option<usize>,
    forecast_span: Option<f64>,
    layers: Option<usize>,
    heads: Option<usize>,
    hidden: Option<usize>,
    lr: Option<f64>,
    lr_halving_patience: Option<u32>,
    max_epochs: Option<usize>,
    early_stop_patience: Option<u32>,
    batch_size: Option<usize>,
    folds: Option<usize>,
    validation_fraction: Option<f64>,
    test_fraction: Option<f64>,
    hyper_samples: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn write_resolved<T: Serialize>(resolved: &T, path: &Path) -> Result<(), CliError> {
    let text = toml::to_string(resolved).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Output CSV path; the sidecar and resolved config land next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    events_min: Option<usize>,
    #[arg(long)]
    events_max: Option<usize>,
    /// Observation window length.
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    horizon_steps: Option<usize>,
    #[arg(long)]
    horizon_span: Option<f64>,
    /// Share of missing cells, in [0, 1).
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Weight of the shared cross-channel component.
    #[arg(long)]
    mixing: Option<f64>,
    #[arg(long)]
    amplitude_min: Option<f64>,
    #[arg(long)]
    amplitude_max: Option<f64>,
    #[arg(long)]
    frequency_min: Option<f64>,
    #[arg(long)]
    frequency_max: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ResolvedGenerate {
    instances: usize,
    channels: usize,
    events_min: usize,
    events_max: usize,
    window: f64,
    horizon_steps: usize,
    horizon_span: f64,
    sparsity: f64,
    noise_std: f64,
    mixing: f64,
    amplitude_min: f64,
    amplitude_max: f64,
    frequency_min: f64,
    frequency_max: f64,
    seed: u64,
}

fn cmd_generate(a: GenerateArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref())?;
    let defaults = SyntheticSpec::default();
    let spec = SyntheticSpec {
        instance_count: pick(a.instances, file.instances, defaults.instance_count),
        channel_count: pick(a.channels, file.channels, defaults.channel_count),
        events_min: pick(a.events_min, file.events_min, defaults.events_min),
        events_max: pick(a.events_max, file.events_max, defaults.events_max),
        window: pick(a.window, file.window, defaults.window),
        horizon_steps: pick(a.horizon_steps, file.horizon_steps, defaults.horizon_steps),
        horizon_span: pick(a.horizon_span, file.horizon_span, defaults.horizon_span),
        amplitude_range: (
            pick(a.amplitude_min, file.amplitude_min, defaults.amplitude_range.0),
            pick(a.amplitude_max, file.amplitude_max, defaults.amplitude_range.1),
        ),
        frequency_range: (
            pick(a.frequency_min, file.frequency_min, defaults.frequency_range.0),
            pick(a.frequency_max, file.frequency_max, defaults.frequency_range.1),
        ),
        mixing_strength: pick(a.mixing, file.mixing, defaults.mixing_strength),
        sparsity: pick(a.sparsity, file.sparsity, defaults.sparsity),
        noise_std: pick(a.noise_std, file.noise_std, defaults.noise_std),
        seed: pick(a.seed, file.seed, defaults.seed),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;

    let ds = generate(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut meta = DatasetMeta::new(ds.channel_count);
    meta.seed = Some(spec.seed);
    meta.window = Some(TaskWindow {
        observe_until: spec.window,
        horizon: Horizon::Steps(spec.horizon_steps),
    });
    write_csv(&ds, &a.out, &meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_resolved(
        &ResolvedGenerate {
            instances: spec.instance_count,
            channels: spec.channel_count,
            events_min: spec.events_min,
            events_max: spec.events_max,
            window: spec.window,
            horizon_steps: spec.horizon_steps,
            horizon_span: spec.horizon_span,
            sparsity: spec.sparsity,
            noise_std: spec.noise_std,
            mixing: spec.mixing_strength,
            amplitude_min: spec.amplitude_range.0,
            amplitude_max: spec.amplitude_range.1,
            frequency_min: spec.frequency_range.0,
            frequency_max: spec.frequency_range.1,
            seed: spec.seed,
        },
        &a.out.with_extension("resolved.toml"),
    )?;
    let st = stats(&ds);
    eprintln!(
        "wrote {} instances ({} channels, sparsity {:.1}%) to {}",
        st.sample_count,
        st.channel_count,
        st.sparsity_percent,
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
}

fn cmd_stats(a: StatsArgs) -> Result<(), CliError> {
    let (ds, _) = ingest_csv(&a.data).map_err(|e| CliError::Runtime(e.to_string()))?;
    let st = stats(&ds);
    println!("{}", serde_json::to_string_pretty(&st)?);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum Ablation {
    /// GraFITi without query edges; queries answered by a dense readout.
    NoTargetEdges,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use only the first N instances of the dataset.
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    observe_until: Option<f64>,
    #[arg(long)]
    forecast_steps: Option<usize>,
    #[arg(long)]
    forecast_span: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Skip hyperparameter search and train the given configuration.
    #[arg(long)]
    no_search: bool,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    /// Continue an interrupted `--no-search` run from its state files.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_halving_patience: Option<u32>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    early_stop_patience: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    hyper_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ResolvedTrain {
    data: String,
    observe_until: f64,
    horizon: String,
    instances: usize,
    layers: usize,
    heads: usize,
    hidden: usize,
    ablation_no_target_edges: bool,
    searched: bool,
    lr: f64,
    lr_halving_patience: u32,
    max_epochs: usize,
    early_stop_patience: u32,
    batch_size: usize,
    folds: usize,
    validation_fraction: f64,
    test_fraction: f64,
    hyper_samples: usize,
    seed: u64,
}

fn train_config_from(a: &TrainArgs, file: &FileConfig) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: pick(a.lr, file.lr, d.lr),
        lr_halving_patience: pick(a.lr_halving_patience, file.lr_halving_patience, d.lr_halving_patience),
        max_epochs: pick(a.max_epochs, file.max_epochs, d.max_epochs),
        early_stop_patience: pick(a.early_stop_patience, file.early_stop_patience, d.early_stop_patience),
        batch_size: pick(a.batch_size, file.batch_size, d.batch_size),
        folds: pick(a.folds, file.folds, d.folds),
        validation_fraction: pick(a.validation_fraction, file.validation_fraction, d.validation_fraction),
        test_fraction: pick(a.test_fraction, file.test_fraction, d.test_fraction),
        seed: pick(a.seed, file.seed, d.seed),
        hyper_samples: pick(a.hyper_samples, file.hyper_samples, d.hyper_samples),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn resolve_window(
    flag_until: Option<f64>,
    flag_steps: Option<usize>,
    flag_span: Option<f64>,
    file: &FileConfig,
    meta: Option<&DatasetMeta>,
) -> Result<TaskWindow, CliError> {
    let meta_window = meta.and_then(|m| m.window);
    let observe_until = flag_until
        .or(file.observe_until)
        .or(meta_window.map(|w| w.observe_until))
        .ok_or_else(|| usage("no observation boundary: pass --observe-until or use a dataset with a sidecar window"))?;
    let horizon = if let Some(k) = flag_steps.or(file.forecast_steps) {
        Horizon::Steps(k)
    } else if let Some(h) = flag_span.or(file.forecast_span) {
        Horizon::Span(h)
    } else if let Some(w) = meta_window {
        w.horizon
    } else {
        return Err(usage(
            "no forecast horizon: pass --forecast-steps or --forecast-span",
        ));
    };
    let w = TaskWindow {
        observe_until,
        horizon,
    };
    w.validate().map_err(|e| usage(e.to_string()))?;
    Ok(w)
}

fn load_tasks(
    data: &Path,
    limit: Option<usize>,
    window: &TaskWindow,
) -> Result<(Vec<TaskInstance>, usize), CliError> {
    let (mut ds, _) = ingest_csv(data).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(n) = limit {
        ds.instances.truncate(n);
    }
    let channel_count = ds.channel_count;
    let (tasks, skipped) = make_tasks(&ds, window).map_err(|e| CliError::Runtime(e.to_string()))?;
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} instances without enough future events");
    }
    if tasks.is_empty() {
        return Err(CliError::Runtime(
            "no instance yields a forecasting task for this window".into(),
        ));
    }
    Ok((tasks, channel_count))
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref())?;
    let train_cfg = train_config_from(&a, &file)?;
    let (_, meta) = ingest_csv(&a.data).map_err(|e| CliError::Runtime(e.to_string()))?;
    let window = resolve_window(
        a.observe_until,
        a.forecast_steps,
        a.forecast_span,
        &file,
        meta.as_ref(),
    )?;
    let (tasks, channel_count) = load_tasks(&a.data, a.instances, &window)?;

    let ablation = a.ablation == Some(Ablation::NoTargetEdges);
    let template = ModelConfig {
        layer_count: pick(a.layers, file.layers, 2),
        head_count: pick(a.heads, file.heads, 2),
        hidden_dim: pick(a.hidden, file.hidden, 32),
        channel_count,
        ablation_no_target_edges: ablation,
    };
    template.validate().map_err(|e| usage(e.to_string()))?;
    if a.resume && !a.no_search {
        return Err(usage("--resume requires --no-search"));
    }

    std::fs::create_dir_all(&a.out_dir)?;
    let model_cfg = if a.no_search {
        template
    } else {
        eprintln!(
            "sampling {} hyperparameter candidates",
            train_cfg.hyper_samples
        );
        let (chosen, _) = select_hyperparameters(&tasks, &template, &train_cfg, |cfg, score| {
            eprintln!(
                "candidate L={} heads={} hidden={}: validation MSE {score:.6}",
                cfg.layer_count, cfg.head_count, cfg.hidden_dim
            );
        })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!(
            "chose L={} heads={} hidden={}",
            chosen.layer_count, chosen.head_count, chosen.hidden_dim
        );
        chosen
    };

    let label = if ablation {
        "grafiti-no-target-edges"
    } else {
        "grafiti"
    };
    let (report, params, stats) = run_cv_resumable(
        &tasks,
        &model_cfg,
        &train_cfg,
        label,
        Some(&a.out_dir),
        a.resume,
        |fold, r| {
            eprintln!(
                "fold {fold} epoch {}: train {:.6} val {:.6} lr {:.2e}",
                r.epoch, r.train_mse, r.val_mse, r.lr
            );
        },
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    std::fs::write(
        a.out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Checkpoint::from_params(&model_cfg, &params, train_cfg.seed, Some(stats))
        .save(&a.out_dir.join("model.json"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut curve = String::from("fold,epoch,train_mse,val_mse,lr\n");
    for (fi, fold) in report.folds.iter().enumerate() {
        for r in &fold.epochs {
            writeln!(curve, "{fi},{},{},{},{}", r.epoch, r.train_mse, r.val_mse, r.lr)
                .expect("string write");
        }
    }
    std::fs::write(a.out_dir.join("loss_curve.csv"), curve)?;
    write_resolved(
        &ResolvedTrain {
            data: a.data.display().to_string(),
            observe_until: window.observe_until,
            horizon: match window.horizon {
                Horizon::Steps(k) => format!("steps:{k}"),
                Horizon::Span(h) => format!("span:{h}"),
            },
            instances: tasks.len(),
            layers: model_cfg.layer_count,
            heads: model_cfg.head_count,
            hidden: model_cfg.hidden_dim,
            ablation_no_target_edges: ablation,
            searched: !a.no_search,
            lr: train_cfg.lr,
            lr_halving_patience: train_cfg.lr_halving_patience,
            max_epochs: train_cfg.max_epochs,
            early_stop_patience: train_cfg.early_stop_patience,
            batch_size: train_cfg.batch_size,
            folds: train_cfg.folds,
            validation_fraction: train_cfg.validation_fraction,
            test_fraction: train_cfg.test_fraction,
            hyper_samples: train_cfg.hyper_samples,
            seed: train_cfg.seed,
        },
        &a.out_dir.join("resolved.toml"),
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "label": report.label,
            "test_mse_mean": report.test_mse_mean,
            "test_mse_std": report.test_mse_std,
            "report": a.out_dir.join("report.json").display().to_string(),
        }))?
    );
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    observe_until: Option<f64>,
    #[arg(long)]
    forecast_steps: Option<usize>,
    #[arg(long)]
    forecast_span: Option<f64>,
    /// Evaluate on every instance instead of the per-fold test splits.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the metrics JSON to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let file = load_file_config(a.config.as_deref())?;
    let ckpt =
        Checkpoint::load(&a.checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let params = ckpt.to_params().map_err(|e| CliError::Runtime(e.to_string()))?;
    let model_cfg = ckpt.config.clone();
    let stats = ckpt.normalization.clone().ok_or_else(|| {
        CliError::Runtime("checkpoint carries no normalization statistics".into())
    })?;

    let (_, meta) = ingest_csv(&a.data).map_err(|e| CliError::Runtime(e.to_string()))?;
    let window = resolve_window(
        a.observe_until,
        a.forecast_steps,
        a.forecast_span,
        &file,
        meta.as_ref(),
    )?;
    let (tasks, channel_count) = load_tasks(&a.data, a.instances, &window)?;
    if channel_count != model_cfg.channel_count {
        return Err(CliError::Runtime(format!(
            "checkpoint expects {} channels, dataset has {channel_count}",
            model_cfg.channel_count
        )));
    }

    let d = TrainConfig::default();
    let train_cfg = TrainConfig {
        batch_size: pick(a.batch_size, file.batch_size, d.batch_size),
        folds: pick(a.folds, file.folds, d.folds),
        validation_fraction: pick(a.validation_fraction, file.validation_fraction, d.validation_fraction),
        test_fraction: pick(a.test_fraction, file.test_fraction, d.test_fraction),
        seed: pick(a.seed, file.seed, d.seed),
        ..d
    };
    train_cfg.validate().map_err(|e| usage(e.to_string()))?;

    let fold_sets: Vec<Vec<TaskInstance>> = if a.all {
        vec![tasks.clone()]
    } else {
        let plan =
            make_splits(tasks.len(), &train_cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        plan.folds
            .iter()
            .map(|f| f.test.iter().map(|&i| tasks[i].clone()).collect())
            .collect()
    };
    let mut per_fold = Vec::new();
    let mut cf = Vec::new();
    let mut tm = Vec::new();
    for set in &fold_sets {
        per_fold.push(
            evaluate(&params, &model_cfg, &stats, set, train_cfg.batch_size)
                .map_err(|e| CliError::Runtime(e.to_string()))?,
        );
        cf.push(baseline_carry_forward(set, &stats));
        tm.push(baseline_train_mean(set, &stats));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m = mean(&per_fold);
    let std = (per_fold.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / per_fold.len() as f64)
        .sqrt();
    let metrics = serde_json::json!({
        "version": 1,
        "scope": if a.all { "all" } else { "fold_tests" },
        "mse_per_fold": per_fold,
        "mse_mean": m,
        "mse_std": std,
        "baseline_carry_forward_mean": mean(&cf),
        "baseline_train_mean_mean": mean(&tm),
    });
    let text = serde_json::to_string_pretty(&metrics)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &text)?;
    }
    println!("{text}");
    Ok(())
}

#[derive(Args)]
pub struct BenchmarkArgs {
    /// Event counts to sweep, e.g. 8,16,32,64.
    #[arg(long, value_delimiter = ',', default_values_t = vec![8, 16, 32, 64])]
    events: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    channels: usize,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    /// Instances per measured batch.
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<(), CliError> {
    if a.events.len() < 2 {
        return Err(usage("need at least two event counts to sweep"));
    }
    let model_cfg = ModelConfig {
        layer_count: a.layers,
        head_count: a.heads,
        hidden_dim: a.hidden,
        channel_count: a.channels,
        ablation_no_target_edges: false,
    };
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let params = ModelParams::init(&model_cfg, a.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut csv = String::from("events,edges,forward_seconds,forward_backward_seconds\n");
    for &n in &a.events {
        let spec = SyntheticSpec {
            instance_count: a.batch_size,
            channel_count: a.channels,
            events_min: n,
            events_max: n,
            sparsity: a.sparsity,
            seed: a.seed,
            ..SyntheticSpec::default()
        };
        spec.validate().map_err(|e| usage(e.to_string()))?;
        let ds = generate(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
        let window = TaskWindow {
            observe_until: spec.window,
            horizon: Horizon::Steps(spec.horizon_steps),
        };
        let (tasks, _) = make_tasks(&ds, &window).map_err(|e| CliError::Runtime(e.to_string()))?;
        let graphs = tasks
            .iter()
            .map(|t| ts2graph(&t.series, &t.query))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let edges: usize = graphs.iter().map(|g| g.edge_count()).sum();

        let mut fwd = f64::INFINITY;
        let mut fwd_bwd = f64::INFINITY;
        for _ in 0..a.reps {
            let t0 = Instant::now();
            for g in &graphs {
                let tape = Tape::new();
                forward_graph(&tape, g, &params, &model_cfg)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            fwd = fwd.min(t0.elapsed().as_secs_f64());

            let t0 = Instant::now();
            for g in &graphs {
                let tape = Tape::new();
                let watched = params.watch(&tape);
                let out = forward_graph(&tape, g, &watched, &model_cfg)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let loss = tape
                    .sum(&out)
                    .and_then(|s| tape.backward(&s).map(|_| s))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let _ = loss;
            }
            fwd_bwd = fwd_bwd.min(t0.elapsed().as_secs_f64());
        }
        writeln!(csv, "{n},{edges},{fwd},{fwd_bwd}").expect("string write");
        eprintln!("events {n}: {edges} edges, forward {fwd:.4}s, forward+backward {fwd_bwd:.4}s");
    }
    std::fs::write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}
