//! Command-line front end: `synth`, `train`, `eval`, `gradcheck`, `ablate`.
//!
//! Every run resolves its configuration from defaults, then an optional JSON
//! config file, then `--set key=value` overrides, then dedicated flags.
//! Unknown keys are rejected. Commands with an output directory write the
//! resolved configuration there as `resolved_config.json`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::Graph;
use crate::data_io::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data_io::manifest::{load_dataset, save_dataset};
use crate::data_io::synth::{generate_synthetic, planted_oracle_report, SyntheticConfig};
use crate::data_io::{read_json, write_json};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckOptions, GradReport};
use crate::metrics::{comparison_table, BucketScheme, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::step_network::{CarryMode, StepVariant};
use crate::trainer::{evaluate, stratified_split, train, TrainConfig, TrainLog};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Parser)]
#[command(name = "aqtc", version, about = "Grounded multi-step answer prediction over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-signal synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and keep the best validation epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the GRU and MLP step networks on the same split and compare.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// JSON config file; keys mirror the flag names with underscores.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key (`key=value`, value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame sampling-rate multiplier.
    #[arg(long)]
    pub frame_multiplier: Option<usize>,
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Fixed candidate count per step (default: the sample's button count).
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Comma-separated bucket fractions.
    #[arg(long, value_delimiter = ',')]
    pub bucket_mix: Option<Vec<f64>>,
}

#[derive(Debug, Args, Clone)]
pub struct TrainFlags {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_o: Option<usize>,
    #[arg(long)]
    pub d_s: Option<usize>,
    #[arg(long)]
    pub step_variant: Option<StepVariant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub precision: Option<crate::tensor::Precision>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Plain attention cascade without residual additions.
    #[arg(long)]
    pub no_cascade_residual: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (or manifest file).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Button-count bucket upper bounds.
    #[arg(long, value_delimiter = ',', default_value = "10,20")]
    pub bucket_bounds: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub step_variant: Option<StepVariant>,
    #[arg(long)]
    pub coords_per_param: Option<usize>,
    /// Finite-difference step.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

/// Small end-to-end configuration for finite-difference checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Feature width and model width.
    pub d_h: usize,
    pub heads: usize,
    pub frames: usize,
    pub sentences: usize,
    pub candidates: usize,
    pub steps: usize,
    pub seed: u64,
    pub step_variant: StepVariant,
    pub cascade_residual: bool,
    pub coords_per_param: usize,
    pub step_size: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            d_h: 16,
            heads: 2,
            frames: 5,
            sentences: 4,
            candidates: 3,
            steps: 2,
            seed: 0,
            step_variant: StepVariant::Gru,
            cascade_residual: true,
            coords_per_param: 10,
            step_size: 1e-5,
            tolerance: 1e-4,
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

fn put<T: Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((
            key.to_string(),
            serde_json::to_value(v).expect("flag values serialize"),
        ));
    }
}

/// Defaults, then `file`, then `overrides`, each layer only touching keys
/// the defaults already define.
pub fn resolve_config<C>(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
{
    let Value::Object(mut merged) = serde_json::to_value(C::default()).expect("defaults serialize") else {
        unreachable!("config types serialize to objects")
    };
    let mut apply = |key: &str, value: Value, source: &str| -> Result<()> {
        if !merged.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?} in {source}")));
        }
        merged.insert(key.to_string(), value);
        Ok(())
    };
    if let Some(path) = file {
        let obj: Map<String, Value> = read_json(path)?;
        for (k, v) in obj {
            apply(&k, v, &path.display().to_string())?;
        }
    }
    for (k, v) in overrides {
        apply(k, v.clone(), "overrides")?;
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))
}

fn overrides_from(raw: &[String]) -> Result<Vec<(String, Value)>> {
    raw.iter().map(|s| parse_override(s)).collect()
}

fn synth_config(args: &SynthArgs) -> Result<SyntheticConfig> {
    let mut o = overrides_from(&args.cfg.overrides)?;
    put(&mut o, "seed", args.seed);
    put(&mut o, "n_samples", args.n_samples);
    put(&mut o, "dim", args.dim);
    put(&mut o, "noise_sigma", args.noise_sigma);
    put(&mut o, "frames", args.frames);
    put(&mut o, "frame_multiplier", args.frame_multiplier);
    put(&mut o, "sentences", args.sentences);
    put(&mut o, "steps", args.steps);
    put(&mut o, "candidates", args.candidates);
    put(&mut o, "bucket_mix", args.bucket_mix.clone());
    resolve_config(args.cfg.config.as_deref(), &o)
}

pub fn train_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut o = overrides_from(&flags.cfg.overrides)?;
    put(&mut o, "epochs", flags.epochs);
    put(&mut o, "batch_size", flags.batch_size);
    put(&mut o, "learning_rate", flags.learning_rate);
    put(&mut o, "d_h", flags.d_h);
    put(&mut o, "heads", flags.heads);
    put(&mut o, "d_o", flags.d_o);
    put(&mut o, "d_s", flags.d_s);
    put(&mut o, "step_variant", flags.step_variant);
    put(&mut o, "seed", flags.seed);
    put(&mut o, "precision", flags.precision);
    put(&mut o, "val_fraction", flags.val_fraction);
    put(&mut o, "workers", flags.workers);
    if flags.no_cascade_residual {
        put(&mut o, "cascade_residual", Some(false));
    }
    let config: TrainConfig = resolve_config(flags.cfg.config.as_deref(), &o)?;
    config.validate()?;
    Ok(config)
}

fn gradcheck_config(args: &GradcheckArgs) -> Result<GradcheckConfig> {
    let mut o = overrides_from(&args.cfg.overrides)?;
    put(&mut o, "d_h", args.d_h);
    put(&mut o, "heads", args.heads);
    put(&mut o, "frames", args.frames);
    put(&mut o, "sentences", args.sentences);
    put(&mut o, "candidates", args.candidates);
    put(&mut o, "steps", args.steps);
    put(&mut o, "seed", args.seed);
    put(&mut o, "step_variant", args.step_variant);
    put(&mut o, "coords_per_param", args.coords_per_param);
    put(&mut o, "step_size", args.step_size);
    put(&mut o, "tolerance", args.tolerance);
    resolve_config(args.cfg.config.as_deref(), &o)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct GenerationReport<'a> {
    config: &'a SyntheticConfig,
    bucket_counts: Vec<usize>,
    oracle: MetricsReport,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let config = synth_config(args)?;
    config.validate()?;
    let synth = generate_synthetic(&config)?;
    let oracle = planted_oracle_report(&synth, &config.scheme())?;
    save_dataset(&args.out, &synth.dataset)?;
    write_json(&args.out.join(RESOLVED_CONFIG_FILE), &config)?;
    write_json(
        &args.out.join("generation_report.json"),
        &GenerationReport {
            config: &config,
            bucket_counts: config.bucket_counts(),
            oracle: oracle.clone(),
        },
    )?;
    println!(
        "wrote {} samples to {} (oracle R@1 {:.4})",
        synth.dataset.len(),
        args.out.display(),
        oracle.r_at_1
    );
    Ok(())
}

/// Trains, writes checkpoint, log, and validation report under `out`.
pub fn run_training(config: &TrainConfig, data: &Path, out: &Path) -> Result<(TrainLog, MetricsReport)> {
    let dataset = load_dataset(data)?;
    create_dir(out)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), config)?;
    let outcome = train(config, &dataset)?;
    save_checkpoint(&out.join("checkpoint"), &outcome.checkpoint)?;
    outcome.log.write_jsonl(&out.join("train_log.jsonl"))?;

    let (_, val) = stratified_split(&dataset.samples, config.val_fraction, config.seed, &config.scheme())?;
    let eval = evaluate(&outcome.model, &val, &config.scheme(), config.workers)?;
    write_text(&out.join("validation_report.txt"), &eval.report.render())?;
    Ok((outcome.log, eval.report.overall))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = train_config(&args.flags)?;
    let (log, val) = run_training(&config, &args.data, &args.out)?;
    println!(
        "best epoch {} of {}: validation R@1 {:.4} R@3 {:.4} MR {:.4} MRR {:.4}",
        log.best_epoch,
        log.epochs.len(),
        val.r_at_1,
        val.r_at_3,
        val.mr,
        val.mrr
    );
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let scheme = BucketScheme {
        bounds: args.bucket_bounds.clone(),
    };
    scheme.validate()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    if dataset.is_empty() {
        return Err(Error::Contract("dataset has no samples".into()));
    }
    let mut expected: ModelConfig = ckpt.meta.model;
    expected.d_v = dataset.d_v;
    expected.d_t = dataset.d_t;
    let model: Model<f32> = ckpt.to_model(Some(&expected))?;
    let eval = evaluate(&model, &dataset.samples, &scheme, args.workers)?;
    let text = eval.report.render();
    if let Some(out) = &args.out {
        create_dir(out)?;
        #[derive(Serialize)]
        struct EvalEcho<'a> {
            checkpoint: &'a Path,
            data: &'a Path,
            workers: usize,
            bucket_bounds: &'a [usize],
        }
        write_json(
            &out.join(RESOLVED_CONFIG_FILE),
            &EvalEcho {
                checkpoint: &args.checkpoint,
                data: &args.data,
                workers: args.workers,
                bucket_bounds: &args.bucket_bounds,
            },
        )?;
        write_text(&out.join("metrics.txt"), &text)?;
        write_json(&out.join("metrics.json"), &eval.report)?;
    }
    Ok(text)
}

/// Runs the finite-difference check on one synthetic sample.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradReport> {
    let mc = ModelConfig {
        step_variant: config.step_variant,
        cascade_residual: config.cascade_residual,
        ..ModelConfig::with_width(config.d_h, config.d_h, config.d_h, config.heads)
    };
    mc.validate()?;
    let synth = generate_synthetic(&SyntheticConfig {
        n_samples: 1,
        frames: config.frames,
        sentences: config.sentences,
        steps: config.steps,
        candidates: Some(config.candidates),
        dim: config.d_h,
        noise_sigma: 0.05,
        seed: config.seed,
        ..Default::default()
    })?;
    let bundle = &synth.dataset.samples[0];
    let model = Model::<f64>::new(mc, config.seed)?;
    grad_check(
        &model.store,
        |store| {
            let mut g = Graph::new();
            let fwd = model.forward_with(&mut g, store, bundle, CarryMode::TeacherForcing)?;
            Ok((g, fwd.loss))
        },
        GradCheckOptions {
            step: config.step_size,
            coords_per_param: config.coords_per_param,
            seed: config.seed,
        },
    )
}

pub fn render_grad_report(report: &GradReport, tolerance: f64) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>7} {:>8} {:>8} {:>12} {:>12}",
        "group", "tensors", "checked", "skipped", "max rel err", "max |grad|"
    );
    for g in report.groups() {
        let _ = writeln!(
            out,
            "{:<16} {:>7} {:>8} {:>8} {:>12.3e} {:>12.3e}",
            g.group, g.tensors, g.checked, g.skipped, g.max_rel_error, g.max_abs_grad
        );
    }
    for f in &report.failures {
        let _ = writeln!(out, "FAILED {f}");
    }
    let _ = writeln!(
        out,
        "max relative error {:.3e} (tolerance {:.1e}): {}",
        report.max_rel_error(),
        tolerance,
        if report.passed(tolerance) { "PASS" } else { "FAIL" }
    );
    out
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let config = gradcheck_config(args)?;
    let report = run_gradcheck(&config)?;
    print!("{}", render_grad_report(&report, config.tolerance));
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join(RESOLVED_CONFIG_FILE), &config)?;
        write_json(&out.join("grad_report.json"), &report)?;
    }
    Ok(report.passed(config.tolerance))
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<String> {
    let base = train_config(&args.flags)?;
    create_dir(&args.out)?;
    write_json(&args.out.join(RESOLVED_CONFIG_FILE), &base)?;
    let mut rows = Vec::new();
    for variant in [StepVariant::Gru, StepVariant::Mlp] {
        let config = TrainConfig {
            step_variant: variant,
            ..base.clone()
        };
        let dir = args.out.join(variant.to_string().to_lowercase());
        let (_, val) = run_training(&config, &args.data, &dir)?;
        rows.push((variant.to_string(), val));
    }
    let table = comparison_table(&rows);
    write_text(&args.out.join("ablation.txt"), &table)?;
    Ok(table)
}

/// Parses `argv` and runs the command. Exit status 0 on success, 1 when a
/// check fails, 2 on any contract, configuration, or I/O error.
pub fn run<I, S>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|text| {
            print!("{text}");
            true
        }),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a).map(|table| {
            print!("{table}");
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
