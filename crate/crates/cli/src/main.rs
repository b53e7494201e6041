//! `mmfusion` — batch driver for the multimodal fusion pipeline.
//!
//! Subcommands: `gen-data` (synthetic dataset), `train`, `eval`, `predict`,
//! `smooth`, `vote`, `ablate`, `gradcheck`. Errors print one
//! machine-parseable JSON line plus a human message and exit nonzero.
//! Subcommands never mutate their input files.

use clap::{Args, Parser, Subcommand};
use mmfusion_core::checkpoint::load_checkpoint;
use mmfusion_core::config::{
    ablation_dataset, ablation_run, ci_dataset, ci_run, paper_dataset, paper_run, RunConfig,
};
use mmfusion_core::error::CoreError;
use mmfusion_core::features::{
    generate_synthetic, load_dataset_expecting, save_dataset, SyntheticSpec, Video,
};
use mmfusion_core::labels::{AU_NAMES, EXPR_NAMES};
use mmfusion_core::model::{check_params_compatible, Task};
use mmfusion_core::postprocess::{read_predictions, smooth, vote, write_predictions};
use mmfusion_core::train::{
    ablate, evaluate, predict_sequences, run_training_folds, AblationCondition, MetricsReport,
};
use mmfusion_core::{ParamSet, Result};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mmfusion", version, about = "Multimodal AU detection and expression recognition at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal dataset file
    GenData(GenDataArgs),
    /// Train k folds, writing checkpoints and a report
    Train(TrainArgs),
    /// Evaluate a checkpoint: predictions plus raw/smoothed macro F1
    Eval(EvalArgs),
    /// Write raw per-frame predictions for every video in a dataset
    Predict(PredictArgs),
    /// Temporally smooth a prediction file
    Smooth(SmoothArgs),
    /// Majority-vote several aligned prediction files
    Vote(VoteArgs),
    /// Run the ablation grid and emit side-by-side scores
    Ablate(AblateArgs),
    /// Finite-difference checks for every differentiable op
    Gradcheck,
}

#[derive(Args)]
struct GenDataArgs {
    /// Recipe to start from: ci | ablation | paper
    #[arg(long, default_value = "ci")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    videos_per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    strength_static: Option<f64>,
    #[arg(long)]
    strength_expr: Option<f64>,
    #[arg(long)]
    strength_audio: Option<f64>,
    #[arg(long)]
    strength_word: Option<f64>,
    #[arg(long)]
    run_min: Option<usize>,
    #[arg(long)]
    run_max: Option<usize>,
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
}

/// Shared config resolution: a TOML file or a named preset, with overrides.
#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: ci | paper | ablation
    #[arg(long)]
    preset: Option<String>,
    /// Task: au | expr (required with --preset ci/paper)
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file (overrides the config's path)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory (overrides the config's path)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated fold subset, e.g. "0,2" (default: all folds)
    #[arg(long)]
    folds: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fold table written by `train` (with --fold, selects that split)
    #[arg(long)]
    folds_file: Option<PathBuf>,
    /// Evaluate this fold's validation videos instead of the whole dataset
    #[arg(long)]
    fold: Option<usize>,
    /// Evaluate the training side of the fold instead of the validation side
    #[arg(long, default_value_t = false)]
    train_split: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output prediction file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SmoothArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input prediction file
    #[arg(long)]
    input: PathBuf,
    /// Output prediction file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VoteArgs {
    /// Prediction files to vote over (repeat; at least two)
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// "all" or a comma-separated subset of
    /// only_static,no_exp_emb,no_audio,no_word,no_trans
    #[arg(long, default_value = "all")]
    conditions: String,
    /// Comma-separated fold subset trained per condition (default: all)
    #[arg(long)]
    folds: Option<String>,
}

fn parse_task(s: &str) -> Result<Task> {
    match s {
        "au" => Ok(Task::Au),
        "expr" => Ok(Task::Expr),
        other => Err(CoreError::config(format!(
            "unknown task `{}`, expected au or expr",
            other
        ))),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), None) => RunConfig::load(path)?,
        (None, preset) => {
            let name = preset.as_deref().unwrap_or("ci");
            match name {
                "ablation" => ablation_run(),
                "ci" | "paper" => {
                    let task = parse_task(args.task.as_deref().ok_or_else(|| {
                        CoreError::config("--task is required with --preset ci/paper")
                    })?)?;
                    if name == "ci" {
                        ci_run(task)
                    } else {
                        paper_run(task)
                    }
                }
                other => {
                    return Err(CoreError::config(format!(
                        "unknown preset `{}`, expected ci, paper or ablation",
                        other
                    )))
                }
            }
        }
        (Some(_), Some(_)) => {
            return Err(CoreError::config("--config and --preset are mutually exclusive"))
        }
    };
    if let Some(task) = &args.task {
        cfg.task = parse_task(task)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &args.dataset {
        cfg.paths.dataset = p.to_string_lossy().into_owned();
    }
    if let Some(p) = &args.out_dir {
        cfg.paths.out_dir = p.to_string_lossy().into_owned();
    }
    cfg.apply_env_overrides()?;
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_for(cfg: &RunConfig) -> Result<Vec<Video>> {
    if cfg.paths.dataset.is_empty() {
        return Err(CoreError::config(
            "no dataset path: pass --dataset or set [paths] dataset",
        ));
    }
    load_dataset_expecting(Path::new(&cfg.paths.dataset), &cfg.features)
}

fn out_dir_for(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.paths.out_dir.is_empty() {
        return Err(CoreError::config(
            "no output directory: pass --out-dir or set [paths] out_dir",
        ));
    }
    let dir = PathBuf::from(&cfg.paths.out_dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn parse_fold_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| CoreError::config(format!("bad fold id `{}`", tok)))
        })
        .collect()
}

fn load_params(cfg: &RunConfig, path: &Path) -> Result<LoadedParams> {
    let model_cfg = cfg.model_config();
    if cfg.float32 {
        let p: ParamSet<f32> = load_checkpoint(path)?;
        check_params_compatible(&p, &model_cfg)?;
        Ok(LoadedParams::F32(p))
    } else {
        let p: ParamSet<f64> = load_checkpoint(path)?;
        check_params_compatible(&p, &model_cfg)?;
        Ok(LoadedParams::F64(p))
    }
}

enum LoadedParams {
    F32(ParamSet<f32>),
    F64(ParamSet<f64>),
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match args.preset.as_str() {
        "ci" => ci_dataset(7),
        "ablation" => ablation_dataset(7),
        "paper" => paper_dataset(7),
        other => {
            return Err(CoreError::config(format!(
                "unknown dataset preset `{}`, expected ci, ablation or paper",
                other
            )))
        }
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.classes {
        spec.class_count = v;
    }
    if let Some(v) = args.videos_per_class {
        spec.videos_per_class = v;
    }
    if let Some(v) = args.frames {
        spec.frames_per_video = v;
    }
    if let Some(v) = args.noise_std {
        spec.noise_std = v;
    }
    if let Some(v) = args.strength_static {
        spec.signal_strength.static_feat = v;
    }
    if let Some(v) = args.strength_expr {
        spec.signal_strength.expr_emb = v;
    }
    if let Some(v) = args.strength_audio {
        spec.signal_strength.audio_feat = v;
    }
    if let Some(v) = args.strength_word {
        spec.signal_strength.word_emb = v;
    }
    if let Some(v) = args.run_min {
        spec.run_length_min = v;
    }
    if let Some(v) = args.run_max {
        spec.run_length_max = v;
    }
    let videos = generate_synthetic(&spec)?;
    save_dataset(&spec.dims, &videos, &args.out)?;
    let frames: usize = videos.iter().map(|v| v.frame_count()).sum();
    println!(
        "wrote {} videos ({} frames) to {}",
        videos.len(),
        frames,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let videos = dataset_for(&cfg)?;
    let out_dir = out_dir_for(&cfg)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    let fold_ids = match &args.folds {
        Some(s) => parse_fold_list(s)?,
        None => (0..cfg.training.folds).collect(),
    };
    let report = run_training_folds(&cfg, &videos, Some(&out_dir), &fold_ids)?;
    for fold in &report.folds {
        println!(
            "[fold-{}] best epoch {}: raw F1 {:.4}, smoothed F1 {:.4}",
            fold.fold, fold.best_epoch, fold.raw.macro_avg, fold.smoothed.macro_avg
        );
    }
    println!(
        "mean macro F1: raw {:.4}, smoothed {:.4} ({:.1}s); artifacts in {}",
        report.mean_raw_macro_f1,
        report.mean_smoothed_macro_f1,
        report.wall_time_secs,
        out_dir.display()
    );
    Ok(())
}

fn class_names(task: Task) -> Vec<String> {
    match task {
        Task::Au => AU_NAMES.iter().map(|s| s.to_string()).collect(),
        Task::Expr => EXPR_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let videos = dataset_for(&cfg)?;
    let out_dir = out_dir_for(&cfg)?;
    let selected: Vec<&Video> = match (&args.folds_file, args.fold) {
        (Some(path), Some(fold)) => {
            let table = mmfusion_core::datapipe::FoldAssignment::read_table(
                BufReader::new(fs::File::open(path)?),
                cfg.training.folds,
            )?;
            videos
                .iter()
                .filter(|v| (table.fold_of(&v.id) == Some(fold)) != args.train_split)
                .collect()
        }
        (None, None) => videos.iter().collect(),
        _ => {
            return Err(CoreError::config(
                "--folds-file and --fold must be given together",
            ))
        }
    };
    let eval = match load_params(&cfg, &args.checkpoint)? {
        LoadedParams::F32(p) => evaluate(&p, &cfg, &selected)?,
        LoadedParams::F64(p) => evaluate(&p, &cfg, &selected)?,
    };
    let metrics = MetricsReport {
        task: cfg.task,
        config_digest: cfg.digest()?,
        class_names: class_names(cfg.task),
        sample_count: eval.labeled_frames,
        raw: eval.raw_f1.clone(),
        smoothed: eval.smoothed_f1.clone(),
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CoreError::Parse(format!("metrics serialization: {}", e)))?;
    fs::write(out_dir.join("metrics.json"), json)?;
    let mut raw = Vec::new();
    write_predictions(&eval.raw_predictions, &mut raw)?;
    fs::write(out_dir.join("predictions_raw.txt"), raw)?;
    let mut smoothed = Vec::new();
    write_predictions(&eval.smoothed_predictions, &mut smoothed)?;
    fs::write(out_dir.join("predictions_smoothed.txt"), smoothed)?;
    println!(
        "{} videos, {} labeled frames: raw F1 {:.4}, smoothed F1 {:.4}; wrote metrics.json",
        selected.len(),
        eval.labeled_frames,
        eval.raw_f1.macro_avg,
        eval.smoothed_f1.macro_avg
    );
    Ok(())
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let videos = dataset_for(&cfg)?;
    let refs: Vec<&Video> = videos.iter().collect();
    let predictions = match load_params(&cfg, &args.checkpoint)? {
        LoadedParams::F32(p) => predict_sequences(&p, &cfg, &refs)?,
        LoadedParams::F64(p) => predict_sequences(&p, &cfg, &refs)?,
    };
    let mut buf = Vec::new();
    write_predictions(&predictions, &mut buf)?;
    fs::write(&args.out, buf)?;
    println!(
        "wrote predictions for {} videos to {}",
        predictions.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_smooth(args: &SmoothArgs) -> Result<()> {
    let cfg = resolve_config(&args.config)?;
    let sequences = read_predictions(BufReader::new(fs::File::open(&args.input)?))?;
    let policy = cfg.smoothing_policy();
    let smoothed: Vec<_> = sequences
        .iter()
        .map(|s| smooth(s, &policy))
        .collect::<Result<_>>()?;
    let mut buf = Vec::new();
    write_predictions(&smoothed, &mut buf)?;
    fs::write(&args.out, buf)?;
    println!(
        "smoothed {} sequences into {}",
        smoothed.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_vote(args: &VoteArgs) -> Result<()> {
    if args.inputs.len() < 2 {
        return Err(CoreError::contract("need >= 2 prediction files to vote"));
    }
    let mut models = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        models.push(read_predictions(BufReader::new(fs::File::open(path)?))?);
    }
    let voted = vote(&models)?;
    let mut buf = Vec::new();
    write_predictions(&voted, &mut buf)?;
    fs::write(&args.out, buf)?;
    println!(
        "voted over {} models into {}",
        args.inputs.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut config_args = ConfigArgs {
        config: args.config.config.clone(),
        preset: args.config.preset.clone(),
        task: args.config.task.clone(),
        seed: args.config.seed,
        dataset: args.config.dataset.clone(),
        out_dir: args.config.out_dir.clone(),
    };
    if config_args.config.is_none() && config_args.preset.is_none() {
        config_args.preset = Some("ablation".into());
    }
    let cfg = resolve_config(&config_args)?;
    let videos = dataset_for(&cfg)?;
    let out_dir = out_dir_for(&cfg)?;
    let conditions: Vec<AblationCondition> = if args.conditions == "all" {
        AblationCondition::ALL.to_vec()
    } else {
        args.conditions
            .split(',')
            .map(|s| AblationCondition::parse(s.trim()))
            .collect::<Result<_>>()?
    };
    let fold_ids: Option<Vec<usize>> = match &args.folds {
        Some(s) => Some(parse_fold_list(s)?),
        None => None,
    };
    let all: Vec<usize> = (0..cfg.training.folds).collect();
    let base_folds = fold_ids.clone().unwrap_or(all);

    let base = run_training_folds(&cfg, &videos, None, &base_folds)?;
    println!(
        "{:<12} raw F1 {:.4}  smoothed F1 {:.4}",
        "full", base.mean_raw_macro_f1, base.mean_smoothed_macro_f1
    );
    let mut outcomes = Vec::new();
    for cond in conditions {
        let outcome = ablate(&cfg, cond, &videos, None, fold_ids.as_deref())?;
        println!(
            "{:<12} raw F1 {:.4}  smoothed F1 {:.4}",
            outcome.condition, outcome.mean_raw_macro_f1, outcome.mean_smoothed_macro_f1
        );
        outcomes.push(outcome);
    }
    let doc = serde_json::json!({
        "config_digest": cfg.digest()?,
        "base": base,
        "ablations": outcomes,
    });
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| CoreError::Parse(format!("ablation serialization: {}", e)))?;
    fs::write(out_dir.join("ablation.json"), json)?;
    println!("wrote ablation.json to {}", out_dir.display());
    Ok(())
}

fn cmd_gradcheck() -> Result<i32> {
    let results = mmfusion_core::gradcheck::run_suite()?;
    let mut ok = true;
    println!("{:<24} {:>12}  result", "check", "max rel err");
    for r in &results {
        println!(
            "{:<24} {:>12.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "pass" } else { "FAIL" }
        );
        ok &= r.passed();
    }
    Ok(if ok { 0 } else { 2 })
}

fn error_kind(e: &CoreError) -> &'static str {
    match e {
        CoreError::Contract(_) => "contract",
        CoreError::Config(_) => "config",
        CoreError::Numeric { .. } => "numeric",
        CoreError::Diverged { .. } => "diverged",
        CoreError::Format { .. } => "format",
        CoreError::Parse(_) => "parse",
        CoreError::Io(_) => "io",
    }
}

fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args).map(|_| 0),
        Command::Train(args) => cmd_train(args).map(|_| 0),
        Command::Eval(args) => cmd_eval(args).map(|_| 0),
        Command::Predict(args) => cmd_predict(args).map(|_| 0),
        Command::Smooth(args) => cmd_smooth(args).map(|_| 0),
        Command::Vote(args) => cmd_vote(args).map(|_| 0),
        Command::Ablate(args) => cmd_ablate(args).map(|_| 0),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            let line = serde_json::json!({
                "error": error_kind(&e),
                "message": e.to_string(),
            });
            eprintln!("{}", line);
            eprintln!("error: {}", e);
            std::process::exit(1);
        }
    }
}
