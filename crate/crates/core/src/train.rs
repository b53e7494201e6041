//! The training harness: fold construction, resampling, the epoch loop with
//! optional remix, cosine-warm-restart SGD, per-epoch validation, best
//! checkpoint selection, evaluation and ablation runs.
//!
//! One fold trains on a single thread; the k folds run concurrently with
//! independent RNG streams derived from the run seed. Console output is
//! line-buffered and prefixed with the fold id.

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::datapipe::{
    make_folds, remix, resample, sample_lambda, ClassCounts, FoldAssignment, TrainSample,
};
use crate::error::{CoreError, Result};
use crate::features::{make_clip, Video};
use crate::labels::{AU_COUNT, EXPR_COUNT};
use crate::losses::{
    au_ce_loss, au_circle_loss, au_macro_f1, expr_ce_loss, expr_macro_f1, AuBatchLabels,
    ExprBatchLabels, F1Report,
};
use crate::model::{bind_model, forward_batch, init_params, FusionMode, ModalityFlags, Task};
use crate::optim::{clip_global_norm, OptimizerState};
use crate::params::ParamSet;
use crate::postprocess::{smooth, PredictionSequence, SeqLabels};
use crate::tensor::{Graph, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub best_epoch: usize,
    pub train_loss_per_epoch: Vec<f64>,
    pub raw: F1Report,
    pub smoothed: F1Report,
}

/// Per-run results. Wall time is measured but kept out of the serialized
/// report so identical seeds produce byte-identical report files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub task: Task,
    pub config_digest: String,
    pub folds: Vec<FoldReport>,
    pub mean_raw_macro_f1: f64,
    pub mean_smoothed_macro_f1: f64,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub task: Task,
    pub config_digest: String,
    pub class_names: Vec<String>,
    pub sample_count: usize,
    pub raw: F1Report,
    pub smoothed: F1Report,
}

#[derive(Debug)]
pub struct EvalOutput {
    pub raw_predictions: Vec<PredictionSequence>,
    pub smoothed_predictions: Vec<PredictionSequence>,
    pub raw_f1: F1Report,
    pub smoothed_f1: F1Report,
    pub labeled_frames: usize,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix(base ^ splitmix(stream))
}

fn materialize_samples(
    videos: &[Video],
    refs: &[crate::datapipe::ClipRef],
    m: usize,
) -> Result<Vec<TrainSample>> {
    refs.iter()
        .map(|r| {
            let clip = make_clip(&videos[r.video], r.frame, m)?;
            Ok(TrainSample::from_clip(clip))
        })
        .collect()
}

fn au_rows_for(samples: &[TrainSample]) -> Result<AuBatchLabels> {
    let rows = samples
        .iter()
        .map(|s| {
            let t = s
                .au_target
                .ok_or_else(|| CoreError::contract("AU task requires AU labels"))?;
            // remixed targets binarize at 0.5: the circle loss needs crisp
            // active/inactive sets
            Ok(std::array::from_fn(|j| (t[j] >= 0.5) as u8))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuBatchLabels { rows })
}

fn expr_rows_for(samples: &[TrainSample]) -> Result<ExprBatchLabels> {
    let rows = samples
        .iter()
        .map(|s| {
            s.expr_target
                .ok_or_else(|| CoreError::contract("EXPR task requires expression labels"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExprBatchLabels { rows })
}

fn batch_forward_and_loss<T: Real>(
    params: &ParamSet<T>,
    cfg: &RunConfig,
    batch: &[TrainSample],
) -> Result<(Graph<T>, Vec<crate::tensor::NodeId>, crate::tensor::NodeId)> {
    let model_cfg = cfg.model_config();
    let mut g: Graph<T> = Graph::new();
    let binding = bind_model(&mut g, params, &model_cfg)?;
    let clips: Vec<&crate::features::ClipRecord> = batch.iter().map(|s| &s.clip).collect();
    let out = forward_batch(&mut g, &binding, &model_cfg, &clips)?;
    let loss = match cfg.task {
        Task::Au => {
            let labels = au_rows_for(batch)?;
            let probs = g.sigmoid(out.raw)?;
            let ce = au_ce_loss(&mut g, probs, &labels)?;
            let circle = au_circle_loss(&mut g, out.raw, &labels)?;
            let weighted = g.scale(circle, cfg.training.circle_weight)?;
            g.add(ce, weighted)?
        }
        Task::Expr => {
            let labels = expr_rows_for(batch)?;
            let probs = g.softmax_rows(out.raw)?;
            expr_ce_loss(&mut g, probs, &labels)?
        }
    };
    Ok((g, binding.node_ids, loss))
}

/// Predict per-frame labels for whole videos, batched.
pub fn predict_sequences<T: Real>(
    params: &ParamSet<T>,
    cfg: &RunConfig,
    videos: &[&Video],
) -> Result<Vec<PredictionSequence>> {
    let model_cfg = cfg.model_config();
    let mut out = Vec::with_capacity(videos.len());
    for video in videos {
        let n = video.frame_count();
        let mut expr_labels: Vec<u8> = Vec::new();
        let mut au_labels: Vec<[u8; AU_COUNT]> = Vec::new();
        let mut start = 0usize;
        while start < n {
            let stop = (start + cfg.training.batch_size).min(n);
            let clips: Vec<crate::features::ClipRecord> = (start..stop)
                .map(|i| make_clip(video, i, model_cfg.window_half))
                .collect::<Result<_>>()?;
            let refs: Vec<&crate::features::ClipRecord> = clips.iter().collect();
            let mut g: Graph<T> = Graph::new();
            let binding = bind_model(&mut g, params, &model_cfg)?;
            let fwd = forward_batch(&mut g, &binding, &model_cfg, &refs)?;
            match cfg.task {
                Task::Expr => {
                    let raw = g.value(fwd.raw);
                    for b in 0..refs.len() {
                        let row = &raw[b * EXPR_COUNT..(b + 1) * EXPR_COUNT];
                        let mut best = 0usize;
                        for (j, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = j;
                            }
                        }
                        expr_labels.push(best as u8);
                    }
                }
                Task::Au => {
                    let probs = g.sigmoid(fwd.raw)?;
                    let pv = g.value(probs);
                    let thr = T::from_f64(cfg.training.au_threshold);
                    for b in 0..refs.len() {
                        let row = &pv[b * AU_COUNT..(b + 1) * AU_COUNT];
                        au_labels.push(std::array::from_fn(|j| (row[j] >= thr) as u8));
                    }
                }
            }
            start = stop;
        }
        let labels = match cfg.task {
            Task::Expr => SeqLabels::Expr(expr_labels),
            Task::Au => SeqLabels::Au(au_labels),
        };
        out.push(PredictionSequence {
            video_id: video.id.clone(),
            labels,
        });
    }
    Ok(out)
}

fn f1_against_labels(
    cfg: &RunConfig,
    predictions: &[PredictionSequence],
    videos: &[&Video],
) -> Result<(F1Report, usize)> {
    match cfg.task {
        Task::Expr => {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for (seq, video) in predictions.iter().zip(videos) {
                let p = match &seq.labels {
                    SeqLabels::Expr(v) => v,
                    _ => return Err(CoreError::contract("prediction kind mismatch")),
                };
                for (i, lab) in video.expr_labels.iter().enumerate() {
                    if let Some(c) = lab {
                        preds.push(p[i]);
                        labels.push(*c);
                    }
                }
            }
            let n = preds.len();
            Ok((expr_macro_f1(&preds, &labels, EXPR_COUNT)?, n))
        }
        Task::Au => {
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for (seq, video) in predictions.iter().zip(videos) {
                let p = match &seq.labels {
                    SeqLabels::Au(v) => v,
                    _ => return Err(CoreError::contract("prediction kind mismatch")),
                };
                for (i, lab) in video.au_labels.iter().enumerate() {
                    if let Some(bits) = lab {
                        preds.push(p[i]);
                        labels.push(*bits);
                    }
                }
            }
            let n = preds.len();
            Ok((au_macro_f1(&preds, &labels)?, n))
        }
    }
}

/// Raw and smoothed predictions with macro F1 over all labeled frames.
pub fn evaluate<T: Real>(
    params: &ParamSet<T>,
    cfg: &RunConfig,
    videos: &[&Video],
) -> Result<EvalOutput> {
    if videos.is_empty() {
        return Err(CoreError::contract("evaluate on an empty split"));
    }
    let raw_predictions = predict_sequences(params, cfg, videos)?;
    let policy = cfg.smoothing_policy();
    let smooth_this = cfg.task == Task::Expr || cfg.smoothing.smooth_au;
    let smoothed_predictions: Vec<PredictionSequence> = if smooth_this {
        raw_predictions
            .iter()
            .map(|s| smooth(s, &policy))
            .collect::<Result<_>>()?
    } else {
        raw_predictions.clone()
    };
    let (raw_f1, labeled_frames) = f1_against_labels(cfg, &raw_predictions, videos)?;
    let (smoothed_f1, _) = f1_against_labels(cfg, &smoothed_predictions, videos)?;
    Ok(EvalOutput {
        raw_predictions,
        smoothed_predictions,
        raw_f1,
        smoothed_f1,
        labeled_frames,
    })
}

/// Train one fold: resample the training videos, run the epoch loop, and
/// return the parameters with the best validation macro F1 (smoothed).
pub fn train_one_fold<T: Real>(
    cfg: &RunConfig,
    videos: &[Video],
    folds: &FoldAssignment,
    fold: usize,
) -> Result<(ParamSet<T>, FoldReport)> {
    let model_cfg = cfg.model_config();
    let train_videos: Vec<Video> = videos
        .iter()
        .filter(|v| folds.fold_of(&v.id) != Some(fold))
        .cloned()
        .collect();
    let val_videos: Vec<&Video> = videos
        .iter()
        .filter(|v| folds.fold_of(&v.id) == Some(fold))
        .collect();
    if train_videos.is_empty() || val_videos.is_empty() {
        return Err(CoreError::contract(format!(
            "fold {} has an empty train or validation split",
            fold
        )));
    }
    for v in &train_videos {
        v.validate(&cfg.features)?;
    }

    let refs = resample(
        &train_videos,
        &cfg.resample,
        derive_seed(cfg.seed, 0x7e5a_0000 + fold as u64),
    )?;
    if refs.is_empty() {
        return Err(CoreError::contract("resampling produced no training clips"));
    }
    let counts = ClassCounts::from_refs(&train_videos, &refs);
    let samples = materialize_samples(&train_videos, &refs, model_cfg.window_half)?;

    let mut params: ParamSet<T> =
        init_params(&model_cfg, derive_seed(cfg.seed, 0x1217_0000 + fold as u64))?;
    let batches_per_epoch = samples.len().div_ceil(cfg.training.batch_size);
    let restart_steps =
        ((cfg.optimizer.restart_epochs * batches_per_epoch as f64).round() as u64).max(1);
    let mut opt: OptimizerState<T> = OptimizerState::new(
        cfg.optimizer.lr_max,
        cfg.optimizer.lr_min,
        restart_steps,
        cfg.optimizer.period_multiplier,
        cfg.optimizer.momentum,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xba7c_0000 + fold as u64));

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut train_loss_per_epoch = Vec::with_capacity(cfg.training.epochs);
    let mut best: Option<(f64, usize, ParamSet<T>, F1Report, F1Report)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.training.epochs {
        // Fisher-Yates shuffle
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.training.batch_size) {
            let mut batch: Vec<TrainSample> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let use_remix = cfg.remix.enabled
                    && samples.len() > 1
                    && rng.random_range(0.0..1.0) < cfg.remix.params.prob;
                if use_remix {
                    let mut j = rng.random_range(0..samples.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    let lambda = sample_lambda(&mut rng, cfg.remix.params.alpha);
                    batch.push(remix(
                        &samples[i],
                        &samples[j],
                        &counts,
                        lambda,
                        cfg.remix.params.kappa,
                        cfg.remix.params.tau,
                    )?);
                } else {
                    batch.push(samples[i].clone());
                }
            }
            let (mut g, param_ids, loss) = batch_forward_and_loss(&params, cfg, &batch)?;
            let loss_value = g.scalar(loss)?.as_f64();
            g.backward(loss)?;
            let mut grads: Vec<Vec<T>> = param_ids.iter().map(|&id| g.grad(id).to_vec()).collect();
            let grad_norm = clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
            if !loss_value.is_finite() {
                return Err(CoreError::Diverged {
                    step,
                    loss: loss_value,
                    lr: opt.learning_rate(),
                    grad_norm,
                });
            }
            opt.sgd_step(&mut params, &grads)?;
            epoch_loss += loss_value * chunk.len() as f64;
            step += 1;
        }
        epoch_loss /= samples.len() as f64;
        train_loss_per_epoch.push(epoch_loss);

        let eval = evaluate(&params, cfg, &val_videos)?;
        let metric = eval.smoothed_f1.macro_avg;
        log::info!(
            "[fold-{}] epoch {}: loss {:.4}, val F1 raw {:.4} smoothed {:.4}",
            fold,
            epoch,
            epoch_loss,
            eval.raw_f1.macro_avg,
            metric
        );
        let improved = best.as_ref().map(|(m, ..)| metric > *m).unwrap_or(true);
        if improved {
            best = Some((metric, epoch, params.clone(), eval.raw_f1, eval.smoothed_f1));
        }
    }

    let (_, best_epoch, best_params, raw, smoothed) = best.expect("at least one epoch ran");
    Ok((
        best_params,
        FoldReport {
            fold,
            best_epoch,
            train_loss_per_epoch,
            raw,
            smoothed,
        },
    ))
}

fn run_impl<T: Real>(
    cfg: &RunConfig,
    videos: &[Video],
    folds: &FoldAssignment,
    fold_ids: &[usize],
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    let started = Instant::now();
    let results: Vec<Result<(ParamSet<T>, FoldReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = fold_ids
            .iter()
            .map(|&fold| scope.spawn(move || train_one_fold::<T>(cfg, videos, folds, fold)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CoreError::contract("fold worker panicked")))
            })
            .collect()
    });

    let mut fold_reports = Vec::with_capacity(results.len());
    for result in results {
        let (params, report) = result?;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("fold{}.ckpt", report.fold));
            save_checkpoint(&params, &path)?;
        }
        fold_reports.push(report);
    }
    fold_reports.sort_by_key(|r| r.fold);

    let mean =
        |f: &dyn Fn(&FoldReport) -> f64| -> f64 {
            fold_reports.iter().map(|r| f(r)).sum::<f64>() / fold_reports.len() as f64
        };
    let report = RunReport {
        task: cfg.task,
        config_digest: cfg.digest()?,
        mean_raw_macro_f1: mean(&|r| r.raw.macro_avg),
        mean_smoothed_macro_f1: mean(&|r| r.smoothed.macro_avg),
        folds: fold_reports,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CoreError::Parse(format!("report serialization: {}", e)))?;
        std::fs::write(dir.join("report.json"), json)?;
    }
    Ok(report)
}

/// Train the given folds (all of them for a normal run), optionally writing
/// `folds.csv`, per-fold checkpoints and `report.json` into `out_dir`.
pub fn run_training_folds(
    cfg: &RunConfig,
    videos: &[Video],
    out_dir: Option<&Path>,
    fold_ids: &[usize],
) -> Result<RunReport> {
    cfg.validate()?;
    for v in videos {
        v.validate(&cfg.features)?;
    }
    let folds = make_folds(videos, cfg.training.folds, derive_seed(cfg.seed, 0xf01d))?;
    for &f in fold_ids {
        if f >= cfg.training.folds {
            return Err(CoreError::config(format!("fold {} out of range", f)));
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        folds.write_table(&mut buf)?;
        std::fs::write(dir.join("folds.csv"), buf)?;
    }
    if cfg.float32 {
        run_impl::<f32>(cfg, videos, &folds, fold_ids, out_dir)
    } else {
        run_impl::<f64>(cfg, videos, &folds, fold_ids, out_dir)
    }
}

/// Full k-fold training run.
pub fn run_training(cfg: &RunConfig, videos: &[Video], out_dir: Option<&Path>) -> Result<RunReport> {
    let all: Vec<usize> = (0..cfg.training.folds).collect();
    run_training_folds(cfg, videos, out_dir, &all)
}

// ---- ablations ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationCondition {
    OnlyStatic,
    NoExprEmb,
    NoAudio,
    NoWord,
    NoTrans,
}

impl AblationCondition {
    pub const ALL: [AblationCondition; 5] = [
        AblationCondition::OnlyStatic,
        AblationCondition::NoExprEmb,
        AblationCondition::NoAudio,
        AblationCondition::NoWord,
        AblationCondition::NoTrans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationCondition::OnlyStatic => "only_static",
            AblationCondition::NoExprEmb => "no_exp_emb",
            AblationCondition::NoAudio => "no_audio",
            AblationCondition::NoWord => "no_word",
            AblationCondition::NoTrans => "no_trans",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CoreError::config(format!("unknown ablation condition `{}`", s)))
    }

    /// The modified configuration: exactly one component changes.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            AblationCondition::OnlyStatic => cfg.model.modalities = ModalityFlags::none(),
            AblationCondition::NoExprEmb => cfg.model.modalities.expr_emb = false,
            AblationCondition::NoAudio => cfg.model.modalities.audio = false,
            AblationCondition::NoWord => cfg.model.modalities.word = false,
            AblationCondition::NoTrans => cfg.model.fusion = FusionMode::Concat,
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationOutcome {
    pub condition: String,
    pub mean_raw_macro_f1: f64,
    pub mean_smoothed_macro_f1: f64,
    /// Audit trail: config lines that differ from the base run.
    pub config_diff: Vec<String>,
    pub report: RunReport,
}

fn config_diff(base: &RunConfig, changed: &RunConfig) -> Result<Vec<String>> {
    let a = base.to_toml()?;
    let b = changed.to_toml()?;
    let mut out = Vec::new();
    for line in a.lines() {
        if !b.lines().any(|l| l == line) {
            out.push(format!("- {}", line));
        }
    }
    for line in b.lines() {
        if !a.lines().any(|l| l == line) {
            out.push(format!("+ {}", line));
        }
    }
    Ok(out)
}

/// Train and evaluate one ablation condition.
pub fn ablate(
    base: &RunConfig,
    condition: AblationCondition,
    videos: &[Video],
    out_dir: Option<&Path>,
    fold_ids: Option<&[usize]>,
) -> Result<AblationOutcome> {
    let cfg = condition.apply(base);
    let all: Vec<usize> = (0..cfg.training.folds).collect();
    let folds = fold_ids.unwrap_or(&all);
    let report = run_training_folds(&cfg, videos, out_dir, folds)?;
    Ok(AblationOutcome {
        condition: condition.name().to_string(),
        mean_raw_macro_f1: report.mean_raw_macro_f1,
        mean_smoothed_macro_f1: report.mean_smoothed_macro_f1,
        config_diff: config_diff(base, &cfg)?,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ci_run, paper_run};
    use crate::features::{generate_synthetic, FeatureDims, PerStream, SyntheticSpec};

    fn tiny_dataset(seed: u64, noise: f64) -> (SyntheticSpec, Vec<Video>) {
        let spec = SyntheticSpec {
            seed,
            class_count: 8,
            videos_per_class: 2,
            frames_per_video: 48,
            dims: FeatureDims {
                d_s: 8,
                d_e: 8,
                d_a: 8,
                d_w: 8,
            },
            signal_strength: PerStream::uniform(1.0),
            noise_std: noise,
            run_length_min: 6,
            run_length_max: 8,
            prototype_map: None,
        };
        let videos = generate_synthetic(&spec).unwrap();
        (spec, videos)
    }

    fn tiny_cfg(task: Task, spec: &SyntheticSpec) -> RunConfig {
        let mut cfg = ci_run(task);
        cfg.features = spec.dims;
        cfg.model.m = 3;
        cfg.model.model_dim = 8;
        cfg.model.heads = 2;
        cfg.model.gru_hidden = 8;
        cfg.model.head_hidden = 8;
        cfg.training.folds = 3;
        cfg.training.epochs = 10;
        cfg.training.batch_size = 16;
        cfg
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (spec, videos) = tiny_dataset(5, 0.05);
        let mut cfg = tiny_cfg(Task::Expr, &spec);
        cfg.optimizer.lr_max = 0.0;
        cfg.optimizer.lr_min = 0.0;
        cfg.training.epochs = 2;
        let folds = make_folds(&videos, cfg.training.folds, derive_seed(cfg.seed, 0xf01d)).unwrap();
        let (trained, _) = train_one_fold::<f32>(&cfg, &videos, &folds, 0).unwrap();
        let fresh: ParamSet<f32> =
            init_params(&cfg.model_config(), derive_seed(cfg.seed, 0x1217_0000)).unwrap();
        assert_eq!(trained.len(), fresh.len());
        for (a, b) in trained.iter().zip(fresh.iter()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.value.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter {} changed under lr = 0", a.name);
        }
    }

    #[test]
    fn identical_seeds_reproduce_loss_curves() {
        let (spec, videos) = tiny_dataset(6, 0.05);
        let mut cfg = tiny_cfg(Task::Expr, &spec);
        cfg.training.epochs = 3;
        let a = run_training_folds(&cfg, &videos, None, &[0]).unwrap();
        let b = run_training_folds(&cfg, &videos, None, &[0]).unwrap();
        assert_eq!(
            a.folds[0].train_loss_per_epoch,
            b.folds[0].train_loss_per_epoch
        );
        assert_eq!(a.folds[0].smoothed.macro_avg, b.folds[0].smoothed.macro_avg);
    }

    #[test]
    fn tiny_expr_run_learns_and_train_f1_dominates_val() {
        let (spec, videos) = tiny_dataset(7, 0.12);
        let mut cfg = tiny_cfg(Task::Expr, &spec);
        // converge hard on the fit set so the sanity direction is structural
        cfg.remix.enabled = false;
        cfg.training.epochs = 20;
        let folds = make_folds(&videos, cfg.training.folds, derive_seed(cfg.seed, 0xf01d)).unwrap();
        let (params, report) = train_one_fold::<f32>(&cfg, &videos, &folds, 0).unwrap();
        assert!(
            report.smoothed.macro_avg >= 0.90,
            "held-out macro F1 {} below 0.90",
            report.smoothed.macro_avg
        );
        let train_videos: Vec<&Video> = videos
            .iter()
            .filter(|v| folds.fold_of(&v.id) != Some(0))
            .collect();
        // sanity direction on raw predictions: the fit set scores at least
        // as well as held-out data
        let on_train = evaluate(&params, &cfg, &train_videos).unwrap();
        let on_val = evaluate(
            &params,
            &cfg,
            &videos
                .iter()
                .filter(|v| folds.fold_of(&v.id) == Some(0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(
            on_train.raw_f1.macro_avg >= on_val.raw_f1.macro_avg - 1e-9,
            "train {} vs val {}",
            on_train.raw_f1.macro_avg,
            on_val.raw_f1.macro_avg
        );
    }

    #[test]
    fn evaluate_rejects_empty_split() {
        let (spec, _) = tiny_dataset(8, 0.05);
        let cfg = tiny_cfg(Task::Expr, &spec);
        let params: ParamSet<f32> = init_params(&cfg.model_config(), 0).unwrap();
        assert!(matches!(
            evaluate(&params, &cfg, &[]),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn smoothing_is_identity_on_constant_label_videos() {
        let spec = SyntheticSpec {
            seed: 4,
            class_count: 2,
            videos_per_class: 2,
            frames_per_video: 30,
            dims: FeatureDims {
                d_s: 8,
                d_e: 6,
                d_a: 6,
                d_w: 6,
            },
            signal_strength: PerStream::uniform(1.0),
            noise_std: 0.0,
            run_length_min: 30,
            run_length_max: 30,
            prototype_map: None,
        };
        let videos = generate_synthetic(&spec).unwrap();
        // constant-label videos and noiseless features: raw == smoothed
        let mut cfg = tiny_cfg(Task::Expr, &spec);
        cfg.features = spec.dims;
        let folds = make_folds(&videos, 2, 0).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.training.folds = 2;
        cfg2.training.epochs = 3;
        let (params, _) = train_one_fold::<f32>(&cfg2, &videos, &folds, 0).unwrap();
        let val: Vec<&Video> = videos
            .iter()
            .filter(|v| folds.fold_of(&v.id) == Some(0))
            .collect();
        let eval = evaluate(&params, &cfg2, &val).unwrap();
        assert_eq!(eval.raw_f1.macro_avg, eval.smoothed_f1.macro_avg);
    }

    #[test]
    fn paper_preset_forward_runs_at_published_dims() {
        use crate::config::paper_dataset;
        use crate::model::{bind_model, forward_batch};
        let mut spec = paper_dataset(3);
        spec.videos_per_class = 1;
        spec.frames_per_video = 130;
        let videos = generate_synthetic(&spec).unwrap();
        let cfg = paper_run(Task::Au);
        let model_cfg = cfg.model_config();
        let clips: Vec<_> = (0..2)
            .map(|i| crate::features::make_clip(&videos[i], 64, model_cfg.window_half).unwrap())
            .collect();
        let refs: Vec<&crate::features::ClipRecord> = clips.iter().collect();
        let params: ParamSet<f32> = init_params(&model_cfg, 0).unwrap();
        let mut g: Graph<f32> = Graph::new();
        let binding = bind_model(&mut g, &params, &model_cfg).unwrap();
        let out = forward_batch(&mut g, &binding, &model_cfg, &refs).unwrap();
        assert_eq!(g.shape(out.raw), &[2, AU_COUNT]);
        assert!(g.value(out.raw).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ablation_conditions_parse_and_apply() {
        let base = paper_run(Task::Expr);
        for c in AblationCondition::ALL {
            let cfg = c.apply(&base);
            match c {
                AblationCondition::OnlyStatic => assert_eq!(cfg.model.modalities.count(), 0),
                AblationCondition::NoTrans => assert_eq!(cfg.model.fusion, FusionMode::Concat),
                _ => assert_eq!(cfg.model.modalities.count(), 2),
            }
            assert_eq!(AblationCondition::parse(c.name()).unwrap(), c);
        }
        assert!(AblationCondition::parse("bogus").is_err());
    }

    #[test]
    fn ablation_diff_mentions_only_the_flagged_component() {
        let base = paper_run(Task::Expr);
        let outcome_diff =
            config_diff(&base, &AblationCondition::NoAudio.apply(&base)).unwrap();
        assert_eq!(outcome_diff.len(), 2);
        assert!(outcome_diff.iter().all(|l| l.contains("audio")));
    }

    #[test]
    fn au_task_trains_on_the_class_au_table() {
        let (spec, videos) = tiny_dataset(11, 0.05);
        let cfg = tiny_cfg(Task::Au, &spec);
        let folds = make_folds(&videos, cfg.training.folds, derive_seed(cfg.seed, 0xf01d)).unwrap();
        let (_, report) = train_one_fold::<f32>(&cfg, &videos, &folds, 0).unwrap();
        assert!(
            report.smoothed.macro_avg >= 0.80,
            "AU macro F1 {} too low for a separable tiny set",
            report.smoothed.macro_avg
        );
    }
}
