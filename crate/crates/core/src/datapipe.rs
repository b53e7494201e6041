//! Class-imbalance machinery: per-video per-class resampling, remix
//! augmentation, and video-level fold construction.

use crate::error::{CoreError, Result};
use crate::features::{ClipRecord, Video};
use crate::labels::{AU_COUNT, DEFAULT_MINORITY_CLASSES, EXPR_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

/// A training sample reference: frame `frame` of `videos[video]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRef {
    pub video: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleCaps {
    /// Per-video cap for minority-class frames.
    pub n_minor: usize,
    /// Per-video cap for majority-class frames.
    pub n_major: usize,
    /// Expression classes treated as minorities.
    pub minority_classes: Vec<u8>,
}

impl Default for ResampleCaps {
    fn default() -> Self {
        ResampleCaps {
            n_minor: 200,
            n_major: 50,
            minority_classes: DEFAULT_MINORITY_CLASSES.to_vec(),
        }
    }
}

/// Keep at most N frames of each expression class per video, sampled
/// uniformly without replacement; classes at or under their cap are kept
/// entirely. Only frames with an expression label participate. Output is
/// ordered by video, then ascending frame index.
pub fn resample(videos: &[Video], caps: &ResampleCaps, seed: u64) -> Result<Vec<ClipRef>> {
    if caps.n_minor == 0 || caps.n_major == 0 {
        return Err(CoreError::config("resample caps must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (vi, video) in videos.iter().enumerate() {
        let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (fi, lab) in video.expr_labels.iter().enumerate() {
            if let Some(c) = lab {
                by_class.entry(*c).or_default().push(fi);
            }
        }
        let mut kept: Vec<usize> = Vec::new();
        for (class, frames) in by_class {
            let cap = if caps.minority_classes.contains(&class) {
                caps.n_minor
            } else {
                caps.n_major
            };
            if frames.len() <= cap {
                kept.extend(frames);
            } else {
                let picked = rand::seq::index::sample(&mut rng, frames.len(), cap);
                kept.extend(picked.iter().map(|i| frames[i]));
            }
        }
        kept.sort_unstable();
        out.extend(kept.into_iter().map(|frame| ClipRef { video: vi, frame }));
    }
    Ok(out)
}

/// Sample counts per expression class (indices 0..EXPR_COUNT), normally
/// computed over the post-resampling training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCounts {
    pub counts: Vec<usize>,
}

impl ClassCounts {
    pub fn from_refs(videos: &[Video], refs: &[ClipRef]) -> Self {
        let mut counts = vec![0usize; EXPR_COUNT];
        for r in refs {
            if let Some(c) = videos[r.video].expr_labels[r.frame] {
                counts[c as usize] += 1;
            }
        }
        ClassCounts { counts }
    }
}

/// A clip plus its (possibly soft) training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub clip: ClipRecord,
    pub expr_target: Option<[f64; EXPR_COUNT]>,
    pub au_target: Option<[f64; AU_COUNT]>,
}

impl TrainSample {
    pub fn from_clip(clip: ClipRecord) -> Self {
        let expr_target = clip.expr_label.map(|c| {
            let mut row = [0.0f64; EXPR_COUNT];
            row[c as usize] = 1.0;
            row
        });
        let au_target = clip
            .au_label
            .map(|bits| std::array::from_fn(|j| bits[j] as f64));
        TrainSample {
            clip,
            expr_target,
            au_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemixParams {
    /// Beta(alpha, alpha) parameter for the mixing factor.
    pub alpha: f64,
    pub kappa: f64,
    pub tau: f64,
    /// Probability of remixing each batch sample.
    pub prob: f64,
}

impl Default for RemixParams {
    fn default() -> Self {
        RemixParams {
            alpha: 1.0,
            kappa: 3.0,
            tau: 0.5,
            prob: 0.5,
        }
    }
}

/// The label-mixing coefficient: 0 when sample `i`'s class dominates the
/// count ratio and the draw favors `j`; 1 in the mirrored case; `lambda`
/// otherwise. A zero count on one side is treated as an unbounded ratio
/// (pure minority domination); two zero counts fall back to `lambda`.
pub fn remix_lambda_y(lambda: f64, n_i: usize, n_j: usize, kappa: f64, tau: f64) -> f64 {
    if n_i == 0 && n_j == 0 {
        log::warn!("remix: both classes have zero count, using lambda_y = lambda");
        return lambda;
    }
    let ratio = if n_j == 0 {
        f64::INFINITY
    } else {
        n_i as f64 / n_j as f64
    };
    if ratio >= kappa && lambda < tau {
        0.0
    } else if ratio <= 1.0 / kappa && 1.0 - lambda < tau {
        1.0
    } else {
        lambda
    }
}

fn mix_vec(a: &[f32], b: &[f32], lambda: f32) -> Vec<f32> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let v = lambda * x + (1.0 - lambda) * y;
            // keep the convex-combination bound exact under rounding
            v.clamp(x.min(y), x.max(y))
        })
        .collect()
}

/// Mix every feature tensor of the pair by `lambda` and the labels by the
/// count-aware `lambda_y`. Both samples need expression targets (the count
/// ratio is defined over expression classes); AU targets mix when both carry
/// them.
pub fn remix(
    a: &TrainSample,
    b: &TrainSample,
    counts: &ClassCounts,
    lambda: f64,
    kappa: f64,
    tau: f64,
) -> Result<TrainSample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CoreError::contract("lambda must be in [0, 1]"));
    }
    let (ya, yb) = match (&a.expr_target, &b.expr_target) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(CoreError::contract("remix requires expression targets")),
    };
    if a.clip.window.len() != b.clip.window.len() {
        return Err(CoreError::contract("remix pair has mismatched window lengths"));
    }
    let argmax = |row: &[f64; EXPR_COUNT]| -> usize {
        row.iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    };
    let n_i = counts.counts[argmax(ya)];
    let n_j = counts.counts[argmax(yb)];
    let lambda_y = remix_lambda_y(lambda, n_i, n_j, kappa, tau);
    let lf = lambda as f32;

    let window = a
        .clip
        .window
        .iter()
        .zip(&b.clip.window)
        .map(|(fa, fb)| crate::features::FrameFeatures {
            expr_emb: mix_vec(&fa.expr_emb, &fb.expr_emb, lf),
            audio_feat: mix_vec(&fa.audio_feat, &fb.audio_feat, lf),
            word_emb: mix_vec(&fa.word_emb, &fb.word_emb, lf),
        })
        .collect();
    let clip = ClipRecord {
        video_id: a.clip.video_id.clone(),
        frame_index: a.clip.frame_index,
        static_feat: mix_vec(&a.clip.static_feat, &b.clip.static_feat, lf),
        window,
        au_label: a.clip.au_label,
        expr_label: a.clip.expr_label,
    };
    let expr_target = Some(std::array::from_fn(|j| {
        lambda_y * ya[j] + (1.0 - lambda_y) * yb[j]
    }));
    let au_target = match (&a.au_target, &b.au_target) {
        (Some(x), Some(y)) => Some(std::array::from_fn(|j| {
            lambda_y * x[j] + (1.0 - lambda_y) * y[j]
        })),
        _ => None,
    };
    Ok(TrainSample {
        clip,
        expr_target,
        au_target,
    })
}

/// Video-level k-fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        self.fold_of.get(video_id).copied()
    }

    pub fn video_ids(&self) -> impl Iterator<Item = (&str, usize)> {
        self.fold_of.iter().map(|(id, &f)| (id.as_str(), f))
    }

    /// Plain-text table, one `video_id,fold` line per video.
    pub fn write_table<W: Write>(&self, w: &mut W) -> Result<()> {
        for (id, fold) in &self.fold_of {
            if id.contains(',') || id.contains('\n') {
                return Err(CoreError::contract(format!(
                    "video id `{}` cannot be written to a fold table",
                    id
                )));
            }
            writeln!(w, "{},{}", id, fold)?;
        }
        Ok(())
    }

    pub fn read_table<R: BufRead>(r: R, k: usize) -> Result<Self> {
        let mut fold_of = BTreeMap::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, fold) = line
                .rsplit_once(',')
                .ok_or_else(|| CoreError::Parse(format!("fold table line {}: no comma", lineno + 1)))?;
            let fold: usize = fold
                .trim()
                .parse()
                .map_err(|_| CoreError::Parse(format!("fold table line {}: bad fold", lineno + 1)))?;
            if fold >= k {
                return Err(CoreError::Parse(format!(
                    "fold table line {}: fold {} out of range for k = {}",
                    lineno + 1,
                    fold,
                    k
                )));
            }
            fold_of.insert(id.to_string(), fold);
        }
        Ok(FoldAssignment { k, fold_of })
    }
}

/// Shuffle videos deterministically and partition them into k near-equal
/// groups. Assignment is by video, never by frame.
pub fn make_folds(videos: &[Video], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(CoreError::config("fold count must be at least 2"));
    }
    if videos.len() < k {
        return Err(CoreError::config(format!(
            "cannot split {} videos into {} folds",
            videos.len(),
            k
        )));
    }
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n = videos.len();
    let base = n / k;
    let extra = n % k;
    let mut fold_of = BTreeMap::new();
    let mut cursor = 0usize;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &vi in &order[cursor..cursor + size] {
            fold_of.insert(videos[vi].id.clone(), fold);
        }
        cursor += size;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Draw from Beta(alpha, alpha); alpha = 1 is uniform.
pub fn sample_lambda<R: Rng>(rng: &mut R, alpha: f64) -> f64 {
    use rand_distr::Distribution;
    if (alpha - 1.0).abs() < 1e-12 {
        rng.random_range(0.0..1.0)
    } else {
        let beta = rand_distr::Beta::new(alpha, alpha).expect("alpha validated by config");
        beta.sample(rng)
    }
}
