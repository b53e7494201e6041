//! Temporal smoothing of per-frame predictions and cross-model voting.
//!
//! The smoother scans runs of equal labels left to right. A run whose length
//! is under its class threshold (and which is not the first run of the
//! sequence, since no hopping point precedes it) is an outlier: each of its
//! frames is replaced by the mode of the labels within `window_radius`
//! positions on either side of the run, excluding the run itself. Earlier
//! corrections are visible to later windows within the single pass. Ties in
//! the mode break toward the label immediately preceding the run. AU
//! predictions are smoothed per unit as 12 independent binary sequences.

use crate::error::{CoreError, Result};
use crate::labels::AU_COUNT;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmoothRule {
    /// Runs shorter than this are outliers.
    pub run_threshold: usize,
    /// Mode window: this many frames on each side of the run.
    pub window_radius: usize,
}

impl SmoothRule {
    pub fn validate(&self) -> Result<()> {
        if self.run_threshold == 0 || self.window_radius == 0 {
            return Err(CoreError::config(
                "run_threshold and window_radius must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Per-key smoothing rules. Keys are expression classes for EXPR sequences
/// and unit indices for AU sequences (one rule per unit, applied to both
/// its 0-runs and 1-runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPolicy {
    pub rules: BTreeMap<u8, SmoothRule>,
}

impl SmoothingPolicy {
    pub fn uniform(keys: impl Iterator<Item = u8>, rule: SmoothRule) -> Self {
        SmoothingPolicy {
            rules: keys.map(|k| (k, rule)).collect(),
        }
    }

    /// Expression policy with distinct majority/minority rules.
    pub fn expr_policy(
        class_count: usize,
        minority_classes: &[u8],
        majority: SmoothRule,
        minority: SmoothRule,
    ) -> Self {
        let rules = (0..class_count as u8)
            .map(|c| {
                let r = if minority_classes.contains(&c) {
                    minority
                } else {
                    majority
                };
                (c, r)
            })
            .collect();
        SmoothingPolicy { rules }
    }

    fn rule(&self, key: u8) -> Result<SmoothRule> {
        self.rules.get(&key).copied().ok_or_else(|| {
            CoreError::config(format!("smoothing policy has no rule for class {}", key))
        })
    }

    pub fn validate(&self) -> Result<()> {
        for r in self.rules.values() {
            r.validate()?;
        }
        Ok(())
    }
}

/// Per-frame predicted labels for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSequence {
    pub video_id: String,
    pub labels: SeqLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeqLabels {
    Expr(Vec<u8>),
    Au(Vec<[u8; AU_COUNT]>),
}

impl SeqLabels {
    pub fn len(&self) -> usize {
        match self {
            SeqLabels::Expr(v) => v.len(),
            SeqLabels::Au(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Run {
    start: usize,
    len: usize,
    label: u8,
}

fn runs_of(labels: &[u8]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for (i, &lab) in labels.iter().enumerate() {
        match runs.last_mut() {
            Some(r) if r.label == lab => r.len += 1,
            _ => runs.push(Run {
                start: i,
                len: 1,
                label: lab,
            }),
        }
    }
    runs
}

fn smooth_label_sequence(labels: &[u8], policy: &SmoothingPolicy) -> Result<Vec<u8>> {
    let mut seen: Vec<u8> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for lab in seen {
        policy.rule(lab)?; // every class present must have a rule
    }
    let runs = runs_of(labels);
    let mut out = labels.to_vec();
    for run in runs.iter().skip(1) {
        let rule = policy.rule(run.label)?;
        if run.len >= rule.run_threshold {
            continue;
        }
        let end = run.start + run.len; // exclusive
        let lo = run.start.saturating_sub(rule.window_radius);
        let hi = (end + rule.window_radius).min(out.len());
        let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
        for &v in out[lo..run.start].iter().chain(&out[end..hi]) {
            *counts.entry(v).or_insert(0) += 1;
        }
        if counts.is_empty() {
            continue;
        }
        let best = *counts.values().max().expect("non-empty");
        // the run is not first, so a preceding label always exists
        let preceding = out[run.start - 1];
        let mode = if counts.get(&preceding) == Some(&best) {
            preceding
        } else {
            *counts
                .iter()
                .find(|&(_, &c)| c == best)
                .map(|(k, _)| k)
                .expect("non-empty")
        };
        for v in &mut out[run.start..end] {
            *v = mode;
        }
    }
    Ok(out)
}

/// Smooth one prediction sequence under the policy. Output length always
/// equals input length; a constant sequence is a fixed point.
pub fn smooth(seq: &PredictionSequence, policy: &SmoothingPolicy) -> Result<PredictionSequence> {
    if seq.labels.is_empty() {
        return Err(CoreError::contract("smooth on an empty sequence"));
    }
    policy.validate()?;
    let labels = match &seq.labels {
        SeqLabels::Expr(v) => SeqLabels::Expr(smooth_label_sequence(v, policy)?),
        SeqLabels::Au(v) => {
            let n = v.len();
            let mut channels: Vec<Vec<u8>> = Vec::with_capacity(AU_COUNT);
            for j in 0..AU_COUNT {
                let rule = policy.rule(j as u8)?;
                let chan: Vec<u8> = v.iter().map(|bits| bits[j]).collect();
                let chan_policy = SmoothingPolicy::uniform([0u8, 1].into_iter(), rule);
                channels.push(smooth_label_sequence(&chan, &chan_policy)?);
            }
            let mut out = vec![[0u8; AU_COUNT]; n];
            for (j, chan) in channels.iter().enumerate() {
                for (i, &b) in chan.iter().enumerate() {
                    out[i][j] = b;
                }
            }
            SeqLabels::Au(out)
        }
    };
    Ok(PredictionSequence {
        video_id: seq.video_id.clone(),
        labels,
    })
}

/// Per-frame majority vote across aligned model outputs; ties go to the
/// earliest model in the given order.
pub fn vote(models: &[Vec<PredictionSequence>]) -> Result<Vec<PredictionSequence>> {
    if models.len() < 2 {
        return Err(CoreError::contract("vote needs at least 2 prediction sets"));
    }
    let first = &models[0];
    for (mi, m) in models.iter().enumerate().skip(1) {
        if m.len() != first.len() {
            return Err(CoreError::contract(format!(
                "model {} has {} sequences, expected {}",
                mi,
                m.len(),
                first.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(first.len());
    for (si, base) in first.iter().enumerate() {
        for (mi, m) in models.iter().enumerate().skip(1) {
            let s = &m[si];
            if s.video_id != base.video_id || s.labels.len() != base.labels.len() {
                return Err(CoreError::contract(format!(
                    "model {} sequence {} is not aligned with model 0",
                    mi, si
                )));
            }
        }
        let labels = match &base.labels {
            SeqLabels::Expr(_) => {
                let per_model: Vec<&Vec<u8>> = models
                    .iter()
                    .map(|m| match &m[si].labels {
                        SeqLabels::Expr(v) => Ok(v),
                        SeqLabels::Au(_) => Err(CoreError::contract("mixed prediction kinds")),
                    })
                    .collect::<Result<_>>()?;
                let n = per_model[0].len();
                let mut voted = Vec::with_capacity(n);
                for i in 0..n {
                    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
                    for v in &per_model {
                        *counts.entry(v[i]).or_insert(0) += 1;
                    }
                    let best = *counts.values().max().expect("non-empty");
                    let winner = per_model
                        .iter()
                        .map(|v| v[i])
                        .find(|l| counts[l] == best)
                        .expect("some label has the max count");
                    voted.push(winner);
                }
                SeqLabels::Expr(voted)
            }
            SeqLabels::Au(_) => {
                let per_model: Vec<&Vec<[u8; AU_COUNT]>> = models
                    .iter()
                    .map(|m| match &m[si].labels {
                        SeqLabels::Au(v) => Ok(v),
                        SeqLabels::Expr(_) => Err(CoreError::contract("mixed prediction kinds")),
                    })
                    .collect::<Result<_>>()?;
                let n = per_model[0].len();
                let k = per_model.len();
                let mut voted = vec![[0u8; AU_COUNT]; n];
                for i in 0..n {
                    for j in 0..AU_COUNT {
                        let ones: usize = per_model.iter().map(|v| v[i][j] as usize).sum();
                        voted[i][j] = if 2 * ones > k {
                            1
                        } else if 2 * ones < k {
                            0
                        } else {
                            per_model[0][i][j] // tie: first model wins
                        };
                    }
                }
                SeqLabels::Au(voted)
            }
        };
        out.push(PredictionSequence {
            video_id: base.video_id.clone(),
            labels,
        });
    }
    Ok(out)
}

// ---- prediction files -------------------------------------------------------
//
// One line per frame. EXPR: `video_id,frame_index,class`. AU: `video_id,
// frame_index,b0,...,b11`. Raw and smoothed outputs share the format.

pub fn write_predictions<W: Write>(seqs: &[PredictionSequence], w: &mut W) -> Result<()> {
    for seq in seqs {
        if seq.video_id.contains(',') || seq.video_id.contains('\n') {
            return Err(CoreError::contract(format!(
                "video id `{}` cannot be written to a prediction file",
                seq.video_id
            )));
        }
        match &seq.labels {
            SeqLabels::Expr(v) => {
                for (i, lab) in v.iter().enumerate() {
                    writeln!(w, "{},{},{}", seq.video_id, i, lab)?;
                }
            }
            SeqLabels::Au(v) => {
                for (i, bits) in v.iter().enumerate() {
                    let cells: Vec<String> = bits.iter().map(|b| b.to_string()).collect();
                    writeln!(w, "{},{},{}", seq.video_id, i, cells.join(","))?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionSequence>> {
    let mut out: Vec<PredictionSequence> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields: Vec<&str> = line.split(',').collect();
        let bad = |msg: &str| CoreError::Parse(format!("prediction line {}: {}", lineno, msg));
        if fields.len() != 3 && fields.len() != 2 + AU_COUNT {
            return Err(bad("expected 3 fields (EXPR) or 14 fields (AU)"));
        }
        let video_id = fields[0].to_string();
        let frame: usize = fields[1].parse().map_err(|_| bad("bad frame index"))?;
        let new_video = out.last().map(|s| s.video_id != video_id).unwrap_or(true);
        if new_video {
            if out.iter().any(|s| s.video_id == video_id) {
                return Err(bad("video appears in two separate blocks"));
            }
            let labels = if fields.len() == 3 {
                SeqLabels::Expr(Vec::new())
            } else {
                SeqLabels::Au(Vec::new())
            };
            out.push(PredictionSequence { video_id, labels });
        }
        let seq = out.last_mut().expect("just pushed");
        if frame != seq.labels.len() {
            return Err(bad(&format!(
                "frame index {} out of order, expected {}",
                frame,
                seq.labels.len()
            )));
        }
        match (&mut seq.labels, fields.len()) {
            (SeqLabels::Expr(v), 3) => {
                v.push(fields[2].parse().map_err(|_| bad("bad class label"))?);
            }
            (SeqLabels::Au(v), n) if n == 2 + AU_COUNT => {
                let mut bits = [0u8; AU_COUNT];
                for (j, cell) in fields[2..].iter().enumerate() {
                    let b: u8 = cell.parse().map_err(|_| bad("bad AU bit"))?;
                    if b > 1 {
                        return Err(bad("AU bit must be 0 or 1"));
                    }
                    bits[j] = b;
                }
                v.push(bits);
            }
            _ => return Err(bad("mixed EXPR and AU lines")),
        }
    }
    Ok(out)
}
