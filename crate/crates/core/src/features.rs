//! Multimodal sample records, sliding-window construction, and the synthetic
//! dataset that stands in for pretrained feature extractors.
//!
//! A video is a frame-aligned bundle of four feature streams (one static
//! vision vector plus three dynamic modality vectors per frame) and optional
//! per-frame AU / expression labels. Training samples are `ClipRecord`s: the
//! static feature of a center frame together with a `2M+1` window of dynamic
//! features around it.

use crate::binio::Reader;
use crate::error::{CoreError, Result};
use crate::labels::{au_pattern_for_class, AU_COUNT};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Feature vector widths for the four streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_s: usize,
    pub d_e: usize,
    pub d_a: usize,
    pub d_w: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            d_s: 64,
            d_e: 16,
            d_a: 20,
            d_w: 32,
        }
    }
}

/// Dynamic features of one frame. The word embedding is the zero vector on
/// frames where no word is active.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub expr_emb: Vec<f32>,
    pub audio_feat: Vec<f32>,
    pub word_emb: Vec<f32>,
}

/// A frame-aligned feature and label sequence for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub static_feats: Vec<Vec<f32>>,
    pub frames: Vec<FrameFeatures>,
    pub au_labels: Vec<Option<[u8; AU_COUNT]>>,
    pub expr_labels: Vec<Option<u8>>,
}

impl Video {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Check internal alignment and that every frame matches `dims`.
    pub fn validate(&self, dims: &FeatureDims) -> Result<()> {
        let n = self.frames.len();
        if self.static_feats.len() != n || self.au_labels.len() != n || self.expr_labels.len() != n
        {
            return Err(CoreError::contract(format!(
                "video `{}`: streams are not frame-aligned",
                self.id
            )));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let ok = self.static_feats[i].len() == dims.d_s
                && f.expr_emb.len() == dims.d_e
                && f.audio_feat.len() == dims.d_a
                && f.word_emb.len() == dims.d_w;
            if !ok {
                return Err(CoreError::contract(format!(
                    "video `{}` frame {}: feature dims do not match {:?}",
                    self.id, i, dims
                )));
            }
            let finite = self.static_feats[i].iter().all(|v| v.is_finite())
                && f.expr_emb.iter().all(|v| v.is_finite())
                && f.audio_feat.iter().all(|v| v.is_finite())
                && f.word_emb.iter().all(|v| v.is_finite());
            if !finite {
                return Err(CoreError::contract(format!(
                    "video `{}` frame {}: non-finite feature value",
                    self.id, i
                )));
            }
        }
        Ok(())
    }
}

/// One training/evaluation sample: the static feature of the center frame
/// plus a window of `2M+1` dynamic frames around it.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub static_feat: Vec<f32>,
    pub window: Vec<FrameFeatures>,
    pub au_label: Option<[u8; AU_COUNT]>,
    pub expr_label: Option<u8>,
}

/// Frames `[index - m, index + m]`, out-of-range positions filled by
/// repeating the first/last frame.
pub fn build_window(frames: &[FrameFeatures], index: usize, m: usize) -> Result<Vec<FrameFeatures>> {
    if frames.is_empty() {
        return Err(CoreError::contract("build_window on an empty video"));
    }
    if index >= frames.len() {
        return Err(CoreError::contract(format!(
            "frame index {} out of range for {} frames",
            index,
            frames.len()
        )));
    }
    let last = frames.len() as i64 - 1;
    let mut out = Vec::with_capacity(2 * m + 1);
    for off in -(m as i64)..=(m as i64) {
        let pos = (index as i64 + off).clamp(0, last) as usize;
        out.push(frames[pos].clone());
    }
    Ok(out)
}

pub fn make_clip(video: &Video, index: usize, m: usize) -> Result<ClipRecord> {
    let window = build_window(&video.frames, index, m)?;
    Ok(ClipRecord {
        video_id: video.id.clone(),
        frame_index: index,
        static_feat: video.static_feats[index].clone(),
        window,
        au_label: video.au_labels[index],
        expr_label: video.expr_labels[index],
    })
}

/// Per-stream values: one entry for the static stream and one per dynamic
/// modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerStream<V> {
    pub static_feat: V,
    pub expr_emb: V,
    pub audio_feat: V,
    pub word_emb: V,
}

impl PerStream<f64> {
    pub fn uniform(v: f64) -> Self {
        PerStream {
            static_feat: v,
            expr_emb: v,
            audio_feat: v,
            word_emb: v,
        }
    }
}

/// Optional per-stream remap of class -> prototype index. The default
/// (identity) gives every class its own prototype in every stream; a
/// many-to-one map makes a stream deliberately ambiguous, which is how the
/// ablation presets split information across modalities.
pub type PrototypeMap = PerStream<Vec<usize>>;

/// Recipe for a deterministic synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub class_count: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub dims: FeatureDims,
    pub signal_strength: PerStream<f64>,
    pub noise_std: f64,
    /// Label run lengths are drawn uniformly from this inclusive range.
    pub run_length_min: usize,
    pub run_length_max: usize,
    #[serde(default)]
    pub prototype_map: Option<PrototypeMap>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.videos_per_class == 0 || self.frames_per_video == 0 {
            return Err(CoreError::config(
                "class_count, videos_per_class and frames_per_video must be positive",
            ));
        }
        if self.run_length_min == 0 || self.run_length_min > self.run_length_max {
            return Err(CoreError::config("invalid run length range"));
        }
        if self.noise_std < 0.0 {
            return Err(CoreError::config("noise_std must be nonnegative"));
        }
        for (s, name) in [
            (self.signal_strength.static_feat, "static_feat"),
            (self.signal_strength.expr_emb, "expr_emb"),
            (self.signal_strength.audio_feat, "audio_feat"),
            (self.signal_strength.word_emb, "word_emb"),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return Err(CoreError::config(format!(
                    "signal strength for {} must be in [0, 1]",
                    name
                )));
            }
        }
        let maps = self.resolved_prototype_map();
        for (map, dim, name) in [
            (&maps.static_feat, self.dims.d_s, "static_feat"),
            (&maps.expr_emb, self.dims.d_e, "expr_emb"),
            (&maps.audio_feat, self.dims.d_a, "audio_feat"),
            (&maps.word_emb, self.dims.d_w, "word_emb"),
        ] {
            if map.len() != self.class_count {
                return Err(CoreError::config(format!(
                    "prototype map for {} must have {} entries",
                    name, self.class_count
                )));
            }
            if let Some(&mx) = map.iter().max() {
                if mx >= dim {
                    return Err(CoreError::config(format!(
                        "prototype capacity exceeded for {}: index {} needs dim > {}",
                        name, mx, mx
                    )));
                }
            }
        }
        Ok(())
    }

    fn resolved_prototype_map(&self) -> PrototypeMap {
        match &self.prototype_map {
            Some(m) => m.clone(),
            None => {
                let identity: Vec<usize> = (0..self.class_count).collect();
                PerStream {
                    static_feat: identity.clone(),
                    expr_emb: identity.clone(),
                    audio_feat: identity.clone(),
                    word_emb: identity,
                }
            }
        }
    }
}

fn synth_vec<R: Rng>(rng: &mut R, dim: usize, proto: usize, strength: f64, noise_std: f64) -> Vec<f32> {
    (0..dim)
        .map(|i| {
            let base = if i == proto { strength } else { 0.0 };
            let n: f64 = rng.sample(StandardNormal);
            (base + noise_std * n) as f32
        })
        .collect()
}

/// Deterministic synthetic dataset: piecewise-constant class labels per
/// video; each frame's stream `m` is `strength_m * prototype_m(class)` plus
/// isotropic Gaussian noise; AU labels derive from the class activation table.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Video>> {
    spec.validate()?;
    let maps = spec.resolved_prototype_map();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::with_capacity(spec.class_count * spec.videos_per_class);
    for class in 0..spec.class_count {
        for v in 0..spec.videos_per_class {
            let id = format!("synth_c{:02}_v{:03}", class, v);
            let n = spec.frames_per_video;
            // Label runs. Lengths are drawn from the run-length range; the
            // class sequence cycles from the video's nominal class, so any
            // video with at least class_count runs covers the whole label
            // space (validation folds then exercise every class).
            let mut labels: Vec<u8> = Vec::with_capacity(n);
            let mut current = class;
            while labels.len() < n {
                let run = rng.random_range(spec.run_length_min..=spec.run_length_max);
                for _ in 0..run {
                    if labels.len() < n {
                        labels.push(current as u8);
                    }
                }
                current = (current + 1) % spec.class_count;
            }
            let mut static_feats = Vec::with_capacity(n);
            let mut frames = Vec::with_capacity(n);
            let mut au_labels = Vec::with_capacity(n);
            let mut expr_labels = Vec::with_capacity(n);
            for &lab in &labels {
                let c = lab as usize;
                static_feats.push(synth_vec(
                    &mut rng,
                    spec.dims.d_s,
                    maps.static_feat[c],
                    spec.signal_strength.static_feat,
                    spec.noise_std,
                ));
                frames.push(FrameFeatures {
                    expr_emb: synth_vec(
                        &mut rng,
                        spec.dims.d_e,
                        maps.expr_emb[c],
                        spec.signal_strength.expr_emb,
                        spec.noise_std,
                    ),
                    audio_feat: synth_vec(
                        &mut rng,
                        spec.dims.d_a,
                        maps.audio_feat[c],
                        spec.signal_strength.audio_feat,
                        spec.noise_std,
                    ),
                    word_emb: synth_vec(
                        &mut rng,
                        spec.dims.d_w,
                        maps.word_emb[c],
                        spec.signal_strength.word_emb,
                        spec.noise_std,
                    ),
                });
                au_labels.push(Some(au_pattern_for_class(c)));
                expr_labels.push(Some(lab));
            }
            videos.push(Video {
                id,
                static_feats,
                frames,
                au_labels,
                expr_labels,
            });
        }
    }
    Ok(videos)
}

// ---- dataset file format ------------------------------------------------
//
// magic   4 bytes  b"MMDS"
// version u16      1
// dims    u32 * 4  d_s, d_e, d_a, d_w
// count   u32      number of videos
// per video:
//   id_len u16, id bytes (UTF-8), frame_count u32,
//   per frame: static f32*d_s, expr f32*d_e, audio f32*d_a, word f32*d_w,
//              au u16 (bit j = AU j active, 0xFFFF = absent),
//              expr u8 (255 = absent)

const DATASET_MAGIC: &[u8; 4] = b"MMDS";
const DATASET_VERSION: u16 = 1;
const AU_ABSENT: u16 = 0xFFFF;
const EXPR_ABSENT: u8 = 255;

pub fn write_dataset<W: Write>(dims: &FeatureDims, videos: &[Video], w: &mut W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for d in [dims.d_s, dims.d_e, dims.d_a, dims.d_w] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(videos.len() as u32).to_le_bytes())?;
    for video in videos {
        video.validate(dims)?;
        let id = video.id.as_bytes();
        if id.len() > u16::MAX as usize {
            return Err(CoreError::contract(format!("video id too long: {}", video.id)));
        }
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(video.frame_count() as u32).to_le_bytes())?;
        for i in 0..video.frame_count() {
            for stream in [
                &video.static_feats[i],
                &video.frames[i].expr_emb,
                &video.frames[i].audio_feat,
                &video.frames[i].word_emb,
            ] {
                for v in stream {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            let au: u16 = match &video.au_labels[i] {
                Some(bits) => bits
                    .iter()
                    .enumerate()
                    .fold(0u16, |acc, (j, &b)| acc | ((b as u16 & 1) << j)),
                None => AU_ABSENT,
            };
            w.write_all(&au.to_le_bytes())?;
            let expr = match video.expr_labels[i] {
                Some(c) => {
                    if c >= EXPR_ABSENT {
                        return Err(CoreError::contract(format!(
                            "expression label {} out of range",
                            c
                        )));
                    }
                    c
                }
                None => EXPR_ABSENT,
            };
            w.write_all(&[expr])?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<(FeatureDims, Vec<Video>)> {
    let mut r = Reader::new(r);
    let magic = r.bytes(4)?;
    if magic != DATASET_MAGIC {
        return Err(CoreError::format(0, "bad magic, not a dataset file"));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(CoreError::format(4, format!("unsupported version {}", version)));
    }
    let dims = FeatureDims {
        d_s: r.u32()? as usize,
        d_e: r.u32()? as usize,
        d_a: r.u32()? as usize,
        d_w: r.u32()? as usize,
    };
    let count = r.u32()? as usize;
    let mut videos = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = r.u16()? as usize;
        let id = r.utf8(id_len)?;
        let frames_n = r.u32()? as usize;
        let mut static_feats = Vec::with_capacity(frames_n);
        let mut frames = Vec::with_capacity(frames_n);
        let mut au_labels = Vec::with_capacity(frames_n);
        let mut expr_labels = Vec::with_capacity(frames_n);
        for _ in 0..frames_n {
            static_feats.push(r.f32_vec(dims.d_s)?);
            let expr_emb = r.f32_vec(dims.d_e)?;
            let audio_feat = r.f32_vec(dims.d_a)?;
            let word_emb = r.f32_vec(dims.d_w)?;
            frames.push(FrameFeatures {
                expr_emb,
                audio_feat,
                word_emb,
            });
            let at = r.offset;
            let au = r.u16()?;
            au_labels.push(if au == AU_ABSENT {
                None
            } else {
                if au >> AU_COUNT != 0 {
                    return Err(CoreError::format(
                        at,
                        format!("AU bits 0x{:04x} exceed {} units", au, AU_COUNT),
                    ));
                }
                let mut bits = [0u8; AU_COUNT];
                for (j, b) in bits.iter_mut().enumerate() {
                    *b = ((au >> j) & 1) as u8;
                }
                Some(bits)
            });
            let expr = r.u8()?;
            expr_labels.push(if expr == EXPR_ABSENT { None } else { Some(expr) });
        }
        videos.push(Video {
            id,
            static_feats,
            frames,
            au_labels,
            expr_labels,
        });
    }
    Ok((dims, videos))
}

pub fn save_dataset(dims: &FeatureDims, videos: &[Video], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_dataset(dims, videos, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(FeatureDims, Vec<Video>)> {
    let f = fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}

/// Load a dataset and require its dims to match the run configuration.
pub fn load_dataset_expecting(path: &Path, expected: &FeatureDims) -> Result<Vec<Video>> {
    let (dims, videos) = load_dataset(path)?;
    if dims != *expected {
        return Err(CoreError::format(
            6,
            format!("dataset dims {:?} do not match configured {:?}", dims, expected),
        ));
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(tag: f32) -> FrameFeatures {
        FrameFeatures {
            expr_emb: vec![tag; 2],
            audio_feat: vec![tag; 3],
            word_emb: vec![tag; 2],
        }
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            seed: 7,
            class_count: 4,
            videos_per_class: 2,
            frames_per_video: 30,
            dims: FeatureDims {
                d_s: 6,
                d_e: 5,
                d_a: 5,
                d_w: 4,
            },
            signal_strength: PerStream::uniform(1.0),
            noise_std: 0.05,
            run_length_min: 4,
            run_length_max: 9,
            prototype_map: None,
        }
    }

    #[test]
    fn window_without_padding_is_a_plain_slice() {
        let frames: Vec<FrameFeatures> = (0..200).map(|i| frame(i as f32)).collect();
        let w = build_window(&frames, 100, 60).unwrap();
        assert_eq!(w.len(), 121);
        assert_eq!(w[0], frames[40]);
        assert_eq!(w[120], frames[160]);
    }

    #[test]
    fn window_at_start_repeats_first_frame() {
        let frames: Vec<FrameFeatures> = (0..100).map(|i| frame(i as f32)).collect();
        let m = 60;
        let w = build_window(&frames, 0, m).unwrap();
        assert_eq!(w.len(), 2 * m + 1);
        for item in w.iter().take(m) {
            assert_eq!(*item, frames[0]);
        }
        for (k, item) in w.iter().skip(m).enumerate() {
            assert_eq!(*item, frames[k]);
        }
    }

    #[test]
    fn single_frame_video_pads_everywhere() {
        let frames = vec![frame(3.0)];
        let w = build_window(&frames, 0, 5).unwrap();
        assert_eq!(w.len(), 11);
        assert!(w.iter().all(|f| *f == frames[0]));
    }

    #[test]
    fn out_of_range_index_is_contract_violation() {
        let frames = vec![frame(0.0)];
        assert!(build_window(&frames, 1, 2).is_err());
    }

    #[test]
    fn windows_shift_by_one_for_interior_indices() {
        let frames: Vec<FrameFeatures> = (0..50).map(|i| frame(i as f32)).collect();
        let m = 4;
        for i in m..(50 - m - 1) {
            let a = build_window(&frames, i, m).unwrap();
            let b = build_window(&frames, i + 1, m).unwrap();
            assert_eq!(a[1..], b[..2 * m]);
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let spec = tiny_spec();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn noiseless_features_equal_prototypes_exactly() {
        let mut spec = tiny_spec();
        spec.noise_std = 0.0;
        let videos = generate_synthetic(&spec).unwrap();
        for v in &videos {
            for (i, f) in v.frames.iter().enumerate() {
                let c = v.expr_labels[i].unwrap() as usize;
                let mut proto = vec![0.0f32; spec.dims.d_e];
                proto[c] = 1.0;
                assert_eq!(f.expr_emb, proto);
            }
        }
    }

    #[test]
    fn class_count_beyond_capacity_is_config_error() {
        let mut spec = tiny_spec();
        spec.class_count = 6; // d_w = 4 < 6
        assert!(matches!(
            generate_synthetic(&spec),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn nearest_prototype_on_expr_emb_is_almost_perfect() {
        let spec = SyntheticSpec {
            seed: 11,
            class_count: 8,
            videos_per_class: 5,
            frames_per_video: 300,
            dims: FeatureDims {
                d_s: 16,
                d_e: 16,
                d_a: 20,
                d_w: 32,
            },
            signal_strength: PerStream::uniform(1.0),
            noise_std: 0.1,
            run_length_min: 10,
            run_length_max: 40,
            prototype_map: None,
        };
        let videos = generate_synthetic(&spec).unwrap();
        let mut total = 0usize;
        let mut hits = 0usize;
        for v in &videos {
            for (i, f) in v.frames.iter().enumerate() {
                // independent oracle: argmin distance to strength * e_c
                let mut best = (f64::INFINITY, 0usize);
                for c in 0..spec.class_count {
                    let mut d = 0.0f64;
                    for (j, &x) in f.expr_emb.iter().enumerate() {
                        let p = if j == c { 1.0 } else { 0.0 };
                        d += (x as f64 - p).powi(2);
                    }
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                total += 1;
                if best.1 == v.expr_labels[i].unwrap() as usize {
                    hits += 1;
                }
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc >= 0.99, "nearest-prototype accuracy {}", acc);
    }

    #[test]
    fn dataset_save_load_save_is_byte_identical() {
        let spec = tiny_spec();
        let videos = generate_synthetic(&spec).unwrap();
        let mut first = Vec::new();
        write_dataset(&spec.dims, &videos, &mut first).unwrap();
        let (dims, loaded) = read_dataset(first.as_slice()).unwrap();
        assert_eq!(dims, spec.dims);
        assert_eq!(loaded, videos);
        let mut second = Vec::new();
        write_dataset(&dims, &loaded, &mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn empty_video_list_round_trips() {
        let dims = FeatureDims::default();
        let mut bytes = Vec::new();
        write_dataset(&dims, &[], &mut bytes).unwrap();
        let (d, v) = read_dataset(bytes.as_slice()).unwrap();
        assert_eq!(d, dims);
        assert!(v.is_empty());
    }

    #[test]
    fn dim_mismatch_against_config_is_reported() {
        let spec = tiny_spec();
        let videos = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mmds");
        save_dataset(&spec.dims, &videos, &path).unwrap();
        let mut other = spec.dims;
        other.d_e = 32;
        match load_dataset_expecting(&path, &other) {
            Err(CoreError::Format { .. }) => {}
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn truncated_dataset_reports_offset() {
        let spec = tiny_spec();
        let videos = generate_synthetic(&spec).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&spec.dims, &videos, &mut bytes).unwrap();
        bytes.truncate(bytes.len() / 2);
        match read_dataset(bytes.as_slice()) {
            Err(CoreError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {:?}", other),
        }
    }

    proptest! {
        #[test]
        fn window_length_is_always_full(
            len in 1usize..40,
            idx_seed in 0usize..1000,
            m in 0usize..20,
        ) {
            let frames: Vec<FrameFeatures> = (0..len).map(|i| frame(i as f32)).collect();
            let idx = idx_seed % len;
            let w = build_window(&frames, idx, m).unwrap();
            prop_assert_eq!(w.len(), 2 * m + 1);
        }
    }
}
