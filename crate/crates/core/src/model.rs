//! The network: a static encoder producing `h_s`, per-modality GRU encoders
//! over the sliding window, one transformer-decoder fusion block per
//! modality with `h_s` as the cross-attention key/value, and an MLP head
//! over the concatenation.
//!
//! Each modality's dynamic feature is the GRU's final hidden state, so the
//! fusion block sees a one-token dynamic stream and a one-token `h_s`. With
//! a single key the attention softmax is exactly 1; the block is implemented
//! as written, and the batched forward exploits the degeneracy (attention
//! output reduces to `W_O W_V` applied row-wise) without changing the math.

use crate::error::{CoreError, Result};
use crate::features::{ClipRecord, FeatureDims};
use crate::labels::{AU_COUNT, EXPR_COUNT};
use crate::params::{uniform_init, ParamSet};
use crate::tensor::{Graph, NodeId, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Au,
    Expr,
}

impl Task {
    pub fn output_dim(self) -> usize {
        match self {
            Task::Au => AU_COUNT,
            Task::Expr => EXPR_COUNT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Transformer-decoder fusion blocks, one per modality.
    Transformer,
    /// Ablation: concatenate the projected dynamic features directly.
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityFlags {
    pub expr_emb: bool,
    pub audio: bool,
    pub word: bool,
}

impl ModalityFlags {
    pub fn all() -> Self {
        ModalityFlags {
            expr_emb: true,
            audio: true,
            word: true,
        }
    }

    pub fn none() -> Self {
        ModalityFlags {
            expr_emb: false,
            audio: false,
            word: false,
        }
    }

    pub fn count(&self) -> usize {
        self.expr_emb as usize + self.audio as usize + self.word as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    ExprEmb,
    Audio,
    Word,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::ExprEmb, Modality::Audio, Modality::Word];

    pub fn key(self) -> &'static str {
        match self {
            Modality::ExprEmb => "e",
            Modality::Audio => "a",
            Modality::Word => "w",
        }
    }

    pub fn dim(self, dims: &FeatureDims) -> usize {
        match self {
            Modality::ExprEmb => dims.d_e,
            Modality::Audio => dims.d_a,
            Modality::Word => dims.d_w,
        }
    }

    pub fn enabled(self, flags: &ModalityFlags) -> bool {
        match self {
            Modality::ExprEmb => flags.expr_emb,
            Modality::Audio => flags.audio,
            Modality::Word => flags.word,
        }
    }

    fn frame_slice(self, f: &crate::features::FrameFeatures) -> &[f32] {
        match self {
            Modality::ExprEmb => &f.expr_emb,
            Modality::Audio => &f.audio_feat,
            Modality::Word => &f.word_emb,
        }
    }
}

/// Architecture hyperparameters. Feature dims mirror the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: FeatureDims,
    /// Window half-width M; clips carry `2M + 1` frames.
    pub window_half: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub modalities: ModalityFlags,
    pub fusion: FusionMode,
    #[serde(default)]
    pub positional_encoding: bool,
    pub task: Task,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(CoreError::config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.gru_layers == 0 || self.gru_hidden == 0 || self.head_hidden == 0 {
            return Err(CoreError::config(
                "gru_layers, gru_hidden and head_hidden must be positive",
            ));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        2 * self.window_half + 1
    }

    pub fn enabled_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| m.enabled(&self.modalities))
            .collect()
    }

    /// Width of the head input: one fused vector per enabled modality plus `h_s`.
    pub fn head_input_dim(&self) -> usize {
        self.modalities.count() * self.model_dim + self.dims.d_s
    }
}

// ---- parameter construction ----------------------------------------------

fn push_linear<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
) -> Result<()> {
    ps.push(format!("{name}.w"), vec![din, dout], uniform_init(rng, din, din * dout))?;
    ps.push(format!("{name}.b"), vec![dout], vec![T::zero(); dout])?;
    Ok(())
}

fn push_matrix<T: Real>(
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    din: usize,
    dout: usize,
) -> Result<()> {
    ps.push(name, vec![din, dout], uniform_init(rng, din, din * dout))?;
    Ok(())
}

fn push_norm<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Result<()> {
    ps.push(format!("{name}.gain"), vec![dim], vec![T::one(); dim])?;
    ps.push(format!("{name}.bias"), vec![dim], vec![T::zero(); dim])?;
    Ok(())
}

/// Deterministic parameter init: uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
/// for linear maps, zeros for biases, ones for norm gains.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let d_s = cfg.dims.d_s;
    let dm = cfg.model_dim;

    push_linear(&mut ps, &mut rng, "static.fc1", d_s, d_s)?;
    push_linear(&mut ps, &mut rng, "static.fc2", d_s, d_s)?;

    for m in cfg.enabled_modalities() {
        let key = m.key();
        let mut din = m.dim(&cfg.dims);
        for l in 0..cfg.gru_layers {
            let h = cfg.gru_hidden;
            for gate in ["z", "r", "h"] {
                push_matrix(&mut ps, &mut rng, &format!("gru_{key}.l{l}.w{gate}"), din, h)?;
                push_matrix(&mut ps, &mut rng, &format!("gru_{key}.l{l}.u{gate}"), h, h)?;
                ps.push(format!("gru_{key}.l{l}.b{gate}"), vec![h], vec![T::zero(); h])?;
            }
            din = h;
        }
        push_linear(&mut ps, &mut rng, &format!("proj_{key}"), cfg.gru_hidden, dm)?;
        if cfg.fusion == FusionMode::Transformer {
            for proj in ["wq", "wk", "wv", "wo"] {
                push_matrix(&mut ps, &mut rng, &format!("fusion_{key}.sa.{proj}"), dm, dm)?;
            }
            push_matrix(&mut ps, &mut rng, &format!("fusion_{key}.ca.wq"), dm, dm)?;
            push_matrix(&mut ps, &mut rng, &format!("fusion_{key}.ca.wk"), d_s, dm)?;
            push_matrix(&mut ps, &mut rng, &format!("fusion_{key}.ca.wv"), d_s, dm)?;
            push_matrix(&mut ps, &mut rng, &format!("fusion_{key}.ca.wo"), dm, dm)?;
            push_norm(&mut ps, &format!("fusion_{key}.norm1"), dm)?;
            push_norm(&mut ps, &format!("fusion_{key}.norm2"), dm)?;
            push_norm(&mut ps, &format!("fusion_{key}.norm3"), dm)?;
            push_linear(&mut ps, &mut rng, &format!("fusion_{key}.ffn1"), dm, 4 * dm)?;
            push_linear(&mut ps, &mut rng, &format!("fusion_{key}.ffn2"), 4 * dm, dm)?;
        }
    }

    push_linear(&mut ps, &mut rng, "head.fc1", cfg.head_input_dim(), cfg.head_hidden)?;
    push_linear(&mut ps, &mut rng, "head.fc2", cfg.head_hidden, cfg.task.output_dim())?;
    Ok(ps)
}

// ---- graph binding ---------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

#[derive(Debug, Clone)]
pub struct FusionIds {
    pub sa: AttnIds,
    pub ca: AttnIds,
    pub norm1: NormIds,
    pub norm2: NormIds,
    pub norm3: NormIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct ModalityIds {
    pub modality: Modality,
    pub gru: Vec<GruLayerIds>,
    pub proj: LinearIds,
    pub fusion: Option<FusionIds>,
}

#[derive(Debug, Clone, Copy)]
pub struct GruLayerIds {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wh: NodeId,
    pub uh: NodeId,
    pub bh: NodeId,
}

/// All parameters of one model bound into a graph as tracked leaves,
/// in `ParamSet` storage order (`node_ids` mirrors that order).
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub static_fc1: LinearIds,
    pub static_fc2: LinearIds,
    pub modalities: Vec<ModalityIds>,
    pub head_fc1: LinearIds,
    pub head_fc2: LinearIds,
    pub node_ids: Vec<NodeId>,
}

struct Lookup<'a, T> {
    ids: &'a [NodeId],
    params: &'a ParamSet<T>,
}

impl<'a, T: Real> Lookup<'a, T> {
    fn id(&self, name: &str) -> Result<NodeId> {
        self.params
            .index_of(name)
            .map(|i| self.ids[i])
            .ok_or_else(|| CoreError::contract(format!("parameter `{}` missing from set", name)))
    }

    fn linear(&self, name: &str) -> Result<LinearIds> {
        Ok(LinearIds {
            w: self.id(&format!("{name}.w"))?,
            b: self.id(&format!("{name}.b"))?,
        })
    }

    fn norm(&self, name: &str) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.id(&format!("{name}.gain"))?,
            bias: self.id(&format!("{name}.bias"))?,
        })
    }

    fn attn(&self, name: &str) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.id(&format!("{name}.wq"))?,
            wk: self.id(&format!("{name}.wk"))?,
            wv: self.id(&format!("{name}.wv"))?,
            wo: self.id(&format!("{name}.wo"))?,
        })
    }
}

/// Bind every parameter into `g` and resolve the architecture's node ids.
pub fn bind_model<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<ModelBinding> {
    let ids = params.bind(g)?;
    let lk = Lookup { ids: &ids, params };
    let mut modalities = Vec::new();
    for m in cfg.enabled_modalities() {
        let key = m.key();
        let mut gru = Vec::new();
        for l in 0..cfg.gru_layers {
            gru.push(GruLayerIds {
                wz: lk.id(&format!("gru_{key}.l{l}.wz"))?,
                uz: lk.id(&format!("gru_{key}.l{l}.uz"))?,
                bz: lk.id(&format!("gru_{key}.l{l}.bz"))?,
                wr: lk.id(&format!("gru_{key}.l{l}.wr"))?,
                ur: lk.id(&format!("gru_{key}.l{l}.ur"))?,
                br: lk.id(&format!("gru_{key}.l{l}.br"))?,
                wh: lk.id(&format!("gru_{key}.l{l}.wh"))?,
                uh: lk.id(&format!("gru_{key}.l{l}.uh"))?,
                bh: lk.id(&format!("gru_{key}.l{l}.bh"))?,
            });
        }
        let fusion = if cfg.fusion == FusionMode::Transformer {
            Some(FusionIds {
                sa: lk.attn(&format!("fusion_{key}.sa"))?,
                ca: lk.attn(&format!("fusion_{key}.ca"))?,
                norm1: lk.norm(&format!("fusion_{key}.norm1"))?,
                norm2: lk.norm(&format!("fusion_{key}.norm2"))?,
                norm3: lk.norm(&format!("fusion_{key}.norm3"))?,
                ffn1: lk.linear(&format!("fusion_{key}.ffn1"))?,
                ffn2: lk.linear(&format!("fusion_{key}.ffn2"))?,
                heads: cfg.heads,
            })
        } else {
            None
        };
        modalities.push(ModalityIds {
            modality: m,
            gru,
            proj: lk.linear(&format!("proj_{key}"))?,
            fusion,
        });
    }
    Ok(ModelBinding {
        static_fc1: lk.linear("static.fc1")?,
        static_fc2: lk.linear("static.fc2")?,
        modalities,
        head_fc1: lk.linear("head.fc1")?,
        head_fc2: lk.linear("head.fc2")?,
        node_ids: ids,
    })
}

// ---- building blocks -------------------------------------------------------

fn linear<T: Real>(g: &mut Graph<T>, x: NodeId, l: &LinearIds) -> Result<NodeId> {
    let y = g.matmul(x, l.w)?;
    g.add_row_broadcast(y, l.b)
}

/// One GRU step over a batch: rows are independent sequences.
fn gru_cell<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    h: NodeId,
    ids: &GruLayerIds,
) -> Result<NodeId> {
    let zx = g.matmul(x, ids.wz)?;
    let zh = g.matmul(h, ids.uz)?;
    let zs = g.add(zx, zh)?;
    let zs = g.add_row_broadcast(zs, ids.bz)?;
    let z = g.sigmoid(zs)?;

    let rx = g.matmul(x, ids.wr)?;
    let rh = g.matmul(h, ids.ur)?;
    let rs = g.add(rx, rh)?;
    let rs = g.add_row_broadcast(rs, ids.br)?;
    let r = g.sigmoid(rs)?;

    let cx = g.matmul(x, ids.wh)?;
    let gated = g.mul(r, h)?;
    let ch = g.matmul(gated, ids.uh)?;
    let cs = g.add(cx, ch)?;
    let cs = g.add_row_broadcast(cs, ids.bh)?;
    let cand = g.tanh(cs)?;

    // h' = (1 - z) * h + z * cand
    let neg_z = g.scale(z, -1.0)?;
    let one_minus_z = g.add_scalar(neg_z, 1.0)?;
    let keep = g.mul(one_minus_z, h)?;
    let new = g.mul(z, cand)?;
    g.add(keep, new)
}

/// Run a (multi-layer) GRU over `steps`, each a `[batch, dim]` node for one
/// time step, and return the last layer's final hidden state `[batch, hidden]`.
pub fn gru_forward<T: Real>(
    g: &mut Graph<T>,
    steps: &[NodeId],
    layers: &[GruLayerIds],
    hidden: usize,
) -> Result<NodeId> {
    if steps.is_empty() {
        return Err(CoreError::contract("gru_forward on an empty sequence"));
    }
    if layers.is_empty() {
        return Err(CoreError::contract("gru_forward needs at least one layer"));
    }
    let batch = g.shape(steps[0])[0];
    let mut inputs: Vec<NodeId> = steps.to_vec();
    let mut final_h = None;
    for ids in layers {
        let mut h = g.zeros(&[batch, hidden])?;
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in &inputs {
            h = gru_cell(g, x, h, ids)?;
            outputs.push(h);
        }
        final_h = Some(h);
        inputs = outputs;
    }
    Ok(final_h.expect("at least one layer"))
}

/// Sinusoidal positional encoding row for position `pos`.
fn positional_row(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Add sinusoidal positional encodings to a `[L, dim]` sequence. Off by
/// default; the GRU already encodes order before fusion.
pub fn add_positional<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let mut pe = Vec::with_capacity(rows * cols);
    for p in 0..rows {
        pe.extend(positional_row(p, cols).into_iter().map(T::from_f64));
    }
    let pe = g.constant(&shape, pe)?;
    g.add(x, pe)
}

/// Multi-head attention of `queries` against a keys/values sequence.
/// Returns the combined output and the per-head attention weight nodes.
fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    queries: NodeId,
    keys_values: NodeId,
    ids: &AttnIds,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>)> {
    let q = g.matmul(queries, ids.wq)?;
    let k = g.matmul(keys_values, ids.wk)?;
    let v = g.matmul(keys_values, ids.wv)?;
    let dm = g.shape(q)[1];
    if dm % heads != 0 {
        return Err(CoreError::contract("model_dim not divisible by head count"));
    }
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let w = g.softmax_rows(scores)?;
        weights.push(w);
        outs.push(g.matmul(w, vh)?);
    }
    let cat = g.concat_cols(&outs)?;
    let out = g.matmul(cat, ids.wo)?;
    Ok((out, weights))
}

/// Cross-attention sublayer output, before and after residual + norm.
pub struct CrossAttnOut {
    /// `LayerNorm(queries + attention)`.
    pub output: NodeId,
    /// The raw attention output; with a single `h_s` token this is
    /// independent of the query values.
    pub pre_residual: NodeId,
    /// Per-head attention weight matrices (each `[L, key_count]`).
    pub head_weights: Vec<NodeId>,
}

/// Multi-head cross-attention where the key/value sequence is the static
/// vision feature `h_s`, treated as a single token, followed by residual add
/// and layer norm. With one key the softmax weight is exactly 1 per head.
pub fn cross_attention_static<T: Real>(
    g: &mut Graph<T>,
    query_seq: NodeId,
    h_s: NodeId,
    ca: &AttnIds,
    norm: &NormIds,
    heads: usize,
) -> Result<CrossAttnOut> {
    if g.shape(h_s)[0] != 1 {
        return Err(CoreError::contract("h_s must be a single token"));
    }
    // one output row per query; with a single key every row is the same vector
    let (attn, head_weights) = multi_head_attention(g, query_seq, h_s, ca, heads)?;
    let res = g.add(query_seq, attn)?;
    let output = g.layer_norm(res, norm.gain, norm.bias, LAYER_NORM_EPS)?;
    Ok(CrossAttnOut {
        output,
        pre_residual: attn,
        head_weights,
    })
}

/// One decoder-style fusion block over a dynamic sequence `[L, model_dim]`
/// with `h_s` `[1, d_s]` as cross-attention key/value; the output sequence is
/// mean-pooled to a single fused vector `[1, model_dim]`.
pub fn fusion_block<T: Real>(
    g: &mut Graph<T>,
    dyn_seq: NodeId,
    h_s: NodeId,
    ids: &FusionIds,
) -> Result<NodeId> {
    // self-attention sublayer
    let (sa, _) = multi_head_attention(g, dyn_seq, dyn_seq, &ids.sa, ids.heads)?;
    let res = g.add(dyn_seq, sa)?;
    let x1 = g.layer_norm(res, ids.norm1.gain, ids.norm1.bias, LAYER_NORM_EPS)?;
    // cross-attention against the static feature
    let x2 = cross_attention_static(g, x1, h_s, &ids.ca, &ids.norm2, ids.heads)?.output;
    // position-wise feed-forward
    let f = linear(g, x2, &ids.ffn1)?;
    let f = g.relu(f)?;
    let f = linear(g, f, &ids.ffn2)?;
    let res = g.add(x2, f)?;
    let x3 = g.layer_norm(res, ids.norm3.gain, ids.norm3.bias, LAYER_NORM_EPS)?;
    g.mean_rows(x3)
}

/// Fusion for a batch of one-token dynamic streams, rows independent. The
/// single-token attention weight is identically 1, so the attention outputs
/// are `x W_V W_O` (self) and `h_s W_V W_O` (cross) applied per row.
fn fusion_batched_single_token<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    h_s: NodeId,
    ids: &FusionIds,
) -> Result<NodeId> {
    let sv = g.matmul(x, ids.sa.wv)?;
    let sa = g.matmul(sv, ids.sa.wo)?;
    let res = g.add(x, sa)?;
    let x1 = g.layer_norm(res, ids.norm1.gain, ids.norm1.bias, LAYER_NORM_EPS)?;

    let cv = g.matmul(h_s, ids.ca.wv)?;
    let ca = g.matmul(cv, ids.ca.wo)?;
    let res = g.add(x1, ca)?;
    let x2 = g.layer_norm(res, ids.norm2.gain, ids.norm2.bias, LAYER_NORM_EPS)?;

    let f = linear(g, x2, &ids.ffn1)?;
    let f = g.relu(f)?;
    let f = linear(g, f, &ids.ffn2)?;
    let res = g.add(x2, f)?;
    g.layer_norm(res, ids.norm3.gain, ids.norm3.bias, LAYER_NORM_EPS)
}

/// Raw task outputs for a batch of clips: AU scores `[B, 12]` (unscaled)
/// or expression logits `[B, 8]`, depending on the configured task.
pub struct BatchOutput {
    pub raw: NodeId,
}

fn check_clip(cfg: &ModelConfig, clip: &ClipRecord) -> Result<()> {
    if clip.window.len() != cfg.window_len() {
        return Err(CoreError::contract(format!(
            "clip `{}`@{}: window length {} does not match 2M+1 = {}",
            clip.video_id,
            clip.frame_index,
            clip.window.len(),
            cfg.window_len()
        )));
    }
    if clip.static_feat.len() != cfg.dims.d_s {
        return Err(CoreError::contract("clip static feature dim mismatch"));
    }
    for f in &clip.window {
        if f.expr_emb.len() != cfg.dims.d_e
            || f.audio_feat.len() != cfg.dims.d_a
            || f.word_emb.len() != cfg.dims.d_w
        {
            return Err(CoreError::contract("clip modality feature dim mismatch"));
        }
    }
    Ok(())
}

/// Forward pass over a batch of clips. Rows of every intermediate tensor are
/// per-clip; the GRU runs batched across clips step by step.
pub fn forward_batch<T: Real>(
    g: &mut Graph<T>,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    clips: &[&ClipRecord],
) -> Result<BatchOutput> {
    if clips.is_empty() {
        return Err(CoreError::contract("forward on an empty batch"));
    }
    for c in clips {
        check_clip(cfg, c)?;
    }
    let b = clips.len();
    let d_s = cfg.dims.d_s;

    let mut static_data = Vec::with_capacity(b * d_s);
    for c in clips {
        static_data.extend_from_slice(&c.static_feat);
    }
    let static_in = g.constant_f32(&[b, d_s], &static_data)?;
    let hs = linear(g, static_in, &binding.static_fc1)?;
    let hs = g.tanh(hs)?;
    let h_s = linear(g, hs, &binding.static_fc2)?;

    let mut fused = Vec::new();
    for mids in &binding.modalities {
        let dim = mids.modality.dim(&cfg.dims);
        let mut steps = Vec::with_capacity(cfg.window_len());
        for t in 0..cfg.window_len() {
            let mut data = Vec::with_capacity(b * dim);
            for c in clips {
                data.extend_from_slice(mids.modality.frame_slice(&c.window[t]));
            }
            steps.push(g.constant_f32(&[b, dim], &data)?);
        }
        let h_dyn = gru_forward(g, &steps, &mids.gru, cfg.gru_hidden)?;
        let mut proj = linear(g, h_dyn, &mids.proj)?;
        if cfg.positional_encoding {
            // a batch of one-token streams all sit at position 0
            let pe: Vec<T> = positional_row(0, cfg.model_dim)
                .into_iter()
                .map(T::from_f64)
                .collect();
            let pe_rows: Vec<T> = (0..b).flat_map(|_| pe.iter().copied()).collect();
            let pe = g.constant(&[b, cfg.model_dim], pe_rows)?;
            proj = g.add(proj, pe)?;
        }
        let out = match &mids.fusion {
            Some(f) => fusion_batched_single_token(g, proj, h_s, f)?,
            None => proj,
        };
        fused.push(out);
    }

    fused.push(h_s);
    let cat = g.concat_cols(&fused)?;
    let hidden = linear(g, cat, &binding.head_fc1)?;
    let hidden = g.relu(hidden)?;
    let raw = linear(g, hidden, &binding.head_fc2)?;
    Ok(BatchOutput { raw })
}

/// Verify a loaded parameter set matches the architecture the config
/// describes (same names, same shapes, same order).
pub fn check_params_compatible<T: Real>(params: &ParamSet<T>, cfg: &ModelConfig) -> Result<()> {
    let expected: ParamSet<T> = init_params(cfg, 0)?;
    if params.len() != expected.len() {
        return Err(CoreError::contract(format!(
            "checkpoint has {} parameters, the configuration needs {}",
            params.len(),
            expected.len()
        )));
    }
    for (got, want) in params.iter().zip(expected.iter()) {
        if got.name != want.name || got.shape != want.shape {
            return Err(CoreError::contract(format!(
                "checkpoint parameter `{}` {:?} does not match expected `{}` {:?}",
                got.name, got.shape, want.name, want.shape
            )));
        }
    }
    Ok(())
}

/// Single-clip forward: a batch of one.
pub fn model_forward<T: Real>(
    g: &mut Graph<T>,
    binding: &ModelBinding,
    cfg: &ModelConfig,
    clip: &ClipRecord,
) -> Result<BatchOutput> {
    forward_batch(g, binding, cfg, &[clip])
}
