//! Central finite-difference gradient checks for every differentiable op
//! and for the composite blocks, at f64. The numeric side re-runs the
//! forward pass with perturbed inputs and never touches the backward code
//! it is checking.

use crate::error::Result;
use crate::features::{ClipRecord, FeatureDims, FrameFeatures};
use crate::labels::AU_COUNT;
use crate::losses::{au_ce_loss, au_circle_loss, expr_ce_loss, AuBatchLabels, ExprBatchLabels};
use crate::model::{
    bind_model, cross_attention_static, forward_batch, fusion_block, gru_forward, init_params,
    ModalityFlags, ModelConfig, Task,
};
use crate::params::ParamSet;
use crate::tensor::{Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let diff = (a - n).abs();
    let scale = a.abs().max(n.abs());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// Central difference with a kink guard: when the first estimate disagrees,
/// retry with a tighter step. A genuine gradient bug fails at every step
/// size; a relu/clamp kink inside the stencil does not.
fn fd_rel_err(analytic: f64, eval: &dyn Fn(f64) -> Result<f64>) -> Result<f64> {
    let numeric = |eps: f64| -> Result<f64> { Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps)) };
    let mut err = rel_err(analytic, numeric(EPSILON)?);
    if err >= TOLERANCE {
        err = err.min(rel_err(analytic, numeric(EPSILON / 16.0)?));
    }
    Ok(err)
}

/// Check d(loss)/d(input) for every element of every input leaf.
pub fn finite_diff_check<F>(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f64>)],
    build: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|(s, d)| g.leaf(s, d.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();

    let mut max_rel_err = 0.0f64;
    for (pi, (_, data)) in inputs.iter().enumerate() {
        for k in 0..data.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(qi, (s, d))| {
                        let mut dd = d.clone();
                        if qi == pi {
                            dd[k] += delta;
                        }
                        g.leaf(s, dd)
                    })
                    .collect::<Result<_>>()?;
                let loss = build(&mut g, &ids)?;
                g.scalar(loss)
            };
            max_rel_err = max_rel_err.max(fd_rel_err(analytic[pi][k], &eval)?);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err,
    })
}

/// Check d(loss)/d(theta) for every parameter element; the builder binds the
/// parameter set itself and returns the loss plus the bound leaf ids in
/// parameter order.
pub fn finite_diff_check_params<F>(
    name: &str,
    params: &ParamSet<f64>,
    build: F,
) -> Result<CheckResult>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<(NodeId, Vec<NodeId>)>,
{
    let mut g = Graph::new();
    let (loss, ids) = build(&mut g, params)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();

    let mut max_rel_err = 0.0f64;
    for pi in 0..params.len() {
        for k in 0..params.entry(pi).value.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = params.clone();
                perturbed.entry_mut(pi).value[k] += delta;
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, &perturbed)?;
                g.scalar(loss)
            };
            max_rel_err = max_rel_err.max(fd_rel_err(analytic[pi][k], &eval)?);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_err,
    })
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random values in [-2, 2] but at least `margin` away from every point in
/// `kinks`, so central differences stay on one side of non-smooth points.
fn rand_vec_away(rng: &mut ChaCha8Rng, n: usize, kinks: &[f64], margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > margin) {
                break v;
            }
        })
        .collect()
}

fn tiny_model_config(task: Task) -> ModelConfig {
    ModelConfig {
        dims: FeatureDims {
            d_s: 6,
            d_e: 3,
            d_a: 4,
            d_w: 5,
        },
        window_half: 2,
        model_dim: 4,
        heads: 2,
        gru_layers: 2,
        gru_hidden: 4,
        head_hidden: 4,
        modalities: ModalityFlags::all(),
        fusion: crate::model::FusionMode::Transformer,
        positional_encoding: false,
        task,
    }
}

fn random_clip(rng: &mut ChaCha8Rng, cfg: &ModelConfig, class: u8) -> ClipRecord {
    let window = (0..cfg.window_len())
        .map(|_| FrameFeatures {
            expr_emb: rand_vec(rng, cfg.dims.d_e, -1.0, 1.0)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
            audio_feat: rand_vec(rng, cfg.dims.d_a, -1.0, 1.0)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
            word_emb: rand_vec(rng, cfg.dims.d_w, -1.0, 1.0)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        })
        .collect();
    let mut au = [0u8; AU_COUNT];
    for (j, b) in au.iter_mut().enumerate() {
        *b = ((class as usize + j) % 3 == 0) as u8;
    }
    ClipRecord {
        video_id: "gc".into(),
        frame_index: 0,
        static_feat: rand_vec(rng, cfg.dims.d_s, -1.0, 1.0)
            .into_iter()
            .map(|v| v as f32)
            .collect(),
        window,
        au_label: Some(au),
        expr_label: Some(class),
    }
}

/// A weighted mean turns any op output into a scalar with distinct
/// per-element sensitivities.
fn weighted_scalar(g: &mut Graph<f64>, x: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let n = g.value(x).len();
    let shape = g.shape(x).to_vec();
    let w = g.constant(&shape, rand_vec(rng, n, -1.0, 1.0))?;
    let p = g.mul(x, w)?;
    g.mean_all(p)
}

/// Run the whole suite: every primitive op, the composite blocks, the three
/// losses, and the full model at a tiny configuration for both tasks.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);

    // -- primitives --
    {
        let a = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let b = (vec![4, 2], rand_vec(&mut rng, 8, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(1);
        results.push(finite_diff_check("op.matmul", &[a, b], |g, ids| {
            let m = g.matmul(ids[0], ids[1])?;
            weighted_scalar(g, m, &mut r.clone())
        })?);
    }
    {
        let x = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(2);
        results.push(finite_diff_check("op.transpose", &[x], |g, ids| {
            let t = g.transpose(ids[0])?;
            weighted_scalar(g, t, &mut r.clone())
        })?);
    }
    for (name, which) in [("op.add", 0), ("op.sub", 1), ("op.mul", 2)] {
        let a = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let b = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(3 + which as u64);
        results.push(finite_diff_check(name, &[a, b], move |g, ids| {
            let y = match which {
                0 => g.add(ids[0], ids[1])?,
                1 => g.sub(ids[0], ids[1])?,
                _ => g.mul(ids[0], ids[1])?,
            };
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    {
        let m = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let v = (vec![4], rand_vec(&mut rng, 4, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(6);
        results.push(finite_diff_check("op.add_row_broadcast", &[m, v], |g, ids| {
            let y = g.add_row_broadcast(ids[0], ids[1])?;
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    for (name, lo, hi, kinks) in [
        ("op.scale", -2.0, 2.0, vec![]),
        ("op.add_scalar", -2.0, 2.0, vec![]),
        ("op.sigmoid", -2.0, 2.0, vec![]),
        ("op.tanh", -2.0, 2.0, vec![]),
        ("op.relu", -2.0, 2.0, vec![0.0]),
        ("op.log", 0.1, 2.0, vec![]),
        ("op.exp", -2.0, 2.0, vec![]),
        ("op.clamp", -2.0, 2.0, vec![-1.0, 1.0]),
    ] {
        let data = if kinks.is_empty() {
            rand_vec(&mut rng, 12, lo, hi)
        } else {
            rand_vec_away(&mut rng, 12, &kinks, 0.05)
        };
        let x = (vec![3, 4], data);
        let r = ChaCha8Rng::seed_from_u64(7);
        results.push(finite_diff_check(name, &[x], move |g, ids| {
            let y = match name {
                "op.scale" => g.scale(ids[0], 1.7)?,
                "op.add_scalar" => g.add_scalar(ids[0], 0.3)?,
                "op.sigmoid" => g.sigmoid(ids[0])?,
                "op.tanh" => g.tanh(ids[0])?,
                "op.relu" => g.relu(ids[0])?,
                "op.log" => g.log(ids[0])?,
                "op.exp" => g.exp(ids[0])?,
                _ => g.clamp(ids[0], -1.0, 1.0)?,
            };
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    {
        let x = (vec![3, 5], rand_vec(&mut rng, 15, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(8);
        results.push(finite_diff_check("op.softmax", &[x], |g, ids| {
            let y = g.softmax_rows(ids[0])?;
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    {
        let x = (vec![3, 5], rand_vec(&mut rng, 15, -2.0, 2.0));
        let gain = (vec![5], rand_vec(&mut rng, 5, 0.5, 1.5));
        let bias = (vec![5], rand_vec(&mut rng, 5, -0.5, 0.5));
        let r = ChaCha8Rng::seed_from_u64(9);
        results.push(finite_diff_check("op.layer_norm", &[x, gain, bias], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    {
        let a = (vec![3, 2], rand_vec(&mut rng, 6, -2.0, 2.0));
        let b = (vec![3, 3], rand_vec(&mut rng, 9, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(10);
        results.push(finite_diff_check("op.concat_cols", &[a, b], |g, ids| {
            let y = g.concat_cols(&[ids[0], ids[1]])?;
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    {
        let a = (vec![2, 4], rand_vec(&mut rng, 8, -2.0, 2.0));
        let b = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(11);
        results.push(finite_diff_check("op.concat_rows", &[a, b], |g, ids| {
            let y = g.concat_rows(&[ids[0], ids[1]])?;
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    {
        let x = (vec![3, 6], rand_vec(&mut rng, 18, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(12);
        results.push(finite_diff_check("op.slice_cols", &[x], |g, ids| {
            let y = g.slice_cols(ids[0], 2, 3)?;
            weighted_scalar(g, y, &mut r.clone())
        })?);
    }
    for name in ["op.sum_all", "op.mean_all", "op.mean_rows"] {
        let x = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let r = ChaCha8Rng::seed_from_u64(13);
        results.push(finite_diff_check(name, &[x], move |g, ids| {
            match name {
                "op.sum_all" => g.sum_all(ids[0]),
                "op.mean_all" => g.mean_all(ids[0]),
                _ => {
                    let y = g.mean_rows(ids[0])?;
                    weighted_scalar(g, y, &mut r.clone())
                }
            }
        })?);
    }
    {
        let x = (vec![3, 6], rand_vec(&mut rng, 18, -2.0, 2.0));
        let mask: Vec<f64> = (0..18).map(|i| ((i * 7 + 1) % 3 != 0) as u8 as f64).collect();
        results.push(finite_diff_check("op.log_sum_exp_zero", &[x], move |g, ids| {
            let m = g.constant(&[3, 6], mask.clone())?;
            let y = g.log_sum_exp_zero_masked(ids[0], m)?;
            g.mean_all(y)
        })?);
    }

    // -- losses w.r.t. their inputs --
    {
        let probs = (vec![2, AU_COUNT], rand_vec(&mut rng, 2 * AU_COUNT, 0.05, 0.95));
        let labels = AuBatchLabels {
            rows: vec![
                std::array::from_fn(|j| (j % 2) as u8),
                std::array::from_fn(|j| (j % 3 == 0) as u8),
            ],
        };
        results.push(finite_diff_check("loss.au_ce", &[probs], move |g, ids| {
            au_ce_loss(g, ids[0], &labels)
        })?);
    }
    {
        let scores = (vec![2, AU_COUNT], rand_vec(&mut rng, 2 * AU_COUNT, -2.0, 2.0));
        let labels = AuBatchLabels {
            rows: vec![
                std::array::from_fn(|j| (j % 2) as u8),
                std::array::from_fn(|j| (j % 4 == 1) as u8),
            ],
        };
        results.push(finite_diff_check("loss.au_circle", &[scores], move |g, ids| {
            au_circle_loss(g, ids[0], &labels)
        })?);
    }
    {
        // feed logits through the graph softmax so the check covers the
        // whole expression loss path
        let logits = (vec![2, 8], rand_vec(&mut rng, 16, -2.0, 2.0));
        let mut soft = [0.0f64; 8];
        soft[2] = 0.3;
        soft[5] = 0.7;
        let labels = ExprBatchLabels {
            rows: vec![
                {
                    let mut r = [0.0f64; 8];
                    r[1] = 1.0;
                    r
                },
                soft,
            ],
        };
        results.push(finite_diff_check("loss.expr_ce", &[logits], move |g, ids| {
            let probs = g.softmax_rows(ids[0])?;
            expr_ce_loss(g, probs, &labels)
        })?);
    }

    // -- composite blocks w.r.t. parameters --
    let cfg = tiny_model_config(Task::Expr);
    let params: ParamSet<f64> = init_params(&cfg, 0xfeed)?;
    let mut clip_rng = ChaCha8Rng::seed_from_u64(0xc11b);
    let clip_a = random_clip(&mut clip_rng, &cfg, 1);
    let clip_b = random_clip(&mut clip_rng, &cfg, 4);

    {
        let seq: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, cfg.dims.d_e, -1.0, 1.0)).collect();
        let cfg2 = cfg.clone();
        results.push(finite_diff_check_params("gru_forward", &params, move |g, ps| {
            let binding = bind_model(g, ps, &cfg2)?;
            let steps: Vec<NodeId> = seq
                .iter()
                .map(|x| g.constant(&[1, cfg2.dims.d_e], x.clone()))
                .collect::<Result<_>>()?;
            let h = gru_forward(g, &steps, &binding.modalities[0].gru, cfg2.gru_hidden)?;
            let loss = g.mean_all(h)?;
            Ok((loss, binding.node_ids))
        })?);
    }
    {
        // gradients w.r.t. the queries and h_s through the cross-attention
        let queries = (vec![3, 4], rand_vec(&mut rng, 12, -2.0, 2.0));
        let h_s = (vec![1, 6], rand_vec(&mut rng, 6, -2.0, 2.0));
        let params2 = params.clone();
        let cfg2 = cfg.clone();
        results.push(finite_diff_check("cross_attention.inputs", &[queries, h_s], move |g, ids| {
            // only the declared inputs are compared; the bound parameters
            // stay fixed across evaluations
            let binding = bind_model(g, &params2, &cfg2)?;
            let f = binding.modalities[0].fusion.as_ref().unwrap();
            let out = cross_attention_static(g, ids[0], ids[1], &f.ca, &f.norm2, f.heads)?;
            g.mean_all(out.output)
        })?);
    }
    {
        let cfg2 = cfg.clone();
        let seq: Vec<f64> = rand_vec(&mut rng, 3 * 4, -1.0, 1.0);
        let hs: Vec<f64> = rand_vec(&mut rng, 6, -1.0, 1.0);
        results.push(finite_diff_check_params("fusion_block", &params, move |g, ps| {
            let binding = bind_model(g, ps, &cfg2)?;
            let f = binding.modalities[0].fusion.as_ref().unwrap();
            let seq = g.constant(&[3, 4], seq.clone())?;
            let hs = g.constant(&[1, 6], hs.clone())?;
            let pooled = fusion_block(g, seq, hs, f)?;
            let loss = g.mean_all(pooled)?;
            Ok((loss, binding.node_ids))
        })?);
    }
    for task in [Task::Au, Task::Expr] {
        let cfg = tiny_model_config(task);
        let params: ParamSet<f64> = init_params(&cfg, 0xbead)?;
        let clips = vec![clip_a.clone(), clip_b.clone()];
        let name = match task {
            Task::Au => "model.au",
            Task::Expr => "model.expr",
        };
        results.push(finite_diff_check_params(name, &params, move |g, ps| {
            let binding = bind_model(g, ps, &cfg)?;
            let refs: Vec<&ClipRecord> = clips.iter().collect();
            let out = forward_batch(g, &binding, &cfg, &refs)?;
            let loss = match task {
                Task::Au => {
                    let labels = AuBatchLabels {
                        rows: clips.iter().map(|c| c.au_label.unwrap()).collect(),
                    };
                    let probs = g.sigmoid(out.raw)?;
                    let ce = au_ce_loss(g, probs, &labels)?;
                    let circle = au_circle_loss(g, out.raw, &labels)?;
                    g.add(ce, circle)?
                }
                Task::Expr => {
                    let classes: Vec<u8> = clips.iter().map(|c| c.expr_label.unwrap()).collect();
                    let labels = ExprBatchLabels::one_hot(&classes)?;
                    let probs = g.softmax_rows(out.raw)?;
                    expr_ce_loss(g, probs, &labels)?
                }
            };
            Ok((loss, binding.node_ids))
        })?);
    }

    Ok(results)
}
