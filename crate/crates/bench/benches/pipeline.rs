use criterion::{criterion_group, criterion_main, Criterion};
use mmfusion_core::config::{ci_dataset, ci_run};
use mmfusion_core::features::{generate_synthetic, make_clip, ClipRecord};
use mmfusion_core::model::{bind_model, forward_batch, init_params, Task};
use mmfusion_core::postprocess::{smooth, PredictionSequence, SeqLabels, SmoothRule, SmoothingPolicy};
use mmfusion_core::losses::{expr_ce_loss, ExprBatchLabels};
use mmfusion_core::tensor::Graph;
use mmfusion_core::ParamSet;
use std::hint::black_box;

fn batch_fixture() -> (mmfusion_core::config::RunConfig, ParamSet<f32>, Vec<ClipRecord>) {
    let cfg = ci_run(Task::Expr);
    let videos = generate_synthetic(&ci_dataset(3)).unwrap();
    let model_cfg = cfg.model_config();
    let params: ParamSet<f32> = init_params(&model_cfg, 1).unwrap();
    let clips: Vec<ClipRecord> = (0..cfg.training.batch_size)
        .map(|i| make_clip(&videos[i % videos.len()], 20 + i, model_cfg.window_half).unwrap())
        .collect();
    (cfg, params, clips)
}

fn bench_forward(c: &mut Criterion) {
    let (cfg, params, clips) = batch_fixture();
    let model_cfg = cfg.model_config();
    let refs: Vec<&ClipRecord> = clips.iter().collect();
    c.bench_function("forward_batch_16", |b| {
        b.iter(|| {
            let mut g: Graph<f32> = Graph::new();
            let binding = bind_model(&mut g, &params, &model_cfg).unwrap();
            let out = forward_batch(&mut g, &binding, &model_cfg, &refs).unwrap();
            black_box(g.value(out.raw)[0])
        })
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let (cfg, params, clips) = batch_fixture();
    let model_cfg = cfg.model_config();
    let refs: Vec<&ClipRecord> = clips.iter().collect();
    let classes: Vec<u8> = clips.iter().map(|c| c.expr_label.unwrap()).collect();
    let labels = ExprBatchLabels::one_hot(&classes).unwrap();
    c.bench_function("train_step_16", |b| {
        b.iter(|| {
            let mut g: Graph<f32> = Graph::new();
            let binding = bind_model(&mut g, &params, &model_cfg).unwrap();
            let out = forward_batch(&mut g, &binding, &model_cfg, &refs).unwrap();
            let probs = g.softmax_rows(out.raw).unwrap();
            let loss = expr_ce_loss(&mut g, probs, &labels).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(binding.node_ids[0])[0])
        })
    });
}

fn bench_smoothing(c: &mut Criterion) {
    let labels: Vec<u8> = (0..10_000)
        .map(|i| {
            let base = ((i / 40) % 8) as u8;
            if i % 97 == 0 {
                (base + 1) % 8
            } else {
                base
            }
        })
        .collect();
    let seq = PredictionSequence {
        video_id: "bench".into(),
        labels: SeqLabels::Expr(labels),
    };
    let policy = SmoothingPolicy::uniform(
        0..8,
        SmoothRule {
            run_threshold: 8,
            window_radius: 15,
        },
    );
    c.bench_function("smooth_10k_frames", |b| {
        b.iter(|| black_box(smooth(&seq, &policy).unwrap()))
    });
}

criterion_group!(benches, bench_forward, bench_forward_backward, bench_smoothing);
criterion_main!(benches);
