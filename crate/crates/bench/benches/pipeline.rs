use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use scriptbridge_core::model::{init_params, ModelParams};
use scriptbridge_core::numcore::{Graph, Tensor};
use scriptbridge_core::quantsim::{calibrate, quantize_model, quantized_encode_pooled};
use scriptbridge_core::retrieval::{eval_protocol, Protocol, Ranker};
use scriptbridge_core::synthgen::{render_word, synthesize, Dataset, Split, StyleParams};
use scriptbridge_core::training::{train_stage, StageContext, TrainConfig};
use scriptbridge_core::{seed, RunConfig};

fn desk() -> (RunConfig, Dataset) {
    let cfg = RunConfig::default();
    let ds = synthesize(&cfg.lexicon.build().unwrap(), &cfg.dataset).unwrap();
    (cfg, ds)
}

fn ramp(rows: usize, cols: usize, k: u64) -> Tensor {
    let data = (0..rows * cols)
        .map(|i| ((seed::mix(&[k, i as u64]) % 2001) as f64 / 1000.0) - 1.0)
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn numcore(c: &mut Criterion) {
    let a = ramp(40, 108, 1);
    let b = ramp(108, 64, 2);
    c.bench_function("matmul 40x108x64", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
    c.bench_function("matmul+tanh+sum backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(a.clone());
            let w = g.leaf(b.clone());
            let m = g.matmul(x, w).unwrap();
            let t = g.tanh(m);
            let s = g.sum(t);
            g.backward(s).unwrap();
            black_box(g.grad(w).data()[0])
        })
    });
}

fn synthgen(c: &mut Criterion) {
    let style = StyleParams::for_style(3, 7, 1.5);
    let canvas = RunConfig::default().dataset.canvas;
    c.bench_function("render_word", |bench| {
        bench.iter(|| render_word(black_box("abcde"), "en", &style, canvas, 11).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let (cfg, ds) = desk();
    let tc = TrainConfig {
        pretrain: scriptbridge_core::training::StageConfig {
            epochs: 1,
            ..cfg.train.pretrain
        },
        ..cfg.train.clone()
    };
    let init = init_params(0, &tc.model).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("pretrain epoch (15 steps, N=40)", |bench| {
        bench.iter(|| {
            let ctx = StageContext {
                model: &tc.model,
                sampler: &tc.sampler,
                loss: &tc.loss,
                terms: tc.terms,
                first_step: 0,
            };
            train_stage(init.clone(), &ds, &tc.pretrain, ctx, None).unwrap()
        })
    });
    group.finish();
}

fn inference(c: &mut Criterion) {
    let (cfg, ds) = desk();
    let model = cfg.train.model;
    let params: ModelParams = init_params(0, &model).unwrap();
    let ood = ds.split(Split::OodEval);
    c.bench_function("retrieval within:en (OOD split)", |bench| {
        bench.iter(|| {
            eval_protocol(
                &ood,
                &Protocol::within("en"),
                &params,
                &model,
                Ranker::Cosine,
            )
            .unwrap()
        })
    });
    let pooled = ramp(64, model.pooled_dim(), 3).map(|x| 0.5 * (x + 1.0));
    let qm = quantize_model(&params, &model, &calibrate(&params, &pooled).unwrap()).unwrap();
    c.bench_function("int8 encode 64 images", |bench| {
        bench.iter(|| quantized_encode_pooled(&qm, black_box(&pooled)).unwrap())
    });
}

criterion_group!(benches, numcore, synthgen, training, inference);
criterion_main!(benches);
