//! Sequential vs parallel throughput on the three hot loops: batch
//! forward passes, candidate sweeps, and gradient accumulation.
//!
//! Run with `cargo bench --bench parallel_vs_seq`. Both variants share the
//! same deterministic work items, so the comparison is pure scheduling
//! overhead vs speedup.

use criterion::{criterion_group, criterion_main, Criterion};

use spanfuse::calib;
use spanfuse::linalg::Mat;
use spanfuse::model::{
    collect_block_outputs, forward_logits, MlpKind, ModelConfig, NormKind, TransformerModel,
};
use spanfuse::parallel::{map_indexed_par, map_indexed_seq};
use spanfuse::selection::token_cosine_distance;

fn bench_model() -> TransformerModel {
    TransformerModel::init(ModelConfig {
        n_layers: 8,
        d_model: 64,
        n_heads: 8,
        d_ff: 128,
        vocab_size: 256,
        norm_kind: NormKind::Rms,
        mlp_kind: MlpKind::GatedSilu,
        causal: true,
        seed: 42,
    })
    .unwrap()
}

fn forward_batch(c: &mut Criterion) {
    let model = bench_model();
    let set = calib::synthesize(1, 8, 64, 256).unwrap();
    let seqs = set.sequences().to_vec();
    let work = |i: usize| forward_logits(&model, &seqs[i..i + 1]).unwrap();
    let mut group = c.benchmark_group("forward_batch");
    group.sample_size(10);
    group.bench_function("seq", |b| b.iter(|| map_indexed_seq(seqs.len(), work)));
    group.bench_function("par", |b| b.iter(|| map_indexed_par(seqs.len(), work)));
    group.finish();
}

fn sweep_distances(c: &mut Criterion) {
    let model = bench_model();
    let set = calib::synthesize(2, 8, 64, 256).unwrap();
    let outputs = collect_block_outputs(&model, set.sequences()).unwrap();
    let n = 2;
    let candidates = outputs.len() - n;
    let work = |k: usize| token_cosine_distance(&outputs[k], &outputs[k + n]).unwrap();
    let mut group = c.benchmark_group("sweep_distances");
    group.bench_function("seq", |b| b.iter(|| map_indexed_seq(candidates, work)));
    group.bench_function("par", |b| b.iter(|| map_indexed_par(candidates, work)));
    group.finish();
}

fn gradient_accumulation(c: &mut Criterion) {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    let mut rng = StdRng::seed_from_u64(7);
    let n = 8192;
    let d = 64;
    let chunk = 256;
    let m = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0f64..1.0));
    let g = Mat::from_fn(n, d, |_, _| rng.gen_range(-1.0f64..1.0));
    // Per-chunk partial sums of per-token outer products — the shape of
    // mini-batch gradient accumulation — folded in chunk order.
    let partial_for = |ci: usize| {
        let mut partial = Mat::zeros(d, d);
        for row in ci * chunk..(ci + 1) * chunk {
            for (a, &mv) in m.row(row).iter().enumerate() {
                let p_row = partial.row_mut(a);
                for (pv, &gv) in p_row.iter_mut().zip(g.row(row)) {
                    *pv += mv * gv;
                }
            }
        }
        partial
    };
    let fold = |partials: Vec<Mat<f64>>| {
        let mut total = Mat::zeros(d, d);
        for p in partials {
            total = total.add(&p);
        }
        total
    };
    let n_chunks = n / chunk;
    let mut group = c.benchmark_group("gradient_accumulation");
    group.bench_function("seq", |b| {
        b.iter(|| fold(map_indexed_seq(n_chunks, partial_for)))
    });
    group.bench_function("par", |b| {
        b.iter(|| fold(map_indexed_par(n_chunks, partial_for)))
    });
    group.finish();
}

criterion_group!(
    benches,
    forward_batch,
    sweep_distances,
    gradient_accumulation
);
criterion_main!(benches);
