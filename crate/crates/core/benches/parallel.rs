//! Parallel vs sequential throughput of the hot batch paths.
//!
//! The default build benches the rayon path on the global pool and on a
//! single-thread pool. `cargo bench -p clic-core --no-default-features`
//! benches the plain-iterator fallback under the `sequential` label.

use std::hint::black_box;

use clic_core::icd::score_dataset;
use clic_core::heuristics::EntropyScorer;
use clic_core::nn::encoder::{backward, batch_from_images, encoder_forward, EncoderParams, EMBED_DIM};
use clic_core::nn::tensor::Tensor;
use clic_core::par;
use clic_core::rcm::rng_from_seed;
use clic_core::synth;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const BATCH: usize = 32;

type Job<'a> = &'a mut (dyn FnMut() + Send);
type Runner = Box<dyn Fn(Job)>;

fn modes() -> Vec<(&'static str, Runner)> {
    if !par::is_parallel() {
        return vec![("sequential", Box::new(|f: Job| f()))];
    }
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        vec![
            ("rayon", Box::new(|f: Job| f())),
            ("rayon-1-thread", Box::new(move |f: Job| single.install(f))),
        ]
    }
    #[cfg(not(feature = "parallel"))]
    unreachable!()
}

fn encoder(c: &mut Criterion) {
    let params = EncoderParams::init(&mut rng_from_seed(1));
    let images: Vec<_> = synth::corpus(BATCH, 64, 2).into_iter().map(|s| s.image).collect();
    let batch = batch_from_images(&images).unwrap();
    let upstream = Tensor::new(vec![BATCH, EMBED_DIM], vec![1e-2; BATCH * EMBED_DIM]).unwrap();
    let mut group = c.benchmark_group("encoder");
    group.sample_size(10);
    for (mode, run) in modes() {
        group.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| run(&mut || {
                black_box(encoder_forward(&params, &batch).unwrap());
            }))
        });
        group.bench_function(BenchmarkId::new("backward", mode), |b| {
            b.iter(|| run(&mut || {
                black_box(backward(&params, &batch, &upstream).unwrap());
            }))
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth::write_corpus(dir.path(), 64, 64, 3).unwrap();
    let mut group = c.benchmark_group("score_dataset");
    group.sample_size(10);
    for (mode, run) in modes() {
        group.bench_function(BenchmarkId::new("entropy", mode), |b| {
            b.iter(|| run(&mut || {
                black_box(score_dataset(&manifest, &EntropyScorer));
            }))
        });
    }
    group.finish();
}

criterion_group!(benches, encoder, scoring);
criterion_main!(benches);
