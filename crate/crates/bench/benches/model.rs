use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use synccap_bench::fixture;
use synccap_core::dataset::EncodedSample;
use synccap_core::objectives::{sample_loss, LossWeights};
use synccap_core::Tape;

fn forward_backward(c: &mut Criterion) {
    let (corpus, vocab, model) = fixture(4, 64);
    let s = EncodedSample::new(&corpus[0], &vocab);
    let w = LossWeights::default();

    c.bench_function("teacher_forced_loss", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind_frozen(&mut tape);
            let loss = sample_loss(&model, &mut tape, &bound, &s.poses, &s.caption.tokens, &w).unwrap();
            black_box(tape.value(loss.total).item())
        })
    });

    c.bench_function("loss_and_gradient", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let loss = sample_loss(&model, &mut tape, &bound, &s.poses, &s.caption.tokens, &w).unwrap();
            black_box(tape.backward(loss.total).unwrap())
        })
    });

    c.bench_function("greedy_generate", |b| b.iter(|| black_box(model.generate(&s.poses).unwrap())));
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
