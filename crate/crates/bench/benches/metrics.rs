use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use synccap_core::metrics::{bleu_scores, predicted_interval, rouge_l_corpus};

fn text_metrics(c: &mut Criterion) {
    let refs: Vec<Vec<String>> = (0..500)
        .map(|i| format!("a person walks forward then turns around and sits down {}", i % 7))
        .map(|s| s.split(' ').map(String::from).collect())
        .collect();
    let cands: Vec<Vec<String>> = refs.iter().map(|r| r.iter().rev().cloned().collect()).collect();
    c.bench_function("bleu_500", |b| b.iter(|| black_box(bleu_scores(&cands, &refs))));
    c.bench_function("rouge_l_500", |b| b.iter(|| black_box(rouge_l_corpus(&cands, &refs))));
}

fn interval(c: &mut Criterion) {
    let raw: Vec<f64> = (0..200).map(|i| (-((i as f64 - 120.0) / 15.0).powi(2)).exp()).collect();
    let z: f64 = raw.iter().sum();
    let beta: Vec<f64> = raw.iter().map(|x| x / z).collect();
    c.bench_function("predicted_interval_200", |b| b.iter(|| black_box(predicted_interval(&beta, 0.75))));
}

criterion_group!(benches, text_metrics, interval);
criterion_main!(benches);
