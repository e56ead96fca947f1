use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use capctl_bench::{captioner, dataset, matcher};
use capctl_core::captioner::{beam_decode, greedy_batch};
use capctl_core::corpus::{Control, ControlSignal};
use capctl_core::metrics::cider_d;
use capctl_core::tensor::Graph;

fn decoding(c: &mut Criterion) {
    let data = dataset();
    let model = captioner(&data, Control::Quality);
    let feats: Vec<_> = data.test.iter().take(20).map(|s| &s.features).collect();
    let betas = vec![&[4.0][..]; feats.len()];
    c.bench_function("greedy 20 scenes", |b| {
        b.iter(|| black_box(greedy_batch(&model, &feats, &betas, 16).unwrap()))
    });
    c.bench_function("beam 5 one scene", |b| {
        b.iter(|| black_box(beam_decode(&model, feats[0], &[4.0], 5, 16).unwrap()))
    });
}

fn xe_batch(c: &mut Criterion) {
    let data = dataset();
    let model = captioner(&data, Control::Multi);
    let pairs: Vec<_> = data
        .train
        .iter()
        .take(32)
        .map(|s| (s, &s.captions[0]))
        .collect();
    let feats: Vec<_> = pairs.iter().map(|(s, _)| &s.features).collect();
    let sigs: Vec<_> = pairs
        .iter()
        .map(|(_, cap)| ControlSignal::from_caption(cap, Control::Multi))
        .collect();
    let betas: Vec<&[f64]> = sigs.iter().map(|s| s.values()).collect();
    let refs: Vec<&[usize]> = pairs.iter().map(|(_, cap)| cap.tokens.as_slice()).collect();
    c.bench_function("xe loss+grad batch 32", |b| {
        b.iter(|| {
            let g = Graph::new();
            let w = model.bind(&g).unwrap();
            let (loss, _) = model.xe_loss_batch(&g, &w, &feats, &betas, &refs).unwrap();
            g.backward(loss).unwrap();
            black_box(loss.item())
        })
    });
}

fn scoring(c: &mut Criterion) {
    let data = dataset();
    let m = matcher(&data);
    let scene = &data.test[0];
    let cands: Vec<&[usize]> = scene.reference_tokens();
    c.bench_function("matcher 5 candidates", |b| {
        b.iter(|| black_box(m.scores(&scene.features, &cands).unwrap()))
    });
    c.bench_function("cider-d 5 references", |b| {
        b.iter(|| black_box(cider_d(cands[0], &cands[1..], &data.idf)))
    });
}

criterion_group!(benches, decoding, xe_batch, scoring);
criterion_main!(benches);
