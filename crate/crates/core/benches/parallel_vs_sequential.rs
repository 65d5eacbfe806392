use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qlab_core::analysis::{knn_indices, Metric, RepresentationSet};
use qlab_core::data::{gen_dataset, SplitSpec, Vocab};
use qlab_core::exec;
use qlab_core::frozen::{FrozenBundle, FrozenConfig, LmKind};
use qlab_core::pipelines::{prepare, sample_loss, EncoderCache, PipelineKind, PipelineOptions};
use qlab_core::qformer::{QFormerConfig, QFormerState};
use qlab_core::tensor::Graph;
use qlab_core::Rng;

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn vision_batch(c: &mut Criterion) {
    let bundle = FrozenBundle::init(0, &FrozenConfig::new(LmKind::EncoderDecoder)).unwrap();
    let ds = gen_dataset(0, 40, &SplitSpec::default()).unwrap();
    let images: Vec<_> = ds.train.iter().take(16).map(|s| s.image.clone()).collect();
    let mut group = c.benchmark_group("vision_encode_16");
    group.sample_size(10);
    for (name, single) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_single_thread(single);
            b.iter(|| exec::map_indexed(images.len(), |i| bundle.vision_encode(black_box(&images[i])).unwrap().0))
        });
    }
    group.finish();
    exec::set_single_thread(false);
}

fn training_batch(c: &mut Criterion) {
    let bundle = FrozenBundle::init(0, &FrozenConfig::new(LmKind::EncoderDecoder)).unwrap();
    let qf = QFormerState::new(&QFormerConfig::default(), 0).unwrap();
    let ds = gen_dataset(0, 40, &SplitSpec::default()).unwrap();
    let vocab = Vocab::new();
    let prompt = vocab.tokenize("describe the image", true).unwrap();
    let feats: Vec<_> = ds.train.iter().take(16).map(|s| bundle.vision_encode(&s.image).unwrap().0).collect();
    let targets: Vec<_> = ds.train.iter().take(16).map(|s| s.caption_ids.clone()).collect();
    let opts = PipelineOptions::default();
    let grounding = prepare(PipelineKind::Grounded, &bundle, &mut EncoderCache::new(true), &prompt, &opts).unwrap();
    let mut group = c.benchmark_group("grounded_loss_and_grads_16");
    group.sample_size(10);
    for (name, single) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_single_thread(single);
            b.iter(|| {
                exec::map_indexed(feats.len(), |i| {
                    let mut g = Graph::new();
                    let (loss, _, _) = sample_loss(
                        &mut g,
                        PipelineKind::Grounded,
                        &bundle,
                        &qf,
                        &feats[i],
                        &prompt,
                        &targets[i],
                        grounding.as_ref(),
                        &opts,
                    )
                    .unwrap();
                    g.backward(loss).unwrap();
                    g.param_grads(&qf.store)
                })
            })
        });
    }
    group.finish();
    exec::set_single_thread(false);
}

fn knn(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let (n, d) = (256, 64);
    let data: Vec<f64> = (0..n * d).map(|_| rng.normal(0.0, 1.0)).collect();
    let set = RepresentationSet::new(n, d, data, "bench").unwrap();
    let mut group = c.benchmark_group("knn_256x64");
    for (name, single) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_single_thread(single);
            b.iter(|| knn_indices(black_box(&set), 10, Metric::Cosine).unwrap())
        });
    }
    group.finish();
    exec::set_single_thread(false);
}

criterion_group!(benches, vision_batch, training_batch, knn);
criterion_main!(benches);
