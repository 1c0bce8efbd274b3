//! Parallel against sequential execution of the three data-parallel hot
//! paths: gallery embedding, relation ranking and one training batch.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sbir_core::config::{Config, Distance};
use sbir_core::data::{render_corpus, GenerateSpec, Split};
use sbir_core::image::{ImageSample, Modality};
use sbir_core::model::Model;
use sbir_core::parallel::{with_execution, Execution};
use sbir_core::retrieval::{embed_all, rank_all, RankMode};
use sbir_core::training::{batch_step, Batch};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup() -> (Config, Model, Vec<ImageSample>, Vec<ImageSample>) {
    let cfg = Config::default();
    let model = Model::new(&cfg.model, 1).unwrap();
    let items = render_corpus(&GenerateSpec {
        pairs_per_category: 4,
        ..GenerateSpec::default()
    })
    .unwrap();
    let (mut sketches, mut photos) = (Vec::new(), Vec::new());
    for g in items.into_iter().filter(|g| g.record.split == Split::Test) {
        match g.image.modality {
            Modality::Sketch => sketches.push(g.image),
            Modality::Photo => photos.push(g.image),
        }
    }
    (cfg, model, sketches, photos)
}

fn benches(c: &mut Criterion) {
    let (cfg, model, sketches, photos) = setup();
    let ids: Vec<u64> = (0..photos.len() as u64).collect();
    let queries = embed_all(&model, &ids, &sketches).unwrap();
    let gallery = embed_all(&model, &ids, &photos).unwrap();
    let pairs: Vec<(ImageSample, ImageSample)> = sketches.iter().cloned().zip(photos.iter().cloned()).collect();
    let idx: Vec<usize> = (0..cfg.train.batch_size.min(pairs.len())).collect();
    let batch = Batch::from_pairs(&pairs, &idx);

    let mut g = c.benchmark_group("execution");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::new("embed_gallery", name), |b| {
            b.iter(|| with_execution(mode, || embed_all(&model, &ids, &photos).unwrap()))
        });
        g.bench_function(BenchmarkId::new("rank_rn", name), |b| {
            b.iter(|| with_execution(mode, || rank_all(&model, &queries, &gallery, RankMode::Rn, Distance::Euclidean).unwrap()))
        });
        g.bench_function(BenchmarkId::new("batch_step", name), |b| {
            b.iter(|| with_execution(mode, || batch_step(&model, &batch, &cfg.train, 3, true).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(execution, benches);
criterion_main!(execution);
