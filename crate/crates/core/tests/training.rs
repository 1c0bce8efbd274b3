use sbir_core::ablation::{run_ablation, standard_plan, table_to_tsv};
use sbir_core::config::Config;
use sbir_core::data::{render_corpus, GenerateSpec, Split};
use sbir_core::image::{ImageSample, Modality};
use sbir_core::model::Model;
use sbir_core::parallel::{with_execution, Execution};
use sbir_core::retrieval::EvalSet;
use sbir_core::training::train;

fn small() -> (Config, Vec<(ImageSample, ImageSample)>) {
    let (cfg, pairs, _) = small_with_test();
    (cfg, pairs)
}

fn small_with_test() -> (Config, Vec<(ImageSample, ImageSample)>, EvalSet) {
    let spec = GenerateSpec {
        n_categories: 3,
        pairs_per_category: 4,
        image_size: 16,
        seed: 5,
        train_fraction: 2.0 / 3.0,
    };
    let items = render_corpus(&spec).unwrap();
    let (mut sketches, mut photos) = (Vec::new(), Vec::new());
    let mut test = EvalSet {
        query_ids: Vec::new(),
        queries: Vec::new(),
        gallery_ids: Vec::new(),
        gallery: Vec::new(),
    };
    for (i, g) in items.into_iter().enumerate() {
        match (g.record.split, g.image.modality) {
            (Split::Train, Modality::Sketch) => sketches.push(g.image),
            (Split::Train, Modality::Photo) => photos.push(g.image),
            (Split::Test, Modality::Sketch) => {
                test.query_ids.push(i as u64);
                test.queries.push(g.image);
            }
            (Split::Test, Modality::Photo) => {
                test.gallery_ids.push(i as u64);
                test.gallery.push(g.image);
            }
        }
    }
    let mut cfg = Config::default();
    cfg.model.image_size = 16;
    cfg.model.patch_size = 4;
    cfg.model.conv_kernels = vec![3, 3];
    cfg.model.embed_dim = 16;
    cfg.model.enc_layers = 2;
    cfg.model.selection_layers = vec![1];
    cfg.train.epochs = 3;
    (cfg, sketches.into_iter().zip(photos).collect(), test)
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (mut cfg, pairs) = small();
    cfg.train.lr = 0.0;
    cfg.train.weight_decay = 0.0;
    let mut model = Model::new(&cfg.model, 2).unwrap();
    let before = model.store.clone();
    let trace = train(&mut model, &pairs, &cfg.train, |_| {}).unwrap();
    assert_eq!(trace.len(), 3);
    assert!(trace.iter().all(|e| e.total == trace[0].total), "{trace:?}");
    for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
        assert_eq!(a.value(), b.value());
    }
}

#[test]
fn loss_falls_on_a_small_corpus() {
    let (mut cfg, pairs) = small();
    cfg.train.epochs = 8;
    let mut model = Model::new(&cfg.model, 2).unwrap();
    let trace = train(&mut model, &pairs, &cfg.train, |_| {}).unwrap();
    assert!(trace.last().unwrap().total < trace[0].total, "{trace:?}");
    assert!(trace.iter().all(|e| e.total.is_finite() && e.triplet >= 0.0 && e.relation >= 0.0));
}

#[test]
fn training_is_independent_of_execution_strategy() {
    let (cfg, pairs) = small();
    let run = |mode| {
        with_execution(mode, || {
            let mut model = Model::new(&cfg.model, 9).unwrap();
            let trace = train(&mut model, &pairs, &cfg.train, |_| {}).unwrap();
            let values: Vec<Vec<f64>> = model.store.iter().map(|(_, p)| p.value().to_vec()).collect();
            (trace.iter().map(|e| e.total.to_bits()).collect::<Vec<_>>(), values)
        })
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn one_category_is_refused() {
    let (cfg, pairs) = small();
    let cat = pairs[0].0.category_id;
    let same: Vec<_> = pairs.into_iter().filter(|p| p.0.category_id == cat).collect();
    let mut model = Model::new(&cfg.model, 2).unwrap();
    assert!(train(&mut model, &same, &cfg.train, |_| {}).is_err());
}

#[test]
fn same_seed_same_trace() {
    let (cfg, pairs) = small();
    let run = || {
        let mut model = Model::new(&cfg.model, 4).unwrap();
        train(&mut model, &pairs, &cfg.train, |_| {}).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn ablation_table_is_reproducible() {
    let (mut cfg, pairs, test) = small_with_test();
    cfg.train.epochs = 1;
    let rows = run_ablation(&standard_plan(), &cfg, &pairs, &test, true).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.outcome.is_ok() && r.parity_ok()));
    let again = run_ablation(&standard_plan(), &cfg, &pairs, &test, false).unwrap();
    assert_eq!(table_to_tsv(&rows), table_to_tsv(&again));
}
