use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use sbir_core::data::{generate_corpus, render_corpus, Corpus, GenerateSpec, Split};
use sbir_core::image::Modality;
use sbir_core::Error;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_corpus_layout() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(&GenerateSpec::default(), dir.path()).unwrap();
    let sketches = corpus.records.iter().filter(|r| r.modality == Modality::Sketch).count();
    let photos = corpus.records.iter().filter(|r| r.modality == Modality::Photo).count();
    assert_eq!((sketches, photos), (120, 120));
    assert_eq!(corpus.categories(Some(Split::Train)).len(), 8);
    assert_eq!(corpus.categories(Some(Split::Test)).len(), 4);
    assert_eq!(files(dir.path()).len(), 241);

    let loaded = Corpus::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(loaded.records, corpus.records);
    assert_eq!(loaded.pairs(Split::Train).unwrap().len(), 80);
    assert_eq!(loaded.pairs(Split::Test).unwrap().len(), 40);
}

#[test]
fn same_seed_same_bytes() {
    let spec = GenerateSpec {
        n_categories: 4,
        pairs_per_category: 3,
        image_size: 32,
        seed: 3,
        train_fraction: 0.5,
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(&spec, a.path()).unwrap();
    generate_corpus(&spec, b.path()).unwrap();
    generate_corpus(&GenerateSpec { seed: 4, ..spec }, c.path()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn sketches_are_sparse_and_photos_are_not() {
    let items = render_corpus(&GenerateSpec::default()).unwrap();
    for g in &items {
        let plane = g.image.width * g.image.height;
        let white = g.image.pixels[..plane].iter().filter(|&&v| v >= 0.98).count() as f64 / plane as f64;
        match g.image.modality {
            Modality::Sketch => {
                assert!(white >= 0.7, "{}: {white}", g.record.path.display());
                assert!(white < 1.0, "{}: blank sketch", g.record.path.display());
            }
            Modality::Photo => assert!(white < 0.7, "{}: {white}", g.record.path.display()),
        }
    }
}

#[test]
fn categories_look_different() {
    let items = render_corpus(&GenerateSpec {
        pairs_per_category: 1,
        ..GenerateSpec::default()
    })
    .unwrap();
    let sketches: BTreeSet<Vec<u8>> = items
        .iter()
        .filter(|g| g.image.modality == Modality::Sketch)
        .map(|g| sbir_core::data::netpbm::encode_pgm(&g.image))
        .collect();
    assert_eq!(sketches.len(), 12);
}

#[test]
fn illegal_specs_are_rejected() {
    let base = GenerateSpec::default();
    for bad in [
        GenerateSpec { image_size: 40, ..base.clone() },
        GenerateSpec { image_size: 0, ..base.clone() },
        GenerateSpec { n_categories: 2, ..base.clone() },
        GenerateSpec { pairs_per_category: 0, ..base.clone() },
        GenerateSpec { train_fraction: 0.01, ..base.clone() },
    ] {
        assert!(matches!(render_corpus(&bad), Err(Error::Invalid(_))), "{bad:?}");
    }
}

#[test]
fn contaminated_manifest_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GenerateSpec {
        n_categories: 3,
        pairs_per_category: 2,
        image_size: 16,
        seed: 1,
        train_fraction: 2.0 / 3.0,
    };
    let mut corpus = generate_corpus(&spec, dir.path()).unwrap();
    let test_cat = corpus.categories(Some(Split::Test))[0];
    let rec = corpus.records.iter_mut().find(|r| r.category_id == test_cat).unwrap();
    rec.split = Split::Train;
    let path = dir.path().join("manifest.tsv");
    corpus.save_manifest(&path).unwrap();
    assert!(matches!(Corpus::load(&path), Err(Error::ZeroShot(_))));
}
