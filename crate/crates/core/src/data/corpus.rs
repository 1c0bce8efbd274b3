//! Corpus manifest, zero-shot splits and procedural generation.
//!
//! Manifest files are tab-separated text:
//!
//! ```text
//! # sbir-manifest v1
//! path	modality	category_id	instance_id	split
//! images/c00_i0000_sketch.pgm	sketch	0	0	train
//! ```
//!
//! Paths are relative to the manifest's directory. A sketch and its paired
//! photo share an `instance_id`.
#![allow(clippy::tabs_in_doc_comments)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::netpbm;
use super::shapes::{category_spec, render_photo, render_sketch, Pose};
use crate::error::{Error, Result};
use crate::image::{ImageSample, Modality};
use crate::parallel;
use crate::seed;

pub const MANIFEST_HEADER: &str = "# sbir-manifest v1";
const COLUMNS: &str = "path\tmodality\tcategory_id\tinstance_id\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::parse("manifest", format!("bad split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub modality: Modality,
    pub category_id: u32,
    pub instance_id: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

/// Aborts with the first category present in both record sets.
pub fn check_zero_shot(train: &[&SampleRecord], test: &[&SampleRecord]) -> Result<()> {
    let train_cats: BTreeSet<u32> = train.iter().map(|r| r.category_id).collect();
    match test.iter().find(|r| train_cats.contains(&r.category_id)) {
        Some(r) => Err(Error::ZeroShot(r.category_id)),
        None => Ok(()),
    }
}

impl Corpus {
    pub fn manifest_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n{COLUMNS}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                r.path.display(),
                r.modality.as_str(),
                r.category_id,
                r.instance_id,
                r.split.as_str()
            );
        }
        s
    }

    pub fn parse_manifest(text: &str, root: &Path) -> Result<Self> {
        let bad = |line: usize, m: String| Error::parse("manifest", format!("line {line}: {m}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(bad(1, format!("expected header `{MANIFEST_HEADER}`"))),
        }
        let mut records = Vec::new();
        for (no, line) in lines {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') || line == COLUMNS {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(no + 1, format!("expected 5 columns, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad(no + 1, format!("bad number `{s}`")));
            records.push(SampleRecord {
                path: PathBuf::from(f[0]),
                modality: Modality::parse(f[1])?,
                category_id: num(f[2])?,
                instance_id: num(f[3])?,
                split: Split::parse(f[4])?,
            });
        }
        let corpus = Self {
            root: root.to_path_buf(),
            records,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse_manifest(&text, &root)
    }

    pub fn save_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest_text()).map_err(|e| Error::io(path, e))
    }

    /// Zero-shot disjointness, a photo for every sketch instance, and at
    /// least one photo per category.
    pub fn validate(&self) -> Result<()> {
        let train: Vec<&SampleRecord> = self.records.iter().filter(|r| r.split == Split::Train).collect();
        let test: Vec<&SampleRecord> = self.records.iter().filter(|r| r.split == Split::Test).collect();
        check_zero_shot(&train, &test)?;
        let photos: BTreeSet<u32> = self
            .records
            .iter()
            .filter(|r| r.modality == Modality::Photo)
            .map(|r| r.instance_id)
            .collect();
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.modality == Modality::Sketch && !photos.contains(&r.instance_id))
        {
            return Err(Error::invalid(format!("sketch instance {} has no paired photo", r.instance_id)));
        }
        let photo_cats: BTreeSet<u32> = self
            .records
            .iter()
            .filter(|r| r.modality == Modality::Photo)
            .map(|r| r.category_id)
            .collect();
        if let Some(r) = self.records.iter().find(|r| !photo_cats.contains(&r.category_id)) {
            return Err(Error::invalid(format!("category {} has no photos", r.category_id)));
        }
        Ok(())
    }

    pub fn categories(&self, split: Option<Split>) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .records
            .iter()
            .filter(|r| split.is_none_or(|s| r.split == s))
            .map(|r| r.category_id)
            .collect();
        set.into_iter().collect()
    }

    pub fn select(&self, split: Split, modality: Modality) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split && self.records[i].modality == modality)
            .collect()
    }

    pub fn load_image(&self, index: usize) -> Result<ImageSample> {
        let r = &self.records[index];
        let mut img = netpbm::read(&self.root.join(&r.path), r.modality)?;
        img.category_id = r.category_id;
        img.instance_id = r.instance_id;
        Ok(img)
    }

    pub fn load_images(&self, indices: &[usize]) -> Result<Vec<ImageSample>> {
        parallel::map(indices, |&i| self.load_image(i)).into_iter().collect()
    }

    /// Each sketch of `split` with the first photo of its instance.
    pub fn pairs(&self, split: Split) -> Result<Vec<(ImageSample, ImageSample)>> {
        let mut photo_of: BTreeMap<u32, usize> = BTreeMap::new();
        for i in self.select(split, Modality::Photo) {
            photo_of.entry(self.records[i].instance_id).or_insert(i);
        }
        let sketches = self.select(split, Modality::Sketch);
        let mut idx = Vec::with_capacity(sketches.len());
        for s in sketches {
            let inst = self.records[s].instance_id;
            let p = *photo_of
                .get(&inst)
                .ok_or_else(|| Error::invalid(format!("sketch instance {inst} has no photo in the {} split", split.as_str())))?;
            idx.push((s, p));
        }
        parallel::map(&idx, |&(s, p)| Ok((self.load_image(s)?, self.load_image(p)?)))
            .into_iter()
            .collect()
    }
}

/// Category-level partition: `round(n · train_fraction)` training
/// categories chosen by a seeded shuffle; both sides must be nonempty.
pub fn split_zero_shot(categories: &[u32], train_fraction: f64, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut cats: Vec<u32> = categories.to_vec();
    cats.sort_unstable();
    cats.dedup();
    if cats.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 categories, found {}", cats.len())));
    }
    let n_train = (cats.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= cats.len() {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} leaves an empty side for {} categories",
            cats.len()
        )));
    }
    cats.shuffle(&mut seed::rng(seed, 0x5911_7000));
    let (mut train, mut test) = (cats[..n_train].to_vec(), cats[n_train..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSpec {
    pub n_categories: usize,
    pub pairs_per_category: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for GenerateSpec {
    fn default() -> Self {
        Self {
            n_categories: 12,
            pairs_per_category: 10,
            image_size: 64,
            seed: 7,
            train_fraction: 2.0 / 3.0,
        }
    }
}

/// One rendered record with its pixels.
pub struct Generated {
    pub record: SampleRecord,
    pub image: ImageSample,
}

/// Renders the corpus in memory, sketch then photo per instance, categories
/// in order.
pub fn render_corpus(spec: &GenerateSpec) -> Result<Vec<Generated>> {
    if spec.n_categories < 3 {
        return Err(Error::invalid(format!("need at least 3 categories, got {}", spec.n_categories)));
    }
    if spec.image_size == 0 || !spec.image_size.is_multiple_of(16) {
        return Err(Error::invalid(format!("image size {} is not a positive multiple of 16", spec.image_size)));
    }
    if spec.pairs_per_category == 0 {
        return Err(Error::invalid("pairs_per_category must be positive"));
    }
    let cats: Vec<u32> = (0..spec.n_categories as u32).collect();
    let (train, _) = split_zero_shot(&cats, spec.train_fraction, spec.seed)?;
    let shapes: Vec<_> = (0..spec.n_categories).map(|k| category_spec(k, spec.seed)).collect();
    let n = spec.n_categories * spec.pairs_per_category;
    let rendered = parallel::map_range(n, |inst| {
        let cat = inst / spec.pairs_per_category;
        let shape = &shapes[cat];
        let pose = Pose::sample(&mut seed::rng(spec.seed, 0x9053_0000 + inst as u64), spec.image_size);
        let image_seed = seed::derive(spec.seed, 0x1A6E_0000 + inst as u64);
        let sketch = render_sketch(shape, pose, spec.image_size, image_seed);
        let photo = render_photo(shape, pose, spec.image_size, image_seed);
        (sketch, photo)
    });
    let mut out = Vec::with_capacity(2 * n);
    for (inst, (sketch, photo)) in rendered.into_iter().enumerate() {
        let cat = (inst / spec.pairs_per_category) as u32;
        let split = if train.contains(&cat) { Split::Train } else { Split::Test };
        for (mut image, ext) in [(sketch, "pgm"), (photo, "ppm")] {
            image.category_id = cat;
            image.instance_id = inst as u32;
            out.push(Generated {
                record: SampleRecord {
                    path: PathBuf::from(format!(
                        "images/c{cat:02}_i{inst:04}_{}.{ext}",
                        image.modality.as_str()
                    )),
                    modality: image.modality,
                    category_id: cat,
                    instance_id: inst as u32,
                    split,
                },
                image,
            });
        }
    }
    Ok(out)
}

/// Renders the corpus into `dir` (`manifest.tsv` plus `images/`).
pub fn generate_corpus(spec: &GenerateSpec, dir: &Path) -> Result<Corpus> {
    let items = render_corpus(spec)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let written = parallel::map(&items, |g| {
        let path = dir.join(&g.record.path);
        match g.record.modality {
            Modality::Sketch => netpbm::write_pgm(&path, &g.image),
            Modality::Photo => netpbm::write_ppm(&path, &g.image),
        }
    });
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let corpus = Corpus {
        root: dir.to_path_buf(),
        records: items.into_iter().map(|g| g.record).collect(),
    };
    corpus.validate()?;
    corpus.save_manifest(&dir.join("manifest.tsv"))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let cats: Vec<u32> = (0..12).collect();
        let (train, test) = split_zero_shot(&cats, 2.0 / 3.0, 5).unwrap();
        assert_eq!((train.len(), test.len()), (8, 4));
        assert!(train.iter().all(|c| !test.contains(c)));
        assert_eq!(split_zero_shot(&cats, 2.0 / 3.0, 5).unwrap(), (train, test));
        assert!(split_zero_shot(&cats, 0.01, 5).is_err());
        assert!(split_zero_shot(&cats, 1.0, 5).is_err());
    }

    #[test]
    fn contamination_is_detected() {
        let rec = |cat, split| SampleRecord {
            path: PathBuf::from("x.pgm"),
            modality: Modality::Photo,
            category_id: cat,
            instance_id: 0,
            split,
        };
        let (a, b) = (rec(1, Split::Train), rec(1, Split::Test));
        assert!(matches!(check_zero_shot(&[&a], &[&b]), Err(Error::ZeroShot(1))));
    }

    #[test]
    fn manifest_roundtrip_and_degenerate_corpus() {
        let text = format!(
            "{MANIFEST_HEADER}\n{COLUMNS}\na.pgm\tsketch\t0\t0\ttrain\na.ppm\tphoto\t0\t0\ttrain\nb.pgm\tsketch\t1\t1\ttest\n"
        );
        let err = Corpus::parse_manifest(&text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("instance 1"), "{err}");
        let ok = format!("{text}b.ppm\tphoto\t1\t1\ttest\n");
        let c = Corpus::parse_manifest(&ok, Path::new(".")).unwrap();
        assert_eq!(Corpus::parse_manifest(&c.manifest_text(), Path::new(".")).unwrap(), c);
    }
}
