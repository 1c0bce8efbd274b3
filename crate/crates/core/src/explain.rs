//! Explainability procedures on a trained model: retrieval-token attention
//! maps, token correspondences, patch-replacement synthesis and the most
//! influential token pair.
//!
//! Patch indices are raster positions on the `side × side` patch lattice.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tape;
use crate::config::InfluenceMode;
use crate::encoder::{LayerTrace, TokenSequence};
use crate::error::{Error, Result};
use crate::image::{ImageSample, Modality};
use crate::model::Model;
use crate::nn::Ctx;
use crate::parallel;
use crate::relation::KernelMatrix;

pub const CORRESPONDENCE_HEADER: &str = "# sbir-correspondence v1";
pub const PROVENANCE_HEADER: &str = "# sbir-provenance v1";

/// Retrieval-token attention over the patch lattice for one layer and head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub side: usize,
    /// 1-based block index.
    pub layer: usize,
    pub head: usize,
    /// `q_ret · k_i` per patch; patches removed before this layer hold the
    /// minimum over the live ones.
    pub raw: Vec<f64>,
    /// `raw` min-max scaled to `[0, 1]`; all zeros when `raw` is constant.
    pub normalized: Vec<f64>,
}

impl AttentionMap {
    /// Grayscale image with each lattice cell drawn as a `patch × patch`
    /// block.
    pub fn to_image(&self, patch: usize) -> ImageSample {
        let size = self.side * patch;
        let mut img = ImageSample::filled(1, size, 0.0, Modality::Sketch);
        for y in 0..size {
            for x in 0..size {
                *img.pixel_mut(0, y, x) = self.normalized[(y / patch) * self.side + x / patch];
            }
        }
        img
    }
}

pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Scatters per-token products onto `n` lattice cells.
pub fn lattice_scores(dots: &[f64], origin: &[usize], n: usize) -> Result<Vec<f64>> {
    if dots.len() != origin.len() || origin.iter().any(|&o| o >= n) {
        return Err(Error::shape("lattice_scores", &[dots.len()], &[origin.len()]));
    }
    if dots.is_empty() {
        return Err(Error::invalid("no live tokens"));
    }
    let floor = dots.iter().copied().fold(f64::INFINITY, f64::min);
    let mut out = vec![floor; n];
    for (&o, &d) in origin.iter().zip(dots) {
        out[o] = d;
    }
    Ok(out)
}

pub fn map_from_trace(trace: &LayerTrace, layer: usize, head: usize, side: usize) -> Result<AttentionMap> {
    let dots = trace
        .dots
        .get(head)
        .ok_or_else(|| Error::invalid(format!("head {head} out of range")))?;
    let raw = lattice_scores(dots, &trace.origin, side * side)?;
    Ok(AttentionMap {
        side,
        layer,
        head,
        normalized: min_max_normalize(&raw),
        raw,
    })
}

/// Attention map of `img` at `layer` (1-based, default last) and `head`
/// (0-based).
pub fn self_attention_map(model: &Model, img: &ImageSample, layer: Option<usize>, head: usize) -> Result<AttentionMap> {
    let cfg = &model.cfg;
    if !cfg.use_ret {
        return Err(Error::invalid("attention maps need the retrieval token"));
    }
    let layer = layer.unwrap_or(cfg.enc_layers);
    if layer == 0 || layer > cfg.enc_layers {
        return Err(Error::invalid(format!("layer {layer} outside [1, {}]", cfg.enc_layers)));
    }
    if head >= cfg.enc_heads {
        return Err(Error::invalid(format!("head {head} outside [0, {})", cfg.enc_heads)));
    }
    let mut tape = Tape::inference();
    let params = model.store.bind(&mut tape);
    let mut cx = Ctx::new(&mut tape, &params, false);
    let mut trace = Vec::new();
    model.encode_image_traced(&mut cx, img, Some(&mut trace))?;
    map_from_trace(&trace[layer - 1], layer, head, cfg.grid_side())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub sketch_patch: usize,
    /// `(photo_patch, kernel value)`, best first.
    pub matches: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceSet {
    /// Gallery id of the photo side, when known.
    pub source: Option<u64>,
    pub rows: Vec<Correspondence>,
    /// Set when fewer than the requested `top_k` photo tokens were alive.
    pub truncated: bool,
}

/// Live columns of row `i`, by descending value, ties by column.
fn ranked_row(m: &KernelMatrix, i: usize) -> Vec<(usize, f64)> {
    let mut cols: Vec<(usize, f64)> = (0..m.n).filter(|&j| m.col_alive[j]).map(|j| (j, m.get(i, j))).collect();
    cols.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cols
}

/// For every live sketch token, its `top_k` photo tokens by kernel value.
pub fn correspondences(m: &KernelMatrix, top_k: usize) -> Result<CorrespondenceSet> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    let alive = m.col_alive.iter().filter(|&&a| a).count();
    let rows = (0..m.n)
        .filter(|&i| m.row_alive[i])
        .map(|i| {
            let mut matches = ranked_row(m, i);
            matches.truncate(top_k);
            Correspondence { sketch_patch: i, matches }
        })
        .collect();
    Ok(CorrespondenceSet {
        source: None,
        rows,
        truncated: top_k > alive,
    })
}

impl CorrespondenceSet {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{CORRESPONDENCE_HEADER}\n");
        if let Some(src) = self.source {
            let _ = writeln!(s, "# source {src}");
        }
        s.push_str("sketch_patch\trank\tphoto_patch\tvalue\n");
        for row in &self.rows {
            for (rank, (j, v)) in row.matches.iter().enumerate() {
                let _ = writeln!(s, "{}\t{}\t{j}\t{v:e}", row.sketch_patch, rank + 1);
            }
        }
        s
    }
}

/// One photo patch that fed an output patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSource {
    pub image_id: u64,
    pub patch: usize,
    pub value: f64,
}

/// Sources of output patch `patch`, in summation order. Empty means the
/// sketch's own pixels were kept (the sketch token had been removed).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchProvenance {
    pub patch: usize,
    pub sources: Vec<PatchSource>,
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub image: ImageSample,
    pub provenance: Vec<PatchProvenance>,
}

/// A gallery photo with its evaluation-mode encoding.
pub struct GalleryItem<'a> {
    pub id: u64,
    pub image: &'a ImageSample,
    pub seq: &'a TokenSequence,
}

/// Mean of `sources`' pixels, summed in order and divided once.
fn mix_patch<'a>(sources: &[PatchSource], lookup: &dyn Fn(u64) -> Option<&'a ImageSample>, p: usize) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for s in sources {
        let img = lookup(s.image_id).ok_or_else(|| Error::invalid(format!("source image {} unavailable", s.image_id)))?;
        let px = img.patch(s.patch, p);
        match &mut acc {
            None => acc = Some(px),
            Some(a) => a.iter_mut().zip(&px).for_each(|(a, v)| *a += v),
        }
    }
    let k = sources.len() as f64;
    Ok(acc.unwrap_or_default().into_iter().map(|v| v / k).collect())
}

/// Rebuilds the synthesized image from the sketch, the provenance and the
/// source images.
pub fn replay(
    sketch: &ImageSample,
    provenance: &[PatchProvenance],
    sources: &HashMap<u64, ImageSample>,
    patch_size: usize,
) -> Result<ImageSample> {
    let mut out = sketch.clone();
    let lookup = |id: u64| sources.get(&id);
    for pp in provenance.iter().filter(|pp| !pp.sources.is_empty()) {
        let px = mix_patch(&pp.sources, &lookup, patch_size)?;
        out.set_patch(pp.patch, patch_size, &px);
    }
    Ok(out)
}

/// Replaces each live sketch patch with the mean of its `k` best photo
/// patches over the whole gallery (by kernel value; ties by gallery order,
/// then patch). A one-photo gallery with `k = 1` is the retrieved-image
/// variant.
pub fn patch_replace_synthesis(
    model: &Model,
    sketch: &ImageSample,
    sketch_seq: &TokenSequence,
    gallery: &[GalleryItem],
    k: usize,
) -> Result<Synthesis> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let kernels = parallel::map(gallery, |g| model.pair_eval(sketch_seq, g.seq).map(|(_, m)| m))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let p = model.cfg.patch_size;
    let n = kernels[0].n;
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        if !kernels[0].row_alive[i] {
            provenance.push(PatchProvenance { patch: i, sources: Vec::new() });
            continue;
        }
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (g, m) in kernels.iter().enumerate() {
            cands.extend(ranked_row(m, i).into_iter().map(|(j, v)| (g, j, v)));
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(k);
        let sources = cands
            .into_iter()
            .map(|(g, j, v)| PatchSource {
                image_id: gallery[g].id,
                patch: j,
                value: v,
            })
            .collect();
        provenance.push(PatchProvenance { patch: i, sources });
    }
    let by_id: HashMap<u64, &ImageSample> = gallery.iter().map(|g| (g.id, g.image)).collect();
    let lookup = |id: u64| by_id.get(&id).copied();
    let mut image = sketch.clone();
    for pp in provenance.iter().filter(|pp| !pp.sources.is_empty()) {
        let px = mix_patch(&pp.sources, &lookup, p)?;
        image.set_patch(pp.patch, p, &px);
    }
    Ok(Synthesis { image, provenance })
}

/// One line per source: `patch  image_id  source_patch  value`; a kept
/// sketch patch is written as `patch  keep`.
pub fn provenance_to_tsv(provenance: &[PatchProvenance]) -> String {
    let mut s = format!("{PROVENANCE_HEADER}\npatch\timage_id\tsource_patch\tvalue\n");
    for pp in provenance {
        if pp.sources.is_empty() {
            let _ = writeln!(s, "{}\tkeep", pp.patch);
        }
        for src in &pp.sources {
            let _ = writeln!(s, "{}\t{}\t{}\t{:e}", pp.patch, src.image_id, src.patch, src.value);
        }
    }
    s
}

pub fn provenance_from_tsv(text: &str) -> Result<Vec<PatchProvenance>> {
    let bad = |m: String| Error::parse("provenance", m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(PROVENANCE_HEADER) {
        return Err(bad(format!("expected header `{PROVENANCE_HEADER}`")));
    }
    let mut out: Vec<PatchProvenance> = Vec::new();
    for line in lines.skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let patch: usize = f[0].parse().map_err(|_| bad(format!("bad patch in `{line}`")))?;
        if out.last().is_none_or(|pp| pp.patch != patch) {
            out.push(PatchProvenance { patch, sources: Vec::new() });
        }
        match f.as_slice() {
            [_, "keep"] => {}
            [_, id, sp, v] => {
                let src = PatchSource {
                    image_id: id.parse().map_err(|_| bad(format!("bad image id `{id}`")))?,
                    patch: sp.parse().map_err(|_| bad(format!("bad source patch `{sp}`")))?,
                    value: v.parse().map_err(|_| bad(format!("bad value `{v}`")))?,
                };
                out.last_mut().expect("pushed above").sources.push(src);
            }
            _ => return Err(bad(format!("bad line `{line}`"))),
        }
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Influence {
    pub i: usize,
    pub j: usize,
    /// `r_full − r_ablated`.
    pub drop: f64,
    pub full: f64,
}

/// `m` with pair `(i, j)` removed.
pub fn ablate(m: &KernelMatrix, i: usize, j: usize, mode: InfluenceMode) -> Vec<f64> {
    let mut v = m.values.clone();
    match mode {
        InfluenceMode::Entry => v[i * m.n + j] = 0.0,
        InfluenceMode::RowColumn => {
            for t in 0..m.n {
                v[i * m.n + t] = 0.0;
                v[t * m.n + j] = 0.0;
            }
        }
    }
    v
}

/// Score drop for every live pair, in `(i, j)` order.
pub fn influence_drops(model: &Model, m: &KernelMatrix, mode: InfluenceMode) -> Result<Vec<(usize, usize, f64)>> {
    let full = model.score_kernel(m)?;
    let pairs: Vec<(usize, usize)> = (0..m.n)
        .flat_map(|i| (0..m.n).map(move |j| (i, j)))
        .filter(|&(i, j)| m.is_alive(i, j))
        .collect();
    parallel::map(&pairs, |&(i, j)| {
        let r = model.relation.score_values(&model.store, &ablate(m, i, j, mode))?;
        Ok((i, j, full - r))
    })
    .into_iter()
    .collect()
}

/// The live pair whose removal lowers the relation score most; ties go to
/// the lexicographically smallest `(i, j)`.
pub fn most_influential_pair(model: &Model, m: &KernelMatrix, mode: InfluenceMode) -> Result<Influence> {
    let full = model.score_kernel(m)?;
    let drops = influence_drops(model, m, mode)?;
    let mut best: Option<(usize, usize, f64)> = None;
    for d in drops {
        if best.is_none_or(|b| d.2 > b.2) {
            best = Some(d);
        }
    }
    let (i, j, drop) = best.ok_or_else(|| Error::invalid("kernel has no live pair"))?;
    Ok(Influence { i, j, drop, full })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kernel(n: usize, values: Vec<f64>) -> KernelMatrix {
        KernelMatrix {
            n,
            values,
            row_alive: vec![true; n],
            col_alive: vec![true; n],
        }
    }

    #[test]
    fn normalization_spans_unit_interval() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(min_max_normalize(&[1.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn removed_patches_take_the_floor() {
        let s = lattice_scores(&[3.0, -1.0], &[1, 3], 4).unwrap();
        assert_eq!(s, vec![-1.0, 3.0, -1.0, -1.0]);
    }

    #[test]
    fn correspondence_truncates_to_live_columns() {
        let mut m = kernel(2, vec![0.1, 0.9, 0.5, 0.5]);
        let c = correspondences(&m, 1).unwrap();
        assert_eq!(c.rows[0].matches, vec![(1, 0.9)]);
        assert_eq!(c.rows[1].matches, vec![(0, 0.5)]);
        m.col_alive[1] = false;
        let c = correspondences(&m, 2).unwrap();
        assert!(c.truncated);
        assert_eq!(c.rows[0].matches.len(), 1);
    }

    #[test]
    fn provenance_text_roundtrip() {
        let prov = vec![
            PatchProvenance { patch: 0, sources: vec![] },
            PatchProvenance {
                patch: 1,
                sources: vec![
                    PatchSource { image_id: 7, patch: 3, value: 0.1 + 0.2 },
                    PatchSource { image_id: 9, patch: 0, value: -1.0 / 3.0 },
                ],
            },
        ];
        assert_eq!(provenance_from_tsv(&provenance_to_tsv(&prov)).unwrap(), prov);
    }

    #[test]
    fn row_column_ablation_clears_cross() {
        let m = kernel(2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ablate(&m, 0, 1, InfluenceMode::RowColumn), vec![0.0, 0.0, 3.0, 0.0]);
        assert_eq!(ablate(&m, 1, 0, InfluenceMode::Entry), vec![1.0, 2.0, 0.0, 4.0]);
    }
}
