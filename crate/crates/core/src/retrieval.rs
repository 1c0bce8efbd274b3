//! Gallery ranking by retrieval-token distance (`ret`) or relation score
//! (`rn`), and the ranking interchange file.
//!
//! Ranking files hold one line per query after the version header:
//! `query_id<TAB>gallery_id:score<TAB>gallery_id:score...`, best first. In
//! `ret` mode the score is the negated distance.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{Distance, EvalConfig, Granularity};
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::data::{Corpus, Split};
use crate::image::{ImageSample, Modality};
use crate::metrics::MetricReport;
use crate::model::{descriptor, distance, Model};
use crate::parallel;

pub const RANKING_HEADER: &str = "# sbir-ranking v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankMode {
    Ret,
    Rn,
}

impl RankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RankMode::Ret => "ret",
            RankMode::Rn => "rn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ret" => Ok(RankMode::Ret),
            "rn" => Ok(RankMode::Rn),
            _ => Err(Error::parse("rank mode", format!("`{s}` (expected ret or rn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query_id: u64,
    pub gallery_ids: Vec<u64>,
    /// Non-increasing.
    pub scores: Vec<f64>,
    pub mode: RankMode,
}

/// Sorts by descending score, ties by ascending gallery id.
pub fn rank_by_scores(query_id: u64, ids: &[u64], scores: &[f64], mode: RankMode) -> RankingResult {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    // `+ 0.0` folds −0 into +0 so it ties with +0.
    order.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)).then(ids[a].cmp(&ids[b])));
    RankingResult {
        query_id,
        gallery_ids: order.iter().map(|&i| ids[i]).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
        mode,
    }
}

/// An encoded image with its identity and labels.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub id: u64,
    pub category_id: u32,
    pub instance_id: u32,
    pub seq: TokenSequence,
    pub descriptor: Vec<f64>,
}

impl Embedded {
    pub fn new(id: u64, img: &ImageSample, seq: TokenSequence) -> Self {
        Self {
            id,
            category_id: img.category_id,
            instance_id: img.instance_id,
            descriptor: descriptor(&seq),
            seq,
        }
    }
}

pub fn embed_all(model: &Model, ids: &[u64], images: &[ImageSample]) -> Result<Vec<Embedded>> {
    if ids.len() != images.len() {
        return Err(Error::shape("embed_all", &[ids.len()], &[images.len()]));
    }
    parallel::map_range(images.len(), |i| Ok(Embedded::new(ids[i], &images[i], model.embed(&images[i])?)))
        .into_iter()
        .collect()
}

fn nonempty(gallery: &[Embedded]) -> Result<()> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    Ok(())
}

/// Ascending descriptor distance.
pub fn rank_ret(query: &Embedded, gallery: &[Embedded], kind: Distance) -> Result<RankingResult> {
    nonempty(gallery)?;
    let ids: Vec<u64> = gallery.iter().map(|g| g.id).collect();
    let scores = gallery
        .iter()
        .map(|g| distance(&query.descriptor, &g.descriptor, kind).map(|d| -d))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_scores(query.id, &ids, &scores, RankMode::Ret))
}

/// Descending relation score.
pub fn rank_rn(model: &Model, query: &Embedded, gallery: &[Embedded]) -> Result<RankingResult> {
    nonempty(gallery)?;
    let ids: Vec<u64> = gallery.iter().map(|g| g.id).collect();
    let scores = parallel::map(gallery, |g| model.relation_score(&query.seq, &g.seq))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_scores(query.id, &ids, &scores, RankMode::Rn))
}

/// Ranks the gallery for every query. Relation scores for all query/gallery
/// pairs are computed in one parallel sweep.
pub fn rank_all(
    model: &Model,
    queries: &[Embedded],
    gallery: &[Embedded],
    mode: RankMode,
    kind: Distance,
) -> Result<Vec<RankingResult>> {
    nonempty(gallery)?;
    match mode {
        RankMode::Ret => parallel::map(queries, |q| rank_ret(q, gallery, kind)).into_iter().collect(),
        RankMode::Rn => {
            let g = gallery.len();
            let scores = parallel::map_range(queries.len() * g, |k| {
                model.relation_score(&queries[k / g].seq, &gallery[k % g].seq)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let ids: Vec<u64> = gallery.iter().map(|e| e.id).collect();
            Ok(queries
                .iter()
                .enumerate()
                .map(|(qi, q)| rank_by_scores(q.id, &ids, &scores[qi * g..(qi + 1) * g], RankMode::Rn))
                .collect())
        }
    }
}

/// Relevance by category or instance label.
pub fn relevance<'a>(
    queries: &'a [Embedded],
    gallery: &'a [Embedded],
    granularity: Granularity,
) -> impl Fn(u64, u64) -> bool + 'a {
    let key = move |e: &Embedded| match granularity {
        Granularity::Category => e.category_id,
        Granularity::Instance => e.instance_id,
    };
    let q: std::collections::HashMap<u64, u32> = queries.iter().map(|e| (e.id, key(e))).collect();
    let g: std::collections::HashMap<u64, u32> = gallery.iter().map(|e| (e.id, key(e))).collect();
    move |qid, gid| match (q.get(&qid), g.get(&gid)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

pub fn evaluate(
    model: &Model,
    queries: &[Embedded],
    gallery: &[Embedded],
    mode: RankMode,
    cfg: &EvalConfig,
    granularity: Granularity,
) -> Result<(Vec<RankingResult>, MetricReport)> {
    let rankings = rank_all(model, queries, gallery, mode, cfg.ret_distance)?;
    let rel = relevance(queries, gallery, granularity);
    let cutoff = (cfg.map_cutoff > 0).then_some(cfg.map_cutoff);
    let report = MetricReport::compute(&rankings, &rel, &cfg.ks, cutoff)?;
    Ok((rankings, report))
}

/// Query sketches and gallery photos of one split, identified by manifest
/// record index.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub query_ids: Vec<u64>,
    pub queries: Vec<ImageSample>,
    pub gallery_ids: Vec<u64>,
    pub gallery: Vec<ImageSample>,
}

impl EvalSet {
    pub fn from_corpus(corpus: &Corpus, split: Split) -> Result<Self> {
        let qi = corpus.select(split, Modality::Sketch);
        let gi = corpus.select(split, Modality::Photo);
        Ok(Self {
            queries: corpus.load_images(&qi)?,
            gallery: corpus.load_images(&gi)?,
            query_ids: qi.iter().map(|&i| i as u64).collect(),
            gallery_ids: gi.iter().map(|&i| i as u64).collect(),
        })
    }

    pub fn embed(&self, model: &Model) -> Result<(Vec<Embedded>, Vec<Embedded>)> {
        Ok((
            embed_all(model, &self.query_ids, &self.queries)?,
            embed_all(model, &self.gallery_ids, &self.gallery)?,
        ))
    }
}

pub fn rankings_to_text(rankings: &[RankingResult]) -> String {
    let mut s = format!("{RANKING_HEADER}\n");
    for r in rankings {
        let _ = write!(s, "{}", r.query_id);
        for (g, v) in r.gallery_ids.iter().zip(&r.scores) {
            let _ = write!(s, "\t{g}:{v:e}");
        }
        s.push('\n');
    }
    s
}

pub fn rankings_from_text(text: &str, mode: RankMode) -> Result<Vec<RankingResult>> {
    let bad = |m: String| Error::parse("ranking", m);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(RANKING_HEADER) {
        return Err(bad(format!("expected header `{RANKING_HEADER}`")));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut f = line.split('\t');
        let query_id = f
            .next()
            .and_then(|q| q.parse().ok())
            .ok_or_else(|| bad(format!("bad query id in `{line}`")))?;
        let (mut gallery_ids, mut scores) = (Vec::new(), Vec::new());
        for item in f {
            let (g, v) = item.split_once(':').ok_or_else(|| bad(format!("bad item `{item}`")))?;
            gallery_ids.push(g.parse().map_err(|_| bad(format!("bad gallery id `{g}`")))?);
            scores.push(v.parse().map_err(|_| bad(format!("bad score `{v}`")))?);
        }
        out.push(RankingResult {
            query_id,
            gallery_ids,
            scores,
            mode,
        });
    }
    Ok(out)
}

pub fn write_rankings(path: &Path, rankings: &[RankingResult]) -> Result<()> {
    std::fs::write(path, rankings_to_text(rankings)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_gallery_id() {
        let r = rank_by_scores(0, &[5, 2, 9, 1], &[0.5, 0.9, 0.5, -0.0], RankMode::Rn);
        assert_eq!(r.gallery_ids, vec![2, 5, 9, 1]);
        let z = rank_by_scores(0, &[3, 1], &[0.0, -0.0], RankMode::Ret);
        assert_eq!(z.gallery_ids, vec![1, 3]);
    }

    #[test]
    fn ranking_text_roundtrip() {
        let r = vec![rank_by_scores(4, &[1, 2], &[0.25, 0.75], RankMode::Rn)];
        let back = rankings_from_text(&rankings_to_text(&r), RankMode::Rn).unwrap();
        assert_eq!(back, r);
    }
}
