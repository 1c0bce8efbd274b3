//! Losses and the training loop.
//!
//! A batch holds `B` sketch/photo pairs. Each image is encoded on its own
//! tape, every one of the `B²` sketch/photo combinations runs the pair head on
//! its own tape, and the triplet loss runs on a small tape over the encoder
//! descriptors. Gradients flow back as seeds: pair tapes and the triplet tape
//! return gradients for the encoder outputs, which then seed the image tapes.
//! All work items are independent, so they run through [`crate::parallel`];
//! gradients are summed in a fixed order, so results do not depend on the
//! execution strategy.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autodiff::{AdamW, AdamWConfig, ParamGrads, ParamId, Tape, Tensor};
use crate::config::{Granularity, TrainConfig};
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::model::{descriptor_tensor, Group, Model};
use crate::nn::Ctx;
use crate::parallel;
use crate::seed;

pub const TRACE_HEADER: &str = "epoch,l_tri,l_re,l_total";

pub fn label(img: &ImageSample, g: Granularity) -> u32 {
    match g {
        Granularity::Category => img.category_id,
        Granularity::Instance => img.instance_id,
    }
}

/// `max(d⁺ − d⁻ + m, 0)`.
pub fn triplet_term(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Mean over triplets of `max(‖a − p‖ − ‖a − n‖ + m, 0)`.
pub fn triplet_loss(tape: &mut Tape, triplets: &[(Tensor, Tensor, Tensor)], margin: f64) -> Result<Tensor> {
    if triplets.is_empty() {
        return Err(Error::invalid("triplet loss over an empty batch"));
    }
    let mut terms = Vec::with_capacity(triplets.len());
    for (a, p, n) in triplets {
        let dp = tape.sub(a, p)?;
        let dp = tape.norm(&dp)?;
        let dn = tape.sub(a, n)?;
        let dn = tape.norm(&dn)?;
        let t = tape.sub(&dp, &dn)?;
        let t = tape.add_scalar(&t, margin)?;
        let t = tape.relu(&t)?;
        terms.push(tape.reshape(&t, &[1, 1])?);
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    let all = tape.concat_rows(&refs)?;
    tape.mean(&all)
}

/// `Σ (r − y)² / P` over the `P` scored pairs.
pub fn relation_loss(tape: &mut Tape, scores: &[Tensor], labels: &[f64]) -> Result<Tensor> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("relation_loss", &[scores.len()], &[labels.len()]));
    }
    let mut terms = Vec::with_capacity(scores.len());
    for (r, &y) in scores.iter().zip(labels) {
        let e = tape.add_scalar(r, -y)?;
        let e = tape.reshape(&e, &[1, 1])?;
        terms.push(e);
    }
    let refs: Vec<&Tensor> = terms.iter().collect();
    let all = tape.concat_rows(&refs)?;
    tape.mean_square(&all)
}

pub fn total_loss(tape: &mut Tape, l_tri: &Tensor, l_re: &Tensor) -> Result<Tensor> {
    tape.add(l_tri, l_re)
}

/// Anchor/positive/negative indices within a batch: anchor sketch `a`, its
/// paired photo `a`, and every photo `j` whose label differs.
pub fn batch_triplets(sketch_labels: &[u32], photo_labels: &[u32]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (a, &la) in sketch_labels.iter().enumerate() {
        for (j, &lj) in photo_labels.iter().enumerate() {
            if lj != la {
                out.push((a, a, j));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub triplet: f64,
    pub relation: f64,
    pub total: f64,
}

/// `B` aligned sketch/photo pairs.
pub struct Batch<'a> {
    pub sketches: Vec<&'a ImageSample>,
    pub photos: Vec<&'a ImageSample>,
}

impl<'a> Batch<'a> {
    pub fn from_pairs(pairs: &'a [(ImageSample, ImageSample)], idx: &[usize]) -> Self {
        Self {
            sketches: idx.iter().map(|&i| &pairs[i].0).collect(),
            photos: idx.iter().map(|&i| &pairs[i].1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sketches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sketches.is_empty()
    }
}

struct ImageWork {
    tape: Tape,
    params: Vec<Tensor>,
    seq: TokenSequence,
}

struct PairWork {
    tape: Tape,
    params: Vec<Tensor>,
    sketch_leaf: Tensor,
    photo_leaf: Tensor,
    score: Tensor,
    dist: Option<Tensor>,
}

fn new_tape(record: bool) -> Tape {
    if record {
        Tape::new()
    } else {
        Tape::inference()
    }
}

fn add_in(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Parameters updated by the optimizer. Without the relation loss the pair
/// head receives no gradient, so it is frozen rather than left to decay.
pub fn trainable(model: &Model, cfg: &TrainConfig) -> Vec<ParamId> {
    model
        .store
        .ids()
        .filter(|&id| match model.group(id) {
            Group::Branch => true,
            Group::Cross => cfg.relation_loss || model.cfg.triplet_after_ca,
            Group::Metric | Group::Relation => cfg.relation_loss,
        })
        .collect()
}

/// Loss of one batch in training mode (dropout on, masks drawn from
/// `batch_seed`), and optionally the gradient of the total loss.
pub fn batch_step(
    model: &Model,
    batch: &Batch,
    cfg: &TrainConfig,
    batch_seed: u64,
    want_grads: bool,
) -> Result<(LossParts, Option<ParamGrads>)> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let images: Vec<&ImageSample> = batch.sketches.iter().chain(&batch.photos).copied().collect();
    let has_ret = model.cfg.use_ret;

    let works = parallel::map_range(images.len(), |i| -> Result<ImageWork> {
        let mut tape = new_tape(want_grads);
        let params = model.store.bind(&mut tape);
        let seq = {
            let mut cx = Ctx::new(&mut tape, &params, true);
            model.encode_image(&mut cx, images[i])?
        };
        Ok(ImageWork { tape, params, seq })
    });
    let works: Vec<ImageWork> = works.into_iter().collect::<Result<_>>()?;
    let mut seeds: Vec<Vec<f64>> = works.iter().map(|w| vec![0.0; w.seq.x.numel()]).collect();

    let s_labels: Vec<u32> = batch.sketches.iter().map(|s| label(s, cfg.granularity)).collect();
    let p_labels: Vec<u32> = batch.photos.iter().map(|p| label(p, cfg.granularity)).collect();
    let triplets = batch_triplets(&s_labels, &p_labels);
    let mut parts = LossParts::default();

    // Without a retrieval token the triplet term is dropped along with it.
    if has_ret && !model.cfg.triplet_after_ca && !triplets.is_empty() {
        let mut tape = new_tape(want_grads);
        let leaves: Vec<Tensor> = works.iter().map(|w| tape.track(&w.seq.x)).collect();
        let descs = leaves
            .iter()
            .map(|l| descriptor_tensor(&mut tape, l, has_ret))
            .collect::<Result<Vec<_>>>()?;
        let trip: Vec<(Tensor, Tensor, Tensor)> = triplets
            .iter()
            .map(|&(a, p, n)| (descs[a].clone(), descs[b + p].clone(), descs[b + n].clone()))
            .collect();
        let l = triplet_loss(&mut tape, &trip, cfg.margin)?;
        parts.triplet = l.item();
        if want_grads {
            let g = tape.backward(&l)?;
            for (s, leaf) in seeds.iter_mut().zip(&leaves) {
                if let Some(gl) = g.get(leaf) {
                    add_in(s, gl);
                }
            }
        }
    }

    let run_pairs = cfg.relation_loss || model.cfg.triplet_after_ca;
    let mut pair_grads: Vec<ParamGrads> = Vec::new();
    if run_pairs {
        let pairs = parallel::map_range(b * b, |k| -> Result<PairWork> {
            let (a, j) = (k / b, k % b);
            let mut tape = new_tape(want_grads);
            let params = model.store.bind(&mut tape);
            let sketch_leaf = tape.track(&works[a].seq.x);
            let photo_leaf = tape.track(&works[b + j].seq.x);
            let s = TokenSequence {
                x: sketch_leaf.clone(),
                ..works[a].seq.clone()
            };
            let p = TokenSequence {
                x: photo_leaf.clone(),
                ..works[b + j].seq.clone()
            };
            let mut rng = seed::rng(batch_seed, k as u64);
            let (score, dist) = {
                let mut cx = Ctx::new(&mut tape, &params, true);
                let out = model.pair_forward(&mut cx, &s, &p, &mut rng)?;
                let dist = if model.cfg.triplet_after_ca {
                    let ds = descriptor_tensor(cx.tape, &out.sketch.x, has_ret)?;
                    let dp = descriptor_tensor(cx.tape, &out.photo.x, has_ret)?;
                    let diff = cx.tape.sub(&ds, &dp)?;
                    Some(cx.tape.norm(&diff)?)
                } else {
                    None
                };
                (out.score, dist)
            };
            Ok(PairWork {
                tape,
                params,
                sketch_leaf,
                photo_leaf,
                score,
                dist,
            })
        });
        let pairs: Vec<PairWork> = pairs.into_iter().collect::<Result<_>>()?;
        let count = (b * b) as f64;
        let mut score_seed = vec![0.0; b * b];
        if cfg.relation_loss {
            let mut sum = 0.0;
            for (k, pw) in pairs.iter().enumerate() {
                let (a, j) = (k / b, k % b);
                let y = f64::from(u8::from(s_labels[a] == p_labels[j]));
                let e = pw.score.item() - y;
                sum += e * e;
                score_seed[k] = 2.0 * e / count;
            }
            parts.relation = sum / count;
        }
        let mut dist_seed = vec![0.0; b * b];
        if has_ret && model.cfg.triplet_after_ca && !triplets.is_empty() {
            let d = |a: usize, j: usize| pairs[a * b + j].dist.as_ref().expect("dist").item();
            let t = triplets.len() as f64;
            let mut sum = 0.0;
            for &(a, p, n) in &triplets {
                let term = triplet_term(d(a, p), d(a, n), cfg.margin);
                sum += term;
                if term > 0.0 {
                    dist_seed[a * b + p] += 1.0 / t;
                    dist_seed[a * b + n] -= 1.0 / t;
                }
            }
            parts.triplet = sum / t;
        }
        if want_grads {
            let jobs: Vec<(PairWork, f64, f64)> = pairs
                .into_iter()
                .enumerate()
                .map(|(k, pw)| (pw, score_seed[k], dist_seed[k]))
                .collect();
            let results = parallel::map_owned(jobs, |(mut pw, sg, dg)| -> Result<(Vec<f64>, Vec<f64>, ParamGrads)> {
                let mut s: Vec<(&Tensor, Vec<f64>)> = vec![(&pw.score, vec![sg])];
                if let Some(d) = &pw.dist {
                    s.push((d, vec![dg]));
                }
                let g = pw.tape.backward_seeded(&s)?;
                Ok((
                    g.get_or_zeros(&pw.sketch_leaf),
                    g.get_or_zeros(&pw.photo_leaf),
                    ParamGrads::collect(&g, &pw.params),
                ))
            });
            for (k, r) in results.into_iter().enumerate() {
                let (gs, gp, pg) = r?;
                let (a, j) = (k / b, k % b);
                add_in(&mut seeds[a], &gs);
                add_in(&mut seeds[b + j], &gp);
                pair_grads.push(pg);
            }
        }
    }
    parts.total = parts.triplet + parts.relation;
    if !want_grads {
        return Ok((parts, None));
    }

    let jobs: Vec<(ImageWork, Vec<f64>)> = works.into_iter().zip(seeds).collect();
    let image_grads = parallel::map_owned(jobs, |(mut w, s)| -> Result<ParamGrads> {
        let g = w.tape.backward_seeded(&[(&w.seq.x, s)])?;
        Ok(ParamGrads::collect(&g, &w.params))
    });
    let mut total = ParamGrads::empty(&model.store);
    for g in image_grads {
        total.accumulate(&g?);
    }
    for g in &pair_grads {
        total.accumulate(g);
    }
    Ok((parts, Some(total)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub triplet: f64,
    pub relation: f64,
    pub total: f64,
}

pub fn trace_to_csv(trace: &[EpochLoss]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for e in trace {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.triplet, e.relation, e.total);
    }
    s
}

pub fn write_trace(path: &Path, trace: &[EpochLoss]) -> Result<()> {
    std::fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Fixed partition of `n` pairs into batches, drawn once from the seed.
pub fn batch_partition(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, 0xBA7C));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains `model` on aligned sketch/photo pairs with AdamW.
///
/// The batch partition, in-batch triplets and dropout masks are fixed by the
/// seed; only the order in which batches are visited is reshuffled every
/// epoch. Each epoch's logged losses are the mean over its batches.
pub fn train(
    model: &mut Model,
    pairs: &[(ImageSample, ImageSample)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<Vec<EpochLoss>> {
    if cfg.margin < 0.0 {
        return Err(Error::invalid(format!("margin {} is negative", cfg.margin)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut cats: Vec<u32> = pairs.iter().map(|p| p.0.category_id).collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.len() < 2 {
        return Err(Error::invalid(format!(
            "training needs at least 2 categories, found {}",
            cats.len()
        )));
    }
    if !model.cfg.use_ret && !cfg.relation_loss {
        return Err(Error::invalid("no active loss: the triplet term needs the retrieval token"));
    }
    let trainable = trainable(model, cfg);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        },
        &model.store,
    );
    let batches = batch_partition(pairs.len(), cfg.batch_size, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, epoch as u64));
        let mut losses = vec![LossParts::default(); batches.len()];
        for &k in &order {
            let batch = Batch::from_pairs(pairs, &batches[k]);
            let (parts, grads) = batch_step(model, &batch, cfg, seed::derive(cfg.seed, 1000 + k as u64), true)?;
            opt.step(&mut model.store, &grads.expect("requested"), &trainable)?;
            losses[k] = parts;
        }
        let nb = batches.len() as f64;
        let e = EpochLoss {
            epoch,
            triplet: losses.iter().map(|l| l.triplet).sum::<f64>() / nb,
            relation: losses.iter().map(|l| l.relation).sum::<f64>() / nb,
            total: losses.iter().map(|l| l.total).sum::<f64>() / nb,
        };
        on_epoch(&e);
        trace.push(e);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_terms() {
        assert_eq!(triplet_term(0.1, 0.5, 0.2), 0.0);
        assert!((triplet_term(0.5, 0.1, 0.2) - 0.6).abs() < 1e-15);
        assert_eq!(triplet_term(0.0, 0.3, 0.0), 0.0);
    }

    #[test]
    fn relation_loss_normalizes_by_pairs() {
        let mut tape = Tape::inference();
        let zeros: Vec<Tensor> = (0..4).map(|_| Tensor::new(vec![0.0], &[1, 1]).unwrap()).collect();
        let l = relation_loss(&mut tape, &zeros, &[1.0; 4]).unwrap();
        assert_eq!(l.item(), 1.0);
        let half = vec![Tensor::new(vec![0.5], &[1, 1]).unwrap()];
        assert_eq!(relation_loss(&mut tape, &half, &[0.0]).unwrap().item(), 0.25);
    }

    #[test]
    fn empty_triplet_batch_is_rejected() {
        let mut tape = Tape::inference();
        assert!(triplet_loss(&mut tape, &[], 0.2).is_err());
    }

    #[test]
    fn triplets_use_every_other_label_negative() {
        let t = batch_triplets(&[1, 1, 2], &[1, 1, 2]);
        assert_eq!(t, vec![(0, 0, 2), (1, 1, 2), (2, 2, 0), (2, 2, 1)]);
    }
}
