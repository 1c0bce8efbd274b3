//! The full matching network: per-modality tokenizer and encoder (shared by
//! default), the cross-attention layer, the kernel and the relation network.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{checkpoint, ParamId, ParamStore, Tape, Tensor};
use crate::config::{Distance, KernelKind, ModelConfig};
use crate::cross_attention::CrossAttention;
use crate::encoder::{Encoder, LayerTrace, TokenSequence};
use crate::error::{Error, Result};
use crate::image::{ImageSample, Modality};
use crate::nn::Ctx;
use crate::relation::{cosine_kernel, ConcatMetric, KernelMatrix, RelationNet};
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug)]
pub struct Branch {
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
}

impl Branch {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        Self {
            tokenizer: Tokenizer::new(store, rng, &format!("{name}.tok"), cfg),
            encoder: Encoder::new(store, rng, &format!("{name}.enc"), cfg),
        }
    }
}

/// Parameter groups, by registration prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Branch,
    Cross,
    Metric,
    Relation,
}

/// Outputs of the pair head for one sketch/photo pair.
pub struct PairForward {
    pub sketch: TokenSequence,
    pub photo: TokenSequence,
    pub kernel: Tensor,
    pub score: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub sketch: Branch,
    /// Same parameter ids as `sketch` when branches are shared.
    pub photo: Branch,
    pub cross: Option<CrossAttention>,
    pub metric: Option<ConcatMetric>,
    pub relation: RelationNet,
}

impl Model {
    /// Randomly initialized model; the same seed gives identical weights.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (sketch, photo) = if cfg.share_branches {
            let b = Branch::new(&mut store, &mut rng, "branch", cfg);
            (b.clone(), b)
        } else {
            let s = Branch::new(&mut store, &mut rng, "sketch", cfg);
            let p = Branch::new(&mut store, &mut rng, "photo", cfg);
            (s, p)
        };
        let cross = cfg
            .cross_attention
            .then(|| CrossAttention::new(&mut store, &mut rng, "cross", cfg));
        let metric = (cfg.kernel == KernelKind::Concat)
            .then(|| ConcatMetric::new(&mut store, &mut rng, "metric", cfg.embed_dim, cfg.init_std));
        let n = cfg.num_tokens();
        let relation = RelationNet::new(
            &mut store,
            &mut rng,
            "relation",
            n,
            cfg.rn_hidden_width(),
            cfg.rn_dropout,
            cfg.init_std,
        );
        Ok(Self {
            cfg: cfg.clone(),
            store,
            sketch,
            photo,
            cross,
            metric,
            relation,
        })
    }

    pub fn load(cfg: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        checkpoint::restore(&mut model.store, checkpoint::load(path)?)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store)
    }

    pub fn branch(&self, m: Modality) -> &Branch {
        match m {
            Modality::Sketch => &self.sketch,
            Modality::Photo => &self.photo,
        }
    }

    pub fn keep_rate(&self, m: Modality) -> f64 {
        match m {
            Modality::Sketch => self.cfg.keep_rate_sketch,
            Modality::Photo => self.cfg.keep_rate_photo,
        }
    }

    pub fn group(&self, id: ParamId) -> Group {
        let name = &self.store.get(id).name;
        if name.starts_with("cross.") {
            Group::Cross
        } else if name.starts_with("metric.") {
            Group::Metric
        } else if name.starts_with("relation.") {
            Group::Relation
        } else {
            Group::Branch
        }
    }

    /// Scalar count of parameters in one group.
    pub fn group_size(&self, g: Group) -> usize {
        self.store
            .iter()
            .filter(|(id, _)| self.group(*id) == g)
            .map(|(_, p)| p.value().len())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Tokens of `img` with the retrieval token prepended, before any block.
    pub fn initial_sequence(&self, cx: &mut Ctx, img: &ImageSample) -> Result<TokenSequence> {
        let b = self.branch(img.modality);
        let tokens = b.tokenizer.tokenize(cx, img)?;
        let ret_pos = b.tokenizer.ret_position(cx)?;
        b.encoder.start(cx, tokens, ret_pos)
    }

    pub fn encode_image(&self, cx: &mut Ctx, img: &ImageSample) -> Result<TokenSequence> {
        self.encode_image_traced(cx, img, None)
    }

    pub fn encode_image_traced(
        &self,
        cx: &mut Ctx,
        img: &ImageSample,
        trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<TokenSequence> {
        let seq = self.initial_sequence(cx, img)?;
        let b = self.branch(img.modality);
        b.encoder.encode_traced(cx, &seq, self.keep_rate(img.modality), trace)
    }

    pub fn kernel(&self, cx: &mut Ctx, sketch: &TokenSequence, photo: &TokenSequence) -> Result<Tensor> {
        match &self.metric {
            Some(m) => m.kernel(cx, sketch, photo),
            None => cosine_kernel(cx.tape, sketch, photo),
        }
    }

    /// Cross-attention (when enabled), kernel and relation score.
    pub fn pair_forward<R: Rng>(
        &self,
        cx: &mut Ctx,
        sketch: &TokenSequence,
        photo: &TokenSequence,
        rng: &mut R,
    ) -> Result<PairForward> {
        let (s, p) = match &self.cross {
            Some(ca) => ca.forward(cx, sketch, photo, self.cfg.keep_rate_ca)?,
            None => (sketch.clone(), photo.clone()),
        };
        let kernel = self.kernel(cx, &s, &p)?;
        let score = self.relation.score(cx, &kernel, rng)?;
        Ok(PairForward {
            sketch: s,
            photo: p,
            kernel,
            score,
        })
    }

    /// Evaluation-mode encoding with frozen weights.
    pub fn embed(&self, img: &ImageSample) -> Result<TokenSequence> {
        let mut tape = Tape::inference();
        let params = self.store.bind(&mut tape);
        let mut cx = Ctx::new(&mut tape, &params, false);
        self.encode_image(&mut cx, img)
    }

    /// Evaluation-mode pair head on two embeddings.
    pub fn pair_eval(&self, sketch: &TokenSequence, photo: &TokenSequence) -> Result<(f64, KernelMatrix)> {
        let mut tape = Tape::inference();
        let params = self.store.bind(&mut tape);
        let mut cx = Ctx::new(&mut tape, &params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.pair_forward(&mut cx, sketch, photo, &mut rng)?;
        let k = KernelMatrix::from_tensor(&out.kernel, &out.sketch, &out.photo)?;
        Ok((out.score.item(), k))
    }

    pub fn relation_score(&self, sketch: &TokenSequence, photo: &TokenSequence) -> Result<f64> {
        Ok(self.pair_eval(sketch, photo)?.0)
    }

    /// Relation score of an explicit kernel matrix (evaluation mode).
    pub fn score_kernel(&self, m: &KernelMatrix) -> Result<f64> {
        self.relation.score_values(&self.store, &m.values)
    }
}

/// Global descriptor of an encoded sequence: the retrieval token, or the
/// mean visual token when the model has none.
pub fn descriptor(seq: &TokenSequence) -> Vec<f64> {
    if let Some(r) = seq.ret_values() {
        return r.to_vec();
    }
    let d = seq.width();
    let mut out = vec![0.0; d];
    for i in 0..seq.n_alive() {
        for (o, v) in out.iter_mut().zip(seq.visual_row(i)) {
            *o += v;
        }
    }
    let n = seq.n_alive().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Graph-level [`descriptor`] over the rows of `x` (`[rows, d]`).
pub fn descriptor_tensor(tape: &mut Tape, x: &Tensor, has_ret: bool) -> Result<Tensor> {
    if has_ret {
        return tape.gather_rows(x, &[0]);
    }
    let n = x.rows();
    let ones = Tensor::new(vec![1.0 / n as f64; n], &[1, n])?;
    tape.matmul(&ones, x)
}

pub fn distance(a: &[f64], b: &[f64], kind: Distance) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("distance", &[a.len()], &[b.len()]));
    }
    Ok(match kind {
        Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Distance::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            embed_dim: 16,
            enc_layers: 2,
            enc_heads: 2,
            ca_heads: 2,
            selection_layers: vec![1],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shared_branches_reuse_parameters() {
        let shared = Model::new(&tiny(), 1).unwrap();
        let split = Model::new(
            &ModelConfig {
                share_branches: false,
                ..tiny()
            },
            1,
        )
        .unwrap();
        let branch = shared.group_size(Group::Branch);
        assert_eq!(split.group_size(Group::Branch), 2 * branch);
        assert_eq!(shared.sketch.encoder.ret, shared.photo.encoder.ret);
    }

    #[test]
    fn pair_eval_is_deterministic_and_in_range() {
        let m = Model::new(&tiny(), 3).unwrap();
        let s = m.embed(&ImageSample::filled(3, 32, 0.9, Modality::Sketch)).unwrap();
        let p = m.embed(&ImageSample::filled(3, 32, 0.2, Modality::Photo)).unwrap();
        let r1 = m.relation_score(&s, &p).unwrap();
        let r2 = m.relation_score(&s, &p).unwrap();
        assert_eq!(r1.to_bits(), r2.to_bits());
        assert!(r1 > 0.0 && r1 < 1.0);
    }

    #[test]
    fn cosine_distance_of_parallel_vectors_is_zero() {
        assert!(distance(&[1.0, 2.0], &[2.0, 4.0], Distance::Cosine).unwrap().abs() < 1e-15);
        assert_eq!(distance(&[0.0, 3.0], &[4.0, 0.0], Distance::Euclidean).unwrap(), 5.0);
    }
}
