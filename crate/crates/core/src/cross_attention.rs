//! Single swapped-query attention layer between a sketch and a photo
//! sequence: sketch tokens attend over photo keys/values and the reverse,
//! with one set of projection weights.

use rand::Rng;

use crate::autodiff::ParamStore;
use crate::config::ModelConfig;
use crate::encoder::{select_tokens, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{ret_attention, Block, Ctx};

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub block: Block,
}

impl CrossAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let mlp = cfg.ca_mlp.then_some(d * cfg.mlp_ratio);
        Self {
            block: Block::new(store, rng, name, d, cfg.ca_heads, mlp, cfg.init_std, cfg.ln_eps),
        }
    }

    pub fn heads(&self) -> usize {
        self.block.attn.heads
    }

    /// Sketch rows are updated from `(Q_S, K_I, V_I)`, photo rows from
    /// `(Q_I, K_S, V_S)`; each side then gets its residual add and
    /// feed-forward block. Retrieval tokens take part like any other row.
    pub fn cross_attend(
        &self,
        cx: &mut Ctx,
        sketch: &TokenSequence,
        photo: &TokenSequence,
    ) -> Result<(TokenSequence, TokenSequence)> {
        if sketch.width() != photo.width() {
            return Err(Error::shape("cross_attend", sketch.x.shape(), photo.x.shape()));
        }
        let b = &self.block;
        let hs = b.ln1.forward(cx, &sketch.x)?;
        let hi = b.ln1.forward(cx, &photo.x)?;
        let ps = b.attn.project(cx, &hs)?;
        let pi = b.attn.project(cx, &hi)?;
        let a_s = b.attn.attend(cx, &ps.q, &pi.k, &pi.v)?;
        let a_i = b.attn.attend(cx, &pi.q, &ps.k, &ps.v)?;
        let xs = cx.tape.add(&sketch.x, &a_s)?;
        let xi = cx.tape.add(&photo.x, &a_i)?;
        let xs = b.feed_forward(cx, &xs)?;
        let xi = b.feed_forward(cx, &xi)?;
        Ok((
            TokenSequence { x: xs, ..sketch.clone() },
            TokenSequence { x: xi, ..photo.clone() },
        ))
    }

    /// Head-averaged attention of the sketch retrieval token over the photo's
    /// visual tokens, using this layer's projections.
    pub fn photo_scores(&self, cx: &mut Ctx, sketch: &TokenSequence, photo: &TokenSequence) -> Result<Vec<f64>> {
        if !sketch.has_ret || !photo.has_ret {
            return Err(Error::invalid("cross-attention selection needs retrieval tokens"));
        }
        let b = &self.block;
        let hs = b.ln1.forward(cx, &sketch.x)?;
        let hi = b.ln1.forward(cx, &photo.x)?;
        let q = b.attn.wq.forward(cx, &hs)?;
        let k = b.attn.wk.forward(cx, &hi)?;
        Ok(ret_attention(&q, &k, self.heads()))
    }

    /// Reduces the photo's alive set to the `ceil(rate · n)` tokens the
    /// sketch retrieval token attends to most.
    pub fn ca_select(
        &self,
        cx: &mut Ctx,
        sketch: &TokenSequence,
        photo: &TokenSequence,
        keep_rate: f64,
    ) -> Result<TokenSequence> {
        if keep_rate >= 1.0 {
            return Ok(photo.clone());
        }
        let scores = self.photo_scores(cx, sketch, photo)?;
        select_tokens(cx.tape, photo, &scores, keep_rate)
    }

    /// Selection followed by the cross-attention layer.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        sketch: &TokenSequence,
        photo: &TokenSequence,
        keep_rate: f64,
    ) -> Result<(TokenSequence, TokenSequence)> {
        let photo = self.ca_select(cx, sketch, photo, keep_rate)?;
        self.cross_attend(cx, sketch, &photo)
    }
}
