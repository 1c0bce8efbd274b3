//! Pre-norm self-attention stack with a retrieval token and
//! attention-driven token selection.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{ret_attention, ret_dot_products, Block, Ctx, Projected};

/// Visual tokens in raster order of their surviving patches, optionally
/// preceded by the retrieval token in row 0. Removed tokens are physically
/// absent; `origin` maps each visual row back to its patch index.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub x: Tensor,
    pub origin: Vec<usize>,
    pub n_total: usize,
    pub has_ret: bool,
}

impl TokenSequence {
    pub fn new(x: Tensor, origin: Vec<usize>, n_total: usize, has_ret: bool) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != origin.len() + usize::from(has_ret) {
            return Err(Error::shape("token_sequence", x.shape(), &[origin.len() + usize::from(has_ret)]));
        }
        if origin.iter().any(|&o| o >= n_total) || origin.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("token origins must be strictly increasing patch indices"));
        }
        Ok(Self {
            x,
            origin,
            n_total,
            has_ret,
        })
    }

    /// All `n` tokens alive, no retrieval token.
    pub fn from_tokens(tokens: Tensor) -> Result<Self> {
        let n = tokens.rows();
        Self::new(tokens, (0..n).collect(), n, false)
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }

    pub fn n_alive(&self) -> usize {
        self.origin.len()
    }

    /// Alive flag per patch position.
    pub fn alive(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_total];
        for &o in &self.origin {
            mask[o] = true;
        }
        mask
    }

    fn offset(&self) -> usize {
        usize::from(self.has_ret)
    }

    pub fn ret_values(&self) -> Option<&[f64]> {
        self.has_ret.then(|| self.x.row(0))
    }

    pub fn ret(&self, tape: &mut Tape) -> Result<Option<Tensor>> {
        if !self.has_ret {
            return Ok(None);
        }
        Ok(Some(tape.gather_rows(&self.x, &[0])?))
    }

    /// Visual rows only, `[n_alive, d]`.
    pub fn visual(&self, tape: &mut Tape) -> Result<Tensor> {
        if !self.has_ret {
            return Ok(self.x.clone());
        }
        let idx: Vec<usize> = (1..self.x.rows()).collect();
        tape.gather_rows(&self.x, &idx)
    }

    pub fn visual_row(&self, i: usize) -> &[f64] {
        self.x.row(i + self.offset())
    }

    pub fn detach(&self) -> Self {
        Self {
            x: self.x.detach(),
            ..self.clone()
        }
    }

    /// Keeps the visual rows at positions `keep` (indices into the current
    /// visual rows, ascending); the retrieval token always stays.
    pub fn keep_rows(&self, tape: &mut Tape, keep: &[usize]) -> Result<Self> {
        let off = self.offset();
        let mut idx: Vec<usize> = if self.has_ret { vec![0] } else { Vec::new() };
        idx.extend(keep.iter().map(|&k| k + off));
        Ok(Self {
            x: tape.gather_rows(&self.x, &idx)?,
            origin: keep.iter().map(|&k| self.origin[k]).collect(),
            n_total: self.n_total,
            has_ret: self.has_ret,
        })
    }
}

/// `ceil(rate · n)`, at least one token. The small slack keeps products
/// such as `0.7 · 10` from rounding up to the next integer.
pub fn keep_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

/// Indices (into `scores`) of the `k` highest scores, returned in ascending
/// index order. Equal scores prefer the lower patch `origin`.
pub fn top_k(scores: &[f64], origin: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(origin[a].cmp(&origin[b])));
    let mut kept = order[..k.min(scores.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps `ceil(keep_rate · n_alive)` visual tokens with the highest `scores`
/// (one per alive visual token). A rate of 1 returns the sequence unchanged.
pub fn select_tokens(tape: &mut Tape, seq: &TokenSequence, scores: &[f64], keep_rate: f64) -> Result<TokenSequence> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::invalid(format!("keep rate {keep_rate} outside (0, 1]")));
    }
    if scores.len() != seq.n_alive() {
        return Err(Error::shape("select_tokens", &[seq.n_alive()], &[scores.len()]));
    }
    let k = keep_count(keep_rate, seq.n_alive());
    if k == seq.n_alive() {
        return Ok(seq.clone());
    }
    let keep = top_k(scores, &seq.origin, k);
    seq.keep_rows(tape, &keep)
}

/// Values observed in one block, for attention maps.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Patch index of each column of `dots` / `scores`.
    pub origin: Vec<usize>,
    /// Raw `q_ret · k_i` per head.
    pub dots: Vec<Vec<f64>>,
    /// Head-averaged softmax attention of the retrieval token.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<Block>,
    pub ret: Option<ParamId>,
    pub heads: usize,
    pub selection_layers: Vec<usize>,
    pub embed_dim: usize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let ret = cfg
            .use_ret
            .then(|| store.add_normal(format!("{name}.ret"), &[1, d], cfg.init_std, rng));
        let blocks = (0..cfg.enc_layers)
            .map(|l| {
                Block::new(
                    store,
                    rng,
                    &format!("{name}.block{l}"),
                    d,
                    cfg.enc_heads,
                    Some(d * cfg.mlp_ratio),
                    cfg.init_std,
                    cfg.ln_eps,
                )
            })
            .collect();
        Self {
            blocks,
            ret,
            heads: cfg.enc_heads,
            selection_layers: cfg.selection_layers.clone(),
            embed_dim: d,
        }
    }

    /// Builds the input sequence: the retrieval token (plus its position, if
    /// any) followed by the `n` visual tokens.
    pub fn start(&self, cx: &mut Ctx, tokens: Tensor, ret_pos: Option<Tensor>) -> Result<TokenSequence> {
        let n = tokens.rows();
        let Some(ret) = self.ret else {
            return TokenSequence::from_tokens(tokens);
        };
        let mut r = cx.p(ret);
        if let Some(p) = ret_pos {
            r = cx.tape.add(&r, &p)?;
        }
        let x = cx.tape.concat_rows(&[&r, &tokens])?;
        TokenSequence::new(x, (0..n).collect(), n, true)
    }

    /// One block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`. Also returns the
    /// block's projections for selection scores.
    pub fn block_forward(cx: &mut Ctx, block: &Block, x: &Tensor) -> Result<(Tensor, Projected)> {
        let h = block.ln1.forward(cx, x)?;
        let p = block.attn.project(cx, &h)?;
        let a = block.attn.attend(cx, &p.q, &p.k, &p.v)?;
        let x = cx.tape.add(x, &a)?;
        let x = block.feed_forward(cx, &x)?;
        Ok((x, p))
    }

    pub fn encode(&self, cx: &mut Ctx, seq: &TokenSequence, keep_rate: f64) -> Result<TokenSequence> {
        self.encode_traced(cx, seq, keep_rate, None)
    }

    /// Runs every block; after each configured selection layer, keeps the
    /// visual tokens the retrieval token attends to most.
    pub fn encode_traced(
        &self,
        cx: &mut Ctx,
        seq: &TokenSequence,
        keep_rate: f64,
        mut trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<TokenSequence> {
        if seq.width() != self.embed_dim {
            return Err(Error::shape("encode", seq.x.shape(), &[seq.x.rows(), self.embed_dim]));
        }
        let mut seq = seq.clone();
        for (l, block) in self.blocks.iter().enumerate() {
            let (x, p) = Self::block_forward(cx, block, &seq.x)?;
            seq.x = x;
            let wants_scores = seq.has_ret && (trace.is_some() || keep_rate < 1.0);
            if !wants_scores {
                continue;
            }
            let scores = ret_attention(&p.q, &p.k, self.heads);
            if let Some(t) = trace.as_deref_mut() {
                t.push(LayerTrace {
                    origin: seq.origin.clone(),
                    dots: ret_dot_products(&p.q, &p.k, self.heads),
                    scores: scores.clone(),
                });
            }
            if keep_rate < 1.0 && self.selection_layers.contains(&(l + 1)) {
                seq = select_tokens(cx.tape, &seq, &scores, keep_rate)?;
            }
        }
        Ok(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_count_is_ceil() {
        assert_eq!(keep_count(0.7, 10), 7);
        assert_eq!(keep_count(0.7, 16), 12);
        assert_eq!(keep_count(1.0, 16), 16);
        assert_eq!(keep_count(0.01, 3), 1);
        assert_eq!(keep_count(0.5, 1), 1);
    }

    #[test]
    fn top_k_prefers_lower_patch_on_ties() {
        let scores = [0.2, 0.5, 0.2, 0.5, 0.1];
        let origin = [0, 3, 5, 7, 9];
        assert_eq!(top_k(&scores, &origin, 3), vec![0, 1, 3]);
        assert_eq!(top_k(&scores, &origin, 1), vec![1]);
    }

    #[test]
    fn select_keeps_ret_and_raster_order() {
        let mut tape = Tape::inference();
        let x = Tensor::new((0..10).map(f64::from).collect(), &[5, 2]).unwrap();
        let seq = TokenSequence::new(x, vec![0, 1, 2, 3], 4, true).unwrap();
        let out = select_tokens(&mut tape, &seq, &[0.1, 0.4, 0.3, 0.2], 0.5).unwrap();
        assert_eq!(out.origin, vec![1, 2]);
        assert_eq!(out.x.data(), &[0.0, 1.0, 4.0, 5.0, 6.0, 7.0]);
        assert_eq!(out.alive(), vec![false, true, true, false]);
        assert!(select_tokens(&mut tape, &seq, &[0.1; 4], 0.0).is_err());
    }
}
