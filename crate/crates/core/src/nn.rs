//! Layers shared by the encoder, the cross-attention layer and the relation
//! network. Parameters live in a [`ParamStore`]; layers only hold ids.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::error::Result;

/// Forward-pass context: the tape plus the store's parameters bound to it.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a [Tensor],
    pub train: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a [Tensor], train: bool) -> Self {
        Self { tape, params, train }
    }

    pub fn p(&self, id: ParamId) -> Tensor {
        self.params[id.index()].clone()
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize, std: f64) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[d_in, d_out], std, rng);
        let b = store.add_zeros(format!("{name}.b"), &[d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        cx.tape.affine(x, &w, &b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[d]),
            beta: store.add_zeros(format!("{name}.beta"), &[d]),
            eps,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        cx.tape.layer_norm(x, &g, &b, self.eps)
    }
}

/// Two affine layers with a ReLU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, hidden: usize, std: f64) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden, std),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d, std),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.relu(&h)?;
        self.fc2.forward(cx, &h)
    }
}

/// Query/key/value projections of one set of tokens.
pub struct Projected {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize, std: f64) -> Self {
        Self {
            wq: Linear::new(store, rng, &format!("{name}.wq"), d, d, std),
            wk: Linear::new(store, rng, &format!("{name}.wk"), d, d, std),
            wv: Linear::new(store, rng, &format!("{name}.wv"), d, d, std),
            wo: Linear::new(store, rng, &format!("{name}.wo"), d, d, std),
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.wq.d_out / self.heads
    }

    pub fn project(&self, cx: &mut Ctx, h: &Tensor) -> Result<Projected> {
        Ok(Projected {
            q: self.wq.forward(cx, h)?,
            k: self.wk.forward(cx, h)?,
            v: self.wv.forward(cx, h)?,
        })
    }

    /// `softmax(Q Kᵀ/√d_h) V` per head, heads concatenated, then the output
    /// projection. Queries and keys/values may come from different sequences.
    pub fn attend(&self, cx: &mut Ctx, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = cx.tape.slice_cols(q, lo, hi)?;
            let kh = cx.tape.slice_cols(k, lo, hi)?;
            let vh = cx.tape.slice_cols(v, lo, hi)?;
            let logits = cx.tape.matmul_nt(&qh, &kh)?;
            let logits = cx.tape.scale(&logits, scale)?;
            let att = cx.tape.softmax_rows(&logits)?;
            outs.push(cx.tape.matmul(&att, &vh)?);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let joined = if refs.len() == 1 {
            outs[0].clone()
        } else {
            cx.tape.concat_cols(&refs)?
        };
        self.wo.forward(cx, &joined)
    }
}

/// Head-averaged attention of row 0 of `q` over rows `1..` of `k`, computed
/// on values only: `mean_h softmax_i(q₀ʰ·kᵢʰ/√d_h)`.
pub fn ret_attention(q: &Tensor, k: &Tensor, heads: usize) -> Vec<f64> {
    let per_head = ret_dot_products(q, k, heads);
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = k.rows() - 1;
    let mut avg = vec![0.0; n];
    for dots in per_head {
        let mut row: Vec<f64> = dots.iter().map(|d| d * scale).collect();
        crate::autodiff::softmax_in_place(&mut row);
        for (a, r) in avg.iter_mut().zip(row) {
            *a += r;
        }
    }
    for a in &mut avg {
        *a /= heads as f64;
    }
    avg
}

/// Raw per-head products `q₀ʰ·kᵢʰ` for `i ≥ 1`.
pub fn ret_dot_products(q: &Tensor, k: &Tensor, heads: usize) -> Vec<Vec<f64>> {
    let dh = q.cols() / heads;
    let q0 = q.row(0);
    (0..heads)
        .map(|h| {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            (1..k.rows())
                .map(|i| crate::autodiff::dot(&q0[lo..hi], &k.row(i)[lo..hi]))
                .collect()
        })
        .collect()
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Option<Mlp>,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        mlp_hidden: Option<usize>,
        std: f64,
        eps: f64,
    ) -> Self {
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d, eps);
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads, std);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d, eps);
        let mlp = mlp_hidden.map(|h| Mlp::new(store, rng, &format!("{name}.mlp"), d, h, std));
        Self { ln1, attn, ln2, mlp }
    }

    /// Feed-forward half of the block.
    pub fn feed_forward(&self, cx: &mut Ctx, x: &Tensor) -> Result<Tensor> {
        match &self.mlp {
            None => Ok(x.clone()),
            Some(mlp) => {
                let h = self.ln2.forward(cx, x)?;
                let h = mlp.forward(cx, &h)?;
                cx.tape.add(x, &h)
            }
        }
    }
}
