//! Token-pair kernel matrix and the relation network that maps it to a match
//! probability.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor};
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};

pub const KERNEL_HEADER: &str = "# sbir-kernel v1";

/// `n × n` sketch-by-photo similarities at original patch positions; rows and
/// columns of removed tokens are zero. Flattened row-major, sketch index
/// major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub row_alive: Vec<bool>,
    pub col_alive: Vec<bool>,
}

impl KernelMatrix {
    pub fn from_tensor(m: &Tensor, sketch: &TokenSequence, photo: &TokenSequence) -> Result<Self> {
        let n = sketch.n_total;
        if m.shape() != [n, n] || photo.n_total != n {
            return Err(Error::shape("kernel_matrix", m.shape(), &[n, photo.n_total]));
        }
        Ok(Self {
            n,
            values: m.to_vec(),
            row_alive: sketch.alive(),
            col_alive: photo.alive(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn is_alive(&self, i: usize, j: usize) -> bool {
        self.row_alive[i] && self.col_alive[j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.values.clone(), &[self.n, self.n]).expect("n×n by construction")
    }

    /// Header, then `n`, then the two alive masks as 0/1 strings, then one
    /// line of `n` space-separated values per sketch token.
    pub fn to_text(&self) -> String {
        let mask = |m: &[bool]| m.iter().map(|&a| if a { '1' } else { '0' }).collect::<String>();
        let mut s = format!("{KERNEL_HEADER}\n{}\n{}\n{}\n", self.n, mask(&self.row_alive), mask(&self.col_alive));
        for i in 0..self.n {
            let line: Vec<String> = self.row(i).iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::parse("kernel matrix", m.to_string());
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(KERNEL_HEADER) {
            return Err(bad("missing header"));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("bad size line"))?;
        let mut mask = || -> Result<Vec<bool>> {
            let l = lines.next().ok_or_else(|| bad("missing mask"))?.trim();
            if l.len() != n {
                return Err(bad("mask length"));
            }
            Ok(l.chars().map(|c| c == '1').collect())
        };
        let (row_alive, col_alive) = (mask()?, mask()?);
        let mut values = Vec::with_capacity(n * n);
        for l in lines.take(n) {
            for v in l.split_whitespace() {
                values.push(v.parse::<f64>().map_err(|e| bad(&e.to_string()))?);
            }
        }
        if values.len() != n * n {
            return Err(bad("wrong number of values"));
        }
        Ok(Self {
            n,
            values,
            row_alive,
            col_alive,
        })
    }
}

/// Cosine similarity of every alive sketch/photo visual token pair, placed
/// at `(origin_s, origin_i)` of an `n × n` zero matrix. Zero-norm tokens give
/// zero entries.
pub fn cosine_kernel(tape: &mut Tape, sketch: &TokenSequence, photo: &TokenSequence) -> Result<Tensor> {
    if sketch.width() != photo.width() || sketch.n_total != photo.n_total {
        return Err(Error::shape("cosine_kernel", sketch.x.shape(), photo.x.shape()));
    }
    let s = sketch.visual(tape)?;
    let p = photo.visual(tape)?;
    let s = tape.row_normalize(&s)?;
    let p = tape.row_normalize(&p)?;
    let m = tape.matmul_nt(&s, &p)?;
    // Rounding can push a unit-vector dot product a few ulps past 1.
    let m = tape.clamp(&m, -1.0, 1.0)?;
    let n = sketch.n_total;
    tape.scatter_grid(&m, &sketch.origin, &photo.origin, n, n)
}

/// Learned pair metric used when the cosine kernel is switched off:
/// `M_ij = w·relu(U x_i + V y_j + c) + b`.
#[derive(Clone, Debug)]
pub struct ConcatMetric {
    pub u: Linear,
    pub v: ParamId,
    pub out: Linear,
}

impl ConcatMetric {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, std: f64) -> Self {
        Self {
            u: Linear::new(store, rng, &format!("{name}.u"), d, d, std),
            v: store.add_normal(format!("{name}.v"), &[d, d], std, rng),
            out: Linear::new(store, rng, &format!("{name}.out"), d, 1, std),
        }
    }

    pub fn kernel(&self, cx: &mut Ctx, sketch: &TokenSequence, photo: &TokenSequence) -> Result<Tensor> {
        if sketch.width() != photo.width() || sketch.n_total != photo.n_total {
            return Err(Error::shape("concat_kernel", sketch.x.shape(), photo.x.shape()));
        }
        let s = sketch.visual(cx.tape)?;
        let p = photo.visual(cx.tape)?;
        let a = self.u.forward(cx, &s)?;
        let v = cx.p(self.v);
        let b = cx.tape.matmul(&p, &v)?;
        let h = cx.tape.pairwise_add(&a, &b)?;
        let h = cx.tape.relu(&h)?;
        let z = self.out.forward(cx, &h)?;
        let z = cx.tape.reshape(&z, &[sketch.n_alive(), photo.n_alive()])?;
        let n = sketch.n_total;
        cx.tape.scatter_grid(&z, &sketch.origin, &photo.origin, n, n)
    }
}

/// `sigmoid(fc2(dropout(relu(fc1(flatten(M))))))`.
#[derive(Clone, Debug)]
pub struct RelationNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
    pub n: usize,
}

impl RelationNet {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, n: usize, hidden: usize, dropout: f64, std: f64) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), n * n, hidden, std),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, 1, std),
            dropout,
            n,
        }
    }

    /// Pre-sigmoid output, `[1, 1]`.
    pub fn logit<R: Rng>(&self, cx: &mut Ctx, m: &Tensor, rng: &mut R) -> Result<Tensor> {
        if m.numel() != self.fc1.d_in {
            return Err(Error::shape("relation_score", m.shape(), &[self.n, self.n]));
        }
        let flat = cx.tape.reshape(m, &[1, m.numel()])?;
        let h = self.fc1.forward(cx, &flat)?;
        let h = cx.tape.relu(&h)?;
        let train = cx.train;
        let h = cx.tape.dropout(&h, self.dropout, train, rng)?;
        self.fc2.forward(cx, &h)
    }

    /// Match probability in `(0, 1)`, `[1, 1]`.
    pub fn score<R: Rng>(&self, cx: &mut Ctx, m: &Tensor, rng: &mut R) -> Result<Tensor> {
        let z = self.logit(cx, m, rng)?;
        cx.tape.sigmoid(&z)
    }

    /// Evaluation-mode score read directly from stored weights.
    pub fn score_values(&self, store: &ParamStore, m: &[f64]) -> Result<f64> {
        if m.len() != self.fc1.d_in {
            return Err(Error::shape("relation_score", &[m.len()], &[self.n, self.n]));
        }
        let pre = self.hidden_pre(store, m);
        Ok(self.finish(store, &pre))
    }

    /// `fc1(flatten(M))` before the ReLU.
    pub fn hidden_pre(&self, store: &ParamStore, m: &[f64]) -> Vec<f64> {
        let (w, b) = (store.value(self.fc1.w), store.value(self.fc1.b));
        let h = self.fc1.d_out;
        let mut pre = b.to_vec();
        for (i, &x) in m.iter().enumerate() {
            if x != 0.0 {
                for (p, wv) in pre.iter_mut().zip(&w[i * h..(i + 1) * h]) {
                    *p += x * wv;
                }
            }
        }
        pre
    }

    /// `sigmoid(fc2(relu(pre)))`.
    pub fn finish(&self, store: &ParamStore, pre: &[f64]) -> f64 {
        let (w, b) = (store.value(self.fc2.w), store.value(self.fc2.b));
        let z = pre.iter().zip(w).map(|(p, wv)| p.max(0.0) * wv).sum::<f64>() + b[0];
        crate::autodiff::sigmoid(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: &[[f64; 2]], origin: Vec<usize>, n: usize) -> TokenSequence {
        let mut data = vec![0.0, 0.0];
        for r in rows {
            data.extend_from_slice(r);
        }
        let x = Tensor::new(data, &[rows.len() + 1, 2]).unwrap();
        TokenSequence::new(x, origin, n, true).unwrap()
    }

    #[test]
    fn orthogonal_and_identical_tokens() {
        let mut tape = Tape::inference();
        let a = seq(&[[1.0, 0.0], [0.0, 1.0]], vec![0, 1], 2);
        let m = cosine_kernel(&mut tape, &a, &a).unwrap();
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn removed_tokens_leave_zero_rows_and_columns() {
        let mut tape = Tape::inference();
        let s = seq(&[[1.0, 2.0]], vec![1], 3);
        let p = seq(&[[3.0, 1.0], [0.0, 0.0]], vec![0, 2], 3);
        let m = cosine_kernel(&mut tape, &s, &p).unwrap();
        let k = KernelMatrix::from_tensor(&m, &s, &p).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if !(i == 1 && j == 0) {
                    assert_eq!(k.get(i, j), 0.0, "({i},{j})");
                }
            }
        }
        assert!(k.get(1, 0) > 0.0);
        assert_eq!(KernelMatrix::from_text(&k.to_text()).unwrap(), k);
    }
}
