//! Raw numeric kernels on row-major buffers. No shape checks here; callers in
//! `tape.rs` validate shapes first.

use crate::parallel::for_each_row;

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_row(&mut c, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    });
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for_each_row(&mut c, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cj) in row.iter_mut().enumerate() {
            *cj = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for_each_row(&mut c, n, m * k * n, |p, row| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    });
    c
}

/// Four-lane dot product; fixed association order keeps results reproducible.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution over a `[c, h, w]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    /// Zero rows/columns added before the first pixel.
    pub pad_lo: usize,
    /// Zero rows/columns added after the last pixel.
    pub pad_hi: usize,
}

impl ConvGeom {
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + self.pad_lo + self.pad_hi;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

/// Unfolds the input into `[c·kh·kw, oh·ow]` columns.
pub(crate) fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let rows = d.c * d.kh * d.kw;
    let cols = d.oh * d.ow;
    let mut out = vec![0.0; rows * cols];
    for ch in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let r = (ch * d.kh + ky) * d.kw + kx;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..d.oh {
                    let iy = (oy * d.geom.stride + ky) as isize - d.geom.pad_lo as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let src = &x[(ch * d.h + iy as usize) * d.w..(ch * d.h + iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * d.geom.stride + kx) as isize - d.geom.pad_lo as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[oy * d.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
pub(crate) fn col2im(cols_grad: &[f64], d: &ConvDims) -> Vec<f64> {
    let cols = d.oh * d.ow;
    let mut gx = vec![0.0; d.c * d.h * d.w];
    for ch in 0..d.c {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let r = (ch * d.kh + ky) * d.kw + kx;
                let src = &cols_grad[r * cols..(r + 1) * cols];
                for oy in 0..d.oh {
                    let iy = (oy * d.geom.stride + ky) as isize - d.geom.pad_lo as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = (ch * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * d.geom.stride + kx) as isize - d.geom.pad_lo as isize;
                        if ix >= 0 && ix < d.w as isize {
                            gx[base + ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(c, matmul_nt(&a, &bt, 2, 3, 4));
        let at = transpose(&a, 2, 3);
        assert_eq!(c, matmul_tn(&at, &b, 3, 2, 4));
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn out_extent_halves_with_symmetric_padding() {
        let g = ConvGeom { stride: 2, pad_lo: 3, pad_hi: 3 };
        assert_eq!(g.out_extent(64, 7), Some(32));
        let g = ConvGeom { stride: 2, pad_lo: 0, pad_hi: 1 };
        assert_eq!(g.out_extent(8, 3), Some(4));
    }
}
