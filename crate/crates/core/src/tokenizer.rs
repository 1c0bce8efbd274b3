//! Image to visual tokens: a stride-2 convolution stack plus a residual
//! linear patch embedding, then learned absolute positions.

use rand::Rng;

use crate::autodiff::{ConvGeom, ParamId, ParamStore, Tensor};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::nn::{Ctx, Linear};

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub convs: Vec<ConvLayer>,
    pub patch: Linear,
    /// `[n + 1, d]` with the retrieval slot in row 0, or `[n, d]` without a
    /// retrieval token.
    pub pos: Option<ParamId>,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub has_ret: bool,
    pub standardize: bool,
}

/// Padding for layer `i` of `count`. Kernels are odd; every layer but the
/// last pads `k/2` on both sides. The last pads one fewer before, which both
/// halves the extent and centres token `j`'s receptive field on patch `j`.
fn conv_geom(i: usize, count: usize, k: usize) -> ConvGeom {
    let half = k / 2;
    if i + 1 == count && half > 0 {
        ConvGeom {
            stride: 2,
            pad_lo: half - 1,
            pad_hi: half,
        }
    } else {
        ConvGeom {
            stride: 2,
            pad_lo: half,
            pad_hi: half,
        }
    }
}

impl Tokenizer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let mut convs = Vec::new();
        if cfg.learnable_tokenizer {
            let count = cfg.conv_kernels.len();
            let mut c_in = cfg.channels;
            for (i, &k) in cfg.conv_kernels.iter().enumerate() {
                let c_out = d >> (count - 1 - i);
                let fan_in = (c_in * k * k) as f64;
                let w = store.add_normal(
                    format!("{name}.conv{i}.w"),
                    &[c_out, c_in, k, k],
                    (2.0 / fan_in).sqrt(),
                    rng,
                );
                let b = store.add_zeros(format!("{name}.conv{i}.b"), &[c_out]);
                convs.push(ConvLayer {
                    w,
                    b,
                    geom: conv_geom(i, count, k),
                });
                c_in = c_out;
            }
        }
        let p = cfg.patch_size;
        let patch = Linear::new(store, rng, &format!("{name}.patch"), cfg.channels * p * p, d, cfg.init_std);
        let rows = cfg.num_tokens() + usize::from(cfg.use_ret);
        let pos = cfg
            .pos_embed
            .then(|| store.add_normal(format!("{name}.pos"), &[rows, d], cfg.init_std, rng));
        Self {
            convs,
            patch,
            pos,
            image_size: cfg.image_size,
            channels: cfg.channels,
            patch_size: cfg.patch_size,
            embed_dim: d,
            has_ret: cfg.use_ret,
            standardize: cfg.standardize_input,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn check(&self, img: &ImageSample) -> Result<()> {
        let p = self.patch_size;
        if !img.height.is_multiple_of(p) || !img.width.is_multiple_of(p) {
            return Err(Error::invalid(format!(
                "image {}x{} is not a multiple of the {p}-pixel patch",
                img.height, img.width
            )));
        }
        if img.height != self.image_size || img.width != self.image_size || img.channels != self.channels {
            return Err(Error::invalid(format!(
                "image {}x{}x{} does not match the configured {s}x{s}x{}",
                img.height,
                img.width,
                img.channels,
                self.channels,
                s = self.image_size
            )));
        }
        Ok(())
    }

    fn input(&self, img: &ImageSample) -> Tensor {
        if self.standardize {
            img.standardized_tensor()
        } else {
            img.to_tensor()
        }
    }

    /// `[n, d]`: row `i` is the linear projection of patch `i`.
    pub fn vanilla_patch_embed(&self, cx: &mut Ctx, img: &ImageSample) -> Result<Tensor> {
        self.check(img)?;
        let patches = cx.tape.patchify(&self.input(img), self.patch_size)?;
        self.patch.forward(cx, &patches)
    }

    /// `[n, d]`: the conv+relu stack's final map flattened in raster order.
    pub fn conv_tokenize(&self, cx: &mut Ctx, img: &ImageSample) -> Result<Tensor> {
        self.check(img)?;
        if self.convs.is_empty() {
            return Err(Error::invalid("tokenizer has no convolution stack"));
        }
        let mut x = self.input(img);
        for layer in &self.convs {
            let (w, b) = (cx.p(layer.w), cx.p(layer.b));
            x = cx.tape.conv2d(&x, &w, &b, layer.geom)?;
            x = cx.tape.relu(&x)?;
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let flat = cx.tape.reshape(&x, &[c, h * w])?;
        cx.tape.transpose(&flat)
    }

    /// Positions for the visual tokens (`n` rows).
    pub fn token_positions(&self, cx: &mut Ctx) -> Result<Option<Tensor>> {
        let Some(pos) = self.pos else { return Ok(None) };
        let pos = cx.p(pos);
        if !self.has_ret {
            return Ok(Some(pos));
        }
        let idx: Vec<usize> = (1..=self.num_tokens()).collect();
        Ok(Some(cx.tape.gather_rows(&pos, &idx)?))
    }

    /// Position of the retrieval slot, `[1, d]`.
    pub fn ret_position(&self, cx: &mut Ctx) -> Result<Option<Tensor>> {
        match (self.pos, self.has_ret) {
            (Some(pos), true) => {
                let pos = cx.p(pos);
                Ok(Some(cx.tape.gather_rows(&pos, &[0])?))
            }
            _ => Ok(None),
        }
    }

    /// `conv_tokenize + vanilla_patch_embed + positions`, `[n, d]`.
    pub fn tokenize(&self, cx: &mut Ctx, img: &ImageSample) -> Result<Tensor> {
        let mut x = self.vanilla_patch_embed(cx, img)?;
        if !self.convs.is_empty() {
            let conv = self.conv_tokenize(cx, img)?;
            x = cx.tape.add(&conv, &x)?;
        }
        if let Some(pos) = self.token_positions(cx)? {
            x = cx.tape.add(&x, &pos)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::image::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &ModelConfig) -> (ParamStore, Tokenizer) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tok = Tokenizer::new(&mut store, &mut rng, "tok", cfg);
        (store, tok)
    }

    #[test]
    fn desk_scale_gives_sixteen_tokens() {
        let cfg = ModelConfig::default();
        let (store, tok) = build(&cfg);
        let mut tape = Tape::inference();
        let params = store.bind(&mut tape);
        let mut cx = Ctx::new(&mut tape, &params, false);
        let img = ImageSample::filled(3, 64, 0.3, Modality::Sketch);
        assert_eq!(tok.conv_tokenize(&mut cx, &img).unwrap().shape(), &[16, 64]);
        assert_eq!(tok.vanilla_patch_embed(&mut cx, &img).unwrap().shape(), &[16, 64]);
        assert_eq!(tok.tokenize(&mut cx, &img).unwrap().shape(), &[16, 64]);
    }

    #[test]
    fn non_multiple_sizes_are_rejected() {
        let (store, tok) = build(&ModelConfig::default());
        let mut tape = Tape::inference();
        let params = store.bind(&mut tape);
        let mut cx = Ctx::new(&mut tape, &params, false);
        let img = ImageSample::filled(3, 60, 0.0, Modality::Photo);
        let err = tok.tokenize(&mut cx, &img).unwrap_err().to_string();
        assert!(err.contains("multiple"), "{err}");
    }

    #[test]
    fn last_layer_padding_is_shifted() {
        assert_eq!(conv_geom(3, 4, 3), ConvGeom { stride: 2, pad_lo: 0, pad_hi: 1 });
        assert_eq!(conv_geom(0, 4, 7), ConvGeom { stride: 2, pad_lo: 3, pad_hi: 3 });
        for k in [3, 5, 7] {
            for i in 0..4 {
                assert_eq!(conv_geom(i, 4, k).out_extent(64, k), Some(32));
            }
        }
    }
}
