use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Sketch,
    Photo,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Sketch => "sketch",
            Modality::Photo => "photo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Modality::Sketch),
            "photo" => Ok(Modality::Photo),
            _ => Err(Error::parse("modality", format!("`{s}`"))),
        }
    }
}

/// One image with its labels. Pixels are stored channel-major
/// (`[c, h, w]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub modality: Modality,
    pub category_id: u32,
    pub instance_id: u32,
}

impl ImageSample {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
        modality: Modality,
        category_id: u32,
        instance_id: u32,
    ) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::shape("image", &[channels, height, width], &[pixels.len()]));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            modality,
            category_id,
            instance_id,
        })
    }

    /// A constant image of one value.
    pub fn filled(channels: usize, size: usize, value: f64, modality: Modality) -> Self {
        Self {
            channels,
            height: size,
            width: size,
            pixels: vec![value; channels * size * size],
            modality,
            category_id: 0,
            instance_id: 0,
        }
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn pixel_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.pixels[(c * self.height + y) * self.width + x]
    }

    /// Untracked `[c, h, w]` tensor of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.pixels.clone(), &[self.channels, self.height, self.width]).expect("consistent by construction")
    }

    /// Each channel shifted and scaled to zero mean and unit deviation; a
    /// constant channel maps to zeros.
    pub fn standardized_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut px = Vec::with_capacity(self.pixels.len());
        for ch in self.pixels.chunks(plane) {
            let n = plane as f64;
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
            px.extend(ch.iter().map(|v| (v - mean) * inv));
        }
        Tensor::new(px, &[self.channels, self.height, self.width]).expect("consistent by construction")
    }

    /// Copies the `p×p` patch at grid cell `index` (raster order) as
    /// `[c][y][x]` values.
    pub fn patch(&self, index: usize, p: usize) -> Vec<f64> {
        let gw = self.width / p;
        let (py, px) = (index / gw * p, index % gw * p);
        let mut out = Vec::with_capacity(self.channels * p * p);
        for c in 0..self.channels {
            for y in 0..p {
                let start = (c * self.height + py + y) * self.width + px;
                out.extend_from_slice(&self.pixels[start..start + p]);
            }
        }
        out
    }

    /// Writes a patch produced by [`ImageSample::patch`] back into grid cell
    /// `index`.
    pub fn set_patch(&mut self, index: usize, p: usize, values: &[f64]) {
        let gw = self.width / p;
        let (py, px) = (index / gw * p, index % gw * p);
        let mut it = values.iter();
        for c in 0..self.channels {
            for y in 0..p {
                let start = (c * self.height + py + y) * self.width + px;
                for v in &mut self.pixels[start..start + p] {
                    *v = *it.next().expect("patch length");
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_roundtrip() {
        let mut img = ImageSample::filled(3, 32, 0.0, Modality::Photo);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = i as f64;
        }
        let p = img.patch(3, 16);
        assert_eq!(p.len(), 3 * 256);
        assert_eq!(p[0], img.pixel(0, 16, 16));
        let mut copy = ImageSample::filled(3, 32, 0.0, Modality::Photo);
        copy.set_patch(3, 16, &p);
        assert_eq!(copy.patch(3, 16), p);
        assert_eq!(copy.pixel(2, 31, 31), img.pixel(2, 31, 31));
        assert_eq!(copy.pixel(0, 0, 0), 0.0);
    }
}
