//! Parametric shape families and their rasterization as sketches (stroked
//! outline on white) and photos (textured fill on a shaded background).

use std::f64::consts::PI;

use rand::Rng;

use crate::image::{ImageSample, Modality};
use crate::seed;

/// Implicit shape in unit coordinates (`x` right, `y` down, extent about
/// `[-1, 1]²`). Parameters stay within the ranges noted per variant.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapeKind {
    /// `aspect ∈ [0.45, 1]`.
    Ellipse { aspect: f64 },
    /// Regular polygon with circumradius 1; `sides ∈ [3, 8]`,
    /// `aspect ∈ [0.5, 1]`, `phase` in radians.
    Polygon { sides: u32, aspect: f64, phase: f64 },
    /// `points ∈ [4, 7]`, `inner ∈ [0.35, 0.6]`.
    Star { points: u32, inner: f64 },
    /// Plus sign; `arm ∈ [0.2, 0.4]` half-width.
    Cross { arm: f64 },
    /// Disk with a hole; `inner ∈ [0.4, 0.65]`.
    Annulus { inner: f64 },
    /// Disk minus a shifted disk; `offset ∈ [0.35, 0.6]`.
    Crescent { offset: f64 },
    /// `arm ∈ [0.25, 0.4]` stroke width.
    LShape { arm: f64 },
    TShape { arm: f64 },
    Heart,
    /// `head ∈ [0.5, 0.8]` half-height of the head.
    Arrow { head: f64 },
    /// `cut ∈ [-0.2, 0.3]`, height of the chord.
    HalfDisk { cut: f64 },
    /// Two triangles meeting at the centre; `waist ∈ [0, 0.15]`.
    Bowtie { waist: f64 },
    /// Square outline band; `inner ∈ [0.4, 0.6]`.
    Frame { inner: f64 },
}

impl ShapeKind {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let r = x.hypot(y);
        match *self {
            ShapeKind::Ellipse { aspect } => x * x + (y / aspect).powi(2) < 1.0,
            ShapeKind::Polygon { sides, aspect, phase } => {
                let y = y / aspect;
                let n = f64::from(sides);
                let apothem = (PI / n).cos();
                (0..sides).all(|k| {
                    let a = phase + (2.0 * f64::from(k) + 1.0) * PI / n;
                    x * a.cos() + y * a.sin() < apothem
                })
            }
            ShapeKind::Star { points, inner } => {
                let n = f64::from(points);
                let t = (y.atan2(x) + PI / 2.0).rem_euclid(2.0 * PI / n) * n / (2.0 * PI);
                let f = (2.0 * t - 1.0).abs();
                r < inner + (1.0 - inner) * f
            }
            ShapeKind::Cross { arm } => (x.abs() < arm && y.abs() < 0.95) || (y.abs() < arm && x.abs() < 0.95),
            ShapeKind::Annulus { inner } => r < 1.0 && r > inner,
            ShapeKind::Crescent { offset } => r < 1.0 && (x - offset).hypot(y + 0.1) > 0.8,
            ShapeKind::LShape { arm } => {
                let (x0, y1) = (-0.8, 0.9);
                (x > x0 && x < x0 + 2.0 * arm && y > -0.9 && y < y1) || (x > x0 && x < 0.8 && y > y1 - 2.0 * arm && y < y1)
            }
            ShapeKind::TShape { arm } => {
                (x.abs() < 0.9 && y > -0.9 && y < -0.9 + 2.0 * arm) || (x.abs() < arm && y > -0.9 && y < 0.9)
            }
            ShapeKind::Heart => {
                let (u, v) = (x * 1.25, -y * 1.25 + 0.15);
                let q = u * u + v * v - 1.0;
                q * q * q - u * u * v * v * v < 0.0
            }
            ShapeKind::Arrow { head } => {
                let shaft = y.abs() < 0.22 && x > -0.9 && x < 0.15;
                let tip = (0.15..0.95).contains(&x) && y.abs() < head * (0.95 - x) / 0.8;
                shaft || tip
            }
            ShapeKind::HalfDisk { cut } => r < 1.0 && y < cut,
            ShapeKind::Bowtie { waist } => x.abs() < 0.9 && y.abs() < x.abs() * 0.95 + waist,
            ShapeKind::Frame { inner } => x.abs().max(y.abs()) < 0.85 && x.abs().max(y.abs()) > 0.85 * inner,
        }
    }

    fn family_name(&self) -> &'static str {
        match self {
            ShapeKind::Ellipse { .. } => "ellipse",
            ShapeKind::Polygon { .. } => "polygon",
            ShapeKind::Star { .. } => "star",
            ShapeKind::Cross { .. } => "cross",
            ShapeKind::Annulus { .. } => "annulus",
            ShapeKind::Crescent { .. } => "crescent",
            ShapeKind::LShape { .. } => "l",
            ShapeKind::TShape { .. } => "t",
            ShapeKind::Heart => "heart",
            ShapeKind::Arrow { .. } => "arrow",
            ShapeKind::HalfDisk { .. } => "halfdisk",
            ShapeKind::Bowtie { .. } => "bowtie",
            ShapeKind::Frame { .. } => "frame",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub name: String,
    pub kind: ShapeKind,
    /// Sketch stroke width in pixels at 64×64.
    pub stroke_width: f64,
    pub texture_seed: u64,
}

fn base_families() -> Vec<ShapeKind> {
    use ShapeKind::*;
    vec![
        Ellipse { aspect: 1.0 },
        Polygon { sides: 3, aspect: 1.0, phase: -PI / 2.0 - PI / 3.0 },
        Polygon { sides: 4, aspect: 1.0, phase: -PI / 4.0 },
        Star { points: 5, inner: 0.42 },
        Cross { arm: 0.3 },
        Annulus { inner: 0.55 },
        Crescent { offset: 0.45 },
        LShape { arm: 0.3 },
        Heart,
        Arrow { head: 0.7 },
        TShape { arm: 0.28 },
        Polygon { sides: 4, aspect: 1.0, phase: 0.0 },
        Ellipse { aspect: 0.5 },
        Polygon { sides: 6, aspect: 1.0, phase: 0.0 },
        HalfDisk { cut: 0.1 },
        Bowtie { waist: 0.05 },
        Frame { inner: 0.5 },
        Star { points: 4, inner: 0.38 },
        Polygon { sides: 4, aspect: 0.55, phase: -PI / 4.0 },
        Polygon { sides: 5, aspect: 1.0, phase: -PI / 2.0 - PI / 5.0 },
    ]
}

/// Category `k`'s shape. The first twenty categories use fixed family
/// members; later ones draw new parameters for a family from the seed.
pub fn category_spec(k: usize, seed: u64) -> ShapeSpec {
    let families = base_families();
    let mut rng = seed::rng(seed, 0x5A_0000 + k as u64);
    let kind = if k < families.len() {
        families[k].clone()
    } else {
        use ShapeKind::*;
        match families[k % families.len()] {
            Ellipse { .. } => Ellipse { aspect: rng.random_range(0.45..1.0) },
            Polygon { .. } => Polygon {
                sides: rng.random_range(3..=8),
                aspect: rng.random_range(0.5..1.0),
                phase: rng.random_range(0.0..PI),
            },
            Star { .. } => Star {
                points: rng.random_range(4..=7),
                inner: rng.random_range(0.35..0.6),
            },
            Cross { .. } => Cross { arm: rng.random_range(0.2..0.4) },
            Annulus { .. } => Annulus { inner: rng.random_range(0.4..0.65) },
            Crescent { .. } => Crescent { offset: rng.random_range(0.35..0.6) },
            LShape { .. } => LShape { arm: rng.random_range(0.25..0.4) },
            TShape { .. } => TShape { arm: rng.random_range(0.25..0.4) },
            Heart => Heart,
            Arrow { .. } => Arrow { head: rng.random_range(0.5..0.8) },
            HalfDisk { .. } => HalfDisk { cut: rng.random_range(-0.2..0.3) },
            Bowtie { .. } => Bowtie { waist: rng.random_range(0.0..0.15) },
            Frame { .. } => Frame { inner: rng.random_range(0.4..0.6) },
        }
    };
    ShapeSpec {
        name: format!("{}{k:02}", kind.family_name()),
        kind,
        stroke_width: rng.random_range(1.8..2.4),
        texture_seed: rng.random(),
    }
}

/// Per-instance pose shared by an instance's sketch and photo.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    pub rotation: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Pose {
    /// Rotation within ±3°, scale 0.96–1.025, shift within ±0.75 px at 64×64.
    pub fn sample<R: Rng>(rng: &mut R, size: usize) -> Self {
        let px = size as f64 / 64.0;
        Self {
            rotation: rng.random_range(-3.0..3.0f64).to_radians(),
            scale: rng.random_range(0.96..1.025),
            dx: rng.random_range(-0.75..0.75) * px,
            dy: rng.random_range(-0.75..0.75) * px,
        }
    }

    /// Pixel position to unit shape coordinates.
    fn to_unit(self, size: usize, x: f64, y: f64) -> (f64, f64) {
        let s = size as f64;
        let radius = 0.36 * s * self.scale;
        let (cx, cy) = (s / 2.0 + self.dx, s / 2.0 + self.dy);
        let (u, v) = ((x - cx) / radius, (y - cy) / radius);
        let (sn, cs) = self.rotation.sin_cos();
        (cs * u + sn * v, -sn * u + cs * v)
    }
}

const SUB: [f64; 2] = [0.25, 0.75];

/// Offsets on a circle of diameter `width` used to test for a nearby boundary.
fn ring(width: f64) -> Vec<(f64, f64)> {
    (0..12)
        .map(|k| {
            let a = f64::from(k) * PI / 6.0;
            (a.cos() * width / 2.0, a.sin() * width / 2.0)
        })
        .collect()
}

fn quantized(v: f64) -> f64 {
    f64::from(crate::data::netpbm::quantize(v)) / 255.0
}

/// Dark stroked outline on pure white, grayscale replicated to three
/// channels. The outline wobbles along a smooth random displacement field.
pub fn render_sketch(spec: &ShapeSpec, pose: Pose, size: usize, stream_seed: u64) -> ImageSample {
    let mut rng = seed::rng(stream_seed, 1);
    let px = size as f64 / 64.0;
    let width = spec.stroke_width * px * rng.random_range(0.9..1.1);
    let amp = 0.7 * px;
    let (f1, f2) = (rng.random_range(0.08..0.2) / px, rng.random_range(0.08..0.2) / px);
    let (p1, p2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let ink: f64 = rng.random_range(0.0..0.15);
    let ring = ring(width);
    let mut img = ImageSample::filled(3, size, 1.0, Modality::Sketch);
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let (fx, fy) = (x as f64 + sx, y as f64 + sy);
                    let (wx, wy) = (fx + amp * (f1 * fy + p1).sin(), fy + amp * (f2 * fx + p2).sin());
                    let inside = |ox: f64, oy: f64| {
                        let (u, v) = pose.to_unit(size, wx + ox, wy + oy);
                        spec.kind.contains(u, v)
                    };
                    let centre = inside(0.0, 0.0);
                    if ring.iter().any(|&(ox, oy)| inside(ox, oy) != centre) {
                        cover += 0.25;
                    }
                }
            }
            if cover > 0.0 {
                let v = quantized(1.0 - cover * (1.0 - ink));
                for c in 0..3 {
                    *img.pixel_mut(c, y, x) = v;
                }
            }
        }
    }
    img
}

fn random_rgb<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Textured, shaded fill with a darkened rim over a light gradient
/// background.
pub fn render_photo(spec: &ShapeSpec, pose: Pose, size: usize, stream_seed: u64) -> ImageSample {
    let mut rng = seed::rng(stream_seed, 2);
    let mut tex = seed::rng(spec.texture_seed, 0);
    let s = size as f64;
    let bg = random_rgb(&mut rng, 0.72, 0.92);
    let grad_dir = rng.random_range(0.0..2.0 * PI);
    let grad_amp = rng.random_range(0.04..0.1);
    let tone = random_rgb(&mut rng, 0.6, 0.85);
    let fg = [bg[0] * tone[0], bg[1] * tone[1], bg[2] * tone[2]];
    let rim = ring(spec.stroke_width * s / 64.0 * rng.random_range(0.8..1.2));
    let rim_dark = rng.random_range(0.25..0.45);
    let stripe_freq = tex.random_range(0.4..1.1) * 64.0 / s * rng.random_range(0.9..1.1);
    let stripe_dir = tex.random_range(0.0..PI) + rng.random_range(-0.2..0.2);
    let stripe_amp = rng.random_range(0.03..0.08);
    let light = rng.random_range(0.0..2.0 * PI);
    let mut img = ImageSample::filled(3, size, 0.0, Modality::Photo);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in SUB {
                for sx in SUB {
                    let (fx, fy) = (x as f64 + sx, y as f64 + sy);
                    let (u, v) = pose.to_unit(size, fx, fy);
                    let inside = spec.kind.contains(u, v);
                    let edge = rim.iter().any(|&(ox, oy)| {
                        let (u, v) = pose.to_unit(size, fx + ox, fy + oy);
                        spec.kind.contains(u, v) != inside
                    });
                    let col = if edge {
                        fg.map(|c| c * rim_dark)
                    } else if inside {
                        let stripe = (stripe_freq * (fx * stripe_dir.cos() + fy * stripe_dir.sin())).sin();
                        let shade = 1.0 - 0.2 * (u * light.cos() + v * light.sin());
                        fg.map(|c| c * shade + stripe_amp * stripe)
                    } else {
                        let g = ((fx / s - 0.5) * grad_dir.cos() + (fy / s - 0.5) * grad_dir.sin()) * grad_amp;
                        bg.map(|c| c + g)
                    };
                    for c in 0..3 {
                        acc[c] += 0.25 * col[c];
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                *img.pixel_mut(c, y, x) = quantized(*a);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_centred_and_nonempty() {
        for k in 0..24 {
            let spec = category_spec(k, 3);
            let mut inside = 0;
            for iy in -20..=20 {
                for ix in -20..=20 {
                    if spec.kind.contains(f64::from(ix) / 20.0, f64::from(iy) / 20.0) {
                        inside += 1;
                    }
                }
            }
            assert!(inside > 100, "{} covers {inside}", spec.name);
            assert!(!spec.kind.contains(1.2, 1.2), "{}", spec.name);
        }
    }

    #[test]
    fn sketch_background_is_white() {
        let spec = category_spec(0, 1);
        let pose = Pose {
            rotation: 0.0,
            scale: 1.0,
            dx: 0.0,
            dy: 0.0,
        };
        let img = render_sketch(&spec, pose, 64, 9);
        assert_eq!(img.pixel(0, 0, 0), 1.0);
        assert!(img.pixel(0, 32, 9) < 0.9, "outline crosses the left edge of the circle");
        assert_eq!(img.pixel(0, 32, 32), 1.0);
    }
}
