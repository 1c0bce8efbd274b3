//! Binary portable graymap (P5) and pixmap (P6) files, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImageSample, Modality};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P5 from channel 0 of `img`.
pub fn encode_pgm(img: &ImageSample) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels[..img.width * img.height].iter().map(|&v| quantize(v)));
    out
}

/// P6 from the first three channels (grayscale images are replicated).
pub fn encode_ppm(img: &ImageSample) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.width * img.height;
    for i in 0..plane {
        for c in 0..3 {
            let c = c.min(img.channels - 1);
            out.push(quantize(img.pixels[c * plane + i]));
        }
    }
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let bad = |m: &str| Error::parse("netpbm", m.to_string());
    if bytes.len() < 2 {
        return Err(bad("file too short"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| bad("header value out of range"))?;
        fields.push(v);
    }
    if fields[2] != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator before raster"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        data_start: pos + 1,
    })
}

/// Decodes P5 or P6 into a three-channel image (P5 replicated).
pub fn decode(bytes: &[u8], modality: Modality) -> Result<ImageSample> {
    let h = parse_header(bytes)?;
    let plane = h.width * h.height;
    let raster = &bytes[h.data_start..];
    let mut pixels = vec![0.0; 3 * plane];
    match &h.magic {
        b"P5" => {
            if raster.len() != plane {
                return Err(Error::parse("netpbm", format!("P5 raster has {} bytes, expected {plane}", raster.len())));
            }
            for c in 0..3 {
                for (i, &b) in raster.iter().enumerate() {
                    pixels[c * plane + i] = f64::from(b) / 255.0;
                }
            }
        }
        b"P6" => {
            if raster.len() != 3 * plane {
                return Err(Error::parse("netpbm", format!("P6 raster has {} bytes, expected {}", raster.len(), 3 * plane)));
            }
            for i in 0..plane {
                for c in 0..3 {
                    pixels[c * plane + i] = f64::from(raster[3 * i + c]) / 255.0;
                }
            }
        }
        _ => return Err(Error::parse("netpbm", "expected P5 or P6")),
    }
    ImageSample::new(3, h.height, h.width, pixels, modality, 0, 0)
}

pub fn read(path: &Path, modality: Modality) -> Result<ImageSample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, modality).map_err(|e| match e {
        Error::Parse { what, msg } => Error::Parse {
            what,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

pub fn write_pgm(path: &Path, img: &ImageSample) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &ImageSample) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_of_quantized_pixels() {
        let mut img = ImageSample::filled(3, 16, 0.0, Modality::Photo);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = f64::from((i * 7 % 256) as u8) / 255.0;
        }
        let back = decode(&encode_ppm(&img), Modality::Photo).unwrap();
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn pgm_is_replicated_and_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        let img = decode(&bytes, Modality::Sketch).unwrap();
        assert_eq!(img.channels, 3);
        assert_eq!(img.pixels, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(decode(b"P5\n2 1\n255\n\x00", Modality::Sketch).is_err());
    }
}
