//! HDR images: PFM for exact float storage, PNG for a quick look.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::write_atomic;
use crate::math::Rgb;

/// Row-major RGB image, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![Rgb::ZERO; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    /// Rounds every value through `f32`, as storing to PFM does.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|p| p.as_vec3().as_dvec3()).collect(),
            ..*self
        }
    }
}

/// Mean squared error over all channels.
pub fn mse(a: &HdrImage, b: &HdrImage) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height), "image sizes differ");
    let s: f64 = a.pixels.iter().zip(&b.pixels).map(|(p, q)| (*p - *q).length_squared()).sum();
    s / (3 * a.pixels.len()) as f64
}

/// PSNR with peak value 1.
pub fn psnr(a: &HdrImage, b: &HdrImage) -> f64 {
    psnr_from_mse(mse(a, b))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(12 * img.pixels.len());
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for v in img.get(x, y).to_array() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<HdrImage> {
    let bad = |m: &str| Error::format(path, m);
    // Three whitespace-terminated header tokens, then raw floats.
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PFM header"))?);
    }
    pos += 1;
    if tokens[0] != "PF" {
        return Err(bad("only colour PFM ('PF') is supported"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad PFM width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad PFM scale"))?;
    let little = scale < 0.0;
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != 12 * width * height {
        return Err(bad(&format!("expected {} bytes of pixel data, found {}", 12 * width * height, data.len())));
    }
    let mut img = HdrImage::new(width, height);
    let mut vals = data.chunks_exact(4).map(|c| {
        let b = [c[0], c[1], c[2], c[3]];
        (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
    });
    for y in (0..height).rev() {
        for x in 0..width {
            let (r, g, b) = (vals.next().unwrap(), vals.next().unwrap(), vals.next().unwrap());
            img.set(x, y, Rgb::new(r, g, b));
        }
    }
    Ok(img)
}

pub fn write_pfm(img: &HdrImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_pfm(img))
}

pub fn read_pfm(path: &Path) -> Result<HdrImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

/// `clamp(v, 0, 1)^(1/2.2)` to 8 bits.
pub fn tonemap(v: f64) -> u8 {
    (v.clamp(0.0, 1.0).powf(1.0 / 2.2) * 255.0).round() as u8
}

pub fn write_png(img: &HdrImage, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(3 * img.pixels.len());
    for p in &img.pixels {
        buf.extend(p.to_array().map(tonemap));
    }
    let rgb = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf).expect("buffer size matches");
    let mut bytes = Vec::new();
    rgb.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image() -> HdrImage {
        let mut img = HdrImage::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                img.set(x, y, Rgb::new(x as f64 * 0.25, y as f64 * 1.5, 0.1 + (x * y) as f64));
            }
        }
        img
    }

    #[test]
    fn pfm_round_trip_is_exact_for_f32_values() {
        let img = gradient_image().quantized();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        write_pfm(&img, &p).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn pfm_layout_is_little_endian_bottom_up() {
        let img = gradient_image();
        let bytes = encode_pfm(&img);
        let header = b"PF\n5 3\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        // First stored pixel is the bottom-left one.
        let first = f32::from_le_bytes(bytes[header.len() + 4..header.len() + 8].try_into().unwrap());
        assert_eq!(first as f64, img.get(0, 2).y);
        assert_eq!(bytes.len(), header.len() + 12 * 15);
    }

    #[test]
    fn pfm_rejects_truncation() {
        let bytes = encode_pfm(&gradient_image());
        assert!(decode_pfm(&bytes[..bytes.len() - 1], Path::new("x.pfm")).is_err());
        assert!(decode_pfm(b"P6\n1 1\n255\n", Path::new("x.pfm")).is_err());
    }

    #[test]
    fn psnr_reference() {
        let a = HdrImage::new(4, 4);
        let mut b = a.clone();
        b.pixels.iter_mut().for_each(|p| *p = Rgb::splat(0.1));
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
    }

    #[test]
    fn tonemap_clamps() {
        assert_eq!(tonemap(-1.0), 0);
        assert_eq!(tonemap(0.0), 0);
        assert_eq!(tonemap(1.0), 255);
        assert_eq!(tonemap(7.0), 255);
        assert_eq!(tonemap(0.5), (0.5f64.powf(1.0 / 2.2) * 255.0).round() as u8);
    }

    #[test]
    fn png_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&gradient_image(), &p).unwrap();
        let back = ::image::open(&p).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (5, 3));
    }
}
