//! RGB images in `[0, 1]`, bilinear resizing, PPM I/O and seeded synthetic images.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("crop {top}+{side} x {left}+{side} exceeds {height}x{width} image")]
    OutOfBounds {
        top: usize,
        left: usize,
        side: usize,
        height: usize,
        width: usize,
    },
    #[error("image side {side} is smaller than patch side {patch}")]
    TooSmall { side: usize, patch: usize },
    #[error("image dimensions must be positive")]
    Empty,
}

/// Interleaved RGB, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * CHANNELS, "image buffer length mismatch");
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * CHANNELS;
        &self.data[o..o + CHANNELS]
    }

    /// Bilinear resize, pixel centres at `(k + 0.5) / N`, edges clamped.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let data = bilinear_resample(&self.data, self.height, self.width, CHANNELS, out_h, out_w);
        Image::new(out_h, out_w, data)
    }

    /// Exact pixel crop of a square region.
    pub fn crop(&self, top: usize, left: usize, side: usize) -> Result<Image, ImageError> {
        if top + side > self.height || left + side > self.width {
            return Err(ImageError::OutOfBounds {
                top,
                left,
                side,
                height: self.height,
                width: self.width,
            });
        }
        let mut data = Vec::with_capacity(side * side * CHANNELS);
        for y in top..top + side {
            let o = (y * self.width + left) * CHANNELS;
            data.extend_from_slice(&self.data[o..o + side * CHANNELS]);
        }
        Ok(Image::new(side, side, data))
    }

    pub fn read_ppm<R: Read>(mut reader: R) -> Result<Image, ImageError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        parse_ppm(&bytes)
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let raw: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&raw)?;
        Ok(())
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and `#` comments between header fields
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Ppm("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| ImageError::Ppm("non-ascii header".into()))?);
    }
    if fields[0] != "P6" {
        return Err(ImageError::Ppm(format!("expected magic P6, found {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| ImageError::Ppm(format!("bad {what} {s:?}")));
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(ImageError::Ppm(format!("only maxval 255 is supported, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Empty);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Ppm("missing raster".into()));
    }
    pos += 1;
    let n = width * height * CHANNELS;
    if bytes.len() - pos < n {
        return Err(ImageError::Ppm(format!("raster has {} bytes, expected {n}", bytes.len() - pos)));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image::new(height, width, data))
}

/// Bilinear resampling of an interleaved `h × w × ch` grid.
pub fn bilinear_resample(src: &[f64], h: usize, w: usize, ch: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty resample");
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|k| {
                let x = ((k as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w * ch];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let o = (oy * out_w + ox) * ch;
            for c in 0..ch {
                let at = |y: usize, x: usize| src[(y * w + x) * ch + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[o + c] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_unit(seed: u64, y: usize, x: usize, c: usize) -> f64 {
    let h = splitmix64(seed ^ splitmix64((y as u64) << 32 | (x as u64) << 2 | c as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Seeded synthetic image: hash-noise background plus three constant-colour
/// axis-aligned rectangles. Identical `(seed, side)` gives identical pixels.
pub fn synth_image(seed: u64, side: usize, patch_side: usize) -> Result<Image, ImageError> {
    if side < patch_side.max(1) {
        return Err(ImageError::TooSmall { side, patch: patch_side });
    }
    let mut data: Vec<f64> = (0..side * side * CHANNELS)
        .map(|k| 0.35 * hash_unit(seed, k / CHANNELS / side, (k / CHANNELS) % side, k % CHANNELS))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(3);
    while colors.len() < 3 {
        let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        if colors.iter().all(|o| o != &c) {
            colors.push(c);
        }
    }
    for color in colors {
        let h = rng.random_range(1..=side.div_ceil(2));
        let w = rng.random_range(1..=side.div_ceil(2));
        let top = rng.random_range(0..=side - h);
        let left = rng.random_range(0..=side - w);
        for y in top..top + h {
            for x in left..left + w {
                let o = (y * side + x) * CHANNELS;
                data[o..o + CHANNELS].copy_from_slice(&color);
            }
        }
    }
    Ok(Image::new(side, side, data))
}
