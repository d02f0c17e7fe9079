//! 8-bit raster operations used on frames and plate crops.
//!
//! Everything here is a pure function over [`ImageBuf`]. Pixel arithmetic is
//! pinned down precisely (integer luma, half-pixel-center bilinear sampling,
//! exact Otsu comparison) so outputs are bit-reproducible.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PixelRect;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("expected {expected}-channel image, got {actual}")]
    ChannelMismatch { expected: u8, actual: u8 },
    #[error("histogram has fewer than two distinct intensities")]
    DegenerateHistogram,
    #[error("rect {rect:?} exceeds {width}x{height} image")]
    OutOfBounds { rect: PixelRect, width: u32, height: u32 },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("malformed PNM: {0}")]
    MalformedPnm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major 8-bit image with 1 (gray) or 3 (interleaved RGB) channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuf {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuf")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl ImageBuf {
    pub fn from_raw(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidImage(format!("dimensions {width}x{height} must be >= 1")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::InvalidImage(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImagingError::InvalidImage(format!(
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Image filled with one color; `value.len()` picks the channel count.
    pub fn filled(width: u32, height: u32, value: &[u8]) -> Result<Self, ImagingError> {
        let channels = value.len() as u8;
        let data = value.iter().copied().cycle().take(width as usize * height as usize * value.len()).collect();
        Self::from_raw(width, height, channels, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &mut self.data[i..i + c]
    }

    fn require_channels(&self, expected: u8) -> Result<(), ImagingError> {
        if self.channels == expected {
            Ok(())
        } else {
            Err(ImagingError::ChannelMismatch { expected, actual: self.channels })
        }
    }
}

/// BT.601 luma with round-half-up, computed in integers.
pub fn grayscale(img: &ImageBuf) -> Result<ImageBuf, ImagingError> {
    img.require_channels(3)?;
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let luma = 299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2]);
            ((luma + 500) / 1000).min(255) as u8
        })
        .collect();
    Ok(ImageBuf { width: img.width, height: img.height, channels: 1, data })
}

/// Intensity counts of a grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram256 {
    bins: [u64; 256],
}

impl Histogram256 {
    pub fn from_bins(bins: [u64; 256]) -> Self {
        Self { bins }
    }

    pub fn bins(&self) -> &[u64; 256] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().sum()
    }
}

pub fn histogram(img: &ImageBuf) -> Result<Histogram256, ImagingError> {
    img.require_channels(1)?;
    let mut bins = [0u64; 256];
    for &v in &img.data {
        bins[v as usize] += 1;
    }
    Ok(Histogram256 { bins })
}

/// Otsu's threshold: the level `t` maximizing the between-class variance
/// when class 0 holds intensities `<= t`. The smallest maximizer wins.
///
/// With counts `n0`, `n1 = N - n0` and intensity sums `s0`, `S`, the
/// variance is `(N*s0 - S*n0)^2 / (N^2 * n0 * n1)`. `N^2` is common to all
/// candidates, so candidates are compared as exact fractions
/// `(N*s0 - S*n0)^2 / (n0 * n1)` by cross multiplication.
pub fn otsu_threshold(hist: &Histogram256) -> Result<u8, ImagingError> {
    let distinct = hist.bins.iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(ImagingError::DegenerateHistogram);
    }
    let total = u128::from(hist.total());
    let sum: u128 = hist.bins.iter().enumerate().map(|(v, &c)| v as u128 * u128::from(c)).sum();

    let mut best_t = 0u8;
    let mut best: (u128, u128) = (0, 1);
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..=255usize {
        n0 += u128::from(hist.bins[t]);
        s0 += t as u128 * u128::from(hist.bins[t]);
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let spread = (total * s0).abs_diff(sum * n0);
        let weight = n0 * n1;
        // spread^2 / weight > best.0^2 / best.1
        let lhs = mul_wide(&mul_wide(&limbs(spread), &limbs(spread)), &limbs(best.1));
        let rhs = mul_wide(&mul_wide(&limbs(best.0), &limbs(best.0)), &limbs(weight));
        if cmp_wide(&lhs, &rhs).is_gt() {
            best = (spread, weight);
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

fn limbs(v: u128) -> Vec<u64> {
    vec![v as u64, (v >> 64) as u64]
}

fn mul_wide(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = vec![0u64; a.len() + b.len()];
    for (i, &x) in a.iter().enumerate() {
        let mut carry = 0u128;
        for (j, &y) in b.iter().enumerate() {
            let cur = u128::from(out[i + j]) + u128::from(x) * u128::from(y) + carry;
            out[i + j] = cur as u64;
            carry = cur >> 64;
        }
        out[i + b.len()] = carry as u64;
    }
    out
}

fn cmp_wide(a: &[u64], b: &[u64]) -> std::cmp::Ordering {
    let n = a.len().max(b.len());
    for i in (0..n).rev() {
        let x = a.get(i).copied().unwrap_or(0);
        let y = b.get(i).copied().unwrap_or(0);
        if x != y {
            return x.cmp(&y);
        }
    }
    std::cmp::Ordering::Equal
}

/// Strict threshold: `> t` becomes 255, everything else 0.
pub fn binarize(img: &ImageBuf, t: u8) -> Result<ImageBuf, ImagingError> {
    img.require_channels(1)?;
    let data = img.data.iter().map(|&v| if v > t { 255 } else { 0 }).collect();
    Ok(ImageBuf { width: img.width, height: img.height, channels: 1, data })
}

pub fn invert(img: &ImageBuf) -> ImageBuf {
    ImageBuf { data: img.data.iter().map(|&v| 255 - v).collect(), ..img.clone() }
}

struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src: u32, dst: u32) -> Vec<Tap> {
    let scale = f64::from(src) / f64::from(dst);
    let last = f64::from(src - 1);
    (0..dst)
        .map(|i| {
            let pos = ((f64::from(i) + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = pos.floor();
            let hi = (lo + 1.0).min(last);
            Tap { lo: lo as usize, hi: hi as usize, frac: pos - lo }
        })
        .collect()
}

/// Bilinear resize sampling at half-pixel centers, rounding half up.
pub fn resize(img: &ImageBuf, target_w: u32, target_h: u32) -> Result<ImageBuf, ImagingError> {
    if target_w == 0 || target_h == 0 {
        return Err(ImagingError::InvalidImage(format!("target dimensions {target_w}x{target_h} must be >= 1")));
    }
    if target_w == img.width && target_h == img.height {
        return Ok(img.clone());
    }
    let c = img.channels as usize;
    let src_stride = img.width as usize * c;
    let xs = taps(img.width, target_w);
    let ys = taps(img.height, target_h);

    let mut data = Vec::with_capacity(target_w as usize * target_h as usize * c);
    for ty in &ys {
        let top = &img.data[ty.lo * src_stride..(ty.lo + 1) * src_stride];
        let bottom = &img.data[ty.hi * src_stride..(ty.hi + 1) * src_stride];
        for tx in &xs {
            for ch in 0..c {
                let (l, r) = (tx.lo * c + ch, tx.hi * c + ch);
                let upper = f64::from(top[l]) + (f64::from(top[r]) - f64::from(top[l])) * tx.frac;
                let lower = f64::from(bottom[l]) + (f64::from(bottom[r]) - f64::from(bottom[l])) * tx.frac;
                let v = upper + (lower - upper) * ty.frac;
                data.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(ImageBuf { width: target_w, height: target_h, channels: img.channels, data })
}

pub fn crop(img: &ImageBuf, rect: PixelRect) -> Result<ImageBuf, ImagingError> {
    if !rect.fits_within(img.width, img.height) {
        return Err(ImagingError::OutOfBounds { rect, width: img.width, height: img.height });
    }
    let c = img.channels as usize;
    let stride = img.width as usize * c;
    let row_len = rect.width as usize * c;
    let mut data = Vec::with_capacity(row_len * rect.height as usize);
    for y in rect.y..rect.bottom() {
        let start = y as usize * stride + rect.x as usize * c;
        data.extend_from_slice(&img.data[start..start + row_len]);
    }
    Ok(ImageBuf { width: rect.width, height: rect.height, channels: img.channels, data })
}

/// Geometric augmentation with bounded parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeoTransform {
    HorizontalFlip,
    /// Degrees, counter-clockwise as displayed; `|degrees| <= 30`.
    Rotate { degrees: f64 },
    /// Shift as a fraction of width/height; each within `[-0.2, 0.2]`.
    Translate { dx: f64, dy: f64 },
    /// Scale about the image center within `[0.8, 1.2]`.
    Zoom { scale: f64 },
}

impl GeoTransform {
    pub fn validate(&self) -> Result<(), ImagingError> {
        let ok = match *self {
            GeoTransform::HorizontalFlip => true,
            GeoTransform::Rotate { degrees } => degrees.abs() <= 30.0,
            GeoTransform::Translate { dx, dy } => dx.abs() <= 0.2 && dy.abs() <= 0.2,
            GeoTransform::Zoom { scale } => (0.8..=1.2).contains(&scale),
        };
        if ok {
            Ok(())
        } else {
            Err(ImagingError::InvalidTransform(format!("{self:?} is outside the allowed range")))
        }
    }

    /// Draws a transform kind and parameters from a seeded generator.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match rng.gen_range(0..4) {
            0 => GeoTransform::HorizontalFlip,
            1 => GeoTransform::Rotate { degrees: rng.gen_range(-30.0..=30.0) },
            2 => GeoTransform::Translate { dx: rng.gen_range(-0.2..=0.2), dy: rng.gen_range(-0.2..=0.2) },
            _ => GeoTransform::Zoom { scale: rng.gen_range(0.8..=1.2) },
        }
    }
}

/// Applies `t` by inverse mapping with nearest-neighbor sampling. Samples
/// that land outside the source are black.
pub fn augment(img: &ImageBuf, t: &GeoTransform) -> Result<ImageBuf, ImagingError> {
    t.validate()?;
    let (w, h) = (img.width, img.height);
    let (fw, fh) = (f64::from(w), f64::from(h));
    let (ox, oy) = ((fw - 1.0) / 2.0, (fh - 1.0) / 2.0);

    let source = |x: f64, y: f64| -> (f64, f64) {
        match *t {
            GeoTransform::HorizontalFlip => (fw - 1.0 - x, y),
            GeoTransform::Translate { dx, dy } => (x - dx * fw, y - dy * fh),
            GeoTransform::Zoom { scale } => (ox + (x - ox) / scale, oy + (y - oy) / scale),
            GeoTransform::Rotate { degrees } => {
                // Image y grows downward, so a displayed counter-clockwise turn
                // samples with the positive-angle matrix.
                let (sin, cos) = degrees.to_radians().sin_cos();
                let (px, py) = (x - ox, y - oy);
                (ox + cos * px - sin * py, oy + sin * px + cos * py)
            }
        }
    };

    let c = img.channels as usize;
    let mut out = ImageBuf { data: vec![0; img.data.len()], ..img.clone() };
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source(f64::from(x), f64::from(y));
            let (sx, sy) = ((sx + 0.5).floor(), (sy + 0.5).floor());
            if sx < 0.0 || sy < 0.0 || sx >= fw || sy >= fh {
                continue;
            }
            let src = img.pixel(sx as u32, sy as u32);
            out.pixel_mut(x, y)[..c].copy_from_slice(src);
        }
    }
    Ok(out)
}

pub const BOX_COLOR: [u8; 3] = [0, 255, 0];
const OUTLINE_WIDTH: u32 = 2;
const GLYPH_W: i64 = 5;
const GLYPH_H: i64 = 7;

/// Draws a 2-pixel outline just inside `rect` and renders `label` above it
/// with the built-in 5x7 font. Writes are clipped to the frame.
pub fn draw_box(img: &ImageBuf, rect: PixelRect, label: &str) -> Result<ImageBuf, ImagingError> {
    img.require_channels(3)?;
    let mut out = img.clone();
    let (w, h) = (i64::from(img.width), i64::from(img.height));
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            out.pixel_mut(x as u32, y as u32).copy_from_slice(&BOX_COLOR);
        }
    };

    let (x0, y0) = (i64::from(rect.x), i64::from(rect.y));
    let (x1, y1) = (x0 + i64::from(rect.width) - 1, y0 + i64::from(rect.height) - 1);
    for t in 0..i64::from(OUTLINE_WIDTH) {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1 - t);
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1 - t, y);
        }
    }

    let top = y0 - GLYPH_H - 2;
    for (i, ch) in label.chars().enumerate() {
        let gx = x0 + i as i64 * (GLYPH_W + 1);
        if gx >= w {
            break;
        }
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) != 0 {
                    put(gx + col, top + row as i64);
                }
            }
        }
    }
    Ok(out)
}

fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        ' ' => [0; 7],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '#' => [0x0A, 0x0A, 0x1F, 0x0A, 0x1F, 0x0A, 0x0A],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

/// Encodes as binary PGM (1 channel) or PPM (3 channels), maxval 255.
pub fn encode_pnm(img: &ImageBuf) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_pnm(img: &ImageBuf, path: &Path) -> Result<(), ImagingError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_pnm(img))?;
    f.flush()?;
    Ok(())
}

pub fn read_pnm(path: &Path) -> Result<ImageBuf, ImagingError> {
    let f = std::fs::File::open(path)?;
    decode_pnm(std::io::BufReader::new(f))
}

/// Decodes binary P5/P6 with maxval 255. Header comments are skipped.
pub fn decode_pnm<R: BufRead>(mut r: R) -> Result<ImageBuf, ImagingError> {
    let magic = next_token(&mut r)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(ImagingError::MalformedPnm(format!("unsupported magic {other:?}"))),
    };
    let mut dims = [0u32; 3];
    for (slot, name) in dims.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(&mut r)?;
        *slot = tok
            .parse()
            .map_err(|_| ImagingError::MalformedPnm(format!("bad {name} {tok:?}")))?;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(ImagingError::MalformedPnm(format!("maxval {maxval} is not 255")));
    }
    let len = width as usize * height as usize * channels as usize;
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)
        .map_err(|_| ImagingError::MalformedPnm(format!("expected {len} bytes of pixel data")))?;
    ImageBuf::from_raw(width, height, channels, data).map_err(|e| ImagingError::MalformedPnm(e.to_string()))
}

// Reads one whitespace-delimited header token and consumes exactly one
// trailing whitespace byte, so the raster starts right after it.
fn next_token<R: BufRead>(r: &mut R) -> Result<String, ImagingError> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(ImagingError::MalformedPnm("unexpected end of header".into()));
            }
            break;
        }
        let b = byte[0];
        if b == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
            continue;
        }
        if b.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(b);
    }
    String::from_utf8(tok).map_err(|_| ImagingError::MalformedPnm("non-ASCII header".into()))
}
