//! Image-quality metrics on `[0, 1]` images: L1, PSNR and single-scale SSIM, plus the
//! crop-to-segmentation-bbox evaluation protocol.

use std::fmt;

use crate::error::{Error, Result};

/// Interleaved `f64` image, `data[(y * width + x) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn crop(&self, r: &Rect) -> Image {
        Image::from_fn(r.width(), r.height(), self.channels, |x, y, c| self.get(r.x0 + x, r.y0 + y, c))
    }

    fn same_shape(&self, other: &Image, what: &'static str) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels {
            return Err(Error::Dimension {
                context: what,
                expected: self.width * self.height * self.channels,
                actual: other.width * other.height * other.channels,
            });
        }
        Ok(())
    }

    /// 8-bit quantized value, `round(clamp(v) * 255)`.
    pub fn to_u8(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    /// Binary PNM: P6 for 3 channels, P5 for 1 channel, maxval 255.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        if self.channels == 1 || self.channels == 3 {
            out.extend(self.data.iter().map(|v| Self::to_u8(*v)));
        } else {
            for px in self.data.chunks(self.channels) {
                for c in 0..3 {
                    out.push(Self::to_u8(px[c.min(self.channels - 1)]));
                }
            }
        }
        out
    }

    /// Parses a binary P5/P6 file with maxval 255.
    pub fn from_pnm(bytes: &[u8]) -> Result<Image> {
        let bad = |m: &str| Error::Malformed {
            section: "PNM".into(),
            message: m.to_string(),
        };
        let mut pos = 0usize;
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
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
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("header ended early"));
            }
            tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        pos += 1;
        let channels = match tokens[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(bad(&format!("unsupported magic {other}"))),
        };
        let parse = |t: &str| t.parse::<usize>().map_err(|_| bad(&format!("bad number {t:?}")));
        let (width, height, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| bad("image size overflows"))?;
        let avail = bytes.len().saturating_sub(pos);
        if avail < need {
            return Err(Error::Truncated {
                section: "PNM pixels".into(),
                expected: need,
                actual: avail,
            });
        }
        let data = bytes[pos..pos + need].iter().map(|b| *b as f64 / 255.0).collect();
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

/// Binary segmentation mask, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        BinaryMask { width, height, data }
    }

    /// Pixels whose first channel exceeds `threshold`.
    pub fn from_image(img: &Image, threshold: f64) -> Self {
        Self::from_fn(img.width, img.height, |x, y| img.get(x, y, 0) > threshold)
    }

    /// Tight bounding rectangle of the true pixels.
    pub fn bbox(&self) -> Result<Rect> {
        let mut r: Option<Rect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.data[y * self.width + x] {
                    let b = r.get_or_insert(Rect {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    b.x0 = b.x0.min(x);
                    b.x1 = b.x1.max(x + 1);
                    b.y1 = b.y1.max(y + 1);
                }
            }
        }
        r.ok_or_else(|| Error::validation("segmentation mask is empty"))
    }
}

/// Crops `img` to the bounding box of the true pixels of `mask`.
pub fn crop_to_mask_bbox(img: &Image, mask: &BinaryMask) -> Result<Image> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::dim("crop mask size", img.width * img.height, mask.width * mask.height));
    }
    Ok(img.crop(&mask.bbox()?))
}

/// Crops a prediction and its reference with the same rectangle, taken from the
/// reference segmentation mask.
pub fn crop_pair(pred: &Image, reference: &Image, reference_mask: &BinaryMask) -> Result<(Image, Image)> {
    pred.same_shape(reference, "crop_pair")?;
    Ok((
        crop_to_mask_bbox(pred, reference_mask)?,
        crop_to_mask_bbox(reference, reference_mask)?,
    ))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b, "l1")?;
    if a.data.is_empty() {
        return Err(Error::validation("l1 of empty images"));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.data.len() as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b, "mse")?;
    if a.data.is_empty() {
        return Err(Error::validation("mse of empty images"));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// PSNR in dB for unit dynamic range. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of a single-channel plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let line = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = w.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, wk) in w.iter().enumerate() {
                s += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1), computed
/// per channel over valid window positions and averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b, "ssim")?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = a.width * a.height;
    let mut total = 0.0;
    for ch in 0..a.channels {
        let pa: Vec<f64> = (0..n).map(|i| a.data[i * a.channels + ch]).collect();
        let pb: Vec<f64> = (0..n).map(|i| b.data[i * b.channels + ch]).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter_valid(&pa, a.width, a.height, &win);
        let mu_b = filter_valid(&pb, a.width, a.height, &win);
        let e_aa = filter_valid(&prod(&pa, &pa), a.width, a.height, &win);
        let e_bb = filter_valid(&prod(&pb, &pb), a.width, a.height, &win);
        let e_ab = filter_valid(&prod(&pa, &pb), a.width, a.height, &win);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / a.channels as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl Metrics {
    pub fn compute(a: &Image, b: &Image) -> Result<Metrics> {
        Ok(Metrics {
            l1: l1(a, b)?,
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
        })
    }
}

/// Formats a PSNR value, printing the identical-images sentinel as `inf`.
pub fn format_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "l1={:.8}", self.l1)?;
        writeln!(f, "psnr={}", format_psnr(self.psnr))?;
        write!(f, "ssim={:.8}", self.ssim)
    }
}

/// Deterministic smooth gradient used as the studio backdrop during evaluation.
pub fn gradient_background(width: usize, height: usize) -> Image {
    Image::from_fn(width, height, 3, |x, y, c| {
        let u = (x as f64 + 0.5) / width as f64;
        let v = (y as f64 + 0.5) / height as f64;
        match c {
            0 => 0.25 + 0.35 * u,
            1 => 0.30 + 0.25 * v,
            _ => 0.45 - 0.2 * u * v,
        }
    })
}
