//! Target-domain construction from clean 8-bit RGB images.
//!
//! * Domain A: edge-preserving stylization.
//! * Domain B: pencil sketch.
//! * Domain C: gray dodge (grayscale divided by a blurred, inverted grayscale).
//! * Domain D: one of six common corruptions at severities 1 to 5.
//!
//! Filters work on `[0, 1]` planes and round back to 8 bits at the end.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::sampler::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
    C,
    D,
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            "C" | "c" => Ok(Domain::C),
            "D" | "d" => Ok(Domain::D),
            other => Err(Error::Config(format!("unknown domain `{other}` (expected A, B, C, D)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Contrast,
    DefocusBlur,
    MotionBlur,
    Fog,
    Frost,
    Snow,
}

impl Corruption {
    pub const ALL: [Corruption; 6] = [
        Corruption::Contrast,
        Corruption::DefocusBlur,
        Corruption::MotionBlur,
        Corruption::Fog,
        Corruption::Frost,
        Corruption::Snow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Contrast => "contrast",
            Corruption::DefocusBlur => "defocus_blur",
            Corruption::MotionBlur => "motion_blur",
            Corruption::Fog => "fog",
            Corruption::Frost => "frost",
            Corruption::Snow => "snow",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s || c.name().replace('_', "-") == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown corruption `{s}`; known: {}",
                    Corruption::ALL.map(Corruption::name).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub domain: Domain,
    #[serde(default)]
    pub sigma_s: Option<f64>,
    #[serde(default)]
    pub sigma_r: Option<f64>,
    /// Gaussian σ for Domain C.
    #[serde(default)]
    pub blur_sigma: Option<f64>,
    #[serde(default)]
    pub corruption: Option<Corruption>,
    #[serde(default)]
    pub severity: Option<u8>,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftConfig {
    pub fn domain_a() -> Self {
        Self::bare(Domain::A, Some(40.0), Some(0.2))
    }

    pub fn domain_b() -> Self {
        Self::bare(Domain::B, Some(40.0), Some(0.04))
    }

    pub fn domain_c() -> Self {
        Self {
            blur_sigma: Some(DODGE_SIGMA),
            ..Self::bare(Domain::C, None, None)
        }
    }

    pub fn domain_d(corruption: Corruption, severity: u8) -> Self {
        Self {
            corruption: Some(corruption),
            severity: Some(severity),
            ..Self::bare(Domain::D, None, None)
        }
    }

    fn bare(domain: Domain, sigma_s: Option<f64>, sigma_r: Option<f64>) -> Self {
        Self {
            domain,
            sigma_s,
            sigma_r,
            blur_sigma: None,
            corruption: None,
            severity: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.domain {
            Domain::A | Domain::B => {
                let (Some(ss), Some(sr)) = (self.sigma_s, self.sigma_r) else {
                    return Err(Error::Config("domains A and B need sigma_s and sigma_r".into()));
                };
                check_sigmas(ss, sr)
            }
            Domain::C => match self.blur_sigma {
                Some(s) if s <= 0.0 => Err(Error::Config("blur sigma must be positive".into())),
                _ => Ok(()),
            },
            Domain::D => match (self.corruption, self.severity) {
                (Some(_), Some(s)) if (1..=5).contains(&s) => Ok(()),
                (Some(_), Some(s)) => Err(Error::Config(format!("severity {s} outside 1..=5"))),
                _ => Err(Error::Config("domain D needs a corruption and a severity".into())),
            },
        }
    }

    /// Applies the shift to one image; `index` decorrelates per-image noise.
    pub fn apply(&self, img: &RgbImage, index: usize) -> Result<RgbImage> {
        self.validate()?;
        Ok(match self.domain {
            Domain::A => apply_stylization(img, self.sigma_s.unwrap(), self.sigma_r.unwrap())?,
            Domain::B => apply_pencil_sketch(img, self.sigma_s.unwrap(), self.sigma_r.unwrap())?,
            Domain::C => apply_gray_dodge(img, self.blur_sigma.unwrap_or(DODGE_SIGMA)),
            Domain::D => apply_corruption(
                img,
                self.corruption.unwrap(),
                self.severity.unwrap(),
                derive_seed(self.seed, 0xD0, index as u64),
            )?,
        })
    }
}

fn check_sigmas(sigma_s: f64, sigma_r: f64) -> Result<()> {
    if !(sigma_s > 0.0 && sigma_r > 0.0) {
        return Err(Error::Config(format!(
            "filter scales must be positive (sigma_s={sigma_s}, sigma_r={sigma_r})"
        )));
    }
    Ok(())
}

/// `(3, H, W)` planes in `[0, 1]`.
pub fn to_planes(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn from_planes(p: &Array3<f64>) -> RgbImage {
    let (_, h, w) = p.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            (p[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn gray_plane(p: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = p.dim();
    Array2::from_shape_fn((h, w), |(y, x)| luma(p[[0, y, x]], p[[1, y, x]], p[[2, y, x]]))
}

/// Domain-transform recursive filter: three alternating horizontal/vertical
/// passes whose feedback coefficient decays with the local intensity jump.
pub fn recursive_filter(p: &Array3<f64>, sigma_s: f64, sigma_r: f64) -> Array3<f64> {
    const ITERS: i32 = 3;
    let (ch, h, w) = p.dim();
    let ratio = sigma_s / sigma_r;
    // transform derivatives from the input image
    let mut dx = Array2::<f64>::ones((h, w));
    let mut dy = Array2::<f64>::ones((h, w));
    for y in 0..h {
        for x in 0..w {
            if x > 0 {
                dx[[y, x]] += ratio * (0..ch).map(|c| (p[[c, y, x]] - p[[c, y, x - 1]]).abs()).sum::<f64>();
            }
            if y > 0 {
                dy[[y, x]] += ratio * (0..ch).map(|c| (p[[c, y, x]] - p[[c, y - 1, x]]).abs()).sum::<f64>();
            }
        }
    }
    let mut out = p.clone();
    for i in 0..ITERS {
        let sigma_h = sigma_s * 3f64.sqrt() * 2f64.powi(ITERS - i - 1) / (4f64.powi(ITERS) - 1.0).sqrt();
        let a = (-(2f64.sqrt()) / sigma_h).exp();
        let vx = dx.mapv(|d| a.powf(d));
        let vy = dy.mapv(|d| a.powf(d));
        for c in 0..ch {
            let mut plane = out.index_axis_mut(ndarray::Axis(0), c);
            for y in 0..h {
                for x in 1..w {
                    let prev = plane[[y, x - 1]];
                    plane[[y, x]] += vx[[y, x]] * (prev - plane[[y, x]]);
                }
                for x in (0..w.saturating_sub(1)).rev() {
                    let next = plane[[y, x + 1]];
                    plane[[y, x]] += vx[[y, x + 1]] * (next - plane[[y, x]]);
                }
            }
            for x in 0..w {
                for y in 1..h {
                    let prev = plane[[y - 1, x]];
                    plane[[y, x]] += vy[[y, x]] * (prev - plane[[y, x]]);
                }
                for y in (0..h.saturating_sub(1)).rev() {
                    let next = plane[[y + 1, x]];
                    plane[[y, x]] += vy[[y + 1, x]] * (next - plane[[y, x]]);
                }
            }
        }
    }
    out
}

/// Central-difference gradient magnitude with replicated borders.
fn grad_mag(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let gx = (g[[y, (x + 1).min(w - 1)]] - g[[y, x.saturating_sub(1)]]) / 2.0;
        let gy = (g[[(y + 1).min(h - 1), x]] - g[[y.saturating_sub(1), x]]) / 2.0;
        (gx * gx + gy * gy).sqrt()
    })
}

fn box3(g: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        let mut n = 0.0;
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                acc += g[[yy, xx]];
                n += 1.0;
            }
        }
        acc / n
    })
}

const STYLIZE_EDGE_GAIN: f64 = 4.0;
const STYLIZE_RESIDUAL_SCALE: f64 = 0.05;
const STYLIZE_DARKEN: f64 = 0.5;

/// Edge-preserving smoothing, then darkening along edges of the smoothed
/// image where smoothing actually removed detail.
pub fn apply_stylization(img: &RgbImage, sigma_s: f64, sigma_r: f64) -> Result<RgbImage> {
    check_sigmas(sigma_s, sigma_r)?;
    let p = to_planes(img);
    let sm = recursive_filter(&p, sigma_s, sigma_r);
    let edges = grad_mag(&gray_plane(&sm));
    let (_, h, w) = p.dim();
    let resid = box3(&Array2::from_shape_fn((h, w), |(y, x)| {
        (0..3).map(|c| (p[[c, y, x]] - sm[[c, y, x]]).abs()).sum::<f64>() / 3.0
    }));
    let mut out = sm;
    for y in 0..h {
        for x in 0..w {
            let e = (STYLIZE_EDGE_GAIN * edges[[y, x]]).min(1.0) * (resid[[y, x]] / STYLIZE_RESIDUAL_SCALE).min(1.0);
            for c in 0..3 {
                out[[c, y, x]] *= 1.0 - STYLIZE_DARKEN * e;
            }
        }
    }
    Ok(from_planes(&out))
}

const SKETCH_GAIN: f64 = 5.0;

/// Grayscale, edge-preserving smoothing, then white paper with dark strokes
/// proportional to the smoothed gradient magnitude.
pub fn apply_pencil_sketch(img: &RgbImage, sigma_s: f64, sigma_r: f64) -> Result<RgbImage> {
    check_sigmas(sigma_s, sigma_r)?;
    let g = gray_plane(&to_planes(img)).insert_axis(ndarray::Axis(0));
    let sm = recursive_filter(&g, sigma_s, sigma_r);
    let m = grad_mag(&sm.index_axis(ndarray::Axis(0), 0).to_owned());
    let v = m.mapv(|e| 1.0 - (SKETCH_GAIN * e).min(1.0));
    let (h, w) = v.dim();
    Ok(from_planes(&Array3::from_shape_fn((3, h, w), |(_, y, x)| v[[y, x]])))
}

/// Gaussian σ of the Domain C blur (21-tap kernel).
pub const DODGE_SIGMA: f64 = 10.0;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, 10);
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Reflect-101 index (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn separable(g: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = g.dim();
    let r = (k.len() / 2) as isize;
    let tmp: Array2<f64> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, &kv)| kv * g[[y, reflect(x as isize + i as isize - r, w)]])
            .sum()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, &kv)| kv * tmp[[reflect(y as isize + i as isize - r, h), x]])
            .sum()
    })
}

/// 2-D convolution (correlation) with reflect-101 borders.
fn filter2d(g: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    let (kh, kw) = k.dim();
    let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for ((i, j), &kv) in k.indexed_iter() {
            if kv != 0.0 {
                acc += kv
                    * g[[
                        reflect(y as isize + i as isize - ry, h),
                        reflect(x as isize + j as isize - rx, w),
                    ]];
            }
        }
        acc
    })
}

fn filter_planes(p: &Array3<f64>, k: &Array2<f64>) -> Array3<f64> {
    let mut out = p.clone();
    for c in 0..p.dim().0 {
        let f = filter2d(&p.index_axis(ndarray::Axis(0), c).to_owned(), k);
        out.index_axis_mut(ndarray::Axis(0), c).assign(&f);
    }
    out
}

/// `out = min(255, round(g·255 / (255 − b)))` with `b` the blurred inverted
/// grayscale; 255 when the denominator vanishes and `g > 0`, 0 when `g = 0`.
pub fn apply_gray_dodge(img: &RgbImage, blur_sigma: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let g = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let p = img.get_pixel(x as u32, y as u32);
        luma(p[0] as f64, p[1] as f64, p[2] as f64).round()
    });
    let inv = g.mapv(|v| 255.0 - v);
    let b = separable(&inv, &gaussian_kernel(blur_sigma)).mapv(|v| v.round().clamp(0.0, 255.0));
    RgbImage::from_fn(w, h, |x, y| {
        let (gv, bv) = (g[[y as usize, x as usize]], b[[y as usize, x as usize]]);
        let v = if gv == 0.0 {
            0
        } else if bv >= 255.0 {
            255
        } else {
            (gv * 255.0 / (255.0 - bv)).round().min(255.0) as u8
        };
        Rgb([v, v, v])
    })
}

fn disk_kernel(radius: f64, alias_sigma: f64) -> Array2<f64> {
    let r = radius.ceil() as isize + 1;
    let n = (2 * r + 1) as usize;
    let mut k = Array2::from_shape_fn((n, n), |(i, j)| {
        let (dy, dx) = (i as f64 - r as f64, j as f64 - r as f64);
        if dx * dx + dy * dy <= radius * radius {
            1.0
        } else {
            0.0
        }
    });
    let s = k.sum();
    k /= s;
    let g = gaussian_kernel(alias_sigma);
    let gk = Array2::from_shape_fn((g.len(), g.len()), |(i, j)| g[i] * g[j]);
    // smooth the disk edge by convolving the two kernels
    let m = n + gk.nrows() - 1;
    let mut out = Array2::zeros((m, m));
    for ((i, j), &a) in k.indexed_iter() {
        for ((u, v), &b) in gk.indexed_iter() {
            out[[i + u, j + v]] += a * b;
        }
    }
    out
}

fn line_kernel(length: f64, angle: f64) -> Array2<f64> {
    let r = (length / 2.0).ceil() as isize + 1;
    let n = (2 * r + 1) as usize;
    let mut k = Array2::<f64>::zeros((n, n));
    let (s, c) = angle.sin_cos();
    let steps = (length * 8.0).ceil() as usize + 1;
    for t in 0..steps {
        let d = -length / 2.0 + length * t as f64 / (steps - 1).max(1) as f64;
        let (x, y) = (r as f64 + d * c, r as f64 + d * s);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (oy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as isize + oy, x0 as isize + ox);
                if (0..n as isize).contains(&yy) && (0..n as isize).contains(&xx) {
                    k[[yy as usize, xx as usize]] += wy * wx;
                }
            }
        }
    }
    let sum = k.sum();
    k / sum
}

/// Diamond-square plasma on a `size`×`size` torus, normalised to `[0, 1]`.
fn plasma_fractal<R: Rng + ?Sized>(rng: &mut R, size: usize, wibble_decay: f64) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((size, size));
    let mut step = size;
    let mut wibble = 100.0;
    let noise = |rng: &mut R, wib: f64| wib * (rng.random::<f64>() * 2.0 - 1.0);
    while step >= 2 {
        let half = step / 2;
        // squares
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let (y2, x2) = ((y + step) % size, (x + step) % size);
                let avg = (m[[y, x]] + m[[y2, x]] + m[[y, x2]] + m[[y2, x2]]) / 4.0;
                m[[y + half, x + half]] = avg + noise(rng, wibble);
            }
        }
        // diamonds
        for y in (0..size).step_by(step) {
            for x in (0..size).step_by(step) {
                let (yh, xh) = (y + half, x + half);
                let up = (y + size - half) % size;
                let left = (x + size - half) % size;
                let a = (m[[y, x]] + m[[y, (x + step) % size]] + m[[yh, xh]] + m[[up, xh]]) / 4.0;
                m[[y, xh]] = a + noise(rng, wibble);
                let b = (m[[y, x]] + m[[(y + step) % size, x]] + m[[yh, xh]] + m[[yh, left]]) / 4.0;
                m[[yh, x]] = b + noise(rng, wibble);
            }
        }
        step = half;
        wibble /= wibble_decay;
    }
    let (lo, hi) = m.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    m.mapv(|v| (v - lo) / (hi - lo).max(1e-12))
}

/// Procedural frost texture: value noise plus thin bright crystal strokes.
pub fn frost_texture(size: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = plasma_fractal(&mut rng, size.next_power_of_two(), 1.6);
    let mut crystals = Array2::<f64>::zeros((size, size));
    for _ in 0..size * 2 {
        let (mut x, mut y) = (rng.random::<f64>() * size as f64, rng.random::<f64>() * size as f64);
        let angle: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let len = 2.0 + rng.random::<f64>() * size as f64 / 6.0;
        let (s, c) = angle.sin_cos();
        let mut t = 0.0;
        while t < len {
            let (xi, yi) = (x as usize % size, y as usize % size);
            crystals[[yi, xi]] = (crystals[[yi, xi]] + 0.6).min(1.0);
            x = (x + c * 0.5).rem_euclid(size as f64);
            y = (y + s * 0.5).rem_euclid(size as f64);
            t += 0.5;
        }
    }
    let tint = [0.85, 0.92, 1.0];
    Array3::from_shape_fn((3, size, size), |(ch, y, x)| {
        (tint[ch] * (0.55 * base[[y, x]] + 0.6 * crystals[[y, x]])).min(1.0)
    })
}

const FROST_SEED: u64 = 0xF05;

/// Deterministic in `(corruption, severity, seed)`.
pub fn apply_corruption(img: &RgbImage, corruption: Corruption, severity: u8, seed: u64) -> Result<RgbImage> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("severity {severity} outside 1..=5")));
    }
    let si = (severity - 1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = to_planes(img);
    let (_, h, w) = x.dim();
    let out = match corruption {
        Corruption::Contrast => {
            let c = [0.4, 0.3, 0.2, 0.1, 0.05][si];
            let mut out = x.clone();
            for ch in 0..3 {
                let mean = x.index_axis(ndarray::Axis(0), ch).mean().unwrap_or(0.0);
                out.index_axis_mut(ndarray::Axis(0), ch)
                    .mapv_inplace(|v| (v - mean) * c + mean);
            }
            out
        }
        Corruption::DefocusBlur => {
            let (r, a) = [(1.0, 0.5), (1.5, 0.5), (2.0, 0.5), (2.5, 0.5), (3.0, 0.5)][si];
            filter_planes(&x, &disk_kernel(r, a))
        }
        Corruption::MotionBlur => {
            let len = [3.0, 5.0, 7.0, 9.0, 11.0][si];
            let angle = (rng.random::<f64>() - 0.5) * std::f64::consts::FRAC_PI_2;
            filter_planes(&x, &line_kernel(len, angle))
        }
        Corruption::Fog => {
            let (amount, decay) = [(0.2, 3.0), (0.5, 3.0), (0.75, 2.5), (1.0, 2.0), (1.5, 1.75)][si];
            let size = h.max(w).next_power_of_two();
            let fog = plasma_fractal(&mut rng, size, decay);
            let mx = x.iter().cloned().fold(0.0, f64::max);
            Array3::from_shape_fn((3, h, w), |(c, y, xx)| {
                (x[[c, y, xx]] + amount * fog[[y, xx]]) * mx / (mx + amount)
            })
        }
        Corruption::Frost => {
            let (a, b) = [(1.0, 0.2), (1.0, 0.3), (0.9, 0.4), (0.85, 0.4), (0.75, 0.45)][si];
            let size = 2 * h.max(w);
            let tex = frost_texture(size, FROST_SEED);
            let (oy, ox) = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
            Array3::from_shape_fn((3, h, w), |(c, y, xx)| {
                a * x[[c, y, xx]] + b * tex[[c, oy + y, ox + xx]]
            })
        }
        Corruption::Snow => {
            let (loc, scale, thresh, len, keep) = [
                (0.1, 0.2, 0.6, 3.0, 0.95),
                (0.1, 0.2, 0.5, 4.0, 0.9),
                (0.15, 0.3, 0.55, 4.0, 0.9),
                (0.25, 0.3, 0.6, 5.0, 0.85),
                (0.3, 0.3, 0.65, 6.0, 0.8),
            ][si];
            let flakes = Array2::from_shape_fn((h, w), |_| {
                let v: f64 = rng.sample(StandardNormal);
                let v = loc + scale * v;
                if v < thresh {
                    0.0
                } else {
                    v
                }
            });
            let angle = (-135.0 + 90.0 * rng.random::<f64>()).to_radians();
            let snow = filter2d(&flakes, &line_kernel(len, angle)).mapv(|v| v.min(1.0));
            let gray = gray_plane(&x);
            Array3::from_shape_fn((3, h, w), |(c, y, xx)| {
                let v = x[[c, y, xx]];
                let v = keep * v + (1.0 - keep) * v.max(gray[[y, xx]] * 1.5 + 0.5);
                v + snow[[y, xx]] + snow[[h - 1 - y, w - 1 - xx]]
            })
        }
    };
    Ok(from_planes(&out.mapv(|v| v.clamp(0.0, 1.0))))
}

/// Provenance for a shifted split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftManifest {
    pub config: ShiftConfig,
    pub count: usize,
    pub source_hash: String,
    pub hash: String,
}

/// Applies `cfg` to every image; labels are copied untouched.
pub fn build_target_split(source: &LabeledDataset, cfg: &ShiftConfig) -> Result<(LabeledDataset, ShiftManifest)> {
    if source.is_empty() {
        return Err(Error::Config("cannot shift an empty dataset".into()));
    }
    cfg.validate()?;
    let images = source
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| cfg.apply(img, i))
        .collect::<Result<Vec<_>>>()?;
    let out = LabeledDataset::new(images, source.labels.clone(), source.classes)?;
    let manifest = ShiftManifest {
        config: cfg.clone(),
        count: out.len(),
        source_hash: source.hash(),
        hash: out.hash(),
    };
    Ok((out, manifest))
}

/// Mean over all pixels and channels of an 8-bit image.
pub fn mean_intensity(img: &RgbImage) -> f64 {
    img.as_raw().iter().map(|&v| v as f64).sum::<f64>() / img.as_raw().len() as f64
}

/// Per-channel standard deviation, averaged over channels (in `[0, 1]` units).
pub fn mean_channel_std(img: &RgbImage) -> f64 {
    let p = to_planes(img);
    (0..3).map(|c| p.index_axis(ndarray::Axis(0), c).std(0.0)).sum::<f64>() / 3.0
}

/// Mean squared forward-difference gradient of the grayscale image.
pub fn gradient_energy(img: &RgbImage) -> f64 {
    let g = gray_plane(&to_planes(img));
    let (h, w) = g.dim();
    let gx = &g.slice(s![.., 1..]) - &g.slice(s![.., ..w - 1]);
    let gy = &g.slice(s![1.., ..]) - &g.slice(s![..h - 1, ..]);
    (gx.mapv(|v| v * v).sum() + gy.mapv(|v| v * v).sum()) / (h * w) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(32, 32, Rgb(v))
    }

    fn noisy(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(32, 32, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn gray_dodge_closed_forms() {
        let white = apply_gray_dodge(&constant([255; 3]), DODGE_SIGMA);
        assert!(white.pixels().all(|p| p.0 == [255; 3]));
        let black = apply_gray_dodge(&constant([0; 3]), DODGE_SIGMA);
        assert!(black.pixels().all(|p| p.0 == [0; 3]));
        let mid = apply_gray_dodge(&constant([128; 3]), DODGE_SIGMA);
        assert!(mid.pixels().all(|p| p.0 == [255; 3]));
    }

    #[test]
    fn gray_dodge_kernel_has_21_taps() {
        assert_eq!(gaussian_kernel(DODGE_SIGMA).len(), 21);
    }

    #[test]
    fn reflect_101_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn stylization_fixes_constants_and_vanishing_range_scale() {
        let c = constant([40, 120, 200]);
        assert_eq!(apply_stylization(&c, 40.0, 0.2).unwrap(), c);
        let n = noisy(1);
        assert_eq!(apply_stylization(&n, 40.0, 1e-9).unwrap(), n);
        assert!(matches!(apply_stylization(&n, 0.0, 0.2), Err(Error::Config(_))));
    }

    fn step_edge(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(32, 32, |x, _| {
            let base: i32 = if x < 16 { 60 } else { 190 };
            let v = (base + rng.random_range(-12..=12)) as u8;
            Rgb([v, v, v])
        })
    }

    fn side_variances(img: &RgbImage) -> (f64, f64) {
        let var = |xs: std::ops::Range<u32>| {
            let v: Vec<f64> = xs
                .flat_map(|x| (0..32).map(move |y| (x, y)))
                .map(|(x, y)| img.get_pixel(x, y)[0] as f64)
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64
        };
        (var(0..14), var(18..32))
    }

    fn edge_column(img: &RgbImage) -> u32 {
        (1..32)
            .max_by_key(|&x| {
                (0..32)
                    .map(|y| (img.get_pixel(x, y)[0] as i64 - img.get_pixel(x - 1, y)[0] as i64).abs())
                    .sum::<i64>()
            })
            .unwrap()
    }

    #[test]
    fn stylization_smooths_sides_and_keeps_the_edge() {
        let img = step_edge(5);
        let out = apply_stylization(&img, 40.0, 0.2).unwrap();
        let (l0, r0) = side_variances(&img);
        let (l1, r1) = side_variances(&out);
        assert!(l1 < l0 && r1 < r0, "({l0},{r0}) -> ({l1},{r1})");
        assert_eq!(edge_column(&out), edge_column(&img));
    }

    #[test]
    fn sharper_range_kernel_keeps_more_sketch_edges() {
        let img = crate::data::toy_shapes(1, 8).images[1].clone();
        let frac = |sr: f64| {
            let s = apply_pencil_sketch(&img, 40.0, sr).unwrap();
            s.pixels().filter(|p| p[0] < 200).count() as f64 / 1024.0
        };
        let (sharp, soft) = (frac(0.04), frac(0.2));
        assert!(sharp >= soft && sharp > 0.0, "{sharp} vs {soft}");
    }

    #[test]
    fn pencil_sketch_of_constant_is_white_and_gray() {
        let s = apply_pencil_sketch(&constant([90, 10, 200]), 40.0, 0.04).unwrap();
        assert!(s.pixels().all(|p| p[0] >= 250 && p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn contrast_fixes_constants_and_is_monotone() {
        let c = constant([10, 100, 250]);
        for sev in 1..=5 {
            assert_eq!(apply_corruption(&c, Corruption::Contrast, sev, 0).unwrap(), c);
        }
        let n = noisy(2);
        let stds: Vec<f64> = (1..=5)
            .map(|s| mean_channel_std(&apply_corruption(&n, Corruption::Contrast, s, 0).unwrap()))
            .collect();
        assert!(stds.windows(2).all(|w| w[1] <= w[0]), "{stds:?}");
        assert!(stds[4] < stds[0]);
    }

    #[test]
    fn blurs_preserve_mean_and_reduce_gradient_energy_monotonically() {
        let n = noisy(3);
        for corr in [Corruption::DefocusBlur, Corruption::MotionBlur] {
            let outs: Vec<RgbImage> = (1..=5).map(|s| apply_corruption(&n, corr, s, 7).unwrap()).collect();
            for o in &outs {
                let rel = (mean_intensity(o) - mean_intensity(&n)).abs() / mean_intensity(&n);
                assert!(rel < 0.01, "{corr}: {rel}");
            }
            let e: Vec<f64> = outs.iter().map(gradient_energy).collect();
            assert!(e.windows(2).all(|w| w[1] <= w[0]), "{corr}: {e:?}");
        }
    }

    #[test]
    fn corruptions_are_deterministic_and_named() {
        let n = noisy(4);
        for c in Corruption::ALL {
            assert_eq!(
                apply_corruption(&n, c, 3, 11).unwrap(),
                apply_corruption(&n, c, 3, 11).unwrap()
            );
            assert_eq!(c.name().parse::<Corruption>().unwrap(), c);
        }
        let err = "rain".parse::<Corruption>().unwrap_err().to_string();
        assert!(err.contains("frost") && err.contains("defocus_blur"), "{err}");
    }
}
