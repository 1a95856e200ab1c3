//! Procedural 3-class shapes world (circle, square, triangle) at 32×32.
//!
//! Scenes are a deterministic function of a standard-normal latent: entries
//! `0..8` carry content (class, position, size, rotation) and `8..15` carry
//! appearance (foreground and background colour). The bundled generators are
//! distilled from this map, so content and style live in separate latent
//! blocks just as they do in the generator's early and late layers.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::StandardNormal;

pub const CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; CLASSES] = ["circle", "square", "triangle"];
pub const RESOLUTION: u32 = 32;
/// Latent entries consumed by [`Scene::from_latents`].
pub const SCENE_LATENT_DIM: usize = 15;

const SUPERSAMPLE: u32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    /// Circumradius-like extent in pixels.
    pub size: f64,
    pub angle: f64,
    pub fg: [f64; 3],
    pub bg: [f64; 3],
}

fn squash(v: f64) -> f64 {
    1.0 / (1.0 + (-1.7 * v).exp())
}

impl Scene {
    /// Content from `content[0..8]`, appearance from `style[8..15]`.
    /// `class` overrides the argmax-of-first-three class rule.
    pub fn from_latents(content: &[f64], style: &[f64], class: Option<usize>) -> Self {
        assert!(content.len() >= SCENE_LATENT_DIM && style.len() >= SCENE_LATENT_DIM);
        let class = class.unwrap_or_else(|| {
            (0..CLASSES)
                .max_by(|&a, &b| content[a].total_cmp(&content[b]))
                .expect("three classes")
        });
        let light_fg = style[14] > 0.0;
        let mut fg = [0.0; 3];
        let mut bg = [0.0; 3];
        for ch in 0..3 {
            let (light, dark) = (0.55 + 0.45 * squash(style[8 + ch]), 0.45 * squash(style[11 + ch]));
            (fg[ch], bg[ch]) = if light_fg { (light, dark) } else { (dark, light) };
        }
        Scene {
            class,
            cx: 16.0 + 8.0 * (squash(content[3]) - 0.5),
            cy: 16.0 + 8.0 * (squash(content[4]) - 0.5),
            size: 7.0 + 4.0 * squash(content[5]),
            angle: 0.8 * (squash(content[6]) - 0.5),
            fg,
            bg,
        }
    }

    pub fn from_latent(z: &[f64], class: Option<usize>) -> Self {
        Self::from_latents(z, z, class)
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.class {
            0 => u * u + v * v <= self.size * self.size,
            1 => u.abs().max(v.abs()) <= 0.85 * self.size,
            _ => {
                // equilateral, apex up, circumradius 1.2 × size
                let r = 1.2 * self.size;
                let verts = [
                    (0.0, -r),
                    (r * 0.866_025_403_784_438_6, 0.5 * r),
                    (-r * 0.866_025_403_784_438_6, 0.5 * r),
                ];
                (0..3).all(|i| {
                    let (ax, ay) = verts[i];
                    let (bx, by) = verts[(i + 1) % 3];
                    (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
                })
            }
        }
    }

    /// Anti-aliased render.
    pub fn render(&self) -> RgbImage {
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        RgbImage::from_fn(RESOLUTION, RESOLUTION, |px, py| {
            let mut cover = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    if self.inside(x, y) {
                        cover += 1.0;
                    }
                }
            }
            let a = cover / n;
            Rgb(std::array::from_fn(|ch| {
                (255.0 * (a * self.fg[ch] + (1.0 - a) * self.bg[ch])).round() as u8
            }))
        })
    }
}

pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// One source-domain image of the given class.
pub fn sample_image<R: Rng + ?Sized>(rng: &mut R, class: usize) -> RgbImage {
    let z = sample_latent(rng, SCENE_LATENT_DIM);
    Scene::from_latent(&z, Some(class)).render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn classes_differ_in_coverage() {
        let z = vec![0.0; SCENE_LATENT_DIM];
        let imgs: Vec<_> = (0..3).map(|c| Scene::from_latent(&z, Some(c)).render()).collect();
        assert_ne!(imgs[0], imgs[1]);
        assert_ne!(imgs[1], imgs[2]);
    }

    #[test]
    fn argmax_picks_class() {
        let mut z = vec![0.0; SCENE_LATENT_DIM];
        z[2] = 1.0;
        assert_eq!(Scene::from_latent(&z, None).class, 2);
    }

    #[test]
    fn foreground_and_background_have_luminance_contrast() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = Scene::from_latent(&sample_latent(&mut rng, SCENE_LATENT_DIM), None);
            let y = |c: [f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            assert!((y(s.fg) - y(s.bg)).abs() >= 0.1);
        }
    }
}
