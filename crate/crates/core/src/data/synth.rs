//! Procedural street-like scenes with exactly annotated signs.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::save_image;
use super::manifest::{Annotation, DatasetManifest, ManifestEntry, Split, Visibility, NUM_SIGN_CLASSES};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of signs per image.
    pub signs_per_image: (usize, usize),
    /// Inclusive range of sign side lengths in pixels, sampled log-uniformly.
    pub size_range: (usize, usize),
    /// Number of clutter rectangles per background.
    pub clutter: usize,
    /// 1-based sign classes to draw from.
    pub classes: Vec<usize>,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 400,
            height: 300,
            signs_per_image: (1, 3),
            size_range: (16, 200),
            clutter: 12,
            classes: (1..=NUM_SIGN_CLASSES).collect(),
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.size_range;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("size range must satisfy 0 < min <= max"));
        }
        if hi > self.width.min(self.height) {
            return Err(Error::invalid("largest sign does not fit in the image"));
        }
        if self.signs_per_image.0 > self.signs_per_image.1 {
            return Err(Error::invalid("signs_per_image min exceeds max"));
        }
        if self.classes.iter().any(|&c| c == 0 || c > NUM_SIGN_CLASSES) {
            return Err(Error::invalid("sign classes must lie in 1..=10"));
        }
        if self.classes.is_empty() && self.signs_per_image.1 > 0 {
            return Err(Error::invalid("no sign classes to draw from"));
        }
        Ok(())
    }
}

/// A rendered scene: image plus `(box, class)` for every pasted sign.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor,
    pub signs: Vec<(BBox, usize)>,
}

type Rgb = [f32; 3];
const RED: Rgb = [0.80, 0.06, 0.06];
const BLUE: Rgb = [0.05, 0.25, 0.70];
const WHITE: Rgb = [0.95, 0.95, 0.95];
const BLACK: Rgb = [0.05, 0.05, 0.05];
const YELLOW: Rgb = [0.95, 0.78, 0.05];

/// Seven-segment glyph test in a unit cell.
fn digit_on(d: u8, dx: f32, dy: f32) -> bool {
    let t = 0.2;
    let segs = match d {
        0 => "abcdef",
        1 => "bc",
        5 => "afgcd",
        7 => "abc",
        8 => "abcdefg",
        _ => "",
    };
    segs.chars().any(|s| match s {
        'a' => dy < t,
        'd' => dy > 1.0 - t,
        'g' => (dy - 0.5).abs() < t / 2.0,
        'f' => dx < t && dy < 0.5,
        'e' => dx < t && dy > 0.5,
        'b' => dx > 1.0 - t && dy < 0.5,
        'c' => dx > 1.0 - t && dy > 0.5,
        _ => false,
    })
}

fn number_on(digits: &[u8], x: f32, y: f32) -> bool {
    let (x0, x1, y0, y1) = if digits.len() == 3 {
        (-0.62, 0.62, -0.38, 0.38)
    } else {
        (-0.5, 0.5, -0.42, 0.42)
    };
    if x < x0 || x >= x1 || y < y0 || y >= y1 {
        return false;
    }
    let cell = (x1 - x0) / digits.len() as f32;
    let k = ((x - x0) / cell) as usize;
    let gap = 0.16;
    let dx = ((x - x0) / cell - k as f32) * (1.0 + gap) - gap / 2.0;
    let dy = (y - y0) / (y1 - y0);
    (0.0..1.0).contains(&dx) && digit_on(digits[k.min(digits.len() - 1)], dx, dy)
}

/// Colour of sign `class` at centred coordinates `(x, y)` in `[-1, 1]^2`, or
/// `None` where the template is transparent.
fn shade(class: usize, x: f32, y: f32) -> Option<Rgb> {
    let r = (x * x + y * y).sqrt();
    match class {
        1 => {
            // Blue square, white triangle, dark figure.
            let in_tri = y <= 0.6 && y >= -0.7 && x.abs() <= (y + 0.7) / 1.3 * 0.75;
            Some(if in_tri {
                if x.abs() < 0.09 && (-0.15..0.45).contains(&y) {
                    BLACK
                } else {
                    WHITE
                }
            } else {
                BLUE
            })
        }
        2 => (r <= 1.0).then(|| {
            let arrow_shaft = (x - y).abs() < 0.22 && r < 0.6;
            let arrow_head = x + y > 0.35 && x + y < 1.05 && (x - y).abs() < 0.5 - (x + y - 0.35) * 0.7;
            if r > 0.88 || arrow_shaft || arrow_head {
                WHITE
            } else {
                BLUE
            }
        }),
        3 | 10 => (r <= 1.0).then(|| {
            let slash = (x - y).abs() / std::f32::consts::SQRT_2 < 0.12;
            let cross = class == 3 && (x + y).abs() / std::f32::consts::SQRT_2 < 0.12;
            if r > 0.76 || slash || cross {
                RED
            } else {
                BLUE
            }
        }),
        4 | 7 | 8 | 9 => (r <= 1.0).then(|| {
            let digits: &[u8] = match class {
                4 => &[5, 0],
                7 => &[7, 0],
                8 => &[8, 0],
                _ => &[1, 0, 0],
            };
            if r > 0.74 {
                RED
            } else if number_on(digits, x, y) {
                BLACK
            } else {
                WHITE
            }
        }),
        5 => {
            let d = x.abs() + y.abs();
            (d <= 1.0).then_some(if d > 0.72 { WHITE } else { YELLOW })
        }
        6 => {
            // Inverted triangle: full-width top edge, apex at the bottom.
            let half = (1.0 - y) / 2.0;
            (x.abs() <= half).then(|| {
                let inner = y >= -0.55 && x.abs() <= half - 0.3;
                if inner {
                    WHITE
                } else {
                    RED
                }
            })
        }
        _ => None,
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders class `class` into a `size x size` patch: per-pixel colour and coverage.
pub fn render_sign(class: usize, size: usize) -> (Vec<Rgb>, Vec<f32>) {
    let mut colors = vec![[0.0; 3]; size * size];
    let mut cover = vec![0.0; size * size];
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f32; 3];
            let mut hits = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32) / size as f32;
                    let v = (py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32) / size as f32;
                    if let Some(c) = shade(class, 2.0 * u - 1.0, 2.0 * v - 1.0) {
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                        hits += 1.0;
                    }
                }
            }
            let i = py * size + px;
            if hits > 0.0 {
                colors[i] = [acc[0] / hits, acc[1] / hits, acc[2] / hits];
            }
            cover[i] = hits / n;
        }
    }
    (colors, cover)
}

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

fn paint_background(cfg: &SynthConfig, rng: &mut ChaCha8Rng, img: &mut [f32]) {
    let (w, h) = (cfg.width, cfg.height);
    let top = random_color(rng);
    let bottom = random_color(rng);
    for y in 0..h {
        let t = y as f32 / (h.max(2) - 1) as f32;
        for c in 0..3 {
            let v = top[c] * (1.0 - t) + bottom[c] * t;
            img[(c * h + y) * w..(c * h + y + 1) * w].fill(v);
        }
    }
    for _ in 0..cfg.clutter {
        let rw = rng.random_range(4..=w / 3);
        let rh = rng.random_range(4..=h / 3);
        let x0 = rng.random_range(0..=w - rw);
        let y0 = rng.random_range(0..=h - rh);
        let color = random_color(rng);
        for c in 0..3 {
            for y in y0..y0 + rh {
                img[(c * h + y) * w + x0..(c * h + y) * w + x0 + rw].fill(color[c]);
            }
        }
    }
}

fn paste(cfg: &SynthConfig, img: &mut [f32], class: usize, x0: usize, y0: usize, size: usize, gain: f32) {
    let (w, h) = (cfg.width, cfg.height);
    let (colors, cover) = render_sign(class, size);
    for py in 0..size {
        for px in 0..size {
            let i = py * size + px;
            let a = cover[i];
            if a == 0.0 {
                continue;
            }
            for c in 0..3 {
                let dst = &mut img[(c * h + y0 + py) * w + x0 + px];
                *dst = a * (colors[i][c] * gain).min(1.0) + (1.0 - a) * *dst;
            }
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let v = (a + (b - a) * rng.random::<f64>()).exp().round() as usize;
    v.clamp(lo, hi)
}

/// Renders scene `index` of the dataset defined by `cfg`. Each index has its
/// own random stream, so scenes can be produced independently and in parallel.
pub fn render_scene(cfg: &SynthConfig, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (w, h) = (cfg.width, cfg.height);
    let mut img = vec![0f32; 3 * w * h];
    paint_background(cfg, &mut rng, &mut img);

    let count = rng.random_range(cfg.signs_per_image.0..=cfg.signs_per_image.1);
    let mut signs: Vec<(BBox, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
        let size = log_uniform(&mut rng, cfg.size_range.0, cfg.size_range.1);
        let gain = rng.random_range(0.7..1.1f32);
        for _attempt in 0..50 {
            let x0 = rng.random_range(0..=w - size);
            let y0 = rng.random_range(0..=h - size);
            let bbox = BBox::square(x0 as f64, y0 as f64, size as f64)?;
            // Keep a 2 px gap so no sign touches another.
            let grown = BBox::new(bbox.x_min - 2.0, bbox.y_min - 2.0, bbox.x_max + 2.0, bbox.y_max + 2.0)?;
            if signs.iter().all(|(b, _)| b.intersection(&grown) == 0.0) {
                paste(cfg, &mut img, class, x0, y0, size, gain);
                signs.push((bbox, class));
                break;
            }
        }
    }

    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for v in img.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    // Quantise to 8 bits so in-memory scenes equal their saved PNGs.
    for v in img.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }
    Ok(Scene {
        image: Tensor::from_vec(Shape::new(1, 3, h, w), img)?,
        signs,
    })
}

/// Writes `count` scenes to `out_dir/images/NNNNNN.png` plus `out_dir/manifest.txt`.
pub fn synth_generate(cfg: &SynthConfig, count: usize, out_dir: &Path, split: Split) -> Result<DatasetManifest> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let entries = (0..count)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry> {
            let scene = render_scene(cfg, i as u64)?;
            let rel = PathBuf::from("images").join(format!("{i:06}.png"));
            save_image(&out_dir.join(&rel), &scene.image)?;
            let image_id = format!("{i:06}");
            Ok(ManifestEntry {
                image: rel,
                annotations: scene
                    .signs
                    .iter()
                    .map(|&(bbox, class_id)| Annotation {
                        image_id: image_id.clone(),
                        bbox,
                        class_id,
                        visibility: Visibility::Visible,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        entries,
        split,
        root: out_dir.to_path_buf(),
        ..DatasetManifest::default()
    };
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}
