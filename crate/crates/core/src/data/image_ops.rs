//! Resampling, cropping and photometric adjustments on `(B, C, H, W)` images.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Shape, Tensor};

/// Clamped input indices and normalised weights for one output sample.
struct Taps {
    index: Vec<usize>,
    weight: Vec<f32>,
}

/// Triangle-filter taps along one axis. Output sample `x` is centred at
/// `origin + (x + 0.5) * step` in input pixel units; when shrinking the filter
/// widens to `step` so every input pixel contributes.
fn axis_taps(in_len: usize, out_len: usize, origin: f64, step: f64) -> Vec<Taps> {
    let support = step.max(1.0);
    (0..out_len)
        .map(|x| {
            let center = origin + (x as f64 + 0.5) * step;
            let lo = (center - support - 0.5).floor() as i64;
            let hi = (center + support + 0.5).ceil() as i64;
            let mut index = Vec::new();
            let mut weight = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let d = (i as f64 + 0.5 - center) / support;
                let w = 1.0 - d.abs();
                if w <= 0.0 {
                    continue;
                }
                index.push(i.clamp(0, in_len as i64 - 1) as usize);
                weight.push(w);
                total += w;
            }
            Taps {
                index,
                weight: weight.into_iter().map(|w| (w / total) as f32).collect(),
            }
        })
        .collect()
}

fn resample(
    img: &Tensor,
    out_h: usize,
    out_w: usize,
    origin: (f64, f64),
    step: (f64, f64),
) -> Result<Tensor> {
    let s = img.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resample to an empty image"));
    }
    let xs = axis_taps(s.width, out_w, origin.0, step.0);
    let ys = axis_taps(s.height, out_h, origin.1, step.1);
    let src = img.data();
    let mut tmp = vec![0f32; s.height * out_w];
    let mut out = Vec::with_capacity(s.batch * s.channels * out_h * out_w);
    for plane in src.chunks_exact(s.plane()) {
        for (row, dst) in plane.chunks_exact(s.width).zip(tmp.chunks_exact_mut(out_w)) {
            for (d, t) in dst.iter_mut().zip(&xs) {
                *d = t.index.iter().zip(&t.weight).map(|(&i, &w)| row[i] * w).sum();
            }
        }
        for t in &ys {
            for x in 0..out_w {
                out.push(
                    t.index
                        .iter()
                        .zip(&t.weight)
                        .map(|(&i, &w)| tmp[i * out_w + x] * w)
                        .sum(),
                );
            }
        }
    }
    Tensor::from_vec(Shape::new(s.batch, s.channels, out_h, out_w), out)
}

/// Resizes to exactly `out_h x out_w`.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if (out_h, out_w) == (s.height, s.width) {
        return Ok(img.clone());
    }
    resample(
        img,
        out_h,
        out_w,
        (0.0, 0.0),
        (s.width as f64 / out_w as f64, s.height as f64 / out_h as f64),
    )
}

/// Size of an image side after scaling by `scale`.
pub fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

/// Scales by `scale` using the nominal factor for the coordinate map, so that
/// pixel `x` of the result samples around `(x + 0.5) / scale` of the input.
pub fn rescale(img: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale must be > 0, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(img.clone());
    }
    let s = img.shape();
    resample(
        img,
        scaled_len(s.height, scale),
        scaled_len(s.width, scale),
        (0.0, 0.0),
        (1.0 / scale, 1.0 / scale),
    )
}

/// Crops `bbox` (edge pixels replicate outside the image) and resizes it to `size x size`.
pub fn crop_resize(img: &Tensor, bbox: &BBox, size: usize) -> Result<Tensor> {
    resample(
        img,
        size,
        size,
        (bbox.x_min, bbox.y_min),
        (bbox.width() / size as f64, bbox.height() / size as f64),
    )
}

/// Separable Gaussian blur with edge replication; `sigma <= 0` is a no-op.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let s = img.shape();
    let (h, w) = (s.height as i64, s.width as i64);
    let mut out = img.data().to_vec();
    let mut tmp = vec![0f32; s.plane()];
    for plane in out.chunks_exact_mut(s.plane()) {
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| {
                        let xx = (x + k as i64 - radius).clamp(0, w - 1);
                        plane[(y * w + xx) as usize] * kv
                    })
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[(y * w + x) as usize] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| {
                        let yy = (y + k as i64 - radius).clamp(0, h - 1);
                        tmp[(yy * w + x) as usize] * kv
                    })
                    .sum();
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Scales contrast about the image mean, adds a brightness offset, and clamps to `[0, 1]`.
pub fn adjust(img: &Tensor, contrast: f32, brightness: f32) -> Tensor {
    let mean = img.sum() / img.len() as f32;
    img.map(|v| ((v - mean) * contrast + mean + brightness).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 / 97.0).collect();
        Tensor::from_vec(Shape::new(1, 3, h, w), data).unwrap()
    }

    #[test]
    fn unit_scale_is_bit_identical() {
        let img = ramp(7, 9);
        assert_eq!(rescale(&img, 1.0).unwrap(), img);
        let same = resample(&img, 7, 9, (0.0, 0.0), (1.0, 1.0)).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn scaled_sizes() {
        let img = Tensor::zeros(Shape::new(1, 3, 200, 200)).unwrap();
        assert_eq!(rescale(&img, 0.5).unwrap().shape(), Shape::new(1, 3, 100, 100));
        assert_eq!(scaled_len(400, 0.6), 240);
        assert_eq!(scaled_len(400, 0.1296), 52);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Tensor::full(Shape::new(1, 3, 30, 20), 0.25).unwrap();
        for t in [rescale(&img, 0.37).unwrap(), resize(&img, 64, 64).unwrap(), gaussian_blur(&img, 1.2)] {
            assert!(t.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn crop_of_whole_image_matches_resize() {
        let img = ramp(16, 16);
        let whole = BBox::new(0.0, 0.0, 16.0, 16.0).unwrap();
        assert_eq!(crop_resize(&img, &whole, 16).unwrap(), img);
    }

    #[test]
    fn adjust_clamps() {
        let img = Tensor::full(Shape::new(1, 3, 2, 2), 250.0 / 255.0).unwrap();
        let out = adjust(&img, 1.0, 30.0 / 255.0);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }
}
