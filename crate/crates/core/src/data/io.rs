use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

fn image_error(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Decodes an image file into a `(1, 3, H, W)` tensor with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| image_error(path, e))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("non-empty image")
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::shape(format!("expected a (1, 3, H, W) image, got {s}")));
    }
    let d = t.data();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(ImageBuffer::from_fn(s.width as u32, s.height as u32, |x, y| {
        let at = |c: usize| d[(c * s.height + y as usize) * s.width + x as usize];
        Rgb([to_u8(at(0)), to_u8(at(1)), to_u8(at(2))])
    }))
}

/// Writes a `(1, 3, H, W)` tensor; the format follows the file extension.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_rgb(t)?
        .save(path)
        .map_err(|e| image_error(path, e))
}
