use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Concatenates along channels, preserving input order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    for t in inputs {
        let s = t.shape();
        if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {s} vs {first}"
            )));
        }
    }
    let channels: usize = inputs.iter().map(|t| t.shape().channels).sum();
    let plane = first.plane();
    let mut out = Vec::with_capacity(first.batch * channels * plane);
    for b in 0..first.batch {
        for t in inputs {
            let n = t.shape().channels * plane;
            out.extend_from_slice(&t.data()[b * n..(b + 1) * n]);
        }
    }
    Tensor::from_vec(
        Shape::new(first.batch, channels, first.height, first.width),
        out,
    )
}

/// Inverse of [`concat_channels`]: splits a gradient into per-input pieces.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = grad.shape();
    if channels.iter().sum::<usize>() != s.channels {
        return Err(Error::shape("split channel counts do not sum to input"));
    }
    let plane = s.plane();
    let mut parts: Vec<Vec<T>> = channels
        .iter()
        .map(|c| Vec::with_capacity(s.batch * c * plane))
        .collect();
    let mut offset = 0;
    for _ in 0..s.batch {
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad.data()[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(Shape::new(s.batch, c, s.height, s.width), d))
        .collect()
}
