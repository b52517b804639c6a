use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

/// Weight shape of a fully-connected layer: `(out, in, 1, 1)`.
pub fn fc_weight_shape(in_features: usize, out_features: usize) -> Shape {
    Shape::new(out_features, in_features, 1, 1)
}

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = input.shape();
    let in_features = s.channels * s.plane();
    let w = weights.shape();
    if w.channels * w.plane() != in_features {
        return Err(Error::shape(format!(
            "fc expects {} inputs, got {in_features} from {s}",
            w.channels * w.plane()
        )));
    }
    Ok((s.batch, in_features, w.batch))
}

/// Affine map of the flattened input: `(B, C, H, W) -> (B, out, 1, 1)`.
pub fn fc_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (batch, n_in, n_out) = dims(input, weights)?;
    let mut out = vec![T::zero(); batch * n_out];
    if let Some(b) = bias {
        if b.len() != n_out {
            return Err(Error::shape("fc bias length mismatch"));
        }
        for row in out.chunks_exact_mut(n_out) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        MatRef::row_major(input.data(), batch, n_in),
        MatRef::transposed(weights.data(), n_out, n_in),
        T::one(),
        &mut out,
    );
    Tensor::from_vec(Shape::new(batch, n_out, 1, 1), out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn fc_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (batch, n_in, n_out) = dims(input, weights)?;
    if grad_out.len() != batch * n_out {
        return Err(Error::shape("fc grad_out mismatch"));
    }
    let g = grad_out.data();
    let mut d_in = vec![T::zero(); batch * n_in];
    gemm(
        MatRef::row_major(g, batch, n_out),
        MatRef::row_major(weights.data(), n_out, n_in),
        T::zero(),
        &mut d_in,
    );
    let mut d_w = vec![T::zero(); n_out * n_in];
    gemm(
        MatRef::transposed(g, batch, n_out),
        MatRef::row_major(input.data(), batch, n_in),
        T::zero(),
        &mut d_w,
    );
    let mut d_b = vec![T::zero(); n_out];
    for row in g.chunks_exact(n_out) {
        for (d, &v) in d_b.iter_mut().zip(row) {
            *d = *d + v;
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), d_in)?,
        Tensor::from_vec(weights.shape(), d_w)?,
        Tensor::from_vec(Shape::new(1, n_out, 1, 1), d_b)?,
    ))
}
