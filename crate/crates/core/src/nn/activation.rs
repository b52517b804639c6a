use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.max_with_zero()
}

pub fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for x in t.data_mut() {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

/// Gradient of ReLU given its forward output: passes where the output is positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != output.shape() {
        return Err(Error::shape("relu grad shape mismatch"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.shape(), data)
}

/// Softmax across channels at every `(b, h, w)` position.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.channels < 2 {
        return Err(Error::shape("softmax needs at least two channels"));
    }
    let plane = s.plane();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..s.batch {
        let base = b * s.channels * plane;
        for q in 0..plane {
            let idx = |c: usize| base + c * plane + q;
            let m = (0..s.channels)
                .map(|c| x[idx(c)])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.channels {
                let e = (x[idx(c)] - m).exp();
                out[idx(c)] = e;
                z = z + e;
            }
            for c in 0..s.channels {
                out[idx(c)] = out[idx(c)] / z;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// `dx = y * (g - sum_c g_c y_c)` per position.
pub fn softmax_backward<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    let s = output.shape();
    if grad_out.shape() != s {
        return Err(Error::shape("softmax grad shape mismatch"));
    }
    let plane = s.plane();
    let (g, y) = (grad_out.data(), output.data());
    let mut dx = vec![T::zero(); y.len()];
    for b in 0..s.batch {
        let base = b * s.channels * plane;
        for q in 0..plane {
            let idx = |c: usize| base + c * plane + q;
            let dot = (0..s.channels).fold(T::zero(), |a, c| a + g[idx(c)] * y[idx(c)]);
            for c in 0..s.channels {
                dx[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
            }
        }
    }
    Tensor::from_vec(s, dx)
}
