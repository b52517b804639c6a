use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Square pooling window. Output size uses floor division.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    /// Implicit border; only the Inception pool path uses it.
    #[serde(default)]
    pub pad: usize,
}

impl PoolSpec {
    pub fn max(kernel: usize, stride: usize) -> Self {
        Self {
            kind: PoolKind::Max,
            kernel,
            stride,
            pad: 0,
        }
    }

    pub fn avg(kernel: usize, stride: usize) -> Self {
        Self {
            kind: PoolKind::Avg,
            ..Self::max(kernel, stride)
        }
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::invalid(format!("degenerate pooling {self:?}")));
        }
        if self.pad >= self.kernel {
            return Err(Error::invalid("pool padding must be smaller than the kernel"));
        }
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.kernel > ph || self.kernel > pw {
            return Err(Error::shape(format!(
                "pool kernel {} exceeds input {h}x{w}",
                self.kernel
            )));
        }
        Ok(((ph - self.kernel) / self.stride + 1, (pw - self.kernel) / self.stride + 1))
    }
}

/// Pools every channel. Max pooling also returns, per output element, the flat
/// input index of its winner (first maximum on ties).
pub fn pool_forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &PoolSpec,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    if spec.kind == PoolKind::Max && spec.pad == 0 {
        if spec.kernel == 2 && spec.stride == 2 {
            return max_pool_2x2(input);
        }
        return max_pool_separable(input, spec);
    }
    pool_direct(input, spec)
}

/// 2x2 stride-2 max pooling, scanning each window in row-major order.
fn max_pool_2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let s = input.shape();
    let (oh, ow) = PoolSpec::max(2, 2).output_size(s.height, s.width)?;
    let x = input.data();
    let planes = s.batch * s.channels;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * s.plane();
        for oy in 0..oh {
            let r0 = base + 2 * oy * s.width;
            let (top, bottom) = (&x[r0..r0 + 2 * ow], &x[r0 + s.width..r0 + s.width + 2 * ow]);
            for ox in 0..ow {
                let c = 2 * ox;
                let (mut best, mut bi) = (top[c], r0 + c);
                if top[c + 1] > best {
                    best = top[c + 1];
                    bi = r0 + c + 1;
                }
                if bottom[c] > best {
                    best = bottom[c];
                    bi = r0 + s.width + c;
                }
                if bottom[c + 1] > best {
                    best = bottom[c + 1];
                    bi = r0 + s.width + c + 1;
                }
                out.push(best);
                argmax.push(bi);
            }
        }
    }
    Ok((
        Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), out)?,
        Some(argmax),
    ))
}

/// Unpadded max pooling as a row pass followed by a column pass. Taking the
/// first maximum in each pass selects the first maximum in row-major order.
fn max_pool_separable<T: Scalar>(
    input: &Tensor<T>,
    spec: &PoolSpec,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let s = input.shape();
    let (oh, ow) = spec.output_size(s.height, s.width)?;
    let (k, st) = (spec.kernel, spec.stride);
    let rows = (oh - 1) * st + k;
    let x = input.data();
    let planes = s.batch * s.channels;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    let mut hval = vec![T::zero(); rows * ow];
    let mut hidx = vec![0usize; rows * ow];
    for p in 0..planes {
        let base = p * s.plane();
        for y in 0..rows {
            let line = &x[base + y * s.width..base + (y + 1) * s.width];
            for ox in 0..ow {
                let win = &line[ox * st..ox * st + k];
                let (mut best, mut bi) = (win[0], 0);
                for (j, &v) in win.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        bi = j;
                    }
                }
                hval[y * ow + ox] = best;
                hidx[y * ow + ox] = ox * st + bi;
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut best, mut by) = (hval[oy * st * ow + ox], oy * st);
                for y in oy * st + 1..oy * st + k {
                    let v = hval[y * ow + ox];
                    if v > best {
                        best = v;
                        by = y;
                    }
                }
                out.push(best);
                argmax.push(base + by * s.width + hidx[by * ow + ox]);
            }
        }
    }
    Ok((
        Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), out)?,
        Some(argmax),
    ))
}

/// Window-by-window pooling; handles padding and averaging.
fn pool_direct<T: Scalar>(
    input: &Tensor<T>,
    spec: &PoolSpec,
) -> Result<(Tensor<T>, Option<Vec<usize>>)> {
    let s = input.shape();
    let (oh, ow) = spec.output_size(s.height, s.width)?;
    let planes = s.batch * s.channels;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = (spec.kind == PoolKind::Max).then(|| Vec::with_capacity(out.capacity()));
    let x = input.data();
    let norm = T::of((spec.kernel * spec.kernel) as f64);
    let pad = spec.pad as isize;
    for p in 0..planes {
        let base = p * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = (oy * spec.stride) as isize - pad;
                let x0 = (ox * spec.stride) as isize - pad;
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                let mut acc = T::zero();
                for ky in 0..spec.kernel as isize {
                    let y = y0 + ky;
                    if y < 0 || y >= s.height as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel as isize {
                        let xx = x0 + kx;
                        if xx < 0 || xx >= s.width as isize {
                            continue;
                        }
                        let i = base + y as usize * s.width + xx as usize;
                        let v = x[i];
                        acc = acc + v;
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = i;
                        }
                    }
                }
                match spec.kind {
                    PoolKind::Max => {
                        out.push(best);
                        if let Some(a) = argmax.as_mut() {
                            a.push(best_idx);
                        }
                    }
                    PoolKind::Avg => out.push(acc / norm),
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(Shape::new(s.batch, s.channels, oh, ow), out)?,
        argmax,
    ))
}

pub fn pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
    spec: &PoolSpec,
    argmax: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let (oh, ow) = spec.output_size(input_shape.height, input_shape.width)?;
    let expected = Shape::new(input_shape.batch, input_shape.channels, oh, ow);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "pool grad_out {} does not match {expected}",
            grad_out.shape()
        )));
    }
    let mut grad = vec![T::zero(); input_shape.numel()];
    let g = grad_out.data();
    match spec.kind {
        PoolKind::Max => {
            let argmax = argmax.ok_or_else(|| Error::invalid("max pool backward needs argmax"))?;
            if argmax.len() != g.len() {
                return Err(Error::shape("argmax length mismatch"));
            }
            for (&i, &v) in argmax.iter().zip(g) {
                grad[i] = grad[i] + v;
            }
        }
        PoolKind::Avg => {
            let norm = T::of((spec.kernel * spec.kernel) as f64);
            let pad = spec.pad as isize;
            let plane = input_shape.plane();
            for p in 0..input_shape.batch * input_shape.channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = g[(p * oh + oy) * ow + ox] / norm;
                        if v == T::zero() {
                            continue;
                        }
                        let y0 = (oy * spec.stride) as isize - pad;
                        let x0 = (ox * spec.stride) as isize - pad;
                        for ky in 0..spec.kernel as isize {
                            let y = y0 + ky;
                            if y < 0 || y >= input_shape.height as isize {
                                continue;
                            }
                            for kx in 0..spec.kernel as isize {
                                let x = x0 + kx;
                                if x < 0 || x >= input_shape.width as isize {
                                    continue;
                                }
                                let i = p * plane + y as usize * input_shape.width + x as usize;
                                grad[i] = grad[i] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(input_shape, grad)
}

fn adaptive_bin(i: usize, out: usize, size: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

/// Max-pools each plane onto a fixed `out_h x out_w` grid.
pub fn adaptive_max_pool<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 || out_h > s.height || out_w > s.width {
        return Err(Error::shape(format!(
            "adaptive pool target {out_h}x{out_w} invalid for input {s}"
        )));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(s.batch * s.channels * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for p in 0..s.batch * s.channels {
        let base = p * s.plane();
        for oy in 0..out_h {
            let (y0, y1) = adaptive_bin(oy, out_h, s.height);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_bin(ox, out_w, s.width);
                let mut best_idx = base + y0 * s.width + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + y * s.width + xx;
                        if x[i] > x[best_idx] {
                            best_idx = i;
                        }
                    }
                }
                out.push(x[best_idx]);
                argmax.push(best_idx);
            }
        }
    }
    Ok((
        Tensor::from_vec(Shape::new(s.batch, s.channels, out_h, out_w), out)?,
        argmax,
    ))
}

pub fn adaptive_max_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
    argmax: &[usize],
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("argmax length mismatch"));
    }
    let mut grad = vec![T::zero(); input_shape.numel()];
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        grad[i] = grad[i] + v;
    }
    Tensor::from_vec(input_shape, grad)
}

/// Mean over the whole spatial extent: `(B, C, H, W) -> (B, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let n = T::of(s.plane() as f64);
    let out = input
        .data()
        .chunks_exact(s.plane())
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / n)
        .collect();
    Tensor::from_vec(Shape::new(s.batch, s.channels, 1, 1), out).expect("shape from input")
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: Shape,
) -> Result<Tensor<T>> {
    if grad_out.len() != input_shape.batch * input_shape.channels {
        return Err(Error::shape("global pool grad_out mismatch"));
    }
    let n = T::of(input_shape.plane() as f64);
    let mut grad = Vec::with_capacity(input_shape.numel());
    for &g in grad_out.data() {
        grad.extend(std::iter::repeat_n(g / n, input_shape.plane()));
    }
    Tensor::from_vec(input_shape, grad)
}
