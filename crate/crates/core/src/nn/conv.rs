//! 2-D cross-correlation with stride, zero padding and dilation.
//!
//! Both passes lower the convolution to GEMM over column buffers built for a
//! list of output positions. The backward pass only visits positions whose
//! incoming gradient is non-zero, so OHEM-sparse gradients from a dense
//! probability map cost a handful of columns instead of the whole map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

/// Output positions per GEMM chunk; small enough for the column buffer to stay in cache.
const CHUNK_POSITIONS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    /// `(kh, kw)`
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride 1, no padding, no dilation, with bias.
    pub fn new(out_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            kernel: (kh, kw),
            stride: 1,
            pad: 0,
            dilation: 1,
            has_bias: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    /// `(k - 1) * dilation + 1` per axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation + 1,
            (self.kernel.1 - 1) * self.dilation + 1,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0
            || self.kernel.0 == 0
            || self.kernel.1 == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::invalid(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (ekh, ekw) = self.effective_kernel();
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if ekh > ph || ekw > pw {
            return Err(Error::shape(format!(
                "effective kernel {ekh}x{ekw} exceeds padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - ekh) / self.stride + 1, (pw - ekw) / self.stride + 1))
    }

    /// `(out_channels, in_channels, kh, kw)`
    pub fn weight_shape(&self, in_channels: usize) -> Shape {
        Shape::new(self.out_channels, in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
}

impl Geometry {
    fn new(input: Shape, spec: &ConvSpec) -> Result<Self> {
        let (oh, ow) = spec.output_size(input.height, input.width)?;
        Ok(Self {
            batch: input.batch,
            c_in: input.channels,
            h: input.height,
            w: input.width,
            oh,
            ow,
            kh: spec.kernel.0,
            kw: spec.kernel.1,
            stride: spec.stride,
            pad: spec.pad,
            dilation: spec.dilation,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        CHUNK_POSITIONS
    }

    /// Input origin `(batch offset, y, x)` of the window for global position `g`.
    fn origin(&self, g: usize) -> (usize, isize, isize) {
        let b = g / self.out_plane();
        let q = g % self.out_plane();
        let (oy, ox) = (q / self.ow, q % self.ow);
        (
            b * self.c_in * self.h * self.w,
            (oy * self.stride) as isize - self.pad as isize,
            (ox * self.stride) as isize - self.pad as isize,
        )
    }

    /// Column buffer `(k x n)` for the listed output positions.
    fn im2col<T: Scalar>(&self, input: &[T], positions: &[usize], cols: &mut Vec<T>) {
        let n = positions.len();
        cols.clear();
        cols.resize(self.k() * n, T::zero());
        let origins: Vec<_> = positions.iter().map(|&g| self.origin(g)).collect();
        let plane = self.h * self.w;
        let (hh, ww) = (self.h as isize, self.w as isize);
        let mut row = 0;
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                let dy = (ky * self.dilation) as isize;
                for kx in 0..self.kw {
                    let dx = (kx * self.dilation) as isize;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for (d, &(base, y0, x0)) in dst.iter_mut().zip(&origins) {
                        let (y, x) = (y0 + dy, x0 + dx);
                        if y >= 0 && y < hh && x >= 0 && x < ww {
                            *d = input[base + ci * plane + y as usize * self.w + x as usize];
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Valid output-column range `[lo, hi)` for which `ox * stride + shift` lands inside the row.
    fn valid_cols(&self, shift: isize, ox0: usize, ox1: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = (self.w as isize - 1 - shift).div_euclid(s) + 1;
        let lo = (lo.max(ox0 as isize) as usize).min(ox1);
        let hi = (hi.max(0) as usize).clamp(lo, ox1);
        (lo, hi)
    }

    /// Visits `(row offset in block, oy, ox0, ox1)` runs of the positions `q0..q1` of one image.
    fn runs(&self, q0: usize, q1: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut q = q0;
        while q < q1 {
            let (oy, ox0) = (q / self.ow, q % self.ow);
            let ox1 = self.ow.min(ox0 + (q1 - q));
            f(q - q0, oy, ox0, ox1);
            q += ox1 - ox0;
        }
    }

    /// Column buffer for the contiguous output positions `q0..q1` of batch item `b`.
    fn im2col_range<T: Scalar>(&self, input: &[T], b: usize, q0: usize, q1: usize, cols: &mut Vec<T>) {
        let n = q1 - q0;
        cols.clear();
        cols.resize(self.k() * n, T::zero());
        let plane = self.h * self.w;
        let mut row = 0;
        for ci in 0..self.c_in {
            let src = &input[(b * self.c_in + ci) * plane..(b * self.c_in + ci + 1) * plane];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let shift = (kx * self.dilation) as isize - self.pad as isize;
                    self.runs(q0, q1, |off, oy, ox0, ox1| {
                        let y = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            return;
                        }
                        let line = &src[y as usize * self.w..(y as usize + 1) * self.w];
                        let (lo, hi) = self.valid_cols(shift, ox0, ox1);
                        if lo >= hi {
                            return;
                        }
                        let d = &mut dst[off + lo - ox0..off + hi - ox0];
                        let x0 = (lo as isize * self.stride as isize + shift) as usize;
                        if self.stride == 1 {
                            d.copy_from_slice(&line[x0..x0 + d.len()]);
                        } else {
                            for (j, v) in d.iter_mut().enumerate() {
                                *v = line[x0 + j * self.stride];
                            }
                        }
                    });
                    row += 1;
                }
            }
        }
    }

    /// Range counterpart of [`Self::col2im`].
    fn col2im_range<T: Scalar>(&self, dcols: &[T], b: usize, q0: usize, q1: usize, grad: &mut [T]) {
        let n = q1 - q0;
        let plane = self.h * self.w;
        let mut row = 0;
        for ci in 0..self.c_in {
            let base = (b * self.c_in + ci) * plane;
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &dcols[row * n..(row + 1) * n];
                    let shift = (kx * self.dilation) as isize - self.pad as isize;
                    self.runs(q0, q1, |off, oy, ox0, ox1| {
                        let y = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            return;
                        }
                        let (lo, hi) = self.valid_cols(shift, ox0, ox1);
                        let line = base + y as usize * self.w;
                        for ox in lo..hi {
                            let x = (ox as isize * self.stride as isize + shift) as usize;
                            grad[line + x] = grad[line + x] + src[off + ox - ox0];
                        }
                    });
                    row += 1;
                }
            }
        }
    }

    /// Splits sorted positions into chunks that stay within one batch item.
    fn blocks<'p>(&self, positions: &'p [usize]) -> Vec<&'p [usize]> {
        let plane = self.out_plane();
        let chunk = self.chunk();
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=positions.len() {
            if i == positions.len()
                || i - start == chunk
                || positions[i] / plane != positions[start] / plane
            {
                if i > start {
                    out.push(&positions[start..i]);
                }
                start = i;
            }
        }
        out
    }

    /// `(b, q0, q1)` when `block` is a contiguous run within one image.
    fn as_range(&self, block: &[usize]) -> Option<(usize, usize, usize)> {
        let (first, last) = (*block.first()?, *block.last()?);
        let plane = self.out_plane();
        (last - first + 1 == block.len() && first / plane == last / plane)
            .then(|| (first / plane, first % plane, last % plane + 1))
    }

    /// Scatter-adds a `(k x n)` column gradient back into the input gradient.
    fn col2im<T: Scalar>(&self, dcols: &[T], positions: &[usize], grad: &mut [T]) {
        let n = positions.len();
        let origins: Vec<_> = positions.iter().map(|&g| self.origin(g)).collect();
        let plane = self.h * self.w;
        let (hh, ww) = (self.h as isize, self.w as isize);
        let mut row = 0;
        for ci in 0..self.c_in {
            for ky in 0..self.kh {
                let dy = (ky * self.dilation) as isize;
                for kx in 0..self.kw {
                    let dx = (kx * self.dilation) as isize;
                    let src = &dcols[row * n..(row + 1) * n];
                    for (&v, &(base, y0, x0)) in src.iter().zip(&origins) {
                        let (y, x) = (y0 + dy, x0 + dx);
                        if y >= 0 && y < hh && x >= 0 && x < ww {
                            let i = base + ci * plane + y as usize * self.w + x as usize;
                            grad[i] = grad[i] + v;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn check_params<T: Scalar>(
    input: Shape,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<()> {
    let expected = spec.weight_shape(input.channels);
    if weights.shape() != expected {
        return Err(Error::shape(format!(
            "conv weights {} do not match expected {expected} for input {input}",
            weights.shape()
        )));
    }
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.len() == spec.out_channels => Ok(()),
        (false, None) => Ok(()),
        _ => Err(Error::shape("conv bias does not match spec")),
    }
}

/// Cross-correlation forward pass. Output is `(B, out_channels, OH, OW)`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(input.shape(), spec)?;
    check_params(input.shape(), spec, weights, bias)?;
    let c_out = spec.out_channels;
    let k = geo.k();
    let plane = geo.out_plane();
    let mut out = vec![T::zero(); c_out * geo.batch * plane];
    let mut cols = Vec::new();
    let mut tmp = Vec::new();
    let chunk = geo.chunk();
    for b in 0..geo.batch {
        let mut q0 = 0;
        while q0 < plane {
            let q1 = (q0 + chunk).min(plane);
            let n = q1 - q0;
            geo.im2col_range(input.data(), b, q0, q1, &mut cols);
            tmp.clear();
            tmp.resize(c_out * n, T::zero());
            gemm(
                MatRef::row_major(weights.data(), c_out, k),
                MatRef::row_major(&cols, k, n),
                T::zero(),
                &mut tmp,
            );
            for co in 0..c_out {
                let b_co = bias.map_or(T::zero(), |bb| bb.data()[co]);
                let dst = &mut out[(b * c_out + co) * plane + q0..(b * c_out + co) * plane + q1];
                for (d, &v) in dst.iter_mut().zip(&tmp[co * n..(co + 1) * n]) {
                    *d = v + b_co;
                }
            }
            q0 = q1;
        }
    }
    Tensor::from_vec(Shape::new(geo.batch, c_out, geo.oh, geo.ow), out)
}

/// Backward pass. `input` is the cached forward input.
///
/// When `need_input_grad` is false the input gradient is skipped (first layer).
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let geo = Geometry::new(input.shape(), spec)?;
    let c_out = spec.out_channels;
    let expected = Shape::new(geo.batch, c_out, geo.oh, geo.ow);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv grad_out {} does not match forward output {expected}",
            grad_out.shape()
        )));
    }
    if weights.shape() != spec.weight_shape(geo.c_in) {
        return Err(Error::shape("conv weights do not match input channels"));
    }
    let k = geo.k();
    let plane = geo.out_plane();
    let g = grad_out.data();

    let active: Vec<usize> = (0..geo.batch * plane)
        .filter(|&p| {
            let (b, q) = (p / plane, p % plane);
            (0..c_out).any(|co| g[(b * c_out + co) * plane + q] != T::zero())
        })
        .collect();

    let mut d_w = vec![T::zero(); c_out * k];
    let mut d_b = vec![T::zero(); c_out];
    let mut d_in = need_input_grad.then(|| vec![T::zero(); input.len()]);
    let mut cols = Vec::new();
    let mut gout = Vec::new();
    let mut dcols = Vec::new();
    for block in geo.blocks(&active) {
        let range = geo.as_range(block);
        let n = block.len();
        gout.clear();
        gout.resize(c_out * n, T::zero());
        for co in 0..c_out {
            let dst = &mut gout[co * n..(co + 1) * n];
            for (d, &p) in dst.iter_mut().zip(block) {
                let (b, q) = (p / plane, p % plane);
                *d = g[(b * c_out + co) * plane + q];
            }
            d_b[co] = dst.iter().fold(d_b[co], |acc, &v| acc + v);
        }
        match range {
            Some((b, q0, q1)) => geo.im2col_range(input.data(), b, q0, q1, &mut cols),
            None => geo.im2col(input.data(), block, &mut cols),
        }
        gemm(
            MatRef::row_major(&gout, c_out, n),
            MatRef::transposed(&cols, k, n),
            T::one(),
            &mut d_w,
        );
        if let Some(d_in) = d_in.as_mut() {
            dcols.clear();
            dcols.resize(k * n, T::zero());
            gemm(
                MatRef::transposed(weights.data(), c_out, k),
                MatRef::row_major(&gout, c_out, n),
                T::zero(),
                &mut dcols,
            );
            match range {
                Some((b, q0, q1)) => geo.col2im_range(&dcols, b, q0, q1, d_in),
                None => geo.col2im(&dcols, block, d_in),
            }
        }
    }

    Ok(ConvGrads {
        input: d_in
            .map(|d| Tensor::from_vec(input.shape(), d))
            .transpose()?,
        weights: Tensor::from_vec(weights.shape(), d_w)?,
        bias: spec
            .has_bias
            .then(|| Tensor::from_vec(spec.bias_shape(), d_b))
            .transpose()?,
    })
}
