//! Dense 4-D tensors in `(batch, channels, height, width)` row-major layout.
//!
//! Every activation and parameter in the two networks lives in a [`Tensor`].
//! The scalar type is generic so the same layer code runs in single precision
//! for training and in double precision for gradient checks.

use std::fmt::Debug;
use std::io::{Read, Write};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element of a tensor: `f32` for training and inference, `f64` for checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` over raw strided buffers.
    ///
    /// # Safety
    /// All pointers must be valid for the extents implied by the dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Matrix operand: a slice viewed as `rows x cols` with explicit strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `out (m x n, row-major) = beta * out + a * b`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimensions differ");
    assert!(a.extent() <= a.data.len() && b.extent() <= b.data.len());
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents were checked against the slice lengths above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Scalar width used for a computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Precision {
    /// Single precision, used for training and inference.
    #[default]
    Standard,
    /// Double precision, used for finite-difference gradient checks.
    HighPrecisionCheck,
}

impl Precision {
    pub fn scalar_bytes(self) -> usize {
        match self {
            Precision::Standard => std::mem::size_of::<f32>(),
            Precision::HighPrecisionCheck => std::mem::size_of::<f64>(),
        }
    }
}

/// Extent of a 4-D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Elements in one `(height, width)` plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::shape(format!(
                "zero-sized dimension in {self}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

/// Binary elementwise and unary kernels exposed through [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    MulScalar(f64),
    MaxWithZero,
}

/// Dense `(batch, channels, height, width)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Result<Self> {
        shape.validate()?;
        Ok(Self {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "{} elements supplied for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// I.i.d. normal samples, deterministic for a fixed seed.
    pub fn gaussian_init(shape: Shape, mean: f64, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::gaussian_with(shape, mean, std, &mut rng)
    }

    pub fn gaussian_with<R: Rng + ?Sized>(
        shape: Shape,
        mean: f64,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!("gaussian std must be > 0, got {std}")));
        }
        let normal = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..shape.numel())
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + h) * self.shape.width + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.offset(b, c, h, w);
        self.data[i] = value;
    }

    /// Same elements, new extent.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    /// Copy of batch item `b` as a batch-of-one tensor.
    pub fn batch_item(&self, b: usize) -> Tensor<T> {
        let n = self.shape.channels * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.channels, self.shape.height, self.shape.width),
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Stacks batch-of-one tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if (t.shape.channels, t.shape.height, t.shape.width) != (s.channels, s.height, s.width)
            {
                return Err(Error::shape(format!(
                    "cannot stack {} with {}",
                    t.shape, s
                )));
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(batch, s.channels, s.height, s.width), data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        self.map(|x| x * s)
    }

    pub fn max_with_zero(&self) -> Tensor<T> {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    /// Writes the `TSR1` snapshot: magic, little-endian `u32` rank, `u32` dims, `f32` payload.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&4u32.to_le_bytes())?;
        for d in self.shape.dims() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &x in &self.data {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads a `TSR1` snapshot. Ranks below 4 are left-padded with unit dimensions.
    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Format(format!(
                "bad tensor magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("unsupported tensor rank {rank}")));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().skip(4 - rank) {
            *d = read_u32(r)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        shape.validate()?;
        let mut payload = vec![0u8; shape.numel() * 4];
        read_exact(r, &mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Ok(Self { shape, data })
    }
}

/// Dispatches one of the [`ElementwiseOp`] kernels; binary ops require `b`.
pub fn elementwise<T: Scalar>(
    op: ElementwiseOp,
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let rhs = || b.ok_or_else(|| Error::invalid(format!("{op:?} needs a second operand")));
    match op {
        ElementwiseOp::Add => a.add(rhs()?),
        ElementwiseOp::Sub => a.sub(rhs()?),
        ElementwiseOp::MulScalar(s) => Ok(a.mul_scalar(T::of(s))),
        ElementwiseOp::MaxWithZero => Ok(a.max_with_zero()),
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"TSR1";

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor snapshot: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_are_zero() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2)).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn zero_dimension_is_a_shape_error() {
        assert!(matches!(
            Tensor::<f32>::zeros(Shape::new(1, 0, 2, 2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gaussian_mean_within_law_of_large_numbers_bound() {
        let t = Tensor::<f64>::gaussian_init(Shape::new(1, 1, 10000, 1), 0.0, 0.01, 7).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        assert!(mean.abs() < 3.0 * 0.01 / 100.0, "mean {mean}");
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.01).abs() < 0.05 * 0.01);
    }

    #[test]
    fn gaussian_is_deterministic() {
        let s = Shape::new(2, 3, 4, 5);
        let a = Tensor::<f32>::gaussian_init(s, 0.0, 1.0, 99).unwrap();
        let b = Tensor::<f32>::gaussian_init(s, 0.0, 1.0, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_rejects_nonpositive_std() {
        assert!(Tensor::<f32>::gaussian_init(Shape::new(1, 1, 1, 1), 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn elementwise_kernels() {
        let x = Tensor::<f32>::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let r = elementwise(ElementwiseOp::MaxWithZero, &x, None).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let z = Tensor::zeros(x.shape()).unwrap();
        assert_eq!(elementwise(ElementwiseOp::Add, &x, Some(&z)).unwrap(), x);
        let other = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 1)).unwrap();
        assert!(x.add(&other).is_err());
        assert!(elementwise(ElementwiseOp::Sub, &x, None).is_err());
    }

    #[test]
    fn truncated_snapshot_is_an_error() {
        let t = Tensor::<f32>::full(Shape::new(1, 2, 3, 4), 1.5).unwrap();
        let mut buf = Vec::new();
        t.write_snapshot(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::<f32>::read_snapshot(&mut buf.as_slice()).is_err());
        assert!(Tensor::<f32>::read_snapshot(&mut &b"NOPE"[..]).is_err());
    }

    #[test]
    fn lower_rank_snapshot_is_padded() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TSR1");
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        for i in 0..6 {
            buf.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let t = Tensor::<f32>::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 1, 2, 3));
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
    }

    fn small_tensor() -> impl Strategy<Value = Tensor<f32>> {
        (1usize..3, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(b, c, h, w)| {
            proptest::collection::vec(-1e6f32..1e6, b * c * h * w).prop_map(move |data| {
                Tensor::from_vec(Shape::new(b, c, h, w), data).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn snapshot_round_trip_is_bit_exact(t in small_tensor()) {
            let mut buf = Vec::new();
            t.write_snapshot(&mut buf).unwrap();
            let back = Tensor::<f32>::read_snapshot(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn reshape_round_trip_preserves_elements(t in small_tensor()) {
            let s = t.shape();
            let flat = t.reshape(Shape::new(1, 1, 1, s.numel())).unwrap();
            prop_assert_eq!(flat.reshape(s).unwrap(), t);
        }

        #[test]
        fn mul_scalar_two_equals_self_add(t in small_tensor()) {
            let input = t.clone();
            prop_assert_eq!(t.mul_scalar(2.0), t.add(&t).unwrap());
            prop_assert_eq!(t, input);
        }
    }
}
