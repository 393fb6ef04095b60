//! Dense NCHW tensors and the scalar trait the numeric kernels are generic over.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. Training runs in `f32`; gradient checks run in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand {what} out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Row-major `c = a * b + beta * c`, with optional transposition of either operand.
///
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), `b` as `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(
        m,
        k,
        n,
        T::one(),
        a,
        a_strides,
        b,
        b_strides,
        beta,
        c,
        (n as isize, 1),
    );
}

/// Batch x channel x height x width dense array, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// Builds a tensor, checking that all dims are positive, the length matches and values are finite.
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("all dims must be positive, got {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape:?} ({len})",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_raw(shape: [usize; 4], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::from_raw(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self::from_raw(shape, vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    for x in 0..shape[3] {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self::from_raw(shape, data)
    }

    /// Stacks single images (each `c*h*w` long) into a batch.
    pub fn stack(images: &[&[T]], chw: [usize; 3]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::shape("cannot stack an empty list of images"));
        }
        let per: usize = chw.iter().product();
        let mut data = Vec::with_capacity(per * images.len());
        for (i, img) in images.iter().enumerate() {
            if img.len() != per {
                return Err(Error::shape(format!(
                    "image {i} has {} values, expected {per}",
                    img.len()
                )));
            }
            data.extend_from_slice(img);
        }
        Self::new([images.len(), chw[0], chw[1], chw[2]], data)
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    pub fn image(&self, n: usize) -> &[T] {
        let len = self.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Concatenates along the batch axis.
    pub fn concat(parts: &[&Tensor4<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot concatenate zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self::from_raw([n, c, h, w], data))
    }

    /// Gathers the listed batch entries, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::shape("cannot select zero images"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.batch() {
                return Err(Error::invalid(format!(
                    "batch index {i} out of range for batch of {}",
                    self.batch()
                )));
            }
            data.extend_from_slice(self.image(i));
        }
        let [_, c, h, w] = self.shape;
        Ok(Self::from_raw([indices.len(), c, h, w], data))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4::from_raw(
            self.shape,
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// Sum of elementwise products, accumulated in f64.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "dot of mismatched shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor4::<f32>::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor4::<f32>::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor4::<f32>::new([1, 1, 1, 1], vec![f32::NAN]).is_err());
        assert!(Tensor4::<f32>::new([1, 1, 1, 1], vec![1.0]).is_ok());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor4::<f32>::from_fn([2, 3, 4, 5], |[n, c, y, x]| {
            (n * 1000 + c * 100 + y * 10 + x) as f32
        });
        assert_eq!(t.get(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.offset(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.image(1)[0], 1000.0);
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        matmul(false, false, m, k, n, &a, &b, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a^T stored as k x m
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        matmul(true, false, m, k, n, &at, &b, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn select_and_concat() {
        let t = Tensor4::<f32>::from_fn([3, 1, 1, 2], |[n, _, _, x]| (n * 2 + x) as f32);
        let s = t.select(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0]);
        let c = Tensor4::concat(&[&s, &t]).unwrap();
        assert_eq!(c.batch(), 5);
        assert!(t.select(&[3]).is_err());
    }
}
