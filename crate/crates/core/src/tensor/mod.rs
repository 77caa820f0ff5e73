//! Dense row-major tensors and a small tape-based reverse-mode autodiff engine.
//!
//! The engine supplies exactly the operations the decoder model needs. Every
//! op is deterministic: reductions run in a fixed order and matrix products go
//! through a single-threaded GEMM, so identical inputs give identical bits.

#[doc(hidden)]
pub mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod rng;
mod tape;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EloError, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{RopeCache, Tape, Var};

pub(crate) use gemm::{gemm, MatView, MatViewMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element type of a tensor.
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const DTYPE: DType;
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    #[doc(hidden)]
    fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        a: gemm::MatView<'_, Self>,
        b: gemm::MatView<'_, Self>,
        beta: Self,
        c: gemm::MatViewMut<'_, Self>,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm_kernel(
                m: usize,
                k: usize,
                n: usize,
                a: gemm::MatView<'_, Self>,
                b: gemm::MatView<'_, Self>,
                beta: Self,
                c: gemm::MatViewMut<'_, Self>,
            ) {
                // SAFETY: `gemm::gemm` validated every view against its slice
                // bounds before dispatching here.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr().add(a.offset),
                        a.rs,
                        a.cs,
                        b.data.as_ptr().add(b.offset),
                        b.rs,
                        b.cs,
                        beta,
                        c.data.as_mut_ptr().add(c.offset),
                        c.rs,
                        c.cs,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Initializer for [`Tensor::create`].
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Explicit(Vec<f64>),
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(EloError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    /// Creates a tensor; `Normal` draws from a ChaCha stream keyed by `seed`.
    pub fn create(shape: &[usize], init: Init, seed: u64) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = match init {
            Init::Zeros => vec![T::ZERO; numel],
            Init::Ones => vec![T::ONE; numel],
            Init::Normal { std } => {
                if !(std > 0.0 && std.is_finite()) {
                    return Err(EloError::Config(format!("normal std must be > 0, got {std}")));
                }
                let normal = Normal::new(0.0, std).expect("validated std");
                let mut rng = rng::stream(seed);
                (0..numel)
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect()
            }
            Init::Explicit(values) => {
                if values.len() != numel {
                    return Err(EloError::shape(format!(
                        "explicit init has {} values for shape {shape:?}",
                        values.len()
                    )));
                }
                values.into_iter().map(T::from_f64).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Like [`Tensor::create`] but keyed by `(seed, name)` so the bytes do
    /// not depend on construction order.
    pub fn named(shape: &[usize], init: Init, seed: u64, name: &str) -> Result<Self> {
        Self::create(shape, init, rng::named_seed(seed, name))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Init::Zeros, 0)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(EloError::shape(format!(
                "buffer of {} elements does not fit shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.data.len() {
            return Err(EloError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Plain (untracked) matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = as_matrix(self)?;
        let (k2, n) = as_matrix(other)?;
        if k != k2 {
            return Err(EloError::shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![T::ZERO; m * n];
        gemm(
            m,
            k,
            n,
            MatView::row_major(&self.data, k),
            MatView::row_major(&other.data, n),
            T::ZERO,
            MatViewMut::row_major(&mut out, n),
        );
        Tensor::from_vec(&[m, n], out)
    }
}

pub(crate) fn as_matrix<T>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [m, n] => Ok((*m, *n)),
        other => Err(EloError::shape(format!("expected a 2-D tensor, got {other:?}"))),
    }
}

/// Row-wise softmax with max subtraction, on plain data.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        softmax_in_place(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::NEG_INFINITY, T::max);
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `y = x / sqrt(mean(x^2) + eps) * gain` along the last axis, on plain data.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.shape != [d] {
        return Err(EloError::shape(format!(
            "rms_norm gain {:?} does not match last dim {d}",
            gain.shape
        )));
    }
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let inv = rms_inverse(row, eps);
        for (v, g) in row.iter_mut().zip(&gain.data) {
            *v = *v * inv * *g;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

pub(crate) fn rms_inverse<T: Scalar>(row: &[T], eps: f64) -> T {
    let ms: T = row.iter().map(|&v| v * v).sum::<T>() / T::from_f64(row.len() as f64);
    T::ONE / (ms + T::from_f64(eps)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_zeros_and_ones() {
        let z = Tensor::<f32>::create(&[2, 2], Init::Zeros, 0).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let o = Tensor::<f32>::create(&[3], Init::Ones, 0).unwrap();
        assert_eq!(o.data(), &[1.0; 3]);
    }

    #[test]
    fn normal_init_is_deterministic() {
        let a = Tensor::<f32>::create(&[4], Init::Normal { std: 0.02 }, 7).unwrap();
        let b = Tensor::<f32>::create(&[4], Init::Normal { std: 0.02 }, 7).unwrap();
        assert_eq!(a, b);
        let c = Tensor::<f32>::create(&[4], Init::Normal { std: 0.02 }, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn named_init_depends_on_name() {
        let a = Tensor::<f32>::named(&[8], Init::Normal { std: 1.0 }, 1, "layer.1.attn.q").unwrap();
        let b = Tensor::<f32>::named(&[8], Init::Normal { std: 1.0 }, 1, "layer.2.attn.q").unwrap();
        assert_ne!(a, b);
        let a2 = Tensor::<f32>::named(&[8], Init::Normal { std: 1.0 }, 1, "layer.1.attn.q").unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn bad_shapes_rejected() {
        assert!(matches!(
            Tensor::<f32>::create(&[2, 0], Init::Zeros, 0),
            Err(EloError::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::create(&[], Init::Zeros, 0),
            Err(EloError::InvalidShape(_))
        ));
        assert!(Tensor::<f32>::create(&[2], Init::Normal { std: 0.0 }, 0).is_err());
    }

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        let oracle = triple_loop(a.data(), b.data(), 2, 2, 2);
        assert_eq!(oracle, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(c.data(), oracle.as_slice());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::<f64>::create(&[3, 3], Init::Normal { std: 1.0 }, 3).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let eye = Tensor::from_vec(&[3, 3], eye).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
        let z = Tensor::<f64>::zeros(&[3, 3]).unwrap();
        assert_eq!(a.matmul(&z).unwrap().data(), &[0.0; 9]);
        let bad = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&bad), Err(EloError::Shape(_))));
    }

    #[test]
    fn matmul_rectangular_matches_oracle() {
        let a = Tensor::<f64>::create(&[5, 7], Init::Normal { std: 1.0 }, 1).unwrap();
        let b = Tensor::<f64>::create(&[7, 3], Init::Normal { std: 1.0 }, 2).unwrap();
        let c = a.matmul(&b).unwrap();
        let oracle = triple_loop(a.data(), b.data(), 5, 7, 3);
        for (x, y) in c.data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let x = Tensor::<f64>::from_vec(&[1, 4], vec![0.0; 4]).unwrap();
        assert_eq!(softmax_rows(&x).data(), &[0.25; 4]);

        let x = Tensor::<f64>::from_vec(&[1, 3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let y = softmax_rows(&x);
        for (got, want) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_closed_forms() {
        let gain = Tensor::<f64>::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let x = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let y = rms_norm(&x, &gain, 0.0).unwrap();
        let s = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / s).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / s).abs() < 1e-12);
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);

        let ones = Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 4]).unwrap();
        let y = rms_norm(&ones, &gain, 1e-12).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let zeros = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert_eq!(rms_norm(&zeros, &gain, 1e-6).unwrap().data(), &[0.0; 4]);
    }
}
