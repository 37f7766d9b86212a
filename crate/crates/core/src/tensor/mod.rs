//! Dense row-major tensors and the reverse-mode tape built on them.
//!
//! Everything is generic over [`Scalar`] so the same network code runs in
//! `f32` for training and adaptation and in `f64` for gradient checks.
//!
//! Reductions always accumulate in a fixed order: sequentially over the
//! reduced index in row-major order. Within one build, identical inputs give
//! bit-identical outputs.

mod kernels;
mod tape;

pub use kernels::Padding;
pub use tape::{backward, Gradients, NodeId, Tape, PROB_EPS};

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized axis in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} elements but data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// In-place access, reserved for parameter updates between tape lifetimes.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sequential sum in storage order.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn max_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    pub fn min_value(&self) -> T {
        self.data
            .iter()
            .copied()
            .fold(T::infinity(), |a, b| if b < a { b } else { a })
    }

    /// Bitwise equality, including the sign of zero and NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl Tensor<f32> {
    pub fn to_bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

// Free-standing operations used outside any tape (inference paths, tests).

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    kernels::conv2d_forward(input, kernel, bias, padding)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    kernels::relu(input)
}

pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::maxpool2_forward(input).map(|(t, _)| t)
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::global_avg_pool(input)
}

pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::global_max_pool_forward(input).map(|(t, _)| t)
}

pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    kernels::concat_channels(inputs)
}

pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::linear_forward(input, weight, bias)
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(kernels::sigmoid_scalar)
}

pub fn log_softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    kernels::log_softmax(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn relu_clips_negatives() {
        let t = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let t = Tensor::scalar(0.0f64);
        assert_eq!(sigmoid(&t).data(), &[0.5]);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let t = Tensor::new(vec![2], vec![-1e6f32, 1e6]).unwrap();
        let s = sigmoid(&t);
        assert!(s.all_finite());
        assert!(s.data()[0] > 0.0 && s.data()[0] < 1e-12);
        assert_eq!(s.data()[1], 1.0);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool2(&t).unwrap();
        assert_eq!(p.shape(), &[1, 1, 1, 1]);
        assert_eq!(p.data(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let t = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2(&t), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_valid_sums_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_same_padding() {
        let x = Tensor::from_fn(&[1, 2, 5, 6], |i| (i as f32 * 0.37).sin());
        let mut k = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        // out channel c copies in channel c
        k.data_mut()[4] = 1.0;
        k.data_mut()[3 * 9 + 4] = 1.0;
        let b = Tensor::zeros(&[2]);
        let y = conv2d(&x, &k, &b, Padding::Same).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let err = conv2d(&x, &k, &b, Padding::Same).unwrap_err();
        assert!(err.to_string().contains("Cin"), "{err}");
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &k, &b, Padding::Same).is_err());
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let x = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let y = log_softmax(&x).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
