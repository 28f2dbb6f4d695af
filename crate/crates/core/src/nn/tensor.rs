use super::Real;
use crate::error::{Error, Result};

/// Dense `N × C × D × H × W` block stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: [usize; 5], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// All channels of sample `n`, contiguous `C × V`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape[1] * self.voxels();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape[1] * self.voxels();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let off = (n * self.shape[1] + c) * v;
        &self.data[off..off + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let off = (n * self.shape[1] + c) * v;
        &mut self.data[off..off + v]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "tensor add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates two tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert_eq!(a.batch(), b.batch());
        assert_eq!(a.spatial(), b.spatial(), "concat spatial mismatch");
        let [n, ca, d, h, w] = a.shape;
        let cb = b.channels();
        let mut out = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            out.extend_from_slice(a.sample(i));
            out.extend_from_slice(b.sample(i));
        }
        Tensor {
            shape: [n, ca + cb, d, h, w],
            data: out,
        }
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let [n, c, d, h, w] = self.shape;
        assert!(first <= c);
        let v = self.voxels();
        let mut a = Vec::with_capacity(n * first * v);
        let mut b = Vec::with_capacity(n * (c - first) * v);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..first * v]);
            b.extend_from_slice(&s[first * v..]);
        }
        (
            Tensor {
                shape: [n, first, d, h, w],
                data: a,
            },
            Tensor {
                shape: [n, c - first, d, h, w],
                data: b,
            },
        )
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }
}
