//! Dense row-major f32 arrays.
//!
//! Arrays are immutable once constructed; cloning shares the underlying
//! buffer, which makes them safe to hand to concurrent sampling chains.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Array {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not cover {} elements",
            shape,
            data.len()
        );
        Array {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f32) -> Self {
        Array::from_vec(vec![1], vec![v])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array::from_vec(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn fill(shape: &[usize], v: f32) -> Self {
        Array::from_vec(shape.to_vec(), vec![v; shape.iter().product()])
    }

    /// Standard-normal array from the given rng stream.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(StandardNormal.sample(rng));
        }
        Array::from_vec(shape.to_vec(), data)
    }

    /// Uniform on [-bound, bound], the fan-in scaled init used for weights.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(rng.random_range(-bound..=bound));
        }
        Array::from_vec(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// 2-D accessor; callers index [row, col] on a [rows, cols] array.
    pub fn at2(&self, r: usize, c: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Array {
        assert_eq!(shape.iter().product::<usize>(), self.numel());
        Array {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &'static str, name: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                what,
                name: name.to_string(),
            })
        }
    }

    /// Exact bitwise equality (shape and every element).
    pub fn bit_eq(&self, other: &Array) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Array) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `out = a*x + b*y` over matching shapes, the workhorse of the samplers.
pub fn axpby(a: f32, x: &Array, b: f32, y: &Array) -> Array {
    assert_eq!(x.shape(), y.shape());
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(xv, yv)| a * xv + b * yv)
        .collect();
    Array::from_vec(x.shape().to_vec(), data)
}

pub fn scale(a: f32, x: &Array) -> Array {
    Array::from_vec(x.shape().to_vec(), x.data().iter().map(|v| a * v).collect())
}
