use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Binary `H×W` mask stored as one byte (0 or 1) per pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a mask from 0/1 bytes.
    pub fn from_bytes(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}×{width} needs {} bytes, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::config("mask bytes must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    fn zip(&self, other: &Mask, f: impl Fn(u8, u8) -> u8) -> Mask {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a | b)
    }

    /// `self ∧ ¬other`.
    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a & (1 - b))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// `1×H×W` tensor of 0/1 values.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, self.height, self.width],
            self.data.iter().map(|&b| if b != 0 { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask tensor shape")
    }
}
