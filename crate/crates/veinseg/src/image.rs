//! 8-bit grayscale images and binary masks, row-major.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} expects {} bytes, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// As a `1 x 1 x H x W` network input scaled to `[0, 1]`.
    pub fn to_input_tensor<T: Element>(&self) -> Tensor<T> {
        let scale = T::from_f64(1.0 / 255.0);
        Tensor::from_fn(vec![1, 1, self.height, self.width], |i| {
            T::from_f64(self.data[i] as f64) * scale
        })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Binary mask; values are exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask {width}x{height} expects {} values, got {}",
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(BinMask {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[y * self.width + x] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.foreground_count() == 0
    }

    /// As a `1 x H x W` loss target (0.0 / 1.0).
    pub fn to_target_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(vec![1, self.height, self.width], |i| {
            T::from_f64(self.data[i] as f64)
        })
    }

    /// Mean of foreground x and y coordinates, `(x_c, y_c)`.
    /// Errors on an empty mask.
    pub fn centroid(&self) -> Result<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0f64, 0.0f64);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == 1 {
                    n += 1;
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptyMask);
        }
        Ok((sx / n as f64, sy / n as f64))
    }
}
