//! Dense NCHW `f32` tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            bail!(Shape, "tensor of shape {:?} needs {} values, got {}", shape, n, data.len());
        }
        Ok(Self { shape, data })
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

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[f32] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.sample_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped `(c, h, w)` samples into one batch.
    pub fn stack(samples: &[&[f32]], channels: usize, height: usize, width: usize) -> Result<Self> {
        let n = channels * height * width;
        let mut data = Vec::with_capacity(n * samples.len());
        for s in samples {
            if s.len() != n {
                bail!(Shape, "sample has {} values, expected {}", s.len(), n);
            }
            data.extend_from_slice(s);
        }
        Ok(Self { shape: [samples.len(), channels, height, width], data })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Reflect-pads the spatial dims (bottom/right) up to `(height, width)`.
    pub fn reflect_pad(&self, height: usize, width: usize) -> Tensor {
        let [b, c, h, w] = self.shape;
        if h == height && w == width {
            return self.clone();
        }
        let mut out = Tensor::zeros([b, c, height, width]);
        for p in 0..b * c {
            let src = &self.data[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data[p * height * width..(p + 1) * height * width];
            for y in 0..height {
                let sy = reflect_index(y, h);
                for x in 0..width {
                    dst[y * width + x] = src[sy * w + reflect_index(x, w)];
                }
            }
        }
        out
    }

    /// Crops the top-left `(height, width)` window.
    pub fn crop(&self, height: usize, width: usize) -> Tensor {
        let [b, c, h, w] = self.shape;
        if h == height && w == width {
            return self.clone();
        }
        let mut out = Tensor::zeros([b, c, height, width]);
        for p in 0..b * c {
            for y in 0..height {
                let src = &self.data[p * h * w + y * w..p * h * w + y * w + width];
                out.data[p * height * width + y * width..p * height * width + (y + 1) * width]
                    .copy_from_slice(src);
            }
        }
        out
    }

    /// Adjoint of [`Tensor::crop`]: embeds into a zero tensor of the larger size.
    pub fn uncrop(&self, height: usize, width: usize) -> Tensor {
        let [b, c, h, w] = self.shape;
        if h == height && w == width {
            return self.clone();
        }
        let mut out = Tensor::zeros([b, c, height, width]);
        for p in 0..b * c {
            for y in 0..h {
                out.data[p * height * width + y * width..p * height * width + y * width + w]
                    .copy_from_slice(&self.data[p * h * w + y * w..p * h * w + (y + 1) * w]);
            }
        }
        out
    }
}

/// Mirror index without repeating the edge sample (numpy "reflect").
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}
