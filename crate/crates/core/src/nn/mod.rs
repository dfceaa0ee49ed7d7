//! Minimal dense layers with hand-written backward passes.
//!
//! Everything here runs in `f64`: the trainable heads are tiny, and double
//! precision keeps finite-difference gradient checks meaningful. Conversions
//! to and from the `f32` storage [`crate::tensor::Tensor`] happen at module
//! boundaries.

mod act;
mod conv;
mod norm;
mod resample;
mod vecops;

pub use act::{relu, relu_backward, sigmoid_slice, softplus, softplus_backward};
pub use conv::{conv2d, conv2d_backward, conv2d_seq, Conv2d, ConvGrad, Padding};
pub use norm::{
    batch_norm_infer, batch_norm_train, batch_norm_train_backward, group_count, group_norm,
    group_norm_backward, BatchNorm, BatchNormCache, GroupNorm, GroupNormCache, NORM_EPS,
};
pub use resample::{upsample_bilinear, upsample_bilinear_backward};
pub use vecops::{cosine, cosine_grad, l2_normalize, l2_normalize_backward, spatial_mean, spatial_mean_backward};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major, channel-last `h x w x c` activation/parameter grid of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w, c) = t.shape();
        Self { h, w, c, data: t.data().iter().map(|&v| v as f64).collect() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.h, self.w, self.c, self.data.iter().map(|&v| v as f32).collect())
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }

    pub fn same_shape(&self, other: &Volume) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn check_shape(&self, h: usize, w: usize, c: usize, what: &str) -> Result<()> {
        if self.h != h || self.w != w || self.c != c {
            return Err(Error::DimMismatch(format!(
                "{what}: expected {h}x{w}x{c}, got {}x{}x{}",
                self.h, self.w, self.c
            )));
        }
        Ok(())
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Volume) -> Result<Volume> {
        if !self.same_shape(other) {
            return Err(Error::DimMismatch("add: shapes differ".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Volume { h: self.h, w: self.w, c: self.c, data })
    }

    /// Concatenate along the channel axis; spatial dims must match.
    pub fn concat_channels(&self, other: &Volume) -> Result<Volume> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::DimMismatch("concat: spatial dims differ".into()));
        }
        let c = self.c + other.c;
        let mut out = Volume::zeros(self.h, self.w, c);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..self.c {
                    out.set(y, x, ch, self.get(y, x, ch));
                }
                for ch in 0..other.c {
                    out.set(y, x, self.c + ch, other.get(y, x, ch));
                }
            }
        }
        Ok(out)
    }

    /// Split a gradient of a channel concatenation back into both halves.
    pub fn split_channels(&self, c_first: usize) -> (Volume, Volume) {
        assert!(c_first <= self.c);
        let mut a = Volume::zeros(self.h, self.w, c_first);
        let mut b = Volume::zeros(self.h, self.w, self.c - c_first);
        for y in 0..self.h {
            for x in 0..self.w {
                for ch in 0..c_first {
                    a.set(y, x, ch, self.get(y, x, ch));
                }
                for ch in 0..self.c - c_first {
                    b.set(y, x, ch, self.get(y, x, c_first + ch));
                }
            }
        }
        (a, b)
    }
}
