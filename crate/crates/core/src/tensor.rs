//! Dense storage tensors.
//!
//! [`Tensor`] is the interchange type: row-major, channel-last `f32`, matching
//! the on-disk container byte for byte. Heavy numeric paths convert to the
//! `f64` [`crate::nn::Volume`] at their boundary and back.

use crate::error::{Error, Result};
use crate::parallel;

/// Row-major, channel-last `h x w x c` tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("dimensions must be positive, got {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::LengthMismatch { expected: h * w * c, found: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }
}

/// Non-negative 2-D scalar field; its sum is the density-based count.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl DensityMap {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("dimensions must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::LengthMismatch { expected: h * w, found: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("density map"));
        }
        if data.iter().any(|&v| v < 0.0) {
            return Err(Error::Scene("density map has negative values".into()));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.w + x] = v;
    }

    /// Density-based count: the full sum, accumulated in f64 in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().cloned().fold(0.0, f32::max)
    }
}

/// Source coordinate for corner-aligned resampling: index 0 maps to 0 and
/// index `out_n - 1` maps to `in_n - 1`.
#[inline]
fn corner_aligned_coord(i: usize, in_n: usize, out_n: usize) -> f64 {
    if out_n <= 1 {
        0.0
    } else {
        i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
    }
}

/// Linear interpolation in the `a + t*(b-a)` form, which is exact when
/// `a == b` and when `t == 0`.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Corner-aligned bilinear resampling; channels are preserved.
///
/// An identity resize returns the input bit for bit, and constant inputs stay
/// exactly constant.
pub fn bilinear_resample(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resample target dimensions must be positive".into()));
    }
    let (in_h, in_w, c) = t.shape();
    let mut out = Tensor::zeros(out_h, out_w, c);
    let row_len = out_w * c;
    parallel::for_each_row(out.data_mut(), row_len, |y, row| {
        let sy = corner_aligned_coord(y, in_h, out_h);
        let y0 = (sy.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = (sy - y0 as f64) as f32;
        for x in 0..out_w {
            let sx = corner_aligned_coord(x, in_w, out_w);
            let x0 = (sx.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ch in 0..c {
                let v00 = t.get(y0, x0, ch);
                let v01 = t.get(y0, x1, ch);
                let v10 = t.get(y1, x0, ch);
                let v11 = t.get(y1, x1, ch);
                let top = lerp(v00, v01, fx);
                let bot = lerp(v10, v11, fx);
                row[x * c + ch] = lerp(top, bot, fy);
            }
        }
    });
    Ok(out)
}

/// Bilinear resampling of a density map with exact mass preservation: the
/// resampled field is rescaled so its sum matches the input's.
pub fn resample_density_mass_preserving(g: &DensityMap, out_h: usize, out_w: usize) -> Result<DensityMap> {
    let as_tensor = Tensor::new(g.height(), g.width(), 1, g.data().to_vec())?;
    let resized = bilinear_resample(&as_tensor, out_h, out_w)?;
    let mut data = resized.data().to_vec();
    // Bilinear output of a non-negative field stays non-negative; clamp only
    // to absorb -0.0 style artifacts.
    for v in &mut data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let old_sum = g.sum();
    let new_sum: f64 = data.iter().map(|&v| v as f64).sum();
    if new_sum > 0.0 {
        let k = (old_sum / new_sum) as f32;
        for v in &mut data {
            *v *= k;
        }
    }
    DensityMap::new(out_h, out_w, data)
}
