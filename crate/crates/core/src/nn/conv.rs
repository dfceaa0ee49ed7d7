//! Stride-1 2-D convolution with same-size output.

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::SplitMix64;

/// Border handling. Zero padding is the normal inference/training mode;
/// circular padding exists to expose exact translation equivariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Circular,
}

/// Convolution parameters. Weight layout is `[ky][kx][c_in][c_out]`,
/// flattened row-major; bias is per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradients for one [`Conv2d`], same layouts as the parameters.
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(kh: usize, kw: usize, c_in: usize, c_out: usize) -> Self {
        Self { kh, kw, c_in, c_out, weight: vec![0.0; kh * kw * c_in * c_out], bias: vec![0.0; c_out] }
    }

    /// Glorot-uniform initialization: `U(-a, a)` with
    /// `a = sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn glorot(kh: usize, kw: usize, c_in: usize, c_out: usize, rng: &mut SplitMix64) -> Self {
        let fan_in = (kh * kw * c_in) as f64;
        let fan_out = (kh * kw * c_out) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        let weight = (0..kh * kw * c_in * c_out).map(|_| rng.range_f64(-a, a)).collect();
        Self { kh, kw, c_in, c_out, weight, bias: vec![0.0; c_out] }
    }

    #[inline]
    pub fn widx(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * self.kw + kx) * self.c_in + ci) * self.c_out + co
    }

    pub fn grad_zeros(&self) -> ConvGrad {
        ConvGrad { weight: vec![0.0; self.weight.len()], bias: vec![0.0; self.bias.len()] }
    }
}

#[inline]
fn pad_index(i: isize, n: usize, pad: Padding) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match pad {
        Padding::Zeros => None,
        Padding::Circular => Some(i.rem_euclid(n as isize) as usize),
    }
}

fn conv2d_rows(input: &Volume, conv: &Conv2d, pad: Padding, out: &mut Volume, sequential: bool) {
    let (h, w) = (input.h, input.w);
    let (kh, kw) = (conv.kh, conv.kw);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let c_in = conv.c_in;
    let c_out = conv.c_out;
    let row_len = w * c_out;
    let kernel = |y: usize, row: &mut [f64]| {
        for x in 0..w {
            let base = x * c_out;
            row[base..base + c_out].copy_from_slice(&conv.bias);
            for ky in 0..kh {
                let iy = match pad_index(y as isize + ky as isize - ph, h, pad) {
                    Some(v) => v,
                    None => continue,
                };
                for kx in 0..kw {
                    let ix = match pad_index(x as isize + kx as isize - pw, w, pad) {
                        Some(v) => v,
                        None => continue,
                    };
                    let in_base = (iy * w + ix) * c_in;
                    let w_base = (ky * kw + kx) * c_in * c_out;
                    for ci in 0..c_in {
                        let v = input.data[in_base + ci];
                        let wrow = &conv.weight[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        for co in 0..c_out {
                            row[base + co] += v * wrow[co];
                        }
                    }
                }
            }
        }
    };
    if sequential {
        parallel::for_each_row_seq(&mut out.data, row_len, kernel);
    } else {
        parallel::for_each_row(&mut out.data, row_len, kernel);
    }
}

/// Same-size convolution; odd kernels only.
pub fn conv2d(input: &Volume, conv: &Conv2d, pad: Padding) -> Result<Volume> {
    check_conv(input, conv)?;
    let mut out = Volume::zeros(input.h, input.w, conv.c_out);
    conv2d_rows(input, conv, pad, &mut out, false);
    Ok(out)
}

/// Sequential variant of [`conv2d`] for benchmarking the parallel speedup.
pub fn conv2d_seq(input: &Volume, conv: &Conv2d, pad: Padding) -> Result<Volume> {
    check_conv(input, conv)?;
    let mut out = Volume::zeros(input.h, input.w, conv.c_out);
    conv2d_rows(input, conv, pad, &mut out, true);
    Ok(out)
}

fn check_conv(input: &Volume, conv: &Conv2d) -> Result<()> {
    if conv.kh % 2 == 0 || conv.kw % 2 == 0 {
        return Err(Error::DimMismatch("conv kernels must be odd".into()));
    }
    if input.c != conv.c_in {
        return Err(Error::DimMismatch(format!(
            "conv input channels {} != expected {}",
            input.c, conv.c_in
        )));
    }
    Ok(())
}

/// Backward pass: gradients w.r.t. the input, weights and bias.
pub fn conv2d_backward(
    input: &Volume,
    conv: &Conv2d,
    pad: Padding,
    grad_out: &Volume,
) -> Result<(Volume, ConvGrad)> {
    check_conv(input, conv)?;
    grad_out.check_shape(input.h, input.w, conv.c_out, "conv grad_out")?;
    let (h, w) = (input.h, input.w);
    let (kh, kw) = (conv.kh, conv.kw);
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let c_in = conv.c_in;
    let c_out = conv.c_out;

    // Input gradient: gather over the output positions each input pixel fed.
    let mut grad_in = Volume::zeros(h, w, c_in);
    let row_len = w * c_in;
    parallel::for_each_row(&mut grad_in.data, row_len, |iy, row| {
        for ix in 0..w {
            for ky in 0..kh {
                // Output row y receives input row iy at kernel row ky when
                // iy == y + ky - ph, i.e. y = iy - ky + ph.
                let oy = iy as isize - ky as isize + ph;
                let oy = match pad_index(oy, h, pad) {
                    Some(v) => v,
                    None => continue,
                };
                for kx in 0..kw {
                    let ox = match pad_index(ix as isize - kx as isize + pw, w, pad) {
                        Some(v) => v,
                        None => continue,
                    };
                    let go_base = (oy * w + ox) * c_out;
                    let w_base = (ky * kw + kx) * c_in * c_out;
                    for ci in 0..c_in {
                        let wrow = &conv.weight[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        let mut acc = 0.0;
                        for co in 0..c_out {
                            acc += wrow[co] * grad_out.data[go_base + co];
                        }
                        row[ix * c_in + ci] += acc;
                    }
                }
            }
        }
    });

    // Weight and bias gradients, accumulated in a fixed order.
    let mut grad = conv.grad_zeros();
    for co in 0..c_out {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                acc += grad_out.data[(y * w + x) * c_out + co];
            }
        }
        grad.bias[co] = acc;
    }
    for ky in 0..kh {
        for kx in 0..kw {
            for y in 0..h {
                let iy = match pad_index(y as isize + ky as isize - ph, h, pad) {
                    Some(v) => v,
                    None => continue,
                };
                for x in 0..w {
                    let ix = match pad_index(x as isize + kx as isize - pw, w, pad) {
                        Some(v) => v,
                        None => continue,
                    };
                    let in_base = (iy * w + ix) * c_in;
                    let go_base = (y * w + x) * c_out;
                    let w_base = (ky * kw + kx) * c_in * c_out;
                    for ci in 0..c_in {
                        let v = input.data[in_base + ci];
                        let wrow = &mut grad.weight[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        for co in 0..c_out {
                            wrow[co] += v * grad_out.data[go_base + co];
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct from-definition convolution used as the test oracle.
    fn conv_reference(input: &Volume, conv: &Conv2d, pad: Padding) -> Volume {
        let mut out = Volume::zeros(input.h, input.w, conv.c_out);
        for y in 0..input.h {
            for x in 0..input.w {
                for co in 0..conv.c_out {
                    let mut acc = conv.bias[co];
                    for ky in 0..conv.kh {
                        for kx in 0..conv.kw {
                            let iy = y as isize + ky as isize - conv.kh as isize / 2;
                            let ix = x as isize + kx as isize - conv.kw as isize / 2;
                            let (iy, ix) = match pad {
                                Padding::Zeros => {
                                    if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                        continue;
                                    }
                                    (iy as usize, ix as usize)
                                }
                                Padding::Circular => (
                                    iy.rem_euclid(input.h as isize) as usize,
                                    ix.rem_euclid(input.w as isize) as usize,
                                ),
                            };
                            for ci in 0..conv.c_in {
                                acc += input.get(iy, ix, ci) * conv.weight[conv.widx(ky, kx, ci, co)];
                            }
                        }
                    }
                    out.set(y, x, co, acc);
                }
            }
        }
        out
    }

    #[test]
    fn matches_reference_on_random_inputs() {
        let mut rng = SplitMix64::new(11);
        for &pad in &[Padding::Zeros, Padding::Circular] {
            for _ in 0..5 {
                let input = Volume::from_fn(9, 7, 3, |_, _, _| rng.range_f64(-1.0, 1.0));
                let conv = Conv2d::glorot(3, 3, 3, 4, &mut rng);
                let got = conv2d(&input, &conv, pad).unwrap();
                let want = conv_reference(&input, &conv, pad);
                for (a, b) in got.data.iter().zip(&want.data) {
                    assert!((a - b).abs() < 1e-12);
                }
                let seq = conv2d_seq(&input, &conv, pad).unwrap();
                assert_eq!(got.data, seq.data);
            }
        }
    }

    #[test]
    fn one_by_one_is_a_per_pixel_matvec() {
        let mut rng = SplitMix64::new(5);
        let input = Volume::from_fn(4, 4, 2, |_, _, _| rng.range_f64(-1.0, 1.0));
        let conv = Conv2d::glorot(1, 1, 2, 3, &mut rng);
        let got = conv2d(&input, &conv, Padding::Zeros).unwrap();
        let want = conv_reference(&input, &conv, Padding::Zeros);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_even_kernels_and_channel_mismatch() {
        let input = Volume::zeros(4, 4, 2);
        assert!(conv2d(&input, &Conv2d::zeros(2, 2, 2, 2), Padding::Zeros).is_err());
        assert!(conv2d(&input, &Conv2d::zeros(3, 3, 3, 2), Padding::Zeros).is_err());
    }
}
