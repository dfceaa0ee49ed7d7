//! Group and batch normalization with full backward passes.

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Returns the largest group count `<= min(8, c)` that divides `c`.
pub fn group_count(c: usize) -> usize {
    let cap = c.min(8);
    (1..=cap).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Per-sample normalization over channel groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl GroupNorm {
    pub fn identity(c: usize) -> Self {
        Self { groups: group_count(c), gamma: vec![1.0; c], beta: vec![0.0; c], eps: NORM_EPS }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Saved forward state for [`group_norm_backward`].
pub struct GroupNormCache {
    normalized: Volume,
    inv_std: Vec<f64>,
}

pub fn group_norm(input: &Volume, gn: &GroupNorm) -> Result<(Volume, GroupNormCache)> {
    let c = gn.channels();
    if input.c != c {
        return Err(Error::DimMismatch(format!("group norm expects {c} channels, got {}", input.c)));
    }
    if gn.groups == 0 || c % gn.groups != 0 {
        return Err(Error::Config(format!("group count {} must divide channels {c}", gn.groups)));
    }
    let per = c / gn.groups;
    let n = (input.h * input.w * per) as f64;
    let mut normalized = Volume::zeros(input.h, input.w, c);
    let mut inv_std = vec![0.0; gn.groups];
    for g in 0..gn.groups {
        let chs = g * per..(g + 1) * per;
        let mut mean = 0.0;
        for y in 0..input.h {
            for x in 0..input.w {
                for ch in chs.clone() {
                    mean += input.get(y, x, ch);
                }
            }
        }
        mean /= n;
        let mut var = 0.0;
        for y in 0..input.h {
            for x in 0..input.w {
                for ch in chs.clone() {
                    let d = input.get(y, x, ch) - mean;
                    var += d * d;
                }
            }
        }
        var /= n;
        let inv = 1.0 / (var + gn.eps).sqrt();
        inv_std[g] = inv;
        for y in 0..input.h {
            for x in 0..input.w {
                for ch in chs.clone() {
                    normalized.set(y, x, ch, (input.get(y, x, ch) - mean) * inv);
                }
            }
        }
    }
    let mut out = Volume::zeros(input.h, input.w, c);
    for y in 0..input.h {
        for x in 0..input.w {
            for ch in 0..c {
                out.set(y, x, ch, gn.gamma[ch] * normalized.get(y, x, ch) + gn.beta[ch]);
            }
        }
    }
    Ok((out, GroupNormCache { normalized, inv_std }))
}

/// Gradients w.r.t. the input, gamma and beta.
pub fn group_norm_backward(
    gn: &GroupNorm,
    cache: &GroupNormCache,
    grad_out: &Volume,
) -> (Volume, Vec<f64>, Vec<f64>) {
    let c = gn.channels();
    let per = c / gn.groups;
    let xh = &cache.normalized;
    let n = (xh.h * xh.w * per) as f64;

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for y in 0..xh.h {
        for x in 0..xh.w {
            for ch in 0..c {
                let go = grad_out.get(y, x, ch);
                d_gamma[ch] += go * xh.get(y, x, ch);
                d_beta[ch] += go;
            }
        }
    }

    let mut grad_in = Volume::zeros(xh.h, xh.w, c);
    for g in 0..gn.groups {
        let chs = g * per..(g + 1) * per;
        // dxh = grad_out * gamma; reduce its sum and its dot with xh.
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for y in 0..xh.h {
            for x in 0..xh.w {
                for ch in chs.clone() {
                    let dxh = grad_out.get(y, x, ch) * gn.gamma[ch];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh.get(y, x, ch);
                }
            }
        }
        let inv = cache.inv_std[g];
        for y in 0..xh.h {
            for x in 0..xh.w {
                for ch in chs.clone() {
                    let dxh = grad_out.get(y, x, ch) * gn.gamma[ch];
                    let v = inv / n * (n * dxh - sum_dxh - xh.get(y, x, ch) * sum_dxh_xh);
                    grad_in.set(y, x, ch, v);
                }
            }
        }
    }
    (grad_in, d_gamma, d_beta)
}

/// Batch normalization over a set of volumes (per channel, across batch and
/// spatial positions). Running statistics are used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: NORM_EPS,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.running_var.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Config("batch norm variance must be positive".into()));
        }
        Ok(())
    }
}

/// Inference-mode batch norm on a single volume using running statistics.
pub fn batch_norm_infer(input: &Volume, bn: &BatchNorm) -> Result<Volume> {
    let c = bn.channels();
    if input.c != c {
        return Err(Error::DimMismatch(format!("batch norm expects {c} channels, got {}", input.c)));
    }
    bn.validate()?;
    let mut out = Volume::zeros(input.h, input.w, c);
    for y in 0..input.h {
        for x in 0..input.w {
            for ch in 0..c {
                let inv = 1.0 / (bn.running_var[ch] + bn.eps).sqrt();
                let v = (input.get(y, x, ch) - bn.running_mean[ch]) * inv;
                out.set(y, x, ch, bn.gamma[ch] * v + bn.beta[ch]);
            }
        }
    }
    Ok(out)
}

/// Saved forward state for [`batch_norm_train_backward`].
pub struct BatchNormCache {
    normalized: Vec<Volume>,
    inv_std: Vec<f64>,
}

/// Training-mode batch norm over a mini-batch; updates running statistics in
/// place with the configured momentum.
pub fn batch_norm_train(inputs: &[Volume], bn: &mut BatchNorm) -> Result<(Vec<Volume>, BatchNormCache)> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = bn.channels();
    for v in inputs {
        if v.c != c {
            return Err(Error::DimMismatch("batch norm channel mismatch".into()));
        }
    }
    let n: usize = inputs.iter().map(|v| v.h * v.w).sum();
    let nf = n as f64;
    let mut mean = vec![0.0; c];
    for v in inputs {
        for i in 0..v.h * v.w {
            for ch in 0..c {
                mean[ch] += v.data[i * c + ch];
            }
        }
    }
    for m in &mut mean {
        *m /= nf;
    }
    let mut var = vec![0.0; c];
    for v in inputs {
        for i in 0..v.h * v.w {
            for ch in 0..c {
                let d = v.data[i * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= nf;
    }
    for ch in 0..c {
        bn.running_mean[ch] = (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean[ch];
        bn.running_var[ch] = (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * var[ch];
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut normalized = Vec::with_capacity(inputs.len());
    let mut outs = Vec::with_capacity(inputs.len());
    for v in inputs {
        let mut xh = Volume::zeros(v.h, v.w, c);
        let mut out = Volume::zeros(v.h, v.w, c);
        for i in 0..v.h * v.w {
            for ch in 0..c {
                let z = (v.data[i * c + ch] - mean[ch]) * inv_std[ch];
                xh.data[i * c + ch] = z;
                out.data[i * c + ch] = bn.gamma[ch] * z + bn.beta[ch];
            }
        }
        normalized.push(xh);
        outs.push(out);
    }
    Ok((outs, BatchNormCache { normalized, inv_std }))
}

/// Gradients w.r.t. every input in the batch, gamma and beta.
pub fn batch_norm_train_backward(
    bn: &BatchNorm,
    cache: &BatchNormCache,
    grad_outs: &[Volume],
) -> (Vec<Volume>, Vec<f64>, Vec<f64>) {
    let c = bn.channels();
    let n: usize = cache.normalized.iter().map(|v| v.h * v.w).sum();
    let nf = n as f64;
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut sum_dxh = vec![0.0; c];
    let mut sum_dxh_xh = vec![0.0; c];
    for (xh, go) in cache.normalized.iter().zip(grad_outs) {
        for i in 0..xh.h * xh.w {
            for ch in 0..c {
                let g = go.data[i * c + ch];
                let z = xh.data[i * c + ch];
                d_gamma[ch] += g * z;
                d_beta[ch] += g;
                let dxh = g * bn.gamma[ch];
                sum_dxh[ch] += dxh;
                sum_dxh_xh[ch] += dxh * z;
            }
        }
    }
    let mut grads = Vec::with_capacity(grad_outs.len());
    for (xh, go) in cache.normalized.iter().zip(grad_outs) {
        let mut gi = Volume::zeros(xh.h, xh.w, c);
        for i in 0..xh.h * xh.w {
            for ch in 0..c {
                let dxh = go.data[i * c + ch] * bn.gamma[ch];
                let z = xh.data[i * c + ch];
                gi.data[i * c + ch] =
                    cache.inv_std[ch] / nf * (nf * dxh - sum_dxh[ch] - z * sum_dxh_xh[ch]);
            }
        }
        grads.push(gi);
    }
    (grads, d_gamma, d_beta)
}
