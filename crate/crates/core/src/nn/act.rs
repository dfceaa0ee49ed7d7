//! Pointwise activations.

use super::Volume;

pub fn relu(input: &Volume) -> Volume {
    let data = input.data.iter().map(|&v| v.max(0.0)).collect();
    Volume { h: input.h, w: input.w, c: input.c, data }
}

/// Backward through ReLU given the forward *input*.
pub fn relu_backward(input: &Volume, grad_out: &Volume) -> Volume {
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Volume { h: input.h, w: input.w, c: input.c, data }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_slice(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| sigmoid(x)).collect()
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus(input: &Volume) -> Volume {
    let data = input.data.iter().map(|&v| softplus_scalar(v)).collect();
    Volume { h: input.h, w: input.w, c: input.c, data }
}

/// Backward through softplus given the forward input; d/dx = sigmoid(x).
pub fn softplus_backward(input: &Volume, grad_out: &Volume) -> Volume {
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| g * sigmoid(x))
        .collect();
    Volume { h: input.h, w: input.w, c: input.c, data }
}
