//! Vector reductions used by the verification head.

use super::Volume;
use crate::error::{Error, Result};

/// Mean over the spatial grid, one value per channel.
pub fn spatial_mean(input: &Volume) -> Vec<f64> {
    let n = (input.h * input.w) as f64;
    let mut out = vec![0.0; input.c];
    for i in 0..input.h * input.w {
        for ch in 0..input.c {
            out[ch] += input.data[i * input.c + ch];
        }
    }
    for v in &mut out {
        *v /= n;
    }
    out
}

/// Backward of [`spatial_mean`]: broadcast the per-channel gradient.
pub fn spatial_mean_backward(grad: &[f64], h: usize, w: usize) -> Volume {
    let c = grad.len();
    let n = (h * w) as f64;
    let mut out = Volume::zeros(h, w, c);
    for i in 0..h * w {
        for ch in 0..c {
            out.data[i * c + ch] = grad[ch] / n;
        }
    }
    out
}

/// L2 normalization; errors on (near-)zero input.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Backward of L2 normalization: `(g - z (z . g)) / |x|` where `z = x/|x|`.
pub fn l2_normalize_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let norm = input.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let z: Vec<f64> = input.iter().map(|x| x / norm).collect();
    let dot: f64 = z.iter().zip(grad_out).map(|(a, b)| a * b).sum();
    z.iter().zip(grad_out).map(|(zi, gi)| (gi - zi * dot) / norm).collect()
}

/// Cosine similarity; zero vectors give 0 by convention.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity plus gradients w.r.t. both inputs.
pub fn cosine_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let c = dot / (na * nb);
    // dc/da = (b/|b| - c a/|a|) / |a|
    let da: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| (bi / nb - c * ai / na) / na).collect();
    let db: Vec<f64> = a.iter().zip(b).map(|(ai, bi)| (ai / na - c * bi / nb) / nb).collect();
    (c, da, db)
}
