//! Corner-aligned bilinear resampling on `f64` volumes, with the transpose
//! pass used during training.

use super::Volume;
use crate::parallel;

#[inline]
fn coord(i: usize, in_n: usize, out_n: usize) -> f64 {
    if out_n <= 1 {
        0.0
    } else {
        i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub fn upsample_bilinear(input: &Volume, out_h: usize, out_w: usize) -> Volume {
    let (in_h, in_w, c) = (input.h, input.w, input.c);
    let mut out = Volume::zeros(out_h, out_w, c);
    let row_len = out_w * c;
    parallel::for_each_row(&mut out.data, row_len, |y, row| {
        let sy = coord(y, in_h, out_h);
        let y0 = (sy.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = coord(x, in_w, out_w);
            let x0 = (sx.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let top = lerp(input.get(y0, x0, ch), input.get(y0, x1, ch), fx);
                let bot = lerp(input.get(y1, x0, ch), input.get(y1, x1, ch), fx);
                row[x * c + ch] = lerp(top, bot, fy);
            }
        }
    });
    out
}

/// Transpose of [`upsample_bilinear`]: scatter output gradients back onto the
/// input grid with the same interpolation weights.
pub fn upsample_bilinear_backward(grad_out: &Volume, in_h: usize, in_w: usize) -> Volume {
    let c = grad_out.c;
    let mut grad_in = Volume::zeros(in_h, in_w, c);
    for y in 0..grad_out.h {
        let sy = coord(y, in_h, grad_out.h);
        let y0 = (sy.floor() as usize).min(in_h - 1);
        let y1 = (y0 + 1).min(in_h - 1);
        let fy = sy - y0 as f64;
        for x in 0..grad_out.w {
            let sx = coord(x, in_w, grad_out.w);
            let x0 = (sx.floor() as usize).min(in_w - 1);
            let x1 = (x0 + 1).min(in_w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let g = grad_out.get(y, x, ch);
                // Weights from the a + t*(b-a) form: a gets (1-t), b gets t.
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                grad_in.data[(y0 * in_w + x0) * c + ch] += g * w00;
                grad_in.data[(y0 * in_w + x1) * c + ch] += g * w01;
                grad_in.data[(y1 * in_w + x0) * c + ch] += g * w10;
                grad_in.data[(y1 * in_w + x1) * c + ch] += g * w11;
            }
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_upsample() {
        let v = Volume::from_fn(3, 4, 2, |y, x, c| (y * 8 + x * 2 + c) as f64);
        let u = upsample_bilinear(&v, 3, 4);
        assert_eq!(v.data, u.data);
    }

    #[test]
    fn backward_is_adjoint() {
        // <up(x), g> must equal <x, up^T(g)> for a linear map.
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(17);
        let x = Volume::from_fn(3, 5, 2, |_, _, _| rng.range_f64(-1.0, 1.0));
        let g = Volume::from_fn(7, 9, 2, |_, _, _| rng.range_f64(-1.0, 1.0));
        let up = upsample_bilinear(&x, 7, 9);
        let gt = upsample_bilinear_backward(&g, 3, 5);
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gt.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
