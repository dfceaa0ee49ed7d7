//! Axis-aligned boxes and overlap measures.
//!
//! Coordinates are continuous with the origin at the top-left pixel corner,
//! so pixel `(x, y)` spans `[x, x+1) x [y, y+1)` and its center sits at
//! `(x + 0.5, y + 0.5)`.

use crate::error::{Error, Result};

/// Axis-aligned box with `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BoundingBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(b)
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() as f64 * self.height() as f64
    }

    pub fn center(&self) -> (f32, f32) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    /// Mean of width and height; the object "extent" used by the resize rule.
    pub fn extent(&self) -> f64 {
        0.5 * (self.width() as f64 + self.height() as f64)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x1: (self.x1 as f64 * s) as f32,
            y1: (self.y1 as f64 * s) as f32,
            x2: (self.x2 as f64 * s) as f32,
            y2: (self.y2 as f64 * s) as f32,
        }
    }

    pub fn translated(&self, dx: f32, dy: f32) -> Self {
        Self { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Closed-interval point containment.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    iw * ih
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Generalized IoU: IoU minus the fraction of the tight enclosing box not
/// covered by the union. In `(-1, 1]`, equal to IoU when the enclosing box is
/// covered.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let cw = a.x2.max(b.x2) as f64 - a.x1.min(b.x1) as f64;
    let ch = a.y2.max(b.y2) as f64 - a.y1.min(b.y1) as f64;
    let enclosing = cw * ch;
    if union <= 0.0 || enclosing <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosing - union) / enclosing
}

/// GIoU of a predicted box against a fixed target, with the analytic
/// gradient w.r.t. the predicted coordinates `(x1, y1, x2, y2)`.
///
/// Piecewise differentiable: at ties between predicted and target edges the
/// min/max subgradient picks the predicted side iff it is strictly active.
pub fn giou_grad(pred: [f64; 4], gt: [f64; 4]) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = pred;
    let [gx1, gy1, gx2, gy2] = gt;

    let pw = px2 - px1;
    let ph = py2 - py1;
    let area_p = pw * ph;
    let area_g = (gx2 - gx1) * (gy2 - gy1);
    // d(area_p)/d(px1, py1, px2, py2)
    let d_area_p = [-ph, -pw, ph, pw];

    let ix1 = px1.max(gx1);
    let iy1 = py1.max(gy1);
    let ix2 = px2.min(gx2);
    let iy2 = py2.min(gy2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    let iw_pos = iw.max(0.0);
    let ih_pos = ih.max(0.0);
    let inter = iw_pos * ih_pos;

    // Derivatives of the clamped intersection extents w.r.t. pred coords.
    let diw = [if px1 > gx1 { -1.0 } else { 0.0 }, 0.0, if px2 < gx2 { 1.0 } else { 0.0 }, 0.0];
    let dih = [0.0, if py1 > gy1 { -1.0 } else { 0.0 }, 0.0, if py2 < gy2 { 1.0 } else { 0.0 }];
    let mut d_inter = [0.0; 4];
    for k in 0..4 {
        let a = if iw > 0.0 { diw[k] * ih_pos } else { 0.0 };
        let b = if ih > 0.0 { iw_pos * dih[k] } else { 0.0 };
        d_inter[k] = a + b;
    }

    let union = area_p + area_g - inter;
    let d_union: [f64; 4] = std::array::from_fn(|k| d_area_p[k] - d_inter[k]);

    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let enclosing = cw * ch;
    let dcw = [if px1 < gx1 { -1.0 } else { 0.0 }, 0.0, if px2 > gx2 { 1.0 } else { 0.0 }, 0.0];
    let dch = [0.0, if py1 < gy1 { -1.0 } else { 0.0 }, 0.0, if py2 > gy2 { 1.0 } else { 0.0 }];
    let d_enc: [f64; 4] = std::array::from_fn(|k| dcw[k] * ch + cw * dch[k]);

    if union <= 0.0 || enclosing <= 0.0 {
        return (0.0, [0.0; 4]);
    }

    let value = inter / union - (enclosing - union) / enclosing;
    // giou = inter/union - 1 + union/enclosing
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_iou = (d_inter[k] * union - inter * d_union[k]) / (union * union);
        let d_cover = (d_union[k] * enclosing - union * d_enc[k]) / (enclosing * enclosing);
        grad[k] = d_iou + d_cover;
    }
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f32, y1: f32, x2: f32, y2: f32) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_fixtures() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let c = bx(5.0, 5.0, 6.0, 6.0);
        let d = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&d, &c), 0.0);
    }

    #[test]
    fn giou_fixtures() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        // Disjoint side-by-side boxes: iou 0, enclosing 3, union 2.
        let b = bx(2.0, 0.0, 3.0, 1.0);
        assert!((giou(&a, &b) - (-1.0 / 3.0)).abs() < 1e-12);
        // Nested boxes with enclosing == union.
        let c = bx(0.0, 0.0, 2.0, 2.0);
        let d = bx(0.0, 0.0, 2.0, 4.0);
        assert!((giou(&c, &d) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(f32::NAN, 0.0, 1.0, 1.0).is_err());
    }

    /// From-definition GIoU used as an independent oracle.
    fn giou_reference(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0) as f64;
        let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0) as f64;
        let inter = ix * iy;
        let ua = a.area() + b.area() - inter;
        let cw = (a.x2.max(b.x2) - a.x1.min(b.x1)) as f64;
        let ch = (a.y2.max(b.y2) - a.y1.min(b.y1)) as f64;
        let c = cw * ch;
        inter / ua - (c - ua) / c
    }

    proptest! {
        #[test]
        fn giou_properties(
            ax in -50.0f32..50.0, ay in -50.0f32..50.0, aw in 0.1f32..40.0, ah in 0.1f32..40.0,
            bx_ in -50.0f32..50.0, by in -50.0f32..50.0, bw in 0.1f32..40.0, bh in 0.1f32..40.0,
        ) {
            let a = bx(ax, ay, ax + aw, ay + ah);
            let b = bx(bx_, by, bx_ + bw, by + bh);
            let g = giou(&a, &b);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
            prop_assert!(g <= iou(&a, &b) + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!((g - giou_reference(&a, &b)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(99);
        let mut checked = 0;
        'outer: while checked < 100 {
            let g = [
                rng.range_f64(-5.0, 5.0),
                rng.range_f64(-5.0, 5.0),
                rng.range_f64(6.0, 15.0),
                rng.range_f64(6.0, 15.0),
            ];
            let p = [
                rng.range_f64(-5.0, 5.0),
                rng.range_f64(-5.0, 5.0),
                rng.range_f64(6.0, 15.0),
                rng.range_f64(6.0, 15.0),
            ];
            // Keep away from the min/max kinks.
            for k in 0..4 {
                if (p[k] - g[k]).abs() < 1e-3 {
                    continue 'outer;
                }
            }
            let (_, grad) = giou_grad(p, g);
            let h = 1e-6;
            for k in 0..4 {
                let mut pp = p;
                pp[k] += h;
                let (fp, _) = giou_grad(pp, g);
                pp[k] -= 2.0 * h;
                let (fm, _) = giou_grad(pp, g);
                let fd = (fp - fm) / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-3);
                assert!(
                    ((grad[k] - fd) / denom).abs() < 1e-4,
                    "coord {k}: analytic {} vs fd {fd}",
                    grad[k]
                );
            }
            checked += 1;
        }
    }
}
