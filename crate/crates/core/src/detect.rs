//! Detection stage: density peaks to candidate boxes.
//!
//! Centers come from non-maxima suppression on the location density map.
//! Backbone features are reduced, upsampled to image size, fused with the
//! upsampled similarity tensor, and fed to a two-layer box head that predicts
//! per-pixel distances to the four box edges. Candidate boxes are read out at
//! the detected centers. The stage aims for recall; precision is the
//! verification stage's job.

use crate::config::{FusionMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::nn::{
    self, conv2d, conv2d_backward, group_norm, group_norm_backward, relu, relu_backward, softplus,
    softplus_backward, upsample_bilinear, upsample_bilinear_backward, Conv2d, ConvGrad, GroupNorm,
    GroupNormCache, Padding, Volume,
};
use crate::parallel;
use crate::rng::SplitMix64;
use crate::scene::Scene;
use crate::tensor::DensityMap;

/// A density peak: integer pixel coordinates plus the peak value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub x: usize,
    pub y: usize,
    pub value: f32,
}

/// Non-maxima suppression over a Chebyshev window of radius `nms_radius`.
///
/// A pixel is a center iff its value is at least `threshold` and no pixel in
/// the window beats it; plateau ties go to the earliest pixel in row-major
/// order, which also guarantees retained peaks are more than `nms_radius`
/// apart in Chebyshev distance.
pub fn extract_centers(g: &DensityMap, nms_radius: usize, threshold: f32) -> Vec<Center> {
    let (h, w) = g.dims();
    let r = nms_radius as isize;
    let mut flags = vec![false; h * w];
    parallel::for_each_row(&mut flags, w, |y, row| {
        for x in 0..w {
            let v = g.get(y, x);
            if v < threshold {
                continue;
            }
            let mut is_peak = true;
            'win: for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let q = g.get(yy as usize, xx as usize);
                    let earlier = (yy as usize, xx as usize) < (y, x);
                    if q > v || (q == v && earlier) {
                        is_peak = false;
                        break 'win;
                    }
                }
            }
            row[x] = is_peak;
        }
    });
    let mut centers = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if flags[y * w + x] {
                centers.push(Center { x, y, value: g.get(y, x) });
            }
        }
    }
    centers
}

/// Dense per-pixel box map: channels are distances to the (left, top, right,
/// bottom) edges, all non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxField {
    pub field: Volume,
}

impl BoxField {
    pub fn ltrb(&self, y: usize, x: usize) -> [f64; 4] {
        [
            self.field.get(y, x, 0),
            self.field.get(y, x, 1),
            self.field.get(y, x, 2),
            self.field.get(y, x, 3),
        ]
    }
}

/// Parameters of the fusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// 3x3 projection of the concatenated features, 2d -> d.
    pub conv: Conv2d,
    pub norm: GroupNorm,
    /// Channel-attention bottleneck, both 1x1 d -> d.
    pub attn1: Conv2d,
    pub attn2: Conv2d,
    /// 1x1 projection used only in concat mode, 2d -> d.
    pub concat_proj: Conv2d,
}

/// All trainable parameters of the detection stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectWeights {
    /// 3x3 reduction of the ingested backbone features to `d` channels.
    pub reduce: Conv2d,
    pub fusion: FusionWeights,
    /// Box head: 3x3 d -> d, GroupNorm, ReLU, 3x3 d -> 4, softplus.
    pub head1: Conv2d,
    pub head_norm: GroupNorm,
    pub head2: Conv2d,
}

impl DetectWeights {
    /// Glorot-initialized weights for `feature_channels`-channel input and a
    /// `d`-channel working width.
    pub fn init(feature_channels: usize, d: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        Self {
            reduce: Conv2d::glorot(3, 3, feature_channels, d, &mut rng),
            fusion: FusionWeights {
                conv: Conv2d::glorot(3, 3, 2 * d, d, &mut rng),
                norm: GroupNorm::identity(d),
                attn1: Conv2d::glorot(1, 1, d, d, &mut rng),
                attn2: Conv2d::glorot(1, 1, d, d, &mut rng),
                concat_proj: Conv2d::glorot(1, 1, 2 * d, d, &mut rng),
            },
            head1: Conv2d::glorot(3, 3, d, d, &mut rng),
            head_norm: GroupNorm::identity(d),
            head2: Conv2d::glorot(3, 3, d, 4, &mut rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce.c_out
    }

    pub fn feature_channels(&self) -> usize {
        self.reduce.c_in
    }
}

/// Forward state of [`fuse_train`], consumed by [`fuse_backward`].
pub enum FusionCache {
    Sum,
    Concat {
        concat: Volume,
    },
    Ffm {
        concat: Volume,
        norm: GroupNormCache,
        pre_relu: Volume,
        fused: Volume,
        pooled: Volume,
        attn_pre1: Volume,
        attn_post1: Volume,
        scale: Vec<f64>,
    },
}

fn gap(v: &Volume) -> Volume {
    let mean = nn::spatial_mean(v);
    Volume { h: 1, w: 1, c: v.c, data: mean }
}

/// Fuse upsampled features with the upsampled similarity tensor.
///
/// `sum` adds them; `concat` concatenates and projects back to `d` channels;
/// `ffm` projects the concatenation then rescales channels by a squeeze-style
/// attention branch and adds the result back (`out = t + t * sigma`).
pub fn fuse_train(
    f1: &Volume,
    r_up: &Volume,
    w: &FusionWeights,
    mode: FusionMode,
) -> Result<(Volume, FusionCache)> {
    if !f1.same_shape(r_up) {
        return Err(Error::DimMismatch(format!(
            "fuse: features {}x{}x{} vs similarity {}x{}x{}",
            f1.h, f1.w, f1.c, r_up.h, r_up.w, r_up.c
        )));
    }
    match mode {
        FusionMode::Sum => Ok((f1.add(r_up)?, FusionCache::Sum)),
        FusionMode::Concat => {
            let concat = f1.concat_channels(r_up)?;
            let out = conv2d(&concat, &w.concat_proj, Padding::Zeros)?;
            Ok((out, FusionCache::Concat { concat }))
        }
        FusionMode::Ffm => {
            let concat = f1.concat_channels(r_up)?;
            let pre_norm = conv2d(&concat, &w.conv, Padding::Zeros)?;
            let (normed, norm) = group_norm(&pre_norm, &w.norm)?;
            let fused = relu(&normed);
            let pooled = gap(&fused);
            let attn_pre1 = conv2d(&pooled, &w.attn1, Padding::Zeros)?;
            let attn_post1 = relu(&attn_pre1);
            let attn_pre2 = conv2d(&attn_post1, &w.attn2, Padding::Zeros)?;
            let scale = nn::sigmoid_slice(&attn_pre2.data);
            let mut out = fused.clone();
            for i in 0..out.h * out.w {
                for ch in 0..out.c {
                    let t = fused.data[i * out.c + ch];
                    out.data[i * out.c + ch] = t + t * scale[ch];
                }
            }
            Ok((
                out,
                FusionCache::Ffm {
                    concat,
                    norm,
                    pre_relu: normed,
                    fused,
                    pooled,
                    attn_pre1,
                    attn_post1,
                    scale,
                },
            ))
        }
    }
}

/// Inference-only fusion.
pub fn fuse(f1: &Volume, r_up: &Volume, w: &FusionWeights, mode: FusionMode) -> Result<Volume> {
    fuse_train(f1, r_up, w, mode).map(|(out, _)| out)
}

/// Gradients produced by [`fuse_backward`].
pub struct FusionGrads {
    pub conv: ConvGrad,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    pub attn1: ConvGrad,
    pub attn2: ConvGrad,
    pub concat_proj: ConvGrad,
}

impl FusionGrads {
    fn zeros(w: &FusionWeights) -> Self {
        Self {
            conv: w.conv.grad_zeros(),
            norm_gamma: vec![0.0; w.norm.channels()],
            norm_beta: vec![0.0; w.norm.channels()],
            attn1: w.attn1.grad_zeros(),
            attn2: w.attn2.grad_zeros(),
            concat_proj: w.concat_proj.grad_zeros(),
        }
    }
}

/// Backward through the fusion step; returns the gradient w.r.t. `f1`
/// (the similarity branch receives no training signal here).
pub fn fuse_backward(
    w: &FusionWeights,
    cache: &FusionCache,
    grad_out: &Volume,
) -> Result<(Volume, FusionGrads)> {
    let mut grads = FusionGrads::zeros(w);
    match cache {
        FusionCache::Sum => Ok((grad_out.clone(), grads)),
        FusionCache::Concat { concat } => {
            let (d_concat, g) = conv2d_backward(concat, &w.concat_proj, Padding::Zeros, grad_out)?;
            grads.concat_proj = g;
            let (df1, _dr) = d_concat.split_channels(grad_out.c);
            Ok((df1, grads))
        }
        FusionCache::Ffm {
            concat,
            norm,
            pre_relu,
            fused,
            pooled,
            attn_pre1,
            attn_post1,
            scale,
        } => {
            let c = grad_out.c;
            // out = t + t*s  ->  dt = g*(1+s), ds_ch = sum_spatial g*t
            let mut d_fused = Volume::zeros(fused.h, fused.w, c);
            let mut d_scale = vec![0.0; c];
            for i in 0..fused.h * fused.w {
                for ch in 0..c {
                    let g = grad_out.data[i * c + ch];
                    let t = fused.data[i * c + ch];
                    d_fused.data[i * c + ch] = g * (1.0 + scale[ch]);
                    d_scale[ch] += g * t;
                }
            }
            // sigmoid backward
            let d_attn_pre2 = Volume {
                h: 1,
                w: 1,
                c,
                data: d_scale
                    .iter()
                    .zip(scale)
                    .map(|(&g, &s)| g * s * (1.0 - s))
                    .collect(),
            };
            let (d_attn_post1, g_attn2) = conv2d_backward(attn_post1, &w.attn2, Padding::Zeros, &d_attn_pre2)?;
            grads.attn2 = g_attn2;
            let d_attn_pre1 = relu_backward(attn_pre1, &d_attn_post1);
            let (d_pooled, g_attn1) = conv2d_backward(pooled, &w.attn1, Padding::Zeros, &d_attn_pre1)?;
            grads.attn1 = g_attn1;
            // gap backward: broadcast /= n, added to the direct fused grad.
            let n = (fused.h * fused.w) as f64;
            for i in 0..fused.h * fused.w {
                for ch in 0..c {
                    d_fused.data[i * c + ch] += d_pooled.data[ch] / n;
                }
            }
            let d_pre_relu = relu_backward(pre_relu, &d_fused);
            let (d_pre_norm, dg, db) = group_norm_backward(&w.norm, norm, &d_pre_relu);
            grads.norm_gamma = dg;
            grads.norm_beta = db;
            let (d_concat, g_conv) = conv2d_backward(concat, &w.conv, Padding::Zeros, &d_pre_norm)?;
            grads.conv = g_conv;
            let (df1, _dr) = d_concat.split_channels(c);
            Ok((df1, grads))
        }
    }
}

/// Forward state of [`box_head_train`].
pub struct BoxHeadCache {
    input: Volume,
    norm: GroupNormCache,
    pre_relu: Volume,
    post_relu: Volume,
    pre_act: Volume,
}

/// Box head with caches for the backward pass.
pub fn box_head_train(input: &Volume, w: &DetectWeights, pad: Padding) -> Result<(BoxField, BoxHeadCache)> {
    let pre_norm = conv2d(input, &w.head1, pad)?;
    let (normed, norm) = group_norm(&pre_norm, &w.head_norm)?;
    let post_relu = relu(&normed);
    let pre_act = conv2d(&post_relu, &w.head2, pad)?;
    let field = softplus(&pre_act);
    Ok((
        BoxField { field },
        BoxHeadCache { input: input.clone(), norm, pre_relu: normed, post_relu, pre_act },
    ))
}

/// Dense box regression: two 3x3 convolutions with GroupNorm and ReLU in
/// between; softplus keeps all four edge distances non-negative.
pub fn box_head(input: &Volume, w: &DetectWeights) -> Result<BoxField> {
    box_head_with_padding(input, w, Padding::Zeros)
}

pub fn box_head_with_padding(input: &Volume, w: &DetectWeights, pad: Padding) -> Result<BoxField> {
    let pre_norm = conv2d(input, &w.head1, pad)?;
    let (normed, _) = group_norm(&pre_norm, &w.head_norm)?;
    let post_relu = relu(&normed);
    let pre_act = conv2d(&post_relu, &w.head2, pad)?;
    Ok(BoxField { field: softplus(&pre_act) })
}

pub struct BoxHeadGrads {
    pub head1: ConvGrad,
    pub norm_gamma: Vec<f64>,
    pub norm_beta: Vec<f64>,
    pub head2: ConvGrad,
}

/// Backward through the box head; returns the gradient w.r.t. its input.
pub fn box_head_backward(
    w: &DetectWeights,
    cache: &BoxHeadCache,
    grad_field: &Volume,
    pad: Padding,
) -> Result<(Volume, BoxHeadGrads)> {
    let d_pre_act = softplus_backward(&cache.pre_act, grad_field);
    let (d_post_relu, g_head2) = conv2d_backward(&cache.post_relu, &w.head2, pad, &d_pre_act)?;
    let d_pre_relu = relu_backward(&cache.pre_relu, &d_post_relu);
    let (d_pre_norm, dg, db) = group_norm_backward(&w.head_norm, &cache.norm, &d_pre_relu);
    let (d_input, g_head1) = conv2d_backward(&cache.input, &w.head1, pad, &d_pre_norm)?;
    Ok((d_input, BoxHeadGrads { head1: g_head1, norm_gamma: dg, norm_beta: db, head2: g_head2 }))
}

/// Decode boxes at the given centers: `(x - l, y - t, x + r, y + b)`, clipped
/// to the image. A degenerate readout (possible only on hand-built fields)
/// falls back to the unit box of the center pixel.
pub fn read_boxes(v: &BoxField, centers: &[Center], dims: (usize, usize)) -> Vec<BoundingBox> {
    let (h, w) = dims;
    centers
        .iter()
        .map(|c| {
            let [l, t, r, b] = v.ltrb(c.y, c.x);
            let mut x1 = (c.x as f64 - l).max(0.0);
            let mut x2 = (c.x as f64 + r).min(w as f64);
            let mut y1 = (c.y as f64 - t).max(0.0);
            let mut y2 = (c.y as f64 + b).min(h as f64);
            if x2 <= x1 {
                x1 = c.x as f64;
                x2 = (c.x + 1) as f64;
            }
            if y2 <= y1 {
                y1 = c.y as f64;
                y2 = (c.y + 1) as f64;
            }
            BoundingBox { x1: x1 as f32, y1: y1 as f32, x2: x2 as f32, y2: y2 as f32 }
        })
        .collect()
}

/// Output of the detection stage: candidates plus the untouched density map.
#[derive(Debug, Clone)]
pub struct DetectOutput {
    pub candidates: Vec<BoundingBox>,
    pub centers: Vec<Center>,
    pub density: DensityMap,
}

/// Run the full detection stage on a (preprocessed) scene.
pub fn detect_stage(scene: &Scene, w: &DetectWeights, cfg: &PipelineConfig) -> Result<DetectOutput> {
    cfg.validate()?;
    scene.validate()?;
    let d = w.channels();
    if cfg.channels != d {
        return Err(Error::Config(format!(
            "config channels {} do not match weights ({d})",
            cfg.channels
        )));
    }
    let (_, _, fc) = scene.features.shape();
    if fc != w.feature_channels() {
        return Err(Error::DimMismatch(format!(
            "scene features have {fc} channels, weights expect {}",
            w.feature_channels()
        )));
    }
    let (hh, ww) = scene.dims;
    let f0 = Volume::from_tensor(&scene.features);
    let reduced = conv2d(&f0, &w.reduce, Padding::Zeros)?;
    let f1 = upsample_bilinear(&reduced, hh, ww);
    let r_up = if cfg.use_similarity {
        let (_, _, sc) = scene.similarity.shape();
        if sc != d {
            return Err(Error::DimMismatch(format!(
                "similarity tensor has {sc} channels, expected {d}"
            )));
        }
        upsample_bilinear(&Volume::from_tensor(&scene.similarity), hh, ww)
    } else {
        Volume::zeros(hh, ww, d)
    };
    let fused = fuse(&f1, &r_up, &w.fusion, cfg.fusion)?;
    let field = box_head(&fused, w)?;
    let centers = extract_centers(&scene.density, cfg.nms_radius, cfg.density_threshold);
    let candidates = read_boxes(&field, &centers, scene.dims);
    Ok(DetectOutput { candidates, centers, density: scene.density.clone() })
}

/// Differentiable feature path of the detection stage, up to the box field.
/// Used by the phase-1 trainer.
pub struct DetectForward {
    pub field: BoxField,
    pub reduced: Volume,
    pub fusion_cache: FusionCache,
    pub head_cache: BoxHeadCache,
    pub f0: Volume,
}

pub fn detect_forward_train(scene: &Scene, w: &DetectWeights, cfg: &PipelineConfig) -> Result<DetectForward> {
    let (hh, ww) = scene.dims;
    let d = w.channels();
    let f0 = Volume::from_tensor(&scene.features);
    let reduced = conv2d(&f0, &w.reduce, Padding::Zeros)?;
    let f1 = upsample_bilinear(&reduced, hh, ww);
    let r_up = if cfg.use_similarity {
        upsample_bilinear(&Volume::from_tensor(&scene.similarity), hh, ww)
    } else {
        Volume::zeros(hh, ww, d)
    };
    let (fused, fusion_cache) = fuse_train(&f1, &r_up, &w.fusion, cfg.fusion)?;
    let (field, head_cache) = box_head_train(&fused, w, Padding::Zeros)?;
    Ok(DetectForward { field, reduced, fusion_cache, head_cache, f0 })
}

/// All detection-stage gradients, mirroring [`DetectWeights`].
pub struct DetectGrads {
    pub reduce: ConvGrad,
    pub fusion: FusionGrads,
    pub head: BoxHeadGrads,
}

pub fn detect_backward_train(
    w: &DetectWeights,
    fwd: &DetectForward,
    grad_field: &Volume,
) -> Result<DetectGrads> {
    let (d_fused, head) = box_head_backward(w, &fwd.head_cache, grad_field, Padding::Zeros)?;
    let (d_f1, fusion) = fuse_backward(&w.fusion, &fwd.fusion_cache, &d_fused)?;
    let d_reduced = upsample_bilinear_backward(&d_f1, fwd.reduced.h, fwd.reduced.w);
    let (_d_f0, reduce) = conv2d_backward(&fwd.f0, &w.reduce, Padding::Zeros, &d_reduced)?;
    Ok(DetectGrads { reduce, fusion, head })
}

/// One native-scale detection pass; returns the mean candidate extent used to
/// bootstrap the resize rule when no exemplars exist.
pub fn bootstrap_size_estimate(scene: &Scene, w: &DetectWeights, cfg: &PipelineConfig) -> Result<f64> {
    let out = detect_stage(scene, w, cfg)?;
    if out.candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let sum: f64 = out.candidates.iter().map(|b| b.extent()).sum();
    Ok(sum / out.candidates.len() as f64)
}
