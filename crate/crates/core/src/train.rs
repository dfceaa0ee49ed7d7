//! Desk-scale training of the two learnable heads.
//!
//! Phase 1 fits the detection path (reduction, fusion, box head) with a GIoU
//! loss evaluated at the central pixels of the exemplar boxes — exemplars are
//! the only boxes ever used as supervision. Phase 2 fits the verifier
//! projection with a cosine contrastive loss on scenes stitched from pairs of
//! different-class sources. Both phases use AdamW with decoupled weight
//! decay and analytic gradients; batches are reduced in a fixed order so runs
//! are bit-reproducible.

use crate::config::{PipelineConfig, TrainConfig};
use crate::detect::{
    detect_backward_train, detect_forward_train, BoxField, DetectGrads, DetectWeights,
};
use crate::error::{Error, Result};
use crate::geometry::giou_grad;
use crate::nn::{
    batch_norm_train, batch_norm_train_backward, conv2d, conv2d_backward, cosine_grad,
    l2_normalize, l2_normalize_backward, relu, relu_backward, spatial_mean, spatial_mean_backward,
    Padding, Volume,
};
use crate::parallel;
use crate::rng::SplitMix64;
use crate::scene::{pad_scene_to_canvas, rescale_scene, ExemplarSet, Scene};
use crate::tensor::{DensityMap, Tensor};
use crate::verify::{pool_box, VerifierWeights};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter-tensor optimizer state.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn for_len(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One decoupled-weight-decay Adam step. Decay multiplies the parameters
/// directly and never enters the moment estimates.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, opt: &AdamW) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimMismatch(format!(
            "adamw: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - opt.beta1.powi(state.t as i32);
    let bc2 = 1.0 - opt.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = opt.beta1 * state.m[i] + (1.0 - opt.beta1) * g;
        state.v[i] = opt.beta2 * state.v[i] + (1.0 - opt.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps) + opt.lr * opt.weight_decay * params[i];
    }
    Ok(())
}

/// Central supervision region of a box: all pixels within Chebyshev distance
/// `floor(0.15 * min(w, h))` of the center pixel, clipped to the map.
fn central_region(b: &crate::geometry::BoundingBox, dims: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let (h, w) = dims;
    let (cx, cy) = b.center();
    if cx < 0.0 || cy < 0.0 || cx >= w as f32 || cy >= h as f32 {
        return Err(Error::Scene(format!("exemplar center ({cx}, {cy}) outside the {h}x{w} map")));
    }
    let px = cx as usize;
    let py = cy as usize;
    let rad = (0.15 * b.width().min(b.height()) as f64).floor() as usize;
    let mut out = Vec::new();
    for y in py.saturating_sub(rad)..=(py + rad).min(h - 1) {
        for x in px.saturating_sub(rad)..=(px + rad).min(w - 1) {
            out.push((y, x));
        }
    }
    Ok(out)
}

/// GIoU box loss over the exemplars' central regions.
///
/// Returns the summed loss and its gradient w.r.t. the box field (channels
/// `l, t, r, b`). The loss is a sum, not a mean, over region pixels.
pub fn box_loss(field: &BoxField, exemplars: &ExemplarSet) -> Result<(f64, Volume)> {
    if exemplars.is_empty() {
        return Err(Error::Config("box loss needs at least one exemplar".into()));
    }
    let v = &field.field;
    let dims = (v.h, v.w);
    let mut grad = Volume::zeros(v.h, v.w, 4);
    let mut loss = 0.0;
    for b in &exemplars.boxes {
        let gt = [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64];
        for (y, x) in central_region(b, dims)? {
            let [l, t, r, bo] = field.ltrb(y, x);
            let pred = [x as f64 - l, y as f64 - t, x as f64 + r, y as f64 + bo];
            let (g, d) = giou_grad(pred, gt);
            loss += 1.0 - g;
            // Chain through the decode: x1 = x - l, y1 = y - t, x2 = x + r,
            // y2 = y + b.
            let idx = v.idx(y, x, 0);
            grad.data[idx] += d[0];
            grad.data[idx + 1] += d[1];
            grad.data[idx + 2] -= d[2];
            grad.data[idx + 3] -= d[3];
        }
    }
    Ok((loss, grad))
}

/// Cosine contrastive loss on a feature pair.
///
/// Same class: `1 - cos`. Different class: `max(0, cos - margin)` with a zero
/// subgradient at the hinge. Returns the loss and gradients w.r.t. both
/// inputs.
pub fn contrastive_loss(
    z_a: &[f64],
    z_b: &[f64],
    same_class: bool,
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (c, da, db) = cosine_grad(z_a, z_b);
    if same_class {
        (1.0 - c, da.iter().map(|v| -v).collect(), db.iter().map(|v| -v).collect())
    } else if c - margin > 0.0 {
        (c - margin, da, db)
    } else {
        (0.0, vec![0.0; z_a.len()], vec![0.0; z_b.len()])
    }
}

// Fixed flattening order shared by the parameter registry and gradients.
fn detect_params_mut(w: &mut DetectWeights) -> Vec<&mut Vec<f64>> {
    vec![
        &mut w.reduce.weight,
        &mut w.reduce.bias,
        &mut w.fusion.conv.weight,
        &mut w.fusion.conv.bias,
        &mut w.fusion.norm.gamma,
        &mut w.fusion.norm.beta,
        &mut w.fusion.attn1.weight,
        &mut w.fusion.attn1.bias,
        &mut w.fusion.attn2.weight,
        &mut w.fusion.attn2.bias,
        &mut w.fusion.concat_proj.weight,
        &mut w.fusion.concat_proj.bias,
        &mut w.head1.weight,
        &mut w.head1.bias,
        &mut w.head_norm.gamma,
        &mut w.head_norm.beta,
        &mut w.head2.weight,
        &mut w.head2.bias,
    ]
}

fn flatten_detect_grads(g: DetectGrads) -> Vec<Vec<f64>> {
    vec![
        g.reduce.weight,
        g.reduce.bias,
        g.fusion.conv.weight,
        g.fusion.conv.bias,
        g.fusion.norm_gamma,
        g.fusion.norm_beta,
        g.fusion.attn1.weight,
        g.fusion.attn1.bias,
        g.fusion.attn2.weight,
        g.fusion.attn2.bias,
        g.fusion.concat_proj.weight,
        g.fusion.concat_proj.bias,
        g.head.head1.weight,
        g.head.head1.bias,
        g.head.norm_gamma,
        g.head.norm_beta,
        g.head.head2.weight,
        g.head.head2.bias,
    ]
}

fn accumulate(acc: &mut Vec<Vec<f64>>, item: Vec<Vec<f64>>) {
    if acc.is_empty() {
        *acc = item;
        return;
    }
    for (a, b) in acc.iter_mut().zip(item) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

fn scale_grads(grads: &mut [Vec<f64>], k: f64) {
    for g in grads {
        for v in g.iter_mut() {
            *v *= k;
        }
    }
}

/// Loss curve plus the final optimizer state (the checkpoint pair).
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean per-sample (phase 1) or per-pair (phase 2) loss, one entry per
    /// epoch.
    pub epoch_loss: Vec<f64>,
    pub optimizer_state: Vec<AdamState>,
}

/// Train the detection path on scenes with exemplars. Returns the per-epoch
/// mean sample loss. Only detection parameters change.
pub fn train_phase1(
    dataset: &[Scene],
    weights: &mut DetectWeights,
    tcfg: &TrainConfig,
    pcfg: &PipelineConfig,
) -> Result<TrainReport> {
    tcfg.validate()?;
    pcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    // Preprocess once: resize rule, then zero-pad onto the training canvas.
    let mut prepared = Vec::with_capacity(dataset.len());
    for scene in dataset {
        if scene.exemplars.is_empty() {
            return Err(Error::Config("phase-1 scenes need at least one exemplar".into()));
        }
        let (rescaled, _) = rescale_scene(scene)?;
        prepared.push(pad_scene_to_canvas(&rescaled, tcfg.canvas)?);
    }

    let opt = AdamW::new(tcfg.phase1.learning_rate, tcfg.phase1.weight_decay);
    let mut states: Vec<AdamState> =
        detect_params_mut(weights).iter().map(|p| AdamState::for_len(p.len())).collect();
    let mut rng = SplitMix64::new(tcfg.seed ^ 0x70686173653161);
    let mut curve = Vec::with_capacity(tcfg.phase1.epochs);

    for _epoch in 0..tcfg.phase1.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(tcfg.phase1.batch_size) {
            let snapshot = weights.clone();
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = parallel::map_collect(batch, |&i| {
                let scene = &prepared[i];
                let fwd = detect_forward_train(scene, &snapshot, pcfg)?;
                let (loss, grad_field) = box_loss(&fwd.field, &scene.exemplars)?;
                let grads = detect_backward_train(&snapshot, &fwd, &grad_field)?;
                Ok((loss, flatten_detect_grads(grads)))
            });
            let mut acc: Vec<Vec<f64>> = Vec::new();
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                accumulate(&mut acc, grads);
            }
            scale_grads(&mut acc, 1.0 / batch.len() as f64);
            for ((param, grad), state) in detect_params_mut(weights).into_iter().zip(&acc).zip(&mut states) {
                adamw_step(param, grad, state, &opt)?;
            }
        }
        curve.push(epoch_loss / prepared.len() as f64);
    }
    Ok(TrainReport { epoch_loss: curve, optimizer_state: states })
}

/// A composite of two different-class scenes placed side by side on the
/// zero-padded canvas.
#[derive(Debug, Clone)]
pub struct StitchedScene {
    pub scene: Scene,
    /// Class label of each exemplar box (six entries).
    pub exemplar_classes: Vec<u32>,
    pub offset_a: (f32, f32),
    pub offset_b: (f32, f32),
}

fn translate_scene_into(
    src: &Scene,
    dst_density: &mut DensityMap,
    dst_feat: &mut Tensor,
    dst_sim: &mut Tensor,
    x_off: usize,
    stride: usize,
) {
    let (h, w) = src.dims;
    for y in 0..h {
        for x in 0..w {
            dst_density.set(y, x + x_off, src.density.get(y, x));
        }
    }
    let (fh, fw, fc) = src.features.shape();
    let fx_off = x_off / stride;
    for y in 0..fh {
        for x in 0..fw {
            for c in 0..fc {
                dst_feat.set(y, x + fx_off, c, src.features.get(y, x, c));
                dst_sim.set(y, x + fx_off, c, src.similarity.get(y, x, c));
            }
        }
    }
}

/// Stitch two scenes of different target classes side by side. Both are
/// first passed through the resize rule; the seed decides left/right order.
/// Each source must carry exactly three exemplars, giving the composite six.
pub fn stitch(a: &Scene, b: &Scene, canvas: (usize, usize), seed: u64) -> Result<StitchedScene> {
    let (gt_a, gt_b) = match (&a.gt, &b.gt) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Config("stitching needs ground truth on both scenes".into())),
    };
    if gt_a.target_class == gt_b.target_class {
        return Err(Error::Config("stitched scenes must have different target classes".into()));
    }
    if a.exemplars.len() != 3 || b.exemplars.len() != 3 {
        return Err(Error::Config("stitching expects exactly three exemplars per scene".into()));
    }
    let (a, _) = rescale_scene(a)?;
    let (b, _) = rescale_scene(b)?;

    let stride_of = |s: &Scene| -> Result<usize> {
        let (fh, fw, _) = s.features.shape();
        if s.dims.0 % fh != 0 || s.dims.1 % fw != 0 || s.dims.0 / fh != s.dims.1 / fw {
            return Err(Error::Scene("stitching requires a uniform integer feature stride".into()));
        }
        Ok(s.dims.0 / fh)
    };
    let stride = stride_of(&a)?;
    if stride_of(&b)? != stride {
        return Err(Error::Scene("stitched scenes must share the feature stride".into()));
    }
    let (ch, cw) = canvas;
    if ch % stride != 0 || cw % stride != 0 {
        return Err(Error::Scene("canvas must be a multiple of the feature stride".into()));
    }

    let mut rng = SplitMix64::new(seed ^ 0x737469746368);
    let swap = rng.next_u64() & 1 == 1;
    let (left, right) = if swap { (&b, &a) } else { (&a, &b) };

    // The right scene starts at the next stride multiple after the left one.
    let right_x = left.dims.1.div_ceil(stride) * stride;
    if right_x + right.dims.1 > cw || left.dims.0 > ch || right.dims.0 > ch {
        return Err(Error::Scene(format!(
            "scenes {}x{} + {}x{} do not fit the {ch}x{cw} canvas after rescale",
            left.dims.0, left.dims.1, right.dims.0, right.dims.1
        )));
    }

    let fc = a.features.shape().2;
    let mut density = DensityMap::zeros(ch, cw);
    let mut features = Tensor::zeros(ch / stride, cw / stride, fc);
    let mut similarity = Tensor::zeros(ch / stride, cw / stride, fc);
    translate_scene_into(left, &mut density, &mut features, &mut similarity, 0, stride);
    translate_scene_into(right, &mut density, &mut features, &mut similarity, right_x, stride);

    let (a_off, b_off) = if swap { ((right_x as f32, 0.0), (0.0, 0.0)) } else { ((0.0, 0.0), (right_x as f32, 0.0)) };

    let mut exemplars = Vec::with_capacity(6);
    let mut exemplar_classes = Vec::with_capacity(6);
    for bx in &a.exemplars.boxes {
        exemplars.push(bx.translated(a_off.0, a_off.1));
        exemplar_classes.push(gt_a.target_class);
    }
    for bx in &b.exemplars.boxes {
        exemplars.push(bx.translated(b_off.0, b_off.1));
        exemplar_classes.push(gt_b.target_class);
    }

    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    for (bx, &cls) in gt_a.boxes.iter().zip(&gt_a.classes) {
        boxes.push(bx.translated(a_off.0, a_off.1));
        classes.push(cls);
    }
    for (bx, &cls) in gt_b.boxes.iter().zip(&gt_b.classes) {
        boxes.push(bx.translated(b_off.0, b_off.1));
        classes.push(cls);
    }

    let scene = Scene {
        dims: canvas,
        density,
        features,
        similarity,
        exemplars: ExemplarSet::new(exemplars),
        gt: Some(crate::scene::GroundTruth { boxes, classes, target_class: gt_a.target_class }),
        class_embeddings: a.class_embeddings.clone().or_else(|| b.class_embeddings.clone()),
        prompt_embedding: None,
        meta: Default::default(),
    };
    Ok(StitchedScene { scene, exemplar_classes, offset_a: a_off, offset_b: b_off })
}

fn verifier_params_mut(w: &mut VerifierWeights) -> Vec<&mut Vec<f64>> {
    vec![
        &mut w.conv1.weight,
        &mut w.conv1.bias,
        &mut w.bn.gamma,
        &mut w.bn.beta,
        &mut w.conv2.weight,
        &mut w.conv2.bias,
    ]
}

/// Forward/backward of the verifier projection over a batch of pooled
/// patches, returning per-feature unit embeddings and accepting their
/// gradients. BatchNorm uses batch statistics and updates the running ones.
struct ProjectionBatch {
    pooled: Vec<Volume>,
    bn_cache: crate::nn::BatchNormCache,
    bn_out: Vec<Volume>,
    relu_out: Vec<Volume>,
    conv2_out: Vec<Volume>,
    means: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

fn projection_forward(pooled: Vec<Volume>, w: &mut VerifierWeights) -> Result<ProjectionBatch> {
    let conv1_out: Vec<Volume> =
        pooled.iter().map(|p| conv2d(p, &w.conv1, Padding::Zeros)).collect::<Result<_>>()?;
    let (bn_out, bn_cache) = batch_norm_train(&conv1_out, &mut w.bn)?;
    let relu_out: Vec<Volume> = bn_out.iter().map(relu).collect();
    let conv2_out: Vec<Volume> =
        relu_out.iter().map(|p| conv2d(p, &w.conv2, Padding::Zeros)).collect::<Result<_>>()?;
    let means: Vec<Vec<f64>> = conv2_out.iter().map(spatial_mean).collect();
    let embeddings: Vec<Vec<f64>> = means.iter().map(|m| l2_normalize(m)).collect::<Result<_>>()?;
    Ok(ProjectionBatch { pooled, bn_cache, bn_out, relu_out, conv2_out, means, embeddings })
}

fn projection_backward(
    batch: &ProjectionBatch,
    d_embeddings: &[Vec<f64>],
    w: &VerifierWeights,
) -> Result<Vec<Vec<f64>>> {
    let mut g_conv1 = w.conv1.grad_zeros();
    let mut g_conv2 = w.conv2.grad_zeros();
    let mut d_relu_outs = Vec::with_capacity(batch.pooled.len());
    for i in 0..batch.pooled.len() {
        let d_mean = l2_normalize_backward(&batch.means[i], &d_embeddings[i]);
        let d_conv2_out = spatial_mean_backward(&d_mean, batch.conv2_out[i].h, batch.conv2_out[i].w);
        let (d_relu, g2) = conv2d_backward(&batch.relu_out[i], &w.conv2, Padding::Zeros, &d_conv2_out)?;
        for (a, b) in g_conv2.weight.iter_mut().zip(&g2.weight) {
            *a += b;
        }
        for (a, b) in g_conv2.bias.iter_mut().zip(&g2.bias) {
            *a += b;
        }
        d_relu_outs.push(relu_backward(&batch.bn_out[i], &d_relu));
    }
    let (d_conv1_outs, d_gamma, d_beta) = batch_norm_train_backward(&w.bn, &batch.bn_cache, &d_relu_outs);
    for (i, d_conv1_out) in d_conv1_outs.iter().enumerate() {
        let (_, g1) = conv2d_backward(&batch.pooled[i], &w.conv1, Padding::Zeros, d_conv1_out)?;
        for (a, b) in g_conv1.weight.iter_mut().zip(&g1.weight) {
            *a += b;
        }
        for (a, b) in g_conv1.bias.iter_mut().zip(&g1.bias) {
            *a += b;
        }
    }
    Ok(vec![g_conv1.weight, g_conv1.bias, d_gamma, d_beta, g_conv2.weight, g_conv2.bias])
}

/// Train the verifier projection on stitched different-class pairs. Returns
/// the per-epoch mean pair loss. Only projection parameters change.
pub fn train_phase2(
    pairs: &[(Scene, Scene)],
    weights: &mut VerifierWeights,
    tcfg: &TrainConfig,
    pcfg: &PipelineConfig,
) -> Result<TrainReport> {
    tcfg.validate()?;
    pcfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut stitched = Vec::with_capacity(pairs.len());
    for (i, (a, b)) in pairs.iter().enumerate() {
        stitched.push(stitch(a, b, tcfg.canvas, tcfg.seed ^ (i as u64))?);
    }

    let opt = AdamW::new(tcfg.phase2.learning_rate, tcfg.phase2.weight_decay);
    let mut states: Vec<AdamState> =
        verifier_params_mut(weights).iter().map(|p| AdamState::for_len(p.len())).collect();
    let mut rng = SplitMix64::new(tcfg.seed ^ 0x70686173653262);
    let mut curve = Vec::with_capacity(tcfg.phase2.epochs);

    for _epoch in 0..tcfg.phase2.epochs {
        let mut order: Vec<usize> = (0..stitched.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_pairs = 0usize;
        for batch in order.chunks(tcfg.phase2.batch_size) {
            // Pool all six exemplar patches of every sample in the batch.
            let mut pooled = Vec::new();
            let mut classes = Vec::new();
            for &i in batch {
                let st = &stitched[i];
                let features = Volume::from_tensor(&st.scene.features);
                for (bx, &cls) in st.scene.exemplars.boxes.iter().zip(&st.exemplar_classes) {
                    pooled.push(pool_box(&features, st.scene.dims, bx, pcfg.pool_size)?);
                    classes.push(cls);
                }
            }
            let fwd = projection_forward(pooled, weights)?;
            // All intra/inter pairs among each sample's six features.
            let mut d_embeddings = vec![vec![0.0; fwd.embeddings[0].len()]; fwd.embeddings.len()];
            let mut batch_loss = 0.0;
            let mut pair_count = 0usize;
            for (s, _) in batch.iter().enumerate() {
                let base = s * 6;
                for i in 0..6 {
                    for j in (i + 1)..6 {
                        let (ia, ib) = (base + i, base + j);
                        let same = classes[ia] == classes[ib];
                        let (loss, da, db) =
                            contrastive_loss(&fwd.embeddings[ia], &fwd.embeddings[ib], same, tcfg.margin);
                        batch_loss += loss;
                        pair_count += 1;
                        for (g, v) in d_embeddings[ia].iter_mut().zip(&da) {
                            *g += v;
                        }
                        for (g, v) in d_embeddings[ib].iter_mut().zip(&db) {
                            *g += v;
                        }
                    }
                }
            }
            let scale = 1.0 / pair_count as f64;
            for d in &mut d_embeddings {
                for v in d.iter_mut() {
                    *v *= scale;
                }
            }
            epoch_loss += batch_loss;
            epoch_pairs += pair_count;
            let grads = projection_backward(&fwd, &d_embeddings, weights)?;
            for ((param, grad), state) in verifier_params_mut(weights).into_iter().zip(&grads).zip(&mut states) {
                adamw_step(param, grad, state, &opt)?;
            }
        }
        curve.push(epoch_loss / epoch_pairs as f64);
    }
    Ok(TrainReport { epoch_loss: curve, optimizer_state: states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FusionMode;
    use crate::geometry::BoundingBox;
    use crate::synth::{gen_scene, gt_box_field, ClassSpec, SceneSpec};

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::for_len(3);
        adamw_step(&mut p, &g, &mut st, &AdamW::new(0.1, 0.0)).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adamw_first_step_is_signed_unit_step() {
        let mut p = vec![0.5, -0.5, 2.0];
        let g = vec![0.3, -0.7, 0.0001];
        let mut st = AdamState::for_len(3);
        let lr = 0.01;
        adamw_step(&mut p, &g, &mut st, &AdamW::new(lr, 0.0)).unwrap();
        for (i, (&orig, &grad)) in [0.5, -0.5, 2.0].iter().zip(&g).enumerate() {
            let expect = orig - lr * grad / (grad.abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-12, "param {i}");
        }
    }

    #[test]
    fn adamw_decay_shrinks_without_gradient() {
        let mut p = vec![4.0];
        let g = vec![0.0];
        let mut st = AdamState::for_len(1);
        let opt = AdamW::new(0.1, 0.01);
        adamw_step(&mut p, &g, &mut st, &opt).unwrap();
        assert!((p[0] - 4.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn adamw_shape_mismatch_is_an_error() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::for_len(2);
        assert!(adamw_step(&mut p, &[1.0], &mut st, &AdamW::new(0.1, 0.0)).is_err());
    }

    #[test]
    fn contrastive_fixtures() {
        let a = vec![1.0, 0.0];
        let same = contrastive_loss(&a, &a, true, 0.2);
        assert!(same.0.abs() < 1e-12);
        let b = vec![0.0, 1.0];
        let diff = contrastive_loss(&a, &b, false, 0.2);
        assert_eq!(diff.0, 0.0);
        // cos = 0.5 against margin 0.2 -> 0.3.
        let c = vec![0.5, 3.0f64.sqrt() / 2.0];
        let (loss, _, _) = contrastive_loss(&a, &c, false, 0.2);
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(55);
        let mut checked = 0;
        while checked < 50 {
            let a = rng.unit_vector(6);
            let b = rng.unit_vector(6);
            let margin = 0.2;
            let same = rng.next_u64() & 1 == 0;
            let (_, da, db) = contrastive_loss(&a, &b, same, margin);
            // Guard band around the hinge.
            let c = crate::nn::cosine(&a, &b);
            if !same && (c - margin).abs() < 1e-3 {
                continue;
            }
            let h = 1e-6;
            for k in 0..6 {
                let mut ap = a.clone();
                ap[k] += h;
                let (fp, _, _) = contrastive_loss(&ap, &b, same, margin);
                ap[k] -= 2.0 * h;
                let (fm, _, _) = contrastive_loss(&ap, &b, same, margin);
                let fd = (fp - fm) / (2.0 * h);
                assert!((da[k] - fd).abs() / da[k].abs().max(fd.abs()).max(1e-3) < 1e-4);
                let mut bp = b.clone();
                bp[k] += h;
                let (fp, _, _) = contrastive_loss(&a, &bp, same, margin);
                bp[k] -= 2.0 * h;
                let (fm, _, _) = contrastive_loss(&a, &bp, same, margin);
                let fd = (fp - fm) / (2.0 * h);
                assert!((db[k] - fd).abs() / db[k].abs().max(fd.abs()).max(1e-3) < 1e-4);
            }
            checked += 1;
        }
    }

    #[test]
    fn box_loss_zero_on_exact_field() {
        let spec = SceneSpec { seed: 41, ..Default::default() };
        let scene = gen_scene(&spec).unwrap();
        let field = gt_box_field(&scene).unwrap();
        let (loss, grad) = box_loss(&field, &scene.exemplars).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
        assert!(grad.data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn box_loss_disjoint_fixture() {
        // GT is a unit box; the field at its center pixel decodes to a
        // disjoint unit box two pixels to the right: giou = -1/3.
        let gt = BoundingBox::new(10.0, 10.0, 11.0, 11.0).unwrap();
        let mut field = Volume::zeros(24, 24, 4);
        field.set(10, 10, 0, -2.0);
        field.set(10, 10, 1, 0.0);
        field.set(10, 10, 2, 3.0);
        field.set(10, 10, 3, 1.0);
        let field = BoxField { field };
        let exemplars = ExemplarSet::new(vec![gt]);
        let (loss, _) = box_loss(&field, &exemplars).unwrap();
        assert!((loss - 4.0 / 3.0).abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn box_loss_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(7);
        let gt = BoundingBox::new(8.0, 6.0, 18.0, 16.0).unwrap();
        let exemplars = ExemplarSet::new(vec![gt]);
        let mut field = Volume::zeros(24, 24, 4);
        for v in &mut field.data {
            *v = rng.range_f64(0.5, 6.0);
        }
        let bf = BoxField { field };
        let (_, grad) = box_loss(&bf, &exemplars).unwrap();
        let h = 1e-6;
        // Probe the supervised pixels.
        let (cx, cy) = (13usize, 11usize);
        for ch in 0..4 {
            let idx = bf.field.idx(cy, cx, ch);
            let mut plus = bf.clone();
            plus.field.data[idx] += h;
            let (fp, _) = box_loss(&plus, &exemplars).unwrap();
            let mut minus = bf.clone();
            minus.field.data[idx] -= h;
            let (fm, _) = box_loss(&minus, &exemplars).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = grad.data[idx];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3) < 1e-4, "ch {ch}: {a} vs {fd}");
        }
    }

    #[test]
    fn box_loss_center_outside_map_errors() {
        let field = BoxField { field: Volume::zeros(8, 8, 4) };
        let exemplars =
            ExemplarSet::new(vec![BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap()]);
        assert!(box_loss(&field, &exemplars).is_err());
    }

    fn phase1_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            dims: (64, 64),
            classes: vec![ClassSpec { count: 4, size_range: (6, 6) }],
            noise: 0.02,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_keeps_weights() {
        let scene = gen_scene(&phase1_spec(1)).unwrap();
        let mut w = DetectWeights::init(8, 8, 0);
        let before = w.clone();
        let mut tcfg = TrainConfig::default();
        tcfg.phase1.epochs = 0;
        tcfg.canvas = (64, 64);
        let pcfg = PipelineConfig::default();
        let report = train_phase1(&[scene], &mut w, &tcfg, &pcfg).unwrap();
        assert!(report.epoch_loss.is_empty());
        assert_eq!(w, before);
    }

    #[test]
    fn single_scene_overfit_drives_loss_down() {
        let scene = gen_scene(&phase1_spec(5)).unwrap();
        let mut w = DetectWeights::init(8, 8, 3);
        let mut tcfg = TrainConfig::default();
        tcfg.canvas = (64, 64);
        tcfg.phase1 = crate::config::PhaseConfig {
            learning_rate: 2e-2,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 200,
        };
        let pcfg = PipelineConfig { channels: 8, fusion: FusionMode::Ffm, ..Default::default() };
        let curve = train_phase1(&[scene], &mut w, &tcfg, &pcfg).unwrap().epoch_loss;
        let last = *curve.last().unwrap();
        assert!(last < 0.1, "final loss {last} (start {})", curve[0]);
        assert!(curve[0] > last);
    }

    #[test]
    fn phase1_is_deterministic() {
        let scenes: Vec<Scene> = (0..3).map(|i| gen_scene(&phase1_spec(i)).unwrap()).collect();
        let mut tcfg = TrainConfig::default();
        tcfg.canvas = (64, 64);
        tcfg.phase1.epochs = 2;
        tcfg.phase1.batch_size = 2;
        let pcfg = PipelineConfig::default();
        let mut w1 = DetectWeights::init(8, 8, 9);
        let c1 = train_phase1(&scenes, &mut w1, &tcfg, &pcfg).unwrap().epoch_loss;
        let mut w2 = DetectWeights::init(8, 8, 9);
        let c2 = train_phase1(&scenes, &mut w2, &tcfg, &pcfg).unwrap().epoch_loss;
        assert_eq!(w1, w2);
        assert_eq!(c1, c2);
    }

    fn pair_specs(seed: u64) -> (SceneSpec, SceneSpec) {
        let base = SceneSpec {
            dims: (64, 64),
            classes: vec![
                ClassSpec { count: 4, size_range: (8, 10) },
                ClassSpec { count: 4, size_range: (8, 10) },
            ],
            noise: 0.05,
            ..Default::default()
        };
        let mut a = base.clone();
        a.seed = seed;
        a.target_class = 0;
        let mut b = base;
        b.seed = seed ^ 0xabcdef;
        b.target_class = 1;
        (a, b)
    }

    #[test]
    fn stitch_produces_six_labeled_boxes() {
        let (sa, sb) = pair_specs(100);
        let a = gen_scene(&sa).unwrap();
        let b = gen_scene(&sb).unwrap();
        let st = stitch(&a, &b, (128, 192), 7).unwrap();
        assert_eq!(st.scene.exemplars.len(), 6);
        assert_eq!(st.exemplar_classes, vec![0, 0, 0, 1, 1, 1]);
        // Density mass adds up.
        let total = a.density.sum() + b.density.sum();
        assert!((st.scene.density.sum() - total).abs() < 1e-3);
        // B's boxes are offset by exactly the placement translation.
        let st_gt = st.scene.gt.as_ref().unwrap();
        let n_a = a.gt.as_ref().unwrap().boxes.len();
        for (orig, moved) in b.gt.as_ref().unwrap().boxes.iter().zip(&st_gt.boxes[n_a..]) {
            assert!((moved.x1 - orig.x1 - st.offset_b.0).abs() < 1e-5);
            assert!((moved.y1 - orig.y1 - st.offset_b.1).abs() < 1e-5);
        }
    }

    #[test]
    fn stitch_rejects_same_class_and_oversize() {
        let (sa, _) = pair_specs(3);
        let a = gen_scene(&sa).unwrap();
        assert!(matches!(stitch(&a, &a, (128, 192), 0), Err(Error::Config(_))));
        let (sa, sb) = pair_specs(4);
        let a = gen_scene(&sa).unwrap();
        let b = gen_scene(&sb).unwrap();
        assert!(matches!(stitch(&a, &b, (64, 64), 0), Err(Error::Scene(_))));
    }

    #[test]
    fn phase2_saturated_margin_reduces_to_intra_term() {
        // With margin 1 every different-class hinge is inactive, so the loss
        // equals the mean intra-class term.
        let (sa, sb) = pair_specs(200);
        let a = gen_scene(&sa).unwrap();
        let b = gen_scene(&sb).unwrap();
        let mut w = VerifierWeights::init(8, 77);
        let mut tcfg = TrainConfig::default();
        tcfg.canvas = (128, 192);
        tcfg.margin = 1.0;
        tcfg.phase2.epochs = 1;
        tcfg.phase2.batch_size = 1;
        let pcfg = PipelineConfig::default();
        let pairs = vec![(a.clone(), b.clone())];
        let mut w_clone = w.clone();
        let curve = train_phase2(&pairs, &mut w, &tcfg, &pcfg).unwrap().epoch_loss;

        // Recompute the expected first-batch loss with the pristine weights:
        // only intra-class pairs can contribute.
        let st = stitch(&a, &b, tcfg.canvas, tcfg.seed ^ 0).unwrap();
        let features = Volume::from_tensor(&st.scene.features);
        let pooled: Vec<Volume> = st
            .scene
            .exemplars
            .boxes
            .iter()
            .map(|bx| pool_box(&features, st.scene.dims, bx, pcfg.pool_size).unwrap())
            .collect();
        let fwd = projection_forward(pooled, &mut w_clone).unwrap();
        let mut intra = 0.0;
        for i in 0..6 {
            for j in (i + 1)..6 {
                if st.exemplar_classes[i] == st.exemplar_classes[j] {
                    let (l, _, _) =
                        contrastive_loss(&fwd.embeddings[i], &fwd.embeddings[j], true, 1.0);
                    intra += l;
                }
            }
        }
        assert!((curve[0] - intra / 15.0).abs() < 1e-9);
    }

    #[test]
    fn phase_isolation_between_heads() {
        let (sa, sb) = pair_specs(300);
        let a = gen_scene(&sa).unwrap();
        let b = gen_scene(&sb).unwrap();
        let mut dw = DetectWeights::init(8, 8, 1);
        let mut vw = VerifierWeights::init(8, 2);
        let vw_before = vw.clone();
        let mut tcfg = TrainConfig::default();
        tcfg.canvas = (128, 192);
        tcfg.phase1.epochs = 1;
        tcfg.phase2.epochs = 1;
        tcfg.phase2.batch_size = 2;
        let pcfg = PipelineConfig::default();
        train_phase1(&[a.clone(), b.clone()], &mut dw, &tcfg, &pcfg).unwrap();
        assert_eq!(vw, vw_before, "phase 1 must not touch the verifier");
        let dw_after_phase1 = dw.clone();
        train_phase2(&[(a, b)], &mut vw, &tcfg, &pcfg).unwrap();
        assert_ne!(vw, vw_before);
        assert_eq!(dw, dw_after_phase1, "phase 2 must not touch the detector");
    }
}
