//! Verification stage: embed candidates, cluster, select inliers, correct
//! the density map.
//!
//! Each candidate box is pooled from the backbone features into an
//! `s x s x d` patch and projected to a unit feature vector. Features are
//! clustered on their cosine affinity; cluster selection depends on the
//! counting mode (exemplar membership, relative size, or prompt similarity).
//! Density outside the surviving boxes is zeroed, which corrects the
//! density-based count.

use std::collections::BTreeSet;

use crate::cluster::{affinity, spectral_cluster, ClusterResult};
use crate::config::{CountingMode, PipelineConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::nn::{
    batch_norm_infer, conv2d, cosine, l2_normalize, relu, spatial_mean, BatchNorm, Conv2d, Padding,
    Volume,
};
use crate::parallel;
use crate::rng::SplitMix64;
use crate::scene::Scene;
use crate::tensor::DensityMap;

/// Verifier projection: two 1x1 convolutions with BatchNorm and ReLU in
/// between. Inference uses the stored running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierWeights {
    pub conv1: Conv2d,
    pub bn: BatchNorm,
    pub conv2: Conv2d,
}

impl VerifierWeights {
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed ^ 0x76657269);
        Self {
            conv1: Conv2d::glorot(1, 1, d, d, &mut rng),
            bn: BatchNorm::identity(d),
            conv2: Conv2d::glorot(1, 1, d, d, &mut rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.c_in
    }
}

/// Continuous bilinear sample of a feature grid; pixel centers sit at
/// half-integer coordinates, borders replicate.
fn bilinear_sample(f: &Volume, x: f64, y: f64, out: &mut [f64]) {
    let u = (x - 0.5).clamp(0.0, (f.w - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (f.h - 1) as f64);
    let x0 = (u.floor() as usize).min(f.w - 1);
    let y0 = (v.floor() as usize).min(f.h - 1);
    let x1 = (x0 + 1).min(f.w - 1);
    let y1 = (y0 + 1).min(f.h - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    for ch in 0..f.c {
        let a = f.get(y0, x0, ch);
        let b = f.get(y0, x1, ch);
        let c = f.get(y1, x0, ch);
        let d = f.get(y1, x1, ch);
        let top = a + fx * (b - a);
        let bot = c + fx * (d - c);
        out[ch] = top + fy * (bot - top);
    }
}

/// Pool a box into an `s x s x d` patch: the box is mapped onto the feature
/// grid, split into an `s x s` lattice of equal cells, and each cell is
/// bilinearly sampled at its center.
pub fn pool_box(
    features: &Volume,
    image_dims: (usize, usize),
    b: &BoundingBox,
    s: usize,
) -> Result<Volume> {
    let (hh, ww) = image_dims;
    let sx = features.w as f64 / ww as f64;
    let sy = features.h as f64 / hh as f64;
    let fx1 = b.x1 as f64 * sx;
    let fx2 = b.x2 as f64 * sx;
    let fy1 = b.y1 as f64 * sy;
    let fy2 = b.y2 as f64 * sy;
    if fx2 - fx1 <= 0.0 || fy2 - fy1 <= 0.0 {
        return Err(Error::Scene(format!(
            "box ({}, {}, {}, {}) has zero area on the feature grid",
            b.x1, b.y1, b.x2, b.y2
        )));
    }
    let cell_w = (fx2 - fx1) / s as f64;
    let cell_h = (fy2 - fy1) / s as f64;
    let mut out = Volume::zeros(s, s, features.c);
    let mut sample = vec![0.0; features.c];
    for i in 0..s {
        let cy = fy1 + (i as f64 + 0.5) * cell_h;
        for j in 0..s {
            let cx = fx1 + (j as f64 + 0.5) * cell_w;
            bilinear_sample(features, cx, cy, &mut sample);
            for ch in 0..features.c {
                out.set(i, j, ch, sample[ch]);
            }
        }
    }
    Ok(out)
}

/// Project a pooled patch to a unit verification feature:
/// conv1 -> BatchNorm (running stats) -> ReLU -> conv2 -> spatial mean ->
/// L2 normalization. A zero vector before normalization is an error.
pub fn embed(pooled: &Volume, w: &VerifierWeights) -> Result<Vec<f64>> {
    let a = conv2d(pooled, &w.conv1, Padding::Zeros)?;
    let b = batch_norm_infer(&a, &w.bn)?;
    let c = relu(&b);
    let d = conv2d(&c, &w.conv2, Padding::Zeros)?;
    l2_normalize(&spatial_mean(&d))
}

/// Ablation path: skip the projection, use the normalized pooled mean.
pub fn embed_raw(pooled: &Volume) -> Result<Vec<f64>> {
    l2_normalize(&spatial_mean(pooled))
}

/// Keep clusters that contain at least one exemplar feature.
pub fn select_fewshot(cr: &ClusterResult, exemplar_ids: &[usize]) -> BTreeSet<usize> {
    exemplar_ids.iter().map(|&i| cr.labels[i]).collect()
}

/// Keep clusters whose size is at least `ratio` of the largest cluster's.
pub fn select_zeroshot(cr: &ClusterResult, ratio: f64) -> BTreeSet<usize> {
    let sizes = cr.sizes();
    let max = sizes.iter().copied().max().unwrap_or(0) as f64;
    sizes
        .iter()
        .enumerate()
        .filter(|(_, &sz)| sz as f64 >= ratio * max)
        .map(|(c, _)| c)
        .collect()
}

/// Keep clusters whose prompt similarity reaches `ratio` of the best one.
/// `cluster_embeddings` holds one embedding per cluster id.
pub fn select_prompt(
    cluster_embeddings: &[Vec<f64>],
    text_embedding: &[f64],
    ratio: f64,
) -> BTreeSet<usize> {
    let sims: Vec<f64> = cluster_embeddings
        .iter()
        .map(|e| cosine(e, text_embedding))
        .collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    sims.iter()
        .enumerate()
        .filter(|(_, &s)| s >= ratio * max)
        .map(|(c, _)| c)
        .collect()
}

/// Zero the density outside the kept boxes. A pixel survives iff its center
/// lies inside or on the boundary of at least one box.
pub fn correct_density(g: &DensityMap, kept_boxes: &[BoundingBox]) -> DensityMap {
    let (h, w) = g.dims();
    let mut mask = vec![false; h * w];
    for b in kept_boxes {
        // Pixel center (x + 0.5, y + 0.5) inside [x1, x2] x [y1, y2].
        let x_start = (b.x1 as f64 - 0.5).ceil().max(0.0) as usize;
        let x_end = ((b.x2 as f64 - 0.5).floor() as isize).min(w as isize - 1);
        let y_start = (b.y1 as f64 - 0.5).ceil().max(0.0) as usize;
        let y_end = ((b.y2 as f64 - 0.5).floor() as isize).min(h as isize - 1);
        if x_end < x_start as isize || y_end < y_start as isize {
            continue;
        }
        for y in y_start..=y_end as usize {
            for x in x_start..=x_end as usize {
                mask[y * w + x] = true;
            }
        }
    }
    let mut out = DensityMap::zeros(h, w);
    for i in 0..h * w {
        if mask[i] {
            out.data_mut()[i] = g.data()[i];
        }
    }
    out
}

/// Verification verdict for one scene.
#[derive(Debug, Clone)]
pub struct VerifyOutput {
    /// Verified boxes, in candidate order.
    pub kept_boxes: Vec<BoundingBox>,
    /// Indices of the verified candidates.
    pub kept_indices: Vec<usize>,
    /// Per-candidate outlier flag (`true` = removed).
    pub outliers: Vec<bool>,
    /// Per-candidate cluster label.
    pub cluster_labels: Vec<usize>,
    pub kept_clusters: BTreeSet<usize>,
    pub cluster_count: usize,
    /// Density map after zeroing outside the verified boxes.
    pub corrected: DensityMap,
    /// Sum of the corrected map.
    pub density_count: f64,
    /// Number of verified detections.
    pub box_count: usize,
}

fn empty_output(g: &DensityMap) -> VerifyOutput {
    let (h, w) = g.dims();
    VerifyOutput {
        kept_boxes: Vec::new(),
        kept_indices: Vec::new(),
        outliers: Vec::new(),
        cluster_labels: Vec::new(),
        kept_clusters: BTreeSet::new(),
        cluster_count: 0,
        corrected: DensityMap::zeros(h, w),
        density_count: 0.0,
        box_count: 0,
    }
}

/// Mean embedding of the classes best overlapping each cluster's members;
/// used to score clusters against the text prompt when no per-cluster
/// embeddings are ingested.
fn cluster_embeddings_from_classes(
    candidates: &[BoundingBox],
    labels: &[usize],
    k: usize,
    scene: &Scene,
) -> Result<Vec<Vec<f64>>> {
    let gt = scene
        .gt
        .as_ref()
        .ok_or_else(|| Error::Config("prompt mode needs ground-truth boxes or ingested cluster embeddings".into()))?;
    let class_embeddings = scene
        .class_embeddings
        .as_ref()
        .ok_or_else(|| Error::Config("prompt mode needs class embeddings in the scene manifest".into()))?;
    let dim = class_embeddings.first().map(|e| e.len()).unwrap_or(0);
    let mut sums = vec![vec![0.0f64; dim]; k];
    let mut counts = vec![0usize; k];
    for (b, &label) in candidates.iter().zip(labels) {
        // Best-overlap object decides the candidate's class.
        let mut best_iou = 0.0;
        let mut best_class: Option<u32> = None;
        for (gb, &cls) in gt.boxes.iter().zip(&gt.classes) {
            let v = iou(b, gb);
            if v > best_iou {
                best_iou = v;
                best_class = Some(cls);
            }
        }
        if let Some(cls) = best_class {
            let emb = class_embeddings.get(cls as usize).ok_or_else(|| {
                Error::Config(format!("class {cls} has no embedding in the manifest"))
            })?;
            for (s, &e) in sums[label].iter_mut().zip(emb) {
                *s += e as f64;
            }
            counts[label] += 1;
        }
    }
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        if counts[c] == 0 {
            // No overlap information: a zero embedding scores 0 against any
            // prompt and is only kept if every cluster is equally unknown.
            out.push(vec![0.0; dim]);
        } else {
            let normalized = l2_normalize(&sums[c]).unwrap_or_else(|_| vec![0.0; dim]);
            out.push(normalized);
        }
    }
    Ok(out)
}

/// Run verification on the detection candidates.
///
/// Exemplar features join the clustering only in few-shot mode. `B^P` is
/// always a subset of the candidates, in candidate order, and the corrected
/// count never exceeds the uncorrected one.
pub fn verify_stage(
    candidates: &[BoundingBox],
    scene: &Scene,
    w: &VerifierWeights,
    cfg: &PipelineConfig,
    mode: CountingMode,
) -> Result<VerifyOutput> {
    cfg.validate()?;
    if mode == CountingMode::Fewshot && scene.exemplars.is_empty() {
        return Err(Error::Config("few-shot verification requires exemplars".into()));
    }
    if mode == CountingMode::Prompt && scene.prompt_embedding.is_none() {
        return Err(Error::Config("prompt mode requires a prompt embedding".into()));
    }
    if candidates.is_empty() {
        return Ok(empty_output(&scene.density));
    }
    let features = Volume::from_tensor(&scene.features);
    if features.c != w.channels() {
        return Err(Error::DimMismatch(format!(
            "features have {} channels, verifier expects {}",
            features.c,
            w.channels()
        )));
    }

    // Candidate features, then exemplar features (few-shot only).
    let mut boxes: Vec<BoundingBox> = candidates.to_vec();
    let n_candidates = boxes.len();
    if mode == CountingMode::Fewshot {
        boxes.extend(scene.exemplars.boxes.iter().copied());
    }
    let feats: Vec<Result<Vec<f64>>> = parallel::map_collect(&boxes, |b| {
        let pooled = pool_box(&features, scene.dims, b, cfg.pool_size)?;
        if cfg.use_projection {
            embed(&pooled, w)
        } else {
            embed_raw(&pooled)
        }
    });
    let mut all_features = Vec::with_capacity(feats.len());
    for f in feats {
        all_features.push(f?);
    }

    let aff = affinity(&all_features);
    let cr = spectral_cluster(&aff, cfg.max_clusters, cfg.seed);

    let kept_clusters = match mode {
        CountingMode::Fewshot => {
            let exemplar_ids: Vec<usize> = (n_candidates..all_features.len()).collect();
            select_fewshot(&cr, &exemplar_ids)
        }
        CountingMode::Zeroshot => select_zeroshot(&cr, cfg.zero_shot_ratio),
        CountingMode::Prompt => {
            let text: Vec<f64> = scene
                .prompt_embedding
                .as_ref()
                .unwrap()
                .iter()
                .map(|&v| v as f64)
                .collect();
            let cluster_embs =
                cluster_embeddings_from_classes(candidates, &cr.labels[..n_candidates], cr.k, scene)?;
            select_prompt(&cluster_embs, &text, cfg.prompt_ratio)
        }
    };

    let cluster_labels: Vec<usize> = cr.labels[..n_candidates].to_vec();
    let mut kept_boxes = Vec::new();
    let mut kept_indices = Vec::new();
    let mut outliers = vec![true; n_candidates];
    for (i, (&label, b)) in cluster_labels.iter().zip(candidates).enumerate() {
        if kept_clusters.contains(&label) {
            kept_boxes.push(*b);
            kept_indices.push(i);
            outliers[i] = false;
        }
    }

    let corrected = correct_density(&scene.density, &kept_boxes);
    let density_count = corrected.sum();
    let box_count = kept_boxes.len();
    Ok(VerifyOutput {
        kept_boxes,
        kept_indices,
        outliers,
        cluster_labels,
        kept_clusters,
        cluster_count: cr.k,
        corrected,
        density_count,
        box_count,
    })
}
