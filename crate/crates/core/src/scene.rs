//! Scene bundle and preprocessing.
//!
//! A [`Scene`] collects everything the pipeline ingests for one image: the
//! location density map, backbone features, the exemplar-similarity tensor,
//! exemplar boxes, and optional ground truth and embeddings. Image pixels are
//! never part of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tensor::{bilinear_resample, resample_density_mass_preserving, DensityMap, Tensor};

/// Exemplar boxes designating the target category (`k` in {0, 1, 3};
/// empty only in zero-shot / prompt mode).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExemplarSet {
    pub boxes: Vec<BoundingBox>,
}

impl ExemplarSet {
    pub fn new(boxes: Vec<BoundingBox>) -> Self {
        Self { boxes }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Mean of the exemplars' (width + height) / 2.
    pub fn mean_extent(&self) -> Result<f64> {
        if self.boxes.is_empty() {
            return Err(Error::Config("no exemplars available for size estimation".into()));
        }
        let mut acc = 0.0;
        for b in &self.boxes {
            if b.area() <= 0.0 {
                return Err(Error::DegenerateExemplar);
            }
            acc += b.extent();
        }
        Ok(acc / self.boxes.len() as f64)
    }
}

/// Annotated objects: one box and one class id per object, plus the id of the
/// class being counted.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BoundingBox>,
    pub classes: Vec<u32>,
    pub target_class: u32,
}

impl GroundTruth {
    pub fn target_boxes(&self) -> Vec<BoundingBox> {
        self.boxes
            .iter()
            .zip(&self.classes)
            .filter(|(_, &c)| c == self.target_class)
            .map(|(b, _)| *b)
            .collect()
    }

    pub fn target_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c == self.target_class).count()
    }
}

/// Extra generator-recorded facts, carried through the manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    /// Fraction of distractor mass injected into the density map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leakage_alpha: Option<f64>,
    /// Total injected distractor mass (alpha times distractor count).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaked_mass: Option<f64>,
}

/// One image worth of pipeline inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Image dimensions `(H0, W0)`; the density map matches them.
    pub dims: (usize, usize),
    pub density: DensityMap,
    /// Backbone features, `h x w x c` with `h <= H0`, `w <= W0`.
    pub features: Tensor,
    /// Exemplar-correlation tensor, same grid as `features`.
    pub similarity: Tensor,
    pub exemplars: ExemplarSet,
    pub gt: Option<GroundTruth>,
    /// Per-class unit embeddings, indexed by class id.
    pub class_embeddings: Option<Vec<Vec<f32>>>,
    /// Text-prompt unit embedding for prompt-based selection.
    pub prompt_embedding: Option<Vec<f32>>,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let (hh, ww) = self.dims;
        if self.density.dims() != (hh, ww) {
            return Err(Error::Scene(format!(
                "density dims {:?} do not match scene dims {:?}",
                self.density.dims(),
                self.dims
            )));
        }
        let (fh, fw, _) = self.features.shape();
        if fh > hh || fw > ww {
            return Err(Error::Scene("feature grid larger than the image".into()));
        }
        if self.similarity.shape() != self.features.shape() {
            return Err(Error::Scene("similarity tensor shape differs from features".into()));
        }
        if let Some(gt) = &self.gt {
            if gt.boxes.len() != gt.classes.len() {
                return Err(Error::Scene("gt_boxes and gt_classes lengths differ".into()));
            }
        }
        Ok(())
    }

    pub fn gt_target_count(&self) -> Option<usize> {
        self.gt.as_ref().map(|g| g.target_count())
    }
}

/// Resize rule bounds: the mean exemplar extent is brought into `[10, 50]`
/// pixels (identity when already inside).
pub const EXTENT_MIN: f64 = 10.0;
pub const EXTENT_MAX: f64 = 50.0;

/// Scale factor that maps `extent` into the working range.
pub fn scale_for_extent(extent: f64) -> Result<f64> {
    if !(extent.is_finite() && extent > 0.0) {
        return Err(Error::DegenerateExemplar);
    }
    Ok(if extent < EXTENT_MIN {
        EXTENT_MIN / extent
    } else if extent > EXTENT_MAX {
        EXTENT_MAX / extent
    } else {
        1.0
    })
}

/// Rescale every spatial quantity of the scene by the factor implied by the
/// exemplars' mean extent. Density mass is preserved; boxes are scaled by a
/// single scalar, so aspect ratios are untouched. Returns the scale, which
/// the caller must invert on any reported coordinates.
pub fn rescale_scene(scene: &Scene) -> Result<(Scene, f64)> {
    let extent = scene.exemplars.mean_extent()?;
    rescale_scene_with_extent(scene, extent)
}

/// Rescale using an externally estimated extent (zero-shot bootstrap path).
pub fn rescale_scene_with_extent(scene: &Scene, extent: f64) -> Result<(Scene, f64)> {
    scene.validate()?;
    let scale = scale_for_extent(extent)?;
    if scale == 1.0 {
        return Ok((scene.clone(), 1.0));
    }
    let (hh, ww) = scene.dims;
    let nh = ((hh as f64 * scale).round() as usize).max(1);
    let nw = ((ww as f64 * scale).round() as usize).max(1);
    let (fh, fw, _) = scene.features.shape();
    let nfh = ((fh as f64 * scale).round() as usize).max(1);
    let nfw = ((fw as f64 * scale).round() as usize).max(1);

    let density = resample_density_mass_preserving(&scene.density, nh, nw)?;
    let features = bilinear_resample(&scene.features, nfh, nfw)?;
    let similarity = bilinear_resample(&scene.similarity, nfh, nfw)?;
    let exemplars = ExemplarSet::new(scene.exemplars.boxes.iter().map(|b| b.scaled(scale)).collect());
    let gt = scene.gt.as_ref().map(|g| GroundTruth {
        boxes: g.boxes.iter().map(|b| b.scaled(scale)).collect(),
        classes: g.classes.clone(),
        target_class: g.target_class,
    });

    let scaled = Scene {
        dims: (nh, nw),
        density,
        features,
        similarity,
        exemplars,
        gt,
        class_embeddings: scene.class_embeddings.clone(),
        prompt_embedding: scene.prompt_embedding.clone(),
        meta: scene.meta.clone(),
    };
    Ok((scaled, scale))
}

/// Zero-pad a scene onto a fixed canvas (top-left anchored). Used by the
/// phase-1 trainer to batch scenes of equal size.
pub fn pad_scene_to_canvas(scene: &Scene, canvas: (usize, usize)) -> Result<Scene> {
    scene.validate()?;
    let (hh, ww) = scene.dims;
    let (ch, cw) = canvas;
    if hh > ch || ww > cw {
        return Err(Error::Scene(format!("scene {hh}x{ww} exceeds canvas {ch}x{cw}")));
    }
    if (hh, ww) == (ch, cw) {
        return Ok(scene.clone());
    }
    let (fh, fw, fc) = scene.features.shape();
    // Feature grid scales with the canvas by the same stride.
    let stride_y = hh / fh;
    let stride_x = ww / fw;
    if stride_y == 0 || stride_x == 0 || hh % fh != 0 || ww % fw != 0 {
        return Err(Error::Scene("padding requires an integer feature stride".into()));
    }
    if ch % stride_y != 0 || cw % stride_x != 0 {
        return Err(Error::Scene("canvas must be a multiple of the feature stride".into()));
    }
    let nfh = ch / stride_y;
    let nfw = cw / stride_x;

    let mut density = DensityMap::zeros(ch, cw);
    for y in 0..hh {
        for x in 0..ww {
            density.set(y, x, scene.density.get(y, x));
        }
    }
    let mut features = Tensor::zeros(nfh, nfw, fc);
    let mut similarity = Tensor::zeros(nfh, nfw, fc);
    for y in 0..fh {
        for x in 0..fw {
            for c in 0..fc {
                features.set(y, x, c, scene.features.get(y, x, c));
                similarity.set(y, x, c, scene.similarity.get(y, x, c));
            }
        }
    }
    Ok(Scene {
        dims: (ch, cw),
        density,
        features,
        similarity,
        exemplars: scene.exemplars.clone(),
        gt: scene.gt.clone(),
        class_embeddings: scene.class_embeddings.clone(),
        prompt_embedding: scene.prompt_embedding.clone(),
        meta: scene.meta.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box_at(x: f32, y: f32, w: f32, h: f32) -> BoundingBox {
        BoundingBox::new(x, y, x + w, y + h).unwrap()
    }

    fn simple_scene(exemplar_size: f32) -> Scene {
        let mut density = DensityMap::zeros(64, 64);
        density.set(10, 10, 1.0);
        density.set(40, 30, 2.0);
        Scene {
            dims: (64, 64),
            density,
            features: Tensor::from_fn(16, 16, 2, |y, x, c| (y + x + c) as f32 * 0.01),
            similarity: Tensor::zeros(16, 16, 2),
            exemplars: ExemplarSet::new(vec![
                box_at(5.0, 5.0, exemplar_size, exemplar_size),
                box_at(30.0, 12.0, exemplar_size, exemplar_size),
            ]),
            gt: None,
            class_embeddings: None,
            prompt_embedding: None,
            meta: SceneMeta::default(),
        }
    }

    #[test]
    fn in_range_extent_is_identity() {
        let scene = simple_scene(30.0);
        let (out, s) = rescale_scene(&scene).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(out, scene);
    }

    #[test]
    fn large_exemplars_shrink_to_the_upper_bound() {
        let scene = simple_scene(100.0);
        let before = scene.density.sum();
        let (out, s) = rescale_scene(&scene).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        let extent = out.exemplars.mean_extent().unwrap();
        assert!((extent - 50.0).abs() < 1e-4);
        assert!(((out.density.sum() - before) / before).abs() < 1e-3);
    }

    #[test]
    fn small_exemplars_grow_to_the_lower_bound() {
        let scene = simple_scene(4.0);
        let (out, s) = rescale_scene(&scene).unwrap();
        assert!((s - 2.5).abs() < 1e-12);
        let extent = out.exemplars.mean_extent().unwrap();
        assert!((extent - 10.0).abs() < 1e-4);
    }

    #[test]
    fn aspect_ratio_is_exact() {
        let mut scene = simple_scene(100.0);
        scene.exemplars = ExemplarSet::new(vec![box_at(0.0, 0.0, 120.0, 80.0)]);
        let (out, s) = rescale_scene(&scene).unwrap();
        let b = out.exemplars.boxes[0];
        let ratio_in = 120.0 / 80.0;
        let ratio_out = b.width() as f64 / b.height() as f64;
        assert!((ratio_in - ratio_out).abs() < 1e-6);
        assert!(s < 1.0);
    }

    #[test]
    fn degenerate_exemplar_is_an_error() {
        let scene = simple_scene(30.0);
        let mut bad = scene;
        // Bypass the constructor to model a corrupted input.
        bad.exemplars.boxes[0] = BoundingBox { x1: 1.0, y1: 1.0, x2: 1.0, y2: 5.0 };
        assert!(matches!(rescale_scene(&bad), Err(Error::DegenerateExemplar)));
    }

    #[test]
    fn padding_preserves_content_and_mass() {
        let scene = simple_scene(30.0);
        let padded = pad_scene_to_canvas(&scene, (128, 96)).unwrap();
        assert_eq!(padded.dims, (128, 96));
        assert!((padded.density.sum() - scene.density.sum()).abs() < 1e-9);
        assert_eq!(padded.features.shape(), (32, 24, 2));
        assert_eq!(padded.features.get(3, 7, 1), scene.features.get(3, 7, 1));
    }
}
