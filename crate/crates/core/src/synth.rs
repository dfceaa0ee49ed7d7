//! Deterministic synthetic scenes with exact ground truth.
//!
//! The generator stands in for a real backbone: each class gets a unit
//! prototype vector (pairwise cosine is configurable and exact), prototypes
//! are painted into the feature grid inside object boxes, the similarity
//! tensor is the clipped cosine against the exemplar prototype, and the
//! density map is a sum of unit-mass Gaussians at target centers. A leakage
//! knob injects fractional distractor mass into the density map to emulate
//! false activations, with the exact overestimation recorded in the scene
//! metadata.
//!
//! All output is a pure function of the spec (see [`crate::rng`] for the
//! fully documented generator), so fixtures are reproducible anywhere.

use serde::{Deserialize, Serialize};

use crate::detect::BoxField;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::nn::Volume;
use crate::rng::SplitMix64;
use crate::scene::{ExemplarSet, GroundTruth, Scene, SceneMeta};
use crate::tensor::DensityMap;

/// One object class to generate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub count: usize,
    /// Inclusive integer range of box side lengths, sampled per axis.
    pub size_range: (usize, usize),
}

/// Full recipe for one synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub dims: (usize, usize),
    /// Image pixels per feature-grid cell (both axes).
    pub feature_stride: usize,
    pub channels: usize,
    pub embedding_dim: usize,
    pub classes: Vec<ClassSpec>,
    pub target_class: u32,
    pub exemplar_count: usize,
    /// Exact pairwise cosine between class prototypes.
    pub prototype_cos: f64,
    /// Exact pairwise cosine between class embeddings.
    pub embedding_cos: f64,
    /// Density blob sigma as a fraction of the smaller box side.
    pub density_sigma_factor: f64,
    /// Std-dev of the iid feature noise.
    pub noise: f64,
    /// Fraction of distractor mass injected into the density map.
    pub leakage: f64,
    /// Minimum pixel gap between placed boxes.
    pub min_gap: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            dims: (64, 64),
            feature_stride: 2,
            channels: 8,
            embedding_dim: 16,
            classes: vec![ClassSpec { count: 5, size_range: (8, 12) }],
            target_class: 0,
            exemplar_count: 3,
            prototype_cos: 0.1,
            embedding_cos: 0.1,
            density_sigma_factor: 0.25,
            noise: 0.05,
            leakage: 0.0,
            min_gap: 2,
            max_attempts: 2000,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims;
        if h == 0 || w == 0 {
            return Err(Error::Config("scene dims must be positive".into()));
        }
        if self.feature_stride == 0 || h % self.feature_stride != 0 || w % self.feature_stride != 0 {
            return Err(Error::Config("feature_stride must divide both scene dims".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.target_class as usize >= self.classes.len() {
            return Err(Error::Config("target_class out of range".into()));
        }
        if self.channels < self.classes.len() + 1 || self.embedding_dim < self.classes.len() + 1 {
            return Err(Error::Config(
                "channels and embedding_dim must exceed the class count (prototype construction)".into(),
            ));
        }
        for (i, c) in self.classes.iter().enumerate() {
            let (lo, hi) = c.size_range;
            if lo == 0 || hi < lo || hi >= h.min(w) {
                return Err(Error::Config(format!("class {i}: bad size range {lo}..={hi}")));
            }
        }
        for (name, v) in [("prototype_cos", self.prototype_cos), ("embedding_cos", self.embedding_cos)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.leakage) {
            return Err(Error::Config("leakage must lie in [0, 1]".into()));
        }
        if self.density_sigma_factor <= 0.0 {
            return Err(Error::Config("density_sigma_factor must be positive".into()));
        }
        let target_count = self.classes[self.target_class as usize].count;
        if self.exemplar_count > target_count {
            return Err(Error::Config("exemplar_count exceeds the target object count".into()));
        }
        Ok(())
    }
}

/// Add one truncated Gaussian blob (cut at 3 sigma, renormalized over the
/// in-bounds support so its mass is exactly `mass`).
fn add_gaussian(map: &mut DensityMap, cx: f64, cy: f64, mass: f64, sigma: f64) {
    let (h, w) = map.dims();
    let radius = 3.0 * sigma;
    let x_lo = ((cx - radius - 0.5).floor().max(0.0)) as usize;
    let x_hi = ((cx + radius - 0.5).ceil() as isize).min(w as isize - 1).max(0) as usize;
    let y_lo = ((cy - radius - 0.5).floor().max(0.0)) as usize;
    let y_hi = ((cy + radius - 0.5).ceil() as isize).min(h as isize - 1).max(0) as usize;
    let r2 = radius * radius;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut weights = Vec::new();
    let mut total = 0.0;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                let wgt = (-d2 * inv).exp();
                weights.push((y, x, wgt));
                total += wgt;
            }
        }
    }
    if total <= 0.0 {
        // Degenerate support (blob entirely off-grid); drop the mass on the
        // nearest pixel to keep totals exact.
        let x = (cx - 0.5).round().clamp(0.0, (w - 1) as f64) as usize;
        let y = (cy - 0.5).round().clamp(0.0, (h - 1) as f64) as usize;
        let v = map.get(y, x) + mass as f32;
        map.set(y, x, v);
        return;
    }
    for (y, x, wgt) in weights {
        let v = map.get(y, x) + (mass * wgt / total) as f32;
        map.set(y, x, v);
    }
}

/// Render unit-mass blobs at `(x, y, mass)` centers with a shared sigma.
/// The map total equals the summed masses to within accumulation error.
pub fn render_density(h: usize, w: usize, centers: &[(f64, f64, f64)], sigma: f64) -> DensityMap {
    let mut map = DensityMap::zeros(h, w);
    for &(cx, cy, mass) in centers {
        add_gaussian(&mut map, cx, cy, mass, sigma);
    }
    map
}

/// Unit vectors with exact pairwise cosine `rho`, built from an orthonormal
/// frame: `p_i = sqrt(rho) * shared + sqrt(1 - rho) * q_i`.
pub fn correlated_unit_vectors(count: usize, dim: usize, rho: f64, rng: &mut SplitMix64) -> Vec<Vec<f64>> {
    assert!(dim > count, "need dim > count for the orthonormal frame");
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < count + 1 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, c) in v.iter_mut().zip(b) {
                *x -= dot * c;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    let shared = &basis[0];
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    basis[1..]
        .iter()
        .map(|q| shared.iter().zip(q).map(|(s, qq)| a * s + b * qq).collect())
        .collect()
}

struct PlacedObject {
    bbox: BoundingBox,
    class: u32,
}

fn place_boxes(spec: &SceneSpec, rng: &mut SplitMix64) -> Result<Vec<PlacedObject>> {
    let (h, w) = spec.dims;
    let gap = spec.min_gap as f32;
    let mut placed: Vec<PlacedObject> = Vec::new();
    for (class_id, class) in spec.classes.iter().enumerate() {
        for _ in 0..class.count {
            let (lo, hi) = class.size_range;
            let mut ok = None;
            for _attempt in 0..spec.max_attempts {
                let bw = lo + rng.below(hi - lo + 1);
                let bh = lo + rng.below(hi - lo + 1);
                if bw >= w || bh >= h {
                    continue;
                }
                let x0 = rng.below(w - bw);
                let y0 = rng.below(h - bh);
                let cand = BoundingBox::new(x0 as f32, y0 as f32, (x0 + bw) as f32, (y0 + bh) as f32)?;
                let clear = placed.iter().all(|p| {
                    cand.x1 - gap >= p.bbox.x2
                        || p.bbox.x1 - gap >= cand.x2
                        || cand.y1 - gap >= p.bbox.y2
                        || p.bbox.y1 - gap >= cand.y2
                });
                if clear {
                    ok = Some(cand);
                    break;
                }
            }
            match ok {
                Some(bbox) => placed.push(PlacedObject { bbox, class: class_id as u32 }),
                None => return Err(Error::PlacementFailed(spec.max_attempts)),
            }
        }
    }
    Ok(placed)
}

/// Generate a complete scene from the spec. Identical specs (including the
/// seed) produce bit-identical scenes.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = spec.dims;
    let stride = spec.feature_stride;
    let (fh, fw) = (h / stride, w / stride);
    let d = spec.channels;
    let mut rng = SplitMix64::new(spec.seed);

    let prototypes = correlated_unit_vectors(spec.classes.len(), d, spec.prototype_cos, &mut rng);
    let embeddings = correlated_unit_vectors(spec.classes.len(), spec.embedding_dim, spec.embedding_cos, &mut rng);

    let objects = place_boxes(spec, &mut rng)?;

    // Feature grid: background noise, prototypes painted inside boxes.
    let mut features = Volume::zeros(fh, fw, d);
    for v in &mut features.data {
        *v = spec.noise * rng.gaussian();
    }
    for obj in &objects {
        let proto = &prototypes[obj.class as usize];
        for fy in 0..fh {
            for fx in 0..fw {
                let px = (fx * stride) as f32 + stride as f32 * 0.5;
                let py = (fy * stride) as f32 + stride as f32 * 0.5;
                if obj.bbox.contains(px, py) {
                    for ch in 0..d {
                        features.set(fy, fx, ch, proto[ch] + spec.noise * rng.gaussian());
                    }
                }
            }
        }
    }

    // Similarity tensor: clipped cosine against the mean exemplar prototype,
    // replicated over channels. Exemplars are all target objects, so the
    // mean is the target prototype itself.
    let target_proto = &prototypes[spec.target_class as usize];
    let mut similarity = Volume::zeros(fh, fw, d);
    for fy in 0..fh {
        for fx in 0..fw {
            let base = (fy * fw + fx) * d;
            let pixel = &features.data[base..base + d];
            let sim = crate::nn::cosine(pixel, target_proto).max(0.0);
            for ch in 0..d {
                similarity.data[base + ch] = sim;
            }
        }
    }

    // Density: unit mass per target object, alpha mass per distractor.
    let mut density = DensityMap::zeros(h, w);
    let mut distractor_count = 0usize;
    for obj in &objects {
        let (cx, cy) = obj.bbox.center();
        let sigma = spec.density_sigma_factor * obj.bbox.width().min(obj.bbox.height()) as f64;
        if obj.class == spec.target_class {
            add_gaussian(&mut density, cx as f64, cy as f64, 1.0, sigma);
        } else {
            distractor_count += 1;
            if spec.leakage > 0.0 {
                add_gaussian(&mut density, cx as f64, cy as f64, spec.leakage, sigma);
            }
        }
    }

    let exemplars: Vec<BoundingBox> = objects
        .iter()
        .filter(|o| o.class == spec.target_class)
        .take(spec.exemplar_count)
        .map(|o| o.bbox)
        .collect();

    let gt = GroundTruth {
        boxes: objects.iter().map(|o| o.bbox).collect(),
        classes: objects.iter().map(|o| o.class).collect(),
        target_class: spec.target_class,
    };

    let meta = SceneMeta {
        leakage_alpha: if spec.leakage > 0.0 { Some(spec.leakage) } else { None },
        leaked_mass: if spec.leakage > 0.0 {
            Some(spec.leakage * distractor_count as f64)
        } else {
            None
        },
    };

    let scene = Scene {
        dims: spec.dims,
        density,
        features: features.to_tensor()?,
        similarity: similarity.to_tensor()?,
        exemplars: ExemplarSet::new(exemplars),
        gt: Some(gt),
        class_embeddings: Some(
            embeddings
                .iter()
                .map(|e| e.iter().map(|&v| v as f32).collect())
                .collect(),
        ),
        prompt_embedding: Some(
            embeddings[spec.target_class as usize]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        ),
        meta,
    };
    scene.validate()?;
    Ok(scene)
}

/// Generate a scene whose density additionally contains `alpha`-mass blobs
/// at distractor centers, overestimating the count by `alpha * distractors`.
pub fn gen_density_with_leakage(spec: &SceneSpec, alpha: f64) -> Result<Scene> {
    if spec.classes.len() < 2 {
        return Err(Error::Config("leakage needs at least two classes".into()));
    }
    let mut leaky = spec.clone();
    leaky.leakage = alpha;
    gen_scene(&leaky)
}

/// Exact inverse of the box readout: at every pixel whose center lies inside
/// a ground-truth box, the field holds that box's edge distances (from the
/// integer pixel coordinate); zero elsewhere. Overlaps resolve to the box
/// with the nearest center, ties to the lower box index.
pub fn gt_box_field(scene: &Scene) -> Result<BoxField> {
    let gt = scene
        .gt
        .as_ref()
        .ok_or_else(|| Error::Scene("ground truth required for the box-field oracle".into()))?;
    let (h, w) = scene.dims;
    let mut field = Volume::zeros(h, w, 4);
    let mut best = vec![f64::INFINITY; h * w];
    for bbox in gt.boxes.iter() {
        let (bcx, bcy) = bbox.center();
        let x_start = (bbox.x1 as f64 - 0.5).ceil().max(0.0) as usize;
        let x_end = ((bbox.x2 as f64 - 0.5).floor() as isize).min(w as isize - 1);
        let y_start = (bbox.y1 as f64 - 0.5).ceil().max(0.0) as usize;
        let y_end = ((bbox.y2 as f64 - 0.5).floor() as isize).min(h as isize - 1);
        if x_end < x_start as isize || y_end < y_start as isize {
            continue;
        }
        for y in y_start..=y_end as usize {
            for x in x_start..=x_end as usize {
                let dx = x as f64 + 0.5 - bcx as f64;
                let dy = y as f64 + 0.5 - bcy as f64;
                let dist = dx * dx + dy * dy;
                if dist < best[y * w + x] {
                    best[y * w + x] = dist;
                    field.set(y, x, 0, (x as f64 - bbox.x1 as f64).max(0.0));
                    field.set(y, x, 1, (y as f64 - bbox.y1 as f64).max(0.0));
                    field.set(y, x, 2, (bbox.x2 as f64 - x as f64).max(0.0));
                    field.set(y, x, 3, (bbox.y2 as f64 - y as f64).max(0.0));
                }
            }
        }
    }
    Ok(BoxField { field })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{read_boxes, Center};

    #[test]
    fn render_density_empty_and_counted() {
        let g = render_density(32, 32, &[], 2.0);
        assert_eq!(g.sum(), 0.0);
        let centers: Vec<(f64, f64, f64)> =
            (0..7).map(|i| (4.0 + 3.5 * i as f64, 16.0, 1.0)).collect();
        let g = render_density(32, 32, &centers, 1.2);
        assert!((g.sum() - 7.0).abs() < 1e-6, "sum {}", g.sum());
    }

    #[test]
    fn coincident_centers_double_the_peak() {
        let one = render_density(16, 16, &[(8.0, 8.0, 1.0)], 1.5);
        let two = render_density(16, 16, &[(8.0, 8.0, 1.0), (8.0, 8.0, 1.0)], 1.5);
        assert!((two.sum() - 2.0).abs() < 1e-6);
        let (p1, p2) = (one.max_value(), two.max_value());
        assert!((p2 - 2.0 * p1).abs() < 1e-6);
    }

    #[test]
    fn border_blob_mass_is_preserved() {
        let g = render_density(16, 16, &[(0.7, 0.4, 1.0)], 2.0);
        assert!((g.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn correlated_vectors_have_exact_cosine() {
        let mut rng = SplitMix64::new(5);
        let vs = correlated_unit_vectors(3, 8, 0.1, &mut rng);
        for i in 0..3 {
            let n: f64 = vs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
            for j in (i + 1)..3 {
                let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
                assert!((dot - 0.1).abs() < 1e-10, "cos {dot}");
            }
        }
    }

    #[test]
    fn single_class_scene_properties() {
        let spec = SceneSpec {
            classes: vec![ClassSpec { count: 5, size_range: (8, 12) }],
            noise: 0.02,
            seed: 11,
            ..Default::default()
        };
        let scene = gen_scene(&spec).unwrap();
        assert!((scene.density.sum() - 5.0).abs() < 1e-5);
        let gt = scene.gt.as_ref().unwrap();
        assert_eq!(gt.boxes.len(), 5);
        // Similarity is ~1 inside every box.
        let stride = spec.feature_stride;
        for b in &gt.boxes {
            let fx = ((b.x1 + b.x2) * 0.5) as usize / stride;
            let fy = ((b.y1 + b.y2) * 0.5) as usize / stride;
            assert!(scene.similarity.get(fy, fx, 0) > 0.9);
        }
        assert_eq!(scene.exemplars.len(), 3);
    }

    #[test]
    fn two_class_scene_separates_pooled_features() {
        let spec = SceneSpec {
            dims: (96, 96),
            classes: vec![
                ClassSpec { count: 10, size_range: (8, 12) },
                ClassSpec { count: 10, size_range: (8, 12) },
            ],
            noise: 0.05,
            seed: 21,
            ..Default::default()
        };
        let scene = gen_scene(&spec).unwrap();
        let gt = scene.gt.as_ref().unwrap();
        let features = Volume::from_tensor(&scene.features);
        let pooled: Vec<(u32, Vec<f64>)> = gt
            .boxes
            .iter()
            .zip(&gt.classes)
            .map(|(b, &c)| {
                let p = crate::verify::pool_box(&features, scene.dims, b, 3).unwrap();
                (c, crate::verify::embed_raw(&p).unwrap())
            })
            .collect();
        let mut intra = Vec::new();
        let mut inter = Vec::new();
        for i in 0..pooled.len() {
            for j in (i + 1)..pooled.len() {
                let c = crate::nn::cosine(&pooled[i].1, &pooled[j].1);
                if pooled[i].0 == pooled[j].0 {
                    intra.push(c);
                } else {
                    inter.push(c);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&intra) > 0.9, "intra {}", mean(&intra));
        assert!(mean(&inter) < 0.3, "inter {}", mean(&inter));
    }

    #[test]
    fn identical_specs_are_bit_identical() {
        let spec = SceneSpec { seed: 77, ..Default::default() };
        let a = gen_scene(&spec).unwrap();
        let b = gen_scene(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn leakage_zero_matches_gen_scene() {
        let spec = SceneSpec {
            dims: (96, 96),
            classes: vec![
                ClassSpec { count: 6, size_range: (8, 12) },
                ClassSpec { count: 6, size_range: (8, 12) },
            ],
            seed: 3,
            ..Default::default()
        };
        let plain = gen_scene(&spec).unwrap();
        let leaky = gen_density_with_leakage(&spec, 0.0).unwrap();
        assert_eq!(plain, leaky);
    }

    #[test]
    fn leakage_overestimates_by_alpha_times_distractors() {
        let spec = SceneSpec {
            dims: (128, 128),
            classes: vec![
                ClassSpec { count: 8, size_range: (8, 12) },
                ClassSpec { count: 10, size_range: (8, 12) },
            ],
            seed: 4,
            ..Default::default()
        };
        let full = gen_density_with_leakage(&spec, 1.0).unwrap();
        assert!((full.density.sum() - (8.0 + 10.0)).abs() < 0.02);
        assert_eq!(full.meta.leaked_mass, Some(10.0));
        let half = gen_density_with_leakage(&spec, 0.5).unwrap();
        assert!((half.density.sum() - (8.0 + 5.0)).abs() < 0.02);
    }

    #[test]
    fn gt_field_fixture_values() {
        let spec = SceneSpec { seed: 9, ..Default::default() };
        let mut scene = gen_scene(&spec).unwrap();
        scene.gt = Some(GroundTruth {
            boxes: vec![BoundingBox::new(8.0, 8.0, 12.0, 12.0).unwrap()],
            classes: vec![0],
            target_class: 0,
        });
        let field = gt_box_field(&scene).unwrap();
        assert_eq!(field.ltrb(10, 10), [2.0, 2.0, 2.0, 2.0]);
        // Pixel on the left edge: l = 0.
        assert_eq!(field.ltrb(10, 8)[0], 0.0);
        // Outside: zeros.
        assert_eq!(field.ltrb(0, 0), [0.0; 4]);
    }

    #[test]
    fn gt_field_round_trips_through_read_boxes() {
        let spec = SceneSpec {
            dims: (96, 96),
            classes: vec![
                ClassSpec { count: 7, size_range: (6, 14) },
                ClassSpec { count: 5, size_range: (6, 14) },
            ],
            seed: 31,
            ..Default::default()
        };
        let scene = gen_scene(&spec).unwrap();
        let gt = scene.gt.as_ref().unwrap();
        let field = gt_box_field(&scene).unwrap();
        let centers: Vec<Center> = gt
            .boxes
            .iter()
            .map(|b| {
                let (cx, cy) = b.center();
                Center { x: cx as usize, y: cy as usize, value: 1.0 }
            })
            .collect();
        let decoded = read_boxes(&field, &centers, scene.dims);
        for (d, g) in decoded.iter().zip(&gt.boxes) {
            assert_eq!(d, g);
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let spec = SceneSpec {
            dims: (32, 32),
            classes: vec![ClassSpec { count: 100, size_range: (10, 12) }],
            max_attempts: 50,
            exemplar_count: 3,
            ..Default::default()
        };
        assert!(matches!(gen_scene(&spec), Err(Error::PlacementFailed(_))));
    }
}
