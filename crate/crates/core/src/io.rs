//! On-disk formats.
//!
//! Tensor container (`.davt`), designed to be bit-exact and trivially parsed
//! from any language:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DAVT"
//! 4       1     version (1)
//! 5       4     height   (u32, little-endian)
//! 9       4     width    (u32, little-endian)
//! 13      4     channels (u32, little-endian)
//! 17      ...   h*w*c f32 values, little-endian, row-major, channel-last
//! ```
//!
//! Density maps use the same container with `channels = 1`.
//!
//! A scene is a directory holding a `manifest.json` plus the tensor files it
//! names. Manifest keys: `dims`, `density`, `features`, `similarity`,
//! `exemplars` (list of `[x1, y1, x2, y2]`), and optionally `gt_boxes`,
//! `gt_classes`, `target_class`, `embeddings` (per-class unit vectors,
//! indexed by class id), `prompt_embedding`, `meta`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::scene::{ExemplarSet, GroundTruth, Scene, SceneMeta};
use crate::tensor::{DensityMap, Tensor};

const MAGIC: &[u8; 4] = b"DAVT";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 17;

fn encode_tensor(h: usize, w: usize, c: usize, data: &[f32]) -> Result<Vec<u8>> {
    if h > u32::MAX as usize || w > u32::MAX as usize || c > u32::MAX as usize {
        return Err(Error::Shape("dimension exceeds u32".into()));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tensor payload"));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn decode_header(buf: &[u8]) -> Result<(usize, usize, usize)> {
    if buf.len() < HEADER_LEN {
        return Err(Error::LengthMismatch { expected: HEADER_LEN, found: buf.len() });
    }
    if &buf[0..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if buf[4] != VERSION {
        return Err(Error::UnsupportedVersion(buf[4]));
    }
    let h = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(buf[9..13].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(buf[13..17].try_into().unwrap()) as usize;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Shape(format!("container declares {h}x{w}x{c}")));
    }
    Ok((h, w, c))
}

fn decode_payload(buf: &[u8], n: usize) -> Result<Vec<f32>> {
    let body = &buf[HEADER_LEN..];
    if body.len() != n * 4 {
        return Err(Error::LengthMismatch { expected: n * 4, found: body.len() });
    }
    let mut data = Vec::with_capacity(n);
    for chunk in body.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite("tensor payload"));
        }
        data.push(v);
    }
    Ok(data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w, c) = t.shape();
    let buf = encode_tensor(h, w, c, t.data())?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let (h, w, c) = decode_header(&buf)?;
    let data = decode_payload(&buf, h * w * c)?;
    Tensor::new(h, w, c, data)
}

pub fn save_density(path: &Path, g: &DensityMap) -> Result<()> {
    let buf = encode_tensor(g.height(), g.width(), 1, g.data())?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_density(path: &Path) -> Result<DensityMap> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let (h, w, c) = decode_header(&buf)?;
    if c != 1 {
        return Err(Error::Shape(format!("density map must have 1 channel, found {c}")));
    }
    let data = decode_payload(&buf, h * w)?;
    DensityMap::new(h, w, data)
}

#[derive(Serialize, Deserialize)]
struct SceneManifest {
    dims: [u32; 2],
    density: String,
    features: String,
    similarity: String,
    exemplars: Vec<[f32; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_boxes: Option<Vec<[f32; 4]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_classes: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_class: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings: Option<Vec<Vec<f32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SceneMeta>,
}

fn boxes_to_arrays(boxes: &[BoundingBox]) -> Vec<[f32; 4]> {
    boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect()
}

fn arrays_to_boxes(arrays: &[[f32; 4]]) -> Result<Vec<BoundingBox>> {
    arrays.iter().map(|a| BoundingBox::new(a[0], a[1], a[2], a[3])).collect()
}

/// Write a scene directory: `manifest.json` plus three tensor files.
pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(dir)?;
    save_density(&dir.join("density.davt"), &scene.density)?;
    save_tensor(&dir.join("features.davt"), &scene.features)?;
    save_tensor(&dir.join("similarity.davt"), &scene.similarity)?;
    let manifest = SceneManifest {
        dims: [scene.dims.0 as u32, scene.dims.1 as u32],
        density: "density.davt".into(),
        features: "features.davt".into(),
        similarity: "similarity.davt".into(),
        exemplars: boxes_to_arrays(&scene.exemplars.boxes),
        gt_boxes: scene.gt.as_ref().map(|g| boxes_to_arrays(&g.boxes)),
        gt_classes: scene.gt.as_ref().map(|g| g.classes.clone()),
        target_class: scene.gt.as_ref().map(|g| g.target_class),
        embeddings: scene.class_embeddings.clone(),
        prompt_embedding: scene.prompt_embedding.clone(),
        meta: if scene.meta == SceneMeta::default() { None } else { Some(scene.meta.clone()) },
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Read a scene directory written by [`save_scene`] (or any producer of the
/// same layout).
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: SceneManifest = serde_json::from_str(&text)?;
    let density = load_density(&dir.join(&manifest.density))?;
    let features = load_tensor(&dir.join(&manifest.features))?;
    let similarity = load_tensor(&dir.join(&manifest.similarity))?;
    let exemplars = ExemplarSet::new(arrays_to_boxes(&manifest.exemplars)?);
    let gt = match (&manifest.gt_boxes, &manifest.gt_classes) {
        (Some(boxes), Some(classes)) => {
            if boxes.len() != classes.len() {
                return Err(Error::Scene("gt_boxes and gt_classes lengths differ".into()));
            }
            Some(GroundTruth {
                boxes: arrays_to_boxes(boxes)?,
                classes: classes.clone(),
                target_class: manifest.target_class.unwrap_or(0),
            })
        }
        (None, None) => None,
        _ => return Err(Error::Scene("gt_boxes and gt_classes must both be present".into())),
    };
    let scene = Scene {
        dims: (manifest.dims[0] as usize, manifest.dims[1] as usize),
        density,
        features,
        similarity,
        exemplars,
        gt,
        class_embeddings: manifest.embeddings,
        prompt_embedding: manifest.prompt_embedding,
        meta: manifest.meta.unwrap_or_default(),
    };
    scene.validate()?;
    Ok(scene)
}

/// List the scene directories directly under `root`, sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs = Vec::new();
    if root.join("manifest.json").exists() {
        dirs.push(root.to_path_buf());
        return Ok(dirs);
    }
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() && path.join("manifest.json").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Scene(format!("no scene directories under {}", root.display())));
    }
    Ok(dirs)
}
