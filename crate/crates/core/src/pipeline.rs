//! End-to-end runs and experiment reports.
//!
//! `run_pipeline` drives resize -> detect -> verify -> metrics over a scene
//! set, continuing past per-scene failures (each failure becomes a report
//! row with an error string and a nonzero process exit downstream). All
//! reported coordinates are mapped back to the original input frame.

use serde::{Deserialize, Serialize};

use crate::config::{CountingMode, PipelineConfig};
use crate::detect::{bootstrap_size_estimate, detect_stage, DetectWeights};
use crate::error::{Error, Result};
use crate::eval::{average_precision, coco_thresholds, detection_score, match_at_iou, SceneDetections};
use crate::geometry::BoundingBox;
use crate::scene::{rescale_scene, rescale_scene_with_extent, Scene};
use crate::tensor::DensityMap;
use crate::verify::{verify_stage, VerifierWeights};

/// Per-scene detection output (the JSON artifact written next to reports).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// Candidate boxes `[x1, y1, x2, y2]` in original image coordinates.
    pub candidates: Vec<[f32; 4]>,
    /// Peak-density confidence per candidate.
    pub scores: Vec<f64>,
    /// Indices of candidates that survived verification.
    pub kept: Vec<usize>,
    /// Indices of candidates flagged as outliers.
    pub outliers: Vec<usize>,
    /// Cluster label per candidate.
    pub cluster_labels: Vec<usize>,
    pub density_count: f64,
    pub box_count: usize,
}

/// One row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneReport {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub density_count: f64,
    pub uncorrected_count: f64,
    pub box_count: usize,
    pub candidate_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_count: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tp50: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp50: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fn50: Option<usize>,
    /// Preprocessing scale applied before detection.
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub scenes: usize,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_box: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_box: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae_uncorrected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_uncorrected: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall50: Option<f64>,
}

/// Full experiment report: config echo, per-scene rows, aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub seed: u64,
    pub config: PipelineConfig,
    /// Unix seconds; excluded from determinism comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub per_scene: Vec<SceneReport>,
    pub aggregate: Aggregate,
}

/// Everything produced for one scene set.
#[derive(Debug)]
pub struct PipelineOutcome {
    pub report: Report,
    /// Per-scene detection records (None for failed scenes).
    pub records: Vec<Option<DetectionRecord>>,
    /// Corrected density maps at working scale, for overlays.
    pub corrected: Vec<Option<DensityMap>>,
}

struct SceneSuccess {
    record: DetectionRecord,
    corrected: DensityMap,
    row: SceneReport,
    ap_entry: Option<SceneDetections>,
    counts: Option<(f64, f64, f64)>, // (density_count, box_count, gt_count)
    uncorrected: f64,
}

fn run_one(
    id: &str,
    scene: &Scene,
    dw: &DetectWeights,
    vw: &VerifierWeights,
    cfg: &PipelineConfig,
    mode: CountingMode,
) -> Result<SceneSuccess> {
    scene.validate()?;
    // Preprocessing: exemplar-driven resize, or a bootstrap pass when no
    // exemplars define the object size.
    let (working, scale) = match mode {
        CountingMode::Fewshot => rescale_scene(scene)?,
        CountingMode::Zeroshot | CountingMode::Prompt => {
            let extent = bootstrap_size_estimate(scene, dw, cfg)?;
            rescale_scene_with_extent(scene, extent)?
        }
    };
    let det = detect_stage(&working, dw, cfg)?;
    let ver = verify_stage(&det.candidates, &working, vw, cfg, mode)?;

    let inv = 1.0 / scale;
    let candidates: Vec<BoundingBox> = det.candidates.iter().map(|b| b.scaled(inv)).collect();
    let scores: Vec<f64> = det
        .candidates
        .iter()
        .map(|b| detection_score(b, &working.density))
        .collect();
    let kept_boxes: Vec<BoundingBox> = ver.kept_indices.iter().map(|&i| candidates[i]).collect();
    let kept_scores: Vec<f64> = ver.kept_indices.iter().map(|&i| scores[i]).collect();

    let record = DetectionRecord {
        candidates: candidates.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
        scores: scores.clone(),
        kept: ver.kept_indices.clone(),
        outliers: ver
            .outliers
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| i)
            .collect(),
        cluster_labels: ver.cluster_labels.clone(),
        density_count: ver.density_count,
        box_count: ver.box_count,
    };

    let uncorrected = scene.density.sum();
    let mut row = SceneReport {
        id: id.to_string(),
        error: None,
        density_count: ver.density_count,
        uncorrected_count: uncorrected,
        box_count: ver.box_count,
        candidate_count: candidates.len(),
        gt_count: None,
        precision50: None,
        recall50: None,
        tp50: None,
        fp50: None,
        fn50: None,
        scale,
    };

    let mut ap_entry = None;
    let mut counts = None;
    if let Some(gt) = &scene.gt {
        let targets = gt.target_boxes();
        let gt_count = targets.len() as f64;
        let scored: Vec<(BoundingBox, f64)> =
            kept_boxes.iter().copied().zip(kept_scores.iter().copied()).collect();
        let m = match_at_iou(&scored, &targets, 0.5);
        row.gt_count = Some(gt_count);
        row.precision50 = Some(m.precision());
        row.recall50 = Some(m.recall());
        row.tp50 = Some(m.tp);
        row.fp50 = Some(m.fp);
        row.fn50 = Some(m.fn_count);
        ap_entry = Some((scored, targets));
        counts = Some((ver.density_count, ver.box_count as f64, gt_count));
    }
    Ok(SceneSuccess { record, corrected: ver.corrected, row, ap_entry, counts, uncorrected })
}

/// Run the detect-and-verify pipeline over named scenes.
pub fn run_pipeline(
    scenes: &[(String, Scene)],
    dw: &DetectWeights,
    vw: &VerifierWeights,
    cfg: &PipelineConfig,
    mode: CountingMode,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut records = Vec::with_capacity(scenes.len());
    let mut corrected = Vec::with_capacity(scenes.len());
    let mut ap_entries: Vec<SceneDetections> = Vec::new();
    let mut density_preds = Vec::new();
    let mut box_preds = Vec::new();
    let mut uncorrected_preds = Vec::new();
    let mut gts = Vec::new();
    let mut failures = 0usize;

    for (id, scene) in scenes {
        match run_one(id, scene, dw, vw, cfg, mode) {
            Ok(s) => {
                per_scene.push(s.row);
                records.push(Some(s.record));
                corrected.push(Some(s.corrected));
                if let Some(entry) = s.ap_entry {
                    ap_entries.push(entry);
                }
                if let Some((dc, bc, gc)) = s.counts {
                    density_preds.push(dc);
                    box_preds.push(bc);
                    uncorrected_preds.push(s.uncorrected);
                    gts.push(gc);
                }
            }
            Err(e) => {
                failures += 1;
                per_scene.push(SceneReport {
                    id: id.clone(),
                    error: Some(e.to_string()),
                    density_count: 0.0,
                    uncorrected_count: 0.0,
                    box_count: 0,
                    candidate_count: 0,
                    gt_count: None,
                    precision50: None,
                    recall50: None,
                    tp50: None,
                    fp50: None,
                    fn50: None,
                    scale: 1.0,
                });
                records.push(None);
                corrected.push(None);
            }
        }
    }

    let mut aggregate = Aggregate {
        scenes: scenes.len(),
        failures,
        mae: None,
        rmse: None,
        mae_box: None,
        rmse_box: None,
        mae_uncorrected: None,
        rmse_uncorrected: None,
        ap: None,
        ap50: None,
        precision50: None,
        recall50: None,
    };
    if !gts.is_empty() {
        let (mae, rmse) = crate::eval::counting_errors(&density_preds, &gts)?;
        aggregate.mae = Some(mae);
        aggregate.rmse = Some(rmse);
        let (mae_box, rmse_box) = crate::eval::counting_errors(&box_preds, &gts)?;
        aggregate.mae_box = Some(mae_box);
        aggregate.rmse_box = Some(rmse_box);
        let (mae_u, rmse_u) = crate::eval::counting_errors(&uncorrected_preds, &gts)?;
        aggregate.mae_uncorrected = Some(mae_u);
        aggregate.rmse_uncorrected = Some(rmse_u);
        let tp: usize = per_scene.iter().filter_map(|r| r.tp50).sum();
        let fp: usize = per_scene.iter().filter_map(|r| r.fp50).sum();
        let fn_: usize = per_scene.iter().filter_map(|r| r.fn50).sum();
        aggregate.precision50 =
            Some(if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 });
        aggregate.recall50 = Some(if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 });
        if ap_entries.iter().any(|(_, g)| !g.is_empty()) {
            let ap = average_precision(&ap_entries, &coco_thresholds())?;
            aggregate.ap = Some(ap.ap);
            aggregate.ap50 = Some(ap.ap50);
        }
    }

    let report = Report {
        mode: mode.to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        generated_at: None,
        per_scene,
        aggregate,
    };
    Ok(PipelineOutcome { report, records, corrected })
}

/// Structural validation of a report JSON value against the shipped schema
/// (`docs/report.schema.json`): required fields, types, and exact agreement
/// between the aggregate and a recomputation from the per-scene rows.
pub fn validate_report_json(value: &serde_json::Value) -> Result<()> {
    let report: Report = serde_json::from_value(value.clone())
        .map_err(|e| Error::Config(format!("report does not match the schema: {e}")))?;
    if !["fewshot", "zeroshot", "prompt"].contains(&report.mode.as_str()) {
        return Err(Error::Config(format!("unknown mode {}", report.mode)));
    }
    if report.aggregate.scenes != report.per_scene.len() {
        return Err(Error::Config("aggregate.scenes != per-scene row count".into()));
    }
    let failures = report.per_scene.iter().filter(|r| r.error.is_some()).count();
    if failures != report.aggregate.failures {
        return Err(Error::Config("aggregate.failures mismatch".into()));
    }
    // Aggregate counting errors must be recomputable from the rows.
    let pairs: Vec<(f64, f64)> = report
        .per_scene
        .iter()
        .filter(|r| r.error.is_none())
        .filter_map(|r| r.gt_count.map(|g| (r.density_count, g)))
        .collect();
    if !pairs.is_empty() {
        let preds: Vec<f64> = pairs.iter().map(|(p, _)| *p).collect();
        let gt: Vec<f64> = pairs.iter().map(|(_, g)| *g).collect();
        let (mae, rmse) = crate::eval::counting_errors(&preds, &gt)?;
        let close = |a: Option<f64>, b: f64| a.map_or(false, |v| (v - b).abs() < 1e-9);
        if !close(report.aggregate.mae, mae) || !close(report.aggregate.rmse, rmse) {
            return Err(Error::Config("aggregate MAE/RMSE do not match the rows".into()));
        }
    }
    Ok(())
}
