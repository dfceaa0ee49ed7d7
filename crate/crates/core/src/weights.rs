//! Weights and optimizer-state containers.
//!
//! A weights directory holds one `.davt` file per parameter tensor plus a
//! `weights.json` manifest mapping layer names to files and recording conv
//! dimensions. Conv weights (layout `[ky][kx][c_in][c_out]`) are packed into
//! the 3-D container as `(kh, kw, c_in * c_out)`; vectors as `(1, 1, n)`.
//! Values are stored as `f32` (the container's payload type).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::{DetectWeights, FusionWeights};
use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::nn::{BatchNorm, Conv2d, GroupNorm};
use crate::tensor::Tensor;
use crate::train::AdamState;
use crate::verify::VerifierWeights;

#[derive(Serialize, Deserialize)]
struct ConvEntry {
    file: String,
    bias_file: String,
    kh: usize,
    kw: usize,
    c_in: usize,
    c_out: usize,
}

#[derive(Serialize, Deserialize)]
struct NormEntry {
    gamma_file: String,
    beta_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    var_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    groups: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    kind: String,
    channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_channels: Option<usize>,
    convs: std::collections::BTreeMap<String, ConvEntry>,
    norms: std::collections::BTreeMap<String, NormEntry>,
}

fn save_vec(dir: &Path, name: &str, data: &[f64]) -> Result<String> {
    let file = format!("{name}.davt");
    let t = Tensor::new(1, 1, data.len(), data.iter().map(|&v| v as f32).collect())?;
    save_tensor(&dir.join(&file), &t)?;
    Ok(file)
}

fn load_vec(dir: &Path, file: &str, expect: usize) -> Result<Vec<f64>> {
    let t = load_tensor(&dir.join(file))?;
    let (h, w, c) = t.shape();
    if h * w * c != expect {
        return Err(Error::LengthMismatch { expected: expect, found: h * w * c });
    }
    Ok(t.data().iter().map(|&v| v as f64).collect())
}

fn save_conv(dir: &Path, name: &str, conv: &Conv2d) -> Result<ConvEntry> {
    let file = format!("{name}.weight.davt");
    let t = Tensor::new(
        conv.kh.max(1),
        conv.kw.max(1),
        conv.c_in * conv.c_out,
        conv.weight.iter().map(|&v| v as f32).collect(),
    )?;
    save_tensor(&dir.join(&file), &t)?;
    let bias_file = save_vec(dir, &format!("{name}.bias"), &conv.bias)?;
    Ok(ConvEntry { file, bias_file, kh: conv.kh, kw: conv.kw, c_in: conv.c_in, c_out: conv.c_out })
}

fn load_conv(dir: &Path, entry: &ConvEntry) -> Result<Conv2d> {
    let t = load_tensor(&dir.join(&entry.file))?;
    let expect = entry.kh * entry.kw * entry.c_in * entry.c_out;
    let (h, w, c) = t.shape();
    if h * w * c != expect {
        return Err(Error::LengthMismatch { expected: expect, found: h * w * c });
    }
    let bias = load_vec(dir, &entry.bias_file, entry.c_out)?;
    Ok(Conv2d {
        kh: entry.kh,
        kw: entry.kw,
        c_in: entry.c_in,
        c_out: entry.c_out,
        weight: t.data().iter().map(|&v| v as f64).collect(),
        bias,
    })
}

fn save_group_norm(dir: &Path, name: &str, gn: &GroupNorm) -> Result<NormEntry> {
    Ok(NormEntry {
        gamma_file: save_vec(dir, &format!("{name}.gamma"), &gn.gamma)?,
        beta_file: save_vec(dir, &format!("{name}.beta"), &gn.beta)?,
        mean_file: None,
        var_file: None,
        groups: Some(gn.groups),
    })
}

fn load_group_norm(dir: &Path, entry: &NormEntry, c: usize) -> Result<GroupNorm> {
    Ok(GroupNorm {
        groups: entry.groups.unwrap_or_else(|| crate::nn::group_count(c)),
        gamma: load_vec(dir, &entry.gamma_file, c)?,
        beta: load_vec(dir, &entry.beta_file, c)?,
        eps: crate::nn::NORM_EPS,
    })
}

/// Write detection weights into `dir`.
pub fn save_detect_weights(dir: &Path, w: &DetectWeights) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut convs = std::collections::BTreeMap::new();
    let mut norms = std::collections::BTreeMap::new();
    convs.insert("reduce".to_string(), save_conv(dir, "reduce", &w.reduce)?);
    convs.insert("fusion.conv".to_string(), save_conv(dir, "fusion.conv", &w.fusion.conv)?);
    convs.insert("fusion.attn1".to_string(), save_conv(dir, "fusion.attn1", &w.fusion.attn1)?);
    convs.insert("fusion.attn2".to_string(), save_conv(dir, "fusion.attn2", &w.fusion.attn2)?);
    convs.insert(
        "fusion.concat_proj".to_string(),
        save_conv(dir, "fusion.concat_proj", &w.fusion.concat_proj)?,
    );
    convs.insert("head1".to_string(), save_conv(dir, "head1", &w.head1)?);
    convs.insert("head2".to_string(), save_conv(dir, "head2", &w.head2)?);
    norms.insert("fusion.norm".to_string(), save_group_norm(dir, "fusion.norm", &w.fusion.norm)?);
    norms.insert("head_norm".to_string(), save_group_norm(dir, "head_norm", &w.head_norm)?);
    let manifest = WeightsManifest {
        kind: "detect".into(),
        channels: w.channels(),
        feature_channels: Some(w.feature_channels()),
        convs,
        norms,
    };
    fs::write(dir.join("weights.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn manifest_conv<'m>(m: &'m WeightsManifest, name: &str) -> Result<&'m ConvEntry> {
    m.convs
        .get(name)
        .ok_or_else(|| Error::Config(format!("weights manifest is missing layer {name}")))
}

fn manifest_norm<'m>(m: &'m WeightsManifest, name: &str) -> Result<&'m NormEntry> {
    m.norms
        .get(name)
        .ok_or_else(|| Error::Config(format!("weights manifest is missing norm {name}")))
}

pub fn load_detect_weights(dir: &Path) -> Result<DetectWeights> {
    let manifest: WeightsManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("weights.json"))?)?;
    if manifest.kind != "detect" {
        return Err(Error::Config(format!("expected detect weights, found {}", manifest.kind)));
    }
    let d = manifest.channels;
    Ok(DetectWeights {
        reduce: load_conv(dir, manifest_conv(&manifest, "reduce")?)?,
        fusion: FusionWeights {
            conv: load_conv(dir, manifest_conv(&manifest, "fusion.conv")?)?,
            norm: load_group_norm(dir, manifest_norm(&manifest, "fusion.norm")?, d)?,
            attn1: load_conv(dir, manifest_conv(&manifest, "fusion.attn1")?)?,
            attn2: load_conv(dir, manifest_conv(&manifest, "fusion.attn2")?)?,
            concat_proj: load_conv(dir, manifest_conv(&manifest, "fusion.concat_proj")?)?,
        },
        head1: load_conv(dir, manifest_conv(&manifest, "head1")?)?,
        head_norm: load_group_norm(dir, manifest_norm(&manifest, "head_norm")?, d)?,
        head2: load_conv(dir, manifest_conv(&manifest, "head2")?)?,
    })
}

/// Write verifier weights into `dir`.
pub fn save_verifier_weights(dir: &Path, w: &VerifierWeights) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut convs = std::collections::BTreeMap::new();
    let mut norms = std::collections::BTreeMap::new();
    convs.insert("conv1".to_string(), save_conv(dir, "conv1", &w.conv1)?);
    convs.insert("conv2".to_string(), save_conv(dir, "conv2", &w.conv2)?);
    norms.insert(
        "bn".to_string(),
        NormEntry {
            gamma_file: save_vec(dir, "bn.gamma", &w.bn.gamma)?,
            beta_file: save_vec(dir, "bn.beta", &w.bn.beta)?,
            mean_file: Some(save_vec(dir, "bn.running_mean", &w.bn.running_mean)?),
            var_file: Some(save_vec(dir, "bn.running_var", &w.bn.running_var)?),
            groups: None,
        },
    );
    let manifest = WeightsManifest {
        kind: "verifier".into(),
        channels: w.channels(),
        feature_channels: None,
        convs,
        norms,
    };
    fs::write(dir.join("weights.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_verifier_weights(dir: &Path) -> Result<VerifierWeights> {
    let manifest: WeightsManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("weights.json"))?)?;
    if manifest.kind != "verifier" {
        return Err(Error::Config(format!("expected verifier weights, found {}", manifest.kind)));
    }
    let d = manifest.channels;
    let bn_entry = manifest_norm(&manifest, "bn")?;
    let mean_file = bn_entry
        .mean_file
        .as_ref()
        .ok_or_else(|| Error::Config("verifier manifest lacks running mean".into()))?;
    let var_file = bn_entry
        .var_file
        .as_ref()
        .ok_or_else(|| Error::Config("verifier manifest lacks running variance".into()))?;
    let bn = BatchNorm {
        gamma: load_vec(dir, &bn_entry.gamma_file, d)?,
        beta: load_vec(dir, &bn_entry.beta_file, d)?,
        running_mean: load_vec(dir, mean_file, d)?,
        running_var: load_vec(dir, var_file, d)?,
        eps: crate::nn::NORM_EPS,
        momentum: 0.1,
    };
    bn.validate()?;
    Ok(VerifierWeights {
        conv1: load_conv(dir, manifest_conv(&manifest, "conv1")?)?,
        bn,
        conv2: load_conv(dir, manifest_conv(&manifest, "conv2")?)?,
    })
}

#[derive(Serialize, Deserialize)]
struct OptimizerManifest {
    steps: Vec<u64>,
    files: Vec<(String, String)>,
}

/// Write AdamW state (first/second moments and step counters) next to a
/// checkpoint.
pub fn save_optimizer_state(dir: &Path, states: &[AdamState]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, st) in states.iter().enumerate() {
        let m = save_vec(dir, &format!("m{i}"), &st.m)?;
        let v = save_vec(dir, &format!("v{i}"), &st.v)?;
        files.push((m, v));
    }
    let manifest = OptimizerManifest { steps: states.iter().map(|s| s.t).collect(), files };
    fs::write(dir.join("optimizer.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_optimizer_state(dir: &Path) -> Result<Vec<AdamState>> {
    let manifest: OptimizerManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("optimizer.json"))?)?;
    let mut out = Vec::with_capacity(manifest.files.len());
    for (i, (mf, vf)) in manifest.files.iter().enumerate() {
        let m = load_tensor(&dir.join(mf))?;
        let v = load_tensor(&dir.join(vf))?;
        out.push(AdamState {
            m: m.data().iter().map(|&x| x as f64).collect(),
            v: v.data().iter().map(|&x| x as f64).collect(),
            t: manifest.steps[i],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn detect_weights_round_trip() {
        let dir = tempdir().unwrap();
        let w = DetectWeights::init(6, 8, 123);
        save_detect_weights(dir.path(), &w).unwrap();
        let back = load_detect_weights(dir.path()).unwrap();
        // f64 -> f32 -> f64 truncation is the only permitted difference.
        assert_eq!(back.channels(), 8);
        assert_eq!(back.feature_channels(), 6);
        for (a, b) in w.head2.weight.iter().zip(&back.head2.weight) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(back.fusion.norm.groups, w.fusion.norm.groups);
    }

    #[test]
    fn verifier_weights_round_trip() {
        let dir = tempdir().unwrap();
        let mut w = VerifierWeights::init(8, 5);
        w.bn.running_mean[2] = 0.25;
        w.bn.running_var[3] = 2.5;
        save_verifier_weights(dir.path(), &w).unwrap();
        let back = load_verifier_weights(dir.path()).unwrap();
        assert_eq!(back.bn.running_mean[2] as f32, 0.25);
        assert_eq!(back.bn.running_var[3] as f32, 2.5);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempdir().unwrap();
        let w = DetectWeights::init(4, 4, 1);
        save_detect_weights(dir.path(), &w).unwrap();
        assert!(load_verifier_weights(dir.path()).is_err());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let dir = tempdir().unwrap();
        let states = vec![
            AdamState { m: vec![0.5, -0.25], v: vec![0.1, 0.2], t: 7 },
            AdamState { m: vec![1.0], v: vec![2.0], t: 9 },
        ];
        save_optimizer_state(dir.path(), &states).unwrap();
        let back = load_optimizer_state(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].t, 7);
        assert_eq!(back[1].m[0], 1.0);
    }
}
