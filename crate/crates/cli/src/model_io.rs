//! File-level model conventions: weight containers plus JSON sidecars.
//!
//! A baseline model is a RORT container with records `layer0..layerN` and a
//! `<path>.json` sidecar holding dims, seed, plants and the input scaling.
//! A protected model adds `layer<i>.wy.V` / `layer<i>.wy.T` records for each
//! rotated layer and lists the protected channels in its sidecar.

use ror_core::container::{read_container, write_container, RortContainer, TensorPayload};
use ror_core::defense::{FusedWeights, OriginalQuantInfo, ProtectedLayer};
use ror_core::error::{Error, Result};
use ror_core::harness::{ModelImage, OutlierSpec, ToyModel};
use ror_core::linalg::{CompactWY, Matrix};
use ror_core::quant::{Dtype, ScaleMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub fn sidecar_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Sidecar for a generated baseline model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub dims: Vec<usize>,
    pub seed: u64,
    pub dtype: Dtype,
    pub scale_mode: ScaleMode,
    pub planted: Vec<OutlierSpec>,
    pub input_scale: Vec<f64>,
}

/// Per-layer protection metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtectedLayerSidecar {
    pub id: usize,
    pub protected_channels: Vec<usize>,
    pub original_dtype: Option<Dtype>,
    pub original_scale_mode: ScaleMode,
    pub original_scales: Vec<f32>,
    pub original_zero_point: i32,
}

/// Sidecar for a protected model. Keeps the baseline metadata so probes can
/// be regenerated without the original file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtectedSidecar {
    pub alpha: f64,
    pub requantized: bool,
    pub model: ModelSidecar,
    pub layers: Vec<ProtectedLayerSidecar>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn save_baseline(path: &Path, model: &ToyModel) -> Result<()> {
    let mut container = RortContainer::new();
    for (i, t) in model.image.tensors.iter().enumerate() {
        container.push(format!("layer{i}"), TensorPayload::Quantized(t.clone()))?;
    }
    write_container(path, &container)?;
    let sidecar = ModelSidecar {
        dims: model.dims.clone(),
        seed: model.seed,
        dtype: model.dtype,
        scale_mode: model.scale_mode,
        planted: model.planted.clone(),
        input_scale: model.input_scale.clone(),
    };
    write_json(&sidecar_path(path), &sidecar)
}

/// A model loaded from disk: image plus enough metadata to drive probes.
pub struct LoadedModel {
    pub image: ModelImage,
    pub input_scale: Vec<f64>,
    pub sidecar: ModelSidecar,
    pub protected: Option<ProtectedSidecar>,
}

fn layer_count(container: &RortContainer) -> usize {
    let mut n = 0;
    while container.get(&format!("layer{n}")).is_some() {
        n += 1;
    }
    n
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let container = read_container(path)?;
    let n = layer_count(&container);
    if n == 0 {
        return Err(Error::Config(format!(
            "{}: no layer records found",
            path.display()
        )));
    }
    // sidecar: either a protected sidecar or a plain model sidecar
    let side_path = sidecar_path(path);
    let raw: serde_json::Value = read_json(&side_path)?;
    let (model_sidecar, protected_sidecar) = if raw.get("layers").is_some() {
        let p: ProtectedSidecar = serde_json::from_value(raw)
            .map_err(|e| Error::Config(format!("{}: {e}", side_path.display())))?;
        (p.model.clone(), Some(p))
    } else {
        let m: ModelSidecar = serde_json::from_value(raw)
            .map_err(|e| Error::Config(format!("{}: {e}", side_path.display())))?;
        (m, None)
    };

    let mut tensors = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    for i in 0..n {
        let rec = container.get(&format!("layer{i}")).expect("counted above");
        let q = match &rec.payload {
            TensorPayload::Quantized(q) => q.clone(),
            TensorPayload::F32(_) => {
                return Err(Error::Config(format!(
                    "layer{i} is stored in full precision; attacks and evaluation \
                     need a re-quantized model (requantize_fused = true)"
                )))
            }
        };
        let wy = match (
            container.get(&format!("layer{i}.wy.V")),
            container.get(&format!("layer{i}.wy.T")),
        ) {
            (Some(v_rec), Some(t_rec)) => {
                let (TensorPayload::F32(v), TensorPayload::F32(t)) =
                    (&v_rec.payload, &t_rec.payload)
                else {
                    return Err(Error::Config(format!(
                        "layer{i} rotation factors must be f32 records"
                    )));
                };
                let channels = protected_sidecar
                    .as_ref()
                    .and_then(|p| p.layers.iter().find(|l| l.id == i))
                    .map(|l| l.protected_channels.clone())
                    .unwrap_or_else(|| vec![0; v.cols()]);
                Some(CompactWY::from_parts(v.clone(), t.clone(), channels)?)
            }
            (None, None) => None,
            _ => {
                return Err(Error::Config(format!(
                    "layer{i} has a dangling wy.V/wy.T record pair"
                )))
            }
        };
        tensors.push(q);
        rotations.push(wy.filter(|w| w.m() > 0));
    }
    Ok(LoadedModel {
        image: ModelImage { tensors, rotations },
        input_scale: model_sidecar.input_scale.clone(),
        sidecar: model_sidecar,
        protected: protected_sidecar,
    })
}

pub fn save_protected(
    path: &Path,
    layers: &[ProtectedLayer],
    alpha: f64,
    requantized: bool,
    model_sidecar: &ModelSidecar,
) -> Result<()> {
    let mut container = RortContainer::new();
    let mut layer_meta = Vec::with_capacity(layers.len());
    for layer in layers {
        let i = layer.layer_id;
        match &layer.fused {
            FusedWeights::Quantized(q) => {
                container.push(format!("layer{i}"), TensorPayload::Quantized(q.clone()))?;
            }
            FusedWeights::Full(m) => {
                container.push(format!("layer{i}"), TensorPayload::F32(m.clone()))?;
            }
        }
        if layer.wy.m() > 0 {
            container.push(
                format!("layer{i}.wy.V"),
                TensorPayload::F32(layer.wy.v_factor().clone()),
            )?;
            container.push(
                format!("layer{i}.wy.T"),
                TensorPayload::F32(layer.wy.t_factor().clone()),
            )?;
        }
        let OriginalQuantInfo {
            dtype,
            scale_mode,
            scales,
            zero_point,
        } = layer.original.clone();
        layer_meta.push(ProtectedLayerSidecar {
            id: i,
            protected_channels: layer.wy.protected_channels().to_vec(),
            original_dtype: dtype,
            original_scale_mode: scale_mode,
            original_scales: scales,
            original_zero_point: zero_point,
        });
    }
    write_container(path, &container)?;
    let sidecar = ProtectedSidecar {
        alpha,
        requantized,
        model: model_sidecar.clone(),
        layers: layer_meta,
    };
    write_json(&sidecar_path(path), &sidecar)
}

/// Reassemble `ProtectedLayer`s from a loaded protected model (for the
/// verify command).
pub fn to_protected_layers(loaded: &LoadedModel) -> Vec<ProtectedLayer> {
    loaded
        .image
        .tensors
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let wy = loaded.image.rotations[i]
                .clone()
                .unwrap_or_else(|| CompactWY::empty(q.rows()));
            let original = loaded
                .protected
                .as_ref()
                .and_then(|p| p.layers.iter().find(|l| l.id == i))
                .map(|l| OriginalQuantInfo {
                    dtype: l.original_dtype,
                    scale_mode: l.original_scale_mode,
                    scales: l.original_scales.clone(),
                    zero_point: l.original_zero_point,
                })
                .unwrap_or_else(|| OriginalQuantInfo::of(q));
            ProtectedLayer {
                layer_id: i,
                fused: FusedWeights::Quantized(q.clone()),
                wy,
                original,
            }
        })
        .collect()
}

/// Rebuild full-precision weights of a baseline model for verification.
pub fn baseline_weights(loaded: &LoadedModel) -> Vec<Matrix> {
    loaded
        .image
        .tensors
        .iter()
        .map(ror_core::quant::dequantize)
        .collect()
}

// parse "layer:channel:magnitude" plant specs
pub fn parse_outlier_spec(raw: &str) -> Result<OutlierSpec> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "outlier spec {raw:?} must be layer:channel:magnitude"
        )));
    }
    let layer = parts[0]
        .parse()
        .map_err(|_| Error::Config(format!("bad layer in outlier spec {raw:?}")))?;
    let channel = parts[1]
        .parse()
        .map_err(|_| Error::Config(format!("bad channel in outlier spec {raw:?}")))?;
    let magnitude = parts[2]
        .parse()
        .map_err(|_| Error::Config(format!("bad magnitude in outlier spec {raw:?}")))?;
    Ok(OutlierSpec {
        layer,
        channel,
        magnitude,
    })
}
