//! Versioned JSON checkpoints for detectors and classifiers.
//!
//! A container holds the format tag, version, kind, the sha256 of the
//! architecture, the stage config and the parameter payload. Loading
//! recomputes the hash and rejects containers whose hash does not match.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierArch, ClassifierModel, CnnFeatures, DimsMode};
use crate::config::sha256_json;
use crate::detector::{Detector, DetectorArch, DetectorConfig, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nn::{ConvNet, Linear};
use crate::parts::{PartConfig, SparseSelector};

pub const FORMAT: &str = "mothwatch-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Detector,
    Classifier,
}

#[derive(Serialize, Deserialize)]
struct Container<C, P> {
    format: String,
    version: u32,
    kind: Kind,
    config_hash: String,
    config: C,
    payload: P,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: Kind,
}

#[derive(Serialize, Deserialize)]
struct DetectorPayload {
    backbone: Vec<f64>,
    head: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierPayload {
    classes: Vec<String>,
    label_smoothing: f64,
    parts: PartConfig,
    dims_mode: DimsMode,
    global: Vec<f64>,
    part: Vec<f64>,
    global_fc: Vec<f64>,
    part_fc: Vec<f64>,
    selector: Option<SparseSelector>,
}

pub fn detector_hash(arch: &DetectorArch) -> String {
    sha256_json(arch)
}

pub fn classifier_hash(arch: &ClassifierArch) -> String {
    sha256_json(arch)
}

fn invalid(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn detector_to_json(det: &Detector, cfg: &DetectorConfig) -> String {
    let mut config = cfg.clone();
    config.arch = det.arch.clone();
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        kind: Kind::Detector,
        config_hash: detector_hash(&det.arch),
        config,
        payload: DetectorPayload {
            backbone: det.extractor.params().to_vec(),
            head: det.head.params.clone(),
        },
    };
    serde_json::to_string(&c).expect("checkpoint serializes")
}

pub fn classifier_to_json(model: &ClassifierModel) -> String {
    let c = Container {
        format: FORMAT.into(),
        version: VERSION,
        kind: Kind::Classifier,
        config_hash: classifier_hash(&model.arch),
        config: model.arch.clone(),
        payload: ClassifierPayload {
            classes: model.classes.clone(),
            label_smoothing: model.label_smoothing,
            parts: model.parts.clone(),
            dims_mode: model.dims_mode,
            global: model.global.net.params.clone(),
            part: model.part.net.params.clone(),
            global_fc: model.global_fc.params.clone(),
            part_fc: model.part_fc.params.clone(),
            selector: model.selector.clone(),
        },
    };
    serde_json::to_string(&c).expect("checkpoint serializes")
}

fn parse<C: DeserializeOwned + Serialize, P: DeserializeOwned>(
    text: &str,
    kind: Kind,
    path: &Path,
    hash: impl Fn(&C) -> String,
) -> Result<Container<C, P>> {
    let header: Header = serde_json::from_str(text).map_err(|e| invalid(path, format!("not a checkpoint: {e}")))?;
    if header.format != FORMAT {
        return Err(invalid(path, format!("unknown format `{}`", header.format)));
    }
    if header.version != VERSION {
        return Err(invalid(
            path,
            format!("unsupported version {} (expected {VERSION})", header.version),
        ));
    }
    if header.kind != kind {
        return Err(invalid(path, format!("holds a {:?} checkpoint, expected {kind:?}", header.kind)));
    }
    let c: Container<C, P> = serde_json::from_str(text).map_err(|e| invalid(path, e.to_string()))?;
    let actual = hash(&c.config);
    if actual != c.config_hash {
        return Err(invalid(
            path,
            format!("config hash mismatch: stored {}, computed {actual}", c.config_hash),
        ));
    }
    Ok(c)
}

pub fn detector_from_json(text: &str, path: &Path) -> Result<(Detector, DetectorConfig)> {
    let c: Container<DetectorConfig, DetectorPayload> = parse(text, Kind::Detector, path, |cfg: &DetectorConfig| detector_hash(&cfg.arch))?;
    let det = Detector::from_params(c.config.arch.clone(), c.payload.backbone, c.payload.head).map_err(|e| invalid(path, e.to_string()))?;
    Ok((det, c.config))
}

pub fn classifier_from_json(text: &str, path: &Path) -> Result<ClassifierModel> {
    let c: Container<ClassifierArch, ClassifierPayload> = parse(text, Kind::Classifier, path, classifier_hash)?;
    let arch = c.config;
    let p = c.payload;
    let bad = |e: crate::nn::ShapeError| invalid(path, e.to_string());
    let global = ConvNet::with_params(arch.backbone.clone(), p.global).map_err(bad)?;
    let part = ConvNet::with_params(arch.backbone.clone(), p.part).map_err(bad)?;
    let d = global.out_channels();
    let c_count = p.classes.len();
    let linear = |params: Vec<f64>| -> Result<Linear> {
        if params.len() != d * c_count + c_count {
            return Err(invalid(
                path,
                format!("linear layer holds {} values, expected {}", params.len(), d * c_count + c_count),
            ));
        }
        Ok(Linear {
            in_dim: d,
            out_dim: c_count,
            params,
        })
    };
    if let Some(s) = &p.selector {
        if s.weights.len() != c_count || s.weights.iter().any(|w| w.len() != d) {
            return Err(invalid(path, "selector shape does not match the classifier"));
        }
    }
    Ok(ClassifierModel {
        global_fc: linear(p.global_fc)?,
        part_fc: linear(p.part_fc)?,
        global: CnnFeatures {
            net: global,
            input_size: arch.input_size,
        },
        part: CnnFeatures {
            net: part,
            input_size: arch.input_size,
        },
        arch,
        classes: p.classes,
        selector: p.selector,
        parts: p.parts,
        dims_mode: p.dims_mode,
        label_smoothing: p.label_smoothing,
    })
}

fn read(path: &Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => Err(Error::io(path)(e)),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    std::fs::write(path, text).map_err(Error::io(path))
}

pub fn save_detector(path: &Path, det: &Detector, cfg: &DetectorConfig) -> Result<()> {
    write(path, &detector_to_json(det, cfg))
}

pub fn load_detector(path: &Path) -> Result<(Detector, DetectorConfig)> {
    detector_from_json(&read(path)?, path)
}

pub fn save_classifier(path: &Path, model: &ClassifierModel) -> Result<()> {
    write(path, &classifier_to_json(model))
}

pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    classifier_from_json(&read(path)?, path)
}

/// Reject a checkpoint whose architecture differs from the configured one.
pub fn require_hash(path: &Path, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(invalid(
            path,
            format!("architecture hash {found} does not match the configured architecture {expected}"),
        ));
    }
    Ok(())
}
