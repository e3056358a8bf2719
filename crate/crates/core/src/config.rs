//! Pipeline configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{ClassifierArch, ClassifierConfig};
use crate::data::{SplitSpec, SyntheticSceneSpec};
use crate::detector::{BackboneSpec, DetectorArch, DetectorConfig};
use crate::error::{Error, Result};
use crate::nn::{ConvLayerSpec, ConvNetSpec, StepSchedule};
use crate::priors::PriorSpec;
use crate::train::TrainConfig;

/// Where training and test images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Scene grammar used by `synth-data`.
    pub synthetic: SyntheticSceneSpec,
    pub train_images: usize,
    pub test_images: usize,
    /// Dataset roots, relative to the output directory unless absolute.
    pub train_dir: PathBuf,
    pub test_dir: PathBuf,
    /// Annotation file name inside each dataset root.
    pub annotations: String,
    /// Optional class-balanced split applied to the training root when the
    /// test root does not exist.
    pub split: Option<SplitSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSceneSpec::default(),
            train_images: 600,
            test_images: 500,
            train_dir: PathBuf::from("data/train"),
            test_dir: PathBuf::from("data/test"),
            annotations: "annotations.tsv".into(),
            split: None,
        }
    }
}

impl DataConfig {
    /// Scene grammar of the generated test set: the training grammar under a derived seed.
    pub fn test_synthetic(&self) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            seed: crate::seed::derive(self.synthetic.seed, &[crate::seed::tag::SCENE, 1]),
            ..self.synthetic.clone()
        }
    }
}

/// How per-detection labels reduce to one label per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    HighestConfidence,
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    /// Relative padding added to each detection before cropping.
    pub crop_padding: f64,
    pub reduction: Reduction,
    /// When false every image is classified uncropped.
    pub use_detector: bool,
    /// Score threshold used when collecting detections for AP.
    pub ap_score_threshold: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            crop_padding: 0.1,
            reduction: Reduction::HighestConfidence,
            use_detector: true,
            ap_score_threshold: 0.01,
        }
    }
}

/// File names written under the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub detector_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub results: PathBuf,
    pub summary: PathBuf,
    pub metrics: PathBuf,
    pub metrics_tsv: PathBuf,
    pub pr_dir: PathBuf,
    pub overlays_dir: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            detector_checkpoint: "detector.json".into(),
            classifier_checkpoint: "classifier.json".into(),
            results: "results.jsonl".into(),
            summary: "summary.tsv".into(),
            metrics: "metrics.txt".into(),
            metrics_tsv: "metrics.tsv".into(),
            pr_dir: "pr".into(),
            overlays_dir: "overlays".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Base seed; copied into every training section and the scene generator.
    pub seed: u64,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub detector_train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub classifier_train: TrainConfig,
    pub pipeline: PipelineOptions,
    pub output: OutputPaths,
}

/// Desk-scale schedule: `epochs` epochs at `lr`, one x0.1 drop at two thirds.
pub fn desk_schedule(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        schedule: StepSchedule {
            base_lr: lr,
            drops: vec![epochs * 2 / 3],
            gamma: 0.1,
        },
        ..TrainConfig::default()
    }
}

impl Default for PipelineConfig {
    /// Desk scale: small networks and short schedules that train on a CPU in minutes.
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            detector_train: TrainConfig {
                batch_size: 4,
                ..desk_schedule(20, 3e-3)
            },
            classifier: ClassifierConfig::default(),
            classifier_train: desk_schedule(20, 3e-3),
            pipeline: PipelineOptions::default(),
            output: OutputPaths::default(),
        }
    }
}

impl PipelineConfig {
    /// Full-size layout: 300x300 detector with six maps and the SSD300 priors,
    /// 299x299 classifier with 2048-dimensional features, and the 60-epoch
    /// schedule (lr 1e-4, x0.1 at epochs 20 and 40).
    pub fn paper() -> Self {
        let mut cfg = Self::default();
        cfg.detector.arch = paper_detector_arch();
        cfg.classifier.arch = paper_classifier_arch();
        cfg.detector_train = TrainConfig::default();
        cfg.classifier_train = TrainConfig::default();
        cfg.data.synthetic.width = 600;
        cfg.data.synthetic.height = 600;
        for s in cfg.data.synthetic.species.iter_mut() {
            s.size = (130, 210);
        }
        cfg
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("pipeline config is always representable as TOML")
    }

    /// Read a config file, or the desk default when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
            Err(e) => return Err(Error::io(path)(e)),
        };
        let cfg = Self::from_toml(&text).map_err(|e| Error::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg = cfg;
        cfg.sync_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Override the base seed and propagate it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_seeds();
        self
    }

    pub fn sync_seeds(&mut self) {
        self.detector_train.seed = self.seed;
        self.classifier_train.seed = self.seed;
        self.data.synthetic.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(0.0..=1.0).contains(&self.pipeline.crop_padding) {
            return bad(format!(
                "pipeline.crop_padding must lie in [0, 1], got {}",
                self.pipeline.crop_padding
            ));
        }
        let c = &self.classifier;
        if !(0.0..1.0).contains(&c.label_smoothing) {
            return bad(format!("classifier.label_smoothing must lie in [0, 1), got {}", c.label_smoothing));
        }
        if c.parts.k == 0 {
            return bad("classifier.parts.k must be at least 1".into());
        }
        let inf = &self.detector.inference;
        if !(0.0..=1.0).contains(&inf.score_threshold) || !(0.0..=1.0).contains(&inf.nms_iou) {
            return bad("detector.inference thresholds must lie in [0, 1]".into());
        }
        for (name, t) in [
            ("detector_train", &self.detector_train),
            ("classifier_train", &self.classifier_train),
        ] {
            if t.batch_size == 0 {
                return bad(format!("{name}.batch_size must be at least 1"));
            }
            if t.schedule.base_lr.is_nan() || t.schedule.base_lr <= 0.0 {
                return bad(format!("{name}.schedule.base_lr must be positive"));
            }
        }
        if self.detector.arch.priors.image_size != self.detector.arch.input_size {
            return bad("detector.arch.priors.image_size must equal detector.arch.input_size".into());
        }
        self.detector.arch.priors.validate().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Hash of the whole config, recorded next to every metrics block.
    pub fn hash(&self) -> String {
        sha256_json(self)
    }

    /// Resolve a path relative to the output directory.
    pub fn resolve(out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}

/// Hex sha256 of the JSON serialization of `value`.
pub fn sha256_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize to JSON");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// 300x300 input; strided 3x3 convolutions reach the 38, 19, 10, 5, 3 and 1 maps.
pub fn paper_detector_arch() -> DetectorArch {
    let l = ConvLayerSpec::new;
    DetectorArch {
        input_size: 300,
        backbone: BackboneSpec {
            net: ConvNetSpec {
                in_channels: 3,
                layers: vec![
                    l(64, 2),
                    l(128, 2),
                    l(256, 2),
                    l(512, 2),
                    l(512, 2),
                    l(256, 2),
                    l(256, 2),
                    l(256, 3),
                ],
            },
            taps: vec![2, 3, 4, 5, 6, 7],
        },
        priors: PriorSpec::ssd300(),
    }
}

/// 299x299 input, five strided blocks ending in 2048 channels.
pub fn paper_classifier_arch() -> ClassifierArch {
    let l = ConvLayerSpec::new;
    ClassifierArch {
        input_size: 299,
        backbone: ConvNetSpec {
            in_channels: 3,
            layers: vec![l(32, 2), l(64, 2), l(128, 2), l(256, 2), l(512, 2), l(2048, 1)],
        },
    }
}
