//! Dataset ingestion, class-balanced splits, augmentation, and the synthetic
//! scene generator used for desk-scale experiments.

pub mod annotations;
pub mod augment;
pub mod split;
pub mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::RgbImage;
use thiserror::Error;

use crate::geometry::BoundingBox;

pub use annotations::{coco_to_tsv, load_dataset, ANNOTATION_HEADER};
pub use augment::{augment, AugmentConfig, Augmented, CropAugment, JitterAugment};
pub use split::{make_split, SplitRule, SplitSpec};
pub use synth::{generate_synthetic, BodyShape, Pattern, SpeciesSpec, SyntheticSceneSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    /// 1-based line in the annotation file, when the issue is tied to one.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn join_issues(issues: &[ValidationIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset validation failed: {}", join_issues(.0))]
    Validation(Vec<ValidationIssue>),
    #[error("split cannot be satisfied: {0}")]
    Split(String),
    #[error("synthetic scene spec: {0}")]
    Synthetic(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("annotation conversion: {0}")]
    Convert(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// A ground-truth box with its class index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: BoundingBox,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    /// Image path relative to the dataset root, e.g. `images/000001.png`.
    pub path: String,
    pub width: u32,
    pub height: u32,
    /// Species of the image when all of its boxes share one class.
    pub label: Option<usize>,
    pub boxes: Vec<LabeledBox>,
    /// Decoded pixels for in-memory datasets.
    pub pixels: Option<Arc<RgbImage>>,
}

impl DatasetEntry {
    pub fn pixel_boxes(&self) -> Vec<BoundingBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }
}

/// A validated list of annotated images plus the class-name table.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub root: Option<PathBuf>,
    pub classes: Vec<String>,
    pub entries: Vec<DatasetEntry>,
    pub split: Option<SplitTag>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn load_image(&self, entry: &DatasetEntry) -> Result<RgbImage, DataError> {
        if let Some(px) = &entry.pixels {
            return Ok((**px).clone());
        }
        let path = match &self.root {
            Some(r) => r.join(&entry.path),
            None => PathBuf::from(&entry.path),
        };
        image::open(&path)
            .map(|i| i.to_rgb8())
            .map_err(|source| DataError::Image { path, source })
    }

    /// Entries whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> DatasetIndex {
        DatasetIndex {
            root: self.root.clone(),
            classes: self.classes.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| e.label.is_some_and(|l| classes.contains(&l)))
                .cloned()
                .collect(),
            split: self.split,
        }
    }

    /// Write the `images/` + `annotations.tsv` layout (plus `classes.txt`) under `root`.
    pub fn save(&self, root: &Path) -> Result<DatasetIndex, DataError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| DataError::Io { path, source }
        };
        std::fs::create_dir_all(root.join("images")).map_err(io(root))?;
        let mut out = self.clone();
        out.root = Some(root.to_path_buf());
        for e in out.entries.iter_mut() {
            let dst = root.join(&e.path);
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent).map_err(io(parent))?;
            }
            let img = self.load_image(e)?;
            img.save(&dst).map_err(|source| DataError::Image { path: dst.clone(), source })?;
            e.pixels = None;
        }
        let tsv = root.join("annotations.tsv");
        std::fs::write(&tsv, annotations::to_tsv(self)).map_err(io(&tsv))?;
        let classes = root.join("classes.txt");
        let mut text = self.classes.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        std::fs::write(&classes, text).map_err(io(&classes))?;
        Ok(out)
    }
}
