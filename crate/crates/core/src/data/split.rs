use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetIndex, SplitTag};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Exactly `train` + `test` images per class; surplus images are dropped.
    PerClass { train: usize, test: usize },
    /// `round(n * train_fraction)` training images per class, the rest for testing.
    Fraction { train_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(flatten)]
    pub rule: SplitRule,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            rule: SplitRule::Fraction { train_fraction: 0.8 },
            seed: 0,
        }
    }
}

/// Class-balanced, seed-deterministic train/test split.
///
/// Every entry must carry a single species label. Both outputs keep the
/// input's entry order.
pub fn make_split(index: &DatasetIndex, spec: &SplitSpec) -> Result<(DatasetIndex, DatasetIndex), DataError> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); index.num_classes()];
    for (i, e) in index.entries.iter().enumerate() {
        match e.label {
            Some(l) if l < groups.len() => groups[l].push(i),
            _ => return Err(DataError::Split(format!("entry `{}` has no single species label", e.path))),
        }
    }
    if let SplitRule::PerClass { train, test } = spec.rule {
        let short: Vec<String> = groups
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty() && g.len() < train + test)
            .map(|(c, g)| format!("{} ({} < {})", index.classes[c], g.len(), train + test))
            .collect();
        if !short.is_empty() {
            return Err(DataError::Split(format!("too few images for: {}", short.join(", "))));
        }
    }
    if let SplitRule::Fraction { train_fraction } = spec.rule {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(DataError::Split(format!("train_fraction {train_fraction} outside [0, 1]")));
        }
    }

    let mut tags: Vec<Option<SplitTag>> = vec![None; index.len()];
    let mut dropped = 0;
    for (class, group) in groups.iter().enumerate() {
        let mut order = group.clone();
        order.shuffle(&mut seed::rng(spec.seed, &[seed::tag::SPLIT, class as u64]));
        let (n_train, n_test) = match spec.rule {
            SplitRule::PerClass { train, test } => (train, test),
            SplitRule::Fraction { train_fraction } => {
                let t = (order.len() as f64 * train_fraction).round() as usize;
                (t, order.len() - t)
            }
        };
        for (k, &i) in order.iter().enumerate() {
            tags[i] = if k < n_train {
                Some(SplitTag::Train)
            } else if k < n_train + n_test {
                Some(SplitTag::Test)
            } else {
                dropped += 1;
                None
            };
        }
    }
    if dropped > 0 {
        log::info!("split dropped {dropped} surplus images");
    }
    let pick = |tag| DatasetIndex {
        root: index.root.clone(),
        classes: index.classes.clone(),
        entries: index
            .entries
            .iter()
            .zip(&tags)
            .filter(|(_, t)| **t == Some(tag))
            .map(|(e, _)| e.clone())
            .collect(),
        split: Some(tag),
    };
    Ok((pick(SplitTag::Train), pick(SplitTag::Test)))
}
