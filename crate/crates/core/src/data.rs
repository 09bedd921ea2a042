//! Domain types, line-record file I/O and low-resource subsampling.
//!
//! Dataset files carry one JSON object per line with the fields
//! `id`, `tokens`, `segment_ids`, `label`, `rationale`. Attribution files
//! carry `instance_id`, `method`, `model_id`, `scores`, `predicted_label`,
//! `meta`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{keyed_rng, purpose};

/// Maximum number of redraws when enforcing class coverage in [`subsample`].
pub const SUBSAMPLE_MAX_RETRIES: u32 = 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line_no}: malformed record: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("instance {id}: label {label:?} is not in the label set")]
    LabelOutsideSet { id: String, label: String },
    #[error("instance {id}: tokens, segment_ids and rationale lengths differ (or are empty)")]
    LengthMismatch { id: String },
    #[error("instance {id}: segment_ids must be non-decreasing values in {{0,1}}")]
    InvalidSegments { id: String },
    #[error("instance {id}: rationale values must be 0 or 1")]
    InvalidRationale { id: String },
    #[error("duplicate instance id {id}")]
    DuplicateId { id: String },
    #[error("label set needs at least 2 labels, got {0}")]
    LabelSetTooSmall(usize),
    #[error("subsample size {size} is invalid for a dataset of {available} instances")]
    SizeTooLarge { size: usize, available: usize },
    #[error("subsampling requires a train split, got {0}")]
    NotTrainSplit(Split),
    #[error("cannot cover all {classes} classes with {size} instances")]
    ClassCoverageUnsatisfiable { size: usize, classes: usize },
    #[error("attribution for {id}: {reason}")]
    InvalidAttribution { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// Guesses the split from a file name; anything unrecognised is `Test`.
    pub fn from_file_name(path: &Path) -> Split {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if stem.contains("train") {
            Split::Train
        } else if stem.contains("dev") || stem.contains("valid") {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

/// One evaluation example. `tokens` is the task input only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<String>,
    pub segment_ids: Vec<u32>,
    #[serde(rename = "label")]
    pub gold_label: String,
    pub rationale: Vec<u8>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_positive_rationale(&self) -> bool {
        self.rationale.contains(&1)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.tokens.len();
        if n == 0 || self.segment_ids.len() != n || self.rationale.len() != n {
            return Err(DataError::LengthMismatch {
                id: self.id.clone(),
            });
        }
        let segments_ok = self.segment_ids.iter().all(|&s| s <= 1)
            && self.segment_ids.windows(2).all(|w| w[0] <= w[1]);
        if !segments_ok {
            return Err(DataError::InvalidSegments {
                id: self.id.clone(),
            });
        }
        if self.rationale.iter().any(|&r| r > 1) {
            return Err(DataError::InvalidRationale {
                id: self.id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    split: Split,
    instances: Vec<Instance>,
    label_set: Vec<String>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset, checking every instance and dataset-level invariant.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        label_set: Vec<String>,
        instances: Vec<Instance>,
    ) -> Result<Self, DataError> {
        if label_set.len() < 2 {
            return Err(DataError::LabelSetTooSmall(label_set.len()));
        }
        let mut index = HashMap::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            inst.validate()?;
            if !label_set.contains(&inst.gold_label) {
                return Err(DataError::LabelOutsideSet {
                    id: inst.id.clone(),
                    label: inst.gold_label.clone(),
                });
            }
            if index.insert(inst.id.clone(), i).is_some() {
                return Err(DataError::DuplicateId {
                    id: inst.id.clone(),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            split,
            instances,
            label_set,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Instance> {
        self.index.get(id).map(|&i| &self.instances[i])
    }

    /// Same instances with a different split tag.
    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Reads a dataset file.
///
/// Without `expected_label_set` the label set is the sorted set of labels
/// found in the file. The split is guessed from the file name.
pub fn load_dataset(
    path: &Path,
    expected_label_set: Option<&[String]>,
) -> Result<Dataset, DataError> {
    let instances: Vec<Instance> = read_lines(path)?;
    let label_set = match expected_label_set {
        Some(labels) => labels.to_vec(),
        None => {
            let mut labels: Vec<String> = instances.iter().map(|i| i.gold_label.clone()).collect();
            labels.sort();
            labels.dedup();
            labels
        }
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Split::from_file_name(path), label_set, instances)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    write_lines(path, dataset.instances())
}

/// Attribution method. `gold` and `random` are reference methods that flow
/// through the same pipeline as real ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Attn,
    Ig,
    Shap,
    Gold,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Attn,
        Method::Ig,
        Method::Shap,
        Method::Gold,
        Method::Random,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Attn => "attn",
            Method::Ig => "ig",
            Method::Shap => "shap",
            Method::Gold => "gold",
            Method::Random => "random",
        }
    }

    /// Methods that need model internals and therefore come from an adapter.
    pub fn needs_adapter(&self) -> bool {
        matches!(self, Method::Attn | Method::Ig)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown attribution method {s:?}"))
    }
}

/// Per-instance token scores from one attribution method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub instance_id: String,
    pub method: Method,
    pub model_id: String,
    pub scores: Vec<f64>,
    pub predicted_label: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl AttributionRecord {
    pub fn check_against(&self, instance: &Instance) -> Result<(), DataError> {
        let invalid = |reason: String| DataError::InvalidAttribution {
            id: self.instance_id.clone(),
            reason,
        };
        if self.instance_id != instance.id {
            return Err(invalid(format!("refers to instance {}", instance.id)));
        }
        if self.scores.len() != instance.len() {
            return Err(invalid(format!(
                "{} scores for {} tokens",
                self.scores.len(),
                instance.len()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(invalid("non-finite score".into()));
        }
        if self.method == Method::Gold {
            let matches = self
                .scores
                .iter()
                .zip(&instance.rationale)
                .all(|(&s, &r)| s == f64::from(r));
            if !matches {
                return Err(invalid("gold scores differ from the rationale".into()));
            }
        }
        Ok(())
    }
}

/// The human rationale as an attribution record.
pub fn gold_record(instance: &Instance, model_id: &str) -> AttributionRecord {
    AttributionRecord {
        instance_id: instance.id.clone(),
        method: Method::Gold,
        model_id: model_id.to_string(),
        scores: instance.rationale.iter().map(|&r| f64::from(r)).collect(),
        predicted_label: instance.gold_label.clone(),
        meta: BTreeMap::new(),
    }
}

/// Uniform random scores in `[0, 1)`, keyed by `(seed, instance id)`.
pub fn random_record(instance: &Instance, model_id: &str, seed: u64) -> AttributionRecord {
    let mut rng = keyed_rng(seed, &instance.id, purpose::RANDOM_ATTRIBUTION);
    let scores = (0..instance.len()).map(|_| rng.gen::<f64>()).collect();
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), seed.to_string());
    AttributionRecord {
        instance_id: instance.id.clone(),
        method: Method::Random,
        model_id: model_id.to_string(),
        scores,
        predicted_label: instance.gold_label.clone(),
        meta,
    }
}

pub fn read_attributions(path: &Path) -> Result<Vec<AttributionRecord>, DataError> {
    read_lines(path)
}

pub fn write_attributions(path: &Path, records: &[AttributionRecord]) -> Result<(), DataError> {
    write_lines(path, records)
}

/// Draws `size` training instances uniformly without replacement.
///
/// When `size >= |label_set|` the draw is repeated (up to
/// [`SUBSAMPLE_MAX_RETRIES`] times) until every class appears. Smaller sizes
/// fail with `ClassCoverageUnsatisfiable` unless `allow_partial_coverage`.
/// The result keeps the source order.
pub fn subsample(
    dataset: &Dataset,
    size: usize,
    seed: u64,
    allow_partial_coverage: bool,
) -> Result<Dataset, DataError> {
    if dataset.split() != Split::Train {
        return Err(DataError::NotTrainSplit(dataset.split()));
    }
    let available = dataset.len();
    if size == 0 || size > available {
        return Err(DataError::SizeTooLarge { size, available });
    }
    let classes = dataset.label_set().len();
    let present: HashSet<&str> = dataset
        .instances()
        .iter()
        .map(|i| i.gold_label.as_str())
        .collect();
    let coverable = size >= classes && present.len() == classes;
    if !coverable && !allow_partial_coverage {
        return Err(DataError::ClassCoverageUnsatisfiable { size, classes });
    }

    let key = format!("{}/{}", dataset.name(), size);
    let mut chosen = Vec::new();
    for attempt in 0..SUBSAMPLE_MAX_RETRIES {
        let mut rng = keyed_rng(seed, &format!("{key}/{attempt}"), purpose::SUBSAMPLE);
        chosen = index::sample(&mut rng, available, size).into_vec();
        chosen.sort_unstable();
        if !coverable {
            break;
        }
        let covered: HashSet<&str> = chosen
            .iter()
            .map(|&i| dataset.instances()[i].gold_label.as_str())
            .collect();
        if covered.len() == classes {
            break;
        }
        if attempt + 1 == SUBSAMPLE_MAX_RETRIES {
            return Err(DataError::ClassCoverageUnsatisfiable { size, classes });
        }
    }
    let instances = chosen
        .into_iter()
        .map(|i| dataset.instances()[i].clone())
        .collect();
    Dataset::new(
        format!("{}-n{}", dataset.name(), size),
        Split::Train,
        dataset.label_set().to_vec(),
        instances,
    )
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| DataError::MalformedRecord {
            line_no: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn write_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
