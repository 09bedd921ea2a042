//! Experiment sweeps over (model × method × training size × seed).
//!
//! Model training is external: each registered model is an endpoint whose
//! address may contain `{size}` and `{seed}` placeholders, so one entry can
//! name a whole grid of trained checkpoints. The engine computes `shap`,
//! `gold` and `random` itself and takes `attn`/`ig` from attribution files or
//! from the endpoint's `/v1/attribute`.
//!
//! Every run key writes one JSON record under `<output>/runs/`; records that
//! already exist are loaded instead of recomputed, so interrupted sweeps
//! resume where they stopped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    gold_record, load_dataset, random_record, read_attributions, write_attributions,
    AttributionRecord, DataError, Dataset, Method,
};
use crate::faithfulness::{
    faithfulness_curve_with, FaithfulnessCurve, FaithfulnessError, DEFAULT_THRESHOLDS,
};
use crate::plausibility::{
    plausibility_with, PlausibilityError, PlausibilityOptions, PlausibilityResult,
};
use crate::scorer::{AttributeRequest, Endpoint, Gateway, Paradigm, Scorer, ScorerError};
use crate::shapley::{shapley_sample, ShapleyConfig, ShapleyError};
use crate::stats::{
    bin_resources, dunn_pairwise, kruskal_wallis, Adjustment, DunnResult, StatTestResult,
    StatsError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("endpoint {endpoint} is down: {source}")]
    EndpointDown {
        endpoint: String,
        #[source]
        source: ScorerError,
    },
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Shapley(#[from] ShapleyError),
    #[error(transparent)]
    Plausibility(#[from] PlausibilityError),
    #[error(transparent)]
    Faithfulness(#[from] FaithfulnessError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("no {method} attributions for model {model}: {reason}")]
    MissingAttribution {
        model: String,
        method: Method,
        reason: String,
    },
    #[error("model {model} advertises labels {found:?}, dataset uses {expected:?}")]
    LabelSetMismatch {
        model: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("empty group: {0}")]
    EmptyGroup(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed run record: {reason}")]
    MalformedRunRecord { path: PathBuf, reason: String },
}

impl HarnessError {
    /// True for failures caused by an unreachable or misbehaving endpoint.
    pub fn is_endpoint_failure(&self) -> bool {
        match self {
            HarnessError::EndpointDown { .. } => true,
            HarnessError::Scorer(e) => e.is_endpoint_failure(),
            HarnessError::Shapley(ShapleyError::Scorer(e)) => e.is_endpoint_failure(),
            HarnessError::Faithfulness(FaithfulnessError::Scorer(e)) => e.is_endpoint_failure(),
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    /// `synthetic:<spec>`, `http://…` or `stdio:<cmd>`; may contain
    /// `{size}` and `{seed}`.
    pub endpoint: String,
    /// Overrides the paradigm advertised on `/v1/info`.
    #[serde(default)]
    pub paradigm: Option<Paradigm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Evaluation dataset (line-record file).
    pub dataset: PathBuf,
    #[serde(default)]
    pub label_set: Option<Vec<String>>,
    pub models: BTreeMap<String, ModelEndpoint>,
    pub methods: Vec<Method>,
    pub training_sizes: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<u32>,
    #[serde(default)]
    pub shapley: ShapleyConfig,
    pub output_dir: PathBuf,
    /// Path template for precomputed attributions, with `{model}`,
    /// `{method}`, `{size}` and `{seed}` placeholders.
    #[serde(default)]
    pub attributions: Option<String>,
    /// Rank by absolute score for plausibility.
    #[serde(default)]
    pub abs_scores: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_thresholds() -> Vec<u32> {
    DEFAULT_THRESHOLDS.to_vec()
}

fn default_workers() -> usize {
    1
}

fn default_timeout_secs() -> u64 {
    60
}

impl ExperimentConfig {
    /// Reads a TOML config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &Path| {
            if p.is_relative() {
                base.join(p)
            } else {
                p.to_path_buf()
            }
        };
        self.dataset = resolve(&self.dataset);
        self.output_dir = resolve(&self.output_dir);
        if let Some(t) = &self.attributions {
            self.attributions = Some(resolve(Path::new(t)).to_string_lossy().into_owned());
        }
        for m in self.models.values_mut() {
            if let Some(rest) = m.endpoint.strip_prefix("synthetic:") {
                m.endpoint = format!("synthetic:{}", resolve(Path::new(rest)).display());
            }
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.models.is_empty() {
            return bad("at least one model is required");
        }
        if self.training_sizes.is_empty() {
            return bad("at least one training size is required");
        }
        if self.training_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("training_sizes must be strictly ascending");
        }
        if self.shapley.num_permutations == 0 {
            return bad("shapley.num_permutations must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        for (id, m) in &self.models {
            if id.is_empty() || id.contains(['/', '\\']) || id.contains("__") {
                return bad(&format!(
                    "model id {id:?} must be non-empty without '/', '\\\\' or '__'"
                ));
            }
            m.endpoint
                .parse::<Endpoint>()
                .map_err(HarnessError::Config)?;
        }
        Ok(())
    }
}

fn expand(template: &str, size: usize, seed: u64) -> String {
    template
        .replace("{size}", &size.to_string())
        .replace("{seed}", &seed.to_string())
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunKey {
    pub model_id: String,
    pub paradigm: Paradigm,
    pub method: Method,
    pub training_size: usize,
    pub seed: u64,
}

impl RunKey {
    pub fn file_stem(&self) -> String {
        format!(
            "{}__{}__n{}__s{}",
            self.model_id, self.method, self.training_size, self.seed
        )
    }
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{} {} n={} seed={}",
            self.model_id, self.paradigm, self.method, self.training_size, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub key: RunKey,
    pub endpoint: String,
    pub dataset: String,
    pub meta: BTreeMap<String, String>,
    pub plausibility: PlausibilityResult,
    pub faithfulness: FaithfulnessCurve,
    /// Logged to `timings.tsv`, not stored in the record, so records stay
    /// byte-identical across reruns.
    #[serde(skip)]
    pub wall_time: Option<Duration>,
}

pub fn runs_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("runs")
}

pub fn record_path(output_dir: &Path, key: &RunKey) -> PathBuf {
    runs_dir(output_dir).join(format!("{}.json", key.file_stem()))
}

/// Loads every run record under `<dir>/runs/` (or `dir` itself when it has
/// no `runs/` subdirectory), sorted by key.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let runs = runs_dir(dir);
    let dir = if runs.is_dir() {
        runs
    } else {
        dir.to_path_buf()
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(read_record(&path)?);
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}

fn read_record(path: &Path) -> Result<RunRecord, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::MalformedRunRecord {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes via a temporary file and rename so readers never see partial files.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct Job {
    key: RunKey,
    endpoint: String,
    gateway: Gateway,
}

/// Runs every (model, size, seed, method) tuple and returns the records in
/// key order. Existing records are reused.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    config.validate()?;
    let timeout = Duration::from_secs(config.timeout_secs);

    // Connect every distinct endpoint once, sequentially.
    let mut connected: HashMap<String, (Gateway, Paradigm)> = HashMap::new();
    let mut label_set = config.label_set.clone();
    let mut jobs = Vec::new();
    for (model_id, model) in &config.models {
        for &size in &config.training_sizes {
            for &seed in &config.seeds {
                let address = expand(&model.endpoint, size, seed);
                if !connected.contains_key(&address) {
                    let endpoint: Endpoint = address.parse().map_err(HarnessError::Config)?;
                    let down = |source| HarnessError::EndpointDown {
                        endpoint: address.clone(),
                        source,
                    };
                    let scorer: Arc<dyn Scorer> = endpoint.connect(timeout).map_err(down)?;
                    let (gateway, info) = Gateway::connect(scorer).map_err(down)?;
                    let labels = label_set.get_or_insert_with(|| info.label_set.clone());
                    let same: BTreeSet<_> = labels.iter().collect();
                    if same != info.label_set.iter().collect() {
                        return Err(HarnessError::LabelSetMismatch {
                            model: model_id.clone(),
                            expected: labels.clone(),
                            found: info.label_set,
                        });
                    }
                    let gateway = gateway.with_parallelism(config.workers);
                    connected.insert(
                        address.clone(),
                        (gateway, model.paradigm.unwrap_or(info.paradigm)),
                    );
                }
                let (gateway, paradigm) = connected[&address].clone();
                for &method in &config.methods {
                    jobs.push(Job {
                        key: RunKey {
                            model_id: model_id.clone(),
                            paradigm,
                            method,
                            training_size: size,
                            seed,
                        },
                        endpoint: address.clone(),
                        gateway: gateway.clone(),
                    });
                }
            }
        }
    }
    let dataset = load_dataset(&config.dataset, label_set.as_deref())?;
    fs::create_dir_all(runs_dir(&config.output_dir)).map_err(io_err(&config.output_dir))?;

    let slots: Vec<Mutex<Option<Result<RunRecord, HarnessError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(jobs.len()) {
            scope.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let result = run_one(config, &dataset, job);
                if result.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });

    let mut records = Vec::with_capacity(jobs.len());
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(Ok(r)) => records.push(r),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    records.sort_by(|a, b| a.key.cmp(&b.key));
    log_timings(&config.output_dir, &records)?;
    let summary = aggregate(
        &records,
        &[
            GroupField::Paradigm,
            GroupField::Method,
            GroupField::TrainingSize,
        ],
    )?;
    write_atomic(
        &config.output_dir.join("summary.tsv"),
        summary.to_tsv().as_bytes(),
    )?;
    Ok(records)
}

fn run_one(
    config: &ExperimentConfig,
    dataset: &Dataset,
    job: &Job,
) -> Result<RunRecord, HarnessError> {
    let path = record_path(&config.output_dir, &job.key);
    if path.exists() {
        if let Ok(existing) = read_record(&path) {
            if existing.key == job.key {
                return Ok(existing);
            }
        }
    }
    let started = Instant::now();
    let (attributions, mut meta) = attributions_for(config, dataset, job)?;
    let attribution_path = config
        .output_dir
        .join("attributions")
        .join(format!("{}.jsonl", job.key.file_stem()));
    fs::create_dir_all(attribution_path.parent().expect("has parent"))
        .map_err(io_err(&config.output_dir))?;
    write_attributions(&attribution_path, &attributions)?;

    let options = PlausibilityOptions {
        absolute: config.abs_scores,
    };
    let plausibility = plausibility_with(dataset, &attributions, options)?;
    let mut faithfulness =
        faithfulness_curve_with(dataset, &attributions, &job.gateway, &config.thresholds)?;
    faithfulness.method = job.key.method;
    faithfulness.model_id = job.key.model_id.clone();
    meta.insert("abs_scores".into(), config.abs_scores.to_string());
    meta.insert("n_instances".into(), dataset.len().to_string());

    let record = RunRecord {
        key: job.key.clone(),
        endpoint: job.endpoint.clone(),
        dataset: dataset.name().to_string(),
        meta,
        plausibility,
        faithfulness,
        wall_time: Some(started.elapsed()),
    };
    let mut text = serde_json::to_string_pretty(&record).expect("record serializes");
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(record)
}

fn attributions_for(
    config: &ExperimentConfig,
    dataset: &Dataset,
    job: &Job,
) -> Result<(Vec<AttributionRecord>, BTreeMap<String, String>), HarnessError> {
    let key = &job.key;
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), key.seed.to_string());
    if key.method == Method::Shap {
        meta.insert(
            "num_permutations".into(),
            config.shapley.num_permutations.to_string(),
        );
    }
    let from_file = match (key.method.needs_adapter(), &config.attributions) {
        (true, Some(template)) => {
            let path = PathBuf::from(
                expand(template, key.training_size, key.seed)
                    .replace("{model}", &key.model_id)
                    .replace("{method}", key.method.as_str()),
            );
            path.exists().then_some(path)
        }
        _ => None,
    };
    let records = match from_file {
        Some(path) => {
            meta.insert("attributions".into(), path.display().to_string());
            attributions_from_file(dataset, &path, key.method, &key.model_id)?
        }
        None => compute_attributions(
            dataset,
            key.method,
            &key.model_id,
            key.seed,
            Some(&job.gateway),
            &config.shapley,
        )?,
    };
    Ok((records, meta))
}

/// Loads `method` records from a line-record file, one per dataset instance
/// in dataset order.
pub fn attributions_from_file(
    dataset: &Dataset,
    path: &Path,
    method: Method,
    model_id: &str,
) -> Result<Vec<AttributionRecord>, HarnessError> {
    let by_id: HashMap<String, AttributionRecord> = read_attributions(path)?
        .into_iter()
        .filter(|r| r.method == method)
        .map(|r| (r.instance_id.clone(), r))
        .collect();
    dataset
        .instances()
        .iter()
        .map(|inst| {
            let rec =
                by_id
                    .get(&inst.id)
                    .cloned()
                    .ok_or_else(|| HarnessError::MissingAttribution {
                        model: model_id.to_string(),
                        method,
                        reason: format!("{} has no record for {}", path.display(), inst.id),
                    })?;
            rec.check_against(inst)?;
            Ok(rec)
        })
        .collect()
}

/// Computes one attribution record per instance, in dataset order.
///
/// `gold` and `random` need no gateway. `shap` samples permutations keyed by
/// `seed` (overriding `shapley.seed`). `attn` and `ig` are requested from the
/// endpoint's attribute operation.
pub fn compute_attributions(
    dataset: &Dataset,
    method: Method,
    model_id: &str,
    seed: u64,
    gateway: Option<&Gateway>,
    shapley: &ShapleyConfig,
) -> Result<Vec<AttributionRecord>, HarnessError> {
    let need_gateway = || {
        gateway.ok_or_else(|| HarnessError::MissingAttribution {
            model: model_id.to_string(),
            method,
            reason: "no endpoint given".into(),
        })
    };
    let records: Vec<AttributionRecord> = match method {
        Method::Gold => dataset
            .instances()
            .iter()
            .map(|i| gold_record(i, model_id))
            .collect(),
        Method::Random => dataset
            .instances()
            .iter()
            .map(|i| random_record(i, model_id, seed))
            .collect(),
        Method::Shap => {
            let gateway = need_gateway()?;
            let cfg = ShapleyConfig {
                seed,
                ..shapley.clone()
            };
            dataset
                .instances()
                .iter()
                .map(|i| {
                    shapley_sample(i, gateway, &cfg).map(|mut r| {
                        r.model_id = model_id.to_string();
                        r
                    })
                })
                .collect::<Result<_, _>>()?
        }
        Method::Attn | Method::Ig => {
            let scorer = need_gateway()?.scorer();
            dataset
                .instances()
                .iter()
                .map(|inst| {
                    let request = AttributeRequest {
                        request_id: format!("{}:{}", inst.id, method),
                        tokens: inst.tokens.clone(),
                        segment_ids: inst.segment_ids.clone(),
                        method,
                        target: None,
                        ig_steps: 50,
                    };
                    let resp = scorer.attribute(&request).map_err(|e| match e {
                        ScorerError::Unsupported(reason) => HarnessError::MissingAttribution {
                            model: model_id.to_string(),
                            method,
                            reason,
                        },
                        other => HarnessError::Scorer(other),
                    })?;
                    Ok(AttributionRecord {
                        instance_id: inst.id.clone(),
                        method,
                        model_id: model_id.to_string(),
                        scores: resp.scores,
                        predicted_label: resp.predicted_label,
                        meta: BTreeMap::new(),
                    })
                })
                .collect::<Result<_, HarnessError>>()?
        }
    };
    for (rec, inst) in records.iter().zip(dataset.instances()) {
        rec.check_against(inst)?;
    }
    Ok(records)
}

fn log_timings(output_dir: &Path, records: &[RunRecord]) -> Result<(), HarnessError> {
    let path = output_dir.join("timings.tsv");
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    for r in records {
        if let Some(t) = r.wall_time {
            writeln!(file, "{}\t{:.3}", r.key.file_stem(), t.as_secs_f64())
                .map_err(io_err(&path))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Model,
    Paradigm,
    Method,
    TrainingSize,
    Seed,
}

impl GroupField {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroupField::Model => "model",
            GroupField::Paradigm => "paradigm",
            GroupField::Method => "method",
            GroupField::TrainingSize => "training_size",
            GroupField::Seed => "seed",
        }
    }

    fn value(&self, key: &RunKey) -> GroupValue {
        match self {
            GroupField::Model => GroupValue::Text(key.model_id.clone()),
            GroupField::Paradigm => GroupValue::Text(key.paradigm.to_string()),
            GroupField::Method => GroupValue::Text(key.method.to_string()),
            GroupField::TrainingSize => GroupValue::Number(key.training_size as u64),
            GroupField::Seed => GroupValue::Number(key.seed),
        }
    }
}

impl FromStr for GroupField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            GroupField::Model,
            GroupField::Paradigm,
            GroupField::Method,
            GroupField::TrainingSize,
            GroupField::Seed,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
        .ok_or_else(|| format!("unknown group field {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupValue {
    Number(u64),
    Text(String),
}

impl fmt::Display for GroupValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupValue::Number(n) => write!(f, "{n}"),
            GroupValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: Vec<GroupValue>,
    pub n: usize,
    pub plausibility: Option<MeanSd>,
    pub auc_normalized: MeanSd,
    /// `auc_normalized − auc_normalized(gold)` for records with a gold run
    /// under the same model, size and seed.
    pub faithfulness_gap: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub group_by: Vec<GroupField>,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<&str> = self.group_by.iter().map(GroupField::as_str).collect();
        header.extend([
            "n",
            "plausibility_mean",
            "plausibility_sd",
            "auc_normalized_mean",
            "auc_normalized_sd",
            "faithfulness_gap_mean",
            "faithfulness_gap_sd",
        ]);
        out.push_str(&header.join("\t"));
        out.push('\n');
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for row in &self.rows {
            let mut cells: Vec<String> = row.key.iter().map(ToString::to_string).collect();
            cells.push(row.n.to_string());
            cells.push(fmt(row.plausibility.map(|m| m.mean)));
            cells.push(fmt(row.plausibility.map(|m| m.sd)));
            cells.push(fmt(Some(row.auc_normalized.mean)));
            cells.push(fmt(Some(row.auc_normalized.sd)));
            cells.push(fmt(row.faithfulness_gap.map(|m| m.mean)));
            cells.push(fmt(row.faithfulness_gap.map(|m| m.sd)));
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }
}

fn gold_auc_index(records: &[RunRecord]) -> HashMap<(String, usize, u64), f64> {
    records
        .iter()
        .filter(|r| r.key.method == Method::Gold)
        .map(|r| {
            (
                (r.key.model_id.clone(), r.key.training_size, r.key.seed),
                r.faithfulness.auc_normalized,
            )
        })
        .collect()
}

/// Mean and sd of per-run plausibility, normalised AUC and faithfulness gap,
/// per group. An empty `group_by` yields one global row.
pub fn aggregate(
    records: &[RunRecord],
    group_by: &[GroupField],
) -> Result<SummaryTable, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyGroup(
            "no run records to aggregate".into(),
        ));
    }
    let gold = gold_auc_index(records);
    let mut groups: BTreeMap<Vec<GroupValue>, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = group_by.iter().map(|f| f.value(&r.key)).collect();
        groups.entry(key).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(key, members)| {
            let plaus: Vec<f64> = members.iter().filter_map(|r| r.plausibility.mean).collect();
            let aucs: Vec<f64> = members
                .iter()
                .map(|r| r.faithfulness.auc_normalized)
                .collect();
            let gaps: Vec<f64> = members
                .iter()
                .filter_map(|r| {
                    gold.get(&(r.key.model_id.clone(), r.key.training_size, r.key.seed))
                        .map(|g| r.faithfulness.auc_normalized - g)
                })
                .collect();
            SummaryRow {
                key,
                n: members.len(),
                plausibility: MeanSd::of(&plaus),
                auc_normalized: MeanSd::of(&aucs).expect("group is non-empty"),
                faithfulness_gap: MeanSd::of(&gaps),
            }
        })
        .collect();
    Ok(SummaryTable {
        group_by: group_by.to_vec(),
        rows,
    })
}

/// Per-training-size tables for plotting: one row per size, one column per
/// `method/paradigm` series. Returns (mean plausibility, mean faithfulness gap);
/// the gap table leaves out the gold series.
pub fn plot_tables(records: &[RunRecord]) -> Result<(String, String), HarnessError> {
    let table = aggregate(
        records,
        &[
            GroupField::TrainingSize,
            GroupField::Method,
            GroupField::Paradigm,
        ],
    )?;
    let mut sizes = BTreeSet::new();
    let mut series = BTreeSet::new();
    let mut plaus = HashMap::new();
    let mut gaps = HashMap::new();
    for row in &table.rows {
        let size = row.key[0].clone();
        let name = format!("{}/{}", row.key[1], row.key[2]);
        sizes.insert(size.clone());
        series.insert(name.clone());
        if let Some(p) = row.plausibility {
            plaus.insert((size.clone(), name.clone()), p.mean);
        }
        if let Some(g) = row.faithfulness_gap {
            gaps.insert((size, name), g.mean);
        }
    }
    let render = |values: &HashMap<(GroupValue, String), f64>, skip_gold: bool| {
        let cols: Vec<&String> = series
            .iter()
            .filter(|s| !(skip_gold && s.starts_with("gold/")))
            .collect();
        let mut out = String::from("training_size");
        for c in &cols {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for size in &sizes {
            out.push_str(&size.to_string());
            for c in &cols {
                out.push('\t');
                if let Some(v) = values.get(&(size.clone(), (*c).clone())) {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    };
    Ok((render(&plaus, false), render(&gaps, true)))
}

// ---------------------------------------------------------------------------
// Significance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// One group per attribution method.
    MethodsPairwise,
    /// One group per paradigm, separately within the low- and high-resource bins.
    ParadigmLowVsHigh,
}

impl FromStr for Comparison {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "methods_pairwise" => Ok(Comparison::MethodsPairwise),
            "paradigm_low_vs_high" => Ok(Comparison::ParadigmLowVsHigh),
            other => Err(format!("unknown comparison {other:?}")),
        }
    }
}

/// Sampling unit fed into the tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatMetric {
    /// Per-instance average precision.
    #[default]
    Plausibility,
    /// Per-run normalised AUC.
    Faithfulness,
}

impl FromStr for StatMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plausibility" => Ok(StatMetric::Plausibility),
            "faithfulness" => Ok(StatMetric::Faithfulness),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedGroup {
    pub name: String,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub test: String,
    pub comparison: Comparison,
    pub metric: StatMetric,
    /// `all`, `low` or `high`.
    pub scope: String,
    pub training_sizes: Vec<usize>,
    pub groups: Vec<NamedGroup>,
    pub kruskal_wallis: StatTestResult,
    pub dunn: DunnResult,
}

impl SignificanceReport {
    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    /// Human-readable pairwise table.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# {} {:?} scope={} H={:.6} df={} p={:.6e}\ngroup_a\tgroup_b\tz\tp_raw\tp_adjusted\n",
            self.test,
            self.comparison,
            self.scope,
            self.kruskal_wallis.h,
            self.kruskal_wallis.df,
            self.kruskal_wallis.p_value
        );
        for p in &self.dunn.pairwise {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6e}\t{:.6e}\n",
                self.groups[p.i].name, self.groups[p.j].name, p.z, p.p_raw, p.p_adjusted
            ));
        }
        out
    }
}

fn unit_values(records: &[&RunRecord], metric: StatMetric) -> Vec<f64> {
    match metric {
        StatMetric::Plausibility => records
            .iter()
            .flat_map(|r| r.plausibility.per_instance.values().copied())
            .collect(),
        StatMetric::Faithfulness => records
            .iter()
            .map(|r| r.faithfulness.auc_normalized)
            .collect(),
    }
}

/// Kruskal-Wallis plus Dunn over explicitly named groups.
pub fn significance_from_groups(
    comparison: Comparison,
    metric: StatMetric,
    scope: &str,
    training_sizes: Vec<usize>,
    groups: Vec<(String, Vec<f64>)>,
    adjustment: Adjustment,
) -> Result<SignificanceReport, HarnessError> {
    if let Some((name, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
        return Err(HarnessError::EmptyGroup(format!(
            "group {name} ({scope}) has no values"
        )));
    }
    let values: Vec<Vec<f64>> = groups.iter().map(|(_, v)| v.clone()).collect();
    let kw = kruskal_wallis(&values)?;
    let dunn = dunn_pairwise(&values, adjustment)?;
    Ok(SignificanceReport {
        test: "kruskal_wallis+dunn".into(),
        comparison,
        metric,
        scope: scope.to_string(),
        training_sizes,
        groups: groups
            .into_iter()
            .map(|(name, v)| NamedGroup {
                name,
                size: v.len(),
            })
            .collect(),
        kruskal_wallis: kw,
        dunn,
    })
}

/// Assembles groups from run records and tests them.
///
/// `methods_pairwise` gives one report over all records (or only those whose
/// training size is in `sizes`). `paradigm_low_vs_high` bins the training
/// sizes present (two smallest vs two largest) and gives one report per bin
/// with one group per paradigm.
pub fn significance_report(
    records: &[RunRecord],
    comparison: Comparison,
    metric: StatMetric,
    sizes: Option<&BTreeSet<usize>>,
    adjustment: Adjustment,
) -> Result<Vec<SignificanceReport>, HarnessError> {
    let in_sizes = |r: &&RunRecord| sizes.is_none_or(|s| s.contains(&r.key.training_size));
    match comparison {
        Comparison::MethodsPairwise => {
            let selected: Vec<&RunRecord> = records.iter().filter(in_sizes).collect();
            let mut by_method: BTreeMap<Method, Vec<&RunRecord>> = BTreeMap::new();
            for r in &selected {
                by_method.entry(r.key.method).or_default().push(r);
            }
            let used: BTreeSet<usize> = selected.iter().map(|r| r.key.training_size).collect();
            let groups = by_method
                .into_iter()
                .map(|(m, rs)| (m.to_string(), unit_values(&rs, metric)))
                .collect();
            Ok(vec![significance_from_groups(
                comparison,
                metric,
                "all",
                used.into_iter().collect(),
                groups,
                adjustment,
            )?])
        }
        Comparison::ParadigmLowVsHigh => {
            let present: Vec<usize> = records
                .iter()
                .map(|r| r.key.training_size)
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let bins = bin_resources(&present)?;
            [("low", bins.low), ("high", bins.high)]
                .into_iter()
                .map(|(scope, bin)| {
                    let mut by_paradigm: BTreeMap<Paradigm, Vec<&RunRecord>> = BTreeMap::new();
                    for r in records
                        .iter()
                        .filter(|r| bin.contains(&r.key.training_size))
                    {
                        by_paradigm.entry(r.key.paradigm).or_default().push(r);
                    }
                    let groups = by_paradigm
                        .into_iter()
                        .map(|(p, rs)| (p.to_string(), unit_values(&rs, metric)))
                        .collect();
                    significance_from_groups(
                        comparison,
                        metric,
                        scope,
                        bin.into_iter().collect(),
                        groups,
                        adjustment,
                    )
                })
                .collect()
        }
    }
}
