//! Faithfulness by saliency-ordered masking.
//!
//! For each threshold `t` in 0, 10, …, 100 % the top-`t` % tokens of every
//! instance (by attribution score) are masked, the scorer is queried afresh,
//! and macro-F1 against the gold labels is recorded. The normalised area
//! under this curve is the faithfulness score; lower means the attribution
//! found the tokens the model actually relies on.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AttributionRecord, Dataset, Method};
use crate::scorer::{Gateway, ScoreRequest, ScorerError};

pub const DEFAULT_THRESHOLDS: [u32; 11] = [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
pub const MACRO_F1: &str = "macro_f1";

#[derive(Debug, Error)]
pub enum FaithfulnessError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("no attribution record for instance {0}")]
    MissingRecord(String),
    #[error("attribution refers to unknown instance {0}")]
    UnknownInstance(String),
    #[error("instance {id}: {scores} scores for {tokens} tokens")]
    ScoreLengthMismatch {
        id: String,
        scores: usize,
        tokens: usize,
    },
    #[error("{predictions} predictions for {golds} gold labels")]
    LengthMismatch { predictions: usize, golds: usize },
    #[error("cannot compare curves with different thresholds or metrics")]
    MetricMismatch,
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub method: Method,
    pub model_id: String,
    pub thresholds: Vec<u32>,
    pub performance: Vec<f64>,
    pub auc_raw: f64,
    pub auc_normalized: f64,
    #[serde(default = "default_metric")]
    pub metric_name: String,
}

fn default_metric() -> String {
    MACRO_F1.to_string()
}

impl FaithfulnessCurve {
    /// Assembles a curve with rectangular AUC normalised by a maximum
    /// performance of 1.0.
    pub fn from_performance(
        method: Method,
        model_id: &str,
        thresholds: Vec<u32>,
        performance: Vec<f64>,
    ) -> Self {
        let auc_raw: f64 = performance.iter().sum();
        let auc_normalized = normalized_auc(auc_raw, 1.0, performance.len());
        Self {
            method,
            model_id: model_id.to_string(),
            thresholds,
            performance,
            auc_raw,
            auc_normalized,
            metric_name: default_metric(),
        }
    }
}

/// `auc_raw / (max_performance × number of thresholds)`.
pub fn normalized_auc(auc_raw: f64, max_performance: f64, num_thresholds: usize) -> f64 {
    if num_thresholds == 0 {
        return 0.0;
    }
    auc_raw / (max_performance * num_thresholds as f64)
}

/// Positions to mask at `threshold_percent`: the `k = round_half_up(t·n/100)`
/// highest-scoring tokens, ties to the lower index. Returned sorted.
pub fn perturb(scores: &[f64], threshold_percent: u32) -> Vec<usize> {
    let n = scores.len();
    let t = threshold_percent.min(100) as usize;
    let k = (t * n + 50) / 100;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut masked: Vec<usize> = order.into_iter().take(k).collect();
    masked.sort_unstable();
    masked
}

/// Macro-averaged F1 over `label_set`. A class absent from both predictions
/// and golds has F1 = 0 and still counts in the average.
pub fn task_performance(
    predictions: &[String],
    golds: &[String],
    label_set: &[String],
) -> Result<f64, FaithfulnessError> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(FaithfulnessError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if label_set.is_empty() {
        return Ok(0.0);
    }
    let f1_sum: f64 = label_set
        .iter()
        .map(|label| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (p, g) in predictions.iter().zip(golds) {
                match (p == label, g == label) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(f1_sum / label_set.len() as f64)
}

pub fn faithfulness_curve(
    dataset: &Dataset,
    records: &[AttributionRecord],
    gateway: &Gateway,
) -> Result<FaithfulnessCurve, FaithfulnessError> {
    faithfulness_curve_with(dataset, records, gateway, &DEFAULT_THRESHOLDS)
}

/// Runs the masking protocol at the given thresholds. Every instance needs
/// exactly one record; all masked inputs go through one gateway batch.
pub fn faithfulness_curve_with(
    dataset: &Dataset,
    records: &[AttributionRecord],
    gateway: &Gateway,
    thresholds: &[u32],
) -> Result<FaithfulnessCurve, FaithfulnessError> {
    if thresholds.is_empty()
        || thresholds.iter().any(|&t| t > 100)
        || thresholds.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(FaithfulnessError::InvalidThresholds(format!(
            "{thresholds:?}"
        )));
    }
    let mut by_id: HashMap<&str, &AttributionRecord> = HashMap::with_capacity(records.len());
    for r in records {
        if dataset.get(&r.instance_id).is_none() {
            return Err(FaithfulnessError::UnknownInstance(r.instance_id.clone()));
        }
        by_id.insert(r.instance_id.as_str(), r);
    }
    let (method, model_id) = records
        .first()
        .map(|r| (r.method, r.model_id.clone()))
        .unwrap_or((Method::Gold, gateway.model_id().to_string()));

    let mut requests = Vec::with_capacity(thresholds.len() * dataset.len());
    for &t in thresholds {
        for inst in dataset.instances() {
            let rec = by_id
                .get(inst.id.as_str())
                .ok_or_else(|| FaithfulnessError::MissingRecord(inst.id.clone()))?;
            if rec.scores.len() != inst.len() {
                return Err(FaithfulnessError::ScoreLengthMismatch {
                    id: inst.id.clone(),
                    scores: rec.scores.len(),
                    tokens: inst.len(),
                });
            }
            requests.push(ScoreRequest::new(
                format!("{}:t{t}", inst.id),
                inst.tokens.clone(),
                inst.segment_ids.clone(),
                perturb(&rec.scores, t),
            ));
        }
    }
    let dists = gateway.batch_score(&requests)?;
    let golds: Vec<String> = dataset
        .instances()
        .iter()
        .map(|i| i.gold_label.clone())
        .collect();
    let performance = dists
        .chunks(dataset.len().max(1))
        .take(thresholds.len())
        .map(|level| {
            let preds: Vec<String> = level.iter().map(|d| d.predicted_label.clone()).collect();
            task_performance(&preds, &golds, dataset.label_set())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FaithfulnessCurve::from_performance(
        method,
        &model_id,
        thresholds.to_vec(),
        performance,
    ))
}

/// `auc_normalized(method) − auc_normalized(gold)`; negative when the method
/// is more faithful than the gold rationale.
pub fn faithfulness_gap(
    method: &FaithfulnessCurve,
    gold: &FaithfulnessCurve,
) -> Result<f64, FaithfulnessError> {
    if method.thresholds != gold.thresholds || method.metric_name != gold.metric_name {
        return Err(FaithfulnessError::MetricMismatch);
    }
    Ok(method.auc_normalized - gold.auc_normalized)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn perturb_examples() {
        let scores: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        assert_eq!(perturb(&scores, 20), vec![8, 9]);
        assert!(perturb(&scores, 0).is_empty());
        assert_eq!(perturb(&scores, 100), (0..10).collect::<Vec<_>>());
        assert_eq!(perturb(&[0.5, 0.5, 0.1, 0.9], 50), vec![0, 3]);
    }

    #[test]
    fn perturb_rounds_half_up() {
        // 5 tokens: 10% → 0.5 → 1, 30% → 1.5 → 2, 50% → 2.5 → 3.
        let scores = [0.5, 0.4, 0.3, 0.2, 0.1];
        assert_eq!(perturb(&scores, 10).len(), 1);
        assert_eq!(perturb(&scores, 30).len(), 2);
        assert_eq!(perturb(&scores, 50).len(), 3);
        assert_eq!(perturb(&scores, 0).len(), 0);
    }

    #[test]
    fn macro_f1_examples() {
        let labels = s(&["A", "B"]);
        assert_eq!(
            task_performance(&s(&["A", "B"]), &s(&["A", "B"]), &labels).unwrap(),
            1.0
        );
        assert_eq!(
            task_performance(
                &s(&["A", "B", "A", "B"]),
                &s(&["A", "A", "B", "B"]),
                &labels
            )
            .unwrap(),
            0.5
        );
        assert_eq!(
            task_performance(&s(&["A", "A"]), &s(&["A", "A"]), &labels).unwrap(),
            0.5
        );
        assert!(matches!(
            task_performance(&s(&["A"]), &s(&["A", "B"]), &labels),
            Err(FaithfulnessError::LengthMismatch { .. })
        ));
        assert!(task_performance(&[], &[], &labels).is_err());
    }

    #[test]
    fn normalization_formula() {
        let mut perf = vec![0.0; 11];
        perf[0] = 1.0;
        let c = FaithfulnessCurve::from_performance(
            Method::Gold,
            "m",
            DEFAULT_THRESHOLDS.to_vec(),
            perf,
        );
        assert!((c.auc_normalized - 1.0 / 11.0).abs() < 1e-15);
        assert!((c.auc_normalized - 0.0909).abs() < 1e-4);
    }

    #[test]
    fn gap_is_signed_difference() {
        let curve = |auc: f64| {
            FaithfulnessCurve::from_performance(Method::Attn, "m", vec![0, 50, 100], vec![auc; 3])
        };
        assert_eq!(faithfulness_gap(&curve(0.3), &curve(0.3)).unwrap(), 0.0);
        assert!((faithfulness_gap(&curve(0.30), &curve(0.08)).unwrap() - 0.22).abs() < 1e-12);
        assert!(faithfulness_gap(&curve(0.1), &curve(0.4)).unwrap() < 0.0);
        let other =
            FaithfulnessCurve::from_performance(Method::Gold, "m", vec![0, 100], vec![1.0; 2]);
        assert!(matches!(
            faithfulness_gap(&curve(0.3), &other),
            Err(FaithfulnessError::MetricMismatch)
        ));
    }
}
