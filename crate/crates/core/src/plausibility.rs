//! Plausibility: how well attribution rankings agree with human rationales,
//! measured by average precision.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AttributionRecord, Dataset};
use crate::rng::{keyed_rng, purpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlausibilityError {
    #[error("rationale has no positive token")]
    NoPositives,
    #[error("{scores} scores for {rationale} rationale entries")]
    LengthMismatch { scores: usize, rationale: usize },
    #[error("attribution refers to unknown instance {0}")]
    UnknownInstance(String),
    #[error("instance {0} has more than one attribution record")]
    DuplicateRecord(String),
}

/// Average precision of `scores` as a ranking of the positive `rationale`
/// tokens.
///
/// Tokens are visited in descending score order; tokens sharing a score value
/// form one threshold group and precision/recall are measured after the
/// whole group is included: `AP = Σ_n (R_n − R_{n−1}) · P_n`.
pub fn average_precision(scores: &[f64], rationale: &[u8]) -> Result<f64, PlausibilityError> {
    if scores.len() != rationale.len() {
        return Err(PlausibilityError::LengthMismatch {
            scores: scores.len(),
            rationale: rationale.len(),
        });
    }
    let positives = rationale.iter().filter(|&&r| r == 1).count();
    if positives == 0 {
        return Err(PlausibilityError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let total = positives as f64;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let group_score = scores[order[i]];
        while i < order.len() && scores[order[i]] == group_score {
            tp += usize::from(rationale[order[i]] == 1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityResult {
    pub per_instance: BTreeMap<String, f64>,
    /// Absent when nothing was scored.
    pub mean: Option<f64>,
    pub n_scored: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlausibilityOptions {
    /// Rank by `|score|` instead of the signed score.
    pub absolute: bool,
}

/// Per-instance AP and its mean. Instances whose rationale has no positive
/// are skipped and counted. The mean is accumulated in instance-id order.
pub fn plausibility(
    dataset: &Dataset,
    records: &[AttributionRecord],
) -> Result<PlausibilityResult, PlausibilityError> {
    plausibility_with(dataset, records, PlausibilityOptions::default())
}

pub fn plausibility_with(
    dataset: &Dataset,
    records: &[AttributionRecord],
    options: PlausibilityOptions,
) -> Result<PlausibilityResult, PlausibilityError> {
    let mut per_instance = BTreeMap::new();
    let mut n_skipped = 0;
    for rec in records {
        let inst = dataset
            .get(&rec.instance_id)
            .ok_or_else(|| PlausibilityError::UnknownInstance(rec.instance_id.clone()))?;
        let scores: Vec<f64> = if options.absolute {
            rec.scores.iter().map(|s| s.abs()).collect()
        } else {
            rec.scores.clone()
        };
        match average_precision(&scores, &inst.rationale) {
            Ok(ap) => {
                if per_instance.insert(rec.instance_id.clone(), ap).is_some() {
                    return Err(PlausibilityError::DuplicateRecord(rec.instance_id.clone()));
                }
            }
            Err(PlausibilityError::NoPositives) => n_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let n_scored = per_instance.len();
    let mean = (n_scored > 0).then(|| per_instance.values().sum::<f64>() / n_scored as f64);
    Ok(PlausibilityResult {
        per_instance,
        mean,
        n_scored,
        n_skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomBaseline {
    /// Mean plausibility of uniform-random scores.
    pub mean: f64,
    /// Standard error of `mean` across trials.
    pub standard_error: f64,
    /// Mean positive prevalence per instance.
    pub analytic_prevalence: f64,
    pub trials: usize,
    pub n_instances: usize,
}

/// Plausibility of uniform-random scores, averaged over `trials` draws per
/// instance. Random draws are keyed by `(seed, instance id)`.
pub fn random_baseline(
    dataset: &Dataset,
    trials: usize,
    seed: u64,
) -> Result<RandomBaseline, PlausibilityError> {
    let trials = trials.max(1);
    let scored: Vec<_> = dataset
        .instances()
        .iter()
        .filter(|i| i.has_positive_rationale())
        .collect();
    if scored.is_empty() {
        return Err(PlausibilityError::NoPositives);
    }
    let mut sorted = scored;
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    // Dataset-level mean AP for each trial.
    let mut trial_means = vec![0.0; trials];
    let mut prevalence = 0.0;
    for inst in &sorted {
        let mut rng = keyed_rng(seed, &inst.id, purpose::RANDOM_BASELINE);
        let mut scores = vec![0.0; inst.len()];
        for m in trial_means.iter_mut() {
            scores.iter_mut().for_each(|s| *s = rng.gen::<f64>());
            *m += average_precision(&scores, &inst.rationale)?;
        }
        let positives = inst.rationale.iter().filter(|&&r| r == 1).count();
        prevalence += positives as f64 / inst.len() as f64;
    }
    let n = sorted.len() as f64;
    trial_means.iter_mut().for_each(|m| *m /= n);
    let mean = trial_means.iter().sum::<f64>() / trials as f64;
    let standard_error = if trials > 1 {
        let var = trial_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        0.0
    };
    Ok(RandomBaseline {
        mean,
        standard_error,
        analytic_prevalence: prevalence / n,
        trials,
        n_instances: sorted.len(),
    })
}
