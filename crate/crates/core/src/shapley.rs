//! Shapley Value Sampling over input tokens, plus an exact brute-force
//! Shapley computation used to verify it.
//!
//! The value of a coalition `S` of token positions is the scorer's
//! probability for the target label when every token outside `S` is masked.
//! The target is fixed once from the unmasked input.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AttributionRecord, Instance, Method};
use crate::rng::{keyed_rng, purpose};
use crate::scorer::{Gateway, ScoreRequest, ScorerError};

/// Largest instance `shapley_exact` accepts (2^n scorer calls).
pub const EXACT_MAX_TOKENS: usize = 20;

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("instance {0} has no tokens")]
    DegenerateInstance(String),
    #[error("exact Shapley values need at most {EXACT_MAX_TOKENS} tokens, got {0}")]
    TooManyTokens(usize),
    #[error("target label {0:?} is not in the scorer's label set")]
    UnknownTarget(String),
    #[error("num_permutations must be at least 1")]
    NoPermutations,
    #[error("permutation {0} is not a permutation of the token positions")]
    InvalidPermutation(usize),
}

/// Which probability the value function reads.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "label")]
pub enum Target {
    #[default]
    PredictedLabelProb,
    FixedLabelProb(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapleyConfig {
    pub num_permutations: usize,
    pub seed: u64,
    pub target: Target,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        Self {
            num_permutations: 25,
            seed: 0,
            target: Target::PredictedLabelProb,
        }
    }
}

/// Coalition as a bitset over token positions.
type Coalition = Vec<u64>;

fn empty_coalition(n: usize) -> Coalition {
    vec![0; n.div_ceil(64)]
}

fn insert(c: &mut Coalition, i: usize) {
    c[i / 64] |= 1 << (i % 64);
}

fn contains(c: &Coalition, i: usize) -> bool {
    c[i / 64] & (1 << (i % 64)) != 0
}

/// Masked positions = complement of the coalition.
fn masked_positions(c: &Coalition, n: usize) -> Vec<usize> {
    (0..n).filter(|&i| !contains(c, i)).collect()
}

/// Unmasked prediction plus the resolved target label.
struct Anchor {
    predicted_label: String,
    target: String,
    full_value: f64,
}

fn anchor(instance: &Instance, gateway: &Gateway, target: &Target) -> Result<Anchor, ShapleyError> {
    if instance.is_empty() {
        return Err(ShapleyError::DegenerateInstance(instance.id.clone()));
    }
    let request = ScoreRequest::new(
        format!("{}:full", instance.id),
        instance.tokens.clone(),
        instance.segment_ids.clone(),
        vec![],
    );
    let dist = gateway.score(&request)?;
    let target = match target {
        Target::PredictedLabelProb => dist.predicted_label.clone(),
        Target::FixedLabelProb(label) => {
            if !gateway.label_set().contains(label) {
                return Err(ShapleyError::UnknownTarget(label.clone()));
            }
            label.clone()
        }
    };
    Ok(Anchor {
        full_value: dist.prob(&target),
        predicted_label: dist.predicted_label,
        target,
    })
}

/// Scores each distinct coalition once; returns values aligned with `coalitions`.
fn coalition_values(
    instance: &Instance,
    gateway: &Gateway,
    target: &str,
    coalitions: &[Coalition],
    tag: &str,
) -> Result<Vec<f64>, ShapleyError> {
    let n = instance.len();
    let requests: Vec<ScoreRequest> = coalitions
        .iter()
        .enumerate()
        .map(|(k, c)| {
            ScoreRequest::new(
                format!("{}:{tag}:{k}", instance.id),
                instance.tokens.clone(),
                instance.segment_ids.clone(),
                masked_positions(c, n),
            )
        })
        .collect();
    let dists = gateway.batch_score(&requests)?;
    Ok(dists.iter().map(|d| d.prob(target)).collect())
}

/// Permutations for one instance, drawn from a generator keyed by
/// `(seed, instance_id)`.
pub fn sample_permutations(
    instance_id: &str,
    n: usize,
    num_permutations: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = keyed_rng(seed, instance_id, purpose::SHAPLEY_PERMUTATIONS);
    (0..num_permutations)
        .map(|_| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect()
}

/// Shapley Value Sampling with `config.num_permutations` random insertion orders.
pub fn shapley_sample(
    instance: &Instance,
    gateway: &Gateway,
    config: &ShapleyConfig,
) -> Result<AttributionRecord, ShapleyError> {
    if config.num_permutations == 0 {
        return Err(ShapleyError::NoPermutations);
    }
    let perms = sample_permutations(
        &instance.id,
        instance.len(),
        config.num_permutations,
        config.seed,
    );
    let mut record = shapley_with_permutations(instance, gateway, &config.target, &perms)?;
    record.meta.insert(
        "num_permutations".into(),
        config.num_permutations.to_string(),
    );
    record.meta.insert("seed".into(), config.seed.to_string());
    Ok(record)
}

/// Averages marginal contributions over the given insertion orders.
///
/// Every distinct coalition met along the walks is scored exactly once, in
/// one gateway batch, in order of first appearance.
pub fn shapley_with_permutations(
    instance: &Instance,
    gateway: &Gateway,
    target: &Target,
    permutations: &[Vec<usize>],
) -> Result<AttributionRecord, ShapleyError> {
    let n = instance.len();
    let anchor = anchor(instance, gateway, target)?;
    for (k, p) in permutations.iter().enumerate() {
        let mut seen = vec![false; n];
        let valid = p.len() == n
            && p.iter()
                .all(|&i| i < n && !std::mem::replace(&mut seen[i], true));
        if !valid {
            return Err(ShapleyError::InvalidPermutation(k));
        }
    }

    // Coalition index 0 is the empty set; the full set comes from the anchor.
    let mut index: HashMap<Coalition, usize> = HashMap::new();
    let mut coalitions = vec![empty_coalition(n)];
    index.insert(empty_coalition(n), 0);
    let mut walks: Vec<Vec<usize>> = Vec::with_capacity(permutations.len());
    for p in permutations {
        let mut c = empty_coalition(n);
        let mut walk = Vec::with_capacity(n.saturating_sub(1));
        for &i in &p[..n - 1] {
            insert(&mut c, i);
            let next = coalitions.len();
            let id = *index.entry(c.clone()).or_insert_with(|| {
                coalitions.push(c.clone());
                next
            });
            walk.push(id);
        }
        walks.push(walk);
    }
    let values = coalition_values(instance, gateway, &anchor.target, &coalitions, "shap")?;

    let mut totals = vec![0.0; n];
    for (p, walk) in permutations.iter().zip(&walks) {
        let mut prev = values[0];
        for (step, &i) in p.iter().enumerate() {
            let current = if step + 1 == n {
                anchor.full_value
            } else {
                values[walk[step]]
            };
            totals[i] += current - prev;
            prev = current;
        }
    }
    let m = permutations.len().max(1) as f64;
    Ok(record(
        instance,
        gateway,
        totals.into_iter().map(|t| t / m).collect(),
        anchor,
        "sampling",
    ))
}

/// Exact Shapley values by enumerating all 2^n coalitions.
pub fn shapley_exact(
    instance: &Instance,
    gateway: &Gateway,
    target: &Target,
) -> Result<AttributionRecord, ShapleyError> {
    let n = instance.len();
    if n > EXACT_MAX_TOKENS {
        return Err(ShapleyError::TooManyTokens(n));
    }
    let anchor = anchor(instance, gateway, target)?;
    let full = (1usize << n) - 1;
    let coalitions: Vec<Coalition> = (0..full).map(|mask| vec![mask as u64]).collect();
    let mut values = coalition_values(instance, gateway, &anchor.target, &coalitions, "exact")?;
    values.push(anchor.full_value);

    // weight(s) = s!(n-s-1)!/n! = 1 / (n * C(n-1, s))
    let mut binom = vec![1.0f64; n];
    for s in 1..n {
        binom[s] = binom[s - 1] * (n - s) as f64 / s as f64;
    }
    let weight: Vec<f64> = binom.iter().map(|b| 1.0 / (n as f64 * b)).collect();

    let mut phi = vec![0.0; n];
    for mask in 0..=full {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            let bit = 1 << i;
            if mask & bit == 0 {
                *p += weight[size] * (values[mask | bit] - values[mask]);
            }
        }
    }
    Ok(record(instance, gateway, phi, anchor, "exact"))
}

fn record(
    instance: &Instance,
    gateway: &Gateway,
    scores: Vec<f64>,
    anchor: Anchor,
    estimator: &str,
) -> AttributionRecord {
    let mut meta = BTreeMap::new();
    meta.insert("estimator".to_string(), estimator.to_string());
    meta.insert("target".to_string(), anchor.target);
    AttributionRecord {
        instance_id: instance.id.clone(),
        method: Method::Shap,
        model_id: gateway.model_id().to_string(),
        scores,
        predicted_label: anchor.predicted_label,
        meta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{
        ClassDistribution, Paradigm, Scorer, ScorerInfo, SyntheticScorer, SyntheticScorerSpec,
    };
    use std::sync::Arc;

    fn instance(tokens: &[&str]) -> Instance {
        Instance {
            id: "i".into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            segment_ids: vec![0; tokens.len()],
            gold_label: "A".into(),
            rationale: vec![1; tokens.len()],
        }
    }

    /// v({0,1}) = 1 and 0 otherwise, for the predicted label "A".
    struct PureInteraction;

    impl Scorer for PureInteraction {
        fn endpoint(&self) -> String {
            "interaction".into()
        }
        fn info(&self) -> Result<ScorerInfo, ScorerError> {
            Ok(ScorerInfo {
                model_id: "interaction".into(),
                label_set: vec!["A".into(), "B".into()],
                paradigm: Paradigm::Synthetic,
            })
        }
        fn score(&self, r: &ScoreRequest) -> Result<ClassDistribution, ScorerError> {
            let both = r.masked_positions.is_empty();
            let labels = ["A".to_string(), "B".to_string()];
            Ok(ClassDistribution::from_aligned(
                &labels,
                if both { &[1.0, 0.0] } else { &[0.0, 1.0] },
            ))
        }
    }

    fn gateway(s: Arc<dyn Scorer>) -> Gateway {
        let labels = s.info().unwrap().label_set;
        Gateway::new(s, labels)
    }

    #[test]
    fn pure_interaction_splits_evenly() {
        let gw = gateway(Arc::new(PureInteraction));
        let inst = instance(&["x", "y"]);
        let exact = shapley_exact(&inst, &gw, &Target::PredictedLabelProb).unwrap();
        assert_eq!(exact.scores, vec![0.5, 0.5]);
        let both_orders = shapley_with_permutations(
            &inst,
            &gw,
            &Target::PredictedLabelProb,
            &[vec![0, 1], vec![1, 0]],
        )
        .unwrap();
        assert_eq!(both_orders.scores, vec![0.5, 0.5]);
        // Each sampled order credits one token fully, so sampling is only
        // symmetric in expectation.
        let cfg = ShapleyConfig {
            num_permutations: 4000,
            ..Default::default()
        };
        let sampled = shapley_sample(&inst, &gw, &cfg).unwrap();
        assert!((sampled.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((sampled.scores[0] - 0.5).abs() < 0.05);
        assert_eq!(sampled.predicted_label, "A");
    }

    fn synthetic(weights: &[(&str, [f64; 2])]) -> Gateway {
        let spec = SyntheticScorerSpec {
            model_id: "syn".into(),
            labels: vec!["A".into(), "B".into()],
            bias: vec![0.2, 0.0],
            temperature: 1.0,
            weights: weights
                .iter()
                .map(|(t, w)| (t.to_string(), w.to_vec()))
                .collect(),
            pair_weights: vec![],
        };
        gateway(Arc::new(SyntheticScorer::new(spec).unwrap()))
    }

    #[test]
    fn single_token_is_full_minus_empty() {
        let gw = synthetic(&[("good", [1.5, 0.0])]);
        let inst = instance(&["good"]);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expected = sig(1.7) - sig(0.2);
        for m in [1, 3, 40] {
            let cfg = ShapleyConfig {
                num_permutations: m,
                ..Default::default()
            };
            let r = shapley_sample(&inst, &gw, &cfg).unwrap();
            assert!((r.scores[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn efficiency_and_dummy() {
        let gw = synthetic(&[("a", [1.0, -0.5]), ("b", [0.3, 0.9]), ("c", [-1.2, 0.0])]);
        let inst = instance(&["a", "b", "c", "zzz"]);
        let r = shapley_exact(&inst, &gw, &Target::PredictedLabelProb).unwrap();
        let t = &r.meta["target"];
        let full = gw
            .score(&ScoreRequest::new(
                "f",
                inst.tokens.clone(),
                inst.segment_ids.clone(),
                vec![],
            ))
            .unwrap();
        let empty = gw
            .score(&ScoreRequest::new(
                "e",
                inst.tokens.clone(),
                inst.segment_ids.clone(),
                vec![0, 1, 2, 3],
            ))
            .unwrap();
        let sum: f64 = r.scores.iter().sum();
        assert!((sum - (full.prob(t) - empty.prob(t))).abs() < 1e-12);
        assert!(r.scores[3].abs() < 1e-15);
    }

    #[test]
    fn fixed_target_must_be_known() {
        let gw = synthetic(&[("a", [1.0, 0.0])]);
        let err =
            shapley_exact(&instance(&["a"]), &gw, &Target::FixedLabelProb("Z".into())).unwrap_err();
        assert!(matches!(err, ShapleyError::UnknownTarget(_)));
        let r = shapley_exact(&instance(&["a"]), &gw, &Target::FixedLabelProb("B".into())).unwrap();
        assert!(r.scores[0] < 0.0);
        assert_eq!(r.predicted_label, "A");
    }

    #[test]
    fn error_paths() {
        let gw = synthetic(&[]);
        let big = instance(&vec!["t"; EXACT_MAX_TOKENS + 1]);
        assert!(matches!(
            shapley_exact(&big, &gw, &Target::PredictedLabelProb),
            Err(ShapleyError::TooManyTokens(21))
        ));
        let mut empty = instance(&[]);
        empty.rationale.clear();
        assert!(matches!(
            shapley_sample(&empty, &gw, &ShapleyConfig::default()),
            Err(ShapleyError::DegenerateInstance(_))
        ));
        let cfg = ShapleyConfig {
            num_permutations: 0,
            ..Default::default()
        };
        assert!(matches!(
            shapley_sample(&instance(&["a"]), &gw, &cfg),
            Err(ShapleyError::NoPermutations)
        ));
        assert!(matches!(
            shapley_with_permutations(
                &instance(&["a", "b"]),
                &gw,
                &Target::PredictedLabelProb,
                &[vec![0, 0]]
            ),
            Err(ShapleyError::InvalidPermutation(0))
        ));
    }

    #[test]
    fn permutations_are_keyed_by_instance_and_seed() {
        assert_eq!(
            sample_permutations("x", 10, 5, 1),
            sample_permutations("x", 10, 5, 1)
        );
        assert_ne!(
            sample_permutations("x", 10, 5, 1),
            sample_permutations("y", 10, 5, 1)
        );
        assert_ne!(
            sample_permutations("x", 10, 5, 1),
            sample_permutations("x", 10, 5, 2)
        );
    }
}
