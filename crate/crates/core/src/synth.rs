//! Synthetic corpus whose labels are decided by the rationale tokens.
//!
//! Each class owns a few "signal" tokens with a strong logit weight; every
//! other vocabulary entry is a "neutral" token with a small random weight.
//! An instance of class `c` places signal tokens of `c` at its rationale
//! positions and neutral tokens elsewhere, and is kept only if the paired
//! scorer predicts `c` on the full input. Gold rationales are therefore
//! faithful to the scorer by construction.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset, Instance, Split};
use crate::rng::{keyed_rng, purpose};
use crate::scorer::SyntheticScorerSpec;

pub const SIGNAL_WEIGHT_RANGE: (f64, f64) = (1.5, 2.5);
pub const NEUTRAL_WEIGHT_SCALE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("rationale prevalence must be in (0, 1), got {0}")]
    Prevalence(f64),
    #[error(
        "vocabulary of {vocab} tokens is too small for {labels} labels (need at least {needed})"
    )]
    VocabTooSmall {
        vocab: usize,
        labels: usize,
        needed: usize,
    },
    #[error("need at least 2 labels and 1 instance")]
    Shape,
    #[error("instance length range {0}..={1} is invalid")]
    Lengths(usize, usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub num_instances: usize,
    pub vocab_size: usize,
    pub rationale_prevalence: f64,
    pub seed: u64,
    pub num_labels: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_instances: 200,
            vocab_size: 200,
            rationale_prevalence: 0.3,
            seed: 0,
            num_labels: 2,
            min_len: 10,
            max_len: 20,
        }
    }
}

pub fn label_names(k: usize) -> Vec<String> {
    if k == 2 {
        vec!["negative".into(), "positive".into()]
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    }
}

/// Generates a test-split dataset and its scorer.
pub fn generate(params: &SynthParams) -> Result<(Dataset, SyntheticScorerSpec), SynthError> {
    let p = params.rationale_prevalence;
    if !(p > 0.0 && p < 1.0) {
        return Err(SynthError::Prevalence(p));
    }
    let k = params.num_labels;
    if k < 2 || params.num_instances == 0 {
        return Err(SynthError::Shape);
    }
    if params.min_len == 0 || params.min_len > params.max_len {
        return Err(SynthError::Lengths(params.min_len, params.max_len));
    }
    let needed = 4 * k;
    if params.vocab_size < needed {
        return Err(SynthError::VocabTooSmall {
            vocab: params.vocab_size,
            labels: k,
            needed,
        });
    }
    let mut rng = keyed_rng(params.seed, "corpus", purpose::SYNTH);
    let labels = label_names(k);

    // Signal tokens: a quarter of the vocabulary, split evenly across classes.
    let signal_per_class = (params.vocab_size / (4 * k)).max(1);
    let mut signal: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut neutral = Vec::new();
    let mut weights = BTreeMap::new();
    for t in 0..params.vocab_size {
        let token = format!("w{t:04}");
        let w: Vec<f64> = if t < signal_per_class * k {
            let class = t % k;
            signal[class].push(token.clone());
            let strength = rng.gen_range(SIGNAL_WEIGHT_RANGE.0..SIGNAL_WEIGHT_RANGE.1);
            (0..k)
                .map(|c| if c == class { strength } else { 0.0 })
                .collect()
        } else {
            neutral.push(token.clone());
            (0..k)
                .map(|_| rng.gen_range(-NEUTRAL_WEIGHT_SCALE..NEUTRAL_WEIGHT_SCALE))
                .collect()
        };
        weights.insert(token, w);
    }
    let spec = SyntheticScorerSpec {
        model_id: format!("synthetic-s{}", params.seed),
        labels: labels.clone(),
        bias: vec![0.0; k],
        temperature: 1.0,
        weights,
        pair_weights: Vec::new(),
    };

    let mut instances = Vec::with_capacity(params.num_instances);
    for i in 0..params.num_instances {
        let class = rng.gen_range(0..k);
        let inst = loop {
            let candidate = draw_instance(
                &mut rng,
                params,
                &signal[class],
                &neutral,
                format!("syn-{i:05}"),
                &labels[class],
            );
            if spec.distribution(&candidate.tokens, &[]).predicted_label == labels[class] {
                break candidate;
            }
        };
        instances.push(inst);
    }
    let dataset = Dataset::new(
        format!("synthetic-s{}", params.seed),
        Split::Test,
        labels,
        instances,
    )?;
    Ok((dataset, spec))
}

fn draw_instance(
    rng: &mut ChaCha8Rng,
    params: &SynthParams,
    signal: &[String],
    neutral: &[String],
    id: String,
    label: &str,
) -> Instance {
    let len = rng.gen_range(params.min_len..=params.max_len);
    let n_rationale = ((params.rationale_prevalence * len as f64).round() as usize).clamp(1, len);
    let positions = rand::seq::index::sample(rng, len, n_rationale).into_vec();
    let mut rationale = vec![0u8; len];
    for p in positions {
        rationale[p] = 1;
    }
    let tokens = rationale
        .iter()
        .map(|&r| {
            let pool = if r == 1 { signal } else { neutral };
            pool[rng.gen_range(0..pool.len())].clone()
        })
        .collect();
    Instance {
        id,
        tokens,
        segment_ids: vec![0; len],
        gold_label: label.to_string(),
        rationale,
    }
}
