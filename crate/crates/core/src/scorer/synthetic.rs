//! Deterministic additive-logit scorer.
//!
//! `logit(c) = bias(c) + Σ_{unmasked i} weight(token_i, c)
//!           + Σ_{pairs with both tokens unmasked} pair_weight(c)`,
//! `probs = softmax(logits / temperature)`. Masked tokens are dropped and
//! unknown tokens contribute nothing.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AttributeRequest, AttributeResponse, ClassDistribution, Paradigm, ScoreRequest, Scorer,
    ScorerError, ScorerInfo,
};
use crate::data::{DataError, Method};

/// Interaction term added once when both tokens are present and unmasked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairWeight {
    pub tokens: (String, String),
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScorerSpec {
    #[serde(default = "default_model_id")]
    pub model_id: String,
    pub labels: Vec<String>,
    pub bias: Vec<f64>,
    pub temperature: f64,
    pub weights: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pair_weights: Vec<PairWeight>,
}

fn default_model_id() -> String {
    "synthetic".to_string()
}

impl SyntheticScorerSpec {
    pub fn validate(&self) -> Result<(), String> {
        let k = self.labels.len();
        if k < 2 {
            return Err(format!("need at least 2 classes, got {k}"));
        }
        if self.bias.len() != k || self.bias.iter().any(|b| !b.is_finite()) {
            return Err("bias must have one finite value per class".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        for (token, w) in &self.weights {
            if w.len() != k || w.iter().any(|x| !x.is_finite()) {
                return Err(format!("weights for {token:?} must have {k} finite values"));
            }
        }
        for p in &self.pair_weights {
            if p.weights.len() != k || p.weights.iter().any(|x| !x.is_finite()) {
                return Err(format!(
                    "pair weights for {:?} must have {k} finite values",
                    p.tokens
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| DataError::MalformedRecord {
            line_no: e.line(),
            reason: e.to_string(),
        })?;
        spec.validate()
            .map_err(|reason| DataError::MalformedRecord { line_no: 0, reason })?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut text = serde_json::to_string_pretty(self).expect("spec serializes");
        text.push('\n');
        fs::write(path, text).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Raw logits for the input with `masked` positions dropped.
    pub fn logits(&self, tokens: &[String], masked: &[usize]) -> Vec<f64> {
        let mut logits = self.bias.clone();
        let mut present: HashSet<&str> = HashSet::new();
        let mut m = masked.iter().peekable();
        for (i, tok) in tokens.iter().enumerate() {
            if m.peek() == Some(&&i) {
                m.next();
                continue;
            }
            present.insert(tok);
            if let Some(w) = self.weights.get(tok) {
                for (l, x) in logits.iter_mut().zip(w) {
                    *l += x;
                }
            }
        }
        for p in &self.pair_weights {
            if present.contains(p.tokens.0.as_str()) && present.contains(p.tokens.1.as_str()) {
                for (l, x) in logits.iter_mut().zip(&p.weights) {
                    *l += x;
                }
            }
        }
        logits
    }

    pub fn distribution(&self, tokens: &[String], masked: &[usize]) -> ClassDistribution {
        let logits = self.logits(tokens, masked);
        ClassDistribution::from_aligned(&self.labels, &softmax(&logits, self.temperature))
    }
}

pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// In-process scorer backed by a [`SyntheticScorerSpec`]. Pure and thread-safe.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    spec: SyntheticScorerSpec,
}

impl SyntheticScorer {
    pub fn new(spec: SyntheticScorerSpec) -> Result<Self, String> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SyntheticScorerSpec {
        &self.spec
    }

    fn label_index(&self, label: &str) -> Option<usize> {
        self.spec.labels.iter().position(|l| l == label)
    }
}

impl Scorer for SyntheticScorer {
    fn endpoint(&self) -> String {
        format!("synthetic:{}", self.spec.model_id)
    }

    fn info(&self) -> Result<ScorerInfo, ScorerError> {
        Ok(ScorerInfo {
            model_id: self.spec.model_id.clone(),
            label_set: self.spec.labels.clone(),
            paradigm: Paradigm::Synthetic,
        })
    }

    fn score(&self, request: &ScoreRequest) -> Result<ClassDistribution, ScorerError> {
        request.validate()?;
        Ok(self
            .spec
            .distribution(&request.tokens, &request.masked_positions))
    }

    /// Linear stand-ins for adapter-side methods: `ig` returns each token's
    /// own logit weight for the target class, `attn` the absolute weights
    /// normalised to sum to one (uniform when all are zero).
    fn attribute(&self, request: &AttributeRequest) -> Result<AttributeResponse, ScorerError> {
        let dist = self.spec.distribution(&request.tokens, &[]);
        let target = request
            .target
            .clone()
            .unwrap_or_else(|| dist.predicted_label.clone());
        let c = self
            .label_index(&target)
            .ok_or_else(|| ScorerError::InvalidRequest {
                request_id: request.request_id.clone(),
                reason: format!("unknown target label {target:?}"),
            })?;
        let direct: Vec<f64> = request
            .tokens
            .iter()
            .map(|t| self.spec.weights.get(t).map_or(0.0, |w| w[c]))
            .collect();
        let scores = match request.method {
            Method::Ig => direct,
            Method::Attn => {
                let total: f64 = direct.iter().map(|x| x.abs()).sum();
                if total > 0.0 {
                    direct.iter().map(|x| x.abs() / total).collect()
                } else {
                    vec![1.0 / direct.len().max(1) as f64; direct.len()]
                }
            }
            other => return Err(ScorerError::Unsupported(format!("{other} attributions"))),
        };
        Ok(AttributeResponse {
            request_id: request.request_id.clone(),
            scores,
            predicted_label: dist.predicted_label,
            error: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_class(weights: &[(&str, [f64; 2])], temperature: f64) -> SyntheticScorer {
        SyntheticScorer::new(SyntheticScorerSpec {
            model_id: "syn".into(),
            labels: vec!["A".into(), "B".into()],
            bias: vec![0.0, 0.0],
            temperature,
            weights: weights
                .iter()
                .map(|(t, w)| (t.to_string(), w.to_vec()))
                .collect(),
            pair_weights: vec![],
        })
        .unwrap()
    }

    fn req(tokens: &[&str], masked: Vec<usize>) -> ScoreRequest {
        ScoreRequest::new(
            "r",
            tokens.iter().map(|t| t.to_string()).collect(),
            vec![0; tokens.len()],
            masked,
        )
    }

    #[test]
    fn hand_softmax() {
        let s = two_class(&[("good", [2.0, 0.0])], 1.0);
        let d = s.score(&req(&["good"], vec![])).unwrap();
        let e2 = 2f64.exp();
        assert!((d.prob("A") - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((d.prob("A") - 0.8808).abs() < 1e-4);
        assert!((d.prob("B") - 0.1192).abs() < 1e-4);
        assert_eq!(d.predicted_label, "A");
    }

    #[test]
    fn fully_masked_gives_bias_only() {
        let s = two_class(&[("good", [2.0, 0.0]), ("bad", [0.0, 3.0])], 1.0);
        let d = s.score(&req(&["good", "bad"], vec![0, 1])).unwrap();
        assert_eq!(d.prob("A"), 0.5);
        assert_eq!(d.prob("B"), 0.5);
        assert_eq!(d.predicted_label, "A");
    }

    #[test]
    fn large_temperature_tends_to_uniform() {
        let s = two_class(&[("good", [5.0, -5.0])], 1e9);
        let d = s.score(&req(&["good"], vec![])).unwrap();
        assert!((d.prob("A") - 0.5).abs() < 1e-6);
    }

    #[test]
    fn logits_are_additive_in_token_presence() {
        let s = two_class(
            &[("x", [0.3, -1.0]), ("y", [1.5, 0.2]), ("z", [-0.7, 0.9])],
            1.0,
        );
        let toks: Vec<String> = ["x", "y", "z", "unk"]
            .iter()
            .map(|t| t.to_string())
            .collect();
        let none = s.spec().logits(&toks, &[0, 1, 2, 3]);
        let all = s.spec().logits(&toks, &[]);
        let mut summed = none.clone();
        for keep in 0..4 {
            let masked: Vec<usize> = (0..4).filter(|&i| i != keep).collect();
            let single = s.spec().logits(&toks, &masked);
            for c in 0..2 {
                summed[c] += single[c] - none[c];
            }
        }
        for c in 0..2 {
            assert!((summed[c] - all[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_weight_needs_both_tokens() {
        let mut spec = two_class(&[], 1.0).spec().clone();
        spec.pair_weights.push(PairWeight {
            tokens: ("a".into(), "b".into()),
            weights: vec![4.0, 0.0],
        });
        let toks: Vec<String> = vec!["a".into(), "b".into()];
        assert_eq!(spec.logits(&toks, &[]), vec![4.0, 0.0]);
        assert_eq!(spec.logits(&toks, &[0]), vec![0.0, 0.0]);
        assert_eq!(spec.logits(&toks, &[1]), vec![0.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = two_class(&[], 1.0).spec().clone();
        spec.temperature = 0.0;
        assert!(spec.validate().is_err());
        spec.temperature = 1.0;
        spec.weights.insert("q".into(), vec![1.0]);
        assert!(spec.validate().is_err());
        spec.weights.clear();
        spec.labels.pop();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn attention_proxy_sums_to_one() {
        let s = two_class(&[("good", [2.0, 0.0]), ("ok", [0.5, 0.0])], 1.0);
        let r = s
            .attribute(&AttributeRequest {
                request_id: "a".into(),
                tokens: vec!["good".into(), "ok".into(), "the".into()],
                segment_ids: vec![0, 0, 0],
                method: Method::Attn,
                target: None,
                ig_steps: 50,
            })
            .unwrap();
        assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.scores[2], 0.0);
        assert_eq!(r.predicted_label, "A");
    }
}
