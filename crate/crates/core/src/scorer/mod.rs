//! Black-box scorer interface.
//!
//! The engine talks to models only through [`Scorer`]: "give me the class
//! distribution for this input with these positions occluded". Occlusion is
//! the scorer's business (an encoder adapter substitutes its mask token, the
//! synthetic scorer drops the token).
//!
//! Implementations:
//! - [`SyntheticScorer`]: in-process additive logit model, used as test oracle.
//! - [`HttpScorer`]: remote adapter over `/v1/info`, `/v1/score`,
//!   `/v1/score_batch`, `/v1/attribute`.
//! - [`StdioScorer`]: subprocess adapter, one JSON line in, one line out.
//!
//! [`Gateway`] wraps any of them with response validation, retries and
//! bounded parallelism.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Method;

mod endpoint;
mod gateway;
mod http;
pub mod server;
mod stdio;
mod synthetic;

pub use endpoint::Endpoint;
pub use gateway::{validate_distribution, Gateway, RetryPolicy};
pub use http::HttpScorer;
pub use stdio::StdioScorer;
pub use synthetic::{PairWeight, SyntheticScorer, SyntheticScorerSpec};

/// Tolerance on `Σ probs = 1` for accepted responses.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone)]
pub enum ScorerError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("timed out waiting for {endpoint}")]
    Timeout { endpoint: String },
    #[error("protocol violation in response to {request_id}: {reason}")]
    ProtocolViolation { request_id: String, reason: String },
    #[error("scorer rejected {request_id}: {message}")]
    Remote { request_id: String, message: String },
    #[error("invalid request {request_id}: {reason}")]
    InvalidRequest { request_id: String, reason: String },
    #[error("unsupported by this scorer: {0}")]
    Unsupported(String),
    #[error("request {request_id} failed: {source}")]
    RequestFailed {
        request_id: String,
        #[source]
        source: Box<ScorerError>,
    },
}

impl ScorerError {
    /// Only transport-level failures are retried.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ScorerError::Transport { .. } | ScorerError::Timeout { .. }
        )
    }

    /// True when the endpoint could not be reached at all (directly or wrapped).
    pub fn is_endpoint_failure(&self) -> bool {
        match self {
            ScorerError::Transport { .. } | ScorerError::Timeout { .. } => true,
            ScorerError::RequestFailed { source, .. } => source.is_endpoint_failure(),
            _ => false,
        }
    }
}

/// Model paradigm advertised by an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Pbm,
    Ftm,
    Llm,
    Synthetic,
}

impl Paradigm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Paradigm::Pbm => "pbm",
            Paradigm::Ftm => "ftm",
            Paradigm::Llm => "llm",
            Paradigm::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pbm" => Ok(Paradigm::Pbm),
            "ftm" => Ok(Paradigm::Ftm),
            "llm" => Ok(Paradigm::Llm),
            "synthetic" => Ok(Paradigm::Synthetic),
            other => Err(format!("unknown paradigm {other:?}")),
        }
    }
}

/// Body of `/v1/info`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub model_id: String,
    pub label_set: Vec<String>,
    pub paradigm: Paradigm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub request_id: String,
    pub tokens: Vec<String>,
    pub segment_ids: Vec<u32>,
    /// Sorted, distinct token indices to occlude.
    pub masked_positions: Vec<usize>,
}

impl ScoreRequest {
    /// Builds a request; `masked_positions` is sorted and deduplicated.
    pub fn new(
        request_id: impl Into<String>,
        tokens: Vec<String>,
        segment_ids: Vec<u32>,
        mut masked_positions: Vec<usize>,
    ) -> Self {
        masked_positions.sort_unstable();
        masked_positions.dedup();
        Self {
            request_id: request_id.into(),
            tokens,
            segment_ids,
            masked_positions,
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        let invalid = |reason: &str| ScorerError::InvalidRequest {
            request_id: self.request_id.clone(),
            reason: reason.to_string(),
        };
        if self.tokens.len() != self.segment_ids.len() {
            return Err(invalid("tokens and segment_ids differ in length"));
        }
        if self.masked_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("masked_positions must be sorted and distinct"));
        }
        if self
            .masked_positions
            .last()
            .is_some_and(|&p| p >= self.tokens.len())
        {
            return Err(invalid("masked position out of range"));
        }
        Ok(())
    }
}

/// Probability per class label plus the predicted label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub probs: BTreeMap<String, f64>,
    pub predicted_label: String,
}

impl ClassDistribution {
    /// Builds a distribution from probabilities aligned with `label_set`;
    /// the prediction is the argmax with ties going to the earlier label.
    pub fn from_aligned(label_set: &[String], probs: &[f64]) -> Self {
        let predicted = argmax_first(probs);
        Self {
            probs: label_set
                .iter()
                .cloned()
                .zip(probs.iter().copied())
                .collect(),
            predicted_label: label_set[predicted].clone(),
        }
    }

    pub fn prob(&self, label: &str) -> f64 {
        self.probs.get(label).copied().unwrap_or(0.0)
    }
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One line of a score response. Exactly one of `probs`/`error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ScoreResponse {
    pub fn from_result(request_id: &str, result: Result<ClassDistribution, ScorerError>) -> Self {
        match result {
            Ok(d) => Self {
                request_id: request_id.to_string(),
                probs: Some(d.probs),
                predicted_label: Some(d.predicted_label),
                error: None,
            },
            Err(e) => Self {
                request_id: request_id.to_string(),
                probs: None,
                predicted_label: None,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn into_result(self) -> Result<ClassDistribution, ScorerError> {
        match (self.error, self.probs, self.predicted_label) {
            (Some(message), _, _) => Err(ScorerError::Remote {
                request_id: self.request_id,
                message,
            }),
            (None, Some(probs), Some(predicted_label)) => Ok(ClassDistribution {
                probs,
                predicted_label,
            }),
            _ => Err(ScorerError::ProtocolViolation {
                request_id: self.request_id,
                reason: "response carries neither probs+predicted_label nor error".into(),
            }),
        }
    }
}

/// Body of `/v1/attribute` (adapter-side attention / Integrated Gradients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRequest {
    pub request_id: String,
    pub tokens: Vec<String>,
    pub segment_ids: Vec<u32>,
    pub method: Method,
    /// Label to attribute; the model's predicted label when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: u32,
}

fn default_ig_steps() -> u32 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeResponse {
    pub request_id: String,
    #[serde(default)]
    pub scores: Vec<f64>,
    #[serde(default)]
    pub predicted_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A model the engine can query. Implementations must be stateless per
/// request: identical requests yield identical responses.
pub trait Scorer: Send + Sync {
    /// Human-readable endpoint name for diagnostics.
    fn endpoint(&self) -> String;

    fn info(&self) -> Result<ScorerInfo, ScorerError>;

    fn score(&self, request: &ScoreRequest) -> Result<ClassDistribution, ScorerError>;

    /// Scores several requests in one exchange. The outer error is a
    /// transport-level failure of the whole exchange; inner errors are
    /// per-request. Results are aligned with `requests`.
    #[allow(clippy::type_complexity)]
    fn score_batch(
        &self,
        requests: &[ScoreRequest],
    ) -> Result<Vec<Result<ClassDistribution, ScorerError>>, ScorerError> {
        Ok(requests.iter().map(|r| self.score(r)).collect())
    }

    fn attribute(&self, request: &AttributeRequest) -> Result<AttributeResponse, ScorerError> {
        Err(ScorerError::Unsupported(format!(
            "{} does not provide {} attributions",
            self.endpoint(),
            request.method
        )))
    }
}

/// Reorders batch responses by `request_id` to match `requests`.
pub(crate) fn reassemble(
    requests: &[ScoreRequest],
    responses: Vec<ScoreResponse>,
) -> Result<Vec<Result<ClassDistribution, ScorerError>>, ScorerError> {
    if responses.len() != requests.len() {
        return Err(ScorerError::ProtocolViolation {
            request_id: requests
                .first()
                .map(|r| r.request_id.clone())
                .unwrap_or_default(),
            reason: format!(
                "{} responses for {} requests",
                responses.len(),
                requests.len()
            ),
        });
    }
    let mut by_id: std::collections::HashMap<String, ScoreResponse> = responses
        .into_iter()
        .map(|r| (r.request_id.clone(), r))
        .collect();
    requests
        .iter()
        .map(|req| {
            by_id
                .remove(&req.request_id)
                .map(ScoreResponse::into_result)
                .ok_or_else(|| ScorerError::ProtocolViolation {
                    request_id: req.request_id.clone(),
                    reason: "no response with this request_id".into(),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let toks = vec!["a".to_string(), "b".to_string()];
        let ok = ScoreRequest::new("r", toks.clone(), vec![0, 0], vec![1, 0, 1]);
        assert_eq!(ok.masked_positions, vec![0, 1]);
        assert!(ok.validate().is_ok());
        let out_of_range = ScoreRequest::new("r", toks.clone(), vec![0, 0], vec![2]);
        assert!(out_of_range.validate().is_err());
        let bad_len = ScoreRequest::new("r", toks, vec![0], vec![]);
        assert!(bad_len.validate().is_err());
    }

    #[test]
    fn argmax_ties_go_to_first() {
        assert_eq!(argmax_first(&[0.5, 0.5]), 0);
        assert_eq!(argmax_first(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn reassembly_follows_request_ids() {
        let reqs: Vec<_> = ["x", "y"]
            .iter()
            .map(|id| ScoreRequest::new(*id, vec!["t".into()], vec![0], vec![]))
            .collect();
        let resp = |id: &str, p: f64| ScoreResponse {
            request_id: id.into(),
            probs: Some([("a".to_string(), p), ("b".to_string(), 1.0 - p)].into()),
            predicted_label: Some("a".into()),
            error: None,
        };
        let out = reassemble(&reqs, vec![resp("y", 0.9), resp("x", 0.6)]).unwrap();
        assert_eq!(out[0].as_ref().unwrap().prob("a"), 0.6);
        assert_eq!(out[1].as_ref().unwrap().prob("a"), 0.9);
        assert!(reassemble(&reqs, vec![resp("x", 0.6)]).is_err());
    }
}
