use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::{
    argmax_first, ClassDistribution, ScoreRequest, Scorer, ScorerError, ScorerInfo,
    NORMALIZATION_TOLERANCE,
};

/// Retry schedule for transport errors: `attempts` tries in total, sleeping
/// `base_delay * 2^k` before retry `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    fn run<T>(&self, mut f: impl FnMut() -> Result<T, ScorerError>) -> Result<T, ScorerError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt + 1 < self.attempts => {
                    thread::sleep(self.base_delay * 2u32.pow(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Checks a response against the distribution invariants: every label known,
/// every label present, probabilities non-negative and normalised, and the
/// predicted label equal to the argmax (ties to the earlier label).
pub fn validate_distribution(
    dist: &ClassDistribution,
    label_set: &[String],
    request_id: &str,
) -> Result<(), ScorerError> {
    let violation = |reason: String| ScorerError::ProtocolViolation {
        request_id: request_id.to_string(),
        reason,
    };
    if let Some(unknown) = dist.probs.keys().find(|l| !label_set.contains(l)) {
        return Err(violation(format!("unknown label {unknown:?}")));
    }
    let mut aligned = Vec::with_capacity(label_set.len());
    for label in label_set {
        match dist.probs.get(label) {
            Some(&p) if p.is_finite() && p >= 0.0 => aligned.push(p),
            Some(&p) => return Err(violation(format!("invalid probability {p} for {label:?}"))),
            None => return Err(violation(format!("missing probability for {label:?}"))),
        }
    }
    let total: f64 = aligned.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(violation(format!("probabilities sum to {total}")));
    }
    let expected = &label_set[argmax_first(&aligned)];
    if &dist.predicted_label != expected {
        return Err(violation(format!(
            "predicted_label {:?} is not the argmax {expected:?}",
            dist.predicted_label
        )));
    }
    Ok(())
}

type Slot = Mutex<Option<Result<Vec<ClassDistribution>, ScorerError>>>;

/// Validating, retrying, parallel front end over a [`Scorer`].
///
/// Batches are cut into fixed-size chunks independent of `parallelism`, so
/// the exchanges sent to a scorer (and therefore the results) do not depend
/// on the worker count.
#[derive(Clone)]
pub struct Gateway {
    scorer: Arc<dyn Scorer>,
    model_id: String,
    label_set: Vec<String>,
    parallelism: usize,
    chunk_size: usize,
    retry: RetryPolicy,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("endpoint", &self.scorer.endpoint())
            .field("label_set", &self.label_set)
            .field("parallelism", &self.parallelism)
            .finish()
    }
}

impl Gateway {
    pub fn new(scorer: Arc<dyn Scorer>, label_set: Vec<String>) -> Self {
        Self {
            model_id: scorer.endpoint(),
            scorer,
            label_set,
            parallelism: 1,
            chunk_size: 64,
            retry: RetryPolicy::default(),
        }
    }

    /// Queries `/v1/info` (with retries) and uses the advertised label set.
    pub fn connect(scorer: Arc<dyn Scorer>) -> Result<(Self, ScorerInfo), ScorerError> {
        let retry = RetryPolicy::default();
        let info = retry.run(|| scorer.info())?;
        let gateway = Self::new(scorer, info.label_set.clone()).with_model_id(&info.model_id);
        Ok((gateway, info))
    }

    pub fn with_model_id(mut self, model_id: &str) -> Self {
        self.model_id = model_id.to_string();
        self
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size.max(1);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn scorer(&self) -> &Arc<dyn Scorer> {
        &self.scorer
    }

    pub fn endpoint(&self) -> String {
        self.scorer.endpoint()
    }

    pub fn score(&self, request: &ScoreRequest) -> Result<ClassDistribution, ScorerError> {
        let wrap = |e: ScorerError| ScorerError::RequestFailed {
            request_id: request.request_id.clone(),
            source: Box::new(e),
        };
        request.validate().map_err(wrap)?;
        let dist = self
            .retry
            .run(|| self.scorer.score(request))
            .map_err(wrap)?;
        validate_distribution(&dist, &self.label_set, &request.request_id).map_err(wrap)?;
        Ok(dist)
    }

    /// Scores all requests; output is positionally aligned with the input.
    ///
    /// On failure the error of the earliest failing request is returned,
    /// wrapped in `RequestFailed` with its `request_id`.
    pub fn batch_score(
        &self,
        requests: &[ScoreRequest],
    ) -> Result<Vec<ClassDistribution>, ScorerError> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        for r in requests {
            r.validate().map_err(|e| ScorerError::RequestFailed {
                request_id: r.request_id.clone(),
                source: Box::new(e),
            })?;
        }
        let chunks: Vec<&[ScoreRequest]> = requests.chunks(self.chunk_size).collect();
        let workers = self.parallelism.min(chunks.len());
        let slots: Vec<Slot> = chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);

        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failed.load(Ordering::Relaxed) {
                        break;
                    }
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= chunks.len() {
                        break;
                    }
                    let result = self.score_chunk(chunks[i]);
                    if result.is_err() {
                        failed.store(true, Ordering::Relaxed);
                    }
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });

        let mut out = Vec::with_capacity(requests.len());
        let mut first_error = None;
        for slot in slots {
            match slot.into_inner().expect("slot lock") {
                Some(Ok(dists)) => out.extend(dists),
                Some(Err(e)) => {
                    first_error = Some(e);
                    break;
                }
                // Skipped after a failure; the failing chunk comes later.
                None => {}
            }
        }
        match first_error {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn score_chunk(&self, chunk: &[ScoreRequest]) -> Result<Vec<ClassDistribution>, ScorerError> {
        let results = self
            .retry
            .run(|| self.scorer.score_batch(chunk))
            .map_err(|e| ScorerError::RequestFailed {
                request_id: chunk[0].request_id.clone(),
                source: Box::new(e),
            })?;
        if results.len() != chunk.len() {
            return Err(ScorerError::RequestFailed {
                request_id: chunk[0].request_id.clone(),
                source: Box::new(ScorerError::ProtocolViolation {
                    request_id: chunk[0].request_id.clone(),
                    reason: format!("{} results for {} requests", results.len(), chunk.len()),
                }),
            });
        }
        chunk
            .iter()
            .zip(results)
            .map(|(req, res)| {
                res.and_then(|d| {
                    validate_distribution(&d, &self.label_set, &req.request_id).map(|_| d)
                })
                .map_err(|e| ScorerError::RequestFailed {
                    request_id: req.request_id.clone(),
                    source: Box::new(e),
                })
            })
            .collect()
    }
}
