use std::io::Read;
use std::time::Duration;

use super::{
    reassemble, AttributeRequest, AttributeResponse, ClassDistribution, ScoreRequest,
    ScoreResponse, Scorer, ScorerError, ScorerInfo,
};

/// Client for a remote scorer speaking the line-record protocol over HTTP.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    base: String,
    agent: ureq::Agent,
}

impl HttpScorer {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(timeout.min(Duration::from_secs(10)))
            .timeout(timeout)
            .build();
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn map_error(&self, request_id: &str, err: ureq::Error) -> ScorerError {
        match err {
            ureq::Error::Status(code, resp) => {
                let body = resp.into_string().unwrap_or_default();
                if code >= 500 || code == 429 {
                    if code == 501 {
                        return ScorerError::Unsupported(format!("{}: {}", self.base, body.trim()));
                    }
                    ScorerError::Transport {
                        endpoint: self.base.clone(),
                        message: format!("HTTP {code}: {}", body.trim()),
                    }
                } else if code == 404 {
                    ScorerError::Unsupported(format!("{}: HTTP 404", self.base))
                } else {
                    ScorerError::Remote {
                        request_id: request_id.to_string(),
                        message: format!("HTTP {code}: {}", body.trim()),
                    }
                }
            }
            ureq::Error::Transport(t) => {
                let is_timeout = std::error::Error::source(&t)
                    .and_then(|s| s.downcast_ref::<std::io::Error>())
                    .is_some_and(|io| {
                        matches!(
                            io.kind(),
                            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
                        )
                    });
                if is_timeout {
                    ScorerError::Timeout {
                        endpoint: self.base.clone(),
                    }
                } else {
                    ScorerError::Transport {
                        endpoint: self.base.clone(),
                        message: t.to_string(),
                    }
                }
            }
        }
    }

    fn post_lines(
        &self,
        path: &str,
        request_id: &str,
        body: String,
    ) -> Result<String, ScorerError> {
        let resp = self
            .agent
            .post(&self.url(path))
            .set("Content-Type", "application/x-ndjson")
            .send_string(&body)
            .map_err(|e| self.map_error(request_id, e))?;
        let mut text = String::new();
        resp.into_reader()
            .read_to_string(&mut text)
            .map_err(|e| ScorerError::Transport {
                endpoint: self.base.clone(),
                message: e.to_string(),
            })?;
        Ok(text)
    }
}

fn parse_line<T: for<'de> serde::Deserialize<'de>>(
    line: &str,
    request_id: &str,
) -> Result<T, ScorerError> {
    serde_json::from_str(line.trim()).map_err(|e| ScorerError::ProtocolViolation {
        request_id: request_id.to_string(),
        reason: format!("unparseable response: {e}"),
    })
}

impl Scorer for HttpScorer {
    fn endpoint(&self) -> String {
        self.base.clone()
    }

    fn info(&self) -> Result<ScorerInfo, ScorerError> {
        let resp = self
            .agent
            .get(&self.url("/v1/info"))
            .call()
            .map_err(|e| self.map_error("info", e))?;
        let text = resp.into_string().map_err(|e| ScorerError::Transport {
            endpoint: self.base.clone(),
            message: e.to_string(),
        })?;
        parse_line(&text, "info")
    }

    fn score(&self, request: &ScoreRequest) -> Result<ClassDistribution, ScorerError> {
        let body = serde_json::to_string(request).expect("request serializes") + "\n";
        let text = self.post_lines("/v1/score", &request.request_id, body)?;
        let resp: ScoreResponse = parse_line(&text, &request.request_id)?;
        if resp.request_id != request.request_id {
            return Err(ScorerError::ProtocolViolation {
                request_id: request.request_id.clone(),
                reason: format!("response carries request_id {:?}", resp.request_id),
            });
        }
        resp.into_result()
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest],
    ) -> Result<Vec<Result<ClassDistribution, ScorerError>>, ScorerError> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let mut body = String::new();
        for r in requests {
            body.push_str(&serde_json::to_string(r).expect("request serializes"));
            body.push('\n');
        }
        let first = &requests[0].request_id;
        let text = self.post_lines("/v1/score_batch", first, body)?;
        let responses = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_line::<ScoreResponse>(l, first))
            .collect::<Result<Vec<_>, _>>()?;
        reassemble(requests, responses)
    }

    fn attribute(&self, request: &AttributeRequest) -> Result<AttributeResponse, ScorerError> {
        let body = serde_json::to_string(request).expect("request serializes") + "\n";
        let text = self.post_lines("/v1/attribute", &request.request_id, body)?;
        let resp: AttributeResponse = parse_line(&text, &request.request_id)?;
        if let Some(message) = resp.error {
            return Err(ScorerError::Remote {
                request_id: request.request_id.clone(),
                message,
            });
        }
        Ok(resp)
    }
}
