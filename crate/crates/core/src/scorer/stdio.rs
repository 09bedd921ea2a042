use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::Serialize;

use super::{
    reassemble, AttributeRequest, AttributeResponse, ClassDistribution, ScoreRequest,
    ScoreResponse, Scorer, ScorerError, ScorerInfo,
};

struct Pipes {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Scorer running as a subprocess: one request line on stdin, one response
/// line on stdout. Score requests are bare request records; `/v1/info` and
/// `/v1/attribute` equivalents carry `"op": "info"` / `"op": "attribute"`.
pub struct StdioScorer {
    command: String,
    child: Mutex<Child>,
    pipes: Mutex<Pipes>,
}

#[derive(Serialize)]
struct OpEnvelope<'a, T: Serialize> {
    op: &'a str,
    #[serde(flatten)]
    body: T,
}

impl StdioScorer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, ScorerError> {
        let command = std::iter::once(program.to_string())
            .chain(args.iter().cloned())
            .collect::<Vec<_>>()
            .join(" ");
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScorerError::Transport {
                endpoint: format!("stdio:{command}"),
                message: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            command,
            child: Mutex::new(child),
            pipes: Mutex::new(Pipes { stdin, stdout }),
        })
    }

    fn transport(&self, message: impl ToString) -> ScorerError {
        ScorerError::Transport {
            endpoint: self.endpoint(),
            message: message.to_string(),
        }
    }

    /// Writes all lines, then reads one response line per request line.
    fn exchange(&self, lines: &[String]) -> Result<Vec<String>, ScorerError> {
        let mut pipes = self.pipes.lock().expect("stdio pipes lock");
        for line in lines {
            pipes
                .stdin
                .write_all(line.as_bytes())
                .map_err(|e| self.transport(e))?;
            pipes
                .stdin
                .write_all(b"\n")
                .map_err(|e| self.transport(e))?;
        }
        pipes.stdin.flush().map_err(|e| self.transport(e))?;
        let mut out = Vec::with_capacity(lines.len());
        for _ in lines {
            let mut buf = String::new();
            let n = pipes
                .stdout
                .read_line(&mut buf)
                .map_err(|e| self.transport(e))?;
            if n == 0 {
                return Err(self.transport("scorer process closed its output"));
            }
            out.push(buf);
        }
        Ok(out)
    }
}

impl Drop for StdioScorer {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn parse<T: for<'de> serde::Deserialize<'de>>(
    line: &str,
    request_id: &str,
) -> Result<T, ScorerError> {
    serde_json::from_str(line.trim()).map_err(|e| ScorerError::ProtocolViolation {
        request_id: request_id.to_string(),
        reason: format!("unparseable response: {e}"),
    })
}

impl Scorer for StdioScorer {
    fn endpoint(&self) -> String {
        format!("stdio:{}", self.command)
    }

    fn info(&self) -> Result<ScorerInfo, ScorerError> {
        let line = serde_json::to_string(&serde_json::json!({"op": "info"})).expect("serializes");
        let resp = self.exchange(&[line])?;
        parse(&resp[0], "info")
    }

    fn score(&self, request: &ScoreRequest) -> Result<ClassDistribution, ScorerError> {
        let mut results = self.score_batch(std::slice::from_ref(request))?;
        results.pop().expect("one result")
    }

    fn score_batch(
        &self,
        requests: &[ScoreRequest],
    ) -> Result<Vec<Result<ClassDistribution, ScorerError>>, ScorerError> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let lines: Vec<String> = requests
            .iter()
            .map(|r| serde_json::to_string(r).expect("request serializes"))
            .collect();
        let first = &requests[0].request_id;
        let responses = self
            .exchange(&lines)?
            .iter()
            .map(|l| parse::<ScoreResponse>(l, first))
            .collect::<Result<Vec<_>, _>>()?;
        reassemble(requests, responses)
    }

    fn attribute(&self, request: &AttributeRequest) -> Result<AttributeResponse, ScorerError> {
        let line = serde_json::to_string(&OpEnvelope {
            op: "attribute",
            body: request,
        })
        .expect("serializes");
        let resp: AttributeResponse = parse(&self.exchange(&[line])?[0], &request.request_id)?;
        if let Some(message) = resp.error {
            if message.starts_with("unsupported") {
                return Err(ScorerError::Unsupported(message));
            }
            return Err(ScorerError::Remote {
                request_id: request.request_id.clone(),
                message,
            });
        }
        Ok(resp)
    }
}
