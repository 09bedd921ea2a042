//! Server side of the scorer protocol, for exposing any in-process
//! [`Scorer`] over HTTP or stdio.

use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde_json::Value;
use tiny_http::{Header, Method as HttpMethod, Response, Server};

use super::{
    AttributeRequest, AttributeResponse, ScoreRequest, ScoreResponse, Scorer, ScorerError,
};

/// Running HTTP server; stops when dropped.
pub struct HttpServerHandle {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl HttpServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `/v1/info`, `/v1/score`, `/v1/score_batch` and `/v1/attribute`.
pub fn serve_http(
    scorer: Arc<dyn Scorer>,
    addr: &str,
    threads: usize,
) -> io::Result<HttpServerHandle> {
    let server = Arc::new(Server::http(addr).map_err(|e| io::Error::other(e.to_string()))?);
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| io::Error::other("server is not bound to an IP address"))?;
    let workers = (0..threads.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let scorer = Arc::clone(&scorer);
            thread::spawn(move || {
                while let Ok(mut request) = server.recv() {
                    let mut body = String::new();
                    let (status, text) = match request.as_reader().read_to_string(&mut body) {
                        Ok(_) => route(scorer.as_ref(), request.method(), request.url(), &body),
                        Err(e) => (
                            400,
                            format!("{{\"error\":{}}}\n", Value::from(e.to_string())),
                        ),
                    };
                    let header = Header::from_bytes("Content-Type", "application/x-ndjson")
                        .expect("static header");
                    let _ = request.respond(
                        Response::from_string(text)
                            .with_status_code(status)
                            .with_header(header),
                    );
                }
            })
        })
        .collect();
    Ok(HttpServerHandle {
        server,
        workers,
        addr,
    })
}

fn route(scorer: &dyn Scorer, method: &HttpMethod, url: &str, body: &str) -> (u16, String) {
    let path = url.split('?').next().unwrap_or(url);
    match (method, path) {
        (HttpMethod::Get, "/v1/info") => match scorer.info() {
            Ok(info) => (200, line(&info)),
            Err(e) => (500, error_line("info", &e.to_string())),
        },
        (HttpMethod::Post, "/v1/score") => {
            match serde_json::from_str::<ScoreRequest>(body.trim()) {
                Ok(req) => (
                    200,
                    line(&ScoreResponse::from_result(
                        &req.request_id,
                        scorer.score(&req),
                    )),
                ),
                Err(e) => (400, error_line("", &e.to_string())),
            }
        }
        (HttpMethod::Post, "/v1/score_batch") => {
            let parsed: Result<Vec<ScoreRequest>, _> = body
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect();
            match parsed {
                Ok(reqs) => (200, score_lines(scorer, &reqs)),
                Err(e) => (400, error_line("", &e.to_string())),
            }
        }
        (HttpMethod::Post, "/v1/attribute") => {
            match serde_json::from_str::<AttributeRequest>(body.trim()) {
                Ok(req) => match scorer.attribute(&req) {
                    Ok(resp) => (200, line(&resp)),
                    Err(ScorerError::Unsupported(msg)) => (501, error_line(&req.request_id, &msg)),
                    Err(e) => (200, line(&attribute_error(&req.request_id, &e))),
                },
                Err(e) => (400, error_line("", &e.to_string())),
            }
        }
        _ => (404, error_line("", &format!("no route for {path}"))),
    }
}

fn score_lines(scorer: &dyn Scorer, requests: &[ScoreRequest]) -> String {
    let results = match scorer.score_batch(requests) {
        Ok(r) => r,
        Err(e) => requests.iter().map(|_| Err(e.clone())).collect(),
    };
    requests
        .iter()
        .zip(results)
        .map(|(req, res)| line(&ScoreResponse::from_result(&req.request_id, res)))
        .collect()
}

fn attribute_error(request_id: &str, err: &ScorerError) -> AttributeResponse {
    let message = match err {
        ScorerError::Unsupported(m) => format!("unsupported: {m}"),
        other => other.to_string(),
    };
    AttributeResponse {
        request_id: request_id.to_string(),
        scores: Vec::new(),
        predicted_label: String::new(),
        error: Some(message),
    }
}

fn line<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("response serializes");
    s.push('\n');
    s
}

fn error_line(request_id: &str, message: &str) -> String {
    line(&serde_json::json!({"request_id": request_id, "error": message}))
}

/// Serves the stdio framing until `input` reaches end of file.
pub fn serve_stdio(
    scorer: &dyn Scorer,
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    for raw in input.lines() {
        let raw = raw?;
        if raw.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&raw) {
            Err(e) => error_line("", &e.to_string()),
            Ok(value) => match value.get("op").and_then(Value::as_str) {
                Some("info") => match scorer.info() {
                    Ok(info) => line(&info),
                    Err(e) => error_line("info", &e.to_string()),
                },
                Some("attribute") => match serde_json::from_value::<AttributeRequest>(value) {
                    Ok(req) => match scorer.attribute(&req) {
                        Ok(resp) => line(&resp),
                        Err(e) => line(&attribute_error(&req.request_id, &e)),
                    },
                    Err(e) => error_line("", &e.to_string()),
                },
                Some("score") | None => match serde_json::from_value::<ScoreRequest>(value) {
                    Ok(req) => score_lines(scorer, std::slice::from_ref(&req)),
                    Err(e) => error_line("", &e.to_string()),
                },
                Some(other) => error_line("", &format!("unknown op {other:?}")),
            },
        };
        output.write_all(reply.as_bytes())?;
        output.flush()?;
    }
    Ok(())
}
