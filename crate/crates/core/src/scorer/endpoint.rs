use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use super::{HttpScorer, Scorer, ScorerError, StdioScorer, SyntheticScorer, SyntheticScorerSpec};

/// Where a scorer lives. Parsed from strings of the form
/// `synthetic:<spec.json>`, `http://host:port`, or `stdio:<program> [args…]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Synthetic(PathBuf),
    Http(String),
    Stdio { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(path) = s.strip_prefix("synthetic:") {
            Ok(Endpoint::Synthetic(PathBuf::from(path)))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Endpoint::Http(s.to_string()))
        } else if let Some(cmd) = s.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(String::from);
            let program = parts.next().ok_or("stdio endpoint needs a command")?;
            Ok(Endpoint::Stdio {
                program,
                args: parts.collect(),
            })
        } else {
            Err(format!(
                "unrecognised endpoint {s:?} (expected synthetic:, http:// or stdio:)"
            ))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Synthetic(p) => write!(f, "synthetic:{}", p.display()),
            Endpoint::Http(url) => f.write_str(url),
            Endpoint::Stdio { program, args } => {
                write!(f, "stdio:{program}")?;
                for a in args {
                    write!(f, " {a}")?;
                }
                Ok(())
            }
        }
    }
}

impl Endpoint {
    pub fn connect(&self, timeout: Duration) -> Result<Arc<dyn Scorer>, ScorerError> {
        match self {
            Endpoint::Synthetic(path) => {
                let down = |message: String| ScorerError::Transport {
                    endpoint: self.to_string(),
                    message,
                };
                let spec = SyntheticScorerSpec::load(path).map_err(|e| down(e.to_string()))?;
                Ok(Arc::new(SyntheticScorer::new(spec).map_err(down)?))
            }
            Endpoint::Http(url) => Ok(Arc::new(HttpScorer::new(url, timeout))),
            Endpoint::Stdio { program, args } => Ok(Arc::new(StdioScorer::spawn(program, args)?)),
        }
    }
}
