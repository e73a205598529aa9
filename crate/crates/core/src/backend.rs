//! Generative backends: a JSON-over-HTTP client and a deterministic mock.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub token_logprobs: Vec<f64>,
}

pub trait GenerativeBackend: Send + Sync {
    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<Generation>;

    /// Per-token log-probabilities of `text` given `prompt` under the current
    /// parameters.
    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>>;
}

/// Fixed response table with synthetic token log-probabilities.
///
/// Tokens are whitespace-terminated chunks of the text; each token's
/// log-probability is a fixed function of its bytes, so scoring a generated
/// text reproduces the generation log-probabilities exactly.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    rules: Vec<(String, String)>,
    fallback: Vec<String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn tokens(text: &str) -> Vec<&str> {
    text.split_inclusive(char::is_whitespace).collect()
}

fn token_logprob(tok: &str) -> f64 {
    -0.05 - (fnv1a(tok.as_bytes()) % 1000) as f64 / 1000.0
}

impl MockBackend {
    pub fn new(fallback: Vec<String>) -> Self {
        Self {
            rules: Vec::new(),
            fallback,
        }
    }

    /// Responds with `response` whenever the prompt contains `needle`.
    pub fn with_rule(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push((needle.into(), response.into()));
        self
    }

    fn lookup(&self, prompt: &str) -> Result<&str> {
        if let Some((_, r)) = self.rules.iter().find(|(k, _)| prompt.contains(k.as_str())) {
            return Ok(r);
        }
        if self.fallback.is_empty() {
            return Err(Error::Backend(
                "mock backend has no response for prompt".into(),
            ));
        }
        Ok(&self.fallback[(fnv1a(prompt.as_bytes()) % self.fallback.len() as u64) as usize])
    }
}

impl GenerativeBackend for MockBackend {
    fn generate(&self, prompt: &str, _temperature: f64, max_tokens: usize) -> Result<Generation> {
        let full = self.lookup(prompt)?;
        let toks: Vec<&str> = tokens(full).into_iter().take(max_tokens).collect();
        Ok(Generation {
            text: toks.concat(),
            token_logprobs: toks.iter().map(|t| token_logprob(t)).collect(),
        })
    }

    fn score(&self, _prompt: &str, text: &str) -> Result<Vec<f64>> {
        Ok(tokens(text).iter().map(|t| token_logprob(t)).collect())
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: usize,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prompt: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    token_logprobs: Vec<f64>,
}

/// Client for `POST /generate` and `POST /score`.
pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            base: base_url.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }

    fn post<T: serde::de::DeserializeOwned>(&self, path: &str, body: impl Serialize) -> Result<T> {
        let url = format!("{}{}", self.base, path);
        let resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::Backend(format!("{url}: {e}")))?;
        resp.into_json()
            .map_err(|e| Error::Backend(format!("{url}: malformed response: {e}")))
    }
}

impl GenerativeBackend for HttpBackend {
    fn generate(&self, prompt: &str, temperature: f64, max_tokens: usize) -> Result<Generation> {
        let g: Generation = self.post(
            "/generate",
            GenerateRequest {
                prompt,
                temperature,
                max_tokens,
            },
        )?;
        if g.token_logprobs.iter().any(|x| !x.is_finite() || *x > 0.0) {
            return Err(Error::Backend("invalid token log-probabilities".into()));
        }
        Ok(g)
    }

    fn score(&self, prompt: &str, text: &str) -> Result<Vec<f64>> {
        let s: ScoreResponse = self.post("/score", ScoreRequest { prompt, text })?;
        Ok(s.token_logprobs)
    }
}
