//! OpenAI-compatible chat-completions and embeddings client.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{CompletionProvider, CompletionRequest, EmbeddingProvider};
use crate::error::{Error, Result};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
pub const API_KEY_VARS: [&str; 2] = ["PRAISE_API_KEY", "OPENAI_API_KEY"];
pub const BASE_URL_VARS: [&str; 2] = ["PRAISE_BASE_URL", "OPENAI_BASE_URL"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    /// Upper bound of the random extra delay, as a fraction of the backoff.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1000,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// Delay after the `n`-th failed attempt (0-based): base * 2^n plus jitter.
    pub fn backoff(&self, n: usize) -> Duration {
        let base = self.base_delay_ms as f64 * 2f64.powi(n as i32);
        let extra = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(0.0..self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64(base * (1.0 + extra) / 1000.0)
    }
}

enum Failure {
    Transient(String),
    Fatal(Error),
}

pub struct OpenAiClient {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
    embedding_model: String,
    dimensions: Option<usize>,
    retry: RetryPolicy,
    attempts: AtomicU64,
}

impl OpenAiClient {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        embedding_model: impl Into<String>,
        dimensions: Option<usize>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(OpenAiClient {
            http,
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key: api_key.into(),
            embedding_model: embedding_model.into(),
            dimensions,
            retry,
            attempts: AtomicU64::new(0),
        })
    }

    /// Build from `PRAISE_API_KEY`/`OPENAI_API_KEY` and `PRAISE_BASE_URL`/`OPENAI_BASE_URL`.
    pub fn from_env(
        embedding_model: impl Into<String>,
        dimensions: Option<usize>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self> {
        let first = |vars: &[&str]| {
            vars.iter()
                .find_map(|v| std::env::var(v).ok().filter(|s| !s.is_empty()))
        };
        let key = first(&API_KEY_VARS)
            .ok_or_else(|| Error::Config(format!("set {} for live providers", API_KEY_VARS[0])))?;
        let base = first(&BASE_URL_VARS).unwrap_or_else(|| DEFAULT_BASE_URL.to_owned());
        Self::new(base, key, embedding_model, dimensions, retry, timeout)
    }

    /// Total HTTP attempts made, including retries.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<serde_json::Value> {
        let url = format!("{}/{}", self.base_url, path);
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.backoff(attempt - 1));
            }
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.try_post(&url, body) {
                Ok(v) => {
                    log::debug!("POST {url} succeeded on attempt {}", attempt + 1);
                    return Ok(v);
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    log::warn!("POST {url} attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::RetriesExhausted {
            attempts: self.retry.max_attempts,
            last,
        })
    }

    fn try_post(
        &self,
        url: &str,
        body: &serde_json::Value,
    ) -> std::result::Result<serde_json::Value, Failure> {
        let resp = self
            .http
            .post(url)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() || e.is_connect() || e.is_request() {
                    Failure::Transient(e.to_string())
                } else {
                    Failure::Fatal(Error::Provider(e.to_string()))
                }
            })?;
        let status = resp.status();
        if status.is_success() {
            return resp
                .json()
                .map_err(|e| Failure::Fatal(Error::Provider(format!("bad response body: {e}"))));
        }
        let code = status.as_u16();
        let text = resp.text().unwrap_or_default();
        match code {
            401 | 403 => Err(Failure::Fatal(Error::Auth(code))),
            429 | 500..=599 => Err(Failure::Transient(format!("status {code}: {text}"))),
            _ => Err(Failure::Fatal(Error::Provider(format!(
                "status {code}: {text}"
            )))),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f32>,
}

impl CompletionProvider for OpenAiClient {
    fn id(&self) -> &str {
        "openai-compatible"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        let body = json!({
            "model": req.model,
            "messages": [{"role": "system", "content": req.system_prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let value = self.post("chat/completions", &body)?;
        let resp: ChatResponse = serde_json::from_value(value)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Provider("completion response without content".into()))
    }
}

impl EmbeddingProvider for OpenAiClient {
    fn id(&self) -> &str {
        "openai-compatible"
    }

    fn model(&self) -> String {
        match self.dimensions {
            Some(d) => format!("{}@{d}", self.embedding_model),
            None => self.embedding_model.clone(),
        }
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut body = json!({"model": self.embedding_model, "input": texts});
        if let Some(d) = self.dimensions {
            body["dimensions"] = json!(d);
        }
        let value = self.post("embeddings", &body)?;
        let mut resp: EmbeddingResponse = serde_json::from_value(value)?;
        if resp.data.len() != texts.len() {
            return Err(Error::Provider(format!(
                "asked for {} embeddings, received {}",
                texts.len(),
                resp.data.len()
            )));
        }
        resp.data.sort_by_key(|d| d.index);
        Ok(resp.data.into_iter().map(|d| d.embedding).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serve one canned (status, body) response per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line.trim().to_owned();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(format!("{auth}\n{}", String::from_utf8(buf).unwrap()));
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn client(base: &str) -> OpenAiClient {
        let retry = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1,
            jitter: 0.0,
        };
        OpenAiClient::new(
            base,
            "sk-test",
            "text-embedding-3-large",
            Some(3),
            retry,
            Duration::from_secs(5),
        )
        .unwrap()
    }

    fn chat_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn req() -> CompletionRequest {
        CompletionRequest {
            model: "gpt-4-1106-preview".into(),
            system_prompt: "hello".into(),
            temperature: 0.1,
            max_tokens: 512,
        }
    }

    #[test]
    fn retries_on_429_then_succeeds() {
        let (base, server) = serve(vec![
            (429, "{}".into()),
            (429, "{}".into()),
            (200, chat_body("ok!")),
        ]);
        let c = client(&base);
        assert_eq!(c.complete(&req()).unwrap(), "ok!");
        assert_eq!(c.attempts(), 3);
        let bodies = server.join().unwrap();
        assert!(
            bodies[2].starts_with("authorization: Bearer sk-test"),
            "{}",
            bodies[2]
        );
        let sent: serde_json::Value =
            serde_json::from_str(bodies[2].lines().nth(1).unwrap()).unwrap();
        assert_eq!(sent["temperature"], json!(0.1));
        assert_eq!(sent["messages"][0]["role"], json!("system"));
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let (base, server) = serve(vec![(401, "{}".into())]);
        let c = client(&base);
        assert!(matches!(c.complete(&req()), Err(Error::Auth(401))));
        assert_eq!(c.attempts(), 1);
        server.join().unwrap();
    }

    #[test]
    fn exhausts_after_five_server_errors() {
        let (base, server) = serve(vec![(503, "{}".into()); 5]);
        let c = client(&base);
        assert!(matches!(
            c.complete(&req()),
            Err(Error::RetriesExhausted { attempts: 5, .. })
        ));
        server.join().unwrap();
    }

    #[test]
    fn embeddings_are_reordered_by_index() {
        let body = json!({"data": [
            {"index": 1, "embedding": [0.0, 1.0, 0.0]},
            {"index": 0, "embedding": [1.0, 0.0, 0.0]}
        ]})
        .to_string();
        let (base, server) = serve(vec![(200, body)]);
        let c = client(&base);
        let out = c.embed_batch(&["a".into(), "b".into()]).unwrap();
        assert_eq!(out, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let bodies = server.join().unwrap();
        let sent: serde_json::Value =
            serde_json::from_str(bodies[0].lines().nth(1).unwrap()).unwrap();
        assert_eq!(sent["dimensions"], json!(3));
        assert_eq!(sent["input"], json!(["a", "b"]));
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1000,
            jitter: 0.0,
        };
        assert_eq!(p.backoff(0), Duration::from_secs(1));
        assert_eq!(p.backoff(3), Duration::from_secs(8));
        let j = RetryPolicy::default().backoff(1);
        assert!(j >= Duration::from_secs(2) && j < Duration::from_millis(2500));
    }
}
