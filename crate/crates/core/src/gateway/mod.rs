//! Access to text-completion and text-embedding providers.
//!
//! [`Gateway`] is the only type in the crate that talks to providers. It
//! counts calls, L2-normalizes every embedding it hands out, and caches
//! embeddings by (provider, model, text), optionally persisted to disk.

pub mod mock;
pub mod openai;
pub mod vectors;

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub use mock::{deterministic_mock_embed, MockEmbedder, ScriptedCompletion};
pub use openai::{OpenAiClient, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub system_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

pub trait CompletionProvider: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, req: &CompletionRequest) -> Result<String>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    /// Model identity used in cache keys.
    fn model(&self) -> String;
    /// Raw vectors in input order; the gateway normalizes them.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

#[derive(Debug, Default)]
pub struct ProviderStats {
    completion_calls: AtomicU64,
    embedding_calls: AtomicU64,
    embedded_texts: AtomicU64,
    cache_hits: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub completion_calls: u64,
    /// Provider requests (batches), not texts.
    pub embedding_calls: u64,
    pub embedded_texts: u64,
    pub cache_hits: u64,
}

impl ProviderStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            completion_calls: self.completion_calls.load(Ordering::Relaxed),
            embedding_calls: self.embedding_calls.load(Ordering::Relaxed),
            embedded_texts: self.embedded_texts.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }
}

/// Normalize to unit L2 norm in place; zero or non-finite vectors become e1.
pub fn normalize_unit(v: &mut [f32]) {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
    }
}

struct EmbeddingCache {
    entries: RwLock<HashMap<vectors::Key, Arc<[f32]>>>,
    file: Option<Mutex<vectors::Appender>>,
}

pub struct Gateway {
    completion: Option<Arc<dyn CompletionProvider>>,
    embedder: Arc<dyn EmbeddingProvider>,
    dim: usize,
    truncate: bool,
    batch_size: usize,
    parallelism: usize,
    cache: EmbeddingCache,
    stats: ProviderStats,
}

impl Gateway {
    pub fn new(embedder: Arc<dyn EmbeddingProvider>, dim: usize) -> Self {
        Gateway {
            completion: None,
            embedder,
            dim,
            truncate: false,
            batch_size: 64,
            parallelism: 4,
            cache: EmbeddingCache {
                entries: RwLock::new(HashMap::new()),
                file: None,
            },
            stats: ProviderStats::default(),
        }
    }

    pub fn with_completion(mut self, provider: Arc<dyn CompletionProvider>) -> Self {
        self.completion = Some(provider);
        self
    }

    /// Allow provider vectors longer than `dim`; they are cut then renormalized.
    pub fn with_truncation(mut self, truncate: bool) -> Self {
        self.truncate = truncate;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Maximum concurrent embedding requests.
    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    /// Back the cache with an append-only file, loading what it already holds.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self> {
        let (appender, existing) = vectors::Appender::open(path, self.dim)?;
        {
            let mut entries = self.cache.entries.write().unwrap();
            for (key, v) in existing {
                entries.insert(key, v.into());
            }
        }
        self.cache.file = Some(Mutex::new(appender));
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding_identity(&self) -> (String, String) {
        (self.embedder.id().to_owned(), self.embedder.model())
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    pub fn has_completion(&self) -> bool {
        self.completion.is_some()
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<String> {
        let provider = self
            .completion
            .as_ref()
            .ok_or_else(|| Error::Config("no completion provider configured".into()))?;
        self.stats.completion_calls.fetch_add(1, Ordering::Relaxed);
        provider.complete(req)
    }

    fn cache_key(&self, text: &str) -> vectors::Key {
        let mut h = Sha256::new();
        h.update(self.embedder.id().as_bytes());
        h.update([0]);
        h.update(self.embedder.model().as_bytes());
        h.update([0]);
        h.update(text.as_bytes());
        h.finalize().into()
    }

    fn post_process(&self, mut v: Vec<f32>) -> Result<Vec<f32>> {
        if v.len() > self.dim && self.truncate {
            v.truncate(self.dim);
        }
        if v.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        normalize_unit(&mut v);
        Ok(v)
    }

    /// Embed `texts` into a `texts.len() x dim` matrix of unit rows.
    pub fn embed<S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<f32>> {
        let keys: Vec<vectors::Key> = texts.iter().map(|t| self.cache_key(t.as_ref())).collect();

        let mut missing: Vec<(vectors::Key, String)> = Vec::new();
        {
            let entries = self.cache.entries.read().unwrap();
            let mut queued = std::collections::HashSet::new();
            for (key, text) in keys.iter().zip(texts) {
                if entries.contains_key(key) {
                    self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                } else if queued.insert(*key) {
                    missing.push((*key, text.as_ref().to_owned()));
                }
            }
        }

        if !missing.is_empty() {
            let chunks: Vec<&[(vectors::Key, String)]> = missing.chunks(self.batch_size).collect();
            let fetch = |chunk: &&[(vectors::Key, String)]| -> Result<Vec<Vec<f32>>> {
                let batch: Vec<String> = chunk.iter().map(|(_, t)| t.clone()).collect();
                self.stats.embedding_calls.fetch_add(1, Ordering::Relaxed);
                self.stats
                    .embedded_texts
                    .fetch_add(batch.len() as u64, Ordering::Relaxed);
                let raw = self.embedder.embed_batch(&batch)?;
                if raw.len() != batch.len() {
                    return Err(Error::Provider(format!(
                        "embedder returned {} vectors for {} texts",
                        raw.len(),
                        batch.len()
                    )));
                }
                raw.into_iter().map(|v| self.post_process(v)).collect()
            };
            // bounded fan-out: at most `parallelism` requests in flight
            let mut fetched = Vec::with_capacity(chunks.len());
            for wave in chunks.chunks(self.parallelism) {
                let exec = if wave.len() > 1 {
                    Execution::default()
                } else {
                    Execution::Sequential
                };
                fetched.extend(exec.map(wave, fetch));
            }

            let mut entries = self.cache.entries.write().unwrap();
            let mut file = self.cache.file.as_ref().map(|f| f.lock().unwrap());
            for (chunk, result) in chunks.iter().zip(fetched) {
                for ((key, _), v) in chunk.iter().zip(result?) {
                    if let Some(f) = file.as_mut() {
                        f.append(key, &v)?;
                    }
                    entries.insert(*key, v.into());
                }
            }
        }

        let entries = self.cache.entries.read().unwrap();
        let mut out = Array2::<f32>::zeros((texts.len(), self.dim));
        for (i, key) in keys.iter().enumerate() {
            let v = &entries[key];
            out.row_mut(i)
                .iter_mut()
                .zip(v.iter())
                .for_each(|(o, x)| *o = *x);
        }
        Ok(out)
    }
}
