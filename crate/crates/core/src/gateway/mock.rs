//! Offline providers: a scripted completion model and a hash-seeded embedder.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CompletionProvider, CompletionRequest, EmbeddingProvider};
use crate::error::{Error, Result};

/// Channel used when no channel matches the request's model name.
pub const ANY_MODEL: &str = "*";

/// Replies for one model name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelScript {
    /// Consumed in order, one per call.
    #[serde(default)]
    pub replies: Vec<String>,
    /// Reusable replies chosen when the prompt contains the key. The longest
    /// matching key wins and takes precedence over `replies`.
    #[serde(default)]
    pub keyed: BTreeMap<String, String>,
}

/// Script file contents: model name (or `"*"`) to channel.
pub type CompletionScript = BTreeMap<String, ChannelScript>;

struct Channel {
    queue: VecDeque<String>,
    keyed: Vec<(String, String)>,
}

/// Completion provider that answers from a fixed script.
pub struct ScriptedCompletion {
    channels: Mutex<BTreeMap<String, Channel>>,
    received: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedCompletion {
    pub fn new(script: CompletionScript) -> Self {
        let channels = script
            .into_iter()
            .map(|(model, ch)| {
                let mut keyed: Vec<_> = ch.keyed.into_iter().collect();
                keyed.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
                (
                    model,
                    Channel {
                        queue: ch.replies.into(),
                        keyed,
                    },
                )
            })
            .collect();
        ScriptedCompletion {
            channels: Mutex::new(channels),
            received: Mutex::new(Vec::new()),
        }
    }

    /// A single channel answering every model in order.
    pub fn sequence<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(BTreeMap::from([(
            ANY_MODEL.to_owned(),
            ChannelScript {
                replies: replies.into_iter().map(Into::into).collect(),
                keyed: BTreeMap::new(),
            },
        )]))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(serde_json::from_str(&text)?))
    }

    /// Every request seen so far, in arrival order.
    pub fn received(&self) -> Vec<CompletionRequest> {
        self.received.lock().unwrap().clone()
    }

    pub fn remaining(&self) -> usize {
        self.channels
            .lock()
            .unwrap()
            .values()
            .map(|c| c.queue.len())
            .sum()
    }
}

impl CompletionProvider for ScriptedCompletion {
    fn id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, req: &CompletionRequest) -> Result<String> {
        self.received.lock().unwrap().push(req.clone());
        let mut channels = self.channels.lock().unwrap();
        let key = if channels.contains_key(&req.model) {
            req.model.as_str()
        } else {
            ANY_MODEL
        };
        let channel = channels
            .get_mut(key)
            .ok_or_else(|| Error::ScriptExhausted(req.model.clone()))?;
        if let Some((_, reply)) = channel
            .keyed
            .iter()
            .find(|(k, _)| req.system_prompt.contains(k.as_str()))
        {
            return Ok(reply.clone());
        }
        channel
            .queue
            .pop_front()
            .ok_or_else(|| Error::ScriptExhausted(req.model.clone()))
    }
}

/// Lowercase alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Bag-of-words embedding: each token draws a Gaussian vector from a generator
/// seeded by its hash and `seed`; the sum is L2-normalized. Texts without
/// tokens map to the first basis vector.
pub fn deterministic_mock_embed(text: &str, seed: u64, d: usize) -> Vec<f32> {
    assert!(d >= 2, "mock embedding dimension must be at least 2");
    let mut acc = vec![0.0f64; d];
    let tokens = tokenize(text);
    for token in &tokens {
        let token_seed = splitmix64(fnv1a64(token.as_bytes()) ^ splitmix64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(token_seed);
        for slot in acc.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *slot += g;
        }
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tokens.is_empty() || norm == 0.0 {
        let mut e = vec![0.0f32; d];
        e[0] = 1.0;
        return e;
    }
    acc.iter().map(|v| (v / norm) as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl MockEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        MockEmbedder { seed, dim }
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn id(&self) -> &str {
        "mock"
    }

    fn model(&self) -> String {
        format!("bag-of-words-s{}-d{}", self.seed, self.dim)
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts
            .iter()
            .map(|t| deterministic_mock_embed(t, self.seed, self.dim))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn req(model: &str, prompt: &str) -> CompletionRequest {
        CompletionRequest {
            model: model.into(),
            system_prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 16,
        }
    }

    #[test]
    fn canned_reply_verbatim_then_exhausted() {
        let mock = ScriptedCompletion::sequence(["  exact reply\n"]);
        assert_eq!(mock.complete(&req("m", "p")).unwrap(), "  exact reply\n");
        assert!(matches!(
            mock.complete(&req("m", "p")),
            Err(Error::ScriptExhausted(_))
        ));
    }

    #[test]
    fn keyed_replies_match_longest_key() {
        let script = BTreeMap::from([(
            "passages".to_string(),
            ChannelScript {
                replies: vec![],
                keyed: BTreeMap::from([
                    ("User thanks".to_string(), "short".to_string()),
                    ("User thanks the driver".to_string(), "long".to_string()),
                ]),
            },
        )]);
        let mock = ScriptedCompletion::new(script);
        assert_eq!(
            mock.complete(&req("passages", "[query]\nUser thanks the driver"))
                .unwrap(),
            "long"
        );
        assert_eq!(
            mock.complete(&req("passages", "[query]\nUser thanks me"))
                .unwrap(),
            "short"
        );
        assert_eq!(
            mock.complete(&req("passages", "User thanks")).unwrap(),
            "short"
        );
        assert!(mock.complete(&req("other", "x")).is_err());
        assert_eq!(mock.received().len(), 4);
    }

    #[test]
    fn mock_embed_properties() {
        let a = deterministic_mock_embed("thank you", 3, 32);
        assert_eq!(a, deterministic_mock_embed("thank you", 3, 32));
        assert_eq!(a, deterministic_mock_embed("Thank you!", 3, 32));
        assert_ne!(a, deterministic_mock_embed("thank you", 4, 32));
        let norm: f64 = a.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);

        let mut e = vec![0.0f32; 8];
        e[0] = 1.0;
        assert_eq!(deterministic_mock_embed("", 0, 8), e);
        assert_eq!(deterministic_mock_embed("?!", 0, 8), e);
    }

    #[test]
    fn distinct_words_give_distinct_vectors() {
        let words = [
            "apple", "river", "train", "hotel", "ticket", "music", "rain", "bank", "movie", "taxi",
            "garden", "window", "coffee", "paper", "stone", "cloud", "engine", "forest", "pencil",
            "lamp",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pair: Vec<_> = words.choose_multiple(&mut rng, 2).collect();
            let a = deterministic_mock_embed(pair[0], 1, 64);
            let b = deterministic_mock_embed(pair[1], 1, 64);
            let cos: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| f64::from(*x) * f64::from(*y))
                .sum();
            assert!(cos < 0.999, "{pair:?} -> {cos}");
        }
    }
}
