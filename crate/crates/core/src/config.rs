//! Run configuration and provider construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::analyzer::FitConfig;
use crate::data::CorpusFormat;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, MockEmbedder, OpenAiClient, RetryPolicy, ScriptedCompletion};
use crate::planner::{ModelParams, PlannerConfig, Preset};

pub const COMPLETIONS_SCRIPT: &str = "completions.json";
pub const EMBEDDER_SCRIPT: &str = "embedder.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub model: String,
    pub dim: usize,
    /// Cut longer provider vectors down to `dim` instead of failing.
    pub truncate: bool,
    pub batch_size: usize,
    pub parallelism: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            model: "text-embedding-3-large".into(),
            dim: 1024,
            truncate: false,
            batch_size: 64,
            parallelism: 4,
        }
    }
}

/// Contents of `embedder.json` in a mock script directory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEmbedderConfig {
    pub seed: u64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    /// Directory holding `completions.json` and optionally `embedder.json`.
    pub mock_dir: Option<PathBuf>,
    pub great: ModelParams,
    pub unorthodox: ModelParams,
    pub passage: ModelParams,
    pub embedding: EmbeddingConfig,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
    /// Persistent embedding cache file.
    pub cache_file: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            mode: ProviderMode::Live,
            mock_dir: None,
            great: ModelParams::great_default(),
            unorthodox: ModelParams::unorthodox_default(),
            passage: ModelParams::passage_default(),
            embedding: EmbeddingConfig::default(),
            retry: RetryPolicy::default(),
            timeout_secs: 120,
            cache_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub preset: Preset,
    /// Replaces the preset's problem definition.
    pub problem_definition: Option<String>,
    /// Replaces the preset's seed strategies.
    pub initial_strategies: Option<Vec<String>>,
    pub split_seed: u64,
    pub exploration_seed: u64,
    pub n_s: usize,
    pub k_passages: usize,
    pub epsilon: f64,
    pub max_iterations: usize,
    pub early_stop_patience: usize,
    pub k_top: usize,
    pub model: FitConfig,
    pub providers: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::new(),
            corpus_format: CorpusFormat::Rated,
            preset: Preset::Generic,
            problem_definition: None,
            initial_strategies: None,
            split_seed: 0,
            exploration_seed: 0,
            n_s: 5,
            k_passages: 5,
            epsilon: 0.1,
            max_iterations: 50,
            early_stop_patience: 5,
            k_top: 30,
            model: FitConfig::default(),
            providers: ProviderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Relative paths in the file are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    /// Prefix every relative path with `base`.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        self.providers.mock_dir.iter_mut().for_each(fix);
        self.providers.cache_file.iter_mut().for_each(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_s", self.n_s),
            ("k_passages", self.k_passages),
            ("max_iterations", self.max_iterations),
            ("early_stop_patience", self.early_stop_patience),
            ("k_top", self.k_top),
            ("model.max_iterations", self.model.max_iterations),
            ("providers.embedding.dim", self.providers.embedding.dim),
            (
                "providers.embedding.batch_size",
                self.providers.embedding.batch_size,
            ),
            (
                "providers.embedding.parallelism",
                self.providers.embedding.parallelism,
            ),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon {} outside (0, 1]",
                self.epsilon
            )));
        }
        if !(self.model.c > 0.0) {
            return Err(Error::Config(format!(
                "model.c {} must be positive",
                self.model.c
            )));
        }
        if self.providers.mode == ProviderMode::Mock && self.providers.mock_dir.is_none() {
            return Err(Error::Config(
                "mock providers need providers.mock_dir".into(),
            ));
        }
        let n_initial = self.initial_strategies().len();
        if n_initial > self.k_top {
            return Err(Error::Config(format!(
                "{n_initial} initial strategies exceed k_top {}",
                self.k_top
            )));
        }
        Ok(())
    }

    pub fn problem_definition(&self) -> String {
        self.problem_definition
            .clone()
            .unwrap_or_else(|| self.preset.problem_definition())
    }

    pub fn initial_strategies(&self) -> Vec<String> {
        match &self.initial_strategies {
            Some(list) => list.clone(),
            None => self
                .preset
                .initial_strategies()
                .into_iter()
                .map(str::to_owned)
                .collect(),
        }
    }

    pub fn planner_config(&self) -> Result<PlannerConfig> {
        let mut pc = PlannerConfig::new(self.problem_definition(), self.n_s)?;
        pc.great_params = self.providers.great.clone();
        pc.unorthodox_params = self.providers.unorthodox.clone();
        Ok(pc)
    }

    /// Embedding-only gateway, as needed for inference.
    pub fn embedding_gateway(&self) -> Result<Gateway> {
        self.gateway(false)
    }

    /// Gateway with both completion and embedding providers.
    pub fn training_gateway(&self) -> Result<Gateway> {
        self.gateway(true)
    }

    fn gateway(&self, with_completion: bool) -> Result<Gateway> {
        let p = &self.providers;
        let dim = p.embedding.dim;
        let mut gateway = match p.mode {
            ProviderMode::Mock => {
                let dir = p
                    .mock_dir
                    .as_deref()
                    .ok_or_else(|| Error::Config("no mock_dir".into()))?;
                let mock = load_mock_embedder(dir)?.unwrap_or(MockEmbedderConfig { seed: 0, dim });
                let mut g = Gateway::new(Arc::new(MockEmbedder::new(mock.seed, mock.dim)), dim);
                if with_completion {
                    g = g.with_completion(Arc::new(ScriptedCompletion::from_file(
                        &dir.join(COMPLETIONS_SCRIPT),
                    )?));
                }
                g
            }
            ProviderMode::Live => {
                let timeout = Duration::from_secs(p.timeout_secs);
                let client = Arc::new(OpenAiClient::from_env(
                    p.embedding.model.clone(),
                    Some(dim),
                    p.retry.clone(),
                    timeout,
                )?);
                let g = Gateway::new(client.clone(), dim);
                if with_completion {
                    g.with_completion(client)
                } else {
                    g
                }
            }
        };
        gateway = gateway
            .with_truncation(p.embedding.truncate)
            .with_batch_size(p.embedding.batch_size)
            .with_parallelism(p.embedding.parallelism);
        if let Some(cache) = &p.cache_file {
            gateway = gateway.with_cache_file(cache)?;
        }
        Ok(gateway)
    }
}

fn load_mock_embedder(dir: &Path) -> Result<Option<MockEmbedderConfig>> {
    let path = dir.join(EMBEDDER_SCRIPT);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_resolves_paths_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "corpus = \"data/c.jsonl\"\n[providers]\nmock_dir = \"/abs/mock\"\n",
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.corpus, dir.path().join("data/c.jsonl"));
        assert_eq!(
            c.providers.mock_dir.as_deref(),
            Some(Path::new("/abs/mock"))
        );
    }

    #[test]
    fn defaults_follow_reference_settings() {
        let c = RunConfig::default();
        assert_eq!(
            (c.n_s, c.k_passages, c.max_iterations, c.early_stop_patience),
            (5, 5, 50, 5)
        );
        assert_eq!(c.epsilon, 0.1);
        assert_eq!(c.model.c, 100.0);
        assert_eq!(c.providers.embedding.dim, 1024);
        assert_eq!(c.providers.great.temperature, 0.1);
        assert_eq!(c.providers.unorthodox.temperature, 0.7);
        assert_eq!(c.providers.passage.max_tokens, 1024);
    }

    #[test]
    fn toml_overrides_and_validation() {
        let c = RunConfig::from_toml(
            r#"
            corpus = "data/sgd.jsonl"
            preset = "sgd"
            k_top = 50
            [model]
            max_iterations = 700
            [providers]
            mode = "mock"
            mock_dir = "scripts"
            [providers.embedding]
            dim = 64
            "#,
        )
        .unwrap();
        assert_eq!(c.preset, Preset::Sgd);
        assert_eq!(
            (c.k_top, c.model.max_iterations, c.model.c),
            (50, 700, 100.0)
        );
        assert_eq!(c.providers.embedding.dim, 64);
        assert_eq!(c.initial_strategies().len(), 5);

        assert!(RunConfig::from_toml("epsilon = 0.0").is_err());
        assert!(RunConfig::from_toml("n_s = 0").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[providers]\nmode = \"mock\"").is_err());
        assert!(RunConfig::from_toml("k_top = 2\npreset = \"sgd\"").is_err());
    }

    #[test]
    fn json_snapshot_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
