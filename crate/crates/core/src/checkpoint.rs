//! Checkpoint directory layout, run history and atomic file writes.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyzer::SatisfactionModel;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::memory::{StrategyId, StrategyMemory};
use crate::planner::PlannerKind;
use crate::retriever::PassageBank;

pub const CONFIG_FILE: &str = "config.snapshot.json";
pub const STRATEGIES_FILE: &str = "strategies.json";
pub const PASSAGES_FILE: &str = "passages.json";
pub const EMBEDDINGS_FILE: &str = "passage_embeddings.bin";
pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.jsonl";

pub const CONFIG_FORMAT: &str = "praise-config/v1";
pub const HISTORY_FORMAT: &str = "praise-history/v1";

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Which embedding provider produced the stored passage vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingIdentity {
    pub provider: String,
    pub model: String,
    pub dim: usize,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    format: String,
    embedding: EmbeddingIdentity,
    config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: StrategyId,
    pub text: String,
    /// Empty when passage generation failed.
    pub passages: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub format: String,
    pub iteration: usize,
    /// `None` for the initial fit.
    pub planner: Option<PlannerKind>,
    /// Exploration ratio in force when the planner was chosen.
    pub epsilon: f64,
    pub candidates: Vec<CandidateRecord>,
    pub accepted: Vec<StrategyId>,
    pub rejected: Vec<StrategyId>,
    /// Previously effective strategies pushed out by the cap.
    pub displaced: Vec<StrategyId>,
    pub effective: Vec<StrategyId>,
    pub score_0: f64,
    pub validation_macro_f1: f64,
    pub best_validation_macro_f1: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub iterations: Vec<IterationRecord>,
}

impl RunHistory {
    pub fn best_iteration(&self) -> Option<&IterationRecord> {
        self.iterations.iter().rev().find(|r| r.is_best)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.iterations {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut iterations = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: IterationRecord = serde_json::from_str(line)?;
            if r.format != HISTORY_FORMAT {
                return Err(Error::Config(format!(
                    "unsupported history format {}",
                    r.format
                )));
            }
            iterations.push(r);
        }
        Ok(RunHistory { iterations })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(HISTORY_FILE), self.to_jsonl()?.as_bytes())
    }
}

/// Everything inference needs besides an embedding provider.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub embedding: EmbeddingIdentity,
    pub memory: StrategyMemory,
    /// Passages and embeddings of the effective strategies.
    pub bank: PassageBank,
    pub model: SatisfactionModel,
    pub history: RunHistory,
}

impl Checkpoint {
    /// Check that model, memory and passage bank describe the same strategies.
    pub fn validate(&self) -> Result<()> {
        let effective: BTreeSet<_> = self.memory.effective.iter().map(|s| &s.id).collect();
        let columns: BTreeSet<_> = self.model.feature_ids.iter().collect();
        if effective != columns || self.model.feature_ids.len() != columns.len() {
            return Err(Error::Checkpoint {
                path: Default::default(),
                reason: "model columns differ from the effective strategies".into(),
            });
        }
        if let Some(id) = self
            .model
            .feature_ids
            .iter()
            .find(|id| !self.bank.contains(id))
        {
            return Err(Error::MissingPassages(id.to_string()));
        }
        if self.bank.dim != self.embedding.dim {
            return Err(Error::Dimension {
                expected: self.embedding.dim,
                got: self.bank.dim,
            });
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = ConfigFile {
            format: CONFIG_FORMAT.into(),
            embedding: self.embedding.clone(),
            config: self.config.clone(),
        };
        write_atomic(
            &dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(&config)?.as_bytes(),
        )?;
        write_atomic(
            &dir.join(STRATEGIES_FILE),
            self.memory.to_json()?.as_bytes(),
        )?;
        self.bank
            .save(&dir.join(PASSAGES_FILE), &dir.join(EMBEDDINGS_FILE))?;
        write_atomic(&dir.join(MODEL_FILE), self.model.to_json()?.as_bytes())?;
        self.history.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        for name in [
            CONFIG_FILE,
            STRATEGIES_FILE,
            PASSAGES_FILE,
            EMBEDDINGS_FILE,
            MODEL_FILE,
            HISTORY_FILE,
        ] {
            if !dir.join(name).is_file() {
                return Err(Error::checkpoint(dir, format!("missing {name}")));
            }
        }
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: ConfigFile = serde_json::from_str(&text)?;
        if config.format != CONFIG_FORMAT {
            return Err(Error::checkpoint(
                &path,
                format!("unsupported format {}", config.format),
            ));
        }
        let path = dir.join(HISTORY_FILE);
        let history = RunHistory::from_jsonl(
            &std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?,
        )?;
        let ckpt = Checkpoint {
            config: config.config,
            embedding: config.embedding,
            memory: StrategyMemory::load(&dir.join(STRATEGIES_FILE))?,
            bank: PassageBank::load(&dir.join(PASSAGES_FILE), &dir.join(EMBEDDINGS_FILE))?,
            model: SatisfactionModel::load(&dir.join(MODEL_FILE))?,
            history,
        };
        ckpt.validate()
            .map_err(|e| Error::checkpoint(dir, e.to_string()))?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = std::fs::read_dir(p.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn history_round_trips_and_finds_best() {
        let rec = |iteration, is_best| IterationRecord {
            format: HISTORY_FORMAT.into(),
            iteration,
            planner: Some(PlannerKind::Great),
            epsilon: 0.1,
            candidates: vec![],
            accepted: vec![],
            rejected: vec![],
            displaced: vec![],
            effective: vec![],
            score_0: 0.5,
            validation_macro_f1: 0.5,
            best_validation_macro_f1: 0.5,
            is_best,
        };
        let h = RunHistory {
            iterations: vec![rec(0, true), rec(1, true), rec(2, false)],
        };
        let back = RunHistory::from_jsonl(&h.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.best_iteration().unwrap().iteration, 1);
    }

    #[test]
    fn load_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains(CONFIG_FILE), "{err}");
    }
}
