//! Effective and ineffective strategy sets with provenance and importances.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STRATEGIES_FORMAT: &str = "praise-strategies/v1";

/// Content-derived strategy identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrategyId(pub String);

impl StrategyId {
    pub fn for_text(text: &str) -> Self {
        let digest = Sha256::digest(normalize(text).as_bytes());
        StrategyId(hex::encode(&digest[..8]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercase, collapse whitespace, strip terminal punctuation.
pub fn normalize(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Initial,
    Great,
    Unorthodox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub id: StrategyId,
    pub text: String,
    pub origin: Origin,
    pub created_at_iteration: usize,
    #[serde(default)]
    pub passages: Option<Vec<String>>,
    #[serde(default)]
    pub importance: Option<f64>,
}

impl Strategy {
    pub fn new(text: impl Into<String>, origin: Origin, iteration: usize) -> Self {
        let text = text.into().trim().to_owned();
        let strategy = Strategy {
            id: StrategyId::for_text(&text),
            text,
            origin,
            created_at_iteration: iteration,
            passages: None,
            importance: None,
        };
        if origin != Origin::Initial && !strategy.looks_well_formed() {
            log::warn!(
                "strategy {:?} does not read as \"User <verb> <object>\"",
                strategy.text
            );
        }
        strategy
    }

    /// Loose check for the "User <verb> <object>" shape planners are asked for.
    pub fn looks_well_formed(&self) -> bool {
        let norm = normalize(&self.text);
        let mut words = norm.split(' ');
        let first = match words.next() {
            Some("the") => words.next(),
            other => other,
        };
        first == Some("user") && words.count() >= 2
    }
}

/// Total order for ranking: importance descending, then creation iteration,
/// then id. Missing importance ranks last.
fn rank(a: &Strategy, b: &Strategy) -> Ordering {
    let ia = a.importance.unwrap_or(f64::NEG_INFINITY);
    let ib = b.importance.unwrap_or(f64::NEG_INFINITY);
    ib.total_cmp(&ia)
        .then(a.created_at_iteration.cmp(&b.created_at_iteration))
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMemory {
    pub effective: Vec<Strategy>,
    pub ineffective: Vec<Strategy>,
    pub cap: usize,
}

#[derive(Serialize, Deserialize)]
struct StrategiesFile {
    format: String,
    #[serde(flatten)]
    memory: StrategyMemory,
}

impl StrategyMemory {
    /// Seed the effective set with human-written strategies.
    pub fn init(initial: &[impl AsRef<str>], cap: usize) -> Result<Self> {
        if initial.is_empty() {
            return Err(Error::InvalidStrategies("no initial strategies".into()));
        }
        if initial.len() > cap {
            return Err(Error::InvalidStrategies(format!(
                "{} initial strategies exceed the cap of {cap}",
                initial.len()
            )));
        }
        let mut seen = BTreeSet::new();
        let mut effective = Vec::with_capacity(initial.len());
        for text in initial {
            let text = text.as_ref();
            if text.trim().is_empty() {
                return Err(Error::InvalidStrategies("empty initial strategy".into()));
            }
            let s = Strategy::new(text, Origin::Initial, 0);
            if !seen.insert(s.id.clone()) {
                return Err(Error::InvalidStrategies(format!(
                    "duplicate initial strategy {text:?}"
                )));
            }
            effective.push(s);
        }
        Ok(StrategyMemory {
            effective,
            ineffective: Vec::new(),
            cap,
        })
    }

    pub fn contains(&self, id: &StrategyId) -> bool {
        self.all().any(|s| &s.id == id)
    }

    pub fn all(&self) -> impl Iterator<Item = &Strategy> {
        self.effective.iter().chain(&self.ineffective)
    }

    pub fn effective_ids(&self) -> Vec<StrategyId> {
        self.effective.iter().map(|s| s.id.clone()).collect()
    }

    /// Drop candidates already known to memory or repeated earlier in the list.
    pub fn dedupe_candidates(&self, candidates: &[String]) -> Vec<String> {
        let mut seen: BTreeSet<String> = self.all().map(|s| normalize(&s.text)).collect();
        candidates
            .iter()
            .filter(|c| {
                let n = normalize(c);
                !n.is_empty() && seen.insert(n)
            })
            .cloned()
            .collect()
    }

    /// Fold one round of selection results into the memory.
    ///
    /// `rejected` join the ineffective set. The effective set becomes the top
    /// `cap` of effective plus `accepted` ranked by `importances`; whatever
    /// falls off the end moves to the ineffective set.
    pub fn commit_outcome(
        &self,
        accepted: &[Strategy],
        rejected: &[Strategy],
        importances: &BTreeMap<StrategyId, f64>,
    ) -> Result<StrategyMemory> {
        let accepted_ids: BTreeSet<_> = accepted.iter().map(|s| &s.id).collect();
        if let Some(dup) = rejected.iter().find(|s| accepted_ids.contains(&s.id)) {
            return Err(Error::InvalidStrategies(format!(
                "strategy {} is both accepted and rejected",
                dup.id
            )));
        }

        let mut pool: Vec<Strategy> = Vec::with_capacity(self.effective.len() + accepted.len());
        for s in self.effective.iter().chain(accepted) {
            if pool.iter().any(|p| p.id == s.id) {
                continue;
            }
            let imp = importances
                .get(&s.id)
                .copied()
                .ok_or_else(|| Error::MissingImportance(s.id.to_string()))?;
            let mut s = s.clone();
            s.importance = Some(imp);
            pool.push(s);
        }
        pool.sort_by(rank);
        let displaced = if pool.len() > self.cap {
            pool.split_off(self.cap)
        } else {
            Vec::new()
        };

        let kept: BTreeSet<_> = pool.iter().map(|s| s.id.clone()).collect();
        let mut ineffective: Vec<Strategy> = self
            .ineffective
            .iter()
            .filter(|s| !kept.contains(&s.id))
            .cloned()
            .collect();
        for s in rejected.iter().chain(&displaced) {
            if !ineffective.iter().any(|x| x.id == s.id) {
                ineffective.push(s.clone());
            }
        }
        Ok(StrategyMemory {
            effective: pool,
            ineffective,
            cap: self.cap,
        })
    }

    /// Refresh importances of the effective set and restore ranking order.
    pub fn set_importances(&mut self, importances: &BTreeMap<StrategyId, f64>) {
        for s in &mut self.effective {
            if let Some(&imp) = importances.get(&s.id) {
                s.importance = Some(imp);
            }
        }
        self.effective.sort_by(rank);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&StrategiesFile {
            format: STRATEGIES_FORMAT.into(),
            memory: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: StrategiesFile = serde_json::from_str(s)?;
        if file.format != STRATEGIES_FORMAT {
            return Err(Error::Config(format!(
                "unsupported strategies format {}",
                file.format
            )));
        }
        Ok(file.memory)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
