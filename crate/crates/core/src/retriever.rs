//! Hypothetical-passage retrieval features.
//!
//! Each strategy is expanded into `k` short user messages that exemplify it.
//! The relevance of a strategy to an utterance is the sum over its passages of
//! the dot product between the (unit) passage and utterance embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledUtterance;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gateway::{vectors, Gateway};
use crate::memory::{Strategy, StrategyId};
use crate::planner::ModelParams;
use crate::template::Template;

pub const PASSAGE_TEMPLATE: &str = include_str!("../templates/passage_generator.txt");
pub const PASSAGE_PLACEHOLDERS: [&str; 2] = ["query", "passage_num"];
pub const PASSAGE_ATTEMPTS: usize = 3;
pub const PASSAGES_FORMAT: &str = "praise-passages/v1";

pub fn passage_template() -> Template {
    Template::parse(PASSAGE_TEMPLATE, &PASSAGE_PLACEHOLDERS)
        .expect("bundled passage template is valid")
}

fn strip_marker(line: &str) -> Option<&str> {
    for marker in ["-", "•", "*"] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest);
        }
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(r);
        }
    }
    None
}

/// Bulleted lines (`-`, `•`, `*`, `1.`, `1)`) with markers and wrapping
/// quotes removed. Lines shorter than two characters are dropped.
pub fn parse_passages(raw: &str) -> Vec<String> {
    raw.lines()
        .filter_map(|line| strip_marker(line.trim()))
        .map(|s| {
            let s = s.trim();
            let s = s
                .strip_prefix('"')
                .and_then(|x| x.strip_suffix('"'))
                .or_else(|| s.strip_prefix('“').and_then(|x| x.strip_suffix('”')))
                .unwrap_or(s);
            s.trim().to_owned()
        })
        .filter(|s| s.chars().count() >= 2)
        .collect()
}

/// Ask the passage model for exactly `k` messages matching `strategy_text`.
pub fn generate_passages(
    gateway: &Gateway,
    params: &ModelParams,
    template: &Template,
    strategy_text: &str,
    k: usize,
) -> Result<Vec<String>> {
    let prompt = template.render(&BTreeMap::from([
        ("query", strategy_text.to_owned()),
        ("passage_num", k.to_string()),
    ]))?;
    let mut passages: Vec<String> = Vec::with_capacity(k);
    for _ in 0..PASSAGE_ATTEMPTS {
        let raw = gateway.complete(&params.request(prompt.clone()))?;
        for p in parse_passages(&raw) {
            if passages.len() < k && !passages.contains(&p) {
                passages.push(p);
            }
        }
        if passages.len() == k {
            return Ok(passages);
        }
    }
    Err(Error::NotEnoughPassages {
        expected: k,
        got: passages.len(),
        attempts: PASSAGE_ATTEMPTS,
    })
}

/// Summed passage relevance for every utterance row.
pub fn relevance_feature(
    passages: ArrayView2<f32>,
    utterances: ArrayView2<f32>,
) -> Result<Array1<f64>> {
    relevance_feature_with(passages, utterances, Execution::default())
}

pub fn relevance_feature_with(
    passages: ArrayView2<f32>,
    utterances: ArrayView2<f32>,
    exec: Execution,
) -> Result<Array1<f64>> {
    if passages.ncols() != utterances.ncols() {
        return Err(Error::Dimension {
            expected: passages.ncols(),
            got: utterances.ncols(),
        });
    }
    let scores = exec.map_range(utterances.nrows(), |i| {
        let u = utterances.row(i);
        passages
            .rows()
            .into_iter()
            .map(|p| {
                p.iter()
                    .zip(u.iter())
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum::<f64>()
            })
            .sum::<f64>()
    });
    Ok(Array1::from(scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassageEntry {
    pub passages: Vec<String>,
    /// `k x d`, unit rows.
    pub embeddings: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassageBank {
    pub k: usize,
    pub dim: usize,
    entries: BTreeMap<StrategyId, PassageEntry>,
}

#[derive(Serialize, Deserialize)]
struct PassagesFile {
    format: String,
    k: usize,
    strategies: BTreeMap<StrategyId, Vec<String>>,
}

fn passage_key(id: &StrategyId, index: usize, text: &str) -> vectors::Key {
    let mut h = Sha256::new();
    h.update(id.as_str().as_bytes());
    h.update([0]);
    h.update((index as u64).to_le_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    h.finalize().into()
}

impl PassageBank {
    pub fn new(k: usize, dim: usize) -> Self {
        PassageBank {
            k,
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: &StrategyId) -> Option<&PassageEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &StrategyId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &StrategyId> {
        self.entries.keys()
    }

    pub fn insert(
        &mut self,
        id: StrategyId,
        passages: Vec<String>,
        embeddings: Array2<f32>,
    ) -> Result<()> {
        if passages.len() != self.k || embeddings.nrows() != self.k {
            return Err(Error::Shape(format!(
                "strategy {id}: {} passages, {} embedding rows, expected {}",
                passages.len(),
                embeddings.nrows(),
                self.k
            )));
        }
        if embeddings.ncols() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: embeddings.ncols(),
            });
        }
        self.entries.insert(
            id,
            PassageEntry {
                passages,
                embeddings,
            },
        );
        Ok(())
    }

    /// Generate and embed passages for `strategy` unless already banked.
    /// Passages are recorded on the strategy as well.
    pub fn ensure(
        &mut self,
        gateway: &Gateway,
        params: &ModelParams,
        template: &Template,
        strategy: &mut Strategy,
    ) -> Result<()> {
        if let Some(entry) = self.entries.get(&strategy.id) {
            strategy.passages = Some(entry.passages.clone());
            return Ok(());
        }
        let passages = match &strategy.passages {
            Some(p) if p.len() == self.k => p.clone(),
            _ => generate_passages(gateway, params, template, &strategy.text, self.k)?,
        };
        let embeddings = gateway.embed(&passages)?;
        strategy.passages = Some(passages.clone());
        self.insert(strategy.id.clone(), passages, embeddings)
    }

    /// Keep only the listed strategies.
    pub fn retain(&mut self, keep: &[StrategyId]) {
        self.entries.retain(|id, _| keep.contains(id));
    }

    pub fn save(&self, passages_path: &Path, embeddings_path: &Path) -> Result<()> {
        let file = PassagesFile {
            format: PASSAGES_FORMAT.into(),
            k: self.k,
            strategies: self
                .entries
                .iter()
                .map(|(id, e)| (id.clone(), e.passages.clone()))
                .collect(),
        };
        crate::checkpoint::write_atomic(
            passages_path,
            serde_json::to_string_pretty(&file)?.as_bytes(),
        )?;

        let rows: Vec<(vectors::Key, Vec<f32>)> = self
            .entries
            .iter()
            .flat_map(|(id, e)| {
                e.passages
                    .iter()
                    .enumerate()
                    .map(move |(i, p)| (passage_key(id, i, p), e.embeddings.row(i).to_vec()))
            })
            .collect();
        let refs: Vec<(vectors::Key, &[f32])> =
            rows.iter().map(|(k, v)| (*k, v.as_slice())).collect();
        crate::checkpoint::write_atomic(embeddings_path, &vectors::encode(self.dim, &refs)?)
    }

    pub fn load(passages_path: &Path, embeddings_path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(passages_path).map_err(|e| Error::io(passages_path, e))?;
        let file: PassagesFile = serde_json::from_str(&text)?;
        if file.format != PASSAGES_FORMAT {
            return Err(Error::checkpoint(
                passages_path,
                format!("unsupported format {}", file.format),
            ));
        }
        let (dim, records) = vectors::read_file(embeddings_path)?;
        let by_key: BTreeMap<_, _> = records.into_iter().collect();
        let mut bank = PassageBank::new(file.k, dim);
        for (id, passages) in file.strategies {
            let mut embeddings = Array2::<f32>::zeros((passages.len(), dim));
            for (i, p) in passages.iter().enumerate() {
                let v = by_key.get(&passage_key(&id, i, p)).ok_or_else(|| {
                    Error::checkpoint(
                        embeddings_path,
                        format!("no embedding for passage {i} of {id}"),
                    )
                })?;
                embeddings
                    .row_mut(i)
                    .iter_mut()
                    .zip(v)
                    .for_each(|(o, x)| *o = *x);
            }
            bank.insert(id, passages, embeddings)?;
        }
        Ok(bank)
    }
}

/// `m x n` relevance scores, one column per strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub column_ids: Vec<StrategyId>,
}

impl FeatureMatrix {
    pub fn empty(rows: usize) -> Self {
        FeatureMatrix {
            values: Array2::zeros((rows, 0)),
            column_ids: Vec::new(),
        }
    }

    pub fn from_columns(rows: usize, columns: Vec<(StrategyId, Array1<f64>)>) -> Result<Self> {
        let mut values = Array2::zeros((rows, columns.len()));
        let mut column_ids = Vec::with_capacity(columns.len());
        for (j, (id, col)) in columns.into_iter().enumerate() {
            if col.len() != rows {
                return Err(Error::Shape(format!(
                    "column {id} has {} rows, expected {rows}",
                    col.len()
                )));
            }
            values.column_mut(j).assign(&col);
            column_ids.push(id);
        }
        Ok(FeatureMatrix { values, column_ids })
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_index(&self, id: &StrategyId) -> Option<usize> {
        self.column_ids.iter().position(|c| c == id)
    }

    /// Columns in the order of `ids`.
    pub fn select(&self, ids: &[StrategyId]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.column_index(id)
                    .ok_or_else(|| Error::MissingPassages(id.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureMatrix {
            values: self.values.select(Axis(1), &idx),
            column_ids: ids.to_vec(),
        })
    }

    /// Append the columns of `other` (same rows).
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.nrows() != other.nrows() {
            return Err(Error::Shape(format!(
                "cannot join {} rows with {} rows",
                self.nrows(),
                other.nrows()
            )));
        }
        let values = ndarray::concatenate(Axis(1), &[self.values.view(), other.values.view()])
            .expect("row counts checked");
        let mut column_ids = self.column_ids.clone();
        column_ids.extend(other.column_ids.iter().cloned());
        Ok(FeatureMatrix { values, column_ids })
    }
}

/// One column per strategy, in the given order.
pub fn build_feature_matrix(
    strategies: &[StrategyId],
    bank: &PassageBank,
    utterances: ArrayView2<f32>,
) -> Result<FeatureMatrix> {
    build_feature_matrix_with(strategies, bank, utterances, Execution::default())
}

pub fn build_feature_matrix_with(
    strategies: &[StrategyId],
    bank: &PassageBank,
    utterances: ArrayView2<f32>,
    exec: Execution,
) -> Result<FeatureMatrix> {
    let entries: Vec<&PassageEntry> = strategies
        .iter()
        .map(|id| {
            bank.get(id)
                .ok_or_else(|| Error::MissingPassages(id.to_string()))
        })
        .collect::<Result<_>>()?;
    let columns = entries
        .iter()
        .zip(strategies)
        .map(|(e, id)| {
            Ok((
                id.clone(),
                relevance_feature_with(e.embeddings.view(), utterances, exec)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureMatrix::from_columns(utterances.nrows(), columns)
}

/// Unit embeddings of the utterance texts (context excluded), row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEmbeddings {
    pub matrix: Array2<f32>,
}

pub fn embed_corpus(
    gateway: &Gateway,
    utterances: &[LabeledUtterance],
) -> Result<UtteranceEmbeddings> {
    let texts: Vec<&str> = utterances.iter().map(|u| u.text.as_str()).collect();
    Ok(UtteranceEmbeddings {
        matrix: gateway.embed(&texts)?,
    })
}
