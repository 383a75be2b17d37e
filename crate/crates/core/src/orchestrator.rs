//! Training loop and the completion-free inference paths.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyzer::{self, EvalReport, SatisfactionModel, SplitFeatures};
use crate::checkpoint::{
    CandidateRecord, Checkpoint, EmbeddingIdentity, IterationRecord, RunHistory, HISTORY_FORMAT,
};
use crate::config::RunConfig;
use crate::data::{
    load_corpus_report, split_dataset, DatasetSplit, LabeledUtterance, SatisfactionLabel,
};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::memory::{Strategy, StrategyId, StrategyMemory};
use crate::planner::{propose, select_planner, update_exploration, ExplorationState};
use crate::retriever::{
    build_feature_matrix, embed_corpus, passage_template, FeatureMatrix, PassageBank,
};

pub const REPORT_FORMAT: &str = "praise-report/v1";

/// Load the configured corpus and split it with the configured seed.
pub fn load_split(config: &RunConfig) -> Result<DatasetSplit> {
    let report = load_corpus_report(&config.corpus, config.corpus_format)?;
    if !report.rejects.is_empty() {
        log::warn!("{} malformed corpus records skipped", report.rejects.len());
    }
    if report.conversations.is_empty() {
        return Err(Error::EmptyCorpus(config.corpus.clone()));
    }
    split_dataset(&report.conversations, config.split_seed)
}

fn labels(utterances: &[LabeledUtterance]) -> Vec<SatisfactionLabel> {
    utterances.iter().map(|u| u.label).collect()
}

fn identity(gateway: &Gateway) -> EmbeddingIdentity {
    let (provider, model) = gateway.embedding_identity();
    EmbeddingIdentity {
        provider,
        model,
        dim: gateway.dim(),
    }
}

struct Snapshot {
    memory: StrategyMemory,
    bank: PassageBank,
    model: SatisfactionModel,
}

/// Train from the configured corpus. With `out_dir`, the best checkpoint so
/// far is kept on disk throughout the run.
pub fn train(config: &RunConfig, gateway: &Gateway, out_dir: Option<&Path>) -> Result<Checkpoint> {
    config.validate()?;
    let split = load_split(config)?;
    train_on_split(config, &split, gateway, out_dir)
}

pub fn train_on_split(
    config: &RunConfig,
    split: &DatasetSplit,
    gateway: &Gateway,
    out_dir: Option<&Path>,
) -> Result<Checkpoint> {
    config.validate()?;
    let planner_config = config.planner_config()?;
    let template = passage_template();
    let passage_params = &config.providers.passage;
    let y_train = labels(&split.train);
    let y_val = labels(&split.validation);
    let embedding = identity(gateway);

    let e_train = embed_corpus(gateway, &split.train)?.matrix;
    let e_val = embed_corpus(gateway, &split.validation)?.matrix;
    let features = |ids: &[StrategyId], bank: &PassageBank| -> Result<SplitFeatures> {
        Ok(SplitFeatures {
            train: build_feature_matrix(ids, bank, e_train.view())?,
            validation: build_feature_matrix(ids, bank, e_val.view())?,
        })
    };

    let mut memory = StrategyMemory::init(&config.initial_strategies(), config.k_top)?;
    let mut bank = PassageBank::new(config.k_passages, gateway.dim());
    for s in &mut memory.effective {
        bank.ensure(gateway, passage_params, &template, s)?;
    }
    let mut current = features(&memory.effective_ids(), &bank)?;
    let mut model = analyzer::fit(&current.train, &y_train, &config.model)?;
    let mut score = analyzer::evaluate(&model, &current.validation, &y_val)?.macro_f1;
    memory.set_importances(&analyzer::importance(&model));

    let mut exploration = ExplorationState::new(config.epsilon, config.exploration_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(exploration.rng_seed);
    let mut history = RunHistory::default();
    history.iterations.push(IterationRecord {
        format: HISTORY_FORMAT.into(),
        iteration: 0,
        planner: None,
        epsilon: exploration.epsilon_current,
        candidates: Vec::new(),
        accepted: memory.effective_ids(),
        rejected: Vec::new(),
        displaced: Vec::new(),
        effective: memory.effective_ids(),
        score_0: score,
        validation_macro_f1: score,
        best_validation_macro_f1: score,
        is_best: true,
    });
    let mut best_score = score;
    let mut best = Snapshot {
        memory: memory.clone(),
        bank: bank.clone(),
        model: model.clone(),
    };
    let checkpoint_of = |best: &Snapshot, history: &RunHistory| Checkpoint {
        config: config.clone(),
        embedding: embedding.clone(),
        memory: best.memory.clone(),
        bank: {
            let mut bank = best.bank.clone();
            bank.retain(&best.memory.effective_ids());
            bank
        },
        model: best.model.clone(),
        history: history.clone(),
    };
    if let Some(dir) = out_dir {
        checkpoint_of(&best, &history).save(dir)?;
    }
    log::info!("iteration 0: validation macro-F1 {score:.4}");

    let mut stale = 0;
    for iteration in 1..=config.max_iterations {
        let epsilon = exploration.epsilon_current;
        let kind = select_planner(&exploration, rng.gen::<f64>());
        let proposed = match propose(gateway, &planner_config, &memory, kind) {
            Ok(list) => list,
            Err(Error::PlannerParse(preview)) => {
                log::warn!("iteration {iteration}: no parseable strategies ({preview})");
                Vec::new()
            }
            Err(e) => return Err(e),
        };

        let mut candidates = Vec::new();
        let mut failed = Vec::new();
        for text in memory.dedupe_candidates(&proposed) {
            let mut s = Strategy::new(text, kind.origin(), iteration);
            match bank.ensure(gateway, passage_params, &template, &mut s) {
                Ok(()) => candidates.push(s),
                Err(e @ Error::NotEnoughPassages { .. }) => {
                    log::warn!("dropping {:?}: {e}", s.text);
                    failed.push(s);
                }
                Err(e) => return Err(e),
            }
        }
        let candidate_ids: Vec<StrategyId> = candidates.iter().map(|s| s.id.clone()).collect();
        let candidate_features = features(&candidate_ids, &bank)?;
        let outcome = analyzer::selective_feature_addition(
            &current,
            &candidate_features,
            &y_train,
            &y_val,
            &config.model,
        )?;

        let (accepted, mut rejected): (Vec<Strategy>, Vec<Strategy>) = candidates
            .iter()
            .cloned()
            .partition(|s| outcome.accepted.contains(&s.id));
        rejected.extend(failed.iter().cloned());

        let pool = current.hstack(&candidate_features)?;
        let importances = if accepted.is_empty() {
            analyzer::importance(&model)
        } else {
            let mut ids = memory.effective_ids();
            ids.extend(accepted.iter().map(|s| s.id.clone()));
            analyzer::importance(&analyzer::fit(
                &pool.select(&ids)?.train,
                &y_train,
                &config.model,
            )?)
        };
        let previous = memory.effective_ids();
        memory = memory.commit_outcome(&accepted, &rejected, &importances)?;
        let effective = memory.effective_ids();
        let displaced: Vec<StrategyId> = previous
            .into_iter()
            .filter(|id| !effective.contains(id))
            .collect();

        current = pool.select(&effective)?;
        model = analyzer::fit(&current.train, &y_train, &config.model)?;
        score = analyzer::evaluate(&model, &current.validation, &y_val)?.macro_f1;
        memory.set_importances(&analyzer::importance(&model));

        let improved = score > best_score;
        exploration = update_exploration(&exploration, improved);
        if improved {
            best_score = score;
            best = Snapshot {
                memory: memory.clone(),
                bank: bank.clone(),
                model: model.clone(),
            };
            stale = 0;
        } else {
            stale += 1;
        }
        history.iterations.push(IterationRecord {
            format: HISTORY_FORMAT.into(),
            iteration,
            planner: Some(kind),
            epsilon,
            candidates: candidates
                .iter()
                .chain(&failed)
                .map(|s| CandidateRecord {
                    id: s.id.clone(),
                    text: s.text.clone(),
                    passages: s.passages.clone().unwrap_or_default(),
                })
                .collect(),
            accepted: outcome.accepted.clone(),
            rejected: rejected.iter().map(|s| s.id.clone()).collect(),
            displaced,
            effective: memory.effective_ids(),
            score_0: outcome.score_0,
            validation_macro_f1: score,
            best_validation_macro_f1: best_score,
            is_best: improved,
        });
        log::info!(
            "iteration {iteration}: {kind:?}, {} candidates, {} accepted, |S+| {}, validation macro-F1 {score:.4} (best {best_score:.4})",
            candidates.len(),
            outcome.accepted.len(),
            memory.effective.len()
        );
        if let Some(dir) = out_dir {
            if improved {
                checkpoint_of(&best, &history).save(dir)?;
            } else {
                history.save(dir)?;
            }
        }
        if stale >= config.early_stop_patience {
            log::info!("stopping after {stale} iterations without improvement");
            break;
        }
    }

    let ckpt = checkpoint_of(&best, &history);
    if let Some(dir) = out_dir {
        ckpt.save(dir)?;
    }
    Ok(ckpt)
}

fn check_identity(ckpt: &Checkpoint, gateway: &Gateway) -> Result<()> {
    let got = identity(gateway);
    if got != ckpt.embedding {
        return Err(Error::Config(format!(
            "checkpoint was built with {}/{} (d={}), gateway provides {}/{} (d={})",
            ckpt.embedding.provider,
            ckpt.embedding.model,
            ckpt.embedding.dim,
            got.provider,
            got.model,
            got.dim
        )));
    }
    Ok(())
}

/// Feature rows for `texts` against the checkpoint's stored passages.
pub fn checkpoint_features<S: AsRef<str>>(
    ckpt: &Checkpoint,
    gateway: &Gateway,
    texts: &[S],
) -> Result<FeatureMatrix> {
    check_identity(ckpt, gateway)?;
    let embeddings = gateway.embed(texts)?;
    build_feature_matrix(&ckpt.model.feature_ids, &ckpt.bank, embeddings.view())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: SatisfactionLabel,
    pub probabilities: BTreeMap<SatisfactionLabel, f64>,
}

fn predictions(model: &SatisfactionModel, features: &FeatureMatrix) -> Result<Vec<Prediction>> {
    let proba = model.predict_proba(features.values.view())?;
    let labels = model.predict(features.values.view())?;
    Ok(labels
        .into_iter()
        .zip(proba.outer_iter())
        .map(|(label, p)| Prediction {
            label,
            probabilities: model
                .classes
                .iter()
                .copied()
                .zip(p.iter().copied())
                .collect(),
        })
        .collect())
}

/// Label each utterance using embeddings only.
pub fn infer<S: AsRef<str>>(
    ckpt: &Checkpoint,
    gateway: &Gateway,
    utterances: &[S],
) -> Result<Vec<Prediction>> {
    if utterances.is_empty() {
        return Ok(Vec::new());
    }
    predictions(
        &ckpt.model,
        &checkpoint_features(ckpt, gateway, utterances)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reason {
    pub strategy_id: StrategyId,
    pub strategy: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub utterance: String,
    pub prediction: Prediction,
    /// Highest relevance first.
    pub reasons: Vec<Reason>,
}

fn strategy_text(ckpt: &Checkpoint, id: &StrategyId) -> String {
    ckpt.memory
        .effective
        .iter()
        .find(|s| &s.id == id)
        .map(|s| s.text.clone())
        .unwrap_or_default()
}

/// Predicted label with the `top_n` most relevant strategies.
pub fn explain(
    ckpt: &Checkpoint,
    gateway: &Gateway,
    utterance: &str,
    top_n: usize,
) -> Result<Explanation> {
    let features = checkpoint_features(ckpt, gateway, &[utterance])?;
    let prediction = predictions(&ckpt.model, &features)?.remove(0);
    let mut reasons: Vec<Reason> = ckpt
        .model
        .feature_ids
        .iter()
        .zip(features.values.row(0).iter())
        .map(|(id, &score)| Reason {
            strategy_id: id.clone(),
            strategy: strategy_text(ckpt, id),
            score,
        })
        .collect();
    reasons.sort_by(|a, b| b.score.total_cmp(&a.score));
    reasons.truncate(top_n);
    Ok(Explanation {
        utterance: utterance.to_owned(),
        prediction,
        reasons,
    })
}

/// Five-number summary for a box plot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by linear interpolation between order statistics at `(n - 1) q`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Summary {
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy_id: StrategyId,
    pub strategy: String,
    pub label: SatisfactionLabel,
    pub count: usize,
    /// Absent when no utterance carries this label.
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub format: String,
    pub utterances: usize,
    pub rows: Vec<ReportRow>,
    pub evaluation: EvalReport,
}

/// Relevance distribution per strategy and gold label, plus the metrics on the
/// same utterances.
pub fn report(
    ckpt: &Checkpoint,
    gateway: &Gateway,
    utterances: &[LabeledUtterance],
) -> Result<DistributionReport> {
    let texts: Vec<&str> = utterances.iter().map(|u| u.text.as_str()).collect();
    let gold = labels(utterances);
    let features = checkpoint_features(ckpt, gateway, &texts)?;
    let mut rows = Vec::with_capacity(features.ncols() * SatisfactionLabel::CLASSES.len());
    for (j, id) in features.column_ids.iter().enumerate() {
        let column = features.values.column(j);
        for label in SatisfactionLabel::CLASSES {
            let values: Vec<f64> = column
                .iter()
                .zip(&gold)
                .filter(|(_, g)| **g == label)
                .map(|(v, _)| *v)
                .collect();
            rows.push(ReportRow {
                strategy_id: id.clone(),
                strategy: strategy_text(ckpt, id),
                label,
                count: values.len(),
                summary: summarize(&values),
            });
        }
    }
    Ok(DistributionReport {
        format: REPORT_FORMAT.into(),
        utterances: utterances.len(),
        rows,
        evaluation: analyzer::evaluate(&ckpt.model, &features, &gold)?,
    })
}

pub fn evaluate(
    ckpt: &Checkpoint,
    gateway: &Gateway,
    utterances: &[LabeledUtterance],
) -> Result<EvalReport> {
    let texts: Vec<&str> = utterances.iter().map(|u| u.text.as_str()).collect();
    let features = checkpoint_features(ckpt, gateway, &texts)?;
    analyzer::evaluate(&ckpt.model, &features, &labels(utterances))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate_linearly() {
        let s = summarize(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        let s = summarize(&[7.0]).unwrap();
        assert_eq!((s.min, s.q1, s.median, s.max), (7.0, 7.0, 7.0, 7.0));
        assert!(summarize(&[]).is_none());
    }
}
