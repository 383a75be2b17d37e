//! Synthetic rated corpus and matching provider scripts for offline runs.
//!
//! Every user utterance is one phrase from the family of its label plus a few
//! filler words. The scripted planner proposes one strategy per family whose
//! passages are exactly that family's phrases, so the retrieval features can
//! recover the labels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    MockEmbedderConfig, ProviderMode, RunConfig, COMPLETIONS_SCRIPT, EMBEDDER_SCRIPT,
};
use crate::data::{
    write_corpus, Annotation, Conversation, CorpusFormat, Rating, SatisfactionLabel, Speaker,
    Utterance,
};
use crate::error::{Error, Result};
use crate::gateway::mock::{ChannelScript, CompletionScript};
use crate::planner::ModelParams;

pub const SAT_PHRASES: [&str; 5] = [
    "thank you so much that was perfect",
    "great this works wonderfully",
    "awesome i really appreciate your help",
    "excellent exactly what i wanted",
    "brilliant you made my day",
];
pub const NEU_PHRASES: [&str; 5] = [
    "what time does the place open",
    "can you tell me the address",
    "i need a table for two people",
    "is there parking near the station",
    "which day works for the booking",
];
pub const DSAT_PHRASES: [&str; 5] = [
    "no that is wrong again",
    "this is useless you are not listening",
    "terrible i already told you twice",
    "stop this is not what i asked",
    "ugh you keep making mistakes",
];
pub const FILLER: [&str; 12] = [
    "today",
    "please",
    "hotel",
    "train",
    "tomorrow",
    "restaurant",
    "ticket",
    "city",
    "evening",
    "also",
    "now",
    "weekend",
];

const ASSISTANT_REPLIES: [&str; 3] = [
    "Let me look into that for you.",
    "Here is what I found.",
    "Is there anything else you need?",
];

pub const INITIAL_STRATEGIES: [&str; 3] = [
    "User mentions a time of day.",
    "User refers to a place in the city.",
    "User talks about travel plans.",
];

pub fn phrases(label: SatisfactionLabel) -> &'static [&'static str; 5] {
    match label {
        SatisfactionLabel::Sat => &SAT_PHRASES,
        SatisfactionLabel::Neu => &NEU_PHRASES,
        SatisfactionLabel::Dsat => &DSAT_PHRASES,
    }
}

pub fn class_strategy(label: SatisfactionLabel) -> &'static str {
    match label {
        SatisfactionLabel::Sat => "User expresses gratitude and delight.",
        SatisfactionLabel::Neu => "User asks a plain factual question.",
        SatisfactionLabel::Dsat => "User complains that the answer is wrong.",
    }
}

/// Family whose phrase occurs in `text`, if any.
pub fn phrase_family(text: &str) -> Option<SatisfactionLabel> {
    SatisfactionLabel::CLASSES
        .into_iter()
        .find(|&l| phrases(l).iter().any(|p| text.contains(p)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub conversations: usize,
    pub user_turns: usize,
    pub filler_words: usize,
    pub dim: usize,
    /// Number of scripted planner replies.
    pub planner_replies: usize,
    /// Make every reply after the first repeat the first one, so later
    /// iterations bring nothing new.
    pub repeat_first_reply: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            conversations: 100,
            user_turns: 6,
            filler_words: 3,
            dim: 256,
            planner_replies: 60,
            repeat_first_reply: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub conversations: Vec<Conversation>,
    pub script: CompletionScript,
    pub embedder: MockEmbedderConfig,
    pub initial_strategies: Vec<String>,
}

fn rating_for(label: SatisfactionLabel, rng: &mut ChaCha8Rng) -> f64 {
    match label {
        SatisfactionLabel::Sat => *[4.0, 4.5, 5.0].choose(rng).expect("non-empty"),
        SatisfactionLabel::Neu => 3.0,
        SatisfactionLabel::Dsat => *[1.0, 2.0, 2.5].choose(rng).expect("non-empty"),
    }
}

fn corpus(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Conversation> {
    (0..cfg.conversations)
        .map(|c| {
            let mut utterances = Vec::new();
            let mut annotations = BTreeMap::new();
            for t in 0..cfg.user_turns {
                let label = SatisfactionLabel::CLASSES[rng.gen_range(0..3)];
                let mut words: Vec<&str> = vec![phrases(label).choose(rng).expect("non-empty")];
                words
                    .extend((0..cfg.filler_words).map(|_| *FILLER.choose(rng).expect("non-empty")));
                annotations.insert(
                    utterances.len(),
                    Annotation::Rating(Rating::Mean(rating_for(label, rng))),
                );
                utterances.push(Utterance {
                    speaker: Speaker::User,
                    text: words.join(" "),
                    turn_index: utterances.len(),
                });
                utterances.push(Utterance {
                    speaker: Speaker::Assistant,
                    text: ASSISTANT_REPLIES[t % ASSISTANT_REPLIES.len()].to_owned(),
                    turn_index: utterances.len(),
                });
            }
            Conversation {
                id: format!("synth-{c:04}"),
                utterances,
                annotations,
            }
        })
        .collect()
}

fn numbered(passages: &[String]) -> String {
    passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{}. {p}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn filler_passages(rng: &mut ChaCha8Rng, k: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    while out.len() < k {
        let p = format!(
            "{} {} {}",
            FILLER.choose(rng).expect("non-empty"),
            FILLER.choose(rng).expect("non-empty"),
            FILLER.choose(rng).expect("non-empty")
        );
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn strategies_reply(list: &[String]) -> String {
    format!(
        "```json\n{}\n```",
        serde_json::json!({ "strategies": list })
    )
}

/// Corpus plus scripts for the default model names.
pub fn build(cfg: &SyntheticConfig) -> Fixture {
    build_for(
        cfg,
        &ModelParams::great_default(),
        &ModelParams::unorthodox_default(),
        &ModelParams::passage_default(),
    )
}

pub fn build_for(
    cfg: &SyntheticConfig,
    great: &ModelParams,
    unorthodox: &ModelParams,
    passage: &ModelParams,
) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let conversations = corpus(cfg, &mut rng);
    let k = 5;

    let mut keyed = BTreeMap::new();
    for s in INITIAL_STRATEGIES {
        keyed.insert(s.to_owned(), numbered(&filler_passages(&mut rng, k)));
    }
    for label in SatisfactionLabel::CLASSES {
        let ps: Vec<String> = phrases(label).iter().map(|p| p.to_string()).collect();
        keyed.insert(class_strategy(label).to_owned(), numbered(&ps));
    }

    let mut replies = Vec::with_capacity(cfg.planner_replies);
    let mut distractor = 0usize;
    let mut next_distractor = |rng: &mut ChaCha8Rng, keyed: &mut BTreeMap<String, String>| {
        let text = format!(
            "User mentions the {} detail number {distractor}.",
            FILLER[distractor % FILLER.len()]
        );
        distractor += 1;
        keyed.insert(text.clone(), numbered(&filler_passages(rng, k)));
        text
    };
    let mut first: Vec<String> = SatisfactionLabel::CLASSES
        .iter()
        .map(|&l| class_strategy(l).to_owned())
        .collect();
    first.push(next_distractor(&mut rng, &mut keyed));
    first.push(next_distractor(&mut rng, &mut keyed));
    let first_reply = strategies_reply(&first);
    replies.push(first_reply.clone());
    while replies.len() < cfg.planner_replies {
        if cfg.repeat_first_reply {
            replies.push(first_reply.clone());
        } else {
            let list: Vec<String> = (0..5)
                .map(|_| next_distractor(&mut rng, &mut keyed))
                .collect();
            replies.push(strategies_reply(&list));
        }
    }

    let mut script = CompletionScript::new();
    script.insert(
        great.model.clone(),
        ChannelScript {
            replies,
            keyed: BTreeMap::new(),
        },
    );
    if unorthodox.model != great.model {
        let shared = script[&great.model].clone();
        script.insert(unorthodox.model.clone(), shared);
    }
    script.insert(
        passage.model.clone(),
        ChannelScript {
            replies: Vec::new(),
            keyed,
        },
    );
    Fixture {
        conversations,
        script,
        embedder: MockEmbedderConfig {
            seed: cfg.seed,
            dim: cfg.dim,
        },
        initial_strategies: INITIAL_STRATEGIES.iter().map(|s| s.to_string()).collect(),
    }
}

impl Fixture {
    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(|c| c.annotations.len()).sum()
    }

    /// Offline run configuration pointing at files written by [`Fixture::write`].
    pub fn run_config(&self, corpus: PathBuf, mock_dir: PathBuf) -> RunConfig {
        let mut c = RunConfig {
            corpus,
            corpus_format: CorpusFormat::Rated,
            initial_strategies: Some(self.initial_strategies.clone()),
            split_seed: 11,
            exploration_seed: 13,
            max_iterations: 10,
            k_top: 8,
            ..RunConfig::default()
        };
        c.providers.mode = ProviderMode::Mock;
        c.providers.mock_dir = Some(mock_dir);
        c.providers.embedding.dim = self.embedder.dim;
        c
    }

    /// Write `corpus.jsonl`, `mock/completions.json`, `mock/embedder.json` and
    /// `config.toml` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<RunConfig> {
        let mock = dir.join("mock");
        std::fs::create_dir_all(&mock).map_err(|e| Error::io(&mock, e))?;
        let corpus = dir.join("corpus.jsonl");
        write_corpus(&corpus, &self.conversations)?;
        let write = |path: PathBuf, text: String| {
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(
            mock.join(COMPLETIONS_SCRIPT),
            serde_json::to_string_pretty(&self.script)?,
        )?;
        write(
            mock.join(EMBEDDER_SCRIPT),
            serde_json::to_string_pretty(&self.embedder)?,
        )?;
        let relative = self.run_config("corpus.jsonl".into(), "mock".into());
        let toml = toml::to_string(&relative).map_err(|e| Error::Config(e.to_string()))?;
        write(dir.join("config.toml"), toml)?;
        Ok(self.run_config(corpus, mock))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_shape_and_labels() {
        let f = build(&SyntheticConfig::default());
        assert_eq!(f.utterance_count(), 600);
        for conv in &f.conversations {
            for u in conv.labeled_utterances().unwrap() {
                assert_eq!(phrase_family(&u.text), Some(u.label), "{}", u.text);
            }
        }
        let counts = f
            .conversations
            .iter()
            .flat_map(|c| c.labeled_utterances().unwrap())
            .fold(BTreeMap::new(), |mut m, u| {
                *m.entry(u.label).or_insert(0usize) += 1;
                m
            });
        assert!(counts.values().all(|&n| n > 150), "{counts:?}");
    }

    #[test]
    fn fixture_is_reproducible() {
        let cfg = SyntheticConfig::default();
        assert_eq!(build(&cfg), build(&cfg));
    }

    #[test]
    fn families_do_not_overlap() {
        for a in SatisfactionLabel::CLASSES {
            for p in phrases(a) {
                assert_eq!(phrase_family(p), Some(a));
                assert!(FILLER.iter().all(|f| !p.split(' ').any(|w| w == *f)));
            }
        }
    }

    #[test]
    fn written_config_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let f = build(&SyntheticConfig::default());
        let written = f.write(dir.path()).unwrap();
        let parsed = RunConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(parsed, written);
        let convs = crate::data::load_corpus(&written.corpus, CorpusFormat::Rated).unwrap();
        assert_eq!(convs, f.conversations);
    }
}
