//! Dialogue corpora: loading, rating conversion and conversation-level splits.
//!
//! A corpus file holds one conversation per line:
//!
//! ```text
//! {"id": "c1", "turns": [{"speaker": "user", "text": "hi", "rating": [3, 4]},
//!                        {"speaker": "assistant", "text": "hello"}]}
//! ```
//!
//! The `rated` schema carries 1-5 ratings on user turns (a single number, or a
//! list of integer annotator scores that is averaged exactly). The `labeled`
//! schema carries a `label` of `SAT`, `NEU` or `DSAT` instead.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    #[serde(alias = "User", alias = "USER")]
    User,
    #[serde(alias = "Assistant", alias = "ASSISTANT", alias = "system")]
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
}

/// The three target classes. The derived order is `Dsat < Neu < Sat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SatisfactionLabel {
    #[serde(rename = "DSAT")]
    Dsat,
    #[serde(rename = "NEU")]
    Neu,
    #[serde(rename = "SAT")]
    Sat,
}

impl SatisfactionLabel {
    /// Class order used by the classifier: SAT, NEU, DSAT.
    pub const CLASSES: [SatisfactionLabel; 3] = [
        SatisfactionLabel::Sat,
        SatisfactionLabel::Neu,
        SatisfactionLabel::Dsat,
    ];

    pub fn class_index(self) -> usize {
        match self {
            SatisfactionLabel::Sat => 0,
            SatisfactionLabel::Neu => 1,
            SatisfactionLabel::Dsat => 2,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Self> {
        Self::CLASSES.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SatisfactionLabel::Sat => "SAT",
            SatisfactionLabel::Neu => "NEU",
            SatisfactionLabel::Dsat => "DSAT",
        }
    }
}

impl fmt::Display for SatisfactionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SatisfactionLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SAT" => Ok(SatisfactionLabel::Sat),
            "NEU" => Ok(SatisfactionLabel::Neu),
            "DSAT" => Ok(SatisfactionLabel::Dsat),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// A user-turn rating as it appears in the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rating {
    /// Integer annotator scores; their mean is compared exactly.
    Scores(Vec<u8>),
    /// An average already computed upstream.
    Mean(f64),
}

impl Rating {
    pub fn mean(&self) -> f64 {
        match self {
            Rating::Scores(s) => s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64,
            Rating::Mean(m) => *m,
        }
    }

    pub fn to_label(&self) -> Result<SatisfactionLabel> {
        match self {
            Rating::Mean(m) => convert_rating(*m),
            Rating::Scores(scores) => {
                if scores.is_empty() || scores.iter().any(|&s| !(1..=5).contains(&s)) {
                    return Err(Error::RatingOutOfRange(self.mean()));
                }
                // sum / n compared with 3 without leaving the integers
                let sum: u32 = scores.iter().map(|&s| u32::from(s)).sum();
                let pivot = 3 * scores.len() as u32;
                Ok(match sum.cmp(&pivot) {
                    std::cmp::Ordering::Less => SatisfactionLabel::Dsat,
                    std::cmp::Ordering::Equal => SatisfactionLabel::Neu,
                    std::cmp::Ordering::Greater => SatisfactionLabel::Sat,
                })
            }
        }
    }
}

/// Map an average 1-5 rating onto the three satisfaction classes.
pub fn convert_rating(avg_rating: f64) -> Result<SatisfactionLabel> {
    if !(1.0..=5.0).contains(&avg_rating) {
        return Err(Error::RatingOutOfRange(avg_rating));
    }
    Ok(if avg_rating < 3.0 {
        SatisfactionLabel::Dsat
    } else if avg_rating == 3.0 {
        SatisfactionLabel::Neu
    } else {
        SatisfactionLabel::Sat
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Annotation {
    Rating(Rating),
    Label(SatisfactionLabel),
}

impl Annotation {
    pub fn label(&self) -> Result<SatisfactionLabel> {
        match self {
            Annotation::Rating(r) => r.to_label(),
            Annotation::Label(l) => Ok(*l),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    /// User-turn annotations keyed by `turn_index`.
    pub annotations: BTreeMap<usize, Annotation>,
}

impl Conversation {
    pub fn user_turns(&self) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.speaker == Speaker::User)
            .count()
    }

    /// Conversations with fewer than two user turns are excluded from splits.
    pub fn is_split_eligible(&self) -> bool {
        self.user_turns() >= 2
    }

    /// Every annotated user turn, with the utterances before it as context.
    pub fn labeled_utterances(&self) -> Result<Vec<LabeledUtterance>> {
        self.annotations
            .iter()
            .map(|(&turn, annotation)| {
                let utt = &self.utterances[turn];
                Ok(LabeledUtterance {
                    conversation_id: self.id.clone(),
                    turn_index: turn,
                    text: utt.text.clone(),
                    context: self.utterances[..turn].to_vec(),
                    label: annotation.label()?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub conversation_id: String,
    pub turn_index: usize,
    pub text: String,
    pub context: Vec<Utterance>,
    pub label: SatisfactionLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// 1-5 ratings on user turns.
    Rated,
    /// SAT/NEU/DSAT labels on user turns.
    Labeled,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rated" => Ok(CorpusFormat::Rated),
            "labeled" | "labelled" => Ok(CorpusFormat::Labeled),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rating: Option<Rating>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<SatisfactionLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawConversation {
    id: String,
    turns: Vec<RawTurn>,
}

/// A record that failed schema validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub conversations: Vec<Conversation>,
    pub rejects: Vec<Reject>,
    /// Ids of loaded conversations with fewer than two user turns.
    pub ineligible: Vec<String>,
}

fn validate(
    raw: RawConversation,
    format: CorpusFormat,
) -> std::result::Result<Conversation, String> {
    if raw.id.trim().is_empty() {
        return Err("empty conversation id".into());
    }
    let mut utterances = Vec::with_capacity(raw.turns.len());
    let mut annotations = BTreeMap::new();
    for (turn_index, turn) in raw.turns.into_iter().enumerate() {
        let expected = if turn_index % 2 == 0 {
            Speaker::User
        } else {
            Speaker::Assistant
        };
        if turn.speaker != expected {
            return Err(format!(
                "turn {turn_index}: expected {expected:?} (turns alternate starting with the user)"
            ));
        }
        let text = turn.text.trim();
        if text.is_empty() {
            return Err(format!("turn {turn_index}: empty text"));
        }
        let annotation = match (format, turn.rating, turn.label) {
            (_, Some(_), Some(_)) => {
                return Err(format!("turn {turn_index}: both rating and label present"))
            }
            (CorpusFormat::Rated, None, Some(_)) => {
                return Err(format!("turn {turn_index}: label in a rated corpus"))
            }
            (CorpusFormat::Labeled, Some(_), None) => {
                return Err(format!("turn {turn_index}: rating in a labeled corpus"))
            }
            (_, Some(rating), None) => {
                rating
                    .to_label()
                    .map_err(|e| format!("turn {turn_index}: {e}"))?;
                Some(Annotation::Rating(rating))
            }
            (_, None, Some(label)) => Some(Annotation::Label(label)),
            (_, None, None) => None,
        };
        if let Some(annotation) = annotation {
            if expected != Speaker::User {
                return Err(format!(
                    "turn {turn_index}: annotation on an assistant turn"
                ));
            }
            annotations.insert(turn_index, annotation);
        }
        utterances.push(Utterance {
            speaker: turn.speaker,
            text: text.to_owned(),
            turn_index,
        });
    }
    Ok(Conversation {
        id: raw.id,
        utterances,
        annotations,
    })
}

/// Load a corpus, collecting malformed records into the report's rejects.
pub fn load_corpus_report(path: &Path, format: CorpusFormat) -> Result<LoadReport> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawConversation>(&line)
            .map_err(|e| e.to_string())
            .and_then(|raw| validate(raw, format));
        match parsed {
            Ok(conv) => {
                if !conv.is_split_eligible() {
                    report.ineligible.push(conv.id.clone());
                }
                report.conversations.push(conv);
            }
            Err(reason) => report.rejects.push(Reject {
                line: line_no,
                reason,
            }),
        }
    }
    if report.conversations.is_empty() && report.rejects.is_empty() {
        return Err(Error::EmptyCorpus(path.to_owned()));
    }
    Ok(report)
}

/// Load a corpus, failing on the first schema violation.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Conversation>> {
    let report = load_corpus_report(path, format)?;
    if let Some(reject) = report.rejects.into_iter().next() {
        return Err(Error::Schema {
            line: reject.line,
            reason: reject.reason,
        });
    }
    Ok(report.conversations)
}

pub fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    let mut out = String::new();
    for r in rejects {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Serialize one conversation in the corpus line format.
pub fn conversation_to_line(conv: &Conversation) -> Result<String> {
    let turns = conv
        .utterances
        .iter()
        .map(|u| {
            let (rating, label) = match conv.annotations.get(&u.turn_index) {
                Some(Annotation::Rating(r)) => (Some(r.clone()), None),
                Some(Annotation::Label(l)) => (None, Some(*l)),
                None => (None, None),
            };
            RawTurn {
                speaker: u.speaker,
                text: u.text.clone(),
                rating,
                label,
            }
        })
        .collect();
    Ok(serde_json::to_string(&RawConversation {
        id: conv.id.clone(),
        turns,
    })?)
}

pub fn write_corpus(path: &Path, convs: &[Conversation]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for conv in convs {
        writeln!(file, "{}", conversation_to_line(conv)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledUtterance>,
    pub validation: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl DatasetSplit {
    pub fn part(&self, name: SplitName) -> &[LabeledUtterance] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }
}

/// Conversation-level 8:1:1 split of the eligible conversations.
///
/// Validation and test each receive `max(1, round(n / 10))` conversations and
/// train takes the rest. Conversations are ordered by id before the seeded
/// shuffle so the result does not depend on input order.
pub fn split_dataset(convs: &[Conversation], seed: u64) -> Result<DatasetSplit> {
    let mut eligible: Vec<&Conversation> = convs.iter().filter(|c| c.is_split_eligible()).collect();
    let n = eligible.len();
    let held_out = ((n as f64) / 10.0).round().max(1.0) as usize;
    if n < 3 || n <= 2 * held_out {
        return Err(Error::TooFewConversations(n));
    }
    eligible.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);

    let (val_convs, rest) = eligible.split_at(held_out);
    let (test_convs, train_convs) = rest.split_at(held_out);

    let flatten = |part: &[&Conversation]| -> Result<(Vec<LabeledUtterance>, Vec<String>)> {
        let mut utts = Vec::new();
        let mut ids = Vec::with_capacity(part.len());
        for conv in part {
            ids.push(conv.id.clone());
            utts.extend(conv.labeled_utterances()?);
        }
        Ok((utts, ids))
    };
    let (train, train_ids) = flatten(train_convs)?;
    let (validation, validation_ids) = flatten(val_convs)?;
    let (test, test_ids) = flatten(test_convs)?;
    Ok(DatasetSplit {
        train,
        validation,
        test,
        train_ids,
        validation_ids,
        test_ids,
    })
}
