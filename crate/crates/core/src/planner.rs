//! Strategy planning: prompt assembly, great/unorthodox selection and parsing
//! of the planner's JSON answer.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{CompletionRequest, Gateway};
use crate::memory::{Origin, Strategy, StrategyMemory};
use crate::template::Template;

pub const GREAT_TEMPLATE: &str = include_str!("../templates/great_planner.txt");
pub const UNORTHODOX_TEMPLATE: &str = include_str!("../templates/unorthodox_planner.txt");
pub const PLANNER_PLACEHOLDERS: [&str; 4] = [
    "problem_definition",
    "effective_strategies",
    "ineffective_strategies",
    "strategy_num",
];

const COMMON_PREFIX: &str = include_str!("../templates/problems/common_prefix.txt");

/// Number of most recent ineffective strategies shown to the planner.
pub const INEFFECTIVE_WINDOW: usize = 50;
/// Completions requested before a planner round is abandoned.
pub const PARSE_ATTEMPTS: usize = 3;

/// Built-in dataset presets: problem definition plus seed strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Mwoz,
    Sgd,
    Redial,
    Generic,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mwoz" | "multiwoz" => Ok(Preset::Mwoz),
            "sgd" => Ok(Preset::Sgd),
            "redial" => Ok(Preset::Redial),
            "generic" => Ok(Preset::Generic),
            other => Err(format!("unknown preset {other:?}")),
        }
    }
}

impl Preset {
    fn body(self) -> &'static str {
        match self {
            Preset::Mwoz => include_str!("../templates/problems/mwoz.txt"),
            Preset::Sgd => include_str!("../templates/problems/sgd.txt"),
            Preset::Redial => include_str!("../templates/problems/redial.txt"),
            Preset::Generic => include_str!("../templates/problems/generic.txt"),
        }
    }

    /// Shared prefix followed by the dataset description.
    pub fn problem_definition(self) -> String {
        format!("{}\n\n{}", COMMON_PREFIX.trim_end(), self.body().trim_end())
    }

    pub fn initial_strategies(self) -> Vec<&'static str> {
        match self {
            Preset::Mwoz => vec![
                "The user thanks the assistant.",
                "The user repeats the same question.",
                "The user asks about other services.",
            ],
            Preset::Redial => vec![
                "User asks for more movie recommendations.",
                "User expresses interest in a movie's director.",
                "User compliments assistant's choice.",
                "User requests further details on movie.",
                "User expresses interest in a specific genre.",
            ],
            Preset::Sgd => vec![
                "User expresses satisfaction with the service quality.",
                "User acknowledges assistant's quick thinking.",
                "User shows appreciation for assistance.",
                "User empathizes with the assistant.",
                "User appreciates the detailed explanation.",
            ],
            Preset::Generic => vec![
                "User thanks the assistant.",
                "User repeats the same request.",
                "User asks for an alternative.",
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Great,
    Unorthodox,
}

impl PlannerKind {
    pub fn origin(self) -> Origin {
        match self {
            PlannerKind::Great => Origin::Great,
            PlannerKind::Unorthodox => Origin::Unorthodox,
        }
    }
}

/// Model parameters for one planner, minus the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelParams {
    pub fn request(&self, prompt: String) -> CompletionRequest {
        CompletionRequest {
            model: self.model.clone(),
            system_prompt: prompt,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn great_default() -> Self {
        ModelParams {
            model: "gpt-4-1106-preview".into(),
            temperature: 0.1,
            max_tokens: 512,
        }
    }

    pub fn unorthodox_default() -> Self {
        ModelParams {
            model: "gpt-4-1106-preview".into(),
            temperature: 0.7,
            max_tokens: 512,
        }
    }

    pub fn passage_default() -> Self {
        ModelParams {
            model: "gpt-3.5-turbo-0125".into(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub problem_definition: String,
    pub n_s: usize,
    pub great_params: ModelParams,
    pub unorthodox_params: ModelParams,
    great_template: Template,
    unorthodox_template: Template,
}

impl PlannerConfig {
    pub fn new(problem_definition: impl Into<String>, n_s: usize) -> Result<Self> {
        Self::with_templates(problem_definition, n_s, GREAT_TEMPLATE, UNORTHODOX_TEMPLATE)
    }

    pub fn with_templates(
        problem_definition: impl Into<String>,
        n_s: usize,
        great: &str,
        unorthodox: &str,
    ) -> Result<Self> {
        if n_s == 0 {
            return Err(Error::Config(
                "strategies per call must be at least 1".into(),
            ));
        }
        Ok(PlannerConfig {
            problem_definition: problem_definition.into(),
            n_s,
            great_params: ModelParams::great_default(),
            unorthodox_params: ModelParams::unorthodox_default(),
            great_template: Template::parse(great, &PLANNER_PLACEHOLDERS)?,
            unorthodox_template: Template::parse(unorthodox, &PLANNER_PLACEHOLDERS)?,
        })
    }

    pub fn params(&self, kind: PlannerKind) -> &ModelParams {
        match kind {
            PlannerKind::Great => &self.great_params,
            PlannerKind::Unorthodox => &self.unorthodox_params,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationState {
    pub epsilon_initial: f64,
    pub epsilon_current: f64,
    pub rng_seed: u64,
}

impl ExplorationState {
    pub fn new(epsilon: f64, rng_seed: u64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "exploration ratio {epsilon} outside (0, 1]"
            )));
        }
        Ok(ExplorationState {
            epsilon_initial: epsilon,
            epsilon_current: epsilon,
            rng_seed,
        })
    }
}

/// Unorthodox exactly when `draw < epsilon_current`.
pub fn select_planner(state: &ExplorationState, draw: f64) -> PlannerKind {
    if draw < state.epsilon_current {
        PlannerKind::Unorthodox
    } else {
        PlannerKind::Great
    }
}

/// Reset on improvement, otherwise double (clamped at 1).
pub fn update_exploration(state: &ExplorationState, improved: bool) -> ExplorationState {
    let epsilon_current = if improved {
        state.epsilon_initial
    } else {
        (state.epsilon_current * 2.0).min(1.0)
    };
    ExplorationState {
        epsilon_current,
        ..*state
    }
}

fn bullets<'a>(strategies: impl Iterator<Item = &'a Strategy>) -> String {
    strategies
        .map(|s| format!("- {}", s.text))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_prompt(
    kind: PlannerKind,
    config: &PlannerConfig,
    memory: &StrategyMemory,
) -> Result<String> {
    let skip = memory.ineffective.len().saturating_sub(INEFFECTIVE_WINDOW);
    let values = BTreeMap::from([
        ("problem_definition", config.problem_definition.clone()),
        ("effective_strategies", bullets(memory.effective.iter())),
        (
            "ineffective_strategies",
            bullets(memory.ineffective.iter().skip(skip)),
        ),
        ("strategy_num", config.n_s.to_string()),
    ]);
    let template = match kind {
        PlannerKind::Great => &config.great_template,
        PlannerKind::Unorthodox => &config.unorthodox_template,
    };
    template.render(&values)
}

fn strategies_in(value: &serde_json::Value) -> Option<Vec<String>> {
    let items = value.as_object()?.get("strategies")?.as_array()?;
    items
        .iter()
        .map(|v| v.as_str().map(str::to_owned))
        .collect()
}

/// Pull the first JSON object with a `"strategies"` string array out of `raw`,
/// ignoring code fences and surrounding prose.
pub fn parse_strategies(raw: &str, n_s: usize) -> Result<Vec<String>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&raw[start..]).into_iter::<serde_json::Value>();
        if let Some(Ok(value)) = stream.next() {
            if let Some(list) = strategies_in(&value) {
                return Ok(list
                    .into_iter()
                    .map(|s| s.trim().to_owned())
                    .filter(|s| !s.is_empty())
                    .take(n_s)
                    .collect());
            }
        }
    }
    let preview: String = raw.chars().take(80).collect();
    Err(Error::PlannerParse(preview))
}

/// Ask the chosen planner for candidate strategy texts, re-asking when the
/// answer does not parse.
pub fn propose(
    gateway: &Gateway,
    config: &PlannerConfig,
    memory: &StrategyMemory,
    kind: PlannerKind,
) -> Result<Vec<String>> {
    let prompt = build_prompt(kind, config, memory)?;
    let mut last = None;
    for attempt in 1..=PARSE_ATTEMPTS {
        let raw = gateway.complete(&config.params(kind).request(prompt.clone()))?;
        match parse_strategies(&raw, config.n_s) {
            Ok(list) => return Ok(list),
            Err(e) => {
                log::warn!("{kind:?} planner answer {attempt} unparseable: {e}");
                last = Some(e);
            }
        }
    }
    Err(last.unwrap_or_else(|| Error::PlannerParse(String::new())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockEmbedder, ScriptedCompletion};
    use crate::memory::Strategy;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn mwoz_memory() -> StrategyMemory {
        StrategyMemory::init(&Preset::Mwoz.initial_strategies(), 30).unwrap()
    }

    fn mwoz_config() -> PlannerConfig {
        PlannerConfig::new(Preset::Mwoz.problem_definition(), 5).unwrap()
    }

    #[test]
    fn select_rule() {
        let s = ExplorationState::new(0.1, 0).unwrap();
        assert_eq!(select_planner(&s, 0.05), PlannerKind::Unorthodox);
        assert_eq!(select_planner(&s, 0.10), PlannerKind::Great);
        let one = ExplorationState::new(1.0, 0).unwrap();
        for d in [0.0, 0.5, 0.999_999] {
            assert_eq!(select_planner(&one, d), PlannerKind::Unorthodox);
        }
        assert!(ExplorationState::new(0.0, 0).is_err());
        assert!(ExplorationState::new(1.5, 0).is_err());
    }

    #[test]
    fn exploration_doubles_resets_and_clamps() {
        let s = ExplorationState::new(0.1, 0).unwrap();
        assert_eq!(update_exploration(&s, false).epsilon_current, 0.2);
        let s4 = ExplorationState {
            epsilon_current: 0.4,
            ..s
        };
        assert_eq!(update_exploration(&s4, true).epsilon_current, 0.1);
        let mut cur = s;
        let mut trace = vec![cur.epsilon_current];
        for _ in 0..5 {
            cur = update_exploration(&cur, false);
            trace.push(cur.epsilon_current);
        }
        assert_eq!(trace, vec![0.1, 0.2, 0.4, 0.8, 1.0, 1.0]);
    }

    #[test]
    fn unorthodox_frequency() {
        let s = ExplorationState::new(0.1, 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
        let hits = (0..10_000)
            .filter(|_| select_planner(&s, rng.gen::<f64>()) == PlannerKind::Unorthodox)
            .count();
        let frac = hits as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "{frac}");
    }

    #[test]
    fn great_prompt_lists_seeds() {
        let memory = mwoz_memory();
        let prompt = build_prompt(PlannerKind::Great, &mwoz_config(), &memory).unwrap();
        for s in &memory.effective {
            assert!(prompt.contains(&s.text));
        }
        assert!(prompt.contains("Generate 5 additional effective strategies"));
        assert!(prompt.starts_with("You are a competent bot"));
        assert!(prompt.contains("[Ineffective strategies]\n\n\nGenerate"));
        assert!(!prompt.contains("too formulaic"));
    }

    #[test]
    fn unorthodox_prompt_has_framing() {
        let prompt = build_prompt(PlannerKind::Unorthodox, &mwoz_config(), &mwoz_memory()).unwrap();
        assert!(prompt.starts_with("[problem definition]\n"));
        assert!(prompt.contains("In our opinion, the above strategies are too formulaic,"));
        assert!(prompt.contains("Generate 5 strategies that sound like conversations"));
    }

    #[test]
    fn ineffective_window_keeps_most_recent() {
        let mut memory = mwoz_memory();
        for i in 0..60 {
            memory.ineffective.push(Strategy::new(
                format!("User tries variant number {i:02}"),
                Origin::Great,
                1,
            ));
        }
        let prompt = build_prompt(PlannerKind::Great, &mwoz_config(), &memory).unwrap();
        assert!(!prompt.contains("variant number 09"));
        assert!(prompt.contains("variant number 10"));
        assert!(prompt.contains("variant number 59"));
        assert_eq!(prompt.matches("variant number").count(), 50);
    }

    #[test]
    fn bad_template_rejected() {
        assert!(matches!(
            PlannerConfig::with_templates(
                "p",
                5,
                "{{$problem_definition}} {{$mystery}}",
                UNORTHODOX_TEMPLATE
            ),
            Err(Error::UnknownPlaceholder(_))
        ));
    }

    #[test]
    fn parse_examples() {
        let direct = r#"{"strategies": ["User thanks for quick response."]}"#;
        assert_eq!(
            parse_strategies(direct, 5).unwrap(),
            vec!["User thanks for quick response."]
        );
        let fenced =
            format!("Sure! Here you go:\n```json\n{direct}\n```\nHope it helps {{not json}}");
        assert_eq!(
            parse_strategies(&fenced, 5).unwrap(),
            vec!["User thanks for quick response."]
        );
        assert!(parse_strategies("I cannot help with that.", 5).is_err());
        let many = r#"{"note": {"x": 1}, "strategies": [" a ", "", "b", "c"]}"#;
        assert_eq!(parse_strategies(many, 2).unwrap(), vec!["a", "b"]);
        let nested = r#"prefix {"wrong": 1} then {"strategies": ["z"]}"#;
        assert_eq!(parse_strategies(nested, 5).unwrap(), vec!["z"]);
    }

    #[test]
    fn propose_retries_then_gives_up() {
        let g = Gateway::new(Arc::new(MockEmbedder::new(0, 4)), 4).with_completion(Arc::new(
            ScriptedCompletion::sequence(["nope", r#"{"strategies": ["User a b", "User c d"]}"#]),
        ));
        let out = propose(&g, &mwoz_config(), &mwoz_memory(), PlannerKind::Great).unwrap();
        assert_eq!(out, vec!["User a b", "User c d"]);
        assert_eq!(g.stats().completion_calls, 2);

        let g = Gateway::new(Arc::new(MockEmbedder::new(0, 4)), 4)
            .with_completion(Arc::new(ScriptedCompletion::sequence(["x", "y", "z", "w"])));
        assert!(matches!(
            propose(&g, &mwoz_config(), &mwoz_memory(), PlannerKind::Great),
            Err(Error::PlannerParse(_))
        ));
        assert_eq!(g.stats().completion_calls, 3);
    }

    proptest! {
        #[test]
        fn build_prompt_is_pure(extra in proptest::collection::vec("[A-Za-z ]{1,20}", 0..5)) {
            let mut memory = mwoz_memory();
            for (i, t) in extra.iter().enumerate() {
                memory.ineffective.push(Strategy::new(format!("User {t} {i}"), Origin::Unorthodox, 1));
            }
            let a = build_prompt(PlannerKind::Unorthodox, &mwoz_config(), &memory).unwrap();
            let b = build_prompt(PlannerKind::Unorthodox, &mwoz_config(), &memory).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn parse_roundtrip(list in proptest::collection::vec("\\PC*", 0..8)) {
            let cleaned: Vec<String> = list.iter().map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect();
            let raw = serde_json::to_string_pretty(&serde_json::json!({"strategies": cleaned})).unwrap();
            prop_assert_eq!(parse_strategies(&raw, cleaned.len().max(1)).unwrap(), cleaned);
        }

        #[test]
        fn epsilon_stays_in_bounds(eps in 0.001f64..=1.0, flips in proptest::collection::vec(any::<bool>(), 0..40)) {
            let mut s = ExplorationState::new(eps, 0).unwrap();
            for improved in flips {
                s = update_exploration(&s, improved);
                prop_assert!(s.epsilon_current >= s.epsilon_initial && s.epsilon_current <= 1.0);
                if improved {
                    prop_assert_eq!(s.epsilon_current, eps);
                }
            }
        }
    }
}
