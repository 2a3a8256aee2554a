//! The four agent behaviors — Planner, Refiner, Strategic Reflector and
//! Content Reflector — plus the reflection summarizer, as prompt
//! constructions over a chat backend.
//!
//! Templates carry four sections (background clarification, system
//! instruction, required information, output format); the first two become
//! the system prompt, the rest the user prompt.

use serde::Serialize;
use std::path::Path;

use crate::backend::{call_with_repair_by, ChatBackend, ChatRequest, JSON_REPAIR_NOTE};
use crate::domain::{
    enforce_word_limit, Aspect, Explanation, PlannerDecision, Reflection, ReflectionLevel,
    Trajectory, UserGoal,
};
use crate::error::{Error, Result};
use crate::memory::RefinementMemory;
use crate::template;

/// Stand-in for reflections the first round has not produced yet.
pub const NO_FEEDBACK: &str = "(no feedback yet)";
/// Summarizer output when no content reflection exists for the aspect.
pub const NO_PRIOR_REFLECTIONS: &str = "(no prior reflections on this aspect)";

const DEFAULT_STRATEGY_CRITERIA: &str = "accuracy (whether the refinement process involves \
irrelevant aspects), completeness (whether it omits key aspects), and priority (whether it \
overlooks the relative priority of aspects)";
const DEFAULT_CONTENT_CRITERIA: &str = "following the refinement instructions, covering \
necessary details, and excluding irrelevant content";

const REQUIRED_INFORMATION_MARKER: &str = "\n\n# Required Information\n";

/// Prompt templates and criteria texts for every agent role.
#[derive(Debug, Clone)]
pub struct PromptCatalog {
    background: String,
    planner: String,
    refiner: String,
    strategic: String,
    content: String,
    strategy_criteria: String,
    content_criteria: String,
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        PromptCatalog {
            background: include_str!("templates/background.txt").trim_end().to_string(),
            planner: include_str!("templates/planner.txt").trim_end().to_string(),
            refiner: include_str!("templates/refiner.txt").trim_end().to_string(),
            strategic: include_str!("templates/strategic.txt").trim_end().to_string(),
            content: include_str!("templates/content.txt").trim_end().to_string(),
            strategy_criteria: DEFAULT_STRATEGY_CRITERIA.into(),
            content_criteria: DEFAULT_CONTENT_CRITERIA.into(),
        }
    }

    /// Override templates from a directory (one file per role); files that are
    /// absent keep the built-in text.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut catalog = Self::builtin();
        let slots: [(&str, &mut String); 7] = [
            ("background.txt", &mut catalog.background),
            ("planner.txt", &mut catalog.planner),
            ("refiner.txt", &mut catalog.refiner),
            ("strategic.txt", &mut catalog.strategic),
            ("content.txt", &mut catalog.content),
            ("strategy_criteria.txt", &mut catalog.strategy_criteria),
            ("content_criteria.txt", &mut catalog.content_criteria),
        ];
        for (name, slot) in slots {
            let path = dir.join(name);
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                *slot = text.trim_end().to_string();
            }
        }
        for role in [&catalog.planner, &catalog.refiner, &catalog.strategic, &catalog.content] {
            if !role.contains(REQUIRED_INFORMATION_MARKER) {
                return Err(Error::Config(
                    "role template lacks a '# Required Information' section".into(),
                ));
            }
        }
        Ok(catalog)
    }

    /// Split a role template into (system, user) prompts and substitute.
    fn render(&self, role_template: &str, subs: &[(&str, &str)]) -> Result<(String, String)> {
        let (system_part, rest) = role_template
            .split_once(REQUIRED_INFORMATION_MARKER)
            .ok_or_else(|| {
                Error::Config("role template lacks a '# Required Information' section".into())
            })?;
        let user_part = format!("# Required Information\n{rest}");
        let mut all: Vec<(&str, &str)> = vec![("Background_Clarification", &self.background)];
        all.extend_from_slice(subs);
        Ok((
            template::substitute(system_part.trim_end(), &all)?,
            template::substitute(user_part.trim_end(), &all)?,
        ))
    }
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub repair_attempts: u32,
    pub max_output_tokens: u32,
    pub planner_temperature: f64,
    pub refiner_temperature: f64,
    pub reflector_temperature: f64,
    pub summarizer_temperature: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            repair_attempts: 2,
            max_output_tokens: 512,
            planner_temperature: 0.0,
            refiner_temperature: 0.7,
            reflector_temperature: 0.0,
            summarizer_temperature: 0.0,
        }
    }
}

// --- prompt builders (pure; pinned byte-for-byte by golden tests) ---

pub fn planner_prompt(
    catalog: &PromptCatalog,
    previous: &Explanation,
    goal: &UserGoal,
    trajectory: &Trajectory,
    last_strategic: Option<&Reflection>,
    last_content: Option<&Reflection>,
    max_count: u32,
) -> Result<(String, String)> {
    let strategic = last_strategic.map_or(NO_FEEDBACK, |r| r.text.as_str());
    let content = last_content.map_or(NO_FEEDBACK, |r| r.text.as_str());
    let max_count = max_count.to_string();
    let trajectory = trajectory.as_letters();
    catalog.render(
        &catalog.planner,
        &[
            ("Max_Count", max_count.as_str()),
            ("Current_Explanation", previous.text.as_str()),
            ("User_Goal", goal.prose.as_str()),
            ("Refinement_Trajectory", trajectory.as_str()),
            ("Strategic_Reflection", strategic),
            ("Content_Reflection", content),
        ],
    )
}

pub fn refiner_prompt(
    catalog: &PromptCatalog,
    previous: &Explanation,
    aspect: Aspect,
    instruction: &str,
    summary: &str,
    max_length: usize,
) -> Result<(String, String)> {
    let max_length = max_length.to_string();
    catalog.render(
        &catalog.refiner,
        &[
            ("Max_Length", max_length.as_str()),
            ("Current_Explanation", previous.text.as_str()),
            ("Refined_Aspect", aspect.name()),
            ("Refinement_Instruction", instruction),
            ("Summarize_Reflection", summary),
        ],
    )
}

#[derive(Serialize)]
struct HistoryEntry<'a> {
    round: u32,
    aspect: &'a str,
    explanation: &'a str,
    instruction: &'a str,
    strategic_reflection: &'a str,
    content_reflection: &'a str,
}

/// Serialize the refinement history for the strategic reflector: prior rounds
/// in full plus the current round with reflections still pending.
fn serialize_history(
    prior: &RefinementMemory,
    round: u32,
    aspect: Aspect,
    explanation: &Explanation,
    instruction: &str,
) -> String {
    let mut entries: Vec<HistoryEntry<'_>> = prior
        .records()
        .iter()
        .map(|r| HistoryEntry {
            round: r.round(),
            aspect: r.aspect.name(),
            explanation: &r.explanation.text,
            instruction: &r.instruction,
            strategic_reflection: &r.strategic_reflection.text,
            content_reflection: &r.content_reflection.text,
        })
        .collect();
    entries.push(HistoryEntry {
        round,
        aspect: aspect.name(),
        explanation: &explanation.text,
        instruction,
        strategic_reflection: "(pending)",
        content_reflection: "(pending)",
    });
    serde_json::to_string(&entries).expect("history serialization cannot fail")
}

pub fn strategic_prompt(
    catalog: &PromptCatalog,
    goal: &UserGoal,
    prior: &RefinementMemory,
    round: u32,
    aspect: Aspect,
    explanation: &Explanation,
    instruction: &str,
) -> Result<(String, String)> {
    let history = serialize_history(prior, round, aspect, explanation, instruction);
    let round = round.to_string();
    catalog.render(
        &catalog.strategic,
        &[
            ("User_Goal", goal.prose.as_str()),
            ("Refinement_Memory", history.as_str()),
            ("Time_Step", round.as_str()),
            ("Refined_Aspect", aspect.name()),
            ("Strategy_Criteria", catalog.strategy_criteria.as_str()),
        ],
    )
}

pub fn content_prompt(
    catalog: &PromptCatalog,
    explanation: &Explanation,
    aspect: Aspect,
    instruction: &str,
    signal_rendering: &str,
) -> Result<(String, String)> {
    catalog.render(
        &catalog.content,
        &[
            ("Current_Explanation", explanation.text.as_str()),
            ("Refined_Aspect", aspect.name()),
            ("Refinement_Instruction", instruction),
            ("Quality_Signal", signal_rendering),
            ("Content_Criteria", catalog.content_criteria.as_str()),
        ],
    )
}

/// Stateless agent front-end: all episode state flows through parameters.
pub struct Agents<'a> {
    backend: &'a dyn ChatBackend,
    catalog: &'a PromptCatalog,
    config: AgentConfig,
}

impl<'a> Agents<'a> {
    pub fn new(backend: &'a dyn ChatBackend, catalog: &'a PromptCatalog, config: AgentConfig) -> Self {
        Agents {
            backend,
            catalog,
            config,
        }
    }

    fn request(
        &self,
        prompts: (String, String),
        temperature: f64,
        tag: String,
    ) -> Result<ChatRequest> {
        ChatRequest::new(prompts.0, prompts.1, temperature, self.config.max_output_tokens, tag)
    }

    /// Decide which aspect to refine next, or finish.
    ///
    /// Round-1 calls pass `None` reflections, rendered as "(no feedback yet)".
    /// Out-of-range integers count as parse failures and trigger repair.
    pub fn plan(
        &self,
        previous: &Explanation,
        goal: &UserGoal,
        trajectory: &Trajectory,
        last_strategic: Option<&Reflection>,
        last_content: Option<&Reflection>,
        max_count: u32,
    ) -> Result<PlannerDecision> {
        let round = previous.round + 1;
        let prompts = planner_prompt(
            self.catalog,
            previous,
            goal,
            trajectory,
            last_strategic,
            last_content,
            max_count,
        )?;
        let request = self.request(prompts, self.config.planner_temperature, format!("planner#{round}"))?;
        call_with_repair_by(
            self.backend,
            &request,
            self.config.repair_attempts,
            JSON_REPAIR_NOTE,
            |text| {
                let value = crate::backend::extract_json_object(text, "aspect")?;
                let code = value
                    .as_i64()
                    .ok_or_else(|| Error::Parse(format!("aspect is not an integer: {value}")))?;
                PlannerDecision::from_code(code)
            },
        )
    }

    /// Summarize prior content reflections about `aspect` (Refiner input).
    /// An empty list short-circuits without a backend call.
    pub fn summarize_reflections(
        &self,
        aspect: Aspect,
        reflections: &[&Reflection],
        round: u32,
    ) -> Result<String> {
        if reflections.is_empty() {
            return Ok(NO_PRIOR_REFLECTIONS.to_string());
        }
        let listed = reflections
            .iter()
            .map(|r| format!("- (round {}) {}", r.round, r.text))
            .collect::<Vec<_>>()
            .join("\n");
        let user_prompt = format!(
            "Summarize the following content reflections about the aspect {} in at most 80 words, \
             keeping the guidance a rewriting agent needs:\n{listed}",
            aspect.name()
        );
        let request = ChatRequest::new(
            "You condense reviewer feedback for a writing agent.",
            user_prompt,
            self.config.summarizer_temperature,
            self.config.max_output_tokens,
            format!("summarize#{round}"),
        )?;
        let response = self.backend.complete(&request)?;
        let text = response.text.trim();
        if text.is_empty() {
            return Err(Error::Backend("empty reflection summary".into()));
        }
        Ok(text.to_string())
    }

    /// Rewrite the explanation for one aspect. Over-long results get one
    /// re-prompt with a length reminder, then hard truncation.
    pub fn refine(
        &self,
        previous: &Explanation,
        aspect: Aspect,
        instruction: &str,
        summary: &str,
        max_length: usize,
    ) -> Result<Explanation> {
        let round = previous.round + 1;
        let prompts = refiner_prompt(self.catalog, previous, aspect, instruction, summary, max_length)?;
        let request = self.request(prompts, self.config.refiner_temperature, format!("refiner#{round}"))?;
        let parse = |text: &str| {
            let value = crate::backend::extract_json_object(text, "explanation")?;
            let explanation = value
                .as_str()
                .ok_or_else(|| Error::Parse(format!("explanation is not a string: {value}")))?;
            if explanation.trim().is_empty() {
                return Err(Error::Parse("empty explanation text".into()));
            }
            Ok(explanation.to_string())
        };
        let mut text =
            call_with_repair_by(self.backend, &request, self.config.repair_attempts, JSON_REPAIR_NOTE, parse)?;
        if crate::domain::count_words(&text) > max_length {
            let mut reminder = request.clone();
            reminder.user_prompt = format!(
                "{}\n\nThe explanation must be no longer than {max_length} words. Return only the JSON object.",
                request.user_prompt
            );
            text = call_with_repair_by(
                self.backend,
                &reminder,
                self.config.repair_attempts,
                JSON_REPAIR_NOTE,
                parse,
            )?;
        }
        Explanation::new(enforce_word_limit(&text, max_length)?, round)
    }

    /// Evaluate the planner's aspect choices against the goal.
    ///
    /// `prior` holds rounds 1..t-1; the current round enters the serialized
    /// history with its reflections marked pending.
    pub fn reflect_strategic(
        &self,
        goal: &UserGoal,
        prior: &RefinementMemory,
        round: u32,
        aspect: Aspect,
        explanation: &Explanation,
        instruction: &str,
    ) -> Result<Reflection> {
        let prompts =
            strategic_prompt(self.catalog, goal, prior, round, aspect, explanation, instruction)?;
        let request =
            self.request(prompts, self.config.reflector_temperature, format!("strategic#{round}"))?;
        let text = call_with_repair_by(
            self.backend,
            &request,
            self.config.repair_attempts,
            JSON_REPAIR_NOTE,
            |text| {
                let value = crate::backend::extract_json_object(text, "strategic reflection")?;
                value
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Parse("strategic reflection is not a string".into()))
            },
        )?;
        Reflection::new(ReflectionLevel::Strategic, round, text)
    }

    /// Evaluate the refined text against the aspect standard, informed by the
    /// external quality signal.
    pub fn reflect_content(
        &self,
        explanation: &Explanation,
        aspect: Aspect,
        instruction: &str,
        signal: &crate::domain::QualitySignal,
    ) -> Result<Reflection> {
        let round = explanation.round;
        let prompts =
            content_prompt(self.catalog, explanation, aspect, instruction, &signal.render())?;
        let request =
            self.request(prompts, self.config.reflector_temperature, format!("content#{round}"))?;
        let text = call_with_repair_by(
            self.backend,
            &request,
            self.config.repair_attempts,
            JSON_REPAIR_NOTE,
            |text| {
                let value = crate::backend::extract_json_object(text, "content reflection")?;
                value
                    .as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Parse("content reflection is not a string".into()))
            },
        )?;
        Reflection::new(ReflectionLevel::Content, round, text)
    }
}
