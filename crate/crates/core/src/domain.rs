//! Shared value types for the refinement pipeline.
//!
//! Everything here is an immutable value: safe to clone, share and send
//! between concurrent episodes. Validation happens in constructors so the
//! rest of the crate can rely on the invariants.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// A user-centric quality dimension of an explanation.
///
/// Codes follow the planner's output schema: 1 = Factuality,
/// 2 = Personalization, 3 = Sentiment Coherence (0 is reserved for Finish).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Aspect {
    Factuality,
    Personalization,
    SentimentCoherence,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [
        Aspect::Factuality,
        Aspect::Personalization,
        Aspect::SentimentCoherence,
    ];

    pub fn code(self) -> u8 {
        match self {
            Aspect::Factuality => 1,
            Aspect::Personalization => 2,
            Aspect::SentimentCoherence => 3,
        }
    }

    pub fn from_code(code: i64) -> Result<Self> {
        match code {
            1 => Ok(Aspect::Factuality),
            2 => Ok(Aspect::Personalization),
            3 => Ok(Aspect::SentimentCoherence),
            other => Err(Error::Domain(format!(
                "aspect code must be 1, 2 or 3, got {other}"
            ))),
        }
    }

    /// Display name used in prompts and reports.
    pub fn name(self) -> &'static str {
        match self {
            Aspect::Factuality => "Factuality",
            Aspect::Personalization => "Personalization",
            Aspect::SentimentCoherence => "Sentiment Coherence",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "Factuality" => Ok(Aspect::Factuality),
            "Personalization" => Ok(Aspect::Personalization),
            "Sentiment Coherence" | "SentimentCoherence" => Ok(Aspect::SentimentCoherence),
            other => Err(Error::Domain(format!("unknown aspect name '{other}'"))),
        }
    }

    /// Single-letter abbreviation used in trajectory notation and goal expressions.
    pub fn letter(self) -> char {
        match self {
            Aspect::Factuality => 'F',
            Aspect::Personalization => 'P',
            Aspect::SentimentCoherence => 'C',
        }
    }

    pub fn from_letter(letter: char) -> Result<Self> {
        match letter.to_ascii_uppercase() {
            'F' => Ok(Aspect::Factuality),
            'P' => Ok(Aspect::Personalization),
            'C' => Ok(Aspect::SentimentCoherence),
            other => Err(Error::Domain(format!(
                "unknown aspect letter '{other}' (expected F, P or C)"
            ))),
        }
    }

    /// Lowercase name used when listing aspects in goal prose.
    fn goal_name(self) -> &'static str {
        match self {
            Aspect::Factuality => "factuality",
            Aspect::Personalization => "personalization",
            Aspect::SentimentCoherence => "sentiment coherence",
        }
    }

    /// Short lowercase name used in ordered goal prose.
    fn short_goal_name(self) -> &'static str {
        match self {
            Aspect::Factuality => "factuality",
            Aspect::Personalization => "personalization",
            Aspect::SentimentCoherence => "coherence",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The planner either terminates the episode or picks an aspect to refine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerDecision {
    Finish,
    Refine(Aspect),
}

impl PlannerDecision {
    /// Decode the planner's output integer: 0 = Finish, 1-3 = aspect codes.
    pub fn from_code(code: i64) -> Result<Self> {
        if code == 0 {
            Ok(PlannerDecision::Finish)
        } else {
            Ok(PlannerDecision::Refine(Aspect::from_code(code)?))
        }
    }

    pub fn code(self) -> u8 {
        match self {
            PlannerDecision::Finish => 0,
            PlannerDecision::Refine(a) => a.code(),
        }
    }
}

/// An ordered, possibly tied, priority statement over aspects.
///
/// Tier 1 is the highest priority; equal tiers mean equal importance.
/// Construct via [`render_goal`] or [`parse_goal`] so that `prose` always
/// matches the entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    pub entries: Vec<(Aspect, u32)>,
    pub prose: String,
}

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [only] => (*only).to_string(),
        [a, b] => format!("{a} and {b}"),
        _ => {
            let head = &names[..names.len() - 1];
            format!("{} and {}", head.join(", "), names[names.len() - 1])
        }
    }
}

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        3 => "three",
        _ => "several",
    }
}

/// Render a goal's natural-language prose from (aspect, tier) entries.
///
/// Equal tiers produce the "Assign equal importance to ..." wording; a strict
/// order produces "Assign primary importance to X, followed by Y, and then Z."
/// Mixed goals group equal tiers with "and" inside the ordered wording.
pub fn render_goal(entries: &[(Aspect, u32)]) -> Result<UserGoal> {
    if entries.is_empty() {
        return Err(Error::Goal("goal has no entries".into()));
    }
    for (i, (aspect, tier)) in entries.iter().enumerate() {
        if *tier == 0 {
            return Err(Error::Goal("tiers start at 1".into()));
        }
        if entries[..i].iter().any(|(a, _)| a == aspect) {
            return Err(Error::Goal(format!("duplicate aspect {}", aspect.name())));
        }
    }
    let max_tier = entries.iter().map(|(_, t)| *t).max().unwrap();
    for t in 1..=max_tier {
        if !entries.iter().any(|(_, tier)| *tier == t) {
            return Err(Error::Goal(format!(
                "tiers must be contiguous from 1; tier {t} is missing"
            )));
        }
    }

    let prose = if max_tier == 1 && entries.len() > 1 {
        let names: Vec<&str> = entries.iter().map(|(a, _)| a.goal_name()).collect();
        format!(
            "Assign equal importance to {} aspects: {}.",
            count_word(entries.len()),
            join_names(&names)
        )
    } else {
        let mut groups: Vec<String> = Vec::new();
        for t in 1..=max_tier {
            let names: Vec<&str> = entries
                .iter()
                .filter(|(_, tier)| *tier == t)
                .map(|(a, _)| a.short_goal_name())
                .collect();
            groups.push(join_names(&names));
        }
        let mut prose = format!("Assign primary importance to {}", groups[0]);
        if groups.len() >= 2 {
            prose.push_str(&format!(", followed by {}", groups[1]));
        }
        if groups.len() >= 3 {
            prose.push_str(&format!(", and then {}", groups[2]));
        }
        prose.push('.');
        prose
    };

    Ok(UserGoal {
        entries: entries.to_vec(),
        prose,
    })
}

/// Parse a goal expression like `F=P=C`, `F>P>C` or `P>F=C`.
///
/// `>` separates priority tiers (highest first); `=` joins aspects within a
/// tier.
pub fn parse_goal(expr: &str) -> Result<UserGoal> {
    let mut entries = Vec::new();
    for (tier_idx, group) in expr.split('>').enumerate() {
        let group = group.trim();
        if group.is_empty() {
            return Err(Error::Goal(format!("empty tier in goal expression '{expr}'")));
        }
        for part in group.split('=') {
            let part = part.trim();
            let mut chars = part.chars();
            let (letter, rest) = (chars.next(), chars.next());
            match (letter, rest) {
                (Some(c), None) => entries.push((Aspect::from_letter(c)?, tier_idx as u32 + 1)),
                _ => {
                    return Err(Error::Goal(format!(
                        "expected a single aspect letter (F, P or C), got '{part}'"
                    )))
                }
            }
        }
    }
    render_goal(&entries)
}

/// A textual recommendation explanation at some refinement round.
///
/// Round 0 is the initial explanation produced by the base recommender model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub round: u32,
}

impl Explanation {
    pub fn new(text: impl Into<String>, round: u32) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Domain("explanation text is empty".into()));
        }
        Ok(Explanation { text, round })
    }

    /// Whitespace-token count; punctuation stays attached to its word.
    pub fn word_count(&self) -> usize {
        count_words(&self.text)
    }
}

/// Count whitespace-separated tokens.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Cap `text` at `max_words` whitespace tokens.
///
/// Text already within the limit is returned verbatim; otherwise the first
/// `max_words` tokens are joined with single spaces. Idempotent.
pub fn enforce_word_limit(text: &str, max_words: usize) -> Result<String> {
    if max_words == 0 {
        return Err(Error::Domain("max_words must be at least 1".into()));
    }
    if text.trim().is_empty() {
        return Err(Error::Domain("cannot enforce word limit on empty text".into()));
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.len() <= max_words {
        Ok(text.to_string())
    } else {
        Ok(words[..max_words].join(" "))
    }
}

/// A single user-item review event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub review: String,
    pub timestamp: i64,
}

/// One (user, item) pair to refine: the unit of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub user_id: String,
    pub item_id: String,
    pub predicted_rating: f64,
    pub initial_explanation: Explanation,
    pub item_title: String,
    pub item_category: String,
}

impl Sample {
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        predicted_rating: f64,
        initial_explanation: Explanation,
        item_title: impl Into<String>,
        item_category: impl Into<String>,
    ) -> Result<Self> {
        if initial_explanation.round != 0 {
            return Err(Error::Domain(format!(
                "initial explanation must be round 0, got {}",
                initial_explanation.round
            )));
        }
        if !(1.0..=5.0).contains(&predicted_rating) {
            return Err(Error::Domain(format!(
                "predicted rating {predicted_rating} outside [1, 5]"
            )));
        }
        Ok(Sample {
            user_id: user_id.into(),
            item_id: item_id.into(),
            predicted_rating,
            initial_explanation,
            item_title: item_title.into(),
            item_category: item_category.into(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReflectionLevel {
    Strategic,
    Content,
}

/// Feedback produced by one of the two reflectors for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reflection {
    pub level: ReflectionLevel,
    pub round: u32,
    pub text: String,
}

impl Reflection {
    pub fn new(level: ReflectionLevel, round: u32, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Domain("reflection text is empty".into()));
        }
        if round == 0 {
            return Err(Error::Domain("reflection round must be >= 1".into()));
        }
        Ok(Reflection { level, round, text })
    }
}

/// Everything one refinement round produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub explanation: Explanation,
    pub aspect: Aspect,
    pub instruction: String,
    pub strategic_reflection: Reflection,
    pub content_reflection: Reflection,
}

impl RefinementRecord {
    pub fn new(
        explanation: Explanation,
        aspect: Aspect,
        instruction: impl Into<String>,
        strategic_reflection: Reflection,
        content_reflection: Reflection,
    ) -> Result<Self> {
        if strategic_reflection.level != ReflectionLevel::Strategic {
            return Err(Error::Domain("strategic reflection has wrong level".into()));
        }
        if content_reflection.level != ReflectionLevel::Content {
            return Err(Error::Domain("content reflection has wrong level".into()));
        }
        if explanation.round != strategic_reflection.round
            || explanation.round != content_reflection.round
        {
            return Err(Error::Domain(format!(
                "record rounds disagree: explanation {}, strategic {}, content {}",
                explanation.round, strategic_reflection.round, content_reflection.round
            )));
        }
        Ok(RefinementRecord {
            explanation,
            aspect,
            instruction: instruction.into(),
            strategic_reflection,
            content_reflection,
        })
    }

    pub fn round(&self) -> u32 {
        self.explanation.round
    }
}

/// The ordered sequence of aspects refined so far.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trajectory(pub Vec<Aspect>);

impl Trajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Bracketed letter notation, e.g. `[F, P, C]`.
    pub fn as_letters(&self) -> String {
        let letters: Vec<String> = self.0.iter().map(|a| a.letter().to_string()).collect();
        format!("[{}]", letters.join(", "))
    }
}

impl fmt::Display for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_letters())
    }
}

pub const SIGNAL_NAMES: [&str; 3] = ["entail_flag", "feature_count", "coherence_flag"];

/// External per-sample quality reference for one aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySignal {
    pub aspect: Aspect,
    pub name: String,
    pub value: f64,
    pub description: String,
}

impl QualitySignal {
    pub fn new(
        aspect: Aspect,
        name: impl Into<String>,
        value: f64,
        description: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        if !SIGNAL_NAMES.contains(&name.as_str()) {
            return Err(Error::Domain(format!("unknown quality signal '{name}'")));
        }
        if value < 0.0 {
            return Err(Error::Domain(format!(
                "quality signal {name} must be non-negative, got {value}"
            )));
        }
        if name.ends_with("_flag") && value != 0.0 && value != 1.0 {
            return Err(Error::Domain(format!(
                "flag signal {name} must be 0 or 1, got {value}"
            )));
        }
        Ok(QualitySignal {
            aspect,
            name,
            value,
            description: description.into(),
        })
    }

    /// `name=value` form used inside reflector prompts.
    pub fn render(&self) -> String {
        format!("{}={}", self.name, self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    PlannerFinish,
    MaxRounds,
}

/// The outcome of one full refinement episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub sample: Sample,
    pub final_explanation: Explanation,
    pub trajectory: Trajectory,
    pub rounds_used: usize,
    pub stop_reason: StopReason,
    pub records: Vec<RefinementRecord>,
    /// Per-round quality signals, parallel to `records`.
    pub signals: Vec<QualitySignal>,
}

impl EpisodeResult {
    /// Check the structural invariants against the round cap `max_rounds`.
    pub fn validate(&self, max_rounds: u32) -> Result<()> {
        if self.rounds_used != self.records.len() || self.rounds_used != self.trajectory.len() {
            return Err(Error::Domain(format!(
                "episode bookkeeping disagrees: rounds_used {}, records {}, trajectory {}",
                self.rounds_used,
                self.records.len(),
                self.trajectory.len()
            )));
        }
        if self.signals.len() != self.records.len() {
            return Err(Error::Domain("one quality signal per record required".into()));
        }
        if self.stop_reason == StopReason::MaxRounds && self.rounds_used != max_rounds as usize {
            return Err(Error::Domain(format!(
                "MaxRounds stop with {} rounds used (cap {max_rounds})",
                self.rounds_used
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aspect_code_name_bijection() {
        for code in 1..=3 {
            let aspect = Aspect::from_code(code).unwrap();
            assert_eq!(aspect.code() as i64, code);
            assert_eq!(Aspect::from_name(aspect.name()).unwrap(), aspect);
            assert_eq!(Aspect::from_letter(aspect.letter()).unwrap(), aspect);
        }
        assert!(Aspect::from_code(0).is_err());
        assert!(Aspect::from_code(4).is_err());
    }

    #[test]
    fn planner_decision_codes() {
        assert_eq!(PlannerDecision::from_code(0).unwrap(), PlannerDecision::Finish);
        assert_eq!(
            PlannerDecision::from_code(3).unwrap(),
            PlannerDecision::Refine(Aspect::SentimentCoherence)
        );
        assert!(PlannerDecision::from_code(9).is_err());
        assert!(PlannerDecision::from_code(-1).is_err());
    }

    #[test]
    fn equal_tier_goal_prose() {
        let goal = render_goal(&[
            (Aspect::Factuality, 1),
            (Aspect::Personalization, 1),
            (Aspect::SentimentCoherence, 1),
        ])
        .unwrap();
        assert_eq!(
            goal.prose,
            "Assign equal importance to three aspects: factuality, personalization and sentiment coherence."
        );
    }

    #[test]
    fn strict_order_goal_prose() {
        let goal = render_goal(&[
            (Aspect::Factuality, 1),
            (Aspect::Personalization, 2),
            (Aspect::SentimentCoherence, 3),
        ])
        .unwrap();
        assert_eq!(
            goal.prose,
            "Assign primary importance to factuality, followed by personalization, and then coherence."
        );
    }

    #[test]
    fn mixed_goal_groups_equal_tiers() {
        let goal = render_goal(&[
            (Aspect::Personalization, 1),
            (Aspect::Factuality, 2),
            (Aspect::SentimentCoherence, 2),
        ])
        .unwrap();
        assert_eq!(
            goal.prose,
            "Assign primary importance to personalization, followed by factuality and coherence."
        );
    }

    #[test]
    fn goal_rejects_duplicates_and_gaps() {
        assert!(render_goal(&[(Aspect::Factuality, 1), (Aspect::Factuality, 2)]).is_err());
        assert!(render_goal(&[(Aspect::Factuality, 1), (Aspect::Personalization, 3)]).is_err());
        assert!(render_goal(&[(Aspect::Factuality, 2)]).is_err());
        assert!(render_goal(&[]).is_err());
    }

    #[test]
    fn goal_expressions_parse_to_paper_wordings() {
        assert_eq!(
            parse_goal("F=P=C").unwrap().prose,
            "Assign equal importance to three aspects: factuality, personalization and sentiment coherence."
        );
        assert_eq!(
            parse_goal("F>P>C").unwrap().prose,
            "Assign primary importance to factuality, followed by personalization, and then coherence."
        );
        assert_eq!(
            parse_goal("P>F>C").unwrap().prose,
            "Assign primary importance to personalization, followed by factuality, and then coherence."
        );
        assert!(parse_goal("F=F").is_err());
        assert!(parse_goal("X>Y").is_err());
        assert!(parse_goal("").is_err());
    }

    #[test]
    fn word_limit_passthrough_and_truncation() {
        assert_eq!(enforce_word_limit("great pizza", 20).unwrap(), "great pizza");
        // 22 words in, 20 out.
        let long: Vec<String> = (0..22).map(|i| format!("w{i}")).collect();
        let truncated = enforce_word_limit(&long.join(" "), 20).unwrap();
        assert_eq!(count_words(&truncated), 20);
        assert_eq!(truncated, long[..20].join(" "));
        assert!(enforce_word_limit("", 20).is_err());
        assert!(enforce_word_limit("   ", 20).is_err());
        assert!(enforce_word_limit("a", 0).is_err());
    }

    #[test]
    fn word_limit_preserves_conforming_whitespace() {
        assert_eq!(enforce_word_limit("a  b\tc", 5).unwrap(), "a  b\tc");
    }

    #[test]
    fn sample_requires_round_zero() {
        let e1 = Explanation::new("text", 1).unwrap();
        assert!(Sample::new("u", "i", 4.0, e1, "t", "c").is_err());
        let e0 = Explanation::new("text", 0).unwrap();
        assert!(Sample::new("u", "i", 5.5, e0, "t", "c").is_err());
    }

    #[test]
    fn quality_signal_validation() {
        assert!(QualitySignal::new(Aspect::Factuality, "entail_flag", 1.0, "d").is_ok());
        assert!(QualitySignal::new(Aspect::Factuality, "entail_flag", 0.5, "d").is_err());
        assert!(QualitySignal::new(Aspect::Personalization, "feature_count", 7.0, "d").is_ok());
        assert!(QualitySignal::new(Aspect::Personalization, "bogus", 1.0, "d").is_err());
        assert!(QualitySignal::new(Aspect::Personalization, "feature_count", -1.0, "d").is_err());
    }

    #[test]
    fn signal_render_form() {
        let s = QualitySignal::new(Aspect::Factuality, "entail_flag", 0.0, "d").unwrap();
        assert_eq!(s.render(), "entail_flag=0");
        let c = QualitySignal::new(Aspect::Personalization, "feature_count", 2.0, "d").unwrap();
        assert_eq!(c.render(), "feature_count=2");
    }

    #[test]
    fn trajectory_letters() {
        let t = Trajectory(vec![
            Aspect::Factuality,
            Aspect::Personalization,
            Aspect::SentimentCoherence,
        ]);
        assert_eq!(t.as_letters(), "[F, P, C]");
        assert_eq!(Trajectory::default().as_letters(), "[]");
    }

    #[test]
    fn record_round_consistency() {
        let e = Explanation::new("x", 2).unwrap();
        let s = Reflection::new(ReflectionLevel::Strategic, 2, "s").unwrap();
        let c = Reflection::new(ReflectionLevel::Content, 2, "c").unwrap();
        assert!(RefinementRecord::new(e.clone(), Aspect::Factuality, "i", s.clone(), c.clone()).is_ok());
        let c_bad = Reflection::new(ReflectionLevel::Content, 3, "c").unwrap();
        assert!(RefinementRecord::new(e.clone(), Aspect::Factuality, "i", s.clone(), c_bad).is_err());
        let swapped = RefinementRecord::new(e, Aspect::Factuality, "i", c, s);
        assert!(swapped.is_err());
    }
}
