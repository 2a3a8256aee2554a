//! Episode execution: the plan → refine → reflect loop per sample, and
//! batched runs across samples with per-episode failure isolation.
//!
//! Within an episode every call is strictly sequential; across episodes up to
//! `parallelism` run concurrently, sharing the backend's rate limits.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::agents::{AgentConfig, Agents, PromptCatalog};
use crate::aspects::{
    quality_signal, render_instruction, AcquisitionConfig, AspectCatalog, BackgroundMemory,
};
use crate::backend::{ChatBackend, ScopedBackend};
use crate::domain::{
    EpisodeResult, PlannerDecision, QualitySignal, RefinementRecord, Sample, StopReason,
    Trajectory, UserGoal,
};
use crate::error::{Error, Result};
use crate::memory::RefinementMemory;
use crate::metrics::JudgeConfig;

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    /// Maximum refinement rounds per sample (N).
    pub max_rounds: u32,
    /// Word cap for refined explanations.
    pub max_length: usize,
    pub acquisition: AcquisitionConfig,
    pub agent: AgentConfig,
    pub judge: JudgeConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_rounds: 6,
            max_length: 20,
            acquisition: AcquisitionConfig::default(),
            agent: AgentConfig::default(),
            judge: JudgeConfig::default(),
        }
    }
}

/// Shared, read-only episode surroundings.
pub struct EpisodeContext<'a> {
    pub backend: &'a dyn ChatBackend,
    pub prompts: &'a PromptCatalog,
    pub aspects: &'a AspectCatalog,
    pub features: &'a BTreeSet<String>,
}

/// An aborted episode: the error plus whatever rounds completed.
#[derive(Debug)]
pub struct EpisodeFailure {
    pub user_id: String,
    pub item_id: String,
    pub error: String,
    pub records: Vec<RefinementRecord>,
    pub signals: Vec<QualitySignal>,
}

impl std::fmt::Display for EpisodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "episode {}:{} failed after {} round(s): {}",
            self.user_id,
            self.item_id,
            self.records.len(),
            self.error
        )
    }
}

#[derive(Debug)]
pub enum EpisodeOutcome {
    Completed(EpisodeResult),
    Failed(EpisodeFailure),
}

impl EpisodeOutcome {
    pub fn as_completed(&self) -> Option<&EpisodeResult> {
        match self {
            EpisodeOutcome::Completed(result) => Some(result),
            EpisodeOutcome::Failed(_) => None,
        }
    }
}

fn run_rounds(
    sample: &Sample,
    background: &BackgroundMemory,
    goal: &UserGoal,
    ctx: &EpisodeContext<'_>,
    config: &EpisodeConfig,
    memory: &mut RefinementMemory,
    signals: &mut Vec<QualitySignal>,
    current: &mut crate::domain::Explanation,
) -> Result<StopReason> {
    let agents = Agents::new(ctx.backend, ctx.prompts, config.agent.clone());
    for round in 1..=config.max_rounds {
        let (last_strategic, last_content) = match memory.last() {
            Some(record) => (
                Some(&record.strategic_reflection),
                Some(&record.content_reflection),
            ),
            None => (None, None),
        };
        let decision = agents.plan(
            current,
            goal,
            &memory.trajectory(),
            last_strategic,
            last_content,
            config.max_rounds,
        )?;
        let aspect = match decision {
            PlannerDecision::Finish => return Ok(StopReason::PlannerFinish),
            PlannerDecision::Refine(aspect) => aspect,
        };
        let instruction = render_instruction(
            ctx.aspects,
            aspect,
            background,
            sample,
            &config.acquisition,
            Some(ctx.backend),
        )?;
        let prior_reflections = memory.content_reflections_for(aspect);
        let summary = agents.summarize_reflections(aspect, &prior_reflections, round)?;
        let refined = agents.refine(current, aspect, &instruction, &summary, config.max_length)?;
        let strategic =
            agents.reflect_strategic(goal, memory, round, aspect, &refined, &instruction)?;
        let signal = quality_signal(
            aspect,
            &refined,
            background,
            sample,
            ctx.features,
            config.acquisition.preference_threshold,
            ctx.backend,
            &config.judge,
        )?;
        let content = agents.reflect_content(&refined, aspect, &instruction, &signal)?;
        memory.append(RefinementRecord::new(
            refined.clone(),
            aspect,
            instruction,
            strategic,
            content,
        )?)?;
        signals.push(signal);
        *current = refined;
    }
    Ok(StopReason::MaxRounds)
}

/// Run one refinement episode.
///
/// Agent or backend errors abort the episode; the failure carries the partial
/// trace for diagnostics.
pub fn run_episode(
    sample: &Sample,
    background: &BackgroundMemory,
    goal: &UserGoal,
    ctx: &EpisodeContext<'_>,
    config: &EpisodeConfig,
) -> std::result::Result<EpisodeResult, EpisodeFailure> {
    let mut memory = RefinementMemory::new();
    let mut signals = Vec::new();
    let mut current = sample.initial_explanation.clone();
    match run_rounds(
        sample,
        background,
        goal,
        ctx,
        config,
        &mut memory,
        &mut signals,
        &mut current,
    ) {
        Ok(stop_reason) => {
            let trajectory = memory.trajectory();
            let rounds_used = memory.len();
            Ok(EpisodeResult {
                sample: sample.clone(),
                final_explanation: current,
                trajectory,
                rounds_used,
                stop_reason,
                records: memory.into_records(),
                signals,
            })
        }
        Err(error) => Err(EpisodeFailure {
            user_id: sample.user_id.clone(),
            item_id: sample.item_id.clone(),
            error: error.to_string(),
            records: memory.into_records(),
            signals,
        }),
    }
}

/// One batch entry: the sample plus its background memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchItem {
    pub sample: Sample,
    pub background: BackgroundMemory,
}

/// Run episodes for every item, up to `parallelism` at a time.
///
/// Results keep the input order; failures are recorded per sample without
/// aborting the batch. Request tags are scoped per sample
/// (`user:item/role#round`) so per-sample scripts stay deterministic under
/// any parallelism.
pub fn run_batch(
    items: &[BatchItem],
    goal: &UserGoal,
    ctx: &EpisodeContext<'_>,
    config: &EpisodeConfig,
    parallelism: usize,
    trace_sink: Option<&Path>,
) -> Result<Vec<EpisodeOutcome>> {
    if parallelism == 0 {
        return Err(Error::Domain("parallelism must be >= 1".into()));
    }
    let slots: Vec<Mutex<Option<EpisodeOutcome>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = parallelism.min(items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= items.len() {
                    break;
                }
                let item = &items[index];
                let scoped = ScopedBackend::new(
                    ctx.backend,
                    format!("{}:{}", item.sample.user_id, item.sample.item_id),
                );
                let scoped_ctx = EpisodeContext {
                    backend: &scoped,
                    prompts: ctx.prompts,
                    aspects: ctx.aspects,
                    features: ctx.features,
                };
                let outcome =
                    match run_episode(&item.sample, &item.background, goal, &scoped_ctx, config) {
                        Ok(result) => EpisodeOutcome::Completed(result),
                        Err(failure) => EpisodeOutcome::Failed(failure),
                    };
                *slots[index].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let outcomes: Vec<EpisodeOutcome> = slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("episode ran"))
        .collect();

    if let Some(dir) = trace_sink {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        for (index, (item, outcome)) in items.iter().zip(&outcomes).enumerate() {
            let document = TraceDocument::from_outcome(item, goal, outcome);
            let path = dir.join(trace_file_name(index, &item.sample));
            let json = serde_json::to_string_pretty(&document)
                .map_err(|e| Error::Parse(format!("trace serialization: {e}")))?;
            std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(outcomes)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn trace_file_name(index: usize, sample: &Sample) -> String {
    format!(
        "{index:04}_{}_{}.json",
        sanitize(&sample.user_id),
        sanitize(&sample.item_id)
    )
}

/// Persisted episode trace, one JSON document per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceDocument {
    pub user_id: String,
    pub item_id: String,
    pub goal: String,
    pub predicted_rating: f64,
    pub initial_explanation: String,
    pub final_explanation: String,
    pub stop_reason: String,
    pub rounds: usize,
    pub records: Vec<TraceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: u32,
    pub aspect: String,
    pub instruction: String,
    pub explanation: String,
    pub strategic_reflection: String,
    pub content_reflection: String,
    pub signal: QualitySignal,
}

impl TraceDocument {
    pub fn from_outcome(item: &BatchItem, goal: &UserGoal, outcome: &EpisodeOutcome) -> Self {
        let records = |records: &[RefinementRecord], signals: &[QualitySignal]| {
            records
                .iter()
                .zip(signals)
                .map(|(record, signal)| TraceRecord {
                    round: record.round(),
                    aspect: record.aspect.name().to_string(),
                    instruction: record.instruction.clone(),
                    explanation: record.explanation.text.clone(),
                    strategic_reflection: record.strategic_reflection.text.clone(),
                    content_reflection: record.content_reflection.text.clone(),
                    signal: signal.clone(),
                })
                .collect()
        };
        match outcome {
            EpisodeOutcome::Completed(result) => TraceDocument {
                user_id: result.sample.user_id.clone(),
                item_id: result.sample.item_id.clone(),
                goal: goal.prose.clone(),
                predicted_rating: result.sample.predicted_rating,
                initial_explanation: result.sample.initial_explanation.text.clone(),
                final_explanation: result.final_explanation.text.clone(),
                stop_reason: match result.stop_reason {
                    StopReason::PlannerFinish => "PlannerFinish".into(),
                    StopReason::MaxRounds => "MaxRounds".into(),
                },
                rounds: result.rounds_used,
                records: records(&result.records, &result.signals),
                error: None,
            },
            EpisodeOutcome::Failed(failure) => TraceDocument {
                user_id: failure.user_id.clone(),
                item_id: failure.item_id.clone(),
                goal: goal.prose.clone(),
                predicted_rating: item.sample.predicted_rating,
                initial_explanation: item.sample.initial_explanation.text.clone(),
                final_explanation: failure
                    .records
                    .last()
                    .map(|r| r.explanation.text.clone())
                    .unwrap_or_else(|| item.sample.initial_explanation.text.clone()),
                stop_reason: "Failed".into(),
                rounds: failure.records.len(),
                records: records(&failure.records, &failure.signals),
                error: Some(failure.error.clone()),
            },
        }
    }

    /// Parse the trajectory back out of a trace.
    pub fn trajectory(&self) -> Result<Trajectory> {
        let aspects = self
            .records
            .iter()
            .map(|r| crate::domain::Aspect::from_name(&r.aspect))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory(aspects))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Script, ScriptedBackend};
    use crate::domain::{render_goal, Aspect, Explanation};

    pub(crate) fn fixture_sample() -> Sample {
        Sample::new(
            "u1",
            "i1",
            4.5,
            Explanation::new("the pasta was great and the service was friendly", 0).unwrap(),
            "Luigi Trattoria",
            "Restaurant",
        )
        .unwrap()
    }

    pub(crate) fn fixture_background() -> BackgroundMemory {
        BackgroundMemory {
            user_id: "u1".into(),
            item_id: "i1".into(),
            item_title: "Luigi Trattoria".into(),
            item_category: "Restaurant".into(),
            item_reviews: vec![
                (5.0, "amazing carbonara and quick service".into()),
                (2.0, "the broth was watery and bland".into()),
            ],
            user_history: vec![("Pasta Palace".into(), 4.0, "loved the rigatoni".into())],
        }
    }

    fn goal() -> UserGoal {
        render_goal(&[
            (Aspect::Factuality, 1),
            (Aspect::Personalization, 1),
            (Aspect::SentimentCoherence, 1),
        ])
        .unwrap()
    }

    /// Script one full round for the given aspect code at round `t`.
    pub(crate) fn script_round(script: &mut Script, t: u32, code: u8, with_summary: bool) {
        script.push(format!("planner#{t}"), format!(r#"{{"aspect": {code}}}"#));
        if with_summary {
            script.push(format!("summarize#{t}"), format!("summary for round {t}"));
        }
        script.push(
            format!("refiner#{t}"),
            format!(r#"{{"explanation": "refined text for round {t}"}}"#),
        );
        script.push(
            format!("strategic#{t}"),
            format!(r#"{{"strategic reflection": "strategy note {t}"}}"#),
        );
        match code {
            1 => script.push("entail", "1"),
            3 => script.push("sentiment", "1"),
            _ => {}
        }
        script.push(
            format!("content#{t}"),
            format!(r#"{{"content reflection": "content note {t}"}}"#),
        );
    }

    fn context<'a>(
        backend: &'a ScriptedBackend,
        prompts: &'a PromptCatalog,
        aspects: &'a AspectCatalog,
        features: &'a BTreeSet<String>,
    ) -> EpisodeContext<'a> {
        EpisodeContext {
            backend,
            prompts,
            aspects,
            features,
        }
    }

    #[test]
    fn episode_follows_planner_until_finish() {
        let mut script = Script::new();
        script_round(&mut script, 1, 1, false);
        script_round(&mut script, 2, 2, false);
        script_round(&mut script, 3, 3, false);
        script.push("planner#4", r#"{"aspect": 0}"#);
        let backend = ScriptedBackend::new(script);
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let ctx = context(&backend, &prompts, &aspects, &features);
        let result = run_episode(
            &fixture_sample(),
            &fixture_background(),
            &goal(),
            &ctx,
            &EpisodeConfig::default(),
        )
        .unwrap();
        assert_eq!(result.trajectory.as_letters(), "[F, P, C]");
        assert_eq!(result.rounds_used, 3);
        assert_eq!(result.stop_reason, StopReason::PlannerFinish);
        assert_eq!(result.final_explanation.text, "refined text for round 3");
        assert_eq!(result.records.len(), 3);
        assert_eq!(result.signals.len(), 3);
        result.validate(6).unwrap();
        for (i, record) in result.records.iter().enumerate() {
            assert_eq!(record.round() as usize, i + 1);
            assert!(!record.instruction.is_empty());
        }
    }

    #[test]
    fn immediate_finish_keeps_initial_explanation() {
        let mut script = Script::new();
        script.push("planner#1", r#"{"aspect": 0}"#);
        let backend = ScriptedBackend::new(script);
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let ctx = context(&backend, &prompts, &aspects, &features);
        let sample = fixture_sample();
        let result = run_episode(
            &sample,
            &fixture_background(),
            &goal(),
            &ctx,
            &EpisodeConfig::default(),
        )
        .unwrap();
        assert_eq!(result.rounds_used, 0);
        assert_eq!(result.final_explanation, sample.initial_explanation);
        assert_eq!(result.stop_reason, StopReason::PlannerFinish);
    }

    #[test]
    fn six_refinements_hit_the_round_cap() {
        let mut script = Script::new();
        for t in 1..=6 {
            // Personalization repeats, so rounds 2+ summarize prior reflections.
            script_round(&mut script, t, 2, t > 1);
        }
        let backend = ScriptedBackend::new(script);
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let ctx = context(&backend, &prompts, &aspects, &features);
        let result = run_episode(
            &fixture_sample(),
            &fixture_background(),
            &goal(),
            &ctx,
            &EpisodeConfig::default(),
        )
        .unwrap();
        assert_eq!(result.rounds_used, 6);
        assert_eq!(result.stop_reason, StopReason::MaxRounds);
        assert_eq!(result.trajectory.as_letters(), "[P, P, P, P, P, P]");
    }

    #[test]
    fn failure_preserves_partial_trace() {
        let mut script = Script::new();
        script_round(&mut script, 1, 1, false);
        // planner#2 missing: the episode aborts in round 2.
        let backend = ScriptedBackend::new(script);
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let ctx = context(&backend, &prompts, &aspects, &features);
        let failure = run_episode(
            &fixture_sample(),
            &fixture_background(),
            &goal(),
            &ctx,
            &EpisodeConfig::default(),
        )
        .unwrap_err();
        assert_eq!(failure.records.len(), 1);
        assert!(failure.error.contains("planner#2"), "{}", failure.error);
    }

    fn batch_items(n: usize) -> Vec<BatchItem> {
        (0..n)
            .map(|i| {
                let mut sample = fixture_sample();
                sample.user_id = format!("u{i}");
                let mut background = fixture_background();
                background.user_id = sample.user_id.clone();
                BatchItem { sample, background }
            })
            .collect()
    }

    fn batch_script(n: usize) -> Script {
        let mut script = Script::new();
        for i in 0..n {
            let scope = format!("u{i}:i1");
            script.push(format!("{scope}/planner#1"), r#"{"aspect": 1}"#);
            script.push(
                format!("{scope}/refiner#1"),
                format!(r#"{{"explanation": "episode {i} refined"}}"#),
            );
            script.push(
                format!("{scope}/strategic#1"),
                r#"{"strategic reflection": "s"}"#,
            );
            script.push(format!("{scope}/entail"), "1");
            script.push(
                format!("{scope}/content#1"),
                r#"{"content reflection": "c"}"#,
            );
            script.push(format!("{scope}/planner#2"), r#"{"aspect": 0}"#);
        }
        script
    }

    #[test]
    fn batch_results_identical_across_parallelism() {
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let items = batch_items(3);
        let run = |parallelism: usize| {
            let backend = ScriptedBackend::new(batch_script(3));
            let ctx = context(&backend, &prompts, &aspects, &features);
            run_batch(&items, &goal(), &ctx, &EpisodeConfig::default(), parallelism, None).unwrap()
        };
        let sequential = run(1);
        let parallel = run(3);
        assert_eq!(sequential.len(), 3);
        for (a, b) in sequential.iter().zip(&parallel) {
            let (a, b) = (a.as_completed().unwrap(), b.as_completed().unwrap());
            assert_eq!(a, b);
        }
        assert_eq!(
            sequential[2].as_completed().unwrap().final_explanation.text,
            "episode 2 refined"
        );
    }

    #[test]
    fn batch_isolates_failures() {
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let items = batch_items(3);
        let mut script = batch_script(3);
        // Re-build without u1's refiner entry so that episode fails.
        script = {
            let mut broken = Script::new();
            let full = serde_json::to_value(&script).unwrap();
            for (tag, responses) in full.as_object().unwrap() {
                if tag == "u1:i1/refiner#1" {
                    continue;
                }
                for response in responses.as_array().unwrap() {
                    broken.push(tag.clone(), response.as_str().unwrap());
                }
            }
            broken
        };
        let backend = ScriptedBackend::new(script);
        let ctx = context(&backend, &prompts, &aspects, &features);
        let outcomes =
            run_batch(&items, &goal(), &ctx, &EpisodeConfig::default(), 1, None).unwrap();
        assert!(outcomes[0].as_completed().is_some());
        assert!(outcomes[1].as_completed().is_none());
        assert!(outcomes[2].as_completed().is_some());
    }

    #[test]
    fn traces_written_one_per_sample() {
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let items = batch_items(2);
        let backend = ScriptedBackend::new(batch_script(2));
        let ctx = context(&backend, &prompts, &aspects, &features);
        let dir = tempfile::tempdir().unwrap();
        run_batch(
            &items,
            &goal(),
            &ctx,
            &EpisodeConfig::default(),
            1,
            Some(dir.path()),
        )
        .unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(names, vec!["0000_u0_i1.json", "0001_u1_i1.json"]);
        let text = std::fs::read_to_string(dir.path().join("0000_u0_i1.json")).unwrap();
        let doc: TraceDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(doc.user_id, "u0");
        assert_eq!(doc.stop_reason, "PlannerFinish");
        assert_eq!(doc.rounds, 1);
        assert_eq!(doc.records[0].signal.name, "entail_flag");
        assert_eq!(doc.trajectory().unwrap().as_letters(), "[F]");
        assert_eq!(doc.initial_explanation, items[0].sample.initial_explanation.text);
    }

    #[test]
    fn empty_batch_is_empty() {
        let prompts = PromptCatalog::builtin();
        let aspects = AspectCatalog::builtin();
        let features = BTreeSet::new();
        let backend = ScriptedBackend::new(Script::new());
        let ctx = context(&backend, &prompts, &aspects, &features);
        let outcomes = run_batch(&[], &goal(), &ctx, &EpisodeConfig::default(), 2, None).unwrap();
        assert!(outcomes.is_empty());
        assert!(run_batch(&[], &goal(), &ctx, &EpisodeConfig::default(), 0, None).is_err());
    }
}
