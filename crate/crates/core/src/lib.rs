//! Multi-agent refinement of recommendation explanations.
//!
//! A planner chooses which user-centric aspect of an explanation to improve
//! each round (factuality, personalization or sentiment coherence), a refiner
//! rewrites the text under aspect-specific instructions, and two reflectors
//! feed strategy- and content-level feedback into later rounds. Episodes stop
//! when the planner is satisfied or a round cap is reached. Quality is scored
//! with four corpus-level metrics: entailment ratio, feature coverage ratio,
//! n-gram entropy and sentiment-coherence ratio.

pub mod agents;
pub mod aspects;
pub mod backend;
pub mod config;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod orchestrator;
pub mod stats;
pub(crate) mod template;

pub use agents::{AgentConfig, Agents, PromptCatalog};
pub use aspects::{AcquisitionConfig, AspectCatalog, AspectMaterials, BackgroundMemory};
pub use backend::{
    ChatBackend, ChatRequest, ChatResponse, HttpBackend, HttpBackendConfig, Script,
    ScriptedBackend,
};
pub use config::{load_config, Config};
pub use dataset::{Corpus, SampleSkeleton, Split};
pub use domain::{
    enforce_word_limit, parse_goal, render_goal, Aspect, EpisodeResult, Explanation, Interaction,
    PlannerDecision, QualitySignal, RefinementRecord, Reflection, ReflectionLevel, Sample,
    StopReason, Trajectory, UserGoal,
};
pub use error::{Error, Result};
pub use memory::RefinementMemory;
pub use metrics::{EvalConfig, EvalSample, EvaluationReport, JudgeConfig, Sentiment};
pub use orchestrator::{
    run_batch, run_episode, BatchItem, EpisodeConfig, EpisodeContext, EpisodeOutcome,
    TraceDocument,
};
pub use stats::{trajectory_stats, EpisodeSummary, TrajectoryStats};
