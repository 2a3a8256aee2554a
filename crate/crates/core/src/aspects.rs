//! The aspect library: per-aspect standards, instruction templates,
//! information-acquisition functions and quality-signal bindings.
//!
//! Acquisition runs against the sample's background memory (item attributes
//! and train-side reviews); quality signals give the content reflector a
//! per-sample number for the refined aspect.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::backend::{ChatBackend, ChatRequest};
use crate::dataset::{Corpus, Split};
use crate::domain::{Aspect, Explanation, QualitySignal, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, JudgeConfig, Sentiment};
use crate::template;

/// Materials describing how to refine one aspect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectMaterials {
    pub aspect: Aspect,
    pub standard: String,
    pub instruction_template: String,
    pub acquisition_functions: Vec<String>,
    pub quality_signal_id: String,
}

/// Placeholder each acquisition function produces.
fn producer_for(placeholder: &str) -> Option<&'static str> {
    match placeholder {
        "Item_Characteristics" => Some("get_item_characteristics"),
        "User_Personalities" => Some("get_user_personalities"),
        "Item_Pros" => Some("get_item_pros"),
        "Item_Cons" => Some("get_item_cons"),
        "User_Preference" => Some("predict_user_preference"),
        _ => None,
    }
}

/// Catalog of aspect materials, shipped with built-in entries and
/// overridable from a TOML file.
#[derive(Debug, Clone)]
pub struct AspectCatalog {
    materials: BTreeMap<u8, AspectMaterials>,
}

impl AspectCatalog {
    pub fn builtin() -> Self {
        let factuality = AspectMaterials {
            aspect: Aspect::Factuality,
            standard: "The aspect to refine is Factuality, and its standard is to Ensure the \
                       explanation is factually correct and can be supported by provided information."
                .into(),
            instruction_template: "Refine the recommendation explanation using the information in \
                                   {Item_Characteristics}, ensuring the explanation is factually correct."
                .into(),
            acquisition_functions: vec!["get_item_characteristics".into()],
            quality_signal_id: "entail_flag".into(),
        };
        let personalization = AspectMaterials {
            aspect: Aspect::Personalization,
            standard: "The aspect to refine is Personalization, and its standard is to Customize \
                       the explanation to reflect specific item characteristics and user personalities."
                .into(),
            instruction_template: "Refine the recommendation explanation using the information in \
                                   {Item_Characteristics} and {User_Personalities}, making the \
                                   explanation content personalized and reflecting user's key concerns."
                .into(),
            acquisition_functions: vec![
                "get_item_characteristics".into(),
                "get_user_personalities".into(),
            ],
            quality_signal_id: "feature_count".into(),
        };
        let coherence = AspectMaterials {
            aspect: Aspect::SentimentCoherence,
            standard: "The aspect to refine is Sentiment Coherence, and its standard is to Ensure \
                       the explanation's sentiment (positive/negative) aligns with the predicted \
                       user preference (like/dislike)."
                .into(),
            instruction_template: "Refine the recommendation explanation using the information in \
                                   {Item_Pros} and {Item_Cons}. To match the explanation's sentiment \
                                   with {User_Preference}, emphasize advantages for positive \
                                   preferences and highlight disadvantages for negative preferences."
                .into(),
            acquisition_functions: vec![
                "get_item_pros".into(),
                "get_item_cons".into(),
                "predict_user_preference".into(),
            ],
            quality_signal_id: "coherence_flag".into(),
        };
        let mut materials = BTreeMap::new();
        for m in [factuality, personalization, coherence] {
            materials.insert(m.aspect.code(), m);
        }
        let catalog = AspectCatalog { materials };
        catalog.validate().expect("builtin catalog is valid");
        catalog
    }

    /// Load overrides from a TOML catalog file; aspects absent from the file
    /// keep their built-in materials.
    pub fn from_file(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct FileEntry {
            aspect: u8,
            standard: String,
            instruction: String,
            functions: Vec<String>,
            quality_signal: String,
        }
        #[derive(Deserialize)]
        struct CatalogFile {
            #[serde(default)]
            aspect: Vec<FileEntry>,
        }
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let parsed: CatalogFile =
            toml::from_str(&text).map_err(|e| Error::Config(format!("aspect catalog: {e}")))?;
        let mut catalog = Self::builtin();
        for entry in parsed.aspect {
            let aspect = Aspect::from_code(entry.aspect as i64)?;
            catalog.materials.insert(
                aspect.code(),
                AspectMaterials {
                    aspect,
                    standard: entry.standard,
                    instruction_template: entry.instruction,
                    acquisition_functions: entry.functions,
                    quality_signal_id: entry.quality_signal,
                },
            );
        }
        catalog.validate()?;
        Ok(catalog)
    }

    /// Every template placeholder must have a listed producer, and the signal
    /// id must be a known quality-signal name.
    fn validate(&self) -> Result<()> {
        for materials in self.materials.values() {
            for placeholder in template::find_placeholders(&materials.instruction_template) {
                match producer_for(&placeholder) {
                    Some(producer)
                        if materials
                            .acquisition_functions
                            .iter()
                            .any(|f| f == producer) => {}
                    Some(producer) => {
                        return Err(Error::Config(format!(
                            "{}: placeholder {{{placeholder}}} needs function {producer}, which is not listed",
                            materials.aspect.name()
                        )))
                    }
                    None => return Err(Error::UnknownPlaceholder(placeholder)),
                }
            }
            if !crate::domain::SIGNAL_NAMES.contains(&materials.quality_signal_id.as_str()) {
                return Err(Error::Config(format!(
                    "{}: unknown quality signal '{}'",
                    materials.aspect.name(),
                    materials.quality_signal_id
                )));
            }
        }
        Ok(())
    }

    pub fn materials_for(&self, aspect: Aspect) -> &AspectMaterials {
        &self.materials[&aspect.code()]
    }
}

impl Default for AspectCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Per-sample background: item attributes plus train-side reviews. Never
/// contains the held-out test review of the target (user, item) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMemory {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub item_category: String,
    /// (rating, review) for the item, chronological (oldest first).
    pub item_reviews: Vec<(f64, String)>,
    /// (item title, rating, review) for the user, chronological.
    pub user_history: Vec<(String, f64, String)>,
}

impl BackgroundMemory {
    /// Assemble the background from the train side of a split.
    pub fn from_split(corpus: &Corpus, split: &Split, user_id: &str, item_id: &str) -> Result<Self> {
        let info = corpus
            .items
            .get(item_id)
            .ok_or_else(|| Error::Domain(format!("unknown item '{item_id}'")))?;
        let mut item_interactions: Vec<&crate::domain::Interaction> = split
            .train
            .iter()
            .filter(|i| i.item_id == item_id)
            .collect();
        item_interactions.sort_by_key(|i| i.timestamp);
        let mut user_interactions: Vec<&crate::domain::Interaction> = split
            .train
            .iter()
            .filter(|i| i.user_id == user_id)
            .collect();
        user_interactions.sort_by_key(|i| i.timestamp);
        Ok(BackgroundMemory {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            item_title: info.title.clone(),
            item_category: info.category.clone(),
            item_reviews: item_interactions
                .iter()
                .map(|i| (i.rating, i.review.clone()))
                .collect(),
            user_history: user_interactions
                .iter()
                .map(|i| {
                    let title = corpus
                        .items
                        .get(&i.item_id)
                        .map(|info| info.title.clone())
                        .unwrap_or_else(|| i.item_id.clone());
                    (title, i.rating, i.review.clone())
                })
                .collect(),
        })
    }
}

/// Knobs for the acquisition functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// Character budget for the item-characteristics rendering.
    pub characteristics_budget: usize,
    /// Character budget for the user-personalities rendering.
    pub personalities_budget: usize,
    /// Cap on pros/cons snippets.
    pub pros_cons_snippets: usize,
    /// Summarize pros/cons with the backend instead of raw snippets.
    pub summarize_pros_cons: bool,
    /// Predicted ratings at or above this read as "like".
    pub preference_threshold: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            characteristics_budget: 1500,
            personalities_budget: 1000,
            pros_cons_snippets: 5,
            summarize_pros_cons: false,
            preference_threshold: 3.0,
        }
    }
}

fn push_within_budget(out: &mut String, line: &str, budget: usize) -> bool {
    let candidate_len = out.chars().count() + 1 + line.chars().count();
    if candidate_len > budget {
        return false;
    }
    out.push('\n');
    out.push_str(line);
    true
}

/// `Title: ...; Category: ...; Reviews:` followed by the newest item reviews,
/// each prefixed with its star rating, truncated at review boundaries.
pub fn get_item_characteristics(memory: &BackgroundMemory, budget_chars: usize) -> String {
    let header = format!(
        "Title: {}; Category: {}; Reviews:",
        memory.item_title, memory.item_category
    );
    if memory.item_reviews.is_empty() {
        return format!("{header} (none)");
    }
    let mut out = header;
    for (rating, review) in memory.item_reviews.iter().rev() {
        if !push_within_budget(&mut out, &format!("({rating}) {review}"), budget_chars) {
            break;
        }
    }
    out
}

/// The user's most recent train reviews as `(title, rating): review`, newest
/// first and budget-truncated, plus the mean train rating to one decimal.
pub fn get_user_personalities(memory: &BackgroundMemory, budget_chars: usize) -> String {
    if memory.user_history.is_empty() {
        return "(no prior reviews)".into();
    }
    let mean: f64 = memory.user_history.iter().map(|(_, r, _)| *r).sum::<f64>()
        / memory.user_history.len() as f64;
    let mean_line = format!("mean rating: {mean:.1}");
    let budget = budget_chars.saturating_sub(mean_line.chars().count() + 1);
    let mut out = String::from("Recent reviews by this user:");
    for (title, rating, review) in memory.user_history.iter().rev() {
        if !push_within_budget(&mut out, &format!("({title}, {rating}): {review}"), budget) {
            break;
        }
    }
    format!("{out}\n{mean_line}")
}

fn snippets(memory: &BackgroundMemory, max: usize, keep: impl Fn(f64) -> bool) -> Vec<&str> {
    memory
        .item_reviews
        .iter()
        .rev()
        .filter(|(rating, _)| keep(*rating))
        .take(max)
        .map(|(_, review)| review.as_str())
        .collect()
}

fn summarize_snippets(
    backend: &dyn ChatBackend,
    kind: &str,
    joined: &str,
) -> Result<String> {
    let request = ChatRequest::new(
        "You summarize customer review snippets.",
        format!("Summarize the following {kind} mentioned in reviews of one item as a short comma-separated phrase list:\n{joined}"),
        0.0,
        128,
        format!("summarize_{kind}"),
    )?;
    let response = backend.complete(&request)?;
    if response.text.trim().is_empty() {
        return Err(Error::Backend(format!("empty {kind} summary")));
    }
    Ok(response.text.trim().to_string())
}

fn pros_or_cons(
    memory: &BackgroundMemory,
    config: &AcquisitionConfig,
    backend: Option<&dyn ChatBackend>,
    kind: &str,
    keep: impl Fn(f64) -> bool,
) -> Result<String> {
    let snippets = snippets(memory, config.pros_cons_snippets, keep);
    if snippets.is_empty() {
        return Ok("(none observed)".into());
    }
    let joined = snippets.join("; ");
    if config.summarize_pros_cons {
        let backend = backend.ok_or_else(|| {
            Error::Backend("pros/cons summarization enabled but no backend provided".into())
        })?;
        summarize_snippets(backend, kind, &joined)
    } else {
        Ok(joined)
    }
}

/// Snippets from item reviews rated >= 4 (optionally backend-summarized).
pub fn get_item_pros(
    memory: &BackgroundMemory,
    config: &AcquisitionConfig,
    backend: Option<&dyn ChatBackend>,
) -> Result<String> {
    pros_or_cons(memory, config, backend, "pros", |rating| rating >= 4.0)
}

/// Snippets from item reviews rated <= 2 (optionally backend-summarized).
pub fn get_item_cons(
    memory: &BackgroundMemory,
    config: &AcquisitionConfig,
    backend: Option<&dyn ChatBackend>,
) -> Result<String> {
    pros_or_cons(memory, config, backend, "cons", |rating| rating <= 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preference {
    Positive,
    Negative,
}

impl Preference {
    pub fn word(self) -> &'static str {
        match self {
            Preference::Positive => "like",
            Preference::Negative => "dislike",
        }
    }

    fn sentiment(self) -> Sentiment {
        match self {
            Preference::Positive => Sentiment::Positive,
            Preference::Negative => Sentiment::Negative,
        }
    }
}

/// Positive iff the predicted rating is at or above the threshold.
pub fn predict_user_preference(sample: &Sample, positive_threshold: f64) -> Preference {
    if sample.predicted_rating >= positive_threshold {
        Preference::Positive
    } else {
        Preference::Negative
    }
}

fn render_preference(sample: &Sample, threshold: f64) -> String {
    let preference = predict_user_preference(sample, threshold);
    format!(
        "{} (predicted rating: {})",
        preference.word(),
        sample.predicted_rating
    )
}

/// Fill the aspect's instruction template from the background memory: the
/// `I_a` string handed to the refiner and logged in memory.
pub fn render_instruction(
    catalog: &AspectCatalog,
    aspect: Aspect,
    memory: &BackgroundMemory,
    sample: &Sample,
    config: &AcquisitionConfig,
    backend: Option<&dyn ChatBackend>,
) -> Result<String> {
    let materials = catalog.materials_for(aspect);
    let mut values: Vec<(String, String)> = Vec::new();
    for placeholder in template::find_placeholders(&materials.instruction_template) {
        let value = match placeholder.as_str() {
            "Item_Characteristics" => {
                get_item_characteristics(memory, config.characteristics_budget)
            }
            "User_Personalities" => get_user_personalities(memory, config.personalities_budget),
            "Item_Pros" => get_item_pros(memory, config, backend)?,
            "Item_Cons" => get_item_cons(memory, config, backend)?,
            "User_Preference" => render_preference(sample, config.preference_threshold),
            _ => return Err(Error::UnknownPlaceholder(placeholder)),
        };
        values.push((placeholder, value));
    }
    let substitutions: Vec<(&str, &str)> = values
        .iter()
        .map(|(k, v)| (k.as_str(), v.as_str()))
        .collect();
    template::substitute(&materials.instruction_template, &substitutions)
}

/// Compute the external quality signal for one refined explanation.
///
/// Factuality uses the entailment judge, Personalization counts distinct
/// corpus features, Sentiment Coherence compares judged sentiment against the
/// predicted preference.
pub fn quality_signal(
    aspect: Aspect,
    explanation: &Explanation,
    memory: &BackgroundMemory,
    sample: &Sample,
    features: &BTreeSet<String>,
    preference_threshold: f64,
    backend: &dyn ChatBackend,
    judge: &JudgeConfig,
) -> Result<QualitySignal> {
    match aspect {
        Aspect::Factuality => {
            let flag = metrics::judge_entailment(backend, &explanation.text, &memory.item_reviews, judge)?;
            QualitySignal::new(
                aspect,
                "entail_flag",
                flag as f64,
                "1 if the explanation is entailed by existing item reviews, else 0",
            )
        }
        Aspect::Personalization => {
            let count = metrics::count_features(&explanation.text, features);
            QualitySignal::new(
                aspect,
                "feature_count",
                count as f64,
                "number of distinct corpus features mentioned in the explanation",
            )
        }
        Aspect::SentimentCoherence => {
            let sentiment = metrics::classify_sentiment(backend, &explanation.text, judge)?;
            let preference = predict_user_preference(sample, preference_threshold);
            let coherent = sentiment == preference.sentiment();
            QualitySignal::new(
                aspect,
                "coherence_flag",
                coherent as u8 as f64,
                "1 if explanation sentiment matches the predicted user preference, else 0",
            )
        }
    }
}
