//! Corpus-level explanation quality metrics: Entail, FCR, ENTR and CoR.
//!
//! FCR and ENTR are local, deterministic computations. Entail and sentiment
//! classification are delegated to an LLM judge through the backend trait, so
//! tests can script them.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

use crate::backend::{call_with_repair_by, ChatBackend, ChatRequest};
use crate::dataset::Corpus;
use crate::domain::{Aspect, EpisodeResult};
use crate::error::{Error, Result};

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|token| token.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|token| !token.is_empty())
        .collect()
}

/// Count distinct features appearing in `text`.
///
/// Matching is whole-token and case-insensitive; multiword features match as
/// contiguous token sequences.
pub fn count_features(text: &str, features: &BTreeSet<String>) -> usize {
    let tokens = tokenize(text);
    features
        .iter()
        .filter(|feature| feature_present(&tokens, feature))
        .count()
}

fn feature_present(tokens: &[String], feature: &str) -> bool {
    let feature_tokens = tokenize(feature);
    if feature_tokens.is_empty() || tokens.len() < feature_tokens.len() {
        return false;
    }
    tokens
        .windows(feature_tokens.len())
        .any(|window| window == feature_tokens.as_slice())
}

/// Feature Coverage Ratio: distinct features mentioned anywhere in the
/// explanations, divided by the feature-set size.
pub fn fcr<S: AsRef<str>>(explanations: &[S], feature_set: &BTreeSet<String>) -> Result<f64> {
    if feature_set.is_empty() {
        return Err(Error::Metric("feature set is empty".into()));
    }
    let mut covered: BTreeSet<&String> = BTreeSet::new();
    for text in explanations {
        let tokens = tokenize(text.as_ref());
        for feature in feature_set {
            if !covered.contains(feature) && feature_present(&tokens, feature) {
                covered.insert(feature);
            }
        }
    }
    Ok(covered.len() as f64 / feature_set.len() as f64)
}

/// Shannon entropy (base 2) of the pooled n-gram distribution across `texts`.
///
/// Returns 0 when no text yields an n-gram (degenerate case).
pub fn ngram_entropy<S: AsRef<str>>(texts: &[S], n: usize) -> Result<f64> {
    if !(1..=3).contains(&n) {
        return Err(Error::Metric(format!("n must be 1, 2 or 3, got {n}")));
    }
    let mut counts: HashMap<Vec<String>, u64> = HashMap::new();
    let mut total = 0u64;
    for text in texts {
        let tokens = tokenize(text.as_ref());
        if tokens.len() < n {
            continue;
        }
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    let total = total as f64;
    let mut entropy = 0.0;
    for count in counts.values() {
        let p = *count as f64 / total;
        entropy -= p * p.log2();
    }
    // Single-symbol distributions yield -0.0; normalize.
    Ok(if entropy == 0.0 { 0.0 } else { entropy })
}

/// ENTR: geometric mean of the unigram, bigram and trigram entropies.
pub fn entr<S: AsRef<str>>(texts: &[S]) -> Result<f64> {
    let h1 = ngram_entropy(texts, 1)?;
    let h2 = ngram_entropy(texts, 2)?;
    let h3 = ngram_entropy(texts, 3)?;
    let product = h1 * h2 * h3;
    let value = product.cbrt();
    Ok(if value == 0.0 { 0.0 } else { value })
}

/// Mean of binary entailment flags.
pub fn entail_ratio(flags: &[u8]) -> Result<f64> {
    if flags.is_empty() {
        return Err(Error::Metric("no entailment flags to aggregate".into()));
    }
    if let Some(bad) = flags.iter().find(|f| **f > 1) {
        return Err(Error::Metric(format!("entailment flag must be 0 or 1, got {bad}")));
    }
    Ok(flags.iter().map(|f| *f as f64).sum::<f64>() / flags.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sentiment {
    Positive,
    Negative,
}

impl Sentiment {
    pub fn value(self) -> i8 {
        match self {
            Sentiment::Positive => 1,
            Sentiment::Negative => -1,
        }
    }

    pub fn from_value(value: i64) -> Result<Self> {
        match value {
            1 => Ok(Sentiment::Positive),
            -1 => Ok(Sentiment::Negative),
            other => Err(Error::Parse(format!(
                "sentiment must be 1 or -1, got {other}"
            ))),
        }
    }
}

/// Binary user-preference label derived from the predicted rating.
pub fn preference_label(predicted_rating: f64, threshold: f64) -> Sentiment {
    if predicted_rating >= threshold {
        Sentiment::Positive
    } else {
        Sentiment::Negative
    }
}

/// Coherence Ratio: fraction of samples whose explanation sentiment matches
/// the predicted preference.
pub fn cor(predicted_ratings: &[f64], sentiments: &[Sentiment], threshold: f64) -> Result<f64> {
    if predicted_ratings.len() != sentiments.len() {
        return Err(Error::Metric(format!(
            "length mismatch: {} ratings vs {} sentiments",
            predicted_ratings.len(),
            sentiments.len()
        )));
    }
    if predicted_ratings.is_empty() {
        return Err(Error::Metric("no samples for coherence ratio".into()));
    }
    let coherent = predicted_ratings
        .iter()
        .zip(sentiments)
        .filter(|(rating, sentiment)| preference_label(**rating, threshold) == **sentiment)
        .count();
    Ok(coherent as f64 / predicted_ratings.len() as f64)
}

// --- LLM judges ---

const ENTAIL_TEMPLATE: &str = "You will be given a {Recommendation_Explanation} and a list of existing {Item_Reviews}.\n\
Your task is to evaluate whether all information in the explanation is explicitly described or implied by the reviews.\n\
- Return 1 if all information is entailed or supported by the reviews.\n\
- Return 0 if any information is not.";

const SENTIMENT_TEMPLATE: &str = "You will be given a {Text}, which serves as a recommendation explanation aimed to inform the user about why an item is recommended or not.\n\
Your task is to analyze the sentiment of the explanation and classify it as either positive or negative:\n\
- Positive (1): The explanation suggests recommending the item to the user.\n\
- Negative (-1): The explanation suggests not recommending the item to the user.";

const JUDGE_SYSTEM_PROMPT: &str = "You are an impartial judge of recommendation explanations.";
const JUDGE_REPAIR_NOTE: &str = "Reply with a single number only.";

#[derive(Debug, Clone)]
pub struct JudgeConfig {
    pub repair_attempts: u32,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            repair_attempts: 2,
            temperature: 0.0,
            max_output_tokens: 16,
        }
    }
}

fn render_reviews(item_reviews: &[(f64, String)]) -> String {
    item_reviews
        .iter()
        .map(|(rating, review)| format!("- ({rating}) {review}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn parse_binary_flag(text: &str) -> Result<u8> {
    match text.chars().find(|c| c.is_ascii_digit()) {
        Some('0') => Ok(0),
        Some('1') => Ok(1),
        Some(other) => Err(Error::Parse(format!("expected 0 or 1, found digit {other}"))),
        None => Err(Error::Parse(format!(
            "no digit in judge reply: {}",
            text.chars().take(80).collect::<String>()
        ))),
    }
}

fn parse_signed_unit(text: &str) -> Result<Sentiment> {
    let bytes: Vec<char> = text.chars().collect();
    let first_digit = bytes.iter().position(|c| c.is_ascii_digit());
    let Some(start) = first_digit else {
        return Err(Error::Parse(format!(
            "no integer in judge reply: {}",
            text.chars().take(80).collect::<String>()
        )));
    };
    let negative = start > 0 && bytes[start - 1] == '-';
    let digits: String = bytes[start..].iter().take_while(|c| c.is_ascii_digit()).collect();
    let magnitude: i64 = digits
        .parse()
        .map_err(|_| Error::Parse(format!("integer out of range: {digits}")))?;
    Sentiment::from_value(if negative { -magnitude } else { magnitude })
}

/// Ask the judge whether `explanation` is entailed by the item's reviews.
///
/// An empty review list short-circuits to 0: nothing can support the text.
pub fn judge_entailment(
    backend: &dyn ChatBackend,
    explanation: &str,
    item_reviews: &[(f64, String)],
    config: &JudgeConfig,
) -> Result<u8> {
    if item_reviews.is_empty() {
        return Ok(0);
    }
    let user_prompt = format!(
        "{ENTAIL_TEMPLATE}\n\n{{Recommendation_Explanation}}: {explanation}\n{{Item_Reviews}}:\n{}",
        render_reviews(item_reviews)
    );
    let request = ChatRequest::new(
        JUDGE_SYSTEM_PROMPT,
        user_prompt,
        config.temperature,
        config.max_output_tokens,
        "entail",
    )?;
    call_with_repair_by(
        backend,
        &request,
        config.repair_attempts,
        JUDGE_REPAIR_NOTE,
        |text| parse_binary_flag(text),
    )
}

/// Classify the explanation's sentiment as positive (1) or negative (-1).
pub fn classify_sentiment(
    backend: &dyn ChatBackend,
    explanation: &str,
    config: &JudgeConfig,
) -> Result<Sentiment> {
    let user_prompt = format!("{SENTIMENT_TEMPLATE}\n\n{{Text}}: {explanation}");
    let request = ChatRequest::new(
        JUDGE_SYSTEM_PROMPT,
        user_prompt,
        config.temperature,
        config.max_output_tokens,
        "sentiment",
    )?;
    call_with_repair_by(
        backend,
        &request,
        config.repair_attempts,
        JUDGE_REPAIR_NOTE,
        |text| parse_signed_unit(text),
    )
}

// --- evaluation report ---

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub entail: f64,
    pub fcr: f64,
    pub entr: f64,
    pub cor: f64,
}

/// Per-sample per-aspect signal snapshot (round 0 or final).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSignals {
    pub entail_flag: u8,
    pub feature_count: usize,
    pub coherence_flag: u8,
}

impl AspectSignals {
    fn value(&self, aspect: Aspect) -> f64 {
        match aspect {
            Aspect::Factuality => self.entail_flag as f64,
            Aspect::Personalization => self.feature_count as f64,
            Aspect::SentimentCoherence => self.coherence_flag as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub user_id: String,
    pub item_id: String,
    pub initial: AspectSignals,
    #[serde(rename = "final")]
    pub final_: AspectSignals,
}

impl SampleRow {
    /// Final-minus-initial quality delta for one aspect (Eq.-1 bookkeeping).
    pub fn delta(&self, aspect: Aspect) -> f64 {
        self.final_.value(aspect) - self.initial.value(aspect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n_samples: usize,
    pub n_excluded: usize,
    pub initial: MetricValues,
    #[serde(rename = "final")]
    pub final_: MetricValues,
    pub rows: Vec<SampleRow>,
    pub annotations: Vec<String>,
}

impl EvaluationReport {
    /// Aligned-column table in Table-2 metric order.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8}{:>9}{:>9}{:>9}{:>9}\n",
            "", "Entail", "FCR", "ENTR", "CoR"
        ));
        for (label, m) in [("initial", &self.initial), ("final", &self.final_)] {
            out.push_str(&format!(
                "{:<8}{:>9.3}{:>9.4}{:>9.3}{:>9.3}\n",
                label, m.entail, m.fcr, m.entr, m.cor
            ));
        }
        out.push_str(&format!(
            "{:<8}{:>+9.3}{:>+9.4}{:>+9.3}{:>+9.3}\n",
            "delta",
            self.final_.entail - self.initial.entail,
            self.final_.fcr - self.initial.fcr,
            self.final_.entr - self.initial.entr,
            self.final_.cor - self.initial.cor
        ));
        out.push_str(&format!(
            "n = {} samples (excluded: {})\n",
            self.n_samples, self.n_excluded
        ));
        out
    }
}

/// One evaluation input: initial and final explanations plus judging context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub user_id: String,
    pub item_id: String,
    pub predicted_rating: f64,
    pub initial_explanation: String,
    pub final_explanation: String,
    /// Train-side reviews of the item, used by the entailment judge.
    pub item_reviews: Vec<(f64, String)>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub preference_threshold: f64,
    pub judge: JudgeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            preference_threshold: 3.0,
            judge: JudgeConfig::default(),
        }
    }
}

/// Compute all four metrics over final explanations, the same metrics over
/// initial explanations, and per-sample signal rows.
///
/// Samples whose judge calls fail are excluded and annotated rather than
/// failing the whole evaluation.
pub fn evaluate_samples(
    samples: &[EvalSample],
    features: &BTreeSet<String>,
    backend: &dyn ChatBackend,
    config: &EvalConfig,
) -> Result<EvaluationReport> {
    if samples.is_empty() {
        return Err(Error::Metric("no samples to evaluate".into()));
    }
    let mut rows = Vec::new();
    let mut annotations = Vec::new();
    let mut kept: Vec<&EvalSample> = Vec::new();
    let mut initial_sentiments = Vec::new();
    let mut final_sentiments = Vec::new();

    for sample in samples {
        if sample.item_reviews.is_empty() {
            annotations.push(format!(
                "{}:{}: item has no train reviews; entailment defaults to 0",
                sample.user_id, sample.item_id
            ));
        }
        let judged = (|| -> Result<(u8, u8, Sentiment, Sentiment)> {
            let entail_initial = judge_entailment(
                backend,
                &sample.initial_explanation,
                &sample.item_reviews,
                &config.judge,
            )?;
            let entail_final = judge_entailment(
                backend,
                &sample.final_explanation,
                &sample.item_reviews,
                &config.judge,
            )?;
            let sentiment_initial =
                classify_sentiment(backend, &sample.initial_explanation, &config.judge)?;
            let sentiment_final =
                classify_sentiment(backend, &sample.final_explanation, &config.judge)?;
            Ok((entail_initial, entail_final, sentiment_initial, sentiment_final))
        })();
        let (entail_initial, entail_final, sentiment_initial, sentiment_final) = match judged {
            Ok(values) => values,
            Err(e) => {
                annotations.push(format!(
                    "{}:{}: judge failed, sample excluded: {e}",
                    sample.user_id, sample.item_id
                ));
                continue;
            }
        };
        let preference = preference_label(sample.predicted_rating, config.preference_threshold);
        rows.push(SampleRow {
            user_id: sample.user_id.clone(),
            item_id: sample.item_id.clone(),
            initial: AspectSignals {
                entail_flag: entail_initial,
                feature_count: count_features(&sample.initial_explanation, features),
                coherence_flag: (sentiment_initial == preference) as u8,
            },
            final_: AspectSignals {
                entail_flag: entail_final,
                feature_count: count_features(&sample.final_explanation, features),
                coherence_flag: (sentiment_final == preference) as u8,
            },
        });
        kept.push(sample);
        initial_sentiments.push(sentiment_initial);
        final_sentiments.push(sentiment_final);
    }

    if kept.is_empty() {
        return Err(Error::Metric(format!(
            "all {} samples failed judging: {}",
            samples.len(),
            annotations.join("; ")
        )));
    }

    let initial_texts: Vec<&str> = kept.iter().map(|s| s.initial_explanation.as_str()).collect();
    let final_texts: Vec<&str> = kept.iter().map(|s| s.final_explanation.as_str()).collect();
    let ratings: Vec<f64> = kept.iter().map(|s| s.predicted_rating).collect();
    let initial_entail: Vec<u8> = rows.iter().map(|r| r.initial.entail_flag).collect();
    let final_entail: Vec<u8> = rows.iter().map(|r| r.final_.entail_flag).collect();

    let initial = MetricValues {
        entail: entail_ratio(&initial_entail)?,
        fcr: fcr(&initial_texts, features)?,
        entr: entr(&initial_texts)?,
        cor: cor(&ratings, &initial_sentiments, config.preference_threshold)?,
    };
    let final_ = MetricValues {
        entail: entail_ratio(&final_entail)?,
        fcr: fcr(&final_texts, features)?,
        entr: entr(&final_texts)?,
        cor: cor(&ratings, &final_sentiments, config.preference_threshold)?,
    };

    Ok(EvaluationReport {
        n_samples: kept.len(),
        n_excluded: samples.len() - kept.len(),
        initial,
        final_,
        rows,
        annotations,
    })
}

/// Evaluate completed episodes against a corpus: builds the leave-one-out
/// split, gathers each item's train reviews and delegates to
/// [`evaluate_samples`].
pub fn evaluate(
    results: &[EpisodeResult],
    corpus: &Corpus,
    backend: &dyn ChatBackend,
    config: &EvalConfig,
) -> Result<EvaluationReport> {
    if results.is_empty() {
        return Err(Error::Metric("no episode results to evaluate".into()));
    }
    let split = crate::dataset::leave_one_out_split(corpus)?;
    let samples: Vec<EvalSample> = results
        .iter()
        .map(|r| EvalSample {
            user_id: r.sample.user_id.clone(),
            item_id: r.sample.item_id.clone(),
            predicted_rating: r.sample.predicted_rating,
            initial_explanation: r.sample.initial_explanation.text.clone(),
            final_explanation: r.final_explanation.text.clone(),
            item_reviews: split
                .train
                .iter()
                .filter(|i| i.item_id == r.sample.item_id)
                .map(|i| (i.rating, i.review.clone()))
                .collect(),
        })
        .collect();
    evaluate_samples(&samples, &corpus.features, backend, config)
}
