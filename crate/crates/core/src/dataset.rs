//! Corpus ingestion, leave-one-out splitting and test-user sampling.
//!
//! Input files are JSON-lines (see the README for the field layout); parse
//! errors carry the file path and 1-based line number.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::domain::{Explanation, Interaction, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemInfo {
    pub title: String,
    pub category: String,
}

/// A loaded review corpus: interactions, item metadata and the feature set.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub interactions: Vec<Interaction>,
    pub items: BTreeMap<String, ItemInfo>,
    pub features: BTreeSet<String>,
}

#[derive(Deserialize)]
struct ItemRow {
    item_id: String,
    title: String,
    category: String,
}

#[derive(Deserialize)]
struct BaseOutputRow {
    user_id: String,
    item_id: String,
    predicted_rating: f64,
    explanation: String,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line.to_string()))
        .filter(|(_, line)| !line.trim().is_empty())
        .collect())
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_lines(path)?
        .into_iter()
        .map(|(line_no, line)| {
            serde_json::from_str::<T>(&line)
                .map(|row| (line_no, row))
                .map_err(|e| Error::data(path.display().to_string(), line_no, e.to_string()))
        })
        .collect()
}

/// Load interactions, items and (optionally) the feature list.
///
/// Ratings outside [1, 5] and interactions referencing unknown items are
/// rejected with their line numbers; a missing features path yields an empty
/// feature set (the caller may fall back to [`extract_fallback_features`]).
pub fn load_corpus(
    interactions_path: &Path,
    items_path: &Path,
    features_path: Option<&Path>,
) -> Result<Corpus> {
    let mut items = BTreeMap::new();
    for (line_no, row) in parse_jsonl::<ItemRow>(items_path)? {
        let previous = items.insert(
            row.item_id.clone(),
            ItemInfo {
                title: row.title,
                category: row.category,
            },
        );
        if previous.is_some() {
            return Err(Error::data(
                items_path.display().to_string(),
                line_no,
                format!("duplicate item_id '{}'", row.item_id),
            ));
        }
    }

    let mut interactions = Vec::new();
    for (line_no, row) in parse_jsonl::<Interaction>(interactions_path)? {
        if !(1.0..=5.0).contains(&row.rating) {
            return Err(Error::data(
                interactions_path.display().to_string(),
                line_no,
                format!("rating {} outside [1, 5]", row.rating),
            ));
        }
        if !items.contains_key(&row.item_id) {
            return Err(Error::data(
                interactions_path.display().to_string(),
                line_no,
                format!("interaction references unknown item '{}'", row.item_id),
            ));
        }
        interactions.push(row);
    }

    let mut features = BTreeSet::new();
    if let Some(path) = features_path {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        for line in text.lines() {
            let feature = line.trim().to_lowercase();
            if !feature.is_empty() {
                features.insert(feature);
            }
        }
    }

    Ok(Corpus {
        interactions,
        items,
        features,
    })
}

/// Per-user leave-one-out split: the chronologically last interaction of each
/// user goes to test, the rest to train.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Users with a single interaction: kept in train, excluded from test.
    pub excluded_single_interaction_users: usize,
}

pub fn leave_one_out_split(corpus: &Corpus) -> Result<Split> {
    if corpus.interactions.is_empty() {
        return Err(Error::Domain("cannot split an empty corpus".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<Interaction>> = BTreeMap::new();
    for interaction in &corpus.interactions {
        by_user
            .entry(interaction.user_id.as_str())
            .or_default()
            .push(interaction.clone());
    }
    let mut split = Split::default();
    for (_, mut history) in by_user {
        // Stable sort keeps input order for tied timestamps.
        history.sort_by_key(|i| i.timestamp);
        if history.len() == 1 {
            split.excluded_single_interaction_users += 1;
            split.train.extend(history);
        } else {
            let last = history.pop().unwrap();
            split.train.extend(history);
            split.test.push(last);
        }
    }
    Ok(split)
}

/// A test user awaiting its base-model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSkeleton {
    pub user_id: String,
    pub item_id: String,
    pub item_title: String,
    pub item_category: String,
}

/// Randomly draw up to `n` distinct test users, deterministically for a fixed
/// seed. When fewer than `n` users exist, all of them are returned.
pub fn sample_test_users(
    split: &Split,
    corpus: &Corpus,
    n: usize,
    seed: u64,
) -> Result<Vec<SampleSkeleton>> {
    if n == 0 {
        return Err(Error::Domain("sample size must be >= 1".into()));
    }
    let mut pool: Vec<&Interaction> = split.test.iter().collect();
    pool.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.iter()
        .map(|interaction| {
            let info = corpus.items.get(&interaction.item_id).ok_or_else(|| {
                Error::Domain(format!("unknown item '{}' in test split", interaction.item_id))
            })?;
            Ok(SampleSkeleton {
                user_id: interaction.user_id.clone(),
                item_id: interaction.item_id.clone(),
                item_title: info.title.clone(),
                item_category: info.category.clone(),
            })
        })
        .collect()
}

/// Join skeletons with the base model's outputs; skeletons without a base
/// output are dropped and counted.
pub fn attach_base_outputs(
    skeletons: &[SampleSkeleton],
    base_outputs_path: &Path,
) -> Result<(Vec<Sample>, usize)> {
    let mut outputs: HashMap<(String, String), (f64, String)> = HashMap::new();
    for (line_no, row) in parse_jsonl::<BaseOutputRow>(base_outputs_path)? {
        if !(1.0..=5.0).contains(&row.predicted_rating) {
            return Err(Error::data(
                base_outputs_path.display().to_string(),
                line_no,
                format!("predicted_rating {} outside [1, 5]", row.predicted_rating),
            ));
        }
        let key = (row.user_id.clone(), row.item_id.clone());
        if outputs
            .insert(key, (row.predicted_rating, row.explanation))
            .is_some()
        {
            return Err(Error::data(
                base_outputs_path.display().to_string(),
                line_no,
                format!("duplicate base output for ({}, {})", row.user_id, row.item_id),
            ));
        }
    }

    let mut samples = Vec::new();
    let mut dropped = 0usize;
    for skeleton in skeletons {
        let key = (skeleton.user_id.clone(), skeleton.item_id.clone());
        match outputs.get(&key) {
            Some((predicted_rating, explanation)) => {
                samples.push(Sample::new(
                    skeleton.user_id.clone(),
                    skeleton.item_id.clone(),
                    *predicted_rating,
                    Explanation::new(explanation.clone(), 0)?,
                    skeleton.item_title.clone(),
                    skeleton.item_category.clone(),
                )?);
            }
            None => dropped += 1,
        }
    }
    Ok((samples, dropped))
}

/// Common English stopwords excluded by the fallback feature extractor.
pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "any", "are", "as", "at", "be", "because",
    "been", "but", "by", "can", "could", "did", "do", "does", "for", "from", "get", "got", "had",
    "has", "have", "he", "her", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just",
    "like", "me", "more", "most", "my", "no", "not", "of", "on", "one", "only", "or", "other",
    "our", "out", "over", "she", "so", "some", "than", "that", "the", "their", "them", "then",
    "there", "these", "they", "this", "to", "too", "up", "us", "very", "was", "we", "were",
    "what", "when", "which", "who", "will", "with", "would", "you", "your",
];

pub fn default_stopwords() -> BTreeSet<String> {
    DEFAULT_STOPWORDS.iter().map(|w| w.to_string()).collect()
}

/// Fallback feature extraction: top-k most frequent lowercase alphabetic
/// tokens, minus stopwords. Ties break lexicographically.
pub fn extract_fallback_features<'a>(
    reviews: impl IntoIterator<Item = &'a str>,
    k: usize,
    stopwords: &BTreeSet<String>,
) -> Result<BTreeSet<String>> {
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut any_review = false;
    for review in reviews {
        any_review = true;
        for token in crate::metrics::tokenize(review) {
            if token.chars().all(|c| c.is_alphabetic()) && !stopwords.contains(&token) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    if !any_review {
        return Err(Error::Domain("empty review corpus".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked.into_iter().take(k).map(|(token, _)| token).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut file = std::fs::File::create(&path).unwrap();
        file.write_all(content.as_bytes()).unwrap();
        path
    }

    const ITEMS: &str = r#"{"item_id":"i1","title":"Ramen Bar","category":"Restaurant"}
{"item_id":"i2","title":"Pizza Spot","category":"Restaurant"}
"#;

    fn interaction_line(user: &str, item: &str, rating: f64, review: &str, ts: i64) -> String {
        format!(
            r#"{{"user_id":"{user}","item_id":"{item}","rating":{rating},"review":"{review}","timestamp":{ts}}}"#
        )
    }

    #[test]
    fn load_corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(&dir, "items.jsonl", ITEMS);
        let lines = [
            interaction_line("u1", "i1", 5.0, "great broth", 10),
            interaction_line("u1", "i2", 3.0, "ok pizza", 20),
            interaction_line("u2", "i1", 2.0, "too salty", 30),
        ]
        .join("\n");
        let interactions = write_file(&dir, "interactions.jsonl", &lines);
        let features = write_file(&dir, "features.txt", "broth\nPizza\n\n");
        let corpus = load_corpus(&interactions, &items, Some(&features)).unwrap();
        assert_eq!(corpus.interactions.len(), 3);
        assert_eq!(corpus.items.len(), 2);
        assert_eq!(
            corpus.features,
            ["broth", "pizza"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn load_corpus_rejects_bad_rating_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(&dir, "items.jsonl", ITEMS);
        let lines = [
            interaction_line("u1", "i1", 5.0, "fine", 10),
            interaction_line("u1", "i2", 6.0, "bad rating", 20),
        ]
        .join("\n");
        let interactions = write_file(&dir, "interactions.jsonl", &lines);
        let err = load_corpus(&interactions, &items, None).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert!(err.to_string().contains("outside [1, 5]"), "{err}");
    }

    #[test]
    fn load_corpus_rejects_unknown_item_and_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(&dir, "items.jsonl", ITEMS);
        let unknown = write_file(
            &dir,
            "unknown.jsonl",
            &interaction_line("u1", "i9", 4.0, "?", 10),
        );
        let err = load_corpus(&unknown, &items, None).unwrap_err();
        assert!(err.to_string().contains("unknown item 'i9'"), "{err}");

        let malformed = write_file(&dir, "malformed.jsonl", "{not json");
        let err = load_corpus(&malformed, &items, None).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn missing_features_file_yields_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(&dir, "items.jsonl", ITEMS);
        let interactions = write_file(
            &dir,
            "interactions.jsonl",
            &interaction_line("u1", "i1", 4.0, "fine", 10),
        );
        let corpus = load_corpus(&interactions, &items, None).unwrap();
        assert!(corpus.features.is_empty());
        // The fallback extractor covers the gap.
        let features =
            extract_fallback_features(["good pizza", "bad pizza"], 1, &default_stopwords())
                .unwrap();
        assert_eq!(features, ["pizza".to_string()].into_iter().collect());
    }

    fn small_corpus() -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(&dir, "items.jsonl", ITEMS);
        let lines = [
            interaction_line("u1", "i1", 5.0, "first", 10),
            interaction_line("u1", "i2", 4.0, "second", 20),
            interaction_line("u1", "i1", 3.0, "third", 30),
            interaction_line("u2", "i2", 2.0, "only one", 5),
            interaction_line("u3", "i1", 4.0, "a", 1),
            interaction_line("u3", "i2", 5.0, "b", 2),
        ]
        .join("\n");
        let interactions = write_file(&dir, "interactions.jsonl", &lines);
        load_corpus(&interactions, &items, None).unwrap()
    }

    #[test]
    fn split_takes_last_interaction_per_user() {
        let corpus = small_corpus();
        let split = leave_one_out_split(&corpus).unwrap();
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.excluded_single_interaction_users, 1);
        let u1_test = split.test.iter().find(|i| i.user_id == "u1").unwrap();
        assert_eq!(u1_test.timestamp, 30);
        assert_eq!(split.train.len() + split.test.len(), corpus.interactions.len());
        // Train must not contain the test interactions.
        for t in &split.test {
            assert!(!split.train.iter().any(|i| i == t));
        }
    }

    #[test]
    fn split_partition_reconstructs_interactions() {
        let corpus = small_corpus();
        let split = leave_one_out_split(&corpus).unwrap();
        let mut all: Vec<Interaction> = split.train.clone();
        all.extend(split.test.clone());
        let mut expected = corpus.interactions.clone();
        let key = |i: &Interaction| (i.user_id.clone(), i.item_id.clone(), i.timestamp);
        all.sort_by_key(key);
        expected.sort_by_key(key);
        assert_eq!(all, expected);
    }

    #[test]
    fn split_breaks_timestamp_ties_by_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(&dir, "items.jsonl", ITEMS);
        let lines = [
            interaction_line("u1", "i1", 5.0, "earlier in file", 10),
            interaction_line("u1", "i2", 4.0, "later in file", 10),
        ]
        .join("\n");
        let interactions = write_file(&dir, "interactions.jsonl", &lines);
        let corpus = load_corpus(&interactions, &items, None).unwrap();
        let split = leave_one_out_split(&corpus).unwrap();
        assert_eq!(split.test[0].item_id, "i2");
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(leave_one_out_split(&Corpus::default()).is_err());
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let corpus = small_corpus();
        let split = leave_one_out_split(&corpus).unwrap();
        let a = sample_test_users(&split, &corpus, 1, 7).unwrap();
        let b = sample_test_users(&split, &corpus, 1, 7).unwrap();
        assert_eq!(a, b);
        assert!(sample_test_users(&split, &corpus, 0, 7).is_err());
    }

    #[test]
    fn oversampling_returns_all_users() {
        let corpus = small_corpus();
        let split = leave_one_out_split(&corpus).unwrap();
        let samples = sample_test_users(&split, &corpus, 200, 7).unwrap();
        assert_eq!(samples.len(), 2);
    }

    #[test]
    fn different_seeds_reorder_larger_pools() {
        let dir = tempfile::tempdir().unwrap();
        let items = write_file(&dir, "items.jsonl", ITEMS);
        let mut lines = Vec::new();
        for u in 0..12 {
            lines.push(interaction_line(&format!("user{u:02}"), "i1", 3.0, "a", 1));
            lines.push(interaction_line(&format!("user{u:02}"), "i2", 4.0, "b", 2));
        }
        let interactions = write_file(&dir, "interactions.jsonl", &lines.join("\n"));
        let corpus = load_corpus(&interactions, &items, None).unwrap();
        let split = leave_one_out_split(&corpus).unwrap();
        let a = sample_test_users(&split, &corpus, 5, 1).unwrap();
        let b = sample_test_users(&split, &corpus, 5, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn attach_joins_and_drops() {
        let corpus = small_corpus();
        let split = leave_one_out_split(&corpus).unwrap();
        let skeletons = sample_test_users(&split, &corpus, 10, 7).unwrap();
        assert_eq!(skeletons.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        // Only u1's test pair gets a base output.
        let base = write_file(
            &dir,
            "base.jsonl",
            r#"{"user_id":"u1","item_id":"i1","predicted_rating":4.2,"explanation":"good bowl"}"#,
        );
        let (samples, dropped) = attach_base_outputs(&skeletons, &base).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(dropped, 1);
        assert_eq!(samples[0].predicted_rating, 4.2);
        assert_eq!(samples[0].initial_explanation.round, 0);
        assert_eq!(samples[0].item_title, "Ramen Bar");
    }

    #[test]
    fn attach_rejects_duplicate_keys() {
        let dir = tempfile::tempdir().unwrap();
        let base = write_file(
            &dir,
            "base.jsonl",
            "{\"user_id\":\"u1\",\"item_id\":\"i1\",\"predicted_rating\":4.0,\"explanation\":\"a\"}\n{\"user_id\":\"u1\",\"item_id\":\"i1\",\"predicted_rating\":3.0,\"explanation\":\"b\"}",
        );
        let err = attach_base_outputs(&[], &base).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn fallback_features_rank_and_tiebreak() {
        let stop = default_stopwords();
        let features =
            extract_fallback_features(["fast crisp crisp", "fast bright"], 2, &stop).unwrap();
        // crisp=2, fast=2, bright=1; lexicographic tie-break keeps crisp+fast.
        assert_eq!(
            features,
            ["crisp", "fast"].iter().map(|s| s.to_string()).collect()
        );
        // k larger than vocabulary: whole filtered vocabulary.
        let all = extract_fallback_features(["fast crisp"], 99, &stop).unwrap();
        assert_eq!(all.len(), 2);
        let none: [&str; 0] = [];
        assert!(extract_fallback_features(none, 3, &stop).is_err());
        // Numeric tokens are not alphabetic and are skipped.
        let nums = extract_fallback_features(["42 42 42 cheap"], 5, &stop).unwrap();
        assert_eq!(nums, ["cheap".to_string()].into_iter().collect());
    }
}
