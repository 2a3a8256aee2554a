//! Trajectory analytics over a batch of episodes: aspect share,
//! representative trajectory, average length and max-round stop rate.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::domain::{Aspect, EpisodeResult, StopReason, Trajectory};
use crate::error::{Error, Result};

/// The slice of an episode the analytics need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub trajectory: Trajectory,
    pub rounds_used: usize,
    pub stop_reason: StopReason,
}

impl From<&EpisodeResult> for EpisodeSummary {
    fn from(result: &EpisodeResult) -> Self {
        EpisodeSummary {
            trajectory: result.trajectory.clone(),
            rounds_used: result.rounds_used,
            stop_reason: result.stop_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStats {
    pub n_episodes: usize,
    /// Share of each aspect among all refined-aspect occurrences, in percent.
    pub aspect_ratio: BTreeMap<String, f64>,
    /// Modal trajectory and its frequency among episodes.
    pub representative: Trajectory,
    pub representative_ratio: f64,
    pub avg_length: f64,
    /// Fraction of episodes stopped by the round cap.
    pub max_stop_ratio: f64,
}

impl TrajectoryStats {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Episodes: {}\n", self.n_episodes));
        out.push_str(&format!("Average trajectory length: {:.2}\n", self.avg_length));
        out.push_str(&format!("Max-round stops: {:.1}%\n", self.max_stop_ratio * 100.0));
        out.push_str("Aspect ratio (share of refined aspects):\n");
        for (name, share) in &self.aspect_ratio {
            out.push_str(&format!("  {name:<20} {share:.1}%\n"));
        }
        out.push_str(&format!(
            "Representative trajectory: {} ({:.1}% of episodes)\n",
            self.representative.as_letters(),
            self.representative_ratio * 100.0
        ));
        out
    }
}

/// Aggregate trajectory statistics. Modal-trajectory ties break toward the
/// lexicographically smaller letter sequence.
pub fn trajectory_stats(episodes: &[EpisodeSummary]) -> Result<TrajectoryStats> {
    if episodes.is_empty() {
        return Err(Error::Metric("no episodes for trajectory statistics".into()));
    }
    let mut occurrences: BTreeMap<Aspect, usize> = BTreeMap::new();
    for episode in episodes {
        for aspect in &episode.trajectory.0 {
            *occurrences.entry(*aspect).or_insert(0) += 1;
        }
    }
    let total: usize = occurrences.values().sum();
    let mut aspect_ratio = BTreeMap::new();
    for aspect in Aspect::ALL {
        let count = occurrences.get(&aspect).copied().unwrap_or(0);
        let share = if total == 0 {
            0.0
        } else {
            (count * 100) as f64 / total as f64
        };
        aspect_ratio.insert(aspect.name().to_string(), share);
    }

    let mut frequency: BTreeMap<String, (usize, &Trajectory)> = BTreeMap::new();
    for episode in episodes {
        let entry = frequency
            .entry(episode.trajectory.as_letters())
            .or_insert((0, &episode.trajectory));
        entry.0 += 1;
    }
    let (_, (modal_count, modal)) = frequency
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| b.0.cmp(a.0)))
        .expect("non-empty");

    let avg_length =
        episodes.iter().map(|e| e.rounds_used).sum::<usize>() as f64 / episodes.len() as f64;
    let max_stops = episodes
        .iter()
        .filter(|e| e.stop_reason == StopReason::MaxRounds)
        .count();

    Ok(TrajectoryStats {
        n_episodes: episodes.len(),
        aspect_ratio,
        representative: (*modal).clone(),
        representative_ratio: *modal_count as f64 / episodes.len() as f64,
        avg_length,
        max_stop_ratio: max_stops as f64 / episodes.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(letters: &str, stop_reason: StopReason) -> EpisodeSummary {
        let trajectory = Trajectory(
            letters
                .chars()
                .map(|c| Aspect::from_letter(c).unwrap())
                .collect(),
        );
        EpisodeSummary {
            rounds_used: trajectory.len(),
            trajectory,
            stop_reason,
        }
    }

    #[test]
    fn hand_counted_fixture() {
        let episodes = vec![
            summary("FPC", StopReason::PlannerFinish),
            summary("FPC", StopReason::PlannerFinish),
            summary("FPC", StopReason::PlannerFinish),
            summary("F", StopReason::PlannerFinish),
        ];
        let stats = trajectory_stats(&episodes).unwrap();
        assert_eq!(stats.representative.as_letters(), "[F, P, C]");
        assert_eq!(stats.representative_ratio, 0.75);
        assert_eq!(stats.avg_length, 2.5);
        assert_eq!(stats.aspect_ratio["Factuality"], 40.0);
        assert_eq!(stats.aspect_ratio["Personalization"], 30.0);
        assert_eq!(stats.aspect_ratio["Sentiment Coherence"], 30.0);
        assert_eq!(stats.max_stop_ratio, 0.0);
    }

    #[test]
    fn all_max_rounds() {
        let episodes: Vec<EpisodeSummary> = (0..10)
            .map(|_| summary("PPPPPP", StopReason::MaxRounds))
            .collect();
        let stats = trajectory_stats(&episodes).unwrap();
        assert_eq!(stats.max_stop_ratio, 1.0);
        assert_eq!(stats.avg_length, 6.0);
        assert_eq!(stats.aspect_ratio["Personalization"], 100.0);
    }

    #[test]
    fn modal_tie_breaks_lexicographically() {
        let episodes = vec![
            summary("PC", StopReason::PlannerFinish),
            summary("FC", StopReason::PlannerFinish),
        ];
        let stats = trajectory_stats(&episodes).unwrap();
        assert_eq!(stats.representative.as_letters(), "[F, C]");
        assert_eq!(stats.representative_ratio, 0.5);
    }

    #[test]
    fn zero_refinements_yield_zero_shares() {
        let episodes = vec![summary("", StopReason::PlannerFinish)];
        let stats = trajectory_stats(&episodes).unwrap();
        assert_eq!(stats.aspect_ratio.values().sum::<f64>(), 0.0);
        assert_eq!(stats.representative.as_letters(), "[]");
        assert!(trajectory_stats(&[]).is_err());
    }

    #[test]
    fn percentages_sum_to_hundred_when_refined() {
        let episodes = vec![
            summary("FFP", StopReason::PlannerFinish),
            summary("C", StopReason::PlannerFinish),
        ];
        let stats = trajectory_stats(&episodes).unwrap();
        let sum: f64 = stats.aspect_ratio.values().sum();
        assert!((sum - 100.0).abs() < 0.1, "{sum}");
    }
}
