//! Refinement memory: the append-only per-episode record store.
//!
//! Rounds are 1-based and contiguous; the memory is discarded when the
//! episode ends (full traces are persisted by the orchestrator).

use serde::{Deserialize, Serialize};

use crate::domain::{Aspect, RefinementRecord, Reflection, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementMemory {
    records: Vec<RefinementRecord>,
}

impl RefinementMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append the next round's record. The record's round must be `len + 1`.
    pub fn append(&mut self, record: RefinementRecord) -> Result<()> {
        let expected = self.records.len() as u32 + 1;
        if record.round() != expected {
            return Err(Error::Domain(format!(
                "memory expects round {expected}, got {}",
                record.round()
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[RefinementRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<RefinementRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&RefinementRecord> {
        self.records.last()
    }

    /// The aspects refined so far, in round order.
    pub fn trajectory(&self) -> Trajectory {
        Trajectory(self.records.iter().map(|r| r.aspect).collect())
    }

    /// Content reflections of rounds that refined `aspect`, oldest first.
    pub fn content_reflections_for(&self, aspect: Aspect) -> Vec<&Reflection> {
        self.records
            .iter()
            .filter(|r| r.aspect == aspect)
            .map(|r| &r.content_reflection)
            .collect()
    }
}
