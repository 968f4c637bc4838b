//! Per-stage logs: provider exchanges, action records and pipeline events
//! (dropped extractions, parse failures, audit entries).

use serde::{Deserialize, Serialize};

use crate::model::{ActionOrigin, ActionRecord, ActionStatus, Stage};
use crate::provider::PromptRecord;

/// Something the pipeline chose not to treat as an error.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub stage: String,
    pub kind: String,
    pub subject: String,
    pub detail: String,
}

impl Event {
    pub fn new(stage: &str, kind: &str, subject: impl Into<String>, detail: impl Into<String>) -> Self {
        Event {
            stage: stage.to_string(),
            kind: kind.to_string(),
            subject: subject.into(),
            detail: detail.into(),
        }
    }
}

/// Collected logs of one stage run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub prompts: Vec<PromptRecord>,
    pub actions: Vec<ActionRecord>,
    pub events: Vec<Event>,
    next_sequence: u64,
    next_batch: u64,
}

/// Inputs of one action record besides its stage.
pub struct ActionEntry<'a> {
    pub round: u32,
    pub batch: u64,
    pub kind: &'a str,
    pub payload: serde_json::Value,
    pub rationale: String,
    pub outcome: Result<(), String>,
    pub origin: ActionOrigin,
}

impl Trace {
    pub fn event(&mut self, e: Event) {
        self.events.push(e);
    }

    /// Fresh batch ordinal for one provider reply or one finalization step.
    pub fn next_batch(&mut self) -> u64 {
        let b = self.next_batch;
        self.next_batch += 1;
        b
    }

    pub fn record(&mut self, stage: Stage, entry: ActionEntry<'_>) -> &ActionRecord {
        let (status, rejection_reason) = match entry.outcome {
            Ok(()) => (ActionStatus::Applied, None),
            Err(reason) => (ActionStatus::Rejected, Some(reason)),
        };
        self.actions.push(ActionRecord {
            stage,
            sequence_number: self.next_sequence,
            round: entry.round,
            batch: entry.batch,
            kind: entry.kind.to_string(),
            payload: entry.payload,
            rationale: entry.rationale,
            status,
            rejection_reason,
            origin: entry.origin,
        });
        self.next_sequence += 1;
        self.actions.last().unwrap()
    }

    pub fn extend(&mut self, other: Trace) {
        self.prompts.extend(other.prompts);
        self.actions.extend(other.actions);
        self.events.extend(other.events);
    }
}
