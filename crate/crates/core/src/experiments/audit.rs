//! Record of which dataset splits each run touched and for what purpose.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    /// Vocabulary, tokenizer or value statistics.
    Fit,
    /// Gradient updates, including pretraining.
    Train,
    /// Checkpoint selection.
    Select,
    /// Reported metrics or exported representations.
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Access {
    pub seed: u64,
    pub dataset: String,
    pub part: Part,
    pub purpose: Purpose,
}

/// Thread-safe access log shared by the seed runs of an experiment.
#[derive(Debug, Default)]
pub struct AccessLog {
    entries: Mutex<Vec<Access>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, seed: u64, dataset: &str, part: Part, purpose: Purpose) {
        let access = Access {
            seed,
            dataset: dataset.to_string(),
            part,
            purpose,
        };
        self.entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(access);
    }

    /// Sorted, de-duplicated entries.
    pub fn entries(&self) -> Vec<Access> {
        let mut v = self
            .entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone();
        v.sort();
        v.dedup();
        v
    }

    /// Test-split accesses for anything other than evaluation.
    pub fn leaks(&self) -> Vec<Access> {
        self.entries()
            .into_iter()
            .filter(|a| a.part == Part::Test && a.purpose != Purpose::Test)
            .collect()
    }
}
