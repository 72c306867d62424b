//! Synthetic hospital generation, raw-table parsing, cohort extraction,
//! labels and dataset splits.

pub mod dx;
pub mod etl;
pub mod generate;
pub mod raw;
pub mod spec;
pub mod split;

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dx::{map_diagnosis, DxHierarchy, NUM_DX_CLASSES};
pub use etl::{assign_labels, build_cohort, events_to_raw, Cohort, CohortFilters, CohortStats};
pub use generate::{description_stems, generate_hospital, stem_jaccard};
pub use raw::{RawEvent, RawStay, RawTables, SourceTable};
pub use spec::{catalog, CodeStyle, Concept, HospitalSpec};
pub use split::{split_dataset, split_sizes, Split};

/// Maximum number of events kept per stay.
pub const MAX_EVENTS: usize = 150;
/// Observation window after ICU admission, in minutes.
pub const WINDOW_MINUTES: i64 = 12 * 60;

/// One timestamped event of a stay.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub code: String,
    pub description: String,
    pub value: Option<String>,
    pub unit: Option<String>,
    /// Minutes since ICU admission.
    pub offset: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet {
    pub readm: bool,
    pub mort: bool,
    pub los3: bool,
    pub los7: bool,
    /// Diagnosis classes in `1..=18`, ascending.
    pub dx: Vec<u8>,
}

/// One cohort stay: its first events and outcome labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub stay_id: u64,
    pub events: Vec<ClinicalEvent>,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Readm,
    Mort,
    Los3,
    Los7,
    Dx,
}

impl Task {
    pub const ALL: [Task; 5] = [Self::Readm, Self::Mort, Self::Los3, Self::Los7, Self::Dx];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Readm => "readm",
            Self::Mort => "mort",
            Self::Los3 => "los3",
            Self::Los7 => "los7",
            Self::Dx => "dx",
        }
    }

    /// Number of sigmoid outputs.
    pub fn arity(self) -> usize {
        match self {
            Self::Dx => NUM_DX_CLASSES,
            _ => 1,
        }
    }

    /// Target vector of `labels` for this task.
    pub fn targets(self, labels: &LabelSet) -> Vec<f64> {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        match self {
            Self::Readm => vec![b(labels.readm)],
            Self::Mort => vec![b(labels.mort)],
            Self::Los3 => vec![b(labels.los3)],
            Self::Los7 => vec![b(labels.los7)],
            Self::Dx => {
                let mut v = vec![0.0; NUM_DX_CLASSES];
                for &c in &labels.dx {
                    v[c as usize - 1] = 1.0;
                }
                v
            }
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (readm|mort|los3|los7|dx)")))
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PatientRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSet {
        LabelSet {
            readm: true,
            mort: false,
            los3: true,
            los7: false,
            dx: vec![1, 18],
        }
    }

    #[test]
    fn task_targets() {
        assert_eq!(Task::Readm.targets(&labels()), vec![1.0]);
        let dx = Task::Dx.targets(&labels());
        assert_eq!(dx.len(), 18);
        assert_eq!((dx[0], dx[17], dx[5]), (1.0, 1.0, 0.0));
        assert!("los5".parse::<Task>().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let recs = vec![PatientRecord {
            stay_id: 3,
            events: vec![ClinicalEvent {
                code: "50912".into(),
                description: "creatinine".into(),
                value: Some("1.2".into()),
                unit: Some("mg/dL".into()),
                offset: 14,
            }],
            labels: labels(),
        }];
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        std::fs::write(&p, "{bad\n").unwrap();
        assert!(matches!(read_jsonl(&p), Err(Error::Parse { line: 1, .. })));
    }
}
