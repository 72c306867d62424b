//! Diagnosis strings to one of 18 top-level classes via a three-level
//! `root|mid|leaf` hierarchy with fallback to coarser levels.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_DX_CLASSES: usize = 18;

pub const DX_ROOTS: [&str; NUM_DX_CLASSES] = [
    "infectious and parasitic diseases",
    "neoplasms",
    "endocrine nutritional and metabolic diseases",
    "diseases of the blood",
    "mental illness",
    "diseases of the nervous system",
    "diseases of the circulatory system",
    "diseases of the respiratory system",
    "diseases of the digestive system",
    "diseases of the genitourinary system",
    "complications of pregnancy",
    "diseases of the skin",
    "diseases of the musculoskeletal system",
    "congenital anomalies",
    "perinatal conditions",
    "injury and poisoning",
    "symptoms and ill-defined conditions",
    "residual codes and external causes",
];

pub(crate) const MIDS: [[&str; 3]; NUM_DX_CLASSES] = [
    ["bacterial infection", "viral infection", "sepsis"],
    [
        "malignant neoplasm",
        "benign neoplasm",
        "secondary malignancy",
    ],
    [
        "diabetes mellitus",
        "fluid and electrolyte disorder",
        "thyroid disorder",
    ],
    ["anemia", "coagulation defect", "white cell disease"],
    ["alcohol related disorder", "delirium", "mood disorder"],
    ["epilepsy", "meningitis", "paralysis"],
    [
        "heart failure",
        "acute myocardial infarction",
        "cardiac dysrhythmia",
    ],
    [
        "pneumonia",
        "respiratory failure",
        "chronic obstructive pulmonary disease",
    ],
    [
        "gastrointestinal hemorrhage",
        "liver disease",
        "pancreatic disorder",
    ],
    [
        "acute renal failure",
        "urinary tract infection",
        "chronic kidney disease",
    ],
    [
        "hemorrhage in pregnancy",
        "hypertension in pregnancy",
        "early labor",
    ],
    ["skin ulcer", "cellulitis", "dermatitis"],
    ["osteoarthritis", "pathological fracture", "back problem"],
    [
        "cardiac anomaly",
        "digestive anomaly",
        "nervous system anomaly",
    ],
    ["short gestation", "birth trauma", "neonatal jaundice"],
    [
        "fracture",
        "poisoning by medication",
        "complication of procedure",
    ],
    ["syncope", "fever of unknown origin", "abdominal pain"],
    ["screening", "history of illness", "external cause"],
];

pub(crate) const LEAVES: [&str; 4] = ["acute", "chronic", "severe", "unspecified"];

/// Normalizes a diagnosis path: lowercase segments, trimmed, joined by `|`.
pub fn normalize_path(s: &str) -> String {
    s.split('|')
        .map(|seg| {
            seg.split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase()
        })
        .collect::<Vec<_>>()
        .join("|")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DxHierarchy {
    entries: BTreeMap<String, u8>,
}

impl DxHierarchy {
    /// The built-in table: 18 roots, 3 mid levels each, 4 leaves per mid.
    pub fn standard() -> Self {
        let mut h = DxHierarchy::default();
        for (i, root) in DX_ROOTS.iter().enumerate() {
            let class = i as u8 + 1;
            h.insert(root, class);
            for mid in MIDS[i] {
                h.insert(&format!("{root}|{mid}"), class);
                for leaf in LEAVES {
                    h.insert(&format!("{root}|{mid}|{leaf} {mid}"), class);
                }
            }
        }
        h
    }

    pub fn insert(&mut self, path: &str, class: u8) {
        self.entries.insert(normalize_path(path), class);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = (&str, u8)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.matches('|').count() == 2)
            .map(|(k, &v)| (k.as_str(), v))
    }

    pub fn get(&self, path: &str) -> Option<u8> {
        self.entries.get(path).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["path", "class"])
            .map_err(|e| csv_err(path, e))?;
        for (k, v) in &self.entries {
            w.write_record([k.as_str(), &v.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut h = DxHierarchy::default();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = i as u64 + 2;
            let bad = |msg: String| Error::Parse {
                file: path.to_path_buf(),
                line,
                msg,
            };
            let p = rec.get(0).ok_or_else(|| bad("missing path".into()))?;
            let c: u8 = rec
                .get(1)
                .and_then(|c| c.parse().ok())
                .filter(|c| (1..=NUM_DX_CLASSES as u8).contains(c))
                .ok_or_else(|| bad(format!("class must be 1..={NUM_DX_CLASSES}")))?;
            h.insert(p, c);
        }
        Ok(h)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            file: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

/// Class of a diagnosis string: the most specific matching prefix of its
/// `|`-separated path wins. `None` when no level matches.
pub fn map_diagnosis(dx: &str, table: &DxHierarchy) -> Result<Option<u8>> {
    let norm = normalize_path(dx);
    if norm.replace('|', "").trim().is_empty() {
        return Err(Error::Input("empty diagnosis string".into()));
    }
    let segs: Vec<&str> = norm.split('|').collect();
    for k in (1..=segs.len()).rev() {
        if let Some(c) = table.get(&segs[..k].join("|")) {
            return Ok(Some(c));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> DxHierarchy {
        let mut h = DxHierarchy::default();
        h.insert("infection|bacterial|tbx", 1);
        h.insert("infection|bacterial", 1);
        h.insert("infection", 1);
        h.insert("circulatory|heart failure", 7);
        h
    }

    #[test]
    fn leaf_match() {
        assert_eq!(
            map_diagnosis("infection|bacterial|tbX", &fixture()).unwrap(),
            Some(1)
        );
    }

    #[test]
    fn falls_back_to_mid_level() {
        assert_eq!(
            map_diagnosis("circulatory | heart failure | congestive", &fixture()).unwrap(),
            Some(7)
        );
        assert_eq!(map_diagnosis("trauma|head", &fixture()).unwrap(), None);
        assert!(map_diagnosis(" | ", &fixture()).is_err());
    }

    #[test]
    fn standard_table_covers_all_classes() {
        let h = DxHierarchy::standard();
        let mut seen = [false; NUM_DX_CLASSES];
        for (_, c) in h.leaves() {
            assert!((1..=18).contains(&c));
            seen[c as usize - 1] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(h.leaves().count(), 18 * 3 * 4);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let h = DxHierarchy::standard();
        h.save(&p).unwrap();
        assert_eq!(DxHierarchy::load(&p).unwrap(), h);
    }
}
