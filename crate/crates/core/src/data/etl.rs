//! Cohort extraction and outcome labels.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::dx::{map_diagnosis, DxHierarchy};
use super::raw::{RawEvent, RawStay, RawTables, SourceTable};
use super::{ClinicalEvent, LabelSet, PatientRecord, MAX_EVENTS, WINDOW_MINUTES};
use crate::error::{Error, Result};
use crate::text::is_numeric_value;

const MINUTES_PER_DAY: i64 = 1440;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortFilters {
    /// Unit type accepted as a medical ICU.
    pub unit: String,
    /// Patients must be strictly older.
    pub min_age: f64,
    /// Stays must last strictly longer (minutes).
    pub min_los_minutes: i64,
    /// Codes occurring fewer times dataset-wide are removed.
    pub min_code_count: usize,
    /// Stays with fewer events are removed.
    pub min_events: usize,
    pub max_events: usize,
    pub window_minutes: i64,
}

impl Default for CohortFilters {
    fn default() -> Self {
        CohortFilters {
            unit: "MICU".into(),
            min_age: 18.0,
            min_los_minutes: WINDOW_MINUTES,
            min_code_count: 5,
            min_events: 5,
            max_events: MAX_EVENTS,
            window_minutes: WINDOW_MINUTES,
        }
    }
}

/// Stay counts remaining after each step.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortStats {
    pub stays: usize,
    pub unit_no_transfer: usize,
    pub adult: usize,
    pub long_enough: usize,
    pub first_stay: usize,
    pub codes_removed: usize,
    pub enough_events: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub samples: Vec<PatientRecord>,
    pub stats: CohortStats,
}

/// Outcome labels of one cohort stay. `admission` holds every ICU stay of the
/// same hospital admission, including `stay` itself.
pub fn assign_labels(stay: &RawStay, admission: &[&RawStay], dx: &DxHierarchy) -> Result<LabelSet> {
    let mort = stay
        .expired
        .ok_or_else(|| Error::Input(format!("stay {} has no discharge status", stay.stay_id)))?;
    let mut classes = Vec::new();
    for d in &stay.diagnoses {
        if let Some(c) = map_diagnosis(d, dx)? {
            classes.push(c);
        }
    }
    classes.sort_unstable();
    classes.dedup();
    Ok(LabelSet {
        readm: admission.len() > 1,
        mort,
        los3: stay.los_minutes > 3 * MINUTES_PER_DAY,
        los7: stay.los_minutes > 7 * MINUTES_PER_DAY,
        dx: classes,
    })
}

fn to_clinical(e: &RawEvent) -> ClinicalEvent {
    // non-numeric results carry no usable value
    let numeric = e.value.as_deref().is_some_and(is_numeric_value);
    ClinicalEvent {
        code: e.code.clone(),
        description: e.description.clone(),
        value: if numeric { e.value.clone() } else { None },
        unit: if numeric { e.unit.clone() } else { None },
        offset: e.offset,
    }
}

fn event_order(a: &ClinicalEvent, b: &ClinicalEvent) -> std::cmp::Ordering {
    (a.offset, &a.code, &a.description, &a.value, &a.unit).cmp(&(
        b.offset,
        &b.code,
        &b.description,
        &b.value,
        &b.unit,
    ))
}

/// Applies, in order: unit and no-transfer, age, length of stay, first stay
/// per patient, dataset-wide rare-code removal, minimum event count, and
/// time-ordered truncation. The last three steps repeat until nothing
/// changes so that the output is a fixed point of the pipeline.
pub fn build_cohort(raw: &RawTables, filters: &CohortFilters, dx: &DxHierarchy) -> Result<Cohort> {
    let mut stats = CohortStats {
        stays: raw.stays.len(),
        ..Default::default()
    };
    let mut kept: Vec<&RawStay> = raw
        .stays
        .iter()
        .filter(|s| s.unit == filters.unit && !s.transferred)
        .collect();
    stats.unit_no_transfer = kept.len();
    kept.retain(|s| s.age > filters.min_age);
    stats.adult = kept.len();
    kept.retain(|s| s.los_minutes > filters.min_los_minutes);
    stats.long_enough = kept.len();

    let mut first: BTreeMap<&str, &RawStay> = BTreeMap::new();
    for s in kept {
        let slot = first.entry(s.patient_id.as_str()).or_insert(s);
        if (s.admit_order, s.stay_id) < (slot.admit_order, slot.stay_id) {
            *slot = s;
        }
    }
    let mut cohort: Vec<&RawStay> = first.into_values().collect();
    cohort.sort_by_key(|s| s.stay_id);
    stats.first_stay = cohort.len();

    let index: HashMap<u64, usize> = cohort
        .iter()
        .enumerate()
        .map(|(i, s)| (s.stay_id, i))
        .collect();
    let mut events: Vec<Vec<ClinicalEvent>> = vec![Vec::new(); cohort.len()];
    for e in &raw.events {
        if e.offset < 0 || e.offset >= filters.window_minutes {
            continue;
        }
        if let Some(&i) = index.get(&e.stay_id) {
            events[i].push(to_clinical(e));
        }
    }
    for ev in &mut events {
        ev.sort_by(event_order);
    }

    let mut alive: Vec<bool> = vec![true; cohort.len()];
    let mut removed: HashSet<String> = HashSet::new();
    loop {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (ev, _) in events.iter().zip(&alive).filter(|(_, &a)| a) {
            for e in ev {
                *counts.entry(e.code.as_str()).or_insert(0) += 1;
            }
        }
        let rare: HashSet<String> = counts
            .into_iter()
            .filter(|&(_, n)| n < filters.min_code_count)
            .map(|(c, _)| c.to_string())
            .collect();
        let mut changed = !rare.is_empty();
        for (ev, a) in events.iter_mut().zip(alive.iter_mut()) {
            if !*a {
                continue;
            }
            ev.retain(|e| !rare.contains(&e.code));
            if ev.len() < filters.min_events {
                *a = false;
                changed = true;
            } else if ev.len() > filters.max_events {
                ev.truncate(filters.max_events);
                changed = true;
            }
        }
        removed.extend(rare);
        if !changed {
            break;
        }
    }
    stats.codes_removed = removed.len();
    stats.enough_events = alive.iter().filter(|&&a| a).count();

    let mut by_admission: HashMap<(&str, &str), Vec<&RawStay>> = HashMap::new();
    for s in &raw.stays {
        by_admission
            .entry((s.patient_id.as_str(), s.admission_id.as_str()))
            .or_default()
            .push(s);
    }
    let mut samples = Vec::new();
    for ((stay, ev), a) in cohort.iter().zip(events).zip(alive) {
        if !a {
            continue;
        }
        let adm = &by_admission[&(stay.patient_id.as_str(), stay.admission_id.as_str())];
        samples.push(PatientRecord {
            stay_id: stay.stay_id,
            events: ev,
            labels: assign_labels(stay, adm, dx)?,
        });
    }
    stats.truncated = samples.len();
    Ok(Cohort { samples, stats })
}

/// Re-serializes cohort samples as raw tables: every stay of the sampled
/// patients, with events only on the sampled stays. Valued events land in the
/// lab table, the rest in the medication table.
pub fn events_to_raw(samples: &[PatientRecord], raw: &RawTables) -> RawTables {
    let sampled: HashSet<u64> = samples.iter().map(|s| s.stay_id).collect();
    let patients: HashSet<&str> = raw
        .stays
        .iter()
        .filter(|s| sampled.contains(&s.stay_id))
        .map(|s| s.patient_id.as_str())
        .collect();
    let stays: Vec<RawStay> = raw
        .stays
        .iter()
        .filter(|s| patients.contains(s.patient_id.as_str()))
        .cloned()
        .collect();
    let mut events = Vec::new();
    for s in samples {
        for e in &s.events {
            events.push(RawEvent {
                stay_id: s.stay_id,
                source: if e.value.is_some() {
                    SourceTable::Lab
                } else {
                    SourceTable::Med
                },
                offset: e.offset,
                code: e.code.clone(),
                description: e.description.clone(),
                value: e.value.clone(),
                unit: e.unit.clone(),
            });
        }
    }
    RawTables {
        style: raw.style,
        stays,
        events,
    }
}
