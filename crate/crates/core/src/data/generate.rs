//! Synthetic hospital generator.
//!
//! Each patient has a latent severity `s ~ N(0, 1)`. Severity shifts lab
//! values, changes how often marker concepts appear, and drives mortality,
//! readmission and length of stay through a fixed logistic/lognormal model.

use std::collections::BTreeSet;

use super::dx::{DX_ROOTS, LEAVES, MIDS, NUM_DX_CLASSES};
use super::raw::{RawEvent, RawStay, RawTables, SourceTable};
use super::spec::{CodeStyle, Concept, HospitalSpec};
use super::WINDOW_MINUTES;
use crate::error::Result;
use crate::tensor::RngStream;

const MINUTES_PER_DAY: f64 = 1440.0;
const POST_WINDOW_SPAN: i64 = 36 * 60;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn units(style: CodeStyle) -> (&'static str, [&'static str; 4]) {
    match style {
        CodeStyle::Structured => ("MICU", ["SICU", "CCU", "CSRU", "TSICU"]),
        CodeStyle::FreeText => ("MICU", ["SICU", "CCU-CTICU", "Neuro ICU", "Med-Surg ICU"]),
    }
}

/// Renders `x` with `decimals` digits, never as negative zero.
fn format_value(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

struct Sampler<'a> {
    spec: &'a HospitalSpec,
    regular: Vec<usize>,
    rate: Vec<f64>,
}

struct Patient {
    severity: f64,
    dx_classes: Vec<u8>,
}

impl Sampler<'_> {
    fn concept_value(&self, c: &Concept, s: f64, rng: &mut RngStream) -> Option<String> {
        if !c.has_value() {
            return None;
        }
        let mut x = c.mean + c.sd * (c.value_shift * s + rng.normal());
        if c.mean > 0.0 {
            x = x.max(0.0);
        }
        Some(format_value(x, c.decimals))
    }

    fn event(&self, stay: u64, ci: usize, offset: i64, s: f64, rng: &mut RngStream) -> RawEvent {
        let style = self.spec.style;
        let c = &self.spec.concepts[ci];
        let unit = match (style, c.kind) {
            // the free-text infusion name already carries its unit
            (CodeStyle::FreeText, SourceTable::Inf) => None,
            _ => c.unit.clone(),
        };
        RawEvent {
            stay_id: stay,
            source: c.kind,
            offset,
            code: c.code(style).to_string(),
            description: c.label(style).to_string(),
            value: self.concept_value(c, s, rng),
            unit,
        }
    }

    fn stay_events(&self, stay: u64, p: &Patient, los: i64, rng: &mut RngStream) -> Vec<RawEvent> {
        let pert = &self.spec.perturb;
        let mut cum = Vec::with_capacity(self.regular.len());
        let mut total = 0.0;
        for (k, &ci) in self.regular.iter().enumerate() {
            let c = &self.spec.concepts[ci];
            let mut w = self.rate[k] * (c.presence_weight * p.severity).exp();
            if c.dx_class.is_some_and(|d| p.dx_classes.contains(&d)) {
                w *= 3.0;
            }
            total += w;
            cum.push(total);
        }
        let pick = |rng: &mut RngStream| {
            let u = rng.uniform() * total;
            self.regular[cum.partition_point(|&c| c <= u).min(cum.len() - 1)]
        };

        let n_window = if rng.bernoulli(pert.sparse_frac) {
            1 + rng.below(4)
        } else if rng.bernoulli(pert.long_frac) {
            151 + rng.below(70)
        } else {
            let lam = self.spec.mean_events * (0.3 * rng.normal() - 0.045).exp();
            lam.round().max(1.0) as usize
        };
        let span = los.clamp(1, WINDOW_MINUTES);
        let mut out = Vec::new();
        for _ in 0..n_window {
            let off = rng.below(span as usize) as i64;
            out.push(self.event(stay, pick(rng), off, p.severity, rng));
        }
        if los > WINDOW_MINUTES {
            let late_span = (los.min(WINDOW_MINUTES + POST_WINDOW_SPAN) - WINDOW_MINUTES) as usize;
            for _ in 0..(n_window * 2 / 5) {
                let off = WINDOW_MINUTES + rng.below(late_span) as i64;
                out.push(self.event(stay, pick(rng), off, p.severity, rng));
            }
        }
        out
    }
}

fn dx_strings(classes: &[u8], spec: &HospitalSpec, rng: &mut RngStream) -> Vec<String> {
    let mut out = Vec::new();
    for &c in classes {
        let root = DX_ROOTS[c as usize - 1];
        let mid = MIDS[c as usize - 1][rng.below(3)];
        let s = if rng.bernoulli(spec.perturb.unmatched_dx_frac) {
            format!("unclassified|finding {}", rng.below(50))
        } else if rng.bernoulli(spec.perturb.unknown_leaf_frac) {
            format!("{root}|{mid}|other {mid}")
        } else {
            format!("{root}|{mid}|{} {mid}", LEAVES[rng.below(LEAVES.len())])
        };
        out.push(match spec.style {
            CodeStyle::Structured => s,
            // the free-text hospital writes segments in title case
            CodeStyle::FreeText => s
                .split('|')
                .map(|seg| {
                    let mut ch = seg.chars();
                    ch.next()
                        .map(|f| f.to_uppercase().collect::<String>() + ch.as_str())
                        .unwrap_or_default()
                })
                .collect::<Vec<_>>()
                .join("|"),
        });
    }
    out
}

/// Generates one hospital's raw tables. Deterministic per `spec.seed`.
pub fn generate_hospital(spec: &HospitalSpec) -> Result<RawTables> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed);
    let regular: Vec<usize> = (0..spec.concepts.len())
        .filter(|&i| !spec.concepts[i].rare)
        .collect();
    let rate: Vec<f64> = regular
        .iter()
        .map(|&i| spec.concepts[i].base_rate * (spec.rate_jitter * rng.normal()).exp())
        .collect();
    let sampler = Sampler {
        spec,
        regular,
        rate,
    };
    let (micu, others) = units(spec.style);
    let out_model = &spec.outcomes;
    let pert = &spec.perturb;

    let mut stays = Vec::new();
    let mut events = Vec::new();
    let mut next_stay: u64 = match spec.style {
        CodeStyle::Structured => 200_000,
        CodeStyle::FreeText => 140_000,
    };
    let mut next_adm: u64 = match spec.style {
        CodeStyle::Structured => 100_000,
        CodeStyle::FreeText => 120_000,
    };
    let los_minutes = |s: f64, rng: &mut RngStream| -> i64 {
        let ln_days =
            out_model.los_mu + out_model.los_slope * s + out_model.los_sigma * rng.normal();
        (ln_days.exp() * MINUTES_PER_DAY).round().max(30.0) as i64
    };

    for p in 0..spec.n_patients {
        let severity = rng.normal();
        let mut set = BTreeSet::new();
        for _ in 0..1 + rng.below(3) {
            set.insert(1 + rng.below(NUM_DX_CLASSES) as u8);
        }
        let patient = Patient {
            severity,
            dx_classes: set.into_iter().collect(),
        };
        let patient_id = match spec.style {
            CodeStyle::Structured => (10_000 + p).to_string(),
            CodeStyle::FreeText => format!("{:03}-{:06}", 2 + p % 7, p),
        };
        let age = if rng.bernoulli(pert.minor_frac) {
            15 + rng.below(3)
        } else {
            19 + rng.below(77)
        } as f64;
        let mort = rng.bernoulli(sigmoid(
            out_model.mort_intercept + out_model.mort_slope * severity,
        ));
        let readm = rng.bernoulli(sigmoid(
            out_model.readm_intercept + out_model.readm_slope * severity,
        ));
        let later = !mort && rng.bernoulli(pert.later_admission_frac);
        let mut clock = rng.below(5 * 365 * 1440) as i64;
        let year = 2014 + rng.below(2) as i64;

        // (admission index, visit number, last stay of its admission)
        let mut plan = vec![(0usize, 1i64, !readm)];
        if readm {
            plan.push((0, 2, true));
        }
        if later {
            plan.push((1, 1, true));
        }
        let adm_ids = [next_adm, next_adm + 1];
        next_adm += 2;
        for (k, &(adm, visit, last_of_adm)) in plan.iter().enumerate() {
            let first = k == 0;
            let unit = if first && rng.bernoulli(pert.other_unit_frac) {
                others[rng.below(others.len())]
            } else {
                micu
            };
            let transferred = first && rng.bernoulli(pert.transfer_frac);
            let los = los_minutes(severity, &mut rng);
            let stay_id = next_stay;
            next_stay += 1;
            let expired = last_of_adm && mort;
            stays.push(RawStay {
                patient_id: patient_id.clone(),
                admission_id: adm_ids[adm].to_string(),
                stay_id,
                unit: unit.to_string(),
                transferred,
                age: age + adm as f64,
                admit_order: match spec.style {
                    CodeStyle::Structured => (clock, 0, 0),
                    CodeStyle::FreeText => (year + adm as i64, adm_ids[adm] as i64, visit),
                },
                intime: match spec.style {
                    CodeStyle::Structured => clock,
                    CodeStyle::FreeText => 0,
                },
                los_minutes: los,
                expired: Some(expired),
                diagnoses: dx_strings(&patient.dx_classes, spec, &mut rng),
            });
            events.extend(sampler.stay_events(stay_id, &patient, los, &mut rng));
            clock += los
                + if adm == 0 && visit == 1 && readm {
                    60 + rng.below(2000) as i64
                } else {
                    30 * 1440
                };
        }
    }

    // each rare concept lands in `rare_count` distinct stays
    let rare: Vec<usize> = (0..spec.concepts.len())
        .filter(|&i| spec.concepts[i].rare)
        .collect();
    for &ci in &rare {
        let mut picked = BTreeSet::new();
        while picked.len() < pert.rare_count.min(stays.len()) {
            picked.insert(rng.below(stays.len()));
        }
        for si in picked {
            let s = &stays[si];
            let off = rng.below(s.los_minutes.clamp(1, WINDOW_MINUTES) as usize) as i64;
            events.push(sampler.event(s.stay_id, ci, off, 0.0, &mut rng));
        }
    }
    Ok(RawTables {
        style: spec.style,
        stays,
        events,
    })
}

fn stem(word: &str) -> String {
    for suffix in ["ations", "ation", "ing", "es", "ed", "s"] {
        if let Some(base) = word.strip_suffix(suffix) {
            if base.len() >= 3 {
                return base.to_string();
            }
        }
    }
    word.to_string()
}

/// Lowercased, crudely stemmed alphabetic words of a description.
pub fn description_stems(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| w.len() >= 2)
        .map(stem)
        .collect()
}

/// Jaccard overlap of the description word stems used by two hospitals.
pub fn stem_jaccard(a: &RawTables, b: &RawTables) -> f64 {
    let stems = |t: &RawTables| -> BTreeSet<String> {
        let descs: BTreeSet<&str> = t.events.iter().map(|e| e.description.as_str()).collect();
        descs.into_iter().flat_map(description_stems).collect()
    };
    let (sa, sb) = (stems(a), stems(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        return 0.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}
