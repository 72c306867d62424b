//! Hospital specifications and the shared clinical concept catalog.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::dx::NUM_DX_CLASSES;
use super::raw::SourceTable;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// How a hospital identifies its events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeStyle {
    /// Numeric item ids plus a dictionary of labels.
    Structured,
    /// Free-text item names used directly as identifiers.
    FreeText,
}

/// One clinical concept observable in both hospitals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub kind: SourceTable,
    /// Label in the structured hospital's dictionary.
    pub label_a: String,
    /// Free-text name in the other hospital, also its code there.
    pub label_b: String,
    /// Numeric item id (lab/infusion) or drug product code (medication).
    pub code_a: String,
    pub unit: Option<String>,
    pub mean: f64,
    pub sd: f64,
    pub decimals: usize,
    /// Shift of the value, in standard deviations per unit of severity.
    pub value_shift: f64,
    /// Log presence multiplier per unit of severity.
    pub presence_weight: f64,
    pub base_rate: f64,
    /// Diagnosis class (1-based) whose patients see this concept more often.
    pub dx_class: Option<u8>,
    /// Planted near-unique concept: emitted a fixed number of times.
    pub rare: bool,
}

impl Concept {
    pub fn has_value(&self) -> bool {
        self.kind != SourceTable::Med
    }

    pub fn label(&self, style: CodeStyle) -> &str {
        match style {
            CodeStyle::Structured => &self.label_a,
            CodeStyle::FreeText => &self.label_b,
        }
    }

    pub fn code(&self, style: CodeStyle) -> &str {
        match style {
            CodeStyle::Structured => &self.code_a,
            CodeStyle::FreeText => &self.label_b,
        }
    }
}

/// Rates of deliberately planted cohort violations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbations {
    pub minor_frac: f64,
    pub other_unit_frac: f64,
    pub transfer_frac: f64,
    pub sparse_frac: f64,
    pub long_frac: f64,
    pub later_admission_frac: f64,
    pub unknown_leaf_frac: f64,
    pub unmatched_dx_frac: f64,
    /// Occurrences of each rare concept, spread over distinct stays.
    pub rare_count: usize,
}

impl Default for Perturbations {
    fn default() -> Self {
        Perturbations {
            minor_frac: 0.03,
            other_unit_frac: 0.15,
            transfer_frac: 0.05,
            sparse_frac: 0.02,
            long_frac: 0.03,
            later_admission_frac: 0.10,
            unknown_leaf_frac: 0.10,
            unmatched_dx_frac: 0.03,
            rare_count: 4,
        }
    }
}

/// Logistic and lognormal outcome model driven by latent severity `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub mort_intercept: f64,
    pub mort_slope: f64,
    pub readm_intercept: f64,
    pub readm_slope: f64,
    /// `ln(LOS days) ~ N(los_mu + los_slope * s, los_sigma)`.
    pub los_mu: f64,
    pub los_slope: f64,
    pub los_sigma: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        OutcomeModel {
            mort_intercept: -4.27,
            mort_slope: 2.5,
            readm_intercept: -2.92,
            readm_slope: 0.8,
            los_mu: 0.89,
            los_slope: 0.3,
            los_sigma: 0.767,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospitalSpec {
    pub name: String,
    pub style: CodeStyle,
    pub n_patients: usize,
    /// Expected events inside the observation window per stay.
    pub mean_events: f64,
    /// Standard deviation of the per-hospital log-rate jitter.
    pub rate_jitter: f64,
    pub outcomes: OutcomeModel,
    pub perturb: Perturbations,
    pub concepts: Vec<Concept>,
    pub seed: u64,
}

impl HospitalSpec {
    pub fn default_a() -> Self {
        HospitalSpec {
            name: "default_a".into(),
            style: CodeStyle::Structured,
            n_patients: 3000,
            mean_events: 58.0,
            rate_jitter: 0.3,
            outcomes: OutcomeModel::default(),
            perturb: Perturbations::default(),
            concepts: catalog(),
            seed: 11,
        }
    }

    pub fn default_b() -> Self {
        HospitalSpec {
            name: "default_b".into(),
            style: CodeStyle::FreeText,
            n_patients: 3000,
            mean_events: 47.0,
            rate_jitter: 0.3,
            outcomes: OutcomeModel::default(),
            perturb: Perturbations::default(),
            concepts: catalog(),
            seed: 23,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 50 {
            return Err(Error::Config(format!(
                "n_patients = {} is below 50; splits would be degenerate",
                self.n_patients
            )));
        }
        if !(self.mean_events.is_finite() && self.mean_events >= 5.0) {
            return Err(Error::Config(format!(
                "mean_events = {} must be at least 5",
                self.mean_events
            )));
        }
        if self.concepts.iter().filter(|c| !c.rare).count() < 2 {
            return Err(Error::Config(
                "concept catalog needs at least 2 regular concepts".into(),
            ));
        }
        let fracs = [
            self.perturb.minor_frac,
            self.perturb.other_unit_frac,
            self.perturb.transfer_frac,
            self.perturb.sparse_frac,
            self.perturb.long_frac,
            self.perturb.later_admission_frac,
            self.perturb.unknown_leaf_frac,
            self.perturb.unmatched_dx_frac,
        ];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(
                "perturbation fractions must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

impl FromStr for HospitalSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default_a" | "a" => Ok(Self::default_a()),
            "default_b" | "b" => Ok(Self::default_b()),
            other => Err(Error::Config(format!(
                "unknown hospital spec {other:?} (default_a|default_b)"
            ))),
        }
    }
}

impl fmt::Display for CodeStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeStyle::Structured => "structured",
            CodeStyle::FreeText => "free_text",
        })
    }
}

// (name, free-text alias, unit, mean, sd, decimals)
type LabRow = (
    &'static str,
    Option<&'static str>,
    &'static str,
    f64,
    f64,
    usize,
);

const LABS: &[LabRow] = &[
    ("sodium", None, "mmol/L", 139.0, 4.0, 0),
    ("potassium", None, "mmol/L", 4.1, 0.6, 1),
    ("chloride", None, "mmol/L", 103.0, 5.0, 0),
    ("bicarbonate", Some("hco3"), "mmol/L", 24.0, 4.0, 0),
    ("anion gap", None, "mmol/L", 14.0, 3.0, 0),
    ("urea nitrogen", Some("bun"), "mg/dL", 25.0, 15.0, 0),
    ("creatinine", None, "mg/dL", 1.3, 0.9, 1),
    ("glucose", None, "mg/dL", 135.0, 45.0, 0),
    ("calcium total", Some("calcium"), "mg/dL", 8.5, 0.7, 1),
    ("magnesium", None, "mg/dL", 2.0, 0.3, 1),
    ("phosphate", Some("phosphorus"), "mg/dL", 3.6, 1.1, 1),
    ("hemoglobin", Some("hgb"), "g/dL", 10.5, 2.0, 1),
    ("hematocrit", Some("hct"), "%", 31.0, 6.0, 1),
    (
        "white blood cells",
        Some("wbc x 1000"),
        "K/uL",
        11.0,
        5.0,
        1,
    ),
    (
        "platelet count",
        Some("platelets x 1000"),
        "K/uL",
        220.0,
        100.0,
        0,
    ),
    ("red blood cells", Some("rbc"), "m/uL", 3.5, 0.7, 2),
    ("mcv", None, "fL", 90.0, 7.0, 0),
    ("mch", None, "pg", 30.0, 2.5, 1),
    ("mchc", None, "g/dL", 33.0, 1.5, 1),
    ("rdw", None, "%", 15.0, 2.0, 1),
    ("pt", None, "sec", 15.0, 4.0, 1),
    ("ptt", None, "sec", 35.0, 12.0, 1),
    ("inr", Some("pt - inr"), "ratio", 1.4, 0.5, 1),
    ("lactate", None, "mmol/L", 2.2, 1.5, 1),
    ("ph", None, "units", 7.38, 0.07, 2),
    ("po2", Some("pao2"), "mm Hg", 110.0, 60.0, 0),
    ("pco2", Some("paco2"), "mm Hg", 41.0, 9.0, 0),
    ("base excess", None, "mEq/L", 0.0, 4.0, 0),
    ("total co2", None, "mEq/L", 25.0, 5.0, 0),
    ("oxygen saturation", Some("o2 sat"), "%", 95.0, 4.0, 0),
    ("albumin", None, "g/dL", 3.1, 0.6, 1),
    (
        "bilirubin total",
        Some("total bilirubin"),
        "mg/dL",
        1.2,
        1.5,
        1,
    ),
    (
        "alanine aminotransferase",
        Some("alt sgpt"),
        "IU/L",
        60.0,
        90.0,
        0,
    ),
    (
        "aspartate aminotransferase",
        Some("ast sgot"),
        "IU/L",
        80.0,
        120.0,
        0,
    ),
    ("alkaline phosphatase", None, "IU/L", 110.0, 70.0, 0),
    ("lipase", None, "IU/L", 60.0, 80.0, 0),
    ("amylase", None, "IU/L", 70.0, 60.0, 0),
    ("troponin t", None, "ng/mL", 0.1, 0.3, 2),
    ("creatine kinase", Some("cpk"), "IU/L", 300.0, 600.0, 0),
    ("creatine kinase mb", Some("cpk mb"), "ng/mL", 8.0, 12.0, 0),
    ("fibrinogen", None, "mg/dL", 350.0, 150.0, 0),
    (
        "lactate dehydrogenase",
        Some("ldh"),
        "IU/L",
        300.0,
        200.0,
        0,
    ),
    ("uric acid", None, "mg/dL", 5.5, 2.5, 1),
    ("osmolality", None, "mOsm/kg", 295.0, 12.0, 0),
    ("ionized calcium", None, "mmol/L", 1.12, 0.1, 2),
    ("neutrophils", Some("polys"), "%", 78.0, 10.0, 1),
    ("lymphocytes", Some("lymphs"), "%", 12.0, 7.0, 1),
    ("monocytes", Some("monos"), "%", 6.0, 3.0, 1),
    ("eosinophils", Some("eos"), "%", 1.0, 1.2, 1),
    ("basophils", Some("basos"), "%", 0.3, 0.3, 1),
    ("bands", None, "%", 4.0, 6.0, 0),
    ("triglycerides", None, "mg/dL", 150.0, 90.0, 0),
    (
        "cholesterol total",
        Some("total cholesterol"),
        "mg/dL",
        150.0,
        45.0,
        0,
    ),
    ("ammonia", None, "umol/L", 40.0, 30.0, 0),
    ("cortisol", None, "ug/dL", 20.0, 10.0, 1),
    (
        "thyroid stimulating hormone",
        Some("tsh"),
        "uIU/mL",
        2.0,
        2.0,
        2,
    ),
    (
        "vancomycin trough",
        Some("vancomycin trough"),
        "ug/mL",
        15.0,
        6.0,
        1,
    ),
    ("digoxin level", None, "ng/mL", 1.0, 0.5, 1),
    ("specific gravity", None, "ratio", 1.015, 0.008, 3),
    ("protein", None, "mg/dL", 30.0, 40.0, 0),
    ("ketone", None, "mg/dL", 5.0, 8.0, 0),
    ("natriuretic peptide", Some("bnp"), "pg/mL", 800.0, 900.0, 0),
    ("c reactive protein", Some("crp"), "mg/L", 80.0, 70.0, 1),
    ("procalcitonin", None, "ng/mL", 2.0, 4.0, 2),
    ("d dimer", None, "ng/mL", 1500.0, 1500.0, 0),
    ("haptoglobin", None, "mg/dL", 150.0, 80.0, 0),
    ("ferritin", None, "ng/mL", 400.0, 500.0, 0),
    ("iron", None, "ug/dL", 50.0, 30.0, 0),
];

/// Analytes also measured in urine or other fluids.
const SPECIMENS: &[(&str, &[&str])] = &[
    (
        "urine",
        &[
            "sodium",
            "potassium",
            "chloride",
            "creatinine",
            "glucose",
            "protein",
            "osmolality",
            "ketone",
            "specific gravity",
            "urea nitrogen",
            "magnesium",
            "phosphate",
            "red blood cells",
            "white blood cells",
            "bilirubin total",
            "uric acid",
        ],
    ),
    (
        "venous",
        &[
            "ph",
            "po2",
            "pco2",
            "base excess",
            "total co2",
            "lactate",
            "oxygen saturation",
            "potassium",
            "ionized calcium",
            "glucose",
        ],
    ),
    (
        "pleural fluid",
        &[
            "protein",
            "glucose",
            "lactate dehydrogenase",
            "white blood cells",
            "red blood cells",
            "ph",
            "albumin",
            "amylase",
        ],
    ),
    (
        "ascites",
        &[
            "protein",
            "albumin",
            "white blood cells",
            "red blood cells",
            "glucose",
            "lactate dehydrogenase",
            "amylase",
            "bilirubin total",
        ],
    ),
    (
        "cerebrospinal fluid",
        &[
            "protein",
            "glucose",
            "white blood cells",
            "red blood cells",
            "lactate",
        ],
    ),
];

const MEDS: &[&str] = &[
    "acetaminophen",
    "aspirin",
    "atorvastatin",
    "metoprolol tartrate",
    "lisinopril",
    "furosemide",
    "heparin sodium",
    "enoxaparin",
    "insulin regular",
    "insulin glargine",
    "pantoprazole",
    "famotidine",
    "ondansetron",
    "docusate sodium",
    "senna",
    "polyethylene glycol",
    "bisacodyl",
    "magnesium sulfate",
    "potassium chloride",
    "calcium gluconate",
    "sodium bicarbonate",
    "vancomycin",
    "piperacillin tazobactam",
    "cefepime",
    "ceftriaxone",
    "meropenem",
    "levofloxacin",
    "azithromycin",
    "metronidazole",
    "fluconazole",
    "acyclovir",
    "hydrocortisone",
    "methylprednisolone",
    "prednisone",
    "albuterol",
    "ipratropium bromide",
    "lorazepam",
    "midazolam",
    "haloperidol",
    "quetiapine",
    "morphine sulfate",
    "hydromorphone",
    "oxycodone",
    "fentanyl citrate",
    "gabapentin",
    "levetiracetam",
    "phenytoin",
    "amiodarone",
    "diltiazem",
    "digoxin",
    "warfarin",
    "clopidogrel",
    "simvastatin",
    "amlodipine",
    "hydralazine",
    "labetalol",
    "carvedilol",
    "spironolactone",
    "metformin",
    "glipizide",
    "levothyroxine",
    "thiamine",
    "folic acid",
    "multivitamin",
    "cyanocobalamin",
    "nicotine patch",
    "chlorhexidine gluconate",
    "sodium chloride flush",
    "dextrose",
    "glucagon",
    "lactulose",
    "rifaximin",
    "octreotide",
    "tamsulosin",
    "finasteride",
    "sertraline",
    "citalopram",
    "trazodone",
    "mirtazapine",
    "zolpidem",
    "melatonin",
    "allopurinol",
    "colchicine",
    "tacrolimus",
    "mycophenolate mofetil",
    "sucralfate",
    "simethicone",
    "loperamide",
    "nystatin",
    "bacitracin",
    "mupirocin",
    "lidocaine",
    "tramadol",
    "ketorolac",
    "ibuprofen",
    "naloxone",
    "atropine",
    "epinephrine",
    "phytonadione",
    "ferrous sulfate",
    "sodium phosphate",
    "potassium phosphate",
    "albumin human",
    "filgrastim",
    "epoetin alfa",
    "sevelamer",
    "calcitriol",
    "cinacalcet",
];

const STRENGTHS: [&str; 2] = ["low dose", "high dose"];
const FORMS: [&str; 3] = ["tab", "inj", "soln"];

// (name, rate unit, mean rate, sd)
const INFUSIONS: &[(&str, &str, f64, f64)] = &[
    ("norepinephrine", "mcg/kg/min", 0.15, 0.12),
    ("epinephrine", "mcg/kg/min", 0.08, 0.06),
    ("vasopressin", "units/min", 0.04, 0.01),
    ("phenylephrine", "mcg/kg/min", 1.2, 0.8),
    ("dopamine", "mcg/kg/min", 6.0, 4.0),
    ("dobutamine", "mcg/kg/min", 4.0, 2.5),
    ("milrinone", "mcg/kg/min", 0.4, 0.2),
    ("propofol", "mcg/kg/min", 30.0, 18.0),
    ("dexmedetomidine", "mcg/kg/hr", 0.6, 0.3),
    ("midazolam", "mg/hr", 3.0, 2.0),
    ("fentanyl", "mcg/hr", 75.0, 50.0),
    ("morphine", "mg/hr", 3.0, 2.0),
    ("hydromorphone", "mg/hr", 0.8, 0.5),
    ("ketamine", "mg/kg/hr", 0.5, 0.3),
    ("insulin", "units/hr", 4.0, 3.0),
    ("heparin", "units/hr", 1000.0, 400.0),
    ("amiodarone", "mg/min", 0.8, 0.3),
    ("diltiazem", "mg/hr", 10.0, 4.0),
    ("esmolol", "mcg/kg/min", 100.0, 60.0),
    ("nicardipine", "mg/hr", 7.0, 4.0),
    ("nitroglycerin", "mcg/min", 40.0, 30.0),
    ("nitroprusside", "mcg/kg/min", 1.0, 0.8),
    ("labetalol", "mg/hr", 60.0, 40.0),
    ("furosemide", "mg/hr", 10.0, 6.0),
    ("bumetanide", "mg/hr", 1.0, 0.5),
    ("sodium bicarbonate", "mEq/hr", 75.0, 30.0),
    ("potassium chloride", "mEq/hr", 10.0, 3.0),
    ("magnesium sulfate", "grams/hr", 1.0, 0.5),
    ("calcium gluconate", "grams/hr", 1.0, 0.5),
    ("dextrose", "mL/hr", 80.0, 40.0),
    ("sodium chloride", "mL/hr", 100.0, 60.0),
    ("lactated ringers", "mL/hr", 120.0, 70.0),
    ("albumin", "mL/hr", 100.0, 50.0),
    ("packed red blood cells", "mL/hr", 150.0, 60.0),
    ("fresh frozen plasma", "mL/hr", 150.0, 60.0),
    ("platelets", "mL/hr", 150.0, 60.0),
    ("cisatracurium", "mcg/kg/min", 2.0, 1.0),
    ("vecuronium", "mcg/kg/min", 1.0, 0.5),
    ("octreotide", "mcg/hr", 50.0, 20.0),
    ("pantoprazole", "mg/hr", 8.0, 2.0),
];

const RARE: &[&str] = &[
    "cryoglobulin",
    "porphobilinogen",
    "chromogranin",
    "aldolase",
    "beta carotene",
    "hexosaminidase",
];

const CATALOG_SEED: u64 = 0x5eed_ca7a;

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// The shared concept catalog. Deterministic; identical for every hospital.
pub fn catalog() -> Vec<Concept> {
    let mut rng = RngStream::new(CATALOG_SEED);
    let mut out = Vec::new();
    let draw = |kind: SourceTable, rng: &mut RngStream| {
        let marker = rng.bernoulli(0.3);
        let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        let presence_weight = if marker {
            sign * rng.uniform_range(1.0, 1.8)
        } else {
            0.0
        };
        let value_shift = if kind != SourceTable::Med && rng.bernoulli(0.5) {
            let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            sign * rng.uniform_range(1.0, 1.5)
        } else {
            0.0
        };
        let base_rate = (rng.normal() * 0.9).exp();
        let dx_class = rng
            .bernoulli(0.3)
            .then(|| 1 + rng.below(NUM_DX_CLASSES) as u8);
        (presence_weight, value_shift, base_rate, dx_class)
    };

    let mut lab_index = 0;
    let mut push_lab =
        |out: &mut Vec<Concept>, rng: &mut RngStream, row: &LabRow, specimen: Option<&str>| {
            let (name, alias, unit, mean, sd, decimals) = *row;
            let (pw, vs, rate, dx) = draw(SourceTable::Lab, rng);
            let b = alias.unwrap_or(name);
            let (label_a, label_b, rate) = match specimen {
                None => (title_case(name), b.to_string(), rate),
                Some(sp) => (
                    format!("{}, {}", title_case(name), title_case(sp)),
                    format!("{b} ({sp})"),
                    rate * 0.3,
                ),
            };
            out.push(Concept {
                kind: SourceTable::Lab,
                label_a,
                label_b,
                code_a: (50800 + lab_index).to_string(),
                unit: Some(unit.to_string()),
                mean,
                sd,
                decimals,
                value_shift: vs,
                presence_weight: pw,
                base_rate: rate,
                dx_class: dx,
                rare: false,
            });
            lab_index += 1;
        };
    for row in LABS {
        push_lab(&mut out, &mut rng, row, None);
    }
    for (specimen, names) in SPECIMENS {
        for name in *names {
            let row = LABS
                .iter()
                .find(|r| r.0 == *name)
                .expect("specimen analyte in lab table");
            push_lab(&mut out, &mut rng, row, Some(specimen));
        }
    }
    for (i, drug) in MEDS.iter().enumerate() {
        for (j, strength) in STRENGTHS.iter().enumerate() {
            let (pw, _, rate, dx) = draw(SourceTable::Med, &mut rng);
            let form = FORMS[(i + j) % FORMS.len()];
            out.push(Concept {
                kind: SourceTable::Med,
                label_a: format!("{} {}", title_case(drug), strength),
                label_b: format!(
                    "{} {} {}",
                    drug.to_uppercase(),
                    strength.to_uppercase(),
                    form.to_uppercase()
                ),
                code_a: format!("{:011}", 409_000_000 + (2 * i + j) as u64 * 104_729),
                unit: None,
                mean: 0.0,
                sd: 0.0,
                decimals: 0,
                value_shift: 0.0,
                presence_weight: pw,
                base_rate: rate * 0.6,
                dx_class: dx,
                rare: false,
            });
        }
    }
    for (i, (drug, unit, mean, sd)) in INFUSIONS.iter().enumerate() {
        let (pw, vs, rate, dx) = draw(SourceTable::Inf, &mut rng);
        out.push(Concept {
            kind: SourceTable::Inf,
            label_a: title_case(drug),
            label_b: format!("{drug} ({unit})"),
            code_a: (30000 + i).to_string(),
            unit: Some(unit.to_string()),
            mean: *mean,
            sd: *sd,
            decimals: 2,
            value_shift: vs,
            presence_weight: pw,
            base_rate: rate * 0.5,
            dx_class: dx,
            rare: false,
        });
    }
    for (i, name) in RARE.iter().enumerate() {
        out.push(Concept {
            kind: SourceTable::Lab,
            label_a: title_case(name),
            label_b: name.to_string(),
            code_a: (51900 + i).to_string(),
            unit: Some("mg/dL".into()),
            mean: 10.0,
            sd: 3.0,
            decimals: 1,
            value_shift: 0.0,
            presence_weight: 0.0,
            base_rate: 0.0,
            dx_class: None,
            rare: true,
        });
    }
    out
}
