//! Raw hospital tables in two layouts.
//!
//! Structured layout (`A`): `ICUSTAYS.csv`, `LABEVENTS.csv`,
//! `PRESCRIPTIONS.csv`, `INPUTEVENTS.csv` and the item dictionary
//! `D_ITEMS.csv`; timestamps are absolute minutes and codes are numeric item
//! ids. Free-text layout (`B`): `patient.csv`, `lab.csv`, `medication.csv`,
//! `infusionDrug.csv`; times are minute offsets from unit admission and the
//! item names double as codes.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::spec::CodeStyle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTable {
    Lab,
    Med,
    Inf,
}

/// One ICU stay row, normalized across layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawStay {
    pub patient_id: String,
    pub admission_id: String,
    pub stay_id: u64,
    pub unit: String,
    pub transferred: bool,
    pub age: f64,
    /// Sort key placing a patient's stays in time order.
    pub admit_order: (i64, i64, i64),
    /// Absolute admission time (structured layout; 0 otherwise).
    pub intime: i64,
    pub los_minutes: i64,
    /// `None` when the discharge status is missing.
    pub expired: Option<bool>,
    pub diagnoses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEvent {
    pub stay_id: u64,
    pub source: SourceTable,
    /// Minutes since ICU admission.
    pub offset: i64,
    pub code: String,
    pub description: String,
    pub value: Option<String>,
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTables {
    pub style: CodeStyle,
    pub stays: Vec<RawStay>,
    pub events: Vec<RawEvent>,
}

pub const A_FILES: [&str; 5] = [
    "ICUSTAYS.csv",
    "LABEVENTS.csv",
    "PRESCRIPTIONS.csv",
    "INPUTEVENTS.csv",
    "D_ITEMS.csv",
];
pub const B_FILES: [&str; 4] = [
    "patient.csv",
    "lab.csv",
    "medication.csv",
    "infusionDrug.csv",
];
const DX_SEP: &str = ";";

fn csv_error(path: &Path, e: csv::Error) -> Error {
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

/// Header-addressed CSV reader with file/line aware errors.
struct Table {
    path: PathBuf,
    columns: HashMap<String, usize>,
    reader: csv::Reader<std::fs::File>,
}

struct Row<'a> {
    table: &'a Table,
    line: u64,
    rec: csv::StringRecord,
}

impl Table {
    fn open(dir: &Path, name: &str, required: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(Error::Input(format!("missing table {}", path.display())));
        }
        let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(&path, e))?.clone();
        let columns: HashMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        for r in required {
            if !columns.contains_key(*r) {
                return Err(Error::Parse {
                    file: path.clone(),
                    line: 1,
                    msg: format!("missing column {r}"),
                });
            }
        }
        Ok(Table {
            path,
            columns,
            reader,
        })
    }

    fn rows(&mut self) -> Result<Vec<(u64, csv::StringRecord)>> {
        let mut out = Vec::new();
        for rec in self.reader.records() {
            let rec = rec.map_err(|e| csv_error(&self.path, e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            out.push((line, rec));
        }
        Ok(out)
    }
}

impl Row<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.table.path.clone(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn str(&self, col: &str) -> Result<&str> {
        let i = self
            .table
            .columns
            .get(col)
            .ok_or_else(|| self.err(format!("missing column {col}")))?;
        Ok(self.rec.get(*i).unwrap_or("").trim())
    }

    fn opt(&self, col: &str) -> Result<Option<String>> {
        let s = self.str(col)?;
        Ok((!s.is_empty()).then(|| s.to_string()))
    }

    fn int(&self, col: &str) -> Result<i64> {
        let s = self.str(col)?;
        s.parse()
            .map_err(|_| self.err(format!("{col}: expected integer, got {s:?}")))
    }

    fn required(&self, col: &str) -> Result<String> {
        self.opt(col)?
            .ok_or_else(|| self.err(format!("{col} is empty")))
    }
}

fn each_row(table: &mut Table, mut f: impl FnMut(&Row) -> Result<()>) -> Result<()> {
    let rows = table.rows()?;
    for (line, rec) in rows {
        let row = Row { table, line, rec };
        f(&row)?;
    }
    Ok(())
}

fn parse_age(row: &Row, col: &str) -> Result<f64> {
    let s = row.str(col)?;
    if s.is_empty() {
        return Err(row.err(format!("{col} is empty")));
    }
    // ages above 89 are masked as "> 89"
    if let Some(rest) = s.strip_prefix('>') {
        let base: f64 = rest
            .trim()
            .parse()
            .map_err(|_| row.err(format!("bad age {s:?}")))?;
        return Ok(base + 1.0);
    }
    s.parse().map_err(|_| row.err(format!("bad age {s:?}")))
}

fn split_dx(s: &str) -> Vec<String> {
    s.split(DX_SEP)
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(str::to_string)
        .collect()
}

impl RawTables {
    /// Detects the layout from the file names present in `dir`.
    pub fn detect_style(dir: &Path) -> Result<CodeStyle> {
        if dir.join(A_FILES[0]).exists() {
            Ok(CodeStyle::Structured)
        } else if dir.join(B_FILES[0]).exists() {
            Ok(CodeStyle::FreeText)
        } else {
            Err(Error::Input(format!(
                "{} holds neither {} nor {}",
                dir.display(),
                A_FILES[0],
                B_FILES[0]
            )))
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        match Self::detect_style(dir)? {
            CodeStyle::Structured => read_structured(dir),
            CodeStyle::FreeText => read_free_text(dir),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        match self.style {
            CodeStyle::Structured => write_structured(self, dir),
            CodeStyle::FreeText => write_free_text(self, dir),
        }
    }
}

fn read_structured(dir: &Path) -> Result<RawTables> {
    let mut stays = Vec::new();
    let mut t = Table::open(
        dir,
        "ICUSTAYS.csv",
        &[
            "SUBJECT_ID",
            "HADM_ID",
            "ICUSTAY_ID",
            "FIRST_CAREUNIT",
            "LAST_CAREUNIT",
            "AGE",
            "INTIME",
            "OUTTIME",
            "DOD_HOSP",
            "DIAGNOSES",
        ],
    )?;
    each_row(&mut t, |r| {
        let intime = r.int("INTIME")?;
        let first = r.required("FIRST_CAREUNIT")?;
        let last = r.required("LAST_CAREUNIT")?;
        stays.push(RawStay {
            patient_id: r.required("SUBJECT_ID")?,
            admission_id: r.required("HADM_ID")?,
            stay_id: r.int("ICUSTAY_ID")? as u64,
            transferred: first != last,
            unit: first,
            age: parse_age(r, "AGE")?,
            admit_order: (intime, 0, 0),
            intime,
            los_minutes: r.int("OUTTIME")? - intime,
            expired: Some(r.opt("DOD_HOSP")?.is_some()),
            diagnoses: split_dx(r.str("DIAGNOSES")?),
        });
        Ok(())
    })?;
    let intime: HashMap<u64, i64> = stays.iter().map(|s| (s.stay_id, s.intime)).collect();
    let mut items: HashMap<String, String> = HashMap::new();
    let mut t = Table::open(dir, "D_ITEMS.csv", &["ITEMID", "LABEL"])?;
    each_row(&mut t, |r| {
        items.insert(r.required("ITEMID")?, r.required("LABEL")?);
        Ok(())
    })?;

    let mut events = Vec::new();
    let relative = |r: &Row, stay: u64, col: &str| -> Result<i64> {
        let t0 = intime
            .get(&stay)
            .ok_or_else(|| r.err(format!("ICUSTAY_ID {stay} not in ICUSTAYS.csv")))?;
        Ok(r.int(col)? - t0)
    };
    let mut t = Table::open(
        dir,
        "LABEVENTS.csv",
        &["ICUSTAY_ID", "ITEMID", "CHARTTIME", "VALUE", "VALUEUOM"],
    )?;
    each_row(&mut t, |r| {
        let stay = r.int("ICUSTAY_ID")? as u64;
        let code = r.required("ITEMID")?;
        let description = items
            .get(&code)
            .cloned()
            .ok_or_else(|| r.err(format!("ITEMID {code} not in D_ITEMS.csv")))?;
        events.push(RawEvent {
            stay_id: stay,
            source: SourceTable::Lab,
            offset: relative(r, stay, "CHARTTIME")?,
            code,
            description,
            value: r.opt("VALUE")?,
            unit: r.opt("VALUEUOM")?,
        });
        Ok(())
    })?;
    let mut t = Table::open(
        dir,
        "PRESCRIPTIONS.csv",
        &["ICUSTAY_ID", "STARTDATE", "NDC", "DRUG"],
    )?;
    each_row(&mut t, |r| {
        let stay = r.int("ICUSTAY_ID")? as u64;
        events.push(RawEvent {
            stay_id: stay,
            source: SourceTable::Med,
            offset: relative(r, stay, "STARTDATE")?,
            code: r.required("NDC")?,
            description: r.required("DRUG")?,
            value: None,
            unit: None,
        });
        Ok(())
    })?;
    let mut t = Table::open(
        dir,
        "INPUTEVENTS.csv",
        &["ICUSTAY_ID", "CHARTTIME", "ITEMID", "RATE", "RATEUOM"],
    )?;
    each_row(&mut t, |r| {
        let stay = r.int("ICUSTAY_ID")? as u64;
        let code = r.required("ITEMID")?;
        let description = items
            .get(&code)
            .cloned()
            .ok_or_else(|| r.err(format!("ITEMID {code} not in D_ITEMS.csv")))?;
        events.push(RawEvent {
            stay_id: stay,
            source: SourceTable::Inf,
            offset: relative(r, stay, "CHARTTIME")?,
            code,
            description,
            value: r.opt("RATE")?,
            unit: r.opt("RATEUOM")?,
        });
        Ok(())
    })?;
    Ok(RawTables {
        style: CodeStyle::Structured,
        stays,
        events,
    })
}

fn read_free_text(dir: &Path) -> Result<RawTables> {
    let mut stays = Vec::new();
    let mut t = Table::open(
        dir,
        "patient.csv",
        &[
            "uniquepid",
            "patienthealthsystemstayid",
            "patientunitstayid",
            "unittype",
            "unitstaytype",
            "age",
            "hospitaldischargeyear",
            "unitvisitnumber",
            "unitdischargeoffset",
            "unitdischargestatus",
            "diagnosisstring",
        ],
    )?;
    each_row(&mut t, |r| {
        let status = r.opt("unitdischargestatus")?;
        let system = r.int("patienthealthsystemstayid")?;
        stays.push(RawStay {
            patient_id: r.required("uniquepid")?,
            admission_id: system.to_string(),
            stay_id: r.int("patientunitstayid")? as u64,
            unit: r.required("unittype")?,
            transferred: r.str("unitstaytype")?.eq_ignore_ascii_case("transfer"),
            age: parse_age(r, "age")?,
            admit_order: (
                r.int("hospitaldischargeyear")?,
                system,
                r.int("unitvisitnumber")?,
            ),
            intime: 0,
            los_minutes: r.int("unitdischargeoffset")?,
            expired: status.map(|s| s.eq_ignore_ascii_case("expired")),
            diagnoses: split_dx(r.str("diagnosisstring")?),
        });
        Ok(())
    })?;
    let mut events = Vec::new();
    let mut t = Table::open(
        dir,
        "lab.csv",
        &[
            "patientunitstayid",
            "labresultoffset",
            "labname",
            "labresult",
            "labmeasurenamesystem",
        ],
    )?;
    each_row(&mut t, |r| {
        let name = r.required("labname")?;
        events.push(RawEvent {
            stay_id: r.int("patientunitstayid")? as u64,
            source: SourceTable::Lab,
            offset: r.int("labresultoffset")?,
            code: name.clone(),
            description: name,
            value: r.opt("labresult")?,
            unit: r.opt("labmeasurenamesystem")?,
        });
        Ok(())
    })?;
    let mut t = Table::open(
        dir,
        "medication.csv",
        &["patientunitstayid", "drugstartoffset", "drugname"],
    )?;
    each_row(&mut t, |r| {
        let name = r.required("drugname")?;
        events.push(RawEvent {
            stay_id: r.int("patientunitstayid")? as u64,
            source: SourceTable::Med,
            offset: r.int("drugstartoffset")?,
            code: name.clone(),
            description: name,
            value: None,
            unit: None,
        });
        Ok(())
    })?;
    let mut t = Table::open(
        dir,
        "infusionDrug.csv",
        &[
            "patientunitstayid",
            "infusionoffset",
            "drugname",
            "drugrate",
        ],
    )?;
    each_row(&mut t, |r| {
        let name = r.required("drugname")?;
        events.push(RawEvent {
            stay_id: r.int("patientunitstayid")? as u64,
            source: SourceTable::Inf,
            offset: r.int("infusionoffset")?,
            code: name.clone(),
            description: name,
            value: r.opt("drugrate")?,
            unit: None,
        });
        Ok(())
    })?;
    Ok(RawTables {
        style: CodeStyle::FreeText,
        stays,
        events,
    })
}

struct Out {
    path: PathBuf,
    w: csv::Writer<std::fs::File>,
}

impl Out {
    fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(header).map_err(|e| csv_error(&path, e))?;
        Ok(Out { path, w })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let path = &self.path;
        self.w.write_record(fields).map_err(|e| csv_error(path, e))
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

fn opt(s: &Option<String>) -> &str {
    s.as_deref().unwrap_or("")
}

fn write_structured(t: &RawTables, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stays = Out::create(
        dir,
        "ICUSTAYS.csv",
        &[
            "SUBJECT_ID",
            "HADM_ID",
            "ICUSTAY_ID",
            "FIRST_CAREUNIT",
            "LAST_CAREUNIT",
            "AGE",
            "INTIME",
            "OUTTIME",
            "DOD_HOSP",
            "DIAGNOSES",
        ],
    )?;
    let mut intime = HashMap::new();
    for s in &t.stays {
        intime.insert(s.stay_id, s.intime);
        let last = if s.transferred {
            transfer_unit(&s.unit)
        } else {
            s.unit.clone()
        };
        let dod = match s.expired {
            Some(true) => (s.intime + s.los_minutes).to_string(),
            _ => String::new(),
        };
        stays.row([
            s.patient_id.clone(),
            s.admission_id.clone(),
            s.stay_id.to_string(),
            s.unit.clone(),
            last,
            format!("{}", s.age),
            s.intime.to_string(),
            (s.intime + s.los_minutes).to_string(),
            dod,
            s.diagnoses.join(DX_SEP),
        ])?;
    }
    let abs = |e: &RawEvent| intime.get(&e.stay_id).copied().unwrap_or(0) + e.offset;
    let mut labs = Out::create(
        dir,
        "LABEVENTS.csv",
        &["ICUSTAY_ID", "ITEMID", "CHARTTIME", "VALUE", "VALUEUOM"],
    )?;
    let mut meds = Out::create(
        dir,
        "PRESCRIPTIONS.csv",
        &["ICUSTAY_ID", "STARTDATE", "NDC", "DRUG"],
    )?;
    let mut infs = Out::create(
        dir,
        "INPUTEVENTS.csv",
        &["ICUSTAY_ID", "CHARTTIME", "ITEMID", "RATE", "RATEUOM"],
    )?;
    let mut items: BTreeMap<String, String> = BTreeMap::new();
    for e in &t.events {
        match e.source {
            SourceTable::Lab => {
                items.insert(e.code.clone(), e.description.clone());
                labs.row([
                    &e.stay_id.to_string(),
                    &e.code,
                    &abs(e).to_string(),
                    opt(&e.value),
                    opt(&e.unit),
                ])?;
            }
            SourceTable::Med => {
                meds.row([
                    &e.stay_id.to_string(),
                    &abs(e).to_string(),
                    &e.code,
                    &e.description,
                ])?;
            }
            SourceTable::Inf => {
                items.insert(e.code.clone(), e.description.clone());
                infs.row([
                    &e.stay_id.to_string(),
                    &abs(e).to_string(),
                    &e.code,
                    opt(&e.value),
                    opt(&e.unit),
                ])?;
            }
        }
    }
    let mut d_items = Out::create(dir, "D_ITEMS.csv", &["ITEMID", "LABEL"])?;
    for (k, v) in &items {
        d_items.row([k, v])?;
    }
    Ok(vec![
        stays.finish()?,
        labs.finish()?,
        meds.finish()?,
        infs.finish()?,
        d_items.finish()?,
    ])
}

fn transfer_unit(unit: &str) -> String {
    if unit == "CCU" {
        "MICU".into()
    } else {
        "CCU".into()
    }
}

fn write_free_text(t: &RawTables, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut pat = Out::create(
        dir,
        "patient.csv",
        &[
            "uniquepid",
            "patienthealthsystemstayid",
            "patientunitstayid",
            "unittype",
            "unitstaytype",
            "age",
            "hospitaldischargeyear",
            "unitvisitnumber",
            "unitdischargeoffset",
            "unitdischargestatus",
            "diagnosisstring",
        ],
    )?;
    for s in &t.stays {
        let age = if s.age > 89.0 {
            "> 89".to_string()
        } else {
            format!("{}", s.age)
        };
        let status = match s.expired {
            Some(true) => "Expired",
            Some(false) => "Alive",
            None => "",
        };
        let stay_type = if s.transferred {
            "transfer"
        } else if s.admit_order.2 > 1 {
            "readmit"
        } else {
            "admit"
        };
        pat.row([
            s.patient_id.clone(),
            s.admission_id.clone(),
            s.stay_id.to_string(),
            s.unit.clone(),
            stay_type.to_string(),
            age,
            s.admit_order.0.to_string(),
            s.admit_order.2.to_string(),
            s.los_minutes.to_string(),
            status.to_string(),
            s.diagnoses.join(DX_SEP),
        ])?;
    }
    let mut labs = Out::create(
        dir,
        "lab.csv",
        &[
            "patientunitstayid",
            "labresultoffset",
            "labname",
            "labresult",
            "labmeasurenamesystem",
        ],
    )?;
    let mut meds = Out::create(
        dir,
        "medication.csv",
        &["patientunitstayid", "drugstartoffset", "drugname"],
    )?;
    let mut infs = Out::create(
        dir,
        "infusionDrug.csv",
        &[
            "patientunitstayid",
            "infusionoffset",
            "drugname",
            "drugrate",
        ],
    )?;
    for e in &t.events {
        let stay = e.stay_id.to_string();
        let off = e.offset.to_string();
        match e.source {
            SourceTable::Lab => {
                labs.row([&stay, &off, &e.description, opt(&e.value), opt(&e.unit)])?
            }
            SourceTable::Med => meds.row([&stay, &off, &e.description])?,
            SourceTable::Inf => infs.row([&stay, &off, &e.description, opt(&e.value)])?,
        }
    }
    Ok(vec![
        pat.finish()?,
        labs.finish()?,
        meds.finish()?,
        infs.finish()?,
    ])
}
