use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CLS_ID, DIGIT_BASE, POINT_ID};
use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 48;
pub const PLACE_MIN: i8 = -5;
pub const PLACE_MAX: i8 = 9;
/// Number of distinct clamped place values (`PLACE_MIN..=PLACE_MAX`).
pub const PLACE_SLOTS: usize = (PLACE_MAX - PLACE_MIN + 1) as usize;

/// How an event's numeric value reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueStrategy {
    /// Raw value string appended to the description.
    #[serde(rename = "va")]
    Va,
    /// Value split into single digits before appending.
    #[serde(rename = "dsva")]
    Dsva,
    /// As `Dsva`, plus a learned place embedding on each digit.
    #[serde(rename = "dsva_dpe")]
    DsvaDpe,
    /// Value embedded separately and concatenated to the event vector.
    #[serde(rename = "vc")]
    Vc,
}

impl ValueStrategy {
    pub const ALL: [ValueStrategy; 4] = [Self::Va, Self::Dsva, Self::DsvaDpe, Self::Vc];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Va => "va",
            Self::Dsva => "dsva",
            Self::DsvaDpe => "dsva_dpe",
            Self::Vc => "vc",
        }
    }
}

impl fmt::Display for ValueStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValueStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown value mode {s:?} (va|dsva|dsva_dpe|vc)")))
    }
}

/// Description text of one event plus its optional value and unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EventDescription {
    pub text: String,
    pub value: Option<String>,
    pub unit: Option<String>,
}

/// `-?[0-9]+(\.[0-9]+)?`
pub fn is_numeric_value(s: &str) -> bool {
    let s = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    digits(int) && frac.is_none_or(digits)
}

impl EventDescription {
    pub fn new(text: impl Into<String>, value: Option<&str>, unit: Option<&str>) -> Result<Self> {
        let d = EventDescription {
            text: text.into(),
            value: value.map(str::to_string),
            unit: unit.map(str::to_string),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::Input("event description text is empty".into()));
        }
        if let Some(v) = &self.value {
            if !is_numeric_value(v) {
                return Err(Error::Input(format!("value {v:?} is not a decimal number")));
            }
        }
        Ok(())
    }
}

/// `1351` → `1 3 5 1`; `7.5` → `7 . 5`; a sign stays attached to nothing.
pub fn digit_split(value: &str) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(value.len());
    for c in value.chars() {
        parts.push(c.to_string());
    }
    parts.join(" ")
}

/// Text fed to the encoder under a text-side value strategy.
pub fn render_event_text(event: &EventDescription, strategy: ValueStrategy) -> Result<String> {
    let Some(value) = &event.value else {
        return Ok(event.text.clone());
    };
    let rendered = match strategy {
        ValueStrategy::Va => value.clone(),
        ValueStrategy::Dsva | ValueStrategy::DsvaDpe => digit_split(value),
        ValueStrategy::Vc => {
            return Err(Error::Contract(
                "VC keeps values out of the text; use the description text directly".into(),
            ))
        }
    };
    let mut out = format!("{} {}", event.text, rendered);
    if let Some(u) = &event.unit {
        out.push(' ');
        out.push_str(u);
    }
    Ok(out)
}

/// Encoder input text for any strategy (VC drops the value).
pub fn encoder_text(event: &EventDescription, strategy: ValueStrategy) -> String {
    match strategy {
        ValueStrategy::Vc => event.text.clone(),
        s => render_event_text(event, s).expect("text strategy"),
    }
}

/// Token ids of one event description with per-token digit place values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub places: Vec<Option<i8>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Place value of every atomic digit token: `k..1` left of the decimal point,
/// `-1, -2, ..` right of it, clamped to `[PLACE_MIN, PLACE_MAX]`.
pub fn digit_place_indices(ids: &[u32]) -> Vec<Option<i8>> {
    let mut places = vec![None; ids.len()];
    let is_num = |id: u32| Vocabulary::is_digit_id(id) || id == POINT_ID;
    let mut i = 0;
    while i < ids.len() {
        if !Vocabulary::is_digit_id(ids[i]) {
            i += 1;
            continue;
        }
        let start = i;
        let mut end = i;
        let mut seen_point = false;
        while end < ids.len() && is_num(ids[end]) {
            if ids[end] == POINT_ID {
                // second point or trailing point ends the number
                if seen_point
                    || !ids
                        .get(end + 1)
                        .is_some_and(|&n| Vocabulary::is_digit_id(n))
                {
                    break;
                }
                seen_point = true;
            }
            end += 1;
        }
        let point = (start..end).find(|&k| ids[k] == POINT_ID).unwrap_or(end);
        let int_digits = point - start;
        for (k, slot) in places.iter_mut().enumerate().take(point).skip(start) {
            *slot = Some(clamp_place((int_digits - (k - start)) as i64));
        }
        for (k, slot) in places.iter_mut().enumerate().take(end).skip(point + 1) {
            *slot = Some(clamp_place(-((k - point) as i64)));
        }
        i = end.max(start + 1);
    }
    places
}

fn clamp_place(p: i64) -> i8 {
    p.clamp(PLACE_MIN as i64, PLACE_MAX as i64) as i8
}

/// `[CLS]` + longest-match pieces, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(16);
    ids.push(CLS_ID);
    ids.extend(vocab.encode(text));
    let mut places = digit_place_indices(&ids);
    let keep = max_len.max(1);
    ids.truncate(keep);
    places.truncate(keep);
    TokenSequence { ids, places }
}

/// Digit id for a character `'0'..='9'`.
pub fn digit_id(c: char) -> Option<u32> {
    c.to_digit(10).map(|d| DIGIT_BASE + d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(text: &str, value: Option<&str>) -> EventDescription {
        EventDescription::new(text, value, None).unwrap()
    }

    #[test]
    fn render_examples() {
        let e = ev("creatinine", Some("1351"));
        assert_eq!(
            render_event_text(&e, ValueStrategy::Va).unwrap(),
            "creatinine 1351"
        );
        assert_eq!(
            render_event_text(&e, ValueStrategy::Dsva).unwrap(),
            "creatinine 1 3 5 1"
        );
        let a = ev("aspirin", None);
        assert_eq!(
            render_event_text(&a, ValueStrategy::Dsva).unwrap(),
            "aspirin"
        );
        assert!(matches!(
            render_event_text(&e, ValueStrategy::Vc),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unit_follows_value() {
        let e = EventDescription::new("lactate", Some("2.1"), Some("mmol/L")).unwrap();
        assert_eq!(
            render_event_text(&e, ValueStrategy::DsvaDpe).unwrap(),
            "lactate 2 . 1 mmol/L"
        );
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(EventDescription::new("x", Some("POS"), None).is_err());
        assert!(EventDescription::new("x", Some("1."), None).is_err());
        assert!(EventDescription::new("", Some("1"), None).is_err());
        assert!(EventDescription::new("x", Some("-0.25"), None).is_ok());
    }

    fn d(n: u32) -> u32 {
        DIGIT_BASE + n
    }

    #[test]
    fn places_integer() {
        let ids = [CLS_ID, 40, d(1), d(3), d(5), d(1)];
        let p = digit_place_indices(&ids);
        assert_eq!(p, vec![None, None, Some(4), Some(3), Some(2), Some(1)]);
    }

    #[test]
    fn places_decimal() {
        let p = digit_place_indices(&[d(7), POINT_ID, d(5)]);
        assert_eq!(p, vec![Some(1), None, Some(-1)]);
    }

    #[test]
    fn places_clamped() {
        let mut ids: Vec<u32> = (0..12).map(|_| d(9)).collect();
        ids.push(POINT_ID);
        ids.extend((0..7).map(|_| d(1)));
        let p = digit_place_indices(&ids);
        assert_eq!(p[0], Some(PLACE_MAX));
        assert_eq!(p[11], Some(1));
        assert_eq!(p[12], None);
        assert_eq!(p[13], Some(-1));
        assert_eq!(p[19], Some(PLACE_MIN));
    }

    #[test]
    fn places_no_digits() {
        assert!(digit_place_indices(&[CLS_ID, 30, 31])
            .iter()
            .all(Option::is_none));
    }

    #[test]
    fn strategy_parse() {
        for s in ValueStrategy::ALL {
            assert_eq!(s.as_str().parse::<ValueStrategy>().unwrap(), s);
        }
        assert!("dpe".parse::<ValueStrategy>().is_err());
    }
}
