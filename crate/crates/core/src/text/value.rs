use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized scalar for the separate value path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VcValue {
    pub z: f64,
    pub present: bool,
}

impl VcValue {
    pub const MISSING: VcValue = VcValue {
        z: 0.0,
        present: false,
    };
}

/// Per-code z-score statistics fitted on a training split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueNormalizer {
    stats: BTreeMap<String, (f64, f64)>,
}

impl ValueNormalizer {
    /// Fits mean and population standard deviation per code.
    pub fn fit<'a>(observations: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut acc: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
        for (code, raw) in observations {
            let v = parse_value(raw)?;
            let e = acc.entry(code.to_string()).or_insert((0.0, 0.0, 0));
            e.0 += v;
            e.1 += v * v;
            e.2 += 1;
        }
        let stats = acc
            .into_iter()
            .map(|(code, (s, ss, n))| {
                let n = n as f64;
                let mean = s / n;
                let var = (ss / n - mean * mean).max(0.0);
                let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
                (code, (mean, std))
            })
            .collect();
        Ok(ValueNormalizer { stats })
    }

    pub fn with_stats(stats: impl IntoIterator<Item = (String, (f64, f64))>) -> Self {
        ValueNormalizer {
            stats: stats.into_iter().collect(),
        }
    }

    pub fn stats(&self, code: &str) -> Option<(f64, f64)> {
        self.stats.get(code).copied()
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    /// z-score of `value` for `code`; codes without statistics map to 0.
    pub fn prepare(&self, code: &str, value: Option<&str>) -> Result<VcValue> {
        let Some(raw) = value else {
            return Ok(VcValue::MISSING);
        };
        let v = parse_value(raw)?;
        let z = match self.stats.get(code) {
            Some(&(mean, std)) => (v - mean) / std,
            None => 0.0,
        };
        Ok(VcValue { z, present: true })
    }
}

fn parse_value(raw: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Input(format!("cannot parse value {raw:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn z_score_examples() {
        let n = ValueNormalizer::fit([("k", "1"), ("k", "3")]).unwrap();
        assert_eq!(n.stats("k"), Some((2.0, 1.0)));
        assert_eq!(n.prepare("k", Some("4")).unwrap().z, 2.0);
        assert_eq!(n.prepare("k", Some("2")).unwrap().z, 0.0);
        assert_eq!(n.prepare("k", None).unwrap(), VcValue::MISSING);
    }

    #[test]
    fn unparseable_is_input_error() {
        let n = ValueNormalizer::default();
        assert!(matches!(n.prepare("k", Some("abc")), Err(Error::Input(_))));
    }

    #[test]
    fn constant_code_uses_unit_scale() {
        let n = ValueNormalizer::fit([("k", "5"), ("k", "5")]).unwrap();
        assert_eq!(n.stats("k"), Some((5.0, 1.0)));
    }
}
