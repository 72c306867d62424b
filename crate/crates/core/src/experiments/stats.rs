//! Seed aggregation and two-sided t-tests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Which t-test compares two seed vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTest {
    /// Unequal-variance, unpaired.
    #[default]
    Welch,
    /// Paired by seed.
    Paired,
}

impl TTest {
    pub fn as_str(self) -> &'static str {
        match self {
            TTest::Welch => "welch",
            TTest::Paired => "paired",
        }
    }
}

impl fmt::Display for TTest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TTest {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "welch" => Ok(TTest::Welch),
            "paired" => Ok(TTest::Paired),
            other => Err(Error::Config(format!(
                "unknown t-test {other:?}; expected welch or paired"
            ))),
        }
    }
}

/// Sample mean and standard error (sample std over the square root of n).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    (mean, (sample_var(xs, mean) / n as f64).sqrt())
}

fn sample_var(xs: &[f64], mean: f64) -> f64 {
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Metric of one configuration over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub per_seed: BTreeMap<u64, f64>,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl RunResult {
    pub fn from_seeds(per_seed: BTreeMap<u64, f64>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Input("no seed results to aggregate".into()));
        }
        let xs: Vec<f64> = per_seed.values().copied().collect();
        let (mean, se) = mean_se(&xs);
        Ok(RunResult {
            n: xs.len(),
            per_seed,
            mean,
            se,
        })
    }

    pub fn values(&self) -> Vec<f64> {
        self.per_seed.values().copied().collect()
    }
}

/// Outcome of comparing a run against its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub comparison: String,
    /// `None` when both samples have zero spread.
    pub t: Option<f64>,
    pub p: f64,
    pub marker: String,
}

/// `**` below 0.01, `*` below 0.05, empty otherwise.
pub fn marker(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// Two-sided p-value of `t` with `df` degrees of freedom.
fn two_sided(t: f64, df: f64) -> Result<f64> {
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Numeric(format!("t distribution with df {df}: {e}")))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Zero spread on both sides: p is 0 when the means differ and 1 otherwise.
fn degenerate(diff: f64) -> (Option<f64>, f64) {
    (None, if diff == 0.0 { 1.0 } else { 0.0 })
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input(format!(
            "t-test needs at least 2 values per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("t-test input is not finite".into()));
    }
    Ok(())
}

/// Welch's unequal-variance t-test: `(t, p)`.
pub fn welch(a: &[f64], b: &[f64]) -> Result<(Option<f64>, f64)> {
    check(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (a.iter().sum::<f64>() / na, b.iter().sum::<f64>() / nb);
    let (qa, qb) = (sample_var(a, ma) / na, sample_var(b, mb) / nb);
    let s2 = qa + qb;
    if s2 == 0.0 {
        return Ok(degenerate(ma - mb));
    }
    let t = (ma - mb) / s2.sqrt();
    let df = s2 * s2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    Ok((Some(t), two_sided(t, df)?))
}

/// Paired t-test on `a[i] - b[i]`: `(t, p)`.
pub fn paired(a: &[f64], b: &[f64]) -> Result<(Option<f64>, f64)> {
    check(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Input(format!(
            "paired t-test on {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let v = sample_var(&d, m) / n;
    if v == 0.0 {
        return Ok(degenerate(m));
    }
    let t = m / v.sqrt();
    Ok((Some(t), two_sided(t, n - 1.0)?))
}

/// Compares `a` against baseline `b`.
pub fn significance(
    comparison: impl Into<String>,
    a: &[f64],
    b: &[f64],
    kind: TTest,
) -> Result<SignificanceReport> {
    let (t, p) = match kind {
        TTest::Welch => welch(a, b)?,
        TTest::Paired => paired(a, b)?,
    };
    Ok(SignificanceReport {
        comparison: comparison.into(),
        t,
        p,
        marker: marker(p).to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_uses_sample_std() {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let (m, se) = mean_se(&xs);
        assert_eq!(m, 5.5);
        // sample variance of 1..10 is 55/6
        assert!((se - (55.0f64 / 6.0 / 10.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_se(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn welch_reference() {
        // means 2 and 16/3, variances 1 and 7/3, n = 3 each:
        // t = (2 - 16/3) / sqrt(10/9) and df = (10/9)^2 / ((1/9 + 49/81) / 2)
        let (t, p) = welch(&[1.0, 2.0, 3.0], &[4.0, 5.0, 7.0]).unwrap();
        let t_hand = (2.0 - 16.0 / 3.0) / (10.0f64 / 9.0).sqrt();
        assert!((t.unwrap() - t_hand).abs() < 1e-12);
        assert!((t.unwrap() + 3.162_277_660_168_379).abs() < 1e-6);
        assert!((p - 0.041_914_517_471_454).abs() < 1e-6);
    }

    #[test]
    fn paired_reference() {
        let a = [0.31, 0.35, 0.29, 0.33];
        let b = [0.28, 0.30, 0.30, 0.27];
        let (t, p) = paired(&a, &b).unwrap();
        assert!((t.unwrap() - 2.099_689_418_026_844).abs() < 1e-9);
        assert!((p - 0.126_602_631_554_927).abs() < 1e-6);
    }

    #[test]
    fn degenerate_and_identical() {
        let a = [0.5, 0.5, 0.5];
        assert_eq!(welch(&a, &a).unwrap(), (None, 1.0));
        assert_eq!(welch(&a, &[0.6, 0.6, 0.6]).unwrap(), (None, 0.0));
        let x = [0.1, 0.4, 0.2];
        assert_eq!(welch(&x, &x).unwrap().1, 1.0);
        assert_eq!(paired(&x, &x).unwrap().1, 1.0);
        assert!(matches!(welch(&[1.0], &x), Err(Error::Input(_))));
    }

    #[test]
    fn huge_effect() {
        let a: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 10.0).collect();
        assert!(welch(&a, &b).unwrap().1 < 1e-6);
    }

    #[test]
    fn markers() {
        for (p, m) in [
            (0.0, "**"),
            (0.009, "**"),
            (0.01, "*"),
            (0.049, "*"),
            (0.05, ""),
            (0.5, ""),
        ] {
            assert_eq!(marker(p), m, "p = {p}");
        }
    }
}
