//! Result files: per-seed CSV, aggregate JSON, few-shot curves and PCA points.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{mean_se, significance, SignificanceReport, TTest};
use crate::error::{Error, Result};

pub const SEEDS_FILE: &str = "seeds.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const FEW_SHOT_FILE: &str = "few_shot.csv";
pub const PCA_FILE: &str = "pca.csv";

/// One test metric of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    /// `single/<data>`, `transfer/<source>-><target>/<ratio>` or `pooled/<data>`.
    pub scenario: String,
    pub encoder: String,
    pub strategy: String,
    pub task: String,
    pub seed: u64,
    pub metric: f64,
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            file: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ResultRow = row.map_err(|e| csv_err(path, e))?;
        if !row.metric.is_finite() {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: out.len() as u64 + 2,
                msg: "metric is not finite".into(),
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Rows of every per-seed file below `dir`, visited in path order.
pub fn read_rows_dir(dir: &Path) -> Result<Vec<ResultRow>> {
    let mut files: Vec<PathBuf> = crate::manifest::files_below(dir)?
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n == SEEDS_FILE))
        .collect();
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no {SEEDS_FILE} below {}",
            dir.display()
        )));
    }
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_rows(&f)?);
    }
    Ok(out)
}

/// Aggregated metric of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub scenario: String,
    pub encoder: String,
    pub strategy: String,
    pub task: String,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    pub seeds: Vec<u64>,
    /// Comparison against the single-domain cell of the evaluated dataset.
    pub significance: Option<SignificanceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ttest: TTest,
    pub cells: Vec<Cell>,
}

impl Aggregate {
    pub fn find(&self, scenario: &str, encoder: &str, strategy: &str, task: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| {
            c.scenario == scenario
                && c.encoder == encoder
                && c.strategy == strategy
                && c.task == task
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// The single-domain scenario a transfer or pooled cell is compared with.
pub fn baseline_of(scenario: &str) -> Option<String> {
    let mut parts = scenario.split('/');
    match (parts.next()?, parts.next()?) {
        ("pooled", data) => Some(format!("single/{data}")),
        ("transfer", pair) => Some(format!("single/{}", pair.split_once("->")?.1)),
        _ => None,
    }
}

type Key = (String, String, String, String);

/// Groups rows into cells and tests each against its baseline.
pub fn aggregate(rows: &[ResultRow], ttest: TTest) -> Result<Aggregate> {
    let mut groups: BTreeMap<Key, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.scenario.clone(),
            r.encoder.clone(),
            r.strategy.clone(),
            r.task.clone(),
        );
        if groups
            .entry(key)
            .or_default()
            .insert(r.seed, r.metric)
            .is_some()
        {
            return Err(Error::Input(format!(
                "duplicate result for {} {} {} {} seed {}",
                r.scenario, r.encoder, r.strategy, r.task, r.seed
            )));
        }
    }
    let mut cells = Vec::with_capacity(groups.len());
    for ((scenario, encoder, strategy, task), per_seed) in &groups {
        let xs: Vec<f64> = per_seed.values().copied().collect();
        let (mean, se) = mean_se(&xs);
        let significance = match baseline_of(scenario) {
            Some(base) => match groups.get(&(
                base.clone(),
                encoder.clone(),
                strategy.clone(),
                task.clone(),
            )) {
                Some(b) => compare(&format!("{scenario} vs {base}"), per_seed, b, ttest)?,
                None => None,
            },
            None => None,
        };
        cells.push(Cell {
            scenario: scenario.clone(),
            encoder: encoder.clone(),
            strategy: strategy.clone(),
            task: task.clone(),
            n: xs.len(),
            mean,
            se,
            seeds: per_seed.keys().copied().collect(),
            significance,
        });
    }
    Ok(Aggregate { ttest, cells })
}

fn compare(
    label: &str,
    a: &BTreeMap<u64, f64>,
    b: &BTreeMap<u64, f64>,
    kind: TTest,
) -> Result<Option<SignificanceReport>> {
    let (xa, xb): (Vec<f64>, Vec<f64>) = match kind {
        TTest::Welch => (a.values().copied().collect(), b.values().copied().collect()),
        TTest::Paired => a
            .iter()
            .filter_map(|(s, x)| b.get(s).map(|y| (*x, *y)))
            .unzip(),
    };
    if xa.len() < 2 || xb.len() < 2 {
        return Ok(None);
    }
    significance(label, &xa, &xb, kind).map(Some)
}

/// One point of a few-shot transfer curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub task: String,
    pub encoder: String,
    pub strategy: String,
    pub source: String,
    pub target: String,
    pub ratio: f64,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

/// Transfer cells as curve points, ordered by series then ratio.
pub fn few_shot_curves(agg: &Aggregate) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for c in &agg.cells {
        let mut parts = c.scenario.split('/');
        if parts.next() != Some("transfer") {
            continue;
        }
        let bad = || Error::Input(format!("malformed transfer scenario {:?}", c.scenario));
        let (source, target) = parts
            .next()
            .and_then(|p| p.split_once("->"))
            .ok_or_else(bad)?;
        let ratio: f64 = parts.next().and_then(|r| r.parse().ok()).ok_or_else(bad)?;
        out.push(CurvePoint {
            task: c.task.clone(),
            encoder: c.encoder.clone(),
            strategy: c.strategy.clone(),
            source: source.into(),
            target: target.into(),
            ratio,
            n: c.n,
            mean: c.mean,
            se: c.se,
        });
    }
    out.sort_by(|a, b| {
        (&a.task, &a.encoder, &a.strategy, &a.source, &a.target)
            .cmp(&(&b.task, &b.encoder, &b.strategy, &b.source, &b.target))
            .then(a.ratio.total_cmp(&b.ratio))
    });
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot of mean AUPRC against ratio for one task, one line per series.
pub fn render_few_shot_svg(task: &str, points: &[CurvePoint]) -> String {
    let pts: Vec<&CurvePoint> = points.iter().filter(|p| p.task == task).collect();
    let (w, h, left, right, top, bottom) = (560.0, 360.0, 60.0, 170.0, 30.0, 50.0);
    let ratios: Vec<f64> = {
        let mut r: Vec<f64> = pts.iter().map(|p| p.ratio).collect();
        r.sort_by(f64::total_cmp);
        r.dedup();
        r
    };
    let y_max = pts.iter().map(|p| p.mean + p.se).fold(0.1f64, f64::max);
    let y_max = ((y_max * 10.0).ceil() / 10.0).min(1.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let xpos = |r: f64| {
        let i = ratios.iter().position(|&x| x == r).unwrap_or(0);
        left + if ratios.len() > 1 {
            plot_w * i as f64 / (ratios.len() - 1) as f64
        } else {
            plot_w / 2.0
        }
    };
    let ypos = |v: f64| top + plot_h * (1.0 - v / y_max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{task}: test AUPRC by target fraction</text>"#,
        left + plot_w / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = ypos(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/>"#,
            left - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    for &r in &ratios {
        let x = xpos(r);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{r}</text>"#,
            top + plot_h + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">fraction of target training data</text>"#,
        left + plot_w / 2.0,
        h - 10.0
    );
    let mut series: BTreeMap<(String, String, String, String), Vec<&CurvePoint>> = BTreeMap::new();
    for p in &pts {
        series
            .entry((
                p.encoder.clone(),
                p.strategy.clone(),
                p.source.clone(),
                p.target.clone(),
            ))
            .or_default()
            .push(p);
    }
    for (i, ((enc, strat, src, tgt), ps)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let line: Vec<String> = ps
            .iter()
            .map(|p| format!("{:.2},{:.2}", xpos(p.ratio), ypos(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            line.join(" ")
        );
        for p in ps {
            let x = xpos(p.ratio);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#,
                ypos((p.mean - p.se).max(0.0)),
                ypos((p.mean + p.se).min(y_max))
            );
            let _ = writeln!(
                s,
                r#"<circle cx="{x:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                ypos(p.mean)
            );
        }
        let ly = top + 14.0 * i as f64 + 6.0;
        let lx = left + plot_w + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{enc} {strat} {src}&#8594;{tgt}</text>"#,
            lx + 20.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the curve CSV and one SVG per task into `dir`.
pub fn write_few_shot(dir: &Path, points: &[CurvePoint]) -> Result<Vec<PathBuf>> {
    let path = dir.join(FEW_SHOT_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let mut out = vec![path];
    let tasks: BTreeSet<&str> = points.iter().map(|p| p.task.as_str()).collect();
    for t in tasks {
        let p = dir.join(format!("few_shot_{t}.svg"));
        std::fs::write(&p, render_few_shot_svg(t, points)).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

/// One stay projected onto the first two principal components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub x: f64,
    pub y: f64,
    pub source: String,
    pub label: String,
}

pub fn write_pca_csv(path: &Path, points: &[PcaPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for p in points {
        w.serialize(p).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
