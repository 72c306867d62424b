//! Multi-seed experiment scenarios: single-domain training, transfer to a
//! new hospital (zero and few shot), and pooled training across hospitals.

mod audit;
mod pca;
mod report;
mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, PatientRecord, Split};
use crate::encoders::{CodeEmbedding, MlmConfig};
use crate::error::{Error, Result};
use crate::predictor::{
    evaluate, train_model, FeatureSpace, Model, ModelConfig, PreparedSet, PretrainReport,
    TrainConfig, TrainReport,
};
use crate::tensor::{RngStream, Tensor};

pub use audit::{Access, AccessLog, Part, Purpose};
pub use pca::{pca_project, Pca};
pub use report::{
    aggregate, baseline_of, few_shot_curves, read_rows, read_rows_dir, render_few_shot_svg,
    write_few_shot, write_pca_csv, write_rows, Aggregate, Cell, CurvePoint, PcaPoint, ResultRow,
    AGGREGATE_FILE, FEW_SHOT_FILE, PCA_FILE, SEEDS_FILE,
};
pub use stats::{
    marker, mean_se, paired, significance, welch, RunResult, SignificanceReport, TTest,
};

/// Default few-shot fractions of the target training split.
pub const FEW_SHOT_RATIOS: [f64; 6] = [0.0, 0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Single,
    Transfer,
    Pooled,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Single => "single",
            Scenario::Transfer => "transfer",
            Scenario::Pooled => "pooled",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Scenario::Single),
            "transfer" => Ok(Scenario::Transfer),
            "pooled" => Ok(Scenario::Pooled),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Everything that determines an experiment's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mlm: MlmConfig,
    pub w2v_epochs: usize,
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
    pub ttest: TTest,
    /// Worker threads for seed runs; 1 runs them in order on this thread.
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Single,
            source: None,
            target: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mlm: MlmConfig::default(),
            w2v_epochs: 5,
            seeds: (0..10).collect(),
            ratios: FEW_SHOT_RATIOS.to_vec(),
            ttest: TTest::Welch,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    /// Checks the settings every scenario depends on.
    pub fn validate_run(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mlm.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "seeds must be distinct: {:?}",
                self.seeds
            )));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!(
                "few-shot ratio {r} is outside [0, 1]"
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// [`validate_run`](Self::validate_run) plus the dataset paths the scenario needs.
    pub fn validate(&self) -> Result<()> {
        self.validate_run()?;
        let need_target = matches!(self.scenario, Scenario::Transfer | Scenario::Pooled);
        if self.source.is_none() || (need_target && self.target.is_none()) {
            return Err(Error::Config(format!(
                "{} needs {}",
                self.scenario,
                if need_target {
                    "both a source and a target dataset"
                } else {
                    "a dataset"
                }
            )));
        }
        Ok(())
    }
}

/// A named cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, records: Vec<PatientRecord>) -> Self {
        Dataset {
            name: name.into(),
            records,
        }
    }

    /// The 65/15/20 partition of `seed`.
    pub fn split(&self, seed: u64) -> Result<Split<PatientRecord>> {
        split_dataset(&self.records, seed).map_err(|e| e.context(&self.name))
    }
}

/// One trained model of a seed run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub metric: f64,
    pub model: Model,
    pub report: TrainReport,
}

/// Runs `f` for every seed, on up to `jobs` threads, keeping seed order.
pub fn for_seeds<T: Send>(
    seeds: &[u64],
    jobs: usize,
    f: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let run = |s: u64| f(s).map_err(|e| e.context(format!("seed {s}")));
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| run(s)).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| run(s)).collect())
}

fn seed_rng(seed: u64, label: &str) -> RngStream {
    RngStream::new(seed).split_named(label)
}

/// Builds, optionally pretrains and trains one model on prepared splits.
fn fit_model(
    cfg: &ExperimentConfig,
    features: FeatureSpace,
    train: &PreparedSet,
    valid: &PreparedSet,
    seed: u64,
) -> Result<(Model, TrainReport)> {
    let mut rng = seed_rng(seed, "model");
    let mut model = Model::new(cfg.model.clone(), features, &mut rng)?;
    model.pretrain(train, &cfg.mlm, cfg.w2v_epochs, &mut rng)?;
    let report = train_model(&mut model, train, valid, &cfg.train, &mut rng)?;
    Ok((model, report))
}

fn fit_features(cfg: &ExperimentConfig, train: &[PatientRecord]) -> Result<FeatureSpace> {
    let m = &cfg.model;
    FeatureSpace::fit(m.encoder, m.strategy, m.max_tokens, m.bpe_vocab, train)
}

/// Fits the feature space on the training split of `seed` and runs the
/// configured pretraining only.
pub fn pretrain_seed(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    seed: u64,
    audit: &AccessLog,
) -> Result<(Model, PretrainReport)> {
    let split = ds.split(seed)?;
    audit.record(seed, &ds.name, Part::Train, Purpose::Fit);
    audit.record(seed, &ds.name, Part::Train, Purpose::Train);
    let features = fit_features(cfg, &split.train)?;
    let train = features.prepare(&split.train, cfg.model.task)?;
    let mut rng = seed_rng(seed, "model");
    let mut model = Model::new(cfg.model.clone(), features, &mut rng)?;
    let report = model.pretrain(&train, &cfg.mlm, cfg.w2v_epochs, &mut rng)?;
    Ok((model, report))
}

/// Trains on `ds` with the split of `seed` and scores its test split.
pub fn train_single(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    seed: u64,
    audit: &AccessLog,
) -> Result<SeedRun> {
    let split = ds.split(seed)?;
    let task = cfg.model.task;
    audit.record(seed, &ds.name, Part::Train, Purpose::Fit);
    let features = fit_features(cfg, &split.train)?;
    let train = features.prepare(&split.train, task)?;
    let valid = features.prepare(&split.valid, task)?;
    audit.record(seed, &ds.name, Part::Train, Purpose::Train);
    audit.record(seed, &ds.name, Part::Valid, Purpose::Select);
    let (model, report) = fit_model(cfg, features, &train, &valid, seed)?;
    audit.record(seed, &ds.name, Part::Test, Purpose::Test);
    let test = model.features.prepare(&split.test, task)?;
    let metric = evaluate(&model, &test)?;
    Ok(SeedRun {
        seed,
        metric,
        model,
        report,
    })
}

pub struct SingleOutcome {
    pub result: RunResult,
    pub runs: Vec<SeedRun>,
}

pub fn run_single(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    audit: &AccessLog,
) -> Result<SingleOutcome> {
    cfg.validate_run()?;
    let runs = for_seeds(&cfg.seeds, cfg.jobs, |s| train_single(cfg, ds, s, audit))?;
    let result = RunResult::from_seeds(runs.iter().map(|r| (r.seed, r.metric)).collect())?;
    Ok(SingleOutcome { result, runs })
}

/// Moves a source model into the target feature space: text models keep
/// everything, code models get fresh rows for every unseen target key, and
/// value statistics are refit on the target training split.
pub fn adapt_to_target(source: &Model, target_train: &[PatientRecord], seed: u64) -> Result<Model> {
    let mut model = source.clone();
    if let Some(codes) = &source.features.codes {
        let emb = CodeEmbedding::bind(&model.store)
            .ok_or_else(|| Error::Contract("missing code table".into()))?;
        let keys = model.features.keys_of(target_train);
        let (extended, _) = emb.adapt(&mut model.store, codes, &keys, &mut seed_rng(seed, "adapt"));
        model.features.codes = Some(extended);
    }
    if model.features.normalizer.is_some() {
        model.features.normalizer = Some(FeatureSpace::fit_values(target_train)?);
    }
    Ok(model)
}

/// Seeded `ratio` fraction of `n` indices, at least one.
pub fn few_shot_subset(n: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    seed_rng(seed, &format!("few-shot {ratio}")).shuffle(&mut idx);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Metric per ratio, in the order of `cfg.ratios`.
pub fn transfer_seed(
    cfg: &ExperimentConfig,
    source: &Model,
    target: &Dataset,
    seed: u64,
    audit: &AccessLog,
) -> Result<Vec<(f64, f64)>> {
    let split = target.split(seed)?;
    let task = cfg.model.task;
    audit.record(seed, &target.name, Part::Train, Purpose::Fit);
    let base = adapt_to_target(source, &split.train, seed)?;
    let train = base.features.prepare(&split.train, task)?;
    let valid = base.features.prepare(&split.valid, task)?;
    let test = base.features.prepare(&split.test, task)?;
    let mut out = Vec::with_capacity(cfg.ratios.len());
    for &ratio in &cfg.ratios {
        let model = if ratio == 0.0 {
            base.clone()
        } else {
            audit.record(seed, &target.name, Part::Train, Purpose::Train);
            audit.record(seed, &target.name, Part::Valid, Purpose::Select);
            let sub = train.select(&few_shot_subset(train.len(), ratio, seed));
            let mut m = base.clone();
            let mut rng = seed_rng(seed, &format!("fine-tune {ratio}"));
            train_model(&mut m, &sub, &valid, &cfg.train, &mut rng)
                .map_err(|e| e.context(format!("ratio {ratio}")))?;
            m
        };
        audit.record(seed, &target.name, Part::Test, Purpose::Test);
        out.push((ratio, evaluate(&model, &test)?));
    }
    Ok(out)
}

pub struct TransferOutcome {
    /// Single-domain runs on the source hospital.
    pub source: SingleOutcome,
    pub per_ratio: Vec<(f64, RunResult)>,
}

fn per_ratio(
    ratios: &[f64],
    seeds: &[u64],
    metrics: &[Vec<(f64, f64)>],
) -> Result<Vec<(f64, RunResult)>> {
    ratios
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let m: BTreeMap<u64, f64> = seeds
                .iter()
                .zip(metrics)
                .map(|(&s, v)| (s, v[i].1))
                .collect();
            Ok((r, RunResult::from_seeds(m)?))
        })
        .collect()
}

/// Transfer from already trained source models, one per seed of `cfg`.
pub fn run_transfer_from(
    cfg: &ExperimentConfig,
    sources: &BTreeMap<u64, Model>,
    target: &Dataset,
    audit: &AccessLog,
) -> Result<Vec<(f64, RunResult)>> {
    cfg.validate_run()?;
    let metrics = for_seeds(&cfg.seeds, cfg.jobs, |s| {
        let src = sources
            .get(&s)
            .ok_or_else(|| Error::Input("no source model for this seed".into()))?;
        transfer_seed(cfg, src, target, s, audit)
    })?;
    per_ratio(&cfg.ratios, &cfg.seeds, &metrics)
}

/// Trains on `source` per seed, then evaluates and fine-tunes on `target`.
pub fn run_transfer(
    cfg: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    audit: &AccessLog,
) -> Result<TransferOutcome> {
    let src = run_single(cfg, source, audit)?;
    let models = src.runs.iter().map(|r| (r.seed, r.model.clone())).collect();
    let per_ratio = run_transfer_from(cfg, &models, target, audit)?;
    Ok(TransferOutcome {
        source: src,
        per_ratio,
    })
}

/// One pooled model and its per-hospital test sets.
#[derive(Debug, Clone)]
pub struct PooledSeed {
    pub seed: u64,
    pub model: Model,
    pub report: TrainReport,
    pub train_size: usize,
    /// Test metric per dataset, in input order.
    pub metrics: Vec<f64>,
    pub tests: Vec<PreparedSet>,
}

/// Trains one model on the union of the training splits of `datasets`.
pub fn pooled_seed(
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    seed: u64,
    audit: &AccessLog,
) -> Result<PooledSeed> {
    let task = cfg.model.task;
    let splits = datasets
        .iter()
        .map(|d| d.split(seed))
        .collect::<Result<Vec<_>>>()?;
    let all_train: Vec<PatientRecord> = splits
        .iter()
        .flat_map(|s| s.train.iter().cloned())
        .collect();
    for d in datasets {
        audit.record(seed, &d.name, Part::Train, Purpose::Fit);
        audit.record(seed, &d.name, Part::Train, Purpose::Train);
        audit.record(seed, &d.name, Part::Valid, Purpose::Select);
    }
    let features = fit_features(cfg, &all_train)?;
    let mut train = PreparedSet::default();
    let mut valid = PreparedSet::default();
    for s in &splits {
        train = train.concat(&features.prepare(&s.train, task)?)?;
        valid = valid.concat(&features.prepare(&s.valid, task)?)?;
    }
    let (model, report) = fit_model(cfg, features, &train, &valid, seed)?;
    let mut metrics = Vec::new();
    let mut tests = Vec::new();
    for (d, s) in datasets.iter().zip(&splits) {
        audit.record(seed, &d.name, Part::Test, Purpose::Test);
        let test = model.features.prepare(&s.test, task)?;
        metrics.push(evaluate(&model, &test).map_err(|e| e.context(&d.name))?);
        tests.push(test);
    }
    Ok(PooledSeed {
        seed,
        model,
        report,
        train_size: train.len(),
        metrics,
        tests,
    })
}

pub struct PooledOutcome {
    pub runs: Vec<PooledSeed>,
    /// Result per dataset, in input order.
    pub per_dataset: Vec<(String, RunResult)>,
}

pub fn run_pooled(
    cfg: &ExperimentConfig,
    datasets: &[Dataset],
    audit: &AccessLog,
) -> Result<PooledOutcome> {
    cfg.validate_run()?;
    if datasets.len() < 2 {
        return Err(Error::Config(
            "pooled training needs at least two datasets".into(),
        ));
    }
    let runs = for_seeds(&cfg.seeds, cfg.jobs, |s| {
        pooled_seed(cfg, datasets, s, audit)
    })?;
    let per_dataset = datasets
        .iter()
        .enumerate()
        .map(|(i, d)| {
            Ok((
                d.name.clone(),
                RunResult::from_seeds(runs.iter().map(|r| (r.seed, r.metrics[i])).collect())?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(PooledOutcome { runs, per_dataset })
}

/// Final-state representations of `model` on every test set, projected to
/// two dimensions jointly.
pub fn pca_points(model: &Model, tests: &[(String, &PreparedSet)]) -> Result<(Pca, Vec<PcaPoint>)> {
    let mut data = Vec::new();
    let mut meta = Vec::new();
    let mut cols = 0;
    for (name, set) in tests {
        let r = model.representations(set)?;
        cols = r.cols();
        data.extend_from_slice(r.data());
        for t in &set.targets {
            let label = if t.len() == 1 {
                format!("{}", t[0] as u8)
            } else {
                let on: Vec<String> = t
                    .iter()
                    .enumerate()
                    .filter(|(_, &y)| y == 1.0)
                    .map(|(i, _)| (i + 1).to_string())
                    .collect();
                on.join("|")
            };
            meta.push((name.clone(), label));
        }
    }
    let x = Tensor::matrix(meta.len(), cols, data)?;
    let pca = pca_project(&x, 2)?;
    let points = meta
        .into_iter()
        .enumerate()
        .map(|(i, (source, label))| PcaPoint {
            x: pca.coords.row(i)[0],
            y: pca.coords.row(i)[1],
            source,
            label,
        })
        .collect();
    Ok((pca, points))
}

/// Per-seed rows of a single-domain result.
pub fn single_rows(cfg: &ModelConfig, dataset: &str, result: &RunResult) -> Vec<ResultRow> {
    rows(cfg, &format!("single/{dataset}"), result)
}

pub fn transfer_rows(
    cfg: &ModelConfig,
    source: &str,
    target: &str,
    per_ratio: &[(f64, RunResult)],
) -> Vec<ResultRow> {
    per_ratio
        .iter()
        .flat_map(|(r, res)| rows(cfg, &format!("transfer/{source}->{target}/{r}"), res))
        .collect()
}

pub fn pooled_rows(cfg: &ModelConfig, per_dataset: &[(String, RunResult)]) -> Vec<ResultRow> {
    per_dataset
        .iter()
        .flat_map(|(d, res)| rows(cfg, &format!("pooled/{d}"), res))
        .collect()
}

fn rows(cfg: &ModelConfig, scenario: &str, result: &RunResult) -> Vec<ResultRow> {
    result
        .per_seed
        .iter()
        .map(|(&seed, &metric)| ResultRow {
            scenario: scenario.to_string(),
            encoder: cfg.encoder.as_str().to_string(),
            strategy: cfg.strategy.as_str().to_string(),
            task: cfg.task.as_str().to_string(),
            seed,
            metric,
        })
        .collect()
}
