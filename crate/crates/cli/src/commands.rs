//! Subcommand definitions and their pipelines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use medembed::config::{load_config, snapshot};
use medembed::data::{
    build_cohort, generate_hospital, read_jsonl, write_jsonl, CohortFilters, DxHierarchy,
    HospitalSpec, RawTables,
};
use medembed::experiments::{
    aggregate, few_shot_curves, pca_points, pooled_rows, pretrain_seed, read_rows, run_pooled,
    run_single, run_transfer, run_transfer_from, single_rows, transfer_rows, write_few_shot,
    write_pca_csv, write_rows, AccessLog, Dataset, ExperimentConfig, Scenario, TTest,
    AGGREGATE_FILE, PCA_FILE, SEEDS_FILE,
};
use medembed::manifest::RunManifest;
use medembed::predictor::{evaluate, Model};
use medembed::{Error, Result};

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const COHORT_STATS_FILE: &str = "cohort_stats.json";
pub const AUDIT_FILE: &str = "access_log.json";

#[derive(Parser, Debug)]
#[command(
    name = "medembed",
    version,
    about = "Medical event embedding experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the raw CSV tables of a synthetic hospital.
    Generate {
        /// Hospital template: default_a or default_b.
        #[arg(long, default_value = "default_a")]
        spec: String,
        /// Generator seed (defaults to the template's own).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of patients (defaults to the template's own).
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the cohort file from raw CSV tables.
    Etl {
        /// Directory with the raw tables.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain encoders (w2v or mlm) on the training split of each seed.
    Pretrain(RunArgs),
    /// Train and test on one dataset for each seed.
    Train(RunArgs),
    /// Train on --dataset (or load --from), then evaluate and fine-tune on --target.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of a previous `train` run to take source models from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train one model on the union of --dataset and --target.
    Pool(RunArgs),
    /// Score a saved model on the test split of --dataset for --seed.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Project a saved model's stay representations onto two components.
    Pca {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: PathBuf,
    },
    /// Aggregate per-seed results below --in.
    Report {
        /// Directory searched for per-seed result files.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table1")]
        style: String,
        /// welch or paired.
        #[arg(long)]
        ttest: Option<String>,
        /// Defaults to <in>/report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Settings shared by the experiment commands; each maps to a config key.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// codeemb, transformer or rnn.
    #[arg(long)]
    pub encoder: Option<String>,
    /// va, dsva, dsva_dpe or vc.
    #[arg(long = "value-mode")]
    pub value_mode: Option<String>,
    /// none, w2v or mlm.
    #[arg(long)]
    pub pretrain: Option<String>,
    /// readm, mort, los3, los7 or dx.
    #[arg(long)]
    pub task: Option<String>,
    /// welch or paired.
    #[arg(long)]
    pub ttest: Option<String>,
    /// Worker threads for seed runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<String>,
    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<String>,
    /// Run a single seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed list: N, N,M,... or A..B.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Cohort file, or a directory containing cohort.jsonl.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Second cohort for transfer and pooling.
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Any other config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl RunArgs {
    fn flags(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("encoder", self.encoder.clone());
        put("value_mode", self.value_mode.clone());
        put("pretrain", self.pretrain.clone());
        put("task", self.task.clone());
        put("ttest", self.ttest.clone());
        put("jobs", self.jobs.map(|j| j.to_string()));
        put("lr", self.lr.clone());
        put("epochs", self.epochs.clone());
        put(
            "dataset",
            self.dataset.as_ref().map(|p| p.display().to_string()),
        );
        put(
            "target",
            self.target.as_ref().map(|p| p.display().to_string()),
        );
        if self.seed.is_some() && self.seeds.is_some() {
            return Err(Error::Config("give either --seed or --seeds".into()));
        }
        put(
            "seeds",
            self.seed.map(|s| s.to_string()).or(self.seeds.clone()),
        );
        Ok(m)
    }

    fn config(&self, scenario: Scenario) -> Result<(ExperimentConfig, BTreeMap<String, String>)> {
        let (mut cfg, _) = load_config(self.config.as_deref(), std::env::vars(), &self.flags()?)?;
        cfg.scenario = scenario;
        cfg.validate()?;
        let snap = snapshot(&cfg);
        Ok((cfg, snap))
    }
}

/// `dir/cohort.jsonl` for a directory, the path itself otherwise.
pub fn cohort_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(COHORT_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Directory name for a directory or a `cohort.jsonl` inside one, file stem otherwise.
pub fn dataset_name(p: &Path) -> String {
    let file = cohort_path(p);
    let stem = file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem == "cohort" {
        if let Some(parent) = file.parent().and_then(|d| d.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn load_dataset(p: &Path) -> Result<Dataset> {
    Ok(Dataset::new(dataset_name(p), read_jsonl(&cohort_path(p))?))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Executes `cli`; returns the output directory.
pub fn run(cli: Cli, argv: &[String]) -> Result<PathBuf> {
    let command = argv.iter().skip(1).cloned().collect::<Vec<_>>();
    match cli.command {
        Command::Generate {
            spec,
            seed,
            patients,
            out,
        } => {
            let mut s: HospitalSpec = spec.parse()?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            if let Some(n) = patients {
                s.n_patients = n;
            }
            let cfg = BTreeMap::from([
                ("spec".to_string(), spec),
                ("seed".to_string(), s.seed.to_string()),
                ("patients".to_string(), s.n_patients.to_string()),
            ]);
            let m = RunManifest::begin(command, cfg, &[])?;
            create_dir(&out)?;
            let files = generate_hospital(&s)?.write(&out)?;
            m.finish(&out, &files)?;
            Ok(out)
        }
        Command::Etl { input, out } => {
            let m = RunManifest::begin(command, BTreeMap::new(), std::slice::from_ref(&input))?;
            let raw = RawTables::read(&input)?;
            let cohort = build_cohort(&raw, &CohortFilters::default(), &DxHierarchy::standard())?;
            create_dir(&out)?;
            let data = out.join(COHORT_FILE);
            write_jsonl(&data, &cohort.samples)?;
            let stats = write_json(&out.join(COHORT_STATS_FILE), &cohort.stats)?;
            m.finish(&out, &[data, stats])?;
            Ok(out)
        }
        Command::Pretrain(args) => {
            let (cfg, snap) = args.config(Scenario::Single)?;
            if cfg.model.pretrain == medembed::encoders::Pretrain::None {
                return Err(Error::Config("pretrain needs --pretrain w2v or mlm".into()));
            }
            let src = cfg.source.clone().expect("validated");
            let m = RunManifest::begin(command, snap, &[cohort_path(&src)])?;
            let ds = load_dataset(&src)?;
            let audit = AccessLog::new();
            let runs = medembed::experiments::for_seeds(&cfg.seeds, cfg.jobs, |s| {
                pretrain_seed(&cfg, &ds, s, &audit)
            })?;
            let mut outputs = Vec::new();
            for (seed, (model, report)) in cfg.seeds.iter().zip(runs) {
                let dir = seed_dir(&args.out, *seed);
                outputs.extend(model.save(&dir)?);
                outputs.push(write_json(&dir.join("pretrain.json"), &report)?);
            }
            outputs.push(write_json(&args.out.join(AUDIT_FILE), &audit.entries())?);
            m.finish(&args.out, &outputs)?;
            Ok(args.out)
        }
        Command::Train(args) => {
            let (cfg, snap) = args.config(Scenario::Single)?;
            let src = cfg.source.clone().expect("validated");
            let m = RunManifest::begin(command, snap, &[cohort_path(&src)])?;
            let ds = load_dataset(&src)?;
            let audit = AccessLog::new();
            let out = run_single(&cfg, &ds, &audit)?;
            let mut outputs = Vec::new();
            for r in &out.runs {
                let dir = seed_dir(&args.out, r.seed);
                outputs.extend(r.model.save(&dir)?);
                outputs.push(write_json(&dir.join("train_report.json"), &r.report)?);
            }
            outputs.push(finish_rows(
                &args.out,
                &single_rows(&cfg.model, &ds.name, &out.result),
            )?);
            outputs.push(write_json(&args.out.join(AUDIT_FILE), &audit.entries())?);
            m.finish(&args.out, &outputs)?;
            Ok(args.out)
        }
        Command::Transfer { run: args, from } => {
            let (cfg, snap) = args.config(Scenario::Transfer)?;
            let (src_path, tgt_path) = (
                cfg.source.clone().expect("validated"),
                cfg.target.clone().expect("validated"),
            );
            let mut inputs = vec![cohort_path(&src_path), cohort_path(&tgt_path)];
            inputs.extend(from.clone());
            let m = RunManifest::begin(command, snap, &inputs)?;
            let (src, tgt) = (load_dataset(&src_path)?, load_dataset(&tgt_path)?);
            let audit = AccessLog::new();
            let mut rows = Vec::new();
            let per_ratio = match &from {
                Some(dir) => {
                    let mut models = BTreeMap::new();
                    for &s in &cfg.seeds {
                        let model = Model::load(&seed_dir(dir, s))?;
                        check_model(&model, &cfg)?;
                        models.insert(s, model);
                    }
                    run_transfer_from(&cfg, &models, &tgt, &audit)?
                }
                None => {
                    let out = run_transfer(&cfg, &src, &tgt, &audit)?;
                    rows.extend(single_rows(&cfg.model, &src.name, &out.source.result));
                    out.per_ratio
                }
            };
            rows.extend(transfer_rows(&cfg.model, &src.name, &tgt.name, &per_ratio));
            create_dir(&args.out)?;
            let outputs = vec![
                finish_rows(&args.out, &rows)?,
                write_json(&args.out.join(AUDIT_FILE), &audit.entries())?,
            ];
            m.finish(&args.out, &outputs)?;
            Ok(args.out)
        }
        Command::Pool(args) => {
            let (cfg, snap) = args.config(Scenario::Pooled)?;
            let paths = [
                cfg.source.clone().expect("validated"),
                cfg.target.clone().expect("validated"),
            ];
            let m = RunManifest::begin(
                command,
                snap,
                &paths.iter().map(|p| cohort_path(p)).collect::<Vec<_>>(),
            )?;
            let data = paths
                .iter()
                .map(|p| load_dataset(p))
                .collect::<Result<Vec<_>>>()?;
            if data[0].name == data[1].name {
                return Err(Error::Config(format!(
                    "both datasets are named {:?}",
                    data[0].name
                )));
            }
            let audit = AccessLog::new();
            let out = run_pooled(&cfg, &data, &audit)?;
            let mut outputs = Vec::new();
            for r in &out.runs {
                let dir = seed_dir(&args.out, r.seed);
                outputs.extend(r.model.save(&dir)?);
                outputs.push(write_json(&dir.join("train_report.json"), &r.report)?);
            }
            let first = &out.runs[0];
            let tests: Vec<(String, _)> = data
                .iter()
                .map(|d| d.name.clone())
                .zip(first.tests.iter())
                .collect();
            let (pca, points) = pca_points(&first.model, &tests)?;
            let pca_path = args.out.join(PCA_FILE);
            write_pca_csv(&pca_path, &points)?;
            outputs.push(pca_path);
            outputs.push(write_json(
                &args.out.join("pca_explained.json"),
                &pca.explained,
            )?);
            outputs.push(finish_rows(
                &args.out,
                &pooled_rows(&cfg.model, &out.per_dataset),
            )?);
            outputs.push(write_json(&args.out.join(AUDIT_FILE), &audit.entries())?);
            m.finish(&args.out, &outputs)?;
            Ok(args.out)
        }
        Command::Evaluate { run: args, model } => {
            let (model_cfg, data, seed, m) = saved_model_inputs(&args, &model, command)?;
            let mut results = Vec::new();
            for ds in &data {
                let test = model_cfg
                    .features
                    .prepare(&ds.split(seed)?.test, model_cfg.cfg.task)?;
                results.push(serde_json::json!({
                    "dataset": ds.name,
                    "seed": seed,
                    "split": "test",
                    "n": test.len(),
                    "task": model_cfg.cfg.task.as_str(),
                    "metric": evaluate(&model_cfg, &test)?,
                }));
            }
            create_dir(&args.out)?;
            let p = write_json(&args.out.join("metrics.json"), &results)?;
            m.finish(&args.out, &[p])?;
            Ok(args.out)
        }
        Command::Pca { run: args, model } => {
            let (model, data, seed, m) = saved_model_inputs(&args, &model, command)?;
            let mut sets = Vec::new();
            for ds in &data {
                sets.push((
                    ds.name.clone(),
                    model
                        .features
                        .prepare(&ds.split(seed)?.test, model.cfg.task)?,
                ));
            }
            let refs: Vec<(String, _)> = sets.iter().map(|(n, s)| (n.clone(), s)).collect();
            let (pca, points) = pca_points(&model, &refs)?;
            create_dir(&args.out)?;
            let p = args.out.join(PCA_FILE);
            write_pca_csv(&p, &points)?;
            let e = write_json(&args.out.join("pca_explained.json"), &pca.explained)?;
            m.finish(&args.out, &[p, e])?;
            Ok(args.out)
        }
        Command::Report {
            input,
            style,
            ttest,
            out,
        } => {
            if style != "table1" {
                return Err(Error::Config(format!(
                    "unknown report style {style:?}; only table1 is available"
                )));
            }
            let kind: TTest = match &ttest {
                Some(t) => t.parse()?,
                None => Default::default(),
            };
            let out = out.unwrap_or_else(|| input.join("report"));
            let files = seed_files(&input, &out)?;
            let cfg = BTreeMap::from([
                ("style".to_string(), style),
                ("ttest".to_string(), kind.to_string()),
            ]);
            let m = RunManifest::begin(command, cfg, &files)?;
            let mut rows = Vec::new();
            for f in &files {
                rows.extend(read_rows(f)?);
            }
            let agg = aggregate(&rows, kind)?;
            create_dir(&out)?;
            let path = out.join(AGGREGATE_FILE);
            agg.write(&path)?;
            let mut outputs = vec![path];
            let curves = few_shot_curves(&agg)?;
            if !curves.is_empty() {
                outputs.extend(write_few_shot(&out, &curves)?);
            }
            m.finish(&out, &outputs)?;
            Ok(out)
        }
    }
}

fn finish_rows(out: &Path, rows: &[medembed::experiments::ResultRow]) -> Result<PathBuf> {
    create_dir(out)?;
    let p = out.join(SEEDS_FILE);
    write_rows(&p, rows)?;
    Ok(p)
}

/// Per-seed result files below `input`, excluding the report directory.
fn seed_files(input: &Path, exclude: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for e in medembed::manifest::files_below(input)? {
        if e.file_name().is_some_and(|n| n == SEEDS_FILE) && !e.starts_with(exclude) {
            files.push(e);
        }
    }
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no {SEEDS_FILE} below {}",
            input.display()
        )));
    }
    files.sort();
    Ok(files)
}

fn check_model(model: &Model, cfg: &ExperimentConfig) -> Result<()> {
    let (a, b) = (&model.cfg, &cfg.model);
    if a.encoder != b.encoder || a.strategy != b.strategy || a.task != b.task {
        return Err(Error::Config(format!(
            "saved model is {} {} {} but the run asks for {} {} {}",
            a.encoder.as_str(),
            a.strategy.as_str(),
            a.task.as_str(),
            b.encoder.as_str(),
            b.strategy.as_str(),
            b.task.as_str()
        )));
    }
    Ok(())
}

fn saved_model_inputs(
    args: &RunArgs,
    model: &Path,
    command: Vec<String>,
) -> Result<(Model, Vec<Dataset>, u64, RunManifest)> {
    let (cfg, _) = load_config(args.config.as_deref(), std::env::vars(), &args.flags()?)?;
    let seed = match cfg.seeds.as_slice() {
        [s] => *s,
        _ => {
            return Err(Error::Config(
                "give the seed the model was trained with via --seed".into(),
            ))
        }
    };
    let paths: Vec<PathBuf> = cfg
        .source
        .iter()
        .chain(cfg.target.iter())
        .cloned()
        .collect();
    if paths.is_empty() {
        return Err(Error::Config("--dataset is required".into()));
    }
    let mut inputs: Vec<PathBuf> = paths.iter().map(|p| cohort_path(p)).collect();
    inputs.push(model.to_path_buf());
    let snap = BTreeMap::from([
        ("seed".to_string(), seed.to_string()),
        ("model".to_string(), model.display().to_string()),
    ]);
    let m = RunManifest::begin(command, snap, &inputs)?;
    let loaded = Model::load(model)?;
    let data = paths
        .iter()
        .map(|p| load_dataset(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((loaded, data, seed, m))
}
