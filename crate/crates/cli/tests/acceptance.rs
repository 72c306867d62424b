//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=name,name` runs a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use medembed::data::{
    build_cohort, generate_hospital, ClinicalEvent, CodeStyle, CohortFilters, CohortStats,
    DxHierarchy, HospitalSpec, LabelSet, PatientRecord, RawEvent, RawStay, RawTables, SourceTable,
    Task,
};
use medembed::encoders::{
    cosine, w2v_pretrain, EncoderKind, Pretrain, TextEncoder, TextEncoderConfig, ValueMlp,
    W2vConfig,
};
use medembed::experiments::{
    marker, mean_se, paired, pca_project, pretrain_seed, run_pooled, run_single, run_transfer,
    welch, AccessLog, Dataset, ExperimentConfig, RunResult,
};
use medembed::metrics::{auprc_seeded, micro_auprc, tie_positions, TIE_SEED};
use medembed::nn::Gru;
use medembed::predictor::{train_model, ModelConfig, PretrainReport, TrainConfig};
use medembed::tensor::{grad_check, init, ParamStore, RngStream, Tensor};
use medembed::text::{
    digit_place_indices, render_event_text, tokenize, EventDescription, TokenSequence,
    ValueStrategy, VcValue, Vocabulary, DIGIT_BASE, POINT_ID,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---------------------------------------------------------------- gradients

fn grad_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut rng = RngStream::new(11);

    // GRU cell, two steps from a non-zero state.
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "cell", 5, 8, &mut rng);
    let x = init::normal(&[3, 5], 1.0, &mut rng);
    let h0 = init::normal(&[3, 8], 0.5, &mut rng);
    let w = init::normal(&[3, 8], 1.0, &mut rng);
    let e = grad_check(&store, 1e-5, 40, &mut rng, |t| {
        let xv = t.constant(x.clone());
        let gx = gru.project_inputs(t, xv)?;
        let h = t.constant(h0.clone());
        let h = gru.cell(t, gx, h)?;
        let h = gru.cell(t, gx, h)?;
        let wv = t.constant(w.clone());
        let y = t.mul(h, wv)?;
        t.sum(y)
    })
    .map_err(|e| e.to_string())?;
    worst.push(("gru cell".into(), e));

    // Bidirectional GRU and transformer encoders over digit tokens with place embeddings.
    let cfg = TextEncoderConfig {
        vocab_size: 30,
        dim: 16,
        layers: 1,
        heads: 2,
        ff_dim: 24,
        rnn_hidden: 8,
        max_len: 12,
    };
    let seq = |ids: &[u32]| TokenSequence {
        ids: ids.to_vec(),
        places: digit_place_indices(ids),
    };
    let d = |n: u32| DIGIT_BASE + n;
    let seqs = [
        seq(&[1, 20, d(1), d(3), POINT_ID, d(5)]),
        seq(&[1, 22, 23]),
        seq(&[1, d(7)]),
    ];
    for (kind, label) in [
        (EncoderKind::Rnn, "bidirectional gru encoder"),
        (EncoderKind::Transformer, "transformer block"),
    ] {
        for use_places in [false, true] {
            let mut store = ParamStore::new();
            let enc =
                TextEncoder::new(kind, &mut store, &cfg, &mut rng).map_err(|e| e.to_string())?;
            let w = init::normal(&[3, 16], 1.0, &mut rng);
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let e = grad_check(&store, 1e-5, 16, &mut rng, |t| {
                let v = enc.encode(t, &refs, use_places)?;
                let wv = t.constant(w.clone());
                let y = t.mul(v, wv)?;
                let y = t.tanh(y)?;
                t.sum(y)
            })
            .map_err(|e| e.to_string())?;
            let name = if use_places {
                format!("{label} + digit places")
            } else {
                label.to_string()
            };
            worst.push((name, e));
        }
    }

    // Value MLP.
    let mut store = ParamStore::new();
    let mlp = ValueMlp::new(&mut store, &mut rng);
    let vals: Vec<VcValue> = (0..6)
        .map(|i| VcValue {
            z: rng.normal(),
            present: i % 3 != 0,
        })
        .collect();
    let w = init::normal(&[6, medembed::encoders::VALUE_DIM], 1.0, &mut rng);
    let e = grad_check(&store, 1e-5, 40, &mut rng, |t| {
        let v = mlp.forward(t, &vals)?;
        let wv = t.constant(w.clone());
        let y = t.mul(v, wv)?;
        t.sum(y)
    })
    .map_err(|e| e.to_string())?;
    worst.push(("value mlp".into(), e));

    let elapsed = t0.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    ensure(max < 1e-4, || {
        format!("max relative error {max:.2e}: {}", detail.join(", "))
    })?;
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {}", secs(elapsed))
    })?;
    Ok(format!(
        "max relative error {max:.1e} over {} modules in {}",
        worst.len(),
        secs(elapsed)
    ))
}

// ---------------------------------------------------------------- metrics

/// Average precision by direct pairwise counting under the seeded tie order.
fn ap_oracle(scores: &[f64], labels: &[f64], seed: u64) -> f64 {
    let pos = tie_positions(scores.len(), seed);
    let ahead =
        |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && pos[j] <= pos[i]);
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1.0).collect();
    let mut total = 0.0;
    for &i in &positives {
        let rank = (0..scores.len()).filter(|&j| ahead(j, i)).count();
        let hits = positives.iter().filter(|&&j| ahead(j, i)).count();
        total += hits as f64 / rank as f64;
    }
    total / positives.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = RngStream::new(7);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..200 {
        let n = 1 + rng.below(50);
        let levels = 1 + rng.below(8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(rng.uniform() < 0.35)))
            .collect();
        labels[rng.below(n)] = 1.0;
        if n > levels {
            tied += 1;
        }
        let seed = rng.next_u64();
        worst = worst.max(
            (auprc_seeded(&scores, &labels, seed).unwrap() - ap_oracle(&scores, &labels, seed))
                .abs(),
        );

        // Same data as a multi-label matrix.
        let cols = 1 + rng.below(3);
        let rows = n.div_ceil(cols);
        let mut s = scores.clone();
        let mut y = labels.clone();
        s.resize(rows * cols, 0.0);
        y.resize(rows * cols, 0.0);
        let st = Tensor::matrix(rows, cols, s.clone()).unwrap();
        let yt = Tensor::matrix(rows, cols, y.clone()).unwrap();
        worst = worst.max((micro_auprc(&st, &yt).unwrap() - ap_oracle(&s, &y, TIE_SEED)).abs());
    }
    ensure(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!(
        "200 cases ({tied} with ties), max deviation {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- tokenizer

fn random_number(rng: &mut RngStream) -> String {
    let mut s = String::new();
    if rng.uniform() < 0.1 {
        s.push('-');
    }
    let int_len = 1 + rng.below(6);
    for i in 0..int_len {
        let d = if i == 0 && int_len > 1 {
            1 + rng.below(9)
        } else {
            rng.below(10)
        };
        s.push(char::from(b'0' + d as u8));
    }
    if rng.uniform() < 0.5 {
        s.push('.');
        for _ in 0..1 + rng.below(3) {
            s.push(char::from(b'0' + rng.below(10) as u8));
        }
    }
    s
}

/// Place of each digit: `k..1` before the point, `-1, -2, ..` after it.
fn hand_places(value: &str) -> Vec<i8> {
    let digits = value.trim_start_matches('-');
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    let k = int.len() as i8;
    (0..int.len() as i8)
        .map(|i| k - i)
        .chain((1..=frac.len() as i8).map(|i| -i))
        .collect()
}

fn tokenizer_values() -> Outcome {
    let mut rng = RngStream::new(5);
    let descriptions = [
        "serum potassium",
        "arterial blood lactate",
        "heart rate",
        "norepinephrine infusion rate",
    ];
    let numbers: Vec<String> = (0..1000).map(|_| random_number(&mut rng)).collect();
    // Numbers repeat inside the training corpus so digit merges would be frequent if allowed.
    let corpus: Vec<String> = numbers
        .iter()
        .enumerate()
        .map(|(i, v)| format!("{} {v} {v} 1351 1351", descriptions[i % descriptions.len()]))
        .collect();
    let vocab = Vocabulary::train(&corpus, 600).map_err(|e| e.to_string())?;
    let digit = |id: u32| (DIGIT_BASE..DIGIT_BASE + 10).contains(&id);
    for (i, v) in numbers.iter().enumerate() {
        let text = descriptions[i % descriptions.len()];
        let ev = EventDescription::new(text, Some(v), Some("mmol")).map_err(|e| e.to_string())?;
        let dsva = render_event_text(&ev, ValueStrategy::Dsva).map_err(|e| e.to_string())?;
        let seq = tokenize(&dsva, &vocab, 256);
        // Every token that carries a digit is a single-digit token.
        for &id in &seq.ids {
            let tok = vocab.token(id).unwrap_or("");
            let has_digit = tok.chars().any(|c| c.is_ascii_digit());
            ensure(!has_digit || digit(id), || {
                format!("{v}: multi-character digit token {tok:?}")
            })?;
        }
        let ids: Vec<u32> = seq.ids.iter().copied().filter(|&id| digit(id)).collect();
        let want: Vec<u32> = v
            .chars()
            .filter_map(|c| c.to_digit(10))
            .map(|d| DIGIT_BASE + d)
            .collect();
        ensure(ids == want, || {
            format!("{v}: digit tokens {ids:?} vs {want:?}")
        })?;
        let places: Vec<i8> = seq
            .ids
            .iter()
            .zip(&seq.places)
            .filter(|(id, _)| digit(**id))
            .map(|(_, p)| p.unwrap_or(i8::MIN))
            .collect();
        ensure(places == hand_places(v), || {
            format!("{v}: places {places:?} vs {:?}", hand_places(v))
        })?;
        for strategy in [ValueStrategy::Va, ValueStrategy::Dsva] {
            let rendered = render_event_text(&ev, strategy).map_err(|e| e.to_string())?;
            let back = vocab.decode(&tokenize(&rendered, &vocab, 256).ids);
            ensure(back.starts_with(text), || {
                format!("{v} {strategy:?}: decoded {back:?}")
            })?;
        }
    }
    let n = tokenize("1351", &vocab, 16).ids.len() - 1;
    ensure(n == 4, || format!("1351 gives {n} tokens"))?;
    Ok("1000 numbers: single-digit tokens, hand place values, description prefix kept; 1351 -> 4 tokens".into())
}

// ---------------------------------------------------------------- ETL fixture

const DAY: i64 = 1440;

fn fixture_stay(id: u64, patient: &str, admission: &str) -> RawStay {
    RawStay {
        patient_id: patient.into(),
        admission_id: admission.into(),
        stay_id: id,
        unit: "MICU".into(),
        transferred: false,
        age: 60.0,
        admit_order: (1, 0, 0),
        intime: 0,
        los_minutes: 2 * DAY,
        expired: Some(false),
        diagnoses: vec![],
    }
}

fn raw_event(stay: u64, code: &str, offset: i64, value: &str) -> RawEvent {
    RawEvent {
        stay_id: stay,
        source: SourceTable::Lab,
        offset,
        code: code.into(),
        description: format!("lab item {code}"),
        value: Some(value.into()),
        unit: Some("mg".into()),
    }
}

fn clinical(code: &str, offset: i64, value: Option<&str>) -> ClinicalEvent {
    ClinicalEvent {
        code: code.into(),
        description: format!("lab item {code}"),
        value: value.map(Into::into),
        unit: value.map(|_| "mg".into()),
        offset,
    }
}

const COMMON: [&str; 6] = ["C1", "C2", "C3", "C4", "C5", "C6"];

fn standard_events(stay: u64) -> Vec<RawEvent> {
    COMMON
        .iter()
        .enumerate()
        .map(|(i, c)| raw_event(stay, c, 10 * (i as i64 + 1), "1.5"))
        .collect()
}

fn standard_clinical() -> Vec<ClinicalEvent> {
    COMMON
        .iter()
        .enumerate()
        .map(|(i, c)| clinical(c, 10 * (i as i64 + 1), Some("1.5")))
        .collect()
}

fn labels(mort: bool, readm: bool, los_days: (bool, bool), dx: &[u8]) -> LabelSet {
    LabelSet {
        readm,
        mort,
        los3: los_days.0,
        los7: los_days.1,
        dx: dx.to_vec(),
    }
}

fn etl_fixture() -> Outcome {
    let mut stays = Vec::new();
    let mut events = Vec::new();
    let mut expected = Vec::new();
    let mut plain = |id: u64, p: &str, f: &dyn Fn(&mut RawStay), l: LabelSet| {
        let mut s = fixture_stay(id, p, &format!("adm_{p}"));
        f(&mut s);
        stays.push(s);
        events.extend(standard_events(id));
        expected.push(PatientRecord {
            stay_id: id,
            events: standard_clinical(),
            labels: l,
        });
    };
    let circ = "diseases of the circulatory system|heart failure|congestive heart failure";
    let resp = "diseases of the respiratory system";
    plain(
        101,
        "p1",
        &|s| {
            s.expired = Some(true);
            s.diagnoses = vec![circ.into()]
        },
        labels(true, false, (false, false), &[7]),
    );
    plain(
        102,
        "p2",
        &|s| {
            s.los_minutes = 4 * DAY;
            s.diagnoses = vec![resp.into()]
        },
        labels(false, false, (true, false), &[8]),
    );
    plain(
        103,
        "p3",
        &|s| {
            s.los_minutes = 8 * DAY;
            s.diagnoses = vec![resp.into(), circ.into(), "unlisted condition".into()]
        },
        labels(false, false, (true, true), &[7, 8]),
    );
    plain(104, "p4", &|_| {}, labels(false, true, (false, false), &[]));
    plain(
        106,
        "p5",
        &|s| s.los_minutes = 3 * DAY,
        labels(false, false, (false, false), &[]),
    );
    plain(
        107,
        "p6",
        &|s| s.los_minutes = 7 * DAY,
        labels(false, false, (true, false), &[]),
    );
    plain(
        114,
        "p12",
        &|s| {
            s.age = 18.5;
            s.admit_order = (2, 0, 0)
        },
        labels(false, false, (false, false), &[]),
    );
    // Later stay in p4's admission: makes 104 a readmission and is itself not a first stay.
    let mut s = fixture_stay(105, "p4", "adm_p4");
    s.admit_order = (2, 0, 0);
    stays.push(s);
    events.extend(standard_events(105));
    // p12's earlier stay is a minor, so the later one counts as first.
    let mut s = fixture_stay(113, "p12", "adm_p12_old");
    s.age = 17.0;
    stays.push(s);
    events.extend(standard_events(113));
    if let Some(s) = stays.iter_mut().find(|s| s.stay_id == 114) {
        s.admission_id = "adm_p12_new".into();
    }

    // 151 events in the window: truncated to the first 150.
    stays.push(fixture_stay(108, "p7", "adm_p7"));
    let long: Vec<(String, i64)> = (0..151)
        .map(|k| (COMMON[k % 6].to_string(), 4 * k as i64))
        .collect();
    events.extend(long.iter().map(|(c, o)| raw_event(108, c, *o, "2")));
    expected.push(PatientRecord {
        stay_id: 108,
        events: long[..150]
            .iter()
            .map(|(c, o)| clinical(c, *o, Some("2")))
            .collect(),
        labels: labels(false, false, (false, false), &[]),
    });
    // Events outside the first 12 hours are dropped.
    stays.push(fixture_stay(109, "p8", "adm_p8"));
    events.extend(standard_events(109));
    events.extend([
        raw_event(109, "C1", -5, "9"),
        raw_event(109, "C2", 720, "9"),
        raw_event(109, "C3", 900, "9"),
    ]);
    expected.push(PatientRecord {
        stay_id: 109,
        events: standard_clinical(),
        labels: labels(false, false, (false, false), &[]),
    });
    // A non-numeric result keeps the event but drops value and unit.
    stays.push(fixture_stay(110, "p9", "adm_p9"));
    events.extend(standard_events(110));
    events.push(raw_event(110, "C1", 70, "positive"));
    let mut ev = standard_clinical();
    ev.push(clinical("C1", 70, None));
    expected.push(PatientRecord {
        stay_id: 110,
        events: ev,
        labels: labels(false, false, (false, false), &[]),
    });
    // A code seen 4 times in the whole cohort is removed.
    for (id, p) in [(111, "p10"), (112, "p11")] {
        stays.push(fixture_stay(id, p, &format!("adm_{p}")));
        events.extend(standard_events(id));
        events.extend([
            raw_event(id, "RARE", 5, "3"),
            raw_event(id, "RARE", 65, "3"),
        ]);
        expected.push(PatientRecord {
            stay_id: id,
            events: standard_clinical(),
            labels: labels(false, false, (false, false), &[]),
        });
    }
    // Violations.
    type Planted<'a> = (u64, &'a dyn Fn(&mut RawStay));
    let violations: [Planted; 7] = [
        (115, &|s| s.age = 17.0),
        (120, &|s| s.age = 18.0),
        (116, &|s| s.los_minutes = 11 * 60),
        (121, &|s| s.los_minutes = 12 * 60),
        (118, &|s| s.transferred = true),
        (119, &|s| s.unit = "SICU".into()),
        (117, &|_| {}),
    ];
    for (id, f) in violations {
        let p = format!("v{id}");
        let mut s = fixture_stay(id, &p, &format!("adm_{p}"));
        f(&mut s);
        stays.push(s);
        if id == 117 {
            events.extend(standard_events(id).into_iter().take(4));
        } else {
            events.extend(standard_events(id));
        }
    }
    expected.sort_by_key(|r| r.stay_id);

    let raw = RawTables {
        style: CodeStyle::FreeText,
        stays,
        events,
    };
    let got = build_cohort(&raw, &CohortFilters::default(), &DxHierarchy::standard())
        .map_err(|e| e.to_string())?;
    let want_stats = CohortStats {
        stays: 21,
        unit_no_transfer: 19,
        adult: 16,
        long_enough: 14,
        first_stay: 13,
        codes_removed: 1,
        enough_events: 12,
        truncated: 12,
    };
    ensure(got.stats == want_stats, || format!("stats {:?}", got.stats))?;
    let ids: Vec<u64> = got.samples.iter().map(|r| r.stay_id).collect();
    let want_ids: Vec<u64> = expected.iter().map(|r| r.stay_id).collect();
    ensure(ids == want_ids, || format!("stays {ids:?} vs {want_ids:?}"))?;
    for (g, w) in got.samples.iter().zip(&expected) {
        ensure(g.labels == w.labels, || {
            format!("stay {} labels {:?} vs {:?}", g.stay_id, g.labels, w.labels)
        })?;
        ensure(g.events == w.events, || {
            format!(
                "stay {} events differ ({} vs {})",
                g.stay_id,
                g.events.len(),
                w.events.len()
            )
        })?;
    }
    Ok(format!(
        "{} stays and labels match the hand-derived cohort; 9 planted violations handled",
        expected.len()
    ))
}

// ---------------------------------------------------------------- experiments

fn hospitals() -> (Dataset, Dataset) {
    let cohort = |spec: HospitalSpec| {
        build_cohort(
            &generate_hospital(&spec).unwrap(),
            &CohortFilters::default(),
            &DxHierarchy::standard(),
        )
        .unwrap()
        .samples
    };
    (
        Dataset::new("A", cohort(HospitalSpec::default_a())),
        Dataset::new("B", cohort(HospitalSpec::default_b())),
    )
}

/// Reduced widths and epochs that fit a single CPU core.
fn desk(encoder: EncoderKind, strategy: ValueStrategy) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            encoder,
            strategy,
            task: Task::Mort,
            emb_dim: 32,
            hidden: 64,
            rnn_hidden: 32,
            max_tokens: 24,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 8,
            lr: 2e-3,
            ..TrainConfig::default()
        },
        seeds: (0..10).collect(),
        ratios: vec![0.0],
        ..ExperimentConfig::default()
    }
}

fn desc_cfg() -> ExperimentConfig {
    desk(EncoderKind::Rnn, ValueStrategy::DsvaDpe)
}

fn mean_test_prevalence(ds: &Dataset, seeds: &[u64]) -> f64 {
    let p: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            let t = ds.split(s).unwrap().test;
            t.iter().filter(|r| r.labels.mort).count() as f64 / t.len() as f64
        })
        .collect();
    p.iter().sum::<f64>() / p.len() as f64
}

#[derive(Default)]
struct Shared {
    hospitals: Option<(Dataset, Dataset)>,
    desc_single_a: Option<RunResult>,
}

impl Shared {
    fn hospitals(&mut self) -> (Dataset, Dataset) {
        self.hospitals.get_or_insert_with(hospitals).clone()
    }
}

fn transfer_zero_shot(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let (a, b) = shared.hospitals();
    let audit = AccessLog::new();
    let desc = run_transfer(&desc_cfg(), &a, &b, &audit).map_err(|e| e.to_string())?;
    let code = run_transfer(
        &desk(EncoderKind::CodeEmb, ValueStrategy::Vc),
        &a,
        &b,
        &audit,
    )
    .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    shared.desc_single_a = Some(desc.source.result.clone());
    let zero = |o: &medembed::experiments::TransferOutcome| {
        o.per_ratio
            .iter()
            .find(|(r, _)| *r == 0.0)
            .map(|(_, r)| r.mean)
    };
    let (d0, c0) = (
        zero(&desc).ok_or("no zero-shot result")?,
        zero(&code).ok_or("no zero-shot result")?,
    );
    let prevalence = mean_test_prevalence(&b, &desc_cfg().seeds);
    let detail = format!(
        "zero-shot on B: DescEmb {d0:.3}, CodeEmb {c0:.3}, prevalence {prevalence:.3}; source A: DescEmb {:.3}, CodeEmb {:.3}; {}",
        desc.source.result.mean,
        code.source.result.mean,
        secs(elapsed)
    );
    ensure(audit.leaks().is_empty(), || {
        format!("test split leaks: {:?}", audit.leaks())
    })?;
    ensure(d0 >= c0 + 0.05, || detail.clone())?;
    ensure((c0 - prevalence).abs() <= 0.05, || detail.clone())?;
    ensure(elapsed < Duration::from_secs(30 * 60), || detail.clone())?;
    Ok(detail)
}

fn pooled_trend(shared: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let (a, b) = shared.hospitals();
    let cfg = desc_cfg();
    let audit = AccessLog::new();
    let single_a = match shared.desc_single_a.clone() {
        Some(r) => r,
        None => {
            run_single(&cfg, &a, &audit)
                .map_err(|e| e.to_string())?
                .result
        }
    };
    let single_b = run_single(&cfg, &b, &audit)
        .map_err(|e| e.to_string())?
        .result;
    let pooled = run_pooled(&cfg, &[a, b], &audit).map_err(|e| e.to_string())?;
    ensure(audit.leaks().is_empty(), || {
        format!("test split leaks: {:?}", audit.leaks())
    })?;
    let mut parts = Vec::new();
    let mut ok = true;
    for ((name, p), s) in pooled.per_dataset.iter().zip([&single_a, &single_b]) {
        let floor = s.mean - 2.0 * s.se;
        ok &= p.mean >= floor;
        parts.push(format!(
            "{name}: pooled {:.3} vs single {:.3} - 2*{:.3}",
            p.mean, s.mean, s.se
        ));
    }
    let detail = format!("{}; {}", parts.join(", "), secs(t0.elapsed()));
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

fn mlm_sanity(shared: &mut Shared) -> Outcome {
    let (a, _) = shared.hospitals();
    let mut cfg = desc_cfg();
    cfg.model.pretrain = Pretrain::Mlm;
    cfg.mlm.epochs = 3;
    cfg.mlm.lr = 2e-3;
    cfg.train.epochs = 1;
    let audit = AccessLog::new();
    let (mut model, report) = pretrain_seed(&cfg, &a, 0, &audit).map_err(|e| e.to_string())?;
    let PretrainReport::Mlm(rep) = report else {
        return Err("pretraining did not run MLM".into());
    };
    let vocab = model.features.text.as_ref().map_or(0, |v| v.len());
    let ln_v = (vocab as f64).ln();
    let start = rep.initial_loss();
    ensure((start - ln_v).abs() <= 0.05 * ln_v, || {
        format!("initial loss {start:.3} vs ln|V| {ln_v:.3}")
    })?;
    ensure(rep.final_loss < rep.unigram_entropy, || {
        format!(
            "final loss {:.3} not below unigram entropy {:.3}",
            rep.final_loss, rep.unigram_entropy
        )
    })?;
    let before = model.store.shapes();
    let split = a.split(0).map_err(|e| e.to_string())?;
    let train = model
        .features
        .prepare(&split.train, Task::Mort)
        .map_err(|e| e.to_string())?;
    let valid = model
        .features
        .prepare(&split.valid, Task::Mort)
        .map_err(|e| e.to_string())?;
    train_model(
        &mut model,
        &train,
        &valid,
        &cfg.train,
        &mut RngStream::new(0),
    )
    .map_err(|e| e.to_string())?;
    ensure(model.store.shapes() == before, || {
        "fine-tuning changed parameter shapes".into()
    })?;
    Ok(format!(
        "loss {start:.3} (ln|V| {ln_v:.3}) -> {:.3} < unigram entropy {:.3}; {} parameter shapes unchanged",
        rep.final_loss,
        rep.unigram_entropy,
        before.len()
    ))
}

fn w2v_sanity() -> Outcome {
    let mut margins = Vec::new();
    for seed in 0..10u64 {
        let mut rng = RngStream::new(seed);
        // Codes 1 and 2 share contexts; code 3 only appears with itself.
        let corpus: Vec<Vec<usize>> = (0..60)
            .map(|i| {
                if i % 2 == 0 {
                    (0..8).map(|_| 1 + rng.below(2)).collect()
                } else {
                    vec![3; 8]
                }
            })
            .collect();
        let cfg = W2vConfig {
            dim: 16,
            epochs: 10,
            ..W2vConfig::default()
        };
        let init = init::uniform(&[4, 16], 0.5 / 16.0, &mut rng);
        let w = w2v_pretrain(&corpus, init, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let pair = cosine(w.row(1), w.row(2));
        let cross = cosine(w.row(1), w.row(3)).max(cosine(w.row(2), w.row(3)));
        ensure(pair > cross, || {
            format!("seed {seed}: pair {pair:.3} vs cross {cross:.3}")
        })?;
        margins.push(pair - cross);
    }
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "seeds 0..9: co-occurring pair ahead by at least {min:.3}"
    ))
}

fn statistics() -> Outcome {
    let (t, p) = welch(&[1.0, 2.0, 3.0], &[4.0, 5.0, 7.0]).map_err(|e| e.to_string())?;
    let t = t.ok_or("no t statistic")?;
    ensure(
        (t + 3.1622776601683795).abs() < 1e-6 && (p - 0.041914517471454).abs() < 1e-6,
        || format!("welch t {t} p {p}"),
    )?;
    let a = [0.31, 0.29, 0.35, 0.33, 0.30, 0.32, 0.34, 0.28, 0.36, 0.31];
    let b = [0.27, 0.26, 0.30, 0.29, 0.25, 0.28, 0.31, 0.24, 0.30, 0.27];
    let (t, p) = welch(&a, &b).map_err(|e| e.to_string())?;
    ensure(
        (t.unwrap_or(f64::NAN) - 3.8164299567369095).abs() < 1e-6
            && (p - 0.0012909935174115722).abs() < 1e-6,
        || format!("welch fixture t {t:?} p {p}"),
    )?;
    let (t, p) = paired(&a, &b).map_err(|e| e.to_string())?;
    ensure(
        (t.unwrap_or(f64::NAN) - 14.453191233845393).abs() < 1e-6
            && (p - 1.5567988833000302e-07).abs() < 1e-9,
        || format!("paired fixture t {t:?} p {p}"),
    )?;
    let (mean, se) = mean_se(&a);
    let sd = (a.iter().map(|x| (x - 0.319f64).powi(2)).sum::<f64>() / 9.0).sqrt();
    ensure(
        (mean - 0.319).abs() < 1e-12 && (se - sd / 10f64.sqrt()).abs() < 1e-12,
        || format!("mean {mean} se {se}"),
    )?;
    ensure((se - 0.008225975119502042).abs() < 1e-12, || {
        format!("se {se}")
    })?;
    let cases = [
        (0.001, "**"),
        (0.0099, "**"),
        (0.01, "*"),
        (0.049, "*"),
        (0.05, ""),
        (0.3, ""),
    ];
    for (p, m) in cases {
        ensure(marker(p) == m, || format!("marker({p}) = {:?}", marker(p)))?;
    }
    Ok(
        "welch and paired references within 1e-6, SE = sd/sqrt(10), markers ** < 0.01 and * < 0.05"
            .into(),
    )
}

fn pca_rank2() -> Outcome {
    let mut rng = RngStream::new(3);
    let dim = 256;
    let u: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let offset: Vec<f64> = (0..dim).map(|_| 5.0 * rng.normal()).collect();
    let rows: Vec<Vec<f64>> = (0..120)
        .map(|_| {
            let (a, b) = (3.0 * rng.normal(), rng.normal());
            (0..dim).map(|j| offset[j] + a * u[j] + b * v[j]).collect()
        })
        .collect();
    let x = Tensor::from_rows(&rows).map_err(|e| e.to_string())?;
    let pca = pca_project(&x, 2).map_err(|e| e.to_string())?;
    let total: f64 = pca.explained.iter().sum();
    ensure((total - 1.0).abs() <= 1e-9, || {
        format!("top-2 explained {total}")
    })?;
    Ok(format!(
        "top-2 explained variance {total:.12} ({:.4} + {:.4})",
        pca.explained[0], pca.explained[1]
    ))
}

// ---------------------------------------------------------------- determinism

fn cli(cwd: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_medembed"))
        .current_dir(cwd)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

const DESK_CONFIG: &str = "# reduced widths for a single core\nemb_dim = 32\nhidden = 64\nrnn_hidden = 32\nmax_tokens = 24\nepochs = 3\nlr = 2e-3\ntask = mort\nseeds = 0..2\n";

fn pipeline(dir: &Path) -> Result<Vec<u8>, String> {
    std::fs::write(dir.join("desk.conf"), DESK_CONFIG).map_err(|e| e.to_string())?;
    cli(
        dir,
        &[
            "generate",
            "--spec",
            "default_a",
            "--patients",
            "1000",
            "--out",
            "raw_a",
        ],
    )?;
    cli(
        dir,
        &[
            "generate",
            "--spec",
            "default_b",
            "--patients",
            "1000",
            "--out",
            "raw_b",
        ],
    )?;
    cli(dir, &["etl", "--in", "raw_a", "--out", "a"])?;
    cli(dir, &["etl", "--in", "raw_b", "--out", "b"])?;
    let base = ["--config", "desk.conf", "--dataset", "a"];
    for (enc, mode, out) in [
        ("codeemb", "vc", "runs/code"),
        ("rnn", "dsva_dpe", "runs/desc"),
    ] {
        let mut args = vec![
            "train",
            "--encoder",
            enc,
            "--value-mode",
            mode,
            "--out",
            out,
        ];
        args.extend(base);
        cli(dir, &args)?;
    }
    let mut args = vec![
        "transfer",
        "--encoder",
        "codeemb",
        "--value-mode",
        "vc",
        "--target",
        "b",
    ];
    args.extend([
        "--from",
        "runs/code",
        "--set",
        "ratios=0,0.1",
        "--out",
        "runs/transfer",
    ]);
    args.extend(base);
    cli(dir, &args)?;
    cli(dir, &["report", "--in", "runs", "--style", "table1"])?;
    std::fs::read(dir.join("runs/report/aggregate.json")).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (x, y) = (tmp.path().join("first"), tmp.path().join("second"));
    std::fs::create_dir_all(&x)
        .and_then(|_| std::fs::create_dir_all(&y))
        .map_err(|e| e.to_string())?;
    let first = pipeline(&x)?;
    let second = pipeline(&y)?;
    ensure(first == second, || {
        "aggregate JSON differs between runs".into()
    })?;
    let cells = serde_json::from_slice::<serde_json::Value>(&first)
        .ok()
        .and_then(|v| v["cells"].as_array().map(Vec::len))
        .unwrap_or(0);
    ensure(cells >= 3, || format!("only {cells} cells"))?;
    Ok(format!(
        "{} identical bytes, {cells} cells; {}",
        first.len(),
        secs(t0.elapsed())
    ))
}

// ---------------------------------------------------------------- driver

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let mut shared = Shared::default();
    type Check<'a> = (&'static str, Box<dyn FnMut(&mut Shared) -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("grad_fidelity", Box::new(|_| grad_fidelity())),
        ("metric_oracles", Box::new(|_| metric_oracles())),
        ("tokenizer_values", Box::new(|_| tokenizer_values())),
        ("etl_fixture", Box::new(|_| etl_fixture())),
        ("transfer_zero_shot", Box::new(transfer_zero_shot)),
        ("pooled_trend", Box::new(pooled_trend)),
        ("mlm_sanity", Box::new(mlm_sanity)),
        ("w2v_sanity", Box::new(|_| w2v_sanity())),
        ("statistics", Box::new(|_| statistics())),
        ("pca_rank2", Box::new(|_| pca_rank2())),
        ("determinism", Box::new(|_| determinism())),
    ];
    let mut results = BTreeMap::new();
    let mut failed = 0;
    for (name, mut check) in checks {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == name)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut shared))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match &outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
        results.insert(name, outcome.is_ok());
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
