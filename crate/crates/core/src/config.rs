//! Flat `key = value` run configuration, layered file < environment < flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Task;
use crate::encoders::{EncoderKind, Pretrain};
use crate::error::{Error, Result};
use crate::experiments::{ExperimentConfig, TTest};
use crate::text::ValueStrategy;

/// Environment variables `MEDEMBED_<KEY>` override file values.
pub const ENV_PREFIX: &str = "MEDEMBED_";

/// Every accepted key.
pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "bpe_vocab",
    "dataset",
    "dropout",
    "emb_dim",
    "encoder",
    "epochs",
    "hidden",
    "jobs",
    "lr",
    "max_tokens",
    "mlm_epochs",
    "mlm_lr",
    "patience",
    "pretrain",
    "ratios",
    "rnn_hidden",
    "seeds",
    "target",
    "task",
    "text_ff",
    "text_heads",
    "text_layers",
    "ttest",
    "value_mode",
    "w2v_epochs",
];

fn check_key(key: &str, origin: &str) -> Result<()> {
    if CONFIG_KEYS.contains(&key) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unknown key {key:?} in {origin}; valid keys: {}",
            CONFIG_KEYS.join(", ")
        )))
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{origin} line {}: expected `key = value`", i + 1))
        })?;
        let k = k.trim();
        check_key(k, origin)?;
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Settings from `MEDEMBED_*` variables; other variables are ignored.
pub fn env_settings(
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, v) in vars {
        if let Some(key) = k.strip_prefix(ENV_PREFIX) {
            let key = key.to_ascii_lowercase();
            check_key(&key, "environment")?;
            out.insert(key, v);
        }
    }
    Ok(out)
}

/// Seed lists: `7`, `1,3,5`, or the inclusive range `0..9`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("cannot parse seeds {s:?}; use N, N,M,... or A..B"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| bad()))
        .collect()
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_enum<T: FromStr<Err = Error>>(v: &str) -> Result<T> {
    v.parse()
}

/// Applies `settings` on top of the defaults.
pub fn apply_settings(settings: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::default();
    for (k, v) in settings {
        let v = v.as_str();
        match k.as_str() {
            "batch_size" => c.train.batch_size = parse(k, v)?,
            "bpe_vocab" => c.model.bpe_vocab = parse(k, v)?,
            "dataset" => c.source = Some(PathBuf::from(v)),
            "dropout" => c.model.dropout = parse(k, v)?,
            "emb_dim" => c.model.emb_dim = parse(k, v)?,
            "encoder" => c.model.encoder = parse_enum::<EncoderKind>(v)?,
            "epochs" => c.train.epochs = parse(k, v)?,
            "hidden" => c.model.hidden = parse(k, v)?,
            "jobs" => c.jobs = parse(k, v)?,
            "lr" => c.train.lr = parse(k, v)?,
            "max_tokens" => c.model.max_tokens = parse(k, v)?,
            "mlm_epochs" => c.mlm.epochs = parse(k, v)?,
            "mlm_lr" => c.mlm.lr = parse(k, v)?,
            "patience" => c.train.patience = parse(k, v)?,
            "pretrain" => c.model.pretrain = parse_enum::<Pretrain>(v)?,
            "ratios" => {
                c.ratios = v
                    .split(',')
                    .map(|r| parse::<f64>(k, r.trim()))
                    .collect::<Result<_>>()?
            }
            "rnn_hidden" => c.model.rnn_hidden = parse(k, v)?,
            "seeds" => c.seeds = parse_seeds(v)?,
            "target" => c.target = Some(PathBuf::from(v)),
            "task" => c.model.task = parse_enum::<Task>(v)?,
            "text_ff" => c.model.text_ff = parse(k, v)?,
            "text_heads" => c.model.text_heads = parse(k, v)?,
            "text_layers" => c.model.text_layers = parse(k, v)?,
            "ttest" => c.ttest = parse_enum::<TTest>(v)?,
            "value_mode" => c.model.strategy = parse_enum::<ValueStrategy>(v)?,
            "w2v_epochs" => c.w2v_epochs = parse(k, v)?,
            other => check_key(other, "settings")?,
        }
    }
    c.validate_run()?;
    Ok(c)
}

/// Merges the layers (later wins) and builds the configuration. Returns the
/// merged settings alongside for the run manifest.
pub fn load_config(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &BTreeMap<String, String>,
) -> Result<(ExperimentConfig, BTreeMap<String, String>)> {
    let mut merged = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config_text(&text, &p.display().to_string())?
        }
        None => BTreeMap::new(),
    };
    merged.extend(env_settings(env)?);
    for (k, v) in flags {
        check_key(k, "command line")?;
        merged.insert(k.clone(), v.clone());
    }
    let cfg = apply_settings(&merged)?;
    Ok((cfg, merged))
}

/// Every setting of `c` as `key = value` pairs, the inverse of [`apply_settings`].
pub fn snapshot(c: &ExperimentConfig) -> BTreeMap<String, String> {
    let seeds: Vec<String> = c.seeds.iter().map(u64::to_string).collect();
    let ratios: Vec<String> = c.ratios.iter().map(f64::to_string).collect();
    let mut m: BTreeMap<String, String> = [
        ("batch_size", c.train.batch_size.to_string()),
        ("bpe_vocab", c.model.bpe_vocab.to_string()),
        ("dropout", c.model.dropout.to_string()),
        ("emb_dim", c.model.emb_dim.to_string()),
        ("encoder", c.model.encoder.as_str().to_string()),
        ("epochs", c.train.epochs.to_string()),
        ("hidden", c.model.hidden.to_string()),
        ("jobs", c.jobs.to_string()),
        ("lr", c.train.lr.to_string()),
        ("max_tokens", c.model.max_tokens.to_string()),
        ("mlm_epochs", c.mlm.epochs.to_string()),
        ("mlm_lr", c.mlm.lr.to_string()),
        ("patience", c.train.patience.to_string()),
        ("pretrain", c.model.pretrain.as_str().to_string()),
        ("ratios", ratios.join(",")),
        ("rnn_hidden", c.model.rnn_hidden.to_string()),
        ("seeds", seeds.join(",")),
        ("task", c.model.task.as_str().to_string()),
        ("text_ff", c.model.text_ff.to_string()),
        ("text_heads", c.model.text_heads.to_string()),
        ("text_layers", c.model.text_layers.to_string()),
        ("ttest", c.ttest.as_str().to_string()),
        ("value_mode", c.model.strategy.as_str().to_string()),
        ("w2v_epochs", c.w2v_epochs.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    if let Some(p) = &c.source {
        m.insert("dataset".into(), p.display().to_string());
    }
    if let Some(p) = &c.target {
        m.insert("target".into(), p.display().to_string());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let (c, _) = load_config(None, no_env(), &BTreeMap::new()).unwrap();
        assert_eq!(c.model.dropout, 0.3);
        assert_eq!(c.model.emb_dim, 128);
        assert_eq!(c.model.hidden, 256);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.seeds, (0..10).collect::<Vec<_>>());
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# desk run\nlr = 5e-4\nepochs = 3\nseeds = 0..9\n").unwrap();
        let env = vec![
            ("MEDEMBED_EPOCHS".to_string(), "4".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let flags = BTreeMap::from([("lr".to_string(), "1e-5".to_string())]);
        let (c, merged) = load_config(Some(&p), env, &flags).unwrap();
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.seeds.len(), 10);
        assert_eq!(merged["epochs"], "4");
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = parse_config_text("learning_rate = 1\n", "f").unwrap_err();
        match err {
            Error::Config(m) => {
                assert!(m.contains("learning_rate") && m.contains("lr") && m.contains("value_mode"))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            env_settings([("MEDEMBED_BOGUS".into(), "1".into())]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config_text("lr 1\n", "f"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            apply_settings(&BTreeMap::from([("lr".into(), "fast".into())])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seed_forms() {
        assert_eq!(parse_seeds("0..9").unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(parse_seeds("3, 1").unwrap(), vec![3, 1]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("9..0").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = ExperimentConfig::default();
        c.model.encoder = EncoderKind::CodeEmb;
        c.model.strategy = ValueStrategy::Vc;
        c.train.lr = 3e-3;
        c.seeds = vec![2, 5];
        c.source = Some("data/a".into());
        assert_eq!(apply_settings(&snapshot(&c)).unwrap(), c);
    }
}
