//! Cohort records to model inputs: embedding rows or token sequences per
//! event, optional normalized values, and task targets.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PatientRecord, Task};
use crate::encoders::{code_key, CodeVocab, EncoderKind};
use crate::error::{Error, Result};
use crate::text::{
    encoder_text, tokenize, EventDescription, TokenSequence, ValueNormalizer, ValueStrategy,
    VcValue, Vocabulary,
};

/// Input space of one model: how events are identified and tokenized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    pub encoder: EncoderKind,
    pub strategy: ValueStrategy,
    pub max_tokens: usize,
    pub codes: Option<CodeVocab>,
    pub text: Option<Vocabulary>,
    pub normalizer: Option<ValueNormalizer>,
}

#[derive(Serialize, Deserialize)]
struct FeatureMeta {
    encoder: EncoderKind,
    strategy: ValueStrategy,
    max_tokens: usize,
}

pub const VOCAB_FILE: &str = "vocab.json";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const FEATURES_FILE: &str = "features.json";

fn event_text(e: &crate::data::ClinicalEvent, strategy: ValueStrategy) -> Result<String> {
    let d = EventDescription::new(e.description.clone(), e.value.as_deref(), e.unit.as_deref())?;
    Ok(encoder_text(&d, strategy))
}

/// Model-ready version of a record set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreparedSet {
    pub stay_ids: Vec<u64>,
    /// Per sample, per event: code row or index into `texts`.
    pub units: Vec<Vec<usize>>,
    /// Per sample, per event; empty unless the value strategy is `vc`.
    pub values: Vec<Vec<VcValue>>,
    pub targets: Vec<Vec<f64>>,
    /// Distinct token sequences referenced by `units` (text encoders only).
    pub texts: Vec<TokenSequence>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// Samples at `idx`, sharing the text table.
    pub fn select(&self, idx: &[usize]) -> PreparedSet {
        PreparedSet {
            stay_ids: idx.iter().map(|&i| self.stay_ids[i]).collect(),
            units: idx.iter().map(|&i| self.units[i].clone()).collect(),
            values: if self.values.is_empty() {
                vec![]
            } else {
                idx.iter().map(|&i| self.values[i].clone()).collect()
            },
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
            texts: self.texts.clone(),
        }
    }

    /// Concatenation of two sets prepared in the same feature space.
    pub fn concat(&self, other: &PreparedSet) -> Result<PreparedSet> {
        if !self.is_empty() && !other.is_empty() && self.arity() != other.arity() {
            return Err(Error::Config(format!(
                "label schemas differ: {} vs {} outputs",
                self.arity(),
                other.arity()
            )));
        }
        let shift = self.texts.len();
        let text_units = !self.texts.is_empty() || !other.texts.is_empty();
        let mut out = self.clone();
        out.stay_ids.extend(&other.stay_ids);
        for u in &other.units {
            out.units.push(if text_units {
                u.iter().map(|i| i + shift).collect()
            } else {
                u.clone()
            });
        }
        out.values.extend(other.values.iter().cloned());
        out.targets.extend(other.targets.iter().cloned());
        out.texts.extend(other.texts.iter().cloned());
        Ok(out)
    }

    /// Targets of all samples as one `[n, arity]` row-major buffer.
    pub fn target_matrix(&self) -> Vec<f64> {
        self.targets.iter().flatten().copied().collect()
    }
}

impl FeatureSpace {
    /// Fits vocabularies and value statistics on training records.
    pub fn fit(
        encoder: EncoderKind,
        strategy: ValueStrategy,
        max_tokens: usize,
        bpe_vocab: usize,
        train: &[PatientRecord],
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let events = || train.iter().flat_map(|r| r.events.iter());
        let (codes, text) = if encoder.is_text() {
            let mut corpus = BTreeSet::new();
            for e in events() {
                corpus.insert(event_text(e, strategy)?);
            }
            let corpus: Vec<String> = corpus.into_iter().collect();
            (None, Some(Vocabulary::train(&corpus, bpe_vocab)?))
        } else {
            let keys: Vec<String> = events()
                .map(|e| code_key(&e.code, e.value.as_deref(), strategy))
                .collect();
            (
                Some(CodeVocab::build(keys.iter().map(String::as_str))),
                None,
            )
        };
        let normalizer = (strategy == ValueStrategy::Vc)
            .then(|| Self::fit_values(train))
            .transpose()?;
        Ok(FeatureSpace {
            encoder,
            strategy,
            max_tokens,
            codes,
            text,
            normalizer,
        })
    }

    pub fn fit_values(records: &[PatientRecord]) -> Result<ValueNormalizer> {
        ValueNormalizer::fit(
            records
                .iter()
                .flat_map(|r| r.events.iter())
                .filter_map(|e| e.value.as_deref().map(|v| (e.code.as_str(), v))),
        )
    }

    /// Composite lookup keys of every event in `records`, first-seen order.
    pub fn keys_of(&self, records: &[PatientRecord]) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for e in records.iter().flat_map(|r| r.events.iter()) {
            let k = code_key(&e.code, e.value.as_deref(), self.strategy);
            if seen.insert(k.clone()) {
                out.push(k);
            }
        }
        out
    }

    pub fn prepare(&self, records: &[PatientRecord], task: Task) -> Result<PreparedSet> {
        let mut set = PreparedSet::default();
        let mut text_index: HashMap<String, usize> = HashMap::new();
        for r in records {
            if r.events.is_empty() {
                return Err(Error::Input(format!("stay {} has no events", r.stay_id)));
            }
            let mut units = Vec::with_capacity(r.events.len());
            for e in &r.events {
                let unit = match (&self.codes, &self.text) {
                    (Some(v), _) => {
                        v.id_or_unk(&code_key(&e.code, e.value.as_deref(), self.strategy))
                    }
                    (None, Some(vocab)) => {
                        let t = event_text(e, self.strategy)?;
                        match text_index.get(&t) {
                            Some(&i) => i,
                            None => {
                                set.texts.push(tokenize(&t, vocab, self.max_tokens));
                                text_index.insert(t, set.texts.len() - 1);
                                set.texts.len() - 1
                            }
                        }
                    }
                    (None, None) => {
                        return Err(Error::Contract("feature space has no vocabulary".into()))
                    }
                };
                units.push(unit);
            }
            if let Some(n) = &self.normalizer {
                let vals = r
                    .events
                    .iter()
                    .map(|e| n.prepare(&e.code, e.value.as_deref()))
                    .collect::<Result<Vec<_>>>()?;
                set.values.push(vals);
            }
            set.stay_ids.push(r.stay_id);
            set.units.push(units);
            set.targets.push(task.targets(&r.labels));
        }
        Ok(set)
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut out = Vec::new();
        let meta = FeatureMeta {
            encoder: self.encoder,
            strategy: self.strategy,
            max_tokens: self.max_tokens,
        };
        let p = dir.join(FEATURES_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))?;
        out.push(p);
        let p = dir.join(VOCAB_FILE);
        let vocab = match (&self.codes, &self.text) {
            (Some(c), _) => serde_json::to_string(c)?,
            (None, Some(t)) => t.to_json()?,
            (None, None) => return Err(Error::Contract("feature space has no vocabulary".into())),
        };
        std::fs::write(&p, vocab).map_err(|e| Error::io(&p, e))?;
        out.push(p);
        if let Some(n) = &self.normalizer {
            let p = dir.join(NORMALIZER_FILE);
            std::fs::write(&p, serde_json::to_string(n)?).map_err(|e| Error::io(&p, e))?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let meta: FeatureMeta = serde_json::from_str(&read(FEATURES_FILE)?)?;
        let vocab = read(VOCAB_FILE)?;
        let (codes, text) = if meta.encoder.is_text() {
            (None, Some(Vocabulary::from_json(&vocab)?))
        } else {
            let mut c: CodeVocab = serde_json::from_str(&vocab)?;
            c.reindex();
            (Some(c), None)
        };
        let normalizer = if meta.strategy == ValueStrategy::Vc {
            Some(serde_json::from_str(&read(NORMALIZER_FILE)?)?)
        } else {
            None
        };
        Ok(FeatureSpace {
            encoder: meta.encoder,
            strategy: meta.strategy,
            max_tokens: meta.max_tokens,
            codes,
            text,
            normalizer,
        })
    }
}
