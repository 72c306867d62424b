use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{init, ParamId, ParamStore, RngStream, Tape, Tensor, Var};
use crate::text::ValueStrategy;

pub const UNK_KEY: &str = "[UNK]";
const KEY_SEP: char = '\u{1f}';

/// Lookup key of one event. Text-side value strategies make every
/// `(code, value)` pair its own entry; `Vc` keys on the bare code.
pub fn code_key(code: &str, value: Option<&str>, strategy: ValueStrategy) -> String {
    match (strategy, value) {
        (ValueStrategy::Vc, _) | (_, None) => code.to_string(),
        (_, Some(v)) => format!("{code}{KEY_SEP}{v}"),
    }
}

/// Map from event keys to embedding rows. Row 0 is reserved for keys that are
/// unseen at evaluation time within the training domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeVocab {
    keys: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl CodeVocab {
    /// Vocabulary over `keys` in first-seen order.
    pub fn build<'a>(keys: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = CodeVocab {
            keys: vec![UNK_KEY.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(UNK_KEY.to_string(), 0);
        for k in keys {
            v.push(k);
        }
        v
    }

    fn push(&mut self, key: &str) -> usize {
        if let Some(&i) = self.index.get(key) {
            return i;
        }
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), self.keys.len() - 1);
        self.keys.len() - 1
    }

    pub fn reindex(&mut self) {
        self.index = self
            .keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.len() <= 1
    }

    pub fn contains(&self, key: &str) -> bool {
        self.index.contains_key(key)
    }

    pub fn key(&self, row: usize) -> Option<&str> {
        self.keys.get(row).map(String::as_str)
    }

    /// Row of a key seen in training; anything else is a vocabulary error.
    pub fn id(&self, key: &str) -> Result<usize> {
        self.index.get(key).copied().ok_or_else(|| {
            Error::Vocabulary(format!(
                "code {:?} has no embedding row",
                key.replace(KEY_SEP, "=")
            ))
        })
    }

    /// Row of `key`, or the reserved unknown row.
    pub fn id_or_unk(&self, key: &str) -> usize {
        self.index.get(key).copied().unwrap_or(0)
    }
}

/// Code lookup table `E_psi`, one row per vocabulary entry.
#[derive(Debug, Clone)]
pub struct CodeEmbedding {
    pub table: ParamId,
    pub dim: usize,
}

pub const CODE_TABLE: &str = "code_emb.table";

impl CodeEmbedding {
    pub fn new(store: &mut ParamStore, vocab: &CodeVocab, dim: usize, rng: &mut RngStream) -> Self {
        let table = store.insert(CODE_TABLE, init::normal(&[vocab.len(), dim], 1.0, rng));
        CodeEmbedding { table, dim }
    }

    pub fn bind(store: &ParamStore) -> Option<Self> {
        let table = store.id(CODE_TABLE)?;
        Some(CodeEmbedding {
            table,
            dim: store.get(table).cols(),
        })
    }

    pub fn rows(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }

    pub fn lookup(&self, tape: &mut Tape, rows: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.gather(t, rows)
    }

    /// Re-targets the table to a new domain: keys already known keep their
    /// rows, every other key of `target` gets a freshly initialized row.
    /// Returns the extended vocabulary and how many target keys resolved to
    /// an existing row.
    pub fn adapt(
        &self,
        store: &mut ParamStore,
        vocab: &CodeVocab,
        target_keys: &[String],
        rng: &mut RngStream,
    ) -> (CodeVocab, usize) {
        let mut extended = vocab.clone();
        let mut resolved = 0;
        for k in target_keys {
            if vocab.contains(k) && k != UNK_KEY {
                resolved += 1;
            } else {
                extended.push(k);
            }
        }
        let old = store.get(self.table).clone();
        let added = extended.len() - vocab.len();
        let mut data = old.into_data();
        data.extend(init::normal(&[added, self.dim], 1.0, rng).into_data());
        let table = Tensor::matrix(extended.len(), self.dim, data).expect("row count");
        store.insert(CODE_TABLE, table);
        (extended, resolved)
    }
}
