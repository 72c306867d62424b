//! Event encoders: code lookup tables and shared description encoders, with
//! their pretraining routines and the value path.

mod code;
mod mlm;
mod text;
mod value;
mod w2v;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use code::{code_key, CodeEmbedding, CodeVocab, CODE_TABLE, UNK_KEY};
pub use mlm::{mlm_pretrain, unigram_entropy, MlmConfig, MlmReport};
pub use text::{RnnEncoder, TextEncoder, TextEncoderConfig, TransformerEncoder};
pub use value::{fuse_value, ValueMlp, VALUE_DIM};
pub use w2v::{cosine, w2v_pretrain, W2vConfig};

/// Width of every event vector before the value path.
pub const EVENT_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    CodeEmb,
    Transformer,
    Rnn,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 3] = [Self::CodeEmb, Self::Transformer, Self::Rnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CodeEmb => "codeemb",
            Self::Transformer => "transformer",
            Self::Rnn => "rnn",
        }
    }

    pub fn is_text(self) -> bool {
        self != Self::CodeEmb
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown encoder {s:?} (codeemb|transformer|rnn)"))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pretrain {
    None,
    W2v,
    Mlm,
}

impl Pretrain {
    pub const ALL: [Pretrain; 3] = [Self::None, Self::W2v, Self::Mlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::W2v => "w2v",
            Self::Mlm => "mlm",
        }
    }
}

impl fmt::Display for Pretrain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pretrain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pretraining {s:?} (none|w2v|mlm)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse() {
        for k in EncoderKind::ALL {
            assert_eq!(k.as_str().parse::<EncoderKind>().unwrap(), k);
        }
        for p in Pretrain::ALL {
            assert_eq!(p.as_str().parse::<Pretrain>().unwrap(), p);
        }
        assert!("bert".parse::<EncoderKind>().is_err());
    }
}
