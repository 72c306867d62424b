//! Sequence classifier `P_theta` over event vectors, the event encoders that
//! feed it, pretraining hooks and the supervised training loop.

mod features;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::encoders::{
    fuse_value, mlm_pretrain, w2v_pretrain, CodeEmbedding, EncoderKind, MlmConfig, MlmReport,
    Pretrain, TextEncoder, TextEncoderConfig, ValueMlp, W2vConfig, VALUE_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{Gru, Linear};
use crate::tensor::{ParamStore, RngStream, Tape, Tensor, Var, BCE_EPS};
use crate::text::{ValueStrategy, VcValue, MAX_TOKENS};

pub use features::{FeatureSpace, PreparedSet, FEATURES_FILE, NORMALIZER_FILE, VOCAB_FILE};
pub use train::{evaluate, score, train_model, EpochRecord, TrainConfig, TrainReport};

pub const PARAMS_FILE: &str = "params.json";
pub const MODEL_CONFIG_FILE: &str = "model.json";

/// Architecture of one run. Defaults: embedding 128, hidden 256, dropout 0.3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub strategy: ValueStrategy,
    pub pretrain: Pretrain,
    pub task: Task,
    pub emb_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub rnn_hidden: usize,
    pub max_tokens: usize,
    pub bpe_vocab: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderKind::Rnn,
            strategy: ValueStrategy::DsvaDpe,
            pretrain: Pretrain::None,
            task: Task::Mort,
            emb_dim: 128,
            hidden: 256,
            dropout: 0.3,
            text_layers: 2,
            text_heads: 2,
            text_ff: 512,
            rnn_hidden: 128,
            max_tokens: MAX_TOKENS,
            bpe_vocab: 2000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if self.emb_dim == 0 || self.hidden == 0 || self.rnn_hidden == 0 || self.max_tokens < 2 {
            return Err(Error::Config(
                "model dimensions must be positive and max_tokens at least 2".into(),
            ));
        }
        if self.encoder == EncoderKind::Transformer
            && !self.emb_dim.is_multiple_of(self.text_heads.max(1))
        {
            return Err(Error::Config(format!(
                "embedding dim {} not divisible by {} heads",
                self.emb_dim, self.text_heads
            )));
        }
        match (self.encoder, self.pretrain) {
            (EncoderKind::CodeEmb, Pretrain::Mlm) => Err(Error::Config(
                "mlm pretraining needs a text encoder (transformer|rnn)".into(),
            )),
            (k, Pretrain::W2v) if k.is_text() => Err(Error::Config(
                "w2v pretraining applies to codeemb only".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn text_config(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size,
            dim: self.emb_dim,
            layers: self.text_layers,
            heads: self.text_heads,
            ff_dim: self.text_ff,
            rnn_hidden: self.rnn_hidden,
            max_len: self.max_tokens,
        }
    }

    /// Width of the predictor input.
    pub fn input_dim(&self) -> usize {
        if self.strategy == ValueStrategy::Vc {
            self.emb_dim + VALUE_DIM
        } else {
            self.emb_dim
        }
    }
}

/// Turns events into vectors; the predictor sees only the result.
#[derive(Debug, Clone)]
pub enum EventEncoder {
    Code(CodeEmbedding),
    Text {
        encoder: TextEncoder,
        use_places: bool,
    },
}

impl EventEncoder {
    /// `[total events, emb_dim]` for the samples in `batch`, in sample order.
    pub fn encode(&self, tape: &mut Tape, set: &PreparedSet, batch: &[usize]) -> Result<Var> {
        let units: Vec<usize> = batch
            .iter()
            .flat_map(|&i| set.units[i].iter().copied())
            .collect();
        match self {
            EventEncoder::Code(c) => c.lookup(tape, &units),
            EventEncoder::Text {
                encoder,
                use_places,
            } => {
                // encode each distinct description once per batch
                let mut local = std::collections::HashMap::new();
                let mut seqs = Vec::new();
                let rows: Vec<usize> = units
                    .iter()
                    .map(|&u| {
                        *local.entry(u).or_insert_with(|| {
                            seqs.push(&set.texts[u]);
                            seqs.len() - 1
                        })
                    })
                    .collect();
                let distinct = encoder.encode(tape, &seqs, *use_places)?;
                tape.gather(distinct, &rows)
            }
        }
    }
}

/// GRU over event vectors, dropout on the final state, sigmoid head.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub gru: Gru,
    pub head: Linear,
    pub dropout: f64,
}

impl Predictor {
    pub fn new(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: usize,
        arity: usize,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Self {
        Predictor {
            gru: Gru::new(store, "predictor.gru", in_dim, hidden, rng),
            head: Linear::new(store, "predictor.head", hidden, arity, rng),
            dropout,
        }
    }

    pub fn bind(store: &ParamStore, dropout: f64) -> Option<Self> {
        Some(Predictor {
            gru: Gru::bind(store, "predictor.gru")?,
            head: Linear::bind(store, "predictor.head")?,
            dropout,
        })
    }

    /// Final hidden state per sequence (`[n, hidden]`) from packed event rows.
    pub fn represent(&self, tape: &mut Tape, events: Var, lengths: &[usize]) -> Result<Var> {
        if lengths.contains(&0) {
            return Err(Error::Input("event sequence is empty".into()));
        }
        let gx = self.gru.project_inputs(tape, events)?;
        self.gru.run_final(tape, gx, lengths, false)
    }

    /// Probabilities `[n, arity]` and the pre-dropout representation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        events: Var,
        lengths: &[usize],
        train: bool,
        rng: &mut RngStream,
    ) -> Result<(Var, Var)> {
        let h = self.represent(tape, events, lengths)?;
        let d = tape.dropout(h, self.dropout, train, rng)?;
        let logits = self.head.forward(tape, d)?;
        Ok((tape.sigmoid(logits)?, h))
    }
}

/// Mean binary cross-entropy over outputs and samples.
pub fn task_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "task_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if let Some(y) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Input(format!("label {y} is not 0 or 1")));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// Parameters plus everything needed to featurize new records.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub features: FeatureSpace,
    pub store: ParamStore,
}

/// Bound views of a model's parameters.
pub struct Parts {
    pub events: EventEncoder,
    pub value: Option<ValueMlp>,
    pub predictor: Predictor,
}

/// Outcome of the optional pretraining stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PretrainReport {
    None,
    W2v { sequences: usize },
    Mlm(MlmReport),
}

impl Model {
    pub fn new(cfg: ModelConfig, features: FeatureSpace, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        if features.encoder != cfg.encoder || features.strategy != cfg.strategy {
            return Err(Error::Config(
                "feature space does not match the model configuration".into(),
            ));
        }
        let mut store = ParamStore::new();
        if let Some(codes) = &features.codes {
            CodeEmbedding::new(&mut store, codes, cfg.emb_dim, rng);
        } else if let Some(vocab) = &features.text {
            TextEncoder::new(cfg.encoder, &mut store, &cfg.text_config(vocab.len()), rng)?;
        }
        if cfg.strategy == ValueStrategy::Vc {
            ValueMlp::new(&mut store, rng);
        }
        Predictor::new(
            &mut store,
            cfg.input_dim(),
            cfg.hidden,
            cfg.task.arity(),
            cfg.dropout,
            rng,
        );
        Ok(Model {
            cfg,
            features,
            store,
        })
    }

    pub fn parts(&self) -> Result<Parts> {
        let events = match (&self.features.codes, &self.features.text) {
            (Some(_), _) => EventEncoder::Code(
                CodeEmbedding::bind(&self.store)
                    .ok_or_else(|| Error::Contract("missing code table".into()))?,
            ),
            (None, Some(v)) => EventEncoder::Text {
                encoder: TextEncoder::bind(
                    self.cfg.encoder,
                    &self.store,
                    &self.cfg.text_config(v.len()),
                )?,
                use_places: self.cfg.strategy == ValueStrategy::DsvaDpe,
            },
            (None, None) => return Err(Error::Contract("feature space has no vocabulary".into())),
        };
        let value = ValueMlp::bind(&self.store);
        let predictor = Predictor::bind(&self.store, self.cfg.dropout)
            .ok_or_else(|| Error::Contract("missing predictor parameters".into()))?;
        Ok(Parts {
            events,
            value,
            predictor,
        })
    }

    /// Probabilities and representations for `batch` on `tape`.
    pub fn forward(
        &self,
        parts: &Parts,
        tape: &mut Tape,
        set: &PreparedSet,
        batch: &[usize],
        train: bool,
        rng: &mut RngStream,
    ) -> Result<(Var, Var)> {
        let ev = parts.events.encode(tape, set, batch)?;
        let values: Vec<VcValue> = if set.values.is_empty() {
            Vec::new()
        } else {
            batch
                .iter()
                .flat_map(|&i| set.values[i].iter().copied())
                .collect()
        };
        let ev = fuse_value(tape, ev, &values, self.cfg.strategy, parts.value.as_ref())?;
        let lengths: Vec<usize> = batch.iter().map(|&i| set.units[i].len()).collect();
        parts.predictor.forward(tape, ev, &lengths, train, rng)
    }

    fn eval_batches(
        &self,
        set: &PreparedSet,
        batch_size: usize,
        want_repr: bool,
    ) -> Result<Tensor> {
        let parts = self.parts()?;
        let mut rng = RngStream::new(0);
        let mut data = Vec::new();
        let mut cols = 0;
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let mut tape = Tape::with_params(&self.store);
            let (p, h) = self.forward(&parts, &mut tape, set, chunk, false, &mut rng)?;
            let t = tape.value(if want_repr { h } else { p });
            cols = t.cols();
            data.extend_from_slice(t.data());
        }
        Tensor::matrix(set.len(), cols, data)
    }

    /// Eval-mode probabilities `[n, arity]`.
    pub fn predict(&self, set: &PreparedSet) -> Result<Tensor> {
        self.eval_batches(set, 64, false)
    }

    /// Eval-mode final GRU states `[n, hidden]`.
    pub fn representations(&self, set: &PreparedSet) -> Result<Tensor> {
        self.eval_batches(set, 64, true)
    }

    /// Runs the configured pretraining on the training split.
    pub fn pretrain(
        &mut self,
        train: &PreparedSet,
        mlm: &MlmConfig,
        w2v_epochs: usize,
        rng: &mut RngStream,
    ) -> Result<PretrainReport> {
        match self.cfg.pretrain {
            Pretrain::None => Ok(PretrainReport::None),
            Pretrain::W2v => {
                let emb = CodeEmbedding::bind(&self.store)
                    .ok_or_else(|| Error::Contract("missing code table".into()))?;
                let cfg = W2vConfig {
                    dim: self.cfg.emb_dim,
                    epochs: w2v_epochs,
                    ..W2vConfig::default()
                };
                let table =
                    w2v_pretrain(&train.units, self.store.get(emb.table).clone(), &cfg, rng)?;
                *self.store.get_mut(emb.table) = table;
                Ok(PretrainReport::W2v {
                    sequences: train.len(),
                })
            }
            Pretrain::Mlm => {
                let parts = self.parts()?;
                let EventEncoder::Text {
                    encoder,
                    use_places,
                } = &parts.events
                else {
                    return Err(Error::Config("mlm pretraining needs a text encoder".into()));
                };
                let vocab = self.features.text.as_ref().map_or(0, |v| v.len());
                let rep = mlm_pretrain(
                    encoder,
                    &mut self.store,
                    &train.texts,
                    *use_places,
                    vocab,
                    mlm,
                    rng,
                )?;
                Ok(PretrainReport::Mlm(rep))
            }
        }
    }

    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = self.features.save(dir)?;
        let p = dir.join(MODEL_CONFIG_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&self.cfg)?)
            .map_err(|e| Error::io(&p, e))?;
        out.push(p);
        let p = dir.join(PARAMS_FILE);
        self.store.save(&p)?;
        out.push(p);
        Ok(out)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MODEL_CONFIG_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let features = FeatureSpace::load(dir)?;
        let store = ParamStore::load(&dir.join(PARAMS_FILE))?;
        let m = Model {
            cfg,
            features,
            store,
        };
        m.parts()?;
        Ok(m)
    }
}
