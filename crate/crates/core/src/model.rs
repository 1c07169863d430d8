//! Encoder plus head, and its on-disk checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Label, TextSample, Vocab};
use crate::encoder::{load_precomputed, BuiltinEncoder, ContextualFeatures, Encoder, EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::head::{forward, ForwardOptions, ForwardTrace, GateMode, HeadConfig, HeadParams};
use crate::optim::{AdamState, Parameters};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub head: HeadParams,
    pub gate: GateMode,
    pub keep_prob: f64,
}

impl Model {
    /// Fresh model with a builtin encoder over `vocab`.
    pub fn builtin(vocab: Vocab, enc: &EncoderConfig, head: &HeadConfig) -> Result<Model> {
        enc.validate()?;
        head.validate()?;
        let mut b = BuiltinEncoder::new(vocab, enc.d_h, enc.max_len, enc.seed);
        b.warm();
        Ok(Model::with_encoder(Encoder::Builtin(b), head))
    }

    pub fn with_encoder(encoder: Encoder, head: &HeadConfig) -> Model {
        let head_params = HeadParams::init(encoder.d_h(), head.hidden, head.layers, head.seed);
        Model {
            encoder,
            head: head_params,
            gate: head.gate,
            keep_prob: head.keep_prob,
        }
    }

    pub fn features(&self, sample: &TextSample) -> Result<ContextualFeatures> {
        self.encoder.encode(sample)
    }

    pub fn eval_options(&self) -> ForwardOptions {
        ForwardOptions::eval(self.gate)
    }

    pub fn trace_features(&self, h: &ContextualFeatures) -> Result<ForwardTrace> {
        forward(h, &self.head, &self.eval_options())
    }

    pub fn predict_features(&self, h: &ContextualFeatures) -> Result<[f64; 2]> {
        Ok(self.trace_features(h)?.pred)
    }

    pub fn predict(&self, sample: &TextSample) -> Result<[f64; 2]> {
        self.predict_features(&self.features(sample)?)
    }

    pub fn classify(&self, sample: &TextSample) -> Result<Label> {
        Ok(argmax(self.predict(sample)?))
    }
}

/// Class with the larger probability; ties go to cover.
pub fn argmax(pred: [f64; 2]) -> Label {
    if pred[1] > pred[0] {
        Label::Stego
    } else {
        Label::Cover
    }
}

/// Gradient buffer for the builtin embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrad(pub Array2<f64>);

impl EmbeddingGrad {
    pub fn zeros_for(enc: &BuiltinEncoder) -> Self {
        EmbeddingGrad(Array2::zeros(enc.embedding.raw_dim()))
    }

    /// Adds the feature gradient of one encoded sequence. Positions are
    /// constants, so each row of `dh` flows straight to its token's embedding.
    pub fn accumulate(&mut self, ids: &[u32], dh: &Array2<f64>) -> Result<()> {
        if dh.nrows() != ids.len() || dh.ncols() != self.0.ncols() {
            return Err(Error::Contract(
                "feature gradient does not match encoded sequence".into(),
            ));
        }
        for (t, &id) in ids.iter().enumerate() {
            let mut row = self.0.row_mut(id as usize);
            row += &dh.row(t);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.0.fill(0.0);
    }
}

impl Parameters for EmbeddingGrad {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.0.as_slice().expect("standard layout")]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.0.as_slice_mut().expect("standard layout")]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub head: AdamState,
    pub encoder: Option<AdamState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderSnapshot {
    Builtin(BuiltinEncoder),
    /// Features live in an external file; only its checksum is stored.
    Precomputed {
        path: PathBuf,
        checksum: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub encoder: EncoderSnapshot,
    pub head: HeadParams,
    pub gate: GateMode,
    pub keep_prob: f64,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// `precomputed_path` is required when the model uses a precomputed store.
    pub fn from_model(
        model: &Model,
        config_hash: impl Into<String>,
        optimizer: OptimizerState,
        precomputed_path: Option<&Path>,
    ) -> Result<Checkpoint> {
        let encoder = match &model.encoder {
            Encoder::Builtin(b) => EncoderSnapshot::Builtin(b.clone()),
            Encoder::Precomputed(_) => EncoderSnapshot::Precomputed {
                path: precomputed_path
                    .ok_or_else(|| Error::invalid("checkpointing a precomputed encoder needs its path"))?
                    .to_path_buf(),
                checksum: model.encoder.checksum(),
            },
        };
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            encoder,
            head: model.head.clone(),
            gate: model.gate,
            keep_prob: model.keep_prob,
            optimizer,
        })
    }

    pub fn into_model(self) -> Result<(Model, OptimizerState)> {
        let encoder = match self.encoder {
            EncoderSnapshot::Builtin(mut b) => {
                b.warm();
                Encoder::Builtin(b)
            }
            EncoderSnapshot::Precomputed { path, checksum } => {
                let enc = Encoder::Precomputed(load_precomputed(&path)?);
                if enc.checksum() != checksum {
                    return Err(Error::Integrity(format!(
                        "precomputed features at {} changed since the checkpoint was written",
                        path.display()
                    )));
                }
                enc
            }
        };
        if encoder.d_h() != self.head.d_in {
            return Err(Error::Format("encoder width does not match head input width".into()));
        }
        if !self.head.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite head parameters".into()));
        }
        let model = Model {
            encoder,
            head: self.head,
            gate: self.gate,
            keep_prob: self.keep_prob,
        };
        Ok((model, self.optimizer))
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        match self.encoder {
            EncoderSnapshot::Builtin(_) => EncoderKind::Builtin,
            EncoderSnapshot::Precomputed { .. } => EncoderKind::Precomputed,
        }
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(ckpt)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    Ok(ckpt)
}

/// SHA-256 of a value's canonical JSON, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// SHA-256 over every head parameter, in tensor order.
pub fn head_checksum(head: &HeadParams) -> String {
    let mut h = Sha256::new();
    for t in head.tensors() {
        for v in t {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
