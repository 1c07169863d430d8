//! Frozen domain-common features.
//!
//! Two back ends produce the per-token feature matrix consumed by the head:
//! a builtin embedding table plus sinusoidal positions, and a store of
//! precomputed matrices (for features exported from a large pretrained
//! encoder) keyed by sample id.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{TextSample, Vocab};
use crate::error::{Error, Result};
use crate::optim::Parameters;

/// Per-token feature matrix, `len x d_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextualFeatures(pub Array2<f64>);

impl ContextualFeatures {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn d_h(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Builtin,
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Never updated.
    Always,
    /// Trained with the head during source pretraining, frozen afterwards.
    AfterPretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_h: usize,
    pub freeze_policy: FreezePolicy,
    pub seed: u64,
    /// Maximum tokens per text; longer texts lose their tail.
    pub max_len: usize,
    pub min_freq: usize,
    pub precomputed_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Builtin,
            d_h: 64,
            freeze_policy: FreezePolicy::AfterPretrain,
            seed: 0,
            max_len: 64,
            min_freq: 2,
            precomputed_path: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h < 2 {
            return Err(Error::invalid("encoder d_h must be at least 2"));
        }
        if self.max_len < 1 {
            return Err(Error::invalid("encoder max_len must be at least 1"));
        }
        if self.kind == EncoderKind::Precomputed && self.freeze_policy != FreezePolicy::Always {
            return Err(Error::invalid("precomputed features require freeze_policy = always"));
        }
        Ok(())
    }
}

/// Sinusoidal position encodings, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(t, j)| {
        let pair = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Trainable embedding table over a vocabulary plus fixed positions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuiltinEncoder {
    pub vocab: Vocab,
    pub embedding: Array2<f64>,
    pub max_len: usize,
    #[serde(skip)]
    positions: Option<Array2<f64>>,
}

impl PartialEq for BuiltinEncoder {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.embedding == other.embedding && self.max_len == other.max_len
    }
}

impl BuiltinEncoder {
    pub fn new(vocab: Vocab, d_h: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 3f64.sqrt();
        let embedding = Array2::from_shape_simple_fn((vocab.len(), d_h), || rng.gen_range(-bound..bound));
        BuiltinEncoder {
            vocab,
            embedding,
            max_len,
            positions: None,
        }
    }

    pub fn d_h(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn token_ids(&self, tokens: &[String]) -> Vec<u32> {
        let n = tokens.len().min(self.max_len);
        self.vocab.encode(&tokens[..n])
    }

    pub fn encode_ids(&self, ids: &[u32]) -> ContextualFeatures {
        let d = self.d_h();
        let fresh;
        let pos = match &self.positions {
            Some(p) if p.nrows() >= ids.len() => p,
            _ => {
                fresh = positional_encoding(ids.len().max(self.max_len), d);
                &fresh
            }
        };
        let mut h = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            let e = self.embedding.row(id as usize);
            let p = pos.row(t);
            for ((o, &a), &b) in h.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        ContextualFeatures(h)
    }

    /// Caches the position table; call after construction or deserialization.
    pub fn warm(&mut self) {
        self.positions = Some(positional_encoding(self.max_len, self.d_h()));
    }
}

impl Parameters for BuiltinEncoder {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.embedding.as_slice().expect("standard layout")]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.embedding.as_slice_mut().expect("standard layout")]
    }
}

/// Feature matrices keyed by sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedStore {
    pub d_h: usize,
    pub entries: BTreeMap<String, Array2<f64>>,
}

#[derive(Deserialize)]
struct StoreHeader {
    d_h: usize,
}

#[derive(Deserialize)]
struct StoreRecord {
    id: String,
    h: Vec<Vec<f64>>,
}

/// Reads a precomputed-feature file: a `{"d_h": n}` header line followed by
/// one `{"id": .., "h": [[..], ..]}` record per line.
pub fn load_precomputed(path: impl AsRef<Path>) -> Result<PrecomputedStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut store = PrecomputedStore::default();
    let mut header_seen = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        if !header_seen {
            let header: StoreHeader = serde_json::from_str(&line).map_err(parse_err)?;
            if header.d_h < 1 {
                return Err(Error::Format("header declares d_h = 0".into()));
            }
            store.d_h = header.d_h;
            header_seen = true;
            continue;
        }
        let rec: StoreRecord = serde_json::from_str(&line).map_err(parse_err)?;
        if rec.h.is_empty() {
            return Err(Error::Format(format!("record `{}` has no rows", rec.id)));
        }
        if let Some(bad) = rec.h.iter().find(|r| r.len() != store.d_h) {
            return Err(Error::Format(format!(
                "record `{}` (line {}) has a row of width {} but d_h = {}",
                rec.id,
                i + 1,
                bad.len(),
                store.d_h
            )));
        }
        if rec.h.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("record `{}` has non-finite entries", rec.id)));
        }
        let rows = rec.h.len();
        let flat: Vec<f64> = rec.h.into_iter().flatten().collect();
        let m = Array2::from_shape_vec((rows, store.d_h), flat).expect("validated shape");
        if store.entries.insert(rec.id.clone(), m).is_some() {
            return Err(Error::Integrity(format!("duplicate precomputed id `{}`", rec.id)));
        }
    }
    Ok(store)
}

impl PrecomputedStore {
    pub fn get(&self, id: &str) -> Result<ContextualFeatures> {
        self.entries
            .get(id)
            .cloned()
            .map(ContextualFeatures)
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }
}

/// Either back end behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    Builtin(BuiltinEncoder),
    Precomputed(PrecomputedStore),
}

impl Encoder {
    pub fn d_h(&self) -> usize {
        match self {
            Encoder::Builtin(b) => b.d_h(),
            Encoder::Precomputed(s) => s.d_h,
        }
    }

    pub fn encode(&self, sample: &TextSample) -> Result<ContextualFeatures> {
        match self {
            Encoder::Builtin(b) => {
                let ids = b.token_ids(&sample.tokens);
                if ids.is_empty() {
                    return Err(Error::Contract(format!("sample `{}` has no tokens", sample.id)));
                }
                Ok(b.encode_ids(&ids))
            }
            Encoder::Precomputed(s) => s.get(&sample.id),
        }
    }

    pub fn builtin(&self) -> Option<&BuiltinEncoder> {
        match self {
            Encoder::Builtin(b) => Some(b),
            Encoder::Precomputed(_) => None,
        }
    }

    pub fn builtin_mut(&mut self) -> Option<&mut BuiltinEncoder> {
        match self {
            Encoder::Builtin(b) => Some(b),
            Encoder::Precomputed(_) => None,
        }
    }

    /// SHA-256 over every stored value, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        match self {
            Encoder::Builtin(b) => {
                for v in b.embedding.iter() {
                    h.update(v.to_le_bytes());
                }
            }
            Encoder::Precomputed(s) => {
                for (id, m) in &s.entries {
                    h.update(id.as_bytes());
                    for v in m.iter() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, UNK};

    fn encoder() -> BuiltinEncoder {
        let vocab = build_vocab(&[vec!["a", "b", "c"]], 1).unwrap();
        let mut e = BuiltinEncoder::new(vocab, 8, 16, 3);
        e.warm();
        e
    }

    #[test]
    fn shared_rows_differ_by_positions_only() {
        let e = encoder();
        let h = e.encode_ids(&[UNK, UNK]);
        let p = positional_encoding(2, 8);
        for j in 0..8 {
            let lhs = h.0[[0, j]] - h.0[[1, j]];
            let rhs = p[[0, j]] - p[[1, j]];
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_contract_and_truncation() {
        let e = encoder();
        let toks: Vec<String> = (0..40).map(|i| ["a", "b", "zz"][i % 3].to_string()).collect();
        let s = TextSample {
            id: "x".into(),
            tokens: toks,
            label: None,
            domain: "D".into(),
            bpw: None,
        };
        let h = Encoder::Builtin(e).encode(&s).unwrap();
        assert_eq!((h.len(), h.d_h()), (16, 8));
    }

    #[test]
    fn permutation_changes_features() {
        let e = encoder();
        let ids = [4, 5, 6];
        let a = e.encode_ids(&ids);
        let b = e.encode_ids(&[5, 4, 6]);
        assert_ne!(a, b);
    }

    #[test]
    fn cold_and_warm_encoders_agree() {
        let mut e = encoder();
        let warm = e.encode_ids(&[4, 5]);
        e.positions = None;
        assert_eq!(e.encode_ids(&[4, 5]), warm);
    }

    #[test]
    fn precomputed_store_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feat.jsonl");
        let row8 = "[1,2,3,4,5,6,7,8]";
        std::fs::write(
            &p,
            format!("{{\"d_h\":8}}\n{{\"id\":\"a\",\"h\":[{row8},{row8}]}}\n{{\"id\":\"b\",\"h\":[{row8}]}}\n"),
        )
        .unwrap();
        let store = load_precomputed(&p).unwrap();
        assert_eq!(store.entries.len(), 2);
        let enc = Encoder::Precomputed(store.clone());
        let s = TextSample {
            id: "a".into(),
            tokens: vec!["q".into()],
            label: None,
            domain: "D".into(),
            bpw: None,
        };
        assert_eq!(enc.encode(&s).unwrap().0, store.entries["a"]);

        std::fs::write(
            &p,
            format!("{{\"d_h\":8}}\n{{\"id\":\"a\",\"h\":[{row8},[1,2,3,4,5,6,7]]}}\n"),
        )
        .unwrap();
        assert!(matches!(load_precomputed(&p), Err(Error::Format(_))));

        std::fs::write(
            &p,
            format!("{{\"d_h\":8}}\n{{\"id\":\"a\",\"h\":[{row8}]}}\n{{\"id\":\"a\",\"h\":[{row8}]}}\n"),
        )
        .unwrap();
        assert!(matches!(load_precomputed(&p), Err(Error::Integrity(_))));

        std::fs::write(&p, "").unwrap();
        let empty = Encoder::Precomputed(load_precomputed(&p).unwrap());
        assert!(matches!(empty.encode(&s), Err(Error::Lookup(_))));
    }

    #[test]
    fn config_rules() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.kind = EncoderKind::Precomputed;
        assert!(c.validate().is_err());
        c.freeze_policy = FreezePolicy::Always;
        assert!(c.validate().is_ok());
        c.d_h = 1;
        assert!(c.validate().is_err());
    }
}
