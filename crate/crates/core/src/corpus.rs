//! Text samples, tokenization, vocabularies and leak-free dataset splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const NUM_RESERVED: u32 = 4;

const RESERVED_SURFACE: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Cover,
    Stego,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Cover => 0,
            Label::Stego => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Cover
        } else {
            Label::Stego
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Cover => "cover",
            Label::Stego => "stego",
        }
    }
}

/// One text. `label` is `None` only for unlabeled target-domain pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSample {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: Option<Label>,
    pub domain: String,
    /// Embedding rate the stego text was generated with.
    pub bpw: Option<u8>,
}

impl TextSample {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Integrity(format!("sample `{}` has no tokens", self.id)));
        }
        match (self.label, self.bpw) {
            (Some(Label::Stego), Some(b)) if (1..=5).contains(&b) => Ok(()),
            (Some(Label::Stego), Some(b)) => Err(Error::Integrity(format!(
                "sample `{}` has bpw {b} outside 1..=5",
                self.id
            ))),
            (Some(Label::Stego), None) => Err(Error::Integrity(format!("stego sample `{}` is missing bpw", self.id))),
            (_, Some(_)) => Err(Error::Integrity(format!("non-stego sample `{}` carries bpw", self.id))),
            _ => Ok(()),
        }
    }

    /// Copy with label and generation metadata removed.
    pub fn unlabeled(&self) -> Self {
        TextSample {
            label: None,
            bpw: None,
            ..self.clone()
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Lowercases, splits on whitespace and detaches every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let mut out = Vec::new();
    let mut word = String::new();
    for c in lowered.chars() {
        if c.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if is_word_char(c) {
            word.push(c);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Bidirectional token/id map with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(NUM_RESERVED as usize)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            id_to_token,
            token_to_id,
        }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.id_to_token
    }
}

impl Vocab {
    /// Reserved-only vocabulary.
    pub fn reserved() -> Self {
        Vocab::from(RESERVED_SURFACE.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Ids are assigned by descending frequency, ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_freq: usize) -> Result<Vocab> {
    if min_freq < 1 {
        return Err(Error::invalid("min_freq must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            *freq.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = freq
        .into_iter()
        .filter(|&(t, n)| n >= min_freq && !RESERVED_SURFACE.contains(&t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut list: Vec<String> = RESERVED_SURFACE.iter().map(|s| s.to_string()).collect();
    list.extend(entries.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocab::from(list))
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(default)]
    label: Option<String>,
    domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bpw: Option<u8>,
}

fn parse_record(line: &str) -> std::result::Result<TextSample, String> {
    let rec: SampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let tokens = match (rec.tokens, rec.text) {
        (Some(tokens), _) => tokens,
        (None, Some(text)) => tokenize(&text),
        (None, None) => return Err("record needs `text` or `tokens`".into()),
    };
    let label = match rec.label.as_deref() {
        None => None,
        Some("cover") => Some(Label::Cover),
        Some("stego") => Some(Label::Stego),
        Some(other) => return Err(format!("unknown label `{other}`")),
    };
    Ok(TextSample {
        id: rec.id,
        tokens,
        label,
        domain: rec.domain,
        bpw: rec.bpw,
    })
}

/// Reads a JSONL sample file. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<TextSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_record(&line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        sample.validate()?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate id `{}` at line {}",
                sample.id,
                i + 1
            )));
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn write_corpus<'a>(path: impl AsRef<Path>, samples: impl IntoIterator<Item = &'a TextSample>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            text: Some(s.tokens.join(" ")),
            tokens: None,
            label: s.label.map(|l| l.as_str().to_string()),
            domain: s.domain.clone(),
            bpw: s.bpw,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-class split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

/// Cover/stego train, validation and test sets of one domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainDataset {
    pub domain: String,
    pub train_cover: Vec<TextSample>,
    pub train_stego: Vec<TextSample>,
    pub val_cover: Vec<TextSample>,
    pub val_stego: Vec<TextSample>,
    pub test_cover: Vec<TextSample>,
    pub test_stego: Vec<TextSample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    split: Split,
    role: Label,
}

impl DomainDataset {
    /// Labeled training samples (covers first, then stego).
    pub fn labeled_train(&self) -> Vec<TextSample> {
        self.train_cover.iter().chain(&self.train_stego).cloned().collect()
    }

    /// Training samples stripped of labels, for use as an adaptation target.
    pub fn unlabeled_train(&self) -> Vec<TextSample> {
        self.train_cover
            .iter()
            .chain(&self.train_stego)
            .map(TextSample::unlabeled)
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<TextSample> {
        let (c, s) = match split {
            Split::Train => (&self.train_cover, &self.train_stego),
            Split::Val => (&self.val_cover, &self.val_stego),
            Split::Test => (&self.test_cover, &self.test_stego),
        };
        c.iter().chain(s).cloned().collect()
    }

    /// Labeled source-train count.
    pub fn n_sr(&self) -> usize {
        self.train_cover.len() + self.train_stego.len()
    }

    /// Unlabeled target-train count.
    pub fn n_ta(&self) -> usize {
        self.n_sr()
    }

    fn parts(&self) -> [(Split, &Vec<TextSample>); 6] {
        [
            (Split::Train, &self.train_cover),
            (Split::Train, &self.train_stego),
            (Split::Val, &self.val_cover),
            (Split::Val, &self.val_stego),
            (Split::Test, &self.test_cover),
            (Split::Test, &self.test_stego),
        ]
    }

    /// Checks split disjointness and class balance of val/test.
    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&str, Split> = HashMap::new();
        for (split, samples) in self.parts() {
            for s in samples.iter() {
                if let Some(prev) = owner.insert(&s.id, split) {
                    return Err(Error::Integrity(format!(
                        "id `{}` appears in both {} and {}",
                        s.id,
                        prev.as_str(),
                        split.as_str()
                    )));
                }
            }
        }
        if self.val_cover.len() != self.val_stego.len() || self.test_cover.len() != self.test_stego.len() {
            return Err(Error::Integrity(
                "validation and test splits must be class balanced".into(),
            ));
        }
        Ok(())
    }

    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and the `splits.jsonl`
    /// audit manifest.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            write_corpus(dir.join(format!("{}.jsonl", split.as_str())), &self.split(split))?;
        }
        let path = dir.join("splits.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for (split, samples) in self.parts() {
            for s in samples.iter() {
                let role = s.label.unwrap_or(Label::Cover);
                serde_json::to_writer(
                    &mut w,
                    &ManifestRecord {
                        id: s.id.clone(),
                        split,
                        role,
                    },
                )?;
                w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut ds = DomainDataset {
            domain: String::new(),
            train_cover: vec![],
            train_stego: vec![],
            val_cover: vec![],
            val_stego: vec![],
            test_cover: vec![],
            test_stego: vec![],
        };
        for split in Split::ALL {
            let samples = load_corpus(dir.join(format!("{}.jsonl", split.as_str())))?;
            for s in samples {
                if ds.domain.is_empty() {
                    ds.domain = s.domain.clone();
                }
                let label = s
                    .label
                    .ok_or_else(|| Error::Integrity(format!("dataset sample `{}` is unlabeled", s.id)))?;
                let bucket = match (split, label) {
                    (Split::Train, Label::Cover) => &mut ds.train_cover,
                    (Split::Train, Label::Stego) => &mut ds.train_stego,
                    (Split::Val, Label::Cover) => &mut ds.val_cover,
                    (Split::Val, Label::Stego) => &mut ds.val_stego,
                    (Split::Test, Label::Cover) => &mut ds.test_cover,
                    (Split::Test, Label::Stego) => &mut ds.test_stego,
                };
                bucket.push(s);
            }
        }
        ds.validate()?;
        Ok(ds)
    }
}

/// Shuffles both pools by `seed` and carves train/val/test slices per class.
pub fn make_splits(
    domain: &str,
    cover_pool: &[TextSample],
    stego_pool: &[TextSample],
    sizes: SplitSizes,
    seed: u64,
) -> Result<DomainDataset> {
    let need = sizes.total();
    for (name, pool) in [("cover", cover_pool), ("stego", stego_pool)] {
        if pool.len() < need {
            return Err(Error::Capacity(format!(
                "{name} pool has {} samples but {need} are required (short by {})",
                pool.len(),
                need - pool.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut carve = |pool: &[TextSample]| {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        let take = |r: std::ops::Range<usize>| -> Vec<TextSample> { idx[r].iter().map(|&i| pool[i].clone()).collect() };
        let a = sizes.train;
        let b = a + sizes.val;
        (take(0..a), take(a..b), take(b..b + sizes.test))
    };
    let (train_cover, val_cover, test_cover) = carve(cover_pool);
    let (train_stego, val_stego, test_stego) = carve(stego_pool);
    let ds = DomainDataset {
        domain: domain.to_string(),
        train_cover,
        train_stego,
        val_cover,
        val_stego,
        test_cover,
        test_stego,
    };
    ds.validate()?;
    Ok(ds)
}

/// Token frequency table, ordered for reproducible iteration.
pub fn unigram_counts<'a>(docs: impl IntoIterator<Item = &'a [String]>) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for d in docs {
        for t in d {
            *m.entry(t.as_str()).or_default() += 1;
        }
    }
    m
}
