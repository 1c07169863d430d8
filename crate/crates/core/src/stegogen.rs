//! Synthetic cover/stego text generation.
//!
//! A smoothed order-k Markov model supplies next-token distributions. Cover
//! texts are ancestral samples. Stego texts hide payload bits in the choice
//! among the top `2^bpw` candidates of each step, either as a fixed-length
//! index (FLC) or through a Huffman code built over the candidates'
//! probabilities (VLC).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_vocab, load_corpus, make_splits, tokenize, DomainDataset, Label, SplitSizes, TextSample, Vocab, BOS, EOS,
    NUM_RESERVED,
};
use crate::error::{Error, Result};
use crate::rng::mix_seed;

#[derive(Clone, Debug)]
struct ContextCounts {
    total: u64,
    /// Continuations by count descending, id ascending.
    ranked: Vec<(u32, u64)>,
    /// Continuation ids, ascending, for membership tests.
    ids: Vec<u32>,
}

/// Order-k Markov language model with additive smoothing over the emittable
/// support (every regular token plus EOS).
#[derive(Clone, Debug)]
pub struct MarkovLm {
    order: usize,
    alpha: f64,
    vocab: Vocab,
    contexts: HashMap<Vec<u32>, ContextCounts>,
}

/// Fits the model on tokenized documents; each document is padded with
/// `order` BOS tokens and terminated by EOS.
pub fn fit_lm<S: AsRef<str>>(corpus: &[Vec<S>], order: usize, alpha: f64) -> Result<MarkovLm> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot fit a language model on an empty corpus"));
    }
    if order < 1 {
        return Err(Error::invalid("model order must be at least 1"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid("smoothing constant must be finite and non-negative"));
    }
    let vocab = build_vocab(corpus, 1)?;
    let mut raw: HashMap<Vec<u32>, HashMap<u32, u64>> = HashMap::new();
    for doc in corpus {
        let mut seq = vec![BOS; order];
        seq.extend(doc.iter().map(|t| vocab.id(t.as_ref())));
        seq.push(EOS);
        for w in seq.windows(order + 1) {
            for k in 0..=order {
                *raw.entry(w[order - k..order].to_vec())
                    .or_default()
                    .entry(w[order])
                    .or_default() += 1;
            }
        }
    }
    let contexts = raw
        .into_iter()
        .map(|(ctx, next)| {
            let mut ranked: Vec<(u32, u64)> = next.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let total = ranked.iter().map(|e| e.1).sum();
            let mut ids: Vec<u32> = ranked.iter().map(|e| e.0).collect();
            ids.sort_unstable();
            (ctx, ContextCounts { total, ranked, ids })
        })
        .collect();
    Ok(MarkovLm {
        order,
        alpha,
        vocab,
        contexts,
    })
}

/// Candidates of one embedding step, most probable first.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    pub tokens: Vec<u32>,
    /// Unnormalized probabilities (count + alpha), aligned with `tokens`.
    pub weights: Vec<f64>,
    /// Bits this step can carry: `tokens.len() == 1 << bits`.
    pub bits: u32,
}

impl MarkovLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Number of tokens with possibly non-zero probability (regular tokens + EOS).
    fn support_size(&self) -> usize {
        self.vocab.len() - NUM_RESERVED as usize + 1
    }

    /// Longest observed suffix of `ctx`; the empty (unigram) context is
    /// always observed.
    fn context<'a>(&'a self, ctx: &[u32]) -> Option<&'a ContextCounts> {
        (0..=ctx.len())
            .rev()
            .find_map(|k| self.contexts.get(&ctx[ctx.len() - k..]).filter(|c| c.total > 0))
    }

    /// Length of the suffix of `ctx` that [`MarkovLm::prob`] conditions on.
    pub fn backoff_order(&self, ctx: &[u32]) -> usize {
        (0..=ctx.len())
            .rev()
            .find(|&k| self.contexts.get(&ctx[ctx.len() - k..]).is_some_and(|c| c.total > 0))
            .unwrap_or(0)
    }

    /// Raw count of `next` after exactly `ctx`.
    pub fn count(&self, ctx: &[u32], next: u32) -> u64 {
        self.contexts
            .get(ctx)
            .and_then(|c| c.ranked.iter().find(|e| e.0 == next))
            .map_or(0, |e| e.1)
    }

    /// `p(next | ctx)`, smoothed over the longest observed suffix of `ctx`.
    pub fn prob(&self, ctx: &[u32], next: u32) -> f64 {
        if next < NUM_RESERVED && next != EOS {
            return 0.0;
        }
        let support = self.support_size() as f64;
        match self.context(ctx) {
            Some(c) => {
                let n = c.ranked.iter().find(|e| e.0 == next).map_or(0, |e| e.1) as f64;
                (n + self.alpha) / (c.total as f64 + self.alpha * support)
            }
            None => 1.0 / support,
        }
    }

    fn initial_context(&self) -> Vec<u32> {
        vec![BOS; self.order]
    }

    fn push_context(ctx: &mut [u32], tok: u32) {
        ctx.rotate_left(1);
        *ctx.last_mut().unwrap() = tok;
    }

    /// Maps an index into the emittable support (EOS first, then regular ids).
    fn support_token(j: usize) -> u32 {
        if j == 0 {
            EOS
        } else {
            NUM_RESERVED + j as u32 - 1
        }
    }

    /// Draws one token from the full smoothed distribution.
    pub fn sample_next<R: Rng>(&self, ctx: &[u32], rng: &mut R) -> u32 {
        let support = self.support_size();
        let uniform = |rng: &mut R| Self::support_token(rng.gen_range(0..support));
        let Some(c) = self.context(ctx) else {
            return uniform(rng);
        };
        let z = c.total as f64 + self.alpha * support as f64;
        let r = rng.gen::<f64>() * z;
        if r < c.total as f64 {
            let mut acc = 0.0;
            for &(tok, n) in &c.ranked {
                acc += n as f64;
                if r < acc {
                    return tok;
                }
            }
            return c.ranked.last().unwrap().0;
        }
        let j = ((r - c.total as f64) / self.alpha) as usize;
        Self::support_token(j.min(support - 1))
    }

    /// Top candidates of a step, excluding EOS and reserved ids, trimmed to
    /// the largest power of two not exceeding `2^bpw` or the available pool.
    pub fn candidate_pool(&self, ctx: &[u32], bpw: u32) -> Option<CandidatePool> {
        let regular = self.vocab.len() - NUM_RESERVED as usize;
        let ctx_counts = self.context(ctx);
        let smooth = self.alpha > 0.0 || ctx_counts.is_none();
        let available = match ctx_counts {
            Some(c) if !smooth => c.ranked.iter().filter(|e| e.0 != EOS).count(),
            _ => regular,
        };
        if available == 0 {
            return None;
        }
        let bits = bpw.min(usize::BITS - 1 - available.leading_zeros());
        let want = 1usize << bits;
        let mut tokens = Vec::with_capacity(want);
        let mut weights = Vec::with_capacity(want);
        if let Some(c) = ctx_counts {
            for &(tok, n) in c.ranked.iter().filter(|e| e.0 != EOS).take(want) {
                tokens.push(tok);
                weights.push(n as f64 + self.alpha);
            }
        }
        if tokens.len() < want {
            let unseen_weight = if ctx_counts.is_some() { self.alpha } else { 1.0 };
            let seen = ctx_counts.map(|c| c.ids.as_slice()).unwrap_or(&[]);
            let mut id = NUM_RESERVED;
            while tokens.len() < want {
                if seen.binary_search(&id).is_err() {
                    tokens.push(id);
                    weights.push(unseen_weight);
                }
                id += 1;
            }
        }
        Some(CandidatePool { tokens, weights, bits })
    }
}

/// Ancestral sampling from the BOS context until EOS or `max_len` tokens.
pub fn sample_cover(lm: &MarkovLm, max_len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_cover_with(lm, max_len, &mut rng)
}

fn sample_cover_with<R: Rng>(lm: &MarkovLm, max_len: usize, rng: &mut R) -> Vec<u32> {
    let mut ctx = lm.initial_context();
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = lm.sample_next(&ctx, rng);
        if t == EOS {
            break;
        }
        out.push(t);
        MarkovLm::push_context(&mut ctx, t);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coding {
    Flc,
    Vlc,
}

impl Coding {
    pub fn as_str(self) -> &'static str {
        match self {
            Coding::Flc => "flc",
            Coding::Vlc => "vlc",
        }
    }
}

/// Output of an embedding run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Embedding {
    pub tokens: Vec<u32>,
    pub bits_consumed: usize,
    /// Tokens chosen by the coder rather than by plain sampling.
    pub embedding_steps: usize,
    /// Steps whose candidate pool was smaller than `2^bpw`.
    pub degraded_steps: Vec<usize>,
}

/// Huffman codes for a candidate pool, aligned with its order.
///
/// Construction repeatedly merges the two lowest nodes under the order
/// (weight, smallest contained pool index). Of the merged pair, the node
/// ranked higher in the candidate order (larger weight, or the smaller index
/// on a tie) becomes the 0-branch, so the most probable candidate of a
/// two-element pool is coded `0` exactly as with FLC.
pub fn huffman_codes(weights: &[f64]) -> Vec<Vec<bool>> {
    let n = weights.len();
    let mut codes = vec![Vec::new(); n];
    if n <= 1 {
        return codes;
    }
    // (weight, min index, members)
    let mut nodes: Vec<(f64, usize, Vec<usize>)> = weights.iter().enumerate().map(|(i, &w)| (w, i, vec![i])).collect();
    let key = |a: &(f64, usize, Vec<usize>), b: &(f64, usize, Vec<usize>)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    while nodes.len() > 1 {
        let first = (0..nodes.len()).min_by(|&a, &b| key(&nodes[a], &nodes[b])).unwrap();
        let x = nodes.swap_remove(first);
        let second = (0..nodes.len()).min_by(|&a, &b| key(&nodes[a], &nodes[b])).unwrap();
        let y = nodes.swap_remove(second);
        let (zero, one) = if x.0 == y.0 { (x, y) } else { (y, x) };
        // Codes are built leaf-to-root, so prepend by pushing and reversing later.
        for &m in &zero.2 {
            codes[m].push(false);
        }
        for &m in &one.2 {
            codes[m].push(true);
        }
        let mut members = zero.2;
        members.extend(one.2);
        nodes.push((zero.0 + one.0, zero.1.min(one.1), members));
    }
    for c in &mut codes {
        c.reverse();
    }
    codes
}

fn bits_of_index(index: usize, width: u32) -> Vec<bool> {
    (0..width).rev().map(|k| (index >> k) & 1 == 1).collect()
}

fn check_bpw(bpw: u32) -> Result<()> {
    if (1..=5).contains(&bpw) {
        Ok(())
    } else {
        Err(Error::invalid(format!("bpw must be in 1..=5, got {bpw}")))
    }
}

fn choose(coding: Coding, pool: &CandidatePool, upcoming: &[bool]) -> (usize, usize) {
    // Missing trailing bits are read as zeros.
    let bit = |k: usize| upcoming.get(k).copied().unwrap_or(false);
    match coding {
        Coding::Flc => {
            let idx = (0..pool.bits as usize).fold(0usize, |acc, k| (acc << 1) | bit(k) as usize);
            (idx, pool.bits as usize)
        }
        Coding::Vlc => {
            let codes = huffman_codes(&pool.weights);
            let idx = codes
                .iter()
                .position(|c| c.iter().enumerate().all(|(k, &b)| bit(k) == b))
                .expect("huffman code is complete");
            (idx, codes[idx].len())
        }
    }
}

fn code_for(coding: Coding, pool: &CandidatePool, idx: usize) -> Vec<bool> {
    match coding {
        Coding::Flc => bits_of_index(idx, pool.bits),
        Coding::Vlc => huffman_codes(&pool.weights).swap_remove(idx),
    }
}

/// Hides `payload` in generated text; once the payload is exhausted the
/// text continues by plain sampling until EOS or `max_len`.
pub fn embed(
    lm: &MarkovLm,
    coding: Coding,
    payload: &[bool],
    bpw: u32,
    max_len: usize,
    seed: u64,
) -> Result<Embedding> {
    check_bpw(bpw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = lm.initial_context();
    let mut out = Embedding {
        tokens: Vec::new(),
        bits_consumed: 0,
        embedding_steps: 0,
        degraded_steps: Vec::new(),
    };
    while out.tokens.len() < max_len {
        let tok = if out.bits_consumed < payload.len() {
            let Some(pool) = lm.candidate_pool(&ctx, bpw) else {
                break;
            };
            if pool.bits < bpw {
                out.degraded_steps.push(out.tokens.len());
            }
            let (idx, len) = choose(coding, &pool, &payload[out.bits_consumed..]);
            out.bits_consumed = (out.bits_consumed + len).min(payload.len());
            out.embedding_steps += 1;
            pool.tokens[idx]
        } else {
            let t = lm.sample_next(&ctx, &mut rng);
            if t == EOS {
                break;
            }
            t
        };
        out.tokens.push(tok);
        MarkovLm::push_context(&mut ctx, tok);
    }
    Ok(out)
}

pub fn embed_flc(lm: &MarkovLm, payload: &[bool], bpw: u32, max_len: usize, seed: u64) -> Result<Embedding> {
    embed(lm, Coding::Flc, payload, bpw, max_len, seed)
}

pub fn embed_vlc(lm: &MarkovLm, payload: &[bool], bpw: u32, max_len: usize, seed: u64) -> Result<Embedding> {
    embed(lm, Coding::Vlc, payload, bpw, max_len, seed)
}

/// Replays candidate construction over `tokens` and inverts the coding.
pub fn extract_bits(lm: &MarkovLm, tokens: &[u32], coding: Coding, bpw: u32, payload_len: usize) -> Result<Vec<bool>> {
    check_bpw(bpw)?;
    let mut ctx = lm.initial_context();
    let mut bits = Vec::with_capacity(payload_len);
    for (step, &tok) in tokens.iter().enumerate() {
        if bits.len() >= payload_len {
            break;
        }
        let pool = lm.candidate_pool(&ctx, bpw).ok_or_else(|| Error::Desync {
            step,
            message: "no candidates in this context".into(),
        })?;
        let idx = pool
            .tokens
            .iter()
            .position(|&t| t == tok)
            .ok_or_else(|| Error::Desync {
                step,
                message: format!("token {tok} is not among the {} candidates", pool.tokens.len()),
            })?;
        let code = code_for(coding, &pool, idx);
        let take = code.len().min(payload_len - bits.len());
        bits.extend_from_slice(&code[..take]);
        MarkovLm::push_context(&mut ctx, tok);
    }
    if bits.len() < payload_len {
        return Err(Error::Desync {
            step: tokens.len(),
            message: format!("text ended after {} of {payload_len} bits", bits.len()),
        });
    }
    Ok(bits)
}

/// Settings for building one domain's cover/stego dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub lm_order: usize,
    pub alpha: f64,
    pub bpw: u32,
    pub coding: Coding,
    pub max_len: usize,
    /// Payload bits per stego text; `None` means `16 * bpw`.
    pub payload_len: Option<usize>,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            lm_order: 2,
            alpha: 0.5,
            bpw: 1,
            coding: Coding::Flc,
            max_len: 64,
            payload_len: None,
            sizes: SplitSizes::default(),
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn resolved_payload_len(&self) -> usize {
        self.payload_len.unwrap_or(16 * self.bpw as usize)
    }
}

/// Generation metadata written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub lm_order: usize,
    pub alpha: f64,
    pub bpw: u32,
    pub coding: Coding,
    pub seed: u64,
    pub payload_len: usize,
}

/// Reads a corpus: JSONL sample files use their `text`/`tokens`; any other
/// file is read as plain text, one document per non-empty line.
pub fn read_corpus_documents(path: impl AsRef<Path>) -> Result<Vec<Vec<String>>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(load_corpus(path)?.into_iter().map(|s| s.tokens).collect());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let toks = tokenize(&line);
        if !toks.is_empty() {
            docs.push(toks);
        }
    }
    Ok(docs)
}

const COVER_STREAM: u64 = 1;
const STEGO_STREAM: u64 = 2;
const PAYLOAD_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 4;
const MAX_ATTEMPTS: u64 = 64;

/// Generates covers and stego texts from an already fitted model and splits them.
pub fn generate_domain_dataset(lm: &MarkovLm, domain: &str, cfg: &GenerationConfig) -> Result<DomainDataset> {
    check_bpw(cfg.bpw)?;
    let n = cfg.sizes.total();
    let payload_len = cfg.resolved_payload_len();
    let cover_base = mix_seed(cfg.seed, COVER_STREAM);
    let stego_base = mix_seed(cfg.seed, STEGO_STREAM);
    let payload_base = mix_seed(cfg.seed, PAYLOAD_STREAM);
    let surface = |ids: &[u32]| lm.vocab().decode(ids);

    let mut covers = Vec::with_capacity(n);
    for i in 0..n {
        let toks = (0..MAX_ATTEMPTS)
            .map(|a| sample_cover(lm, cfg.max_len, cover_base ^ (i as u64) ^ (a << 48)))
            .find(|t| !t.is_empty())
            .ok_or_else(|| Error::Capacity(format!("model keeps producing empty covers ({domain})")))?;
        covers.push(TextSample {
            id: format!("{domain}-cover-{i:05}"),
            tokens: surface(&toks),
            label: Some(Label::Cover),
            domain: domain.to_string(),
            bpw: None,
        });
    }

    let mut stegos = Vec::with_capacity(n);
    for i in 0..n {
        let mut prng = ChaCha8Rng::seed_from_u64(payload_base ^ i as u64);
        let payload: Vec<bool> = (0..payload_len).map(|_| prng.gen()).collect();
        let emb = embed(lm, cfg.coding, &payload, cfg.bpw, cfg.max_len, stego_base ^ i as u64)?;
        if emb.tokens.is_empty() {
            return Err(Error::Capacity(format!("empty stego text for sample {i} ({domain})")));
        }
        stegos.push(TextSample {
            id: format!("{domain}-stego-{i:05}"),
            tokens: surface(&emb.tokens),
            label: Some(Label::Stego),
            domain: domain.to_string(),
            bpw: Some(cfg.bpw as u8),
        });
    }
    make_splits(domain, &covers, &stegos, cfg.sizes, mix_seed(cfg.seed, SPLIT_STREAM))
}

/// Fits a model on `corpus_path` and generates the domain's dataset.
pub fn build_domain_dataset(
    corpus_path: impl AsRef<Path>,
    domain: &str,
    cfg: &GenerationConfig,
) -> Result<(DomainDataset, GenerationManifest)> {
    let docs = read_corpus_documents(corpus_path)?;
    let lm = fit_lm(&docs, cfg.lm_order, cfg.alpha)?;
    let ds = generate_domain_dataset(&lm, domain, cfg)?;
    let manifest = GenerationManifest {
        lm_order: cfg.lm_order,
        alpha: cfg.alpha,
        bpw: cfg.bpw,
        coding: cfg.coding,
        seed: cfg.seed,
        payload_len: cfg.resolved_payload_len(),
    };
    Ok((ds, manifest))
}
