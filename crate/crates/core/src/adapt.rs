//! Source pretraining and pseudo-label self-training on the target domain.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TextSample};
use crate::encoder::{ContextualFeatures, Encoder, FreezePolicy};
use crate::error::{Error, Result};
use crate::head::{backward_into, forward, loss_ce, ForwardOptions, Mode};
use crate::metrics::{compute_metrics, Metrics};
use crate::model::{argmax, EmbeddingGrad, Model, OptimizerState};
use crate::optim::{adam_step, AdamConfig, AdamState, Parameters};
use crate::rng::derive_seed;

const PRETRAIN_STREAM: u64 = 0x5052;
const FINETUNE_STREAM: u64 = 0x4654;
const ORDER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Acc,
    F1,
}

impl SelectionMetric {
    pub fn score(self, m: &Metrics) -> f64 {
        match self {
            SelectionMetric::Acc => m.acc,
            SelectionMetric::F1 => m.f1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate of the self-training stage; `None` reuses `lr`.
    pub finetune_lr: Option<f64>,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            finetune_lr: None,
            batch_size: 16,
            pretrain_epochs: 50,
            seed: 0,
            selection_metric: SelectionMetric::Acc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        let lr_ok = |lr: f64| lr.is_finite() && lr > 0.0;
        if !lr_ok(self.lr) || !self.finetune_lr.is_none_or(lr_ok) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    /// Expansion factor.
    pub p: f64,
    /// Self-training rounds; 0 skips the stage.
    pub rounds: usize,
    /// Re-estimate pseudo-labels every round instead of keeping the first round's.
    pub reestimate: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            p: 0.1,
            rounds: 10,
            reestimate: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::invalid(format!(
                "expansion factor p = {} must lie in (0, 1)",
                self.p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub p: f64,
    pub v: usize,
    pub rounds: usize,
    pub m: Vec<usize>,
}

fn ceil_guarded(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// `m_t = min(N_ta, m_{t-1} + ceil(p * N_ta))`, `m_0 = 0`.
pub fn schedule_sizes(p: f64, n_ta: usize, rounds: usize) -> Result<Schedule> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("expansion factor p = {p} must lie in (0, 1)")));
    }
    if rounds < 1 {
        return Err(Error::invalid("schedule needs at least one round"));
    }
    let inc = ceil_guarded(p * n_ta as f64);
    let mut m = Vec::with_capacity(rounds);
    let mut cur = 0usize;
    for _ in 0..rounds {
        cur = (cur + inc).min(n_ta);
        m.push(cur);
    }
    Ok(Schedule { p, v: n_ta, rounds, m })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    /// Position of the sample in the estimated collection.
    pub index: usize,
    pub id: String,
    pub label: Label,
    /// Largest class probability.
    pub confidence: f64,
    /// `|logit_stego - logit_cover|`; orders entries like `confidence` but
    /// does not saturate when probabilities round to 1.
    pub margin: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoPool {
    pub entries: Vec<PseudoEntry>,
}

impl PseudoPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Pseudo-label entry from class logits; ties go to cover.
pub fn pseudo_entry(index: usize, id: &str, logits: [f64; 2], pred: [f64; 2]) -> PseudoEntry {
    let label = argmax(pred);
    PseudoEntry {
        index,
        id: id.to_string(),
        label,
        confidence: pred[label.index()],
        margin: (logits[1] - logits[0]).abs(),
    }
}

pub fn estimate_pseudo_labels(model: &Model, samples: &[TextSample]) -> Result<PseudoPool> {
    let entries = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = model.trace_features(&model.features(s)?)?;
            Ok(pseudo_entry(i, &s.id, t.logits, t.pred))
        })
        .collect::<Result<_>>()?;
    Ok(PseudoPool { entries })
}

fn estimate_cached(model: &Model, ids: &[&str], feats: &[ContextualFeatures]) -> Result<PseudoPool> {
    let entries = feats
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let t = model.trace_features(h)?;
            Ok(pseudo_entry(i, ids[i], t.logits, t.pred))
        })
        .collect::<Result<_>>()?;
    Ok(PseudoPool { entries })
}

/// Top `m` entries by confidence (descending, compared through the logit
/// margin), ties by id (ascending).
pub fn select_candidates(pool: &PseudoPool, m: usize) -> Vec<PseudoEntry> {
    let m = if m > pool.len() {
        log::warn!("requested {m} pseudo-labels from a pool of {}; clipping", pool.len());
        pool.len()
    } else {
        m
    };
    let mut sorted: Vec<&PseudoEntry> = pool.entries.iter().collect();
    sorted.sort_by(|a, b| b.margin.total_cmp(&a.margin).then_with(|| a.id.cmp(&b.id)));
    sorted.into_iter().take(m).cloned().collect()
}

pub fn evaluate(model: &Model, samples: &[TextSample]) -> Result<Metrics> {
    let mut preds = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let y = s
            .label
            .ok_or_else(|| Error::Contract(format!("evaluation sample `{}` has no label", s.id)))?;
        preds.push(model.classify(s)?);
        labels.push(y);
    }
    compute_metrics(&preds, &labels)
}

fn evaluate_cached(model: &Model, feats: &[ContextualFeatures], labels: &[Label]) -> Result<Metrics> {
    let preds = feats
        .iter()
        .map(|h| Ok(argmax(model.predict_features(h)?)))
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(&preds, labels)
}

fn labels_of(samples: &[TextSample], what: &str) -> Result<Vec<Label>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Contract(format!("{what} sample `{}` has no label", s.id)))
        })
        .collect()
}

/// Encoder output for every sample under a frozen encoder.
pub fn encode_all(encoder: &Encoder, samples: &[TextSample]) -> Result<Vec<ContextualFeatures>> {
    samples.iter().map(|s| encoder.encode(s)).collect()
}

/// Inputs of one training epoch.
enum Inputs<'a> {
    /// Token ids re-encoded at every step so embedding updates take effect.
    Trainable(&'a [Vec<u32>]),
    Frozen(&'a [ContextualFeatures]),
}

struct EpochSpec<'a> {
    batch_size: usize,
    adam: AdamConfig,
    order_seed: u64,
    dropout_seed: u64,
    keep_prob: f64,
    inputs: Inputs<'a>,
}

/// One shuffled pass of mini-batch Adam; returns the mean training loss.
fn train_epoch(
    model: &mut Model,
    items: &[(usize, Label)],
    spec: &EpochSpec<'_>,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.order_seed));
    let mut head_grad = model.head.zeros_like();
    let mut emb_grad = match (&spec.inputs, model.encoder.builtin()) {
        (Inputs::Trainable(_), Some(b)) => Some(EmbeddingGrad::zeros_for(b)),
        (Inputs::Trainable(_), None) => {
            return Err(Error::Contract("only the builtin encoder can be trained".into()));
        }
        _ => None,
    };
    if emb_grad.is_some() && opt.encoder.is_none() {
        opt.encoder = Some(AdamState::default());
    }
    let mut total_loss = 0.0;
    for (b, batch) in order.chunks(spec.batch_size).enumerate() {
        head_grad.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        if let Some(g) = &mut emb_grad {
            g.clear();
        }
        let scale = 1.0 / batch.len() as f64;
        for (k, &pos) in batch.iter().enumerate() {
            let (idx, label) = items[pos];
            let opts = ForwardOptions {
                mode: Mode::Train,
                gate: model.gate,
                keep_prob: spec.keep_prob,
                dropout_seed: derive_seed(spec.dropout_seed, &[b as u64, k as u64]),
            };
            let encoded;
            let h = match &spec.inputs {
                Inputs::Trainable(ids) => {
                    encoded = model.encoder.builtin().expect("checked above").encode_ids(&ids[idx]);
                    &encoded
                }
                Inputs::Frozen(feats) => &feats[idx],
            };
            let trace = forward(h, &model.head, &opts)?;
            total_loss += loss_ce(trace.pred, label);
            let dh = backward_into(&trace, &model.head, label, scale, &mut head_grad)?;
            if let (Some(g), Inputs::Trainable(ids)) = (&mut emb_grad, &spec.inputs) {
                g.accumulate(&ids[idx], &dh)?;
            }
        }
        adam_step(&mut model.head, &head_grad, &mut opt.head, &spec.adam);
        if let Some(g) = &emb_grad {
            let enc = model.encoder.builtin_mut().expect("checked above");
            adam_step(enc, g, opt.encoder.as_mut().expect("initialized above"), &spec.adam);
        }
        if !model.head.is_finite() {
            return Err(Error::Numeric("optimizer"));
        }
    }
    Ok(total_loss / items.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    /// 1-based epoch of the returned model; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    pub log: Vec<EpochLog>,
}

/// Supervised training on labeled source data, keeping the epoch with the
/// best validation score (earliest on ties).
pub fn pretrain(
    model: Model,
    train: &[TextSample],
    val: &[TextSample],
    cfg: &TrainConfig,
    freeze: FreezePolicy,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let labels = labels_of(train, "source-train")?;
    let val_labels = labels_of(val, "source-validation")?;
    if cfg.pretrain_epochs == 0 {
        return Ok(PretrainOutcome {
            model,
            optimizer: OptimizerState::default(),
            best_epoch: None,
            best_val: None,
            log: Vec::new(),
        });
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("pretraining needs non-empty train and validation sets"));
    }
    let train_encoder = freeze == FreezePolicy::AfterPretrain && model.encoder.builtin().is_some();
    let ids: Vec<Vec<u32>>;
    let feats: Vec<ContextualFeatures>;
    let inputs = if train_encoder {
        let b = model.encoder.builtin().expect("checked");
        ids = train.iter().map(|s| b.token_ids(&s.tokens)).collect();
        if let Some(s) = ids.iter().position(|v| v.is_empty()) {
            return Err(Error::Contract(format!("sample `{}` has no tokens", train[s].id)));
        }
        Inputs::Trainable(&ids)
    } else {
        feats = encode_all(&model.encoder, train)?;
        Inputs::Frozen(&feats)
    };
    let val_feats = if train_encoder {
        None
    } else {
        Some(encode_all(&model.encoder, val)?)
    };
    let items: Vec<(usize, Label)> = labels.iter().copied().enumerate().collect();

    let mut model = model;
    let mut opt = OptimizerState::default();
    let mut spec = EpochSpec {
        batch_size: cfg.batch_size,
        adam: cfg.adam(cfg.lr),
        order_seed: 0,
        dropout_seed: 0,
        keep_prob: model.keep_prob,
        inputs,
    };
    let mut best: Option<(f64, usize, Model, OptimizerState, Metrics)> = None;
    let mut log = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 1..=cfg.pretrain_epochs {
        spec.order_seed = derive_seed(cfg.seed, &[PRETRAIN_STREAM, ORDER_STREAM, epoch as u64]);
        spec.dropout_seed = derive_seed(cfg.seed, &[PRETRAIN_STREAM, DROPOUT_STREAM, epoch as u64]);
        let train_loss = train_epoch(&mut model, &items, &spec, &mut opt)?;
        let m = match &val_feats {
            Some(f) => evaluate_cached(&model, f, &val_labels)?,
            None => evaluate(&model, val)?,
        };
        log::info!("pretrain epoch {epoch}: loss {train_loss:.4} val acc {:.4}", m.acc);
        log.push(EpochLog {
            epoch,
            train_loss,
            val_acc: m.acc,
            val_f1: m.f1,
        });
        let score = cfg.selection_metric.score(&m);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.clone(), opt.clone(), m));
        }
    }
    let (_, epoch, model, optimizer, m) = best.expect("at least one epoch ran");
    Ok(PretrainOutcome {
        model,
        optimizer,
        best_epoch: Some(epoch),
        best_val: Some(m),
        log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub m_t: usize,
    /// Mean confidence of the selected pseudo-labels.
    pub mean_confidence: f64,
    /// Fraction of pool labels that changed since the previous round.
    pub churn: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    /// 1-based round of the returned model; `None` when no round ran.
    pub best_round: Option<usize>,
    pub best_val: Option<Metrics>,
    pub log: Vec<RoundLog>,
}

/// Progressive pseudo-label self-training with a frozen encoder. The
/// target samples' labels, if any, are ignored; `val` labels are used only
/// to pick the returned round.
pub fn finetune(
    model: Model,
    target: &[TextSample],
    val: &[TextSample],
    train: &TrainConfig,
    schedule: &ScheduleConfig,
) -> Result<FinetuneOutcome> {
    train.validate()?;
    if schedule.rounds == 0 {
        return Ok(FinetuneOutcome {
            model,
            optimizer: OptimizerState::default(),
            best_round: None,
            best_val: None,
            log: Vec::new(),
        });
    }
    schedule.validate()?;
    if target.is_empty() {
        return Err(Error::invalid("self-training needs unlabeled target samples"));
    }
    if val.is_empty() {
        return Err(Error::invalid("self-training needs a target validation set"));
    }
    let val_labels = labels_of(val, "target-validation")?;
    let sched = schedule_sizes(schedule.p, target.len(), schedule.rounds)?;
    let feats = encode_all(&model.encoder, target)?;
    let val_feats = encode_all(&model.encoder, val)?;
    let ids: Vec<&str> = target.iter().map(|s| s.id.as_str()).collect();

    let mut model = model;
    let mut opt = OptimizerState::default();
    let mut spec = EpochSpec {
        batch_size: train.batch_size,
        adam: train.adam(train.finetune_lr.unwrap_or(train.lr)),
        order_seed: 0,
        dropout_seed: 0,
        keep_prob: model.keep_prob,
        inputs: Inputs::Frozen(&feats),
    };
    let mut prev: Option<HashMap<usize, Label>> = None;
    let mut frozen_pool: Option<PseudoPool> = None;
    let mut best: Option<(f64, usize, Model, OptimizerState, Metrics)> = None;
    let mut log = Vec::with_capacity(schedule.rounds);
    for (r, &m_t) in sched.m.iter().enumerate() {
        let round = r + 1;
        let pool = match &frozen_pool {
            Some(p) if !schedule.reestimate => p.clone(),
            _ => estimate_cached(&model, &ids, &feats)?,
        };
        if !schedule.reestimate && frozen_pool.is_none() {
            frozen_pool = Some(pool.clone());
        }
        let current: HashMap<usize, Label> = pool.entries.iter().map(|e| (e.index, e.label)).collect();
        let churn = match &prev {
            Some(p) => current.iter().filter(|(i, l)| p.get(i) != Some(l)).count() as f64 / current.len() as f64,
            None => 0.0,
        };
        prev = Some(current);

        let selected = select_candidates(&pool, m_t);
        let mean_confidence = selected.iter().map(|e| e.confidence).sum::<f64>() / selected.len().max(1) as f64;
        let items: Vec<(usize, Label)> = selected.iter().map(|e| (e.index, e.label)).collect();
        spec.order_seed = derive_seed(train.seed, &[FINETUNE_STREAM, ORDER_STREAM, round as u64]);
        spec.dropout_seed = derive_seed(train.seed, &[FINETUNE_STREAM, DROPOUT_STREAM, round as u64]);
        let train_loss = train_epoch(&mut model, &items, &spec, &mut opt)?;
        let m = evaluate_cached(&model, &val_feats, &val_labels)?;
        log::info!(
            "round {round}: m_t {m_t} conf {mean_confidence:.4} churn {churn:.4} loss {train_loss:.4} val acc {:.4}",
            m.acc
        );
        log.push(RoundLog {
            round,
            m_t,
            mean_confidence,
            churn,
            train_loss,
            val_acc: m.acc,
            val_f1: m.f1,
        });
        let score = train.selection_metric.score(&m);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, round, model.clone(), opt.clone(), m));
        }
    }
    let (_, round, model, optimizer, m) = best.expect("at least one round ran");
    Ok(FinetuneOutcome {
        model,
        optimizer,
        best_round: Some(round),
        best_val: Some(m),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Vocab};
    use crate::encoder::{EncoderConfig, PrecomputedStore};
    use crate::head::HeadConfig;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn schedule_examples() {
        let s = schedule_sizes(0.1, 2000, 10).unwrap();
        assert_eq!(s.m, (1..=10).map(|k| 200 * k).collect::<Vec<_>>());
        assert_eq!(schedule_sizes(0.5, 10, 4).unwrap().m, vec![5, 10, 10, 10]);
        assert_eq!(schedule_sizes(0.1, 4000, 1).unwrap().m, vec![400]);
        assert_eq!(schedule_sizes(0.3, 10, 2).unwrap().m, vec![3, 6]);
        assert!(schedule_sizes(0.0, 10, 2).is_err());
        assert!(schedule_sizes(1.0, 10, 2).is_err());
        assert!(schedule_sizes(0.5, 10, 0).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_and_capped(p in 0.001f64..0.999, n in 1usize..5000, t in 1usize..30) {
            let s = schedule_sizes(p, n, t).unwrap();
            prop_assert_eq!(s.m.len(), t);
            prop_assert!(s.m.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.m.iter().all(|&m| m <= n));
            let inc = (p * n as f64).ceil() as usize;
            if inc * t >= n {
                prop_assert_eq!(*s.m.last().unwrap(), n);
            }
        }

        #[test]
        fn selection_takes_the_largest(confs in prop::collection::vec(0u32..20, 1..60), m in 0usize..70) {
            let pool = PseudoPool {
                entries: confs.iter().enumerate().map(|(i, &c)| PseudoEntry {
                    index: i,
                    id: format!("s{i:03}"),
                    label: Label::Cover,
                    confidence: 0.5 + c as f64 / 40.0,
                    margin: c as f64,
                }).collect(),
            };
            let sel = select_candidates(&pool, m);
            prop_assert_eq!(sel.len(), m.min(confs.len()));
            let mut all: Vec<f64> = pool.entries.iter().map(|e| e.confidence).collect();
            all.sort_by(|a, b| b.total_cmp(a));
            let got: Vec<f64> = sel.iter().map(|e| e.confidence).collect();
            prop_assert_eq!(&got[..], &all[..sel.len()]);
        }
    }

    #[test]
    fn selection_examples() {
        let pool = PseudoPool {
            entries: [0.99, 0.7, 0.95]
                .iter()
                .enumerate()
                .map(|(i, &c)| PseudoEntry {
                    index: i,
                    id: format!("x{i}"),
                    label: Label::Stego,
                    confidence: c,
                    margin: (c / (1.0 - c)).ln(),
                })
                .collect(),
        };
        let ids: Vec<String> = select_candidates(&pool, 2).into_iter().map(|e| e.id).collect();
        assert_eq!(ids, ["x0", "x2"]);
        let tied = PseudoPool {
            entries: ["c", "a", "b"]
                .iter()
                .enumerate()
                .map(|(i, id)| PseudoEntry {
                    index: i,
                    id: id.to_string(),
                    label: Label::Cover,
                    confidence: 0.8,
                    margin: 4f64.ln(),
                })
                .collect(),
        };
        let ids: Vec<String> = select_candidates(&tied, 2).into_iter().map(|e| e.id).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(select_candidates(&tied, 10).len(), 3);
    }

    #[test]
    fn pseudo_label_rules() {
        let e = pseudo_entry(0, "a", [9f64.ln(), 0.0], [0.9, 0.1]);
        assert_eq!((e.label, e.confidence), (Label::Cover, 0.9));
        let e = pseudo_entry(0, "a", [0.0, 0.0], [0.5, 0.5]);
        assert_eq!((e.label, e.confidence, e.margin), (Label::Cover, 0.5, 0.0));
        let e = pseudo_entry(0, "a", [0.0, 4f64.ln()], [0.2, 0.8]);
        assert_eq!((e.label, e.confidence), (Label::Stego, 0.8));
    }

    /// Texts whose label is decided by which of two marker words they use.
    fn toy_samples(n: usize, seed: u64, prefix: &str, labeled: bool) -> Vec<TextSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filler = ["the", "of", "and", "a", "to", "in"];
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Cover } else { Label::Stego };
                let marker = if label == Label::Stego { "zeta" } else { "alpha" };
                let len = rng.gen_range(3..8);
                let mut tokens: Vec<String> = (0..len)
                    .map(|_| filler[rng.gen_range(0..filler.len())].to_string())
                    .collect();
                let at = rng.gen_range(0..=tokens.len());
                tokens.insert(at, marker.to_string());
                TextSample {
                    id: format!("{prefix}-{i:04}"),
                    tokens,
                    label: labeled.then_some(label),
                    domain: prefix.into(),
                    bpw: (labeled && label == Label::Stego).then_some(1),
                }
            })
            .collect()
    }

    fn toy_vocab() -> Vocab {
        let words = vec![vec!["the", "of", "and", "a", "to", "in", "alpha", "zeta"]];
        build_vocab(&words, 1).unwrap()
    }

    fn toy_model(seed: u64) -> Model {
        let enc = EncoderConfig {
            d_h: 8,
            seed,
            ..Default::default()
        };
        let head = HeadConfig {
            hidden: 4,
            seed,
            ..Default::default()
        };
        Model::builtin(toy_vocab(), &enc, &head).unwrap()
    }

    fn toy_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            pretrain_epochs: epochs,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn separable_toy_data_is_learned() {
        let train = toy_samples(120, 1, "tr", true);
        let val = toy_samples(40, 2, "va", true);
        let out = pretrain(toy_model(0), &train, &val, &toy_cfg(50), FreezePolicy::AfterPretrain).unwrap();
        assert_eq!(out.log.len(), 50);
        assert_eq!(out.best_val.unwrap().acc, 1.0);
        let best = out.log.iter().map(|l| l.val_acc).fold(0.0, f64::max);
        let first = out.log.iter().position(|l| l.val_acc == best).unwrap() + 1;
        assert_eq!(out.best_epoch, Some(first));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let m = toy_model(0);
        let out = pretrain(
            m.clone(),
            &toy_samples(4, 1, "tr", true),
            &[],
            &toy_cfg(0),
            FreezePolicy::AfterPretrain,
        )
        .unwrap();
        assert_eq!(out.model, m);
        assert!(out.log.is_empty());
    }

    #[test]
    fn unlabeled_source_is_rejected() {
        let train = toy_samples(4, 1, "tr", false);
        let val = toy_samples(4, 2, "va", true);
        let r = pretrain(toy_model(0), &train, &val, &toy_cfg(1), FreezePolicy::AfterPretrain);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let train = toy_samples(40, 1, "tr", true);
        let val = toy_samples(10, 2, "va", true);
        let a = pretrain(toy_model(1), &train, &val, &toy_cfg(3), FreezePolicy::AfterPretrain).unwrap();
        let b = pretrain(toy_model(1), &train, &val, &toy_cfg(3), FreezePolicy::AfterPretrain).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn frozen_encoder_is_not_updated_by_pretraining() {
        let train = toy_samples(20, 1, "tr", true);
        let val = toy_samples(10, 2, "va", true);
        let m = toy_model(1);
        let before = m.encoder.checksum();
        let out = pretrain(m, &train, &val, &toy_cfg(2), FreezePolicy::Always).unwrap();
        assert_eq!(out.model.encoder.checksum(), before);
        assert!(out.optimizer.encoder.is_none());
    }

    #[test]
    fn finetune_bookkeeping() {
        let train = toy_samples(60, 1, "tr", true);
        let val = toy_samples(20, 2, "va", true);
        let pre = pretrain(toy_model(2), &train, &val, &toy_cfg(5), FreezePolicy::AfterPretrain).unwrap();
        let target: Vec<TextSample> = toy_samples(50, 5, "tg", false);
        let tval = toy_samples(20, 6, "tv", true);
        let sched = ScheduleConfig {
            p: 0.3,
            rounds: 4,
            reestimate: true,
        };
        let enc_before = pre.model.encoder.checksum();
        let out = finetune(pre.model.clone(), &target, &tval, &toy_cfg(5), &sched).unwrap();
        assert_eq!(out.log.iter().map(|l| l.m_t).collect::<Vec<_>>(), vec![15, 30, 45, 50]);
        assert_eq!(out.model.encoder.checksum(), enc_before);
        let best = out.best_val.unwrap().acc;
        assert!(out.log.iter().all(|l| l.val_acc <= best));
        assert_eq!(out.log[0].churn, 0.0);

        let again = finetune(pre.model.clone(), &target, &tval, &toy_cfg(5), &sched).unwrap();
        assert_eq!(again.log, out.log);
        assert_eq!(again.model, out.model);

        let skip = finetune(
            pre.model.clone(),
            &target,
            &tval,
            &toy_cfg(5),
            &ScheduleConfig {
                rounds: 0,
                ..sched.clone()
            },
        )
        .unwrap();
        assert_eq!(skip.model, pre.model);
        assert!(skip.log.is_empty());

        let frozen = finetune(
            pre.model.clone(),
            &target,
            &tval,
            &toy_cfg(5),
            &ScheduleConfig {
                reestimate: false,
                ..sched
            },
        )
        .unwrap();
        assert!(frozen.log.iter().all(|l| l.churn == 0.0));
    }

    #[test]
    fn finetune_rejects_empty_target() {
        let r = finetune(
            toy_model(0),
            &[],
            &toy_samples(4, 1, "v", true),
            &toy_cfg(1),
            &ScheduleConfig::default(),
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn precomputed_encoder_trains_head_only() {
        let train = toy_samples(20, 1, "tr", true);
        let val = toy_samples(10, 2, "va", true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = PrecomputedStore {
            d_h: 4,
            ..Default::default()
        };
        for s in train.iter().chain(&val) {
            let h = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
            store.entries.insert(s.id.clone(), h);
        }
        let head = HeadConfig {
            hidden: 3,
            ..Default::default()
        };
        let m = Model::with_encoder(Encoder::Precomputed(store), &head);
        let before = m.encoder.checksum();
        let out = pretrain(m, &train, &val, &toy_cfg(2), FreezePolicy::AfterPretrain).unwrap();
        assert_eq!(out.model.encoder.checksum(), before);
    }
}
