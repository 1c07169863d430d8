//! Cross-domain tasks, ablation variants and result tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{
    evaluate, finetune, pretrain, EpochLog, FinetuneOutcome, PretrainOutcome, RoundLog, ScheduleConfig, TrainConfig,
};
use crate::config::{ExperimentConfig, Variant};
use crate::corpus::{build_vocab, DomainDataset, Vocab};
use crate::encoder::{load_precomputed, Encoder, EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::head::{GateMode, HeadConfig};
use crate::metrics::{mean_std, Metrics};
use crate::model::{config_hash, save_checkpoint, Checkpoint, Model};
use crate::rng::derive_seed;
use crate::stegogen::{build_domain_dataset, Coding, GenerationConfig};

/// One source ⇒ target adaptation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub source: String,
    pub target: String,
    pub bpw: u32,
    pub coding: Coding,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl TaskSpec {
    pub fn new(cfg: &ExperimentConfig, source: &str, target: &str) -> Result<TaskSpec> {
        let spec = TaskSpec {
            source: source.to_string(),
            target: target.to_string(),
            bpw: cfg.data.generation.bpw,
            coding: cfg.data.generation.coding,
            variants: cfg.eval.variants.clone(),
            seeds: cfg.eval.seeds.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Task from `eval.source` / `eval.target`.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<TaskSpec> {
        let source = cfg
            .eval
            .source
            .as_deref()
            .ok_or_else(|| Error::invalid("eval.source is not set"))?;
        let target = cfg
            .eval
            .target
            .as_deref()
            .ok_or_else(|| Error::invalid("eval.target is not set"))?;
        TaskSpec::new(cfg, source, target)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == self.target {
            return Err(Error::invalid(format!("source and target are both `{}`", self.source)));
        }
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::invalid("a task needs at least one seed and one variant"));
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        format!("{}=>{}", self.source, self.target)
    }

    /// File-system friendly task name.
    pub fn slug(&self) -> String {
        format!("{}-to-{}", self.source, self.target)
    }
}

/// Per-section configuration of one run after the variant and seed are applied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfigs {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigHashes {
    pub encoder: String,
    pub head: String,
    pub train: String,
    pub schedule: String,
}

impl RunConfigs {
    pub fn for_variant(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> RunConfigs {
        let mut encoder = cfg.encoder.clone();
        let mut head = cfg.head.clone();
        let mut train = cfg.train.clone();
        let mut schedule = cfg.schedule.clone();
        encoder.seed = derive_seed(encoder.seed, &[seed]);
        head.seed = derive_seed(head.seed, &[seed]);
        train.seed = derive_seed(train.seed, &[seed]);
        match variant {
            Variant::Full => {}
            Variant::WithoutPseudoLabels => schedule.rounds = 0,
            Variant::WithoutFeatureFilter => head.gate = GateMode::Bypass,
            Variant::StackedLayers => head.layers = cfg.eval.slb_layers,
        }
        RunConfigs {
            encoder,
            head,
            train,
            schedule,
        }
    }

    pub fn hashes(&self) -> ConfigHashes {
        ConfigHashes {
            encoder: config_hash(&self.encoder),
            head: config_hash(&self.head),
            train: config_hash(&self.train),
            schedule: config_hash(&self.schedule),
        }
    }

    /// Hash of everything that shapes source pretraining.
    pub fn pretrain_hash(&self) -> String {
        config_hash(&(&self.encoder, &self.head, &self.train))
    }
}

/// One CSV row: a task × variant × seed result on the target test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub source: String,
    pub target: String,
    pub bpw: u32,
    pub coding: Coding,
    pub variant: Variant,
    pub seed: u64,
    pub acc: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n: usize,
    pub best_epoch: Option<usize>,
    pub best_round: Option<usize>,
    pub encoder_hash: String,
    pub head_hash: String,
    pub train_hash: String,
    pub schedule_hash: String,
}

/// Everything one run produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub record: RunRecord,
    pub pretrain_log: Vec<EpochLog>,
    pub round_log: Vec<RoundLog>,
    pub pretrain_checkpoint: Checkpoint,
    pub final_checkpoint: Checkpoint,
    pub final_model: Model,
}

/// Vocabulary of the builtin encoder: labeled source train plus unlabeled
/// target train texts.
pub fn encoder_vocab(source: &DomainDataset, target: &DomainDataset, min_freq: usize) -> Result<Vocab> {
    let docs: Vec<Vec<String>> = source
        .labeled_train()
        .into_iter()
        .chain(target.unlabeled_train())
        .map(|s| s.tokens)
        .collect();
    build_vocab(&docs, min_freq)
}

/// Fresh model for a run.
pub fn build_model(configs: &RunConfigs, source: &DomainDataset, target: &DomainDataset) -> Result<Model> {
    match configs.encoder.kind {
        EncoderKind::Builtin => {
            let vocab = encoder_vocab(source, target, configs.encoder.min_freq)?;
            Model::builtin(vocab, &configs.encoder, &configs.head)
        }
        EncoderKind::Precomputed => {
            configs.encoder.validate()?;
            configs.head.validate()?;
            let path = configs
                .encoder
                .precomputed_path
                .as_ref()
                .ok_or_else(|| Error::invalid("precomputed encoder needs encoder.precomputed_path"))?;
            let store = load_precomputed(path)?;
            Ok(Model::with_encoder(Encoder::Precomputed(store), &configs.head))
        }
    }
}

fn checkpoint(model: &Model, configs: &RunConfigs, opt: crate::model::OptimizerState) -> Result<Checkpoint> {
    Checkpoint::from_model(
        model,
        config_hash(configs),
        opt,
        configs.encoder.precomputed_path.as_deref(),
    )
}

/// Source pretraining for one run.
pub fn pretrain_run(configs: &RunConfigs, source: &DomainDataset, target: &DomainDataset) -> Result<PretrainOutcome> {
    let model = build_model(configs, source, target)?;
    pretrain(
        model,
        &source.labeled_train(),
        &source.split(crate::corpus::Split::Val),
        &configs.train,
        configs.encoder.freeze_policy,
    )
}

/// Target adaptation of a pretrained model, scored on the target `test_split`.
pub fn adapt_run(
    cfg: &ExperimentConfig,
    task: &TaskSpec,
    variant: Variant,
    seed: u64,
    pre: &PretrainOutcome,
    target: &DomainDataset,
) -> Result<RunArtifacts> {
    let configs = RunConfigs::for_variant(cfg, variant, seed);
    let pretrain_checkpoint = checkpoint(&pre.model, &configs, pre.optimizer.clone())?;
    let ft: FinetuneOutcome = finetune(
        pre.model.clone(),
        &target.unlabeled_train(),
        &target.split(crate::corpus::Split::Val),
        &configs.train,
        &configs.schedule,
    )?;
    // Without rounds the model is untouched, so it keeps the pretrain optimizer state.
    let final_opt = if ft.log.is_empty() {
        pre.optimizer.clone()
    } else {
        ft.optimizer.clone()
    };
    let final_checkpoint = checkpoint(&ft.model, &configs, final_opt)?;
    let metrics = evaluate(&ft.model, &target.split(cfg.eval.test_split))?;
    let h = configs.hashes();
    let record = RunRecord {
        task: task.name(),
        source: task.source.clone(),
        target: task.target.clone(),
        bpw: task.bpw,
        coding: task.coding,
        variant,
        seed,
        acc: metrics.acc,
        f1: metrics.f1,
        tp: metrics.tp,
        fp: metrics.fp,
        tn: metrics.tn,
        fn_: metrics.fn_,
        n: metrics.n,
        best_epoch: pre.best_epoch,
        best_round: ft.best_round,
        encoder_hash: h.encoder,
        head_hash: h.head,
        train_hash: h.train,
        schedule_hash: h.schedule,
    };
    Ok(RunArtifacts {
        record,
        pretrain_log: pre.log.clone(),
        round_log: ft.log,
        pretrain_checkpoint,
        final_checkpoint,
        final_model: ft.model,
    })
}

/// Runs every variant and seed of `task`. Variants whose pretraining
/// configuration coincides share one pretrained model per seed.
/// Artifacts go to `<out>/<task>/<variant>/seed-<seed>/` when `out` is set.
pub fn run_task(
    cfg: &ExperimentConfig,
    task: &TaskSpec,
    source: &DomainDataset,
    target: &DomainDataset,
    out: Option<&Path>,
) -> Result<Vec<RunRecord>> {
    task.validate()?;
    let mut records = Vec::new();
    for &seed in &task.seeds {
        let mut cache: BTreeMap<String, PretrainOutcome> = BTreeMap::new();
        for &variant in &task.variants {
            let configs = RunConfigs::for_variant(cfg, variant, seed);
            let key = configs.pretrain_hash();
            if !cache.contains_key(&key) {
                log::info!("{}: pretraining seed {seed} for {}", task.name(), variant.display());
                cache.insert(key.clone(), pretrain_run(&configs, source, target)?);
            }
            let run = adapt_run(cfg, task, variant, seed, &cache[&key], target)?;
            log::info!(
                "{} {} seed {seed}: acc {:.4} f1 {:.4}",
                task.name(),
                variant.display(),
                run.record.acc,
                run.record.f1
            );
            if let Some(out) = out {
                write_run_artifacts(
                    &out.join(task.slug())
                        .join(variant.as_str())
                        .join(format!("seed-{seed}")),
                    &run,
                    cfg.eval.save_checkpoints,
                )?;
            }
            records.push(run.record);
        }
    }
    Ok(records)
}

/// The four ablation variants on one task with shared seeds and data.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    out: Option<&Path>,
) -> Result<(Vec<RunRecord>, SummaryTable)> {
    let mut task = TaskSpec::from_config(cfg)?;
    task.variants = Variant::ALL.to_vec();
    let records = run_task(cfg, &task, source, target, out)?;
    let table = SummaryTable::from_records(&records);
    Ok((records, table))
}

/// Every ordered pair of configured domains, in configuration order.
pub fn matrix_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    let names: Vec<&str> = cfg.data.domains.iter().map(|d| d.name.as_str()).collect();
    if names.len() < 2 {
        return Err(Error::invalid("the task matrix needs at least two domains"));
    }
    let mut tasks = Vec::new();
    for s in &names {
        for t in &names {
            if s != t {
                tasks.push(TaskSpec::new(cfg, s, t)?);
            }
        }
    }
    Ok(tasks)
}

pub fn run_matrix(
    cfg: &ExperimentConfig,
    datasets: &BTreeMap<String, DomainDataset>,
    out: Option<&Path>,
) -> Result<(Vec<RunRecord>, SummaryTable)> {
    let mut records = Vec::new();
    for task in matrix_tasks(cfg)? {
        let get = |name: &str| {
            datasets
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no dataset loaded for domain `{name}`")))
        };
        records.extend(run_task(cfg, &task, get(&task.source)?, get(&task.target)?, out)?);
    }
    let table = SummaryTable::from_records(&records);
    Ok((records, table))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_run_artifacts(dir: &Path, run: &RunArtifacts, checkpoints: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join("pretrain_log.jsonl"), &run.pretrain_log)?;
    write_jsonl(&dir.join("rounds.jsonl"), &run.round_log)?;
    if checkpoints {
        save_checkpoint(dir.join("pretrain.ckpt.json"), &run.pretrain_checkpoint)?;
        save_checkpoint(dir.join("final.ckpt.json"), &run.final_checkpoint)?;
    }
    Ok(())
}

pub fn write_records(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SummaryCell {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub seeds: usize,
}

/// Mean ± std over seeds per variant × task, plus a per-variant average of
/// the task means.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryTable {
    pub tasks: Vec<String>,
    pub variants: Vec<Variant>,
    pub cells: BTreeMap<(Variant, String), SummaryCell>,
}

impl SummaryTable {
    pub fn from_records(records: &[RunRecord]) -> SummaryTable {
        let mut tasks: Vec<String> = Vec::new();
        let mut variants: Vec<Variant> = Vec::new();
        let mut groups: BTreeMap<(Variant, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in records {
            if !tasks.contains(&r.task) {
                tasks.push(r.task.clone());
            }
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
            let g = groups.entry((r.variant, r.task.clone())).or_default();
            g.0.push(r.acc);
            g.1.push(r.f1);
        }
        let cells = groups
            .into_iter()
            .map(|(k, (acc, f1))| {
                let (acc_mean, acc_std) = mean_std(&acc);
                let (f1_mean, f1_std) = mean_std(&f1);
                let cell = SummaryCell {
                    acc_mean,
                    acc_std,
                    f1_mean,
                    f1_std,
                    seeds: acc.len(),
                };
                (k, cell)
            })
            .collect();
        SummaryTable { tasks, variants, cells }
    }

    pub fn cell(&self, variant: Variant, task: &str) -> Option<&SummaryCell> {
        self.cells.get(&(variant, task.to_string()))
    }

    /// Arithmetic mean of the variant's per-task mean ACC and F1.
    pub fn average(&self, variant: Variant) -> Option<(f64, f64)> {
        let cells: Vec<&SummaryCell> = self.tasks.iter().filter_map(|t| self.cell(variant, t)).collect();
        if cells.is_empty() {
            return None;
        }
        let n = cells.len() as f64;
        Some((
            cells.iter().map(|c| c.acc_mean).sum::<f64>() / n,
            cells.iter().map(|c| c.f1_mean).sum::<f64>() / n,
        ))
    }

    /// ACC and F1 tables: one row per variant, one column per task, then Average.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for (title, pick) in [("ACC", 0usize), ("F1", 1)] {
            let _ = writeln!(s, "### {title}\n");
            let _ = write!(s, "| Method |");
            for t in &self.tasks {
                let _ = write!(s, " {t} |");
            }
            let _ = writeln!(s, " Average |");
            let _ = writeln!(s, "|---|{}---|", "---|".repeat(self.tasks.len()));
            for &v in &self.variants {
                let _ = write!(s, "| {} |", v.display());
                for t in &self.tasks {
                    match self.cell(v, t) {
                        Some(c) => {
                            let (m, sd) = if pick == 0 {
                                (c.acc_mean, c.acc_std)
                            } else {
                                (c.f1_mean, c.f1_std)
                            };
                            let _ = write!(s, " {m:.4} ± {sd:.4} |");
                        }
                        None => {
                            let _ = write!(s, " - |");
                        }
                    }
                }
                match self.average(v) {
                    Some(avg) => {
                        let _ = writeln!(s, " {:.4} |", if pick == 0 { avg.0 } else { avg.1 });
                    }
                    None => {
                        let _ = writeln!(s, " - |");
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

/// What a generated dataset directory was built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub domain: String,
    pub corpus: PathBuf,
    pub generation: GenerationConfig,
}

pub const MANIFEST_FILE: &str = "generation.json";

pub fn dataset_dir(cfg: &ExperimentConfig, out_dir: &Path, domain: &str) -> PathBuf {
    out_dir.join(&cfg.data.dataset_dir).join(domain)
}

/// Generates a domain's dataset and writes it with its manifest.
pub fn generate_dataset(cfg: &ExperimentConfig, out_dir: &Path, domain: &str) -> Result<DomainDataset> {
    let src = cfg.domain(domain)?;
    let (ds, _) = build_domain_dataset(&src.corpus, domain, &cfg.data.generation)?;
    let dir = dataset_dir(cfg, out_dir, domain);
    ds.write_dir(&dir)?;
    let manifest = DatasetManifest {
        domain: domain.to_string(),
        corpus: src.corpus.clone(),
        generation: cfg.data.generation.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

/// Reads a generated dataset, regenerating it when it is absent or was built
/// from different settings.
pub fn load_or_generate_dataset(cfg: &ExperimentConfig, out_dir: &Path, domain: &str) -> Result<DomainDataset> {
    let dir = dataset_dir(cfg, out_dir, domain);
    let path = dir.join(MANIFEST_FILE);
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let stored: DatasetManifest = serde_json::from_str(&text)?;
        let src = cfg.domain(domain)?;
        if stored.generation == cfg.data.generation && stored.corpus == src.corpus {
            return DomainDataset::read_dir(&dir);
        }
        log::warn!("dataset for `{domain}` was generated with other settings; regenerating");
    }
    generate_dataset(cfg, out_dir, domain)
}

/// Mean ACC of one variant on one task, if present.
pub fn mean_acc(records: &[RunRecord], task: &str, variant: Variant) -> Option<f64> {
    let accs: Vec<f64> = records
        .iter()
        .filter(|r| r.task == task && r.variant == variant)
        .map(|r| r.acc)
        .collect();
    (!accs.is_empty()).then(|| mean_std(&accs).0)
}

/// Metrics of `model` on a domain split.
pub fn score(model: &Model, ds: &DomainDataset, split: crate::corpus::Split) -> Result<Metrics> {
    evaluate(model, &ds.split(split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DomainSource;
    use crate::corpus::{Label, Split, SplitSizes};

    fn record(task: &str, variant: Variant, seed: u64, acc: f64, f1: f64) -> RunRecord {
        RunRecord {
            task: task.into(),
            source: "a".into(),
            target: "b".into(),
            bpw: 1,
            coding: Coding::Flc,
            variant,
            seed,
            acc,
            f1,
            tp: 1,
            fp: 2,
            tn: 3,
            fn_: 4,
            n: 10,
            best_epoch: Some(3),
            best_round: None,
            encoder_hash: "e".into(),
            head_hash: "h".into(),
            train_hash: "t".into(),
            schedule_hash: "s".into(),
        }
    }

    #[test]
    fn task_rejects_same_domain() {
        let cfg = ExperimentConfig::default();
        assert!(TaskSpec::new(&cfg, "x", "x").is_err());
        assert_eq!(TaskSpec::new(&cfg, "x", "y").unwrap().name(), "x=>y");
    }

    #[test]
    fn variants_differ_only_in_ablated_section() {
        let cfg = ExperimentConfig::default();
        let base = RunConfigs::for_variant(&cfg, Variant::Full, 3).hashes();
        let wpl = RunConfigs::for_variant(&cfg, Variant::WithoutPseudoLabels, 3).hashes();
        let wff = RunConfigs::for_variant(&cfg, Variant::WithoutFeatureFilter, 3).hashes();
        let slb = RunConfigs::for_variant(&cfg, Variant::StackedLayers, 3).hashes();
        assert_eq!(
            (&base.encoder, &base.head, &base.train),
            (&wpl.encoder, &wpl.head, &wpl.train)
        );
        assert_ne!(base.schedule, wpl.schedule);
        for other in [&wff, &slb] {
            assert_eq!(
                (&base.encoder, &base.train, &base.schedule),
                (&other.encoder, &other.train, &other.schedule)
            );
            assert_ne!(base.head, other.head);
        }
        assert_ne!(wff.head, slb.head);
    }

    #[test]
    fn seeds_change_every_seeded_section() {
        let cfg = ExperimentConfig::default();
        let a = RunConfigs::for_variant(&cfg, Variant::Full, 0);
        let b = RunConfigs::for_variant(&cfg, Variant::Full, 1);
        assert_ne!(a.encoder.seed, b.encoder.seed);
        assert_ne!(a.head.seed, b.head.seed);
        assert_ne!(a.train.seed, b.train.seed);
        assert_eq!(a.schedule, b.schedule);
    }

    #[test]
    fn matrix_has_all_ordered_pairs() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.domains = ["m", "n", "t"]
            .iter()
            .map(|n| DomainSource {
                name: n.to_string(),
                corpus: format!("{n}.txt").into(),
            })
            .collect();
        let names: Vec<String> = matrix_tasks(&cfg).unwrap().iter().map(TaskSpec::name).collect();
        assert_eq!(names, ["m=>n", "m=>t", "n=>m", "n=>t", "t=>m", "t=>n"]);
    }

    #[test]
    fn average_is_mean_of_task_means() {
        let tasks = ["a", "b", "c", "d", "e", "f"];
        let mut records = Vec::new();
        for (i, t) in tasks.iter().enumerate() {
            for seed in 0..3 {
                let acc = 0.5 + 0.05 * i as f64 + 0.01 * seed as f64;
                records.push(record(t, Variant::Full, seed, acc, acc - 0.1));
            }
        }
        let table = SummaryTable::from_records(&records);
        assert_eq!(table.tasks.len(), 6);
        let expect: f64 = tasks
            .iter()
            .map(|t| table.cell(Variant::Full, t).unwrap().acc_mean)
            .sum::<f64>()
            / 6.0;
        assert_eq!(table.average(Variant::Full).unwrap().0, expect);
        let md = table.to_markdown();
        let row = md.lines().find(|l| l.starts_with("| PDTS")).unwrap();
        assert_eq!(row.matches('|').count(), 6 + 3);
    }

    #[test]
    fn ablation_table_shape() {
        let mut records = Vec::new();
        for v in Variant::ALL {
            records.push(record("a=>b", v, 0, 0.6, 0.5));
        }
        let table = SummaryTable::from_records(&records);
        let md = table.to_markdown();
        let rows = md
            .lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| Method"))
            .count();
        assert_eq!(rows, 8);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let records = vec![
            record("a=>b", Variant::Full, 0, 0.75, 0.5),
            record("a=>b", Variant::WithoutFeatureFilter, 1, 0.5, 0.0),
        ];
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("task,source,target,bpw,coding,variant,seed,acc,f1,tp,fp,tn,fn,n,"));
        assert!(header.contains(",w-ff,"));
    }

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let a = dir.join("a.txt");
        let b = dir.join("b.txt");
        fs::write(&a, "the whale swam far out to sea and the ship gave chase\n".repeat(40)).unwrap();
        fs::write(
            &b,
            "the senate passed the bill and the house agreed to the terms\n".repeat(40),
        )
        .unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.data.domains = vec![
            DomainSource {
                name: "a".into(),
                corpus: a,
            },
            DomainSource {
                name: "b".into(),
                corpus: b,
            },
        ];
        cfg.data.generation.sizes = SplitSizes {
            train: 12,
            val: 4,
            test: 4,
        };
        cfg.data.generation.max_len = 12;
        cfg.encoder.d_h = 8;
        cfg.encoder.max_len = 12;
        cfg.head.hidden = 4;
        cfg.train.pretrain_epochs = 2;
        cfg.train.lr = 1e-2;
        cfg.train.batch_size = 4;
        cfg.schedule.rounds = 2;
        cfg.schedule.p = 0.5;
        cfg.eval.seeds = vec![0, 1];
        cfg.eval.source = Some("a".into());
        cfg.eval.target = Some("b".into());
        cfg
    }

    #[test]
    fn datasets_are_cached_and_regenerated_on_change() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        let first = load_or_generate_dataset(&cfg, dir.path(), "a").unwrap();
        assert!(dataset_dir(&cfg, dir.path(), "a").join("splits.jsonl").exists());
        assert_eq!(load_or_generate_dataset(&cfg, dir.path(), "a").unwrap(), first);
        cfg.data.generation.seed = 9;
        let second = load_or_generate_dataset(&cfg, dir.path(), "a").unwrap();
        assert_ne!(second, first);
        assert!(load_or_generate_dataset(&cfg, dir.path(), "missing").is_err());
    }

    #[test]
    fn ablation_runs_all_variants_with_identities() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let src = load_or_generate_dataset(&cfg, dir.path(), "a").unwrap();
        let tgt = load_or_generate_dataset(&cfg, dir.path(), "b").unwrap();
        let task = TaskSpec::from_config(&cfg).unwrap();

        let pre = pretrain_run(&RunConfigs::for_variant(&cfg, Variant::Full, 0), &src, &tgt).unwrap();
        let wpl = adapt_run(&cfg, &task, Variant::WithoutPseudoLabels, 0, &pre, &tgt).unwrap();
        assert_eq!(wpl.final_checkpoint, wpl.pretrain_checkpoint);
        assert!(wpl.round_log.is_empty());
        let full = adapt_run(&cfg, &task, Variant::Full, 0, &pre, &tgt).unwrap();
        assert_eq!(full.round_log.len(), 2);
        assert_eq!(full.pretrain_checkpoint.head, wpl.pretrain_checkpoint.head);
        assert_eq!(full.pretrain_checkpoint.encoder, wpl.pretrain_checkpoint.encoder);

        let out = dir.path().join("runs");
        let (records, table) = run_ablation(&cfg, &src, &tgt, Some(&out)).unwrap();
        assert_eq!(records.len(), 8);
        assert_eq!(table.variants, Variant::ALL.to_vec());
        assert!(out.join("a-to-b/none/seed-1/rounds.jsonl").exists());
        let again = run_ablation(&cfg, &src, &tgt, None).unwrap().0;
        assert_eq!(again, records);
        let n_test = tgt.split(Split::Test).len();
        assert!(records.iter().all(|r| r.n == n_test));
        assert_eq!(tgt.test_cover[0].label, Some(Label::Cover));
    }
}
