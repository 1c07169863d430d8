use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use stegadapt_core::adapt::PretrainOutcome;
use stegadapt_core::config::{ExperimentConfig, Variant};
use stegadapt_core::corpus::Split;
use stegadapt_core::experiment::{
    adapt_run, generate_dataset, load_or_generate_dataset, pretrain_run, run_ablation, run_matrix, write_records,
    write_run_artifacts, RunConfigs, TaskSpec,
};
use stegadapt_core::model::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
use stegadapt_core::projection::export_projection;
use stegadapt_core::{DomainDataset, Metrics};

#[derive(Parser)]
#[command(name = "stegadapt", version, about = "Zero-shot cross-domain text steganalysis")]
struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed instead of `eval.seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate cover/stego datasets for the configured domains.
    GenData {
        /// Restrict to these domains.
        #[arg(long)]
        domain: Vec<String>,
    },
    /// Pretrain on the source domain, one checkpoint per seed.
    Pretrain,
    /// Self-train pretrained checkpoints on the target domain.
    Adapt,
    /// Score a checkpoint on a domain split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `eval.target`.
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the full method and its three ablations on `eval.source => eval.target`.
    Ablate,
    /// Write 2-D PCA coordinates of pooled gated features.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Every ordered pair of configured domains.
    Matrix,
}

#[derive(Serialize, Deserialize)]
struct PretrainSummary {
    best_epoch: Option<usize>,
    best_val: Option<Metrics>,
}

#[derive(Serialize)]
struct EvalRow<'a> {
    checkpoint: &'a str,
    domain: &'a str,
    split: Split,
    acc: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    tn: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    n: usize,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let mut cfg = ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?;
            // corpus paths are relative to the config file
            let base = p.parent().unwrap_or(Path::new(""));
            for d in &mut cfg.data.domains {
                if d.corpus.is_relative() {
                    d.corpus = base.join(&d.corpus);
                }
            }
            cfg
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.eval.seeds = vec![s];
    }
    Ok(cfg)
}

fn task_datasets(cfg: &ExperimentConfig, out: &Path) -> Result<(TaskSpec, DomainDataset, DomainDataset)> {
    let task = TaskSpec::from_config(cfg)?;
    let src = load_or_generate_dataset(cfg, out, &task.source)?;
    let tgt = load_or_generate_dataset(cfg, out, &task.target)?;
    Ok((task, src, tgt))
}

fn pretrain_dir(out: &Path, task: &TaskSpec, seed: u64) -> PathBuf {
    out.join(task.slug()).join("pretrain").join(format!("seed-{seed}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, only: &[String]) -> Result<()> {
    if cfg.data.domains.is_empty() {
        bail!("no domains configured under data.domains");
    }
    for d in &cfg.data.domains {
        if !only.is_empty() && !only.contains(&d.name) {
            continue;
        }
        let ds = generate_dataset(cfg, out, &d.name)?;
        println!(
            "{}: {} train, {} val, {} test per class",
            d.name,
            ds.train_cover.len(),
            ds.val_cover.len(),
            ds.test_cover.len()
        );
    }
    Ok(())
}

fn pretrain_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (task, src, tgt) = task_datasets(cfg, out)?;
    for &seed in &task.seeds {
        let configs = RunConfigs::for_variant(cfg, Variant::Full, seed);
        let pre = pretrain_run(&configs, &src, &tgt)?;
        let dir = pretrain_dir(out, &task, seed);
        fs::create_dir_all(&dir)?;
        let ckpt = Checkpoint::from_model(
            &pre.model,
            config_hash(&configs),
            pre.optimizer.clone(),
            configs.encoder.precomputed_path.as_deref(),
        )?;
        save_checkpoint(dir.join("pretrain.ckpt.json"), &ckpt)?;
        let summary = PretrainSummary {
            best_epoch: pre.best_epoch,
            best_val: pre.best_val,
        };
        write_text(&dir.join("pretrain.json"), &serde_json::to_string_pretty(&summary)?)?;
        let mut log = String::new();
        for e in &pre.log {
            log.push_str(&serde_json::to_string(e)?);
            log.push('\n');
        }
        write_text(&dir.join("pretrain_log.jsonl"), &log)?;
        println!(
            "seed {seed}: best epoch {:?}, val {:?}",
            pre.best_epoch,
            pre.best_val.map(|m| m.acc)
        );
    }
    Ok(())
}

fn adapt_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (task, _, tgt) = task_datasets(cfg, out)?;
    let mut records = Vec::new();
    for &seed in &task.seeds {
        let configs = RunConfigs::for_variant(cfg, Variant::Full, seed);
        let dir = pretrain_dir(out, &task, seed);
        let ckpt = load_checkpoint(dir.join("pretrain.ckpt.json"))
            .with_context(|| format!("no pretrain checkpoint for seed {seed}; run `pretrain` first"))?;
        if ckpt.config_hash != config_hash(&configs) {
            bail!("pretrain checkpoint for seed {seed} was built with a different config");
        }
        let summary: PretrainSummary = serde_json::from_str(&fs::read_to_string(dir.join("pretrain.json"))?)?;
        let (model, optimizer) = ckpt.into_model()?;
        let pre = PretrainOutcome {
            model,
            optimizer,
            best_epoch: summary.best_epoch,
            best_val: summary.best_val,
            log: Vec::new(),
        };
        let run = adapt_run(cfg, &task, Variant::Full, seed, &pre, &tgt)?;
        let run_dir = out
            .join(task.slug())
            .join(Variant::Full.as_str())
            .join(format!("seed-{seed}"));
        write_run_artifacts(&run_dir, &run, false)?;
        save_checkpoint(run_dir.join("final.ckpt.json"), &run.final_checkpoint)?;
        println!("seed {seed}: acc {:.4} f1 {:.4}", run.record.acc, run.record.f1);
        records.push(run.record);
    }
    write_records(out.join(task.slug()).join("adapt.csv"), &records)?;
    Ok(())
}

fn domain_split(
    cfg: &ExperimentConfig,
    out: &Path,
    domain: Option<&str>,
    split: Option<Split>,
) -> Result<(String, Split, DomainDataset)> {
    let name = match domain.or(cfg.eval.target.as_deref()) {
        Some(n) => n.to_string(),
        None => bail!("pass --domain or set eval.target"),
    };
    let split = split.unwrap_or(cfg.eval.test_split);
    let ds = load_or_generate_dataset(cfg, out, &name)?;
    Ok((name, split, ds))
}

fn evaluate_cmd(
    cfg: &ExperimentConfig,
    out: &Path,
    checkpoint: &Path,
    domain: Option<&str>,
    split: Option<Split>,
    output: Option<&Path>,
) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?.into_model()?;
    let (name, split, ds) = domain_split(cfg, out, domain, split)?;
    let m = stegadapt_core::adapt::evaluate(&model, &ds.split(split))?;
    let path = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("evaluate.csv"));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(&path)?;
    w.serialize(EvalRow {
        checkpoint: &checkpoint.to_string_lossy(),
        domain: &name,
        split,
        acc: m.acc,
        f1: m.f1,
        tp: m.tp,
        fp: m.fp,
        tn: m.tn,
        fn_: m.fn_,
        n: m.n,
    })?;
    w.flush()?;
    println!(
        "{name}/{}: acc {:.4} f1 {:.4} (n = {})",
        split.as_str(),
        m.acc,
        m.f1,
        m.n
    );
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out_dir.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::GenData { domain } => gen_data(&cfg, out, &domain)?,
        Command::Pretrain => pretrain_cmd(&cfg, out)?,
        Command::Adapt => adapt_cmd(&cfg, out)?,
        Command::Evaluate {
            checkpoint,
            domain,
            split,
            output,
        } => evaluate_cmd(&cfg, out, &checkpoint, domain.as_deref(), split, output.as_deref())?,
        Command::Ablate => {
            let (_, src, tgt) = task_datasets(&cfg, out)?;
            let (records, table) = run_ablation(&cfg, &src, &tgt, Some(out))?;
            write_records(out.join("ablation.csv"), &records)?;
            let md = table.to_markdown();
            write_text(&out.join("ablation.md"), &md)?;
            print!("{md}");
        }
        Command::ExportFeatures {
            checkpoint,
            domain,
            split,
            output,
        } => {
            let (model, _) = load_checkpoint(&checkpoint)?.into_model()?;
            let (name, split, ds) = domain_split(&cfg, out, domain.as_deref(), split)?;
            let path = output.unwrap_or_else(|| out.join(format!("features-{name}-{}.csv", split.as_str())));
            let points = export_projection(&model, &ds.split(split), &path)?;
            println!("wrote {} points to {}", points.len(), path.display());
        }
        Command::Matrix => {
            let mut datasets = BTreeMap::new();
            for d in &cfg.data.domains {
                datasets.insert(d.name.clone(), load_or_generate_dataset(&cfg, out, &d.name)?);
            }
            let (records, table) = run_matrix(&cfg, &datasets, Some(out))?;
            write_records(out.join("matrix.csv"), &records)?;
            let md = table.to_markdown();
            write_text(&out.join("matrix.md"), &md)?;
            print!("{md}");
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
