//! JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{ScheduleConfig, TrainConfig};
use crate::corpus::Split;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::stegogen::GenerationConfig;

/// A named domain and the plain-text corpus its language model is fitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSource {
    pub name: String,
    pub corpus: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub domains: Vec<DomainSource>,
    /// Generated datasets live in `<dataset_dir>/<domain>/`. Relative paths
    /// resolve against the output directory.
    pub dataset_dir: PathBuf,
    pub generation: GenerationConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            domains: Vec::new(),
            dataset_dir: PathBuf::from("datasets"),
            generation: GenerationConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "none")]
    Full,
    /// No pseudo-label self-training.
    #[serde(rename = "w-pl")]
    WithoutPseudoLabels,
    /// Feature filter bypassed.
    #[serde(rename = "w-ff")]
    WithoutFeatureFilter,
    /// Stacked Bi-LSTM layers.
    #[serde(rename = "w-slb")]
    StackedLayers,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::WithoutPseudoLabels,
        Variant::WithoutFeatureFilter,
        Variant::StackedLayers,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "none",
            Variant::WithoutPseudoLabels => "w-pl",
            Variant::WithoutFeatureFilter => "w-ff",
            Variant::StackedLayers => "w-slb",
        }
    }

    /// Row name in summaries: the full method is reported as PDTS.
    pub fn display(self) -> &'static str {
        match self {
            Variant::Full => "PDTS",
            Variant::WithoutPseudoLabels => "w-PL",
            Variant::WithoutFeatureFilter => "w-FF",
            Variant::StackedLayers => "w-SLB",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub source: Option<String>,
    pub target: Option<String>,
    /// Variants run by `ablate`; `matrix` runs the same list per task.
    pub variants: Vec<Variant>,
    pub slb_layers: usize,
    /// Split scored for the reported metrics.
    pub test_split: Split,
    pub save_checkpoints: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0, 1, 2, 3, 4],
            source: None,
            target: None,
            variants: Variant::ALL.to_vec(),
            slb_layers: 2,
            test_split: Split::Test,
            save_checkpoints: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        if self.schedule.rounds > 0 {
            self.schedule.validate()?;
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::invalid("eval.seeds must not be empty"));
        }
        if self.eval.slb_layers < 2 {
            return Err(Error::invalid("eval.slb_layers must be at least 2"));
        }
        let mut names: Vec<&str> = self.data.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("domain names must be unique"));
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Result<&DomainSource> {
        self.data
            .domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown domain `{name}`")))
    }
}
