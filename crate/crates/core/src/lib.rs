//! Zero-shot cross-domain text steganalysis.

pub mod adapt;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod projection;
pub mod rng;
pub mod stegogen;

pub use corpus::{DomainDataset, Label, TextSample, Vocab};
pub use encoder::{ContextualFeatures, Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use head::{GateMode, HeadConfig, HeadParams};
pub use metrics::{compute_metrics, Metrics};
pub use model::{Checkpoint, Model};
