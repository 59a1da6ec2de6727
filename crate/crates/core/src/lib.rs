//! Adapter-augmented CRNN for multi-domain text-line recognition.
//!
//! A shared residual CNN backbone and Transformer encoder are trained once;
//! each new domain then gets a small bank of residual adapters, bottleneck
//! adapters, normalization layers and a classifier head, trained with the
//! shared weights frozen. Recognition uses CTC.

pub mod backbone;
pub mod config;
pub mod ctc;
pub mod datagen;
pub mod domains;
pub mod error;
pub mod font;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod persist;
pub mod seqnet;
pub mod tensor;
pub mod training;

pub use config::{KeyValues, ModelConfig, TrainConfig};
pub use ctc::LabelSeq;
pub use domains::{DomainId, DomainInit, TrainMode, SOURCE_DOMAIN};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use metrics::{CharCounts, EvalResult};
pub use model::Model;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
