//! Metric-learning toolkit for identity retrieval at desk scale.
//!
//! Implements an additive-margin softmax identity loss with an entropy
//! relaxation, a small differentiable backbone (instance norm, PReLU,
//! global depthwise pooling, continuous dropout, L2-normalized head),
//! AMSGrad training with a step schedule and head-only warm-up,
//! identity-uniform batch sampling, a synthetic domain-shift generator,
//! and a full CMC/mAP retrieval evaluation harness.

pub mod config;
pub mod data;
pub mod dump;
pub mod evalkit;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod optim;
pub mod sampler;
pub mod trainer;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate norm {0:e} below tolerance")]
    DegenerateNorm(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("infeasible batch: {0}")]
    InfeasibleBatch(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing payload file: {0}")]
    MissingPayload(String),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("query has no relevant gallery items")]
    NoRelevant,
    #[error("need {need} qualifying identities, found {have}")]
    InsufficientIdentities { need: usize, have: usize },
    #[error("identity {id} has {count} samples, need at least 2")]
    InsufficientSamples { id: u32, count: usize },
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("embedding dim mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: usize, step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
