//! Desk-scale workbench for multi-step CSI prediction: a synthetic
//! time-varying MIMO-OFDM channel simulator, realistic corruption models,
//! neural and trivial predictors, and the evaluation stack that compares
//! them.

pub mod acf;
pub mod autodiff;
pub mod baselines;
pub(crate) mod binio;
pub mod channel;
pub mod checkpoint;
pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod noise;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    ChannelProfile, CsiDataset, CsiSample, CsiSequence, Duplex, NoiseType, ScenarioDescriptor,
    SnrMode, SystemConfig,
};
