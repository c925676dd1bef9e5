//! Rare acoustic event classification toolkit.
//!
//! A from-scratch LSTM/BiLSTM utterance classifier with nine interchangeable
//! pooling heads, an LFBE front end, a seeded mixture synthesizer with
//! controlled event-to-background ratios, a deterministic trainer, and an
//! evaluation kit for accuracy and event-position sensitivity analysis.
//!
//! Pipeline: waveform -> [`dsp::compute_lfbe`] -> LSTM layers
//! ([`seqmodel::Model`]) -> pooling ([`pooling::PoolingKind`]) -> utterance
//! score in (0, 1).

pub mod dsp;
pub mod error;
pub mod nn;
pub mod pooling;
pub mod seqmodel;
pub mod synth;
pub mod trainer;

pub use dsp::{compute_lfbe, DspConfig, FeatureMatrix, Waveform};
pub use error::{Error, Result};
pub use pooling::PoolingKind;
pub use seqmodel::{Direction, Model, ModelConfig};
pub use trainer::TrainConfig;
