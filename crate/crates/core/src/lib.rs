//! Car-following toolkit for electric-vehicle ACC trajectories.
//!
//! The crate is organised bottom-up:
//!
//! - [`ingest`]: load raw logs, compute spacing, resample, smooth, differentiate, split.
//! - [`stats`]: distribution summaries, KDE, KS distance, jerk/JSI and spacing ACF.
//! - [`classic_cf`]: OVRV and IDM acceleration laws plus grid-search calibration.
//! - [`neural`]: a small reverse-mode tensor engine with LSTM, attention, dense heads and AdamW.
//! - [`paai`]: the Baseline AI and phase-aware residual models, their loss and ensemble training.
//! - [`sim`]: closed-loop rollouts, RMSE scoring, model comparison and ring-road simulation.
//! - [`synth`]: deterministic synthetic lead profiles and follower generators.

pub mod classic_cf;
pub mod error;
pub mod ingest;
pub mod neural;
pub mod paai;
pub mod sim;
pub mod stats;
pub mod synth;

pub use classic_cf::{CfState, GridSpec, IdmParams, ModelKind, OvrvParams};
pub use error::{Error, Result};
pub use ingest::{DatasetSplit, RawSample, Trajectory};
pub use neural::Tensor;
pub use paai::{Ensemble, LossConfig, PaaiKind, PaaiModel, PhaseConfig};
pub use sim::{CarFollowing, SimConfig, SimResult};
