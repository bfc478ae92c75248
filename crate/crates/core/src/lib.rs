//! Simulator and analysis toolkit for a frequency-division-multiplexed
//! CW-ODMR magnetometer with several NV ensembles read by one photodetector.
//!
//! The pipeline runs from ensemble physics and the bias/noise field model,
//! through photocurrent synthesis and digital lock-in demodulation, to the
//! frequency-locking servos and offline analysis.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod error;
pub mod field;
pub mod filter;
pub mod model;
pub mod physics;
pub mod scenario;
pub mod servo;
pub mod signal;

pub use config::{parse_config, serialize_config, ChannelConfig, RunConfig, DEFAULT_CONFIG_TOML};
pub use error::{Error, Result};
pub use model::{PhysicalConstants, Spectrum, SpectrumKind, TimeSeries, Unit};
pub use scenario::{ScenarioKind, ScenarioResult};
