//! Run configuration: TOML schema, defaults and validation.
//!
//! Every section is optional except `[[channels]]`. Unknown keys are rejected
//! and parse errors carry the dotted path of the offending key.

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::error::{Error, Result};
use crate::field::{BiasFieldModel, NoiseModel};
use crate::model::PhysicalConstants;
use crate::physics::{EnsembleConfig, Transition};
use crate::scenario::{BandwidthSettings, CalibrateSettings, SweepSettings};
use crate::servo::ServoConfig;
use crate::signal::{CrosstalkSettings, DetectorModel, LockInSettings, MwChannelState};

/// Spacing between neighboring diamonds when positions are omitted, mm.
pub const DEFAULT_CHANNEL_SPACING_MM: f64 = 3.6;

/// The built-in two-channel configuration used by `--config default`.
pub const DEFAULT_CONFIG_TOML: &str = r#"# Two NV ensembles 3.6 mm apart, multiplexed at 7.5 kHz and 10 kHz.
seed = 42
duration_s = 100.0

[[channels]]
mod_frequency_hz = 7500.0

[[channels]]
mod_frequency_hz = 10000.0
"#;

/// One multiplexed channel: the ensemble plus its microwave modulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelConfig {
    #[serde(flatten)]
    pub ensemble: EnsembleConfig,
    pub mod_frequency_hz: f64,
    pub mod_deviation_hz: f64,
    pub mod_phase_rad: f64,
}

impl ChannelConfig {
    pub fn id(&self) -> u32 {
        self.ensemble.id
    }

    /// Microwave state with the carrier parked at `center_hz`.
    pub fn mw_state(&self, center_hz: f64) -> MwChannelState {
        MwChannelState {
            center_frequency_hz: center_hz,
            mod_frequency_hz: self.mod_frequency_hz,
            mod_deviation_hz: self.mod_deviation_hz,
            mod_phase_rad: self.mod_phase_rad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub decimated_rate_hz: f64,
    pub duration_s: f64,
    pub constants: PhysicalConstants,
    pub bias: BiasFieldModel,
    pub detector: DetectorModel,
    pub lockin: LockInSettings,
    pub noise: NoiseModel,
    pub analysis: AnalysisConfig,
    pub sweep: SweepSettings,
    pub calibrate: CalibrateSettings,
    pub bandwidth: BandwidthSettings,
    pub crosstalk: CrosstalkSettings,
    pub channels: Vec<ChannelConfig>,
    pub servo: Vec<ServoConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    id: Option<u32>,
    position_mm: Option<f64>,
    mod_frequency_hz: f64,
    mod_deviation_hz: Option<f64>,
    #[serde(default)]
    mod_phase_rad: f64,
    contrast_per_line: Option<f64>,
    fwhm_hz: Option<f64>,
    hyperfine_splitting_hz: Option<f64>,
    baseline_photocurrent_a: Option<f64>,
    t2_star_s: Option<f64>,
    three_tone: Option<bool>,
    transition: Option<Transition>,
}

fn default_seed() -> u64 {
    42
}
fn default_sample_rate() -> f64 {
    100e3
}
fn default_decimated_rate() -> f64 {
    5e3
}
fn default_duration() -> f64 {
    100.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_sample_rate")]
    sample_rate_hz: f64,
    #[serde(default = "default_decimated_rate")]
    decimated_rate_hz: f64,
    #[serde(default = "default_duration")]
    duration_s: f64,
    #[serde(default)]
    constants: PhysicalConstants,
    #[serde(default)]
    bias: BiasFieldModel,
    #[serde(default)]
    detector: DetectorModel,
    #[serde(default)]
    lockin: LockInSettings,
    #[serde(default)]
    noise: NoiseModel,
    #[serde(default)]
    analysis: AnalysisConfig,
    #[serde(default)]
    sweep: SweepSettings,
    #[serde(default)]
    calibrate: CalibrateSettings,
    #[serde(default)]
    bandwidth: BandwidthSettings,
    #[serde(default)]
    crosstalk: CrosstalkSettings,
    channels: Vec<RawChannel>,
    servo: Option<Vec<ServoConfig>>,
}

impl RawConfig {
    fn into_run_config(self) -> Result<RunConfig> {
        let n = self.channels.len();
        let defaults = EnsembleConfig::default();
        let channels: Vec<ChannelConfig> = self
            .channels
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let fwhm_hz = c.fwhm_hz.unwrap_or(defaults.fwhm_hz);
                ChannelConfig {
                    ensemble: EnsembleConfig {
                        id: c.id.unwrap_or(i as u32 + 1),
                        position_mm: c.position_mm.unwrap_or(
                            (i as f64 - (n as f64 - 1.0) / 2.0) * DEFAULT_CHANNEL_SPACING_MM,
                        ),
                        contrast_per_line: c.contrast_per_line.unwrap_or(defaults.contrast_per_line),
                        fwhm_hz,
                        hyperfine_splitting_hz: c
                            .hyperfine_splitting_hz
                            .unwrap_or(defaults.hyperfine_splitting_hz),
                        baseline_photocurrent_a: c
                            .baseline_photocurrent_a
                            .unwrap_or(defaults.baseline_photocurrent_a),
                        t2_star_s: Some(c.t2_star_s.unwrap_or(4.6e-6)),
                        three_tone: c.three_tone.unwrap_or(defaults.three_tone),
                        transition: c.transition.unwrap_or_default(),
                    },
                    mod_frequency_hz: c.mod_frequency_hz,
                    mod_deviation_hz: c.mod_deviation_hz.unwrap_or(fwhm_hz / 2.0),
                    mod_phase_rad: c.mod_phase_rad,
                }
            })
            .collect();
        let servo = self
            .servo
            .unwrap_or_else(|| vec![ServoConfig::default(); channels.len()]);
        let cfg = RunConfig {
            seed: self.seed,
            sample_rate_hz: self.sample_rate_hz,
            decimated_rate_hz: self.decimated_rate_hz,
            duration_s: self.duration_s,
            constants: self.constants,
            bias: self.bias,
            detector: self.detector,
            lockin: self.lockin,
            noise: self.noise,
            analysis: self.analysis,
            sweep: self.sweep,
            calibrate: self.calibrate,
            bandwidth: self.bandwidth,
            crosstalk: self.crosstalk,
            channels,
            servo,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses and validates a TOML run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse {
        path: String::new(),
        message: e.to_string(),
    })?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    raw.into_run_config()
}

/// Serializes a configuration back to TOML; the output parses to an equal value.
pub fn serialize_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Serialize(e.to_string()))
}

impl RunConfig {
    /// The built-in two-channel configuration.
    pub fn reference() -> Self {
        parse_config(DEFAULT_CONFIG_TOML).expect("built-in configuration is valid")
    }

    /// Raw samples per decimated sample.
    pub fn decimation(&self) -> usize {
        (self.sample_rate_hz / self.decimated_rate_hz).round() as usize
    }

    pub fn channel_index(&self, id: u32) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c.id() == id)
            .ok_or(Error::UnknownChannel(id))
    }

    /// Total bias field at channel `index`.
    pub fn channel_bias_t(&self, index: usize) -> Result<f64> {
        let ch = self
            .channels
            .get(index)
            .ok_or(Error::UnknownChannel(index as u32 + 1))?;
        self.bias.channel_bias_t(index, ch.ensemble.position_mm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Validation("at least one channel is required".into()));
        }
        self.constants.validate()?;
        self.noise.validate()?;
        self.detector.validate()?;
        self.lockin.validate()?;
        self.analysis.validate()?;
        self.sweep.validate()?;
        self.calibrate.validate()?;
        self.bandwidth.validate()?;
        self.crosstalk.validate()?;
        if !(self.sample_rate_hz > 0.0) || !(self.decimated_rate_hz > 0.0) {
            return Err(Error::Validation("sample rates must be positive".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Validation("duration_s must be positive".into()));
        }
        for (i, ch) in self.channels.iter().enumerate() {
            ch.ensemble.validate()?;
            if !(ch.mod_frequency_hz > 0.0) {
                return Err(Error::Validation(format!(
                    "channel {}: mod_frequency_hz must be > 0",
                    ch.id()
                )));
            }
            if !(ch.mod_deviation_hz >= 0.0) {
                return Err(Error::Validation(format!(
                    "channel {}: mod_deviation_hz must be >= 0",
                    ch.id()
                )));
            }
            if ch.mod_frequency_hz <= self.lockin.lpf_cutoff_hz {
                return Err(Error::Validation(format!(
                    "channel {}: lock-in cutoff {} Hz must lie below the reference {} Hz",
                    ch.id(),
                    self.lockin.lpf_cutoff_hz,
                    ch.mod_frequency_hz
                )));
            }
            if self.channels[..i].iter().any(|o| o.id() == ch.id()) {
                return Err(Error::Validation(format!("duplicate channel id {}", ch.id())));
            }
        }
        let max_mod = self
            .channels
            .iter()
            .map(|c| c.mod_frequency_hz)
            .fold(0.0, f64::max);
        if self.sample_rate_hz < 10.0 * max_mod {
            return Err(Error::Validation(format!(
                "sample_rate_hz {} must be at least 10 x the highest modulation frequency {} Hz",
                self.sample_rate_hz, max_mod
            )));
        }
        let ratio = self.sample_rate_hz / self.decimated_rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio || ratio.round() < 1.0 {
            return Err(Error::Validation(format!(
                "decimated_rate_hz {} must divide sample_rate_hz {}",
                self.decimated_rate_hz, self.sample_rate_hz
            )));
        }
        if self.decimated_rate_hz < 2.0 * self.lockin.lpf_cutoff_hz {
            return Err(Error::Validation(format!(
                "decimated_rate_hz {} must be at least 2 x the lock-in cutoff {} Hz",
                self.decimated_rate_hz, self.lockin.lpf_cutoff_hz
            )));
        }
        for (i, a) in self.channels.iter().enumerate() {
            for b in &self.channels[i + 1..] {
                if a.mod_frequency_hz == b.mod_frequency_hz {
                    return Err(Error::Validation(format!(
                        "modulation frequencies must be pairwise distinct: channels {} and {} both use {} Hz",
                        a.id(),
                        b.id(),
                        a.mod_frequency_hz
                    )));
                }
            }
        }
        self.bias.validate()?;
        if self.bias.calibration_t_per_a.len() < self.channels.len() {
            return Err(Error::Validation(format!(
                "bias.calibration_t_per_a has {} entries for {} channels",
                self.bias.calibration_t_per_a.len(),
                self.channels.len()
            )));
        }
        if self.servo.len() != self.channels.len() {
            return Err(Error::Validation(format!(
                "{} servo sections for {} channels",
                self.servo.len(),
                self.channels.len()
            )));
        }
        for s in &self.servo {
            s.validate()?;
        }
        for i in 0..self.channels.len() {
            let b = self.channel_bias_t(i)?;
            crate::physics::resonance_center(
                b,
                &self.constants,
                self.channels[i].ensemble.transition,
            )?;
        }
        Ok(())
    }
}
