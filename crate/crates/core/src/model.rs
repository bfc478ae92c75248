//! Shared semantic types: sampled traces, spectra, physical constants and the
//! deterministic random-stream contract used by every noise source.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical unit attached to a [`TimeSeries`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Ampere,
    Volt,
    Tesla,
    Dimensionless,
}

/// Uniformly sampled scalar trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    sample_rate_hz: f64,
    samples: Vec<f64>,
    unit: Unit,
}

impl TimeSeries {
    pub fn new(sample_rate_hz: f64, samples: Vec<f64>, unit: Unit) -> Result<Self> {
        if !(sample_rate_hz > 0.0) || !sample_rate_hz.is_finite() {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if samples.is_empty() {
            return Err(Error::Size("time series needs at least one sample".into()));
        }
        Ok(Self {
            sample_rate_hz,
            samples,
            unit,
        })
    }

    /// All-zero trace of `len` samples.
    pub fn zeros(sample_rate_hz: f64, len: usize, unit: Unit) -> Result<Self> {
        Self::new(sample_rate_hz, vec![0.0; len], unit)
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Population variance (mean of squared deviations).
    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.samples.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn rms(&self) -> f64 {
        (self.samples.iter().map(|v| v * v).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Same rate and unit, different samples.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(self.sample_rate_hz, samples, self.unit)
    }

    /// Drops the first `seconds` of the trace.
    pub fn skip_seconds(&self, seconds: f64) -> Result<Self> {
        let skip = (seconds * self.sample_rate_hz).round() as usize;
        if skip >= self.samples.len() {
            return Err(Error::Size(format!(
                "cannot discard {seconds} s from a {} s trace",
                self.duration_s()
            )));
        }
        self.with_samples(self.samples[skip..].to_vec())
    }

    /// Scales every sample by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            sample_rate_hz: self.sample_rate_hz,
            samples: self.samples.iter().map(|v| v * factor).collect(),
            unit: self.unit,
        }
    }

    pub fn ensure_compatible(&self, other: &TimeSeries) -> Result<()> {
        if self.sample_rate_hz != other.sample_rate_hz || self.len() != other.len() {
            return Err(Error::Size(format!(
                "traces differ: {} samples @ {} Hz vs {} samples @ {} Hz",
                self.len(),
                self.sample_rate_hz,
                other.len(),
                other.sample_rate_hz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    SingleSidedAsd,
    SingleSidedPsd,
    TransferMagnitude,
    /// Signed demodulated response against microwave frequency.
    LockInResponse,
}

/// Values sampled on an ascending frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    frequencies_hz: Vec<f64>,
    values: Vec<f64>,
    kind: SpectrumKind,
}

impl Spectrum {
    pub fn new(frequencies_hz: Vec<f64>, values: Vec<f64>, kind: SpectrumKind) -> Result<Self> {
        if frequencies_hz.len() != values.len() {
            return Err(Error::Size(format!(
                "{} frequencies but {} values",
                frequencies_hz.len(),
                values.len()
            )));
        }
        if frequencies_hz.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Validation("spectrum frequencies must be nonnegative".into()));
        }
        if frequencies_hz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "spectrum frequencies must be strictly increasing".into(),
            ));
        }
        if kind == SpectrumKind::SingleSidedPsd && values.iter().any(|v| *v < 0.0) {
            return Err(Error::Validation("PSD values must be nonnegative".into()));
        }
        Ok(Self {
            frequencies_hz,
            values,
            kind,
        })
    }

    pub fn frequencies_hz(&self) -> &[f64] {
        &self.frequencies_hz
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> SpectrumKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bin spacing of a uniform grid (first two bins).
    pub fn resolution_hz(&self) -> f64 {
        match self.frequencies_hz.as_slice() {
            [a, b, ..] => b - a,
            _ => 0.0,
        }
    }

    /// Square root of a PSD; other kinds are returned unchanged.
    pub fn to_asd(&self) -> Spectrum {
        match self.kind {
            SpectrumKind::SingleSidedPsd => Spectrum {
                frequencies_hz: self.frequencies_hz.clone(),
                values: self.values.iter().map(|v| v.sqrt()).collect(),
                kind: SpectrumKind::SingleSidedAsd,
            },
            _ => self.clone(),
        }
    }

    /// Rectangle-rule integral of the values over `[lo, hi]` (inclusive bins).
    pub fn integrate(&self, lo_hz: f64, hi_hz: f64) -> f64 {
        let df = self.resolution_hz();
        self.frequencies_hz
            .iter()
            .zip(&self.values)
            .filter(|(f, _)| **f >= lo_hz && **f <= hi_hz)
            .map(|(_, v)| v * df)
            .sum()
    }
}

/// Constants of the NV ground-state spin Hamiltonian and the electron charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalConstants {
    /// Gyromagnetic ratio, Hz/T.
    pub gamma_e_hz_per_t: f64,
    /// Zero-field splitting D, Hz.
    pub zero_field_splitting_hz: f64,
    /// Elementary charge, C.
    pub electron_charge_c: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            gamma_e_hz_per_t: 28.024e9,
            zero_field_splitting_hz: 2.870e9,
            electron_charge_c: 1.602_176_634e-19,
        }
    }
}

impl PhysicalConstants {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.gamma_e_hz_per_t,
            self.zero_field_splitting_hz,
            self.electron_charge_c,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        if all_positive {
            Ok(())
        } else {
            Err(Error::Validation(
                "physical constants must be strictly positive".into(),
            ))
        }
    }
}

/// Random stream type handed to every noise consumer.
pub type NoiseRng = ChaCha12Rng;

/// Well-known stream ids. Each noise purpose draws from its own stream so that
/// enabling or disabling one source never perturbs another.
pub mod streams {
    /// Photodetector shot noise.
    pub const SHOT: u64 = 1;
    /// Laser relative intensity noise.
    pub const LASER_RIN: u64 = 2;
    /// Environmental field noise shared by all channels.
    pub const ENV_COMMON: u64 = 3;
    /// Environmental field noise local to a channel; add the channel index.
    pub const ENV_LOCAL_BASE: u64 = 100;
    /// Free for tests and Monte Carlo studies; add an offset.
    pub const USER_BASE: u64 = 1_000;
}

/// Deterministic random stream keyed by `(seed, stream_id)`.
///
/// ChaCha keystreams are platform independent, and distinct stream ids select
/// non-overlapping keystreams under the same key.
pub fn seeded_stream(seed: u64, stream_id: u64) -> NoiseRng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
