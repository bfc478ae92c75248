//! Bias field (permanent magnet plus series coil pair), coil calibration and
//! the environmental magnetic-noise generator.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{seeded_stream, streams, NoiseRng, PhysicalConstants, TimeSeries, Unit};

const MU0: f64 = 4e-7 * PI;

/// Half width of the modeled region along x, mm.
pub const FIELD_RANGE_MM: f64 = 5.0;

/// Axial bias profile: quadratic magnet stand-in plus two on-axis current loops
/// driven in series with opposite polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasFieldModel {
    /// Magnet field at x = 0, T.
    pub magnet_center_t: f64,
    /// Quadratic coefficient of the magnet profile, T/mm².
    pub magnet_curvature_t_per_mm2: f64,
    pub coil_positions_mm: [f64; 2],
    pub coil_radius_mm: f64,
    pub coil_turns: f64,
    pub coil_polarity: [f64; 2],
    pub series_current_a: f64,
    /// Field-to-current ratio at each diamond, T/A. Overrides the geometry for
    /// per-channel arithmetic.
    pub calibration_t_per_a: Vec<f64>,
}

impl Default for BiasFieldModel {
    fn default() -> Self {
        Self {
            magnet_center_t: 1e-3,
            magnet_curvature_t_per_mm2: 0.5e-6,
            // Solved so the profile is flat at x = ±1.8 mm (see solve_coil_positions).
            coil_positions_mm: [-1.542_053_49, 1.833_482_65],
            coil_radius_mm: 2.0,
            coil_turns: 2.0,
            coil_polarity: [1.0, -1.0],
            series_current_a: 33.6e-3,
            calibration_t_per_a: vec![0.60e-3, -0.65e-3],
        }
    }
}

impl BiasFieldModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.coil_radius_mm > 0.0) || !(self.coil_turns > 0.0) {
            return Err(Error::Validation("coil radius and turns must be positive".into()));
        }
        if self.coil_polarity[0] * self.coil_polarity[1] >= 0.0 {
            return Err(Error::Validation(
                "coil polarities must have opposite signs".into(),
            ));
        }
        CoilCalibration::new(self.calibration_t_per_a.clone())?;
        Ok(())
    }

    pub fn magnet_field_t(&self, x_mm: f64) -> f64 {
        self.magnet_center_t + self.magnet_curvature_t_per_mm2 * x_mm * x_mm
    }

    /// Coil-pair field per ampere of series current at `x_mm`, T/A.
    pub fn coil_field_per_amp(&self, x_mm: f64) -> f64 {
        let r = self.coil_radius_mm * 1e-3;
        self.coil_positions_mm
            .iter()
            .zip(&self.coil_polarity)
            .map(|(c, p)| {
                let d = (x_mm - c) * 1e-3;
                p * MU0 * self.coil_turns * r * r / (2.0 * (r * r + d * d).powf(1.5))
            })
            .sum()
    }

    pub fn calibration(&self) -> Result<CoilCalibration> {
        CoilCalibration::new(self.calibration_t_per_a.clone())
    }

    /// Bias seen by channel `index` (0-based) at `x_mm`: geometric magnet
    /// profile plus the calibrated coil response to the series current.
    pub fn channel_bias_t(&self, index: usize, x_mm: f64) -> Result<f64> {
        check_range(x_mm)?;
        let k = self
            .calibration_t_per_a
            .get(index)
            .ok_or(Error::UnknownChannel(index as u32 + 1))?;
        Ok(self.magnet_field_t(x_mm) + k * self.series_current_a)
    }
}

fn check_range(x_mm: f64) -> Result<()> {
    if !(x_mm.abs() <= FIELD_RANGE_MM) {
        return Err(Error::Range(format!(
            "position {x_mm} mm outside the modeled range ±{FIELD_RANGE_MM} mm"
        )));
    }
    Ok(())
}

/// Total axial bias from the geometric model at `x_mm`.
pub fn bias_field_at(x_mm: f64, model: &BiasFieldModel) -> Result<f64> {
    check_range(x_mm)?;
    Ok(model.magnet_field_t(x_mm) + model.series_current_a * model.coil_field_per_amp(x_mm))
}

/// Solves for the two coil centers that make dB/dx vanish at both `diamonds_mm`
/// when `current_a` flows, by Newton iteration on finite-difference gradients.
pub fn solve_coil_positions(
    model: &BiasFieldModel,
    diamonds_mm: [f64; 2],
    current_a: f64,
) -> Result<[f64; 2]> {
    let h = 1e-4;
    let gradient = |c: [f64; 2], x: f64| {
        let m = BiasFieldModel {
            coil_positions_mm: c,
            series_current_a: current_a,
            ..model.clone()
        };
        let b = |x: f64| m.magnet_field_t(x) + current_a * m.coil_field_per_amp(x);
        (b(x + h) - b(x - h)) / (2.0 * h)
    };
    let residual = |c: [f64; 2]| [gradient(c, diamonds_mm[0]), gradient(c, diamonds_mm[1])];

    let mut c = diamonds_mm;
    for _ in 0..100 {
        let r = residual(c);
        if r[0].abs().max(r[1].abs()) < 1e-15 {
            return Ok(c);
        }
        let step = 1e-6;
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut cp = c;
            cp[j] += step;
            let rp = residual(cp);
            for i in 0..2 {
                jac[i][j] = (rp[i] - r[i]) / step;
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 {
            return Err(Error::Fit("singular Jacobian in coil placement".into()));
        }
        let dx0 = (jac[1][1] * r[0] - jac[0][1] * r[1]) / det;
        let dx1 = (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det;
        c = [c[0] - dx0, c[1] - dx1];
        if dx0.abs().max(dx1.abs()) < 1e-12 {
            return Ok(c);
        }
    }
    Err(Error::Fit("coil placement did not converge".into()))
}

/// Per-channel field-to-current ratios, T/A.
#[derive(Debug, Clone, PartialEq)]
pub struct CoilCalibration {
    k_per_channel: Vec<f64>,
}

impl CoilCalibration {
    pub fn new(k_per_channel: Vec<f64>) -> Result<Self> {
        if k_per_channel.len() < 2 {
            return Err(Error::Validation(
                "coil calibration needs a constant for each of the two channels".into(),
            ));
        }
        if k_per_channel[0] * k_per_channel[1] >= 0.0 {
            return Err(Error::Validation(
                "coil calibration constants must have opposite signs".into(),
            ));
        }
        Ok(Self { k_per_channel })
    }

    pub fn k_per_channel(&self) -> &[f64] {
        &self.k_per_channel
    }
}

impl Default for CoilCalibration {
    fn default() -> Self {
        Self {
            k_per_channel: vec![0.60e-3, -0.65e-3],
        }
    }
}

/// Field produced at channel `channel` (1-based id) by coil current `i_a`.
pub fn coil_field_from_current(i_a: f64, channel: u32, cal: &CoilCalibration) -> Result<f64> {
    let k = channel
        .checked_sub(1)
        .and_then(|i| cal.k_per_channel.get(i as usize))
        .ok_or(Error::UnknownChannel(channel))?;
    Ok(k * i_a)
}

/// Coil constant from a least-squares line through (current, |+1>-|-1> splitting).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeemanCalibration {
    pub k_t_per_a: f64,
    pub std_error_t_per_a: f64,
}

pub fn calibrate_coils_by_zeeman(
    splitting_vs_current: &[(f64, f64)],
    constants: &PhysicalConstants,
) -> Result<ZeemanCalibration> {
    let n = splitting_vs_current.len();
    if n < 2 {
        return Err(Error::Fit("need at least two (current, splitting) points".into()));
    }
    let nf = n as f64;
    let mx = splitting_vs_current.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = splitting_vs_current.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = splitting_vs_current.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("currents are all identical".into()));
    }
    let sxy: f64 = splitting_vs_current.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let se = if n > 2 {
        let intercept = my - slope * mx;
        let ssr: f64 = splitting_vs_current
            .iter()
            .map(|p| (p.1 - intercept - slope * p.0).powi(2))
            .sum();
        (ssr / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    let scale = 2.0 * constants.gamma_e_hz_per_t;
    Ok(ZeemanCalibration {
        k_t_per_a: slope / scale,
        std_error_t_per_a: se / scale,
    })
}

/// Narrowband environmental tone with a phase random walk of Lorentzian width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinePeak {
    pub frequency_hz: f64,
    pub amplitude_t_rms: f64,
    #[serde(default)]
    pub width_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub env_white_floor_t_per_rthz: f64,
    /// Pink amplitude spectral density at 1 Hz, T/√Hz.
    pub env_pink_amplitude_t_per_rthz: f64,
    pub env_pink_beta: f64,
    /// Knee above which the pink component rolls off as an extra 1/f².
    pub env_pink_corner_hz: f64,
    pub line_peaks: Vec<LinePeak>,
    pub common_mode_fraction: f64,
    /// Relative intensity noise of the laser before balanced detection, 1/√Hz.
    pub laser_rin_rel_per_rthz: f64,
    pub shot_noise_enabled: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::laboratory()
    }
}

impl NoiseModel {
    /// Stand-in for a laboratory environment: white floor, strong low-frequency
    /// pink noise and mains-like line peaks.
    pub fn laboratory() -> Self {
        let peak = |f: f64, a: f64| LinePeak {
            frequency_hz: f,
            amplitude_t_rms: a,
            width_hz: 0.05,
        };
        Self {
            env_white_floor_t_per_rthz: 15e-12,
            env_pink_amplitude_t_per_rthz: 580e-12,
            env_pink_beta: 1.0,
            env_pink_corner_hz: 25.0,
            line_peaks: vec![
                peak(50.0, 200e-12),
                peak(90.0, 60e-12),
                peak(100.0, 80e-12),
                peak(150.0, 120e-12),
                peak(200.0, 60e-12),
                peak(250.0, 50e-12),
            ],
            common_mode_fraction: 1.0,
            laser_rin_rel_per_rthz: 3.3e-7,
            shot_noise_enabled: true,
        }
    }

    /// No noise of any kind.
    pub fn quiet() -> Self {
        Self {
            env_white_floor_t_per_rthz: 0.0,
            env_pink_amplitude_t_per_rthz: 0.0,
            env_pink_beta: 1.0,
            env_pink_corner_hz: 25.0,
            line_peaks: Vec::new(),
            common_mode_fraction: 1.0,
            laser_rin_rel_per_rthz: 0.0,
            shot_noise_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let amplitudes = [
            self.env_white_floor_t_per_rthz,
            self.env_pink_amplitude_t_per_rthz,
            self.laser_rin_rel_per_rthz,
        ];
        if amplitudes.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Validation("noise amplitudes must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.common_mode_fraction) {
            return Err(Error::Validation(
                "common_mode_fraction must lie in [0, 1]".into(),
            ));
        }
        if !(self.env_pink_corner_hz > 0.0) || !self.env_pink_beta.is_finite() {
            return Err(Error::Validation(
                "env_pink_corner_hz must be > 0 and env_pink_beta finite".into(),
            ));
        }
        for p in &self.line_peaks {
            if !(p.frequency_hz > 0.0) || !(p.amplitude_t_rms >= 0.0) || !(p.width_hz >= 0.0) {
                return Err(Error::Validation(format!(
                    "line peak at {} Hz: frequency must be > 0, amplitude and width >= 0",
                    p.frequency_hz
                )));
            }
        }
        Ok(())
    }

    pub fn has_environment(&self) -> bool {
        self.env_white_floor_t_per_rthz > 0.0
            || self.env_pink_amplitude_t_per_rthz > 0.0
            || self.line_peaks.iter().any(|p| p.amplitude_t_rms > 0.0)
    }

    /// One-sided PSD of the white-plus-pink part, T²/Hz.
    pub fn broadband_psd(&self, f_hz: f64) -> f64 {
        let white = self.env_white_floor_t_per_rthz.powi(2);
        let pink = if self.env_pink_amplitude_t_per_rthz > 0.0 && f_hz > 0.0 {
            self.env_pink_amplitude_t_per_rthz.powi(2) * f_hz.powf(-self.env_pink_beta)
                / (1.0 + (f_hz / self.env_pink_corner_hz).powi(2))
        } else {
            0.0
        };
        white + pink
    }
}

/// One realization of the environmental field.
///
/// The broadband part is white Gaussian noise shaped in the frequency domain
/// to the model PSD; the line peaks are added in the time domain.
pub fn generate_environmental_noise(
    duration_s: f64,
    rate_hz: f64,
    model: &NoiseModel,
    stream: &mut NoiseRng,
) -> Result<TimeSeries> {
    model.validate()?;
    let n = (duration_s * rate_hz).round() as usize;
    if n == 0 {
        return Err(Error::Config(format!(
            "duration {duration_s} s at {rate_hz} Hz yields no samples"
        )));
    }
    if let Some(p) = model
        .line_peaks
        .iter()
        .find(|p| !(rate_hz > 2.0 * p.frequency_hz))
    {
        return Err(Error::Config(format!(
            "sample rate {rate_hz} Hz too low for the {} Hz line peak",
            p.frequency_hz
        )));
    }

    let mut samples = vec![0.0; n];
    let dt = 1.0 / rate_hz;

    let broadband = model.env_white_floor_t_per_rthz > 0.0 || model.env_pink_amplitude_t_per_rthz > 0.0;
    if broadband {
        let mut spectrum: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(stream.sample(StandardNormal), 0.0))
            .collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut spectrum);
        // Unit-variance white noise has one-sided PSD 2/rate.
        let f_min = 1.0 / (n as f64 * dt);
        for (k, bin) in spectrum.iter_mut().enumerate() {
            if k == 0 {
                *bin = Complex64::new(0.0, 0.0);
                continue;
            }
            let kk = k.min(n - k) as f64;
            let f = (kk * rate_hz / n as f64).max(f_min);
            *bin *= (model.broadband_psd(f) * rate_hz / 2.0).sqrt();
        }
        planner.plan_fft_inverse(n).process(&mut spectrum);
        let norm = 1.0 / n as f64;
        for (s, c) in samples.iter_mut().zip(&spectrum) {
            *s += c.re * norm;
        }
    }

    for peak in &model.line_peaks {
        let phase0: f64 = stream.random::<f64>() * 2.0 * PI;
        if peak.amplitude_t_rms == 0.0 {
            continue;
        }
        let amp = peak.amplitude_t_rms * 2f64.sqrt();
        let sigma_phi = (2.0 * PI * peak.width_hz * dt).sqrt();
        let mut jitter = 0.0;
        for (i, s) in samples.iter_mut().enumerate() {
            *s += amp * (2.0 * PI * peak.frequency_hz * i as f64 * dt + phase0 + jitter).cos();
            if sigma_phi > 0.0 {
                let step: f64 = stream.sample(StandardNormal);
                jitter += sigma_phi * step;
            }
        }
    }

    TimeSeries::new(rate_hz, samples, Unit::Tesla)
}

/// Environmental field of every channel:
/// `c · common + (1 − c) · independent_i` with `c = common_mode_fraction`.
pub fn channel_environment(
    seed: u64,
    n_channels: usize,
    duration_s: f64,
    rate_hz: f64,
    model: &NoiseModel,
) -> Result<Vec<TimeSeries>> {
    let n = (duration_s * rate_hz).round() as usize;
    if !model.has_environment() {
        return (0..n_channels)
            .map(|_| TimeSeries::zeros(rate_hz, n.max(1), Unit::Tesla))
            .collect();
    }
    let c = model.common_mode_fraction;
    let common = if c > 0.0 {
        Some(generate_environmental_noise(
            duration_s,
            rate_hz,
            model,
            &mut seeded_stream(seed, streams::ENV_COMMON),
        )?)
    } else {
        None
    };
    (0..n_channels)
        .map(|i| {
            let mut out = vec![0.0; n];
            if let Some(common) = &common {
                out.iter_mut()
                    .zip(common.samples())
                    .for_each(|(o, v)| *o += c * v);
            }
            if c < 1.0 {
                let local = generate_environmental_noise(
                    duration_s,
                    rate_hz,
                    model,
                    &mut seeded_stream(seed, streams::ENV_LOCAL_BASE + i as u64),
                )?;
                out.iter_mut()
                    .zip(local.samples())
                    .for_each(|(o, v)| *o += (1.0 - c) * v);
            }
            TimeSeries::new(rate_hz, out, Unit::Tesla)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_stream;

    fn profile_peak_to_peak(model: &BiasFieldModel) -> f64 {
        let xs = (0..=2000).map(|i| -FIELD_RANGE_MM + i as f64 * 2.0 * FIELD_RANGE_MM / 2000.0);
        let values: Vec<f64> = xs.map(|x| bias_field_at(x, model).unwrap()).collect();
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }

    #[test]
    fn magnet_only_profile_near_one_millitesla() {
        let m = BiasFieldModel {
            series_current_a: 0.0,
            ..Default::default()
        };
        let b = bias_field_at(0.0, &m).unwrap();
        assert!((b - 1e-3).abs() < 1e-5);
        assert!((bias_field_at(1.8, &m).unwrap() - m.magnet_field_t(1.8)).abs() < 1e-18);
    }

    #[test]
    fn default_geometry_flat_at_diamonds() {
        let m = BiasFieldModel {
            series_current_a: 25e-3,
            ..Default::default()
        };
        let pp = profile_peak_to_peak(&m);
        let h = 1e-4;
        for x in [-1.8, 1.8] {
            let d = (bias_field_at(x + h, &m).unwrap() - bias_field_at(x - h, &m).unwrap()) / (2.0 * h);
            assert!(d.abs() < 1e-3 * pp, "dB/dx {d} at {x}, pp {pp}");
        }
    }

    #[test]
    fn solver_reproduces_default_positions() {
        let m = BiasFieldModel::default();
        let c = solve_coil_positions(&m, [-1.8, 1.8], 25e-3).unwrap();
        assert!((c[0] - m.coil_positions_mm[0]).abs() < 1e-6);
        assert!((c[1] - m.coil_positions_mm[1]).abs() < 1e-6);
    }

    #[test]
    fn coil_contributions_have_opposite_signs_at_diamonds() {
        let m = BiasFieldModel::default();
        assert!(m.coil_field_per_amp(-1.8) > 0.0);
        assert!(m.coil_field_per_amp(1.8) < 0.0);
    }

    #[test]
    fn flipped_polarity_negates_perturbation() {
        let m = BiasFieldModel::default();
        let flipped = BiasFieldModel {
            coil_polarity: [-1.0, 1.0],
            ..m.clone()
        };
        let base = BiasFieldModel {
            series_current_a: 0.0,
            ..m.clone()
        };
        for i in 0..=20 {
            let x = -5.0 + 0.5 * i as f64;
            let p = bias_field_at(x, &m).unwrap() - bias_field_at(x, &base).unwrap();
            let q = bias_field_at(x, &flipped).unwrap() - bias_field_at(x, &base).unwrap();
            assert!((p + q).abs() < 1e-20);
        }
    }

    #[test]
    fn out_of_range_position() {
        assert!(matches!(
            bias_field_at(5.5, &BiasFieldModel::default()),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn default_bias_difference_is_42_microtesla() {
        let m = BiasFieldModel::default();
        let b1 = m.channel_bias_t(0, -1.8).unwrap();
        let b2 = m.channel_bias_t(1, 1.8).unwrap();
        assert!(((b1 - b2) - 42e-6).abs() < 1e-12);
    }

    #[test]
    fn coil_field_examples() {
        let cal = CoilCalibration::default();
        assert!((coil_field_from_current(25e-3, 1, &cal).unwrap() - 15.0e-6).abs() < 1e-15);
        assert!((coil_field_from_current(25e-3, 2, &cal).unwrap() + 16.25e-6).abs() < 1e-15);
        assert_eq!(coil_field_from_current(0.0, 1, &cal).unwrap(), 0.0);
        assert!(matches!(
            coil_field_from_current(1e-3, 3, &cal),
            Err(Error::UnknownChannel(3))
        ));
        assert!(coil_field_from_current(1e-3, 0, &cal).is_err());
        assert!(CoilCalibration::new(vec![1e-3, 2e-3]).is_err());
    }

    fn synthetic_splittings(k: f64, sigma: f64, rng: &mut NoiseRng) -> Vec<(f64, f64)> {
        let g = PhysicalConstants::default().gamma_e_hz_per_t;
        (0..10)
            .map(|i| {
                let i_a = i as f64 * 50e-3 / 9.0;
                let noise: f64 = rng.sample(StandardNormal);
                (i_a, 2.0 * g * (1e-3 + k * i_a) + sigma * noise)
            })
            .collect()
    }

    #[test]
    fn zeeman_calibration_exact() {
        let c = PhysicalConstants::default();
        let mut rng = seeded_stream(1, 0);
        let data = synthetic_splittings(0.60e-3, 0.0, &mut rng);
        let cal = calibrate_coils_by_zeeman(&data, &c).unwrap();
        assert!(((cal.k_t_per_a - 0.60e-3) / 0.60e-3).abs() < 1e-12);
        let negated: Vec<(f64, f64)> = data.iter().map(|(i, s)| (*i, -s)).collect();
        let neg = calibrate_coils_by_zeeman(&negated, &c).unwrap();
        assert!((neg.k_t_per_a + cal.k_t_per_a).abs() < 1e-15);
    }

    #[test]
    fn zeeman_calibration_monte_carlo() {
        let c = PhysicalConstants::default();
        let trials = 1000;
        let mut within = 0;
        for t in 0..trials {
            let mut rng = seeded_stream(7, streams::USER_BASE + t);
            let data = synthetic_splittings(0.60e-3, 1e3, &mut rng);
            let cal = calibrate_coils_by_zeeman(&data, &c).unwrap();
            if (cal.k_t_per_a - 0.60e-3).abs() < 3.0 * cal.std_error_t_per_a {
                within += 1;
            }
        }
        // 3 sigma with a t-distributed estimate: expect about 98 %.
        assert!(within as f64 / trials as f64 > 0.96, "{within}");
    }

    #[test]
    fn zeeman_calibration_rejects_degenerate() {
        let c = PhysicalConstants::default();
        assert!(calibrate_coils_by_zeeman(&[(1.0, 2.0)], &c).is_err());
        assert!(calibrate_coils_by_zeeman(&[(1.0, 2.0), (1.0, 3.0)], &c).is_err());
    }

    #[test]
    fn zero_model_gives_zero_trace() {
        let model = NoiseModel {
            line_peaks: vec![LinePeak {
                frequency_hz: 50.0,
                amplitude_t_rms: 0.0,
                width_hz: 0.1,
            }],
            ..NoiseModel::quiet()
        };
        let ts = generate_environmental_noise(2.0, 1000.0, &model, &mut seeded_stream(1, 3)).unwrap();
        assert!(ts.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rate_must_exceed_twice_peak() {
        let model = NoiseModel::laboratory();
        assert!(matches!(
            generate_environmental_noise(1.0, 400.0, &model, &mut seeded_stream(1, 3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generator_is_deterministic() {
        let model = NoiseModel::laboratory();
        let a = generate_environmental_noise(1.0, 1000.0, &model, &mut seeded_stream(5, 3)).unwrap();
        let b = generate_environmental_noise(1.0, 1000.0, &model, &mut seeded_stream(5, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn white_floor_variance() {
        let model = NoiseModel {
            env_white_floor_t_per_rthz: 15e-12,
            ..NoiseModel::quiet()
        };
        let rate = 5000.0;
        let ts = generate_environmental_noise(20.0, rate, &model, &mut seeded_stream(2, 3)).unwrap();
        // one-sided density S → per-sample variance S² · rate / 2 (minus the zeroed DC bin)
        let expected = (15e-12f64).powi(2) * rate / 2.0;
        assert!((ts.variance() / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn common_mode_mixing() {
        let model = NoiseModel {
            env_white_floor_t_per_rthz: 10e-12,
            ..NoiseModel::quiet()
        };
        let full = channel_environment(3, 2, 1.0, 1000.0, &model).unwrap();
        assert_eq!(full[0], full[1]);
        let none = channel_environment(
            3,
            2,
            1.0,
            1000.0,
            &NoiseModel {
                common_mode_fraction: 0.0,
                ..model.clone()
            },
        )
        .unwrap();
        assert_ne!(none[0], none[1]);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bias_is_linear_in_series_current(x in -5.0f64..5.0, i in -0.1f64..0.1, a in -4.0f64..4.0) {
                let at = |current: f64| {
                    bias_field_at(x, &BiasFieldModel { series_current_a: current, ..Default::default() }).unwrap()
                };
                let lhs = at(a * i) - at(0.0);
                let rhs = a * (at(i) - at(0.0));
                prop_assert!((lhs - rhs).abs() <= 1e-15);
            }
        }
    }
}
