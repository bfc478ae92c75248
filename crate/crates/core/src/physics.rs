//! NV ensemble resonance structure and the CW-ODMR fluorescence response.
//!
//! The fluorescence of an ensemble is modeled as a sum of Lorentzian dips, one
//! per driven hyperfine line (or per comb/line overlap when a 3-tone comb is
//! used). Lock-in detection of a frequency-modulated drive picks out the first
//! Fourier coefficient of that lineshape, which is computed here by quadrature
//! so that large modulation deviations are handled exactly.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PhysicalConstants;

/// Largest axial field for which the linear Zeeman model is used.
pub const MAX_LINEAR_FIELD_T: f64 = 10e-3;

/// Electron-spin transition addressed by the microwave drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    #[default]
    ZeroToMinusOne,
    ZeroToPlusOne,
}

impl Transition {
    /// Sign of d(f_res)/dB: -1 for |0> <-> |-1>, +1 for |0> <-> |+1>.
    pub fn zeeman_sign(self) -> f64 {
        match self {
            Transition::ZeroToMinusOne => -1.0,
            Transition::ZeroToPlusOne => 1.0,
        }
    }
}

/// One NV ensemble as seen by its microwave channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub id: u32,
    /// Position along the x axis, mm (origin at the midpoint between diamonds).
    pub position_mm: f64,
    /// Dip depth of a single driven line, 0..1.
    pub contrast_per_line: f64,
    /// Full width at half maximum of each line, Hz.
    pub fwhm_hz: f64,
    /// 14N hyperfine splitting, Hz.
    pub hyperfine_splitting_hz: f64,
    /// Off-resonance photocurrent of this ensemble, A.
    pub baseline_photocurrent_a: f64,
    /// Dephasing time; metadata that bounds the linewidth from below.
    pub t2_star_s: Option<f64>,
    /// Drive all three hyperfine lines with a 3-tone comb.
    pub three_tone: bool,
    pub transition: Transition,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            id: 1,
            position_mm: 0.0,
            contrast_per_line: 0.01,
            fwhm_hz: 200e3,
            hyperfine_splitting_hz: 2.16e6,
            baseline_photocurrent_a: 1e-3,
            t2_star_s: Some(4.6e-6),
            three_tone: true,
            transition: Transition::ZeroToMinusOne,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let id = self.id;
        if !(self.contrast_per_line > 0.0 && self.contrast_per_line < 1.0) {
            return Err(Error::Validation(format!(
                "channel {id}: contrast_per_line must lie in (0, 1), got {}",
                self.contrast_per_line
            )));
        }
        if !(self.fwhm_hz > 0.0) {
            return Err(Error::Validation(format!("channel {id}: fwhm_hz must be > 0")));
        }
        if !(self.baseline_photocurrent_a > 0.0) {
            return Err(Error::Validation(format!(
                "channel {id}: baseline_photocurrent_a must be > 0"
            )));
        }
        if !(self.hyperfine_splitting_hz >= 0.0) {
            return Err(Error::Validation(format!(
                "channel {id}: hyperfine_splitting_hz must be >= 0"
            )));
        }
        if let Some(t2) = self.t2_star_s {
            if !(t2 > 0.0) {
                return Err(Error::Validation(format!("channel {id}: t2_star_s must be > 0")));
            }
            let limit = 1.0 / (PI * t2);
            if self.fwhm_hz < limit {
                return Err(Error::Validation(format!(
                    "channel {id}: fwhm_hz {} is below the T2* limit 1/(pi T2*) = {limit:.1} Hz",
                    self.fwhm_hz
                )));
            }
        }
        Ok(())
    }
}

/// Lines of one ensemble relative to its resonance center.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceSet {
    pub center_hz: f64,
    pub line_offsets_hz: Vec<f64>,
    pub line_weights: Vec<f64>,
}

impl ResonanceSet {
    /// Copy of the set moved to a new center.
    pub fn recentered(&self, center_hz: f64) -> Self {
        Self {
            center_hz,
            line_offsets_hz: self.line_offsets_hz.clone(),
            line_weights: self.line_weights.clone(),
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.line_weights.iter().sum()
    }

    /// Weight of the line sitting at the center, if any.
    pub fn central_weight(&self) -> f64 {
        self.line_offsets_hz
            .iter()
            .zip(&self.line_weights)
            .filter(|(o, _)| **o == 0.0)
            .map(|(_, w)| *w)
            .sum()
    }
}

/// Resonance frequency of the addressed transition for an axial field.
pub fn resonance_center(
    b_axial_t: f64,
    constants: &PhysicalConstants,
    transition: Transition,
) -> Result<f64> {
    if !(b_axial_t.abs() < MAX_LINEAR_FIELD_T) {
        return Err(Error::Range(format!(
            "axial field {b_axial_t} T outside the linear Zeeman range (|B| < {MAX_LINEAR_FIELD_T} T)"
        )));
    }
    Ok(constants.zero_field_splitting_hz
        + transition.zeeman_sign() * constants.gamma_e_hz_per_t * b_axial_t)
}

/// Lines produced when the ensemble is driven at `center_hz`.
///
/// A single tone sweeps across the three hyperfine lines. A 3-tone comb with
/// the hyperfine spacing overlaps the three lines in 1, 2, 3, 2, 1 ways, so its
/// response has five lines with those relative weights. Coincident offsets
/// (zero splitting) are merged into one line.
pub fn build_resonance_set(center_hz: f64, cfg: &EnsembleConfig) -> ResonanceSet {
    let a = cfg.hyperfine_splitting_hz;
    let c = cfg.contrast_per_line;
    let (offsets, weights): (Vec<f64>, Vec<f64>) = if cfg.three_tone {
        (
            vec![-2.0 * a, -a, 0.0, a, 2.0 * a],
            [1.0, 2.0, 3.0, 2.0, 1.0].iter().map(|m| m * c).collect(),
        )
    } else {
        (vec![-a, 0.0, a], vec![c; 3])
    };

    let mut merged_offsets: Vec<f64> = Vec::with_capacity(offsets.len());
    let mut merged_weights: Vec<f64> = Vec::with_capacity(offsets.len());
    for (o, w) in offsets.into_iter().zip(weights) {
        match merged_offsets.iter().position(|m| *m == o) {
            Some(i) => merged_weights[i] += w,
            None => {
                merged_offsets.push(o);
                merged_weights.push(w);
            }
        }
    }
    ResonanceSet {
        center_hz,
        line_offsets_hz: merged_offsets,
        line_weights: merged_weights,
    }
}

/// Smallest value returned by [`fluorescence_factor`].
const FLUORESCENCE_FLOOR: f64 = 1e-12;

/// Relative fluorescence at microwave frequency `f_mw`: one minus the sum of
/// Lorentzian dips, clamped to (0, 1].
pub fn fluorescence_factor(f_mw: f64, rs: &ResonanceSet, fwhm_hz: f64) -> f64 {
    let hw2 = (0.5 * fwhm_hz).powi(2);
    let dip: f64 = rs
        .line_offsets_hz
        .iter()
        .zip(&rs.line_weights)
        .map(|(o, w)| {
            let d = f_mw - (rs.center_hz + o);
            w * hw2 / (d * d + hw2)
        })
        .sum();
    (1.0 - dip).clamp(FLUORESCENCE_FLOOR, 1.0)
}

/// First Fourier (cosine) coefficient of the fluorescence under sinusoidal FM:
///
/// a1 = (2/T) ∫ F(f_center + f_dev cos(2πt/T)) cos(2πt/T) dt
///
/// The integrand is even in phase, so the half period is integrated with the
/// trapezoid rule; this is spectrally accurate for a periodic integrand and
/// the node count is doubled until successive estimates agree to 1e-6.
pub fn lockin_first_harmonic(f_center: f64, f_dev: f64, rs: &ResonanceSet, fwhm_hz: f64) -> f64 {
    let eval = |theta: f64| fluorescence_factor(f_center + f_dev * theta.cos(), rs, fwhm_hz) * theta.cos();

    let scale = rs.total_weight().max(f64::MIN_POSITIVE);
    let mut n: usize = 64;
    let mut sum = 0.5 * (eval(0.0) + eval(PI));
    for k in 1..n {
        sum += eval(PI * k as f64 / n as f64);
    }
    let mut estimate = 2.0 / PI * sum * PI / n as f64;

    while n < (1 << 20) {
        // Refine by adding the midpoints.
        let mut mid = 0.0;
        for k in 0..n {
            mid += eval(PI * (k as f64 + 0.5) / n as f64);
        }
        sum += mid;
        n *= 2;
        let refined = 2.0 / PI * sum * PI / n as f64;
        let change = (refined - estimate).abs();
        estimate = refined;
        if change <= 1e-6 * refined.abs().max(1e-6 * scale) {
            break;
        }
    }
    estimate
}

/// Central-difference derivative of [`lockin_first_harmonic`] with respect to
/// the carrier frequency, per Hz.
pub fn first_harmonic_slope(f_center: f64, f_dev: f64, rs: &ResonanceSet, fwhm_hz: f64) -> f64 {
    let h = 1e-3 * fwhm_hz;
    (lockin_first_harmonic(f_center + h, f_dev, rs, fwhm_hz)
        - lockin_first_harmonic(f_center - h, f_dev, rs, fwhm_hz))
        / (2.0 * h)
}
