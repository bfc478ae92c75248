//! Offline analysis: spectral estimation, filtering, sensitivity, fitting and
//! bandwidth measurement.

mod lineshape;

pub use lineshape::{
    derivative_lorentzian, fit_derivative_lorentzian_sum, FitGuess, LineshapeFit, LineshapeFitReport,
};

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{Biquad, Cascade};
use crate::model::{PhysicalConstants, Spectrum, SpectrumKind, TimeSeries};

/// `[analysis]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub notch_frequencies_hz: Vec<f64>,
    pub notch_q: f64,
    pub bandpass_lo_hz: f64,
    pub bandpass_hi_hz: f64,
    pub bandpass_order: usize,
    /// Welch segment length; capped at a quarter of the trace.
    pub welch_segment_s: f64,
    pub welch_overlap: f64,
    /// Dropped from the start of a locked trace before filtering.
    pub discard_s: f64,
    /// Dropped after filtering, covering the filter transients.
    pub filter_settle_s: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            notch_frequencies_hz: vec![50.0, 90.0, 100.0, 150.0, 200.0, 250.0],
            notch_q: 30.0,
            bandpass_lo_hz: 25.0,
            bandpass_hi_hz: 300.0,
            bandpass_order: 4,
            welch_segment_s: 10.0,
            welch_overlap: 0.5,
            discard_s: 1.0,
            filter_settle_s: 1.0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        for spec in self.filter_chain() {
            spec.validate()?;
        }
        if !(self.welch_segment_s > 0.0) || !(0.0..1.0).contains(&self.welch_overlap) {
            return Err(Error::Validation(
                "welch_segment_s must be > 0 and welch_overlap in [0, 1)".into(),
            ));
        }
        if !(self.discard_s >= 0.0) || !(self.filter_settle_s >= 0.0) {
            return Err(Error::Validation("discard times must be >= 0".into()));
        }
        Ok(())
    }

    /// Notches followed by the band-pass.
    pub fn filter_chain(&self) -> Vec<FilterSpec> {
        self.notch_frequencies_hz
            .iter()
            .map(|f| FilterSpec::Notch {
                f0_hz: *f,
                q: self.notch_q,
            })
            .chain(std::iter::once(FilterSpec::Bandpass {
                lo_hz: self.bandpass_lo_hz,
                hi_hz: self.bandpass_hi_hz,
                order: self.bandpass_order,
            }))
            .collect()
    }

    pub fn welch_segment_len(&self, trace: &TimeSeries) -> usize {
        default_segment_len(trace, self.welch_segment_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterSpec {
    Notch { f0_hz: f64, q: f64 },
    /// Butterworth high-pass at `lo_hz` cascaded with a low-pass at `hi_hz`,
    /// each of `order`.
    Bandpass { lo_hz: f64, hi_hz: f64, order: usize },
    /// Ideal rectangular pass band, applied in the frequency domain.
    BrickwallBandpass { lo_hz: f64, hi_hz: f64 },
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FilterSpec::Notch { f0_hz, q } => {
                if !(f0_hz > 0.0) || !(q > 0.0) {
                    return Err(Error::Validation(format!("notch needs f0 > 0 and q > 0, got {f0_hz}, {q}")));
                }
            }
            FilterSpec::Bandpass { lo_hz, hi_hz, order } => {
                if !(lo_hz > 0.0 && lo_hz < hi_hz) || order == 0 {
                    return Err(Error::Validation(format!(
                        "band-pass needs 0 < lo < hi and order >= 1, got {lo_hz}, {hi_hz}, {order}"
                    )));
                }
            }
            FilterSpec::BrickwallBandpass { lo_hz, hi_hz } => {
                if !(lo_hz >= 0.0 && lo_hz < hi_hz) {
                    return Err(Error::Validation(format!(
                        "brickwall band needs 0 <= lo < hi, got {lo_hz}, {hi_hz}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_rate(&self, rate_hz: f64) -> Result<()> {
        self.validate()?;
        let top = match *self {
            FilterSpec::Notch { f0_hz, .. } => f0_hz,
            FilterSpec::Bandpass { hi_hz, .. } | FilterSpec::BrickwallBandpass { hi_hz, .. } => hi_hz,
        };
        if top >= rate_hz / 2.0 {
            return Err(Error::Design(format!(
                "filter frequency {top} Hz is not below Nyquist at {rate_hz} Hz"
            )));
        }
        Ok(())
    }

    /// IIR realization; `None` for the brickwall.
    pub fn design(&self, rate_hz: f64) -> Result<Option<Cascade>> {
        self.check_rate(rate_hz)?;
        Ok(match *self {
            FilterSpec::Notch { f0_hz, q } => Some(Cascade::new(vec![Biquad::notch(f0_hz, q, rate_hz)?])?),
            FilterSpec::Bandpass { lo_hz, hi_hz, order } => Some(
                Cascade::butterworth_highpass(order, lo_hz, rate_hz)?
                    .chain(&Cascade::butterworth_lowpass(order, hi_hz, rate_hz)?),
            ),
            FilterSpec::BrickwallBandpass { .. } => None,
        })
    }

    /// Complex response at `f_hz`.
    pub fn response(&self, f_hz: f64, rate_hz: f64) -> Result<Complex64> {
        Ok(match self.design(rate_hz)? {
            Some(c) => c.response(f_hz, rate_hz),
            None => match *self {
                FilterSpec::BrickwallBandpass { lo_hz, hi_hz } if (lo_hz..=hi_hz).contains(&f_hz) => {
                    Complex64::new(1.0, 0.0)
                }
                _ => Complex64::new(0.0, 0.0),
            },
        })
    }
}

/// Applies one filter to a trace, starting from rest.
pub fn apply_filter(trace: &TimeSeries, spec: &FilterSpec) -> Result<TimeSeries> {
    let rate = trace.sample_rate_hz();
    match spec.design(rate)? {
        Some(mut c) => trace.with_samples(c.process_slice(trace.samples())),
        None => {
            let FilterSpec::BrickwallBandpass { lo_hz, hi_hz } = *spec else {
                unreachable!()
            };
            let n = trace.len();
            let mut buf: Vec<Complex64> = trace.samples().iter().map(|x| Complex64::new(*x, 0.0)).collect();
            let mut planner = FftPlanner::new();
            planner.plan_fft_forward(n).process(&mut buf);
            for (k, v) in buf.iter_mut().enumerate() {
                let f = k.min(n - k) as f64 * rate / n as f64;
                if f < lo_hz || f > hi_hz {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            trace.with_samples(buf.iter().map(|v| v.re / n as f64).collect())
        }
    }
}

pub fn apply_filters(trace: &TimeSeries, chain: &[FilterSpec]) -> Result<TimeSeries> {
    chain
        .iter()
        .try_fold(trace.clone(), |t, spec| apply_filter(&t, spec))
}

fn chain_power(chain: &[FilterSpec], designs: &[Option<Cascade>], f: f64, rate: f64) -> f64 {
    chain
        .iter()
        .zip(designs)
        .map(|(spec, d)| match (d, spec) {
            (Some(c), _) => c.response(f, rate).norm_sqr(),
            (None, FilterSpec::BrickwallBandpass { lo_hz, hi_hz }) if f >= *lo_hz && f <= *hi_hz => 1.0,
            _ => 0.0,
        })
        .product()
}

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// `∫₀^{rate/2} |H|² df / max |H|²` of the composite response of `chain`.
pub fn noise_equivalent_bandwidth(chain: &[FilterSpec], rate_hz: f64) -> Result<f64> {
    if chain.is_empty() {
        return Err(Error::Config("filter chain is empty".into()));
    }
    let designs = chain.iter().map(|s| s.design(rate_hz)).collect::<Result<Vec<_>>>()?;
    let nyquist = rate_hz / 2.0;
    // Breakpoints: a uniform grid plus dense points around every feature.
    let mut points: Vec<f64> = (0..=2000).map(|k| nyquist * k as f64 / 2000.0).collect();
    for spec in chain {
        let features: Vec<(f64, f64)> = match *spec {
            FilterSpec::Notch { f0_hz, q } => vec![(f0_hz, f0_hz / q)],
            FilterSpec::Bandpass { lo_hz, hi_hz, .. } => vec![(lo_hz, lo_hz), (hi_hz, hi_hz)],
            FilterSpec::BrickwallBandpass { lo_hz, hi_hz } => vec![(lo_hz, 0.0), (hi_hz, 0.0)],
        };
        for (f0, width) in features {
            points.push(f0);
            for k in 1..=40 {
                let d = width * 0.05 * k as f64;
                points.push(f0 - d);
                points.push(f0 + d);
            }
        }
    }
    points.retain(|f| (0.0..=nyquist).contains(f));
    points.sort_by(f64::total_cmp);
    points.dedup();

    let power = |f: f64| chain_power(chain, &designs, f, rate_hz);
    let peak = points
        .windows(2)
        .flat_map(|w| [w[0], 0.5 * (w[0] + w[1])])
        .map(power)
        .fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Division("filter chain has zero response".into()));
    }
    let rough: f64 = points.windows(2).map(|w| (w[1] - w[0]) * power(0.5 * (w[0] + w[1]))).sum();
    let tol = 1e-7 * rough.max(f64::MIN_POSITIVE);
    let per = tol / points.len() as f64;
    // A brickwall is discontinuous at its edges; integrate strictly inside.
    let inside = |a: f64, b: f64| {
        let eps = 1e-9 * (b - a);
        (a + eps, b - eps)
    };
    let total: f64 = points
        .windows(2)
        .map(|w| {
            let (a, b) = inside(w[0], w[1]);
            let (fa, fm, fb) = (power(a), power(0.5 * (a + b)), power(b));
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(&power, a, b, fa, fm, fb, whole, per, 30)
        })
        .sum();
    Ok(total / peak)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub channel: String,
    pub sigma_t: f64,
    pub f_nep_hz: f64,
    pub sensitivity_t_rthz: f64,
    pub filters_applied: Vec<FilterSpec>,
}

/// `σ/√(2 f_NEP)` of a filtered trace.
pub fn sensitivity(
    trace: &TimeSeries,
    f_nep_hz: f64,
    filters_applied: &[FilterSpec],
    channel: &str,
) -> Result<SensitivityReport> {
    if !(f_nep_hz > 0.0) {
        return Err(Error::Validation(format!("f_NEP must be positive, got {f_nep_hz}")));
    }
    let sigma = trace.std_dev();
    Ok(SensitivityReport {
        channel: channel.to_string(),
        sigma_t: sigma,
        f_nep_hz,
        sensitivity_t_rthz: sigma / (2.0 * f_nep_hz).sqrt(),
        filters_applied: filters_applied.to_vec(),
    })
}

/// Photon-shot-noise-limited sensitivity `√(2eI)/(γe |dI/df|)`, T/√Hz.
pub fn shot_noise_limit(photocurrent_a: f64, slope_a_per_hz: f64, constants: &PhysicalConstants) -> Result<f64> {
    if slope_a_per_hz == 0.0 || !slope_a_per_hz.is_finite() {
        return Err(Error::Division("zero-crossing slope must be non-zero".into()));
    }
    if !(photocurrent_a > 0.0) {
        return Err(Error::Validation(format!("photocurrent must be positive, got {photocurrent_a}")));
    }
    Ok((2.0 * constants.electron_charge_c * photocurrent_a).sqrt()
        / (constants.gamma_e_hz_per_t * slope_a_per_hz.abs()))
}

/// Default Welch segment: `segment_s` of samples, at most a quarter of the trace.
pub fn default_segment_len(trace: &TimeSeries, segment_s: f64) -> usize {
    ((trace.sample_rate_hz() * segment_s).round() as usize)
        .min(trace.len() / 4)
        .max(2)
}

/// Single-sided Welch PSD with a periodic Hann window and per-segment mean
/// removal. Normalized by `fs·Σw²` so that `Σ PSD·Δf` equals the variance.
pub fn welch_psd(trace: &TimeSeries, segment_len: usize, overlap: f64) -> Result<Spectrum> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Validation(format!("overlap must be in [0, 1), got {overlap}")));
    }
    if segment_len < 2 || segment_len > trace.len() {
        return Err(Error::Size(format!(
            "segment of {segment_len} samples does not fit a trace of {}",
            trace.len()
        )));
    }
    let n = segment_len;
    let hop = ((n as f64 * (1.0 - overlap)).round() as usize).max(1);
    let window: Vec<f64> = (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect();
    let w2: f64 = window.iter().map(|w| w * w).sum();
    let fs = trace.sample_rate_hz();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|s| s + n <= trace.len()).collect();
    let mut acc = vec![0.0; bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for &s in &starts {
        let seg = &trace.samples()[s..s + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex64::new((x - mean) * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
    }
    let scale = 1.0 / (fs * w2 * starts.len() as f64);
    let values: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 };
            a * scale * one_sided
        })
        .collect();
    let freqs = (0..bins).map(|k| k as f64 * fs / n as f64).collect();
    Spectrum::new(freqs, values, SpectrumKind::SingleSidedPsd)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProportionalFit {
    pub slope: f64,
    pub std_error: f64,
}

/// Least-squares slope of `measured = slope · applied`.
pub fn fit_proportional(applied: &[f64], measured: &[f64]) -> Result<ProportionalFit> {
    if applied.len() != measured.len() || applied.len() < 2 {
        return Err(Error::Fit(format!(
            "need two or more paired points, got {} and {}",
            applied.len(),
            measured.len()
        )));
    }
    let sxx: f64 = applied.iter().map(|x| x * x).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("applied values are all zero".into()));
    }
    let slope = applied.iter().zip(measured).map(|(x, y)| x * y).sum::<f64>() / sxx;
    let rss: f64 = applied.iter().zip(measured).map(|(x, y)| (y - slope * x).powi(2)).sum();
    let std_error = (rss / (applied.len() - 1) as f64 / sxx).sqrt();
    Ok(ProportionalFit { slope, std_error })
}

/// Amplitude and phase of the `f_hz` component of `samples` (rate `rate_hz`)
/// by least squares on `a cos + b sin + c`.
pub fn sine_fit(samples: &[f64], rate_hz: f64, f_hz: f64) -> Result<(f64, f64)> {
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut v = nalgebra::Vector3::<f64>::zeros();
    for (k, y) in samples.iter().enumerate() {
        let (s, c) = (2.0 * PI * f_hz * k as f64 / rate_hz).sin_cos();
        let row = nalgebra::Vector3::new(c, s, 1.0);
        m += row * row.transpose();
        v += row * *y;
    }
    let sol = m
        .cholesky()
        .ok_or_else(|| Error::Fit(format!("sine fit at {f_hz} Hz is singular")))?
        .solve(&v);
    Ok((sol[0].hypot(sol[1]), (-sol[1]).atan2(sol[0])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthMeasurement {
    /// Recovered/applied amplitude per test frequency.
    pub transfer: Spectrum,
    pub f3db_hz: f64,
}

/// Frequency where `transfer` first drops below 1/√2, interpolated linearly
/// in log frequency.
pub fn crossing_frequency(transfer: &Spectrum) -> Result<f64> {
    let target = 0.5f64.sqrt();
    let (f, r) = (transfer.frequencies_hz(), transfer.values());
    for k in 1..f.len() {
        if r[k - 1] >= target && r[k] < target {
            let t = (r[k - 1] - target) / (r[k - 1] - r[k]);
            return Ok((f[k - 1].ln() + t * (f[k].ln() - f[k - 1].ln())).exp());
        }
    }
    Err(Error::Interpolation(format!(
        "transfer never crosses 1/sqrt(2) between {:?} and {:?} Hz",
        f.first(),
        f.last()
    )))
}

/// Runs `ratios_at` (recovered/applied amplitude of a sinusoidal test field,
/// one entry per channel) at every frequency in parallel and locates the 3 dB
/// point of each channel. Errors name the failing frequency.
pub fn measure_bandwidth<F>(ratios_at: F, frequencies_hz: &[f64]) -> Result<Vec<BandwidthMeasurement>>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync,
{
    let rows = frequencies_hz
        .par_iter()
        .map(|f| {
            ratios_at(*f).map_err(|e| match e {
                Error::LockLost { channel, detail } => Error::LockLost {
                    channel,
                    detail: format!("at test frequency {f} Hz: {detail}"),
                },
                other => Error::Fit(format!("at test frequency {f} Hz: {other}")),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Size("runner returned a varying number of channels".into()));
    }
    (0..n)
        .map(|c| {
            let transfer = Spectrum::new(
                frequencies_hz.to_vec(),
                rows.iter().map(|r| r[c]).collect(),
                SpectrumKind::TransferMagnitude,
            )?;
            let f3db_hz = crossing_frequency(&transfer)?;
            Ok(BandwidthMeasurement { transfer, f3db_hz })
        })
        .collect()
}

/// Log-spaced grid of `n` points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n)
        .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
        .collect()
}

/// Sample-wise difference `a − b`.
pub fn gradiometer(a: &TimeSeries, b: &TimeSeries) -> Result<TimeSeries> {
    a.ensure_compatible(b)?;
    a.with_samples(a.samples().iter().zip(b.samples()).map(|(x, y)| x - y).collect())
}
