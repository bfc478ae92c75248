//! Multiplexed photocurrent synthesis and the per-channel digital lock-in bank.
//!
//! All channels share one detector. Each channel's microwave carrier is
//! frequency modulated at its own reference, so the lock-in tuned to that
//! reference recovers the channel's error signal while the other channels
//! appear only as beat notes outside the low-pass band.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ChannelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::field::NoiseModel;
use crate::filter::{Biquad, Cascade};
use crate::model::{seeded_stream, streams, NoiseRng, PhysicalConstants, TimeSeries, Unit};
use crate::physics::{build_resonance_set, resonance_center, EnsembleConfig};

/// Smallest relative fluorescence a synthesized sample can take.
const FLUORESCENCE_FLOOR: f64 = 1e-12;

/// Microwave drive of one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MwChannelState {
    pub center_frequency_hz: f64,
    pub mod_frequency_hz: f64,
    pub mod_deviation_hz: f64,
    pub mod_phase_rad: f64,
}

impl MwChannelState {
    pub fn validate(&self) -> Result<()> {
        if !(self.mod_frequency_hz > 0.0) || !(self.mod_deviation_hz >= 0.0) {
            return Err(Error::Config(format!(
                "modulation needs f_mod > 0 and f_dev >= 0, got {} Hz / {} Hz",
                self.mod_frequency_hz, self.mod_deviation_hz
            )));
        }
        Ok(())
    }
}

/// `[lockin]` section: filter settings shared by every channel's demodulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LockInSettings {
    pub lpf_cutoff_hz: f64,
    pub lpf_order: usize,
}

impl Default for LockInSettings {
    fn default() -> Self {
        Self {
            lpf_cutoff_hz: 1e3,
            lpf_order: 4,
        }
    }
}

impl LockInSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lpf_cutoff_hz > 0.0) || self.lpf_order == 0 {
            return Err(Error::Validation(
                "lock-in lpf_cutoff_hz must be > 0 and lpf_order >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn for_reference(&self, reference_frequency_hz: f64, phase_rad: f64, output_rate_hz: f64) -> LockInConfig {
        LockInConfig {
            reference_frequency_hz,
            reference_phase_rad: phase_rad,
            lpf_cutoff_hz: self.lpf_cutoff_hz,
            lpf_order: self.lpf_order,
            output_rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LockInConfig {
    pub reference_frequency_hz: f64,
    pub reference_phase_rad: f64,
    pub lpf_cutoff_hz: f64,
    pub lpf_order: usize,
    pub output_rate_hz: f64,
}

impl LockInConfig {
    pub fn validate(&self, input_rate_hz: f64) -> Result<usize> {
        if !(self.lpf_cutoff_hz > 0.0 && self.lpf_cutoff_hz < self.reference_frequency_hz) {
            return Err(Error::Config(format!(
                "lock-in cutoff {} Hz must lie in (0, reference {} Hz)",
                self.lpf_cutoff_hz, self.reference_frequency_hz
            )));
        }
        if self.lpf_order == 0 {
            return Err(Error::Config("lock-in lpf_order must be >= 1".into()));
        }
        if !(input_rate_hz > 2.0 * self.reference_frequency_hz) {
            return Err(Error::Config(format!(
                "input rate {input_rate_hz} Hz must exceed twice the reference {} Hz",
                self.reference_frequency_hz
            )));
        }
        let ratio = input_rate_hz / self.output_rate_hz;
        let n = ratio.round();
        if !(n >= 1.0) || (ratio - n).abs() > 1e-9 * ratio {
            return Err(Error::Config(format!(
                "output rate {} Hz must divide the input rate {input_rate_hz} Hz",
                self.output_rate_hz
            )));
        }
        Ok(n as usize)
    }
}

/// `[detector]` section: single photodiode channel with balanced detection,
/// a transimpedance stage and AC coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorModel {
    pub balanced: bool,
    /// Laser intensity noise rejection of the balanced detector, dB.
    pub balanced_suppression_db: f64,
    pub transimpedance_ohm: f64,
    /// High-pass corner of the AC coupling ahead of the lock-ins; 0 disables it.
    pub ac_coupling_hz: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            balanced: true,
            balanced_suppression_db: 20.0,
            transimpedance_ohm: 1e3,
            ac_coupling_hz: 10.0,
        }
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.transimpedance_ohm > 0.0) {
            return Err(Error::Validation("transimpedance_ohm must be > 0".into()));
        }
        if !(self.ac_coupling_hz >= 0.0) || !(self.balanced_suppression_db >= 0.0) {
            return Err(Error::Validation(
                "ac_coupling_hz and balanced_suppression_db must be >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Factor applied to the laser RIN amplitude.
    pub fn rin_factor(&self) -> f64 {
        if self.balanced {
            10f64.powf(-self.balanced_suppression_db / 20.0)
        } else {
            1.0
        }
    }
}

/// Transimpedance gain followed by the AC-coupling high-pass.
#[derive(Debug, Clone)]
pub struct DetectorFrontEnd {
    gain: f64,
    blocker: Option<Cascade>,
    primed: bool,
}

impl DetectorFrontEnd {
    pub fn new(model: &DetectorModel, rate_hz: f64) -> Result<Self> {
        let blocker = if model.ac_coupling_hz > 0.0 {
            Some(Cascade::new(vec![Biquad::highpass_first_order(
                model.ac_coupling_hz,
                rate_hz,
            )?])?)
        } else {
            None
        };
        Ok(Self {
            gain: model.transimpedance_ohm,
            blocker,
            primed: false,
        })
    }

    /// Photocurrent in amperes to detector output in volts. The coupling
    /// capacitor starts charged to the first sample.
    #[inline]
    pub fn process(&mut self, current_a: f64) -> f64 {
        let v = current_a * self.gain;
        match &mut self.blocker {
            Some(b) => {
                if !self.primed {
                    b.prime(v);
                    self.primed = true;
                }
                b.process(v)
            }
            None => v,
        }
    }
}

#[derive(Debug, Clone)]
struct SynthChannel {
    offsets_hz: Vec<f64>,
    weights: Vec<f64>,
    half_width_sq: f64,
    photocurrent_a: f64,
    mw: MwChannelState,
}

/// Sample-by-sample generator of the detector photocurrent.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    channels: Vec<SynthChannel>,
    rate_hz: f64,
    index: u64,
    electron_charge_c: f64,
    shot: Option<NoiseRng>,
    rin: Option<(NoiseRng, f64)>,
}

impl Synthesizer {
    pub fn new(
        ensembles: &[EnsembleConfig],
        mw: &[MwChannelState],
        noise: &NoiseModel,
        detector: &DetectorModel,
        constants: &PhysicalConstants,
        rate_hz: f64,
        seed: u64,
    ) -> Result<Self> {
        if ensembles.is_empty() || ensembles.len() != mw.len() {
            return Err(Error::Config(format!(
                "{} ensembles but {} microwave channels",
                ensembles.len(),
                mw.len()
            )));
        }
        if !(rate_hz > 0.0) {
            return Err(Error::Config(format!("sample rate must be positive, got {rate_hz}")));
        }
        let channels = ensembles
            .iter()
            .zip(mw)
            .map(|(e, m)| {
                m.validate()?;
                let rs = build_resonance_set(0.0, e);
                Ok(SynthChannel {
                    offsets_hz: rs.line_offsets_hz,
                    weights: rs.line_weights,
                    half_width_sq: (0.5 * e.fwhm_hz).powi(2),
                    photocurrent_a: e.baseline_photocurrent_a,
                    mw: *m,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rin_sigma = noise.laser_rin_rel_per_rthz * detector.rin_factor() * (rate_hz / 2.0).sqrt();
        Ok(Self {
            channels,
            rate_hz,
            index: 0,
            electron_charge_c: constants.electron_charge_c,
            shot: noise
                .shot_noise_enabled
                .then(|| seeded_stream(seed, streams::SHOT)),
            rin: (rin_sigma > 0.0).then(|| (seeded_stream(seed, streams::LASER_RIN), rin_sigma)),
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    /// Index of the next sample to be generated.
    pub fn sample_index(&self) -> u64 {
        self.index
    }

    pub fn set_carrier(&mut self, channel: usize, center_hz: f64) {
        self.channels[channel].mw.center_frequency_hz = center_hz;
    }

    pub fn carrier(&self, channel: usize) -> f64 {
        self.channels[channel].mw.center_frequency_hz
    }

    /// Removes the resonance of `channel`; its photocurrent stays as a DC term.
    pub fn silence_channel(&mut self, channel: usize) {
        self.channels[channel].weights.iter_mut().for_each(|w| *w = 0.0);
    }

    /// Next photocurrent sample given the instantaneous resonance center of
    /// every channel.
    #[inline]
    pub fn next_sample(&mut self, resonance_centers_hz: &[f64]) -> f64 {
        let n = self.index as f64;
        let mut current = 0.0;
        for (ch, rc) in self.channels.iter().zip(resonance_centers_hz) {
            let cycles = (n * ch.mw.mod_frequency_hz / self.rate_hz).fract();
            let theta = 2.0 * PI * cycles + ch.mw.mod_phase_rad;
            let detuning = ch.mw.center_frequency_hz + ch.mw.mod_deviation_hz * theta.cos() - rc;
            let mut dip = 0.0;
            for (o, w) in ch.offsets_hz.iter().zip(&ch.weights) {
                let d = detuning - o;
                dip += w * ch.half_width_sq / (d * d + ch.half_width_sq);
            }
            current += ch.photocurrent_a * (1.0 - dip).clamp(FLUORESCENCE_FLOOR, 1.0);
        }
        if let Some((rng, sigma)) = &mut self.rin {
            let g: f64 = rng.sample(StandardNormal);
            current *= 1.0 + *sigma * g;
        }
        if let Some(rng) = &mut self.shot {
            // one-sided density 2eI over a bandwidth of rate/2
            let sigma = (self.electron_charge_c * current.max(0.0) * self.rate_hz).sqrt();
            let g: f64 = rng.sample(StandardNormal);
            current += sigma * g;
        }
        self.index += 1;
        current
    }
}

/// Photocurrent of the detector for a fixed microwave state and per-channel
/// axial-field traces sampled at `rate_hz`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_photocurrent(
    cfgs: &[EnsembleConfig],
    mw: &[MwChannelState],
    fields_t: &[TimeSeries],
    noise: &NoiseModel,
    detector: &DetectorModel,
    constants: &PhysicalConstants,
    duration_s: f64,
    rate_hz: f64,
    seed: u64,
) -> Result<TimeSeries> {
    let n = (duration_s * rate_hz).round() as usize;
    if fields_t.len() != cfgs.len() {
        return Err(Error::Config(format!(
            "{} field traces for {} channels",
            fields_t.len(),
            cfgs.len()
        )));
    }
    for f in fields_t {
        if f.sample_rate_hz() != rate_hz || f.len() != n {
            return Err(Error::Config(format!(
                "field trace of {} samples @ {} Hz does not match {n} samples @ {rate_hz} Hz",
                f.len(),
                f.sample_rate_hz()
            )));
        }
    }
    let mut synth = Synthesizer::new(cfgs, mw, noise, detector, constants, rate_hz, seed)?;
    let mut centers = vec![0.0; cfgs.len()];
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        for (i, (f, c)) in fields_t.iter().zip(cfgs).enumerate() {
            centers[i] = resonance_center(f.samples()[k], constants, c.transition)?;
        }
        out.push(synth.next_sample(&centers));
    }
    TimeSeries::new(rate_hz, out, Unit::Ampere)
}

/// Streaming dual-phase lock-in with a Butterworth low-pass and decimation.
#[derive(Debug, Clone)]
pub struct LockIn {
    reference_frequency_hz: f64,
    reference_phase_rad: f64,
    rate_hz: f64,
    lpf_x: Cascade,
    lpf_y: Cascade,
    decimation: usize,
    index: u64,
}

impl LockIn {
    pub fn new(cfg: &LockInConfig, input_rate_hz: f64) -> Result<Self> {
        let decimation = cfg.validate(input_rate_hz)?;
        let lpf = Cascade::butterworth_lowpass(cfg.lpf_order, cfg.lpf_cutoff_hz, input_rate_hz)?;
        Ok(Self {
            reference_frequency_hz: cfg.reference_frequency_hz,
            reference_phase_rad: cfg.reference_phase_rad,
            rate_hz: input_rate_hz,
            lpf_x: lpf.clone(),
            lpf_y: lpf,
            decimation,
            index: 0,
        })
    }

    pub fn decimation(&self) -> usize {
        self.decimation
    }

    pub fn reference_phase_rad(&self) -> f64 {
        self.reference_phase_rad
    }

    pub fn set_reference_phase(&mut self, phase_rad: f64) {
        self.reference_phase_rad = phase_rad;
    }

    /// Filter outputs for the current input sample, before decimation.
    #[inline]
    pub fn step(&mut self, sample: f64) -> (f64, f64) {
        let cycles = (self.index as f64 * self.reference_frequency_hz / self.rate_hz).fract();
        let (s, c) = (2.0 * PI * cycles + self.reference_phase_rad).sin_cos();
        self.index += 1;
        (
            self.lpf_x.process(2.0 * sample * c),
            self.lpf_y.process(-2.0 * sample * s),
        )
    }

    /// Feeds one input sample; returns `(x, y)` on the last sample of each
    /// decimation block.
    #[inline]
    pub fn push(&mut self, sample: f64) -> Option<(f64, f64)> {
        let out = self.step(sample);
        (self.index.is_multiple_of(self.decimation as u64)).then_some(out)
    }
}

/// Demodulates a whole trace: `x = LPF(2 s cos)`, `y = LPF(-2 s sin)`, so an
/// input `A cos(2π f_ref t + φ + ψ)` settles to `x + iy = A e^{iψ}`.
pub fn lockin_demodulate(trace: &TimeSeries, cfg: &LockInConfig) -> Result<(TimeSeries, TimeSeries)> {
    let mut li = LockIn::new(cfg, trace.sample_rate_hz())?;
    let mut xs = Vec::with_capacity(trace.len() / li.decimation() + 1);
    let mut ys = Vec::with_capacity(xs.capacity());
    for s in trace.samples() {
        if let Some((x, y)) = li.push(*s) {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.is_empty() {
        return Err(Error::Size(format!(
            "trace of {} samples is shorter than one decimation block of {}",
            trace.len(),
            li.decimation()
        )));
    }
    let unit = trace.unit();
    Ok((
        TimeSeries::new(cfg.output_rate_hz, xs, unit)?,
        TimeSeries::new(cfg.output_rate_hz, ys, unit)?,
    ))
}

/// `[crosstalk]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrosstalkSettings {
    pub duration_s: f64,
    pub discard_s: f64,
    /// Carrier detuning of the responding channel, in linewidths.
    pub detuning_fwhm: f64,
}

impl Default for CrosstalkSettings {
    fn default() -> Self {
        Self {
            duration_s: 0.2,
            discard_s: 0.02,
            detuning_fwhm: 0.5,
        }
    }
}

impl CrosstalkSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > self.discard_s && self.discard_s >= 0.0) {
            return Err(Error::Validation(
                "crosstalk duration_s must exceed discard_s >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Crosstalk between explicitly given channels. Unlike [`crosstalk_matrix`]
/// this does not require distinct modulation frequencies.
///
/// Element `(i, j)` is the rms lock-in magnitude at channel `i` when only
/// channel `j` has a resonance (others silenced, carrier `j` detuned), divided
/// by the magnitude at channel `j` itself. Noise is disabled.
#[allow(clippy::too_many_arguments)]
pub fn crosstalk_for_channels(
    channels: &[ChannelConfig],
    resonance_centers_hz: &[f64],
    lockin: &LockInSettings,
    detector: &DetectorModel,
    constants: &PhysicalConstants,
    rate_hz: f64,
    output_rate_hz: f64,
    settings: &CrosstalkSettings,
) -> Result<Vec<Vec<f64>>> {
    let n = channels.len();
    if n < 2 || resonance_centers_hz.len() != n {
        return Err(Error::Config(
            "crosstalk needs at least two channels with known resonance centers".into(),
        ));
    }
    settings.validate()?;
    let ensembles: Vec<EnsembleConfig> = channels.iter().map(|c| c.ensemble.clone()).collect();
    let total = (settings.duration_s * rate_hz).round() as usize;

    let columns: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mw: Vec<MwChannelState> = channels
                .iter()
                .zip(resonance_centers_hz)
                .enumerate()
                .map(|(i, (c, rc))| {
                    let detune = if i == j {
                        settings.detuning_fwhm * c.ensemble.fwhm_hz
                    } else {
                        0.0
                    };
                    c.mw_state(rc + detune)
                })
                .collect();
            let mut synth = Synthesizer::new(
                &ensembles,
                &mw,
                &NoiseModel::quiet(),
                detector,
                constants,
                rate_hz,
                0,
            )?;
            for i in (0..n).filter(|i| *i != j) {
                synth.silence_channel(i);
            }
            let mut front = DetectorFrontEnd::new(detector, rate_hz)?;
            let mut lockins = channels
                .iter()
                .map(|c| {
                    LockIn::new(
                        &lockin.for_reference(c.mod_frequency_hz, c.mod_phase_rad, output_rate_hz),
                        rate_hz,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let skip = (settings.discard_s * output_rate_hz).round() as usize;
            let mut sum_sq = vec![0.0; n];
            let mut count = 0usize;
            let mut outputs = 0usize;
            for _ in 0..total {
                let v = front.process(synth.next_sample(resonance_centers_hz));
                let mut emitted = false;
                for (i, li) in lockins.iter_mut().enumerate() {
                    if let Some((x, y)) = li.push(v) {
                        emitted = true;
                        if outputs >= skip {
                            sum_sq[i] += x * x + y * y;
                        }
                    }
                }
                if emitted {
                    if outputs >= skip {
                        count += 1;
                    }
                    outputs += 1;
                }
            }
            if count == 0 {
                return Err(Error::Size("crosstalk run too short".into()));
            }
            let rms: Vec<f64> = sum_sq.iter().map(|s| (s / count as f64).sqrt()).collect();
            if !(rms[j] > 0.0) {
                return Err(Error::Division(format!("channel {} shows no response", j + 1)));
            }
            Ok(rms.iter().map(|r| r / rms[j]).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((0..n).map(|i| (0..n).map(|j| columns[j][i]).collect()).collect())
}

/// Crosstalk matrix of a validated run configuration at its bias point.
pub fn crosstalk_matrix(run: &RunConfig) -> Result<Vec<Vec<f64>>> {
    let centers = (0..run.channels.len())
        .map(|i| {
            resonance_center(
                run.channel_bias_t(i)?,
                &run.constants,
                run.channels[i].ensemble.transition,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    crosstalk_for_channels(
        &run.channels,
        &centers,
        &run.lockin,
        &run.detector,
        &run.constants,
        run.sample_rate_hz,
        run.decimated_rate_hz,
        &run.crosstalk,
    )
}
