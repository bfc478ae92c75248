//! Frequency-locking PID servos and the closed-loop field readout.
//!
//! Each channel's microwave carrier is steered to `f0 + s·α·V_f`, with `s` the
//! Zeeman sign of the addressed transition, so that `ΔB = (α/γe)·V_f` holds for
//! either transition. The loop runs once per decimated lock-in sample and the
//! new servo output takes effect one decimated sample later.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::field::{channel_environment, NoiseModel};
use crate::filter::Cascade;
use crate::model::{PhysicalConstants, TimeSeries, Unit};
use crate::physics::{build_resonance_set, lockin_first_harmonic, resonance_center};
use crate::signal::{DetectorFrontEnd, LockIn, LockInSettings, MwChannelState, Synthesizer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoConfig {
    pub kp: f64,
    /// Integral gain, 1/s.
    pub ki: f64,
    /// Derivative gain, s.
    pub kd: f64,
    pub alpha_hz_per_v: f64,
    pub target_bandwidth_hz: f64,
    /// Closed-loop 3 dB frequency aimed for by the auto-tuner, as a multiple
    /// of `target_bandwidth_hz`.
    pub closed_loop_ratio: f64,
    /// Proportional loop gain `kp·α·|slope|` used by the auto-tuner.
    pub proportional_loop_gain: f64,
    pub output_limits_v: [f64; 2],
    /// Replace `kp` and `ki` with values derived from the measured slope.
    pub auto_tune: bool,
    /// Lock is declared once `|error|` stays below this fraction of a linewidth
    /// (converted with the slope) for `lock_hold_s`.
    pub lock_threshold_fwhm: f64,
    pub lock_hold_s: f64,
    /// Half width of the acquisition sweep, expressed as a field, T.
    pub acquisition_span_t: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
            alpha_hz_per_v: 1e6,
            target_bandwidth_hz: 200.0,
            closed_loop_ratio: 1.5,
            proportional_loop_gain: 0.05,
            output_limits_v: [-10.0, 10.0],
            auto_tune: true,
            lock_threshold_fwhm: 0.1,
            lock_hold_s: 0.1,
            acquisition_span_t: 5e-3,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ki >= 0.0) || !self.kp.is_finite() || !self.kd.is_finite() {
            return Err(Error::Validation("servo gains must be finite with ki >= 0".into()));
        }
        if !(self.output_limits_v[0] < self.output_limits_v[1]) {
            return Err(Error::Validation("servo output limits must be ordered".into()));
        }
        if !(self.alpha_hz_per_v != 0.0 && self.alpha_hz_per_v.is_finite()) {
            return Err(Error::Validation("alpha_hz_per_v must be finite and non-zero".into()));
        }
        if !(self.target_bandwidth_hz > 0.0)
            || !(self.closed_loop_ratio > 0.0)
            || !(self.proportional_loop_gain >= 0.0)
        {
            return Err(Error::Validation(
                "target_bandwidth_hz and closed_loop_ratio must be > 0".into(),
            ));
        }
        if !(self.lock_threshold_fwhm > 0.0) || !(self.lock_hold_s >= 0.0) || !(self.acquisition_span_t > 0.0) {
            return Err(Error::Validation(
                "lock threshold, hold time and acquisition span must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ServoState {
    pub integrator_v: f64,
    pub previous_error_v: f64,
    pub output_v: f64,
    pub locked: bool,
    /// Set when a non-finite error arrived; the state no longer updates.
    pub fault: bool,
}

/// One PID update. The integral is accumulated before the output is formed;
/// when the output saturates the accumulation is undone.
pub fn pid_step(error_v: f64, state: ServoState, cfg: &ServoConfig, dt_s: f64) -> ServoState {
    if state.fault {
        return state;
    }
    if !error_v.is_finite() || !(dt_s > 0.0) {
        return ServoState { fault: true, ..state };
    }
    let integrator = state.integrator_v + error_v * dt_s;
    let derivative = (error_v - state.previous_error_v) / dt_s;
    let raw = cfg.kp * error_v + cfg.ki * integrator + cfg.kd * derivative;
    let [lo, hi] = cfg.output_limits_v;
    let clamped = raw.clamp(lo, hi);
    ServoState {
        integrator_v: if clamped != raw { state.integrator_v } else { integrator },
        previous_error_v: error_v,
        output_v: clamped,
        locked: state.locked,
        fault: false,
    }
}

/// Field change implied by a servo output: `ΔB = (α/γe)·V_f`.
pub fn field_readout(v_f: f64, cfg: &ServoConfig, constants: &PhysicalConstants) -> f64 {
    cfg.alpha_hz_per_v / constants.gamma_e_hz_per_t * v_f
}

/// Operating point of one channel found during acquisition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCalibration {
    /// Carrier frequency of the central zero crossing, Hz.
    pub center_hz: f64,
    pub reference_phase_rad: f64,
    /// d(error)/d(carrier) at the lock point including the loop sign, V/Hz.
    pub slope_v_per_hz: f64,
    /// Error reading at the lock point, subtracted from every later reading.
    pub error_offset_v: f64,
}

impl ChannelCalibration {
    /// Zero-crossing slope of the demodulated photocurrent, A/Hz.
    pub fn slope_a_per_hz(&self, transimpedance_ohm: f64) -> f64 {
        self.slope_v_per_hz.abs() / transimpedance_ohm
    }
}

/// Locates the central zero crossing of the first-harmonic lineshape by a
/// coarse sweep over the acquisition span followed by bisection. The sweep
/// uses the noiseless steady-state response.
pub fn coarse_sweep_center(run: &RunConfig, index: usize) -> Result<f64> {
    let ch = run
        .channels
        .get(index)
        .ok_or(Error::UnknownChannel(index as u32 + 1))?;
    let servo = &run.servo[index];
    let truth = resonance_center(run.channel_bias_t(index)?, &run.constants, ch.ensemble.transition)?;
    let rs = build_resonance_set(truth, &ch.ensemble);
    let g = ch.ensemble.fwhm_hz;
    let dev = ch.mod_deviation_hz.max(g / 100.0);
    let a1 = |f: f64| lockin_first_harmonic(f, dev, &rs, g);

    let span = servo.acquisition_span_t * run.constants.gamma_e_hz_per_t;
    let d = run.constants.zero_field_splitting_hz;
    let step = g / 4.0;
    let n = (2.0 * span / step).ceil() as usize;
    let mut best: Option<(f64, f64, f64)> = None;
    let mut prev_f = d - span;
    let mut prev_v = a1(prev_f);
    for k in 1..=n {
        let f = d - span + k as f64 * step;
        let v = a1(f);
        if prev_v < 0.0 && v >= 0.0 {
            let slope = (v - prev_v) / step;
            if best.is_none_or(|b| slope > b.2) {
                best = Some((prev_f, f, slope));
            }
        }
        prev_f = f;
        prev_v = v;
    }
    let (mut lo, mut hi, _) = best.ok_or_else(|| {
        Error::LockLost {
            channel: ch.id(),
            detail: "no resonance found in the acquisition sweep".into(),
        }
    })?;
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if a1(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Mean lock-in output (x + iy) of channel `index` with every carrier parked at
/// `carriers_hz`, no noise, after the filters settle.
fn measure_response(
    run: &RunConfig,
    resonance_centers_hz: &[f64],
    carriers_hz: &[f64],
    index: usize,
    reference_phase_rad: f64,
) -> Result<Complex64> {
    let ensembles: Vec<_> = run.channels.iter().map(|c| c.ensemble.clone()).collect();
    let mw: Vec<MwChannelState> = run
        .channels
        .iter()
        .zip(carriers_hz)
        .map(|(c, f)| c.mw_state(*f))
        .collect();
    let mut synth = Synthesizer::new(
        &ensembles,
        &mw,
        &NoiseModel::quiet(),
        &run.detector,
        &run.constants,
        run.sample_rate_hz,
        run.seed,
    )?;
    let mut front = DetectorFrontEnd::new(&run.detector, run.sample_rate_hz)?;
    let ch = &run.channels[index];
    let mut li = LockIn::new(
        &run
            .lockin
            .for_reference(ch.mod_frequency_hz, reference_phase_rad, run.decimated_rate_hz),
        run.sample_rate_hz,
    )?;
    let settle = (0.02 * run.decimated_rate_hz).round() as usize;
    let average = 2 * ((0.005 * run.decimated_rate_hz).round() as usize).max(1);
    let mut sum = Complex64::new(0.0, 0.0);
    let mut outputs = 0;
    while outputs < settle + average {
        if let Some((x, y)) = li.push(front.process(synth.next_sample(resonance_centers_hz))) {
            if outputs >= settle {
                sum += Complex64::new(x, y);
            }
            outputs += 1;
        }
    }
    Ok(sum / average as f64)
}

/// Acquisition for every channel: coarse sweep, reference-phase calibration,
/// discriminator slope and error offset, all on the noiseless time-domain
/// model at the bias point.
pub fn acquire(run: &RunConfig) -> Result<Vec<ChannelCalibration>> {
    let n = run.channels.len();
    let truths = (0..n)
        .map(|i| {
            resonance_center(run.channel_bias_t(i)?, &run.constants, run.channels[i].ensemble.transition)
        })
        .collect::<Result<Vec<_>>>()?;
    let centers = (0..n)
        .map(|i| coarse_sweep_center(run, i))
        .collect::<Result<Vec<_>>>()?;
    (0..n)
        .map(|i| {
            let ch = &run.channels[i];
            let delta = ch.ensemble.fwhm_hz / 100.0;
            let at = |offset: f64| {
                let mut carriers = centers.clone();
                carriers[i] += offset;
                carriers
            };
            let z = measure_response(run, &truths, &at(delta), i, ch.mod_phase_rad)?;
            let mut phase = ch.mod_phase_rad + z.im.atan2(z.re);
            if ch.ensemble.transition.zeeman_sign() > 0.0 {
                phase += PI;
            }
            let plus = measure_response(run, &truths, &at(delta), i, phase)?.re;
            let minus = measure_response(run, &truths, &at(-delta), i, phase)?.re;
            let offset = measure_response(run, &truths, &at(0.0), i, phase)?.re;
            Ok(ChannelCalibration {
                center_hz: centers[i],
                reference_phase_rad: phase,
                slope_v_per_hz: (plus - minus) / (2.0 * delta),
                error_offset_v: offset,
            })
        })
        .collect()
}

/// Linear model of the sampled loop used for tuning and prediction.
#[derive(Debug, Clone)]
pub struct LoopModel {
    /// Block sums of the lock-in low-pass impulse response.
    block_response: Vec<f64>,
    decimated_rate_hz: f64,
    /// `α·|slope|`, dimensionless per volt of servo output.
    plant_gain: f64,
}

impl LoopModel {
    pub fn new(
        lockin: &LockInSettings,
        sample_rate_hz: f64,
        decimated_rate_hz: f64,
        alpha_hz_per_v: f64,
        slope_v_per_hz: f64,
    ) -> Result<Self> {
        let mut lpf = Cascade::butterworth_lowpass(lockin.lpf_order, lockin.lpf_cutoff_hz, sample_rate_hz)?;
        let decimation = (sample_rate_hz / decimated_rate_hz).round() as usize;
        // Long enough for the slowest admissible low-pass to ring down.
        let blocks = (0.1 * decimated_rate_hz).ceil() as usize;
        let mut block_response = Vec::with_capacity(blocks);
        let mut first = true;
        for _ in 0..blocks {
            let mut sum = 0.0;
            for _ in 0..decimation {
                sum += lpf.process(if first { 1.0 } else { 0.0 });
                first = false;
            }
            block_response.push(sum);
        }
        Ok(Self {
            block_response,
            decimated_rate_hz,
            plant_gain: (alpha_hz_per_v * slope_v_per_hz).abs(),
        })
    }

    /// Response of one decimated error sample to a field (or carrier) step
    /// that is held over the sample's block.
    fn plant(&self, f_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / self.decimated_rate_hz;
        self.block_response
            .iter()
            .enumerate()
            .map(|(l, g)| Complex64::from_polar(*g, -w * l as f64))
            .sum()
    }

    fn controller(&self, cfg: &ServoConfig, f_hz: f64) -> Complex64 {
        let dt = 1.0 / self.decimated_rate_hz;
        let zinv = Complex64::from_polar(1.0, -2.0 * PI * f_hz * dt);
        let one = Complex64::new(1.0, 0.0);
        cfg.kp + cfg.ki * dt / (one - zinv) + cfg.kd * (one - zinv) / dt
    }

    /// Open-loop gain including the one-sample output delay.
    pub fn open_loop(&self, cfg: &ServoConfig, f_hz: f64) -> Complex64 {
        let zinv = Complex64::from_polar(1.0, -2.0 * PI * f_hz / self.decimated_rate_hz);
        self.plant_gain * self.controller(cfg, f_hz) * self.plant(f_hz) * zinv
    }

    /// Magnitude of the field-to-readout transfer at `f_hz`.
    pub fn closed_loop(&self, cfg: &ServoConfig, f_hz: f64) -> f64 {
        let l = self.open_loop(cfg, f_hz);
        (l / (1.0 + l)).norm()
    }

    /// First frequency where the closed-loop magnitude falls to 1/√2, or
    /// `None` if it stays above up to the Nyquist frequency.
    pub fn bandwidth(&self, cfg: &ServoConfig) -> Option<f64> {
        let target = 0.5f64.sqrt();
        let nyquist = 0.5 * self.decimated_rate_hz;
        let points = 400;
        let mut prev = 0.1;
        for k in 1..=points {
            let f = 0.1 * (nyquist / 0.1f64).powf(k as f64 / points as f64);
            if self.closed_loop(cfg, f) < target {
                let (mut lo, mut hi) = (prev, f);
                for _ in 0..60 {
                    let mid = (lo * hi).sqrt();
                    if self.closed_loop(cfg, mid) < target {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some((lo * hi).sqrt());
            }
            prev = f;
        }
        None
    }

    /// Largest closed-loop magnitude below the Nyquist frequency.
    pub fn peak(&self, cfg: &ServoConfig) -> f64 {
        let nyquist = 0.5 * self.decimated_rate_hz;
        (0..=400)
            .map(|k| self.closed_loop(cfg, 0.1 * (nyquist / 0.1f64).powf(k as f64 / 400.0)))
            .fold(0.0, f64::max)
    }
}

/// PI gains for a measured slope: fixed proportional loop gain, integral gain
/// bisected until the modeled closed-loop 3 dB frequency equals
/// `closed_loop_ratio × target_bandwidth_hz`.
pub fn auto_tune(cfg: &ServoConfig, model: &LoopModel) -> Result<ServoConfig> {
    if !(model.plant_gain > 0.0) {
        return Err(Error::Division("zero discriminator slope; cannot tune".into()));
    }
    let goal = cfg.closed_loop_ratio * cfg.target_bandwidth_hz;
    let kp = cfg.proportional_loop_gain / model.plant_gain;
    let with_crossover = |fc: f64| ServoConfig {
        kp,
        ki: 2.0 * PI * fc / model.plant_gain,
        kd: 0.0,
        ..*cfg
    };
    let bw = |fc: f64| model.bandwidth(&with_crossover(fc)).unwrap_or(f64::INFINITY);
    let (mut lo, mut hi) = (1.0f64, 0.25 * model.decimated_rate_hz);
    if !(bw(lo) <= goal && bw(hi) >= goal) {
        return Err(Error::Config(format!(
            "closed-loop bandwidth {goal} Hz is not reachable at a decimated rate of {} Hz",
            model.decimated_rate_hz
        )));
    }
    for _ in 0..80 {
        let mid = (lo * hi).sqrt();
        if bw(mid) < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(with_crossover((lo * hi).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LockDiagnostics {
    pub channel: u32,
    /// The error stayed inside the lock threshold for the hold time.
    pub locked: bool,
    pub lock_acquired_s: Option<f64>,
    /// The carrier left the capture range (|detuning| ≥ FWHM) at this time.
    pub lost_at_s: Option<f64>,
    /// Per decimated sample: carrier within the capture range.
    pub valid: Vec<bool>,
    pub max_abs_detuning_hz: f64,
    pub fault: bool,
}

impl LockDiagnostics {
    pub fn invalid_samples(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

/// Output of a closed-loop run.
#[derive(Debug, Clone)]
pub struct LockedRun {
    pub delta_b: Vec<TimeSeries>,
    pub diagnostics: Vec<LockDiagnostics>,
    pub calibrations: Vec<ChannelCalibration>,
    /// Servo settings after auto-tuning.
    pub servo: Vec<ServoConfig>,
    pub predicted_bandwidth_hz: Vec<Option<f64>>,
    pub mean_photocurrent_a: f64,
}

impl LockedRun {
    pub fn all_locked(&self) -> bool {
        self.diagnostics.iter().all(|d| d.locked && d.lost_at_s.is_none() && !d.fault)
    }

    /// First channel that lost lock or never locked, as an error.
    pub fn check(&self) -> Result<()> {
        match self
            .diagnostics
            .iter()
            .find(|d| !(d.locked && d.lost_at_s.is_none() && !d.fault))
        {
            None => Ok(()),
            Some(d) => Err(Error::LockLost {
                channel: d.channel,
                detail: match d.lost_at_s {
                    Some(t) => format!("carrier left the capture range at t = {t:.4} s"),
                    None if d.fault => "servo fault (non-finite error)".into(),
                    None => "lock criterion never met".into(),
                },
            }),
        }
    }
}

/// Acquisition plus tuning for every channel, shared by repeated runs.
#[derive(Debug, Clone)]
pub struct LoopSetup {
    pub calibrations: Vec<ChannelCalibration>,
    pub servo: Vec<ServoConfig>,
    pub predicted_bandwidth_hz: Vec<Option<f64>>,
}

pub fn prepare_loops(run: &RunConfig) -> Result<LoopSetup> {
    let calibrations = acquire(run)?;
    let mut servo = Vec::with_capacity(calibrations.len());
    let mut predicted = Vec::with_capacity(calibrations.len());
    for (cal, cfg) in calibrations.iter().zip(&run.servo) {
        let model = LoopModel::new(
            &run.lockin,
            run.sample_rate_hz,
            run.decimated_rate_hz,
            cfg.alpha_hz_per_v,
            cal.slope_v_per_hz,
        )?;
        let tuned = if cfg.auto_tune { auto_tune(cfg, &model)? } else { *cfg };
        predicted.push(model.bandwidth(&tuned));
        servo.push(tuned);
    }
    Ok(LoopSetup {
        calibrations,
        servo,
        predicted_bandwidth_hz: predicted,
    })
}

/// Closed-loop simulation over `run.duration_s`.
///
/// `applied_fields` holds one test-field trace per channel sampled at the
/// decimated rate (each value is held over its block); it may be empty. The
/// environmental noise of `run.noise` is added on top.
pub fn run_locked(run: &RunConfig, applied_fields: &[TimeSeries]) -> Result<LockedRun> {
    let setup = prepare_loops(run)?;
    run_locked_with(run, &setup, applied_fields)
}

/// [`run_locked`] with a precomputed acquisition.
pub fn run_locked_with(run: &RunConfig, setup: &LoopSetup, applied_fields: &[TimeSeries]) -> Result<LockedRun> {
    let n_ch = run.channels.len();
    let n_out = (run.duration_s * run.decimated_rate_hz).round() as usize;
    let decimation = run.decimation();
    let dt = 1.0 / run.decimated_rate_hz;
    if n_out == 0 {
        return Err(Error::Config("run shorter than one decimated sample".into()));
    }
    if !applied_fields.is_empty() {
        if applied_fields.len() != n_ch {
            return Err(Error::Config(format!(
                "{} applied-field traces for {n_ch} channels",
                applied_fields.len()
            )));
        }
        for f in applied_fields {
            if f.sample_rate_hz() != run.decimated_rate_hz || f.len() < n_out {
                return Err(Error::Config(format!(
                    "applied field must be sampled at {} Hz with at least {n_out} samples",
                    run.decimated_rate_hz
                )));
            }
        }
    }
    let env = channel_environment(run.seed, n_ch, run.duration_s, run.decimated_rate_hz, &run.noise)?;

    let biases = (0..n_ch).map(|i| run.channel_bias_t(i)).collect::<Result<Vec<_>>>()?;
    let signs: Vec<f64> = run.channels.iter().map(|c| c.ensemble.transition.zeeman_sign()).collect();
    let ensembles: Vec<_> = run.channels.iter().map(|c| c.ensemble.clone()).collect();
    let mw: Vec<MwChannelState> = run
        .channels
        .iter()
        .zip(&setup.calibrations)
        .map(|(c, cal)| c.mw_state(cal.center_hz))
        .collect();
    let mut synth = Synthesizer::new(
        &ensembles,
        &mw,
        &run.noise,
        &run.detector,
        &run.constants,
        run.sample_rate_hz,
        run.seed,
    )?;
    let mut front = DetectorFrontEnd::new(&run.detector, run.sample_rate_hz)?;
    let mut lockins = run
        .channels
        .iter()
        .zip(&setup.calibrations)
        .map(|(c, cal)| {
            LockIn::new(
                &run
                    .lockin
                    .for_reference(c.mod_frequency_hz, cal.reference_phase_rad, run.decimated_rate_hz),
                run.sample_rate_hz,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let thresholds: Vec<f64> = (0..n_ch)
        .map(|i| {
            setup.servo[i].lock_threshold_fwhm
                * run.channels[i].ensemble.fwhm_hz
                * setup.calibrations[i].slope_v_per_hz.abs()
        })
        .collect();
    let hold: Vec<usize> = setup
        .servo
        .iter()
        .map(|s| (s.lock_hold_s * run.decimated_rate_hz).round() as usize)
        .collect();

    let mut states = vec![ServoState::default(); n_ch];
    let mut quiet_run = vec![0usize; n_ch];
    let mut delta_b: Vec<Vec<f64>> = vec![Vec::with_capacity(n_out); n_ch];
    let mut diagnostics: Vec<LockDiagnostics> = run
        .channels
        .iter()
        .map(|c| LockDiagnostics {
            channel: c.id(),
            locked: false,
            lock_acquired_s: None,
            lost_at_s: None,
            valid: Vec::with_capacity(n_out),
            max_abs_detuning_hz: 0.0,
            fault: false,
        })
        .collect();
    let mut centers = vec![0.0; n_ch];
    let mut errors = vec![0.0; n_ch];
    let mut current_sum = 0.0;

    for k in 0..n_out {
        for i in 0..n_ch {
            let mut b = biases[i] + env[i].samples()[k];
            if let Some(f) = applied_fields.get(i) {
                b += f.samples()[k];
            }
            centers[i] = resonance_center(b, &run.constants, run.channels[i].ensemble.transition)?;
            let carrier = setup.calibrations[i].center_hz
                + signs[i] * setup.servo[i].alpha_hz_per_v * states[i].output_v;
            synth.set_carrier(i, carrier);
            let detuning = carrier - centers[i];
            let d = &mut diagnostics[i];
            d.max_abs_detuning_hz = d.max_abs_detuning_hz.max(detuning.abs());
            let valid = detuning.abs() < run.channels[i].ensemble.fwhm_hz;
            if !valid && d.lost_at_s.is_none() {
                d.lost_at_s = Some(k as f64 * dt);
                states[i].locked = false;
            }
            d.valid.push(valid);
        }
        for _ in 0..decimation {
            let current = synth.next_sample(&centers);
            current_sum += current;
            let v = front.process(current);
            for (i, li) in lockins.iter_mut().enumerate() {
                if let Some((x, _)) = li.push(v) {
                    errors[i] = x - setup.calibrations[i].error_offset_v;
                }
            }
        }
        for i in 0..n_ch {
            states[i] = pid_step(errors[i], states[i], &setup.servo[i], dt);
            let d = &mut diagnostics[i];
            if states[i].fault {
                d.fault = true;
            }
            if errors[i].abs() < thresholds[i] {
                quiet_run[i] += 1;
            } else {
                quiet_run[i] = 0;
            }
            if !states[i].locked && d.lost_at_s.is_none() && !d.fault && quiet_run[i] >= hold[i].max(1) {
                states[i].locked = true;
                d.locked = true;
                d.lock_acquired_s.get_or_insert((k + 1) as f64 * dt);
            }
            delta_b[i].push(field_readout(states[i].output_v, &setup.servo[i], &run.constants));
        }
    }
    for (d, s) in diagnostics.iter_mut().zip(&states) {
        d.locked = d.locked && s.locked;
    }

    Ok(LockedRun {
        delta_b: delta_b
            .into_iter()
            .map(|v| TimeSeries::new(run.decimated_rate_hz, v, Unit::Tesla))
            .collect::<Result<Vec<_>>>()?,
        diagnostics,
        calibrations: setup.calibrations.clone(),
        servo: setup.servo.clone(),
        predicted_bandwidth_hz: setup.predicted_bandwidth_hz.clone(),
        mean_photocurrent_a: current_sum / (n_out * decimation) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::NoiseModel;
    use proptest::prelude::*;

    fn pi_only(kp: f64, ki: f64) -> ServoConfig {
        ServoConfig {
            kp,
            ki,
            kd: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_error_from_rest() {
        let s = pid_step(0.0, ServoState::default(), &pi_only(1.0, 1.0), 1e-3);
        assert_eq!(s.output_v, 0.0);
    }

    #[test]
    fn pure_proportional() {
        let s = pid_step(0.5, ServoState::default(), &pi_only(2.0, 0.0), 1e-3);
        assert_eq!(s.output_v, 1.0);
    }

    #[test]
    fn discrete_integral() {
        let cfg = pi_only(0.0, 10.0);
        let mut s = ServoState::default();
        for _ in 0..1000 {
            s = pid_step(0.1, s, &cfg, 1e-3);
        }
        assert!((s.output_v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn anti_windup_holds_integrator() {
        let cfg = ServoConfig {
            output_limits_v: [-1.0, 1.0],
            ..pi_only(0.0, 100.0)
        };
        let mut s = ServoState::default();
        for _ in 0..1000 {
            s = pid_step(1.0, s, &cfg, 1e-3);
        }
        assert_eq!(s.output_v, 1.0);
        assert!(s.integrator_v <= 0.01 + 1e-12);
        // recovers immediately once the error reverses
        s = pid_step(-1.0, s, &cfg, 1e-3);
        assert!(s.output_v < 1.0);
    }

    #[test]
    fn non_finite_error_faults_and_freezes() {
        let cfg = pi_only(1.0, 1.0);
        let s = pid_step(0.2, ServoState::default(), &cfg, 1e-3);
        let f = pid_step(f64::NAN, s, &cfg, 1e-3);
        assert!(f.fault);
        assert_eq!(f.output_v, s.output_v);
        let g = pid_step(0.3, f, &cfg, 1e-3);
        assert_eq!(g, f);
    }

    #[test]
    fn derivative_term() {
        let cfg = ServoConfig {
            kd: 0.01,
            ..pi_only(0.0, 0.0)
        };
        let s = pid_step(0.2, ServoState::default(), &cfg, 1e-3);
        assert!((s.output_v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn readout_examples() {
        let c = PhysicalConstants::default();
        let cfg = ServoConfig::default();
        assert_eq!(field_readout(0.0, &cfg, &c), 0.0);
        let b = field_readout(1e-3, &cfg, &c);
        assert!((b - 35.68e-9).abs() < 0.01e-9, "{b}");
        assert_eq!(field_readout(-1e-3, &cfg, &c), -b);
    }

    proptest! {
        #[test]
        fn output_within_limits(errors in proptest::collection::vec(-100.0f64..100.0, 1..50),
                                kp in 0.0f64..10.0, ki in 0.0f64..1e3) {
            let cfg = ServoConfig { output_limits_v: [-2.0, 3.0], ..pi_only(kp, ki) };
            let mut s = ServoState::default();
            for e in errors {
                s = pid_step(e, s, &cfg, 2e-4);
                prop_assert!(s.output_v >= -2.0 && s.output_v <= 3.0);
            }
        }

        #[test]
        fn readout_is_linear(v in -10.0f64..10.0, w in -10.0f64..10.0, a in -5.0f64..5.0) {
            let c = PhysicalConstants::default();
            let cfg = ServoConfig::default();
            let lhs = field_readout(a * v + w, &cfg, &c);
            let rhs = a * field_readout(v, &cfg, &c) + field_readout(w, &cfg, &c);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (lhs.abs() + rhs.abs() + 1e-15));
        }
    }

    fn quiet_run(duration_s: f64) -> RunConfig {
        RunConfig {
            duration_s,
            noise: NoiseModel::quiet(),
            ..RunConfig::reference()
        }
    }

    #[test]
    fn acquisition_finds_bias_resonances() {
        let run = quiet_run(0.1);
        let cals = acquire(&run).unwrap();
        for (i, cal) in cals.iter().enumerate() {
            let truth = resonance_center(run.channel_bias_t(i).unwrap(), &run.constants, run.channels[i].ensemble.transition)
                .unwrap();
            assert!((cal.center_hz - truth).abs() < 1.0, "{} vs {truth}", cal.center_hz);
            assert!(cal.slope_v_per_hz > 0.0);
        }
        // 42 µT apart
        assert!(((cals[0].center_hz - cals[1].center_hz).abs() - 1.177008e6).abs() < 2.0);
    }

    #[test]
    fn measured_slope_matches_steady_state_model() {
        let run = quiet_run(0.1);
        let cals = acquire(&run).unwrap();
        let ch = &run.channels[0];
        let rs = build_resonance_set(cals[0].center_hz, &ch.ensemble);
        let h = 1.0;
        let da1 = (lockin_first_harmonic(cals[0].center_hz + h, ch.mod_deviation_hz, &rs, ch.ensemble.fwhm_hz)
            - lockin_first_harmonic(cals[0].center_hz - h, ch.mod_deviation_hz, &rs, ch.ensemble.fwhm_hz))
            / (2.0 * h);
        let expected = ch.ensemble.baseline_photocurrent_a * da1 * run.detector.transimpedance_ohm;
        assert!(((cals[0].slope_v_per_hz - expected) / expected).abs() < 0.01, "{} vs {expected}", cals[0].slope_v_per_hz);
    }

    #[test]
    fn tuned_loop_hits_requested_bandwidth() {
        let model = LoopModel::new(&LockInSettings::default(), 100e3, 5e3, 1e6, 2.1e-7).unwrap();
        let tuned = auto_tune(&ServoConfig::default(), &model).unwrap();
        let bw = model.bandwidth(&tuned).unwrap();
        assert!((bw - 300.0).abs() < 0.5, "{bw}");
        assert!(model.peak(&tuned) < 1.06);
        let doubled = auto_tune(
            &ServoConfig {
                target_bandwidth_hz: 400.0,
                ..Default::default()
            },
            &model,
        )
        .unwrap();
        assert!(model.bandwidth(&doubled).unwrap() > bw);
    }

    #[test]
    fn static_offset_is_tracked_exactly() {
        let run = quiet_run(0.6);
        let n = (run.duration_s * run.decimated_rate_hz) as usize;
        let db = 100e-9;
        let step: Vec<TimeSeries> = (0..2)
            .map(|i| {
                TimeSeries::new(
                    run.decimated_rate_hz,
                    vec![if i == 0 { db } else { 0.0 }; n],
                    Unit::Tesla,
                )
                .unwrap()
            })
            .collect();
        let out = run_locked(&run, &step).unwrap();
        out.check().unwrap();
        let v = *out.delta_b[0].samples().last().unwrap() * run.constants.gamma_e_hz_per_t / run.servo[0].alpha_hz_per_v;
        let alpha_v = run.servo[0].alpha_hz_per_v * v;
        let gamma_db = run.constants.gamma_e_hz_per_t * db;
        assert!(((alpha_v - gamma_db) / gamma_db).abs() < 1e-3, "{alpha_v} vs {gamma_db}");
        assert!(out.delta_b[1].samples().last().unwrap().abs() < 1e-3 * db);
    }

    #[test]
    fn step_response_settles() {
        let mut run = RunConfig::reference();
        run.duration_s = 0.6;
        run.noise.env_pink_amplitude_t_per_rthz = 0.0;
        run.noise.line_peaks.clear();
        let n = (run.duration_s * run.decimated_rate_hz) as usize;
        let step_at = n / 2;
        let applied: Vec<TimeSeries> = (0..2)
            .map(|i| {
                let v = (0..n).map(|k| if i == 0 && k >= step_at { 10e-9 } else { 0.0 }).collect();
                TimeSeries::new(run.decimated_rate_hz, v, Unit::Tesla).unwrap()
            })
            .collect();
        let out = run_locked(&run, &applied).unwrap();
        out.check().unwrap();
        let mean = |ts: &TimeSeries, a: usize, b: usize| ts.samples()[a..b].iter().sum::<f64>() / (b - a) as f64;
        let before = mean(&out.delta_b[0], step_at - 1000, step_at);
        let after = mean(&out.delta_b[0], n - 1000, n);
        assert!(((after - before) - 10e-9).abs() < 0.2e-9, "{}", after - before);
        let other = mean(&out.delta_b[1], n - 1000, n) - mean(&out.delta_b[1], step_at - 1000, step_at);
        assert!(other.abs() < 0.2e-9, "{other}");
    }

    #[test]
    fn runs_are_deterministic() {
        let mut run = RunConfig::reference();
        run.duration_s = 0.2;
        let a = run_locked(&run, &[]).unwrap();
        let b = run_locked(&run, &[]).unwrap();
        assert_eq!(a.delta_b, b.delta_b);
    }

    #[test]
    fn lock_loss_is_flagged() {
        let run = quiet_run(0.3);
        let n = (run.duration_s * run.decimated_rate_hz) as usize;
        // 20 µT jump moves the resonance ~560 kHz, far outside the capture range
        let applied: Vec<TimeSeries> = (0..2)
            .map(|_| {
                let v = (0..n).map(|k| if k > n / 2 { 20e-6 } else { 0.0 }).collect();
                TimeSeries::new(run.decimated_rate_hz, v, Unit::Tesla).unwrap()
            })
            .collect();
        let out = run_locked(&run, &applied).unwrap();
        assert!(out.check().is_err());
        assert!(out.diagnostics[0].lost_at_s.is_some());
        assert!(out.diagnostics[0].invalid_samples() > 0);
        assert!(!out.all_locked());
    }
}
