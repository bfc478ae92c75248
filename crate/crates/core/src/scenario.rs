//! End-to-end experiment runners and their tabular output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    apply_filters, fit_derivative_lorentzian_sum, fit_proportional, gradiometer, log_grid, measure_bandwidth,
    noise_equivalent_bandwidth, sensitivity, shot_noise_limit, sine_fit, welch_psd, FitGuess, SensitivityReport,
};
use crate::config::{serialize_config, RunConfig};
use crate::error::{Error, Result};
use crate::field::NoiseModel;
use crate::model::{Spectrum, SpectrumKind, TimeSeries, Unit};
use crate::physics::resonance_center;
use crate::servo::{prepare_loops, run_locked, run_locked_with, LockedRun, LoopSetup};
use crate::signal::{crosstalk_matrix, DetectorFrontEnd, LockIn, MwChannelState, Synthesizer};

/// Noise runs shorter than this are rejected.
pub const MIN_NOISE_DURATION_S: f64 = 100.0;

/// `[sweep]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub step_hz: f64,
    pub dwell_s: f64,
    /// Lock-in output is averaged over the end of each dwell.
    pub average_s: f64,
    /// Sweep extends this far beyond the outermost resonance centers.
    pub margin_hz: f64,
    /// FM deviation during the sweep as a fraction of the channel FWHM.
    pub deviation_fwhm: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            step_hz: 5e3,
            dwell_s: 5e-3,
            average_s: 2e-3,
            margin_hz: 5.5e6,
            deviation_fwhm: 0.05,
        }
    }
}

impl SweepSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_hz > 0.0) || !(self.margin_hz > 0.0) || !(self.deviation_fwhm > 0.0) {
            return Err(Error::Validation(
                "sweep step_hz, margin_hz and deviation_fwhm must be positive".into(),
            ));
        }
        if !(self.average_s > 0.0 && self.average_s <= self.dwell_s) {
            return Err(Error::Validation("sweep needs 0 < average_s <= dwell_s".into()));
        }
        Ok(())
    }
}

/// `[calibrate]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSettings {
    pub frequency_hz: f64,
    /// Peak coil-current modulation amplitudes, A.
    pub amplitudes_a: Vec<f64>,
    pub settle_s: f64,
    /// Rounded down to whole modulation periods.
    pub measure_s: f64,
}

impl Default for CalibrateSettings {
    fn default() -> Self {
        Self {
            frequency_hz: 30.0,
            amplitudes_a: vec![0.05e-3, 0.1e-3, 0.2e-3, 0.5e-3, 1.0e-3],
            settle_s: 0.2,
            measure_s: 1.0,
        }
    }
}

impl CalibrateSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0) || !(self.measure_s * self.frequency_hz >= 1.0) || !(self.settle_s >= 0.0) {
            return Err(Error::Validation(
                "calibrate needs frequency_hz > 0, settle_s >= 0 and at least one period in measure_s".into(),
            ));
        }
        if self.amplitudes_a.len() < 2 || self.amplitudes_a.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Validation(
                "calibrate needs two or more finite, nonnegative amplitudes".into(),
            ));
        }
        Ok(())
    }
}

/// `[bandwidth]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandwidthSettings {
    pub f_lo_hz: f64,
    pub f_hi_hz: f64,
    pub points: usize,
    pub test_amplitude_t: f64,
    pub settle_s: f64,
    pub measure_s: f64,
}

impl Default for BandwidthSettings {
    fn default() -> Self {
        Self {
            f_lo_hz: 10.0,
            f_hi_hz: 1000.0,
            points: 25,
            test_amplitude_t: 50e-9,
            settle_s: 0.1,
            measure_s: 0.4,
        }
    }
}

impl BandwidthSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_lo_hz > 0.0 && self.f_lo_hz < self.f_hi_hz) || self.points < 2 {
            return Err(Error::Validation(
                "bandwidth grid needs 0 < f_lo_hz < f_hi_hz and two or more points".into(),
            ));
        }
        if !(self.test_amplitude_t > 0.0) || !(self.measure_s > 0.0) || !(self.settle_s >= 0.0) {
            return Err(Error::Validation(
                "bandwidth test_amplitude_t and measure_s must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Sweep,
    Lock,
    Calibrate,
    Bandwidth,
    Noise,
    Gradiometer,
    Crosstalk,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Sweep => "sweep",
            ScenarioKind::Lock => "lock",
            ScenarioKind::Calibrate => "calibrate",
            ScenarioKind::Bandwidth => "bandwidth",
            ScenarioKind::Noise => "noise",
            ScenarioKind::Gradiometer => "gradiometer",
            ScenarioKind::Crosstalk => "crosstalk",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, headers: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, header: &str) -> Option<Vec<f64>> {
        let i = self.headers.iter().position(|h| h == header)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// RFC 4180 CSV with a header row; numbers in shortest round-trip form.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub config: RunConfig,
    pub tables: Vec<Table>,
    /// Scalars keyed by name with a unit suffix.
    pub summary: BTreeMap<String, f64>,
    /// Set when the scenario ran but its analysis failed; tables are still valid.
    pub failure: Option<String>,
}

impl ScenarioResult {
    fn new(scenario: ScenarioKind, run: &RunConfig) -> Self {
        Self {
            scenario,
            seed: run.seed,
            config: run.clone(),
            tables: Vec::new(),
            summary: BTreeMap::new(),
            failure: None,
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.summary.get(key).copied()
    }

    pub fn summary_json(&self) -> Result<serde_json::Value> {
        let mut map = serde_json::Map::new();
        map.insert("scenario".into(), self.scenario.name().into());
        map.insert("seed".into(), self.seed.into());
        for (k, v) in &self.summary {
            map.insert(k.clone(), serde_json::json!(v));
        }
        map.insert(
            "failure".into(),
            self.failure.clone().map_or(serde_json::Value::Null, Into::into),
        );
        map.insert("config".into(), serde_json::to_value(&self.config)?);
        map.insert("config_toml".into(), serialize_config(&self.config)?.into());
        Ok(serde_json::Value::Object(map))
    }

    /// Writes `<table>.csv` for every table and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            fs::write(dir.join(format!("{}.csv", t.name)), t.to_csv()?)?;
        }
        let json = serde_json::to_string_pretty(&self.summary_json()?)?;
        fs::write(dir.join("summary.json"), json + "\n")?;
        Ok(())
    }
}

fn bias_resonances(run: &RunConfig) -> Result<Vec<f64>> {
    (0..run.channels.len())
        .map(|i| resonance_center(run.channel_bias_t(i)?, &run.constants, run.channels[i].ensemble.transition))
        .collect()
}

/// Index of the zero crossing between the global maximum and minimum of `y`,
/// linearly interpolated.
fn central_zero_crossing(f: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let imax = (0..y.len()).max_by(|a, b| y[*a].total_cmp(&y[*b]))?;
    let imin = (0..y.len()).min_by(|a, b| y[*a].total_cmp(&y[*b]))?;
    let (lo, hi) = (imin.min(imax), imin.max(imax));
    for k in lo..hi {
        if (y[k] <= 0.0) != (y[k + 1] <= 0.0) {
            let t = y[k] / (y[k] - y[k + 1]);
            return Some((f[k] + t * (f[k + 1] - f[k]), (f[imax] - f[imin]).abs()));
        }
    }
    None
}

/// One microwave source swept in steps across every resonance; each channel's
/// lock-in x output is recorded. Fits two derivative-Lorentzian sets to the
/// summed response.
pub fn scenario_sweep(run: &RunConfig) -> Result<ScenarioResult> {
    run.validate()?;
    let s = &run.sweep;
    let n_ch = run.channels.len();
    let centers = bias_resonances(run)?;
    let lo = centers.iter().cloned().fold(f64::INFINITY, f64::min) - s.margin_hz;
    let hi = centers.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + s.margin_hz;
    let steps = ((hi - lo) / s.step_hz).floor() as usize + 1;

    let ensembles: Vec<_> = run.channels.iter().map(|c| c.ensemble.clone()).collect();
    let mw: Vec<MwChannelState> = run
        .channels
        .iter()
        .map(|c| MwChannelState {
            mod_deviation_hz: s.deviation_fwhm * c.ensemble.fwhm_hz,
            ..c.mw_state(lo)
        })
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
        .map(|c| {
            LockIn::new(
                &run.lockin.for_reference(c.mod_frequency_hz, c.mod_phase_rad, run.decimated_rate_hz),
                run.sample_rate_hz,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let dwell = ((s.dwell_s * run.decimated_rate_hz).round() as usize).max(1);
    let average = ((s.average_s * run.decimated_rate_hz).round() as usize).clamp(1, dwell);
    let decimation = run.decimation();

    let mut headers = vec!["mw_frequency_hz".to_string()];
    headers.extend(run.channels.iter().map(|c| format!("lockin_x_ch{}_v", c.id())));
    let mut table = Table {
        name: "sweep".into(),
        headers,
        rows: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let f = lo + k as f64 * s.step_hz;
        for i in 0..n_ch {
            synth.set_carrier(i, f);
        }
        let mut sums = vec![0.0; n_ch];
        for out in 0..dwell {
            for _ in 0..decimation {
                let v = front.process(synth.next_sample(&centers));
                for (i, li) in lockins.iter_mut().enumerate() {
                    if let Some((x, _)) = li.push(v) {
                        if out >= dwell - average {
                            sums[i] += x;
                        }
                    }
                }
            }
        }
        let mut row = vec![f];
        row.extend(sums.iter().map(|v| v / average as f64));
        table.rows.push(row);
    }

    let mut result = ScenarioResult::new(ScenarioKind::Sweep, run);
    result.summary.insert("steps".into(), steps as f64);
    result.summary.insert("mod_deviation_ch1_hz".into(), mw[0].mod_deviation_hz);
    match fit_sweep(run, &table) {
        Ok(summary) => result.summary.extend(summary),
        Err(e) => result.failure = Some(e.to_string()),
    }
    result.tables.push(table);
    Ok(result)
}

/// Fit of a sweep table: one line set per channel, guessed from that
/// channel's own column, fitted jointly to the sum of all columns.
pub fn fit_sweep(run: &RunConfig, table: &Table) -> Result<BTreeMap<String, f64>> {
    let f = table
        .column("mw_frequency_hz")
        .ok_or_else(|| Error::Fit("sweep table has no frequency column".into()))?;
    let columns: Vec<Vec<f64>> = run
        .channels
        .iter()
        .map(|c| {
            table
                .column(&format!("lockin_x_ch{}_v", c.id()))
                .ok_or_else(|| Error::Fit(format!("sweep table has no column for channel {}", c.id())))
        })
        .collect::<Result<_>>()?;
    let total: Vec<f64> = (0..f.len()).map(|k| columns.iter().map(|c| c[k]).sum()).collect();
    let guesses = columns
        .iter()
        .zip(&run.channels)
        .map(|(y, c)| {
            let (center_hz, lobes) = central_zero_crossing(&f, y)
                .ok_or_else(|| Error::Fit(format!("channel {} shows no zero crossing", c.id())))?;
            Ok(FitGuess {
                center_hz,
                fwhm_hz: 3f64.sqrt() * lobes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &run.channels[0].ensemble;
    let components = if first.three_tone { 5 } else { 3 };
    let spectrum = Spectrum::new(f, total, SpectrumKind::LockInResponse)?;
    let fit = fit_derivative_lorentzian_sum(&spectrum, guesses.len(), components, first.hyperfine_splitting_hz, &guesses)?;
    let mut out = BTreeMap::new();
    for (set, c) in fit.sets.iter().zip(&run.channels) {
        out.insert(format!("center_ch{}_hz", c.id()), set.center_hz);
        out.insert(format!("center_ch{}_std_error_hz", c.id()), set.center_std_hz);
        out.insert(format!("fwhm_ch{}_hz", c.id()), set.fwhm_hz);
        out.insert(format!("fwhm_ch{}_std_error_hz", c.id()), set.fwhm_std_hz);
    }
    if fit.sets.len() >= 2 {
        out.insert("separation_hz".into(), (fit.sets[1].center_hz - fit.sets[0].center_hz).abs());
        out.insert(
            "separation_field_t".into(),
            (fit.sets[1].center_hz - fit.sets[0].center_hz).abs() / run.constants.gamma_e_hz_per_t,
        );
    }
    out.insert("fit_residual_rms_v".into(), fit.residual_rms);
    out.insert("fit_iterations".into(), fit.iterations as f64);
    Ok(out)
}

/// Complex amplitude of the `f_hz` component over the whole slice, which must
/// span an integer number of periods.
fn single_bin(samples: &[f64], rate_hz: f64, f_hz: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (k, x) in samples.iter().enumerate() {
        let (s, c) = (2.0 * PI * f_hz * k as f64 / rate_hz).sin_cos();
        re += x * c;
        im -= x * s;
    }
    (2.0 * re / n, 2.0 * im / n)
}

/// Coil-current modulation at the calibration frequency; the locked readout
/// of each channel is compared with the field its coil calibration predicts.
pub fn scenario_calibrate(run: &RunConfig) -> Result<ScenarioResult> {
    run.validate()?;
    let cal = &run.calibrate;
    let setup = prepare_loops(run)?;
    let rate = run.decimated_rate_hz;
    let periods = (cal.measure_s * cal.frequency_hz).floor();
    let settle = (cal.settle_s * rate).round() as usize;
    let measured_len = (periods / cal.frequency_hz * rate).round() as usize;
    let mut sub = run.clone();
    sub.duration_s = (settle + measured_len) as f64 / rate;
    let n = settle + measured_len;
    let k: Vec<f64> = (0..run.channels.len()).map(|i| run.bias.calibration_t_per_a[i]).collect();

    let points = cal
        .amplitudes_a
        .par_iter()
        .map(|amp| {
            let current: Vec<f64> = (0..n)
                .map(|j| amp * (2.0 * PI * cal.frequency_hz * j as f64 / rate).sin())
                .collect();
            let applied = k
                .iter()
                .map(|ki| TimeSeries::new(rate, current.iter().map(|i| ki * i).collect(), Unit::Tesla))
                .collect::<Result<Vec<_>>>()?;
            let locked = run_locked_with(&sub, &setup, &applied)?;
            let reference = single_bin(&current[settle..], rate, cal.frequency_hz);
            let ref_mag = reference.0.hypot(reference.1);
            let per_channel: Vec<(f64, f64)> = locked
                .delta_b
                .iter()
                .map(|b| {
                    let (re, im) = single_bin(&b.samples()[settle..], rate, cal.frequency_hz);
                    let mag = re.hypot(im);
                    let in_phase = if ref_mag > 0.0 {
                        (re * reference.0 + im * reference.1) / ref_mag
                    } else {
                        0.0
                    };
                    (mag, in_phase)
                })
                .collect();
            let valid = locked.diagnostics.iter().all(|d| d.lost_at_s.is_none() && !d.fault);
            Ok((per_channel, valid))
        })
        .collect::<Result<Vec<_>>>()?;

    let ids: Vec<u32> = run.channels.iter().map(|c| c.id()).collect();
    let mut headers = vec!["current_amplitude_a".to_string()];
    for id in &ids {
        headers.push(format!("applied_ch{id}_t"));
        headers.push(format!("measured_ch{id}_t"));
        headers.push(format!("inphase_ch{id}_t"));
    }
    headers.push("valid".into());
    let mut table = Table {
        name: "calibrate".into(),
        headers,
        rows: Vec::new(),
    };
    for (amp, (per_channel, valid)) in cal.amplitudes_a.iter().zip(&points) {
        let mut row = vec![*amp];
        for (ki, (mag, in_phase)) in k.iter().zip(per_channel) {
            row.extend([ki.abs() * amp, *mag, *in_phase]);
        }
        row.push(if *valid { 1.0 } else { 0.0 });
        table.rows.push(row);
    }

    let mut result = ScenarioResult::new(ScenarioKind::Calibrate, run);
    let valid: Vec<usize> = (0..points.len()).filter(|j| points[*j].1).collect();
    result.summary.insert("valid_points".into(), valid.len() as f64);
    let mut failures = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let applied: Vec<f64> = valid.iter().map(|j| k[i].abs() * cal.amplitudes_a[*j]).collect();
        let measured: Vec<f64> = valid.iter().map(|j| points[*j].0[i].0).collect();
        let in_phase: Vec<f64> = valid.iter().map(|j| points[*j].0[i].1).collect();
        let currents: Vec<f64> = valid.iter().map(|j| cal.amplitudes_a[*j]).collect();
        match fit_proportional(&applied, &measured) {
            Ok(fit) => {
                result.summary.insert(format!("slope_ch{id}"), fit.slope);
                result.summary.insert(format!("slope_ch{id}_std_error"), fit.std_error);
            }
            Err(e) => failures.push(format!("channel {id}: {e}")),
        }
        if let Ok(fit) = fit_proportional(&currents, &in_phase) {
            result.summary.insert(format!("coil_response_ch{id}_t_per_a"), fit.slope);
        }
    }
    if !failures.is_empty() {
        result.failure = Some(failures.join("; "));
    }
    result.tables.push(table);
    Ok(result)
}

/// Ratio of recovered to applied amplitude of a sinusoidal test field applied
/// to every channel, one ratio per channel.
pub fn transfer_ratios(run: &RunConfig, setup: &LoopSetup, f_hz: f64) -> Result<Vec<f64>> {
    let b = &run.bandwidth;
    let rate = run.decimated_rate_hz;
    let periods = (b.measure_s * f_hz).ceil();
    let settle = (b.settle_s * rate).round() as usize;
    let n = settle + (periods / f_hz * rate).round() as usize;
    let mut sub = run.clone();
    sub.duration_s = n as f64 / rate;
    let wave: Vec<f64> = (0..n)
        .map(|j| b.test_amplitude_t * (2.0 * PI * f_hz * j as f64 / rate).sin())
        .collect();
    let applied = run
        .channels
        .iter()
        .map(|_| TimeSeries::new(rate, wave.clone(), Unit::Tesla))
        .collect::<Result<Vec<_>>>()?;
    let locked = run_locked_with(&sub, setup, &applied)?;
    locked.check()?;
    locked
        .delta_b
        .iter()
        .map(|t| Ok(sine_fit(&t.samples()[settle..], rate, f_hz)?.0 / b.test_amplitude_t))
        .collect()
}

/// Closed-loop transfer on a log grid and its 3 dB frequency.
pub fn scenario_bandwidth(run: &RunConfig) -> Result<ScenarioResult> {
    run.validate()?;
    let b = &run.bandwidth;
    if b.f_hi_hz >= run.decimated_rate_hz / 2.0 {
        return Err(Error::Config(format!(
            "test frequencies must stay below {} Hz",
            run.decimated_rate_hz / 2.0
        )));
    }
    let setup = prepare_loops(run)?;
    let grid = log_grid(b.f_lo_hz, b.f_hi_hz, b.points);
    let measured = measure_bandwidth(|f| transfer_ratios(run, &setup, f), &grid)?;

    let ids: Vec<u32> = run.channels.iter().map(|c| c.id()).collect();
    let mut headers = vec!["frequency_hz".to_string()];
    headers.extend(ids.iter().map(|id| format!("ratio_ch{id}")));
    let mut table = Table {
        name: "bandwidth".into(),
        headers,
        rows: Vec::new(),
    };
    for (j, f) in grid.iter().enumerate() {
        let mut row = vec![*f];
        row.extend(measured.iter().map(|m| m.transfer.values()[j]));
        table.rows.push(row);
    }
    let mut result = ScenarioResult::new(ScenarioKind::Bandwidth, run);
    for (id, m) in ids.iter().zip(&measured) {
        result.summary.insert(format!("f_3db_ch{id}_hz"), m.f3db_hz);
    }
    for (id, p) in ids.iter().zip(&setup.predicted_bandwidth_hz) {
        if let Some(p) = p {
            result.summary.insert(format!("model_f_3db_ch{id}_hz"), *p);
        }
    }
    result.summary.insert(
        "f_3db_hz".into(),
        measured.iter().map(|m| m.f3db_hz).sum::<f64>() / measured.len() as f64,
    );
    result.tables.push(table);
    Ok(result)
}

/// Sensitivity analysis of a locked run: discard, filter chain, settle,
/// then `σ/√(2 f_NEP)` per channel and for the first two channels' difference.
pub fn analyze_noise(run: &RunConfig, locked: &LockedRun) -> Result<(Vec<SensitivityReport>, Option<SensitivityReport>)> {
    let a = &run.analysis;
    let chain = a.filter_chain();
    let f_nep = noise_equivalent_bandwidth(&chain, run.decimated_rate_hz)?;
    let prepare = |t: &TimeSeries| -> Result<TimeSeries> {
        apply_filters(&t.skip_seconds(a.discard_s)?, &chain)?.skip_seconds(a.filter_settle_s)
    };
    let filtered = locked.delta_b.iter().map(prepare).collect::<Result<Vec<_>>>()?;
    let reports = filtered
        .iter()
        .zip(&run.channels)
        .map(|(t, c)| sensitivity(t, f_nep, &chain, &c.id().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let grad = match filtered.as_slice() {
        [x, y, ..] => Some(sensitivity(&gradiometer(x, y)?, f_nep, &chain, "gradiometer")?),
        _ => None,
    };
    Ok((reports, grad))
}

/// Locked run under the configured noise model: PSD and trace tables plus
/// sensitivity reports.
pub fn scenario_noise(run: &RunConfig) -> Result<ScenarioResult> {
    run.validate()?;
    if run.duration_s < MIN_NOISE_DURATION_S {
        return Err(Error::Config(format!(
            "noise runs need at least {MIN_NOISE_DURATION_S} s, got {}",
            run.duration_s
        )));
    }
    noise_result(run)
}

/// [`scenario_noise`] without the minimum-duration rule.
pub fn noise_result(run: &RunConfig) -> Result<ScenarioResult> {
    let locked = run_locked(run, &[])?;
    locked.check()?;
    let (reports, grad) = analyze_noise(run, &locked)?;
    let ids: Vec<u32> = run.channels.iter().map(|c| c.id()).collect();

    let trimmed = locked
        .delta_b
        .iter()
        .map(|t| t.skip_seconds(run.analysis.discard_s))
        .collect::<Result<Vec<_>>>()?;
    let mut asds = trimmed
        .iter()
        .map(|t| Ok(welch_psd(t, run.analysis.welch_segment_len(t), run.analysis.welch_overlap)?.to_asd()))
        .collect::<Result<Vec<_>>>()?;
    if let [x, y, ..] = trimmed.as_slice() {
        let g = gradiometer(x, y)?;
        asds.push(welch_psd(&g, run.analysis.welch_segment_len(&g), run.analysis.welch_overlap)?.to_asd());
    }
    let mut headers = vec!["frequency_hz".to_string()];
    headers.extend(ids.iter().map(|id| format!("asd_ch{id}_t_per_rthz")));
    if asds.len() > ids.len() {
        headers.push("asd_grad_t_per_rthz".into());
    }
    let mut psd = Table {
        name: "noise_psd".into(),
        headers,
        rows: Vec::new(),
    };
    for (j, f) in asds[0].frequencies_hz().iter().enumerate() {
        let mut row = vec![*f];
        row.extend(asds.iter().map(|s| s.values()[j]));
        psd.rows.push(row);
    }

    let mut headers = vec!["time_s".to_string()];
    headers.extend(ids.iter().map(|id| format!("delta_b_ch{id}_t")));
    let mut traces = Table {
        name: "traces".into(),
        headers,
        rows: Vec::with_capacity(locked.delta_b[0].len()),
    };
    let dt = 1.0 / run.decimated_rate_hz;
    for j in 0..locked.delta_b[0].len() {
        let mut row = vec![j as f64 * dt];
        row.extend(locked.delta_b.iter().map(|t| t.samples()[j]));
        traces.rows.push(row);
    }

    let mut result = ScenarioResult::new(ScenarioKind::Noise, run);
    let s = &mut result.summary;
    s.insert("f_nep_hz".into(), reports[0].f_nep_hz);
    s.insert("mean_photocurrent_a".into(), locked.mean_photocurrent_a);
    for ((id, r), cal) in ids.iter().zip(&reports).zip(&locked.calibrations) {
        s.insert(format!("sigma_ch{id}_t"), r.sigma_t);
        s.insert(format!("sensitivity_ch{id}_t_per_rthz"), r.sensitivity_t_rthz);
        let slope = cal.slope_a_per_hz(run.detector.transimpedance_ohm);
        s.insert(format!("slope_ch{id}_a_per_hz"), slope);
        s.insert(
            format!("shot_noise_limit_ch{id}_t_per_rthz"),
            shot_noise_limit(locked.mean_photocurrent_a, slope, &run.constants)?,
        );
    }
    for (id, p) in ids.iter().zip(&locked.predicted_bandwidth_hz) {
        if let Some(p) = p {
            s.insert(format!("model_f_3db_ch{id}_hz"), *p);
        }
    }
    if let Some(g) = &grad {
        s.insert("sigma_grad_t".into(), g.sigma_t);
        s.insert("sensitivity_grad_t_per_rthz".into(), g.sensitivity_t_rthz);
    }
    result.tables.push(psd);
    result.tables.push(traces);
    Ok(result)
}

/// Crosstalk matrix at the bias point.
pub fn scenario_crosstalk(run: &RunConfig) -> Result<ScenarioResult> {
    run.validate()?;
    let m = crosstalk_matrix(run)?;
    let ids: Vec<u32> = run.channels.iter().map(|c| c.id()).collect();
    let mut headers = vec!["lockin_channel".to_string()];
    headers.extend(ids.iter().map(|id| format!("from_ch{id}_ratio")));
    let mut table = Table {
        name: "crosstalk".into(),
        headers,
        rows: Vec::new(),
    };
    let mut worst: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        let mut r = vec![ids[i] as f64];
        r.extend(row);
        table.rows.push(r);
        for (j, v) in row.iter().enumerate() {
            if i != j {
                worst = worst.max(*v);
            }
        }
    }
    let mut result = ScenarioResult::new(ScenarioKind::Crosstalk, run);
    result.summary.insert("max_off_diagonal_ratio".into(), worst);
    result.tables.push(table);
    Ok(result)
}

/// The same configuration with every noise source switched off.
pub fn without_noise(run: &RunConfig) -> RunConfig {
    RunConfig {
        noise: NoiseModel::quiet(),
        ..run.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_crossing_locator() {
        let f: Vec<f64> = (0..101).map(|k| k as f64).collect();
        let y: Vec<f64> = f.iter().map(|x| crate::analysis::derivative_lorentzian(*x, 40.3, 10.0)).collect();
        let (c, sep) = central_zero_crossing(&f, &y).unwrap();
        assert!((c - 40.3).abs() < 0.05, "{c}");
        // lobes at ±Γ/(2√3)
        assert!((3f64.sqrt() * sep - 10.0).abs() < 1.5, "{sep}");
    }

    #[test]
    fn single_bin_projection() {
        let rate = 5e3;
        let x: Vec<f64> = (0..5000).map(|k| 3.0 * (2.0 * PI * 30.0 * k as f64 / rate).sin()
            + 0.5 * (2.0 * PI * 50.0 * k as f64 / rate).sin()).collect();
        let (re, im) = single_bin(&x, rate, 30.0);
        assert!((re.hypot(im) - 3.0).abs() < 1e-9);
        assert!((im + 3.0).abs() < 1e-9);
    }

    #[test]
    fn csv_uses_round_trip_numbers() {
        let mut t = Table::new("t", &["a_hz", "b_t"]);
        t.rows.push(vec![0.1, 1e-12]);
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert_eq!(text, "a_hz,b_t\n0.1,0.000000000001\n");
        let back: f64 = text.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(back, 1e-12);
    }

    #[test]
    fn settings_validation() {
        assert!(SweepSettings::default().validate().is_ok());
        assert!(SweepSettings {
            average_s: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CalibrateSettings {
            amplitudes_a: vec![1e-3],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BandwidthSettings {
            f_lo_hz: 100.0,
            f_hi_hz: 10.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn short_noise_runs_rejected() {
        let run = RunConfig {
            duration_s: 10.0,
            ..RunConfig::reference()
        };
        assert!(matches!(scenario_noise(&run), Err(Error::Config(_))));
    }

    #[test]
    fn noiseless_noise_run_is_quiet() {
        let run = RunConfig {
            duration_s: 4.0,
            ..without_noise(&RunConfig::reference())
        };
        let r = noise_result(&run).unwrap();
        for id in [1, 2] {
            let s = r.scalar(&format!("sensitivity_ch{id}_t_per_rthz")).unwrap();
            assert!(s < 0.1e-12, "{s}");
        }
    }

    #[test]
    fn zero_bias_difference_flags_degeneracy() {
        let mut run = RunConfig::reference();
        run.bias.series_current_a = 0.0;
        run.bias.magnet_curvature_t_per_mm2 = 0.0;
        let r = scenario_sweep(&run).unwrap();
        let failure = r.failure.clone().expect("degenerate fit must be reported");
        assert!(failure.contains("degenera") || failure.contains("condition"), "{failure}");
        assert!(!r.table("sweep").unwrap().rows.is_empty());
    }

    #[test]
    fn doubled_target_raises_bandwidth() {
        let mut run = without_noise(&RunConfig::reference());
        run.bandwidth.points = 9;
        let base = scenario_bandwidth(&run).unwrap().scalar("f_3db_hz").unwrap();
        for s in &mut run.servo {
            s.target_bandwidth_hz *= 2.0;
        }
        let doubled = scenario_bandwidth(&run).unwrap().scalar("f_3db_hz").unwrap();
        assert!(doubled > base, "{doubled} vs {base}");
    }

    #[test]
    fn grid_without_crossing_is_interpolation_error() {
        let mut run = without_noise(&RunConfig::reference());
        run.bandwidth.f_lo_hz = 5.0;
        run.bandwidth.f_hi_hz = 50.0;
        run.bandwidth.points = 4;
        assert!(matches!(scenario_bandwidth(&run), Err(Error::Interpolation(_))));
    }
}
