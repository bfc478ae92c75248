//! Acceptance criteria. Prints one PASS/FAIL line each and exits non-zero if
//! any criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use nvmux_core::analysis::{
    apply_filters, fit_derivative_lorentzian_sum, gradiometer, noise_equivalent_bandwidth, sensitivity, sine_fit,
    welch_psd, default_segment_len, FilterSpec, FitGuess,
};
use nvmux_core::field::{generate_environmental_noise, NoiseModel};
use nvmux_core::model::{seeded_stream, streams};
use nvmux_core::scenario::{
    analyze_noise, noise_result, scenario_bandwidth, scenario_calibrate, scenario_crosstalk, scenario_noise,
    scenario_sweep,
};
use nvmux_core::servo::run_locked;
use nvmux_core::signal::crosstalk_matrix;
use nvmux_core::{RunConfig, Spectrum, SpectrumKind, TimeSeries, Unit};

// Tolerances.
const SEPARATION_TOL_HZ: f64 = 10e3;
const SWEEP_BUDGET_S: f64 = 10.0;
const ROUND_TRIP_CENTER_TOL_HZ: f64 = 1e3;
const ROUND_TRIP_FWHM_TOL: f64 = 0.01;
const ROUND_TRIP_DRAWS: usize = 50;
const SLOPE_TOL: f64 = 0.02;
const CALIBRATE_BUDGET_S: f64 = 60.0;
const BANDWIDTH_RANGE_HZ: (f64, f64) = (200.0, 400.0);
const BANDWIDTH_SPREAD: f64 = 0.05;
const WHITE_SENSITIVITY_TOL: f64 = 0.05;
const PRESET_RANGE_T: (f64, f64) = (18e-12, 26e-12);
const NOISE_BUDGET_S: f64 = 120.0;
const COMMON_MODE_REJECTION_DB: f64 = 40.0;
const QUADRATURE_TOL: f64 = 0.10;
const CROSSTALK_LIMIT: f64 = 0.03;
const SHOT_TOL: f64 = 0.15;
const PARSEVAL_TOL: f64 = 0.03;
const PARSEVAL_TRACES: u64 = 20;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn default_run() -> RunConfig {
    RunConfig::reference()
}

fn c1_separation() -> Outcome {
    let run = default_run();
    let db = (run.channel_bias_t(1).map_err(|e| e.to_string())? - run.channel_bias_t(0).map_err(|e| e.to_string())?).abs();
    let expected = run.constants.gamma_e_hz_per_t * db;
    let t0 = Instant::now();
    let r = scenario_sweep(&run).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let sep = r.scalar("separation_hz").ok_or("no separation in summary")?;
    ensure(
        (db - 42e-6).abs() < 1e-9 && (sep - expected).abs() < SEPARATION_TOL_HZ && elapsed < SWEEP_BUDGET_S,
        format!("bias difference {:.3} uT, separation {sep:.1} Hz vs {expected:.1} Hz, {elapsed:.2} s", db * 1e6),
    )
}

fn c2_round_trip() -> Outcome {
    const HF: f64 = 2.16e6;
    let mut rng = seeded_stream(2, streams::USER_BASE);
    let mut worst_center: f64 = 0.0;
    let mut worst_fwhm: f64 = 0.0;
    for draw in 0..ROUND_TRIP_DRAWS {
        let base = 2.870e9 + rng.random_range(-60e6..60e6);
        // Around the operating separation; lines of different sets stay at
        // least 0.56 MHz apart, so no pair overlaps within a linewidth.
        let sep = rng.random_range(0.8e6..1.6e6);
        let sets: Vec<(f64, f64, Vec<f64>)> = [base, base + sep]
            .iter()
            .map(|c| {
                let g = rng.random_range(120e3..400e3);
                let scale = rng.random_range(0.3..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                let amps = [1.0, 2.0, 3.0, 2.0, 1.0].iter().map(|w| w * scale * rng.random_range(0.8..1.2)).collect();
                (*c, g, amps)
            })
            .collect();
        let lo = base - 8e6;
        let hi = base + sep + 8e6;
        let n = 2000;
        let f: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = f
            .iter()
            .map(|x| {
                sets.iter()
                    .map(|(c, g, amps)| {
                        amps.iter()
                            .enumerate()
                            .map(|(k, a): (usize, &f64)| {
                                let d = x - c - (k as f64 - 2.0) * HF;
                                let hw = g / 2.0;
                                a * 2.0 * d * hw.powi(3) / (d * d + hw * hw).powi(2)
                            })
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        let guesses: Vec<FitGuess> = sets
            .iter()
            .map(|(c, g, _)| FitGuess {
                center_hz: c + rng.random_range(-0.3..0.3) * g,
                fwhm_hz: g * rng.random_range(0.8..1.25),
            })
            .collect();
        let spectrum = Spectrum::new(f, y, SpectrumKind::LockInResponse).map_err(|e| e.to_string())?;
        let fit = fit_derivative_lorentzian_sum(&spectrum, 2, 5, HF, &guesses)
            .map_err(|e| format!("draw {draw}: {e}"))?;
        for (set, (c, g, _)) in fit.sets.iter().zip(&sets) {
            worst_center = worst_center.max((set.center_hz - c).abs());
            worst_fwhm = worst_fwhm.max((set.fwhm_hz / g - 1.0).abs());
        }
    }
    ensure(
        worst_center < ROUND_TRIP_CENTER_TOL_HZ && worst_fwhm < ROUND_TRIP_FWHM_TOL,
        format!("{ROUND_TRIP_DRAWS} draws, worst center error {worst_center:.3e} Hz, worst FWHM error {worst_fwhm:.3e}"),
    )
}

fn c3_calibration() -> Outcome {
    let run = default_run();
    let t0 = Instant::now();
    let r = scenario_calibrate(&run).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let slopes: Vec<f64> = run
        .channels
        .iter()
        .map(|c| r.scalar(&format!("slope_ch{}", c.id())).ok_or(format!("no slope for channel {}", c.id())))
        .collect::<Result<_, _>>()?;
    ensure(
        slopes.iter().all(|s| (s - 1.0).abs() <= SLOPE_TOL) && elapsed < CALIBRATE_BUDGET_S && r.failure.is_none(),
        format!("slopes {slopes:.4?}, {elapsed:.2} s"),
    )
}

fn c4_bandwidth() -> Outcome {
    let mut all = Vec::new();
    for seed in [1, 2, 3] {
        let run = RunConfig {
            seed,
            ..default_run()
        };
        let r = scenario_bandwidth(&run).map_err(|e| e.to_string())?;
        for c in &run.channels {
            all.push(
                r.scalar(&format!("f_3db_ch{}_hz", c.id()))
                    .ok_or(format!("seed {seed}: no crossing for channel {}", c.id()))?,
            );
        }
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(0.0, f64::max);
    ensure(
        lo >= BANDWIDTH_RANGE_HZ.0 && hi <= BANDWIDTH_RANGE_HZ.1 && hi / lo - 1.0 <= BANDWIDTH_SPREAD,
        format!("f_3db over seeds 1..3 and both channels: {all:.1?} Hz"),
    )
}

fn c5_sensitivity() -> Outcome {
    // White-noise oracle: σ = S√f_NEP, reported value σ/√(2 f_NEP) = S/√2.
    let s = 15e-12;
    let rate = 5e3;
    let model = NoiseModel {
        env_white_floor_t_per_rthz: s,
        ..NoiseModel::quiet()
    };
    let trace = generate_environmental_noise(100.0, rate, &model, &mut seeded_stream(5, streams::USER_BASE))
        .map_err(|e| e.to_string())?;
    let chain = [FilterSpec::BrickwallBandpass { lo_hz: 25.0, hi_hz: 300.0 }];
    let f_nep = noise_equivalent_bandwidth(&chain, rate).map_err(|e| e.to_string())?;
    let filtered = apply_filters(&trace, &chain).map_err(|e| e.to_string())?;
    let white = sensitivity(&filtered, f_nep, &chain, "white").map_err(|e| e.to_string())?;
    let ratio = white.sensitivity_t_rthz / (s / 2f64.sqrt());

    let run = default_run();
    let t0 = Instant::now();
    let r = scenario_noise(&run).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed().as_secs_f64();
    let preset: Vec<f64> = run
        .channels
        .iter()
        .map(|c| r.scalar(&format!("sensitivity_ch{}_t_per_rthz", c.id())).ok_or("missing sensitivity"))
        .collect::<Result<_, _>>()?;
    ensure(
        (ratio - 1.0).abs() <= WHITE_SENSITIVITY_TOL
            && preset.iter().all(|v| (PRESET_RANGE_T.0..=PRESET_RANGE_T.1).contains(v))
            && elapsed < NOISE_BUDGET_S,
        format!(
            "white: f_NEP {f_nep:.2} Hz, reported/(S/sqrt2) = {ratio:.4}; preset channels {:.2?} pT/rtHz over {} s in {elapsed:.1} s",
            preset.iter().map(|v| v * 1e12).collect::<Vec<_>>(),
            run.duration_s
        ),
    )
}

fn c6_gradiometry() -> Outcome {
    let run = default_run();
    // Common mode on: gradiometer below each channel.
    let locked = run_locked(&run, &[]).map_err(|e| e.to_string())?;
    locked.check().map_err(|e| e.to_string())?;
    let (reports, grad) = analyze_noise(&run, &locked).map_err(|e| e.to_string())?;
    let grad = grad.ok_or("no gradiometer")?;
    let below = reports.iter().all(|r| grad.sensitivity_t_rthz < r.sensitivity_t_rthz);

    // Injected common-mode tone.
    let tone_run = RunConfig {
        duration_s: 20.0,
        ..run.clone()
    };
    let (amp, f_tone) = (10e-9, 37.0);
    let n = (tone_run.duration_s * tone_run.decimated_rate_hz).round() as usize;
    let tone: Vec<f64> = (0..n)
        .map(|k| amp * (2.0 * PI * f_tone * k as f64 / tone_run.decimated_rate_hz).sin())
        .collect();
    let applied = TimeSeries::new(tone_run.decimated_rate_hz, tone, Unit::Tesla).map_err(|e| e.to_string())?;
    let locked = run_locked(&tone_run, &[applied.clone(), applied]).map_err(|e| e.to_string())?;
    locked.check().map_err(|e| e.to_string())?;
    let skip = |t: &TimeSeries| t.skip_seconds(1.0).map_err(|e| e.to_string());
    let a = skip(&locked.delta_b[0])?;
    let b = skip(&locked.delta_b[1])?;
    let g = gradiometer(&a, &b).map_err(|e| e.to_string())?;
    let fit = |t: &TimeSeries| sine_fit(t.samples(), t.sample_rate_hz(), f_tone).map(|p| p.0).map_err(|e| e.to_string());
    let (amp_a, amp_b, amp_g) = (fit(&a)?, fit(&b)?, fit(&g)?);
    let rejection_db = 20.0 * (amp_a.min(amp_b) / amp_g).log10();

    // Common mode off: quadrature sum.
    let mut independent = run.clone();
    independent.noise.common_mode_fraction = 0.0;
    let locked = run_locked(&independent, &[]).map_err(|e| e.to_string())?;
    locked.check().map_err(|e| e.to_string())?;
    let (ind, ind_grad) = analyze_noise(&independent, &locked).map_err(|e| e.to_string())?;
    let ind_grad = ind_grad.ok_or("no gradiometer")?;
    let quadrature = (ind[0].sigma_t.powi(2) + ind[1].sigma_t.powi(2)).sqrt() / 2f64.sqrt();
    let ratio = ind_grad.sigma_t / (2f64.sqrt() * quadrature);

    ensure(
        below && rejection_db >= COMMON_MODE_REJECTION_DB && (ratio - 1.0).abs() <= QUADRATURE_TOL,
        format!(
            "grad {:.2} pT/rtHz vs channels {:.2?}; {f_tone} Hz tone {:.3} nT per channel, rejection {rejection_db:.1} dB; \
             independent grad/(sqrt2 x channel rms) = {ratio:.3}",
            grad.sensitivity_t_rthz * 1e12,
            reports.iter().map(|r| r.sensitivity_t_rthz * 1e12).collect::<Vec<_>>(),
            amp_a * 1e9,
        ),
    )
}

fn off_diagonal(m: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                worst = worst.max(*v);
            }
        }
    }
    worst
}

fn c7_crosstalk() -> Outcome {
    let run = default_run();
    let order4 = off_diagonal(&crosstalk_matrix(&run).map_err(|e| e.to_string())?);
    let mut first = run.clone();
    first.lockin.lpf_order = 1;
    let order1 = off_diagonal(&crosstalk_matrix(&first).map_err(|e| e.to_string())?);
    ensure(
        run.lockin.lpf_order == 4 && order4 < CROSSTALK_LIMIT && order1 > order4,
        format!("max off-diagonal {order4:.4} at order 4, {order1:.4} at order 1"),
    )
}

fn c8_shot_noise() -> Outcome {
    let mut run = default_run();
    run.noise = NoiseModel {
        shot_noise_enabled: true,
        ..NoiseModel::quiet()
    };
    let r = noise_result(&run).map_err(|e| e.to_string())?;
    let mut ratios = Vec::new();
    for c in &run.channels {
        let id = c.id();
        let measured = r.scalar(&format!("sensitivity_ch{id}_t_per_rthz")).ok_or("missing sensitivity")?;
        let limit = r.scalar(&format!("shot_noise_limit_ch{id}_t_per_rthz")).ok_or("missing limit")?;
        ratios.push(measured / limit);
    }
    ensure(
        ratios.iter().all(|q| (q - 1.0).abs() <= SHOT_TOL),
        format!("measured / shot-noise limit per channel: {ratios:.3?}"),
    )
}

fn c9_determinism() -> Outcome {
    let run = default_run();
    let short = RunConfig {
        duration_s: 5.0,
        ..run.clone()
    };
    type Scenario = fn(&RunConfig) -> nvmux_core::Result<nvmux_core::ScenarioResult>;
    let cases: [(&str, Scenario, &RunConfig); 5] = [
        ("sweep", scenario_sweep, &run),
        ("calibrate", scenario_calibrate, &run),
        ("bandwidth", scenario_bandwidth, &run),
        ("crosstalk", scenario_crosstalk, &run),
        ("noise", noise_result, &short),
    ];
    let mut checked = 0;
    for (name, f, cfg) in cases {
        let csvs = |r: nvmux_core::ScenarioResult| -> Result<Vec<Vec<u8>>, String> {
            r.tables.iter().map(|t| t.to_csv().map_err(|e| e.to_string())).collect()
        };
        let a = csvs(f(cfg).map_err(|e| e.to_string())?)?;
        let b = csvs(f(cfg).map_err(|e| e.to_string())?)?;
        if a != b {
            return Err(format!("{name}: CSV output differs between reruns"));
        }
        checked += a.len();
    }
    Ok(format!("{checked} CSV tables byte-identical across reruns"))
}

fn c10_parseval() -> Outcome {
    let model = NoiseModel {
        env_white_floor_t_per_rthz: 15e-12,
        env_pink_amplitude_t_per_rthz: 50e-12,
        ..NoiseModel::quiet()
    };
    let mut worst: f64 = 0.0;
    for seed in 0..PARSEVAL_TRACES {
        let trace = generate_environmental_noise(60.0, 5e3, &model, &mut seeded_stream(seed, streams::USER_BASE))
            .map_err(|e| e.to_string())?;
        let psd = welch_psd(&trace, default_segment_len(&trace, 10.0), 0.5).map_err(|e| e.to_string())?;
        let power = psd.integrate(0.0, f64::INFINITY);
        worst = worst.max((power / trace.variance() - 1.0).abs());
    }
    ensure(
        worst <= PARSEVAL_TOL,
        format!("{PARSEVAL_TRACES} traces, worst |integral/variance - 1| = {worst:.4}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 resonance separation", c1_separation),
        ("2 lineshape round trip", c2_round_trip),
        ("3 calibration slopes", c3_calibration),
        ("4 closed-loop bandwidth", c4_bandwidth),
        ("5 sensitivity formula and preset", c5_sensitivity),
        ("6 gradiometry", c6_gradiometry),
        ("7 multiplexing isolation", c7_crosstalk),
        ("8 shot-noise consistency", c8_shot_noise),
        ("9 determinism", c9_determinism),
        ("10 Parseval", c10_parseval),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
