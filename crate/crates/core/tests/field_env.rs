use nvmux_core::analysis::welch_psd;
use nvmux_core::field::{generate_environmental_noise, LinePeak, NoiseModel};
use nvmux_core::model::seeded_stream;

fn only(f: impl FnOnce(&mut NoiseModel)) -> NoiseModel {
    let mut m = NoiseModel::quiet();
    f(&mut m);
    m
}

#[test]
fn white_floor_is_flat() {
    let model = only(|m| m.env_white_floor_t_per_rthz = 15e-12);
    let trace = generate_environmental_noise(100.0, 5000.0, &model, &mut seeded_stream(3, 0)).unwrap();
    let asd = welch_psd(&trace, 5000, 0.5).unwrap().to_asd();
    let band: Vec<f64> = asd
        .frequencies_hz()
        .iter()
        .zip(asd.values())
        .filter(|(f, _)| (100.0..=1000.0).contains(*f))
        .map(|(_, v)| *v)
        .collect();
    let mean = band.iter().sum::<f64>() / band.len() as f64;
    assert!((mean / 15e-12 - 1.0).abs() < 0.1, "mean ASD {mean}");
    // Individual 1 Hz bins of a 199-segment average scatter by a few percent.
    let worst = band.iter().map(|v| (v / 15e-12 - 1.0).abs()).fold(0.0, f64::max);
    assert!(worst < 0.25, "worst bin deviation {worst}");
}

#[test]
fn line_peak_carries_its_power() {
    let model = only(|m| {
        m.line_peaks = vec![LinePeak { frequency_hz: 50.0, amplitude_t_rms: 10e-12, width_hz: 0.1 }]
    });
    let trace = generate_environmental_noise(200.0, 1000.0, &model, &mut seeded_stream(8, 0)).unwrap();
    let psd = welch_psd(&trace, 20_000, 0.5).unwrap();
    let power = psd.integrate(49.0, 51.0);
    let expected = 10e-12f64.powi(2);
    assert!((power / expected - 1.0).abs() < 0.15, "line power {power:e}");
}

#[test]
fn pink_slope_matches_beta() {
    for beta in [0.8, 1.0, 1.4] {
        let model = only(|m| {
            m.env_pink_amplitude_t_per_rthz = 500e-12;
            m.env_pink_beta = beta;
            m.env_pink_corner_hz = 1e6;
        });
        let trace = generate_environmental_noise(400.0, 200.0, &model, &mut seeded_stream(21, 0)).unwrap();
        let psd = welch_psd(&trace, 4000, 0.5).unwrap();
        let (xs, ys): (Vec<f64>, Vec<f64>) = psd
            .frequencies_hz()
            .iter()
            .zip(psd.values())
            .filter(|(f, _)| (1.0..=10.0).contains(*f))
            .map(|(f, v)| (f.ln(), v.ln()))
            .unzip();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let fitted = -sxy / sxx;
        assert!((fitted - beta).abs() < 0.2, "beta {beta}: fitted {fitted}");
    }
}

#[test]
fn laboratory_preset_floor_between_peaks() {
    let model = NoiseModel::laboratory();
    let trace = generate_environmental_noise(100.0, 5000.0, &model, &mut seeded_stream(4, 0)).unwrap();
    let asd = welch_psd(&trace, 5000, 0.5).unwrap().to_asd();
    let at = |f0: f64| {
        let i = asd.frequencies_hz().iter().position(|f| *f >= f0).unwrap();
        asd.values()[i - 2..=i + 2].iter().sum::<f64>() / 5.0
    };
    let floor = at(1200.0);
    assert!((floor / 15e-12 - 1.0).abs() < 0.15, "floor {floor:e}");
    let peak = asd.values()[49..=51].iter().cloned().fold(0.0, f64::max);
    assert!(peak > 5.0 * at(70.0), "50 Hz peak {peak:e}");
    assert!(at(2.0) > 10.0 * floor);
}
