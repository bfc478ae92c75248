//! Levenberg–Marquardt fit of sums of derivative-Lorentzian lines.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::Spectrum;

const MAX_ITERATIONS: usize = 200;
const STEP_TOLERANCE: f64 = 1e-8;
const CONDITION_LIMIT: f64 = 1e10;

/// `h(u) = 2u/(1+u²)²` with `u = 2(f − c)/Γ`: the frequency derivative of a
/// Lorentzian dip, in units where its zero-crossing slope is 2.
pub fn derivative_lorentzian(f_hz: f64, center_hz: f64, fwhm_hz: f64) -> f64 {
    let u = 2.0 * (f_hz - center_hz) / fwhm_hz;
    2.0 * u / (1.0 + u * u).powi(2)
}

fn derivative_lorentzian_du(u: f64) -> f64 {
    let q = 1.0 + u * u;
    2.0 * (1.0 - 3.0 * u * u) / (q * q * q)
}

/// Starting point for one line set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitGuess {
    pub center_hz: f64,
    pub fwhm_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineshapeFit {
    pub center_hz: f64,
    pub fwhm_hz: f64,
    /// One per component, lowest frequency first.
    pub amplitudes: Vec<f64>,
    pub center_std_hz: f64,
    pub fwhm_std_hz: f64,
    pub amplitude_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineshapeFitReport {
    pub sets: Vec<LineshapeFit>,
    pub residual_rms: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Of the column-normalized normal matrix at the solution.
    pub condition_number: f64,
}

/// Parameters in scaled units: per set `[c̃, Γ̃, ã₀ … ã_{m−1}]` with
/// `c = f_ref + Γ₀ c̃`, `Γ = Γ₀ Γ̃`, `A = A_max ã`.
struct Problem<'a> {
    f: &'a [f64],
    y: &'a [f64],
    offsets: Vec<f64>,
    f_ref: f64,
    gamma0: f64,
    a_max: f64,
    n_sets: usize,
}

impl Problem<'_> {
    fn stride(&self) -> usize {
        2 + self.offsets.len()
    }

    fn model(&self, p: &DVector<f64>, f: f64) -> f64 {
        let s = self.stride();
        (0..self.n_sets)
            .map(|j| {
                let c = self.f_ref + self.gamma0 * p[j * s];
                let g = self.gamma0 * p[j * s + 1];
                self.offsets
                    .iter()
                    .enumerate()
                    .map(|(k, o)| self.a_max * p[j * s + 2 + k] * derivative_lorentzian(f, c + o, g))
                    .sum::<f64>()
            })
            .sum()
    }

    fn residuals(&self, p: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.f.len(),
            self.f.iter().zip(self.y).map(|(f, y)| (self.model(p, *f) - y) / self.a_max),
        )
    }

    fn cost(&self, p: &DVector<f64>) -> f64 {
        0.5 * self.residuals(p).norm_squared()
    }

    fn jacobian(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let s = self.stride();
        let mut j = DMatrix::zeros(self.f.len(), p.len());
        for (row, f) in self.f.iter().enumerate() {
            for set in 0..self.n_sets {
                let c = self.f_ref + self.gamma0 * p[set * s];
                let g = self.gamma0 * p[set * s + 1];
                for (k, o) in self.offsets.iter().enumerate() {
                    let a = p[set * s + 2 + k];
                    let u = 2.0 * (f - c - o) / g;
                    let dh = derivative_lorentzian_du(u);
                    // du/dc̃ = −2Γ₀/Γ, du/dΓ̃ = −u/Γ̃
                    j[(row, set * s)] += a * dh * (-2.0 * self.gamma0 / g);
                    j[(row, set * s + 1)] += a * dh * (-u / p[set * s + 1]);
                    j[(row, set * s + 2 + k)] = 2.0 * u / (1.0 + u * u).powi(2);
                }
            }
        }
        j
    }

    /// Best amplitudes for fixed centers and widths (linear least squares).
    fn solve_amplitudes(&self, p: &mut DVector<f64>) -> Option<f64> {
        let s = self.stride();
        let m = self.offsets.len();
        let mut basis = DMatrix::zeros(self.f.len(), self.n_sets * m);
        for (row, f) in self.f.iter().enumerate() {
            for set in 0..self.n_sets {
                let c = self.f_ref + self.gamma0 * p[set * s];
                let g = self.gamma0 * p[set * s + 1];
                for (k, o) in self.offsets.iter().enumerate() {
                    basis[(row, set * m + k)] = derivative_lorentzian(*f, c + o, g);
                }
            }
        }
        let y = DVector::from_iterator(self.y.len(), self.y.iter().map(|v| v / self.a_max));
        let a = (basis.transpose() * &basis).cholesky()?.solve(&(basis.transpose() * &y));
        for set in 0..self.n_sets {
            for k in 0..m {
                p[set * s + 2 + k] = a[set * m + k];
            }
        }
        Some((basis * a - y).norm_squared())
    }
}

/// Condition number of `JᵀJ` after scaling every column to unit norm.
fn normalized_condition(jtj: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = jtj.diagonal().iter().map(|v| v.sqrt()).collect();
    if d.iter().any(|v| !(*v > 0.0)) {
        return f64::INFINITY;
    }
    let n = jtj.nrows();
    let scaled = DMatrix::from_fn(n, n, |i, j| jtj[(i, j)] / (d[i] * d[j]));
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Sets closer than a tenth of a linewidth cannot be told apart.
fn check_separated(sets: impl Iterator<Item = (f64, f64)>) -> Result<()> {
    let sets: Vec<(f64, f64)> = sets.collect();
    for (i, a) in sets.iter().enumerate() {
        for b in &sets[i + 1..] {
            if (a.0 - b.0).abs() < 0.1 * a.1.min(b.1) {
                return Err(Error::Degenerate(format!(
                    "line sets at {} Hz and {} Hz coincide",
                    a.0, b.0
                )));
            }
        }
    }
    Ok(())
}

/// Fits `n_sets` line sets, each `components` derivative-Lorentzian lines
/// spaced by `hyperfine_hz` about its center and sharing one width, to the
/// signed response in `spectrum`. Amplitudes are free.
pub fn fit_derivative_lorentzian_sum(
    spectrum: &Spectrum,
    n_sets: usize,
    components: usize,
    hyperfine_hz: f64,
    initial_guess: &[FitGuess],
) -> Result<LineshapeFitReport> {
    if n_sets == 0 || initial_guess.len() != n_sets || components == 0 {
        return Err(Error::Config(format!(
            "{} initial guesses for {n_sets} sets of {components} components",
            initial_guess.len()
        )));
    }
    if initial_guess.iter().any(|g| !(g.fwhm_hz > 0.0) || !g.center_hz.is_finite()) {
        return Err(Error::Validation("initial guesses need finite centers and FWHM > 0".into()));
    }
    let f = spectrum.frequencies_hz();
    let y = spectrum.values();
    let n_params = n_sets * (2 + components);
    if f.len() <= n_params {
        return Err(Error::Size(format!("{} points for {n_params} parameters", f.len())));
    }
    let a_max = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(a_max > 0.0) {
        return Err(Error::Fit("spectrum is identically zero".into()));
    }
    let gamma0 = initial_guess[0].fwhm_hz;
    let half = (components as f64 - 1.0) / 2.0;
    let problem = Problem {
        f,
        y,
        offsets: (0..components).map(|k| (k as f64 - half) * hyperfine_hz).collect(),
        f_ref: f.iter().sum::<f64>() / f.len() as f64,
        gamma0,
        a_max,
        n_sets,
    };
    let s = problem.stride();
    let mut p = DVector::zeros(n_params);
    for (j, g) in initial_guess.iter().enumerate() {
        p[j * s] = (g.center_hz - problem.f_ref) / gamma0;
        p[j * s + 1] = g.fwhm_hz / gamma0;
    }

    check_separated(initial_guess.iter().map(|g| (g.center_hz, g.fwhm_hz)))?;
    if problem.solve_amplitudes(&mut p.clone()).is_none() {
        return Err(Error::Degenerate(
            "line sets are indistinguishable at the initial guess".into(),
        ));
    }

    // Refine each center on a grid of ±Γ with linear amplitudes.
    for (j, g) in initial_guess.iter().enumerate() {
        let c0 = p[j * s];
        let span = g.fwhm_hz / gamma0;
        let mut best = (f64::INFINITY, c0);
        for k in -40..=40 {
            let mut trial = p.clone();
            trial[j * s] = c0 + span * k as f64 / 40.0;
            if let Some(r) = problem.solve_amplitudes(&mut trial) {
                if r < best.0 {
                    best = (r, trial[j * s]);
                }
            }
        }
        p[j * s] = best.1;
    }
    if problem.solve_amplitudes(&mut p).is_none() {
        return Err(Error::Degenerate(
            "line sets are indistinguishable at the initial guess".into(),
        ));
    }
    let initial_condition = {
        let jm = problem.jacobian(&p);
        normalized_condition(&(jm.transpose() * jm))
    };
    if initial_condition > CONDITION_LIMIT {
        return Err(Error::Degenerate(format!(
            "normal matrix condition number {initial_condition:.3e} at the initial guess"
        )));
    }

    let mut cost = problem.cost(&p);
    let mut history = vec![cost];
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let jm = problem.jacobian(&p);
        let r = problem.residuals(&p);
        let jtj = jm.transpose() * &jm;
        let grad = jm.transpose() * r;
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = jtj.clone();
            for i in 0..n_params {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 3.0;
                continue;
            };
            let step = -chol.solve(&grad);
            let trial = &p + &step;
            let widths_ok = (0..n_sets).all(|j| trial[j * s + 1] > 0.0);
            let trial_cost = if widths_ok { problem.cost(&trial) } else { f64::INFINITY };
            if trial_cost < cost {
                let rel = step.norm() / (p.norm() + 1e-12);
                p = trial;
                cost = trial_cost;
                history.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel < STEP_TOLERANCE {
                    converged = true;
                }
                break;
            }
            lambda *= 3.0;
        }
        // No downhill step exists at any damping: the cost is at its floor.
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Fit(format!(
            "no convergence after {MAX_ITERATIONS} iterations (cost {cost:.3e}, lambda {lambda:.1e})"
        )));
    }

    let jm = problem.jacobian(&p);
    let jtj = jm.transpose() * &jm;
    let condition_number = normalized_condition(&jtj);
    if condition_number > CONDITION_LIMIT {
        return Err(Error::Degenerate(format!(
            "normal matrix condition number {condition_number:.3e} at the solution"
        )));
    }
    check_separated((0..n_sets).map(|j| (problem.f_ref + gamma0 * p[j * s], gamma0 * p[j * s + 1])))?;
    for j in 0..n_sets {
        let peak = (0..components).map(|k| p[j * s + 2 + k].abs()).fold(0.0, f64::max);
        if peak < 1e-6 {
            return Err(Error::Degenerate(format!("line set {} has vanishing amplitude", j + 1)));
        }
    }
    let dof = (f.len() - n_params) as f64;
    let s2 = 2.0 * cost / dof;
    let cov = jtj
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normal matrix is singular".into()))?
        * s2;
    let std = |i: usize| cov[(i, i)].max(0.0).sqrt();
    let sets = (0..n_sets)
        .map(|j| LineshapeFit {
            center_hz: problem.f_ref + gamma0 * p[j * s],
            fwhm_hz: gamma0 * p[j * s + 1],
            amplitudes: (0..components).map(|k| a_max * p[j * s + 2 + k]).collect(),
            center_std_hz: gamma0 * std(j * s),
            fwhm_std_hz: gamma0 * std(j * s + 1),
            amplitude_std: (0..components).map(|k| a_max * std(j * s + 2 + k)).collect(),
        })
        .collect();
    Ok(LineshapeFitReport {
        sets,
        residual_rms: a_max * (2.0 * cost / f.len() as f64).sqrt(),
        iterations,
        cost_history: history,
        condition_number,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpectrumKind;
    use rand::Rng;
    use rand_distr::StandardNormal;

    const HF: f64 = 2.16e6;

    fn synth(sets: &[(f64, f64, Vec<f64>)], lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let f: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
        let y = f
            .iter()
            .map(|x| {
                sets.iter()
                    .map(|(c, g, amps)| {
                        let half = (amps.len() as f64 - 1.0) / 2.0;
                        amps.iter()
                            .enumerate()
                            .map(|(k, a)| {
                                // independent closed form of the Lorentzian derivative
                                let d = x - c - (k as f64 - half) * HF;
                                let hw = g / 2.0;
                                a * 2.0 * d * hw.powi(3) / (d * d + hw * hw).powi(2)
                            })
                            .sum::<f64>()
                    })
                    .sum()
            })
            .collect();
        (f, y)
    }

    #[test]
    fn oracle_matches_shape_function() {
        let (f, y) = synth(&[(0.0, 200e3, vec![1.0])], -1e6, 1e6, 101);
        for (x, v) in f.iter().zip(&y) {
            assert!((v - derivative_lorentzian(*x, 0.0, 200e3)).abs() < 1e-12);
        }
    }

    #[test]
    fn slope_at_center_is_positive() {
        let d = derivative_lorentzian(1.0, 0.0, 200e3) - derivative_lorentzian(-1.0, 0.0, 200e3);
        assert!(d > 0.0);
    }

    #[test]
    fn two_set_round_trip() {
        let c1 = 2.870e9 - 1.0e6;
        let c2 = c1 + 1.177e6;
        let amps = vec![1.0, 2.0, 3.0, 2.0, 1.0];
        let (f, y) = synth(
            &[(c1, 200e3, amps.clone()), (c2, 200e3, amps.iter().map(|a| 0.8 * a).collect())],
            c1 - 6e6,
            c2 + 6e6,
            3000,
        );
        let s = Spectrum::new(f, y, SpectrumKind::LockInResponse).unwrap();
        let g = [
            FitGuess {
                center_hz: c1 + 80e3,
                fwhm_hz: 230e3,
            },
            FitGuess {
                center_hz: c2 - 120e3,
                fwhm_hz: 230e3,
            },
        ];
        let fit = fit_derivative_lorentzian_sum(&s, 2, 5, HF, &g).unwrap();
        assert!((fit.sets[0].center_hz - c1).abs() < 1e3);
        assert!((fit.sets[1].center_hz - c2).abs() < 1e3);
        for set in &fit.sets {
            assert!((set.fwhm_hz / 200e3 - 1.0).abs() < 0.01);
        }
        assert!(fit.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.residual_rms < 1e-6);
    }

    #[test]
    fn coincident_sets_are_degenerate() {
        let c = 2.87e9;
        let (f, y) = synth(&[(c, 200e3, vec![1.0, 1.0, 1.0])], c - 4e6, c + 4e6, 1000);
        let s = Spectrum::new(f, y, SpectrumKind::LockInResponse).unwrap();
        let g = FitGuess {
            center_hz: c,
            fwhm_hz: 200e3,
        };
        let err = fit_derivative_lorentzian_sum(&s, 2, 3, HF, &[g, g]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "{err}");
    }

    #[test]
    fn noisy_centers_stay_within_a_fiftieth_of_a_linewidth() {
        let c = 2.869e9;
        let (f, clean) = synth(&[(c, 200e3, vec![1.0, 1.0, 1.0])], c - 4e6, c + 4e6, 800);
        let peak = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut rng = crate::model::seeded_stream(5, 1);
        for _ in 0..100 {
            let y: Vec<f64> = clean
                .iter()
                .map(|v| v + 0.05 * peak * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let s = Spectrum::new(f.clone(), y, SpectrumKind::LockInResponse).unwrap();
            let g = FitGuess {
                center_hz: c + 50e3,
                fwhm_hz: 180e3,
            };
            let fit = fit_derivative_lorentzian_sum(&s, 1, 3, HF, &[g]).unwrap();
            assert!((fit.sets[0].center_hz - c).abs() < 200e3 / 50.0);
        }
    }

    #[test]
    fn bad_inputs() {
        let s = Spectrum::new(vec![0.0, 1.0, 2.0], vec![0.0; 3], SpectrumKind::LockInResponse).unwrap();
        let g = FitGuess {
            center_hz: 1.0,
            fwhm_hz: 1.0,
        };
        assert!(fit_derivative_lorentzian_sum(&s, 1, 1, HF, &[]).is_err());
        assert!(fit_derivative_lorentzian_sum(&s, 1, 1, HF, &[g]).is_err());
    }
}
