//! Biquad sections, Butterworth cascades and their frequency responses.
//!
//! Sections use the transposed direct form II and are designed with the
//! bilinear transform, prewarped at the design frequency.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// Normalized second-order section, `a0 = 1`. First-order sections have
/// `b2 = a2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

fn check_frequency(f_hz: f64, rate_hz: f64) -> Result<()> {
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(Error::Design(format!("sample rate must be positive, got {rate_hz}")));
    }
    if !(f_hz > 0.0 && f_hz < 0.5 * rate_hz) {
        return Err(Error::Design(format!(
            "design frequency {f_hz} Hz must lie in (0, {}) Hz",
            0.5 * rate_hz
        )));
    }
    Ok(())
}

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::Design(format!("Q must be positive, got {q}")));
    }
    Ok(())
}

impl Biquad {
    pub const IDENTITY: Biquad = Biquad {
        b0: 1.0,
        b1: 0.0,
        b2: 0.0,
        a1: 0.0,
        a2: 0.0,
    };

    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b0: b[0] / a[0],
            b1: b[1] / a[0],
            b2: b[2] / a[0],
            a1: a[1] / a[0],
            a2: a[2] / a[0],
        }
    }

    pub fn lowpass(f_hz: f64, q: f64, rate_hz: f64) -> Result<Self> {
        check_frequency(f_hz, rate_hz)?;
        check_q(q)?;
        let w0 = 2.0 * PI * f_hz / rate_hz;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Ok(Self::normalized(
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        ))
    }

    pub fn highpass(f_hz: f64, q: f64, rate_hz: f64) -> Result<Self> {
        check_frequency(f_hz, rate_hz)?;
        check_q(q)?;
        let w0 = 2.0 * PI * f_hz / rate_hz;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Ok(Self::normalized(
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        ))
    }

    /// Band-reject section with unity gain away from `f_hz` and a true zero at it.
    pub fn notch(f_hz: f64, q: f64, rate_hz: f64) -> Result<Self> {
        check_frequency(f_hz, rate_hz)?;
        check_q(q)?;
        let w0 = 2.0 * PI * f_hz / rate_hz;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        Ok(Self::normalized(
            [1.0, -2.0 * c, 1.0],
            [1.0 + alpha, -2.0 * c, 1.0 - alpha],
        ))
    }

    pub fn lowpass_first_order(f_hz: f64, rate_hz: f64) -> Result<Self> {
        check_frequency(f_hz, rate_hz)?;
        let k = (PI * f_hz / rate_hz).tan();
        Ok(Self::normalized([k, k, 0.0], [1.0 + k, k - 1.0, 0.0]))
    }

    pub fn highpass_first_order(f_hz: f64, rate_hz: f64) -> Result<Self> {
        check_frequency(f_hz, rate_hz)?;
        let k = (PI * f_hz / rate_hz).tan();
        Ok(Self::normalized([1.0, -1.0, 0.0], [1.0 + k, k - 1.0, 0.0]))
    }

    /// Both poles strictly inside the unit circle (stability triangle).
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    /// H(e^{jω}) at `f_hz`.
    pub fn response(&self, f_hz: f64, rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * f_hz / rate_hz;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

/// Q factors of the second-order sections of an order-`n` Butterworth
/// prototype, plus whether a real first-order pole remains.
pub fn butterworth_qs(order: usize) -> (Vec<f64>, bool) {
    // Pole angles from the negative real axis: π(2k − 1)/2n for even orders,
    // πk/n for odd ones.
    let qs = (1..=order / 2)
        .map(|k| 1.0 / (2.0 * (PI * (2 * k - 1 + order % 2) as f64 / (2 * order) as f64).cos()))
        .collect();
    (qs, order % 2 == 1)
}

/// Transposed direct-form II state of one section.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct SectionState {
    s1: f64,
    s2: f64,
}

/// A cascade of biquads with running state.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    sections: Vec<Biquad>,
    state: Vec<SectionState>,
}

impl Cascade {
    pub fn new(sections: Vec<Biquad>) -> Result<Self> {
        if let Some(bad) = sections.iter().find(|s| !s.is_stable()) {
            return Err(Error::Design(format!("unstable section {bad:?}")));
        }
        let state = vec![SectionState::default(); sections.len()];
        Ok(Self { sections, state })
    }

    /// Order-`order` Butterworth low-pass with its 3 dB point at `cutoff_hz`.
    pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, rate_hz: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Design("filter order must be at least 1".into()));
        }
        let (qs, odd) = butterworth_qs(order);
        let mut sections = qs
            .iter()
            .map(|q| Biquad::lowpass(cutoff_hz, *q, rate_hz))
            .collect::<Result<Vec<_>>>()?;
        if odd {
            sections.push(Biquad::lowpass_first_order(cutoff_hz, rate_hz)?);
        }
        Self::new(sections)
    }

    pub fn butterworth_highpass(order: usize, cutoff_hz: f64, rate_hz: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::Design("filter order must be at least 1".into()));
        }
        let (qs, odd) = butterworth_qs(order);
        let mut sections = qs
            .iter()
            .map(|q| Biquad::highpass(cutoff_hz, *q, rate_hz))
            .collect::<Result<Vec<_>>>()?;
        if odd {
            sections.push(Biquad::highpass_first_order(cutoff_hz, rate_hz)?);
        }
        Self::new(sections)
    }

    pub fn sections(&self) -> &[Biquad] {
        &self.sections
    }

    /// Appends the sections of `other` (states are reset).
    pub fn chain(mut self, other: &Cascade) -> Self {
        self.sections.extend_from_slice(&other.sections);
        self.state = vec![SectionState::default(); self.sections.len()];
        self
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = SectionState::default());
    }

    /// Sets every section to the steady state reached under constant input `x`.
    pub fn prime(&mut self, x: f64) {
        let mut input = x;
        for (sec, st) in self.sections.iter().zip(self.state.iter_mut()) {
            let y = sec.dc_gain() * input;
            st.s2 = sec.b2 * input - sec.a2 * y;
            st.s1 = sec.b1 * input - sec.a1 * y + st.s2;
            input = y;
        }
    }

    #[inline]
    pub fn process(&mut self, x: f64) -> f64 {
        let mut v = x;
        for (sec, st) in self.sections.iter().zip(self.state.iter_mut()) {
            let y = sec.b0 * v + st.s1;
            st.s1 = sec.b1 * v - sec.a1 * y + st.s2;
            st.s2 = sec.b2 * v - sec.a2 * y;
            v = y;
        }
        v
    }

    pub fn process_slice(&mut self, input: &[f64]) -> Vec<f64> {
        input.iter().map(|x| self.process(*x)).collect()
    }

    pub fn response(&self, f_hz: f64, rate_hz: f64) -> Complex64 {
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(f_hz, rate_hz))
    }

    pub fn magnitude(&self, f_hz: f64, rate_hz: f64) -> f64 {
        self.response(f_hz, rate_hz).norm()
    }
}
