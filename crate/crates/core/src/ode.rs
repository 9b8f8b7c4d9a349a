//! Dormand–Prince 5(4) integrator with PI step-size control.

use ndarray::{ArrayView1, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h0: Option<f64>,
    /// Step size below which the problem is declared too stiff.
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, h0: None, h_min: 1e-12, max_steps: 2_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdePath {
    pub t: Vec<f64>,
    pub y: Vec<Vector>,
}

impl OdePath {
    pub fn last(&self) -> (&f64, &Vector) {
        (self.t.last().expect("non-empty path"), self.y.last().expect("non-empty path"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64, prefix: OdePath },
    #[error("step budget of {steps} exhausted at t = {t}")]
    StepBudget { t: f64, steps: usize, prefix: OdePath },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64, prefix: OdePath },
}

impl OdeError {
    pub fn prefix(&self) -> &OdePath {
        match self {
            OdeError::StepUnderflow { prefix, .. } | OdeError::StepBudget { prefix, .. } | OdeError::NonFinite { prefix, .. } => prefix,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combo(y: &Vector, h: f64, terms: &[(f64, &Vector)]) -> Vector {
    let mut out = y.clone();
    for (c, k) in terms {
        out.scaled_add(h * c, *k);
    }
    out
}

fn error_norm(err: &Vector, y: &Vector, y_new: &Vector, opts: &Dopri5Options) -> f64 {
    let mut s = 0.0;
    Zip::from(err).and(y).and(y_new).for_each(|&e, &a, &b| {
        let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
        s += (e / sc) * (e / sc);
    });
    (s / err.len().max(1) as f64).sqrt()
}

/// Integrates `ẏ = f(t, y)` from `t0` until `t_end` or until `stop(t, y, ẏ)`
/// returns true after an accepted step. Every accepted step is recorded.
pub fn integrate<F, S>(
    mut f: F,
    y0: ArrayView1<f64>,
    t0: f64,
    t_end: f64,
    opts: &Dopri5Options,
    mut stop: S,
) -> Result<(OdePath, bool), OdeError>
where
    F: FnMut(f64, ArrayView1<f64>) -> Vector,
    S: FnMut(f64, &Vector, &Vector) -> bool,
{
    let mut t = t0;
    let mut y = y0.to_owned();
    let mut path = OdePath { t: vec![t], y: vec![y.clone()] };
    let mut k1 = f(t, y.view());
    if stop(t, &y, &k1) {
        return Ok((path, true));
    }
    let mut h = match opts.h0 {
        Some(h) => h,
        None => initial_step(&mut f, t, &y, &k1, opts),
    };
    let mut err_prev: f64 = 1e-4;
    let mut steps = 0usize;
    let mut rejected_last = false;
    while t < t_end {
        if steps >= opts.max_steps {
            return Err(OdeError::StepBudget { t, steps, prefix: path });
        }
        if h < opts.h_min {
            return Err(OdeError::StepUnderflow { t, h, prefix: path });
        }
        h = h.min(t_end - t);
        let k2 = f(t + C2 * h, combo(&y, h, &[(A21, &k1)]).view());
        let k3 = f(t + C3 * h, combo(&y, h, &[(A31, &k1), (A32, &k2)]).view());
        let k4 = f(t + C4 * h, combo(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]).view());
        let k5 = f(t + C5 * h, combo(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]).view());
        let k6 = f(t + h, combo(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]).view());
        let y_new = combo(&y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let k7 = f(t + h, y_new.view());
        steps += 1;
        let mut err = Vector::zeros(y.len());
        for (c, k) in [(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)] {
            err.scaled_add(h * c, k);
        }
        let en = error_norm(&err, &y, &y_new, opts);
        if !en.is_finite() {
            h *= 0.1;
            rejected_last = true;
            if !y_new.iter().all(|v| v.is_finite()) && h < opts.h_min {
                return Err(OdeError::NonFinite { t, prefix: path });
            }
            continue;
        }
        if en <= 1.0 {
            t += h;
            y = y_new;
            k1 = k7;
            path.t.push(t);
            path.y.push(y.clone());
            if !y.iter().all(|v| v.is_finite()) {
                return Err(OdeError::NonFinite { t, prefix: path });
            }
            if stop(t, &y, &k1) {
                return Ok((path, true));
            }
            // PI controller (Hairer's DOPRI5 constants)
            let fac = 0.9 * en.max(1e-10).powf(-0.17) * err_prev.powf(0.04);
            let fac = fac.clamp(0.2, if rejected_last { 1.0 } else { 10.0 });
            err_prev = en.max(1e-4);
            h *= fac;
            rejected_last = false;
        } else {
            h *= (0.9 * en.powf(-0.2)).max(0.2);
            rejected_last = true;
        }
    }
    Ok((path, false))
}

fn initial_step<F>(f: &mut F, t: f64, y: &Vector, f0: &Vector, opts: &Dopri5Options) -> f64
where
    F: FnMut(f64, ArrayView1<f64>) -> Vector,
{
    let sc = y.mapv(|v| opts.atol + opts.rtol * v.abs());
    let rms = |v: &Vector| -> f64 { (v.iter().zip(sc.iter()).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt() };
    let d0 = rms(y);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = combo(y, h0, &[(1.0, f0)]);
    let f1 = f(t + h0, y1.view());
    let d2 = rms(&(&f1 - f0)) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exponential_decay() {
        let opts = Dopri5Options::default();
        let (path, stopped) = integrate(|_, y| y.mapv(|v| -v), array![1.0].view(), 0.0, 5.0, &opts, |_, _, _| false).unwrap();
        assert!(!stopped);
        let (t, y) = path.last();
        assert_eq!(*t, 5.0);
        assert!((y[0] - (-5.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_energy() {
        let opts = Dopri5Options::default();
        let (path, _) = integrate(|_, y| array![y[1], -y[0]], array![1.0, 0.0].view(), 0.0, 20.0, &opts, |_, _, _| false).unwrap();
        let (_, y) = path.last();
        assert!((y[0] - 20f64.cos()).abs() < 1e-6);
        assert!((y[1] + 20f64.sin()).abs() < 1e-6);
    }

    #[test]
    fn stop_callback_halts() {
        let opts = Dopri5Options::default();
        let (path, stopped) = integrate(|_, y| y.mapv(|v| -v), array![1.0].view(), 0.0, 100.0, &opts, |_, y, _| y[0] < 0.5).unwrap();
        assert!(stopped);
        assert!(*path.last().0 < 100.0);
    }

    #[test]
    fn blow_up_reports_prefix() {
        let opts = Dopri5Options { max_steps: 10_000, ..Default::default() };
        let err = integrate(|_, y| y.mapv(|v| v * v), array![1.0].view(), 0.0, 2.0, &opts, |_, _, _| false).unwrap_err();
        assert!(!err.prefix().t.is_empty());
    }
}
