//! Adaptive Dormand–Prince 5(4) integrator for small dense systems.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("exceeded {max_steps} steps at t = {t}")]
    MaxSteps { t: f64, max_steps: usize },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on |h|; `f64::INFINITY` for none.
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-10, atol: 1e-12, h_max: f64::INFINITY, max_steps: 1_000_000 }
    }
}

/// What the observer wants after seeing an accepted step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
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
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Error coefficients: 5th-order minus embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction). The
/// observer is called with `(t0, y0)` and after every accepted step; the
/// final call is at exactly `t1` unless the observer stopped early.
/// Returns the last `(t, y)` reached.
pub fn integrate<F, O>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: &OdeOptions,
    mut observer: O,
) -> Result<(f64, Vec<f64>), OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(f64, &[f64]) -> Control,
{
    let n = y0.len();
    let mut t = t0;
    let mut y = y0.to_vec();
    if observer(t, &y) == Control::Stop || t0 == t1 {
        return Ok((t, y));
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    f(t, &y, &mut k[0]);

    let norm0 = rms_vec(&y, &y, opts);
    let normd = rms_vec(&k[0], &y, opts);
    let mut h = if norm0 < 1e-5 || normd < 1e-5 { 1e-6 } else { 0.01 * norm0 / normd };
    h = h.min(opts.h_max).min(span).max(1e-12 * span.max(1.0));

    let mut steps = 0usize;
    let mut last = false;
    loop {
        if steps >= opts.max_steps {
            return Err(OdeError::MaxSteps { t, max_steps: opts.max_steps });
        }
        let remaining = (t1 - t).abs();
        if h >= remaining {
            h = remaining;
            last = true;
        }
        let hs = h * dir;
        stage(&y, &k, &[A21], hs, &mut tmp);
        f(t + C2 * hs, &tmp, &mut k[1]);
        stage(&y, &k, &[A31, A32], hs, &mut tmp);
        f(t + C3 * hs, &tmp, &mut k[2]);
        stage(&y, &k, &[A41, A42, A43], hs, &mut tmp);
        f(t + C4 * hs, &tmp, &mut k[3]);
        stage(&y, &k, &[A51, A52, A53, A54], hs, &mut tmp);
        f(t + C5 * hs, &tmp, &mut k[4]);
        stage(&y, &k, &[A61, A62, A63, A64, A65], hs, &mut tmp);
        f(t + hs, &tmp, &mut k[5]);
        for i in 0..n {
            y_new[i] = y[i] + hs * (B1 * k[0][i] + B3 * k[2][i] + B4 * k[3][i] + B5 * k[4][i] + B6 * k[5][i]);
        }
        let t_new = if last { t1 } else { t + hs };
        f(t_new, &y_new, &mut k[6]);
        let mut err = 0.0;
        for i in 0..n {
            let e = hs
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            if h <= 1e-14 * span.max(1.0) {
                return Err(OdeError::NonFinite { t });
            }
            h *= 0.25;
            last = false;
            steps += 1;
            continue;
        }
        if err <= 1.0 {
            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            let (first, rest) = k.split_at_mut(1);
            first[0].copy_from_slice(&rest[5]);
            steps += 1;
            if observer(t, &y) == Control::Stop || last {
                return Ok((t, y));
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(opts.h_max);
        } else {
            last = false;
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            steps += 1;
            if h < 1e-14 * span.max(1.0) {
                return Err(OdeError::StepUnderflow { t });
            }
        }
    }
}

fn stage(y: &[f64], k: &[Vec<f64>], a: &[f64], h: f64, out: &mut [f64]) {
    for i in 0..y.len() {
        let mut s = 0.0;
        for (j, aj) in a.iter().enumerate() {
            s += aj * k[j][i];
        }
        out[i] = y[i] + h * s;
    }
}

fn rms_vec(v: &[f64], y: &[f64], opts: &OdeOptions) -> f64 {
    let n = v.len().max(1) as f64;
    (v.iter().zip(y).map(|(a, b)| (a / (opts.atol + opts.rtol * b.abs())).powi(2)).sum::<f64>() / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_forward_and_backward() {
        let opts = OdeOptions::default();
        let (t, y) = integrate(|_, y, d| d[0] = -y[0], 0.0, &[1.0], 2.0, &opts, |_, _| Control::Continue).unwrap();
        assert_eq!(t, 2.0);
        assert!((y[0] - (-2.0f64).exp()).abs() < 1e-10);
        let (_, y) = integrate(|_, y, d| d[0] = -y[0], 2.0, &[(-2.0f64).exp()], 0.0, &opts, |_, _| Control::Continue).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_with_step_cap() {
        let opts = OdeOptions { h_max: 0.05, ..OdeOptions::default() };
        let mut count = 0;
        let (_, y) = integrate(
            |_, y, d| {
                d[0] = y[1];
                d[1] = -y[0];
            },
            0.0,
            &[0.0, 1.0],
            std::f64::consts::PI,
            &opts,
            |_, _| {
                count += 1;
                Control::Continue
            },
        )
        .unwrap();
        assert!(y[0].abs() < 1e-9 && (y[1] + 1.0).abs() < 1e-9);
        assert!(count >= 63);
    }

    #[test]
    fn observer_can_stop() {
        let opts = OdeOptions::default();
        let (t, y) = integrate(|_, y, d| d[0] = y[0] * y[0], 0.0, &[1.0], 2.0, &opts, |_, y| {
            if y[0] > 1e6 {
                Control::Stop
            } else {
                Control::Continue
            }
        })
        .unwrap();
        assert!(y[0] > 1e6 && t < 1.0);
    }
}
