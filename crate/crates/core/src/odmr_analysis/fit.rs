use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odmr_analysis::Spectrum;

pub const FIT_MAX_ITERATIONS: usize = 200;

/// `baseline * (1 - C0 / (1 + ((f - f_avg)/(Gamma/2))^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub f_avg: f64,
    /// Full width at half depth (MHz).
    pub gamma: f64,
    pub c0: f64,
    pub baseline: f64,
    pub residual_rms: f64,
    pub iterations: usize,
}

impl LorentzianFit {
    pub fn eval(&self, f: f64) -> f64 {
        lorentzian_dip(f, self.f_avg, self.gamma, self.c0, self.baseline)
    }

    /// The dip with its center moved by `shift_mhz`.
    pub fn shifted(&self, shift_mhz: f64) -> LorentzianFit {
        LorentzianFit {
            f_avg: self.f_avg + shift_mhz,
            ..*self
        }
    }
}

pub fn lorentzian_dip(f: f64, f_avg: f64, gamma: f64, c0: f64, baseline: f64) -> f64 {
    let u = 2.0 * (f - f_avg) / gamma;
    baseline * (1.0 - c0 / (1.0 + u * u))
}

fn model_and_jacobian(f: f64, p: &Vector4<f64>) -> (f64, Vector4<f64>) {
    let (f0, g, c, b) = (p[0], p[1], p[2], p[3]);
    let u = 2.0 * (f - f0) / g;
    let l = 1.0 / (1.0 + u * u);
    let y = b * (1.0 - c * l);
    let l2 = l * l;
    let jac = Vector4::new(
        -b * c * 4.0 * u * l2 / g,
        -b * c * 2.0 * u * u * l2 / g,
        -b * l,
        1.0 - c * l,
    );
    (y, jac)
}

fn cost(f: &[f64], y: &[f64], p: &Vector4<f64>) -> f64 {
    f.iter()
        .zip(y)
        .map(|(&fi, &yi)| {
            let r = yi - model_and_jacobian(fi, p).0;
            r * r
        })
        .sum()
}

/// Initial guess: minimum point, half-depth crossings, edge mean.
fn seed(f: &[f64], y: &[f64]) -> Result<Vector4<f64>> {
    let n = f.len();
    let edge_n = (n / 10).clamp(1, 5);
    let baseline = (y[..edge_n].iter().sum::<f64>() + y[n - edge_n..].iter().sum::<f64>()) / (2 * edge_n) as f64;
    let (imin, &ymin) = y
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let depth = baseline - ymin;
    if !(depth > 1e-9 * baseline.abs()) {
        return Err(Error::FitFailed {
            reason: format!("no dip: depth {depth:.3e} relative to baseline {baseline:.6e}"),
            best: None,
        });
    }
    let half = baseline - 0.5 * depth;
    let crossing = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev: Option<usize> = None;
        for i in range {
            if let Some(j) = prev {
                if (y[j] - half) * (y[i] - half) <= 0.0 && y[i] != y[j] {
                    let t = (half - y[j]) / (y[i] - y[j]);
                    return Some(f[j] + t * (f[i] - f[j]));
                }
            }
            prev = Some(i);
        }
        None
    };
    let left = crossing(&mut (0..=imin).rev());
    let right = crossing(&mut (imin..n));
    let span = f[n - 1] - f[0];
    let gamma = match (left, right) {
        (Some(l), Some(r)) if r > l => r - l,
        (Some(l), None) => 2.0 * (f[imin] - l),
        (None, Some(r)) => 2.0 * (r - f[imin]),
        _ => span / 3.0,
    };
    Ok(Vector4::new(
        f[imin],
        gamma.max(span * 1e-6),
        depth / baseline,
        baseline,
    ))
}

/// Levenberg-Marquardt fit of [`lorentzian_dip`] to `(f, y)`.
pub fn fit_lorentzian_xy(f: &[f64], y: &[f64]) -> Result<LorentzianFit> {
    if f.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} x vs {} y", f.len(), y.len())));
    }
    if f.len() < 7 {
        return Err(Error::FitFailed {
            reason: format!("{} points, need at least 7", f.len()),
            best: None,
        });
    }
    let mut p = seed(f, y)?;
    let mut c = cost(f, y, &p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < FIT_MAX_ITERATIONS {
        iterations += 1;
        let mut a = Matrix4::<f64>::zeros();
        let mut g = Vector4::<f64>::zeros();
        for (&fi, &yi) in f.iter().zip(y) {
            let (m, j) = model_and_jacobian(fi, &p);
            a += j * j.transpose();
            g += j * (yi - m);
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = a;
            for k in 0..4 {
                damped[(k, k)] += lambda * a[(k, k)].max(1e-300);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + step;
            if !(trial[1] > 0.0) || !trial.iter().all(|v| v.is_finite()) {
                lambda *= 10.0;
                continue;
            }
            let c_trial = cost(f, y, &trial);
            if c_trial <= c {
                let rel_step = (0..4)
                    .map(|k| step[k].abs() / p[k].abs().max(1e-12))
                    .fold(0.0, f64::max);
                let rel_cost = (c - c_trial) / c.max(f64::MIN_POSITIVE);
                p = trial;
                c = c_trial;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel_step < 1e-12 || rel_cost < 1e-15 && rel_step < 1e-8 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: at a minimum to machine precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    let fit = LorentzianFit {
        f_avg: p[0],
        gamma: p[1],
        c0: p[2],
        baseline: p[3],
        residual_rms: (c / f.len() as f64).sqrt(),
        iterations,
    };
    if !converged {
        return Err(Error::FitFailed {
            reason: format!("no convergence after {FIT_MAX_ITERATIONS} iterations"),
            best: Some(Box::new(fit)),
        });
    }
    if !(fit.c0 > 1e-9 && fit.c0 < 1.0) {
        return Err(Error::FitFailed {
            reason: format!("contrast {:.3e} outside (0, 1)", fit.c0),
            best: Some(Box::new(fit)),
        });
    }
    Ok(fit)
}

pub fn fit_lorentzian(s: &Spectrum) -> Result<LorentzianFit> {
    fit_lorentzian_xy(&s.f_mhz, &s.pl_cps)
}
