use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefactor of the shot-noise sensitivity formula, close to `4/(3 sqrt3)`.
pub const SENSITIVITY_PREFACTOR: f64 = 0.77;

/// Background point `f0 = f_avg - BACKGROUND_OFFSET_LINEWIDTHS * Gamma`.
pub const BACKGROUND_OFFSET_LINEWIDTHS: f64 = 5.0;

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// `[f0, f_B, f_E]` for the three-point method.
pub fn three_point_frequencies(f_avg: f64, gamma: f64) -> [f64; 3] {
    let half = gamma / (2.0 * SQRT_3);
    [f_avg - BACKGROUND_OFFSET_LINEWIDTHS * gamma, f_avg - half, f_avg + half]
}

/// Shift of the dip center from counts at `f_B`, `f_E` and the background.
///
/// Evaluates `-(pB - pE)/(pB + pE - 2 p0) * Gamma/sqrt3`. The leading minus
/// makes a dip moved up in frequency give a positive result: `pE` then falls
/// below `pB` while the denominator is negative for a dip.
pub fn three_point_shift(p_b: f64, p_e: f64, p0: f64, gamma: f64) -> Result<f64> {
    let den = p_b + p_e - 2.0 * p0;
    if !(den.abs() >= 1e-12 * p0.abs()) || den == 0.0 {
        return Err(Error::BackgroundLevel { denominator: den });
    }
    Ok(-(p_b - p_e) / den * gamma / SQRT_3)
}

/// Sampling frequencies of the six-point method, ordered `A..F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SixPointSet {
    pub freqs: [f64; 6],
    pub d_omega: f64,
    pub gamma_ref: f64,
    pub f_avg: f64,
}

impl SixPointSet {
    pub fn f_b(&self) -> f64 {
        self.freqs[1]
    }

    pub fn f_e(&self) -> f64 {
        self.freqs[4]
    }
}

pub fn six_point_frequencies(f_avg: f64, gamma: f64, d_omega: f64) -> Result<SixPointSet> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("gamma", "must be positive"));
    }
    if !(d_omega > 0.0 && d_omega < 0.5 * gamma) {
        return Err(Error::invalid(
            "d_omega",
            format!("must lie in (0, Gamma/2) = (0, {})", 0.5 * gamma),
        ));
    }
    let half = gamma / (2.0 * SQRT_3);
    let (fb, fe) = (f_avg - half, f_avg + half);
    Ok(SixPointSet {
        freqs: [fb - d_omega, fb, fb + d_omega, fe - d_omega, fe, fe + d_omega],
        d_omega,
        gamma_ref: gamma,
        f_avg,
    })
}

/// Six-point slope denominator `(pA - pC) - (pD - pF)`.
pub(crate) fn six_point_denominator(p: &[f64; 6]) -> f64 {
    (p[0] - p[2]) - (p[3] - p[5])
}

/// Center shift `(pB - pE)/((pA - pC) - (pD - pF)) * 2 d_omega` (MHz).
///
/// The numerator is divided by the measured slopes at the two flanks, so
/// the result is positive for a dip moved up in frequency and invariant
/// under a common scaling of the six counts.
pub fn six_point_shift(p: &[f64; 6], d_omega: f64) -> Result<f64> {
    let den = six_point_denominator(p);
    if den == 0.0 || !den.is_finite() {
        return Err(Error::UnstableDenominator {
            denominator: den,
            floor: 0.0,
        });
    }
    Ok((p[1] - p[4]) / den * 2.0 * d_omega)
}

/// Temperature change from six counts: [`six_point_shift`] divided by the
/// signed `dD/dT`. With `dD/dT < 0`, heating moves the dip down and gives a
/// positive result.
pub fn six_point_temperature(p: &[f64; 6], d_omega: f64, dd_dt_mhz_per_k: f64) -> Result<f64> {
    if dd_dt_mhz_per_k == 0.0 || !dd_dt_mhz_per_k.is_finite() {
        return Err(Error::invalid("dd_dt_mhz_per_k", "must be finite and nonzero"));
    }
    Ok(six_point_shift(p, d_omega)? / dd_dt_mhz_per_k)
}

/// `0.77 / |dD/dT| * Gamma / C0 / sqrt(R)` in K/sqrt(Hz).
pub fn shot_noise_sensitivity(gamma: f64, c0: f64, rate_cps: f64, dd_dt_mhz_per_k: f64) -> Result<f64> {
    for (name, v) in [("gamma", gamma), ("c0", c0), ("rate_cps", rate_cps)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::invalid(name, "must be positive"));
        }
    }
    if dd_dt_mhz_per_k == 0.0 || !dd_dt_mhz_per_k.is_finite() {
        return Err(Error::invalid("dd_dt_mhz_per_k", "must be finite and nonzero"));
    }
    Ok(SENSITIVITY_PREFACTOR / dd_dt_mhz_per_k.abs() * gamma / c0 / rate_cps.sqrt())
}
