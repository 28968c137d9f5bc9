use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix3 as NMatrix3;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{build_liouvillian, pl_rate, steady_state_unchecked, CollapseSet, DressedModel, ReadoutModel};
use crate::odmr_analysis::LorentzianFit;
use crate::spin_model::{
    exact_dressed_detuning, Basis, Detunings, DressedDetuning, DriveParams, FieldVector, Matrix3, NvParams,
};

pub const DEFAULT_GRID_POINTS: usize = 121;

/// How environmental changes are mapped onto `(delta_D, delta_B)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetuningModel {
    /// First-order expressions in `dD`, `dBz`, `dBx`.
    #[default]
    Linear,
    /// Exact transitions at the perturbed field, measured against the carriers.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    /// Common center frequencies `f` (MHz); tones sit at `f -+ (omega2 - omega1)/2`.
    pub f_grid: Vec<f64>,
    pub drive: DriveParams,
    pub collapse: CollapseSet,
    pub readout: ReadoutModel,
    pub detuning_model: DetuningModel,
}

impl SweepConfig {
    pub fn new(f_grid: Vec<f64>, drive: DriveParams, collapse: CollapseSet, readout: ReadoutModel) -> Result<Self> {
        if f_grid.len() < 2 {
            return Err(Error::invalid("f_grid", "needs at least two points"));
        }
        if f_grid.windows(2).any(|w| !(w[1] > w[0])) || f_grid.iter().any(|f| !f.is_finite()) {
            return Err(Error::invalid("f_grid", "must be finite and strictly increasing"));
        }
        if collapse.basis != Basis::Dressed {
            return Err(Error::BasisMismatch {
                expected: Basis::Dressed,
                found: collapse.basis,
            });
        }
        Ok(Self {
            f_grid,
            drive,
            collapse,
            readout,
            detuning_model: DetuningModel::Linear,
        })
    }

    pub fn with_detuning_model(mut self, model: DetuningModel) -> Self {
        self.detuning_model = model;
        self
    }

    /// Grid of [`DEFAULT_GRID_POINTS`] points spanning `f_avg +- 3 * linewidth`.
    pub fn centered(
        drive: DriveParams,
        collapse: CollapseSet,
        readout: ReadoutModel,
        linewidth_mhz: f64,
    ) -> Result<Self> {
        let grid = uniform_grid(drive.f_avg(), 3.0 * linewidth_mhz, DEFAULT_GRID_POINTS);
        Self::new(grid, drive, collapse, readout)
    }

    fn model(&self) -> DressedModel {
        DressedModel {
            drive: self.drive,
            collapse: self.collapse,
            readout: self.readout,
        }
    }

    fn base_detuning(&self, nv: &NvParams, field: &FieldVector, det_env: &Detunings) -> Result<DressedDetuning> {
        match self.detuning_model {
            DetuningModel::Linear => Ok(det_env.resolve(nv, field)),
            DetuningModel::Exact => exact_dressed_detuning(nv, field, det_env, &self.drive),
        }
    }
}

/// `n` evenly spaced points over `center +- half_span`.
pub fn uniform_grid(center: f64, half_span: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![center];
    }
    let step = 2.0 * half_span / (n - 1) as f64;
    (0..n).map(|i| center - half_span + step * i as f64).collect()
}

/// FWHM of the resonant two-level dip for bright-state coupling `sqrt2 * Omega`.
pub fn expected_linewidth(gamma_gl_mhz: f64, rabi_mhz: f64) -> f64 {
    (gamma_gl_mhz * gamma_gl_mhz + 16.0 * rabi_mhz * rabi_mhz).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub f_mhz: Vec<f64>,
    pub pl_cps: Vec<f64>,
    pub fit: Option<LorentzianFit>,
}

impl Spectrum {
    pub fn new(f_mhz: Vec<f64>, pl_cps: Vec<f64>) -> Result<Self> {
        if f_mhz.len() != pl_cps.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frequencies vs {} PL values",
                f_mhz.len(),
                pl_cps.len()
            )));
        }
        Ok(Self {
            f_mhz,
            pl_cps,
            fit: None,
        })
    }

    pub fn len(&self) -> usize {
        self.f_mhz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_mhz.is_empty()
    }

    /// Index of the lowest PL sample.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.pl_cps.iter().enumerate() {
            if p < self.pl_cps[best] {
                best = i;
            }
        }
        best
    }

    /// Number of local minima deeper than `min_depth` (relative to the edge level).
    pub fn count_dips(&self, min_depth: f64) -> usize {
        let n = self.len();
        if n < 3 {
            return 0;
        }
        let edge = 0.5 * (self.pl_cps[0] + self.pl_cps[n - 1]);
        (1..n - 1)
            .filter(|&i| {
                let p = self.pl_cps[i];
                p < self.pl_cps[i - 1] && p <= self.pl_cps[i + 1] && (edge - p) / edge > min_depth
            })
            .count()
    }

    /// `f_MHz,pl_cps` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("f_MHz,pl_cps\n");
        for (f, p) in self.f_mhz.iter().zip(&self.pl_cps) {
            let _ = writeln!(s, "{f},{p}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Steady-state PL with the tones' common center at `f_mhz`.
///
/// The sweep offset enters `delta_D` as `-(f - f_avg_nominal)`: raising the
/// drive frequencies lowers the level detuning in the rotating frame.
pub fn dressed_pl_at(model: &DressedModel, base: &DressedDetuning, f_mhz: f64) -> Result<f64> {
    let det = DressedDetuning {
        delta_d: base.delta_d - (f_mhz - model.drive.f_avg()),
        delta_b: base.delta_b,
    };
    model.steady_pl(&det)
}

/// DS-ODMR spectrum at field `field` with environmental detuning `det_env`.
pub fn simulate_spectrum(
    nv: &NvParams,
    field: &FieldVector,
    det_env: &Detunings,
    cfg: &SweepConfig,
) -> Result<Spectrum> {
    cfg.drive.check_valid()?;
    let base = cfg.base_detuning(nv, field, det_env)?;
    let model = cfg.model();
    let pl = cfg
        .f_grid
        .par_iter()
        .map(|&f| dressed_pl_at(&model, &base, f))
        .collect::<Result<Vec<_>>>()?;
    Spectrum::new(cfg.f_grid.clone(), pl)
}

/// Single-tone cw-ODMR of the lower transition, for comparison with DS-ODMR.
///
/// The grid of `cfg` is shifted by half the tone splitting so it is centered
/// on `omega1`; the returned frequencies are the tone frequency itself.
pub fn simulate_single_tone_spectrum(
    nv: &NvParams,
    field: &FieldVector,
    det_env: &Detunings,
    cfg: &SweepConfig,
) -> Result<Spectrum> {
    cfg.drive.check_valid()?;
    let base = cfg.base_detuning(nv, field, det_env)?;
    // transition detuning of |0> <-> |-1>: delta_1 = delta_D - delta_B
    let delta_1 = base.delta_d - base.delta_b;
    let collapse = CollapseSet::new(cfg.collapse.gamma_gl_mhz, Basis::Bare)?;
    let half = 0.5 * cfg.drive.splitting();
    let omega = Complex64::new(cfg.drive.rabi_mhz, 0.0);
    let f_tone: Vec<f64> = cfg.f_grid.iter().map(|f| f - half).collect();
    let pl = f_tone
        .par_iter()
        .map(|&f| {
            let d = delta_1 - (f - cfg.drive.omega1_mhz);
            let mut h = NMatrix3::<Complex64>::zeros();
            h[(0, 0)] = Complex64::new(cfg.drive.splitting(), 0.0);
            h[(1, 2)] = omega;
            h[(2, 1)] = omega;
            h[(2, 2)] = Complex64::new(d, 0.0);
            let l = build_liouvillian(&Matrix3::new(h, Basis::Bare), &collapse)?;
            Ok(pl_rate(&steady_state_unchecked(&l)?, &cfg.readout))
        })
        .collect::<Result<Vec<_>>>()?;
    Spectrum::new(f_tone, pl)
}
