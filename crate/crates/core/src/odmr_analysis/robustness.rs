use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{CollapseSet, DressedModel, ReadoutModel};
use crate::odmr_analysis::{
    dressed_pl_at, expected_linewidth, fit_lorentzian, simulate_spectrum, three_point_frequencies, three_point_shift,
    DetuningModel, SweepConfig,
};
use crate::spin_model::{
    bare_hamiltonian, exact_dressed_detuning, transition_frequencies, Detunings, DriveParams, FieldVector, NvParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    #[default]
    ThreePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSettings {
    /// Central-difference half step in |B| (G).
    pub step_g: f64,
    /// Linewidth used by the three-point formula; fitted per cell when absent.
    pub gamma_ref_mhz: Option<f64>,
    pub extraction: Extraction,
    pub detuning_model: DetuningModel,
}

impl Default for RobustnessSettings {
    fn default() -> Self {
        Self {
            step_g: 0.2,
            gamma_ref_mhz: None,
            extraction: Extraction::ThreePoint,
            detuning_model: DetuningModel::Linear,
        }
    }
}

/// Reference point of one (|B|, theta) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellResult {
    /// d f_avg / d|B| (MHz/G).
    pub slope_mhz_per_g: f64,
    pub f_avg_mhz: f64,
    pub gamma_mhz: f64,
    pub c0: f64,
}

struct CellContext {
    model: DressedModel,
    field: FieldVector,
    f_avg: f64,
    gamma: f64,
    c0: f64,
    detuning_model: DetuningModel,
}

impl CellContext {
    fn new(
        nv: &NvParams,
        field: &FieldVector,
        rabi_mhz: f64,
        collapse: &CollapseSet,
        readout: &ReadoutModel,
        settings: &RobustnessSettings,
    ) -> Result<Self> {
        let drive = DriveParams::resonant(nv, field, rabi_mhz)?;
        drive.check_valid()?;
        let model = DressedModel {
            drive,
            collapse: *collapse,
            readout: *readout,
        };
        let width = expected_linewidth(collapse.gamma_gl_mhz, rabi_mhz);
        let cfg = SweepConfig::centered(drive, *collapse, *readout, width)?;
        let fit = fit_lorentzian(&simulate_spectrum(nv, field, &Detunings::default(), &cfg)?)?;
        Ok(Self {
            model,
            field: *field,
            f_avg: fit.f_avg,
            gamma: settings.gamma_ref_mhz.unwrap_or(fit.gamma),
            c0: fit.c0,
            detuning_model: settings.detuning_model,
        })
    }

    /// Three-point estimate of the center shift for a change `delta_g` of |B|.
    fn shift(&self, nv: &NvParams, delta_g: f64) -> Result<f64> {
        let raw = Detunings::from_magnitude_change(&self.field, delta_g);
        let base = match self.detuning_model {
            DetuningModel::Linear => raw.resolve(nv, &self.field),
            DetuningModel::Exact => exact_dressed_detuning(nv, &self.field, &raw, &self.model.drive)?,
        };
        let [f0, fb, fe] = three_point_frequencies(self.f_avg, self.gamma);
        let p0 = dressed_pl_at(&self.model, &base, f0)?;
        let pb = dressed_pl_at(&self.model, &base, fb)?;
        let pe = dressed_pl_at(&self.model, &base, fe)?;
        three_point_shift(pb, pe, p0, self.gamma)
    }
}

/// Slope of the three-point center estimate with |B| at `field`.
pub fn cell_slope(
    nv: &NvParams,
    field: &FieldVector,
    rabi_mhz: f64,
    collapse: &CollapseSet,
    readout: &ReadoutModel,
    settings: &RobustnessSettings,
) -> Result<CellResult> {
    if !(settings.step_g > 0.0) {
        return Err(Error::invalid("step_g", "must be positive"));
    }
    let ctx = CellContext::new(nv, field, rabi_mhz, collapse, readout, settings)?;
    let h = settings.step_g;
    let slope = (ctx.shift(nv, h)? - ctx.shift(nv, -h)?) / (2.0 * h);
    Ok(CellResult {
        slope_mhz_per_g: slope,
        f_avg_mhz: ctx.f_avg,
        gamma_mhz: ctx.gamma,
        c0: ctx.c0,
    })
}

/// `d omega2 / d|B|` of the bare upper transition (MHz/G), central difference.
pub fn bare_slope(nv: &NvParams, field: &FieldVector, step_g: f64) -> Result<f64> {
    let w2 = |b: f64| -> Result<f64> {
        let f = FieldVector::new(b, field.theta_rad)?;
        Ok(transition_frequencies(&bare_hamiltonian(nv, &f, 0.0))?.1)
    };
    Ok((w2(field.magnitude_g + step_g)? - w2(field.magnitude_g - step_g)?) / (2.0 * step_g))
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCell {
    pub b_g: f64,
    pub theta_rad: f64,
    /// kHz/G; `None` for invalid cells.
    pub slope_khz_per_g: Option<f64>,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessMap {
    pub b_grid: Vec<f64>,
    pub theta_grid: Vec<f64>,
    /// Row-major with |B| as the outer index.
    pub cells: Vec<RobustnessCell>,
    pub settings: RobustnessSettings,
}

impl RobustnessMap {
    pub fn cell(&self, ib: usize, it: usize) -> &RobustnessCell {
        &self.cells[ib * self.theta_grid.len() + it]
    }

    /// Per-axis index spans `(n_b, n_theta)` of cells with slope `<= limit`.
    pub fn region_extent(&self, limit_khz_per_g: f64) -> (usize, usize) {
        let inside = |c: &RobustnessCell| c.slope_khz_per_g.is_some_and(|s| s.abs() <= limit_khz_per_g);
        let nb = (0..self.b_grid.len())
            .filter(|&ib| (0..self.theta_grid.len()).any(|it| inside(self.cell(ib, it))))
            .count();
        let nt = (0..self.theta_grid.len())
            .filter(|&it| (0..self.b_grid.len()).any(|ib| inside(self.cell(ib, it))))
            .count();
        (nb, nt)
    }

    /// `B_G,theta_rad,slope_kHz_per_G,status`; invalid cells carry `nan` and a reason.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("B_G,theta_rad,slope_kHz_per_G,status\n");
        for c in &self.cells {
            let slope = c.slope_khz_per_g.map_or_else(|| "nan".to_string(), |v| v.to_string());
            let status = match &c.status {
                CellStatus::Ok => "ok".to_string(),
                CellStatus::Invalid(r) => format!("invalid: {}", r.replace([',', '\n'], ";")),
            };
            let _ = writeln!(s, "{},{},{},{}", c.b_g, c.theta_rad, slope, status);
        }
        s
    }
}

/// Three-point slope over a (|B|, theta) grid. The drive is placed on the
/// exact transitions of each cell; cells that fail carry the reason.
pub fn field_robustness_map(
    nv: &NvParams,
    rabi_mhz: f64,
    collapse: &CollapseSet,
    readout: &ReadoutModel,
    b_grid: &[f64],
    theta_grid: &[f64],
    settings: &RobustnessSettings,
) -> Result<RobustnessMap> {
    if b_grid.is_empty() || theta_grid.is_empty() {
        return Err(Error::invalid("grid", "must be non-empty"));
    }
    let jobs: Vec<(f64, f64)> = b_grid
        .iter()
        .flat_map(|&b| theta_grid.iter().map(move |&t| (b, t)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(b, t)| {
            let r = FieldVector::new(b, t).and_then(|f| cell_slope(nv, &f, rabi_mhz, collapse, readout, settings));
            match r {
                Ok(c) => RobustnessCell {
                    b_g: b,
                    theta_rad: t,
                    slope_khz_per_g: Some(c.slope_mhz_per_g * 1e3),
                    status: CellStatus::Ok,
                },
                Err(e) => RobustnessCell {
                    b_g: b,
                    theta_rad: t,
                    slope_khz_per_g: None,
                    status: CellStatus::Invalid(e.to_string()),
                },
            }
        })
        .collect();
    Ok(RobustnessMap {
        b_grid: b_grid.to_vec(),
        theta_grid: theta_grid.to_vec(),
        cells,
        settings: *settings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineScanRow {
    pub delta_b_g: f64,
    /// Three-point center shift of the dressed dip (MHz).
    pub dressed_shift_mhz: f64,
    /// Shift of the bare upper transition (MHz).
    pub bare_shift_mhz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineScan {
    pub rows: Vec<LineScanRow>,
    pub reference: CellResult,
    pub bare_slope_mhz_per_g: f64,
}

impl LineScan {
    pub fn ratio(&self) -> f64 {
        self.bare_slope_mhz_per_g.abs() / self.reference.slope_mhz_per_g.abs()
    }

    /// `dB_G,dressed_shift_MHz,bare_shift_MHz`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dB_G,dressed_shift_MHz,bare_shift_MHz\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.delta_b_g, r.dressed_shift_mhz, r.bare_shift_mhz);
        }
        s
    }
}

/// Center shift against |B| changes at fixed direction, with the bare-state
/// reference and the slope at `delta|B| = 0`.
pub fn line_scan(
    nv: &NvParams,
    field: &FieldVector,
    rabi_mhz: f64,
    collapse: &CollapseSet,
    readout: &ReadoutModel,
    deltas_g: &[f64],
    settings: &RobustnessSettings,
) -> Result<LineScan> {
    let ctx = CellContext::new(nv, field, rabi_mhz, collapse, readout, settings)?;
    let reference = cell_slope(nv, field, rabi_mhz, collapse, readout, settings)?;
    let w2_ref = transition_frequencies(&bare_hamiltonian(nv, field, 0.0))?.1;
    let rows = deltas_g
        .par_iter()
        .map(|&d| {
            let f = FieldVector::new(field.magnitude_g + d, field.theta_rad)?;
            let w2 = transition_frequencies(&bare_hamiltonian(nv, &f, 0.0))?.1;
            Ok(LineScanRow {
                delta_b_g: d,
                dressed_shift_mhz: ctx.shift(nv, d)?,
                bare_shift_mhz: w2 - w2_ref,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LineScan {
        rows,
        reference,
        bare_slope_mhz_per_g: bare_slope(nv, field, settings.step_g)?,
    })
}
