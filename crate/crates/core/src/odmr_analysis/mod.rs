//! DS-ODMR spectra, Lorentzian fits, three/six-point extraction, shot-noise
//! sensitivity and magnetic-field robustness maps.

mod extraction;
mod fit;
mod robustness;
mod spectrum;

pub use extraction::{
    shot_noise_sensitivity, six_point_frequencies, six_point_shift, six_point_temperature, three_point_frequencies,
    three_point_shift, SixPointSet, BACKGROUND_OFFSET_LINEWIDTHS, SENSITIVITY_PREFACTOR,
};
pub use fit::{fit_lorentzian, fit_lorentzian_xy, lorentzian_dip, LorentzianFit, FIT_MAX_ITERATIONS};
pub use robustness::{
    bare_slope, cell_slope, field_robustness_map, line_scan, CellResult, CellStatus, Extraction, LineScan, LineScanRow,
    RobustnessCell, RobustnessMap, RobustnessSettings,
};
pub use spectrum::{
    dressed_pl_at, expected_linewidth, simulate_single_tone_spectrum, simulate_spectrum, uniform_grid, DetuningModel,
    Spectrum, SweepConfig, DEFAULT_GRID_POINTS,
};
