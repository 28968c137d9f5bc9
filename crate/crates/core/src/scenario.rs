//! Experiment configuration and the four commands of the `dressed-thermo`
//! binary. Every command returns an in-memory result that can be written to
//! an output directory; data files depend only on the configuration and the
//! seed, while wall-clock information goes to `meta.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{CollapseSet, DressedModel, ReadoutModel};
use crate::odmr_analysis::{
    expected_linewidth, field_robustness_map, fit_lorentzian, line_scan, simulate_single_tone_spectrum,
    simulate_spectrum, six_point_frequencies, uniform_grid, DetuningModel, LineScan, LorentzianFit, RobustnessMap,
    RobustnessSettings, SixPointSet, Spectrum, SweepConfig,
};
use crate::photon_pipeline::{
    default_windows, pipeline_stats, remove_dead_time, stack_by_delay, synthesize_stream, to_temperature,
    LindbladResponse, LorentzianResponse, Noise, PlResponse, TagStream, TemperatureProfile, TemperatureTrace,
    TimingConfig, DEFAULT_UNSTABLE_SIGMAS,
};
use crate::spin_model::{Basis, Detunings, DriveParams, FieldVector, NvParams};
use crate::thermal_sim::{
    load_source_map, run, save_field, save_source_map, stability_limit, ProbeTrace, SourceSchedule, StripScenario,
    ThermalGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Spectrum,
    Robustness,
    Thermal,
    TimeResolved,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Robustness => "robustness",
            Command::Thermal => "thermal",
            Command::TimeResolved => "time-resolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Output directory; relative paths resolve against the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub nv: NvSection,
    /// The spin sections below are required by every scenario except `thermal`.
    #[serde(default)]
    pub field: Option<FieldSection>,
    #[serde(default)]
    pub drive: Option<DriveSection>,
    #[serde(default)]
    pub collapse: Option<CollapseSection>,
    #[serde(default)]
    pub readout: Option<ReadoutSection>,
    #[serde(default)]
    pub spectrum: Option<SpectrumSection>,
    #[serde(default)]
    pub robustness: Option<RobustnessSection>,
    #[serde(default)]
    pub thermal: Option<ThermalSection>,
    #[serde(default)]
    pub time_resolved: Option<TimeResolvedSection>,
    /// Directory of the config file, for resolving relative input paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NvSection {
    pub d0_mhz: f64,
    pub dd_dt_mhz_per_k: f64,
    pub gamma_e_mhz_per_g: f64,
    pub strain_mhz: f64,
}

impl Default for NvSection {
    fn default() -> Self {
        let p = NvParams::default();
        Self {
            d0_mhz: p.d0_mhz,
            dd_dt_mhz_per_k: p.dd_dt_mhz_per_k,
            gamma_e_mhz_per_g: p.gamma_e_mhz_per_g,
            strain_mhz: p.strain_mhz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub magnitude_g: f64,
    pub theta_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    pub rabi_mhz: f64,
    /// Both tones default to the exact transitions at the configured field.
    #[serde(default)]
    pub omega1_mhz: Option<f64>,
    #[serde(default)]
    pub omega2_mhz: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseSection {
    pub gamma_gl_mhz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutSection {
    pub r_base_cps: f64,
    pub c_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    #[serde(default = "default_half_span")]
    pub half_span_mhz: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default)]
    pub detuning_model: DetuningModel,
    /// One spectrum per |B| change (G).
    #[serde(default = "zero_list")]
    pub delta_b_g: Vec<f64>,
    /// Also emit the conventional single-tone spectrum at each |B| change.
    #[serde(default)]
    pub single_tone: bool,
    /// Relative depth below which local minima are not counted as dips.
    #[serde(default = "default_min_dip_depth")]
    pub min_dip_depth: f64,
}

fn default_half_span() -> f64 {
    40.0
}
fn default_points() -> usize {
    161
}
fn zero_list() -> Vec<f64> {
    vec![0.0]
}
fn default_min_dip_depth() -> f64 {
    1e-3
}
fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSection {
    #[serde(default)]
    pub settings: RobustnessSettings,
    /// Line scan of |B| changes at the configured field (G).
    #[serde(default)]
    pub line_deltas_g: Option<Vec<f64>>,
    #[serde(default)]
    pub map: Option<MapSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub b_min_g: f64,
    pub b_max_g: f64,
    pub b_points: usize,
    pub theta_min_deg: f64,
    pub theta_max_deg: f64,
    pub theta_points: usize,
    /// Slope limit defining the robust region (kHz/G).
    #[serde(default = "default_region_limit")]
    pub region_limit_khz_per_g: f64,
}

fn default_region_limit() -> f64 {
    74.0
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalSection {
    pub strip: StripScenario,
    /// Replaces the analytic strip source; relative to the config file.
    #[serde(default)]
    pub source_map: Option<PathBuf>,
    pub pulse_start_us: f64,
    pub pulse_duration_us: f64,
    pub pulse_period_us: f64,
    pub t_end_us: f64,
    pub output_interval_us: f64,
    /// Probe positions `[x, y]` in micrometers.
    pub probes_um: Vec<[f64; 2]>,
    #[serde(default = "default_true")]
    pub gzip_fields: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Poisson,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseKind {
    #[default]
    Lindblad,
    Lorentzian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Step,
    Thermal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub kind: ProfileKind,
    /// Step height (K), `kind = "step"`.
    #[serde(default)]
    pub amplitude_k: Option<f64>,
    /// Rise/decay constant (ns), `kind = "step"`.
    #[serde(default)]
    pub tau_ns: f64,
    /// Probe index of the `[thermal]` run, `kind = "thermal"`.
    #[serde(default)]
    pub probe: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeResolvedSection {
    #[serde(default)]
    pub timing: TimingConfig,
    /// Accumulated cycles per realization.
    pub n: u64,
    #[serde(default = "one")]
    pub records: usize,
    #[serde(default)]
    pub noise: NoiseKind,
    /// Independent noisy repetitions, seeds `seed, seed + 1, ...`.
    #[serde(default = "one")]
    pub realizations: usize,
    pub d_omega_mhz: f64,
    #[serde(default)]
    pub response: ResponseKind,
    #[serde(default = "zero_list")]
    pub delta_b_g: Vec<f64>,
    #[serde(default = "default_sigmas")]
    pub unstable_sigmas: f64,
    pub profile: ProfileSection,
    /// Delay windows `[start, end)` in ns; default: before the trigger, and
    /// the last third of the pulse.
    #[serde(default)]
    pub baseline_window_ns: Option<[i64; 2]>,
    #[serde(default)]
    pub signal_window_ns: Option<[i64; 2]>,
    /// Write the raw tag stream of the first realization.
    #[serde(default)]
    pub write_streams: bool,
}

fn default_sigmas() -> f64 {
    DEFAULT_UNSTABLE_SIGMAS
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Checks everything that does not need a simulation.
    pub fn validate(&self) -> Result<()> {
        let nv = self.nv_params()?;
        let spin_given =
            self.field.is_some() || self.drive.is_some() || self.collapse.is_some() || self.readout.is_some();
        if spin_given || self.spectrum.is_some() || self.robustness.is_some() || self.time_resolved.is_some() {
            let field = self.field_vector()?;
            self.drive_params(&nv, &field)?;
            self.collapse_set()?;
            self.readout_model()?;
        }
        if let Some(s) = &self.spectrum {
            if s.points < 7 {
                return Err(Error::invalid("spectrum.points", "need at least 7"));
            }
            if !(s.half_span_mhz > 0.0) {
                return Err(Error::invalid("spectrum.half_span_mhz", "must be positive"));
            }
            if s.delta_b_g.is_empty() {
                return Err(Error::invalid("spectrum.delta_b_g", "must be non-empty"));
            }
        }
        if let Some(r) = &self.robustness {
            if r.line_deltas_g.is_none() && r.map.is_none() {
                return Err(Error::Config(
                    "[robustness] needs `line_deltas_g` or [robustness.map]".into(),
                ));
            }
            if !(r.settings.step_g > 0.0) {
                return Err(Error::invalid("robustness.settings.step_g", "must be positive"));
            }
            if let Some(m) = &r.map {
                if m.b_points == 0 || m.theta_points == 0 || !(m.b_min_g > 0.0) || m.b_max_g < m.b_min_g {
                    return Err(Error::invalid(
                        "robustness.map",
                        "need positive |B| range and point counts",
                    ));
                }
            }
        }
        if let Some(t) = &self.thermal {
            if !(t.pulse_period_us > 0.0
                && t.pulse_duration_us >= 0.0
                && t.pulse_duration_us <= t.pulse_period_us
                && t.pulse_start_us >= 0.0)
            {
                return Err(Error::invalid(
                    "thermal.pulse_period_us",
                    "need period > 0, 0 <= duration <= period, start >= 0",
                ));
            }
            if !(t.t_end_us > 0.0 && t.output_interval_us > 0.0) {
                return Err(Error::invalid(
                    "thermal.t_end_us",
                    "t_end and output interval must be positive",
                ));
            }
            if t.probes_um.is_empty() {
                return Err(Error::invalid("thermal.probes_um", "need at least one probe"));
            }
        }
        if let Some(tr) = &self.time_resolved {
            tr.timing.validate()?;
            if tr.n == 0 || tr.records == 0 || tr.records as u64 > tr.n {
                return Err(Error::invalid("time_resolved.n", "need n >= records >= 1"));
            }
            if tr.realizations == 0 {
                return Err(Error::invalid("time_resolved.realizations", "must be at least 1"));
            }
            if tr.delta_b_g.is_empty() {
                return Err(Error::invalid("time_resolved.delta_b_g", "must be non-empty"));
            }
            if tr.response == ResponseKind::Lorentzian && tr.delta_b_g.iter().any(|&d| d != 0.0) {
                return Err(Error::invalid(
                    "time_resolved.delta_b_g",
                    "|B| changes need response = \"lindblad\"",
                ));
            }
            match tr.profile.kind {
                ProfileKind::Step if tr.profile.amplitude_k.is_none() => {
                    return Err(Error::Config(
                        "time_resolved.profile: missing field `amplitude_k`".into(),
                    ));
                }
                ProfileKind::Thermal if self.thermal.is_none() => {
                    return Err(Error::Config(
                        "time_resolved.profile kind \"thermal\" needs a [thermal] section".into(),
                    ));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn nv_params(&self) -> Result<NvParams> {
        let n = &self.nv;
        NvParams::new(n.d0_mhz, n.dd_dt_mhz_per_k, n.gamma_e_mhz_per_g, n.strain_mhz)
    }

    pub fn field_vector(&self) -> Result<FieldVector> {
        let f = self.section(&self.field, "field")?;
        FieldVector::new(f.magnitude_g, f.theta_deg.to_radians())
    }

    pub fn drive_params(&self, nv: &NvParams, field: &FieldVector) -> Result<DriveParams> {
        let d = self.section(&self.drive, "drive")?;
        let res = DriveParams::resonant(nv, field, d.rabi_mhz)?;
        match (d.omega1_mhz, d.omega2_mhz) {
            (None, None) => Ok(res),
            (Some(w1), Some(w2)) => DriveParams::new(d.rabi_mhz, w1, w2, res.axial_zeeman_mhz),
            _ => Err(Error::Config(
                "drive: give both `omega1_mhz` and `omega2_mhz` or neither".into(),
            )),
        }
    }

    pub fn collapse_set(&self) -> Result<CollapseSet> {
        CollapseSet::new(self.section(&self.collapse, "collapse")?.gamma_gl_mhz, Basis::Dressed)
    }

    pub fn readout_model(&self) -> Result<ReadoutModel> {
        let r = self.section(&self.readout, "readout")?;
        ReadoutModel::new(r.r_base_cps, r.c_max)
    }

    fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref()
            .ok_or_else(|| Error::Config(format!("config `{}` has no [{name}] section", self.scenario)))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(dir, name, &text)
}

/// `+1.5` style label for file names.
fn delta_label(d: f64) -> String {
    format!("{d:+.2}")
}

// ---------------------------------------------------------------- spectrum

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumEntry {
    pub delta_b_g: f64,
    pub fit: Option<LorentzianFit>,
    pub fit_error: Option<String>,
    pub dips: usize,
    pub single_tone_fit: Option<LorentzianFit>,
    #[serde(skip)]
    pub spectrum: Spectrum,
    #[serde(skip)]
    pub single_tone: Option<Spectrum>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumOutput {
    pub f_avg_mhz: f64,
    pub expected_linewidth_mhz: f64,
    pub entries: Vec<SpectrumEntry>,
}

pub fn run_spectrum(cfg: &ExperimentConfig) -> Result<SpectrumOutput> {
    let sec = cfg.section(&cfg.spectrum, "spectrum")?;
    let nv = cfg.nv_params()?;
    let field = cfg.field_vector()?;
    let drive = cfg.drive_params(&nv, &field)?;
    let collapse = cfg.collapse_set()?;
    let readout = cfg.readout_model()?;
    let grid = uniform_grid(drive.f_avg(), sec.half_span_mhz, sec.points);
    let sweep = SweepConfig::new(grid.clone(), drive, collapse, readout)?.with_detuning_model(sec.detuning_model);
    let mut entries = Vec::with_capacity(sec.delta_b_g.len());
    for &d in &sec.delta_b_g {
        let env = Detunings::from_magnitude_change(&field, d);
        let spectrum = simulate_spectrum(&nv, &field, &env, &sweep)?;
        let (fit, fit_error) = match fit_lorentzian(&spectrum) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let single_tone = if sec.single_tone {
            Some(simulate_single_tone_spectrum(&nv, &field, &env, &sweep)?)
        } else {
            None
        };
        entries.push(SpectrumEntry {
            delta_b_g: d,
            dips: spectrum.count_dips(sec.min_dip_depth),
            fit,
            fit_error,
            single_tone_fit: single_tone.as_ref().and_then(|s| fit_lorentzian(s).ok()),
            spectrum,
            single_tone,
        });
    }
    Ok(SpectrumOutput {
        f_avg_mhz: drive.f_avg(),
        expected_linewidth_mhz: expected_linewidth(collapse.gamma_gl_mhz, drive.rabi_mhz),
        entries,
    })
}

impl SpectrumOutput {
    /// `spectra.csv` (`dB_G,f_MHz,pl_cps`), `spectra_single_tone.csv` when
    /// requested, and `fits.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let long = |pick: &dyn Fn(&SpectrumEntry) -> Option<&Spectrum>| {
            let mut s = String::from("dB_G,f_MHz,pl_cps\n");
            for e in &self.entries {
                if let Some(sp) = pick(e) {
                    for (f, p) in sp.f_mhz.iter().zip(&sp.pl_cps) {
                        let _ = writeln!(s, "{},{f},{p}", e.delta_b_g);
                    }
                }
            }
            s
        };
        let mut files = vec![write_text(dir, "spectra.csv", &long(&|e| Some(&e.spectrum)))?];
        if self.entries.iter().any(|e| e.single_tone.is_some()) {
            files.push(write_text(
                dir,
                "spectra_single_tone.csv",
                &long(&|e| e.single_tone.as_ref()),
            )?);
        }
        files.push(write_json(dir, "fits.json", self)?);
        Ok(files)
    }
}

// -------------------------------------------------------------- robustness

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineSummary {
    pub slope_khz_per_g: f64,
    pub bare_slope_mhz_per_g: f64,
    pub attenuation_ratio: f64,
    pub fitted_gamma_mhz: f64,
    pub fitted_c0: f64,
    pub f_avg_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapSummary {
    pub region_limit_khz_per_g: f64,
    /// Number of distinct |B| and theta grid values inside the region.
    pub region_extent: [usize; 2],
    pub invalid_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessSummary {
    pub line: Option<LineSummary>,
    pub map: Option<MapSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessOutput {
    pub line: Option<LineScan>,
    pub map: Option<RobustnessMap>,
    pub summary: RobustnessSummary,
}

pub fn run_robustness(cfg: &ExperimentConfig) -> Result<RobustnessOutput> {
    let sec = cfg.section(&cfg.robustness, "robustness")?;
    let nv = cfg.nv_params()?;
    let field = cfg.field_vector()?;
    let collapse = cfg.collapse_set()?;
    let readout = cfg.readout_model()?;
    let rabi = cfg.section(&cfg.drive, "drive")?.rabi_mhz;
    let line = match &sec.line_deltas_g {
        Some(d) => Some(line_scan(&nv, &field, rabi, &collapse, &readout, d, &sec.settings)?),
        None => None,
    };
    let map = match &sec.map {
        Some(m) => {
            let b = linspace(m.b_min_g, m.b_max_g, m.b_points);
            let t: Vec<f64> = linspace(m.theta_min_deg, m.theta_max_deg, m.theta_points)
                .into_iter()
                .map(f64::to_radians)
                .collect();
            Some(field_robustness_map(
                &nv,
                rabi,
                &collapse,
                &readout,
                &b,
                &t,
                &sec.settings,
            )?)
        }
        None => None,
    };
    let summary = RobustnessSummary {
        line: line.as_ref().map(|l| LineSummary {
            slope_khz_per_g: l.reference.slope_mhz_per_g * 1e3,
            bare_slope_mhz_per_g: l.bare_slope_mhz_per_g,
            attenuation_ratio: l.ratio(),
            fitted_gamma_mhz: l.reference.gamma_mhz,
            fitted_c0: l.reference.c0,
            f_avg_mhz: l.reference.f_avg_mhz,
        }),
        map: map.as_ref().zip(sec.map.as_ref()).map(|(m, s)| {
            let (nb, nt) = m.region_extent(s.region_limit_khz_per_g);
            MapSummary {
                region_limit_khz_per_g: s.region_limit_khz_per_g,
                region_extent: [nb, nt],
                invalid_cells: m.cells.iter().filter(|c| c.slope_khz_per_g.is_none()).count(),
            }
        }),
    };
    Ok(RobustnessOutput { line, map, summary })
}

impl RobustnessOutput {
    /// `line_scan.csv`, `map.csv` and `robustness.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        if let Some(l) = &self.line {
            files.push(write_text(dir, "line_scan.csv", &l.to_csv())?);
        }
        if let Some(m) = &self.map {
            files.push(write_text(dir, "map.csv", &m.to_csv())?);
        }
        files.push(write_json(dir, "robustness.json", &self.summary)?);
        Ok(files)
    }
}

// ----------------------------------------------------------------- thermal

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSummary {
    pub x_um: f64,
    pub y_um: f64,
    pub ix: usize,
    pub iy: usize,
    /// Temperature at pulse end minus temperature at pulse start (K).
    pub pulse_rise_k: f64,
    /// 10-90% rise time during the pulse (us).
    pub rise_time_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThermalSummary {
    pub nx: usize,
    pub ny: usize,
    pub stability_limit_s: f64,
    pub source_power_w_per_m: f64,
    pub probes: Vec<ProbeSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalOutput {
    pub grid: ThermalGrid,
    pub source: crate::thermal_sim::SourceMap,
    /// Temperature field at the end of the first pulse.
    pub pulse_end_field: Vec<f64>,
    pub traces: Vec<ProbeTrace>,
    pub summary: ThermalSummary,
    gzip: bool,
}

pub fn run_thermal(cfg: &ExperimentConfig) -> Result<ThermalOutput> {
    let sec = cfg.section(&cfg.thermal, "thermal")?;
    let (mut grid, analytic) = sec.strip.build()?;
    let source = match &sec.source_map {
        Some(p) => load_source_map(&cfg.resolve(p), &grid)?,
        None => analytic,
    };
    let mut probes = Vec::with_capacity(sec.probes_um.len());
    for [x, y] in &sec.probes_um {
        let cell = grid
            .locate(x * 1e-6, y * 1e-6)
            .ok_or_else(|| Error::invalid("thermal.probes_um", format!("({x}, {y}) um lies outside the domain")))?;
        probes.push(cell);
    }
    let limit = stability_limit(&grid);
    let dt_out = sec.output_interval_us;
    let t_snap = (sec.pulse_start_us + sec.pulse_duration_us).min(sec.t_end_us);
    let n_snap = (t_snap / dt_out).round();
    if ((n_snap * dt_out) - t_snap).abs() > 1e-9 * t_snap.max(1.0) {
        return Err(Error::invalid(
            "thermal.output_interval_us",
            "must divide pulse_start_us + pulse_duration_us",
        ));
    }
    let first = SourceSchedule::new(
        source.clone(),
        sec.pulse_start_us,
        sec.pulse_duration_us,
        sec.pulse_period_us,
    )?;
    let mut traces = run(&mut grid, &first, t_snap, dt_out, &probes)?;
    let pulse_end_field = grid.temperature.clone();
    if sec.t_end_us > t_snap {
        // same pulse train, clock restarted at the snapshot
        let next = (sec.pulse_start_us + sec.pulse_period_us - t_snap).max(0.0);
        let rest = SourceSchedule::new(source.clone(), next, sec.pulse_duration_us, sec.pulse_period_us)?;
        let tail = run(&mut grid, &rest, sec.t_end_us - t_snap, dt_out, &probes)?;
        for (tr, more) in traces.iter_mut().zip(tail) {
            for (t, v) in more.t_us.iter().zip(&more.t_c).skip(1) {
                tr.t_us.push(t + t_snap);
                tr.t_c.push(*v);
            }
        }
    }
    let t_on = sec.pulse_start_us;
    let summary = ThermalSummary {
        nx: grid.nx(),
        ny: grid.ny(),
        stability_limit_s: limit,
        source_power_w_per_m: grid.total_power(&source),
        probes: traces
            .iter()
            .zip(&sec.probes_um)
            .map(|(tr, [x, y])| ProbeSummary {
                x_um: *x,
                y_um: *y,
                ix: tr.ix,
                iy: tr.iy,
                pulse_rise_k: tr.sample(t_snap) - tr.sample(t_on),
                rise_time_us: tr.rise_time_us(t_on, t_snap),
            })
            .collect(),
    };
    Ok(ThermalOutput {
        grid,
        source,
        pulse_end_field,
        traces,
        summary,
        gzip: sec.gzip_fields,
    })
}

impl ThermalOutput {
    /// `probes.csv` (`t_us,T_C_0,T_C_1,...`), `source_map.csv[.gz]`,
    /// `field_pulse_end.csv[.gz]` and `thermal.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut s = String::from("t_us");
        for k in 0..self.traces.len() {
            let _ = write!(s, ",T_C_{k}");
        }
        s.push('\n');
        if let Some(first) = self.traces.first() {
            for (i, t) in first.t_us.iter().enumerate() {
                let _ = write!(s, "{t}");
                for tr in &self.traces {
                    let _ = write!(s, ",{}", tr.t_c[i]);
                }
                s.push('\n');
            }
        }
        let ext = if self.gzip { "csv.gz" } else { "csv" };
        let src = dir.join(format!("source_map.{ext}"));
        save_source_map(&src, &self.grid, &self.source)?;
        let field = dir.join(format!("field_pulse_end.{ext}"));
        save_field(&field, &self.grid, &self.pulse_end_field)?;
        Ok(vec![
            write_text(dir, "probes.csv", &s)?,
            src,
            field,
            write_json(dir, "thermal.json", &self.summary)?,
        ])
    }
}

// ----------------------------------------------------------- time-resolved

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeResolvedRun {
    pub delta_b_g: f64,
    /// Root-mean-square over realizations of the baseline RMS (K).
    pub rms_k: Option<f64>,
    /// Mean step amplitude over realizations (K).
    pub amplitude_k: Option<f64>,
    pub snr: Option<f64>,
    pub sensitivity_k_per_sqrt_hz: Option<f64>,
    /// Mean fraction of flagged points over realizations.
    pub flag_rate: f64,
    pub snr_below_3: bool,
    /// Amplitude of the noiseless run (K).
    pub amplitude_noiseless_k: Option<f64>,
    /// Noiseless amplitude minus the noiseless amplitude at zero |B| change.
    pub eps_sys_k: Option<f64>,
    #[serde(skip)]
    pub trace: TemperatureTrace,
    #[serde(skip)]
    pub noiseless_trace: TemperatureTrace,
    #[serde(skip)]
    pub stream: Option<TagStream>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeResolvedOutput {
    pub reference_fit: LorentzianFit,
    pub six_point: SixPointSet,
    pub point_integration_s: f64,
    pub resolution_ns: u64,
    pub realizations: usize,
    pub seed: u64,
    pub runs: Vec<TimeResolvedRun>,
}

fn step_amplitude(tr: &TemperatureTrace, base: (i64, i64), sig: (i64, i64), t_int: f64) -> Option<f64> {
    pipeline_stats(tr, base, sig, t_int).ok().map(|s| s.amplitude_k)
}

pub fn run_time_resolved(cfg: &ExperimentConfig, seed: u64) -> Result<TimeResolvedOutput> {
    let sec = cfg.section(&cfg.time_resolved, "time_resolved")?;
    let nv = cfg.nv_params()?;
    let field = cfg.field_vector()?;
    let drive = cfg.drive_params(&nv, &field)?;
    let collapse = cfg.collapse_set()?;
    let readout = cfg.readout_model()?;
    let timing = sec.timing;

    let sweep = SweepConfig::centered(
        drive,
        collapse,
        readout,
        expected_linewidth(collapse.gamma_gl_mhz, drive.rabi_mhz),
    )?;
    let reference = simulate_spectrum(&nv, &field, &Detunings::default(), &sweep)?;
    let fit = fit_lorentzian(&reference)?;
    let six = six_point_frequencies(fit.f_avg, fit.gamma, sec.d_omega_mhz)?;

    let profile = match sec.profile.kind {
        ProfileKind::Step => {
            TemperatureProfile::step(sec.profile.amplitude_k.unwrap_or(0.0), sec.profile.tau_ns, &timing)
        }
        ProfileKind::Thermal => {
            let th = run_thermal(cfg)?;
            let tr = th.traces.get(sec.profile.probe).ok_or_else(|| {
                Error::invalid(
                    "time_resolved.profile.probe",
                    format!("only {} probes", th.traces.len()),
                )
            })?;
            let t_on = cfg.thermal.as_ref().map_or(0.0, |t| t.pulse_start_us);
            TemperatureProfile::from_probe(tr, t_on, timing.heat_period_ns as f64)?
        }
    };
    let (def_base, def_sig) = default_windows(&timing);
    let base = sec.baseline_window_ns.map_or(def_base, |w| (w[0], w[1]));
    let sig = sec.signal_window_ns.map_or(def_sig, |w| (w[0], w[1]));
    let t_int = timing.point_integration_s(sec.n);
    let model = DressedModel::new(drive, collapse.gamma_gl_mhz, readout)?;

    let process = |response: &dyn PlResponse, noise: Noise| -> Result<(TemperatureTrace, TagStream)> {
        let raw = synthesize_stream(&profile, response, &six, &timing, sec.n, sec.records, noise)?;
        let st = stack_by_delay(&remove_dead_time(&raw, &timing)?, &timing)?;
        let tr = to_temperature(&st, &six, nv.dd_dt_mhz_per_k, &timing, sec.unstable_sigmas)?;
        Ok((tr, raw))
    };

    let mut runs = Vec::with_capacity(sec.delta_b_g.len());
    for &d in &sec.delta_b_g {
        let lindblad = LindbladResponse {
            model,
            nv,
            field,
            env: Detunings::from_magnitude_change(&field, d),
        };
        let lorentz = LorentzianResponse {
            fit,
            dd_dt_mhz_per_k: nv.dd_dt_mhz_per_k,
        };
        let response: &dyn PlResponse = match sec.response {
            ResponseKind::Lindblad => &lindblad,
            ResponseKind::Lorentzian => &lorentz,
        };
        let (noiseless_trace, noiseless_stream) = process(response, Noise::None)?;
        let amplitude_noiseless = step_amplitude(&noiseless_trace, base, sig, t_int);

        let mut traces = Vec::new();
        let mut first_stream = None;
        match sec.noise {
            NoiseKind::None => {
                traces.push(noiseless_trace.clone());
                first_stream = Some(noiseless_stream);
            }
            NoiseKind::Poisson => {
                for k in 0..sec.realizations {
                    let (tr, raw) = process(
                        response,
                        Noise::Poisson {
                            seed: seed.wrapping_add(k as u64),
                        },
                    )?;
                    if k == 0 {
                        first_stream = Some(raw);
                    }
                    traces.push(tr);
                }
            }
        }
        let stats: Vec<_> = traces
            .iter()
            .filter_map(|t| pipeline_stats(t, base, sig, t_int).ok())
            .collect();
        let (rms, amp) = if stats.is_empty() {
            (None, None)
        } else {
            let m = stats.len() as f64;
            (
                Some((stats.iter().map(|s| s.rms_k * s.rms_k).sum::<f64>() / m).sqrt()),
                Some(stats.iter().map(|s| s.amplitude_k).sum::<f64>() / m),
            )
        };
        let snr = rms.zip(amp).map(|(r, a)| if r > 0.0 { a / r } else { f64::INFINITY });
        let flag_rate = traces.iter().map(TemperatureTrace::flag_rate).sum::<f64>() / traces.len() as f64;
        runs.push(TimeResolvedRun {
            delta_b_g: d,
            rms_k: rms,
            amplitude_k: amp,
            snr,
            sensitivity_k_per_sqrt_hz: rms.map(|r| r * t_int.sqrt()),
            flag_rate,
            snr_below_3: snr.is_none_or(|s| s.abs() < 3.0),
            amplitude_noiseless_k: amplitude_noiseless,
            eps_sys_k: None,
            trace: traces.swap_remove(0),
            noiseless_trace,
            stream: if sec.write_streams { first_stream } else { None },
        });
    }
    let reference_amp = runs
        .iter()
        .find(|r| r.delta_b_g == 0.0)
        .and_then(|r| r.amplitude_noiseless_k);
    for r in &mut runs {
        r.eps_sys_k = reference_amp.zip(r.amplitude_noiseless_k).map(|(a0, a)| a - a0);
    }
    Ok(TimeResolvedOutput {
        reference_fit: fit,
        six_point: six,
        point_integration_s: t_int,
        resolution_ns: timing.resolution_ns(),
        realizations: match sec.noise {
            NoiseKind::None => 1,
            NoiseKind::Poisson => sec.realizations,
        },
        seed,
        runs,
    })
}

impl TimeResolvedOutput {
    /// Per |B| change: `trace_dB<d>.csv` (first realization),
    /// `trace_dB<d>_noiseless.csv`, optionally `stream_dB<d>.txt`; plus
    /// `stats.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for r in &self.runs {
            let label = delta_label(r.delta_b_g);
            files.push(write_text(dir, &format!("trace_dB{label}.csv"), &r.trace.to_csv())?);
            files.push(write_text(
                dir,
                &format!("trace_dB{label}_noiseless.csv"),
                &r.noiseless_trace.to_csv(),
            )?);
            if let Some(s) = &r.stream {
                let p = dir.join(format!("stream_dB{label}.txt"));
                s.write(&p)?;
                files.push(p);
            }
        }
        files.push(write_json(dir, "stats.json", self)?);
        Ok(files)
    }
}

// ---------------------------------------------------------------- dispatch

#[derive(Debug, Clone, Serialize)]
struct Meta<'a> {
    command: &'a str,
    scenario: &'a str,
    config: String,
    seed: u64,
    threads: usize,
    version: &'a str,
    started_unix_s: u64,
    finished_unix_s: u64,
    files: Vec<String>,
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Runs `cmd`, writes its data files to `out` and a `meta.json` with timing
/// information. Returns the data files written.
pub fn execute(
    cmd: Command,
    cfg: &ExperimentConfig,
    config_path: &Path,
    out: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let started = unix_now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let files = match cmd {
        Command::Spectrum => run_spectrum(cfg)?.write(out)?,
        Command::Robustness => run_robustness(cfg)?.write(out)?,
        Command::Thermal => run_thermal(cfg)?.write(out)?,
        Command::TimeResolved => run_time_resolved(cfg, seed)?.write(out)?,
    };
    let meta = Meta {
        command: cmd.name(),
        scenario: &cfg.scenario,
        config: config_path.display().to_string(),
        seed,
        threads: rayon::current_num_threads(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        files: files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect(),
    };
    write_json(out, "meta.json", &meta)?;
    Ok(files)
}
