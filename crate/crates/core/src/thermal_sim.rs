//! Explicit finite-difference heat diffusion on a nonuniform 2D grid of
//! heterogeneous cells, with a surface source, convective loss and
//! zero-flux (Neumann) outer edges.
//!
//! Cell `(ix, iy)` spans `[x[ix], x[ix+1]] x [y[iy], y[iy+1]]`. Fields are
//! stored row-major, `k = iy * nx + ix`. SI units throughout except
//! temperatures (degrees C) and schedule/trace times (microseconds).
//!
//! The update is written in flux form. The temperature on the face between
//! cells `c` and `n` is the conductivity-weighted mean
//!
//! ```text
//! T_f = (a_c T_c + a_n T_n) / (a_c + a_n),   a = sigma / (w / 2)
//! ```
//!
//! which on a uniform grid is the plain `sigma`-weighted mean. The face flux
//! `a_c (T_c - T_f) = K (T_c - T_n)` with `K = a_c a_n / (a_c + a_n)` is
//! antisymmetric, so conduction conserves heat exactly up to round-off.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the per-cell explicit bound used as the stability limit.
pub const STABILITY_SAFETY: f64 = 0.5;

/// Effective convective coefficient reproducing the measured transients (W/(m^2 K)).
pub const DEFAULT_H_CONVECTION: f64 = 2e8;
pub const DEFAULT_T_INF_C: f64 = 26.0;
/// Gold film thickness used for the 2D reduction (m).
pub const DEFAULT_THICKNESS_M: f64 = 500e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialCell {
    /// Thermal conductivity (W/(m K)).
    pub sigma: f64,
    /// Specific heat (J/(g K)).
    pub c_sp: f64,
    /// Mass density (g/m^3).
    pub rho_m: f64,
}

impl MaterialCell {
    pub const GOLD: MaterialCell = MaterialCell {
        sigma: 310.0,
        c_sp: 0.129,
        rho_m: 19.3e6,
    };
    pub const AIR: MaterialCell = MaterialCell {
        sigma: 0.026,
        c_sp: 1.006,
        rho_m: 1.18e3,
    };

    pub fn new(sigma: f64, c_sp: f64, rho_m: f64) -> Result<Self> {
        let m = Self { sigma, c_sp, rho_m };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("c_sp", self.c_sp), ("rho_m", self.rho_m)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "material constants must be positive"));
            }
        }
        Ok(())
    }

    /// Volumetric heat capacity `rho_m * c_sp` (J/(m^3 K)).
    pub fn heat_capacity(&self) -> f64 {
        self.rho_m * self.c_sp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    MinusX,
    PlusX,
    MinusY,
    PlusY,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::MinusX, Direction::PlusX, Direction::MinusY, Direction::PlusY];
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalGrid {
    x_edges: Vec<f64>,
    y_edges: Vec<f64>,
    materials: Vec<MaterialCell>,
    /// Cell temperatures (degrees C).
    pub temperature: Vec<f64>,
    /// Film thickness `l` (m).
    pub thickness_m: f64,
    /// `h_convection` (W/(m^2 K)).
    pub h_convection: f64,
    pub t_inf_c: f64,
}

fn check_edges(name: &'static str, e: &[f64]) -> Result<()> {
    if e.len() < 2 {
        return Err(Error::invalid(name, "needs at least two edges"));
    }
    if e.iter().any(|v| !v.is_finite()) || e.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(name, "edges must be finite and strictly increasing"));
    }
    Ok(())
}

impl ThermalGrid {
    /// Grid at uniform temperature `t_inf_c` with the given materials.
    pub fn new(
        x_edges: Vec<f64>,
        y_edges: Vec<f64>,
        materials: Vec<MaterialCell>,
        thickness_m: f64,
        h_convection: f64,
        t_inf_c: f64,
    ) -> Result<Self> {
        check_edges("x_edges", &x_edges)?;
        check_edges("y_edges", &y_edges)?;
        let n = (x_edges.len() - 1) * (y_edges.len() - 1);
        if materials.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} materials for {} cells",
                materials.len(),
                n
            )));
        }
        for m in &materials {
            m.validate()?;
        }
        if !(thickness_m > 0.0 && thickness_m.is_finite()) {
            return Err(Error::invalid("thickness_m", "must be positive"));
        }
        if !(h_convection >= 0.0 && h_convection.is_finite()) {
            return Err(Error::invalid("h_convection", "must be non-negative"));
        }
        if !t_inf_c.is_finite() {
            return Err(Error::invalid("t_inf_c", "must be finite"));
        }
        Ok(Self {
            x_edges,
            y_edges,
            materials,
            temperature: vec![t_inf_c; n],
            thickness_m,
            h_convection,
            t_inf_c,
        })
    }

    pub fn uniform_material(
        x_edges: Vec<f64>,
        y_edges: Vec<f64>,
        material: MaterialCell,
        thickness_m: f64,
        h_convection: f64,
        t_inf_c: f64,
    ) -> Result<Self> {
        let n = (x_edges.len().max(1) - 1) * (y_edges.len().max(1) - 1);
        Self::new(x_edges, y_edges, vec![material; n], thickness_m, h_convection, t_inf_c)
    }

    pub fn nx(&self) -> usize {
        self.x_edges.len() - 1
    }

    pub fn ny(&self) -> usize {
        self.y_edges.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nx() * self.ny()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_edges(&self) -> &[f64] {
        &self.x_edges
    }

    pub fn y_edges(&self) -> &[f64] {
        &self.y_edges
    }

    pub fn materials(&self) -> &[MaterialCell] {
        &self.materials
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx() + ix
    }

    pub fn dx(&self, ix: usize) -> f64 {
        self.x_edges[ix + 1] - self.x_edges[ix]
    }

    pub fn dy(&self, iy: usize) -> f64 {
        self.y_edges[iy + 1] - self.y_edges[iy]
    }

    pub fn area(&self, ix: usize, iy: usize) -> f64 {
        self.dx(ix) * self.dy(iy)
    }

    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            0.5 * (self.x_edges[ix] + self.x_edges[ix + 1]),
            0.5 * (self.y_edges[iy] + self.y_edges[iy + 1]),
        )
    }

    /// Cell containing `(x, y)`, if inside the domain.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let find = |e: &[f64], v: f64| -> Option<usize> {
            if v < e[0] || v > e[e.len() - 1] {
                return None;
            }
            Some(e.partition_point(|&b| b <= v).clamp(1, e.len() - 1) - 1)
        };
        Some((find(&self.x_edges, x)?, find(&self.y_edges, y)?))
    }

    pub fn set_material(&mut self, ix: usize, iy: usize, m: MaterialCell) -> Result<()> {
        m.validate()?;
        let k = self.index(ix, iy);
        self.materials[k] = m;
        Ok(())
    }

    fn neighbor(&self, ix: usize, iy: usize, dir: Direction) -> Option<(usize, usize)> {
        match dir {
            Direction::MinusX => ix.checked_sub(1).map(|j| (j, iy)),
            Direction::PlusX => (ix + 1 < self.nx()).then_some((ix + 1, iy)),
            Direction::MinusY => iy.checked_sub(1).map(|j| (ix, j)),
            Direction::PlusY => (iy + 1 < self.ny()).then_some((ix, iy + 1)),
        }
    }

    fn width_along(&self, ix: usize, iy: usize, dir: Direction) -> f64 {
        match dir {
            Direction::MinusX | Direction::PlusX => self.dx(ix),
            Direction::MinusY | Direction::PlusY => self.dy(iy),
        }
    }

    /// Face conductance `K` (W/(m^2 K)) towards `dir`; zero at outer edges.
    fn conductance(&self, ix: usize, iy: usize, dir: Direction) -> f64 {
        let Some((jx, jy)) = self.neighbor(ix, iy, dir) else {
            return 0.0;
        };
        let a_c = self.materials[self.index(ix, iy)].sigma / (0.5 * self.width_along(ix, iy, dir));
        let a_n = self.materials[self.index(jx, jy)].sigma / (0.5 * self.width_along(jx, jy, dir));
        a_c * a_n / (a_c + a_n)
    }

    /// Sum over cells of `rho C_sp T * area` (J/m, per unit thickness).
    pub fn heat_content(&self) -> f64 {
        let mut total = 0.0;
        for iy in 0..self.ny() {
            for ix in 0..self.nx() {
                let k = self.index(ix, iy);
                total += self.materials[k].heat_capacity() * self.temperature[k] * self.area(ix, iy);
            }
        }
        total
    }

    /// `sum h (T - T_inf) * area` (W).
    pub fn convective_loss(&self) -> f64 {
        let mut total = 0.0;
        for iy in 0..self.ny() {
            for ix in 0..self.nx() {
                total += self.h_convection * (self.temperature[self.index(ix, iy)] - self.t_inf_c) * self.area(ix, iy);
            }
        }
        total
    }

    /// `sum Q * area` for a surface loss map (W).
    pub fn total_power(&self, map: &SourceMap) -> f64 {
        let mut total = 0.0;
        for iy in 0..self.ny() {
            for ix in 0..self.nx() {
                total += map.values[self.index(ix, iy)] * self.area(ix, iy);
            }
        }
        total
    }
}

/// Face temperature between a cell and its neighbour in `dir`.
///
/// At an outer edge the cell's own temperature is returned (no flux).
pub fn interface_temperature(grid: &ThermalGrid, ix: usize, iy: usize, dir: Direction) -> f64 {
    let k = grid.index(ix, iy);
    let t = grid.temperature[k];
    let Some((jx, jy)) = grid.neighbor(ix, iy, dir) else {
        return t;
    };
    let j = grid.index(jx, jy);
    let a_c = grid.materials[k].sigma / (0.5 * grid.width_along(ix, iy, dir));
    let a_n = grid.materials[j].sigma / (0.5 * grid.width_along(jx, jy, dir));
    (a_c * t + a_n * grid.temperature[j]) / (a_c + a_n)
}

/// Largest stable explicit time step (s), including [`STABILITY_SAFETY`].
pub fn stability_limit(grid: &ThermalGrid) -> f64 {
    let mut best = f64::INFINITY;
    for iy in 0..grid.ny() {
        for ix in 0..grid.nx() {
            let k = grid.index(ix, iy);
            let mut rate = grid.h_convection / grid.thickness_m;
            for dir in Direction::ALL {
                rate += grid.conductance(ix, iy, dir) / grid.width_along(ix, iy, dir);
            }
            if rate > 0.0 {
                best = best.min(grid.materials[k].heat_capacity() / rate);
            }
        }
    }
    STABILITY_SAFETY * best
}

/// Per-cell surface loss density (W/m^2) on a grid's cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceMap {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl SourceMap {
    pub fn zeros(grid: &ThermalGrid) -> Self {
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: &ThermalGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "source map has {} values for {} cells",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "source map",
                "power density must be finite and non-negative",
            ));
        }
        Ok(Self {
            nx: grid.nx(),
            ny: grid.ny(),
            values,
        })
    }

    /// `power` W/m^2 in cells whose centers lie in the rectangle, zero elsewhere.
    pub fn uniform_rect(grid: &ThermalGrid, x0: f64, x1: f64, y0: f64, y1: f64, power: f64) -> Result<Self> {
        let mut values = vec![0.0; grid.len()];
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                let (cx, cy) = grid.center(ix, iy);
                if (x0..=x1).contains(&cx) && (y0..=y1).contains(&cy) {
                    values[grid.index(ix, iy)] = power;
                }
            }
        }
        Self::from_values(grid, values)
    }

    /// Gaussian spot `peak * exp(-r^2 / (2 s^2))` sampled at cell centers.
    pub fn gaussian(grid: &ThermalGrid, cx: f64, cy: f64, sigma_m: f64, peak: f64) -> Result<Self> {
        if !(sigma_m > 0.0) {
            return Err(Error::invalid("sigma_m", "must be positive"));
        }
        let mut values = vec![0.0; grid.len()];
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                let (x, y) = grid.center(ix, iy);
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                values[grid.index(ix, iy)] = peak * (-r2 / (2.0 * sigma_m * sigma_m)).exp();
            }
        }
        Self::from_values(grid, values)
    }

    pub fn scaled(&self, factor: f64) -> SourceMap {
        SourceMap {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..*self
        }
    }
}

/// Spatial map gated by a repeating pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSchedule {
    pub map: SourceMap,
    pub start_us: f64,
    pub duration_us: f64,
    pub period_us: f64,
}

impl SourceSchedule {
    pub fn new(map: SourceMap, start_us: f64, duration_us: f64, period_us: f64) -> Result<Self> {
        if !(period_us > 0.0 && duration_us >= 0.0 && duration_us <= period_us && start_us >= 0.0) {
            return Err(Error::invalid(
                "schedule",
                "need period > 0, 0 <= duration <= period, start >= 0",
            ));
        }
        Ok(Self {
            map,
            start_us,
            duration_us,
            period_us,
        })
    }

    /// Source held on at all times.
    pub fn continuous(map: SourceMap) -> Self {
        Self {
            map,
            start_us: 0.0,
            duration_us: 1.0,
            period_us: 1.0,
        }
    }

    pub fn off(grid: &ThermalGrid) -> Self {
        Self {
            map: SourceMap::zeros(grid),
            start_us: 0.0,
            duration_us: 0.0,
            period_us: 1.0,
        }
    }

    pub fn is_on(&self, t_us: f64) -> bool {
        if t_us < self.start_us || self.duration_us <= 0.0 {
            return false;
        }
        if self.duration_us >= self.period_us {
            return true;
        }
        (t_us - self.start_us).rem_euclid(self.period_us) < self.duration_us
    }
}

/// One explicit update with an optional source map (W/m^2).
///
/// `dT = dt/(rho C) * (-sum_faces K (T - T_n)/w + Q/l - h (T - T_inf)/l)`.
pub fn step(grid: &mut ThermalGrid, dt: f64, source: Option<&SourceMap>) -> Result<()> {
    let limit = stability_limit(grid);
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge { dt, limit });
    }
    step_unchecked(grid, dt, source);
    Ok(())
}

fn step_unchecked(grid: &mut ThermalGrid, dt: f64, source: Option<&SourceMap>) {
    let nx = grid.nx();
    let old = &grid.temperature;
    let g = &*grid;
    let inv_l = 1.0 / g.thickness_m;
    let mut next = vec![0.0; old.len()];
    next.par_chunks_mut(nx).enumerate().for_each(|(iy, row)| {
        for (ix, out) in row.iter_mut().enumerate() {
            let k = g.index(ix, iy);
            let t = old[k];
            let mut div = 0.0;
            for dir in Direction::ALL {
                if let Some((jx, jy)) = g.neighbor(ix, iy, dir) {
                    div += g.conductance(ix, iy, dir) * (t - old[g.index(jx, jy)]) / g.width_along(ix, iy, dir);
                }
            }
            let q = source.map_or(0.0, |s| s.values[k]);
            let rate = -div + q * inv_l - g.h_convection * (t - g.t_inf_c) * inv_l;
            *out = t + dt / g.materials[k].heat_capacity() * rate;
        }
    });
    grid.temperature = next;
}

/// Temperature history of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTrace {
    pub ix: usize,
    pub iy: usize,
    pub t_us: Vec<f64>,
    pub t_c: Vec<f64>,
}

impl ProbeTrace {
    /// Linear interpolation, clamped to the ends.
    pub fn sample(&self, t_us: f64) -> f64 {
        let n = self.t_us.len();
        if n == 0 {
            return f64::NAN;
        }
        if t_us <= self.t_us[0] {
            return self.t_c[0];
        }
        if t_us >= self.t_us[n - 1] {
            return self.t_c[n - 1];
        }
        let j = self.t_us.partition_point(|&v| v <= t_us);
        let (t0, t1) = (self.t_us[j - 1], self.t_us[j]);
        let w = (t_us - t0) / (t1 - t0);
        self.t_c[j - 1] * (1.0 - w) + self.t_c[j] * w
    }

    /// 10%-90% rise time (us) of the response to a pulse on over `[t_on, t_off]`,
    /// relative to the level at `t_on` and the level at `t_off`.
    pub fn rise_time_us(&self, t_on_us: f64, t_off_us: f64) -> Option<f64> {
        let base = self.sample(t_on_us);
        let top = self.sample(t_off_us);
        let amp = top - base;
        if !(amp.abs() > 0.0) {
            return None;
        }
        let crossing = |frac: f64| -> Option<f64> {
            let level = base + frac * amp;
            let mut prev: Option<(f64, f64)> = None;
            for (&t, &v) in self.t_us.iter().zip(&self.t_c) {
                if t < t_on_us {
                    continue;
                }
                if t > t_off_us {
                    break;
                }
                if let Some((tp, vp)) = prev {
                    if (vp - level) * (v - level) <= 0.0 && v != vp {
                        return Some(tp + (level - vp) / (v - vp) * (t - tp));
                    }
                }
                prev = Some((t, v));
            }
            None
        };
        Some(crossing(0.9)? - crossing(0.1)?)
    }

    /// `t_us,T_C`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t_us,T_C\n");
        for (t, v) in self.t_us.iter().zip(&self.t_c) {
            let _ = writeln!(s, "{t},{v}");
        }
        s
    }
}

/// Fixed-step march to `t_end_us`, recording probes every `output_interval_us`.
///
/// The step is the largest value not above [`stability_limit`] that divides
/// the output interval evenly.
pub fn run(
    grid: &mut ThermalGrid,
    schedule: &SourceSchedule,
    t_end_us: f64,
    output_interval_us: f64,
    probes: &[(usize, usize)],
) -> Result<Vec<ProbeTrace>> {
    if schedule.map.values.len() != grid.len() || schedule.map.nx != grid.nx() {
        return Err(Error::ShapeMismatch("source map does not match grid".into()));
    }
    if !(t_end_us >= 0.0 && output_interval_us > 0.0) {
        return Err(Error::invalid(
            "t_end_us",
            "need t_end >= 0 and a positive output interval",
        ));
    }
    for &(ix, iy) in probes {
        if ix >= grid.nx() || iy >= grid.ny() {
            return Err(Error::invalid("probes", format!("cell ({ix}, {iy}) outside grid")));
        }
    }
    let limit = stability_limit(grid);
    let interval_s = output_interval_us * 1e-6;
    let substeps = ((interval_s / limit).ceil() as usize).max(1);
    let dt = interval_s / substeps as f64;
    let n_out = (t_end_us / output_interval_us).round() as usize;
    let mut traces: Vec<ProbeTrace> = probes
        .iter()
        .map(|&(ix, iy)| ProbeTrace {
            ix,
            iy,
            t_us: Vec::with_capacity(n_out + 1),
            t_c: Vec::with_capacity(n_out + 1),
        })
        .collect();
    let record = |grid: &ThermalGrid, traces: &mut [ProbeTrace], t: f64| {
        for tr in traces.iter_mut() {
            tr.t_us.push(t);
            tr.t_c.push(grid.temperature[grid.index(tr.ix, tr.iy)]);
        }
    };
    record(grid, &mut traces, 0.0);
    let dt_us = dt * 1e6;
    for out in 0..n_out {
        for sub in 0..substeps {
            let t = (out * substeps + sub) as f64 * dt_us;
            let src = schedule.is_on(t).then_some(&schedule.map);
            step_unchecked(grid, dt, src);
        }
        if grid.temperature.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("temperature", "non-finite value during march"));
        }
        record(grid, &mut traces, (out + 1) as f64 * output_interval_us);
    }
    Ok(traces)
}

/// Piecewise-uniform edges over `[lo, hi]`: spacing `fine` inside
/// `[fine_lo, fine_hi]`, at most `coarse` elsewhere.
pub fn refined_edges(lo: f64, hi: f64, fine_lo: f64, fine_hi: f64, fine: f64, coarse: f64) -> Result<Vec<f64>> {
    if !(lo < fine_lo && fine_lo < fine_hi && fine_hi < hi && fine > 0.0 && coarse >= fine) {
        return Err(Error::invalid(
            "edges",
            "need lo < fine_lo < fine_hi < hi and 0 < fine <= coarse",
        ));
    }
    let mut edges = vec![lo];
    let mut push_segment = |a: f64, b: f64, h: f64| {
        let n = ((b - a) / h - 1e-9).ceil().max(1.0) as usize;
        for i in 1..=n {
            edges.push(if i == n { b } else { a + (b - a) * i as f64 / n as f64 });
        }
    };
    push_segment(lo, fine_lo, coarse);
    push_segment(fine_lo, fine_hi, fine);
    push_segment(fine_hi, hi, coarse);
    Ok(edges)
}

/// Gold strip on air with a heated section, sized in micrometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripScenario {
    pub domain_x_um: f64,
    pub domain_y_um: f64,
    /// Strip runs along y, occupying `x` in `[strip_x0, strip_x1]`.
    pub strip_x0_um: f64,
    pub strip_x1_um: f64,
    /// Heated section of the strip along y.
    pub heat_y0_um: f64,
    pub heat_y1_um: f64,
    pub source_w_per_m2: f64,
    pub fine_um: f64,
    pub coarse_um: f64,
    pub thickness_m: f64,
    pub h_convection: f64,
    pub t_inf_c: f64,
}

impl StripScenario {
    pub fn build(&self) -> Result<(ThermalGrid, SourceMap)> {
        let um = 1e-6;
        let margin = 2.0 * self.fine_um;
        let xe = refined_edges(
            0.0,
            self.domain_x_um * um,
            (self.strip_x0_um - margin) * um,
            (self.strip_x1_um + margin) * um,
            self.fine_um * um,
            self.coarse_um * um,
        )?;
        let ye = refined_edges(
            0.0,
            self.domain_y_um * um,
            (self.heat_y0_um - margin) * um,
            (self.heat_y1_um + margin) * um,
            self.fine_um * um,
            self.coarse_um * um,
        )?;
        let mut grid = ThermalGrid::uniform_material(
            xe,
            ye,
            MaterialCell::AIR,
            self.thickness_m,
            self.h_convection,
            self.t_inf_c,
        )?;
        for iy in 0..grid.ny() {
            for ix in 0..grid.nx() {
                let (cx, _) = grid.center(ix, iy);
                if (self.strip_x0_um * um..=self.strip_x1_um * um).contains(&cx) {
                    grid.set_material(ix, iy, MaterialCell::GOLD)?;
                }
            }
        }
        let map = SourceMap::uniform_rect(
            &grid,
            self.strip_x0_um * um,
            self.strip_x1_um * um,
            self.heat_y0_um * um,
            self.heat_y1_um * um,
            self.source_w_per_m2,
        )?;
        Ok((grid, map))
    }

    /// Same geometry with every cell split in half along both axes.
    pub fn refined(&self) -> StripScenario {
        StripScenario {
            fine_um: 0.5 * self.fine_um,
            coarse_um: 0.5 * self.coarse_um,
            ..*self
        }
    }
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v}");
    }
    s
}

/// CSV matrix with a header: `nx,<n>`, `ny,<n>`, `x_edges,...`, `y_edges,...`,
/// then `ny` rows of `nx` values (row `iy` = fixed y).
pub fn field_to_csv(x_edges: &[f64], y_edges: &[f64], values: &[f64]) -> String {
    let nx = x_edges.len() - 1;
    let ny = y_edges.len() - 1;
    let mut s = format!(
        "nx,{nx}\nny,{ny}\nx_edges,{}\ny_edges,{}\n",
        join(x_edges),
        join(y_edges)
    );
    for row in values.chunks(nx) {
        s.push_str(&join(row));
        s.push('\n');
    }
    s
}

/// Writes a field; gzip-compressed when the path ends in `.gz`.
pub fn save_field(path: &Path, grid: &ThermalGrid, values: &[f64]) -> Result<()> {
    let text = field_to_csv(grid.x_edges(), grid.y_edges(), values);
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        // default gzip header has mtime 0, so output is reproducible
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        text.into_bytes()
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_source_map(path: &Path, grid: &ThermalGrid, map: &SourceMap) -> Result<()> {
    save_field(path, grid, &map.values)
}

/// Parsed field file.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    pub values: Vec<f64>,
}

pub fn read_field(path: &Path) -> Result<FieldFile> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = Vec::new();
    for l in BufReader::new(reader).lines() {
        lines.push(l.map_err(|e| Error::io(path, e))?);
    }
    let nums = |line: usize, text: &str| -> Result<Vec<f64>> {
        text.split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("bad number `{t}`: {e}")))
            })
            .collect()
    };
    let header = |idx: usize, key: &str| -> Result<&str> {
        let line = lines
            .get(idx)
            .ok_or_else(|| parse_err(idx + 1, format!("missing `{key}` header")))?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(','))
            .ok_or_else(|| parse_err(idx + 1, format!("expected `{key},...`")))
    };
    let nx: usize = header(0, "nx")?
        .trim()
        .parse()
        .map_err(|e| parse_err(1, format!("{e}")))?;
    let ny: usize = header(1, "ny")?
        .trim()
        .parse()
        .map_err(|e| parse_err(2, format!("{e}")))?;
    let x_edges = nums(3, header(2, "x_edges")?)?;
    let y_edges = nums(4, header(3, "y_edges")?)?;
    if x_edges.len() != nx + 1 || y_edges.len() != ny + 1 {
        return Err(parse_err(3, format!("edge counts do not match nx={nx}, ny={ny}")));
    }
    let rows: Vec<&String> = lines[4..].iter().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != ny {
        return Err(parse_err(5, format!("{} data rows, expected {ny}", rows.len())));
    }
    let mut values = Vec::with_capacity(nx * ny);
    for (i, row) in rows.iter().enumerate() {
        let v = nums(5 + i, row)?;
        if v.len() != nx {
            return Err(parse_err(5 + i, format!("{} values, expected {nx}", v.len())));
        }
        values.extend(v);
    }
    Ok(FieldFile {
        x_edges,
        y_edges,
        values,
    })
}

/// Loads a surface loss map for `grid`; shape and edges must match.
pub fn load_source_map(path: &Path, grid: &ThermalGrid) -> Result<SourceMap> {
    let f = read_field(path)?;
    if f.x_edges.len() != grid.x_edges().len() || f.y_edges.len() != grid.y_edges().len() {
        return Err(Error::ShapeMismatch(format!(
            "{}: map is {}x{}, grid is {}x{}",
            path.display(),
            f.x_edges.len() - 1,
            f.y_edges.len() - 1,
            grid.nx(),
            grid.ny()
        )));
    }
    let close = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .all(|(p, q)| (p - q).abs() <= 1e-9 * p.abs().max(q.abs()).max(1e-30))
    };
    if !close(&f.x_edges, grid.x_edges()) || !close(&f.y_edges, grid.y_edges()) {
        return Err(Error::ShapeMismatch(format!(
            "{}: cell edges differ from the grid",
            path.display()
        )));
    }
    SourceMap::from_values(grid, f.values)
}
