//! Synthetic pump-probe photon streams and their reduction to temperature.
//!
//! One cycle has six slots, one per six-point frequency `f_A..f_F` in that
//! order. Each slot is binned at `bin_ns`; the first `dead_ns` of every slot
//! is discarded. A heating pulse repeats every `heat_period_ns` starting
//! `heat_offset_ns` into the period, so with the default `heat_period = slot`
//! every slot sees the same transient. Delays are signed and measured from
//! the heat trigger: negative delays precede the pulse.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::DressedModel;
use crate::odmr_analysis::{dressed_pl_at, six_point_temperature, LorentzianFit, SixPointSet};
use crate::spin_model::{Detunings, FieldVector, NvParams};
use crate::thermal_sim::ProbeTrace;

pub const SLOTS: usize = 6;

/// Delays whose six-point denominator is below this many shot-noise
/// standard deviations are flagged unstable.
pub const DEFAULT_UNSTABLE_SIGMAS: f64 = 3.0;

/// Acquisition timing, all in integer nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub cycle_ns: u64,
    pub slot_ns: u64,
    pub bin_ns: u64,
    pub dead_ns: u64,
    pub heat_offset_ns: u64,
    pub heat_duration_ns: u64,
    pub heat_period_ns: u64,
    pub box_bins: usize,
    /// Rise time of the frequency-modulated source; metadata only.
    pub source_rise_ns: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            cycle_ns: 60_000,
            slot_ns: 10_000,
            bin_ns: 16,
            dead_ns: 4_000,
            heat_offset_ns: 6_000,
            heat_duration_ns: 3_000,
            heat_period_ns: 10_000,
            box_bins: 3,
            source_rise_ns: 3_500,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &'static str, reason: &str| Err(Error::invalid(name, reason));
        if self.bin_ns == 0 || self.slot_ns == 0 || self.heat_period_ns == 0 {
            return fail("timing", "bin, slot and heat period must be positive");
        }
        if self.cycle_ns != SLOTS as u64 * self.slot_ns {
            return fail("cycle_ns", "must equal 6 * slot_ns");
        }
        if self.dead_ns >= self.slot_ns {
            return fail("dead_ns", "must be shorter than the slot");
        }
        if !self.slot_ns.is_multiple_of(self.bin_ns) {
            return fail("bin_ns", "must divide the slot length");
        }
        if !self.dead_ns.is_multiple_of(self.bin_ns) {
            return fail("dead_ns", "must be a whole number of bins");
        }
        if self.heat_duration_ns > self.heat_period_ns {
            return fail("heat_duration_ns", "must not exceed heat_period_ns");
        }
        if !self.slot_ns.is_multiple_of(self.heat_period_ns) {
            return fail("heat_period_ns", "must divide the slot length");
        }
        if !self.heat_period_ns.is_multiple_of(self.bin_ns) || !self.heat_offset_ns.is_multiple_of(self.bin_ns) {
            return fail("heat_period_ns", "heat period and offset must be whole numbers of bins");
        }
        if self.heat_offset_ns >= self.heat_period_ns {
            return fail("heat_offset_ns", "must be shorter than heat_period_ns");
        }
        if self.box_bins == 0 {
            return fail("box_bins", "must be at least 1");
        }
        Ok(())
    }

    pub fn bins_per_slot(&self) -> usize {
        (self.slot_ns / self.bin_ns) as usize
    }

    pub fn dead_bins(&self) -> usize {
        (self.dead_ns / self.bin_ns) as usize
    }

    /// Time resolution of the converted trace (ns).
    pub fn resolution_ns(&self) -> u64 {
        self.box_bins as u64 * self.bin_ns
    }

    /// Signed delay from the heat trigger of a bin starting at `t_slot_ns`.
    pub fn delay_ns(&self, t_slot_ns: u64) -> i64 {
        (t_slot_ns % self.heat_period_ns) as i64 - self.heat_offset_ns as i64
    }

    /// Photon-collection time behind one converted point for `n` accumulations:
    /// one box on each of the six frequencies (s).
    pub fn point_integration_s(&self, n: u64) -> f64 {
        n as f64 * self.resolution_ns() as f64 * 1e-9 * SLOTS as f64
    }
}

/// Temperature change against delay from the heat trigger.
#[derive(Debug, Clone, PartialEq)]
pub enum TemperatureProfile {
    /// First-order rise during the pulse and decay after it; `tau_ns = 0`
    /// is an ideal step.
    Step {
        amplitude_k: f64,
        tau_ns: f64,
        duration_ns: f64,
    },
    /// Sampled `(delay_ns, dT)`, linearly interpolated, periodic in `period_ns`.
    Sampled {
        delay_ns: Vec<f64>,
        dt_k: Vec<f64>,
        period_ns: f64,
    },
}

impl TemperatureProfile {
    /// Heating pulse of `amplitude_k` matching `timing`.
    pub fn step(amplitude_k: f64, tau_ns: f64, timing: &TimingConfig) -> Self {
        TemperatureProfile::Step {
            amplitude_k,
            tau_ns,
            duration_ns: timing.heat_duration_ns as f64,
        }
    }

    /// Temperature rise of a thermal probe relative to its value at the
    /// pulse start `t_on_us`; one period of the trace is used.
    pub fn from_probe(trace: &ProbeTrace, t_on_us: f64, period_ns: f64) -> Result<Self> {
        if trace.t_us.len() < 2 {
            return Err(Error::invalid("trace", "needs at least two samples"));
        }
        let base = trace.sample(t_on_us);
        let mut delay_ns = Vec::new();
        let mut dt_k = Vec::new();
        for (&t, &v) in trace.t_us.iter().zip(&trace.t_c) {
            let d = (t - t_on_us) * 1e3;
            if (0.0..period_ns).contains(&d) {
                delay_ns.push(d);
                dt_k.push(v - base);
            }
        }
        if delay_ns.len() < 2 {
            return Err(Error::invalid("trace", "does not cover the heating period"));
        }
        Ok(TemperatureProfile::Sampled {
            delay_ns,
            dt_k,
            period_ns,
        })
    }

    pub fn eval(&self, delay_ns: f64) -> f64 {
        match self {
            TemperatureProfile::Step {
                amplitude_k,
                tau_ns,
                duration_ns,
            } => {
                if delay_ns < 0.0 {
                    return 0.0;
                }
                let rise = |t: f64| if *tau_ns > 0.0 { 1.0 - (-t / tau_ns).exp() } else { 1.0 };
                if delay_ns < *duration_ns {
                    amplitude_k * rise(delay_ns)
                } else if *tau_ns > 0.0 {
                    amplitude_k * rise(*duration_ns) * (-(delay_ns - duration_ns) / tau_ns).exp()
                } else {
                    0.0
                }
            }
            TemperatureProfile::Sampled {
                delay_ns: d,
                dt_k,
                period_ns,
            } => {
                let x = delay_ns.rem_euclid(*period_ns);
                let n = d.len();
                if x <= d[0] {
                    return dt_k[0];
                }
                if x >= d[n - 1] {
                    return dt_k[n - 1];
                }
                let j = d.partition_point(|&v| v <= x);
                let w = (x - d[j - 1]) / (d[j] - d[j - 1]);
                dt_k[j - 1] * (1.0 - w) + dt_k[j] * w
            }
        }
    }
}

/// Photoluminescence rate (counts/s) at probe frequency `f` for a temperature change.
pub trait PlResponse: Sync {
    fn rate(&self, f_mhz: f64, delta_t_k: f64) -> Result<f64>;
}

/// Fitted Lorentzian dip whose center moves by `dD/dT * dT`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianResponse {
    pub fit: LorentzianFit,
    pub dd_dt_mhz_per_k: f64,
}

impl PlResponse for LorentzianResponse {
    fn rate(&self, f_mhz: f64, delta_t_k: f64) -> Result<f64> {
        Ok(self.fit.shifted(self.dd_dt_mhz_per_k * delta_t_k).eval(f_mhz))
    }
}

/// Steady-state Lindblad response with a static field change applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LindbladResponse {
    pub model: DressedModel,
    pub nv: NvParams,
    pub field: FieldVector,
    /// Static environmental change (field detuning etc.) at zero heating.
    pub env: Detunings,
}

impl PlResponse for LindbladResponse {
    fn rate(&self, f_mhz: f64, delta_t_k: f64) -> Result<f64> {
        let det = Detunings {
            dd_mhz: self.env.dd_mhz + self.nv.dd_dt_mhz_per_k * delta_t_k,
            ..self.env
        };
        dressed_pl_at(&self.model, &det.resolve(&self.nv, &self.field), f_mhz)
    }
}

/// Binned counts. Each record holds six slots of `bins_per_slot` bins and
/// represents the sum over its share of the `n` accumulated cycles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagStream {
    pub timing: TimingConfig,
    /// Total number of accumulated cycles.
    pub n: u64,
    pub seed: Option<u64>,
    /// Index within the slot of the first stored bin.
    pub first_bin: usize,
    pub bins_per_slot: usize,
    /// `records[r][slot][bin]`.
    pub records: Vec<Vec<Vec<u64>>>,
}

impl TagStream {
    pub fn zeros(timing: TimingConfig, n: u64, records: usize) -> Self {
        let b = timing.bins_per_slot();
        Self {
            timing,
            n,
            seed: None,
            first_bin: 0,
            bins_per_slot: b,
            records: vec![vec![vec![0; b]; SLOTS]; records],
        }
    }

    fn check_shape(&self) -> Result<()> {
        for (r, rec) in self.records.iter().enumerate() {
            if rec.len() != SLOTS || rec.iter().any(|s| s.len() != self.bins_per_slot) {
                return Err(Error::ShapeMismatch(format!(
                    "record {r} is not {SLOTS} x {} bins",
                    self.bins_per_slot
                )));
            }
        }
        if self.first_bin + self.bins_per_slot > self.timing.bins_per_slot() {
            return Err(Error::ShapeMismatch("stored bins exceed the slot".into()));
        }
        Ok(())
    }

    /// Records appended after `self`'s; configurations must match.
    pub fn concat(&self, other: &TagStream) -> Result<TagStream> {
        if self.timing != other.timing || self.first_bin != other.first_bin || self.bins_per_slot != other.bins_per_slot
        {
            return Err(Error::ShapeMismatch("streams have different layouts".into()));
        }
        let mut out = self.clone();
        out.n += other.n;
        out.seed = None;
        out.records.extend(other.records.iter().cloned());
        Ok(out)
    }

    /// Text format, see the README for the byte-level layout.
    pub fn to_text(&self) -> String {
        let t = &self.timing;
        let mut s = String::from("# dressed-thermo tagstream v1\n");
        let _ = writeln!(s, "cycle_ns {}", t.cycle_ns);
        let _ = writeln!(s, "slot_ns {}", t.slot_ns);
        let _ = writeln!(s, "bin_ns {}", t.bin_ns);
        let _ = writeln!(s, "dead_ns {}", t.dead_ns);
        let _ = writeln!(s, "heat_offset_ns {}", t.heat_offset_ns);
        let _ = writeln!(s, "heat_duration_ns {}", t.heat_duration_ns);
        let _ = writeln!(s, "heat_period_ns {}", t.heat_period_ns);
        let _ = writeln!(s, "box_bins {}", t.box_bins);
        let _ = writeln!(s, "source_rise_ns {}", t.source_rise_ns);
        let _ = writeln!(s, "n {}", self.n);
        match self.seed {
            Some(v) => {
                let _ = writeln!(s, "seed {v}");
            }
            None => s.push_str("seed none\n"),
        }
        let _ = writeln!(s, "records {}", self.records.len());
        let _ = writeln!(s, "first_bin {}", self.first_bin);
        let _ = writeln!(s, "bins_per_slot {}", self.bins_per_slot);
        for rec in &self.records {
            for slot in rec {
                let mut first = true;
                for c in slot {
                    if !first {
                        s.push(' ');
                    }
                    first = false;
                    let _ = write!(s, "{c}");
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<TagStream> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|(line, reason)| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        })
    }

    pub fn parse(text: &str) -> std::result::Result<TagStream, (usize, String)> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, l)) if l.trim() == "# dressed-thermo tagstream v1" => {}
            other => return Err((other.map_or(1, |(i, _)| i + 1), "missing tagstream header".into())),
        }
        let mut next_kv = |key: &str| -> std::result::Result<(usize, String), (usize, String)> {
            let (i, l) = lines.next().ok_or((0, format!("missing `{key}`")))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(key) {
                return Err((i + 1, format!("expected `{key}`")));
            }
            let v = it.next().ok_or((i + 1, format!("`{key}` has no value")))?;
            Ok((i + 1, v.to_string()))
        };
        fn num<T: std::str::FromStr>(kv: (usize, String)) -> std::result::Result<T, (usize, String)> {
            kv.1.parse().map_err(|_| (kv.0, format!("bad value `{}`", kv.1)))
        }
        let timing = TimingConfig {
            cycle_ns: num(next_kv("cycle_ns")?)?,
            slot_ns: num(next_kv("slot_ns")?)?,
            bin_ns: num(next_kv("bin_ns")?)?,
            dead_ns: num(next_kv("dead_ns")?)?,
            heat_offset_ns: num(next_kv("heat_offset_ns")?)?,
            heat_duration_ns: num(next_kv("heat_duration_ns")?)?,
            heat_period_ns: num(next_kv("heat_period_ns")?)?,
            box_bins: num(next_kv("box_bins")?)?,
            source_rise_ns: num(next_kv("source_rise_ns")?)?,
        };
        timing.validate().map_err(|e| (1, e.to_string()))?;
        let n = num(next_kv("n")?)?;
        let seed_kv = next_kv("seed")?;
        let seed = if seed_kv.1 == "none" { None } else { Some(num(seed_kv)?) };
        let n_records: usize = num(next_kv("records")?)?;
        let first_bin: usize = num(next_kv("first_bin")?)?;
        let bins_per_slot: usize = num(next_kv("bins_per_slot")?)?;
        let mut records = Vec::with_capacity(n_records);
        for _ in 0..n_records {
            let mut rec = Vec::with_capacity(SLOTS);
            for _ in 0..SLOTS {
                let (i, l) = lines.next().ok_or((0, "missing count rows".to_string()))?;
                let row = l
                    .split_whitespace()
                    .map(|v| v.parse::<u64>().map_err(|_| (i + 1, format!("bad count `{v}`"))))
                    .collect::<std::result::Result<Vec<u64>, _>>()?;
                if row.len() != bins_per_slot {
                    return Err((i + 1, format!("{} counts, expected {bins_per_slot}", row.len())));
                }
                rec.push(row);
            }
            records.push(rec);
        }
        if let Some((i, _)) = lines.next() {
            return Err((i + 1, "trailing data".into()));
        }
        let s = TagStream {
            timing,
            n,
            seed,
            first_bin,
            bins_per_slot,
            records,
        };
        s.check_shape().map_err(|e| (0, e.to_string()))?;
        Ok(s)
    }
}

/// How counts are drawn from the expected means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// Seeded Poisson draws; stream `r` of the ChaCha generator feeds record `r`.
    Poisson { seed: u64 },
    /// Expected counts rounded to the nearest integer.
    None,
}

/// Expected counts per accumulated cycle, `[slot][bin]`.
pub fn expected_rates(
    profile: &TemperatureProfile,
    response: &dyn PlResponse,
    six: &SixPointSet,
    timing: &TimingConfig,
) -> Result<Vec<Vec<f64>>> {
    timing.validate()?;
    let bins = timing.bins_per_slot();
    let bin_s = timing.bin_ns as f64 * 1e-9;
    (0..SLOTS)
        .map(|slot| {
            (0..bins)
                .into_par_iter()
                .map(|b| {
                    let t = b as u64 * timing.bin_ns;
                    let delay = timing.delay_ns(t) as f64 + 0.5 * timing.bin_ns as f64;
                    let r = response.rate(six.freqs[slot], profile.eval(delay))?;
                    Ok(r * bin_s)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect()
}

/// Synthesizes `records` records whose counts sum `n` accumulated cycles.
pub fn synthesize_stream(
    profile: &TemperatureProfile,
    response: &dyn PlResponse,
    six: &SixPointSet,
    timing: &TimingConfig,
    n: u64,
    records: usize,
    noise: Noise,
) -> Result<TagStream> {
    if n == 0 || records == 0 || records as u64 > n {
        return Err(Error::invalid("n", "need n >= records >= 1"));
    }
    let per_bin = expected_rates(profile, response, six, timing)?;
    let base = n / records as u64;
    let extra = (n % records as u64) as usize;
    let recs = (0..records)
        .into_par_iter()
        .map(|r| {
            let n_r = (base + u64::from(r < extra)) as f64;
            let mut rng = match noise {
                Noise::Poisson { seed } => {
                    let mut g = ChaCha8Rng::seed_from_u64(seed);
                    g.set_stream(r as u64);
                    Some(g)
                }
                Noise::None => None,
            };
            per_bin
                .iter()
                .map(|slot| {
                    slot.iter()
                        .map(|&m| {
                            let mean = m * n_r;
                            match rng.as_mut() {
                                Some(g) if mean > 0.0 => {
                                    let d = Poisson::new(mean).map_err(|e| Error::invalid("mean", e.to_string()))?;
                                    Ok(d.sample(g) as u64)
                                }
                                _ => Ok(mean.round() as u64),
                            }
                        })
                        .collect::<Result<Vec<u64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TagStream {
        timing: *timing,
        n,
        seed: match noise {
            Noise::Poisson { seed } => Some(seed),
            Noise::None => None,
        },
        first_bin: 0,
        bins_per_slot: timing.bins_per_slot(),
        records: recs,
    })
}

/// Drops the bins inside the dead window at the start of every slot.
pub fn remove_dead_time(raw: &TagStream, timing: &TimingConfig) -> Result<TagStream> {
    timing.validate()?;
    raw.check_shape()?;
    if raw.first_bin != 0 || raw.bins_per_slot != timing.bins_per_slot() || raw.timing != *timing {
        return Err(Error::ShapeMismatch(format!(
            "expected a raw stream of {} bins per slot",
            timing.bins_per_slot()
        )));
    }
    let dead = timing.dead_bins();
    let mut out = raw.clone();
    out.first_bin = dead;
    out.bins_per_slot = raw.bins_per_slot - dead;
    for rec in &mut out.records {
        for slot in rec.iter_mut() {
            slot.drain(..dead);
        }
    }
    Ok(out)
}

/// Per-delay sums for each of the six channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackedCounts {
    /// Ascending signed delays from the heat trigger (ns).
    pub delays_ns: Vec<i64>,
    /// `counts[channel][k]` summed over records and over bins sharing delay `k`.
    pub counts: [Vec<u64>; SLOTS],
    /// Number of stored bins merged into each delay (same for every channel).
    pub multiplicity: Vec<u64>,
    pub n: u64,
}

impl StackedCounts {
    pub fn len(&self) -> usize {
        self.delays_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays_ns.is_empty()
    }

    /// Element-wise sum; delays must match.
    pub fn add(&self, other: &StackedCounts) -> Result<StackedCounts> {
        if self.delays_ns != other.delays_ns {
            return Err(Error::ShapeMismatch("different delay axes".into()));
        }
        let mut out = self.clone();
        for c in 0..SLOTS {
            for (a, b) in out.counts[c].iter_mut().zip(&other.counts[c]) {
                *a += b;
            }
        }
        for (a, b) in out.multiplicity.iter_mut().zip(&other.multiplicity) {
            *a += b;
        }
        out.n += other.n;
        Ok(out)
    }
}

/// Groups counts by delay from the heat trigger and sums over records.
pub fn stack_by_delay(clean: &TagStream, timing: &TimingConfig) -> Result<StackedCounts> {
    timing.validate()?;
    clean.check_shape()?;
    if clean.first_bin != timing.dead_bins() {
        return Err(Error::ShapeMismatch(format!(
            "stream starts at bin {}, expected {} after dead-time removal",
            clean.first_bin,
            timing.dead_bins()
        )));
    }
    let mut index: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for j in 0..clean.bins_per_slot {
        let t = (clean.first_bin + j) as u64 * timing.bin_ns;
        index.entry(timing.delay_ns(t)).or_default().push(j);
    }
    let delays_ns: Vec<i64> = index.keys().copied().collect();
    let mut counts: [Vec<u64>; SLOTS] = Default::default();
    for (c, out) in counts.iter_mut().enumerate() {
        *out = index
            .values()
            .map(|bins| {
                clean
                    .records
                    .iter()
                    .map(|rec| bins.iter().map(|&j| rec[c][j]).sum::<u64>())
                    .sum()
            })
            .collect();
    }
    let multiplicity = index
        .values()
        .map(|bins| (bins.len() * clean.records.len()) as u64)
        .collect();
    Ok(StackedCounts {
        delays_ns,
        counts,
        multiplicity,
        n: clean.n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureTrace {
    /// Start delay of each box (ns).
    pub delay_ns: Vec<i64>,
    /// `NaN` where the point is flagged.
    pub dt_k: Vec<f64>,
    pub unstable: Vec<bool>,
    pub resolution_ns: u64,
}

impl TemperatureTrace {
    pub fn flag_rate(&self) -> f64 {
        if self.unstable.is_empty() {
            return 0.0;
        }
        self.unstable.iter().filter(|&&u| u).count() as f64 / self.unstable.len() as f64
    }

    /// Stable values whose whole box lies in `[start, end)`.
    pub fn window(&self, start_ns: i64, end_ns: i64) -> Vec<f64> {
        let w = self.resolution_ns as i64;
        self.delay_ns
            .iter()
            .zip(&self.dt_k)
            .zip(&self.unstable)
            .filter(|((&d, _), &u)| d >= start_ns && d.saturating_add(w) <= end_ns && !u)
            .map(|((_, &v), _)| v)
            .collect()
    }

    /// `delay_ns,dT_K,flag` with `flag` in `{ok, unstable}`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delay_ns,dT_K,flag\n");
        for ((d, v), u) in self.delay_ns.iter().zip(&self.dt_k).zip(&self.unstable) {
            let flag = if *u { "unstable" } else { "ok" };
            let _ = writeln!(s, "{d},{v},{flag}");
        }
        s
    }
}

/// Box-averages each channel over `timing.box_bins` delays and applies the
/// six-point conversion. A single dip has a positive slope denominator
/// `(pA - pC) - (pD - pF)`; boxes where it is below `unstable_sigmas`
/// shot-noise deviations (including any negative value, which means the
/// flanks have inverted) are flagged.
pub fn to_temperature(
    st: &StackedCounts,
    six: &SixPointSet,
    dd_dt_mhz_per_k: f64,
    timing: &TimingConfig,
    unstable_sigmas: f64,
) -> Result<TemperatureTrace> {
    timing.validate()?;
    let w = timing.box_bins;
    let n_boxes = st.len() / w;
    if n_boxes == 0 {
        return Err(Error::EmptyWindow(format!("{} delays, box of {w}", st.len())));
    }
    let rows: Vec<(i64, f64, bool)> = (0..n_boxes)
        .into_par_iter()
        .map(|b| {
            let range = b * w..(b + 1) * w;
            let mult: u64 = st.multiplicity[range.clone()].iter().sum();
            let sums: [f64; SLOTS] = std::array::from_fn(|c| st.counts[c][range.clone()].iter().sum::<u64>() as f64);
            let den = (sums[0] - sums[2]) - (sums[3] - sums[5]);
            let sigma = (sums[0] + sums[2] + sums[3] + sums[5]).sqrt();
            let delay = st.delays_ns[b * w];
            if den <= unstable_sigmas * sigma || mult == 0 {
                return Ok((delay, f64::NAN, true));
            }
            let means = sums.map(|s| s / mult as f64);
            match six_point_temperature(&means, six.d_omega, dd_dt_mhz_per_k) {
                Ok(v) => Ok((delay, v, false)),
                Err(Error::UnstableDenominator { .. }) => Ok((delay, f64::NAN, true)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TemperatureTrace {
        delay_ns: rows.iter().map(|r| r.0).collect(),
        dt_k: rows.iter().map(|r| r.1).collect(),
        unstable: rows.iter().map(|r| r.2).collect(),
        resolution_ns: timing.resolution_ns(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    /// RMS fluctuation of the baseline window (K).
    pub rms_k: f64,
    pub baseline_k: f64,
    /// Mean of the signal window minus the baseline mean (K).
    pub amplitude_k: f64,
    pub snr: f64,
    /// `rms * sqrt(integration time per point)` (K/sqrt(Hz)).
    pub sensitivity_k_per_sqrt_hz: f64,
    pub integration_s: f64,
    pub flag_rate: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Statistics from a baseline window and a signal window, delays in ns.
pub fn pipeline_stats(
    trace: &TemperatureTrace,
    baseline_window_ns: (i64, i64),
    signal_window_ns: (i64, i64),
    integration_s: f64,
) -> Result<PipelineStats> {
    let pre = trace.window(baseline_window_ns.0, baseline_window_ns.1);
    if pre.is_empty() {
        return Err(Error::EmptyWindow(format!(
            "no stable points in baseline window [{}, {}) ns",
            baseline_window_ns.0, baseline_window_ns.1
        )));
    }
    let sig = trace.window(signal_window_ns.0, signal_window_ns.1);
    if sig.is_empty() {
        return Err(Error::EmptyWindow(format!(
            "no stable points in signal window [{}, {}) ns",
            signal_window_ns.0, signal_window_ns.1
        )));
    }
    let (baseline, rms) = mean_std(&pre);
    let amplitude = mean_std(&sig).0 - baseline;
    Ok(PipelineStats {
        rms_k: rms,
        baseline_k: baseline,
        amplitude_k: amplitude,
        snr: if rms > 0.0 { amplitude / rms } else { f64::INFINITY },
        sensitivity_k_per_sqrt_hz: rms * integration_s.sqrt(),
        integration_s,
        flag_rate: trace.flag_rate(),
    })
}

/// Default windows for [`pipeline_stats`]: everything before the trigger,
/// and the last third of the heating pulse.
pub fn default_windows(timing: &TimingConfig) -> ((i64, i64), (i64, i64)) {
    let dur = timing.heat_duration_ns as i64;
    ((i64::MIN, 0), (dur - dur / 3, dur))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odmr_analysis::six_point_frequencies;

    fn fit(c0: f64) -> LorentzianFit {
        LorentzianFit {
            f_avg: 2870.0,
            gamma: 11.5,
            c0,
            baseline: 3e6,
            residual_rms: 0.0,
            iterations: 0,
        }
    }

    fn six() -> SixPointSet {
        six_point_frequencies(2870.0, 11.5, 1.0).unwrap()
    }

    fn response(c0: f64) -> LorentzianResponse {
        LorentzianResponse {
            fit: fit(c0),
            dd_dt_mhz_per_k: -0.074,
        }
    }

    #[test]
    fn default_timing_is_valid() {
        let t = TimingConfig::default();
        t.validate().unwrap();
        assert_eq!(t.bins_per_slot(), 625);
        assert_eq!(t.dead_bins(), 250);
        assert_eq!(t.resolution_ns(), 48);
        assert!((t.point_integration_s(150_000_000) - 43.2).abs() < 1e-9);
    }

    #[test]
    fn timing_validation() {
        let bad = [
            TimingConfig {
                cycle_ns: 50_000,
                ..Default::default()
            },
            TimingConfig {
                dead_ns: 10_000,
                ..Default::default()
            },
            TimingConfig {
                bin_ns: 17,
                ..Default::default()
            },
            TimingConfig {
                heat_duration_ns: 11_000,
                ..Default::default()
            },
            TimingConfig {
                heat_period_ns: 3_000,
                ..Default::default()
            },
            TimingConfig {
                box_bins: 0,
                ..Default::default()
            },
        ];
        for t in bad {
            assert!(t.validate().is_err(), "{t:?}");
        }
    }

    #[test]
    fn flat_response_gives_identical_means() {
        let t = TimingConfig::default();
        let p = TemperatureProfile::step(0.0, 0.0, &t);
        let rates = expected_rates(&p, &response(0.0), &six(), &t).unwrap();
        let first = rates[0][0];
        assert!(rates.iter().flatten().all(|&r| r == first));
    }

    #[test]
    fn seeded_streams_repeat() {
        let t = TimingConfig::default();
        let p = TemperatureProfile::step(5.0, 100.0, &t);
        let a = synthesize_stream(&p, &response(0.03), &six(), &t, 1000, 4, Noise::Poisson { seed: 9 }).unwrap();
        let b = synthesize_stream(&p, &response(0.03), &six(), &t, 1000, 4, Noise::Poisson { seed: 9 }).unwrap();
        let c = synthesize_stream(&p, &response(0.03), &six(), &t, 1000, 4, Noise::Poisson { seed: 10 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dead_time_removal_shapes() {
        let t = TimingConfig::default();
        let raw = TagStream::zeros(t, 1, 2);
        let clean = remove_dead_time(&raw, &t).unwrap();
        assert_eq!(clean.bins_per_slot, 375);
        assert_eq!(clean.first_bin, 250);
        assert!(clean.records.iter().flatten().flatten().all(|&c| c == 0));
        let t0 = TimingConfig { dead_ns: 0, ..t };
        let raw0 = TagStream::zeros(t0, 1, 1);
        assert_eq!(remove_dead_time(&raw0, &t0).unwrap(), raw0);
        assert!(remove_dead_time(&clean, &t).is_err());
    }

    #[test]
    fn dead_bins_are_the_leading_ones() {
        let t = TimingConfig::default();
        let mut raw = TagStream::zeros(t, 1, 1);
        for slot in raw.records[0].iter_mut() {
            for (b, c) in slot.iter_mut().enumerate() {
                *c = b as u64;
            }
        }
        let clean = remove_dead_time(&raw, &t).unwrap();
        assert_eq!(clean.records[0][3][0], 250);
        assert_eq!(*clean.records[0][3].last().unwrap(), 624);
    }

    #[test]
    fn single_record_stack_is_regrouping() {
        let t = TimingConfig::default();
        let mut raw = TagStream::zeros(t, 1, 1);
        for (s, slot) in raw.records[0].iter_mut().enumerate() {
            for (b, c) in slot.iter_mut().enumerate() {
                *c = (s * 1000 + b) as u64;
            }
        }
        let st = stack_by_delay(&remove_dead_time(&raw, &t).unwrap(), &t).unwrap();
        assert_eq!(st.len(), 375);
        assert_eq!(st.delays_ns[0], 4000 - 6000);
        assert!(st.multiplicity.iter().all(|&m| m == 1));
        for k in 0..st.len() {
            let bin = ((st.delays_ns[k] + 6000) / 16) as u64;
            for c in 0..SLOTS {
                assert_eq!(st.counts[c][k], c as u64 * 1000 + bin);
            }
        }
    }

    #[test]
    fn stacking_is_linear() {
        let t = TimingConfig::default();
        let p = TemperatureProfile::step(3.0, 50.0, &t);
        let a = synthesize_stream(&p, &response(0.05), &six(), &t, 500, 2, Noise::Poisson { seed: 1 }).unwrap();
        let b = synthesize_stream(&p, &response(0.05), &six(), &t, 300, 3, Noise::Poisson { seed: 2 }).unwrap();
        let sa = stack_by_delay(&remove_dead_time(&a, &t).unwrap(), &t).unwrap();
        let sb = stack_by_delay(&remove_dead_time(&b, &t).unwrap(), &t).unwrap();
        let sab = stack_by_delay(&remove_dead_time(&a.concat(&b).unwrap(), &t).unwrap(), &t).unwrap();
        assert_eq!(sa.add(&sb).unwrap(), sab);
        let doubled = a.concat(&a).unwrap();
        let sd = stack_by_delay(&remove_dead_time(&doubled, &t).unwrap(), &t).unwrap();
        for c in 0..SLOTS {
            assert!(sd.counts[c].iter().zip(&sa.counts[c]).all(|(x, y)| *x == 2 * y));
        }
    }

    #[test]
    fn short_heat_period_folds_delays() {
        let t = TimingConfig {
            heat_period_ns: 2_000,
            heat_offset_ns: 496,
            heat_duration_ns: 1_000,
            ..Default::default()
        };
        t.validate().unwrap();
        let raw = TagStream::zeros(t, 1, 1);
        let st = stack_by_delay(&remove_dead_time(&raw, &t).unwrap(), &t).unwrap();
        // 375 kept bins fold three times onto a 125-bin period
        assert_eq!(st.len(), 125);
        assert!(st.multiplicity.iter().all(|&m| m == 3));
        assert!(TimingConfig {
            heat_period_ns: 5_000,
            ..t
        }
        .validate()
        .is_err());
    }

    #[test]
    fn stacked_means_follow_step_response() {
        let t = TimingConfig::default();
        let p = TemperatureProfile::step(4.0, 0.0, &t);
        let r = response(0.05);
        let s = six();
        let n = 1_000_000;
        let raw = synthesize_stream(&p, &r, &s, &t, n, 1, Noise::None).unwrap();
        let st = stack_by_delay(&remove_dead_time(&raw, &t).unwrap(), &t).unwrap();
        for (k, &d) in st.delays_ns.iter().enumerate() {
            // rates are taken at bin centers
            let dt = if (0..3000).contains(&(d + 8)) { 4.0 } else { 0.0 };
            for c in 0..SLOTS {
                let expected = r.rate(s.freqs[c], dt).unwrap() * 16e-9 * n as f64;
                assert!((st.counts[c][k] as f64 - expected).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn constant_channels_give_zero() {
        let t = TimingConfig::default();
        let st = StackedCounts {
            delays_ns: (0..9).collect(),
            counts: std::array::from_fn(|c| vec![[10, 7, 4, 3, 7, 11][c] * 1000; 9]),
            multiplicity: vec![1; 9],
            n: 1,
        };
        let tr = to_temperature(&st, &six(), -0.074, &t, 3.0).unwrap();
        assert_eq!(tr.dt_k, vec![0.0; 3]);
        assert_eq!(tr.resolution_ns, 48);
    }

    #[test]
    fn noiseless_round_trip_recovers_step() {
        let t = TimingConfig::default();
        let p = TemperatureProfile::step(5.0, 0.0, &t);
        let s = six();
        let raw = synthesize_stream(&p, &response(0.03), &s, &t, 150_000_000, 1, Noise::None).unwrap();
        let st = stack_by_delay(&remove_dead_time(&raw, &t).unwrap(), &t).unwrap();
        let tr = to_temperature(&st, &s, -0.074, &t, 3.0).unwrap();
        let (pre, sig) = default_windows(&t);
        let stats = pipeline_stats(&tr, pre, sig, t.point_integration_s(150_000_000)).unwrap();
        assert!((stats.amplitude_k - 5.0).abs() / 5.0 < 0.05, "{stats:?}");
        assert!(stats.baseline_k.abs() < 1e-3);
    }

    #[test]
    fn unstable_points_flagged() {
        let t = TimingConfig::default();
        let st = StackedCounts {
            delays_ns: (0..3).collect(),
            counts: std::array::from_fn(|c| vec![[100, 90, 100, 100, 95, 100][c]; 3]),
            multiplicity: vec![1; 3],
            n: 1,
        };
        let tr = to_temperature(&st, &six(), -0.074, &t, 3.0).unwrap();
        assert!(tr.unstable[0] && tr.dt_k[0].is_nan());
        assert_eq!(tr.flag_rate(), 1.0);
        assert!(tr.to_csv().contains("0,NaN,unstable"));
    }

    #[test]
    fn stats_identities() {
        let tr = TemperatureTrace {
            delay_ns: vec![-96, -48, 0, 48],
            dt_k: vec![1.0, 1.0, 3.0, 3.0],
            unstable: vec![false; 4],
            resolution_ns: 48,
        };
        let s = pipeline_stats(&tr, (i64::MIN, 0), (0, 100), 43.0).unwrap();
        assert_eq!(s.rms_k, 0.0);
        assert_eq!(s.amplitude_k, 2.0);
        assert!(pipeline_stats(&tr, (1000, 2000), (0, 100), 43.0).is_err());
        let noisy = TemperatureTrace {
            delay_ns: vec![-96, -48, 0],
            dt_k: vec![0.6, -0.6, 5.0],
            unstable: vec![false; 3],
            resolution_ns: 48,
        };
        let s = pipeline_stats(&noisy, (i64::MIN, 0), (0, 100), 43.0).unwrap();
        assert!((s.sensitivity_k_per_sqrt_hz - 0.6 * 43f64.sqrt()).abs() < 1e-12);
        assert!((s.sensitivity_k_per_sqrt_hz - 3.93).abs() < 0.005);
        assert!((s.snr - 5.0 / 0.6).abs() < 1e-12);
        assert!((s.snr - 8.3).abs() < 0.05);
    }

    #[test]
    fn text_round_trip() {
        let t = TimingConfig::default();
        let p = TemperatureProfile::step(2.0, 10.0, &t);
        let a = synthesize_stream(&p, &response(0.05), &six(), &t, 77, 2, Noise::Poisson { seed: 4 }).unwrap();
        let back = TagStream::parse(&a.to_text()).unwrap();
        assert_eq!(a, back);
        let clean = remove_dead_time(&a, &t).unwrap();
        assert_eq!(TagStream::parse(&clean.to_text()).unwrap(), clean);
        assert!(TagStream::parse("garbage").is_err());
        let broken = a.to_text().replacen("bins_per_slot 625", "bins_per_slot 624", 1);
        assert!(TagStream::parse(&broken).is_err());
    }

    #[test]
    fn profile_from_probe_trace() {
        let tr = ProbeTrace {
            ix: 0,
            iy: 0,
            t_us: (0..=200).map(|i| i as f64 * 0.1).collect(),
            t_c: (0..=200)
                .map(|i| 26.0 + if (11..40).contains(&i) { 5.0 } else { 0.0 })
                .collect(),
        };
        let p = TemperatureProfile::from_probe(&tr, 1.0, 10_000.0).unwrap();
        assert_eq!(p.eval(500.0), 5.0);
        assert_eq!(p.eval(5_000.0), 0.0);
        assert_eq!(p.eval(-9_500.0), 5.0);
    }
}
