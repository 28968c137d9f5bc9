//! Open-system dynamics of the driven three-level model.
//!
//! The master equation is
//!
//! ```text
//! d rho/dt = -i 2pi [H, rho] + sum_k (L_k rho L_k^+ - 1/2 {L_k^+ L_k, rho})
//! ```
//!
//! with `H` in MHz and time in microseconds. Collapse rates are also given
//! in MHz and enter as `2 pi Gamma`, so `H` and the dissipator share units.
//!
//! Density matrices are vectorized column-major: `vec(rho)[i + 3 j] = rho[i][j]`,
//! which gives `vec(A rho B) = (B^T kron A) vec(rho)`.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use nalgebra::{Matrix3 as NMatrix3, SMatrix, SVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spin_model::{dressed_matrix, Basis, DressedDetuning, DriveParams, Matrix3, ZERO_STATE};

pub type SuperMatrix = SMatrix<Complex64, 9, 9>;
pub type SuperVector = SVector<Complex64, 9>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Green-laser repolarization into `|0>` from both `|+1>` and `|-1>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseSet {
    pub gamma_gl_mhz: f64,
    pub basis: Basis,
}

impl CollapseSet {
    pub fn new(gamma_gl_mhz: f64, basis: Basis) -> Result<Self> {
        if !(gamma_gl_mhz >= 0.0 && gamma_gl_mhz.is_finite()) {
            return Err(Error::invalid("gamma_gl_mhz", "must be non-negative"));
        }
        Ok(Self { gamma_gl_mhz, basis })
    }

    /// `L_{-1} = sqrt(G)|0><-1|`, `L_{+1} = sqrt(G)|0><+1|` in the working basis.
    pub fn operators(&self) -> [NMatrix3<Complex64>; 2] {
        let s = (TAU * self.gamma_gl_mhz).sqrt();
        let mut l_minus = NMatrix3::zeros();
        let mut l_plus = NMatrix3::zeros();
        match self.basis {
            Basis::Bare => {
                l_plus[(ZERO_STATE, 0)] = Complex64::new(s, 0.0);
                l_minus[(ZERO_STATE, 2)] = Complex64::new(s, 0.0);
            }
            Basis::Dressed => {
                // <+1| = (<B| + <D|)/sqrt2, <-1| = (<B| - <D|)/sqrt2
                let a = s * FRAC_1_SQRT_2;
                l_plus[(ZERO_STATE, 0)] = Complex64::new(a, 0.0);
                l_plus[(ZERO_STATE, 2)] = Complex64::new(a, 0.0);
                l_minus[(ZERO_STATE, 0)] = Complex64::new(a, 0.0);
                l_minus[(ZERO_STATE, 2)] = Complex64::new(-a, 0.0);
            }
        }
        [l_minus, l_plus]
    }
}

/// Photoluminescence readout: affine in the `|0>` population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadoutModel {
    pub r_base_cps: f64,
    pub c_max: f64,
}

impl ReadoutModel {
    pub fn new(r_base_cps: f64, c_max: f64) -> Result<Self> {
        if !(r_base_cps > 0.0 && r_base_cps.is_finite()) {
            return Err(Error::invalid("r_base_cps", "must be positive"));
        }
        if !(0.0..1.0).contains(&c_max) {
            return Err(Error::invalid("c_max", "must lie in [0, 1)"));
        }
        Ok(Self { r_base_cps, c_max })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix {
    pub data: NMatrix3<Complex64>,
    pub basis: Basis,
}

impl DensityMatrix {
    pub fn pure(index: usize, basis: Basis) -> Self {
        let mut data = NMatrix3::zeros();
        data[(index, index)] = ONE;
        Self { data, basis }
    }

    /// Ground state `|0><0|`.
    pub fn ground(basis: Basis) -> Self {
        Self::pure(ZERO_STATE, basis)
    }

    pub fn from_matrix(data: NMatrix3<Complex64>, basis: Basis) -> Result<Self> {
        let rho = Self { data, basis };
        rho.check_valid(1e-9)?;
        Ok(rho)
    }

    pub fn population(&self, index: usize) -> f64 {
        self.data[(index, index)].re
    }

    pub fn trace(&self) -> Complex64 {
        self.data.trace()
    }

    pub fn to_vec(&self) -> SuperVector {
        SuperVector::from_fn(|k, _| self.data[(k % 3, k / 3)])
    }

    pub fn from_vec(v: &SuperVector, basis: Basis) -> Self {
        Self {
            data: NMatrix3::from_fn(|i, j| v[i + 3 * j]),
            basis,
        }
    }

    pub fn eigenvalues(&self) -> [f64; 3] {
        let herm = (self.data + self.data.adjoint()) * Complex64::new(0.5, 0.0);
        Matrix3::new(herm, self.basis)
            .eigenvalues()
            .expect("symmetrized matrix is Hermitian")
    }

    /// `1/2 ||rho - sigma||_1`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> f64 {
        let diff = DensityMatrix {
            data: self.data - other.data,
            basis: self.basis,
        };
        0.5 * diff.eigenvalues().iter().map(|e| e.abs()).sum::<f64>()
    }

    /// Hermitian, unit trace and positive semidefinite within `tol`.
    pub fn check_valid(&self, tol: f64) -> Result<()> {
        let herm_dev = (self.data - self.data.adjoint()).camax();
        if herm_dev > tol {
            return Err(Error::NotHermitian { deviation: herm_dev });
        }
        let tr = self.trace();
        if (tr - ONE).norm() > tol {
            return Err(Error::invalid("rho", format!("trace {tr} differs from 1")));
        }
        let min_eig = self.eigenvalues()[0];
        if min_eig < -tol {
            return Err(Error::invalid("rho", format!("negative eigenvalue {min_eig:.3e}")));
        }
        Ok(())
    }
}

/// Superoperator acting on `vec(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Liouvillian {
    pub data: SuperMatrix,
    pub basis: Basis,
}

/// Matrix of `rho -> A rho B` on column-major `vec(rho)`.
fn sandwich(a: &NMatrix3<Complex64>, b: &NMatrix3<Complex64>) -> SuperMatrix {
    SuperMatrix::from_fn(|row, col| {
        let (i, j) = (row % 3, row / 3);
        let (k, l) = (col % 3, col / 3);
        a[(i, k)] * b[(l, j)]
    })
}

/// Superoperator for `-i 2pi [H, .] + sum_k D[L_k]`.
pub fn build_liouvillian(h: &Matrix3, c: &CollapseSet) -> Result<Liouvillian> {
    if h.basis != c.basis {
        return Err(Error::BasisMismatch {
            expected: h.basis,
            found: c.basis,
        });
    }
    h.check_hermitian()?;
    let id = NMatrix3::<Complex64>::identity();
    let minus_i_2pi = Complex64::new(0.0, -TAU);
    let mut data = (sandwich(&h.data, &id) - sandwich(&id, &h.data)) * minus_i_2pi;
    let half = Complex64::new(0.5, 0.0);
    for l in c.operators() {
        let ld = l.adjoint();
        let ldl = ld * l;
        data += sandwich(&l, &ld) - (sandwich(&ldl, &id) + sandwich(&id, &ldl)) * half;
    }
    Ok(Liouvillian { data, basis: h.basis })
}

impl Liouvillian {
    pub fn apply(&self, rho: &DensityMatrix) -> NMatrix3<Complex64> {
        let v = self.data * rho.to_vec();
        NMatrix3::from_fn(|i, j| v[i + 3 * j])
    }

    /// Norm of the row combination giving `d Tr(rho)/dt`.
    pub fn trace_residual(&self) -> f64 {
        let row = self.data.row(0) + self.data.row(4) + self.data.row(8);
        row.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    /// Dimension of the numerical null space.
    pub fn null_space_dimension(&self) -> usize {
        let sv = self.data.singular_values();
        let scale = sv.max().max(f64::MIN_POSITIVE);
        sv.iter().filter(|&&s| s <= 1e-10 * scale).count()
    }
}

/// Unique stationary state from `L vec(rho) = 0` with `Tr rho = 1`.
pub fn steady_state(l: &Liouvillian) -> Result<DensityMatrix> {
    let dim = l.null_space_dimension();
    if dim > 1 {
        return Err(Error::DegenerateSteadyState { dimension: dim });
    }
    steady_state_unchecked(l)
}

/// Solves the trace-constrained system without the null-space audit.
/// Used inside spectrum sweeps where uniqueness is known from the model.
pub(crate) fn steady_state_unchecked(l: &Liouvillian) -> Result<DensityMatrix> {
    // The three population rows are linearly dependent (trace preservation),
    // so row 0 can carry the normalization instead.
    let mut a = l.data;
    for col in 0..9 {
        a[(0, col)] = if col % 4 == 0 { ONE } else { ZERO };
    }
    let mut rhs = SuperVector::zeros();
    rhs[0] = ONE;
    let x = a
        .lu()
        .solve(&rhs)
        .ok_or(Error::DegenerateSteadyState { dimension: 2 })?;
    let rho = DensityMatrix::from_vec(&x, l.basis);
    let data = (rho.data + rho.data.adjoint()) * Complex64::new(0.5, 0.0);
    Ok(DensityMatrix { data, basis: l.basis })
}

/// Settings for the adaptive Dormand-Prince integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-11,
            max_steps: 2_000_000,
        }
    }
}

// Dormand-Prince 5(4) tableau
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
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// `rho(t)` for `t` in microseconds, default tolerances.
pub fn evolve(l: &Liouvillian, rho0: &DensityMatrix, t_us: f64) -> Result<DensityMatrix> {
    evolve_with(l, rho0, t_us, &EvolveOptions::default())
}

pub fn evolve_with(l: &Liouvillian, rho0: &DensityMatrix, t_us: f64, opts: &EvolveOptions) -> Result<DensityMatrix> {
    if rho0.basis != l.basis {
        return Err(Error::BasisMismatch {
            expected: l.basis,
            found: rho0.basis,
        });
    }
    if !(t_us >= 0.0 && t_us.is_finite()) {
        return Err(Error::invalid("t_us", "must be non-negative and finite"));
    }
    let m = &l.data;
    let mut y = rho0.to_vec();
    if t_us == 0.0 {
        return Ok(*rho0);
    }
    let c = |x: f64| Complex64::new(x, 0.0);
    let spectral = m.norm().max(1e-12);
    let mut h = (0.01 / spectral).min(t_us);
    let mut t = 0.0;
    let mut k1 = m * y;
    let mut steps = 0usize;
    while t < t_us {
        if steps >= opts.max_steps {
            return Err(Error::IntegrationFailed {
                reached_us: t,
                target_us: t_us,
                reason: format!("exceeded {} steps", opts.max_steps),
            });
        }
        steps += 1;
        if t + h > t_us {
            h = t_us - t;
        }
        let k2 = m * (y + k1 * c(h * A21));
        let k3 = m * (y + (k1 * c(A31) + k2 * c(A32)) * c(h));
        let k4 = m * (y + (k1 * c(A41) + k2 * c(A42) + k3 * c(A43)) * c(h));
        let k5 = m * (y + (k1 * c(A51) + k2 * c(A52) + k3 * c(A53) + k4 * c(A54)) * c(h));
        let k6 = m * (y + (k1 * c(A61) + k2 * c(A62) + k3 * c(A63) + k4 * c(A64) + k5 * c(A65)) * c(h));
        let y_new = y + (k1 * c(B1) + k3 * c(B3) + k4 * c(B4) + k5 * c(B5) + k6 * c(B6)) * c(h);
        let k7 = m * y_new;
        let err_vec = (k1 * c(E1) + k3 * c(E3) + k4 * c(E4) + k5 * c(E5) + k6 * c(E6) + k7 * c(E7)) * c(h);
        let mut err = 0.0f64;
        for i in 0..9 {
            let scale = opts.atol + opts.rtol * y[i].norm().max(y_new[i].norm());
            err = err.max(err_vec[i].norm() / scale);
        }
        if err <= 1.0 {
            t += h;
            y = y_new;
            k1 = k7;
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        h *= factor;
        if h < 1e-15 * t_us.max(1.0) {
            return Err(Error::IntegrationFailed {
                reached_us: t,
                target_us: t_us,
                reason: "step size underflow".into(),
            });
        }
    }
    let _ = C2 + C3 + C4 + C5;
    Ok(DensityMatrix::from_vec(&y, l.basis))
}

/// `R_base * (1 - C_max * (1 - rho_00))`.
pub fn pl_rate(rho: &DensityMatrix, ro: &ReadoutModel) -> f64 {
    ro.r_base_cps * (1.0 - ro.c_max * (1.0 - rho.population(ZERO_STATE)))
}

/// Dressed-frame model: two-tone drive, laser repolarization, readout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DressedModel {
    pub drive: DriveParams,
    pub collapse: CollapseSet,
    pub readout: ReadoutModel,
}

impl DressedModel {
    pub fn new(drive: DriveParams, gamma_gl_mhz: f64, readout: ReadoutModel) -> Result<Self> {
        drive.check_valid()?;
        Ok(Self {
            drive,
            collapse: CollapseSet::new(gamma_gl_mhz, Basis::Dressed)?,
            readout,
        })
    }

    pub fn liouvillian(&self, det: &DressedDetuning) -> Result<Liouvillian> {
        build_liouvillian(&dressed_matrix(det, self.drive.rabi_mhz), &self.collapse)
    }

    pub fn steady_state(&self, det: &DressedDetuning) -> Result<DensityMatrix> {
        steady_state_unchecked(&self.liouvillian(det)?)
    }

    /// Steady-state photoluminescence rate at the given dressed detuning.
    pub fn steady_pl(&self, det: &DressedDetuning) -> Result<f64> {
        Ok(pl_rate(&self.steady_state(det)?, &self.readout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin_model::{dressed_hamiltonian, FieldVector, NvParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn drive(omega: f64) -> DriveParams {
        let nv = NvParams::default();
        DriveParams::resonant(&nv, &FieldVector::new(47.0, 0.2).unwrap(), omega).unwrap()
    }

    fn dressed_l(omega: f64, gamma: f64, det: DressedDetuning) -> Liouvillian {
        let h = dressed_hamiltonian(&det, &drive(omega)).unwrap();
        build_liouvillian(&h, &CollapseSet::new(gamma, Basis::Dressed).unwrap()).unwrap()
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, basis: Basis) -> Matrix3 {
        let mut m = NMatrix3::<Complex64>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = Complex64::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            }
        }
        Matrix3::new((m + m.adjoint()) * Complex64::new(0.5, 0.0), basis)
    }

    fn random_density(rng: &mut ChaCha8Rng, basis: Basis) -> DensityMatrix {
        let mut a = NMatrix3::<Complex64>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                a[(i, j)] = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            }
        }
        let p = a * a.adjoint();
        let tr = p.trace();
        DensityMatrix { data: p / tr, basis }
    }

    /// Direct evaluation of the master-equation right-hand side.
    fn direct_rhs(h: &Matrix3, c: &CollapseSet, rho: &NMatrix3<Complex64>) -> NMatrix3<Complex64> {
        let comm = h.data * rho - rho * h.data;
        let mut out = comm * Complex64::new(0.0, -TAU);
        for l in c.operators() {
            let ld = l.adjoint();
            let ldl = ld * l;
            out += l * rho * ld - (ldl * rho + rho * ldl) * Complex64::new(0.5, 0.0);
        }
        out
    }

    #[test]
    fn zero_model_is_zero_map() {
        let l = build_liouvillian(
            &Matrix3::zeros(Basis::Dressed),
            &CollapseSet::new(0.0, Basis::Dressed).unwrap(),
        )
        .unwrap();
        assert_eq!(l.data.norm(), 0.0);
    }

    #[test]
    fn basis_mismatch_rejected() {
        let r = build_liouvillian(
            &Matrix3::zeros(Basis::Bare),
            &CollapseSet::new(1.0, Basis::Dressed).unwrap(),
        );
        assert!(matches!(r, Err(Error::BasisMismatch { .. })));
    }

    #[test]
    fn superoperator_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for basis in [Basis::Bare, Basis::Dressed] {
            let h = random_hermitian(&mut rng, basis);
            let c = CollapseSet::new(10.0, basis).unwrap();
            let l = build_liouvillian(&h, &c).unwrap();
            assert!(l.trace_residual() < 1e-10);
            for _ in 0..20 {
                let rho = random_density(&mut rng, basis);
                let diff = l.apply(&rho) - direct_rhs(&h, &c, &rho.data);
                assert!(diff.camax() < 1e-10, "{}", diff.camax());
            }
        }
    }

    #[test]
    fn dressed_dissipator_equals_bare_dissipator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bare = CollapseSet::new(4.0, Basis::Bare).unwrap();
        let dressed = CollapseSet::new(4.0, Basis::Dressed).unwrap();
        let lb = build_liouvillian(&Matrix3::zeros(Basis::Bare), &bare).unwrap();
        let ld = build_liouvillian(&Matrix3::zeros(Basis::Dressed), &dressed).unwrap();
        let u = crate::spin_model::bare_to_dressed();
        for _ in 0..5 {
            let rho = random_density(&mut rng, Basis::Bare);
            let out_bare = u * lb.apply(&rho) * u.adjoint();
            let rho_d = DensityMatrix {
                data: u * rho.data * u.adjoint(),
                basis: Basis::Dressed,
            };
            assert!((out_bare - ld.apply(&rho_d)).camax() < 1e-12);
        }
    }

    #[test]
    fn undriven_steady_state_is_ground() {
        let h = crate::spin_model::dressed_matrix(&DressedDetuning::default(), 0.0);
        let l = build_liouvillian(&h, &CollapseSet::new(10.0, Basis::Dressed).unwrap()).unwrap();
        let rho = steady_state(&l).unwrap();
        assert!(rho.trace_distance(&DensityMatrix::ground(Basis::Dressed)) < 1e-12);
    }

    #[test]
    fn degenerate_null_space_reported() {
        let h = crate::spin_model::dressed_matrix(&DressedDetuning::default(), 1.0);
        let l = build_liouvillian(&h, &CollapseSet::new(0.0, Basis::Dressed).unwrap()).unwrap();
        assert!(matches!(steady_state(&l), Err(Error::DegenerateSteadyState { dimension }) if dimension > 1));
    }

    #[test]
    fn steady_state_agrees_with_long_evolution() {
        let l = dressed_l(5.0, 10.0, DressedDetuning::default());
        let ss = steady_state(&l).unwrap();
        ss.check_valid(1e-9).unwrap();
        let ev = evolve(&l, &DensityMatrix::ground(Basis::Dressed), 10.0 / 10.0).unwrap();
        assert!(ss.trace_distance(&ev) < 1e-6, "{}", ss.trace_distance(&ev));
        let residual = (l.data * ss.to_vec()).norm();
        assert!(residual < 1e-9 * l.norm());
    }

    #[test]
    fn far_detuned_stays_in_ground() {
        // drive strength of a ~11 MHz wide dressed dip
        let l = dressed_l(
            1.5,
            10.0,
            DressedDetuning {
                delta_d: 50.0,
                delta_b: 0.0,
            },
        );
        let ss = steady_state(&l).unwrap();
        assert!(ss.population(ZERO_STATE) >= 0.99);
        let ev = evolve(&l, &DensityMatrix::ground(Basis::Dressed), 2.0).unwrap();
        assert!(ev.population(ZERO_STATE) >= 0.99);
        assert!(ss.trace_distance(&ev) < 1e-6);
        // at Omega = 5 the two-level formula leaves 1.9% outside |0>
        let strong = steady_state(&dressed_l(
            5.0,
            10.0,
            DressedDetuning {
                delta_d: 50.0,
                delta_b: 0.0,
            },
        ))
        .unwrap();
        let wr2 = 8.0 * 25.0;
        let bright = (wr2 / 4.0) / (2500.0 + 25.0 + wr2 / 2.0);
        assert!((strong.population(ZERO_STATE) - (1.0 - bright)).abs() < 1e-9);
    }

    #[test]
    fn evolve_zero_time_is_identity() {
        let l = dressed_l(5.0, 10.0, DressedDetuning::default());
        let rho = DensityMatrix::pure(0, Basis::Dressed);
        assert_eq!(evolve(&l, &rho, 0.0).unwrap(), rho);
    }

    #[test]
    fn coherent_rabi_between_ground_and_bright() {
        let omega = 5.0;
        let l = dressed_l(omega, 0.0, DressedDetuning::default());
        let g = std::f64::consts::SQRT_2 * omega;
        for &t in &[0.005, 0.0125, 0.03, 0.1] {
            let rho = evolve(&l, &DensityMatrix::ground(Basis::Dressed), t).unwrap();
            let expected = (TAU * g * t).sin().powi(2);
            assert_abs_diff_eq!(rho.population(0), expected, epsilon = 1e-6);
            assert_abs_diff_eq!(rho.population(2), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn trace_preserved_over_time() {
        let l = dressed_l(
            3.0,
            10.0,
            DressedDetuning {
                delta_d: 1.0,
                delta_b: 2.0,
            },
        );
        for &t in &[0.1, 1.0, 10.0] {
            let rho = evolve(&l, &DensityMatrix::ground(Basis::Dressed), t).unwrap();
            assert!((rho.trace() - ONE).norm() < 1e-8);
        }
    }

    #[test]
    fn semigroup_property() {
        let l = dressed_l(
            2.0,
            5.0,
            DressedDetuning {
                delta_d: 0.7,
                delta_b: -1.3,
            },
        );
        let rho0 = DensityMatrix::pure(2, Basis::Dressed);
        let direct = evolve(&l, &rho0, 0.35).unwrap();
        let split = evolve(&l, &evolve(&l, &rho0, 0.1).unwrap(), 0.25).unwrap();
        assert!(direct.trace_distance(&split) < 1e-7);
    }

    #[test]
    fn dark_state_stays_empty_without_delta_b() {
        let l = dressed_l(
            2.0,
            10.0,
            DressedDetuning {
                delta_d: 0.5,
                delta_b: 0.0,
            },
        );
        let ss = steady_state(&l).unwrap();
        assert!(ss.population(2) < 1e-6);
        let ev = evolve(&l, &DensityMatrix::ground(Basis::Dressed), 3.0).unwrap();
        assert!(ev.population(2) < 1e-6);
    }

    #[test]
    fn pl_rate_endpoints() {
        let ro = ReadoutModel::new(1e5, 0.2).unwrap();
        assert_eq!(pl_rate(&DensityMatrix::ground(Basis::Dressed), &ro), 1e5);
        assert_abs_diff_eq!(
            pl_rate(&DensityMatrix::pure(0, Basis::Dressed), &ro),
            0.8e5,
            epsilon = 1e-9
        );
    }

    #[test]
    fn readout_validation() {
        assert!(ReadoutModel::new(0.0, 0.1).is_err());
        assert!(ReadoutModel::new(1.0, 1.0).is_err());
        assert!(CollapseSet::new(-1.0, Basis::Bare).is_err());
    }

    #[test]
    fn resonant_dip_matches_two_level_formula() {
        // With delta_B = 0 the |0>-|Bright> pair is a driven two-level system
        // with population decay 2 pi Gamma.
        let (omega, gamma) = (1.2, 10.0);
        for &dd in &[0.0, 2.0, -5.5] {
            let l = dressed_l(
                omega,
                gamma,
                DressedDetuning {
                    delta_d: dd,
                    delta_b: 0.0,
                },
            );
            let ss = steady_state(&l).unwrap();
            let rabi = 2.0 * std::f64::consts::SQRT_2 * omega;
            let expected = 0.25 * rabi * rabi / (dd * dd + 0.25 * gamma * gamma + 0.5 * rabi * rabi);
            assert_abs_diff_eq!(ss.population(0), expected, epsilon = 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn evolution_keeps_state_physical(dd in -10.0..10.0f64, db in -10.0..10.0f64, om in 0.1..4.0f64, t in 0.01..2.0f64) {
            let l = dressed_l(om, 10.0, DressedDetuning { delta_d: dd, delta_b: db });
            let rho = evolve(&l, &DensityMatrix::ground(Basis::Dressed), t).unwrap();
            prop_assert!(rho.check_valid(1e-8).is_ok());
            let ss = steady_state(&l).unwrap();
            prop_assert!(ss.check_valid(1e-9).is_ok());
            prop_assert!((l.data * ss.to_vec()).norm() < 1e-9 * l.norm());
        }
    }
}
