//! NV ground-state spin Hamiltonians.
//!
//! Basis orderings are fixed:
//!
//! - [`Basis::Bare`]: `|+1>, |0>, |-1>` (eigenbasis labels of the lab-frame
//!   Hamiltonian, NV axis along z).
//! - [`Basis::Dressed`]: `|Bright>, |0>, |Dark>` with
//!   `|Bright> = (|+1> + |-1>)/sqrt(2)` and `|Dark> = (|+1> - |-1>)/sqrt(2)`.
//!
//! The `|0>` state sits at index 1 in both bases. All entries are in MHz.

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use nalgebra::{Matrix3 as NMatrix3, SymmetricEigen, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Index of `|0>` in both bases.
pub const ZERO_STATE: usize = 1;

/// Threshold on `gamma_e*Bx/D` above which the second-order level
/// expansion is flagged as unreliable.
pub const LAMBDA_VALIDITY_LIMIT: f64 = 0.2;

const HERMITIAN_TOL: f64 = 1e-12;

/// Physical constants of one NV orientation class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NvParams {
    /// Zero-field splitting at the reference temperature (MHz).
    pub d0_mhz: f64,
    /// Thermal shift coefficient dD/dT (MHz/K). Negative for NV, carried with its sign.
    pub dd_dt_mhz_per_k: f64,
    /// Electron gyromagnetic ratio (MHz/G).
    pub gamma_e_mhz_per_g: f64,
    /// Off-axis strain E (MHz).
    pub strain_mhz: f64,
}

impl Default for NvParams {
    fn default() -> Self {
        Self {
            d0_mhz: 2870.0,
            dd_dt_mhz_per_k: -0.074,
            gamma_e_mhz_per_g: 2.8,
            strain_mhz: 0.0,
        }
    }
}

impl NvParams {
    pub fn new(d0_mhz: f64, dd_dt_mhz_per_k: f64, gamma_e_mhz_per_g: f64, strain_mhz: f64) -> Result<Self> {
        let p = Self {
            d0_mhz,
            dd_dt_mhz_per_k,
            gamma_e_mhz_per_g,
            strain_mhz,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d0_mhz > 0.0 && self.d0_mhz.is_finite()) {
            return Err(Error::invalid("d0_mhz", "must be positive and finite"));
        }
        if !(self.gamma_e_mhz_per_g > 0.0 && self.gamma_e_mhz_per_g.is_finite()) {
            return Err(Error::invalid("gamma_e_mhz_per_g", "must be positive and finite"));
        }
        if !self.dd_dt_mhz_per_k.is_finite() || self.dd_dt_mhz_per_k == 0.0 {
            return Err(Error::invalid("dd_dt_mhz_per_k", "must be finite and nonzero"));
        }
        if !(self.strain_mhz >= 0.0 && self.strain_mhz.is_finite()) {
            return Err(Error::invalid("strain_mhz", "must be non-negative"));
        }
        Ok(())
    }

    /// D(T) for a temperature offset from the reference temperature.
    pub fn zfs(&self, t_shift_k: f64) -> f64 {
        self.d0_mhz + self.dd_dt_mhz_per_k * t_shift_k
    }
}

/// Static field described by magnitude and angle to the NV axis.
///
/// The azimuth is absorbed by the NV symmetry: only `Bz` and `Bx` enter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldVector {
    pub magnitude_g: f64,
    pub theta_rad: f64,
}

impl FieldVector {
    pub fn new(magnitude_g: f64, theta_rad: f64) -> Result<Self> {
        if !(magnitude_g >= 0.0 && magnitude_g.is_finite()) {
            return Err(Error::invalid("magnitude_g", "must be non-negative"));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(&theta_rad) {
            return Err(Error::invalid("theta_rad", "must lie in [0, pi/2]"));
        }
        Ok(Self { magnitude_g, theta_rad })
    }

    pub fn bz(&self) -> f64 {
        self.magnitude_g * self.theta_rad.cos()
    }

    pub fn bx(&self) -> f64 {
        self.magnitude_g * self.theta_rad.sin()
    }

    /// Same direction, magnitude changed by `delta_g`.
    pub fn with_magnitude_offset(&self, delta_g: f64) -> FieldVector {
        FieldVector {
            magnitude_g: self.magnitude_g + delta_g,
            theta_rad: self.theta_rad,
        }
    }
}

/// Two-tone drive: per-tone Rabi frequency and the two carrier frequencies.
///
/// `omega1` addresses `|0> <-> |-1>` (lower transition), `omega2` addresses
/// `|0> <-> |+1>`. The perpendicular amplitudes of both tones are equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveParams {
    pub rabi_mhz: f64,
    pub omega1_mhz: f64,
    pub omega2_mhz: f64,
    /// gamma_e * Bz at the field the drive was set up for (MHz).
    pub axial_zeeman_mhz: f64,
}

impl DriveParams {
    pub fn new(rabi_mhz: f64, omega1_mhz: f64, omega2_mhz: f64, axial_zeeman_mhz: f64) -> Result<Self> {
        if !(rabi_mhz > 0.0 && rabi_mhz.is_finite()) {
            return Err(Error::invalid("rabi_mhz", "must be positive"));
        }
        if omega2_mhz < omega1_mhz {
            return Err(Error::invalid("omega2_mhz", "must be >= omega1_mhz"));
        }
        Ok(Self {
            rabi_mhz,
            omega1_mhz,
            omega2_mhz,
            axial_zeeman_mhz,
        })
    }

    /// Tones placed on the exact transition frequencies at `field`.
    pub fn resonant(nv: &NvParams, field: &FieldVector, rabi_mhz: f64) -> Result<Self> {
        let (w1, w2) = transition_frequencies(&bare_hamiltonian(nv, field, 0.0))?;
        Self::new(rabi_mhz, w1, w2, nv.gamma_e_mhz_per_g * field.bz())
    }

    /// The doubly rotating frame needs the two transitions to be resolved.
    pub fn is_valid(&self) -> bool {
        self.axial_zeeman_mhz > self.rabi_mhz
    }

    pub fn check_valid(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DriveInvalid {
                zeeman_mhz: self.axial_zeeman_mhz,
                omega_mhz: self.rabi_mhz,
            })
        }
    }

    /// Nominal DS-ODMR resonance `(omega1 + omega2)/2`.
    pub fn f_avg(&self) -> f64 {
        0.5 * (self.omega1_mhz + self.omega2_mhz)
    }

    pub fn splitting(&self) -> f64 {
        self.omega2_mhz - self.omega1_mhz
    }
}

/// Environmental changes relative to the reference operating point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Detunings {
    /// Zero-field-splitting shift (MHz).
    pub dd_mhz: f64,
    /// Axial field change (G).
    pub dbz_g: f64,
    /// Transverse field change (G).
    pub dbx_g: f64,
}

/// Dressed-frame detunings `(delta_D, delta_B)` in MHz.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DressedDetuning {
    pub delta_d: f64,
    pub delta_b: f64,
}

impl Detunings {
    pub fn new(dd_mhz: f64, dbz_g: f64, dbx_g: f64) -> Self {
        Self { dd_mhz, dbz_g, dbx_g }
    }

    /// Change of the field magnitude along its current direction.
    pub fn from_magnitude_change(field: &FieldVector, delta_g: f64) -> Self {
        Self {
            dd_mhz: 0.0,
            dbz_g: delta_g * field.theta_rad.cos(),
            dbx_g: delta_g * field.theta_rad.sin(),
        }
    }

    /// `delta_D = dD + 3 (gamma_e Bx / D) gamma_e dBx`.
    pub fn delta_d(&self, nv: &NvParams, field: &FieldVector) -> f64 {
        let g = nv.gamma_e_mhz_per_g;
        self.dd_mhz + 3.0 * (g * field.bx() / nv.d0_mhz) * g * self.dbx_g
    }

    /// `delta_B = gamma_e dBz`.
    pub fn delta_b(&self, nv: &NvParams) -> f64 {
        nv.gamma_e_mhz_per_g * self.dbz_g
    }

    pub fn resolve(&self, nv: &NvParams, field: &FieldVector) -> DressedDetuning {
        DressedDetuning {
            delta_d: self.delta_d(nv, field),
            delta_b: self.delta_b(nv),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basis {
    Bare,
    Dressed,
}

/// Basis-tagged 3x3 complex matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Matrix3 {
    pub data: NMatrix3<Complex64>,
    pub basis: Basis,
}

impl Matrix3 {
    pub fn new(data: NMatrix3<Complex64>, basis: Basis) -> Self {
        Self { data, basis }
    }

    pub fn from_real(rows: [[f64; 3]; 3], basis: Basis) -> Self {
        let data = NMatrix3::from_fn(|i, j| Complex64::new(rows[i][j], 0.0));
        Self { data, basis }
    }

    pub fn zeros(basis: Basis) -> Self {
        Self {
            data: NMatrix3::zeros(),
            basis,
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    /// Largest `|H - H^dagger|` entry relative to the Frobenius norm.
    pub fn hermiticity_error(&self) -> f64 {
        let dev = (self.data - self.data.adjoint()).camax();
        let scale = self.norm();
        if scale == 0.0 {
            dev
        } else {
            dev / scale
        }
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermiticity_error() <= HERMITIAN_TOL
    }

    pub fn check_hermitian(&self) -> Result<()> {
        let deviation = self.hermiticity_error();
        if deviation <= HERMITIAN_TOL {
            Ok(())
        } else {
            Err(Error::NotHermitian { deviation })
        }
    }

    /// Ascending eigenvalues and matching unit eigenvectors (as columns).
    pub fn eigh(&self) -> Result<(Vector3<f64>, NMatrix3<Complex64>)> {
        self.check_hermitian()?;
        let herm = (self.data + self.data.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(herm);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = Vector3::from_fn(|i, _| eig.eigenvalues[order[i]]);
        let vectors = NMatrix3::from_fn(|r, c| eig.eigenvectors[(r, order[c])]);
        Ok((values, vectors))
    }

    pub fn eigenvalues(&self) -> Result<[f64; 3]> {
        let (v, _) = self.eigh()?;
        Ok([v[0], v[1], v[2]])
    }
}

/// Unitary taking bare-basis coordinates to dressed-basis coordinates.
pub fn bare_to_dressed() -> NMatrix3<Complex64> {
    let s = FRAC_1_SQRT_2;
    NMatrix3::from_fn(|i, j| {
        let rows = [[s, 0.0, s], [0.0, 1.0, 0.0], [s, 0.0, -s]];
        Complex64::new(rows[i][j], 0.0)
    })
}

/// Express a bare-basis operator in the dressed basis.
pub fn to_dressed(op: &Matrix3) -> Result<Matrix3> {
    if op.basis != Basis::Bare {
        return Err(Error::BasisMismatch {
            expected: Basis::Bare,
            found: op.basis,
        });
    }
    let u = bare_to_dressed();
    Ok(Matrix3::new(u * op.data * u.adjoint(), Basis::Dressed))
}

fn spin1_hamiltonian(d_mhz: f64, gamma_e: f64, strain_mhz: f64, bz_g: f64, bx_g: f64) -> Matrix3 {
    let z = gamma_e * bz_g;
    // <+1|Sx|0> = <0|Sx|-1> = 1/sqrt(2)
    let x = gamma_e * bx_g / SQRT_2;
    Matrix3::from_real(
        [[d_mhz + z, x, strain_mhz], [x, 0.0, x], [strain_mhz, x, d_mhz - z]],
        Basis::Bare,
    )
}

/// Lab-frame Hamiltonian `D(T) Sz^2 + gamma_e B.S + E (Sx^2 - Sy^2)` in the
/// bare basis, with `D(T) = D0 + dD/dT * t_shift_k`.
pub fn bare_hamiltonian(nv: &NvParams, field: &FieldVector, t_shift_k: f64) -> Matrix3 {
    spin1_hamiltonian(
        nv.zfs(t_shift_k),
        nv.gamma_e_mhz_per_g,
        nv.strain_mhz,
        field.bz(),
        field.bx(),
    )
}

/// Same as [`bare_hamiltonian`] with an explicit zero-field splitting.
pub fn bare_hamiltonian_with_zfs(nv: &NvParams, field: &FieldVector, d_mhz: f64) -> Matrix3 {
    spin1_hamiltonian(d_mhz, nv.gamma_e_mhz_per_g, nv.strain_mhz, field.bz(), field.bx())
}

/// `(omega1, omega2) = (e1 - e0, e2 - e0)` for ascending eigenvalues.
pub fn transition_frequencies(h: &Matrix3) -> Result<(f64, f64)> {
    if h.basis != Basis::Bare {
        return Err(Error::BasisMismatch {
            expected: Basis::Bare,
            found: h.basis,
        });
    }
    let e = h.eigenvalues()?;
    Ok((e[1] - e[0], e[2] - e[0]))
}

/// Second-order level splittings of the two `|0> <-> |+-1>` subspaces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaApprox {
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    /// `gamma_e*Bx/D` exceeded [`LAMBDA_VALIDITY_LIMIT`].
    pub outside_validity: bool,
}

/// `lambda_pm = D +- gamma_e Bz + (3/2)(gamma_e Bx / D) gamma_e Bx`.
pub fn lambda_approx(nv: &NvParams, field: &FieldVector) -> LambdaApprox {
    let g = nv.gamma_e_mhz_per_g;
    let d = nv.d0_mhz;
    let bz = g * field.bz();
    let bx = g * field.bx();
    let correction = 1.5 * (bx / d) * bx;
    LambdaApprox {
        lambda_minus: d - bz + correction,
        lambda_plus: d + bz + correction,
        outside_validity: bx / d >= LAMBDA_VALIDITY_LIMIT,
    }
}

/// Dressed-basis doubly-rotating-frame Hamiltonian
///
/// ```text
/// [[dD,        sqrt2*Omega, dB],
///  [sqrt2*Omega, 0,         0 ],
///  [dB,        0,           dD]]
/// ```
pub fn dressed_hamiltonian(det: &DressedDetuning, drive: &DriveParams) -> Result<Matrix3> {
    drive.check_valid()?;
    Ok(dressed_matrix(det, drive.rabi_mhz))
}

/// Unchecked variant; callers must have validated the drive.
pub(crate) fn dressed_matrix(det: &DressedDetuning, rabi_mhz: f64) -> Matrix3 {
    let c = SQRT_2 * rabi_mhz;
    Matrix3::from_real(
        [
            [det.delta_d, c, det.delta_b],
            [c, 0.0, 0.0],
            [det.delta_b, 0.0, det.delta_d],
        ],
        Basis::Dressed,
    )
}

/// Linearized detunings from raw environmental changes, then
/// [`dressed_hamiltonian`].
pub fn dressed_from_bare(
    nv: &NvParams,
    field: &FieldVector,
    det_raw: &Detunings,
    drive: &DriveParams,
) -> Result<Matrix3> {
    dressed_hamiltonian(&det_raw.resolve(nv, field), drive)
}

/// Detunings from the exact eigensolve: the transitions at `field + change`
/// (and `D0 + dD`) measured against the drive carriers.
pub fn exact_dressed_detuning(
    nv: &NvParams,
    field: &FieldVector,
    det_raw: &Detunings,
    drive: &DriveParams,
) -> Result<DressedDetuning> {
    let bz = field.bz() + det_raw.dbz_g;
    let bx = field.bx() + det_raw.dbx_g;
    let h = spin1_hamiltonian(nv.d0_mhz + det_raw.dd_mhz, nv.gamma_e_mhz_per_g, nv.strain_mhz, bz, bx);
    let (w1, w2) = transition_frequencies(&h)?;
    let d1 = w1 - drive.omega1_mhz;
    let d2 = w2 - drive.omega2_mhz;
    Ok(DressedDetuning {
        delta_d: 0.5 * (d1 + d2),
        delta_b: 0.5 * (d2 - d1),
    })
}
