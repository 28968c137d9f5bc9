//! Dressed-spin-state NV-center thermometry toolkit.
//!
//! The crate is organized bottom-up:
//!
//! - [`spin_model`]: NV ground-state Hamiltonians in the lab frame, the
//!   doubly rotating frame and the microwave-dressed basis.
//! - [`lindblad`]: Liouvillian construction, steady state and time evolution
//!   of the driven three-level model, plus the photoluminescence readout map.
//! - [`odmr_analysis`]: DS-ODMR spectrum synthesis, Lorentzian fitting,
//!   three-point and six-point extraction, shot-noise sensitivity and
//!   magnetic-field robustness maps.
//! - [`thermal_sim`]: explicit finite-difference heat diffusion on a
//!   nonuniform heterogeneous 2D grid with convective loss.
//! - [`photon_pipeline`]: synthetic pump-probe photon streams, dead-time
//!   removal, delay stacking and conversion to temperature traces.
//! - [`scenario`]: validated experiment configuration and the command
//!   implementations behind the `dressed-thermo` binary.
//!
//! Units: frequencies and Hamiltonian entries in MHz (cyclic), times in
//! microseconds for quantum dynamics, magnetic fields in gauss, SI for the
//! thermal solver.

pub mod error;
pub mod lindblad;
pub mod odmr_analysis;
pub mod photon_pipeline;
pub mod scenario;
pub mod spin_model;
pub mod thermal_sim;

pub use error::{Error, Result};
