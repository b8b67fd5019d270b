//! Numerical toolkit for the singular limit of n-level scattering systems
//! `iε ψ'(t) = H(t) ψ(t)`.
//!
//! The S-matrix relating `c(-∞)` to `c(+∞)` in the adiabatic frame is computed
//! two independent ways:
//!
//! * directly, by high-accuracy integration of the coefficient ODE on a
//!   truncated real line ([`smatrix`]), and
//! * asymptotically, from complex-plane loop integrals around eigenvalue
//!   degeneracies, monodromy prefactors and superasymptotic corrections
//!   ([`geometry`], [`asymptotics`], [`superasym`]),
//!
//! and the two are cross-validated against the exponential-asymptotics
//! predictions and the symmetry identities of the generator ([`symmetry`]).

pub mod asymptotics;
pub mod cheb;
pub mod config;
pub mod expr;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod runner;
pub mod smatrix;
pub mod spline;
pub mod superasym;
pub mod symmetry;
pub mod transport;

pub use linalg::{CMatrix, SpectralFrame, C64};
