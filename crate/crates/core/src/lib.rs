//! Hamilton-Jacobi toolkit for first-order classical field theories in the
//! k-symplectic formalism.
//!
//! The crate works in canonical coordinates on a base `Q = R^n` with `k`
//! field parameters `t^1..t^k`:
//!
//! * [`scalars`]: forward-mode dual numbers and a finite-difference oracle;
//! * [`exprlang`]: the expression language used to write `H`, `L`, sections
//!   and k-vector fields;
//! * [`geometry`]: points, sections, k-vector fields, lattices, prolongation;
//! * [`hamiltonian`]: the musical map, Hamilton field equations and the
//!   Hamilton-Jacobi checks on the k-covelocity bundle;
//! * [`lagrangian`]: Legendre map, energy, Euler-Lagrange field equations and
//!   the Lagrangian Hamilton-Jacobi checks on the k-velocity bundle;
//! * [`integrate`]: integral sections of k-vector fields (characteristics);
//! * [`cli`]: problem files, the built-in catalog and the `ksym` commands.

pub mod cli;
pub mod error;
pub mod exprlang;
pub mod geometry;
pub mod hamiltonian;
pub mod integrate;
pub mod lagrangian;
pub mod scalars;

pub use error::{Error, Result};
