//! Continuous-time neural dynamic equivalents of an unobservable external
//! power subsystem.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: static network model, admittance assembly, power flow and the
//!   internal/external partition.
//! * [`dynamics`]: classical machine swing equations, the network solve and
//!   the eliminated-form Jacobians used by the physics-informed adjoint.
//! * [`simulator`]: trapezoidal integration of the full system and of the two
//!   hybrid physics/neural closed loops.
//! * [`neuralnet`]: the multi-layer (optionally recurrent) equivalent, its
//!   analytic Jacobians and the feature selector.
//! * [`training`]: continuous-time losses, the discrete adjoint, the
//!   discrete-time baseline and the optimizers.
//! * [`dp`]: driving-port equivalence (algebraic split, least-squares `D`).
//! * [`evaluation`]: scenarios, relative errors, modes and electrical
//!   distance.
//! * [`fixtures`]: desk-scale test systems.

pub mod dp;
pub mod dynamics;
pub mod evaluation;
pub mod fixtures;
pub mod grid;
pub mod linalg;
pub mod neuralnet;
pub mod simulator;
pub mod training;

mod error;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
