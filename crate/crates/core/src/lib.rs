//! Numerical toolkit for checking invariance of closed sets under controlled
//! stochastic and deterministic dynamics.
//!
//! The library checks the same invariance question along several independent
//! routes and audits that they agree:
//!
//! * analytic boundary conditions on the diffusion generator, the associated
//!   first-order operator and the matrix of second Lie-type derivatives
//!   ([`invariance`]),
//! * direct Monte-Carlo simulation of the stochastic system and fixed-step
//!   integration of the associated deterministic system ([`paths`]),
//! * the local machinery behind those conditions: stochastic Taylor
//!   expansions, iterated Brownian integrals and Lévy areas, and a sampling
//!   falsifier for the coefficient inequality ([`expansion`]),
//! * smoothed-noise (Wong–Zakai type) ODE approximations ([`paths`]),
//! * a discounted-cost value estimate bounded by the set indicator
//!   ([`hjb_mc`]).
//!
//! Systems and sets come either from the built-in [`catalog`] (analytic
//! derivatives, known ground truth) or from config-defined expressions
//! differentiated with dual numbers ([`exprlang`]).

pub mod catalog;
pub mod error;
pub mod expansion;
pub mod exprlang;
pub mod hjb_mc;
pub mod invariance;
pub mod numerics;
pub mod paths;
pub mod sde_core;

pub use error::{Error, Result};
pub use numerics::Mat;
