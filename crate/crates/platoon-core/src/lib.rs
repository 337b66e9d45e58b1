//! Heterogeneous vehicle platooning with constant-time-headway spacing and
//! barrier-bounded adaptive tracking of a homogeneous reference platoon.
//!
//! The crate is organized bottom-up: [`numerics`] holds the dense kernels,
//! [`model`] the parameter and scenario types, [`barrier`] the barrier
//! function, [`controllers`] the control and adaptation laws, [`engine`] the
//! three-layer simulation, and [`certificates`] the analytic safety checks
//! and trajectory audits.

pub mod barrier;
pub mod controllers;
pub mod engine;
pub mod model;
pub mod numerics;

pub mod certificates;
