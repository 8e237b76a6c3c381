//! Transient-regime laboratory for piecewise deterministic Monte Carlo.
//!
//! The crate simulates the Bouncy Particle, Forward Event-Chain, Coordinate
//! and Zig-Zag samplers on `eps`-scaled convex potentials, integrates their
//! deterministic limit flows, and runs replicated studies of jump counts and
//! trajectory gaps.
//!
//! Module map:
//!
//! * [`potentials`]: convex targets, derivatives, level sets and energy bands.
//! * [`event_engine`]: first-arrival simulation for rates `eps^-1 (lambda)_+`
//!   by exact inversion or windowed thinning, with cost accounting.
//! * [`samplers`]: the four samplers as event-driven state machines.
//! * [`boxqp`]: box-constrained quadratic programs with KKT certificates.
//! * [`flows`]: limit flows (snapping, high-refresh, RWM baseline, Zig-Zag).
//! * [`experiments`]: scaling studies, trajectory gaps, drift diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod boxqp;
pub mod error;
pub mod event_engine;
pub mod experiments;
pub mod flows;
pub mod linalg;
pub mod potentials;
pub mod rng;
pub mod samplers;

pub use error::{Error, Result};
