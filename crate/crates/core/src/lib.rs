//! Conditional prevalence adjustment for anti-causal classification under
//! distribution shift.
//!
//! A site-invariant ratio network `f(x, z)` is trained against outputs that
//! have been multiplied by each training site's conditional prevalence
//! `P(Y | Z, site)`. At an unseen site the same network is reused and only the
//! prevalence factor is swapped for that site's estimate.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! front end and parallel orchestration live in the `copa` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod baselines;
pub mod config;
pub mod copa;
pub mod error;
pub mod eval;
pub mod hash;
pub mod nn;
pub mod prevalence;
pub mod rng;
pub mod scm;
pub mod tabular;
mod math;
pub mod train;
pub mod whiten;

pub use error::{Error, Result};
