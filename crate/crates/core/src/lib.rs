//! Chaos-driven exploration for deterministic actor-critic learning: an echo
//! state network supplies the exploratory signal, TD3 trains its readout.

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actors;
pub mod analysis;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod exploration;
pub mod neural;
pub mod numkit;
pub mod parallel;
pub mod reservoir;
pub mod td3;

pub use error::{Error, Result};
