//! Sampling primitives, toy denoisers and inbetweening samplers.
//!
//! The crate is organised bottom-up: [`tensor`] holds latents, schedules and
//! the seeded noise source; [`edm`] the per-step arithmetic; [`denoise`] the
//! denoiser contract with closed-form worlds and a bridge client;
//! [`sampler`] and [`mpd`] the samplers; [`diagnostics`] traces and metrics.

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoise;
pub mod diagnostics;
pub mod edm;
pub mod error;
pub mod io;
pub mod mpd;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
