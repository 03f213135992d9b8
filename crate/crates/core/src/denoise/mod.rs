//! Denoiser contract and the concrete toy-world denoisers.
//!
//! A [`Denoiser`] maps a noisy latent at level `sigma` (plus an optional
//! frame condition) to an unconditional and a conditional clean estimate.
//! The conditioning frame always refers to frame 1 of the latent it is
//! given; backward paths flip the latent before calling.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::edm::DenoisedPair;
use crate::error::{invalid, Result};
use crate::tensor::{Frame, VideoLatent};

pub mod bridge;
pub mod gaussian;
pub mod shift;

pub use bridge::BridgeDenoiser;
pub use gaussian::{GaussianDenoiser, GaussianWorldSpec};
pub use shift::{MotionWorldSpec, ShiftWorldDenoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionRole {
    Start,
    End,
}

impl ConditionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionRole::Start => "start",
            ConditionRole::End => "end",
        }
    }
}

/// An encoded keyframe. Toy worlds use the raw frame latent as the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCondition {
    pub latent: Frame,
    pub role: ConditionRole,
}

impl FrameCondition {
    pub fn start(latent: Frame) -> Self {
        Self {
            latent,
            role: ConditionRole::Start,
        }
    }

    pub fn end(latent: Frame) -> Self {
        Self {
            latent,
            role: ConditionRole::End,
        }
    }

    pub(crate) fn check_against(&self, x: &VideoLatent) -> Result<()> {
        if self.latent.dim() != x.frame_shape() {
            return Err(invalid(format!(
                "condition shape {:?} does not match frame shape {:?}",
                self.latent.dim(),
                x.frame_shape()
            )));
        }
        Ok(())
    }
}

pub trait Denoiser: Send + Sync {
    /// Returns `(x0_uncond, x0_cond)` for `x_t` at noise level `sigma`.
    /// Without a condition both estimates are unconditional.
    fn denoise(&self, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<DenoisedPair>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<DenoisedPair> {
        (**self).denoise(x_t, sigma, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise(&self, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<DenoisedPair> {
        (**self).denoise(x_t, sigma, cond)
    }
}

pub(crate) fn check_call(x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("denoiser sigma must be positive, got {sigma}")));
    }
    if let Some(c) = cond {
        c.check_against(x_t)?;
    }
    Ok(())
}

/// One recorded denoiser invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CallRecord {
    pub sigma: f64,
    pub role: Option<ConditionRole>,
}

/// Wraps a denoiser and records every call, for call-count and
/// condition audits.
pub struct CallAudit<D> {
    inner: D,
    log: Mutex<Vec<CallRecord>>,
}

impl<D: Denoiser> CallAudit<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("audit log poisoned").clone()
    }

    pub fn count(&self) -> usize {
        self.log.lock().expect("audit log poisoned").len()
    }

    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: Denoiser> Denoiser for CallAudit<D> {
    fn denoise(&self, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<DenoisedPair> {
        self.log.lock().expect("audit log poisoned").push(CallRecord {
            sigma,
            role: cond.map(|c| c.role),
        });
        self.inner.denoise(x_t, sigma, cond)
    }
}
