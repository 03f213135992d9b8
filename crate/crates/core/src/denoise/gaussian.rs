//! Closed-form denoiser for an i.i.d. Gaussian video prior.

use ndarray::{Axis, Zip};

use super::{check_call, Denoiser, FrameCondition};
use crate::edm::DenoisedPair;
use crate::error::{invalid, Result};
use crate::tensor::{Frame, VideoLatent};

/// Every frame is drawn from `N(mu, sigma_d^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWorldSpec {
    pub mu: Frame,
    pub sigma_d: f64,
}

impl GaussianWorldSpec {
    pub fn new(mu: Frame, sigma_d: f64) -> Result<Self> {
        if !(sigma_d > 0.0 && sigma_d.is_finite()) {
            return Err(invalid(format!("sigma_d must be positive, got {sigma_d}")));
        }
        Ok(Self { mu, sigma_d })
    }
}

/// Exact posterior mean `(sigma_d^2 x + sigma^2 mu) / (sigma_d^2 + sigma^2)`.
///
/// The conditional branch pins the prior mean of frame 1 to the condition
/// latent; the remaining frames keep the unconditional posterior mean.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    world: GaussianWorldSpec,
}

impl GaussianDenoiser {
    pub fn new(world: GaussianWorldSpec) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &GaussianWorldSpec {
        &self.world
    }

    fn posterior(&self, x_t: &VideoLatent, sigma: f64, frame_one_mean: Option<&Frame>) -> VideoLatent {
        let prior_var = self.world.sigma_d * self.world.sigma_d;
        let noise_var = sigma * sigma;
        let denom = prior_var + noise_var;
        let mut out = x_t.as_array().clone();
        for (i, mut frame) in out.axis_iter_mut(Axis(0)).enumerate() {
            let mean = match (i, frame_one_mean) {
                (0, Some(m)) => m,
                _ => &self.world.mu,
            };
            Zip::from(&mut frame)
                .and(mean)
                .for_each(|x, &m| *x = (prior_var * *x + noise_var * m) / denom);
        }
        VideoLatent::from_array_unchecked(out)
    }
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<DenoisedPair> {
        check_call(x_t, sigma, cond)?;
        if self.world.mu.dim() != x_t.frame_shape() {
            return Err(invalid("latent frames do not match the world mean shape"));
        }
        let uncond = self.posterior(x_t, sigma, None);
        let cond = match cond {
            Some(c) => self.posterior(x_t, sigma, Some(&c.latent)),
            None => uncond.clone(),
        };
        DenoisedPair::new(uncond, cond)
    }
}
