//! Motion prior distillation.
//!
//! During the early, high-noise steps the backward path is never denoised.
//! Its clean estimate is instead rebuilt from the forward path: the
//! frame-to-frame noise residuals of the forward estimate are transferred
//! onto the flipped latent, anchored so that the rebuilt estimate hits the
//! end keyframe exactly. The forward estimate and the rebuilt one are then
//! fused and the latent takes an Euler step whose drift is anchored on the
//! unconditional estimate. Each step repeats this `k` times, re-noising
//! back to `sigma_t` between repetitions. Later steps hand off to a
//! time-reversal sampler.

use ndarray::{Array4, ArrayView3, Axis};

use crate::denoise::{Denoiser, FrameCondition};
use crate::edm::{apply_cfg, euler_step_uncond_anchor, renoise};
use crate::error::{invalid, Result};
use crate::sampler::{SamplerConfig, StepOutput, TailMode};
use crate::tensor::{frame_residual, temporal_flip, Frame, NoiseSchedule, ResidualStack, RngStream, VideoLatent};

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// `(dx_t - dx0) / sigma`: how the noise changes from frame to frame along
/// the forward path.
pub fn forward_noise_residual(dx_t: &ResidualStack, dx0: &ResidualStack, sigma: f64) -> Result<ResidualStack> {
    check_sigma(sigma)?;
    if dx_t.as_array().dim() != dx0.as_array().dim() {
        return Err(invalid(format!(
            "residual stacks differ: {:?} vs {:?}",
            dx_t.as_array().dim(),
            dx0.as_array().dim()
        )));
    }
    Ok(ResidualStack::new((dx_t.as_array() - dx0.as_array()) / sigma))
}

/// Noise of the flipped path's first frame implied by the end keyframe:
/// `(x'_t[1] - z_end) / sigma`.
pub fn init_backward_eps(x_flipped_frame1: &ArrayView3<f64>, z_end: &Frame, sigma: f64) -> Result<Frame> {
    check_sigma(sigma)?;
    if x_flipped_frame1.dim() != z_end.dim() {
        return Err(invalid("flipped first frame and z_end differ in shape"));
    }
    Ok((x_flipped_frame1 - z_end) / sigma)
}

/// Backward noise by cumulative subtraction of the forward residuals:
/// frame 1 is `eps1`, frame `i` is `eps1 - sum_{m < i} delta[m]`.
pub fn reconstruct_backward_eps(eps1: &Frame, delta_eps_fwd: &ResidualStack) -> Result<VideoLatent> {
    let deltas = delta_eps_fwd.as_array();
    let (m, c, h, w) = deltas.dim();
    if (c, h, w) != eps1.dim() {
        return Err(invalid("eps1 and residual frames differ in shape"));
    }
    let mut out = Array4::zeros((m + 1, c, h, w));
    out.index_axis_mut(Axis(0), 0).assign(eps1);
    for i in 0..m {
        let (done, mut rest) = out.view_mut().split_at(Axis(0), i + 1);
        let mut next = rest.index_axis_mut(Axis(0), 0);
        next.assign(&done.index_axis(Axis(0), i));
        next -= &deltas.index_axis(Axis(0), i);
    }
    VideoLatent::new(out)
}

/// `x'_t - sigma * eps_bwd`, the rebuilt backward clean estimate in flipped
/// frame order. Its first frame is `z_end` when `eps_bwd` starts from
/// [`init_backward_eps`].
pub fn reconstruct_backward_estimate(
    x_flipped: &VideoLatent,
    eps_bwd: &VideoLatent,
    sigma: f64,
) -> Result<VideoLatent> {
    check_sigma(sigma)?;
    x_flipped.ensure_same_shape(eps_bwd, "reconstruct_backward_estimate")?;
    Ok(x_flipped.zip_with(eps_bwd, |x, e| x - sigma * e))
}

/// `(1 - lambda) * x0_fwd + lambda * x0_bwd`.
pub fn fuse_estimates(x0_fwd: &VideoLatent, x0_bwd_flipped_back: &VideoLatent, lambda: f64) -> Result<VideoLatent> {
    x0_fwd.ensure_same_shape(x0_bwd_flipped_back, "fuse_estimates")?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let keep = 1.0 - lambda;
    Ok(x0_fwd.zip_with(x0_bwd_flipped_back, |f, b| keep * f + lambda * b))
}

/// Full reconstruction from the forward latent and its guided estimate,
/// returned flipped back into forward frame order. Its last frame is
/// `z_end`.
pub fn backward_reconstruction(
    x_t: &VideoLatent,
    x0_fwd: &VideoLatent,
    z_end: &Frame,
    sigma: f64,
) -> Result<VideoLatent> {
    x_t.ensure_same_shape(x0_fwd, "backward_reconstruction")?;
    let delta_eps = forward_noise_residual(&frame_residual(x_t)?, &frame_residual(x0_fwd)?, sigma)?;
    let flipped = temporal_flip(x_t);
    let eps1 = init_backward_eps(&flipped.frame(0), z_end, sigma)?;
    let eps_bwd = reconstruct_backward_eps(&eps1, &delta_eps)?;
    let rebuilt = reconstruct_backward_estimate(&flipped, &eps_bwd, sigma)?;
    Ok(temporal_flip(&rebuilt))
}

/// Which steps distill and which sampler takes over afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MpdPhasePlan {
    steps: usize,
    /// Lowest distilling step; `steps + 1` when nothing distills.
    boundary: usize,
    pub tail: TailMode,
}

impl MpdPhasePlan {
    /// Steps `T` down to `max(1, ceil((1 - gamma) * T))` distill when
    /// `gamma > 0`; `gamma = 0` distills nothing.
    pub fn new(steps: usize, gamma: f64, tail: TailMode) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("a plan needs T >= 1"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(invalid(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        let boundary = if gamma == 0.0 {
            steps + 1
        } else {
            // the tolerance absorbs representation error in (1 - gamma) * T
            let edge = ((1.0 - gamma) * steps as f64 - 1e-9).ceil().max(1.0);
            edge as usize
        };
        Ok(Self { steps, boundary, tail })
    }

    pub fn is_distill(&self, t: usize) -> bool {
        t >= self.boundary && t <= self.steps
    }

    /// Distilling steps from `T` downward.
    pub fn distill_steps(&self) -> Vec<usize> {
        (self.boundary..=self.steps).rev().collect()
    }

    pub fn distill_count(&self) -> usize {
        (self.steps + 1).saturating_sub(self.boundary)
    }
}

/// One distillation step from `sigma_t` to `sigma_{t-1}` with `config.k`
/// inner iterations. Only the start condition ever reaches the denoiser.
///
/// Draw order on `rng`: one re-noise of the whole latent after each of the
/// first `k - 1` iterations.
#[allow(clippy::too_many_arguments)]
pub fn mpd_step<D: Denoiser + ?Sized>(
    x_t: &VideoLatent,
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    c_start: &FrameCondition,
    z_end: &Frame,
    config: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<StepOutput> {
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("step {t} outside 1..={}", schedule.steps())));
    }
    if config.k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    let (sigma_t, sigma_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
    let mut x = x_t.clone();
    let mut estimates = None;
    for j in 1..=config.k {
        let pair = denoiser.denoise(&x, sigma_t, Some(c_start))?;
        let x0_c = apply_cfg(&pair, &config.guidance)?;
        let rebuilt = backward_reconstruction(&x, &x0_c, z_end, sigma_t)?;
        let fused = fuse_estimates(&x0_c, &rebuilt, config.lambda)?;
        let stepped = euler_step_uncond_anchor(&x, &fused, &pair.uncond, sigma_t, sigma_prev)?;
        x = if j < config.k {
            renoise(&stepped, sigma_t, sigma_prev, rng)?
        } else {
            stepped
        };
        estimates = Some((x0_c, rebuilt));
    }
    let (forward_x0, rebuilt) = estimates.expect("k >= 1");
    Ok(StepOutput {
        next: x,
        forward_x0,
        backward_x0: Some(rebuilt),
        denoiser_calls: config.k,
    })
}
