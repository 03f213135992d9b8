//! EDM sampling primitives: noise/score conversion, classifier-free guidance,
//! Euler steps and re-noising.

use ndarray::{Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{RngStream, VideoLatent};

/// Unconditional and conditional clean-video estimates from one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedPair {
    pub uncond: VideoLatent,
    pub cond: VideoLatent,
}

impl DenoisedPair {
    pub fn new(uncond: VideoLatent, cond: VideoLatent) -> Result<Self> {
        uncond.ensure_same_shape(&cond, "denoised pair")?;
        Ok(Self { uncond, cond })
    }
}

/// Guidance strength `w >= 0`, either shared or one value per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSpec {
    Scalar(f64),
    /// Linear ramp from `first` (frame 1) to `last` (frame N).
    Ramp {
        first: f64,
        last: f64,
    },
    PerFrame(Vec<f64>),
}

impl Default for GuidanceSpec {
    /// Per-frame ramp 1.0 -> 3.0, the usual image-to-video regime.
    fn default() -> Self {
        GuidanceSpec::Ramp { first: 1.0, last: 3.0 }
    }
}

impl GuidanceSpec {
    /// Resolves to one weight per frame for a video of `n` frames.
    pub fn weights(&self, n: usize) -> Result<Vec<f64>> {
        let w = match self {
            GuidanceSpec::Scalar(w) => vec![*w; n],
            GuidanceSpec::Ramp { first, last } => (0..n)
                .map(|i| {
                    let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                    first + t * (last - first)
                })
                .collect(),
            GuidanceSpec::PerFrame(w) => {
                if w.len() != n {
                    return Err(invalid(format!(
                        "per-frame guidance has {} entries for {n} frames",
                        w.len()
                    )));
                }
                w.clone()
            }
        };
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid("guidance strengths must be finite and >= 0"));
        }
        Ok(w)
    }
}

/// Noise and score implied by a clean estimate at level `sigma`:
/// `eps = (x_t - x0) / sigma`, `score = (x0 - x_t) / sigma^2`.
pub fn eps_and_score(x_t: &VideoLatent, x0_hat: &VideoLatent, sigma: f64) -> Result<(VideoLatent, VideoLatent)> {
    x_t.ensure_same_shape(x0_hat, "eps_and_score")?;
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let eps = x_t.zip_with(x0_hat, |x, d| (x - d) / sigma);
    let var = sigma * sigma;
    let score = x_t.zip_with(x0_hat, |x, d| (d - x) / var);
    Ok((eps, score))
}

/// `(1 + w) * cond - w * uncond`, applied frame by frame.
pub fn apply_cfg(pair: &DenoisedPair, guidance: &GuidanceSpec) -> Result<VideoLatent> {
    let weights = guidance.weights(pair.cond.num_frames())?;
    let mut out = pair.cond.as_array().clone();
    for ((mut frame, uncond), &w) in out
        .axis_iter_mut(Axis(0))
        .zip(pair.uncond.as_array().axis_iter(Axis(0)))
        .zip(&weights)
    {
        let lift = 1.0 + w;
        Zip::from(&mut frame)
            .and(&uncond)
            .for_each(|c, &u| *c = lift * *c - w * u);
    }
    Ok(VideoLatent::from_array_unchecked(out))
}

fn check_descent(sigma_t: f64, sigma_prev: f64) -> Result<()> {
    if !(sigma_t > sigma_prev && sigma_prev >= 0.0) {
        return Err(invalid(format!(
            "Euler step needs sigma_t > sigma_prev >= 0, got {sigma_t} -> {sigma_prev}"
        )));
    }
    Ok(())
}

/// Plain Euler step `x0 + (sigma_prev / sigma_t) * (x_t - x0)`.
pub fn euler_step(x_t: &VideoLatent, x0_hat: &VideoLatent, sigma_t: f64, sigma_prev: f64) -> Result<VideoLatent> {
    check_descent(sigma_t, sigma_prev)?;
    x_t.ensure_same_shape(x0_hat, "euler_step")?;
    let ratio = sigma_prev / sigma_t;
    Ok(x0_hat.zip_with(x_t, |d, x| d + ratio * (x - d)))
}

/// Euler step whose drift is anchored on the unconditional estimate:
/// `x0_fused + (sigma_prev / sigma_t) * (x_t - x0_uncond)`.
pub fn euler_step_uncond_anchor(
    x_t: &VideoLatent,
    x0_fused: &VideoLatent,
    x0_uncond: &VideoLatent,
    sigma_t: f64,
    sigma_prev: f64,
) -> Result<VideoLatent> {
    check_descent(sigma_t, sigma_prev)?;
    x_t.ensure_same_shape(x0_fused, "euler_step_uncond_anchor")?;
    x_t.ensure_same_shape(x0_uncond, "euler_step_uncond_anchor")?;
    let ratio = sigma_prev / sigma_t;
    let drift = x_t.zip_with(x0_uncond, |x, u| x - u);
    Ok(x0_fused.zip_with(&drift, |d, r| d + ratio * r))
}

/// Adds fresh noise to raise a latent from `sigma_prev` back to `sigma_t`.
///
/// Always consumes one draw per element, even when the levels coincide, so
/// the stream position does not depend on the schedule.
pub fn renoise(x_prev: &VideoLatent, sigma_t: f64, sigma_prev: f64, rng: &mut RngStream) -> Result<VideoLatent> {
    if !(sigma_t >= sigma_prev && sigma_prev >= 0.0) {
        return Err(invalid(format!(
            "re-noise needs sigma_t >= sigma_prev >= 0, got {sigma_prev} -> {sigma_t}"
        )));
    }
    let scale = (sigma_t * sigma_t - sigma_prev * sigma_prev).sqrt();
    Ok(x_prev.map_with_rng(rng, |x, e| x + scale * e))
}

impl VideoLatent {
    fn map_with_rng(&self, rng: &mut RngStream, f: impl Fn(f64, f64) -> f64) -> VideoLatent {
        let data = self.as_array().mapv(|x| f(x, rng.standard_normal()));
        VideoLatent::from_array_unchecked(data)
    }
}
