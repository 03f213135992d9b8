//! Frame-stacked latents, noise schedules and the frame-wise primitives
//! shared by every sampler.
//!
//! Latents are stored frame-major as `[N, C, H, W]` in `f64`. Values are
//! narrowed to `f32` only when written to disk or sent over the bridge.

use ndarray::{Array3, Array4, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A single latent frame, `[C, H, W]`.
pub type Frame = Array3<f64>;

/// Shape of one frame as `(channels, height, width)`.
pub type FrameShape = (usize, usize, usize);

/// An ordered stack of `N >= 2` latent frames sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    data: Array4<f64>,
}

impl VideoLatent {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.len_of(Axis(0)) < 2 {
            return Err(invalid(format!(
                "a video latent needs at least 2 frames, got {}",
                data.len_of(Axis(0))
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("video latent contains non-finite values"));
        }
        Ok(Self { data })
    }

    /// Stacks frames in order. All frames must share a shape.
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| invalid("cannot build a video from zero frames"))?;
        let shape = first.dim();
        if frames.iter().any(|f| f.dim() != shape) {
            return Err(invalid("frames do not share one shape"));
        }
        let (c, h, w) = shape;
        let mut data = Array4::zeros((frames.len(), c, h, w));
        for (mut dst, src) in data.outer_iter_mut().zip(frames) {
            dst.assign(src);
        }
        Self::new(data)
    }

    /// Repeats one frame `n` times.
    pub fn broadcast_frame(frame: &Frame, n: usize) -> Result<Self> {
        Self::from_frames(&vec![frame.clone(); n])
    }

    pub fn zeros(n: usize, shape: FrameShape) -> Result<Self> {
        let (c, h, w) = shape;
        Self::new(Array4::zeros((n, c, h, w)))
    }

    /// Builds from a closure over flat element index; handy in tests.
    pub fn from_fn(n: usize, shape: FrameShape, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let (c, h, w) = shape;
        let mut i = 0;
        let data = Array4::from_shape_simple_fn((n, c, h, w), || {
            let v = f(i);
            i += 1;
            v
        });
        Self::new(data)
    }

    pub fn num_frames(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn frame_shape(&self) -> FrameShape {
        let (_, c, h, w) = self.data.dim();
        (c, h, w)
    }

    pub fn frame(&self, i: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), i)
    }

    pub fn frames(&self) -> impl Iterator<Item = ArrayView3<'_, f64>> {
        self.data.outer_iter()
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array4<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &VideoLatent) -> bool {
        self.data.dim() == other.data.dim()
    }

    pub(crate) fn ensure_same_shape(&self, other: &VideoLatent, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.data.dim(),
                other.data.dim()
            )))
        }
    }

    /// Elementwise combination of two equally shaped latents. Shapes are
    /// checked in debug builds only; use [`VideoLatent::same_shape`] first.
    pub fn zip_with(&self, other: &VideoLatent, f: impl Fn(f64, f64) -> f64) -> VideoLatent {
        debug_assert!(self.same_shape(other));
        let data = Zip::from(&self.data).and(&other.data).map_collect(|&a, &b| f(a, b));
        VideoLatent { data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VideoLatent {
        VideoLatent {
            data: self.data.mapv(f),
        }
    }

    /// Wraps an array produced by arithmetic on valid latents. Finite inputs
    /// can still overflow, so the check is kept in debug builds only.
    pub(crate) fn from_array_unchecked(data: Array4<f64>) -> VideoLatent {
        debug_assert!(data.len_of(Axis(0)) >= 2);
        VideoLatent { data }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &VideoLatent) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Frame-to-frame differences of a video: `deltas[i] = frame[i+1] - frame[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    deltas: Array4<f64>,
}

impl ResidualStack {
    pub fn new(deltas: Array4<f64>) -> Self {
        Self { deltas }
    }

    pub fn len(&self) -> usize {
        self.deltas.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn delta(&self, i: usize) -> ArrayView3<'_, f64> {
        self.deltas.index_axis(Axis(0), i)
    }

    pub fn as_array(&self) -> &Array4<f64> {
        &self.deltas
    }
}

/// Reverses frame order: output frame `i` is input frame `N - 1 - i`.
pub fn temporal_flip(x: &VideoLatent) -> VideoLatent {
    let mut data = x.data.clone();
    data.invert_axis(Axis(0));
    VideoLatent {
        data: data.as_standard_layout().into_owned(),
    }
}

pub fn frame_residual(x: &VideoLatent) -> Result<ResidualStack> {
    let n = x.num_frames();
    if n < 2 {
        return Err(invalid("frame residuals need at least 2 frames"));
    }
    let data = x.as_array();
    let later = data.slice(ndarray::s![1.., .., .., ..]);
    let earlier = data.slice(ndarray::s![..n - 1, .., .., ..]);
    Ok(ResidualStack::new(&later - &earlier))
}

/// `weight * a + (1 - weight) * b`, elementwise.
///
/// Callers document which operand carries `weight`; the parallel fusion step
/// puts it on the forward branch and motion distillation on the
/// reconstructed estimate.
pub fn lerp(a: &VideoLatent, b: &VideoLatent, weight: f64) -> Result<VideoLatent> {
    a.ensure_same_shape(b, "lerp")?;
    if !(0.0..=1.0).contains(&weight) {
        return Err(invalid(format!("lerp weight {weight} outside [0, 1]")));
    }
    let rest = 1.0 - weight;
    Ok(a.zip_with(b, |p, q| weight * p + rest * q))
}

/// Frame-wise [`lerp`] with one weight per frame.
pub fn lerp_per_frame(a: &VideoLatent, b: &VideoLatent, weights: &[f64]) -> Result<VideoLatent> {
    a.ensure_same_shape(b, "lerp")?;
    if weights.len() != a.num_frames() {
        return Err(invalid(format!(
            "expected {} per-frame weights, got {}",
            a.num_frames(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(invalid("per-frame lerp weights must lie in [0, 1]"));
    }
    let mut data = a.data.clone();
    for ((mut out, fb), &w) in data.outer_iter_mut().zip(b.data.outer_iter()).zip(weights) {
        let rest = 1.0 - w;
        Zip::from(&mut out).and(&fb).for_each(|p, &q| *p = w * *p + rest * q);
    }
    Ok(VideoLatent { data })
}

/// Parameters of the Karras/EDM rho-spaced noise grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 700.0,
            rho: 7.0,
        }
    }
}

/// Strictly decreasing noise levels `sigma_T, ..., sigma_1, 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// All `T + 1` levels, largest first.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// `sigma_t` for a step `t` in `1..=T`; `sigma(0)` is the terminal zero.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.steps() - t]
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }

    /// Builds a schedule from explicit levels, checking the invariants.
    pub fn from_sigmas(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.len() < 2 {
            return Err(invalid("a schedule needs at least one step"));
        }
        if *sigmas.last().unwrap() != 0.0 {
            return Err(invalid("the terminal noise level must be exactly 0"));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(invalid("noise levels must be strictly decreasing"));
        }
        Ok(Self { sigmas })
    }
}

pub fn build_schedule(steps: usize, params: ScheduleParams) -> Result<NoiseSchedule> {
    let ScheduleParams {
        sigma_min,
        sigma_max,
        rho,
    } = params;
    if steps == 0 {
        return Err(invalid("schedule needs T >= 1"));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
        return Err(invalid(format!(
            "need 0 < sigma_min < sigma_max, got {sigma_min} and {sigma_max}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(invalid(format!("rho must be positive, got {rho}")));
    }
    let mut sigmas = Vec::with_capacity(steps + 1);
    if steps == 1 {
        sigmas.push(sigma_max);
    } else {
        let hi = sigma_max.powf(1.0 / rho);
        let lo = sigma_min.powf(1.0 / rho);
        let denom = (steps - 1) as f64;
        for j in 0..steps {
            let ramp = j as f64 / denom;
            sigmas.push((hi + ramp * (lo - hi)).powf(rho));
        }
        // pin the endpoints so rounding in powf cannot move them
        sigmas[0] = sigma_max;
        sigmas[steps - 1] = sigma_min;
    }
    sigmas.push(0.0);
    NoiseSchedule::from_sigmas(sigmas)
}

/// Seeded source of standard normal draws.
///
/// Backed by ChaCha20; `(seed, stream)` fully determines the sequence, and
/// distinct stream ids give disjoint sequences for concurrent runs.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Stream for run `stream` of an experiment seeded with `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            stream,
            counter: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of normals drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.counter += 1;
        self.rng.sample(StandardNormal)
    }

    /// A latent of i.i.d. `N(0, scale^2)` draws, frame-major order.
    pub fn normal_latent(&mut self, n: usize, shape: FrameShape, scale: f64) -> Result<VideoLatent> {
        let (c, h, w) = shape;
        let data = Array4::from_shape_simple_fn((n, c, h, w), || scale * self.standard_normal());
        VideoLatent::new(data)
    }
}
