//! Forward-only image-to-video sampling and the two time-reversal
//! inbetweening samplers: parallel fusion and sequential alternation.
//!
//! Every step takes `x_t` at `sigma_t` to `x_{t-1}` at `sigma_{t-1}`. A
//! backward branch flips the latent, conditions on the end keyframe (which
//! then sits at frame 1), steps, and flips back.

use serde::{Deserialize, Serialize};

use crate::denoise::{Denoiser, FrameCondition};
use crate::diagnostics::{path_discrepancy_loss, EstimateSnapshots, SnapshotPolicy, StepKind, TraceRecord};
use crate::edm::{apply_cfg, euler_step, renoise, GuidanceSpec};
use crate::error::{invalid, Result};
use crate::mpd::{mpd_step, MpdPhasePlan};
use crate::tensor::{
    build_schedule, lerp_per_frame, temporal_flip, Frame, FrameShape, NoiseSchedule, RngStream, ScheduleParams,
    VideoLatent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SamplerMode {
    #[serde(rename = "forward-only")]
    ForwardOnly,
    #[serde(rename = "parallel")]
    Parallel,
    #[serde(rename = "sequential")]
    Sequential,
    #[serde(rename = "mpd+parallel")]
    MpdParallel,
    #[serde(rename = "mpd+sequential")]
    MpdSequential,
}

impl SamplerMode {
    pub const ALL: [SamplerMode; 5] = [
        SamplerMode::ForwardOnly,
        SamplerMode::Parallel,
        SamplerMode::Sequential,
        SamplerMode::MpdParallel,
        SamplerMode::MpdSequential,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplerMode::ForwardOnly => "forward-only",
            SamplerMode::Parallel => "parallel",
            SamplerMode::Sequential => "sequential",
            SamplerMode::MpdParallel => "mpd+parallel",
            SamplerMode::MpdSequential => "mpd+sequential",
        }
    }

    pub fn is_mpd(self) -> bool {
        matches!(self, SamplerMode::MpdParallel | SamplerMode::MpdSequential)
    }

    /// The time-reversal sampler this mode uses outside distillation.
    pub fn tail(self) -> Option<TailMode> {
        match self {
            SamplerMode::Parallel | SamplerMode::MpdParallel => Some(TailMode::Parallel),
            SamplerMode::Sequential | SamplerMode::MpdSequential => Some(TailMode::Sequential),
            SamplerMode::ForwardOnly => None,
        }
    }
}

impl std::str::FromStr for SamplerMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        SamplerMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown sampler mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    Parallel,
    Sequential,
}

/// Weight of the forward branch in parallel fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSpec {
    Constant(f64),
    /// `alpha_i = (N - i) / (N - 1)` for frame `i = 1..N`: frame 1 takes the
    /// forward branch, frame N the backward branch.
    Ramp,
}

impl Default for AlphaSpec {
    fn default() -> Self {
        AlphaSpec::Constant(0.5)
    }
}

impl AlphaSpec {
    pub fn weights(&self, n: usize) -> Vec<f64> {
        match *self {
            AlphaSpec::Constant(a) => vec![a; n],
            AlphaSpec::Ramp => (0..n).map(|i| (n - 1 - i) as f64 / (n - 1) as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub steps: usize,
    #[serde(default)]
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub alpha: AlphaSpec,
    pub lambda: f64,
    pub k: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl SamplerConfig {
    /// Defaults for a mode: `T = 25`, guidance ramp 1 -> 3, `alpha = 0.5`.
    /// The MPD knobs use the best settings per tail sampler
    /// (`mpd+parallel`: gamma 0.3, k 2, lambda 0.5; `mpd+sequential`:
    /// gamma 0.2, k 3, lambda 1.0); baselines carry the parallel values,
    /// which they ignore.
    pub fn for_mode(mode: SamplerMode) -> Self {
        let (gamma, k, lambda) = match mode {
            SamplerMode::MpdSequential => (0.2, 3, 1.0),
            _ => (0.3, 2, 0.5),
        };
        Self {
            mode,
            steps: 25,
            schedule: ScheduleParams::default(),
            guidance: GuidanceSpec::default(),
            alpha: AlphaSpec::default(),
            lambda,
            k,
            gamma,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if self.k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if let AlphaSpec::Constant(a) = self.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(invalid(format!("alpha must lie in [0, 1], got {a}")));
            }
        }
        self.guidance.weights(2)?;
        Ok(())
    }
}

/// Start and end keyframes. The toy worlds use each frame latent as its own
/// condition, so `z_end` and `c_end` coincide.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframes {
    pub start: Frame,
    pub end: Frame,
}

impl Keyframes {
    pub fn new(start: Frame, end: Frame) -> Result<Self> {
        if start.dim() != end.dim() {
            return Err(invalid("start and end keyframes differ in shape"));
        }
        Ok(Self { start, end })
    }

    pub fn frame_shape(&self) -> FrameShape {
        self.start.dim()
    }

    pub fn c_start(&self) -> FrameCondition {
        FrameCondition::start(self.start.clone())
    }

    pub fn c_end(&self) -> FrameCondition {
        FrameCondition::end(self.end.clone())
    }

    pub fn z_end(&self) -> &Frame {
        &self.end
    }
}

/// Result of one sampler step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next: VideoLatent,
    /// Guided clean estimate of the forward branch.
    pub forward_x0: VideoLatent,
    /// Backward clean estimate in forward frame order, when the step has one.
    pub backward_x0: Option<VideoLatent>,
    pub denoiser_calls: usize,
}

fn guided_estimate<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &VideoLatent,
    sigma: f64,
    cond: Option<&FrameCondition>,
    guidance: &GuidanceSpec,
) -> Result<VideoLatent> {
    let pair = denoiser.denoise(x, sigma, cond)?;
    apply_cfg(&pair, guidance)
}

fn levels(schedule: &NoiseSchedule, t: usize) -> Result<(f64, f64)> {
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("step {t} outside 1..={}", schedule.steps())));
    }
    Ok((schedule.sigma(t), schedule.sigma(t - 1)))
}

/// One guided Euler step of plain image-to-video sampling.
pub fn forward_step<D: Denoiser + ?Sized>(
    x_t: &VideoLatent,
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    c_start: Option<&FrameCondition>,
    guidance: &GuidanceSpec,
) -> Result<StepOutput> {
    let (sigma_t, sigma_prev) = levels(schedule, t)?;
    let x0 = guided_estimate(denoiser, x_t, sigma_t, c_start, guidance)?;
    Ok(StepOutput {
        next: euler_step(x_t, &x0, sigma_t, sigma_prev)?,
        forward_x0: x0,
        backward_x0: None,
        denoiser_calls: 1,
    })
}

/// Plain sampling from `x_T ~ N(0, sigma_T^2 I)` down to `x_0`.
pub fn forward_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    frames: usize,
    shape: FrameShape,
    c_start: Option<&FrameCondition>,
    guidance: &GuidanceSpec,
    rng: &mut RngStream,
) -> Result<VideoLatent> {
    let mut x = rng.normal_latent(frames, shape, schedule.sigma_max())?;
    for t in (1..=schedule.steps()).rev() {
        x = forward_step(&x, denoiser, schedule, t, c_start, guidance)?.next;
    }
    Ok(x)
}

/// Backward branch: flip, guided Euler step conditioned on the end frame,
/// flip back. Returns the stepped latent and the estimate, both in forward
/// frame order.
fn backward_branch<D: Denoiser + ?Sized>(
    x_t: &VideoLatent,
    denoiser: &D,
    sigma_t: f64,
    sigma_prev: f64,
    c_end: &FrameCondition,
    guidance: &GuidanceSpec,
) -> Result<(VideoLatent, VideoLatent)> {
    let flipped = temporal_flip(x_t);
    let x0 = guided_estimate(denoiser, &flipped, sigma_t, Some(c_end), guidance)?;
    let stepped = euler_step(&flipped, &x0, sigma_t, sigma_prev)?;
    Ok((temporal_flip(&stepped), temporal_flip(&x0)))
}

/// Parallel fusion: independent forward and backward Euler steps from the
/// same `x_t`, blended frame-wise with `alpha` on the forward branch.
pub fn trf_step<D: Denoiser + ?Sized>(
    x_t: &VideoLatent,
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    c_start: &FrameCondition,
    c_end: &FrameCondition,
    config: &SamplerConfig,
) -> Result<StepOutput> {
    let (sigma_t, sigma_prev) = levels(schedule, t)?;
    let fwd_x0 = guided_estimate(denoiser, x_t, sigma_t, Some(c_start), &config.guidance)?;
    let fwd = euler_step(x_t, &fwd_x0, sigma_t, sigma_prev)?;
    let (bwd, bwd_x0) = backward_branch(x_t, denoiser, sigma_t, sigma_prev, c_end, &config.guidance)?;
    let alpha = config.alpha.weights(x_t.num_frames());
    Ok(StepOutput {
        next: lerp_per_frame(&fwd, &bwd, &alpha)?,
        forward_x0: fwd_x0,
        backward_x0: Some(bwd_x0),
        denoiser_calls: 2,
    })
}

/// Sequential alternation: forward Euler step, re-noise back to `sigma_t`,
/// then a backward Euler step on the flipped latent.
///
/// Draw order on `rng`: the re-noise draws only (the Euler steps are
/// deterministic), in frame-major element order.
#[allow(clippy::too_many_arguments)]
pub fn vibid_step<D: Denoiser + ?Sized>(
    x_t: &VideoLatent,
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    c_start: &FrameCondition,
    c_end: &FrameCondition,
    config: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<StepOutput> {
    vibid_step_inner(x_t, denoiser, schedule, t, c_start, c_end, config, Some(rng))
}

/// `rng = None` skips the re-noise, leaving the latent at `sigma_{t-1}`
/// while the backward branch still treats it as `sigma_t`. Test use only.
#[allow(clippy::too_many_arguments)]
pub(crate) fn vibid_step_inner<D: Denoiser + ?Sized>(
    x_t: &VideoLatent,
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    c_start: &FrameCondition,
    c_end: &FrameCondition,
    config: &SamplerConfig,
    rng: Option<&mut RngStream>,
) -> Result<StepOutput> {
    let (sigma_t, sigma_prev) = levels(schedule, t)?;
    let fwd_x0 = guided_estimate(denoiser, x_t, sigma_t, Some(c_start), &config.guidance)?;
    let fwd = euler_step(x_t, &fwd_x0, sigma_t, sigma_prev)?;
    let renoised = match rng {
        Some(rng) => renoise(&fwd, sigma_t, sigma_prev, rng)?,
        None => fwd,
    };
    let (next, bwd_x0) = backward_branch(&renoised, denoiser, sigma_t, sigma_prev, c_end, &config.guidance)?;
    Ok(StepOutput {
        next,
        forward_x0: fwd_x0,
        backward_x0: Some(bwd_x0),
        denoiser_calls: 2,
    })
}

/// Final video and per-step trace of one sampler run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub video: VideoLatent,
    pub trace: Vec<TraceRecord>,
}

impl SampleRun {
    pub fn total_calls(&self) -> usize {
        self.trace.iter().map(|r| r.denoiser_calls).sum()
    }
}

/// Runs the sampler selected by `config.mode` from a fresh `x_T` drawn from
/// `RngStream::new(config.seed)`.
pub fn run_sampler<D: Denoiser + ?Sized>(
    denoiser: &D,
    frames: usize,
    keyframes: &Keyframes,
    config: &SamplerConfig,
    snapshots: SnapshotPolicy,
) -> Result<SampleRun> {
    config.validate()?;
    let schedule = build_schedule(config.steps, config.schedule)?;
    let mut rng = RngStream::new(config.seed);
    let x_init = rng.normal_latent(frames, keyframes.frame_shape(), schedule.sigma_max())?;
    run_from(denoiser, &schedule, x_init, keyframes, config, snapshots, &mut rng)
}

/// Same as [`run_sampler`] from a caller-provided `x_T` and stream.
pub fn run_from<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x_init: VideoLatent,
    keyframes: &Keyframes,
    config: &SamplerConfig,
    snapshots: SnapshotPolicy,
    rng: &mut RngStream,
) -> Result<SampleRun> {
    config.validate()?;
    if x_init.frame_shape() != keyframes.frame_shape() {
        return Err(invalid("initial latent and keyframes differ in frame shape"));
    }
    let c_start = keyframes.c_start();
    let c_end = keyframes.c_end();
    let plan = match config.mode.tail() {
        Some(tail) if config.mode.is_mpd() => Some(MpdPhasePlan::new(schedule.steps(), config.gamma, tail)?),
        _ => None,
    };
    let mut x = x_init;
    let mut trace = Vec::with_capacity(schedule.steps());
    for t in (1..=schedule.steps()).rev() {
        let (kind, out) = match (config.mode, &plan) {
            (SamplerMode::ForwardOnly, _) => (
                StepKind::Forward,
                forward_step(&x, denoiser, schedule, t, Some(&c_start), &config.guidance)?,
            ),
            (_, Some(plan)) if plan.is_distill(t) => (
                StepKind::Distill,
                mpd_step(&x, denoiser, schedule, t, &c_start, keyframes.z_end(), config, rng)?,
            ),
            _ => match config.mode.tail() {
                Some(TailMode::Parallel) => (
                    StepKind::Parallel,
                    trf_step(&x, denoiser, schedule, t, &c_start, &c_end, config)?,
                ),
                _ => (
                    StepKind::Sequential,
                    vibid_step(&x, denoiser, schedule, t, &c_start, &c_end, config, rng)?,
                ),
            },
        };
        let sigma = schedule.sigma(t);
        let discrepancy_loss = match &out.backward_x0 {
            Some(b) => path_discrepancy_loss(&out.forward_x0, b, sigma)?,
            None => 0.0,
        };
        trace.push(TraceRecord {
            step: t,
            sigma,
            kind,
            discrepancy_loss,
            denoiser_calls: out.denoiser_calls,
            snapshots: snapshots.records(t).then(|| EstimateSnapshots {
                forward: out.forward_x0.clone(),
                backward: out.backward_x0.clone(),
            }),
        });
        x = out.next;
    }
    Ok(SampleRun { video: x, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{CallAudit, ConditionRole, GaussianDenoiser, GaussianWorldSpec};
    use ndarray::Array3;

    fn gaussian(shape: FrameShape, mu: f64, sigma_d: f64) -> GaussianDenoiser {
        GaussianDenoiser::new(GaussianWorldSpec::new(Array3::from_elem(shape, mu), sigma_d).unwrap())
    }

    fn keyframes(shape: FrameShape, a: f64, b: f64) -> Keyframes {
        Keyframes::new(Array3::from_elem(shape, a), Array3::from_elem(shape, b)).unwrap()
    }

    fn config(mode: SamplerMode, steps: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            steps,
            seed,
            ..SamplerConfig::for_mode(mode)
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in SamplerMode::ALL {
            assert_eq!(m.as_str().parse::<SamplerMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("mpd".parse::<SamplerMode>().is_err());
    }

    #[test]
    fn defaults_per_mode() {
        let s = SamplerConfig::for_mode(SamplerMode::MpdSequential);
        assert_eq!((s.gamma, s.k, s.lambda), (0.2, 3, 1.0));
        let p = SamplerConfig::for_mode(SamplerMode::MpdParallel);
        assert_eq!((p.gamma, p.k, p.lambda), (0.3, 2, 0.5));
        assert_eq!(p.alpha, AlphaSpec::Constant(0.5));
        assert_eq!(p.steps, 25);
    }

    #[test]
    fn config_validation() {
        let ok = SamplerConfig::for_mode(SamplerMode::Parallel);
        assert!(ok.validate().is_ok());
        assert!(SamplerConfig { k: 0, ..ok.clone() }.validate().is_err());
        assert!(SamplerConfig { steps: 0, ..ok.clone() }.validate().is_err());
        assert!(SamplerConfig {
            gamma: 1.1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            lambda: -0.1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            alpha: AlphaSpec::Constant(2.0),
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn alpha_ramp_weights() {
        assert_eq!(AlphaSpec::Ramp.weights(3), [1.0, 0.5, 0.0]);
        assert_eq!(AlphaSpec::Ramp.weights(2), [1.0, 0.0]);
    }

    #[test]
    fn single_step_forward_is_the_conditional_posterior_mean() {
        let shape = (1, 2, 2);
        let d = gaussian(shape, 0.0, 1.0);
        let sched = build_schedule(1, ScheduleParams::default()).unwrap();
        let cond = FrameCondition::start(Array3::from_elem(shape, 2.0));
        let guidance = GuidanceSpec::Scalar(0.0);
        let mut rng = RngStream::new(4);
        let out = forward_sample(&d, &sched, 3, shape, Some(&cond), &guidance, &mut rng).unwrap();
        let x_init = RngStream::new(4).normal_latent(3, shape, 700.0).unwrap();
        let expected = d.denoise(&x_init, 700.0, Some(&cond)).unwrap().cond;
        assert_eq!(out, expected);
    }

    #[test]
    fn forward_sample_is_deterministic() {
        let shape = (1, 2, 2);
        let d = gaussian(shape, 0.5, 1.0);
        let sched = build_schedule(10, ScheduleParams::default()).unwrap();
        let run = |seed| {
            forward_sample(
                &d,
                &sched,
                4,
                shape,
                None,
                &GuidanceSpec::default(),
                &mut RngStream::new(seed),
            )
            .unwrap()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn alpha_endpoints_select_a_branch_exactly() {
        let shape = (1, 2, 3);
        let d = gaussian(shape, 0.0, 1.0);
        let sched = build_schedule(5, ScheduleParams::default()).unwrap();
        let kf = keyframes(shape, 1.0, -1.0);
        let x = RngStream::new(1).normal_latent(4, shape, sched.sigma(3)).unwrap();
        let guidance = GuidanceSpec::default();
        let fwd = forward_step(&x, &d, &sched, 3, Some(&kf.c_start()), &guidance)
            .unwrap()
            .next;
        let (bwd, _) = backward_branch(&x, &d, sched.sigma(3), sched.sigma(2), &kf.c_end(), &guidance).unwrap();
        let mut cfg = config(SamplerMode::Parallel, 5, 0);
        cfg.alpha = AlphaSpec::Constant(1.0);
        assert_eq!(
            trf_step(&x, &d, &sched, 3, &kf.c_start(), &kf.c_end(), &cfg)
                .unwrap()
                .next,
            fwd
        );
        cfg.alpha = AlphaSpec::Constant(0.0);
        assert_eq!(
            trf_step(&x, &d, &sched, 3, &kf.c_start(), &kf.c_end(), &cfg)
                .unwrap()
                .next,
            bwd
        );
    }

    #[test]
    fn parallel_step_is_flip_symmetric_for_symmetric_problems() {
        let shape = (1, 2, 2);
        let d = gaussian(shape, 0.3, 1.0);
        let sched = build_schedule(6, ScheduleParams::default()).unwrap();
        let kf = keyframes(shape, 1.5, 1.5);
        let mut cfg = config(SamplerMode::Parallel, 6, 0);
        cfg.guidance = GuidanceSpec::Scalar(2.0);
        // palindromic input
        let half = RngStream::new(3).normal_latent(3, shape, 5.0).unwrap();
        let mut frames: Vec<Frame> = half.frames().map(|f| f.to_owned()).collect();
        frames.extend(frames.clone().into_iter().rev());
        let x = VideoLatent::from_frames(&frames).unwrap();
        let out = trf_step(&x, &d, &sched, 4, &kf.c_start(), &kf.c_end(), &cfg)
            .unwrap()
            .next;
        assert!(out.max_abs_diff(&temporal_flip(&out)) < 1e-9);
    }

    #[test]
    fn sequential_terminal_step_returns_flipped_backward_estimate() {
        let shape = (1, 2, 2);
        let d = gaussian(shape, 0.0, 1.0);
        let sched = build_schedule(4, ScheduleParams::default()).unwrap();
        let kf = keyframes(shape, 1.0, 2.0);
        let cfg = config(SamplerMode::Sequential, 4, 0);
        let x = RngStream::new(8).normal_latent(3, shape, sched.sigma(1)).unwrap();
        let mut rng = RngStream::new(9);
        let out = vibid_step(&x, &d, &sched, 1, &kf.c_start(), &kf.c_end(), &cfg, &mut rng).unwrap();
        // replay the composition by hand
        let fwd_x0 = apply_cfg(
            &d.denoise(&x, sched.sigma(1), Some(&kf.c_start())).unwrap(),
            &cfg.guidance,
        )
        .unwrap();
        let renoised = renoise(&fwd_x0, sched.sigma(1), 0.0, &mut RngStream::new(9)).unwrap();
        let flipped = temporal_flip(&renoised);
        let bwd_x0 = apply_cfg(
            &d.denoise(&flipped, sched.sigma(1), Some(&kf.c_end())).unwrap(),
            &cfg.guidance,
        )
        .unwrap();
        assert_eq!(out.next, temporal_flip(&bwd_x0));
        assert_eq!(rng.counter(), x.len() as u64);
    }

    #[test]
    fn sequential_without_renoise_is_two_chained_updates() {
        let shape = (1, 1, 2);
        let d = gaussian(shape, 0.0, 1.0);
        let sched = build_schedule(
            8,
            ScheduleParams {
                sigma_max: 5.0,
                ..ScheduleParams::default()
            },
        )
        .unwrap();
        let kf = keyframes(shape, 0.8, 0.8);
        let cfg = config(SamplerMode::Sequential, 8, 0);
        let x = RngStream::new(2).normal_latent(4, shape, 1.0).unwrap();
        let out = vibid_step_inner(&x, &d, &sched, 5, &kf.c_start(), &kf.c_end(), &cfg, None).unwrap();
        let fwd = forward_step(&x, &d, &sched, 5, Some(&kf.c_start()), &cfg.guidance)
            .unwrap()
            .next;
        let (chained, _) =
            backward_branch(&fwd, &d, sched.sigma(5), sched.sigma(4), &kf.c_end(), &cfg.guidance).unwrap();
        assert_eq!(out.next, chained);
    }

    #[test]
    fn run_sampler_dispatch_and_trace_lengths() {
        let shape = (1, 2, 2);
        let d = gaussian(shape, 0.0, 1.0);
        let kf = keyframes(shape, 1.0, -1.0);
        let fwd = run_sampler(&d, 4, &kf, &config(SamplerMode::ForwardOnly, 7, 3), SnapshotPolicy::Off).unwrap();
        let sched = build_schedule(7, ScheduleParams::default()).unwrap();
        let direct = forward_sample(
            &d,
            &sched,
            4,
            shape,
            Some(&kf.c_start()),
            &GuidanceSpec::default(),
            &mut RngStream::new(3),
        )
        .unwrap();
        assert_eq!(fwd.video, direct);
        assert_eq!(fwd.trace.len(), 7);
        assert!(fwd
            .trace
            .iter()
            .all(|r| r.discrepancy_loss == 0.0 && r.denoiser_calls == 1));

        let mut par_cfg = config(SamplerMode::Parallel, 7, 3);
        par_cfg.alpha = AlphaSpec::Constant(1.0);
        let par = run_sampler(&d, 4, &kf, &par_cfg, SnapshotPolicy::Off).unwrap();
        assert_eq!(par.video, fwd.video);
        assert_eq!(par.trace.len(), 7);
        let seq = run_sampler(&d, 4, &kf, &config(SamplerMode::Sequential, 7, 3), SnapshotPolicy::Off).unwrap();
        assert_eq!(seq.trace.len(), 7);
        assert_eq!(
            seq.trace.iter().map(|r| r.step).collect::<Vec<_>>(),
            [7, 6, 5, 4, 3, 2, 1]
        );
    }

    #[test]
    fn baselines_make_two_calls_per_step_one_per_branch() {
        let shape = (1, 2, 2);
        let kf = keyframes(shape, 1.0, -1.0);
        for mode in [SamplerMode::Parallel, SamplerMode::Sequential] {
            let audit = CallAudit::new(gaussian(shape, 0.0, 1.0));
            let run = run_sampler(&audit, 3, &kf, &config(mode, 6, 1), SnapshotPolicy::Off).unwrap();
            let calls = audit.calls();
            assert_eq!(calls.len(), 12);
            assert_eq!(run.total_calls(), 12);
            for pair in calls.chunks(2) {
                assert_eq!(pair[0].role, Some(ConditionRole::Start));
                assert_eq!(pair[1].role, Some(ConditionRole::End));
                assert_eq!(pair[0].sigma, pair[1].sigma);
            }
        }
    }

    #[test]
    fn snapshots_follow_the_policy() {
        let shape = (1, 2, 2);
        let d = gaussian(shape, 0.0, 1.0);
        let kf = keyframes(shape, 1.0, -1.0);
        let run = run_sampler(
            &d,
            3,
            &kf,
            &config(SamplerMode::Parallel, 6, 1),
            SnapshotPolicy::Range { first: 4, last: 3 },
        )
        .unwrap();
        let recorded: Vec<usize> = run
            .trace
            .iter()
            .filter(|r| r.snapshots.is_some())
            .map(|r| r.step)
            .collect();
        assert_eq!(recorded, [4, 3]);
        let snap = run.trace[2].snapshots.as_ref().unwrap();
        let loss = path_discrepancy_loss(&snap.forward, snap.backward.as_ref().unwrap(), run.trace[2].sigma).unwrap();
        assert_eq!(loss, run.trace[2].discrepancy_loss);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let shape = (1, 2, 2);
        let d = gaussian(shape, 0.0, 1.0);
        assert!(Keyframes::new(Array3::zeros(shape), Array3::zeros((1, 3, 3))).is_err());
        let sched = build_schedule(3, ScheduleParams::default()).unwrap();
        let x = VideoLatent::zeros(2, shape).unwrap();
        assert!(forward_step(&x, &d, &sched, 0, None, &GuidanceSpec::default()).is_err());
        assert!(forward_step(&x, &d, &sched, 4, None, &GuidanceSpec::default()).is_err());
    }
}
