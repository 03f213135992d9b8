//! Whole-run properties of the samplers: degenerate-knob equivalences, call
//! accounting, flip covariance and a hand-chained distillation step.

use mpdlab_core::denoise::{
    CallAudit, ConditionRole, Denoiser, GaussianDenoiser, GaussianWorldSpec, MotionWorldSpec, ShiftWorldDenoiser,
};
use mpdlab_core::diagnostics::{path_discrepancy_loss, SnapshotPolicy, StepKind};
use mpdlab_core::edm::{apply_cfg, euler_step_uncond_anchor, renoise};
use mpdlab_core::mpd::{
    forward_noise_residual, fuse_estimates, init_backward_eps, mpd_step, reconstruct_backward_eps,
    reconstruct_backward_estimate, MpdPhasePlan,
};
use mpdlab_core::sampler::{run_from, run_sampler, AlphaSpec, Keyframes, SamplerConfig, SamplerMode, TailMode};
use mpdlab_core::tensor::{build_schedule, frame_residual, temporal_flip, RngStream};
use ndarray::Array3;

fn gaussian() -> GaussianDenoiser {
    let mu = Array3::from_shape_fn((1, 3, 4), |(_, h, w)| 0.3 * h as f64 - 0.2 * w as f64);
    GaussianDenoiser::new(GaussianWorldSpec::new(mu, 0.7).unwrap())
}

fn gaussian_keyframes() -> Keyframes {
    Keyframes::new(
        Array3::from_elem((1, 3, 4), 1.5),
        Array3::from_shape_fn((1, 3, 4), |(_, h, _)| -(h as f64)),
    )
    .unwrap()
}

fn small_world(beta: f64) -> MotionWorldSpec {
    MotionWorldSpec {
        height: 12,
        width: 16,
        blob_sigma: 1.5,
        frames: 7,
        bias_strength: beta,
        ..MotionWorldSpec::default()
    }
}

fn world_keyframes(world: &MotionWorldSpec) -> Keyframes {
    Keyframes::new(world.render([3.0, 6.0]), world.render([12.0, 5.0])).unwrap()
}

fn config(mode: SamplerMode, steps: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps,
        seed,
        ..SamplerConfig::for_mode(mode)
    }
}

#[test]
fn zero_gamma_distillation_is_the_baseline() {
    let world = small_world(2.0);
    let denoiser = ShiftWorldDenoiser::new(world.clone()).unwrap();
    let keyframes = world_keyframes(&world);
    for (mpd, base) in [
        (SamplerMode::MpdParallel, SamplerMode::Parallel),
        (SamplerMode::MpdSequential, SamplerMode::Sequential),
    ] {
        for seed in 0..3 {
            let a = run_sampler(
                &denoiser,
                7,
                &keyframes,
                &SamplerConfig {
                    gamma: 0.0,
                    ..config(mpd, 10, seed)
                },
                SnapshotPolicy::Off,
            )
            .unwrap();
            let b = run_sampler(&denoiser, 7, &keyframes, &config(base, 10, seed), SnapshotPolicy::Off).unwrap();
            assert_eq!(a.video, b.video, "{mpd:?} seed {seed}");
        }
    }
}

#[test]
fn full_forward_weight_fusion_is_forward_only() {
    let denoiser = gaussian();
    let keyframes = gaussian_keyframes();
    for seed in 0..3 {
        let parallel = SamplerConfig {
            alpha: AlphaSpec::Constant(1.0),
            ..config(SamplerMode::Parallel, 12, seed)
        };
        let a = run_sampler(&denoiser, 6, &keyframes, &parallel, SnapshotPolicy::Off).unwrap();
        let b = run_sampler(
            &denoiser,
            6,
            &keyframes,
            &config(SamplerMode::ForwardOnly, 12, seed),
            SnapshotPolicy::Off,
        )
        .unwrap();
        assert_eq!(a.video, b.video);
    }
}

/// Calls each sampler step should make, by step kind.
fn expected_calls(kind: StepKind, k: usize) -> usize {
    match kind {
        StepKind::Forward => 1,
        StepKind::Parallel | StepKind::Sequential => 2,
        StepKind::Distill => k,
    }
}

#[test]
fn call_audit_over_whole_runs() {
    let world = small_world(2.0);
    let keyframes = world_keyframes(&world);
    for mode in SamplerMode::ALL {
        let audit = CallAudit::new(ShiftWorldDenoiser::new(world.clone()).unwrap());
        let cfg = config(mode, 10, 4);
        let run = run_sampler(&audit, 7, &keyframes, &cfg, SnapshotPolicy::Off).unwrap();
        let calls = audit.calls();
        assert_eq!(calls.len(), run.total_calls(), "{mode:?}");
        let mut cursor = 0;
        for record in &run.trace {
            let n = expected_calls(record.kind, cfg.k);
            assert_eq!(record.denoiser_calls, n, "{mode:?} step {}", record.step);
            let step_calls = &calls[cursor..cursor + n];
            cursor += n;
            assert!(step_calls.iter().all(|c| c.sigma == record.sigma));
            let ends = step_calls.iter().filter(|c| c.role == Some(ConditionRole::End)).count();
            match record.kind {
                StepKind::Forward | StepKind::Distill => assert_eq!(ends, 0, "{mode:?} step {}", record.step),
                StepKind::Parallel | StepKind::Sequential => assert_eq!(ends, 1),
            }
            assert!(step_calls.iter().all(|c| c.role.is_some()));
        }
        if let Some(tail) = mode.tail().filter(|_| mode.is_mpd()) {
            let plan = MpdPhasePlan::new(10, cfg.gamma, tail).unwrap();
            let distilled = run.trace.iter().filter(|r| r.kind == StepKind::Distill).count();
            assert_eq!(distilled, plan.distill_count());
        }
    }
}

#[test]
fn trace_loss_matches_recorded_estimates() {
    let world = small_world(2.0);
    let denoiser = ShiftWorldDenoiser::new(world.clone()).unwrap();
    let keyframes = world_keyframes(&world);
    let run = run_sampler(
        &denoiser,
        7,
        &keyframes,
        &config(SamplerMode::MpdParallel, 10, 1),
        SnapshotPolicy::All,
    )
    .unwrap();
    for record in &run.trace {
        let snaps = record.snapshots.as_ref().unwrap();
        let backward = snaps.backward.as_ref().unwrap();
        let want = path_discrepancy_loss(&snaps.forward, backward, record.sigma).unwrap();
        assert_eq!(record.discrepancy_loss, want);
    }
}

#[test]
fn parallel_sampler_commutes_with_time_reversal() {
    // swapping keyframes and flipping x_T makes each branch do the other's work
    let cases: Vec<(Box<dyn Denoiser>, Keyframes, usize)> = vec![
        (Box::new(gaussian()), gaussian_keyframes(), 6),
        {
            let w = small_world(0.0);
            let k = world_keyframes(&w);
            (Box::new(ShiftWorldDenoiser::new(w).unwrap()), k, 7)
        },
        {
            let w = small_world(2.0);
            let k = world_keyframes(&w);
            (Box::new(ShiftWorldDenoiser::new(w).unwrap()), k, 7)
        },
    ];
    for (denoiser, keyframes, frames) in cases {
        let cfg = config(SamplerMode::Parallel, 8, 0);
        let schedule = build_schedule(cfg.steps, cfg.schedule).unwrap();
        let x_init = RngStream::new(21)
            .normal_latent(frames, keyframes.frame_shape(), schedule.sigma_max())
            .unwrap();
        let swapped = Keyframes::new(keyframes.end.clone(), keyframes.start.clone()).unwrap();
        let a = run_from(
            denoiser.as_ref(),
            &schedule,
            x_init.clone(),
            &keyframes,
            &cfg,
            SnapshotPolicy::Off,
            &mut RngStream::new(0),
        )
        .unwrap();
        let b = run_from(
            denoiser.as_ref(),
            &schedule,
            temporal_flip(&x_init),
            &swapped,
            &cfg,
            SnapshotPolicy::Off,
            &mut RngStream::new(0),
        )
        .unwrap();
        assert_eq!(temporal_flip(&b.video), a.video);
    }
}

#[test]
fn two_iteration_distillation_step_equals_hand_chained_primitives() {
    let denoiser = gaussian();
    let keyframes = gaussian_keyframes();
    let cfg = SamplerConfig {
        k: 2,
        lambda: 0.5,
        ..config(SamplerMode::MpdParallel, 10, 3)
    };
    let schedule = build_schedule(cfg.steps, cfg.schedule).unwrap();
    let t = 9;
    let (sigma, sigma_prev) = (schedule.sigma(t), schedule.sigma(t - 1));
    let x_t = RngStream::new(40).normal_latent(6, (1, 3, 4), sigma).unwrap();
    let c_start = keyframes.c_start();

    let mut rng = RngStream::new(77);
    let got = mpd_step(
        &x_t,
        &denoiser,
        &schedule,
        t,
        &c_start,
        keyframes.z_end(),
        &cfg,
        &mut rng,
    )
    .unwrap();

    let mut oracle_rng = RngStream::new(77);
    let mut x = x_t.clone();
    for iteration in 0..2 {
        let pair = denoiser.denoise(&x, sigma, Some(&c_start)).unwrap();
        let guided = apply_cfg(&pair, &cfg.guidance).unwrap();
        let eps_delta =
            forward_noise_residual(&frame_residual(&x).unwrap(), &frame_residual(&guided).unwrap(), sigma).unwrap();
        let flipped = temporal_flip(&x);
        let eps1 = init_backward_eps(&flipped.frame(0), keyframes.z_end(), sigma).unwrap();
        let eps_bwd = reconstruct_backward_eps(&eps1, &eps_delta).unwrap();
        let rebuilt = temporal_flip(&reconstruct_backward_estimate(&flipped, &eps_bwd, sigma).unwrap());
        let fused = fuse_estimates(&guided, &rebuilt, cfg.lambda).unwrap();
        x = euler_step_uncond_anchor(&x, &fused, &pair.uncond, sigma, sigma_prev).unwrap();
        if iteration == 0 {
            x = renoise(&x, sigma, sigma_prev, &mut oracle_rng).unwrap();
        }
    }
    assert_eq!(got.next, x);
    assert_eq!(got.denoiser_calls, 2);
    assert_eq!(rng.counter(), oracle_rng.counter());
}

#[test]
fn phase_plan_selects_the_early_steps() {
    let plan = MpdPhasePlan::new(25, 0.2, TailMode::Sequential).unwrap();
    assert_eq!(plan.distill_steps(), vec![25, 24, 23, 22, 21, 20]);
    let plan = MpdPhasePlan::new(25, 0.3, TailMode::Parallel).unwrap();
    assert_eq!(plan.distill_count(), 8);
}
