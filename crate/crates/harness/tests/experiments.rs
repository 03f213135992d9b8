//! Experiment runs, sweeps and the conflict benchmark through the library
//! entry points.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::thread;

use mpdlab_core::denoise::bridge::{BridgeEndpoint, BridgeOp, BridgeRequest, BridgeResponse};
use mpdlab_core::denoise::{Denoiser, GaussianDenoiser, GaussianWorldSpec};
use mpdlab_core::diagnostics::{dump_mid_estimates, SnapshotPolicy};
use mpdlab_core::io::load_latent;
use mpdlab_core::sampler::SamplerMode;
use mpdlab_harness::bench::conflict_benchmark;
use mpdlab_harness::runner::{load_trace, run_experiment, REPORT_FILE};
use mpdlab_harness::ExperimentConfig;
use ndarray::Array3;

fn gaussian_config(out: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = [0]
out = "{}"

[world.gaussian]
frames = 6
shape = [1, 3, 3]
mu = 0.25
sigma_d = 0.8

[keyframes]
start = [1.0]
end = [-1.0]

[sampler]
modes = ["forward-only"]
steps = 12
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn motion_config(out: &Path, seeds: &str, beta: f64) -> ExperimentConfig {
    let text = format!(
        r#"
seeds = {seeds}
out = "{}"
jobs = 3

[world.motion]
height = 16
width = 16
blob_sigma = 1.5
frames = 9
bias_velocity = [1.0, 0.0]
bias_strength = {beta}

[keyframes]
start = [13.0, 8.0]
end = [3.0, 8.0]

[sampler]
modes = ["sequential", "mpd+sequential"]
steps = 10

[sweep]
gamma = [0.2, 0.6, 1.0]
k = [1, 2]
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

#[test]
fn smallest_run_writes_one_row_and_frames() {
    let dir = tempfile::tempdir().unwrap();
    let config = gaussian_config(dir.path());
    let report = run_experiment(&config, false).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.cells.len(), 1);
    assert!(report.rows[0].quality.is_none());
    assert_eq!(report.rows[0].total_calls, 12);
    let run = dir.path().join("forward-only/default/0");
    for f in [
        "video.lat",
        "trace.json",
        "report.json",
        "frames/frame_000.pgm",
        "frames/frame_005.pgm",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert_eq!(load_latent(&run.join("video.lat")).unwrap().num_frames(), 6);
    assert!(dir.path().join(REPORT_FILE).is_file());
    let again = ExperimentConfig::from_toml(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!(again, config);
}

#[test]
fn sweep_rows_cover_the_full_product() {
    let dir = tempfile::tempdir().unwrap();
    let config = motion_config(dir.path(), "[4, 5]", 2.0);
    let report = run_experiment(&config, true).unwrap();
    // 3 gammas x 2 ks x 2 modes x 2 seeds
    assert_eq!(report.rows.len(), 3 * 2 * 2 * 2);
    assert_eq!(report.cells.len(), 3 * 2 * 2);
    assert!(report.cells.iter().all(|c| c.runs == 2));
    let cell = report.cell(SamplerMode::MpdSequential, "gamma=0.6_k=2").unwrap();
    assert!(cell.metrics.contains_key("direction_consistency"));
    assert!(dir.path().join("mpd+sequential/gamma=0.6_k=2/5/trace.json").is_file());
    // baselines ignore the MPD knobs
    let base: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.mode == SamplerMode::Sequential)
        .collect();
    assert!(base.iter().all(|r| r.quality == base[r.seed as usize - 4].quality));
}

#[test]
fn reports_are_byte_identical_across_reruns_and_job_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut config = motion_config(a.path(), "[0, 1, 2]", 2.0);
    run_experiment(&config, true).unwrap();
    config.out = Some(b.path().to_owned());
    config.jobs = Some(1);
    run_experiment(&config, true).unwrap();
    let read = |p: &Path| std::fs::read(p.join(REPORT_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn run_ignores_the_sweep_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let config = motion_config(dir.path(), "[0]", 2.0);
    let report = run_experiment(&config, false).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.warnings.len(), 1);
    assert!(run_experiment(&gaussian_config(dir.path()), true).is_err());
}

#[test]
fn mid_estimates_round_trip_through_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = motion_config(dir.path(), "[3]", 2.0);
    config.snapshots = SnapshotPolicy::Range { first: 6, last: 4 };
    config.sweep = None;
    run_experiment(&config, false).unwrap();
    let run = dir.path().join("mpd+sequential/default/3");
    let trace = load_trace(&run).unwrap();
    assert_eq!(trace.len(), 10);
    assert_eq!(trace.iter().filter(|r| r.snapshots.is_some()).count(), 3);
    let written = dump_mid_estimates(&trace, trace.len(), 0.5, &run.join("mid")).unwrap();
    assert_eq!(written.len(), 2);
    assert!(run.join("mid/mid_t005_backward/frame_008.pgm").is_file());
    assert!(dump_mid_estimates(&trace, trace.len(), 0.2, &run.join("mid")).is_err());
}

#[test]
fn benchmark_reports_four_modes_and_two_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let config = motion_config(dir.path(), "[0, 1, 2, 3]", 2.0);
    let report = conflict_benchmark(&config, true).unwrap();
    assert_eq!(report.modes.len(), 4);
    assert_eq!(report.rows.len(), 16);
    assert_eq!(report.comparisons.len(), 2);
    assert!(report.comparisons.iter().all(|c| c.seeds == 4));
    assert_eq!(report.warnings, ["the conflict benchmark ignores [sweep]"]);
    assert!(dir.path().join("bench.json").is_file());
    assert!(report.table().lines().count() >= 7);
}

#[test]
fn benchmark_warns_on_an_unbiased_world_and_needs_motion() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = motion_config(dir.path(), "[0]", 0.0);
    config.sweep = None;
    let report = conflict_benchmark(&config, false).unwrap();
    assert!(report.warnings[0].contains("degenerate"));
    assert!(!dir.path().join("bench.json").exists());
    let err = conflict_benchmark(&gaussian_config(dir.path()), false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

/// Minimal TCP backend serving the analytic Gaussian world until shutdown.
fn serve_gaussian(denoiser: GaussianDenoiser) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let request: BridgeRequest = serde_json::from_str(&line.unwrap()).unwrap();
            let response = match request.op {
                BridgeOp::Denoise => {
                    let (x, sigma, cond) = request.decode_inputs().unwrap();
                    BridgeResponse::denoised(request.id, &denoiser.denoise(&x, sigma, cond.as_ref()).unwrap())
                }
                _ => BridgeResponse::ok(request.id),
            };
            writeln!(writer, "{}", serde_json::to_string(&response).unwrap()).unwrap();
            if request.op == BridgeOp::Shutdown {
                break;
            }
        }
    });
    addr
}

#[test]
fn bridge_backed_run_matches_in_process_run() {
    let local_dir = tempfile::tempdir().unwrap();
    let remote_dir = tempfile::tempdir().unwrap();
    let local = gaussian_config(local_dir.path());
    let local_report = run_experiment(&local, false).unwrap();

    let mu = Array3::from_elem((1, 3, 3), 0.25);
    let addr = serve_gaussian(GaussianDenoiser::new(GaussianWorldSpec::new(mu, 0.8).unwrap()));
    let mut remote = gaussian_config(remote_dir.path());
    remote.bridge = Some(BridgeEndpoint::Tcp(addr));
    let remote_report = run_experiment(&remote, false).unwrap();

    let a = load_latent(&local_dir.path().join("forward-only/default/0/video.lat")).unwrap();
    let b = load_latent(&remote_dir.path().join("forward-only/default/0/video.lat")).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
    let (ra, rb) = (&local_report.rows[0], &remote_report.rows[0]);
    assert!((ra.video_mean - rb.video_mean).abs() <= 1e-5);
    assert_eq!(ra.total_calls, rb.total_calls);
}
