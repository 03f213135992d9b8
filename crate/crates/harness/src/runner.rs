//! Batch execution of an experiment: every (mode, grid point, seed) run,
//! its on-disk artifacts and the aggregate report.
//!
//! Runs are independent and execute on a pool of `jobs` threads. Results
//! come back in enumeration order, so the report bytes do not depend on
//! scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mpdlab_core::denoise::Denoiser;
use mpdlab_core::diagnostics::{score_video, EstimateSnapshots, QualityReport, StepKind, TraceRecord};
use mpdlab_core::io::{load_latent, save_latent, write_frames_pgm};
use mpdlab_core::sampler::{run_sampler, Keyframes, SampleRun, SamplerConfig, SamplerMode};
use mpdlab_core::tensor::VideoLatent;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GridPoint, WorldConfig};
use crate::error::{usage, HarnessError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Serializable view of one trace entry; `snapshot` tells whether the
/// estimates were written under `snapshots/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub sigma: f64,
    pub kind: StepKind,
    pub discrepancy_loss: f64,
    pub denoiser_calls: usize,
    pub snapshot: bool,
}

impl From<&TraceRecord> for TraceRow {
    fn from(r: &TraceRecord) -> Self {
        Self {
            step: r.step,
            sigma: r.sigma,
            kind: r.kind,
            discrepancy_loss: r.discrepancy_loss,
            denoiser_calls: r.denoiser_calls,
            snapshot: r.snapshots.is_some(),
        }
    }
}

/// Result of one sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub mode: SamplerMode,
    pub point: String,
    pub grid: GridPoint,
    pub seed: u64,
    /// Present for motion worlds.
    pub quality: Option<QualityReport>,
    pub video_mean: f64,
    pub video_variance: f64,
    pub total_calls: usize,
    pub max_discrepancy_loss: f64,
}

impl RunRow {
    /// Named scalar metrics aggregated per cell.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(q) = &self.quality {
            out.extend([
                ("endpoint_mse_start", q.endpoint_mse_start),
                ("endpoint_mse_end", q.endpoint_mse_end),
                ("smoothness", q.smoothness),
                ("direction_consistency", q.direction_consistency),
                ("ghosting_score", q.ghosting_score),
                ("degenerate", if q.degenerate { 1.0 } else { 0.0 }),
            ]);
        }
        out.extend([
            ("video_mean", self.video_mean),
            ("video_variance", self.video_variance),
            ("total_calls", self.total_calls as f64),
            ("max_discrepancy_loss", self.max_discrepancy_loss),
        ]);
        out
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub mode: SamplerMode,
    pub point: String,
    pub runs: usize,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<CellSummary>,
    pub rows: Vec<RunRow>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports always serialize");
        text.push('\n');
        text
    }

    pub fn cell(&self, mode: SamplerMode, point: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.mode == mode && c.point == point)
    }
}

/// One scheduled run.
#[derive(Debug, Clone)]
pub struct Job {
    pub mode: SamplerMode,
    pub point: GridPoint,
    pub seed: u64,
}

impl Job {
    /// `<mode>/<gridpoint>/<seed>` below the output root.
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.mode.as_str())
            .join(self.point.to_string())
            .join(self.seed.to_string())
    }
}

/// Modes × grid points × seeds, in that nesting order.
pub fn jobs(config: &ExperimentConfig, use_sweep: bool) -> Vec<Job> {
    let points = if use_sweep {
        config.grid_points()
    } else {
        vec![GridPoint::default()]
    };
    let mut out = Vec::new();
    for &mode in &config.sampler.modes {
        for point in &points {
            for &seed in &config.seeds {
                out.push(Job {
                    mode,
                    point: *point,
                    seed,
                });
            }
        }
    }
    out
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    denoiser: &'a dyn Denoiser,
    keyframes: Keyframes,
    out: Option<&'a Path>,
}

impl Context<'_> {
    fn run(&self, job: &Job) -> Result<RunRow> {
        let cfg: SamplerConfig = self.config.sampler_config(job.mode, job.seed, &job.point);
        let run = run_sampler(
            self.denoiser,
            self.config.frames(),
            &self.keyframes,
            &cfg,
            self.config.snapshots,
        )?;
        let quality = match &self.config.world {
            WorldConfig::Motion(world) => Some(score_video(
                &run.video,
                world,
                &self.keyframes.start,
                &self.keyframes.end,
            )?),
            WorldConfig::Gaussian(_) => None,
        };
        let (video_mean, video_variance) = moments(&run.video);
        let row = RunRow {
            mode: job.mode,
            point: job.point.to_string(),
            grid: job.point,
            seed: job.seed,
            quality,
            video_mean,
            video_variance,
            total_calls: run.total_calls(),
            max_discrepancy_loss: run.trace.iter().map(|r| r.discrepancy_loss).fold(0.0, f64::max),
        };
        if let Some(root) = self.out {
            write_run(&job.dir(root), &run, &row)?;
        }
        Ok(row)
    }
}

fn moments(x: &VideoLatent) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.as_array().sum() / n;
    let var = x.as_array().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("harness records always serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(format!("writing {}", path.display()), e))
}

fn write_run(dir: &Path, run: &SampleRun, row: &RunRow) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(format!("creating {}", dir.display()), e))?;
    save_latent(&dir.join("video.lat"), &run.video)?;
    write_frames_pgm(&dir.join("frames"), &run.video)?;
    let trace: Vec<TraceRow> = run.trace.iter().map(TraceRow::from).collect();
    write_json(&dir.join(TRACE_FILE), &trace)?;
    write_json(&dir.join(REPORT_FILE), row)?;
    if let Some(q) = &row.quality {
        std::fs::write(dir.join("quality.txt"), q.to_key_value())
            .map_err(|e| HarnessError::io(format!("writing quality for {}", dir.display()), e))?;
    }
    let snaps = dir.join("snapshots");
    for record in &run.trace {
        if let Some(s) = &record.snapshots {
            std::fs::create_dir_all(&snaps).map_err(|e| HarnessError::io("creating snapshot dir", e))?;
            save_latent(&snaps.join(format!("t{:03}_forward.lat", record.step)), &s.forward)?;
            if let Some(b) = &s.backward {
                save_latent(&snaps.join(format!("t{:03}_backward.lat", record.step)), b)?;
            }
        }
    }
    Ok(())
}

/// Rebuilds a run's trace, with snapshots, from its directory.
pub fn load_trace(run_dir: &Path) -> Result<Vec<TraceRecord>> {
    let path = run_dir.join(TRACE_FILE);
    let text =
        std::fs::read_to_string(&path).map_err(|e| HarnessError::io(format!("reading {}", path.display()), e))?;
    let rows: Vec<TraceRow> =
        serde_json::from_str(&text).map_err(|e| usage(format!("{} is not a trace: {e}", path.display())))?;
    let snaps = run_dir.join("snapshots");
    rows.into_iter()
        .map(|row| {
            let snapshots = if row.snapshot {
                let forward = load_latent(&snaps.join(format!("t{:03}_forward.lat", row.step)))?;
                let backward_path = snaps.join(format!("t{:03}_backward.lat", row.step));
                let backward = if backward_path.exists() {
                    Some(load_latent(&backward_path)?)
                } else {
                    None
                };
                Some(EstimateSnapshots { forward, backward })
            } else {
                None
            };
            Ok(TraceRecord {
                step: row.step,
                sigma: row.sigma,
                kind: row.kind,
                discrepancy_loss: row.discrepancy_loss,
                denoiser_calls: row.denoiser_calls,
                snapshots,
            })
        })
        .collect()
}

fn summarize(rows: &[RunRow]) -> Vec<CellSummary> {
    let mut cells: Vec<CellSummary> = Vec::new();
    let mut grouped: Vec<((SamplerMode, String), Vec<&RunRow>)> = Vec::new();
    for row in rows {
        match grouped
            .iter_mut()
            .find(|(key, _)| key.0 == row.mode && key.1 == row.point)
        {
            Some((_, members)) => members.push(row),
            None => grouped.push(((row.mode, row.point.clone()), vec![row])),
        }
    }
    for ((mode, point), members) in grouped {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for row in &members {
            for (name, v) in row.metrics() {
                values.entry(name.to_string()).or_default().push(v);
            }
        }
        cells.push(CellSummary {
            mode,
            point,
            runs: members.len(),
            metrics: values.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect(),
        });
    }
    cells
}

/// Runs `jobs` and returns their rows in order. When `out` is set, each
/// run's artifacts go to `<out>/<mode>/<gridpoint>/<seed>/`.
pub fn execute(
    config: &ExperimentConfig,
    denoiser: &dyn Denoiser,
    jobs: &[Job],
    out: Option<&Path>,
) -> Result<Vec<RunRow>> {
    let context = Context {
        config,
        denoiser,
        keyframes: config.keyframes()?,
        out,
    };
    let threads = config.jobs.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| usage(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| jobs.par_iter().map(|job| context.run(job)).collect())
}

/// Runs every configured job and writes `report.json` plus the canonical
/// config under the output root. `use_sweep` selects between `run`
/// (single default grid point) and `sweep`.
pub fn run_experiment(config: &ExperimentConfig, use_sweep: bool) -> Result<ExperimentReport> {
    config.validate()?;
    let mut warnings = Vec::new();
    match (&config.sweep, use_sweep) {
        (None, true) => return Err(usage("sweep needs a [sweep] section")),
        (Some(_), false) => warnings.push("config has a [sweep] section; `run` ignores it".to_string()),
        _ => {}
    }
    let denoiser = config.denoiser()?;
    let root = config.out_dir();
    std::fs::create_dir_all(&root).map_err(|e| HarnessError::io(format!("creating {}", root.display()), e))?;
    let rows = execute(config, denoiser.as_ref(), &jobs(config, use_sweep), Some(&root))?;
    let report = ExperimentReport {
        cells: summarize(&rows),
        rows,
        warnings,
    };
    std::fs::write(root.join(CONFIG_FILE), config.to_toml()).map_err(|e| HarnessError::io("writing config copy", e))?;
    std::fs::write(root.join(REPORT_FILE), report.to_json()).map_err(|e| HarnessError::io("writing report", e))?;
    Ok(report)
}

/// Aggregates rows produced elsewhere, e.g. by [`execute`].
pub fn report_from_rows(rows: Vec<RunRow>, warnings: Vec<String>) -> ExperimentReport {
    ExperimentReport {
        cells: summarize(&rows),
        rows,
        warnings,
    }
}
