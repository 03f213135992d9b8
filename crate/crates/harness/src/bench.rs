//! Motion-conflict benchmark: the two time-reversal baselines and their
//! MPD counterparts on a shift world, paired by seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use mpdlab_core::sampler::SamplerMode;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GridPoint, WorldConfig};
use crate::error::{usage, HarnessError, Result};
use crate::runner::{execute, report_from_rows, Job, RunRow, Stat, CONFIG_FILE};

pub const BENCH_FILE: &str = "bench.json";

/// The benchmarked modes, in report order.
pub const BENCH_MODES: [SamplerMode; 4] = [
    SamplerMode::Parallel,
    SamplerMode::Sequential,
    SamplerMode::MpdParallel,
    SamplerMode::MpdSequential,
];

const PAIRS: [(SamplerMode, SamplerMode); 2] = [
    (SamplerMode::MpdParallel, SamplerMode::Parallel),
    (SamplerMode::MpdSequential, SamplerMode::Sequential),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: SamplerMode,
    pub runs: usize,
    pub metrics: BTreeMap<String, Stat>,
}

/// Paired comparison of an MPD mode against its baseline. Each rate is the
/// fraction of seeds where MPD is strictly better on that metric; `joint`
/// counts seeds with strictly higher direction consistency and ghosting
/// no worse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub mpd: SamplerMode,
    pub baseline: SamplerMode,
    pub seeds: usize,
    pub direction_win_rate: f64,
    pub ghosting_win_rate: f64,
    pub endpoint_mse_end_win_rate: f64,
    pub joint_win_rate: f64,
    /// Mean of `mpd - baseline` direction consistency.
    pub direction_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub modes: Vec<ModeSummary>,
    pub comparisons: Vec<PairComparison>,
    pub rows: Vec<RunRow>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("reports always serialize");
        text.push('\n');
        text
    }

    pub fn comparison(&self, mpd: SamplerMode) -> Option<&PairComparison> {
        self.comparisons.iter().find(|c| c.mpd == mpd)
    }

    /// Plain-text table of per-mode means and the pair win rates.
    pub fn table(&self) -> String {
        let cols = [
            "direction_consistency",
            "ghosting_score",
            "endpoint_mse_end",
            "smoothness",
        ];
        let mut out = format!("{:<16}", "mode");
        for c in cols {
            let _ = write!(out, " {c:>22}");
        }
        out.push('\n');
        for m in &self.modes {
            let _ = write!(out, "{:<16}", m.mode.as_str());
            for c in cols {
                let s = m.metrics[c];
                let _ = write!(out, " {:>22}", format!("{:.4}±{:.4}", s.mean, s.std));
            }
            out.push('\n');
        }
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "{} vs {}: direction {:.2}, ghosting {:.2}, endpoint_mse_end {:.2}, joint {:.2} over {} seeds",
                c.mpd.as_str(),
                c.baseline.as_str(),
                c.direction_win_rate,
                c.ghosting_win_rate,
                c.endpoint_mse_end_win_rate,
                c.joint_win_rate,
                c.seeds
            );
        }
        out
    }
}

fn compare(rows: &[RunRow], mpd: SamplerMode, baseline: SamplerMode) -> PairComparison {
    let by_seed = |mode: SamplerMode| -> BTreeMap<u64, &RunRow> {
        rows.iter().filter(|r| r.mode == mode).map(|r| (r.seed, r)).collect()
    };
    let (ours, theirs) = (by_seed(mpd), by_seed(baseline));
    let mut wins = [0usize; 4];
    let mut delta = 0.0;
    let mut seeds = 0;
    for (seed, a) in &ours {
        let (Some(b), Some(qa)) = (theirs.get(seed), a.quality.as_ref()) else {
            continue;
        };
        let Some(qb) = b.quality.as_ref() else { continue };
        seeds += 1;
        let dir = qa.direction_consistency > qb.direction_consistency;
        let ghost = qa.ghosting_score < qb.ghosting_score;
        let mse = qa.endpoint_mse_end < qb.endpoint_mse_end;
        let joint = dir && qa.ghosting_score <= qb.ghosting_score;
        for (w, hit) in wins.iter_mut().zip([dir, ghost, mse, joint]) {
            *w += hit as usize;
        }
        delta += qa.direction_consistency - qb.direction_consistency;
    }
    let rate = |w: usize| if seeds == 0 { 0.0 } else { w as f64 / seeds as f64 };
    PairComparison {
        mpd,
        baseline,
        seeds,
        direction_win_rate: rate(wins[0]),
        ghosting_win_rate: rate(wins[1]),
        endpoint_mse_end_win_rate: rate(wins[2]),
        joint_win_rate: rate(wins[3]),
        direction_delta: if seeds == 0 { 0.0 } else { delta / seeds as f64 },
    }
}

/// Runs the four benchmark modes over the configured seeds. The config's
/// own mode list and sweep are ignored. When `write` is set, per-run
/// artifacts, `bench.json` and the canonical config go under the output
/// root.
pub fn conflict_benchmark(config: &ExperimentConfig, write: bool) -> Result<BenchReport> {
    let mut config = config.clone();
    config.sampler.modes = BENCH_MODES.to_vec();
    config.validate()?;
    let world = match &config.world {
        WorldConfig::Motion(m) => m.clone(),
        WorldConfig::Gaussian(_) => return Err(usage("the conflict benchmark needs a motion world")),
    };
    let mut warnings = Vec::new();
    if world.bias_strength == 0.0 {
        warnings.push("bias_strength is 0: no prior conflict, the benchmark is degenerate".to_string());
    }
    if config.sweep.take().is_some() {
        warnings.push("the conflict benchmark ignores [sweep]".to_string());
    }
    let travel = [
        config.keyframes.end[0] - config.keyframes.start[0],
        config.keyframes.end[1] - config.keyframes.start[1],
    ];
    if travel[0] * world.bias_velocity[0] + travel[1] * world.bias_velocity[1] > 0.0 {
        warnings.push("keyframe motion runs along the bias direction: no conflict".to_string());
    }

    let denoiser = config.denoiser()?;
    let root = config.out_dir();
    if write {
        std::fs::create_dir_all(&root).map_err(|e| HarnessError::io(format!("creating {}", root.display()), e))?;
    }
    let jobs: Vec<Job> = BENCH_MODES
        .iter()
        .flat_map(|&mode| {
            config.seeds.iter().map(move |&seed| Job {
                mode,
                point: GridPoint::default(),
                seed,
            })
        })
        .collect();
    let rows = execute(&config, denoiser.as_ref(), &jobs, write.then_some(root.as_path()))?;
    let summary = report_from_rows(rows, Vec::new());
    let report = BenchReport {
        modes: summary
            .cells
            .iter()
            .map(|c| ModeSummary {
                mode: c.mode,
                runs: c.runs,
                metrics: c.metrics.clone(),
            })
            .collect(),
        comparisons: PAIRS.iter().map(|&(m, b)| compare(&summary.rows, m, b)).collect(),
        rows: summary.rows,
        warnings,
    };
    if write {
        std::fs::write(root.join(CONFIG_FILE), config.to_toml())
            .map_err(|e| HarnessError::io("writing config copy", e))?;
        std::fs::write(root.join(BENCH_FILE), report.to_json())
            .map_err(|e| HarnessError::io("writing bench report", e))?;
    }
    Ok(report)
}
