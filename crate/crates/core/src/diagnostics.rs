//! Per-step traces, the path-discrepancy loss, mid-sampling estimate dumps
//! and quality metrics for moving-blob videos.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::denoise::shift::{dot, profile};
use crate::denoise::MotionWorldSpec;
use crate::error::{invalid, Error, Result};
use crate::io::{save_latent, write_frames_pgm};
use crate::tensor::{Frame, VideoLatent};

/// Which update produced a trace entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Forward,
    Parallel,
    Sequential,
    Distill,
}

/// Clean-video estimates captured at one step. `backward` is already
/// flipped back into forward frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSnapshots {
    pub forward: VideoLatent,
    pub backward: Option<VideoLatent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub sigma: f64,
    pub kind: StepKind,
    /// Loss between the forward and flipped-back backward estimates;
    /// 0 for steps without a backward estimate.
    pub discrepancy_loss: f64,
    pub denoiser_calls: usize,
    pub snapshots: Option<EstimateSnapshots>,
}

/// Which steps keep full estimate snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SnapshotPolicy {
    #[default]
    Off,
    All,
    /// Steps `first..=last` (step indices count down from `T`).
    Range {
        first: usize,
        last: usize,
    },
}

impl SnapshotPolicy {
    pub fn records(&self, step: usize) -> bool {
        match *self {
            SnapshotPolicy::Off => false,
            SnapshotPolicy::All => true,
            SnapshotPolicy::Range { first, last } => (first.min(last)..=first.max(last)).contains(&step),
        }
    }
}

/// `|a - b|^2 / sigma^2`, summed over all elements.
pub fn path_discrepancy_loss(a: &VideoLatent, b_flipped_back: &VideoLatent, sigma: f64) -> Result<f64> {
    a.ensure_same_shape(b_flipped_back, "path_discrepancy_loss")?;
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let sq: f64 = a
        .as_array()
        .iter()
        .zip(b_flipped_back.as_array().iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok(sq / (sigma * sigma))
}

/// Step index for a fraction of the schedule, rounding half up.
pub fn mid_step(at_fraction: f64, steps: usize) -> Result<usize> {
    if !(at_fraction > 0.0 && at_fraction < 1.0) {
        return Err(invalid(format!("fraction must lie in (0, 1), got {at_fraction}")));
    }
    Ok(((at_fraction * steps as f64 + 0.5).floor() as usize).clamp(1, steps))
}

/// Writes the forward and flipped-back backward estimates recorded at step
/// `round(at_fraction * T)` into `dir`, as latent dumps and PGM frames.
/// Returns the written latent paths.
pub fn dump_mid_estimates(trace: &[TraceRecord], steps: usize, at_fraction: f64, dir: &Path) -> Result<Vec<PathBuf>> {
    let t = mid_step(at_fraction, steps)?;
    let snap = trace
        .iter()
        .find(|r| r.step == t)
        .and_then(|r| r.snapshots.as_ref())
        .ok_or(Error::NotRecorded(t))?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, x: &VideoLatent| -> Result<()> {
        let stem = format!("mid_t{t:03}_{name}");
        let path = dir.join(format!("{stem}.lat"));
        save_latent(&path, x)?;
        write_frames_pgm(&dir.join(&stem), x)?;
        written.push(path);
        Ok(())
    };
    emit("forward", &snap.forward)?;
    if let Some(b) = &snap.backward {
        emit("backward", b)?;
    }
    Ok(written)
}

/// Desk-scale quality metrics for a generated blob video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub endpoint_mse_start: f64,
    pub endpoint_mse_end: f64,
    pub smoothness: f64,
    pub direction_consistency: f64,
    pub ghosting_score: f64,
    pub degenerate: bool,
}

impl QualityReport {
    /// Flat `key=value` lines in field order.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("endpoint_mse_start", self.endpoint_mse_start),
            ("endpoint_mse_end", self.endpoint_mse_end),
            ("smoothness", self.smoothness),
            ("direction_consistency", self.direction_consistency),
            ("ghosting_score", self.ghosting_score),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        let _ = writeln!(out, "degenerate={}", self.degenerate);
        out
    }
}

/// Frames whose peak is below this fraction of the video peak carry no
/// usable blob position.
const EMPTY_FRAME_RATIO: f64 = 0.1;
const GHOST_THRESHOLD: f64 = 0.5;
const POSITION_REFINE_STEPS: usize = 8;

pub fn score_video(
    video: &VideoLatent,
    world: &MotionWorldSpec,
    z_start: &Frame,
    z_end: &Frame,
) -> Result<QualityReport> {
    if video.frame_shape() != world.frame_shape() {
        return Err(invalid("video does not match the motion world grid"));
    }
    if z_start.dim() != world.frame_shape() || z_end.dim() != world.frame_shape() {
        return Err(invalid("keyframes do not match the motion world grid"));
    }
    let n = video.num_frames();
    let frame_mse = |i: usize, z: &Frame| {
        let f = video.frame(i);
        f.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.len() as f64
    };
    let endpoint_mse_start = frame_mse(0, z_start);
    let endpoint_mse_end = frame_mse(n - 1, z_end);

    let peak = video.as_array().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > 0.0) {
        return Ok(QualityReport {
            endpoint_mse_start,
            endpoint_mse_end,
            smoothness: 0.0,
            direction_consistency: 0.0,
            ghosting_score: 0.0,
            degenerate: true,
        });
    }

    let planes: Vec<ArrayView2<f64>> = video.frames().map(|f| f.index_axis_move(Axis(0), 0)).collect();
    let positions: Vec<Option<[f64; 2]>> = planes
        .iter()
        .map(|p| {
            let frame_peak = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (frame_peak >= EMPTY_FRAME_RATIO * peak).then(|| fit_blob_position(p, world))
        })
        .collect();

    let second_diffs: Vec<f64> = positions
        .windows(3)
        .filter_map(|w| match (w[0], w[1], w[2]) {
            (Some(a), Some(b), Some(c)) => {
                Some((c[0] - 2.0 * b[0] + a[0]).powi(2) + (c[1] - 2.0 * b[1] + a[1]).powi(2))
            }
            _ => None,
        })
        .collect();
    let smoothness = if second_diffs.is_empty() {
        0.0
    } else {
        second_diffs.iter().sum::<f64>() / second_diffs.len() as f64
    };

    let s = fit_blob_position(&z_start.index_axis(Axis(0), 0), world);
    let e = fit_blob_position(&z_end.index_axis(Axis(0), 0), world);
    let travel = [e[0] - s[0], e[1] - s[1]];
    let consistent = positions
        .windows(2)
        .filter(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => (b[0] - a[0]) * travel[0] + (b[1] - a[1]) * travel[1] > 0.0,
            _ => false,
        })
        .count();
    let direction_consistency = consistent as f64 / (n - 1) as f64;

    let threshold = GHOST_THRESHOLD * peak;
    let ghosting_score = planes
        .iter()
        .map(|p| (count_local_maxima(p, threshold) as f64 - 1.0).max(0.0))
        .sum::<f64>()
        / n as f64;

    Ok(QualityReport {
        endpoint_mse_start,
        endpoint_mse_end,
        smoothness,
        direction_consistency,
        ghosting_score,
        degenerate: false,
    })
}

/// Pixels strictly greater than all 8 neighbours and above `threshold`.
pub fn count_local_maxima(plane: &ArrayView2<f64>, threshold: f64) -> usize {
    let (h, w) = plane.dim();
    let mut count = 0;
    for r in 0..h {
        for c in 0..w {
            let v = plane[[r, c]];
            if v <= threshold {
                continue;
            }
            let mut is_max = true;
            'nb: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                        continue;
                    }
                    if plane[[rr as usize, cc as usize]] >= v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                count += 1;
            }
        }
    }
    count
}

/// Position of the single blob that best explains a frame with a free
/// amplitude: integer search on the matched-filter response, then
/// Gauss-Newton on `(amplitude, x, y)`.
pub fn fit_blob_position(plane: &ArrayView2<f64>, world: &MotionWorldSpec) -> [f64; 2] {
    let (h, w) = plane.dim();
    let s = world.blob_sigma;
    let gx_table = Array2::from_shape_fn((w, w), |(q, c)| {
        (-((c as f64 - q as f64).powi(2)) / (2.0 * s * s)).exp()
    });
    let gy_table = Array2::from_shape_fn((h, h), |(q, r)| {
        (-((r as f64 - q as f64).powi(2)) / (2.0 * s * s)).exp()
    });
    let corr = gy_table.dot(plane).dot(&gx_table.t());
    let nx: Vec<f64> = gx_table.outer_iter().map(|g| g.dot(&g)).collect();
    let ny: Vec<f64> = gy_table.outer_iter().map(|g| g.dot(&g)).collect();
    // best amplitude a = c / n gives misfit reduction c^2 / n when c > 0
    let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
    for ((qy, qx), &c) in corr.indexed_iter() {
        let gain = if c > 0.0 { c * c / (nx[qx] * ny[qy]) } else { 0.0 };
        if gain > best.1 {
            best = ([qx as f64, qy as f64], gain);
        }
    }
    let mut p = best.0;
    let misfit = |a: f64, p: [f64; 2]| -> f64 {
        let gx = profile(w, p[0], s);
        let gy = profile(h, p[1], s);
        let mut e = 0.0;
        for (r, row) in plane.outer_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                e += (v - a * gy[r] * gx[c]).powi(2);
            }
        }
        e
    };
    let amplitude = |p: [f64; 2]| -> f64 {
        let gx = profile(w, p[0], s);
        let gy = profile(h, p[1], s);
        let mut inner = 0.0;
        for (row, &wy) in plane.outer_iter().zip(&gy) {
            inner += wy * row.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>();
        }
        (inner / (dot(&gx, &gx) * dot(&gy, &gy))).max(0.0)
    };
    let mut a = amplitude(p);
    let mut current = misfit(a, p);
    for _ in 0..POSITION_REFINE_STEPS {
        let gx = profile(w, p[0], s);
        let gy = profile(h, p[1], s);
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jte = Vector3::<f64>::zeros();
        for (r, row) in plane.outer_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let g = gy[r] * gx[c];
                let j = Vector3::new(
                    g,
                    a * g * (c as f64 - p[0]) / (s * s),
                    a * g * (r as f64 - p[1]) / (s * s),
                );
                jtj += j * j.transpose();
                jte += j * (v - a * g);
            }
        }
        let Some(step) = jtj.try_inverse().map(|inv| inv * jte) else {
            break;
        };
        let (na, np) = (a + step[0], [p[0] + step[1], p[1] + step[2]]);
        let candidate = misfit(na, np);
        if !(candidate < current) || !np.iter().all(|v| v.is_finite()) {
            break;
        }
        (a, p, current) = (na, np, candidate);
    }
    p
}
