//! Moving-blob world with a forward-generation bias.
//!
//! Clean videos are a single unit-height Gaussian blob moving at constant
//! velocity. The denoiser fits `(start, velocity)` to the noisy latent and
//! shrinks toward the rendered fit. A penalty `beta * sigma^2 * |v - bias|^2`
//! pulls the velocity toward a canonical drift; at high noise the drift
//! dominates, mirroring a model that prefers one motion direction in latent
//! time regardless of which keyframe it was given. Only trajectories whose
//! blob centre stays on the grid in every frame are considered.
//!
//! Positions are `[x, y]` in pixel units, `x` along columns and `y` along
//! rows, with pixel centres at integer coordinates.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{check_call, Denoiser, FrameCondition};
use crate::edm::DenoisedPair;
use crate::error::{invalid, Error, Result};
use crate::tensor::{FrameShape, VideoLatent};

/// Largest integer velocity component tried by the coarse search.
const VELOCITY_RADIUS: i64 = 4;
const GAUSS_NEWTON_STEPS: usize = 2;
const SCALE_FLOOR: f64 = 1e-3;

/// Prior scale used when blending `x_t` toward the rendered fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScale {
    /// RMS of `x_t - render(fit)`. This includes the injected noise, so the
    /// blend keeps about half of it at every level and sampling never
    /// converges.
    Raw,
    /// RMS residual with the expected noise power `sigma^2` removed. Any
    /// noise left over from earlier steps is read as signal and kept, so
    /// an excess grows from step to step.
    NoiseCorrected,
    /// A constant spread of clean videos around the blob manifold. The
    /// blend is then the exact posterior mean for "rendered blob plus
    /// i.i.d. `N(0, scale^2)`" given the fit.
    Fixed(f64),
}

impl Default for ResidualScale {
    fn default() -> Self {
        ResidualScale::Fixed(0.01)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionWorldSpec {
    pub height: usize,
    pub width: usize,
    pub blob_sigma: f64,
    pub frames: usize,
    pub bias_velocity: [f64; 2],
    pub bias_strength: f64,
    #[serde(default)]
    pub residual_scale: ResidualScale,
}

impl Default for MotionWorldSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            blob_sigma: 2.0,
            frames: 25,
            bias_velocity: [1.0, 0.0],
            bias_strength: 2.0,
            residual_scale: ResidualScale::default(),
        }
    }
}

impl MotionWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(invalid(format!(
                "motion world grid must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return Err(invalid("blob_sigma must be positive"));
        }
        if self.frames < 2 {
            return Err(invalid("motion world needs at least 2 frames"));
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return Err(invalid("bias_strength must be finite and >= 0"));
        }
        if self.bias_velocity.iter().any(|v| !v.is_finite()) {
            return Err(invalid("bias_velocity must be finite"));
        }
        if let ResidualScale::Fixed(scale) = self.residual_scale {
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(invalid("fixed residual scale must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn frame_shape(&self) -> FrameShape {
        (1, self.height, self.width)
    }

    /// The grid centre, `[(W - 1) / 2, (H - 1) / 2]`.
    pub fn center(&self) -> [f64; 2] {
        [(self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0]
    }

    /// Unit-height blob centred at `p`.
    pub fn render(&self, p: [f64; 2]) -> Array3<f64> {
        let gx = profile(self.width, p[0], self.blob_sigma);
        let gy = profile(self.height, p[1], self.blob_sigma);
        Array3::from_shape_fn((1, self.height, self.width), |(_, r, c)| gy[r] * gx[c])
    }

    /// `n` frames with the blob at `start + i * velocity` in frame `i`.
    pub fn render_video(&self, start: [f64; 2], velocity: [f64; 2], n: usize) -> Result<VideoLatent> {
        let mut data = Array4::zeros((n, 1, self.height, self.width));
        for (i, mut frame) in data.outer_iter_mut().enumerate() {
            frame.assign(&self.render(position(start, velocity, i)));
        }
        VideoLatent::new(data)
    }

    /// Video moving in a straight line from `start` to `end` over `n` frames.
    pub fn render_path(&self, start: [f64; 2], end: [f64; 2], n: usize) -> Result<VideoLatent> {
        let steps = n.saturating_sub(1).max(1) as f64;
        let v = [(end[0] - start[0]) / steps, (end[1] - start[1]) / steps];
        self.render_video(start, v, n)
    }
}

/// Intensity-weighted centroid of a condition frame, `[x, y]`.
pub fn decode_blob_position(z: &FrameCondition, world: &MotionWorldSpec) -> Result<[f64; 2]> {
    let (c, h, w) = z.latent.dim();
    if (c, h, w) != world.frame_shape() {
        return Err(invalid(format!(
            "condition shape {:?} does not match the motion world grid {:?}",
            (c, h, w),
            world.frame_shape()
        )));
    }
    let (mut mass, mut mx, mut my) = (0.0, 0.0, 0.0);
    for ((_, r, col), &v) in z.latent.indexed_iter() {
        mass += v;
        mx += v * col as f64;
        my += v * r as f64;
    }
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::DegenerateCondition(format!(
            "condition frame has no positive intensity mass ({mass})"
        )));
    }
    Ok([mx / mass, my / mass])
}

/// Result of fitting a constant-velocity blob to a latent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobFit {
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    /// Data misfit plus velocity penalty at the returned parameters.
    pub objective: f64,
    /// Mean squared data residual per element.
    pub residual_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ShiftWorldDenoiser {
    world: MotionWorldSpec,
}

impl ShiftWorldDenoiser {
    pub fn new(world: MotionWorldSpec) -> Result<Self> {
        world.validate()?;
        Ok(Self { world })
    }

    pub fn world(&self) -> &MotionWorldSpec {
        &self.world
    }

    fn check_latent(&self, x_t: &VideoLatent) -> Result<()> {
        if x_t.frame_shape() != self.world.frame_shape() {
            return Err(invalid(format!(
                "latent frames {:?} do not match the motion world grid {:?}",
                x_t.frame_shape(),
                self.world.frame_shape()
            )));
        }
        if x_t.num_frames() != self.world.frames {
            return Err(invalid(format!(
                "latent has {} frames, the motion world {}",
                x_t.num_frames(),
                self.world.frames
            )));
        }
        Ok(())
    }

    /// Fits start position and velocity at noise level `sigma`. With
    /// `pinned_start` only the velocity is searched.
    pub fn fit(&self, x_t: &VideoLatent, sigma: f64, pinned_start: Option<[f64; 2]>) -> Result<BlobFit> {
        self.check_latent(x_t)?;
        let problem = FitProblem::new(&self.world, x_t, sigma);
        let (mut start, mut velocity) = match pinned_start {
            Some(p) => (p, problem.coarse_velocity(p)),
            None => problem.coarse_free(),
        };
        let mut objective = problem.objective(start, velocity);
        for _ in 0..GAUSS_NEWTON_STEPS {
            let Some((s, v)) = problem
                .gauss_newton(start, velocity, pinned_start.is_none())
                .filter(|&(s, v)| problem.stays_inside(s, v))
            else {
                break;
            };
            let candidate = problem.objective(s, v);
            if candidate < objective {
                (start, velocity, objective) = (s, v, candidate);
            } else {
                break;
            }
        }
        let penalty = problem.penalty(velocity);
        Ok(BlobFit {
            start,
            velocity,
            objective,
            residual_ms: ((objective - penalty) / x_t.len() as f64).max(0.0),
        })
    }

    /// Blends `x_t` toward the rendered fit with the Gaussian posterior
    /// weights, using the fit residual as the prior scale.
    fn shrink(&self, x_t: &VideoLatent, sigma: f64, fit: &BlobFit) -> Result<VideoLatent> {
        let ms = match self.world.residual_scale {
            ResidualScale::Raw => fit.residual_ms,
            ResidualScale::NoiseCorrected => (fit.residual_ms - sigma * sigma).max(0.0),
            ResidualScale::Fixed(scale) => scale * scale,
        };
        let scale = ms.sqrt().max(SCALE_FLOOR);
        let prior_var = scale * scale;
        let noise_var = sigma * sigma;
        let denom = prior_var + noise_var;
        let rendered = self.world.render_video(fit.start, fit.velocity, x_t.num_frames())?;
        Ok(x_t.zip_with(&rendered, |x, r| (prior_var * x + noise_var * r) / denom))
    }
}

impl Denoiser for ShiftWorldDenoiser {
    fn denoise(&self, x_t: &VideoLatent, sigma: f64, cond: Option<&FrameCondition>) -> Result<DenoisedPair> {
        check_call(x_t, sigma, cond)?;
        let free = self.fit(x_t, sigma, None)?;
        let uncond = self.shrink(x_t, sigma, &free)?;
        let cond = match cond {
            Some(c) => {
                let pinned = decode_blob_position(c, &self.world)?;
                let fit = self.fit(x_t, sigma, Some(pinned))?;
                self.shrink(x_t, sigma, &fit)?
            }
            None => uncond.clone(),
        };
        DenoisedPair::new(uncond, cond)
    }
}

fn position(start: [f64; 2], velocity: [f64; 2], i: usize) -> [f64; 2] {
    let k = i as f64;
    [start[0] + k * velocity[0], start[1] + k * velocity[1]]
}

pub(crate) fn profile(len: usize, center: f64, s: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * s * s);
    (0..len).map(|u| (-(u as f64 - center).powi(2) * inv).exp()).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Precomputed pieces of the fit objective for one latent.
struct FitProblem<'a> {
    world: &'a MotionWorldSpec,
    frames: Vec<ArrayView2<'a, f64>>,
    energy: f64,
    weight: f64,
}

impl<'a> FitProblem<'a> {
    fn new(world: &'a MotionWorldSpec, x_t: &'a VideoLatent, sigma: f64) -> Self {
        let frames = x_t
            .as_array()
            .outer_iter()
            .map(|f| f.index_axis_move(Axis(0), 0))
            .collect();
        Self {
            world,
            frames,
            energy: x_t.sum_sq(),
            weight: world.bias_strength * sigma * sigma,
        }
    }

    fn penalty(&self, v: [f64; 2]) -> f64 {
        let b = self.world.bias_velocity;
        self.weight * ((v[0] - b[0]).powi(2) + (v[1] - b[1]).powi(2))
    }

    /// `|render(p)|^2 - 2 <x, render(p)>` for one frame.
    fn frame_term(&self, x: &ArrayView2<f64>, p: [f64; 2]) -> f64 {
        let s = self.world.blob_sigma;
        let gx = profile(self.world.width, p[0], s);
        let gy = profile(self.world.height, p[1], s);
        let norm = dot(&gx, &gx) * dot(&gy, &gy);
        let mut inner = 0.0;
        for (row, &wy) in x.outer_iter().zip(&gy) {
            if wy != 0.0 {
                inner += wy * row.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        norm - 2.0 * inner
    }

    fn objective(&self, start: [f64; 2], v: [f64; 2]) -> f64 {
        let data: f64 = self
            .frames
            .iter()
            .enumerate()
            .map(|(i, x)| self.frame_term(x, position(start, v, i)))
            .sum();
        self.energy + data + self.penalty(v)
    }

    fn velocity_grid() -> impl Iterator<Item = [f64; 2]> {
        (-VELOCITY_RADIUS..=VELOCITY_RADIUS)
            .flat_map(|vy| (-VELOCITY_RADIUS..=VELOCITY_RADIUS).map(move |vx| [vx as f64, vy as f64]))
    }

    /// Whether the blob centre stays on the grid for every frame.
    fn stays_inside(&self, start: [f64; 2], v: [f64; 2]) -> bool {
        let last = position(start, v, self.frames.len() - 1);
        let (w, h) = ((self.world.width - 1) as f64, (self.world.height - 1) as f64);
        [start, last]
            .iter()
            .all(|p| (0.0..=w).contains(&p[0]) && (0.0..=h).contains(&p[1]))
    }

    fn coarse_velocity(&self, start: [f64; 2]) -> [f64; 2] {
        let mut best = ([0.0, 0.0], f64::INFINITY);
        for v in Self::velocity_grid().filter(|&v| self.stays_inside(start, v)) {
            let e = self.objective(start, v);
            if e < best.1 {
                best = (v, e);
            }
        }
        best.0
    }

    /// Exhaustive search over integer start positions inside the grid and
    /// integer velocities, using correlation maps over an extended range.
    fn coarse_free(&self) -> ([f64; 2], [f64; 2]) {
        let (h, w) = (self.world.height, self.world.width);
        let s = self.world.blob_sigma;
        let margin = (4.0 * s).ceil() as i64;
        let ext_w = w + 2 * margin as usize;
        let ext_h = h + 2 * margin as usize;
        // gx_table[q][c]: profile of a blob at column q - margin
        let gx_table = Array2::from_shape_fn((ext_w, w), |(q, c)| {
            let d = c as f64 - (q as i64 - margin) as f64;
            (-d * d / (2.0 * s * s)).exp()
        });
        let gy_table = Array2::from_shape_fn((ext_h, h), |(q, r)| {
            let d = r as f64 - (q as i64 - margin) as f64;
            (-d * d / (2.0 * s * s)).exp()
        });
        let nx: Vec<f64> = gx_table.outer_iter().map(|g| g.dot(&g)).collect();
        let ny: Vec<f64> = gy_table.outer_iter().map(|g| g.dot(&g)).collect();
        // corr[i][qy, qx] = <x_i, render(qx - margin, qy - margin)>
        let corr: Vec<Array2<f64>> = self.frames.iter().map(|x| gy_table.dot(x).dot(&gx_table.t())).collect();
        let lookup = |i: usize, px: i64, py: i64| -> f64 {
            let qx = px + margin;
            let qy = py + margin;
            if qx < 0 || qy < 0 || qx >= ext_w as i64 || qy >= ext_h as i64 {
                return 0.0;
            }
            let (qx, qy) = (qx as usize, qy as usize);
            nx[qx] * ny[qy] - 2.0 * corr[i][[qy, qx]]
        };
        let mut best = (([0.0, 0.0], [0.0, 0.0]), f64::INFINITY);
        for v in Self::velocity_grid() {
            let penalty = self.penalty(v);
            let (vx, vy) = (v[0] as i64, v[1] as i64);
            for y0 in 0..h as i64 {
                for x0 in 0..w as i64 {
                    if !self.stays_inside([x0 as f64, y0 as f64], v) {
                        continue;
                    }
                    let mut e = penalty;
                    for i in 0..self.frames.len() {
                        let k = i as i64;
                        e += lookup(i, x0 + k * vx, y0 + k * vy);
                    }
                    if e < best.1 {
                        best = (([x0 as f64, y0 as f64], v), e);
                    }
                }
            }
        }
        best.0
    }

    /// One Gauss-Newton step on `(start, velocity)` or on the velocity alone.
    fn gauss_newton(&self, start: [f64; 2], v: [f64; 2], free_start: bool) -> Option<([f64; 2], [f64; 2])> {
        let s2 = self.world.blob_sigma * self.world.blob_sigma;
        let dim = if free_start { 4 } else { 2 };
        let mut jtj = DMatrix::<f64>::zeros(dim, dim);
        let mut jte = DVector::<f64>::zeros(dim);
        for (i, x) in self.frames.iter().enumerate() {
            let p = position(start, v, i);
            let gx = profile(self.world.width, p[0], self.world.blob_sigma);
            let gy = profile(self.world.height, p[1], self.world.blob_sigma);
            let dx: Vec<f64> = (0..self.world.width).map(|c| (c as f64 - p[0]) / s2).collect();
            let dy: Vec<f64> = (0..self.world.height).map(|r| (r as f64 - p[1]) / s2).collect();
            let gxdx: Vec<f64> = gx.iter().zip(&dx).map(|(g, d)| g * d).collect();
            let gydy: Vec<f64> = gy.iter().zip(&dy).map(|(g, d)| g * d).collect();
            // x projected on the blob's row profile (length W) and column profile (length H)
            let xgy: Vec<f64> = (0..self.world.width)
                .map(|c| x.column(c).iter().zip(&gy).map(|(a, b)| a * b).sum())
                .collect();
            let xgx: Vec<f64> = x
                .outer_iter()
                .map(|row| row.iter().zip(&gx).map(|(a, b)| a * b).sum())
                .collect();
            let gx2 = dot(&gx, &gx);
            let gy2 = dot(&gy, &gy);
            let gx2dx = dot(&gxdx, &gx);
            let gy2dy = dot(&gydy, &gy);
            // J^T e for d render / d p, with e = x - render(p)
            let ex = dot(&xgy, &gxdx) - gy2 * gx2dx;
            let ey = dot(&xgx, &gydy) - gx2 * gy2dy;
            let axx = gy2 * dot(&gxdx, &gxdx);
            let ayy = gx2 * dot(&gydy, &gydy);
            let axy = gx2dx * gy2dy;
            let local = [[axx, axy], [axy, ayy]];
            let grad = [ex, ey];
            let k = i as f64;
            // parameter blocks: start (weight 1) then velocity (weight k)
            let blocks: &[(usize, f64)] = if free_start { &[(0, 1.0), (2, k)] } else { &[(0, k)] };
            for &(bi, wi) in blocks {
                for a in 0..2 {
                    jte[bi + a] += wi * grad[a];
                    for &(bj, wj) in blocks {
                        for b in 0..2 {
                            jtj[(bi + a, bj + b)] += wi * wj * local[a][b];
                        }
                    }
                }
            }
        }
        let off = dim - 2;
        let b = self.world.bias_velocity;
        for a in 0..2 {
            jtj[(off + a, off + a)] += self.weight;
            jte[off + a] -= self.weight * (v[a] - b[a]);
        }
        let step = jtj.cholesky()?.solve(&jte);
        if step.iter().any(|d| !d.is_finite()) {
            return None;
        }
        let new_start = if free_start {
            [start[0] + step[0], start[1] + step[1]]
        } else {
            start
        };
        Some((new_start, [v[0] + step[off], v[1] + step[off + 1]]))
    }
}
