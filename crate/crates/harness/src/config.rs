//! Experiment configuration files.
//!
//! One TOML document describes a world, its keyframes, the sampler modes to
//! run, the seeds and optional sweep grids. [`ExperimentConfig::to_toml`]
//! writes the canonical form that accompanies every report.

use std::fmt;
use std::path::{Path, PathBuf};

use mpdlab_core::denoise::bridge::BridgeEndpoint;
use mpdlab_core::denoise::{
    BridgeDenoiser, Denoiser, GaussianDenoiser, GaussianWorldSpec, MotionWorldSpec, ShiftWorldDenoiser,
};
use mpdlab_core::diagnostics::SnapshotPolicy;
use mpdlab_core::edm::GuidanceSpec;
use mpdlab_core::sampler::{AlphaSpec, Keyframes, SamplerConfig, SamplerMode};
use mpdlab_core::tensor::ScheduleParams;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{usage, HarnessError, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MPDLAB_OUT";
const DEFAULT_OUT: &str = "mpdlab-out";

/// Frame i.i.d. Gaussian world with a constant per-element mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianWorldConfig {
    pub frames: usize,
    /// `[channels, height, width]`.
    pub shape: [usize; 3],
    #[serde(default)]
    pub mu: f64,
    pub sigma_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldConfig {
    Gaussian(GaussianWorldConfig),
    Motion(MotionWorldSpec),
}

impl WorldConfig {
    pub fn frames(&self) -> usize {
        match self {
            WorldConfig::Gaussian(g) => g.frames,
            WorldConfig::Motion(m) => m.frames,
        }
    }

    pub fn motion(&self) -> Option<&MotionWorldSpec> {
        match self {
            WorldConfig::Motion(m) => Some(m),
            WorldConfig::Gaussian(_) => None,
        }
    }
}

/// Blob positions `[x, y]` for a motion world, or a single fill value for
/// a Gaussian world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeConfig {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Modes to run plus overrides applied on top of each mode's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    pub modes: Vec<SamplerMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<GuidanceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<AlphaSpec>>,
}

impl SweepGrid {
    fn validate(&self) -> Result<()> {
        let lens = [
            ("gamma", self.gamma.as_ref().map(Vec::len)),
            ("k", self.k.as_ref().map(Vec::len)),
            ("lambda", self.lambda.as_ref().map(Vec::len)),
            ("alpha", self.alpha.as_ref().map(Vec::len)),
        ];
        if lens.iter().all(|(_, l)| l.is_none()) {
            return Err(usage("sweep section lists no grid"));
        }
        if let Some((name, _)) = lens.iter().find(|(_, l)| *l == Some(0)) {
            return Err(usage(format!("sweep grid `{name}` is empty")));
        }
        Ok(())
    }

    /// Cartesian product in the order gamma, k, lambda, alpha, with the
    /// last axis varying fastest.
    pub fn points(&self) -> Vec<GridPoint> {
        fn axis<T: Clone>(v: &Option<Vec<T>>) -> Vec<Option<T>> {
            match v {
                Some(values) => values.iter().cloned().map(Some).collect(),
                None => vec![None],
            }
        }
        let mut out = Vec::new();
        for gamma in axis(&self.gamma) {
            for k in axis(&self.k) {
                for lambda in axis(&self.lambda) {
                    for alpha in axis(&self.alpha) {
                        out.push(GridPoint {
                            gamma,
                            k,
                            lambda,
                            alpha,
                        });
                    }
                }
            }
        }
        out
    }
}

/// One cell of a sweep; `None` axes keep the configured value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<AlphaSpec>,
}

impl GridPoint {
    pub fn apply(&self, config: &mut SamplerConfig) {
        if let Some(g) = self.gamma {
            config.gamma = g;
        }
        if let Some(k) = self.k {
            config.k = k;
        }
        if let Some(l) = self.lambda {
            config.lambda = l;
        }
        if let Some(a) = self.alpha {
            config.alpha = a;
        }
    }
}

/// Directory-safe label such as `gamma=0.2_k=3`, or `default`.
impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(g) = self.gamma {
            parts.push(format!("gamma={g}"));
        }
        if let Some(k) = self.k {
            parts.push(format!("k={k}"));
        }
        if let Some(l) = self.lambda {
            parts.push(format!("lambda={l}"));
        }
        match self.alpha {
            Some(AlphaSpec::Constant(a)) => parts.push(format!("alpha={a}")),
            Some(AlphaSpec::Ramp) => parts.push("alpha=ramp".into()),
            None => {}
        }
        if parts.is_empty() {
            f.write_str("default")
        } else {
            f.write_str(&parts.join("_"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub snapshots: SnapshotPolicy,
    pub world: WorldConfig,
    pub keyframes: KeyframeConfig,
    pub sampler: SamplerSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeEndpoint>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| usage(format!("malformed config: {e}")))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::ConfigRead {
            path: path.to_owned(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| HarnessError::ConfigParse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(usage("at least one seed is required"));
        }
        if self.sampler.modes.is_empty() {
            return Err(usage("sampler.modes lists no mode"));
        }
        if self.jobs == Some(0) {
            return Err(usage("jobs must be >= 1"));
        }
        if let Some(grid) = &self.sweep {
            grid.validate()?;
        }
        match &self.world {
            WorldConfig::Gaussian(g) => {
                if g.frames < 2 {
                    return Err(usage("a video needs at least 2 frames"));
                }
                if g.shape.contains(&0) {
                    return Err(usage("gaussian world shape has a zero dimension"));
                }
                GaussianWorldSpec::new(Array3::from_elem((1, 1, 1), g.mu), g.sigma_d)?;
            }
            WorldConfig::Motion(m) => m.validate()?,
        }
        self.keyframes()?;
        for &mode in &self.sampler.modes {
            for point in self.grid_points() {
                self.sampler_config(mode, 0, &point).validate()?;
            }
        }
        Ok(())
    }

    /// Resolved output root: the config value, else `$MPDLAB_OUT`, else
    /// `./mpdlab-out`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }

    pub fn frames(&self) -> usize {
        self.world.frames()
    }

    pub fn keyframes(&self) -> Result<Keyframes> {
        let KeyframeConfig { start, end } = &self.keyframes;
        let frames = match &self.world {
            WorldConfig::Motion(m) => {
                let pos = |v: &[f64], name: &str| -> Result<[f64; 2]> {
                    match v {
                        [x, y] => Ok([*x, *y]),
                        _ => Err(usage(format!("keyframes.{name} must be a blob position [x, y]"))),
                    }
                };
                (m.render(pos(start, "start")?), m.render(pos(end, "end")?))
            }
            WorldConfig::Gaussian(g) => {
                let fill = |v: &[f64], name: &str| -> Result<Array3<f64>> {
                    match v {
                        [value] => Ok(Array3::from_elem((g.shape[0], g.shape[1], g.shape[2]), *value)),
                        _ => Err(usage(format!("keyframes.{name} must hold one fill value"))),
                    }
                };
                (fill(start, "start")?, fill(end, "end")?)
            }
        };
        Ok(Keyframes::new(frames.0, frames.1)?)
    }

    /// Grid points of the sweep, or the single default point.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        match &self.sweep {
            Some(grid) => grid.points(),
            None => vec![GridPoint::default()],
        }
    }

    pub fn sampler_config(&self, mode: SamplerMode, seed: u64, point: &GridPoint) -> SamplerConfig {
        let s = &self.sampler;
        let mut config = SamplerConfig::for_mode(mode);
        config.seed = seed;
        if let Some(v) = s.steps {
            config.steps = v;
        }
        if let Some(v) = s.schedule {
            config.schedule = v;
        }
        if let Some(v) = &s.guidance {
            config.guidance = v.clone();
        }
        if let Some(v) = s.alpha {
            config.alpha = v;
        }
        if let Some(v) = s.lambda {
            config.lambda = v;
        }
        if let Some(v) = s.k {
            config.k = v;
        }
        if let Some(v) = s.gamma {
            config.gamma = v;
        }
        point.apply(&mut config);
        config
    }

    /// The configured bridge, or the in-process denoiser for the world.
    pub fn denoiser(&self) -> Result<Box<dyn Denoiser>> {
        if let Some(endpoint) = &self.bridge {
            let bridge = BridgeDenoiser::open(endpoint)?;
            bridge.ping()?;
            return Ok(Box::new(bridge));
        }
        Ok(match &self.world {
            WorldConfig::Gaussian(g) => {
                let mu = Array3::from_elem((g.shape[0], g.shape[1], g.shape[2]), g.mu);
                Box::new(GaussianDenoiser::new(GaussianWorldSpec::new(mu, g.sigma_d)?))
            }
            WorldConfig::Motion(m) => Box::new(ShiftWorldDenoiser::new(m.clone())?),
        })
    }
}
