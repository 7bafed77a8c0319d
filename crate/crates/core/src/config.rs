//! Run configuration and its plain-text `key = value` form.
//!
//! Keys match the command-line flag names, so any key from a config file
//! can be overridden by the flag of the same name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{EpipolarConstraint, FlowEstimatorConfig};
use crate::loss::LossWeights;
use crate::metrics::CameraIntrinsics;

/// Which temporal paths the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Current frame only.
    Single,
    /// Warp and fuse previous features.
    FeatureWarp,
    /// Warp and fuse the previous cost volume.
    CostWarp,
    /// Both.
    #[default]
    Full,
}

impl Mode {
    pub fn warps_features(self) -> bool {
        matches!(self, Mode::FeatureWarp | Mode::Full)
    }

    pub fn warps_cost(self) -> bool {
        matches!(self, Mode::CostWarp | Mode::Full)
    }

    pub const ALL: [Mode; 4] = [Mode::Single, Mode::FeatureWarp, Mode::CostWarp, Mode::Full];
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "feature-warp" => Ok(Mode::FeatureWarp),
            "cost-warp" => Ok(Mode::CostWarp),
            "full" => Ok(Mode::Full),
            other => Err(Error::Parameter(format!(
                "unknown mode '{other}' (single | feature-warp | cost-warp | full)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Single => "single",
            Mode::FeatureWarp => "feature-warp",
            Mode::CostWarp => "cost-warp",
            Mode::Full => "full",
        })
    }
}

impl FromStr for EpipolarConstraint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(EpipolarConstraint::Hard),
            "soft" => Ok(EpipolarConstraint::Soft),
            other => Err(Error::Parameter(format!("unknown constraint '{other}' (hard | soft)"))),
        }
    }
}

impl fmt::Display for EpipolarConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpipolarConstraint::Hard => "hard",
            EpipolarConstraint::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Temporal bins per voxel grid.
    pub bins: usize,
    /// Working-scale downsample factor.
    pub scale: usize,
    /// Maximum disparity at full resolution.
    pub max_disparity: usize,
    pub window_ms: u64,
    pub cost_window: usize,
    pub aggregation_window: usize,
    pub temperature: f64,
    /// Entropy weighting sharpness for cost fusion.
    pub sharpness: f64,
    pub search_radius: usize,
    pub block: usize,
    pub weights: LossWeights,
    pub focal: f64,
    pub baseline: f64,
    /// Sensor width in pixels.
    pub width: usize,
    /// Sensor height in pixels.
    pub height: usize,
    pub mode: Mode,
    pub constraint: EpipolarConstraint,
    /// Clear temporal state every this many steps; 0 never resets.
    pub reset_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bins: 5,
            scale: 4,
            max_disparity: 48,
            window_ms: 50,
            cost_window: 3,
            aggregation_window: 3,
            temperature: 1.0,
            sharpness: 16.0,
            search_radius: 4,
            block: 9,
            weights: LossWeights::default(),
            focal: 226.38,
            baseline: 0.1,
            width: 346,
            height: 260,
            mode: Mode::Full,
            constraint: EpipolarConstraint::Hard,
            reset_every: 0,
        }
    }
}

/// Every recognised configuration key.
pub const CONFIG_KEYS: &[&str] = &[
    "bins",
    "scale",
    "max_disparity",
    "window_ms",
    "cost_window",
    "aggregation_window",
    "temperature",
    "sharpness",
    "search_radius",
    "block",
    "lambda_t",
    "lambda_c",
    "lambda_0",
    "lambda_1",
    "lambda_f",
    "beta",
    "focal",
    "baseline",
    "width",
    "height",
    "mode",
    "constraint",
    "reset_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("bad value '{value}' for {key}")))
}

impl RunConfig {
    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "bins" => self.bins = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "max_disparity" => self.max_disparity = parse(key, v)?,
            "window_ms" => self.window_ms = parse(key, v)?,
            "cost_window" => self.cost_window = parse(key, v)?,
            "aggregation_window" => self.aggregation_window = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "sharpness" => self.sharpness = parse(key, v)?,
            "search_radius" => self.search_radius = parse(key, v)?,
            "block" => self.block = parse(key, v)?,
            "lambda_t" => self.weights.lambda_t = parse(key, v)?,
            "lambda_c" => self.weights.lambda_c = parse(key, v)?,
            "lambda_0" => self.weights.lambda_0 = parse(key, v)?,
            "lambda_1" => self.weights.lambda_1 = parse(key, v)?,
            "lambda_f" => self.weights.lambda_f = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "focal" => self.focal = parse(key, v)?,
            "baseline" => self.baseline = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "constraint" => self.constraint = v.parse()?,
            "reset_every" => self.reset_every = parse(key, v)?,
            other => return Err(Error::Parameter(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.weights;
        Some(match key {
            "bins" => self.bins.to_string(),
            "scale" => self.scale.to_string(),
            "max_disparity" => self.max_disparity.to_string(),
            "window_ms" => self.window_ms.to_string(),
            "cost_window" => self.cost_window.to_string(),
            "aggregation_window" => self.aggregation_window.to_string(),
            "temperature" => self.temperature.to_string(),
            "sharpness" => self.sharpness.to_string(),
            "search_radius" => self.search_radius.to_string(),
            "block" => self.block.to_string(),
            "lambda_t" => w.lambda_t.to_string(),
            "lambda_c" => w.lambda_c.to_string(),
            "lambda_0" => w.lambda_0.to_string(),
            "lambda_1" => w.lambda_1.to_string(),
            "lambda_f" => w.lambda_f.to_string(),
            "beta" => w.beta.to_string(),
            "focal" => self.focal.to_string(),
            "baseline" => self.baseline.to_string(),
            "width" => self.width.to_string(),
            "height" => self.height.to_string(),
            "mode" => self.mode.to_string(),
            "constraint" => self.constraint.to_string(),
            "reset_every" => self.reset_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("line {}: expected key = value", i + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Parameter(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bins", self.bins),
            ("scale", self.scale),
            ("max_disparity", self.max_disparity),
            ("window_ms", self.window_ms as usize),
            ("width", self.width),
            ("height", self.height),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{k} must be positive")));
            }
        }
        for (k, v) in [
            ("cost_window", self.cost_window),
            ("aggregation_window", self.aggregation_window),
            ("block", self.block),
        ] {
            if v % 2 == 0 {
                return Err(Error::Parameter(format!("{k} must be odd, got {v}")));
            }
        }
        if !self.max_disparity.is_multiple_of(self.scale) {
            return Err(Error::Parameter(format!(
                "max_disparity {} is not divisible by scale {}",
                self.max_disparity, self.scale
            )));
        }
        if !(self.temperature > 0.0) || !(self.sharpness > 0.0) {
            return Err(Error::Parameter("temperature and sharpness must be positive".into()));
        }
        self.weights.validate()?;
        self.intrinsics().validate()
    }

    /// Disparity candidates at the working scale.
    pub fn working_disparities(&self) -> usize {
        self.max_disparity / self.scale
    }

    pub fn window_us(&self) -> u64 {
        self.window_ms * 1000
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            focal: self.focal,
            baseline: self.baseline,
        }
    }

    pub fn flow_config(&self) -> FlowEstimatorConfig {
        FlowEstimatorConfig {
            search_radius: self.search_radius,
            block: self.block,
            constraint: self.constraint,
        }
    }
}
