//! Pipeline configuration file: one TOML table per subcommand.
//!
//! Every key mirrors a command-line flag; flags win over the file. Unknown
//! keys anywhere are rejected. Relative paths are taken relative to the
//! working directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use semfuse::fusion::{Strategy, WeightScheme, DEFAULT_LAPLACE_ALPHA};
use semfuse::glfs::TrainerConfig;
use semfuse::metrics::{CalibrationMetric, DEFAULT_BINS};
use semfuse::planar::PlanarConfig;
use semfuse::scaling::ScalingMode;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Worker threads for the data-parallel core (default: all cores).
    pub threads: Option<usize>,
    /// Run every loop on the calling thread.
    pub sequential: bool,
    pub simulate: SimulateConfig,
    pub fuse: FuseConfig,
    #[serde(rename = "calibrate-2d")]
    pub calibrate_2d: Calibrate2dConfig,
    #[serde(rename = "calibrate-3d")]
    pub calibrate_3d: Calibrate3dConfig,
    #[serde(rename = "train-glfs")]
    pub train_glfs: TrainGlfsConfig,
    pub evaluate: EvaluateConfig,
    #[serde(rename = "project-map")]
    pub project_map: ProjectMapConfig,
    pub report: ReportConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Simulation spec (TOML with `[scene]` and `[segmenter]`); the standard
    /// fixture when absent.
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides the spec's scene seed.
    pub seed: Option<u64>,
    /// Overrides the spec's segmenter temperature τ*.
    pub tau_star: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub fusion: Strategy,
    pub weights: WeightScheme,
    pub laplace_alpha: f64,
    /// Scaling parameters applied to every observation before fusion.
    pub scaling: Option<PathBuf>,
    /// GLFS parameter file; required with `fusion = "glfs"`.
    pub params: Option<PathBuf>,
    /// Also write the observation cache.
    pub cache: bool,
}

impl Default for FuseConfig {
    fn default() -> Self {
        Self {
            scene: None,
            out: None,
            fusion: Strategy::Rbu,
            weights: WeightScheme::Constant,
            laplace_alpha: DEFAULT_LAPLACE_ALPHA,
            scaling: None,
            params: None,
            cache: false,
        }
    }
}

/// Search settings shared by both calibration subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub mode: ScalingMode,
    pub metric: CalibrationMetric,
    pub bins: usize,
    pub seed: u64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub sweep: usize,
    pub max_evals: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            mode: ScalingMode::Temperature,
            metric: CalibrationMetric::Mece,
            bins: DEFAULT_BINS,
            seed: 0,
            tau_min: 0.01,
            tau_max: 200.0,
            sweep: 50,
            max_evals: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibrate2dConfig {
    pub scenes: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    /// Use every n-th pixel in each image direction.
    pub pixel_stride: usize,
    pub search: SearchConfig,
}

impl Default for Calibrate2dConfig {
    fn default() -> Self {
        Self {
            scenes: Vec::new(),
            out: None,
            pixel_stride: 8,
            search: SearchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibrate3dConfig {
    pub caches: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    /// Fixed fusion strategy the objective fuses with.
    pub fusion: Strategy,
    pub weights: WeightScheme,
    pub laplace_alpha: f64,
    pub search: SearchConfig,
}

impl Default for Calibrate3dConfig {
    fn default() -> Self {
        Self {
            caches: Vec::new(),
            out: None,
            fusion: Strategy::Rbu,
            weights: WeightScheme::Constant,
            laplace_alpha: DEFAULT_LAPLACE_ALPHA,
            search: SearchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainGlfsConfig {
    pub caches: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    /// Starting parameters; near-RBU when absent.
    pub init: Option<PathBuf>,
    pub trainer: TrainerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Exported voxel map (`voxel_map.csv`).
    pub map: Option<PathBuf>,
    /// Scene directory for pixel-level metrics.
    pub scene: Option<PathBuf>,
    /// Scaling applied to the pixel logits before pixel metrics.
    pub scaling: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub bins: usize,
    pub pixel_stride: usize,
    /// Row label used by `report`; the output directory name when absent.
    pub label: Option<String>,
    /// Free-form calibration tag carried into the report.
    pub calibration: String,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            map: None,
            scene: None,
            scaling: None,
            out: None,
            bins: DEFAULT_BINS,
            pixel_stride: 1,
            label: None,
            calibration: "none".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectMapConfig {
    pub map: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub planar: PlanarConfig,
    /// Class whose thresholded, component-filtered mask is also written.
    pub goal_class: Option<usize>,
    pub threshold: f64,
}

impl Default for ProjectMapConfig {
    fn default() -> Self {
        Self {
            map: None,
            out: None,
            planar: PlanarConfig::default(),
            goal_class: None,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub metrics: Vec<PathBuf>,
    pub out: Option<PathBuf>,
}
