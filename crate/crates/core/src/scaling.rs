//! Post-hoc logit scaling (temperature and vector) and the 2D / 3D
//! calibration searches.
//!
//! Both searches share one protocol: a 50-point log sweep of scalar
//! temperatures over [0.01, 200] plus the identity, refined by Nelder–Mead in
//! log-temperature space. Vector mode then searches per-class temperatures in
//! a ±50% box around the best scalar, seeded by a diagonal sweep and 30 random
//! samples.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::ObservationCache;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frames::{Scene, IGNORE_LABEL};
use crate::fusion::{softmax_in_place, ClassDistribution, Strategy, WeightScheme};
use crate::metrics::{CalibrationMetric, PredictionSet, DEFAULT_BINS};
use crate::optim::{log_space, NelderMead};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalingMode {
    #[serde(rename = "temp")]
    Temperature,
    #[serde(rename = "vector")]
    Vector,
}

impl FromStr for ScalingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temp" | "temperature" => Ok(ScalingMode::Temperature),
            "vector" => Ok(ScalingMode::Vector),
            other => Err(Error::InvalidInput(format!("unknown scaling mode {other:?}"))),
        }
    }
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingMode::Temperature => "temp",
            ScalingMode::Vector => "vector",
        })
    }
}

/// `{"mode": "temp" | "vector", "tau": [...]}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub mode: ScalingMode,
    pub tau: Vec<f64>,
}

impl ScalingParams {
    pub fn temperature(tau: f64) -> Self {
        Self {
            mode: ScalingMode::Temperature,
            tau: vec![tau],
        }
    }

    pub fn vector(tau: Vec<f64>) -> Self {
        Self {
            mode: ScalingMode::Vector,
            tau,
        }
    }

    pub fn identity(mode: ScalingMode, k: usize) -> Self {
        match mode {
            ScalingMode::Temperature => Self::temperature(1.0),
            ScalingMode::Vector => Self::vector(vec![1.0; k]),
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        let expected = match self.mode {
            ScalingMode::Temperature => 1,
            ScalingMode::Vector => k,
        };
        if self.tau.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{} scaling needs {expected} temperatures, got {}",
                self.mode,
                self.tau.len()
            )));
        }
        if self.tau.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidInput("temperatures must be finite and > 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn tau_for(&self, class: usize) -> f64 {
        match self.mode {
            ScalingMode::Temperature => self.tau[0],
            ScalingMode::Vector => self.tau[class],
        }
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
    }
}

/// softmax(λ_k / τ_k).
pub fn scale_logits(logits: &[f32], params: &ScalingParams) -> ClassDistribution {
    let mut out = vec![0.0; logits.len()];
    scale_logits_into(logits, Some(params), &mut out);
    ClassDistribution::from_normalized(out)
}

#[inline]
pub(crate) fn scale_logits_into(logits: &[f32], params: Option<&ScalingParams>, out: &mut [f64]) {
    match params {
        None => out
            .iter_mut()
            .zip(logits)
            .for_each(|(o, &l)| *o = l as f64),
        Some(p) => out
            .iter_mut()
            .zip(logits)
            .enumerate()
            .for_each(|(k, (o, &l))| *o = l as f64 / p.tau_for(k)),
    }
    softmax_in_place(out);
}

/// Subsampled labeled pixels pooled over scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSet {
    pub class_count: usize,
    pub logits: Vec<f32>,
    pub gt: Vec<u32>,
}

impl PixelSet {
    /// Every `stride`-th pixel per image axis of every frame with labels.
    pub fn from_scenes(scenes: &[Scene], stride: usize) -> Result<Self> {
        let first = scenes
            .first()
            .ok_or_else(|| Error::InvalidInput("no scenes given".into()))?;
        let k = first.class_count;
        let stride = stride.max(1);
        let mut set = Self {
            class_count: k,
            logits: Vec::new(),
            gt: Vec::new(),
        };
        for scene in scenes {
            if scene.class_count != k {
                return Err(Error::InvalidInput("scenes disagree on class count".into()));
            }
            let w = scene.intrinsics.width;
            for f in &scene.frames {
                let Some(labels) = &f.gt_labels else { continue };
                for row in (0..scene.intrinsics.height).step_by(stride) {
                    for col in (0..w).step_by(stride) {
                        let l = labels[row * w + col];
                        if l == IGNORE_LABEL {
                            continue;
                        }
                        set.logits.extend_from_slice(f.pixel_logits(row, col, w, k));
                        set.gt.push(l as u32);
                    }
                }
            }
        }
        if set.gt.is_empty() {
            return Err(Error::InvalidInput("no labeled pixels".into()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn predictions(&self, params: Option<&ScalingParams>, exec: Exec) -> Result<PredictionSet> {
        let k = self.class_count;
        let chunks = exec.map_chunks(self.len(), 4096, |start, end| {
            let mut out = vec![0.0; (end - start) * k];
            for (i, row) in (start..end).zip(out.chunks_exact_mut(k)) {
                scale_logits_into(&self.logits[i * k..(i + 1) * k], params, row);
            }
            out
        });
        PredictionSet::new(k, chunks.concat(), self.gt.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationObjective {
    pub metric: CalibrationMetric,
    pub bins: usize,
    /// Fusion used to build voxel predictions (3D only).
    pub strategy: Strategy,
    pub weights: WeightScheme,
    pub laplace_alpha: f64,
}

impl Default for CalibrationObjective {
    fn default() -> Self {
        Self {
            metric: CalibrationMetric::Mece,
            bins: DEFAULT_BINS,
            strategy: Strategy::Rbu,
            weights: WeightScheme::Constant,
            laplace_alpha: crate::fusion::DEFAULT_LAPLACE_ALPHA,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub tau_min: f64,
    pub tau_max: f64,
    pub sweep: usize,
    pub max_evals: usize,
    pub ftol: f64,
    /// Relative half-width of the vector-mode box around the best scalar.
    pub vector_box: f64,
    pub vector_random: usize,
    pub seed: u64,
    /// Pixel subsampling stride for 2D objectives.
    pub pixel_stride: usize,
    pub exec: Exec,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            tau_min: 0.01,
            tau_max: 200.0,
            sweep: 50,
            max_evals: 200,
            ftol: 1e-4,
            vector_box: 0.5,
            vector_random: 30,
            seed: 0,
            pixel_stride: 8,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub params: ScalingParams,
    /// Objective at `params`.
    pub value: f64,
    /// Objective at the identity scaling.
    pub identity_value: f64,
    pub evaluations: usize,
}

/// Minimizes `objective` over scaling parameters following the shared protocol.
pub fn search<F>(k: usize, mode: ScalingMode, objective: F, opts: &SearchOptions) -> Result<Calibration>
where
    F: Fn(&ScalingParams) -> f64 + Sync + Send,
{
    let guarded = |p: &ScalingParams| {
        let v = objective(p);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut evaluations = 0;

    // scalar sweep, identity included explicitly
    let mut taus = log_space(opts.tau_min, opts.tau_max, opts.sweep);
    taus.push(1.0);
    let values = opts
        .exec
        .map_range(taus.len(), |i| guarded(&ScalingParams::temperature(taus[i])));
    evaluations += taus.len();
    let identity_value = values[taus.len() - 1];
    let (best_i, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let (mut best_tau, mut best_value) = (taus[best_i], values[best_i]);
    if !best_value.is_finite() {
        return Err(Error::InvalidInput("objective is not finite for any temperature".into()));
    }

    let step = ((opts.tau_max / opts.tau_min).ln() / (opts.sweep.max(2) - 1) as f64).max(1e-3);
    let nm = NelderMead {
        max_evals: opts.max_evals,
        ftol: opts.ftol,
        xtol: 1e-3,
        lower: Some(vec![opts.tau_min.ln()]),
        upper: Some(vec![opts.tau_max.ln()]),
    };
    let refined = nm.minimize(
        |x| guarded(&ScalingParams::temperature(x[0].exp())),
        &[best_tau.ln()],
        step,
    );
    evaluations += refined.evals;
    if refined.value < best_value {
        best_tau = refined.x[0].exp();
        best_value = refined.value;
    }

    let mut result = Calibration {
        params: ScalingParams::temperature(best_tau),
        value: best_value,
        identity_value,
        evaluations,
    };
    if mode == ScalingMode::Temperature {
        return Ok(result);
    }

    // vector mode: per-class box around the scalar optimum
    let lo = (best_tau * (1.0 - opts.vector_box)).ln();
    let hi = (best_tau * (1.0 + opts.vector_box)).ln();
    let mut candidates: Vec<Vec<f64>> = log_space(lo.exp(), hi.exp(), opts.sweep)
        .into_iter()
        .map(|t| vec![t; k])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.vector_random {
        candidates.push((0..k).map(|_| rng.random_range(lo..=hi).exp()).collect());
    }
    candidates.push(vec![best_tau; k]);
    let identity = ScalingParams::identity(ScalingMode::Vector, k);
    let vector_identity = guarded(&identity);
    let values = opts
        .exec
        .map_range(candidates.len(), |i| guarded(&ScalingParams::vector(candidates[i].clone())));
    result.evaluations += candidates.len() + 1;
    let (vi, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let start: Vec<f64> = candidates[vi].iter().map(|t| t.ln()).collect();
    let nm = NelderMead {
        max_evals: opts.max_evals,
        ftol: opts.ftol,
        xtol: 1e-3,
        lower: Some(vec![lo; k]),
        upper: Some(vec![hi; k]),
    };
    let refined = nm.minimize(
        |x| guarded(&ScalingParams::vector(x.iter().map(|v| v.exp()).collect())),
        &start,
        (hi - lo) / 4.0,
    );
    result.evaluations += refined.evals;
    let (mut params, mut value) = if refined.value < values[vi] {
        (
            ScalingParams::vector(refined.x.iter().map(|v| v.exp()).collect()),
            refined.value,
        )
    } else {
        (ScalingParams::vector(candidates[vi].clone()), values[vi])
    };
    if vector_identity <= value {
        params = identity;
        value = vector_identity;
    }
    result.params = params;
    result.value = value;
    result.identity_value = vector_identity;
    Ok(result)
}

fn distinct_classes(labels: impl Iterator<Item = u32>) -> usize {
    labels.collect::<std::collections::BTreeSet<_>>().len()
}

/// Scaling that minimizes the pixel-level calibration objective.
pub fn calibrate_2d(
    scenes: &[Scene],
    objective: &CalibrationObjective,
    mode: ScalingMode,
    opts: &SearchOptions,
) -> Result<Calibration> {
    let pixels = PixelSet::from_scenes(scenes, opts.pixel_stride)?;
    calibrate_pixels(&pixels, objective, mode, opts)
}

pub fn calibrate_pixels(
    pixels: &PixelSet,
    objective: &CalibrationObjective,
    mode: ScalingMode,
    opts: &SearchOptions,
) -> Result<Calibration> {
    if distinct_classes(pixels.gt.iter().copied()) < 2 {
        return Err(Error::Degenerate(
            "pixel ground truth has a single class".into(),
        ));
    }
    let exec = opts.exec;
    search(
        pixels.class_count,
        mode,
        |p| {
            pixels
                .predictions(Some(p), exec)
                .and_then(|preds| objective.metric.compute(&preds, objective.bins))
                .unwrap_or(f64::NAN)
        },
        opts,
    )
}

/// Scaling that minimizes the calibration objective of the fused voxels,
/// averaged over scenes.
pub fn calibrate_3d(
    caches: &[ObservationCache],
    objective: &CalibrationObjective,
    mode: ScalingMode,
    opts: &SearchOptions,
) -> Result<Calibration> {
    if caches.is_empty() || caches.iter().any(|c| c.is_empty()) {
        return Err(Error::MissingCache);
    }
    if objective.strategy == Strategy::Glfs {
        return Err(Error::InvalidInput(
            "3D scaling needs a fixed fusion strategy".into(),
        ));
    }
    let k = caches[0].class_count;
    if distinct_classes(caches.iter().flat_map(|c| c.entries.iter().map(|e| e.gt_label))) < 2 {
        return Err(Error::Degenerate("voxel ground truth has a single class".into()));
    }
    let exec = opts.exec;
    search(
        k,
        mode,
        |p| {
            let mut total = 0.0;
            for c in caches {
                let v = c
                    .predictions(objective.strategy, Some(p), &objective.weights, objective.laplace_alpha, exec)
                    .and_then(|preds| objective.metric.compute(&preds, objective.bins));
                match v {
                    Ok(v) => total += v,
                    Err(_) => return f64::NAN,
                }
            }
            total / caches.len() as f64
        },
        opts,
    )
}
