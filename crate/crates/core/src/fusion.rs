//! Per-voxel semantic accumulation.
//!
//! Four fixed strategies keep constant-size running sums:
//!
//! | strategy        | running state               | finalize                         |
//! |-----------------|-----------------------------|----------------------------------|
//! | RBU             | Σ w·ln smooth(s)            | softmax(log_sum)                 |
//! | Histogram       | votes[argmax s] += 1        | votes / obs_count                |
//! | NaiveAveraging  | Σ w·s                       | lin_sum / weight_sum             |
//! | GeometricMean   | Σ w·ln smooth(s)            | softmax(log_sum / weight_sum)    |
//!
//! GLFS only caches raw observations; it is finalized by [`crate::glfs`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LAPLACE_ALPHA: f64 = 1e-3;

const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rbu,
    #[serde(rename = "hist")]
    Histogram,
    #[serde(rename = "avg")]
    NaiveAveraging,
    #[serde(rename = "geomean")]
    GeometricMean,
    Glfs,
}

impl Strategy {
    pub const FIXED: [Strategy; 4] = [
        Strategy::Rbu,
        Strategy::Histogram,
        Strategy::NaiveAveraging,
        Strategy::GeometricMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rbu => "rbu",
            Strategy::Histogram => "hist",
            Strategy::NaiveAveraging => "avg",
            Strategy::GeometricMean => "geomean",
            Strategy::Glfs => "glfs",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbu" => Ok(Strategy::Rbu),
            "hist" | "histogram" => Ok(Strategy::Histogram),
            "avg" | "naive" => Ok(Strategy::NaiveAveraging),
            "geomean" => Ok(Strategy::GeometricMean),
            "glfs" => Ok(Strategy::Glfs),
            other => Err(Error::InvalidInput(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// A length-K probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution(Vec<f64>);

impl ClassDistribution {
    /// Validates non-negativity and normalization (within 1e-6).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidInput(
                "probabilities must be non-empty and >= 0".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized(sum));
        }
        Ok(Self(probs))
    }

    /// Wraps an already-normalized vector produced inside the crate.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self(probs)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Numerically safe softmax of arbitrary scores.
    pub fn softmax(scores: &[f64]) -> Self {
        let mut out = scores.to_vec();
        softmax_in_place(&mut out);
        Self(out)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Predicted class; ties go to the smallest class id.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn confidence(&self) -> f64 {
        self.0[self.argmax()]
    }
}

/// Index of the largest value, smallest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Mixes `s` with `alpha` uniform mass: (s_k + α) / (1 + Kα).
pub fn laplace_smooth(s: &ClassDistribution, alpha: f64) -> Result<ClassDistribution> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!(
            "laplace alpha must be > 0, got {alpha}"
        )));
    }
    let k = s.len() as f64;
    let denom = 1.0 + k * alpha;
    Ok(ClassDistribution(
        s.probs().iter().map(|p| (p + alpha) / denom).collect(),
    ))
}

#[inline]
pub(crate) fn smooth_value(p: f64, alpha: f64, k: usize) -> f64 {
    (p + alpha) / (1.0 + k as f64 * alpha)
}

/// One cached voxel observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    /// Raw (unscaled) logits of the pixel the voxel projected to.
    pub logits: Vec<f32>,
    /// Camera-to-voxel distance in meters.
    pub distance: f32,
    /// Cosine between the viewing direction and the surface normal estimate.
    pub incidence_cos: f32,
    pub frame_index: u32,
}

/// Per-observation weight heuristics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightScheme {
    #[serde(rename = "const")]
    Constant,
    /// max(cos, floor) · d_ref / max(d, d_ref)
    #[serde(rename = "normal-dist")]
    NormalDistance { floor: f64, d_ref: f64 },
    /// max(floor, 1 − ((d − d_opt)/r)²)
    #[serde(rename = "quad-dist")]
    QuadraticDistance { d_opt: f64, r: f64, floor: f64 },
}

impl Default for WeightScheme {
    fn default() -> Self {
        WeightScheme::Constant
    }
}

impl WeightScheme {
    pub fn normal_distance() -> Self {
        WeightScheme::NormalDistance {
            floor: 0.05,
            d_ref: 1.0,
        }
    }

    pub fn quadratic_distance() -> Self {
        WeightScheme::QuadraticDistance {
            d_opt: 1.5,
            r: 2.0,
            floor: 0.05,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Constant => "const",
            WeightScheme::NormalDistance { .. } => "normal-dist",
            WeightScheme::QuadraticDistance { .. } => "quad-dist",
        }
    }

    /// Whether the weight depends on the surface normal estimate.
    pub fn needs_normal(&self) -> bool {
        matches!(self, WeightScheme::NormalDistance { .. })
    }

    #[inline]
    pub fn weight(&self, distance: f64, incidence_cos: f64) -> f64 {
        match *self {
            WeightScheme::Constant => 1.0,
            WeightScheme::NormalDistance { floor, d_ref } => {
                incidence_cos.max(floor).min(1.0) * d_ref / distance.max(d_ref)
            }
            WeightScheme::QuadraticDistance { d_opt, r, floor } => {
                let x = (distance - d_opt) / r;
                (1.0 - x * x).max(floor).min(1.0)
            }
        }
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "const" | "constant" => Ok(WeightScheme::Constant),
            "normal-dist" => Ok(WeightScheme::normal_distance()),
            "quad-dist" => Ok(WeightScheme::quadratic_distance()),
            other => Err(Error::InvalidInput(format!("unknown weight scheme {other:?}"))),
        }
    }
}

pub fn sample_weight(rec: &ObservationRecord, scheme: &WeightScheme) -> f64 {
    scheme.weight(rec.distance as f64, rec.incidence_cos as f64)
}

/// Running semantic state of one voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticAccumulator {
    pub strategy: Strategy,
    pub log_sum: Vec<f64>,
    pub lin_sum: Vec<f64>,
    pub votes: Vec<u32>,
    pub weight_sum: f64,
    pub obs_count: u32,
    pub cache: Option<Vec<ObservationRecord>>,
}

impl SemanticAccumulator {
    /// GLFS always caches, since it can only be finalized from raw observations.
    pub fn new(strategy: Strategy, k: usize, caching: bool) -> Self {
        let (log_sum, lin_sum, votes) = match strategy {
            Strategy::Rbu | Strategy::GeometricMean => (vec![0.0; k], Vec::new(), Vec::new()),
            Strategy::NaiveAveraging => (Vec::new(), vec![0.0; k], Vec::new()),
            Strategy::Histogram => (Vec::new(), Vec::new(), vec![0; k]),
            Strategy::Glfs => (Vec::new(), Vec::new(), Vec::new()),
        };
        Self {
            strategy,
            log_sum,
            lin_sum,
            votes,
            weight_sum: 0.0,
            obs_count: 0,
            cache: (caching || strategy == Strategy::Glfs).then(Vec::new),
        }
    }

    pub fn observe(&mut self, s: &ClassDistribution, w: f64, alpha: f64) -> Result<()> {
        let sum: f64 = s.probs().iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized(sum));
        }
        self.observe_unchecked(s.probs(), w, alpha, None);
        Ok(())
    }

    /// Observation plus its raw record (kept only when caching is on).
    pub fn observe_record(
        &mut self,
        s: &ClassDistribution,
        w: f64,
        alpha: f64,
        record: ObservationRecord,
    ) -> Result<()> {
        self.observe(s, w, alpha)?;
        if let Some(cache) = &mut self.cache {
            cache.push(record);
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn observe_unchecked(
        &mut self,
        s: &[f64],
        w: f64,
        alpha: f64,
        record: Option<ObservationRecord>,
    ) {
        let k = s.len();
        match self.strategy {
            Strategy::Rbu | Strategy::GeometricMean => {
                for (acc, &p) in self.log_sum.iter_mut().zip(s) {
                    *acc += w * smooth_value(p, alpha, k).ln();
                }
            }
            Strategy::NaiveAveraging => {
                for (acc, &p) in self.lin_sum.iter_mut().zip(s) {
                    *acc += w * p;
                }
            }
            Strategy::Histogram => self.votes[argmax(s)] += 1,
            Strategy::Glfs => {}
        }
        self.weight_sum += w;
        self.obs_count += 1;
        if let (Some(cache), Some(rec)) = (&mut self.cache, record) {
            cache.push(rec);
        }
    }

    pub fn finalize(&self) -> Result<ClassDistribution> {
        if self.obs_count == 0 {
            return Err(Error::Unobserved);
        }
        let probs = match self.strategy {
            Strategy::Rbu => {
                let mut v = self.log_sum.clone();
                softmax_in_place(&mut v);
                v
            }
            Strategy::GeometricMean => {
                let mut v: Vec<f64> = self.log_sum.iter().map(|l| l / self.weight_sum).collect();
                softmax_in_place(&mut v);
                v
            }
            Strategy::NaiveAveraging => {
                // Σ lin_sum equals weight_sum up to input rounding; dividing by
                // the actual total keeps the output normalized to 1e-15
                let total: f64 = self.lin_sum.iter().sum();
                self.lin_sum.iter().map(|v| v / total).collect()
            }
            Strategy::Histogram => {
                let n = self.obs_count as f64;
                self.votes.iter().map(|&v| v as f64 / n).collect()
            }
            Strategy::Glfs => return Err(Error::MissingGlfsParams),
        };
        Ok(ClassDistribution(probs))
    }
}
