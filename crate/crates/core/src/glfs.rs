//! Generalized learned fusion (GLFS).
//!
//! Per voxel with observations t = 1..T:
//!
//! ```text
//! p_t   = softmax(λ_t / τ)            q_t = Laplace-smoothed p_t
//! w_t   = M[argmax p_t, dbin(d_t), abin(cos_t)]       W = Σ w_t
//! α     = (1 − ε) / W + ε
//! geo   = softmax(α Σ_t w_t ln q_t)
//! lin   = Σ_t w_t p_t / W
//! s     = G · geo + (1 − G) · lin
//! ```
//!
//! (G, ε) = (1, 1), (1, 0), (0, 0) with τ ≡ 1 and M ≡ 1 recover RBU, geometric
//! mean and naive averaging; τ → 0⁺ with (0, 0) recovers histogram voting.
//!
//! Parameters are stored unconstrained: τ_k = exp(u_k), G = sigmoid(g),
//! ε = sigmoid(e), M = softplus(m). Training minimizes
//! `η · mDECE + NLL` with analytic gradients and plain minibatch descent.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CachedVoxel, ObservationCache};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{argmax, softmax_in_place, ClassDistribution, ObservationRecord, DEFAULT_LAPLACE_ALPHA};
use crate::metrics::{PredictionSet, DEFAULT_BINS};

/// Probability floor inside the NLL term.
pub const NLL_FLOOR: f64 = 1e-12;

/// Gate logit used for the trainable near-RBU start: sigmoid(6) ≈ 0.9975.
/// The exact limit (±∞) would freeze both gates' gradients at zero.
pub const NEAR_RBU_LOGIT: f64 = 6.0;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Bin of `x` given `edges` (length bins + 1); values outside the outer
/// edges fall into the first / last bin.
#[inline]
fn edge_bin(x: f64, edges: &[f64]) -> usize {
    let inner = &edges[1..edges.len() - 1];
    inner.iter().take_while(|e| x >= **e).count()
}

fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    /// One temperature per class.
    Vector,
    /// A single shared temperature (ablation).
    Scalar,
}

impl FromStr for TauMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(TauMode::Vector),
            "scalar" | "temp" => Ok(TauMode::Scalar),
            other => Err(Error::InvalidInput(format!("unknown tau mode {other:?}"))),
        }
    }
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauMode::Vector => "vector",
            TauMode::Scalar => "scalar",
        })
    }
}

/// Trainable parameters θ = (τ, G, ε, M), stored unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub struct GlfsParams {
    pub class_count: usize,
    pub tau_mode: TauMode,
    pub u: Vec<f64>,
    pub g: f64,
    pub e: f64,
    /// K × D × A look-up table, row-major (class, distance bin, incidence bin).
    pub m: Vec<f64>,
    /// D + 1 distance edges in meters; the last bin is open above.
    pub distance_edges: Vec<f64>,
    /// A + 1 incidence-cosine edges.
    pub incidence_edges: Vec<f64>,
    pub laplace_alpha: f64,
}

/// Serialized form: constrained values, flattened M with its bin edges.
#[derive(Serialize, Deserialize)]
struct ParamsFile {
    class_count: usize,
    tau_mode: TauMode,
    tau: Vec<f64>,
    #[serde(rename = "G")]
    gate_g: f64,
    epsilon: f64,
    distance_edges: Vec<f64>,
    incidence_edges: Vec<f64>,
    /// [K, D, A]
    m_shape: [usize; 3],
    #[serde(rename = "M")]
    lut: Vec<f64>,
    laplace_alpha: f64,
}

impl GlfsParams {
    /// τ ≡ 1, M ≡ 1 with the given gates and the default 8 × 4 look-up grid.
    pub fn with_gates(class_count: usize, gate_g: f64, epsilon: f64) -> Self {
        Self::with_layout(class_count, TauMode::Vector, 8, 5.0, 4, gate_g, epsilon)
    }

    pub fn with_layout(
        class_count: usize,
        tau_mode: TauMode,
        distance_bins: usize,
        max_distance: f64,
        incidence_bins: usize,
        gate_g: f64,
        epsilon: f64,
    ) -> Self {
        let nu = match tau_mode {
            TauMode::Vector => class_count,
            TauMode::Scalar => 1,
        };
        let distance_bins = distance_bins.max(1);
        let incidence_bins = incidence_bins.max(1);
        Self {
            class_count,
            tau_mode,
            u: vec![0.0; nu],
            g: logit(gate_g),
            e: logit(epsilon),
            m: vec![softplus_inv(1.0); class_count * distance_bins * incidence_bins],
            distance_edges: uniform_edges(0.0, max_distance, distance_bins),
            incidence_edges: uniform_edges(0.0, 1.0, incidence_bins),
            laplace_alpha: DEFAULT_LAPLACE_ALPHA,
        }
    }

    pub fn rbu(class_count: usize) -> Self {
        Self::with_gates(class_count, 1.0, 1.0)
    }

    pub fn geometric_mean(class_count: usize) -> Self {
        Self::with_gates(class_count, 1.0, 0.0)
    }

    pub fn naive_averaging(class_count: usize) -> Self {
        Self::with_gates(class_count, 0.0, 0.0)
    }

    /// Trainable start that behaves like RBU up to ~0.25% gate mass.
    pub fn near_rbu(class_count: usize) -> Self {
        let mut p = Self::rbu(class_count);
        p.g = NEAR_RBU_LOGIT;
        p.e = NEAR_RBU_LOGIT;
        p
    }

    pub fn distance_bins(&self) -> usize {
        self.distance_edges.len() - 1
    }

    pub fn incidence_bins(&self) -> usize {
        self.incidence_edges.len() - 1
    }

    #[inline]
    pub fn tau(&self, class: usize) -> f64 {
        match self.tau_mode {
            TauMode::Vector => self.u[class].exp(),
            TauMode::Scalar => self.u[0].exp(),
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        (0..self.class_count).map(|k| self.tau(k)).collect()
    }

    pub fn gate_g(&self) -> f64 {
        sigmoid(self.g)
    }

    pub fn epsilon(&self) -> f64 {
        sigmoid(self.e)
    }

    #[inline]
    pub fn lut_index(&self, class: usize, distance: f64, incidence_cos: f64) -> usize {
        let db = edge_bin(distance, &self.distance_edges);
        let ab = edge_bin(incidence_cos, &self.incidence_edges);
        (class * self.distance_bins() + db) * self.incidence_bins() + ab
    }

    pub fn lut(&self) -> Vec<f64> {
        self.m.iter().map(|&m| softplus(m)).collect()
    }

    pub fn set_tau(&mut self, tau: &[f64]) -> Result<()> {
        if tau.len() != self.u.len() || tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidInput("tau must be positive with one entry per slot".into()));
        }
        self.u = tau.iter().map(|t| t.ln()).collect();
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + 2 + self.m.len()
    }

    /// Unconstrained parameters, laid out as [u.., g, e, m..].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.u.clone();
        v.push(self.g);
        v.push(self.e);
        v.extend_from_slice(&self.m);
        v
    }

    pub fn set_flat(&mut self, theta: &[f64]) {
        let nu = self.u.len();
        self.u.copy_from_slice(&theta[..nu]);
        self.g = theta[nu];
        self.e = theta[nu + 1];
        self.m.copy_from_slice(&theta[nu + 2..]);
    }

    pub fn validate(&self) -> Result<()> {
        let nu = match self.tau_mode {
            TauMode::Vector => self.class_count,
            TauMode::Scalar => 1,
        };
        if self.class_count < 1 || self.u.len() != nu {
            return Err(Error::InvalidInput("tau length does not match class count".into()));
        }
        for edges in [&self.distance_edges, &self.incidence_edges] {
            if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidInput("bin edges must be increasing".into()));
            }
        }
        if self.m.len() != self.class_count * self.distance_bins() * self.incidence_bins() {
            return Err(Error::InvalidInput("look-up table shape mismatch".into()));
        }
        if !(self.laplace_alpha > 0.0) {
            return Err(Error::InvalidInput("laplace alpha must be > 0".into()));
        }
        if self.u.iter().chain(&self.m).any(|v| !v.is_finite()) || self.g.is_nan() || self.e.is_nan() {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ParamsFile {
            class_count: self.class_count,
            tau_mode: self.tau_mode,
            tau: self.u.iter().map(|u| u.exp()).collect(),
            gate_g: self.gate_g(),
            epsilon: self.epsilon(),
            distance_edges: self.distance_edges.clone(),
            incidence_edges: self.incidence_edges.clone(),
            m_shape: [self.class_count, self.distance_bins(), self.incidence_bins()],
            lut: self.lut(),
            laplace_alpha: self.laplace_alpha,
        };
        serde_json::to_string_pretty(&file).expect("params serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ParamsFile =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("GLFS params: {e}")))?;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(f.gate_g) || !in_unit(f.epsilon) {
            return Err(Error::InvalidInput("G and epsilon must lie in [0, 1]".into()));
        }
        if f.tau.iter().any(|t| !(*t > 0.0 && t.is_finite())) || f.lut.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidInput("tau and M entries must be positive".into()));
        }
        if f.m_shape
            != [
                f.class_count,
                f.distance_edges.len().saturating_sub(1),
                f.incidence_edges.len().saturating_sub(1),
            ]
        {
            return Err(Error::InvalidInput("M shape does not match the bin edges".into()));
        }
        let p = Self {
            class_count: f.class_count,
            tau_mode: f.tau_mode,
            u: f.tau.iter().map(|t| t.ln()).collect(),
            g: logit(f.gate_g),
            e: logit(f.epsilon),
            m: f.lut.iter().map(|&m| softplus_inv(m)).collect(),
            distance_edges: f.distance_edges,
            incidence_edges: f.incidence_edges,
            laplace_alpha: f.laplace_alpha,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Reusable buffers for one voxel's forward/backward pass.
#[derive(Default)]
struct Scratch {
    z: Vec<f64>,
    p: Vec<f64>,
    lnq: Vec<f64>,
    w: Vec<f64>,
    idx: Vec<usize>,
    a: Vec<f64>,
    geo: Vec<f64>,
    lin: Vec<f64>,
    s: Vec<f64>,
    total_w: f64,
    alpha: f64,
    dp: Vec<f64>,
}

impl GlfsParams {
    fn forward(&self, v: &CachedVoxel<'_>, sc: &mut Scratch) {
        let k = self.class_count;
        let t_len = v.len();
        let la = self.laplace_alpha;
        let denom = 1.0 + k as f64 * la;
        sc.z.resize(t_len * k, 0.0);
        sc.p.resize(t_len * k, 0.0);
        sc.lnq.resize(t_len * k, 0.0);
        sc.w.resize(t_len, 0.0);
        sc.idx.resize(t_len, 0);
        for buf in [&mut sc.a, &mut sc.lin] {
            buf.clear();
            buf.resize(k, 0.0);
        }
        let inv_tau: Vec<f64> = (0..k).map(|c| 1.0 / self.tau(c)).collect();

        let mut total_w = 0.0;
        for t in 0..t_len {
            let lam = v.obs_logits(t);
            let z = &mut sc.z[t * k..(t + 1) * k];
            for c in 0..k {
                z[c] = lam[c] as f64 * inv_tau[c];
            }
            let p = &mut sc.p[t * k..(t + 1) * k];
            p.copy_from_slice(z);
            softmax_in_place(p);
            let idx = self.lut_index(argmax(p), v.distance[t] as f64, v.incidence[t] as f64);
            let w = softplus(self.m[idx]);
            sc.idx[t] = idx;
            sc.w[t] = w;
            total_w += w;
            let lnq = &mut sc.lnq[t * k..(t + 1) * k];
            for c in 0..k {
                lnq[c] = ((p[c] + la) / denom).ln();
                sc.a[c] += w * lnq[c];
                sc.lin[c] += w * p[c];
            }
        }
        let eps = self.epsilon();
        let alpha = (1.0 - eps) / total_w + eps;
        sc.geo.clear();
        sc.geo.extend(sc.a.iter().map(|a| alpha * a));
        softmax_in_place(&mut sc.geo);
        for l in sc.lin.iter_mut() {
            *l /= total_w;
        }
        let gate = self.gate_g();
        sc.s.clear();
        sc.s
            .extend(sc.geo.iter().zip(&sc.lin).map(|(g, l)| gate * g + (1.0 - gate) * l));
        sc.total_w = total_w;
        sc.alpha = alpha;
    }

    /// Accumulates dL/dθ into `grad` (flat layout) given dL/ds for a voxel
    /// whose forward pass is in `sc`.
    fn backward(&self, v: &CachedVoxel<'_>, sc: &mut Scratch, ds: &[f64], grad: &mut [f64]) {
        let k = self.class_count;
        let t_len = v.len();
        let nu = self.u.len();
        let gate = self.gate_g();
        let eps = self.epsilon();
        let (w_total, alpha) = (sc.total_w, sc.alpha);
        let denom = 1.0 + k as f64 * self.laplace_alpha;

        // gate G
        let d_gate: f64 = (0..k).map(|c| ds[c] * (sc.geo[c] - sc.lin[c])).sum();
        grad[nu] += d_gate * gate * (1.0 - gate);

        // geometric branch: softmax backward to Y = α·A
        let dot: f64 = (0..k).map(|c| gate * ds[c] * sc.geo[c]).sum();
        let dy: Vec<f64> = (0..k).map(|c| sc.geo[c] * (gate * ds[c] - dot)).collect();
        let d_alpha: f64 = (0..k).map(|c| dy[c] * sc.a[c]).sum();
        let da: Vec<f64> = dy.iter().map(|d| alpha * d).collect();
        let d_eps = d_alpha * (1.0 - 1.0 / w_total);
        grad[nu + 1] += d_eps * eps * (1.0 - eps);
        let d_w_total = -d_alpha * (1.0 - eps) / (w_total * w_total);

        // linear branch
        let dlin: Vec<f64> = ds.iter().map(|d| (1.0 - gate) * d).collect();

        sc.dp.resize(k, 0.0);
        for t in 0..t_len {
            let w = sc.w[t];
            let p = &sc.p[t * k..(t + 1) * k];
            let lnq = &sc.lnq[t * k..(t + 1) * k];
            let z = &sc.z[t * k..(t + 1) * k];
            let mut dw = d_w_total;
            for c in 0..k {
                dw += da[c] * lnq[c] + dlin[c] * (p[c] - sc.lin[c]) / w_total;
                let q = lnq[c].exp();
                sc.dp[c] = da[c] * w / (q * denom) + dlin[c] * w / w_total;
            }
            grad[nu + 2 + sc.idx[t]] += dw * sigmoid(self.m[sc.idx[t]]);

            let pdp: f64 = (0..k).map(|c| p[c] * sc.dp[c]).sum();
            for c in 0..k {
                let dz = p[c] * (sc.dp[c] - pdp);
                let du = -dz * z[c];
                match self.tau_mode {
                    TauMode::Vector => grad[c] += du,
                    TauMode::Scalar => grad[0] += du,
                }
            }
        }
    }

    fn fuse_voxel(&self, v: &CachedVoxel<'_>, sc: &mut Scratch) -> Vec<f64> {
        self.forward(v, sc);
        sc.s.clone()
    }
}

/// Fuses one voxel's raw observations with GLFS parameters.
pub fn glfs_fuse(obs: &[ObservationRecord], params: &GlfsParams) -> Result<ClassDistribution> {
    if obs.is_empty() {
        return Err(Error::Unobserved);
    }
    let k = params.class_count;
    let mut logits = Vec::with_capacity(obs.len() * k);
    for r in obs {
        if r.logits.len() != k {
            return Err(Error::ClassCountMismatch {
                frame: r.frame_index,
                expected: k,
                found: r.logits.len(),
            });
        }
        logits.extend_from_slice(&r.logits);
    }
    let distance: Vec<f32> = obs.iter().map(|r| r.distance).collect();
    let incidence: Vec<f32> = obs.iter().map(|r| r.incidence_cos).collect();
    let v = CachedVoxel {
        k,
        gt_label: 0,
        logits: &logits,
        distance: &distance,
        incidence: &incidence,
    };
    Ok(ClassDistribution::from_normalized(
        params.fuse_voxel(&v, &mut Scratch::default()),
    ))
}

/// GLFS predictions for every cached voxel.
pub fn glfs_predictions(cache: &ObservationCache, params: &GlfsParams, exec: Exec) -> Result<PredictionSet> {
    let indices: Vec<usize> = (0..cache.len()).collect();
    let probs = fuse_indices(cache, params, &indices, exec)?;
    let gt = cache.entries.iter().map(|e| e.gt_label).collect();
    PredictionSet::new(cache.class_count, probs, gt)
}

fn fuse_indices(cache: &ObservationCache, params: &GlfsParams, indices: &[usize], exec: Exec) -> Result<Vec<f64>> {
    if params.class_count != cache.class_count {
        return Err(Error::InvalidInput(format!(
            "GLFS params are for {} classes, cache has {}",
            params.class_count, cache.class_count
        )));
    }
    let k = cache.class_count;
    let parts = exec.map_chunks(indices.len(), 256, |start, end| {
        let mut sc = Scratch::default();
        let mut out = Vec::with_capacity((end - start) * k);
        for &i in &indices[start..end] {
            params.forward(&cache.voxel(i), &mut sc);
            out.extend_from_slice(&sc.s);
        }
        out
    });
    Ok(parts.concat())
}

/// Soft-binned mECE and, optionally, its gradient w.r.t. each confidence.
///
/// Bin memberships are sigmoid bumps between consecutive edges; with open
/// outer edges (−∞, +∞) they telescope to exactly one per sample. Per
/// ground-truth class k: (1/N_k) Σ_b |Σ_i μ_b(h_i)(c_i − h_i)|, averaged over
/// present classes.
fn mdece_core(
    conf: &[f64],
    correct: &[bool],
    labels: &[u32],
    k: usize,
    bins: usize,
    sharpness: f64,
    mut dconf: Option<&mut [f64]>,
) -> f64 {
    // S_b = sigmoid((h − edge_b)/σ), with S_0 = 1 and S_bins = 0
    let step = |h: f64, out: &mut Vec<f64>| {
        out.clear();
        out.push(1.0);
        for b in 1..bins {
            out.push(sigmoid((h - b as f64 / bins as f64) / sharpness));
        }
        out.push(0.0);
    };
    let mut counts = vec![0usize; k];
    let mut d = vec![0.0; k * bins];
    let mut s = Vec::with_capacity(bins + 1);
    for i in 0..conf.len() {
        let c = labels[i] as usize;
        counts[c] += 1;
        step(conf[i], &mut s);
        let r = if correct[i] { 1.0 } else { 0.0 } - conf[i];
        for b in 0..bins {
            d[c * bins + b] += (s[b] - s[b + 1]) * r;
        }
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    let mut total = 0.0;
    for c in 0..k {
        if counts[c] > 0 {
            let e: f64 = d[c * bins..(c + 1) * bins].iter().map(|v| v.abs()).sum();
            total += e / counts[c] as f64;
        }
    }
    if let Some(dh) = dconf.as_deref_mut() {
        for i in 0..conf.len() {
            let c = labels[i] as usize;
            step(conf[i], &mut s);
            let r = if correct[i] { 1.0 } else { 0.0 } - conf[i];
            let scale = 1.0 / (present * counts[c] as f64);
            let mut g = 0.0;
            for b in 0..bins {
                let sign = d[c * bins + b].signum() * (d[c * bins + b] != 0.0) as u8 as f64;
                if sign == 0.0 {
                    continue;
                }
                let mu = s[b] - s[b + 1];
                let dmu = (s[b] * (1.0 - s[b]) - s[b + 1] * (1.0 - s[b + 1])) / sharpness;
                g += sign * (dmu * r - mu);
            }
            dh[i] = g * scale;
        }
    }
    total / present
}

/// Differentiable (soft-binned) mECE. Tends to `compute_mece` as
/// `sharpness` → 0.
pub fn compute_mdece(preds: &PredictionSet, bins: usize, sharpness: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("empty prediction set".into()));
    }
    if bins == 0 || !(sharpness > 0.0) {
        return Err(Error::InvalidInput("bins and sharpness must be > 0".into()));
    }
    let n = preds.len();
    let conf: Vec<f64> = (0..n).map(|i| preds.conf(i)).collect();
    let correct: Vec<bool> = (0..n).map(|i| preds.pred(i) == preds.gt(i) as usize).collect();
    Ok(mdece_core(&conf, &correct, preds.labels(), preds.class_count(), bins, sharpness, None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub eta: f64,
    pub bins: usize,
    /// Soft-bin sigmoid width σ_bin.
    pub sharpness: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Voxels per gradient step.
    pub batch_size: usize,
    pub seed: u64,
    /// Uniform subsample cap on cache entries.
    pub max_entries: usize,
    pub distance_bins: usize,
    pub max_distance: f64,
    pub incidence_bins: usize,
    pub tau_mode: TauMode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            bins: DEFAULT_BINS,
            sharpness: 0.01,
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 4096,
            seed: 0,
            max_entries: 500_000,
            distance_bins: 8,
            max_distance: 5.0,
            incidence_bins: 4,
            tau_mode: TauMode::Vector,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0)
            || self.bins == 0
            || !(self.sharpness > 0.0)
            || !(self.learning_rate > 0.0)
            || self.batch_size == 0
            || self.max_entries == 0
            || self.distance_bins == 0
            || self.incidence_bins == 0
            || !(self.max_distance > 0.0)
        {
            return Err(Error::InvalidInput("invalid trainer configuration".into()));
        }
        Ok(())
    }

    /// Near-RBU starting point with this config's look-up layout.
    pub fn initial_params(&self, class_count: usize) -> GlfsParams {
        let mut p = GlfsParams::with_layout(
            class_count,
            self.tau_mode,
            self.distance_bins,
            self.max_distance,
            self.incidence_bins,
            1.0,
            1.0,
        );
        p.g = NEAR_RBU_LOGIT;
        p.e = NEAR_RBU_LOGIT;
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub mdece: f64,
    pub nll: f64,
}

/// Loss (and optionally its flat gradient) over the listed cache entries.
fn loss_and_grad(
    cache: &ObservationCache,
    params: &GlfsParams,
    indices: &[usize],
    cfg: &TrainerConfig,
    exec: Exec,
    want_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty observation cache".into()));
    }
    let k = cache.class_count;
    let n = indices.len();
    let s = fuse_indices(cache, params, indices, exec)?;
    let labels: Vec<u32> = indices.iter().map(|&i| cache.entries[i].gt_label).collect();
    let mut conf = Vec::with_capacity(n);
    let mut pred = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    let mut nll = 0.0;
    for i in 0..n {
        let row = &s[i * k..(i + 1) * k];
        let p = argmax(row);
        pred.push(p);
        conf.push(row[p]);
        correct.push(p == labels[i] as usize);
        nll -= row[labels[i] as usize].max(NLL_FLOOR).ln();
    }
    nll /= n as f64;
    let mut dconf = vec![0.0; n];
    let mdece = mdece_core(
        &conf,
        &correct,
        &labels,
        k,
        cfg.bins,
        cfg.sharpness,
        want_grad.then_some(dconf.as_mut_slice()),
    );
    let parts = LossParts {
        loss: cfg.eta * mdece + nll,
        mdece,
        nll,
    };
    if !want_grad {
        return Ok((parts, None));
    }

    let np = params.param_count();
    let partials = exec.map_chunks(n, 256, |start, end| {
        let mut sc = Scratch::default();
        let mut grad = vec![0.0; np];
        let mut ds = vec![0.0; k];
        for j in start..end {
            ds.iter_mut().for_each(|d| *d = 0.0);
            ds[pred[j]] += cfg.eta * dconf[j];
            let l = labels[j] as usize;
            let sl = s[j * k + l];
            if sl > NLL_FLOOR {
                ds[l] -= 1.0 / (n as f64 * sl);
            }
            let v = cache.voxel(indices[j]);
            params.forward(&v, &mut sc);
            params.backward(&v, &mut sc, &ds, &mut grad);
        }
        grad
    });
    let mut grad = vec![0.0; np];
    for part in partials {
        for (g, p) in grad.iter_mut().zip(part) {
            *g += p;
        }
    }
    Ok((parts, Some(grad)))
}

/// Full-cache training loss.
pub fn glfs_loss(cache: &ObservationCache, params: &GlfsParams, cfg: &TrainerConfig) -> Result<LossParts> {
    let indices: Vec<usize> = (0..cache.len()).collect();
    Ok(loss_and_grad(cache, params, &indices, cfg, Exec::default(), false)?.0)
}

/// Loss and analytic gradient w.r.t. the flat unconstrained parameters.
pub fn glfs_loss_grad(
    cache: &ObservationCache,
    params: &GlfsParams,
    cfg: &TrainerConfig,
    exec: Exec,
) -> Result<(LossParts, Vec<f64>)> {
    let indices: Vec<usize> = (0..cache.len()).collect();
    let (parts, grad) = loss_and_grad(cache, params, &indices, cfg, exec, true)?;
    Ok((parts, grad.expect("gradient requested")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mdece: f64,
    pub nll: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingResult {
    /// Parameters with the lowest full-cache loss seen (the initial ones included).
    pub params: GlfsParams,
    /// Epoch 0 is the initial loss.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainingResult {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,loss,mdece,nll\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.mdece, r.nll));
        }
        out
    }
}

/// Minibatch gradient descent on `η · mDECE + NLL`.
pub fn train_glfs(
    cache: &ObservationCache,
    init: &GlfsParams,
    cfg: &TrainerConfig,
    exec: Exec,
) -> Result<TrainingResult> {
    cfg.validate()?;
    init.validate()?;
    if cache.is_empty() {
        return Err(Error::MissingCache);
    }
    if cache.gt_classes().len() < 2 {
        return Err(Error::Degenerate(
            "training needs at least two ground-truth classes".into(),
        ));
    }
    let owned;
    let cache = if cache.len() > cfg.max_entries {
        owned = cache.subsample(cfg.max_entries, cfg.seed);
        &owned
    } else {
        cache
    };
    let all: Vec<usize> = (0..cache.len()).collect();
    let mut params = init.clone();
    let mut theta = params.flat();
    let record = |epoch: usize, p: LossParts| EpochRecord {
        epoch,
        loss: p.loss,
        mdece: p.mdece,
        nll: p.nll,
    };

    let initial = loss_and_grad(cache, &params, &all, cfg, exec, false)?.0;
    if !initial.loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss: initial.loss,
        });
    }
    let mut history = vec![record(0, initial)];
    let mut best = (initial.loss, params.clone(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = all.clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let (parts, grad) = loss_and_grad(cache, &params, batch, cfg, exec, true)?;
            let grad = grad.expect("gradient requested");
            if !parts.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: parts.loss,
                });
            }
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= cfg.learning_rate * g;
            }
            params.set_flat(&theta);
        }
        let full = loss_and_grad(cache, &params, &all, cfg, exec, false)?.0;
        if !full.loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                loss: full.loss,
            });
        }
        history.push(record(epoch, full));
        if full.loss < best.0 {
            best = (full.loss, params.clone(), epoch);
        }
    }
    Ok(TrainingResult {
        params: best.1,
        history,
        best_epoch: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{SemanticAccumulator, Strategy};
    use crate::metrics::compute_mece;
    use rand::Rng;

    fn random_obs(rng: &mut ChaCha8Rng, k: usize, t: usize) -> Vec<ObservationRecord> {
        (0..t)
            .map(|i| ObservationRecord {
                logits: (0..k).map(|_| rng.random_range(-3.0f32..3.0)).collect(),
                distance: rng.random_range(0.3f32..6.0),
                incidence_cos: rng.random_range(0.0f32..1.0),
                frame_index: i as u32,
            })
            .collect()
    }

    fn top_two_gap(l: &[f32]) -> f32 {
        let mut v = l.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        v[0] - v[1]
    }

    fn fixed(strategy: Strategy, obs: &[ObservationRecord], alpha: f64) -> Vec<f64> {
        let k = obs[0].logits.len();
        let mut acc = SemanticAccumulator::new(strategy, k, false);
        for r in obs {
            let s = ClassDistribution::softmax(&r.logits.iter().map(|&l| l as f64).collect::<Vec<_>>());
            acc.observe(&s, 1.0, alpha).unwrap();
        }
        acc.finalize().unwrap().into_vec()
    }

    fn random_cache(seed: u64, n: usize, k: usize) -> ObservationCache {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache = ObservationCache::new(k);
        for v in 0..n {
            let t = rng.random_range(1..8);
            let gt = (v % k) as u32;
            let mut obs = random_obs(&mut rng, k, t);
            for o in &mut obs {
                o.logits[gt as usize] += 1.5;
            }
            cache.push(v as u64, gt, &obs).unwrap();
        }
        cache
    }

    #[test]
    fn limiting_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let k = rng.random_range(2..8);
            let t = rng.random_range(1..20);
            let obs = random_obs(&mut rng, k, t);
            let a = DEFAULT_LAPLACE_ALPHA;
            for (params, strat) in [
                (GlfsParams::rbu(k), Strategy::Rbu),
                (GlfsParams::geometric_mean(k), Strategy::GeometricMean),
                (GlfsParams::naive_averaging(k), Strategy::NaiveAveraging),
            ] {
                let g = glfs_fuse(&obs, &params).unwrap();
                for (x, y) in g.probs().iter().zip(fixed(strat, &obs, a)) {
                    assert!((x - y).abs() < 1e-9, "{strat:?}");
                }
            }
            // the τ → 0⁺ limit is one-hot only once top-two gaps exceed τ·ln(1/tol)
            let obs: Vec<_> = obs.into_iter().filter(|r| top_two_gap(&r.logits) >= 0.02).collect();
            if obs.is_empty() {
                continue;
            }
            let mut hist = GlfsParams::naive_averaging(k);
            hist.set_tau(&vec![1e-3; k]).unwrap();
            let g = glfs_fuse(&obs, &hist).unwrap();
            for (x, y) in g.probs().iter().zip(fixed(Strategy::Histogram, &obs, a)) {
                assert!((x - y).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn empty_observations_error() {
        assert!(glfs_fuse(&[], &GlfsParams::rbu(3)).is_err());
    }

    #[test]
    fn order_invariance_and_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 4;
        let obs = random_obs(&mut rng, k, 9);
        let mut p = GlfsParams::with_gates(k, 0.6, 0.3);
        p.set_tau(&[0.7, 1.3, 2.0, 0.9]).unwrap();
        for (i, m) in p.m.iter_mut().enumerate() {
            *m = (i as f64 * 0.37).sin();
        }
        let base = glfs_fuse(&obs, &p).unwrap();
        let mut rev = obs.clone();
        rev.reverse();
        let r = glfs_fuse(&rev, &p).unwrap();
        for (a, b) in base.probs().iter().zip(r.probs()) {
            assert!((a - b).abs() < 1e-12);
        }

        // relabel classes by a cyclic shift of logits, tau and the M class axis
        let perm = |c: usize| (c + 1) % k;
        let mut q = p.clone();
        let per_class = p.distance_bins() * p.incidence_bins();
        for c in 0..k {
            q.u[perm(c)] = p.u[c];
            q.m[perm(c) * per_class..(perm(c) + 1) * per_class]
                .copy_from_slice(&p.m[c * per_class..(c + 1) * per_class]);
        }
        let shifted: Vec<ObservationRecord> = obs
            .iter()
            .map(|r| {
                let mut l = r.logits.clone();
                for c in 0..k {
                    l[perm(c)] = r.logits[c];
                }
                ObservationRecord { logits: l, ..r.clone() }
            })
            .collect();
        let s = glfs_fuse(&shifted, &q).unwrap();
        for c in 0..k {
            assert!((s.probs()[perm(c)] - base.probs()[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip() {
        let mut p = GlfsParams::with_gates(3, 0.25, 0.75);
        p.set_tau(&[0.5, 1.0, 2.0]).unwrap();
        p.m[5] = 2.0;
        let q = GlfsParams::from_json(&p.to_json()).unwrap();
        assert_eq!(q.class_count, 3);
        for (a, b) in p.flat().iter().zip(q.flat()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(GlfsParams::from_json(r#"{"class_count":2}"#).is_err());
    }

    #[test]
    fn mdece_hard_limit_and_perfect_predictor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 3;
        let mut probs = Vec::new();
        let mut gt = Vec::new();
        for _ in 0..300 {
            let l: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            probs.extend(ClassDistribution::softmax(&l).into_vec());
            gt.push(rng.random_range(0..k as u32));
        }
        let preds = PredictionSet::new(k, probs, gt).unwrap();
        let soft = compute_mdece(&preds, 15, 1e-4).unwrap();
        let hard = compute_mece(&preds, 15).unwrap();
        assert!((soft - hard).abs() < 1e-3, "{soft} vs {hard}");

        let perfect = PredictionSet::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![0, 1]).unwrap();
        assert!(compute_mdece(&perfect, 15, 0.01).unwrap() < 1e-6);
    }

    #[test]
    fn loss_term_isolation_and_mean_invariance() {
        let cache = random_cache(2, 40, 3);
        let p = GlfsParams::near_rbu(3);
        let cfg = TrainerConfig {
            eta: 0.0,
            ..Default::default()
        };
        let l = glfs_loss(&cache, &p, &cfg).unwrap();
        assert_eq!(l.loss, l.nll);

        let cfg = TrainerConfig::default();
        let once = glfs_loss(&cache, &p, &cfg).unwrap().loss;
        let idx: Vec<usize> = (0..cache.len()).chain(0..cache.len()).collect();
        let twice = glfs_loss(&cache.select(&idx), &p, &cfg).unwrap().loss;
        assert!((once - twice).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cache = random_cache(9, 64, 3);
        let mut p = GlfsParams::with_gates(3, 0.7, 0.4);
        p.set_tau(&[0.8, 1.1, 1.4]).unwrap();
        for (i, m) in p.m.iter_mut().enumerate() {
            *m += 0.2 * (i as f64).cos();
        }
        let cfg = TrainerConfig {
            eta: 2.0,
            sharpness: 0.05,
            ..Default::default()
        };
        let (_, grad) = glfs_loss_grad(&cache, &p, &cfg, Exec::Sequential).unwrap();
        let theta = p.flat();
        let h = 1e-5;
        for j in 0..theta.len() {
            let eval = |delta: f64| {
                let mut q = p.clone();
                let mut t = theta.clone();
                t[j] += delta;
                q.set_flat(&t);
                glfs_loss(&cache, &q, &cfg).unwrap().loss
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - grad[j]).abs() / fd.abs().max(grad[j].abs()).max(1e-6);
            assert!(err < 1e-4, "param {j}: analytic {} fd {fd}", grad[j]);
        }
    }

    #[test]
    fn training_reduces_loss_and_rejects_single_class() {
        let cache = random_cache(4, 200, 3);
        let cfg = TrainerConfig {
            epochs: 15,
            batch_size: 64,
            ..Default::default()
        };
        let init = cfg.initial_params(3);
        let r = train_glfs(&cache, &init, &cfg, Exec::default()).unwrap();
        assert_eq!(r.history.len(), 16);
        assert!(glfs_loss(&cache, &r.params, &cfg).unwrap().loss < r.history[0].loss);
        let again = train_glfs(&cache, &init, &cfg, Exec::Sequential).unwrap();
        assert_eq!(again.params, r.params);

        let single: Vec<usize> = (0..cache.len()).filter(|&i| cache.entries[i].gt_label == 0).collect();
        let r = train_glfs(&cache.select(&single), &init, &cfg, Exec::default());
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }
}
