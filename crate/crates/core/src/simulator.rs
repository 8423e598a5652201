//! Synthetic labeled scenes: axis-aligned boxes and planes rendered by
//! analytic ray casting, plus an emulated segmentation model with
//! controllable miscalibration.
//!
//! The emulated model draws a *favored* class j from the confusion row of the
//! true class i (optionally shared across views of the same world patch, so
//! errors correlate between frames), then emits logits ln t + noise where t is
//! row C[i] with entries i and j swapped. The favored class thus carries
//! confidence C[i][i] and is correct with exactly that probability, so the
//! noise-free output is calibrated even conditioned on the true class;
//! dividing the logits by τ* is the controlled distortion.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frames::{save_scene, Bounds, Frame, Intrinsics, Scene, IGNORE_LABEL};
use crate::geom::{self, Pose, Vec3};
use crate::tsdf::GridSpec;

pub const GT_VOXELS_FILE: &str = "gt_voxels.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SceneObject {
    /// Axis-aligned box `[min, max]`.
    Box { class: u16, min: Vec3, max: Vec3 },
    /// Infinite plane `p[axis] = offset`.
    Plane { class: u16, axis: Axis, offset: f64 },
}

impl SceneObject {
    pub fn class(&self) -> u16 {
        match self {
            SceneObject::Box { class, .. } | SceneObject::Plane { class, .. } => *class,
        }
    }

    /// Nearest positive ray parameter, with the hit face (0..6 for boxes:
    /// 2·axis + [0 = min side, 1 = max side]; 0 for planes) and face normal.
    fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, u8, Vec3)> {
        const EPS: f64 = 1e-9;
        match *self {
            SceneObject::Plane { axis, offset, .. } => {
                let a = axis.index();
                if d[a].abs() < 1e-15 {
                    return None;
                }
                let t = (offset - o[a]) / d[a];
                let mut n = [0.0; 3];
                n[a] = 1.0;
                (t > EPS).then_some((t, 0, n))
            }
            SceneObject::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut face = 0u8;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (min[a] - o[a]) / d[a];
                    let tb = (max[a] - o[a]) / d[a];
                    let (near, far, near_face) = if ta < tb {
                        (ta, tb, 2 * a as u8)
                    } else {
                        (tb, ta, 2 * a as u8 + 1)
                    };
                    if near > t0 {
                        t0 = near;
                        face = near_face;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= EPS {
                    return None;
                }
                let mut n = [0.0; 3];
                n[(face / 2) as usize] = if face % 2 == 0 { -1.0 } else { 1.0 };
                Some((t0, face, n))
            }
        }
    }

    /// Unsigned distance from `p` to the object's surface.
    fn surface_distance(&self, p: Vec3) -> f64 {
        match *self {
            SceneObject::Plane { axis, offset, .. } => (p[axis.index()] - offset).abs(),
            SceneObject::Box { min, max, .. } => {
                let inside = (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a]);
                if inside {
                    (0..3)
                        .map(|a| (p[a] - min[a]).min(max[a] - p[a]))
                        .fold(f64::INFINITY, f64::min)
                } else {
                    let v: Vec3 = std::array::from_fn(|a| (min[a] - p[a]).max(p[a] - max[a]).max(0.0));
                    geom::norm(v)
                }
            }
        }
    }
}

/// Angular sector (degrees, around the trajectory center) where the camera
/// lingers `multiplier` times longer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwellRegion {
    pub from_deg: f64,
    pub to_deg: f64,
    pub multiplier: f64,
}

fn in_sector(deg: f64, from: f64, to: f64) -> bool {
    let norm = |x: f64| x.rem_euclid(360.0);
    let (d, f, t) = (norm(deg), norm(from), norm(to));
    if f <= t {
        d >= f && d < t
    } else {
        d >= f || d < t
    }
}

fn dwell_multiplier(dwell: &[DwellRegion], deg: f64) -> f64 {
    dwell
        .iter()
        .filter(|r| in_sector(deg, r.from_deg, r.to_deg))
        .map(|r| r.multiplier)
        .fold(1.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Trajectory {
    /// One elliptical lap around `center`, frame density ∝ dwell multiplier.
    Orbit {
        center: [f64; 2],
        radii: [f64; 2],
        height: f64,
        target: Vec3,
        #[serde(default)]
        start_deg: f64,
        #[serde(default)]
        dwell: Vec<DwellRegion>,
    },
    /// Seeded random walk at fixed height; steps shrink by the dwell multiplier.
    RandomWalk {
        center: [f64; 2],
        height: f64,
        target: Vec3,
        step: f64,
        margin: f64,
        #[serde(default)]
        dwell: Vec<DwellRegion>,
    },
}

impl Trajectory {
    pub fn center(&self) -> [f64; 2] {
        match self {
            Trajectory::Orbit { center, .. } | Trajectory::RandomWalk { center, .. } => *center,
        }
    }

    fn target(&self) -> Vec3 {
        match self {
            Trajectory::Orbit { target, .. } | Trajectory::RandomWalk { target, .. } => *target,
        }
    }

    /// Camera angle around the trajectory center, degrees in [0, 360).
    pub fn sector_deg(&self, eye: Vec3) -> f64 {
        let c = self.center();
        (eye[1] - c[1]).atan2(eye[0] - c[0]).to_degrees().rem_euclid(360.0)
    }

    fn eyes(&self, frames: usize, room: [f64; 3], seed: u64) -> Vec<Vec3> {
        match self {
            Trajectory::Orbit {
                center,
                radii,
                height,
                start_deg,
                dwell,
                ..
            } => {
                // place frames at equal quantiles of the dwell density
                const STEPS: usize = 3600;
                let mut cdf = Vec::with_capacity(STEPS + 1);
                cdf.push(0.0);
                for s in 0..STEPS {
                    let deg = start_deg + 360.0 * (s as f64 + 0.5) / STEPS as f64;
                    cdf.push(cdf[s] + dwell_multiplier(dwell, deg));
                }
                let total = cdf[STEPS];
                (0..frames)
                    .map(|i| {
                        let q = (i as f64 + 0.5) / frames as f64 * total;
                        let s = cdf.partition_point(|&c| c <= q).clamp(1, STEPS) - 1;
                        let frac = (q - cdf[s]) / (cdf[s + 1] - cdf[s]);
                        let deg = start_deg + 360.0 * (s as f64 + frac) / STEPS as f64;
                        let th = deg.to_radians();
                        [center[0] + radii[0] * th.cos(), center[1] + radii[1] * th.sin(), *height]
                    })
                    .collect()
            }
            Trajectory::RandomWalk {
                center,
                height,
                step,
                margin,
                dwell,
                ..
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_c0de);
                let turn = Normal::new(0.0, 0.5).expect("valid normal");
                let mut pos = [center[0], center[1]];
                let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let mut out = Vec::with_capacity(frames);
                for _ in 0..frames {
                    out.push([pos[0], pos[1], *height]);
                    heading += turn.sample(&mut rng);
                    let deg = (pos[1] - center[1]).atan2(pos[0] - center[0]).to_degrees();
                    let len = step / dwell_multiplier(dwell, deg);
                    for a in 0..2 {
                        let dir = if a == 0 { heading.cos() } else { heading.sin() };
                        let mut v = pos[a] + len * dir;
                        let (lo, hi) = (*margin, room[a] - margin);
                        if v < lo || v > hi {
                            v = v.clamp(lo, hi);
                            heading = if a == 0 {
                                std::f64::consts::PI - heading
                            } else {
                                -heading
                            };
                        }
                        pos[a] = v;
                    }
                }
                out
            }
        }
    }

    /// Camera-to-world poses of all frames.
    pub fn poses(&self, frames: usize, room: [f64; 3], seed: u64) -> Result<Vec<Pose>> {
        let target = self.target();
        self.eyes(frames, room, seed)
            .into_iter()
            .map(|eye| {
                Pose::look_at(eye, target, [0.0, 0.0, 1.0])
                    .ok_or_else(|| Error::InvalidInput(format!("degenerate camera at {eye:?}")))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Room extent from the origin, meters.
    pub room: [f64; 3],
    pub voxel_size: f64,
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub class_count: usize,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    pub objects: Vec<SceneObject>,
    pub trajectory: Trajectory,
}

/// Flips the favored class of `from_class` pixels to `to_class` when every
/// given view predicate holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewBias {
    pub from_class: u16,
    pub to_class: u16,
    /// Grazing views: incidence cosine at or below this.
    #[serde(default)]
    pub max_incidence_cos: Option<f64>,
    /// Camera sector `[from_deg, to_deg)` around the trajectory center.
    #[serde(default)]
    pub sector_deg: Option<[f64; 2]>,
    #[serde(default = "one")]
    pub probability: f64,
}

fn one() -> f64 {
    1.0
}

impl ViewBias {
    pub fn matches(&self, gt: u16, view: &ViewFeatures) -> bool {
        gt == self.from_class
            && self.max_incidence_cos.is_none_or(|c| view.incidence_cos <= c)
            && self
                .sector_deg
                .is_none_or(|[f, t]| in_sector(view.sector_deg, f, t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterSpec {
    /// Row i: probability that the evidence favors class j given true class i.
    pub confusion: Vec<Vec<f64>>,
    /// Evidence temperature; logits are divided by it (τ* < 1 ⇒ overconfident).
    pub tau_star: f64,
    /// Std of Gaussian noise added to every logit before the τ* division.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub outlier_rate: f64,
    #[serde(default = "default_outlier_confidence")]
    pub outlier_confidence: f64,
    /// Probability that a pixel reuses its world patch's favored-class draw
    /// instead of a fresh one (view-correlated errors).
    #[serde(default)]
    pub correlation: f64,
    /// Edge length of the world patches sharing a draw, meters.
    #[serde(default = "default_patch_size")]
    pub patch_size: f64,
    #[serde(default)]
    pub view_bias: Vec<ViewBias>,
}

fn default_outlier_confidence() -> f64 {
    0.99
}

fn default_patch_size() -> f64 {
    0.25
}

/// Per-pixel viewing context handed to the segmenter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewFeatures {
    pub incidence_cos: f64,
    pub sector_deg: f64,
    /// Uniform draw shared by all views of the pixel's world patch.
    pub patch_draw: Option<f64>,
}

impl SegmenterSpec {
    /// Confusion with the given diagonal and uniform off-diagonal mass.
    pub fn with_diagonal(diagonal: &[f64], tau_star: f64) -> Self {
        let k = diagonal.len();
        let confusion = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        if i == j {
                            diagonal[i]
                        } else {
                            (1.0 - diagonal[i]) / (k - 1) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            confusion,
            tau_star,
            noise: 0.0,
            outlier_rate: 0.0,
            outlier_confidence: default_outlier_confidence(),
            correlation: 0.0,
            patch_size: default_patch_size(),
            view_bias: Vec::new(),
        }
    }

    /// Noise-free perfect segmenter.
    pub fn identity(k: usize) -> Self {
        Self::with_diagonal(&vec![1.0; k], 1.0)
    }

    /// Segmenter of the standard fixture: τ* = 0.5, 2% outliers.
    pub fn standard() -> Self {
        Self {
            noise: 0.2,
            outlier_rate: 0.02,
            correlation: 0.95,
            ..Self::with_diagonal(&[0.92, 0.88, 0.75, 0.8], 0.5)
        }
    }

    pub fn class_count(&self) -> usize {
        self.confusion.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.class_count();
        if k < 2 {
            return Err(Error::InvalidInput("confusion needs >= 2 classes".into()));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != k || (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "confusion row {i} is not a distribution over {k} classes"
                )));
            }
        }
        if !(self.tau_star > 0.0 && self.tau_star.is_finite()) {
            return Err(Error::InvalidInput("tau_star must be > 0".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.outlier_rate) || !unit(self.correlation) || !(self.noise >= 0.0) {
            return Err(Error::InvalidInput(
                "outlier_rate and correlation must be in [0, 1], noise >= 0".into(),
            ));
        }
        if !(self.outlier_confidence > 0.0 && self.outlier_confidence < 1.0) || !(self.patch_size > 0.0) {
            return Err(Error::InvalidInput(
                "outlier_confidence must be in (0, 1) and patch_size > 0".into(),
            ));
        }
        for b in &self.view_bias {
            if b.from_class as usize >= k || b.to_class as usize >= k || !unit(b.probability) {
                return Err(Error::InvalidInput("view bias classes/probability out of range".into()));
            }
            if b.max_incidence_cos.is_none() && b.sector_deg.is_none() {
                return Err(Error::InvalidInput("view bias needs a predicate".into()));
            }
        }
        Ok(())
    }
}

/// Scene and segmenter sections of one simulation spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub scene: SceneSpec,
    pub segmenter: SegmenterSpec,
}

impl SimulationSpec {
    pub fn standard() -> Self {
        Self {
            scene: SceneSpec::standard(),
            segmenter: SegmenterSpec::standard(),
        }
    }
}

impl SceneSpec {
    /// Room 6×4×3 m: floor, walls (ceiling labeled wall), two boxes;
    /// 60-frame orbit of 320×240 images, 5 cm voxels, seed 7.
    pub fn standard() -> Self {
        let plane = |class, axis, offset| SceneObject::Plane { class, axis, offset };
        Self {
            seed: 7,
            room: [6.0, 4.0, 3.0],
            voxel_size: 0.05,
            frames: 60,
            intrinsics: Intrinsics {
                fx: 260.0,
                fy: 260.0,
                cx: 160.0,
                cy: 120.0,
                width: 320,
                height: 240,
            },
            class_count: 4,
            class_names: Some(["floor", "wall", "box-a", "box-b"].map(String::from).to_vec()),
            objects: vec![
                plane(0, Axis::Z, 0.0),
                plane(1, Axis::Z, 3.0),
                plane(1, Axis::X, 0.0),
                plane(1, Axis::X, 6.0),
                plane(1, Axis::Y, 0.0),
                plane(1, Axis::Y, 4.0),
                SceneObject::Box {
                    class: 2,
                    min: [2.0, 1.3, 0.0],
                    max: [2.8, 2.0, 0.8],
                },
                SceneObject::Box {
                    class: 3,
                    min: [3.3, 1.9, 0.0],
                    max: [4.1, 2.7, 1.1],
                },
            ],
            trajectory: Trajectory::Orbit {
                center: [3.0, 2.0],
                radii: [2.3, 1.5],
                height: 1.6,
                target: [3.0, 2.0, 0.5],
                start_deg: 0.0,
                dwell: Vec::new(),
            },
        }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            min: [0.0; 3],
            max: self.room,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.frames == 0 {
            return Err(Error::InvalidInput("frames must be >= 1".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::InvalidInput("scene has no objects".into()));
        }
        if !(self.voxel_size > 0.0) || self.room.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::InvalidInput("room and voxel_size must be positive".into()));
        }
        let mut classes = std::collections::BTreeSet::new();
        for o in &self.objects {
            if o.class() as usize >= self.class_count {
                return Err(Error::InvalidInput(format!("object class {} out of range", o.class())));
            }
            classes.insert(o.class());
            let inside = match o {
                SceneObject::Box { min, max, .. } => {
                    (0..3).all(|a| 0.0 <= min[a] && min[a] < max[a] && max[a] <= self.room[a])
                }
                SceneObject::Plane { axis, offset, .. } => (0.0..=self.room[axis.index()]).contains(offset),
            };
            if !inside {
                return Err(Error::InvalidInput(format!("object {o:?} is outside the room")));
            }
        }
        if classes.len() < 2 {
            return Err(Error::InvalidInput("scene needs >= 2 distinct classes".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.class_count {
                return Err(Error::InvalidInput("class_names length != class_count".into()));
            }
        }
        Ok(())
    }

    /// Nearest hit along a ray.
    pub fn raycast(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, o) in self.objects.iter().enumerate() {
            if let Some((t, face, normal)) = o.intersect(origin, dir) {
                if best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        class: o.class(),
                        object: i,
                        face,
                        normal,
                    });
                }
            }
        }
        best
    }

    /// Distance to and class of the nearest object surface.
    pub fn nearest_surface(&self, p: Vec3) -> (f64, u16) {
        self.objects
            .iter()
            .map(|o| (o.surface_distance(p), o.class()))
            .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera z-depth for rays with unit camera z.
    pub t: f64,
    pub class: u16,
    pub object: usize,
    pub face: u8,
    pub normal: Vec3,
}

/// Depth, labels and per-pixel hits of one view.
pub struct RenderedView {
    pub depth: Vec<f32>,
    pub labels: Vec<u16>,
    pub hits: Vec<Option<Hit>>,
}

/// Ray through the center of pixel (row, col) in world coordinates, scaled
/// so its camera-frame z component is 1.
pub fn pixel_ray(pose: &Pose, intr: &Intrinsics, row: usize, col: usize) -> Vec3 {
    let c = [
        (col as f64 - intr.cx) / intr.fx,
        (row as f64 - intr.cy) / intr.fy,
        1.0,
    ];
    pose.rotate(c)
}

pub fn render_view(spec: &SceneSpec, pose: &Pose) -> RenderedView {
    let intr = &spec.intrinsics;
    let n = intr.pixel_count();
    let origin = pose.translation();
    let mut out = RenderedView {
        depth: vec![0.0; n],
        labels: vec![IGNORE_LABEL; n],
        hits: vec![None; n],
    };
    for row in 0..intr.height {
        for col in 0..intr.width {
            let i = row * intr.width + col;
            if let Some(hit) = spec.raycast(origin, pixel_ray(pose, intr, row, col)) {
                out.depth[i] = hit.t as f32;
                out.labels[i] = hit.class;
                out.hits[i] = Some(hit);
            }
        }
    }
    out
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform [0, 1) value fixed per (seed, world patch, class).
fn patch_draw(seed: u64, p: Vec3, patch: f64, class: u16) -> f64 {
    let mut h = splitmix64(seed ^ 0x5eed_9a7c);
    for v in p {
        h = splitmix64(h ^ ((v / patch).floor() as i64 as u64));
    }
    h = splitmix64(h ^ class as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Length-K logits for one pixel of true class `gt`.
pub fn emulate_segmentation<R: Rng + ?Sized>(
    gt: u16,
    view: &ViewFeatures,
    seg: &SegmenterSpec,
    rng: &mut R,
) -> Vec<f32> {
    let k = seg.class_count();
    if seg.outlier_rate > 0.0 && rng.random::<f64>() < seg.outlier_rate {
        let class = rng.random_range(0..k);
        let c = seg.outlier_confidence;
        let rest = ((1.0 - c) / (k - 1) as f64).ln();
        return (0..k)
            .map(|j| (if j == class { c.ln() } else { rest } / seg.tau_star) as f32)
            .collect();
    }

    let u = match view.patch_draw {
        Some(u) if seg.correlation > 0.0 && rng.random::<f64>() < seg.correlation => u,
        _ => rng.random::<f64>(),
    };
    let row = &seg.confusion[gt as usize];
    let mut favored = k - 1;
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            favored = j;
            break;
        }
    }
    for rule in &seg.view_bias {
        if rule.matches(gt, view) && (rule.probability >= 1.0 || rng.random::<f64>() < rule.probability) {
            favored = rule.to_class as usize;
        }
    }

    // the true class's confusion row with the favored class taking the
    // diagonal mass: confidence C[i][i] is right exactly w.p. C[i][i]
    let mut target = seg.confusion[gt as usize].clone();
    target.swap(favored, gt as usize);
    let noise = (seg.noise > 0.0).then(|| Normal::new(0.0, seg.noise).expect("valid noise"));
    target
        .iter()
        .map(|p| {
            // floor keeps impossible classes finite
            let mut l = p.max(1e-12).ln();
            if let Some(n) = &noise {
                l += n.sample(rng);
            }
            (l / seg.tau_star) as f32
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtVoxel {
    pub index: [usize; 3],
    pub label: u16,
}

#[derive(Clone, Debug)]
pub struct SimulatedScene {
    pub scene: Scene,
    /// Analytic labels of every grid voxel within the surface band.
    pub gt_voxels: Vec<GtVoxel>,
}

/// Labels every voxel of the scene grid whose center lies within the surface
/// band of some object, by its nearest surface.
pub fn analytic_gt_voxels(spec: &SceneSpec, exec: Exec) -> Vec<GtVoxel> {
    let b = spec.bounds();
    let grid = GridSpec::covering(b.min, b.max, spec.voxel_size);
    let per_slab = grid.dims[0] * grid.dims[1];
    exec.map_range(grid.dims[2], |iz| {
        let mut out = Vec::new();
        for i in iz * per_slab..(iz + 1) * per_slab {
            let [ix, iy, iz] = grid.coords(i);
            let (d, class) = spec.nearest_surface(grid.center(ix, iy, iz));
            if d <= grid.surface_band {
                out.push(GtVoxel {
                    index: [ix, iy, iz],
                    label: class,
                });
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Renders and segments every frame in memory.
pub fn simulate(spec: &SceneSpec, seg: &SegmenterSpec, exec: Exec) -> Result<SimulatedScene> {
    spec.validate()?;
    seg.validate()?;
    let k = spec.class_count;
    if seg.class_count() != k {
        return Err(Error::InvalidInput(format!(
            "segmenter has {} classes, scene has {k}",
            seg.class_count()
        )));
    }
    let poses = spec.trajectory.poses(spec.frames, spec.room, spec.seed)?;
    let views: Vec<RenderedView> = exec.map_range(poses.len(), |i| render_view(spec, &poses[i]));

    let intr = spec.intrinsics;
    let logits: Vec<Vec<f32>> = exec.map_range(poses.len(), |f| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(f as u64 + 1);
        let pose = &poses[f];
        let eye = pose.translation();
        let sector = spec.trajectory.sector_deg(eye);
        let view = &views[f];
        let mut out = Vec::with_capacity(intr.pixel_count() * k);
        for row in 0..intr.height {
            for col in 0..intr.width {
                let i = row * intr.width + col;
                let Some(hit) = view.hits[i] else {
                    out.extend(std::iter::repeat_n(0.0f32, k));
                    continue;
                };
                let ray = pixel_ray(pose, &intr, row, col);
                let point = geom::add(eye, geom::scale(ray, hit.t));
                let features = ViewFeatures {
                    incidence_cos: geom::dot(geom::normalize(ray).unwrap_or([0.0, 0.0, 1.0]), hit.normal).abs(),
                    sector_deg: sector,
                    patch_draw: Some(patch_draw(spec.seed, point, seg.patch_size, hit.class)),
                };
                out.extend(emulate_segmentation(hit.class, &features, seg, &mut rng));
            }
        }
        out
    });

    let frames = views
        .into_iter()
        .zip(logits)
        .zip(&poses)
        .enumerate()
        .map(|(i, ((v, l), pose))| Frame {
            index: i as u32,
            pose: *pose,
            depth: v.depth,
            logits: l,
            gt_labels: Some(v.labels),
            color: None,
        })
        .collect();
    let scene = Scene {
        intrinsics: intr,
        frames,
        class_count: k,
        class_names: spec.class_names.clone(),
        voxel_size: spec.voxel_size,
        bounds: Some(spec.bounds()),
    };
    Ok(SimulatedScene {
        scene,
        gt_voxels: analytic_gt_voxels(spec, exec),
    })
}

/// Simulates and writes the scene directory plus `gt_voxels.csv`.
pub fn generate_scene(spec: &SceneSpec, seg: &SegmenterSpec, out: &Path, exec: Exec) -> Result<SimulatedScene> {
    let sim = simulate(spec, seg, exec)?;
    save_scene(&sim.scene, out)?;
    write_gt_voxels(&sim.gt_voxels, &out.join(GT_VOXELS_FILE))?;
    Ok(sim)
}

pub fn write_gt_voxels(voxels: &[GtVoxel], path: &Path) -> Result<()> {
    let mut s = String::with_capacity(voxels.len() * 16 + 16);
    s.push_str("ix,iy,iz,label\n");
    for v in voxels {
        let _ = writeln!(s, "{},{},{},{}", v.index[0], v.index[1], v.index[2], v.label);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_gt_voxels(path: &Path) -> Result<Vec<GtVoxel>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let idx = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("bad voxel index"));
        out.push(GtVoxel {
            index: [idx(f[0])?, idx(f[1])?, idx(f[2])?],
            label: f[3].trim().parse().map_err(|_| bad("bad label"))?,
        });
    }
    Ok(out)
}
