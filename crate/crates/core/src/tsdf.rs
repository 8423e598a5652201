//! Dense TSDF voxel grid with per-voxel semantic accumulators.
//!
//! Integration is voxel-centric: every voxel center is projected into the
//! frame, compared against the observed depth, and updated by incremental
//! weighted averaging. Voxels whose projective distance to the observed
//! surface is within the surface band also receive a semantic observation.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frames::{depth_is_valid, project_camera_point, Frame, Intrinsics, Scene, IGNORE_LABEL};
use crate::fusion::{ObservationRecord, SemanticAccumulator, Strategy, WeightScheme};
use crate::geom::{self, Vec3};
use crate::scaling::{scale_logits_into, ScalingParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// World position of the corner of voxel (0, 0, 0).
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub truncation: f64,
    pub surface_band: f64,
}

impl GridSpec {
    /// Defaults: truncation 4 voxels, surface band 1 voxel.
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Self {
        Self {
            origin,
            voxel_size,
            dims,
            truncation: 4.0 * voxel_size,
            surface_band: voxel_size,
        }
    }

    /// Grid covering `min..max` padded by the truncation distance.
    pub fn covering(min: Vec3, max: Vec3, voxel_size: f64) -> Self {
        let pad = 4.0 * voxel_size;
        let origin = [min[0] - pad, min[1] - pad, min[2] - pad];
        let dims = [0, 1, 2].map(|a| (((max[a] - min[a] + 2.0 * pad) / voxel_size).ceil() as usize).max(1));
        Self::new(origin, voxel_size, dims)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidInput("voxel_size must be > 0".into()));
        }
        if self.truncation < self.voxel_size {
            return Err(Error::InvalidInput("truncation must be >= voxel_size".into()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("grid dims must be >= 1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let ix = i % self.dims[0];
        let r = i / self.dims[0];
        [ix, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let s = self.voxel_size;
        [
            self.origin[0] + (ix as f64 + 0.5) * s,
            self.origin[1] + (iy as f64 + 0.5) * s,
            self.origin[2] + (iz as f64 + 0.5) * s,
        ]
    }

    pub fn center_of(&self, i: usize) -> Vec3 {
        let [x, y, z] = self.coords(i);
        self.center(x, y, z)
    }

    /// Voxel containing world point `p`, if inside the grid.
    pub fn locate(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Voxel {
    pub sdf: f32,
    pub weight: f32,
    pub color: [f32; 3],
    pub sem: Option<SemanticAccumulator>,
}

/// Semantic side of integration.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticConfig {
    pub strategy: Strategy,
    pub class_count: usize,
    pub laplace_alpha: f64,
    /// Keep raw observation records (required for 3D scaling and GLFS).
    pub caching: bool,
    /// Logit scaling applied before fusion.
    pub scaling: Option<ScalingParams>,
}

impl SemanticConfig {
    pub fn new(strategy: Strategy, class_count: usize) -> Self {
        Self {
            strategy,
            class_count,
            laplace_alpha: crate::fusion::DEFAULT_LAPLACE_ALPHA,
            caching: false,
            scaling: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub voxels: Vec<Voxel>,
    gt_label: Vec<u16>,
}

/// Camera quantities shared by every voxel of one frame.
struct FrameCamera<'a> {
    frame: &'a Frame,
    intr: &'a Intrinsics,
    rot: [[f64; 3]; 3],
    trans: Vec3,
    center: Vec3,
}

impl<'a> FrameCamera<'a> {
    fn new(frame: &'a Frame, intr: &'a Intrinsics) -> Self {
        let inv = frame.pose.inverse();
        Self {
            frame,
            intr,
            rot: inv.rotation(),
            trans: inv.translation(),
            center: frame.pose.translation(),
        }
    }

    #[inline]
    fn to_camera(&self, p: Vec3) -> Vec3 {
        let r = &self.rot;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.trans[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.trans[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.trans[2],
        ]
    }

    /// Projective signed distance of a voxel center: (δ, pixel row, pixel col).
    #[inline]
    fn observe(&self, p: Vec3) -> Option<(f64, usize, usize)> {
        let c = self.to_camera(p);
        let proj = project_camera_point(c, self.intr)?;
        let d = self.frame.depth[proj.row * self.intr.width + proj.col];
        if !depth_is_valid(d) {
            return None;
        }
        Some((d as f64 - proj.z, proj.row, proj.col))
    }

    /// Surface normal from the depth image around a pixel, in world frame,
    /// oriented toward the camera.
    fn depth_normal(&self, row: usize, col: usize) -> Option<Vec3> {
        let w = self.intr.width;
        let h = self.intr.height;
        if row == 0 || col == 0 || row + 1 >= h || col + 1 >= w {
            return None;
        }
        let point = |r: usize, c: usize| -> Option<Vec3> {
            let d = self.frame.depth[r * w + c];
            depth_is_valid(d).then(|| {
                let z = d as f64;
                [
                    (c as f64 - self.intr.cx) * z / self.intr.fx,
                    (r as f64 - self.intr.cy) * z / self.intr.fy,
                    z,
                ]
            })
        };
        let dx = geom::sub(point(row, col + 1)?, point(row, col - 1)?);
        let dy = geom::sub(point(row + 1, col)?, point(row - 1, col)?);
        let mut n = geom::normalize(geom::cross(dx, dy))?;
        let p = point(row, col)?;
        if geom::dot(n, p) > 0.0 {
            n = geom::scale(n, -1.0);
        }
        Some(self.frame.pose.rotate(n))
    }
}

impl VoxelGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            voxels: vec![Voxel::default(); spec.len()],
            gt_label: vec![IGNORE_LABEL; spec.len()],
        })
    }

    /// Grid for a scene: its stored bounds, else the extent of all valid depth.
    pub fn for_scene(scene: &Scene) -> Result<Self> {
        let (min, max) = match &scene.bounds {
            Some(b) => (b.min, b.max),
            None => depth_extent(scene)?,
        };
        Self::new(GridSpec::covering(min, max, scene.voxel_size))
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn gt_label(&self, i: usize) -> Option<u16> {
        let l = self.gt_label[i];
        (l != IGNORE_LABEL).then_some(l)
    }

    pub fn set_gt_label(&mut self, i: usize, label: Option<u16>) {
        self.gt_label[i] = label.unwrap_or(IGNORE_LABEL);
    }

    /// Geometry-only integration.
    pub fn integrate_depth_frame(
        &mut self,
        frame: &Frame,
        intr: &Intrinsics,
        scheme: &WeightScheme,
        exec: Exec,
    ) -> Result<usize> {
        self.integrate_frame(frame, intr, scheme, None, exec)
    }

    /// Integrates one frame; returns the number of voxels updated.
    pub fn integrate_frame(
        &mut self,
        frame: &Frame,
        intr: &Intrinsics,
        scheme: &WeightScheme,
        semantic: Option<&SemanticConfig>,
        exec: Exec,
    ) -> Result<usize> {
        let k = semantic.map_or(0, |s| s.class_count);
        if frame.depth.len() != intr.pixel_count() {
            return Err(Error::InvalidInput(format!(
                "frame {}: depth has {} pixels, intrinsics expect {}",
                frame.index,
                frame.depth.len(),
                intr.pixel_count()
            )));
        }
        if semantic.is_some() && frame.logits.len() != intr.pixel_count() * k {
            return Err(Error::InvalidInput(format!(
                "frame {}: logits do not match {k} classes",
                frame.index
            )));
        }

        let cam = FrameCamera::new(frame, intr);
        let needs_incidence = scheme.needs_normal()
            || semantic.is_some_and(|s| s.caching || s.strategy == Strategy::Glfs);
        // read-only geometry for normal estimation while the grid is mutated
        let snapshot: Option<Vec<(f32, f32)>> =
            needs_incidence.then(|| self.voxels.iter().map(|v| (v.sdf, v.weight)).collect());

        let spec = self.spec;
        let slab = spec.dims[0] * spec.dims[1];
        let trunc = spec.truncation;
        let band = spec.surface_band;
        let updated = AtomicUsize::new(0);
        let color = frame.color.as_deref();

        exec.for_each_chunk_mut(&mut self.voxels, slab, |iz, voxels| {
            let mut probs = vec![0.0; k];
            let mut count = 0usize;
            for iy in 0..spec.dims[1] {
                for ix in 0..spec.dims[0] {
                    let p = spec.center(ix, iy, iz);
                    let Some((delta, row, col)) = cam.observe(p) else {
                        continue;
                    };
                    if delta < -trunc {
                        continue;
                    }
                    let delta_t = delta.min(trunc);
                    let ray = geom::sub(p, cam.center);
                    let distance = geom::norm(ray);
                    let incidence = if needs_incidence {
                        let n = snapshot
                            .as_deref()
                            .and_then(|s| sdf_normal(&spec, s, ix, iy, iz))
                            .or_else(|| cam.depth_normal(row, col));
                        n.map_or(1.0, |n| -geom::dot(n, ray) / distance)
                    } else {
                        1.0
                    };
                    let w_t = scheme.weight(distance, incidence);

                    let v = &mut voxels[ix + spec.dims[0] * iy];
                    let w_old = v.weight as f64;
                    let w_new = w_old + w_t;
                    v.sdf = ((w_old * v.sdf as f64 + w_t * delta_t) / w_new) as f32;
                    if let Some(rgb) = color {
                        let px = 3 * (row * intr.width + col);
                        for c in 0..3 {
                            v.color[c] = ((w_old * v.color[c] as f64 + w_t * rgb[px + c] as f64)
                                / w_new) as f32;
                        }
                    }
                    v.weight = w_new as f32;
                    count += 1;

                    if let Some(sem) = semantic {
                        if delta.abs() <= band {
                            let logits = frame.pixel_logits(row, col, intr.width, k);
                            scale_logits_into(logits, sem.scaling.as_ref(), &mut probs);
                            let keep = sem.caching || sem.strategy == Strategy::Glfs;
                            let record = keep.then(|| ObservationRecord {
                                logits: logits.to_vec(),
                                distance: distance as f32,
                                incidence_cos: incidence.clamp(-1.0, 1.0) as f32,
                                frame_index: frame.index,
                            });
                            v.sem
                                .get_or_insert_with(|| {
                                    SemanticAccumulator::new(sem.strategy, k, sem.caching)
                                })
                                .observe_unchecked(&probs, w_t, sem.laplace_alpha, record);
                        }
                    }
                }
            }
            updated.fetch_add(count, Ordering::Relaxed);
        });
        Ok(updated.into_inner())
    }

    /// Observed voxels with |sdf| below the surface band, ascending index.
    pub fn extract_surface_voxels(&self) -> Vec<usize> {
        let band = self.spec.surface_band as f32;
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, v)| v.weight > 0.0 && v.sdf.abs() < band)
            .map(|(i, _)| i)
            .collect()
    }

    /// Majority vote of ground-truth pixel labels over every view in which a
    /// surface voxel receives a semantic observation. Returns the number of
    /// voxels labeled; voxels without votes stay unlabeled.
    pub fn assign_ground_truth(&mut self, scene: &Scene, exec: Exec) -> Result<usize> {
        if let Some(f) = scene.frames.iter().find(|f| f.gt_labels.is_none()) {
            return Err(Error::InvalidInput(format!(
                "frame {} has no ground-truth labels",
                f.index
            )));
        }
        let k = scene.class_count;
        let surface = self.extract_surface_voxels();
        let cams: Vec<FrameCamera> = scene
            .frames
            .iter()
            .map(|f| FrameCamera::new(f, &scene.intrinsics))
            .collect();
        let spec = self.spec;
        let width = scene.intrinsics.width;
        let labels: Vec<Vec<u16>> = exec.map_chunks(surface.len(), 4096, |start, end| {
            let mut votes = vec![0u32; k];
            surface[start..end]
                .iter()
                .map(|&i| {
                    votes.iter_mut().for_each(|v| *v = 0);
                    let p = spec.center_of(i);
                    for cam in &cams {
                        if let Some((delta, row, col)) = cam.observe(p) {
                            if delta.abs() <= spec.surface_band {
                                let l = cam.frame.gt_labels.as_ref().unwrap()[row * width + col];
                                if l != IGNORE_LABEL {
                                    votes[l as usize] += 1;
                                }
                            }
                        }
                    }
                    if votes.iter().all(|&v| v == 0) {
                        IGNORE_LABEL
                    } else {
                        crate::fusion::argmax(&votes) as u16
                    }
                })
                .collect()
        });
        let mut labeled = 0;
        for (&i, l) in surface.iter().zip(labels.into_iter().flatten()) {
            self.gt_label[i] = l;
            labeled += usize::from(l != IGNORE_LABEL);
        }
        Ok(labeled)
    }
}

/// Normalized TSDF gradient, when all six neighbors are observed.
fn sdf_normal(spec: &GridSpec, geo: &[(f32, f32)], ix: usize, iy: usize, iz: usize) -> Option<Vec3> {
    let d = spec.dims;
    if ix == 0 || iy == 0 || iz == 0 || ix + 1 >= d[0] || iy + 1 >= d[1] || iz + 1 >= d[2] {
        return None;
    }
    let at = |x: usize, y: usize, z: usize| -> Option<f64> {
        let (s, w) = geo[spec.linear(x, y, z)];
        (w > 0.0).then_some(s as f64)
    };
    let g = [
        at(ix + 1, iy, iz)? - at(ix - 1, iy, iz)?,
        at(ix, iy + 1, iz)? - at(ix, iy - 1, iz)?,
        at(ix, iy, iz + 1)? - at(ix, iy, iz - 1)?,
    ];
    let n = geom::norm(g);
    (n > 1e-6).then(|| geom::scale(g, 1.0 / n))
}

/// Bounding box of all back-projected valid depth pixels.
fn depth_extent(scene: &Scene) -> Result<(Vec3, Vec3)> {
    let intr = &scene.intrinsics;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for f in &scene.frames {
        for row in 0..intr.height {
            for col in 0..intr.width {
                let d = f.depth[row * intr.width + col];
                if !depth_is_valid(d) {
                    continue;
                }
                let p = crate::frames::back_project(col as f64, row as f64, d as f64, &f.pose, intr);
                for a in 0..3 {
                    min[a] = min[a].min(p[a]);
                    max[a] = max[a].max(p[a]);
                }
            }
        }
    }
    if !min[0].is_finite() {
        return Err(Error::InvalidInput("scene has no valid depth".into()));
    }
    Ok((min, max))
}
