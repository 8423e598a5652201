//! Scene-level fusion and the voxel map export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::ObservationCache;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::frames::Scene;
use crate::fusion::{Strategy, WeightScheme, DEFAULT_LAPLACE_ALPHA};
use crate::geom::Vec3;
use crate::glfs::{glfs_fuse, GlfsParams};
use crate::metrics::PredictionSet;
use crate::scaling::ScalingParams;
use crate::tsdf::{GridSpec, SemanticConfig, VoxelGrid};

#[derive(Clone, Debug)]
pub struct FuseOptions {
    pub strategy: Strategy,
    pub weights: WeightScheme,
    pub laplace_alpha: f64,
    pub scaling: Option<ScalingParams>,
    /// Required for `Strategy::Glfs`.
    pub glfs: Option<GlfsParams>,
    /// Keep raw observations for the observation cache.
    pub caching: bool,
    pub exec: Exec,
}

impl FuseOptions {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            weights: WeightScheme::Constant,
            laplace_alpha: DEFAULT_LAPLACE_ALPHA,
            scaling: None,
            glfs: None,
            caching: false,
            exec: Exec::default(),
        }
    }
}

/// One finalized surface voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct MapVoxel {
    pub index: [usize; 3],
    pub center: Vec3,
    pub sdf: f32,
    pub weight: f32,
    pub gt_label: Option<u16>,
    pub probs: Vec<f64>,
}

impl MapVoxel {
    pub fn pred(&self) -> usize {
        crate::fusion::argmax(&self.probs)
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.pred()]
    }
}

/// Fused grid plus the finalized semantic surface.
#[derive(Clone, Debug)]
pub struct FusedMap {
    pub grid: VoxelGrid,
    pub class_count: usize,
    pub strategy: Strategy,
    /// Surface voxels that received semantic observations, ascending index.
    pub voxels: Vec<MapVoxel>,
}

impl FusedMap {
    /// Predictions of every voxel with a ground-truth label.
    pub fn predictions(&self) -> Result<PredictionSet> {
        predictions_of(&self.voxels, self.class_count)
    }

    /// Observation cache of the labeled surface voxels.
    pub fn cache(&self, scene_id: &str) -> Result<ObservationCache> {
        ObservationCache::from_grid(&self.grid, self.class_count, scene_id)
    }
}

fn predictions_of(voxels: &[MapVoxel], k: usize) -> Result<PredictionSet> {
    let mut probs = Vec::new();
    let mut gt = Vec::new();
    for v in voxels {
        if let Some(l) = v.gt_label {
            probs.extend_from_slice(&v.probs);
            gt.push(l as u32);
        }
    }
    PredictionSet::new(k, probs, gt)
}

/// Integrates every frame, labels surface voxels from the ground-truth images
/// (when present) and finalizes the semantic distributions.
pub fn fuse_scene(scene: &Scene, opts: &FuseOptions) -> Result<FusedMap> {
    scene.validate()?;
    let k = scene.class_count;
    let glfs = match (opts.strategy, &opts.glfs) {
        (Strategy::Glfs, None) => return Err(Error::MissingGlfsParams),
        (Strategy::Glfs, Some(p)) => {
            if opts.scaling.is_some() {
                return Err(Error::InvalidInput(
                    "GLFS carries its own temperatures; drop the scaling params".into(),
                ));
            }
            p.validate()?;
            if p.class_count != k {
                return Err(Error::InvalidInput(format!(
                    "GLFS params are for {} classes, scene has {k}",
                    p.class_count
                )));
            }
            Some(p)
        }
        _ => None,
    };
    if let Some(s) = &opts.scaling {
        s.validate(k)?;
    }
    let mut grid = VoxelGrid::for_scene(scene)?;
    let semantic = SemanticConfig {
        strategy: opts.strategy,
        class_count: k,
        laplace_alpha: opts.laplace_alpha,
        caching: opts.caching,
        scaling: opts.scaling.clone(),
    };
    for frame in &scene.frames {
        grid.integrate_frame(frame, &scene.intrinsics, &opts.weights, Some(&semantic), opts.exec)?;
    }
    if scene.has_gt() {
        grid.assign_ground_truth(scene, opts.exec)?;
    }

    let surface: Vec<usize> = grid
        .extract_surface_voxels()
        .into_iter()
        .filter(|&i| grid.voxels[i].sem.is_some())
        .collect();
    let spec = grid.spec;
    let finalized: Vec<Result<Vec<MapVoxel>>> = opts.exec.map_chunks(surface.len(), 1024, |start, end| {
        surface[start..end]
            .iter()
            .map(|&i| {
                let v = &grid.voxels[i];
                let sem = v.sem.as_ref().expect("filtered above");
                let probs = match glfs {
                    Some(p) => glfs_fuse(sem.cache.as_deref().unwrap_or(&[]), p)?,
                    None => sem.finalize()?,
                };
                Ok(MapVoxel {
                    index: spec.coords(i),
                    center: spec.center_of(i),
                    sdf: v.sdf,
                    weight: v.weight,
                    gt_label: grid.gt_label(i),
                    probs: probs.into_vec(),
                })
            })
            .collect()
    });
    let mut voxels = Vec::with_capacity(surface.len());
    for chunk in finalized {
        voxels.extend(chunk?);
    }
    Ok(FusedMap {
        grid,
        class_count: k,
        strategy: opts.strategy,
        voxels,
    })
}

/// Sidecar describing an exported voxel map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelMapInfo {
    pub class_count: usize,
    pub class_names: Option<Vec<String>>,
    pub strategy: Strategy,
    pub voxel_size: f64,
    pub origin: Vec3,
    pub dims: [usize; 3],
    pub voxel_count: usize,
    pub labeled_count: usize,
}

/// Voxel map read back from disk; probabilities are float32-exact.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    pub info: VoxelMapInfo,
    pub voxels: Vec<MapVoxel>,
}

impl VoxelMap {
    pub fn predictions(&self) -> Result<PredictionSet> {
        predictions_of(&self.voxels, self.info.class_count)
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::new(self.info.origin, self.info.voxel_size, self.info.dims)
    }
}

pub fn sidecar_path(csv: &Path) -> std::path::PathBuf {
    csv.with_extension("json")
}

/// Writes `ix,iy,iz,sdf,weight,gt_label,pred_label,confidence,prob_0..` (gt
/// −1 when unknown) plus a JSON sidecar next to it.
pub fn write_voxel_map(map: &FusedMap, class_names: Option<&[String]>, path: &Path) -> Result<()> {
    let k = map.class_count;
    let mut s = String::from("ix,iy,iz,sdf,weight,gt_label,pred_label,confidence");
    for c in 0..k {
        let _ = write!(s, ",prob_{c}");
    }
    s.push('\n');
    for v in &map.voxels {
        let probs: Vec<f32> = v.probs.iter().map(|&p| p as f32).collect();
        let pred = crate::fusion::argmax(&probs);
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{}",
            v.index[0],
            v.index[1],
            v.index[2],
            v.sdf,
            v.weight,
            v.gt_label.map_or(-1, i64::from),
            pred,
            probs[pred]
        );
        for p in &probs {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))?;
    let spec = map.grid.spec;
    let info = VoxelMapInfo {
        class_count: k,
        class_names: class_names.map(|n| n.to_vec()),
        strategy: map.strategy,
        voxel_size: spec.voxel_size,
        origin: spec.origin,
        dims: spec.dims,
        voxel_count: map.voxels.len(),
        labeled_count: map.voxels.iter().filter(|v| v.gt_label.is_some()).count(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&info).expect("info serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_voxel_map(path: &Path) -> Result<VoxelMap> {
    let side = sidecar_path(path);
    let info: VoxelMapInfo = serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)
        .map_err(|e| Error::Parse {
            path: side.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let k = info.class_count;
    let spec = GridSpec::new(info.origin, info.voxel_size, info.dims);
    let mut voxels = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 + k {
            return Err(bad(format!("expected {} fields, found {}", 8 + k, f.len())));
        }
        let num = |i: usize| f[i].trim().parse::<f64>().map_err(|e| bad(format!("field {i}: {e}")));
        let idx = |i: usize| f[i].trim().parse::<usize>().map_err(|e| bad(format!("field {i}: {e}")));
        let index = [idx(0)?, idx(1)?, idx(2)?];
        if (0..3).any(|a| index[a] >= info.dims[a]) {
            return Err(bad("voxel index outside the grid".into()));
        }
        let gt = f[5].trim().parse::<i64>().map_err(|e| bad(format!("gt_label: {e}")))?;
        let probs = (0..k)
            .map(|c| f[8 + c].trim().parse::<f32>().map(f64::from).map_err(|e| bad(format!("prob_{c}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        voxels.push(MapVoxel {
            index,
            center: spec.center(index[0], index[1], index[2]),
            sdf: num(3)? as f32,
            weight: num(4)? as f32,
            gt_label: (gt >= 0).then_some(gt as u16),
            probs,
        });
    }
    Ok(VoxelMap { info, voxels })
}
