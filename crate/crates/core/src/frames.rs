//! Frame data model, pinhole projection and the on-disk scene format.
//!
//! A scene directory looks like
//!
//! ```text
//! scene.meta                  key=value lines
//! frames/000000.pose.txt      16 ASCII floats, row-major camera-to-world
//! frames/000000.depth.f32     H*W little-endian f32 meters (0 = invalid)
//! frames/000000.logits.f32    H*W*K little-endian f32, class fastest
//! frames/000000.labels.u16    optional H*W little-endian u16 class ids
//! frames/000000.color.rgb8    optional H*W*3 bytes
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Pose, Vec3};

/// Label value for pixels that carry no ground truth (e.g. rays that miss).
pub const IGNORE_LABEL: u16 = u16::MAX;

const RIGID_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Axis-aligned world-space box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: u32,
    pub pose: Pose,
    pub depth: Vec<f32>,
    pub logits: Vec<f32>,
    pub gt_labels: Option<Vec<u16>>,
    pub color: Option<Vec<u8>>,
}

impl Frame {
    /// Logits of pixel `(row, col)`.
    pub fn pixel_logits(&self, row: usize, col: usize, width: usize, k: usize) -> &[f32] {
        let off = (row * width + col) * k;
        &self.logits[off..off + k]
    }

    /// Checks buffer sizes and the pose against the scene layout.
    pub fn validate(&self, intr: &Intrinsics, k: usize) -> Result<()> {
        let n = intr.pixel_count();
        let name = |ext: &str| PathBuf::from(format!("frame {:06}.{ext}", self.index));
        if self.depth.len() != n {
            return Err(Error::ShapeMismatch {
                file: name("depth.f32"),
                expected: n,
                found: self.depth.len(),
            });
        }
        if self.logits.len() != n * k {
            return Err(Error::ShapeMismatch {
                file: name("logits.f32"),
                expected: n * k,
                found: self.logits.len(),
            });
        }
        if let Some(labels) = &self.gt_labels {
            if labels.len() != n {
                return Err(Error::ShapeMismatch {
                    file: name("labels.u16"),
                    expected: n,
                    found: labels.len(),
                });
            }
            if let Some(bad) = labels
                .iter()
                .find(|&&l| l != IGNORE_LABEL && l as usize >= k)
            {
                return Err(Error::InvalidInput(format!(
                    "frame {}: label {bad} outside [0, {k})",
                    self.index
                )));
            }
        }
        if let Some(color) = &self.color {
            if color.len() != 3 * n {
                return Err(Error::ShapeMismatch {
                    file: name("color.rgb8"),
                    expected: 3 * n,
                    found: color.len(),
                });
            }
        }
        if !self.pose.is_rigid(RIGID_TOL) {
            return Err(Error::InvalidInput(format!(
                "frame {}: pose is not rigid (error {:.3e})",
                self.index,
                self.pose.rigidity_error()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub class_count: usize,
    pub class_names: Option<Vec<String>>,
    pub voxel_size: f64,
    /// Optional map bounds; when absent they are derived from the depth data.
    pub bounds: Option<Bounds>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.class_count < 2 {
            return Err(Error::InvalidInput("class_count must be >= 2".into()));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::InvalidInput("voxel_size must be > 0".into()));
        }
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("scene has no frames".into()));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.class_count {
                return Err(Error::InvalidInput(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.class_count
                )));
            }
        }
        let mut prev: Option<u32> = None;
        for f in &self.frames {
            if prev.is_some_and(|p| f.index <= p) {
                return Err(Error::InvalidInput(format!(
                    "frame indices not strictly increasing at {}",
                    f.index
                )));
            }
            prev = Some(f.index);
            f.validate(&self.intrinsics, self.class_count)?;
        }
        Ok(())
    }

    pub fn has_gt(&self) -> bool {
        self.frames.iter().all(|f| f.gt_labels.is_some())
    }
}

/// Result of projecting a world point into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub col: usize,
    pub row: usize,
}

/// Projects world point `p` through a camera-to-world `pose`.
///
/// Returns `None` when the point is behind the camera or its nearest pixel
/// falls outside the image.
pub fn project_point(p: Vec3, pose: &Pose, intr: &Intrinsics) -> Option<Projection> {
    project_camera_point(pose.inverse().transform_point(p), intr)
}

/// Same as [`project_point`] for a point already in camera coordinates.
#[inline]
pub fn project_camera_point(c: Vec3, intr: &Intrinsics) -> Option<Projection> {
    let z = c[2];
    if !(z > 0.0) {
        return None;
    }
    let u = intr.fx * c[0] / z + intr.cx;
    let v = intr.fy * c[1] / z + intr.cy;
    let col = u.round();
    let row = v.round();
    if col < 0.0 || row < 0.0 || col >= intr.width as f64 || row >= intr.height as f64 {
        return None;
    }
    Some(Projection {
        u,
        v,
        z,
        col: col as usize,
        row: row as usize,
    })
}

/// Inverse of the pinhole projection: pixel coordinates plus depth to world.
pub fn back_project(u: f64, v: f64, z: f64, pose: &Pose, intr: &Intrinsics) -> Vec3 {
    let c = [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z];
    pose.transform_point(c)
}

/// True for depths usable during integration.
#[inline]
pub fn depth_is_valid(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

// ---------------------------------------------------------------------------
// scene directory I/O

const META_FILE: &str = "scene.meta";
const FRAMES_DIR: &str = "frames";

fn frame_path(dir: &Path, index: u32, ext: &str) -> PathBuf {
    dir.join(FRAMES_DIR).join(format!("{index:06}.{ext}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn read_f32s(path: &Path) -> Result<Vec<f32>> {
    let bytes = read_file(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated {
            file: path.to_path_buf(),
            bytes: bytes.len(),
            width: 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_u16s(path: &Path) -> Result<Vec<u16>> {
    let bytes = read_file(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Truncated {
            file: path.to_path_buf(),
            bytes: bytes.len(),
            width: 2,
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

fn expect_len(path: &Path, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            file: path.to_path_buf(),
            expected,
            found,
        })
    }
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let intr = &scene.intrinsics;
    let mut meta = String::new();
    let _ = writeln!(meta, "voxel_size={}", scene.voxel_size);
    let _ = writeln!(meta, "class_count={}", scene.class_count);
    let _ = writeln!(meta, "width={}", intr.width);
    let _ = writeln!(meta, "height={}", intr.height);
    let _ = writeln!(meta, "fx={}", intr.fx);
    let _ = writeln!(meta, "fy={}", intr.fy);
    let _ = writeln!(meta, "cx={}", intr.cx);
    let _ = writeln!(meta, "cy={}", intr.cy);
    if let Some(names) = &scene.class_names {
        let _ = writeln!(meta, "class_names={}", names.join(","));
    }
    if let Some(b) = &scene.bounds {
        let _ = writeln!(
            meta,
            "bounds={},{},{},{},{},{}",
            b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        );
    }
    write_file(&dir.join(META_FILE), meta.as_bytes())?;

    for f in &scene.frames {
        let mut pose = String::new();
        for row in &f.pose.0 {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(pose, "{}", line.join(" "));
        }
        write_file(&frame_path(dir, f.index, "pose.txt"), pose.as_bytes())?;
        write_file(&frame_path(dir, f.index, "depth.f32"), &f32_bytes(&f.depth))?;
        write_file(&frame_path(dir, f.index, "logits.f32"), &f32_bytes(&f.logits))?;
        if let Some(labels) = &f.gt_labels {
            let bytes: Vec<u8> = labels.iter().flat_map(|v| v.to_le_bytes()).collect();
            write_file(&frame_path(dir, f.index, "labels.u16"), &bytes)?;
        }
        if let Some(color) = &f.color {
            write_file(&frame_path(dir, f.index, "color.rgb8"), color)?;
        }
    }
    Ok(())
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("bad value for {key}: {v:?}"),
    })
}

struct Meta {
    voxel_size: f64,
    class_count: usize,
    intrinsics: Intrinsics,
    class_names: Option<Vec<String>>,
    bounds: Option<Bounds>,
}

fn parse_meta(path: &Path) -> Result<Meta> {
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    let mut voxel_size = None;
    let mut class_count = None;
    let (mut width, mut height) = (None, None);
    let (mut fx, mut fy, mut cx, mut cy) = (None, None, None, None);
    let mut class_names = None;
    let mut bounds = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        let key = key.trim();
        let n = i + 1;
        match key {
            "voxel_size" => voxel_size = Some(parse_num::<f64>(path, n, key, value)?),
            "class_count" => class_count = Some(parse_num::<usize>(path, n, key, value)?),
            "width" => width = Some(parse_num::<usize>(path, n, key, value)?),
            "height" => height = Some(parse_num::<usize>(path, n, key, value)?),
            "fx" => fx = Some(parse_num::<f64>(path, n, key, value)?),
            "fy" => fy = Some(parse_num::<f64>(path, n, key, value)?),
            "cx" => cx = Some(parse_num::<f64>(path, n, key, value)?),
            "cy" => cy = Some(parse_num::<f64>(path, n, key, value)?),
            "class_names" => {
                class_names = Some(value.split(',').map(|s| s.trim().to_string()).collect())
            }
            "bounds" => {
                let v: Vec<f64> = value
                    .split(',')
                    .map(|s| parse_num::<f64>(path, n, key, s))
                    .collect::<Result<_>>()?;
                if v.len() != 6 {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: n,
                        msg: "bounds needs 6 values".into(),
                    });
                }
                bounds = Some(Bounds {
                    min: [v[0], v[1], v[2]],
                    max: [v[3], v[4], v[5]],
                });
            }
            // unknown keys are tolerated so converters can add provenance fields
            _ => {}
        }
    }
    let missing = |k: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("missing key {k}"),
    };
    Ok(Meta {
        voxel_size: voxel_size.ok_or_else(|| missing("voxel_size"))?,
        class_count: class_count.ok_or_else(|| missing("class_count"))?,
        intrinsics: Intrinsics {
            fx: fx.ok_or_else(|| missing("fx"))?,
            fy: fy.ok_or_else(|| missing("fy"))?,
            cx: cx.ok_or_else(|| missing("cx"))?,
            cy: cy.ok_or_else(|| missing("cy"))?,
            width: width.ok_or_else(|| missing("width"))?,
            height: height.ok_or_else(|| missing("height"))?,
        },
        class_names,
        bounds,
    })
}

fn parse_pose(path: &Path) -> Result<Pose> {
    let text = String::from_utf8_lossy(&read_file(path)?).into_owned();
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| parse_num::<f64>(path, 0, "pose", s))
        .collect::<Result<_>>()?;
    expect_len(path, 16, vals.len())?;
    let mut m = [[0.0; 4]; 4];
    for (i, v) in vals.into_iter().enumerate() {
        m[i / 4][i % 4] = v;
    }
    Ok(Pose(m))
}

/// Frame indices present in `frames/`, judged by any recognized file.
fn frame_indices(frames_dir: &Path) -> Result<Vec<u32>> {
    let entries = fs::read_dir(frames_dir).map_err(|e| Error::io(frames_dir, e))?;
    let mut set = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(frames_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some((stem, _)) = name.split_once('.') {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                set.insert(stem.parse::<u32>().unwrap_or(0));
            }
        }
    }
    Ok(set.into_iter().collect())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let meta = parse_meta(&dir.join(META_FILE))?;
    meta.intrinsics.validate()?;
    let n = meta.intrinsics.pixel_count();
    let k = meta.class_count;

    let mut frames = Vec::new();
    for index in frame_indices(&dir.join(FRAMES_DIR))? {
        let pose = parse_pose(&frame_path(dir, index, "pose.txt"))?;

        let depth_path = frame_path(dir, index, "depth.f32");
        let depth = read_f32s(&depth_path)?;
        expect_len(&depth_path, n, depth.len())?;

        let logits_path = frame_path(dir, index, "logits.f32");
        let logits = read_f32s(&logits_path)?;
        if logits.len() != n * k && logits.len() % n == 0 && logits.len() / n >= 2 {
            return Err(Error::ClassCountMismatch {
                frame: index,
                expected: k,
                found: logits.len() / n,
            });
        }
        expect_len(&logits_path, n * k, logits.len())?;

        let labels_path = frame_path(dir, index, "labels.u16");
        let gt_labels = if labels_path.exists() {
            let l = read_u16s(&labels_path)?;
            expect_len(&labels_path, n, l.len())?;
            Some(l)
        } else {
            None
        };

        let color_path = frame_path(dir, index, "color.rgb8");
        let color = if color_path.exists() {
            let c = read_file(&color_path)?;
            expect_len(&color_path, 3 * n, c.len())?;
            Some(c)
        } else {
            None
        };

        frames.push(Frame {
            index,
            pose,
            depth,
            logits,
            gt_labels,
            color,
        });
    }

    let scene = Scene {
        intrinsics: meta.intrinsics,
        frames,
        class_count: k,
        class_names: meta.class_names,
        voxel_size: meta.voxel_size,
        bounds: meta.bounds,
    };
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> Intrinsics {
        Intrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 160.0,
            cy: 120.0,
            width: 320,
            height: 240,
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let p = project_point([0.0, 0.0, 1.0], &Pose::identity(), &intr()).unwrap();
        assert_eq!((p.u, p.v, p.z), (160.0, 120.0, 1.0));
        assert_eq!((p.col, p.row), (160, 120));
    }

    #[test]
    fn behind_camera_is_out_of_view() {
        assert!(project_point([0.0, 0.0, -0.5], &Pose::identity(), &intr()).is_none());
    }

    #[test]
    fn pinhole_offset_point() {
        let p = project_point([0.1, 0.0, 1.0], &Pose::identity(), &intr()).unwrap();
        assert!((p.u - 170.0).abs() < 1e-12);
        assert_eq!(p.z, 1.0);
    }

    #[test]
    fn rounding_outside_image_is_out_of_view() {
        // u = 319.6 rounds to 320 which is outside a 320-wide image
        let x = (319.6 - 160.0) / 100.0;
        assert!(project_point([x, 0.0, 1.0], &Pose::identity(), &intr()).is_none());
        let x = (319.4 - 160.0) / 100.0;
        assert_eq!(
            project_point([x, 0.0, 1.0], &Pose::identity(), &intr())
                .unwrap()
                .col,
            319
        );
    }

    #[test]
    fn intrinsics_validation() {
        let mut i = intr();
        assert!(i.validate().is_ok());
        i.cx = 320.0;
        assert!(i.validate().is_err());
        i.cx = 10.0;
        i.fx = 0.0;
        assert!(i.validate().is_err());
    }

    #[test]
    fn depth_validity() {
        assert!(depth_is_valid(1.0));
        assert!(!depth_is_valid(0.0));
        assert!(!depth_is_valid(-1.0));
        assert!(!depth_is_valid(f32::NAN));
        assert!(!depth_is_valid(f32::INFINITY));
    }
}
