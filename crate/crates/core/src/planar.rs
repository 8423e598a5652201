//! Top-down projection of the semantic surface and goal-mask filtering.
//!
//! Every surface voxel inside the height band drops into the ground cell that
//! contains its center, under its predicted class. A cell's confidence for a
//! class is the mean confidence of the voxels that landed there with that
//! class. Cells that no voxel reached stay unknown.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geom::Vec3;
use crate::pipeline::MapVoxel;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanarConfig {
    /// Edge length of a ground cell, meters.
    pub cell_size: f64,
    /// Voxels with center z in `[min_height, max_height]` contribute.
    pub min_height: f64,
    pub max_height: f64,
}

impl Default for PlanarConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.05,
            min_height: 0.1,
            max_height: 2.0,
        }
    }
}

impl PlanarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        if !(self.min_height <= self.max_height) {
            return Err(Error::InvalidInput(format!(
                "height band [{}, {}] is empty",
                self.min_height, self.max_height
            )));
        }
        Ok(())
    }
}

/// A labeled surface point: where it is, what it is, and how sure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanarPoint {
    pub center: Vec3,
    pub class: usize,
    pub confidence: f64,
}

impl From<&MapVoxel> for PlanarPoint {
    fn from(v: &MapVoxel) -> Self {
        let class = v.pred();
        Self {
            center: v.center,
            class,
            confidence: v.probs[class],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanarMap {
    pub cell_size: f64,
    /// World (x, y) of the corner of cell (row 0, col 0).
    pub origin: [f64; 2],
    /// Cells along y.
    pub rows: usize,
    /// Cells along x.
    pub cols: usize,
    pub class_count: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl PlanarMap {
    fn slot(&self, row: usize, col: usize, class: usize) -> usize {
        (row * self.cols + col) * self.class_count + class
    }

    /// Mean confidence of `class` in the cell, `None` if no voxel of that
    /// class landed there.
    pub fn confidence(&self, row: usize, col: usize, class: usize) -> Option<f64> {
        let i = self.slot(row, col, class);
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    /// Number of voxels of `class` that landed in the cell.
    pub fn count(&self, row: usize, col: usize, class: usize) -> u32 {
        self.counts[self.slot(row, col, class)]
    }

    pub fn is_known(&self, row: usize, col: usize) -> bool {
        (0..self.class_count).any(|c| self.count(row, col, c) > 0)
    }

    /// Class with the highest mean confidence (lowest index on ties).
    pub fn top(&self, row: usize, col: usize) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..self.class_count {
            if let Some(h) = self.confidence(row, col, c) {
                if best.is_none_or(|(_, b)| h > b) {
                    best = Some((c, h));
                }
            }
        }
        best
    }

    pub fn known_cells(&self) -> usize {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_known(r, c))
            .count()
    }

    /// World (x, y) of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin[0] + (col as f64 + 0.5) * self.cell_size,
            self.origin[1] + (row as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Cells whose confidence for `class` is at least `threshold`.
    pub fn class_mask(&self, class: usize, threshold: f64) -> Mask {
        let mut mask = Mask::new(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.confidence(r, c, class).is_some_and(|h| h >= threshold) {
                    mask.set(r, c, true);
                }
            }
        }
        mask
    }

    /// One `x,y,class,confidence` row per populated (cell, class).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,class,confidence\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                for k in 0..self.class_count {
                    if let Some(h) = self.confidence(r, c, k) {
                        let [x, y] = self.cell_center(r, c);
                        let _ = writeln!(out, "{x:.4},{y:.4},{k},{h:.6}");
                    }
                }
            }
        }
        out
    }

    /// Binary PGM of top labels: 0 marks unknown cells, class `k` is drawn at
    /// gray level `(k + 1) · ⌊255 / K⌋`. Row 0 (smallest y) is written first.
    pub fn to_pgm(&self) -> Vec<u8> {
        let step = (255 / self.class_count.max(1)).max(1);
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(match self.top(r, c) {
                    Some((k, _)) => ((k + 1) * step).min(255) as u8,
                    None => 0,
                });
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Bins labeled surface points into a top-down map.
///
/// The map extent is the bounding box of the contributing points snapped to
/// the cell lattice; with no contributing points the map is empty (0×0).
pub fn project_to_planar_map(
    points: &[PlanarPoint],
    class_count: usize,
    cfg: &PlanarConfig,
    exec: Exec,
) -> Result<PlanarMap> {
    cfg.validate()?;
    if class_count == 0 {
        return Err(Error::InvalidInput("class count must be positive".into()));
    }
    if let Some(p) = points.iter().find(|p| p.class >= class_count) {
        return Err(Error::InvalidInput(format!(
            "point class {} out of range for {class_count} classes",
            p.class
        )));
    }
    let inside: Vec<&PlanarPoint> = points
        .iter()
        .filter(|p| p.center[2] >= cfg.min_height && p.center[2] <= cfg.max_height)
        .collect();

    let cs = cfg.cell_size;
    let cell = |v: f64| (v / cs).floor() as i64;
    let (mut lo, mut hi) = ([i64::MAX; 2], [i64::MIN; 2]);
    for p in &inside {
        for a in 0..2 {
            lo[a] = lo[a].min(cell(p.center[a]));
            hi[a] = hi[a].max(cell(p.center[a]));
        }
    }
    let (rows, cols, origin) = if inside.is_empty() {
        (0, 0, [0.0, 0.0])
    } else {
        (
            (hi[1] - lo[1] + 1) as usize,
            (hi[0] - lo[0] + 1) as usize,
            [lo[0] as f64 * cs, lo[1] as f64 * cs],
        )
    };

    let len = rows * cols * class_count;
    let slot = |p: &PlanarPoint| {
        let row = (cell(p.center[1]) - lo[1]) as usize;
        let col = (cell(p.center[0]) - lo[0]) as usize;
        (row * cols + col) * class_count + p.class
    };
    // per-chunk partial sums merged in chunk order keep the result
    // independent of the execution policy
    let partials = exec.map_chunks(inside.len(), 8192, |start, end| {
        let mut sums = vec![0.0; len];
        let mut counts = vec![0u32; len];
        for p in &inside[start..end] {
            let i = slot(p);
            sums[i] += p.confidence;
            counts[i] += 1;
        }
        (sums, counts)
    });
    let mut sums = vec![0.0; len];
    let mut counts = vec![0u32; len];
    for (s, c) in partials {
        for i in 0..len {
            sums[i] += s[i];
            counts[i] += c[i];
        }
    }
    Ok(PlanarMap {
        cell_size: cs,
        origin,
        rows,
        cols,
        class_count,
        sums,
        counts,
    })
}

/// Dense boolean grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    /// Builds a mask from rows of `'#'` (set) and anything else (clear).
    pub fn from_rows(rows: &[&str]) -> Self {
        let cols = rows.iter().map(|r| r.chars().count()).max().unwrap_or(0);
        let mut m = Self::new(rows.len(), cols);
        for (r, line) in rows.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                m.set(r, c, ch == '#');
            }
        }
        m
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.cols + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Keeps only the largest 4-connected component of `mask`.
///
/// Ties go to the component whose minimal (row, col) comes first
/// lexicographically, which is the one a row-major scan reaches first.
pub fn largest_connected_component(mask: &Mask) -> Mask {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut label = vec![0u32; rows * cols];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..rows * cols {
        if !mask.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = (i / cols, i % cols);
            let mut visit = |j: usize| {
                if mask.data[j] && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - cols);
            }
            if r + 1 < rows {
                visit(i + cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < cols {
                visit(i + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    let mut out = Mask::new(rows, cols);
    if let Some((keep, _)) = best {
        for (o, &l) in out.data.iter_mut().zip(&label) {
            *o = l == keep;
        }
    }
    out
}
