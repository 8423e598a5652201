//! Voxel observation cache: the raw per-view logits of every labeled surface
//! voxel, stored flat so candidate temperatures or GLFS parameters can
//! re-fuse the whole map without touching the frames again.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{ObservationRecord, SemanticAccumulator, Strategy, WeightScheme};
use crate::metrics::PredictionSet;
use crate::scaling::{scale_logits_into, ScalingParams};
use crate::tsdf::VoxelGrid;

const MAGIC: &[u8; 8] = b"SFOBSC01";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    /// Linear voxel index in the source grid.
    pub voxel: u64,
    pub gt_label: u32,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationCache {
    pub class_count: usize,
    pub entries: Vec<CacheEntry>,
    pub logits: Vec<f32>,
    pub distance: Vec<f32>,
    pub incidence: Vec<f32>,
    pub frame: Vec<u32>,
    pub provenance: Vec<String>,
    pub seed: Option<u64>,
}

/// Borrowed observations of one cached voxel.
#[derive(Clone, Copy, Debug)]
pub struct CachedVoxel<'a> {
    pub k: usize,
    pub gt_label: u32,
    /// T×K raw logits.
    pub logits: &'a [f32],
    pub distance: &'a [f32],
    pub incidence: &'a [f32],
}

impl CachedVoxel<'_> {
    pub fn len(&self) -> usize {
        self.distance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distance.is_empty()
    }

    pub fn obs_logits(&self, t: usize) -> &[f32] {
        &self.logits[t * self.k..(t + 1) * self.k]
    }

    /// Replays the observations through a fixed fusion strategy.
    pub fn fuse(
        &self,
        strategy: Strategy,
        scaling: Option<&ScalingParams>,
        scheme: &WeightScheme,
        alpha: f64,
    ) -> Result<Vec<f64>> {
        let mut acc = SemanticAccumulator::new(strategy, self.k, false);
        let mut probs = vec![0.0; self.k];
        for t in 0..self.len() {
            scale_logits_into(self.obs_logits(t), scaling, &mut probs);
            let w = scheme.weight(self.distance[t] as f64, self.incidence[t] as f64);
            acc.observe_unchecked(&probs, w, alpha, None);
        }
        Ok(acc.finalize()?.into_vec())
    }
}

impl ObservationCache {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            ..Default::default()
        }
    }

    /// Collects every labeled surface voxel that kept raw observations.
    pub fn from_grid(grid: &VoxelGrid, class_count: usize, scene_id: &str) -> Result<Self> {
        let mut cache = Self::new(class_count);
        cache.provenance.push(scene_id.to_string());
        for i in grid.extract_surface_voxels() {
            let Some(gt) = grid.gt_label(i) else { continue };
            let Some(records) = grid.voxels[i].sem.as_ref().and_then(|s| s.cache.as_ref()) else {
                continue;
            };
            if records.is_empty() {
                continue;
            }
            cache.push(i as u64, gt as u32, records)?;
        }
        if cache.is_empty() {
            return Err(Error::MissingCache);
        }
        Ok(cache)
    }

    pub fn push(&mut self, voxel: u64, gt_label: u32, records: &[ObservationRecord]) -> Result<()> {
        if records.is_empty() {
            return Err(Error::InvalidInput("cache entry needs >= 1 observation".into()));
        }
        if gt_label as usize >= self.class_count {
            return Err(Error::InvalidInput(format!("label {gt_label} out of range")));
        }
        let start = self.distance.len();
        for r in records {
            if r.logits.len() != self.class_count {
                return Err(Error::InvalidInput(format!(
                    "observation has {} logits, cache expects {}",
                    r.logits.len(),
                    self.class_count
                )));
            }
            self.logits.extend_from_slice(&r.logits);
            self.distance.push(r.distance);
            self.incidence.push(r.incidence_cos);
            self.frame.push(r.frame_index);
        }
        self.entries.push(CacheEntry {
            voxel,
            gt_label,
            start,
            len: records.len(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn observation_count(&self) -> usize {
        self.distance.len()
    }

    pub fn voxel(&self, i: usize) -> CachedVoxel<'_> {
        let e = &self.entries[i];
        let k = self.class_count;
        CachedVoxel {
            k,
            gt_label: e.gt_label,
            logits: &self.logits[e.start * k..(e.start + e.len) * k],
            distance: &self.distance[e.start..e.start + e.len],
            incidence: &self.incidence[e.start..e.start + e.len],
        }
    }

    pub fn records(&self, i: usize) -> Vec<ObservationRecord> {
        let e = &self.entries[i];
        let v = self.voxel(i);
        (0..e.len)
            .map(|t| ObservationRecord {
                logits: v.obs_logits(t).to_vec(),
                distance: v.distance[t],
                incidence_cos: v.incidence[t],
                frame_index: self.frame[e.start + t],
            })
            .collect()
    }

    pub fn gt_classes(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.gt_label).collect()
    }

    /// New cache holding the listed entries, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.class_count);
        out.provenance = self.provenance.clone();
        out.seed = self.seed;
        for &i in indices {
            let e = self.entries[i];
            let k = self.class_count;
            let start = out.distance.len();
            out.logits
                .extend_from_slice(&self.logits[e.start * k..(e.start + e.len) * k]);
            out.distance
                .extend_from_slice(&self.distance[e.start..e.start + e.len]);
            out.incidence
                .extend_from_slice(&self.incidence[e.start..e.start + e.len]);
            out.frame.extend_from_slice(&self.frame[e.start..e.start + e.len]);
            out.entries.push(CacheEntry { start, ..e });
        }
        out
    }

    /// Uniform seeded subsample of at most `max` entries (original order kept).
    pub fn subsample(&self, max: usize, seed: u64) -> Self {
        if self.len() <= max {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, self.len(), max).into_vec();
        idx.sort_unstable();
        let mut out = self.select(&idx);
        out.seed = Some(seed);
        out
    }

    /// Concatenates caches from several scenes.
    pub fn merge(caches: &[ObservationCache]) -> Result<Self> {
        let first = caches
            .first()
            .ok_or_else(|| Error::InvalidInput("no caches to merge".into()))?;
        let mut out = Self::new(first.class_count);
        for c in caches {
            if c.class_count != out.class_count {
                return Err(Error::InvalidInput("caches disagree on class count".into()));
            }
            let offset = out.distance.len();
            out.logits.extend_from_slice(&c.logits);
            out.distance.extend_from_slice(&c.distance);
            out.incidence.extend_from_slice(&c.incidence);
            out.frame.extend_from_slice(&c.frame);
            out.entries.extend(c.entries.iter().map(|e| CacheEntry {
                start: e.start + offset,
                ..*e
            }));
            out.provenance.extend(c.provenance.iter().cloned());
        }
        Ok(out)
    }

    /// Fused predictions of every entry under a fixed strategy.
    pub fn predictions(
        &self,
        strategy: Strategy,
        scaling: Option<&ScalingParams>,
        scheme: &WeightScheme,
        alpha: f64,
        exec: Exec,
    ) -> Result<PredictionSet> {
        let k = self.class_count;
        let rows: Vec<Result<Vec<f64>>> = exec.map_chunks(self.len(), 512, |start, end| {
            let mut out = Vec::with_capacity((end - start) * k);
            for i in start..end {
                out.extend(self.voxel(i).fuse(strategy, scaling, scheme, alpha)?);
            }
            Ok(out)
        });
        let mut probs = Vec::with_capacity(self.len() * k);
        for r in rows {
            probs.extend(r?);
        }
        let gt = self.entries.iter().map(|e| e.gt_label).collect();
        PredictionSet::new(k, probs, gt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + self.logits.len() * 4 + self.distance.len() * 12);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.class_count as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.distance.len() as u64).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&e.voxel.to_le_bytes());
            buf.extend_from_slice(&e.gt_label.to_le_bytes());
            buf.extend_from_slice(&(e.len as u32).to_le_bytes());
        }
        for v in &self.logits {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.distance.iter().chain(&self.incidence) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.frame {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(self.provenance.len() as u32).to_le_bytes());
        for p in &self.provenance {
            buf.extend_from_slice(&(p.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.as_bytes());
        }
        match self.seed {
            Some(s) => {
                buf.push(1);
                buf.extend_from_slice(&s.to_le_bytes());
            }
            None => buf.push(0),
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut r = ByteReader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::InvalidInput(format!(
                "{}: not an observation cache",
                path.display()
            )));
        }
        let k = r.u32()? as usize;
        let n_entries = r.u64()? as usize;
        let n_obs = r.u64()? as usize;
        let mut cache = Self::new(k);
        let mut start = 0;
        for _ in 0..n_entries {
            let voxel = r.u64()?;
            let gt_label = r.u32()?;
            let len = r.u32()? as usize;
            cache.entries.push(CacheEntry {
                voxel,
                gt_label,
                start,
                len,
            });
            start += len;
        }
        if start != n_obs {
            return Err(Error::ShapeMismatch {
                file: path.to_path_buf(),
                expected: n_obs,
                found: start,
            });
        }
        cache.logits = (0..n_obs * k).map(|_| r.f32()).collect::<Result<_>>()?;
        cache.distance = (0..n_obs).map(|_| r.f32()).collect::<Result<_>>()?;
        cache.incidence = (0..n_obs).map(|_| r.f32()).collect::<Result<_>>()?;
        cache.frame = (0..n_obs).map(|_| r.u32()).collect::<Result<_>>()?;
        let n_prov = r.u32()? as usize;
        for _ in 0..n_prov {
            let len = r.u32()? as usize;
            cache
                .provenance
                .push(String::from_utf8_lossy(r.take(len)?).into_owned());
        }
        cache.seed = match r.take(1)?[0] {
            1 => Some(r.u64()?),
            _ => None,
        };
        Ok(cache)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                file: self.path.to_path_buf(),
                bytes: self.bytes.len(),
                width: n,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(logits: &[f32], d: f32) -> ObservationRecord {
        ObservationRecord {
            logits: logits.to_vec(),
            distance: d,
            incidence_cos: 0.5,
            frame_index: 3,
        }
    }

    fn small() -> ObservationCache {
        let mut c = ObservationCache::new(2);
        c.push(10, 0, &[rec(&[1.0, 0.0], 1.0), rec(&[2.0, 0.5], 2.0)]).unwrap();
        c.push(11, 1, &[rec(&[0.0, 1.5], 1.5)]).unwrap();
        c.push(12, 1, &[rec(&[0.1, 0.2], 0.7), rec(&[0.0, 0.3], 0.9), rec(&[0.4, 0.0], 1.1)])
            .unwrap();
        c.provenance.push("scene-a".into());
        c
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.cache");
        let mut c = small();
        c.seed = Some(99);
        c.write(&path).unwrap();
        assert_eq!(ObservationCache::read(&path).unwrap(), c);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.cache");
        small().write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(ObservationCache::read(&path).is_err());
    }

    #[test]
    fn select_subsample_merge() {
        let c = small();
        let s = c.select(&[2, 0]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.records(0), c.records(2));
        assert_eq!(s.records(1), c.records(0));
        let sub = c.subsample(2, 5);
        assert_eq!(sub.len(), 2);
        assert_eq!(sub, c.subsample(2, 5));
        let m = ObservationCache::merge(&[c.clone(), s]).unwrap();
        assert_eq!(m.len(), 5);
        assert_eq!(m.records(4), c.records(0));
    }

    #[test]
    fn push_validates() {
        let mut c = ObservationCache::new(2);
        assert!(c.push(0, 0, &[]).is_err());
        assert!(c.push(0, 2, &[rec(&[0.0, 0.0], 1.0)]).is_err());
        assert!(c.push(0, 0, &[rec(&[0.0], 1.0)]).is_err());
    }

    #[test]
    fn replay_matches_direct_accumulation() {
        let c = small();
        let p = c
            .predictions(Strategy::NaiveAveraging, None, &WeightScheme::Constant, 1e-3, Exec::Sequential)
            .unwrap();
        // entry 1 has a single observation: softmax(0, 1.5)
        let e = (1.5f64).exp();
        assert!((p.row(1)[1] - e / (1.0 + e)).abs() < 1e-7);
        assert_eq!(p.labels(), &[0, 1, 1]);
    }
}
