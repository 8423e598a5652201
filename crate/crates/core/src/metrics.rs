//! Calibration and accuracy metrics over labeled prediction sets.
//!
//! All binned calibration errors are computed by building a
//! [`ReliabilityTable`] and re-aggregating it, so a table written to disk
//! reproduces its metric exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{Exec, REDUCE_CHUNK};
use crate::fusion::argmax;

pub const DEFAULT_BINS: usize = 15;
const NLL_FLOOR: f64 = 1e-12;

/// N×K predicted distributions with ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    k: usize,
    probs: Vec<f64>,
    gt: Vec<u32>,
}

impl PredictionSet {
    pub fn new(k: usize, probs: Vec<f64>, gt: Vec<u32>) -> Result<Self> {
        if k == 0 || probs.len() != gt.len() * k {
            return Err(Error::InvalidInput(format!(
                "prediction set: {} probabilities for {} samples of {k} classes",
                probs.len(),
                gt.len()
            )));
        }
        for (i, row) in probs.chunks_exact(k).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "prediction row {i} is not a distribution (sum {s})"
                )));
            }
        }
        if let Some(bad) = gt.iter().find(|&&g| g as usize >= k) {
            return Err(Error::InvalidInput(format!("label {bad} outside [0, {k})")));
        }
        Ok(Self { k, probs, gt })
    }

    pub fn empty(k: usize) -> Self {
        Self {
            k,
            probs: Vec::new(),
            gt: Vec::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn gt(&self, i: usize) -> u32 {
        self.gt[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.gt
    }

    pub fn pred(&self, i: usize) -> usize {
        argmax(self.row(i))
    }

    pub fn conf(&self, i: usize) -> f64 {
        self.row(i)[self.pred(i)]
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::InvalidInput("no labeled samples".into()))
        } else {
            Ok(())
        }
    }
}

/// Bin of a confidence value: [b/O, (b+1)/O) with the last bin closed.
#[inline]
pub fn bin_index(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    None,
    PredClass,
    GtClass,
}

impl FromStr for Conditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Conditioning::None),
            "pred-class" => Ok(Conditioning::PredClass),
            "gt-class" => Ok(Conditioning::GtClass),
            other => Err(Error::InvalidInput(format!("unknown conditioning {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub bin: usize,
    pub class: Option<usize>,
    pub mean_conf: f64,
    pub mean_acc: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub bins: usize,
    pub conditioning: Conditioning,
    pub total: usize,
    /// Rows ordered by (class, bin); every (class, bin) pair is present.
    pub rows: Vec<ReliabilityRow>,
}

#[derive(Clone, Copy, Default)]
struct BinAcc {
    conf: f64,
    correct: f64,
    count: usize,
}

impl ReliabilityTable {
    /// Binned calibration error implied by the table.
    ///
    /// `None`/`PredClass`: Σ (|B|/N)·|acc − conf| over all rows.
    /// `GtClass`: per-class error weighted by the class's own count, averaged
    /// over classes that occur.
    pub fn calibration_error(&self) -> f64 {
        match self.conditioning {
            Conditioning::None | Conditioning::PredClass => {
                let n = self.total as f64;
                self.rows
                    .iter()
                    .map(|r| r.count as f64 / n * (r.mean_acc - r.mean_conf).abs())
                    .sum()
            }
            Conditioning::GtClass => {
                let mut per_class: Vec<(f64, usize)> = Vec::new();
                for r in &self.rows {
                    let c = r.class.unwrap_or(0);
                    if per_class.len() <= c {
                        per_class.resize(c + 1, (0.0, 0));
                    }
                    per_class[c].1 += r.count;
                }
                for r in &self.rows {
                    let c = r.class.unwrap_or(0);
                    let nk = per_class[c].1;
                    if nk > 0 {
                        per_class[c].0 +=
                            r.count as f64 / nk as f64 * (r.mean_acc - r.mean_conf).abs();
                    }
                }
                let present: Vec<f64> = per_class
                    .iter()
                    .filter(|(_, n)| *n > 0)
                    .map(|(e, _)| *e)
                    .collect();
                present.iter().sum::<f64>() / present.len() as f64
            }
        }
    }

    /// CSV with header `bin,cond_class,mean_conf,mean_acc,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,cond_class,mean_conf,mean_acc,count\n");
        for r in &self.rows {
            let class = r.class.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.bin, class, r.mean_conf, r.mean_acc, r.count
            ));
        }
        out
    }
}

pub fn reliability_table(
    preds: &PredictionSet,
    bins: usize,
    conditioning: Conditioning,
) -> Result<ReliabilityTable> {
    reliability_table_with(preds, bins, conditioning, Exec::Parallel)
}

/// Sharded binning; shards are merged in index order so the result does not
/// depend on the execution policy.
pub fn reliability_table_with(
    preds: &PredictionSet,
    bins: usize,
    conditioning: Conditioning,
    exec: Exec,
) -> Result<ReliabilityTable> {
    if bins < 1 {
        return Err(Error::InvalidInput("bin count must be >= 1".into()));
    }
    preds.require_nonempty()?;
    let groups = match conditioning {
        Conditioning::None => 1,
        _ => preds.class_count(),
    };
    let cells = groups * bins;
    let shards = exec.map_chunks(preds.len(), REDUCE_CHUNK, |start, end| {
        let mut acc = vec![BinAcc::default(); cells];
        for i in start..end {
            let pred = preds.pred(i);
            let conf = preds.row(i)[pred];
            let gt = preds.gt(i) as usize;
            let group = match conditioning {
                Conditioning::None => 0,
                Conditioning::PredClass => pred,
                Conditioning::GtClass => gt,
            };
            let cell = &mut acc[group * bins + bin_index(conf, bins)];
            cell.conf += conf;
            cell.correct += f64::from(u8::from(pred == gt));
            cell.count += 1;
        }
        acc
    });
    let mut merged = vec![BinAcc::default(); cells];
    for shard in shards {
        for (m, s) in merged.iter_mut().zip(shard) {
            m.conf += s.conf;
            m.correct += s.correct;
            m.count += s.count;
        }
    }
    let rows = merged
        .iter()
        .enumerate()
        .map(|(cell, a)| {
            let (mean_conf, mean_acc) = if a.count > 0 {
                (a.conf / a.count as f64, a.correct / a.count as f64)
            } else {
                (0.0, 0.0)
            };
            ReliabilityRow {
                bin: cell % bins,
                class: (conditioning != Conditioning::None).then_some(cell / bins),
                mean_conf,
                mean_acc,
                count: a.count,
            }
        })
        .collect();
    Ok(ReliabilityTable {
        bins,
        conditioning,
        total: preds.len(),
        rows,
    })
}

pub fn compute_ece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_table(preds, bins, Conditioning::None)?.calibration_error())
}

pub fn compute_tl_ece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_table(preds, bins, Conditioning::PredClass)?.calibration_error())
}

pub fn compute_mece(preds: &PredictionSet, bins: usize) -> Result<f64> {
    Ok(reliability_table(preds, bins, Conditioning::GtClass)?.calibration_error())
}

pub fn compute_brier(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty()?;
    let total: f64 = (0..preds.len())
        .map(|i| {
            let gt = preds.gt(i) as usize;
            preds
                .row(i)
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let d = p - if k == gt { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / preds.len() as f64)
}

pub fn compute_nll(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty()?;
    let total: f64 = (0..preds.len())
        .map(|i| -preds.row(i)[preds.gt(i) as usize].max(NLL_FLOOR).ln())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean IoU over the classes that occur in the ground truth.
pub fn compute_miou(preds: &PredictionSet) -> Result<f64> {
    preds.require_nonempty()?;
    let k = preds.class_count();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut present = vec![false; k];
    for i in 0..preds.len() {
        let p = preds.pred(i);
        let g = preds.gt(i) as usize;
        present[g] = true;
        if p == g {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let ious: Vec<f64> = (0..k)
        .filter(|&c| present[c] && tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMetric {
    Mece,
    Ece,
    TlEce,
}

impl CalibrationMetric {
    pub fn compute(self, preds: &PredictionSet, bins: usize) -> Result<f64> {
        match self {
            CalibrationMetric::Mece => compute_mece(preds, bins),
            CalibrationMetric::Ece => compute_ece(preds, bins),
            CalibrationMetric::TlEce => compute_tl_ece(preds, bins),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CalibrationMetric::Mece => "mece",
            CalibrationMetric::Ece => "ece",
            CalibrationMetric::TlEce => "tl-ece",
        }
    }
}

impl fmt::Display for CalibrationMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibrationMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mece" => Ok(CalibrationMetric::Mece),
            "ece" => Ok(CalibrationMetric::Ece),
            "tl-ece" | "tl_ece" => Ok(CalibrationMetric::TlEce),
            other => Err(Error::InvalidInput(format!("unknown metric {other:?}"))),
        }
    }
}

/// The six headline numbers written by `evaluate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub ece: f64,
    pub tl_ece: f64,
    pub mece: f64,
    pub brier: f64,
    pub nll: f64,
    pub miou: f64,
    pub count: usize,
}

pub fn summarize(preds: &PredictionSet, bins: usize) -> Result<MetricsSummary> {
    Ok(MetricsSummary {
        ece: compute_ece(preds, bins)?,
        tl_ece: compute_tl_ece(preds, bins)?,
        mece: compute_mece(preds, bins)?,
        brier: compute_brier(preds)?,
        nll: compute_nll(preds)?,
        miou: compute_miou(preds)?,
        count: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-class rows with the given confidence on `pred`.
    fn two_class(samples: &[(f64, usize, u32)]) -> PredictionSet {
        let mut probs = Vec::new();
        let mut gt = Vec::new();
        for &(conf, pred, label) in samples {
            let mut row = [1.0 - conf; 2];
            row[pred] = conf;
            probs.extend_from_slice(&row);
            gt.push(label);
        }
        PredictionSet::new(2, probs, gt).unwrap()
    }

    #[test]
    fn ece_two_sample_example() {
        let p = two_class(&[(0.8, 0, 0), (0.6, 0, 1)]);
        let ece = compute_ece(&p, 10).unwrap();
        assert!((ece - 0.4).abs() < 1e-12, "{ece}");
    }

    #[test]
    fn perfect_predictor_has_zero_errors() {
        let p = PredictionSet::new(3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0], vec![0, 2]).unwrap();
        assert_eq!(compute_ece(&p, 15).unwrap(), 0.0);
        assert_eq!(compute_tl_ece(&p, 15).unwrap(), 0.0);
        assert_eq!(compute_mece(&p, 15).unwrap(), 0.0);
        assert_eq!(compute_brier(&p).unwrap(), 0.0);
        assert_eq!(compute_nll(&p).unwrap(), 0.0);
        assert_eq!(compute_miou(&p).unwrap(), 1.0);
    }

    #[test]
    fn uniform_confidence_matched_accuracy() {
        // K=4, conf 1/4 everywhere; exactly one in four correct
        let probs = vec![0.25; 16];
        let p = PredictionSet::new(4, probs, vec![0, 1, 2, 3]).unwrap();
        assert!(compute_ece(&p, 15).unwrap().abs() < 1e-15);
    }

    #[test]
    fn single_class_tl_ece_matches_ece() {
        let p = PredictionSet::new(1, vec![1.0; 3], vec![0; 3]).unwrap();
        assert_eq!(compute_tl_ece(&p, 10).unwrap(), compute_ece(&p, 10).unwrap());
    }

    #[test]
    fn tl_ece_equals_ece_when_classes_never_share_a_bin() {
        // class 0 predictions in bin 8, class 1 predictions in bin 6
        let p = two_class(&[(0.85, 0, 0), (0.82, 0, 1), (0.65, 1, 1), (0.61, 1, 1)]);
        let ece = compute_ece(&p, 10).unwrap();
        let tl = compute_tl_ece(&p, 10).unwrap();
        // hand value: bin 8: acc 1/2 conf .835 -> .335·.5; bin 6: acc 1 conf .63 -> .37·.5
        assert!((ece - (0.5 * 0.335 + 0.5 * 0.37)).abs() < 1e-12);
        assert_eq!(ece, tl);
    }

    #[test]
    fn mece_majority_class_failure_case() {
        let mut s = vec![(0.9, 0, 0); 90];
        s.extend(vec![(0.9, 0, 1); 10]);
        let p = two_class(&s);
        let mece = compute_mece(&p, 15).unwrap();
        assert!((mece - 0.5).abs() < 1e-12, "{mece}");
        // plain ECE sees a perfectly calibrated predictor
        assert!(compute_ece(&p, 15).unwrap() < 1e-12);
    }

    #[test]
    fn brier_and_nll_reference_values() {
        let u = PredictionSet::new(2, vec![0.5, 0.5], vec![1]).unwrap();
        assert!((compute_brier(&u).unwrap() - 0.5).abs() < 1e-15);
        assert!((compute_nll(&u).unwrap() - 2f64.ln()).abs() < 1e-15);
        let wrong = PredictionSet::new(2, vec![1.0, 0.0], vec![1]).unwrap();
        assert_eq!(compute_brier(&wrong).unwrap(), 2.0);
        assert!((compute_nll(&wrong).unwrap() - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn miou_confusion_example() {
        let p = PredictionSet::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        assert!((compute_miou(&p).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        let disjoint = PredictionSet::new(2, vec![0.0, 1.0, 1.0, 0.0], vec![0, 1]).unwrap();
        assert_eq!(compute_miou(&disjoint).unwrap(), 0.0);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let e = PredictionSet::empty(3);
        assert!(compute_ece(&e, 10).is_err());
        assert!(compute_mece(&e, 10).is_err());
        assert!(compute_brier(&e).is_err());
        let p = two_class(&[(0.7, 0, 0)]);
        assert!(compute_ece(&p, 0).is_err());
        assert!(PredictionSet::new(2, vec![0.5, 0.6], vec![0]).is_err());
        assert!(PredictionSet::new(2, vec![0.5, 0.5], vec![2]).is_err());
    }

    #[test]
    fn top_confidence_goes_to_last_bin() {
        assert_eq!(bin_index(1.0, 15), 14);
        assert_eq!(bin_index(0.0, 15), 0);
        assert_eq!(bin_index(0.2, 10), 2);
    }

    #[test]
    fn tables_reproduce_metrics_and_emit_empty_bins() {
        let p = two_class(&[(0.8, 0, 0), (0.6, 1, 0), (0.95, 1, 1), (0.55, 0, 1)]);
        let none = reliability_table(&p, 10, Conditioning::None).unwrap();
        assert_eq!(none.rows.len(), 10);
        assert!(none.rows.iter().any(|r| r.count == 0));
        assert_eq!(none.calibration_error(), compute_ece(&p, 10).unwrap());
        let gt = reliability_table(&p, 10, Conditioning::GtClass).unwrap();
        assert_eq!(gt.rows.len(), 20);
        assert_eq!(gt.calibration_error(), compute_mece(&p, 10).unwrap());
        let pc = reliability_table(&p, 10, Conditioning::PredClass).unwrap();
        assert_eq!(pc.calibration_error(), compute_tl_ece(&p, 10).unwrap());
        let csv = gt.to_csv();
        assert!(csv.starts_with("bin,cond_class,mean_conf,mean_acc,count\n"));
        assert_eq!(csv.lines().count(), 21);
    }

    #[test]
    fn sequential_and_parallel_tables_agree_bitwise() {
        let mut s = Vec::new();
        for i in 0..5000 {
            let conf = 0.5 + (i as f64 * 0.618).fract() * 0.5;
            s.push((conf, i % 2, ((i * 7) % 3 % 2) as u32));
        }
        let p = two_class(&s);
        for c in [Conditioning::None, Conditioning::PredClass, Conditioning::GtClass] {
            let a = reliability_table_with(&p, 15, c, Exec::Sequential).unwrap();
            let b = reliability_table_with(&p, 15, c, Exec::Parallel).unwrap();
            assert_eq!(a, b);
        }
    }

    fn random_set() -> impl Strategy<Value = PredictionSet> {
        (2usize..5, 1usize..40).prop_flat_map(|(k, n)| {
            (
                prop::collection::vec(prop::collection::vec(0.001f64..1.0, k), n),
                prop::collection::vec(0..k as u32, n),
            )
                .prop_map(move |(rows, gt)| {
                    let probs: Vec<f64> = rows
                        .iter()
                        .flat_map(|r| {
                            let s: f64 = r.iter().sum();
                            r.iter().map(move |x| x / s)
                        })
                        .collect();
                    PredictionSet::new(k, probs, gt).unwrap()
                })
        })
    }

    fn permute_classes(p: &PredictionSet) -> PredictionSet {
        let k = p.class_count();
        let perm = |c: usize| (c + 1) % k;
        let mut probs = vec![0.0; p.len() * k];
        for i in 0..p.len() {
            for (c, &v) in p.row(i).iter().enumerate() {
                probs[i * k + perm(c)] = v;
            }
        }
        let gt = p.labels().iter().map(|&g| perm(g as usize) as u32).collect();
        PredictionSet::new(k, probs, gt).unwrap()
    }

    fn reversed(p: &PredictionSet) -> PredictionSet {
        let k = p.class_count();
        let mut probs = Vec::new();
        let mut gt = Vec::new();
        for i in (0..p.len()).rev() {
            probs.extend_from_slice(p.row(i));
            gt.push(p.gt(i));
        }
        PredictionSet::new(k, probs, gt).unwrap()
    }

    proptest! {
        #[test]
        fn metric_ranges(p in random_set()) {
            for v in [compute_ece(&p, 15).unwrap(), compute_tl_ece(&p, 15).unwrap(), compute_mece(&p, 15).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let b = compute_brier(&p).unwrap();
            prop_assert!((0.0..=2.0).contains(&b));
        }

        #[test]
        fn reorder_invariance(p in random_set()) {
            let r = reversed(&p);
            prop_assert!((compute_ece(&p, 15).unwrap() - compute_ece(&r, 15).unwrap()).abs() < 1e-12);
            prop_assert!((compute_mece(&p, 15).unwrap() - compute_mece(&r, 15).unwrap()).abs() < 1e-12);
            prop_assert!((compute_brier(&p).unwrap() - compute_brier(&r).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn class_permutation_invariance(p in random_set()) {
            // ties in argmax would be broken differently after relabeling
            let tie_free = (0..p.len()).all(|i| {
                let row = p.row(i);
                let top = row[p.pred(i)];
                row.iter().filter(|&&v| v == top).count() == 1
            });
            prop_assume!(tie_free);
            let q = permute_classes(&p);
            prop_assert!((compute_mece(&p, 15).unwrap() - compute_mece(&q, 15).unwrap()).abs() < 1e-12);
            prop_assert!((compute_miou(&p).unwrap() - compute_miou(&q).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn within_bin_rescaling_keeps_accuracy(p in random_set()) {
            let t = reliability_table(&p, 10, Conditioning::None).unwrap();
            // shrink each row's top confidence toward its bin's lower edge
            let k = p.class_count();
            let mut probs = Vec::new();
            let mut gt = Vec::new();
            for i in 0..p.len() {
                let row = p.row(i);
                let pred = p.pred(i);
                let lo = bin_index(row[pred], 10) as f64 / 10.0;
                let target = (row[pred] + lo.max(row[pred] - 0.01)) / 2.0;
                let others: f64 = 1.0 - row[pred];
                let mut new = vec![0.0; k];
                for c in 0..k {
                    new[c] = if c == pred { target } else if others > 0.0 { row[c] / others * (1.0 - target) } else { (1.0 - target) / (k - 1) as f64 };
                }
                // skip rows where the rescale would change the argmax or bin
                if argmax(&new) != pred || bin_index(new[pred], 10) != bin_index(row[pred], 10) {
                    new = row.to_vec();
                }
                probs.extend(new);
                gt.push(p.gt(i));
            }
            let q = PredictionSet::new(k, probs, gt).unwrap();
            let u = reliability_table(&q, 10, Conditioning::None).unwrap();
            for (a, b) in t.rows.iter().zip(&u.rows) {
                prop_assert_eq!(a.count, b.count);
                prop_assert_eq!(a.mean_acc, b.mean_acc);
            }
        }
    }
}
