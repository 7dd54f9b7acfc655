//! Back-projection of per-view segmentations onto points and vote fusion.
//!
//! Every occupied pixel of a view is one vote for the point that won the
//! z-buffer there. Votes are accumulated into a [`VoteTable`] holding, per
//! point and class, the hard vote count, the summed logits and the summed
//! floored log-softmax probabilities, plus an overflow-free representation
//! of the raw logit product. [`elect`] turns a table into per-point labels.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::{argmax, SegmentationResult};
use crate::viewgen::RenderedView;
use crate::{ClassId, UNLABELED};

/// Probability floor applied before taking logs when compounding.
pub const SOFTMAX_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    HardSum,
    SoftSum,
    SoftCompound,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [
        Estimator::HardSum,
        Estimator::SoftSum,
        Estimator::SoftCompound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::HardSum => "hard_sum",
            Estimator::SoftSum => "soft_sum",
            Estimator::SoftCompound => "soft_compound",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::UnknownEstimator(s.to_string()))
    }
}

/// How `soft_compound` multiplies per-view scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompoundMode {
    /// Product of softmax probabilities floored at [`SOFTMAX_FLOOR`], summed in log space.
    #[default]
    LogSoftmax,
    /// Product of the raw logits as delivered by the segmenter.
    RawProduct,
}

/// Sparse per-point votes extracted from one view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Contributions {
    pub num_classes: usize,
    pub points: Vec<u32>,
    pub labels: Vec<ClassId>,
    /// `points.len() × num_classes`
    pub logits: Vec<f32>,
}

impl Contributions {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn logits_at(&self, i: usize) -> &[f32] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }
}

/// Extracts one vote per occupied pixel, in row-major pixel order. With
/// `dedup_per_view`, only the first pixel of each point votes.
pub fn backproject(
    view: &RenderedView,
    seg: &SegmentationResult,
    dedup_per_view: bool,
) -> Result<Contributions> {
    if (seg.width, seg.height) != (view.width, view.height)
        || seg.labels.len() != view.num_pixels()
        || seg.logits.len() != view.num_pixels() * seg.num_classes
    {
        return Err(Error::ShapeMismatch(format!(
            "view {} is {}x{}, segmentation is {}x{}",
            view.view_index, view.width, view.height, seg.width, seg.height
        )));
    }
    let c = seg.num_classes;
    let mut out = Contributions {
        num_classes: c,
        ..Default::default()
    };
    let mut seen = std::collections::HashSet::new();
    for (px, point) in view.occupied() {
        if dedup_per_view && !seen.insert(point) {
            continue;
        }
        out.points.push(point);
        out.labels.push(seg.labels[px]);
        out.logits.extend_from_slice(seg.logits_at(px));
    }
    Ok(out)
}

/// Per-point accumulators. All matrices are row-major `num_points × num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteTable {
    num_points: usize,
    num_classes: usize,
    pub hard_counts: Vec<u32>,
    pub logit_sums: Vec<f64>,
    pub logprob_sums: Vec<f64>,
    /// Σ ln|logit| over views, for the raw product.
    pub raw_log_abs: Vec<f64>,
    /// Parity of negative factors in the raw product.
    pub raw_negative: Vec<bool>,
    /// Some factor of the raw product was exactly zero.
    pub raw_zero: Vec<bool>,
    pub vote_count: Vec<u32>,
}

fn log_softmax_floored(logits: &[f32], out: &mut [f64]) {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let sum: f64 = logits.iter().map(|&v| (f64::from(v) - max).exp()).sum();
    for (o, &v) in out.iter_mut().zip(logits) {
        let p = (f64::from(v) - max).exp() / sum;
        *o = p.max(SOFTMAX_FLOOR).ln();
    }
}

impl VoteTable {
    pub fn new(num_points: usize, num_classes: usize) -> Self {
        let n = num_points * num_classes;
        Self {
            num_points,
            num_classes,
            hard_counts: vec![0; n],
            logit_sums: vec![0.0; n],
            logprob_sums: vec![0.0; n],
            raw_log_abs: vec![0.0; n],
            raw_negative: vec![false; n],
            raw_zero: vec![false; n],
            vote_count: vec![0; num_points],
        }
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row<'a, T>(&self, data: &'a [T], point: usize) -> &'a [T] {
        &data[point * self.num_classes..(point + 1) * self.num_classes]
    }

    /// Adds a view's votes in order. Validates everything before touching the table.
    pub fn accumulate(&mut self, contributions: &Contributions) -> Result<()> {
        let c = self.num_classes;
        if !contributions.is_empty() && contributions.num_classes != c {
            return Err(Error::ShapeMismatch(format!(
                "contributions carry {} classes, table has {c}",
                contributions.num_classes
            )));
        }
        if contributions.logits.len() != contributions.len() * contributions.num_classes
            || contributions.labels.len() != contributions.len()
        {
            return Err(Error::ShapeMismatch("ragged contributions".into()));
        }
        if let Some(&p) = contributions
            .points
            .iter()
            .find(|&&p| p as usize >= self.num_points)
        {
            return Err(Error::IndexOutOfRange {
                index: p as usize,
                len: self.num_points,
            });
        }
        if let Some(&l) = contributions.labels.iter().find(|&&l| usize::from(l) >= c) {
            return Err(Error::InvalidClass {
                class: u32::from(l),
                num_classes: c,
            });
        }

        let mut logprob = vec![0.0; c];
        for i in 0..contributions.len() {
            let p = contributions.points[i] as usize;
            let logits = contributions.logits_at(i);
            let base = p * c;
            self.hard_counts[base + usize::from(contributions.labels[i])] += 1;
            self.vote_count[p] += 1;
            log_softmax_floored(logits, &mut logprob);
            for k in 0..c {
                let v = f64::from(logits[k]);
                self.logit_sums[base + k] += v;
                self.logprob_sums[base + k] += logprob[k];
                if v == 0.0 {
                    self.raw_zero[base + k] = true;
                } else {
                    self.raw_log_abs[base + k] += v.abs().ln();
                    self.raw_negative[base + k] ^= v < 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<()> {
        for p in 0..self.num_points {
            let hard: u64 = self
                .row(&self.hard_counts, p)
                .iter()
                .map(|&v| u64::from(v))
                .sum();
            if hard != u64::from(self.vote_count[p]) {
                return Err(Error::Invalid(format!(
                    "point {p}: {hard} hard votes vs vote count {}",
                    self.vote_count[p]
                )));
            }
            if self.vote_count[p] == 0 {
                let zero = self.row(&self.logit_sums, p).iter().all(|&v| v == 0.0)
                    && self.row(&self.logprob_sums, p).iter().all(|&v| v == 0.0)
                    && self.row(&self.raw_log_abs, p).iter().all(|&v| v == 0.0)
                    && !self.row(&self.raw_negative, p).iter().any(|&b| b)
                    && !self.row(&self.raw_zero, p).iter().any(|&b| b);
                if !zero {
                    return Err(Error::Invalid(format!(
                        "point {p}: no votes but non-zero row"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordering key of a raw product: sign class first, then magnitude.
fn raw_product_key(negative: bool, zero: bool, log_abs: f64) -> (i8, f64) {
    match (zero, negative) {
        (true, _) => (0, 0.0),
        (false, false) => (1, log_abs),
        (false, true) => (-1, -log_abs),
    }
}

fn argmax_by_key(keys: impl Iterator<Item = (i8, f64)>) -> usize {
    let mut best = 0;
    let mut best_key = (i8::MIN, f64::NEG_INFINITY);
    for (k, key) in keys.enumerate() {
        if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 > best_key.1) {
            best = k;
            best_key = key;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointLabels {
    pub labels: Vec<ClassId>,
    pub estimator: Estimator,
}

impl PointLabels {
    pub fn coverage(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l != UNLABELED).count() as f64 / self.labels.len() as f64
    }
}

/// Picks one class per voted point; unvoted points get [`UNLABELED`].
/// Ties resolve to the lowest class index.
pub fn elect(table: &VoteTable, estimator: Estimator, compound: CompoundMode) -> PointLabels {
    let c = table.num_classes;
    let labels = (0..table.num_points)
        .into_par_iter()
        .map(|p| {
            if table.vote_count[p] == 0 {
                return UNLABELED;
            }
            let best = match (estimator, compound) {
                (Estimator::HardSum, _) => argmax(table.row(&table.hard_counts, p)),
                (Estimator::SoftSum, _) => argmax(table.row(&table.logit_sums, p)),
                (Estimator::SoftCompound, CompoundMode::LogSoftmax) => {
                    argmax(table.row(&table.logprob_sums, p))
                }
                (Estimator::SoftCompound, CompoundMode::RawProduct) => {
                    argmax_by_key((0..c).map(|k| {
                        let i = p * c + k;
                        raw_product_key(
                            table.raw_negative[i],
                            table.raw_zero[i],
                            table.raw_log_abs[i],
                        )
                    }))
                }
            };
            best as ClassId
        })
        .collect();
    PointLabels { labels, estimator }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub min_votes: u32,
    pub max_votes: u32,
    pub points: usize,
}

/// Written next to a pseudo-label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteSummary {
    pub estimator: Estimator,
    pub compound_mode: CompoundMode,
    pub num_points: usize,
    pub voted_points: usize,
    pub coverage: f64,
    /// Points per vote-count bucket: `[0]`, `[1]`, `[2, 3]`, `[4, 7]`, ...
    pub votes_histogram: Vec<HistogramBin>,
}

pub fn summarize(table: &VoteTable, labels: &PointLabels, compound: CompoundMode) -> VoteSummary {
    let mut bins: Vec<HistogramBin> = Vec::new();
    for &v in &table.vote_count {
        let (lo, hi) = match v {
            0 => (0, 0),
            v => {
                let lo = 1u32 << (31 - v.leading_zeros());
                (lo, lo.saturating_mul(2) - 1)
            }
        };
        match bins.iter_mut().find(|b| b.min_votes == lo) {
            Some(b) => b.points += 1,
            None => bins.push(HistogramBin {
                min_votes: lo,
                max_votes: hi,
                points: 1,
            }),
        }
    }
    bins.sort_by_key(|b| b.min_votes);
    let voted = table.vote_count.iter().filter(|&&v| v > 0).count();
    VoteSummary {
        estimator: labels.estimator,
        compound_mode: compound,
        num_points: table.num_points,
        voted_points: voted,
        coverage: labels.coverage(),
        votes_histogram: bins,
    }
}

const TABLE_MAGIC: &[u8; 8] = b"VPLVOT01";

pub fn write_table(path: &Path, table: &VoteTable) -> Result<()> {
    let n = table.num_points * table.num_classes;
    let mut buf = Vec::with_capacity(24 + n * 29 + table.num_points * 4);
    buf.extend_from_slice(TABLE_MAGIC);
    buf.extend_from_slice(&(table.num_points as u64).to_le_bytes());
    buf.extend_from_slice(&(table.num_classes as u64).to_le_bytes());
    for v in &table.vote_count {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for i in 0..n {
        buf.extend_from_slice(&table.hard_counts[i].to_le_bytes());
        buf.extend_from_slice(&table.logit_sums[i].to_le_bytes());
        buf.extend_from_slice(&table.logprob_sums[i].to_le_bytes());
        buf.extend_from_slice(&table.raw_log_abs[i].to_le_bytes());
        buf.push(u8::from(table.raw_negative[i]) | (u8::from(table.raw_zero[i]) << 1));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<VoteTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::parse(path, 0, "corrupt vote table");
    if bytes.len() < 24 || &bytes[..8] != TABLE_MAGIC {
        return Err(corrupt());
    }
    let m = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let c = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let n = m.checked_mul(c).ok_or_else(corrupt)?;
    if bytes.len() != 24 + m * 4 + n * 29 {
        return Err(corrupt());
    }
    let mut t = VoteTable::new(m, c);
    let mut cur = &bytes[24..];
    for v in t.vote_count.iter_mut() {
        *v = u32::from_le_bytes(cur[..4].try_into().expect("4 bytes"));
        cur = &cur[4..];
    }
    let f = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    for (i, rec) in cur.chunks_exact(29).enumerate() {
        t.hard_counts[i] = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes"));
        t.logit_sums[i] = f(&rec[4..12]);
        t.logprob_sums[i] = f(&rec[12..20]);
        t.raw_log_abs[i] = f(&rec[20..28]);
        t.raw_negative[i] = rec[28] & 1 != 0;
        t.raw_zero[i] = rec[28] & 2 != 0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::viewgen::EMPTY_PIXEL;
    use crate::Pose;

    fn contrib(c: usize, votes: &[(u32, ClassId, &[f32])]) -> Contributions {
        Contributions {
            num_classes: c,
            points: votes.iter().map(|v| v.0).collect(),
            labels: votes.iter().map(|v| v.1).collect(),
            logits: votes.iter().flat_map(|v| v.2.iter().copied()).collect(),
        }
    }

    fn view(w: u32, h: u32, point_index: Vec<u32>) -> RenderedView {
        RenderedView {
            view_index: 0,
            pose: Pose::identity(),
            width: w,
            height: h,
            image: vec![0; (w * h) as usize],
            depth: vec![0.0; (w * h) as usize],
            point_index,
        }
    }

    #[test]
    fn single_pixel_single_vote() {
        let mut pi = vec![EMPTY_PIXEL; 6];
        pi[4] = 7;
        let mut labels = vec![0; 6];
        labels[4] = 2;
        let seg = SegmentationResult::from_labels(3, 2, 3, labels, 10.0);
        let c = backproject(&view(3, 2, pi), &seg, false).unwrap();
        assert_eq!(c.points, vec![7]);
        assert_eq!(c.labels, vec![2]);
        assert_eq!(c.logits_at(0), &[0.0, 0.0, 10.0]);
    }

    #[test]
    fn background_contributes_nothing() {
        let seg = SegmentationResult::from_labels(2, 2, 2, vec![1; 4], 10.0);
        let c = backproject(&view(2, 2, vec![EMPTY_PIXEL; 4]), &seg, false).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn dedup_keeps_first_pixel() {
        let seg = SegmentationResult::from_labels(2, 2, 3, vec![1, 2, 0, 2], 10.0);
        let v = view(2, 2, vec![5, 5, EMPTY_PIXEL, 3]);
        let all = backproject(&v, &seg, false).unwrap();
        assert_eq!(all.points, vec![5, 5, 3]);
        let dedup = backproject(&v, &seg, true).unwrap();
        assert_eq!(dedup.points, vec![5, 3]);
        assert_eq!(dedup.labels, vec![1, 2]);
    }

    #[test]
    fn dimension_mismatch() {
        let seg = SegmentationResult::from_labels(2, 1, 2, vec![0, 0], 10.0);
        assert!(matches!(
            backproject(&view(1, 2, vec![0, 0]), &seg, false),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn accumulate_examples() {
        let mut t = VoteTable::new(3, 3);
        let before = t.clone();
        t.accumulate(&contrib(3, &[])).unwrap();
        assert_eq!(t, before);

        let onehot: &[f32] = &[0.0, 10.0, 0.0];
        t.accumulate(&contrib(3, &[(2, 1, onehot)])).unwrap();
        t.accumulate(&contrib(3, &[(2, 1, onehot)])).unwrap();
        assert_eq!(t.row(&t.hard_counts, 2), &[0, 2, 0]);
        assert_eq!(t.vote_count[2], 2);

        let mut t = VoteTable::new(1, 3);
        let c0: &[f32] = &[10.0, 0.0, 0.0];
        t.accumulate(&contrib(3, &[(0, 0, c0), (0, 0, c0)]))
            .unwrap();
        assert_eq!(t.row(&t.logit_sums, 0), &[20.0, 0.0, 0.0]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn accumulate_rejects_out_of_range_atomically() {
        let mut t = VoteTable::new(2, 2);
        let l: &[f32] = &[1.0, 0.0];
        let err = t
            .accumulate(&contrib(2, &[(0, 0, l), (2, 0, l)]))
            .unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 2, len: 2 }));
        assert_eq!(t, VoteTable::new(2, 2));
        assert!(matches!(
            t.accumulate(&contrib(2, &[(0, 2, l)])),
            Err(Error::InvalidClass { .. })
        ));
    }

    #[test]
    fn hard_majority_and_tie() {
        let mut t = VoteTable::new(2, 3);
        t.hard_counts = vec![3, 1, 0, 2, 2, 0];
        t.vote_count = vec![4, 4];
        let out = elect(&t, Estimator::HardSum, CompoundMode::LogSoftmax);
        assert_eq!(out.labels, vec![0, 0]);
    }

    #[test]
    fn unvoted_points_are_unlabeled() {
        let t = VoteTable::new(3, 2);
        for e in Estimator::ALL {
            assert!(elect(&t, e, CompoundMode::RawProduct)
                .labels
                .iter()
                .all(|&l| l == UNLABELED));
        }
    }

    #[test]
    fn compounding_never_degenerates() {
        let mut t = VoteTable::new(1, 3);
        let extreme: &[f32] = &[1e30, -1e30, 0.0];
        for _ in 0..1000 {
            t.accumulate(&contrib(3, &[(0, 0, extreme)])).unwrap();
        }
        assert!(t.logprob_sums.iter().all(|v| v.is_finite()));
        assert_eq!(
            elect(&t, Estimator::SoftCompound, CompoundMode::LogSoftmax).labels,
            vec![0]
        );
    }

    #[test]
    fn raw_product_follows_signs() {
        // class 0: (-2)(-3) = 6, class 1: (4)(1) = 4, class 2: (-5)(5) = -25
        let mut t = VoteTable::new(1, 3);
        t.accumulate(&contrib(3, &[(0, 1, &[-2.0, 4.0, -5.0])]))
            .unwrap();
        t.accumulate(&contrib(3, &[(0, 0, &[-3.0, 1.0, 5.0])]))
            .unwrap();
        assert_eq!(
            elect(&t, Estimator::SoftCompound, CompoundMode::RawProduct).labels,
            vec![0]
        );
        // a zero factor beats any negative product
        let mut t = VoteTable::new(1, 2);
        t.accumulate(&contrib(2, &[(0, 1, &[-1.0, 0.0])])).unwrap();
        assert_eq!(
            elect(&t, Estimator::SoftCompound, CompoundMode::RawProduct).labels,
            vec![1]
        );
        // among negatives the smaller magnitude wins
        let mut t = VoteTable::new(1, 2);
        t.accumulate(&contrib(2, &[(0, 0, &[-3.0, -2.0])])).unwrap();
        assert_eq!(
            elect(&t, Estimator::SoftCompound, CompoundMode::RawProduct).labels,
            vec![1]
        );
    }

    #[test]
    fn estimator_names() {
        for e in Estimator::ALL {
            assert_eq!(e.as_str().parse::<Estimator>().unwrap(), e);
        }
        assert!(matches!(
            "median".parse::<Estimator>(),
            Err(Error::UnknownEstimator(_))
        ));
    }

    #[test]
    fn summary_histogram() {
        let mut t = VoteTable::new(5, 2);
        t.vote_count = vec![0, 1, 2, 3, 9];
        t.hard_counts = vec![0, 0, 1, 0, 2, 0, 3, 0, 9, 0];
        let labels = elect(&t, Estimator::HardSum, CompoundMode::LogSoftmax);
        let s = summarize(&t, &labels, CompoundMode::LogSoftmax);
        assert_eq!(s.voted_points, 4);
        assert!((s.coverage - 0.8).abs() < 1e-12);
        let bins: Vec<(u32, u32, usize)> = s
            .votes_histogram
            .iter()
            .map(|b| (b.min_votes, b.max_votes, b.points))
            .collect();
        assert_eq!(bins, vec![(0, 0, 1), (1, 1, 1), (2, 3, 2), (8, 15, 1)]);
    }

    #[test]
    fn table_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = VoteTable::new(3, 2);
        t.accumulate(&contrib(2, &[(0, 1, &[-0.5, 2.0]), (2, 0, &[0.0, -1.0])]))
            .unwrap();
        let p = dir.path().join("t.bin");
        write_table(&p, &t).unwrap();
        assert_eq!(read_table(&p).unwrap(), t);
    }
}
