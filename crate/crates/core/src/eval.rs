//! Comparison of pseudo-labels against ground truth.
//!
//! Points far from the trajectory are cropped away first: a point is kept
//! when its horizontal (xy) distance to the nearest trajectory position is
//! within `lateral_crop` and it sits at most `height_crop` above that
//! position. World frames are assumed z-up.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, Pose, UNLABELED};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledPolicy {
    /// An unlabeled prediction is a false negative for the true class.
    #[default]
    CountAsWrong,
    /// Points with unlabeled predictions are left out of the confusion counts.
    Exclude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub lateral_crop: f64,
    pub height_crop: f64,
    /// `(from, to)` pairs, applied in a single pass.
    pub class_merge: Vec<(ClassId, ClassId)>,
    pub unlabeled_policy: UnlabeledPolicy,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lateral_crop: 30.0,
            height_crop: 10.0,
            class_merge: Vec::new(),
            unlabeled_policy: UnlabeledPolicy::CountAsWrong,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.lateral_crop > 0.0 && self.height_crop > 0.0) {
            return Err(Error::Invalid(format!(
                "crops must be > 0 (lateral {}, height {})",
                self.lateral_crop, self.height_crop
            )));
        }
        merge_table(&self.class_merge, num_classes).map(|_| ())
    }
}

pub fn crop_mask(
    positions: &[Vector3<f64>],
    trajectory: &[Pose],
    cfg: &EvalConfig,
) -> Result<Vec<bool>> {
    if trajectory.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let centers: Vec<Vector3<f64>> = trajectory.iter().map(|p| *p.translation()).collect();
    let lateral_sq = cfg.lateral_crop * cfg.lateral_crop;
    Ok(positions
        .par_iter()
        .map(|p| {
            let (nearest, d2) = centers
                .iter()
                .map(|c| (c, (p.x - c.x).powi(2) + (p.y - c.y).powi(2)))
                .fold((&centers[0], f64::INFINITY), |best, cand| {
                    if cand.1 < best.1 {
                        cand
                    } else {
                        best
                    }
                });
            d2 <= lateral_sq && p.z - nearest.z <= cfg.height_crop
        })
        .collect())
}

fn merge_table(mapping: &[(ClassId, ClassId)], num_classes: usize) -> Result<Vec<ClassId>> {
    let mut table: Vec<ClassId> = (0..num_classes as ClassId).collect();
    let mut seen = vec![false; num_classes];
    for &(from, to) in mapping {
        for c in [from, to] {
            if usize::from(c) >= num_classes {
                return Err(Error::InvalidClass {
                    class: u32::from(c),
                    num_classes,
                });
            }
        }
        if std::mem::replace(&mut seen[usize::from(from)], true) {
            return Err(Error::Invalid(format!("class {from} mapped twice")));
        }
        table[usize::from(from)] = to;
    }
    Ok(table)
}

/// Replaces every `from` class by its `to` class. Not transitive: with
/// `a → b` and `b → c`, an `a` becomes `b`. [`UNLABELED`] passes through.
pub fn merge_classes(
    labels: &[ClassId],
    mapping: &[(ClassId, ClassId)],
    num_classes: usize,
) -> Result<Vec<ClassId>> {
    let table = merge_table(mapping, num_classes)?;
    labels
        .iter()
        .map(|&l| match l {
            UNLABELED => Ok(UNLABELED),
            l => table
                .get(usize::from(l))
                .copied()
                .ok_or(Error::InvalidClass {
                    class: u32::from(l),
                    num_classes,
                }),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Classes present in the counted ground truth only.
    pub iou_per_class: BTreeMap<ClassId, f64>,
    pub miou: f64,
    pub coverage: f64,
    pub evaluated_points: usize,
    pub counts: BTreeMap<ClassId, ConfusionCounts>,
}

pub fn compute_iou(
    pred: &[ClassId],
    gt: &[ClassId],
    num_classes: usize,
    policy: UnlabeledPolicy,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "predictions vs ground truth",
            left: pred.len(),
            right: gt.len(),
        });
    }
    let check = |l: ClassId| {
        if l != UNLABELED && usize::from(l) >= num_classes {
            Err(Error::InvalidClass {
                class: u32::from(l),
                num_classes,
            })
        } else {
            Ok(())
        }
    };
    let mut counts = vec![ConfusionCounts::default(); num_classes];
    let mut present = vec![false; num_classes];
    let mut evaluated = 0usize;
    let mut covered = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        check(p)?;
        check(g)?;
        if g == UNLABELED {
            continue;
        }
        evaluated += 1;
        let g = usize::from(g);
        if p == UNLABELED {
            if policy == UnlabeledPolicy::CountAsWrong {
                counts[g].fn_ += 1;
                present[g] = true;
            }
            continue;
        }
        covered += 1;
        present[g] = true;
        let p = usize::from(p);
        if p == g {
            counts[g].tp += 1;
        } else {
            counts[p].fp += 1;
            counts[g].fn_ += 1;
        }
    }

    let mut iou_per_class = BTreeMap::new();
    let mut count_map = BTreeMap::new();
    for (c, cnt) in counts.iter().enumerate() {
        if present[c] {
            iou_per_class.insert(c as ClassId, cnt.iou());
        }
        if cnt.tp + cnt.fp + cnt.fn_ > 0 {
            count_map.insert(c as ClassId, *cnt);
        }
    }
    let miou = if iou_per_class.is_empty() {
        0.0
    } else {
        iou_per_class.values().sum::<f64>() / iou_per_class.len() as f64
    };
    Ok(EvalReport {
        iou_per_class,
        miou,
        coverage: if evaluated == 0 {
            0.0
        } else {
            covered as f64 / evaluated as f64
        },
        evaluated_points: evaluated,
        counts: count_map,
    })
}

/// Crop, merge, then score.
pub fn evaluate(
    positions: &[Vector3<f64>],
    pred: &[ClassId],
    gt: &[ClassId],
    trajectory: &[Pose],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate(num_classes)?;
    if positions.len() != pred.len() {
        return Err(Error::LengthMismatch {
            what: "points vs predictions",
            left: positions.len(),
            right: pred.len(),
        });
    }
    let mask = crop_mask(positions, trajectory, cfg)?;
    let select = |labels: &[ClassId]| -> Vec<ClassId> {
        labels
            .iter()
            .zip(&mask)
            .filter(|(_, &keep)| keep)
            .map(|(&l, _)| l)
            .collect()
    };
    let pred = merge_classes(&select(pred), &cfg.class_merge, num_classes)?;
    let gt = merge_classes(&select(gt), &cfg.class_merge, num_classes)?;
    compute_iou(&pred, &gt, num_classes, cfg.unlabeled_policy)
}

fn class_name(names: &[String], c: ClassId) -> String {
    names
        .get(usize::from(c))
        .cloned()
        .unwrap_or_else(|| format!("class_{c}"))
}

/// `key: value` lines.
pub fn format_report(report: &EvalReport, names: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "evaluated_points: {}", report.evaluated_points);
    let _ = writeln!(s, "coverage: {:.6}", report.coverage);
    let _ = writeln!(s, "miou: {:.6}", report.miou);
    for (c, iou) in &report.iou_per_class {
        let _ = writeln!(s, "iou.{}: {:.6}", class_name(names, *c), iou);
    }
    s
}

/// Per-class IoU rows for plotting: `class,name,iou`, then a `miou` row.
pub fn report_csv(report: &EvalReport, names: &[String]) -> String {
    let mut s = String::from("class,name,iou\n");
    for (c, iou) in &report.iou_per_class {
        let _ = writeln!(s, "{c},{},{iou:.6}", class_name(names, *c));
    }
    let _ = writeln!(s, ",miou,{:.6}", report.miou);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn crop_examples() {
        let traj = vec![
            Pose::from_translation(at(0.0, 0.0, 2.0)),
            Pose::from_translation(at(10.0, 0.0, 2.0)),
        ];
        let cfg = EvalConfig::default();
        let pts = [
            at(0.0, 0.0, 2.0),   // at the sensor
            at(5.0, 31.0, 2.0),  // 31 m from every pose
            at(10.0, 5.0, 13.0), // 5 m out, 11 m above
            at(10.0, 5.0, 11.5), // 9.5 m above
            at(-20.0, 0.0, -3.0),
            at(40.0, 0.0, -50.0), // below is always fine
        ];
        assert_eq!(
            crop_mask(&pts, &traj, &cfg).unwrap(),
            vec![true, false, false, true, true, true]
        );
        assert!(matches!(crop_mask(&pts, &[], &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn crop_height_uses_nearest_pose() {
        // the climbing pose is the nearest one horizontally, so its height counts
        let traj = vec![
            Pose::from_translation(at(0.0, 0.0, 0.0)),
            Pose::from_translation(at(20.0, 0.0, 15.0)),
        ];
        let pts = [at(19.0, 0.0, 20.0), at(1.0, 0.0, 20.0)];
        assert_eq!(
            crop_mask(&pts, &traj, &EvalConfig::default()).unwrap(),
            vec![true, false]
        );
    }

    #[test]
    fn merge_examples() {
        // 0 road, 1 sidewalk, 2 terrain
        assert_eq!(merge_classes(&[2, 0], &[(2, 1)], 3).unwrap(), vec![1, 0]);
        assert_eq!(
            merge_classes(&[2, 0, UNLABELED], &[], 3).unwrap(),
            vec![2, 0, UNLABELED]
        );
        assert_eq!(
            merge_classes(&[0, 1, 2], &[(0, 1), (1, 2)], 3).unwrap(),
            vec![1, 2, 2]
        );
        assert!(merge_classes(&[0], &[(0, 3)], 3).is_err());
        assert!(merge_classes(&[0], &[(0, 1), (0, 2)], 3).is_err());
        assert!(merge_classes(&[4], &[], 3).is_err());
    }

    #[test]
    fn iou_examples() {
        let r = compute_iou(
            &[0, 1, 1, 0],
            &[0, 1, 1, 0],
            2,
            UnlabeledPolicy::CountAsWrong,
        )
        .unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(
            r.iou_per_class.values().copied().collect::<Vec<_>>(),
            vec![1.0, 1.0]
        );

        // class 0: tp 1, fn 1 -> 1/2; class 1: tp 2, fp 1 -> 2/3
        let r = compute_iou(
            &[0, 1, 1, 1],
            &[0, 0, 1, 1],
            2,
            UnlabeledPolicy::CountAsWrong,
        )
        .unwrap();
        assert!((r.iou_per_class[&0] - 0.5).abs() < 1e-15);
        assert!((r.iou_per_class[&1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);

        let r = compute_iou(
            &[UNLABELED; 4],
            &[0, 0, 1, 1],
            2,
            UnlabeledPolicy::CountAsWrong,
        )
        .unwrap();
        assert!(r.iou_per_class.values().all(|&v| v == 0.0));
        assert_eq!(r.coverage, 0.0);
    }

    #[test]
    fn exclude_policy_and_sentinel_gt() {
        let pred = [0, UNLABELED, 1, 0];
        let gt = [0, 1, 1, UNLABELED];
        let r = compute_iou(&pred, &gt, 2, UnlabeledPolicy::Exclude).unwrap();
        assert_eq!(r.evaluated_points, 3);
        assert_eq!(r.miou, 1.0);
        assert!((r.coverage - 2.0 / 3.0).abs() < 1e-15);
        let r = compute_iou(&pred, &gt, 2, UnlabeledPolicy::CountAsWrong).unwrap();
        assert_eq!(r.iou_per_class[&1], 0.5);
    }

    #[test]
    fn absent_classes_left_out_of_miou() {
        let r = compute_iou(&[0, 0, 2], &[0, 0, 0], 3, UnlabeledPolicy::CountAsWrong).unwrap();
        assert_eq!(r.iou_per_class.len(), 1);
        assert!((r.miou - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.counts[&2].fp, 1);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            compute_iou(&[0], &[0, 1], 2, UnlabeledPolicy::Exclude),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            compute_iou(&[3], &[0], 2, UnlabeledPolicy::Exclude),
            Err(Error::InvalidClass { .. })
        ));
    }

    #[test]
    fn report_text_and_csv() {
        let r = compute_iou(
            &[0, 1, 1, 1],
            &[0, 0, 1, 1],
            2,
            UnlabeledPolicy::CountAsWrong,
        )
        .unwrap();
        let names = vec!["road".to_string(), "sidewalk".to_string()];
        let text = format_report(&r, &names);
        assert!(text.contains("miou: 0.583333"));
        assert!(text.contains("iou.road: 0.500000"));
        let csv = report_csv(&r, &names);
        assert!(csv.starts_with("class,name,iou\n0,road,0.500000\n1,sidewalk,0.666667\n"));
        let json = serde_json::to_string(&r).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn iou_is_permutation_invariant(
            pairs in prop::collection::vec((0u16..4, 0u16..4), 1..300),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let pred: Vec<ClassId> = pairs.iter().map(|p| if p.0 == 3 { UNLABELED } else { p.0 }).collect();
            let gt: Vec<ClassId> = pairs.iter().map(|p| p.1.min(2)).collect();
            let a = compute_iou(&pred, &gt, 3, UnlabeledPolicy::CountAsWrong).unwrap();
            let mut idx: Vec<usize> = (0..pred.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let sp: Vec<ClassId> = idx.iter().map(|&i| pred[i]).collect();
            let sg: Vec<ClassId> = idx.iter().map(|&i| gt[i]).collect();
            let b = compute_iou(&sp, &sg, 3, UnlabeledPolicy::CountAsWrong).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
