//! Scans, sequences and the aligned dense cloud.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ClassId, Pose, UNLABELED};

/// One LiDAR sweep in the sensor frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawScan {
    pub scan_index: usize,
    pub positions: Vec<Vector3<f64>>,
    pub intensity: Vec<f64>,
    /// Per-point ground-truth class, [`UNLABELED`] where unannotated.
    pub labels: Option<Vec<ClassId>>,
}

impl RawScan {
    pub fn new(
        scan_index: usize,
        positions: Vec<Vector3<f64>>,
        intensity: Vec<f64>,
        labels: Option<Vec<ClassId>>,
    ) -> Result<Self> {
        if positions.len() != intensity.len() {
            return Err(Error::LengthMismatch {
                what: "positions vs intensities",
                left: positions.len(),
                right: intensity.len(),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != positions.len() {
                return Err(Error::LengthMismatch {
                    what: "points vs labels",
                    left: positions.len(),
                    right: labels.len(),
                });
            }
        }
        if let Some(p) = positions.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::Invalid(format!(
                "scan {scan_index}: non-finite coordinate {p:?}"
            )));
        }
        if let Some(i) = intensity.iter().find(|i| !i.is_finite() || **i < 0.0) {
            return Err(Error::Invalid(format!(
                "scan {scan_index}: intensity {i} must be finite and >= 0"
            )));
        }
        Ok(Self {
            scan_index,
            positions,
            intensity,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// An ordered sequence of scans with one sensor pose per scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence {
    pub scans: Vec<RawScan>,
    pub poses: Vec<Pose>,
    pub class_names: Vec<String>,
}

impl ScanSequence {
    pub fn new(scans: Vec<RawScan>, poses: Vec<Pose>, class_names: Vec<String>) -> Result<Self> {
        let seq = Self {
            scans,
            poses,
            class_names,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.scans.is_empty() && self.scans.iter().all(|s| s.labels.is_some())
    }

    pub fn num_points(&self) -> usize {
        self.scans.iter().map(RawScan::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scans.len() != self.poses.len() {
            return Err(Error::LengthMismatch {
                what: "scans vs poses",
                left: self.scans.len(),
                right: self.poses.len(),
            });
        }
        let labelled = self.scans.iter().filter(|s| s.labels.is_some()).count();
        if labelled != 0 && labelled != self.scans.len() {
            return Err(Error::Invalid(format!(
                "ground truth present for {labelled} of {} scans",
                self.scans.len()
            )));
        }
        let c = self.num_classes();
        for scan in &self.scans {
            if let Some(bad) = scan
                .labels
                .iter()
                .flatten()
                .find(|&&l| l != UNLABELED && usize::from(l) >= c)
            {
                return Err(Error::InvalidClass {
                    class: u32::from(*bad),
                    num_classes: c,
                });
            }
        }
        Ok(())
    }
}

/// Upper clip bound for raw intensities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMax {
    Fixed(f64),
    /// Nearest-rank percentile of each scan's raw intensities.
    Percentile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityParams {
    pub beta_min: f64,
    pub beta_max: ClipMax,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for IntensityParams {
    fn default() -> Self {
        Self {
            beta_min: 0.0,
            beta_max: ClipMax::Percentile(99.0),
            eta_min: 0.0,
            eta_max: 1.0,
        }
    }
}

/// The aligned union of every scan, in world coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// Normalised intensity within `intensity_range`.
    pub intensity: Vec<f64>,
    pub source_scan: Vec<u32>,
    pub gt: Option<Vec<ClassId>>,
    pub intensity_range: (f64, f64),
    pub class_names: Vec<String>,
}

impl DensePointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

pub fn clip_intensity(value: f64, beta_min: f64, beta_max: f64) -> Result<f64> {
    if beta_min > beta_max {
        return Err(Error::InvalidRange {
            min: beta_min,
            max: beta_max,
        });
    }
    Ok(value.max(beta_min).min(beta_max))
}

/// Min-max rescale of one scan into `[eta_min, eta_max]`. A constant scan maps to `eta_min`.
pub fn rescale_intensity(values: &[f64], eta_min: f64, eta_max: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("intensity array"));
    }
    if eta_min > eta_max {
        return Err(Error::InvalidRange {
            min: eta_min,
            max: eta_max,
        });
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    if span <= 0.0 {
        return Ok(vec![eta_min; values.len()]);
    }
    let scale = (eta_max - eta_min) / span;
    Ok(values
        .iter()
        .map(|&v| ((v - lo) * scale + eta_min).clamp(eta_min, eta_max))
        .collect())
}

/// Nearest-rank percentile (`pct` in `[0, 100]`) of a non-empty slice.
pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Invalid(format!("percentile {pct} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.saturating_sub(1).min(sorted.len() - 1)])
}

/// Clip then rescale the intensities of a single scan.
pub fn normalize_scan_intensity(raw: &[f64], params: &IntensityParams) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let beta_max = match params.beta_max {
        ClipMax::Fixed(v) => v,
        ClipMax::Percentile(p) => percentile(raw, p)?,
    };
    let clipped = raw
        .iter()
        .map(|&v| clip_intensity(v, params.beta_min, beta_max))
        .collect::<Result<Vec<_>>>()?;
    rescale_intensity(&clipped, params.eta_min, params.eta_max)
}

/// Transforms every scan by its pose and concatenates them in scan order.
pub fn align(seq: &ScanSequence, params: &IntensityParams) -> Result<DensePointCloud> {
    seq.validate()?;
    if params.eta_min > params.eta_max {
        return Err(Error::InvalidRange {
            min: params.eta_min,
            max: params.eta_max,
        });
    }
    let per_scan = seq
        .scans
        .par_iter()
        .zip(seq.poses.par_iter())
        .map(|(scan, pose)| {
            let positions: Vec<_> = scan.positions.iter().map(|p| pose.apply(p)).collect();
            let intensity = normalize_scan_intensity(&scan.intensity, params)?;
            Ok((positions, intensity))
        })
        .collect::<Result<Vec<_>>>()?;

    let total = seq.num_points();
    let mut cloud = DensePointCloud {
        positions: Vec::with_capacity(total),
        intensity: Vec::with_capacity(total),
        source_scan: Vec::with_capacity(total),
        gt: seq.has_ground_truth().then(|| Vec::with_capacity(total)),
        intensity_range: (params.eta_min, params.eta_max),
        class_names: seq.class_names.clone(),
    };
    for (scan, (positions, intensity)) in seq.scans.iter().zip(per_scan) {
        cloud
            .source_scan
            .extend(std::iter::repeat_n(scan.scan_index as u32, positions.len()));
        cloud.positions.extend(positions);
        cloud.intensity.extend(intensity);
        if let (Some(gt), Some(labels)) = (cloud.gt.as_mut(), scan.labels.as_ref()) {
            gt.extend_from_slice(labels);
        }
    }
    Ok(cloud)
}
