//! 2D segmentation of rendered views.
//!
//! Two implementations ship with the crate: [`OracleSegmenter`], which reads
//! the ground truth of the point behind each pixel and corrupts it at a
//! controlled rate, and [`ExternalSegmenter`], which picks up results that an
//! out-of-process model wrote into a directory.
//!
//! # Exchange protocol
//!
//! For every `view_NNNNNN.png` the external tool writes
//!
//! - `labels_NNNNNN.png`: 8-bit single channel, pixel value = class index
//! - `logits_NNNNNN.bin` (optional): little-endian `f32`, row-major `[height][width][C]`
//!
//! and finally creates an empty `RESULTS_READY` file in the result
//! directory. When a logits file is absent, one-hot logits at the configured
//! margin are synthesised from the labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::viewgen::{list_view_indices, view_png_path, RenderedView, EMPTY_PIXEL};
use crate::{ClassId, UNLABELED};

pub const READY_MARKER: &str = "RESULTS_READY";

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel classes and scores for one view, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pub width: u32,
    pub height: u32,
    pub num_classes: usize,
    pub labels: Vec<ClassId>,
    /// `height × width × num_classes`
    pub logits: Vec<f32>,
}

impl SegmentationResult {
    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn logits_at(&self, pixel: usize) -> &[f32] {
        &self.logits[pixel * self.num_classes..(pixel + 1) * self.num_classes]
    }

    /// Checks shape, finiteness, class range and label/argmax agreement.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_pixels();
        if self.num_classes == 0 {
            return Err(Error::Invalid("zero classes".into()));
        }
        if self.labels.len() != n || self.logits.len() != n * self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{}: {} labels, {} logits",
                self.width,
                self.height,
                self.num_classes,
                self.labels.len(),
                self.logits.len()
            )));
        }
        if self.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Segmentation("non-finite logit".into()));
        }
        for (px, &label) in self.labels.iter().enumerate() {
            if usize::from(label) >= self.num_classes {
                return Err(Error::InvalidClass {
                    class: u32::from(label),
                    num_classes: self.num_classes,
                });
            }
            let best = argmax(self.logits_at(px));
            if best != usize::from(label) {
                return Err(Error::Segmentation(format!(
                    "pixel {px}: label {label} is not the logit argmax {best}"
                )));
            }
        }
        Ok(())
    }

    /// Labels with one-hot logits of height `margin`.
    pub fn from_labels(
        width: u32,
        height: u32,
        num_classes: usize,
        labels: Vec<ClassId>,
        margin: f32,
    ) -> Self {
        let mut logits = vec![0.0f32; labels.len() * num_classes];
        for (px, &l) in labels.iter().enumerate() {
            if let Some(slot) = logits.get_mut(px * num_classes + usize::from(l)) {
                *slot = margin;
            }
        }
        Self {
            width,
            height,
            num_classes,
            labels,
            logits,
        }
    }
}

/// A 2D segmenter. Implementations must tolerate concurrent calls on distinct views.
pub trait Segmenter: Sync {
    fn segment(&self, view: &RenderedView, num_classes: usize) -> Result<SegmentationResult>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitModel {
    /// `margin` on the emitted class, 0 elsewhere.
    #[default]
    OneHot,
    /// Emitted class ~ N(margin, 1), others ~ N(0, 1); label = argmax.
    Calibrated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    /// Probability that a pixel's class is replaced by a uniformly drawn wrong class.
    pub noise_rate: f64,
    pub margin: f64,
    pub logits: LogitModel,
    pub seed: u64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            noise_rate: 0.0,
            margin: 10.0,
            logits: LogitModel::OneHot,
            seed: 0,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Invalid(format!(
                "noise rate {} outside [0, 1]",
                self.noise_rate
            )));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Invalid(format!(
                "margin {} must be > 0",
                self.margin
            )));
        }
        Ok(())
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ground-truth segmenter with label noise.
///
/// Pixels whose point is unannotated are treated like background: zero
/// logits and label 0. Randomness is drawn from a per-view stream, so the
/// output for a view does not depend on which other views were segmented.
#[derive(Clone, Debug)]
pub struct OracleSegmenter<'a> {
    gt: &'a [ClassId],
    params: OracleParams,
}

impl<'a> OracleSegmenter<'a> {
    pub fn new(gt: Option<&'a [ClassId]>, params: OracleParams) -> Result<Self> {
        let gt = gt.ok_or(Error::MissingGroundTruth(
            "oracle segmenter needs per-point classes",
        ))?;
        params.validate()?;
        Ok(Self { gt, params })
    }
}

impl Segmenter for OracleSegmenter<'_> {
    fn segment(&self, view: &RenderedView, num_classes: usize) -> Result<SegmentationResult> {
        if num_classes == 0 {
            return Err(Error::Invalid("zero classes".into()));
        }
        let c = num_classes;
        let n = view.num_pixels();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.params.seed, view.view_index as u64));
        let margin = self.params.margin as f32;
        let mut labels = vec![0 as ClassId; n];
        let mut logits = vec![0.0f32; n * c];

        for (px, &point) in view.point_index.iter().enumerate() {
            if point == EMPTY_PIXEL {
                continue;
            }
            let truth = *self.gt.get(point as usize).ok_or(Error::IndexOutOfRange {
                index: point as usize,
                len: self.gt.len(),
            })?;
            if truth == UNLABELED {
                continue;
            }
            if usize::from(truth) >= c {
                return Err(Error::InvalidClass {
                    class: u32::from(truth),
                    num_classes: c,
                });
            }
            let mut emitted = truth;
            if c > 1 && rng.random_bool(self.params.noise_rate) {
                let k = rng.random_range(0..c as ClassId - 1);
                emitted = if k >= truth { k + 1 } else { k };
            }
            let row = &mut logits[px * c..(px + 1) * c];
            match self.params.logits {
                LogitModel::OneHot => {
                    row[usize::from(emitted)] = margin;
                    labels[px] = emitted;
                }
                LogitModel::Calibrated => {
                    for (k, slot) in row.iter_mut().enumerate() {
                        let noise: f64 = rng.sample(StandardNormal);
                        let mean = if k == usize::from(emitted) {
                            self.params.margin
                        } else {
                            0.0
                        };
                        *slot = (mean + noise) as f32;
                    }
                    labels[px] = argmax(row) as ClassId;
                }
            }
        }
        Ok(SegmentationResult {
            width: view.width,
            height: view.height,
            num_classes: c,
            labels,
            logits,
        })
    }
}

pub fn labels_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("labels_{index:06}.png"))
}

pub fn logits_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("logits_{index:06}.bin"))
}

/// Reads the result for view `index` from an exchange directory.
pub fn read_result(
    dir: &Path,
    index: usize,
    width: u32,
    height: u32,
    num_classes: usize,
    margin: f32,
) -> Result<SegmentationResult> {
    let lp = labels_path(dir, index);
    if !lp.is_file() {
        return Err(Error::MissingResult { index, path: lp });
    }
    let img = image::open(&lp)
        .map_err(|source| Error::Image {
            path: lp.clone(),
            source,
        })?
        .into_luma8();
    if (img.width(), img.height()) != (width, height) {
        return Err(Error::ShapeMismatch(format!(
            "{}: {}x{}, view is {width}x{height}",
            lp.display(),
            img.width(),
            img.height()
        )));
    }
    let labels: Vec<ClassId> = img.into_raw().into_iter().map(ClassId::from).collect();
    if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= num_classes) {
        return Err(Error::InvalidClass {
            class: u32::from(bad),
            num_classes,
        });
    }

    let gp = logits_path(dir, index);
    let result = if gp.is_file() {
        let bytes = fs::read(&gp).map_err(|e| Error::io(&gp, e))?;
        let expected = labels.len() * num_classes * 4;
        if bytes.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} bytes, expected {expected} ({width}x{height}x{num_classes} f32)",
                gp.display(),
                bytes.len()
            )));
        }
        let logits: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if let Some(pos) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::Segmentation(format!(
                "{}: non-finite logit at element {pos}",
                gp.display()
            )));
        }
        SegmentationResult {
            width,
            height,
            num_classes,
            labels,
            logits,
        }
    } else {
        SegmentationResult::from_labels(width, height, num_classes, labels, margin)
    };
    result.validate()?;
    Ok(result)
}

/// Writes a result in the exchange format (labels must fit in 8 bits).
pub fn write_result(
    dir: &Path,
    index: usize,
    result: &SegmentationResult,
    with_logits: bool,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grey = result
        .labels
        .iter()
        .map(|&l| {
            u8::try_from(l).map_err(|_| Error::InvalidClass {
                class: u32::from(l),
                num_classes: 256,
            })
        })
        .collect::<Result<Vec<u8>>>()?;
    let lp = labels_path(dir, index);
    image::save_buffer(
        &lp,
        &grey,
        result.width,
        result.height,
        image::ExtendedColorType::L8,
    )
    .map_err(|source| Error::Image { path: lp, source })?;
    if with_logits {
        let gp = logits_path(dir, index);
        let bytes: Vec<u8> = result.logits.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&gp, bytes).map_err(|e| Error::io(&gp, e))?;
    }
    Ok(())
}

pub fn mark_ready(dir: &Path) -> Result<()> {
    let p = dir.join(READY_MARKER);
    fs::write(&p, b"").map_err(|e| Error::io(&p, e))
}

/// Reads results produced by an out-of-process model.
#[derive(Clone, Debug)]
pub struct ExternalSegmenter {
    result_dir: PathBuf,
    margin: f32,
}

impl ExternalSegmenter {
    /// Fails unless the result directory carries the ready marker.
    pub fn new(result_dir: impl Into<PathBuf>, margin: f64) -> Result<Self> {
        let result_dir = result_dir.into();
        let marker = result_dir.join(READY_MARKER);
        if !marker.is_file() {
            return Err(Error::Segmentation(format!(
                "{} not found; the external segmenter has not finished",
                marker.display()
            )));
        }
        Ok(Self {
            result_dir,
            margin: margin as f32,
        })
    }

    pub fn result_dir(&self) -> &Path {
        &self.result_dir
    }
}

impl Segmenter for ExternalSegmenter {
    fn segment(&self, view: &RenderedView, num_classes: usize) -> Result<SegmentationResult> {
        read_result(
            &self.result_dir,
            view.view_index,
            view.width,
            view.height,
            num_classes,
            self.margin,
        )
    }
}

/// Loads the result of every view in `view_dir`, in view order. Fails on the
/// first view (lowest index) without a labels file.
pub fn external_segment(
    view_dir: &Path,
    result_dir: &Path,
    num_classes: usize,
    margin: f64,
) -> Result<Vec<SegmentationResult>> {
    let seg = ExternalSegmenter::new(result_dir, margin)?;
    let indices = list_view_indices(view_dir)?;
    if let Some(&missing) = indices
        .iter()
        .find(|&&i| !labels_path(result_dir, i).is_file())
    {
        return Err(Error::MissingResult {
            index: missing,
            path: labels_path(result_dir, missing),
        });
    }
    indices
        .iter()
        .map(|&i| {
            let vp = view_png_path(view_dir, i);
            let (w, h) =
                image::image_dimensions(&vp).map_err(|source| Error::Image { path: vp, source })?;
            read_result(&seg.result_dir, i, w, h, num_classes, seg.margin)
        })
        .collect()
}
