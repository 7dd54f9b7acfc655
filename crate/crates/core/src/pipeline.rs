//! Configuration and orchestration.
//!
//! [`label_sequence`] runs every stage in memory. [`Workspace`] runs the same
//! stages against a work directory, caching each stage's output behind a
//! hash of its inputs:
//!
//! ```text
//! work_dir/
//!   cloud.bin            aligned cloud
//!   views/               view_NNNNNN.{png,txt,idx}
//!   seg/                 labels_NNNNNN.png written by the oracle segmenter
//!   votes/table.bin      accumulated vote table
//!   labels/              <estimator>.label pseudo-labels + <estimator>.json summary
//!   report.json          evaluation (also report.txt, report.csv)
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate, format_report, report_csv, EvalConfig, EvalReport};
use crate::io::{self, ScanFormat};
use crate::pointcloud::{align, ClipMax, DensePointCloud, IntensityParams, ScanSequence};
use crate::pose::lidar_to_camera;
use crate::segmenter::{
    write_result, ExternalSegmenter, LogitModel, OracleParams, OracleSegmenter, Segmenter,
};
use crate::viewgen::{
    self, render, sample_poses, CameraIntrinsics, PoseNoiseParams, RenderSettings,
};
use crate::voting::{
    backproject, elect, read_table, summarize, write_table, CompoundMode, Estimator, PointLabels,
    VoteSummary, VoteTable,
};
use crate::Pose;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub scans: PathBuf,
    pub scan_format: ScanFormat,
    pub poses: PathBuf,
    pub labels: Option<PathBuf>,
    /// One class name per line; overrides `classes.names`.
    pub classes: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            scans: "scans".into(),
            scan_format: ScanFormat::Bin,
            poses: "poses.txt".into(),
            labels: None,
            classes: None,
            work_dir: "work".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassesConfig {
    pub names: Vec<String>,
}

impl Default for ClassesConfig {
    fn default() -> Self {
        Self {
            names: crate::synth::DEFAULT_CLASSES
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntensityConfig {
    pub beta_min: f64,
    /// Fixed upper clip; when absent the per-scan percentile below is used.
    pub beta_max: Option<f64>,
    pub beta_max_percentile: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        Self {
            beta_min: 0.0,
            beta_max: None,
            beta_max_percentile: 99.0,
            eta_min: 0.0,
            eta_max: 1.0,
        }
    }
}

impl IntensityConfig {
    pub fn params(&self) -> IntensityParams {
        IntensityParams {
            beta_min: self.beta_min,
            beta_max: match self.beta_max {
                Some(v) => ClipMax::Fixed(v),
                None => ClipMax::Percentile(self.beta_max_percentile),
            },
            eta_min: self.eta_min,
            eta_max: self.eta_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub splat_radius: u32,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        let r = RenderSettings::default();
        Self {
            width: r.intrinsics.width,
            height: r.intrinsics.height,
            focal: r.intrinsics.focal,
            cx: r.intrinsics.cx,
            cy: r.intrinsics.cy,
            splat_radius: r.splat_radius,
            d_min: r.d_min,
            d_max: r.d_max,
        }
    }
}

impl CameraConfig {
    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            intrinsics: CameraIntrinsics {
                width: self.width,
                height: self.height,
                focal: self.focal,
                cx: self.cx,
                cy: self.cy,
            },
            splat_radius: self.splat_radius,
            d_min: self.d_min,
            d_max: self.d_max,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    #[default]
    Oracle,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub kind: SegmenterKind,
    pub noise_rate: f64,
    /// Oracle logit height; also the one-hot height synthesised for external labels without logits.
    pub margin: f64,
    pub logits: LogitModel,
    pub seed: u64,
    pub result_dir: Option<PathBuf>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        let o = OracleParams::default();
        Self {
            kind: SegmenterKind::Oracle,
            noise_rate: o.noise_rate,
            margin: o.margin,
            logits: o.logits,
            seed: o.seed,
            result_dir: None,
        }
    }
}

impl SegmenterConfig {
    pub fn oracle_params(&self) -> OracleParams {
        OracleParams {
            noise_rate: self.noise_rate,
            margin: self.margin,
            logits: self.logits,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VotingConfig {
    pub estimator: Estimator,
    pub compound_mode: CompoundMode,
    /// One vote per point per view instead of one per pixel.
    pub dedup_per_view: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads; 0 = one per core.
    pub workers: usize,
    /// Views rendered and segmented together before being folded into the table.
    pub chunk_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            workers: 0,
            chunk_size: 16,
        }
    }
}

/// Every knob of a run. Parsed from TOML; dotted keys (`views.count = 600`)
/// and tables are equivalent. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub classes: ClassesConfig,
    pub intensity: IntensityConfig,
    pub views: PoseNoiseParams,
    pub camera: CameraConfig,
    pub segmenter: SegmenterConfig,
    pub voting: VotingConfig,
    pub eval: EvalConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.scans);
        fix(&mut paths.poses);
        fix(&mut paths.work_dir);
        paths.labels.iter_mut().for_each(fix);
        paths.classes.iter_mut().for_each(fix);
        self.segmenter.result_dir.iter_mut().for_each(fix);
    }

    /// Sets every seed in the config.
    pub fn override_seed(&mut self, seed: u64) {
        self.views.seed = seed;
        self.segmenter.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.views.validate()?;
        self.camera.render_settings().validate()?;
        if self.intensity.eta_min > self.intensity.eta_max {
            return Err(Error::InvalidRange {
                min: self.intensity.eta_min,
                max: self.intensity.eta_max,
            });
        }
        if self.classes.names.is_empty() && self.paths.classes.is_none() {
            return Err(Error::Config("no classes configured".into()));
        }
        if self.segmenter.kind == SegmenterKind::Oracle {
            self.segmenter.oracle_params().validate()?;
        } else if self.segmenter.result_dir.is_none() {
            return Err(Error::Config(
                "segmenter.result_dir is required for the external segmenter".into(),
            ));
        }
        if self.run.chunk_size == 0 {
            return Err(Error::Config("run.chunk_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Camera poses looking along the sensor heading from each sensor position.
pub fn camera_trajectory(sensor_poses: &[Pose]) -> Vec<Pose> {
    let mount = lidar_to_camera();
    sensor_poses.iter().map(|p| p.compose(&mount)).collect()
}

/// Renders, segments and back-projects every view, folding the votes into a
/// table in ascending view order. Views are processed `chunk_size` at a time
/// in parallel.
pub fn vote_views(
    cloud: &DensePointCloud,
    camera_poses: &[Pose],
    settings: &RenderSettings,
    segmenter: &dyn Segmenter,
    dedup_per_view: bool,
    chunk_size: usize,
) -> Result<VoteTable> {
    let mut table = VoteTable::new(cloud.len(), cloud.num_classes());
    let indexed: Vec<(usize, &Pose)> = camera_poses.iter().enumerate().collect();
    for chunk in indexed.chunks(chunk_size.max(1)) {
        let contributions = chunk
            .par_iter()
            .map(|&(i, pose)| {
                let view = render(cloud, pose, i, settings)?;
                let seg = segmenter.segment(&view, cloud.num_classes())?;
                backproject(&view, &seg, dedup_per_view)
            })
            .collect::<Result<Vec<_>>>()?;
        for c in &contributions {
            table.accumulate(c)?;
        }
    }
    Ok(table)
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub cloud: DensePointCloud,
    pub camera_poses: Vec<Pose>,
    pub table: VoteTable,
    pub labels: PointLabels,
    pub report: Option<EvalReport>,
}

/// Runs align → sample → render → segment → vote → elect (→ eval) in memory.
/// Only the oracle segmenter is available here.
pub fn label_sequence(seq: &ScanSequence, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let cloud = align(seq, &cfg.intensity.params())?;
    let camera_poses = sample_poses(&camera_trajectory(&seq.poses), &cfg.views)?;
    let oracle = match cfg.segmenter.kind {
        SegmenterKind::Oracle => {
            OracleSegmenter::new(cloud.gt.as_deref(), cfg.segmenter.oracle_params())?
        }
        SegmenterKind::External => {
            return Err(Error::Config(
                "in-memory runs support the oracle segmenter only".into(),
            ))
        }
    };
    let table = vote_views(
        &cloud,
        &camera_poses,
        &cfg.camera.render_settings(),
        &oracle,
        cfg.voting.dedup_per_view,
        cfg.run.chunk_size,
    )?;
    let labels = elect(&table, cfg.voting.estimator, cfg.voting.compound_mode);
    let report = match &cloud.gt {
        Some(gt) => Some(evaluate(
            &cloud.positions,
            &labels.labels,
            gt,
            &seq.poses,
            cloud.num_classes(),
            &cfg.eval,
        )?),
        None => None,
    };
    Ok(PipelineOutput {
        cloud,
        camera_poses,
        table,
        labels,
        report,
    })
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Config,
    Synth,
    Align,
    Render,
    Segment,
    Vote,
    Eval,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Synth => "synth",
            Stage::Align => "align",
            Stage::Render => "render",
            Stage::Segment => "segment",
            Stage::Vote => "vote",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub trait InStage<T> {
    fn in_stage(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> InStage<T> for Result<T> {
    fn in_stage(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Cached,
    Computed,
}

/// Output paths of a vote stage run.
#[derive(Clone, Debug)]
pub struct LabelArtifacts {
    pub labels_path: PathBuf,
    pub summary_path: PathBuf,
    pub labels: PointLabels,
    pub summary: VoteSummary,
}

/// A configured pipeline bound to its work directory.
pub struct Workspace {
    cfg: PipelineConfig,
    force: bool,
    log: Vec<(Stage, StageStatus)>,
    cloud: Option<(DensePointCloud, String)>,
    sensor_poses: Option<Vec<Pose>>,
    render_stamp: Option<String>,
    table: Option<(VoteTable, String)>,
    elected: Option<PointLabels>,
}

const STAMP_FILE: &str = ".stamp";
const NO_GT_HINT: &str = "set paths.labels to evaluate";

fn hash_stamp(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serialisable")
}

fn file_fingerprint(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mtime = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    Ok(format!("{}:{}:{}", path.display(), meta.len(), mtime))
}

fn dir_fingerprint(dir: &Path, ext: &str) -> Result<String> {
    let mut parts = Vec::new();
    for f in io::list_files(dir, ext)? {
        parts.push(file_fingerprint(&f)?);
    }
    Ok(parts.join("\n"))
}

fn read_stamp(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

fn write_stamp(path: &Path, stamp: &str) -> Result<()> {
    fs::write(path, stamp).map_err(|e| Error::io(path, e))
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl Workspace {
    pub fn new(cfg: PipelineConfig, force: bool) -> Result<Self, StageError> {
        cfg.validate().in_stage(Stage::Config)?;
        fs::create_dir_all(&cfg.paths.work_dir)
            .map_err(|e| Error::io(&cfg.paths.work_dir, e))
            .in_stage(Stage::Config)?;
        Ok(Self {
            cfg,
            force,
            log: Vec::new(),
            cloud: None,
            sensor_poses: None,
            render_stamp: None,
            table: None,
            elected: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Which stages ran and which were served from cache, in order.
    pub fn log(&self) -> &[(Stage, StageStatus)] {
        &self.log
    }

    pub fn work_dir(&self) -> &Path {
        &self.cfg.paths.work_dir
    }

    pub fn views_dir(&self) -> PathBuf {
        self.work_dir().join("views")
    }

    pub fn seg_dir(&self) -> PathBuf {
        self.work_dir().join("seg")
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.work_dir().join("labels")
    }

    fn class_names(&self) -> Result<Vec<String>> {
        match &self.cfg.paths.classes {
            Some(p) => io::read_class_names(p),
            None => Ok(self.cfg.classes.names.clone()),
        }
    }

    fn load_sensor_poses(&mut self) -> Result<Vec<Pose>> {
        if let Some(p) = &self.sensor_poses {
            return Ok(p.clone());
        }
        let poses = io::load_poses(&self.cfg.paths.poses)?;
        self.sensor_poses = Some(poses.clone());
        Ok(poses)
    }

    fn align_stamp(&self) -> Result<String> {
        let paths = &self.cfg.paths;
        let labels = match &paths.labels {
            Some(d) => dir_fingerprint(d, io::LABEL_EXTENSION)?,
            None => String::new(),
        };
        Ok(hash_stamp(&[
            "align",
            &dir_fingerprint(&paths.scans, paths.scan_format.extension())?,
            &file_fingerprint(&paths.poses)?,
            &labels,
            &json(&self.class_names()?),
            &json(&self.cfg.intensity),
        ]))
    }

    pub fn align(&mut self) -> Result<(&DensePointCloud, String), StageError> {
        if self.cloud.is_none() {
            let loaded = self.align_inner().in_stage(Stage::Align)?;
            self.cloud = Some(loaded);
        }
        let (cloud, stamp) = self.cloud.as_ref().expect("aligned");
        Ok((cloud, stamp.clone()))
    }

    fn align_inner(&mut self) -> Result<(DensePointCloud, String)> {
        let stamp = self.align_stamp()?;
        let cloud_path = self.work_dir().join("cloud.bin");
        let stamp_path = self.work_dir().join("cloud.stamp");
        if !self.force && read_stamp(&stamp_path).as_deref() == Some(&stamp) && cloud_path.is_file()
        {
            self.log.push((Stage::Align, StageStatus::Cached));
            return Ok((io::read_cloud(&cloud_path)?, stamp));
        }
        let paths = &self.cfg.paths;
        let seq = io::load_sequence(
            &paths.scans,
            paths.scan_format,
            &paths.poses,
            paths.labels.as_deref(),
            self.class_names()?,
        )?;
        let cloud = align(&seq, &self.cfg.intensity.params())?;
        if cloud.is_empty() {
            return Err(Error::Empty("aligned cloud"));
        }
        io::write_cloud(&cloud_path, &cloud)?;
        write_stamp(&stamp_path, &stamp)?;
        self.sensor_poses = Some(seq.poses);
        self.log.push((Stage::Align, StageStatus::Computed));
        Ok((cloud, stamp))
    }

    /// Samples poses and writes every view into `views/`.
    pub fn render(&mut self) -> Result<String, StageError> {
        if let Some(s) = &self.render_stamp {
            return Ok(s.clone());
        }
        let (_, align_stamp) = self.align()?;
        let stamp = self.render_inner(&align_stamp).in_stage(Stage::Render)?;
        self.render_stamp = Some(stamp.clone());
        Ok(stamp)
    }

    fn render_inner(&mut self, align_stamp: &str) -> Result<String> {
        let settings = self.cfg.camera.render_settings();
        let stamp = hash_stamp(&[
            "render",
            align_stamp,
            &json(&self.cfg.views),
            &json(&settings),
        ]);
        let dir = self.views_dir();
        let stamp_path = dir.join(STAMP_FILE);
        if !self.force && read_stamp(&stamp_path).as_deref() == Some(&stamp) {
            self.log.push((Stage::Render, StageStatus::Cached));
            return Ok(stamp);
        }
        let sensor = self.load_sensor_poses()?;
        let poses = sample_poses(&camera_trajectory(&sensor), &self.cfg.views)?;
        reset_dir(&dir)?;
        let (cloud, _) = self.cloud.as_ref().expect("aligned before render");
        let workers = self.cfg.run.workers;
        with_workers(workers, || {
            poses
                .par_iter()
                .enumerate()
                .try_for_each(|(i, pose)| -> Result<()> {
                    let view = render(cloud, pose, i, &settings)?;
                    viewgen::export_view(&view, &dir, &settings)
                })
        })??;
        write_stamp(&stamp_path, &stamp)?;
        self.log.push((Stage::Render, StageStatus::Computed));
        Ok(stamp)
    }

    /// Segments every rendered view and accumulates the vote table.
    pub fn segment(&mut self) -> Result<(&VoteTable, String), StageError> {
        if self.table.is_none() {
            let render_stamp = self.render()?;
            let t = self.segment_inner(&render_stamp).in_stage(Stage::Segment)?;
            self.table = Some(t);
        }
        let (table, stamp) = self.table.as_ref().expect("segmented");
        Ok((table, stamp.clone()))
    }

    fn segment_inner(&mut self, render_stamp: &str) -> Result<(VoteTable, String)> {
        let seg_cfg = &self.cfg.segmenter;
        let external = match seg_cfg.kind {
            SegmenterKind::External => {
                let dir = seg_cfg.result_dir.as_ref().expect("validated");
                let marker = dir.join(crate::segmenter::READY_MARKER);
                let fp = if marker.is_file() {
                    file_fingerprint(&marker)?
                } else {
                    String::new()
                };
                Some((dir.clone(), fp))
            }
            SegmenterKind::Oracle => None,
        };
        let stamp = hash_stamp(&[
            "segment",
            render_stamp,
            &json(seg_cfg),
            &external.as_ref().map(|e| e.1.clone()).unwrap_or_default(),
            &json(&self.cfg.voting.dedup_per_view),
        ]);
        let votes_dir = self.work_dir().join("votes");
        let table_path = votes_dir.join("table.bin");
        let stamp_path = votes_dir.join(STAMP_FILE);
        if !self.force && read_stamp(&stamp_path).as_deref() == Some(&stamp) && table_path.is_file()
        {
            self.log.push((Stage::Segment, StageStatus::Cached));
            return Ok((read_table(&table_path)?, stamp));
        }

        let (cloud, _) = self.cloud.as_ref().expect("aligned before segment");
        let num_classes = cloud.num_classes();
        let segmenter: Box<dyn Segmenter + '_> = match &external {
            Some((dir, _)) => Box::new(ExternalSegmenter::new(dir, seg_cfg.margin)?),
            None => Box::new(OracleSegmenter::new(
                cloud.gt.as_deref(),
                seg_cfg.oracle_params(),
            )?),
        };
        let views_dir = self.views_dir();
        let indices = viewgen::list_view_indices(&views_dir)?;
        if let Some((dir, _)) = &external {
            if let Some(&missing) = indices
                .iter()
                .find(|&&i| !crate::segmenter::labels_path(dir, i).is_file())
            {
                return Err(Error::MissingResult {
                    index: missing,
                    path: crate::segmenter::labels_path(dir, missing),
                });
            }
        }
        let seg_dir = self.seg_dir();
        reset_dir(&seg_dir)?;
        let dedup = self.cfg.voting.dedup_per_view;
        let write_labels = external.is_none() && num_classes <= 256;
        let mut table = VoteTable::new(cloud.len(), num_classes);
        let chunk = self.cfg.run.chunk_size;
        let segmenter = segmenter.as_ref();
        with_workers(self.cfg.run.workers, || -> Result<()> {
            for group in indices.chunks(chunk) {
                let contributions = group
                    .par_iter()
                    .map(|&i| {
                        let (view, _) = viewgen::read_view(&views_dir, i)?;
                        let seg = segmenter.segment(&view, num_classes)?;
                        if write_labels {
                            write_result(&seg_dir, i, &seg, false)?;
                        }
                        backproject(&view, &seg, dedup)
                    })
                    .collect::<Result<Vec<_>>>()?;
                for c in &contributions {
                    table.accumulate(c)?;
                }
            }
            Ok(())
        })??;
        write_table(&table_path, &table)?;
        write_stamp(&stamp_path, &stamp)?;
        self.log.push((Stage::Segment, StageStatus::Computed));
        Ok((table, stamp))
    }

    pub fn labels_path(&self, estimator: Estimator) -> PathBuf {
        self.labels_dir()
            .join(format!("{}.label", self.label_stem(estimator)))
    }

    fn label_stem(&self, estimator: Estimator) -> String {
        match (estimator, self.cfg.voting.compound_mode) {
            (Estimator::SoftCompound, CompoundMode::RawProduct) => "soft_compound_raw".into(),
            (e, _) => e.as_str().into(),
        }
    }

    /// Elects labels with `estimator` and writes the pseudo-label file and its summary.
    pub fn vote(&mut self, estimator: Estimator) -> Result<LabelArtifacts, StageError> {
        self.segment()?;
        let compound = self.cfg.voting.compound_mode;
        let labels_path = self.labels_path(estimator);
        let summary_path = labels_path.with_extension("json");
        let (table, _) = self.table.as_ref().expect("segmented");
        let result = (|| -> Result<LabelArtifacts> {
            let labels = elect(table, estimator, compound);
            let summary = summarize(table, &labels, compound);
            io::write_labels(&labels_path, &labels.labels)?;
            let text = serde_json::to_string_pretty(&summary).expect("serialisable");
            fs::write(&summary_path, text).map_err(|e| Error::io(&summary_path, e))?;
            Ok(LabelArtifacts {
                labels_path,
                summary_path,
                labels,
                summary,
            })
        })()
        .in_stage(Stage::Vote)?;
        self.elected = Some(result.labels.clone());
        self.log.push((Stage::Vote, StageStatus::Computed));
        Ok(result)
    }

    /// Scores the labels of `estimator` against ground truth and writes the reports.
    pub fn eval(&mut self, estimator: Estimator) -> Result<EvalReport, StageError> {
        if self.cfg.paths.labels.is_none() {
            return Err(Error::MissingGroundTruth(NO_GT_HINT)).in_stage(Stage::Eval);
        }
        let labels = match self.elected.take() {
            Some(l) if l.estimator == estimator => l.labels,
            _ => self.vote(estimator)?.labels.labels,
        };
        self.align()?;
        let sensor = self.load_sensor_poses().in_stage(Stage::Eval)?;
        let (cloud, _) = self.cloud.as_ref().expect("aligned");
        let report = (|| -> Result<EvalReport> {
            let gt = cloud
                .gt
                .as_ref()
                .ok_or(Error::MissingGroundTruth(NO_GT_HINT))?;
            let report = evaluate(
                &cloud.positions,
                &labels,
                gt,
                &sensor,
                cloud.num_classes(),
                &self.cfg.eval,
            )?;
            let dir = self.work_dir();
            let write = |name: &str, text: String| -> Result<()> {
                let p = dir.join(name);
                fs::write(&p, text).map_err(|e| Error::io(&p, e))
            };
            write(
                "report.json",
                serde_json::to_string_pretty(&report).expect("serialisable"),
            )?;
            write("report.txt", format_report(&report, &cloud.class_names))?;
            write("report.csv", report_csv(&report, &cloud.class_names))?;
            Ok(report)
        })()
        .in_stage(Stage::Eval)?;
        self.log.push((Stage::Eval, StageStatus::Computed));
        Ok(report)
    }

    /// Every stage in order. Evaluates only when ground truth is configured.
    pub fn run(&mut self) -> Result<(LabelArtifacts, Option<EvalReport>), StageError> {
        let estimator = self.cfg.voting.estimator;
        let artifacts = self.vote(estimator)?;
        let report = if self.cfg.paths.labels.is_some() {
            Some(self.eval(estimator)?)
        } else {
            None
        };
        Ok((artifacts, report))
    }
}
