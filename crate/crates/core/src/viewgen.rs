//! Virtual camera poses and z-buffered point rendering.
//!
//! Camera frames follow the usual vision convention: x right, y down,
//! z forward. A pixel `(col, row)` covers `[col, col + 1) × [row, row + 1)`
//! in continuous image coordinates, so a point projecting to `(u, v)` lands
//! in pixel `(floor(u), floor(v))`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::DensePointCloud;
use crate::pose::rotation_y;
use crate::Pose;

/// Marks a pixel that no point covers.
pub const EMPTY_PIXEL: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    /// 1024×512 with a 90° horizontal field of view.
    fn default() -> Self {
        Self {
            width: 1024,
            height: 512,
            focal: 512.0,
            cx: 512.0,
            cy: 256.0,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image dimensions must be >= 1".into()));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::Invalid(format!("focal {} must be > 0", self.focal)));
        }
        let inside = |c: f64, n: u32| c.is_finite() && (0.0..=f64::from(n)).contains(&c);
        if !inside(self.cx, self.width) || !inside(self.cy, self.height) {
            return Err(Error::Invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Continuous image coordinates of a camera-frame point in front of the camera.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| {
            (
                self.focal * p.x / p.z + self.cx,
                self.focal * p.y / p.z + self.cy,
            )
        })
    }

    #[inline]
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(u32, u32)> {
        let (col, row) = (u.floor(), v.floor());
        (col >= 0.0 && row >= 0.0 && col < f64::from(self.width) && row < f64::from(self.height))
            .then_some((col as u32, row as u32))
    }

    /// Camera-frame point at `depth` along the ray through `(u, v)`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) * depth / self.focal,
            (v - self.cy) * depth / self.focal,
            depth,
        )
    }
}

/// Randomisation of virtual poses around the trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseNoiseParams {
    /// Half-range of the yaw jitter, degrees.
    pub theta_deg: f64,
    /// Half-range of the offset along camera X and Z, meters.
    pub lambda: f64,
    /// Half-range of the offset along camera Y, meters.
    pub gamma: f64,
    /// Number of views.
    pub count: usize,
    pub seed: u64,
}

impl Default for PoseNoiseParams {
    fn default() -> Self {
        Self {
            theta_deg: 30.0,
            lambda: 1.0,
            gamma: 1.0,
            count: 600,
            seed: 0,
        }
    }
}

impl PoseNoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("theta", self.theta_deg),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} = {v} must be >= 0")));
            }
        }
        if self.count == 0 {
            return Err(Error::Invalid("view count must be >= 1".into()));
        }
        Ok(())
    }
}

#[inline]
fn symmetric(rng: &mut impl Rng, half_range: f64) -> f64 {
    (2.0 * rng.random::<f64>() - 1.0) * half_range
}

/// Draws `params.count` virtual camera poses.
///
/// Each pose starts from a uniformly chosen trajectory pose, is yawed about
/// its own Y axis by `U(-θ, θ)`, then shifted by `U(-λ, λ)` along its X and Z
/// axes and `U(-γ, γ)` along its Y axis (axes of the yawed rotation).
pub fn sample_poses(trajectory: &[Pose], params: &PoseNoiseParams) -> Result<Vec<Pose>> {
    if trajectory.is_empty() {
        return Err(Error::Empty("pose list"));
    }
    params.validate()?;
    let theta = params.theta_deg.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    Ok((0..params.count)
        .map(|_| {
            let base = &trajectory[rng.random_range(0..trajectory.len())];
            let yaw = symmetric(&mut rng, theta);
            let pose = base.rotated_locally(&rotation_y(yaw));
            let dx = symmetric(&mut rng, params.lambda);
            let dz = symmetric(&mut rng, params.lambda);
            let dy = symmetric(&mut rng, params.gamma);
            let offset = pose.axis(0) * dx + pose.axis(2) * dz + pose.axis(1) * dy;
            pose.translated(&offset)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub intrinsics: CameraIntrinsics,
    /// Each point covers a `(2r+1)²` pixel square.
    pub splat_radius: u32,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            splat_radius: 1,
            d_min: 1.0,
            d_max: 30.0,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(Error::Invalid(format!(
                "depth range [{}, {}] must satisfy 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        Ok(())
    }
}

/// One rendered virtual view. All maps are row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub view_index: usize,
    pub pose: Pose,
    pub width: u32,
    pub height: u32,
    pub image: Vec<u8>,
    /// Camera-frame depth of the winning point, 0 where empty.
    pub depth: Vec<f64>,
    pub point_index: Vec<u32>,
}

impl RenderedView {
    pub fn num_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn occupied(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.point_index
            .iter()
            .enumerate()
            .filter(|(_, &p)| p != EMPTY_PIXEL)
            .map(|(i, &p)| (i, p))
    }
}

/// Maps a normalised intensity to an 8-bit grey level.
pub fn quantize_intensity(value: f64, range: (f64, f64)) -> u8 {
    let span = range.1 - range.0;
    if span <= 0.0 {
        return 0;
    }
    ((value - range.0) / span * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn render(
    cloud: &DensePointCloud,
    pose: &Pose,
    view_index: usize,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    if cloud.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    settings.validate()?;
    let intr = &settings.intrinsics;
    let (w, h) = (intr.width as usize, intr.height as usize);
    let r = settings.splat_radius as i64;
    let mut depth = vec![f64::INFINITY; w * h];
    let mut point_index = vec![EMPTY_PIXEL; w * h];

    for (i, p) in cloud.positions.iter().enumerate() {
        let pc = pose.apply_inverse(p);
        let z = pc.z;
        if !(z >= settings.d_min && z <= settings.d_max) {
            continue;
        }
        let Some((col, row)) = intr.project(&pc).and_then(|(u, v)| intr.pixel_of(u, v)) else {
            continue;
        };
        let (col, row) = (i64::from(col), i64::from(row));
        let rows = (row - r).max(0)..=(row + r).min(h as i64 - 1);
        let cols = (col - r).max(0) as usize..=(col + r).min(w as i64 - 1) as usize;
        for y in rows {
            let base = y as usize * w;
            for x in cols.clone() {
                let px = base + x;
                // strict: on equal depth the earlier (lower) index stays
                if z < depth[px] {
                    depth[px] = z;
                    point_index[px] = i as u32;
                }
            }
        }
    }

    let mut image = vec![0u8; w * h];
    for px in 0..w * h {
        match point_index[px] {
            EMPTY_PIXEL => depth[px] = 0.0,
            p => image[px] = quantize_intensity(cloud.intensity[p as usize], cloud.intensity_range),
        }
    }
    Ok(RenderedView {
        view_index,
        pose: *pose,
        width: intr.width,
        height: intr.height,
        image,
        depth,
        point_index,
    })
}

pub fn view_stem(index: usize) -> String {
    format!("view_{index:06}")
}

pub fn view_png_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.png", view_stem(index)))
}

fn sidecar_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.txt", view_stem(index)))
}

fn index_map_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.idx", view_stem(index)))
}

/// Sidecar text: one `key value...` line per field.
///
/// ```text
/// view_index 3
/// width 1024
/// height 512
/// focal 512
/// principal_point 512 256
/// splat_radius 1
/// depth_range 1 30
/// pose r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz
/// ```
///
/// `pose` maps camera coordinates to world coordinates.
pub fn format_sidecar(view: &RenderedView, settings: &RenderSettings) -> String {
    let intr = &settings.intrinsics;
    let mut s = String::new();
    let _ = writeln!(s, "view_index {}", view.view_index);
    let _ = writeln!(s, "width {}", view.width);
    let _ = writeln!(s, "height {}", view.height);
    let _ = writeln!(s, "focal {:?}", intr.focal);
    let _ = writeln!(s, "principal_point {:?} {:?}", intr.cx, intr.cy);
    let _ = writeln!(s, "splat_radius {}", settings.splat_radius);
    let _ = writeln!(s, "depth_range {:?} {:?}", settings.d_min, settings.d_max);
    let pose: Vec<String> = view
        .pose
        .to_row_major_3x4()
        .iter()
        .map(|v| format!("{v:?}"))
        .collect();
    let _ = writeln!(s, "pose {}", pose.join(" "));
    s
}

/// Parses a sidecar back into `(view_index, pose, settings)`.
pub fn parse_sidecar(path: &Path, text: &str) -> Result<(usize, Pose, RenderSettings)> {
    let mut index = None;
    let mut pose = None;
    let mut settings = RenderSettings::default();
    for (n, line) in text.lines().enumerate() {
        let ln = n + 1;
        let mut tok = line.split_whitespace();
        let Some(key) = tok.next() else { continue };
        let rest: Vec<&str> = tok.collect();
        let nums = |count: usize| -> Result<Vec<f64>> {
            if rest.len() != count {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("{key}: expected {count} values"),
                ));
            }
            rest.iter()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(path, ln, format!("not a number: '{t}'")))
                })
                .collect()
        };
        match key {
            "view_index" => index = Some(nums(1)?[0] as usize),
            "width" => settings.intrinsics.width = nums(1)?[0] as u32,
            "height" => settings.intrinsics.height = nums(1)?[0] as u32,
            "focal" => settings.intrinsics.focal = nums(1)?[0],
            "principal_point" => {
                let v = nums(2)?;
                settings.intrinsics.cx = v[0];
                settings.intrinsics.cy = v[1];
            }
            "splat_radius" => settings.splat_radius = nums(1)?[0] as u32,
            "depth_range" => {
                let v = nums(2)?;
                settings.d_min = v[0];
                settings.d_max = v[1];
            }
            "pose" => {
                let v: [f64; 12] = nums(12)?.try_into().expect("12 values");
                pose = Some(
                    Pose::from_row_major_3x4(&v)
                        .map_err(|e| Error::parse(path, ln, e.to_string()))?,
                );
            }
            other => return Err(Error::parse(path, ln, format!("unknown key '{other}'"))),
        }
    }
    let index = index.ok_or_else(|| Error::parse(path, 0, "missing view_index"))?;
    let pose = pose.ok_or_else(|| Error::parse(path, 0, "missing pose"))?;
    Ok((index, pose, settings))
}

const INDEX_MAGIC: &[u8; 8] = b"VPLIDX01";

fn encode_index_map(view: &RenderedView) -> Vec<u8> {
    let occupied: Vec<(usize, u32)> = view.occupied().collect();
    let mut buf = Vec::with_capacity(16 + occupied.len() * 16);
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&(occupied.len() as u64).to_le_bytes());
    for (px, point) in occupied {
        buf.extend_from_slice(&(px as u32).to_le_bytes());
        buf.extend_from_slice(&point.to_le_bytes());
        buf.extend_from_slice(&view.depth[px].to_le_bytes());
    }
    buf
}

fn decode_index_map(path: &Path, bytes: &[u8], view: &mut RenderedView) -> Result<()> {
    let corrupt = || Error::parse(path, 0, "corrupt index map");
    if bytes.len() < 16 || &bytes[..8] != INDEX_MAGIC {
        return Err(corrupt());
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + n * 16 {
        return Err(corrupt());
    }
    for rec in bytes[16..].chunks_exact(16) {
        let px = u32::from_le_bytes(rec[0..4].try_into().expect("4 bytes")) as usize;
        if px >= view.num_pixels() {
            return Err(corrupt());
        }
        view.point_index[px] = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes"));
        view.depth[px] = f64::from_le_bytes(rec[8..16].try_into().expect("8 bytes"));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `view_NNNNNN.png` (8-bit grey), `view_NNNNNN.txt` (sidecar) and
/// `view_NNNNNN.idx` (sparse pixel → point/depth map) for every view.
pub fn export_views(views: &[RenderedView], dir: &Path, settings: &RenderSettings) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for view in views {
        export_view(view, dir, settings)?;
    }
    Ok(())
}

pub fn export_view(view: &RenderedView, dir: &Path, settings: &RenderSettings) -> Result<()> {
    let png = view_png_path(dir, view.view_index);
    image::save_buffer(
        &png,
        &view.image,
        view.width,
        view.height,
        image::ExtendedColorType::L8,
    )
    .map_err(|source| Error::Image { path: png, source })?;
    write_file(
        &sidecar_path(dir, view.view_index),
        format_sidecar(view, settings).as_bytes(),
    )?;
    write_file(
        &index_map_path(dir, view.view_index),
        &encode_index_map(view),
    )
}

/// Reloads a view written by [`export_view`].
pub fn read_view(dir: &Path, index: usize) -> Result<(RenderedView, RenderSettings)> {
    let sc = sidecar_path(dir, index);
    let text = fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
    let (view_index, pose, settings) = parse_sidecar(&sc, &text)?;
    let png = view_png_path(dir, index);
    let img = image::open(&png)
        .map_err(|source| Error::Image {
            path: png.clone(),
            source,
        })?
        .into_luma8();
    if img.width() != settings.intrinsics.width || img.height() != settings.intrinsics.height {
        return Err(Error::ShapeMismatch(format!(
            "{}: image {}x{} vs sidecar {}x{}",
            png.display(),
            img.width(),
            img.height(),
            settings.intrinsics.width,
            settings.intrinsics.height
        )));
    }
    let n = settings.intrinsics.num_pixels();
    let mut view = RenderedView {
        view_index,
        pose,
        width: img.width(),
        height: img.height(),
        image: img.into_raw(),
        depth: vec![0.0; n],
        point_index: vec![EMPTY_PIXEL; n],
    };
    let ip = index_map_path(dir, index);
    let bytes = fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
    decode_index_map(&ip, &bytes, &mut view)?;
    Ok((view, settings))
}

/// View indices present in `dir`, ascending.
pub fn list_view_indices(dir: &Path) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = crate::io::list_files(dir, "png")?
        .iter()
        .filter_map(|p| p.file_stem()?.to_str()?.strip_prefix("view_")?.parse().ok())
        .collect();
    out.sort_unstable();
    Ok(out)
}
