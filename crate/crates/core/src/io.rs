//! File formats.
//!
//! - scan `.bin`: little-endian `f32` quadruples `(x, y, z, intensity)`, no header
//! - scan `.ply`: ASCII PLY with `x`, `y`, `z` and `intensity` vertex properties
//! - labels `.label`: one little-endian `u16` per point, `65535` = unlabeled
//! - poses: one line per scan, 12 whitespace-separated values, row-major `[R | t]`
//! - classes: one class name per line
//!
//! A sequence directory written by [`write_sequence`] has the layout
//! `scans/NNNNNN.bin`, `labels/NNNNNN.label`, `poses.txt`, `classes.txt`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{DensePointCloud, RawScan, ScanSequence};
use crate::{ClassId, Pose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanFormat {
    #[default]
    Bin,
    Ply,
}

impl ScanFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ScanFormat::Bin => "bin",
            ScanFormat::Ply => "ply",
        }
    }
}

pub const LABEL_EXTENSION: &str = "label";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scan_bin(path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::parse(
            path,
            0,
            format!("{} bytes is not a multiple of 16", bytes.len()),
        ));
    }
    let n = bytes.len() / 16;
    let mut positions = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(16) {
        let f = |i: usize| {
            f64::from(f32::from_le_bytes(
                chunk[4 * i..4 * i + 4].try_into().expect("4-byte slice"),
            ))
        };
        positions.push(Vector3::new(f(0), f(1), f(2)));
        intensity.push(f(3));
    }
    Ok((positions, intensity))
}

pub fn write_scan_bin(path: &Path, positions: &[Vector3<f64>], intensity: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    for (p, i) in positions.iter().zip(intensity) {
        for v in [p.x, p.y, p.z, *i] {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
    }
    finish(w, path)
}

pub fn read_scan_ply(path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = || -> Result<Option<(usize, String)>> {
        match lines.next() {
            Some((i, Ok(line))) => Ok(Some((i + 1, line))),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Ok(None),
        }
    };

    match next()? {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(path, 1, "missing 'ply' magic")),
    }

    // (name, count, property names) per element, in file order
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let Some((ln, line)) = next()? else {
            return Err(Error::parse(path, 0, "unterminated header"));
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("unsupported PLY format '{fmt}'"),
                ));
            }
            ["format", ..] | ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(path, ln, format!("bad element count '{count}'")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let Some(el) = elements.last_mut() else {
                    return Err(Error::parse(path, ln, "property before element"));
                };
                el.2.push(String::new());
            }
            ["property", _ty, name] => {
                let Some(el) = elements.last_mut() else {
                    return Err(Error::parse(path, ln, "property before element"));
                };
                el.2.push(name.to_string());
            }
            ["end_header"] => break,
            _ => {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("unexpected header line '{line}'"),
                ))
            }
        }
    }

    let mut positions = Vec::new();
    let mut intensity = Vec::new();
    for (name, count, props) in &elements {
        if name != "vertex" {
            for _ in 0..*count {
                next()?;
            }
            continue;
        }
        let col = |want: &[&str]| -> Result<usize> {
            props
                .iter()
                .position(|p| want.contains(&p.as_str()))
                .ok_or_else(|| {
                    Error::parse(path, 0, format!("missing vertex property {}", want[0]))
                })
        };
        let cols = [
            col(&["x"])?,
            col(&["y"])?,
            col(&["z"])?,
            col(&["intensity", "reflectance", "scalar_intensity"])?,
        ];
        positions.reserve(*count);
        intensity.reserve(*count);
        for _ in 0..*count {
            let Some((ln, line)) = next()? else {
                return Err(Error::parse(path, 0, "fewer vertices than declared"));
            };
            let values: Vec<&str> = line.split_whitespace().collect();
            let get = |c: usize| -> Result<f64> {
                values
                    .get(c)
                    .ok_or_else(|| Error::parse(path, ln, "too few values"))?
                    .parse::<f64>()
                    .map_err(|e| Error::parse(path, ln, e.to_string()))
            };
            positions.push(Vector3::new(get(cols[0])?, get(cols[1])?, get(cols[2])?));
            intensity.push(get(cols[3])?);
        }
    }
    Ok((positions, intensity))
}

pub fn write_scan_ply(path: &Path, positions: &[Vector3<f64>], intensity: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    write!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\n\
         property float z\nproperty float intensity\nend_header\n",
        positions.len()
    )
    .map_err(io)?;
    for (p, i) in positions.iter().zip(intensity) {
        writeln!(w, "{} {} {} {}", p.x, p.y, p.z, i).map_err(io)?;
    }
    finish(w, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<ClassId>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::parse(path, 0, "odd byte length for u16 labels"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn write_labels(path: &Path, labels: &[ClassId]) -> Result<()> {
    let mut w = create(path)?;
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

pub fn parse_pose_line(path: &Path, line_no: usize, line: &str) -> Result<Pose> {
    let values = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path, line_no, format!("not a number: '{t}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let values: [f64; 12] = values.as_slice().try_into().map_err(|_| {
        Error::parse(
            path,
            line_no,
            format!("expected 12 values, found {}", values.len()),
        )
    })?;
    Pose::from_row_major_3x4(&values).map_err(|e| Error::parse(path, line_no, e.to_string()))
}

/// Reads a pose file; blank lines are skipped.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_pose_line(path, i + 1, l))
        .collect()
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = create(path)?;
    for pose in poses {
        let line: Vec<String> = pose
            .to_row_major_3x4()
            .iter()
            .map(|v| format!("{v:e}"))
            .collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    finish(w, path)
}

pub fn read_class_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_class_names(path: &Path, names: &[String]) -> Result<()> {
    let mut w = create(path)?;
    for n in names {
        writeln!(w, "{n}").map_err(|e| Error::io(path, e))?;
    }
    finish(w, path)
}

/// Files in `dir` with extension `ext`, in lexicographic order.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every scan in `dir`; with `label_dir`, each scan's labels are read
/// from `<label_dir>/<stem>.label`.
pub fn load_scans(
    dir: &Path,
    format: ScanFormat,
    label_dir: Option<&Path>,
) -> Result<Vec<RawScan>> {
    list_files(dir, format.extension())?
        .iter()
        .enumerate()
        .map(|(index, path)| {
            let (positions, intensity) = match format {
                ScanFormat::Bin => read_scan_bin(path)?,
                ScanFormat::Ply => read_scan_ply(path)?,
            };
            let labels = label_dir
                .map(|d| {
                    let stem = path.file_stem().unwrap_or_default();
                    let lp = d.join(stem).with_extension(LABEL_EXTENSION);
                    let labels = read_labels(&lp)?;
                    if labels.len() != positions.len() {
                        return Err(Error::parse(
                            &lp,
                            0,
                            format!("{} labels for {} points", labels.len(), positions.len()),
                        ));
                    }
                    Ok(labels)
                })
                .transpose()?;
            RawScan::new(index, positions, intensity, labels).map_err(|e| match e {
                Error::Invalid(msg) => Error::parse(path, 0, msg),
                other => other,
            })
        })
        .collect()
}

pub fn load_sequence(
    scan_dir: &Path,
    format: ScanFormat,
    poses: &Path,
    label_dir: Option<&Path>,
    class_names: Vec<String>,
) -> Result<ScanSequence> {
    let scans = load_scans(scan_dir, format, label_dir)?;
    let poses = load_poses(poses)?;
    ScanSequence::new(scans, poses, class_names)
}

pub fn write_sequence(seq: &ScanSequence, dir: &Path) -> Result<()> {
    for scan in &seq.scans {
        let name = format!("{:06}", scan.scan_index);
        write_scan_bin(
            &dir.join("scans").join(&name).with_extension("bin"),
            &scan.positions,
            &scan.intensity,
        )?;
        if let Some(labels) = &scan.labels {
            write_labels(
                &dir.join("labels")
                    .join(&name)
                    .with_extension(LABEL_EXTENSION),
                labels,
            )?;
        }
    }
    write_poses(&dir.join("poses.txt"), &seq.poses)?;
    write_class_names(&dir.join("classes.txt"), &seq.class_names)
}

const CLOUD_MAGIC: &[u8; 8] = b"VPLCLD01";

/// Binary cache of an aligned cloud. Lossless (`f64` positions).
pub fn write_cloud(path: &Path, cloud: &DensePointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + cloud.len() * 38);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cloud.intensity_range.0.to_le_bytes());
    buf.extend_from_slice(&cloud.intensity_range.1.to_le_bytes());
    buf.push(u8::from(cloud.gt.is_some()));
    let names = cloud.class_names.join("\n");
    buf.extend_from_slice(&(names.len() as u64).to_le_bytes());
    buf.extend_from_slice(names.as_bytes());
    for i in 0..cloud.len() {
        let p = &cloud.positions[i];
        for v in [p.x, p.y, p.z, cloud.intensity[i]] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&cloud.source_scan[i].to_le_bytes());
        if let Some(gt) = &cloud.gt {
            buf.extend_from_slice(&gt[i].to_le_bytes());
        }
    }
    let mut w = create(path)?;
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    finish(w, path)
}

pub fn read_cloud(path: &Path) -> Result<DensePointCloud> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::parse(path, 0, "truncated or corrupt cloud cache");
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(corrupt());
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(8)? != CLOUD_MAGIC {
        return Err(corrupt());
    }
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
    let n = u64_at(take(8)?) as usize;
    let range = (f64_at(take(8)?), f64_at(take(8)?));
    let has_gt = take(1)?[0] != 0;
    let name_len = u64_at(take(8)?) as usize;
    let names = std::str::from_utf8(take(name_len)?).map_err(|_| corrupt())?;
    let class_names = if names.is_empty() {
        Vec::new()
    } else {
        names.split('\n').map(String::from).collect()
    };
    let mut cloud = DensePointCloud {
        positions: Vec::with_capacity(n),
        intensity: Vec::with_capacity(n),
        source_scan: Vec::with_capacity(n),
        gt: has_gt.then(|| Vec::with_capacity(n)),
        intensity_range: range,
        class_names,
    };
    for _ in 0..n {
        let rec = take(32)?;
        cloud.positions.push(Vector3::new(
            f64_at(&rec[0..8]),
            f64_at(&rec[8..16]),
            f64_at(&rec[16..24]),
        ));
        cloud.intensity.push(f64_at(&rec[24..32]));
        cloud
            .source_scan
            .push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")));
        if let Some(gt) = cloud.gt.as_mut() {
            gt.push(u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")));
        }
    }
    if !cur.is_empty() {
        return Err(corrupt());
    }
    Ok(cloud)
}
