//! Depth-frame and camera-pose files.
//!
//! Depth frames use a tiny binary format, extension `.d16`: one ASCII
//! header line `depth16 {width} {height}\n` followed by little-endian
//! `u16` samples in row-major order, each the depth in millimeters.
//! Zero marks an invalid sample; valid depths clamp to `1..=65535` mm,
//! matching the integer depth maps consumer RGB-D sensors emit.
//!
//! Pose files are plain text: one line per frame holding twelve numbers,
//! the row-major 3x4 `[R | t]` camera-to-world matrix. Values print with
//! Rust's shortest round-trip formatting, so read-after-write is exact.

use nalgebra::{Matrix3, Vector3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::geometry::{DepthFrame, RigidTransform};
use crate::{Error, Result};

const DEPTH_MAGIC: &str = "depth16";

/// Millimeters per meter; depth samples quantize to whole millimeters.
const MM_PER_M: f64 = 1000.0;

/// Canonical file name of frame `index` inside a frame directory.
pub fn frame_filename(index: usize) -> String {
    format!("depth_{index:05}.d16")
}

/// Writes one depth frame. Depths quantize to whole millimeters
/// (clamped to `1..=65535`); invalid samples are stored as zero.
pub fn write_depth_frame(frame: &DepthFrame, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{DEPTH_MAGIC} {} {}", frame.width(), frame.height()).map_err(io_err)?;
    let (data, valid) = frame.raw();
    for (&depth, &ok) in data.iter().zip(valid) {
        let mm = if ok {
            (depth * MM_PER_M).round().clamp(1.0, 65535.0) as u16
        } else {
            0
        };
        w.write_all(&mm.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a `.d16` depth frame written by [`write_depth_frame`].
pub fn read_depth_frame(path: &Path) -> Result<DepthFrame> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != DEPTH_MAGIC {
        return Err(Error::parse(
            path,
            format!("expected header '{DEPTH_MAGIC} <width> <height>', got '{}'", header.trim()),
        ));
    }
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(path, format!("bad dimension '{s}' in header")))
    };
    let width = parse_dim(fields[1])?;
    let height = parse_dim(fields[2])?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != width * height * 2 {
        return Err(Error::parse(
            path,
            format!(
                "{}x{} frame needs {} payload bytes, found {}",
                width,
                height,
                width * height * 2,
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(width * height);
    let mut valid = Vec::with_capacity(width * height);
    for pair in bytes.chunks_exact(2) {
        let mm = u16::from_le_bytes([pair[0], pair[1]]);
        valid.push(mm != 0);
        data.push(f64::from(mm) / MM_PER_M);
    }
    DepthFrame::new(width, height, data, valid)
}

/// Writes every frame into `dir` (created if missing) under
/// [`frame_filename`] names.
pub fn write_frames(frames: &[DepthFrame], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in frames.iter().enumerate() {
        write_depth_frame(frame, &dir.join(frame_filename(i)))?;
    }
    Ok(())
}

/// Lists the `.d16` files of a frame directory in ascending name order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("d16") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads every `.d16` frame of a directory, ordered by file name.
pub fn read_frames(dir: &Path) -> Result<Vec<DepthFrame>> {
    list_frame_files(dir)?
        .iter()
        .map(|path| read_depth_frame(path))
        .collect()
}

/// Writes camera poses, one row-major 3x4 `[R | t]` matrix per line.
pub fn write_poses(poses: &[RigidTransform], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    for pose in poses {
        let r = &pose.rotation;
        let t = &pose.translation;
        let row: Vec<String> = [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
        .iter()
        .map(|v| v.to_string())
        .collect();
        writeln!(w, "{}", row.join(" ")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a pose file written by [`write_poses`].
pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut poses = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::parse(path, format!("line {n}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|w| {
                w.parse()
                    .map_err(|_| Error::parse(path, format!("line {n}: bad number '{w}'")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 12 {
            return Err(Error::parse(
                path,
                format!("line {n}: expected 12 values, got {}", values.len()),
            ));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2],
            values[4], values[5], values[6],
            values[8], values[9], values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        poses.push(RigidTransform::new(rotation, translation));
    }
    Ok(poses)
}
