//! Triangle-mesh readers and writers.
//!
//! Binary STL is the print-ready output format; the reader welds the
//! per-triangle vertex soup back into an indexed mesh by exact f32 bit
//! equality, keeping first-seen order. ASCII PLY stores `f64`
//! coordinates printed with Rust's shortest round-trip formatting, so a
//! write/read cycle is lossless; optional per-vertex `uchar` RGB colors
//! are supported. OBJ covers plain `v`/`f` geometry with fan
//! triangulation for larger polygons.

use nalgebra::Point3;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::TriangleMesh;
use crate::{Error, Result};

/// Dispatches on the (case-insensitive) file extension: `.stl`, `.ply`,
/// or `.obj`.
pub fn read_mesh(path: &Path) -> Result<TriangleMesh> {
    match extension_of(path)?.as_str() {
        "stl" => read_stl(path),
        "ply" => read_ply(path),
        "obj" => read_obj(path),
        other => Err(Error::InvalidInput(format!(
            "unsupported mesh extension .{other} for {}",
            path.display()
        ))),
    }
}

/// Dispatches on the (case-insensitive) file extension: `.stl`, `.ply`,
/// or `.obj`.
pub fn write_mesh(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    match extension_of(path)?.as_str() {
        "stl" => write_stl(mesh, path),
        "ply" => write_ply(mesh, path),
        "obj" => write_obj(mesh, path),
        other => Err(Error::InvalidInput(format!(
            "unsupported mesh extension .{other} for {}",
            path.display()
        ))),
    }
}

fn extension_of(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| {
            Error::InvalidInput(format!("cannot infer mesh format of {}", path.display()))
        })
}

const STL_HEADER_TEXT: &[u8] = b"binary mesh export; not an ascii solid";

/// Writes binary STL: an 80-byte header, a u32 triangle count, then 50
/// bytes per triangle (unit normal, three vertices, attribute word), all
/// little-endian f32.
pub fn write_stl(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    let mut header = [0u8; 80];
    header[..STL_HEADER_TEXT.len()].copy_from_slice(STL_HEADER_TEXT);
    w.write_all(&header).map_err(io_err)?;
    let count = u32::try_from(mesh.faces.len()).map_err(|_| {
        Error::InvalidInput(format!("{} triangles exceed the STL limit", mesh.faces.len()))
    })?;
    w.write_all(&count.to_le_bytes()).map_err(io_err)?;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let normal = mesh.face_normal(f);
        for v in [normal.x, normal.y, normal.z] {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
        for p in [a, b, c] {
            for v in [p.x, p.y, p.z] {
                w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
            }
        }
        w.write_all(&0u16.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads binary STL, welding identical vertices (exact f32 bit equality)
/// in first-seen order. Triangles that collapse under welding are
/// dropped.
pub fn read_stl(path: &Path) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 80];
    r.read_exact(&mut header)
        .map_err(|_| Error::parse(path, "file shorter than an STL header"))?;
    if header.starts_with(b"solid") {
        return Err(Error::parse(
            path,
            "ASCII STL ('solid' header) is not supported; use binary STL",
        ));
    }
    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)
        .map_err(|_| Error::parse(path, "missing triangle count"))?;
    let count = u32::from_le_bytes(count_bytes) as usize;

    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut index_of: HashMap<[u32; 3], usize> = HashMap::new();
    let mut faces = Vec::with_capacity(count);
    let mut record = [0u8; 50];
    for t in 0..count {
        r.read_exact(&mut record)
            .map_err(|_| Error::parse(path, format!("triangle {t}: record truncated")))?;
        let mut idx = [0usize; 3];
        for (v, slot) in idx.iter_mut().enumerate() {
            // Skip the 12-byte normal; vertices start at byte 12.
            let base = 12 + v * 12;
            let bits = [
                u32::from_le_bytes(record[base..base + 4].try_into().unwrap()),
                u32::from_le_bytes(record[base + 4..base + 8].try_into().unwrap()),
                u32::from_le_bytes(record[base + 8..base + 12].try_into().unwrap()),
            ];
            let next = vertices.len();
            let entry = *index_of.entry(bits).or_insert(next);
            if entry == next {
                vertices.push(Point3::new(
                    f32::from_bits(bits[0]) as f64,
                    f32::from_bits(bits[1]) as f64,
                    f32::from_bits(bits[2]) as f64,
                ));
            }
            *slot = entry;
        }
        if idx[0] != idx[1] && idx[1] != idx[2] && idx[0] != idx[2] {
            faces.push(idx);
        }
    }
    let mut trailing = Vec::new();
    r.read_to_end(&mut trailing).map_err(|e| Error::io(path, e))?;
    if !trailing.is_empty() {
        return Err(Error::parse(
            path,
            format!("{} unexpected bytes after the last triangle", trailing.len()),
        ));
    }
    TriangleMesh::new(vertices, faces)
}

/// Writes ASCII PLY with double-precision coordinates (lossless thanks
/// to shortest round-trip formatting) and optional uchar RGB colors.
pub fn write_ply(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "ply").map_err(io_err)?;
    writeln!(w, "format ascii 1.0").map_err(io_err)?;
    writeln!(w, "element vertex {}", mesh.vertices.len()).map_err(io_err)?;
    writeln!(w, "property double x").map_err(io_err)?;
    writeln!(w, "property double y").map_err(io_err)?;
    writeln!(w, "property double z").map_err(io_err)?;
    if mesh.colors.is_some() {
        writeln!(w, "property uchar red").map_err(io_err)?;
        writeln!(w, "property uchar green").map_err(io_err)?;
        writeln!(w, "property uchar blue").map_err(io_err)?;
    }
    writeln!(w, "element face {}", mesh.faces.len()).map_err(io_err)?;
    writeln!(w, "property list uchar int vertex_indices").map_err(io_err)?;
    writeln!(w, "end_header").map_err(io_err)?;
    match &mesh.colors {
        Some(colors) => {
            for (v, c) in mesh.vertices.iter().zip(colors) {
                writeln!(w, "{} {} {} {} {} {}", v.x, v.y, v.z, c[0], c[1], c[2])
                    .map_err(io_err)?;
            }
        }
        None => {
            for v in &mesh.vertices {
                writeln!(w, "{} {} {}", v.x, v.y, v.z).map_err(io_err)?;
            }
        }
    }
    for f in &mesh.faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2]).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads ASCII PLY written by [`write_ply`] (and close variants: float
/// or double coordinates, optional uchar RGB, int or uint face lists).
pub fn read_ply(path: &Path) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let mut next_line = |expect: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(line))) => Ok((n + 1, line)),
            Some((n, Err(e))) => Err(Error::parse(path, format!("line {}: {e}", n + 1))),
            None => Err(Error::parse(path, format!("unexpected end of file; expected {expect}"))),
        }
    };

    let (_, magic) = next_line("'ply'")?;
    if magic.trim() != "ply" {
        return Err(Error::parse(path, "line 1: not a PLY file"));
    }
    let (n, format) = next_line("format line")?;
    if format.trim() != "format ascii 1.0" {
        return Err(Error::parse(
            path,
            format!("line {n}: only 'format ascii 1.0' is supported, got '{}'", format.trim()),
        ));
    }

    let mut vertex_count: Option<usize> = None;
    let mut face_count: Option<usize> = None;
    let mut vertex_props: Vec<String> = Vec::new();
    let mut current_element: Option<String> = None;
    loop {
        let (n, line) = next_line("'end_header'")?;
        let line = line.trim().to_string();
        if line == "end_header" {
            break;
        }
        let mut words = line.split_whitespace();
        match words.next() {
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let kind = words
                    .next()
                    .ok_or_else(|| Error::parse(path, format!("line {n}: element without a name")))?;
                let count: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| Error::parse(path, format!("line {n}: bad element count")))?;
                match kind {
                    "vertex" => vertex_count = Some(count),
                    "face" => face_count = Some(count),
                    other => {
                        return Err(Error::parse(
                            path,
                            format!("line {n}: unsupported element '{other}'"),
                        ))
                    }
                }
                current_element = Some(kind.to_string());
            }
            Some("property") => {
                if current_element.as_deref() == Some("vertex") {
                    let prop: Vec<&str> = words.collect();
                    let name = prop.last().copied().unwrap_or("");
                    vertex_props.push(name.to_string());
                }
            }
            Some(other) => {
                return Err(Error::parse(
                    path,
                    format!("line {n}: unexpected header keyword '{other}'"),
                ))
            }
        }
    }
    let vertex_count =
        vertex_count.ok_or_else(|| Error::parse(path, "header missing 'element vertex'"))?;
    let face_count =
        face_count.ok_or_else(|| Error::parse(path, "header missing 'element face'"))?;
    let expected_no_color = ["x", "y", "z"];
    let expected_color = ["x", "y", "z", "red", "green", "blue"];
    let has_colors = if vertex_props == expected_no_color {
        false
    } else if vertex_props == expected_color {
        true
    } else {
        return Err(Error::parse(
            path,
            format!("unsupported vertex layout {vertex_props:?}"),
        ));
    };

    let mut vertices = Vec::with_capacity(vertex_count);
    let mut colors = has_colors.then(|| Vec::with_capacity(vertex_count));
    for _ in 0..vertex_count {
        let (n, line) = next_line("a vertex row")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let need = if has_colors { 6 } else { 3 };
        if fields.len() != need {
            return Err(Error::parse(
                path,
                format!("line {n}: expected {need} vertex fields, got {}", fields.len()),
            ));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(path, format!("line {n}: bad number '{s}'")))
        };
        vertices.push(Point3::new(
            parse_f(fields[0])?,
            parse_f(fields[1])?,
            parse_f(fields[2])?,
        ));
        if let Some(colors) = colors.as_mut() {
            let parse_c = |s: &str| -> Result<u8> {
                s.parse()
                    .map_err(|_| Error::parse(path, format!("line {n}: bad color '{s}'")))
            };
            colors.push([parse_c(fields[3])?, parse_c(fields[4])?, parse_c(fields[5])?]);
        }
    }
    let mut faces = Vec::with_capacity(face_count);
    for _ in 0..face_count {
        let (n, line) = next_line("a face row")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"3") || fields.len() != 4 {
            return Err(Error::parse(
                path,
                format!("line {n}: only triangle faces are supported"),
            ));
        }
        let parse_i = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::parse(path, format!("line {n}: bad index '{s}'")))
        };
        faces.push([parse_i(fields[1])?, parse_i(fields[2])?, parse_i(fields[3])?]);
    }
    let mut mesh = TriangleMesh::new(vertices, faces)?;
    mesh.colors = colors;
    mesh.validate()?;
    Ok(mesh)
}

/// Writes plain OBJ (`v` and `f` records only).
pub fn write_obj(mesh: &TriangleMesh, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(io_err)?;
    }
    for f in &mesh.faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads OBJ geometry: `v` positions and `f` faces (any `v/vt/vn` slash
/// form; polygons are fan-triangulated). Other record types are ignored.
pub fn read_obj(path: &Path) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::parse(path, format!("line {n}: {e}")))?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("v") => {
                let mut coord = |axis: &str| -> Result<f64> {
                    words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| {
                            Error::parse(path, format!("line {n}: bad or missing {axis} coordinate"))
                        })
                };
                let (x, y, z) = (coord("x")?, coord("y")?, coord("z")?);
                vertices.push(Point3::new(x, y, z));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for word in words {
                    let first = word.split('/').next().unwrap_or("");
                    let idx: i64 = first.parse().map_err(|_| {
                        Error::parse(path, format!("line {n}: bad face index '{word}'"))
                    })?;
                    if idx < 1 || idx as usize > vertices.len() {
                        return Err(Error::parse(
                            path,
                            format!("line {n}: face index {idx} out of range"),
                        ));
                    }
                    poly.push(idx as usize - 1);
                }
                if poly.len() < 3 {
                    return Err(Error::parse(
                        path,
                        format!("line {n}: face needs at least 3 vertices"),
                    ));
                }
                for t in 1..poly.len() - 1 {
                    faces.push([poly[0], poly[t], poly[t + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}
