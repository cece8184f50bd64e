//! Foundational geometric types: rigid transforms, the pinhole camera
//! model, depth frames, point clouds, and triangle meshes, together with
//! back-projection and organized normal estimation.
//!
//! Conventions: world units are meters everywhere; the camera looks along
//! +z with x to the right and y down in image space, and a depth value is
//! the z-coordinate of the hit point in the camera frame (not the range
//! along the ray). Invalid depth pixels carry an explicit mask — zero is
//! never a sentinel.

use nalgebra::{Matrix3, Matrix4, Point3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Rotation + translation pose. The rotation matrix is kept orthonormal
/// (det +1); constructors that take raw matrices are expected to uphold
/// this, and [`RigidTransform::orthonormalized`] can polish drift away.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation about `axis` by `angle` (radians) plus a translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Self {
            rotation: rot.into_inner(),
            translation,
        }
    }

    /// Applies `self` after `other`: `(self ∘ other)(p) = self(other(p))`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_t = self.rotation.transpose();
        RigidTransform {
            rotation: rot_t,
            translation: -(rot_t * self.translation),
        }
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Camera-to-world poses: position of the camera origin in the world.
    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Re-projects the rotation onto SO(3); useful after long chains of
    /// floating-point composition.
    pub fn orthonormalized(&self) -> RigidTransform {
        let rot = Rotation3::from_matrix(&self.rotation);
        RigidTransform {
            rotation: rot.into_inner(),
            translation: self.translation,
        }
    }

    pub fn rotation_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Max absolute deviation of RᵀR from I plus |det(R) − 1|; zero for a
    /// perfect rotation.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let dev = (gram - Matrix3::identity()).abs().max();
        dev + (self.rotation.determinant() - 1.0).abs()
    }

    /// Rotation angle (radians) and translation norm separating two
    /// transforms; handy for pose-error reporting.
    pub fn error_to(&self, other: &RigidTransform) -> (f64, f64) {
        let delta = self.inverse().compose(other);
        let angle = delta.rotation_quaternion().angle();
        (angle, (other.translation - self.translation).norm())
    }
}

/// Pinhole camera intrinsics; no lens distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (got fx={fx}, fy={fy})"
            )));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(Error::InvalidInput(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
        })
    }

    /// Camera-frame point for pixel (u, v) at depth z (z along the optical
    /// axis).
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Point3<f64> {
        Point3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Continuous pixel coordinates of a camera-frame point, or `None` when
    /// the point is at or behind the camera plane.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Unnormalized camera-frame ray direction through pixel (u, v); its z
    /// component is 1 so the ray parameter equals depth.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Row-major grid of depth measurements with a per-pixel validity mask.
/// Valid depths are finite and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    width: usize,
    height: usize,
    data: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, data: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if data.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth frame {}x{} needs {} samples, got {} depths / {} flags",
                width,
                height,
                width * height,
                data.len(),
                valid.len()
            )));
        }
        for (i, (&d, &ok)) in data.iter().zip(&valid).enumerate() {
            if ok && !(d.is_finite() && d > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "pixel {} marked valid but depth {} is not finite and positive",
                    i, d
                )));
            }
        }
        Ok(Self {
            width,
            height,
            data,
            valid,
        })
    }

    pub fn all_invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![depth; width * height],
            vec![true; width * height],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.valid[v * self.width + u]
    }

    /// Depth at (u, v) when valid.
    pub fn depth(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then(|| self.data[i])
    }

    pub fn set(&mut self, u: usize, v: usize, depth: Option<f64>) -> Result<()> {
        let i = v * self.width + u;
        match depth {
            Some(d) => {
                if !(d.is_finite() && d > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "depth {} at ({}, {}) is not finite and positive",
                        d, u, v
                    )));
                }
                self.data[i] = d;
                self.valid[i] = true;
            }
            None => {
                self.data[i] = 0.0;
                self.valid[i] = false;
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Raw row-major storage; pair each entry with the validity flag.
    pub fn raw(&self) -> (&[f64], &[bool]) {
        (&self.data, &self.valid)
    }
}

/// Unordered set of 3D points with optional per-point unit normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            normals: None,
        }
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points vs {} normals",
                points.len(),
                normals.len()
            )));
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self
            .points
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.points.len() as f64))
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| t.apply_vector(n)).collect()),
        }
    }

    /// Sub-cloud at the given indices (normals follow when present).
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
        }
    }
}

/// Indexed triangle mesh with optional per-vertex colors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            colors: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(colors) = &self.colors {
            if colors.len() != self.vertices.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} colors vs {} vertices",
                    colors.len(),
                    self.vertices.len()
                )));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            for &vi in f {
                if vi >= self.vertices.len() {
                    return Err(Error::InvalidInput(format!(
                        "face {} references vertex {} but only {} exist",
                        fi,
                        vi,
                        self.vertices.len()
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidInput(format!(
                    "face {} references a vertex twice: {:?}",
                    fi, f
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Axis-aligned bounding box, `None` for a vertex-less mesh.
    pub fn bounding_box(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let first = self.vertices.first()?;
        let mut lo = *first;
        let mut hi = *first;
        for p in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Some((lo, hi))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        match self.bounding_box() {
            Some((lo, hi)) => (hi - lo).norm(),
            None => 0.0,
        }
    }

    /// Sub-mesh on a vertex subset: keeps exactly the listed vertices in
    /// the given order (colors included when present) and the faces whose
    /// three corners are all kept. Indices must be unique and in range.
    pub fn submesh(&self, vertex_indices: &[usize]) -> Result<TriangleMesh> {
        let mut new_index = vec![usize::MAX; self.vertices.len()];
        for (new, &old) in vertex_indices.iter().enumerate() {
            if old >= self.vertices.len() {
                return Err(Error::InvalidInput(format!(
                    "vertex index {} out of range ({} vertices)",
                    old,
                    self.vertices.len()
                )));
            }
            if new_index[old] != usize::MAX {
                return Err(Error::InvalidInput(format!(
                    "vertex index {} selected twice",
                    old
                )));
            }
            new_index[old] = new;
        }
        let vertices = vertex_indices.iter().map(|&i| self.vertices[i]).collect();
        let faces = self
            .faces
            .iter()
            .filter_map(|f| {
                let mapped = [new_index[f[0]], new_index[f[1]], new_index[f[2]]];
                mapped.iter().all(|&i| i != usize::MAX).then_some(mapped)
            })
            .collect();
        let mut sub = TriangleMesh::new(vertices, faces)?;
        if let Some(colors) = &self.colors {
            sub.colors = Some(vertex_indices.iter().map(|&i| colors[i]).collect());
        }
        Ok(sub)
    }

    pub fn vertex_centroid(&self) -> Option<Point3<f64>> {
        if self.vertices.is_empty() {
            return None;
        }
        let sum = self
            .vertices
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / self.vertices.len() as f64))
    }

    /// Unnormalized face normal (twice the signed triangle area vector).
    pub fn face_normal_raw(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(face);
        (b - a).cross(&(c - a))
    }

    /// Unit face normal; zero vector for degenerate triangles.
    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let n = self.face_normal_raw(face);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    /// Area-weighted per-vertex normals (unit length where defined).
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            let n = self.face_normal_raw(fi);
            for &vi in f {
                acc[vi] += n;
            }
        }
        for n in &mut acc {
            let len = n.norm();
            if len > 1e-300 {
                *n /= len;
            }
        }
        acc
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| 0.5 * self.face_normal_raw(f).norm())
            .sum()
    }

    /// Signed volume via the divergence theorem; positive when face
    /// normals point outward.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (
                    self.vertices[a].coords,
                    self.vertices[b].coords,
                    self.vertices[c].coords,
                );
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn transformed(&self, t: &RigidTransform) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|p| t.apply_point(p)).collect(),
            faces: self.faces.clone(),
            colors: self.colors.clone(),
        }
    }

    /// Concatenates meshes, offsetting face indices; colors are dropped.
    pub fn merged(meshes: &[&TriangleMesh]) -> TriangleMesh {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for m in meshes {
            let base = vertices.len();
            vertices.extend_from_slice(&m.vertices);
            faces.extend(m.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        }
        TriangleMesh {
            vertices,
            faces,
            colors: None,
        }
    }
}

/// One world-frame point per valid pixel: pixel (u, v) with depth z maps to
/// `pose · ((u−cx)z/fx, (v−cy)z/fy, z)`.
pub fn backproject(
    frame: &DepthFrame,
    k: &CameraIntrinsics,
    pose: &RigidTransform,
) -> Result<PointCloud> {
    check_frame_matches(frame, k)?;
    let mut points = Vec::with_capacity(frame.valid_count());
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            if let Some(z) = frame.depth(u, v) {
                let p = k.unproject(u as f64, v as f64, z);
                points.push(pose.apply_point(&p));
            }
        }
    }
    Ok(PointCloud::from_points(points))
}

/// Camera-frame points with unit normals from central differences over the
/// organized grid, window radius 1. Normals are oriented toward the camera
/// (n · p < 0); pixels with missing/degenerate neighborhoods are dropped.
pub fn estimate_normals(frame: &DepthFrame, k: &CameraIntrinsics) -> Result<PointCloud> {
    estimate_normals_windowed(frame, k, 1)
}

/// [`estimate_normals`] with a configurable neighbor offset (in pixels).
pub fn estimate_normals_windowed(
    frame: &DepthFrame,
    k: &CameraIntrinsics,
    window: usize,
) -> Result<PointCloud> {
    check_frame_matches(frame, k)?;
    if window == 0 {
        return Err(Error::InvalidInput("normal-estimation window must be ≥ 1".into()));
    }
    let w = window;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for v in 0..frame.height() {
        for u in 0..frame.width() {
            let Some(z) = frame.depth(u, v) else { continue };
            if u < w || v < w || u + w >= frame.width() || v + w >= frame.height() {
                continue;
            }
            let (Some(zl), Some(zr), Some(zu), Some(zd)) = (
                frame.depth(u - w, v),
                frame.depth(u + w, v),
                frame.depth(u, v - w),
                frame.depth(u, v + w),
            ) else {
                continue;
            };
            let p = k.unproject(u as f64, v as f64, z);
            let du = k.unproject((u + w) as f64, v as f64, zr)
                - k.unproject((u - w) as f64, v as f64, zl);
            let dv = k.unproject(u as f64, (v + w) as f64, zd)
                - k.unproject(u as f64, (v - w) as f64, zu);
            let mut n = du.cross(&dv);
            let len = n.norm();
            if len < 1e-300 {
                continue;
            }
            n /= len;
            let facing = n.dot(&p.coords);
            if facing > 0.0 {
                n = -n;
            } else if facing == 0.0 {
                continue;
            }
            points.push(p);
            normals.push(n);
        }
    }
    PointCloud::with_normals(points, normals)
}

pub(crate) fn check_frame_matches(frame: &DepthFrame, k: &CameraIntrinsics) -> Result<()> {
    if frame.width() != k.width || frame.height() != k.height {
        return Err(Error::DimensionMismatch(format!(
            "frame {}x{} vs intrinsics {}x{}",
            frame.width(),
            frame.height(),
            k.width,
            k.height
        )));
    }
    Ok(())
}
