//! Procedural test geometry: UV spheres, capped cylinders, flat plates,
//! and a parametric head model used as scanning ground truth.
//!
//! All closed shapes are watertight indexed meshes with outward-facing
//! triangles. The head is a star-shaped radial surface (every ray from the
//! center crosses it exactly once): an ellipsoid blended into a downward
//! cone below a start latitude (chin/neck) plus a Gaussian radial bump
//! (nose) that breaks rotational symmetry so pose estimation is fully
//! constrained.

use nalgebra::{Point3, Vector3};

use crate::geometry::TriangleMesh;
use crate::{Error, Result};

/// Shape parameters for the procedural head. Dimensions are semi-axes in
/// meters; the total height is `rz * (1 + tip_drop)`.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    /// Side-to-side semi-axis.
    pub rx: f64,
    /// Back-to-front semi-axis (the nose points along +y).
    pub ry: f64,
    /// Vertical semi-axis of the cranium.
    pub rz: f64,
    /// Radial bump amplitude at the nose apex, as a fraction of the local
    /// radius.
    pub nose_amplitude: f64,
    /// Angular falloff of the nose bump in radians.
    pub nose_sigma: f64,
    /// Latitude (degrees, negative) where the ellipsoid hands over to the
    /// chin cone.
    pub chin_start_deg: f64,
    /// Depth of the chin tip below the center, as a multiple of `rz`.
    pub tip_drop: f64,
}

impl Default for HeadParams {
    fn default() -> Self {
        Self {
            rx: 0.075,
            ry: 0.085,
            rz: 0.10,
            nose_amplitude: 0.25,
            nose_sigma: 0.30,
            chin_start_deg: -50.0,
            tip_drop: 1.1,
        }
    }
}

impl HeadParams {
    pub fn total_height(&self) -> f64 {
        self.rz * (1.0 + self.tip_drop)
    }
}

/// Latitude/longitude sphere with exact pole vertices on the ±z axis.
pub fn uv_sphere(
    center: Point3<f64>,
    radius: f64,
    segments: usize,
    rings: usize,
) -> Result<TriangleMesh> {
    if radius <= 0.0 {
        return Err(Error::InvalidInput(format!("sphere radius must be positive, got {radius}")));
    }
    radial_surface(center, segments, rings, |u, v| {
        let (cv, sv) = lat_cos_sin(v);
        let dir = Vector3::new(cv * u.cos(), cv * u.sin(), sv);
        dir * radius
    })
}

/// Procedural head centered at `center`; see [`HeadParams`].
pub fn head(
    center: Point3<f64>,
    params: &HeadParams,
    segments: usize,
    rings: usize,
) -> Result<TriangleMesh> {
    if params.rx <= 0.0 || params.ry <= 0.0 || params.rz <= 0.0 {
        return Err(Error::InvalidInput("head semi-axes must be positive".into()));
    }
    if !(params.tip_drop > 0.0) || !(-89.0..0.0).contains(&params.chin_start_deg) {
        return Err(Error::InvalidInput(
            "head needs tip_drop > 0 and chin_start_deg in (-89, 0)".into(),
        ));
    }
    let v0 = params.chin_start_deg.to_radians();
    let p = *params;
    radial_surface(center, segments, rings, move |u, v| {
        // Unit lathe profile (radial, vertical): an ellipse arc above the
        // chin latitude, a straight cone below it.
        let (pr, pz) = if v >= v0 {
            lat_cos_sin(v)
        } else {
            let s = (v0 - v) / (v0 + std::f64::consts::FRAC_PI_2);
            let a = (v0.cos(), v0.sin());
            let t = (0.0, -p.tip_drop);
            (a.0 + s * (t.0 - a.0), a.1 + s * (t.1 - a.1))
        };
        let q = Vector3::new(p.rx * pr * u.cos(), p.ry * pr * u.sin(), p.rz * pz);
        // Gaussian radial bump around the +y axis.
        let len = q.norm();
        let psi = (q.y / len).clamp(-1.0, 1.0).acos();
        let bump = 1.0 + p.nose_amplitude * (-psi * psi / (2.0 * p.nose_sigma * p.nose_sigma)).exp();
        q * bump
    })
}

/// Capped cylinder standing on `base_center`, extruded along +z.
pub fn cylinder(
    base_center: Point3<f64>,
    radius: f64,
    height: f64,
    segments: usize,
) -> Result<TriangleMesh> {
    if radius <= 0.0 || height <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "cylinder needs positive radius and height, got {radius} x {height}"
        )));
    }
    if segments < 3 {
        return Err(Error::InvalidInput("cylinder needs at least 3 segments".into()));
    }
    let mut vertices = Vec::with_capacity(2 * segments + 2);
    for ring in 0..2 {
        let z = base_center.z + height * ring as f64;
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push(Point3::new(
                base_center.x + radius * a.cos(),
                base_center.y + radius * a.sin(),
                z,
            ));
        }
    }
    let bottom_center = vertices.len();
    vertices.push(base_center);
    let top_center = vertices.len();
    vertices.push(Point3::new(base_center.x, base_center.y, base_center.z + height));

    let mut faces = Vec::with_capacity(4 * segments);
    for s in 0..segments {
        let sn = (s + 1) % segments;
        let (ll, lr, ul, ur) = (s, sn, segments + s, segments + sn);
        faces.push([ll, lr, ur]);
        faces.push([ll, ur, ul]);
        faces.push([bottom_center, lr, ll]);
        faces.push([top_center, ul, ur]);
    }
    TriangleMesh::new(vertices, faces)
}

/// Rectangular two-triangle plate in the z = `center.z` plane with its
/// normal along +z.
pub fn plate(center: Point3<f64>, half_x: f64, half_y: f64) -> Result<TriangleMesh> {
    if half_x <= 0.0 || half_y <= 0.0 {
        return Err(Error::InvalidInput("plate half-extents must be positive".into()));
    }
    let vertices = vec![
        Point3::new(center.x - half_x, center.y - half_y, center.z),
        Point3::new(center.x + half_x, center.y - half_y, center.z),
        Point3::new(center.x + half_x, center.y + half_y, center.z),
        Point3::new(center.x - half_x, center.y + half_y, center.z),
    ];
    TriangleMesh::new(vertices, vec![[0, 1, 2], [0, 2, 3]])
}

/// Closed surface of revolution-style triangulation of a radial offset
/// function `offset(longitude, latitude)` around `center`. Latitude runs
/// from -π/2 (bottom pole) to π/2 (top pole); the poles are single shared
/// vertices.
/// (cos v, sin v) with the poles snapped so that `cos(±π/2)` is exactly
/// zero, keeping pole vertices exactly on the lathe axis.
fn lat_cos_sin(v: f64) -> (f64, f64) {
    if v == std::f64::consts::FRAC_PI_2 {
        (0.0, 1.0)
    } else if v == -std::f64::consts::FRAC_PI_2 {
        (0.0, -1.0)
    } else {
        (v.cos(), v.sin())
    }
}

fn radial_surface<F>(
    center: Point3<f64>,
    segments: usize,
    rings: usize,
    offset: F,
) -> Result<TriangleMesh>
where
    F: Fn(f64, f64) -> Vector3<f64>,
{
    if segments < 3 || rings < 2 {
        return Err(Error::InvalidInput(format!(
            "radial surface needs ≥ 3 segments and ≥ 2 rings, got {segments} x {rings}"
        )));
    }
    let mut vertices = Vec::with_capacity(rings * segments + 2);
    vertices.push(center + offset(0.0, -std::f64::consts::FRAC_PI_2));
    for r in 0..rings {
        let v = -std::f64::consts::FRAC_PI_2
            + std::f64::consts::PI * (r + 1) as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let u = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push(center + offset(u, v));
        }
    }
    let top_pole = vertices.len();
    vertices.push(center + offset(0.0, std::f64::consts::FRAC_PI_2));

    let ring_start = |r: usize| 1 + r * segments;
    let mut faces = Vec::with_capacity(2 * segments * rings);
    for s in 0..segments {
        let sn = (s + 1) % segments;
        faces.push([0, ring_start(0) + sn, ring_start(0) + s]);
        faces.push([top_pole, ring_start(rings - 1) + s, ring_start(rings - 1) + sn]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            let sn = (s + 1) % segments;
            let (ll, lr) = (ring_start(r) + s, ring_start(r) + sn);
            let (ul, ur) = (ring_start(r + 1) + s, ring_start(r + 1) + sn);
            faces.push([ll, lr, ur]);
            faces.push([ll, ur, ul]);
        }
    }
    TriangleMesh::new(vertices, faces)
}
