//! Sizing the reconstructed head for the printer build volume.
//!
//! The scanner orbit is used as the size reference: the loop diameter is
//! the larger horizontal extent of the camera positions, and the scale
//! factor maps that diameter onto the smaller horizontal side of the
//! build volume. The mesh is scaled about its vertex centroid, then
//! placed resting on the build plate (z = 0) centered horizontally.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{RigidTransform, TriangleMesh};
use crate::{Error, Result};

/// Printer build volume in meters, spanning `[0, x] × [0, y] × [0, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrinterVolume {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for PrinterVolume {
    fn default() -> Self {
        // 10 × 10 × 12 inch class desktop printer.
        Self {
            x: 0.254,
            y: 0.254,
            z: 0.305,
        }
    }
}

impl PrinterVolume {
    pub fn validate(&self) -> Result<()> {
        if !(self.x > 0.0) || !(self.y > 0.0) || !(self.z > 0.0) {
            return Err(Error::InvalidInput(format!(
                "printer volume sides must be positive, got {} x {} x {}",
                self.x, self.y, self.z
            )));
        }
        Ok(())
    }

    /// Horizontal reference length: the smaller of the two plate sides.
    pub fn reference_length(&self) -> f64 {
        self.x.min(self.y)
    }
}

/// Diameter of the scan loop: the larger of the x and y extents of the
/// camera positions.
pub fn compute_loop_diameter(poses: &[RigidTransform]) -> Result<f64> {
    if poses.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "loop diameter needs at least 2 poses, got {}",
            poses.len()
        )));
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for pose in poses {
        let p = pose.position();
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let diameter = (max_x - min_x).max(max_y - min_y);
    if !(diameter > 0.0) {
        return Err(Error::Degenerate(
            "camera positions are coincident; loop diameter is zero".into(),
        ));
    }
    Ok(diameter)
}

/// Uniform scale factor mapping the scan loop onto the printer plate.
pub fn scale_factor(volume: &PrinterVolume, loop_diameter: f64) -> Result<f64> {
    volume.validate()?;
    if !(loop_diameter > 0.0) {
        return Err(Error::InvalidInput(format!(
            "loop diameter must be positive, got {loop_diameter}"
        )));
    }
    Ok(volume.reference_length() / loop_diameter)
}

/// Scales the mesh uniformly about its vertex centroid and positions it
/// resting on the build plate, horizontally centered. Fails when the
/// scaled model does not fit the build volume.
pub fn scale_mesh(
    mesh: &TriangleMesh,
    factor: f64,
    volume: &PrinterVolume,
) -> Result<TriangleMesh> {
    volume.validate()?;
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidInput(format!(
            "scale factor must be positive and finite, got {factor}"
        )));
    }
    let centroid = mesh
        .vertex_centroid()
        .ok_or_else(|| Error::InvalidInput("cannot scale an empty mesh".into()))?;
    let mut scaled = mesh.clone();
    for v in &mut scaled.vertices {
        *v = centroid + factor * (*v - centroid);
    }
    let (lo, hi) = scaled.bounding_box().expect("non-empty by construction");
    let extent = hi - lo;
    let tolerance = 1.0 + 1e-12;
    if extent.x > volume.x * tolerance
        || extent.y > volume.y * tolerance
        || extent.z > volume.z * tolerance
    {
        return Err(Error::InvalidInput(format!(
            "scaled model ({:.4} x {:.4} x {:.4} m) exceeds the build volume ({} x {} x {} m)",
            extent.x, extent.y, extent.z, volume.x, volume.y, volume.z
        )));
    }
    let shift = Vector3::new(
        volume.x / 2.0 - (lo.x + hi.x) / 2.0,
        volume.y / 2.0 - (lo.y + hi.y) / 2.0,
        -lo.z,
    );
    for v in &mut scaled.vertices {
        *v += shift;
    }
    Ok(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural::{head, HeadParams};
    use crate::scanner::circular_trajectory;
    use approx::assert_relative_eq;
    use nalgebra::Point3;

    #[test]
    fn circle_orbit_diameter_is_exact() {
        let traj = circular_trajectory(Point3::new(0.0, 0.0, 0.18), 1.0, 0.35, 120).unwrap();
        let d = compute_loop_diameter(&traj.poses).unwrap();
        assert_eq!(d, 2.0);
    }

    #[test]
    fn diameter_is_the_larger_horizontal_extent() {
        let poses: Vec<RigidTransform> = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.3, 0.0, 1.0),
            Vector3::new(0.1, 0.5, -2.0), // z must not contribute
        ]
        .into_iter()
        .map(|t| RigidTransform::new(nalgebra::Matrix3::identity(), t))
        .collect();
        assert_eq!(compute_loop_diameter(&poses).unwrap(), 0.5);
    }

    #[test]
    fn default_volume_gives_exact_factor_for_unit_circle() {
        let sf = scale_factor(&PrinterVolume::default(), 2.0).unwrap();
        assert_eq!(sf, 0.127);
    }

    #[test]
    fn scaling_preserves_shape_and_places_on_plate() {
        let mesh = head(Point3::new(0.0, 0.0, 0.18), &HeadParams::default(), 32, 21).unwrap();
        let volume = PrinterVolume::default();
        let sf = 0.127;
        let scaled = scale_mesh(&mesh, sf, &volume).unwrap();
        assert_eq!(scaled.faces, mesh.faces);

        // Edge lengths scale uniformly.
        for f in mesh.faces.iter().take(50) {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                let before = (mesh.vertices[a] - mesh.vertices[b]).norm();
                let after = (scaled.vertices[a] - scaled.vertices[b]).norm();
                assert_relative_eq!(after, before * sf, epsilon = 1e-12);
            }
        }

        let (lo, hi) = scaled.bounding_box().unwrap();
        // Resting on the plate, centered horizontally.
        assert_eq!(lo.z, 0.0);
        assert_relative_eq!((lo.x + hi.x) / 2.0, volume.x / 2.0, epsilon = 1e-12);
        assert_relative_eq!((lo.y + hi.y) / 2.0, volume.y / 2.0, epsilon = 1e-12);
        assert!(hi.z <= volume.z && hi.x <= volume.x && hi.y <= volume.y);
    }

    #[test]
    fn oversized_model_is_rejected() {
        let mesh = head(Point3::origin(), &HeadParams::default(), 16, 9).unwrap();
        let volume = PrinterVolume::default();
        // Head is ~0.2 m tall; a factor of 2 exceeds the 0.254 m plate.
        assert!(scale_mesh(&mesh, 2.0, &volume).is_err());
        assert!(scale_mesh(&mesh, 0.0, &volume).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(scale_factor(&PrinterVolume::default(), 0.0).is_err());
        assert!(scale_factor(
            &PrinterVolume {
                x: -1.0,
                ..Default::default()
            },
            2.0
        )
        .is_err());
        assert!(compute_loop_diameter(&[]).is_err());
        assert!(compute_loop_diameter(&[RigidTransform::identity()]).is_err());
        let same = vec![RigidTransform::identity(), RigidTransform::identity()];
        assert!(compute_loop_diameter(&same).is_err());
    }
}
