//! Mesh-to-mesh distance evaluation and heat-map coloring.
//!
//! Directed distances are exact point-to-surface measurements (closest
//! point on any triangle, accelerated by a BVH), aggregated into mean,
//! maximum, and RMS, reported both in centimeters and as a percentage of
//! the bounding-box diagonal of the *first* mesh passed to
//! [`hausdorff_report`]. The symmetric row takes, per metric, the worse
//! of the two directions.

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bvh::TriangleBvh;
use crate::geometry::TriangleMesh;
use crate::{Error, Result};

/// How sample points are drawn from the source mesh.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Sampling {
    /// Every vertex of the source mesh (the default; deterministic and
    /// parameter-free).
    Vertices,
    /// Fixed number of points drawn uniformly by surface area.
    AreaUniform { samples: usize, seed: u64 },
}

impl Default for Sampling {
    fn default() -> Self {
        Self::Vertices
    }
}

/// Aggregated one-direction distance statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectedMetrics {
    pub mean_cm: f64,
    pub max_cm: f64,
    pub rms_cm: f64,
    pub mean_bbox_pct: f64,
    pub max_bbox_pct: f64,
    pub rms_bbox_pct: f64,
    pub sample_count: usize,
}

/// Two-directional comparison of a reconstructed mesh against a
/// reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// First mesh sampled against the second.
    pub forward: DirectedMetrics,
    /// Second mesh sampled against the first.
    pub backward: DirectedMetrics,
    /// Per-metric worst case of the two directions.
    pub symmetric: DirectedMetrics,
    /// Diagonal of the first mesh's bounding box (meters); the
    /// denominator of every percentage above.
    pub bbox_diagonal_m: f64,
}

/// Samples of the source surface according to the sampling strategy.
pub fn sample_surface(mesh: &TriangleMesh, sampling: &Sampling) -> Result<Vec<Point3<f64>>> {
    if mesh.is_empty() {
        return Err(Error::InvalidInput("cannot sample an empty mesh".into()));
    }
    match *sampling {
        Sampling::Vertices => Ok(mesh.vertices.clone()),
        Sampling::AreaUniform { samples, seed } => {
            if samples == 0 {
                return Err(Error::InvalidInput("sample count must be positive".into()));
            }
            let mut cumulative = Vec::with_capacity(mesh.faces.len());
            let mut total = 0.0;
            for f in 0..mesh.faces.len() {
                let [a, b, c] = mesh.triangle(f);
                total += 0.5 * (b - a).cross(&(c - a)).norm();
                cumulative.push(total);
            }
            if !(total > 0.0) {
                return Err(Error::Degenerate(
                    "mesh has zero surface area; cannot sample by area".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut points = Vec::with_capacity(samples);
            for _ in 0..samples {
                let pick = rng.random_range(0.0..total);
                let f = cumulative.partition_point(|&a| a <= pick).min(mesh.faces.len() - 1);
                let [a, b, c] = mesh.triangle(f);
                // Square-root trick for uniform barycentric sampling.
                let su = rng.random_range(0.0..1.0f64).sqrt();
                let v = rng.random_range(0.0..1.0f64);
                points.push(Point3::from(
                    a.coords * (1.0 - su) + b.coords * (su * (1.0 - v)) + c.coords * (su * v),
                ));
            }
            Ok(points)
        }
    }
}

/// Distance from each sampled point of `source` to the surface of
/// `target`, in sampling order.
pub fn directed_distances(
    source: &TriangleMesh,
    target: &TriangleMesh,
    sampling: &Sampling,
) -> Result<Vec<f64>> {
    if target.is_empty() {
        return Err(Error::InvalidInput("cannot measure distance to an empty mesh".into()));
    }
    let samples = sample_surface(source, sampling)?;
    let bvh = TriangleBvh::build(target)?;
    Ok(samples.iter().map(|p| bvh.closest_point(p).distance).collect())
}

/// Aggregates raw distances (meters) into centimeter and
/// percent-of-diagonal statistics.
pub fn aggregate_metrics(distances: &[f64], bbox_diagonal_m: f64) -> Result<DirectedMetrics> {
    if distances.is_empty() {
        return Err(Error::InvalidInput("no distances to aggregate".into()));
    }
    if !(bbox_diagonal_m > 0.0) {
        return Err(Error::Degenerate(format!(
            "bounding-box diagonal must be positive, got {bbox_diagonal_m}"
        )));
    }
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let max = distances.iter().cloned().fold(0.0, f64::max);
    let rms = (distances.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let pct = 100.0 / bbox_diagonal_m;
    Ok(DirectedMetrics {
        mean_cm: mean * 100.0,
        max_cm: max * 100.0,
        rms_cm: rms * 100.0,
        mean_bbox_pct: mean * pct,
        max_bbox_pct: max * pct,
        rms_bbox_pct: rms * pct,
        sample_count: distances.len(),
    })
}

fn worst_of(a: &DirectedMetrics, b: &DirectedMetrics) -> DirectedMetrics {
    DirectedMetrics {
        mean_cm: a.mean_cm.max(b.mean_cm),
        max_cm: a.max_cm.max(b.max_cm),
        rms_cm: a.rms_cm.max(b.rms_cm),
        mean_bbox_pct: a.mean_bbox_pct.max(b.mean_bbox_pct),
        max_bbox_pct: a.max_bbox_pct.max(b.max_bbox_pct),
        rms_bbox_pct: a.rms_bbox_pct.max(b.rms_bbox_pct),
        sample_count: a.sample_count + b.sample_count,
    }
}

/// Measures both directed distances between the meshes and the symmetric
/// (per-metric worst) summary. Percentages are relative to the diagonal
/// of `first`'s bounding box in both directions.
pub fn hausdorff_report(
    first: &TriangleMesh,
    second: &TriangleMesh,
    sampling: &Sampling,
) -> Result<DistanceReport> {
    let diagonal = first.bbox_diagonal();
    if !(diagonal > 0.0) {
        return Err(Error::Degenerate(
            "first mesh is empty or has a degenerate bounding box".into(),
        ));
    }
    let forward = aggregate_metrics(&directed_distances(first, second, sampling)?, diagonal)?;
    let backward = aggregate_metrics(&directed_distances(second, first, sampling)?, diagonal)?;
    Ok(DistanceReport {
        forward,
        backward,
        symmetric: worst_of(&forward, &backward),
        bbox_diagonal_m: diagonal,
    })
}

/// Colors each vertex by its distance on a red (near) → green → blue
/// (far) ramp, clamped at `max_distance`.
pub fn colorize_by_distance(
    mesh: &TriangleMesh,
    distances: &[f64],
    max_distance: f64,
) -> Result<TriangleMesh> {
    if distances.len() != mesh.vertices.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} distances for {} vertices",
            distances.len(),
            mesh.vertices.len()
        )));
    }
    if !(max_distance > 0.0) {
        return Err(Error::InvalidInput(format!(
            "color range must be positive, got {max_distance}"
        )));
    }
    let colors = distances
        .iter()
        .map(|&d| distance_color(d, max_distance))
        .collect();
    let mut colored = mesh.clone();
    colored.colors = Some(colors);
    Ok(colored)
}

/// Ramp sample: red at 0, green at half range, blue at the full range.
pub fn distance_color(distance: f64, max_distance: f64) -> [u8; 3] {
    let t = (distance / max_distance).clamp(0.0, 1.0);
    let channel = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    if t <= 0.5 {
        let s = 2.0 * t;
        [channel(1.0 - s), channel(s), 0]
    } else {
        let s = 2.0 * (t - 0.5);
        [0, channel(1.0 - s), channel(s)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::closest_point_on_triangle;
    use crate::geometry::RigidTransform;
    use crate::procedural::{head, uv_sphere, HeadParams};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn big_triangle(z: f64) -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Point3::new(-5.0, -5.0, z),
                Point3::new(5.0, -5.0, z),
                Point3::new(0.0, 5.0, z),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn identical_meshes_have_zero_distance() {
        let mesh = uv_sphere(Point3::origin(), 0.2, 16, 9).unwrap();
        let report = hausdorff_report(&mesh, &mesh, &Sampling::Vertices).unwrap();
        assert_eq!(report.symmetric.max_cm, 0.0);
        assert_eq!(report.symmetric.mean_cm, 0.0);
        assert_eq!(report.symmetric.rms_cm, 0.0);
        assert_eq!(report.forward.sample_count, mesh.vertices.len());
    }

    #[test]
    fn parallel_planes_measure_their_gap() {
        let a = big_triangle(0.0);
        let b = big_triangle(0.1);
        let report = hausdorff_report(&a, &b, &Sampling::Vertices).unwrap();
        for m in [&report.forward, &report.backward, &report.symmetric] {
            assert_relative_eq!(m.mean_cm, 10.0, epsilon = 1e-9);
            assert_relative_eq!(m.max_cm, 10.0, epsilon = 1e-9);
            assert_relative_eq!(m.rms_cm, 10.0, epsilon = 1e-9);
        }
        // Percentages use the first mesh's diagonal.
        let diag = a.bbox_diagonal();
        assert_relative_eq!(
            report.forward.mean_bbox_pct,
            0.1 / diag * 100.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn directed_distances_match_brute_force() {
        let a = head(Point3::origin(), &HeadParams::default(), 14, 9).unwrap();
        let b = uv_sphere(Point3::new(0.05, 0.02, 0.01), 0.09, 12, 7).unwrap();
        let fast = directed_distances(&a, &b, &Sampling::Vertices).unwrap();
        for (i, v) in a.vertices.iter().enumerate() {
            let mut best = f64::INFINITY;
            for f in 0..b.faces.len() {
                let [p, q, r] = b.triangle(f);
                let cp = closest_point_on_triangle(v, &p, &q, &r);
                best = best.min((cp - v).norm());
            }
            assert!(
                (fast[i] - best).abs() < 1e-12,
                "vertex {i}: {} vs {}",
                fast[i],
                best
            );
        }
    }

    #[test]
    fn symmetric_cm_metrics_are_order_independent() {
        let a = head(Point3::origin(), &HeadParams::default(), 14, 9).unwrap();
        let b = uv_sphere(Point3::new(0.03, 0.0, 0.02), 0.1, 12, 7).unwrap();
        let ab = hausdorff_report(&a, &b, &Sampling::Vertices).unwrap();
        let ba = hausdorff_report(&b, &a, &Sampling::Vertices).unwrap();
        assert_relative_eq!(ab.symmetric.max_cm, ba.symmetric.max_cm, epsilon = 1e-12);
        assert_relative_eq!(ab.symmetric.mean_cm, ba.symmetric.mean_cm, epsilon = 1e-12);
        assert_relative_eq!(ab.symmetric.rms_cm, ba.symmetric.rms_cm, epsilon = 1e-12);
    }

    #[test]
    fn report_is_rigid_motion_equivariant() {
        let a = head(Point3::origin(), &HeadParams::default(), 14, 9).unwrap();
        let b = uv_sphere(Point3::new(0.03, 0.0, 0.02), 0.1, 12, 7).unwrap();
        let base = hausdorff_report(&a, &b, &Sampling::Vertices).unwrap();
        let t = RigidTransform::new(nalgebra::Matrix3::identity(), Vector3::new(1.0, -2.0, 0.5));
        let moved = hausdorff_report(&a.transformed(&t), &b.transformed(&t), &Sampling::Vertices)
            .unwrap();
        assert_relative_eq!(base.symmetric.max_cm, moved.symmetric.max_cm, epsilon = 1e-9);
        assert_relative_eq!(base.symmetric.mean_cm, moved.symmetric.mean_cm, epsilon = 1e-9);
        assert_relative_eq!(base.bbox_diagonal_m, moved.bbox_diagonal_m, epsilon = 1e-9);
    }

    #[test]
    fn area_sampling_is_deterministic_and_on_surface() {
        let mesh = uv_sphere(Point3::origin(), 0.2, 20, 13).unwrap();
        let sampling = Sampling::AreaUniform {
            samples: 500,
            seed: 12,
        };
        let a = sample_surface(&mesh, &sampling).unwrap();
        let b = sample_surface(&mesh, &sampling).unwrap();
        assert_eq!(a.len(), 500);
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(p, q);
        }
        // Samples lie near the sphere (on the tessellated surface).
        for p in &a {
            let r = p.coords.norm();
            assert!((r - 0.2).abs() < 0.01, "sample at radius {r}");
        }
    }

    /// Published-style directed rows (mean cm, mean % of diagonal) must
    /// be mutually consistent: each pair implies the same reference
    /// diagonal, and our aggregation reproduces the percentages from the
    /// centimeter values.
    #[test]
    fn percentage_and_centimeter_scales_are_consistent() {
        let rows = [(0.1868, 0.4283), (0.6177, 1.4168), (0.2257, 0.5177)];
        let diagonals: Vec<f64> = rows.iter().map(|(cm, pct)| cm / pct * 100.0).collect();
        for pair in diagonals.windows(2) {
            assert!(
                (pair[0] - pair[1]).abs() < 0.1,
                "implied diagonals disagree: {} vs {} cm",
                pair[0],
                pair[1]
            );
        }
        let diagonal_m = diagonals[0] / 100.0;
        for (cm, pct) in rows {
            // A constant distance field with that mean reproduces the row.
            let d_m = cm / 100.0;
            let metrics = aggregate_metrics(&[d_m, d_m, d_m], diagonal_m).unwrap();
            assert_relative_eq!(metrics.mean_cm, cm, epsilon = 1e-12);
            assert_relative_eq!(metrics.mean_bbox_pct, pct, epsilon = 1e-3);
        }
    }

    #[test]
    fn color_ramp_runs_red_green_blue() {
        assert_eq!(distance_color(0.0, 1.0), [255, 0, 0]);
        assert_eq!(distance_color(0.5, 1.0), [0, 255, 0]);
        assert_eq!(distance_color(1.0, 1.0), [0, 0, 255]);
        assert_eq!(distance_color(5.0, 1.0), [0, 0, 255]); // clamped
        // Red monotonically falls, blue monotonically rises.
        let mut last = distance_color(0.0, 1.0);
        for i in 1..=20 {
            let c = distance_color(i as f64 / 20.0, 1.0);
            assert!(c[0] <= last[0], "red increased");
            assert!(c[2] >= last[2], "blue decreased");
            last = c;
        }
    }

    #[test]
    fn colorize_attaches_per_vertex_colors() {
        let mesh = big_triangle(0.0);
        let colored = colorize_by_distance(&mesh, &[0.0, 0.05, 0.1], 0.1).unwrap();
        let colors = colored.colors.as_ref().unwrap();
        assert_eq!(colors.len(), 3);
        assert_eq!(colors[0], [255, 0, 0]);
        assert_eq!(colors[1], [0, 255, 0]);
        assert_eq!(colors[2], [0, 0, 255]);
        assert!(colorize_by_distance(&mesh, &[0.0], 0.1).is_err());
        assert!(colorize_by_distance(&mesh, &[0.0, 0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn empty_meshes_are_rejected() {
        let empty = TriangleMesh::default();
        let mesh = big_triangle(0.0);
        assert!(hausdorff_report(&empty, &mesh, &Sampling::Vertices).is_err());
        assert!(hausdorff_report(&mesh, &empty, &Sampling::Vertices).is_err());
        assert!(directed_distances(&mesh, &empty, &Sampling::Vertices).is_err());
    }
}
