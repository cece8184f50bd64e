//! Plane fitting and prism-based head extraction.
//!
//! Two selection strategies cover the supported scene types. For an
//! object resting on a table, a RANSAC-fitted support plane is aligned
//! with the z axis and the head is everything above the plane (beyond a
//! clearance threshold), below the scanner orbit, and horizontally
//! inside the convex hull of the camera positions. For a seated person
//! there is no physical plane: a virtual one is fitted through the
//! points nearest the orbit centroid (the top of the head) and the
//! selection keeps everything within `offset_head` below it inside the
//! same horizontal hull, cutting the torso away.

use nalgebra::{Matrix3, Point2, Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{PointCloud, RigidTransform};
use crate::linalg::jacobi_eigen;
use crate::{Error, Result};

/// Oriented plane in Hessian normal form: `normal · p + d = 0` with
/// `|normal| = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl Plane {
    pub fn new(normal: Vector3<f64>, d: f64) -> Result<Self> {
        let n = normal.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidInput("plane normal must be a nonzero finite vector".into()));
        }
        Ok(Self {
            normal: normal / n,
            d: d / n,
        })
    }

    pub fn from_point_normal(point: &Point3<f64>, normal: Vector3<f64>) -> Result<Self> {
        let plane = Self::new(normal, 0.0)?;
        let d = -plane.normal.dot(&point.coords);
        Ok(Self { d, ..plane })
    }

    /// Positive on the side the normal points to.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) + self.d
    }

    pub fn flipped(&self) -> Plane {
        Plane {
            normal: -self.normal,
            d: -self.d,
        }
    }

    /// The plane containing the images of this plane's points under `t`.
    pub fn transformed(&self, t: &RigidTransform) -> Plane {
        let normal = t.rotation * self.normal;
        let d = self.d - normal.dot(&t.translation);
        Plane { normal, d }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Maximum absolute plane distance for a point to count as an inlier
    /// (meters).
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_threshold: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub plane: Plane,
    /// Ascending indices of the points within the inlier threshold of the
    /// refitted plane.
    pub inliers: Vec<usize>,
}

/// Least-squares plane through a point set (centroid plus the smallest
/// principal direction of the scatter matrix), with a deterministic
/// normal sign. Fails when the points do not span two dimensions.
pub fn fit_plane_lsq(points: &[Point3<f64>]) -> Result<Plane> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "plane fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let centroid = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let q = p.coords - centroid;
        scatter += q * q.transpose();
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen(&scatter);
    let (middle, largest) = (eigenvalues[1], eigenvalues[2]);
    if !(largest > 0.0) || middle <= 1e-12 * largest {
        return Err(Error::Degenerate(
            "points are collinear or coincident; plane is ill-defined".into(),
        ));
    }
    let normal = eigenvectors.column(0).into_owned();
    let plane = Plane::from_point_normal(&Point3::from(centroid), normal)?;
    Ok(canonical_sign(plane))
}

/// Flips the plane if needed so its sign is a deterministic function of
/// its geometry (first nonzero normal component among z, y, x positive).
fn canonical_sign(plane: Plane) -> Plane {
    let n = plane.normal;
    let flip = if n.z != 0.0 {
        n.z < 0.0
    } else if n.y != 0.0 {
        n.y < 0.0
    } else {
        n.x < 0.0
    };
    if flip {
        plane.flipped()
    } else {
        plane
    }
}

/// Robustly fits the dominant plane of a cloud by random sampling,
/// refits it to its inliers by least squares, and returns the refit
/// plane along with the inlier indices. Deterministic for a fixed seed.
pub fn ransac_plane(points: &[Point3<f64>], params: &RansacParams) -> Result<RansacResult> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "plane RANSAC needs at least 3 points, got {}",
            points.len()
        )));
    }
    if params.iterations == 0 || !(params.inlier_threshold > 0.0) {
        return Err(Error::InvalidInput(
            "RANSAC needs a positive iteration count and inlier threshold".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = points.len();
    let mut best: Option<(usize, Plane)> = None;
    for _ in 0..params.iterations {
        let a = rng.random_range(0..n);
        let (mut b, mut c) = (a, a);
        while b == a {
            b = rng.random_range(0..n);
        }
        while c == a || c == b {
            c = rng.random_range(0..n);
        }
        let e1 = points[b] - points[a];
        let e2 = points[c] - points[a];
        let normal = e1.cross(&e2);
        let scale = e1.norm() * e2.norm();
        if scale <= 0.0 || normal.norm() <= 1e-12 * scale {
            continue; // collinear sample
        }
        let Ok(plane) = Plane::from_point_normal(&points[a], normal) else {
            continue;
        };
        let count = points
            .iter()
            .filter(|p| plane.signed_distance(p).abs() <= params.inlier_threshold)
            .count();
        if best.as_ref().is_none_or(|(best_count, _)| count > *best_count) {
            best = Some((count, plane));
        }
    }
    let Some((_, candidate)) = best else {
        return Err(Error::Degenerate(
            "all RANSAC samples were collinear; no plane hypothesis found".into(),
        ));
    };
    let rough_inliers: Vec<Point3<f64>> = points
        .iter()
        .filter(|p| candidate.signed_distance(p).abs() <= params.inlier_threshold)
        .cloned()
        .collect();
    let plane = match fit_plane_lsq(&rough_inliers) {
        Ok(p) => p,
        // Inliers may themselves be degenerate (e.g. a perfect line swept
        // up by a lucky hypothesis); fall back to the sampled plane.
        Err(_) => canonical_sign(candidate),
    };
    let inliers: Vec<usize> = (0..n)
        .filter(|&i| plane.signed_distance(&points[i]).abs() <= params.inlier_threshold)
        .collect();
    if inliers.len() < 3 {
        return Err(Error::Degenerate(
            "refitted plane retained fewer than 3 inliers".into(),
        ));
    }
    Ok(RansacResult { plane, inliers })
}

/// Rigid transform rotating `plane`'s normal onto +z (translation zero),
/// so transformed plane points share the constant height `−plane.d`.
pub fn plane_align_transform(plane: &Plane) -> RigidTransform {
    let z = Vector3::z();
    let rotation = match Rotation3::rotation_between(&plane.normal, &z) {
        Some(r) => r.into_inner(),
        // Antiparallel: rotate half a turn about any horizontal axis.
        None => Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI).into_inner(),
    };
    RigidTransform::new(rotation, Vector3::zeros())
}

/// Strictly convex hull of a 2D point set, counter-clockwise, via the
/// monotone chain; collinear boundary points are dropped.
pub fn convex_hull_2d(points: &[Point2<f64>]) -> Result<Vec<Point2<f64>>> {
    let mut pts: Vec<Point2<f64>> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "convex hull needs at least 3 distinct points, got {}",
            pts.len()
        )));
    }
    let cross = |o: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let chain = |iter: &mut dyn Iterator<Item = &Point2<f64>>| {
        let mut out: Vec<Point2<f64>> = Vec::new();
        for p in iter {
            while out.len() >= 2 && cross(&out[out.len() - 2], &out[out.len() - 1], p) <= 0.0 {
                out.pop();
            }
            out.push(*p);
        }
        out.pop(); // endpoint starts the other chain
        out
    };
    let mut hull = chain(&mut pts.iter());
    hull.extend(chain(&mut pts.iter().rev()));
    if hull.len() < 3 {
        return Err(Error::Degenerate("points are collinear; hull has no area".into()));
    }
    Ok(hull)
}

/// Membership test against a counter-clockwise convex polygon, boundary
/// inclusive.
pub fn point_in_convex_polygon(p: &Point2<f64>, hull: &[Point2<f64>]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        if (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x) < 0.0 {
            return false;
        }
    }
    true
}

/// Vertical prism: a convex horizontal cross-section extruded between
/// two heights (either may be infinite).
#[derive(Debug, Clone)]
pub struct Prism {
    pub hull: Vec<Point2<f64>>,
    pub z_min: f64,
    pub z_max: f64,
}

impl Prism {
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        p.z >= self.z_min
            && p.z <= self.z_max
            && point_in_convex_polygon(&Point2::new(p.x, p.y), &self.hull)
    }
}

fn pose_positions(poses: &[RigidTransform]) -> Result<Vec<Point3<f64>>> {
    if poses.is_empty() {
        return Err(Error::InvalidInput("selection requires at least one camera pose".into()));
    }
    Ok(poses.iter().map(|p| p.position()).collect())
}

fn centroid_of(points: &[Point3<f64>]) -> Point3<f64> {
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len() as f64)
}

/// Indices of `cloud` kept by the tabletop extraction rule: align the
/// support plane with z, then keep points more than `dist_thresh` above
/// it, no higher than the orbit, and horizontally inside the convex hull
/// of the camera positions.
pub fn select_head_on_table_indices(
    cloud: &PointCloud,
    plane: &Plane,
    plane_inliers: &[usize],
    poses: &[RigidTransform],
    dist_thresh: f64,
) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot select from an empty cloud".into()));
    }
    if !(dist_thresh >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "distance threshold must be non-negative, got {dist_thresh}"
        )));
    }
    if let Some(&bad) = plane_inliers.iter().find(|&&i| i >= cloud.len()) {
        return Err(Error::InvalidInput(format!(
            "plane inlier index {bad} out of bounds for cloud of {}",
            cloud.len()
        )));
    }
    let positions = pose_positions(poses)?;
    // The up side of the table is the side the scanner orbits on.
    let pose_centroid = centroid_of(&positions);
    let oriented = if plane.signed_distance(&pose_centroid) < 0.0 {
        plane.flipped()
    } else {
        *plane
    };
    let align = plane_align_transform(&oriented);
    let aligned_positions: Vec<Point3<f64>> =
        positions.iter().map(|p| align.apply_point(p)).collect();
    let plane_z = if plane_inliers.is_empty() {
        -oriented.d
    } else {
        plane_inliers
            .iter()
            .map(|&i| align.apply_point(&cloud.points[i]).z)
            .sum::<f64>()
            / plane_inliers.len() as f64
    };
    let z_max = aligned_positions
        .iter()
        .map(|p| p.z)
        .fold(f64::NEG_INFINITY, f64::max);
    let hull = convex_hull_2d(
        &aligned_positions
            .iter()
            .map(|p| Point2::new(p.x, p.y))
            .collect::<Vec<_>>(),
    )?;
    let prism = Prism {
        hull,
        z_min: plane_z + dist_thresh,
        z_max,
    };
    let kept: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = align.apply_point(&cloud.points[i]);
            p.z > prism.z_min && p.z <= prism.z_max
                && point_in_convex_polygon(&Point2::new(p.x, p.y), &prism.hull)
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySelection(
            "no points above the support plane inside the scan orbit".into(),
        ));
    }
    Ok(kept)
}

/// Tabletop extraction returning the selected sub-cloud. See
/// [`select_head_on_table_indices`].
pub fn select_head_on_table(
    cloud: &PointCloud,
    plane: &Plane,
    plane_inliers: &[usize],
    poses: &[RigidTransform],
    dist_thresh: f64,
) -> Result<PointCloud> {
    let indices = select_head_on_table_indices(cloud, plane, plane_inliers, poses, dist_thresh)?;
    Ok(cloud.select(&indices))
}

/// Indices of `cloud` kept by the seated-person extraction rule: fit a
/// virtual plane through the `k` points nearest the orbit centroid (the
/// crown of the head) and keep everything from `offset_head` below that
/// plane upward, inside the horizontal hull of the camera positions.
pub fn select_human_head_indices(
    cloud: &PointCloud,
    poses: &[RigidTransform],
    k: usize,
    offset_head: f64,
) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("cannot select from an empty cloud".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("neighborhood size k must be positive".into()));
    }
    if !(offset_head > 0.0) {
        return Err(Error::InvalidInput(format!(
            "head offset must be positive, got {offset_head}"
        )));
    }
    let positions = pose_positions(poses)?;
    let pose_centroid = centroid_of(&positions);

    // k nearest points to the orbit centroid, ties broken by index.
    let mut by_distance: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - pose_centroid).norm(), i))
        .collect();
    by_distance.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let head_top: Vec<Point3<f64>> = by_distance
        .iter()
        .take(k.min(cloud.len()))
        .map(|&(_, i)| cloud.points[i])
        .collect();

    let fitted = fit_plane_lsq(&head_top)?;
    // The crown plane's normal must point away from the body.
    let cloud_centroid = cloud.centroid().ok_or_else(|| {
        Error::InvalidInput("cannot select from an empty cloud".into())
    })?;
    let oriented = if fitted.signed_distance(&cloud_centroid) > 0.0 {
        fitted.flipped()
    } else {
        fitted
    };
    let align = plane_align_transform(&oriented);
    let plane_z = -oriented.d;
    let hull = convex_hull_2d(
        &positions
            .iter()
            .map(|p| {
                let q = align.apply_point(p);
                Point2::new(q.x, q.y)
            })
            .collect::<Vec<_>>(),
    )?;
    let z_min = plane_z - offset_head;
    let kept: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let p = align.apply_point(&cloud.points[i]);
            p.z >= z_min && point_in_convex_polygon(&Point2::new(p.x, p.y), &hull)
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptySelection(
            "no points within the head band under the crown plane".into(),
        ));
    }
    Ok(kept)
}

/// Seated-person extraction returning the selected sub-cloud. See
/// [`select_human_head_indices`].
pub fn select_human_head(
    cloud: &PointCloud,
    poses: &[RigidTransform],
    k: usize,
    offset_head: f64,
) -> Result<PointCloud> {
    let indices = select_human_head_indices(cloud, poses, k, offset_head)?;
    Ok(cloud.select(&indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanner::circular_trajectory;
    use approx::assert_relative_eq;

    #[test]
    fn plane_signed_distance_and_flip() {
        let p = Plane::new(Vector3::new(0.0, 0.0, 2.0), -1.0).unwrap();
        // Normalization: n = +z, d = -0.5 → plane z = 0.5.
        assert_relative_eq!(p.signed_distance(&Point3::new(3.0, 1.0, 2.0)), 1.5);
        assert_relative_eq!(p.flipped().signed_distance(&Point3::new(3.0, 1.0, 2.0)), -1.5);
        assert!(Plane::new(Vector3::zeros(), 0.0).is_err());
    }

    #[test]
    fn plane_transforms_with_its_points() {
        let plane = Plane::from_point_normal(&Point3::new(0.0, 0.0, 0.3), Vector3::z()).unwrap();
        let t = RigidTransform::from_axis_angle(
            Vector3::new(0.3, -0.5, 1.0),
            0.8,
            Vector3::new(0.2, -  0.1, 0.4),
        );
        let moved = plane.transformed(&t);
        for (x, y) in [(0.0, 0.0), (1.0, -2.0), (0.3, 0.7)] {
            let on_plane = Point3::new(x, y, 0.3);
            let image = t.apply_point(&on_plane);
            assert!(moved.signed_distance(&image).abs() < 1e-12);
        }
    }

    fn table_scene() -> (Vec<Point3<f64>>, Vec<usize>) {
        // 15×15 grid on z = 0.3 plus scattered off-plane points.
        let mut pts = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                pts.push(Point3::new(i as f64 * 0.02, j as f64 * 0.02, 0.3));
            }
        }
        let n_plane = pts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..60 {
            pts.push(Point3::new(
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
                rng.random_range(0.35..0.8),
            ));
        }
        (pts, (0..n_plane).collect())
    }

    #[test]
    fn ransac_recovers_dominant_plane() {
        let (pts, plane_idx) = table_scene();
        let result = ransac_plane(&pts, &RansacParams::default()).unwrap();
        // Normal within 0.1° of ±z, height within a millimeter.
        assert!(result.plane.normal.z.abs() > 0.9999985);
        assert!((result.plane.signed_distance(&Point3::new(0.1, 0.1, 0.3))).abs() < 1e-3);
        for i in plane_idx {
            assert!(result.inliers.contains(&i), "missing plane point {i}");
        }
    }

    #[test]
    fn ransac_is_deterministic_per_seed() {
        let (pts, _) = table_scene();
        let a = ransac_plane(&pts, &RansacParams::default()).unwrap();
        let b = ransac_plane(&pts, &RansacParams::default()).unwrap();
        assert_eq!(a.plane.normal, b.plane.normal);
        assert_eq!(a.plane.d, b.plane.d);
        assert_eq!(a.inliers, b.inliers);
        let c = ransac_plane(
            &pts,
            &RansacParams {
                seed: 77,
                ..Default::default()
            },
        )
        .unwrap();
        // A different seed still finds the same physical plane.
        assert!(c.plane.normal.z.abs() > 0.9999);
    }

    #[test]
    fn ransac_rejects_degenerate_input() {
        assert!(ransac_plane(&[], &RansacParams::default()).is_err());
        let two = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        assert!(ransac_plane(&two, &RansacParams::default()).is_err());
        let line: Vec<Point3<f64>> =
            (0..50).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        assert!(ransac_plane(&line, &RansacParams::default()).is_err());
    }

    #[test]
    fn lsq_fit_is_accurate_on_noiseless_plane() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                // Tilted plane z = 0.1 + 0.2x − 0.15y.
                let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
                pts.push(Point3::new(x, y, 0.1 + 0.2 * x - 0.15 * y));
            }
        }
        let plane = fit_plane_lsq(&pts).unwrap();
        for p in &pts {
            assert!(
                plane.signed_distance(p).abs() < 1e-9,
                "residual {}",
                plane.signed_distance(p)
            );
        }
        // Canonical sign: z component positive.
        assert!(plane.normal.z > 0.0);
    }

    #[test]
    fn hull_of_square_with_interior_points() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
            Point2::new(0.5, 0.5),
            Point2::new(0.25, 0.75),
            Point2::new(0.5, 0.0), // collinear with the bottom edge
        ];
        let hull = convex_hull_2d(&pts).unwrap();
        assert_eq!(hull.len(), 4);
        // Shoelace area of the CCW hull is +1.
        let mut area = 0.0;
        for i in 0..hull.len() {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            area += a.x * b.y - b.x * a.y;
        }
        assert_relative_eq!(area / 2.0, 1.0, epsilon = 1e-12);
        assert!(point_in_convex_polygon(&Point2::new(0.5, 0.5), &hull));
        assert!(point_in_convex_polygon(&Point2::new(0.0, 0.5), &hull)); // on edge
        assert!(!point_in_convex_polygon(&Point2::new(1.2, 0.5), &hull));
    }

    #[test]
    fn hull_rejects_collinear_input() {
        let line: Vec<Point2<f64>> = (0..5).map(|i| Point2::new(i as f64, 2.0 * i as f64)).collect();
        assert!(convex_hull_2d(&line).is_err());
        assert!(convex_hull_2d(&line[..2]).is_err());
    }

    #[test]
    fn align_transform_levels_the_plane() {
        let plane =
            Plane::from_point_normal(&Point3::new(0.2, -0.1, 0.5), Vector3::new(0.3, -0.4, 0.86))
                .unwrap();
        let align = plane_align_transform(&plane);
        // Two points on the plane map to the same height −d.
        let u = plane.normal.cross(&Vector3::x()).normalize();
        let v = plane.normal.cross(&u);
        let base = Point3::new(0.2, -0.1, 0.5);
        for w in [u, v, (u + v).normalize()] {
            let q = align.apply_point(&(base + 0.3 * w));
            assert_relative_eq!(q.z, -plane.d, epsilon = 1e-12);
        }
        // Antiparallel normal still produces a valid rotation.
        let down = Plane::new(-Vector3::z(), 0.4).unwrap();
        let flip = plane_align_transform(&down);
        assert!(flip.orthonormality_error() < 1e-12);
        let q = flip.apply_point(&Point3::new(0.3, 0.2, 0.4));
        assert_relative_eq!(q.z, -0.4, epsilon = 1e-12);
    }

    /// Tabletop scene: plate at z = 0, head blob above it, clutter below
    /// the plane and outside the orbit.
    fn selection_scene() -> (PointCloud, Plane, Vec<usize>, Vec<RigidTransform>) {
        let mut pts = Vec::new();
        let mut plane_inliers = Vec::new();
        for i in 0..12 {
            for j in 0..12 {
                plane_inliers.push(pts.len());
                pts.push(Point3::new(
                    -0.3 + i as f64 * 0.05,
                    -0.3 + j as f64 * 0.05,
                    0.0,
                ));
            }
        }
        // Head blob: shell around (0, 0, 0.15).
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..300 {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            pts.push(Point3::new(0.0, 0.0, 0.15) + 0.08 * dir);
        }
        // Clutter: below the table and far outside the orbit.
        for i in 0..40 {
            pts.push(Point3::new(0.1, 0.1, -0.2 - 0.01 * i as f64));
            pts.push(Point3::new(3.0 + i as f64 * 0.1, 0.0, 0.15));
        }
        let plane = Plane::new(Vector3::z(), 0.0).unwrap();
        let traj = circular_trajectory(Point3::new(0.0, 0.0, 0.15), 1.0, 0.5, 16).unwrap();
        (
            PointCloud::from_points(pts),
            plane,
            plane_inliers,
            traj.poses,
        )
    }

    #[test]
    fn table_selection_matches_reference_rule() {
        let (cloud, plane, inliers, poses) = selection_scene();
        let kept =
            select_head_on_table_indices(&cloud, &plane, &inliers, &poses, 0.01).unwrap();

        // Independent re-derivation of the rule.
        let positions: Vec<Point3<f64>> = poses.iter().map(|p| p.position()).collect();
        let hull_xy = convex_hull_2d(
            &positions.iter().map(|p| Point2::new(p.x, p.y)).collect::<Vec<_>>(),
        )
        .unwrap();
        let z_max = positions.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
        let expected: Vec<usize> = (0..cloud.len())
            .filter(|&i| {
                let p = cloud.points[i];
                p.z > 0.01
                    && p.z <= z_max
                    && point_in_convex_polygon(&Point2::new(p.x, p.y), &hull_xy)
            })
            .collect();
        assert_eq!(kept, expected);
        assert!(!kept.is_empty());
        // Everything kept is from the head blob (indices ≥ 144, < 144+300).
        assert!(kept.iter().all(|&i| (144..444).contains(&i)));
    }

    #[test]
    fn table_selection_is_rigid_invariant() {
        let (cloud, plane, inliers, poses) = selection_scene();
        let baseline =
            select_head_on_table_indices(&cloud, &plane, &inliers, &poses, 0.01).unwrap();
        for (axis, angle, t) in [
            (Vector3::new(0.2, 1.0, 0.1), 0.7, Vector3::new(0.3, -0.2, 0.5)),
            (Vector3::new(1.0, 0.0, -0.4), -1.2, Vector3::new(-1.0, 0.4, 0.2)),
        ] {
            let rt = RigidTransform::from_axis_angle(axis, angle, t);
            let moved_cloud = cloud.transformed(&rt);
            let moved_plane = plane.transformed(&rt);
            let moved_poses: Vec<RigidTransform> =
                poses.iter().map(|p| rt.compose(p)).collect();
            let kept = select_head_on_table_indices(
                &moved_cloud,
                &moved_plane,
                &inliers,
                &moved_poses,
                0.01,
            )
            .unwrap();
            assert_eq!(kept, baseline, "selection changed under rigid motion");
        }
    }

    #[test]
    fn table_selection_empty_when_nothing_above_plane() {
        let pts: Vec<Point3<f64>> = (0..50)
            .map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0))
            .chain((0..50).map(|i| Point3::new(0.0, i as f64 * 0.01, 0.0)))
            .collect();
        let cloud = PointCloud::from_points(pts);
        let plane = Plane::new(Vector3::z(), 0.0).unwrap();
        let traj = circular_trajectory(Point3::origin(), 1.0, 0.5, 8).unwrap();
        let err = select_head_on_table_indices(&cloud, &plane, &[], &traj.poses, 0.01);
        assert!(matches!(err, Err(Error::EmptySelection(_))));
    }

    /// Seated-person scene: spherical head on a wide torso slab.
    fn human_scene() -> (PointCloud, Vec<RigidTransform>) {
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head_center = Point3::new(0.0, 0.0, 1.5);
        for _ in 0..400 {
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            pts.push(head_center + 0.1 * dir);
        }
        // Torso/shoulders: wide band well below the head.
        for i in 0..30 {
            for j in 0..10 {
                pts.push(Point3::new(
                    -0.29 + i as f64 * 0.02,
                    -0.09 + j as f64 * 0.02,
                    0.9 + 0.01 * (i % 3) as f64,
                ));
            }
        }
        let traj = circular_trajectory(head_center, 1.0, 1.65, 16).unwrap();
        (PointCloud::from_points(pts), traj.poses)
    }

    #[test]
    fn human_selection_keeps_head_drops_torso() {
        let (cloud, poses) = human_scene();
        let kept = select_human_head_indices(&cloud, &poses, 40, 0.45).unwrap();
        // All head points (indices < 400) survive; no torso point does.
        let head_kept = kept.iter().filter(|&&i| i < 400).count();
        let torso_kept = kept.iter().filter(|&&i| i >= 400).count();
        assert_eq!(torso_kept, 0, "torso leaked into the selection");
        assert_eq!(head_kept, 400, "head points were lost");
    }

    #[test]
    fn human_selection_matches_reference_rule() {
        let (cloud, poses) = human_scene();
        let k = 40;
        let offset = 0.45;
        let kept = select_human_head_indices(&cloud, &poses, k, offset).unwrap();

        // Independent reimplementation.
        let positions: Vec<Point3<f64>> = poses.iter().map(|p| p.position()).collect();
        let centroid = centroid_of(&positions);
        let mut order: Vec<(f64, usize)> = cloud
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - centroid).norm(), i))
            .collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let top: Vec<Point3<f64>> =
            order.iter().take(k).map(|&(_, i)| cloud.points[i]).collect();
        let fitted = fit_plane_lsq(&top).unwrap();
        let cc = cloud.centroid().unwrap();
        let oriented = if fitted.signed_distance(&cc) > 0.0 {
            fitted.flipped()
        } else {
            fitted
        };
        let align = plane_align_transform(&oriented);
        let hull = convex_hull_2d(
            &positions
                .iter()
                .map(|p| {
                    let q = align.apply_point(p);
                    Point2::new(q.x, q.y)
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let expected: Vec<usize> = (0..cloud.len())
            .filter(|&i| {
                let p = align.apply_point(&cloud.points[i]);
                p.z >= -oriented.d - offset
                    && point_in_convex_polygon(&Point2::new(p.x, p.y), &hull)
            })
            .collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn human_selection_rejects_bad_arguments() {
        let (cloud, poses) = human_scene();
        assert!(select_human_head_indices(&cloud, &poses, 0, 0.45).is_err());
        assert!(select_human_head_indices(&cloud, &poses, 40, 0.0).is_err());
        assert!(select_human_head_indices(&cloud, &[], 40, 0.45).is_err());
        let empty = PointCloud::default();
        assert!(select_human_head_indices(&empty, &poses, 40, 0.45).is_err());
    }
}
