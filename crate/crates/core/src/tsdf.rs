//! Truncated signed distance field fusion and ray-cast surface
//! prediction.
//!
//! The volume stores one normalized signed-distance sample and one
//! accumulated weight per grid point; sample (i, j, k) sits at
//! `origin + voxel_size · (i, j, k)`. Depth frames are fused by
//! projective association: each grid point is projected into the frame,
//! the signed distance along the camera ray is truncated to
//! `±trunc_dist` and normalized to [−1, 1], and the stored value is
//! updated with the weighted running average
//! `d' = (W·d_old + w·d_new) / (W + w)`, `W' = min(W + w, w_alpha)`.
//! Points more than `trunc_dist` behind the observed surface are left
//! untouched so back sides are not carved away.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::geometry::{check_frame_matches, CameraIntrinsics, DepthFrame, PointCloud, RigidTransform};
use crate::{Error, Result};

/// Magic bytes of the volume snapshot format.
const SNAPSHOT_MAGIC: &[u8; 4] = b"TSDF";

/// Weighted running-average update of one voxel:
/// `d' = (w_old·d_old + w_new·d_new) / (w_old + w_new)` with the weight
/// accumulating up to the cap `w_alpha`. The denominator is the raw
/// weight sum; the cap applies only to the stored weight.
pub fn tsdf_update(d_old: f64, w_old: f64, d_new: f64, w_new: f64, w_alpha: f64) -> (f64, f64) {
    let d = (w_old * d_old + w_new * d_new) / (w_old + w_new);
    let w = (w_old + w_new).min(w_alpha);
    (d, w)
}

/// Dense truncated signed-distance volume with per-voxel fusion weights.
#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub resolution: [usize; 3],
    pub voxel_size: f64,
    pub origin: Point3<f64>,
    pub trunc_dist: f64,
    pub w_alpha: f64,
    tsdf: Vec<f64>,
    weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(
        resolution: [usize; 3],
        voxel_size: f64,
        origin: Point3<f64>,
        trunc_dist: f64,
        w_alpha: f64,
    ) -> Result<Self> {
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::InvalidInput(format!(
                "volume resolution must be at least 2 per axis, got {resolution:?}"
            )));
        }
        if !(voxel_size > 0.0) || !(trunc_dist > 0.0) {
            return Err(Error::InvalidInput(format!(
                "voxel_size ({voxel_size}) and trunc_dist ({trunc_dist}) must be positive"
            )));
        }
        if !(w_alpha >= 1.0) {
            return Err(Error::InvalidInput(format!(
                "weight cap must be at least 1, got {w_alpha}"
            )));
        }
        let n = resolution[0] * resolution[1] * resolution[2];
        Ok(Self {
            resolution,
            voxel_size,
            origin,
            trunc_dist,
            w_alpha,
            tsdf: vec![1.0; n],
            weight: vec![0.0; n],
        })
    }

    #[inline]
    pub fn voxel_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    /// World position of grid sample (i, j, k).
    #[inline]
    pub fn voxel_point(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        self.origin + self.voxel_size * Vector3::new(i as f64, j as f64, k as f64)
    }

    #[inline]
    pub fn tsdf_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.tsdf[self.voxel_index(i, j, k)]
    }

    #[inline]
    pub fn weight_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weight[self.voxel_index(i, j, k)]
    }

    pub fn values(&self) -> &[f64] {
        &self.tsdf
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    /// Number of voxels touched by at least one observation.
    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }

    /// World-space bounds of the sample points (not of the cells).
    pub fn aabb(&self) -> (Point3<f64>, Point3<f64>) {
        let max = self.origin
            + self.voxel_size
                * Vector3::new(
                    (self.resolution[0] - 1) as f64,
                    (self.resolution[1] - 1) as f64,
                    (self.resolution[2] - 1) as f64,
                );
        (self.origin, max)
    }

    /// Overwrites every voxel from an analytic field; `f` returns
    /// (normalized distance, weight) for a sample position.
    pub fn fill_with(&mut self, f: impl Fn(Point3<f64>) -> (f64, f64)) {
        for k in 0..self.resolution[2] {
            for j in 0..self.resolution[1] {
                for i in 0..self.resolution[0] {
                    let (d, w) = f(self.voxel_point(i, j, k));
                    let idx = self.voxel_index(i, j, k);
                    self.tsdf[idx] = d;
                    self.weight[idx] = w;
                }
            }
        }
    }

    /// Fuses one depth frame taken from `pose` (camera-to-world) into the
    /// volume with the given per-frame weight.
    pub fn integrate(
        &mut self,
        frame: &DepthFrame,
        k: &CameraIntrinsics,
        pose: &RigidTransform,
        frame_weight: f64,
    ) -> Result<()> {
        if !(frame_weight > 0.0) {
            return Err(Error::InvalidInput(format!(
                "frame weight must be positive, got {frame_weight}"
            )));
        }
        self.integrate_impl(frame, k, pose, frame_weight, None)
    }

    /// Fuses one depth frame with an individual weight per pixel (row
    /// major, `width × height` entries). Pixels whose weight is zero are
    /// ignored; this is how observations seen at grazing incidence are
    /// down-weighted (see [`incidence_weights`]).
    pub fn integrate_weighted(
        &mut self,
        frame: &DepthFrame,
        k: &CameraIntrinsics,
        pose: &RigidTransform,
        pixel_weights: &[f64],
    ) -> Result<()> {
        if pixel_weights.len() != frame.width() * frame.height() {
            return Err(Error::DimensionMismatch(format!(
                "{} pixel weights for a {}x{} frame",
                pixel_weights.len(),
                frame.width(),
                frame.height()
            )));
        }
        if pixel_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "pixel weights must be finite and non-negative".into(),
            ));
        }
        self.integrate_impl(frame, k, pose, 1.0, Some(pixel_weights))
    }

    fn integrate_impl(
        &mut self,
        frame: &DepthFrame,
        k: &CameraIntrinsics,
        pose: &RigidTransform,
        frame_weight: f64,
        pixel_weights: Option<&[f64]>,
    ) -> Result<()> {
        check_frame_matches(frame, k)?;
        let inv = pose.inverse();
        let slice = self.resolution[0] * self.resolution[1];
        let resolution = self.resolution;
        let origin = self.origin;
        let voxel_size = self.voxel_size;
        let trunc = self.trunc_dist;
        let w_alpha = self.w_alpha;
        self.tsdf
            .par_chunks_mut(slice)
            .zip(self.weight.par_chunks_mut(slice))
            .enumerate()
            .for_each(|(kz, (tsdf_slice, weight_slice))| {
                for j in 0..resolution[1] {
                    for i in 0..resolution[0] {
                        let p_world = origin
                            + voxel_size * Vector3::new(i as f64, j as f64, kz as f64);
                        let p_cam = inv.apply_point(&p_world);
                        let Some((u, v)) = k.project(&p_cam) else {
                            continue;
                        };
                        let (ur, vr) = (u.round(), v.round());
                        if ur < 0.0 || vr < 0.0 {
                            continue;
                        }
                        let (ui, vi) = (ur as usize, vr as usize);
                        if ui >= k.width || vi >= k.height {
                            continue;
                        }
                        let Some(depth) = frame.depth(ui, vi) else {
                            continue;
                        };
                        let weight = match pixel_weights {
                            None => frame_weight,
                            Some(ws) => ws[vi * k.width + ui],
                        };
                        if !(weight > 0.0) {
                            continue;
                        }
                        let sd = depth - p_cam.z;
                        if sd < -trunc {
                            continue;
                        }
                        let normalized = sd.min(trunc) / trunc;
                        let idx = i + resolution[0] * j;
                        let (d, w) = tsdf_update(
                            tsdf_slice[idx],
                            weight_slice[idx],
                            normalized,
                            weight,
                            w_alpha,
                        );
                        tsdf_slice[idx] = d;
                        weight_slice[idx] = w;
                    }
                }
            });
        Ok(())
    }

    /// Trilinear interpolation of the field at a world point; `None`
    /// unless all eight surrounding samples have been observed.
    pub fn trilinear(&self, p: &Point3<f64>) -> Option<f64> {
        let g = (p - self.origin) / self.voxel_size;
        let (fx, fy, fz) = (g.x.floor(), g.y.floor(), g.z.floor());
        if fx < 0.0 || fy < 0.0 || fz < 0.0 {
            return None;
        }
        let (i, j, k) = (fx as usize, fy as usize, fz as usize);
        if i + 1 >= self.resolution[0] || j + 1 >= self.resolution[1] || k + 1 >= self.resolution[2]
        {
            return None;
        }
        let (tx, ty, tz) = (g.x - fx, g.y - fy, g.z - fz);
        let mut value = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.voxel_index(i + dx, j + dy, k + dz);
                    if self.weight[idx] <= 0.0 {
                        return None;
                    }
                    let wx = if dx == 1 { tx } else { 1.0 - tx };
                    let wy = if dy == 1 { ty } else { 1.0 - ty };
                    let wz = if dz == 1 { tz } else { 1.0 - tz };
                    value += wx * wy * wz * self.tsdf[idx];
                }
            }
        }
        Some(value)
    }

    /// Central-difference gradient of the field, `None` when any of the
    /// six probes falls in unobserved space.
    fn gradient(&self, p: &Point3<f64>) -> Option<Vector3<f64>> {
        let h = self.voxel_size;
        let dx = self.trilinear(&(p + Vector3::new(h, 0.0, 0.0)))?
            - self.trilinear(&(p - Vector3::new(h, 0.0, 0.0)))?;
        let dy = self.trilinear(&(p + Vector3::new(0.0, h, 0.0)))?
            - self.trilinear(&(p - Vector3::new(0.0, h, 0.0)))?;
        let dz = self.trilinear(&(p + Vector3::new(0.0, 0.0, h)))?
            - self.trilinear(&(p - Vector3::new(0.0, 0.0, h)))?;
        Some(Vector3::new(dx, dy, dz))
    }

    /// Predicts the visible surface from a camera pose by marching every
    /// pixel ray to its first positive-to-negative crossing. Returns a
    /// cloud (with outward normals from the field gradient) in world
    /// coordinates, ordered by pixel index.
    pub fn raycast(&self, k: &CameraIntrinsics, pose: &RigidTransform) -> Result<PointCloud> {
        let (lo, hi) = self.aabb();
        let origin_w = pose.position();
        let rows: Vec<Vec<Option<(Point3<f64>, Vector3<f64>)>>> = (0..k.height)
            .into_par_iter()
            .map(|v| {
                (0..k.width)
                    .map(|u| {
                        let dir_cam = k.ray_direction(u as f64, v as f64).normalize();
                        let dir_w = pose.apply_vector(&dir_cam);
                        self.march_ray(&origin_w, &dir_w, &lo, &hi)
                    })
                    .collect()
            })
            .collect();
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for row in rows {
            for hit in row.into_iter().flatten() {
                points.push(hit.0);
                normals.push(hit.1);
            }
        }
        PointCloud::with_normals(points, normals)
    }

    fn march_ray(
        &self,
        origin: &Point3<f64>,
        dir: &Vector3<f64>,
        lo: &Point3<f64>,
        hi: &Point3<f64>,
    ) -> Option<(Point3<f64>, Vector3<f64>)> {
        let (t_entry, t_exit) = ray_aabb(origin, dir, lo, hi)?;
        let fine = self.voxel_size * 0.5;
        let coarse = self.voxel_size;
        let mut t = t_entry.max(0.0);
        let mut prev: Option<(f64, f64)> = None;
        while t <= t_exit {
            let p = origin + dir * t;
            match self.trilinear(&p) {
                Some(value) => {
                    if let Some((t_prev, v_prev)) = prev {
                        if v_prev > 0.0 && value <= 0.0 {
                            let t_hit = t_prev + (t - t_prev) * v_prev / (v_prev - value);
                            let hit = origin + dir * t_hit;
                            let grad = self.gradient(&hit)?;
                            let norm = grad.norm();
                            if norm <= 0.0 {
                                return None;
                            }
                            return Some((hit, grad / norm));
                        }
                    }
                    prev = Some((t, value));
                    // Far in front of the surface the normalized field
                    // lower-bounds the remaining travel (value × trunc),
                    // so skip proportionally; near the crossing band fall
                    // back to half-voxel sampling for accuracy.
                    t += if value >= 0.5 {
                        (0.75 * value * self.trunc_dist).max(fine)
                    } else {
                        fine
                    };
                }
                None => {
                    prev = None;
                    t += coarse;
                }
            }
        }
        None
    }

    /// Writes the volume to a compact little-endian binary snapshot
    /// (metadata header followed by f32 distance and weight planes).
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(SNAPSHOT_MAGIC).map_err(io_err)?;
        for r in self.resolution {
            w.write_all(&(r as u32).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&(self.voxel_size as f32).to_le_bytes()).map_err(io_err)?;
        for c in [self.origin.x, self.origin.y, self.origin.z] {
            w.write_all(&(c as f32).to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&(self.trunc_dist as f32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.w_alpha as f32).to_le_bytes()).map_err(io_err)?;
        for v in &self.tsdf {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
        }
        for v in &self.weight {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Reads a snapshot previously written by [`Self::save_snapshot`].
    pub fn load_snapshot(path: &Path) -> Result<TsdfVolume> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::parse(path, "bad magic; not a volume snapshot"));
        }
        let mut resolution = [0usize; 3];
        for r_axis in &mut resolution {
            *r_axis = read_u32(&mut r, path)? as usize;
        }
        let voxel_size = read_f32(&mut r, path)? as f64;
        let origin = Point3::new(
            read_f32(&mut r, path)? as f64,
            read_f32(&mut r, path)? as f64,
            read_f32(&mut r, path)? as f64,
        );
        let trunc_dist = read_f32(&mut r, path)? as f64;
        let w_alpha = read_f32(&mut r, path)? as f64;
        let mut volume = TsdfVolume::new(resolution, voxel_size, origin, trunc_dist, w_alpha)?;
        let n = resolution[0] * resolution[1] * resolution[2];
        for i in 0..n {
            volume.tsdf[i] = read_f32(&mut r, path)? as f64;
        }
        for i in 0..n {
            volume.weight[i] = read_f32(&mut r, path)? as f64;
        }
        Ok(volume)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::parse(path, "snapshot truncated")
        } else {
            Error::io(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(f32::from_le_bytes(b))
}

/// Per-pixel fusion weights from viewing incidence: for every valid
/// pixel with valid right and lower neighbors, the cosine between the
/// viewing ray and the local surface normal (in [0, 1]); everywhere
/// else zero. Projective signed distances stretch by the reciprocal of
/// this cosine, so surfaces seen face-on are trustworthy while grazing
/// observations carry little information; feeding these weights to
/// [`TsdfVolume::integrate_weighted`] makes the fused field favor the
/// well-observed views. Pixels on depth discontinuities get a steep
/// apparent slant and hence near-zero weight, which also suppresses
/// foreground/background mixing at silhouettes.
pub fn incidence_weights(frame: &DepthFrame, k: &CameraIntrinsics) -> Result<Vec<f64>> {
    check_frame_matches(frame, k)?;
    let mut weights = vec![0.0; k.width * k.height];
    for v in 0..k.height.saturating_sub(1) {
        for u in 0..k.width.saturating_sub(1) {
            let (Some(d), Some(dr), Some(db)) =
                (frame.depth(u, v), frame.depth(u + 1, v), frame.depth(u, v + 1))
            else {
                continue;
            };
            let p = k.unproject(u as f64, v as f64, d);
            let right = k.unproject((u + 1) as f64, v as f64, dr);
            let below = k.unproject(u as f64, (v + 1) as f64, db);
            let normal = (right - p).cross(&(below - p));
            let norms = normal.norm() * p.coords.norm();
            if !(norms > 0.0) {
                continue;
            }
            weights[v * k.width + u] = (normal.dot(&p.coords).abs() / norms).clamp(0.0, 1.0);
        }
    }
    Ok(weights)
}

/// Entry/exit parameters of a ray against an axis-aligned box, entry
/// clamped to be non-negative. `None` when the ray misses entirely.
fn ray_aabb(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    lo: &Point3<f64>,
    hi: &Point3<f64>,
) -> Option<(f64, f64)> {
    let mut t_min = 0.0_f64;
    let mut t_max = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis] == 0.0 {
            if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let (mut t0, mut t1) = ((lo[axis] - origin[axis]) * inv, (hi[axis] - origin[axis]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_min = t_min.max(t0);
        t_max = t_max.min(t1);
        if t_min > t_max {
            return None;
        }
    }
    Some((t_min, t_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn constant_frame(k: &CameraIntrinsics, depth: f64) -> DepthFrame {
        DepthFrame::constant(k.width, k.height, depth).unwrap()
    }

    fn small_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(32, 32, 40.0, 40.0, 16.0, 16.0).unwrap()
    }

    fn wall_volume() -> TsdfVolume {
        TsdfVolume::new(
            [21, 21, 21],
            0.02,
            Point3::new(-0.2, -0.2, 0.3),
            0.08,
            64.0,
        )
        .unwrap()
    }

    #[test]
    fn update_running_average_examples() {
        let (d, w) = tsdf_update(0.0, 0.0, 0.1, 1.0, 64.0);
        assert_relative_eq!(d, 0.1, epsilon = 1e-15);
        assert_relative_eq!(w, 1.0, epsilon = 1e-15);
        let (d, w) = tsdf_update(0.1, 1.0, 0.3, 1.0, 64.0);
        assert_relative_eq!(d, 0.2, epsilon = 1e-15);
        assert_relative_eq!(w, 2.0, epsilon = 1e-15);
        let (d, w) = tsdf_update(0.1, 64.0, 0.3, 1.0, 64.0);
        assert_relative_eq!(d, (64.0 * 0.1 + 0.3) / 65.0, epsilon = 1e-15);
        assert_relative_eq!(w, 64.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn update_stays_in_bounds(
            d_old in -1.0..1.0f64,
            w_old in 0.0..64.0f64,
            d_new in -1.0..1.0f64,
            w_new in 0.001..8.0f64,
        ) {
            let (d, w) = tsdf_update(d_old, w_old, d_new, w_new, 64.0);
            let lo = d_old.min(d_new) - 1e-12;
            let hi = d_old.max(d_new) + 1e-12;
            // With w_old == 0 the result is exactly d_new; otherwise a
            // convex combination of the two inputs.
            prop_assert!(d >= lo && d <= hi, "{d} outside [{lo}, {hi}]");
            prop_assert!(w >= w_old.min(64.0) && w <= 64.0);
        }
    }

    #[test]
    fn empty_frame_leaves_volume_unchanged() {
        let k = small_intrinsics();
        let mut vol = wall_volume();
        let before = (vol.values().to_vec(), vol.weights().to_vec());
        let frame = DepthFrame::all_invalid(k.width, k.height);
        vol.integrate(&frame, &k, &RigidTransform::identity(), 1.0).unwrap();
        assert_eq!(vol.values(), &before.0[..]);
        assert_eq!(vol.weights(), &before.1[..]);
    }

    #[test]
    fn flat_wall_zero_crossing_within_half_voxel() {
        let k = small_intrinsics();
        let mut vol = wall_volume();
        let frame = constant_frame(&k, 0.5);
        vol.integrate(&frame, &k, &RigidTransform::identity(), 1.0).unwrap();
        // Central column: voxel x = y = 0 is index 10.
        let mut crossing = None;
        for kz in 0..vol.resolution[2] - 1 {
            let a = vol.tsdf_at(10, 10, kz);
            let b = vol.tsdf_at(10, 10, kz + 1);
            if vol.weight_at(10, 10, kz) > 0.0 && vol.weight_at(10, 10, kz + 1) > 0.0 && a > 0.0 && b <= 0.0 {
                let z0 = vol.voxel_point(10, 10, kz).z;
                let z1 = vol.voxel_point(10, 10, kz + 1).z;
                crossing = Some(z0 + (z1 - z0) * a / (a - b));
                break;
            }
        }
        let z = crossing.expect("no zero crossing found along the central column");
        assert!((z - 0.5).abs() <= vol.voxel_size / 2.0, "crossing at {z}");
    }

    #[test]
    fn truncation_clamps_front_and_skips_far_behind() {
        let k = small_intrinsics();
        let mut vol = wall_volume();
        let frame = constant_frame(&k, 0.5);
        vol.integrate(&frame, &k, &RigidTransform::identity(), 1.0).unwrap();
        // Voxel well in front of the wall (z = 0.3, sd = 0.2 > trunc):
        // clamped to exactly +1.
        assert_eq!(vol.tsdf_at(10, 10, 0), 1.0);
        assert_eq!(vol.weight_at(10, 10, 0), 1.0);
        // Voxel far behind the wall (z = 0.7, sd = -0.2 < -trunc): left
        // untouched.
        assert_eq!(vol.weight_at(10, 10, 20), 0.0);
        assert_eq!(vol.tsdf_at(10, 10, 20), 1.0);
        // Voxel slightly behind the wall (z = 0.54, sd = -0.04): negative
        // but not saturated.
        let behind = vol.tsdf_at(10, 10, 12);
        assert!(behind < 0.0 && behind > -1.0, "got {behind}");
        assert_relative_eq!(behind, -0.04 / 0.08, epsilon = 1e-9);
    }

    #[test]
    fn integrating_same_frame_twice_keeps_value_doubles_weight() {
        let k = small_intrinsics();
        let mut vol = wall_volume();
        let frame = constant_frame(&k, 0.5);
        vol.integrate(&frame, &k, &RigidTransform::identity(), 1.0).unwrap();
        let first = vol.values().to_vec();
        let first_w = vol.weights().to_vec();
        vol.integrate(&frame, &k, &RigidTransform::identity(), 1.0).unwrap();
        for i in 0..first.len() {
            assert_eq!(vol.values()[i], first[i], "voxel {i} changed value");
            assert_eq!(vol.weights()[i], (first_w[i] * 2.0).min(64.0), "voxel {i} weight");
        }
    }

    #[test]
    fn frame_order_does_not_matter() {
        let k = small_intrinsics();
        let frames = [
            constant_frame(&k, 0.48),
            constant_frame(&k, 0.5),
            constant_frame(&k, 0.52),
        ];
        let pose = RigidTransform::identity();
        let mut forward = wall_volume();
        for f in &frames {
            forward.integrate(f, &k, &pose, 1.0).unwrap();
        }
        let mut reversed = wall_volume();
        for f in frames.iter().rev() {
            reversed.integrate(f, &k, &pose, 1.0).unwrap();
        }
        for i in 0..forward.values().len() {
            assert!(
                (forward.values()[i] - reversed.values()[i]).abs() < 1e-12,
                "voxel {i}: {} vs {}",
                forward.values()[i],
                reversed.values()[i]
            );
            assert_eq!(forward.weights()[i], reversed.weights()[i]);
        }
    }

    /// Straightforward per-voxel reference implementation used as an
    /// integration oracle.
    fn integrate_reference(
        vol: &mut TsdfVolume,
        frame: &DepthFrame,
        k: &CameraIntrinsics,
        pose: &RigidTransform,
        frame_weight: f64,
    ) {
        let inv = pose.inverse();
        for kz in 0..vol.resolution[2] {
            for j in 0..vol.resolution[1] {
                for i in 0..vol.resolution[0] {
                    let p_cam = inv.apply_point(&vol.voxel_point(i, j, kz));
                    let Some((u, v)) = k.project(&p_cam) else { continue };
                    let (ur, vr) = (u.round(), v.round());
                    if ur < 0.0 || vr < 0.0 || ur as usize >= k.width || vr as usize >= k.height {
                        continue;
                    }
                    let Some(depth) = frame.depth(ur as usize, vr as usize) else {
                        continue;
                    };
                    let sd = depth - p_cam.z;
                    if sd < -vol.trunc_dist {
                        continue;
                    }
                    let normalized = sd.min(vol.trunc_dist) / vol.trunc_dist;
                    let idx = vol.voxel_index(i, j, kz);
                    let (d, w) = tsdf_update(
                        vol.tsdf[idx],
                        vol.weight[idx],
                        normalized,
                        frame_weight,
                        vol.w_alpha,
                    );
                    vol.tsdf[idx] = d;
                    vol.weight[idx] = w;
                }
            }
        }
    }

    #[test]
    fn integration_matches_reference_implementation() {
        let k = small_intrinsics();
        let mut fast = TsdfVolume::new(
            [24, 24, 24],
            0.02,
            Point3::new(-0.24, -0.24, 0.25),
            0.08,
            64.0,
        )
        .unwrap();
        let mut slow = fast.clone();
        // Several slightly rotated/translated views of a tilted synthetic
        // frame exercise rounding, clamping, and the skip branch.
        for step in 0..6 {
            let mut data = vec![0.0; k.width * k.height];
            let mut valid = vec![false; k.width * k.height];
            for v in 0..k.height {
                for u in 0..k.width {
                    let idx = v * k.width + u;
                    // Tilted wall with a band of dropped pixels.
                    if (u + step) % 9 == 0 {
                        continue;
                    }
                    data[idx] = 0.45 + 0.002 * u as f64 + 0.001 * v as f64;
                    valid[idx] = true;
                }
            }
            let frame = DepthFrame::new(k.width, k.height, data, valid).unwrap();
            let pose = RigidTransform::from_axis_angle(
                Vector3::new(0.1, 1.0, 0.05),
                0.03 * step as f64,
                Vector3::new(0.004 * step as f64, -0.002 * step as f64, 0.001 * step as f64),
            );
            fast.integrate(&frame, &k, &pose, 1.0).unwrap();
            integrate_reference(&mut slow, &frame, &k, &pose, 1.0);
        }
        for i in 0..fast.values().len() {
            assert!(
                (fast.values()[i] - slow.values()[i]).abs() <= 1e-9,
                "voxel {i}: {} vs {}",
                fast.values()[i],
                slow.values()[i]
            );
            assert!((fast.weights()[i] - slow.weights()[i]).abs() <= 1e-9);
        }
    }

    /// Per-voxel reference for the pixel-weighted integration path.
    fn integrate_weighted_reference(
        vol: &mut TsdfVolume,
        frame: &DepthFrame,
        k: &CameraIntrinsics,
        pose: &RigidTransform,
        pixel_weights: &[f64],
    ) {
        let inv = pose.inverse();
        for kz in 0..vol.resolution[2] {
            for j in 0..vol.resolution[1] {
                for i in 0..vol.resolution[0] {
                    let p_cam = inv.apply_point(&vol.voxel_point(i, j, kz));
                    let Some((u, v)) = k.project(&p_cam) else { continue };
                    let (ur, vr) = (u.round(), v.round());
                    if ur < 0.0 || vr < 0.0 || ur as usize >= k.width || vr as usize >= k.height {
                        continue;
                    }
                    let (ui, vi) = (ur as usize, vr as usize);
                    let Some(depth) = frame.depth(ui, vi) else {
                        continue;
                    };
                    let weight = pixel_weights[vi * k.width + ui];
                    if !(weight > 0.0) {
                        continue;
                    }
                    let sd = depth - p_cam.z;
                    if sd < -vol.trunc_dist {
                        continue;
                    }
                    let normalized = sd.min(vol.trunc_dist) / vol.trunc_dist;
                    let idx = vol.voxel_index(i, j, kz);
                    let (d, w) = tsdf_update(
                        vol.tsdf[idx],
                        vol.weight[idx],
                        normalized,
                        weight,
                        vol.w_alpha,
                    );
                    vol.tsdf[idx] = d;
                    vol.weight[idx] = w;
                }
            }
        }
    }

    #[test]
    fn weighted_integration_matches_reference_implementation() {
        let k = small_intrinsics();
        let mut fast = TsdfVolume::new(
            [24, 24, 24],
            0.02,
            Point3::new(-0.24, -0.24, 0.25),
            0.08,
            4.0,
        )
        .unwrap();
        let mut slow = fast.clone();
        for step in 0..6 {
            let mut data = vec![0.0; k.width * k.height];
            let mut valid = vec![false; k.width * k.height];
            let mut weights = vec![0.0; k.width * k.height];
            for v in 0..k.height {
                for u in 0..k.width {
                    let idx = v * k.width + u;
                    if (u + step) % 9 == 0 {
                        continue;
                    }
                    data[idx] = 0.45 + 0.002 * u as f64 + 0.001 * v as f64;
                    valid[idx] = true;
                    // Mix of zero, fractional, and full weights.
                    weights[idx] = ((u + 2 * v + step) % 5) as f64 / 4.0;
                }
            }
            let frame = DepthFrame::new(k.width, k.height, data, valid).unwrap();
            let pose = RigidTransform::from_axis_angle(
                Vector3::new(0.1, 1.0, 0.05),
                0.03 * step as f64,
                Vector3::new(0.004 * step as f64, -0.002 * step as f64, 0.001 * step as f64),
            );
            fast.integrate_weighted(&frame, &k, &pose, &weights).unwrap();
            integrate_weighted_reference(&mut slow, &frame, &k, &pose, &weights);
        }
        let mut touched = 0;
        for i in 0..fast.values().len() {
            assert!(
                (fast.values()[i] - slow.values()[i]).abs() <= 1e-9,
                "voxel {i}: {} vs {}",
                fast.values()[i],
                slow.values()[i]
            );
            assert!((fast.weights()[i] - slow.weights()[i]).abs() <= 1e-9);
            // The low cap must bind for fractional weights too.
            assert!(fast.weights()[i] <= 4.0 + 1e-12);
            if fast.weights()[i] > 0.0 {
                touched += 1;
            }
        }
        assert!(touched > 0, "weighted integration touched nothing");
    }

    #[test]
    fn weighted_integration_rejects_bad_weight_maps() {
        let k = small_intrinsics();
        let frame = constant_frame(&k, 0.5);
        let mut vol = wall_volume();
        let pose = RigidTransform::identity();
        let short = vec![1.0; 4];
        assert!(vol.integrate_weighted(&frame, &k, &pose, &short).is_err());
        let mut negative = vec![1.0; k.width * k.height];
        negative[7] = -0.25;
        assert!(vol.integrate_weighted(&frame, &k, &pose, &negative).is_err());
        let mut nan = vec![1.0; k.width * k.height];
        nan[3] = f64::NAN;
        assert!(vol.integrate_weighted(&frame, &k, &pose, &nan).is_err());
    }

    #[test]
    fn incidence_weights_match_analytic_plane_normals() {
        let k = small_intrinsics();
        // Planar scene z = z0 + s·x in camera coordinates: along a pixel
        // ray, z (1 − s (u − cx) / fx) = z0.
        let (z0, s) = (0.6, 0.35);
        let mut data = vec![0.0; k.width * k.height];
        let mut valid = vec![false; k.width * k.height];
        for v in 0..k.height {
            for u in 0..k.width {
                let denom = 1.0 - s * (u as f64 - k.cx) / k.fx;
                if denom <= 0.1 {
                    continue;
                }
                data[v * k.width + u] = z0 / denom;
                valid[v * k.width + u] = true;
            }
        }
        let frame = DepthFrame::new(k.width, k.height, data, valid).unwrap();
        let weights = incidence_weights(&frame, &k).unwrap();
        let normal = Vector3::new(-s, 0.0, 1.0).normalize();
        for v in 0..k.height - 1 {
            for u in 0..k.width - 1 {
                let idx = v * k.width + u;
                if !frame.is_valid(u, v)
                    || !frame.is_valid(u + 1, v)
                    || !frame.is_valid(u, v + 1)
                {
                    assert_eq!(weights[idx], 0.0);
                    continue;
                }
                let p = k.unproject(u as f64, v as f64, frame.depth(u, v).unwrap());
                // Three points of an exact plane determine its normal
                // exactly, so the finite-difference weight is analytic.
                let expected = normal.dot(&p.coords).abs() / p.coords.norm();
                assert!(
                    (weights[idx] - expected).abs() <= 1e-10,
                    "pixel ({u},{v}): {} vs {expected}",
                    weights[idx]
                );
            }
        }
        // Bottom and right rims carry no weight by construction.
        for u in 0..k.width {
            assert_eq!(weights[(k.height - 1) * k.width + u], 0.0);
        }
    }

    #[test]
    fn frontal_wall_weight_is_one_on_the_axis() {
        let k = small_intrinsics();
        let frame = constant_frame(&k, 0.5);
        let weights = incidence_weights(&frame, &k).unwrap();
        // The principal ray meets the frontal wall perpendicularly.
        let (cu, cv) = (k.cx as usize, k.cy as usize);
        let axis = weights[cv * k.width + cu];
        assert!((axis - 1.0).abs() < 1e-9, "axis weight {axis}");
        // Off-axis rays strike the same wall obliquely.
        assert!(weights[cv * k.width + 1] < axis);
    }

    fn sphere_volume(center: Point3<f64>, radius: f64) -> TsdfVolume {
        let mut vol = TsdfVolume::new(
            [48, 48, 48],
            0.01,
            Point3::new(center.x - 0.235, center.y - 0.235, center.z - 0.235),
            0.04,
            64.0,
        )
        .unwrap();
        let trunc = vol.trunc_dist;
        vol.fill_with(|p| {
            let sd = (p - center).norm() - radius;
            ((sd / trunc).clamp(-1.0, 1.0), 1.0)
        });
        vol
    }

    #[test]
    fn raycast_hits_analytic_sphere_at_expected_depth() {
        let center = Point3::new(0.0, 0.0, 0.7);
        let radius = 0.15;
        let vol = sphere_volume(center, radius);
        let k = small_intrinsics();
        let cloud = vol.raycast(&k, &RigidTransform::identity()).unwrap();
        assert!(!cloud.is_empty());
        let normals = cloud.normals.as_ref().unwrap();
        for (p, n) in cloud.points.iter().zip(normals) {
            // Every hit lies on the sphere and its normal points outward.
            let dist = (p - center).norm();
            assert!(
                (dist - radius).abs() <= vol.voxel_size / 2.0,
                "hit at radius {dist}"
            );
            assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-9);
            let outward = (p - center).normalize();
            assert!(n.dot(&outward) > 0.95, "normal not outward: dot {}", n.dot(&outward));
        }
        // The central pixel ray hits at depth ≈ 0.55.
        let central = cloud
            .points
            .iter()
            .min_by(|a, b| {
                let da = a.x.hypot(a.y);
                let db = b.x.hypot(b.y);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assert!(
            (central.z - (center.z - radius)).abs() <= vol.voxel_size / 2.0,
            "central hit depth {}",
            central.z
        );
    }

    #[test]
    fn raycast_of_unobserved_volume_is_empty() {
        let vol = TsdfVolume::new([16, 16, 16], 0.02, Point3::new(-0.16, -0.16, 0.3), 0.08, 64.0)
            .unwrap();
        let k = small_intrinsics();
        let cloud = vol.raycast(&k, &RigidTransform::identity()).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn rays_missing_the_grid_return_nothing() {
        let vol = sphere_volume(Point3::new(0.0, 0.0, 0.7), 0.15);
        let k = small_intrinsics();
        // Camera facing away from the grid.
        let pose = RigidTransform::from_axis_angle(
            Vector3::x(),
            std::f64::consts::PI,
            Vector3::zeros(),
        );
        let cloud = vol.raycast(&k, &pose).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn snapshot_round_trip_preserves_volume() {
        let k = small_intrinsics();
        let mut vol = wall_volume();
        vol.integrate(&constant_frame(&k, 0.5), &k, &RigidTransform::identity(), 1.0)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("volume.tsdf");
        vol.save_snapshot(&path).unwrap();
        let loaded = TsdfVolume::load_snapshot(&path).unwrap();
        assert_eq!(loaded.resolution, vol.resolution);
        assert_relative_eq!(loaded.voxel_size, vol.voxel_size, epsilon = 1e-6);
        assert_relative_eq!(loaded.trunc_dist, vol.trunc_dist, epsilon = 1e-6);
        assert_relative_eq!(loaded.w_alpha, vol.w_alpha, epsilon = 1e-6);
        assert!((loaded.origin - vol.origin).norm() < 1e-6);
        for i in 0..vol.values().len() {
            assert!(
                (loaded.values()[i] - vol.values()[i]).abs() < 1e-6,
                "voxel {i} value"
            );
            assert!((loaded.weights()[i] - vol.weights()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn snapshot_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.tsdf");
        std::fs::write(&bad_magic, b"NOPExxxxyyyyzzzz").unwrap();
        assert!(TsdfVolume::load_snapshot(&bad_magic).is_err());
        let truncated = dir.path().join("short.tsdf");
        std::fs::write(&truncated, b"TSDF\x02\x00\x00\x00").unwrap();
        assert!(TsdfVolume::load_snapshot(&truncated).is_err());
    }

    #[test]
    fn constructor_rejects_bad_parameters() {
        let origin = Point3::origin();
        assert!(TsdfVolume::new([1, 8, 8], 0.01, origin, 0.04, 64.0).is_err());
        assert!(TsdfVolume::new([8, 8, 8], 0.0, origin, 0.04, 64.0).is_err());
        assert!(TsdfVolume::new([8, 8, 8], 0.01, origin, -0.1, 64.0).is_err());
        assert!(TsdfVolume::new([8, 8, 8], 0.01, origin, 0.04, 0.5).is_err());
    }
}
