//! Synthetic orbital depth scanner: a circular look-at trajectory, a
//! ray-traced depth renderer with a parametric sensor noise model, and a
//! pose perturbation step that emulates the orientation/position readings
//! of a motion-sensing rig.
//!
//! Everything here is deterministic given the model's seed: noise is drawn
//! from counter-style per-pixel streams, so renders are reproducible and
//! independent of pixel evaluation order.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bvh::TriangleBvh;
use crate::geometry::{CameraIntrinsics, DepthFrame, RigidTransform, TriangleMesh};
use crate::{Error, Result};

/// Ordered set of camera-to-world poses on a scanning loop. `radius` and
/// `center` describe the nominal circle: every noise-free pose position
/// lies at that horizontal distance from the vertical axis through
/// `center`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub poses: Vec<RigidTransform>,
    pub radius: f64,
    pub center: Point3<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.poses.iter().map(|p| p.position()).collect()
    }

    /// Checks the noise-free loop invariants: horizontal radius, strictly
    /// increasing azimuth, and uniform closure (the first/last azimuth gap
    /// equals the common step).
    pub fn validate_loop(&self) -> Result<()> {
        if self.poses.len() < 2 {
            return Err(Error::InvalidInput("trajectory needs at least 2 poses".into()));
        }
        let mut azimuths = Vec::with_capacity(self.poses.len());
        for (i, pose) in self.poses.iter().enumerate() {
            let p = pose.position();
            let dx = p.x - self.center.x;
            let dy = p.y - self.center.y;
            let horizontal = (dx * dx + dy * dy).sqrt();
            if (horizontal - self.radius).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "pose {i} sits {horizontal} m from the loop axis, expected {}",
                    self.radius
                )));
            }
            azimuths.push(dy.atan2(dx));
        }
        let n = azimuths.len();
        let mut unwrapped = azimuths.clone();
        for i in 1..n {
            while unwrapped[i] <= unwrapped[i - 1] {
                unwrapped[i] += std::f64::consts::TAU;
            }
        }
        let step = (unwrapped[n - 1] - unwrapped[0]) / (n - 1) as f64;
        for i in 1..n {
            let gap = unwrapped[i] - unwrapped[i - 1];
            if (gap - step).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "azimuth gap {gap} at pose {i} deviates from common step {step}"
                )));
            }
        }
        let closing = std::f64::consts::TAU - (unwrapped[n - 1] - unwrapped[0]);
        if (closing - step).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "loop does not close: final gap {closing} vs step {step}"
            )));
        }
        Ok(())
    }
}

/// Additive sensor imperfection model. Depth noise applies to rendered
/// frames; the angle/translation terms apply to reported poses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SensorNoiseModel {
    /// Std-dev of per-pixel Gaussian depth error, meters.
    pub depth_sigma: f64,
    /// Probability that a pixel returns nothing, in [0, 1].
    pub depth_dropout: f64,
    /// Std-dev of per-pose orientation error, degrees.
    pub angle_sigma_deg: f64,
    /// Std-dev of per-pose position error per axis, meters.
    pub translation_sigma: f64,
    /// Stream seed; equal seeds give bit-identical noise.
    #[serde(default)]
    pub seed: u64,
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        Self {
            depth_sigma: 0.002,
            depth_dropout: 0.005,
            angle_sigma_deg: 0.01,
            translation_sigma: 0.002,
            seed: 0,
        }
    }
}

impl SensorNoiseModel {
    /// A noise model that changes nothing (useful for ground-truth runs).
    pub fn noiseless() -> Self {
        Self {
            depth_sigma: 0.0,
            depth_dropout: 0.0,
            angle_sigma_deg: 0.0,
            translation_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_sigma < 0.0 || self.angle_sigma_deg < 0.0 || self.translation_sigma < 0.0 {
            return Err(Error::InvalidInput("noise sigmas must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.depth_dropout) {
            return Err(Error::InvalidInput(format!(
                "dropout probability {} outside [0, 1]",
                self.depth_dropout
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable derivation of independent RNG streams from one base seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag))
}

/// Evenly spaced circle of look-at poses: `n_frames` cameras on a circle
/// of `radius` around the vertical axis through `center`, at absolute
/// height `height`, each with its optical axis through `center`.
pub fn circular_trajectory(
    center: Point3<f64>,
    radius: f64,
    height: f64,
    n_frames: usize,
) -> Result<Trajectory> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidInput(format!("trajectory radius must be positive, got {radius}")));
    }
    if n_frames < 2 {
        return Err(Error::InvalidInput(format!(
            "trajectory needs at least 2 frames, got {n_frames}"
        )));
    }
    let mut poses = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let theta = std::f64::consts::TAU * i as f64 / n_frames as f64;
        let position = Point3::new(
            center.x + radius * theta.cos(),
            center.y + radius * theta.sin(),
            height,
        );
        poses.push(look_at(position, center));
    }
    Ok(Trajectory {
        poses,
        radius,
        center,
    })
}

/// Camera-to-world pose at `position` with +z (optical axis) through
/// `target`, x horizontal and y pointing downward-ish (image rows grow
/// toward the floor).
pub fn look_at(position: Point3<f64>, target: Point3<f64>) -> RigidTransform {
    let z = Unit::new_normalize(target - position).into_inner();
    let up = Vector3::z();
    let mut x = z.cross(&up);
    if x.norm() < 1e-12 {
        x = Vector3::x();
    } else {
        x.normalize_mut();
    }
    let y = z.cross(&x);
    RigidTransform::new(Matrix3::from_columns(&[x, y, z]), position.coords)
}

/// Reusable depth renderer holding the scene's acceleration structure.
pub struct DepthRenderer {
    bvh: TriangleBvh,
}

impl DepthRenderer {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::InvalidInput("cannot render an empty mesh".into()));
        }
        Ok(Self {
            bvh: TriangleBvh::build(mesh)?,
        })
    }

    /// Renders a depth frame from `pose`. Depth is the camera-frame z of
    /// the nearest ray–triangle intersection (front or back face); pixels
    /// that miss the scene, are dropped out, or end non-positive after
    /// noise are invalid.
    pub fn render(
        &self,
        pose: &RigidTransform,
        k: &CameraIntrinsics,
        noise: &SensorNoiseModel,
    ) -> Result<DepthFrame> {
        noise.validate()?;
        let origin = pose.position();
        let rows: Vec<Vec<(f64, bool)>> = (0..k.height)
            .into_par_iter()
            .map(|v| {
                let mut row = Vec::with_capacity(k.width);
                for u in 0..k.width {
                    let dir_cam = k.ray_direction(u as f64, v as f64);
                    let dir_world = pose.apply_vector(&dir_cam);
                    let hit = self.bvh.intersect_ray(&origin, &dir_world, 1e-9);
                    let pixel = (v * k.width + u) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise.seed, pixel));
                    let dropped: f64 = rng.random();
                    let gauss: f64 = rng.sample(StandardNormal);
                    let value = match hit {
                        Some(h) if dropped >= noise.depth_dropout => {
                            let depth = h.t + noise.depth_sigma * gauss;
                            if depth > 0.0 {
                                Some(depth)
                            } else {
                                None
                            }
                        }
                        _ => None,
                    };
                    match value {
                        Some(d) => row.push((d, true)),
                        None => row.push((0.0, false)),
                    }
                }
                row
            })
            .collect();
        let mut data = Vec::with_capacity(k.width * k.height);
        let mut valid = Vec::with_capacity(k.width * k.height);
        for row in rows {
            for (d, ok) in row {
                data.push(d);
                valid.push(ok);
            }
        }
        DepthFrame::new(k.width, k.height, data, valid)
    }
}

/// One-shot convenience wrapper around [`DepthRenderer`].
pub fn render_depth(
    mesh: &TriangleMesh,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
    noise: &SensorNoiseModel,
) -> Result<DepthFrame> {
    DepthRenderer::new(mesh)?.render(pose, k, noise)
}

/// Simulated motion-sensor readout: each pose perturbed by a rotation of
/// N(0, angle_sigma) degrees about a random axis and an N(0,
/// translation_sigma) offset per translation component. Deterministic
/// given the model seed; zero sigmas return the input unchanged.
pub fn perturb_poses(trajectory: &Trajectory, noise: &SensorNoiseModel) -> Result<Trajectory> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(noise.seed, 0x706F_7365_u64));
    let mut poses = Vec::with_capacity(trajectory.poses.len());
    for pose in &trajectory.poses {
        let axis = loop {
            let v = Vector3::new(
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            if v.norm() > 1e-9 {
                break Unit::new_normalize(v);
            }
        };
        let angle: f64 =
            rng.sample::<f64, _>(StandardNormal) * noise.angle_sigma_deg.to_radians();
        let jitter = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * noise.translation_sigma;
        let delta = Rotation3::from_axis_angle(&axis, angle).into_inner();
        poses.push(RigidTransform::new(
            delta * pose.rotation,
            pose.translation + jitter,
        ));
    }
    Ok(Trajectory {
        poses,
        radius: trajectory.radius,
        center: trajectory.center,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::ray_triangle;
    use crate::geometry::backproject;
    use crate::procedural::{head, uv_sphere, HeadParams};
    use approx::assert_relative_eq;

    fn small_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(48, 48, 40.0, 40.0, 24.0, 24.0).unwrap()
    }

    #[test]
    fn quarter_circle_positions() {
        let t = circular_trajectory(Point3::origin(), 1.0, 0.5, 4).unwrap();
        let expected = [
            (1.0, 0.0),
            (0.0, 1.0),
            (-1.0, 0.0),
            (0.0, -1.0),
        ];
        for (pose, (x, y)) in t.poses.iter().zip(expected) {
            let p = pose.position();
            assert_relative_eq!(p.x, x, epsilon = 1e-9);
            assert_relative_eq!(p.y, y, epsilon = 1e-9);
            assert_relative_eq!(p.z, 0.5, epsilon = 1e-15);
        }
        t.validate_loop().unwrap();
    }

    #[test]
    fn optical_axis_passes_through_center() {
        let center = Point3::new(0.2, -0.1, 0.3);
        let t = circular_trajectory(center, 0.8, 0.9, 12).unwrap();
        for pose in &t.poses {
            let axis = pose.rotation.column(2).into_owned();
            let to_center = center - pose.position();
            assert!(axis.cross(&to_center).norm() < 1e-9);
            assert!(axis.dot(&to_center) > 0.0);
            assert!(pose.orthonormality_error() < 1e-12);
        }
    }

    #[test]
    fn azimuth_step_for_360_frames_is_one_degree() {
        let t = circular_trajectory(Point3::origin(), 1.0, 0.0, 360).unwrap();
        for i in 1..360 {
            let a = t.poses[i - 1].position();
            let b = t.poses[i].position();
            let step = b.y.atan2(b.x) - a.y.atan2(a.x);
            let step = if step < 0.0 {
                step + std::f64::consts::TAU
            } else {
                step
            };
            assert_relative_eq!(step.to_degrees(), 1.0, epsilon = 1e-9);
        }
        t.validate_loop().unwrap();
    }

    #[test]
    fn trajectory_rejects_degenerate_input() {
        assert!(circular_trajectory(Point3::origin(), 0.0, 0.0, 10).is_err());
        assert!(circular_trajectory(Point3::origin(), 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn center_pixel_depth_of_sphere_is_closed_form() {
        // Sphere of radius 0.3 centered 1 m down the optical axis: the
        // center ray hits the pole vertex, so depth = 1 - r exactly.
        let mesh = uv_sphere(Point3::new(0.0, 0.0, 1.0), 0.3, 32, 17).unwrap();
        let k = small_intrinsics();
        let frame = render_depth(
            &mesh,
            &RigidTransform::identity(),
            &k,
            &SensorNoiseModel::noiseless(),
        )
        .unwrap();
        let d = frame.depth(k.cx as usize, k.cy as usize).unwrap();
        assert_relative_eq!(d, 0.7, epsilon = 1e-6);
    }

    #[test]
    fn facing_away_renders_all_invalid() {
        let mesh = uv_sphere(Point3::new(0.0, 0.0, -2.0), 0.3, 16, 9).unwrap();
        let k = small_intrinsics();
        let frame = render_depth(
            &mesh,
            &RigidTransform::identity(),
            &k,
            &SensorNoiseModel::noiseless(),
        )
        .unwrap();
        assert_eq!(frame.valid_count(), 0);
    }

    #[test]
    fn same_seed_renders_identical_frames() {
        let mesh = uv_sphere(Point3::new(0.0, 0.0, 1.0), 0.3, 16, 9).unwrap();
        let k = small_intrinsics();
        let noise = SensorNoiseModel {
            seed: 99,
            ..SensorNoiseModel::default()
        };
        let renderer = DepthRenderer::new(&mesh).unwrap();
        let a = renderer.render(&RigidTransform::identity(), &k, &noise).unwrap();
        let b = renderer.render(&RigidTransform::identity(), &k, &noise).unwrap();
        assert_eq!(a, b);
        let other = renderer
            .render(&RigidTransform::identity(), &k, &noise.with_seed(100))
            .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn render_matches_brute_force_on_small_mesh() {
        let mesh = uv_sphere(Point3::new(0.05, -0.02, 0.9), 0.25, 14, 7).unwrap();
        assert!(mesh.faces.len() <= 200);
        let k = small_intrinsics();
        let pose = look_at(Point3::new(0.1, 0.1, -0.1), Point3::new(0.05, -0.02, 0.9));
        let frame = render_depth(&mesh, &pose, &k, &SensorNoiseModel::noiseless()).unwrap();
        let origin = pose.position();
        for v in 0..k.height {
            for u in 0..k.width {
                let dir = pose.apply_vector(&k.ray_direction(u as f64, v as f64));
                let mut best: Option<f64> = None;
                for f in 0..mesh.faces.len() {
                    let [a, b, c] = mesh.triangle(f);
                    if let Some(t) = ray_triangle(&origin, &dir, &a, &b, &c) {
                        if t > 1e-9 && best.map_or(true, |x| t < x) {
                            best = Some(t);
                        }
                    }
                }
                match (frame.depth(u, v), best) {
                    (None, None) => {}
                    (Some(rendered), Some(brute)) => {
                        assert_eq!(rendered.to_bits(), brute.to_bits());
                    }
                    other => panic!("pixel ({u},{v}) disagreement: {:?}", other),
                }
            }
        }
    }

    #[test]
    fn noiseless_backprojection_lies_on_surface() {
        let mesh = head(Point3::new(0.0, 0.0, 0.2), &HeadParams::default(), 48, 33).unwrap();
        let k = small_intrinsics();
        let pose = look_at(Point3::new(0.5, 0.05, 0.3), Point3::new(0.0, 0.0, 0.2));
        let frame = render_depth(&mesh, &pose, &k, &SensorNoiseModel::noiseless()).unwrap();
        assert!(frame.valid_count() > 100);
        let cloud = backproject(&frame, &k, &pose).unwrap();
        let bvh = TriangleBvh::build(&mesh).unwrap();
        for p in &cloud.points {
            assert!(bvh.closest_point(p).distance < 1e-6);
        }
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let t = circular_trajectory(Point3::origin(), 1.0, 0.3, 8).unwrap();
        let noise = SensorNoiseModel {
            depth_sigma: 0.0,
            depth_dropout: 0.0,
            angle_sigma_deg: 0.0,
            translation_sigma: 0.0,
            seed: 4,
        };
        let p = perturb_poses(&t, &noise).unwrap();
        for (a, b) in t.poses.iter().zip(&p.poses) {
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.translation, b.translation);
        }
    }

    #[test]
    fn perturbation_angle_statistics_match_sigma() {
        let t = circular_trajectory(Point3::origin(), 1.0, 0.3, 1000).unwrap();
        let noise = SensorNoiseModel {
            angle_sigma_deg: 0.01,
            translation_sigma: 0.0,
            seed: 21,
            ..SensorNoiseModel::noiseless()
        };
        let p = perturb_poses(&t, &noise).unwrap();
        let mean_deg: f64 = t
            .poses
            .iter()
            .zip(&p.poses)
            .map(|(a, b)| a.error_to(b).0.to_degrees())
            .sum::<f64>()
            / t.poses.len() as f64;
        // E|N(0, 0.01°)| ≈ 0.008°; anything under 0.02° passes.
        assert!(mean_deg < 0.02, "mean rotation error {mean_deg}°");
        assert!(mean_deg > 0.001, "perturbation should actually do something");
    }

    #[test]
    fn perturbation_is_deterministic() {
        let t = circular_trajectory(Point3::origin(), 1.0, 0.3, 16).unwrap();
        let noise = SensorNoiseModel::default().with_seed(7);
        let a = perturb_poses(&t, &noise).unwrap();
        let b = perturb_poses(&t, &noise).unwrap();
        for (x, y) in a.poses.iter().zip(&b.poses) {
            assert_eq!(x.rotation, y.rotation);
            assert_eq!(x.translation, y.translation);
        }
    }
}
