//! Point-to-plane ICP registration, pose fusion with motion-sensor
//! readings, and frame-to-model tracking.
//!
//! Each ICP iteration finds nearest-neighbor correspondences through a
//! uniform spatial hash, rejects pairs by distance and normal angle,
//! solves the small-angle linearization of the point-to-plane objective
//! Σ‖n_t · (T(p_s) − p_t)‖² through its 6×6 normal equations, and
//! re-orthonormalizes the rotation. Steps that would increase the
//! objective are halved and ultimately rejected, so the recorded error
//! history is non-increasing by construction. A condition number above
//! [`DEGENERACY_CONDITION`] on the 6×6 system flags sliding-surface
//! ambiguity (featureless geometry) instead of returning a garbage pose.

use nalgebra::{Matrix6, Point3, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::bilateral::bilateral_filter;
use crate::geometry::{estimate_normals, CameraIntrinsics, DepthFrame, PointCloud, RigidTransform};
use crate::linalg::jacobi_eigen;
use crate::{Error, Result};

/// Condition-number threshold of the 6×6 normal-equation system above
/// which the solve is declared degenerate.
pub const DEGENERACY_CONDITION: f64 = 1e6;

const MAX_STEP_HALVINGS: usize = 4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Correspondences farther apart than this are rejected (meters).
    pub max_correspondence_distance: f64,
    /// Correspondences whose normals disagree by more than this are
    /// rejected (degrees).
    pub max_normal_angle_deg: f64,
    /// Relative error-change threshold declaring convergence.
    pub convergence_threshold: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            max_correspondence_distance: 0.10,
            max_normal_angle_deg: 30.0,
            convergence_threshold: 1e-6,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || !(self.max_correspondence_distance > 0.0)
            || !(self.max_normal_angle_deg > 0.0)
            || !(self.convergence_threshold > 0.0)
        {
            return Err(Error::InvalidInput(
                "ICP parameters must all be positive".into(),
            ));
        }
        if self.max_normal_angle_deg > 90.0 {
            return Err(Error::InvalidInput(format!(
                "max_normal_angle_deg {} exceeds 90",
                self.max_normal_angle_deg
            )));
        }
        Ok(())
    }
}

/// Outcome of a registration attempt. `error_history` holds the RMS
/// point-to-plane residual of every accepted iterate (non-increasing).
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rms_error: f64,
    pub inlier_fraction: f64,
    pub converged: bool,
    pub degenerate: bool,
    pub error_history: Vec<f64>,
}

/// Uniform spatial hash over a fixed point set for nearest-neighbor
/// queries with a distance cutoff.
pub struct GridIndex {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Point3<f64>>,
}

impl GridIndex {
    pub fn build(points: &[Point3<f64>], cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::InvalidInput(format!("grid cell size must be positive, got {cell}")));
        }
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        Ok(Self {
            cell,
            map,
            points: points.to_vec(),
        })
    }

    fn key(p: &Point3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Index and distance of the nearest stored point within `max_dist`
    /// of `q`. Ties resolve to the lowest index, making queries
    /// deterministic.
    pub fn nearest(&self, q: &Point3<f64>, max_dist: f64) -> Option<(usize, f64)> {
        let reach = (max_dist / self.cell).ceil() as i64;
        let (kx, ky, kz) = Self::key(q, self.cell);
        let max_sq = max_dist * max_dist;
        let mut best: Option<(usize, f64)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(bucket) = self.map.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d_sq = (self.points[i as usize] - q).norm_squared();
                        if d_sq > max_sq {
                            continue;
                        }
                        let better = match best {
                            None => true,
                            Some((bi, bd)) => d_sq < bd || (d_sq == bd && (i as usize) < bi),
                        };
                        if better {
                            best = Some((i as usize, d_sq));
                        }
                    }
                }
            }
        }
        best.map(|(i, d_sq)| (i, d_sq.sqrt()))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One accepted source→target pairing used by the linearized solve.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    /// Source point already mapped by the current transform estimate.
    pub source: Point3<f64>,
    pub target: Point3<f64>,
    pub normal: Vector3<f64>,
}

/// Solution of one linearized point-to-plane iteration.
#[derive(Debug, Clone, Copy)]
pub struct LinearStep {
    /// Twist (rx, ry, rz, tx, ty, tz) minimizing the linearized objective.
    pub delta: Vector6<f64>,
    /// Condition number of the 6×6 normal-equation system.
    pub condition: f64,
}

impl LinearStep {
    /// Incremental transform for a scaled version of the step.
    pub fn increment(&self, scale: f64) -> RigidTransform {
        let w = Vector3::new(self.delta[0], self.delta[1], self.delta[2]) * scale;
        let t = Vector3::new(self.delta[3], self.delta[4], self.delta[5]) * scale;
        RigidTransform::new(Rotation3::from_scaled_axis(w).into_inner(), t)
    }
}

/// Solves the small-angle normal equations Σ J Jᵀ x = −Σ J r with
/// J = [p×n; n] and r = n · (p − q) over the given correspondences.
pub fn linearized_step(pairs: &[Correspondence]) -> Result<LinearStep> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no correspondences to solve from".into()));
    }
    let mut a = Matrix6::<f64>::zeros();
    let mut b = Vector6::<f64>::zeros();
    for c in pairs {
        let r = c.normal.dot(&(c.source - c.target));
        let rot = c.source.coords.cross(&c.normal);
        let j = Vector6::new(rot.x, rot.y, rot.z, c.normal.x, c.normal.y, c.normal.z);
        a += j * j.transpose();
        b += j * r;
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen(&a);
    let min_ev = eigenvalues[0];
    let max_ev = eigenvalues[5];
    let condition = if min_ev <= 0.0 || !min_ev.is_finite() {
        f64::INFINITY
    } else {
        max_ev / min_ev
    };
    let delta = if condition.is_finite() {
        // x = V D⁻¹ Vᵀ (−b)
        let vt_b = eigenvectors.transpose() * (-b);
        let scaled =
            Vector6::from_iterator(vt_b.iter().zip(eigenvalues.iter()).map(|(v, e)| v / e));
        eigenvectors * scaled
    } else {
        Vector6::zeros()
    };
    Ok(LinearStep { delta, condition })
}

/// Registers `source` onto `target` (which must carry normals) starting
/// from `init`; returns the transform mapping source coordinates into the
/// target frame.
pub fn icp_point_to_plane(
    source: &PointCloud,
    target: &PointCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidInput("ICP requires non-empty source and target clouds".into()));
    }
    let Some(target_normals) = target.normals.as_ref() else {
        return Err(Error::InvalidInput("ICP target cloud must carry normals".into()));
    };
    let grid = GridIndex::build(&target.points, params.max_correspondence_distance)?;
    let cos_max = params.max_normal_angle_deg.to_radians().cos();

    let correspondences = |t: &RigidTransform| -> (Vec<Correspondence>, f64) {
        let mut pairs = Vec::new();
        let mut sq_sum = 0.0;
        for (i, p) in source.points.iter().enumerate() {
            let moved = t.apply_point(p);
            let Some((j, _)) = grid.nearest(&moved, params.max_correspondence_distance) else {
                continue;
            };
            let normal = target_normals[j];
            if let Some(src_normals) = source.normals.as_ref() {
                let rotated = t.apply_vector(&src_normals[i]);
                if rotated.dot(&normal) < cos_max {
                    continue;
                }
            }
            let target_pt = target.points[j];
            let r = normal.dot(&(moved - target_pt));
            sq_sum += r * r;
            pairs.push(Correspondence {
                source: moved,
                target: target_pt,
                normal,
            });
        }
        let rms = if pairs.is_empty() {
            f64::INFINITY
        } else {
            (sq_sum / pairs.len() as f64).sqrt()
        };
        (pairs, rms)
    };

    let mut current = *init;
    let (mut pairs, mut err) = correspondences(&current);
    if pairs.is_empty() {
        return Ok(IcpResult {
            transform: current,
            rms_error: f64::INFINITY,
            inlier_fraction: 0.0,
            converged: false,
            degenerate: false,
            error_history: Vec::new(),
        });
    }
    let mut history = vec![err];
    let mut converged = false;
    let mut degenerate = false;

    for _ in 0..params.max_iterations {
        let step = linearized_step(&pairs)?;
        if !step.condition.is_finite() || step.condition > DEGENERACY_CONDITION {
            degenerate = true;
            break;
        }
        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=MAX_STEP_HALVINGS {
            let candidate = step.increment(scale).compose(&current).orthonormalized();
            let (cand_pairs, cand_err) = correspondences(&candidate);
            if !cand_pairs.is_empty() && cand_err <= err {
                accepted = Some((candidate, cand_pairs, cand_err));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, cand_pairs, cand_err)) = accepted else {
            // No step scale improves the objective: local minimum.
            converged = true;
            break;
        };
        let rel_change = (err - cand_err) / err.max(1e-300);
        current = candidate;
        pairs = cand_pairs;
        err = cand_err;
        history.push(err);
        if rel_change < params.convergence_threshold {
            converged = true;
            break;
        }
    }

    Ok(IcpResult {
        transform: current,
        rms_error: err,
        inlier_fraction: pairs.len() as f64 / source.len() as f64,
        converged,
        degenerate,
        error_history: history,
    })
}

/// Weighted fusion of two absolute poses: linear blend of translations,
/// normalized hemisphere-aligned quaternion blend of rotations. Weights
/// must be non-negative and sum to 1; a weight of exactly 1 returns that
/// input untouched.
pub fn fuse_pose(
    icp: &RigidTransform,
    sensor: &RigidTransform,
    w_icp: f64,
    w_sensor: f64,
) -> Result<RigidTransform> {
    if w_icp < 0.0 || w_sensor < 0.0 || (w_icp + w_sensor - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "fusion weights must be non-negative and sum to 1 (got {w_icp} + {w_sensor})"
        )));
    }
    if w_icp == 1.0 {
        return Ok(*icp);
    }
    if w_sensor == 1.0 {
        return Ok(*sensor);
    }
    let translation = icp.translation * w_icp + sensor.translation * w_sensor;
    let q_icp = icp.rotation_quaternion();
    let mut q_sensor = sensor.rotation_quaternion().into_inner();
    if q_icp.coords.dot(&q_sensor.coords) < 0.0 {
        q_sensor = -q_sensor;
    }
    let blended = q_icp.into_inner().coords * w_icp + q_sensor.coords * w_sensor;
    let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::from_vector(blended));
    Ok(RigidTransform::new(
        quat.to_rotation_matrix().into_inner(),
        translation,
    ))
}

/// Parameters of frame-to-model tracking: the ICP settings, the
/// software/hardware fusion weights, and the bilateral pre-filter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackParams {
    pub icp: IcpParams,
    pub w_icp: f64,
    pub w_sensor: f64,
    pub bilateral_sigma_space: f64,
    pub bilateral_sigma_range: f64,
    /// Keep every n-th source point for registration (1 = use all).
    /// Registration needs far fewer constraints than a full frame
    /// provides, so striding trades negligible accuracy for speed.
    pub source_stride: usize,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            icp: IcpParams::default(),
            w_icp: 0.8,
            w_sensor: 0.2,
            bilateral_sigma_space: 2.0,
            bilateral_sigma_range: 0.01,
            source_stride: 1,
        }
    }
}

impl TrackParams {
    pub fn validate(&self) -> Result<()> {
        self.icp.validate()?;
        if self.w_icp < 0.0 || self.w_sensor < 0.0 || (self.w_icp + self.w_sensor - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "fusion weights must be non-negative and sum to 1 (got {} + {})",
                self.w_icp, self.w_sensor
            )));
        }
        if !(self.bilateral_sigma_space > 0.0) || !(self.bilateral_sigma_range > 0.0) {
            return Err(Error::Config("bilateral sigmas must be positive".into()));
        }
        if self.source_stride == 0 {
            return Err(Error::Config("source stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// One step of frame-to-model tracking: bilateral-filters the new frame,
/// estimates its normals, registers it against the ray-cast model
/// prediction starting from the previous pose, and fuses the ICP pose
/// with the sensor pose. When ICP fails to converge or is degenerate the
/// sensor pose is returned unfused with `converged = false`.
pub fn track_frame(
    frame: &DepthFrame,
    model_prediction: &PointCloud,
    sensor_pose: &RigidTransform,
    prev_pose: &RigidTransform,
    k: &CameraIntrinsics,
    params: &TrackParams,
) -> Result<IcpResult> {
    params.validate()?;
    if model_prediction.is_empty() {
        return Err(Error::InvalidInput(
            "model prediction is empty; tracking needs a bootstrapped model".into(),
        ));
    }
    let filtered = bilateral_filter(frame, params.bilateral_sigma_space, params.bilateral_sigma_range)?;
    let mut source = estimate_normals(&filtered, k)?;
    if params.source_stride > 1 {
        let kept: Vec<usize> = (0..source.len()).step_by(params.source_stride).collect();
        source = source.select(&kept);
    }
    if source.is_empty() {
        return Ok(fallback_result(sensor_pose));
    }
    let icp = icp_point_to_plane(&source, model_prediction, prev_pose, &params.icp)?;
    if !icp.converged || icp.degenerate {
        let mut result = fallback_result(sensor_pose);
        result.degenerate = icp.degenerate;
        result.error_history = icp.error_history;
        return Ok(result);
    }
    let fused = fuse_pose(&icp.transform, sensor_pose, params.w_icp, params.w_sensor)?;
    Ok(IcpResult {
        transform: fused,
        ..icp
    })
}

fn fallback_result(sensor_pose: &RigidTransform) -> IcpResult {
    IcpResult {
        transform: *sensor_pose,
        rms_error: f64::INFINITY,
        inlier_fraction: 0.0,
        converged: false,
        degenerate: false,
        error_history: Vec::new(),
    }
}
