//! End-to-end orchestration: simulate (or load) a scan, reconstruct,
//! select, scale, export, evaluate.
//!
//! Each stage is an independent function communicating with its
//! neighbors only through files in the configured output directory, so
//! the pipeline can be resumed or debugged stage by stage; [`run_pipeline`]
//! simply runs the stages in order. All randomness derives from the one
//! top-level seed, making a run reproducible to the byte.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::evaluation::{
    colorize_by_distance, directed_distances, hausdorff_report, Sampling,
};
use crate::geometry::{CameraIntrinsics, PointCloud, RigidTransform, TriangleMesh};
use crate::icp::{track_frame, IcpParams, TrackParams};
use crate::io::frames::{
    list_frame_files, read_depth_frame, read_poses, write_frames, write_poses,
};
use crate::io::mesh::{read_mesh, read_ply, write_obj, write_ply, write_stl};
use crate::meshing::marching_cubes;
use crate::procedural::{head, HeadParams};
use crate::scale::{compute_loop_diameter, scale_factor, scale_mesh, PrinterVolume};
use crate::scanner::{circular_trajectory, derive_seed, perturb_poses, DepthRenderer, SensorNoiseModel};
use crate::segmentation::{
    ransac_plane, select_head_on_table_indices, select_human_head_indices, RansacParams,
};
use crate::tsdf::TsdfVolume;
use crate::{Error, Result};

/// File names of every pipeline artifact, all relative to the run's
/// output directory.
pub mod artifact {
    /// Directory of rendered or ingested depth frames.
    pub const FRAMES_DIR: &str = "frames";
    /// Ground-truth camera poses (simulated runs only).
    pub const POSES_TRUTH: &str = "poses_truth.txt";
    /// Poses as reported by the (simulated) motion sensors.
    pub const POSES_SENSOR: &str = "poses_sensor.txt";
    /// Poses estimated by registration fused with the sensor readout.
    pub const POSES_ESTIMATED: &str = "poses_estimated.txt";
    /// Full reconstructed surface before head selection.
    pub const RECON_RAW: &str = "recon_raw.ply";
    /// Head sub-mesh extracted from the reconstruction.
    pub const SELECTED_HEAD: &str = "selected_head.ply";
    /// Head scaled and positioned for the printer's build volume.
    pub const SCALED_MODEL: &str = "scaled_model.ply";
    /// Print-ready binary STL of the scaled head.
    pub const PRINT_MODEL: &str = "print_model.stl";
    /// Selected head colored by distance to the reference mesh.
    pub const COMPARISON: &str = "comparison.ply";
    /// Distance metrics between the selected head and the reference.
    pub const REPORT: &str = "report.json";
    /// Configuration echo plus per-stage summaries (deterministic).
    pub const MANIFEST: &str = "manifest.json";
    /// Wall-clock per-stage timings (not deterministic by nature).
    pub const TIMINGS: &str = "timings.txt";
}

// Stream tags separating the independent uses of the master seed.
const TAG_RENDER: u64 = 0x7265_6e64;
const TAG_POSES: u64 = 0x706f_7365;
const TAG_RANSAC: u64 = 0x706c_616e;

/// Where the scan comes from: a ground-truth mesh to render, or a
/// directory of recorded depth frames plus the matching sensor poses.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Scene mesh scanned by the simulator (OBJ, STL, or PLY).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
    /// Directory of recorded `depth_XXXXX.d16` frames.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames_dir: Option<PathBuf>,
    /// Sensor-pose file matching `frames_dir` (12 numbers per line,
    /// row-major camera-to-world [R|t]).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poses: Option<PathBuf>,
}

/// Nominal scanner orbit (before sensor noise).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub radius: f64,
    pub height: f64,
    pub n_frames: usize,
    pub center: [f64; 3],
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            height: 0.40,
            n_frames: 120,
            center: [0.0, 0.0, 0.18],
        }
    }
}

impl TrajectoryConfig {
    pub fn center_point(&self) -> Point3<f64> {
        Point3::new(self.center[0], self.center[1], self.center[2])
    }
}

/// Pinhole depth-camera model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntrinsicsConfig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for IntrinsicsConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            fx: 260.0,
            fy: 260.0,
            cx: 64.0,
            cy: 64.0,
        }
    }
}

impl IntrinsicsConfig {
    pub fn build(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.width, self.height, self.fx, self.fy, self.cx, self.cy)
    }
}

/// Edge-preserving depth pre-filter applied before registration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BilateralConfig {
    /// Spatial falloff, pixels.
    pub sigma_space: f64,
    /// Depth falloff, meters.
    pub sigma_range: f64,
}

impl Default for BilateralConfig {
    fn default() -> Self {
        Self {
            sigma_space: 2.0,
            sigma_range: 0.01,
        }
    }
}

/// Fusion volume geometry and weighting.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsdfConfig {
    pub resolution: [usize; 3],
    /// Sample spacing, meters.
    pub voxel_size: f64,
    /// World position of the lowest-corner sample.
    pub origin: [f64; 3],
    /// Truncation distance in voxels.
    pub trunc_multiple: f64,
    /// Per-voxel weight cap.
    pub w_alpha: f64,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            resolution: [192, 192, 192],
            voxel_size: 0.0035,
            origin: [-0.336, -0.336, -0.10],
            trunc_multiple: 4.0,
            w_alpha: 64.0,
        }
    }
}

impl TsdfConfig {
    pub fn build(&self) -> Result<TsdfVolume> {
        TsdfVolume::new(
            self.resolution,
            self.voxel_size,
            Point3::new(self.origin[0], self.origin[1], self.origin[2]),
            self.trunc_multiple * self.voxel_size,
            self.w_alpha,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.resolution.iter().any(|&r| r < 2) {
            return Err(Error::Config(format!(
                "tsdf.resolution must be at least 2 per axis, got {:?}",
                self.resolution
            )));
        }
        if !(self.voxel_size > 0.0) || !(self.trunc_multiple > 0.0) {
            return Err(Error::Config(
                "tsdf.voxel_size and tsdf.trunc_multiple must be positive".into(),
            ));
        }
        if !(self.w_alpha >= 1.0) {
            return Err(Error::Config(format!(
                "tsdf.w_alpha must be at least 1, got {}",
                self.w_alpha
            )));
        }
        Ok(())
    }
}

/// Source-frame subsampling for registration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Keep every n-th source point when registering a frame (1 = all).
    pub source_stride: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self { source_stride: 4 }
    }
}

/// Blend weights between the registered pose and the sensor readout.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub w_icp: f64,
    pub w_sensor: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            w_icp: 0.8,
            w_sensor: 0.2,
        }
    }
}

/// Which extraction rule isolates the head from the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Subject on a dominant plane: keep points above the plane inside
    /// the prism of the scanner orbit.
    Table,
    /// Seated person: fit a crown plane through the points nearest the
    /// orbit centroid and keep a fixed reach downward.
    Human,
}

impl SelectionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionMode::Table => "table",
            SelectionMode::Human => "human",
        }
    }
}

/// Head-extraction parameters; `dist_thresh` applies to table mode,
/// `k` and `offset_head` to human mode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    /// Table mode: keep points this far above the plane, meters.
    pub dist_thresh: f64,
    /// Human mode: crown neighborhood size.
    pub k: usize,
    /// Human mode: crown-to-chin reach, meters.
    pub offset_head: f64,
    pub ransac_iterations: usize,
    /// Plane inlier distance, meters.
    pub ransac_threshold: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Table,
            dist_thresh: 0.01,
            k: 40,
            offset_head: 0.25,
            ransac_iterations: 200,
            ransac_threshold: 0.01,
        }
    }
}

/// Reference comparison settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Mesh the selected head is measured against.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_mesh: Option<PathBuf>,
    /// Heat-map clamp for the comparison mesh, meters.
    pub color_range_m: f64,
    pub sampling: Sampling,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            reference_mesh: None,
            color_range_m: 0.02,
            sampling: Sampling::Vertices,
        }
    }
}

/// Complete description of one pipeline run. Every stochastic component
/// derives its stream from `seed`, so equal configurations produce
/// byte-identical artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub input: InputConfig,
    pub trajectory: TrajectoryConfig,
    pub intrinsics: IntrinsicsConfig,
    pub noise: SensorNoiseModel,
    pub bilateral: BilateralConfig,
    pub tsdf: TsdfConfig,
    pub icp: IcpParams,
    pub tracking: TrackingConfig,
    pub fusion: FusionConfig,
    pub selection: SelectionConfig,
    pub printer: PrinterVolume,
    pub evaluation: EvaluationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("out"),
            input: InputConfig::default(),
            trajectory: TrajectoryConfig::default(),
            intrinsics: IntrinsicsConfig::default(),
            noise: SensorNoiseModel::default(),
            bilateral: BilateralConfig::default(),
            tsdf: TsdfConfig::default(),
            // Registration starts from the sensor pose, which is accurate
            // to millimeters, so a tight correspondence radius suffices
            // and keeps the neighbor search fast.
            icp: IcpParams {
                max_correspondence_distance: 0.03,
                ..IcpParams::default()
            },
            tracking: TrackingConfig::default(),
            fusion: FusionConfig::default(),
            selection: SelectionConfig::default(),
            printer: PrinterVolume::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML document. Paths are kept as written; use
    /// [`PipelineConfig::from_file`] to resolve them relative to the
    /// config's own directory.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid configuration: {e}")))
    }

    /// Loads, resolves relative paths against the file's directory, and
    /// fully validates (including existence of referenced paths).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::from_toml_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        if let Some(base) = path.parent() {
            cfg.rebase_paths(base);
        }
        cfg.validate_params()?;
        cfg.validate_paths()?;
        Ok(cfg)
    }

    /// Resolves every relative path in the config against `base`.
    pub fn rebase_paths(&mut self, base: &Path) {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.input.mesh.as_mut() {
            rebase(p);
        }
        if let Some(p) = self.input.frames_dir.as_mut() {
            rebase(p);
        }
        if let Some(p) = self.input.poses.as_mut() {
            rebase(p);
        }
        if let Some(p) = self.evaluation.reference_mesh.as_mut() {
            rebase(p);
        }
        rebase(&mut self.output_dir);
    }

    /// Checks every numeric and structural invariant (everything except
    /// the existence of referenced files).
    pub fn validate_params(&self) -> Result<()> {
        if self.input.mesh.is_none() && self.input.frames_dir.is_none() {
            return Err(Error::Config(
                "input requires either a mesh to simulate or a recorded frames_dir".into(),
            ));
        }
        if self.input.frames_dir.is_some() && self.input.poses.is_none() {
            return Err(Error::Config(
                "input.frames_dir requires input.poses (the sensor-pose file)".into(),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        let t = &self.trajectory;
        if !(t.radius > 0.0) || !t.radius.is_finite() {
            return Err(Error::Config(format!(
                "trajectory.radius must be positive, got {}",
                t.radius
            )));
        }
        if t.n_frames < 2 {
            return Err(Error::Config(format!(
                "trajectory.n_frames must be at least 2, got {}",
                t.n_frames
            )));
        }
        if !t.height.is_finite() || t.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("trajectory height/center must be finite".into()));
        }
        self.intrinsics.build().map_err(|e| Error::Config(e.to_string()))?;
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.bilateral.sigma_space > 0.0) || !(self.bilateral.sigma_range > 0.0) {
            return Err(Error::Config("bilateral sigmas must be positive".into()));
        }
        self.tsdf.validate()?;
        self.icp.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.tracking.source_stride == 0 {
            return Err(Error::Config("tracking.source_stride must be at least 1".into()));
        }
        let f = &self.fusion;
        if f.w_icp < 0.0 || f.w_sensor < 0.0 || (f.w_icp + f.w_sensor - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "fusion weights must be non-negative and sum to 1 (got {} + {})",
                f.w_icp, f.w_sensor
            )));
        }
        let s = &self.selection;
        if !(s.dist_thresh > 0.0) {
            return Err(Error::Config(format!(
                "selection.dist_thresh must be positive, got {}",
                s.dist_thresh
            )));
        }
        if s.k == 0 || !(s.offset_head > 0.0) {
            return Err(Error::Config(
                "selection.k must be at least 1 and selection.offset_head positive".into(),
            ));
        }
        if s.ransac_iterations == 0 || !(s.ransac_threshold > 0.0) {
            return Err(Error::Config(
                "selection.ransac_iterations and ransac_threshold must be positive".into(),
            ));
        }
        self.printer.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.evaluation.color_range_m > 0.0) {
            return Err(Error::Config(format!(
                "evaluation.color_range_m must be positive, got {}",
                self.evaluation.color_range_m
            )));
        }
        Ok(())
    }

    /// Checks that every referenced input path exists.
    pub fn validate_paths(&self) -> Result<()> {
        let check = |label: &str, path: &Option<PathBuf>| -> Result<()> {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{label} path does not exist: {}",
                        p.display()
                    )));
                }
            }
            Ok(())
        };
        check("input.mesh", &self.input.mesh)?;
        check("input.frames_dir", &self.input.frames_dir)?;
        check("input.poses", &self.input.poses)?;
        check("evaluation.reference_mesh", &self.evaluation.reference_mesh)?;
        Ok(())
    }

    /// Both validation halves.
    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        self.validate_paths()
    }

    fn track_params(&self) -> TrackParams {
        TrackParams {
            icp: self.icp,
            w_icp: self.fusion.w_icp,
            w_sensor: self.fusion.w_sensor,
            bilateral_sigma_space: self.bilateral.sigma_space,
            bilateral_sigma_range: self.bilateral.sigma_range,
            source_stride: self.tracking.source_stride,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Frame directory and sensor-pose file the reconstruction reads:
    /// the recorded input when configured, otherwise the simulator's
    /// output inside this run's output directory.
    pub fn scan_source(&self) -> (PathBuf, PathBuf) {
        match (&self.input.frames_dir, &self.input.poses) {
            (Some(dir), Some(poses)) => (dir.clone(), poses.clone()),
            _ => (self.out(artifact::FRAMES_DIR), self.out(artifact::POSES_SENSOR)),
        }
    }
}

/// Annotated configuration template with every default filled in.
pub fn template_toml() -> &'static str {
    r#"# headscan pipeline configuration.
# Relative paths are resolved against this file's directory.

# Master random seed. Every stochastic component (depth noise, pose
# perturbation, plane-fit sampling) derives its own stream from this
# value, so equal seeds give byte-identical artifacts.
seed = 7

# All artifacts are written here.
output_dir = "out"

[input]
# Ground-truth scene mesh the simulator scans (.obj, .stl, or .ply).
mesh = "scene.obj"
# To reconstruct a recorded scan instead, remove `mesh` and point
# `frames_dir` at a directory of depth_XXXXX.d16 frames and `poses` at
# the matching sensor-pose file (12 numbers per line, row-major
# camera-to-world [R|t]).
#frames_dir = "scan"
#poses = "scan/poses.txt"

[trajectory]
# Scanner orbit: a horizontal circle of `radius` meters about the
# vertical axis through `center`, at absolute height `height`, with
# `n_frames` evenly spaced poses aimed at `center`.
radius = 1.0
height = 0.40
n_frames = 120
center = [0.0, 0.0, 0.18]

[intrinsics]
# Pinhole depth-camera model (pixels).
width = 128
height = 128
fx = 260.0
fy = 260.0
cx = 64.0
cy = 64.0

[noise]
# Sensor imperfections; set everything to zero for an ideal scan.
depth_sigma = 0.002        # per-pixel Gaussian depth error, meters
depth_dropout = 0.005      # probability a pixel returns nothing
angle_sigma_deg = 0.01     # reported-orientation error, degrees
translation_sigma = 0.002  # reported-position error per axis, meters

[bilateral]
# Edge-preserving depth pre-filter used by tracking.
sigma_space = 2.0   # spatial falloff, pixels
sigma_range = 0.01  # depth falloff, meters

[tsdf]
# Fusion volume: resolution[i] samples along each axis, spaced
# voxel_size meters, anchored at `origin` (the lowest-corner sample).
resolution = [192, 192, 192]
voxel_size = 0.0035
origin = [-0.336, -0.336, -0.10]
trunc_multiple = 4.0  # truncation distance, in voxels
w_alpha = 64.0        # per-voxel weight cap

[icp]
max_iterations = 30
max_correspondence_distance = 0.03  # meters
max_normal_angle_deg = 30.0
convergence_threshold = 1e-6

[tracking]
# Keep every n-th source point when registering a frame (1 = all).
source_stride = 4

[fusion]
# Blend of the registered pose with the reported sensor pose. The
# weights must sum to 1.
w_icp = 0.8
w_sensor = 0.2

[selection]
# "table": find the dominant plane, then keep points above it inside
# the prism of the scanner orbit. "human": fit a crown plane through
# the k points nearest the orbit centroid and keep `offset_head`
# meters downward.
mode = "table"
dist_thresh = 0.01   # table mode: clearance above the plane, meters
k = 40               # human mode: crown neighborhood size
offset_head = 0.25   # human mode: crown-to-chin reach, meters
ransac_iterations = 200
ransac_threshold = 0.01  # plane inlier distance, meters

[printer]
# Build volume, meters (x and y span the plate, z is the height).
x = 0.254
y = 0.254
z = 0.305

[evaluation]
# Reference mesh the selected head is compared against.
reference_mesh = "head.obj"
color_range_m = 0.02   # heat-map clamp for comparison.ply, meters
sampling = "Vertices"  # or { AreaUniform = { samples = 10000, seed = 0 } }
"#
}

/// Outcome of one pipeline stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub name: &'static str,
    pub seconds: f64,
    /// Deterministic one-line summary (echoed into the manifest).
    pub detail: String,
    /// Artifact file names written, relative to the output directory.
    pub artifacts: Vec<String>,
}

fn append_timing(cfg: &PipelineConfig, line: &str) -> Result<()> {
    let path = cfg.out(artifact::TIMINGS);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
}

fn finish_stage(
    cfg: &PipelineConfig,
    name: &'static str,
    started: Instant,
    detail: String,
    artifacts: Vec<String>,
    timing_note: Option<String>,
) -> Result<StageReport> {
    let seconds = started.elapsed().as_secs_f64();
    let mut line = format!("{name}: {seconds:.3} s");
    if let Some(note) = timing_note {
        line.push_str(&format!(" ({note})"));
    }
    append_timing(cfg, &line)?;
    Ok(StageReport {
        name,
        seconds,
        detail,
        artifacts,
    })
}

fn ensure_output_dir(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))
}

/// Renders the configured trajectory against the ground-truth mesh and
/// writes the depth frames, the true poses, and the noisy sensor poses.
pub fn stage_simulate(cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    ensure_output_dir(cfg)?;
    let mesh_path = cfg.input.mesh.as_ref().ok_or_else(|| {
        Error::Config("simulate requires input.mesh (a ground-truth scene)".into())
    })?;
    let mesh = read_mesh(mesh_path)?;
    let k = cfg.intrinsics.build()?;
    let t = &cfg.trajectory;
    let truth = circular_trajectory(t.center_point(), t.radius, t.height, t.n_frames)?;
    let sensor = perturb_poses(
        &truth,
        &cfg.noise.with_seed(derive_seed(cfg.seed, TAG_POSES)),
    )?;

    let renderer = DepthRenderer::new(&mesh)?;
    let render_base = derive_seed(cfg.seed, TAG_RENDER);
    let mut frames = Vec::with_capacity(truth.len());
    for (i, pose) in truth.poses.iter().enumerate() {
        let frame_noise = cfg.noise.with_seed(derive_seed(render_base, i as u64));
        frames.push(renderer.render(pose, &k, &frame_noise)?);
    }
    write_frames(&frames, &cfg.out(artifact::FRAMES_DIR))?;
    write_poses(&truth.poses, &cfg.out(artifact::POSES_TRUTH))?;
    write_poses(&sensor.poses, &cfg.out(artifact::POSES_SENSOR))?;

    let valid: usize = frames.iter().map(|f| f.valid_count()).sum();
    finish_stage(
        cfg,
        "simulate",
        started,
        format!(
            "rendered {} frames at {}x{} ({} valid depth samples)",
            frames.len(),
            k.width,
            k.height,
            valid
        ),
        vec![
            artifact::FRAMES_DIR.into(),
            artifact::POSES_TRUTH.into(),
            artifact::POSES_SENSOR.into(),
        ],
        None,
    )
}

/// Fuses the scan into the TSDF volume with frame-to-model tracking and
/// extracts the raw isosurface.
pub fn stage_reconstruct(cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    ensure_output_dir(cfg)?;
    let k = cfg.intrinsics.build()?;
    let (frames_dir, poses_path) = cfg.scan_source();
    let files = list_frame_files(&frames_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no depth frames found in {}",
            frames_dir.display()
        )));
    }
    let sensor_poses = read_poses(&poses_path)?;
    if sensor_poses.len() != files.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sensor poses for {} depth frames",
            sensor_poses.len(),
            files.len()
        )));
    }

    let mut volume = cfg.tsdf.build()?;
    let track = cfg.track_params();
    let total = files.len();
    let mut estimated: Vec<RigidTransform> = Vec::with_capacity(total);
    let mut lost = 0usize;
    let mut degenerate = 0usize;
    for (i, file) in files.iter().enumerate() {
        let frame = read_depth_frame(file)?;
        let sensor = sensor_poses[i];
        let pose = if i == 0 {
            // Nothing to track against yet; the sensor pose anchors the map.
            sensor
        } else {
            // Predict the model surface from the sensor pose (accurate to
            // millimeters), register the frame against it, and fuse.
            let prediction = volume.raycast(&k, &sensor)?;
            if prediction.is_empty() {
                lost += 1;
                sensor
            } else {
                let result = track_frame(&frame, &prediction, &sensor, &sensor, &k, &track)?;
                if !result.converged {
                    lost += 1;
                }
                if result.degenerate {
                    degenerate += 1;
                }
                result.transform
            }
        };
        if lost * 5 > total {
            return Err(Error::TrackingLoss {
                lost,
                total,
                limit_pct: 20,
            });
        }
        // The unfiltered frame is integrated; smoothing only guides
        // registration. Per-pixel incidence weighting was measured to
        // hurt here: the crown and chin are seen at grazing angles from
        // every orbit position, so down-weighting those pixels starves
        // the only evidence for them.
        volume.integrate(&frame, &k, &pose, 1.0)?;
        estimated.push(pose);
    }
    write_poses(&estimated, &cfg.out(artifact::POSES_ESTIMATED))?;

    let mesh = marching_cubes(&volume, 0.0)?;
    if mesh.is_empty() {
        return Err(Error::Degenerate(
            "reconstruction produced an empty surface".into(),
        ));
    }
    write_ply(&mesh, &cfg.out(artifact::RECON_RAW))?;

    let seconds = started.elapsed().as_secs_f64();
    let fps = total as f64 / seconds.max(1e-9);
    finish_stage(
        cfg,
        "reconstruct",
        started,
        format!(
            "fused {} frames ({} lost, {} degenerate); surface has {} vertices, {} faces",
            total,
            lost,
            degenerate,
            mesh.vertices.len(),
            mesh.faces.len()
        ),
        vec![artifact::POSES_ESTIMATED.into(), artifact::RECON_RAW.into()],
        Some(format!("{total} frames, {fps:.2} frames/s")),
    )
}

/// Isolates the head from the raw reconstruction using the configured
/// extraction rule and the estimated camera poses.
pub fn stage_select(cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    ensure_output_dir(cfg)?;
    let mesh = read_ply(&cfg.out(artifact::RECON_RAW))?;
    let poses = read_poses(&cfg.out(artifact::POSES_ESTIMATED))?;
    let cloud = PointCloud::from_points(mesh.vertices.clone());
    let s = &cfg.selection;
    let indices = match s.mode {
        SelectionMode::Table => {
            let params = RansacParams {
                iterations: s.ransac_iterations,
                inlier_threshold: s.ransac_threshold,
                seed: derive_seed(cfg.seed, TAG_RANSAC),
            };
            let fit = ransac_plane(&cloud.points, &params)?;
            select_head_on_table_indices(&cloud, &fit.plane, &fit.inliers, &poses, s.dist_thresh)?
        }
        SelectionMode::Human => select_human_head_indices(&cloud, &poses, s.k, s.offset_head)?,
    };
    let selected = mesh.submesh(&indices)?;
    if selected.is_empty() {
        return Err(Error::EmptySelection(
            "head selection kept vertices but no complete face".into(),
        ));
    }
    write_ply(&selected, &cfg.out(artifact::SELECTED_HEAD))?;
    finish_stage(
        cfg,
        "select",
        started,
        format!(
            "{} mode kept {} of {} vertices, {} of {} faces",
            s.mode.as_str(),
            selected.vertices.len(),
            mesh.vertices.len(),
            selected.faces.len(),
            mesh.faces.len()
        ),
        vec![artifact::SELECTED_HEAD.into()],
        None,
    )
}

/// Scales the selected head to the printer's build volume and rests it
/// centered on the build plate.
pub fn stage_scale(cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    ensure_output_dir(cfg)?;
    let mesh = read_ply(&cfg.out(artifact::SELECTED_HEAD))?;
    let poses = read_poses(&cfg.out(artifact::POSES_ESTIMATED))?;
    let loop_diameter = compute_loop_diameter(&poses)?;
    let factor = scale_factor(&cfg.printer, loop_diameter)?;
    let scaled = scale_mesh(&mesh, factor, &cfg.printer)?;
    write_ply(&scaled, &cfg.out(artifact::SCALED_MODEL))?;
    finish_stage(
        cfg,
        "scale",
        started,
        format!("loop diameter {loop_diameter:.6} m, scale factor {factor:.6}"),
        vec![artifact::SCALED_MODEL.into()],
        None,
    )
}

/// Writes the print-ready binary STL.
pub fn stage_export(cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    ensure_output_dir(cfg)?;
    let mesh = read_ply(&cfg.out(artifact::SCALED_MODEL))?;
    let path = cfg.out(artifact::PRINT_MODEL);
    write_stl(&mesh, &path)?;
    let bytes = 84 + 50 * mesh.faces.len();
    finish_stage(
        cfg,
        "export",
        started,
        format!("wrote {} triangles ({bytes} bytes)", mesh.faces.len()),
        vec![artifact::PRINT_MODEL.into()],
        None,
    )
}

/// Measures the selected head against the reference mesh, writing the
/// distance report and a heat-map-colored comparison mesh.
pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<StageReport> {
    let started = Instant::now();
    ensure_output_dir(cfg)?;
    let reference_path = cfg.evaluation.reference_mesh.as_ref().ok_or_else(|| {
        Error::Config("evaluate requires evaluation.reference_mesh".into())
    })?;
    let reference = read_mesh(reference_path)?;
    let selected = read_ply(&cfg.out(artifact::SELECTED_HEAD))?;
    let report = hausdorff_report(&reference, &selected, &cfg.evaluation.sampling)?;

    let vertex_distances = directed_distances(&selected, &reference, &Sampling::Vertices)?;
    let colored = colorize_by_distance(&selected, &vertex_distances, cfg.evaluation.color_range_m)?;
    write_ply(&colored, &cfg.out(artifact::COMPARISON))?;

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("could not serialize report: {e}")))?;
    let report_path = cfg.out(artifact::REPORT);
    fs::write(&report_path, json + "\n").map_err(|e| Error::io(&report_path, e))?;

    finish_stage(
        cfg,
        "evaluate",
        started,
        format!(
            "symmetric rms {:.4} cm ({:.4}% of the {:.4} m reference diagonal)",
            report.symmetric.rms_cm, report.symmetric.rms_bbox_pct, report.bbox_diagonal_m
        ),
        vec![artifact::COMPARISON.into(), artifact::REPORT.into()],
        None,
    )
}

#[derive(Serialize)]
struct ManifestStage<'a> {
    name: &'a str,
    detail: &'a str,
    artifacts: &'a [String],
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<StageReport>,
}

/// Runs every applicable stage in order: simulate (skipped for recorded
/// scans), reconstruct, select, scale, export, and evaluate (skipped
/// when no reference mesh is configured). Writes the deterministic run
/// manifest and the wall-clock timing log.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let timings = cfg.out(artifact::TIMINGS);
    if timings.exists() {
        fs::remove_file(&timings).map_err(|e| Error::io(&timings, e))?;
    }

    let mut stages = Vec::new();
    if cfg.input.frames_dir.is_none() {
        stages.push(stage_simulate(cfg).map_err(|e| Error::stage("simulate", e))?);
    }
    stages.push(stage_reconstruct(cfg).map_err(|e| Error::stage("reconstruct", e))?);
    stages.push(stage_select(cfg).map_err(|e| Error::stage("select", e))?);
    stages.push(stage_scale(cfg).map_err(|e| Error::stage("scale", e))?);
    stages.push(stage_export(cfg).map_err(|e| Error::stage("export", e))?);
    if cfg.evaluation.reference_mesh.is_some() {
        stages.push(stage_evaluate(cfg).map_err(|e| Error::stage("evaluate", e))?);
    }

    let manifest = serde_json::json!({
        "config": cfg,
        "stages": stages
            .iter()
            .map(|s| ManifestStage {
                name: s.name,
                detail: &s.detail,
                artifacts: &s.artifacts,
            })
            .map(|s| serde_json::to_value(s).expect("stage summary serializes"))
            .collect::<Vec<_>>(),
        "timing_log": artifact::TIMINGS,
    });
    let manifest_path = cfg.out(artifact::MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::InvalidInput(format!("could not serialize manifest: {e}")))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    Ok(RunSummary { stages })
}

/// Paths of the files written by [`write_demo_scene`].
#[derive(Debug, Clone)]
pub struct DemoScene {
    pub head: PathBuf,
    pub scene: PathBuf,
    pub config: PathBuf,
}

/// Writes a ready-to-run example into `dir`: a procedural head mesh
/// (the reconstruction reference), the same head on a tabletop (the
/// scanned scene), and a config wired to them.
pub fn write_demo_scene(dir: &Path) -> Result<DemoScene> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let center = TrajectoryConfig::default().center_point();
    let head_mesh = head(center, &HeadParams::default(), 64, 49)?;
    let table = table_mesh(Point3::new(0.0, 0.0, 0.0), 1.2, 1.2);
    let scene_mesh = TriangleMesh::merged(&[&head_mesh, &table]);

    let head_path = dir.join("head.obj");
    let scene_path = dir.join("scene.obj");
    write_obj(&head_mesh, &head_path)?;
    write_obj(&scene_mesh, &scene_path)?;

    let mut cfg = PipelineConfig::default();
    cfg.input.mesh = Some(PathBuf::from("scene.obj"));
    cfg.evaluation.reference_mesh = Some(PathBuf::from("head.obj"));
    let config_path = dir.join("config.toml");
    let text = toml::to_string_pretty(&cfg)
        .map_err(|e| Error::Config(format!("could not serialize demo config: {e}")))?;
    fs::write(&config_path, text).map_err(|e| Error::io(&config_path, e))?;

    Ok(DemoScene {
        head: head_path,
        scene: scene_path,
        config: config_path,
    })
}

/// Horizontal two-triangle rectangle centered at `center`, facing +z.
pub fn table_mesh(center: Point3<f64>, x_size: f64, y_size: f64) -> TriangleMesh {
    let hx = x_size / 2.0;
    let hy = y_size / 2.0;
    let vertices = vec![
        Point3::new(center.x - hx, center.y - hy, center.z),
        Point3::new(center.x + hx, center.y - hy, center.z),
        Point3::new(center.x + hx, center.y + hy, center.z),
        Point3::new(center.x - hx, center.y + hy, center.z),
    ];
    let faces = vec![[0, 1, 2], [0, 2, 3]];
    TriangleMesh::new(vertices, faces).expect("static quad is valid")
}
