//! Scan-to-print 3D head reconstruction.
//!
//! The crate covers the full software chain of an orbiting-depth-scanner
//! head digitization rig: synthetic depth rendering with a sensor noise
//! model, bilateral depth filtering, point-to-plane ICP fused with
//! motion-sensor poses, weighted TSDF integration with ray-cast surface
//! prediction, marching-cubes meshing, automatic head selection via
//! RANSAC plane fitting and prism extraction, printer-volume scaling with
//! STL export, and two-sided Hausdorff evaluation of the result.
//!
//! Modules map onto the pipeline stages; [`pipeline`] orchestrates them
//! end to end behind a file-based stage protocol shared with the CLI.

pub mod bilateral;
pub mod bvh;
pub mod evaluation;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod linalg;
pub mod meshing;
pub mod pipeline;
pub mod procedural;
pub mod scale;
pub mod scanner;
pub mod segmentation;
pub mod tsdf;

mod mc_tables;

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to name the
/// offending input; the CLI maps pipeline stages onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tracking lost on {lost} of {total} frames (limit {limit_pct}%)")]
    TrackingLoss {
        lost: usize,
        total: usize,
        limit_pct: u32,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("could not parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn stage(stage: &'static str, source: Error) -> Self {
        Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
