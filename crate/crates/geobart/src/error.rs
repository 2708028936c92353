//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped
//! roughly by subsystem: data loading, mesh/FEM construction, linear algebra,
//! and sampling/prediction plumbing.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A required CSV column is missing from the header.
    #[error("missing column `{0}` in input file")]
    MissingColumn(String),

    /// A non-finite (NaN/inf) value was found where a finite number is required.
    #[error("non-finite value in {context} (row {row})")]
    NonFinite { context: String, row: usize },

    /// Rows of one cluster disagree on coordinates or covariate values.
    #[error("cluster `{cluster}` has inconsistent {what} across rows")]
    InconsistentCluster { cluster: String, what: String },

    /// A dataset, grid, or region file is structurally empty.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Vector/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A matrix that must be symmetric positive definite failed factorization,
    /// even after the jitter ladder.
    #[error("matrix not positive definite ({0})")]
    NotPositiveDefinite(String),

    /// A linear system is singular or numerically rank deficient.
    #[error("singular system: {0}")]
    SingularSystem(String),

    /// A point falls outside the triangulation when projecting onto the mesh.
    #[error("location ({x}, {y}) lies outside the mesh")]
    LocationOutsideMesh { x: f64, y: f64 },

    /// A mesh triangle degenerated to zero area.
    #[error("degenerate triangle in mesh (index {0})")]
    DegenerateTriangle(usize),

    /// An invalid or inconsistent configuration value.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A region with zero total density cannot be aggregated.
    #[error("region `{0}` has zero total density")]
    ZeroDensityRegion(String),

    /// Scenario/simulation parameters out of range.
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    /// Checkpoint/manifest contents do not match the requested resume.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
