//! Ground removal, farthest point sampling and pillarization.

mod fps;
mod ground;
mod pillar;

pub use fps::farthest_point_sample;
pub use ground::{ransac_ground_plane, remove_ground, PlaneModel};
pub use pillar::{gather, pillarize, scatter, PillarGridConfig, PillarSet, DECORATED_FEATURES};

#[derive(Debug, thiserror::Error)]
pub enum PreprocessError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("no non-degenerate plane hypothesis found")]
    NoPlane,
    #[error("cannot sample {k} of {n} points")]
    InvalidSampleCount { k: usize, n: usize },
    #[error("invalid pillar grid: {0}")]
    InvalidConfig(String),
    #[error("two pillars map to cell ({row}, {col})")]
    DuplicateCoord { row: usize, col: usize },
    #[error("cell ({row}, {col}) outside {height}×{width} grid")]
    CoordOutOfRange { row: usize, col: usize, height: usize, width: usize },
    #[error("shape error: {0}")]
    Shape(String),
}
