use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value or malformed config file.
    #[error("config error: {0}")]
    Config(String),

    /// An excavation action that cannot be applied (e.g. footprint fully
    /// outside the grid, or a center that maps outside the image).
    #[error("invalid action: {0}")]
    InvalidAction(String),

    /// Cell index outside the heightfield.
    #[error("cell ({row}, {col}) out of bounds for {rows}x{cols} grid")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    /// Two grids that must be aligned have different dimensions.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An obstacle id that is not present in the scene.
    #[error("unknown obstacle id {0}")]
    UnknownObstacle(u32),

    /// Unit direction requested for coincident points.
    #[error("degenerate direction: obstacle is exactly at its target")]
    DegenerateDirection,

    /// Relaxation failed to settle within the sweep cap.
    #[error("relaxation diverged: {0}")]
    Divergence(String),

    /// Non-finite value produced during training or inference.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed dataset or model file.
    #[error("format error: {0}")]
    Format(String),

    /// Planner was asked to act with every obstacle already at its target.
    #[error("nothing to do: all obstacles are at their targets")]
    NothingToDo,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
