//! Desk-scale testbed for indirect obstacle manipulation on a granular
//! slope: a mass-conserving avalanche simulator, the aligned image
//! observations it feeds to a learned one-step dynamics model, and greedy
//! excavation planners evaluated against a non-learning baseline.

pub mod error;
pub mod experiments;
pub mod geom;
pub mod grid;
pub mod imaging;
pub mod model;
pub mod planner;
pub mod sim;

pub use error::{Error, Result};
pub use geom::Vec2;
