pub mod anchors;
pub mod belief;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod numerics;
pub mod oracle;
pub mod pipeline;
pub mod simulator;
pub mod training;

pub use error::{LadError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
