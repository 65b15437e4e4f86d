pub mod conditioner;
pub mod diffgraph;
pub mod error;
pub mod flow;
pub mod stablemath;
pub mod targets;
pub mod training;
pub mod transformer;
pub mod universal;

pub use error::{Error, Result};
