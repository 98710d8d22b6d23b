pub mod error;
pub mod eval;
pub mod filters;
pub mod interface;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod prompts;
pub mod seeding;
pub mod synth;
pub mod training;
pub mod vgrid;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, Grid, LogitMap, Shape3, Volume};
