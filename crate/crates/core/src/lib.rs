pub mod dataset;
pub mod ensemble_eval;
pub mod error;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod sampling;
pub mod seed;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{load_volume, save_volume, PatchSize, Volume};
