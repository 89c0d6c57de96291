pub mod data;
pub mod decoder;
pub mod dyn_stage;
pub mod dynamics;
pub mod error;
pub mod features;
pub mod interaction;
pub mod metrics;
pub mod model;
pub mod numkernel;
pub mod train;
pub mod verify;

pub use error::ModelError;
