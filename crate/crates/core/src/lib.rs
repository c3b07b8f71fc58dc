pub mod datagen;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eventfusion;
pub mod harness;
pub mod hybformer;
pub mod layers;

pub use error::{CoreError, Result};
