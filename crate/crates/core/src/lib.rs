pub mod checkpoint;
pub mod datagen;
pub mod dhnm;
pub mod diffengine;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod losses;
pub mod pipeline;
pub mod maskschedule;

pub use error::{Error, Result};
