pub mod augment;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod objectives;
pub mod patch_ops;
pub mod patchmix;
pub mod trainer;

pub use error::{Error, Result};
