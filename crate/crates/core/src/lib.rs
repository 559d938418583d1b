pub mod adapt;
pub mod backbone;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod feature_store;
pub mod label;
pub mod losses;
pub mod optim;

pub use error::{Error, Result};
pub use label::Label;
