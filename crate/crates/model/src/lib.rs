pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod features;
pub mod inference;
pub mod lm;
pub mod params;
pub mod sap;
pub mod scorer;
pub mod templates;
pub mod training;

pub use error::{ModelError, Result};
