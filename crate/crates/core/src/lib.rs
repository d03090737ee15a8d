pub mod alignment;
pub mod autodiff;
pub mod bridge;
pub mod data;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod zeroshot;

pub use error::{Error, ErrorKind, Result};
