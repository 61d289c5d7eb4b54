pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod kg;
pub mod metrics;
pub mod params;
pub mod ppt;
pub mod pretrain;
pub mod rec;
pub mod text;

pub use error::{Error, Result};
