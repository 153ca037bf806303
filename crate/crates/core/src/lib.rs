pub mod adapt;
pub mod backbone;
pub mod cmsa;
pub mod data;
pub mod diagnose;
pub mod error;
pub mod eval;
pub mod moda;
pub mod numerics;
pub mod pipeline;
pub mod recsys;
pub mod store;

pub use backbone::Modality;
pub use error::{Result, SdaError};
