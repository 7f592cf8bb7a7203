pub mod datamodel;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod explain;
pub mod finetune;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod pretrain;
pub mod rng;
pub mod sampleaug;
pub mod synthgen;
pub mod video;

pub use error::{Error, Result};
