pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod ingest;
pub mod network;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod segmenter;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Mask, Spacing, VolumeGrid};
