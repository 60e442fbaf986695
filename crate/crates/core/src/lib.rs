pub mod backbone_fpn;
pub mod cli;
pub mod config;
pub mod detection_head;
pub mod error;
pub mod geometry;
pub mod io;
pub mod mask;
pub mod mask_head;
pub mod model;
pub mod nn;
pub mod synthetic_video;
pub mod tracking_head;
pub mod trainer;
pub mod vis_eval;

pub use error::{Error, Result};
