//! Configuration, weight archives, dataset files and mask output.

pub mod archive;
pub mod config;
pub mod dataset;
pub mod masks;

pub use archive::{load_weights, save_weights};
pub use config::{load_config, parse_config, parse_schedule_arg, RunConfig};
pub use dataset::{load_split, load_split_manifest, save_split};
pub use masks::{write_masks, MaskRecorder};
