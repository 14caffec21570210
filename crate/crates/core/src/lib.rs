//! Real-time open-vocabulary detection with an efficient language-aware
//! fusion head, built on the framework-free `efh-numcore` tensor crate.
//!
//! The crate is organized as the inference pipeline runs: [`textenc`]
//! encodes labels and prompts (optionally through a [`textenc::LanguageCache`]),
//! [`backbone`] produces a three-scale pyramid, [`encoder`] fuses it and
//! selects query proposals, and [`decoder`] refines them into detections.
//! [`training`] holds matching, losses, data and the optimizer; [`bench`]
//! times the four inference stages. See `examples/` for runnable tours.

pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod params;
pub mod textenc;
pub mod training;

pub use backbone::Image;
pub use config::ModelConfig;
pub use decoder::{Detection, DetectionSet};
pub use error::{Error, Result};
pub use model::Detector;
pub use params::{ParamStore, Session};
pub use textenc::LanguageCache;
