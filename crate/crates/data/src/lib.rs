//! Procedural RGB-D scenes with transparent objects whose sensor depth is
//! either missing or replaced by the surface behind them, plus the raster
//! formats used to store them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod io;
pub mod sample;
pub mod synth;

pub use dataset::{generate, list_scenes, load_dataset, scene_seed, write_dataset};
pub use error::{DataError, Result};
pub use sample::Sample;
pub use synth::{render, random_scene, Corruption, Object, SceneSpec, Shape};
