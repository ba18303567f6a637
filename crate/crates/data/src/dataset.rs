//! Deterministic scene sequences.
//!
//! Scene `i` of a dataset with seed `s` is drawn from ChaCha8 seeded with
//! `s` on stream `i`, so every sample can be produced independently and the
//! sequence is identical on every platform.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DataError, Result};
use crate::sample::Sample;
use crate::synth::{random_scene, render};

/// Generator state for scene `index` of the dataset `seed`.
pub fn scene_seed(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Renders scene `index`, redrawing until at least one transparent pixel is
/// visible.
pub fn generate_one(seed: u64, index: usize, size: usize) -> Result<Sample> {
    let mut rng = scene_seed(seed, index);
    loop {
        let sample = render(&random_scene(&mut rng, size, size))?;
        if sample.mask.contains(&1) {
            return Ok(sample);
        }
    }
}

/// `count` square samples of side `size`, in index order.
pub fn generate(seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    (0..count).into_par_iter().map(|i| generate_one(seed, i, size)).collect()
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:06}"))
}

pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    samples
        .iter()
        .enumerate()
        .try_for_each(|(i, s)| s.write(&scene_dir(root, i)))
}

/// Scene directories under `root`, sorted by name.
pub fn list_scenes(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| DataError::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| DataError::io(root, e))?;
        let path = entry.path();
        let is_scene = entry.file_name().to_string_lossy().starts_with("scene_");
        if is_scene && path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let dirs = list_scenes(root)?;
    if dirs.is_empty() {
        return Err(DataError::Io {
            path: root.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no scene_* directories"),
        });
    }
    dirs.par_iter().map(|d| Sample::read(d)).collect()
}
