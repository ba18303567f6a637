use std::fs;
use std::path::Path;

use crate::error::{DataError, Result};
use crate::io;

pub const RGB_FILE: &str = "rgb.ppm";
pub const RAW_FILE: &str = "depth_raw.f32r";
pub const GT_FILE: &str = "depth_gt.f32r";
pub const MASK_FILE: &str = "mask.u8r";

/// One RGB-D frame with its reference depth and transparency mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    /// Sensor depth in metres; corrupted on masked pixels.
    pub depth_raw: Vec<f32>,
    /// Reference depth in metres.
    pub depth_gt: Vec<f32>,
    /// 1 on transparent or reflective pixels, 0 elsewhere.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Checks the generator contract: reference depth is positive and
    /// finite, sensor depth differs from it only on the mask, and there it
    /// is either missing or further away.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let n = self.pixels();
        if self.rgb.len() != 3 * n || self.depth_raw.len() != n || self.depth_gt.len() != n || self.mask.len() != n {
            return Err("buffer sizes do not match the raster extent".into());
        }
        for i in 0..n {
            let (raw, gt, m) = (self.depth_raw[i], self.depth_gt[i], self.mask[i]);
            if !(gt.is_finite() && gt > 0.0) {
                return Err(format!("pixel {i}: reference depth {gt} is not positive"));
            }
            match m {
                0 if raw.to_bits() != gt.to_bits() => {
                    return Err(format!("pixel {i}: unmasked sensor depth {raw} differs from {gt}"))
                }
                1 if !(raw == 0.0 || raw >= gt) => {
                    return Err(format!("pixel {i}: masked sensor depth {raw} is in front of {gt}"))
                }
                0 | 1 => {}
                other => return Err(format!("pixel {i}: mask value {other}")),
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        let (h, w) = (self.height, self.width);
        io::write_ppm(&dir.join(RGB_FILE), h, w, &self.rgb)?;
        io::write_f32r(&dir.join(RAW_FILE), h, w, &self.depth_raw)?;
        io::write_f32r(&dir.join(GT_FILE), h, w, &self.depth_gt)?;
        io::write_u8r1(&dir.join(MASK_FILE), h, w, &self.mask)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let rgb = io::read_ppm(&dir.join(RGB_FILE))?;
        let raw = io::read_f32r(&dir.join(RAW_FILE))?;
        let gt = io::read_f32r(&dir.join(GT_FILE))?;
        let mask = io::read_u8r1(&dir.join(MASK_FILE))?;
        let dims = (rgb.height, rgb.width);
        for (name, d) in [(RAW_FILE, (raw.height, raw.width)), (GT_FILE, (gt.height, gt.width)), (MASK_FILE, (mask.height, mask.width))] {
            if d != dims {
                return Err(DataError::Header {
                    path: dir.join(name),
                    msg: format!("{}×{} does not match the {}×{} image", d.0, d.1, dims.0, dims.1),
                });
            }
        }
        Ok(Sample {
            height: dims.0,
            width: dims.1,
            rgb: rgb.data,
            depth_raw: raw.data,
            depth_gt: gt.data,
            mask: mask.data,
        })
    }
}
