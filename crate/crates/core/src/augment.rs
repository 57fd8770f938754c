//! Seeded per-epoch augmentation of composite/mask tiles: horizontal flips,
//! brightness/contrast jitter, and Gaussian noise.

use crate::error::{Error, Result};
use crate::numeric::mix_key;
use crate::preprocess::Tile;
use crate::raster::{ClassMask, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Augmentation settings; `seed` combines with (epoch, tile_id) to derive
/// one independent stream per tile per epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub brightness_contrast_limit: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if self.brightness_contrast_limit < 0.0 {
            return Err(Error::Config("brightness/contrast limit must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.noise_std) {
            return Err(Error::Config(format!(
                "noise std {} outside [0, 1)",
                self.noise_std
            )));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            brightness_contrast_limit: 0.10,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// Mirror a composite and its mask about the vertical axis.
pub fn hflip(composite: &Raster, mask: &ClassMask) -> Result<(Raster, ClassMask)> {
    if composite.width() != mask.width() || composite.height() != mask.height() {
        return Err(Error::Shape(format!(
            "composite {}x{} vs mask {}x{}",
            composite.height(),
            composite.width(),
            mask.height(),
            mask.width()
        )));
    }
    let (w, h, bands) = (composite.width(), composite.height(), composite.bands());
    let src = composite
        .as_f32()
        .ok_or_else(|| Error::Shape("composite must be float32".into()))?;
    let mut data = vec![0f32; src.len()];
    for b in 0..bands {
        for r in 0..h {
            for c in 0..w {
                data[(b * h + r) * w + c] = src[(b * h + r) * w + (w - 1 - c)];
            }
        }
    }
    let flipped = Raster::new_f32(
        w,
        h,
        bands,
        *composite.transform(),
        composite.band_names().to_vec(),
        composite.nodata(),
        data,
    )?;
    let ids = mask.to_class_ids();
    let mut flipped_ids = vec![0u8; ids.len()];
    for r in 0..h {
        for c in 0..w {
            flipped_ids[r * w + c] = ids[r * w + (w - 1 - c)];
        }
    }
    let flipped_mask = ClassMask::from_class_ids(w, h, mask.n_classes(), &flipped_ids)?;
    Ok((flipped, flipped_mask))
}

/// Photometric jitter on the four spectral bands: x' = clamp((x-0.5)(1+c) +
/// 0.5 + b, 0, 1). The CHM band passes through untouched.
pub fn adjust_brightness_contrast(composite: &Raster, brightness: f64, contrast: f64) -> Result<Raster> {
    if composite.bands() != 5 {
        return Err(Error::Shape(format!(
            "composite must have 5 bands, got {}",
            composite.bands()
        )));
    }
    let src = composite
        .as_f32()
        .ok_or_else(|| Error::Shape("composite must be float32".into()))?;
    let plane = composite.width() * composite.height();
    let mut data = src.to_vec();
    for v in data.iter_mut().take(4 * plane) {
        let adjusted = (*v as f64 - 0.5) * (1.0 + contrast) + 0.5 + brightness;
        *v = adjusted.clamp(0.0, 1.0) as f32;
    }
    Raster::new_f32(
        composite.width(),
        composite.height(),
        5,
        *composite.transform(),
        composite.band_names().to_vec(),
        composite.nodata(),
        data,
    )
}

/// Add i.i.d. zero-mean Gaussian noise to every band, clamping to [0, 1].
pub fn add_gaussian_noise<R: Rng>(composite: &Raster, std: f64, rng: &mut R) -> Result<Raster> {
    if std < 0.0 {
        return Err(Error::Config(format!("noise std must be nonnegative, got {std}")));
    }
    let src = composite
        .as_f32()
        .ok_or_else(|| Error::Shape("composite must be float32".into()))?;
    if std == 0.0 {
        return Ok(composite.clone());
    }
    let normal = Normal::new(0.0f64, std).expect("std validated");
    let data = src
        .iter()
        .map(|&v| ((v as f64 + normal.sample(rng)).clamp(0.0, 1.0)) as f32)
        .collect();
    Raster::new_f32(
        composite.width(),
        composite.height(),
        composite.bands(),
        *composite.transform(),
        composite.band_names().to_vec(),
        composite.nodata(),
        data,
    )
}

/// Augment one tile with the stream derived from (seed, epoch, tile_id):
/// maybe flip, then brightness/contrast drawn uniformly within the limit,
/// then noise.
pub fn augment_tile(tile: &Tile, config: &AugmentConfig, epoch: u64) -> Result<(Raster, ClassMask)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[config.seed, epoch, tile.tile_id]));
    let (mut composite, mut mask) = (tile.composite.clone(), tile.mask.clone());
    if rng.random::<f64>() < config.flip_probability {
        (composite, mask) = hflip(&composite, &mask)?;
    }
    let limit = config.brightness_contrast_limit;
    let (b, c) = if limit > 0.0 {
        (rng.random_range(-limit..limit), rng.random_range(-limit..limit))
    } else {
        (0.0, 0.0)
    };
    composite = adjust_brightness_contrast(&composite, b, c)?;
    composite = add_gaussian_noise(&composite, config.noise_std, &mut rng)?;
    Ok((composite, mask))
}

/// Augment every tile for one epoch. Streams are keyed per tile, so the
/// result is independent of iteration order and reproducible for the same
/// (config.seed, epoch).
pub fn augment_batch(tiles: &[Tile], config: &AugmentConfig, epoch: u64) -> Result<Vec<Tile>> {
    config.validate()?;
    tiles
        .par_iter()
        .map(|tile| {
            let (composite, mask) = augment_tile(tile, config, epoch)?;
            Ok(Tile { composite, mask, ..tile.clone() })
        })
        .collect()
}
