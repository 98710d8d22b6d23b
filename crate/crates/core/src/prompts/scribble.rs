//! Scribble synthesis from error regions.
//!
//! skeleton → break into parts with a random blob mask → smooth random warp →
//! random-width thickening → clip back to the originating error region, so a
//! scribble never contradicts the ground truth.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{skeletonize, Polarity, Scribble};
use crate::error::{ensure_same_shape, Result};
use crate::filters::{gaussian_blur, DisplacementField};
use crate::volume::{BinaryMask, Shape3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScribbleConfig {
    /// Break skeletons into parts with a random blob mask.
    pub split: bool,
    pub split_blur_sigma: f64,
    /// Largest displacement component of the warp, in voxels.
    pub deform_amp: f64,
    pub deform_sigma: f64,
    /// Thickening blur sigma is drawn from `[0, max_thickness_sigma]`.
    pub max_thickness_sigma: f64,
    /// Blurred voxels at or above this fraction of the peak are kept.
    pub thickness_rel_threshold: f64,
}

impl Default for ScribbleConfig {
    fn default() -> Self {
        Self {
            split: true,
            split_blur_sigma: 2.0,
            deform_amp: 2.0,
            deform_sigma: 4.0,
            max_thickness_sigma: 1.0,
            thickness_rel_threshold: 0.1,
        }
    }
}

impl ScribbleConfig {
    /// No split, no warp, no thickening: the scribble is the skeleton itself.
    pub fn identity() -> Self {
        Self {
            split: false,
            deform_amp: 0.0,
            max_thickness_sigma: 0.0,
            ..Self::default()
        }
    }
}

/// Gaussian noise, blurred, thresholded at its own mean.
pub fn random_split_mask(shape: Shape3, blur_sigma: f64, rng: &mut impl Rng) -> BinaryMask {
    let noise = Volume::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) as f32);
    let blurred = gaussian_blur(&noise, blur_sigma);
    let mean = blurred.data().iter().map(|&v| v as f64).sum::<f64>() / shape.len() as f64;
    blurred.map(|&v| v as f64 > mean)
}

fn scribble_from_region(region: &BinaryMask, cfg: &ScribbleConfig, rng: &mut impl Rng) -> BinaryMask {
    let shape = region.shape();
    let mut parts = skeletonize(region);
    if cfg.split {
        parts = parts
            .and(&random_split_mask(shape, cfg.split_blur_sigma, rng))
            .expect("same shape");
    }
    if cfg.deform_amp > 0.0 {
        parts = DisplacementField::random(shape, cfg.deform_sigma, cfg.deform_amp, rng).warp_mask(&parts);
    }
    if cfg.max_thickness_sigma > 0.0 {
        let sigma = rng.random_range(0.0..=cfg.max_thickness_sigma);
        let blurred = gaussian_blur(&parts.map(|&b| if b { 1.0f32 } else { 0.0 }), sigma);
        let peak = blurred.data().iter().copied().fold(0.0f32, f32::max);
        if peak > 0.0 {
            let cut = peak * cfg.thickness_rel_threshold as f32;
            parts = blurred.map(|&v| v >= cut && v > 0.0);
        }
    }
    parts.and(region).expect("same shape")
}

/// At most one scribble per non-empty error region: FN → positive, FP → negative.
pub fn generate_scribbles(
    fn_region: &BinaryMask,
    fp_region: &BinaryMask,
    gt: &BinaryMask,
    rng: &mut impl Rng,
    cfg: &ScribbleConfig,
) -> Result<Vec<Scribble>> {
    ensure_same_shape(fn_region.shape(), gt.shape())?;
    ensure_same_shape(fp_region.shape(), gt.shape())?;
    let mut out = Vec::new();
    for (region, label) in [(fn_region, Polarity::Positive), (fp_region, Polarity::Negative)] {
        if !region.any() {
            continue;
        }
        let voxels = scribble_from_region(region, cfg, rng).coords();
        if !voxels.is_empty() {
            out.push(Scribble { voxels, label });
        }
    }
    Ok(out)
}
