//! Intensity normalization, foreground-centred patch extraction and augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::filters::{sample_nearest, sample_trilinear};
use crate::volume::{BinaryMask, Shape3, Volume};

/// Nonzero-intensity voxels. Stand-in foreground when no organ mask exists.
pub fn nonzero_foreground(v: &Volume) -> BinaryMask {
    v.map(|&x| x != 0.0)
}

/// Nearest-rank percentile of an ascending-sorted sample (`pct` in [0, 100]).
///
/// Order statistics (rather than interpolated values) make clipping idempotent.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    sorted[rank.round() as usize]
}

fn foreground_values(v: &Volume, fg: &BinaryMask) -> Result<Vec<f64>> {
    ensure_same_shape(v.shape(), fg.shape())?;
    let vals: Vec<f64> = v
        .data()
        .iter()
        .zip(fg.data())
        .filter_map(|(&x, &m)| m.then_some(x as f64))
        .collect();
    if vals.is_empty() {
        return Err(Error::EmptyForeground("intensity statistics need foreground voxels"));
    }
    Ok(vals)
}

/// Clamp every voxel to the `[lo_pct, hi_pct]` percentile range of the foreground.
pub fn clip_intensities(v: &Volume, fg: &BinaryMask, lo_pct: f64, hi_pct: f64) -> Result<Volume> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::InvalidArgument(format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    let mut vals = foreground_values(v, fg)?;
    vals.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&vals, lo_pct);
    let hi = percentile_sorted(&vals, hi_pct);
    Ok(v.map(|&x| {
        let xd = x as f64;
        if xd < lo {
            lo as f32
        } else if xd > hi {
            hi as f32
        } else {
            x
        }
    }))
}

/// `(v - mean_fg) / std_fg` over all voxels (population standard deviation).
pub fn zscore_normalize(v: &Volume, fg: &BinaryMask) -> Result<Volume> {
    let vals = foreground_values(v, fg)?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate("foreground standard deviation is zero".into()));
    }
    Ok(v.map(|&x| ((x as f64 - mean) / std) as f32))
}

/// Clip to the 0.5/99.5 foreground percentiles, then z-score.
pub fn standard_preprocess(v: &Volume, fg: &BinaryMask) -> Result<Volume> {
    let clipped = clip_intensities(v, fg, 0.5, 99.5)?;
    zscore_normalize(&clipped, fg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Volume,
    pub label: BinaryMask,
    /// Volume coordinate of patch voxel (0, 0, 0); may be negative.
    pub offset: [i64; 3],
}

/// Crop a `size` patch whose centre voxel (`size / 2`) lands on a uniformly chosen
/// foreground voxel. Out-of-bounds voxels are zero.
pub fn crop_patch(v: &Volume, y: &BinaryMask, size: [usize; 3], rng: &mut impl Rng) -> Result<Patch> {
    ensure_same_shape(v.shape(), y.shape())?;
    if size.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("patch size {size:?} has a zero extent")));
    }
    let fg = y.indices();
    if fg.is_empty() {
        return Err(Error::EmptyForeground("patch centre needs a foreground voxel"));
    }
    let centre = y.shape().coord(fg[rng.random_range(0..fg.len())]);
    let offset: [i64; 3] = std::array::from_fn(|a| centre[a] as i64 - (size[a] / 2) as i64);
    Ok(extract_patch(v, y, size, offset))
}

pub fn extract_patch(v: &Volume, y: &BinaryMask, size: [usize; 3], offset: [i64; 3]) -> Patch {
    let pshape = Shape3(size);
    let src = v.shape();
    let at = |c: [usize; 3]| {
        src.checked_index([
            c[0] as i64 + offset[0],
            c[1] as i64 + offset[1],
            c[2] as i64 + offset[2],
        ])
    };
    let image = Volume::from_fn(pshape, |c| at(c).map_or(0.0, |i| v.data()[i]))
        .with_spacing(v.spacing())
        .expect("spacing already validated");
    let label = BinaryMask::from_fn(pshape, |c| at(c).is_some_and(|i| y.data()[i]));
    Patch { image, label, offset }
}

/// Write a patch-space mask back into a full-size mask; voxels outside the volume are dropped.
pub fn paste_back(patch_mask: &BinaryMask, offset: [i64; 3], full: Shape3) -> BinaryMask {
    let mut out = BinaryMask::empty(full);
    let ps = patch_mask.shape();
    for i in patch_mask.indices() {
        let c = ps.coord(i);
        if let Some(j) = full.checked_index([
            c[0] as i64 + offset[0],
            c[1] as i64 + offset[1],
            c[2] as i64 + offset[2],
        ]) {
            out.data_mut()[j] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub zoom_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            zoom_range: (0.85, 1.15),
            shift_range: (-0.1, 0.1),
        }
    }
}

/// Scale about the grid centre by `factor` and resample back onto the same grid:
/// trilinear for the image, nearest for the mask, zero outside.
pub fn zoom(v: &Volume, y: &BinaryMask, factor: f64) -> Result<(Volume, BinaryMask)> {
    ensure_same_shape(v.shape(), y.shape())?;
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("zoom factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok((v.clone(), y.clone()));
    }
    let s = v.shape().0;
    let centre: [f64; 3] = std::array::from_fn(|a| (s[a] as f64 - 1.0) / 2.0);
    let src = |c: [usize; 3]| -> [f64; 3] {
        std::array::from_fn(|a| centre[a] + (c[a] as f64 - centre[a]) / factor)
    };
    let img = Volume::from_fn(v.shape(), |c| sample_trilinear(v, src(c)))
        .with_spacing(v.spacing())?;
    let mask = BinaryMask::from_fn(y.shape(), |c| sample_nearest(y, src(c)));
    Ok((img, mask))
}

pub fn augment_zoom(
    v: &Volume,
    y: &BinaryMask,
    factor_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<(Volume, BinaryMask)> {
    let (lo, hi) = factor_range;
    if !(lo > 0.0) || hi < lo {
        return Err(Error::InvalidArgument(format!("zoom range {factor_range:?} is invalid")));
    }
    let factor = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    zoom(v, y, factor)
}

pub fn augment_intensity_shift(v: &Volume, shift_range: (f64, f64), rng: &mut impl Rng) -> Result<Volume> {
    let (lo, hi) = shift_range;
    if hi < lo {
        return Err(Error::InvalidArgument(format!("shift range {shift_range:?} is invalid")));
    }
    let shift = if hi > lo { rng.random_range(lo..=hi) } else { lo } as f32;
    Ok(v.map(|&x| x + shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_1_to_100() -> Volume {
        Volume::from_vec(Shape3::new(1, 10, 10), (1..=100).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn clip_constant_volume_is_identity() {
        let v = Volume::filled(Shape3::cube(3), 4.0);
        let fg = BinaryMask::filled(Shape3::cube(3), true);
        assert_eq!(clip_intensities(&v, &fg, 0.5, 99.5).unwrap(), v);
    }

    #[test]
    fn clip_matches_sort_based_oracle() {
        // Oracle: sort, take the value at the nearest rank p/100 * (n - 1).
        fn oracle(values: &[f32], pct: f64) -> f32 {
            let mut s = values.to_vec();
            s.sort_by(f32::total_cmp);
            s[(pct / 100.0 * (s.len() - 1) as f64).round() as usize]
        }
        let v = ramp_1_to_100();
        let fg = BinaryMask::filled(v.shape(), true);
        let out = clip_intensities(&v, &fg, 0.5, 99.5).unwrap();
        let (lo, hi) = (oracle(v.data(), 0.5), oracle(v.data(), 99.5));
        assert_eq!((lo, hi), (1.0, 100.0));
        assert!(out.data().iter().zip(v.data()).all(|(&o, &x)| o == x.clamp(lo, hi)));

        // Shuffled 1..=1000: the tails actually move.
        let n = 1000;
        let vals: Vec<f32> = (0..n).map(|i| ((i * 389) % n + 1) as f32).collect();
        let v = Volume::from_vec(Shape3::new(10, 10, 10), vals.clone()).unwrap();
        let fg = BinaryMask::filled(v.shape(), true);
        let out = clip_intensities(&v, &fg, 0.5, 99.5).unwrap();
        let (lo, hi) = (oracle(&vals, 0.5), oracle(&vals, 99.5));
        assert_eq!((lo, hi), (6.0, 995.0));
        assert!(out.data().iter().zip(&vals).all(|(&o, &x)| o == x.clamp(lo, hi)));
    }

    #[test]
    fn full_percentile_range_is_identity() {
        let v = ramp_1_to_100();
        let fg = BinaryMask::filled(v.shape(), true);
        assert_eq!(clip_intensities(&v, &fg, 0.0, 100.0).unwrap(), v);
    }

    #[test]
    fn clip_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Volume::from_fn(Shape3::cube(6), |_| rng.random_range(-5.0f32..5.0));
        let fg = BinaryMask::from_fn(v.shape(), |[z, _, _]| z > 1);
        let once = clip_intensities(&v, &fg, 0.5, 99.5).unwrap();
        assert_eq!(clip_intensities(&once, &fg, 0.5, 99.5).unwrap(), once);
    }

    #[test]
    fn empty_foreground_and_bad_percentiles_are_rejected() {
        let v = Volume::zeros(Shape3::cube(2));
        let fg = BinaryMask::empty(Shape3::cube(2));
        assert!(matches!(clip_intensities(&v, &fg, 0.5, 99.5), Err(Error::EmptyForeground(_))));
        let fg = BinaryMask::filled(Shape3::cube(2), true);
        assert!(clip_intensities(&v, &fg, 50.0, 50.0).is_err());
        let other = BinaryMask::filled(Shape3::cube(3), true);
        assert!(matches!(clip_intensities(&v, &other, 0.5, 99.5), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zscore_two_point_case() {
        let v = Volume::from_vec(Shape3::new(1, 1, 3), vec![2.0, 4.0, 10.0]).unwrap();
        let fg = BinaryMask::from_vec(Shape3::new(1, 1, 3), vec![true, true, false]).unwrap();
        let out = zscore_normalize(&v, &fg).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0, 7.0]);
    }

    #[test]
    fn zscore_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Volume::from_fn(Shape3::cube(8), |_| rng.random_range(-3.0f32..7.0));
        let fg = BinaryMask::from_fn(v.shape(), |[z, y, x]| (z + y + x) % 2 == 0);
        let out = zscore_normalize(&v, &fg).unwrap();
        // Two-pass oracle over the normalized foreground.
        let vals: Vec<f64> = out
            .data()
            .iter()
            .zip(fg.data())
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x as f64)
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
        // Idempotence on standardized input.
        let again = zscore_normalize(&out, &fg).unwrap();
        assert!(again.data().iter().zip(out.data()).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn zscore_rejects_zero_variance() {
        let v = Volume::filled(Shape3::cube(2), 3.0);
        let fg = BinaryMask::filled(Shape3::cube(2), true);
        assert!(matches!(zscore_normalize(&v, &fg), Err(Error::Degenerate(_))));
    }

    #[test]
    fn crop_centres_on_single_foreground_voxel() {
        let shape = Shape3::cube(16);
        let v = Volume::from_fn(shape, |[z, y, x]| (z * 256 + y * 16 + x) as f32);
        let mut y = BinaryMask::empty(shape);
        y.set([9, 3, 12], true);
        let p = crop_patch(&v, &y, [8, 8, 8], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(*p.label.get([4, 4, 4]));
        assert_eq!(*p.image.get([4, 4, 4]), *v.get([9, 3, 12]));
        assert_eq!(p.offset, [5, -1, 8]);
    }

    #[test]
    fn corner_crop_zero_pads_where_index_arithmetic_says() {
        let shape = Shape3::cube(6);
        let v = Volume::filled(shape, 1.0);
        let mut y = BinaryMask::empty(shape);
        y.set([0, 0, 5], true);
        let p = crop_patch(&v, &y, [4, 4, 4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.offset, [-2, -2, 3]);
        for i in 0..64 {
            let c = Shape3::cube(4).coord(i);
            let inside = c[0] >= 2 && c[1] >= 2 && c[2] + 3 < 6;
            assert_eq!(p.image.data()[i], if inside { 1.0 } else { 0.0 }, "at {c:?}");
        }
    }

    #[test]
    fn full_extent_crop_reproduces_padded_volume_and_pastes_back() {
        let shape = Shape3::cube(6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Volume::from_fn(shape, |_| rng.random_range(0.0f32..1.0));
        let y = BinaryMask::from_fn(shape, |[z, y, x]| z == 3 && y > 1 && x < 4);
        let p = crop_patch(&v, &y, [6, 6, 6], &mut rng).unwrap();
        let recovered = paste_back(&p.label, p.offset, shape);
        // Every foreground voxel the patch covered is recovered at its original place.
        let covered = BinaryMask::from_fn(shape, |c| {
            (0..3).all(|a| {
                let q = c[a] as i64 - p.offset[a];
                (0..6).contains(&q)
            })
        });
        assert_eq!(recovered, y.and(&covered).unwrap());
        if p.offset == [0, 0, 0] {
            assert_eq!(p.image, v);
        }
    }

    #[test]
    fn crop_errors() {
        let v = Volume::zeros(Shape3::cube(4));
        let y = BinaryMask::empty(Shape3::cube(4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(crop_patch(&v, &y, [2, 2, 2], &mut rng), Err(Error::EmptyForeground(_))));
        let y = BinaryMask::filled(Shape3::cube(4), true);
        assert!(crop_patch(&v, &y, [0, 2, 2], &mut rng).is_err());
    }

    #[test]
    fn unit_zoom_and_zero_shift_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Volume::from_fn(Shape3::cube(5), |_| rng.random_range(0.0f32..1.0));
        let y = v.map(|&x| x > 0.5);
        assert_eq!(augment_zoom(&v, &y, (1.0, 1.0), &mut rng).unwrap(), (v.clone(), y));
        assert_eq!(augment_intensity_shift(&v, (0.0, 0.0), &mut rng).unwrap(), v);
        assert!(zoom(&v, &v.map(|_| true), 0.0).is_err());
        assert!(zoom(&v, &v.map(|_| true), -1.0).is_err());
    }

    #[test]
    fn half_zoom_shrinks_cube_volume_eightfold() {
        let shape = Shape3::cube(32);
        // 16^3 cube centred on the grid centre (15.5).
        let y = BinaryMask::from_fn(shape, |c| c.iter().all(|&v| (8..24).contains(&v)));
        let v = y.map(|&b| if b { 1.0 } else { 0.0 });
        let (_, zoomed) = zoom(&v, &y, 0.5).unwrap();
        // Resampling oracle: voxel p is set iff round(c + (p - c) / 0.5) falls in [8, 24).
        let oracle = BinaryMask::from_fn(shape, |p| {
            p.iter().all(|&q| {
                let s = (15.5 + (q as f64 - 15.5) * 2.0).round();
                (8.0..24.0).contains(&s)
            })
        });
        assert_eq!(zoomed, oracle);
        let ratio = y.count() as f64 / zoomed.count() as f64;
        assert!((ratio - 8.0).abs() / 8.0 < 0.35, "ratio {ratio}");
    }

    #[test]
    fn shift_adds_a_scalar() {
        let v = Volume::filled(Shape3::cube(2), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment_intensity_shift(&v, (-0.1, 0.1), &mut rng).unwrap();
        let d = out.data()[0] - 1.0;
        assert!(d.abs() <= 0.1 + 1e-7);
        assert!(out.data().iter().all(|&x| x - 1.0 == d));
    }
}
