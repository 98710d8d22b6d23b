//! Separable Gaussian smoothing, interpolation and random displacement fields.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::volume::{BinaryMask, Shape3, Volume};

/// Normalized 1D Gaussian taps, radius `ceil(3 sigma)`. `sigma <= 0` gives the identity tap.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Isotropic Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(grid: &Volume, sigma: f64) -> Volume {
    let taps = gaussian_kernel(sigma);
    if taps.len() == 1 {
        return grid.clone();
    }
    let shape = grid.shape();
    let mut buf: Vec<f64> = grid.data().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        buf = blur_axis(&buf, shape, axis, &taps);
    }
    let mut i = 0;
    grid.map(|_| {
        i += 1;
        buf[i - 1] as f32
    })
}

fn blur_axis(src: &[f64], shape: Shape3, axis: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as i64;
    let n = shape.0[axis] as i64;
    let stride = match axis {
        0 => shape.0[1] * shape.0[2],
        1 => shape.0[2],
        _ => 1,
    };
    let mut out = vec![0.0; src.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = shape.coord(i)[axis] as i64;
        let base = i - pos as usize * stride;
        let mut acc = 0.0;
        for (k, &t) in taps.iter().enumerate() {
            let p = (pos + k as i64 - radius).clamp(0, n - 1) as usize;
            acc += t * src[base + p * stride];
        }
        *o = acc;
    }
    out
}

/// Trilinear sample at a fractional (z, y, x) position; zero outside the grid.
pub fn sample_trilinear(grid: &Volume, p: [f64; 3]) -> f32 {
    let s = grid.shape().0;
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = base[a] as i64 + off[a] as i64;
            w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        if w == 0.0 {
            continue;
        }
        if (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < s[a]) {
            acc += w * *grid.get([c[0] as usize, c[1] as usize, c[2] as usize]) as f64;
        }
    }
    acc as f32
}

/// Nearest-neighbour sample; false outside the grid.
pub fn sample_nearest(mask: &BinaryMask, p: [f64; 3]) -> bool {
    let c = [p[0].round() as i64, p[1].round() as i64, p[2].round() as i64];
    mask.shape()
        .checked_index(c)
        .is_some_and(|i| mask.data()[i])
}

/// Smooth random vector field, one component per axis.
///
/// Each component is i.i.d. standard normal noise, Gaussian smoothed with
/// `smooth_sigma`, then the whole field is rescaled so the largest component
/// magnitude equals `amplitude` voxels.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    shape: Shape3,
    components: [Vec<f32>; 3],
}

impl DisplacementField {
    pub fn zero(shape: Shape3) -> Self {
        Self {
            shape,
            components: std::array::from_fn(|_| vec![0.0; shape.len()]),
        }
    }

    pub fn random(shape: Shape3, smooth_sigma: f64, amplitude: f64, rng: &mut impl Rng) -> Self {
        let mut components: [Vec<f32>; 3] = std::array::from_fn(|_| {
            let noise = Volume::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) as f32);
            gaussian_blur(&noise, smooth_sigma).into_data()
        });
        let peak = components
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { amplitude as f32 / peak } else { 0.0 };
        components
            .iter_mut()
            .for_each(|c| c.iter_mut().for_each(|v| *v *= scale));
        Self { shape, components }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn at(&self, index: usize) -> [f64; 3] {
        std::array::from_fn(|a| self.components[a][index] as f64)
    }

    pub fn max_magnitude(&self) -> f64 {
        (0..self.shape.len())
            .map(|i| {
                let u = self.at(i);
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Backward warp: `out(p) = mask(p + u(p))`, nearest neighbour.
    pub fn warp_mask(&self, mask: &BinaryMask) -> BinaryMask {
        BinaryMask::from_fn(self.shape, |c| {
            let u = self.at(self.shape.index(c));
            sample_nearest(mask, [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn blur_preserves_constants_and_zero_sigma_is_identity() {
        let g = Volume::filled(Shape3::cube(6), 2.5);
        assert!(gaussian_blur(&g, 2.0).data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        let r = Volume::from_fn(Shape3::cube(4), |[z, y, x]| (z * 7 + y * 3 + x) as f32);
        assert_eq!(gaussian_blur(&r, 0.0), r);
    }

    #[test]
    fn trilinear_hits_grid_points_and_midpoints() {
        let g = Volume::from_fn(Shape3::cube(3), |[z, y, x]| (z + 2 * y + 4 * x) as f32);
        assert_eq!(sample_trilinear(&g, [1.0, 1.0, 1.0]), 7.0);
        assert!((sample_trilinear(&g, [0.5, 0.5, 0.5]) - 3.5).abs() < 1e-6);
    }

    #[test]
    fn zero_amplitude_field_is_identity_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = DisplacementField::random(Shape3::cube(8), 4.0, 0.0, &mut rng);
        let m = BinaryMask::from_fn(Shape3::cube(8), |[z, y, x]| (z + y + x) % 3 == 0);
        assert_eq!(f.warp_mask(&m), m);
    }

    #[test]
    fn field_amplitude_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = DisplacementField::random(Shape3::cube(10), 2.0, 2.0, &mut rng);
        let peak_component = (0..1000)
            .flat_map(|i| f.at(i))
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak_component - 2.0).abs() < 1e-5);
        assert!(f.max_magnitude() <= 2.0 * 3f64.sqrt() + 1e-6);
    }
}
