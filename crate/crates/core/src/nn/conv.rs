//! 3-D convolution (im2col + gemm) and separable linear resizing.
//!
//! Feature maps are `[C, D, H, W]`, one sample at a time.

use super::gemm::{gemm, Mat};
use super::graph::Var;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const SAME3: ConvGeom = ConvGeom { k: 3, stride: 1, pad: 1 };
    pub const POINTWISE: ConvGeom = ConvGeom { k: 1, stride: 1, pad: 0 };

    /// Non-overlapping `k`-cube patches.
    pub fn patch(k: usize) -> Self {
        Self { k, stride: k, pad: 0 }
    }

    pub fn out_len(&self, n: usize) -> usize {
        assert!(n + 2 * self.pad >= self.k, "kernel larger than padded input");
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 4, "expected [C, D, H, W], got {shape:?}");
    [shape[1], shape[2], shape[3]]
}

/// Valid output range along one axis for kernel offset `kk`.
fn valid_range(n_in: usize, n_out: usize, kk: usize, g: ConvGeom) -> (usize, usize) {
    // input index = o * stride + kk - pad must lie in [0, n_in)
    let lo = if kk >= g.pad { 0 } else { (g.pad - kk).div_ceil(g.stride) };
    let hi = if n_in + g.pad > kk {
        ((n_in + g.pad - kk - 1) / g.stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f32], c: usize, din: [usize; 3], dout: [usize; 3], g: ConvGeom) -> Vec<f32> {
    let k = g.k;
    let n = dout.iter().product::<usize>();
    let mut col = vec![0.0f32; c * k * k * k * n];
    let plane_in = din[1] * din[2];
    for ci in 0..c {
        let xc = &x[ci * din[0] * plane_in..(ci + 1) * din[0] * plane_in];
        for kz in 0..k {
            let (z0, z1) = valid_range(din[0], dout[0], kz, g);
            for ky in 0..k {
                let (y0, y1) = valid_range(din[1], dout[1], ky, g);
                for kx in 0..k {
                    let (x0, x1) = valid_range(din[2], dout[2], kx, g);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oz in z0..z1 {
                        let iz = oz * g.stride + kz - g.pad;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let src = &xc[iz * plane_in + iy * din[2]..];
                            let d = &mut dst[(oz * dout[1] + oy) * dout[2]..];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                d[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    d[ox] = src[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], c: usize, din: [usize; 3], dout: [usize; 3], g: ConvGeom) -> Vec<f32> {
    let k = g.k;
    let n = dout.iter().product::<usize>();
    let plane_in = din[1] * din[2];
    let mut x = vec![0.0f32; c * din[0] * plane_in];
    for ci in 0..c {
        let xc = &mut x[ci * din[0] * plane_in..(ci + 1) * din[0] * plane_in];
        for kz in 0..k {
            let (z0, z1) = valid_range(din[0], dout[0], kz, g);
            for ky in 0..k {
                let (y0, y1) = valid_range(din[1], dout[1], ky, g);
                for kx in 0..k {
                    let (x0, x1) = valid_range(din[2], dout[2], kx, g);
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oz in z0..z1 {
                        let iz = oz * g.stride + kz - g.pad;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let base = iz * plane_in + iy * din[2];
                            let s = &src[(oz * dout[1] + oy) * dout[2]..];
                            for ox in x0..x1 {
                                xc[base + ox * g.stride + kx - g.pad] += s[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `x: [Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
pub fn conv3d(x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Var {
    let cin = x.shape()[0];
    let din = spatial(x.shape());
    let cout = w.shape()[0];
    let kvol = g.k * g.k * g.k;
    assert_eq!(w.value().len(), cout * cin * kvol, "conv3d weight shape {:?}", w.shape());
    let dout = [g.out_len(din[0]), g.out_len(din[1]), g.out_len(din[2])];
    let n: usize = dout.iter().product();
    let kdim = cin * kvol;
    let direct = g == ConvGeom::POINTWISE;

    let mut out = vec![0.0f32; cout * n];
    {
        let col_owned;
        let col: &[f32] = if direct {
            x.data()
        } else {
            col_owned = im2col(x.data(), cin, din, dout, g);
            &col_owned
        };
        gemm(1.0, Mat::new(w.data(), cout, kdim), Mat::new(col, kdim, n), 0.0, &mut out, n);
    }
    if let Some(b) = b {
        assert_eq!(b.value().len(), cout);
        for (row, bv) in out.chunks_mut(n).zip(b.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Var::from_op(
        Tensor::new(vec![cout, dout[0], dout[1], dout[2]], out),
        parents,
        Box::new(move |gr, p| {
            let (x, w) = (p[0].value(), p[1].value());
            let gm = Mat::new(gr.data(), cout, n);
            let need_w = p[1].requires_grad();
            let need_x = p[0].requires_grad();
            let col_owned;
            let col: &[f32] = if direct {
                x.data()
            } else if need_w {
                col_owned = im2col(x.data(), cin, din, dout, g);
                &col_owned
            } else {
                &[]
            };
            let gw = need_w.then(|| {
                let mut d = vec![0.0f32; cout * kdim];
                gemm(1.0, gm, Mat::new(col, kdim, n).t(), 0.0, &mut d, kdim);
                Tensor::new(w.shape().to_vec(), d)
            });
            let gx = need_x.then(|| {
                let mut dcol = vec![0.0f32; kdim * n];
                gemm(1.0, Mat::new(w.data(), cout, kdim).t(), gm, 0.0, &mut dcol, n);
                let dx = if direct { dcol } else { col2im(&dcol, cin, din, dout, g) };
                Tensor::new(x.shape().to_vec(), dx)
            });
            let mut grads = vec![gx, gw];
            if p.len() == 3 {
                grads.push(p[2].requires_grad().then(|| {
                    Tensor::new(p[2].shape().to_vec(), gr.data().chunks(n).map(|r| r.iter().sum()).collect())
                }));
            }
            grads
        }),
    )
}

/// Interpolation taps for linear resizing with half-pixel centres.
fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            if i0 + 1 >= n_in {
                return (i0, i0, 0.0);
            }
            (i0, i0 + 1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Linear resize of `x` along `axis` (1, 2 or 3 of `[C, D, H, W]`).
pub fn resize_axis(x: &Var, axis: usize, n_out: usize) -> Var {
    assert!((1..4).contains(&axis), "resize axis {axis}");
    let shape = x.shape().to_vec();
    let n_in = shape[axis];
    if n_in == n_out {
        return x.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = linear_taps(n_in, n_out);
    let mut out = vec![0.0f32; outer * n_out * inner];
    let src = x.data();
    for o in 0..outer {
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            let d = &mut out[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
            let a = &src[(o * n_in + i0) * inner..(o * n_in + i0 + 1) * inner];
            let b = &src[(o * n_in + i1) * inner..(o * n_in + i1 + 1) * inner];
            for ((dv, &av), &bv) in d.iter_mut().zip(a).zip(b) {
                *dv = (1.0 - t) * av + t * bv;
            }
        }
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = n_out;
    Var::from_op(
        Tensor::new(out_shape, out),
        vec![x.clone()],
        Box::new(move |g, p| {
            let mut d = vec![0.0f32; outer * n_in * inner];
            for o in 0..outer {
                for (j, &(i0, i1, t)) in taps.iter().enumerate() {
                    let gs = &g.data()[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
                    for (q, &gv) in gs.iter().enumerate() {
                        d[(o * n_in + i0) * inner + q] += (1.0 - t) * gv;
                        d[(o * n_in + i1) * inner + q] += t * gv;
                    }
                }
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
        }),
    )
}

/// Trilinear resize of `[C, D, H, W]` to the given spatial size.
pub fn resize_trilinear(x: &Var, size: [usize; 3]) -> Var {
    let y = resize_axis(x, 1, size[0]);
    let y = resize_axis(&y, 2, size[1]);
    resize_axis(&y, 3, size[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::tests::{check_grad, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct 7-loop convolution.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &[f32], g: ConvGeom) -> Vec<f32> {
        let (cin, din) = (x.dim(0), [x.dim(1), x.dim(2), x.dim(3)]);
        let cout = w.dim(0);
        let dout = din.map(|n| g.out_len(n));
        let k = g.k;
        let mut out = vec![0.0; cout * dout.iter().product::<usize>()];
        for co in 0..cout {
            for oz in 0..dout[0] {
                for oy in 0..dout[1] {
                    for ox in 0..dout[2] {
                        let mut s = b[co] as f64;
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * g.stride + kz) as i64 - g.pad as i64;
                                        let iy = (oy * g.stride + ky) as i64 - g.pad as i64;
                                        let ix = (ox * g.stride + kx) as i64 - g.pad as i64;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= din[0] || iy >= din[1] || ix >= din[2] {
                                            continue;
                                        }
                                        let xv = x.data()[((ci * din[0] + iz) * din[1] + iy) * din[2] + ix];
                                        let wv = w.data()[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                        s += xv as f64 * wv as f64;
                                    }
                                }
                            }
                        }
                        out[((co * dout[0] + oz) * dout[1] + oy) * dout[2] + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_all_geometries() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for g in [ConvGeom::SAME3, ConvGeom::POINTWISE, ConvGeom::patch(2), ConvGeom { k: 3, stride: 2, pad: 1 }] {
            let x = rand_tensor(&[2, 5, 4, 6], &mut r);
            let w = rand_tensor(&[3, 2, g.k, g.k, g.k], &mut r);
            let b = rand_tensor(&[3], &mut r);
            let y = conv3d(&Var::constant(x.clone()), &Var::constant(w.clone()), Some(&Var::constant(b.clone())), g);
            let expect = conv_naive(&x, &w, b.data(), g);
            assert_eq!(y.value().len(), expect.len());
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-4, "{g:?}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_grads() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for g in [ConvGeom::SAME3, ConvGeom::POINTWISE, ConvGeom::patch(2)] {
            let x = rand_tensor(&[2, 4, 4, 4], &mut r);
            let w = rand_tensor(&[2, 2, g.k, g.k, g.k], &mut r);
            let b = rand_tensor(&[2], &mut r);
            check_grad(&[x, w, b], |v| conv3d(&v[0], &v[1], Some(&v[2]), g), 2e-3);
        }
    }

    #[test]
    fn resize_taps_match_half_pixel_rule() {
        // 4 -> 8: output 0 maps to -0.25 (clamped to 0), output 1 to 0.25
        let t = linear_taps(4, 8);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!((t[1].0, t[1].1), (0, 1));
        assert!((t[1].2 - 0.25).abs() < 1e-6);
        assert_eq!(t[7], (3, 3, 0.0));
        // 8 -> 4: each output averages a pair
        for (j, &(i0, i1, w)) in linear_taps(8, 4).iter().enumerate() {
            assert_eq!((i0, i1), (2 * j, 2 * j + 1));
            assert!((w - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_preserves_constants_and_has_grads() {
        let x = Var::constant(Tensor::full(vec![1, 3, 4, 5], 2.5));
        let y = resize_trilinear(&x, [6, 2, 7]);
        assert_eq!(y.shape(), &[1, 6, 2, 7]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let t = rand_tensor(&[2, 3, 4, 2], &mut r);
        check_grad(&[t], |v| resize_trilinear(&v[0], [5, 2, 3]), 1e-3);
    }
}
