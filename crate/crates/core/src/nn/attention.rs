//! Fused multi-head scaled dot-product attention.

use super::gemm::{gemm, Mat};
use super::graph::Var;
use super::tensor::Tensor;

/// `q: [Tq, E]`, `k, v: [Tk, E]`, `E` split into `heads` equal slices.
/// Returns `[Tq, E]` with heads concatenated along the feature axis.
pub fn attention(q: &Var, k: &Var, v: &Var, heads: usize) -> Var {
    let (tq, e) = (q.shape()[0], q.shape()[1]);
    let tk = k.shape()[0];
    assert_eq!(k.shape(), &[tk, e], "attention key shape");
    assert_eq!(v.shape(), &[tk, e], "attention value shape");
    assert!(heads > 0 && e % heads == 0, "{e} features do not split into {heads} heads");
    let d = e / heads;
    let scale = 1.0 / (d as f32).sqrt();

    let mut probs = vec![0.0f32; heads * tq * tk];
    let mut out = vec![0.0f32; tq * e];
    for h in 0..heads {
        let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
        gemm(
            scale,
            Mat::strided(&q.data()[h * d..], tq, d, e),
            Mat::strided(&k.data()[h * d..], tk, d, e).t(),
            0.0,
            p,
            tk,
        );
        for row in p.chunks_mut(tk) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            row.iter_mut().for_each(|s| *s /= z);
        }
        gemm(1.0, Mat::new(p, tq, tk), Mat::strided(&v.data()[h * d..], tk, d, e), 0.0, &mut out[h * d..], e);
    }

    Var::from_op(
        Tensor::new(vec![tq, e], out),
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, par| {
            let (q, k, v) = (par[0].value(), par[1].value(), par[2].value());
            let mut dq = vec![0.0f32; tq * e];
            let mut dk = vec![0.0f32; tk * e];
            let mut dv = vec![0.0f32; tk * e];
            let mut dp = vec![0.0f32; tq * tk];
            for h in 0..heads {
                let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                let go = Mat::strided(&g.data()[h * d..], tq, d, e);
                // dV = P^T dO
                gemm(1.0, Mat::new(p, tq, tk).t(), go, 0.0, &mut dv[h * d..], e);
                // dP = dO V^T
                gemm(1.0, go, Mat::strided(&v.data()[h * d..], tk, d, e).t(), 0.0, &mut dp, tk);
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                for (dpr, pr) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                    let dot: f32 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, &pv) in dpr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                gemm(1.0, Mat::new(&dp, tq, tk), Mat::strided(&k.data()[h * d..], tk, d, e), 0.0, &mut dq[h * d..], e);
                gemm(1.0, Mat::new(&dp, tq, tk).t(), Mat::strided(&q.data()[h * d..], tq, d, e), 0.0, &mut dk[h * d..], e);
            }
            vec![
                Some(Tensor::new(vec![tq, e], dq)),
                Some(Tensor::new(vec![tk, e], dk)),
                Some(Tensor::new(vec![tk, e], dv)),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::tests::{check_grad, rand_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_naive(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f32> {
        let (tq, e, tk) = (q.dim(0), q.dim(1), k.dim(0));
        let d = e / heads;
        let mut out = vec![0.0; tq * e];
        for h in 0..heads {
            for i in 0..tq {
                let scores: Vec<f64> = (0..tk)
                    .map(|j| {
                        (0..d).map(|c| q.data()[i * e + h * d + c] as f64 * k.data()[j * e + h * d + c] as f64).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..d {
                    out[i * e + h * d + c] = (0..tk)
                        .map(|j| (scores[j] - m).exp() / z * v.data()[j * e + h * d + c] as f64)
                        .sum::<f64>() as f32;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&[3, 8], &mut r);
        let k = rand_tensor(&[5, 8], &mut r);
        let v = rand_tensor(&[5, 8], &mut r);
        let y = attention(&Var::constant(q.clone()), &Var::constant(k.clone()), &Var::constant(v.clone()), 2);
        for (a, b) in y.data().iter().zip(attention_naive(&q, &k, &v, 2)) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn grads() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let q = rand_tensor(&[3, 8], &mut r);
        let k = rand_tensor(&[4, 8], &mut r);
        let v = rand_tensor(&[4, 8], &mut r);
        check_grad(&[q, k, v], |x| attention(&x[0], &x[1], &x[2], 2), 2e-3);
    }
}
