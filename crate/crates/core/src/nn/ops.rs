//! Elementwise, matrix and reduction ops.
//!
//! Row ops view a tensor as `[shape[0], rest]`: rows along the first axis.

use super::gemm::{gemm, Mat};
use super::graph::Var;
use super::tensor::Tensor;

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let r = shape.first().copied().unwrap_or(1);
    let c = shape.iter().skip(1).product();
    (r, c)
}

fn same_shape(a: &Var, b: &Var, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

fn map(x: &Var, f: impl Fn(f32) -> f32, df: impl Fn(f32) -> f32 + 'static) -> Var {
    let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, p| {
            let x = p[0].value();
            let d = x.data().iter().zip(g.data()).map(|(&xv, &gv)| gv * df(xv)).collect();
            vec![Some(Tensor::new(x.shape().to_vec(), d))]
        }),
    )
}

pub fn add(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "add");
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Var::from_op(
        Tensor::new(a.shape().to_vec(), d),
        vec![a.clone(), b.clone()],
        Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
    )
}

pub fn sub(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "sub");
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Var::from_op(
        Tensor::new(a.shape().to_vec(), d),
        vec![a.clone(), b.clone()],
        Box::new(|g, _| vec![Some(g.clone()), Some(g.clone().scaled(-1.0))]),
    )
}

pub fn mul(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "mul");
    let d = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Var::from_op(
        Tensor::new(a.shape().to_vec(), d),
        vec![a.clone(), b.clone()],
        Box::new(|g, p| {
            let prod = |t: &Tensor| {
                Tensor::new(t.shape().to_vec(), t.data().iter().zip(g.data()).map(|(x, y)| x * y).collect())
            };
            vec![
                p[0].requires_grad().then(|| prod(p[1].value())),
                p[1].requires_grad().then(|| prod(p[0].value())),
            ]
        }),
    )
}

pub fn scale(x: &Var, s: f32) -> Var {
    let value = x.value().clone().scaled(s);
    Var::from_op(value, vec![x.clone()], Box::new(move |g, _| vec![Some(g.clone().scaled(s))]))
}

pub fn add_scalar(x: &Var, s: f32) -> Var {
    let d = x.data().iter().map(|v| v + s).collect();
    Var::from_op(
        Tensor::new(x.shape().to_vec(), d),
        vec![x.clone()],
        Box::new(|g, _| vec![Some(g.clone())]),
    )
}

pub fn sum(x: &Var) -> Var {
    let value = Tensor::scalar(x.value().sum() as f32);
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(|g, p| vec![Some(Tensor::full(p[0].shape().to_vec(), g.data()[0]))]),
    )
}

pub fn mean(x: &Var) -> Var {
    let n = x.value().len().max(1) as f32;
    scale(&sum(x), 1.0 / n)
}

pub fn reshape(x: &Var, shape: &[usize]) -> Var {
    let value = x.value().clone().reshaped(shape.to_vec());
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(|g, p| vec![Some(g.clone().reshaped(p[0].shape().to_vec()))]),
    )
}

pub fn relu(x: &Var) -> Var {
    map(x, |v| v.max(0.0), |v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn leaky_relu(x: &Var, slope: f32) -> Var {
    map(
        x,
        move |v| if v > 0.0 { v } else { slope * v },
        move |v| if v > 0.0 { 1.0 } else { slope },
    )
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// Tanh approximation of GELU.
pub fn gelu(x: &Var) -> Var {
    map(
        x,
        |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
        |v| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
        },
    )
}

pub fn sigmoid_f32(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Var) -> Var {
    map(x, sigmoid_f32, |v| {
        let s = sigmoid_f32(v);
        s * (1.0 - s)
    })
}

/// `op(a) op(b)` for 2-D operands; `ta`/`tb` read the operand transposed.
pub fn matmul_ex(a: &Var, ta: bool, b: &Var, tb: bool) -> Var {
    assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-D");
    assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-D");
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let ma = |d| if ta { Mat::new(d, ar, ac).t() } else { Mat::new(d, ar, ac) };
    let mb = |d| if tb { Mat::new(d, br, bc).t() } else { Mat::new(d, br, bc) };
    let m = if ta { ac } else { ar };
    let n = if tb { br } else { bc };
    let mut out = vec![0.0; m * n];
    gemm(1.0, ma(a.data()), mb(b.data()), 0.0, &mut out, n);
    Var::from_op(
        Tensor::new(vec![m, n], out),
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let (a, b) = (p[0].value(), p[1].value());
            let gm = Mat::new(g.data(), m, n);
            let ga = p[0].requires_grad().then(|| {
                // dA = dC op(B)^T, stored in A's layout
                let mut d = vec![0.0; ar * ac];
                let bm = if tb { Mat::new(b.data(), br, bc).t() } else { Mat::new(b.data(), br, bc) };
                if ta {
                    gemm(1.0, bm, gm.t(), 0.0, &mut d, ac);
                } else {
                    gemm(1.0, gm, bm.t(), 0.0, &mut d, ac);
                }
                Tensor::new(vec![ar, ac], d)
            });
            let gb = p[1].requires_grad().then(|| {
                let mut d = vec![0.0; br * bc];
                let am = if ta { Mat::new(a.data(), ar, ac).t() } else { Mat::new(a.data(), ar, ac) };
                if tb {
                    gemm(1.0, gm.t(), am, 0.0, &mut d, bc);
                } else {
                    gemm(1.0, am.t(), gm, 0.0, &mut d, bc);
                }
                Tensor::new(vec![br, bc], d)
            });
            vec![ga, gb]
        }),
    )
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    matmul_ex(a, false, b, false)
}

/// Swap the two axes of `[r, rest]`, giving a 2-D `[rest, r]`.
pub fn transpose(x: &Var) -> Var {
    let (r, c) = rows_cols(x.shape());
    let src = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Var::from_op(
        Tensor::new(vec![c, r], out),
        vec![x.clone()],
        Box::new(move |g, p| {
            let mut d = vec![0.0; r * c];
            for j in 0..c {
                for i in 0..r {
                    d[i * c + j] = g.data()[j * r + i];
                }
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
        }),
    )
}

/// `x @ w^T + b` for tokens `x: [T, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Var {
    let y = matmul_ex(x, false, w, true);
    match b {
        Some(b) => add_row_vec(&y, b),
        None => y,
    }
}

/// Add `b` (length = row length) to every row.
pub fn add_row_vec(x: &Var, b: &Var) -> Var {
    let (_, c) = rows_cols(x.shape());
    assert_eq!(b.value().len(), c, "add_row_vec length");
    let mut d = x.data().to_vec();
    for row in d.chunks_mut(c) {
        row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
    }
    Var::from_op(
        Tensor::new(x.shape().to_vec(), d),
        vec![x.clone(), b.clone()],
        Box::new(move |g, p| {
            let gb = p[1].requires_grad().then(|| {
                let mut s = vec![0.0; c];
                for row in g.data().chunks(c) {
                    s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                Tensor::new(p[1].shape().to_vec(), s)
            });
            vec![Some(g.clone()), gb]
        }),
    )
}

/// Add `b[i]` to every element of row `i` (per-channel bias).
pub fn add_col_vec(x: &Var, b: &Var) -> Var {
    let (r, c) = rows_cols(x.shape());
    assert_eq!(b.value().len(), r, "add_col_vec length");
    let mut d = x.data().to_vec();
    for (row, bv) in d.chunks_mut(c).zip(b.data()) {
        row.iter_mut().for_each(|v| *v += bv);
    }
    Var::from_op(
        Tensor::new(x.shape().to_vec(), d),
        vec![x.clone(), b.clone()],
        Box::new(move |g, p| {
            let gb = p[1].requires_grad().then(|| {
                let s = g.data().chunks(c).map(|row| row.iter().sum()).collect();
                Tensor::new(p[1].shape().to_vec(), s)
            });
            vec![Some(g.clone()), gb]
        }),
    )
}

/// Multiply every row elementwise by `s` (length = row length).
pub fn mul_row_vec(x: &Var, s: &Var) -> Var {
    let (_, c) = rows_cols(x.shape());
    assert_eq!(s.value().len(), c, "mul_row_vec length");
    let mut d = x.data().to_vec();
    for row in d.chunks_mut(c) {
        row.iter_mut().zip(s.data()).for_each(|(v, sv)| *v *= sv);
    }
    Var::from_op(
        Tensor::new(x.shape().to_vec(), d),
        vec![x.clone(), s.clone()],
        Box::new(move |g, p| {
            let (x, s) = (p[0].value(), p[1].value());
            let gx = p[0].requires_grad().then(|| {
                let mut d = g.data().to_vec();
                for row in d.chunks_mut(c) {
                    row.iter_mut().zip(s.data()).for_each(|(v, sv)| *v *= sv);
                }
                Tensor::new(x.shape().to_vec(), d)
            });
            let gs = p[1].requires_grad().then(|| {
                let mut acc = vec![0.0; c];
                for (grow, xrow) in g.data().chunks(c).zip(x.data().chunks(c)) {
                    for ((a, gv), xv) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += gv * xv;
                    }
                }
                Tensor::new(s.shape().to_vec(), acc)
            });
            vec![gx, gs]
        }),
    )
}

/// Multiply row `i` by `s[i]` (per-channel scale).
pub fn mul_col_vec(x: &Var, s: &Var) -> Var {
    let (r, c) = rows_cols(x.shape());
    assert_eq!(s.value().len(), r, "mul_col_vec length");
    let mut d = x.data().to_vec();
    for (row, sv) in d.chunks_mut(c).zip(s.data()) {
        row.iter_mut().for_each(|v| *v *= sv);
    }
    Var::from_op(
        Tensor::new(x.shape().to_vec(), d),
        vec![x.clone(), s.clone()],
        Box::new(move |g, p| {
            let (x, s) = (p[0].value(), p[1].value());
            let gx = p[0].requires_grad().then(|| {
                let mut d = g.data().to_vec();
                for (row, sv) in d.chunks_mut(c).zip(s.data()) {
                    row.iter_mut().for_each(|v| *v *= sv);
                }
                Tensor::new(x.shape().to_vec(), d)
            });
            let gs = p[1].requires_grad().then(|| {
                let acc = g
                    .data()
                    .chunks(c)
                    .zip(x.data().chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::new(s.shape().to_vec(), acc)
            });
            vec![gx, gs]
        }),
    )
}

/// Stack along the first axis; trailing dimensions must agree.
pub fn concat_rows(parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat of nothing");
    let tail = parts[0].shape()[1..].to_vec();
    let mut rows = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        assert_eq!(&p.shape()[1..], &tail[..], "concat_rows trailing shape");
        rows.push(p.shape()[0]);
        data.extend_from_slice(p.data());
    }
    let total: usize = rows.iter().sum();
    let mut shape = vec![total];
    shape.extend_from_slice(&tail);
    let inner: usize = tail.iter().product();
    Var::from_op(
        Tensor::new(shape, data),
        parts.to_vec(),
        Box::new(move |g, p| {
            let mut start = 0;
            p.iter()
                .zip(&rows)
                .map(|(pv, &r)| {
                    let s = start * inner;
                    start += r;
                    pv.requires_grad()
                        .then(|| Tensor::new(pv.shape().to_vec(), g.data()[s..s + r * inner].to_vec()))
                })
                .collect()
        }),
    )
}

/// Rows `start..end` of the first axis.
pub fn slice_rows(x: &Var, start: usize, end: usize) -> Var {
    let r = x.shape()[0];
    assert!(start <= end && end <= r, "slice_rows {start}..{end} of {r}");
    let inner: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    let data = x.data()[start * inner..end * inner].to_vec();
    Var::from_op(
        Tensor::new(shape, data),
        vec![x.clone()],
        Box::new(move |g, p| {
            let mut d = Tensor::zeros(p[0].shape().to_vec());
            d.data_mut()[start * inner..end * inner].copy_from_slice(g.data());
            vec![Some(d)]
        }),
    )
}

/// Average over the first axis: `[r, c] -> [1, c]`.
pub fn mean_rows(x: &Var) -> Var {
    let (r, c) = rows_cols(x.shape());
    let mut acc = vec![0.0f32; c];
    for row in x.data().chunks(c) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= r as f32);
    Var::from_op(
        Tensor::new(vec![1, c], acc),
        vec![x.clone()],
        Box::new(move |g, p| {
            let mut d = Vec::with_capacity(r * c);
            for _ in 0..r {
                d.extend(g.data().iter().map(|v| v / r as f32));
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
        }),
    )
}

/// Zero-mean, unit-variance per row (population variance + `eps`).
pub fn normalize_rows(x: &Var, eps: f32) -> Var {
    let (r, c) = rows_cols(x.shape());
    let mut out = vec![0.0f32; r * c];
    let mut inv_std = vec![0.0f32; r];
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std[i] = is as f32;
        for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = ((v as f64 - mean) * is) as f32;
        }
    }
    let xhat = out.clone();
    Var::from_op(
        Tensor::new(x.shape().to_vec(), out),
        vec![x.clone()],
        Box::new(move |g, p| {
            // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
            let mut d = vec![0.0f32; r * c];
            for i in 0..r {
                let gr = &g.data()[i * c..(i + 1) * c];
                let xr = &xhat[i * c..(i + 1) * c];
                let mg = gr.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                let mgx = gr.iter().zip(xr).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / c as f64;
                for j in 0..c {
                    d[i * c + j] = (inv_std[i] as f64 * (gr[j] as f64 - mg - xr[j] as f64 * mgx)) as f32;
                }
            }
            vec![Some(Tensor::new(p[0].shape().to_vec(), d))]
        }),
    )
}

/// Token-wise layer norm over the last axis of `[T, C]`.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var) -> Var {
    add_row_vec(&mul_row_vec(&normalize_rows(x, 1e-5), gamma), beta)
}

/// Per-channel normalization of `[C, ...]` over the spatial extent.
pub fn instance_norm(x: &Var, gamma: &Var, beta: &Var) -> Var {
    add_col_vec(&mul_col_vec(&normalize_rows(x, 1e-5), gamma), beta)
}
