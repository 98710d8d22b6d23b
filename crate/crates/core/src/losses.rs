//! Supervision terms.
//!
//! Each loss is an f64 function returning its value and its gradient with
//! respect to the logits, so the same code serves finite-difference checks and
//! the autograd graph (through the `*_var` wrappers). Sigmoid is applied inside
//! every loss; networks emit raw logits.

use serde::{Deserialize, Serialize};

use crate::nn::{ops, Tensor, Var};
use crate::volume::Shape3;

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub structural: f64,
    pub boundary: f64,
    pub regression: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { structural: 1.0, boundary: 10.0, regression: 1.0 }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn probs(m: &[f64]) -> Vec<f64> {
    m.iter().map(|&v| sigmoid(v)).collect()
}

/// Soft Dice loss on probabilities (or hard 0/1 masks).
pub fn dice_loss_from_probs(p: &[f64], y: &[f64]) -> f64 {
    assert_eq!(p.len(), y.len(), "dice_loss: length mismatch");
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>();
    1.0 - (2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)
}

/// Soft Dice loss on logits, with its gradient.
pub fn dice_loss(m: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(m.len(), y.len(), "dice_loss: length mismatch");
    let p = probs(m);
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + y.iter().sum::<f64>() + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let value = 1.0 - numer / denom;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&pk, &yk)| -(2.0 * yk * denom - numer) / (denom * denom) * pk * (1.0 - pk))
        .collect();
    (value, grad)
}

/// Voxel-mean binary cross-entropy on `sigmoid(m)`.
pub fn ce_loss(m: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(m.len(), y.len(), "ce_loss: length mismatch");
    let n = m.len() as f64;
    let value = m.iter().zip(y).map(|(&x, &t)| softplus(x) - t * x).sum::<f64>() / n;
    let grad = m.iter().zip(y).map(|(&x, &t)| (sigmoid(x) - t) / n).collect();
    (value, grad)
}

/// Dice plus cross-entropy.
pub fn structural_loss(m: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let (d, gd) = dice_loss(m, y);
    let (c, gc) = ce_loss(m, y);
    (d + c, gd.iter().zip(&gc).map(|(a, b)| a + b).collect())
}

/// 3x3x3 window sums, stride 1, zero padding.
fn window_sum3(x: &[f64], shape: Shape3) -> Vec<f64> {
    assert_eq!(x.len(), shape.len(), "window_sum3: length mismatch");
    let [d, h, w] = shape.0;
    let strides = [h * w, w, 1];
    let dims = [d, h, w];
    let mut cur = x.to_vec();
    for axis in 0..3 {
        let (n, st) = (dims[axis], strides[axis]);
        let mut next = cur.clone();
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / st) % n;
            if pos > 0 {
                *out += cur[i - st];
            }
            if pos + 1 < n {
                *out += cur[i + st];
            }
        }
        cur = next;
    }
    cur
}

/// 3x3x3 mean filter, stride 1, zero padding, always divided by 27.
pub fn average_pool3(x: &[f64], shape: Shape3) -> Vec<f64> {
    window_sum3(x, shape).into_iter().map(|v| v / 27.0).collect()
}

/// Signed `x - P_ave(x)`, computed as `(27x - Σ) / 27` so small integer cases round exactly.
fn centred(x: &[f64], shape: Shape3) -> Vec<f64> {
    window_sum3(x, shape).iter().zip(x).map(|(s, v)| (27.0 * v - s) / 27.0).collect()
}

/// `|x - P_ave(x)|` for probabilities or binary maps.
pub fn boundary_map(x: &[f64], shape: Shape3) -> Vec<f64> {
    centred(x, shape).into_iter().map(f64::abs).collect()
}

/// `MSE(B(sigmoid(m)), B(y))` with its gradient.
pub fn boundary_loss(m: &[f64], y: &[f64], shape: Shape3) -> (f64, Vec<f64>) {
    let by = boundary_map(y, shape);
    boundary_loss_with_target(m, &by, shape)
}

fn boundary_loss_with_target(m: &[f64], by: &[f64], shape: Shape3) -> (f64, Vec<f64>) {
    let n = m.len() as f64;
    let p = probs(m);
    let u = centred(&p, shape);
    let value = u.iter().zip(by).map(|(uk, bk)| (uk.abs() - bk).powi(2)).sum::<f64>() / n;
    // d/du of (|u| - b)^2 / n, then through (I - P); P is symmetric
    let r: Vec<f64> = u
        .iter()
        .zip(by)
        .map(|(&uk, &bk)| if uk == 0.0 { 0.0 } else { 2.0 * (uk.abs() - bk) * uk.signum() / n })
        .collect();
    let pr = average_pool3(&r, shape);
    let grad = r
        .iter()
        .zip(&pr)
        .zip(&p)
        .map(|((rk, prk), pk)| (rk - prk) * pk * (1.0 - pk))
        .collect();
    (value, grad)
}

/// `(s - (1 - dice_loss(m, y)))^2` with the target detached: returns `(value, d/ds)`.
pub fn regression_loss(s: f64, m: &[f64], y: &[f64]) -> (f64, f64) {
    let target = 1.0 - dice_loss(m, y).0;
    ((s - target).powi(2), 2.0 * (s - target))
}

/// `λ_s L_s + λ_b L_b` on the corrected logits.
pub fn corrective_loss(m: &[f64], y: &[f64], shape: Shape3, w: &LossWeights) -> (f64, Vec<f64>) {
    let (s, gs) = structural_loss(m, y);
    let (b, gb) = boundary_loss(m, y, shape);
    let grad = gs.iter().zip(&gb).map(|(a, c)| w.structural * a + w.boundary * c).collect();
    (w.structural * s + w.boundary * b, grad)
}

/// Per-head terms of the confidence loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTerms {
    pub structural: f64,
    pub boundary: f64,
    pub regression: f64,
}

impl HeadTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.structural * self.structural + w.boundary * self.boundary + w.regression * self.regression
    }
}

/// `Σ_j λ_s L_s(m_j) + λ_b L_b(m_j) + λ_r L_r(s_j, m_j)` over all heads.
/// Returns the value, per-head terms, and gradients w.r.t. each map and score.
pub fn confidence_loss(
    maps: &[Vec<f64>],
    scores: &[f64],
    y: &[f64],
    shape: Shape3,
    w: &LossWeights,
) -> (f64, Vec<HeadTerms>, Vec<Vec<f64>>, Vec<f64>) {
    assert_eq!(maps.len(), scores.len(), "one score per map");
    let by = boundary_map(y, shape);
    let mut total = 0.0;
    let mut terms = Vec::new();
    let mut map_grads = Vec::new();
    let mut score_grads = Vec::new();
    for (m, &s) in maps.iter().zip(scores) {
        let (ls, gs) = structural_loss(m, y);
        let (lb, gb) = boundary_loss_with_target(m, &by, shape);
        let (lr, gr) = regression_loss(s, m, y);
        let t = HeadTerms { structural: ls, boundary: lb, regression: lr };
        total += t.weighted(w);
        terms.push(t);
        map_grads.push(gs.iter().zip(&gb).map(|(a, b)| w.structural * a + w.boundary * b).collect());
        score_grads.push(w.regression * gr);
    }
    (total, terms, map_grads, score_grads)
}

/// `Σ_i (L_con_i + L_cor_i)`.
pub fn total_loss(per_iteration: &[(f64, f64)]) -> f64 {
    per_iteration.iter().map(|(a, b)| a + b).sum()
}

fn to_f64(v: &Var) -> Vec<f64> {
    v.data().iter().map(|&x| x as f64).collect()
}

/// Scalar graph node with a precomputed gradient w.r.t. one input.
fn scalar_node(input: &Var, value: f64, grad: Vec<f64>) -> Var {
    let grad = Tensor::new(input.shape().to_vec(), grad.into_iter().map(|g| g as f32).collect());
    Var::from_op(
        Tensor::scalar(value as f32),
        vec![input.clone()],
        Box::new(move |g, _| vec![Some(grad.clone().scaled(g.data()[0]))]),
    )
}

/// Confidence loss as a graph node over `maps: [M, N]` and `scores: [M, 1]`.
/// Returns the node and the per-head terms.
pub fn confidence_loss_var(
    maps: &Var,
    scores: &Var,
    y: &[f64],
    shape: Shape3,
    w: &LossWeights,
) -> (Var, Vec<HeadTerms>) {
    let m_rows = maps.shape()[0];
    let n = shape.len();
    let flat = to_f64(maps);
    let rows: Vec<Vec<f64>> = flat.chunks(n).map(|c| c.to_vec()).collect();
    let s = to_f64(scores);
    assert_eq!(rows.len(), m_rows);
    let (value, terms, map_grads, score_grads) = confidence_loss(&rows, &s, y, shape, w);
    let gm: Vec<f32> = map_grads.into_iter().flatten().map(|g| g as f32).collect();
    let gm = Tensor::new(maps.shape().to_vec(), gm);
    let gs = Tensor::new(scores.shape().to_vec(), score_grads.iter().map(|&g| g as f32).collect());
    let node = Var::from_op(
        Tensor::scalar(value as f32),
        vec![maps.clone(), scores.clone()],
        Box::new(move |g, _| {
            let k = g.data()[0];
            vec![Some(gm.clone().scaled(k)), Some(gs.clone().scaled(k))]
        }),
    );
    (node, terms)
}

/// Corrective loss as a graph node over `y′` (any shape with `shape.len()` elements).
pub fn corrective_loss_var(refined: &Var, y: &[f64], shape: Shape3, w: &LossWeights) -> Var {
    let (value, grad) = corrective_loss(&to_f64(refined), y, shape, w);
    scalar_node(refined, value, grad)
}

pub fn structural_loss_var(m: &Var, y: &[f64]) -> Var {
    let (value, grad) = structural_loss(&to_f64(m), y);
    scalar_node(m, value, grad)
}

pub fn boundary_loss_var(m: &Var, y: &[f64], shape: Shape3) -> Var {
    let (value, grad) = boundary_loss(&to_f64(m), y, shape);
    scalar_node(m, value, grad)
}

/// Sum of scalar nodes.
pub fn sum_losses(terms: &[Var]) -> Var {
    let stacked = ops::concat_rows(terms);
    ops::sum(&stacked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_logits(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    fn rand_mask(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
    }

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) {
        let eps = 1e-4;
        for i in 0..x.len() {
            let mut a = x.to_vec();
            a[i] += eps;
            let mut b = x.to_vec();
            b[i] -= eps;
            let numeric = (f(&a) - f(&b)) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(err <= 1e-4, "elem {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }

    #[test]
    fn dice_examples() {
        let y = vec![1.0, 1.0, 0.0, 0.0];
        let sat: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 40.0 } else { -40.0 }).collect();
        assert!(dice_loss(&sat, &y).0 <= 1e-4);
        assert!(dice_loss(&[-40.0; 4], &y).0 >= 1.0 - 1e-4);
        let p = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let t = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        assert!((dice_loss_from_probs(&p, &t) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn ce_examples() {
        let y = [1.0, 0.0, 1.0];
        assert!((ce_loss(&[0.0; 3], &y).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_loss(&[800.0, -800.0, 800.0], &y).0 < 1e-12);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let m = rand_logits(27, &mut r);
        let t = rand_mask(27, &mut r);
        let mut oracle = 0.0;
        for i in 0..27 {
            let p = 1.0 / (1.0 + (-m[i]).exp());
            oracle -= t[i] * p.ln() + (1.0 - t[i]) * (1.0 - p).ln();
        }
        assert!((ce_loss(&m, &t).0 - oracle / 27.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_single_voxel() {
        let s = Shape3::cube(5);
        let mut x = vec![0.0; 125];
        x[s.index([2, 2, 2])] = 1.0;
        let b = boundary_map(&x, s);
        assert_eq!(b[s.index([2, 2, 2])], 26.0 / 27.0);
        assert_eq!(b[s.index([2, 2, 3])], 1.0 / 27.0);
        assert_eq!(b[s.index([0, 0, 0])], 0.0);
    }

    #[test]
    fn boundary_of_solid_cube_is_a_shell() {
        let s = Shape3::cube(10);
        let x: Vec<f64> = (0..s.len())
            .map(|i| {
                let c = s.coord(i);
                if c.iter().all(|&v| (2..8).contains(&v)) { 1.0 } else { 0.0 }
            })
            .collect();
        let b = boundary_map(&x, s);
        for i in 0..s.len() {
            let c = s.coord(i);
            if c.iter().all(|&v| (3..7).contains(&v)) || c.iter().any(|&v| !(1..9).contains(&v)) {
                assert_eq!(b[i], 0.0, "{c:?}");
            }
        }
    }

    #[test]
    fn losses_vanish_on_perfect_or_constant_inputs() {
        let s = Shape3::cube(3);
        let y = vec![0.0; 27];
        assert_eq!(boundary_loss(&[-800.0; 27], &y, s).0, 0.0);
        let ones = vec![1.0; 27];
        assert!(boundary_loss(&[800.0; 27], &ones, s).0 < 1e-20);
        assert_eq!(regression_loss(1.0, &[800.0; 27], &ones).0, 0.0);
        assert!((regression_loss(0.0, &[800.0; 27], &ones).0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let s = Shape3::cube(3);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let m = rand_logits(27, &mut r);
            let y = rand_mask(27, &mut r);
            fd_check(|x| dice_loss(x, &y).0, &m, &dice_loss(&m, &y).1);
            fd_check(|x| ce_loss(x, &y).0, &m, &ce_loss(&m, &y).1);
            fd_check(|x| structural_loss(x, &y).0, &m, &structural_loss(&m, &y).1);
            fd_check(|x| boundary_loss(x, &y, s).0, &m, &boundary_loss(&m, &y, s).1);
            let w = LossWeights::default();
            fd_check(|x| corrective_loss(x, &y, s, &w).0, &m, &corrective_loss(&m, &y, s, &w).1);
            let sc = r.random_range(-1.0..1.0);
            let (_, ds) = regression_loss(sc, &m, &y);
            fd_check(|x| regression_loss(x[0], &m, &y).0, &[sc], &[ds]);
        }
    }

    #[test]
    fn confidence_loss_composition() {
        let s = Shape3::cube(3);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let w = LossWeights::default();
        let y = rand_mask(27, &mut r);
        let m = rand_logits(27, &mut r);
        let (one, ..) = confidence_loss(&[m.clone()], &[0.3], &y, s, &w);
        let direct = structural_loss(&m, &y).0 + 10.0 * boundary_loss(&m, &y, s).0 + regression_loss(0.3, &m, &y).0;
        assert!((one - direct).abs() < 1e-12);
        let (three, ..) = confidence_loss(&[m.clone(), m.clone(), m.clone()], &[0.3; 3], &y, s, &w);
        assert!((three - 3.0 * one).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum() {
        assert!((total_loss(&[(0.3, 0.2)]) - 0.5).abs() < 1e-15);
        assert_eq!(total_loss(&[(0.0, 0.0), (0.0, 0.0)]), 0.0);
    }

    #[test]
    fn graph_nodes_carry_analytic_gradients() {
        let s = Shape3::cube(3);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let m = rand_logits(27, &mut r);
        let y = rand_mask(27, &mut r);
        let v = Var::leaf(Tensor::new(vec![1, 3, 3, 3], m.iter().map(|&x| x as f32).collect()));
        let l = corrective_loss_var(&v, &y, s, &LossWeights::default());
        let g = crate::nn::backward(&l);
        let m32: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
        let (val, grad) = corrective_loss(&m32, &y, s, &LossWeights::default());
        assert!((l.item() as f64 - val).abs() < 1e-5);
        for (a, b) in g.leaf(&v).unwrap().data().iter().zip(&grad) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
