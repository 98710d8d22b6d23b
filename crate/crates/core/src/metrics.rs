//! Overlap and surface metrics, and per-iteration summaries.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::volume::{BinaryMask, Shape3};

/// `2|a∩b| / (|a|+|b|)`; two empty masks score 1.
pub fn dice_score(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one face neighbour outside the mask (or outside the grid).
pub fn surface_voxels(m: &BinaryMask) -> Vec<[usize; 3]> {
    let s = m.shape();
    m.coords()
        .into_iter()
        .filter(|&c| {
            (0..3).any(|a| {
                [-1i64, 1].iter().any(|&d| {
                    let mut n = c.map(|v| v as i64);
                    n[a] += d;
                    s.checked_index(n).is_none_or(|i| !m.data()[i])
                })
            })
        })
        .collect()
}

/// Offsets whose physical length is within `tau`.
fn ball_offsets(tau: f64, spacing: [f64; 3], shape: Shape3) -> Vec<[i64; 3]> {
    let r: [i64; 3] = std::array::from_fn(|a| {
        let steps = (tau / spacing[a]).floor() as i64;
        steps.min(shape.0[a] as i64)
    });
    let mut out = Vec::new();
    for dz in -r[0]..=r[0] {
        for dy in -r[1]..=r[1] {
            for dx in -r[2]..=r[2] {
                let o = [dz, dy, dx];
                if physical_distance(o, spacing) <= tau {
                    out.push(o);
                }
            }
        }
    }
    out
}

fn physical_distance(o: [i64; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|a| (o[a] as f64 * spacing[a]).powi(2)).sum::<f64>().sqrt()
}

/// Normalised surface Dice at tolerance `tau` (in spacing units).
/// Both surfaces empty score 1; exactly one empty scores 0.
pub fn nsd_score(a: &BinaryMask, b: &BinaryMask, tau: f64, spacing: [f64; 3]) -> Result<f64> {
    ensure_same_shape(a.shape(), b.shape())?;
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tolerance {tau} must be finite and >= 0")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
    }
    let shape = a.shape();
    let (sa, sb) = (surface_voxels(a), surface_voxels(b));
    if sa.is_empty() && sb.is_empty() {
        return Ok(1.0);
    }
    if sa.is_empty() || sb.is_empty() {
        return Ok(0.0);
    }
    let on_surface = |voxels: &[[usize; 3]]| {
        let mut m = vec![false; shape.len()];
        for &c in voxels {
            m[shape.index(c)] = true;
        }
        m
    };
    let (ma, mb) = (on_surface(&sa), on_surface(&sb));
    let offsets = ball_offsets(tau, spacing, shape);
    let close = |from: &[[usize; 3]], to: &[bool]| {
        from.iter()
            .filter(|c| {
                offsets.iter().any(|o| {
                    shape
                        .checked_index([c[0] as i64 + o[0], c[1] as i64 + o[1], c[2] as i64 + o[2]])
                        .is_some_and(|i| to[i])
                })
            })
            .count()
    };
    let hits = close(&sa, &mb) + close(&sb, &ma);
    Ok(hits as f64 / (sa.len() + sb.len()) as f64)
}

/// Mean and 95% half-width (`1.96 · sd / √n`, sample sd; 0 below two values).
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Per-iteration means over a case set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationCurve {
    pub dice: Vec<f64>,
    pub dice_ci: Vec<f64>,
    pub nsd: Vec<f64>,
    pub nsd_ci: Vec<f64>,
    pub cases: usize,
}

impl IterationCurve {
    /// `dice[case][iteration]`, `nsd[case][iteration]`; every case must have the same length.
    pub fn from_values(dice: &[Vec<f64>], nsd: &[Vec<f64>]) -> Result<Self> {
        if dice.is_empty() || dice.len() != nsd.len() {
            return Err(Error::InvalidArgument("need the same non-zero number of Dice and NSD rows".into()));
        }
        let n_iter = dice[0].len();
        if dice.iter().chain(nsd).any(|r| r.len() != n_iter) {
            return Err(Error::InvalidArgument("sessions differ in iteration count".into()));
        }
        let column = |rows: &[Vec<f64>], i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
        let (dice_m, dice_ci): (Vec<_>, Vec<_>) = (0..n_iter).map(|i| mean_ci(&column(dice, i))).unzip();
        let (nsd_m, nsd_ci): (Vec<_>, Vec<_>) = (0..n_iter).map(|i| mean_ci(&column(nsd, i))).unzip();
        Ok(Self { dice: dice_m, dice_ci, nsd: nsd_m, nsd_ci, cases: dice.len() })
    }

    pub fn iterations(&self) -> usize {
        self.dice.len()
    }

    pub fn final_dice(&self) -> f64 {
        *self.dice.last().expect("curve has at least one iteration")
    }
}
