//! Upsampling decoder and the confidence-scored mask heads.

use super::config::ModelConfig;
use super::layers::{act, Builder, Conv, Mlp, Norm};
use crate::nn::{ops, resize_trilinear, Bound, ConvGeom, Var};

#[derive(Debug, Clone)]
struct Level {
    lateral: Conv,
    conv: Conv,
    norm: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    levels: Vec<Level>,
    patch: usize,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("decoder");
        let mut cin = cfg.embed_dim();
        let mut levels = Vec::new();
        // coarse to fine: level depth-1 down to 0
        for level in (0..cfg.depth).rev() {
            let c = cfg.level_channels(level);
            let cout = if level == 0 { cfg.decoder_channels } else { c };
            let mut s = b.scope(&format!("level{level}"));
            levels.push(Level {
                lateral: Conv::new(&mut s, "lateral", cin, c, ConvGeom::POINTWISE, true),
                conv: Conv::new(&mut s, "conv", c, cout, ConvGeom::SAME3, false),
                norm: Norm::new(&mut s, "norm", cout),
            });
            cin = cout;
        }
        Self { levels, patch: cfg.patch_size }
    }

    /// `z_x: [C_e, s, s, s]`, `skips` finest first (may be empty). Returns `f_d: [C_d, D, H, W]`.
    pub fn apply(&self, p: &Bound, z_x: &Var, skips: &[Var]) -> Var {
        let depth = self.levels.len();
        let mut x = z_x.clone();
        for (i, lvl) in self.levels.iter().enumerate() {
            let level = depth - 1 - i;
            let n = self.patch >> level;
            // projecting before upsampling is cheaper and equivalent (both are linear)
            x = resize_trilinear(&lvl.lateral.apply(p, &x), [n, n, n]);
            if let Some(skip) = skips.get(level) {
                x = ops::add(&x, skip);
            }
            x = act(&lvl.norm.instance(p, &lvl.conv.apply(p, &x)));
        }
        x
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Heads {
    mask_mlps: Vec<Mlp>,
    score_mlps: Vec<Mlp>,
}

/// Candidate logit maps `[M, N]` from per-head vectors `[M, C_d]` and `f_d: [C_d, ...]`:
/// `m_j(v) = <vectors_j, f_d(v)>`.
pub fn maps_from_vectors(vectors: &Var, f_d: &Var) -> Var {
    let c = f_d.shape()[0];
    let n = f_d.value().len() / c;
    ops::matmul(vectors, &ops::reshape(f_d, &[c, n]))
}

/// Index of the largest score; the first one wins ties.
pub fn select_index(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl Heads {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("heads");
        let e = cfg.embed_dim();
        let mask_mlps = (0..cfg.mask_heads)
            .map(|j| Mlp::new(&mut b, &format!("mask{j}"), e, e / 2, cfg.decoder_channels))
            .collect();
        let score_mlps = (0..cfg.mask_heads)
            .map(|j| Mlp::new(&mut b, &format!("score{j}"), e, e / 4, 1))
            .collect();
        Self { mask_mlps, score_mlps }
    }

    /// Returns `(maps [M, N], scores [M, 1])` from `f_d` and the visual embedding `Z_v`.
    pub fn apply(&self, p: &Bound, f_d: &Var, z_v: &Var) -> (Var, Var) {
        let pooled = ops::mean_rows(z_v);
        let vectors: Vec<Var> = self.mask_mlps.iter().map(|m| m.apply(p, &pooled)).collect();
        let scores: Vec<Var> = self.score_mlps.iter().map(|m| m.apply(p, &pooled)).collect();
        (maps_from_vectors(&ops::concat_rows(&vectors), f_d), ops::concat_rows(&scores))
    }
}
