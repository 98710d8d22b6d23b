//! Shallow refinement network applied to the selected candidate.

use super::config::ModelConfig;
use super::layers::{act, Builder, Conv};
use crate::nn::{ops, resize_trilinear, Bound, ConvGeom, Var};

/// Input channels: image, selected binary mask, cumulative positive and negative prompt maps.
pub const CORRECTIVE_INPUTS: usize = 4;

#[derive(Debug, Clone)]
struct Residual {
    a: Conv,
    b: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct Corrective {
    stem: Conv,
    blocks: [Residual; 2],
    branch3: Conv,
    branch1: Conv,
    shortcut: Conv,
    factor: usize,
}

impl Corrective {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("corrective");
        let c = cfg.corrective_channels;
        let res = |b: &mut Builder, i: usize| {
            let mut s = b.scope(&format!("res{i}"));
            Residual {
                a: Conv::new(&mut s, "a", c, c, ConvGeom::SAME3, true),
                b: Conv::new(&mut s, "b", c, c, ConvGeom::SAME3, true),
            }
        };
        let stem = Conv::new(&mut b, "stem", CORRECTIVE_INPUTS, c, ConvGeom::SAME3, true);
        let blocks = [res(&mut b, 0), res(&mut b, 1)];
        Self {
            stem,
            blocks,
            branch3: Conv::new(&mut b, "branch3", c, 1, ConvGeom::SAME3, true),
            branch1: Conv::new(&mut b, "branch1", c, 1, ConvGeom::POINTWISE, true),
            shortcut: Conv::new(&mut b, "shortcut", CORRECTIVE_INPUTS, 1, ConvGeom::POINTWISE, false),
            factor: cfg.corrective_factor,
        }
    }

    /// `x_c: [4, D, H, W]` → refined logits `[1, D, H, W]`.
    pub fn apply(&self, p: &Bound, x_c: &Var) -> Var {
        let shape = x_c.shape().to_vec();
        assert_eq!(shape.len(), 4, "corrective input must be [C, D, H, W]");
        assert_eq!(shape[0], CORRECTIVE_INPUTS, "corrective input needs {CORRECTIVE_INPUTS} channels");
        let full = [shape[1], shape[2], shape[3]];
        let low = full.map(|n| n / self.factor);
        let mut x = act(&self.stem.apply(p, &resize_trilinear(x_c, low)));
        for r in &self.blocks {
            let y = r.b.apply(p, &act(&r.a.apply(p, &x)));
            x = act(&ops::add(&x, &y));
        }
        let low_out = ops::add(&self.branch3.apply(p, &x), &self.branch1.apply(p, &x));
        // full-resolution 1x1 shortcut keeps boundaries the coarse path cannot represent
        ops::add(&resize_trilinear(&low_out, full), &self.shortcut.apply(p, x_c))
    }
}
