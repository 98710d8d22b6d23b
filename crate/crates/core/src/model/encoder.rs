//! Image encoder: a convolutional pyramid, a patch transformer, or both.

use std::rc::Rc;

use super::config::{EncoderVariant, ModelConfig};
use super::layers::{act, Attention, Builder, Conv, Mlp, Norm};
use crate::nn::{ops, Bound, ConvGeom, Init, ParamId, Var};

/// Features computed once per episode.
#[derive(Debug, Clone)]
pub struct ImageEncoding {
    /// Full-resolution image `[1, D, H, W]`, reused by the corrective net.
    pub image: Var,
    /// Convolutional features for levels `0..depth` (finest first); empty without the CNN path.
    pub skips: Vec<Var>,
    /// Fused bottleneck features `[C_e, s, s, s]`.
    pub features: Var,
}

#[derive(Debug, Clone)]
struct Stage {
    conv_a: Conv,
    norm_a: Norm,
    conv_b: Conv,
    norm_b: Norm,
}

impl Stage {
    fn apply(&self, p: &Bound, x: &Var) -> Var {
        let x = act(&self.norm_a.instance(p, &self.conv_a.apply(p, x)));
        act(&self.norm_b.instance(p, &self.conv_b.apply(p, &x)))
    }
}

#[derive(Debug, Clone)]
struct CnnPath {
    stages: Vec<Stage>,
    proj: Conv,
}

#[derive(Debug, Clone)]
struct VitBlock {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct VitPath {
    embed: Conv,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    norm: Norm,
    proj: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    cnn: Option<CnnPath>,
    vit: Option<VitPath>,
    patch: usize,
    bottleneck: usize,
    embed: usize,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("encoder");
        let e = cfg.embed_dim();
        let cnn = matches!(cfg.encoder, EncoderVariant::Cnn | EncoderVariant::Hybrid).then(|| {
            let mut s = b.scope("cnn");
            let mut stages = Vec::new();
            for level in 0..=cfg.depth {
                let cout = cfg.level_channels(level);
                let (cin, first) = if level == 0 {
                    (1, ConvGeom::SAME3)
                } else {
                    (cfg.level_channels(level - 1), ConvGeom::patch(2))
                };
                let mut l = s.scope(&format!("level{level}"));
                stages.push(Stage {
                    conv_a: Conv::new(&mut l, "conv_a", cin, cout, first, false),
                    norm_a: Norm::new(&mut l, "norm_a", cout),
                    conv_b: Conv::new(&mut l, "conv_b", cout, cout, ConvGeom::SAME3, false),
                    norm_b: Norm::new(&mut l, "norm_b", cout),
                });
            }
            let proj = Conv::new(&mut s, "proj", cfg.level_channels(cfg.depth), e, ConvGeom::POINTWISE, true);
            CnnPath { stages, proj }
        });
        let vit = matches!(cfg.encoder, EncoderVariant::Vit | EncoderVariant::Hybrid).then(|| {
            let mut s = b.scope("vit");
            let tokens = cfg.bottleneck_size().pow(3);
            let embed = Conv::new(&mut s, "patch_embed", 1, e, ConvGeom::patch(1 << cfg.depth), true);
            let pos = s.param("pos", &[tokens, e], Init::Normal { std: 0.02 });
            let blocks = (0..cfg.transformer_blocks)
                .map(|i| {
                    let mut bl = s.scope(&format!("block{i}"));
                    VitBlock {
                        norm1: Norm::new(&mut bl, "norm1", e),
                        attn: Attention::new(&mut bl, "attn", e, cfg.heads),
                        norm2: Norm::new(&mut bl, "norm2", e),
                        mlp: Mlp::new(&mut bl, "mlp", e, 2 * e, e),
                    }
                })
                .collect();
            let norm = Norm::new(&mut s, "norm", e);
            let proj = Conv::new(&mut s, "proj", e, e, ConvGeom::POINTWISE, true);
            VitPath { embed, pos, blocks, norm, proj }
        });
        Self { cnn, vit, patch: cfg.patch_size, bottleneck: cfg.bottleneck_size(), embed: e }
    }

    /// `image` is `[1, D, H, W]` with edge = patch size.
    pub fn encode(&self, p: &Bound, image: &Var) -> ImageEncoding {
        assert_eq!(image.shape(), &[1, self.patch, self.patch, self.patch], "encoder input shape");
        let mut skips = Vec::new();
        let mut fused: Option<Var> = None;
        if let Some(cnn) = &self.cnn {
            let mut x = image.clone();
            for stage in &cnn.stages {
                x = stage.apply(p, &x);
                skips.push(x.clone());
            }
            skips.pop();
            fused = Some(cnn.proj.apply(p, &x));
        }
        if let Some(vit) = &self.vit {
            let s = self.bottleneck;
            let grid = vit.embed.apply(p, image);
            let mut t = ops::add(&ops::transpose(&grid), p.get(vit.pos));
            for blk in &vit.blocks {
                let a = blk.norm1.layer(p, &t);
                t = ops::add(&t, &blk.attn.apply(p, &a, &a, &a));
                t = ops::add(&t, &blk.mlp.apply(p, &blk.norm2.layer(p, &t)));
            }
            let t = vit.norm.layer(p, &t);
            let map = ops::reshape(&ops::transpose(&t), &[self.embed, s, s, s]);
            let v = vit.proj.apply(p, &map);
            fused = Some(match fused {
                Some(c) => ops::add(&c, &v),
                None => v,
            });
        }
        ImageEncoding { image: image.clone(), skips, features: fused.expect("at least one encoder path") }
    }

    pub(crate) fn vit_projection(&self) -> Option<(ParamId, Option<ParamId>)> {
        self.vit.as_ref().map(|v| (v.proj.weight(), v.proj.bias()))
    }
}

/// Per-episode memo of the image encoding, keyed by case id.
#[derive(Debug, Default)]
pub struct EncoderCache {
    key: Option<String>,
    value: Option<Rc<ImageEncoding>>,
    forward_count: usize,
}

impl EncoderCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the cached encoding for `key`, running `encode` only on a miss.
    pub fn get_or_encode(&mut self, key: &str, encode: impl FnOnce() -> ImageEncoding) -> Rc<ImageEncoding> {
        if let (Some(k), Some(v)) = (&self.key, &self.value) {
            if k == key {
                return Rc::clone(v);
            }
        }
        self.forward_count += 1;
        let v = Rc::new(encode());
        self.key = Some(key.to_string());
        self.value = Some(Rc::clone(&v));
        v
    }

    /// Number of encoder forward passes run through this cache.
    pub fn forward_count(&self) -> usize {
        self.forward_count
    }
}

/// An [`ImageEncoding`] as plain tensors, safe to keep across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoding {
    image: crate::nn::Tensor,
    skips: Vec<crate::nn::Tensor>,
    features: crate::nn::Tensor,
}

impl ImageEncoding {
    pub fn freeze(&self) -> FrozenEncoding {
        FrozenEncoding {
            image: self.image.value().clone(),
            skips: self.skips.iter().map(|s| s.value().clone()).collect(),
            features: self.features.value().clone(),
        }
    }
}

impl FrozenEncoding {
    /// Constant (gradient-free) encoding.
    pub fn thaw(&self) -> ImageEncoding {
        ImageEncoding {
            image: Var::constant(self.image.clone()),
            skips: self.skips.iter().map(|s| Var::constant(s.clone())).collect(),
            features: Var::constant(self.features.clone()),
        }
    }
}
