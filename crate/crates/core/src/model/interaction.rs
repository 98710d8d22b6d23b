//! Two-way attention between prompt tokens and image tokens.

use super::config::ModelConfig;
use super::layers::{Attention, Builder, Mlp, Norm};
use crate::nn::{ops, Bound, Var};

#[derive(Debug, Clone)]
struct Block {
    norm_self: Norm,
    self_attn: Attention,
    norm_t2i: Norm,
    norm_img_kv: Norm,
    token_to_image: Attention,
    norm_mlp: Norm,
    mlp: Mlp,
    norm_img_q: Norm,
    norm_tok_kv: Norm,
    image_to_token: Attention,
}

#[derive(Debug, Clone)]
pub(crate) struct Interaction {
    blocks: Vec<Block>,
}

impl Interaction {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("interaction");
        let e = cfg.embed_dim();
        let blocks = (0..cfg.interaction_blocks)
            .map(|i| {
                let mut s = b.scope(&format!("block{i}"));
                Block {
                    norm_self: Norm::new(&mut s, "norm_self", e),
                    self_attn: Attention::new(&mut s, "self_attn", e, cfg.heads),
                    norm_t2i: Norm::new(&mut s, "norm_t2i", e),
                    norm_img_kv: Norm::new(&mut s, "norm_img_kv", e),
                    token_to_image: Attention::new(&mut s, "token_to_image", e, cfg.heads),
                    norm_mlp: Norm::new(&mut s, "norm_mlp", e),
                    mlp: Mlp::new(&mut s, "mlp", e, 2 * e, e),
                    norm_img_q: Norm::new(&mut s, "norm_img_q", e),
                    norm_tok_kv: Norm::new(&mut s, "norm_tok_kv", e),
                    image_to_token: Attention::new(&mut s, "image_to_token", e, cfg.heads),
                }
            })
            .collect();
        Self { blocks }
    }

    /// `image: [S, C_e]` tokens with positional encoding `image_pe`; `tokens: [T, C_e]`.
    /// Returns `(Z_x, Z_v)` with unchanged shapes. Every sub-layer is a pre-norm residual.
    pub fn apply(&self, p: &Bound, image: &Var, image_pe: &Var, tokens: &Var) -> (Var, Var) {
        let query_pe = tokens.clone();
        let mut x = image.clone();
        let mut t = tokens.clone();
        for blk in &self.blocks {
            let a = blk.norm_self.layer(p, &t);
            let qa = ops::add(&a, &query_pe);
            t = ops::add(&t, &blk.self_attn.apply(p, &qa, &qa, &a));

            let a = blk.norm_t2i.layer(p, &t);
            let xi = blk.norm_img_kv.layer(p, &x);
            t = ops::add(
                &t,
                &blk.token_to_image.apply(p, &ops::add(&a, &query_pe), &ops::add(&xi, image_pe), &xi),
            );

            t = ops::add(&t, &blk.mlp.apply(p, &blk.norm_mlp.layer(p, &t)));

            let xq = blk.norm_img_q.layer(p, &x);
            let tk = blk.norm_tok_kv.layer(p, &t);
            x = ops::add(
                &x,
                &blk.image_to_token.apply(p, &ops::add(&xq, image_pe), &ops::add(&tk, &query_pe), &tk),
            );
        }
        (x, t)
    }

    /// Output projections of the image-to-token attention, one pair per block.
    pub(crate) fn image_update_params(&self) -> Vec<crate::nn::ParamId> {
        self.blocks.iter().flat_map(|b| b.image_to_token.output().ids()).collect()
    }
}
