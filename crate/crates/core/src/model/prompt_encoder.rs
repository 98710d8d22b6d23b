//! Sparse prompt tokens and the dense (previous-logits) embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use super::layers::{Builder, Conv, Norm};
use crate::nn::{ops, Bound, ConvGeom, Init, ParamId, Tensor, Var};
use crate::prompts::{Polarity, PromptState};

/// Rows of the learned sparse-embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum TokenKind {
    PositivePoint = 0,
    NegativePoint = 1,
    BoxMin = 2,
    BoxMax = 3,
    Padding = 4,
}

const KINDS: usize = 5;

impl TokenKind {
    fn polarity(p: Polarity) -> Self {
        match p {
            Polarity::Positive => Self::PositivePoint,
            Polarity::Negative => Self::NegativePoint,
        }
    }
}

/// Sparse tokens with their kinds, in emission order.
#[derive(Debug, Clone)]
pub struct SparseTokens {
    pub tokens: Var,
    pub kinds: Vec<TokenKind>,
}

impl SparseTokens {
    /// Prompt tokens, not counting the padding token used when there are none.
    pub fn prompt_count(&self) -> usize {
        self.kinds.iter().filter(|k| **k != TokenKind::Padding).count()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PromptEncoder {
    gaussian: ParamId,
    table: ParamId,
    no_mask: ParamId,
    dense_convs: Vec<(Conv, Option<Norm>)>,
    patch: usize,
    bottleneck: usize,
    embed: usize,
    scribble_tokens: usize,
}

/// Evenly spaced subset of at most `k` items, keeping order.
pub fn subsample<T: Copy>(items: &[T], k: usize) -> Vec<T> {
    if items.len() <= k {
        return items.to_vec();
    }
    (0..k).map(|i| items[i * items.len() / k]).collect()
}

impl PromptEncoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Self {
        let mut b = b.scope("prompt");
        let e = cfg.embed_dim();
        // fixed random projection for the Fourier features, seeded so rebuilt models agree
        let mut rng = ChaCha8Rng::seed_from_u64(0x0f0u64 ^ e as u64);
        let g: Vec<f32> = (0..3 * e / 2)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32 * cfg.fourier_scale
            })
            .collect();
        let gaussian = b.store.add_frozen("prompt.fourier", Tensor::new(vec![3, e / 2], g));
        let table = b.param("sparse_embed", &[KINDS, e], Init::Normal { std: 1.0 });
        let no_mask = b.param("no_mask", &[e], Init::Normal { std: 0.02 });
        let mut dense_convs = Vec::new();
        let mut cin = 1;
        for i in 0..cfg.depth {
            let last = i + 1 == cfg.depth;
            let cout = if last { e } else { 4 << (2 * i) };
            let conv = Conv::new(&mut b, &format!("dense{i}"), cin, cout, ConvGeom::patch(2), true);
            let norm = (!last).then(|| Norm::new(&mut b, &format!("dense_norm{i}"), cout));
            dense_convs.push((conv, norm));
            cin = cout;
        }
        Self {
            gaussian,
            table,
            no_mask,
            dense_convs,
            patch: cfg.patch_size,
            bottleneck: cfg.bottleneck_size(),
            embed: e,
            scribble_tokens: cfg.scribble_tokens,
        }
    }

    /// Fourier features of points given in `[-1, 1]^3`, one row per point.
    fn fourier(&self, p: &Bound, unit: &[[f32; 3]]) -> Vec<f32> {
        let g = p.get(self.gaussian).data();
        let half = self.embed / 2;
        let mut out = vec![0.0f32; unit.len() * self.embed];
        for (row, u) in out.chunks_mut(self.embed).zip(unit) {
            for j in 0..half {
                let t = std::f32::consts::TAU * (u[0] * g[j] + u[1] * g[half + j] + u[2] * g[2 * half + j]);
                row[j] = t.sin();
                row[half + j] = t.cos();
            }
        }
        out
    }

    fn unit_coord(&self, c: [usize; 3], extent: usize) -> [f32; 3] {
        c.map(|v| 2.0 * (v as f32 + 0.5) / extent as f32 - 1.0)
    }

    /// Positional encoding of the bottleneck grid, `[s^3, C_e]`.
    pub fn image_pe(&self, p: &Bound) -> Var {
        let s = self.bottleneck;
        let coords: Vec<[f32; 3]> = (0..s * s * s)
            .map(|i| self.unit_coord([i / (s * s), (i / s) % s, i % s], s))
            .collect();
        Var::constant(Tensor::new(vec![s * s * s, self.embed], self.fourier(p, &coords)))
    }

    pub fn sparse(&self, p: &Bound, state: &PromptState) -> SparseTokens {
        let mut coords = Vec::new();
        let mut kinds = Vec::new();
        for pt in state.points() {
            coords.push(pt.coord);
            kinds.push(TokenKind::polarity(pt.label));
        }
        if let Some(b) = state.bbox() {
            coords.push(b.min);
            kinds.push(TokenKind::BoxMin);
            coords.push(b.max);
            kinds.push(TokenKind::BoxMax);
        }
        if self.scribble_tokens > 0 {
            for s in state.scribbles() {
                for v in subsample(&s.voxels, self.scribble_tokens) {
                    coords.push(v);
                    kinds.push(TokenKind::polarity(s.label));
                }
            }
        }
        let pe = if kinds.is_empty() {
            kinds.push(TokenKind::Padding);
            vec![0.0; self.embed]
        } else {
            let unit: Vec<[f32; 3]> = coords.iter().map(|&c| self.unit_coord(c, self.patch)).collect();
            self.fourier(p, &unit)
        };
        let t = kinds.len();
        let mut select = vec![0.0f32; t * KINDS];
        for (i, k) in kinds.iter().enumerate() {
            select[i * KINDS + *k as usize] = 1.0;
        }
        let learned = ops::matmul(&Var::constant(Tensor::new(vec![t, KINDS], select)), p.get(self.table));
        let tokens = ops::add(&Var::constant(Tensor::new(vec![t, self.embed], pe)), &learned);
        SparseTokens { tokens, kinds }
    }

    /// Embedding added to the bottleneck features, `[C_e, s, s, s]`.
    /// `logits` is the previous candidate map `[1, D, H, W]`, absent at iteration 1.
    pub fn dense(&self, p: &Bound, logits: Option<&Var>) -> Var {
        let s = self.bottleneck;
        match logits {
            None => {
                let ones = Var::constant(Tensor::full(vec![self.embed, s * s * s], 1.0));
                ops::reshape(&ops::mul_col_vec(&ones, p.get(self.no_mask)), &[self.embed, s, s, s])
            }
            Some(m) => {
                assert_eq!(m.shape(), &[1, self.patch, self.patch, self.patch], "dense prompt shape");
                let mut x = m.clone();
                for (conv, norm) in &self.dense_convs {
                    x = conv.apply(p, &x);
                    if let Some(n) = norm {
                        x = ops::gelu(&n.instance(p, &x));
                    }
                }
                x
            }
        }
    }
}
