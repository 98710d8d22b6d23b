//! The promptable segmentation network.

mod checkpoint;
mod config;
mod corrective;
mod decoder;
mod encoder;
mod interaction;
mod layers;
mod prompt_encoder;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use config::{EncoderVariant, ModelConfig};
pub use corrective::CORRECTIVE_INPUTS;
pub use decoder::{maps_from_vectors, select_index};
pub use encoder::{EncoderCache, FrozenEncoding, ImageEncoding};
pub use prompt_encoder::{subsample, SparseTokens, TokenKind};

use crate::error::{Error, Result};
use crate::nn::{ops, Bound, ParamId, ParamStore, Tensor, Var};
use crate::prompts::PromptState;
use crate::volume::{LogitMap, Shape3, Volume};
use layers::Builder;

#[derive(Debug, Clone)]
struct Net {
    encoder: encoder::Encoder,
    prompt: prompt_encoder::PromptEncoder,
    interaction: interaction::Interaction,
    decoder: decoder::Decoder,
    heads: decoder::Heads,
    corrective: corrective::Corrective,
}

/// Weights plus the architecture that interprets them.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    net: Net,
}

/// Everything one iteration produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Candidate logit maps, one row per head: `[M, D*H*W]`.
    pub maps: Var,
    /// Confidence scores `[M, 1]`.
    pub scores: Var,
    pub selected: usize,
    /// Selected candidate `[1, D, H, W]` (still attached to the graph).
    pub selected_map: Var,
    /// Corrective output y' `[1, D, H, W]`.
    pub refined: Var,
    /// Decoder features `[C_d, D, H, W]`.
    pub features: Var,
    /// Sparse prompt tokens emitted (excluding padding).
    pub prompt_tokens: usize,
}

impl StepOutput {
    pub fn score_values(&self) -> Vec<f32> {
        self.scores.data().to_vec()
    }

    pub fn candidate(&self, j: usize) -> Var {
        ops::slice_rows(&self.maps, j, j + 1)
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut b = Builder::new(&mut params, &mut rng);
            Net {
                encoder: encoder::Encoder::new(&mut b, &config),
                prompt: prompt_encoder::PromptEncoder::new(&mut b, &config),
                interaction: interaction::Interaction::new(&mut b, &config),
                decoder: decoder::Decoder::new(&mut b, &config),
                heads: decoder::Heads::new(&mut b, &config),
                corrective: corrective::Corrective::new(&mut b, &config),
            }
        };
        Ok(Self { config, params, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Parameters for a differentiable forward pass.
    pub fn bind(&self) -> Bound {
        self.params.bind()
    }

    /// Parameters for inference: no gradient bookkeeping.
    pub fn bind_frozen(&self) -> Bound {
        self.params.bind_frozen()
    }

    pub fn is_corrective(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("corrective.")
    }

    /// Trainable parameters of the candidate-generating network.
    pub fn main_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.is_trainable(id) && !self.is_corrective(id))
            .collect()
    }

    pub fn corrective_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.is_corrective(id)).collect()
    }

    fn scalar_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params.get(id).len()).sum()
    }

    /// Trainable scalars in the main network and in the corrective net.
    pub fn parameter_counts(&self) -> (usize, usize) {
        (self.scalar_count(&self.main_param_ids()), self.scalar_count(&self.corrective_param_ids()))
    }

    fn patch_shape(&self) -> Shape3 {
        Shape3::cube(self.config.patch_size)
    }

    fn image_var(&self, image: &Volume) -> Result<Var> {
        if image.shape() != self.patch_shape() {
            return Err(Error::ShapeMismatch { left: image.shape(), right: self.patch_shape() });
        }
        let n = self.config.patch_size;
        Ok(Var::constant(Tensor::new(vec![1, n, n, n], image.data().to_vec())))
    }

    pub fn encode_image(&self, p: &Bound, image: &Volume) -> Result<ImageEncoding> {
        Ok(self.net.encoder.encode(p, &self.image_var(image)?))
    }

    /// Encode through an episode cache: the encoder runs once per key.
    pub fn encode_image_cached(
        &self,
        p: &Bound,
        cache: &mut EncoderCache,
        key: &str,
        image: &Volume,
    ) -> Result<Rc<ImageEncoding>> {
        let x = self.image_var(image)?;
        Ok(cache.get_or_encode(key, || self.net.encoder.encode(p, &x)))
    }

    pub fn encode_prompts(&self, p: &Bound, state: &PromptState, dense: Option<&Var>) -> (SparseTokens, Var) {
        (self.net.prompt.sparse(p, state), self.net.prompt.dense(p, dense))
    }

    /// Two-way attention. `image: [C_e, s, s, s]`, `tokens: [T, C_e]` → `(Z_x [C_e, s, s, s], Z_v [T, C_e])`.
    pub fn interact(&self, p: &Bound, image: &Var, tokens: &Var) -> (Var, Var) {
        let shape = image.shape().to_vec();
        let pe = self.net.prompt.image_pe(p);
        let (x, t) = self.net.interaction.apply(p, &ops::transpose(image), &pe, tokens);
        (ops::reshape(&ops::transpose(&x), &shape), t)
    }

    pub fn decode(&self, p: &Bound, z_x: &Var, skips: &[Var]) -> Var {
        self.net.decoder.apply(p, z_x, skips)
    }

    /// `(maps [M, N], scores [M, 1], selected)`.
    pub fn predict_masks(&self, p: &Bound, f_d: &Var, z_v: &Var) -> (Var, Var, usize) {
        let (maps, scores) = self.net.heads.apply(p, f_d, z_v);
        let selected = select_index(scores.data());
        (maps, scores, selected)
    }

    /// `x_c: [4, D, H, W]` → `[1, D, H, W]`.
    pub fn corrective_refine(&self, p: &Bound, x_c: &Var) -> Result<Var> {
        if x_c.shape().len() != 4 || x_c.shape()[0] != CORRECTIVE_INPUTS {
            return Err(Error::InvalidArgument(format!(
                "corrective input must have {CORRECTIVE_INPUTS} channels, got shape {:?}",
                x_c.shape()
            )));
        }
        Ok(self.net.corrective.apply(p, x_c))
    }

    /// Corrective input from the image, the (detached) selected map and the cumulative prompt maps.
    pub fn corrective_input(&self, enc: &ImageEncoding, selected: &Var, state: &PromptState) -> Var {
        let n = self.config.patch_size;
        let len = n * n * n;
        let mut data = Vec::with_capacity(CORRECTIVE_INPUTS * len);
        data.extend_from_slice(enc.image.data());
        data.extend(selected.data().iter().map(|&v| if v > 0.0 { 1.0f32 } else { 0.0 }));
        data.extend(state.cumulative_positive().to_f32());
        data.extend(state.cumulative_negative().to_f32());
        Var::constant(Tensor::new(vec![CORRECTIVE_INPUTS, n, n, n], data))
    }

    /// One prompt → predict → select → correct iteration.
    ///
    /// `dense` is the previous iteration's selected candidate `[1, D, H, W]`; it
    /// keeps its graph so later iterations backpropagate into earlier ones.
    pub fn step(&self, p: &Bound, enc: &ImageEncoding, state: &PromptState, dense: Option<&Var>) -> Result<StepOutput> {
        if state.shape() != self.patch_shape() {
            return Err(Error::ShapeMismatch { left: state.shape(), right: self.patch_shape() });
        }
        let (sparse, dense_emb) = self.encode_prompts(p, state, dense);
        let features = ops::add(&enc.features, &dense_emb);
        let (z_x, z_v) = self.interact(p, &features, &sparse.tokens);
        let f_d = self.decode(p, &z_x, &enc.skips);
        let (maps, scores, selected) = self.predict_masks(p, &f_d, &z_v);
        let n = self.config.patch_size;
        let selected_map = ops::reshape(&ops::slice_rows(&maps, selected, selected + 1), &[1, n, n, n]);
        let refined = if self.config.corrective {
            self.corrective_refine(p, &self.corrective_input(enc, &selected_map, state))?
        } else {
            selected_map.clone()
        };
        Ok(StepOutput {
            maps,
            scores,
            selected,
            selected_map,
            refined,
            features: f_d,
            prompt_tokens: sparse.prompt_count(),
        })
    }

    /// Inference step with constant weights; `state.previous_logits()` is the dense prompt.
    pub fn infer(&self, p: &Bound, enc: &ImageEncoding, state: &PromptState) -> Result<StepOutput> {
        let dense = state.previous_logits().map(logits_var);
        self.step(p, enc, state, dense.as_ref())
    }

    /// Zero the transformer path's output projection (its contribution to the fused features).
    pub fn zero_vit_projection(&mut self) {
        if let Some((w, b)) = self.net.encoder.vit_projection() {
            self.params.get_mut(w).data_mut().fill(0.0);
            if let Some(b) = b {
                self.params.get_mut(b).data_mut().fill(0.0);
            }
        }
    }

    /// Parameters of the image-updating attention outputs; zeroing them makes `Z_x` the residual input.
    pub fn image_update_param_ids(&self) -> Vec<ParamId> {
        self.net.interaction.image_update_params()
    }

    /// Copy every same-named, same-shaped tensor from `other`; returns how many were copied.
    pub fn copy_matching_params(&mut self, other: &Model) -> usize {
        let mut n = 0;
        for id in other.params.ids() {
            if let Some(mine) = self.params.find(other.params.name(id)) {
                if self.params.get(mine).shape() == other.params.get(id).shape() {
                    *self.params.get_mut(mine) = other.params.get(id).clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// A logit grid as a `[1, D, H, W]` constant.
pub fn logits_var(m: &LogitMap) -> Var {
    let [d, h, w] = m.shape().0;
    Var::constant(Tensor::new(vec![1, d, h, w], m.data().to_vec()))
}

/// A `[1, D, H, W]` (or `[1, N]`) var back to a logit grid.
pub fn var_to_logits(v: &Var, shape: Shape3) -> LogitMap {
    LogitMap::from_vec(shape, v.data().to_vec()).expect("length matches shape")
}

#[cfg(test)]
mod tests;
