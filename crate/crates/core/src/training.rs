//! Iterative training: simulated prompts, multi-iteration episodes, AdamW with
//! a linear learning-rate decay, validation and checkpointing.
//!
//! Training log: one JSON object per epoch (see [`EpochLog`]).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_cases, simulate_prompts, BoxMode, EvalConfig, Segmenter};
use crate::losses::{confidence_loss_var, corrective_loss_var, LossWeights};
use crate::metrics::dice_score;
use crate::model::{var_to_logits, Checkpoint, EncoderCache, EncoderVariant, Model, ModelConfig};
use crate::nn::{backward, ops, AdamConfig, AdamW, Gradients, Tensor, Var};
use crate::preprocess::{
    augment_intensity_shift, augment_zoom, crop_patch, nonzero_foreground, standard_preprocess, AugmentConfig,
};
use crate::prompts::{fallback_point, ground_truth_bbox, PromptState, ScribbleConfig};
use crate::seeding::derive_rng;
use crate::synth::Case;
use crate::volume::BinaryMask;

/// Prompt policy of an ablation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub use_box: bool,
    pub use_scribbles_train: bool,
    pub use_scribbles_test: bool,
    /// Inclusive range of points sampled per training iteration after the first.
    pub train_points: (usize, usize),
    /// Default points per evaluation iteration.
    pub test_points: usize,
}

impl VariantConfig {
    pub const PRESETS: [&'static str; 7] = ["plain", "plain-b", "plain-b-1", "plain-b-50", "basic", "ultra", "ultra+"];

    pub fn preset(name: &str) -> Result<Self> {
        let (use_box, scr_train, scr_test, train_points, test_points) = match name {
            "plain" => (false, false, false, (1, 1), 1),
            "plain-b" | "plain-b-1" => (true, false, false, (1, 1), 1),
            "plain-b-50" => (true, false, false, (50, 50), 50),
            "basic" => (true, false, false, (1, 50), 1),
            "ultra" => (true, false, true, (1, 50), 1),
            "ultra+" => (true, true, true, (1, 50), 1),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown variant {other:?}; expected one of {:?}",
                    Self::PRESETS
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            use_box,
            use_scribbles_train: scr_train,
            use_scribbles_test: scr_test,
            train_points,
            test_points,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.train_points;
        if lo == 0 || hi < lo || self.test_points == 0 {
            return Err(Error::InvalidArgument(format!("variant {} has an invalid point policy", self.name)));
        }
        Ok(())
    }

    /// The evaluation protocol matching this variant.
    pub fn eval_config(&self, iterations: usize, seed: u64) -> EvalConfig {
        EvalConfig {
            iterations,
            points: self.test_points,
            box_mode: if self.use_box { BoxMode::Tight } else { BoxMode::None },
            scribbles: self.use_scribbles_test,
            seed,
            ..EvalConfig::default()
        }
    }
}

/// Architecture ablations: `hybrid`, `vit`, `cnn`, `no-conl` (one mask head), `no-corl` (no corrective net).
pub fn model_variant(name: &str, base: &ModelConfig) -> Result<ModelConfig> {
    let mut c = base.clone();
    match name {
        "hybrid" => c.encoder = EncoderVariant::Hybrid,
        "vit" => c.encoder = EncoderVariant::Vit,
        "cnn" => c.encoder = EncoderVariant::Cnn,
        "no-conl" => c.mask_heads = 1,
        "no-corl" => c.corrective = false,
        other => return Err(Error::InvalidArgument(format!("unknown model variant {other:?}"))),
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Iterations N per episode.
    pub iterations: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decrement: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// A preset name or a full table row.
    #[serde(deserialize_with = "variant_or_preset")]
    pub variant: VariantConfig,
    pub model: ModelConfig,
    pub augment: Option<AugmentConfig>,
    pub scribble: ScribbleConfig,
    /// Detach the dense prompt every `k` iterations; `None` keeps the full graph.
    pub detach_every: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale schedule: N = 11, 200 epochs, lr 4e-5 decreasing by 2e-6 per epoch.
    pub fn full() -> Self {
        Self {
            iterations: 11,
            batch_size: 2,
            epochs: 200,
            lr0: 4e-5,
            lr_decrement: 2e-6,
            lr_floor: 1e-6,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            variant: VariantConfig::preset("ultra").expect("preset"),
            model: ModelConfig::default(),
            augment: Some(AugmentConfig::default()),
            scribble: ScribbleConfig::default(),
            detach_every: None,
            seed: 0,
        }
    }

    /// CPU-sized defaults: N = 6, 40 epochs, with a larger step size for the short schedule.
    pub fn desk() -> Self {
        Self {
            iterations: 6,
            epochs: 40,
            lr0: 1e-3,
            lr_decrement: 2e-5,
            lr_floor: 1e-5,
            variant: VariantConfig::preset("basic").expect("preset"),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr_floor > 0.0) || !(self.lr0 > 0.0) || !(self.lr_decrement >= 0.0) {
            return bad("lr0 and lr_floor must be positive and the decrement non-negative");
        }
        if self.detach_every == Some(0) {
            return bad("detach_every must be positive");
        }
        self.variant.validate()?;
        self.model.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn variant_or_preset<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<VariantConfig, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Spec {
        Name(String),
        Full(VariantConfig),
    }
    match Spec::deserialize(d)? {
        Spec::Name(n) => VariantConfig::preset(&n).map_err(serde::de::Error::custom),
        Spec::Full(v) => Ok(v),
    }
}

/// `max(lr0 - epoch * decrement, floor)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    (cfg.lr0 - epoch as f64 * cfg.lr_decrement).max(cfg.lr_floor)
}

/// A case ready for the network: normalised and cut to the patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase {
    pub id: String,
    pub case: Case,
}

/// Clip + z-score, then a foreground-centred patch unless the volume already has the patch size.
pub fn prepare_case(id: &str, case: &Case, patch: usize, rng: &mut impl Rng) -> Result<PreparedCase> {
    let image = standard_preprocess(&case.image, &nonzero_foreground(&case.image))?;
    let (image, label) = if image.shape().0 == [patch; 3] {
        (image, case.label.clone())
    } else {
        let p = crop_patch(&image, &case.label, [patch; 3], rng)?;
        (p.image, p.label)
    };
    Ok(PreparedCase { id: id.to_string(), case: Case { image, label } })
}

fn augment(case: &Case, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Case> {
    let (image, label) = augment_zoom(&case.image, &case.label, cfg.zoom_range, rng)?;
    let image = augment_intensity_shift(&image, cfg.shift_range, rng)?;
    if !label.any() {
        return Ok(case.clone());
    }
    Ok(Case { image, label })
}

/// Per-iteration training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiag {
    pub iteration: usize,
    pub l_con: f64,
    pub l_cor: f64,
    pub selected: usize,
    /// Dice of the thresholded corrected output.
    pub dice: f64,
    pub points: usize,
    pub scribbles: usize,
    pub box_tokens: usize,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub loss: Var,
    pub iterations: Vec<IterationDiag>,
    pub encoder_forwards: usize,
}

impl Episode {
    pub fn total(&self) -> f64 {
        self.loss.item() as f64
    }
}

fn labels(mask: &BinaryMask) -> Vec<f64> {
    mask.to_f64()
}

/// One N-iteration episode. The returned loss is `Σ_i (L_con_i + L_cor_i)` with its graph.
pub fn train_episode(model: &Model, case: &PreparedCase, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Episode> {
    let bound = model.bind();
    let mut cache = EncoderCache::new();
    let gt = &case.case.label;
    let shape = gt.shape();
    let y = labels(gt);
    let variant = &cfg.variant;
    let bbox = if variant.use_box { Some(ground_truth_bbox(gt)?) } else { None };
    let scribble_cfg = variant.use_scribbles_train.then_some(&cfg.scribble);

    let mut terms = Vec::with_capacity(2 * cfg.iterations);
    let mut diags = Vec::with_capacity(cfg.iterations);
    let mut state: Option<PromptState> = None;
    let mut dense: Option<Var> = None;
    let mut pred = BinaryMask::empty(shape);
    for i in 1..=cfg.iterations {
        let enc = model.encode_image_cached(&bound, &mut cache, &case.id, &case.case.image)?;
        let next = match &state {
            None => {
                let point = fallback_point(gt, rng).ok_or(Error::EmptyForeground("training case without foreground"))?;
                let scribbles = match scribble_cfg {
                    Some(c) => simulate_prompts(&pred, gt, 1, Some(c), rng)?.1,
                    None => Vec::new(),
                };
                PromptState::initial(shape, vec![point], scribbles, bbox)?
            }
            Some(prev) => {
                let (lo, hi) = variant.train_points;
                let n = rng.random_range(lo..=hi);
                let (points, scribbles) = simulate_prompts(&pred, gt, n, scribble_cfg, rng)?;
                let prev_logits = var_to_logits(dense.as_ref().expect("set after iteration 1"), shape);
                prev.advance(points, scribbles, None, prev_logits)?
            }
        };
        let out = model.step(&bound, &enc, &next, dense.as_ref())?;
        let (l_con, _) = confidence_loss_var(&out.maps, &out.scores, &y, shape, &cfg.weights);
        terms.push(l_con.clone());
        let l_cor = if model.config().corrective {
            let l = corrective_loss_var(&out.refined, &y, shape, &cfg.weights);
            terms.push(l.clone());
            l.item() as f64
        } else {
            0.0
        };
        pred = var_to_logits(&out.refined, shape).threshold();
        diags.push(IterationDiag {
            iteration: i,
            l_con: l_con.item() as f64,
            l_cor,
            selected: out.selected,
            dice: dice_score(&pred, gt)?,
            points: next.points().len(),
            scribbles: next.scribbles().len(),
            box_tokens: out.prompt_tokens - next.points().len() - scribble_token_count(model, &next),
        });
        let last = diags.last().expect("just pushed");
        if !(last.l_con.is_finite() && last.l_cor.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: i,
                detail: format!("case {}: {}", case.id, serde_json::to_string(&diags).unwrap_or_default()),
            });
        }
        let keep_graph = cfg.detach_every.is_none_or(|k| i % k != 0);
        dense = Some(if keep_graph { out.selected_map.clone() } else { out.selected_map.detach() });
        state = Some(next);
    }
    let loss = ops::sum(&ops::concat_rows(
        &terms.iter().map(|t| ops::reshape(t, &[1])).collect::<Vec<_>>(),
    ));
    Ok(Episode { loss, iterations: diags, encoder_forwards: cache.forward_count() })
}

fn scribble_token_count(model: &Model, state: &PromptState) -> usize {
    let k = model.config().scribble_tokens;
    if k == 0 {
        return 0;
    }
    state.scribbles().iter().map(|s| s.voxels.len().min(k)).sum()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Optimizer steps taken so far.
    pub steps: u64,
    /// Mean episode loss.
    pub loss: f64,
    pub l_con: f64,
    pub l_cor: f64,
    /// Mean final-iteration training Dice.
    pub train_dice: f64,
    pub val_dice: Option<f64>,
    pub best: bool,
}

/// Model, optimizer and progress counters.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub optim: AdamW,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_dice: Option<f64>,
}

const RNG_EPISODE: u64 = 1;
const RNG_SHUFFLE: u64 = 2;
const RNG_VAL: u64 = 3;

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let optim = AdamW::new(model.params(), adam_config(&cfg));
        Ok(Self { cfg, model, optim, epoch: 0, best_val_dice: None })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config != cfg.model {
            return Err(Error::Checkpoint("checkpoint model config differs from the training config".into()));
        }
        let model = Model::from_checkpoint(ckpt)?;
        let meta = &ckpt.meta;
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks {k}")));
        let epoch = get("epoch")?.as_u64().ok_or_else(|| Error::Checkpoint("bad epoch".into()))? as usize;
        let step = get("step")?.as_u64().ok_or_else(|| Error::Checkpoint("bad step".into()))?;
        let best_val_dice = meta.get("best_val_dice").and_then(|v| v.as_f64());
        let mut m = Vec::new();
        let mut v = Vec::new();
        for id in model.params().ids() {
            let name = model.params().name(id);
            let fetch = |prefix: &str| {
                ckpt.tensor(&format!("{prefix}/{name}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks optimizer state for {name}")))
            };
            m.push(fetch("optim.m")?);
            v.push(fetch("optim.v")?);
        }
        let optim = AdamW::from_moments(adam_config(&cfg), step, m, v);
        Ok(Self { cfg, model, optim, epoch, best_val_dice })
    }

    /// Weights, optimizer moments and progress.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint(serde_json::json!({
            "epoch": self.epoch,
            "step": self.optim.step,
            "best_val_dice": self.best_val_dice,
            "train_config": self.cfg,
        }));
        let (m, v) = self.optim.moments();
        let params = self.model.params();
        for (prefix, buf) in [("optim.m", m), ("optim.v", v)] {
            for (id, data) in params.ids().zip(buf) {
                let shape = params.get(id).shape().to_vec();
                ckpt.tensors.push((format!("{prefix}/{}", params.name(id)), Tensor::new(shape, data.clone())));
            }
        }
        ckpt
    }

    /// One optimizer step over `batch`: gradients are averaged over its episodes.
    pub fn step(&mut self, batch: &[(&PreparedCase, u64)], lr: f64) -> Result<Vec<Episode>> {
        let mut grads: Option<Gradients> = None;
        let mut episodes = Vec::with_capacity(batch.len());
        for &(case, key) in batch {
            let mut rng = derive_rng(self.cfg.seed, &[RNG_EPISODE, self.epoch as u64, key]);
            let case = match &self.cfg.augment {
                Some(a) => PreparedCase { id: case.id.clone(), case: augment(&case.case, a, &mut rng)? },
                None => case.clone(),
            };
            let ep = train_episode(&self.model, &case, &self.cfg, &mut rng)?;
            let g = backward(&ep.loss);
            match &mut grads {
                Some(acc) => acc.merge(g),
                None => grads = Some(g),
            }
            episodes.push(ep);
        }
        if let Some(mut g) = grads {
            g.scale(1.0 / batch.len() as f32);
            self.optim.update(self.model.params_mut(), &g, lr as f32);
        }
        Ok(episodes)
    }

    /// Train one epoch and validate; returns the log line.
    pub fn run_epoch(&mut self, train: &[PreparedCase], val: &[PreparedCase]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("the training split is empty".into()));
        }
        let lr = lr_schedule(self.epoch, &self.cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = derive_rng(self.cfg.seed, &[RNG_SHUFFLE, self.epoch as u64]);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let (mut loss, mut l_con, mut l_cor, mut dice) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&k| (&train[k], k as u64)).collect();
            for ep in self.step(&batch, lr)? {
                loss += ep.total();
                l_con += ep.iterations.iter().map(|d| d.l_con).sum::<f64>();
                l_cor += ep.iterations.iter().map(|d| d.l_cor).sum::<f64>();
                dice += ep.iterations.last().map_or(0.0, |d| d.dice);
            }
        }
        let n = train.len() as f64;
        let val_dice = if val.is_empty() { None } else { Some(self.validate(val)?) };
        let best = match (val_dice, self.best_val_dice) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if best {
            self.best_val_dice = val_dice;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch - 1,
            lr,
            steps: self.optim.step,
            loss: loss / n,
            l_con: l_con / n,
            l_cor: l_cor / n,
            train_dice: dice / n,
            val_dice,
            best,
        })
    }

    /// Mean final-iteration Dice under the variant's evaluation protocol.
    pub fn validate(&self, val: &[PreparedCase]) -> Result<f64> {
        let cases: Vec<Case> = val.iter().map(|c| c.case.clone()).collect();
        let cfg = self.cfg.variant.eval_config(self.cfg.iterations, crate::seeding::derive_seed(self.cfg.seed, &[RNG_VAL]));
        let (curve, _) = evaluate_cases(Segmenter::Network(&self.model), &cases, &cfg)?;
        Ok(curve.final_dice())
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig { weight_decay: cfg.weight_decay as f32, ..AdamConfig::default() }
}

/// Result of [`fit`].
pub struct FitOutcome {
    pub trainer: Trainer,
    /// Weights with the best validation Dice (the last weights without validation data).
    pub best: Model,
    pub log: Vec<EpochLog>,
}

/// Train until `cfg.epochs` epochs are complete. With `out`, writes `last.ckpt`
/// every epoch, `best.ckpt` on improvement, and appends to `train_log.jsonl`.
pub fn fit(
    mut trainer: Trainer,
    train: &[PreparedCase],
    val: &[PreparedCase],
    out: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("the training split is empty".into()));
    }
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };
    let mut best = trainer.model.clone();
    let mut log = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let line = trainer.run_epoch(train, val)?;
        if line.best || val.is_empty() {
            best = trainer.model.clone();
        }
        if let Some(dir) = out {
            trainer.checkpoint().save(dir.join("last.ckpt"))?;
            if line.best {
                best.to_checkpoint(serde_json::json!({ "epoch": line.epoch, "val_dice": line.val_dice }))
                    .save(dir.join("best.ckpt"))?;
            }
        }
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&line)?)?;
        }
        on_epoch(&line);
        log.push(line);
    }
    Ok(FitOutcome { trainer, best, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_case, SynthSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 2,
            epochs: 1,
            augment: None,
            model: ModelConfig {
                patch_size: 16,
                depth: 2,
                encoder: EncoderVariant::Cnn,
                transformer_blocks: 1,
                interaction_blocks: 1,
                ..Default::default()
            },
            ..TrainConfig::desk()
        }
    }

    fn tiny_cases(n: usize) -> Vec<PreparedCase> {
        let spec = SynthSpec { grid_size: [16; 3], radius_range: (2.0, 3.0), deformation_amplitude: 0.5, ..Default::default() };
        let mut rng = derive_rng(0, &[]);
        (0..n)
            .map(|k| prepare_case(&format!("c{k}"), &generate_case(&spec, k as u64).unwrap(), 16, &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn schedule_examples() {
        let p = TrainConfig::full();
        assert!((lr_schedule(0, &p) - 4.0e-5).abs() < 1e-18);
        assert!((lr_schedule(5, &p) - 3.0e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(200, &p), p.lr_floor);
        assert!((1..300).all(|e| lr_schedule(e, &p) <= lr_schedule(e - 1, &p)));
    }

    #[test]
    fn presets_match_the_prompt_table() {
        let row = |n: &str| {
            let v = VariantConfig::preset(n).unwrap();
            (v.use_box, v.use_scribbles_train, v.use_scribbles_test, v.train_points, v.test_points)
        };
        assert_eq!(row("plain"), (false, false, false, (1, 1), 1));
        assert_eq!(row("plain-b"), (true, false, false, (1, 1), 1));
        assert_eq!(row("plain-b-50"), (true, false, false, (50, 50), 50));
        assert_eq!(row("basic"), (true, false, false, (1, 50), 1));
        assert_eq!(row("ultra"), (true, false, true, (1, 50), 1));
        assert_eq!(row("ultra+"), (true, true, true, (1, 50), 1));
        assert!(VariantConfig::preset("mega").is_err());
        assert_eq!(model_variant("no-conl", &ModelConfig::default()).unwrap().mask_heads, 1);
        assert!(!model_variant("no-corl", &ModelConfig::default()).unwrap().corrective);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::full().validate().is_ok());
        assert!(TrainConfig { iterations: 0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { lr_floor: 0.0, ..TrainConfig::desk() }.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::desk()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::desk());
        let short: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "variant": "ultra"}"#).unwrap();
        assert_eq!((short.epochs, short.iterations), (3, 6));
        assert!(short.variant.use_scribbles_test);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn single_iteration_loss_is_con_plus_cor() {
        let cfg = TrainConfig { iterations: 1, ..tiny_cfg() };
        let model = Model::new(cfg.model.clone(), 0).unwrap();
        let ep = train_episode(&model, &tiny_cases(1)[0], &cfg, &mut derive_rng(1, &[])).unwrap();
        let d = &ep.iterations[0];
        assert!((ep.total() - (d.l_con + d.l_cor)).abs() < 1e-3 * ep.total().abs());
        assert_eq!(ep.encoder_forwards, 1);
    }

    #[test]
    fn episodes_are_deterministic_and_encode_once() {
        let cfg = TrainConfig { iterations: 3, ..tiny_cfg() };
        let model = Model::new(cfg.model.clone(), 0).unwrap();
        let case = &tiny_cases(1)[0];
        let a = train_episode(&model, case, &cfg, &mut derive_rng(5, &[])).unwrap();
        let b = train_episode(&model, case, &cfg, &mut derive_rng(5, &[])).unwrap();
        assert_eq!(a.total().to_bits(), b.total().to_bits());
        assert_eq!(a.encoder_forwards, 1);
    }

    #[test]
    fn plain_never_emits_box_tokens() {
        let cfg = TrainConfig { iterations: 3, variant: VariantConfig::preset("plain").unwrap(), ..tiny_cfg() };
        let model = Model::new(cfg.model.clone(), 0).unwrap();
        let ep = train_episode(&model, &tiny_cases(1)[0], &cfg, &mut derive_rng(2, &[])).unwrap();
        assert!(ep.iterations.iter().all(|d| d.box_tokens == 0));
        let cfg = TrainConfig { iterations: 2, ..tiny_cfg() };
        let ep = train_episode(&model, &tiny_cases(1)[0], &cfg, &mut derive_rng(2, &[])).unwrap();
        assert!(ep.iterations.iter().all(|d| d.box_tokens == 2));
    }

    #[test]
    fn one_case_one_epoch_is_one_step() {
        let cfg = tiny_cfg();
        let out = fit(Trainer::new(cfg).unwrap(), &tiny_cases(1), &[], None, |_| {}).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].steps, 1);
        assert!(fit(Trainer::new(tiny_cfg()).unwrap(), &[], &[], None, |_| {}).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = TrainConfig { epochs: 3, batch_size: 2, ..tiny_cfg() };
        let cases = tiny_cases(3);
        let val = &cases[..1];
        let full = fit(Trainer::new(cfg.clone()).unwrap(), &cases, val, None, |_| {}).unwrap();

        let first = fit(Trainer::new(TrainConfig { epochs: 1, ..cfg.clone() }).unwrap(), &cases, val, None, |_| {}).unwrap();
        let mut bytes = Vec::new();
        first.trainer.checkpoint().write_to(&mut bytes).unwrap();
        let ckpt = Checkpoint::read_from(&bytes[..]).unwrap();
        let resumed = fit(Trainer::resume(cfg, &ckpt).unwrap(), &cases, val, None, |_| {}).unwrap();
        assert_eq!(first.log[..], full.log[..1]);
        assert_eq!(resumed.log[..], full.log[1..]);
        assert_eq!(resumed.trainer.model.params().get(crate::nn::ParamId(0)), full.trainer.model.params().get(crate::nn::ParamId(0)));
    }

    #[test]
    fn optimizer_state_round_trips() {
        let cfg = tiny_cfg();
        let out = fit(Trainer::new(cfg.clone()).unwrap(), &tiny_cases(2), &[], None, |_| {}).unwrap();
        let ckpt = out.trainer.checkpoint();
        let back = Trainer::resume(cfg, &ckpt).unwrap();
        assert_eq!(back.optim.step, out.trainer.optim.step);
        assert_eq!(back.optim.moments(), out.trainer.optim.moments());
        assert_eq!(back.epoch, 1);
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cases = tiny_cases(2);
        fit(Trainer::new(tiny_cfg()).unwrap(), &cases, &cases[..1], Some(dir.path()), |_| {}).unwrap();
        let text = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let line: EpochLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(line.epoch, 0);
        assert!(line.val_dice.is_some());
        assert!(Model::load(dir.path().join("best.ckpt")).is_ok());
        assert!(Checkpoint::load(dir.path().join("last.ckpt")).unwrap().tensor("optim.m/corrective.stem.w").is_some());
    }
}
