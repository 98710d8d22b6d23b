//! Simulated-user evaluation and the prompt-ablation runner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dice_score, mean_ci, nsd_score, IterationCurve};
use crate::model::{var_to_logits, ImageEncoding, Model};
use crate::nn::Bound;
use crate::prompts::{
    error_regions, generate_scribbles, ground_truth_bbox, perturb_bbox, sample_points, BoxPerturbation, BoxPrompt,
    PointPrompt, PromptState, Scribble, ScribbleConfig,
};
use crate::seeding::derive_rng;
use crate::synth::Case;
use crate::volume::{BinaryMask, LogitMap, Volume};

/// Voxels a perturbed box face moves by.
pub const BOX_PERTURB_RADIUS: usize = 5;

pub const ABLATION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    None,
    Tight,
    Erode,
    Dilate,
}

impl BoxMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Tight => "tight",
            Self::Erode => "erode",
            Self::Dilate => "dilate",
        }
    }

    /// The box a user would draw for `gt` under this mode.
    pub fn box_for(self, gt: &BinaryMask) -> Result<Option<BoxPrompt>> {
        let tight = || ground_truth_bbox(gt);
        let perturbed = |m| Ok::<_, Error>(perturb_bbox(tight()?, BOX_PERTURB_RADIUS, m, gt.shape()));
        Ok(match self {
            Self::None => None,
            Self::Tight => Some(tight()?),
            Self::Erode => Some(perturbed(BoxPerturbation::Erode)?),
            Self::Dilate => Some(perturbed(BoxPerturbation::Dilate)?),
        })
    }
}

impl std::str::FromStr for BoxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tight" => Ok(Self::Tight),
            "erode" | "erode5" => Ok(Self::Erode),
            "dilate" | "dilate5" => Ok(Self::Dilate),
            other => Err(Error::InvalidArgument(format!("unknown box mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iterations: usize,
    /// Points sampled from the error regions at every iteration.
    pub points: usize,
    pub box_mode: BoxMode,
    pub scribbles: bool,
    pub scribble: ScribbleConfig,
    /// NSD tolerance in spacing units.
    pub tau: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iterations: 6,
            points: 1,
            box_mode: BoxMode::None,
            scribbles: false,
            scribble: ScribbleConfig::default(),
            tau: 1.0,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.points == 0 {
            return Err(Error::InvalidArgument("iterations and points must be at least 1".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidArgument(format!("tau {} must be >= 0", self.tau)));
        }
        Ok(())
    }
}

/// One model answer to a prompt state.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Selected candidate m̂; the dense prompt of the next iteration.
    pub selected_logits: LogitMap,
    /// Corrected output y'; the segmentation shown to the user.
    pub refined: LogitMap,
    pub scores: Vec<f32>,
    pub selected: usize,
}

pub trait Predictor {
    fn predict(&mut self, state: &PromptState) -> Result<Prediction>;
}

/// A network with its image encoded once.
pub struct ModelPredictor<'a> {
    model: &'a Model,
    bound: Bound,
    encoding: ImageEncoding,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model, image: &Volume) -> Result<Self> {
        let bound = model.bind_frozen();
        let encoding = model.encode_image(&bound, image)?;
        Ok(Self { model, bound, encoding })
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, state: &PromptState) -> Result<Prediction> {
        let out = self.model.infer(&self.bound, &self.encoding, state)?;
        let shape = state.shape();
        Ok(Prediction {
            selected_logits: var_to_logits(&out.selected_map, shape),
            refined: var_to_logits(&out.refined, shape),
            scores: out.score_values(),
            selected: out.selected,
        })
    }
}

/// Emits the ground truth as saturated logits, whatever the prompts.
pub struct OraclePredictor {
    logits: LogitMap,
}

impl OraclePredictor {
    pub fn new(gt: &BinaryMask) -> Self {
        Self { logits: gt.map(|&v| if v { 20.0 } else { -20.0 }) }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&mut self, _state: &PromptState) -> Result<Prediction> {
        Ok(Prediction { selected_logits: self.logits.clone(), refined: self.logits.clone(), scores: vec![1.0], selected: 0 })
    }
}

/// What produces predictions for a case.
#[derive(Clone, Copy)]
pub enum Segmenter<'a> {
    Network(&'a Model),
    GroundTruth,
}

impl<'a> Segmenter<'a> {
    pub fn predictor(&self, case: &Case) -> Result<Box<dyn Predictor + 'a>> {
        Ok(match *self {
            Self::Network(m) => Box::new(ModelPredictor::new(m, &case.image)?),
            Self::GroundTruth => Box::new(OraclePredictor::new(&case.label)),
        })
    }
}

/// Points (and optionally scribbles) from the error regions of `pred` against `gt`.
pub fn simulate_prompts(
    pred: &BinaryMask,
    gt: &BinaryMask,
    points: usize,
    scribbles: Option<&ScribbleConfig>,
    rng: &mut impl Rng,
) -> Result<(Vec<PointPrompt>, Vec<Scribble>)> {
    let (fn_r, fp_r) = error_regions(pred, gt)?;
    let pts = sample_points(&fn_r, &fp_r, gt, points, rng)?;
    let scr = match scribbles {
        Some(cfg) => generate_scribbles(&fn_r, &fp_r, gt, rng, cfg)?,
        None => Vec::new(),
    };
    Ok((pts, scr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dice: f64,
    pub nsd: f64,
    pub points: Vec<PointPrompt>,
    pub scribble_voxels: usize,
    pub scribbles: usize,
    pub has_box: bool,
    pub scores: Vec<f32>,
    pub selected: usize,
    /// The mask the points were sampled against (empty at iteration 1).
    #[serde(skip)]
    pub prior_mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub records: Vec<IterationRecord>,
    pub final_mask: BinaryMask,
}

impl SessionResult {
    pub fn dice_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dice).collect()
    }

    pub fn nsd_curve(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.nsd).collect()
    }
}

/// Run the interactive loop with a simulated user. Iteration 1 treats the
/// prediction as empty, so its points come from the ground truth.
pub fn simulate_user_session(
    predictor: &mut dyn Predictor,
    case: &Case,
    cfg: &EvalConfig,
    rng: &mut impl Rng,
) -> Result<SessionResult> {
    cfg.validate()?;
    let gt = &case.label;
    let shape = gt.shape();
    let bbox = cfg.box_mode.box_for(gt)?;
    let scribble_cfg = cfg.scribbles.then_some(&cfg.scribble);
    let mut pred = BinaryMask::empty(shape);
    let mut state: Option<PromptState> = None;
    let mut last: Option<Prediction> = None;
    let mut records = Vec::with_capacity(cfg.iterations);
    for i in 1..=cfg.iterations {
        let (points, scribbles) = simulate_prompts(&pred, gt, cfg.points, scribble_cfg, rng)?;
        let scribble_voxels = scribbles.iter().map(|s| s.voxels.len()).sum();
        let n_scribbles = scribbles.len();
        let next = match (&state, &last) {
            (Some(s), Some(p)) => s.advance(points.clone(), scribbles, None, p.selected_logits.clone())?,
            _ => PromptState::initial(shape, points.clone(), scribbles, bbox)?,
        };
        let out = predictor.predict(&next)?;
        let prior = std::mem::replace(&mut pred, out.refined.threshold());
        records.push(IterationRecord {
            iteration: i,
            dice: dice_score(&pred, gt)?,
            nsd: nsd_score(&pred, gt, cfg.tau, gt.spacing())?,
            points,
            scribble_voxels,
            scribbles: n_scribbles,
            has_box: bbox.is_some(),
            scores: out.scores.clone(),
            selected: out.selected,
            prior_mask: Some(prior),
        });
        state = Some(next);
        last = Some(out);
    }
    Ok(SessionResult { records, final_mask: pred })
}

/// Sessions over `cases`, case `k` seeded from `(cfg.seed, k)`.
pub fn evaluate_cases(seg: Segmenter, cases: &[Case], cfg: &EvalConfig) -> Result<(IterationCurve, Vec<SessionResult>)> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    let mut results = Vec::with_capacity(cases.len());
    for (k, case) in cases.iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, &[k as u64]);
        let mut p = seg.predictor(case)?;
        results.push(simulate_user_session(p.as_mut(), case, cfg, &mut rng)?);
    }
    let curve = iteration_curves(&results)?;
    Ok((curve, results))
}

pub fn iteration_curves(results: &[SessionResult]) -> Result<IterationCurve> {
    let dice: Vec<_> = results.iter().map(SessionResult::dice_curve).collect();
    let nsd: Vec<_> = results.iter().map(SessionResult::nsd_curve).collect();
    IterationCurve::from_values(&dice, &nsd)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub points: Vec<usize>,
    pub boxes: Vec<BoxMode>,
    pub scribbles: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub points: usize,
    #[serde(rename = "box")]
    pub box_mode: BoxMode,
    pub scribbles: bool,
    pub dice: f64,
    pub dice_ci: f64,
    pub nsd: f64,
    pub nsd_ci: f64,
    pub dice_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub iterations: usize,
    pub tau: f64,
    pub cases: usize,
    pub rows: Vec<AblationRow>,
}

/// Cross product of variants × points × box modes × scribbles, final-iteration metrics per row.
pub fn ablation_matrix(
    variants: &[(&str, Segmenter)],
    cases: &[Case],
    grid: &AblationGrid,
    base: &EvalConfig,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (name, seg) in variants {
        for &points in &grid.points {
            for &box_mode in &grid.boxes {
                for &scribbles in &grid.scribbles {
                    let cfg = EvalConfig { points, box_mode, scribbles, ..base.clone() };
                    let (curve, results) = evaluate_cases(*seg, cases, &cfg)?;
                    let last = |f: fn(&IterationRecord) -> f64| {
                        mean_ci(&results.iter().map(|r| f(r.records.last().expect("non-empty"))).collect::<Vec<_>>())
                    };
                    let (dice, dice_ci) = last(|r| r.dice);
                    let (nsd, nsd_ci) = last(|r| r.nsd);
                    rows.push(AblationRow {
                        variant: name.to_string(),
                        points,
                        box_mode,
                        scribbles,
                        dice,
                        dice_ci,
                        nsd,
                        nsd_ci,
                        dice_curve: curve.dice,
                    });
                }
            }
        }
    }
    Ok(AblationReport {
        schema_version: ABLATION_SCHEMA_VERSION,
        iterations: base.iterations,
        tau: base.tau,
        cases: cases.len(),
        rows,
    })
}
