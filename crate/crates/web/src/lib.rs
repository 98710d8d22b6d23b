//! Browser demo: click on a synthetic lesion volume and watch the mask update.
//!
//! [`Demo`] holds everything and is plain Rust so it can be tested natively;
//! [`WebDemo`] is the thin `wasm_bindgen` face the page talks to.

use promptseg::eval::Prediction;
use promptseg::metrics::dice_score;
use promptseg::model::{var_to_logits, Checkpoint, FrozenEncoding, Model};
use promptseg::prompts::{Polarity, PointPrompt, PromptState};
use promptseg::seeding::derive_rng;
use promptseg::synth::{generate_case, Case, SynthSpec};
use promptseg::training::prepare_case;
use promptseg::{BinaryMask, Result};
use wasm_bindgen::prelude::*;

const CHECKPOINT: &[u8] = include_bytes!("../../cli/assets/tiny.ckpt");

pub struct Demo {
    model: Model,
    case: Case,
    encoding: FrozenEncoding,
    state: Option<PromptState>,
    last: Option<Prediction>,
    mask: BinaryMask,
    range: (f32, f32),
}

impl Demo {
    pub fn new(case_seed: u64) -> Result<Self> {
        let model = Model::from_checkpoint(&Checkpoint::read_from(CHECKPOINT)?)?;
        let n = model.config().patch_size;
        let raw = generate_case(&SynthSpec::for_grid(n), case_seed)?;
        let case = prepare_case("demo", &raw, n, &mut derive_rng(case_seed, &[]))?.case;
        let encoding = model.encode_image(&model.bind_frozen(), &case.image)?.freeze();
        let data = case.image.data();
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        Ok(Self {
            mask: BinaryMask::empty(case.label.shape()),
            model,
            case,
            encoding,
            state: None,
            last: None,
            range: (lo, (hi - lo).max(f32::EPSILON)),
        })
    }

    pub fn size(&self) -> usize {
        self.case.label.shape().0[0]
    }

    pub fn iteration(&self) -> usize {
        self.state.as_ref().map_or(0, PromptState::iteration)
    }

    /// One interaction with a single point; returns Dice against the hidden ground truth.
    pub fn click(&mut self, coord: [usize; 3], positive: bool) -> Result<f64> {
        let label = if positive { Polarity::Positive } else { Polarity::Negative };
        let points = vec![PointPrompt { coord, label }];
        let next = match (&self.state, &self.last) {
            (Some(s), Some(p)) => s.advance(points, Vec::new(), None, p.selected_logits.clone())?,
            _ => PromptState::initial(self.case.label.shape(), points, Vec::new(), None)?,
        };
        let out = self.model.infer(&self.model.bind_frozen(), &self.encoding.thaw(), &next)?;
        let shape = next.shape();
        let pred = Prediction {
            selected_logits: var_to_logits(&out.selected_map, shape),
            refined: var_to_logits(&out.refined, shape),
            scores: out.score_values(),
            selected: out.selected,
        };
        self.mask = pred.refined.threshold();
        self.state = Some(next);
        self.last = Some(pred);
        dice_score(&self.mask, &self.case.label)
    }

    pub fn reset(&mut self) {
        self.state = None;
        self.last = None;
        self.mask = BinaryMask::empty(self.case.label.shape());
    }

    /// RGBA pixels of axial slice `z`: grey image, red mask tint, green/blue clicks,
    /// and the ground-truth outline in yellow when `truth` is set.
    pub fn render(&self, z: usize, truth: bool) -> Vec<u8> {
        let [d, h, w] = self.case.label.shape().0;
        let z = z.min(d - 1);
        let (lo, span) = self.range;
        let (pos, neg) = match &self.state {
            Some(s) => (Some(s.cumulative_positive()), Some(s.cumulative_negative())),
            None => (None, None),
        };
        let gt = &self.case.label;
        let edge = |y: usize, x: usize| {
            *gt.get([z, y, x])
                && [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dy, dx)| {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || !*gt.get([z, yy as usize, xx as usize])
                })
        };
        let mut px = Vec::with_capacity(h * w * 4);
        for y in 0..h {
            for x in 0..w {
                let c = [z, y, x];
                let g = (((self.case.image.get(c) - lo) / span).clamp(0.0, 1.0) * 255.0) as u8;
                let mut rgb = [g, g, g];
                if *self.mask.get(c) {
                    rgb = [rgb[0].saturating_add(110), rgb[1] / 2, rgb[2] / 2];
                }
                if truth && edge(y, x) {
                    rgb = [255, 220, 0];
                }
                if pos.is_some_and(|m| *m.get(c)) {
                    rgb = [0, 255, 80];
                } else if neg.is_some_and(|m| *m.get(c)) {
                    rgb = [40, 140, 255];
                }
                px.extend_from_slice(&[rgb[0], rgb[1], rgb[2], 255]);
            }
        }
        px
    }
}

#[wasm_bindgen]
pub struct WebDemo(Demo);

fn js(e: promptseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(case_seed: u32) -> std::result::Result<WebDemo, JsError> {
        Demo::new(case_seed as u64).map(WebDemo).map_err(js)
    }

    pub fn size(&self) -> usize {
        self.0.size()
    }

    pub fn iteration(&self) -> usize {
        self.0.iteration()
    }

    pub fn click(&mut self, z: usize, y: usize, x: usize, positive: bool) -> std::result::Result<f64, JsError> {
        self.0.click([z, y, x], positive).map_err(js)
    }

    pub fn reset(&mut self) {
        self.0.reset()
    }

    pub fn render(&self, z: usize, truth: bool) -> Vec<u8> {
        self.0.render(z, truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clicks_segment_the_lesion() {
        let mut d = Demo::new(3).unwrap();
        let n = d.size();
        assert_eq!(d.render(n / 2, true).len(), n * n * 4);
        let inside = d.case.label.coords()[d.case.label.count() / 2];
        let first = d.click(inside, true).unwrap();
        assert_eq!(d.iteration(), 1);
        assert!(first > 0.3, "dice after one click {first}");
        let fp = d.mask.and_not(&d.case.label).unwrap().coords();
        let fn_ = d.case.label.and_not(&d.mask).unwrap().coords();
        let (c, pos) = match (fp.first(), fn_.first()) {
            (Some(&c), _) => (c, false),
            (None, Some(&c)) => (c, true),
            (None, None) => return,
        };
        d.click(c, pos).unwrap();
        assert_eq!(d.iteration(), 2);
        d.reset();
        assert_eq!(d.iteration(), 0);
        assert!(d.click([n, 0, 0], true).is_err());
    }
}
