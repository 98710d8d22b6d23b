use std::sync::Arc;
use std::time::Instant;

use super::wire::*;
use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::metrics::dice_score;
use crate::model::{var_to_logits, FrozenEncoding, Model};
use crate::preprocess::{extract_patch, nonzero_foreground, paste_back, percentile_sorted, standard_preprocess};
use crate::prompts::{BoxPrompt, PointPrompt, PromptState, Scribble};
use crate::vgrid::{encode, AnyGrid};
use crate::volume::{BinaryMask, Shape3, Volume};

/// One interactive segmentation: the volume, its cached encoding, and the prompt history.
///
/// Request coordinates are in volume space. The network sees a centred patch of
/// the model's size; masks are pasted back to the full grid.
pub struct Session {
    id: String,
    checkpoint: String,
    model: Arc<Model>,
    volume: Volume,
    label: Option<BinaryMask>,
    synthetic: Option<SyntheticSource>,
    offset: [i64; 3],
    patch_label: Option<BinaryMask>,
    encoding: FrozenEncoding,
    window: Window,
    state: Option<PromptState>,
    last: Option<Prediction>,
    mask: BinaryMask,
    entries: Vec<LogEntry>,
    pub(super) last_active: Instant,
}

fn window_of(v: &Volume) -> Window {
    let mut vals: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    vals.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&vals, 0.5) as f32;
    let hi = percentile_sorted(&vals, 99.5) as f32;
    Window { center: (lo + hi) / 2.0, width: (hi - lo).max(f32::EPSILON) }
}

impl Session {
    pub fn create(
        id: String,
        checkpoint: String,
        model: Arc<Model>,
        volume: Volume,
        label: Option<BinaryMask>,
        synthetic: Option<SyntheticSource>,
    ) -> Result<Self> {
        if let Some(l) = &label {
            crate::error::ensure_same_shape(volume.shape(), l.shape())?;
        }
        let p = model.config().patch_size;
        let offset: [i64; 3] = std::array::from_fn(|a| (volume.shape().0[a] as i64 - p as i64).div_euclid(2));
        let normalised = standard_preprocess(&volume, &nonzero_foreground(&volume))?;
        let empty = BinaryMask::empty(volume.shape());
        let patch = extract_patch(&normalised, label.as_ref().unwrap_or(&empty), [p; 3], offset);
        let bound = model.bind_frozen();
        let encoding = model.encode_image(&bound, &patch.image)?.freeze();
        Ok(Self {
            id,
            checkpoint,
            window: window_of(&volume),
            mask: BinaryMask::empty(volume.shape()),
            patch_label: label.as_ref().map(|_| patch.label),
            model,
            volume,
            label,
            synthetic,
            offset,
            encoding,
            state: None,
            last: None,
            entries: Vec::new(),
            last_active: Instant::now(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// The next iteration to run.
    pub fn iteration(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }

    fn patch_shape(&self) -> Shape3 {
        Shape3::cube(self.model.config().patch_size)
    }

    fn to_patch(&self, c: [usize; 3]) -> Result<[usize; 3]> {
        let full = self.volume.shape();
        let ci = c.map(|v| v as i64);
        if !full.contains(ci) {
            return Err(Error::OutOfGrid { coord: ci, shape: full });
        }
        let local: [i64; 3] = std::array::from_fn(|a| ci[a] - self.offset[a]);
        if !self.patch_shape().contains(local) {
            return Err(Error::OutOfGrid { coord: ci, shape: self.patch_shape() });
        }
        Ok(local.map(|v| v as usize))
    }

    fn prompts_to_patch(&self, req: &PromptRequest) -> Result<(Vec<PointPrompt>, Vec<Scribble>, Option<BoxPrompt>)> {
        let points = req
            .points
            .iter()
            .map(|p| Ok(PointPrompt { coord: self.to_patch(p.coord)?, label: p.label }))
            .collect::<Result<Vec<_>>>()?;
        let scribbles = req
            .scribbles
            .iter()
            .map(|s| {
                if s.voxels.is_empty() {
                    return Err(Error::InvalidArgument("a scribble needs at least one voxel".into()));
                }
                let voxels = s.voxels.iter().map(|&v| self.to_patch(v)).collect::<Result<Vec<_>>>()?;
                Ok(Scribble { voxels, label: s.label })
            })
            .collect::<Result<Vec<_>>>()?;
        let bbox = match req.bbox {
            Some(b) => Some(BoxPrompt { min: self.to_patch(b.min)?, max: self.to_patch(b.max)? }),
            None => None,
        };
        Ok((points, scribbles, bbox))
    }

    /// Run one iteration with user-supplied prompts.
    pub fn submit(&mut self, req: &PromptRequest) -> Result<PromptResponse> {
        check_version(req.version)?;
        if req.is_empty() {
            return Err(Error::InvalidArgument("at least one point, box or scribble is required".into()));
        }
        if req.bbox.is_some() && self.state.is_some() {
            return Err(Error::Protocol(format!(
                "a box may only be given at iteration 1; this is iteration {}",
                self.iteration()
            )));
        }
        let (points, scribbles, bbox) = self.prompts_to_patch(req)?;
        let next = match (&self.state, &self.last) {
            (Some(s), Some(p)) => s.advance(points, scribbles, None, p.selected_logits.clone())?,
            _ => PromptState::initial(self.patch_shape(), points, scribbles, bbox)?,
        };
        let bound = self.model.bind_frozen();
        let out = self.model.infer(&bound, &self.encoding.thaw(), &next)?;
        let shape = self.patch_shape();
        let pred = Prediction {
            selected_logits: var_to_logits(&out.selected_map, shape),
            refined: var_to_logits(&out.refined, shape),
            scores: out.score_values(),
            selected: out.selected,
        };
        let patch_mask = pred.refined.threshold();
        self.mask = paste_back(&patch_mask, self.offset, self.volume.shape());
        let dice = match &self.label {
            Some(l) => Some(dice_score(&self.mask, l)?),
            None => None,
        };
        let result = HistoryEntry {
            iteration: next.iteration(),
            selected: pred.selected,
            scores: pred.scores.clone(),
            dice,
            foreground_voxels: self.mask.count(),
        };
        self.entries.push(LogEntry { prompts: req.clone(), result: result.clone() });
        self.state = Some(next);
        self.last = Some(pred);
        self.last_active = Instant::now();
        Ok(PromptResponse {
            version: WIRE_VERSION,
            iteration: result.iteration,
            selected: result.selected,
            selected_score: result.scores[result.selected],
            scores: result.scores,
            dice,
            mask: MaskPayload::encode(&self.mask),
        })
    }

    fn prompt_layer(&self) -> Vec<u8> {
        let full = self.volume.shape();
        let mut out = vec![0u8; full.len()];
        if let Some(s) = &self.state {
            for (mask, code) in [(s.cumulative_positive(), 1u8), (s.cumulative_negative(), 2u8)] {
                for i in paste_back(mask, self.offset, full).indices() {
                    out[i] = code;
                }
            }
        }
        out
    }

    /// A 2D slice, row-major. Images are f32 with a display window; masks and prompts are u8.
    pub fn slice(&self, axis: Axis, index: usize, layer: Layer) -> Result<SliceResponse> {
        let [d, h, w] = self.volume.shape().0;
        let (n, rows, cols) = match axis {
            Axis::Z => (d, h, w),
            Axis::Y => (h, d, w),
            Axis::X => (w, d, h),
        };
        if index >= n {
            return Err(Error::OutOfGrid { coord: [index as i64, 0, 0], shape: self.volume.shape() });
        }
        let at = |r: usize, c: usize| match axis {
            Axis::Z => [index, r, c],
            Axis::Y => [r, index, c],
            Axis::X => [r, c, index],
        };
        let shape = self.volume.shape();
        let coords = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c)));
        let (dtype, bytes, window) = match layer {
            Layer::Image => {
                let b: Vec<u8> = coords.flat_map(|(r, c)| self.volume.get(at(r, c)).to_le_bytes()).collect();
                ("f32", b, Some(self.window))
            }
            Layer::Mask => ("u8", coords.map(|(r, c)| *self.mask.get(at(r, c)) as u8).collect(), None),
            Layer::Prompts => {
                let p = self.prompt_layer();
                ("u8", coords.map(|(r, c)| p[shape.index(at(r, c))]).collect(), None)
            }
        };
        Ok(SliceResponse {
            version: WIRE_VERSION,
            axis,
            index,
            layer,
            height: rows,
            width: cols,
            dtype: dtype.into(),
            data: b64_encode(&bytes),
            window,
        })
    }

    pub fn state(&self) -> StateResponse {
        let to_full = |b: BoxPrompt| {
            let f = |c: [usize; 3]| std::array::from_fn(|a| (c[a] as i64 + self.offset[a]) as usize);
            BoxPrompt { min: f(b.min), max: f(b.max) }
        };
        StateResponse {
            version: WIRE_VERSION,
            id: self.id.clone(),
            iteration: self.iteration(),
            shape: self.volume.shape().0,
            bbox: self.state.as_ref().and_then(|s| s.bbox()).map(to_full),
            history: self.entries.iter().map(|e| e.result.clone()).collect(),
            checkpoint: self.checkpoint.clone(),
        }
    }

    pub fn log(&self) -> SessionLog {
        SessionLog {
            version: WIRE_VERSION,
            id: self.id.clone(),
            checkpoint: self.checkpoint.clone(),
            shape: self.volume.shape().0,
            spacing: self.volume.spacing(),
            synthetic: self.synthetic.clone(),
            entries: self.entries.clone(),
        }
    }

    /// Prompt/metric log plus the final mask as VGRID (no mask before the first iteration).
    pub fn export(&self) -> ExportResponse {
        let mask_vgrid = (!self.entries.is_empty()).then(|| {
            let m = self.mask.clone().with_spacing(self.volume.spacing()).expect("spacing is valid");
            b64_encode(&encode(&AnyGrid::Mask(m)))
        });
        ExportResponse { version: WIRE_VERSION, log: self.log(), mask_vgrid }
    }

    /// Ground truth cropped to the network patch, when present.
    pub fn patch_label(&self) -> Option<&BinaryMask> {
        self.patch_label.as_ref()
    }
}

/// Re-run a logged session on the same volume and checkpoint; returns the resulting session.
pub fn replay(
    model: Arc<Model>,
    volume: Volume,
    label: Option<BinaryMask>,
    log: &SessionLog,
) -> Result<Session> {
    check_version(log.version)?;
    if volume.shape().0 != log.shape {
        return Err(Error::ShapeMismatch { left: volume.shape(), right: Shape3(log.shape) });
    }
    let mut s = Session::create(
        format!("{}-replay", log.id),
        log.checkpoint.clone(),
        model,
        volume,
        label,
        log.synthetic.clone(),
    )?;
    for e in &log.entries {
        s.submit(&e.prompts)?;
    }
    Ok(s)
}
