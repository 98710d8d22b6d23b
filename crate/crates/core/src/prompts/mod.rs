//! Visual prompts and the simulated user.
//!
//! Points are drawn uniformly from the current error regions, the box is the
//! tight ground-truth box fixed at the first iteration, and scribbles are
//! grown from skeletons of the error regions (see [`scribble`]).

mod skeleton;
pub mod scribble;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::volume::{BinaryMask, LogitMap, Shape3};

pub use scribble::{generate_scribbles, random_split_mask, ScribbleConfig};
pub use skeleton::{skeletonize, thin_slice};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PointPrompt {
    pub coord: [usize; 3],
    pub label: Polarity,
}

/// Axis-aligned box with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scribble {
    pub voxels: Vec<[usize; 3]>,
    pub label: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxPerturbation {
    Erode,
    Dilate,
}

/// False-negative and false-positive voxels of `pred` against `gt`.
pub fn error_regions(pred: &BinaryMask, gt: &BinaryMask) -> Result<(BinaryMask, BinaryMask)> {
    ensure_same_shape(pred.shape(), gt.shape())?;
    Ok((gt.and_not(pred)?, pred.and_not(gt)?))
}

/// `n` i.i.d. points, uniform over FN ∪ FP, positive iff drawn from FN.
///
/// When both regions are empty a single positive point is placed uniformly on
/// the ground-truth foreground (nothing is returned for an empty `gt`).
pub fn sample_points(
    fn_region: &BinaryMask,
    fp_region: &BinaryMask,
    gt: &BinaryMask,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PointPrompt>> {
    ensure_same_shape(fn_region.shape(), fp_region.shape())?;
    ensure_same_shape(fn_region.shape(), gt.shape())?;
    if n == 0 {
        return Err(Error::InvalidArgument("point count must be at least 1".into()));
    }
    let shape = gt.shape();
    let candidates: Vec<(usize, Polarity)> = fn_region
        .indices()
        .into_iter()
        .map(|i| (i, Polarity::Positive))
        .chain(fp_region.indices().into_iter().map(|i| (i, Polarity::Negative)))
        .collect();
    if candidates.is_empty() {
        return Ok(fallback_point(gt, rng).into_iter().collect());
    }
    Ok((0..n)
        .map(|_| {
            let (i, label) = candidates[rng.random_range(0..candidates.len())];
            PointPrompt {
                coord: shape.coord(i),
                label,
            }
        })
        .collect())
}

/// One positive point uniform over the ground-truth foreground.
pub fn fallback_point(gt: &BinaryMask, rng: &mut impl Rng) -> Option<PointPrompt> {
    let fg = gt.indices();
    (!fg.is_empty()).then(|| PointPrompt {
        coord: gt.shape().coord(fg[rng.random_range(0..fg.len())]),
        label: Polarity::Positive,
    })
}

pub fn ground_truth_bbox(y: &BinaryMask) -> Result<BoxPrompt> {
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for c in y.coords() {
        any = true;
        for a in 0..3 {
            min[a] = min[a].min(c[a]);
            max[a] = max[a].max(c[a]);
        }
    }
    if !any {
        return Err(Error::EmptyForeground("bounding box of an empty mask"));
    }
    Ok(BoxPrompt { min, max })
}

/// Move every face by `radius` voxels, clamped to the grid. An erosion that
/// would invert an axis collapses that axis to the box centre plane
/// `floor((min + max) / 2)`.
pub fn perturb_bbox(b: BoxPrompt, radius: usize, mode: BoxPerturbation, grid: Shape3) -> BoxPrompt {
    let mut out = b;
    for a in 0..3 {
        let last = grid.0[a] - 1;
        match mode {
            BoxPerturbation::Dilate => {
                out.min[a] = b.min[a].saturating_sub(radius);
                out.max[a] = (b.max[a] + radius).min(last);
            }
            BoxPerturbation::Erode => {
                let lo = b.min[a] + radius;
                let hi = b.max[a].checked_sub(radius);
                match hi {
                    Some(hi) if lo <= hi => {
                        out.min[a] = lo;
                        out.max[a] = hi;
                    }
                    _ => {
                        let c = (b.min[a] + b.max[a]) / 2;
                        out.min[a] = c;
                        out.max[a] = c;
                    }
                }
            }
        }
    }
    out
}

fn check_coord(c: [usize; 3], shape: Shape3) -> Result<usize> {
    let s = [c[0] as i64, c[1] as i64, c[2] as i64];
    shape
        .checked_index(s)
        .ok_or(Error::OutOfGrid { coord: s, shape })
}

/// Binary maps with exactly the prompted voxels of each polarity set.
pub fn rasterize_prompts(
    points: &[PointPrompt],
    scribbles: &[Scribble],
    shape: Shape3,
) -> Result<(BinaryMask, BinaryMask)> {
    let mut pos = BinaryMask::empty(shape);
    let mut neg = BinaryMask::empty(shape);
    let voxels = points
        .iter()
        .map(|p| (p.coord, p.label))
        .chain(scribbles.iter().flat_map(|s| s.voxels.iter().map(move |&v| (v, s.label))));
    for (c, label) in voxels {
        let i = check_coord(c, shape)?;
        match label {
            Polarity::Positive => pos.data_mut()[i] = true,
            Polarity::Negative => neg.data_mut()[i] = true,
        }
    }
    Ok((pos, neg))
}

/// Prompts seen by the network at one iteration.
///
/// Points and scribbles belong to the current iteration only; the cumulative
/// maps are the running union over all iterations; the box is fixed at
/// iteration 1.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    iteration: usize,
    points: Vec<PointPrompt>,
    scribbles: Vec<Scribble>,
    bbox: Option<BoxPrompt>,
    cumulative_positive: BinaryMask,
    cumulative_negative: BinaryMask,
    previous_logits: Option<LogitMap>,
}

impl PromptState {
    pub fn initial(
        shape: Shape3,
        points: Vec<PointPrompt>,
        scribbles: Vec<Scribble>,
        bbox: Option<BoxPrompt>,
    ) -> Result<Self> {
        if let Some(b) = bbox {
            check_coord(b.min, shape)?;
            check_coord(b.max, shape)?;
            if (0..3).any(|a| b.min[a] > b.max[a]) {
                return Err(Error::InvalidArgument(format!("box {b:?} has min > max")));
            }
        }
        let (pos, neg) = rasterize_prompts(&points, &scribbles, shape)?;
        Ok(Self {
            iteration: 1,
            points,
            scribbles,
            bbox,
            cumulative_positive: pos,
            cumulative_negative: neg,
            previous_logits: None,
        })
    }

    /// Next iteration with fresh sparse prompts. A box may only be given at iteration 1.
    pub fn advance(
        &self,
        points: Vec<PointPrompt>,
        scribbles: Vec<Scribble>,
        new_box: Option<BoxPrompt>,
        previous_logits: LogitMap,
    ) -> Result<Self> {
        if new_box.is_some() {
            return Err(Error::Protocol(format!(
                "the box is fixed at iteration 1 and cannot be replaced at iteration {}",
                self.iteration + 1
            )));
        }
        let shape = self.shape();
        ensure_same_shape(shape, previous_logits.shape())?;
        let (pos, neg) = rasterize_prompts(&points, &scribbles, shape)?;
        Ok(Self {
            iteration: self.iteration + 1,
            points,
            scribbles,
            bbox: self.bbox,
            cumulative_positive: self.cumulative_positive.or(&pos)?,
            cumulative_negative: self.cumulative_negative.or(&neg)?,
            previous_logits: Some(previous_logits),
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.cumulative_positive.shape()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn points(&self) -> &[PointPrompt] {
        &self.points
    }

    pub fn scribbles(&self) -> &[Scribble] {
        &self.scribbles
    }

    pub fn bbox(&self) -> Option<BoxPrompt> {
        self.bbox
    }

    pub fn cumulative_positive(&self) -> &BinaryMask {
        &self.cumulative_positive
    }

    pub fn cumulative_negative(&self) -> &BinaryMask {
        &self.cumulative_negative
    }

    pub fn previous_logits(&self) -> Option<&LogitMap> {
        self.previous_logits.as_ref()
    }

    pub fn sparse_prompt_count(&self) -> usize {
        self.points.len() + self.scribbles.len() + usize::from(self.bbox.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn error_regions_edge_cases() {
        let s = Shape3::cube(4);
        let gt = BinaryMask::from_fn(s, |[z, _, _]| z < 2);
        let (fn_, fp) = error_regions(&gt, &gt).unwrap();
        assert!(!fn_.any() && !fp.any());
        let (fn_, fp) = error_regions(&BinaryMask::empty(s), &gt).unwrap();
        assert_eq!(fn_, gt);
        assert!(!fp.any());
        assert!(error_regions(&gt, &BinaryMask::empty(Shape3::cube(3))).is_err());
    }

    #[test]
    fn error_regions_match_truth_table() {
        let mut r = rng(7);
        let s = Shape3::cube(4);
        let pred = BinaryMask::from_fn(s, |_| r.random());
        let gt = BinaryMask::from_fn(s, |_| r.random());
        let (fn_, fp) = error_regions(&pred, &gt).unwrap();
        for i in 0..s.len() {
            let (p, g) = (pred.data()[i], gt.data()[i]);
            let expect = match (p, g) {
                (false, true) => (true, false),
                (true, false) => (false, true),
                _ => (false, false),
            };
            assert_eq!((fn_.data()[i], fp.data()[i]), expect);
        }
    }

    #[test]
    fn single_candidate_and_fallback() {
        let s = Shape3::cube(5);
        let mut fn_ = BinaryMask::empty(s);
        fn_.set([1, 2, 3], true);
        let gt = fn_.clone();
        let pts = sample_points(&fn_, &BinaryMask::empty(s), &gt, 1, &mut rng(0)).unwrap();
        assert_eq!(pts, vec![PointPrompt { coord: [1, 2, 3], label: Polarity::Positive }]);

        let gt = BinaryMask::from_fn(s, |[z, y, x]| z == 2 && y == 2 && x < 3);
        let empty = BinaryMask::empty(s);
        for seed in 0..20 {
            let pts = sample_points(&empty, &empty, &gt, 7, &mut rng(seed)).unwrap();
            assert_eq!(pts.len(), 1);
            assert_eq!(pts[0].label, Polarity::Positive);
            assert!(*gt.get(pts[0].coord));
        }
        assert!(sample_points(&empty, &empty, &empty, 3, &mut rng(0)).unwrap().is_empty());
        assert!(sample_points(&empty, &empty, &gt, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn bbox_cases() {
        let s = Shape3::cube(8);
        let mut y = BinaryMask::empty(s);
        y.set([3, 4, 5], true);
        assert_eq!(ground_truth_bbox(&y).unwrap(), BoxPrompt { min: [3, 4, 5], max: [3, 4, 5] });
        let full = BinaryMask::filled(s, true);
        assert_eq!(ground_truth_bbox(&full).unwrap(), BoxPrompt { min: [0; 3], max: [7; 3] });
        assert!(ground_truth_bbox(&BinaryMask::empty(s)).is_err());

        let mut r = rng(3);
        let y = BinaryMask::from_fn(s, |_| r.random_bool(0.05));
        let b = ground_truth_bbox(&y).unwrap();
        // Coordinate-scan oracle.
        let mut lo = [usize::MAX; 3];
        let mut hi = [0; 3];
        for z in 0..8 {
            for yy in 0..8 {
                for x in 0..8 {
                    if *y.get([z, yy, x]) {
                        let c = [z, yy, x];
                        for a in 0..3 {
                            lo[a] = lo[a].min(c[a]);
                            hi[a] = hi[a].max(c[a]);
                        }
                    }
                }
            }
        }
        assert_eq!(b, BoxPrompt { min: lo, max: hi });
    }

    #[test]
    fn perturbation_arithmetic() {
        let g = Shape3::cube(32);
        let b = BoxPrompt { min: [5; 3], max: [20; 3] };
        assert_eq!(perturb_bbox(b, 0, BoxPerturbation::Erode, g), b);
        assert_eq!(perturb_bbox(b, 0, BoxPerturbation::Dilate, g), b);
        assert_eq!(
            perturb_bbox(b, 5, BoxPerturbation::Dilate, g),
            BoxPrompt { min: [0; 3], max: [25; 3] }
        );
        assert_eq!(
            perturb_bbox(b, 5, BoxPerturbation::Erode, g),
            BoxPrompt { min: [10; 3], max: [15; 3] }
        );
        // 6-voxel-wide axis [10, 15]: 15 > 10 after erosion, so it collapses to floor(25 / 2).
        let narrow = BoxPrompt { min: [10, 2, 0], max: [15, 29, 31] };
        assert_eq!(
            perturb_bbox(narrow, 5, BoxPerturbation::Erode, g),
            BoxPrompt { min: [12, 7, 5], max: [12, 24, 26] }
        );
        // Erosion beyond zero collapses too instead of underflowing.
        let tiny = BoxPrompt { min: [0; 3], max: [2; 3] };
        assert_eq!(perturb_bbox(tiny, 5, BoxPerturbation::Erode, g), BoxPrompt { min: [1; 3], max: [1; 3] });
    }

    #[test]
    fn rasterization() {
        let s = Shape3::cube(4);
        let (p, n) = rasterize_prompts(&[], &[], s).unwrap();
        assert!(!p.any() && !n.any());
        let pt = PointPrompt { coord: [1, 1, 1], label: Polarity::Positive };
        let (p, n) = rasterize_prompts(&[pt], &[], s).unwrap();
        assert_eq!(p.indices(), vec![s.index([1, 1, 1])]);
        assert!(!n.any());
        let sc = Scribble { voxels: vec![[1, 1, 1], [1, 1, 2]], label: Polarity::Positive };
        let (p, _) = rasterize_prompts(&[pt], &[sc], s).unwrap();
        assert_eq!(p.count(), 2);
        let bad = PointPrompt { coord: [4, 0, 0], label: Polarity::Negative };
        assert!(matches!(rasterize_prompts(&[bad], &[], s), Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn prompt_state_accumulates_and_locks_box() {
        let s = Shape3::cube(4);
        let b = BoxPrompt { min: [0; 3], max: [2; 3] };
        let p1 = PointPrompt { coord: [0, 0, 0], label: Polarity::Positive };
        let st = PromptState::initial(s, vec![p1], vec![], Some(b)).unwrap();
        assert_eq!(st.iteration(), 1);
        assert!(st.previous_logits().is_none());
        let p2 = PointPrompt { coord: [3, 3, 3], label: Polarity::Negative };
        let logits = LogitMap::zeros(s);
        let st2 = st.advance(vec![p2], vec![], None, logits.clone()).unwrap();
        assert_eq!(st2.points(), &[p2]);
        assert_eq!(st2.bbox(), Some(b));
        assert!(st2.cumulative_positive().get([0, 0, 0]));
        assert!(st2.cumulative_negative().get([3, 3, 3]));
        assert!(matches!(st2.advance(vec![], vec![], Some(b), logits), Err(Error::Protocol(_))));
    }

    proptest! {
        #[test]
        fn sampled_points_respect_membership(seed in any::<u64>(), n in 1usize..40) {
            let mut r = rng(seed);
            let s = Shape3::new(3, 4, 5);
            let pred = BinaryMask::from_fn(s, |_| r.random());
            let gt = BinaryMask::from_fn(s, |_| r.random());
            let (fn_, fp) = error_regions(&pred, &gt).unwrap();
            for p in sample_points(&fn_, &fp, &gt, n, &mut r).unwrap() {
                match p.label {
                    Polarity::Positive => prop_assert!(*fn_.get(p.coord) || (!fn_.any() && !fp.any() && *gt.get(p.coord))),
                    Polarity::Negative => prop_assert!(*fp.get(p.coord)),
                }
            }
        }

        #[test]
        fn cumulative_maps_are_monotone(seed in any::<u64>()) {
            let mut r = rng(seed);
            let s = Shape3::cube(4);
            let mut st = PromptState::initial(s, vec![], vec![], None).unwrap();
            for _ in 0..4 {
                let pts: Vec<_> = (0..3).map(|_| PointPrompt {
                    coord: [r.random_range(0..4), r.random_range(0..4), r.random_range(0..4)],
                    label: if r.random() { Polarity::Positive } else { Polarity::Negative },
                }).collect();
                let next = st.advance(pts, vec![], None, LogitMap::zeros(s)).unwrap();
                prop_assert!(st.cumulative_positive().and_not(next.cumulative_positive()).unwrap().count() == 0);
                prop_assert!(st.cumulative_negative().and_not(next.cumulative_negative()).unwrap().count() == 0);
                st = next;
            }
        }
    }
}
