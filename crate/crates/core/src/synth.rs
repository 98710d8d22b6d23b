//! Procedural lesion phantoms and train/val/test manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{gaussian_blur, DisplacementField};
use crate::vgrid::{read_grid, write_grid, AnyGrid};
use crate::volume::{BinaryMask, Shape3, Volume};

/// Smoothing scale of lesion-warping and scribble-warping displacement fields.
pub const DEFORM_SMOOTH_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub grid_size: [usize; 3],
    /// Inclusive lesion count range.
    pub lesion_count_range: (usize, usize),
    /// Inclusive per-axis ellipsoid semi-axis range in voxels.
    pub radius_range: (f64, f64),
    pub boundary_blur_sigma: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub deformation_amplitude: f64,
    /// Upper bound of the low-frequency background texture (lower bound is 0).
    pub background_max: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid_size: [32; 3],
            lesion_count_range: (1, 3),
            radius_range: (4.0, 8.0),
            boundary_blur_sigma: 1.0,
            contrast: 1.0,
            noise_sigma: 0.1,
            deformation_amplitude: 1.5,
            background_max: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Defaults on an `n`³ grid, with lesions scaled down below 32 voxels.
    pub fn for_grid(n: usize) -> Self {
        let d = Self { grid_size: [n; 3], ..Self::default() };
        if n >= 32 {
            return d;
        }
        Self { radius_range: (2.0, (n as f64 / 5.0).max(2.0)), deformation_amplitude: 0.5, ..d }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lesion_count_range;
        if lo == 0 || hi < lo {
            return Err(Error::InvalidArgument(format!("lesion count range {lo}..={hi} is invalid")));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo >= 1.0) || rhi < rlo {
            return Err(Error::InvalidArgument(format!("radius range {rlo}..={rhi} is invalid")));
        }
        for (name, v) in [
            ("boundary_blur_sigma", self.boundary_blur_sigma),
            ("noise_sigma", self.noise_sigma),
            ("deformation_amplitude", self.deformation_amplitude),
            ("background_max", self.background_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        let margin = self.centre_margin();
        for &n in &self.grid_size {
            if n as f64 <= 2.0 * margin {
                return Err(Error::InvalidArgument(format!(
                    "lesions of radius {rhi} with deformation {} cannot fit in a grid of {n}",
                    self.deformation_amplitude
                )));
            }
        }
        Ok(())
    }

    /// Minimum distance from a lesion centre to any face, keeping the mask one voxel off the border.
    fn centre_margin(&self) -> f64 {
        self.radius_range.1 + self.deformation_amplitude * 3f64.sqrt() + 1.0
    }

    fn shape(&self) -> Shape3 {
        Shape3(self.grid_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub image: Volume,
    pub label: BinaryMask,
}

fn case_rng(spec: &SynthSpec, case_seed: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&spec.seed.to_le_bytes());
    seed[8..16].copy_from_slice(&case_seed.to_le_bytes());
    seed[16..24].copy_from_slice(b"lesions!");
    ChaCha8Rng::from_seed(seed)
}

/// Union of randomly oriented, smoothly warped ellipsoids over a textured background.
pub fn generate_case(spec: &SynthSpec, case_seed: u64) -> Result<Case> {
    spec.validate()?;
    let shape = spec.shape();
    let mut rng = case_rng(spec, case_seed);
    let margin = spec.centre_margin();

    let label = loop {
        let count = rng.random_range(spec.lesion_count_range.0..=spec.lesion_count_range.1);
        let lesions: Vec<([f64; 3], [f64; 3])> = (0..count)
            .map(|_| {
                let centre = std::array::from_fn(|a| {
                    let n = shape.0[a] as f64;
                    rng.random_range(margin..=(n - 1.0 - margin).max(margin))
                });
                let radii = std::array::from_fn(|_| {
                    let (lo, hi) = spec.radius_range;
                    if hi > lo { rng.random_range(lo..=hi) } else { lo }
                });
                (centre, radii)
            })
            .collect();
        let field = DisplacementField::random(shape, DEFORM_SMOOTH_SIGMA, spec.deformation_amplitude, &mut rng);
        let mask = BinaryMask::from_fn(shape, |c| {
            let u = field.at(shape.index(c));
            let p: [f64; 3] = std::array::from_fn(|a| c[a] as f64 + u[a]);
            lesions.iter().any(|(centre, radii)| {
                (0..3)
                    .map(|a| ((p[a] - centre[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            })
        });
        if mask.any() {
            break mask;
        }
    };

    let background = if spec.background_max > 0.0 {
        let noise = Volume::from_fn(shape, |_| rng.random::<f32>());
        let smooth = gaussian_blur(&noise, DEFORM_SMOOTH_SIGMA);
        let (lo, hi) = smooth
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = (hi - lo).max(f32::EPSILON);
        smooth.map(|&v| (v - lo) / span * spec.background_max as f32)
    } else {
        Volume::zeros(shape)
    };
    let contrast = spec.contrast as f32;
    let sharp = background
        .zip_map(&label, |&b, &m| b + if m { contrast } else { 0.0 })
        .expect("same shape");
    let blurred = gaussian_blur(&sharp, spec.boundary_blur_sigma);
    let image = if spec.noise_sigma > 0.0 {
        let sigma = spec.noise_sigma;
        blurred.map(|&v| v + (rng.sample::<f64, _>(StandardNormal) * sigma) as f32)
    } else {
        blurred
    };
    Ok(Case { image, label })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub case_seed: u64,
    pub split: Split,
    pub image: Option<PathBuf>,
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub version: u32,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    pub spec: Option<SynthSpec>,
    pub cases: Vec<ManifestEntry>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Largest-remainder apportionment of `n` over `ratios`; ties go to the earlier split.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> Result<[usize; 3]> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(x >= 0.0)) || ((r[0] + r[1] + r[2]) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must sum to 1")));
    }
    let quotas: [f64; 3] = std::array::from_fn(|i| n as f64 * r[i]);
    let mut counts: [usize; 3] = std::array::from_fn(|i| (quotas[i] + 1e-9).floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok(counts)
}

pub fn build_manifest(n_cases: usize, ratios: (f64, f64, f64), seed: u64) -> Result<CaseManifest> {
    if n_cases < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 cases, got {n_cases}")));
    }
    let counts = split_counts(n_cases, ratios)?;
    let mut ids: Vec<usize> = (0..n_cases).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; n_cases];
    for (rank, &id) in ids.iter().enumerate() {
        splits[id] = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    let cases = (0..n_cases)
        .map(|i| ManifestEntry {
            id: format!("case_{i:04}"),
            case_seed: i as u64,
            split: splits[i],
            image: None,
            label: None,
        })
        .collect();
    Ok(CaseManifest {
        version: MANIFEST_VERSION,
        seed,
        ratios,
        spec: None,
        cases,
    })
}

impl CaseManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        [Split::Train, Split::Val, Split::Test].map(|s| self.split(s).len())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    /// Load from the stored VGRID pair if present, else regenerate from the embedded spec.
    pub fn load_case(&self, entry: &ManifestEntry, base_dir: &Path) -> Result<Case> {
        match (&entry.image, &entry.label) {
            (Some(img), Some(seg)) => Ok(Case {
                image: read_grid(base_dir.join(img))?.into_volume()?,
                label: read_grid(base_dir.join(seg))?.into_mask()?,
            }),
            _ => {
                let spec = self
                    .spec
                    .as_ref()
                    .ok_or_else(|| Error::Format(format!("case {} has no files and no spec", entry.id)))?;
                generate_case(spec, entry.case_seed)
            }
        }
    }
}

/// Generate `n` cases into `out`, writing `<id>_img.vgrid`, `<id>_seg.vgrid` and `manifest.json`.
pub fn write_dataset(spec: &SynthSpec, n: usize, out: &Path, seed: u64) -> Result<CaseManifest> {
    fs::create_dir_all(out)?;
    let mut manifest = build_manifest(n, (0.7, 0.1, 0.2), seed)?;
    manifest.spec = Some(spec.clone());
    for entry in &mut manifest.cases {
        let case = generate_case(spec, entry.case_seed)?;
        let img = PathBuf::from(format!("{}_img.vgrid", entry.id));
        let seg = PathBuf::from(format!("{}_seg.vgrid", entry.id));
        write_grid(&AnyGrid::Volume(case.image), out.join(&img))?;
        write_grid(&AnyGrid::Mask(case.label), out.join(&seg))?;
        entry.image = Some(img);
        entry.label = Some(seg);
    }
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn components_26(mask: &BinaryMask) -> usize {
        let shape = mask.shape();
        let mut seen = vec![false; shape.len()];
        let mut count = 0;
        for start in mask.indices() {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let c = shape.coord(i);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let n = [c[0] as i64 + dz, c[1] as i64 + dy, c[2] as i64 + dx];
                            if let Some(j) = shape.checked_index(n) {
                                if mask.data()[j] && !seen[j] {
                                    seen[j] = true;
                                    stack.push(j);
                                }
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn noiseless_sharp_case_is_exact_indicator() {
        let spec = SynthSpec {
            boundary_blur_sigma: 0.0,
            noise_sigma: 0.0,
            contrast: 1.0,
            background_max: 0.0,
            ..SynthSpec::default()
        };
        let case = generate_case(&spec, 3).unwrap();
        for (&v, &m) in case.image.data().iter().zip(case.label.data()) {
            assert_eq!(v, if m { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = generate_case(&spec, 11).unwrap();
        let b = generate_case(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_case(&spec, 12).unwrap();
        assert_ne!(a.label, c.label);
    }

    #[test]
    fn three_lesions_give_at_most_three_components() {
        let spec = SynthSpec {
            lesion_count_range: (3, 3),
            radius_range: (2.0, 3.0),
            ..SynthSpec::default()
        };
        for seed in 0..10 {
            let case = generate_case(&spec, seed).unwrap();
            let n = components_26(&case.label);
            assert!((1..=3).contains(&n), "seed {seed}: {n} components");
        }
    }

    #[test]
    fn masks_are_nonempty_and_off_the_border() {
        let spec = SynthSpec::default();
        for seed in 0..20 {
            let case = generate_case(&spec, seed).unwrap();
            assert!(case.label.any());
            assert!(case.label.inside_margin(1), "seed {seed}");
        }
    }

    #[test]
    fn oversized_lesions_are_rejected() {
        let spec = SynthSpec {
            grid_size: [12, 32, 32],
            radius_range: (4.0, 6.0),
            ..SynthSpec::default()
        };
        assert!(generate_case(&spec, 0).is_err());
    }

    #[test]
    fn intensity_departures_lie_near_the_mask() {
        // With a flat background, any voxel departing from it by more than
        // 3 noise sigmas must sit within the blur support of the mask.
        let spec = SynthSpec {
            background_max: 0.0,
            grid_size: [26; 3],
            radius_range: (3.0, 6.0),
            ..SynthSpec::default()
        };
        let support = (3.0 * spec.boundary_blur_sigma).ceil() as usize;
        let mut violations = 0usize;
        let mut checked = 0usize;
        for seed in 0..4 {
            let case = generate_case(&spec, seed).unwrap();
            let grown = crate::volume::dilate26(&case.label, support);
            for (i, &v) in case.image.data().iter().enumerate() {
                checked += 1;
                if (v as f64).abs() > 3.0 * spec.noise_sigma && !grown.data()[i] {
                    violations += 1;
                }
            }
        }
        assert!((violations as f64) < 0.01 * checked as f64, "{violations}/{checked}");
    }

    #[test]
    fn ten_cases_split_seven_one_two() {
        let m = build_manifest(10, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!(m.counts(), [7, 1, 2]);
    }

    #[test]
    fn colon_scale_split_matches_enumeration_oracle() {
        let n = 126usize;
        let ratios = [0.7, 0.1, 0.2];
        // Oracle: among all triples summing to n, the one with minimal squared
        // deviation from the exact quotas.
        let mut best = (f64::INFINITY, [0usize; 3]);
        for a in 0..=n {
            for b in 0..=(n - a) {
                let c = n - a - b;
                let dev: f64 = [a, b, c]
                    .iter()
                    .zip(ratios)
                    .map(|(&k, r)| (k as f64 - n as f64 * r).powi(2))
                    .sum();
                if dev < best.0 - 1e-12 {
                    best = (dev, [a, b, c]);
                }
            }
        }
        assert_eq!(best.1, [88, 13, 25]);
        assert_eq!(build_manifest(n, (0.7, 0.1, 0.2), 5).unwrap().counts(), best.1);
    }

    #[test]
    fn manifest_is_deterministic_and_partitions() {
        let a = build_manifest(40, (0.7, 0.1, 0.2), 9).unwrap();
        let b = build_manifest(40, (0.7, 0.1, 0.2), 9).unwrap();
        assert_eq!(a, b);
        let ids: HashSet<_> = a.cases.iter().map(|c| c.id.clone()).collect();
        assert_eq!(ids.len(), 40);
        assert_eq!(a.counts().iter().sum::<usize>(), 40);
        assert!(build_manifest(40, (0.7, 0.2, 0.2), 9).is_err());
        assert!(build_manifest(9, (0.7, 0.1, 0.2), 9).is_err());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            grid_size: [24; 3],
            radius_range: (3.0, 5.0),
            ..SynthSpec::default()
        };
        let m = write_dataset(&spec, 10, dir.path(), 3).unwrap();
        let loaded = CaseManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
        let entry = &loaded.cases[4];
        let case = loaded.load_case(entry, dir.path()).unwrap();
        assert_eq!(case, generate_case(&spec, entry.case_seed).unwrap());
    }
}
