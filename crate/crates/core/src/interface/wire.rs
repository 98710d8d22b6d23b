//! Request and response bodies of the session API, and the mask codec.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{BoxPrompt, PointPrompt, Scribble};
use crate::synth::SynthSpec;
use crate::volume::{BinaryMask, Shape3};

/// Every body carries `"version": WIRE_VERSION`; other values are rejected.
pub const WIRE_VERSION: u32 = 1;

/// Raw masks above this many voxels are sent run-length encoded when that is smaller.
pub const RLE_MIN_VOXELS: usize = 4096;

pub fn check_version(v: u32) -> Result<()> {
    if v == WIRE_VERSION {
        Ok(())
    } else {
        Err(Error::Format(format!("unsupported payload version {v} (expected {WIRE_VERSION})")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default)]
    pub spec: Option<SynthSpec>,
    pub case_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub version: u32,
    /// Base64 VGRID volume.
    #[serde(default)]
    pub volume: Option<String>,
    /// Base64 VGRID mask, optional ground truth for Dice reporting.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSource>,
    /// Checkpoint id (file stem in the checkpoint directory); the server default when absent.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub version: u32,
    pub id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub has_ground_truth: bool,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRequest {
    pub version: u32,
    #[serde(default)]
    pub points: Vec<PointPrompt>,
    #[serde(default, rename = "box")]
    pub bbox: Option<BoxPrompt>,
    #[serde(default)]
    pub scribbles: Vec<Scribble>,
}

impl PromptRequest {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.bbox.is_none() && self.scribbles.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub version: u32,
    /// The iteration just completed.
    pub iteration: usize,
    pub selected: usize,
    pub selected_score: f32,
    pub scores: Vec<f32>,
    pub dice: Option<f64>,
    pub mask: MaskPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub selected: usize,
    pub scores: Vec<f32>,
    pub dice: Option<f64>,
    pub foreground_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateResponse {
    pub version: u32,
    pub id: String,
    /// The next iteration to run (1 before any prompt).
    pub iteration: usize,
    pub shape: [usize; 3],
    #[serde(rename = "box")]
    pub bbox: Option<BoxPrompt>,
    pub history: Vec<HistoryEntry>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Image,
    Mask,
    /// 0 none, 1 positive, 2 negative (cumulative prompts).
    Prompts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub center: f32,
    pub width: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResponse {
    pub version: u32,
    pub axis: Axis,
    pub index: usize,
    pub layer: Layer,
    /// Rows × columns of the slice, row-major.
    pub height: usize,
    pub width: usize,
    /// `f32` little-endian for images, `u8` otherwise.
    pub dtype: String,
    pub data: String,
    pub window: Option<Window>,
}

/// Prompts and metrics of one completed iteration, as exported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub prompts: PromptRequest,
    pub result: HistoryEntry,
}

/// Everything needed to replay a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionLog {
    pub version: u32,
    pub id: String,
    pub checkpoint: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default)]
    pub synthetic: Option<SyntheticSource>,
    pub entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportResponse {
    pub version: u32,
    pub log: SessionLog,
    /// Base64 VGRID of the final mask; absent before the first iteration.
    pub mask_vgrid: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskEncoding {
    /// One byte (0/1) per voxel.
    Raw,
    /// Little-endian u32 run lengths, alternating background/foreground, starting with background.
    Rle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPayload {
    pub encoding: MaskEncoding,
    pub shape: [usize; 3],
    pub data: String,
}

pub fn rle_runs(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut n = 0u32;
    for &b in bits {
        if b == cur {
            n += 1;
        } else {
            runs.push(n);
            cur = b;
            n = 1;
        }
    }
    runs.push(n);
    runs
}

impl MaskPayload {
    pub fn encode_as(mask: &BinaryMask, encoding: MaskEncoding) -> Self {
        let bytes: Vec<u8> = match encoding {
            MaskEncoding::Raw => mask.data().iter().map(|&b| b as u8).collect(),
            MaskEncoding::Rle => rle_runs(mask.data()).iter().flat_map(|r| r.to_le_bytes()).collect(),
        };
        Self { encoding, shape: mask.shape().0, data: B64.encode(bytes) }
    }

    /// Raw for small masks; otherwise whichever form is shorter.
    pub fn encode(mask: &BinaryMask) -> Self {
        if mask.len() < RLE_MIN_VOXELS {
            return Self::encode_as(mask, MaskEncoding::Raw);
        }
        let runs = rle_runs(mask.data()).len() * 4;
        let enc = if runs < mask.len() { MaskEncoding::Rle } else { MaskEncoding::Raw };
        Self::encode_as(mask, enc)
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let shape = Shape3(self.shape);
        let bytes = B64.decode(&self.data).map_err(|e| Error::Format(format!("bad base64 mask: {e}")))?;
        let data: Vec<bool> = match self.encoding {
            MaskEncoding::Raw => {
                if bytes.iter().any(|&b| b > 1) {
                    return Err(Error::Format("raw mask bytes must be 0 or 1".into()));
                }
                bytes.iter().map(|&b| b == 1).collect()
            }
            MaskEncoding::Rle => {
                if bytes.len() % 4 != 0 {
                    return Err(Error::Format("run-length payload is not a whole number of u32".into()));
                }
                let mut out = Vec::with_capacity(shape.len());
                for (k, c) in bytes.chunks_exact(4).enumerate() {
                    let n = u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize;
                    if out.len() + n > shape.len() {
                        return Err(Error::Format("runs exceed the mask size".into()));
                    }
                    out.extend(std::iter::repeat_n(k % 2 == 1, n));
                }
                out
            }
        };
        BinaryMask::from_vec(shape, data)
    }
}

pub fn b64_encode(bytes: &[u8]) -> String {
    B64.encode(bytes)
}

pub fn b64_decode(s: &str) -> Result<Vec<u8>> {
    B64.decode(s).map_err(|e| Error::Format(format!("bad base64: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn both_mask_forms_round_trip(bits in proptest::collection::vec(any::<bool>(), 27)) {
            let m = BinaryMask::from_vec(Shape3::cube(3), bits).unwrap();
            for e in [MaskEncoding::Raw, MaskEncoding::Rle] {
                prop_assert_eq!(MaskPayload::encode_as(&m, e).decode().unwrap(), m.clone());
            }
        }
    }

    #[test]
    fn size_heuristic() {
        let small = BinaryMask::empty(Shape3::cube(4));
        assert_eq!(MaskPayload::encode(&small).encoding, MaskEncoding::Raw);
        let big = BinaryMask::from_fn(Shape3::cube(32), |c| c[0] < 10);
        let p = MaskPayload::encode(&big);
        assert_eq!(p.encoding, MaskEncoding::Rle);
        assert_eq!(p.decode().unwrap(), big);
        let noisy = BinaryMask::from_fn(Shape3::cube(32), |c| (c[0] + c[1] + c[2]) % 2 == 0);
        assert_eq!(MaskPayload::encode(&noisy).encoding, MaskEncoding::Raw);
    }

    #[test]
    fn rejects_bad_payloads() {
        let p = MaskPayload { encoding: MaskEncoding::Rle, shape: [2, 2, 2], data: b64_encode(&9u32.to_le_bytes()) };
        assert!(p.decode().is_err());
        let p = MaskPayload { encoding: MaskEncoding::Raw, shape: [1, 1, 2], data: b64_encode(&[0, 2]) };
        assert!(p.decode().is_err());
        assert!(check_version(2).is_err());
        let req = r#"{"version":1,"points":[],"extra":1}"#;
        assert!(serde_json::from_str::<PromptRequest>(req).is_err());
    }

    #[test]
    fn prompt_json_shape() {
        let req: PromptRequest = serde_json::from_str(
            r#"{"version":1,"points":[{"coord":[1,2,3],"label":"positive"}],"box":{"min":[0,0,0],"max":[4,4,4]}}"#,
        )
        .unwrap();
        assert_eq!(req.points[0].coord, [1, 2, 3]);
        assert!(req.bbox.is_some());
    }
}
