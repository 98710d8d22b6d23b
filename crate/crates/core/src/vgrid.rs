//! VGRID: a minimal portable grid container.
//!
//! Layout: the ASCII magic `VGRID1`, one space, a single-line JSON header,
//! `\n`, then the raw little-endian payload in z-major order. `f32` grids
//! hold volumes and logit maps, `u8` grids hold binary masks (0/1).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Grid, LogitMap, Shape3, Volume};

pub const MAGIC: &[u8; 6] = b"VGRID1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Volume,
    Mask,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: Dtype,
    pub kind: GridKind,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyGrid {
    Volume(Volume),
    Mask(BinaryMask),
    Logits(LogitMap),
}

impl AnyGrid {
    pub fn kind(&self) -> GridKind {
        match self {
            AnyGrid::Volume(_) => GridKind::Volume,
            AnyGrid::Mask(_) => GridKind::Mask,
            AnyGrid::Logits(_) => GridKind::Logits,
        }
    }

    pub fn into_volume(self) -> Result<Volume> {
        match self {
            AnyGrid::Volume(v) | AnyGrid::Logits(v) => Ok(v),
            AnyGrid::Mask(_) => Err(Error::Format("expected an f32 grid, found a mask".into())),
        }
    }

    pub fn into_mask(self) -> Result<BinaryMask> {
        match self {
            AnyGrid::Mask(m) => Ok(m),
            other => Err(Error::Format(format!("expected a mask, found {:?}", other.kind()))),
        }
    }
}

pub fn encode(grid: &AnyGrid) -> Vec<u8> {
    let (kind, dtype, shape, spacing) = match grid {
        AnyGrid::Volume(g) => (GridKind::Volume, Dtype::F32, g.shape(), g.spacing()),
        AnyGrid::Logits(g) => (GridKind::Logits, Dtype::F32, g.shape(), g.spacing()),
        AnyGrid::Mask(g) => (GridKind::Mask, Dtype::U8, g.shape(), g.spacing()),
    };
    let header = Header {
        dtype,
        kind,
        shape: shape.0,
        spacing,
    };
    let mut out = Vec::with_capacity(64 + shape.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(b' ');
    // Header serialization cannot fail: plain numbers and enums.
    out.extend_from_slice(serde_json::to_string(&header).expect("header").as_bytes());
    out.push(b'\n');
    match grid {
        AnyGrid::Volume(g) | AnyGrid::Logits(g) => {
            for v in g.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        AnyGrid::Mask(g) => out.extend(g.data().iter().map(|&b| b as u8)),
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<AnyGrid> {
    if bytes.len() < MAGIC.len() + 1 || &bytes[..MAGIC.len()] != MAGIC || bytes[MAGIC.len()] != b' ' {
        return Err(Error::Format("missing VGRID1 magic".into()));
    }
    let rest = &bytes[MAGIC.len() + 1..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("header line is not terminated".into()))?;
    let header: Header = serde_json::from_slice(&rest[..newline])
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    let shape = Shape3(header.shape);
    if !shape.is_valid() {
        return Err(Error::Format(format!("header shape {shape} has a zero extent")));
    }
    let payload = &rest[newline + 1..];
    let width = match header.dtype {
        Dtype::F32 => 4,
        Dtype::U8 => 1,
    };
    let expected = shape.len() * width;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() != expected {
        return Err(Error::PayloadMismatch {
            declared: shape.len(),
            found: payload.len() / width,
        });
    }
    let grid = match (header.kind, header.dtype) {
        (GridKind::Volume | GridKind::Logits, Dtype::F32) => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let g = Grid::from_vec(shape, data)?.with_spacing(header.spacing)?;
            if header.kind == GridKind::Volume {
                AnyGrid::Volume(g)
            } else {
                AnyGrid::Logits(g)
            }
        }
        (GridKind::Mask, Dtype::U8) => {
            let data = payload
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    v => Err(Error::Format(format!("mask byte {v} is not 0/1"))),
                })
                .collect::<Result<Vec<_>>>()?;
            AnyGrid::Mask(Grid::from_vec(shape, data)?.with_spacing(header.spacing)?)
        }
        (kind, dtype) => {
            return Err(Error::Format(format!("kind {kind:?} cannot use dtype {dtype:?}")));
        }
    };
    Ok(grid)
}

pub fn write_grid(grid: &AnyGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(grid))?;
    Ok(())
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<AnyGrid> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn truncated_payload_is_reported() {
        let g = AnyGrid::Volume(Volume::zeros(Shape3::cube(2)));
        let mut bytes = encode(&g);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode(&bytes), Err(Error::Truncated { expected: 32, found: 28 })));
    }

    #[test]
    fn excess_payload_is_a_mismatch() {
        let g = AnyGrid::Mask(BinaryMask::empty(Shape3::cube(2)));
        let mut bytes = encode(&g);
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(Error::PayloadMismatch { declared: 8, found: 9 })));
    }

    #[test]
    fn missing_magic_is_a_format_error() {
        let g = AnyGrid::Volume(Volume::zeros(Shape3::cube(2)));
        let bytes = encode(&g);
        assert!(matches!(decode(&bytes[1..]), Err(Error::Format(_))));
        assert!(matches!(decode(b""), Err(Error::Format(_))));
    }

    #[test]
    fn malformed_header_is_a_format_error() {
        let bytes = b"VGRID1 {\"dtype\":\"f64\"}\n".to_vec();
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn header_is_one_json_line() {
        let g = AnyGrid::Mask(BinaryMask::empty(Shape3::new(1, 2, 3)));
        let bytes = encode(&g);
        let line_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        let line = std::str::from_utf8(&bytes[..line_end]).unwrap();
        assert_eq!(
            line,
            r#"VGRID1 {"dtype":"u8","kind":"mask","shape":[1,2,3],"spacing":[1.0,1.0,1.0]}"#
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vgrid");
        let g = AnyGrid::Logits(
            LogitMap::from_fn(Shape3::new(2, 3, 4), |[z, y, x]| (z * 12 + y * 4 + x) as f32 - 7.5)
                .with_spacing([2.0, 1.0, 0.5])
                .unwrap(),
        );
        write_grid(&g, &path).unwrap();
        assert_eq!(read_grid(&path).unwrap(), g);
    }

    fn shape_strategy() -> impl Strategy<Value = Shape3> {
        (1usize..5, 1usize..5, 1usize..5).prop_map(|(z, y, x)| Shape3::new(z, y, x))
    }

    proptest! {
        #[test]
        fn f32_grids_round_trip_bit_exact(shape in shape_strategy(), seed in any::<u64>(), logits in any::<bool>()) {
            let mut state = seed;
            let g = Volume::from_fn(shape, |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((state >> 32) as u32 & 0x7f7f_ffff) * if state & 1 == 0 { 1.0 } else { -1.0 }
            });
            let g = if logits { AnyGrid::Logits(g) } else { AnyGrid::Volume(g) };
            let back = decode(&encode(&g)).unwrap();
            let (a, b) = match (&g, &back) {
                (AnyGrid::Volume(a), AnyGrid::Volume(b)) | (AnyGrid::Logits(a), AnyGrid::Logits(b)) => (a, b),
                _ => panic!("kind changed"),
            };
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn masks_round_trip(shape in shape_strategy(), bits in proptest::collection::vec(any::<bool>(), 64)) {
            let g = AnyGrid::Mask(BinaryMask::from_fn(shape, |c| bits[shape.index(c) % 64]));
            prop_assert_eq!(decode(&encode(&g)).unwrap(), g);
        }
    }
}
