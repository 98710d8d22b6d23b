//! Slice-wise Zhang–Suen thinning.

use std::sync::OnceLock;

use crate::volume::BinaryMask;

// Neighbour bit order: P2 (north) = bit 0, then clockwise P3..P9 = bits 1..7.
const NEIGHBOURS: [(i64, i64); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

/// Deletion tables for the two sub-iterations, indexed by the 8-neighbour bit pattern.
fn tables() -> &'static [[bool; 256]; 2] {
    static TABLES: OnceLock<[[bool; 256]; 2]> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut t = [[false; 256]; 2];
        for pattern in 0..256usize {
            let bit = |k: usize| (pattern >> k) & 1 == 1;
            let b = pattern.count_ones();
            let a = (0..8).filter(|&k| !bit(k) && bit((k + 1) % 8)).count();
            if !(2..=6).contains(&b) || a != 1 {
                continue;
            }
            // bits: 0=P2 1=P3 2=P4 3=P5 4=P6 5=P7 6=P8 7=P9
            let (p2, p4, p6, p8) = (bit(0), bit(2), bit(4), bit(6));
            t[0][pattern] = !(p2 && p4 && p6) && !(p4 && p6 && p8);
            t[1][pattern] = !(p2 && p4 && p8) && !(p2 && p6 && p8);
        }
        t
    })
}

/// Thin one 2D binary image (row-major `h x w`) in place until stable.
pub fn thin_slice(pixels: &mut [bool], h: usize, w: usize) {
    let tables = tables();
    let pattern_at = |px: &[bool], r: usize, c: usize| -> usize {
        let mut p = 0usize;
        for (k, &(dr, dc)) in NEIGHBOURS.iter().enumerate() {
            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w && px[rr as usize * w + cc as usize] {
                p |= 1 << k;
            }
        }
        p
    };
    loop {
        let mut changed = false;
        for table in tables {
            let doomed: Vec<usize> = (0..h * w)
                .filter(|&i| pixels[i] && table[pattern_at(pixels, i / w, i % w)])
                .collect();
            changed |= !doomed.is_empty();
            for i in doomed {
                pixels[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Per-axial-slice (constant z) Zhang–Suen skeleton, stacked back into 3D.
pub fn skeletonize(region: &BinaryMask) -> BinaryMask {
    let [d, h, w] = region.shape().0;
    let mut out = region.clone();
    for z in 0..d {
        let slice = &mut out.data_mut()[z * h * w..(z + 1) * h * w];
        if slice.iter().any(|&b| b) {
            thin_slice(slice, h, w);
        }
    }
    out
}
