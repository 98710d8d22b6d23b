//! Dense 3D grids in z/y/x order.
//!
//! [`Grid`] is the single storage type; [`Volume`], [`BinaryMask`] and
//! [`LogitMap`] are the three element kinds used across the crate. Data is
//! stored z-major (x varies fastest).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};

/// Grid extent as (depth, height, width) = (z, y, x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3(pub [usize; 3]);

impl Shape3 {
    pub const fn new(z: usize, y: usize, x: usize) -> Self {
        Self([z, y, x])
    }

    pub const fn cube(n: usize) -> Self {
        Self([n, n, n])
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&n| n > 0)
    }

    #[inline]
    pub fn index(&self, [z, y, x]: [usize; 3]) -> usize {
        (z * self.0[1] + y) * self.0[2] + x
    }

    #[inline]
    pub fn coord(&self, index: usize) -> [usize; 3] {
        let x = index % self.0[2];
        let rest = index / self.0[2];
        [rest / self.0[1], rest % self.0[1], x]
    }

    #[inline]
    pub fn contains(&self, c: [i64; 3]) -> bool {
        c.iter().zip(self.0.iter()).all(|(&v, &n)| v >= 0 && (v as usize) < n)
    }

    /// Index of a signed coordinate, or `None` if it falls outside.
    #[inline]
    pub fn checked_index(&self, c: [i64; 3]) -> Option<usize> {
        self.contains(c)
            .then(|| self.index([c[0] as usize, c[1] as usize, c[2] as usize]))
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Face (6-connected) neighbour offsets.
pub const FACE_OFFSETS: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// A 3D scalar grid with physical spacing (mm per voxel along z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    shape: Shape3,
    spacing: [f64; 3],
    data: Vec<T>,
}

pub type Volume = Grid<f32>;
pub type BinaryMask = Grid<bool>;
/// Unbounded per-voxel logits; thresholding at 0 yields a [`BinaryMask`].
pub type LogitMap = Grid<f32>;

impl<T: Clone> Grid<T> {
    pub fn filled(shape: Shape3, value: T) -> Self {
        Self {
            shape,
            spacing: [1.0; 3],
            data: vec![value; shape.len()],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::InvalidArgument(format!("shape {shape} has a zero extent")));
        }
        if data.len() != shape.len() {
            return Err(Error::PayloadMismatch {
                declared: shape.len(),
                found: data.len(),
            });
        }
        Ok(Self {
            shape,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let data = (0..shape.len()).map(|i| f(shape.coord(i))).collect();
        Self {
            shape,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?} must be positive")));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: [usize; 3]) -> &T {
        &self.data[self.shape.index(c)]
    }

    #[inline]
    pub fn set(&mut self, c: [usize; 3], value: T) {
        let i = self.shape.index(c);
        self.data[i] = value;
    }

    /// Same shape and spacing, new payload.
    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn zip_map<U, V>(&self, other: &Grid<U>, mut f: impl FnMut(&T, &U) -> V) -> Result<Grid<V>> {
        ensure_same_shape(self.shape, other.shape)?;
        Ok(Grid {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(a, b)).collect(),
        })
    }
}

impl Grid<f32> {
    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Voxels with logit strictly above zero (probability > 0.5).
    pub fn threshold(&self) -> BinaryMask {
        self.map(|&v| v > 0.0)
    }
}

impl Grid<bool> {
    pub fn empty(shape: Shape3) -> Self {
        Self::filled(shape, false)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Flat indices of set voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn coords(&self) -> Vec<[usize; 3]> {
        self.indices().into_iter().map(|i| self.shape.coord(i)).collect()
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |&a, &b| a && b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |&a, &b| a || b)
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |&a, &b| a && !b)
    }

    pub fn not(&self) -> Self {
        self.map(|&b| !b)
    }

    /// 1.0 / 0.0 view, used as network input and in losses.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// True if every set voxel is at least `margin` voxels from every face.
    pub fn inside_margin(&self, margin: usize) -> bool {
        let s = self.shape.0;
        self.coords().iter().all(|c| {
            (0..3).all(|a| c[a] >= margin && c[a] + margin < s[a])
        })
    }
}

/// Binary dilation with a 26-connected (3x3x3) structuring element, `steps` times.
pub fn dilate26(mask: &BinaryMask, steps: usize) -> BinaryMask {
    let mut cur = mask.clone();
    let shape = mask.shape();
    for _ in 0..steps {
        let mut next = cur.clone();
        for i in cur.indices() {
            let c = shape.coord(i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let n = [c[0] as i64 + dz, c[1] as i64 + dy, c[2] as i64 + dx];
                        if let Some(j) = shape.checked_index(n) {
                            next.data_mut()[j] = true;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}
