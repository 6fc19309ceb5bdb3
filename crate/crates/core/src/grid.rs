//! Row-major rasters with a per-pixel validity mask.
//!
//! Every map in the crate (images, depth, normals, albedo, gradients) is a
//! [`PixelGrid`]. Invalid pixels hold `T::default()` and are skipped by all
//! operations; combining two grids intersects their masks.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
    mask: Vec<bool>,
}

impl<T> PixelGrid<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

impl<T: Copy + Default> PixelGrid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>, mask: Vec<bool>) -> Result<Self> {
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Error::Domain("grid dimensions overflow".into()))?;
        if data.len() != n || mask.len() != n {
            return Err(Error::Domain(format!(
                "grid {width}x{height} needs {n} values, got data {} mask {}",
                data.len(),
                mask.len()
            )));
        }
        let mut grid = Self {
            width,
            height,
            data,
            mask,
        };
        grid.scrub();
        Ok(grid)
    }

    /// All pixels valid.
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(width, height, data, vec![true; n])
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            mask: vec![true; width * height],
        }
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::default(); width * height],
            mask: vec![false; width * height],
        }
    }

    /// Builds a grid from a per-pixel closure; `None` marks the pixel invalid.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Option<T>) -> Self {
        let mut data = Vec::with_capacity(width * height);
        let mut mask = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match f(x, y) {
                    Some(v) => {
                        data.push(v);
                        mask.push(true);
                    }
                    None => {
                        data.push(T::default());
                        mask.push(false);
                    }
                }
            }
        }
        Self {
            width,
            height,
            data,
            mask,
        }
    }

    fn scrub(&mut self) {
        for (v, &m) in self.data.iter_mut().zip(&self.mask) {
            if !m {
                *v = T::default();
            }
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn get(&self, x: usize, y: usize) -> Option<T> {
        if x >= self.width || y >= self.height {
            return None;
        }
        let i = self.index(x, y);
        self.mask[i].then(|| self.data[i])
    }

    pub fn at(&self, i: usize) -> Option<T> {
        self.mask[i].then(|| self.data[i])
    }

    /// Raw value, regardless of validity.
    pub fn value(&self, i: usize) -> T {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, value: T) {
        self.data[i] = value;
        self.mask[i] = true;
    }

    pub fn invalidate(&mut self, i: usize) {
        self.data[i] = T::default();
        self.mask[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
    }

    pub fn ensure_same_dims<U>(&self, other: &PixelGrid<U>) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                found: other.dims(),
            });
        }
        Ok(())
    }

    pub fn map<U: Copy + Default>(&self, mut f: impl FnMut(T) -> U) -> PixelGrid<U> {
        let data = self
            .data
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { f(v) } else { U::default() })
            .collect();
        PixelGrid {
            width: self.width,
            height: self.height,
            data,
            mask: self.mask.clone(),
        }
    }

    /// Like [`map`](Self::map) but the closure may invalidate pixels.
    pub fn filter_map<U: Copy + Default>(&self, mut f: impl FnMut(T) -> Option<U>) -> PixelGrid<U> {
        let mut out = PixelGrid::invalid(self.width, self.height);
        for i in 0..self.data.len() {
            if self.mask[i] {
                if let Some(v) = f(self.data[i]) {
                    out.set(i, v);
                }
            }
        }
        out
    }

    /// Pixelwise combination over the intersection of both masks.
    pub fn zip_with<U: Copy + Default, V: Copy + Default>(
        &self,
        other: &PixelGrid<U>,
        mut f: impl FnMut(T, U) -> V,
    ) -> Result<PixelGrid<V>> {
        self.ensure_same_dims(other)?;
        let mut mask = Vec::with_capacity(self.data.len());
        let data = (0..self.data.len())
            .map(|i| {
                let ok = self.mask[i] && other.mask[i];
                mask.push(ok);
                if ok {
                    f(self.data[i], other.data[i])
                } else {
                    V::default()
                }
            })
            .collect();
        Ok(PixelGrid {
            width: self.width,
            height: self.height,
            data,
            mask,
        })
    }

    /// Copy of `self` with its mask intersected with `mask`.
    pub fn restrict(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.mask.len() {
            return Err(Error::Domain("mask length differs from grid".into()));
        }
        let m: Vec<bool> = self.mask.iter().zip(mask).map(|(&a, &b)| a && b).collect();
        Self::new(self.width, self.height, self.data.clone(), m)
    }
}

/// Intersection of any number of masks of equal length.
pub fn intersect_masks(masks: &[&[bool]]) -> Vec<bool> {
    let n = masks.first().map_or(0, |m| m.len());
    (0..n).map(|i| masks.iter().all(|m| m[i])).collect()
}
