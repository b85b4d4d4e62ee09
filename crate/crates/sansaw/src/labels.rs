//! Dense per-pixel category labels.

use crate::error::{Error, Result};

/// `(N, H, W)` map of category ids. Ids are small integers; after remapping
/// for the alignment modules, id `C` plays the role of "other".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if n * h * w != data.len() || n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape {
                dims: vec![n, h, w],
                reason: format!("label buffer has {} entries", data.len()),
            });
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        LabelMap {
            n,
            h,
            w,
            data: vec![0; n * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// H*W slice for sample `n`.
    pub fn sample(&self, n: usize) -> &[u8] {
        &self.data[n * self.h * self.w..(n + 1) * self.h * self.w]
    }

    #[inline]
    pub fn get(&self, n: usize, h: usize, w: usize) -> u8 {
        self.data[(n * self.h + h) * self.w + w]
    }

    pub fn max_id(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Remap ids `>= c` to the "other" id `c`, producing labels over `c + 1`
    /// classes for the alignment modules.
    pub fn remap_other(&self, c: usize) -> LabelMap {
        let cap = c as u8;
        LabelMap {
            n: self.n,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .map(|&v| if v >= cap { cap } else { v })
                .collect(),
        }
    }

    /// Stack single-sample maps into one batch map.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let (n0, h, w) = maps
            .first()
            .map(|m| m.dims())
            .ok_or_else(|| Error::ShapeMismatch("empty label stack".into()))?;
        if n0 != 1 {
            return Err(Error::ShapeMismatch("stack expects single-sample maps".into()));
        }
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.dims() != (1, h, w) {
                return Err(Error::ShapeMismatch("label stack shape mismatch".into()));
            }
            data.extend_from_slice(&m.data);
        }
        LabelMap::new(maps.len(), h, w, data)
    }
}
