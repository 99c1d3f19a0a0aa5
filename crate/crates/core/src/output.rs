//! Dense detector predictions, one grid per pyramid level.

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;

/// Predictions of one pyramid level, stored channel-major exactly as the
/// heads emit them:
///
/// * `probs`: `[A * K, H, W]` where channel `a * K + k` is the probability of
///   class `k` (0 = background) for anchor shape `a`;
/// * `deltas`: `[A * 4, H, W]` where channel `a * 4 + j` is component `j` of
///   the box delta `(px, py, pw, ph)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub anchors: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
    pub deltas: Vec<f64>,
}

impl LevelOutput {
    pub fn zeros(stride: usize, height: usize, width: usize, anchors: usize, classes: usize) -> Self {
        Self {
            stride,
            height,
            width,
            anchors,
            classes,
            probs: vec![0.0; anchors * classes * height * width],
            deltas: vec![0.0; anchors * 4 * height * width],
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Number of anchor positions (`cells * A`).
    pub fn len(&self) -> usize {
        self.cells() * self.anchors
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn prob_index(&self, a: usize, k: usize, y: usize, x: usize) -> usize {
        ((a * self.classes + k) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn delta_index(&self, a: usize, j: usize, y: usize, x: usize) -> usize {
        ((a * 4 + j) * self.height + y) * self.width + x
    }

    pub fn class_dist(&self, a: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.classes)
            .map(|k| self.probs[self.prob_index(a, k, y, x)])
            .collect()
    }

    pub fn box_delta(&self, a: usize, y: usize, x: usize) -> BoxDelta {
        let d = |j| self.deltas[self.delta_index(a, j, y, x)];
        BoxDelta::new(d(0), d(1), d(2), d(3))
    }

    /// Decomposes a within-level anchor index (ordered `y`, `x`, `a`) into
    /// `(a, y, x)`.
    pub fn unravel(&self, index: usize) -> (usize, usize, usize) {
        let a = index % self.anchors;
        let cell = index / self.anchors;
        (a, cell / self.width, cell % self.width)
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.anchors == other.anchors
            && self.classes == other.classes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    /// Coarse-to-fine.
    pub levels: Vec<LevelOutput>,
}

impl DetectorOutput {
    /// Total anchor positions over all levels.
    pub fn num_positions(&self) -> usize {
        self.levels.iter().map(LevelOutput::len).sum()
    }

    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.levels.len() != other.levels.len()
            || self
                .levels
                .iter()
                .zip(&other.levels)
                .any(|(a, b)| !a.same_layout(b))
        {
            return Err(Error::shape("detector outputs have different grid layouts"));
        }
        Ok(())
    }

    /// A zero-filled output with the same layout, used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| LevelOutput::zeros(l.stride, l.height, l.width, l.anchors, l.classes))
                .collect(),
        }
    }

    /// Iterates `(level, a, y, x)` in global anchor order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        self.levels.iter().enumerate().flat_map(|(li, l)| {
            (0..l.len()).map(move |i| {
                let (a, y, x) = l.unravel(i);
                (li, a, y, x)
            })
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.probs.iter_mut().zip(&b.probs).for_each(|(x, y)| *x += y);
            a.deltas.iter_mut().zip(&b.deltas).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.levels {
            l.probs.iter_mut().for_each(|v| *v *= factor);
            l.deltas.iter_mut().for_each(|v| *v *= factor);
        }
    }
}
