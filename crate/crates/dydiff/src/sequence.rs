//! Contiguous sequences of equally-shaped state tensors.
//!
//! A [`StateSequence`] holds frames indexed by a contiguous signed range
//! `L..=R`; prediction windows use `-P..=0` for observations and `1..=S` for
//! targets, so indices are `i64`. Frames are stored flat, row-major.

use crate::error::{DyDiffError, Result};
use crate::{Real, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct StateSequence<F = Real> {
    start: i64,
    frame_shape: Vec<usize>,
    frame_len: usize,
    data: Vec<F>,
}

impl<F: Scalar> StateSequence<F> {
    /// Builds a sequence from flat data whose length is a nonzero multiple of
    /// the frame size.
    pub fn from_flat(start: i64, frame_shape: &[usize], data: Vec<F>) -> Result<Self> {
        let frame_len: usize = frame_shape.iter().product();
        if frame_len == 0 {
            return Err(DyDiffError::InvalidInput(format!(
                "frame shape {frame_shape:?} has zero elements"
            )));
        }
        if data.is_empty() {
            return Err(DyDiffError::EmptySequence);
        }
        if data.len() % frame_len != 0 {
            return Err(DyDiffError::ShapeMismatch {
                expected: frame_shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Self {
            start,
            frame_shape: frame_shape.to_vec(),
            frame_len,
            data,
        })
    }

    pub fn from_frames(start: i64, frame_shape: &[usize], frames: &[Vec<F>]) -> Result<Self> {
        let frame_len: usize = frame_shape.iter().product();
        let mut data = Vec::with_capacity(frames.len() * frame_len);
        for f in frames {
            if f.len() != frame_len {
                return Err(DyDiffError::ShapeMismatch {
                    expected: frame_shape.to_vec(),
                    got: vec![f.len()],
                });
            }
            data.extend_from_slice(f);
        }
        Self::from_flat(start, frame_shape, data)
    }

    /// A sequence of scalar frames, one element per frame.
    pub fn scalars(start: i64, values: &[F]) -> Result<Self> {
        Self::from_flat(start, &[1], values.to_vec())
    }

    pub fn zeros(start: i64, end: i64, frame_shape: &[usize]) -> Result<Self> {
        let frame_len: usize = frame_shape.iter().product();
        if end < start {
            return Err(DyDiffError::EmptySequence);
        }
        let n = (end - start + 1) as usize;
        Self::from_flat(start, frame_shape, vec![F::zero(); n * frame_len])
    }

    /// First frame index `L` (inclusive).
    pub fn start(&self) -> i64 {
        self.start
    }

    /// Last frame index `R` (inclusive).
    pub fn end(&self) -> i64 {
        self.start + self.num_frames() as i64 - 1
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.frame_len
    }

    pub fn frame_shape(&self) -> &[usize] {
        &self.frame_shape
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    fn offset(&self, s: i64) -> usize {
        assert!(
            s >= self.start && s <= self.end(),
            "frame index {s} outside {}..={}",
            self.start,
            self.end()
        );
        (s - self.start) as usize * self.frame_len
    }

    pub fn frame(&self, s: i64) -> &[F] {
        let o = self.offset(s);
        &self.data[o..o + self.frame_len]
    }

    pub fn frame_mut(&mut self, s: i64) -> &mut [F] {
        let o = self.offset(s);
        &mut self.data[o..o + self.frame_len]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[F]> {
        self.data.chunks_exact(self.frame_len)
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Copies the subrange `l..=r` into a new sequence.
    pub fn slice(&self, l: i64, r: i64) -> Result<Self> {
        if l < self.start || r > self.end() || r < l {
            return Err(DyDiffError::NonContiguous(format!(
                "slice {l}..={r} outside {}..={}",
                self.start,
                self.end()
            )));
        }
        let lo = self.offset(l);
        let hi = self.offset(r) + self.frame_len;
        Self::from_flat(l, &self.frame_shape, self.data[lo..hi].to_vec())
    }

    /// Appends `next` after `self`; `next` must start exactly at `end + 1`
    /// and share the frame shape.
    pub fn concat(&self, next: &Self) -> Result<Self> {
        if next.frame_shape != self.frame_shape {
            return Err(DyDiffError::ShapeMismatch {
                expected: self.frame_shape.clone(),
                got: next.frame_shape.clone(),
            });
        }
        if next.start != self.end() + 1 {
            return Err(DyDiffError::NonContiguous(format!(
                "cannot concat: left ends at {}, right starts at {}",
                self.end(),
                next.start
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&next.data);
        Self::from_flat(self.start, &self.frame_shape, data)
    }

    /// Returns a copy with the index range shifted so it starts at `start`.
    pub fn with_start(&self, start: i64) -> Self {
        let mut out = self.clone();
        out.start = start;
        out
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        out
    }

    /// Elementwise combination of two sequences over the same index range.
    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if other.frame_shape != self.frame_shape
            || other.start != self.start
            || other.data.len() != self.data.len()
        {
            return Err(DyDiffError::ShapeMismatch {
                expected: self.frame_shape.clone(),
                got: other.frame_shape.clone(),
            });
        }
        let mut out = self.clone();
        for (v, w) in out.data.iter_mut().zip(&other.data) {
            *v = f(*v, *w);
        }
        Ok(out)
    }

    /// `a * self + b * other`, elementwise.
    pub fn affine(&self, a: F, other: &Self, b: F) -> Result<Self> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn max_abs(&self) -> F {
        self.data
            .iter()
            .fold(F::zero(), |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
