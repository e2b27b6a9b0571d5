//! Rotary position encoding on interleaved pairs `(2i, 2i+1)` of each head.

use crate::tensor::Scalar;

/// cos/sin table for positions `0..len`, `head_dim / 2` frequencies each.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, base: f64, len: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for i in 0..half {
                let angle = pos as f64 * frequency(i, head_dim, base);
                cos.push(T::from_f64_lossy(angle.cos()));
                sin.push(T::from_f64_lossy(angle.sin()));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates every head of a row laid out as `[head0 | head1 | ...]`.
    pub fn rotate_row(&self, row: &mut [T], pos: usize) {
        self.apply(row, pos, false);
    }

    /// Transpose of [`rotate_row`](Self::rotate_row); used for gradients.
    pub fn unrotate_row(&self, row: &mut [T], pos: usize) {
        self.apply(row, pos, true);
    }

    fn apply(&self, row: &mut [T], pos: usize, inverse: bool) {
        let cos = &self.cos[pos * self.half..(pos + 1) * self.half];
        let sin = &self.sin[pos * self.half..(pos + 1) * self.half];
        for head in row.chunks_exact_mut(2 * self.half) {
            for i in 0..self.half {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}

pub fn frequency(pair: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-2.0 * pair as f64 / head_dim as f64)
}
