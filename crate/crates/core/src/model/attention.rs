//! Grouped-query scaled dot-product attention with causal and optional
//! document-boundary masking.
//!
//! Query head `h` reads key/value head `h / group_size`. With
//! `n_kv_heads == n_heads` this is ordinary multi-head attention, with
//! `n_kv_heads == 1` it is multi-query attention.

use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Matrix, Scalar};

/// Causal masking is always on. `doc_boundaries` lists indices where a new
/// document starts; positions never attend across a boundary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttentionMask {
    pub doc_boundaries: Vec<usize>,
}

impl AttentionMask {
    pub fn causal() -> Self {
        Self::default()
    }

    pub fn with_documents(starts: impl Into<Vec<usize>>) -> Self {
        Self {
            doc_boundaries: starts.into(),
        }
    }

    /// For every position, the first index it may attend to.
    pub fn window_starts(&self, len: usize) -> Vec<usize> {
        let mut starts: Vec<usize> = self.doc_boundaries.iter().copied().filter(|&b| b < len).collect();
        starts.sort_unstable();
        let mut out = Vec::with_capacity(len);
        let mut current = 0;
        let mut next = starts.iter().peekable();
        for i in 0..len {
            while let Some(&&b) = next.peek() {
                if b <= i {
                    current = b;
                    next.next();
                } else {
                    break;
                }
            }
            out.push(current);
        }
        out
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        !self.doc_boundaries.iter().any(|&b| j < b && b <= i)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    fn kv_head(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_kv_heads)
    }
}

fn head_slice<T: Scalar>(m: &Matrix<T>, head: usize, head_dim: usize) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows, head_dim);
    for r in 0..m.rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[head * head_dim..(head + 1) * head_dim]);
    }
    out
}

fn add_head_slice<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>, head: usize, head_dim: usize) {
    for r in 0..dst.rows {
        let d = &mut dst.row_mut(r)[head * head_dim..(head + 1) * head_dim];
        for (a, b) in d.iter_mut().zip(src.row(r)) {
            *a = *a + *b;
        }
    }
}

/// Returns the concatenated head outputs (`T × n_heads·head_dim`) and the
/// attention probabilities of each query head (`T × T`, zero where masked).
pub fn attention_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: HeadLayout,
    window_starts: &[usize],
) -> (Matrix<T>, Vec<Matrix<T>>) {
    let len = q.rows;
    let hd = layout.head_dim;
    let scale = T::one() / T::from_usize(hd).expect("head dim fits").sqrt();
    let mut out = Matrix::zeros(len, layout.n_heads * hd);
    let mut probs = Vec::with_capacity(layout.n_heads);
    let kv: Vec<(Matrix<T>, Matrix<T>)> = (0..layout.n_kv_heads)
        .map(|g| (head_slice(k, g, hd), head_slice(v, g, hd)))
        .collect();
    for h in 0..layout.n_heads {
        let (kh, vh) = &kv[layout.kv_head(h)];
        let qh = head_slice(q, h, hd);
        let mut p = matmul_nt(&qh, kh);
        for i in 0..len {
            softmax_window(p.row_mut(i), window_starts[i], i, scale);
        }
        let oh = matmul_nn(&p, vh);
        add_head_slice(&mut out, &oh, h, hd);
        probs.push(p);
    }
    (out, probs)
}

/// In-place masked softmax of `row * scale` over `lo..=hi`; zero elsewhere.
fn softmax_window<T: Scalar>(row: &mut [T], lo: usize, hi: usize, scale: T) {
    let mut max = T::neg_infinity();
    for v in &mut row[lo..=hi] {
        *v = *v * scale;
        max = max.max(*v);
    }
    let mut sum = T::zero();
    for v in &mut row[lo..=hi] {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in &mut row[lo..=hi] {
        *v = *v / sum;
    }
    for v in &mut row[..lo] {
        *v = T::zero();
    }
    for v in &mut row[hi + 1..] {
        *v = T::zero();
    }
}

/// Gradients with respect to the (already rotated) `q`, `k` and `v`.
pub fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    probs: &[Matrix<T>],
    d_out: &Matrix<T>,
    layout: HeadLayout,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let len = q.rows;
    let hd = layout.head_dim;
    let scale = T::one() / T::from_usize(hd).expect("head dim fits").sqrt();
    let mut dq = Matrix::zeros(len, q.cols);
    let mut dk = Matrix::zeros(len, k.cols);
    let mut dv = Matrix::zeros(len, v.cols);
    let kv: Vec<(Matrix<T>, Matrix<T>)> = (0..layout.n_kv_heads)
        .map(|g| (head_slice(k, g, hd), head_slice(v, g, hd)))
        .collect();
    for h in 0..layout.n_heads {
        let g = layout.kv_head(h);
        let (kh, vh) = &kv[g];
        let qh = head_slice(q, h, hd);
        let doh = head_slice(d_out, h, hd);
        let p = &probs[h];

        add_head_slice(&mut dv, &matmul_tn(p, &doh), g, hd);

        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the 1/√d scale
        let mut ds = matmul_nt(&doh, vh);
        for i in 0..len {
            let pr = p.row(i);
            let dr = ds.row_mut(i);
            let inner = pr.iter().zip(dr.iter()).fold(T::zero(), |a, (x, y)| a + *x * *y);
            for (d, pv) in dr.iter_mut().zip(pr) {
                *d = *pv * (*d - inner) * scale;
            }
        }
        add_head_slice(&mut dq, &matmul_nn(&ds, kh), h, hd);
        add_head_slice(&mut dk, &matmul_tn(&ds, &qh), g, hd);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_follow_boundaries() {
        let m = AttentionMask::with_documents(vec![4, 6]);
        assert_eq!(m.window_starts(8), vec![0, 0, 0, 0, 4, 4, 6, 6]);
        assert_eq!(AttentionMask::causal().window_starts(3), vec![0, 0, 0]);
        assert!(m.allows(5, 4));
        assert!(!m.allows(5, 3));
        assert!(!m.allows(2, 3));
    }

    #[test]
    fn probability_rows_sum_to_one() {
        let len = 6;
        let layout = HeadLayout {
            n_heads: 2,
            n_kv_heads: 1,
            head_dim: 4,
        };
        let q = Matrix::from_vec(len, 8, (0..len * 8).map(|i| (i as f32 * 0.7).sin()).collect());
        let k = Matrix::from_vec(len, 4, (0..len * 4).map(|i| (i as f32 * 0.3).cos()).collect());
        let v = k.clone();
        let starts = AttentionMask::with_documents(vec![3]).window_starts(len);
        let (_, probs) = attention_forward(&q, &k, &v, layout, &starts);
        for p in &probs {
            for i in 0..len {
                let s: f32 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for j in 0..len {
                    if j > i || j < starts[i] {
                        assert_eq!(p.get(i, j), 0.0);
                    }
                }
            }
        }
    }
}
