//! Root-mean-square normalization with a learned per-feature gain.

use crate::tensor::{Matrix, Scalar};

/// Returns the normalized output and `1/rms` per row.
pub fn rms_norm<T: Scalar>(x: &Matrix<T>, gain: &[T], eps: f64) -> (Matrix<T>, Vec<T>) {
    debug_assert_eq!(x.cols, gain.len());
    let n = T::from_usize(x.cols).expect("width fits");
    let eps = T::from_f64_lossy(eps);
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().fold(T::zero(), |a, v| a + *v * *v) / n;
        let inv_rms = T::one() / (ms + eps).sqrt();
        for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gain) {
            *o = *v * inv_rms * *g;
        }
        inv.push(inv_rms);
    }
    (out, inv)
}

/// Backward of [`rms_norm`]. Accumulates into `dgain` when given.
pub fn rms_norm_backward<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    inv_rms: &[T],
    dy: &Matrix<T>,
    mut dgain: Option<&mut [T]>,
) -> Matrix<T> {
    let n = T::from_usize(x.cols).expect("width fits");
    let mut dx = Matrix::zeros(x.rows, x.cols);
    let mut dxhat = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        let inv = inv_rms[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut proj = T::zero();
        for c in 0..x.cols {
            let xhat = xr[c] * inv;
            dxhat[c] = dyr[c] * gain[c];
            proj = proj + dxhat[c] * xhat;
            if let Some(dg) = dgain.as_deref_mut() {
                dg[c] = dg[c] + dyr[c] * xhat;
            }
        }
        let mean_proj = proj / n;
        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = inv * (dxhat[c] - xr[c] * inv * mean_proj);
        }
    }
    dx
}
