//! Orthonormal DCT-II along the time axis of an action chunk.

use std::f64::consts::PI;

use super::ActionChunk;

/// Row `k` holds the `k`-th orthonormal DCT-II basis vector sampled at `t = 0..h`.
fn basis(h: usize) -> Vec<f64> {
    let mut b = vec![0.0; h * h];
    let dc = (1.0 / h as f64).sqrt();
    let ac = (2.0 / h as f64).sqrt();
    for k in 0..h {
        let s = if k == 0 { dc } else { ac };
        for t in 0..h {
            b[k * h + t] = s * (PI * (t as f64 + 0.5) * k as f64 / h as f64).cos();
        }
    }
    b
}

/// Forward transform: each column (action dimension) is transformed independently.
pub fn dct_forward(chunk: &ActionChunk) -> ActionChunk {
    let (h, d) = (chunk.horizon(), chunk.dim());
    let b = basis(h);
    let mut out = vec![0.0; h * d];
    for k in 0..h {
        let row = &b[k * h..(k + 1) * h];
        for j in 0..d {
            out[k * d + j] = row.iter().enumerate().map(|(t, w)| w * chunk.get(t, j)).sum();
        }
    }
    ActionChunk::from_raw(h, d, out)
}

/// Inverse transform (the transpose of the forward basis).
pub fn dct_inverse(coeffs: &ActionChunk) -> ActionChunk {
    let (h, d) = (coeffs.horizon(), coeffs.dim());
    let b = basis(h);
    let mut out = vec![0.0; h * d];
    for t in 0..h {
        for j in 0..d {
            out[t * d + j] = (0..h).map(|k| b[k * h + t] * coeffs.get(k, j)).sum();
        }
    }
    ActionChunk::from_raw(h, d, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_column_is_dc_only() {
        let c = 0.7;
        let chunk = ActionChunk::new(8, 1, vec![c; 8]).unwrap();
        let coeffs = dct_forward(&chunk);
        assert!((coeffs.get(0, 0) - c * 8f64.sqrt()).abs() < 1e-12);
        for k in 1..8 {
            assert!(coeffs.get(k, 0).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn matches_dense_cosine_matrix() {
        // Straight-line 4x4 DCT-II matrix product.
        let x = [0.3, -1.2, 2.5, 0.05];
        let n = 4.0f64;
        let mut expect = [0.0; 4];
        for (k, e) in expect.iter_mut().enumerate() {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let mut acc = 0.0;
            for (t, xv) in x.iter().enumerate() {
                acc += xv * (std::f64::consts::PI / n * (t as f64 + 0.5) * k as f64).cos();
            }
            *e = scale * acc;
        }
        let got = dct_forward(&ActionChunk::new(4, 1, x.to_vec()).unwrap());
        for (k, e) in expect.iter().enumerate() {
            assert!((got.get(k, 0) - e).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let vals: Vec<f64> = (0..30).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let chunk = ActionChunk::new(10, 3, vals).unwrap();
        let back = dct_inverse(&dct_forward(&chunk));
        assert!(chunk.max_abs_diff(&back) <= 1e-9);
    }
}
