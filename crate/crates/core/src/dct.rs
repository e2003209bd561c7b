//! 8x8 orthonormal DCT-II on interleaved NHWC buffers.
//!
//! Coefficients stay in place: block `(by, bx)` of channel `c` holds its
//! coefficient `(u, v)` at pixel `(8 by + u, 8 bx + v)`. The same routine
//! serves the reference codec and the differentiable proxy so the two agree
//! bit for bit in 64-bit mode.

use std::sync::OnceLock;

use crate::tensor::Real;

pub const BLOCK: usize = 8;

/// JPEG zigzag scan: position `i` of the scan reads coefficient `ZIGZAG[i]`
/// (row-major index within the block).
pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21,
    28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54,
    47, 55, 62, 63,
];

/// `C[k][n] = s(k) cos((2n + 1) k pi / 16)`, rows orthonormal.
pub fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; BLOCK]; BLOCK];
        for (k, row) in c.iter_mut().enumerate() {
            let s = if k == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = s * (((2 * n + 1) * k) as f64 * std::f64::consts::PI / (2 * BLOCK) as f64).cos();
            }
        }
        c
    })
}

pub fn padded(n: usize) -> usize {
    n.div_ceil(BLOCK) * BLOCK
}

/// Pad H and W up to multiples of 8 by replicating the last row/column.
pub fn pad_edge<T: Copy>(data: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ph, pw) = (padded(h), padded(w));
    if (ph, pw) == (h, w) {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(n * ph * pw * c);
    for b in 0..n {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                let i = ((b * h + sy) * w + sx) * c;
                out.extend_from_slice(&data[i..i + c]);
            }
        }
    }
    out
}

/// Adjoint of [`pad_edge`]: replicated samples add back onto their source.
pub fn fold_edge<T: Real>(data: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ph, pw) = (padded(h), padded(w));
    if (ph, pw) == (h, w) {
        return data.to_vec();
    }
    let mut out = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                let src = ((b * ph + y) * pw + x) * c;
                let dst = ((b * h + sy) * w + sx) * c;
                for k in 0..c {
                    out[dst + k] += data[src + k];
                }
            }
        }
    }
    out
}

/// Keep the top-left `h x w` of a padded buffer.
pub fn crop<T: Copy>(data: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ph, pw) = (padded(h), padded(w));
    if (ph, pw) == (h, w) {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            let i = ((b * ph + y) * pw) * c;
            out.extend_from_slice(&data[i..i + w * c]);
        }
    }
    out
}

/// Adjoint of [`crop`]: zero fill.
pub fn zero_pad<T: Real>(data: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ph, pw) = (padded(h), padded(w));
    if (ph, pw) == (h, w) {
        return data.to_vec();
    }
    let mut out = vec![T::zero(); n * ph * pw * c];
    for b in 0..n {
        for y in 0..h {
            let src = ((b * h + y) * w) * c;
            let dst = ((b * ph + y) * pw) * c;
            out[dst..dst + w * c].copy_from_slice(&data[src..src + w * c]);
        }
    }
    out
}

/// In-place blockwise transform of a buffer whose H and W are multiples of 8.
/// Forward computes `C X C^T`, inverse `C^T Y C`.
pub fn transform_blocks<T: Real>(data: &mut [T], n: usize, h: usize, w: usize, c: usize, inverse: bool) {
    debug_assert!(h % BLOCK == 0 && w % BLOCK == 0);
    let basis = basis();
    let mut m = [[T::zero(); BLOCK]; BLOCK];
    for k in 0..BLOCK {
        for j in 0..BLOCK {
            m[k][j] = if inverse { T::lit(basis[j][k]) } else { T::lit(basis[k][j]) };
        }
    }
    let mut blk = [[T::zero(); BLOCK]; BLOCK];
    let mut tmp = [[T::zero(); BLOCK]; BLOCK];
    for b in 0..n {
        for by in (0..h).step_by(BLOCK) {
            for bx in (0..w).step_by(BLOCK) {
                for ch in 0..c {
                    let idx = |u: usize, v: usize| (((b * h + by + u) * w) + bx + v) * c + ch;
                    for u in 0..BLOCK {
                        for v in 0..BLOCK {
                            blk[u][v] = data[idx(u, v)];
                        }
                    }
                    // rows: tmp = M * blk
                    for k in 0..BLOCK {
                        for v in 0..BLOCK {
                            let mut acc = T::zero();
                            for u in 0..BLOCK {
                                acc += m[k][u] * blk[u][v];
                            }
                            tmp[k][v] = acc;
                        }
                    }
                    // columns: out = tmp * M^T
                    for k in 0..BLOCK {
                        for l in 0..BLOCK {
                            let mut acc = T::zero();
                            for v in 0..BLOCK {
                                acc += tmp[k][v] * m[l][v];
                            }
                            data[idx(k, l)] = acc;
                        }
                    }
                }
            }
        }
    }
}

/// Pad, then forward transform. Returns the padded coefficient buffer.
pub fn forward<T: Real>(data: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = pad_edge(data, n, h, w, c);
    transform_blocks(&mut out, n, padded(h), padded(w), c, false);
    out
}

/// Inverse transform of a padded coefficient buffer, cropped to `h x w`.
pub fn inverse<T: Real>(coeffs: &[T], n: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let mut buf = coeffs.to_vec();
    transform_blocks(&mut buf, n, padded(h), padded(w), c, true);
    crop(&buf, n, h, w, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &[f64; 64]) -> [f64; 64] {
        let pi = std::f64::consts::PI;
        let s = |k: usize| if k == 0 { (0.125f64).sqrt() } else { 0.5 };
        let mut out = [0.0; 64];
        for u in 0..8 {
            for v in 0..8 {
                let mut acc = 0.0;
                for i in 0..8 {
                    for j in 0..8 {
                        acc += x[i * 8 + j]
                            * ((2 * i + 1) as f64 * u as f64 * pi / 16.0).cos()
                            * ((2 * j + 1) as f64 * v as f64 * pi / 16.0).cos();
                    }
                }
                out[u * 8 + v] = s(u) * s(v) * acc;
            }
        }
        out
    }

    #[test]
    fn constant_block_has_only_dc() {
        let coeffs = forward(&[3.0f64; 64], 1, 8, 8, 1);
        assert!((coeffs[0] - 24.0).abs() < 1e-12);
        assert!(coeffs[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn matches_naive_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let mut x = [0.0; 64];
            x.iter_mut().for_each(|v| *v = rng.random_range(-128.0..128.0));
            let fast = forward(&x, 1, 8, 8, 1);
            let slow = naive(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn padding_replicates_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w, c) = (11, 13, 2);
        let x: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(0.0..255.0)).collect();
        let coeffs = forward(&x, 1, h, w, c);
        assert_eq!(coeffs.len(), 16 * 16 * c);
        let back = inverse(&coeffs, 1, h, w, c);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn pad_and_fold_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (h, w, c) = (5, 9, 2);
        let x: Vec<f64> = (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..8 * 16 * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let px = pad_edge(&x, 1, h, w, c);
        let fy = fold_edge(&y, 1, h, w, c);
        let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let cy = crop(&y, 1, h, w, c);
        let zx = zero_pad(&x, 1, h, w, c);
        let lhs: f64 = cy.iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(&zx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zigzag_is_a_permutation() {
        let mut seen = [false; 64];
        for &z in &ZIGZAG {
            seen[z] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(&ZIGZAG[..6], &[0, 1, 8, 16, 9, 2]);
    }
}
