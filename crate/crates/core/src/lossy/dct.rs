//! 8x8 orthonormal type-II DCT with a fixed summation order.

use std::sync::OnceLock;

pub const BLOCK: usize = 8;
pub const BLOCK_AREA: usize = BLOCK * BLOCK;

/// Zigzag scan: `ZIGZAG[i]` is the raster index of the i-th coefficient.
pub const ZIGZAG: [usize; BLOCK_AREA] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27, 20,
    13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58, 59,
    52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

/// `basis()[u * 8 + x] = α(u) cos((2x + 1) u π / 16)`.
pub fn basis() -> &'static [f64; BLOCK_AREA] {
    static BASIS: OnceLock<[f64; BLOCK_AREA]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [0.0; BLOCK_AREA];
        for u in 0..BLOCK {
            let alpha = if u == 0 { (1.0 / 8.0f64).sqrt() } else { (2.0 / 8.0f64).sqrt() };
            for x in 0..BLOCK {
                let angle = ((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0;
                b[u * BLOCK + x] = alpha * angle.cos();
            }
        }
        b
    })
}

/// Forward transform of a level-shifted block in raster order (row = y).
pub fn forward(block: &[f64; BLOCK_AREA]) -> [f64; BLOCK_AREA] {
    let b = basis();
    let mut rows = [0.0; BLOCK_AREA];
    for y in 0..BLOCK {
        for u in 0..BLOCK {
            let mut acc = 0.0;
            for x in 0..BLOCK {
                acc += b[u * BLOCK + x] * block[y * BLOCK + x];
            }
            rows[y * BLOCK + u] = acc;
        }
    }
    let mut out = [0.0; BLOCK_AREA];
    for v in 0..BLOCK {
        for u in 0..BLOCK {
            let mut acc = 0.0;
            for y in 0..BLOCK {
                acc += b[v * BLOCK + y] * rows[y * BLOCK + u];
            }
            out[v * BLOCK + u] = acc;
        }
    }
    out
}

/// Inverse transform; output is still level-shifted and unrounded.
pub fn inverse(coef: &[f64; BLOCK_AREA]) -> [f64; BLOCK_AREA] {
    let b = basis();
    let mut cols = [0.0; BLOCK_AREA];
    for y in 0..BLOCK {
        for u in 0..BLOCK {
            let mut acc = 0.0;
            for v in 0..BLOCK {
                acc += b[v * BLOCK + y] * coef[v * BLOCK + u];
            }
            cols[y * BLOCK + u] = acc;
        }
    }
    let mut out = [0.0; BLOCK_AREA];
    for y in 0..BLOCK {
        for x in 0..BLOCK {
            let mut acc = 0.0;
            for u in 0..BLOCK {
                acc += b[u * BLOCK + x] * cols[y * BLOCK + u];
            }
            out[y * BLOCK + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_is_a_permutation() {
        let mut seen = [false; BLOCK_AREA];
        for &i in &ZIGZAG {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn transform_roundtrip() {
        let mut block = [0.0; BLOCK_AREA];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 - 50.0;
        }
        let back = inverse(&forward(&block));
        for (a, b) in block.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_block_is_dc_only() {
        let block = [10.0; BLOCK_AREA];
        let c = forward(&block);
        assert!((c[0] - 80.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }
}
