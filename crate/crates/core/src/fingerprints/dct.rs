//! Orthonormal type-II DCT, per 8x8 block and over whole planes.

/// Row-major `n x n` orthonormal DCT-II matrix `C`, so `coeffs = C x`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            c[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// Separable 2-D transform of an `h x w` plane: `Ch X Cw^T` (forward) or
/// `Ch^T X Cw` (inverse).
#[derive(Debug, Clone)]
pub struct Dct2 {
    h: usize,
    w: usize,
    ch: Vec<f64>,
    cw: Vec<f64>,
}

impl Dct2 {
    pub fn new(h: usize, w: usize) -> Self {
        Dct2 { h, w, ch: dct_matrix(h), cw: dct_matrix(w) }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x, false)
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        self.apply(x, true)
    }

    fn apply(&self, x: &[f64], inverse: bool) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        assert_eq!(x.len(), h * w, "plane size mismatch");
        // rows: t = X * Cw^T (forward) or X * Cw (inverse)
        let mut t = vec![0.0; h * w];
        for r in 0..h {
            let row = &x[r * w..(r + 1) * w];
            for k in 0..w {
                let mut acc = 0.0;
                for (i, &v) in row.iter().enumerate() {
                    let m = if inverse { self.cw[i * w + k] } else { self.cw[k * w + i] };
                    acc += m * v;
                }
                t[r * w + k] = acc;
            }
        }
        // columns: out = Ch * t (forward) or Ch^T * t (inverse)
        let mut out = vec![0.0; h * w];
        for k in 0..h {
            for i in 0..h {
                let m = if inverse { self.ch[i * h + k] } else { self.ch[k * h + i] };
                if m == 0.0 {
                    continue;
                }
                let src = &t[i * w..(i + 1) * w];
                for (o, &v) in out[k * w..(k + 1) * w].iter_mut().zip(src) {
                    *o += m * v;
                }
            }
        }
        out
    }
}

thread_local! {
    static BLOCK: Dct2 = Dct2::new(8, 8);
}

pub fn dct2_block(block: &[f64; 64]) -> [f64; 64] {
    BLOCK.with(|d| d.forward(block).try_into().unwrap())
}

pub fn idct2_block(coeffs: &[f64; 64]) -> [f64; 64] {
    BLOCK.with(|d| d.inverse(coeffs).try_into().unwrap())
}

/// Apply `f` to every 8x8 block of an `h x w` plane whose sides are multiples of 8.
pub fn for_each_block(plane: &mut [f64], h: usize, w: usize, mut f: impl FnMut(&mut [f64; 64])) {
    assert!(h % 8 == 0 && w % 8 == 0, "plane sides must be multiples of 8");
    let mut block = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                block[y * 8..y * 8 + 8].copy_from_slice(&plane[(by + y) * w + bx..(by + y) * w + bx + 8]);
            }
            f(&mut block);
            for y in 0..8 {
                plane[(by + y) * w + bx..(by + y) * w + bx + 8].copy_from_slice(&block[y * 8..y * 8 + 8]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_block(seed: u64) -> [f64; 64] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|_| rng.gen_range(-128.0..128.0))
    }

    #[test]
    fn constant_block_has_only_dc() {
        let c = dct2_block(&[3.0; 64]);
        assert!((c[0] - 24.0).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn block_round_trip_and_parseval() {
        for seed in 0..10 {
            let b = random_block(seed);
            let c = dct2_block(&b);
            let back = idct2_block(&c);
            assert!(b.iter().zip(&back).all(|(a, z)| (a - z).abs() < 1e-9));
            let e1: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let e2: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((e1 - e2).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_direct_formula() {
        // X[u][v] = a(u) a(v) sum x[i][j] cos(pi (2i+1) u / 16) cos(pi (2j+1) v / 16)
        let b = random_block(3);
        let c = dct2_block(&b);
        let a = |k: usize| if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for u in 0..8 {
            for v in 0..8 {
                let mut s = 0.0;
                for i in 0..8 {
                    for j in 0..8 {
                        s += b[i * 8 + j]
                            * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / 16.0).cos()
                            * (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64 / 16.0).cos();
                    }
                }
                assert!((a(u) * a(v) * s - c[u * 8 + v]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rectangular_plane_round_trip() {
        let d = Dct2::new(5, 7);
        let x: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = d.inverse(&d.forward(&x));
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
