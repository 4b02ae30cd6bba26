//! Dense numeric core: row-major f64 matrices, a seeded xoshiro256++
//! generator, cosine geometry, and a central finite-difference oracle.

use crate::{Error, Result};

/// Norms below this are treated as degenerate (not meaningfully
/// representable in f64 arithmetic).
pub const EPS_NORM: f64 = 1e-12;

/// Row-major dense matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Column `c` collected into a fresh vector.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Seeded xoshiro256++ generator. State is expanded from the seed with
/// splitmix64, so any u64 seed is valid. The same seed yields the same
/// stream on every platform (the only libm call is `ln` inside the
/// normal sampler).
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). Lemire's multiply-shift; slight modulo
    /// bias is irrelevant at the n used here but this avoids it anyway.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Marsaglia's polar method.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Derive an independent child stream (used for per-batch streams).
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}

/// Scale `v` to unit L2 norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = norm2(v);
    if norm <= EPS_NORM {
        return Err(Error::DegenerateNorm(norm));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// 1 - cos(u, v), in [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    let nu = norm2(u);
    let nv = norm2(v);
    if nu <= EPS_NORM {
        return Err(Error::DegenerateNorm(nu));
    }
    if nv <= EPS_NORM {
        return Err(Error::DegenerateNorm(nv));
    }
    Ok(1.0 - dot(u, v) / (nu * nv))
}

/// Central finite-difference gradient estimate of a scalar function.
/// This is the independent oracle every backward pass is checked against.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let orig = xp[k];
        xp[k] = orig + h;
        let fp = f(&xp);
        xp[k] = orig - h;
        let fm = f(&xp);
        xp[k] = orig;
        grad[k] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradient vectors:
/// ||a - b|| / max(||a||, ||b||, eps). Used by all gradient checks.
pub fn grad_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = norm2(a);
    let nb = norm2(b);
    diff / na.max(nb).max(EPS_NORM)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_normalize_analytic() {
        let r = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((r[0] - 0.6).abs() < 1e-15);
        assert!((r[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_axis() {
        let r = l2_normalize(&[0.0, 0.0, 5.0]).unwrap();
        assert_eq!(r, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_unit_norm_property() {
        let mut rng = Rng::new(7);
        for _ in 0..20 {
            let v: Vec<f64> = (0..256).map(|_| rng.normal()).collect();
            let r = l2_normalize(&v).unwrap();
            assert!((norm2(&r) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_degenerate() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateNorm(_))
        ));
    }

    #[test]
    fn l2_normalize_idempotent() {
        let mut rng = Rng::new(11);
        let v: Vec<f64> = (0..32).map(|_| rng.normal()).collect();
        let once = l2_normalize(&v).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        let p = softmax(&[1000.0, 1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_direct_eval() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p[0] - 0.09003).abs() < 1e-5);
        assert!((p[1] - 0.24473).abs() < 1e-5);
        assert!((p[2] - 0.66524).abs() < 1e-5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let v: Vec<f64> = (0..8).map(|_| rng.normal_scaled(0.0, 3.0)).collect();
            let shifted: Vec<f64> = v.iter().map(|x| x + 17.5).collect();
            let a = softmax(&v);
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cosine_distance_cases() {
        let u = [1.0, 2.0, 3.0];
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_distance_scale_invariant() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let u: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
            let d = cosine_distance(&u, &v).unwrap();
            let au: Vec<f64> = u.iter().map(|x| 3.7 * x).collect();
            let bv: Vec<f64> = v.iter().map(|x| 0.02 * x).collect();
            let d2 = cosine_distance(&au, &bv).unwrap();
            let d3 = cosine_distance(&v, &u).unwrap();
            assert!((d - d2).abs() <= 1e-12);
            assert!((d - d3).abs() <= 1e-12);
        }
    }

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_constant() {
        let g = finite_diff_grad(|_| 42.0, &[1.0, 2.0, 3.0], 1e-5);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rng_reproducible() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(124);
        assert_ne!(Rng::new(123).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_normal_mean_clt() {
        // Sample mean of 10^6 draws should land within 5 sigma / 10^3.
        let mut rng = Rng::new(42);
        let n = 1_000_000;
        let (mu, sigma) = (0.1, 0.03);
        let mean: f64 =
            (0..n).map(|_| rng.normal_scaled(mu, sigma)).sum::<f64>() / n as f64;
        assert!((mean - mu).abs() < 5.0 * sigma / 1e3);
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        let m = Matrix::from_vec(2, 3, (0..6).map(|x| x as f64).collect()).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(m.col(2), vec![2.0, 5.0]);
    }
}
