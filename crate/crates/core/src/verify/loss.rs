use rand::Rng;

use super::engine::normal_vec;

/// `L(y) = yᵀSy` for a symmetric `S`, so `∇L = 2Sy` and the Hessian is `2S`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub n: usize,
    /// Row-major `n×n`, symmetric.
    pub s: Vec<f64>,
}

impl QuadraticLoss {
    /// `S = (R + Rᵀ)/√2` with `R` i.i.d. standard normal, which keeps unit
    /// variance on the off-diagonal entries.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let r = normal_vec(rng, n * n);
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = (r[i * n + j] + r[j * n + i]) / std::f64::consts::SQRT_2;
            }
        }
        Self { n, s }
    }

    /// Symmetrizes `m` as `(M + Mᵀ)/2`.
    pub fn from_matrix(n: usize, m: &[f64]) -> Self {
        assert_eq!(m.len(), n * n, "matrix must be n×n");
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = (m[i * n + j] + m[j * n + i]) / 2.0;
            }
        }
        Self { n, s }
    }

    fn apply(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n, "output size does not match the loss");
        (0..self.n).map(|i| self.s[i * self.n..(i + 1) * self.n].iter().zip(y).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn loss(&self, y: &[f64]) -> f64 {
        self.apply(y).iter().zip(y).map(|(a, b)| a * b).sum()
    }

    pub fn gradient(&self, y: &[f64]) -> Vec<f64> {
        self.apply(y).into_iter().map(|v| 2.0 * v).collect()
    }

    /// Hessian-vector product `2S·v`.
    pub fn hessian_mul(&self, v: &[f64]) -> Vec<f64> {
        self.gradient(v)
    }

    /// `‖2S‖_F²`.
    pub fn hessian_frobenius2(&self) -> f64 {
        4.0 * self.s.iter().map(|v| v * v).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output() {
        let l = QuadraticLoss::random(4, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(l.loss(&[0.0; 4]), 0.0);
        assert_eq!(l.gradient(&[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn scalar_case() {
        let l = QuadraticLoss::from_matrix(1, &[3.0]);
        assert_eq!(l.loss(&[2.0]), 12.0);
        assert_eq!(l.gradient(&[2.0]), vec![12.0]);
    }

    #[test]
    fn symmetric() {
        let l = QuadraticLoss::random(5, &mut ChaCha8Rng::seed_from_u64(2));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(l.s[i * 5 + j], l.s[j * 5 + i]);
            }
        }
        let m = QuadraticLoss::from_matrix(2, &[1.0, 2.0, 4.0, 3.0]);
        assert_eq!(m.s, vec![1.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=8 {
            let l = QuadraticLoss::random(n, &mut rng);
            let y = normal_vec(&mut rng, n);
            let g = l.gradient(&y);
            let h = 1e-4;
            for i in 0..n {
                let (mut a, mut b) = (y.clone(), y.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (l.loss(&a) - l.loss(&b)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6, "n={n} i={i}: {fd} vs {}", g[i]);
            }
        }
    }
}
