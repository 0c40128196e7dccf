//! Truncated spectral representation of the state space.
//!
//! Coefficient `j` (zero based) of a field is the component along the
//! eigenfunction with mode number `k = j + 1`. Level `l` keeps the first
//! `N(l) = kappa^l` modes, so every coarse level is a prefix of the finer
//! ones and projection is plain truncation or zero padding.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nested resolution levels `H_0 ⊂ H_1 ⊂ … ⊂ H_Lmax`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelHierarchy {
    kappa: usize,
    dim: usize,
    max_level: usize,
}

impl LevelHierarchy {
    pub fn new(kappa: usize, dim: usize, max_level: usize) -> Result<Self> {
        if kappa < 2 {
            return Err(Error::InvalidConfig(format!("kappa must be >= 2, got {kappa}")));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("spatial dimension must be positive".into()));
        }
        let fits = (kappa as u128)
            .checked_pow(max_level as u32)
            .is_some_and(|n| n <= (1u128 << 40));
        if !fits {
            return Err(Error::InvalidConfig(format!(
                "N({max_level}) = {kappa}^{max_level} is too large"
            )));
        }
        Ok(Self { kappa, dim, max_level })
    }

    /// Dyadic hierarchy in one dimension.
    pub fn dyadic(max_level: usize) -> Self {
        Self::new(2, 1, max_level).expect("dyadic hierarchy is always valid")
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    /// Mode count `N(l) = kappa^l`.
    pub fn modes(&self, level: usize) -> usize {
        self.kappa.pow(level as u32)
    }

    /// Resolution parameter `h(l) = N(l)^(-1/d)`.
    pub fn resolution(&self, level: usize) -> f64 {
        (self.modes(level) as f64).powf(-1.0 / self.dim as f64)
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level > self.max_level {
            return Err(Error::LevelOutOfRange { level, max: self.max_level });
        }
        Ok(())
    }

    /// Same growth base and dimension with a different top level.
    pub fn with_max_level(&self, max_level: usize) -> Result<Self> {
        Self::new(self.kappa, self.dim, max_level)
    }
}

/// Element of the level-`l` space: `N(l)` real spectral coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    level: usize,
    coeffs: Vec<f64>,
}

impl SpectralField {
    pub fn new(hierarchy: &LevelHierarchy, level: usize, coeffs: Vec<f64>) -> Result<Self> {
        hierarchy.check_level(level)?;
        let expected = hierarchy.modes(level);
        if coeffs.len() != expected {
            return Err(Error::Length { level, len: coeffs.len(), expected });
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("spectral field"));
        }
        Ok(Self { level, coeffs })
    }

    pub fn zeros(hierarchy: &LevelHierarchy, level: usize) -> Result<Self> {
        hierarchy.check_level(level)?;
        Ok(Self { level, coeffs: vec![0.0; hierarchy.modes(level)] })
    }

    /// Constructor for callers that already guarantee the length invariant.
    pub(crate) fn from_parts(level: usize, coeffs: Vec<f64>) -> Self {
        Self { level, coeffs }
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// `P_l u`: truncate or zero-pad onto level `level`.
    pub fn project(&self, hierarchy: &LevelHierarchy, level: usize) -> Result<Self> {
        hierarchy.check_level(level)?;
        Ok(Self { level, coeffs: resize_coeffs(&self.coeffs, hierarchy.modes(level)) })
    }

    /// Zero-padding embedding into a finer level.
    pub fn embed(&self, hierarchy: &LevelHierarchy, level: usize) -> Result<Self> {
        if level < self.level {
            return Err(Error::LevelMismatch { expected: self.level, actual: level });
        }
        self.project(hierarchy, level)
    }

    pub fn inner(&self, other: &SpectralField) -> f64 {
        inner(&self.coeffs, &other.coeffs)
    }

    pub fn norm_sq(&self) -> f64 {
        inner(&self.coeffs, &self.coeffs)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Copy of `coeffs` truncated or zero-padded to `len` entries.
pub fn resize_coeffs(coeffs: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let keep = len.min(coeffs.len());
    out[..keep].copy_from_slice(&coeffs[..keep]);
    out
}

/// Inner product of coefficient vectors, missing entries read as zero.
pub fn inner(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    inner(u, u).sqrt()
}

/// Hilbert-Schmidt norm of an operator given by its coefficient matrix in
/// orthonormal bases (the Frobenius norm).
pub fn hs_norm(op: &DMatrix<f64>) -> f64 {
    op.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hier() -> LevelHierarchy {
        LevelHierarchy::dyadic(4)
    }

    #[test]
    fn hierarchy_counts_and_resolution() {
        let h = LevelHierarchy::new(3, 2, 3).unwrap();
        assert_eq!(h.modes(0), 1);
        assert_eq!(h.modes(3), 27);
        assert!((h.resolution(2) - 9f64.powf(-0.5)).abs() < 1e-15);
        for l in 1..=3 {
            assert!(h.resolution(l) < h.resolution(l - 1));
        }
        assert!(LevelHierarchy::new(1, 1, 3).is_err());
        assert!(LevelHierarchy::new(2, 0, 3).is_err());
        assert!(LevelHierarchy::new(2, 1, 64).is_err());
    }

    #[test]
    fn project_truncates() {
        let h = hier();
        let u = SpectralField::new(&h, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = u.project(&h, 1).unwrap();
        assert_eq!(p.coeffs(), &[1.0, 2.0]);
        assert_eq!(p.level(), 1);
        assert!(matches!(u.project(&h, 5), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn tail_energy_of_projection() {
        let h = hier();
        let u = SpectralField::new(&h, 2, vec![1.0; 4]).unwrap();
        let p = u.project(&h, 1).unwrap();
        assert_eq!(u.norm_sq() - p.norm_sq(), 2.0);
    }

    #[test]
    fn embed_then_project_is_identity() {
        let h = hier();
        let u = SpectralField::new(&h, 1, vec![0.5, -1.5]).unwrap();
        let e = u.embed(&h, 3).unwrap();
        assert_eq!(e.len(), 8);
        assert_eq!(e.project(&h, 1).unwrap(), u);
        assert!(e.embed(&h, 2).is_err());
    }

    #[test]
    fn inner_and_norm() {
        let h = hier();
        let u = SpectralField::new(&h, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(u.inner(&u), 25.0);
        assert_eq!(u.norm(), 5.0);
        let e1 = SpectralField::new(&h, 1, vec![1.0, 0.0]).unwrap();
        let e2 = SpectralField::new(&h, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(e1.inner(&e2), 0.0);
    }

    #[test]
    fn rejects_bad_lengths_and_non_finite() {
        let h = hier();
        assert!(matches!(SpectralField::new(&h, 1, vec![1.0]), Err(Error::Length { .. })));
        assert!(matches!(
            SpectralField::new(&h, 1, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn hs_norm_examples() {
        assert!((hs_norm(&DMatrix::identity(3, 3)) - 3f64.sqrt()).abs() < 1e-15);
        // |u ⊗ v| = |u| |v| with |u| = 2, |v| = 3.
        let u = nalgebra::DVector::from_vec(vec![2.0, 0.0, 0.0]);
        let v = nalgebra::DVector::from_vec(vec![0.0, 1.8, 2.4]);
        let rank_one = &u * v.transpose();
        assert!((hs_norm(&rank_one) - 6.0).abs() < 1e-14);
    }

    #[test]
    fn hs_norm_is_sum_of_column_images() {
        let a = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.7);
        let oracle: f64 = (0..4)
            .map(|k| {
                let mut e = nalgebra::DVector::zeros(4);
                e[k] = 1.0;
                (&a * e).norm_squared()
            })
            .sum();
        assert!((hs_norm(&a).powi(2) - oracle).abs() < 1e-12);
    }

    #[test]
    fn cauchy_schwarz_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let n = rng.random_range(1..12);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert!(inner(&u, &v).abs() <= norm(&u) * norm(&v) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn hs_norm_submultiplicative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = DMatrix::from_fn(4, 5, |_, _| rng.random_range(-2.0..2.0));
            let b = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
            let op_norm = a.clone().svd(false, false).singular_values.max();
            assert!(hs_norm(&(&a * &b)) <= op_norm * hs_norm(&b) * (1.0 + 1e-12));
        }
    }

    fn field_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (0usize..=4).prop_flat_map(|level| {
            (prop::collection::vec(-10.0f64..10.0, 1usize << level), Just(level))
        })
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_monotone((coeffs, level) in field_strategy(), a in 0usize..=4, b in 0usize..=4) {
            let h = hier();
            let u = SpectralField::new(&h, level, coeffs).unwrap();
            let (lo, hi) = (a.min(b), a.max(b));
            let p = u.project(&h, lo).unwrap();
            prop_assert_eq!(p.project(&h, lo).unwrap(), p.clone());
            let q = u.project(&h, hi).unwrap();
            prop_assert!(p.norm() <= q.norm() + 1e-12);
            prop_assert!(q.norm() <= u.norm() + 1e-12);
        }

        #[test]
        fn projection_adjoint_to_embedding((coeffs, level) in field_strategy(), vl in 0usize..=4, seed in any::<u64>()) {
            let h = hier();
            let u = SpectralField::new(&h, level, coeffs).unwrap();
            let v: Vec<f64> = (0..h.modes(vl)).map(|j| ((seed >> (j % 60)) & 7) as f64 - 3.5).collect();
            let v = SpectralField::new(&h, vl, v).unwrap();
            let lhs = u.project(&h, vl).unwrap().inner(&v);
            let rhs = u.inner(&v.embed(&h, 4).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
