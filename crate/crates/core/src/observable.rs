//! Globally Lipschitz observables `phi: H -> R`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{inner, norm};

#[derive(Debug, Clone, PartialEq)]
pub enum Observable {
    /// `phi(u) = <w, u>`; `w` may be longer or shorter than `u`.
    Linear(Vec<f64>),
    /// `phi(u) = |u|`.
    Norm,
}

impl Observable {
    #[inline]
    pub fn eval(&self, coeffs: &[f64]) -> f64 {
        match self {
            Observable::Linear(w) => inner(w, coeffs),
            Observable::Norm => norm(coeffs),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Observable::Linear(_))
    }

    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            Observable::Linear(w) => Some(w),
            Observable::Norm => None,
        }
    }

    pub fn lipschitz_constant(&self) -> f64 {
        match self {
            Observable::Linear(w) => norm(w),
            Observable::Norm => 1.0,
        }
    }
}

/// Serializable description of an observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservableSpec {
    /// Unit-norm Gaussian window over mode numbers.
    Window { center: f64, width: f64 },
    /// Coefficient of one mode (one based).
    Mode { k: usize },
    /// Explicit weights over the first modes.
    Weights { w: Vec<f64> },
    Norm,
}

impl Default for ObservableSpec {
    fn default() -> Self {
        ObservableSpec::Window { center: 2.0, width: 2.0 }
    }
}

impl ObservableSpec {
    pub fn build(&self, n_modes: usize) -> Result<Observable> {
        match self {
            ObservableSpec::Window { center, width } => {
                if !(*width > 0.0) {
                    return Err(Error::InvalidConfig("observable window width must be positive".into()));
                }
                let w: Vec<f64> = (1..=n_modes)
                    .map(|k| (-(k as f64 - center).powi(2) / (2.0 * width * width)).exp())
                    .collect();
                let n = norm(&w);
                if !(n > 0.0) {
                    return Err(Error::InvalidConfig("observable window vanishes".into()));
                }
                Ok(Observable::Linear(w.into_iter().map(|x| x / n).collect()))
            }
            ObservableSpec::Mode { k } => {
                if *k == 0 || *k > n_modes {
                    return Err(Error::InvalidConfig(format!("observable mode {k} outside 1..={n_modes}")));
                }
                let mut w = vec![0.0; *k];
                w[k - 1] = 1.0;
                Ok(Observable::Linear(w))
            }
            ObservableSpec::Weights { w } => {
                if w.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("observable weights"));
                }
                Ok(Observable::Linear(w.clone()))
            }
            ObservableSpec::Norm => Ok(Observable::Norm),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluations() {
        let phi = Observable::Linear(vec![1.0, 2.0]);
        assert_eq!(phi.eval(&[3.0, 4.0, 100.0]), 11.0);
        assert_eq!(Observable::Norm.eval(&[3.0, 4.0]), 5.0);
        assert_eq!(Observable::Norm.eval(&[]), 0.0);
        assert_eq!(phi.eval(&[]), 0.0);
    }

    #[test]
    fn specs_build() {
        let w = ObservableSpec::default().build(16).unwrap();
        assert!((w.lipschitz_constant() - 1.0).abs() < 1e-14);
        let m = ObservableSpec::Mode { k: 3 }.build(4).unwrap();
        assert_eq!(m.eval(&[1.0, 2.0, 3.0, 4.0]), 3.0);
        assert!(ObservableSpec::Mode { k: 5 }.build(4).is_err());
        assert!(!ObservableSpec::Norm.build(4).unwrap().is_linear());
    }
}
