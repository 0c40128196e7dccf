//! Forward models and the exact-in-time stochastic heat equation.
//!
//! A [`ForwardModel`] advances coefficient slices in place. Pair coupling is
//! purely a matter of noise keys: the fine member of a pair consumes the
//! stream's normals `z_1..z_N(l)` and the coarse member reuses the prefix
//! `z_1..z_N(l-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseStream, Normals};
use crate::spectral::{LevelHierarchy, SpectralField};

/// Rate exponents of the hierarchy: strong/bias rate `beta` and cost
/// exponent `gamma` (cost per step `~ h^(-d gamma)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub beta: f64,
    pub gamma: f64,
}

/// Abstract forward map `Psi^l` on a spectral hierarchy.
pub trait ForwardModel: Send + Sync {
    fn hierarchy(&self) -> &LevelHierarchy;

    fn rates(&self) -> RateConstants;

    /// One step of `Psi^l` applied to `fine` (length `N(l)`) and, with the
    /// same noise realization, to `coarse` (a prefix-level slice, possibly
    /// empty for the level-0 sentinel).
    fn advance(&self, fine: &mut [f64], coarse: &mut [f64], noise: Normals);

    /// Writes an initial-condition draw into `out`; a shorter `out` receives
    /// the projection of the longer draw.
    fn draw_initial(&self, out: &mut [f64], noise: Normals);

    /// Model-evaluation units of one step at `level`.
    fn cost_per_step(&self, level: usize) -> f64 {
        (self.hierarchy().modes(level) as f64).powf(self.rates().gamma)
    }

    fn step(&self, level: usize, u: &SpectralField, noise: &NoiseStream) -> Result<SpectralField> {
        self.hierarchy().check_level(level)?;
        if u.level() != level {
            return Err(Error::LevelMismatch { expected: level, actual: u.level() });
        }
        let mut coeffs = u.coeffs().to_vec();
        self.advance(&mut coeffs, &mut [], noise.normals());
        Ok(SpectralField::from_parts(level, coeffs))
    }

    /// Coupled step of a `(coarse, fine)` pair at `level`. At level 0 the
    /// coarse member is the zero sentinel and must be `None`.
    fn coupled_step(
        &self,
        level: usize,
        coarse: Option<&SpectralField>,
        fine: &SpectralField,
        noise: &NoiseStream,
    ) -> Result<(Option<SpectralField>, SpectralField)> {
        self.hierarchy().check_level(level)?;
        if fine.level() != level {
            return Err(Error::LevelMismatch { expected: level, actual: fine.level() });
        }
        let mut f = fine.coeffs().to_vec();
        match (level, coarse) {
            (0, None) => {
                self.advance(&mut f, &mut [], noise.normals());
                Ok((None, SpectralField::from_parts(0, f)))
            }
            (0, Some(_)) => Err(Error::Dimension("level-0 pairs have no coarse member".into())),
            (_, None) => Err(Error::Dimension("coarse member missing above level 0".into())),
            (_, Some(c)) => {
                if c.level() + 1 != level {
                    return Err(Error::LevelMismatch { expected: level - 1, actual: c.level() });
                }
                let mut cc = c.coeffs().to_vec();
                self.advance(&mut f, &mut cc, noise.normals());
                Ok((Some(SpectralField::from_parts(level - 1, cc)), SpectralField::from_parts(level, f)))
            }
        }
    }

    fn sample_initial(&self, level: usize, noise: &NoiseStream) -> Result<SpectralField> {
        self.hierarchy().check_level(level)?;
        let mut coeffs = vec![0.0; self.hierarchy().modes(level)];
        self.draw_initial(&mut coeffs, noise.normals());
        Ok(SpectralField::from_parts(level, coeffs))
    }
}

/// Linear Gaussian model with diagonal dynamics, needed by the exact filter.
pub trait LinearGaussianModel: ForwardModel {
    /// Per-mode multiplicative decay over one step, length `N(Lmax)`.
    fn decay(&self) -> &[f64];
    /// Per-mode additive noise variance over one step.
    fn step_variance(&self) -> &[f64];
    /// Per-mode initial variance.
    fn initial_variance(&self) -> &[f64];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatModelParams {
    /// Noise smoothing exponent, `B = A^(-b)`.
    pub b: f64,
    /// Initial covariance exponent, `C0 = A^(-a)`.
    pub a: f64,
    /// Observation time increment.
    pub tau: f64,
    /// Spatial dimension; the shipped model is one dimensional.
    pub d: usize,
    /// Multiplier on the model noise; 0 gives deterministic decay.
    #[serde(default = "one")]
    pub noise_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for HeatModelParams {
    fn default() -> Self {
        Self { b: 0.0, a: 1.0, tau: 1.0, d: 1, noise_scale: 1.0 }
    }
}

impl HeatModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.d != 1 {
            return bad(format!("heat model is one dimensional, got d = {}", self.d));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return bad(format!("b must be >= 0, got {}", self.b));
        }
        if !(self.a > 0.5 * self.d as f64 && self.a.is_finite()) {
            return bad(format!("a must exceed d/2 for a trace-class C0, got {}", self.a));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be >= 0, got {}", self.noise_scale));
        }
        Ok(())
    }

    /// `exp(-k^2 tau)`.
    pub fn decay(&self, k: usize) -> f64 {
        let k2 = (k * k) as f64;
        (-k2 * self.tau).exp()
    }

    /// `sigma_k^2(tau) = k^(-4b) / (2 k^2) * (1 - exp(-2 k^2 tau))`, before
    /// the noise multiplier.
    pub fn step_variance(&self, k: usize) -> f64 {
        let k = k as f64;
        let k2 = k * k;
        k.powf(-4.0 * self.b) / (2.0 * k2) * -(-2.0 * k2 * self.tau).exp_m1()
    }

    /// `k^(-2a)`.
    pub fn initial_variance(&self, k: usize) -> f64 {
        (k as f64).powf(-2.0 * self.a)
    }

    /// `sum_(k > n) k^(-2a)`: the expected squared norm of the modes of an
    /// initial draw that level resolution `n` discards.
    pub fn tail_energy(&self, n: usize) -> f64 {
        let s = 2.0 * self.a;
        let cut = (8 * n).max(1 << 14);
        let head: f64 = (n + 1..=cut).rev().map(|k| (k as f64).powf(-s)).sum();
        let c = cut as f64;
        // Euler-Maclaurin remainder of the sum beyond `cut`.
        head + c.powf(1.0 - s) / (s - 1.0) - 0.5 * c.powf(-s) + s * c.powf(-s - 1.0) / 12.0
    }

    /// `k^(-4b) / (2 k^2)`, the invariant variance of mode `k`.
    pub fn stationary_variance(&self, k: usize) -> f64 {
        let k = k as f64;
        k.powf(-4.0 * self.b) / (2.0 * k * k)
    }
}

/// Stochastic heat equation `du = -A u dt + B dW` solved exactly per mode.
#[derive(Debug, Clone)]
pub struct HeatModel {
    params: HeatModelParams,
    hierarchy: LevelHierarchy,
    rates: RateConstants,
    decay: Vec<f64>,
    sigma: Vec<f64>,
    variance: Vec<f64>,
    init_var: Vec<f64>,
    init_sd: Vec<f64>,
}

impl HeatModel {
    /// Heat model with the default rate metadata `beta = 1`, `gamma = 1`.
    pub fn new(params: HeatModelParams, hierarchy: LevelHierarchy) -> Result<Self> {
        params.validate()?;
        if hierarchy.dim() != params.d {
            return Err(Error::InvalidConfig(format!(
                "hierarchy dimension {} differs from model dimension {}",
                hierarchy.dim(),
                params.d
            )));
        }
        let n = hierarchy.modes(hierarchy.max_level());
        let modes = 1..=n;
        let decay: Vec<f64> = modes.clone().map(|k| params.decay(k)).collect();
        let variance: Vec<f64> = modes
            .clone()
            .map(|k| params.noise_scale * params.noise_scale * params.step_variance(k))
            .collect();
        let sigma = variance.iter().map(|v| v.sqrt()).collect();
        let init_var: Vec<f64> = modes.map(|k| params.initial_variance(k)).collect();
        let init_sd = init_var.iter().map(|v| v.sqrt()).collect();
        Ok(Self {
            params,
            hierarchy,
            rates: RateConstants { beta: 1.0, gamma: 1.0 },
            decay,
            sigma,
            variance,
            init_var,
            init_sd,
        })
    }

    pub fn with_rates(mut self, rates: RateConstants) -> Result<Self> {
        if !(rates.beta > 0.0 && rates.gamma > 0.0) {
            return Err(Error::InvalidConfig("rate constants must be positive".into()));
        }
        self.rates = rates;
        Ok(self)
    }

    pub fn params(&self) -> &HeatModelParams {
        &self.params
    }

    /// Same model on a hierarchy with a different top level.
    pub fn with_max_level(&self, max_level: usize) -> Result<Self> {
        HeatModel::new(self.params, self.hierarchy.with_max_level(max_level)?)?.with_rates(self.rates)
    }

    /// `E|Psi^l(u) - Psi^(l-1)(P_(l-1) u)|^2`: the energy of the modes
    /// between the two levels after one step.
    pub fn level_increment_energy(&self, level: usize, u: &SpectralField) -> Result<f64> {
        if level == 0 || u.level() != level {
            return Err(Error::LevelMismatch { expected: level, actual: u.level() });
        }
        let lo = self.hierarchy.modes(level - 1);
        let hi = self.hierarchy.modes(level);
        Ok((lo..hi)
            .map(|j| self.decay[j] * self.decay[j] * u.coeffs()[j].powi(2) + self.variance[j])
            .sum())
    }
}

impl ForwardModel for HeatModel {
    fn hierarchy(&self) -> &LevelHierarchy {
        &self.hierarchy
    }

    fn rates(&self) -> RateConstants {
        self.rates
    }

    #[inline]
    fn advance(&self, fine: &mut [f64], coarse: &mut [f64], mut z: Normals) {
        debug_assert!(coarse.len() <= fine.len());
        let nc = coarse.len();
        let (head, tail) = fine.split_at_mut(nc);
        for (j, (f, c)) in head.iter_mut().zip(coarse.iter_mut()).enumerate() {
            let xi = self.sigma[j] * z.next().unwrap();
            *f = self.decay[j] * *f + xi;
            *c = self.decay[j] * *c + xi;
        }
        for (j, f) in tail.iter_mut().enumerate() {
            let j = j + nc;
            *f = self.decay[j] * *f + self.sigma[j] * z.next().unwrap();
        }
    }

    fn draw_initial(&self, out: &mut [f64], noise: Normals) {
        for ((o, sd), z) in out.iter_mut().zip(&self.init_sd).zip(noise) {
            *o = sd * z;
        }
    }
}

impl LinearGaussianModel for HeatModel {
    fn decay(&self) -> &[f64] {
        &self.decay
    }

    fn step_variance(&self) -> &[f64] {
        &self.variance
    }

    fn initial_variance(&self) -> &[f64] {
        &self.init_var
    }
}
