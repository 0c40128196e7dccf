//! Exact Kalman filter for linear Gaussian diagonal models.
//!
//! The covariance is held as `diag(d) + U W U^T`. Prediction scales `d` and
//! the rows of `U`; each update appends the `m` columns of `C H^T` to `U`.
//! This keeps the cost at `O(N r^2)` for rank `r`, so the filter runs at
//! resolutions where a dense `N x N` covariance would not fit.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::LinearGaussianModel;
use crate::observable::Observable;
use crate::observation::{ObservationOperator, ObservationRecord};
use crate::spectral::SpectralField;

/// Rank at which the low-rank factor is recompressed, in multiples of `m`.
const COMPRESS_FACTOR: usize = 4;
/// Relative eigenvalue floor kept by compression.
const COMPRESS_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    level: usize,
    mean: Vec<f64>,
    diag: Vec<f64>,
    u: DMatrix<f64>,
    w: DMatrix<f64>,
}

impl GaussianState {
    /// Initial law `N(0, P_L C0 P_L)`.
    pub fn prior<M: LinearGaussianModel>(model: &M, level: usize) -> Result<Self> {
        model.hierarchy().check_level(level)?;
        let n = model.hierarchy().modes(level);
        Ok(Self {
            level,
            mean: vec![0.0; n],
            diag: model.initial_variance()[..n].to_vec(),
            u: DMatrix::zeros(n, 0),
            w: DMatrix::zeros(0, 0),
        })
    }

    /// State with an arbitrary dense covariance.
    pub fn from_moments(mean: SpectralField, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(Error::Dimension(format!("covariance is {:?}, mean has {n} modes", cov.shape())));
        }
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        Ok(Self {
            level: mean.level(),
            mean: mean.into_coeffs(),
            diag: vec![0.0; n],
            u: DMatrix::identity(n, n),
            w: (&cov + cov.transpose()) * 0.5,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn mean(&self) -> SpectralField {
        SpectralField::from_parts(self.level, self.mean.clone())
    }

    pub fn mean_coeffs(&self) -> &[f64] {
        &self.mean
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn dense_cov(&self) -> DMatrix<f64> {
        let mut c = &self.u * &self.w * self.u.transpose();
        for (i, d) in self.diag.iter().enumerate() {
            c[(i, i)] += d;
        }
        (&c + c.transpose()) * 0.5
    }

    pub fn cov_diagonal(&self) -> Vec<f64> {
        let uw = &self.u * &self.w;
        self.diag
            .iter()
            .enumerate()
            .map(|(i, d)| d + uw.row(i).dot(&self.u.row(i)))
            .collect()
    }

    pub fn trace(&self) -> f64 {
        let gram = self.u.transpose() * &self.u;
        self.diag.iter().sum::<f64>() + self.w.component_mul(&gram).sum()
    }

    /// `C a` for a vector `a` of length `N`.
    fn cov_times(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.u * (&self.w * (self.u.transpose() * a));
        for (i, d) in self.diag.iter().enumerate() {
            for c in 0..a.ncols() {
                out[(i, c)] += d * a[(i, c)];
            }
        }
        out
    }

    /// `mean <- D mean`, `cov <- D cov D + Q`.
    pub fn predict<M: LinearGaussianModel>(&mut self, model: &M) {
        let decay = model.decay();
        let q = model.step_variance();
        for (i, x) in self.mean.iter_mut().enumerate() {
            *x *= decay[i];
        }
        for (i, d) in self.diag.iter_mut().enumerate() {
            *d = decay[i] * decay[i] * *d + q[i];
        }
        for (i, mut row) in self.u.row_iter_mut().enumerate() {
            row *= decay[i];
        }
    }

    /// Exact analysis step; returns the Kalman gain.
    pub fn update(&mut self, y: &[f64], obs: &ObservationOperator) -> Result<KalmanUpdate> {
        let n = self.mean.len();
        if n > obs.n_modes() {
            return Err(Error::Dimension(format!("state has {n} modes, H covers {}", obs.n_modes())));
        }
        if y.len() != obs.m() {
            return Err(Error::Dimension(format!("observation has {} entries, H has {} rows", y.len(), obs.m())));
        }
        let h = obs.restricted(n);
        let prior_trace = self.trace();
        let g = self.cov_times(&h.transpose());
        let hg = &h * &g;
        let s = (&hg + hg.transpose()) * 0.5 + obs.gamma();
        let chol = s.clone().cholesky().ok_or(Error::NotPositiveDefinite("innovation covariance"))?;
        let k = chol.solve(&g.transpose()).transpose();
        let innov = DVector::from_column_slice(y) - &h * DVector::from_column_slice(&self.mean);
        let dm = &k * innov;
        for (x, d) in self.mean.iter_mut().zip(dm.iter()) {
            *x += d;
        }
        let s_inv = chol.inverse();
        let r = self.u.ncols();
        let m = g.ncols();
        let mut u = DMatrix::zeros(n, r + m);
        u.columns_mut(0, r).copy_from(&self.u);
        u.columns_mut(r, m).copy_from(&g);
        let mut w = DMatrix::zeros(r + m, r + m);
        w.view_mut((0, 0), (r, r)).copy_from(&self.w);
        w.view_mut((r, r), (m, m)).copy_from(&(-(&s_inv + s_inv.transpose()) * 0.5));
        self.u = u;
        self.w = w;
        if self.u.ncols() > COMPRESS_FACTOR * m.max(1) || self.u.ncols() > n {
            self.compress();
        }
        Ok(KalmanUpdate { gain: k, prior_trace, posterior_trace: self.trace() })
    }

    /// Re-expresses `U W U^T` in an orthonormal eigenbasis and drops
    /// eigenvalues below the relative floor.
    fn compress(&mut self) {
        let qr = self.u.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let b = &r * &self.w * r.transpose();
        let eig = SymmetricEigen::new((&b + b.transpose()) * 0.5);
        let scale = eig
            .eigenvalues
            .iter()
            .fold(0.0f64, |a, l| a.max(l.abs()))
            .max(self.diag.iter().fold(0.0f64, |a, d| a.max(d.abs())));
        let keep: Vec<usize> =
            (0..eig.eigenvalues.len()).filter(|&i| eig.eigenvalues[i].abs() > COMPRESS_TOL * scale).collect();
        let mut u = DMatrix::zeros(self.u.nrows(), keep.len());
        let mut w = DMatrix::zeros(keep.len(), keep.len());
        for (j, &i) in keep.iter().enumerate() {
            u.set_column(j, &(&q * eig.eigenvectors.column(i)));
            w[(j, j)] = eig.eigenvalues[i];
        }
        self.u = u;
        self.w = w;
    }
}

#[derive(Debug, Clone)]
pub struct KalmanUpdate {
    pub gain: DMatrix<f64>,
    pub prior_trace: f64,
    pub posterior_trace: f64,
}

/// Exact filter quantities at one observation time.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStep {
    pub n: usize,
    pub mean: SpectralField,
    pub trace: f64,
    /// `phi(mean)`; present only for linear observables.
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub level: usize,
    pub steps: Vec<ReferenceStep>,
}

impl ReferenceTrajectory {
    /// Exact `E[phi]` per step, `n = 0..=N`.
    pub fn estimates(&self) -> Result<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| s.estimate.ok_or(Error::UnsupportedObservable("exact expectation needs a linear observable")))
            .collect()
    }
}

/// Runs the exact filter at `level` over `observations`.
pub fn run_reference<M: LinearGaussianModel>(
    model: &M,
    obs: &ObservationOperator,
    level: usize,
    observations: &[ObservationRecord],
    phi: &Observable,
) -> Result<ReferenceTrajectory> {
    let mut gs = GaussianState::prior(model, level)?;
    let estimate = |gs: &GaussianState| phi.is_linear().then(|| phi.eval(gs.mean_coeffs()));
    let mut steps = Vec::with_capacity(observations.len() + 1);
    steps.push(ReferenceStep { n: 0, mean: gs.mean(), trace: gs.trace(), estimate: estimate(&gs) });
    for (i, y) in observations.iter().enumerate() {
        if y.n != i + 1 {
            return Err(Error::Dimension(format!("observation {} has time index {}", i + 1, y.n)));
        }
        gs.predict(model);
        gs.update(&y.y, obs)?;
        steps.push(ReferenceStep { n: y.n, mean: gs.mean(), trace: gs.trace(), estimate: estimate(&gs) });
    }
    Ok(ReferenceTrajectory { level, steps })
}
