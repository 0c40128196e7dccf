//! Linear observations `y = H u + eta`, `eta ~ N(0, Gamma)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardModel;
use crate::noise::{NoiseStream, Normals, StreamRole};
use crate::spectral::SpectralField;

/// How the rows of `H` are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservationKind {
    /// `H_ik = exp(-(k - c_i)^2 / (2 s^2))`, each row scaled to unit norm.
    SpectralWindow { centers: Vec<f64>, width: f64 },
    /// `H_ik = delta(k, k_i)` for one-based mode numbers `k_i`.
    ModePick { modes: Vec<usize> },
    /// Row-major `m x N` matrix used verbatim.
    Explicit { matrix: Vec<Vec<f64>> },
}

impl Default for ObservationKind {
    fn default() -> Self {
        ObservationKind::SpectralWindow { centers: vec![1.0, 3.0, 6.0, 10.0], width: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct ObservationOperator {
    /// `m x N(Lmax)`, column-major so a mode's column is contiguous.
    h: DMatrix<f64>,
    gamma: DMatrix<f64>,
    gamma_chol: DMatrix<f64>,
    /// Diagonal of `gamma_chol` when the factor is diagonal.
    chol_diag: Option<Vec<f64>>,
    gamma_min: f64,
}

impl ObservationOperator {
    pub fn new(kind: &ObservationKind, n_modes: usize, gamma: DMatrix<f64>) -> Result<Self> {
        let h = match kind {
            ObservationKind::SpectralWindow { centers, width } => {
                if !(*width > 0.0) {
                    return Err(Error::InvalidConfig(format!("window width must be positive, got {width}")));
                }
                let mut h = DMatrix::from_fn(centers.len(), n_modes, |i, j| {
                    let k = (j + 1) as f64;
                    (-(k - centers[i]).powi(2) / (2.0 * width * width)).exp()
                });
                for mut row in h.row_iter_mut() {
                    let n = row.norm();
                    if !(n > 0.0) {
                        return Err(Error::InvalidConfig("window row vanishes on the mode range".into()));
                    }
                    row /= n;
                }
                h
            }
            ObservationKind::ModePick { modes } => {
                if let Some(&k) = modes.iter().find(|&&k| k == 0 || k > n_modes) {
                    return Err(Error::InvalidConfig(format!("picked mode {k} outside 1..={n_modes}")));
                }
                DMatrix::from_fn(modes.len(), n_modes, |i, j| if modes[i] == j + 1 { 1.0 } else { 0.0 })
            }
            ObservationKind::Explicit { matrix } => {
                if matrix.iter().any(|r| r.len() != n_modes) {
                    return Err(Error::Dimension(format!("explicit H rows must have {n_modes} entries")));
                }
                DMatrix::from_fn(matrix.len(), n_modes, |i, j| matrix[i][j])
            }
        };
        Self::from_matrix(h, gamma)
    }

    pub fn from_matrix(h: DMatrix<f64>, gamma: DMatrix<f64>) -> Result<Self> {
        let m = h.nrows();
        if m == 0 {
            return Err(Error::InvalidConfig("at least one observation is required".into()));
        }
        if gamma.shape() != (m, m) {
            return Err(Error::Dimension(format!("Gamma is {:?}, expected {m}x{m}", gamma.shape())));
        }
        if h.iter().chain(gamma.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation operator"));
        }
        let scale = gamma.amax();
        if (&gamma - gamma.transpose()).amax() > 1e-12 * scale {
            return Err(Error::NotPositiveDefinite("Gamma is not symmetric"));
        }
        let gamma_chol = gamma
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("Gamma has no Cholesky factor"))?
            .l();
        let gamma_min = gamma.clone().symmetric_eigenvalues().min();
        if !(gamma_min > 0.0) {
            return Err(Error::NotPositiveDefinite("Gamma has a non-positive eigenvalue"));
        }
        let off_diagonal = (0..m).any(|j| (0..m).any(|i| i != j && gamma_chol[(i, j)] != 0.0));
        let chol_diag = (!off_diagonal).then(|| gamma_chol.diagonal().iter().copied().collect());
        Ok(Self { h, gamma, gamma_chol, chol_diag, gamma_min })
    }

    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    /// Number of modes `H` is defined on.
    pub fn n_modes(&self) -> usize {
        self.h.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// First `n` columns of `H`.
    pub fn restricted(&self, n: usize) -> DMatrix<f64> {
        self.h.columns(0, n).into_owned()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn gamma_chol(&self) -> &DMatrix<f64> {
        &self.gamma_chol
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    /// `out = H u` using the first `u.len()` columns.
    #[inline]
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let m = self.m();
        debug_assert!(u.len() <= self.n_modes() && out.len() == m);
        out.fill(0.0);
        let cols = &self.h.as_slice()[..u.len() * m];
        for (col, &uj) in cols.chunks_exact(m).zip(u) {
            for (o, &h) in out.iter_mut().zip(col) {
                *o += h * uj;
            }
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.apply_into(u, &mut out);
        out
    }

    /// `H* a` restricted to the first `n` modes.
    pub fn adjoint(&self, a: &[f64], n: usize) -> Vec<f64> {
        let m = self.m();
        self.h.as_slice()[..n * m].chunks_exact(m).map(|col| crate::spectral::inner(col, a)).collect()
    }

    /// `Gamma^(1/2) z` for the stream's first `m` standard normals.
    pub fn noise(&self, noise: &NoiseStream) -> DVector<f64> {
        let z = DVector::from_iterator(self.m(), noise.normals().take(self.m()));
        &self.gamma_chol * z
    }

    /// Perturbed observation `y + eta`, `eta ~ N(0, Gamma)`.
    pub fn perturb(&self, y: &[f64], noise: &NoiseStream) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        self.perturb_into(y, noise.normals(), &mut out);
        out
    }

    /// Allocation-free [`perturb`](Self::perturb); `out` has length `m`.
    #[inline]
    pub fn perturb_into(&self, y: &[f64], noise: Normals, out: &mut [f64]) {
        let m = self.m();
        if let Some(d) = &self.chol_diag {
            for (((o, y), d), z) in out.iter_mut().zip(y).zip(d).zip(noise) {
                *o = y + d * z;
            }
            return;
        }
        out.copy_from_slice(&y[..m]);
        let l = self.gamma_chol.as_slice();
        // Column j of the lower factor touches rows j..m.
        for (j, z) in noise.take(m).enumerate() {
            for i in j..m {
                out[i] += l[j * m + i] * z;
            }
        }
    }
}

/// `Gamma = scale * I`.
pub fn scaled_identity(m: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::identity(m, m) * scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub n: usize,
    pub y: Vec<f64>,
}

/// A synthetic truth path (`truth[n]` is the state at time `n`, `n = 0..=N`)
/// and the observations `y_1..y_N` taken from it.
#[derive(Debug, Clone)]
pub struct TruthRealization {
    pub truth: Vec<SpectralField>,
    pub observations: Vec<ObservationRecord>,
}

/// Twin-experiment data at `level` under run id `run_id`. Uses only truth
/// stream roles, so it never shares noise with a filter.
pub fn generate_truth_and_observations<M: ForwardModel>(
    model: &M,
    obs: &ObservationOperator,
    n_steps: usize,
    level: usize,
    run_id: u64,
) -> Result<TruthRealization> {
    let hier = model.hierarchy();
    hier.check_level(level)?;
    if hier.modes(level) > obs.n_modes() {
        return Err(Error::Dimension(format!(
            "truth level {level} needs {} modes, H covers {}",
            hier.modes(level),
            obs.n_modes()
        )));
    }
    let mut u = model.sample_initial(level, &NoiseStream::new(run_id, 0, level, 0, StreamRole::TruthInitial))?;
    let mut truth = Vec::with_capacity(n_steps + 1);
    let mut observations = Vec::with_capacity(n_steps);
    truth.push(u.clone());
    for n in 1..=n_steps {
        u = model.step(level, &u, &NoiseStream::new(run_id, n as u64, level, 0, StreamRole::TruthDynamics))?;
        let hu = obs.apply(u.coeffs());
        let y = obs.perturb(&hu, &NoiseStream::new(run_id, n as u64, level, 0, StreamRole::TruthObservation));
        truth.push(u.clone());
        observations.push(ObservationRecord { n, y });
    }
    Ok(TruthRealization { truth, observations })
}
