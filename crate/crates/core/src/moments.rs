//! Sample moments, factored cross-covariances and Kalman gains.
//!
//! Ensembles are stored as particle-major [`ParticleBlock`]s. The
//! cross-covariance `R = C H*` is assembled from centered particles and
//! their observations at cost `O(m N M)`; the `N x N` covariance is never
//! formed. Particles are processed in fixed chunks of [`CHUNK`]; partial
//! sums are combined in chunk order, so results are bit-reproducible
//! regardless of thread count.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::observation::ObservationOperator;
use crate::spectral::SpectralField;

/// Particles per work unit of the blocked kernels.
pub const CHUNK: usize = 1024;

/// `count` particles of `modes` coefficients each, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBlock {
    modes: usize,
    count: usize,
    data: Vec<f64>,
}

impl ParticleBlock {
    pub fn zeros(modes: usize, count: usize) -> Self {
        Self { modes, count, data: vec![0.0; modes * count] }
    }

    pub fn from_fields(fields: &[SpectralField]) -> Result<Self> {
        let first = fields.first().ok_or(Error::EmptyEnsemble)?;
        let modes = first.len();
        let mut data = Vec::with_capacity(modes * fields.len());
        for f in fields {
            if f.level() != first.level() {
                return Err(Error::LevelMismatch { expected: first.level(), actual: f.level() });
            }
            data.extend_from_slice(f.coeffs());
        }
        Ok(Self { modes, count: fields.len(), data })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.data[i * self.modes..(i + 1) * self.modes]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.modes..(i + 1) * self.modes]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.count).map(move |i| self.particle(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Parallel mutable iteration over `(index, particle)`. Zero-width
    /// particles yield empty slices.
    pub fn par_particles_mut(&mut self) -> impl IndexedParallelIterator<Item = (usize, &mut [f64])> + '_ {
        let chunks: Vec<&mut [f64]> = if self.modes == 0 {
            (0..self.count).map(|_| Default::default()).collect()
        } else {
            self.data.chunks_mut(self.modes).collect()
        };
        chunks.into_par_iter().enumerate()
    }

    pub fn to_fields(&self, level: usize) -> Vec<SpectralField> {
        self.iter().map(|p| SpectralField::from_parts(level, p.to_vec())).collect()
    }

    fn chunk_count(&self) -> usize {
        self.count.div_ceil(CHUNK)
    }

    /// Mutable [`CHUNK`]-particle slices; empty for zero-width blocks.
    fn chunks_mut(&mut self) -> Vec<&mut [f64]> {
        let n = self.chunk_count();
        if self.modes == 0 {
            (0..n).map(|_| Default::default()).collect()
        } else {
            self.data.chunks_mut(self.modes * CHUNK).collect()
        }
    }
}

/// Column-major operand with explicit row and column strides.
#[derive(Clone, Copy)]
struct Strided<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "gemm operand out of bounds");
    }
}

/// `c = a b + beta c` with `a: rows x inner`, `b: inner x cols`.
fn gemm(rows: usize, inner: usize, cols: usize, a: Strided<'_>, b: Strided<'_>, beta: f64, c: &mut [f64], c_cs: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    check_extent(a.data.len(), rows, inner, a.rs, a.cs);
    check_extent(b.data.len(), inner, cols, b.rs, b.cs);
    check_extent(c.len(), rows, cols, 1, c_cs);
    // SAFETY: every operand's extent was checked against its slice above, and
    // `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inner,
            cols,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            1,
            c_cs as isize,
        );
    }
}

/// `R = C H*` (`N x m`) and `H R = H C H*` (`m x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCovariance {
    pub r: DMatrix<f64>,
    pub hr: DMatrix<f64>,
}

impl CrossCovariance {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { r: DMatrix::zeros(n, m), hr: DMatrix::zeros(m, m) }
    }

    pub(crate) fn symmetrize(&mut self) {
        self.hr = symmetrize(&self.hr);
    }
}

/// Kalman gain `K = R S^-1` with innovation covariance `S`.
#[derive(Debug, Clone)]
pub struct GainOperator {
    pub k: DMatrix<f64>,
    pub s: DMatrix<f64>,
    /// Smallest eigenvalue of `S`.
    pub min_eig_s: f64,
    /// Number of negative eigenvalues of `H R` discarded.
    pub truncated: usize,
}

/// Coefficient-wise ensemble mean, accumulated in particle order.
pub fn block_mean(block: &ParticleBlock) -> Result<Vec<f64>> {
    if block.count == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut acc = vec![0.0; block.modes];
    for p in block.iter() {
        for (a, x) in acc.iter_mut().zip(p) {
            *a += x;
        }
    }
    let inv = block.count as f64;
    acc.iter_mut().for_each(|a| *a /= inv);
    Ok(acc)
}

pub fn sample_mean(fields: &[SpectralField]) -> Result<SpectralField> {
    let block = ParticleBlock::from_fields(fields)?;
    Ok(SpectralField::from_parts(fields[0].level(), block_mean(&block)?))
}

/// `H v_i` for every particle, particle-major (`count x m`).
pub fn observe_block(block: &ParticleBlock, obs: &ObservationOperator) -> Vec<f64> {
    let (m, n) = (obs.m(), block.modes);
    let mut hv = vec![0.0; m * block.count];
    if n == 0 {
        return hv;
    }
    hv.par_chunks_mut(m * CHUNK).zip(block.data.par_chunks(n * CHUNK)).for_each(|(out, v)| {
        observe_chunk(obs, n, v, out);
    });
    hv
}

/// Particle width below which plain loops beat the blocked product.
const GEMM_MIN_MODES: usize = 16;

/// `out = H v` for a slice of particles with `n` modes each.
fn observe_chunk(obs: &ObservationOperator, n: usize, v: &[f64], out: &mut [f64]) {
    let m = obs.m();
    if n < GEMM_MIN_MODES {
        for (p, o) in v.chunks_exact(n).zip(out.chunks_exact_mut(m)) {
            obs.apply_into(p, o);
        }
        return;
    }
    let h = Strided { data: &obs.matrix().as_slice()[..n * m], rs: 1, cs: m };
    gemm(m, n, v.len() / n, h, Strided { data: v, rs: 1, cs: n }, 0.0, out, m);
}

/// Per-chunk partial sums of [`block_cross_cov`].
struct Partial {
    v_sum: Vec<f64>,
    e_sum: Vec<f64>,
    /// `sum_i v_i e_i^T`, `n x m`.
    ve: Vec<f64>,
    /// `sum_i e_i e_i^T`, `m x m`.
    ee: Vec<f64>,
}

/// Unsymmetrized unbiased cross-covariance of a block, padded to `n_rows`
/// state rows. One pass: observations are shifted by those of particle 0,
/// `e_i = H v_i - H v_0`, so `R = (sum v_i e_i^T - M mu ebar^T) / (M - 1)` and
/// `HR = (sum e_i e_i^T - M ebar ebar^T) / (M - 1)` equal the centered
/// forms and vanish exactly for zero spread.
pub(crate) fn block_cross_cov(block: &ParticleBlock, obs: &ObservationOperator, n_rows: usize) -> Result<CrossCovariance> {
    if block.count < 2 {
        return Err(Error::TooFewParticles(block.count));
    }
    let (n, m, count) = (block.modes, obs.m(), block.count);
    let mut out = CrossCovariance::zeros(n_rows, m);
    if n == 0 {
        return Ok(out);
    }
    let h0 = obs.apply(block.particle(0));
    let partials: Vec<Partial> = block
        .data
        .par_chunks(n * CHUNK)
        .map(|v| {
            let cols = v.len() / n;
            let mut e = vec![0.0; m * cols];
            observe_chunk(obs, n, v, &mut e);
            let mut e_sum = vec![0.0; m];
            for col in e.chunks_exact_mut(m) {
                for ((x, h), s) in col.iter_mut().zip(&h0).zip(e_sum.iter_mut()) {
                    *x -= h;
                    *s += *x;
                }
            }
            let mut v_sum = vec![0.0; n];
            for p in v.chunks_exact(n) {
                v_sum.iter_mut().zip(p).for_each(|(a, x)| *a += x);
            }
            let e_t = Strided { data: &e, rs: m, cs: 1 };
            let mut ve = vec![0.0; n * m];
            gemm(n, cols, m, Strided { data: v, rs: 1, cs: n }, e_t, 0.0, &mut ve, n);
            let mut ee = vec![0.0; m * m];
            gemm(m, cols, m, Strided { data: &e, rs: 1, cs: m }, e_t, 0.0, &mut ee, m);
            Partial { v_sum, e_sum, ve, ee }
        })
        .collect();
    let mut total = Partial { v_sum: vec![0.0; n], e_sum: vec![0.0; m], ve: vec![0.0; n * m], ee: vec![0.0; m * m] };
    for p in &partials {
        total.v_sum.iter_mut().zip(&p.v_sum).for_each(|(a, x)| *a += x);
        total.e_sum.iter_mut().zip(&p.e_sum).for_each(|(a, x)| *a += x);
        total.ve.iter_mut().zip(&p.ve).for_each(|(a, x)| *a += x);
        total.ee.iter_mut().zip(&p.ee).for_each(|(a, x)| *a += x);
    }
    let inv_count = 1.0 / count as f64;
    let scale = (count - 1) as f64;
    for c in 0..m {
        let e_sum = total.e_sum[c];
        for j in 0..n {
            out.r[(j, c)] = (total.ve[c * n + j] - total.v_sum[j] * inv_count * e_sum) / scale;
        }
        for c2 in 0..m {
            out.hr[(c2, c)] = (total.ee[c * m + c2] - total.e_sum[c2] * inv_count * e_sum) / scale;
        }
    }
    Ok(out)
}

/// Single-level cross-covariance `R = Cov_M[v, Hv]`, `HR = Cov_M[Hv, Hv]`.
pub fn cross_cov(fields: &[SpectralField], obs: &ObservationOperator) -> Result<CrossCovariance> {
    let block = ParticleBlock::from_fields(fields)?;
    cross_cov_block(&block, obs)
}

pub fn cross_cov_block(block: &ParticleBlock, obs: &ObservationOperator) -> Result<CrossCovariance> {
    check_modes(block.modes, obs)?;
    let mut cc = block_cross_cov(block, obs, block.modes)?;
    cc.symmetrize();
    Ok(cc)
}

/// One level of a multilevel ensemble: fine and coarse particles of the
/// same pairs.
pub struct LevelBlocks<'a> {
    pub fine: &'a ParticleBlock,
    pub coarse: &'a ParticleBlock,
}

/// Telescoping sum `sum_l Cov[v^l, Hv^l] - Cov[v^(l-1), Hv^(l-1)]` in
/// level-`L` coordinates, accumulated level by level.
pub fn ml_cross_cov(levels: &[LevelBlocks<'_>], obs: &ObservationOperator) -> Result<CrossCovariance> {
    let top = levels.last().ok_or(Error::EmptyEnsemble)?;
    let n_top = top.fine.modes;
    check_modes(n_top, obs)?;
    let mut total = CrossCovariance::zeros(n_top, obs.m());
    for lv in levels {
        if lv.fine.count != lv.coarse.count {
            return Err(Error::Dimension("fine and coarse members must pair up".into()));
        }
        let fine = block_cross_cov(lv.fine, obs, lv.fine.modes)?;
        let coarse = block_cross_cov(lv.coarse, obs, lv.coarse.modes)?;
        add_rows(&mut total.r, &fine.r, 1.0);
        total.hr += &fine.hr;
        add_rows(&mut total.r, &coarse.r, -1.0);
        total.hr -= &coarse.hr;
    }
    total.symmetrize();
    Ok(total)
}

fn add_rows(acc: &mut DMatrix<f64>, part: &DMatrix<f64>, sign: f64) {
    let n = part.nrows();
    let stride = acc.nrows();
    for c in 0..part.ncols() {
        let dst = &mut acc.as_mut_slice()[c * stride..c * stride + n];
        for (d, s) in dst.iter_mut().zip(&part.as_slice()[c * n..(c + 1) * n]) {
            if sign > 0.0 {
                *d += s;
            } else {
                *d -= s;
            }
        }
    }
}

fn check_modes(n: usize, obs: &ObservationOperator) -> Result<()> {
    if n > obs.n_modes() {
        return Err(Error::Dimension(format!("state has {n} modes but H covers {}", obs.n_modes())));
    }
    Ok(())
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Drops the negative part of a symmetric matrix. Returns the PSD matrix
/// `sum_(lambda_i >= 0) lambda_i q_i q_i^T` and the number of eigenvalues
/// removed. Input without negative eigenvalues is returned as is.
pub fn psd_truncate(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    if !a.is_square() {
        return Err(Error::Dimension("psd_truncate needs a square matrix".into()));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("matrix passed to psd_truncate"));
    }
    let sym = symmetrize(a);
    let eig = SymmetricEigen::new(sym.clone());
    let negative = eig.eigenvalues.iter().filter(|&&l| l < 0.0).count();
    if negative == 0 {
        return Ok((sym, 0));
    }
    let n = sym.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda >= 0.0 {
            let q = eig.eigenvectors.column(i);
            out += (q * q.transpose()) * lambda;
        }
    }
    Ok((symmetrize(&out), negative))
}

/// `K = R S^-1` with `S = psd_truncate(HR) + Gamma`. `R` itself is not
/// truncated.
pub fn gain(cross: &CrossCovariance, obs: &ObservationOperator) -> Result<GainOperator> {
    let (hr, truncated) = psd_truncate(&cross.hr)?;
    let s = hr + obs.gamma();
    let chol = s
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("innovation covariance"))?;
    let k = chol.solve(&cross.r.transpose()).transpose();
    let min_eig_s = s.clone().symmetric_eigenvalues().min();
    Ok(GainOperator { k, s, min_eig_s, truncated })
}

/// Analysis step for every pair: `v_i += P K (y_tilde_i - H v_i)` on the
/// fine particles and, unless zero-width, the coarse ones, where `P` keeps
/// the leading rows of `K`. `perturb(i, out)` writes pair `i`'s perturbed
/// observation; both members of a pair share it.
pub(crate) fn correct_pairs<F>(
    fine: &mut ParticleBlock,
    coarse: &mut ParticleBlock,
    k: &DMatrix<f64>,
    obs: &ObservationOperator,
    perturb: F,
) where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let m = obs.m();
    let (count, nf, nc, stride) = (fine.count, fine.modes, coarse.modes, k.nrows());
    assert!(coarse.count == count && nc <= nf && nf <= stride && k.ncols() == m);
    let kd = k.as_slice();
    let fine_chunks = fine.chunks_mut();
    let coarse_chunks = coarse.chunks_mut();
    fine_chunks.into_par_iter().zip(coarse_chunks).enumerate().for_each(|(ci, (f, c))| {
        let first = ci * CHUNK;
        let cols = CHUNK.min(count - first);
        let mut y_tilde = vec![0.0; m * cols];
        for (i, out) in y_tilde.chunks_exact_mut(m).enumerate() {
            perturb(first + i, out);
        }
        let mut innov = vec![0.0; m * cols];
        for (members, v) in [(nf, f), (nc, c)] {
            if members == 0 {
                continue;
            }
            observe_chunk(obs, members, v, &mut innov);
            innov.iter_mut().zip(&y_tilde).for_each(|(d, y)| *d = y - *d);
            if members < GEMM_MIN_MODES {
                for (p, d) in v.chunks_exact_mut(members).zip(innov.chunks_exact(m)) {
                    for (c, &dc) in d.iter().enumerate() {
                        for (x, kc) in p.iter_mut().zip(&kd[c * stride..c * stride + members]) {
                            *x += kc * dc;
                        }
                    }
                }
                continue;
            }
            let gain_rows = Strided { data: kd, rs: 1, cs: stride };
            gemm(members, m, cols, gain_rows, Strided { data: &innov, rs: 1, cs: m }, 1.0, v, members);
        }
    });
}
