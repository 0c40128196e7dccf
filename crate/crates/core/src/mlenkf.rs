//! Multilevel ensemble Kalman filter.
//!
//! Level `l` holds `M_l` coupled pairs: a fine member at level `l` and a
//! coarse member at level `l - 1`. The level-0 coarse member is the zero
//! sentinel, stored as a zero-width block, so it contributes `phi(0)` and no
//! covariance without special cases. Pairs share their dynamics and
//! perturbation streams; one gain is formed per step from the telescoping
//! moments and applied to every level through row truncation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;

use crate::enkf::{check_record, Phase, StepRecord, UpdateDiagnostics};
use crate::error::{Error, Result};
use crate::experiment::CostLedger;
use crate::model::ForwardModel;
use crate::moments::{block_mean, correct_pairs, gain, ml_cross_cov, CrossCovariance, LevelBlocks, ParticleBlock};
use crate::noise::{NoiseFamily, StreamRole};
use crate::observable::Observable;
use crate::observation::{ObservationOperator, ObservationRecord};
use crate::spectral::SpectralField;

/// The `M_l` pairs of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelEnsemble {
    pub level: usize,
    /// Zero-width at level 0.
    pub coarse: ParticleBlock,
    pub fine: ParticleBlock,
}

impl LevelEnsemble {
    pub fn size(&self) -> usize {
        self.fine.count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelEnsemble {
    levels: Vec<LevelEnsemble>,
    step: usize,
    phase: Phase,
}

impl MultilevelEnsemble {
    /// Builds an ensemble from explicit pairs; `pairs[l]` lists
    /// `(coarse, fine)` with `coarse = None` exactly at level 0.
    pub fn from_pairs(pairs: &[Vec<(Option<SpectralField>, SpectralField)>]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let mut levels = Vec::with_capacity(pairs.len());
        for (l, level_pairs) in pairs.iter().enumerate() {
            if level_pairs.len() < 2 {
                return Err(Error::TooFewParticles(level_pairs.len()));
            }
            let fine: Vec<SpectralField> = level_pairs.iter().map(|(_, f)| f.clone()).collect();
            if fine.iter().any(|f| f.level() != l) {
                return Err(Error::Dimension(format!("fine members at level {l} have the wrong level")));
            }
            let fine = ParticleBlock::from_fields(&fine)?;
            let coarse = if l == 0 {
                if level_pairs.iter().any(|(c, _)| c.is_some()) {
                    return Err(Error::Dimension("level-0 pairs have no coarse member".into()));
                }
                ParticleBlock::zeros(0, level_pairs.len())
            } else {
                let c: Vec<SpectralField> = level_pairs
                    .iter()
                    .map(|(c, _)| c.clone().ok_or_else(|| Error::Dimension("coarse member missing above level 0".into())))
                    .collect::<Result<_>>()?;
                if c.iter().any(|f| f.level() + 1 != l) {
                    return Err(Error::Dimension(format!("coarse members at level {l} have the wrong level")));
                }
                ParticleBlock::from_fields(&c)?
            };
            levels.push(LevelEnsemble { level: l, coarse, fine });
        }
        Ok(Self { levels, step: 0, phase: Phase::Initial })
    }

    pub fn levels(&self) -> &[LevelEnsemble] {
        &self.levels
    }

    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(LevelEnsemble::size).collect()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Telescoping mean `sum_l E_(M_l)[v^l - v^(l-1)]` at level `L`.
    pub fn mean(&self) -> SpectralField {
        let n = self.levels.last().expect("at least one level").fine.modes();
        let mut acc = vec![0.0; n];
        for lv in &self.levels {
            let fine = block_mean(&lv.fine).expect("levels are never empty");
            for (a, x) in acc.iter_mut().zip(&fine) {
                *a += x;
            }
            let coarse = block_mean(&lv.coarse).expect("levels are never empty");
            for (a, x) in acc.iter_mut().zip(&coarse) {
                *a -= x;
            }
        }
        SpectralField::from_parts(self.max_level(), acc)
    }

    /// `sum_l (1/M_l) sum_i phi(v^l_i) - phi(v^(l-1)_i)`; the sentinel
    /// contributes `phi(0)`.
    pub fn estimate(&self, phi: &Observable) -> f64 {
        let zero = phi.eval(&[]);
        let mut total = 0.0;
        for lv in &self.levels {
            let mut sum = 0.0;
            for i in 0..lv.size() {
                let c = if lv.level == 0 { zero } else { phi.eval(lv.coarse.particle(i)) };
                sum += phi.eval(lv.fine.particle(i)) - c;
            }
            total += sum / lv.size() as f64;
        }
        total
    }

    /// Multilevel moments: telescoping mean and `R^ML`.
    pub fn moments(&self, obs: &ObservationOperator) -> Result<(SpectralField, CrossCovariance)> {
        let blocks = self.blocks();
        Ok((self.mean(), ml_cross_cov(&blocks, obs)?))
    }

    fn blocks(&self) -> Vec<LevelBlocks<'_>> {
        self.levels.iter().map(|lv| LevelBlocks { fine: &lv.fine, coarse: &lv.coarse }).collect()
    }
}

/// Commutation audit from a debug run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommutationAudit {
    pub checks: usize,
    pub violations: usize,
}

pub struct Mlenkf<'a, M: ForwardModel> {
    model: &'a M,
    obs: &'a ObservationOperator,
    run_id: u64,
    ledger: CostLedger,
    check_commutation: bool,
    audit: CommutationAudit,
}

impl<'a, M: ForwardModel> Mlenkf<'a, M> {
    pub fn new(model: &'a M, obs: &'a ObservationOperator, run_id: u64) -> Self {
        Self {
            model,
            obs,
            run_id,
            ledger: CostLedger::default(),
            check_commutation: false,
            audit: CommutationAudit::default(),
        }
    }

    /// Re-runs every coarse prediction from the projected fine input and
    /// compares it bit-for-bit with the projected fine output.
    pub fn with_commutation_check(mut self, on: bool) -> Self {
        self.check_commutation = on;
        self
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn audit(&self) -> CommutationAudit {
        self.audit
    }

    /// Pair `i` at level `l` draws its fine member from stream
    /// `(run, 0, l, i, Initial)`; the coarse member is its projection.
    pub fn initial_ensemble(&self, sizes: &[usize]) -> Result<MultilevelEnsemble> {
        if sizes.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        let hier = self.model.hierarchy();
        hier.check_level(sizes.len() - 1)?;
        if hier.modes(sizes.len() - 1) > self.obs.n_modes() {
            return Err(Error::Dimension(format!("level {} exceeds the modes covered by H", sizes.len() - 1)));
        }
        let mut levels = Vec::with_capacity(sizes.len());
        for (l, &size) in sizes.iter().enumerate() {
            if size < 2 {
                return Err(Error::TooFewParticles(size));
            }
            let n_fine = hier.modes(l);
            let n_coarse = if l == 0 { 0 } else { hier.modes(l - 1) };
            let mut fine = ParticleBlock::zeros(n_fine, size);
            let mut coarse = ParticleBlock::zeros(n_coarse, size);
            let family = NoiseFamily::new(self.run_id, 0, l, StreamRole::Initial);
            fine.par_particles_mut().zip(coarse.par_particles_mut()).for_each(|((i, f), (_, c))| {
                self.model.draw_initial(f, family.normals(i));
                c.copy_from_slice(&f[..c.len()]);
            });
            levels.push(LevelEnsemble { level: l, coarse, fine });
        }
        Ok(MultilevelEnsemble { levels, step: 0, phase: Phase::Initial })
    }

    pub fn predict(&mut self, mle: &mut MultilevelEnsemble) -> Result<()> {
        if mle.phase == Phase::Predicted {
            return Err(Error::Phase("predict called twice without an update"));
        }
        let step = mle.step as u64 + 1;
        let (model, run_id, check) = (self.model, self.run_id, self.check_commutation);
        let checks = AtomicUsize::new(0);
        let violations = AtomicUsize::new(0);
        for lv in &mut mle.levels {
            let l = lv.level;
            let family = NoiseFamily::new(run_id, step, l, StreamRole::Dynamics);
            lv.fine.par_particles_mut().zip(lv.coarse.par_particles_mut()).for_each(|((i, f), (_, c))| {
                let z = family.normals(i);
                if check && l > 0 {
                    let mut projected = f[..c.len()].to_vec();
                    model.advance(f, c, z.clone());
                    model.advance(&mut projected, &mut [], z);
                    checks.fetch_add(1, Ordering::Relaxed);
                    if projected.as_slice() != &f[..projected.len()] {
                        violations.fetch_add(1, Ordering::Relaxed);
                    }
                } else {
                    model.advance(f, c, z);
                }
            });
            let coarse_cost = if l == 0 { 0.0 } else { model.cost_per_step(l - 1) };
            self.ledger.predict_units += lv.size() as f64 * (model.cost_per_step(l) + coarse_cost);
        }
        self.audit.checks += checks.into_inner();
        self.audit.violations += violations.into_inner();
        mle.step += 1;
        mle.phase = Phase::Predicted;
        Ok(())
    }

    pub fn update(&mut self, mle: &mut MultilevelEnsemble, y: &ObservationRecord) -> Result<UpdateDiagnostics> {
        if mle.phase != Phase::Predicted {
            return Err(Error::Phase("update requires a predicted ensemble"));
        }
        check_record(y, mle.step, self.obs)?;
        let cross = ml_cross_cov(&mle.blocks(), self.obs)?;
        let g = gain(&cross, self.obs)?;
        let m = self.obs.m();
        let (run_id, obs, step) = (self.run_id, self.obs, mle.step as u64);
        for lv in mle.levels.iter_mut() {
            let family = NoiseFamily::new(run_id, step, lv.level, StreamRole::Perturbation);
            correct_pairs(&mut lv.fine, &mut lv.coarse, &g.k, obs, |i, out| {
                obs.perturb_into(&y.y, family.normals(i), out)
            });
            let work = (m * lv.fine.modes() * lv.size()) as f64;
            self.ledger.update_units += work;
            self.ledger.gain_units += 2.0 * work;
        }
        mle.phase = Phase::Updated;
        Ok(UpdateDiagnostics { min_eig_s: g.min_eig_s, truncated: g.truncated })
    }
}

#[derive(Debug, Clone)]
pub struct MlenkfRun {
    /// Record `0` is the initial ensemble, then one per assimilated observation.
    pub records: Vec<StepRecord>,
    pub ledger: CostLedger,
    pub sizes: Vec<usize>,
    pub audit: CommutationAudit,
}

impl MlenkfRun {
    pub fn final_estimate(&self) -> f64 {
        self.records.last().expect("runs always hold the initial record").estimate
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub check_commutation: bool,
}

pub fn run_mlenkf<M: ForwardModel>(
    model: &M,
    obs: &ObservationOperator,
    sizes: &[usize],
    run_id: u64,
    observations: &[ObservationRecord],
    phi: &Observable,
    options: RunOptions,
) -> Result<MlenkfRun> {
    let start = Instant::now();
    let mut filter = Mlenkf::new(model, obs, run_id).with_commutation_check(options.check_commutation);
    let mut mle = filter.initial_ensemble(sizes)?;
    let mut records = Vec::with_capacity(observations.len() + 1);
    records.push(StepRecord { n: 0, estimate: mle.estimate(phi), cost_cum: 0.0, mean: mle.mean(), update: None });
    for y in observations {
        filter.predict(&mut mle)?;
        let diag = filter.update(&mut mle, y)?;
        records.push(StepRecord {
            n: mle.step,
            estimate: mle.estimate(phi),
            cost_cum: filter.ledger.total(),
            mean: mle.mean(),
            update: Some(diag),
        });
    }
    let mut ledger = filter.ledger;
    ledger.wall_seconds = start.elapsed().as_secs_f64();
    Ok(MlenkfRun { records, ledger, sizes: sizes.to_vec(), audit: filter.audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enkf::run_enkf;
    use crate::model::{HeatModel, HeatModelParams};
    use crate::observation::{generate_truth_and_observations, scaled_identity, ObservationKind};
    use crate::spectral::LevelHierarchy;

    fn setup(max_level: usize, noise_scale: f64) -> (HeatModel, ObservationOperator) {
        let p = HeatModelParams { noise_scale, ..Default::default() };
        let h = LevelHierarchy::dyadic(max_level);
        let model = HeatModel::new(p, h).unwrap();
        let obs =
            ObservationOperator::new(&ObservationKind::default(), h.modes(max_level), scaled_identity(4, 0.01)).unwrap();
        (model, obs)
    }

    #[test]
    fn predict_ledger_example() {
        let (model, obs) = setup(3, 1.0);
        let mut f = Mlenkf::new(&model, &obs, 1);
        let mut mle = f.initial_ensemble(&[8, 4, 2]).unwrap();
        f.predict(&mut mle).unwrap();
        assert_eq!(f.ledger().predict_units, 32.0);
    }

    #[test]
    fn initial_pairs_agree_on_coarse_modes() {
        let (model, obs) = setup(3, 1.0);
        let f = Mlenkf::new(&model, &obs, 2);
        let mle = f.initial_ensemble(&[4, 4, 4, 4]).unwrap();
        for lv in mle.levels() {
            for i in 0..lv.size() {
                let c = lv.coarse.particle(i);
                assert_eq!(c, &lv.fine.particle(i)[..c.len()]);
            }
        }
        assert_eq!(mle.levels()[0].coarse.modes(), 0);
    }

    #[test]
    fn agreement_preserved_by_predict_and_commutation_holds() {
        let (model, obs) = setup(4, 1.0);
        let mut f = Mlenkf::new(&model, &obs, 3).with_commutation_check(true);
        let mut mle = f.initial_ensemble(&[6, 5, 4, 3, 2]).unwrap();
        f.predict(&mut mle).unwrap();
        for lv in mle.levels() {
            for i in 0..lv.size() {
                let c = lv.coarse.particle(i);
                assert_eq!(c, &lv.fine.particle(i)[..c.len()]);
            }
        }
        assert_eq!(f.audit(), CommutationAudit { checks: 5 + 4 + 3 + 2, violations: 0 });
    }

    #[test]
    fn level_zero_matches_enkf_bit_for_bit() {
        let (model, obs) = setup(0, 1.0);
        let (tm, tobs) = setup(2, 1.0);
        let truth = generate_truth_and_observations(&tm, &tobs, 6, 2, 77).unwrap();
        // Observation operator restricted to the filter's single mode.
        let phi = Observable::Linear(vec![0.7]);
        let e = run_enkf(&model, &obs, 0, 16, 5, &truth.observations, &phi).unwrap();
        let ml = run_mlenkf(&model, &obs, &[16], 5, &truth.observations, &phi, RunOptions::default()).unwrap();
        assert_eq!(e.records, ml.records);
        assert_eq!(e.ledger.predict_units, ml.ledger.predict_units);
        assert_eq!(e.ledger.update_units, ml.ledger.update_units);
    }

    #[test]
    fn level_zero_matches_enkf_on_finer_grid() {
        let (model, _) = setup(3, 1.0);
        let obs = ObservationOperator::new(&ObservationKind::ModePick { modes: vec![1] }, 1, scaled_identity(1, 0.1))
            .unwrap();
        let mut filter_e = crate::enkf::Enkf::new(&model, &obs, 9);
        let mut ens = filter_e.initial_ensemble(0, 7).unwrap();
        let mut filter_m = Mlenkf::new(&model, &obs, 9);
        let mut mle = filter_m.initial_ensemble(&[7]).unwrap();
        for n in 1..=5 {
            let y = ObservationRecord { n, y: vec![0.3 * n as f64] };
            filter_e.predict(&mut ens).unwrap();
            filter_m.predict(&mut mle).unwrap();
            let de = filter_e.update(&mut ens, &y).unwrap();
            let dm = filter_m.update(&mut mle, &y).unwrap();
            assert_eq!(de, dm);
            assert_eq!(ens.particles(), &mle.levels()[0].fine);
        }
    }

    #[test]
    fn linear_estimate_equals_inner_with_mean() {
        let (model, obs) = setup(4, 1.0);
        let truth = generate_truth_and_observations(&model, &obs, 4, 4, 8).unwrap();
        let w: Vec<f64> = (1..=16).map(|k| 1.0 / k as f64).collect();
        let phi = Observable::Linear(w.clone());
        let run = run_mlenkf(&model, &obs, &[40, 20, 10, 6, 3], 4, &truth.observations, &phi, RunOptions::default())
            .unwrap();
        for r in &run.records {
            let via_mean = crate::spectral::inner(&w, r.mean.coeffs());
            assert!((r.estimate - via_mean).abs() <= 1e-12 * via_mean.abs().max(1.0));
        }
    }

    #[test]
    fn vanishing_increments_reduce_to_level_zero() {
        let h = LevelHierarchy::dyadic(2);
        let f = |l: usize, v: f64| SpectralField::new(&h, l, vec![v; h.modes(l)]).unwrap();
        let pairs = vec![
            vec![(None, f(0, 1.0)), (None, f(0, 3.0))],
            vec![(Some(f(0, 0.5)), f(1, 0.5)), (Some(f(0, 0.5)), f(1, 0.5))],
        ];
        let mut mle = MultilevelEnsemble::from_pairs(&pairs).unwrap();
        // Level-1 pairs differ in mode 2 only, which is tail; make them agree.
        for p in 0..2 {
            mle.levels[1].fine.particle_mut(p)[1] = 0.0;
        }
        let mean = mle.mean();
        assert_eq!(mean.coeffs(), &[2.0, 0.0]);
        assert_eq!(mle.estimate(&Observable::Linear(vec![1.0])), 2.0);
    }

    #[test]
    fn zero_spread_update_is_identity_and_sentinel_stays_zero() {
        let (model, obs) = setup(2, 0.0);
        let h = *model.hierarchy();
        let f = |l: usize| SpectralField::new(&h, l, (0..h.modes(l)).map(|k| 1.0 / (k + 1) as f64).collect()).unwrap();
        let pairs = vec![
            vec![(None, f(0)), (None, f(0)), (None, f(0))],
            vec![(Some(f(0)), f(1)), (Some(f(0)), f(1))],
            vec![(Some(f(1)), f(2)), (Some(f(1)), f(2))],
        ];
        let mut mle = MultilevelEnsemble::from_pairs(&pairs).unwrap();
        let mut filter = Mlenkf::new(&model, &obs, 1);
        filter.predict(&mut mle).unwrap();
        let before = mle.clone();
        filter.update(&mut mle, &ObservationRecord { n: 1, y: vec![1.0; 4] }).unwrap();
        assert_eq!(before.levels(), mle.levels());
        assert_eq!(mle.levels()[0].coarse.modes(), 0);
    }

    #[test]
    fn run_records_and_ledger() {
        let (model, obs) = setup(3, 1.0);
        let phi = Observable::Norm;
        let empty = run_mlenkf(&model, &obs, &[8, 4, 2, 2], 1, &[], &phi, RunOptions::default()).unwrap();
        assert_eq!(empty.records.len(), 1);
        assert_eq!(empty.ledger.total(), 0.0);

        let t = generate_truth_and_observations(&model, &obs, 3, 3, 2).unwrap();
        let sizes = [8usize, 4, 2, 2];
        let run = run_mlenkf(&model, &obs, &sizes, 1, &t.observations, &phi, RunOptions::default()).unwrap();
        let m = 4.0;
        let mut predict = 0.0;
        let mut update = 0.0;
        for (l, &ml) in sizes.iter().enumerate() {
            let n = (1usize << l) as f64;
            let nc = if l == 0 { 0.0 } else { n / 2.0 };
            predict += ml as f64 * (n + nc);
            update += m * n * ml as f64;
        }
        assert_eq!(run.ledger.predict_units, 3.0 * predict);
        assert_eq!(run.ledger.update_units, 3.0 * update);
        assert_eq!(run.ledger.gain_units, 6.0 * update);
        assert!(run.records.iter().skip(1).all(|r| r.update.unwrap().min_eig_s >= obs.gamma_min() - 1e-10));
    }

    #[test]
    fn rejects_small_levels_and_wrong_phase() {
        let (model, obs) = setup(2, 1.0);
        let mut f = Mlenkf::new(&model, &obs, 1);
        assert!(matches!(f.initial_ensemble(&[4, 1]), Err(Error::TooFewParticles(1))));
        let mut mle = f.initial_ensemble(&[4, 2]).unwrap();
        assert!(f.update(&mut mle, &ObservationRecord { n: 0, y: vec![0.0; 4] }).is_err());
        f.predict(&mut mle).unwrap();
        assert!(f.predict(&mut mle).is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let (model, obs) = setup(4, 1.0);
        let t = generate_truth_and_observations(&model, &obs, 3, 4, 3).unwrap();
        let phi = Observable::Norm;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                run_mlenkf(&model, &obs, &[30, 12, 6, 4, 2], 7, &t.observations, &phi, RunOptions::default()).unwrap()
            })
        };
        assert_eq!(run(1).records, run(3).records);
    }
}
