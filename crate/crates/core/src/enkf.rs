//! Single-level ensemble Kalman filter with perturbed observations.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::CostLedger;
use crate::model::ForwardModel;
use crate::moments::{block_mean, correct_pairs, cross_cov_block, gain, ParticleBlock};
use crate::noise::{NoiseFamily, StreamRole};
use crate::observable::Observable;
use crate::observation::{ObservationOperator, ObservationRecord};
use crate::spectral::SpectralField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Predicted,
    Updated,
}

/// `M` particles at resolution level `level` after `step` assimilation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    level: usize,
    particles: ParticleBlock,
    step: usize,
    phase: Phase,
}

impl Ensemble {
    pub fn from_fields(fields: &[SpectralField]) -> Result<Self> {
        let particles = ParticleBlock::from_fields(fields)?;
        if particles.count() < 2 {
            return Err(Error::TooFewParticles(particles.count()));
        }
        Ok(Self { level: fields[0].level(), particles, step: 0, phase: Phase::Initial })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn size(&self) -> usize {
        self.particles.count()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn particles(&self) -> &ParticleBlock {
        &self.particles
    }

    pub fn fields(&self) -> Vec<SpectralField> {
        self.particles.to_fields(self.level)
    }

    pub fn mean(&self) -> SpectralField {
        SpectralField::from_parts(self.level, block_mean(&self.particles).expect("ensemble is never empty"))
    }

    /// `(1/M) sum_i phi(v_i)`.
    pub fn estimate(&self, phi: &Observable) -> f64 {
        let total: f64 = self.particles.iter().map(|p| phi.eval(p)).sum();
        total / self.size() as f64
    }
}

/// Outcome of one analysis step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateDiagnostics {
    pub min_eig_s: f64,
    pub truncated: usize,
}

/// Per-step output of a filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub estimate: f64,
    pub cost_cum: f64,
    pub mean: SpectralField,
    /// `None` for the initial record.
    pub update: Option<UpdateDiagnostics>,
}

/// EnKF driver bound to a model, an observation operator and a run id.
pub struct Enkf<'a, M: ForwardModel> {
    model: &'a M,
    obs: &'a ObservationOperator,
    run_id: u64,
    ledger: CostLedger,
}

impl<'a, M: ForwardModel> Enkf<'a, M> {
    pub fn new(model: &'a M, obs: &'a ObservationOperator, run_id: u64) -> Self {
        Self { model, obs, run_id, ledger: CostLedger::default() }
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    /// I.i.d. draws from `N(0, P_L C0 P_L)`.
    pub fn initial_ensemble(&self, level: usize, size: usize) -> Result<Ensemble> {
        self.model.hierarchy().check_level(level)?;
        if size < 2 {
            return Err(Error::TooFewParticles(size));
        }
        let n = self.model.hierarchy().modes(level);
        if n > self.obs.n_modes() {
            return Err(Error::Dimension(format!("level {level} exceeds the modes covered by H")));
        }
        let mut particles = ParticleBlock::zeros(n, size);
        let family = NoiseFamily::new(self.run_id, 0, level, StreamRole::Initial);
        particles.par_particles_mut().for_each(|(i, p)| {
            self.model.draw_initial(p, family.normals(i));
        });
        Ok(Ensemble { level, particles, step: 0, phase: Phase::Initial })
    }

    pub fn predict(&mut self, ens: &mut Ensemble) -> Result<()> {
        if ens.phase == Phase::Predicted {
            return Err(Error::Phase("predict called twice without an update"));
        }
        let step = ens.step as u64 + 1;
        let model = self.model;
        let family = NoiseFamily::new(self.run_id, step, ens.level, StreamRole::Dynamics);
        ens.particles.par_particles_mut().for_each(|(i, p)| {
            model.advance(p, &mut [], family.normals(i));
        });
        ens.step += 1;
        ens.phase = Phase::Predicted;
        self.ledger.predict_units += ens.size() as f64 * model.cost_per_step(ens.level);
        Ok(())
    }

    pub fn update(&mut self, ens: &mut Ensemble, y: &ObservationRecord) -> Result<UpdateDiagnostics> {
        if ens.phase != Phase::Predicted {
            return Err(Error::Phase("update requires a predicted ensemble"));
        }
        check_record(y, ens.step, self.obs)?;
        let cross = cross_cov_block(&ens.particles, self.obs)?;
        let g = gain(&cross, self.obs)?;
        let m = self.obs.m();
        let obs = self.obs;
        let family = NoiseFamily::new(self.run_id, ens.step as u64, ens.level, StreamRole::Perturbation);
        let mut none = ParticleBlock::zeros(0, ens.size());
        correct_pairs(&mut ens.particles, &mut none, &g.k, obs, |i, out| {
            obs.perturb_into(&y.y, family.normals(i), out)
        });
        ens.phase = Phase::Updated;
        let work = (m * ens.particles.modes() * ens.size()) as f64;
        self.ledger.gain_units += 2.0 * work;
        self.ledger.update_units += work;
        Ok(UpdateDiagnostics { min_eig_s: g.min_eig_s, truncated: g.truncated })
    }
}

pub(crate) fn check_record(y: &ObservationRecord, step: usize, obs: &ObservationOperator) -> Result<()> {
    if y.y.len() != obs.m() {
        return Err(Error::Dimension(format!("observation has {} entries, H has {} rows", y.y.len(), obs.m())));
    }
    if y.n != step {
        return Err(Error::Dimension(format!("observation time {} applied at step {step}", y.n)));
    }
    if y.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EnkfRun {
    /// Record `0` is the initial ensemble, then one per assimilated observation.
    pub records: Vec<StepRecord>,
    pub ledger: CostLedger,
}

impl EnkfRun {
    pub fn final_estimate(&self) -> f64 {
        self.records.last().expect("runs always hold the initial record").estimate
    }
}

/// Alternating predict/update over all observations.
pub fn run_enkf<M: ForwardModel>(
    model: &M,
    obs: &ObservationOperator,
    level: usize,
    size: usize,
    run_id: u64,
    observations: &[ObservationRecord],
    phi: &Observable,
) -> Result<EnkfRun> {
    let start = Instant::now();
    let mut filter = Enkf::new(model, obs, run_id);
    let mut ens = filter.initial_ensemble(level, size)?;
    let mut records = Vec::with_capacity(observations.len() + 1);
    records.push(StepRecord { n: 0, estimate: ens.estimate(phi), cost_cum: 0.0, mean: ens.mean(), update: None });
    for y in observations {
        filter.predict(&mut ens)?;
        let diag = filter.update(&mut ens, y)?;
        records.push(StepRecord {
            n: ens.step,
            estimate: ens.estimate(phi),
            cost_cum: filter.ledger.total(),
            mean: ens.mean(),
            update: Some(diag),
        });
    }
    let mut ledger = filter.ledger;
    ledger.wall_seconds = start.elapsed().as_secs_f64();
    Ok(EnkfRun { records, ledger })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeatModel, HeatModelParams};
    use crate::observation::{scaled_identity, ObservationKind};
    use crate::spectral::LevelHierarchy;

    fn setup(noise_scale: f64, gamma: f64) -> (HeatModel, ObservationOperator) {
        let p = HeatModelParams { noise_scale, ..Default::default() };
        let model = HeatModel::new(p, LevelHierarchy::dyadic(4)).unwrap();
        let obs = ObservationOperator::new(&ObservationKind::default(), 16, scaled_identity(4, gamma)).unwrap();
        (model, obs)
    }

    #[test]
    fn deterministic_predict_decays_modes() {
        let (model, obs) = setup(0.0, 0.01);
        let mut f = Enkf::new(&model, &obs, 1);
        let mut ens = f.initial_ensemble(2, 2).unwrap();
        let before = ens.fields();
        f.predict(&mut ens).unwrap();
        for (b, a) in before.iter().zip(ens.fields()) {
            for (k, (x, y)) in b.coeffs().iter().zip(a.coeffs()).enumerate() {
                assert_eq!(*y, model.params().decay(k + 1) * x);
            }
        }
        assert!(f.predict(&mut ens).is_err());
        assert_eq!(f.ledger().predict_units, 2.0 * 4.0);
    }

    #[test]
    fn determinism_across_thread_counts() {
        let (model, obs) = setup(1.0, 0.01);
        let t = crate::observation::generate_truth_and_observations(&model, &obs, 3, 4, 5).unwrap();
        let phi = Observable::Norm;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_enkf(&model, &obs, 3, 33, 9, &t.observations, &phi).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn zero_spread_update_is_identity() {
        let (model, obs) = setup(0.0, 0.01);
        let h = *model.hierarchy();
        let u = SpectralField::new(&h, 2, vec![0.5, -0.2, 0.1, 0.3]).unwrap();
        let mut ens = Ensemble::from_fields(&[u.clone(), u.clone(), u.clone()]).unwrap();
        let mut f = Enkf::new(&model, &obs, 1);
        f.predict(&mut ens).unwrap();
        let predicted = ens.clone();
        f.update(&mut ens, &ObservationRecord { n: 1, y: vec![1.0; 4] }).unwrap();
        assert_eq!(ens.particles(), predicted.particles());
    }

    #[test]
    fn uninformative_data_barely_moves_particles() {
        // Gain ~ C/Gamma and perturbations ~ sqrt(Gamma): shift ~ 1e-3.
        let (model, obs) = setup(1.0, 1e6);
        let mut f = Enkf::new(&model, &obs, 3);
        let mut ens = f.initial_ensemble(3, 20).unwrap();
        f.predict(&mut ens).unwrap();
        let predicted = ens.clone();
        f.update(&mut ens, &ObservationRecord { n: 1, y: vec![0.5; 4] }).unwrap();
        for (a, b) in predicted.particles().iter().zip(ens.particles().iter()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn update_checks_observation_time_and_size() {
        let (model, obs) = setup(1.0, 0.01);
        let mut f = Enkf::new(&model, &obs, 3);
        let mut ens = f.initial_ensemble(2, 4).unwrap();
        assert!(matches!(f.update(&mut ens, &ObservationRecord { n: 0, y: vec![0.0; 4] }), Err(Error::Phase(_))));
        f.predict(&mut ens).unwrap();
        assert!(f.update(&mut ens, &ObservationRecord { n: 2, y: vec![0.0; 4] }).is_err());
        assert!(f.update(&mut ens, &ObservationRecord { n: 1, y: vec![0.0; 3] }).is_err());
    }

    #[test]
    fn estimate_examples() {
        let h = LevelHierarchy::dyadic(2);
        let a = SpectralField::new(&h, 1, vec![3.0, 4.0]).unwrap();
        let z = SpectralField::new(&h, 1, vec![0.0, 0.0]).unwrap();
        let ens = Ensemble::from_fields(&[a.clone(), z]).unwrap();
        assert_eq!(ens.estimate(&Observable::Norm), 2.5);
        let w = Observable::Linear(vec![0.5, -1.0]);
        let constant = Ensemble::from_fields(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(constant.estimate(&w), 1.5 - 4.0);
        let w2 = Observable::Linear(vec![2.0, 1.0]);
        let combo = Observable::Linear(vec![0.5 * 3.0 + 2.0 * -2.0, -3.0 + 1.0 * -2.0]);
        let lhs = ens.estimate(&combo);
        let rhs = 3.0 * ens.estimate(&w) - 2.0 * ens.estimate(&w2);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn empty_run_and_ledger_arithmetic() {
        let (model, obs) = setup(1.0, 0.01);
        let phi = Observable::Norm;
        let run = run_enkf(&model, &obs, 3, 8, 1, &[], &phi).unwrap();
        assert_eq!(run.records.len(), 1);
        assert_eq!(run.ledger.total(), 0.0);

        let t = crate::observation::generate_truth_and_observations(&model, &obs, 5, 4, 2).unwrap();
        let run = run_enkf(&model, &obs, 3, 8, 1, &t.observations, &phi).unwrap();
        assert_eq!(run.records.len(), 6);
        assert_eq!(run.ledger.predict_units, 5.0 * 8.0 * 8.0);
        assert_eq!(run.ledger.update_units, 5.0 * 4.0 * 8.0 * 8.0);
        assert_eq!(run.ledger.gain_units, 2.0 * 5.0 * 4.0 * 8.0 * 8.0);
        assert_eq!(run.records[5].cost_cum, run.ledger.total());
    }

    #[test]
    fn estimate_is_order_independent() {
        let (model, obs) = setup(1.0, 0.01);
        let f = Enkf::new(&model, &obs, 4);
        let ens = f.initial_ensemble(3, 10).unwrap();
        let mut fields = ens.fields();
        fields.reverse();
        let rev = Ensemble::from_fields(&fields).unwrap();
        let phi = Observable::Linear(vec![1.0, -0.5, 0.25]);
        assert!((ens.estimate(&phi) - rev.estimate(&phi)).abs() < 1e-14);
        for (a, b) in ens.mean().coeffs().iter().zip(rev.mean().coeffs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
