//! Accuracy-driven schedules, cost accounting and convergence studies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::enkf::run_enkf;
use crate::error::{Error, Result};
use crate::kf::run_reference;
use crate::mlenkf::{run_mlenkf, RunOptions};
use crate::model::{ForwardModel, HeatModel, HeatModelParams, RateConstants};
use crate::noise::derive_run_id;
use crate::observable::ObservableSpec;
use crate::observation::{generate_truth_and_observations, scaled_identity, ObservationKind, ObservationOperator};
use crate::spectral::LevelHierarchy;

/// Cumulative cost counters in model-evaluation units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub predict_units: f64,
    pub update_units: f64,
    pub gain_units: f64,
    pub wall_seconds: f64,
}

impl CostLedger {
    pub fn total(&self) -> f64 {
        self.predict_units + self.update_units + self.gain_units
    }

    /// Unit counters multiplied by `factor`; wall time is dropped.
    pub fn scaled(&self, factor: f64) -> CostLedger {
        CostLedger {
            predict_units: self.predict_units * factor,
            update_units: self.update_units * factor,
            gain_units: self.gain_units * factor,
            wall_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BetaGt,
    BetaEq,
    BetaLt,
}

impl Regime {
    pub fn classify(beta: f64, d: usize, gamma: f64) -> Self {
        let dg = d as f64 * gamma;
        if (beta - dg).abs() <= 1e-12 * beta.max(dg) {
            Regime::BetaEq
        } else if beta > dg {
            Regime::BetaGt
        } else {
            Regime::BetaLt
        }
    }
}

/// Ceiling that ignores floating-point noise just above an integer.
fn ceil_tol(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Level and ensemble-size schedule for a target accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonPlan {
    pub epsilon: f64,
    pub beta: f64,
    pub gamma: f64,
    pub d: usize,
    pub kappa: usize,
    /// Finest level `L`.
    pub max_level: usize,
    /// `M_l` for `l = 0..=L`.
    pub sizes: Vec<usize>,
    pub regime: Regime,
    /// `None` for explicit plans.
    pub m_const: Option<f64>,
    /// Single-level ensemble size at level `L`.
    pub enkf_m: usize,
}

impl EpsilonPlan {
    pub fn from_epsilon(epsilon: f64, rates: RateConstants, d: usize, kappa: usize, m_const: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        check_rates(rates, d, kappa, m_const)?;
        let RateConstants { beta, gamma } = rates;
        let k = kappa as f64;
        let max_level = ceil_tol(2.0 * (1.0 / epsilon).ln() / k.ln() / beta) as usize;
        let regime = Regime::classify(beta, d, gamma);
        let dg = d as f64 * gamma;
        let h = |l: usize| k.powf(-(l as f64) / d as f64);
        let h_l = h(max_level);
        let sizes = (0..=max_level)
            .map(|l| {
                let lead = h(l).powf((beta + dg) / 2.0);
                let f = match regime {
                    Regime::BetaGt => lead * h_l.powf(-beta),
                    Regime::BetaEq => lead * (max_level * max_level) as f64 * h_l.powf(-beta),
                    Regime::BetaLt => lead * h_l.powf(-(beta + dg) / 2.0),
                };
                (ceil_tol(m_const * f) as usize).max(2)
            })
            .collect();
        let enkf_m = (ceil_tol(m_const / (epsilon * epsilon)) as usize).max(2);
        Ok(Self { epsilon, beta, gamma, d, kappa, max_level, sizes, regime, m_const: Some(m_const), enkf_m })
    }

    /// A plan with hand-picked sizes; `epsilon` is set to the accuracy the
    /// level would be chosen for, `kappa^(-beta L / 2)`.
    pub fn explicit(sizes: Vec<usize>, enkf_m: usize, rates: RateConstants, d: usize, kappa: usize) -> Result<Self> {
        check_rates(rates, d, kappa, 1.0)?;
        if sizes.is_empty() {
            return Err(Error::InvalidConfig("explicit plan needs at least one level".into()));
        }
        if let Some(&m) = sizes.iter().chain(std::iter::once(&enkf_m)).find(|&&m| m < 2) {
            return Err(Error::InvalidConfig(format!("ensemble sizes must be >= 2, got {m}")));
        }
        let max_level = sizes.len() - 1;
        Ok(Self {
            epsilon: (kappa as f64).powf(-rates.beta * max_level as f64 / 2.0),
            beta: rates.beta,
            gamma: rates.gamma,
            d,
            kappa,
            max_level,
            sizes,
            regime: Regime::classify(rates.beta, d, rates.gamma),
            m_const: None,
            enkf_m,
        })
    }

    fn modes(&self, level: usize) -> f64 {
        (self.kappa as f64).powi(level as i32)
    }

    fn step_cost(&self, level: usize) -> f64 {
        self.modes(level).powf(self.gamma)
    }

    /// Ledger increment of one multilevel predict/update step with `m`
    /// observations.
    pub fn ml_ledger_per_step(&self, m: usize) -> CostLedger {
        let mut ledger = CostLedger::default();
        for (l, &ml) in self.sizes.iter().enumerate() {
            let coarse = if l == 0 { 0.0 } else { self.step_cost(l - 1) };
            ledger.predict_units += ml as f64 * (self.step_cost(l) + coarse);
            let work = m as f64 * self.modes(l) * ml as f64;
            ledger.update_units += work;
            ledger.gain_units += 2.0 * work;
        }
        ledger
    }

    /// Ledger increment of one single-level step at level `L`.
    pub fn enkf_ledger_per_step(&self, m: usize) -> CostLedger {
        let work = m as f64 * self.modes(self.max_level) * self.enkf_m as f64;
        CostLedger {
            predict_units: self.enkf_m as f64 * self.step_cost(self.max_level),
            update_units: work,
            gain_units: 2.0 * work,
            wall_seconds: 0.0,
        }
    }
}

fn check_rates(rates: RateConstants, d: usize, kappa: usize, m_const: f64) -> Result<()> {
    if !(rates.beta > 0.0 && rates.gamma > 0.0 && rates.beta.is_finite() && rates.gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!("rates must be positive, got {rates:?}")));
    }
    if d == 0 || kappa < 2 {
        return Err(Error::InvalidConfig(format!("need d >= 1 and kappa >= 2, got d = {d}, kappa = {kappa}")));
    }
    if !(m_const > 0.0 && m_const.is_finite()) {
        return Err(Error::InvalidConfig(format!("M_const must be positive, got {m_const}")));
    }
    Ok(())
}

pub fn plan_from_epsilon(epsilon: f64, rates: RateConstants, d: usize, kappa: usize, m_const: f64) -> Result<EpsilonPlan> {
    EpsilonPlan::from_epsilon(epsilon, rates, d, kappa, m_const)
}

/// Per-step model cost of both filters under a plan, with the asymptotic
/// envelopes they are bounded by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedCost {
    /// `sum_l M_l kappa^(l gamma)`.
    pub mlenkf: f64,
    /// `enkf_M kappa^(L gamma)`.
    pub enkf: f64,
    pub mlenkf_envelope: f64,
    pub enkf_envelope: f64,
}

pub fn predicted_cost(plan: &EpsilonPlan) -> PredictedCost {
    let mlenkf = plan.sizes.iter().enumerate().map(|(l, &m)| m as f64 * plan.step_cost(l)).sum();
    let enkf = plan.enkf_m as f64 * plan.step_cost(plan.max_level);
    let eps = plan.epsilon;
    let dg = plan.d as f64 * plan.gamma;
    let mlenkf_envelope = match plan.regime {
        Regime::BetaGt => eps.powi(-2),
        Regime::BetaEq => eps.powi(-2) * eps.ln().abs().powi(3),
        Regime::BetaLt => eps.powf(-2.0 * dg / plan.beta),
    };
    let enkf_envelope = eps.powf(-2.0 * (1.0 + dg / plan.beta));
    PredictedCost { mlenkf, enkf, mlenkf_envelope, enkf_envelope }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Enkf,
    Mlenkf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Enkf => "enkf",
            Method::Mlenkf => "mlenkf",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Method::Enkf => 1,
            Method::Mlenkf => 2,
        }
    }
}

/// Model, observation and observable of a twin experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinSetup {
    #[serde(default)]
    pub model: HeatModelParams,
    #[serde(default = "default_kappa")]
    pub kappa: usize,
    #[serde(default = "default_rates")]
    pub rates: RateConstants,
    #[serde(default)]
    pub observation: ObservationKind,
    /// `Gamma = gamma_scale I`.
    #[serde(default = "default_gamma_scale")]
    pub gamma_scale: f64,
    #[serde(default)]
    pub observable: ObservableSpec,
}

fn default_kappa() -> usize {
    2
}

fn default_rates() -> RateConstants {
    RateConstants { beta: 1.0, gamma: 1.0 }
}

fn default_gamma_scale() -> f64 {
    0.01
}

impl Default for TwinSetup {
    fn default() -> Self {
        Self {
            model: HeatModelParams::default(),
            kappa: default_kappa(),
            rates: default_rates(),
            observation: ObservationKind::default(),
            gamma_scale: default_gamma_scale(),
            observable: ObservableSpec::default(),
        }
    }
}

impl TwinSetup {
    pub fn hierarchy(&self, max_level: usize) -> Result<LevelHierarchy> {
        LevelHierarchy::new(self.kappa, self.model.d, max_level)
    }

    pub fn build_model(&self, max_level: usize) -> Result<HeatModel> {
        HeatModel::new(self.model, self.hierarchy(max_level)?)?.with_rates(self.rates)
    }

    /// Observation operator covering the modes of `max_level`.
    pub fn build_observation(&self, max_level: usize) -> Result<ObservationOperator> {
        let n = self.hierarchy(max_level)?.modes(max_level);
        let m = match &self.observation {
            ObservationKind::SpectralWindow { centers, .. } => centers.len(),
            ObservationKind::ModePick { modes } => modes.len(),
            ObservationKind::Explicit { matrix } => matrix.len(),
        };
        if !(self.gamma_scale > 0.0 && self.gamma_scale.is_finite()) {
            return Err(Error::NotPositiveDefinite("observation noise covariance"));
        }
        ObservationOperator::new(&self.observation, n, scaled_identity(m, self.gamma_scale))
    }

    pub fn plan(&self, epsilon: f64, m_const: f64) -> Result<EpsilonPlan> {
        plan_from_epsilon(epsilon, self.rates, self.model.d, self.kappa, m_const)
    }
}

/// Least-squares fit of `log y = a + slope log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence half-width of the slope.
    pub half_width: f64,
    pub points: usize,
}

pub fn fit_loglog(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.len() != y.len() {
        return Err(Error::Dimension("slope fit needs paired data".into()));
    }
    if x.len() < 3 {
        return Err(Error::InvalidConfig(format!("slope fit needs >= 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::NonFinite("log-log fit needs positive finite data"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidConfig("slope fit needs distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 2.0).map_err(|e| Error::InvalidConfig(e.to_string()))?.inverse_cdf(0.975);
    Ok(SlopeFit { slope, intercept, half_width: t * se, points: x.len() })
}

/// Error statistics of one estimator against the exact filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub rmse: f64,
    /// Delta-method standard error of the RMSE.
    pub rmse_stderr: f64,
    /// Mean over blocks of the within-block error variance.
    pub within_block_var: f64,
    /// Variance of the per-block mean errors.
    pub between_block_var: f64,
}

/// `errors[r]` is the error of replicate `r`, which used truth block
/// `blocks[r]`.
pub fn summarize_errors(errors: &[f64], blocks: &[usize]) -> ErrorSummary {
    let r = errors.len() as f64;
    let sq: Vec<f64> = errors.iter().map(|e| e * e).collect();
    let mse = sq.iter().sum::<f64>() / r;
    let rmse = mse.sqrt();
    let var_sq = if errors.len() > 1 { sq.iter().map(|s| (s - mse).powi(2)).sum::<f64>() / (r - 1.0) } else { 0.0 };
    let se_mse = (var_sq / r).sqrt();
    let rmse_stderr = if rmse > 0.0 { se_mse / (2.0 * rmse) } else { 0.0 };

    let n_blocks = blocks.iter().copied().max().map_or(0, |b| b + 1);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); n_blocks];
    for (&e, &b) in errors.iter().zip(blocks) {
        groups[b].push(e);
    }
    let groups: Vec<&Vec<f64>> = groups.iter().filter(|g| !g.is_empty()).collect();
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let within: Vec<f64> = groups
        .iter()
        .zip(&means)
        .filter(|(g, _)| g.len() > 1)
        .map(|(g, m)| g.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (g.len() - 1) as f64)
        .collect();
    let within_block_var = if within.is_empty() { 0.0 } else { within.iter().sum::<f64>() / within.len() as f64 };
    let between_block_var = if means.len() > 1 {
        let mm = means.iter().sum::<f64>() / means.len() as f64;
        means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / (means.len() - 1) as f64
    } else {
        0.0
    };
    ErrorSummary { rmse, rmse_stderr, within_block_var, between_block_var }
}

/// Parameters of an epsilon sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub epsilons: Vec<f64>,
    /// Replicates `R` per method and epsilon.
    pub replicates: usize,
    /// EnKF replicate count when it differs from `replicates`.
    #[serde(default)]
    pub enkf_replicates: Option<usize>,
    /// Truth realizations; replicate `r` uses block `r mod blocks`.
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    /// Assimilation steps `N`.
    pub steps: usize,
    #[serde(default = "default_m_const")]
    pub m_const: f64,
    /// Levels added above the finest filter level for the reference.
    #[serde(default = "default_extra_levels")]
    pub reference_extra_levels: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

fn default_blocks() -> usize {
    5
}

fn default_m_const() -> f64 {
    4.0
}

fn default_extra_levels() -> usize {
    2
}

fn default_methods() -> Vec<Method> {
    vec![Method::Enkf, Method::Mlenkf]
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            epsilons: (1..=6).map(|i| 0.5f64.powi(i)).collect(),
            replicates: 50,
            enkf_replicates: None,
            blocks: default_blocks(),
            steps: 10,
            m_const: default_m_const(),
            reference_extra_levels: default_extra_levels(),
            methods: default_methods(),
        }
    }
}

impl StudySpec {
    pub fn validate(&self) -> Result<()> {
        if self.epsilons.is_empty() {
            return Err(Error::InvalidConfig("study needs at least one epsilon".into()));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return Err(Error::InvalidConfig(format!("epsilon must lie in (0, 1), got {e}")));
        }
        if self.replicates == 0 || self.enkf_replicates == Some(0) {
            return Err(Error::InvalidConfig("study needs at least one replicate".into()));
        }
        if self.blocks == 0 {
            return Err(Error::InvalidConfig("study needs at least one truth block".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("study needs at least one method".into()));
        }
        if !(self.m_const > 0.0 && self.m_const.is_finite()) {
            return Err(Error::InvalidConfig(format!("M_const must be positive, got {}", self.m_const)));
        }
        Ok(())
    }

    pub fn replicates_for(&self, method: Method) -> usize {
        match method {
            Method::Enkf => self.enkf_replicates.unwrap_or(self.replicates),
            Method::Mlenkf => self.replicates,
        }
    }
}

/// One `(method, epsilon)` cell of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub method: Method,
    pub epsilon: f64,
    pub level: usize,
    pub replicates: usize,
    /// Final-step error statistics.
    pub errors: ErrorSummary,
    /// RMSE at every step `n = 0..=N`.
    pub rmse_per_step: Vec<f64>,
    /// Ledger total of one run; identical across replicates.
    pub cost_units: f64,
    /// Mean wall time per replicate.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeEntry {
    pub method: Method,
    /// `rmse` or `cost`.
    pub quantity: String,
    pub fit: Option<SlopeFit>,
    /// Why `fit` is absent.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub slopes: Vec<SlopeEntry>,
    /// Per method: RMSE non-increasing as epsilon shrinks, within two
    /// standard errors.
    pub monotone: Vec<(Method, bool)>,
    pub plans: Vec<EpsilonPlan>,
    pub reference_level: usize,
    pub warnings: Vec<String>,
}

impl StudyReport {
    pub fn rows_for(&self, method: Method) -> impl Iterator<Item = &StudyRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn slope(&self, method: Method, quantity: &str) -> Option<SlopeFit> {
        self.slopes.iter().find(|s| s.method == method && s.quantity == quantity).and_then(|s| s.fit)
    }
}

const TRUTH_TAG: u64 = 0x0074_7275_7468;
/// Minimum replicates for a slope fit.
pub const MIN_REPLICATES_FOR_FIT: usize = 10;

struct Block {
    observations: Vec<crate::observation::ObservationRecord>,
    reference: Vec<f64>,
}

struct JobResult {
    errors: Vec<f64>,
    cost: f64,
    wall: f64,
}

fn build_blocks(
    setup: &TwinSetup,
    model: &HeatModel,
    obs: &ObservationOperator,
    ref_level: usize,
    steps: usize,
    blocks: usize,
    seed: u64,
) -> Result<Vec<Block>> {
    let phi = setup.observable.build(model.hierarchy().modes(ref_level))?;
    if !phi.is_linear() {
        return Err(Error::UnsupportedObservable("studies compare against the exact mean; use a linear observable"));
    }
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let truth = generate_truth_and_observations(model, obs, steps, ref_level, derive_run_id(seed, &[TRUTH_TAG, b as u64]))?;
            let reference = run_reference(model, obs, ref_level, &truth.observations, &phi)?.estimates()?;
            Ok(Block { observations: truth.observations, reference })
        })
        .collect()
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs both filters over an epsilon grid against the exact filter.
///
/// Replicate `r` of `(method, epsilon_i)` uses run id
/// `derive_run_id(seed, [method, i, r])` and truth block `r mod blocks`, so
/// results do not depend on `jobs`.
pub fn convergence_study(setup: &TwinSetup, sweep: &StudySpec, seed: u64, jobs: Option<usize>) -> Result<StudyReport> {
    sweep.validate()?;
    let plans: Vec<EpsilonPlan> = sweep.epsilons.iter().map(|&e| setup.plan(e, sweep.m_const)).collect::<Result<_>>()?;
    let top = plans.iter().map(|p| p.max_level).max().unwrap_or(0);
    let ref_level = top + sweep.reference_extra_levels;
    let model = setup.build_model(ref_level)?;
    let obs = setup.build_observation(ref_level)?;
    let phi = setup.observable.build(model.hierarchy().modes(ref_level))?;
    let mut warnings = Vec::new();
    if obs.m() >= model.hierarchy().modes(0) {
        warnings.push(format!(
            "m = {} observations against N(0) = {} coarsest modes; the m << N(0) regime does not hold",
            obs.m(),
            model.hierarchy().modes(0)
        ));
    }

    with_pool(jobs, || {
        let blocks = build_blocks(setup, &model, &obs, ref_level, sweep.steps, sweep.blocks, seed)?;
        let mut job_keys = Vec::new();
        for &method in &sweep.methods {
            for i in 0..plans.len() {
                for r in 0..sweep.replicates_for(method) {
                    job_keys.push((method, i, r));
                }
            }
        }
        let results: Vec<JobResult> = job_keys
            .par_iter()
            .map(|&(method, i, r)| {
                let plan = &plans[i];
                let block = &blocks[r % sweep.blocks];
                let run_id = derive_run_id(seed, &[method.tag(), i as u64, r as u64]);
                let (estimates, cost, wall): (Vec<f64>, f64, f64) = match method {
                    Method::Enkf => {
                        let run =
                            run_enkf(&model, &obs, plan.max_level, plan.enkf_m, run_id, &block.observations, &phi)?;
                        (run.records.iter().map(|s| s.estimate).collect(), run.ledger.total(), run.ledger.wall_seconds)
                    }
                    Method::Mlenkf => {
                        let run = run_mlenkf(
                            &model,
                            &obs,
                            &plan.sizes,
                            run_id,
                            &block.observations,
                            &phi,
                            RunOptions::default(),
                        )?;
                        (run.records.iter().map(|s| s.estimate).collect(), run.ledger.total(), run.ledger.wall_seconds)
                    }
                };
                let errors = estimates.iter().zip(&block.reference).map(|(e, t)| e - t).collect();
                Ok(JobResult { errors, cost, wall })
            })
            .collect::<Result<_>>()?;

        let mut rows = Vec::new();
        let mut cursor = 0;
        for &method in &sweep.methods {
            for plan in &plans {
                let reps = sweep.replicates_for(method);
                let cell = &results[cursor..cursor + reps];
                cursor += reps;
                rows.push(aggregate(method, plan, cell, sweep));
            }
        }
        let slopes = fit_study_slopes(&rows, sweep);
        let monotone = sweep.methods.iter().map(|&m| (m, is_monotone(rows.iter().filter(|r| r.method == m)))).collect();
        Ok(StudyReport { rows, slopes, monotone, plans: plans.clone(), reference_level: ref_level, warnings })
    })?
}

fn aggregate(method: Method, plan: &EpsilonPlan, cell: &[JobResult], sweep: &StudySpec) -> StudyRow {
    let blocks: Vec<usize> = (0..cell.len()).map(|r| r % sweep.blocks).collect();
    let finals: Vec<f64> = cell.iter().map(|j| *j.errors.last().expect("initial record")).collect();
    let steps = cell[0].errors.len();
    let rmse_per_step = (0..steps)
        .map(|n| (cell.iter().map(|j| j.errors[n].powi(2)).sum::<f64>() / cell.len() as f64).sqrt())
        .collect();
    StudyRow {
        method,
        epsilon: plan.epsilon,
        level: plan.max_level,
        replicates: cell.len(),
        errors: summarize_errors(&finals, &blocks),
        rmse_per_step,
        cost_units: cell[0].cost,
        wall_seconds: cell.iter().map(|j| j.wall).sum::<f64>() / cell.len() as f64,
    }
}

fn fit_study_slopes(rows: &[StudyRow], sweep: &StudySpec) -> Vec<SlopeEntry> {
    let mut out = Vec::new();
    for &method in &sweep.methods {
        let cells: Vec<&StudyRow> = rows.iter().filter(|r| r.method == method).collect();
        let eps: Vec<f64> = cells.iter().map(|r| r.epsilon).collect();
        let reps = sweep.replicates_for(method);
        for quantity in ["rmse", "cost"] {
            let y: Vec<f64> =
                cells.iter().map(|r| if quantity == "rmse" { r.errors.rmse } else { r.cost_units }).collect();
            let fit = if reps < MIN_REPLICATES_FOR_FIT {
                Err(Error::InsufficientReplicates { needed: MIN_REPLICATES_FOR_FIT, got: reps })
            } else {
                fit_loglog(&eps, &y)
            };
            let (fit, note) = match fit {
                Ok(f) => (Some(f), None),
                Err(e) => (None, Some(e.to_string())),
            };
            out.push(SlopeEntry { method, quantity: quantity.into(), fit, note });
        }
    }
    out
}

/// RMSE never rises by more than two combined standard errors as epsilon
/// decreases.
pub fn is_monotone<'a>(rows: impl Iterator<Item = &'a StudyRow>) -> bool {
    let mut cells: Vec<&StudyRow> = rows.collect();
    cells.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    cells.windows(2).all(|w| {
        let slack = 2.0 * (w[0].errors.rmse_stderr.powi(2) + w[1].errors.rmse_stderr.powi(2)).sqrt();
        w[1].errors.rmse <= w[0].errors.rmse + slack
    })
}

/// Fixed-level EnKF sweep over ensemble sizes against the exact filter at
/// the same level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStudy {
    pub level: usize,
    pub sizes: Vec<usize>,
    pub rows: Vec<ErrorSummary>,
    pub fit: Option<SlopeFit>,
}

pub fn ensemble_size_study(
    setup: &TwinSetup,
    level: usize,
    sizes: &[usize],
    replicates: usize,
    blocks: usize,
    steps: usize,
    seed: u64,
) -> Result<SizeStudy> {
    if replicates == 0 || blocks == 0 || sizes.is_empty() {
        return Err(Error::InvalidConfig("size study needs sizes, replicates and blocks".into()));
    }
    let model = setup.build_model(level)?;
    let obs = setup.build_observation(level)?;
    let phi = setup.observable.build(model.hierarchy().modes(level))?;
    let truth = build_blocks(setup, &model, &obs, level, steps, blocks, seed)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for (i, &m) in sizes.iter().enumerate() {
        let finals: Vec<f64> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let block = &truth[r % blocks];
                let run_id = derive_run_id(seed, &[Method::Enkf.tag(), 1000 + i as u64, r as u64]);
                let run = run_enkf(&model, &obs, level, m, run_id, &block.observations, &phi)?;
                Ok(run.final_estimate() - block.reference.last().expect("initial record"))
            })
            .collect::<Result<_>>()?;
        let block_ids: Vec<usize> = (0..replicates).map(|r| r % blocks).collect();
        rows.push(summarize_errors(&finals, &block_ids));
    }
    let x: Vec<f64> = sizes.iter().map(|&m| m as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.rmse).collect();
    let fit = if replicates >= MIN_REPLICATES_FOR_FIT { fit_loglog(&x, &y).ok() } else { None };
    Ok(SizeStudy { level, sizes: sizes.to_vec(), rows, fit })
}
