//! JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{EpsilonPlan, Method, StudySpec, TwinSetup};
use crate::model::{HeatModelParams, RateConstants};
use crate::observable::ObservableSpec;
use crate::observation::ObservationKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    #[serde(default = "default_kappa")]
    pub kappa: usize,
    /// Level of the truth and of the observation operator's column space;
    /// filters may not run above it.
    #[serde(default = "default_max_level")]
    pub max_level: usize,
}

fn default_kappa() -> usize {
    2
}

fn default_max_level() -> usize {
    14
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self { kappa: default_kappa(), max_level: default_max_level() }
    }
}

/// Either an accuracy target or explicit ensemble sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Explicit `M_l`, `l = 0..=L`; overrides `epsilon`.
    #[serde(default)]
    pub sizes: Option<Vec<usize>>,
    /// Explicit single-level ensemble size.
    #[serde(default)]
    pub enkf_m: Option<usize>,
    #[serde(default = "default_m_const")]
    pub m_const: f64,
}

fn default_method() -> Method {
    Method::Mlenkf
}

fn default_m_const() -> f64 {
    4.0
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { method: default_method(), epsilon: Some(0.125), sizes: None, enkf_m: None, m_const: default_m_const() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: HeatModelParams,
    #[serde(default)]
    pub hierarchy: HierarchyConfig,
    #[serde(default = "default_rates")]
    pub rates: RateConstants,
    #[serde(default)]
    pub observation: ObservationKind,
    /// `Gamma = gamma_scale I`.
    #[serde(default = "default_gamma_scale")]
    pub gamma_scale: f64,
    #[serde(default)]
    pub observable: ObservableSpec,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub study: StudySpec,
    /// Assimilation steps for `simulate`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_rates() -> RateConstants {
    RateConstants { beta: 1.0, gamma: 1.0 }
}

fn default_gamma_scale() -> f64 {
    0.01
}

fn default_steps() -> usize {
    10
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: HeatModelParams::default(),
            hierarchy: HierarchyConfig::default(),
            rates: default_rates(),
            observation: ObservationKind::default(),
            gamma_scale: default_gamma_scale(),
            observable: ObservableSpec::default(),
            filter: FilterConfig::default(),
            study: StudySpec::default(),
            steps: default_steps(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn setup(&self) -> TwinSetup {
        TwinSetup {
            model: self.model,
            kappa: self.hierarchy.kappa,
            rates: self.rates,
            observation: self.observation.clone(),
            gamma_scale: self.gamma_scale,
            observable: self.observable.clone(),
        }
    }

    /// Filter plan, optionally overriding the configured accuracy.
    pub fn plan(&self, epsilon: Option<f64>) -> Result<EpsilonPlan> {
        let f = &self.filter;
        let mut plan = match (&f.sizes, epsilon.or(f.epsilon)) {
            (Some(sizes), None) => {
                let enkf_m = f.enkf_m.unwrap_or(*sizes.last().unwrap_or(&0));
                EpsilonPlan::explicit(sizes.clone(), enkf_m, self.rates, self.model.d, self.hierarchy.kappa)?
            }
            (Some(_), Some(_)) if epsilon.is_none() => {
                return Err(Error::InvalidConfig("filter sets both epsilon and explicit sizes".into()));
            }
            (_, Some(eps)) => self.setup().plan(eps, f.m_const)?,
            (None, None) => return Err(Error::InvalidConfig("filter needs epsilon or explicit sizes".into())),
        };
        if let Some(m) = f.enkf_m {
            if m < 2 {
                return Err(Error::InvalidConfig(format!("enkf_m must be >= 2, got {m}")));
            }
            plan.enkf_m = m;
        }
        if plan.max_level > self.hierarchy.max_level {
            return Err(Error::InvalidConfig(format!(
                "plan needs level {} but the hierarchy stops at {}",
                plan.max_level, self.hierarchy.max_level
            )));
        }
        Ok(plan)
    }

    /// Checks every precondition that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        let setup = self.setup();
        let obs = setup.build_observation(self.hierarchy.max_level)?;
        setup.build_model(self.hierarchy.max_level)?;
        setup.observable.build(obs.n_modes())?;
        if obs.m() > obs.n_modes() {
            return Err(Error::InvalidConfig(format!("m = {} exceeds N(L_max) = {}", obs.m(), obs.n_modes())));
        }
        if self.filter.epsilon.is_some() || self.filter.sizes.is_some() {
            self.plan(None)?;
        }
        self.study.validate()?;
        Ok(())
    }

    /// Advisory notes that do not block a run.
    pub fn warnings(&self) -> Vec<String> {
        let setup = self.setup();
        let (Ok(obs), Ok(h)) = (setup.build_observation(self.hierarchy.max_level), setup.hierarchy(self.hierarchy.max_level))
        else {
            return Vec::new();
        };
        if obs.m() < h.modes(0) {
            return Vec::new();
        }
        vec![format!(
            "m = {} observations against N(0) = {} coarsest modes; the m << N(0) regime does not hold",
            obs.m(),
            h.modes(0)
        )]
    }

    /// The configuration as recorded in manifests: without output location.
    pub fn canonical(&self) -> Self {
        Self { output_dir: None, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model, HeatModelParams::default());
        assert_eq!(c.plan(None).unwrap().max_level, 6);
        c.validate().unwrap();
    }

    #[test]
    fn custom_config_round_trips() {
        let text = r#"{
            "model": {"b": 0.5, "a": 1.5, "tau": 0.5, "d": 1},
            "hierarchy": {"kappa": 2, "max_level": 6},
            "observation": {"kind": "mode_pick", "modes": [1, 2]},
            "gamma_scale": 0.1,
            "observable": {"kind": "mode", "k": 2},
            "filter": {"method": "enkf", "sizes": [16, 8, 4], "enkf_m": 32},
            "study": {"epsilons": [0.5, 0.25], "replicates": 3, "steps": 2},
            "steps": 4,
            "seed": 99,
            "output_dir": "/tmp/x"
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        c.validate().unwrap();
        let plan = c.plan(None).unwrap();
        assert_eq!(plan.sizes, vec![16, 8, 4]);
        assert_eq!(plan.enkf_m, 32);
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.canonical().output_dir, None);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad = [
            r#"{"model": {"b": 0, "a": 0.4, "tau": 1, "d": 1}}"#,
            r#"{"gamma_scale": -1}"#,
            r#"{"filter": {"epsilon": 1.5}}"#,
            r#"{"filter": {"epsilon": 0.001}, "hierarchy": {"max_level": 6}}"#,
            r#"{"hierarchy": {"kappa": 1}}"#,
            r#"{"observable": {"kind": "mode", "k": 0}}"#,
            r#"{"study": {"epsilons": [], "replicates": 1, "steps": 1}}"#,
        ];
        for text in bad {
            let err = RunConfig::from_json(text).and_then(|c| c.validate()).unwrap_err();
            assert!(err.is_config_error(), "{text}: {err}");
        }
        assert!(RunConfig::from_json(r#"{"unknown": 1}"#).unwrap_err().is_config_error());
    }

    #[test]
    fn epsilon_override() {
        let c = RunConfig::default();
        let p = c.plan(Some(0.25)).unwrap();
        assert_eq!(p.max_level, 4);
    }
}
