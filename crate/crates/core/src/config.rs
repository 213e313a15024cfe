//! JSON experiment configuration.
//!
//! ```json
//! {"N": 4, "T": 1.0, "steps": 50, "paths": 10000, "seed": 7,
//!  "endowment": {"a0": 0.0, "terms": [{"a": 1.0, "b": 1.0, "c": 0.0, "d": 0.0}]}}
//! ```
//!
//! The linear test payoff is written `{"linear": {"alpha": 0.5, "beta": 0.3}}`.
//! Optional sections `basis`, `solver`, `sweep`, `limit_grid`, `verify` and
//! `output` take defaults when absent. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::convergence::SweepConfig;
use crate::error::{Error, Result};
use crate::model::{EndowmentSpec, MarketConfig, RidgeTerm};
use crate::nagent::PicardOptions;
use crate::regression::RegressionBasis;
use crate::verify::DEFAULT_RADIUS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSection {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearWrapper {
    pub linear: LinearSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TanhSection {
    #[serde(default)]
    pub a0: f64,
    #[serde(default)]
    pub terms: Vec<RidgeTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EndowmentSection {
    Linear(LinearWrapper),
    Tanh(TanhSection),
}

impl EndowmentSection {
    pub fn to_spec(&self) -> EndowmentSpec {
        match self {
            Self::Linear(w) => EndowmentSpec::linear(w.linear.alpha, w.linear.beta),
            Self::Tanh(t) => EndowmentSpec::tanh(t.a0, t.terms.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSection {
    pub degree: usize,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self { degree: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub agents: Vec<usize>,
    pub orders: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { agents: vec![2, 4, 8, 16, 32], orders: vec![1.0, 2.0, 4.0] }
    }
}

/// Rectangle of `(t, b)` points for the limit CSV: `times` equally spaced
/// points on `[0, T]` and `points` on `[-b_max, b_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitGridSection {
    pub times: usize,
    pub points: usize,
    pub b_max: f64,
}

impl Default for LimitGridSection {
    fn default() -> Self {
        Self { times: 11, points: 81, b_max: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub agent: usize,
    /// Fresh paths for the out-of-sample utility comparison.
    pub eval_paths: usize,
    pub perturbations: usize,
    pub points: usize,
    pub condition_agents: Vec<usize>,
    pub condition_samples: usize,
    pub radius: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            agent: 0,
            eval_paths: 100_000,
            perturbations: 10_000,
            points: 64,
            condition_agents: vec![2, 3, 5],
            condition_samples: 100_000,
            radius: DEFAULT_RADIUS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    /// Record wall-clock times. Off for bit-reproducible artifacts.
    pub timing: bool,
    /// Paths written to the solution CSV; the summary covers all paths.
    pub csv_paths: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into(), timing: true, csv_paths: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(rename = "N")]
    pub agents: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub endowment: EndowmentSection,
    #[serde(default)]
    pub basis: BasisSection,
    #[serde(default)]
    pub solver: PicardOptions,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub limit_grid: LimitGridSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills the seed from, in order, `flag`, the config itself and `env`; 0
    /// when none is set.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        let env = match env {
            Some(s) => Some(s.trim().parse::<u64>().map_err(|_| Error::InvalidConfig(format!("MFB_SEED={s} is not a u64")))?),
            None => None,
        };
        self.seed = Some(flag.or(self.seed).or(env).unwrap_or(0));
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn spec(&self) -> EndowmentSpec {
        self.endowment.to_spec()
    }

    pub fn market(&self) -> MarketConfig {
        MarketConfig::new(self.agents, self.horizon, self.steps, self.paths, self.seed())
    }

    pub fn basis(&self) -> RegressionBasis {
        RegressionBasis::new(self.basis.degree)
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            horizon: self.horizon,
            steps: self.steps,
            paths: self.paths,
            seed: self.seed(),
            spec: self.spec(),
            basis: self.basis(),
            picard: self.solver,
            agent_counts: self.sweep.agents.clone(),
            orders: self.sweep.orders.clone(),
            timing: self.output.timing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.market().validate()?;
        self.spec().validate()?;
        self.solver.validate()?;
        if self.sweep.agents.contains(&0) {
            return Err(Error::InvalidConfig("sweep agent counts must be positive".into()));
        }
        if self.sweep.orders.iter().any(|p| !(*p >= 1.0 && p.is_finite())) {
            return Err(Error::InvalidConfig("norm orders must be finite and >= 1".into()));
        }
        let g = &self.limit_grid;
        if g.times < 1 || g.points < 1 || !(g.b_max >= 0.0 && g.b_max.is_finite()) {
            return Err(Error::InvalidConfig("limit grid needs positive sizes and a finite b_max >= 0".into()));
        }
        let v = &self.verify;
        if v.agent >= self.agents {
            return Err(Error::InvalidConfig(format!("verify.agent {} >= N = {}", v.agent, self.agents)));
        }
        if v.eval_paths < 2 || v.condition_samples < 1000 || !(v.radius > 0.0) {
            return Err(Error::InvalidConfig("verify needs eval_paths >= 2, condition_samples >= 1000, radius > 0".into()));
        }
        if v.condition_agents.iter().any(|n| *n < 2) {
            return Err(Error::InvalidConfig("condition checks need N >= 2".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
