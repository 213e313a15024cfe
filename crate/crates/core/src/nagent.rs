//! Picard iteration on the market price of risk for the coupled N-agent
//! system
//!
//! ```text
//! dY^i = Z1^i dB + Z2^i dW_i - (lambda^2 / 2 - lambda Z1^i) dt,
//! Y^i(T) = e_T(B_T, W_i(T)),   lambda = (1/N) sum_i Z1^i.
//! ```
//!
//! Each iteration freezes `lambda`, runs one backward sweep per agent and
//! replaces `lambda` by the (damped) cross-sectional mean of the `Z1^i`.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{backward_sweep, evaluate_fitted_z, AgentSweep, StepFit, SweepOptions};
use crate::error::{Error, Result};
use crate::limit::LimitSolution;
use crate::model::{EndowmentSpec, ProcessSample};
use crate::numeric::{mean, symmetric_mean};
use crate::paths::PathBundle;
use crate::regression::RegressionBasis;

pub use crate::bsde::backward_sweep as bsde_backward_sweep;

/// Damping used once the residual has increased.
pub const FALLBACK_DAMPING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardOptions {
    pub max_iters: usize,
    /// Stopping threshold on the discrete H^2 norm of successive iterates.
    pub tol: f64,
    pub damping: f64,
    /// Start from the mean-field limit price instead of zero.
    pub warm_start: bool,
    pub quadrature_order: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-4, damping: 1.0, warm_start: true, quadrature_order: 64 }
    }
}

impl PicardOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidConfig(format!("damping {} not in (0, 1]", self.damping)));
        }
        Ok(())
    }
}

/// Discrete H^2 norm `sqrt(mean_m sum_{k<K} x^2 dt)`.
pub fn h2_norm(x: &ProcessSample, dt: f64) -> f64 {
    let steps = x.steps();
    let per_path: Vec<f64> = (0..x.paths()).map(|m| x.path(m)[..steps].iter().map(|v| v * v * dt).sum()).collect();
    mean(&per_path).sqrt()
}

/// One agent's part of an equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSolution {
    pub y: ProcessSample,
    pub z1: ProcessSample,
    pub z2: ProcessSample,
    pub fits: Vec<StepFit>,
}

/// Strategy pair `(pi_0, pi_i)`: positions in the common asset and in the
/// agent's own asset.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub common: ProcessSample,
    pub own: ProcessSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    /// `(1/N) sum_i Z1^i` of the final sweep.
    pub lambda: ProcessSample,
    /// The price the final sweep was run with.
    pub lambda_input: ProcessSample,
    pub agents: Vec<AgentSolution>,
    /// `||lambda^{r+1} - lambda^r||` per iteration.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    /// `||lambda - lambda_input||`, the change one more Picard step would make.
    pub fixed_point_gap: f64,
    pub clamp_events: usize,
    pub max_condition: f64,
    pub damping: f64,
    pub basis: RegressionBasis,
    pub options: PicardOptions,
    pub z_max: f64,
    pub spec: EndowmentSpec,
}

/// Summary written next to the solution CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSummary {
    pub agents: usize,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub fixed_point_gap: f64,
    pub clearing_residual: f64,
    pub clamp_count: usize,
    pub max_condition: f64,
    pub damping: f64,
}

fn mean_of_z1(sweeps: &[ProcessSample], paths: usize, steps: usize) -> ProcessSample {
    let mut out = ProcessSample::zeros("lambda", paths, steps);
    out.values_mut().par_chunks_mut(steps + 1).enumerate().for_each(|(m, row)| {
        let mut buf = vec![0.0; sweeps.len()];
        for (k, slot) in row.iter_mut().enumerate() {
            for (b, z) in buf.iter_mut().zip(sweeps) {
                *b = z.at(m, k);
            }
            *slot = symmetric_mean(&buf);
        }
    });
    out
}

fn sweep_all(
    bundle: &PathBundle,
    lambda: &ProcessSample,
    spec: &EndowmentSpec,
    basis: &RegressionBasis,
    opts: SweepOptions,
) -> Result<Vec<AgentSweep>> {
    (0..bundle.agents()).map(|i| backward_sweep(bundle, lambda, spec, basis, i, opts)).collect()
}

/// Initial price: the limit price along the common-noise paths, or zero.
pub fn initial_lambda(bundle: &PathBundle, spec: &EndowmentSpec, options: &PicardOptions) -> Result<ProcessSample> {
    if options.warm_start {
        let limit = LimitSolution::new(spec, bundle.grid().horizon(), options.quadrature_order)?;
        let mut l = limit.along_paths(bundle).lambda;
        // integrands carry the last interior value at the terminal index
        let k = bundle.steps();
        for m in 0..bundle.paths() {
            let v = l.at(m, k - 1);
            l.set(m, k, v);
        }
        Ok(l)
    } else {
        Ok(ProcessSample::zeros("lambda", bundle.paths(), bundle.steps()))
    }
}

pub fn picard_solve(
    bundle: &PathBundle,
    spec: &EndowmentSpec,
    basis: &RegressionBasis,
    options: &PicardOptions,
) -> Result<EquilibriumSolution> {
    let start = initial_lambda(bundle, spec, options)?;
    picard_from(bundle, spec, basis, options, start)
}

/// Picard iteration from a given initial price.
pub fn picard_from(
    bundle: &PathBundle,
    spec: &EndowmentSpec,
    basis: &RegressionBasis,
    options: &PicardOptions,
    start: ProcessSample,
) -> Result<EquilibriumSolution> {
    options.validate()?;
    spec.validate()?;
    let (paths, steps) = (bundle.paths(), bundle.steps());
    let dt = bundle.grid().dt();
    let sweep_opts = SweepOptions::for_endowment(spec);
    let mut lambda = start;
    let mut theta = options.damping;
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..options.max_iters {
        let z1: Vec<ProcessSample> = sweep_all(bundle, &lambda, spec, basis, sweep_opts)?.into_iter().map(|s| s.z1).collect();
        let target = mean_of_z1(&z1, paths, steps);
        drop(z1);
        let next = lambda.zip_with(&target, "lambda", |a, b| (1.0 - theta) * a + theta * b)?;
        let residual = h2_norm(&next.sub(&lambda)?, dt);
        if residuals.last().is_some_and(|last| residual > *last) && theta > FALLBACK_DAMPING {
            theta = FALLBACK_DAMPING;
        }
        residuals.push(residual);
        lambda = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations: residuals.len(),
            last: residuals.last().copied().unwrap_or(f64::NAN),
            residuals,
        });
    }

    let sweeps = sweep_all(bundle, &lambda, spec, basis, sweep_opts)?;
    let z1: Vec<ProcessSample> = sweeps.iter().map(|s| s.z1.clone()).collect();
    let mut final_lambda = mean_of_z1(&z1, paths, steps);
    drop(z1);
    final_lambda.label = "lambda".into();
    let fixed_point_gap = h2_norm(&final_lambda.sub(&lambda)?, dt);
    let clamp_events = sweeps.iter().map(|s| s.clamp_events).sum();
    let max_condition = sweeps.iter().map(|s| s.max_condition()).fold(0.0, f64::max);
    let agents = sweeps.into_iter().map(|s| AgentSolution { y: s.y, z1: s.z1, z2: s.z2, fits: s.fits }).collect();
    Ok(EquilibriumSolution {
        lambda: final_lambda,
        lambda_input: lambda,
        agents,
        iterations: residuals.len(),
        residuals,
        fixed_point_gap,
        clamp_events,
        max_condition,
        damping: theta,
        basis: basis.clone(),
        options: *options,
        z_max: sweep_opts.z_max,
        spec: spec.clone(),
    })
}

impl EquilibriumSolution {
    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    /// `pi_0^i = lambda - Z1^i`, `pi_i^i = -Z2^i`.
    pub fn strategy(&self, agent: usize) -> Strategy {
        let a = &self.agents[agent];
        Strategy {
            common: self.lambda.zip_with(&a.z1, format!("pi0_{}", agent + 1), |l, z| l - z).expect("same shape"),
            own: a.z2.map(format!("pii_{}", agent + 1), |z| -z),
        }
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        (0..self.agents.len()).map(|i| self.strategy(i)).collect()
    }

    /// `max_{m,k} |sum_i pi_0^i|`.
    pub fn clearing_residual(&self) -> f64 {
        clearing_residual(&self.lambda, self.agents.iter().map(|a| &a.z1))
    }

    pub fn summary(&self) -> SolveSummary {
        SolveSummary {
            agents: self.agents.len(),
            iterations: self.iterations,
            residuals: self.residuals.clone(),
            fixed_point_gap: self.fixed_point_gap,
            clearing_residual: self.clearing_residual(),
            clamp_count: self.clamp_events,
            max_condition: self.max_condition,
            damping: self.damping,
        }
    }

    /// Writes `agent,path,t,Y,Z1,Z2,pi0,pii` rows for the first
    /// `max_paths` paths.
    pub fn write_csv<W: std::io::Write>(&self, grid: &crate::model::TimeGrid, max_paths: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["agent", "path", "t", "Y", "Z1", "Z2", "pi0", "pii"])?;
        for (i, a) in self.agents.iter().enumerate() {
            for m in 0..self.lambda.paths().min(max_paths) {
                for k in 0..=self.lambda.steps() {
                    let (z1, z2) = (a.z1.at(m, k), a.z2.at(m, k));
                    w.write_record([
                        (i + 1).to_string(),
                        m.to_string(),
                        grid.t(k).to_string(),
                        a.y.at(m, k).to_string(),
                        z1.to_string(),
                        z2.to_string(),
                        (self.lambda.at(m, k) - z1).to_string(),
                        (-z2).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Policy built from the stored regression coefficients, for use on
    /// fresh paths.
    pub fn fitted_policy(&self) -> FittedPolicy<'_> {
        FittedPolicy { solution: self }
    }
}

/// `max_{m,k} |sum_i (lambda - Z1^i)|` with the sum taken in a fixed order.
pub fn clearing_residual<'a>(lambda: &ProcessSample, z1: impl Iterator<Item = &'a ProcessSample>) -> f64 {
    let z1: Vec<&ProcessSample> = z1.collect();
    let mut worst = 0.0f64;
    for m in 0..lambda.paths() {
        for k in 0..=lambda.steps() {
            let l = lambda.at(m, k);
            let total: f64 = z1.iter().map(|z| l - z.at(m, k)).sum();
            worst = worst.max(total.abs());
        }
    }
    worst
}

/// Out-of-sample evaluation of the equilibrium strategies.
pub struct FittedPolicy<'a> {
    solution: &'a EquilibriumSolution,
}

/// Strategies and price recomputed on another bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPaths {
    pub lambda: ProcessSample,
    pub z1: Vec<ProcessSample>,
    pub z2: Vec<ProcessSample>,
}

impl PolicyPaths {
    pub fn strategy(&self, agent: usize) -> Strategy {
        Strategy {
            common: self.lambda.zip_with(&self.z1[agent], "pi0", |l, z| l - z).expect("same shape"),
            own: self.z2[agent].map("pii", |z| -z),
        }
    }
}

impl FittedPolicy<'_> {
    pub fn evaluate(&self, bundle: &PathBundle) -> Result<PolicyPaths> {
        let sol = self.solution;
        if bundle.agents() != sol.agents.len() {
            return Err(Error::DimensionMismatch(format!(
                "policy for {} agents applied to {} agents",
                sol.agents.len(),
                bundle.agents()
            )));
        }
        let mut z1 = Vec::with_capacity(sol.agents.len());
        let mut z2 = Vec::with_capacity(sol.agents.len());
        for (i, a) in sol.agents.iter().enumerate() {
            let (p, q) = evaluate_fitted_z(&a.fits, &sol.basis, bundle, i, sol.z_max)?;
            z1.push(p);
            z2.push(q);
        }
        let lambda = mean_of_z1(&z1, bundle.paths(), bundle.steps());
        Ok(PolicyPaths { lambda, z1, z2 })
    }
}

/// `f_i(z) = -lambda(z)^2 / 2 + lambda(z) z_{i1}` for an `N x (N+1)` matrix
/// `z` (row-major) whose row `i` is nonzero only in column 0 and column `i+1`.
pub fn vectorized_driver(z: &[f64], agents: usize) -> Result<Vec<f64>> {
    let cols = agents + 1;
    if z.len() != agents * cols {
        return Err(Error::DimensionMismatch(format!("{} entries for a {agents}x{cols} matrix", z.len())));
    }
    for i in 0..agents {
        for j in 1..cols {
            if j != i + 1 && z[i * cols + j] != 0.0 {
                return Err(Error::SparsityViolation { row: i, col: j });
            }
        }
    }
    let lambda = (0..agents).map(|i| z[i * cols]).sum::<f64>() / agents as f64;
    Ok((0..agents).map(|i| -0.5 * lambda * lambda + lambda * z[i * cols]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MarketConfig, RidgeTerm};
    use crate::paths::simulate_paths;

    #[test]
    fn constant_endowment_converges_immediately() {
        let bundle = simulate_paths(&MarketConfig::new(3, 1.0, 10, 500, 1)).unwrap();
        let spec = EndowmentSpec::constant(0.3);
        let sol = picard_solve(&bundle, &spec, &RegressionBasis::new(2), &PicardOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!(sol.lambda.max_abs() < 1e-12);
        for s in sol.strategies() {
            assert!(s.common.max_abs() < 1e-12 && s.own.max_abs() < 1e-12);
        }
    }

    #[test]
    fn linear_endowment_gives_constant_price() {
        for n in [1, 3] {
            let bundle = simulate_paths(&MarketConfig::new(n, 1.0, 8, 400, 2)).unwrap();
            let spec = EndowmentSpec::linear(0.5, 0.3);
            let opts = PicardOptions { warm_start: false, ..Default::default() };
            let sol = picard_solve(&bundle, &spec, &RegressionBasis::new(1), &opts).unwrap();
            assert!(sol.lambda.values().iter().all(|l| (l - 0.5).abs() < 1e-9));
            for s in sol.strategies() {
                assert!(s.common.max_abs() < 1e-9);
                assert!(s.own.values().iter().all(|p| (p + 0.3).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn single_agent_clears_exactly() {
        let bundle = simulate_paths(&MarketConfig::new(1, 1.0, 10, 500, 4)).unwrap();
        let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 0.5, b: 1.0, c: 0.5, d: 0.0 }]);
        let sol = picard_solve(&bundle, &spec, &RegressionBasis::new(2), &PicardOptions::default()).unwrap();
        assert_eq!(sol.clearing_residual(), 0.0);
        assert_eq!(sol.strategy(0).common.max_abs(), 0.0);
    }

    #[test]
    fn clearing_residual_is_linear_in_a_perturbation() {
        let bundle = simulate_paths(&MarketConfig::new(3, 1.0, 10, 300, 4)).unwrap();
        let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 0.5, b: 1.0, c: 0.5, d: 0.0 }]);
        let mut sol = picard_solve(&bundle, &spec, &RegressionBasis::new(2), &PicardOptions::default()).unwrap();
        assert!(sol.clearing_residual() <= 1e-12);
        let eps = 1e-3;
        sol.agents[1].z1 = sol.agents[1].z1.map("z", |z| z + eps);
        assert!((sol.clearing_residual() - eps).abs() < 1e-12);
    }

    #[test]
    fn no_convergence_carries_the_trace() {
        let bundle = simulate_paths(&MarketConfig::new(2, 1.0, 10, 300, 4)).unwrap();
        let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 1.0, b: 1.0, c: 0.5, d: 0.0 }]);
        let opts = PicardOptions { max_iters: 1, tol: 1e-14, warm_start: false, ..Default::default() };
        match picard_solve(&bundle, &spec, &RegressionBasis::new(2), &opts) {
            Err(Error::NoConvergence { iterations, residuals, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(residuals.len(), 1);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn driver_examples() {
        assert_eq!(vectorized_driver(&[0.0; 6], 2).unwrap(), vec![0.0, 0.0]);
        let z = [1.0, 0.3, 0.0, 1.0, 0.0, -2.0];
        assert_eq!(vectorized_driver(&z, 2).unwrap(), vec![0.5, 0.5]);
        let bad = [1.0, 0.0, 0.4, 1.0, 0.0, 0.0];
        assert!(matches!(vectorized_driver(&bad, 2), Err(Error::SparsityViolation { row: 0, col: 2 })));
    }

    #[test]
    fn options_are_validated() {
        let bad = PicardOptions { damping: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(PicardOptions { tol: 0.0, ..Default::default() }.validate().is_err());
    }
}
