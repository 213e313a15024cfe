//! One backward regression sweep for a single agent with a frozen market
//! price of risk.
//!
//! On `[t_k, t_{k+1}]` the target `Y_{k+1}` is regressed jointly on
//! `phi(X_k)`, `phi(X_k) dB_k / sqrt(dt)` and `phi(X_k) dW_k / sqrt(dt)`.
//! The three coefficient blocks give the continuation value and the two
//! martingale-representation integrands. Because the increments are
//! independent of `phi(X_k)` this matches the separate regressions
//! `E_k[Y_{k+1}]`, `E_k[Y_{k+1} dB_k] / dt`, `E_k[Y_{k+1} dW_k] / dt` in
//! population, and it is exact whenever `Y_{k+1}` lies in the joint span.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{EndowmentSpec, ProcessSample};
use crate::paths::{Noise, PathBundle};
use crate::regression::{least_squares, RegressionBasis};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    /// Regressed integrands are clamped to `[-z_max, z_max]`.
    pub z_max: f64,
}

impl SweepOptions {
    /// `z_max = 10 (Lip(e_T) + 1)`.
    pub fn for_endowment(spec: &EndowmentSpec) -> Self {
        Self { z_max: 10.0 * (spec.lipschitz() + 1.0) }
    }
}

/// Regression coefficients of one time step, each over the basis at that step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFit {
    pub continuation: Vec<f64>,
    /// Already divided by `sqrt(dt)`, so `Z1 = phi . z1`.
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub condition: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSweep {
    pub agent: usize,
    pub y: ProcessSample,
    pub z1: ProcessSample,
    pub z2: ProcessSample,
    pub clamp_events: usize,
    /// One entry per interior time index `0..K`.
    pub fits: Vec<StepFit>,
}

impl AgentSweep {
    pub fn max_condition(&self) -> f64 {
        self.fits.iter().map(|f| f.condition).fold(0.0, f64::max)
    }
}

/// Runs `Y_k = E_k[Y_{k+1}] + (lambda_k^2 / 2 - lambda_k Z1_k) dt` from
/// `Y_K = e_T(B_T, W_i(T))` down to `k = 0`.
pub fn backward_sweep(
    bundle: &PathBundle,
    lambda: &ProcessSample,
    spec: &EndowmentSpec,
    basis: &RegressionBasis,
    agent: usize,
    options: SweepOptions,
) -> Result<AgentSweep> {
    if agent >= bundle.agents() {
        return Err(Error::DimensionMismatch(format!("agent {agent} of {}", bundle.agents())));
    }
    if lambda.paths() != bundle.paths() || lambda.steps() != bundle.steps() {
        return Err(Error::DimensionMismatch(format!(
            "lambda is {}x{} but the bundle is {}x{}",
            lambda.paths(),
            lambda.steps(),
            bundle.paths(),
            bundle.steps()
        )));
    }
    let (paths, steps) = (bundle.paths(), bundle.steps());
    let dt = bundle.grid().dt();
    let sqrt_dt = dt.sqrt();
    let z_max = options.z_max;

    let mut y_cols: Vec<Vec<f64>> = vec![Vec::new(); steps + 1];
    let mut z1_cols: Vec<Vec<f64>> = vec![Vec::new(); steps];
    let mut z2_cols: Vec<Vec<f64>> = vec![Vec::new(); steps];
    let mut fits = Vec::with_capacity(steps);
    let mut clamp_events = 0;

    y_cols[steps] = (0..paths)
        .map(|m| spec.eval(bundle.common(m, steps), bundle.own(agent, m, steps)))
        .collect();

    for k in (0..steps).rev() {
        let features = basis.features_at(bundle, agent, k);
        let p = features.len();
        let target = &y_cols[k + 1];
        let fit = least_squares(
            paths,
            3 * p,
            k,
            |m, row| {
                features.fill(m, &mut row[..p]);
                let u = bundle.increment(Noise::Common, m, k) / sqrt_dt;
                let v = bundle.increment(Noise::Own(agent), m, k) / sqrt_dt;
                for j in 0..p {
                    row[p + j] = row[j] * u;
                    row[2 * p + j] = row[j] * v;
                }
            },
            target,
        )?;
        let step = StepFit {
            continuation: fit.coefficients[..p].to_vec(),
            z1: fit.coefficients[p..2 * p].iter().map(|c| c / sqrt_dt).collect(),
            z2: fit.coefficients[2 * p..].iter().map(|c| c / sqrt_dt).collect(),
            condition: fit.condition,
        };
        let rows: Vec<(f64, f64, f64, usize)> = (0..paths)
            .into_par_iter()
            .map_init(
                || vec![0.0; p],
                |phi, m| {
                    features.fill(m, phi);
                    let dot = |c: &[f64]| phi.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                    let (z1, c1) = clamp(dot(&step.z1), z_max);
                    let (z2, c2) = clamp(dot(&step.z2), z_max);
                    let l = lambda.at(m, k);
                    let y = dot(&step.continuation) + (0.5 * l * l - l * z1) * dt;
                    (y, z1, z2, c1 + c2)
                },
            )
            .collect();
        clamp_events += rows.iter().map(|r| r.3).sum::<usize>();
        y_cols[k] = rows.iter().map(|r| r.0).collect();
        z1_cols[k] = rows.iter().map(|r| r.1).collect();
        z2_cols[k] = rows.iter().map(|r| r.2).collect();
        fits.push(step);
    }
    fits.reverse();

    let y = ProcessSample::from_fn(format!("Y{}", agent + 1), paths, steps, |m, k| y_cols[k][m]);
    let z1 = ProcessSample::from_fn(format!("Z1_{}", agent + 1), paths, steps, |m, k| z1_cols[k.min(steps - 1)][m]);
    let z2 = ProcessSample::from_fn(format!("Z2_{}", agent + 1), paths, steps, |m, k| z2_cols[k.min(steps - 1)][m]);
    Ok(AgentSweep { agent, y, z1, z2, clamp_events, fits })
}

fn clamp(z: f64, z_max: f64) -> (f64, usize) {
    if z.abs() > z_max {
        (z.clamp(-z_max, z_max), 1)
    } else {
        (z, 0)
    }
}

/// Re-evaluates stored `Z1`, `Z2` coefficients on another bundle with the
/// same grid and agent count (for out-of-sample policy evaluation).
pub fn evaluate_fitted_z(
    fits: &[StepFit],
    basis: &RegressionBasis,
    bundle: &PathBundle,
    agent: usize,
    z_max: f64,
) -> Result<(ProcessSample, ProcessSample)> {
    let steps = bundle.steps();
    if fits.len() != steps {
        return Err(Error::DimensionMismatch(format!("{} fitted steps for a {steps}-step bundle", fits.len())));
    }
    let mut z1 = ProcessSample::zeros(format!("Z1_{}", agent + 1), bundle.paths(), steps);
    let mut z2 = ProcessSample::zeros(format!("Z2_{}", agent + 1), bundle.paths(), steps);
    let features: Vec<_> = (0..steps).map(|k| basis.features_at(bundle, agent, k)).collect();
    if features.iter().zip(fits).any(|(f, s)| f.len() != s.z1.len()) {
        return Err(Error::DimensionMismatch("basis does not match the fitted coefficients".into()));
    }
    let width = steps + 1;
    z1.values_mut()
        .par_chunks_mut(width)
        .zip(z2.values_mut().par_chunks_mut(width))
        .enumerate()
        .for_each(|(m, (r1, r2))| {
            let mut phi = vec![0.0; features.iter().map(|f| f.len()).max().unwrap_or(1)];
            for k in 0..steps {
                r1[k] = features[k].dot(m, &fits[k].z1, &mut phi).clamp(-z_max, z_max);
                r2[k] = features[k].dot(m, &fits[k].z2, &mut phi).clamp(-z_max, z_max);
            }
            r1[steps] = r1[steps - 1];
            r2[steps] = r2[steps - 1];
        });
    Ok((z1, z2))
}
