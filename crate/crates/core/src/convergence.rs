//! Discrete norms and the N-sweep comparing the N-agent equilibrium with the
//! mean-field limit on common Brownian paths.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limit::{solve_agent_limit_with, ConditionalEndowment, LimitSolution};
use crate::model::{EndowmentSpec, MarketConfig, ProcessSample};
use crate::nagent::{picard_solve, EquilibriumSolution, PicardOptions};
use crate::numeric::{mean, quantile, symmetric_mean};
use crate::paths::{simulate_paths, PathBundle};
use crate::regression::RegressionBasis;

fn check_order(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("norm order {p} must be a finite number >= 1")))
    }
}

/// `(mean_m max_k |x|^p)^{1/p}`.
pub fn sp_norm(x: &ProcessSample, p: f64) -> Result<f64> {
    check_order(p)?;
    let per_path: Vec<f64> = (0..x.paths())
        .map(|m| x.path(m).iter().fold(0.0f64, |acc, v| acc.max(v.abs())).powf(p))
        .collect();
    Ok(mean(&per_path).powf(1.0 / p))
}

/// `(mean_m (sum_{k<K} x^2 dt)^{p/2})^{1/p}`.
pub fn hp_norm(x: &ProcessSample, p: f64, dt: f64) -> Result<f64> {
    check_order(p)?;
    let steps = x.steps();
    let per_path: Vec<f64> = (0..x.paths())
        .map(|m| x.path(m)[..steps].iter().map(|v| v * v * dt).sum::<f64>().powf(p / 2.0))
        .collect();
    Ok(mean(&per_path).powf(1.0 / p))
}

/// `Ybar_N = (1/N) sum_i Y^i`, symmetric in the agents.
pub fn representative_agent(sol: &EquilibriumSolution) -> ProcessSample {
    let first = &sol.agents[0].y;
    let mut buf = vec![0.0; sol.agents.len()];
    ProcessSample::from_fn("Ybar", first.paths(), first.steps(), |m, k| {
        for (b, a) in buf.iter_mut().zip(&sol.agents) {
            *b = a.y.at(m, k);
        }
        symmetric_mean(&buf)
    })
}

/// Moment norm of the predictable bracket of `M_N = (1/N) sum_i int Z2^i dW_i`:
/// `(mean_m (sum_{k<K} (1/N^2) sum_i (Z2^i)^2 dt)^{p/2})^{1/p}`.
pub fn mn_qv_norm(sol: &EquilibriumSolution, p: f64, dt: f64) -> Result<f64> {
    check_order(p)?;
    let n = sol.agents.len() as f64;
    let z = &sol.agents[0].z2;
    let steps = z.steps();
    let per_path: Vec<f64> = (0..z.paths())
        .map(|m| {
            let bracket: f64 = (0..steps)
                .map(|k| sol.agents.iter().map(|a| a.z2.at(m, k).powi(2)).sum::<f64>() * dt / (n * n))
                .sum();
            bracket.powf(p / 2.0)
        })
        .collect();
    Ok(mean(&per_path).powf(1.0 / p))
}

/// `sqrt(mean_m ((1/N) sum_i e_T(B_T, W_i(T)) - g(B_T))^2)` over all agents of the bundle.
pub fn lln_terminal_error(g: &ConditionalEndowment, bundle: &PathBundle) -> f64 {
    let k = bundle.steps();
    let n = bundle.agents();
    let sq: Vec<f64> = (0..bundle.paths())
        .map(|m| {
            let b = bundle.common(m, k);
            let avg = (0..n).map(|i| g.spec().eval(b, bundle.own(i, m, k))).sum::<f64>() / n as f64;
            (avg - g.value(b)).powi(2)
        })
        .collect();
    mean(&sq).sqrt()
}

/// Settings of an N-sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub spec: EndowmentSpec,
    pub basis: RegressionBasis,
    pub picard: PicardOptions,
    pub agent_counts: Vec<usize>,
    pub orders: Vec<f64>,
    /// Record wall-clock seconds per N. Off for bit-reproducible artifacts.
    pub timing: bool,
}

/// One row of the convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    #[serde(rename = "N")]
    pub n: usize,
    pub p: f64,
    pub sp_diff: f64,
    pub hp_diff_lambda: f64,
    pub mn_norm: f64,
    pub lln_error: f64,
    pub y_agent_diff: f64,
    pub z1_agent_diff: f64,
    pub z2_agent_diff: f64,
    pub wall_time_s: Option<f64>,
}

/// A sweep entry whose solve failed; the sweep continues past it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepFailure {
    #[serde(rename = "N")]
    pub n: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ConvergenceOutcome {
    pub rows: Vec<NormReport>,
    pub failures: Vec<SweepFailure>,
}

impl ConvergenceOutcome {
    pub fn rows_for_order(&self, p: f64) -> Vec<&NormReport> {
        self.rows.iter().filter(|r| r.p == p).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record([
                "N", "p", "sp_diff", "hp_diff_lambda", "mn_norm", "lln_error", "y_agent_diff", "z1_agent_diff", "z2_agent_diff",
                "wall_time_s",
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Norms for one N, given a solved equilibrium on `bundle`.
pub fn norms_for(
    sol: &EquilibriumSolution,
    bundle: &PathBundle,
    limit: &LimitSolution,
    basis: &RegressionBasis,
    orders: &[f64],
) -> Result<Vec<NormReport>> {
    let dt = bundle.grid().dt();
    let lp = limit.along_paths(bundle);
    let agent = solve_agent_limit_with(bundle, limit.spec(), &lp.lambda, basis, 0)?;
    let ybar = representative_agent(sol);
    let y_diff = ybar.sub(&lp.y)?;
    let l_diff = sol.lambda.sub(&lp.lambda)?;
    let a = &sol.agents[0];
    let ya = a.y.sub(&agent.y)?;
    let z1a = a.z1.sub(&agent.z1)?;
    let z2a = a.z2.sub(&agent.z2)?;
    let lln = lln_terminal_error(limit.conditional_endowment(), bundle);
    orders
        .iter()
        .map(|&p| {
            Ok(NormReport {
                n: bundle.agents(),
                p,
                sp_diff: sp_norm(&y_diff, p)?,
                hp_diff_lambda: hp_norm(&l_diff, p, dt)?,
                mn_norm: mn_qv_norm(sol, p, dt)?,
                lln_error: lln,
                y_agent_diff: sp_norm(&ya, p)?,
                z1_agent_diff: hp_norm(&z1a, p, dt)?,
                z2_agent_diff: hp_norm(&z2a, p, dt)?,
                wall_time_s: None,
            })
        })
        .collect()
}

/// Runs the N-sweep. Bundles for different N share `B` and the first
/// idiosyncratic components, so every comparison uses common random numbers.
/// `progress` receives one line per stage.
pub fn convergence_report(config: &SweepConfig, mut progress: impl FnMut(&str)) -> Result<ConvergenceOutcome> {
    for p in &config.orders {
        check_order(*p)?;
    }
    let limit = LimitSolution::new(&config.spec, config.horizon, config.picard.quadrature_order)?;
    let mut out = ConvergenceOutcome::default();
    for &n in &config.agent_counts {
        let start = Instant::now();
        progress(&format!("N={n}: solving"));
        let result = simulate_paths(&MarketConfig::new(n, config.horizon, config.steps, config.paths, config.seed))
            .and_then(|bundle| {
                let sol = picard_solve(&bundle, &config.spec, &config.basis, &config.picard)?;
                norms_for(&sol, &bundle, &limit, &config.basis, &config.orders)
            });
        match result {
            Ok(mut rows) => {
                let secs = start.elapsed().as_secs_f64();
                for r in rows.iter_mut() {
                    r.wall_time_s = config.timing.then_some(secs);
                }
                progress(&format!("N={n}: done"));
                out.rows.extend(rows);
            }
            Err(e) => {
                progress(&format!("N={n}: failed: {e}"));
                out.failures.push(SweepFailure { n, error: e.to_string() });
            }
        }
    }
    Ok(out)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Outcome class of the conditional-independence probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeStatus {
    Ok,
    /// Residuals vanish; correlations are undefined.
    Degenerate,
    /// The endowment ignores the idiosyncratic noise, so residuals coincide
    /// across agents and correlations near 1 are expected.
    CommonOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IidProbe {
    pub status: ProbeStatus,
    pub time_index: usize,
    pub bins: usize,
    /// Set when fewer bins than requested were used.
    pub widened: bool,
    /// Row-major `k x k`.
    pub correlation: Vec<f64>,
    pub mean_abs_off_diagonal: f64,
}

/// Minimum number of paths per bin of `B(t_mid)`.
pub const MIN_BIN_COUNT: usize = 30;

/// Cross-agent correlation of `Y^(i,N)(t) - Y^(i)(t)` after removing the
/// mean within bins of `B(t)`.
pub fn conditional_iid_probe(
    sol: &EquilibriumSolution,
    limits: &[ProcessSample],
    bundle: &PathBundle,
    time_index: usize,
    bins: usize,
) -> Result<IidProbe> {
    let k = limits.len();
    if k < 2 || k > sol.agents.len() {
        return Err(Error::InvalidConfig(format!("probe needs 2..={} agents, got {k}", sol.agents.len())));
    }
    let paths = bundle.paths();
    let used = bins.clamp(1, (paths / MIN_BIN_COUNT).max(1));
    let b: Vec<f64> = (0..paths).map(|m| bundle.common(m, time_index)).collect();
    let edges: Vec<f64> = (1..used).map(|j| quantile(&b, j as f64 / used as f64)).collect();
    let bin_of = |x: f64| edges.iter().take_while(|e| x > **e).count();
    let mut residuals: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..paths).map(|m| sol.agents[i].y.at(m, time_index) - limits[i].at(m, time_index)).collect())
        .collect();
    for r in residuals.iter_mut() {
        let mut sums = vec![0.0; used];
        let mut counts = vec![0usize; used];
        for m in 0..paths {
            sums[bin_of(b[m])] += r[m];
            counts[bin_of(b[m])] += 1;
        }
        for m in 0..paths {
            let j = bin_of(b[m]);
            r[m] -= sums[j] / counts[j] as f64;
        }
    }
    let sd: Vec<f64> = residuals.iter().map(|r| (r.iter().map(|v| v * v).sum::<f64>() / paths as f64).sqrt()).collect();
    let status = if sd.iter().all(|s| *s < 1e-12) {
        ProbeStatus::Degenerate
    } else if sol.spec.is_common_only() {
        ProbeStatus::CommonOnly
    } else {
        ProbeStatus::Ok
    };
    let mut correlation = vec![f64::NAN; k * k];
    let mut off = Vec::new();
    if status != ProbeStatus::Degenerate {
        for i in 0..k {
            for j in 0..k {
                let c = residuals[i].iter().zip(&residuals[j]).map(|(a, b)| a * b).sum::<f64>() / paths as f64;
                let rho = c / (sd[i] * sd[j]);
                correlation[i * k + j] = rho;
                if i < j {
                    off.push(rho.abs());
                }
            }
        }
    }
    Ok(IidProbe {
        status,
        time_index,
        bins: used,
        widened: used < bins,
        correlation,
        mean_abs_off_diagonal: if off.is_empty() { f64::NAN } else { mean(&off) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RidgeTerm;
    use approx::assert_abs_diff_eq;

    fn hand() -> ProcessSample {
        ProcessSample::from_values("h", 3, 2, vec![0.0, 1.0, -2.0, 0.5, 0.5, 0.5, 0.0, -3.0, 1.0]).unwrap()
    }

    #[test]
    fn sp_norm_by_enumeration() {
        let x = hand();
        // path maxima of |x|: 2, 0.5, 3
        assert_abs_diff_eq!(sp_norm(&x, 1.0).unwrap(), (2.0 + 0.5 + 3.0) / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sp_norm(&x, 2.0).unwrap(), ((4.0 + 0.25 + 9.0) / 3.0f64).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn hp_norm_by_enumeration() {
        let x = hand();
        let dt = 0.5;
        // interior sums of squares: 1, 0.5, 9
        let q = [1.0 * dt, 0.5 * dt, 9.0 * dt];
        assert_abs_diff_eq!(hp_norm(&x, 2.0, dt).unwrap(), (q.iter().sum::<f64>() / 3.0).sqrt(), epsilon = 1e-15);
        let p4 = (q.iter().map(|v| v * v).sum::<f64>() / 3.0).powf(0.25);
        assert_abs_diff_eq!(hp_norm(&x, 4.0, dt).unwrap(), p4, epsilon = 1e-15);
    }

    #[test]
    fn norms_of_zero_and_constants() {
        let z = ProcessSample::zeros("0", 5, 4);
        let c = ProcessSample::constant("c", 5, 4, -0.7);
        for p in [1.0, 2.0, 4.0] {
            assert_eq!(sp_norm(&z, p).unwrap(), 0.0);
            assert_eq!(hp_norm(&z, p, 0.25).unwrap(), 0.0);
            assert_abs_diff_eq!(sp_norm(&c, p).unwrap(), 0.7, epsilon = 1e-15);
            assert_abs_diff_eq!(hp_norm(&c, p, 0.25).unwrap(), 0.7, epsilon = 1e-15);
        }
        assert!(sp_norm(&z, 0.5).is_err());
    }

    #[test]
    fn slope_of_a_power_law() {
        let x = [2.0, 4.0, 8.0, 16.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        assert_abs_diff_eq!(log_log_slope(&x, &y), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn lln_error_vanishes_for_common_only_payoffs() {
        let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 1.0, b: 1.0, c: 0.0, d: 0.0 }]);
        let g = ConditionalEndowment::new(&spec, 1.0, 64).unwrap();
        let bundle = simulate_paths(&MarketConfig::new(3, 1.0, 4, 200, 1)).unwrap();
        assert!(lln_terminal_error(&g, &bundle) < 1e-13);
    }
}
