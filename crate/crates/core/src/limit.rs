//! The mean-field limit equation `dY = lambda^2/2 dt + lambda dB`,
//! `Y(T) = g(B_T)` with `g(x) = E[e_T(x, W(T))]`, solved through the
//! Cole–Hopf substitution `v = exp(-Y)`:
//!
//! ```text
//! v(t, b)      = E[exp(-g(b + sqrt(T - t) Z))]
//! Y(t, b)      = -log v(t, b)
//! lambda(t, b) = -v_b / v = E[g'(.) exp(-g(.))] / E[exp(-g(.))]
//! ```
//!
//! Both expectations are quadrature sums against the normal density,
//! evaluated with a log-sum-exp shift so large endowments do not overflow.
//! The default rule is the truncated trapezoidal rule: the tanh family is
//! analytic only in a strip (poles at `i pi / 2`), where Gauss–Hermite
//! converges slowly and the trapezoidal rule converges geometrically.

use rayon::prelude::*;

use crate::bsde::{backward_sweep, SweepOptions};
use crate::error::{Error, Result};
use crate::model::{EndowmentSpec, ProcessSample};
use crate::numeric::{mean, mean_and_se, NormalQuadrature, QuadratureKind};
use crate::paths::{doleans_exponential, Noise, PathBundle};
use crate::regression::RegressionBasis;

pub const DEFAULT_QUADRATURE_ORDER: usize = 64;

/// Agent-limit solves fail when the Girsanov weights keep less than this
/// fraction of the paths.
pub const MIN_ESS_FRACTION: f64 = 0.05;

const TABLE_SPACING: f64 = 0.005;

/// `g(x) = E[e_T(x, W(T))]` and its first two derivatives.
///
/// Values are served from a quintic Hermite table on a wide interval, built
/// from quadrature values of `g, g', g''`; points outside the table fall back
/// to direct quadrature.
#[derive(Debug, Clone)]
pub struct ConditionalEndowment {
    spec: EndowmentSpec,
    horizon: f64,
    rule: NormalQuadrature,
    lo: f64,
    table: Vec<[f64; 3]>,
}

impl ConditionalEndowment {
    pub fn new(spec: &EndowmentSpec, horizon: f64, order: usize) -> Result<Self> {
        Self::with_rule(spec, horizon, order, QuadratureKind::Trapezoid)
    }

    pub fn with_rule(spec: &EndowmentSpec, horizon: f64, order: usize, kind: QuadratureKind) -> Result<Self> {
        if order < 8 {
            return Err(Error::InvalidConfig(format!("quadrature order {order} is below 8")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidConfig("horizon T must be positive".into()));
        }
        spec.validate()?;
        let mut out = Self { spec: spec.clone(), horizon, rule: NormalQuadrature::new(kind, order), lo: 0.0, table: Vec::new() };
        // B(t) plus the widest node offset stays well inside this range.
        let half_width = 25.0 * horizon.sqrt() + 5.0;
        let n = (2.0 * half_width / TABLE_SPACING).ceil() as usize + 1;
        out.lo = -half_width;
        out.table = (0..n)
            .into_par_iter()
            .map(|j| {
                let x = -half_width + j as f64 * TABLE_SPACING;
                [out.exact(x), out.exact_dx(x), out.exact_dxx(x)]
            })
            .collect();
        Ok(out)
    }

    pub fn spec(&self) -> &EndowmentSpec {
        &self.spec
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn order(&self) -> usize {
        self.rule.order()
    }

    pub fn kind(&self) -> QuadratureKind {
        self.rule.kind
    }

    /// Direct quadrature `sum_j w_j e_T(x, sqrt(T) x_j)`.
    pub fn exact(&self, x: f64) -> f64 {
        self.rule.expect(self.horizon, |y| self.spec.eval(x, y))
    }

    pub fn exact_dx(&self, x: f64) -> f64 {
        self.rule.expect(self.horizon, |y| self.spec.dx(x, y))
    }

    pub fn exact_dxx(&self, x: f64) -> f64 {
        self.rule.expect(self.horizon, |y| self.spec.dxx(x, y))
    }

    pub fn value(&self, x: f64) -> f64 {
        self.value_and_slope(x).0
    }

    pub fn slope(&self, x: f64) -> f64 {
        self.value_and_slope(x).1
    }

    /// `(g(x), g'(x))`.
    pub fn value_and_slope(&self, x: f64) -> (f64, f64) {
        let pos = (x - self.lo) / TABLE_SPACING;
        if !(pos >= 0.0 && pos < (self.table.len() - 1) as f64) {
            return (self.exact(x), self.exact_dx(x));
        }
        let j = pos.floor() as usize;
        quintic_hermite(&self.table[j], &self.table[j + 1], pos - j as f64, TABLE_SPACING)
    }
}

/// Quintic Hermite interpolation on one cell from `[f, f', f'']` at both
/// ends; returns the value and the first derivative at fraction `s`.
fn quintic_hermite(a: &[f64; 3], b: &[f64; 3], s: f64, h: f64) -> (f64, f64) {
    let (s2, s3) = (s * s, s * s * s);
    let (s4, s5) = (s3 * s, s3 * s2);
    let h0 = 1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5;
    let h1 = s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5;
    let h2 = 0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5;
    let h3 = 0.5 * s3 - s4 + 0.5 * s5;
    let h4 = -4.0 * s3 + 7.0 * s4 - 3.0 * s5;
    let h5 = 10.0 * s3 - 15.0 * s4 + 6.0 * s5;
    let d0 = -30.0 * s2 + 60.0 * s3 - 30.0 * s4;
    let d1 = 1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4;
    let d2 = s - 4.5 * s2 + 6.0 * s3 - 2.5 * s4;
    let d3 = 1.5 * s2 - 4.0 * s3 + 2.5 * s4;
    let d4 = -12.0 * s2 + 28.0 * s3 - 15.0 * s4;
    let d5 = 30.0 * s2 - 60.0 * s3 + 30.0 * s4;
    let hh = h * h;
    let value = a[0] * h0 + h * a[1] * h1 + hh * a[2] * h2 + hh * b[2] * h3 + h * b[1] * h4 + b[0] * h5;
    let slope = (a[0] * d0 + h * a[1] * d1 + hh * a[2] * d2 + hh * b[2] * d3 + h * b[1] * d4 + b[0] * d5) / h;
    (value, slope)
}

/// How `lambda = -v_b / v` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MprMethod {
    /// Differentiate under the kernel through `g'`.
    Analytic,
    /// Central difference of `v` with step `sqrt(T - t) * 1e-4`.
    FiniteDifference,
}

/// Market price of risk at one point. At `t = T` the value is the one-sided
/// limit `g'(b)` and `extrapolated` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mpr {
    pub value: f64,
    pub extrapolated: bool,
}

#[derive(Debug, Clone)]
pub struct LimitSolution {
    g: ConditionalEndowment,
    rule: NormalQuadrature,
    method: MprMethod,
}

impl LimitSolution {
    pub fn new(spec: &EndowmentSpec, horizon: f64, order: usize) -> Result<Self> {
        Self::with_rule(spec, horizon, order, QuadratureKind::Trapezoid)
    }

    pub fn with_rule(spec: &EndowmentSpec, horizon: f64, order: usize, kind: QuadratureKind) -> Result<Self> {
        Ok(Self {
            g: ConditionalEndowment::with_rule(spec, horizon, order, kind)?,
            rule: NormalQuadrature::new(kind, order),
            method: MprMethod::Analytic,
        })
    }

    pub fn with_method(mut self, method: MprMethod) -> Self {
        self.method = method;
        self
    }

    pub fn conditional_endowment(&self) -> &ConditionalEndowment {
        &self.g
    }

    pub fn spec(&self) -> &EndowmentSpec {
        self.g.spec()
    }

    pub fn horizon(&self) -> f64 {
        self.g.horizon()
    }

    pub fn order(&self) -> usize {
        self.rule.order()
    }

    /// `(-log v, -v_b / v)` through one pass over the nodes.
    fn log_average(&self, t: f64, b: f64) -> (f64, f64) {
        let var = (self.horizon() - t).max(0.0);
        if var == 0.0 {
            let (g, dg) = self.g.value_and_slope(b);
            return (g, dg);
        }
        let scale = var.sqrt();
        let n = self.rule.order();
        let mut expo = [0.0f64; 256];
        let mut slopes = [0.0f64; 256];
        let mut heap_e;
        let mut heap_s;
        let (expo, slopes): (&mut [f64], &mut [f64]) = if n <= 256 {
            (&mut expo[..n], &mut slopes[..n])
        } else {
            heap_e = vec![0.0; n];
            heap_s = vec![0.0; n];
            (&mut heap_e[..], &mut heap_s[..])
        };
        let mut top = f64::NEG_INFINITY;
        for (j, x) in self.rule.nodes.iter().enumerate() {
            let (g, dg) = self.g.value_and_slope(b + scale * x);
            expo[j] = -g;
            slopes[j] = dg;
            top = top.max(-g);
        }
        let (mut s, mut sg) = (0.0, 0.0);
        for j in 0..n {
            let w = self.rule.weights[j] * (expo[j] - top).exp();
            s += w;
            sg += w * slopes[j];
        }
        let y = -(top + s.ln());
        (y, sg / s)
    }

    /// `v(t, b) = E[exp(-g(B_T)) | B_t = b]`.
    pub fn heat_average(&self, t: f64, b: f64) -> f64 {
        (-self.value(t, b)).exp()
    }

    /// `Y(t, b)`; equals `g(b)` at `t = T`.
    pub fn value(&self, t: f64, b: f64) -> f64 {
        self.log_average(t, b).0
    }

    pub fn mpr(&self, t: f64, b: f64) -> Mpr {
        if t >= self.horizon() {
            return Mpr { value: self.g.slope(b), extrapolated: true };
        }
        let value = match self.method {
            MprMethod::Analytic => self.log_average(t, b).1,
            MprMethod::FiniteDifference => {
                let h = (self.horizon() - t).sqrt() * 1e-4;
                let (up, down) = (self.heat_average(t, b + h), self.heat_average(t, b - h));
                -(up - down) / (2.0 * h * self.heat_average(t, b))
            }
        };
        Mpr { value, extrapolated: false }
    }

    /// `u_t + u_bb / 2 - u_b^2 / 2` from central differences with spacing `h`.
    pub fn pde_residual(&self, t: f64, b: f64, h: f64) -> f64 {
        let u = |t, b| self.value(t, b);
        let centre = u(t, b);
        let (up, down) = (u(t, b + h), u(t, b - h));
        let u_t = (u(t + h, b) - u(t - h, b)) / (2.0 * h);
        let u_b = (up - down) / (2.0 * h);
        let u_bb = (up - 2.0 * centre + down) / (h * h);
        u_t + 0.5 * u_bb - 0.5 * u_b * u_b
    }

    /// Limit value and market price of risk on every node of a bundle.
    pub fn along_paths(&self, bundle: &PathBundle) -> LimitPaths {
        let grid = bundle.grid();
        let (paths, steps) = (bundle.paths(), bundle.steps());
        let mut y = ProcessSample::zeros("Y_limit", paths, steps);
        let mut lambda = ProcessSample::zeros("lambda_limit", paths, steps);
        y.values_mut()
            .par_chunks_mut(steps + 1)
            .zip(lambda.values_mut().par_chunks_mut(steps + 1))
            .enumerate()
            .for_each(|(m, (ry, rl))| {
                for k in 0..=steps {
                    let b = bundle.common(m, k);
                    if k == steps {
                        ry[k] = self.g.value(b);
                        rl[k] = self.mpr(grid.t(k), b).value;
                    } else {
                        let (v, l) = self.log_average(grid.t(k), b);
                        ry[k] = v;
                        rl[k] = match self.method {
                            MprMethod::Analytic => l,
                            MprMethod::FiniteDifference => self.mpr(grid.t(k), b).value,
                        };
                    }
                }
            });
        LimitPaths { y, lambda }
    }
}

/// `Y(t_k, B_k)` and `lambda(t_k, B_k)` on a bundle. The terminal lambda is
/// the extrapolated `g'(B_T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitPaths {
    pub y: ProcessSample,
    pub lambda: ProcessSample,
}

/// Monte Carlo cross-check of `Y(0)` under the measure that makes
/// `B + int lambda dt` a Brownian motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GirsanovCheck {
    pub y0_regression: f64,
    pub y0_weighted: f64,
    pub standard_error: f64,
    pub effective_sample_size: f64,
    pub clamp_events: usize,
}

/// Per-agent limit solution `Y, Z1, Z2` on the agent's `(B, W_i)` paths.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentLimitSolution {
    pub agent: usize,
    pub y: ProcessSample,
    pub z1: ProcessSample,
    pub z2: ProcessSample,
    pub lambda: ProcessSample,
    pub clamp_events: usize,
    pub girsanov: GirsanovCheck,
}

/// Solves `dY = Z1 dB + Z2 dW_i - (lambda^2/2 - lambda Z1) dt` with the limit
/// `lambda` frozen, by backward regression on a basis without the
/// cross-sectional coordinate (the limit solution sees only `B` and `W_i`).
pub fn solve_agent_limit(
    bundle: &PathBundle,
    solution: &LimitSolution,
    basis: &RegressionBasis,
    agent: usize,
) -> Result<AgentLimitSolution> {
    let lambda = solution.along_paths(bundle).lambda;
    solve_agent_limit_with(bundle, solution.spec(), &lambda, basis, agent)
}

/// As [`solve_agent_limit`] with the limit lambda already evaluated on the bundle.
pub fn solve_agent_limit_with(
    bundle: &PathBundle,
    spec: &EndowmentSpec,
    lambda: &ProcessSample,
    basis: &RegressionBasis,
    agent: usize,
) -> Result<AgentLimitSolution> {
    let weights = doleans_exponential(lambda, bundle, Noise::Common)?;
    let ess = weights.effective_sample_size();
    let threshold = MIN_ESS_FRACTION * bundle.paths() as f64;
    if !(ess >= threshold) {
        return Err(Error::WeightDegeneracy { ess, threshold });
    }
    let reduced = RegressionBasis::without_mean_field(basis.degree());
    let sweep = backward_sweep(bundle, lambda, spec, &reduced, agent, SweepOptions::for_endowment(spec))?;

    let steps = bundle.steps();
    let dt = bundle.grid().dt();
    let terminal = weights.terminal();
    let samples: Vec<f64> = (0..bundle.paths())
        .map(|m| {
            let running: f64 = (0..steps).map(|k| 0.5 * lambda.at(m, k).powi(2) * dt).sum();
            let payoff = spec.eval(bundle.common(m, steps), bundle.own(agent, m, steps));
            terminal[m] * (payoff + running)
        })
        .collect();
    let (y0_weighted, standard_error) = mean_and_se(&samples);
    let girsanov = GirsanovCheck {
        y0_regression: mean(&sweep.y.column(0)),
        y0_weighted,
        standard_error,
        effective_sample_size: ess,
        clamp_events: weights.clamp_events,
    };
    Ok(AgentLimitSolution {
        agent,
        y: sweep.y,
        z1: sweep.z1,
        z2: sweep.z2,
        lambda: lambda.clone(),
        clamp_events: sweep.clamp_events,
        girsanov,
    })
}

/// Local truncation error of the explicit scheme on the exact limit
/// solution: the path average of
/// `sum_k |Y(t_k, B_k) - E_k[Y(t_{k+1}, B_{k+1})] + lambda_k^2 dt / 2|`,
/// with the one-step expectation taken by quadrature. It is `O(dt)`.
pub fn scheme_truncation_error(solution: &LimitSolution, bundle: &PathBundle) -> f64 {
    let grid = bundle.grid();
    let dt = grid.dt();
    let rule = NormalQuadrature::gauss_hermite(16);
    let per_path: Vec<f64> = (0..bundle.paths())
        .into_par_iter()
        .map(|m| {
            (0..bundle.steps())
                .map(|k| {
                    let b = bundle.common(m, k);
                    let (y, l) = solution.log_average(grid.t(k), b);
                    let next = rule.expect(dt, |z| solution.value(grid.t(k + 1), b + z));
                    (y - next + 0.5 * l * l * dt).abs()
                })
                .sum()
        })
        .collect();
    mean(&per_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MarketConfig, RidgeTerm};
    use crate::paths::simulate_paths;
    use approx::assert_abs_diff_eq;

    fn ridge(a: f64, b: f64, c: f64) -> RidgeTerm {
        RidgeTerm { a, b, c, d: 0.0 }
    }

    #[test]
    fn quintic_hermite_reproduces_quintics() {
        let f = |x: f64| [x.powi(5) - 2.0 * x * x + 1.0, 5.0 * x.powi(4) - 4.0 * x, 20.0 * x.powi(3) - 4.0];
        let (x0, h) = (0.3, 0.7);
        for s in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let (v, d) = quintic_hermite(&f(x0), &f(x0 + h), s, h);
            let exact = f(x0 + s * h);
            assert_abs_diff_eq!(v, exact[0], epsilon = 1e-13);
            assert_abs_diff_eq!(d, exact[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn odd_idiosyncratic_payoff_averages_to_zero() {
        let g = ConditionalEndowment::new(&EndowmentSpec::tanh(0.0, vec![ridge(1.0, 0.0, 1.0)]), 1.0, 64).unwrap();
        for x in [-2.0, 0.0, 0.4, 3.0] {
            assert!(g.value(x).abs() < 1e-15);
        }
    }

    #[test]
    fn common_only_payoff_is_unchanged() {
        let g = ConditionalEndowment::new(&EndowmentSpec::tanh(0.0, vec![ridge(1.0, 1.0, 0.0)]), 1.0, 64).unwrap();
        for x in [-2.0, 0.0, 0.4, 3.0, 40.0] {
            assert_abs_diff_eq!(g.value(x), x.tanh(), epsilon = 1e-14);
            assert_abs_diff_eq!(g.slope(x), 1.0 - x.tanh().powi(2), epsilon = 1e-12);
        }
    }

    #[test]
    fn table_matches_direct_quadrature() {
        let spec = EndowmentSpec::tanh(0.1, vec![ridge(0.7, 1.3, 0.8), RidgeTerm { a: -0.4, b: 2.0, c: -1.0, d: 0.3 }]);
        let g = ConditionalEndowment::new(&spec, 1.0, 64).unwrap();
        for j in 0..400 {
            let x = -4.0 + 0.0201 * j as f64;
            assert_abs_diff_eq!(g.value(x), g.exact(x), epsilon = 1e-13);
            assert_abs_diff_eq!(g.slope(x), g.exact_dx(x), epsilon = 1e-11);
        }
    }

    #[test]
    fn rejects_low_order() {
        assert!(ConditionalEndowment::new(&EndowmentSpec::constant(0.0), 1.0, 7).is_err());
    }

    #[test]
    fn constant_payoff_gives_constant_value() {
        let sol = LimitSolution::new(&EndowmentSpec::constant(0.3), 1.0, 64).unwrap();
        for (t, b) in [(0.0, 0.0), (0.5, 2.0), (1.0, -1.0)] {
            assert_abs_diff_eq!(sol.value(t, b), 0.3, epsilon = 1e-14);
            assert!(sol.mpr(t, b).value.abs() < 1e-14);
        }
    }

    #[test]
    fn linear_payoff_matches_closed_form() {
        let alpha = 0.5;
        let sol = LimitSolution::new(&EndowmentSpec::linear(alpha, 0.3), 1.0, 64).unwrap();
        for t in [0.0, 0.3, 0.9] {
            for b in [-1.5, 0.0, 0.8] {
                assert_abs_diff_eq!(sol.value(t, b), alpha * b - 0.5 * alpha * alpha * (1.0 - t), epsilon = 1e-8);
                assert_abs_diff_eq!(sol.mpr(t, b).value, alpha, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn even_payoff_has_zero_price_at_origin() {
        let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 1.0, b: 1.0, c: 0.0, d: 0.5 }, RidgeTerm { a: 1.0, b: -1.0, c: 0.0, d: 0.5 }]);
        let sol = LimitSolution::new(&spec, 1.0, 64).unwrap();
        for t in [0.0, 0.5, 0.99] {
            assert!(sol.mpr(t, 0.0).value.abs() < 1e-13);
        }
    }

    #[test]
    fn terminal_value_and_extrapolated_price() {
        let spec = EndowmentSpec::tanh(0.0, vec![ridge(1.0, 1.0, 0.0)]);
        let sol = LimitSolution::new(&spec, 1.0, 64).unwrap();
        assert_abs_diff_eq!(sol.value(1.0, 0.7), 0.7f64.tanh(), epsilon = 1e-14);
        let m = sol.mpr(1.0, 0.7);
        assert!(m.extrapolated);
        assert!(!sol.mpr(0.999, 0.7).extrapolated);
        assert_abs_diff_eq!(m.value, sol.mpr(1.0 - 1e-9, 0.7).value, epsilon = 1e-6);
    }

    #[test]
    fn finite_difference_price_agrees() {
        let spec = EndowmentSpec::tanh(0.0, vec![ridge(0.5, 1.0, 0.0), ridge(0.5, 0.0, 1.0)]);
        let sol = LimitSolution::new(&spec, 1.0, 64).unwrap();
        let fd = sol.clone().with_method(MprMethod::FiniteDifference);
        for t in [0.0, 0.4, 0.9] {
            for b in [-2.0, -0.5, 0.0, 1.0, 2.5] {
                assert_abs_diff_eq!(sol.mpr(t, b).value, fd.mpr(t, b).value, epsilon = 1e-6);
                let h = 1e-5;
                let slope = (sol.value(t, b + h) - sol.value(t, b - h)) / (2.0 * h);
                assert_abs_diff_eq!(sol.mpr(t, b).value, slope, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn maximum_principle_and_price_bound() {
        let spec = EndowmentSpec::tanh(0.2, vec![ridge(0.6, 2.0, 0.5), RidgeTerm { a: -0.3, b: 1.0, c: 1.0, d: 0.4 }]);
        let sol = LimitSolution::new(&spec, 1.0, 64).unwrap();
        let g = sol.conditional_endowment();
        let xs: Vec<f64> = (0..2001).map(|j| -10.0 + 0.01 * j as f64).collect();
        let lo = xs.iter().map(|x| g.value(*x)).fold(f64::INFINITY, f64::min);
        let hi = xs.iter().map(|x| g.value(*x)).fold(f64::NEG_INFINITY, f64::max);
        for i in 0..=10 {
            for j in 0..=40 {
                let (t, b) = (0.1 * i as f64, -4.0 + 0.2 * j as f64);
                let y = sol.value(t, b);
                assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                assert!(sol.mpr(t, b).value.abs() <= 10.0 * spec.lipschitz_x());
                assert!(sol.heat_average(t, b) > 0.0);
            }
        }
    }

    #[test]
    fn doubling_quadrature_order_is_stable() {
        let spec = EndowmentSpec::tanh(0.0, vec![ridge(0.5, 1.0, 0.0), ridge(0.5, 0.0, 1.0)]);
        let a = LimitSolution::new(&spec, 1.0, 64).unwrap();
        let b = LimitSolution::new(&spec, 1.0, 128).unwrap();
        for t in [0.0, 0.5, 0.95] {
            for x in [-3.0, -1.0, 0.0, 0.5, 2.0] {
                assert!((a.value(t, x) - b.value(t, x)).abs() <= 1e-10);
                assert!((a.mpr(t, x).value - b.mpr(t, x).value).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn gauss_hermite_rule_agrees_to_moderate_accuracy() {
        let spec = EndowmentSpec::tanh(0.0, vec![ridge(0.5, 1.0, 0.0), ridge(0.5, 0.0, 1.0)]);
        let a = LimitSolution::new(&spec, 1.0, 64).unwrap();
        let b = LimitSolution::with_rule(&spec, 1.0, 64, QuadratureKind::GaussHermite).unwrap();
        for x in [-1.0, 0.0, 0.5] {
            assert_abs_diff_eq!(a.value(0.0, x), b.value(0.0, x), epsilon = 1e-9);
            assert_abs_diff_eq!(a.mpr(0.0, x).value, b.mpr(0.0, x).value, epsilon = 1e-8);
        }
    }

    #[test]
    fn along_paths_matches_pointwise() {
        let spec = EndowmentSpec::tanh(0.0, vec![ridge(1.0, 1.0, 0.0)]);
        let sol = LimitSolution::new(&spec, 1.0, 64).unwrap();
        let bundle = simulate_paths(&MarketConfig::new(1, 1.0, 5, 20, 3)).unwrap();
        let lp = sol.along_paths(&bundle);
        let grid = bundle.grid();
        for m in 0..20 {
            for k in 0..5 {
                assert_eq!(lp.y.at(m, k), sol.value(grid.t(k), bundle.common(m, k)));
                assert_eq!(lp.lambda.at(m, k), sol.mpr(grid.t(k), bundle.common(m, k)).value);
            }
            assert!((lp.y.at(m, 5) - bundle.common(m, 5).tanh()).abs() < 1e-14);
        }
    }

    #[test]
    fn agent_limit_constant_payoff() {
        let spec = EndowmentSpec::constant(0.4);
        let sol = LimitSolution::new(&spec, 1.0, 64).unwrap();
        let bundle = simulate_paths(&MarketConfig::new(1, 1.0, 10, 400, 1)).unwrap();
        let a = solve_agent_limit(&bundle, &sol, &RegressionBasis::new(2), 0).unwrap();
        assert!(a.y.values().iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(a.z1.max_abs() < 1e-12 && a.z2.max_abs() < 1e-12);
    }

    #[test]
    fn agent_limit_linear_payoff() {
        let (alpha, beta) = (0.5, 0.3);
        let spec = EndowmentSpec::linear(alpha, beta);
        let sol = LimitSolution::new(&spec, 1.0, 64).unwrap();
        let bundle = simulate_paths(&MarketConfig::new(2, 1.0, 10, 2000, 5)).unwrap();
        let a = solve_agent_limit(&bundle, &sol, &RegressionBasis::new(1), 1).unwrap();
        let grid = bundle.grid();
        for m in 0..2000 {
            for k in 0..=10 {
                let y = alpha * bundle.common(m, k) + beta * bundle.own(1, m, k) - 0.5 * alpha * alpha * (1.0 - grid.t(k));
                assert!((a.y.at(m, k) - y).abs() < 1e-8);
                assert!((a.z1.at(m, k) - alpha).abs() < 1e-8);
                assert!((a.z2.at(m, k) - beta).abs() < 1e-8);
            }
        }
        // Y(0) = -alpha^2 T / 2 and the weighted estimate agrees within 4 standard errors.
        let g = a.girsanov;
        assert_abs_diff_eq!(g.y0_regression, -0.125, epsilon = 1e-8);
        assert!((g.y0_weighted - g.y0_regression).abs() <= 4.0 * g.standard_error);
    }

    #[test]
    fn degenerate_weights_are_reported() {
        let spec = EndowmentSpec::constant(0.0);
        let bundle = simulate_paths(&MarketConfig::new(1, 1.0, 10, 400, 1)).unwrap();
        let lambda = ProcessSample::constant("l", 400, 10, 6.0);
        match solve_agent_limit_with(&bundle, &spec, &lambda, &RegressionBasis::new(1), 0) {
            Err(Error::WeightDegeneracy { ess, threshold }) => assert!(ess < threshold),
            other => panic!("expected weight degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn truncation_error_halves_with_the_step() {
        let spec = EndowmentSpec::tanh(0.0, vec![ridge(1.0, 1.0, 0.0)]);
        let sol = LimitSolution::new(&spec, 1.0, 32).unwrap();
        let coarse = simulate_paths(&MarketConfig::new(1, 1.0, 10, 200, 2)).unwrap();
        let fine = simulate_paths(&MarketConfig::new(1, 1.0, 20, 200, 2)).unwrap();
        let ratio = scheme_truncation_error(&sol, &coarse) / scheme_truncation_error(&sol, &fine);
        assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
    }
}
