//! Market primitives, the endowment family and the sampled-process container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ridge `a * tanh(b x + c y + d)` of the bounded endowment family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeTerm {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

/// Terminal lump sum `e_T(x, y)` received by an agent, where `x = B(T)` is
/// the common noise and `y = W_i(T)` the agent's own noise.
#[derive(Debug, Clone, PartialEq)]
pub enum EndowmentSpec {
    /// `a0 + sum_m a_m tanh(b_m x + c_m y + d_m)`; bounded by `|a0| + sum |a_m|`.
    TanhRidge { a0: f64, terms: Vec<RidgeTerm> },
    /// `alpha x + beta y`. Unbounded, so outside the model's standing
    /// assumptions; kept because the equilibrium is known in closed form.
    LinearTest { alpha: f64, beta: f64 },
}

impl EndowmentSpec {
    pub fn constant(a0: f64) -> Self {
        Self::TanhRidge { a0, terms: Vec::new() }
    }

    pub fn tanh(a0: f64, terms: Vec<RidgeTerm>) -> Self {
        Self::TanhRidge { a0, terms }
    }

    pub fn linear(alpha: f64, beta: f64) -> Self {
        Self::LinearTest { alpha, beta }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::TanhRidge { .. } => "tanh_ridge",
            Self::LinearTest { .. } => "linear_test",
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, Self::TanhRidge { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match self {
            Self::TanhRidge { a0, terms } => {
                a0.is_finite()
                    && terms
                        .iter()
                        .all(|t| t.a.is_finite() && t.b.is_finite() && t.c.is_finite() && t.d.is_finite())
            }
            Self::LinearTest { alpha, beta } => alpha.is_finite() && beta.is_finite(),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::InvalidConfig("endowment coefficients must be finite".into()))
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Self::TanhRidge { a0, terms } => {
                a0 + terms
                    .iter()
                    .map(|t| t.a * (t.b * x + t.c * y + t.d).tanh())
                    .sum::<f64>()
            }
            Self::LinearTest { alpha, beta } => alpha * x + beta * y,
        }
    }

    /// Partial derivative in the common-noise argument `x`.
    pub fn dx(&self, x: f64, y: f64) -> f64 {
        match self {
            Self::TanhRidge { terms, .. } => terms
                .iter()
                .map(|t| {
                    let th = (t.b * x + t.c * y + t.d).tanh();
                    t.a * t.b * (1.0 - th * th)
                })
                .sum(),
            Self::LinearTest { alpha, .. } => *alpha,
        }
    }

    pub fn dxx(&self, x: f64, y: f64) -> f64 {
        match self {
            Self::TanhRidge { terms, .. } => terms
                .iter()
                .map(|t| {
                    let th = (t.b * x + t.c * y + t.d).tanh();
                    -2.0 * t.a * t.b * t.b * th * (1.0 - th * th)
                })
                .sum(),
            Self::LinearTest { .. } => 0.0,
        }
    }

    /// Declared sup-bound `C >= sup |e_T|`. `None` for the unbounded test family.
    pub fn bound(&self) -> Option<f64> {
        match self {
            Self::TanhRidge { a0, terms } => Some(a0.abs() + terms.iter().map(|t| t.a.abs()).sum::<f64>()),
            Self::LinearTest { .. } => None,
        }
    }

    /// Lipschitz constant of `e_T` in the max-coordinate sense.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Self::TanhRidge { terms, .. } => terms.iter().map(|t| t.a.abs() * t.b.abs().max(t.c.abs())).sum(),
            Self::LinearTest { alpha, beta } => alpha.abs().max(beta.abs()),
        }
    }

    /// Lipschitz constant of `x -> e_T(x, y)`, uniform in `y`.
    pub fn lipschitz_x(&self) -> f64 {
        match self {
            Self::TanhRidge { terms, .. } => terms.iter().map(|t| (t.a * t.b).abs()).sum(),
            Self::LinearTest { alpha, .. } => alpha.abs(),
        }
    }

    /// True when the payoff does not depend on the idiosyncratic noise.
    pub fn is_common_only(&self) -> bool {
        match self {
            Self::TanhRidge { terms, .. } => terms.iter().all(|t| t.c == 0.0 || t.a == 0.0),
            Self::LinearTest { beta, .. } => *beta == 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Self::TanhRidge { terms, .. } => terms.iter().all(|t| t.a == 0.0 || (t.b == 0.0 && t.c == 0.0)),
            Self::LinearTest { alpha, beta } => *alpha == 0.0 && *beta == 0.0,
        }
    }
}

/// Size and seed of one simulated market.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub agents: usize,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

impl MarketConfig {
    pub fn new(agents: usize, horizon: f64, steps: usize, paths: usize, seed: u64) -> Self {
        Self { agents, horizon, steps, paths, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents < 1 {
            return Err(Error::InvalidConfig("agent count N must be at least 1".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidConfig("horizon T must be positive".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidConfig("number of time steps must be at least 1".into()));
        }
        if self.paths < 2 {
            return Err(Error::InvalidConfig("number of paths must be at least 2".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.horizon, self.steps)
    }
}

/// Uniform grid `t_k = k T / K`, `k = 0..=K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Self {
        assert!(horizon > 0.0 && steps > 0, "time grid needs T > 0 and K >= 1");
        Self { horizon, steps }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_K` is returned as exactly `T`.
    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

/// Values of a process on every (path, time index) pair, stored path-major.
///
/// Integrands (Z, lambda, strategies) are used on `[t_k, t_{k+1})`; their
/// value at the terminal index is a copy of the last interior value.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSample {
    pub label: String,
    paths: usize,
    steps: usize,
    /// Value at index k uses only increments up to k.
    pub adapted: bool,
    values: Vec<f64>,
}

impl ProcessSample {
    pub fn zeros(label: impl Into<String>, paths: usize, steps: usize) -> Self {
        Self::constant(label, paths, steps, 0.0)
    }

    pub fn constant(label: impl Into<String>, paths: usize, steps: usize, value: f64) -> Self {
        Self {
            label: label.into(),
            paths,
            steps,
            adapted: true,
            values: vec![value; paths * (steps + 1)],
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> f64>(label: impl Into<String>, paths: usize, steps: usize, mut f: F) -> Self {
        let mut values = Vec::with_capacity(paths * (steps + 1));
        for m in 0..paths {
            for k in 0..=steps {
                values.push(f(m, k));
            }
        }
        Self { label: label.into(), paths, steps, adapted: true, values }
    }

    pub fn from_values(label: impl Into<String>, paths: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != paths * (steps + 1) {
            return Err(Error::DimensionMismatch(format!(
                "expected {} values for {paths} paths x {} times, got {}",
                paths * (steps + 1),
                steps + 1,
                values.len()
            )));
        }
        Ok(Self { label: label.into(), paths, steps, adapted: true, values })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn at(&self, m: usize, k: usize) -> f64 {
        self.values[m * (self.steps + 1) + k]
    }

    #[inline]
    pub fn set(&mut self, m: usize, k: usize, v: f64) {
        self.values[m * (self.steps + 1) + k] = v;
    }

    pub fn path(&self, m: usize) -> &[f64] {
        let w = self.steps + 1;
        &self.values[m * w..(m + 1) * w]
    }

    pub fn path_mut(&mut self, m: usize) -> &mut [f64] {
        let w = self.steps + 1;
        &mut self.values[m * w..(m + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.paths).map(|m| self.at(m, k)).collect()
    }

    pub fn set_column(&mut self, k: usize, column: &[f64]) {
        for (m, v) in column.iter().enumerate() {
            self.set(m, k, *v);
        }
    }

    pub fn same_shape(&self, other: &ProcessSample) -> bool {
        self.paths == other.paths && self.steps == other.steps
    }

    pub fn map(&self, label: impl Into<String>, f: impl Fn(f64) -> f64) -> Self {
        Self {
            label: label.into(),
            paths: self.paths,
            steps: self.steps,
            adapted: self.adapted,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &ProcessSample, label: impl Into<String>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch(format!(
                "{} is {}x{}, {} is {}x{}",
                self.label, self.paths, self.steps, other.label, other.paths, other.steps
            )));
        }
        Ok(Self {
            label: label.into(),
            paths: self.paths,
            steps: self.steps,
            adapted: self.adapted && other.adapted,
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn sub(&self, other: &ProcessSample) -> Result<Self> {
        self.zip_with(other, format!("{}-{}", self.label, other.label), |a, b| a - b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Writes `path,t,value` rows.
    pub fn write_csv<W: std::io::Write>(&self, grid: &TimeGrid, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "t", "value"])?;
        for m in 0..self.paths {
            for k in 0..=self.steps {
                w.write_record([m.to_string(), grid.t(k).to_string(), self.at(m, k).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// tanh through its continued fraction, independent of `f64::tanh`.
    fn tanh_cf(x: f64) -> f64 {
        let x2 = x * x;
        let mut acc = 2.0 * 40.0 + 1.0;
        for n in (1..40).rev() {
            acc = (2 * n + 1) as f64 + x2 / acc;
        }
        x / (1.0 + x2 / acc)
    }

    fn one_term(a: f64, b: f64, c: f64, d: f64) -> RidgeTerm {
        RidgeTerm { a, b, c, d }
    }

    #[test]
    fn constant_family_ignores_arguments() {
        assert_eq!(EndowmentSpec::constant(0.3).eval(5.0, -2.0), 0.3);
    }

    #[test]
    fn zero_argument_ridge_vanishes() {
        let e = EndowmentSpec::tanh(0.0, vec![one_term(1.0, 1.0, 0.0, 0.0)]);
        assert_eq!(e.eval(0.0, 7.0), 0.0);
    }

    #[test]
    fn mixed_ridge_matches_continued_fraction() {
        let e = EndowmentSpec::tanh(0.0, vec![one_term(1.0, 1.0, 1.0, 0.0)]);
        let reference = tanh_cf(1.0);
        assert_abs_diff_eq!(reference, 0.761594, epsilon = 1e-6);
        assert_abs_diff_eq!(e.eval(0.5, 0.5), reference, epsilon = 1e-6);
    }

    #[test]
    fn bound_is_triangle_sum() {
        assert_eq!(EndowmentSpec::constant(0.3).bound(), Some(0.3));
        let e = EndowmentSpec::tanh(0.1, vec![one_term(0.5, 1.0, 0.0, 0.0), one_term(0.2, 0.0, 1.0, 0.3)]);
        assert_abs_diff_eq!(e.bound().unwrap(), 0.8, epsilon = 1e-15);
        assert_eq!(EndowmentSpec::linear(0.5, 0.3).bound(), None);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let e = EndowmentSpec::tanh(0.2, vec![one_term(0.7, 1.3, -0.4, 0.1), one_term(-0.3, 0.5, 2.0, -1.0)]);
        let h = 1e-5;
        for &(x, y) in &[(0.0, 0.0), (0.7, -1.2), (-2.0, 0.4)] {
            let fd = (e.eval(x + h, y) - e.eval(x - h, y)) / (2.0 * h);
            assert_abs_diff_eq!(e.dx(x, y), fd, epsilon = 1e-9);
            let fd2 = (e.dx(x + h, y) - e.dx(x - h, y)) / (2.0 * h);
            assert_abs_diff_eq!(e.dxx(x, y), fd2, epsilon = 1e-8);
        }
    }

    #[test]
    fn grid_endpoints_are_exact() {
        let g = TimeGrid::new(0.7, 3);
        assert_eq!(g.t(0), 0.0);
        assert_eq!(g.t(3), 0.7);
        assert!(g.points().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_rejects_zero_agents() {
        assert!(MarketConfig::new(0, 1.0, 10, 10, 1).validate().is_err());
        assert!(MarketConfig::new(1, 1.0, 10, 1, 1).validate().is_err());
        assert!(MarketConfig::new(1, 0.0, 10, 10, 1).validate().is_err());
        assert!(MarketConfig::new(1, 1.0, 10, 10, 1).validate().is_ok());
    }

    fn ridge_strategy() -> impl Strategy<Value = EndowmentSpec> {
        let term = (-2.0..2.0f64, -3.0..3.0f64, -3.0..3.0f64, -2.0..2.0f64).prop_map(|(a, b, c, d)| RidgeTerm { a, b, c, d });
        (-1.0..1.0f64, proptest::collection::vec(term, 0..4)).prop_map(|(a0, terms)| EndowmentSpec::tanh(a0, terms))
    }

    proptest! {
        #[test]
        fn eval_never_exceeds_bound(spec in ridge_strategy()) {
            let c = spec.bound().unwrap();
            for i in 0..100 {
                for j in 0..100 {
                    let x = -10.0 + 0.2 * i as f64;
                    let y = -10.0 + 0.2 * j as f64;
                    prop_assert!(spec.eval(x, y).abs() <= c + 1e-12);
                }
            }
        }

        #[test]
        fn negation_flips_every_ridge(spec in ridge_strategy(), x in -5.0..5.0f64, y in -5.0..5.0f64) {
            let EndowmentSpec::TanhRidge { a0, terms } = &spec else { unreachable!() };
            let negated = EndowmentSpec::tanh(
                *a0,
                terms.iter().map(|t| RidgeTerm { a: t.a, b: -t.b, c: -t.c, d: -t.d }).collect(),
            );
            let mirrored = EndowmentSpec::tanh(
                *a0,
                terms.iter().map(|t| RidgeTerm { a: t.a, b: -t.b, c: -t.c, d: t.d }).collect(),
            );
            let centered = spec.eval(x, y) - a0;
            prop_assert!((negated.eval(x, y) - a0 + centered).abs() < 1e-12);
            prop_assert!((mirrored.eval(-x, -y) - spec.eval(x, y)).abs() < 1e-12);
        }
    }
}
