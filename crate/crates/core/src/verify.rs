//! Optimality checks for the equilibrium strategies and sampling checks of the
//! structural conditions behind existence and uniqueness.
//!
//! Matrices `z` are `N x (N+1)` and row-major. Column 0 loads on `B`, column
//! `j + 1` on `W_j`. The equilibrium driver is written as a drift,
//! `dY = z dW + f(z) dt` with `f_i(z) = -lambda^2/2 + lambda z_{i1}`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{EndowmentSpec, ProcessSample};
use crate::nagent::{vectorized_driver, PolicyPaths, Strategy};
use crate::numeric::mean_and_se;
use crate::paths::{Noise, PathBundle};

/// Tolerance on report margins.
pub const MARGIN_TOLERANCE: f64 = 1e-12;
/// Tolerance of the algebraic transcription identities.
pub const TRANSCRIPTION_TOLERANCE: f64 = 1e-10;
/// Default sampling radius of the condition checks.
pub const DEFAULT_RADIUS: f64 = 10.0;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform sample from the ball of radius `r` in `R^dim`.
fn ball(rng: &mut ChaCha8Rng, dim: usize, r: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = r * rng.gen::<f64>().powf(1.0 / dim as f64) / norm;
    v.iter_mut().for_each(|x| *x *= scale);
    v
}

/// A matrix with the equilibrium sparsity, free entries uniform in a ball.
fn sparse_z(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    let free = ball(rng, 2 * n, r);
    let mut z = vec![0.0; n * (n + 1)];
    for i in 0..n {
        z[i * (n + 1)] = free[2 * i];
        z[i * (n + 1) + i + 1] = free[2 * i + 1];
    }
    z
}

fn frobenius(z: &[f64]) -> f64 {
    z.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Optimality
// ---------------------------------------------------------------------------

/// `X(0) = 0`, `dX = pi0 (lambda dt + dB) + pii dW_i`, by left-point sums.
pub fn gains_process(strategy: &Strategy, bundle: &PathBundle, lambda: &ProcessSample, agent: usize) -> Result<ProcessSample> {
    let (paths, steps) = (bundle.paths(), bundle.steps());
    for s in [&strategy.common, &strategy.own, lambda] {
        if s.paths() != paths || s.steps() != steps {
            return Err(Error::DimensionMismatch(format!(
                "{} is {}x{}, bundle is {paths}x{steps}",
                s.label,
                s.paths(),
                s.steps()
            )));
        }
    }
    if agent >= bundle.agents() {
        return Err(Error::DimensionMismatch(format!("agent {agent} of {}", bundle.agents())));
    }
    let dt = bundle.grid().dt();
    let mut x = ProcessSample::zeros("X", paths, steps);
    for m in 0..paths {
        let row = x.path_mut(m);
        for k in 0..steps {
            let d = strategy.common.at(m, k) * (lambda.at(m, k) * dt + bundle.increment(Noise::Common, m, k))
                + strategy.own.at(m, k) * bundle.increment(Noise::Own(agent), m, k);
            row[k + 1] = row[k] + d;
        }
    }
    Ok(x)
}

/// Completed-square drift of `V = -exp(-(X + Y))` relative to `-V`:
/// `((pi0 + Z1 - lambda)^2 + (pii + Z2)^2) / 2`.
pub fn mu_v(pi0: f64, pii: f64, z1: f64, z2: f64, lambda: f64) -> f64 {
    0.5 * (pi0 + z1 - lambda).powi(2) + 0.5 * (pii + z2).powi(2)
}

/// The same drift in expanded form,
/// `-(pi0 lambda - ((pi0 + Z1)^2 + (pii + Z2)^2)/2 - (lambda^2/2 - lambda Z1))`.
pub fn mu_v_expanded(pi0: f64, pii: f64, z1: f64, z2: f64, lambda: f64) -> f64 {
    -(pi0 * lambda - 0.5 * ((pi0 + z1).powi(2) + (pii + z2).powi(2)) - (0.5 * lambda * lambda - lambda * z1))
}

/// Volatility of `V` relative to `-V`: `-(pi0 + Z1, pii + Z2)`.
pub fn sigma_v(pi0: f64, pii: f64, z1: f64, z2: f64) -> (f64, f64) {
    (-(pi0 + z1), -(pii + z2))
}

/// `mu_V` on every sample point.
pub fn drift_mu_v(strategy: &Strategy, z1: &ProcessSample, z2: &ProcessSample, lambda: &ProcessSample) -> Result<ProcessSample> {
    let a = strategy.common.zip_with(z1, "", |p, z| p + z)?.sub(lambda)?;
    let b = strategy.own.zip_with(z2, "", |p, z| p + z)?;
    a.zip_with(&b, "mu_V", |x, y| 0.5 * x * x + 0.5 * y * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// The position in the common asset, `pi0`.
    Common,
    /// The position in the agent's own asset, `pii`.
    Own,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PerturbationKind {
    Constant,
    /// `tanh(B_t)`.
    BasisTanh,
    /// `tanh(a B_t + b W_i(t) + c)`.
    RandomTanh { a: f64, b: f64, c: f64 },
}

/// `pi = pi_hat + magnitude * shape(t, B_t, W_i(t))` on one component.
/// Every shape is bounded by 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrategyPerturbation {
    pub kind: PerturbationKind,
    pub component: Component,
    pub magnitude: f64,
}

impl StrategyPerturbation {
    pub fn shape(&self, b: f64, w: f64) -> f64 {
        match self.kind {
            PerturbationKind::Constant => 1.0,
            PerturbationKind::BasisTanh => b.tanh(),
            PerturbationKind::RandomTanh { a, b: bw, c } => (a * b + bw * w + c).tanh(),
        }
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            PerturbationKind::Constant => "constant".to_string(),
            PerturbationKind::BasisTanh => "tanh_b".to_string(),
            PerturbationKind::RandomTanh { a, b, c } => format!("tanh({a:.3}b{b:+.3}w{c:+.3})"),
        };
        let comp = match self.component {
            Component::Common => "pi0",
            Component::Own => "pii",
        };
        format!("{kind}:{comp}:{}", self.magnitude)
    }

    pub fn apply(&self, base: &Strategy, bundle: &PathBundle, agent: usize) -> Strategy {
        let mut out = base.clone();
        let target = match self.component {
            Component::Common => &mut out.common,
            Component::Own => &mut out.own,
        };
        for m in 0..bundle.paths() {
            for k in 0..=bundle.steps() {
                let s = self.shape(bundle.common(m, k), bundle.own(agent, m, k));
                target.set(m, k, target.at(m, k) + self.magnitude * s);
            }
        }
        out
    }

    /// A random member: kind, component, sign and magnitude in `(0, 1]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        let kind = match rng.gen_range(0..3) {
            0 => PerturbationKind::Constant,
            1 => PerturbationKind::BasisTanh,
            _ => random_tanh(rng),
        };
        let component = if rng.gen::<bool>() { Component::Common } else { Component::Own };
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        StrategyPerturbation { kind, component, magnitude: sign * (1.0 - rng.gen::<f64>()) }
    }
}

fn random_tanh(rng: &mut impl Rng) -> PerturbationKind {
    PerturbationKind::RandomTanh { a: rng.gen_range(-2.0..2.0), b: rng.gen_range(-2.0..2.0), c: rng.gen_range(-1.0..1.0) }
}

pub const PERTURBATION_MAGNITUDES: [f64; 3] = [0.1, 0.5, 1.0];

/// Constant, `tanh(B)`-directed and random bounded shifts, each at magnitudes
/// 0.1, 0.5 and 1.0, on each component.
pub fn perturbation_family(seed: u64) -> Vec<StrategyPerturbation> {
    let mut rng = rng_for(seed, 11);
    let mut out = Vec::new();
    for component in [Component::Common, Component::Own] {
        for magnitude in PERTURBATION_MAGNITUDES {
            for kind in [PerturbationKind::Constant, PerturbationKind::BasisTanh, random_tanh(&mut rng)] {
                out.push(StrategyPerturbation { kind, component, magnitude });
            }
        }
    }
    out
}

/// Drift check of `mu_V` for perturbed strategies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub perturbations: usize,
    pub points_per_perturbation: usize,
    /// Smallest `mu_V` over perturbations and points.
    pub min_perturbed: f64,
    /// Largest `|mu_V|` at the candidate optimum over all points.
    pub max_at_optimum: f64,
    /// Largest gap between the completed-square and expanded forms.
    pub identity_error: f64,
    pub pass: bool,
}

/// Evaluates `mu_V` for `count` random perturbations at `points` random
/// sample points each, and at the candidate optimum on every point.
pub fn drift_check(
    policy: &PolicyPaths,
    bundle: &PathBundle,
    agent: usize,
    count: usize,
    points: usize,
    seed: u64,
) -> Result<DriftReport> {
    let base = policy.strategy(agent);
    let (z1, z2, lambda) = (&policy.z1[agent], &policy.z2[agent], &policy.lambda);
    let at_opt = drift_mu_v(&base, z1, z2, lambda)?;
    let max_at_optimum = at_opt.max_abs();
    let mut rng = rng_for(seed, 12);
    let mut min_perturbed = f64::INFINITY;
    let mut identity_error = 0.0f64;
    for _ in 0..count {
        let p = StrategyPerturbation::random(&mut rng);
        for _ in 0..points {
            let m = rng.gen_range(0..bundle.paths());
            let k = rng.gen_range(0..bundle.steps());
            let d = p.magnitude * p.shape(bundle.common(m, k), bundle.own(agent, m, k));
            let (mut pi0, mut pii) = (base.common.at(m, k), base.own.at(m, k));
            match p.component {
                Component::Common => pi0 += d,
                Component::Own => pii += d,
            }
            let (a, b, l) = (z1.at(m, k), z2.at(m, k), lambda.at(m, k));
            let mu = mu_v(pi0, pii, a, b, l);
            let raw = mu_v_expanded(pi0, pii, a, b, l);
            min_perturbed = min_perturbed.min(mu);
            identity_error = identity_error.max((mu - raw).abs() / (1.0 + mu.abs()));
        }
    }
    Ok(DriftReport {
        perturbations: count,
        points_per_perturbation: points,
        min_perturbed,
        max_at_optimum,
        identity_error,
        pass: min_perturbed >= -MARGIN_TOLERANCE && max_at_optimum <= MARGIN_TOLERANCE && identity_error <= MARGIN_TOLERANCE,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilityEstimate {
    pub mean: f64,
    pub standard_error: f64,
}

/// Monte Carlo estimate of `E[-exp(-(X_T + e_T))]`.
pub fn expected_utility(
    strategy: &Strategy,
    bundle: &PathBundle,
    lambda: &ProcessSample,
    spec: &EndowmentSpec,
    agent: usize,
) -> Result<UtilityEstimate> {
    let x = gains_process(strategy, bundle, lambda, agent)?;
    let k = bundle.steps();
    let u: Vec<f64> = (0..bundle.paths())
        .map(|m| -(-(x.at(m, k) + spec.eval(bundle.common(m, k), bundle.own(agent, m, k)))).exp())
        .collect();
    let (mean, standard_error) = mean_and_se(&u);
    Ok(UtilityEstimate { mean, standard_error })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilityComparison {
    pub perturbation: String,
    pub utility: UtilityEstimate,
    /// `U(pi_hat) - U(pi) + 3 (se(pi_hat) + se(pi))`; nonnegative on pass.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilityReport {
    pub agent: usize,
    pub paths: usize,
    pub baseline: UtilityEstimate,
    pub comparisons: Vec<UtilityComparison>,
    pub pass: bool,
}

/// Compares the candidate optimum against each perturbation on `bundle`.
pub fn utility_compare(
    policy: &PolicyPaths,
    bundle: &PathBundle,
    spec: &EndowmentSpec,
    perturbations: &[StrategyPerturbation],
    agent: usize,
) -> Result<UtilityReport> {
    let base = policy.strategy(agent);
    let baseline = expected_utility(&base, bundle, &policy.lambda, spec, agent)?;
    let mut comparisons = Vec::with_capacity(perturbations.len());
    for p in perturbations {
        let s = p.apply(&base, bundle, agent);
        let utility = expected_utility(&s, bundle, &policy.lambda, spec, agent)?;
        let margin = baseline.mean - utility.mean + 3.0 * (baseline.standard_error + utility.standard_error);
        comparisons.push(UtilityComparison { perturbation: p.label(), utility, margin, pass: margin >= 0.0 });
    }
    let pass = comparisons.iter().all(|c| c.pass);
    Ok(UtilityReport { agent, paths: bundle.paths(), baseline, comparisons, pass })
}

// ---------------------------------------------------------------------------
// Structural conditions
// ---------------------------------------------------------------------------

/// Outcome of one sampled condition check. `pass` iff `worst_margin >= -1e-12`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub agents: usize,
    pub samples: usize,
    pub worst_margin: f64,
    /// Estimated constant (`C` for sBF, `M` for the Lipschitz bound).
    pub constant: Option<f64>,
    /// Constant implied by the closed-form bounds.
    pub bound: Option<f64>,
    pub violations: usize,
    /// Sample at the worst margin.
    pub witness: Option<Vec<f64>>,
    pub diagnostics: BTreeMap<String, f64>,
    pub pass: bool,
}

impl ConditionReport {
    fn new(condition: &str, agents: usize, samples: usize) -> Self {
        ConditionReport {
            condition: condition.to_string(),
            agents,
            samples,
            worst_margin: f64::INFINITY,
            constant: None,
            bound: None,
            violations: 0,
            witness: None,
            diagnostics: BTreeMap::new(),
            pass: false,
        }
    }

    fn record(&mut self, margin: f64, sample: &[f64]) {
        if margin < -MARGIN_TOLERANCE {
            self.violations += 1;
        }
        if margin < self.worst_margin {
            self.worst_margin = margin;
            self.witness = Some(sample.to_vec());
        }
    }

    fn finish(mut self) -> Self {
        self.pass = self.worst_margin >= -MARGIN_TOLERANCE;
        self
    }
}

/// Nonnegative coefficients of a target over a generator set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Representation {
    pub target: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanningCertificate {
    pub dimension: usize,
    /// `-e_1, ..., -e_N, (1/N, ..., 1/N)`.
    pub generators: Vec<Vec<f64>>,
    /// One representation for each of `+e_k` and `-e_k`.
    pub representations: Vec<Representation>,
    /// A nontrivial nonnegative representation of 0.
    pub zero: Representation,
    pub directions_tested: usize,
    /// `min_v max_k <v, a_k> / |v|` over the tested directions.
    pub min_best_inner_product: f64,
    pub valid: bool,
}

fn combine(generators: &[Vec<f64>], coefficients: &[f64], target: &[f64]) -> f64 {
    (0..target.len())
        .map(|j| (generators.iter().zip(coefficients).map(|(g, c)| c * g[j]).sum::<f64>() - target[j]).abs())
        .fold(0.0, f64::max)
}

/// Certifies that `{-e_1, ..., -e_N, a_{N+1}}` positively spans `R^N`.
pub fn positive_spanning_certificate(n: usize, directions: usize, seed: u64) -> Result<SpanningCertificate> {
    if n == 0 {
        return Err(Error::InvalidConfig("dimension must be positive".into()));
    }
    let mut generators: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut v = vec![0.0; n];
            v[k] = -1.0;
            v
        })
        .collect();
    generators.push(vec![1.0 / n as f64; n]);

    let mut representations = Vec::with_capacity(2 * n);
    for k in 0..n {
        // +e_k = N a_{N+1} + sum_{j != k} (-e_j)
        let mut plus = vec![0.0; n];
        plus[k] = 1.0;
        let mut c = vec![1.0; n + 1];
        c[k] = 0.0;
        c[n] = n as f64;
        let error = combine(&generators, &c, &plus);
        representations.push(Representation { target: plus, coefficients: c, error });

        let mut minus = vec![0.0; n];
        minus[k] = -1.0;
        let mut c = vec![0.0; n + 1];
        c[k] = 1.0;
        let error = combine(&generators, &c, &minus);
        representations.push(Representation { target: minus, coefficients: c, error });
    }
    let mut c = vec![1.0; n + 1];
    c[n] = n as f64;
    let zero_target = vec![0.0; n];
    let error = combine(&generators, &c, &zero_target);
    let zero = Representation { target: zero_target, coefficients: c, error };

    let mut rng = rng_for(seed, 13);
    let mut min_best = f64::INFINITY;
    for _ in 0..directions {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = frobenius(&v);
        let best = generators.iter().map(|g| g.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()).fold(f64::NEG_INFINITY, f64::max);
        min_best = min_best.min(best / norm);
    }
    let exact = representations.iter().chain(std::iter::once(&zero)).all(|r| r.error == 0.0 && r.coefficients.iter().all(|c| *c >= 0.0));
    let valid = exact && zero.coefficients.iter().any(|c| *c > 0.0) && min_best > 0.0;
    Ok(SpanningCertificate {
        dimension: n,
        generators,
        representations,
        zero,
        directions_tested: directions,
        min_best_inner_product: min_best,
        valid,
    })
}

fn check_agents(n: usize, samples: usize, min_samples: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("condition checks need N >= 2, got {n}")));
    }
    if samples < min_samples {
        return Err(Error::InvalidConfig(format!("{samples} samples, need at least {min_samples}")));
    }
    Ok(())
}

/// Row operator of the averaging transform:
/// `Y~_i = Y_i + Ybar` for `i < N`, `Y~_N = Ybar`.
pub fn averaging_transform(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| (if i == j && i + 1 < n { 1.0 } else { 0.0 }) + 1.0 / n as f64)
}

/// Row operator of the differencing transform:
/// `Ybar_i = Y_i - Y_N` for `i < N`, `Ybar_N = Y_N`.
pub fn differencing_transform(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if j + 1 == n {
            -1.0
        } else {
            0.0
        }
    })
}

fn apply_rows(t: &DMatrix<f64>, z: &[f64], cols: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(t.ncols(), cols, z);
    let out = t * m;
    let mut v = Vec::with_capacity(out.len());
    for i in 0..out.nrows() {
        for j in 0..cols {
            v.push(out[(i, j)]);
        }
    }
    v
}

fn apply_vec(t: &DMatrix<f64>, f: &[f64]) -> Vec<f64> {
    (t * nalgebra::DVector::from_column_slice(f)).iter().copied().collect()
}

/// Driver of the averaged system:
/// `f~_i = z~_{N1} (z~_{i1} - z~_{N1})` for `i < N`, `f~_N = z~_{N1}^2 / 2`.
pub fn averaged_driver(zt: &[f64], n: usize) -> Vec<f64> {
    let c = n + 1;
    let zn = zt[(n - 1) * c];
    (0..n).map(|i| if i + 1 < n { zn * (zt[i * c] - zn) } else { 0.5 * zn * zn }).collect()
}

/// Which form of the differenced driver to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverForm {
    /// `f-_i = gamma z-_{i1}`, `f-_N = -gamma^2/2 + gamma z-_{N1}`.
    #[default]
    Equilibrium,
    /// Last component with the quadratic term scaled by `N^2 (N gamma)^2`
    /// instead of `gamma^2`. A fixture for negative tests.
    InjectedTypo,
}

/// `gamma(z-) = (1/N) (sum_{i<N} (z-_{i1} + z-_{N1}) + z-_{N1})`, which is the
/// price `lambda(z)` in differenced coordinates.
pub fn gamma(zb: &[f64], n: usize) -> f64 {
    let c = n + 1;
    let zn = zb[(n - 1) * c];
    ((0..n - 1).map(|i| zb[i * c] + zn).sum::<f64>() + zn) / n as f64
}

pub fn differenced_driver(zb: &[f64], n: usize, form: DriverForm) -> Vec<f64> {
    let c = n + 1;
    let g = gamma(zb, n);
    let mut f: Vec<f64> = (0..n).map(|i| g * zb[i * c]).collect();
    f[n - 1] += match form {
        DriverForm::Equilibrium => -0.5 * g * g,
        DriverForm::InjectedTypo => -0.5 * (n * n) as f64 * (n as f64 * g).powi(2),
    };
    f
}

/// `sqrt((N-1)/N^2 + 1)`, the Euclidean norm of the coefficients of `gamma`
/// on the first column, so `|gamma| <= g_norm |z-|`.
pub fn gamma_norm(n: usize) -> f64 {
    let n = n as f64;
    ((n - 1.0) / (n * n) + 1.0).sqrt()
}

/// Generators `A^{-T} a_k` carried to averaged coordinates, for the set
/// `{-e_1, ..., -e_N, a_{N+1}}` in the original coordinates.
fn transported_generators(n: usize) -> Vec<Vec<f64>> {
    let a_inv_t = averaging_transform(n).try_inverse().expect("averaging transform is invertible").transpose();
    let mut base: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut v = vec![0.0; n];
            v[k] = -1.0;
            v
        })
        .collect();
    base.push(vec![1.0 / n as f64; n]);
    base.iter().map(|a| apply_vec(&a_inv_t, a)).collect()
}

/// `|a^T z|^2 / 2 - a^T F` for a generator `a`, a matrix `z` and a driver `F`
/// in the terminal-value convention `Y_t = xi + int_t^T F ds - int_t^T z dW`.
fn sab_margin(a: &[f64], z: &[f64], driver: &[f64], cols: usize) -> f64 {
    let az: f64 = (0..cols).map(|j| a.iter().enumerate().map(|(i, ai)| ai * z[i * cols + j]).sum::<f64>().powi(2)).sum();
    let af: f64 = a.iter().zip(driver).map(|(x, y)| x * y).sum();
    0.5 * az - af
}

/// Margins of the a-priori boundedness inequalities at `z~`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SabMargins {
    /// Generators carried from the original coordinates; the condition proper.
    pub transported: Vec<f64>,
    /// The set `{-e_1, ..., -e_N, a_{N+1}}` used in averaged coordinates as is.
    pub literal: Vec<f64>,
}

/// The drift `f~` enters the terminal-value convention with a minus sign.
pub fn sab_margins(zt: &[f64], n: usize) -> SabMargins {
    let cols = n + 1;
    let driver: Vec<f64> = averaged_driver(zt, n).iter().map(|v| -v).collect();
    let transported = transported_generators(n).iter().map(|a| sab_margin(a, zt, &driver, cols)).collect();
    let mut literal: Vec<f64> = (0..n)
        .map(|k| {
            let mut a = vec![0.0; n];
            a[k] = -1.0;
            sab_margin(&a, zt, &driver, cols)
        })
        .collect();
    literal.push(sab_margin(&vec![1.0 / n as f64; n], zt, &driver, cols));
    SabMargins { transported, literal }
}

/// Samples `z~` uniformly in the ball of the given radius in `R^{N x (N+1)}`.
/// The pass flag uses the transported generators. Violations of the literal
/// set are kept in the diagnostics: `literal_e_violations` for the `-e_k` and
/// `literal_mean_violations` for `a_{N+1}`.
pub fn sab_check(n: usize, samples: usize, radius: f64, seed: u64) -> Result<ConditionReport> {
    check_agents(n, samples, 1000)?;
    let mut rng = rng_for(seed, 21);
    let mut report = ConditionReport::new("sAB", n, samples);
    let (mut lit_e, mut lit_mean) = (0usize, 0usize);
    let mut lit_worst = f64::INFINITY;
    for _ in 0..samples {
        let zt = ball(&mut rng, n * (n + 1), radius);
        let m = sab_margins(&zt, n);
        let worst = m.transported.iter().copied().fold(f64::INFINITY, f64::min);
        report.record(worst, &zt);
        lit_e += m.literal[..n].iter().filter(|v| **v < -MARGIN_TOLERANCE).count();
        lit_mean += usize::from(m.literal[n] < -MARGIN_TOLERANCE);
        lit_worst = m.literal.iter().copied().fold(lit_worst, f64::min);
    }
    report.diagnostics.insert("literal_e_violations".into(), lit_e as f64);
    report.diagnostics.insert("literal_mean_violations".into(), lit_mean as f64);
    report.diagnostics.insert("literal_worst_margin".into(), lit_worst);
    report.diagnostics.insert("radius".into(), radius);
    Ok(report.finish())
}

/// `gamma`, `I` and `q` of the Bensoussan-Frehse splitting
/// `f-(z-) = diag(z- I(z-)) + q(z-)`. `I` is `(N+1) x N` with first row
/// `gamma` and zeros elsewhere; `q = (0, ..., 0, -gamma^2/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BfSplitting {
    pub gamma: f64,
    pub i_matrix: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn bf_splitting(zb: &[f64], n: usize) -> BfSplitting {
    let g = gamma(zb, n);
    let mut i_matrix = vec![0.0; (n + 1) * n];
    i_matrix[..n].fill(g);
    let mut q = vec![0.0; n];
    q[n - 1] = -0.5 * g * g;
    BfSplitting { gamma: g, i_matrix, q }
}

/// `diag(z- I) + q`.
pub fn bf_reconstruct(zb: &[f64], s: &BfSplitting, n: usize) -> Vec<f64> {
    let c = n + 1;
    (0..n).map(|i| (0..c).map(|j| zb[i * c + j] * s.i_matrix[j * n + i]).sum::<f64>() + s.q[i]).collect()
}

/// Checks the splitting on sampled `z- = D z` with `z` of equilibrium
/// sparsity. A splitting that does not reproduce `D f(z)` is a
/// transcription error. `constant` is the smallest `C` with
/// `|I| <= C (1 + |z-|)` and `|q^i| <= C (1 + sum_{j<=i} |z-^j|^2)` on the
/// sample; `bound` is `max(sqrt(N) g, g^2/2)` with `g = gamma_norm(N)`.
pub fn sbf_check(n: usize, samples: usize, radius: f64, seed: u64, form: DriverForm) -> Result<ConditionReport> {
    check_agents(n, samples, 1000)?;
    let d = differencing_transform(n);
    let c = n + 1;
    let g = gamma_norm(n);
    let bound = ((n as f64).sqrt() * g).max(0.5 * g * g);
    let mut rng = rng_for(seed, 22);
    let mut report = ConditionReport::new("sBF", n, samples);
    let (mut c_est, mut growth, mut mismatch) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let z = sparse_z(&mut rng, n, radius);
        let zb = apply_rows(&d, &z, c);
        let direct = apply_vec(&d, &vectorized_driver(&z, n)?);
        let closed = differenced_driver(&zb, n, form);
        let s = bf_splitting(&zb, n);
        let rebuilt = bf_reconstruct(&zb, &s, n);
        let scale = 1.0 + direct.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = direct.iter().zip(&closed).chain(closed.iter().zip(&rebuilt)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        mismatch = mismatch.max(err);
        if err > TRANSCRIPTION_TOLERANCE {
            return Err(Error::TranscriptionMismatch { check: "sBF splitting".into(), mismatch: err });
        }
        let norm = frobenius(&zb);
        let i_norm = frobenius(&s.i_matrix);
        let mut margin = bound * (1.0 + norm) - i_norm;
        let mut c_here = i_norm / (1.0 + norm);
        let mut rows_sq = 0.0;
        for i in 0..n {
            rows_sq += zb[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>();
            margin = margin.min(bound * (1.0 + rows_sq) - s.q[i].abs());
            c_here = c_here.max(s.q[i].abs() / (1.0 + rows_sq));
        }
        c_est = c_est.max(c_here);
        if norm > 0.0 {
            growth = growth.max(i_norm / norm);
        }
        report.record(margin, &zb);
    }
    report.constant = Some(c_est);
    report.bound = Some(bound);
    report.diagnostics.insert("max_reconstruction_error".into(), mismatch);
    report.diagnostics.insert("linear_growth_constant".into(), growth);
    report.diagnostics.insert("radius".into(), radius);
    Ok(report.finish())
}

/// `|f-(z) - f-(z')| / (|z - z'| (|z| + |z'|))`, or `None` when `z = z'`.
pub fn lipschitz_ratio(z: &[f64], zp: &[f64], n: usize, form: DriverForm) -> Option<f64> {
    let dz = z.iter().zip(zp).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    if dz == 0.0 {
        return None;
    }
    let f = differenced_driver(z, n, form);
    let fp = differenced_driver(zp, n, form);
    let df = f.iter().zip(&fp).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Some(df / (dz * (frobenius(z) + frobenius(zp))))
}

/// Samples pairs of differenced matrices and reports the largest ratio as the
/// estimated `M`, against the bound `g + g^2/2` with `g = gamma_norm(N)`.
pub fn lipschitz_quadratic_check(n: usize, samples: usize, radius: f64, seed: u64, form: DriverForm) -> Result<ConditionReport> {
    check_agents(n, samples, 1)?;
    let d = differencing_transform(n);
    let g = gamma_norm(n);
    let bound = g + 0.5 * g * g;
    let mut rng = rng_for(seed, 23);
    let mut report = ConditionReport::new("lipschitz_quadratic", n, samples);
    let mut m_est = 0.0f64;
    let mut skipped = 0usize;
    for _ in 0..samples {
        let z = apply_rows(&d, &sparse_z(&mut rng, n, radius), n + 1);
        let zp = apply_rows(&d, &sparse_z(&mut rng, n, radius), n + 1);
        match lipschitz_ratio(&z, &zp, n, form) {
            Some(r) => {
                m_est = m_est.max(r);
                let mut pair = z.clone();
                pair.extend_from_slice(&zp);
                report.record(bound - r, &pair);
            }
            None => skipped += 1,
        }
    }
    report.constant = Some(m_est);
    report.bound = Some(bound);
    report.diagnostics.insert("skipped_pairs".into(), skipped as f64);
    report.diagnostics.insert("radius".into(), radius);
    Ok(report.finish())
}

/// Largest mismatches found by [`transform_consistency`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformReport {
    pub agents: usize,
    pub samples: usize,
    /// `A f(z)` against `f~(A z)`.
    pub averaged_driver: f64,
    /// `D f(z)` against `f-(D z)`.
    pub differenced_driver: f64,
    /// `A z` against the entrywise description of `z~`.
    pub averaged_volatility: f64,
    /// `D z` against the entrywise description of `z-`.
    pub differenced_volatility: f64,
    pub witness: Option<Vec<f64>>,
    pub pass: bool,
}

fn averaged_entrywise(z: &[f64], n: usize) -> Vec<f64> {
    let c = n + 1;
    let lambda = (0..n).map(|i| z[i * c]).sum::<f64>() / n as f64;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        out[i * c] = if i + 1 < n { z[i * c] + lambda } else { lambda };
        for j in 0..n {
            let w = z[j * c + j + 1];
            out[i * c + j + 1] = if i == j && i + 1 < n { w + w / n as f64 } else { w / n as f64 };
        }
    }
    out
}

fn differenced_entrywise(z: &[f64], n: usize) -> Vec<f64> {
    let c = n + 1;
    let mut out = vec![0.0; n * c];
    out[(n - 1) * c..].copy_from_slice(&z[(n - 1) * c..]);
    for i in 0..n - 1 {
        out[i * c] = z[i * c] - z[(n - 1) * c];
        out[i * c + i + 1] = z[i * c + i + 1];
        out[i * c + n] = -z[(n - 1) * c + n];
    }
    out
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Applies both changes of coordinates to sampled drivers and volatility
/// matrices and compares with the closed forms of the transformed drivers.
pub fn transform_consistency(n: usize, samples: usize, radius: f64, seed: u64, form: DriverForm) -> Result<TransformReport> {
    check_agents(n, samples, 1)?;
    let a = averaging_transform(n);
    let d = differencing_transform(n);
    let mut rng = rng_for(seed, 24);
    let mut r = TransformReport {
        agents: n,
        samples,
        averaged_driver: 0.0,
        differenced_driver: 0.0,
        averaged_volatility: 0.0,
        differenced_volatility: 0.0,
        witness: None,
        pass: false,
    };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let z = sparse_z(&mut rng, n, radius);
        let f = vectorized_driver(&z, n)?;
        let zt = apply_rows(&a, &z, n + 1);
        let zb = apply_rows(&d, &z, n + 1);
        let gaps = [
            max_gap(&apply_vec(&a, &f), &averaged_driver(&zt, n)),
            max_gap(&apply_vec(&d, &f), &differenced_driver(&zb, n, form)),
            max_gap(&zt, &averaged_entrywise(&z, n)),
            max_gap(&zb, &differenced_entrywise(&z, n)),
        ];
        r.averaged_driver = r.averaged_driver.max(gaps[0]);
        r.differenced_driver = r.differenced_driver.max(gaps[1]);
        r.averaged_volatility = r.averaged_volatility.max(gaps[2]);
        r.differenced_volatility = r.differenced_volatility.max(gaps[3]);
        let g = gaps.iter().copied().fold(0.0, f64::max);
        if g > worst {
            worst = g;
            r.witness = Some(z);
        }
    }
    r.pass = worst <= TRANSCRIPTION_TOLERANCE;
    Ok(r)
}

/// All structural checks for one `N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuralReport {
    pub agents: usize,
    pub spanning: SpanningCertificate,
    pub sab: ConditionReport,
    pub sbf: Option<ConditionReport>,
    pub sbf_error: Option<String>,
    pub lipschitz: ConditionReport,
    pub transform: TransformReport,
    pub pass: bool,
}

pub fn structural_checks(n: usize, samples: usize, radius: f64, seed: u64, form: DriverForm) -> Result<StructuralReport> {
    let spanning = positive_spanning_certificate(n, 1000, seed)?;
    let sab = sab_check(n, samples, radius, seed)?;
    let (sbf, sbf_error) = match sbf_check(n, samples, radius, seed, form) {
        Ok(r) => (Some(r), None),
        Err(e @ Error::TranscriptionMismatch { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let lipschitz = lipschitz_quadratic_check(n, samples, radius, seed, form)?;
    let transform = transform_consistency(n, samples.min(10_000), radius, seed, form)?;
    let pass = spanning.valid && sab.pass && sbf.as_ref().is_some_and(|r| r.pass) && lipschitz.pass && transform.pass;
    Ok(StructuralReport { agents: n, spanning, sab, sbf, sbf_error, lipschitz, transform, pass })
}
