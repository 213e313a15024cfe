use mfeq::cli::FRESH_STREAM_BASE;
use mfeq::convergence::{conditional_iid_probe, lln_terminal_error, mn_qv_norm, ProbeStatus};
use mfeq::limit::{ConditionalEndowment, LimitSolution};
use mfeq::model::{EndowmentSpec, MarketConfig, ProcessSample, RidgeTerm};
use mfeq::nagent::{picard_solve, EquilibriumSolution, PicardOptions, Strategy};
use mfeq::paths::{simulate_paths, PathBundle, DEFAULT_MEMORY_CAP};
use mfeq::regression::RegressionBasis;
use mfeq::verify::{
    expected_utility, gains_process, perturbation_family, utility_compare, Component, PerturbationKind,
    StrategyPerturbation,
};

fn solve(spec: &EndowmentSpec, n: usize, steps: usize, paths: usize, degree: usize, seed: u64) -> (PathBundle, EquilibriumSolution) {
    let bundle = simulate_paths(&MarketConfig::new(n, 1.0, steps, paths, seed)).unwrap();
    let sol = picard_solve(&bundle, spec, &RegressionBasis::new(degree), &PicardOptions::default()).unwrap();
    (bundle, sol)
}

fn fresh(n: usize, steps: usize, paths: usize, seed: u64) -> PathBundle {
    let cfg = MarketConfig::new(n, 1.0, steps, paths, seed);
    let streams = (0..=n as u64).map(|c| FRESH_STREAM_BASE + c).collect();
    PathBundle::simulate_streams(&cfg, streams, DEFAULT_MEMORY_CAP).unwrap()
}

fn constant_shift(component: Component, magnitude: f64) -> StrategyPerturbation {
    StrategyPerturbation { kind: PerturbationKind::Constant, component, magnitude }
}

#[test]
fn linear_payoff_strategies_are_closed_form() {
    let (alpha, beta) = (0.5, 0.3);
    let (_, sol) = solve(&EndowmentSpec::linear(alpha, beta), 3, 10, 2000, 1, 4);
    for s in sol.strategies() {
        assert!(s.common.max_abs() < 1e-8);
        assert!(s.own.values().iter().all(|v| (v + beta).abs() < 1e-8));
    }
    assert!(sol.lambda.values().iter().all(|v| (v - alpha).abs() < 1e-8));
}

#[test]
fn linear_certainty_equivalent_gap() {
    // For e = alpha B_T + beta W_T the optimum has utility -exp(alpha^2 T / 2);
    // shifting pi0 by delta costs exactly delta^2 T / 2 in certainty equivalent.
    let (alpha, beta, delta, t) = (0.5, 0.3, 0.5, 1.0);
    let spec = EndowmentSpec::linear(alpha, beta);
    let (_, sol) = solve(&spec, 2, 10, 2000, 1, 6);
    let eval = fresh(2, 10, 100_000, 6);
    let policy = sol.fitted_policy().evaluate(&eval).unwrap();
    let base = policy.strategy(0);
    let u0 = expected_utility(&base, &eval, &policy.lambda, &spec, 0).unwrap();
    let shifted = constant_shift(Component::Common, delta).apply(&base, &eval, 0);
    let u1 = expected_utility(&shifted, &eval, &policy.lambda, &spec, 0).unwrap();

    let exact0 = -(0.5 * alpha * alpha * t).exp();
    let exact1 = exact0 * (0.5 * delta * delta * t).exp();
    assert!((u0.mean - exact0).abs() <= 4.0 * u0.standard_error, "{u0:?} vs {exact0}");
    assert!((u1.mean - exact1).abs() <= 4.0 * u1.standard_error, "{u1:?} vs {exact1}");
    let gap = (u1.mean / u0.mean).ln();
    assert!((gap - 0.5 * delta * delta * t).abs() < 0.02, "gap {gap}");
}

#[test]
fn constant_payoff_optimum_beats_every_shift() {
    // With lambda = 0 any gains process is a martingale, so Jensen gives
    // E[-exp(-X_T - c)] <= -exp(-c).
    let c = 0.3;
    let spec = EndowmentSpec::constant(c);
    let (_, sol) = solve(&spec, 2, 10, 1000, 2, 2);
    let eval = fresh(2, 10, 20_000, 2);
    let policy = sol.fitted_policy().evaluate(&eval).unwrap();
    let report = utility_compare(&policy, &eval, &spec, &perturbation_family(2), 0).unwrap();
    assert!((report.baseline.mean + (-c).exp()).abs() < 1e-15);
    assert!(report.pass);
    assert!(report.comparisons.iter().all(|r| r.utility.mean <= report.baseline.mean + 3.0 * r.utility.standard_error));
}

#[test]
fn zero_shift_reproduces_the_baseline() {
    let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 1.0, b: 1.0, c: 1.0, d: 0.0 }]);
    let (_, sol) = solve(&spec, 2, 10, 2000, 2, 3);
    let eval = fresh(2, 10, 5000, 3);
    let policy = sol.fitted_policy().evaluate(&eval).unwrap();
    let zero = [constant_shift(Component::Common, 0.0), constant_shift(Component::Own, 0.0)];
    let report = utility_compare(&policy, &eval, &spec, &zero, 1).unwrap();
    for r in &report.comparisons {
        assert_eq!(r.utility, report.baseline);
    }
}

#[test]
fn gains_of_constant_positions() {
    let bundle = simulate_paths(&MarketConfig::new(2, 1.0, 8, 50, 1)).unwrap();
    let strategy = Strategy {
        common: ProcessSample::constant("pi0", 50, 8, 1.0),
        own: ProcessSample::constant("pii", 50, 8, 2.0),
    };
    let lambda = ProcessSample::constant("lambda", 50, 8, 0.5);
    let x = gains_process(&strategy, &bundle, &lambda, 1).unwrap();
    for m in 0..50 {
        assert_eq!(x.at(m, 0), 0.0);
        let want = 0.5 + bundle.common(m, 8) + 2.0 * bundle.own(1, m, 8);
        assert!((x.at(m, 8) - want).abs() < 1e-12);
    }
    assert!(gains_process(&strategy, &bundle, &lambda, 2).is_err());
}

#[test]
fn relabelling_agents_permutes_the_solution() {
    let spec = EndowmentSpec::tanh(
        0.1,
        vec![RidgeTerm { a: 1.0, b: 1.0, c: 1.0, d: 0.0 }, RidgeTerm { a: 0.5, b: -1.0, c: 0.0, d: 0.2 }],
    );
    let (bundle, sol) = solve(&spec, 3, 10, 3000, 2, 12);
    let perm = [2, 0, 1];
    let permuted = bundle.permute_agents(&perm).unwrap();
    let other = picard_solve(&permuted, &spec, &RegressionBasis::new(2), &PicardOptions::default()).unwrap();
    for (j, &p) in perm.iter().enumerate() {
        let diff = other.agents[j].y.sub(&sol.agents[p].y).unwrap().max_abs();
        assert!(diff < 1e-9, "agent {j}: {diff}");
    }
    assert!(other.lambda.sub(&sol.lambda).unwrap().max_abs() < 1e-9);
}

#[test]
fn bracket_norm_of_linear_payoff() {
    let beta = 0.3;
    for n in [1, 4] {
        let (bundle, sol) = solve(&EndowmentSpec::linear(0.5, beta), n, 10, 1000, 1, 9);
        let got = mn_qv_norm(&sol, 2.0, bundle.grid().dt()).unwrap();
        assert!((got - beta / (n as f64).sqrt()).abs() < 1e-9, "N={n}: {got}");
    }
}

#[test]
fn lln_error_of_idiosyncratic_payoff() {
    // g = 0 and the squared error has mean Var(tanh(W_T)) / N.
    let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 1.0, b: 0.0, c: 1.0, d: 0.0 }]);
    let g = ConditionalEndowment::new(&spec, 1.0, 64).unwrap();
    let h = 1e-3;
    let var: f64 = (-8000..=8000)
        .map(|j| {
            let y = j as f64 * h;
            y.tanh().powi(2) * (-0.5 * y * y).exp() * h
        })
        .sum::<f64>()
        / (2.0 * std::f64::consts::PI).sqrt();
    for n in [2, 8] {
        let bundle = simulate_paths(&MarketConfig::new(n, 1.0, 1, 100_000, 17)).unwrap();
        let err = lln_terminal_error(&g, &bundle);
        let want = var / n as f64;
        assert!((err * err / want - 1.0).abs() < 0.03, "N={n}: {} vs {want}", err * err);
    }
}

#[test]
fn probe_flags_degenerate_and_common_only_payoffs() {
    let (bundle, sol) = solve(&EndowmentSpec::constant(0.4), 3, 8, 2000, 2, 5);
    let limits = vec![ProcessSample::constant("Y", 2000, 8, 0.4); 3];
    let probe = conditional_iid_probe(&sol, &limits, &bundle, 4, 10).unwrap();
    assert_eq!(probe.status, ProbeStatus::Degenerate);

    let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 1.0, b: 1.0, c: 0.0, d: 0.0 }]);
    let (bundle, sol) = solve(&spec, 3, 8, 3000, 3, 5);
    let limit = LimitSolution::new(&spec, 1.0, 64).unwrap().along_paths(&bundle).y;
    let limits = vec![limit; 3];
    let probe = conditional_iid_probe(&sol, &limits, &bundle, 4, 10).unwrap();
    // Each agent's regression still sees its own W_i, so the residuals agree
    // only up to regression noise; the flag marks the high correlation as expected.
    assert_eq!(probe.status, ProbeStatus::CommonOnly);
    assert!(probe.mean_abs_off_diagonal > 0.5, "{probe:?}");
}
