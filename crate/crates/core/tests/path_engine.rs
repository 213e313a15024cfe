use mfeq::limit::ConditionalEndowment;
use mfeq::model::{EndowmentSpec, MarketConfig, ProcessSample, RidgeTerm};
use mfeq::paths::{doleans_exponential, ito_integral, simulate_paths, Noise};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0);
    (mu, (var / n).sqrt())
}

#[test]
fn one_step_increments_are_centred_and_uncorrelated() {
    let m = 100_000;
    let bundle = simulate_paths(&MarketConfig::new(1, 1.0, 1, m, 21)).unwrap();
    let db: Vec<f64> = (0..m).map(|p| bundle.increment(Noise::Common, p, 0)).collect();
    let dw: Vec<f64> = (0..m).map(|p| bundle.increment(Noise::Own(0), p, 0)).collect();
    let bound = 4.0 / (m as f64).sqrt();
    let (mu, _) = mean_se(&db);
    assert!(mu.abs() <= bound, "mean {mu}");

    let (mb, mw) = (mean_se(&db).0, mean_se(&dw).0);
    let cov: f64 = db.iter().zip(&dw).map(|(x, y)| (x - mb) * (y - mw)).sum::<f64>() / m as f64;
    let sb = (db.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / m as f64).sqrt();
    let sw = (dw.iter().map(|y| (y - mw).powi(2)).sum::<f64>() / m as f64).sqrt();
    let rho = cov / (sb * sw);
    assert!(rho.abs() <= bound, "correlation {rho}");
}

#[test]
fn stochastic_integral_of_b_against_itself() {
    let (m, steps, t) = (100_000, 50, 1.0);
    let bundle = simulate_paths(&MarketConfig::new(1, t, steps, m, 5)).unwrap();
    let b = ProcessSample::from_fn("B", m, steps, |p, k| bundle.common(p, k));
    let integral = ito_integral(&b, &bundle, Noise::Common).unwrap();
    let diff: Vec<f64> = (0..m)
        .map(|p| integral.at(p, steps) - 0.5 * (bundle.common(p, steps).powi(2) - t))
        .collect();
    let (mu, se) = mean_se(&diff);
    assert!(mu.abs() <= 4.0 * se, "mean {mu}, se {se}");
}

#[test]
fn constant_exponential_is_a_martingale_and_matches_formula() {
    let (m, steps, c) = (100_000, 20, 0.7);
    let bundle = simulate_paths(&MarketConfig::new(1, 1.0, steps, m, 8)).unwrap();
    let theta = ProcessSample::constant("theta", m, steps, c);
    let w = doleans_exponential(&theta, &bundle, Noise::Common).unwrap();
    let terminal = w.terminal();
    let (mu, se) = mean_se(&terminal);
    assert!((mu - 1.0).abs() <= 4.0 * se, "mean {mu}, se {se}");
    for p in 0..m {
        let direct = (-c * bundle.common(p, steps) - 0.5 * c * c).exp();
        assert!((terminal[p] - direct).abs() <= 1e-12 * direct.max(1.0));
    }
    assert_eq!(w.clamp_events, 0);
}

#[test]
fn conditional_endowment_against_monte_carlo() {
    let spec = EndowmentSpec::tanh(0.0, vec![RidgeTerm { a: 1.0, b: 1.0, c: 1.0, d: 0.0 }]);
    let g = ConditionalEndowment::new(&spec, 1.0, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let samples: Vec<f64> = (0..1_000_000)
        .map(|_| {
            let y: f64 = StandardNormal.sample(&mut rng);
            (0.5 + y).tanh()
        })
        .collect();
    let (mu, se) = mean_se(&samples);
    assert!((g.exact(0.5) - mu).abs() <= 4.0 * se, "quadrature {} vs {mu} +- {se}", g.exact(0.5));
}
