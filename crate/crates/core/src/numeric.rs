//! Deterministic reductions and quadrature rules shared by every module.
//!
//! All sums over paths go through [`pairwise_sum`], whose tree shape depends
//! only on the input length, so results never depend on how work was split
//! across threads.

use rayon::prelude::*;

/// Number of paths handled by one unit of parallel work. Fixed so that the
/// reduction tree is independent of the worker count.
pub const CHUNK: usize = 1024;

const PAIRWISE_LEAF: usize = 16;

/// Pairwise (cascade) summation with a tree shape fixed by `values.len()`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_LEAF {
        return values.iter().fold(0.0, |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Mean that is bit-identical under any permutation of `values`.
pub fn symmetric_mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    mean(&sorted)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let m = mean(values);
    if n < 2 {
        return (m, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Linear-interpolation quantile (the "type 7" rule), `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Combines partial results with a balanced binary tree whose shape depends
/// only on the number of parts.
pub fn tree_reduce<T, F>(mut parts: Vec<T>, combine: F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Maps fixed-size chunks of `0..len` in parallel and folds the per-chunk
/// results with [`tree_reduce`].
pub fn chunked_reduce<T, M, C>(len: usize, map: M, combine: C) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync,
    C: Fn(T, T) -> T,
{
    let chunks = len.div_ceil(CHUNK);
    let parts: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| map(c * CHUNK..((c + 1) * CHUNK).min(len)))
        .collect();
    tree_reduce(parts, combine)
}

/// Gauss–Hermite rule for the weight `exp(-x^2)`.
///
/// Nodes are returned in ascending order; the weights sum to `sqrt(pi)`.
/// Roots are found by Newton iteration on the orthonormal Hermite recurrence,
/// which stays in range for a few hundred nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite order must be positive");
        let nf = n as f64;
        let half = n.div_ceil(2);
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let mut z = 0.0f64;
        for i in 0..half {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for iter in 0..200 {
                let (p1, p2) = hermite_orthonormal(n, z);
                pp = (2.0 * nf).sqrt() * p2;
                let step = p1 / pp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) && iter > 0 {
                    break;
                }
            }
            let (_, p2) = hermite_orthonormal(n, z);
            pp = if p2 != 0.0 { (2.0 * nf).sqrt() * p2 } else { pp };
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[half - 1] = 0.0;
        }
        x.reverse();
        w.reverse();
        Self { nodes: x, weights: w }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[f(Z)]` for `Z ~ Normal(0, variance)`.
    pub fn expect_normal<F: FnMut(f64) -> f64>(&self, variance: f64, mut f: F) -> f64 {
        let scale = (2.0 * variance).sqrt();
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(scale * x);
        }
        acc / std::f64::consts::PI.sqrt()
    }
}

/// Node family of a [`NormalQuadrature`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureKind {
    /// Truncated trapezoidal rule on `[-L, L]`. Converges geometrically for
    /// integrands analytic in a strip around the real axis, such as `tanh`.
    Trapezoid,
    /// Gauss–Hermite; exact for polynomials, slower for integrands with
    /// complex singularities near the real axis.
    GaussHermite,
}

/// Rule `E[f(Z)] ~ sum_j w_j f(x_j)` for a standard normal `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalQuadrature {
    pub kind: QuadratureKind,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalQuadrature {
    pub fn new(kind: QuadratureKind, n: usize) -> Self {
        match kind {
            QuadratureKind::Trapezoid => Self::trapezoid(n),
            QuadratureKind::GaussHermite => Self::gauss_hermite(n),
        }
    }

    pub fn gauss_hermite(n: usize) -> Self {
        let gh = GaussHermite::new(n);
        let scale = 1.0 / std::f64::consts::PI.sqrt();
        Self {
            kind: QuadratureKind::GaussHermite,
            nodes: gh.nodes.iter().map(|x| x * std::f64::consts::SQRT_2).collect(),
            weights: gh.weights.iter().map(|w| w * scale).collect(),
        }
    }

    /// `n` equally spaced nodes on `[-L, L]`, `L = min(9.5, 1.2 sqrt(n))`,
    /// weighted by the normal density and normalized to sum to one.
    pub fn trapezoid(n: usize) -> Self {
        assert!(n >= 2, "trapezoidal rule needs at least two nodes");
        let half = (1.2 * (n as f64).sqrt()).min(9.5);
        let h = 2.0 * half / (n - 1) as f64;
        let nodes: Vec<f64> = (0..n).map(|j| -half + j as f64 * h).collect();
        let raw: Vec<f64> = nodes.iter().map(|x| (-0.5 * x * x).exp()).collect();
        let total = pairwise_sum(&raw);
        Self { kind: QuadratureKind::Trapezoid, nodes, weights: raw.iter().map(|w| w / total).collect() }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `E[f(X)]` for `X ~ Normal(0, variance)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, variance: f64, mut f: F) -> f64 {
        let sd = variance.sqrt();
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(sd * x)).sum()
    }
}

/// Returns (p_n(z), p_{n-1}(z)) for the orthonormal Hermite polynomials.
fn hermite_orthonormal(n: usize, z: f64) -> (f64, f64) {
    const PI_M4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut p1 = PI_M4;
    let mut p2 = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, p2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn two_point_rule_is_textbook() {
        let gh = GaussHermite::new(2);
        assert_abs_diff_eq!(gh.nodes[0], -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(gh.nodes[1], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(gh.weights[0], PI.sqrt() / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn integrates_even_moments_exactly() {
        // int x^{2k} e^{-x^2} dx = Gamma(k + 1/2)
        let gamma_half = [
            PI.sqrt(),
            PI.sqrt() / 2.0,
            3.0 * PI.sqrt() / 4.0,
            15.0 * PI.sqrt() / 8.0,
            105.0 * PI.sqrt() / 16.0,
        ];
        for n in [5usize, 8, 17, 64, 128] {
            let gh = GaussHermite::new(n);
            for (k, expected) in gamma_half.iter().enumerate() {
                if 2 * k >= 2 * n {
                    continue;
                }
                let got: f64 = gh
                    .nodes
                    .iter()
                    .zip(&gh.weights)
                    .map(|(x, w)| w * x.powi(2 * k as i32))
                    .sum();
                assert!(
                    ((got - expected) / expected).abs() < 1e-12,
                    "n={n} k={k} got={got} expected={expected}"
                );
            }
        }
    }

    #[test]
    fn nodes_ascending_and_symmetric() {
        let gh = GaussHermite::new(64);
        assert!(gh.nodes.windows(2).all(|w| w[0] < w[1]));
        for i in 0..32 {
            assert_eq!(gh.nodes[i], -gh.nodes[63 - i]);
        }
    }

    #[test]
    fn normal_expectation_of_exponential() {
        // E[exp(aZ)] = exp(a^2 s / 2)
        let gh = GaussHermite::new(64);
        let got = gh.expect_normal(0.7, |x| (0.5 * x).exp());
        assert_abs_diff_eq!(got, (0.25 * 0.7 / 2.0f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn normal_rules_agree_on_smooth_integrands() {
        for kind in [QuadratureKind::Trapezoid, QuadratureKind::GaussHermite] {
            let rule = NormalQuadrature::new(kind, 64);
            assert_abs_diff_eq!(rule.expect(1.0, |_| 1.0), 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(rule.expect(2.0, |x| x * x), 2.0, epsilon = 1e-13);
            assert_abs_diff_eq!(rule.expect(0.5, |x| (0.3 * x).exp()), (0.09 * 0.25f64).exp(), epsilon = 1e-14);
            assert_abs_diff_eq!(rule.expect(1.0, |x| x.powi(4)), 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn trapezoid_converges_fast_for_tanh() {
        let f = |x: f64| (-(0.5 + x).tanh()).exp();
        let a = NormalQuadrature::trapezoid(64).expect(1.0, f);
        let b = NormalQuadrature::trapezoid(128).expect(1.0, f);
        assert!((a - b).abs() < 1e-11, "{}", a - b);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }

    #[test]
    fn symmetric_mean_is_permutation_invariant() {
        let v = vec![0.1, 1e-17, 3.3, -2.2, 1e16, -1e16, 0.7];
        let mut w = v.clone();
        w.reverse();
        w.swap(0, 3);
        assert_eq!(symmetric_mean(&v).to_bits(), symmetric_mean(&w).to_bits());
    }

    #[test]
    fn tree_reduce_handles_odd_counts() {
        assert_eq!(tree_reduce(vec![1, 2, 3, 4, 5], |a, b| a + b), Some(15));
        assert_eq!(tree_reduce(Vec::<i32>::new(), |a, b| a + b), None);
    }

    #[test]
    fn quantile_interpolates() {
        let v = vec![4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 5.0);
        assert_abs_diff_eq!(quantile(&v, 0.95), 4.8, epsilon = 1e-12);
    }
}
