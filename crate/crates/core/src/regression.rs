//! Least-squares Monte Carlo regression on polynomial features of the state
//! `(B, W_i, S)` where `S` is the cross-sectional mean of the idiosyncratic
//! noises.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numeric::chunked_reduce;
use crate::paths::PathBundle;

/// Smallest admissible ratio of extreme eigenvalues of the equilibrated
/// normal matrix before a regression is declared rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-13;

/// Monomials up to a total degree in the normalized state of one agent.
///
/// The basis is identical across agents. The mean-field coordinate is
/// dropped when there is a single agent, where it would duplicate `W_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionBasis {
    degree: usize,
    mean_field: bool,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::new(2)
    }
}

impl RegressionBasis {
    pub fn new(degree: usize) -> Self {
        Self { degree, mean_field: true }
    }

    pub fn without_mean_field(degree: usize) -> Self {
        Self { degree, mean_field: false }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn uses_mean_field(&self, agents: usize) -> bool {
        self.mean_field && agents > 1
    }

    pub fn state_dim(&self, agents: usize) -> usize {
        if self.uses_mean_field(agents) {
            3
        } else {
            2
        }
    }

    /// Exponent tuples of all monomials of total degree `<= degree`, constant first.
    pub fn exponents(&self, agents: usize) -> Vec<[u8; 3]> {
        let dims = self.state_dim(agents);
        let mut out = Vec::new();
        for total in 0..=self.degree {
            for i in (0..=total).rev() {
                for j in (0..=(total - i)).rev() {
                    let l = total - i - j;
                    if dims == 2 && l > 0 {
                        continue;
                    }
                    out.push([i as u8, j as u8, l as u8]);
                }
            }
        }
        out
    }

    pub fn feature_count(&self, agents: usize) -> usize {
        self.exponents(agents).len()
    }

    /// Builds the evaluator for one agent at time index `k`. At `k = 0` the
    /// state is deterministic and only the constant survives.
    pub fn features_at<'a>(&self, bundle: &'a PathBundle, agent: usize, k: usize) -> Features<'a> {
        let exponents = if k == 0 { vec![[0, 0, 0]] } else { self.exponents(bundle.agents()) };
        let scale = if k == 0 { 1.0 } else { 1.0 / bundle.grid().t(k).sqrt() };
        Features {
            bundle,
            agent,
            k,
            scale,
            mean_field: self.uses_mean_field(bundle.agents()),
            degree: if k == 0 { 0 } else { self.degree },
            exponents,
        }
    }
}

/// Feature evaluator for one (agent, time) pair.
pub struct Features<'a> {
    bundle: &'a PathBundle,
    agent: usize,
    k: usize,
    scale: f64,
    mean_field: bool,
    degree: usize,
    exponents: Vec<[u8; 3]>,
}

impl Features<'_> {
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn time_index(&self) -> usize {
        self.k
    }

    /// Writes the features of path `m` into `out[..self.len()]`.
    pub fn fill(&self, m: usize, out: &mut [f64]) {
        let state = [
            self.bundle.common(m, self.k) * self.scale,
            self.bundle.own(self.agent, m, self.k) * self.scale,
            if self.mean_field { self.bundle.mean_field(m, self.k) * self.scale } else { 0.0 },
        ];
        let mut powers = [[1.0f64; 8]; 3];
        let top = self.degree.min(7);
        for (v, row) in state.iter().zip(powers.iter_mut()) {
            for p in 1..=top {
                row[p] = row[p - 1] * v;
            }
        }
        for (slot, e) in out.iter_mut().zip(&self.exponents) {
            *slot = powers[0][e[0] as usize] * powers[1][e[1] as usize] * powers[2][e[2] as usize];
        }
    }

    pub fn dot(&self, m: usize, coefficients: &[f64], scratch: &mut [f64]) -> f64 {
        self.fill(m, scratch);
        scratch[..self.len()].iter().zip(coefficients).map(|(a, b)| a * b).sum()
    }
}

/// Coefficients of a least-squares fit plus the condition number of the
/// equilibrated normal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub coefficients: Vec<f64>,
    pub condition: f64,
}

struct Normal {
    gram: Vec<f64>,
    rhs: Vec<f64>,
}

/// Ordinary least squares `min_c sum_m (row_m . c - target_m)^2`.
///
/// `fill_row(m, row)` writes the `cols` regressors of observation `m`.
/// Accumulation runs over fixed-size chunks of rows combined in a fixed tree,
/// so the result does not depend on the number of worker threads.
pub fn least_squares<F>(rows: usize, cols: usize, time_index: usize, fill_row: F, targets: &[f64]) -> Result<Fit>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if targets.len() != rows {
        return Err(Error::DimensionMismatch(format!("{} targets for {rows} rows", targets.len())));
    }
    if rows < cols {
        return Err(Error::RankDeficient { time_index, condition: f64::INFINITY });
    }
    let normal = chunked_reduce(
        rows,
        |range| {
            let len = range.len();
            let mut design = vec![0.0; len * cols];
            for (r, m) in range.clone().enumerate() {
                fill_row(m, &mut design[r * cols..(r + 1) * cols]);
            }
            // row-major len x cols is column-major cols x len
            let xt = DMatrix::from_column_slice(cols, len, &design);
            let y = DVector::from_column_slice(&targets[range]);
            Normal { gram: (&xt * xt.transpose()).data.into(), rhs: (&xt * y).data.into() }
        },
        |mut a, b| {
            a.gram.iter_mut().zip(&b.gram).for_each(|(x, y)| *x += y);
            a.rhs.iter_mut().zip(&b.rhs).for_each(|(x, y)| *x += y);
            a
        },
    )
    .expect("at least one row");
    solve_normal(normal, cols, time_index)
}

fn solve_normal(normal: Normal, cols: usize, time_index: usize) -> Result<Fit> {
    let Normal { gram, rhs } = normal;
    let diag: Vec<f64> = (0..cols).map(|i| gram[i * cols + i]).collect();
    if diag.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::RankDeficient { time_index, condition: f64::INFINITY });
    }
    let scale: Vec<f64> = diag.iter().map(|d| 1.0 / d.sqrt()).collect();
    let a = DMatrix::from_fn(cols, cols, |i, j| {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        gram[lo * cols + hi] * scale[i] * scale[j]
    });
    let eigenvalues = a.clone().symmetric_eigenvalues();
    let max = eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(min > RANK_TOLERANCE * max) {
        return Err(Error::RankDeficient { time_index, condition });
    }
    let chol = a
        .cholesky()
        .ok_or(Error::RankDeficient { time_index, condition })?;
    let b = DVector::from_iterator(cols, rhs.iter().zip(&scale).map(|(r, s)| r * s));
    let x = chol.solve(&b);
    Ok(Fit {
        coefficients: x.iter().zip(&scale).map(|(v, s)| v * s).collect(),
        condition,
    })
}

/// Regresses `targets` on the basis at time `k` and returns the fitted
/// values on every path (the conditional-expectation estimate).
pub fn conditional_expectation(
    bundle: &PathBundle,
    basis: &RegressionBasis,
    agent: usize,
    k: usize,
    targets: &[f64],
) -> Result<(Vec<f64>, Fit)> {
    let features = basis.features_at(bundle, agent, k);
    let p = features.len();
    let fit = least_squares(bundle.paths(), p, k, |m, row| features.fill(m, row), targets)?;
    let mut scratch = vec![0.0; p];
    let fitted = (0..bundle.paths())
        .map(|m| features.dot(m, &fit.coefficients, &mut scratch))
        .collect();
    Ok((fitted, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarketConfig;
    use crate::paths::simulate_paths;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exponent_counts() {
        let b = RegressionBasis::new(2);
        assert_eq!(b.feature_count(4), 10);
        assert_eq!(b.feature_count(1), 6);
        assert_eq!(RegressionBasis::new(1).feature_count(3), 4);
        assert_eq!(b.exponents(3)[0], [0, 0, 0]);
    }

    #[test]
    fn recovers_exact_linear_relation() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 3.0 * x).collect();
        let fit = least_squares(50, 2, 0, |m, row| {
            row[0] = 1.0;
            row[1] = xs[m];
        }, &ys)
        .unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coefficients[1], -3.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let ys = vec![1.0; 20];
        let err = least_squares(20, 2, 7, |m, row| {
            row[0] = m as f64;
            row[1] = m as f64;
        }, &ys)
        .unwrap_err();
        match err {
            Error::RankDeficient { time_index, .. } => assert_eq!(time_index, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_is_rank_deficient() {
        let ys = vec![1.0; 3];
        assert!(least_squares(3, 5, 0, |_, row| row.fill(1.0), &ys).is_err());
    }

    #[test]
    fn time_zero_regression_is_sample_mean() {
        let bundle = simulate_paths(&MarketConfig::new(3, 1.0, 4, 200, 9)).unwrap();
        let targets: Vec<f64> = (0..200).map(|m| bundle.common(m, 4)).collect();
        let (fitted, _) = conditional_expectation(&bundle, &RegressionBasis::new(2), 0, 0, &targets).unwrap();
        let mean = targets.iter().sum::<f64>() / 200.0;
        assert!(fitted.iter().all(|f| (f - mean).abs() < 1e-12));
    }

    #[test]
    fn martingale_projection_is_exact_for_levels() {
        // E[B(T) | F_k] = B(t_k), which lies in the span of any degree >= 1 basis.
        let bundle = simulate_paths(&MarketConfig::new(2, 1.0, 5, 400, 3)).unwrap();
        let targets: Vec<f64> = (0..400).map(|m| bundle.common(m, 3)).collect();
        let (fitted, fit) = conditional_expectation(&bundle, &RegressionBasis::new(2), 1, 3, &targets).unwrap();
        assert!(fit.condition.is_finite());
        for m in 0..400 {
            assert_abs_diff_eq!(fitted[m], bundle.common(m, 3), epsilon = 1e-12);
        }
    }
}
