//! Brownian lattice simulation, Itô sums, Doléans exponentials and BMO
//! diagnostics.
//!
//! Every increment is a pure function of `(seed, component, path, step)`:
//! each (component, path) pair owns a ChaCha stream keyed by the seed and the
//! component's stream id, and draws its steps in order. Simulating on any
//! number of threads therefore yields the same bundle bit for bit.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MarketConfig, ProcessSample, TimeGrid};
use crate::numeric::{mean, pairwise_sum, quantile, symmetric_mean};
use crate::regression::{conditional_expectation, RegressionBasis};

/// Default cap on stored lattice values (increments plus levels).
pub const DEFAULT_MEMORY_CAP: usize = 320_000_000;

const DUMP_MAGIC: &[u8; 4] = b"MFB1";
const LOG_CLAMP: f64 = 700.0;

/// Which Brownian motion drives an integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// The common noise `B`.
    Common,
    /// The idiosyncratic noise `W_i` of agent `i` (0-based).
    Own(usize),
}

/// Simulated increments and levels of `B, W_1, .., W_N` on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    agents: usize,
    paths: usize,
    grid: TimeGrid,
    seed: u64,
    /// RNG stream of each stored component; 0 is B, i is W_i.
    streams: Vec<u64>,
    /// Ordered (component, path, step).
    increments: Vec<f64>,
    /// Ordered (component, path, k) with k = 0..=K.
    levels: Vec<f64>,
    /// Cross-sectional mean of the W_i levels, (path, k).
    mean_field: Vec<f64>,
}

/// Simulates the bundle described by `config` with the default memory cap.
pub fn simulate_paths(config: &MarketConfig) -> Result<PathBundle> {
    PathBundle::simulate(config, DEFAULT_MEMORY_CAP)
}

fn stream_key(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PathBundle {
    pub fn simulate(config: &MarketConfig, memory_cap: usize) -> Result<Self> {
        let streams: Vec<u64> = (0..=config.agents as u64).collect();
        Self::simulate_streams(config, streams, memory_cap)
    }

    /// Simulates with an explicit stream id per component (`streams[0]` for
    /// B, `streams[i]` for W_i). Permuting the W ids permutes the agents.
    pub fn simulate_streams(config: &MarketConfig, streams: Vec<u64>, memory_cap: usize) -> Result<Self> {
        config.validate()?;
        if streams.len() != config.agents + 1 {
            return Err(Error::DimensionMismatch(format!(
                "{} stream ids for {} components",
                streams.len(),
                config.agents + 1
            )));
        }
        let comps = config.agents + 1;
        let (m, k) = (config.paths, config.steps);
        let requested = comps
            .checked_mul(m)
            .and_then(|v| v.checked_mul(2 * k + 1))
            .and_then(|v| v.checked_add(m * (k + 1)))
            .unwrap_or(usize::MAX);
        if requested > memory_cap {
            return Err(Error::ResourceExhausted { requested, cap: memory_cap });
        }
        let grid = config.grid();
        let sd = grid.dt().sqrt();
        let mut increments = vec![0.0; comps * m * k];
        increments.par_chunks_mut(k).enumerate().for_each(|(row, out)| {
            let (c, path) = (row / m, row % m);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_key(config.seed, streams[c]));
            rng.set_stream(path as u64);
            for slot in out.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *slot = sd * z;
            }
        });
        Ok(Self::from_increments(config.agents, m, grid, config.seed, streams, increments))
    }

    fn from_increments(agents: usize, paths: usize, grid: TimeGrid, seed: u64, streams: Vec<u64>, increments: Vec<f64>) -> Self {
        let k = grid.steps();
        let comps = agents + 1;
        let mut levels = vec![0.0; comps * paths * (k + 1)];
        levels
            .par_chunks_mut(k + 1)
            .zip(increments.par_chunks(k))
            .for_each(|(lvl, inc)| {
                let mut acc = 0.0;
                lvl[0] = 0.0;
                for (j, d) in inc.iter().enumerate() {
                    acc += d;
                    lvl[j + 1] = acc;
                }
            });
        let mut bundle = Self { agents, paths, grid, seed, streams, increments, levels, mean_field: Vec::new() };
        bundle.mean_field = bundle.compute_mean_field();
        bundle
    }

    fn compute_mean_field(&self) -> Vec<f64> {
        let k = self.grid.steps();
        let mut out = vec![0.0; self.paths * (k + 1)];
        out.par_chunks_mut(k + 1).enumerate().for_each(|(m, row)| {
            let mut buf = vec![0.0; self.agents];
            for (j, slot) in row.iter_mut().enumerate() {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = self.own(i, m, j);
                }
                *slot = symmetric_mean(&buf);
            }
        });
        out
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn streams(&self) -> &[u64] {
        &self.streams
    }

    fn component(noise: Noise) -> usize {
        match noise {
            Noise::Common => 0,
            Noise::Own(i) => i + 1,
        }
    }

    #[inline]
    fn inc_index(&self, c: usize, m: usize, k: usize) -> usize {
        (c * self.paths + m) * self.grid.steps() + k
    }

    #[inline]
    fn lvl_index(&self, c: usize, m: usize, k: usize) -> usize {
        (c * self.paths + m) * (self.grid.steps() + 1) + k
    }

    /// Increment of `noise` over `[t_k, t_{k+1}]` on path `m`.
    #[inline]
    pub fn increment(&self, noise: Noise, m: usize, k: usize) -> f64 {
        self.increments[self.inc_index(Self::component(noise), m, k)]
    }

    #[inline]
    pub fn level(&self, noise: Noise, m: usize, k: usize) -> f64 {
        self.levels[self.lvl_index(Self::component(noise), m, k)]
    }

    #[inline]
    pub fn common(&self, m: usize, k: usize) -> f64 {
        self.levels[self.lvl_index(0, m, k)]
    }

    #[inline]
    pub fn own(&self, agent: usize, m: usize, k: usize) -> f64 {
        self.levels[self.lvl_index(agent + 1, m, k)]
    }

    #[inline]
    pub fn mean_field(&self, m: usize, k: usize) -> f64 {
        self.mean_field[m * (self.grid.steps() + 1) + k]
    }

    pub fn increments_of(&self, noise: Noise, m: usize) -> &[f64] {
        let start = self.inc_index(Self::component(noise), m, 0);
        &self.increments[start..start + self.grid.steps()]
    }

    /// Keeps B and the first `agents` idiosyncratic components.
    pub fn restrict_agents(&self, agents: usize) -> Result<Self> {
        if agents == 0 || agents > self.agents {
            return Err(Error::DimensionMismatch(format!("cannot restrict {} agents to {agents}", self.agents)));
        }
        let per = self.paths * self.grid.steps();
        let increments = self.increments[..(agents + 1) * per].to_vec();
        Ok(Self::from_increments(
            agents,
            self.paths,
            self.grid,
            self.seed,
            self.streams[..=agents].to_vec(),
            increments,
        ))
    }

    /// Reorders the idiosyncratic components: new agent `j` is old agent `perm[j]`.
    pub fn permute_agents(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.agents];
        if perm.len() != self.agents || !perm.iter().all(|&p| p < self.agents && !std::mem::replace(&mut seen[p], true)) {
            return Err(Error::DimensionMismatch("agent permutation is not a bijection".into()));
        }
        let per = self.paths * self.grid.steps();
        let mut increments = Vec::with_capacity(self.increments.len());
        increments.extend_from_slice(&self.increments[..per]);
        let mut streams = vec![self.streams[0]];
        for &p in perm {
            increments.extend_from_slice(&self.increments[(p + 1) * per..(p + 2) * per]);
            streams.push(self.streams[p + 1]);
        }
        Ok(Self::from_increments(self.agents, self.paths, self.grid, self.seed, streams, increments))
    }

    /// Binary dump: magic `MFB1`, then `N, K, M, seed` as little-endian u64,
    /// then the increments as little-endian f64 ordered (component, path, step).
    /// The horizon is not stored; the reader supplies it.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DUMP_MAGIC)?;
        for v in [self.agents as u64, self.grid.steps() as u64, self.paths as u64, self.seed] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.increments {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_dump<R: Read>(mut input: R, horizon: f64) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::MalformedDump("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            input.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [n, k, m, seed] = header;
        let (n, k, m) = (n as usize, k as usize, m as usize);
        if n == 0 || k == 0 || m == 0 || !(horizon > 0.0) {
            return Err(Error::MalformedDump("degenerate header".into()));
        }
        let count = (n + 1) * m * k;
        let mut bytes = vec![0u8; count * 8];
        input.read_exact(&mut bytes)?;
        let increments = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let streams = (0..=n as u64).collect();
        Ok(Self::from_increments(n, m, TimeGrid::new(horizon, k), seed, streams, increments))
    }

    /// Sample mean and variance of the increments of one component.
    pub fn increment_moments(&self, noise: Noise) -> (f64, f64) {
        let c = Self::component(noise);
        let per = self.paths * self.grid.steps();
        let slice = &self.increments[c * per..(c + 1) * per];
        let mu = mean(slice);
        let sq: Vec<f64> = slice.iter().map(|v| (v - mu) * (v - mu)).collect();
        (mu, pairwise_sum(&sq) / (slice.len().max(2) - 1) as f64)
    }
}

/// Left-point Itô sums `I_k = sum_{j<k} theta_j dX_j`.
pub fn ito_integral(integrand: &ProcessSample, bundle: &PathBundle, driver: Noise) -> Result<ProcessSample> {
    check_shape(integrand, bundle)?;
    let k = bundle.steps();
    let mut out = ProcessSample::zeros(format!("int {} d{:?}", integrand.label, driver), bundle.paths(), k);
    out.values_mut().par_chunks_mut(k + 1).enumerate().for_each(|(m, row)| {
        let inc = bundle.increments_of(driver, m);
        let theta = integrand.path(m);
        let mut acc = 0.0;
        row[0] = 0.0;
        for j in 0..k {
            acc += theta[j] * inc[j];
            row[j + 1] = acc;
        }
    });
    Ok(out)
}

fn check_shape(p: &ProcessSample, bundle: &PathBundle) -> Result<()> {
    if p.paths() != bundle.paths() || p.steps() != bundle.steps() {
        return Err(Error::DimensionMismatch(format!(
            "process {} is {}x{} but the bundle is {}x{}",
            p.label,
            p.paths(),
            p.steps(),
            bundle.paths(),
            bundle.steps()
        )));
    }
    Ok(())
}

/// Density process of a Girsanov change of measure.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovWeight {
    pub weights: ProcessSample,
    /// Number of (path, time) entries whose log-weight hit the clamp.
    pub clamp_events: usize,
}

impl GirsanovWeight {
    pub fn terminal(&self) -> Vec<f64> {
        self.weights.column(self.weights.steps())
    }

    /// `(sum w)^2 / sum w^2` of the terminal weights.
    pub fn effective_sample_size(&self) -> f64 {
        let w = self.terminal();
        let s = pairwise_sum(&w);
        let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
        s * s / pairwise_sum(&sq)
    }
}

/// `E_k = exp(-sum_{j<k} theta_j dX_j - 1/2 sum_{j<k} theta_j^2 dt)`, the
/// Doléans exponential of `-int theta dX`. Log-weights are clamped to
/// `[-700, 700]` and every clamp is counted.
pub fn doleans_exponential(theta: &ProcessSample, bundle: &PathBundle, against: Noise) -> Result<GirsanovWeight> {
    check_shape(theta, bundle)?;
    let k = bundle.steps();
    let dt = bundle.grid().dt();
    let mut weights = ProcessSample::zeros(format!("E(-int {})", theta.label), bundle.paths(), k);
    let clamps: usize = weights
        .values_mut()
        .par_chunks_mut(k + 1)
        .enumerate()
        .map(|(m, row)| {
            let inc = bundle.increments_of(against, m);
            let th = theta.path(m);
            let (mut stoch, mut quad) = (0.0, 0.0);
            let mut clamped = 0;
            row[0] = 1.0;
            for j in 0..k {
                stoch += th[j] * inc[j];
                quad += th[j] * th[j] * dt;
                let log_w = -stoch - 0.5 * quad;
                if log_w.abs() > LOG_CLAMP {
                    clamped += 1;
                }
                row[j + 1] = log_w.clamp(-LOG_CLAMP, LOG_CLAMP).exp();
            }
            clamped
        })
        .sum();
    Ok(GirsanovWeight { weights, clamp_events: clamps })
}

/// Regression surrogate of the BMO norm of `int theta dB` on grid times:
/// `max_k q95( E_k[ sum_{j>=k} theta_j^2 dt ] )^{1/2}`.
pub fn bmo_norm_estimate(theta: &ProcessSample, bundle: &PathBundle, basis: &RegressionBasis, agent: usize) -> Result<f64> {
    check_shape(theta, bundle)?;
    let k_max = bundle.steps();
    let dt = bundle.grid().dt();
    let mut tail = vec![0.0; bundle.paths()];
    let mut worst = 0.0f64;
    for k in (0..k_max).rev() {
        for (m, t) in tail.iter_mut().enumerate() {
            let v = theta.at(m, k);
            *t += v * v * dt;
        }
        let (fitted, _) = conditional_expectation(bundle, basis, agent, k, &tail)?;
        worst = worst.max(quantile(&fitted, 0.95));
    }
    Ok(worst.max(0.0).sqrt())
}

/// Reverse-Hölder exponent and constant attached to a BMO norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmoDiagnostics {
    pub alpha: f64,
    /// Solution of `phi(q) = alpha`; the inequality holds for every exponent below it.
    pub q_star: f64,
    /// Exponent at which the constant is evaluated, `(1 + q_star) / 2`.
    pub q_used: f64,
    /// `C_q` at `q_used`.
    pub c_q: f64,
    /// `C_q` at `q_star` itself when its denominator is positive.
    pub c_q_star: Option<f64>,
}

/// `phi(q) = sqrt(1 + q^-2 log((2q - 1)/(2q - 2))) - 1` on `(1, inf)`.
pub fn reverse_holder_phi(q: f64) -> f64 {
    (1.0 + ((2.0 * q - 1.0) / (2.0 * q - 2.0)).ln() / (q * q)).sqrt() - 1.0
}

/// `C_q = 2 / (1 - (2q-2)/(2q-1) exp(q^2 (alpha^2 + 2 alpha)))` when the
/// denominator is positive.
pub fn reverse_holder_constant(q: f64, alpha: f64) -> Option<f64> {
    let denom = 1.0 - (2.0 * q - 2.0) / (2.0 * q - 1.0) * (q * q * (alpha * alpha + 2.0 * alpha)).exp();
    (denom > 0.0 && denom.is_finite()).then(|| 2.0 / denom)
}

/// Solves `phi(q) = alpha` by bisection. `phi` is strictly decreasing from
/// `+inf` at `q = 1` to `0` at infinity.
pub fn reverse_holder_constants(alpha: f64) -> Result<BmoDiagnostics> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::OutsideReverseHolderRange { alpha });
    }
    let mut lo = 1.0 + 4.0 * f64::EPSILON;
    if reverse_holder_phi(lo) < alpha {
        return Err(Error::OutsideReverseHolderRange { alpha });
    }
    let mut hi = 2.0;
    while reverse_holder_phi(hi) > alpha {
        lo = hi;
        hi *= 2.0;
        if hi > 1e100 {
            return Err(Error::OutsideReverseHolderRange { alpha });
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if reverse_holder_phi(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q_star = if (reverse_holder_phi(lo) - alpha).abs() <= (reverse_holder_phi(hi) - alpha).abs() { lo } else { hi };
    let q_used = 0.5 * (1.0 + q_star);
    let c_q = reverse_holder_constant(q_used, alpha).ok_or(Error::OutsideReverseHolderRange { alpha })?;
    Ok(BmoDiagnostics { alpha, q_star, q_used, c_q, c_q_star: reverse_holder_constant(q_star, alpha) })
}

/// Sample check of `E[(int theta^2 dt)^p] <= p! ||int theta dB||_BMO^{2p}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub p: u32,
    pub lhs: f64,
    pub rhs: f64,
    pub bmo: f64,
    /// Set when `lhs > 1.1 rhs`.
    pub violated: bool,
}

pub fn energy_inequality_check(
    theta: &ProcessSample,
    bundle: &PathBundle,
    basis: &RegressionBasis,
    p: u32,
) -> Result<EnergyReport> {
    if !(1..=3).contains(&p) {
        return Err(Error::InvalidConfig(format!("energy inequality order {p} not in 1..=3")));
    }
    let bmo = bmo_norm_estimate(theta, bundle, basis, 0)?;
    Ok(energy_from_norm(theta, bundle.grid().dt(), p, bmo))
}

pub fn energy_from_norm(theta: &ProcessSample, dt: f64, p: u32, bmo: f64) -> EnergyReport {
    let k = theta.steps();
    let powers: Vec<f64> = (0..theta.paths())
        .map(|m| {
            let q: f64 = theta.path(m)[..k].iter().map(|v| v * v * dt).sum();
            q.powi(p as i32)
        })
        .collect();
    let lhs = mean(&powers);
    let factorial: f64 = (1..=p).map(f64::from).product();
    let rhs = factorial * bmo.powi(2 * p as i32);
    EnergyReport { p, lhs, rhs, bmo, violated: lhs > rhs * 1.1 }
}
