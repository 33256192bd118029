//! Seeded simulation of the DM's Bayesian updating with known Σ*.
//!
//! Signals are drawn from the true model. The DM believes the familiar biases
//! equal `b̃` and holds a Gaussian prior on the remaining parameters `u`
//! (unfamiliar biases, plus the latent factor in latent mode). Under the DM's
//! model the signal mean is `h + G u`, so the posterior stays Gaussian with
//! precision `Λ₀ + T·GᵀPG` and mean solving
//! `(Λ₀ + T·GᵀPG) μ = Λ₀ m₀ + GᵀP Σₜ (xₜ − h)`, where `P = Σ*⁻¹`.

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::klsolver::KlSolution;
use crate::linalg::{invert_spd, SymMatrix};
use crate::report::{fmt_g17, Csv};
use crate::scenario::{build_signal_model, Mode, Scenario, SignalModel};

pub const DEFAULT_PRIOR_VARIANCE: f64 = 100.0;
const CHUNK: usize = 4096;

/// Gaussian prior (or posterior) over the learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: DVector<f64>,
    pub covariance: SymMatrix,
}

impl PriorSpec {
    pub fn diffuse(dim: usize) -> Self {
        PriorSpec {
            mean: DVector::zeros(dim),
            covariance: SymMatrix::from_diagonal(&vec![DEFAULT_PRIOR_VARIANCE; dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sd(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.covariance[(i, i)].sqrt()).collect()
    }
}

/// Draws one period of signals from the true model: common state, common
/// shock (shock mode), then each source's error, in that order.
#[derive(Debug, Clone)]
pub struct SignalSampler {
    n: usize,
    k: usize,
    true_bias: Vec<f64>,
    state_factor: DMatrix<f64>,
    state_loading: Vec<f64>,
    shock: Option<Vec<f64>>,
    error_factors: Vec<DMatrix<f64>>,
}

impl SignalSampler {
    pub fn new(s: &Scenario) -> Result<Self> {
        let k = s.state_dim;
        let chol = |m: &SymMatrix, what: &str| -> Result<DMatrix<f64>> {
            m.matrix()
                .clone()
                .cholesky()
                .map(|c| c.l())
                .ok_or_else(|| Error::NotSpd(what.into()))
        };
        let state_factor = chol(&s.state_covariance(), "state covariance")?;
        let error_factors = (0..s.n_sources)
            .map(|i| chol(&s.error_covariance(i), "error covariance"))
            .collect::<Result<Vec<_>>>()?;
        Ok(SignalSampler {
            n: s.n_sources,
            k,
            true_bias: s.true_bias.clone(),
            state_factor,
            state_loading: s.loadings.clone().unwrap_or_else(|| vec![1.0; s.n_sources]),
            shock: s.shock_loadings.clone(),
            error_factors,
        })
    }

    pub fn width(&self) -> usize {
        self.n * self.k
    }

    /// Signals of period `t`, from a stream keyed by `(seed, t)`.
    pub fn period(&self, seed: u64, t: u64) -> Vec<f64> {
        self.draw(seed, t).1
    }

    /// State `ω` and signals of period `t`.
    pub fn draw(&self, seed: u64, t: u64) -> (DVector<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t);
        let k = self.k;
        let mut normals = |m: usize| -> DVector<f64> {
            DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let omega = &self.state_factor * normals(k);
        let theta = self.shock.as_ref().map(|_| normals(1)[0]);
        let mut x = self.true_bias.clone();
        for i in 0..self.n {
            let eps = &self.error_factors[i] * normals(k);
            for d in 0..k {
                let mut v = self.state_loading[i] * omega[d] + eps[d];
                if let (Some(beta), Some(th)) = (&self.shock, theta) {
                    v += beta[i] * th;
                }
                x[i * k + d] += v;
            }
        }
        (omega, x)
    }

    /// Periods `first..first + count` as rows, generated in parallel.
    fn rows(&self, seed: u64, first: u64, count: usize) -> Vec<Vec<f64>> {
        (0..count as u64)
            .into_par_iter()
            .map(|j| self.period(seed, first + j))
            .collect()
    }
}

/// `T × N·K` matrix of signals for periods `1..=T`.
pub fn generate_signals(s: &Scenario, seed: u64, t: usize) -> Result<DMatrix<f64>> {
    let sampler = SignalSampler::new(s)?;
    let rows = sampler.rows(seed, 1, t);
    Ok(DMatrix::from_fn(t, sampler.width(), |r, c| rows[r][c]))
}

/// Hash of the signal stream's bit patterns, in period order.
pub fn signals_digest(signals: &DMatrix<f64>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for r in 0..signals.nrows() {
        for c in 0..signals.ncols() {
            signals[(r, c)].to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// The DM's mean map `h + G u` and the likelihood pieces `GᵀPG`, `GᵀP`.
#[derive(Debug, Clone)]
pub struct Likelihood {
    offset: DVector<f64>,
    info: DMatrix<f64>,
    gtp: DMatrix<f64>,
    /// Signal coordinate of each learned parameter; `n·k` for the latent factor.
    pub coordinates: Vec<usize>,
}

impl Likelihood {
    /// `perceived` is `b̃` on the familiar coordinates.
    pub fn new(sm: &SignalModel, perceived: &[f64]) -> Result<Self> {
        let n = sm.dim();
        if perceived.len() != sm.familiar.len() {
            return Err(Error::Dimension(format!(
                "perceived biases: {} values for {} familiar coordinates",
                perceived.len(),
                sm.familiar.len()
            )));
        }
        let mut offset = DVector::zeros(n);
        for (p, &i) in sm.familiar.iter().enumerate() {
            offset[i] = perceived[p];
        }
        let mut coordinates = sm.free.clone();
        let mut g = DMatrix::zeros(n, coordinates.len() + usize::from(sm.latent));
        for (c, &i) in sm.free.iter().enumerate() {
            g[(i, c)] = 1.0;
        }
        if sm.latent {
            g.column_mut(coordinates.len()).fill(1.0);
            coordinates.push(n);
        }
        let gtp = g.transpose() * sm.sigma_star_inv.matrix();
        let info = &gtp * &g;
        Ok(Likelihood {
            offset,
            info: (&info + info.transpose()) * 0.5,
            gtp,
            coordinates,
        })
    }

    pub fn dim(&self) -> usize {
        self.coordinates.len()
    }

    /// Posterior after `count` observations whose sum is `sum`.
    pub fn posterior(&self, prior: &PriorSpec, count: usize, sum: &DVector<f64>) -> Result<PriorSpec> {
        if prior.dim() != self.dim() || prior.covariance.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "prior has dimension {}, expected {}",
                prior.dim(),
                self.dim()
            )));
        }
        if count == 0 {
            return Ok(prior.clone());
        }
        let prior_precision = invert_spd(&prior.covariance)
            .map_err(|_| Error::NotSpd("prior covariance".into()))?;
        let precision = prior_precision.matrix() + &self.info * count as f64;
        let rhs = prior_precision.matrix() * &prior.mean
            + &self.gtp * (sum - &self.offset * count as f64);
        let precision = SymMatrix::new(precision)?;
        let covariance = invert_spd(&precision)?;
        let mean = covariance.matrix() * rhs;
        Ok(PriorSpec { mean, covariance })
    }
}

/// Conjugate update of `prior` with the rows of `batch`.
pub fn posterior_update(
    prior: &PriorSpec,
    sm: &SignalModel,
    perceived: &[f64],
    batch: &DMatrix<f64>,
) -> Result<PriorSpec> {
    if batch.nrows() > 0 && batch.ncols() != sm.dim() {
        return Err(Error::Dimension(format!(
            "batch has {} columns, expected {}",
            batch.ncols(),
            sm.dim()
        )));
    }
    let lik = Likelihood::new(sm, perceived)?;
    let sum = if batch.nrows() == 0 {
        DVector::zeros(sm.dim())
    } else {
        batch.row_sum().transpose()
    };
    lik.posterior(prior, batch.nrows(), &sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub seed: u64,
    pub periods: usize,
    pub posterior_means: Vec<DVector<f64>>,
    pub posterior_covs: Vec<SymMatrix>,
    pub checkpoints: Vec<usize>,
    pub signals_digest: u64,
    /// Signal coordinate of each learned parameter (`n·k` marks the latent factor).
    pub coordinates: Vec<usize>,
}

impl SimulationTrace {
    pub fn final_mean(&self) -> &DVector<f64> {
        self.posterior_means.last().expect("at least one checkpoint")
    }

    pub fn final_sd(&self) -> Vec<f64> {
        let c = self.posterior_covs.last().expect("at least one checkpoint");
        (0..c.dim()).map(|i| c[(i, i)].sqrt()).collect()
    }

    /// CSV with header `period,coord_index,posterior_mean,posterior_sd`;
    /// coordinates are 1-based.
    pub fn to_csv(&self) -> String {
        let mut csv = Csv::new(
            Some(self.seed),
            &["period", "coord_index", "posterior_mean", "posterior_sd"],
        );
        for (c, &period) in self.checkpoints.iter().enumerate() {
            let cov = &self.posterior_covs[c];
            for (j, &coord) in self.coordinates.iter().enumerate() {
                csv.row(&[
                    period.to_string(),
                    (coord + 1).to_string(),
                    fmt_g17(self.posterior_means[c][j]),
                    fmt_g17(cov[(j, j)].sqrt()),
                ]);
            }
        }
        csv.finish()
    }
}

/// Powers of ten up to `t`, with `t` appended if it is not one.
pub fn default_checkpoints(t: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut p = 1usize;
    while p <= t {
        out.push(p);
        match p.checked_mul(10) {
            Some(next) => p = next,
            None => break,
        }
    }
    if out.last() != Some(&t) {
        out.push(t);
    }
    out
}

/// Runs `t` periods, recording the posterior at each checkpoint.
pub fn run_convergence(
    s: &Scenario,
    prior: &PriorSpec,
    seed: u64,
    t: usize,
    checkpoints: &[usize],
) -> Result<SimulationTrace> {
    if s.mode() == Mode::LearnCovariance {
        return Err(Error::UnsupportedMode("learn_covariance"));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("periods must be positive".into()));
    }
    let mut checkpoints = checkpoints.to_vec();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints.is_empty() {
        checkpoints = default_checkpoints(t);
    }
    if checkpoints.last().is_some_and(|&c| c > t) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint {} exceeds the horizon {t}",
            checkpoints.last().unwrap()
        )));
    }

    let sm = build_signal_model(s)?;
    let lik = Likelihood::new(&sm, &s.perceived_bias)?;
    let sampler = SignalSampler::new(s)?;
    let width = sampler.width();
    let mut sum = DVector::zeros(width);
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    let mut means = Vec::with_capacity(checkpoints.len());
    let mut covs = Vec::with_capacity(checkpoints.len());
    let mut next = 0;
    let mut record = |count: usize, sum: &DVector<f64>, next: &mut usize| -> Result<()> {
        while *next < checkpoints.len() && checkpoints[*next] == count {
            let post = lik.posterior(prior, count, sum)?;
            means.push(post.mean);
            covs.push(post.covariance);
            *next += 1;
        }
        Ok(())
    };
    record(0, &sum, &mut next)?;

    let mut done = 0usize;
    while done < t {
        let count = CHUNK.min(t - done);
        for row in sampler.rows(seed, done as u64 + 1, count) {
            for (c, v) in row.iter().enumerate() {
                sum[c] += v;
                v.to_bits().hash(&mut hasher);
            }
            done += 1;
            record(done, &sum, &mut next)?;
        }
    }

    Ok(SimulationTrace {
        seed,
        periods: t,
        posterior_means: means,
        posterior_covs: covs,
        checkpoints,
        signals_digest: hasher.finish(),
        coordinates: lik.coordinates.clone(),
    })
}

/// Where the posterior mean should settle: `b*` plus the KL-minimizing
/// misperception on each learned coordinate.
pub fn limit_mean(s: &Scenario, sol: &KlSolution) -> DVector<f64> {
    let free = s.free_coords();
    let mut out: Vec<f64> = free
        .iter()
        .zip(&sol.delta.learned_part)
        .map(|(&c, d)| s.true_bias[c] + d)
        .collect();
    if let Some(l) = sol.delta.latent_component {
        out.push(l);
    }
    DVector::from_vec(out)
}

/// Largest `|mean − limit| / sd` over learned coordinates at the final checkpoint.
pub fn max_z_score(trace: &SimulationTrace, limit: &DVector<f64>) -> f64 {
    let mean = trace.final_mean();
    trace
        .final_sd()
        .iter()
        .enumerate()
        .map(|(j, sd)| (mean[j] - limit[j]).abs() / sd)
        .fold(0.0, f64::max)
}
