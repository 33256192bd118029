//! Sources, misspecifications, and the true signal covariance Σ*.
//!
//! A source `i` emits `X_i = b_i + ω + ε_i` in the baseline model. The
//! decision maker holds dogmatic beliefs `b̃_i` for the familiar sources in
//! `M` and learns the biases of the others. Variants change how `ω` and the
//! errors enter `X`:
//!
//! | mode          | Σ*                                        |
//! |---------------|-------------------------------------------|
//! | baseline      | `diag(v) + 1 1ᵀ`                          |
//! | loadings      | `diag(v) + α αᵀ`                          |
//! | shock         | `diag(v) + 1 1ᵀ + β βᵀ`                   |
//! | latent        | baseline Σ*, means shifted by a factor    |
//! | multidim      | `diag(Ω₁..Ω_N) + (1 1ᵀ) ⊗ Ω₀`             |
//! | learn-cov     | baseline Σ*, covariance also learned      |
//!
//! Source indices are 0-based in this crate and 1-based in scenario files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IssueCode, Result, ValidationError};
use crate::linalg::{
    self, invert_spd, kronecker, sherman_morrison_inverse, spd_check, submatrix,
    woodbury_inverse, SymMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Loadings,
    Shock,
    Latent,
    Multidim,
    LearnCovariance,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Baseline,
        Mode::Loadings,
        Mode::Shock,
        Mode::Latent,
        Mode::Multidim,
        Mode::LearnCovariance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Loadings => "loadings",
            Mode::Shock => "shock",
            Mode::Latent => "latent",
            Mode::Multidim => "multidim",
            Mode::LearnCovariance => "learn_covariance",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_sources: usize,
    /// Familiar sources, 0-based. Sorted ascending after validation.
    pub misspecified: Vec<usize>,
    /// `b*`, source-major, length `n_sources * state_dim`.
    pub true_bias: Vec<f64>,
    /// `b̃` for each familiar source in `misspecified` order, `state_dim` values each.
    pub perceived_bias: Vec<f64>,
    pub noise_variance: Vec<f64>,
    pub loadings: Option<Vec<f64>>,
    pub shock_loadings: Option<Vec<f64>>,
    pub latent_factor: bool,
    pub state_dim: usize,
    pub state_cov: Option<SymMatrix>,
    pub error_covs: Option<Vec<SymMatrix>>,
    pub learn_covariance: bool,
}

impl Scenario {
    /// Baseline scenario with zero true biases; `perceived` holds `b̃` per familiar source.
    pub fn baseline(noise_variance: &[f64], misspecified: &[usize], perceived: &[f64]) -> Self {
        Scenario {
            n_sources: noise_variance.len(),
            misspecified: misspecified.to_vec(),
            true_bias: vec![0.0; noise_variance.len()],
            perceived_bias: perceived.to_vec(),
            noise_variance: noise_variance.to_vec(),
            loadings: None,
            shock_loadings: None,
            latent_factor: false,
            state_dim: 1,
            state_cov: None,
            error_covs: None,
            learn_covariance: false,
        }
    }

    pub fn mode(&self) -> Mode {
        if self.shock_loadings.is_some() {
            Mode::Shock
        } else if self.latent_factor {
            Mode::Latent
        } else if self.is_multidim() {
            Mode::Multidim
        } else if self.learn_covariance {
            Mode::LearnCovariance
        } else if self.loadings.is_some() {
            Mode::Loadings
        } else {
            Mode::Baseline
        }
    }

    fn is_multidim(&self) -> bool {
        self.state_dim > 1 || self.error_covs.is_some() || self.state_cov.is_some()
    }

    pub fn n_familiar(&self) -> usize {
        self.misspecified.len()
    }

    /// Sources whose biases are learned, ascending.
    pub fn unfamiliar(&self) -> Vec<usize> {
        (0..self.n_sources)
            .filter(|i| !self.misspecified.contains(i))
            .collect()
    }

    pub fn precisions(&self) -> Vec<f64> {
        self.noise_variance.iter().map(|v| 1.0 / v).collect()
    }

    /// Coordinates (in the length `N·K` signal vector) of the familiar sources.
    pub fn familiar_coords(&self) -> Vec<usize> {
        coords(&self.misspecified, self.state_dim)
    }

    pub fn free_coords(&self) -> Vec<usize> {
        coords(&self.unfamiliar(), self.state_dim)
    }

    /// `Δ̃ = b̃ − b*` on the familiar coordinates.
    pub fn delta_tilde(&self) -> Vec<f64> {
        let k = self.state_dim;
        let mut out = Vec::with_capacity(self.perceived_bias.len());
        for (pos, &src) in self.misspecified.iter().enumerate() {
            for d in 0..k {
                out.push(self.perceived_bias[pos * k + d] - self.true_bias[src * k + d]);
            }
        }
        out
    }

    /// True when `b̃ = b*` on every familiar source (nothing is misspecified).
    pub fn is_degenerate(&self) -> bool {
        self.delta_tilde().iter().all(|d| *d == 0.0)
    }

    /// `Ω₀`, defaulting to the identity.
    pub fn state_covariance(&self) -> SymMatrix {
        self.state_cov
            .clone()
            .unwrap_or_else(|| SymMatrix::identity(self.state_dim))
    }

    /// `Ωᵢ`, defaulting to `vᵢ · I`.
    pub fn error_covariance(&self, i: usize) -> SymMatrix {
        match &self.error_covs {
            Some(c) => c[i].clone(),
            None => SymMatrix::from_diagonal(&vec![self.noise_variance[i]; self.state_dim]),
        }
    }

    /// Validates and normalizes (sorts `misspecified`, realigning `perceived_bias`).
    pub fn validate(mut self) -> std::result::Result<Scenario, ValidationError> {
        let mut err = ValidationError::default();
        let n = self.n_sources;
        let k = self.state_dim;

        if k == 0 {
            err.push(IssueCode::BadLength, "state_dim must be >= 1");
        }
        if n == 0 {
            err.push(IssueCode::BadMSize, "n_sources must be >= 1");
        }
        let m = self.misspecified.len();
        if m == 0 || m >= n {
            err.push(
                IssueCode::BadMSize,
                format!("need 1 <= |M| < N, got |M| = {m}, N = {n}"),
            );
        }
        let mut seen = vec![false; n];
        for &i in &self.misspecified {
            if i >= n {
                err.push(IssueCode::BadIndex, format!("source {} out of range", i + 1));
            } else if seen[i] {
                err.push(IssueCode::BadIndex, format!("source {} listed twice", i + 1));
            } else {
                seen[i] = true;
            }
        }
        if self.noise_variance.len() != n {
            err.push(
                IssueCode::BadLength,
                format!("noise_variance has {} entries, expected {n}", self.noise_variance.len()),
            );
        }
        for (i, v) in self.noise_variance.iter().enumerate() {
            if !v.is_finite() {
                err.push(IssueCode::NonFinite, format!("noise_variance[{}] is not finite", i + 1));
            } else if *v <= 0.0 {
                err.push(
                    IssueCode::NonpositiveVariance,
                    format!("noise_variance[{}] = {v} must be positive", i + 1),
                );
            }
        }
        if self.true_bias.len() != n * k {
            err.push(
                IssueCode::BadLength,
                format!("true_bias has {} values, expected {}", self.true_bias.len(), n * k),
            );
        }
        if self.perceived_bias.len() != m * k {
            err.push(
                IssueCode::BadLength,
                format!(
                    "perceived_bias has {} values, expected {}",
                    self.perceived_bias.len(),
                    m * k
                ),
            );
        }
        if self
            .true_bias
            .iter()
            .chain(self.perceived_bias.iter())
            .any(|x| !x.is_finite())
        {
            err.push(IssueCode::NonFinite, "biases must be finite");
        }
        if let Some(a) = &self.loadings {
            if a.len() != n {
                err.push(IssueCode::BadLength, format!("loadings must have {n} entries"));
            }
            if a.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                err.push(IssueCode::NonFinite, "loadings must be positive and finite");
            }
        }
        if let Some(b) = &self.shock_loadings {
            if b.len() != n {
                err.push(IssueCode::BadLength, format!("shock_loadings must have {n} entries"));
            }
            if b.iter().any(|x| !x.is_finite()) {
                err.push(IssueCode::NonFinite, "shock_loadings must be finite");
            }
        }

        let active: Vec<&str> = [
            (self.shock_loadings.is_some(), "shock_loadings"),
            (self.latent_factor, "latent_factor"),
            (self.is_multidim(), "multidimensional"),
            (self.learn_covariance, "learn_covariance"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| *name)
        .collect();
        if active.len() > 1 {
            err.push(
                IssueCode::ModeConflict,
                format!("mutually exclusive modes requested: {}", active.join(", ")),
            );
        }
        if self.loadings.is_some() && !active.is_empty() {
            err.push(
                IssueCode::ModeConflict,
                format!("loadings cannot be combined with {}", active.join(", ")),
            );
        }

        if let Some(s0) = &self.state_cov {
            if s0.dim() != k {
                err.push(IssueCode::BadLength, format!("state_cov must be {k}x{k}"));
            } else if !spd_check(s0).is_spd {
                err.push(IssueCode::NotSpd, "state_cov is not SPD");
            }
        }
        if let Some(cs) = &self.error_covs {
            if cs.len() != n {
                err.push(IssueCode::BadLength, format!("error_covs must have {n} entries"));
            }
            for (i, c) in cs.iter().enumerate() {
                if c.dim() != k {
                    err.push(IssueCode::BadLength, format!("error_covs[{}] must be {k}x{k}", i + 1));
                } else if !spd_check(c).is_spd {
                    err.push(IssueCode::NotSpd, format!("error_covs[{}] is not SPD", i + 1));
                }
            }
        }

        if !err.is_empty() {
            return Err(err);
        }

        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by_key(|&p| self.misspecified[p]);
        let perceived: Vec<f64> = order
            .iter()
            .flat_map(|&p| self.perceived_bias[p * k..(p + 1) * k].iter().copied())
            .collect();
        self.misspecified = order.iter().map(|&p| self.misspecified[p]).collect();
        self.perceived_bias = perceived;
        Ok(self)
    }

    pub fn from_json_str(text: &str) -> Result<Scenario> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("scenario: {e}")))?;
        Ok(file.into_scenario()?.validate()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile::from_scenario(self)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }
}

fn coords(sources: &[usize], k: usize) -> Vec<usize> {
    sources
        .iter()
        .flat_map(|&i| (0..k).map(move |d| i * k + d))
        .collect()
}

/// A bias entry in a scenario file: a number, or `state_dim` numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BiasValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl BiasValue {
    fn values(&self) -> Vec<f64> {
        match self {
            BiasValue::Scalar(x) => vec![*x],
            BiasValue::Vector(v) => v.clone(),
        }
    }

    fn from_slice(v: &[f64]) -> Self {
        if v.len() == 1 {
            BiasValue::Scalar(v[0])
        } else {
            BiasValue::Vector(v.to_vec())
        }
    }
}

/// On-disk scenario layout. Indices are 1-based; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub n_sources: usize,
    pub misspecified: Vec<usize>,
    pub true_bias: Vec<BiasValue>,
    pub perceived_bias: BTreeMap<String, BiasValue>,
    pub noise_variance: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loadings: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shock_loadings: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_factor: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_covs: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learn_covariance: Option<bool>,
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<SymMatrix> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(ValidationError {
            issues: vec![crate::error::Issue {
                code: IssueCode::BadLength,
                message: format!("{what} must be a non-empty square matrix"),
            }],
        }
        .into());
    }
    SymMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])).map_err(|e| {
        let mut v = ValidationError::default();
        v.push(IssueCode::NotSpd, format!("{what}: {e}"));
        v.into()
    })
}

fn matrix_rows(m: &SymMatrix) -> Vec<Vec<f64>> {
    (0..m.dim())
        .map(|i| (0..m.dim()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        let mut err = ValidationError::default();
        let k = self.state_dim.unwrap_or(1);

        let mut misspecified = Vec::with_capacity(self.misspecified.len());
        for &i in &self.misspecified {
            if i == 0 {
                err.push(IssueCode::BadIndex, "source indices are 1-based; got 0");
            } else {
                misspecified.push(i - 1);
            }
        }

        let mut true_bias = Vec::new();
        for (i, b) in self.true_bias.iter().enumerate() {
            let vals = b.values();
            if vals.len() != k {
                err.push(
                    IssueCode::BadLength,
                    format!("true_bias[{}] has {} values, expected {k}", i + 1, vals.len()),
                );
            }
            true_bias.extend(vals);
        }

        let mut perceived_by_source = BTreeMap::new();
        for (key, val) in &self.perceived_bias {
            match key.trim().parse::<usize>() {
                Ok(idx) if idx >= 1 => {
                    perceived_by_source.insert(idx - 1, val.values());
                }
                _ => err.push(
                    IssueCode::BadIndex,
                    format!("perceived_bias key {key:?} is not a 1-based source index"),
                ),
            }
        }
        let listed: std::collections::BTreeSet<usize> = misspecified.iter().copied().collect();
        let keyed: std::collections::BTreeSet<usize> = perceived_by_source.keys().copied().collect();
        if listed != keyed {
            err.push(
                IssueCode::BadIndex,
                "perceived_bias keys must match the misspecified set exactly",
            );
        }
        let mut perceived_bias = Vec::new();
        for i in &misspecified {
            match perceived_by_source.get(i) {
                Some(vals) => {
                    if vals.len() != k {
                        err.push(
                            IssueCode::BadLength,
                            format!("perceived_bias[{}] must have {k} values", i + 1),
                        );
                    }
                    perceived_bias.extend(vals.iter().copied());
                }
                None => perceived_bias.extend(std::iter::repeat_n(0.0, k)),
            }
        }

        let state_cov = match &self.state_cov {
            Some(rows) => match matrix_from_rows(rows, "state_cov") {
                Ok(m) => Some(m),
                Err(Error::Validation(v)) => {
                    err.issues.extend(v.issues);
                    None
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        let error_covs = match &self.error_covs {
            Some(list) => {
                let mut out = Vec::new();
                for (i, rows) in list.iter().enumerate() {
                    match matrix_from_rows(rows, &format!("error_covs[{}]", i + 1)) {
                        Ok(m) => out.push(m),
                        Err(Error::Validation(v)) => err.issues.extend(v.issues),
                        Err(e) => return Err(e),
                    }
                }
                Some(out)
            }
            None => None,
        };

        if !err.is_empty() {
            return Err(err.into());
        }
        Ok(Scenario {
            n_sources: self.n_sources,
            misspecified,
            true_bias,
            perceived_bias,
            noise_variance: self.noise_variance,
            loadings: self.loadings,
            shock_loadings: self.shock_loadings,
            latent_factor: self.latent_factor.unwrap_or(false),
            state_dim: k,
            state_cov,
            error_covs,
            learn_covariance: self.learn_covariance.unwrap_or(false),
        })
    }

    pub fn from_scenario(s: &Scenario) -> Self {
        let k = s.state_dim;
        ScenarioFile {
            n_sources: s.n_sources,
            misspecified: s.misspecified.iter().map(|i| i + 1).collect(),
            true_bias: s.true_bias.chunks(k).map(BiasValue::from_slice).collect(),
            perceived_bias: s
                .misspecified
                .iter()
                .enumerate()
                .map(|(p, &i)| {
                    (
                        (i + 1).to_string(),
                        BiasValue::from_slice(&s.perceived_bias[p * k..(p + 1) * k]),
                    )
                })
                .collect(),
            noise_variance: s.noise_variance.clone(),
            loadings: s.loadings.clone(),
            shock_loadings: s.shock_loadings.clone(),
            latent_factor: s.latent_factor.then_some(true),
            state_dim: (k != 1).then_some(k),
            state_cov: s.state_cov.as_ref().map(matrix_rows),
            error_covs: s
                .error_covs
                .as_ref()
                .map(|cs| cs.iter().map(matrix_rows).collect()),
            learn_covariance: s.learn_covariance.then_some(true),
        }
    }
}

/// How Σ*⁻¹ was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assembly {
    DiagPlusRank1,
    DiagPlusRank2,
    KroneckerBlock,
    Generic,
}

/// Σ* with its familiar/unfamiliar block views and precomputed inverse.
#[derive(Debug, Clone)]
pub struct SignalModel {
    pub n_sources: usize,
    pub state_dim: usize,
    pub sigma_star: SymMatrix,
    pub sigma_star_inv: SymMatrix,
    /// Familiar × familiar block of Σ*.
    pub block_a: SymMatrix,
    /// Familiar × unfamiliar.
    pub block_b: DMatrix<f64>,
    /// Unfamiliar × familiar.
    pub block_c: DMatrix<f64>,
    pub block_d: SymMatrix,
    pub assembled_via: Assembly,
    pub familiar: Vec<usize>,
    pub free: Vec<usize>,
    /// `Cov(ω, X)`, shape `K × N·K`.
    pub state_loading: DMatrix<f64>,
    /// `Var(ω)`, `K × K`.
    pub state_cov: SymMatrix,
    /// Quadratic form minimized over bias misperceptions, with the fixed and
    /// free positions of the decision vector. This is Σ*⁻¹ except in latent
    /// mode, where it is `Φ = Γᵀ Σ*⁻¹ Γ` over `N + 1` coordinates.
    pub objective: SymMatrix,
    pub objective_fixed: Vec<usize>,
    pub objective_free: Vec<usize>,
    pub latent: bool,
}

impl SignalModel {
    pub fn dim(&self) -> usize {
        self.sigma_star.dim()
    }

    /// Rebuilds `[[A, B], [C, D]]` in the original coordinate order.
    pub fn reassemble(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (a, &i) in self.familiar.iter().enumerate() {
            for (b, &j) in self.familiar.iter().enumerate() {
                out[(i, j)] = self.block_a[(a, b)];
            }
            for (b, &j) in self.free.iter().enumerate() {
                out[(i, j)] = self.block_b[(a, b)];
            }
        }
        for (a, &i) in self.free.iter().enumerate() {
            for (b, &j) in self.familiar.iter().enumerate() {
                out[(i, j)] = self.block_c[(a, b)];
            }
            for (b, &j) in self.free.iter().enumerate() {
                out[(i, j)] = self.block_d[(a, b)];
            }
        }
        out
    }
}

const INVERSE_CROSS_CHECK: f64 = 1e-8;

/// Assembles Σ* for the scenario's mode and inverts it along the cheapest
/// rank-update route, cross-checked against a dense Cholesky inverse.
pub fn build_signal_model(s: &Scenario) -> Result<SignalModel> {
    let n = s.n_sources;
    let k = s.state_dim;
    let nk = n * k;
    let mode = s.mode();
    let v = &s.noise_variance;
    let nu = s.precisions();

    let (sigma, inverse, assembled_via) = match mode {
        Mode::Baseline | Mode::Latent | Mode::LearnCovariance => {
            let sigma = DMatrix::from_fn(n, n, |i, j| if i == j { v[i] + 1.0 } else { 1.0 });
            let ones = DVector::from_element(n, 1.0);
            let inv = sherman_morrison_inverse(&SymMatrix::from_diagonal(&nu), &ones, &ones)?;
            (sigma, inv, Assembly::DiagPlusRank1)
        }
        Mode::Loadings => {
            let a = DVector::from_column_slice(s.loadings.as_ref().expect("loadings mode"));
            let sigma = DMatrix::from_fn(n, n, |i, j| {
                let d = if i == j { v[i] } else { 0.0 };
                d + a[i] * a[j]
            });
            let inv = sherman_morrison_inverse(&SymMatrix::from_diagonal(&nu), &a, &a)?;
            (sigma, inv, Assembly::DiagPlusRank1)
        }
        Mode::Shock => {
            let beta = DVector::from_column_slice(s.shock_loadings.as_ref().expect("shock mode"));
            let sigma = DMatrix::from_fn(n, n, |i, j| {
                let d = if i == j { v[i] } else { 0.0 };
                d + 1.0 + beta[i] * beta[j]
            });
            let ones = DVector::from_element(n, 1.0);
            let first = sherman_morrison_inverse(&SymMatrix::from_diagonal(&nu), &ones, &ones)?;
            let first = SymMatrix::new(first)?;
            let inv = sherman_morrison_inverse(&first, &beta, &beta)?;
            (sigma, inv, Assembly::DiagPlusRank2)
        }
        Mode::Multidim => {
            let omega0 = s.state_covariance();
            let mut sigma = DMatrix::zeros(nk, nk);
            let mut g_inv = DMatrix::zeros(nk, nk);
            for i in 0..n {
                let oi = s.error_covariance(i);
                sigma.view_mut((i * k, i * k), (k, k)).copy_from(oi.matrix());
                g_inv
                    .view_mut((i * k, i * k), (k, k))
                    .copy_from(invert_spd(&oi)?.matrix());
            }
            let e = kronecker(&DMatrix::from_element(n, 1, 1.0), &DMatrix::identity(k, k));
            sigma += &e * omega0.matrix() * e.transpose();
            let omega0_inv = invert_spd(&omega0)?;
            let inv = woodbury_inverse(&SymMatrix::new(g_inv)?, &e, omega0_inv.matrix(), &e)?;
            (sigma, inv, Assembly::KroneckerBlock)
        }
    };

    let sigma_star = SymMatrix::new(sigma)?;
    let report = spd_check(&sigma_star);
    if !report.is_spd {
        return Err(Error::NotSpd(format!(
            "assembled covariance has lambda_min = {:e}",
            report.lambda_min
        )));
    }
    let dense = invert_spd(&sigma_star)?;
    let scale = linalg::max_abs(dense.matrix());
    let gap = linalg::max_abs(&(&inverse - dense.matrix()));
    if gap > INVERSE_CROSS_CHECK * scale.max(1.0) {
        return Err(Error::Inconsistent {
            context: "rank-update inverse vs dense inverse".into(),
            discrepancy: gap,
        });
    }
    let sigma_star_inv = SymMatrix::new(inverse)?;

    let familiar = s.familiar_coords();
    let free = s.free_coords();
    let block_a = sigma_star.principal(&familiar);
    let block_d = sigma_star.principal(&free);
    let block_b = submatrix(sigma_star.matrix(), &familiar, &free);
    let block_c = submatrix(sigma_star.matrix(), &free, &familiar);

    let (state_loading, state_cov) = match mode {
        Mode::Loadings => (
            DMatrix::from_row_slice(1, n, s.loadings.as_ref().unwrap()),
            SymMatrix::identity(1),
        ),
        Mode::Multidim => {
            let omega0 = s.state_covariance();
            let row = kronecker(&DMatrix::from_element(1, n, 1.0), omega0.matrix());
            (row, omega0)
        }
        _ => (DMatrix::from_element(1, n, 1.0), SymMatrix::identity(1)),
    };

    let latent = mode == Mode::Latent;
    let (objective, objective_fixed, objective_free) = if latent {
        // Γ = [I | 1] maps the N+1 fundamentals onto signal means.
        let mut gamma = DMatrix::zeros(n, n + 1);
        gamma.view_mut((0, 0), (n, n)).fill_with_identity();
        gamma.column_mut(n).fill(1.0);
        let phi = gamma.transpose() * sigma_star_inv.matrix() * &gamma;
        let mut free_lat = free.clone();
        free_lat.push(n);
        (SymMatrix::new(phi)?, familiar.clone(), free_lat)
    } else {
        (sigma_star_inv.clone(), familiar.clone(), free.clone())
    };

    Ok(SignalModel {
        n_sources: n,
        state_dim: k,
        sigma_star,
        sigma_star_inv,
        block_a,
        block_b,
        block_c,
        block_d,
        assembled_via,
        familiar,
        free,
        state_loading,
        state_cov,
        objective,
        objective_fixed,
        objective_free,
        latent,
    })
}

/// The long-run misperception `Δ = b̂ − b*` and its summaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Delta {
    /// Length `N·K`, source-major.
    pub full: Vec<f64>,
    /// `Δ̃ = b̃ − b*` on familiar coordinates.
    pub familiar_part: Vec<f64>,
    /// `Δ̂` on unfamiliar coordinates.
    pub learned_part: Vec<f64>,
    /// `Δ̄`: one value per state dimension.
    pub metric: Vec<f64>,
    /// Misperception of the common latent factor, in latent mode.
    pub latent_component: Option<f64>,
}

impl Delta {
    pub fn new(
        familiar: &[usize],
        free: &[usize],
        familiar_part: Vec<f64>,
        learned_part: Vec<f64>,
        metric: Vec<f64>,
        latent_component: Option<f64>,
    ) -> Self {
        let mut full = vec![0.0; familiar.len() + free.len()];
        for (p, &i) in familiar.iter().enumerate() {
            full[i] = familiar_part[p];
        }
        for (p, &i) in free.iter().enumerate() {
            full[i] = learned_part[p];
        }
        Delta {
            full,
            familiar_part,
            learned_part,
            metric,
            latent_component,
        }
    }

    /// Scalar metric; the first component when `K > 1`.
    pub fn metric_scalar(&self) -> f64 {
        self.metric[0]
    }

    pub fn full_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.full)
    }

    /// Decision vector of the objective: `full`, plus the latent component if any.
    pub fn decision_vector(&self) -> DVector<f64> {
        let mut v = self.full.clone();
        if let Some(l) = self.latent_component {
            v.push(l);
        }
        DVector::from_vec(v)
    }

    pub fn max_abs_diff(&self, other: &Delta) -> f64 {
        let a = self.decision_vector();
        let b = other.decision_vector();
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        (a - b).amax()
    }
}

/// Draws a random valid scenario of the given mode. Precisions lie in
/// `[0.2, 5]` and misspecifications in `[-2, 2]`, so Σ* stays well conditioned.
pub fn random_scenario<R: Rng + ?Sized>(mode: Mode, rng: &mut R) -> Scenario {
    let n = rng.random_range(2..=7usize);
    let m = rng.random_range(1..n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut misspecified: Vec<usize> = idx[..m].to_vec();
    misspecified.sort_unstable();

    let k = if mode == Mode::Multidim {
        rng.random_range(1..=3usize)
    } else {
        1
    };
    let noise_variance: Vec<f64> = (0..n).map(|_| 1.0 / rng.random_range(0.2..5.0)).collect();
    let true_bias: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut perceived_bias = Vec::with_capacity(m * k);
    for &i in &misspecified {
        for d in 0..k {
            perceived_bias.push(true_bias[i * k + d] + rng.random_range(-2.0..2.0));
        }
    }
    let mut s = Scenario {
        n_sources: n,
        misspecified,
        true_bias,
        perceived_bias,
        noise_variance,
        loadings: None,
        shock_loadings: None,
        latent_factor: false,
        state_dim: k,
        state_cov: None,
        error_covs: None,
        learn_covariance: false,
    };
    match mode {
        Mode::Baseline => {}
        Mode::Loadings => {
            s.loadings = Some((0..n).map(|_| rng.random_range(0.5..2.0)).collect());
        }
        Mode::Shock => {
            s.shock_loadings = Some((0..n).map(|_| rng.random_range(-1.5..1.5)).collect());
        }
        Mode::Latent => s.latent_factor = true,
        Mode::LearnCovariance => s.learn_covariance = true,
        Mode::Multidim => {
            s.state_cov = Some(random_spd(k, 0.5, rng));
            s.error_covs = Some((0..n).map(|_| random_spd(k, 0.2, rng)).collect());
        }
    }
    s.validate().expect("generated scenario is valid")
}

/// `L Lᵀ + floor·I` with `L` entries uniform in `[-1, 1]`.
pub fn random_spd<R: Rng + ?Sized>(k: usize, floor: f64, rng: &mut R) -> SymMatrix {
    let l = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    SymMatrix::new(&l * l.transpose() + DMatrix::identity(k, k) * floor).expect("symmetric")
}
