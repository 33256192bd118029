//! From limiting beliefs to behavior: best linear predictors of the state,
//! expected-utility losses, the compound-learning decomposition, and the
//! portfolio application.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::klsolver::KlSolution;
use crate::learner::SignalSampler;
use crate::linalg::{invert_spd, SymMatrix};
use crate::report::{fmt_g17, Csv};
use crate::scenario::{build_signal_model, Mode, Scenario, SignalModel};

/// Absolute slack added to `4·se` when a Monte Carlo estimate is compared
/// with its analytic value. Antithetic pairs make linear integrands exact up
/// to rounding, so their standard error can be zero.
pub const MC_FLOOR: f64 = 1e-12;
const MC_CHUNK: usize = 4096;

/// `BLP(X) = W X + intercept`, one row per state dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Blp {
    pub coeffs: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl Blp {
    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.coeffs * x + &self.intercept
    }
}

/// Best linear predictor of `ω` for a DM who believes signals have mean
/// `bias_belief` and covariance `sigma`: weights `c Σ⁻¹`, intercept `−c Σ⁻¹ b`.
pub fn blp_with_covariance(
    c: &DMatrix<f64>,
    sigma: &SymMatrix,
    bias_belief: &DVector<f64>,
) -> Result<Blp> {
    if c.ncols() != sigma.dim() || bias_belief.len() != sigma.dim() {
        return Err(Error::Dimension(format!(
            "BLP: loading is {}x{}, covariance {}x{}, belief length {}",
            c.nrows(),
            c.ncols(),
            sigma.dim(),
            sigma.dim(),
            bias_belief.len()
        )));
    }
    let chol = sigma
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("BLP covariance".into()))?;
    let coeffs = chol.solve(&c.transpose()).transpose();
    let intercept = -(&coeffs * bias_belief);
    Ok(Blp { coeffs, intercept })
}

pub fn blp(sm: &SignalModel, bias_belief: &DVector<f64>) -> Result<Blp> {
    blp_with_covariance(&sm.state_loading, &sm.sigma_star, bias_belief)
}

/// Signal means the DM ends up believing: `b* + Δ`, plus the latent factor if any.
pub fn perceived_means(s: &Scenario, sol: &KlSolution) -> DVector<f64> {
    let mut b = DVector::from_column_slice(&s.true_bias);
    b += sol.delta.full_vector();
    if let Some(l) = sol.delta.latent_component {
        b.add_scalar_mut(l);
    }
    b
}

/// `(BLP*, BLP̂)` for the scenario and its limiting belief.
pub fn predictors(s: &Scenario, sm: &SignalModel, sol: &KlSolution) -> Result<(Blp, Blp)> {
    let star = blp(sm, &DVector::from_column_slice(&s.true_bias))?;
    let sigma_hat = sol.sigma_hat.as_ref().unwrap_or(&sm.sigma_star);
    let hat = blp_with_covariance(&sm.state_loading, sigma_hat, &perceived_means(s, sol))?;
    Ok((star, hat))
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(mean: f64) -> Self {
        Estimate { mean, se: 0.0 }
    }

    /// `|mean − target| ≤ 4·se + MC_FLOOR`.
    pub fn agrees_with(&self, target: f64) -> bool {
        (self.mean - target).abs() <= 4.0 * self.se + MC_FLOOR
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    /// `−cᵀΣ*⁻¹Δ`: misspecified bias learning alone.
    pub term_i: f64,
    /// `cᵀ(Σ̂⁻¹ − Σ*⁻¹)(X − b*)`, mean zero under the truth.
    pub term_ii: Estimate,
    /// `−cᵀ(Σ̂⁻¹ − Σ*⁻¹)Δ`: the compound effect.
    pub term_iii: f64,
    /// `E[(ω − BLP*)(BLP̂ − BLP*)]`, zero in theory.
    pub h_term: Estimate,
}

impl Decomposition {
    pub fn total_mean(&self) -> f64 {
        self.term_i + self.term_iii
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorReport {
    pub blp_star: Blp,
    pub blp_hat: Blp,
    /// Mean of `BLP̂ − BLP*` under the true model (a constant in known-Σ* modes).
    pub distortion: Vec<f64>,
    pub eu_star: f64,
    pub eu_hat: f64,
    pub decomposition: Option<Decomposition>,
    pub eu_gap_mc: Option<Estimate>,
}

impl BehaviorReport {
    pub fn eu_gap(&self) -> f64 {
        self.eu_hat - self.eu_star
    }

    /// Rows `quantity,value,stderr`; analytic quantities have stderr 0.
    pub fn to_csv(&self, seed: Option<u64>) -> String {
        let mut csv = Csv::new(seed, &["quantity", "value", "stderr"]);
        let mut row = |name: &str, value: f64, se: f64| {
            csv.row(&[name.to_string(), fmt_g17(value), fmt_g17(se)]);
        };
        if self.distortion.len() == 1 {
            row("blp_distortion", self.distortion[0], 0.0);
        } else {
            for (k, d) in self.distortion.iter().enumerate() {
                row(&format!("blp_distortion_{}", k + 1), *d, 0.0);
            }
        }
        row("eu_star", self.eu_star, 0.0);
        row("eu_hat", self.eu_hat, 0.0);
        row("eu_gap", self.eu_gap(), 0.0);
        if let Some(mc) = self.eu_gap_mc {
            row("eu_gap_mc", mc.mean, mc.se);
        }
        if let Some(d) = &self.decomposition {
            row("term_I", d.term_i, 0.0);
            row("term_II_mean", d.term_ii.mean, d.term_ii.se);
            row("term_III", d.term_iii, 0.0);
            row("h_term", d.h_term.mean, d.h_term.se);
        }
        csv.finish()
    }
}

/// `EU* = −(1 + Σ νᵢ)⁻¹`, the expected quadratic loss of `BLP*` in the baseline covariance.
pub fn eu_star(s: &Scenario) -> f64 {
    -1.0 / (1.0 + s.precisions().iter().sum::<f64>())
}

/// Precision of the single-project predictor in the baseline model, `1 + Σ νᵢ`.
pub fn single_project_eta(s: &Scenario) -> f64 {
    1.0 + s.precisions().iter().sum::<f64>()
}

/// Predictors and expected utilities; `EÛ − EU*` is `−Δ̄²` in the baseline
/// model and `−δΔ̄²` when the covariance is learned too.
pub fn welfare_gap(s: &Scenario, sol: &KlSolution) -> Result<BehaviorReport> {
    let mode = s.mode();
    if !matches!(mode, Mode::Baseline | Mode::LearnCovariance) {
        return Err(Error::UnsupportedMode(mode.name()));
    }
    let sm = build_signal_model(s)?;
    let (blp_star, blp_hat) = predictors(s, &sm, sol)?;
    let bar = sol.delta.metric_scalar();
    let delta_factor = sol.delta_factor.unwrap_or(1.0);
    let star = eu_star(s);
    let distortion = match mode {
        Mode::LearnCovariance => {
            let d = sol.delta.full_vector();
            (-(&blp_hat.coeffs * d)).iter().copied().collect()
        }
        _ => sol.blp_distortion.clone(),
    };
    Ok(BehaviorReport {
        blp_star,
        blp_hat,
        distortion,
        eu_star: star,
        eu_hat: star - delta_factor * bar * bar,
        decomposition: None,
        eu_gap_mc: None,
    })
}

/// Antithetic Monte Carlo mean of `f(ω, X)` under the true model, using
/// `n_draws / 2` pairs `(ω, X)` and `(−ω, 2b* − X)`. Chunks run in parallel
/// and are merged in a fixed order, so the result depends only on `seed`.
pub fn antithetic_mean<F>(s: &Scenario, seed: u64, n_draws: usize, f: F) -> Result<Estimate>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64 + Sync,
{
    let sampler = SignalSampler::new(s)?;
    let b_star = DVector::from_column_slice(&s.true_bias);
    let pairs = (n_draws / 2).max(2);
    let chunks = pairs.div_ceil(MC_CHUNK);
    let partial: Vec<(f64, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * MC_CHUNK;
            let hi = (lo + MC_CHUNK).min(pairs);
            // Welford within the chunk.
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for p in lo..hi {
                let (omega, x) = sampler.draw(seed, p as u64 + 1);
                let x = DVector::from_vec(x);
                let x_anti = &b_star * 2.0 - &x;
                let value = 0.5 * (f(&omega, &x) + f(&(-&omega), &x_anti));
                n += 1.0;
                let d = value - mean;
                mean += d / n;
                m2 += d * (value - mean);
            }
            (n, mean, m2)
        })
        .collect();
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for (nb, mb, m2b) in partial {
        let total = n + nb;
        let d = mb - mean;
        mean += d * nb / total;
        m2 += m2b + d * d * n * nb / total;
        n = total;
    }
    let var = (m2 / (n - 1.0)).max(0.0);
    Ok(Estimate {
        mean,
        se: (var / n).sqrt(),
    })
}

/// Monte Carlo estimate of `E[−‖BLP̂ − ω‖²] − E[−‖BLP* − ω‖²]`.
pub fn monte_carlo_eu_gap(
    s: &Scenario,
    sol: &KlSolution,
    seed: u64,
    n_draws: usize,
) -> Result<Estimate> {
    let sm = build_signal_model(s)?;
    let (star, hat) = predictors(s, &sm, sol)?;
    antithetic_mean(s, seed, n_draws, |omega, x| {
        let e_hat = hat.predict(x) - omega;
        let e_star = star.predict(x) - omega;
        e_star.norm_squared() - e_hat.norm_squared()
    })
}

/// Splits `BLP̂ − BLP*` into bias learning (I), covariance learning (II), and
/// their interaction (III); (II) and the cross term `H` are estimated by
/// Monte Carlo and must be within `4·se` of zero.
pub fn decompose_distortion(
    s: &Scenario,
    sol: &KlSolution,
    seed: u64,
    n_draws: usize,
) -> Result<Decomposition> {
    if s.mode() != Mode::LearnCovariance {
        return Err(Error::UnsupportedMode(s.mode().name()));
    }
    let sm = build_signal_model(s)?;
    let sigma_hat = sol
        .sigma_hat
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("solution has no learned covariance".into()))?;
    let hat_inv = invert_spd(sigma_hat)?;
    let diff = hat_inv.matrix() - sm.sigma_star_inv.matrix();
    let c = &sm.state_loading;
    let d = sol.delta.full_vector();
    let term_i = -(c * sm.sigma_star_inv.matrix() * &d)[0];
    let term_iii = -(c * &diff * &d)[0];

    let b_star = DVector::from_column_slice(&s.true_bias);
    let row = c * &diff;
    let term_ii = antithetic_mean(s, seed, n_draws, |_, x| (&row * (x - &b_star))[0])?;

    let (star, hat) = predictors(s, &sm, sol)?;
    let h_term = antithetic_mean(s, seed.wrapping_add(1), n_draws, |omega, x| {
        let p_star = star.predict(x)[0];
        (omega[0] - p_star) * (hat.predict(x)[0] - p_star)
    })?;

    for (name, est) in [("term II", term_ii), ("H", h_term)] {
        if !est.agrees_with(0.0) {
            return Err(Error::Inconsistent {
                context: format!("{name} mean is not zero within 4 standard errors"),
                discrepancy: est.mean.abs(),
            });
        }
    }
    Ok(Decomposition {
        term_i,
        term_ii,
        term_iii,
        h_term,
    })
}

/// Projects with Gaussian returns and CARA preferences; the DM misreads
/// project 1's predictor by `metric`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioScenario {
    pub n_projects: usize,
    pub eta: Vec<f64>,
    pub risk_aversion: f64,
    pub wealth: f64,
    pub mu_star: Vec<f64>,
    pub metric: f64,
}

impl PortfolioScenario {
    pub fn validate(&self) -> Result<()> {
        let k = self.n_projects;
        if k == 0 {
            return Err(Error::InvalidPortfolio("need at least one project".into()));
        }
        if self.eta.len() != k || self.mu_star.len() != k {
            return Err(Error::InvalidPortfolio(format!(
                "eta and mu_star must have {k} entries"
            )));
        }
        if self.eta.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::InvalidPortfolio("eta must be positive".into()));
        }
        if !(self.risk_aversion.is_finite() && self.risk_aversion > 0.0) {
            return Err(Error::InvalidPortfolio("risk_aversion must be positive".into()));
        }
        if !(self.wealth.is_finite() && self.wealth > 0.0) {
            return Err(Error::InvalidPortfolio("wealth must be positive".into()));
        }
        if !self.metric.is_finite() || self.mu_star.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidPortfolio("returns must be finite".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ps: PortfolioScenario =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("portfolio: {e}")))?;
        ps.validate()?;
        Ok(ps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioReport {
    pub alpha_star: Vec<f64>,
    pub alpha_hat: Vec<f64>,
    pub delta_alpha: Vec<f64>,
    pub eu_gap: f64,
}

impl PortfolioReport {
    pub fn to_csv(&self, seed: Option<u64>) -> String {
        let mut csv = Csv::new(seed, &["quantity", "value", "stderr"]);
        let zero = fmt_g17(0.0);
        for (name, values) in [
            ("alpha_star", &self.alpha_star),
            ("alpha_hat", &self.alpha_hat),
            ("delta_alpha", &self.delta_alpha),
        ] {
            for (k, v) in values.iter().enumerate() {
                csv.row(&[format!("{name}_{}", k + 1), fmt_g17(*v), zero.clone()]);
            }
        }
        csv.row(&["eu_gap".into(), fmt_g17(self.eu_gap), zero]);
        csv.finish()
    }
}

/// Optimal holdings with the budget binding:
/// `αⱼ = (ηⱼ/λ)(μⱼ − (Σ μₖηₖ − λW)/Σ ηₖ)`.
pub fn optimal_holdings(eta: &[f64], mu: &[f64], risk_aversion: f64, wealth: f64) -> Vec<f64> {
    let total: f64 = eta.iter().sum();
    let weighted: f64 = eta.iter().zip(mu).map(|(e, m)| e * m).sum();
    let shadow = (weighted - risk_aversion * wealth) / total;
    eta.iter()
        .zip(mu)
        .map(|(e, m)| (e / risk_aversion) * (m - shadow))
        .collect()
}

pub fn portfolio(ps: &PortfolioScenario) -> Result<PortfolioReport> {
    ps.validate()?;
    let lambda = ps.risk_aversion;
    let bar = ps.metric;
    let alpha_star = optimal_holdings(&ps.eta, &ps.mu_star, lambda, ps.wealth);
    let mut mu_hat = ps.mu_star.clone();
    mu_hat[0] -= bar;
    let alpha_hat = optimal_holdings(&ps.eta, &mu_hat, lambda, ps.wealth);

    let total: f64 = ps.eta.iter().sum();
    let eta1 = ps.eta[0];
    let mut delta_alpha: Vec<f64> = ps
        .eta
        .iter()
        .map(|ej| eta1 * ej * bar / (lambda * total))
        .collect();
    delta_alpha[0] = -(eta1 / lambda) * (1.0 - eta1 / total) * bar;
    let eu_gap = -(bar * bar / (2.0 * lambda)) * eta1 * (1.0 - eta1 / total);
    Ok(PortfolioReport {
        alpha_star,
        alpha_hat,
        delta_alpha,
        eu_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::klsolver::solve;

    fn baseline_fixture() -> Scenario {
        Scenario::baseline(&[1.0, 1.0], &[0], &[1.0]).validate().unwrap()
    }

    fn learn_cov_fixture() -> Scenario {
        let mut s = Scenario::baseline(&[1.0, 1.0], &[0], &[1.0]);
        s.learn_covariance = true;
        s.validate().unwrap()
    }

    #[test]
    fn scalar_blp() {
        let c = DMatrix::from_element(1, 1, 1.0);
        let sigma = SymMatrix::from_diagonal(&[2.0]);
        let b = DVector::from_vec(vec![3.0]);
        let p = blp_with_covariance(&c, &sigma, &b).unwrap();
        assert!((p.coeffs[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((p.intercept[0] + 1.5).abs() < 1e-15);
        assert!(p.predict(&b)[0].abs() < 1e-15);
    }

    #[test]
    fn blp_gap_is_minus_metric() {
        let s = baseline_fixture();
        let sm = build_signal_model(&s).unwrap();
        let sol = solve(&s).unwrap();
        let (star, hat) = predictors(&s, &sm, &sol).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert!((hat.predict(&x)[0] - star.predict(&x)[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn baseline_welfare_fixture() {
        let s = baseline_fixture();
        let sol = solve(&s).unwrap();
        let r = welfare_gap(&s, &sol).unwrap();
        assert!((r.eu_star + 1.0 / 3.0).abs() < 1e-15);
        assert!((r.eu_gap() + 0.25).abs() < 1e-15);
        assert!((r.distortion[0] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_metric_has_no_gap() {
        let s = Scenario::baseline(&[1.0, 1.0, 1.0], &[0, 1], &[1.0, -1.0]).validate().unwrap();
        let sol = solve(&s).unwrap();
        assert_eq!(welfare_gap(&s, &sol).unwrap().eu_gap(), 0.0);
    }

    #[test]
    fn learn_cov_welfare_fixture() {
        let s = learn_cov_fixture();
        let sol = solve(&s).unwrap();
        let r = welfare_gap(&s, &sol).unwrap();
        assert!((r.eu_gap() + 1.0 / 6.0).abs() < 1e-15);
        assert!((r.distortion[0] + 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn welfare_rejects_other_modes() {
        let mut s = Scenario::baseline(&[1.0, 1.0, 1.0], &[0], &[1.0]);
        s.latent_factor = true;
        let s = s.validate().unwrap();
        let sol = solve(&s).unwrap();
        assert!(matches!(welfare_gap(&s, &sol), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn monte_carlo_eu_gap_matches() {
        let s = baseline_fixture();
        let sol = solve(&s).unwrap();
        let mc = monte_carlo_eu_gap(&s, &sol, 1, 20_000).unwrap();
        assert!(mc.agrees_with(-0.25), "{mc:?}");

        let s = learn_cov_fixture();
        let sol = solve(&s).unwrap();
        let mc = monte_carlo_eu_gap(&s, &sol, 1, 200_000).unwrap();
        assert!(mc.se > 0.0);
        assert!(mc.agrees_with(-1.0 / 6.0), "{mc:?}");
    }

    #[test]
    fn decomposition_fixture() {
        let s = learn_cov_fixture();
        let sol = solve(&s).unwrap();
        let d = decompose_distortion(&s, &sol, 3, 100_000).unwrap();
        assert!((d.term_i + 0.5).abs() < 1e-14);
        assert!((d.term_iii - 1.0 / 6.0).abs() < 1e-14);
        assert!((d.total_mean() + 1.0 / 3.0).abs() < 1e-14);
        let delta = sol.delta_factor.unwrap();
        assert!((d.term_iii + (1.0 - delta) * d.term_i).abs() < 1e-10);
    }

    #[test]
    fn decomposition_without_misspecification() {
        let mut s = Scenario::baseline(&[1.0, 1.0], &[0], &[0.0]);
        s.learn_covariance = true;
        let s = s.validate().unwrap();
        let sol = solve(&s).unwrap();
        let d = decompose_distortion(&s, &sol, 3, 1000).unwrap();
        assert_eq!((d.term_i, d.term_iii), (0.0, 0.0));
        assert_eq!(d.term_ii.mean, 0.0);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let s = learn_cov_fixture();
        let sol = solve(&s).unwrap();
        let a = monte_carlo_eu_gap(&s, &sol, 8, 50_000).unwrap();
        let b = monte_carlo_eu_gap(&s, &sol, 8, 50_000).unwrap();
        assert_eq!(a, b);
    }

    fn two_projects(metric: f64) -> PortfolioScenario {
        PortfolioScenario {
            n_projects: 2,
            eta: vec![1.0, 1.0],
            risk_aversion: 1.0,
            wealth: 1.0,
            mu_star: vec![0.1, 0.2],
            metric,
        }
    }

    #[test]
    fn portfolio_fixture() {
        let r = portfolio(&two_projects(0.5)).unwrap();
        assert_eq!(r.delta_alpha, vec![-0.25, 0.25]);
        assert_eq!(r.eu_gap, -1.0 / 16.0);
        for k in 0..2 {
            assert!((r.alpha_hat[k] - r.alpha_star[k] - r.delta_alpha[k]).abs() < 1e-15);
        }
        let r0 = portfolio(&two_projects(0.0)).unwrap();
        assert_eq!(r0.alpha_hat, r0.alpha_star);
        assert_eq!(r0.eu_gap, 0.0);
    }

    #[test]
    fn portfolio_rejects_bad_inputs() {
        let mut ps = two_projects(0.5);
        ps.eta[1] = 0.0;
        assert!(matches!(portfolio(&ps), Err(Error::InvalidPortfolio(_))));
        let mut ps = two_projects(0.5);
        ps.risk_aversion = -1.0;
        assert!(matches!(portfolio(&ps), Err(Error::InvalidPortfolio(_))));
    }

    #[test]
    fn csv_quantities_are_named() {
        let s = learn_cov_fixture();
        let sol = solve(&s).unwrap();
        let mut r = welfare_gap(&s, &sol).unwrap();
        r.decomposition = Some(decompose_distortion(&s, &sol, 1, 1000).unwrap());
        let csv = r.to_csv(Some(1));
        for name in ["blp_distortion", "eu_star", "eu_hat", "eu_gap", "term_I", "term_II_mean", "term_III"] {
            assert!(csv.lines().any(|l| l.starts_with(&format!("{name},"))), "{name}");
        }
    }
}
