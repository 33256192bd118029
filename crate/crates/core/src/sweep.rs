//! Comparative statics over parameter grids, and numerical checks of the
//! structural properties of the limiting belief: dependence only on the
//! familiar sources (DOOM), its weak form under a common shock (WDOOM), and
//! the effect of scaling every familiar source's precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::behavior::{portfolio, welfare_gap, PortfolioScenario};
use crate::error::{Error, Result};
use crate::klsolver::{solve, KlSolution};
use crate::linalg::SymMatrix;
use crate::report::{fmt_g17, Csv};
use crate::scenario::{random_spd, Mode, Scenario, ScenarioFile};

/// Two solutions count as unchanged when they differ by less than this.
pub const INVARIANCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameter {
    /// Precision `1/vᵢ` of source `i`.
    NuI,
    /// Misspecification `b̃ᵢ − b*ᵢ` of familiar source `i`.
    DeltaI,
    /// State loading of source `i`.
    AlphaI,
    /// Shock loading of source `i`.
    BetaI,
    /// Error correlation of source `i` in a two-dimensional state.
    Rho,
    /// Predictor precision of project `k`.
    EtaK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Metric,
    DeltaHat,
    BlpDistortion,
    EuGap,
    DeltaFactor,
    DeltaAlpha,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: Scenario,
    pub parameter: Parameter,
    /// 0-based source (or project) index.
    pub index: usize,
    /// 0-based state component for `DeltaI` in multidimensional scenarios.
    pub component: usize,
    pub grid: Vec<f64>,
    pub outputs: Vec<Output>,
    pub portfolio: Option<PortfolioScenario>,
}

/// On-disk sweep specification; `index` and `component` are 1-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpecFile {
    pub base: ScenarioFile,
    pub parameter: Parameter,
    pub index: usize,
    #[serde(default)]
    pub component: Option<usize>,
    pub grid: Vec<f64>,
    pub outputs: Vec<Output>,
    #[serde(default)]
    pub portfolio: Option<PortfolioScenario>,
}

impl SweepSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let f: SweepSpecFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("sweep spec: {e}")))?;
        if f.index == 0 || f.component == Some(0) {
            return Err(Error::InvalidArgument("sweep indices are 1-based".into()));
        }
        let spec = SweepSpec {
            base: f.base.into_scenario()?.validate()?,
            parameter: f.parameter,
            index: f.index - 1,
            component: f.component.unwrap_or(1) - 1,
            grid: f.grid,
            outputs: f.outputs,
            portfolio: f.portfolio,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the grid and builds every grid point's scenario up front.
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.outputs.is_empty() {
            return Err(Error::InvalidArgument("sweep needs a grid and at least one output".into()));
        }
        if self.grid.iter().any(|x| !x.is_finite()) || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("grid must be finite and strictly increasing".into()));
        }
        if self.parameter == Parameter::EtaK && self.portfolio.is_none() {
            return Err(Error::InvalidArgument("eta_k sweeps need a portfolio".into()));
        }
        if let Some(p) = &self.portfolio {
            p.validate()?;
        }
        for &x in &self.grid {
            self.point(x)?;
        }
        Ok(())
    }

    /// Scenario and portfolio at parameter value `x`.
    pub fn point(&self, x: f64) -> Result<(Scenario, Option<PortfolioScenario>)> {
        let mut s = self.base.clone();
        let mut p = self.portfolio.clone();
        let i = self.index;
        let n = s.n_sources;
        let source_check = |what: &str| {
            if i >= n {
                Err(Error::InvalidArgument(format!("{what}: source {} out of range", i + 1)))
            } else {
                Ok(())
            }
        };
        match self.parameter {
            Parameter::NuI => {
                source_check("nu_i")?;
                if s.error_covs.is_some() {
                    return Err(Error::InvalidArgument(
                        "nu_i sweeps need error covariances given by noise_variance".into(),
                    ));
                }
                s.noise_variance[i] = 1.0 / x;
            }
            Parameter::DeltaI => {
                let pos = s.misspecified.iter().position(|&m| m == i).ok_or_else(|| {
                    Error::InvalidArgument(format!("delta_i: source {} is not familiar", i + 1))
                })?;
                let k = s.state_dim;
                if self.component >= k {
                    return Err(Error::InvalidArgument("delta_i: component out of range".into()));
                }
                s.perceived_bias[pos * k + self.component] = s.true_bias[i * k + self.component] + x;
            }
            Parameter::AlphaI => {
                source_check("alpha_i")?;
                let a = s.loadings.as_mut().ok_or(Error::UnsupportedMode("non-loadings"))?;
                a[i] = x;
            }
            Parameter::BetaI => {
                source_check("beta_i")?;
                let b = s.shock_loadings.as_mut().ok_or(Error::UnsupportedMode("non-shock"))?;
                b[i] = x;
            }
            Parameter::Rho => {
                source_check("rho")?;
                if s.state_dim != 2 {
                    return Err(Error::InvalidArgument("rho sweeps need state_dim = 2".into()));
                }
                let mut covs: Vec<SymMatrix> =
                    (0..n).map(|j| s.error_covariance(j)).collect();
                let (a, b) = (covs[i][(0, 0)], covs[i][(1, 1)]);
                let off = x * (a * b).sqrt();
                covs[i] = SymMatrix::from_rows(&[&[a, off], &[off, b]])?;
                s.error_covs = Some(covs);
            }
            Parameter::EtaK => {
                let ps = p.as_mut().expect("validated");
                if i >= ps.n_projects {
                    return Err(Error::InvalidArgument("eta_k: project out of range".into()));
                }
                ps.eta[i] = x;
                ps.validate()?;
            }
        }
        Ok((s.validate()?, p))
    }

    fn columns(&self) -> Vec<String> {
        let s = &self.base;
        let k = s.state_dim;
        let mut cols = Vec::new();
        let per_dim = |name: &str, cols: &mut Vec<String>| {
            if k == 1 {
                cols.push(name.to_string());
            } else {
                cols.extend((1..=k).map(|d| format!("{name}_{d}")));
            }
        };
        for o in &self.outputs {
            match o {
                Output::Metric => per_dim("metric", &mut cols),
                Output::BlpDistortion => per_dim("blp_distortion", &mut cols),
                Output::DeltaHat => {
                    cols.extend(s.free_coords().iter().map(|c| format!("delta_hat_{}", c + 1)));
                    if s.mode() == Mode::Latent {
                        cols.push(format!("delta_hat_{}", s.n_sources + 1));
                    }
                }
                Output::EuGap => cols.push("eu_gap".into()),
                Output::DeltaFactor => cols.push("delta_factor".into()),
                Output::DeltaAlpha => {
                    let kp = self.portfolio.as_ref().map_or(0, |p| p.n_projects);
                    cols.extend((1..=kp).map(|j| format!("delta_alpha_{j}")));
                }
            }
        }
        cols
    }

    fn evaluate(&self, x: f64) -> Result<Vec<f64>> {
        let (s, p) = self.point(x)?;
        let sol = solve(&s)?;
        let mut out = Vec::new();
        for o in &self.outputs {
            match o {
                Output::Metric => out.extend(&sol.delta.metric),
                Output::DeltaHat => {
                    out.extend(&sol.delta.learned_part);
                    out.extend(sol.delta.latent_component);
                }
                Output::BlpDistortion => out.extend(distortion(&s, &sol)?),
                Output::EuGap => match &p {
                    Some(ps) => out.push(portfolio(ps)?.eu_gap),
                    None => out.push(welfare_gap(&s, &sol)?.eu_gap()),
                },
                Output::DeltaFactor => out.push(
                    sol.delta_factor
                        .ok_or(Error::UnsupportedMode("delta_factor outside learn_covariance"))?,
                ),
                Output::DeltaAlpha => {
                    let ps = p
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument("delta_alpha needs a portfolio".into()))?;
                    out.extend(portfolio(ps)?.delta_alpha);
                }
            }
        }
        Ok(out)
    }
}

fn distortion(s: &Scenario, sol: &KlSolution) -> Result<Vec<f64>> {
    if s.mode() == Mode::LearnCovariance {
        Ok(welfare_gap(s, sol)?.distortion)
    } else {
        Ok(sol.blp_distortion.clone())
    }
}

/// Central-difference step `1e-6 · max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SweepTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[c]).collect())
    }

    pub fn to_csv(&self, seed: Option<u64>) -> String {
        let header: Vec<&str> = self.header.iter().map(String::as_str).collect();
        let mut csv = Csv::new(seed, &header);
        for r in &self.rows {
            csv.row(&r.iter().map(|v| fmt_g17(*v)).collect::<Vec<_>>());
        }
        csv.finish()
    }
}

/// One row per grid point: the parameter, each output, then each output's
/// central-difference derivative `d_<output>/d_param`.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable> {
    spec.validate()?;
    let cols = spec.columns();
    let mut header = vec!["param_value".to_string()];
    header.extend(cols.iter().cloned());
    header.extend(cols.iter().map(|c| format!("d_{c}/d_param")));

    let rows = spec
        .grid
        .par_iter()
        .map(|&x| -> Result<Vec<f64>> {
            let h = fd_step(x);
            let mid = spec.evaluate(x)?;
            let hi = spec.evaluate(x + h)?;
            let lo = spec.evaluate(x - h)?;
            if mid.len() != cols.len() {
                return Err(Error::Dimension("sweep output width changed".into()));
            }
            let mut row = vec![x];
            row.extend(&mid);
            row.extend(hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * h)));
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { header, rows })
}

/// Which sources a structural check perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbTarget {
    /// Unfamiliar sources, plus appended correctly specified sources.
    Unfamiliar,
    /// Familiar sources' precisions and perceived biases (negative control).
    Familiar,
}

fn invariants(sol: &KlSolution) -> Vec<f64> {
    let mut v = sol.delta.metric.clone();
    v.extend(sol.delta_factor);
    v
}

fn differs(a: &[f64], b: &[f64]) -> bool {
    a.len() != b.len() || a.iter().zip(b).any(|(x, y)| (x - y).abs() >= INVARIANCE_TOL)
}

fn check_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_variance<R: Rng>(rng: &mut R) -> f64 {
    1.0 / rng.random_range(0.2..5.0)
}

/// Materializes per-source error covariances so they can be edited one by one.
fn explicit_error_covs(s: &mut Scenario) -> &mut Vec<SymMatrix> {
    if s.error_covs.is_none() {
        s.error_covs = Some((0..s.n_sources).map(|j| s.error_covariance(j)).collect());
    }
    s.error_covs.as_mut().unwrap()
}

/// Appends a correctly specified (hence learned) source.
fn append_source<R: Rng>(s: &mut Scenario, rng: &mut R) {
    let k = s.state_dim;
    s.n_sources += 1;
    s.noise_variance.push(random_variance(rng));
    s.true_bias.extend((0..k).map(|_| rng.random_range(-1.0..1.0)));
    if let Some(a) = s.loadings.as_mut() {
        a.push(rng.random_range(0.5..2.0));
    }
    if let Some(b) = s.shock_loadings.as_mut() {
        b.push(rng.random_range(-1.5..1.5));
    }
    if let Some(c) = s.error_covs.as_mut() {
        c.push(random_spd(k, 0.2, rng));
    }
}

fn perturbed<R: Rng>(base: &Scenario, target: PerturbTarget, rng: &mut R) -> Result<Scenario> {
    let mut s = base.clone();
    let k = s.state_dim;
    let multidim = s.mode() == Mode::Multidim;
    match target {
        PerturbTarget::Unfamiliar => {
            for j in s.unfamiliar() {
                if multidim {
                    let c = random_spd(k, 0.2, rng);
                    explicit_error_covs(&mut s)[j] = c;
                } else {
                    s.noise_variance[j] = random_variance(rng);
                }
                for d in 0..k {
                    s.true_bias[j * k + d] = rng.random_range(-1.0..1.0);
                }
            }
            for _ in 0..rng.random_range(0..=2usize) {
                append_source(&mut s, rng);
            }
        }
        PerturbTarget::Familiar => {
            let familiar = s.misspecified.clone();
            for (pos, &i) in familiar.iter().enumerate() {
                if multidim {
                    let c = random_spd(k, 0.2, rng);
                    explicit_error_covs(&mut s)[i] = c;
                } else {
                    s.noise_variance[i] = random_variance(rng);
                }
                for d in 0..k {
                    s.perceived_bias[pos * k + d] += rng.random_range(0.5..1.5);
                }
            }
        }
    }
    Ok(s.validate()?)
}

/// True iff `Δ̄` (and `δ` where defined) stay within [`INVARIANCE_TOL`] under
/// every perturbation of the chosen sources.
pub fn check_doom_with(
    s: &Scenario,
    target: PerturbTarget,
    perturbations: usize,
    seed: u64,
) -> Result<bool> {
    let mode = s.mode();
    if !matches!(
        mode,
        Mode::Baseline | Mode::Latent | Mode::Multidim | Mode::LearnCovariance
    ) {
        return Err(Error::UnsupportedMode(mode.name()));
    }
    let reference = invariants(&solve(s)?);
    for p in 0..perturbations {
        let mut rng = check_rng(seed, p as u64);
        let t = perturbed(s, target, &mut rng)?;
        if differs(&reference, &invariants(&solve(&t)?)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `Δ̄` depends only on the familiar sources.
pub fn check_doom(s: &Scenario, perturbations: usize, seed: u64) -> Result<bool> {
    check_doom_with(s, PerturbTarget::Unfamiliar, perturbations, seed)
}

/// Same comparison with the familiar sources perturbed; expected to be false.
pub fn doom_negative_control(s: &Scenario, perturbations: usize, seed: u64) -> Result<bool> {
    check_doom_with(s, PerturbTarget::Familiar, perturbations, seed)
}

/// True iff each unfamiliar `Δⱼ` is unchanged when the shock loadings of the
/// other unfamiliar sources, and the precisions of all unfamiliar sources, move.
pub fn check_wdoom_shock(s: &Scenario, perturbations: usize, seed: u64) -> Result<bool> {
    wdoom_with(s, PerturbTarget::Unfamiliar, perturbations, seed)
}

/// Perturbs familiar shock loadings instead; expected to be false.
pub fn wdoom_negative_control(s: &Scenario, perturbations: usize, seed: u64) -> Result<bool> {
    wdoom_with(s, PerturbTarget::Familiar, perturbations, seed)
}

fn wdoom_with(s: &Scenario, target: PerturbTarget, perturbations: usize, seed: u64) -> Result<bool> {
    if s.mode() != Mode::Shock {
        return Err(Error::UnsupportedMode(s.mode().name()));
    }
    let reference = solve(s)?;
    let unfamiliar = s.unfamiliar();
    for (pos, &j) in unfamiliar.iter().enumerate() {
        for p in 0..perturbations {
            let mut rng = check_rng(seed, (pos * perturbations + p) as u64);
            let mut t = s.clone();
            match target {
                PerturbTarget::Unfamiliar => {
                    for &l in &unfamiliar {
                        t.noise_variance[l] = random_variance(&mut rng);
                        if l != j {
                            t.shock_loadings.as_mut().unwrap()[l] = rng.random_range(-2.0..2.0);
                        }
                    }
                    append_source(&mut t, &mut rng);
                }
                PerturbTarget::Familiar => {
                    for &i in &s.misspecified {
                        t.shock_loadings.as_mut().unwrap()[i] += rng.random_range(0.5..1.5);
                    }
                }
            }
            let t = t.validate()?;
            let sol = solve(&t)?;
            if (sol.delta.learned_part[pos] - reference.delta.learned_part[pos]).abs()
                >= INVARIANCE_TOL
            {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Scaling every familiar precision by `alpha > 1` strictly increases `|Δ̄|`.
pub fn check_scaling(s: &Scenario, alpha: f64) -> Result<bool> {
    if s.mode() != Mode::Baseline {
        return Err(Error::UnsupportedMode(s.mode().name()));
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("scaling factor must exceed 1, got {alpha}")));
    }
    let before = solve(s)?.delta.metric_scalar();
    if before == 0.0 {
        return Err(Error::DegenerateMetric);
    }
    let mut t = s.clone();
    for &i in &s.misspecified {
        t.noise_variance[i] /= alpha;
    }
    let after = solve(&t.validate()?)?.delta.metric_scalar();
    Ok(after.abs() > before.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::random_scenario;

    fn spec(base: Scenario, parameter: Parameter, index: usize, grid: Vec<f64>) -> SweepSpec {
        SweepSpec {
            base,
            parameter,
            index,
            component: 0,
            grid,
            outputs: vec![Output::Metric],
            portfolio: None,
        }
    }

    #[test]
    fn delta_sweep_has_constant_slope() {
        let base = Scenario::baseline(&[1.0, 1.0, 1.0], &[0], &[1.0]).validate().unwrap();
        let t = run_sweep(&spec(base, Parameter::DeltaI, 0, vec![-2.0, -0.5, 0.0, 1.0, 3.0])).unwrap();
        assert_eq!(t.header, vec!["param_value", "metric", "d_metric/d_param"]);
        for d in t.column("d_metric/d_param").unwrap() {
            assert!((d - 0.5).abs() < 1e-6 * 0.5, "{d}");
        }
    }

    #[test]
    fn nu_sweep_single_source_is_increasing() {
        let base = Scenario::baseline(&[1.0, 1.0, 1.0], &[0], &[1.0]).validate().unwrap();
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.25).collect();
        let t = run_sweep(&spec(base, Parameter::NuI, 0, grid)).unwrap();
        let m = t.column("metric").unwrap();
        assert!(m.windows(2).all(|w| w[1].abs() > w[0].abs()));
    }

    #[test]
    fn nu_sweep_two_sources_changes_sign() {
        let base = Scenario::baseline(&[1.0, 1.0, 1.0], &[0, 1], &[1.0, -1.0]).validate().unwrap();
        let grid = vec![0.25, 0.5, 1.0, 2.0, 4.0];
        let t = run_sweep(&spec(base, Parameter::NuI, 0, grid.clone())).unwrap();
        let m = t.column("metric").unwrap();
        for (x, v) in grid.iter().zip(&m) {
            assert!((v - (x - 1.0) / (2.0 + x)).abs() < 1e-15);
        }
        assert!(m[0] < 0.0 && m[4] > 0.0 && m[2] == 0.0);
    }

    #[test]
    fn sweep_rejects_bad_grid() {
        let base = Scenario::baseline(&[1.0, 1.0], &[0], &[1.0]).validate().unwrap();
        assert!(run_sweep(&spec(base.clone(), Parameter::DeltaI, 0, vec![1.0, 1.0])).is_err());
        // ν = 0 is not a valid precision; caught before any evaluation.
        assert!(run_sweep(&spec(base.clone(), Parameter::NuI, 0, vec![-1.0, 1.0])).is_err());
        assert!(run_sweep(&spec(base, Parameter::DeltaI, 1, vec![0.0, 1.0])).is_err());
    }

    #[test]
    fn sweep_json_and_csv() {
        let text = r#"{
            "base": {"n_sources": 2, "misspecified": [1], "true_bias": [0, 0],
                     "perceived_bias": {"1": 1.0}, "noise_variance": [1, 1]},
            "parameter": "delta_i", "index": 1, "grid": [0.0, 1.0],
            "outputs": ["metric", "delta_hat", "eu_gap"]
        }"#;
        let s = SweepSpec::from_json_str(text).unwrap();
        let t = run_sweep(&s).unwrap();
        let csv = t.to_csv(None);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "param_value,metric,delta_hat_2,eu_gap,d_metric/d_param,d_delta_hat_2/d_param,d_eu_gap/d_param"
        );
        let row: Vec<f64> = lines.nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        for (got, want) in row.iter().zip([1.0, 0.5, 0.5, -0.25, 0.5, 0.5, -0.5]) {
            assert!((got - want).abs() < 1e-8, "{row:?}");
        }
    }

    #[test]
    fn rho_sweep_matches_halo_derivative() {
        let mut s = Scenario::baseline(&[1.0, 1.0], &[0], &[1.0, -1.0]);
        s.state_dim = 2;
        s.true_bias = vec![0.0; 4];
        s.state_cov = Some(SymMatrix::identity(2));
        let s = s.validate().unwrap();
        let t = run_sweep(&spec(s, Parameter::Rho, 0, vec![0.0, 0.25, 0.5, 0.75])).unwrap();
        let (v, da, db) = (1.0f64, 1.0, -1.0);
        for row in &t.rows {
            let rho = row[0];
            let den = (1.0 + (1.0 - rho) * v).powi(2) * (1.0 + v + rho * v).powi(2);
            let num = 2.0 * rho * v * v * (1.0 + v) * da
                - v * (1.0 + v * (2.0 + v + rho * rho * v)) * db;
            assert!((row[3] - num / den).abs() < 1e-6, "rho {rho}: {} vs {}", row[3], num / den);
        }
    }

    #[test]
    fn eta_sweep_uses_portfolio() {
        let base = Scenario::baseline(&[1.0, 1.0], &[0], &[1.0]).validate().unwrap();
        let mut sp = spec(base, Parameter::EtaK, 1, vec![0.5, 1.0, 2.0]);
        sp.outputs = vec![Output::EuGap, Output::DeltaAlpha];
        sp.portfolio = Some(PortfolioScenario {
            n_projects: 2,
            eta: vec![1.0, 1.0],
            risk_aversion: 1.0,
            wealth: 1.0,
            mu_star: vec![0.0, 0.0],
            metric: 0.5,
        });
        let t = run_sweep(&sp).unwrap();
        assert_eq!(t.rows[1][1], -1.0 / 16.0);
        assert_eq!(t.header[2], "delta_alpha_1");
    }

    #[test]
    fn doom_holds_and_control_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in [Mode::Baseline, Mode::Latent, Mode::Multidim, Mode::LearnCovariance] {
            for r in 0..10 {
                let s = random_scenario(mode, &mut rng);
                assert!(check_doom(&s, 20, r).unwrap(), "{mode}");
                assert!(!doom_negative_control(&s, 5, r).unwrap(), "{mode}");
            }
        }
    }

    #[test]
    fn doom_fixture_fifty_perturbations() {
        let s = Scenario::baseline(&[1.0, 1.0, 1.0], &[0], &[1.0]).validate().unwrap();
        assert!(check_doom(&s, 50, 0).unwrap());
        let mut s = Scenario::baseline(&[1.0, 2.0, 0.5], &[0, 1], &[1.0, 0.3]);
        s.latent_factor = true;
        assert!(check_doom(&s.validate().unwrap(), 50, 0).unwrap());
    }

    #[test]
    fn doom_rejects_ineligible_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_scenario(Mode::Shock, &mut rng);
        assert!(matches!(check_doom(&s, 1, 0), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn wdoom_common_shock_fixture() {
        let mut s = Scenario::baseline(&[1.0; 5], &[0, 1, 2], &[1.0, 0.0, 0.0]);
        s.shock_loadings = Some(vec![1.0, 0.0, 0.0, 1.0, 0.0]);
        let s = s.validate().unwrap();
        assert!(check_wdoom_shock(&s, 30, 0).unwrap());
        assert!(!wdoom_negative_control(&s, 5, 0).unwrap());

        // β₅ moves Δ₅ but not Δ₄.
        let base = solve(&s).unwrap();
        let mut t = s.clone();
        t.shock_loadings.as_mut().unwrap()[4] = 0.7;
        let moved = solve(&t).unwrap();
        assert_eq!(moved.delta.learned_part[0], base.delta.learned_part[0]);
        assert_ne!(moved.delta.learned_part[1], base.delta.learned_part[1]);
    }

    #[test]
    fn scaling_fixture_and_errors() {
        let s = Scenario::baseline(&[1.0, 1.0, 1.0], &[0, 1], &[1.0, 1.0]).validate().unwrap();
        assert!(check_scaling(&s, 2.0).unwrap());
        let mut t = s.clone();
        t.noise_variance[0] = 0.5;
        t.noise_variance[1] = 0.5;
        assert!((solve(&t).unwrap().delta.metric_scalar() - 0.8).abs() < 1e-15);
        assert!(matches!(check_scaling(&s, 1.0), Err(Error::InvalidArgument(_))));
        let z = Scenario::baseline(&[1.0, 1.0, 1.0], &[0, 1], &[1.0, -1.0]).validate().unwrap();
        assert!(matches!(check_scaling(&z, 2.0), Err(Error::DegenerateMetric)));
    }
}
