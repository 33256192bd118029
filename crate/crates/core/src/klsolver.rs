//! Limiting beliefs: the KL-minimizing bias misperception for each model
//! variant, a generic first-order-condition solver, and a brute-force oracle.
//!
//! With the familiar coordinates pinned at `Δ̃`, the DM's long-run belief
//! minimizes `½ Δᵀ Σ*⁻¹ Δ` over the remaining coordinates. Writing Σ* in
//! blocks `[[A, B], [C, D]]` (familiar first), the minimizer on the
//! unfamiliar coordinates is `Δ̂ = C A⁻¹ Δ̃`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, log_det_spd, solve_spd, submatrix, subvector, SymMatrix};
use crate::scenario::{build_signal_model, Delta, Mode, Scenario, SignalModel};

/// Largest `N·K` accepted by the grid oracle.
pub const GRID_BUDGET: usize = 12;
/// Closed forms are cross-checked against the FOC solver up to this size.
pub const CROSS_CHECK_LIMIT: usize = 50;
pub const CROSS_CHECK_TOL: f64 = 1e-8;
const DELTA_FACTOR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    ClosedForm,
    FocLinearSystem,
    BruteForce,
}

#[derive(Debug, Clone, Serialize)]
pub struct KlSolution {
    pub delta: Delta,
    /// `Σ̂ = Σ* + Δ Δᵀ` when the covariance is learned too.
    #[serde(skip)]
    pub sigma_hat: Option<SymMatrix>,
    /// `δ = 1 / (1 + Δᵀ Σ*⁻¹ Δ)` when the covariance is learned too.
    pub delta_factor: Option<f64>,
    /// Set when `Δ̃ = 0`, so there is no misspecification to propagate.
    pub degenerate: bool,
    pub kl_at_solution: f64,
    pub solver_path: SolverPath,
    /// Shift of the perceived best linear predictor of `ω`, one value per state dimension.
    pub blp_distortion: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneralSolution {
    pub delta: Delta,
    pub blp_distortion: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleMethod {
    /// Exhaustive grid with successive refinement.
    Grid,
    /// Conjugate gradient, optionally from a given start on the free coordinates.
    Descent { start: Option<Vec<f64>> },
}

/// `½(tr(Σ⁻¹Σ*) − N + (b−b*)ᵀΣ⁻¹(b−b*) + log det Σ − log det Σ*)`.
pub fn kl_divergence(
    b: &DVector<f64>,
    sigma: &SymMatrix,
    b_star: &DVector<f64>,
    sigma_star: &SymMatrix,
) -> Result<f64> {
    let n = sigma.dim();
    if sigma_star.dim() != n || b.len() != n || b_star.len() != n {
        return Err(Error::Dimension(format!(
            "kl_divergence: dims {} / {} / {} / {}",
            b.len(),
            n,
            b_star.len(),
            sigma_star.dim()
        )));
    }
    let chol = sigma
        .matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("perceived covariance".into()))?;
    let trace = chol.solve(sigma_star.matrix()).trace();
    let d = b - b_star;
    let quad = d.dot(&chol.solve(&d));
    let value = 0.5 * (trace - n as f64 + quad + log_det_spd(sigma)? - log_det_spd(sigma_star)?);
    Ok(value.max(0.0))
}

/// Signal-mean shift `Γ z` implied by a decision vector of the objective.
fn mean_shift(delta: &Delta) -> DVector<f64> {
    let mut shift = delta.full_vector();
    if let Some(l) = delta.latent_component {
        shift.add_scalar_mut(l);
    }
    shift
}

/// `Δ̄`-style summary of a solution: `Cov(ω, X) Σ*⁻¹ Δ`, or `−Δ_{N+1}` in latent mode.
pub fn metric_of(sm: &SignalModel, delta: &Delta) -> Vec<f64> {
    if let Some(l) = delta.latent_component {
        return vec![-l];
    }
    let w = sm.sigma_star_inv.matrix() * delta.full_vector();
    (&sm.state_loading * w).iter().copied().collect()
}

/// `−Cov(ω, X) Σ*⁻¹ Γ z`: how far the perceived predictor of `ω` moves.
pub fn blp_distortion_of(sm: &SignalModel, delta: &Delta) -> Vec<f64> {
    let w = sm.sigma_star_inv.matrix() * mean_shift(delta);
    (-(&sm.state_loading * w)).iter().copied().collect()
}

fn delta_from_free(sm: &SignalModel, delta_tilde: &[f64], y: &DVector<f64>) -> Delta {
    let nfree = sm.free.len();
    let learned: Vec<f64> = y.iter().take(nfree).copied().collect();
    let latent = sm.latent.then(|| y[nfree]);
    let mut d = Delta::new(
        &sm.familiar,
        &sm.free,
        delta_tilde.to_vec(),
        learned,
        Vec::new(),
        latent,
    );
    d.metric = metric_of(sm, &d);
    d
}

fn check_tilde(sm: &SignalModel, delta_tilde: &[f64]) -> Result<()> {
    if delta_tilde.len() != sm.familiar.len() {
        return Err(Error::Dimension(format!(
            "delta_tilde has {} values, expected {}",
            delta_tilde.len(),
            sm.familiar.len()
        )));
    }
    Ok(())
}

/// `Δ̂ = C A⁻¹ Δ̃` by a linear solve of `A y = Δ̃`, plus the predictor shift
/// `−Cov(ω, X_M) A⁻¹ Δ̃`. In latent mode this defers to [`solve_foc`].
pub fn solve_general(sm: &SignalModel, delta_tilde: &[f64]) -> Result<GeneralSolution> {
    check_tilde(sm, delta_tilde)?;
    if sm.latent {
        let delta = solve_foc(sm, delta_tilde)?;
        let blp_distortion = blp_distortion_of(sm, &delta);
        return Ok(GeneralSolution {
            delta,
            blp_distortion,
        });
    }
    let dt = DVector::from_column_slice(delta_tilde);
    let y = solve_spd(&sm.block_a, &dt)
        .map_err(|_| Error::SingularBlock("familiar block A".into()))?;
    let learned = &sm.block_c * &y;
    let c_m = submatrix(&sm.state_loading, &(0..sm.state_dim).collect::<Vec<_>>(), &sm.familiar);
    let metric: Vec<f64> = (&c_m * &y).iter().copied().collect();
    let blp_distortion = metric.iter().map(|m| -m).collect();
    let delta = Delta::new(
        &sm.familiar,
        &sm.free,
        delta_tilde.to_vec(),
        learned.iter().copied().collect(),
        metric,
        None,
    );
    Ok(GeneralSolution {
        delta,
        blp_distortion,
    })
}

/// Solves the first-order conditions `E y = −F Δ̃` of the objective, where
/// `E` is its free block and `F` its free × fixed block.
pub fn solve_foc(sm: &SignalModel, delta_tilde: &[f64]) -> Result<Delta> {
    check_tilde(sm, delta_tilde)?;
    let (e, g) = foc_system(sm, delta_tilde);
    let y = solve_spd(&e, &(-g)).map_err(|_| Error::SingularBlock("FOC block E".into()))?;
    Ok(delta_from_free(sm, delta_tilde, &y))
}

/// `(E, F Δ̃)` so the objective on free coordinates is `½ yᵀE y + (FΔ̃)ᵀ y + const`.
fn foc_system(sm: &SignalModel, delta_tilde: &[f64]) -> (SymMatrix, DVector<f64>) {
    let e = sm.objective.principal(&sm.objective_free);
    let f = submatrix(sm.objective.matrix(), &sm.objective_free, &sm.objective_fixed);
    let g = f * DVector::from_column_slice(delta_tilde);
    (e, g)
}

/// Gradient of the objective on its free coordinates at `delta`.
pub fn foc_residual(sm: &SignalModel, delta: &Delta) -> DVector<f64> {
    let z = delta.decision_vector();
    let grad = sm.objective.matrix() * z;
    subvector(&grad, &sm.objective_free)
}

/// Minimizes the objective over free coordinates without using any closed form.
pub fn brute_force_oracle(
    sm: &SignalModel,
    delta_tilde: &[f64],
    method: OracleMethod,
) -> Result<Delta> {
    check_tilde(sm, delta_tilde)?;
    let (e, g) = foc_system(sm, delta_tilde);
    let y = match method {
        OracleMethod::Grid => {
            let nk = sm.n_sources * sm.state_dim;
            if nk > GRID_BUDGET {
                return Err(Error::BudgetExceeded {
                    dims: nk,
                    limit: GRID_BUDGET,
                });
            }
            let radius = 5.0 * delta_tilde.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            grid_minimize(&e, &g, radius)
        }
        OracleMethod::Descent { start } => {
            let x0 = match start {
                Some(s) if s.len() == g.len() => DVector::from_vec(s),
                Some(s) => {
                    return Err(Error::Dimension(format!(
                        "start has {} values, expected {}",
                        s.len(),
                        g.len()
                    )))
                }
                None => DVector::zeros(g.len()),
            };
            conjugate_gradient(e.matrix(), &(-g), x0, 10 * sm.dim(), 1e-10)
        }
    };
    Ok(delta_from_free(sm, delta_tilde, &y))
}

/// Plain CG on `H x = b` for SPD `H`.
fn conjugate_gradient(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    mut x: DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> DVector<f64> {
    let mut r = b - h * &x;
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for _ in 0..max_iter.max(1) {
        if rr.sqrt() <= tol {
            break;
        }
        let hp = h * &p;
        let curvature = p.dot(&hp);
        if curvature <= 0.0 {
            break;
        }
        let alpha = rr / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        let rr_new = r.dot(&r);
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    x
}

/// Pattern search over a `g^d` stencil: evaluate every stencil point, move to
/// the best one, and shrink the spacing when the centre is already best.
/// Ties go to the lexicographically smallest point, so the result does not
/// depend on how the evaluation is split across threads.
fn grid_minimize(e: &SymMatrix, g: &DVector<f64>, radius: f64) -> DVector<f64> {
    let d = g.len();
    let mut center = DVector::zeros(d);
    if d == 0 || radius == 0.0 {
        return center;
    }
    let mut pts = 21usize;
    while pts > 3 && (pts as f64).powi(d as i32) > 2.0e5 {
        pts -= 2;
    }
    let total = pts.pow(d as u32);
    let half = (pts - 1) / 2;
    let shrink = (2.0 / (pts - 1) as f64).min(0.5);
    let objective = |y: &DVector<f64>| 0.5 * e.quad_form(y) + g.dot(y);

    let mut step = radius / half as f64;
    let floor = 1e-9 * radius.max(1.0);
    let mut f_center = objective(&center);
    for _ in 0..10_000 {
        if step < floor {
            break;
        }
        let point = |idx: usize| {
            let mut y = center.clone();
            let mut rem = idx;
            for k in (0..d).rev() {
                let digit = rem % pts;
                rem /= pts;
                y[k] += step * (digit as f64 - half as f64);
            }
            y
        };
        let (f_best, idx_best) = (0..total)
            .into_par_iter()
            .map(|idx| (objective(&point(idx)), idx))
            .reduce(
                || (f64::INFINITY, usize::MAX),
                |a, b| {
                    if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
                        a
                    } else {
                        b
                    }
                },
            );
        if f_best < f_center {
            center = point(idx_best);
            f_center = f_best;
        } else {
            step *= shrink;
        }
    }
    center
}

fn require_mode(s: &Scenario, modes: &[Mode], name: &'static str) -> Result<()> {
    if modes.contains(&s.mode()) {
        Ok(())
    } else {
        Err(Error::UnsupportedMode(name))
    }
}

/// Builds the solution record and, for small problems, checks the closed
/// form against the FOC solver.
fn finish(
    s: &Scenario,
    sm: &SignalModel,
    delta: Delta,
    sigma_hat: Option<SymMatrix>,
    delta_factor: Option<f64>,
) -> Result<KlSolution> {
    let delta_tilde = s.delta_tilde();
    if sm.dim() <= CROSS_CHECK_LIMIT {
        let scale = delta_tilde.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        let foc = solve_foc(sm, &delta_tilde)?;
        let gap = delta.max_abs_diff(&foc);
        let metric_gap = delta
            .metric
            .iter()
            .zip(&foc.metric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if gap.max(metric_gap) > CROSS_CHECK_TOL * scale {
            return Err(Error::Inconsistent {
                context: format!("{} closed form vs FOC solve", s.mode()),
                discrepancy: gap.max(metric_gap),
            });
        }
    }
    let shift = mean_shift(&delta);
    let zero = DVector::zeros(shift.len());
    let perceived = sigma_hat.as_ref().unwrap_or(&sm.sigma_star);
    let kl_at_solution = kl_divergence(&shift, perceived, &zero, &sm.sigma_star)?;
    let blp_distortion = blp_distortion_of(sm, &delta);
    Ok(KlSolution {
        degenerate: s.is_degenerate(),
        delta,
        sigma_hat,
        delta_factor,
        kl_at_solution,
        solver_path: SolverPath::ClosedForm,
        blp_distortion,
    })
}

fn replicate(familiar: &[usize], free: &[usize], dt: Vec<f64>, learned: Vec<f64>, metric: Vec<f64>) -> Delta {
    Delta::new(familiar, free, dt, learned, metric, None)
}

/// Known-weights baseline: `Δ̄ = Σ_M νᵢΔᵢ / (1 + Σ_M νᵢ)`, copied to every unfamiliar source.
pub fn solve_baseline(s: &Scenario) -> Result<KlSolution> {
    require_mode(s, &[Mode::Baseline], "baseline")?;
    let sm = build_signal_model(s)?;
    let delta = baseline_delta(s, &sm);
    finish(s, &sm, delta, None, None)
}

/// Weights `γᵢ = νᵢ / (1 + Σ_M νⱼ)` of the familiar sources in `Δ̄`.
pub fn baseline_weights(s: &Scenario) -> Vec<f64> {
    let nu = s.precisions();
    let denom = 1.0 + s.misspecified.iter().map(|&i| nu[i]).sum::<f64>();
    s.misspecified.iter().map(|&i| nu[i] / denom).collect()
}

fn baseline_delta(s: &Scenario, sm: &SignalModel) -> Delta {
    let dt = s.delta_tilde();
    let nu = s.precisions();
    // Accumulated in the same order as the loadings form, so α = 1 reproduces it bit for bit.
    let mut num = 0.0;
    let mut den = 1.0;
    for (p, &i) in s.misspecified.iter().enumerate() {
        num += nu[i] * dt[p];
        den += nu[i];
    }
    let bar = num / den;
    replicate(&sm.familiar, &sm.free, dt, vec![bar; sm.free.len()], vec![bar])
}

/// `Δ̄ = Σ_M αᵢνᵢΔᵢ / (1 + Σ_M αᵢ²νᵢ)` and `Δᵢ = αᵢ Δ̄` off `M`.
pub fn solve_loadings(s: &Scenario) -> Result<KlSolution> {
    require_mode(s, &[Mode::Loadings], "loadings")?;
    let sm = build_signal_model(s)?;
    let a = s.loadings.as_ref().expect("loadings mode");
    let nu = s.precisions();
    let dt = s.delta_tilde();
    let mut num = 0.0;
    let mut den = 1.0;
    for (p, &i) in s.misspecified.iter().enumerate() {
        num += a[i] * nu[i] * dt[p];
        den += a[i] * a[i] * nu[i];
    }
    let bar = num / den;
    let learned = s.unfamiliar().iter().map(|&j| a[j] * bar).collect();
    let delta = replicate(&sm.familiar, &sm.free, dt, learned, vec![bar]);
    finish(s, &sm, delta, None, None)
}

/// The `P`, `Q`, `R` sums of the common-shock model; unfamiliar source `j`
/// gets `Δⱼ = (P βⱼ + Q) / R`. All sums run over the familiar sources.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShockTerms {
    pub p: f64,
    pub q: f64,
    pub r: f64,
}

pub fn shock_terms(s: &Scenario) -> ShockTerms {
    let beta = s.shock_loadings.as_ref().expect("shock mode");
    let nu = s.precisions();
    let dt = s.delta_tilde();
    let (mut s_bnd, mut s_nd, mut s_bn, mut s_n, mut s_bbn) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, &i) in s.misspecified.iter().enumerate() {
        s_bnd += beta[i] * nu[i] * dt[p];
        s_nd += nu[i] * dt[p];
        s_bn += beta[i] * nu[i];
        s_n += nu[i];
        s_bbn += beta[i] * beta[i] * nu[i];
    }
    ShockTerms {
        p: s_bnd * (1.0 + s_n) - s_nd * s_bn,
        q: s_nd * (1.0 + s_bbn) - s_bnd * s_bn,
        r: (1.0 + s_bbn) * (1.0 + s_n) - s_bn * s_bn,
    }
}

/// Common state plus a second common shock `θ` with loadings `β`.
pub fn solve_shock(s: &Scenario) -> Result<KlSolution> {
    require_mode(s, &[Mode::Shock], "shock")?;
    let sm = build_signal_model(s)?;
    let beta = s.shock_loadings.as_ref().expect("shock mode");
    let t = shock_terms(s);
    if t.r.abs() <= linalg::PIVOT_TOL {
        return Err(Error::SingularBlock("shock denominator R".into()));
    }
    let learned = s
        .unfamiliar()
        .iter()
        .map(|&j| (t.p * beta[j] + t.q) / t.r)
        .collect();
    let delta = replicate(&sm.familiar, &sm.free, s.delta_tilde(), learned, vec![t.q / t.r]);
    finish(s, &sm, delta, None, None)
}

/// Latent common factor: `Δ̄ = Σ_M νᵢΔᵢ / Σ_M νᵢ`, `Δᵢ = Δ̄` off `M`, and the
/// factor itself is misperceived by `−Δ̄`.
pub fn solve_latent(s: &Scenario) -> Result<KlSolution> {
    require_mode(s, &[Mode::Latent], "latent")?;
    let sm = build_signal_model(s)?;
    let nu = s.precisions();
    let dt = s.delta_tilde();
    let num: f64 = s.misspecified.iter().zip(&dt).map(|(&i, d)| nu[i] * d).sum();
    let den: f64 = s.misspecified.iter().map(|&i| nu[i]).sum();
    let bar = num / den;
    let delta = Delta::new(
        &sm.familiar,
        &sm.free,
        dt,
        vec![bar; sm.free.len()],
        vec![bar],
        Some(-bar),
    );
    finish(s, &sm, delta, None, None)
}

/// `Δ̄ = (Ω₀⁻¹ + Σ_M Ωᵢ⁻¹)⁻¹ Σ_M Ωᵢ⁻¹ Δᵢ ∈ ℝᴷ`, copied to every unfamiliar source.
pub fn solve_multidim(s: &Scenario) -> Result<KlSolution> {
    require_mode(s, &[Mode::Multidim], "multidim")?;
    let sm = build_signal_model(s)?;
    let k = s.state_dim;
    let dt = s.delta_tilde();
    let mut precision = linalg::invert_spd(&s.state_covariance())?.into_matrix();
    let mut rhs = DVector::zeros(k);
    for (p, &i) in s.misspecified.iter().enumerate() {
        let oi = linalg::invert_spd(&s.error_covariance(i))?;
        precision += oi.matrix();
        rhs += oi.matrix() * DVector::from_column_slice(&dt[p * k..(p + 1) * k]);
    }
    let bar = solve_spd(&SymMatrix::new(precision)?, &rhs)?;
    let bar: Vec<f64> = bar.iter().copied().collect();
    let learned = (0..sm.free.len() / k.max(1))
        .flat_map(|_| bar.iter().copied())
        .collect();
    let delta = replicate(&sm.familiar, &sm.free, dt, learned, bar);
    finish(s, &sm, delta, None, None)
}

/// Both biases and covariance are learned: `Δ` is the baseline answer,
/// `Σ̂ = Σ* + ΔΔᵀ`, and `δ = 1/(1 + ΔᵀΣ*⁻¹Δ)`.
pub fn solve_learn_covariance(s: &Scenario) -> Result<KlSolution> {
    require_mode(s, &[Mode::LearnCovariance], "learn_covariance")?;
    let sm = build_signal_model(s)?;
    let delta = baseline_delta(s, &sm);
    let d = delta.full_vector();

    let dense = d.dot(&(sm.sigma_star_inv.matrix() * &d));
    let shortcut = learn_cov_quadratic_shortcut(s, &delta);
    if (dense - shortcut).abs() > DELTA_FACTOR_TOL * dense.abs().max(1.0) {
        return Err(Error::Inconsistent {
            context: "quadratic form: dense vs familiar-source shortcut".into(),
            discrepancy: (dense - shortcut).abs(),
        });
    }
    let delta_factor = 1.0 / (1.0 + shortcut);
    let sigma_hat = SymMatrix::new(sm.sigma_star.matrix() + &d * d.transpose())?;
    finish(s, &sm, delta, Some(sigma_hat), Some(delta_factor))
}

/// `ΔᵀΣ*⁻¹Δ` through `Σ*⁻¹Δ = [νᵢ(Δᵢ − Δ̄) on M, 0 elsewhere]`.
pub fn learn_cov_quadratic_shortcut(s: &Scenario, delta: &Delta) -> f64 {
    let nu = s.precisions();
    let bar = delta.metric_scalar();
    s.misspecified
        .iter()
        .map(|&i| nu[i] * (delta.full[i] - bar) * delta.full[i])
        .sum()
}

/// Dispatches on the scenario's mode.
pub fn solve(s: &Scenario) -> Result<KlSolution> {
    match s.mode() {
        Mode::Baseline => solve_baseline(s),
        Mode::Loadings => solve_loadings(s),
        Mode::Shock => solve_shock(s),
        Mode::Latent => solve_latent(s),
        Mode::Multidim => solve_multidim(s),
        Mode::LearnCovariance => solve_learn_covariance(s),
    }
}
