//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::time::Instant;

use misspec::behavior::{
    antithetic_mean, decompose_distortion, monte_carlo_eu_gap, optimal_holdings, portfolio,
    predictors, PortfolioScenario,
};
use misspec::klsolver::{
    brute_force_oracle, shock_terms, solve, solve_general, OracleMethod,
};
use misspec::learner::{limit_mean, max_z_score, run_convergence, Likelihood, PriorSpec};
use misspec::linalg::{
    block_inverse, inverse_residual, log_det_spd, sherman_morrison_inverse, weyl_bounds_check,
    woodbury_inverse, SymMatrix,
};
use misspec::scenario::{build_signal_model, random_scenario, random_spd, Mode, Scenario};
use misspec::sweep::{
    check_doom, check_scaling, check_wdoom_shock, doom_negative_control, run_sweep, Output,
    Parameter, SweepSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || {
        format!("{what}: got {got:e}, want {want:e} (tol {tol:e})")
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn err(e: misspec::Error) -> String {
    e.to_string()
}

fn oracle_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for mode in Mode::ALL {
        for seed in 0..200u64 {
            let s = random_scenario(mode, &mut rng(seed));
            let sol = solve(&s).map_err(err)?;
            let sm = build_signal_model(&s).map_err(err)?;
            let dt = s.delta_tilde();
            let general = solve_general(&sm, &dt).map_err(err)?;
            let oracle = brute_force_oracle(&sm, &dt, OracleMethod::Descent { start: None })
                .map_err(err)?;
            let d = general
                .delta
                .max_abs_diff(&sol.delta)
                .max(oracle.max_abs_diff(&sol.delta))
                .max(oracle.max_abs_diff(&general.delta));
            ensure(d <= 1e-8, || format!("{mode} seed {seed}: disagreement {d:e}"))?;
            worst = worst.max(d);
        }
    }
    Ok(format!("6 modes x 200 scenarios, max disagreement {worst:.2e}"))
}

fn metric(noise: &[f64], m: &[usize], perceived: &[f64]) -> Result<f64, String> {
    let s = Scenario::baseline(noise, m, perceived)
        .validate()
        .map_err(|e| e.to_string())?;
    Ok(solve(&s).map_err(err)?.delta.metric_scalar())
}

fn baseline_golden() -> Outcome {
    close(metric(&[1.0, 1.0], &[0], &[1.0])?, 0.5, 1e-12, "single source")?;
    close(metric(&[0.5, 1.0, 1.0], &[0, 1], &[1.0, 1.0])?, 0.75, 1e-12, "nu = (2, 1)")?;
    close(metric(&[1.0, 1.0, 1.0], &[0, 1], &[1.0, -1.0])?, 0.0, 1e-12, "symmetric")?;
    Ok("1/2, 3/4, 0".into())
}

fn shock_golden() -> Outcome {
    let mut s = Scenario::baseline(&[1.0; 5], &[0, 1, 2], &[1.0, 0.0, 0.0]);
    s.shock_loadings = Some(vec![1.0, 0.0, 0.0, 1.0, 0.0]);
    let s = s.validate().map_err(|e| e.to_string())?;
    let t = shock_terms(&s);
    close(t.p, 3.0, 1e-12, "P")?;
    close(t.q, 1.0, 1e-12, "Q")?;
    close(t.r, 7.0, 1e-12, "R")?;
    let sol = solve(&s).map_err(err)?;
    close(sol.delta.learned_part[0], 4.0 / 7.0, 1e-12, "delta_4")?;
    close(sol.delta.learned_part[1], 1.0 / 7.0, 1e-12, "delta_5")?;
    let sm = build_signal_model(&s).map_err(err)?;
    let general = solve_general(&sm, &s.delta_tilde()).map_err(err)?;
    let d = general.delta.max_abs_diff(&sol.delta);
    ensure(d <= 1e-10, || format!("general solver differs by {d:e}"))?;
    Ok("P=3 Q=1 R=7, (4/7, 1/7)".into())
}

fn halo_scenario(rho: f64) -> Result<Scenario, String> {
    let mut s = Scenario::baseline(&[1.0, 1.0], &[0], &[1.0, -1.0]);
    s.state_dim = 2;
    s.true_bias = vec![0.0; 4];
    s.state_cov = Some(SymMatrix::identity(2));
    s.error_covs = Some(vec![
        SymMatrix::from_rows(&[&[1.0, rho], &[rho, 1.0]]).map_err(err)?,
        SymMatrix::identity(2),
    ]);
    s.validate().map_err(|e| e.to_string())
}

fn halo_golden() -> Outcome {
    let s = halo_scenario(0.5)?;
    let sol = solve(&s).map_err(err)?;
    close(sol.delta.metric[0], 2.0 / 3.0, 1e-12, "metric A")?;
    close(sol.delta.metric[1], -2.0 / 3.0, 1e-12, "metric B")?;

    let spec = SweepSpec {
        base: s,
        parameter: Parameter::Rho,
        index: 0,
        component: 0,
        grid: vec![0.5],
        outputs: vec![Output::Metric],
        portfolio: None,
    };
    let table = run_sweep(&spec).map_err(err)?;
    let fd = table.column("d_metric_1/d_param").ok_or("missing column")?[0];
    let (v, rho, da, db) = (1.0f64, 0.5f64, 1.0f64, -1.0f64);
    let num = 2.0 * rho * v * v * (1.0 + v) * da - v * (1.0 + v * (2.0 + v + rho * rho * v)) * db;
    let den = (1.0 + (1.0 - rho) * v).powi(2) * (1.0 + v + rho * v).powi(2);
    close(fd, num / den, 1e-6, "d metric A / d rho")?;
    Ok(format!("(2/3, -2/3), d/drho {fd:.9} vs {:.9}", num / den))
}

fn learned_covariance_golden() -> Outcome {
    let mut s = Scenario::baseline(&[1.0, 1.0], &[0], &[1.0]);
    s.learn_covariance = true;
    let s = s.validate().map_err(|e| e.to_string())?;
    let sol = solve(&s).map_err(err)?;
    let f = sol.delta_factor.ok_or("no delta factor")?;
    close(f, 2.0 / 3.0, 1e-10, "delta")?;
    let sm = build_signal_model(&s).map_err(err)?;
    let d = sol.delta.full_vector();
    let expected = sm.sigma_star.matrix() + &d * d.transpose();
    let hat = sol.sigma_hat.as_ref().ok_or("no learned covariance")?;
    let gap = (hat.matrix() - expected).amax();
    ensure(gap <= 1e-10, || format!("sigma hat off by {gap:e}"))?;
    close(log_det_spd(hat).map_err(err)?.exp(), 4.5, 1e-10, "det sigma hat")?;
    let dec = decompose_distortion(&s, &sol, 0, 1_000_000).map_err(err)?;
    close(dec.term_iii, -(1.0 - f) * dec.term_i, 1e-10, "term III")?;
    Ok(format!("delta 2/3, det 4.5, term I {:.6}, term III {:.6}", dec.term_i, dec.term_iii))
}

fn learner_convergence() -> Outcome {
    let t = 100_000;
    let mut violations = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let s = random_scenario(Mode::Baseline, &mut rng(1000 + seed));
        let sol = solve(&s).map_err(err)?;
        let sm = build_signal_model(&s).map_err(err)?;
        let dim = Likelihood::new(&sm, &s.perceived_bias).map_err(err)?.dim();
        let trace = run_convergence(&s, &PriorSpec::diffuse(dim), seed, t, &[]).map_err(err)?;
        let z = max_z_score(&trace, &limit_mean(&s, &sol));
        worst = worst.max(z);
        if z >= 4.0 {
            violations.push(seed);
        }
    }
    ensure(violations.len() <= 1, || format!("violations at seeds {violations:?}"))?;
    Ok(format!("20 scenarios, T=1e5, max z {worst:.3}, violations {}", violations.len()))
}

fn welfare_monte_carlo() -> Outcome {
    let draws = 1_000_000;
    let mut lines = Vec::new();
    for (k, learn) in [false, true].into_iter().enumerate() {
        let mut cases = vec![{
            let mut s = Scenario::baseline(&[1.0, 1.0], &[0], &[1.0]);
            s.learn_covariance = learn;
            s.validate().map_err(|e| e.to_string())?
        }];
        let mode = if learn { Mode::LearnCovariance } else { Mode::Baseline };
        for seed in 0..3u64 {
            cases.push(random_scenario(mode, &mut rng(2000 + seed)));
        }
        for (c, s) in cases.iter().enumerate() {
            let seed = (k * 10 + c) as u64;
            let sol = solve(s).map_err(err)?;
            let bar = sol.delta.metric_scalar();
            let target = -sol.delta_factor.unwrap_or(1.0) * bar * bar;
            let mc = monte_carlo_eu_gap(s, &sol, seed, draws).map_err(err)?;
            ensure(mc.agrees_with(target), || {
                format!("{mode} case {c}: {} +- {} vs {target}", mc.mean, mc.se)
            })?;
            let sm = build_signal_model(s).map_err(err)?;
            let (star, hat) = predictors(s, &sm, &sol).map_err(err)?;
            let h = antithetic_mean(s, seed + 100, draws, |omega, x| {
                let p = star.predict(x)[0];
                (omega[0] - p) * (hat.predict(x)[0] - p)
            })
            .map_err(err)?;
            ensure(h.agrees_with(0.0), || {
                format!("{mode} case {c}: H {} +- {}", h.mean, h.se)
            })?;
            lines.push(format!("{:.1e}/{:.1e}", (mc.mean - target).abs(), mc.se));
        }
    }
    Ok(format!("8 scenarios x 1e6 draws, |est-target|/se: {}", lines.join(" ")))
}

fn kkt_holdings(eta: &[f64], mu: &[f64], lam: f64, w: f64) -> Vec<f64> {
    let k = eta.len();
    let mut m = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for j in 0..k {
        m[(j, j)] = lam / eta[j];
        m[(j, k)] = 1.0;
        m[(k, j)] = 1.0;
        rhs[j] = mu[j];
    }
    rhs[k] = w;
    let sol = m.lu().solve(&rhs).expect("KKT system is nonsingular");
    sol.iter().take(k).copied().collect()
}

fn magnitudes(ps: &PortfolioScenario) -> Result<Vec<f64>, String> {
    let r = portfolio(ps).map_err(err)?;
    let mut v: Vec<f64> = r.delta_alpha.iter().map(|d| d.abs()).collect();
    v.push(r.eu_gap.abs());
    Ok(v)
}

fn strictly_falls(series: &[Vec<f64>], what: &str) -> Result<(), String> {
    for w in series.windows(2) {
        for (q, (a, b)) in w[0].iter().zip(&w[1]).enumerate() {
            ensure(b < a, || format!("{what}: quantity {q} rose from {a} to {b}"))?;
        }
    }
    Ok(())
}

fn portfolio_properties() -> Outcome {
    let golden = PortfolioScenario {
        n_projects: 2,
        eta: vec![1.0, 1.0],
        risk_aversion: 1.0,
        wealth: 1.0,
        mu_star: vec![0.0, 0.0],
        metric: 0.5,
    };
    let r = portfolio(&golden).map_err(err)?;
    close(r.delta_alpha[0], -0.25, 1e-12, "delta alpha 1")?;
    close(r.delta_alpha[1], 0.25, 1e-12, "delta alpha 2")?;
    close(r.eu_gap, -1.0 / 16.0, 1e-12, "gap")?;

    let scales = [1.0, 2.0, 4.0, 8.0, 16.0];
    // Each project's variance on its own, with two projects.
    for k in 0..2 {
        let series = scales
            .iter()
            .map(|t| {
                let mut ps = golden.clone();
                ps.eta[k] = 1.0 / t;
                magnitudes(&ps)
            })
            .collect::<Result<Vec<_>, _>>()?;
        strictly_falls(&series, &format!("eta_{} alone", k + 1))?;
    }

    let mut g = rng(3000);
    for case in 0..200 {
        let k = g.random_range(1..=6usize);
        let ps = PortfolioScenario {
            n_projects: k,
            eta: (0..k).map(|_| g.random_range(0.1..5.0)).collect(),
            risk_aversion: g.random_range(0.1..5.0),
            wealth: g.random_range(0.1..10.0),
            mu_star: (0..k).map(|_| g.random_range(-2.0..2.0)).collect(),
            metric: g.random_range(0.1..2.0) * if g.random_bool(0.5) { 1.0 } else { -1.0 },
        };
        let r = portfolio(&ps).map_err(err)?;
        let sum: f64 = r.delta_alpha.iter().sum();
        ensure(sum.abs() <= 1e-12, || format!("case {case}: sum {sum:e}"))?;

        let mut mu_hat = ps.mu_star.clone();
        mu_hat[0] -= ps.metric;
        for (mu, got) in [(&ps.mu_star, &r.alpha_star), (&mu_hat, &r.alpha_hat)] {
            let want = kkt_holdings(&ps.eta, mu, ps.risk_aversion, ps.wealth);
            let closed = optimal_holdings(&ps.eta, mu, ps.risk_aversion, ps.wealth);
            for j in 0..k {
                close(got[j], want[j], 1e-8 * want[j].abs().max(1.0), "QP oracle")?;
                close(closed[j], want[j], 1e-8 * want[j].abs().max(1.0), "QP oracle")?;
            }
        }

        if k >= 2 {
            // Every variance scaled up together.
            let series = scales
                .iter()
                .map(|t| {
                    let mut p = ps.clone();
                    p.eta.iter_mut().for_each(|e| *e /= t);
                    magnitudes(&p)
                })
                .collect::<Result<Vec<_>, _>>()?;
            strictly_falls(&series, &format!("case {case}, joint"))?;
            // One variance at a time: project 1's holding and the gap fall for any k,
            // and so does the holding of the project whose variance moved.
            for m in 0..k {
                let series = scales
                    .iter()
                    .map(|t| {
                        let mut p = ps.clone();
                        p.eta[m] /= t;
                        let all = magnitudes(&p)?;
                        let mut picked = vec![all[0], all[k]];
                        if m > 0 {
                            picked.push(all[m]);
                        }
                        Ok(picked)
                    })
                    .collect::<Result<Vec<_>, String>>()?;
                strictly_falls(&series, &format!("case {case}, eta_{}", m + 1))?;
            }
        }
    }
    Ok("golden (-1/4, 1/4, -1/16); 200 random portfolios: zero-sum, KKT, 5-point grids".into())
}

fn structural_properties() -> Outcome {
    let mut counts = Vec::new();
    for mode in [Mode::Baseline, Mode::Latent, Mode::Multidim, Mode::LearnCovariance] {
        for seed in 0..100u64 {
            let s = random_scenario(mode, &mut rng(4000 + seed));
            ensure(check_doom(&s, 20, seed).map_err(err)?, || {
                format!("{mode} seed {seed}: DOOM failed")
            })?;
            ensure(!doom_negative_control(&s, 20, seed).map_err(err)?, || {
                format!("{mode} seed {seed}: negative control did not move the limit")
            })?;
        }
        counts.push(format!("{mode} 100"));
    }
    for seed in 0..50u64 {
        let s = random_scenario(Mode::Shock, &mut rng(5000 + seed));
        ensure(check_wdoom_shock(&s, 20, seed).map_err(err)?, || {
            format!("shock seed {seed}: WDOOM failed")
        })?;
    }
    let mut scaled = 0;
    let mut seed = 0u64;
    while scaled < 50 {
        let s = random_scenario(Mode::Baseline, &mut rng(6000 + seed));
        seed += 1;
        if solve(&s).map_err(err)?.delta.metric_scalar() == 0.0 {
            continue;
        }
        for alpha in [1.5, 2.0, 10.0] {
            ensure(check_scaling(&s, alpha).map_err(err)?, || {
                format!("scaling failed at alpha {alpha}")
            })?;
        }
        scaled += 1;
    }
    Ok(format!("DOOM and controls ({}), WDOOM 50, scaling 50 x 3", counts.join(", ")))
}

fn linear_algebra() -> Outcome {
    let mut g = rng(7000);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = g.random_range(1..=10usize);
        let base = random_spd(n, 0.5, &mut g);
        let base_inv = SymMatrix::new(base.matrix().clone().try_inverse().ok_or("singular")?)
            .map_err(err)?;

        let x = DVector::from_fn(n, |_, _| g.random_range(-2.0..2.0));
        let updated = base.matrix() + &x * x.transpose();
        let sm = sherman_morrison_inverse(&base_inv, &x, &x).map_err(err)?;
        let r = inverse_residual(&updated, &sm);
        ensure(r < 1e-10, || format!("Sherman-Morrison residual {r:e}"))?;
        worst = worst.max(r);

        let rank = g.random_range(1..=3usize);
        let u = DMatrix::from_fn(n, rank, |_, _| g.random_range(-1.0..1.0));
        let middle = random_spd(rank, 0.5, &mut g);
        let middle_inv = middle.matrix().clone().try_inverse().ok_or("singular")?;
        let updated = base.matrix() + &u * middle.matrix() * u.transpose();
        let wb = woodbury_inverse(&base_inv, &u, &middle_inv, &u).map_err(err)?;
        let r = inverse_residual(&updated, &wb);
        ensure(r < 1e-10, || format!("Woodbury residual {r:e}"))?;
        worst = worst.max(r);

        let total = g.random_range(2..=10usize);
        let full = random_spd(total, 0.5, &mut g);
        let split = g.random_range(1..total);
        let a = full.principal(&(0..split).collect::<Vec<_>>());
        let d = full.principal(&(split..total).collect::<Vec<_>>());
        let fm = full.matrix();
        let b = fm.view((0, split), (split, total - split)).into_owned();
        let c = fm.view((split, 0), (total - split, split)).into_owned();
        let bi = block_inverse(&a, &b, &c, &d).map_err(err)?;
        let r = inverse_residual(fm, &bi);
        ensure(r < 1e-10, || format!("block inverse residual {r:e}"))?;
        worst = worst.max(r);

        let raw = DMatrix::from_fn(6, 6, |_, _| g.random_range(-3.0..3.0));
        let sym = SymMatrix::new((&raw + raw.transpose()) * 0.5).map_err(err)?;
        let xw = DVector::from_fn(6, |_, _| g.random_range(-2.0..2.0));
        ensure(weyl_bounds_check(&sym, &xw), || "Weyl bounds failed".into())?;
    }
    Ok(format!("1000 inputs each, max residual {worst:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("single-dimension golden values", baseline_golden),
        ("common shock golden values", shock_golden),
        ("correlated errors golden values", halo_golden),
        ("learned covariance golden values", learned_covariance_golden),
        ("posterior convergence", learner_convergence),
        ("welfare gap Monte Carlo", welfare_monte_carlo),
        ("portfolio distortion", portfolio_properties),
        ("structural properties", structural_properties),
        ("linear algebra substrate", linear_algebra),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
