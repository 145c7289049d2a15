//! Acceptance suite. Runs every criterion at full scale and prints one
//! PASS/FAIL line per criterion; the process fails if any criterion fails.
//!
//! Set `STDR_ACCEPTANCE=1,4,7` to run a subset.

mod common;

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stdr_core::config::{ExperimentConfig, Method};
use stdr_core::dr::{double_robustness_check, Misspecified};
use stdr_core::elopt::{fit_propensity_el_problem, select_lambda_bic, solve_inner_weights, ElOptions, PropensityProblem};
use stdr_core::experiment::{fit_outcome_model, run, ReplicationRecord, METRICS_CSV_FILE, REPLICATIONS_FILE};
use stdr_core::hmm::{baum_welch, forward_backward, quantile_init, viterbi, BaumWelchOptions, HmmModel};
use stdr_core::mtgcn::{build_graphs, gradient_check, loss, train, Activation, GraphSpec, MtgcnHyper, MtgcnModel, Samples, Scaling};
use stdr_core::outcome::{fit_arm, CdOptions, Latent};
use stdr_core::propensity::{scad_deriv, scad_value, score, ScadPenalty};
use stdr_core::seed::derive;
use stdr_core::synthdgp::{generate, DgpConfig, TreatmentMechanism};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn el_constraints() -> Outcome {
    let opts = ElOptions::default();
    let grid = ExperimentConfig::default().lambda_grid;
    let (mut fits, mut skipped) = (0, 0);
    let (mut worst_sum, mut worst_moment, mut worst_balance): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for r in 0..5 {
        let ds = generate(&DgpConfig { seed: 500 + r, ..Default::default() }).map_err(|e| e.to_string())?;
        let problem = PropensityProblem::from_dataset(&ds, true).map_err(|e| e.to_string())?;
        let mut warm: Option<Vec<f64>> = None;
        for &lambda in &grid {
            let pen = ScadPenalty::with_lambda(lambda).map_err(|e| e.to_string())?;
            let sol = fit_propensity_el_problem(&problem, &pen, warm.as_deref(), &opts).map_err(|e| e.to_string())?;
            warm = Some(sol.model.coef.clone());
            if !sol.converged {
                skipped += 1;
                continue;
            }
            fits += 1;
            let w = &sol.weights;
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
            let n = ds.n();
            let e: Vec<f64> = (0..n)
                .map(|i| score(&sol.model, &ds.covariates().row(i).iter().copied().collect::<Vec<_>>()).unwrap())
                .collect();
            for j in 0..problem.dim() {
                let m: f64 = (0..n).map(|i| w[i] * (problem.treatment[i] - e[i]) * problem.design[(i, j)]).sum();
                worst_moment = worst_moment.max(m.abs());
                if j >= 1 {
                    worst_balance = worst_balance.max(m.abs());
                }
            }
        }
    }
    ensure(fits > 0, || "no fit converged".into())?;
    ensure(worst_sum < 1e-10, || format!("|sum p - 1| = {worst_sum:.2e}"))?;
    ensure(worst_moment < 1e-8, || format!("moment residual {worst_moment:.2e}"))?;
    ensure(worst_balance < 1e-6, || format!("balance residual {worst_balance:.2e}"))?;
    Ok(format!(
        "{fits} converged fits ({skipped} unconverged): |sum p - 1| <= {worst_sum:.1e}, moments <= {worst_moment:.1e}, balance <= {worst_balance:.1e}"
    ))
}

fn el_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < 50 {
        let n = rng.gen_range(3..=12);
        let g: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if g.iter().all(|v| *v > 0.0) || g.iter().all(|v| *v < 0.0) {
            continue;
        }
        let sol = solve_inner_weights(&DMatrix::from_column_slice(n, 1, &g)).map_err(|e| e.to_string())?;
        let oracle = common::grid_weights(&g);
        for (a, b) in sol.weights.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        done += 1;
    }
    ensure(worst < 1e-4, || format!("max weight gap {worst:.2e}"))?;
    Ok(format!("50 instances, max weight gap {worst:.1e}"))
}

fn scad_and_outcome() -> Outcome {
    let mut kink_gap: f64 = 0.0;
    for (lambda, a) in [(0.05, 3.7), (0.5, 3.7), (1.0, 3.7), (2.0, 5.0)] {
        let pen = ScadPenalty::new(lambda, a).unwrap();
        for kink in [lambda, a * lambda] {
            let at = scad_deriv(kink, &pen);
            for x in [kink * (1.0 - f64::EPSILON), kink * (1.0 + f64::EPSILON)] {
                kink_gap = kink_gap.max((scad_deriv(x, &pen) - at).abs() / lambda);
            }
        }
    }
    ensure(kink_gap < 1e-14, || format!("derivative jump {kink_gap:.2e} at a kink"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pen = ScadPenalty::new(0.7, 3.7).unwrap();
    let h = 1e-6;
    let (mut fd_gap, mut points): (f64, usize) = (0.0, 0);
    while points < 100 {
        let x: f64 = rng.gen_range(-4.0..4.0);
        let ax = x.abs();
        if ax < 1e-3 || (ax - 0.7).abs() < 1e-3 || (ax - 0.7 * 3.7).abs() < 1e-3 {
            continue;
        }
        let fd = (scad_value(x + h, &pen) - scad_value(x - h, &pen)) / (2.0 * h);
        fd_gap = fd_gap.max((fd - scad_deriv(x, &pen) * x.signum()).abs());
        points += 1;
    }
    ensure(fd_gap < 1e-6, || format!("finite-difference gap {fd_gap:.2e}"))?;

    let (n, q) = (300, 25);
    let x = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y: Vec<f64> = (0..n).map(|i| 1.0 + x[(i, 0)] - x[(i, 3)] + 0.5 * x[(i, 7)] + rng.sample::<f64, _>(StandardNormal)).collect();
    let fit = fit_arm(&x, &y, &vec![true; n], &vec![true; q], &ScadPenalty::new(0.0, 3.7).unwrap(), &CdOptions::default(), None)
        .map_err(|e| e.to_string())?;
    let (b0, b) = common::normal_equations(&x, &y);
    let ne_gap = b.iter().zip(&fit.coef).map(|(a, c)| (a - c).abs()).fold((fit.intercept - b0).abs(), f64::max);
    ensure(ne_gap < 1e-8, || format!("normal-equations gap {ne_gap:.2e}"))?;
    Ok(format!("kink jump {kink_gap:.1e}, FD gap {fd_gap:.1e} over 100 points, lambda=0 vs normal equations {ne_gap:.1e}"))
}

fn hmm_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let (mut ll_gap, mut marg_gap): (f64, f64) = (0.0, 0.0);
    let mut viterbi_ok = 0;
    let mut cases = 0;
    for (k, h) in [(2usize, 10usize), (3, 8), (4, 6), (10, 4)] {
        for _ in 0..5 {
            let model = common::random_model(&mut rng, k);
            let obs: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let oracle = common::enumerate(&model, &obs);
            let post = forward_backward(&model, &obs).map_err(|e| e.to_string())?;
            ll_gap = ll_gap.max((post.loglik - oracle.loglik).abs());
            for t in 0..h {
                for s in 0..k {
                    marg_gap = marg_gap.max((post.smoothed[(t, s)] - oracle.marginals[t][s]).abs());
                }
            }
            viterbi_ok += usize::from(viterbi(&model, &obs).map_err(|e| e.to_string())? == oracle.best_path);
            cases += 1;
        }
    }
    ensure(ll_gap < 1e-10 && marg_gap < 1e-10, || format!("loglik gap {ll_gap:.2e}, marginal gap {marg_gap:.2e}"))?;
    ensure(viterbi_ok == cases, || format!("Viterbi matched {viterbi_ok}/{cases}"))?;

    let truth = HmmModel::new(
        vec![1.0 / 3.0; 3],
        vec![vec![0.8, 0.1, 0.1], vec![0.1, 0.8, 0.1], vec![0.1, 0.1, 0.8]],
        vec![1.0, 2.0, 3.0],
        vec![0.6, 0.6, 0.6],
    )
    .unwrap();
    let obs = common::simulate(&truth, 100, 10, 8);
    let fit = baum_welch(&quantile_init(&obs, 3, 0.6).unwrap(), &obs, &BaumWelchOptions { max_iter: 200, tol: 0.0, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let worst_drop = fit.loglik_trace.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    ensure(worst_drop >= -1e-9, || format!("log-likelihood fell by {:.2e}", -worst_drop))?;

    let two = HmmModel::new(vec![0.5, 0.5], vec![vec![0.8, 0.2], vec![0.3, 0.7]], vec![0.0, 2.5], vec![1.0, 1.0]).unwrap();
    let obs = common::simulate(&two, 300, 20, 9);
    let fit2 = baum_welch(&quantile_init(&obs, 2, 0.8).unwrap(), &obs, &BaumWelchOptions::default()).map_err(|e| e.to_string())?;
    let a_err = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| (fit2.model.trans[i][j] - two.trans[i][j]).abs()).fold(0.0, f64::max);
    ensure(a_err < 0.1, || format!("transition error {a_err:.3}"))?;
    Ok(format!(
        "{cases} enumeration cases: loglik gap {ll_gap:.1e}, marginal gap {marg_gap:.1e}, Viterbi exact; BW min step {worst_drop:.1e}; K=2 max |A err| {a_err:.3}"
    ))
}

fn double_robustness() -> Outcome {
    let cfg = DgpConfig { n: 2000, seed: 5005, ..Default::default() };
    let mut lines = Vec::new();
    let mut fail = Vec::new();
    for which in [Misspecified::Propensity, Misspecified::Outcome, Misspecified::Both] {
        let rep = double_robustness_check(&cfg, which, 200).map_err(|e| e.to_string())?;
        let ok = match which {
            Misspecified::Both => rep.bias.abs() > 0.1,
            _ => rep.bias.abs() < 0.05,
        };
        lines.push(format!("{which:?} wrong: bias {:+.4} (mc se {:.4})", rep.bias, rep.mc_se));
        if !ok || rep.failures > 0 {
            fail.push(format!("{which:?}: bias {:+.4}, {} failures", rep.bias, rep.failures));
        }
    }
    ensure(fail.is_empty(), || fail.join("; "))?;
    Ok(lines.join("; "))
}

fn coverage() -> Outcome {
    let cfg = DgpConfig { n: 2000, seed: 6006, ..Default::default() };
    let rep = double_robustness_check(&cfg, Misspecified::None, 500).map_err(|e| e.to_string())?;
    let pct = 100.0 * rep.coverage;
    ensure(rep.replications == 500, || format!("only {} replications succeeded", rep.replications))?;
    ensure((92.0..=98.0).contains(&pct), || format!("coverage {pct:.1}%"))?;
    Ok(format!("coverage {pct:.1}% over 500 replications (bias {:+.4})", rep.bias))
}

fn mtgcn_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, n) = (64, 8);
    let common_factor: Vec<f64> = (0..b).map(|_| rng.sample(StandardNormal)).collect();
    let signals = DMatrix::from_fn(b, n, |i, j| {
        let e: f64 = rng.sample(StandardNormal);
        if j < 4 { common_factor[i] + 0.5 * e } else { e }
    });
    let targets = DMatrix::from_fn(b, 1, |i, _| f64::tanh(signals[(i, 0)] - signals[(i, 5)]) + 0.2 * signals[(i, 2)]);
    let samples = Samples::new(signals.clone(), targets, None).unwrap();
    let strata: Vec<usize> = (0..b).map(|i| i % 3).collect();
    let graphs = build_graphs(&signals, Some(&strata), 0.2).map_err(|e| e.to_string())?;
    let model = MtgcnModel::new(n, graphs.views(), MtgcnHyper { layers: 2, hidden: 8, seed: 1, ..Default::default() }, Scaling::fit(&samples))
        .map_err(|e| e.to_string())?;
    let chk = gradient_check(&model, &graphs, &samples, 20, 1e-5, 11).map_err(|e| e.to_string())?;
    ensure(chk.max_rel_error < 1e-4, || format!("gradient relative error {:.2e}", chk.max_rel_error))?;

    let coef = [0.6, -0.4, 0.0, 1.1, 0.2, -0.8, 0.0, 0.5];
    let lin_targets = DMatrix::from_fn(b, 1, |i, _| 0.3 + (0..n).map(|j| coef[j] * signals[(i, j)]).sum::<f64>());
    let lin = Samples::new(signals, lin_targets, None).unwrap();
    let hyper = MtgcnHyper { layers: 1, hidden: 4, activation: Activation::Linear, epochs: 3000, tol: 0.0, ..Default::default() };
    let iso = GraphSpec::isolated(n, 1);
    let mut student = MtgcnModel::new(n, 1, hyper, Scaling::fit(&lin)).map_err(|e| e.to_string())?;
    train(&mut student, &iso, &lin).map_err(|e| e.to_string())?;
    let final_loss = loss(&student, &iso, &lin).map_err(|e| e.to_string())?;
    ensure(final_loss < 1e-4, || format!("realizable target loss {final_loss:.2e}"))?;
    Ok(format!("{} probes, max relative error {:.1e}; realizable target loss {final_loss:.1e}", chk.probes, chk.max_rel_error))
}

fn variable_selection() -> Outcome {
    let cfg = ExperimentConfig::default();
    let p = cfg.dgp.p;
    let theta: Vec<f64> = (0..p).map(|j| if j < 10 { if j % 2 == 0 { 0.5 } else { -0.5 } } else { 0.0 }).collect();
    let truth: Vec<usize> = (0..10).collect();
    let recovered = |support: &[usize]| -> bool {
        truth.iter().all(|j| support.contains(j)) && support.iter().filter(|j| !truth.contains(j)).count() <= 2
    };
    let (mut theta_ok, mut beta_ok) = (0, 0);
    for r in 0..100u64 {
        let dgp = DgpConfig {
            n: 1000,
            seed: derive(8008, r),
            treatment: TreatmentMechanism::Linear { intercept: 0.0, coef: theta.clone() },
            ..cfg.dgp.clone()
        };
        let ds = generate(&dgp).map_err(|e| e.to_string())?;
        let problem = PropensityProblem::from_dataset(&ds, true).map_err(|e| e.to_string())?;
        if let Ok((sol, _)) = select_lambda_bic(&problem, &cfg.lambda_grid, cfg.scad_a, &cfg.el) {
            theta_ok += usize::from(recovered(&sol.support()));
        }
        if let Ok(fit) = fit_outcome_model(&ds, &Latent::None, &cfg) {
            beta_ok += usize::from(recovered(&fit.covariate_support()));
        }
    }
    ensure(theta_ok >= 90 && beta_ok >= 90, || format!("theta recovered {theta_ok}/100, beta {beta_ok}/100"))?;
    Ok(format!("theta recovered in {theta_ok}/100, beta in {beta_ok}/100"))
}

fn ordering() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig::default();
    cfg.methods = vec![Method::Proposed, Method::IpwOnly, Method::OutcomeOnly, Method::CbpsScadStatic];
    cfg.output_dir = dir.path().to_path_buf();
    let out = run(&cfg).map_err(|e| e.to_string())?;
    eprint!("{}", out.table.to_text());
    let proposed = out.table.row("proposed").ok_or("no proposed row")?;
    let mut by_rep: HashMap<(usize, &str), &ReplicationRecord> = HashMap::new();
    for r in out.records.iter().filter(|r| r.status == "ok") {
        by_rep.insert((r.replication, r.method.as_str()), r);
    }
    let mut notes = Vec::new();
    let mut fail = Vec::new();
    for other in ["ipw_only", "outcome_only", "cbps_scad_static"] {
        let row = out.table.row(other).ok_or(format!("no {other} row"))?;
        let (pb, ob) = (proposed.bias.unwrap_or(f64::NAN).abs(), row.bias.unwrap_or(f64::NAN).abs());
        let (pm, om) = (proposed.mse.unwrap_or(f64::NAN), row.mse.unwrap_or(f64::NAN));
        let (pp, op) = (proposed.pe.unwrap_or(f64::NAN), row.pe.unwrap_or(f64::NAN));
        let wins = (0..cfg.replications)
            .filter(|&r| match (by_rep.get(&(r, "proposed")), by_rep.get(&(r, other))) {
                (Some(a), Some(b)) => matches!((a.pe, b.pe), (Some(x), Some(y)) if x < y),
                _ => false,
            })
            .count();
        notes.push(format!("vs {other}: PE wins {wins}/100"));
        if !(pb < ob) {
            fail.push(format!("|bias| {pb:.4} !< {other} {ob:.4}"));
        }
        if !(pm < om) {
            fail.push(format!("MSE {pm:.4} !< {other} {om:.4}"));
        }
        if !(pp < op) {
            fail.push(format!("PE {pp:.4} !< {other} {op:.4}"));
        }
        if wins < 80 {
            fail.push(format!("paired PE wins vs {other} only {wins}/100"));
        }
    }
    if !out.failures.is_empty() {
        notes.push(format!("{} failed method runs", out.failures.len()));
    }
    ensure(fail.is_empty(), || format!("{} [{}]", fail.join("; "), notes.join(", ")))?;
    Ok(notes.join(", "))
}

fn determinism() -> Outcome {
    let read = || -> Result<Vec<Vec<u8>>, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = ExperimentConfig::quick();
        cfg.output_dir = dir.path().to_path_buf();
        run(&cfg).map_err(|e| e.to_string())?;
        [REPLICATIONS_FILE, METRICS_CSV_FILE]
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string()))
            .collect()
    };
    let (a, b) = (read()?, read()?);
    ensure(a == b, || "CSV outputs differ between identical runs".into())?;
    Ok(format!("replications.csv and metrics.csv identical ({} + {} bytes)", a[0].len(), a[1].len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("EL constraint satisfaction", el_constraints),
        ("EL inner-solver oracle", el_oracle),
        ("SCAD and lambda=0 outcome oracle", scad_and_outcome),
        ("HMM oracle equivalence", hmm_oracle),
        ("double robustness", double_robustness),
        ("coverage calibration", coverage),
        ("MTGCN gradient and realizable fit", mtgcn_checks),
        ("variable selection", variable_selection),
        ("method ordering", ordering),
        ("end-to-end determinism", determinism),
    ];
    let only: Option<Vec<usize>> = std::env::var("STDR_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut lines = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("criterion {id:>2} PASS  {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                format!("criterion {id:>2} FAIL  {name} [{secs:.1}s]: {why}")
            }
        };
        println!("{line}");
        lines.push(line);
    }
    println!("\nacceptance summary");
    for l in &lines {
        println!("{}", l.split(" [").next().unwrap_or(l));
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
