//! The `diagnose` subcommand: runs the configured suite, one CSV per
//! diagnostic plus `diagnostics.json` with pass/fail against the thresholds.

use std::fmt::Write as _;

use serde_json::{json, Value};

use super::Artifacts;
use crate::config::{Diagnostic, RunConfig};
use crate::diagnostics::{
    control_continuity_probe, ito_stratonovich_gap, order_of_convergence, strichartz_ratio_survey, weak_convergence_probe,
    yosida_curve, SolverTag, SpectrumPreset,
};
use crate::error::Result;
use crate::model::{Equation, ModelParams, NoiseModel};
use crate::noise::SeedSpec;
use crate::skeleton::{choose_t0, picard_iterate, Control, ProbeOptions};
use crate::spectral::{ComplexField, Grid};
use crate::stochastic::{mass_moment_balance, solve_sde_seeded};
use crate::trajectory::Record;

struct Outcome {
    pass: bool,
    csv: String,
    summary: Value,
}

fn constant_control(eq: &Equation, horizon: f64, v1: f64, v2: f64) -> Result<Control> {
    Control::constant(horizon, &vec![v1; eq.m1()], &vec![v2; eq.m2()])
}

pub(super) fn run_suite(cfg: &RunConfig, eq: &Equation, u0: &ComplexField, ctrl: &Control, out: &mut Artifacts<'_>) -> Result<()> {
    let mut results = serde_json::Map::new();
    let mut all = true;
    for &kind in &cfg.diagnostics.suite {
        let name = serde_json::to_value(kind).expect("unit variant").as_str().expect("string").to_string();
        let o = run_one(kind, cfg, eq, u0, ctrl)?;
        eprintln!("{}: {}", name, if o.pass { "PASS" } else { "FAIL" });
        all &= o.pass;
        out.text(&format!("{name}.csv"), &o.csv)?;
        results.insert(name, json!({ "pass": o.pass, "summary": o.summary }));
    }
    out.json("diagnostics.json", &json!({ "all_pass": all, "results": results }))
}

fn run_one(kind: Diagnostic, cfg: &RunConfig, eq: &Equation, u0: &ComplexField, ctrl: &Control) -> Result<Outcome> {
    let d = &cfg.diagnostics;
    let opts = cfg.solver;
    let horizon = opts.horizon;
    let seed = cfg.seed;
    let pair = eq.pair();
    let mut csv = String::new();
    Ok(match kind {
        Diagnostic::Strichartz => {
            csv.push_str("n,preset,sample,ratio\n");
            let mut max_ratio = 0.0f64;
            let mut finite = true;
            let mut worst_refinement = 0.0f64;
            for preset in SpectrumPreset::ALL {
                let mut prev: Option<Vec<f64>> = None;
                for &n in &d.strichartz_grids {
                    let grid = Grid::new(eq.grid().dim(), n, eq.grid().half_width())?;
                    let s = strichartz_ratio_survey(grid, preset, d.strichartz_samples, pair.p, pair.r, horizon, opts.dt, seed)?;
                    for (i, r) in s.ratios.iter().enumerate() {
                        let _ = writeln!(csv, "{n},{preset:?},{i},{r:.16e}");
                    }
                    max_ratio = max_ratio.max(s.max_ratio);
                    finite &= s.finite;
                    if let Some(p) = &prev {
                        for (a, b) in p.iter().zip(&s.ratios) {
                            worst_refinement = worst_refinement.max((a - b).abs() / a);
                        }
                    }
                    prev = Some(s.ratios);
                }
            }
            Outcome {
                pass: finite && max_ratio <= d.strichartz_bound && worst_refinement <= d.strichartz_refinement_tol,
                csv,
                summary: json!({ "p": pair.p, "r": pair.r, "max_ratio": max_ratio, "finite": finite, "worst_refinement_change": worst_refinement }),
            }
        }
        Diagnostic::ItoGap => {
            let b_only = eq.with_noise(NoiseModel {
                g: Vec::new(),
                ..eq.noise().clone()
            })?;
            let t = ito_stratonovich_gap(&b_only, u0, horizon, &d.gap_dts, d.gap_paths, seed)?;
            csv.push_str("dt,gap,ablated_gap\n");
            for r in &t.rows {
                let _ = writeln!(csv, "{:.16e},{:.16e},{:.16e}", r.dt, r.gap, r.ablated_gap);
            }
            let slope_ok = t.slope.is_some_and(|s| (s - 1.0).abs() <= d.gap_slope_tol);
            let plateau_ok = t.plateau_ratio.is_some_and(|r| r > d.gap_ablation_factor);
            Outcome {
                pass: slope_ok && plateau_ok,
                csv,
                summary: json!({ "slope": t.slope, "plateau_ratio": t.plateau_ratio }),
            }
        }
        Diagnostic::Order => {
            let sk = order_of_convergence(eq, u0, ctrl, &opts, SolverTag::Skeleton, &d.order_skeleton_dts, 1, seed)?;
            let st = order_of_convergence(eq, u0, ctrl, &opts, SolverTag::Stochastic, &d.order_stochastic_dts, d.order_paths, seed)?;
            csv.push_str("solver,dt,error\n");
            for fit in [&sk, &st] {
                for (dt, e) in fit.dts.iter().zip(&fit.errors) {
                    let _ = writeln!(csv, "{:?},{dt:.16e},{e:.16e}", fit.tag);
                }
            }
            let within = |q: Option<f64>, r: [f64; 2]| q.is_some_and(|q| q >= r[0] && q <= r[1]);
            let sk_ok = sk.skipped || (sk.reliable && within(sk.order, d.skeleton_order));
            let st_ok = st.skipped || (st.reliable && within(st.order, d.stochastic_order));
            Outcome {
                pass: sk_ok && st_ok,
                csv,
                summary: json!({ "skeleton": sk, "stochastic": st }),
            }
        }
        Diagnostic::Yosida => {
            let c = yosida_curve(eq, u0, ctrl, &opts, &d.yosida_mus)?;
            csv.push_str("mu,distance\n");
            for r in &c.rows {
                let _ = writeln!(csv, "{:.16e},{:.16e}", r.mu, r.distance);
            }
            let last = c.rows.last().map_or(f64::INFINITY, |r| r.distance);
            Outcome {
                pass: c.strictly_decreasing && last <= d.yosida_max,
                csv,
                summary: json!({ "strictly_decreasing": c.strictly_decreasing, "final_distance": last }),
            }
        }
        Diagnostic::Continuity => {
            let rho = constant_control(eq, horizon, d.weak_rho, d.weak_rho)?;
            let pert = constant_control(eq, horizon, d.weak_perturbation, d.weak_perturbation)?;
            let rows = control_continuity_probe(eq, u0, &rho, &pert, &opts, &d.continuity_ns)?;
            csv.push_str("n,cost,distance\n");
            for r in &rows {
                let _ = writeln!(csv, "{},{:.16e},{:.16e}", r.n, r.cost, r.distance);
            }
            let decreasing = rows.windows(2).all(|w| w[1].distance < w[0].distance);
            Outcome {
                pass: decreasing,
                csv,
                summary: json!({ "decreasing": decreasing }),
            }
        }
        Diagnostic::WeakConvergence => {
            let rho = constant_control(eq, horizon, d.weak_rho, d.weak_rho)?;
            let pert = constant_control(eq, horizon, d.weak_perturbation, d.weak_perturbation)?;
            let t = weak_convergence_probe(eq, u0, &rho, &pert, &opts, &d.weak_epsilons, &d.weak_deltas, d.weak_paths, seed)?;
            csv.push_str("epsilon,delta,n_paths,hits,p_hat,ci_lo,ci_hi,mean_distance,failed\n");
            for r in &t.rows {
                let _ = writeln!(
                    csv,
                    "{:.16e},{:.16e},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                    r.row.epsilon, r.delta, r.row.n_paths, r.row.hits, r.row.p_hat, r.row.ci_lo, r.row.ci_hi, r.mean_distance, r.row.failed
                );
            }
            Outcome {
                pass: t.decreasing.iter().all(|(_, ok)| *ok),
                csv,
                summary: json!({ "decreasing": t.decreasing }),
            }
        }
        Diagnostic::Picard => {
            let probe_opts = ProbeOptions {
                pairs: d.picard_pairs,
                seed,
                target: d.contraction_target,
                ..ProbeOptions::for_data(u0, horizon)
            };
            let probe = choose_t0(eq, u0, ctrl, opts.dt, &probe_opts)?;
            let report = picard_iterate(eq, u0, ctrl, opts.dt, probe.t0, 1e-12, 60)?;
            csv.push_str("iteration,residual\n");
            for (i, r) in report.residuals.iter().enumerate() {
                let _ = writeln!(csv, "{},{r:.16e}", i + 1);
            }
            let pass = probe.max_ratio <= d.contraction_target && report.max_ratio() <= d.picard_ratio_max;
            Outcome {
                pass,
                csv,
                summary: json!({ "probe": probe, "iterations": report.iterations, "max_residual_ratio": report.max_ratio() }),
            }
        }
        Diagnostic::MassBalance => {
            let mb = mass_moment_balance(eq, u0, &opts, seed, d.mass_paths as usize, d.mass_windows)?;
            csv.push_str("t_start,t_end,lhs,rhs,std_err,relative\n");
            for k in 0..mb.lhs.len() {
                let _ = writeln!(
                    csv,
                    "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    mb.times[k], mb.times[k + 1], mb.lhs[k], mb.rhs[k], mb.std_err[k], mb.relative[k]
                );
            }
            Outcome {
                pass: mb.max_relative() <= d.mass_tolerance,
                csv,
                summary: json!({ "max_relative": mb.max_relative(), "n_paths": mb.n_paths }),
            }
        }
        Diagnostic::Conservation => {
            // β = 0 and no G: the mass is conserved pathwise for any ρ₁
            let params = ModelParams { beta: 0.0, ..*eq.params() };
            let cons = eq.with_params(params)?.with_noise(NoiseModel {
                g: Vec::new(),
                ..eq.noise().clone()
            })?;
            let m1 = cons.m1();
            let rho = if ctrl.m1() == m1 && m1 > 0 {
                let rho1: Vec<f64> = ctrl.rho1_coeffs().to_vec();
                Control::new(m1, 0, ctrl.segments(), ctrl.horizon(), rho1, Vec::new())?
            } else {
                // ∫‖ρ₁‖² = ¼, inside 𝔻₁
                Control::constant(horizon, &vec![0.5 / (m1.max(1) as f64 * horizon).sqrt(); m1], &[])?
            };
            let o = opts.with_record(Record::Endpoints);
            csv.push_str("path,max_relative_mass_drift\n");
            let mut worst = 0.0f64;
            for i in 0..d.conservation_paths {
                let traj = solve_sde_seeded(&cons, u0, &rho, &o, SeedSpec::new(seed, i))?;
                let h = traj.h_norms();
                let m0 = h[0] * h[0];
                let drift = h.iter().map(|v| (v * v - m0).abs() / m0).fold(0.0, f64::max);
                worst = worst.max(drift);
                let _ = writeln!(csv, "{i},{drift:.16e}");
            }
            Outcome {
                pass: worst <= d.conservation_tolerance,
                csv,
                summary: json!({ "max_relative_mass_drift": worst, "control_cost": rho.cost() }),
            }
        }
    })
}
