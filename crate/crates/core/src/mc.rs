//! Monte Carlo event probabilities over an ε grid.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{run, RunSpec, SolverOptions};
use crate::ldp::EventSpec;
use crate::model::Equation;
use crate::noise::{SeedSpec, SeededNoise};
use crate::skeleton::Control;
use crate::spectral::ComplexField;

/// `z_{0.975}`.
const Z95: f64 = 1.959_963_984_540_054;

pub const CSV_HEADER: &str = "epsilon,n_paths,hits,p_hat,ci_lo,ci_hi,eps_log_p,failed";

/// One ε of a sweep. Failed paths are excluded from `p_hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub n_paths: u64,
    pub hits: u64,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// `−ε log p̂`; `None` (censored) when there are no hits.
    pub eps_log_p: Option<f64>,
    pub failed: u64,
    /// Seconds; not part of the CSV.
    pub wall_time: f64,
}

impl SweepRow {
    pub fn from_counts(epsilon: f64, n_paths: u64, hits: u64, failed: u64, wall_time: f64) -> Self {
        let valid = n_paths - failed;
        let (p_hat, ci_lo, ci_hi) = wilson(hits, valid);
        SweepRow {
            epsilon,
            n_paths,
            hits,
            p_hat,
            ci_lo,
            ci_hi,
            eps_log_p: (hits > 0).then(|| -epsilon * p_hat.ln() + 0.0),
            failed,
            wall_time,
        }
    }

    pub fn censored(&self) -> bool {
        self.hits == 0
    }

    /// Tally of two disjoint path sets at the same ε.
    pub fn merge(&self, other: &SweepRow) -> Result<SweepRow> {
        if self.epsilon != other.epsilon {
            return Err(Error::Precondition(format!(
                "cannot merge rows at ε = {} and ε = {}",
                self.epsilon, other.epsilon
            )));
        }
        Ok(SweepRow::from_counts(
            self.epsilon,
            self.n_paths + other.n_paths,
            self.hits + other.hits,
            self.failed + other.failed,
            self.wall_time + other.wall_time,
        ))
    }

    pub fn csv_line(&self) -> String {
        let elp = match self.eps_log_p {
            Some(v) => format!("{v:.16e}"),
            None => "censored".to_string(),
        };
        format!(
            "{:.16e},{},{},{:.16e},{:.16e},{:.16e},{},{}",
            self.epsilon, self.n_paths, self.hits, self.p_hat, self.ci_lo, self.ci_hi, elp, self.failed
        )
    }
}

/// Wilson score interval at 95%: `(p̂, lo, hi)`.
pub fn wilson(hits: u64, n: u64) -> (f64, f64, f64) {
    if n == 0 {
        return (f64::NAN, 0.0, 1.0);
    }
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if hits == n { 1.0 } else { (center + half).min(1.0) };
    (p, lo.min(p), hi.max(p))
}

/// Rows of an ε-sweep plus any warnings raised while computing them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SweepResult {
    pub fn new(rows: Vec<SweepRow>) -> Self {
        SweepResult {
            rows,
            warnings: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.csv_line());
        }
        out
    }
}

/// Everything fixed across an ε-sweep.
#[derive(Debug, Clone, Copy)]
pub struct McSetup<'a> {
    pub eq: &'a Equation,
    pub u0: &'a ComplexField,
    pub ctrl: &'a Control,
    pub opts: &'a SolverOptions,
    pub event: &'a EventSpec,
}

enum Outcome {
    Hit,
    Miss,
    Failed,
}

/// Estimates the probability over paths `paths` of `(seed_base, i)`.
pub fn estimate_paths(setup: &McSetup<'_>, epsilon: f64, paths: Range<u64>, seed_base: u64) -> Result<(SweepRow, Option<String>)> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::param("epsilon", format!("must lie in (0, 1], got {epsilon}")));
    }
    if paths.is_empty() {
        return Err(Error::param("n_paths", "need at least one path"));
    }
    if (setup.event.horizon - setup.opts.horizon).abs() > 1e-9 * setup.opts.horizon {
        return Err(Error::HorizonMismatch(format!(
            "event horizon {} vs solver horizon {}",
            setup.event.horizon, setup.opts.horizon
        )));
    }
    let params = setup.eq.params().with_epsilon(epsilon);
    let eq = setup.eq.with_params(params)?;
    let start = Instant::now();
    let outcomes: Vec<Result<Outcome>> = paths
        .clone()
        .into_par_iter()
        .map(|i| {
            let noise = SeededNoise::new(SeedSpec::new(seed_base, i), setup.opts.dt)?;
            let spec = RunSpec {
                u0: setup.u0,
                ctrl: setup.ctrl,
                opts: setup.opts,
                noise: Some(&noise),
                truncation: None,
                yosida: None,
            };
            match run(&eq, &spec, &mut |_, _, _, _| {}) {
                Ok(out) => {
                    let terminal = ComplexField::from_vec(*eq.grid(), out.terminal);
                    match terminal {
                        Ok(t) => Ok(if setup.event.occurs_at(&t)? { Outcome::Hit } else { Outcome::Miss }),
                        Err(_) => Ok(Outcome::Failed),
                    }
                }
                Err(Error::BlowUp { .. }) => Ok(Outcome::Failed),
                Err(e) => Err(e),
            }
        })
        .collect();
    let (mut hits, mut failed) = (0u64, 0u64);
    for o in outcomes {
        match o? {
            Outcome::Hit => hits += 1,
            Outcome::Miss => {}
            Outcome::Failed => failed += 1,
        }
    }
    let n = paths.end - paths.start;
    let row = SweepRow::from_counts(epsilon, n, hits, failed, start.elapsed().as_secs_f64());
    let warning = (failed as f64 > 1e-3 * n as f64).then(|| {
        format!("ε = {epsilon}: {failed} of {n} paths blew up and were excluded")
    });
    Ok((row, warning))
}

/// `p̂` over paths `0..n_paths`.
pub fn estimate_probability(setup: &McSetup<'_>, epsilon: f64, n_paths: u64, seed_base: u64) -> Result<SweepRow> {
    Ok(estimate_paths(setup, epsilon, 0..n_paths, seed_base)?.0)
}

/// One row per ε, each over paths `0..n_paths` of `seed_base`. The ε list
/// must be positive and non-increasing.
pub fn epsilon_sweep(setup: &McSetup<'_>, epsilons: &[f64], n_paths: u64, seed_base: u64) -> Result<SweepResult> {
    if epsilons.is_empty() {
        return Err(Error::param("epsilons", "empty ε list"));
    }
    if epsilons.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::param("epsilons", "ε list must be descending"));
    }
    let mut result = SweepResult::default();
    for &eps in epsilons {
        let (row, warning) = estimate_paths(setup, eps, 0..n_paths, seed_base)?;
        if let Some(w) = warning {
            eprintln!("warning: {w}");
            result.warnings.push(w);
        }
        result.rows.push(row);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ldp::{calibration_problem, Event, Family, Observable};
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn wilson_interval_properties() {
        let (p, lo, hi) = wilson(0, 100);
        assert_eq!((p, lo), (0.0, 0.0));
        assert!(hi > 0.0 && hi < 0.05);
        let (p, lo, hi) = wilson(100, 100);
        assert_eq!((p, hi), (1.0, 1.0));
        assert!(lo > 0.95 && lo < 1.0);
        let (p, lo, hi) = wilson(37, 250);
        assert!(lo < p && p < hi);
        // (p + z²/2n ± z√(p(1−p)/n + z²/4n²)) / (1 + z²/n), worked by hand
        assert!((lo - 0.109320).abs() < 1e-6 && (hi - 0.197334).abs() < 1e-6, "{lo} {hi}");
    }

    #[test]
    fn csv_row_and_censoring() {
        let row = SweepRow::from_counts(0.1, 10, 0, 0, 1.0);
        assert!(row.censored());
        assert!(row.csv_line().contains("censored"));
        let row = SweepRow::from_counts(0.1, 10, 5, 0, 1.0);
        assert!((row.eps_log_p.unwrap() - 0.1 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(row.csv_line().split(',').count(), 8);
        let merged = SweepRow::from_counts(0.1, 10, 5, 0, 1.0).merge(&SweepRow::from_counts(0.1, 6, 1, 1, 1.0)).unwrap();
        assert_eq!((merged.n_paths, merged.hits, merged.failed), (16, 6, 1));
        assert!((merged.p_hat - 6.0 / 15.0).abs() < 1e-15);
    }

    fn threshold(level: f64, above: bool) -> Event {
        Event::Threshold {
            observable: Observable::Mass,
            level,
            above,
        }
    }

    #[test]
    fn trivial_events() {
        let cal = calibration_problem(1.0, 1.0, 1.0, Family::B, 8).unwrap();
        let opts = SolverOptions::new(1e-2, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        for (event, expect) in [(threshold(0.0, true), 1.0), (threshold(-1.0, false), 0.0)] {
            let ev = EventSpec::new(event, 1.0).unwrap();
            let setup = McSetup {
                eq: &cal.eq,
                u0: &cal.u0,
                ctrl: &ctrl,
                opts: &opts,
                event: &ev,
            };
            let row = estimate_probability(&setup, 0.1, 200, 1).unwrap();
            assert_eq!(row.p_hat, expect);
            if expect == 1.0 {
                assert_eq!(row.ci_hi, 1.0);
                assert!(row.ci_lo > 0.98);
                assert_eq!(row.eps_log_p, Some(0.0));
            } else {
                assert!(row.censored());
            }
        }
    }

    #[test]
    fn gaussian_phase_oracle() {
        // with a single Stratonovich B mode the terminal phase is exactly −√ε c W_T
        let (c, phase, eps) = (1.0, 0.8, 0.2);
        let cal = calibration_problem(c, phase, 1.0, Family::B, 8).unwrap();
        let opts = SolverOptions::new(1e-2, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        let setup = McSetup {
            eq: &cal.eq,
            u0: &cal.u0,
            ctrl: &ctrl,
            opts: &opts,
            event: &cal.event,
        };
        let n = 20_000;
        let row = estimate_probability(&setup, eps, n, 17).unwrap();
        let exact = 2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(phase / (c * eps.sqrt())));
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((row.p_hat - exact).abs() <= 3.0 * se, "{} vs {exact} (se {se})", row.p_hat);
    }

    #[test]
    fn sweep_determinism_and_merging() {
        let cal = calibration_problem(1.0, 0.8, 1.0, Family::G, 8).unwrap();
        let opts = SolverOptions::new(1e-2, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        let setup = McSetup {
            eq: &cal.eq,
            u0: &cal.u0,
            ctrl: &ctrl,
            opts: &opts,
            event: &cal.event,
        };
        let sweep = epsilon_sweep(&setup, &[0.3, 0.3, 0.1], 400, 5).unwrap();
        assert_eq!(sweep.rows[0].csv_line(), sweep.rows[1].csv_line());
        assert_eq!(sweep.to_csv(), epsilon_sweep(&setup, &[0.3, 0.3, 0.1], 400, 5).unwrap().to_csv());
        let (a, _) = estimate_paths(&setup, 0.3, 0..200, 5).unwrap();
        let (b, _) = estimate_paths(&setup, 0.3, 200..400, 5).unwrap();
        assert_eq!(a.merge(&b).unwrap().hits, sweep.rows[0].hits);
        assert!(epsilon_sweep(&setup, &[0.1, 0.3], 10, 5).is_err());
        assert!(epsilon_sweep(&setup, &[], 10, 5).is_err());
    }

    #[test]
    fn thread_count_does_not_change_tally() {
        let cal = calibration_problem(1.0, 0.8, 1.0, Family::G, 8).unwrap();
        let opts = SolverOptions::new(1e-2, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        let setup = McSetup {
            eq: &cal.eq,
            u0: &cal.u0,
            ctrl: &ctrl,
            opts: &opts,
            event: &cal.event,
        };
        let run_with = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| estimate_probability(&setup, 0.2, 300, 9).unwrap())
        };
        assert_eq!(run_with(1).csv_line(), run_with(3).csv_line());
    }
}
