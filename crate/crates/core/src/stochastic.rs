//! The stochastic controlled equation, its truncation by `θ_R`, stopping
//! times, and the mass moment balance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{cutoff, run, run_recorded, RunSpec, SolverOptions, Stepper};
pub use crate::integrator::Scheme;
use crate::model::Equation;
use crate::noise::{IncrementSource, NoiseIncrement, SeedSpec, SeededNoise};
use crate::skeleton::Control;
use crate::spectral::{same_grid, ComplexField, MixedNormAccumulator};
use crate::trajectory::{check_exponents, Trajectory};

/// Truncation of the nonlinearity by `θ_R(x) = θ(x/R)` of the running mixed norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationSpec {
    pub radius: f64,
}

impl TruncationSpec {
    pub fn new(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || radius.is_nan() {
            return Err(Error::param("radius", format!("must be positive, got {radius}")));
        }
        Ok(TruncationSpec { radius })
    }

    pub fn theta(&self, x: f64) -> f64 {
        cutoff(x / self.radius)
    }
}

/// First time the running mixed norm exceeds `level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopReport {
    pub level: f64,
    /// `τ`, or the horizon when the level is never exceeded.
    pub tau: f64,
    pub hit: bool,
}

/// `τ_k` for each level in `levels`, read off the trajectory's cached norms.
pub fn stopping_times(traj: &Trajectory, p: f64, levels: &[f64]) -> Result<Vec<StopReport>> {
    check_exponents(p, traj.r())?;
    let mut acc = MixedNormAccumulator::new(p, traj.dt());
    let running: Vec<f64> = traj
        .h_norms()
        .iter()
        .zip(traj.r_norms())
        .map(|(h, r)| {
            acc.observe(*h, *r);
            acc.value()
        })
        .collect();
    Ok(levels
        .iter()
        .map(|&level| match running.iter().position(|v| *v > level) {
            Some(j) => StopReport {
                level,
                tau: traj.time(j),
                hit: true,
            },
            None => StopReport {
                level,
                tau: traj.horizon(),
                hit: false,
            },
        })
        .collect())
}

/// One split step of the stochastic equation over `[t, t + inc.dt]`.
pub fn step_sde(
    eq: &Equation,
    u: &ComplexField,
    ctrl: &Control,
    t: f64,
    inc: &NoiseIncrement,
    scheme: Scheme,
) -> Result<ComplexField> {
    same_grid(eq.grid(), u.grid())?;
    if inc.dw1.len() != eq.m1() || inc.dw2.len() != eq.m2() {
        return Err(Error::param(
            "increment",
            format!(
                "has ({}, {}) modes, noise model has ({}, {})",
                inc.dw1.len(),
                inc.dw2.len(),
                eq.m1(),
                eq.m2()
            ),
        ));
    }
    let opts = SolverOptions::new(inc.dt, t + inc.dt).with_scheme(scheme);
    ctrl.check_against(eq, t + inc.dt)?;
    let mut stepper = Stepper::new(eq, &opts);
    let mut data = u.data().to_vec();
    stepper.step(&mut data, ctrl, t, Some(inc), 1.0);
    ComplexField::from_vec(*eq.grid(), data).map_err(|_| Error::BlowUp {
        step: 1,
        norm: f64::NAN,
    })
}

/// Solves the stochastic equation driven by `noise`.
pub fn solve_sde(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    opts: &SolverOptions,
    noise: &dyn IncrementSource,
) -> Result<Trajectory> {
    let spec = RunSpec {
        u0,
        ctrl,
        opts,
        noise: Some(noise),
        truncation: None,
        yosida: None,
    };
    Ok(run_recorded(eq, &spec)?.0)
}

/// [`solve_sde`] with increments generated from `seed`.
pub fn solve_sde_seeded(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    opts: &SolverOptions,
    seed: SeedSpec,
) -> Result<Trajectory> {
    solve_sde(eq, u0, ctrl, opts, &SeededNoise::new(seed, opts.dt)?)
}

/// Solves the truncated equation, where the nonlinearity is weighted by
/// `θ_R` of the running mixed norm, and reports `τ_R`.
pub fn solve_truncated(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    opts: &SolverOptions,
    noise: &dyn IncrementSource,
    trunc: &TruncationSpec,
) -> Result<(Trajectory, StopReport)> {
    let spec = RunSpec {
        u0,
        ctrl,
        opts,
        noise: Some(noise),
        truncation: Some(trunc.radius),
        yosida: None,
    };
    let (traj, outcome) = run_recorded(eq, &spec)?;
    let report = match outcome.exceed_step {
        Some(step) => StopReport {
            level: trunc.radius,
            tau: traj.time(step),
            hit: true,
        },
        None => StopReport {
            level: trunc.radius,
            tau: traj.horizon(),
            hit: false,
        },
    };
    Ok((traj, report))
}

/// Monte Carlo check of `d/dt E‖u‖² = −2βE‖u‖² + εE Σ_m‖G_m(u)‖²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassBalance {
    pub n_paths: usize,
    /// Checkpoint times `t_0 < … < t_K`.
    pub times: Vec<f64>,
    /// `E‖u(t_k)‖²`.
    pub mean_mass: Vec<f64>,
    /// Finite difference of `E‖u‖²` over each window.
    pub lhs: Vec<f64>,
    /// Window average of the drift oracle.
    pub rhs: Vec<f64>,
    /// Standard error of `lhs − rhs` per window.
    pub std_err: Vec<f64>,
    /// `|lhs − rhs| / |rhs|` per window (absolute when the drift vanishes).
    pub relative: Vec<f64>,
}

impl MassBalance {
    pub fn max_relative(&self) -> f64 {
        self.relative.iter().copied().fold(0.0, f64::max)
    }
}

/// Runs `n_paths` uncontrolled paths with seeds `(seed_base, 0..n_paths)`
/// and compares the two sides of the mass balance on `windows` equal windows.
pub fn mass_moment_balance(
    eq: &Equation,
    u0: &ComplexField,
    opts: &SolverOptions,
    seed_base: u64,
    n_paths: usize,
    windows: usize,
) -> Result<MassBalance> {
    if n_paths < 100 {
        return Err(Error::param(
            "n_paths",
            format!("need at least 100 paths for a usable estimate, got {n_paths}"),
        ));
    }
    let n = opts.n_steps()?;
    if windows == 0 || n % windows != 0 {
        return Err(Error::param(
            "windows",
            format!("{windows} windows do not divide {n} steps"),
        ));
    }
    let per = n / windows;
    let span = per as f64 * opts.dt;
    let beta = eq.params().beta;
    let eps = eq.params().epsilon;
    let ctrl = Control::none(opts.horizon)?;

    // per path: masses at checkpoints, then the window drift averages
    let rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|path| -> Result<Vec<f64>> {
            let noise = SeededNoise::new(SeedSpec::new(seed_base, path as u64), opts.dt)?;
            let mut row = vec![0.0; 2 * windows + 1];
            let spec = RunSpec {
                u0,
                ctrl: &ctrl,
                opts,
                noise: Some(&noise),
                truncation: None,
                yosida: None,
            };
            run(eq, &spec, &mut |step, u, h, _| {
                let mass = h * h;
                if step % per == 0 {
                    row[step / per] = mass;
                }
                if step < n {
                    let drift = eps * eq.g_hs_norm_sq(u) - 2.0 * beta * mass;
                    row[windows + 1 + step / per] += drift / per as f64;
                }
            })?;
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let np = n_paths as f64;
    let mut mean_mass = vec![0.0; windows + 1];
    for row in &rows {
        for (m, v) in mean_mass.iter_mut().zip(row) {
            *m += v / np;
        }
    }
    let mut lhs = Vec::with_capacity(windows);
    let mut rhs = Vec::with_capacity(windows);
    let mut std_err = Vec::with_capacity(windows);
    let mut relative = Vec::with_capacity(windows);
    let floor = 1e-9 * mean_mass[0].max(f64::MIN_POSITIVE);
    for k in 0..windows {
        let diffs: Vec<f64> = rows
            .iter()
            .map(|row| (row[k + 1] - row[k]) / span - row[windows + 1 + k])
            .collect();
        let l = (mean_mass[k + 1] - mean_mass[k]) / span;
        let r = rows.iter().map(|row| row[windows + 1 + k]).sum::<f64>() / np;
        let mean_diff = diffs.iter().sum::<f64>() / np;
        let var = diffs.iter().map(|d| (d - mean_diff).powi(2)).sum::<f64>() / (np - 1.0);
        lhs.push(l);
        rhs.push(r);
        std_err.push((var / np).sqrt());
        relative.push((l - r).abs() / r.abs().max(floor));
    }
    Ok(MassBalance {
        n_paths,
        times: (0..=windows).map(|k| (k * per) as f64 * opts.dt).collect(),
        mean_mass,
        lhs,
        rhs,
        std_err,
        relative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initial::InitialData;
    use crate::model::{GShape, ModelParams, NoiseModel, Profile};
    use crate::noise::BrownianPath;
    use crate::skeleton::solve_skeleton;
    use crate::spectral::Grid;
    use crate::trajectory::Record;

    fn grid() -> Grid {
        Grid::new(1, 128, 10.0).unwrap()
    }

    fn eq(noise: NoiseModel, beta: f64) -> Equation {
        let params = ModelParams {
            beta,
            ..ModelParams::default()
        };
        Equation::new(grid(), params, noise).unwrap()
    }

    fn b_only() -> NoiseModel {
        NoiseModel {
            g: Vec::new(),
            ..NoiseModel::default()
        }
    }

    fn u0() -> ComplexField {
        InitialData::default().build(grid()).unwrap()
    }

    #[test]
    fn zero_increments_reduce_to_skeleton() {
        let eq = eq(NoiseModel::default(), 0.1);
        let opts = SolverOptions::new(1e-2, 0.5);
        let ctrl = Control::new(4, 4, 2, 0.5, vec![0.2; 8], vec![-0.3; 8]).unwrap();
        let path = BrownianPath::generate(SeedSpec::new(1, 0), 1e-2, 50, 4, 4).unwrap().zeroed();
        let sde = solve_sde(&eq, &u0(), &ctrl, &opts, &path).unwrap();
        let ske = solve_skeleton(&eq, &u0(), &ctrl, &opts).unwrap();
        assert_eq!(sde.terminal(), ske.terminal());

        let inc = NoiseIncrement::zeros(4, 4, 1e-2);
        let one = step_sde(&eq, &u0(), &ctrl, 0.0, &inc, Scheme::Unitary).unwrap();
        let first = solve_skeleton(&eq, &u0(), &ctrl, &SolverOptions::new(1e-2, 1e-2)).unwrap();
        assert_eq!(&one, first.terminal());
    }

    #[test]
    fn zero_noise_model_is_bitwise_skeleton() {
        let silent = NoiseModel {
            b: vec![Profile::bump(0.0, 1.0); 4],
            g: vec![Profile::constant(0.0); 4],
            g_shape: GShape::Saturated,
        };
        let eq = eq(silent, 0.0);
        let opts = SolverOptions::new(1e-2, 1.0);
        let ctrl = Control::zero(4, 4, 1, 1.0).unwrap();
        let sde = solve_sde_seeded(&eq, &u0(), &ctrl, &opts, SeedSpec::new(9, 3)).unwrap();
        let ske = solve_skeleton(&eq, &u0(), &ctrl, &opts).unwrap();
        for (a, b) in sde.fields().iter().zip(ske.fields()) {
            assert_eq!(a, b);
        }
        assert_eq!(sde.seed, Some(SeedSpec::new(9, 3)));
    }

    #[test]
    fn same_seed_same_path() {
        let eq = eq(NoiseModel::default(), 0.0);
        let opts = SolverOptions::new(1e-2, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        let a = solve_sde_seeded(&eq, &u0(), &ctrl, &opts, SeedSpec::new(5, 1)).unwrap();
        let b = solve_sde_seeded(&eq, &u0(), &ctrl, &opts, SeedSpec::new(5, 1)).unwrap();
        let c = solve_sde_seeded(&eq, &u0(), &ctrl, &opts, SeedSpec::new(5, 2)).unwrap();
        assert_eq!(a.fields(), b.fields());
        assert_ne!(a.terminal(), c.terminal());
    }

    #[test]
    fn unitary_mode_conserves_mass_per_step() {
        let eq = eq(b_only(), 0.0);
        let opts = SolverOptions::new(1e-3, 0.2);
        let traj = solve_sde_seeded(&eq, &u0(), &Control::none(0.2).unwrap(), &opts, SeedSpec::new(2, 0)).unwrap();
        let h = traj.h_norms();
        for w in h.windows(2) {
            assert!(((w[1] * w[1]) - (w[0] * w[0])).abs() / (w[0] * w[0]) <= 1e-12);
        }
    }

    #[test]
    fn step_rejects_wrong_increment() {
        let eq = eq(NoiseModel::default(), 0.0);
        let inc = NoiseIncrement::zeros(2, 4, 1e-3);
        let ctrl = Control::none(1.0).unwrap();
        assert!(step_sde(&eq, &u0(), &ctrl, 0.0, &inc, Scheme::Unitary).is_err());
    }

    #[test]
    fn short_noise_path_rejected() {
        let eq = eq(NoiseModel::default(), 0.0);
        let path = BrownianPath::generate(SeedSpec::new(1, 0), 1e-2, 10, 4, 4).unwrap();
        let opts = SolverOptions::new(1e-2, 1.0);
        assert!(solve_sde(&eq, &u0(), &Control::none(1.0).unwrap(), &opts, &path).is_err());
    }

    #[test]
    fn huge_radius_matches_untruncated() {
        let eq = eq(NoiseModel::default(), 0.0);
        let opts = SolverOptions::new(1e-3, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        let noise = SeededNoise::new(SeedSpec::new(11, 0), 1e-3).unwrap();
        let plain = solve_sde(&eq, &u0(), &ctrl, &opts, &noise).unwrap();
        let (trunc, stop) = solve_truncated(&eq, &u0(), &ctrl, &opts, &noise, &TruncationSpec::new(1e6).unwrap()).unwrap();
        assert!(!stop.hit);
        assert_eq!(stop.tau, 1.0);
        assert_eq!(plain.fields(), trunc.fields());
    }

    #[test]
    fn tiny_radius_is_linear_flow() {
        let noise_model = NoiseModel::default();
        let eq = eq(noise_model.clone(), 0.0);
        let linear = Equation::new(
            grid(),
            ModelParams {
                lambda: 0.0,
                ..ModelParams::default()
            },
            noise_model,
        )
        .unwrap();
        let opts = SolverOptions::new(1e-2, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        let noise = SeededNoise::new(SeedSpec::new(4, 4), 1e-2).unwrap();
        let (trunc, stop) = solve_truncated(&eq, &u0(), &ctrl, &opts, &noise, &TruncationSpec::new(1e-9).unwrap()).unwrap();
        assert!(stop.hit);
        assert_eq!(stop.tau, 0.0);
        let lin = solve_sde(&linear, &u0(), &ctrl, &opts, &noise).unwrap();
        assert_eq!(trunc.fields(), lin.fields());
    }

    #[test]
    fn truncated_paths_agree_before_smaller_stopping_time() {
        let eq = eq(NoiseModel::default(), 0.0);
        let opts = SolverOptions::new(1e-3, 1.0);
        let ctrl = Control::none(1.0).unwrap();
        let noise = SeededNoise::new(SeedSpec::new(8, 0), 1e-3).unwrap();
        let plain = solve_sde(&eq, &u0(), &ctrl, &opts, &noise).unwrap();
        let p = eq.pair().p;
        let full = plain.mixed_norm(1.0, p, eq.pair().r).unwrap();
        let (k, n) = (0.9 * full, 1.5 * full);
        let (uk, sk) = solve_truncated(&eq, &u0(), &ctrl, &opts, &noise, &TruncationSpec::new(k).unwrap()).unwrap();
        let (un, sn) = solve_truncated(&eq, &u0(), &ctrl, &opts, &noise, &TruncationSpec::new(n).unwrap()).unwrap();
        assert!(sk.hit && !sn.hit);
        assert!(sk.tau <= sn.tau);
        let upto = (sk.tau / opts.dt).round() as usize;
        for j in 0..=upto {
            assert_eq!(uk.field(j), un.field(j));
            assert_eq!(uk.field(j), plain.field(j));
        }
        let reports = stopping_times(&plain, p, &[0.5 * full, k, n]).unwrap();
        assert_eq!(reports[1].tau, sk.tau);
        assert!(reports[0].tau <= reports[1].tau && reports[1].tau <= reports[2].tau);
        assert!(!reports[2].hit);
    }

    #[test]
    fn mass_balance_rejects_few_paths() {
        let eq = eq(NoiseModel::default(), 0.0);
        let opts = SolverOptions::new(1e-2, 1.0).with_record(Record::Endpoints);
        assert!(mass_moment_balance(&eq, &u0(), &opts, 1, 99, 10).is_err());
    }

    #[test]
    fn mass_balance_conservative_and_damped() {
        let opts = SolverOptions::new(1e-2, 1.0);
        let cons = mass_moment_balance(&eq(b_only(), 0.0), &u0(), &opts, 1, 100, 10).unwrap();
        let m0 = cons.mean_mass[0];
        for m in &cons.mean_mass {
            assert!((m - m0).abs() / m0 < 1e-12);
        }
        let beta = 0.4;
        let damped = mass_moment_balance(&eq(b_only(), beta), &u0(), &opts, 1, 100, 10).unwrap();
        for (t, m) in damped.times.iter().zip(&damped.mean_mass) {
            let expect = (-2.0 * beta * t).exp() * m0;
            assert!((m - expect).abs() <= 3.0 * damped.std_err[0].max(1e-12 * m0));
        }
    }

    #[test]
    fn mass_balance_linear_g() {
        let noise = NoiseModel {
            b: Vec::new(),
            g: vec![Profile::bump(1.0, 2.0), Profile::bump(0.5, 4.0)],
            g_shape: GShape::Linear,
        };
        let mut params = ModelParams::default().with_epsilon(0.5);
        params.beta = 0.0;
        let eq = Equation::new(grid(), params, noise).unwrap();
        let opts = SolverOptions::new(1e-2, 1.0);
        let rep = mass_moment_balance(&eq, &u0(), &opts, 3, 400, 10).unwrap();
        assert!(rep.max_relative() <= 0.05, "{:?}", rep.relative);
        assert!(rep.mean_mass[10] > rep.mean_mass[0]);
    }
}
