//! Rate-function tools: control cost, `𝔻_N` membership, terminal events and
//! a penalty/quasi-Newton minimum-action solver.
//!
//! The cost returned by [`minimize_action`] is the cost of a control whose
//! skeleton solution realizes the event, so it is an upper bound on the
//! infimum; nothing here certifies the infimum itself.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::SolverOptions;
use crate::mc::SweepResult;
use crate::model::{Equation, GShape, ModelParams, NoiseModel, Profile};
use crate::skeleton::{solve_skeleton, Control};
use crate::spectral::{same_grid, ComplexField, Grid};
use crate::trajectory::{Record, Trajectory};

/// A scalar functional of the terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    /// `‖u‖²_H`.
    Mass,
    /// `max_x |u(x)|`.
    MaxAmplitude,
    /// `|û_j|` for a lattice mode `j`.
    ModeModulus { mode: Vec<isize> },
}

impl Observable {
    pub fn eval(&self, u: &ComplexField) -> Result<f64> {
        Ok(match self {
            Observable::Mass => u.norm_l2().powi(2),
            Observable::MaxAmplitude => u.data().iter().map(|z| z.norm()).fold(0.0, f64::max),
            Observable::ModeModulus { mode } => {
                let idx = u.grid().mode_index(mode)?;
                let s = crate::spectral::to_spectrum(u)?;
                s.data()[idx].norm()
            }
        })
    }
}

/// Sets of terminal states.
#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    /// `‖u(T) − center‖_H ≥ radius`.
    BallExit { center: ComplexField, radius: f64 },
    /// `‖u(T) − target‖_H ≤ tolerance`.
    Target { target: ComplexField, tolerance: f64 },
    /// `observable(u(T)) ≥ level` when `above`, `≤ level` otherwise.
    Threshold {
        observable: Observable,
        level: f64,
        above: bool,
    },
}

/// An event together with the horizon at which it is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSpec {
    pub event: Event,
    pub horizon: f64,
}

impl EventSpec {
    pub fn new(event: Event, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", format!("must be positive, got {horizon}")));
        }
        match &event {
            Event::BallExit { radius: v, .. } | Event::Target { tolerance: v, .. } => {
                if !(v.is_finite() && *v >= 0.0) {
                    return Err(Error::param("event", format!("radius/tolerance must be ≥ 0, got {v}")));
                }
            }
            Event::Threshold { level, .. } => {
                if level.is_nan() {
                    return Err(Error::param("event", "threshold level is NaN"));
                }
            }
        }
        Ok(EventSpec { event, horizon })
    }

    /// Distance to the event set in the event's own units; zero iff the
    /// terminal state realizes the event.
    pub fn residual(&self, terminal: &ComplexField) -> Result<f64> {
        Ok(match &self.event {
            Event::BallExit { center, radius } => {
                same_grid(center.grid(), terminal.grid())?;
                (radius - terminal.sub(center)?.norm_l2()).max(0.0)
            }
            Event::Target { target, tolerance } => {
                same_grid(target.grid(), terminal.grid())?;
                (terminal.sub(target)?.norm_l2() - tolerance).max(0.0)
            }
            Event::Threshold {
                observable,
                level,
                above,
            } => {
                let v = observable.eval(terminal)?;
                if *above {
                    (level - v).max(0.0)
                } else {
                    (v - level).max(0.0)
                }
            }
        })
    }

    pub fn occurs_at(&self, terminal: &ComplexField) -> Result<bool> {
        Ok(self.residual(terminal)? == 0.0)
    }

    /// Indicator on a trajectory whose horizon matches the event's.
    pub fn occurs(&self, traj: &Trajectory) -> Result<bool> {
        if (traj.horizon() - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::HorizonMismatch(format!(
                "trajectory horizon {} vs event horizon {}",
                traj.horizon(),
                self.horizon
            )));
        }
        self.occurs_at(traj.terminal())
    }
}

/// `½∫₀ᵀ(‖ρ₁‖² + ‖ρ₂‖²)dt`.
pub fn control_cost(ctrl: &Control) -> f64 {
    ctrl.cost()
}

/// `∫‖ρ₁‖² + ∫‖ρ₂‖² ≤ N`.
pub fn in_d_n(ctrl: &Control, n: f64) -> bool {
    2.0 * ctrl.cost() <= n
}

/// One outer (penalty) round of the optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub kappa: f64,
    pub iterations: usize,
    pub objective: f64,
    pub cost: f64,
    pub residual: f64,
    pub grad_norm: f64,
}

/// Output of [`minimize_action`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateResult {
    pub control: Control,
    /// `½∫‖ρ*‖²`, an upper bound on the rate when `feasible`.
    pub cost: f64,
    pub feasible: bool,
    /// Event residual of the returned control (0 when feasible).
    pub residual: f64,
    /// `Some(false)` when a budget was given and the control exceeds it.
    pub within_budget: Option<bool>,
    pub trace: Vec<TraceEntry>,
    pub evaluations: usize,
}

/// Settings for [`minimize_action`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionOptions {
    pub segments: usize,
    pub dt: f64,
    pub kappa0: f64,
    pub kappa_factor: f64,
    pub rounds: usize,
    pub max_iter: usize,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Feasibility tolerance on the event residual.
    pub tol: f64,
    /// Scale of the deterministic random starting control.
    pub init_scale: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Optional budget `N` for `𝔻_N`.
    pub budget: Option<f64>,
}

impl Default for ActionOptions {
    fn default() -> Self {
        ActionOptions {
            segments: 16,
            dt: 1e-3,
            kappa0: 10.0,
            kappa_factor: 10.0,
            rounds: 5,
            max_iter: 200,
            fd_step: 1e-4,
            tol: 1e-6,
            init_scale: 0.1,
            seed: 0,
            restarts: 1,
            budget: None,
        }
    }
}

struct Problem<'a> {
    eq: &'a Equation,
    u0: &'a ComplexField,
    event: &'a EventSpec,
    shape: Control,
    opts: SolverOptions,
}

impl Problem<'_> {
    fn control(&self, x: &[f64]) -> Control {
        self.shape.with_coefficients(x).expect("shape is fixed")
    }

    /// Event residual, or `None` on a failed solve.
    fn residual(&self, x: &[f64]) -> Option<f64> {
        let ctrl = self.control(x);
        let traj = solve_skeleton(self.eq, self.u0, &ctrl, &self.opts).ok()?;
        self.event.residual(traj.terminal()).ok()
    }

    fn objective(&self, x: &[f64], kappa: f64) -> f64 {
        match self.residual(x) {
            Some(r) => self.control(x).cost() + kappa * r * r,
            None => f64::INFINITY,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fd_gradient(f: &(dyn Fn(&[f64]) -> f64 + Sync), x: &[f64], rel: f64, evals: &mut usize) -> Vec<f64> {
    let rms = (dot(x, x) / x.len().max(1) as f64).sqrt();
    let h = rel * rms.max(1.0);
    let grad = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut xp = x.to_vec();
            xp[i] += h;
            let fp = f(&xp);
            xp[i] -= 2.0 * h;
            let fm = f(&xp);
            (fp - fm) / (2.0 * h)
        })
        .collect();
    *evals += 2 * x.len();
    grad
}

struct BfgsOutcome {
    x: Vec<f64>,
    fx: f64,
    grad_norm: f64,
    iterations: usize,
}

fn bfgs(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    x0: Vec<f64>,
    max_iter: usize,
    fd_step: f64,
    evals: &mut usize,
) -> BfgsOutcome {
    let n = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    *evals += 1;
    let mut g = fd_gradient(f, &x, fd_step, evals);
    let mut hinv: Vec<f64> = identity(n);
    let mut first = true;
    let mut iterations = 0;
    while iterations < max_iter {
        let gnorm = dot(&g, &g).sqrt();
        if !fx.is_finite() || gnorm <= 1e-10 * fx.abs().max(1.0) {
            break;
        }
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&hinv[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            hinv = identity(n);
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let ft = f(&xt);
            *evals += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                accepted = Some((xt, ft));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        let Some((xn, fnew)) = accepted else { break };
        let gn = fd_gradient(f, &xn, fd_step, evals);
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                let scale = ys / dot(&y, &y);
                hinv.iter_mut().for_each(|v| *v *= scale);
                first = false;
            }
            bfgs_update(&mut hinv, &s, &y, ys);
        }
        let progress = (fx - fnew).abs() <= 1e-15 * fx.abs().max(1e-300);
        x = xn;
        fx = fnew;
        g = gn;
        if progress && dot(&s, &s).sqrt() <= 1e-12 * dot(&x, &x).sqrt().max(1.0) {
            break;
        }
    }
    BfgsOutcome {
        grad_norm: dot(&g, &g).sqrt(),
        x,
        fx,
        iterations,
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// `H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ` with `ρ = 1/yᵀs`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], ys: f64) {
    let n = s.len();
    let rho = 1.0 / ys;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Penalty-method minimum-action search over piecewise-constant controls.
///
/// Minimizes `½∫‖ρ‖² + κ·residual²` with BFGS and central-difference
/// gradients, multiplying `κ` each round until the residual drops below
/// `tol`. A remaining small residual is removed by scaling the control up
/// radially (bisection on the smallest feasible factor), so a feasible result
/// always realizes the event exactly.
pub fn minimize_action(
    eq: &Equation,
    u0: &ComplexField,
    event: &EventSpec,
    opts: &ActionOptions,
) -> Result<RateResult> {
    if opts.segments == 0 || opts.rounds == 0 {
        return Err(Error::param("segments", "need at least one segment and one round"));
    }
    let solver = SolverOptions::new(opts.dt, event.horizon).with_record(Record::Endpoints);
    solver.n_steps()?;
    let shape = Control::zero(eq.m1(), eq.m2(), opts.segments, event.horizon)?;
    let dim = shape.coefficients().len();
    let problem = Problem {
        eq,
        u0,
        event,
        shape: shape.clone(),
        opts: solver,
    };
    let mut evaluations = 1;
    let r0 = problem
        .residual(&vec![0.0; dim])
        .ok_or_else(|| Error::Precondition("uncontrolled skeleton solve failed".into()))?;
    if r0 == 0.0 || dim == 0 {
        return Ok(RateResult {
            control: shape,
            cost: 0.0,
            feasible: r0 == 0.0,
            residual: r0,
            within_budget: opts.budget.map(|_| true),
            trace: Vec::new(),
            evaluations,
        });
    }

    let mut candidates = Vec::new();
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(restart as u64));
        let mut x: Vec<f64> = (0..dim).map(|_| opts.init_scale * rng.random_range(-1.0..1.0)).collect();
        let mut trace = Vec::new();
        let mut kappa = opts.kappa0;
        for round in 0..opts.rounds {
            let f = |y: &[f64]| problem.objective(y, kappa);
            let out = bfgs(&f, x, opts.max_iter, opts.fd_step, &mut evaluations);
            x = out.x;
            let residual = problem.residual(&x).unwrap_or(f64::INFINITY);
            evaluations += 1;
            trace.push(TraceEntry {
                round,
                kappa,
                iterations: out.iterations,
                objective: out.fx,
                cost: problem.control(&x).cost(),
                residual,
                grad_norm: out.grad_norm,
            });
            if residual < opts.tol {
                break;
            }
            kappa *= opts.kappa_factor;
        }
        let (x, residual) = restore(&problem, x, &mut evaluations);
        candidates.push((x, residual, trace));
    }

    // feasible first, then smallest cost, then lexicographic coefficients
    candidates.sort_by(|a, b| {
        let ca = problem.control(&a.0).cost();
        let cb = problem.control(&b.0).cost();
        (a.1 > 0.0)
            .cmp(&(b.1 > 0.0))
            .then(if a.1 > 0.0 { a.1.total_cmp(&b.1) } else { ca.total_cmp(&cb) })
            .then_with(|| {
                a.0.iter()
                    .zip(&b.0)
                    .map(|(p, q)| p.total_cmp(q))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    let (x, residual, trace) = candidates.swap_remove(0);
    let control = problem.control(&x);
    let cost = control.cost();
    Ok(RateResult {
        within_budget: opts.budget.map(|n| in_d_n(&control, n)),
        control,
        cost,
        feasible: residual == 0.0,
        residual,
        trace,
        evaluations,
    })
}

/// Scales `x` by the smallest factor in `[1, 8]` that realizes the event.
fn restore(problem: &Problem<'_>, x: Vec<f64>, evals: &mut usize) -> (Vec<f64>, f64) {
    let scaled = |s: f64| x.iter().map(|v| v * s).collect::<Vec<_>>();
    let res = |s: f64, evals: &mut usize| {
        *evals += 1;
        problem.residual(&scaled(s)).unwrap_or(f64::INFINITY)
    };
    let r1 = res(1.0, evals);
    if r1 == 0.0 {
        return (x, 0.0);
    }
    let mut hi = None;
    for s in [1.001, 1.01, 1.1, 1.5, 2.0, 4.0, 8.0] {
        if res(s, evals) == 0.0 {
            hi = Some(s);
            break;
        }
    }
    let Some(mut hi) = hi else { return (x, r1) };
    let mut lo = 1.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if res(mid, evals) == 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (scaled(hi), 0.0)
}

/// Settings for [`brute_force_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearchOptions {
    pub segments: usize,
    /// Points per coefficient on each level.
    pub points: usize,
    /// Coefficients range over `[−range, range]` on the first level.
    pub range: f64,
    /// Each further level searches `±2` cells around the previous best.
    pub levels: usize,
    pub dt: f64,
}

impl Default for GridSearchOptions {
    fn default() -> Self {
        GridSearchOptions {
            segments: 3,
            points: 21,
            range: 3.0,
            levels: 3,
            dt: 1e-2,
        }
    }
}

/// Result of [`brute_force_grid`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub control: Option<Control>,
    pub cost: f64,
    pub evaluations: usize,
}

/// Exhaustive search over piecewise-constant controls on a tensor grid,
/// refined level by level around the cheapest feasible point.
pub fn brute_force_grid(
    eq: &Equation,
    u0: &ComplexField,
    event: &EventSpec,
    opts: &GridSearchOptions,
) -> Result<GridSearchResult> {
    let shape = Control::zero(eq.m1(), eq.m2(), opts.segments, event.horizon)?;
    let dim = shape.coefficients().len();
    if opts.points < 2 || opts.levels == 0 {
        return Err(Error::param("points", "need at least 2 points and 1 level"));
    }
    let total = (opts.points as f64).powi(dim as i32);
    if total > 2e6 {
        return Err(Error::param(
            "points",
            format!("{total} grid points per level is too many for exhaustive search"),
        ));
    }
    let problem = Problem {
        eq,
        u0,
        event,
        shape,
        opts: SolverOptions::new(opts.dt, event.horizon).with_record(Record::Endpoints),
    };
    problem.opts.n_steps()?;
    let mut center = vec![0.0; dim];
    let mut half = opts.range;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut evaluations = 0;
    for _ in 0..opts.levels {
        let step = 2.0 * half / (opts.points - 1) as f64;
        let count = opts.points.pow(dim as u32);
        let level_best = (0..count)
            .into_par_iter()
            .filter_map(|mut k| {
                let x: Vec<f64> = (0..dim)
                    .map(|i| {
                        let j = k % opts.points;
                        k /= opts.points;
                        center[i] - half + step * j as f64
                    })
                    .collect();
                (problem.residual(&x)? == 0.0).then(|| (problem.control(&x).cost(), x))
            })
            .min_by(|a, b| {
                a.0.total_cmp(&b.0).then_with(|| {
                    a.1.iter()
                        .zip(&b.1)
                        .map(|(p, q)| p.total_cmp(q))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
            });
        evaluations += count;
        let Some(found) = level_best else { break };
        center = found.1.clone();
        half = 2.0 * step;
        if best.as_ref().is_none_or(|b| found.0 <= b.0) {
            best = Some(found);
        }
    }
    Ok(match best {
        Some((cost, x)) => GridSearchResult {
            control: Some(problem.control(&x)),
            cost,
            evaluations,
        },
        None => GridSearchResult {
            control: None,
            cost: f64::INFINITY,
            evaluations,
        },
    })
}

/// Gap between `−ε log p̂(ε)` and `I*` on one sweep row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapRow {
    pub epsilon: f64,
    pub eps_log_p: Option<f64>,
    /// `−ε log p̂ − I*`.
    pub gap: Option<f64>,
    /// `|gap| / I*`.
    pub relative_gap: Option<f64>,
    /// Range of `−ε log p` over the Wilson interval.
    pub band: Option<(f64, f64)>,
}

/// Output of [`ldp_bounds_probe`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub i_star: f64,
    pub rows: Vec<GapRow>,
    /// `|gap|` strictly shrinks as `ε` decreases over uncensored rows.
    pub decreasing: bool,
    /// Each step either shrinks `|gap|` or stays within the interval bands.
    pub consistent: bool,
}

/// Compares an ε-sweep against the rate `I*`.
pub fn ldp_bounds_probe(i_star: f64, table: &SweepResult) -> Result<BoundsReport> {
    if table.rows.is_empty() {
        return Err(Error::Precondition("sweep table has no rows".into()));
    }
    let mut rows: Vec<GapRow> = table
        .rows
        .iter()
        .map(|row| {
            let gap = row.eps_log_p.map(|v| v - i_star);
            let band = if row.hits > 0 {
                let lo = -row.epsilon * row.ci_hi.ln() + 0.0;
                let hi = -row.epsilon * row.ci_lo.ln() + 0.0;
                Some((lo, hi))
            } else {
                None
            };
            GapRow {
                epsilon: row.epsilon,
                eps_log_p: row.eps_log_p,
                gap,
                relative_gap: gap.map(|g| if i_star > 0.0 { g.abs() / i_star } else { g.abs() }),
                band,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    let live: Vec<&GapRow> = rows.iter().filter(|r| r.gap.is_some()).collect();
    let mut decreasing = live.len() >= 2;
    let mut consistent = true;
    for w in live.windows(2) {
        let (a, b) = (w[0].gap.unwrap().abs(), w[1].gap.unwrap().abs());
        if b >= a {
            decreasing = false;
            let (alo, ahi) = w[0].band.unwrap();
            let (blo, bhi) = w[1].band.unwrap();
            if !(blo <= ahi && alo <= bhi) {
                consistent = false;
            }
        }
    }
    Ok(BoundsReport {
        i_star,
        rows,
        decreasing,
        consistent,
    })
}

/// Which noise family carries the single mode of the calibration problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    B,
    G,
}

/// The single-Fourier-mode linear reduction: `u` spatially constant on a
/// small torus, no nonlinearity, one constant noise coefficient `c`.
/// Any control only rotates the phase, so exiting the ball of radius
/// `2‖u₀‖sin(φ/2)` around the uncontrolled terminal state costs
/// `φ²/(2c²T)`.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub eq: Equation,
    pub u0: ComplexField,
    pub event: EventSpec,
    pub exact_rate: f64,
}

pub fn calibration_problem(gain: f64, phase: f64, horizon: f64, family: Family, n: usize) -> Result<Calibration> {
    if !(phase > 0.0 && phase < std::f64::consts::PI) {
        return Err(Error::param("phase", "must lie in (0, π)"));
    }
    let grid = Grid::new(1, n, std::f64::consts::PI)?;
    let params = ModelParams {
        alpha: 3.0,
        lambda: 0.0,
        beta: 0.0,
        epsilon: 0.1,
    };
    let mode = vec![Profile::constant(gain)];
    let noise = match family {
        Family::B => NoiseModel {
            b: mode,
            g: Vec::new(),
            g_shape: GShape::Linear,
        },
        Family::G => NoiseModel {
            b: Vec::new(),
            g: mode,
            g_shape: GShape::Linear,
        },
    };
    let eq = Equation::new(grid, params, noise)?;
    let u0 = ComplexField::from_fn(grid, |_| Complex64::new(1.0, 0.0))?;
    let radius = u0.norm_l2() * 2.0 * (0.5 * phase).sin();
    let event = EventSpec::new(
        Event::BallExit {
            center: u0.clone(),
            radius,
        },
        horizon,
    )?;
    Ok(Calibration {
        eq,
        u0,
        event,
        exact_rate: phase * phase / (2.0 * gain * gain * horizon),
    })
}
