//! Strang split-step kernel shared by the deterministic and stochastic solvers.
//!
//! One step of size `dt`:
//!
//! 1. half step of the exact linear flow `e^{(−i|k|² − β)dt/2}` in spectrum;
//! 2. pointwise substep: the nonlinearity, the `B` and `G` control terms and
//!    the Stratonovich `B` noise are all real multiples of `−iu`, so together
//!    they are an exact phase rotation; the Itô `G` noise is an
//!    Euler–Maruyama kick;
//! 3. second linear half step.
//!
//! In [`Scheme::ItoLiteral`] the `B` noise is instead integrated from the Itô
//! form with its drift `−εb(u)dt` written out.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{combine, modulus_power, Equation};
use crate::noise::{IncrementSource, NoiseIncrement};
use crate::skeleton::Control;
use crate::spectral::{l2_raw, lr_raw, same_grid, ComplexField, MixedNormAccumulator};
use crate::trajectory::Record;

/// How the `B` noise substep is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Exact unitary phase `e^{−i√ε Σ B_m ΔW_m}`.
    #[default]
    Unitary,
    /// Itô form: `−εb(u)dt − i√εB(u)ΔW` plus the Itô–Milstein term
    /// `−½ε[(ΣB_mΔW_m)² − ΣB_m²dt]u` of the linear multiplicative noise.
    ItoLiteral,
    /// [`Scheme::ItoLiteral`] without the `−εb(u)dt` drift. Only for
    /// demonstrating that the correction matters.
    ItoUncorrected,
}

/// Time grid and storage policy of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub record: Record,
    /// 2/3-rule filter after the pointwise substep.
    #[serde(default)]
    pub dealias: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            dt: 1e-3,
            horizon: 1.0,
            scheme: Scheme::Unitary,
            record: Record::Full,
            dealias: false,
        }
    }
}

impl SolverOptions {
    pub fn new(dt: f64, horizon: f64) -> Self {
        SolverOptions {
            dt,
            horizon,
            ..Default::default()
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_record(mut self, record: Record) -> Self {
        self.record = record;
        self
    }

    /// Number of steps; `horizon` must be an integer multiple of `dt`.
    pub fn n_steps(&self) -> Result<usize> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::param("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::param(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon || n < 1.0 {
            return Err(Error::param(
                "dt",
                format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt),
            ));
        }
        Ok(n as usize)
    }
}

/// Smooth cutoff `θ`: 1 on `[−1, 1]`, 0 outside `(−2, 2)`, monotone between.
pub fn cutoff(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        return 1.0;
    }
    if a >= 2.0 {
        return 0.0;
    }
    let bump = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let up = bump(2.0 - a);
    up / (up + bump(a - 1.0))
}

pub(crate) struct Stepper<'a> {
    eq: &'a Equation,
    dt: f64,
    sqrt_eps: f64,
    epsilon: f64,
    scheme: Scheme,
    half_flow: Vec<Complex64>,
    dealias: Option<Vec<f64>>,
    yosida: Option<f64>,
    scratch: Vec<Complex64>,
    rho1: Vec<f64>,
    rho2: Vec<f64>,
    b_ctrl: Vec<f64>,
    g_ctrl: Vec<f64>,
    b_noise: Vec<f64>,
    g_noise: Vec<f64>,
    work: Vec<Complex64>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(eq: &'a Equation, opts: &SolverOptions) -> Self {
        let beta = eq.params().beta;
        let half = 0.5 * opts.dt;
        let half_flow = eq
            .k2()
            .iter()
            .map(|&k2| Complex64::new(-beta * half, -k2 * half).exp())
            .collect();
        let len = eq.grid().len();
        Stepper {
            eq,
            dt: opts.dt,
            sqrt_eps: eq.params().epsilon.sqrt(),
            epsilon: eq.params().epsilon,
            scheme: opts.scheme,
            half_flow,
            dealias: opts.dealias.then(|| eq.dealias_mask()),
            yosida: None,
            scratch: eq.scratch(),
            rho1: vec![0.0; eq.m1()],
            rho2: vec![0.0; eq.m2()],
            b_ctrl: vec![0.0; len],
            g_ctrl: vec![0.0; len],
            b_noise: vec![0.0; len],
            g_noise: vec![0.0; len],
            work: vec![Complex64::default(); len],
        }
    }

    pub(crate) fn with_yosida(mut self, mu: f64) -> Self {
        self.yosida = Some(mu);
        self
    }

    fn linear_half(&mut self, u: &mut [Complex64]) {
        let t = self.eq.transform();
        t.forward_in_place(u, &mut self.scratch);
        for (z, f) in u.iter_mut().zip(&self.half_flow) {
            *z *= f;
        }
        t.inverse_in_place(u, &mut self.scratch);
    }

    /// Advances `u` over `[t, t + dt]`. `theta` scales the nonlinearity.
    pub(crate) fn step(
        &mut self,
        u: &mut [Complex64],
        ctrl: &Control,
        t: f64,
        noise: Option<&NoiseIncrement>,
        theta: f64,
    ) {
        ctrl.average_over(t, t + self.dt, &mut self.rho1, &mut self.rho2);
        let len = u.len();
        let fill = |dst: &mut Vec<f64>, fields: &[Vec<f64>], y: &[f64]| {
            if y.iter().any(|c| *c != 0.0) {
                *dst = combine(fields, y, len);
                true
            } else {
                false
            }
        };
        let has_b_ctrl = fill(&mut self.b_ctrl, self.eq.b_fields(), &self.rho1);
        let has_g_ctrl = fill(&mut self.g_ctrl, self.eq.g_fields(), &self.rho2);

        self.linear_half(u);

        let lambda = self.eq.params().lambda * theta;
        let alpha = self.eq.params().alpha;
        let shape = self.eq.noise().g_shape;
        let dt = self.dt;

        match self.yosida {
            None => {
                let strat_noise = match (noise, self.scheme) {
                    (Some(inc), Scheme::Unitary) if !inc.dw1.is_empty() => {
                        self.b_noise = combine(self.eq.b_fields(), &inc.dw1, len);
                        true
                    }
                    _ => false,
                };
                for (i, z) in u.iter_mut().enumerate() {
                    let s = z.norm_sqr();
                    let mut phase = lambda * modulus_power(*z, alpha) * dt;
                    if has_b_ctrl {
                        phase += self.b_ctrl[i] * dt;
                    }
                    if has_g_ctrl {
                        phase += self.g_ctrl[i] * shape.gain(s) * dt;
                    }
                    if strat_noise {
                        phase += self.sqrt_eps * self.b_noise[i];
                    }
                    *z *= Complex64::new(0.0, -phase).exp();
                }
            }
            Some(mu) => self.yosida_substep(u, mu, lambda, has_b_ctrl, has_g_ctrl),
        }

        if let Some(inc) = noise {
            if self.scheme != Scheme::Unitary && !inc.dw1.is_empty() {
                self.ito_b_substep(u, inc);
            }
            if !inc.dw2.is_empty() {
                self.g_noise = combine(self.eq.g_fields(), &inc.dw2, len);
                let s = self.sqrt_eps;
                for (z, gw) in u.iter_mut().zip(&self.g_noise) {
                    let kick = shape.sigma(*z) * (s * gw);
                    *z -= Complex64::new(-kick.im, kick.re);
                }
            }
        }

        if let Some(mask) = &self.dealias {
            let t = self.eq.transform();
            t.apply_symbol(u, mask, &mut self.scratch);
        }

        self.linear_half(u);
    }

    fn ito_b_substep(&mut self, u: &mut [Complex64], inc: &NoiseIncrement) {
        let len = u.len();
        let x = combine(self.eq.b_fields(), &inc.dw1, len);
        let a2 = self.eq.b_sq_sum();
        let eps = self.epsilon;
        let s = self.sqrt_eps;
        let dt = self.dt;
        let corrected = self.scheme == Scheme::ItoLiteral;
        for i in 0..len {
            let z = u[i];
            let diffusion = Complex64::new(0.0, -s * x[i]) * z;
            let milstein = z * (-0.5 * eps * (x[i] * x[i] - a2[i] * dt));
            let mut next = z + diffusion + milstein;
            if corrected {
                // −ε b(u) dt with b(u) = ½ Σ B_m² u
                next -= z * (eps * 0.5 * a2[i] * dt);
            }
            u[i] = next;
        }
    }

    /// Pointwise substep with `𝒩` and `G` replaced by `J_μ𝒩(J_μ·)` and
    /// `J_μG(J_μ·)`. The increment of the exact phase flow is smoothed, so the
    /// substep reduces to the plain rotation as `μ → ∞`.
    fn yosida_substep(&mut self, u: &mut [Complex64], mu: f64, lambda: f64, has_b: bool, has_g: bool) {
        let alpha = self.eq.params().alpha;
        let shape = self.eq.noise().g_shape;
        let dt = self.dt;
        self.work.copy_from_slice(u);
        self.eq.yosida_in_place(&mut self.work, mu, &mut self.scratch);
        for (i, v) in self.work.iter_mut().enumerate() {
            let mut phase = lambda * modulus_power(*v, alpha) * dt;
            if has_g {
                phase += self.g_ctrl[i] * shape.gain(v.norm_sqr()) * dt;
            }
            *v *= expm1_imag(-phase);
        }
        self.eq.yosida_in_place(&mut self.work, mu, &mut self.scratch);
        for ((z, w), i) in u.iter_mut().zip(&self.work).zip(0..) {
            *z += w;
            if has_b {
                *z *= Complex64::new(0.0, -self.b_ctrl[i] * dt).exp();
            }
        }
    }
}

/// `e^{ix} − 1`, accurate for small `x`.
fn expm1_imag(x: f64) -> Complex64 {
    let half = (0.5 * x).sin();
    Complex64::new(-2.0 * half * half, x.sin())
}

/// Everything one integration run needs besides the equation.
pub(crate) struct RunSpec<'a> {
    pub u0: &'a ComplexField,
    pub ctrl: &'a Control,
    pub opts: &'a SolverOptions,
    pub noise: Option<&'a dyn IncrementSource>,
    /// Truncation radius `R` for `θ_R(‖u‖_{mixed}(t))`.
    pub truncation: Option<f64>,
    pub yosida: Option<f64>,
}

pub(crate) struct RunOutcome {
    pub terminal: Vec<Complex64>,
    /// First step at which the running mixed norm exceeded the truncation radius.
    pub exceed_step: Option<usize>,
}

/// Drives the stepper and reports `(step, field, ‖u‖_H, ‖u‖_{L^r})` after
/// every state, starting with the initial one.
pub(crate) fn run(
    eq: &Equation,
    spec: &RunSpec<'_>,
    observer: &mut dyn FnMut(usize, &[Complex64], f64, f64),
) -> Result<RunOutcome> {
    same_grid(eq.grid(), spec.u0.grid())?;
    let n = spec.opts.n_steps()?;
    spec.ctrl.check_against(eq, spec.opts.horizon)?;
    if let Some(src) = spec.noise {
        if (src.dt() - spec.opts.dt).abs() > 1e-12 * spec.opts.dt {
            return Err(Error::HorizonMismatch(format!(
                "noise step {} differs from solver step {}",
                src.dt(),
                spec.opts.dt
            )));
        }
        if let Some((steps, m1, m2)) = src.shape() {
            if steps < n {
                return Err(Error::HorizonMismatch(format!(
                    "noise path has {steps} steps, solve needs {n}"
                )));
            }
            if (m1, m2) != (eq.m1(), eq.m2()) {
                return Err(Error::param(
                    "noise",
                    format!(
                        "path has ({m1}, {m2}) modes, noise model has ({}, {})",
                        eq.m1(),
                        eq.m2()
                    ),
                ));
            }
        }
    }
    let mut stepper = Stepper::new(eq, spec.opts);
    if let Some(mu) = spec.yosida {
        stepper = stepper.with_yosida(mu);
    }
    let dx = eq.grid().dx();
    let pair = eq.pair();
    let mut u = spec.u0.data().to_vec();
    if let Some(mu) = spec.yosida {
        let mut scratch = eq.scratch();
        eq.yosida_in_place(&mut u, mu, &mut scratch);
    }
    let mut acc = MixedNormAccumulator::new(pair.p, spec.opts.dt);
    let mut inc = NoiseIncrement::zeros(eq.m1(), eq.m2(), spec.opts.dt);
    let mut exceed_step = None;

    let h = l2_raw(&u, dx);
    let r = lr_raw(&u, dx, pair.r);
    observer(0, &u, h, r);
    acc.observe(h, r);

    for step in 0..n {
        let theta = match spec.truncation {
            Some(radius) => {
                let running = acc.value();
                if exceed_step.is_none() && running > radius {
                    exceed_step = Some(step);
                }
                cutoff(running / radius)
            }
            None => 1.0,
        };
        let t = step as f64 * spec.opts.dt;
        let increment = match spec.noise {
            Some(src) => {
                src.fill(step, &mut inc);
                Some(&inc)
            }
            None => None,
        };
        stepper.step(&mut u, spec.ctrl, t, increment, theta);
        let h = l2_raw(&u, dx);
        if !h.is_finite() {
            return Err(Error::BlowUp {
                step: step + 1,
                norm: h,
            });
        }
        let r = lr_raw(&u, dx, pair.r);
        observer(step + 1, &u, h, r);
        acc.observe(h, r);
    }
    if let Some(radius) = spec.truncation {
        if exceed_step.is_none() && acc.value() > radius {
            exceed_step = Some(n);
        }
    }
    Ok(RunOutcome {
        terminal: u,
        exceed_step,
    })
}

/// Runs and records a [`crate::trajectory::Trajectory`].
pub(crate) fn run_recorded(
    eq: &Equation,
    spec: &RunSpec<'_>,
) -> Result<(crate::trajectory::Trajectory, RunOutcome)> {
    let n = spec.opts.n_steps()?;
    let mut traj = crate::trajectory::Trajectory::start(
        *eq.grid(),
        spec.opts.dt,
        eq.pair().r,
        spec.opts.record,
    );
    traj.seed = spec.noise.and_then(|src| src.seed());
    let outcome = run(eq, spec, &mut |step, u, h, r| {
        traj.push(u, h, r, step == n);
    })?;
    Ok((traj, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_shape() {
        assert_eq!(cutoff(0.0), 1.0);
        assert_eq!(cutoff(1.0), 1.0);
        assert_eq!(cutoff(-1.0), 1.0);
        assert_eq!(cutoff(2.0), 0.0);
        assert_eq!(cutoff(5.0), 0.0);
        let mut prev = 1.0;
        for k in 0..=100 {
            let x = 1.0 + k as f64 / 100.0;
            let v = cutoff(x);
            assert!((0.0..=1.0).contains(&v));
            assert!(v <= prev);
            prev = v;
        }
        assert!((cutoff(1.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn step_count_validation() {
        assert_eq!(SolverOptions::new(1e-3, 1.0).n_steps().unwrap(), 1000);
        assert_eq!(SolverOptions::new(4e-3, 1.0).n_steps().unwrap(), 250);
        assert!(SolverOptions::new(0.3, 1.0).n_steps().is_err());
        assert!(SolverOptions::new(0.0, 1.0).n_steps().is_err());
    }

    #[test]
    fn imaginary_expm1() {
        for x in [1e-9, 1e-3, 0.5, -2.0] {
            let exact = Complex64::new(0.0, x).exp() - 1.0;
            assert!((expm1_imag(x) - exact).norm() < 1e-15);
        }
    }
}
