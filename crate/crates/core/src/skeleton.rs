//! The deterministic controlled equation
//! `du = [−iAu − i𝒩(u) − βu − i(B(u)ρ₁ + G(u)ρ₂)]dt`,
//! its Duhamel map and the Yosida-regularized variant.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{run_recorded, RunSpec, SolverOptions};
use crate::model::{check_mu, combine, modulus_power, Equation};
use crate::spectral::{same_grid, ComplexField};
use crate::trajectory::{Record, Trajectory};

/// Piecewise-constant control on `segments` equal subintervals of `[0, T]`.
///
/// Coefficients are stored mode-major: `rho1[m·segments + j]` is the value of
/// mode `m` on segment `j`. A control with no modes acts as the zero control
/// for any equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Control {
    m1: usize,
    m2: usize,
    segments: usize,
    horizon: f64,
    rho1: Vec<f64>,
    rho2: Vec<f64>,
}

impl Control {
    pub fn new(
        m1: usize,
        m2: usize,
        segments: usize,
        horizon: f64,
        rho1: Vec<f64>,
        rho2: Vec<f64>,
    ) -> Result<Self> {
        if segments == 0 {
            return Err(Error::param("segments", "need at least one segment"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", format!("must be positive, got {horizon}")));
        }
        for (want, got) in [(m1 * segments, rho1.len()), (m2 * segments, rho2.len())] {
            if want != got {
                return Err(Error::SizeMismatch {
                    expected: want,
                    actual: got,
                });
            }
        }
        if rho1.iter().chain(&rho2).any(|v| !v.is_finite()) {
            return Err(Error::param("control", "coefficients must be finite"));
        }
        Ok(Control {
            m1,
            m2,
            segments,
            horizon,
            rho1,
            rho2,
        })
    }

    pub fn zero(m1: usize, m2: usize, segments: usize, horizon: f64) -> Result<Self> {
        Control::new(
            m1,
            m2,
            segments,
            horizon,
            vec![0.0; m1 * segments],
            vec![0.0; m2 * segments],
        )
    }

    /// The zero control, valid for any noise model.
    pub fn none(horizon: f64) -> Result<Self> {
        Control::zero(0, 0, 1, horizon)
    }

    /// Time-independent coefficients on a single segment.
    pub fn constant(horizon: f64, rho1: &[f64], rho2: &[f64]) -> Result<Self> {
        Control::new(rho1.len(), rho2.len(), 1, horizon, rho1.to_vec(), rho2.to_vec())
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn segment_length(&self) -> f64 {
        self.horizon / self.segments as f64
    }

    pub fn rho1(&self, m: usize, segment: usize) -> f64 {
        self.rho1[m * self.segments + segment]
    }

    pub fn rho2(&self, m: usize, segment: usize) -> f64 {
        self.rho2[m * self.segments + segment]
    }

    pub fn rho1_coeffs(&self) -> &[f64] {
        &self.rho1
    }

    pub fn rho2_coeffs(&self) -> &[f64] {
        &self.rho2
    }

    /// All coefficients, `ρ₁` first.
    pub fn coefficients(&self) -> Vec<f64> {
        self.rho1.iter().chain(&self.rho2).copied().collect()
    }

    /// Same shape with new coefficients in the order of [`Control::coefficients`].
    pub fn with_coefficients(&self, coeffs: &[f64]) -> Result<Self> {
        let split = self.rho1.len();
        if coeffs.len() != split + self.rho2.len() {
            return Err(Error::SizeMismatch {
                expected: split + self.rho2.len(),
                actual: coeffs.len(),
            });
        }
        Control::new(
            self.m1,
            self.m2,
            self.segments,
            self.horizon,
            coeffs[..split].to_vec(),
            coeffs[split..].to_vec(),
        )
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.rho1.iter_mut().chain(out.rho2.iter_mut()).for_each(|v| *v *= c);
        out
    }

    /// `½∫₀ᵀ(‖ρ₁‖² + ‖ρ₂‖²)dt`.
    pub fn cost(&self) -> f64 {
        let sq: f64 = self.rho1.iter().chain(&self.rho2).map(|v| v * v).sum();
        0.5 * sq * self.segment_length()
    }

    /// `∫₀ᵀ‖ρ₂(t)‖ dt`, with the Euclidean norm over modes.
    pub fn rho2_l1(&self) -> f64 {
        (0..self.segments)
            .map(|j| {
                (0..self.m2)
                    .map(|m| self.rho2(m, j).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            * self.segment_length()
    }

    /// Time averages of `ρ₁`, `ρ₂` over `[t0, t1]`, written into `out1`, `out2`.
    ///
    /// When the window lies inside one segment the stored values are copied
    /// unchanged.
    pub(crate) fn average_over(&self, t0: f64, t1: f64, out1: &mut [f64], out2: &mut [f64]) {
        if self.m1 == 0 && self.m2 == 0 {
            out1.iter_mut().chain(out2.iter_mut()).for_each(|v| *v = 0.0);
            return;
        }
        let h = self.segment_length();
        let last = self.segments - 1;
        let j0 = ((t0 / h + 1e-9).floor().max(0.0) as usize).min(last);
        let j1 = ((t1 / h - 1e-9).ceil().max(1.0) as usize).min(self.segments);
        if j1 <= j0 + 1 {
            for m in 0..self.m1 {
                out1[m] = self.rho1(m, j0);
            }
            for m in 0..self.m2 {
                out2[m] = self.rho2(m, j0);
            }
            return;
        }
        let width = t1 - t0;
        out1.iter_mut().chain(out2.iter_mut()).for_each(|v| *v = 0.0);
        for j in j0..j1 {
            let a = (j as f64 * h).max(t0);
            let b = ((j + 1) as f64 * h).min(t1);
            let w = (b - a).max(0.0) / width;
            for m in 0..self.m1 {
                out1[m] += w * self.rho1(m, j);
            }
            for m in 0..self.m2 {
                out2[m] += w * self.rho2(m, j);
            }
        }
    }

    /// Checks mode counts against `eq` and that the control covers `horizon`.
    pub(crate) fn check_against(&self, eq: &Equation, horizon: f64) -> Result<()> {
        let empty = self.m1 == 0 && self.m2 == 0;
        if !empty && (self.m1 != eq.m1() || self.m2 != eq.m2()) {
            return Err(Error::param(
                "control",
                format!(
                    "control has ({}, {}) modes, noise model has ({}, {})",
                    self.m1,
                    self.m2,
                    eq.m1(),
                    eq.m2()
                ),
            ));
        }
        if self.horizon < horizon * (1.0 - 1e-12) {
            return Err(Error::HorizonMismatch(format!(
                "control horizon {} shorter than solve horizon {horizon}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Solves the controlled equation with the Strang split-step scheme.
pub fn solve_skeleton(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    let spec = RunSpec {
        u0,
        ctrl,
        opts,
        noise: None,
        truncation: None,
        yosida: None,
    };
    Ok(run_recorded(eq, &spec)?.0)
}

/// Solves the Yosida-approximated equation: `𝒩` and `G` act through
/// `J_μ(·)(J_μ·)` and the initial datum is `J_μu₀`.
pub fn solve_skeleton_yosida(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    opts: &SolverOptions,
    mu: f64,
) -> Result<Trajectory> {
    check_mu(mu)?;
    let spec = RunSpec {
        u0,
        ctrl,
        opts,
        noise: None,
        truncation: None,
        yosida: Some(mu),
    };
    Ok(run_recorded(eq, &spec)?.0)
}

/// Grönwall bound `‖u₀‖² exp(2C₂∫‖ρ₂‖)` on `sup_t ‖u_μ(t)‖²`, uniform in `μ`.
pub fn energy_bound(eq: &Equation, u0: &ComplexField, ctrl: &Control) -> f64 {
    let (_, c2) = eq.noise().growth_constants();
    u0.norm_l2().powi(2) * (2.0 * c2 * ctrl.rho2_l1()).exp()
}

/// `max_t |‖u(t)‖² − ‖u₀‖²| / ‖u₀‖²` for a run driven by `ρ₁` alone.
pub fn conservation_special_case(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    opts: &SolverOptions,
) -> Result<f64> {
    if eq.params().beta != 0.0 {
        return Err(Error::Precondition(format!(
            "mass conservation needs beta = 0, got {}",
            eq.params().beta
        )));
    }
    if ctrl.rho2_coeffs().iter().any(|v| *v != 0.0) {
        return Err(Error::Precondition(
            "mass conservation needs the G control switched off".into(),
        ));
    }
    let m0 = u0.norm_l2().powi(2);
    if m0 == 0.0 {
        return Ok(0.0);
    }
    let opts = opts.with_record(Record::Endpoints);
    let traj = solve_skeleton(eq, u0, ctrl, &opts)?;
    Ok(traj
        .h_norms()
        .iter()
        .map(|h| (h * h - m0).abs() / m0)
        .fold(0.0, f64::max))
}

/// The Duhamel map on the trajectory's time grid:
/// `S(t)u₀ − ∫₀ᵗ S(t−s)[i𝒩(u) + βu + i(B(u)ρ₁ + G(u)ρ₂)](s)ds`
/// with the free group `S` applied exactly and left-endpoint quadrature.
pub fn picard_map(eq: &Equation, u: &Trajectory, u0: &ComplexField, ctrl: &Control) -> Result<Trajectory> {
    same_grid(eq.grid(), u.grid())?;
    same_grid(eq.grid(), u0.grid())?;
    if !u.is_full() {
        return Err(Error::Precondition("Picard map needs a fully recorded trajectory".into()));
    }
    ctrl.check_against(eq, u.horizon())?;
    let dt = u.dt();
    let len = eq.grid().len();
    let params = *eq.params();
    let shape = eq.noise().g_shape;
    let free: Vec<Complex64> = eq
        .k2()
        .iter()
        .map(|&k2| Complex64::new(0.0, -k2 * dt).exp())
        .collect();
    let mut scratch = eq.scratch();
    let mut rho1 = vec![0.0; eq.m1()];
    let mut rho2 = vec![0.0; eq.m2()];

    let mut v = u0.data().to_vec();
    let mut out = vec![ComplexField::from_vec_unchecked(*eq.grid(), v.clone())];
    for (n, un) in u.fields()[..u.n_steps()].iter().enumerate() {
        let t = n as f64 * dt;
        ctrl.average_over(t, t + dt, &mut rho1, &mut rho2);
        let bc = combine(eq.b_fields(), &rho1, len);
        let gc = combine(eq.g_fields(), &rho2, len);
        for (i, (vi, z)) in v.iter_mut().zip(un.data()).enumerate() {
            let phase = params.lambda * modulus_power(*z, params.alpha) * z + bc[i] * z + shape.sigma(*z) * gc[i];
            let f = Complex64::new(-phase.im, phase.re) + params.beta * z;
            *vi -= f * dt;
        }
        let t = eq.transform();
        t.forward_in_place(&mut v, &mut scratch);
        for (z, s) in v.iter_mut().zip(&free) {
            *z *= s;
        }
        t.inverse_in_place(&mut v, &mut scratch);
        out.push(ComplexField::from_vec_unchecked(*eq.grid(), v.clone()));
    }
    Trajectory::from_fields(dt, eq.pair().r, out)
}

/// Outcome of [`choose_t0`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionProbe {
    pub t0: f64,
    pub steps: usize,
    /// Ball radius `M` of `V_{M,T₀}`.
    pub radius: f64,
    /// Largest ratio seen at the accepted `T₀`.
    pub max_ratio: f64,
    /// `(T₀, max ratio)` for every candidate tried.
    pub history: Vec<(f64, f64)>,
}

/// Settings for contraction probing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub radius: f64,
    pub pairs: usize,
    pub seed: u64,
    pub target: f64,
    pub t_max: f64,
}

impl ProbeOptions {
    /// Ball of radius `2‖u₀‖_H + 1`, 20 pairs, target ratio ½.
    pub fn for_data(u0: &ComplexField, t_max: f64) -> Self {
        ProbeOptions {
            radius: 2.0 * u0.norm_l2() + 1.0,
            pairs: 20,
            seed: 7,
            target: 0.5,
            t_max,
        }
    }
}

/// Random element of `V_{M,T}` on `steps` steps of `dt`: a few Gaussian
/// packets with amplitudes affine in time, scaled to mixed norm in `[M/4, M]`.
pub fn random_ball_element(eq: &Equation, radius: f64, steps: usize, dt: f64, rng: &mut impl Rng) -> Result<Trajectory> {
    let grid = *eq.grid();
    let pair = eq.pair();
    let span = 0.3 * grid.half_width();
    let packets: Vec<_> = (0..3)
        .map(|_| {
            let c = rng.random_range(-span..span);
            let w = rng.random_range(0.5..2.0);
            let k = rng.random_range(-2.0..2.0);
            let a = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            (c, w, k, a, b)
        })
        .collect();
    let horizon = steps as f64 * dt;
    let fields = (0..=steps)
        .map(|j| {
            let s = j as f64 * dt / horizon;
            ComplexField::from_fn(grid, |x| {
                packets
                    .iter()
                    .map(|&(c, w, k, a, b)| {
                        let r2: f64 = (x[0] - c).powi(2) + x[1..].iter().map(|v| v * v).sum::<f64>();
                        (a + b * s) * Complex64::from_polar((-r2 / (2.0 * w * w)).exp(), k * x[0])
                    })
                    .sum()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let traj = Trajectory::from_fields(dt, pair.r, fields)?;
    let norm = traj.mixed_norm(horizon, pair.p, pair.r)?;
    let target = radius * rng.random_range(0.25..1.0);
    let scale = Complex64::new(target / norm, 0.0);
    let scaled = traj.fields().iter().map(|f| f.scaled(scale)).collect();
    Trajectory::from_fields(dt, pair.r, scaled)
}

/// `‖𝔗u₁ − 𝔗u₂‖ / ‖u₁ − u₂‖` in the mixed norm of the equation's pair.
pub fn contraction_ratio(
    eq: &Equation,
    u1: &Trajectory,
    u2: &Trajectory,
    u0: &ComplexField,
    ctrl: &Control,
) -> Result<f64> {
    let pair = eq.pair();
    let denom = u1.distance(u2, pair.p, pair.r)?;
    if denom == 0.0 {
        return Ok(0.0);
    }
    let t1 = picard_map(eq, u1, u0, ctrl)?;
    let t2 = picard_map(eq, u2, u0, ctrl)?;
    Ok(t1.distance(&t2, pair.p, pair.r)? / denom)
}

/// Halves `T₀` from `t_max` until the largest contraction ratio over random
/// pairs in `V_{M,T₀}` is at most the target.
pub fn choose_t0(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    dt: f64,
    probe: &ProbeOptions,
) -> Result<ContractionProbe> {
    if probe.pairs == 0 {
        return Err(Error::param("pairs", "need at least one probe pair"));
    }
    let mut steps = SolverOptions::new(dt, probe.t_max).n_steps()?;
    let mut history = Vec::new();
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
        let mut worst: f64 = 0.0;
        for _ in 0..probe.pairs {
            let u1 = random_ball_element(eq, probe.radius, steps, dt, &mut rng)?;
            let u2 = random_ball_element(eq, probe.radius, steps, dt, &mut rng)?;
            worst = worst.max(contraction_ratio(eq, &u1, &u2, u0, ctrl)?);
        }
        let t0 = steps as f64 * dt;
        history.push((t0, worst));
        if worst <= probe.target {
            return Ok(ContractionProbe {
                t0,
                steps,
                radius: probe.radius,
                max_ratio: worst,
                history,
            });
        }
        if steps == 1 {
            return Err(Error::NonContraction { ratio: worst });
        }
        steps /= 2;
    }
}

/// Result of [`picard_iterate`].
#[derive(Debug, Clone)]
pub struct PicardReport {
    pub trajectory: Trajectory,
    pub iterations: usize,
    /// `‖u^{k+1} − u^k‖` for each iteration.
    pub residuals: Vec<f64>,
    /// Successive residual ratios.
    pub ratios: Vec<f64>,
}

impl PicardReport {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(0.0)
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }
}

/// Fixed-point iteration of [`picard_map`] on `[0, T₀]` from the constant path `u₀`.
pub fn picard_iterate(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    dt: f64,
    t0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PicardReport> {
    let steps = SolverOptions::new(dt, t0).n_steps()?;
    let pair = eq.pair();
    let mut u = Trajectory::from_fields(dt, pair.r, vec![u0.clone(); steps + 1])?;
    let mut residuals: Vec<f64> = Vec::new();
    let mut ratios = Vec::new();
    for k in 1..=max_iter {
        let next = picard_map(eq, &u, u0, ctrl)?;
        let res = next.distance(&u, pair.p, pair.r)?;
        if let Some(prev) = residuals.last() {
            if *prev > 0.0 {
                let ratio = res / prev;
                if ratio >= 1.0 {
                    return Err(Error::NonContraction { ratio });
                }
                ratios.push(ratio);
            }
        }
        residuals.push(res);
        u = next;
        if res < tol {
            return Ok(PicardReport {
                trajectory: u,
                iterations: k,
                residuals,
                ratios,
            });
        }
    }
    Err(Error::Precondition(format!(
        "Picard iteration did not reach tolerance {tol} in {max_iter} iterations (residual {})",
        residuals.last().copied().unwrap_or(f64::NAN)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initial::InitialData;
    use crate::model::{ModelParams, NoiseModel};
    use crate::spectral::Grid;

    fn params(lambda: f64, beta: f64) -> ModelParams {
        ModelParams {
            lambda,
            beta,
            ..ModelParams::default()
        }
    }

    fn default_eq() -> Equation {
        Equation::new(Grid::default_1d(), ModelParams::default(), NoiseModel::default()).unwrap()
    }

    fn u0(grid: Grid) -> ComplexField {
        InitialData::default().build(grid).unwrap()
    }

    #[test]
    fn control_cost_and_average() {
        let c = Control::constant(2.0, &[3.0], &[]).unwrap();
        assert!((c.cost() - 9.0).abs() < 1e-15);
        let c = Control::new(1, 1, 4, 1.0, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (mut a, mut b) = ([0.0], [0.0]);
        c.average_over(0.0, 0.1, &mut a, &mut b);
        assert_eq!((a[0], b[0]), (1.0, 0.0));
        c.average_over(0.2, 0.3, &mut a, &mut b);
        assert!((a[0] - 1.5).abs() < 1e-12 && (b[0] - 0.0).abs() < 1e-15);
        c.average_over(0.45, 0.55, &mut a, &mut b);
        assert!((a[0] - 2.5).abs() < 1e-12 && (b[0] - 0.5).abs() < 1e-12);
        c.average_over(0.75, 1.0, &mut a, &mut b);
        assert_eq!((a[0], b[0]), (4.0, 1.0));
        assert!(Control::new(1, 0, 2, 1.0, vec![1.0], vec![]).is_err());
    }

    #[test]
    fn free_gaussian_matches_closed_form() {
        let grid = Grid::default_1d();
        let eq = Equation::new(grid, params(0.0, 0.0), NoiseModel::none()).unwrap();
        let s2 = 1.0;
        let k0 = 0.5;
        let u0 = ComplexField::from_fn(grid, |x| Complex64::from_polar((-x[0] * x[0] / (2.0 * s2)).exp(), k0 * x[0])).unwrap();
        let t = 1.0;
        let traj = solve_skeleton(&eq, &u0, &Control::none(t).unwrap(), &SolverOptions::new(1e-2, t)).unwrap();
        // ∂_t u = i∂²_x u: the variance becomes s² + 2it and the packet moves at 2k₀
        let var = Complex64::new(s2, 2.0 * t);
        let exact = ComplexField::from_fn(grid, |x| {
            let y = x[0] - 2.0 * k0 * t;
            (Complex64::new(s2, 0.0) / var).sqrt()
                * (-y * y / (2.0 * var) + Complex64::new(0.0, k0 * x[0] - k0 * k0 * t)).exp()
        })
        .unwrap();
        let err = traj.terminal().sub(&exact).unwrap().norm_l2() / exact.norm_l2();
        assert!(err < 1e-4, "relative error {err}");
        let m0 = u0.norm_l2();
        for h in traj.h_norms() {
            assert!((h - m0).abs() / m0 < 1e-12);
        }
    }

    #[test]
    fn damping_factor() {
        let grid = Grid::default_1d();
        let beta = 0.3;
        let eq = Equation::new(grid, params(0.0, beta), NoiseModel::none()).unwrap();
        let u0 = u0(grid);
        let traj = solve_skeleton(&eq, &u0, &Control::none(1.0).unwrap(), &SolverOptions::new(1e-2, 1.0)).unwrap();
        for (j, h) in traj.h_norms().iter().enumerate() {
            let expect = (-beta * traj.time(j)).exp() * u0.norm_l2();
            assert!((h - expect).abs() / expect < 1e-10);
        }
    }

    #[test]
    fn nonlinear_mass_conservation() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let opts = SolverOptions::new(1e-3, 1.0);
        let traj = solve_skeleton(&eq, &u0, &Control::none(1.0).unwrap(), &opts).unwrap();
        let m0 = u0.norm_l2();
        let drift = traj.h_norms().iter().map(|h| (h - m0).abs() / m0).fold(0.0, f64::max);
        assert!(drift < 1e-10, "drift {drift}");
        assert!(traj.cached_norm_error().unwrap() < 1e-14);
    }

    #[test]
    fn conservation_with_b_control() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let opts = SolverOptions::new(1e-3, 1.0);
        let zero = Control::zero(4, 4, 16, 1.0).unwrap();
        assert!(conservation_special_case(&eq, &u0, &zero, &opts).unwrap() <= 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rho1: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = Control::new(4, 4, 16, 1.0, rho1.clone(), vec![0.0; 64]).unwrap();
        // normalize into 𝔻₁: ∫‖ρ₁‖² = 1
        let scale = (1.0 / (2.0 * c.cost())).sqrt();
        rho1.iter_mut().for_each(|v| *v *= scale);
        let c = Control::new(4, 4, 16, 1.0, rho1, vec![0.0; 64]).unwrap();
        assert!((2.0 * c.cost() - 1.0).abs() < 1e-12);
        assert!(conservation_special_case(&eq, &u0, &c, &opts).unwrap() <= 1e-10);
        assert!(conservation_special_case(&eq, &u0, &c.scaled(10.0), &opts).unwrap() <= 1e-10);

        let g_on = Control::new(4, 4, 16, 1.0, vec![0.0; 64], vec![0.1; 64]).unwrap();
        assert!(conservation_special_case(&eq, &u0, &g_on, &opts).is_err());
        let damped = eq.with_params(params(1.0, 0.1)).unwrap();
        assert!(conservation_special_case(&damped, &u0, &zero, &opts).is_err());
    }

    #[test]
    fn second_order_self_convergence() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let ctrl = Control::new(4, 4, 4, 1.0, vec![0.3; 16], vec![0.2; 16]).unwrap();
        let terminal = |dt: f64| {
            solve_skeleton(&eq, &u0, &ctrl, &SolverOptions::new(dt, 1.0).with_record(Record::Endpoints))
                .unwrap()
                .terminal()
                .clone()
        };
        let reference = terminal(2.5e-3 / 4.0);
        let e1 = terminal(5e-3).sub(&reference).unwrap().norm_l2();
        let e2 = terminal(2.5e-3).sub(&reference).unwrap().norm_l2();
        let factor = e1 / e2;
        assert!((3.5..=4.5).contains(&factor), "factor {factor}");
    }

    #[test]
    fn rejects_short_control_and_mode_mismatch() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let opts = SolverOptions::new(1e-2, 1.0);
        let short = Control::zero(4, 4, 1, 0.5).unwrap();
        assert!(matches!(solve_skeleton(&eq, &u0, &short, &opts), Err(Error::HorizonMismatch(_))));
        let wrong = Control::zero(2, 4, 1, 1.0).unwrap();
        assert!(solve_skeleton(&eq, &u0, &wrong, &opts).is_err());
    }

    #[test]
    fn focusing_blow_up_is_reported() {
        let grid = Grid::new(1, 64, 4.0).unwrap();
        let eq = Equation::new(grid, params(-1.0, 0.0), NoiseModel::none()).unwrap();
        let u0 = ComplexField::from_fn(grid, |_| Complex64::new(1e200, 0.0)).unwrap();
        let err = solve_skeleton(&eq, &u0, &Control::none(1.0).unwrap(), &SolverOptions::new(0.5, 1.0));
        assert!(matches!(err, Err(Error::BlowUp { step: 1, .. })), "{err:?}");
    }

    #[test]
    fn continuous_dependence_on_controls() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let opts = SolverOptions::new(5e-3, 1.0);
        let base: Vec<f64> = (0..64).map(|i| 0.5 * ((i as f64) * 0.7).sin()).collect();
        let limit = Control::new(4, 4, 8, 1.0, base[..32].to_vec(), base[32..].to_vec()).unwrap();
        let u = solve_skeleton(&eq, &u0, &limit, &opts).unwrap();
        let pair = eq.pair();
        let mut prev = f64::INFINITY;
        for n in 1..=5 {
            let bump: Vec<f64> = (0..64).map(|i| ((i * 13 % 7) as f64 - 3.0) / (4.0 * (1 << n) as f64)).collect();
            let coeffs: Vec<f64> = base.iter().zip(&bump).map(|(a, b)| a + b).collect();
            let rho_n = limit.with_coefficients(&coeffs).unwrap();
            let d = solve_skeleton(&eq, &u0, &rho_n, &opts).unwrap().distance(&u, pair.p, pair.r).unwrap();
            assert!(d < prev, "n={n}: {d} !< {prev}");
            prev = d;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn picard_map_is_free_flow_without_forcing() {
        let grid = Grid::default_1d();
        let eq = Equation::new(grid, params(0.0, 0.0), NoiseModel::none()).unwrap();
        let u0 = u0(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let junk = random_ball_element(&eq, 3.0, 20, 1e-2, &mut rng).unwrap();
        let mapped = picard_map(&eq, &junk, &u0, &Control::none(0.2).unwrap()).unwrap();
        let free = solve_skeleton(&eq, &u0, &Control::none(0.2).unwrap(), &SolverOptions::new(1e-2, 0.2)).unwrap();
        let pair = eq.pair();
        assert!(mapped.distance(&free, pair.p, pair.r).unwrap() < 1e-12);
    }

    #[test]
    fn solver_output_is_near_fixed_point() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let dt = 1e-3;
        let ctrl = Control::new(4, 4, 2, 0.1, vec![0.4; 8], vec![0.4; 8]).unwrap();
        let u = solve_skeleton(&eq, &u0, &ctrl, &SolverOptions::new(dt, 0.1)).unwrap();
        let pair = eq.pair();
        let res = picard_map(&eq, &u, &u0, &ctrl).unwrap().distance(&u, pair.p, pair.r).unwrap();
        assert!(res <= 10.0 * dt, "residual {res}");
    }

    #[test]
    fn trivial_picard_iteration() {
        let eq = default_eq();
        let zero = ComplexField::zeros(*eq.grid());
        let rep = picard_iterate(&eq, &zero, &Control::none(0.1).unwrap(), 1e-2, 0.1, 1e-12, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.final_residual(), 0.0);
    }

    #[test]
    fn picard_contraction_and_agreement() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let dt = 1e-3;
        let ctrl = Control::zero(4, 4, 1, 1.0).unwrap();
        let probe = choose_t0(&eq, &u0, &ctrl, dt, &ProbeOptions::for_data(&u0, 0.256)).unwrap();
        assert!(probe.max_ratio <= 0.5);
        let rep = picard_iterate(&eq, &u0, &ctrl, dt, probe.t0, 1e-12, 100).unwrap();
        assert!(rep.max_ratio() <= 0.6, "ratios {:?}", rep.ratios);
        let direct = solve_skeleton(&eq, &u0, &ctrl, &SolverOptions::new(dt, probe.t0)).unwrap();
        let pair = eq.pair();
        let gap = rep.trajectory.distance(&direct, pair.p, pair.r).unwrap();
        assert!(gap <= 20.0 * dt, "gap {gap}");
    }

    #[test]
    fn picard_reports_non_contraction() {
        let grid = Grid::new(1, 64, 10.0).unwrap();
        let eq = Equation::new(grid, params(1.0, 0.0), NoiseModel::none()).unwrap();
        let big = InitialData::Gaussian {
            amplitude: 6.0,
            width: 1.0,
            center: 0.0,
            wavenumber: 0.0,
        }
        .build(grid)
        .unwrap();
        let err = picard_iterate(&eq, &big, &Control::none(1.0).unwrap(), 1e-2, 1.0, 1e-12, 50);
        assert!(matches!(err, Err(Error::NonContraction { ratio }) if ratio >= 1.0), "{err:?}");
    }

    #[test]
    fn yosida_limit_and_energy_bound() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let ctrl = Control::new(4, 4, 4, 1.0, vec![0.3; 16], vec![0.5; 16]).unwrap();
        let opts = SolverOptions::new(5e-3, 1.0);
        let u = solve_skeleton(&eq, &u0, &ctrl, &opts).unwrap();
        let pair = eq.pair();
        let bound = energy_bound(&eq, &u0, &ctrl);
        let mut prev = f64::INFINITY;
        for mu in [1e1, 1e2, 1e3, 1e4] {
            let um = solve_skeleton_yosida(&eq, &u0, &ctrl, &opts, mu).unwrap();
            let d = um.distance(&u, pair.p, pair.r).unwrap();
            assert!(d < prev, "mu={mu}: {d}");
            prev = d;
            let sup = um.h_norms().iter().fold(0.0f64, |m, h| m.max(h * h));
            assert!(sup <= bound, "mu={mu}: {sup} > {bound}");
        }
        assert!(prev <= 1e-3, "{prev}");
        assert!(solve_skeleton_yosida(&eq, &u0, &ctrl, &opts, 0.0).is_err());
    }

    #[test]
    fn double_yosida_smoothing_is_stable() {
        let eq = default_eq();
        let u0 = u0(*eq.grid());
        let ctrl = Control::none(1.0).unwrap();
        let opts = SolverOptions::new(5e-3, 1.0);
        let u = solve_skeleton(&eq, &u0, &ctrl, &opts).unwrap();
        let pair = eq.pair();
        let once = solve_skeleton_yosida(&eq, &u0, &ctrl, &opts, 1e4).unwrap();
        let smoothed = eq.yosida(&u0, 1e4).unwrap();
        let twice = solve_skeleton_yosida(&eq, &smoothed, &ctrl, &opts, 1e4).unwrap();
        let e1 = once.distance(&u, pair.p, pair.r).unwrap();
        let e2 = twice.distance(&u, pair.p, pair.r).unwrap();
        assert!(e2 <= 2.0 * e1 + 1e-15, "{e2} vs {e1}");
    }
}
