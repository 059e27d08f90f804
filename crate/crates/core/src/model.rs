//! Deterministic operators of the equation
//!
//! ```text
//! du = −[iAu + i𝒩(u) + βu] dt − i√ε B(u)∘dW₁ − i√ε G(u) dW₂
//! ```
//!
//! with `A = −Δ`, `𝒩(u) = λ|u|^{α−1}u`, `B_m u = B_m(x)u` (real multipliers,
//! hence self-adjoint) and `G_m(u) = g_m(x)σ(u)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{same_grid, ComplexField, Grid, Transform};

/// Strichartz-admissible exponents: `2/p = d/2 − d/r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissiblePair {
    pub p: f64,
    pub r: f64,
    pub dim: usize,
}

impl AdmissiblePair {
    pub fn new(dim: usize, r: f64) -> Result<Self> {
        let p = admissible_p(dim, r)?;
        Ok(AdmissiblePair { p, r, dim })
    }

    /// The pair attached to the nonlinearity exponent, `r = α + 1`.
    pub fn for_alpha(dim: usize, alpha: f64) -> Result<Self> {
        Self::new(dim, alpha + 1.0)
    }
}

/// The unique `p` with `2/p = d/2 − d/r`; `r = 2` gives `p = ∞`.
pub fn admissible_p(dim: usize, r: f64) -> Result<f64> {
    let bad = |reason: String| Error::Inadmissible { dim, reason };
    if dim == 0 || dim > 3 {
        return Err(bad("dimension must be 1, 2 or 3".into()));
    }
    if r.is_nan() || r < 2.0 {
        return Err(bad(format!("r = {r} is below 2")));
    }
    let d = dim as f64;
    match dim {
        1 => {}
        2 if r.is_infinite() => return Err(bad("r = ∞ is excluded in two dimensions".into())),
        2 => {}
        _ => {
            let top = 2.0 * d / (d - 2.0);
            if r > top {
                return Err(bad(format!("r = {r} exceeds 2d/(d−2) = {top}")));
            }
        }
    }
    if r == 2.0 {
        return Ok(f64::INFINITY);
    }
    if r.is_infinite() {
        return Ok(4.0 / d);
    }
    Ok(4.0 * r / (d * (r - 2.0)))
}

/// Scalar parameters of the equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    /// Nonlinearity exponent, `1 < α < 1 + 4/d`.
    pub alpha: f64,
    /// `+1` defocusing, `−1` focusing; `0` switches the nonlinearity off.
    pub lambda: f64,
    /// Linear damping, `β ≥ 0`.
    pub beta: f64,
    /// Noise intensity `ε`; ignored by deterministic solves.
    pub epsilon: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            alpha: 3.0,
            lambda: 1.0,
            beta: 0.0,
            epsilon: 0.1,
        }
    }
}

impl ModelParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let upper = 1.0 + 4.0 / dim as f64;
        if !(self.alpha > 1.0 && self.alpha < upper) {
            return Err(Error::param(
                "alpha",
                format!(
                    "must satisfy 1 < alpha < 1 + 4/d = {upper} (subcritical range), got {}",
                    self.alpha
                ),
            ));
        }
        if !self.lambda.is_finite() {
            return Err(Error::param("lambda", "must be finite"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::param("beta", format!("must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(Error::param(
                "epsilon",
                format!("must lie in [0, 1], got {}", self.epsilon),
            ));
        }
        AdmissiblePair::for_alpha(dim, self.alpha)?;
        Ok(())
    }

    /// Builder-style override of `ε`.
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }
}

/// Pointwise `λ|u|^{α−1}u`.
pub fn nonlinearity(f: &ComplexField, params: &ModelParams) -> ComplexField {
    let data = f
        .data()
        .iter()
        .map(|&z| nonlinear_point(z, params.lambda, params.alpha))
        .collect();
    ComplexField::from_vec_unchecked(*f.grid(), data)
}

#[inline]
pub(crate) fn modulus_power(z: Complex64, alpha: f64) -> f64 {
    // |z|^{α−1}; the cubic case avoids a powf
    let s = z.norm_sqr();
    if alpha == 3.0 {
        s
    } else if s == 0.0 {
        0.0
    } else {
        s.powf(0.5 * (alpha - 1.0))
    }
}

#[inline]
fn nonlinear_point(z: Complex64, lambda: f64, alpha: f64) -> Complex64 {
    z * (lambda * modulus_power(z, alpha))
}

/// Shape of the Itô noise nonlinearity `σ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GShape {
    /// `σ(u) = u`.
    Linear,
    /// `σ(u) = u / (1 + |u|²)`, globally Lipschitz with constant 1.
    #[default]
    Saturated,
}

impl GShape {
    /// `σ(u) = u·h(|u|²)`; returns `h`.
    #[inline]
    pub fn gain(self, modulus_sq: f64) -> f64 {
        match self {
            GShape::Linear => 1.0,
            GShape::Saturated => 1.0 / (1.0 + modulus_sq),
        }
    }

    #[inline]
    pub fn sigma(self, z: Complex64) -> Complex64 {
        z * self.gain(z.norm_sqr())
    }

    /// Lipschitz constant of `σ` on ℂ.
    pub fn lipschitz(self) -> f64 {
        1.0
    }
}

/// A real multiplier `c·exp(−|x|²/w²)`, or the constant `c` without a width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub amplitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
}

impl Profile {
    pub fn constant(amplitude: f64) -> Self {
        Profile {
            amplitude,
            width: None,
        }
    }

    pub fn bump(amplitude: f64, width: f64) -> Self {
        Profile {
            amplitude,
            width: Some(width),
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.width {
            None => self.amplitude,
            Some(w) => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                self.amplitude * (-r2 / (w * w)).exp()
            }
        }
    }

    /// `sup_x |profile(x)|`.
    pub fn sup(&self) -> f64 {
        self.amplitude.abs()
    }

    fn validate(&self, key: &'static str) -> Result<()> {
        if !self.amplitude.is_finite() {
            return Err(Error::param(key, "amplitude must be finite"));
        }
        if let Some(w) = self.width {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::param(key, format!("width must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

/// Finite families `{B_m}` and `{g_m}` plus the shape of `σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    #[serde(default)]
    pub b: Vec<Profile>,
    #[serde(default)]
    pub g: Vec<Profile>,
    #[serde(default)]
    pub g_shape: GShape,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::geometric(4, 4)
    }
}

impl NoiseModel {
    /// `c_m = 2^{−m}`, `w_m = 2m` for `m = 1..=M`, saturated `σ`.
    pub fn geometric(m1: usize, m2: usize) -> Self {
        let family = |m: usize| {
            (1..=m)
                .map(|k| Profile::bump(0.5f64.powi(k as i32), 2.0 * k as f64))
                .collect()
        };
        NoiseModel {
            b: family(m1),
            g: family(m2),
            g_shape: GShape::Saturated,
        }
    }

    /// No noise at all.
    pub fn none() -> Self {
        NoiseModel {
            b: Vec::new(),
            g: Vec::new(),
            g_shape: GShape::Linear,
        }
    }

    pub fn m1(&self) -> usize {
        self.b.len()
    }

    pub fn m2(&self) -> usize {
        self.g.len()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.b {
            p.validate("noise.b")?;
        }
        for p in &self.g {
            p.validate("noise.g")?;
        }
        Ok(())
    }

    /// `Σ_m ‖B_m‖²_∞`.
    pub fn b_sup_sq_sum(&self) -> f64 {
        self.b.iter().map(|p| p.sup() * p.sup()).sum()
    }

    /// Hilbert–Schmidt Lipschitz constant: `‖G(u)−G(v)‖ ≤ L_G‖u−v‖_H`.
    pub fn lipschitz_g(&self) -> f64 {
        self.g_shape.lipschitz() * self.g.iter().map(|p| p.sup() * p.sup()).sum::<f64>().sqrt()
    }

    /// Linear-growth constants `(C₁, C₂)` with `‖G(u)‖ ≤ C₁ + C₂‖u‖_H`.
    pub fn growth_constants(&self) -> (f64, f64) {
        (0.0, self.g.iter().map(|p| p.sup() * p.sup()).sum::<f64>().sqrt())
    }

    /// Tail `Σ_{m>M} 4^{−m}` of the geometric family past the kept modes.
    pub fn geometric_tail_bound(m: usize) -> f64 {
        0.25f64.powi(m as i32) / 3.0
    }
}

/// The equation on a concrete grid: parameters, sampled multipliers and the
/// spectral tables every solver needs.
#[derive(Debug, Clone)]
pub struct Equation {
    grid: Grid,
    params: ModelParams,
    noise: NoiseModel,
    pair: AdmissiblePair,
    transform: Transform,
    k2: Vec<f64>,
    b_fields: Vec<Vec<f64>>,
    g_fields: Vec<Vec<f64>>,
    b_sq_sum: Vec<f64>,
}

impl Equation {
    pub fn new(grid: Grid, params: ModelParams, noise: NoiseModel) -> Result<Self> {
        params.validate(grid.dim())?;
        noise.validate()?;
        let pair = AdmissiblePair::for_alpha(grid.dim(), params.alpha)?;
        let points = grid.points();
        let sample = |p: &Profile| -> Vec<f64> {
            points.iter().map(|x| p.eval(&x[..grid.dim()])).collect()
        };
        let b_fields: Vec<Vec<f64>> = noise.b.iter().map(sample).collect();
        let g_fields: Vec<Vec<f64>> = noise.g.iter().map(sample).collect();
        let mut b_sq_sum = vec![0.0; grid.len()];
        for bm in &b_fields {
            for (s, v) in b_sq_sum.iter_mut().zip(bm) {
                *s += v * v;
            }
        }
        Ok(Equation {
            grid,
            params,
            noise,
            pair,
            transform: Transform::new(grid),
            k2: grid.wavenumber_sq(),
            b_fields,
            g_fields,
            b_sq_sum,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn pair(&self) -> AdmissiblePair {
        self.pair
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn k2(&self) -> &[f64] {
        &self.k2
    }

    pub fn b_field(&self, m: usize) -> Result<&[f64]> {
        self.b_fields
            .get(m)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                kind: "B mode",
                index: m,
                len: self.b_fields.len(),
            })
    }

    pub fn g_field(&self, m: usize) -> Result<&[f64]> {
        self.g_fields
            .get(m)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                kind: "G mode",
                index: m,
                len: self.g_fields.len(),
            })
    }

    pub(crate) fn b_fields(&self) -> &[Vec<f64>] {
        &self.b_fields
    }

    pub(crate) fn g_fields(&self) -> &[Vec<f64>] {
        &self.g_fields
    }

    /// `Σ_m B_m(x)²` per grid point.
    pub fn b_sq_sum(&self) -> &[f64] {
        &self.b_sq_sum
    }

    pub fn m1(&self) -> usize {
        self.b_fields.len()
    }

    pub fn m2(&self) -> usize {
        self.g_fields.len()
    }

    /// Same grid and noise, different scalar parameters.
    pub fn with_params(&self, params: ModelParams) -> Result<Self> {
        params.validate(self.grid.dim())?;
        let mut eq = self.clone();
        eq.pair = AdmissiblePair::for_alpha(self.grid.dim(), params.alpha)?;
        eq.params = params;
        Ok(eq)
    }

    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        Equation::new(self.grid, self.params, noise)
    }

    pub(crate) fn scratch(&self) -> Vec<Complex64> {
        vec![Complex64::default(); self.transform.scratch_len()]
    }

    /// `Au = −Δu`, exact spectral symbol `|k|²`.
    pub fn apply_a(&self, f: &ComplexField) -> Result<ComplexField> {
        self.spectral_multiplier(f, |k2| k2)
    }

    /// `J_μ = μ(μ − Δ)^{−1}`, symbol `μ/(μ + |k|²)`.
    pub fn yosida(&self, f: &ComplexField, mu: f64) -> Result<ComplexField> {
        check_mu(mu)?;
        self.spectral_multiplier(f, |k2| mu / (mu + k2))
    }

    pub(crate) fn yosida_in_place(&self, data: &mut [Complex64], mu: f64, scratch: &mut [Complex64]) {
        self.transform.forward_in_place(data, scratch);
        for (z, k2) in data.iter_mut().zip(&self.k2) {
            *z *= mu / (mu + k2);
        }
        self.transform.inverse_in_place(data, scratch);
    }

    fn spectral_multiplier(&self, f: &ComplexField, symbol: impl Fn(f64) -> f64) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        let sym: Vec<f64> = self.k2.iter().map(|&k| symbol(k)).collect();
        let mut data = f.data().to_vec();
        let mut scratch = self.scratch();
        self.transform.apply_symbol(&mut data, &sym, &mut scratch);
        Ok(ComplexField::from_vec_unchecked(self.grid, data))
    }

    /// `λ|u|^{α−1}u` with this equation's parameters.
    pub fn nonlinearity(&self, f: &ComplexField) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        Ok(nonlinearity(f, &self.params))
    }

    /// `B_m u = B_m(x)·u(x)`.
    pub fn apply_b(&self, f: &ComplexField, m: usize) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        let bm = self.b_field(m)?;
        Ok(pointwise(f, |i, z| z * bm[i]))
    }

    /// `Σ_m y_m B_m u`.
    pub fn apply_b_full(&self, f: &ComplexField, y: &[f64]) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        check_coeffs("B coefficients", y.len(), self.m1())?;
        let mult = combine(&self.b_fields, y, self.grid.len());
        Ok(pointwise(f, |i, z| z * mult[i]))
    }

    /// `G_m(u) = g_m(x)·σ(u(x))`.
    pub fn apply_g(&self, f: &ComplexField, m: usize) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        let gm = self.g_field(m)?;
        let shape = self.noise.g_shape;
        Ok(pointwise(f, |i, z| shape.sigma(z) * gm[i]))
    }

    /// `Σ_m y_m G_m(u)`.
    pub fn apply_g_full(&self, f: &ComplexField, y: &[f64]) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        check_coeffs("G coefficients", y.len(), self.m2())?;
        let mult = combine(&self.g_fields, y, self.grid.len());
        let shape = self.noise.g_shape;
        Ok(pointwise(f, |i, z| shape.sigma(z) * mult[i]))
    }

    /// `b(u) = ½ Σ_m B_m² u`.
    pub fn stratonovich_correction(&self, f: &ComplexField) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        Ok(pointwise(f, |i, z| z * (0.5 * self.b_sq_sum[i])))
    }

    /// `Σ_m ‖G_m(u)‖²_H`, the Itô drift of the squared mass.
    pub fn g_hs_norm_sq(&self, u: &[Complex64]) -> f64 {
        let shape = self.noise.g_shape;
        let dx = self.grid.dx();
        let mut total = 0.0;
        for (i, z) in u.iter().enumerate() {
            let s = shape.sigma(*z).norm_sqr();
            let g2: f64 = self.g_fields.iter().map(|g| g[i] * g[i]).sum();
            total += g2 * s;
        }
        total * dx
    }

    /// Zeroes the top third of the spectrum along every axis (2/3 rule).
    pub fn dealias(&self, f: &ComplexField) -> Result<ComplexField> {
        same_grid(&self.grid, f.grid())?;
        let mask = self.dealias_mask();
        let mut data = f.data().to_vec();
        let mut scratch = self.scratch();
        self.transform.apply_symbol(&mut data, &mask, &mut scratch);
        Ok(ComplexField::from_vec_unchecked(self.grid, data))
    }

    pub(crate) fn dealias_mask(&self) -> Vec<f64> {
        let k = self.grid.axis_wavenumbers();
        let kmax = k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = 2.0 / 3.0 * kmax;
        (0..self.grid.len())
            .map(|flat| {
                let idx = self.grid.unravel(flat);
                let keep = (0..self.grid.dim()).all(|a| k[idx[a]].abs() <= cut);
                if keep {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

pub(crate) fn check_mu(mu: f64) -> Result<()> {
    if !(mu.is_finite() && mu > 0.0) {
        return Err(Error::param("mu", format!("must be positive, got {mu}")));
    }
    Ok(())
}

fn check_coeffs(kind: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::IndexOutOfRange {
            kind,
            index: got,
            len: want,
        });
    }
    Ok(())
}

pub(crate) fn combine(fields: &[Vec<f64>], y: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for (f, c) in fields.iter().zip(y) {
        if *c == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += c * v;
        }
    }
    out
}

fn pointwise(f: &ComplexField, op: impl Fn(usize, Complex64) -> Complex64) -> ComplexField {
    let data = f.data().iter().enumerate().map(|(i, &z)| op(i, z)).collect();
    ComplexField::from_vec_unchecked(*f.grid(), data)
}
