//! Time-indexed solution paths with cached per-step norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::SeedSpec;
use crate::spectral::{check_space_exponent, l2_raw, lr_raw, same_grid, ComplexField, Grid};

/// How much of a path a solver keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Record {
    /// Every step's field.
    #[default]
    Full,
    /// Only the initial and terminal fields; norms are still kept per step.
    Endpoints,
}

/// A solution path on the uniform time grid `t_j = j·dt`, `j = 0..=N`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: Grid,
    dt: f64,
    r: f64,
    fields: Vec<ComplexField>,
    h_norms: Vec<f64>,
    r_norms: Vec<f64>,
    full: bool,
    /// Seed of the driving noise, when the path is stochastic.
    pub seed: Option<SeedSpec>,
}

impl Trajectory {
    /// Builds a fully stored trajectory, computing the cached norms.
    pub fn from_fields(dt: f64, r: f64, fields: Vec<ComplexField>) -> Result<Self> {
        check_space_exponent(r)?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        let first = fields
            .first()
            .ok_or_else(|| Error::Precondition("trajectory needs at least one field".into()))?;
        let grid = *first.grid();
        for f in &fields {
            same_grid(&grid, f.grid())?;
        }
        let dx = grid.dx();
        let h_norms = fields.iter().map(|f| l2_raw(f.data(), dx)).collect();
        let r_norms = fields.iter().map(|f| lr_raw(f.data(), dx, r)).collect();
        Ok(Trajectory {
            grid,
            dt,
            r,
            fields,
            h_norms,
            r_norms,
            full: true,
            seed: None,
        })
    }

    pub(crate) fn start(grid: Grid, dt: f64, r: f64, record: Record) -> Self {
        Trajectory {
            grid,
            dt,
            r,
            fields: Vec::new(),
            h_norms: Vec::new(),
            r_norms: Vec::new(),
            full: record == Record::Full,
            seed: None,
        }
    }

    /// Appends a state whose norms were already computed by the solver.
    pub(crate) fn push(&mut self, field: &[num_complex::Complex64], h: f64, r: f64, last: bool) {
        if self.full || self.fields.is_empty() || last {
            self.fields
                .push(ComplexField::from_vec_unchecked(self.grid, field.to_vec()));
        }
        self.h_norms.push(h);
        self.r_norms.push(r);
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Spatial exponent of the cached L^r norms.
    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn n_steps(&self) -> usize {
        self.h_norms.len().saturating_sub(1)
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps() as f64 * self.dt
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.h_norms.len()).map(|j| self.time(j)).collect()
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    /// Stored fields (all steps for [`Record::Full`], endpoints otherwise).
    pub fn fields(&self) -> &[ComplexField] {
        &self.fields
    }

    pub fn field(&self, step: usize) -> Option<&ComplexField> {
        if self.full {
            self.fields.get(step)
        } else if step == 0 {
            self.fields.first()
        } else if step == self.n_steps() {
            self.fields.last()
        } else {
            None
        }
    }

    pub fn initial(&self) -> &ComplexField {
        &self.fields[0]
    }

    pub fn terminal(&self) -> &ComplexField {
        self.fields.last().expect("trajectory is never empty")
    }

    pub fn h_norms(&self) -> &[f64] {
        &self.h_norms
    }

    pub fn r_norms(&self) -> &[f64] {
        &self.r_norms
    }

    /// Largest relative disagreement between cached and recomputed norms.
    pub fn cached_norm_error(&self) -> Result<f64> {
        self.require_full()?;
        let dx = self.grid.dx();
        let mut worst: f64 = 0.0;
        for (j, f) in self.fields.iter().enumerate() {
            let h = l2_raw(f.data(), dx);
            let r = lr_raw(f.data(), dx, self.r);
            worst = worst
                .max(rel(h, self.h_norms[j]))
                .max(rel(r, self.r_norms[j]));
        }
        Ok(worst)
    }

    /// Mixed space-time norm on `[0, t]`; see [`crate::spectral::mixed_norm`].
    pub fn mixed_norm(&self, t: f64, p: f64, r: f64) -> Result<f64> {
        check_exponents(p, r)?;
        let r_norms = if r == self.r {
            self.r_norms.clone()
        } else {
            self.require_full()?;
            let dx = self.grid.dx();
            self.fields.iter().map(|f| lr_raw(f.data(), dx, r)).collect()
        };
        mixed_from_norms(&self.h_norms, &r_norms, self.dt, t, p)
    }

    /// Mixed norm of `self − other` on the full horizon.
    pub fn distance(&self, other: &Trajectory, p: f64, r: f64) -> Result<f64> {
        self.distance_until(other, self.horizon(), p, r)
    }

    pub fn distance_until(&self, other: &Trajectory, t: f64, p: f64, r: f64) -> Result<f64> {
        check_exponents(p, r)?;
        self.require_full()?;
        other.require_full()?;
        same_grid(&self.grid, &other.grid)?;
        if self.n_steps() != other.n_steps() || self.dt != other.dt {
            return Err(Error::HorizonMismatch(format!(
                "{} steps of {} vs {} steps of {}",
                self.n_steps(),
                self.dt,
                other.n_steps(),
                other.dt
            )));
        }
        let dx = self.grid.dx();
        let mut h = Vec::with_capacity(self.fields.len());
        let mut rn = Vec::with_capacity(self.fields.len());
        let mut diff = vec![num_complex::Complex64::default(); self.grid.len()];
        for (a, b) in self.fields.iter().zip(&other.fields) {
            for ((d, x), y) in diff.iter_mut().zip(a.data()).zip(b.data()) {
                *d = x - y;
            }
            h.push(l2_raw(&diff, dx));
            rn.push(lr_raw(&diff, dx, r));
        }
        mixed_from_norms(&h, &rn, self.dt, t, p)
    }

    /// Restriction to the first `steps` steps.
    pub fn truncate(&self, steps: usize) -> Result<Trajectory> {
        self.require_full()?;
        if steps > self.n_steps() {
            return Err(Error::HorizonMismatch(format!(
                "cannot keep {steps} of {} steps",
                self.n_steps()
            )));
        }
        let mut out = self.clone();
        out.fields.truncate(steps + 1);
        out.h_norms.truncate(steps + 1);
        out.r_norms.truncate(steps + 1);
        Ok(out)
    }

    fn require_full(&self) -> Result<()> {
        if !self.full {
            return Err(Error::Precondition(
                "operation needs a fully recorded trajectory".into(),
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_exponents(p: f64, r: f64) -> Result<()> {
    check_space_exponent(r)?;
    if p.is_nan() || p < 1.0 {
        return Err(Error::param("p", format!("must lie in [1, ∞] (got {p})")));
    }
    Ok(())
}

/// Left-endpoint mixed norm from per-step norms, evaluated at arbitrary `t`.
pub(crate) fn mixed_from_norms(h: &[f64], r: &[f64], dt: f64, t: f64, p: f64) -> Result<f64> {
    let horizon = (h.len() - 1) as f64 * dt;
    let slack = 1e-9 * dt;
    if !(t >= -slack && t <= horizon + slack) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    let t = t.clamp(0.0, horizon);
    let last = ((t / dt) + 1e-9).floor() as usize;
    let last = last.min(h.len() - 1);
    let sup_h = h[..=last].iter().copied().fold(0.0, f64::max);
    if p.is_infinite() {
        let sup_r = r[..=last].iter().copied().fold(0.0, f64::max);
        return Ok(sup_h + sup_r);
    }
    let mut integral = 0.0;
    for (j, rn) in r.iter().enumerate() {
        let t0 = j as f64 * dt;
        if t0 >= t - slack {
            break;
        }
        let width = ((j + 1) as f64 * dt).min(t) - t0;
        integral += rn.powf(p) * width;
    }
    Ok(sup_h + integral.powf(1.0 / p))
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
