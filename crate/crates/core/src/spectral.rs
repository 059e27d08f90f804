//! Periodic grids, complex fields on them, the unitary spectral transform and
//! the spatial / space-time norms used throughout the crate.
//!
//! The whole space is replaced by the torus `[-L, L)^d`. All norms carry the
//! cell volume `dx`, so they approach their continuum values under refinement.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

/// Uniform periodic grid on `[-L, L)^d`, row-major with the last axis fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    n: usize,
    half_width: f64,
}

impl Grid {
    pub fn new(dim: usize, n: usize, half_width: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 1, 2 or 3 (got {dim})"
            )));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "points per dimension must be a power of two >= 8 (got {n})"
            )));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "half width must be positive and finite (got {half_width})"
            )));
        }
        Ok(Grid { dim, n, half_width })
    }

    /// The default desk-scale grid: d = 1, n = 256, L = 10π.
    pub fn default_1d() -> Self {
        Grid {
            dim: 1,
            n: 256,
            half_width: 10.0 * PI,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_per_dim(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    /// Cell volume `h^d`.
    pub fn dx(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// 1-D coordinates of one axis.
    pub fn axis_coords(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n)
            .map(|i| -self.half_width + i as f64 * h)
            .collect()
    }

    /// 1-D wavenumbers of one axis in FFT order, `k_j = π j / L`.
    pub fn axis_wavenumbers(&self) -> Vec<f64> {
        let n = self.n as isize;
        let base = PI / self.half_width;
        (0..n)
            .map(|j| {
                let signed = if j < n / 2 { j } else { j - n };
                base * signed as f64
            })
            .collect()
    }

    /// Multi-index of a flat position.
    pub fn unravel(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for axis in (0..self.dim).rev() {
            idx[axis] = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    /// Physical position of every grid point (`dim` coordinates each).
    pub fn points(&self) -> Vec<[f64; 3]> {
        let x = self.axis_coords();
        (0..self.len())
            .map(|flat| {
                let idx = self.unravel(flat);
                let mut p = [0.0; 3];
                for a in 0..self.dim {
                    p[a] = x[idx[a]];
                }
                p
            })
            .collect()
    }

    /// `|k|²` for every spectral index, matching [`Transform`] ordering.
    pub fn wavenumber_sq(&self) -> Vec<f64> {
        let k = self.axis_wavenumbers();
        (0..self.len())
            .map(|flat| {
                let idx = self.unravel(flat);
                (0..self.dim).map(|a| k[idx[a]] * k[idx[a]]).sum()
            })
            .collect()
    }

    /// Flat spectral index of the mode with signed integer wave-vector `j`.
    pub fn mode_index(&self, j: &[isize]) -> Result<usize> {
        if j.len() != self.dim {
            return Err(Error::SizeMismatch {
                expected: self.dim,
                actual: j.len(),
            });
        }
        let n = self.n as isize;
        let mut flat = 0usize;
        for &ja in j {
            if ja < -n / 2 || ja >= n / 2 {
                return Err(Error::IndexOutOfRange {
                    kind: "wave-vector component",
                    index: ja.unsigned_abs(),
                    len: self.n / 2,
                });
            }
            flat = flat * self.n + ja.rem_euclid(n) as usize;
        }
        Ok(flat)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d={} n={} L={}",
            self.dim, self.n, self.half_width
        )
    }
}

/// A complex field sampled on a grid. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    grid: Grid,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn zeros(grid: Grid) -> Self {
        ComplexField {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_vec(grid: Grid, data: Vec<Complex64>) -> Result<Self> {
        check_len(&grid, data.len())?;
        check_finite(&data)?;
        Ok(ComplexField { grid, data })
    }

    /// Samples `f` at every grid point; the closure sees `dim` coordinates.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> Complex64) -> Result<Self> {
        let data = grid
            .points()
            .iter()
            .map(|p| f(&p[..grid.dim]))
            .collect();
        Self::from_vec(grid, data)
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, data: Vec<Complex64>) -> Self {
        debug_assert_eq!(grid.len(), data.len());
        ComplexField { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        let data = self.data.iter().map(|z| z * c).collect();
        ComplexField::from_vec_unchecked(self.grid, data)
    }

    pub fn sub(&self, other: &ComplexField) -> Result<Self> {
        same_grid(&self.grid, &other.grid)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(ComplexField::from_vec_unchecked(self.grid, data))
    }

    pub fn add(&self, other: &ComplexField) -> Result<Self> {
        same_grid(&self.grid, &other.grid)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ComplexField::from_vec_unchecked(self.grid, data))
    }

    /// `⟨self, other⟩ = Σ conj(self)·other·dx`.
    pub fn inner(&self, other: &ComplexField) -> Result<Complex64> {
        same_grid(&self.grid, &other.grid)?;
        Ok(inner_raw(&self.data, &other.data, self.grid.dx()))
    }

    pub fn norm_l2(&self) -> f64 {
        norm_l2(self)
    }

    pub fn norm_lr(&self, r: f64) -> Result<f64> {
        norm_lr(self, r)
    }

    /// Fraction of the squared L² mass sitting in the outer 10% of the box
    /// along any axis. Large values mean the torus wrap-around is felt.
    pub fn outer_shell_mass_fraction(&self) -> f64 {
        let total: f64 = self.data.iter().map(|z| z.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let cut = 0.9 * self.grid.half_width;
        let x = self.grid.axis_coords();
        let shell: f64 = self
            .data
            .iter()
            .enumerate()
            .filter(|(flat, _)| {
                let idx = self.grid.unravel(*flat);
                (0..self.grid.dim).any(|a| x[idx[a]].abs() >= cut)
            })
            .map(|(_, z)| z.norm_sqr())
            .sum();
        shell / total
    }
}

/// Spectral coefficients under the unitary transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    grid: Grid,
    data: Vec<Complex64>,
}

impl SpectralField {
    pub fn from_vec(grid: Grid, data: Vec<Complex64>) -> Result<Self> {
        check_len(&grid, data.len())?;
        check_finite(&data)?;
        Ok(SpectralField { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// `(Σ|ŝ|²·dx)^{1/2}`; equals the physical L² norm by Parseval.
    pub fn norm_l2(&self) -> f64 {
        l2_raw(&self.data, self.grid.dx())
    }
}

/// FFT plans for one grid, normalized to be unitary.
#[derive(Clone)]
pub struct Transform {
    grid: Grid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transform").field("grid", &self.grid).finish()
    }
}

impl Transform {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.n);
        let inverse = planner.plan_fft_inverse(grid.n);
        Transform {
            grid,
            forward,
            inverse,
            scale: 1.0 / (grid.len() as f64).sqrt(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn scratch_len(&self) -> usize {
        self.grid.n
            + self
                .forward
                .get_inplace_scratch_len()
                .max(self.inverse.get_inplace_scratch_len())
    }

    pub fn forward(&self, f: &ComplexField) -> Result<SpectralField> {
        same_grid(&self.grid, &f.grid)?;
        let mut data = f.data.clone();
        let mut scratch = vec![Complex64::default(); self.scratch_len()];
        self.forward_in_place(&mut data, &mut scratch);
        Ok(SpectralField {
            grid: self.grid,
            data,
        })
    }

    pub fn inverse(&self, s: &SpectralField) -> Result<ComplexField> {
        same_grid(&self.grid, &s.grid)?;
        let mut data = s.data.clone();
        let mut scratch = vec![Complex64::default(); self.scratch_len()];
        self.inverse_in_place(&mut data, &mut scratch);
        Ok(ComplexField::from_vec_unchecked(self.grid, data))
    }

    /// In-place unitary forward transform. `scratch` must hold at least
    /// [`Transform::scratch_len`] entries.
    pub fn forward_in_place(&self, data: &mut [Complex64], scratch: &mut [Complex64]) {
        self.apply(&*self.forward, data, scratch);
    }

    pub fn inverse_in_place(&self, data: &mut [Complex64], scratch: &mut [Complex64]) {
        self.apply(&*self.inverse, data, scratch);
    }

    /// Multiplies the spectrum of `data` by a real symbol, in place.
    pub fn apply_symbol(&self, data: &mut [Complex64], symbol: &[f64], scratch: &mut [Complex64]) {
        self.forward_in_place(data, scratch);
        for (z, s) in data.iter_mut().zip(symbol) {
            *z *= s;
        }
        self.inverse_in_place(data, scratch);
    }

    fn apply(&self, fft: &dyn Fft<f64>, data: &mut [Complex64], scratch: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.grid.len());
        let n = self.grid.n;
        let (line, rest) = scratch.split_at_mut(n);
        let fft_scratch = &mut rest[..fft.get_inplace_scratch_len()];
        // last axis: contiguous lines
        for chunk in data.chunks_exact_mut(n) {
            fft.process_with_scratch(chunk, fft_scratch);
        }
        // remaining axes: strided lines
        for axis in 0..self.grid.dim - 1 {
            let stride = n.pow((self.grid.dim - 1 - axis) as u32);
            let block = stride * n;
            for base in (0..data.len()).step_by(block) {
                for offset in 0..stride {
                    for (i, z) in line.iter_mut().enumerate() {
                        *z = data[base + offset + i * stride];
                    }
                    fft.process_with_scratch(line, fft_scratch);
                    for (i, z) in line.iter().enumerate() {
                        data[base + offset + i * stride] = *z;
                    }
                }
            }
        }
        for z in data.iter_mut() {
            *z *= self.scale;
        }
    }
}

/// Unitary forward transform (plans on the fly; reuse a [`Transform`] in loops).
pub fn to_spectrum(f: &ComplexField) -> Result<SpectralField> {
    Transform::new(f.grid).forward(f)
}

pub fn from_spectrum(s: &SpectralField) -> Result<ComplexField> {
    Transform::new(s.grid).inverse(s)
}

pub fn norm_l2(f: &ComplexField) -> f64 {
    l2_raw(&f.data, f.grid.dx())
}

/// Discrete L^r norm, `r ∈ [2, ∞]`.
pub fn norm_lr(f: &ComplexField, r: f64) -> Result<f64> {
    check_space_exponent(r)?;
    Ok(lr_raw(&f.data, f.grid.dx(), r))
}

/// `sup_{s≤t}‖u(s)‖_H + (∫_0^t ‖u(s)‖_{L^r}^p ds)^{1/p}` with left-endpoint
/// rectangles on the trajectory's time grid.
pub fn mixed_norm(traj: &Trajectory, t: f64, p: f64, r: f64) -> Result<f64> {
    traj.mixed_norm(t, p, r)
}

pub(crate) fn check_space_exponent(r: f64) -> Result<()> {
    if r.is_nan() || r < 2.0 {
        return Err(Error::param("r", format!("must lie in [2, ∞] (got {r})")));
    }
    Ok(())
}

pub(crate) fn l2_raw(data: &[Complex64], dx: f64) -> f64 {
    (data.iter().map(|z| z.norm_sqr()).sum::<f64>() * dx).sqrt()
}

pub(crate) fn lr_raw(data: &[Complex64], dx: f64, r: f64) -> f64 {
    if r.is_infinite() {
        return data.iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    if r == 2.0 {
        return l2_raw(data, dx);
    }
    if r == 4.0 {
        let s: f64 = data.iter().map(|z| z.norm_sqr() * z.norm_sqr()).sum();
        return (s * dx).sqrt().sqrt();
    }
    let s: f64 = data.iter().map(|z| z.norm().powf(r)).sum();
    (s * dx).powf(1.0 / r)
}

pub(crate) fn inner_raw(a: &[Complex64], b: &[Complex64], dx: f64) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum::<Complex64>() * dx
}

/// Running value of the mixed norm along a uniformly stepped path.
///
/// After observing states `0..=n` the value is
/// `max_{j≤n} h_j + (Σ_{j<n} r_j^p dt)^{1/p}`; for `p = ∞` the second part
/// is `max_{j≤n} r_j`.
#[derive(Debug, Clone)]
pub struct MixedNormAccumulator {
    p: f64,
    dt: f64,
    sup_h: f64,
    time_part: f64,
    pending: Option<f64>,
}

impl MixedNormAccumulator {
    pub fn new(p: f64, dt: f64) -> Self {
        MixedNormAccumulator {
            p,
            dt,
            sup_h: 0.0,
            time_part: 0.0,
            pending: None,
        }
    }

    /// Registers the next state's H and L^r norms.
    pub fn observe(&mut self, h_norm: f64, r_norm: f64) {
        if self.p.is_infinite() {
            self.time_part = self.time_part.max(r_norm);
        } else if let Some(prev) = self.pending {
            self.time_part += prev.powf(self.p) * self.dt;
        }
        self.pending = Some(r_norm);
        self.sup_h = self.sup_h.max(h_norm);
    }

    pub fn value(&self) -> f64 {
        if self.p.is_infinite() {
            self.sup_h + self.time_part
        } else {
            self.sup_h + self.time_part.powf(1.0 / self.p)
        }
    }
}

fn check_len(grid: &Grid, len: usize) -> Result<()> {
    if grid.len() != len {
        return Err(Error::SizeMismatch {
            expected: grid.len(),
            actual: len,
        });
    }
    Ok(())
}

fn check_finite(data: &[Complex64]) -> Result<()> {
    match data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

pub(crate) fn same_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(Error::SizeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}
