//! Initial data families.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{ComplexField, Grid};

/// Smooth, localized initial states. Multi-dimensional grids use the radial
/// profile and carry the wavenumber along the first axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialData {
    /// `a·exp(−|x − c|²/(2w²))·e^{ik·x₁}`.
    Gaussian {
        amplitude: f64,
        width: f64,
        #[serde(default)]
        center: f64,
        #[serde(default)]
        wavenumber: f64,
    },
    /// `a·sech(a(x₁ − c))·e^{ik·x₁}`, the focusing cubic soliton profile in 1D.
    Sech {
        amplitude: f64,
        #[serde(default)]
        center: f64,
        #[serde(default)]
        wavenumber: f64,
    },
    /// The constant `a`.
    Constant { amplitude: f64 },
}

impl Default for InitialData {
    fn default() -> Self {
        InitialData::Gaussian {
            amplitude: 1.0,
            width: 1.0,
            center: 0.0,
            wavenumber: 0.0,
        }
    }
}

impl InitialData {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            InitialData::Gaussian {
                amplitude,
                width,
                center,
                wavenumber,
            } => amplitude.is_finite() && width > 0.0 && width.is_finite() && center.is_finite() && wavenumber.is_finite(),
            InitialData::Sech {
                amplitude,
                center,
                wavenumber,
            } => amplitude.is_finite() && center.is_finite() && wavenumber.is_finite(),
            InitialData::Constant { amplitude } => amplitude.is_finite(),
        };
        if !ok {
            return Err(Error::param("initial", format!("invalid parameters {self:?}")));
        }
        Ok(())
    }

    pub fn build(&self, grid: Grid) -> Result<ComplexField> {
        self.validate()?;
        match *self {
            InitialData::Gaussian {
                amplitude,
                width,
                center,
                wavenumber,
            } => ComplexField::from_fn(grid, |x| {
                let mut r2 = (x[0] - center).powi(2);
                for xi in &x[1..] {
                    r2 += xi * xi;
                }
                Complex64::from_polar(amplitude * (-r2 / (2.0 * width * width)).exp(), wavenumber * x[0])
            }),
            InitialData::Sech {
                amplitude,
                center,
                wavenumber,
            } => ComplexField::from_fn(grid, |x| {
                let s = amplitude * (x[0] - center);
                Complex64::from_polar(amplitude / s.cosh(), wavenumber * x[0])
            }),
            InitialData::Constant { amplitude } => ComplexField::from_fn(grid, |_| Complex64::new(amplitude, 0.0)),
        }
    }
}
