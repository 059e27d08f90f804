//! Split-step pseudospectral solvers and rare-event tools for the damped
//! nonlinear Schrödinger equation with multiplicative noise,
//!
//! ```text
//! du = −i(Au + λ|u|^{α−1}u)dt − βu dt − i√ε Σ B_m u ∘ dβ¹_m − i√ε Σ G_m(u) dβ²_m
//! ```
//!
//! on a periodic box, with `A = −Δ`, real multipliers `B_m`, and
//! `G_m(u) = g_m σ(u)`. The `B` noise is Stratonovich, the `G` noise Itô.

pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod initial;
pub mod integrator;
pub mod io;
pub mod ldp;
pub mod mc;
pub mod model;
pub mod noise;
pub mod skeleton;
pub mod spectral;
pub mod stochastic;
pub mod trajectory;

pub use config::RunConfig;
pub use diagnostics::{
    ito_stratonovich_gap, order_of_convergence, strichartz_ratio_survey, weak_convergence_probe, yosida_curve, SolverTag,
    SpectrumPreset,
};
pub use error::{Error, Result};
pub use initial::InitialData;
pub use integrator::{cutoff, Scheme, SolverOptions};
pub use ldp::{
    brute_force_grid, calibration_problem, control_cost, in_d_n, ldp_bounds_probe, minimize_action, ActionOptions, Event,
    EventSpec, Observable, RateResult,
};
pub use mc::{epsilon_sweep, estimate_probability, McSetup, SweepResult, SweepRow};
pub use model::{admissible_p, AdmissiblePair, Equation, GShape, ModelParams, NoiseModel, Profile};
pub use noise::{BrownianPath, IncrementSource, NoiseIncrement, SeedSpec, SeededNoise};
pub use skeleton::{
    choose_t0, picard_iterate, picard_map, solve_skeleton, solve_skeleton_yosida, Control,
};
pub use stochastic::{
    mass_moment_balance, solve_sde, solve_sde_seeded, solve_truncated, step_sde, stopping_times,
    StopReport, TruncationSpec,
};
pub use spectral::{mixed_norm, norm_l2, norm_lr, ComplexField, Grid, SpectralField, Transform};
pub use trajectory::{Record, Trajectory};
