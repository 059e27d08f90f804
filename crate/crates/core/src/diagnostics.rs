//! Numerical monitors: Strichartz ratios of the discrete free flow, the
//! Itô/Stratonovich gap, convergence orders, Yosida curves and the two
//! empirical continuity probes behind the large-deviation limit.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{run, RunSpec, Scheme, SolverOptions};
use crate::mc::SweepRow;
use crate::model::{admissible_p, Equation};
use crate::noise::{BrownianPath, IncrementSource, SeedSpec, SeededNoise};
use crate::skeleton::{solve_skeleton, solve_skeleton_yosida, Control};
use crate::spectral::{l2_raw, lr_raw, ComplexField, Grid, MixedNormAccumulator, Transform};
use crate::trajectory::Record;

/// Least-squares slope of `log y` against `log x`; `None` when fewer than two
/// points are usable.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn check_halving(dts: &[f64], min_len: usize) -> Result<()> {
    if dts.len() < min_len {
        return Err(Error::param("dt_ladder", format!("need at least {min_len} rungs, got {}", dts.len())));
    }
    for w in dts.windows(2) {
        if (w[0] - 2.0 * w[1]).abs() > 1e-9 * w[0] {
            return Err(Error::param("dt_ladder", format!("rungs must halve: {} then {}", w[0], w[1])));
        }
    }
    Ok(())
}

fn steps_for(horizon: f64, dt: f64) -> Result<usize> {
    SolverOptions::new(dt, horizon).n_steps()
}

/// Spectral envelopes of the random test functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumPreset {
    /// `exp(−(|j|/4)²)`.
    Smooth,
    /// `(1 + |j|²)^{−1}`.
    Moderate,
    /// `(1 + |j|)^{−1/2}`.
    Rough,
}

impl SpectrumPreset {
    pub const ALL: [SpectrumPreset; 3] = [SpectrumPreset::Smooth, SpectrumPreset::Moderate, SpectrumPreset::Rough];

    fn envelope(self, j2: f64) -> f64 {
        match self {
            SpectrumPreset::Smooth => (-j2 / 16.0).exp(),
            SpectrumPreset::Moderate => 1.0 / (1.0 + j2),
            SpectrumPreset::Rough => 1.0 / (1.0 + j2.sqrt()).sqrt(),
        }
    }
}

/// Largest lattice index carried by the random test functions.
pub const BAND_LIMIT: isize = 16;

/// A unit-norm band-limited random field. The coefficients depend only on
/// `(preset, seed, sample)` and the lattice index, so the same function is
/// produced on every grid with `n > 2·BAND_LIMIT`.
pub fn band_limited_field(grid: Grid, preset: SpectrumPreset, seed: u64, sample: u64) -> Result<ComplexField> {
    if grid.n_per_dim() <= 2 * BAND_LIMIT as usize {
        return Err(Error::InvalidGrid(format!(
            "band-limited fields need n > {}, got {}",
            2 * BAND_LIMIT,
            grid.n_per_dim()
        )));
    }
    let d = grid.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ sample.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let width = (2 * BAND_LIMIT + 1) as usize;
    let mut spec = vec![Complex64::default(); grid.len()];
    let mut j = vec![0isize; d];
    for flat in 0..width.pow(d as u32) {
        let mut rest = flat;
        for a in (0..d).rev() {
            j[a] = (rest % width) as isize - BAND_LIMIT;
            rest /= width;
        }
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        let j2: f64 = j.iter().map(|v| (v * v) as f64).sum();
        spec[grid.mode_index(&j)?] = Complex64::new(re, im) * preset.envelope(j2);
    }
    let tr = Transform::new(grid);
    let mut scratch = vec![Complex64::default(); tr.scratch_len()];
    tr.inverse_in_place(&mut spec, &mut scratch);
    let norm = l2_raw(&spec, grid.dx());
    spec.iter_mut().for_each(|z| *z /= norm);
    ComplexField::from_vec(grid, spec)
}

fn check_pair(dim: usize, p: f64, r: f64) -> Result<()> {
    let expect = admissible_p(dim, r)?;
    let ok = if expect.is_infinite() {
        p.is_infinite()
    } else {
        (p - expect).abs() <= 1e-12 * expect
    };
    if !ok {
        return Err(Error::Inadmissible {
            dim,
            reason: format!("(p, r) = ({p}, {r}) is not admissible; r = {r} needs p = {expect}"),
        });
    }
    Ok(())
}

/// `‖S(·)φ‖_{L^p(0,T; L^r)} / ‖φ‖_H` with the left-endpoint rule in time.
pub fn strichartz_ratio(phi: &ComplexField, p: f64, r: f64, horizon: f64, dt: f64) -> Result<f64> {
    check_pair(phi.grid().dim(), p, r)?;
    let n = steps_for(horizon, dt)?;
    let grid = *phi.grid();
    let tr = Transform::new(grid);
    let k2 = grid.wavenumber_sq();
    let mut scratch = vec![Complex64::default(); tr.scratch_len()];
    let mut hat = phi.data().to_vec();
    tr.forward_in_place(&mut hat, &mut scratch);
    let mut work = vec![Complex64::default(); grid.len()];
    let mut acc = 0.0f64;
    for j in 0..n {
        let t = j as f64 * dt;
        for ((w, h), k) in work.iter_mut().zip(&hat).zip(&k2) {
            *w = h * Complex64::from_polar(1.0, -k * t);
        }
        tr.inverse_in_place(&mut work, &mut scratch);
        let v = lr_raw(&work, grid.dx(), r);
        if p.is_infinite() {
            acc = acc.max(v);
        } else {
            acc += v.powf(p) * dt;
        }
    }
    let time_norm = if p.is_infinite() { acc } else { acc.powf(1.0 / p) };
    Ok(time_norm / phi.norm_l2())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrichartzSurvey {
    pub n: usize,
    pub preset: SpectrumPreset,
    pub p: f64,
    pub r: f64,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub finite: bool,
}

/// Ratios over `n_samples` random fields of one preset.
pub fn strichartz_ratio_survey(
    grid: Grid,
    preset: SpectrumPreset,
    n_samples: usize,
    p: f64,
    r: f64,
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<StrichartzSurvey> {
    check_pair(grid.dim(), p, r)?;
    if n_samples == 0 {
        return Err(Error::param("n_samples", "need at least one sample"));
    }
    let ratios = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| strichartz_ratio(&band_limited_field(grid, preset, seed, s)?, p, r, horizon, dt))
        .collect::<Result<Vec<f64>>>()?;
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(StrichartzSurvey {
        n: grid.n_per_dim(),
        preset,
        p,
        r,
        finite: ratios.iter().all(|v| v.is_finite()),
        ratios,
        max_ratio,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapRow {
    pub dt: f64,
    /// RMS over paths of `‖u_unitary(T) − u_ito(T)‖_H`.
    pub gap: f64,
    /// Same, with the Itô scheme missing the `b(u)` drift.
    pub ablated_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
    pub slope: Option<f64>,
    /// `min ablated gap / min corrected gap`.
    pub plateau_ratio: Option<f64>,
}

/// Runs the unitary and Itô schemes on shared Brownian paths, the finer
/// paths obtained from the coarsest by bridge refinement, and reports root
/// mean square terminal gaps over paths `0..n_paths`. `dts` must halve.
pub fn ito_stratonovich_gap(
    eq: &Equation,
    u0: &ComplexField,
    horizon: f64,
    dts: &[f64],
    n_paths: u64,
    seed_base: u64,
) -> Result<GapTable> {
    if eq.m2() != 0 {
        return Err(Error::Precondition("the Itô/Stratonovich gap needs B-only noise".into()));
    }
    check_halving(dts, 2)?;
    if n_paths == 0 {
        return Err(Error::param("n_paths", "need at least one path"));
    }
    let ctrl = Control::none(horizon)?;
    let per_path = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut path = BrownianPath::generate(SeedSpec::new(seed_base, i), dts[0], steps_for(horizon, dts[0])?, eq.m1(), 0)?;
            let mut out = Vec::with_capacity(dts.len());
            for (k, &dt) in dts.iter().enumerate() {
                if k > 0 {
                    path = path.refine();
                }
                let terminal = |scheme: Scheme| -> Result<ComplexField> {
                    let opts = SolverOptions::new(dt, horizon).with_scheme(scheme).with_record(Record::Endpoints);
                    let spec = RunSpec {
                        u0,
                        ctrl: &ctrl,
                        opts: &opts,
                        noise: Some(&path),
                        truncation: None,
                        yosida: None,
                    };
                    ComplexField::from_vec(*eq.grid(), run(eq, &spec, &mut |_, _, _, _| {})?.terminal)
                };
                let unitary = terminal(Scheme::Unitary)?;
                let gap = unitary.sub(&terminal(Scheme::ItoLiteral)?)?.norm_l2();
                let ablated = unitary.sub(&terminal(Scheme::ItoUncorrected)?)?.norm_l2();
                out.push((gap * gap, ablated * ablated));
            }
            Ok(out)
        })
        .collect::<Result<Vec<Vec<(f64, f64)>>>>()?;
    let rms = |k: usize, f: fn(&(f64, f64)) -> f64| (per_path.iter().map(|v| f(&v[k])).sum::<f64>() / n_paths as f64).sqrt();
    let rows: Vec<GapRow> = dts
        .iter()
        .enumerate()
        .map(|(k, &dt)| GapRow {
            dt,
            gap: rms(k, |v| v.0),
            ablated_gap: rms(k, |v| v.1),
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.dt).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let min_gap = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let min_ablated = rows.iter().map(|r| r.ablated_gap).fold(f64::INFINITY, f64::min);
    Ok(GapTable {
        slope: loglog_slope(&xs, &ys),
        plateau_ratio: (min_gap > 0.0).then(|| min_ablated / min_gap),
        rows,
    })
}

/// Which solver a convergence study refines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverTag {
    Skeleton,
    Stochastic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderFit {
    pub tag: SolverTag,
    /// `dts[k]` paired with `errors[k] = ‖u_{dt_k}(T) − u_{dt_{k+1}}(T)‖_H`
    /// (root mean square over paths for the stochastic solver).
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub order: Option<f64>,
    /// Errors strictly decreasing along the ladder.
    pub reliable: bool,
    /// Errors at round-off level; no order is fitted.
    pub skipped: bool,
}

/// Self-convergence order along a halving `dt` ladder of at least three rungs.
/// The stochastic study drives every rung with the same Brownian path per
/// seed, refined by Brownian bridges from the coarsest rung.
pub fn order_of_convergence(
    eq: &Equation,
    u0: &ComplexField,
    ctrl: &Control,
    base: &SolverOptions,
    tag: SolverTag,
    dts: &[f64],
    n_paths: u64,
    seed_base: u64,
) -> Result<OrderFit> {
    check_halving(dts, 3)?;
    let horizon = base.horizon;
    let terminal = |dt: f64, noise: Option<&BrownianPath>| -> Result<Vec<Complex64>> {
        let opts = SolverOptions {
            dt,
            record: Record::Endpoints,
            ..*base
        };
        let spec = RunSpec {
            u0,
            ctrl,
            opts: &opts,
            noise: noise.map(|p| p as &dyn IncrementSource),
            truncation: None,
            yosida: None,
        };
        Ok(run(eq, &spec, &mut |_, _, _, _| {})?.terminal)
    };
    let dx = eq.grid().dx();
    let diff = |a: &[Complex64], b: &[Complex64]| -> f64 {
        let d: Vec<Complex64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        l2_raw(&d, dx)
    };
    let errors: Vec<f64> = match tag {
        SolverTag::Skeleton => {
            let sols = dts.iter().map(|&dt| terminal(dt, None)).collect::<Result<Vec<_>>>()?;
            sols.windows(2).map(|w| diff(&w[0], &w[1])).collect()
        }
        SolverTag::Stochastic => {
            if n_paths == 0 {
                return Err(Error::param("n_paths", "need at least one path"));
            }
            let per_path = (0..n_paths)
                .into_par_iter()
                .map(|i| {
                    let mut path = BrownianPath::generate(
                        SeedSpec::new(seed_base, i),
                        dts[0],
                        steps_for(horizon, dts[0])?,
                        eq.m1(),
                        eq.m2(),
                    )?;
                    let mut sols = Vec::with_capacity(dts.len());
                    for (k, &dt) in dts.iter().enumerate() {
                        if k > 0 {
                            path = path.refine();
                        }
                        sols.push(terminal(dt, Some(&path))?);
                    }
                    Ok(sols.windows(2).map(|w| diff(&w[0], &w[1]).powi(2)).collect::<Vec<f64>>())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            (0..dts.len() - 1)
                .map(|k| (per_path.iter().map(|e| e[k]).sum::<f64>() / n_paths as f64).sqrt())
                .collect()
        }
    };
    let scale = u0.norm_l2().max(f64::MIN_POSITIVE);
    let skipped = errors.iter().all(|e| *e <= 1e-12 * scale);
    let reliable = !skipped && errors.iter().all(|e| e.is_finite()) && errors.windows(2).all(|w| w[1] < w[0]);
    let used = &dts[..errors.len()];
    Ok(OrderFit {
        tag,
        dts: used.to_vec(),
        order: if skipped { None } else { loglog_slope(used, &errors) },
        errors,
        reliable,
        skipped,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YosidaRow {
    pub mu: f64,
    /// `‖u_μ − u‖` in the mixed norm on `[0, T]`.
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YosidaCurve {
    pub rows: Vec<YosidaRow>,
    pub strictly_decreasing: bool,
}

/// Distance between the Yosida-regularized and plain skeleton solutions.
pub fn yosida_curve(eq: &Equation, u0: &ComplexField, ctrl: &Control, opts: &SolverOptions, mus: &[f64]) -> Result<YosidaCurve> {
    let opts = opts.with_record(Record::Full);
    let pair = eq.pair();
    let exact = solve_skeleton(eq, u0, ctrl, &opts)?;
    let rows = mus
        .iter()
        .map(|&mu| {
            let approx = solve_skeleton_yosida(eq, u0, ctrl, &opts, mu)?;
            Ok(YosidaRow {
                mu,
                distance: approx.distance(&exact, pair.p, pair.r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(YosidaCurve {
        strictly_decreasing: rows.windows(2).all(|w| w[1].distance < w[0].distance),
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub n: u32,
    pub cost: f64,
    pub distance: f64,
}

/// Skeleton distances for `ρⁿ = ρ + perturbation/n`; they should shrink to 0.
pub fn control_continuity_probe(
    eq: &Equation,
    u0: &ComplexField,
    rho: &Control,
    perturbation: &Control,
    opts: &SolverOptions,
    ns: &[u32],
) -> Result<Vec<ContinuityRow>> {
    let opts = opts.with_record(Record::Full);
    let pair = eq.pair();
    let base = solve_skeleton(eq, u0, rho, &opts)?;
    ns.iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::param("n", "sequence index must be ≥ 1"));
            }
            let ctrl = perturbed(rho, perturbation, 1.0 / n as f64)?;
            let traj = solve_skeleton(eq, u0, &ctrl, &opts)?;
            Ok(ContinuityRow {
                n,
                cost: ctrl.cost(),
                distance: traj.distance(&base, pair.p, pair.r)?,
            })
        })
        .collect()
}

fn perturbed(rho: &Control, perturbation: &Control, c: f64) -> Result<Control> {
    let (a, b) = (rho.coefficients(), perturbation.coefficients());
    if a.len() != b.len() || rho.segments() != perturbation.segments() {
        return Err(Error::SizeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    rho.with_coefficients(&a.iter().zip(&b).map(|(x, y)| x + c * y).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakRow {
    pub delta: f64,
    pub mean_distance: f64,
    /// Counts of paths with distance `≥ δ`; `p_hat` estimates the probability.
    pub row: SweepRow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeakTable {
    pub rows: Vec<WeakRow>,
    /// Per `δ`: estimates strictly decrease as `ε` decreases.
    pub decreasing: Vec<(f64, bool)>,
}

/// Estimates `P(‖u^{ρ^ε, ε} − u^ρ‖ ≥ δ)` with `ρ^ε = ρ + √ε·perturbation`,
/// the distance taken in the mixed norm on `[0, T]`. ε-lists are
/// non-increasing; paths `0..n_paths` of `seed_base` are reused for every ε.
pub fn weak_convergence_probe(
    eq: &Equation,
    u0: &ComplexField,
    rho: &Control,
    perturbation: &Control,
    opts: &SolverOptions,
    epsilons: &[f64],
    deltas: &[f64],
    n_paths: u64,
    seed_base: u64,
) -> Result<WeakTable> {
    if epsilons.windows(2).any(|w| w[1] > w[0]) || epsilons.iter().any(|e| *e < 0.0) {
        return Err(Error::param("epsilons", "ε list must be non-negative and descending"));
    }
    if n_paths == 0 || deltas.is_empty() {
        return Err(Error::param("n_paths", "need at least one path and one δ"));
    }
    let opts = opts.with_record(Record::Full);
    let pair = eq.pair();
    let reference = solve_skeleton(eq, u0, rho, &opts)?;
    let dx = eq.grid().dx();
    let mut rows = Vec::new();
    for &eps in epsilons {
        let eq_eps = eq.with_params(eq.params().with_epsilon(eps))?;
        let ctrl = perturbed(rho, perturbation, eps.sqrt())?;
        let start = std::time::Instant::now();
        let distances = (0..n_paths)
            .into_par_iter()
            .map(|i| {
                let noise = SeededNoise::new(SeedSpec::new(seed_base, i), opts.dt)?;
                let spec = RunSpec {
                    u0,
                    ctrl: &ctrl,
                    opts: &opts,
                    noise: Some(&noise),
                    truncation: None,
                    yosida: None,
                };
                let mut acc = MixedNormAccumulator::new(pair.p, opts.dt);
                let mut diff = vec![Complex64::default(); u0.data().len()];
                let observed = run(&eq_eps, &spec, &mut |step, u, _, _| {
                    let refd = reference.fields()[step].data();
                    for ((d, a), b) in diff.iter_mut().zip(u).zip(refd) {
                        *d = a - b;
                    }
                    acc.observe(l2_raw(&diff, dx), lr_raw(&diff, dx, pair.r));
                });
                match observed {
                    Ok(_) => Ok(Some(acc.value())),
                    Err(Error::BlowUp { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<Option<f64>>>>()?;
        let wall = start.elapsed().as_secs_f64();
        let ok: Vec<f64> = distances.iter().flatten().copied().collect();
        let failed = n_paths - ok.len() as u64;
        let mean_distance = ok.iter().sum::<f64>() / ok.len().max(1) as f64;
        for &delta in deltas {
            let hits = ok.iter().filter(|d| **d >= delta).count() as u64;
            rows.push(WeakRow {
                delta,
                mean_distance,
                row: SweepRow::from_counts(eps, n_paths, hits, failed, wall),
            });
        }
    }
    let decreasing = deltas
        .iter()
        .map(|&delta| {
            let ps: Vec<f64> = rows.iter().filter(|r| r.delta == delta).map(|r| r.row.p_hat).collect();
            (delta, ps.windows(2).all(|w| w[1] < w[0]))
        })
        .collect();
    Ok(WeakTable { rows, decreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::initial::InitialData;
    use crate::model::{ModelParams, NoiseModel};

    fn grid(n: usize) -> Grid {
        Grid::new(1, n, 10.0 * std::f64::consts::PI).unwrap()
    }

    #[test]
    fn slope_fit() {
        let xs = [1.0, 0.5, 0.25];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn single_mode_unitary_ratio() {
        let g = grid(64);
        let phi = ComplexField::from_fn(g, |x| Complex64::from_polar(1.0, 0.3 * x[0])).unwrap();
        let ratio = strichartz_ratio(&phi, f64::INFINITY, 2.0, 1.0, 1e-2).unwrap();
        assert!((ratio - 1.0).abs() < 1e-13, "{ratio}");
        assert!(strichartz_ratio(&phi, 4.0, 4.0, 1.0, 1e-2).is_err());
    }

    #[test]
    fn ratio_stable_under_refinement() {
        for preset in SpectrumPreset::ALL {
            let a = strichartz_ratio_survey(grid(128), preset, 5, 8.0, 4.0, 1.0, 1e-2, 3).unwrap();
            let b = strichartz_ratio_survey(grid(256), preset, 5, 8.0, 4.0, 1.0, 1e-2, 3).unwrap();
            assert!(a.finite && b.finite);
            for (x, y) in a.ratios.iter().zip(&b.ratios) {
                assert!((x - y).abs() / x < 0.1, "{preset:?}: {x} vs {y}");
            }
        }
    }

    fn b_only(eps: f64) -> (Equation, ComplexField) {
        let g = grid(128);
        let noise = NoiseModel::geometric(2, 0);
        let params = ModelParams {
            epsilon: eps,
            ..ModelParams::default()
        };
        let eq = Equation::new(g, params, noise).unwrap();
        let u0 = InitialData::default().build(g).unwrap();
        (eq, u0)
    }

    #[test]
    fn zero_noise_gap_vanishes() {
        let (eq, u0) = b_only(0.0);
        let table = ito_stratonovich_gap(&eq, &u0, 0.2, &[4e-3, 2e-3], 2, 1).unwrap();
        assert!(table.rows.iter().all(|r| r.gap == 0.0 && r.ablated_gap == 0.0));
        assert!(table.slope.is_none());
        let eq = eq.with_noise(NoiseModel::geometric(1, 1)).unwrap();
        assert!(ito_stratonovich_gap(&eq, &u0, 0.2, &[4e-3, 2e-3], 2, 1).is_err());
    }

    #[test]
    fn gap_is_first_order_and_ablation_plateaus() {
        let (eq, u0) = b_only(0.1);
        let table = ito_stratonovich_gap(&eq, &u0, 0.5, &[4e-3, 2e-3, 1e-3, 5e-4], 16, 4).unwrap();
        let slope = table.slope.unwrap();
        assert!((slope - 1.0).abs() <= 0.25, "{slope} {:?}", table.rows);
        assert!(table.plateau_ratio.unwrap() > 10.0, "{:?}", table.rows);
    }

    #[test]
    fn linear_flow_order_is_skipped() {
        let g = grid(64);
        let params = ModelParams {
            lambda: 0.0,
            ..ModelParams::default()
        };
        let eq = Equation::new(g, params, NoiseModel::none()).unwrap();
        let u0 = InitialData::default().build(g).unwrap();
        let fit = order_of_convergence(
            &eq,
            &u0,
            &Control::none(0.5).unwrap(),
            &SolverOptions::new(1e-2, 0.5),
            SolverTag::Skeleton,
            &[1e-2, 5e-3, 2.5e-3],
            1,
            0,
        )
        .unwrap();
        assert!(fit.skipped && fit.order.is_none());
    }

    #[test]
    fn skeleton_order_two() {
        let g = grid(128);
        let eq = Equation::new(g, ModelParams::default(), NoiseModel::default()).unwrap();
        let u0 = InitialData::default().build(g).unwrap();
        let ctrl = Control::constant(1.0, &[0.5, -0.3, 0.2, 0.1], &[0.4, 0.2, -0.1, 0.3]).unwrap();
        let fit = order_of_convergence(
            &eq,
            &u0,
            &ctrl,
            &SolverOptions::new(1e-2, 1.0),
            SolverTag::Skeleton,
            &[1e-2, 5e-3, 2.5e-3, 1.25e-3],
            1,
            0,
        )
        .unwrap();
        let q = fit.order.unwrap();
        assert!(fit.reliable && (1.7..=2.3).contains(&q), "{q} {:?}", fit.errors);
    }

    #[test]
    fn ladder_validation() {
        let g = grid(64);
        let eq = Equation::new(g, ModelParams::default(), NoiseModel::none()).unwrap();
        let u0 = InitialData::default().build(g).unwrap();
        let c = Control::none(1.0).unwrap();
        let o = SolverOptions::new(1e-2, 1.0);
        assert!(order_of_convergence(&eq, &u0, &c, &o, SolverTag::Skeleton, &[1e-2, 5e-3], 1, 0).is_err());
        assert!(order_of_convergence(&eq, &u0, &c, &o, SolverTag::Skeleton, &[1e-2, 4e-3, 2e-3], 1, 0).is_err());
    }

    #[test]
    fn yosida_and_continuity_monotone() {
        let g = grid(128);
        let eq = Equation::new(g, ModelParams::default(), NoiseModel::default()).unwrap();
        let u0 = InitialData::default().build(g).unwrap();
        let opts = SolverOptions::new(1e-2, 0.5);
        let ctrl = Control::constant(0.5, &[0.5; 4], &[0.2; 4]).unwrap();
        let curve = yosida_curve(&eq, &u0, &ctrl, &opts, &[10.0, 100.0, 1000.0]).unwrap();
        assert!(curve.strictly_decreasing, "{:?}", curve.rows);
        let rows = control_continuity_probe(&eq, &u0, &ctrl, &ctrl.scaled(2.0), &opts, &[1, 2, 4, 8]).unwrap();
        assert!(rows.windows(2).all(|w| w[1].distance < w[0].distance), "{rows:?}");
    }

    #[test]
    fn weak_probe_zero_noise_and_delta_nesting() {
        let g = grid(64);
        let eq = Equation::new(g, ModelParams::default(), NoiseModel::default()).unwrap();
        let u0 = InitialData::default().build(g).unwrap();
        let opts = SolverOptions::new(1e-2, 0.5);
        let rho = Control::constant(0.5, &[0.3; 4], &[0.1; 4]).unwrap();
        let pert = Control::constant(0.5, &[1.0; 4], &[1.0; 4]).unwrap();
        let table = weak_convergence_probe(&eq, &u0, &rho, &pert, &opts, &[0.0], &[0.0, 1e-300], 10, 1).unwrap();
        assert_eq!(table.rows[1].mean_distance, 0.0);
        assert_eq!(table.rows[1].row.hits, 0);
        let table = weak_convergence_probe(&eq, &u0, &rho, &pert, &opts, &[0.2], &[0.02, 0.05, 0.1, 0.2], 50, 1).unwrap();
        assert!(table.rows.windows(2).all(|w| w[1].row.hits <= w[0].row.hits));
    }
}
