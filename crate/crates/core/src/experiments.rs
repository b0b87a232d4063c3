//! Initial data and the three run modes behind the command line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Family, InitialConfig, Profile, RunConfig, RunMode};
use crate::diagnostics::{
    fit_decay, fit_decay_window, linearized_decay_experiment, monotone_after, write_csv, DecayFit,
    DiagnosticsRecord, FitMode, Recorder,
};
use crate::dynamics::{advance, min_density};
use crate::error::{Error, Result};
use crate::grid::VelocityGrid;
use crate::landau::{q_landau_direct, q_landau_fft, CollisionOperator, ConservativeCorrection};
use crate::numerics::{norm_sq, pairwise_sum_by};
use crate::state::{
    conserved_quantities, extract_moments, project_p_fields, project_pi_fields, read_checkpoint, write_checkpoint,
    Background, SystemState,
};
use crate::weights::{projection_split_ratio, weight_inequality_suite, InequalityReport};

/// How the requested initial data had to be adjusted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialReport {
    pub requested_amplitude: f64,
    pub amplitude: f64,
    pub halvings: usize,
    pub min_density: f64,
}

/// Largest number of amplitude halvings tried to reach `μ + f₀ > 0`.
pub const MAX_HALVINGS: usize = 10;

/// Build `f₀` from the descriptor, project it onto data with zero
/// species masses, zero momentum and `∫∫|v|²(f₊ + f₋) = -∫|∇φ|²`, and
/// halve the amplitude until `μ + f₀ > 0` on the grid.
pub fn make_initial_condition(ic: &InitialConfig, background: &Arc<Background>) -> Result<(SystemState, InitialReport)> {
    let raw = raw_profile(ic, background)?;
    let mut amplitude = ic.amplitude;
    for halvings in 0..=MAX_HALVINGS {
        let plus: Vec<f64> = raw[0].iter().map(|v| amplitude * v).collect();
        let minus: Vec<f64> = raw[1].iter().map(|v| amplitude * v).collect();
        let state = conserving_projection(SystemState::new(background.clone(), plus, minus, 0.0)?)?;
        let min = min_density(&state);
        if min > 0.0 {
            if halvings > 0 {
                log::warn!(
                    "initial amplitude reduced from {} to {amplitude} to keep mu + f0 positive",
                    ic.amplitude
                );
            }
            return Ok((
                state,
                InitialReport {
                    requested_amplitude: ic.amplitude,
                    amplitude,
                    halvings,
                    min_density: min,
                },
            ));
        }
        amplitude *= 0.5;
    }
    Err(Error::InitialCondition(format!(
        "mu + f0 stays non-positive after {MAX_HALVINGS} halvings of amplitude {}",
        ic.amplitude
    )))
}

/// Unit-amplitude `f₀` before projection.
fn raw_profile(ic: &InitialConfig, background: &Background) -> Result<[Vec<f64>; 2]> {
    let g = background.grid();
    let nv = g.v.len();
    let mu = background.mu();
    let vel = background.velocities();
    let profile = |p: usize| -> f64 {
        let v = vel[p];
        mu[p]
            * match ic.profile {
                Profile::Density => 1.0,
                Profile::Drift => v[0],
                Profile::Temperature => v[0] * v[0] + v[1] * v[1] + v[2] * v[2] - 3.0,
                Profile::Shear => v[0] * v[0] - v[1] * v[1],
            }
    };
    let phase = |mode: [i64; 3], ix: usize| -> f64 {
        let x = g.x.coords(ix);
        (0..3).map(|a| mode[a] as f64 * x[a]).sum()
    };
    match ic.family {
        Family::SingleMode | Family::TwoMode => {
            let first = *ic.modes.first().ok_or_else(|| Error::InitialCondition("no mode given".into()))?;
            let second = match ic.family {
                Family::TwoMode => Some(
                    *ic.modes
                        .get(1)
                        .ok_or_else(|| Error::InitialCondition("two_mode needs two modes".into()))?,
                ),
                _ => None,
            };
            let spatial: Vec<f64> = (0..g.x.len())
                .map(|ix| phase(first, ix).cos() + second.map_or(0.0, |m| 0.5 * phase(m, ix).sin()))
                .collect();
            Ok(ic.species_signs.map(|sign| {
                (0..g.len())
                    .map(|i| sign * spatial[i / nv] * profile(i % nv))
                    .collect()
            }))
        }
        Family::RandomBandlimited => Ok(random_bandlimited(background, ic.max_mode, ic.max_degree, ic.seed)),
    }
}

/// `Σ c cos/sin(m·x) v^a μ` over `|m|_∞ ≤ max_mode`, `|a| ≤ max_degree`
/// with seeded uniform coefficients, scaled to `max|f| = max μ`.
pub fn random_bandlimited(background: &Background, max_mode: i64, max_degree: usize, seed: u64) -> [Vec<f64>; 2] {
    let g = background.grid();
    let nv = g.v.len();
    let dim = g.x.dim();
    let mu = background.mu();
    let vel = background.velocities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = Vec::new();
    let top = |a: usize| if a < dim { max_mode } else { 0 };
    for i in -top(0)..=top(0) {
        for j in -top(1)..=top(1) {
            for k in -top(2)..=top(2) {
                modes.push([i, j, k]);
            }
        }
    }
    let mut powers = Vec::new();
    for a in 0..=max_degree {
        for b in 0..=max_degree - a {
            for c in 0..=max_degree - a - b {
                powers.push([a as i32, b as i32, c as i32]);
            }
        }
    }
    let peak = mu.iter().copied().fold(0.0, f64::max);
    std::array::from_fn(|_| {
        // velocity shape per spatial mode
        let shapes: Vec<Vec<f64>> = modes
            .iter()
            .map(|_| {
                let coeffs: Vec<f64> = powers.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
                (0..nv)
                    .map(|p| {
                        let v = vel[p];
                        let poly: f64 = powers
                            .iter()
                            .zip(&coeffs)
                            .map(|(a, c)| c * v[0].powi(a[0]) * v[1].powi(a[1]) * v[2].powi(a[2]))
                            .sum();
                        poly * mu[p]
                    })
                    .collect()
            })
            .collect();
        let phases: Vec<f64> = modes.iter().map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let mut f = vec![0.0; g.len()];
        for ix in 0..g.x.len() {
            let x = g.x.coords(ix);
            for ((m, shape), ph) in modes.iter().zip(&shapes).zip(&phases) {
                let c = ((0..3).map(|a| m[a] as f64 * x[a]).sum::<f64>() + ph).cos();
                for (out, s) in f[ix * nv..(ix + 1) * nv].iter_mut().zip(shape) {
                    *out += c * s;
                }
            }
        }
        let max = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if max > 0.0 {
            f.iter_mut().for_each(|v| *v *= peak / max);
        }
        f
    })
}

/// Shift `f` by a spatially uniform element of the invariant span so that
/// the global masses and momentum vanish and the kinetic energy cancels
/// the field energy, all in the grid quadrature.
pub fn conserving_projection(state: SystemState) -> Result<SystemState> {
    let g = state.grid().clone();
    let nv = g.v.len();
    let nx = g.x.len();
    let correction = ConservativeCorrection::new(&g.v);
    let mean = |f: &[f64]| -> Vec<f64> {
        (0..nv)
            .map(|p| pairwise_sum_by(nx, |ix| f[ix * nv + p]) / nx as f64)
            .collect()
    };
    let (mp, mm) = (mean(state.f_plus()), mean(state.f_minus()));
    let (mut cp, mut cm) = (mp.clone(), mm.clone());
    let field = crate::poisson::field_energy(&g.x, state.phi());
    let target_energy = -field / (g.x.volume() * g.v.weight());
    correction.apply_with_targets(&mut cp, &mut cm, [0.0, 0.0, 0.0, 0.0, 0.0, target_energy]);
    let shift = |f: &[f64], before: &[f64], after: &[f64]| -> Vec<f64> {
        f.iter()
            .enumerate()
            .map(|(i, v)| v + after[i % nv] - before[i % nv])
            .collect()
    };
    let plus = shift(state.f_plus(), &mp, &cp);
    let minus = shift(state.f_minus(), &mm, &cm);
    SystemState::new(state.background().clone(), plus, minus, state.time())
}

/// Seeded smooth pair `(p(v) μ, q(v) μ)` with random quartic polynomials.
pub fn random_velocity_pair(grid: &VelocityGrid, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let mu = crate::state::maxwellian(grid);
    let mut sample = || -> Vec<f64> {
        let c: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (0..grid.len())
            .map(|p| {
                let v = grid.velocity(p);
                let poly = c[0]
                    + c[1] * v[0]
                    + c[2] * v[1]
                    + c[3] * v[2]
                    + c[4] * v[0] * v[0]
                    + c[5] * v[1] * v[1]
                    + c[6] * v[2] * v[2]
                    + c[7] * v[0] * v[1]
                    + c[8] * v[1] * v[2]
                    + c[9] * v[0] * v[2]
                    + c[10] * v[0] * v[1] * v[2]
                    + 0.1 * (c[11] * v[0].powi(4) + c[12] * v[1].powi(4) + c[13] * v[2].powi(4))
                    + 0.1 * c[14] * v[0] * v[0] * v[1] * v[1];
                poly * mu[p]
            })
            .collect()
    };
    let g = sample();
    let f = sample();
    (g, f)
}

/// Relative `L²` difference between the FFT operator and the direct
/// quadrature, for each of `pairs` seeded random pairs.
pub fn operator_equivalence(gamma: f64, grid: &VelocityGrid, pairs: usize, seed: u64) -> Result<Vec<f64>> {
    let tables = crate::landau::LandauKernelTables::build(gamma, grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let (g, f) = random_velocity_pair(grid, &mut rng);
        let fast = q_landau_fft(&g, &f, &tables)?;
        let slow = q_landau_direct(&g, &f, gamma, grid)?;
        let diff: Vec<f64> = fast.iter().zip(&slow).map(|(a, b)| a - b).collect();
        out.push((norm_sq(&diff) / norm_sq(&slow)).sqrt());
    }
    Ok(out)
}

/// Seeded random state on the background, `random_bandlimited` profile
/// scaled by `amplitude`.
pub fn random_state(background: &Arc<Background>, amplitude: f64, seed: u64) -> Result<SystemState> {
    let [p, m] = random_bandlimited(background, 2, 4, seed);
    let scale = |f: Vec<f64>| f.into_iter().map(|v| amplitude * v).collect();
    SystemState::new(background.clone(), scale(p), scale(m), 0.0)
}

/// Worst relative errors of the projection identities over random states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSuite {
    pub samples: usize,
    /// `||P²f - Pf|| / ||f||`.
    pub p_idempotence: f64,
    /// `||Π²f - Πf|| / ||f||`.
    pub pi_idempotence: f64,
    /// `||Π(I - P)f|| / ||f||`.
    pub pi_kills_micro: f64,
    /// Smallest `(||Pf||²_k + ||(I-P)f||²_k) / ||f||²_k`.
    pub min_split_ratio: f64,
}

pub fn projection_suite(background: &Arc<Background>, samples: usize, weight_index: f64, seed: u64) -> ProjectionSuite {
    let mut suite = ProjectionSuite {
        samples,
        min_split_ratio: f64::INFINITY,
        ..Default::default()
    };
    let norm = |f: &[Vec<f64>; 2]| (norm_sq(&f[0]) + norm_sq(&f[1])).sqrt();
    let diff = |a: &[Vec<f64>; 2], b: &[Vec<f64>; 2]| -> [Vec<f64>; 2] {
        std::array::from_fn(|s| a[s].iter().zip(&b[s]).map(|(x, y)| x - y).collect())
    };
    for i in 0..samples {
        let [p, m] = random_bandlimited(background, 2, 4, seed.wrapping_add(i as u64));
        let f = [p, m];
        let scale = norm(&f);
        let pf = project_p_fields(background, &f[0], &f[1]);
        let ppf = project_p_fields(background, &pf[0], &pf[1]);
        let pif = project_pi_fields(background, &f[0], &f[1]);
        let pipif = project_pi_fields(background, &pif[0], &pif[1]);
        let micro = diff(&f, &pf);
        let pi_micro = project_pi_fields(background, &micro[0], &micro[1]);
        suite.p_idempotence = suite.p_idempotence.max(norm(&diff(&ppf, &pf)) / scale);
        suite.pi_idempotence = suite.pi_idempotence.max(norm(&diff(&pipif, &pif)) / scale);
        suite.pi_kills_micro = suite.pi_kills_micro.max(norm(&pi_micro) / scale);
        let ratio = projection_split_ratio(background, [&f[0], &f[1]], weight_index);
        suite.min_split_ratio = suite.min_split_ratio.min(ratio);
    }
    suite
}

/// `n` seeded velocities uniform in the box `[-L, L)³`.
pub fn sample_velocities(cutoff: f64, n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-cutoff..cutoff)))
        .collect()
}

/// A named pass/fail line of a run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }

    fn exceeds(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value > threshold,
        }
    }
}

/// Schema version of [`RunSummary`].
pub const SUMMARY_VERSION: u32 = 1;

/// JSON summary written next to the time series.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub mode: RunMode,
    pub config: RunConfig,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub steps: usize,
    pub wall_seconds: f64,
    pub eps_op: Option<f64>,
    pub initial: Option<InitialReport>,
    pub exponential_fit: Option<DecayFit>,
    pub polynomial_fit: Option<DecayFit>,
    /// `-2l/|γ|`, the slope of the soft-potential rate bound, for reference.
    pub polynomial_bound: Option<f64>,
    pub operator_errors: Vec<f64>,
    pub weight_suite: Option<InequalityReport>,
    pub corrupted_weight_suite: Option<InequalityReport>,
    pub projection_suite: Option<ProjectionSuite>,
    pub notes: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

impl RunSummary {
    fn new(config: &RunConfig) -> Self {
        Self {
            schema_version: SUMMARY_VERSION,
            mode: config.run.mode,
            config: config.clone(),
            pass: false,
            checks: Vec::new(),
            steps: 0,
            wall_seconds: 0.0,
            eps_op: None,
            initial: None,
            exponential_fit: None,
            polynomial_fit: None,
            polynomial_bound: None,
            operator_errors: Vec::new(),
            weight_suite: None,
            corrupted_weight_suite: None,
            projection_suite: None,
            notes: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn finish(&mut self, start: Instant) {
        self.pass = !self.checks.is_empty() && self.checks.iter().all(|c| c.pass);
        self.wall_seconds = start.elapsed().as_secs_f64();
    }
}

/// Run the configured mode, write its artifacts under `output.dir` and
/// return the summary. `pass` reflects the mode's built-in checks.
pub fn run_experiment(config: &RunConfig) -> Result<RunSummary> {
    let problems = config.violations();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    fs::create_dir_all(&config.output.dir)?;
    let start = Instant::now();
    let mut summary = RunSummary::new(config);
    match config.run.mode {
        RunMode::Nonlinear => run_nonlinear(config, &mut summary)?,
        RunMode::Linearized => run_linearized(config, &mut summary)?,
        RunMode::OperatorTest => run_operator_test(config, &mut summary)?,
    }
    summary.finish(start);
    let path = config.output.dir.join(&config.output.summary);
    summary.artifacts.push(path.clone());
    let mut out = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut out, &summary)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(summary)
}

fn operator_for(config: &RunConfig, background: &Background) -> Result<Option<CollisionOperator>> {
    if !config.time.collisions {
        return Ok(None);
    }
    Ok(Some(CollisionOperator::new(
        config.model.gamma,
        &background.grid().v,
        config.time.conservative_correction,
    )?))
}

fn initial_state(config: &RunConfig, summary: &mut RunSummary) -> Result<SystemState> {
    match &config.run.restart {
        Some(path) => {
            let state = read_checkpoint(File::open(path)?, None)?;
            let expected = config.phase_grid()?.spec();
            if state.grid().spec() != expected {
                return Err(Error::Checkpoint(format!(
                    "restart grid {:?} differs from configured grid {expected:?}",
                    state.grid().spec()
                )));
            }
            summary.notes.push(format!("restarted from {} at t = {}", path.display(), state.time()));
            Ok(state)
        }
        None => {
            let background = Background::new(config.phase_grid()?);
            let (state, report) = make_initial_condition(&config.initial, &background)?;
            summary.initial = Some(report);
            Ok(state)
        }
    }
}

fn checkpoint(dir: &Path, prefix: &str, tag: &str, state: &SystemState) -> Result<PathBuf> {
    let path = dir.join(format!("{prefix}_{tag}.bin"));
    let mut out = BufWriter::new(File::create(&path)?);
    write_checkpoint(state, &mut out)?;
    out.flush()?;
    Ok(path)
}

fn write_series(config: &RunConfig, records: &[DiagnosticsRecord], summary: &mut RunSummary) -> Result<()> {
    let path = config.output.dir.join(&config.output.csv);
    let mut out = BufWriter::new(File::create(&path)?);
    write_csv(records, &mut out)?;
    out.flush()?;
    summary.artifacts.push(path);
    Ok(())
}

fn fit_series(config: &RunConfig, records: &[DiagnosticsRecord], mode: FitMode) -> Result<DecayFit> {
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let values: Vec<f64> = records.iter().map(|r| r.e_k).collect();
    match config.analysis.fit_window {
        Some([t0, t1]) => fit_decay_window(&times, &values, mode, t0, t1),
        None => fit_decay(&times, &values, mode, config.analysis.transient),
    }
}

fn fit_start(config: &RunConfig, records: &[DiagnosticsRecord]) -> f64 {
    match config.analysis.fit_window {
        Some([t0, _]) => t0,
        None => {
            let t0 = records.first().map_or(0.0, |r| r.time);
            let t1 = records.last().map_or(0.0, |r| r.time);
            t0 + config.analysis.transient * (t1 - t0)
        }
    }
}

/// Decay checks shared by the nonlinear and linearized modes.
fn decay_checks(config: &RunConfig, records: &[DiagnosticsRecord], summary: &mut RunSummary) {
    let exp = fit_series(config, records, FitMode::Exponential);
    let poly = fit_series(config, records, FitMode::Polynomial);
    let (exp, poly) = match (exp, poly) {
        (Ok(e), Ok(p)) => (e, p),
        (Err(e), _) | (_, Err(e)) => {
            summary.notes.push(format!("decay fit skipped: {e}"));
            return;
        }
    };
    summary.exponential_fit = Some(exp);
    summary.polynomial_fit = Some(poly);
    let gamma = config.model.gamma;
    if gamma < 0.0 {
        summary.polynomial_bound = Some(-2.0 * config.model.l / gamma.abs());
    }
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let values: Vec<f64> = records.iter().map(|r| r.e_k).collect();
    let first = values.first().copied().unwrap_or(0.0);
    let last = values.last().copied().unwrap_or(0.0);
    summary.checks.push(Check::at_most("E_k(end) / E_k(0)", last / first, 1.0));
    if gamma >= 0.0 {
        let monotone = monotone_after(&times, &values, fit_start(config, records), 1e-9);
        summary.checks.push(Check::at_least("E_k monotone after transient", f64::from(monotone as u8), 1.0));
        summary.checks.push(Check::exceeds("exponential rate", exp.rate, 0.0));
        summary.checks.push(Check::at_least("exponential R^2", exp.r_squared, 0.99));
    } else {
        summary.checks.push(Check::exceeds(
            "polynomial R^2 - exponential R^2",
            poly.r_squared - exp.r_squared,
            0.0,
        ));
        summary.checks.push(Check::at_most("polynomial slope", poly.rate, 0.0));
    }
}

fn run_nonlinear(config: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let mut state = initial_state(config, summary)?;
    let op = operator_for(config, state.background())?;
    let eps_op = op.as_ref().map(|o| o.equilibrium_residual());
    summary.eps_op = eps_op;
    let mut recorder = Recorder::new(config.weight_spec()?, config.ladder()?, eps_op.unwrap_or(0.0));
    let mut records = vec![recorder.record(&state, None)?];
    let dir = &config.output.dir;
    let prefix = &config.output.checkpoint_prefix;
    let mut checkpoints = Vec::new();
    let every = config.run.record_every;
    let result = advance(&mut state, config.run.t_final, &config.time, op.as_ref(), |s, report| {
        if report.step % every == 0 {
            records.push(recorder.record(s, Some(report))?);
        }
        if config.run.checkpoint_every > 0 && report.step % config.run.checkpoint_every == 0 {
            checkpoints.push(checkpoint(dir, prefix, &format!("{:06}", report.step), s)?);
        }
        Ok(())
    });
    summary.artifacts.extend(checkpoints);
    write_series(config, &records, summary)?;
    let steps = match result {
        Ok(steps) => steps,
        Err(e) => {
            let path = checkpoint(dir, prefix, "failed", &state)?;
            summary.artifacts.push(path);
            summary.notes.push(format!("run stopped at t = {}: {e}", state.time()));
            summary.checks.push(Check::at_least("run completed", 0.0, 1.0));
            return Ok(());
        }
    };
    summary.steps = steps;
    summary.artifacts.push(checkpoint(dir, prefix, "final", &state)?);
    let finite = records.iter().all(DiagnosticsRecord::is_finite);
    summary.checks.push(Check::at_least("records finite", f64::from(finite as u8), 1.0));
    let drift = records.iter().map(|r| r.max_drift).fold(0.0, f64::max);
    summary.checks.push(Check::at_most("max relative drift", drift, config.analysis.drift_tolerance));
    let min = records
        .iter()
        .map(|r| r.min_density_plus.min(r.min_density_minus))
        .fold(f64::INFINITY, f64::min);
    summary.checks.push(Check::exceeds("min(mu + f)", min, 0.0));
    decay_checks(config, &records, summary);
    Ok(())
}

fn run_linearized(config: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let state = initial_state(config, summary)?;
    let op = CollisionOperator::new(config.model.gamma, &state.grid().v, config.time.conservative_correction)?;
    summary.eps_op = Some(op.equilibrium_residual());
    let mut recorder = Recorder::new(config.weight_spec()?, config.ladder()?, op.equilibrium_residual());
    let result = linearized_decay_experiment(
        &state,
        config.run.t_final,
        &config.time,
        &op,
        &mut recorder,
        config.run.record_every,
        config.analysis.transient,
    )?;
    summary.steps = result.records.last().map_or(0, |r| r.step);
    write_series(config, &result.records, summary)?;
    let finite = result.records.iter().all(DiagnosticsRecord::is_finite);
    summary.checks.push(Check::at_least("records finite", f64::from(finite as u8), 1.0));
    // Πf is invariant under the linearized flow
    let first = result.records.first().expect("initial record");
    let scale = state.background().invariant_scales();
    let pi_drift = result
        .records
        .iter()
        .map(|r| {
            let mass = (r.mass_plus - first.mass_plus).abs().max((r.mass_minus - first.mass_minus).abs()) / scale.mass;
            let mom = [
                r.momentum_x - first.momentum_x,
                r.momentum_y - first.momentum_y,
                r.momentum_z - first.momentum_z,
            ]
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
                / scale.momentum;
            mass.max(mom)
        })
        .fold(0.0, f64::max);
    summary.checks.push(Check::at_most("global moment drift", pi_drift, 1e-9));
    if result.records.iter().all(|r| r.e_k == 0.0) {
        summary.notes.push("zero initial data: every series is identically zero".into());
        return Ok(());
    }
    decay_checks(config, &result.records, summary);
    Ok(())
}

fn run_operator_test(config: &RunConfig, summary: &mut RunSummary) -> Result<()> {
    let grid = config.phase_grid()?;
    let gamma = config.model.gamma;
    let seed = config.analysis.seed;
    let errors = operator_equivalence(gamma, &grid.v, config.analysis.operator_pairs, seed)?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    summary.checks.push(Check::at_most("FFT vs direct relative error", worst, 1e-8));
    summary.operator_errors = errors;

    let op = CollisionOperator::new(gamma, &grid.v, false)?;
    summary.eps_op = Some(op.equilibrium_residual());

    let spec = config.weight_spec()?;
    let samples = sample_velocities(grid.v.cutoff(), config.analysis.weight_samples, seed);
    let report = weight_inequality_suite(&spec, &samples);
    let failed = report.checks.iter().filter(|c| c.failures > 0).count();
    summary.checks.push(Check::at_most("weight inequalities failing", failed as f64, 0.0));
    let corrupted = weight_inequality_suite(&spec.with_r(2.0 * spec.q), &samples);
    let caught = corrupted.failed().iter().any(|n| n.starts_with("212"));
    summary.checks.push(Check::at_least("corrupted r = 2q caught by 212", f64::from(caught as u8), 1.0));
    summary.weight_suite = Some(report);
    summary.corrupted_weight_suite = Some(corrupted);

    let background = Background::new(grid);
    let suite = projection_suite(&background, config.analysis.projection_samples, spec.k, seed);
    summary.checks.push(Check::at_most("P^2 = P", suite.p_idempotence, 1e-11));
    summary.checks.push(Check::at_most("Pi^2 = Pi", suite.pi_idempotence, 1e-11));
    summary.checks.push(Check::at_most("Pi (I - P) = 0", suite.pi_kills_micro, 1e-11));
    summary.checks.push(Check::at_least("norm equivalence lower bound", suite.min_split_ratio, 0.5));
    summary.projection_suite = Some(suite);
    Ok(())
}

/// `(∫∫f₊, ∫∫f₋, ∫∫v(f₊+f₋), ∫∫|v|²(f₊+f₋) + ∫|∇φ|²)` of the state.
pub fn conservation_residuals(state: &SystemState) -> [f64; 6] {
    let q = conserved_quantities(state);
    [
        q.mass[0],
        q.mass[1],
        q.momentum[0],
        q.momentum[1],
        q.momentum[2],
        q.total_energy(),
    ]
}

/// Spatial averages of the macroscopic moments, i.e. the coefficients of `Πf`.
pub fn global_moments(state: &SystemState) -> [f64; 6] {
    extract_moments(state).spatial_average()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PhaseGrid;

    fn background() -> Arc<Background> {
        Background::new(PhaseGrid::build(1, 8, 16, 8.0).unwrap())
    }

    #[test]
    fn zero_amplitude_gives_zero_state() {
        let ic = InitialConfig {
            amplitude: 0.0,
            ..Default::default()
        };
        let (state, report) = make_initial_condition(&ic, &background()).unwrap();
        assert!(state.f_plus().iter().chain(state.f_minus()).all(|&v| v == 0.0));
        assert!(state.phi().iter().all(|&v| v == 0.0));
        assert_eq!(report.halvings, 0);
    }

    #[test]
    fn single_mode_satisfies_conservation_constraints() {
        let ic = InitialConfig {
            amplitude: 1e-2,
            ..Default::default()
        };
        let (state, _) = make_initial_condition(&ic, &background()).unwrap();
        for r in conservation_residuals(&state) {
            assert!(r.abs() <= 1e-12, "{r}");
        }
        assert!(state.phi().iter().any(|&p| p.abs() > 1e-4));
    }

    #[test]
    fn large_amplitude_is_halved_to_positivity() {
        let ic = InitialConfig {
            amplitude: 3.0,
            ..Default::default()
        };
        let (state, report) = make_initial_condition(&ic, &background()).unwrap();
        assert!(report.halvings >= 2);
        assert!(min_density(&state) > 0.0);
    }

    #[test]
    fn random_family_is_deterministic() {
        let ic = InitialConfig {
            family: Family::RandomBandlimited,
            amplitude: 1e-2,
            seed: 99,
            ..Default::default()
        };
        let bg = background();
        let (a, _) = make_initial_condition(&ic, &bg).unwrap();
        let (b, _) = make_initial_condition(&ic, &bg).unwrap();
        assert_eq!(a.f_plus(), b.f_plus());
        assert_eq!(a.f_minus(), b.f_minus());
    }
}
