//! Time integration of the perturbation system
//!
//! ```text
//! ∂_t f± + v·∇ₓf± ∓ ∇ₓφ·∇ᵥf± ± ∇ₓφ·vμ = Q(f± + f∓, μ) + Q(2μ + f± + f∓, f±)
//! ```
//!
//! by Strang splitting: transport `dt/2`, field `dt/2`, collision `dt`,
//! field `dt/2`, transport `dt/2`. Transport is exact (a phase shift of
//! the spatial Fourier modes), the field substep is RK4 with `φ` frozen,
//! and the collision substep is either explicit RK4 (sub-cycled to respect
//! the diffusion stiffness) or implicit Euler solved by Picard iteration on
//! the coefficients.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landau::{CollisionCoefficients, CollisionOperator};
use crate::numerics::{dot, norm_sq, solve_dense};
use crate::state::SystemState;

/// Collision integrator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Explicit RK4 collision substeps.
    StrangRk4,
    /// Explicit second-order Runge-Kutta-Chebyshev collision substeps,
    /// for stiff (hard-potential) runs.
    StrangRkc,
    PicardImplicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeStepConfig {
    pub dt: f64,
    pub scheme: Scheme,
    /// Picard stops once successive iterates differ by less than
    /// `picard_tol` relative to the iterate's L² norm.
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    /// Anderson mixing depth for the Picard iterates; `0` is plain Picard.
    pub picard_anderson_depth: usize,
    pub conservative_correction: bool,
    /// Explicit collision sub-steps per step; `None` picks enough to stay
    /// inside the RK4 stability region.
    pub collision_substeps: Option<usize>,
    /// Relative residual for the linear solves inside each Picard iteration.
    pub linear_tol: f64,
    pub linear_max_iters: usize,
    pub collisions: bool,
    pub field: bool,
    /// Drop every nonlinear term: no `E·∇ᵥf` in the field step and the
    /// linearized collision operator `L`.
    pub linearized: bool,
}

impl Default for TimeStepConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            scheme: Scheme::StrangRk4,
            picard_tol: 1e-10,
            picard_max_iters: 30,
            picard_anderson_depth: 0,
            conservative_correction: true,
            collision_substeps: None,
            linear_tol: 1e-12,
            linear_max_iters: 500,
            collisions: true,
            field: true,
            linearized: false,
        }
    }
}

impl TimeStepConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            problems.push(format!("dt must be positive (got {})", self.dt));
        }
        if !(self.picard_tol > 0.0) {
            problems.push(format!("picard_tol must be positive (got {})", self.picard_tol));
        }
        if self.picard_max_iters == 0 {
            problems.push("picard_max_iters must be at least 1".into());
        }
        if self.collision_substeps == Some(0) {
            problems.push("collision_substeps must be at least 1".into());
        }
        if !(self.linear_tol > 0.0) {
            problems.push(format!("linear_tol must be positive (got {})", self.linear_tol));
        }
        if self.linearized && self.scheme == Scheme::PicardImplicit {
            problems.push("linearized runs need an explicit collision scheme (strang_rk4 or strang_rkc)".into());
        }
        problems
    }
}

/// Free streaming `∂_t f + v·∇ₓf = 0` over `dt`, exactly.
///
/// Each spatial Fourier mode at velocity node `v` is multiplied by
/// `exp(-i ξ·v dt)`. Nyquist modes are dropped, since a shifted Nyquist
/// cosine is not representable on the grid.
pub fn transport_step(state: &mut SystemState, dt: f64) -> Result<()> {
    let grid = state.grid().clone();
    let (x, v) = (&grid.x, &grid.v);
    let nv = v.len();
    let nx = x.len();
    let velocities = v.velocities();
    let wave: Vec<[f64; 3]> = (0..nx).map(|k| x.wavevector(k)).collect();
    let nyquist: Vec<bool> = (0..nx)
        .map(|k| {
            let m = x.multi_index(k);
            (0..x.dim()).any(|a| m[a] == x.n() / 2)
        })
        .collect();
    let shift = |f: &[f64]| -> Vec<f64> {
        let columns: Vec<Vec<f64>> = (0..nv)
            .into_par_iter()
            .map(|iv| {
                let column: Vec<f64> = (0..nx).map(|ix| f[ix * nv + iv]).collect();
                let mut coeffs = x.fft_forward(&column);
                let vel = velocities[iv];
                for (k, c) in coeffs.iter_mut().enumerate() {
                    if nyquist[k] {
                        *c = Complex64::default();
                        continue;
                    }
                    let xi = wave[k];
                    let phase = -(xi[0] * vel[0] + xi[1] * vel[1] + xi[2] * vel[2]) * dt;
                    *c *= Complex64::from_polar(1.0, phase);
                }
                x.fft_inverse_real(coeffs)
            })
            .collect();
        let mut out = vec![0.0; f.len()];
        for (iv, column) in columns.iter().enumerate() {
            for (ix, value) in column.iter().enumerate() {
                out[ix * nv + iv] = *value;
            }
        }
        out
    };
    let plus = shift(state.f_plus());
    let minus = shift(state.f_minus());
    state.set_species(plus, minus)
}

/// `∂_t f± = ∓E·∇ᵥf± ± E·vμ` with `E = -∇ₓφ` frozen, one RK4 step.
pub fn field_step(state: &mut SystemState, dt: f64) -> Result<()> {
    field_step_with(state, dt, true)
}

/// [`field_step`], optionally without the nonlinear term `∓E·∇ᵥf±`.
pub fn field_step_with(state: &mut SystemState, dt: f64, nonlinear: bool) -> Result<()> {
    let grid = state.grid().clone();
    let bg = state.background().clone();
    let v = &grid.v;
    let nv = v.len();
    let dim = grid.x.dim();
    let field = state.electric_field().to_vec();
    let mu = bg.mu();
    let velocities = bg.velocities();
    let time = state.time();

    let step_species = |f: &[f64], sign: f64| -> Vec<f64> {
        let nodes: Vec<Vec<f64>> = f
            .par_chunks(nv)
            .enumerate()
            .map(|(ix, slice)| {
                let e: Vec<f64> = (0..dim).map(|a| field[a][ix]).collect();
                if e.iter().all(|&c| c == 0.0) {
                    return slice.to_vec();
                }
                let source: Vec<f64> = (0..nv)
                    .map(|p| sign * mu[p] * (0..dim).map(|a| e[a] * velocities[p][a]).sum::<f64>())
                    .collect();
                if !nonlinear {
                    return slice.iter().zip(&source).map(|(f, s)| f + dt * s).collect();
                }
                let rhs = |g: &[f64]| -> Vec<f64> {
                    let mut out = source.clone();
                    let mut d = vec![0.0; nv];
                    for (a, ea) in e.iter().enumerate() {
                        if *ea == 0.0 {
                            continue;
                        }
                        d.copy_from_slice(&v.derivative(g, a, 1).expect("velocity slice"));
                        for (o, dv) in out.iter_mut().zip(&d) {
                            *o -= sign * ea * dv;
                        }
                    }
                    out
                };
                rk4(slice, dt, rhs)
            })
            .collect();
        nodes.concat()
    };
    let plus = step_species(state.f_plus(), 1.0);
    let minus = step_species(state.f_minus(), -1.0);
    check_finite(&plus, "field step", time)?;
    check_finite(&minus, "field step", time)?;
    state.set_species(plus, minus)
}

fn rk4(y: &[f64], dt: f64, rhs: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let axpy = |a: f64, x: &[f64]| -> Vec<f64> { y.iter().zip(x).map(|(p, q)| p + a * q).collect() };
    let k1 = rhs(y);
    let k2 = rhs(&axpy(0.5 * dt, &k1));
    let k3 = rhs(&axpy(0.5 * dt, &k2));
    let k4 = rhs(&axpy(dt, &k3));
    (0..y.len())
        .map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

fn check_finite(values: &[f64], stage: &'static str, time: f64) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, time })
    }
}

/// What one collision substep did.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    /// Explicit sub-steps taken (explicit scheme).
    pub substeps: usize,
    /// Picard iterations taken (implicit scheme).
    pub picard_iterations: usize,
    /// `||f^(m+1) - f^(m)||` per Picard iteration.
    pub picard_differences: Vec<f64>,
    /// Ratios of successive Picard differences.
    pub contraction_ratios: Vec<f64>,
    /// Largest Krylov iteration count over nodes and Picard iterations.
    pub max_linear_iterations: usize,
}

impl CollisionReport {
    pub fn max_contraction(&self) -> Option<f64> {
        self.contraction_ratios.iter().copied().reduce(f64::max)
    }
}

/// Safety factor applied to the measured spectral radius.
const RADIUS_SAFETY: f64 = 1.5;

/// Number of explicit RK4 collision sub-steps needed for step `dt`.
pub fn explicit_substeps(op: &CollisionOperator, dt: f64) -> usize {
    // RK4 is stable on the negative real axis up to about 2.78
    ((dt * RADIUS_SAFETY * op.spectral_radius() / 2.5).ceil() as usize).max(1)
}

/// Damping of the RKC scheme, `w₀ = 1 + ε/s²`.
const RKC_DAMPING: f64 = 2.0 / 13.0;

/// Most RKC stages per sub-step. Longer chains lose stability on the
/// slightly complex spectrum of the discrete operator at hard potentials.
pub const MAX_RKC_STAGES: usize = 16;

/// Chebyshev data of an `s`-stage damped RKC step: `w₀`, `w₁` and
/// `T_j(w₀)`, `T_j'(w₀)`, `T_j''(w₀)` for `j = 0..=s`.
fn rkc_chebyshev(s: usize) -> (f64, f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let w0 = 1.0 + RKC_DAMPING / (s * s) as f64;
    let mut t = vec![0.0; s + 1];
    let mut dt1 = vec![0.0; s + 1];
    let mut dt2 = vec![0.0; s + 1];
    t[0] = 1.0;
    t[1] = w0;
    dt1[1] = 1.0;
    for j in 2..=s {
        t[j] = 2.0 * w0 * t[j - 1] - t[j - 2];
        dt1[j] = 2.0 * t[j - 1] + 2.0 * w0 * dt1[j - 1] - dt1[j - 2];
        dt2[j] = 4.0 * dt1[j - 1] + 2.0 * w0 * dt2[j - 1] - dt2[j - 2];
    }
    let w1 = dt1[s] / dt2[s];
    (w0, w1, t, dt1, dt2)
}

/// Length of the real stability interval of an `s`-stage step.
fn rkc_interval(s: usize) -> f64 {
    let (w0, w1, ..) = rkc_chebyshev(s);
    (1.0 + w0) / w1
}

/// Number of RKC stages for one step of size `dt`.
pub fn rkc_stages(op: &CollisionOperator, dt: f64) -> usize {
    let needed = dt * RADIUS_SAFETY * op.spectral_radius();
    let mut s = 2;
    while rkc_interval(s) < needed {
        s += 1;
    }
    s
}

/// Sub-steps needed to keep [`rkc_stages`] within [`MAX_RKC_STAGES`].
pub fn rkc_substeps(op: &CollisionOperator, dt: f64) -> usize {
    let mut m = 1;
    while rkc_stages(op, dt / m as f64) > MAX_RKC_STAGES {
        m += 1;
    }
    m
}

/// Collision substep over `dt`.
pub fn collision_step(
    state: &mut SystemState,
    dt: f64,
    config: &TimeStepConfig,
    op: &CollisionOperator,
) -> Result<CollisionReport> {
    match config.scheme {
        Scheme::StrangRk4 => collision_explicit(state, dt, config, op),
        Scheme::StrangRkc => collision_rkc(state, dt, config, op),
        Scheme::PicardImplicit => collision_picard(state, dt, config, op),
    }
}

fn node_pairs<'a>(f: &'a [f64], g: &'a [f64], nv: usize) -> impl IndexedParallelIterator<Item = (&'a [f64], &'a [f64])> {
    f.par_chunks(nv).zip(g.par_chunks(nv))
}

fn node_rhs(op: &CollisionOperator, config: &TimeStepConfig, s: &[Vec<f64>; 2]) -> Result<[Vec<f64>; 2]> {
    if config.linearized {
        op.linearized_node_rhs(&s[0], &s[1])
    } else {
        op.node_rhs(&s[0], &s[1])
    }
}

fn collision_explicit(
    state: &mut SystemState,
    dt: f64,
    config: &TimeStepConfig,
    op: &CollisionOperator,
) -> Result<CollisionReport> {
    let substeps = config.collision_substeps.unwrap_or_else(|| explicit_substeps(op, dt));
    let h = dt / substeps as f64;
    let nv = op.grid().len();
    let time = state.time();
    let results: Vec<[Vec<f64>; 2]> = node_pairs(state.f_plus(), state.f_minus(), nv)
        .map(|(p, m)| -> Result<[Vec<f64>; 2]> {
            let mut y = [p.to_vec(), m.to_vec()];
            for _ in 0..substeps {
                y = rk4_pair(&y, h, |s| node_rhs(op, config, s))?;
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let (plus, minus) = unzip_nodes(results);
    check_finite(&plus, "collision step", time)?;
    check_finite(&minus, "collision step", time)?;
    state.set_species(plus, minus)?;
    Ok(CollisionReport {
        substeps,
        ..Default::default()
    })
}

fn collision_rkc(
    state: &mut SystemState,
    dt: f64,
    config: &TimeStepConfig,
    op: &CollisionOperator,
) -> Result<CollisionReport> {
    let substeps = config.collision_substeps.unwrap_or_else(|| rkc_substeps(op, dt));
    let h = dt / substeps as f64;
    let stages = rkc_stages(op, h);
    let nv = op.grid().len();
    let time = state.time();
    let results: Vec<[Vec<f64>; 2]> = node_pairs(state.f_plus(), state.f_minus(), nv)
        .map(|(p, m)| -> Result<[Vec<f64>; 2]> {
            let mut y = [p.to_vec(), m.to_vec()];
            for _ in 0..substeps {
                y = rkc_pair(&y, h, stages, |s| node_rhs(op, config, s))?;
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let (plus, minus) = unzip_nodes(results);
    check_finite(&plus, "collision step", time)?;
    check_finite(&minus, "collision step", time)?;
    state.set_species(plus, minus)?;
    Ok(CollisionReport {
        substeps: substeps * stages,
        ..Default::default()
    })
}

/// One step of the damped second-order Runge-Kutta-Chebyshev method
/// (Sommeijer, Shampine and Verwer) with `stages` stages.
fn rkc_pair(
    y: &[Vec<f64>; 2],
    dt: f64,
    stages: usize,
    rhs: impl Fn(&[Vec<f64>; 2]) -> Result<[Vec<f64>; 2]>,
) -> Result<[Vec<f64>; 2]> {
    let s = stages;
    let (w0, w1, t, dt1, dt2) = rkc_chebyshev(s);
    let mut b = vec![0.0; s + 1];
    for j in 2..=s {
        b[j] = dt2[j] / (dt1[j] * dt1[j]);
    }
    b[0] = b[2];
    b[1] = b[2];
    let a: Vec<f64> = (0..=s).map(|j| 1.0 - b[j] * t[j]).collect();

    let f0 = rhs(y)?;
    let combine = |terms: &[(f64, &[Vec<f64>; 2])]| -> [Vec<f64>; 2] {
        std::array::from_fn(|sp| {
            (0..y[sp].len())
                .map(|i| terms.iter().map(|(c, v)| c * v[sp][i]).sum())
                .collect()
        })
    };
    let mu1 = b[1] * w1;
    let mut prev2 = y.clone();
    let mut prev = combine(&[(1.0, y), (mu1 * dt, &f0)]);
    for j in 2..=s {
        let mu = 2.0 * b[j] * w0 / b[j - 1];
        let nu = -b[j] / b[j - 2];
        let mu_t = 2.0 * b[j] * w1 / b[j - 1];
        let gamma_t = -a[j - 1] * mu_t;
        let fj = rhs(&prev)?;
        let next = combine(&[
            (1.0 - mu - nu, y),
            (mu, &prev),
            (nu, &prev2),
            (mu_t * dt, &fj),
            (gamma_t * dt, &f0),
        ]);
        prev2 = prev;
        prev = next;
    }
    Ok(prev)
}

fn rk4_pair(y: &[Vec<f64>; 2], dt: f64, rhs: impl Fn(&[Vec<f64>; 2]) -> Result<[Vec<f64>; 2]>) -> Result<[Vec<f64>; 2]> {
    let axpy = |a: f64, k: &[Vec<f64>; 2]| -> [Vec<f64>; 2] {
        std::array::from_fn(|s| y[s].iter().zip(&k[s]).map(|(p, q)| p + a * q).collect())
    };
    let k1 = rhs(y)?;
    let k2 = rhs(&axpy(0.5 * dt, &k1))?;
    let k3 = rhs(&axpy(0.5 * dt, &k2))?;
    let k4 = rhs(&axpy(dt, &k3))?;
    Ok(std::array::from_fn(|s| {
        (0..y[s].len())
            .map(|i| y[s][i] + dt / 6.0 * (k1[s][i] + 2.0 * k2[s][i] + 2.0 * k3[s][i] + k4[s][i]))
            .collect()
    }))
}

fn unzip_nodes(nodes: Vec<[Vec<f64>; 2]>) -> (Vec<f64>, Vec<f64>) {
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    for [p, m] in nodes {
        plus.extend(p);
        minus.extend(m);
    }
    (plus, minus)
}

/// Implicit Euler for the collision substep,
/// `f^{n+1} = f^n + dt [Q(s, μ) + Q(2μ + s, f^{n+1})]`,
/// with `s` taken from the previous Picard iterate.
///
/// With `picard_anderson_depth > 0` the iterates are combined by Anderson
/// mixing over that many previous residuals.
fn collision_picard(
    state: &mut SystemState,
    dt: f64,
    config: &TimeStepConfig,
    op: &CollisionOperator,
) -> Result<CollisionReport> {
    let nv = op.grid().len();
    let time = state.time();
    let start = [state.f_plus().to_vec(), state.f_minus().to_vec()];
    let half = start[0].len();
    let mut x: Vec<f64> = start.concat();
    let mut report = CollisionReport::default();
    let cell = state.grid().cell_volume();
    let linear_tol = config.linear_tol.min(0.01 * config.picard_tol);
    let mut mixer = Anderson::new(config.picard_anderson_depth);

    for iteration in 1..=config.picard_max_iters {
        let (xp, xm) = x.split_at(half);
        let solved: Vec<([Vec<f64>; 2], usize)> = node_pairs(xp, xm, nv)
            .zip(node_pairs(&start[0], &start[1], nv))
            .map(|((p, m), (p0, m0))| -> Result<([Vec<f64>; 2], usize)> {
                let sum: Vec<f64> = p.iter().zip(m).map(|(a, b)| a + b).collect();
                let perturbation = op.tables().coefficients(&sum)?;
                let full: CollisionCoefficients = perturbation.add_scaled(2.0, op.mu_coefficients());
                let source = op.source(&perturbation);
                let mut iters = 0;
                let mut out: [Vec<f64>; 2] = [p.to_vec(), m.to_vec()];
                for (guess, f0) in out.iter_mut().zip([p0, m0]) {
                    let rhs: Vec<f64> = f0.iter().zip(&source).map(|(a, s)| a + dt * s).collect();
                    let outcome = op.implicit_solve(&full, &rhs, guess, dt, linear_tol, config.linear_max_iters);
                    if !outcome.converged {
                        log::warn!(
                            "collision linear solve stopped at relative residual {:.2e} after {} iterations",
                            outcome.residual,
                            outcome.iterations
                        );
                    }
                    iters = iters.max(outcome.iterations);
                }
                Ok((out, iters))
            })
            .collect::<Result<_>>()?;
        let iters = solved.iter().map(|s| s.1).max().unwrap_or(0);
        let (plus, minus) = unzip_nodes(solved.into_iter().map(|s| s.0).collect());
        check_finite(&plus, "collision step", time)?;
        check_finite(&minus, "collision step", time)?;
        let g: Vec<f64> = [plus, minus].concat();
        let residual: Vec<f64> = g.iter().zip(&x).map(|(a, b)| a - b).collect();
        let diff = (norm_sq(&residual) * cell).sqrt();
        let norm = (norm_sq(&g) * cell).sqrt();
        if let Some(&last) = report.picard_differences.last() {
            if last > 0.0 {
                report.contraction_ratios.push(diff / last);
            }
        }
        report.picard_differences.push(diff);
        report.picard_iterations = iteration;
        report.max_linear_iterations = report.max_linear_iterations.max(iters);
        if diff <= config.picard_tol * norm {
            let (plus, minus) = g.split_at(half);
            let (mut plus, mut minus) = (plus.to_vec(), minus.to_vec());
            if op.conservative() {
                correct_increments(op, nv, &start, &mut plus, &mut minus);
            }
            state.set_species(plus, minus)?;
            return Ok(report);
        }
        x = mixer.next(g, residual);
    }
    Err(Error::NonConvergence {
        iterations: config.picard_max_iters,
        residual: report.picard_differences.last().copied().unwrap_or(f64::NAN),
    })
}

/// Anderson mixing for the fixed-point map `x ↦ G(x)`.
struct Anderson {
    depth: usize,
    last: Option<(Vec<f64>, Vec<f64>)>,
    d_residual: Vec<Vec<f64>>,
    d_value: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            last: None,
            d_residual: Vec::new(),
            d_value: Vec::new(),
        }
    }

    /// Next iterate given `G(x_k)` and `r_k = G(x_k) - x_k`.
    fn next(&mut self, value: Vec<f64>, residual: Vec<f64>) -> Vec<f64> {
        if self.depth == 0 {
            return value;
        }
        if let Some((g_prev, r_prev)) = self.last.take() {
            self.d_value.push(value.iter().zip(&g_prev).map(|(a, b)| a - b).collect());
            self.d_residual.push(residual.iter().zip(&r_prev).map(|(a, b)| a - b).collect());
            if self.d_value.len() > self.depth {
                self.d_value.remove(0);
                self.d_residual.remove(0);
            }
        }
        let m = self.d_residual.len();
        let mut out = value.clone();
        if m > 0 {
            let mut gram: Vec<Vec<f64>> = (0..m)
                .map(|i| (0..m).map(|j| dot(&self.d_residual[i], &self.d_residual[j])).collect())
                .collect();
            let trace: f64 = (0..m).map(|i| gram[i][i]).sum();
            for (i, row) in gram.iter_mut().enumerate() {
                row[i] += 1e-12 * trace;
            }
            let rhs: Vec<f64> = (0..m).map(|i| dot(&self.d_residual[i], &residual)).collect();
            if let Some(gamma) = solve_dense(gram, rhs) {
                for (gi, dg) in gamma.iter().zip(&self.d_value) {
                    for (o, d) in out.iter_mut().zip(dg) {
                        *o -= gi * d;
                    }
                }
            }
        }
        self.last = Some((value, residual));
        out
    }
}

/// Remove the invariant moments of `f^{n+1} - f^n` node by node.
fn correct_increments(op: &CollisionOperator, nv: usize, start: &[Vec<f64>; 2], plus: &mut [f64], minus: &mut [f64]) {
    plus.par_chunks_mut(nv)
        .zip(minus.par_chunks_mut(nv))
        .zip(start[0].par_chunks(nv).zip(start[1].par_chunks(nv)))
        .for_each(|((p, m), (p0, m0))| {
            let mut dp: Vec<f64> = p.iter().zip(p0).map(|(a, b)| a - b).collect();
            let mut dm: Vec<f64> = m.iter().zip(m0).map(|(a, b)| a - b).collect();
            op.correct(&mut dp, &mut dm);
            for i in 0..nv {
                p[i] = p0[i] + dp[i];
                m[i] = m0[i] + dm[i];
            }
        });
}

/// Per-step summary handed to the diagnostics sink.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub time: f64,
    pub dt: f64,
    pub collision: Option<CollisionReport>,
    /// `min(μ + f±)` over the grid after the step.
    pub min_density: f64,
}

/// Largest stable field-step size, `0.5 / (max|∇ₓφ| · k_v)`.
pub fn field_step_limit(state: &SystemState) -> f64 {
    let e_max = state
        .electric_field()
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let k = state.grid().v.max_wavenumber();
    if e_max == 0.0 {
        f64::INFINITY
    } else {
        0.5 / (e_max * k)
    }
}

/// `dt · max|v| · max|ξ|`, compared against `π` for the CFL advisory.
pub fn transport_cfl(state: &SystemState, dt: f64) -> f64 {
    let g = state.grid();
    dt * g.v.max_speed() * g.x.max_wavenumber() * (g.x.dim() as f64).sqrt()
}

/// `min(μ + f±)` over the grid.
pub fn min_density(state: &SystemState) -> f64 {
    let nv = state.grid().v.len();
    let mu = state.background().mu();
    [state.f_plus(), state.f_minus()]
        .iter()
        .flat_map(|f| f.iter().enumerate().map(|(i, v)| mu[i % nv] + v))
        .fold(f64::INFINITY, f64::min)
}

/// One Strang step.
pub fn strang_step(
    state: &mut SystemState,
    dt: f64,
    config: &TimeStepConfig,
    op: Option<&CollisionOperator>,
) -> Result<Option<CollisionReport>> {
    let half = 0.5 * dt;
    transport_step(state, half)?;
    if config.field {
        field_step_with(state, half, !config.linearized)?;
    }
    let report = match (config.collisions, op) {
        (true, Some(op)) => Some(collision_step(state, dt, config, op)?),
        _ => None,
    };
    if config.field {
        field_step_with(state, half, !config.linearized)?;
    }
    transport_step(state, half)?;
    let time = state.time();
    check_finite(state.f_plus(), "transport step", time)?;
    check_finite(state.f_minus(), "transport step", time)?;
    state.set_time(time + dt);
    Ok(report)
}

/// Advance to `t_final` with the configured step, calling `sink` after every
/// step. The last step is shortened to land on `t_final`.
///
/// On failure the state is restored to the last completed step, so callers
/// can dump it.
pub fn advance(
    state: &mut SystemState,
    t_final: f64,
    config: &TimeStepConfig,
    op: Option<&CollisionOperator>,
    mut sink: impl FnMut(&SystemState, &StepReport) -> Result<()>,
) -> Result<usize> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if !(t_final > state.time()) {
        return Err(Error::Parameter(format!(
            "t_final {t_final} must exceed the current time {}",
            state.time()
        )));
    }
    if config.collisions && op.is_none() {
        return Err(Error::Parameter("collisions enabled but no collision operator supplied".into()));
    }
    let cfl = transport_cfl(state, config.dt);
    if cfl > std::f64::consts::PI {
        log::warn!("dt·max|v|·max|ξ| = {cfl:.3} exceeds π; transport is exact but the field step may be inaccurate");
    }
    let mut step = 0;
    let eps = 1e-12 * t_final.abs().max(1.0);
    while state.time() < t_final - eps {
        let dt = config.dt.min(t_final - state.time());
        if step % 10 == 0 && config.field {
            let limit = field_step_limit(state);
            if dt > limit {
                log::warn!("dt = {dt:.3e} exceeds the field-step stability estimate {limit:.3e}");
            }
        }
        let saved = state.clone();
        let report = match strang_step(state, dt, config, op) {
            Ok(r) => r,
            Err(e) => {
                *state = saved;
                return Err(e);
            }
        };
        step += 1;
        let report = StepReport {
            step,
            time: state.time(),
            dt,
            collision: report,
            min_density: min_density(state),
        };
        sink(state, &report)?;
    }
    Ok(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PhaseGrid;
    use crate::state::{maxwellian, Background};
    use std::sync::Arc;

    fn background(dim: usize, nx: usize, nv: usize) -> Arc<Background> {
        Background::new(PhaseGrid::build(dim, nx, nv, 8.0).unwrap())
    }

    fn mode_state(bg: &Arc<Background>, amp: f64) -> SystemState {
        let g = bg.grid();
        let nv = g.v.len();
        let mu = bg.mu();
        let plus: Vec<f64> = (0..g.len()).map(|i| amp * g.x.coords(i / nv)[0].cos() * mu[i % nv]).collect();
        let minus = vec![0.0; g.len()];
        SystemState::new(bg.clone(), plus, minus, 0.0).unwrap()
    }

    #[test]
    fn transport_matches_characteristics() {
        let bg = background(1, 16, 8);
        let mut state = mode_state(&bg, 1.0);
        let dt = 0.37;
        transport_step(&mut state, dt).unwrap();
        let g = bg.grid();
        let nv = g.v.len();
        for i in 0..g.len() {
            let x = g.x.coords(i / nv)[0];
            let v = g.v.velocity(i % nv)[0];
            let expected = (x - v * dt).cos() * bg.mu()[i % nv];
            assert!((state.f_plus()[i] - expected).abs() < 1e-13);
        }
    }

    #[test]
    fn transport_composes_exactly() {
        let bg = background(2, 8, 8);
        let mut a = mode_state(&bg, 1.0);
        let mut b = a.clone();
        transport_step(&mut a, 0.3).unwrap();
        transport_step(&mut b, 0.15).unwrap();
        transport_step(&mut b, 0.15).unwrap();
        for (x, y) in a.f_plus().iter().zip(b.f_plus()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn homogeneous_data_ignores_transport() {
        let bg = background(1, 8, 8);
        let nv = bg.grid().v.len();
        let plus: Vec<f64> = (0..bg.grid().len()).map(|i| 0.1 * bg.mu()[i % nv]).collect();
        let mut state = SystemState::new(bg.clone(), plus.clone(), plus.clone(), 0.0).unwrap();
        transport_step(&mut state, 1.3).unwrap();
        for (x, y) in state.f_plus().iter().zip(&plus) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn field_step_source_term_to_first_order() {
        let bg = background(1, 8, 8);
        let g = bg.grid();
        let phi: Vec<f64> = (0..g.x.len()).map(|i| g.x.coords(i)[0].sin()).collect();
        let zeros = vec![0.0; g.len()];
        let nv = g.v.len();
        let mut errors = Vec::new();
        for dt in [1e-2, 5e-3] {
            let mut state =
                SystemState::with_external_potential(bg.clone(), zeros.clone(), zeros.clone(), phi.clone(), 0.0).unwrap();
            field_step(&mut state, dt).unwrap();
            let mut err: f64 = 0.0;
            for i in 0..g.len() {
                let grad_phi = g.x.coords(i / nv)[0].cos();
                let v = g.v.velocity(i % nv)[0];
                let expected = -dt * grad_phi * v * bg.mu()[i % nv];
                err = err.max((state.f_plus()[i] - expected).abs());
                err = err.max((state.f_minus()[i] + expected).abs());
            }
            errors.push(err);
        }
        // O(dt²) remainder
        assert!(errors[0] / errors[1] > 3.5, "{errors:?}");
    }

    #[test]
    fn field_step_species_symmetry() {
        let bg = background(1, 8, 8);
        let g = bg.grid();
        let nv = g.v.len();
        let phi: Vec<f64> = (0..g.x.len()).map(|i| (2.0 * g.x.coords(i)[0]).cos()).collect();
        let neg_phi: Vec<f64> = phi.iter().map(|p| -p).collect();
        let f: Vec<f64> = (0..g.len())
            .map(|i| 0.01 * g.v.velocity(i % nv)[1] * bg.mu()[i % nv] * g.x.coords(i / nv)[0].sin())
            .collect();
        let h: Vec<f64> = f.iter().map(|x| 0.5 * x).collect();
        let mut a = SystemState::with_external_potential(bg.clone(), f.clone(), h.clone(), phi, 0.0).unwrap();
        let mut b = SystemState::with_external_potential(bg.clone(), h, f, neg_phi, 0.0).unwrap();
        field_step(&mut a, 0.05).unwrap();
        field_step(&mut b, 0.05).unwrap();
        for (x, y) in a.f_plus().iter().zip(b.f_minus()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_state_is_a_fixed_point() {
        let bg = background(1, 4, 8);
        let op = CollisionOperator::new(-1.0, &bg.grid().v, true).unwrap();
        for scheme in [Scheme::StrangRk4, Scheme::PicardImplicit] {
            let mut state = SystemState::zeros(bg.clone());
            let config = TimeStepConfig {
                dt: 0.1,
                scheme,
                ..Default::default()
            };
            advance(&mut state, 0.3, &config, Some(&op), |_, _| Ok(())).unwrap();
            assert!(state.f_plus().iter().chain(state.f_minus()).all(|&v| v == 0.0));
            assert!((state.time() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn free_streaming_run_matches_analytic_solution() {
        let bg = background(1, 16, 8);
        let mut state = mode_state(&bg, 1.0);
        let config = TimeStepConfig {
            dt: 0.1,
            collisions: false,
            field: false,
            ..Default::default()
        };
        advance(&mut state, 1.0, &config, None, |_, _| Ok(())).unwrap();
        let g = bg.grid();
        let nv = g.v.len();
        for i in 0..g.len() {
            let x = g.x.coords(i / nv)[0];
            let v = g.v.velocity(i % nv)[0];
            let expected = (x - v).cos() * bg.mu()[i % nv];
            assert!((state.f_plus()[i] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn explicit_collision_is_fourth_order() {
        let bg = background(1, 4, 8);
        let op = CollisionOperator::new(-3.0, &bg.grid().v, false).unwrap();
        let g = bg.grid();
        let nv = g.v.len();
        let mu = maxwellian(&g.v);
        let plus: Vec<f64> = (0..g.len())
            .map(|i| {
                let v = g.v.velocity(i % nv);
                0.05 * (v[0] * v[0] - 1.0) * mu[i % nv] * (1.0 + 0.5 * g.x.coords(i / nv)[0].cos())
            })
            .collect();
        let base = SystemState::new(bg.clone(), plus, vec![0.0; g.len()], 0.0).unwrap();
        let run = |substeps: usize| {
            let mut s = base.clone();
            let config = TimeStepConfig {
                collision_substeps: Some(substeps),
                ..Default::default()
            };
            collision_step(&mut s, 0.2, &config, &op).unwrap();
            s.f_plus().to_vec()
        };
        let a = run(1);
        let b = run(2);
        let c = run(4);
        let d1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d2: f64 = b.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let ratio = d1 / d2;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rkc_is_second_order_and_conservative() {
        let bg = background(1, 4, 8);
        let op = CollisionOperator::new(-3.0, &bg.grid().v, true).unwrap();
        let g = bg.grid();
        let nv = g.v.len();
        let mu = maxwellian(&g.v);
        let plus: Vec<f64> = (0..g.len())
            .map(|i| {
                let v = g.v.velocity(i % nv);
                0.05 * (v[0] * v[0] - 1.0) * mu[i % nv] * (1.0 + 0.5 * g.x.coords(i / nv)[0].cos())
            })
            .collect();
        let base = SystemState::new(bg.clone(), plus, vec![0.0; g.len()], 0.0).unwrap();
        let run = |substeps: usize| {
            let mut s = base.clone();
            let config = TimeStepConfig {
                scheme: Scheme::StrangRkc,
                collision_substeps: Some(substeps),
                ..Default::default()
            };
            collision_step(&mut s, 0.4, &config, &op).unwrap();
            s
        };
        let a = run(1);
        let b = run(2);
        let c = run(4);
        let dist = |x: &SystemState, y: &SystemState| -> f64 {
            x.f_plus().iter().zip(y.f_plus()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
        };
        let ratio = dist(&a, &b) / dist(&b, &c);
        assert!((3.0..6.0).contains(&ratio), "ratio {ratio}");
        let report = crate::state::check_conservation(&c, &base);
        assert!(report.max_relative_drift() < 1e-13, "{report:?}");
    }

    #[test]
    fn picard_contracts_on_small_data() {
        let bg = background(1, 4, 8);
        let op = CollisionOperator::new(-3.0, &bg.grid().v, true).unwrap();
        let mut state = mode_state(&bg, 1e-2);
        let config = TimeStepConfig {
            dt: 1e-2,
            scheme: Scheme::PicardImplicit,
            ..Default::default()
        };
        let report = collision_step(&mut state, 1e-2, &config, &op).unwrap();
        assert!(report.picard_iterations <= 10, "{report:?}");
        assert!(report.max_contraction().unwrap() < 1.0, "{report:?}");
    }

    #[test]
    fn anderson_mixing_accelerates_picard() {
        let bg = background(1, 4, 8);
        let op = CollisionOperator::new(0.0, &bg.grid().v, true).unwrap();
        let run = |depth: usize| {
            let mut state = mode_state(&bg, 1e-2);
            let config = TimeStepConfig {
                dt: 1e-2,
                scheme: Scheme::PicardImplicit,
                picard_anderson_depth: depth,
                ..Default::default()
            };
            let report = collision_step(&mut state, 1e-2, &config, &op).unwrap();
            (report.picard_iterations, state)
        };
        let (plain, a) = run(0);
        let (mixed, b) = run(4);
        assert!(mixed < plain, "{mixed} vs {plain}");
        let diff: f64 = a.f_plus().iter().zip(b.f_plus()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn picard_reports_non_convergence() {
        let bg = background(1, 4, 8);
        let op = CollisionOperator::new(0.0, &bg.grid().v, true).unwrap();
        let mut state = mode_state(&bg, 1e-1);
        let config = TimeStepConfig {
            dt: 1e-2,
            scheme: Scheme::PicardImplicit,
            picard_max_iters: 1,
            picard_tol: 1e-14,
            ..Default::default()
        };
        let err = collision_step(&mut state, 1e-2, &config, &op).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations: 1, .. }));
    }

    #[test]
    fn config_validation_collects_all_problems() {
        let config = TimeStepConfig {
            dt: -1.0,
            picard_tol: 0.0,
            picard_max_iters: 0,
            ..Default::default()
        };
        assert_eq!(config.validate().len(), 3);
    }
}
