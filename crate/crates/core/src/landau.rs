//! Landau collision operator
//!
//! ```text
//! Q(g, f) = ∂_i ∫ φ^{ij}(v - v*) (g* ∂_j f - f ∂_j g*) dv*
//!         = ∂_i [ (φ^{ij} ∗ g) ∂_j f - f (φ^{ij} ∗ ∂_j g) ]
//! φ^{ij}(u) = |u|^{γ+2} (δ_ij - u_i u_j / |u|²)
//! ```
//!
//! The velocity convolutions are evaluated exactly (as discrete linear
//! convolutions of box-supported data) through FFTs on a grid doubled in
//! every direction, so the kernel is sampled on `[-2L, 2L)^3` and nothing
//! wraps around. Velocity derivatives are spectral.
//!
//! For `γ < 0` the kernel is singular at the origin; the value at `u = 0`
//! is replaced by its average over the ball of radius `h/2`,
//! `2 (h/2)^{γ+2} / (γ + 5) δ_ij`. The divergence kernel
//! `∂_j φ^{ij} = -2 |u|^γ u_i` is odd and averages to zero there.

use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::VelocityGrid;
use crate::numerics::{bicgstab, norm_sq, pairwise_sum_by, solve_dense, KrylovOutcome};
use crate::state::{maxwellian, Background, SystemState};

/// Largest velocity resolution accepted by [`q_landau_direct`].
pub const DIRECT_MAX_NV: usize = 24;

/// Storage order of the six independent components of a symmetric 3×3
/// tensor: `00, 01, 02, 11, 12, 22`.
pub const SYM_PAIRS: [(usize, usize); 6] = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];

/// Index into [`SYM_PAIRS`] for `(i, j)` in either order.
pub fn sym_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    match (i, j) {
        (0, 0) => 0,
        (0, 1) => 1,
        (0, 2) => 2,
        (1, 1) => 3,
        (1, 2) => 4,
        _ => 5,
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(-3.0..=1.0).contains(&gamma) || gamma.is_nan() {
        return Err(Error::Parameter(format!("gamma must lie in [-3, 1] (got {gamma})")));
    }
    Ok(())
}

/// `φ^{ij}(u)` as the six symmetric components, with the regularized value
/// at the origin for grid spacing `h`.
pub fn kernel_components(gamma: f64, u: [f64; 3], h: f64) -> [f64; 6] {
    let r2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    if r2 == 0.0 {
        if gamma < 0.0 {
            let rho = 0.5 * h;
            let d = 2.0 * rho.powf(gamma + 2.0) / (gamma + 5.0);
            return [d, 0.0, 0.0, d, 0.0, d];
        }
        return [0.0; 6];
    }
    // |u|^γ (|u|² δ_ij - u_i u_j)
    let scale = r2.powf(0.5 * gamma);
    let mut out = [0.0; 6];
    for (k, &(i, j)) in SYM_PAIRS.iter().enumerate() {
        let delta = if i == j { r2 } else { 0.0 };
        out[k] = scale * (delta - u[i] * u[j]);
    }
    out
}

/// Full matrix form of [`kernel_components`].
pub fn kernel_matrix(gamma: f64, u: [f64; 3], h: f64) -> [[f64; 3]; 3] {
    let c = kernel_components(gamma, u, h);
    std::array::from_fn(|i| std::array::from_fn(|j| c[sym_index(i, j)]))
}

/// `∂_j φ^{ij}(u) = -2 |u|^γ u_i`, zero at the origin.
pub fn kernel_divergence(gamma: f64, u: [f64; 3]) -> [f64; 3] {
    let r2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    if r2 == 0.0 {
        return [0.0; 3];
    }
    let scale = -2.0 * r2.powf(0.5 * gamma);
    [scale * u[0], scale * u[1], scale * u[2]]
}

/// Zero-padded linear convolution on the doubled velocity grid.
///
/// Inputs live on the `n³` block `[0, n)³` of the `(2n)³` array, so only a
/// quarter of the lines need the first forward pass and only a quarter of
/// the output lines need the last inverse pass.
#[derive(Clone)]
struct PaddedConvolver {
    n: usize,
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for PaddedConvolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PaddedConvolver").field("n", &self.n).finish()
    }
}

impl PaddedConvolver {
    fn new(n: usize) -> Self {
        let m = 2 * n;
        let mut planner = FftPlanner::new();
        Self {
            n,
            m,
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
        }
    }

    fn len(&self) -> usize {
        self.m * self.m * self.m
    }

    /// Transform lines along `axis` for the listed outer positions.
    ///
    /// `axis = 2` lines are contiguous rows; `axis = 1` lines live inside
    /// the plane `i0`; `axis = 0` lines run across planes.
    fn lines(&self, data: &mut [Complex64], axis: usize, limit: usize, plan: &Arc<dyn Fft<f64>>) {
        let m = self.m;
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        match axis {
            2 => {
                for i0 in 0..limit {
                    let start = i0 * m * m;
                    plan.process_with_scratch(&mut data[start..start + limit * m], &mut scratch);
                }
            }
            1 => {
                let mut batch = vec![Complex64::default(); m * m];
                for i0 in 0..limit {
                    let plane = &mut data[i0 * m * m..(i0 + 1) * m * m];
                    for i1 in 0..m {
                        for i2 in 0..m {
                            batch[i2 * m + i1] = plane[i1 * m + i2];
                        }
                    }
                    plan.process_with_scratch(&mut batch, &mut scratch);
                    for i1 in 0..m {
                        for i2 in 0..m {
                            plane[i1 * m + i2] = batch[i2 * m + i1];
                        }
                    }
                }
            }
            _ => {
                let plane = m * m;
                // process the cross-plane lines in slabs of i1 to bound memory
                let mut batch = vec![Complex64::default(); m * m];
                for i1 in 0..limit {
                    for i2 in 0..m {
                        for i0 in 0..m {
                            batch[i2 * m + i0] = data[i0 * plane + i1 * m + i2];
                        }
                    }
                    plan.process_with_scratch(&mut batch, &mut scratch);
                    for i2 in 0..m {
                        for i0 in 0..m {
                            data[i0 * plane + i1 * m + i2] = batch[i2 * m + i0];
                        }
                    }
                }
            }
        }
    }

    /// Forward transform of `x + i y` placed in the low corner.
    fn forward_packed(&self, x: &[f64], y: Option<&[f64]>) -> Vec<Complex64> {
        let (n, m) = (self.n, self.m);
        let mut data = vec![Complex64::default(); self.len()];
        for i0 in 0..n {
            for i1 in 0..n {
                let src = (i0 * n + i1) * n;
                let dst = (i0 * m + i1) * m;
                for i2 in 0..n {
                    let im = y.map_or(0.0, |y| y[src + i2]);
                    data[dst + i2] = Complex64::new(x[src + i2], im);
                }
            }
        }
        self.lines(&mut data, 2, n, &self.forward);
        self.lines(&mut data, 1, n, &self.forward);
        self.lines(&mut data, 0, m, &self.forward);
        data
    }

    /// Split the transform of `x + i y` into the transforms of `x` and `y`.
    fn unpack(&self, z: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let m = self.m;
        let neg = |i: usize| (m - i) % m;
        let mut a = vec![Complex64::default(); z.len()];
        let mut b = vec![Complex64::default(); z.len()];
        for i0 in 0..m {
            for i1 in 0..m {
                for i2 in 0..m {
                    let k = (i0 * m + i1) * m + i2;
                    let mk = (neg(i0) * m + neg(i1)) * m + neg(i2);
                    let zc = z[mk].conj();
                    a[k] = (z[k] + zc) * 0.5;
                    b[k] = (z[k] - zc) * Complex64::new(0.0, -0.5);
                }
            }
        }
        (a, b)
    }

    /// Inverse transform, returning the real and imaginary parts restricted
    /// to the low `n³` corner.
    fn inverse_packed(&self, mut data: Vec<Complex64>) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n, self.m);
        self.lines(&mut data, 0, m, &self.inverse);
        self.lines(&mut data, 1, n, &self.inverse);
        self.lines(&mut data, 2, n, &self.inverse);
        let mut re = vec![0.0; n * n * n];
        let mut im = vec![0.0; n * n * n];
        for i0 in 0..n {
            for i1 in 0..n {
                let src = (i0 * m + i1) * m;
                let dst = (i0 * n + i1) * n;
                for i2 in 0..n {
                    re[dst + i2] = data[src + i2].re;
                    im[dst + i2] = data[src + i2].im;
                }
            }
        }
        (re, im)
    }
}

/// Spectral tables of the truncated Landau kernels on the doubled grid.
#[derive(Clone, Debug)]
pub struct LandauKernelTables {
    gamma: f64,
    grid: VelocityGrid,
    conv: PaddedConvolver,
    /// Real transforms of the six `φ^{ij}` components, pre-scaled by
    /// `h³ / (2n)³` so a product followed by an unnormalized inverse is the
    /// quadrature of the convolution.
    phi_hat: [Vec<f64>; 6],
    /// Imaginary parts of the transforms of `∂_j φ^{ij}` (odd kernels),
    /// scaled the same way.
    div_hat: [Vec<f64>; 3],
}

impl LandauKernelTables {
    pub fn build(gamma: f64, grid: &VelocityGrid) -> Result<Self> {
        check_gamma(gamma)?;
        let n = grid.n();
        let conv = PaddedConvolver::new(n);
        let m = conv.m;
        let h = grid.spacing();
        let lag = |i: usize| -> f64 {
            // index i on the doubled grid carries offset i (i < n) or i - 2n
            let s = crate::fft::signed_mode(i, m);
            // mode +n maps to -2L, outside the set of attainable differences
            if s == n as i64 {
                f64::NAN
            } else {
                s as f64 * h
            }
        };
        let mut phi_real: [Vec<Complex64>; 6] = std::array::from_fn(|_| vec![Complex64::default(); conv.len()]);
        let mut div_real: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::default(); conv.len()]);
        for i0 in 0..m {
            for i1 in 0..m {
                for i2 in 0..m {
                    let u = [lag(i0), lag(i1), lag(i2)];
                    if u.iter().any(|x| x.is_nan()) {
                        continue;
                    }
                    let k = (i0 * m + i1) * m + i2;
                    let c = kernel_components(gamma, u, h);
                    for (comp, value) in c.iter().enumerate() {
                        phi_real[comp][k] = Complex64::new(*value, 0.0);
                    }
                    let d = kernel_divergence(gamma, u);
                    for (comp, value) in d.iter().enumerate() {
                        div_real[comp][k] = Complex64::new(*value, 0.0);
                    }
                }
            }
        }
        let full = crate::fft::FftNd::new(&[m, m, m]);
        let scale = grid.weight() / conv.len() as f64;
        let phi_hat = phi_real.map(|mut table| {
            full.forward(&mut table);
            table.iter().map(|c| c.re * scale).collect()
        });
        let div_hat = div_real.map(|mut table| {
            full.forward(&mut table);
            table.iter().map(|c| c.im * scale).collect()
        });
        Ok(Self {
            gamma,
            grid: grid.clone(),
            conv,
            phi_hat,
            div_hat,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    fn check(&self, field: &[f64]) -> Result<()> {
        if field.len() != self.grid.len() {
            return Err(Error::GridMismatch {
                expected: self.grid.len(),
                found: field.len(),
            });
        }
        Ok(())
    }

    /// `a = φ ∗ g` and `b_i = φ^{ij} ∗ ∂_j g`.
    pub fn coefficients(&self, g: &[f64]) -> Result<CollisionCoefficients> {
        self.check(g)?;
        let grad = self.grid.gradient(g);
        let (g_hat, d0_hat) = self.conv.unpack(&self.conv.forward_packed(g, Some(&grad[0])));
        let (d1_hat, d2_hat) = self.conv.unpack(&self.conv.forward_packed(&grad[1], Some(&grad[2])));
        let d_hat = [d0_hat, d1_hat, d2_hat];

        let product = |table: &[f64], src: &[Complex64]| -> Vec<Complex64> {
            table.iter().zip(src).map(|(t, s)| s * *t).collect()
        };
        let pair = |x: Vec<Complex64>, y: Option<Vec<Complex64>>| -> (Vec<f64>, Vec<f64>) {
            let packed = match y {
                Some(y) => x.iter().zip(&y).map(|(a, b)| a + b * Complex64::i()).collect(),
                None => x,
            };
            self.conv.inverse_packed(packed)
        };

        let mut a: [Vec<f64>; 6] = Default::default();
        for k in 0..3 {
            let (lo, hi) = pair(
                product(&self.phi_hat[2 * k], &g_hat),
                Some(product(&self.phi_hat[2 * k + 1], &g_hat)),
            );
            a[2 * k] = lo;
            a[2 * k + 1] = hi;
        }
        let b_hat: [Vec<Complex64>; 3] = std::array::from_fn(|i| {
            let mut acc = vec![Complex64::default(); self.conv.len()];
            for (j, dj) in d_hat.iter().enumerate() {
                let table = &self.phi_hat[sym_index(i, j)];
                for ((o, t), s) in acc.iter_mut().zip(table).zip(dj) {
                    *o += s * *t;
                }
            }
            acc
        });
        let [b0, b1, b2] = b_hat;
        let (b0, b1) = pair(b0, Some(b1));
        let (b2, _) = pair(b2, None);
        Ok(CollisionCoefficients { a, b: [b0, b1, b2] })
    }

    /// `a = φ ∗ g` and `b_i = (∂_j φ^{ij}) ∗ g`: the same operator with the
    /// derivative moved onto the kernel before discretizing.
    pub fn coefficients_kernel_derivative(&self, g: &[f64]) -> Result<CollisionCoefficients> {
        self.check(g)?;
        let (g_hat, _) = self.conv.unpack(&self.conv.forward_packed(g, None));
        let mut a: [Vec<f64>; 6] = Default::default();
        for k in 0..3 {
            let packed: Vec<Complex64> = g_hat
                .iter()
                .zip(&self.phi_hat[2 * k])
                .zip(&self.phi_hat[2 * k + 1])
                .map(|((s, lo), hi)| s * Complex64::new(*lo, *hi))
                .collect();
            let (lo, hi) = self.conv.inverse_packed(packed);
            a[2 * k] = lo;
            a[2 * k + 1] = hi;
        }
        let b: [Vec<f64>; 3] = std::array::from_fn(|i| {
            let spectral: Vec<Complex64> = g_hat
                .iter()
                .zip(&self.div_hat[i])
                .map(|(s, t)| s * Complex64::new(0.0, *t))
                .collect();
            self.conv.inverse_packed(spectral).0
        });
        Ok(CollisionCoefficients { a, b })
    }
}

/// Velocity-dependent coefficients of the linear map `f ↦ Q(g, f)`:
/// `Q(g, f) = ∂_i (a^{ij} ∂_j f - b_i f)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionCoefficients {
    /// Symmetric diffusion matrix, components in [`SYM_PAIRS`] order.
    pub a: [Vec<f64>; 6],
    pub b: [Vec<f64>; 3],
}

impl CollisionCoefficients {
    pub fn zeros(len: usize) -> Self {
        Self {
            a: std::array::from_fn(|_| vec![0.0; len]),
            b: std::array::from_fn(|_| vec![0.0; len]),
        }
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, scale: f64, other: &Self) -> Self {
        let comb = |x: &Vec<f64>, y: &Vec<f64>| x.iter().zip(y).map(|(p, q)| p + scale * q).collect();
        Self {
            a: std::array::from_fn(|k| comb(&self.a[k], &other.a[k])),
            b: std::array::from_fn(|k| comb(&self.b[k], &other.b[k])),
        }
    }

    /// Flux `a^{ij} ∂_j f - b_i f` given `f` and its gradient.
    pub fn flux(&self, f: &[f64], grad: &[Vec<f64>; 3]) -> [Vec<f64>; 3] {
        std::array::from_fn(|i| {
            let (k0, k1, k2) = (sym_index(i, 0), sym_index(i, 1), sym_index(i, 2));
            (0..f.len())
                .map(|p| {
                    self.a[k0][p] * grad[0][p] + self.a[k1][p] * grad[1][p] + self.a[k2][p] * grad[2][p]
                        - self.b[i][p] * f[p]
                })
                .collect()
        })
    }

    /// Accumulate the flux into `out`.
    pub fn add_flux(&self, f: &[f64], grad: &[Vec<f64>; 3], out: &mut [Vec<f64>; 3]) {
        for (i, out_i) in out.iter_mut().enumerate() {
            let (k0, k1, k2) = (sym_index(i, 0), sym_index(i, 1), sym_index(i, 2));
            for (p, o) in out_i.iter_mut().enumerate() {
                *o += self.a[k0][p] * grad[0][p] + self.a[k1][p] * grad[1][p] + self.a[k2][p] * grad[2][p]
                    - self.b[i][p] * f[p];
            }
        }
    }

    /// `Q(g, f)` for the `g` these coefficients were built from.
    pub fn apply(&self, grid: &VelocityGrid, f: &[f64]) -> Vec<f64> {
        let grad = grid.gradient(f);
        grid.divergence(&self.flux(f, &grad))
    }

    /// Largest eigenvalue bound of the diffusion matrix over the grid
    /// (Gershgorin).
    pub fn max_diffusion(&self) -> f64 {
        let n = self.a[0].len();
        (0..n)
            .map(|p| {
                (0..3)
                    .map(|i| (0..3).map(|j| self.a[sym_index(i, j)][p].abs()).sum::<f64>())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// `Q(g, f)` through the FFT convolution tables.
pub fn q_landau_fft(g: &[f64], f: &[f64], tables: &LandauKernelTables) -> Result<Vec<f64>> {
    tables.check(f)?;
    Ok(tables.coefficients(g)?.apply(&tables.grid, f))
}

/// `Q(g, f)` with the drift written through the kernel divergence,
/// `∂_i [ (φ ∗ g) ∂_j f + 2 ((|u|^γ u_i) ∗ g) f ]`.
///
/// Agrees with [`q_landau_fft`] in the continuum limit; the two differ on
/// a grid by the quadrature error of the singular kernel derivative.
pub fn q_landau_fft_kernel_derivative(g: &[f64], f: &[f64], tables: &LandauKernelTables) -> Result<Vec<f64>> {
    tables.check(f)?;
    Ok(tables.coefficients_kernel_derivative(g)?.apply(&tables.grid, f))
}

/// Brute-force `O(N²)` evaluation of `Q(g, f)`.
///
/// The kernel is evaluated pointwise for every pair of nodes (the lattice
/// of node differences is tabulated once); no FFT convolution is involved.
/// Velocity derivatives of `g`, `f` and the flux are spectral.
pub fn q_landau_direct(g: &[f64], f: &[f64], gamma: f64, grid: &VelocityGrid) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let n = grid.n();
    if n > DIRECT_MAX_NV {
        return Err(Error::CostGuard {
            n_v: n,
            limit: DIRECT_MAX_NV,
        });
    }
    for field in [g, f] {
        if field.len() != grid.len() {
            return Err(Error::GridMismatch {
                expected: grid.len(),
                found: field.len(),
            });
        }
    }
    let h = grid.spacing();
    let w = grid.weight();
    // kernel on the lattice of differences d ∈ [-(n-1), n-1]³
    let span = 2 * n - 1;
    let offset = n - 1;
    let mut lattice = vec![[0.0; 6]; span * span * span];
    for d0 in 0..span {
        for d1 in 0..span {
            for d2 in 0..span {
                let u = [
                    (d0 as f64 - offset as f64) * h,
                    (d1 as f64 - offset as f64) * h,
                    (d2 as f64 - offset as f64) * h,
                ];
                lattice[(d0 * span + d1) * span + d2] = kernel_components(gamma, u, h);
            }
        }
    }
    let dg = grid.gradient(g);
    let rows: Vec<([f64; 6], [f64; 3])> = (0..grid.len())
        .into_par_iter()
        .map(|a| {
            let ma = grid.multi_index(a);
            let mut acc_a = [0.0; 6];
            let mut acc_b = [0.0; 3];
            for b in 0..grid.len() {
                let mb = grid.multi_index(b);
                let idx = ((ma[0] + offset - mb[0]) * span + (ma[1] + offset - mb[1])) * span + (ma[2] + offset - mb[2]);
                let k = &lattice[idx];
                let gb = g[b];
                let d = [dg[0][b], dg[1][b], dg[2][b]];
                for c in 0..6 {
                    acc_a[c] += k[c] * gb;
                }
                for (i, acc) in acc_b.iter_mut().enumerate() {
                    *acc += k[sym_index(i, 0)] * d[0] + k[sym_index(i, 1)] * d[1] + k[sym_index(i, 2)] * d[2];
                }
            }
            (acc_a.map(|x| x * w), acc_b.map(|x| x * w))
        })
        .collect();
    let coeffs = CollisionCoefficients {
        a: std::array::from_fn(|c| rows.iter().map(|r| r.0[c]).collect()),
        b: std::array::from_fn(|i| rows.iter().map(|r| r.1[i]).collect()),
    };
    Ok(coeffs.apply(grid, f))
}

/// Moment-fixing projection for a pair of collision outputs.
///
/// Removes from `(C₊, C₋)` its component in
/// `span{[μ,0], [0,μ], [v_j μ, v_j μ], [|v|² μ, |v|² μ]}` determined by the
/// discrete Gram system, so that `∫C±`, `∫v(C₊+C₋)` and `∫|v|²(C₊+C₋)` are
/// zero in the grid quadrature.
#[derive(Clone, Debug)]
pub struct ConservativeCorrection {
    basis_plus: [Vec<f64>; 6],
    basis_minus: [Vec<f64>; 6],
    inverse_gram: Vec<[f64; 6]>,
    velocities: Vec<[f64; 3]>,
    speed_sq: Vec<f64>,
}

impl ConservativeCorrection {
    pub fn new(grid: &VelocityGrid) -> Self {
        let mu = maxwellian(grid);
        let velocities = grid.velocities();
        let speed_sq: Vec<f64> = velocities.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).collect();
        let n = grid.len();
        let zero = vec![0.0; n];
        let shared = |k: usize| -> Vec<f64> {
            (0..n)
                .map(|p| match k {
                    0..=2 => velocities[p][k] * mu[p],
                    _ => speed_sq[p] * mu[p],
                })
                .collect()
        };
        let shared: [Vec<f64>; 4] = std::array::from_fn(shared);
        let basis_plus = [mu.clone(), zero.clone(), shared[0].clone(), shared[1].clone(), shared[2].clone(), shared[3].clone()];
        let [s0, s1, s2, s3] = shared;
        let basis_minus = [zero, mu, s0, s1, s2, s3];
        let mut this = Self {
            basis_plus,
            basis_minus,
            inverse_gram: Vec::new(),
            velocities,
            speed_sq,
        };
        let cols: Vec<[f64; 6]> = (0..6).map(|k| this.constraints(&this.basis_plus[k], &this.basis_minus[k])).collect();
        let gram: Vec<Vec<f64>> = (0..6).map(|r| (0..6).map(|k| cols[k][r]).collect()).collect();
        this.inverse_gram = (0..6)
            .map(|r| {
                let mut e = vec![0.0; 6];
                e[r] = 1.0;
                let x = solve_dense(gram.clone(), e).expect("Gram matrix of the collision invariants is regular");
                std::array::from_fn(|k| x[k])
            })
            .collect();
        this
    }

    /// Raw moments `[∫C₊, ∫C₋, ∫v(C₊+C₋), ∫|v|²(C₊+C₋)]` (without `h³`).
    pub fn constraints(&self, plus: &[f64], minus: &[f64]) -> [f64; 6] {
        let n = plus.len();
        let v = &self.velocities;
        [
            pairwise_sum_by(n, |p| plus[p]),
            pairwise_sum_by(n, |p| minus[p]),
            pairwise_sum_by(n, |p| v[p][0] * (plus[p] + minus[p])),
            pairwise_sum_by(n, |p| v[p][1] * (plus[p] + minus[p])),
            pairwise_sum_by(n, |p| v[p][2] * (plus[p] + minus[p])),
            pairwise_sum_by(n, |p| self.speed_sq[p] * (plus[p] + minus[p])),
        ]
    }

    pub fn apply(&self, plus: &mut [f64], minus: &mut [f64]) {
        self.apply_with_targets(plus, minus, [0.0; 6]);
    }

    /// Shift the pair inside the invariant span until its raw moments
    /// (as returned by [`ConservativeCorrection::constraints`]) equal `targets`.
    pub fn apply_with_targets(&self, plus: &mut [f64], minus: &mut [f64], targets: [f64; 6]) {
        let mut rhs = self.constraints(plus, minus);
        for (r, t) in rhs.iter_mut().zip(targets) {
            *r -= t;
        }
        // λ = G⁻¹ rhs, with inverse_gram stored by unit right-hand side
        let mut lambda = [0.0; 6];
        for (r, col) in self.inverse_gram.iter().enumerate() {
            for k in 0..6 {
                lambda[k] += col[k] * rhs[r];
            }
        }
        for k in 0..6 {
            if lambda[k] == 0.0 {
                continue;
            }
            for (p, value) in plus.iter_mut().enumerate() {
                *value -= lambda[k] * self.basis_plus[k][p];
            }
            for (p, value) in minus.iter_mut().enumerate() {
                *value -= lambda[k] * self.basis_minus[k][p];
            }
        }
    }
}

/// Collision operator bound to one grid: kernel tables, the cached
/// Maxwellian coefficients and the optional conservative correction.
#[derive(Debug)]
pub struct CollisionOperator {
    tables: LandauKernelTables,
    mu: Vec<f64>,
    grad_mu: [Vec<f64>; 3],
    mu_coefficients: CollisionCoefficients,
    correction: Option<ConservativeCorrection>,
    equilibrium_residual: f64,
    spectral_radius: OnceLock<f64>,
}

impl CollisionOperator {
    pub fn new(gamma: f64, grid: &VelocityGrid, conservative_correction: bool) -> Result<Self> {
        let tables = LandauKernelTables::build(gamma, grid)?;
        let mu = maxwellian(grid);
        let grad_mu = grid.gradient(&mu);
        let mu_coefficients = tables.coefficients(&mu)?;
        let q = mu_coefficients.apply(grid, &mu);
        let equilibrium_residual = (norm_sq(&q) / norm_sq(&mu)).sqrt();
        Ok(Self {
            tables,
            mu,
            grad_mu,
            mu_coefficients,
            correction: conservative_correction.then(|| ConservativeCorrection::new(grid)),
            equilibrium_residual,
            spectral_radius: OnceLock::new(),
        })
    }

    pub fn tables(&self) -> &LandauKernelTables {
        &self.tables
    }

    pub fn gamma(&self) -> f64 {
        self.tables.gamma
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.tables.grid
    }

    pub fn conservative(&self) -> bool {
        self.correction.is_some()
    }

    pub fn correction(&self) -> Option<&ConservativeCorrection> {
        self.correction.as_ref()
    }

    /// `‖Q(μ, μ)‖ / ‖μ‖` measured on this grid.
    pub fn equilibrium_residual(&self) -> f64 {
        self.equilibrium_residual
    }

    pub fn mu_coefficients(&self) -> &CollisionCoefficients {
        &self.mu_coefficients
    }

    /// Collision right-hand side at one spatial node:
    /// `Q(f₊ + f₋, μ) + Q(2μ + f₊ + f₋, f±)` for both species.
    pub fn node_rhs(&self, f_plus: &[f64], f_minus: &[f64]) -> Result<[Vec<f64>; 2]> {
        let sum: Vec<f64> = f_plus.iter().zip(f_minus).map(|(p, m)| p + m).collect();
        let perturbation = self.tables.coefficients(&sum)?;
        let full = perturbation.add_scaled(2.0, &self.mu_coefficients);
        Ok(self.rhs_with(&perturbation, &full, f_plus, f_minus))
    }

    /// `Q(s, μ) + Q(G, f±)` given the coefficients of `s` and of `G`.
    pub fn rhs_with(
        &self,
        perturbation: &CollisionCoefficients,
        full: &CollisionCoefficients,
        f_plus: &[f64],
        f_minus: &[f64],
    ) -> [Vec<f64>; 2] {
        let grid = &self.tables.grid;
        let mut out = [f_plus, f_minus].map(|f| {
            let mut flux = perturbation.flux(&self.mu, &self.grad_mu);
            let grad = grid.gradient(f);
            full.add_flux(f, &grad, &mut flux);
            grid.divergence(&flux)
        });
        if let Some(correction) = &self.correction {
            let [plus, minus] = &mut out;
            correction.apply(plus, minus);
        }
        out
    }

    /// `Q(s, μ)` from the coefficients of `s`.
    pub fn source(&self, perturbation: &CollisionCoefficients) -> Vec<f64> {
        self.tables.grid.divergence(&perturbation.flux(&self.mu, &self.grad_mu))
    }

    /// Solve `(I - dt Q(G, ·)) x = rhs` with the coefficients of `G` held
    /// fixed, starting from the guess in `x`.
    pub fn implicit_solve(
        &self,
        full: &CollisionCoefficients,
        rhs: &[f64],
        x: &mut [f64],
        dt: f64,
        tol: f64,
        max_iter: usize,
    ) -> KrylovOutcome {
        let grid = &self.tables.grid;
        // Jacobi-like scaling by the local diffusion strength times the mean
        // squared wavenumber of the spectral derivative
        let k = grid.max_wavenumber();
        let mean_k2 = k * k / 3.0;
        let diag: Vec<f64> = (0..rhs.len())
            .map(|p| 1.0 + dt * mean_k2 * (full.a[0][p] + full.a[3][p] + full.a[5][p]).max(0.0))
            .collect();
        bicgstab(
            |y| {
                let q = full.apply(grid, y);
                y.iter().zip(&q).map(|(a, b)| a - dt * b).collect()
            },
            |r| r.iter().zip(&diag).map(|(a, d)| a / d).collect(),
            rhs,
            x,
            tol,
            max_iter,
        )
    }

    /// Linearized collision right-hand side at one node,
    /// `L± f = Q(f₊ + f₋, μ) + Q(2μ, f±)`.
    pub fn linearized_node_rhs(&self, f_plus: &[f64], f_minus: &[f64]) -> Result<[Vec<f64>; 2]> {
        let sum: Vec<f64> = f_plus.iter().zip(f_minus).map(|(p, m)| p + m).collect();
        let perturbation = self.tables.coefficients(&sum)?;
        let full = CollisionCoefficients::zeros(sum.len()).add_scaled(2.0, &self.mu_coefficients);
        Ok(self.rhs_with(&perturbation, &full, f_plus, f_minus))
    }

    /// Spectral radius of the linearized collision operator at one node,
    /// estimated by power iteration and cached.
    pub fn spectral_radius(&self) -> f64 {
        *self.spectral_radius.get_or_init(|| {
            let n = self.tables.grid.len();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let mut x: [Vec<f64>; 2] = std::array::from_fn(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mut estimate = 0.0;
            for _ in 0..150 {
                let norm = (norm_sq(&x[0]) + norm_sq(&x[1])).sqrt();
                if norm == 0.0 {
                    break;
                }
                for part in x.iter_mut() {
                    part.iter_mut().for_each(|v| *v /= norm);
                }
                let y = self.linearized_node_rhs(&x[0], &x[1]).expect("grid-sized slices");
                estimate = (norm_sq(&y[0]) + norm_sq(&y[1])).sqrt();
                x = y;
            }
            estimate
        })
    }

    /// Apply the moment correction, if enabled, to a pair of increments.
    pub fn correct(&self, plus: &mut [f64], minus: &mut [f64]) {
        if let Some(c) = &self.correction {
            c.apply(plus, minus);
        }
    }
}

/// Collision right-hand side of the perturbation equation at every
/// spatial node, for both species.
pub fn apply_collision_field(state: &SystemState, op: &CollisionOperator) -> Result<[Vec<f64>; 2]> {
    collision_field(state.background(), state.f_plus(), state.f_minus(), op)
}

/// As [`apply_collision_field`] for raw species arrays.
pub fn collision_field(
    background: &Background,
    f_plus: &[f64],
    f_minus: &[f64],
    op: &CollisionOperator,
) -> Result<[Vec<f64>; 2]> {
    let g = background.grid();
    if g.v != *op.grid() {
        return Err(Error::GridMismatch {
            expected: op.grid().len(),
            found: g.v.len(),
        });
    }
    let nv = g.v.len();
    let nodes: Vec<[Vec<f64>; 2]> = f_plus
        .par_chunks(nv)
        .zip(f_minus.par_chunks(nv))
        .map(|(p, m)| op.node_rhs(p, m))
        .collect::<Result<_>>()?;
    let mut plus = Vec::with_capacity(g.len());
    let mut minus = Vec::with_capacity(g.len());
    for [p, m] in nodes {
        plus.extend(p);
        minus.extend(m);
    }
    Ok([plus, minus])
}

/// Entropy production `Σ± ∫∫ C± log(μ + f±) dv dx` of a collision update.
///
/// Nodes where `μ + f± ≤ 0` are skipped; the count is returned alongside.
pub fn entropy_production(background: &Background, f: [&[f64]; 2], rhs: [&[f64]; 2]) -> (f64, usize) {
    let g = background.grid();
    let nv = g.v.len();
    let mu = background.mu();
    let mut skipped = 0;
    let mut terms = Vec::with_capacity(2 * g.len());
    for s in 0..2 {
        for (i, (&fi, &ci)) in f[s].iter().zip(rhs[s]).enumerate() {
            let total = mu[i % nv] + fi;
            if total > 0.0 {
                terms.push(ci * total.ln());
            } else {
                skipped += 1;
            }
        }
    }
    (crate::numerics::pairwise_sum(&terms) * g.cell_volume(), skipped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        (norm_sq(&diff) / norm_sq(b).max(1e-300)).sqrt()
    }

    /// Smooth random field: a few random Fourier modes times a Gaussian
    /// envelope.
    fn smooth_field(grid: &VelocityGrid, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let modes: Vec<([f64; 3], f64, f64)> = (0..4)
            .map(|_| {
                let k = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                (k, rng.gen_range(-1.0..1.0), rng.gen_range(0.0..6.28))
            })
            .collect();
        (0..grid.len())
            .map(|p| {
                let v = grid.velocity(p);
                let env = (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / 3.0).exp();
                env * modes.iter().map(|(k, a, ph)| a * (k[0] * v[0] + k[1] * v[1] + k[2] * v[2] + ph).cos()).sum::<f64>()
            })
            .collect()
    }

    #[test]
    fn kernel_examples() {
        let k = kernel_matrix(0.0, [1.0, 0.0, 0.0], 1.0);
        assert!(k[0][0].abs() < 1e-15 && (k[1][1] - 1.0).abs() < 1e-15);
        let k = kernel_matrix(-3.0, [2.0, 0.0, 0.0], 1.0);
        assert!(k[0][0].abs() < 1e-15 && (k[1][1] - 0.5).abs() < 1e-15);
        let d = kernel_divergence(0.0, [1.0, 1.0, 0.0]);
        assert!((d[0] + 2.0).abs() < 1e-15);
        assert!(LandauKernelTables::build(1.5, &VelocityGrid::new(8, 8.0).unwrap()).is_err());
    }

    #[test]
    fn kernel_is_a_projector_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for gamma in [-3.0, -1.0, 0.0, 1.0] {
            for _ in 0..200 {
                let u = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
                let k = kernel_matrix(gamma, u, 0.5);
                let scale = k[0][0].abs() + k[1][1].abs() + k[2][2].abs();
                for i in 0..3 {
                    let ku: f64 = (0..3).map(|j| k[i][j] * u[j]).sum();
                    assert!(ku.abs() < 1e-12 * scale * (1.0 + u.iter().map(|x| x.abs()).sum::<f64>()));
                    for j in 0..3 {
                        assert_eq!(k[i][j], k[j][i]);
                    }
                }
                let x = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let quad: f64 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| x[i] * k[i][j] * x[j]).sum();
                assert!(quad >= -1e-12 * scale);
            }
        }
    }

    #[test]
    fn regularized_origin_value() {
        let k = kernel_components(-3.0, [0.0; 3], 1.0);
        // 2 (1/2)^{-1} / 2 = 2
        assert!((k[0] - 2.0).abs() < 1e-15 && k[1] == 0.0);
        assert_eq!(kernel_components(0.5, [0.0; 3], 1.0), [0.0; 6]);
    }

    #[test]
    fn fft_path_matches_direct_oracle() {
        let grid = VelocityGrid::new(8, 4.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for gamma in [-3.0, 0.0, 1.0] {
            let tables = LandauKernelTables::build(gamma, &grid).unwrap();
            let g = smooth_field(&grid, &mut rng);
            let f = smooth_field(&grid, &mut rng);
            let fast = q_landau_fft(&g, &f, &tables).unwrap();
            let slow = q_landau_direct(&g, &f, gamma, &grid).unwrap();
            assert!(rel_l2(&fast, &slow) < 1e-10, "gamma {gamma}: {}", rel_l2(&fast, &slow));
        }
    }

    #[test]
    fn direct_oracle_guards_and_zero_input() {
        let big = VelocityGrid::new(32, 8.0).unwrap();
        let zeros = vec![0.0; big.len()];
        assert!(matches!(
            q_landau_direct(&zeros, &zeros, 0.0, &big),
            Err(Error::CostGuard { .. })
        ));
        let grid = VelocityGrid::new(8, 4.0).unwrap();
        let mu = maxwellian(&grid);
        let q = q_landau_direct(&vec![0.0; grid.len()], &mu, -3.0, &grid).unwrap();
        assert!(q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mass_and_bilinearity() {
        let grid = VelocityGrid::new(16, 8.0).unwrap();
        let tables = LandauKernelTables::build(-1.0, &grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = smooth_field(&grid, &mut rng);
        let f = smooth_field(&grid, &mut rng);
        let q = q_landau_fft(&g, &f, &tables).unwrap();
        let scale = (grid.integrate(&g.iter().map(|x| x * x).collect::<Vec<_>>())
            * grid.integrate(&f.iter().map(|x| x * x).collect::<Vec<_>>()))
        .sqrt();
        assert!(grid.integrate(&q).abs() <= 1e-12 * scale);
        let g2: Vec<f64> = g.iter().map(|x| 3.0 * x).collect();
        let f2: Vec<f64> = f.iter().map(|x| -0.5 * x).collect();
        let q2 = q_landau_fft(&g2, &f2, &tables).unwrap();
        let expected: Vec<f64> = q.iter().map(|x| -1.5 * x).collect();
        assert!(rel_l2(&q2, &expected) < 1e-13);
    }

    #[test]
    fn correction_zeroes_moments() {
        let grid = VelocityGrid::new(16, 8.0).unwrap();
        let c = ConservativeCorrection::new(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = smooth_field(&grid, &mut rng);
        let mut m = smooth_field(&grid, &mut rng);
        let before = c.constraints(&p, &m);
        assert!(before.iter().any(|x| x.abs() > 1e-3));
        c.apply(&mut p, &mut m);
        let after = c.constraints(&p, &m);
        assert!(after.iter().all(|x| x.abs() < 1e-14), "{after:?}");
    }

    #[test]
    fn implicit_solve_inverts_the_operator() {
        let grid = VelocityGrid::new(8, 5.0).unwrap();
        let op = CollisionOperator::new(0.0, &grid, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let exact = smooth_field(&grid, &mut rng);
        let full = op.mu_coefficients().add_scaled(1.0, op.mu_coefficients());
        let dt = 0.05;
        let q = full.apply(&grid, &exact);
        let rhs: Vec<f64> = exact.iter().zip(&q).map(|(x, y)| x - dt * y).collect();
        let mut x = vec![0.0; grid.len()];
        let out = op.implicit_solve(&full, &rhs, &mut x, dt, 1e-12, 200);
        assert!(out.converged, "{out:?}");
        assert!(rel_l2(&x, &exact) < 1e-9);
    }

    #[test]
    fn zero_perturbation_has_zero_collision_rhs() {
        let grid = VelocityGrid::new(8, 8.0).unwrap();
        let op = CollisionOperator::new(0.0, &grid, true).unwrap();
        let zero = vec![0.0; grid.len()];
        let rhs = op.node_rhs(&zero, &zero).unwrap();
        assert!(rhs[0].iter().chain(&rhs[1]).all(|x| x.abs() < 1e-300));
    }
}
