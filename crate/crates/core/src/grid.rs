//! Discrete phase space and the spectral primitives shared by every module.
//!
//! The spatial domain is the periodic box `[0, l)^d` with `d` in `{1, 2, 3}`
//! and `l = 2π` by default, so spatial wavenumbers are integers. The
//! velocity domain is the box `[-L, L)^3`, extended periodically; its nodes
//! are `-L + i h` with `h = 2L / n_v`.
//!
//! Phase-space arrays are stored x-major: the value at spatial node `ix`
//! and velocity node `iv` lives at `ix * n_v^3 + iv`. Within each block the
//! index is row-major, so the last axis is contiguous.
//!
//! # Spectral normalization
//!
//! [`PhaseGrid::forward_transform`] returns coefficients of the orthonormal
//! Fourier basis of `L^2(box)`:
//!
//! ```text
//! c(k) = sqrt(V) / N * sum_j f(z_j) exp(-i k . z_j)
//! ```
//!
//! where `V` is the box volume and `N` the number of nodes, so that
//! `sum_k |c(k)|^2` equals the trapezoid-rule value of `||f||^2_{L^2}`.
//! The inverse transform undoes this exactly.
//!
//! Derivatives multiply by `(i k)^order` along one axis. For odd orders the
//! Nyquist mode is zeroed so real fields stay real. No other dealiasing is
//! performed.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_mode, Direction, FftNd};
use crate::numerics::pairwise_sum;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Default half-width of the velocity box.
pub const DEFAULT_CUTOFF: f64 = 8.0;

/// A coordinate direction of phase space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X(usize),
    V(usize),
}

/// Integration domain for [`PhaseGrid::quadrature`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    VelocityOnly,
    Phase,
}

/// Result of a quadrature: a spatial field or a number.
#[derive(Clone, Debug, PartialEq)]
pub enum Integral {
    Spatial(Vec<f64>),
    Scalar(f64),
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::GridMismatch { expected, found });
    }
    Ok(())
}

fn check_order(order: usize) -> Result<()> {
    if order == 0 || order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    Ok(())
}

/// Multiplier `(i k)^order` for signed mode `m` on an `n`-point axis.
fn derivative_multiplier(m: i64, n: usize, scale: f64, order: usize) -> Complex64 {
    let k = m as f64 * scale;
    match order {
        0 => Complex64::new(1.0, 0.0),
        1 if m == (n / 2) as i64 => Complex64::new(0.0, 0.0),
        1 => Complex64::new(0.0, k),
        _ => Complex64::new(-k * k, 0.0),
    }
}

/// Apply `(i k)^order` along `axis` of a row-major array in place.
fn differentiate_axis(
    fft: &FftNd,
    buf: &mut [Complex64],
    axis: usize,
    order: usize,
    wavenumber_scale: f64,
) {
    let shape = fft.shape();
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    fft.transform_axis(buf, axis, Direction::Forward);
    let multipliers: Vec<Complex64> = (0..n)
        .map(|j| derivative_multiplier(signed_mode(j, n), n, wavenumber_scale, order) / n as f64)
        .collect();
    for (idx, value) in buf.iter_mut().enumerate() {
        *value *= multipliers[(idx / stride) % n];
    }
    fft.transform_axis(buf, axis, Direction::Inverse);
}

/// Periodic spatial grid.
#[derive(Clone, Debug)]
pub struct SpatialGrid {
    dim: usize,
    n: usize,
    length: f64,
    fft: FftNd,
}

impl PartialEq for SpatialGrid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n && self.length == other.length
    }
}

impl SpatialGrid {
    /// Grid on `[0, 2π)^dim` with `n` points per axis.
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        Self::with_length(dim, n, TWO_PI)
    }

    pub fn with_length(dim: usize, n: usize, length: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::Parameter(format!("dim_x must be 1, 2 or 3 (got {dim})")));
        }
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "n_x must be a power of two and at least 4 (got {n})"
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::Parameter(format!("spatial period must be positive (got {length})")));
        }
        Ok(Self {
            dim,
            n,
            length,
            fft: FftNd::new(&vec![n; dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of spatial nodes, `n^dim`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        self.length.powi(self.dim as i32)
    }

    /// Scale converting integer modes into wavenumbers.
    pub fn wavenumber_scale(&self) -> f64 {
        TWO_PI / self.length
    }

    /// Multi-index of node `idx`, padded with zeros beyond `dim`.
    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let mut out = [0; 3];
        let mut rest = idx;
        for axis in (0..self.dim).rev() {
            out[axis] = rest % self.n;
            rest /= self.n;
        }
        out
    }

    /// Physical coordinates of node `idx` (unused axes are zero).
    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let m = self.multi_index(idx);
        let h = self.spacing();
        let mut out = [0.0; 3];
        for axis in 0..self.dim {
            out[axis] = m[axis] as f64 * h;
        }
        out
    }

    /// Integer mode numbers of spectral index `idx` (unused axes are zero).
    pub fn modes(&self, idx: usize) -> [i64; 3] {
        let m = self.multi_index(idx);
        let mut out = [0; 3];
        for axis in 0..self.dim {
            out[axis] = signed_mode(m[axis], self.n);
        }
        out
    }

    /// Wavevector of spectral index `idx`.
    pub fn wavevector(&self, idx: usize) -> [f64; 3] {
        let m = self.modes(idx);
        let s = self.wavenumber_scale();
        [m[0] as f64 * s, m[1] as f64 * s, m[2] as f64 * s]
    }

    /// Largest wavenumber magnitude along one axis.
    pub fn max_wavenumber(&self) -> f64 {
        (self.n / 2) as f64 * self.wavenumber_scale()
    }

    /// Unnormalized forward FFT of a real spatial field.
    pub fn fft_forward(&self, field: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut buf);
        buf
    }

    /// Inverse of [`SpatialGrid::fft_forward`], keeping the real part.
    pub fn fft_inverse_real(&self, mut coeffs: Vec<Complex64>) -> Vec<f64> {
        self.fft.inverse(&mut coeffs);
        let scale = 1.0 / self.len() as f64;
        coeffs.iter().map(|c| c.re * scale).collect()
    }

    /// Spectral derivative along spatial axis `axis`.
    pub fn derivative(&self, field: &[f64], axis: usize, order: usize) -> Result<Vec<f64>> {
        check_len(self.len(), field.len())?;
        check_order(order)?;
        if axis >= self.dim {
            return Err(Error::Parameter(format!(
                "spatial axis {axis} out of range for dim_x = {}",
                self.dim
            )));
        }
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        differentiate_axis(&self.fft, &mut buf, axis, order, self.wavenumber_scale());
        Ok(buf.iter().map(|c| c.re).collect())
    }

    /// Trapezoid-rule integral over the box.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        pairwise_sum(field) * self.cell_volume()
    }

    pub fn mean(&self, field: &[f64]) -> f64 {
        pairwise_sum(field) / field.len() as f64
    }
}

/// Uniform velocity grid on `[-L, L)^3`.
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    n: usize,
    cutoff: f64,
    fft: FftNd,
}

impl PartialEq for VelocityGrid {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.cutoff == other.cutoff
    }
}

impl VelocityGrid {
    pub fn new(n: usize, cutoff: f64) -> Result<Self> {
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "n_v must be a power of two and at least 4 (got {n})"
            )));
        }
        if !(cutoff > 0.0 && cutoff.is_finite()) {
            return Err(Error::Parameter(format!("velocity cutoff must be positive (got {cutoff})")));
        }
        Ok(Self {
            n,
            cutoff,
            fft: FftNd::new(&[n, n, n]),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.cutoff / self.n as f64
    }

    /// Quadrature weight of every node, `h^3`.
    pub fn weight(&self) -> f64 {
        self.spacing().powi(3)
    }

    /// Coordinate of node `i` along any axis.
    pub fn node(&self, i: usize) -> f64 {
        -self.cutoff + i as f64 * self.spacing()
    }

    pub fn multi_index(&self, iv: usize) -> [usize; 3] {
        let n = self.n;
        [iv / (n * n), (iv / n) % n, iv % n]
    }

    pub fn flat_index(&self, m: [usize; 3]) -> usize {
        (m[0] * self.n + m[1]) * self.n + m[2]
    }

    pub fn velocity(&self, iv: usize) -> [f64; 3] {
        let m = self.multi_index(iv);
        [self.node(m[0]), self.node(m[1]), self.node(m[2])]
    }

    /// All node velocities in storage order.
    pub fn velocities(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|iv| self.velocity(iv)).collect()
    }

    pub fn wavenumber_scale(&self) -> f64 {
        std::f64::consts::PI / self.cutoff
    }

    /// Largest resolved velocity wavenumber.
    pub fn max_wavenumber(&self) -> f64 {
        (self.n / 2) as f64 * self.wavenumber_scale()
    }

    /// Largest speed on the grid (the corner node).
    pub fn max_speed(&self) -> f64 {
        3.0_f64.sqrt() * self.cutoff
    }

    /// Estimate of the Maxwellian-moment truncation error for this box and
    /// resolution: the Gaussian tail mass beyond `L` plus the aliasing
    /// error of the uniform rule, both bounded for moments up to `|v|^6`.
    pub fn truncation_tolerance(&self) -> f64 {
        let l = self.cutoff;
        let tail = 3.0 * (1.0 + l.powi(6)) * (-l * l / 2.0).exp();
        let h = self.spacing();
        let alias = 6.0 * (-2.0 * std::f64::consts::PI.powi(2) / (h * h)).exp() * (1.0 + (TWO_PI / h).powi(6));
        (tail + alias).max(1e-14)
    }

    /// Spectral derivative of a velocity field along `axis` (0..3).
    pub fn derivative(&self, field: &[f64], axis: usize, order: usize) -> Result<Vec<f64>> {
        check_len(self.len(), field.len())?;
        check_order(order)?;
        if axis >= 3 {
            return Err(Error::Parameter(format!("velocity axis {axis} out of range")));
        }
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        differentiate_axis(&self.fft, &mut buf, axis, order, self.wavenumber_scale());
        Ok(buf.iter().map(|c| c.re).collect())
    }

    /// First derivative along `axis` into an existing buffer.
    pub(crate) fn derivative_into(&self, field: &[f64], axis: usize, out: &mut [f64]) {
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        differentiate_axis(&self.fft, &mut buf, axis, 1, self.wavenumber_scale());
        for (o, c) in out.iter_mut().zip(&buf) {
            *o = c.re;
        }
    }

    pub fn gradient(&self, field: &[f64]) -> [Vec<f64>; 3] {
        std::array::from_fn(|axis| {
            let mut out = vec![0.0; field.len()];
            self.derivative_into(field, axis, &mut out);
            out
        })
    }

    /// `sum_i d_i flux_i`.
    pub fn divergence(&self, flux: &[Vec<f64>; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut tmp = vec![0.0; self.len()];
        for (axis, component) in flux.iter().enumerate() {
            self.derivative_into(component, axis, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += t;
            }
        }
        out
    }

    /// Uniform-weight integral of a velocity field.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        pairwise_sum(field) * self.weight()
    }
}

/// Plain grid parameters, used for serialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim_x: usize,
    pub n_x: usize,
    pub length: f64,
    pub n_v: usize,
    pub cutoff: f64,
}

impl GridSpec {
    pub fn build(&self) -> Result<PhaseGrid> {
        Ok(PhaseGrid::new(
            SpatialGrid::with_length(self.dim_x, self.n_x, self.length)?,
            VelocityGrid::new(self.n_v, self.cutoff)?,
        ))
    }
}

/// Product of a spatial and a velocity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGrid {
    pub x: SpatialGrid,
    pub v: VelocityGrid,
}

impl PhaseGrid {
    pub fn new(x: SpatialGrid, v: VelocityGrid) -> Self {
        Self { x, v }
    }

    /// Convenience constructor with the default spatial period.
    pub fn build(dim_x: usize, n_x: usize, n_v: usize, cutoff: f64) -> Result<Self> {
        Ok(Self::new(SpatialGrid::new(dim_x, n_x)?, VelocityGrid::new(n_v, cutoff)?))
    }

    pub fn len(&self) -> usize {
        self.x.len() * self.v.len()
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dim_x: self.x.dim(),
            n_x: self.x.n(),
            length: self.x.length(),
            n_v: self.v.n(),
            cutoff: self.v.cutoff(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Shape of the full phase-space array.
    pub fn shape(&self) -> Vec<usize> {
        let mut shape = vec![self.x.n(); self.x.dim()];
        shape.extend([self.v.n(); 3]);
        shape
    }

    pub fn volume(&self) -> f64 {
        self.x.volume() * (2.0 * self.v.cutoff()).powi(3)
    }

    /// Phase-space cell volume.
    pub fn cell_volume(&self) -> f64 {
        self.x.cell_volume() * self.v.weight()
    }

    fn phase_fft(&self) -> FftNd {
        FftNd::new(&self.shape())
    }

    fn axis_index(&self, axis: Axis) -> Result<(usize, f64)> {
        match axis {
            Axis::X(a) if a < self.x.dim() => Ok((a, self.x.wavenumber_scale())),
            Axis::V(a) if a < 3 => Ok((self.x.dim() + a, self.v.wavenumber_scale())),
            _ => Err(Error::Parameter(format!("axis {axis:?} not present on this grid"))),
        }
    }

    /// Unitary discrete Fourier transform of a real phase-space field.
    pub fn forward_transform(&self, field: &[f64]) -> Result<Vec<Complex64>> {
        check_len(self.len(), field.len())?;
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.phase_fft().forward(&mut buf);
        let scale = self.volume().sqrt() / self.len() as f64;
        for c in &mut buf {
            *c *= scale;
        }
        Ok(buf)
    }

    /// Inverse of [`PhaseGrid::forward_transform`]; returns the real part.
    pub fn inverse_transform(&self, coeffs: &[Complex64]) -> Result<Vec<f64>> {
        check_len(self.len(), coeffs.len())?;
        let mut buf = coeffs.to_vec();
        self.phase_fft().inverse(&mut buf);
        let scale = 1.0 / self.volume().sqrt();
        Ok(buf.iter().map(|c| c.re * scale).collect())
    }

    /// Spectral derivative of a phase-space field along one axis.
    pub fn spectral_derivative(&self, field: &[f64], axis: Axis, order: usize) -> Result<Vec<f64>> {
        check_len(self.len(), field.len())?;
        check_order(order)?;
        let (index, scale) = self.axis_index(axis)?;
        let fft = self.phase_fft();
        let mut buf: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        differentiate_axis(&fft, &mut buf, index, order, scale);
        Ok(buf.iter().map(|c| c.re).collect())
    }

    /// Raw spectrum of a phase-space field, for repeated mixed derivatives.
    pub fn spectrum(&self, field: &[f64]) -> Result<Spectrum<'_>> {
        check_len(self.len(), field.len())?;
        let fft = self.phase_fft();
        let mut coeffs: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.forward(&mut coeffs);
        Ok(Spectrum { grid: self, fft, coeffs })
    }

    /// Uniform-weight quadrature of a phase-space field.
    pub fn quadrature(&self, field: &[f64], domain: Domain) -> Result<Integral> {
        check_len(self.len(), field.len())?;
        let moments = self.integrate_v(field);
        Ok(match domain {
            Domain::VelocityOnly => Integral::Spatial(moments),
            Domain::Phase => Integral::Scalar(self.x.integrate(&moments)),
        })
    }

    /// `int f dv` at every spatial node.
    pub fn integrate_v(&self, field: &[f64]) -> Vec<f64> {
        let nv = self.v.len();
        let w = self.v.weight();
        field.chunks_exact(nv).map(|block| pairwise_sum(block) * w).collect()
    }

    /// `int int f dv dx`.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        self.x.integrate(&self.integrate_v(field))
    }

    /// `int int f g dv dx`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        crate::numerics::dot(f, g) * self.cell_volume()
    }

    pub fn norm_sq(&self, f: &[f64]) -> f64 {
        crate::numerics::norm_sq(f) * self.cell_volume()
    }
}

/// Forward transform of one phase-space field; see [`PhaseGrid::spectrum`].
pub struct Spectrum<'a> {
    grid: &'a PhaseGrid,
    fft: FftNd,
    coeffs: Vec<Complex64>,
}

impl Spectrum<'_> {
    /// `∂^α_x ∂^β_v f` with per-axis multipliers `(i k)^order`.
    ///
    /// Orders above 2 on a single axis are rejected; `α` entries beyond
    /// the spatial dimension must be zero.
    pub fn derivative(&self, alpha: [usize; 3], beta: [usize; 3]) -> Result<Vec<f64>> {
        let x = &self.grid.x;
        let v = &self.grid.v;
        for (axis, &o) in alpha.iter().enumerate() {
            if o > 2 || (axis >= x.dim() && o > 0) {
                return Err(Error::UnsupportedOrder(o));
            }
        }
        if let Some(&o) = beta.iter().find(|&&o| o > 2) {
            return Err(Error::UnsupportedOrder(o));
        }
        let nv = v.n();
        let v_tables: Vec<Vec<Complex64>> = (0..3)
            .map(|axis| {
                (0..nv)
                    .map(|j| derivative_multiplier(signed_mode(j, nv), nv, v.wavenumber_scale(), beta[axis]))
                    .collect()
            })
            .collect();
        let nx = x.n();
        let x_tables: Vec<Vec<Complex64>> = (0..3)
            .map(|axis| {
                (0..nx)
                    .map(|j| derivative_multiplier(signed_mode(j, nx), nx, x.wavenumber_scale(), alpha[axis]))
                    .collect()
            })
            .collect();
        let block = v.len();
        let scale = 1.0 / self.coeffs.len() as f64;
        let mut buf = self.coeffs.clone();
        for (ix, chunk) in buf.chunks_exact_mut(block).enumerate() {
            let mx = x.multi_index(ix);
            let mut fx = Complex64::new(scale, 0.0);
            for axis in 0..x.dim() {
                fx *= x_tables[axis][mx[axis]];
            }
            for (iv, c) in chunk.iter_mut().enumerate() {
                let m = v.multi_index(iv);
                *c *= fx * v_tables[0][m[0]] * v_tables[1][m[1]] * v_tables[2][m[2]];
            }
        }
        self.fft.inverse(&mut buf);
        Ok(buf.iter().map(|c| c.re).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid1() -> PhaseGrid {
        PhaseGrid::build(1, 8, 8, DEFAULT_CUTOFF).unwrap()
    }

    #[test]
    fn constructors_validate_sizes() {
        assert!(SpatialGrid::new(1, 6).is_err());
        assert!(SpatialGrid::new(4, 8).is_err());
        assert!(SpatialGrid::new(2, 2).is_err());
        assert!(VelocityGrid::new(12, 8.0).is_err());
        assert!(VelocityGrid::new(16, -1.0).is_err());
    }

    #[test]
    fn wavenumbers_are_integers_on_two_pi_box() {
        let g = SpatialGrid::new(1, 8).unwrap();
        let ks: Vec<f64> = (0..8).map(|i| g.wavevector(i)[0]).collect();
        assert_eq!(ks, vec![0.0, 1.0, 2.0, 3.0, 4.0, -3.0, -2.0, -1.0]);
    }

    #[test]
    fn velocity_nodes_and_weight() {
        let v = VelocityGrid::new(16, 8.0).unwrap();
        assert_eq!(v.node(0), -8.0);
        assert_eq!(v.node(15), 7.0);
        assert_eq!(v.weight(), 1.0);
    }

    #[test]
    fn constant_field_has_only_dc_coefficient() {
        let g = grid1();
        let coeffs = g.forward_transform(&vec![1.0; g.len()]).unwrap();
        let dc = coeffs[0].norm();
        assert!((dc - g.volume().sqrt()).abs() < 1e-10 * dc);
        let rest: f64 = coeffs[1..].iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(rest < 1e-12 * dc);
    }

    #[test]
    fn single_cosine_has_two_conjugate_modes() {
        let x = SpatialGrid::new(1, 16).unwrap();
        let field: Vec<f64> = (0..16).map(|i| x.coords(i)[0].cos()).collect();
        let c = x.fft_forward(&field);
        assert!((c[1].re - 8.0).abs() < 1e-12 && c[1].im.abs() < 1e-12);
        assert!((c[1] - c[15].conj()).norm() < 1e-12);
        for (j, v) in c.iter().enumerate() {
            if j != 1 && j != 15 {
                assert!(v.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let g = grid1();
        assert!(matches!(
            g.forward_transform(&[1.0; 3]),
            Err(Error::GridMismatch { .. })
        ));
        assert!(matches!(
            g.spectral_derivative(&vec![0.0; g.len()], Axis::X(0), 3),
            Err(Error::UnsupportedOrder(3))
        ));
    }

    #[test]
    fn round_trip_and_parseval() {
        let g = grid1();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = g.forward_transform(&f).unwrap();
        let back = g.inverse_transform(&c).unwrap();
        let err: f64 = f.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-13);
        let spectral: f64 = c.iter().map(|z| z.norm_sqr()).sum();
        let real = g.norm_sq(&f);
        assert!((spectral - real).abs() < 1e-12 * real);
    }

    #[test]
    fn derivative_of_cosine_along_x() {
        let g = PhaseGrid::build(1, 16, 4, 8.0).unwrap();
        let nv = g.v.len();
        let f: Vec<f64> = (0..g.len()).map(|i| g.x.coords(i / nv)[0].cos()).collect();
        let d = g.spectral_derivative(&f, Axis::X(0), 1).unwrap();
        for (i, val) in d.iter().enumerate() {
            let expected = -g.x.coords(i / nv)[0].sin();
            assert!((val - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_derivative_kills_nyquist() {
        let x = SpatialGrid::new(1, 8).unwrap();
        let nyquist: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let d1 = x.derivative(&nyquist, 0, 1).unwrap();
        assert!(d1.iter().all(|v| v.abs() < 1e-14));
        let d2 = x.derivative(&nyquist, 0, 2).unwrap();
        assert!((d2[0] + 16.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_matches_sum_of_derivatives() {
        let v = VelocityGrid::new(8, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flux: [Vec<f64>; 3] = std::array::from_fn(|_| (0..v.len()).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let div = v.divergence(&flux);
        let mut expected = vec![0.0; v.len()];
        for (axis, comp) in flux.iter().enumerate() {
            let d = v.derivative(comp, axis, 1).unwrap();
            for (e, x) in expected.iter_mut().zip(d) {
                *e += x;
            }
        }
        for (a, b) in div.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
