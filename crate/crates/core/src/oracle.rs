//! Slow, independent references for the fast paths: closed-form Gaussian
//! moments, finite-difference refinement studies and weighted norms of
//! analytic fields on refined grids. The direct collision quadrature
//! lives in [`crate::landau::q_landau_direct`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PhaseGrid, TWO_PI};
use crate::numerics::{japanese_bracket, pairwise_sum_by};
use crate::weights::WeightSpec;

/// `∫|v|^{2n} μ dv` for `n = 0..=3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMomentTable {
    pub moments: [f64; 4],
}

impl Default for GaussianMomentTable {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianMomentTable {
    /// `m_n = (2n + 1)!!`: 1, 3, 15, 105.
    pub fn new() -> Self {
        let mut moments = [1.0; 4];
        for n in 1..4 {
            moments[n] = moments[n - 1] * (2 * n + 1) as f64;
        }
        Self { moments }
    }

    /// The same moments by grid quadrature on `[-L, L)³` with `n` nodes per axis.
    pub fn quadrature(n: usize, cutoff: f64) -> Result<[f64; 4]> {
        let grid = crate::grid::VelocityGrid::new(n, cutoff)?;
        let mu = crate::state::maxwellian(&grid);
        Ok(std::array::from_fn(|k| {
            pairwise_sum_by(grid.len(), |p| {
                let v = grid.velocity(p);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).powi(k as i32) * mu[p]
            }) * grid.weight()
        }))
    }
}

/// Periodic central difference of order 1 or 2 on a uniform 1-D grid.
pub fn fd_derivative(values: &[f64], h: f64, order: usize) -> Result<Vec<f64>> {
    let n = values.len();
    let at = |i: usize, s: isize| values[(i as isize + s).rem_euclid(n as isize) as usize];
    match order {
        1 => Ok((0..n).map(|i| (at(i, 1) - at(i, -1)) / (2.0 * h)).collect()),
        2 => Ok((0..n).map(|i| (at(i, 1) - 2.0 * at(i, 0) + at(i, -1)) / (h * h)).collect()),
        o => Err(Error::UnsupportedOrder(o)),
    }
}

/// Refinement study of [`fd_derivative`] for a periodic function on
/// `[0, period)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementStudy {
    pub levels: Vec<usize>,
    /// Max difference between successive levels at the coarse nodes.
    pub increments: Vec<f64>,
    /// `log2` of successive increment ratios.
    pub orders: Vec<f64>,
    /// The finest-level derivative.
    pub finest: Vec<f64>,
}

impl RefinementStudy {
    /// Richardson estimate from the two finest increments.
    pub fn estimated_order(&self) -> Option<f64> {
        self.orders.last().copied()
    }
}

/// Differentiate `f` at `n, 2n, 4n, ...` points (`levels` entries) and
/// estimate the convergence order from the successive differences.
pub fn fd_refinement(f: impl Fn(f64) -> f64, period: f64, order: usize, coarse: usize, levels: usize) -> Result<RefinementStudy> {
    if levels < 3 {
        return Err(Error::Parameter("a Richardson estimate needs at least 3 levels".into()));
    }
    let sizes: Vec<usize> = (0..levels).map(|l| coarse << l).collect();
    let mut coarse_values = Vec::new();
    let mut finest = Vec::new();
    for &n in &sizes {
        let h = period / n as f64;
        let samples: Vec<f64> = (0..n).map(|i| f(i as f64 * h)).collect();
        let d = fd_derivative(&samples, h, order)?;
        let stride = n / coarse;
        coarse_values.push((0..coarse).map(|i| d[i * stride]).collect::<Vec<f64>>());
        finest = d;
    }
    let increments: Vec<f64> = coarse_values
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
        .collect();
    let orders = increments.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    Ok(RefinementStudy {
        levels: sizes,
        increments,
        orders,
        finest,
    })
}

/// A phase-space field known in closed form, so it can be resampled.
pub type AnalyticField<'a> = &'a dyn Fn([f64; 3], [f64; 3]) -> f64;

/// `Σ_{|α|=a, |β|=b} ||w(a, b) ∂^α_β f||²_{L²_{x,v}}` for an analytic `f` on
/// a grid refined by `factor` in every direction, without the exponential
/// factor (`φ = 0`). Derivatives are taken one axis at a time with the
/// per-axis spectral routines.
pub fn highres_norm(
    f: AnalyticField<'_>,
    grid: &PhaseGrid,
    spec: &WeightSpec,
    alpha: usize,
    beta: usize,
    factor: usize,
) -> Result<f64> {
    if ![2, 4].contains(&factor) {
        return Err(Error::Parameter(format!("refinement factor {factor} not in {{2, 4}}")));
    }
    if (grid.x.length() - TWO_PI).abs() > 1e-12 {
        return Err(Error::Unsupported("highres_norm expects the default 2π torus".into()));
    }
    let fine = PhaseGrid::build(grid.x.dim(), grid.x.n() * factor, grid.v.n() * factor, grid.v.cutoff())?;
    let nv = fine.v.len();
    let nx = fine.x.len();
    let exponent = 2.0 * spec.exponent(alpha, beta)?;
    let weight2: Vec<f64> = (0..nv)
        .map(|p| japanese_bracket(fine.v.velocity(p)).powf(exponent))
        .collect();
    let samples: Vec<f64> = (0..fine.len())
        .map(|i| f(fine.x.coords(i / nv), fine.v.velocity(i % nv)))
        .collect();
    let mut total = 0.0;
    for (a_idx, b_idx) in split_indices(fine.x.dim(), alpha, beta) {
        let mut d = samples.clone();
        for (axis, order) in axis_orders(&a_idx) {
            d = spatial_derivative(&fine, &d, axis, order)?;
        }
        for (axis, order) in axis_orders(&b_idx) {
            let mut out = vec![0.0; d.len()];
            for ix in 0..nx {
                let block = fine.v.derivative(&d[ix * nv..(ix + 1) * nv], axis, order)?;
                out[ix * nv..(ix + 1) * nv].copy_from_slice(&block);
            }
            d = out;
        }
        total += pairwise_sum_by(d.len(), |i| d[i] * d[i] * weight2[i % nv]);
    }
    Ok(total * fine.cell_volume())
}

/// Ordered axis lists for every `(α, β)` with `|α| = alpha`, `|β| = beta`.
fn split_indices(dim: usize, alpha: usize, beta: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for a in sorted_axes(dim, alpha) {
        for b in sorted_axes(3, beta) {
            out.push((a.clone(), b));
        }
    }
    out
}

/// Non-decreasing axis sequences of length `order`, one per multi-index.
fn sorted_axes(dim: usize, order: usize) -> Vec<Vec<usize>> {
    match order {
        0 => vec![vec![]],
        1 => (0..dim).map(|i| vec![i]).collect(),
        2 => (0..dim).flat_map(|i| (i..dim).map(move |j| vec![i, j])).collect(),
        _ => Vec::new(),
    }
}

/// Derivative order per axis of a sorted axis list. A repeated axis is one
/// higher-order derivative, so even orders keep the Nyquist mode.
fn axis_orders(axes: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &a in axes {
        match out.last_mut() {
            Some((axis, order)) if *axis == a => *order += 1,
            _ => out.push((a, 1)),
        }
    }
    out
}

fn spatial_derivative(grid: &PhaseGrid, f: &[f64], axis: usize, order: usize) -> Result<Vec<f64>> {
    let nv = grid.v.len();
    let nx = grid.x.len();
    let mut out = vec![0.0; f.len()];
    for iv in 0..nv {
        let column: Vec<f64> = (0..nx).map(|ix| f[ix * nv + iv]).collect();
        let d = grid.x.derivative(&column, axis, order)?;
        for (ix, v) in d.into_iter().enumerate() {
            out[ix * nv + iv] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_moments() {
        assert_eq!(GaussianMomentTable::new().moments, [1.0, 3.0, 15.0, 105.0]);
        let q = GaussianMomentTable::quadrature(64, 10.0).unwrap();
        for (a, b) in q.iter().zip(GaussianMomentTable::new().moments) {
            assert!((a - b).abs() < 1e-11 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn second_order_convergence() {
        let study = fd_refinement(|x| (3.0 * x).sin(), TWO_PI, 1, 16, 4).unwrap();
        let p = study.estimated_order().unwrap();
        assert!((p - 2.0).abs() < 0.1, "{study:?}");
        let flat = fd_derivative(&[2.5; 8], 0.1, 2).unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
    }
}
