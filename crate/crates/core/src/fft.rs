//! Multi-dimensional complex FFTs over row-major arrays.
//!
//! Transforms are unnormalized in both directions; callers divide by the
//! number of points on the way back.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Cached plans for an n-dimensional row-major array.
#[derive(Clone)]
pub struct FftNd {
    shape: Vec<usize>,
    len: usize,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl fmt::Debug for FftNd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftNd").field("shape", &self.shape).finish()
    }
}

impl FftNd {
    pub fn new(shape: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = shape.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            shape: shape.to_vec(),
            len: shape.iter().product(),
            forward,
            inverse,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        for axis in 0..self.shape.len() {
            self.transform_axis(data, axis, Direction::Forward);
        }
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        for axis in 0..self.shape.len() {
            self.transform_axis(data, axis, Direction::Inverse);
        }
    }

    /// Transform every line along one axis.
    pub fn transform_axis(&self, data: &mut [Complex64], axis: usize, direction: Direction) {
        debug_assert_eq!(data.len(), self.len);
        let n = self.shape[axis];
        if n == 1 {
            return;
        }
        let plan = match direction {
            Direction::Forward => &self.forward[axis],
            Direction::Inverse => &self.inverse[axis],
        };
        let stride: usize = self.shape[axis + 1..].iter().product();
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        if stride == 1 {
            plan.process_with_scratch(data, &mut scratch);
            return;
        }
        // Transpose each [n][stride] block to [stride][n], transform the
        // contiguous lines, transpose back.
        let block = n * stride;
        let mut lines = vec![Complex64::default(); block];
        for chunk in data.chunks_exact_mut(block) {
            for i in 0..n {
                let row = &chunk[i * stride..(i + 1) * stride];
                for (s, &value) in row.iter().enumerate() {
                    lines[s * n + i] = value;
                }
            }
            plan.process_with_scratch(&mut lines, &mut scratch);
            for i in 0..n {
                let row = &mut chunk[i * stride..(i + 1) * stride];
                for (s, value) in row.iter_mut().enumerate() {
                    *value = lines[s * n + i];
                }
            }
        }
    }
}

/// Signed integer mode carried by FFT index `j` on an `n`-point axis:
/// `0, 1, ..., n/2, -n/2 + 1, ..., -1`.
pub fn signed_mode(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_cover_symmetric_range() {
        let modes: Vec<i64> = (0..8).map(|j| signed_mode(j, 8)).collect();
        assert_eq!(modes, vec![0, 1, 2, 3, 4, -3, -2, -1]);
    }

    #[test]
    fn axis_transform_matches_naive_dft() {
        let shape = [4, 3, 5];
        let fft = FftNd::new(&shape);
        let data: Vec<Complex64> = (0..60)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut fast = data.clone();
        fft.forward(&mut fast);
        for k0 in 0..4 {
            for k1 in 0..3 {
                for k2 in 0..5 {
                    let mut acc = Complex64::default();
                    for j0 in 0..4 {
                        for j1 in 0..3 {
                            for j2 in 0..5 {
                                let phase = -2.0
                                    * std::f64::consts::PI
                                    * ((k0 * j0) as f64 / 4.0
                                        + (k1 * j1) as f64 / 3.0
                                        + (k2 * j2) as f64 / 5.0);
                                acc += data[(j0 * 3 + j1) * 5 + j2] * Complex64::from_polar(1.0, phase);
                            }
                        }
                    }
                    let got = fast[(k0 * 3 + k1) * 5 + k2];
                    assert!((got - acc).norm() < 1e-12, "{got} vs {acc}");
                }
            }
        }
        fft.inverse(&mut fast);
        for (a, b) in fast.iter().zip(&data) {
            assert!((a / 60.0 - b).norm() < 1e-14);
        }
    }
}
