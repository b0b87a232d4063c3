use std::f64::consts::PI;

use vpl_core::grid::{Axis, PhaseGrid, TWO_PI};
use vpl_core::numerics::max_abs;
use vpl_core::oracle::{fd_derivative, fd_refinement, highres_norm, GaussianMomentTable};
use vpl_core::state::{Background, SystemState};
use vpl_core::weights::{finite_difference, functional_e_k, norm_x_k_fields, DerivativeMethod, WeightLadder, WeightSpec};

fn gaussian(v: [f64; 3]) -> f64 {
    (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / 2.0).exp() / (2.0 * PI).powf(1.5)
}

fn bump(x: [f64; 3], v: [f64; 3]) -> f64 {
    (1.0 + 0.3 * x[0].cos()) * v[0] * gaussian(v)
}

/// Polynomial weights up to second order, so quadrature converges spectrally.
fn mild_spec() -> WeightSpec {
    WeightSpec::landau(1.0, 6.0).unwrap().with_r(0.0)
}

#[test]
fn gaussian_moments_match_quadrature() {
    let exact = GaussianMomentTable::new().moments;
    assert_eq!(exact, [1.0, 3.0, 15.0, 105.0]);
    let q = GaussianMomentTable::quadrature(32, 8.0).unwrap();
    for (a, b) in q.iter().zip(exact) {
        assert!((a - b).abs() <= 1e-10 * b, "{a} vs {b}");
    }
}

#[test]
fn finite_differences_are_second_order() {
    for order in [1, 2] {
        let study = fd_refinement(|x| (2.0 * x).cos() + 0.5 * x.sin(), TWO_PI, order, 16, 5).unwrap();
        let p = study.estimated_order().unwrap();
        assert!((p - 2.0).abs() < 0.1, "order {order}: {study:?}");
    }
    assert!(fd_derivative(&[1.0; 8], 0.1, 3).is_err());
    assert!(fd_refinement(f64::sin, TWO_PI, 1, 8, 2).is_err());
}

#[test]
fn finite_difference_approaches_spectral() {
    let mut errors = Vec::new();
    for n_v in [32, 64, 128] {
        let grid = PhaseGrid::build(1, 4, n_v, 8.0).unwrap();
        let nv = grid.v.len();
        let f: Vec<f64> = (0..grid.len()).map(|i| bump(grid.x.coords(i / nv), grid.v.velocity(i % nv))).collect();
        let spectral = grid.spectral_derivative(&f, Axis::V(0), 1).unwrap();
        let fd = finite_difference(&grid, &f, [0; 3], [1, 0, 0]).unwrap();
        let diff: Vec<f64> = spectral.iter().zip(&fd).map(|(a, b)| a - b).collect();
        errors.push(max_abs(&diff) / max_abs(&spectral));
    }
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!(ratio > 3.5 && ratio < 4.5, "{errors:?}");
    }
}

#[test]
fn highres_norm_matches_shells_on_the_refined_grid() {
    let coarse = PhaseGrid::build(1, 4, 8, 8.0).unwrap();
    let fine = PhaseGrid::build(1, 8, 16, 8.0).unwrap();
    let nv = fine.v.len();
    let f: Vec<f64> = (0..fine.len()).map(|i| bump(fine.x.coords(i / nv), fine.v.velocity(i % nv))).collect();
    let zero = vec![0.0; fine.len()];
    let phi = vec![0.0; fine.x.len()];
    let spec = mild_spec();
    let shells = norm_x_k_fields(&fine, [&f, &zero], &phi, &spec, &WeightLadder::unit(), DerivativeMethod::Spectral)
        .unwrap()
        .shells;
    for a in 0..=2 {
        for b in 0..=2 - a {
            let oracle = highres_norm(&bump, &coarse, &spec, a, b, 2).unwrap();
            let got = shells[a][b];
            assert!((oracle - got).abs() <= 1e-12 * oracle.abs().max(1e-300), "({a}, {b}): {oracle} vs {got}");
        }
    }
}

#[test]
fn highres_norm_is_converged() {
    let grid = PhaseGrid::build(1, 4, 16, 8.0).unwrap();
    let spec = mild_spec();
    for (a, b) in [(0, 0), (1, 0), (0, 1), (1, 1), (0, 2)] {
        let two = highres_norm(&bump, &grid, &spec, a, b, 2).unwrap();
        let four = highres_norm(&bump, &grid, &spec, a, b, 4).unwrap();
        assert!((two - four).abs() <= 1e-8 * four, "({a}, {b}): {two} vs {four}");
    }
    assert!(highres_norm(&bump, &grid, &spec, 0, 0, 3).is_err());
    let zero = highres_norm(&|_, _| 0.0, &grid, &spec, 1, 1, 2).unwrap();
    assert_eq!(zero, 0.0);
}

#[test]
fn radial_profile_reduces_to_a_one_dimensional_integral() {
    // ∫ ⟨v⟩^{2e} μ² dv = 4π ∫ r² ⟨r⟩^{2e} μ(r)² dr for the (0, 0) shell of f = μ
    let grid = PhaseGrid::build(1, 4, 8, 8.0).unwrap();
    let spec = mild_spec();
    let e = spec.exponent(0, 0).unwrap();
    let value = highres_norm(&|_, v| gaussian(v), &grid, &spec, 0, 0, 4).unwrap();
    let n = 20_000;
    let h = 12.0 / n as f64;
    let radial: f64 = (1..n)
        .map(|i| {
            let r = i as f64 * h;
            let g = gaussian([r, 0.0, 0.0]);
            r * r * (1.0 + r * r).powf(e) * g * g
        })
        .sum::<f64>()
        * h
        * 4.0
        * PI;
    let expected = TWO_PI * radial;
    assert!((value - expected).abs() <= 1e-9 * expected, "{value} vs {expected}");
}

#[test]
fn field_part_of_e_k_for_a_cosine_potential() {
    // f = 0 and φ = cos x: four shells of ∫ sin² or ∫ cos², each π
    let grid = PhaseGrid::build(1, 16, 4, 8.0).unwrap();
    let background = Background::new(grid.clone());
    let n = grid.len();
    let phi: Vec<f64> = (0..grid.x.len()).map(|i| grid.x.coords(i)[0].cos()).collect();
    let state = SystemState::with_external_potential(background, vec![0.0; n], vec![0.0; n], phi, 0.0).unwrap();
    let spec = WeightSpec::landau(-3.0, 10.0).unwrap();
    let e_k = functional_e_k(&state, &spec, &WeightLadder::unit()).unwrap();
    assert!((e_k - 4.0 * PI).abs() < 1e-12, "{e_k}");
}
