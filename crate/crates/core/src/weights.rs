//! Polynomial velocity weights and the weighted energy and dissipation
//! functionals built from them.
//!
//! For a derivative `∂^α_β` (spatial order `|α|`, velocity order `|β|`,
//! `|α| + |β| ≤ 2`) the weight is `w(α, β) = ⟨v⟩^{k - p|α| - q|β| + r}` with
//!
//! ```text
//! Landau:     q = 3 - (γ - 1),         p = 3,          r = 2q + 6
//! Boltzmann:  q = 6s - 3(γ - 1),       p = q + γ - 1,  r = 2q + 6
//! ```
//!
//! Since `w²` is a power of `⟨v⟩`, `∇_v w² = A v/⟨v⟩² w²` with `A` twice
//! the exponent; the energy norm carries the extra factor
//! `exp(±A φ / ⟨v⟩²)`, with `+` for the positive species.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{PhaseGrid, Spectrum, VelocityGrid};
use crate::numerics::{japanese_bracket, pairwise_sum, pairwise_sum_by};
use crate::poisson::sobolev_gradient_norm_sq;
use crate::state::{project_p_fields, Background, Species, SystemState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    Landau,
    Boltzmann,
}

impl Model {
    /// Smallest admissible weight index `k₀`.
    pub fn k0(self) -> f64 {
        match self {
            Model::Landau => 10.0,
            Model::Boltzmann => 17.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub model: Model,
    pub gamma: f64,
    /// Angular singularity; only meaningful for Boltzmann.
    pub s: f64,
    pub k: f64,
    pub q: f64,
    pub p: f64,
    pub r: f64,
}

impl WeightSpec {
    pub fn landau(gamma: f64, k: f64) -> Result<Self> {
        if !(-3.0..=1.0).contains(&gamma) {
            return Err(Error::Parameter(format!("Landau gamma = {gamma} outside [-3, 1]")));
        }
        check_k(k)?;
        let q = 3.0 - (gamma - 1.0);
        Ok(Self {
            model: Model::Landau,
            gamma,
            s: 0.0,
            k,
            q,
            p: 3.0,
            r: 2.0 * q + 6.0,
        })
    }

    pub fn boltzmann(gamma: f64, s: f64, k: f64) -> Result<Self> {
        if !(gamma > -3.0 && gamma <= 1.0) {
            return Err(Error::Parameter(format!("Boltzmann gamma = {gamma} outside (-3, 1]")));
        }
        if !(0.5..1.0).contains(&s) {
            return Err(Error::Parameter(format!("s = {s} outside [1/2, 1)")));
        }
        check_k(k)?;
        let q = 6.0 * s - 3.0 * (gamma - 1.0);
        Ok(Self {
            model: Model::Boltzmann,
            gamma,
            s,
            k,
            q,
            p: q + gamma - 1.0,
            r: 2.0 * q + 6.0,
        })
    }

    /// Same spec with `r` replaced, e.g. the `r = 2q` variant.
    pub fn with_r(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    /// `k - p|α| - q|β| + r`.
    pub fn exponent(&self, alpha: usize, beta: usize) -> Result<f64> {
        if alpha + beta > 2 {
            return Err(Error::WeightOrder(alpha + beta));
        }
        Ok(self.k - self.p * alpha as f64 - self.q * beta as f64 + self.r)
    }

    /// `A_{α,β}` in `∇_v w² = A v/⟨v⟩² w²`.
    pub fn a_coefficient(&self, alpha: usize, beta: usize) -> Result<f64> {
        Ok(2.0 * self.exponent(alpha, beta)?)
    }

    /// `w(α, β)` at a single value of `⟨v⟩`.
    pub fn weight_at(&self, bracket: f64, alpha: usize, beta: usize) -> Result<f64> {
        Ok(bracket.powf(self.exponent(alpha, beta)?))
    }

    /// `κ` of the product inequalities: 2 for Landau, `4s` for Boltzmann.
    pub fn kappa(&self) -> f64 {
        match self.model {
            Model::Landau => 2.0,
            Model::Boltzmann => 4.0 * self.s,
        }
    }
}

fn check_k(k: f64) -> Result<()> {
    if !(k >= 0.0 && k.is_finite()) {
        return Err(Error::Parameter(format!("weight index k = {k} must be finite and >= 0")));
    }
    Ok(())
}

/// `⟨v⟩` at every velocity node.
pub fn bracket_field(grid: &VelocityGrid) -> Vec<f64> {
    grid.velocities().into_iter().map(japanese_bracket).collect()
}

/// `w(α, β)` sampled on the velocity nodes.
pub fn weight_field(spec: &WeightSpec, alpha: usize, beta: usize, grid: &VelocityGrid) -> Result<Vec<f64>> {
    let e = spec.exponent(alpha, beta)?;
    Ok(bracket_field(grid).into_iter().map(|b| b.powf(e)).collect())
}

/// `exp(sign · A_{α,β} φ(x) / ⟨v⟩²)` on the phase grid.
pub fn exp_weight_field(
    spec: &WeightSpec,
    alpha: usize,
    beta: usize,
    phi: &[f64],
    sign: f64,
    grid: &PhaseGrid,
) -> Result<Vec<f64>> {
    if phi.len() != grid.x.len() {
        return Err(Error::GridMismatch {
            expected: grid.x.len(),
            found: phi.len(),
        });
    }
    let a = spec.a_coefficient(alpha, beta)?;
    let inv_b2: Vec<f64> = bracket_field(&grid.v).into_iter().map(|b| 1.0 / (b * b)).collect();
    let mut out = Vec::with_capacity(grid.len());
    for &p in phi {
        out.extend(inv_b2.iter().map(|ib| (sign * a * p * ib).exp()));
    }
    Ok(out)
}

/// The constants `C_{a,b}`, `a + b ≤ 2`, set to `R^{2a+b}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLadder {
    pub ratio: f64,
    c: [[f64; 3]; 3],
}

impl Default for WeightLadder {
    fn default() -> Self {
        Self::new(100.0).expect("default ratio is valid")
    }
}

impl WeightLadder {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(ratio > 1.0 && ratio.is_finite()) {
            return Err(Error::Parameter(format!("ladder ratio {ratio} must exceed 1")));
        }
        let mut c = [[0.0; 3]; 3];
        for (a, row) in c.iter_mut().enumerate() {
            for (b, value) in row.iter_mut().enumerate() {
                if a + b <= 2 {
                    *value = ratio.powi((2 * a + b) as i32);
                }
            }
        }
        Ok(Self { ratio, c })
    }

    /// All ones; turns `X_k` into a plain weighted Sobolev sum.
    pub fn unit() -> Self {
        Self {
            ratio: 1.0,
            c: [[1.0; 3]; 3],
        }
    }

    pub fn get(&self, alpha: usize, beta: usize) -> Result<f64> {
        if alpha + beta > 2 {
            return Err(Error::WeightOrder(alpha + beta));
        }
        Ok(self.c[alpha][beta])
    }

    /// Every violated ordering relation, as text.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for a in 0..=2usize {
            for b in 0..=2 - a {
                for b1 in 0..b {
                    if self.c[a][b] < self.ratio * self.c[a][b1] {
                        out.push(format!("C[{a}][{b}] < R C[{a}][{b1}]"));
                    }
                }
                if b >= 1 && self.c[a + 1][b - 1] < self.ratio * self.c[a][b] {
                    out.push(format!("C[{}][{}] < R C[{a}][{b}]", a + 1, b - 1));
                }
            }
        }
        out
    }
}

/// Outcome of one pointwise weight inequality over all samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub name: String,
    pub samples: usize,
    pub failures: usize,
    /// Largest `lhs / rhs` seen.
    pub worst_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub checks: Vec<InequalityCheck>,
}

impl InequalityReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.failures == 0)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| c.failures > 0)
            .map(|c| c.name.as_str())
            .collect()
    }
}

/// Relative slack for inequalities that hold with equality.
const INEQUALITY_SLACK: f64 = 1e-12;

/// Check the pointwise weight inequalities at each sample velocity.
///
/// Every inequality is between powers of `⟨v⟩`, evaluated directly.
pub fn weight_inequality_suite(spec: &WeightSpec, samples: &[[f64; 3]]) -> InequalityReport {
    let shells: Vec<(usize, usize)> = (0..=2).flat_map(|a| (0..=2 - a).map(move |b| (a, b))).collect();
    type Rule = Box<dyn Fn(f64) -> (f64, f64)>;
    let mut rules: Vec<(String, Rule)> = Vec::new();
    let s = *spec;
    let w = move |b: f64, a: usize, be: usize| s.weight_at(b, a, be).expect("shell in range");

    for &(a, b) in &shells {
        rules.push((format!("w({a},{b}) >= 1"), Box::new(move |x| (1.0, w(x, a, b)))));
    }
    let (gain, tag) = match spec.model {
        Model::Landau => (3.0, "210"),
        Model::Boltzmann => (6.0 * spec.s, "29"),
    };
    for &(a, b) in &shells {
        for b1 in 0..b {
            rules.push((
                format!("{tag}: w({a},{b}) <v>^{gain} <= w({a},{b1})"),
                Box::new(move |x| (w(x, a, b) * x.powf(gain), w(x, a, b1))),
            ));
        }
        for a1 in 0..a {
            rules.push((
                format!("{tag}: w({a},{b}) <v>^{gain} <= w({a1},{b})"),
                Box::new(move |x| (w(x, a, b) * x.powf(gain), w(x, a1, b))),
            ));
        }
        if b >= 1 {
            let g = spec.gamma;
            rules.push((
                format!("211: w({a},{b}) <= <v>^(gamma-1) w({},{})", a + 1, b - 1),
                Box::new(move |x| (w(x, a, b), x.powf(g - 1.0) * w(x, a + 1, b - 1))),
            ));
        }
        let k = spec.k;
        rules.push((
            format!("212: <v>^(k+6) <= w({a},{b})"),
            Box::new(move |x| (x.powf(k + 6.0), w(x, a, b))),
        ));
        if spec.model == Model::Boltzmann && a >= 1 {
            let (sv, g) = (spec.s, spec.gamma);
            rules.push((
                format!("213: w({a},{b}) <= w({},{b})^s w({},{})^(1-s) <v>^gamma", a - 1, a - 1, b + 1),
                Box::new(move |x| {
                    (
                        w(x, a, b),
                        w(x, a - 1, b).powf(sv) * w(x, a - 1, b + 1).powf(1.0 - sv) * x.powf(g),
                    )
                }),
            ));
        }
    }
    let kappa = spec.kappa();
    let shell_max = move |x: f64, order: usize, need_beta: bool| {
        shells_of(order)
            .filter(|&(_, b)| !need_beta || b >= 1)
            .map(|(a, b)| w(x, a, b).powi(2) * x.powf(kappa))
            .fold(0.0, f64::max)
    };
    rules.push((
        "l31: max_1 w^2 <v>^kappa <= w(0,0) w(1,0)".into(),
        Box::new(move |x| (shell_max(x, 1, false), w(x, 0, 0) * w(x, 1, 0))),
    ));
    rules.push((
        "l32: max_2 w^2 <v>^kappa <= w(1,0) w(2,0)".into(),
        Box::new(move |x| (shell_max(x, 2, false), w(x, 1, 0) * w(x, 2, 0))),
    ));
    rules.push((
        "l32: max_2,beta>=1 w^2 <v>^kappa <= w(0,1) w(1,1)".into(),
        Box::new(move |x| (shell_max(x, 2, true), w(x, 0, 1) * w(x, 1, 1))),
    ));
    rules.push((
        "linfty2: max_2 w^2 <v>^kappa <= w(2,0)^2 <v>^kappa".into(),
        Box::new(move |x| (shell_max(x, 2, false), w(x, 2, 0).powi(2) * x.powf(kappa))),
    ));
    rules.push((
        "linfty2: w(2,0)^2 <v>^kappa <= w(1,0)^(4/5) w(2,0)^(6/5)".into(),
        Box::new(move |x| (w(x, 2, 0).powi(2) * x.powf(kappa), w(x, 1, 0).powf(0.8) * w(x, 2, 0).powf(1.2))),
    ));

    let brackets: Vec<f64> = samples.iter().map(|&v| japanese_bracket(v)).collect();
    let checks = rules
        .into_iter()
        .map(|(name, rule)| {
            let mut failures = 0;
            let mut worst_ratio: f64 = 0.0;
            for &x in &brackets {
                let (lhs, rhs) = rule(x);
                let ratio = lhs / rhs;
                worst_ratio = worst_ratio.max(ratio);
                if !(ratio <= 1.0 + INEQUALITY_SLACK) {
                    failures += 1;
                }
            }
            InequalityCheck {
                name,
                samples: brackets.len(),
                failures,
                worst_ratio,
            }
        })
        .collect();
    InequalityReport { checks }
}

fn shells_of(order: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..=order).map(move |a| (a, order - a))
}

/// Every `(α, β)` multi-index pair with `|α| + |β| ≤ 2`, `α` restricted to
/// the spatial dimension.
pub fn derivative_indices(dim_x: usize) -> Vec<([usize; 3], [usize; 3])> {
    let spatial = multi_indices_up_to(dim_x, 2);
    let velocity = multi_indices_up_to(3, 2);
    let mut out = Vec::new();
    for a in &spatial {
        for b in &velocity {
            if order(a) + order(b) <= 2 {
                out.push((*a, *b));
            }
        }
    }
    out
}

fn order(m: &[usize; 3]) -> usize {
    m.iter().sum()
}

fn multi_indices_up_to(dim: usize, max: usize) -> Vec<[usize; 3]> {
    let top = |axis: usize| if axis < dim { max } else { 0 };
    let mut out = Vec::new();
    for i in 0..=top(0) {
        for j in 0..=top(1) {
            for k in 0..=top(2) {
                if i + j + k <= max {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// How `∂^α_β f` is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMethod {
    #[default]
    Spectral,
    /// Second-order central differences on the periodic grid.
    FiniteDifference,
}

enum Derivatives<'a> {
    Spectral(Spectrum<'a>),
    FiniteDifference(&'a PhaseGrid, &'a [f64]),
}

impl<'a> Derivatives<'a> {
    fn new(grid: &'a PhaseGrid, f: &'a [f64], method: DerivativeMethod) -> Result<Self> {
        Ok(match method {
            DerivativeMethod::Spectral => Derivatives::Spectral(grid.spectrum(f)?),
            DerivativeMethod::FiniteDifference => Derivatives::FiniteDifference(grid, f),
        })
    }

    fn get(&self, alpha: [usize; 3], beta: [usize; 3]) -> Result<Vec<f64>> {
        match self {
            Derivatives::Spectral(s) => s.derivative(alpha, beta),
            Derivatives::FiniteDifference(g, f) => finite_difference(g, f, alpha, beta),
        }
    }
}

/// `∂^α_x ∂^β_v f` by repeated periodic central differences.
pub fn finite_difference(grid: &PhaseGrid, f: &[f64], alpha: [usize; 3], beta: [usize; 3]) -> Result<Vec<f64>> {
    if f.len() != grid.len() {
        return Err(Error::GridMismatch {
            expected: grid.len(),
            found: f.len(),
        });
    }
    let shape = grid.shape();
    let dim = grid.x.dim();
    let mut out = f.to_vec();
    for (axis, &o) in alpha.iter().enumerate() {
        if o > 0 && axis >= dim {
            return Err(Error::UnsupportedOrder(o));
        }
        if o > 0 {
            out = central_difference(&out, &shape, axis, o, grid.x.spacing())?;
        }
    }
    for (axis, &o) in beta.iter().enumerate() {
        if o > 0 {
            out = central_difference(&out, &shape, dim + axis, o, grid.v.spacing())?;
        }
    }
    Ok(out)
}

fn central_difference(f: &[f64], shape: &[usize], axis: usize, order: usize, h: f64) -> Result<Vec<f64>> {
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let block = n * stride;
    let at = |idx: usize, shift: isize| {
        let base = idx - idx % block;
        let i = (idx / stride) % n;
        let j = (i as isize + shift).rem_euclid(n as isize) as usize;
        f[base + j * stride + idx % stride]
    };
    match order {
        1 => Ok((0..f.len()).map(|i| (at(i, 1) - at(i, -1)) / (2.0 * h)).collect()),
        2 => Ok((0..f.len()).map(|i| (at(i, 1) - 2.0 * at(i, 0) + at(i, -1)) / (h * h)).collect()),
        o => Err(Error::UnsupportedOrder(o)),
    }
}

/// A weighted sum split by `(|α|, |β|)` shell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShellBreakdown {
    pub total: f64,
    /// `shells[a][b]`: the sum over `|α| = a, |β| = b`, before `C_{a,b}`.
    pub shells: [[f64; 3]; 3],
}

impl ShellBreakdown {
    /// Total with the top shell `|α| + |β| = 2` left out.
    pub fn below_top_shell(&self, ladder: &WeightLadder) -> f64 {
        let mut sum = 0.0;
        for a in 0..=1usize {
            for b in 0..=1 - a {
                sum += ladder.c[a][b] * self.shells[a][b];
            }
        }
        sum
    }
}

/// `X_k` of explicit species arrays and a potential.
pub fn norm_x_k_fields(
    grid: &PhaseGrid,
    f: [&[f64]; 2],
    phi: &[f64],
    spec: &WeightSpec,
    ladder: &WeightLadder,
    method: DerivativeMethod,
) -> Result<ShellBreakdown> {
    let mut out = ShellBreakdown::default();
    let cell = grid.cell_volume();
    let weights = shell_weights(spec, &grid.v)?;
    for species in Species::BOTH {
        let fs = f[species.index()];
        let derivs = Derivatives::new(grid, fs, method)?;
        let mut exp_cache: [[Option<Vec<f64>>; 3]; 3] = Default::default();
        for (alpha, beta) in derivative_indices(grid.x.dim()) {
            let (a, b) = (order(&alpha), order(&beta));
            let exp_w = match &mut exp_cache[a][b] {
                Some(v) => &*v,
                slot => slot.insert(exp_weight_field(spec, a, b, phi, species.sign(), grid)?),
            };
            let d = derivs.get(alpha, beta)?;
            let w = &weights[a][b];
            let nv = grid.v.len();
            let sum = pairwise_sum_by(d.len(), |i| {
                let value = exp_w[i] * w[i % nv] * d[i];
                value * value
            });
            out.shells[a][b] += sum * cell;
        }
    }
    out.total = (0..=2usize)
        .flat_map(|a| (0..=2 - a).map(move |b| (a, b)))
        .map(|(a, b)| ladder.c[a][b] * out.shells[a][b])
        .sum();
    Ok(out)
}

fn shell_weights(spec: &WeightSpec, grid: &VelocityGrid) -> Result<[[Vec<f64>; 3]; 3]> {
    let mut out: [[Vec<f64>; 3]; 3] = Default::default();
    for (a, row) in out.iter_mut().enumerate() {
        for (b, slot) in row.iter_mut().enumerate() {
            if a + b <= 2 {
                *slot = weight_field(spec, a, b, grid)?;
            }
        }
    }
    Ok(out)
}

/// `X_k` of the state, using its own potential.
pub fn norm_x_k(state: &SystemState, spec: &WeightSpec, ladder: &WeightLadder) -> Result<ShellBreakdown> {
    norm_x_k_fields(
        state.grid(),
        [state.f_plus(), state.f_minus()],
        state.phi(),
        spec,
        ladder,
        DerivativeMethod::Spectral,
    )
}

/// The anisotropic gradient `P_v ∇g + ⟨v⟩ (I - P_v) ∇g` of a velocity field.
pub fn anisotropic_gradient(grid: &VelocityGrid, g: &[f64]) -> [Vec<f64>; 3] {
    let grad = grid.gradient(g);
    let mut out: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; g.len()]);
    for iv in 0..g.len() {
        let v = grid.velocity(iv);
        let speed = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let d = [grad[0][iv], grad[1][iv], grad[2][iv]];
        if speed == 0.0 {
            for j in 0..3 {
                out[j][iv] = d[j];
            }
            continue;
        }
        let e = [v[0] / speed, v[1] / speed, v[2] / speed];
        let radial = d[0] * e[0] + d[1] * e[1] + d[2] * e[2];
        let bracket = japanese_bracket(v);
        for j in 0..3 {
            let parallel = radial * e[j];
            out[j][iv] = parallel + bracket * (d[j] - parallel);
        }
    }
    out
}

/// The two pieces of the Landau dissipation norm `L²_D(m)` of a velocity
/// field: `||g m ⟨v⟩^{γ/2}||` and `||∇̃(m g) ⟨v⟩^{γ/2}||`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissipationNorm {
    pub zeroth: f64,
    pub gradient: f64,
}

impl DissipationNorm {
    pub fn value(&self) -> f64 {
        self.zeroth + self.gradient
    }
}

/// `||g||_{L²_D(m)}` for a velocity field `g` and weight `m`.
pub fn landau_d_norm(grid: &VelocityGrid, g: &[f64], m: &[f64], gamma: f64) -> Result<DissipationNorm> {
    if g.len() != grid.len() || m.len() != grid.len() {
        return Err(Error::GridMismatch {
            expected: grid.len(),
            found: g.len().min(m.len()),
        });
    }
    let damp: Vec<f64> = bracket_field(grid).into_iter().map(|b| b.powf(gamma / 2.0)).collect();
    let mg: Vec<f64> = g.iter().zip(m).map(|(a, b)| a * b).collect();
    let h3 = grid.weight();
    let zeroth = pairwise_sum_by(g.len(), |i| (mg[i] * damp[i]).powi(2)) * h3;
    let grad = anisotropic_gradient(grid, &mg);
    let gradient = pairwise_sum_by(g.len(), |i| {
        (grad[0][i].powi(2) + grad[1][i].powi(2) + grad[2][i].powi(2)) * damp[i] * damp[i]
    }) * h3;
    Ok(DissipationNorm {
        zeroth: zeroth.sqrt(),
        gradient: gradient.sqrt(),
    })
}

/// `Y_k` of explicit species arrays (Landau only).
pub fn norm_y_k_fields(grid: &PhaseGrid, f: [&[f64]; 2], spec: &WeightSpec) -> Result<ShellBreakdown> {
    if spec.model != Model::Landau {
        return Err(Error::Unsupported(
            "Y_k is defined through the Landau dissipation norm; use boltzmann_surrogate_y_k".into(),
        ));
    }
    weighted_dissipation(grid, f, spec, |w, g| {
        let n = landau_d_norm(&grid.v, g, w, spec.gamma)?.value();
        Ok(n * n)
    })
}

/// `Y_k` of the state (Landau only).
pub fn norm_y_k(state: &SystemState, spec: &WeightSpec) -> Result<ShellBreakdown> {
    norm_y_k_fields(state.grid(), [state.f_plus(), state.f_minus()], spec)
}

/// Diagnostic-only Boltzmann dissipation surrogate: `Y_k` with the
/// velocity norm `||⟨D_v⟩^s (⟨v⟩^{γ/2} w g)||_{L²}`. It plays no role in the
/// dynamics.
pub fn boltzmann_surrogate_y_k(grid: &PhaseGrid, f: [&[f64]; 2], spec: &WeightSpec) -> Result<ShellBreakdown> {
    if spec.model != Model::Boltzmann {
        return Err(Error::Unsupported("the fractional surrogate is only for the Boltzmann model".into()));
    }
    let damp: Vec<f64> = bracket_field(&grid.v).into_iter().map(|b| b.powf(spec.gamma / 2.0)).collect();
    let vgrid = &grid.v;
    let fft = crate::fft::FftNd::new(&[vgrid.n(); 3]);
    let n = vgrid.n();
    let scale = vgrid.wavenumber_scale();
    let multiplier: Vec<f64> = (0..vgrid.len())
        .map(|iv| {
            let m = vgrid.multi_index(iv);
            let eta2: f64 = m
                .iter()
                .map(|&j| (crate::fft::signed_mode(j, n) as f64 * scale).powi(2))
                .sum();
            (1.0 + eta2).powf(spec.s)
        })
        .collect();
    weighted_dissipation(grid, f, spec, |w, g| {
        let mut buf: Vec<num_complex::Complex64> = g
            .iter()
            .zip(w)
            .zip(&damp)
            .map(|((a, b), c)| num_complex::Complex64::new(a * b * c, 0.0))
            .collect();
        fft.forward(&mut buf);
        // Parseval: Σ|ĝ|² / N = Σ|g|².
        let sum = pairwise_sum_by(buf.len(), |i| (multiplier[i] * buf[i].norm()).powi(2));
        Ok(sum / buf.len() as f64 * vgrid.weight())
    })
}

fn weighted_dissipation(
    grid: &PhaseGrid,
    f: [&[f64]; 2],
    spec: &WeightSpec,
    velocity_norm_sq: impl Fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<ShellBreakdown> {
    let mut out = ShellBreakdown::default();
    let weights = shell_weights(spec, &grid.v)?;
    let nv = grid.v.len();
    let dx = grid.x.cell_volume();
    for fs in f {
        let spectrum = grid.spectrum(fs)?;
        for (alpha, beta) in derivative_indices(grid.x.dim()) {
            let (a, b) = (order(&alpha), order(&beta));
            let d = spectrum.derivative(alpha, beta)?;
            let mut per_x = Vec::with_capacity(grid.x.len());
            for block in d.chunks_exact(nv) {
                per_x.push(velocity_norm_sq(&weights[a][b], block)?);
            }
            out.shells[a][b] += pairwise_sum(&per_x) * dx;
        }
    }
    out.total = out.shells.iter().flatten().sum();
    Ok(out)
}

/// `E_k = X_k + ||∇φ||²_{H³}` and `D_k = Y_k + ||∇φ||²_{H³}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Functionals {
    pub x_k: ShellBreakdown,
    pub y_k: Option<ShellBreakdown>,
    pub field_h3: f64,
}

impl Functionals {
    pub fn energy(&self) -> f64 {
        self.x_k.total + self.field_h3
    }

    /// `None` when no dissipation norm is available for the model.
    pub fn dissipation(&self) -> Option<f64> {
        self.y_k.map(|y| y.total + self.field_h3)
    }
}

/// `||∇φ||²_{H³}` of the state's potential.
pub fn field_h3(state: &SystemState) -> f64 {
    sobolev_gradient_norm_sq(&state.grid().x, state.phi(), 3)
}

pub fn functional_e_k(state: &SystemState, spec: &WeightSpec, ladder: &WeightLadder) -> Result<f64> {
    Ok(norm_x_k(state, spec, ladder)?.total + field_h3(state))
}

pub fn functional_d_k(state: &SystemState, spec: &WeightSpec) -> Result<f64> {
    Ok(norm_y_k(state, spec)?.total + field_h3(state))
}

/// Both functionals in one pass; `D_k` is skipped for Boltzmann.
pub fn functionals(state: &SystemState, spec: &WeightSpec, ladder: &WeightLadder) -> Result<Functionals> {
    let y_k = match spec.model {
        Model::Landau => Some(norm_y_k(state, spec)?),
        Model::Boltzmann => None,
    };
    Ok(Functionals {
        x_k: norm_x_k(state, spec, ladder)?,
        y_k,
        field_h3: field_h3(state),
    })
}

/// `(||Pf||²_k + ||(I-P)f||²_k) / ||f||²_k` with `L²_k = L²(⟨v⟩^k)`.
///
/// It is at least 1/2 for every `f`.
pub fn projection_split_ratio(background: &Background, f: [&[f64]; 2], k: f64) -> f64 {
    let grid = background.grid();
    let nv = grid.v.len();
    let weight: Vec<f64> = bracket_field(&grid.v).into_iter().map(|b| b.powf(2.0 * k)).collect();
    let p = project_p_fields(background, f[0], f[1]);
    let norm = |g: &dyn Fn(usize) -> f64| pairwise_sum_by(f[0].len(), |i| g(i).powi(2) * weight[i % nv]);
    let mut whole = 0.0;
    let mut split = 0.0;
    for s in 0..2 {
        let (fs, ps) = (f[s], &p[s]);
        whole += norm(&|i| fs[i]);
        split += norm(&|i| ps[i]) + norm(&|i| fs[i] - ps[i]);
    }
    if whole == 0.0 {
        return 1.0;
    }
    split / whole
}
