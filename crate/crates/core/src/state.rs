//! Two-species perturbation state, the Maxwellian reference and the
//! macroscopic moment / projection machinery.
//!
//! The perturbation `f± = F± - μ` is stored in real space on the phase
//! grid. The macroscopic projection is
//!
//! ```text
//! P± f = (a± + v·b + (|v|² - 3) c) μ
//! a± = ∫ f± dv,  b_j = ½ ∫ v_j (f₊ + f₋) dv,  c = ∫ (|v|² - 3)/12 (f₊ + f₋) dv
//! ```
//!
//! and `Π` is the same projection built from the spatial averages of
//! `a±, b, c`. All moments are discrete quadratures against the exact
//! monomials, so idempotence holds only up to the truncation tolerance
//! of the velocity box.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, PhaseGrid, VelocityGrid};
use crate::numerics::pairwise_sum_by;
use crate::poisson::{field_energy, solve_potential};

/// `(2π)^{-3/2}`.
pub const MAXWELLIAN_PEAK: f64 = 0.063_493_635_934_240_97;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Species {
    Plus,
    Minus,
}

impl Species {
    pub const BOTH: [Species; 2] = [Species::Plus, Species::Minus];

    /// `+1` for the positive species, `-1` for the negative one.
    pub fn sign(self) -> f64 {
        match self {
            Species::Plus => 1.0,
            Species::Minus => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Species::Plus => 0,
            Species::Minus => 1,
        }
    }
}

/// `μ(v) = (2π)^{-3/2} e^{-|v|²/2}` sampled on the velocity nodes.
pub fn maxwellian(grid: &VelocityGrid) -> Vec<f64> {
    (0..grid.len())
        .map(|iv| {
            let v = grid.velocity(iv);
            MAXWELLIAN_PEAK * (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) / 2.0).exp()
        })
        .collect()
}

/// Grid plus the velocity-space tables every operator needs.
#[derive(Debug)]
pub struct Background {
    grid: PhaseGrid,
    mu: Vec<f64>,
    velocities: Vec<[f64; 3]>,
    speed_sq: Vec<f64>,
}

impl Background {
    pub fn new(grid: PhaseGrid) -> Arc<Self> {
        let mu = maxwellian(&grid.v);
        let velocities = grid.v.velocities();
        let speed_sq = velocities.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).collect();
        Arc::new(Self {
            grid,
            mu,
            velocities,
            speed_sq,
        })
    }

    pub fn grid(&self) -> &PhaseGrid {
        &self.grid
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn velocities(&self) -> &[[f64; 3]] {
        &self.velocities
    }

    pub fn speed_sq(&self) -> &[f64] {
        &self.speed_sq
    }

    /// Scales used to turn conservation drifts into relative drifts: the
    /// magnitude of each invariant for the full distribution `F = μ + f`
    /// at equilibrium (`|T|∫μ`, `2|T|∫|v|μ`, `2|T|∫|v|²μ`).
    pub fn invariant_scales(&self) -> InvariantScales {
        let vol = self.grid.x.volume();
        let w = self.grid.v.weight();
        let n = self.mu.len();
        let mass = vol * pairwise_sum_by(n, |i| self.mu[i]) * w;
        let momentum = 2.0 * vol * pairwise_sum_by(n, |i| self.speed_sq[i].sqrt() * self.mu[i]) * w;
        let energy = 2.0 * vol * pairwise_sum_by(n, |i| self.speed_sq[i] * self.mu[i]) * w;
        InvariantScales { mass, momentum, energy }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantScales {
    pub mass: f64,
    pub momentum: f64,
    pub energy: f64,
}

/// One species perturbation on the phase grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeciesField {
    pub label: Species,
    pub values: Vec<f64>,
}

/// Where the potential of a state came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialSource {
    /// Solved from the current densities (consistent state).
    Poisson,
    /// Imposed from outside and held fixed under mutation.
    External,
}

/// Both species, the electrostatic potential and the time stamp.
#[derive(Clone, Debug)]
pub struct SystemState {
    background: Arc<Background>,
    species: [SpeciesField; 2],
    phi: Vec<f64>,
    field: Vec<Vec<f64>>,
    time: f64,
    source: PotentialSource,
    mean_warning: bool,
}

impl SystemState {
    /// Consistent state: `φ` is solved from the densities.
    pub fn new(background: Arc<Background>, f_plus: Vec<f64>, f_minus: Vec<f64>, time: f64) -> Result<Self> {
        let n = background.grid().len();
        for f in [&f_plus, &f_minus] {
            if f.len() != n {
                return Err(Error::GridMismatch {
                    expected: n,
                    found: f.len(),
                });
            }
        }
        let mut state = Self {
            background,
            species: [
                SpeciesField {
                    label: Species::Plus,
                    values: f_plus,
                },
                SpeciesField {
                    label: Species::Minus,
                    values: f_minus,
                },
            ],
            phi: Vec::new(),
            field: Vec::new(),
            time,
            source: PotentialSource::Poisson,
            mean_warning: false,
        };
        state.refresh_potential()?;
        Ok(state)
    }

    pub fn zeros(background: Arc<Background>) -> Self {
        let n = background.grid().len();
        Self::new(background, vec![0.0; n], vec![0.0; n], 0.0).expect("zero state is valid")
    }

    /// State with an imposed potential that is not refreshed on mutation.
    pub fn with_external_potential(
        background: Arc<Background>,
        f_plus: Vec<f64>,
        f_minus: Vec<f64>,
        phi: Vec<f64>,
        time: f64,
    ) -> Result<Self> {
        let mut state = Self::new(background, f_plus, f_minus, time)?;
        let x = &state.background.grid().x;
        if phi.len() != x.len() {
            return Err(Error::GridMismatch {
                expected: x.len(),
                found: phi.len(),
            });
        }
        state.field = external_field(x, &phi)?;
        state.phi = phi;
        state.source = PotentialSource::External;
        state.mean_warning = false;
        Ok(state)
    }

    fn refresh_potential(&mut self) -> Result<()> {
        if self.source == PotentialSource::External {
            return Ok(());
        }
        let rho = self.charge_density();
        let sol = solve_potential(&self.background.grid().x, &rho)?;
        self.phi = sol.phi;
        self.field = sol.field;
        self.mean_warning = sol.mean_warning;
        Ok(())
    }

    pub fn background(&self) -> &Arc<Background> {
        &self.background
    }

    pub fn grid(&self) -> &PhaseGrid {
        self.background.grid()
    }

    pub fn species(&self, s: Species) -> &SpeciesField {
        &self.species[s.index()]
    }

    pub fn f(&self, s: Species) -> &[f64] {
        &self.species[s.index()].values
    }

    pub fn f_plus(&self) -> &[f64] {
        self.f(Species::Plus)
    }

    pub fn f_minus(&self) -> &[f64] {
        self.f(Species::Minus)
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    /// `E = -∇ₓφ`, one component per spatial axis.
    pub fn electric_field(&self) -> &[Vec<f64>] {
        &self.field
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn set_time(&mut self, time: f64) {
        self.time = time;
    }

    pub fn potential_source(&self) -> PotentialSource {
        self.source
    }

    /// True when `φ` was solved from the current densities.
    pub fn is_consistent(&self) -> bool {
        self.source == PotentialSource::Poisson
    }

    /// Whether the last Poisson solve had to project out a nonzero mean.
    pub fn mean_warning(&self) -> bool {
        self.mean_warning
    }

    /// Mutate both species; `φ` is refreshed afterwards unless external.
    pub fn update<R>(&mut self, mutate: impl FnOnce(&mut Vec<f64>, &mut Vec<f64>) -> R) -> Result<R> {
        let [plus, minus] = &mut self.species;
        let out = mutate(&mut plus.values, &mut minus.values);
        let n = self.background.grid().len();
        for s in &self.species {
            if s.values.len() != n {
                return Err(Error::GridMismatch {
                    expected: n,
                    found: s.values.len(),
                });
            }
        }
        self.refresh_potential()?;
        Ok(out)
    }

    /// Replace both species; `φ` is refreshed unless external.
    pub fn set_species(&mut self, f_plus: Vec<f64>, f_minus: Vec<f64>) -> Result<()> {
        self.update(|p, m| {
            *p = f_plus;
            *m = f_minus;
        })
    }

    /// Consume the state, returning `[f₊, f₋]`.
    pub fn into_species(self) -> [Vec<f64>; 2] {
        let [p, m] = self.species;
        [p.values, m.values]
    }

    /// `ρ = ∫(f₊ - f₋) dv`.
    pub fn charge_density(&self) -> Vec<f64> {
        let g = self.grid();
        let plus = g.integrate_v(self.f_plus());
        let minus = g.integrate_v(self.f_minus());
        plus.iter().zip(&minus).map(|(p, m)| p - m).collect()
    }
}

fn external_field(x: &crate::grid::SpatialGrid, phi: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..x.dim())
        .map(|axis| Ok(x.derivative(phi, axis, 1)?.into_iter().map(|d| -d).collect()))
        .collect()
}

/// Macroscopic moments `a±, b, c` as spatial fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroMoments {
    pub a_plus: Vec<f64>,
    pub a_minus: Vec<f64>,
    pub b: [Vec<f64>; 3],
    pub c: Vec<f64>,
}

impl MacroMoments {
    /// Spatial averages of every moment, as single-node moments.
    pub fn spatial_average(&self) -> [f64; 6] {
        let mean = |f: &Vec<f64>| crate::numerics::pairwise_sum(f) / f.len() as f64;
        [
            mean(&self.a_plus),
            mean(&self.a_minus),
            mean(&self.b[0]),
            mean(&self.b[1]),
            mean(&self.b[2]),
            mean(&self.c),
        ]
    }
}

/// Moments of a pair of perturbations.
pub fn moments_of(background: &Background, f_plus: &[f64], f_minus: &[f64]) -> MacroMoments {
    let g = background.grid();
    let nv = g.v.len();
    let nx = g.x.len();
    let w = g.v.weight();
    let vel = background.velocities();
    let v2 = background.speed_sq();
    let mut m = MacroMoments {
        a_plus: vec![0.0; nx],
        a_minus: vec![0.0; nx],
        b: std::array::from_fn(|_| vec![0.0; nx]),
        c: vec![0.0; nx],
    };
    for ix in 0..nx {
        let fp = &f_plus[ix * nv..(ix + 1) * nv];
        let fm = &f_minus[ix * nv..(ix + 1) * nv];
        m.a_plus[ix] = pairwise_sum_by(nv, |i| fp[i]) * w;
        m.a_minus[ix] = pairwise_sum_by(nv, |i| fm[i]) * w;
        for j in 0..3 {
            m.b[j][ix] = 0.5 * pairwise_sum_by(nv, |i| vel[i][j] * (fp[i] + fm[i])) * w;
        }
        m.c[ix] = pairwise_sum_by(nv, |i| (v2[i] - 3.0) / 12.0 * (fp[i] + fm[i])) * w;
    }
    m
}

/// `a±, b, c` of the state.
pub fn extract_moments(state: &SystemState) -> MacroMoments {
    moments_of(state.background(), state.f_plus(), state.f_minus())
}

/// Rebuild `(a± + v·b + (|v|² - 3)c) μ` from moment fields.
pub fn reconstruct(background: &Background, m: &MacroMoments) -> [Vec<f64>; 2] {
    let g = background.grid();
    let nv = g.v.len();
    let nx = g.x.len();
    let mu = background.mu();
    let vel = background.velocities();
    let v2 = background.speed_sq();
    let mut plus = vec![0.0; nx * nv];
    let mut minus = vec![0.0; nx * nv];
    for ix in 0..nx {
        for iv in 0..nv {
            let v = vel[iv];
            let shared = v[0] * m.b[0][ix] + v[1] * m.b[1][ix] + v[2] * m.b[2][ix] + (v2[iv] - 3.0) * m.c[ix];
            plus[ix * nv + iv] = (m.a_plus[ix] + shared) * mu[iv];
            minus[ix * nv + iv] = (m.a_minus[ix] + shared) * mu[iv];
        }
    }
    [plus, minus]
}

/// `P f` for raw species arrays.
pub fn project_p_fields(background: &Background, f_plus: &[f64], f_minus: &[f64]) -> [Vec<f64>; 2] {
    reconstruct(background, &moments_of(background, f_plus, f_minus))
}

/// `Π f` for raw species arrays: `P` built from spatially averaged moments.
pub fn project_pi_fields(background: &Background, f_plus: &[f64], f_minus: &[f64]) -> [Vec<f64>; 2] {
    let m = moments_of(background, f_plus, f_minus);
    let avg = m.spatial_average();
    let nx = background.grid().x.len();
    let averaged = MacroMoments {
        a_plus: vec![avg[0]; nx],
        a_minus: vec![avg[1]; nx],
        b: [vec![avg[2]; nx], vec![avg[3]; nx], vec![avg[4]; nx]],
        c: vec![avg[5]; nx],
    };
    reconstruct(background, &averaged)
}

/// Macroscopic projection `P f` of the state.
pub fn project_p(state: &SystemState) -> [Vec<f64>; 2] {
    project_p_fields(state.background(), state.f_plus(), state.f_minus())
}

/// Global projection `Π f` of the state.
pub fn project_pi(state: &SystemState) -> [Vec<f64>; 2] {
    project_pi_fields(state.background(), state.f_plus(), state.f_minus())
}

/// The invariants of the perturbation system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservedQuantities {
    /// `∫∫ f± dv dx`.
    pub mass: [f64; 2],
    /// `∫∫ v (f₊ + f₋) dv dx`.
    pub momentum: [f64; 3],
    /// `∫∫ |v|² (f₊ + f₋) dv dx`.
    pub kinetic_energy: f64,
    /// `∫ |∇φ|² dx`.
    pub field_energy: f64,
}

impl ConservedQuantities {
    pub fn total_energy(&self) -> f64 {
        self.kinetic_energy + self.field_energy
    }
}

pub fn conserved_quantities(state: &SystemState) -> ConservedQuantities {
    let g = state.grid();
    let vol = g.x.cell_volume();
    let m = extract_moments(state);
    let sum = |f: &[f64]| crate::numerics::pairwise_sum(f) * vol;
    // ∫|v|² f = 12 c + 3 (a₊ + a₋) summed over species
    let nx = g.x.len();
    let kinetic: Vec<f64> = (0..nx).map(|i| 12.0 * m.c[i] + 3.0 * (m.a_plus[i] + m.a_minus[i])).collect();
    ConservedQuantities {
        mass: [sum(&m.a_plus), sum(&m.a_minus)],
        momentum: std::array::from_fn(|j| 2.0 * sum(&m.b[j])),
        kinetic_energy: sum(&kinetic),
        field_energy: field_energy(&g.x, state.phi()),
    }
}

/// Absolute and relative drift of every invariant against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub current: ConservedQuantities,
    pub reference: ConservedQuantities,
    pub mass_drift: [f64; 2],
    pub momentum_drift: [f64; 3],
    pub energy_drift: f64,
    /// Drifts divided by the equilibrium magnitude of each invariant for
    /// the full distribution (see [`Background::invariant_scales`]).
    pub relative_mass_drift: [f64; 2],
    pub relative_momentum_drift: f64,
    pub relative_energy_drift: f64,
    pub scales: InvariantScales,
}

impl ConservationReport {
    /// Largest relative drift over all invariants.
    pub fn max_relative_drift(&self) -> f64 {
        self.relative_mass_drift
            .iter()
            .copied()
            .chain([self.relative_momentum_drift, self.relative_energy_drift])
            .fold(0.0, f64::max)
    }
}

pub fn check_conservation(state: &SystemState, reference: &SystemState) -> ConservationReport {
    let current = conserved_quantities(state);
    let reference = conserved_quantities(reference);
    let scales = state.background().invariant_scales();
    let mass_drift = [current.mass[0] - reference.mass[0], current.mass[1] - reference.mass[1]];
    let momentum_drift: [f64; 3] = std::array::from_fn(|j| current.momentum[j] - reference.momentum[j]);
    let energy_drift = current.total_energy() - reference.total_energy();
    let momentum_norm = momentum_drift.iter().map(|d| d * d).sum::<f64>().sqrt();
    ConservationReport {
        current,
        reference,
        mass_drift,
        momentum_drift,
        energy_drift,
        relative_mass_drift: [mass_drift[0].abs() / scales.mass, mass_drift[1].abs() / scales.mass],
        relative_momentum_drift: momentum_norm / scales.momentum,
        relative_energy_drift: energy_drift.abs() / scales.energy,
        scales,
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VPLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    grid: GridSpec,
    potential_source: PotentialSource,
    arrays: Vec<(String, usize)>,
    encoding: String,
}

/// Write a self-describing checkpoint.
///
/// Layout: 8-byte magic, `u32` format version, `u32` header length, a JSON
/// header naming the grid and the arrays, then the time stamp and every
/// array as little-endian `f64` in header order. Values are stored in real
/// space so a round trip is bit-exact.
pub fn write_checkpoint(state: &SystemState, mut out: impl Write) -> Result<()> {
    let n = state.grid().len();
    let nx = state.grid().x.len();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        grid: state.grid().spec(),
        potential_source: state.potential_source(),
        arrays: vec![("f_plus".into(), n), ("f_minus".into(), n), ("phi".into(), nx)],
        encoding: "f64-le".into(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&state.time().to_le_bytes())?;
    for array in [state.f_plus(), state.f_minus(), state.phi()] {
        let mut bytes = Vec::with_capacity(array.len() * 8);
        for v in array {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

/// Read a checkpoint written by [`write_checkpoint`].
///
/// When `background` is given its grid must match the stored one; otherwise
/// a fresh background is built from the header.
pub fn read_checkpoint(mut input: impl Read, background: Option<Arc<Background>>) -> Result<SystemState> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    input.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let background = match background {
        Some(bg) => {
            if bg.grid().spec() != header.grid {
                return Err(Error::Checkpoint("grid in file does not match the supplied grid".into()));
            }
            bg
        }
        None => Background::new(header.grid.build()?),
    };
    let mut eight = [0u8; 8];
    input.read_exact(&mut eight)?;
    let time = f64::from_le_bytes(eight);
    let mut arrays = Vec::new();
    for (name, len) in &header.arrays {
        let mut bytes = vec![0u8; len * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated array {name}: {e}")))?;
        arrays.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<f64>>(),
        );
    }
    if arrays.len() != 3 {
        return Err(Error::Checkpoint(format!("expected 3 arrays, found {}", arrays.len())));
    }
    let phi = arrays.pop().expect("phi");
    let f_minus = arrays.pop().expect("f_minus");
    let f_plus = arrays.pop().expect("f_plus");
    match header.potential_source {
        PotentialSource::External => SystemState::with_external_potential(background, f_plus, f_minus, phi, time),
        PotentialSource::Poisson => {
            let mut state = SystemState::new(background, f_plus, f_minus, time)?;
            // keep the stored bits; a re-solve yields the same values
            state.phi = phi;
            Ok(state)
        }
    }
}
