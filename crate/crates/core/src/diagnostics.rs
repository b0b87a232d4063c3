//! Per-step measurements and post-run analysis: conservation drift,
//! moment balance, projection sizes, positivity and decay fits.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{advance, StepReport, TimeStepConfig};
use crate::error::{Error, Result};
use crate::landau::CollisionOperator;
use crate::numerics::{pairwise_sum, pairwise_sum_by};
use crate::state::{
    check_conservation, conserved_quantities, project_p, project_pi_fields, ConservedQuantities,
    Species, SystemState,
};
use crate::weights::{self, WeightLadder, WeightSpec};

/// One row of the time series. Column order of the CSV is field order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub time: f64,
    pub mass_plus: f64,
    pub mass_minus: f64,
    pub momentum_x: f64,
    pub momentum_y: f64,
    pub momentum_z: f64,
    /// Kinetic plus field energy.
    pub energy: f64,
    /// Largest relative drift of any invariant since the first record.
    pub max_drift: f64,
    pub e_k: f64,
    pub d_k: f64,
    pub p_norm: f64,
    pub micro_norm: f64,
    pub min_density_plus: f64,
    pub min_density_minus: f64,
    /// `||∇φ||_{H³}`.
    pub grad_phi_h3: f64,
    pub balance_plus: f64,
    pub balance_minus: f64,
    pub picard_iterations: usize,
    pub max_contraction: f64,
    /// `||Q(μ, μ)|| / ||μ||` of the collision operator in use; 0 without one.
    pub eps_op: f64,
}

impl DiagnosticsRecord {
    pub fn is_finite(&self) -> bool {
        [
            self.time,
            self.mass_plus,
            self.mass_minus,
            self.momentum_x,
            self.momentum_y,
            self.momentum_z,
            self.energy,
            self.max_drift,
            self.e_k,
            self.d_k,
            self.p_norm,
            self.micro_norm,
            self.min_density_plus,
            self.min_density_minus,
            self.grad_phi_h3,
            self.balance_plus,
            self.balance_minus,
            self.max_contraction,
            self.eps_op,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Everything needed to turn states into records.
#[derive(Clone, Debug)]
pub struct Recorder {
    pub spec: WeightSpec,
    pub ladder: WeightLadder,
    pub eps_op: f64,
    reference: Option<SystemState>,
    previous: Option<SystemState>,
}

impl Recorder {
    pub fn new(spec: WeightSpec, ladder: WeightLadder, eps_op: f64) -> Self {
        Self {
            spec,
            ladder,
            eps_op,
            reference: None,
            previous: None,
        }
    }

    /// Measure `state`. The first call fixes the conservation reference;
    /// the balance residual uses the previously recorded state.
    pub fn record(&mut self, state: &SystemState, report: Option<&StepReport>) -> Result<DiagnosticsRecord> {
        let reference = self.reference.get_or_insert_with(|| state.clone());
        let drift = check_conservation(state, reference).max_relative_drift();
        let q: ConservedQuantities = conserved_quantities(state);
        let functionals = weights::functionals(state, &self.spec, &self.ladder)?;
        let d_k = match functionals.dissipation() {
            Some(d) => d,
            None => {
                let g = state.grid();
                weights::boltzmann_surrogate_y_k(g, [state.f_plus(), state.f_minus()], &self.spec)?.total
                    + functionals.field_h3
            }
        };
        let split = projection_decomposition(state);
        let positivity = positivity_monitor(state);
        let balance = match (&self.previous, report) {
            (Some(prev), Some(r)) if r.dt > 0.0 => moment_balance_residual(prev, state, r.dt)?,
            _ => [0.0; 2],
        };
        let collision = report.and_then(|r| r.collision.as_ref());
        let record = DiagnosticsRecord {
            step: report.map_or(0, |r| r.step),
            time: state.time(),
            mass_plus: q.mass[0],
            mass_minus: q.mass[1],
            momentum_x: q.momentum[0],
            momentum_y: q.momentum[1],
            momentum_z: q.momentum[2],
            energy: q.total_energy(),
            max_drift: drift,
            e_k: functionals.energy(),
            d_k,
            p_norm: split.p_norm,
            micro_norm: split.micro_norm,
            min_density_plus: positivity[0].min,
            min_density_minus: positivity[1].min,
            grad_phi_h3: functionals.field_h3.sqrt(),
            balance_plus: balance[0],
            balance_minus: balance[1],
            picard_iterations: collision.map_or(0, |c| c.picard_iterations),
            max_contraction: collision.and_then(|c| c.max_contraction()).unwrap_or(0.0),
            eps_op: self.eps_op,
        };
        self.previous = Some(state.clone());
        Ok(record)
    }
}

/// `||Pf||` and `||(I-P)f||` in `L²_{x,v}`, plus the cross term of the two
/// parts in `L²(μ^{-1})`, the inner product in which `P` is orthogonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSplit {
    pub p_norm: f64,
    pub micro_norm: f64,
    /// `⟨Pf, (I-P)f⟩_{L²(μ^{-1})}`.
    pub cross: f64,
    /// `||f||²_{L²(μ^{-1})}`.
    pub weighted_norm_sq: f64,
}

pub fn projection_decomposition(state: &SystemState) -> ProjectionSplit {
    let g = state.grid();
    let nv = g.v.len();
    let mu = state.background().mu();
    let p = project_p(state);
    let cell = g.cell_volume();
    let mut p_sq = 0.0;
    let mut micro_sq = 0.0;
    let mut cross = 0.0;
    let mut whole = 0.0;
    for s in Species::BOTH {
        let f = state.f(s);
        let pf = &p[s.index()];
        p_sq += pairwise_sum_by(f.len(), |i| pf[i] * pf[i]);
        micro_sq += pairwise_sum_by(f.len(), |i| (f[i] - pf[i]).powi(2));
        cross += pairwise_sum_by(f.len(), |i| pf[i] * (f[i] - pf[i]) / mu[i % nv]);
        whole += pairwise_sum_by(f.len(), |i| f[i] * f[i] / mu[i % nv]);
    }
    ProjectionSplit {
        p_norm: (p_sq * cell).sqrt(),
        micro_norm: (micro_sq * cell).sqrt(),
        cross: cross * cell,
        weighted_norm_sq: whole * cell,
    }
}

/// `L²ₓ` norm, per species, of `∂_t a± + ∇ₓ·∫ v f± dv` between two
/// consecutive states, with a centred time difference and the flux taken
/// at the midpoint.
pub fn moment_balance_residual(prev: &SystemState, next: &SystemState, dt: f64) -> Result<[f64; 2]> {
    if prev.grid() != next.grid() {
        return Err(Error::Parameter("balance residual needs states on the same grid".into()));
    }
    let g = next.grid();
    let nv = g.v.len();
    let nx = g.x.len();
    let w = g.v.weight();
    let vel = next.background().velocities();
    let mut out = [0.0; 2];
    for s in Species::BOTH {
        let (f0, f1) = (prev.f(s), next.f(s));
        let mut residual: Vec<f64> = (0..nx)
            .map(|ix| {
                let block = ix * nv..(ix + 1) * nv;
                (pairwise_sum(&f1[block.clone()]) - pairwise_sum(&f0[block])) * w / dt
            })
            .collect();
        for axis in 0..g.x.dim() {
            let flux: Vec<f64> = (0..nx)
                .map(|ix| {
                    let base = ix * nv;
                    0.5 * pairwise_sum_by(nv, |i| vel[i][axis] * (f0[base + i] + f1[base + i])) * w
                })
                .collect();
            let d = g.x.derivative(&flux, axis, 1)?;
            for (r, dv) in residual.iter_mut().zip(d) {
                *r += dv;
            }
        }
        let sq = pairwise_sum_by(nx, |i| residual[i] * residual[i]);
        out[s.index()] = (sq * g.x.cell_volume()).sqrt();
    }
    Ok(out)
}

/// Smallest value of `μ + f` for one species and where it occurs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub species: Species,
    pub min: f64,
    pub x: [f64; 3],
    pub v: [f64; 3],
    /// `min <= 0`.
    pub violated: bool,
}

pub fn positivity_monitor(state: &SystemState) -> [PositivityReport; 2] {
    let g = state.grid();
    let nv = g.v.len();
    let mu = state.background().mu();
    Species::BOTH.map(|s| {
        let (idx, min) = state
            .f(s)
            .iter()
            .enumerate()
            .map(|(i, f)| (i, mu[i % nv] + f))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        PositivityReport {
            species: s,
            min,
            x: g.x.coords(idx / nv),
            v: g.v.velocity(idx % nv),
            violated: min <= 0.0,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// `log E = c - λ t`; `rate` is `λ`.
    Exponential,
    /// `log E = c + m log(1 + t)`; `rate` is the slope `m`.
    Polynomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub mode: FitMode,
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: [f64; 2],
    pub samples: usize,
}

/// Least-squares samples required inside a fit window.
pub const MIN_FIT_SAMPLES: usize = 20;

/// Default share of the run dropped as initial transient.
pub const DEFAULT_TRANSIENT: f64 = 0.1;

/// Fit after dropping the first `transient` fraction of the time span.
pub fn fit_decay(times: &[f64], values: &[f64], mode: FitMode, transient: f64) -> Result<DecayFit> {
    if times.is_empty() || times.len() != values.len() {
        return Err(Error::Fit(format!(
            "need matching non-empty series (got {} times, {} values)",
            times.len(),
            values.len()
        )));
    }
    if !(0.0..1.0).contains(&transient) {
        return Err(Error::Fit(format!("transient fraction {transient} outside [0, 1)")));
    }
    let t0 = times[0];
    let t1 = times[times.len() - 1];
    fit_decay_window(times, values, mode, t0 + transient * (t1 - t0), t1)
}

/// Fit over the samples with `t_min <= t <= t_max`.
pub fn fit_decay_window(times: &[f64], values: &[f64], mode: FitMode, t_min: f64, t_max: f64) -> Result<DecayFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &e) in times.iter().zip(values) {
        if t < t_min - 1e-12 || t > t_max + 1e-12 {
            continue;
        }
        if !(e > 0.0) {
            return Err(Error::Fit(format!("non-positive value {e} at t = {t}")));
        }
        xs.push(match mode {
            FitMode::Exponential => t,
            FitMode::Polynomial => (1.0 + t).ln(),
        });
        ys.push(e.ln());
    }
    if xs.len() < MIN_FIT_SAMPLES {
        return Err(Error::Fit(format!(
            "{} samples in [{t_min}, {t_max}], need at least {MIN_FIT_SAMPLES}",
            xs.len()
        )));
    }
    let (slope, intercept, r_squared) = linear_regression(&xs, &ys);
    Ok(DecayFit {
        mode,
        rate: match mode {
            FitMode::Exponential => -slope,
            FitMode::Polynomial => slope,
        },
        intercept,
        r_squared,
        window: [t_min, t_max],
        samples: xs.len(),
    })
}

/// `(slope, intercept, R²)` of the ordinary least-squares line.
fn linear_regression(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = pairwise_sum(xs) / n;
    let my = pairwise_sum(ys) / n;
    let sxx = pairwise_sum_by(xs.len(), |i| (xs[i] - mx).powi(2));
    let sxy = pairwise_sum_by(xs.len(), |i| (xs[i] - mx) * (ys[i] - my));
    let syy = pairwise_sum_by(xs.len(), |i| (ys[i] - my).powi(2));
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res = pairwise_sum_by(xs.len(), |i| (ys[i] - intercept - slope * xs[i]).powi(2));
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    (slope, intercept, r_squared)
}

/// Whether `values` never increase (beyond a relative `slack`) after `t_min`.
pub fn monotone_after(times: &[f64], values: &[f64], t_min: f64, slack: f64) -> bool {
    let tail: Vec<f64> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= t_min)
        .map(|(_, v)| *v)
        .collect();
    tail.windows(2).all(|w| w[1] <= w[0] * (1.0 + slack))
}

/// Output of [`linearized_decay_experiment`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearizedDecay {
    pub records: Vec<DiagnosticsRecord>,
    /// Fits of `E_k` after the transient; `None` when the series is zero.
    pub exponential: Option<DecayFit>,
    pub polynomial: Option<DecayFit>,
}

/// Remove `Πf` so the initial data carries no global invariants.
pub fn remove_global_moments(state: &SystemState) -> Result<SystemState> {
    let pi = project_pi_fields(state.background(), state.f_plus(), state.f_minus());
    let plus = state.f_plus().iter().zip(&pi[0]).map(|(f, p)| f - p).collect();
    let minus = state.f_minus().iter().zip(&pi[1]).map(|(f, p)| f - p).collect();
    SystemState::new(Arc::clone(state.background()), plus, minus, state.time())
}

/// Evolve the linearized system from `initial` with `Πf₀` removed,
/// recording every `record_every` steps and fitting the decay of `E_k`.
pub fn linearized_decay_experiment(
    initial: &SystemState,
    t_final: f64,
    config: &TimeStepConfig,
    op: &CollisionOperator,
    recorder: &mut Recorder,
    record_every: usize,
    transient: f64,
) -> Result<LinearizedDecay> {
    let mut state = remove_global_moments(initial)?;
    let mut config = config.clone();
    config.linearized = true;
    let mut records = vec![recorder.record(&state, None)?];
    let every = record_every.max(1);
    advance(&mut state, t_final, &config, Some(op), |s, report| {
        if report.step % every == 0 {
            records.push(recorder.record(s, Some(report))?);
        }
        Ok(())
    })?;
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let energy: Vec<f64> = records.iter().map(|r| r.e_k).collect();
    let (exponential, polynomial) = if energy.iter().all(|&e| e == 0.0) {
        (None, None)
    } else {
        (
            Some(fit_decay(&times, &energy, FitMode::Exponential, transient)?),
            Some(fit_decay(&times, &energy, FitMode::Polynomial, transient)?),
        )
    };
    Ok(LinearizedDecay {
        records,
        exponential,
        polynomial,
    })
}

/// Write records as CSV with a header row.
pub fn write_csv(records: &[DiagnosticsRecord], out: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for r in records {
        writer.serialize(r).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv(input: impl Read) -> Result<Vec<DiagnosticsRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exact_models_fit_exactly() {
        let times: Vec<f64> = (0..200).map(|i| i as f64 * 0.05).collect();
        let exp: Vec<f64> = times.iter().map(|t| (-2.0 * t).exp()).collect();
        let fit = fit_decay(&times, &exp, FitMode::Exponential, 0.1).unwrap();
        assert_abs_diff_eq!(fit.rate, 2.0, epsilon = 1e-6);
        assert!(fit.r_squared > 1.0 - 1e-12);
        let poly: Vec<f64> = times.iter().map(|t| (1.0 + t).powi(-3)).collect();
        let fit = fit_decay(&times, &poly, FitMode::Polynomial, 0.1).unwrap();
        assert_abs_diff_eq!(fit.rate, -3.0, epsilon = 1e-6);
    }

    #[test]
    fn oscillating_envelope() {
        let times: Vec<f64> = (0..=400).map(|i| i as f64 * 0.05).collect();
        let e: Vec<f64> = times.iter().map(|t| (-t).exp() * (2.0 + t.cos())).collect();
        let fit = fit_decay_window(&times, &e, FitMode::Exponential, 2.0, 20.0).unwrap();
        assert!((0.9..=1.1).contains(&fit.rate), "{fit:?}");
        assert!(fit.r_squared >= 0.99, "{fit:?}");
    }

    #[test]
    fn fit_rejects_bad_input() {
        let times: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let mut e: Vec<f64> = times.iter().map(|t| (-t).exp()).collect();
        assert!(fit_decay(&times[..10], &e[..10], FitMode::Exponential, 0.0).is_err());
        e[20] = 0.0;
        assert!(matches!(
            fit_decay(&times, &e, FitMode::Exponential, 0.0),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            DiagnosticsRecord {
                step: 1,
                time: 0.5,
                e_k: 3.25,
                ..Default::default()
            },
            DiagnosticsRecord::default(),
        ];
        let mut buf = Vec::new();
        write_csv(&records, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("step,time,mass_plus"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), records);
    }
}
