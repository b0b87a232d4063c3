//! Run configuration: TOML with flat sections, defaults for every key,
//! `section.key=value` overrides and validation that reports every
//! violation at once.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Scheme, TimeStepConfig};
use crate::error::{Error, Result};
use crate::grid::{PhaseGrid, DEFAULT_CUTOFF};
use crate::weights::{Model, WeightLadder, WeightSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Nonlinear,
    Linearized,
    OperatorTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Which weight family the norms use. The dynamics is always Landau.
    pub weights: Model,
    pub gamma: f64,
    /// Boltzmann weights only.
    pub s: f64,
    pub k: f64,
    /// Weight transfer `l` of the soft-potential rate `(1+t)^{-2l/|γ|}`.
    pub l: f64,
    pub ladder_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            weights: Model::Landau,
            gamma: -3.0,
            s: 0.75,
            k: 10.0,
            l: 1.0,
            ladder_ratio: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim_x: usize,
    pub n_x: usize,
    pub n_v: usize,
    /// Half-width `L` of the velocity box.
    pub cutoff: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dim_x: 1,
            n_x: 16,
            n_v: 16,
            cutoff: DEFAULT_CUTOFF,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    SingleMode,
    TwoMode,
    RandomBandlimited,
}

/// Velocity profile multiplying the spatial modes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// `μ`: a density perturbation.
    #[default]
    Density,
    /// `v₁ μ`.
    Drift,
    /// `(|v|² - 3) μ`.
    Temperature,
    /// `(v₁² - v₂²) μ`, orthogonal to the collision invariants.
    Shear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub family: Family,
    pub amplitude: f64,
    /// Spatial wave vectors; the first one (two for `two_mode`) is used.
    pub modes: Vec<[i64; 3]>,
    pub profile: Profile,
    /// Multipliers of the profile for `[f₊, f₋]`.
    pub species_signs: [f64; 2],
    /// Largest spatial mode (per axis) for `random_bandlimited`.
    pub max_mode: i64,
    /// Largest velocity polynomial degree for `random_bandlimited`.
    pub max_degree: usize,
    pub seed: u64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            family: Family::SingleMode,
            amplitude: 1e-3,
            modes: vec![[1, 0, 0], [2, 0, 0]],
            profile: Profile::Density,
            species_signs: [1.0, -1.0],
            max_mode: 2,
            max_degree: 4,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: RunMode,
    pub t_final: f64,
    /// Record diagnostics every this many steps.
    pub record_every: usize,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Resume from this checkpoint instead of building initial data.
    pub restart: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: RunMode::Nonlinear,
            t_final: 1.0,
            record_every: 1,
            checkpoint_every: 0,
            restart: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub csv: String,
    pub summary: String,
    pub checkpoint_prefix: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("vpl-out"),
            csv: "diagnostics.csv".into(),
            summary: "summary.json".into(),
            checkpoint_prefix: "checkpoint".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Share of the run excluded from decay fits.
    pub transient: f64,
    /// Explicit fit window; overrides `transient`.
    pub fit_window: Option<[f64; 2]>,
    /// Largest relative drift of any invariant before the run is marked failed.
    pub drift_tolerance: f64,
    /// Random pairs for the FFT-versus-direct operator check.
    pub operator_pairs: usize,
    /// Velocity samples for the weight inequality suite.
    pub weight_samples: usize,
    /// Random states for the projection checks.
    pub projection_samples: usize,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            transient: 0.1,
            fit_window: None,
            drift_tolerance: 1e-8,
            operator_pairs: 5,
            weight_samples: 1000,
            projection_samples: 20,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub time: TimeStepConfig,
    pub initial: InitialConfig,
    pub output: OutputConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    /// Parse and validate TOML text.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parse TOML text after applying `section.key=value` overrides.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        apply_overrides(&mut table, overrides)?;
        let config: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let problems = config.violations();
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every constraint the config breaks.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let m = &self.model;
        match m.weights {
            Model::Landau => {
                if !(-3.0..=1.0).contains(&m.gamma) {
                    out.push(format!("gamma = {} outside [-3, 1] for Landau", m.gamma));
                }
                if !(m.k >= 10.0) {
                    out.push(format!("k = {} below k0=10 for Landau", m.k));
                }
            }
            Model::Boltzmann => {
                if !(m.gamma > -3.0 && m.gamma <= 1.0) {
                    out.push(format!("gamma = {} outside (-3, 1] for Boltzmann", m.gamma));
                }
                if !(0.5..1.0).contains(&m.s) {
                    out.push(format!("s = {} outside [1/2, 1) for Boltzmann", m.s));
                }
                if !(m.gamma + 2.0 * m.s > -1.0) {
                    out.push(format!("gamma + 2s = {} must exceed -1 for Boltzmann", m.gamma + 2.0 * m.s));
                }
                if !(m.k >= 17.0) {
                    out.push(format!("k = {} below k0=17 for Boltzmann", m.k));
                }
            }
        }
        if !(m.l >= 0.0 && m.l <= m.k) {
            out.push(format!("l = {} must lie in [0, k]", m.l));
        }
        if !(m.ladder_ratio > 1.0) {
            out.push(format!("ladder_ratio = {} must exceed 1", m.ladder_ratio));
        }
        if let Err(e) = PhaseGrid::build(self.grid.dim_x, self.grid.n_x, self.grid.n_v, self.grid.cutoff) {
            out.push(format!("grid: {e}"));
        }
        if !(self.run.t_final > 0.0 && self.run.t_final.is_finite()) {
            out.push(format!("t_final = {} must be positive", self.run.t_final));
        }
        if self.run.record_every == 0 {
            out.push("record_every must be at least 1".into());
        }
        out.extend(self.time.validate().into_iter().map(|p| format!("time: {p}")));
        if self.run.mode == RunMode::Linearized && self.time.scheme == Scheme::PicardImplicit {
            out.push("linearized mode needs scheme strang_rk4 or strang_rkc".into());
        }
        let ic = &self.initial;
        if !(ic.amplitude >= 0.0 && ic.amplitude.is_finite()) {
            out.push(format!("initial amplitude = {} must be >= 0", ic.amplitude));
        }
        let needed = if ic.family == Family::TwoMode { 2 } else { 1 };
        if ic.family != Family::RandomBandlimited && ic.modes.len() < needed {
            out.push(format!("initial family {:?} needs {needed} mode(s)", ic.family));
        }
        for mode in &ic.modes {
            if mode.iter().skip(self.grid.dim_x).any(|&c| c != 0) {
                out.push(format!("mode {mode:?} has components beyond dim_x = {}", self.grid.dim_x));
            }
        }
        if ic.max_degree > 6 {
            out.push(format!("max_degree = {} exceeds 6", ic.max_degree));
        }
        let a = &self.analysis;
        if !(0.0..1.0).contains(&a.transient) {
            out.push(format!("transient = {} outside [0, 1)", a.transient));
        }
        if let Some([t0, t1]) = a.fit_window {
            if !(t0 < t1) {
                out.push(format!("fit_window [{t0}, {t1}] is empty"));
            }
        }
        out
    }

    pub fn weight_spec(&self) -> Result<WeightSpec> {
        match self.model.weights {
            Model::Landau => WeightSpec::landau(self.model.gamma, self.model.k),
            Model::Boltzmann => WeightSpec::boltzmann(self.model.gamma, self.model.s, self.model.k),
        }
    }

    pub fn ladder(&self) -> Result<WeightLadder> {
        WeightLadder::new(self.model.ladder_ratio)
    }

    pub fn phase_grid(&self) -> Result<PhaseGrid> {
        PhaseGrid::build(self.grid.dim_x, self.grid.n_x, self.grid.n_v, self.grid.cutoff)
    }
}

/// Set `section.key` to a TOML value; bare strings are accepted.
fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    let mut problems = Vec::new();
    for item in overrides {
        let Some((path, raw)) = item.split_once('=') else {
            problems.push(format!("override `{item}` is not of the form section.key=value"));
            continue;
        };
        let parts: Vec<&str> = path.trim().split('.').collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
            problems.push(format!("override key `{path}` is not of the form section.key"));
            continue;
        }
        let value = parse_value(raw.trim());
        let section = table
            .entry(parts[0].to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        match section.as_table_mut() {
            Some(t) => {
                t.insert(parts[1].to_string(), value);
            }
            None => problems.push(format!("`{}` is not a section", parts[0])),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::parse("[model]\ngamma = -3.0\nk = 10.0\n[grid]\nn_v = 16\n").unwrap();
        assert_eq!(c.grid.n_x, 16);
        assert_eq!(c.time.scheme, Scheme::StrangRk4);
        let echoed = RunConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(echoed, c);
    }

    #[test]
    fn range_violations_are_all_reported() {
        let Err(Error::Config(p)) = RunConfig::parse("[model]\ngamma = 2.0\nk = 5.0\n") else {
            panic!("expected config error");
        };
        assert!(p.iter().any(|m| m.contains("outside [-3, 1]")));
        assert!(p.iter().any(|m| m.contains("below k0=10")));

        let text = "[model]\nweights = \"boltzmann\"\ngamma = -2.0\ns = 0.4\nk = 20.0\n";
        let Err(Error::Config(p)) = RunConfig::parse(text) else {
            panic!("expected config error");
        };
        assert!(p.iter().any(|m| m.contains("s = 0.4")));
        assert!(p.iter().any(|m| m.contains("gamma + 2s")));
    }

    #[test]
    fn overrides_take_precedence() {
        let c = RunConfig::parse_with_overrides(
            "[time]\ndt = 0.1\n",
            &["time.dt=0.02".into(), "time.scheme=strang_rkc".into(), "run.mode=linearized".into()],
        )
        .unwrap();
        assert_eq!(c.time.dt, 0.02);
        assert_eq!(c.time.scheme, Scheme::StrangRkc);
        assert_eq!(c.run.mode, RunMode::Linearized);
        assert!(RunConfig::parse_with_overrides("", &["dt=1".into()]).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[grid]\nnv = 16\n").is_err());
    }
}
