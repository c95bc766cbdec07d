//! Run configuration read from TOML.
//!
//! Rates and frequencies are in units of `Γ`, times in `1/Γ`, momenta in
//! `ħk_a` and positions in `λ_c`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cavlase_core::spectrum::Window;
use cavlase_core::SpectrumOptions;
use cavlase_core::sweep::{AxisName, MomentumSampler, ScanAxis, ScanGrid};
use cavlase_core::{EvolveOptions, SystemParams};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for all sampled initial momenta.
    pub seed: u64,
    /// Output root; each run writes into `<output>/<mode>`.
    pub output: PathBuf,
    pub system: SystemParams,
    pub evolve: EvolveOptions,
    pub sampler: SamplerConfig,
    pub trajectory: TrajectoryConfig,
    pub spectrum: SpectrumConfig,
    pub scan: ScanConfig,
    pub stability: ScanConfig,
    pub comparison: ComparisonConfig,
    pub steady: SteadyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: PathBuf::from("output"),
            system: SystemParams::default(),
            evolve: EvolveOptions::default(),
            sampler: SamplerConfig::default(),
            trajectory: TrajectoryConfig::default(),
            spectrum: SpectrumConfig::default(),
            scan: ScanConfig::default(),
            stability: ScanConfig::stability(),
            comparison: ComparisonConfig::default(),
            steady: SteadyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Momentum spread at `omega_r_ref`, in `ħk_a`.
    pub p_bar0_ref: f64,
    pub omega_r_ref: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let s = MomentumSampler::default();
        Self { p_bar0_ref: s.p_bar0_ref, omega_r_ref: s.omega_r_ref }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Initial momenta; drawn from the sampler when absent.
    pub momenta: Option<Vec<f64>>,
    pub t_final: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self { momenta: None, t_final: 500.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub momenta: Option<Vec<f64>>,
    /// Hold the atoms at the antinodes instead of moving them.
    pub fixed_positions: bool,
    /// Time of the quasi-steady reference state.
    pub t_steady: f64,
    pub tau_max: f64,
    pub n_tau: usize,
    pub zero_pad: usize,
    pub window: Window,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        let d = SpectrumOptions::default();
        Self {
            momenta: None,
            fixed_positions: false,
            t_steady: d.t_steady,
            tau_max: d.tau_max,
            n_tau: d.n_tau,
            zero_pad: d.zero_pad,
            window: d.window,
        }
    }
}

impl SpectrumConfig {
    pub fn options(&self, evolve: &EvolveOptions) -> SpectrumOptions {
        SpectrumOptions {
            t_steady: self.t_steady,
            tau_max: self.tau_max,
            n_tau: self.n_tau,
            zero_pad: self.zero_pad,
            window: self.window,
            evolve: evolve.clone(),
        }
    }
}

/// One scan axis, given either as explicit `values` or as `min`, `max` and
/// `points` (inclusive, uniformly spaced).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
}

impl AxisConfig {
    fn range(name: &str, min: f64, max: f64, points: usize) -> Self {
        Self { name: name.into(), values: None, min: Some(min), max: Some(max), points: Some(points) }
    }

    pub fn resolve(&self) -> Result<ScanAxis> {
        let name: AxisName = serde_json::from_value(serde_json::Value::String(self.name.clone()))
            .map_err(|_| anyhow::anyhow!("unknown scan axis `{}` (expected delta, pump_rate, g0 or omega_r)", self.name))?;
        match (&self.values, self.min, self.max, self.points) {
            (Some(v), None, None, None) => Ok(ScanAxis { name, values: v.clone() }),
            (None, Some(lo), Some(hi), Some(n)) => Ok(ScanAxis::linspace(name, lo, hi, n)),
            _ => bail!("axis `{}` needs either `values` or all of `min`, `max`, `points`", self.name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanConfig {
    pub axis1: AxisConfig,
    pub axis2: AxisConfig,
    pub samples_per_point: usize,
    pub t_final: f64,
    /// Also compute a spectrum for every stable sample.
    pub spectra: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            axis1: AxisConfig::range("delta", 5.0, 30.0, 6),
            axis2: AxisConfig::range("pump_rate", 1.0, 20.0, 6),
            samples_per_point: 100,
            t_final: 500.0,
            spectra: false,
        }
    }
}

impl ScanConfig {
    fn stability() -> Self {
        Self {
            axis1: AxisConfig::range("delta", -10.0, 50.0, 7),
            axis2: AxisConfig::range("pump_rate", 1.0, 20.0, 6),
            ..Self::default()
        }
    }

    pub fn grid(&self, fixed: &SystemParams, seed: u64) -> Result<ScanGrid> {
        let grid = ScanGrid {
            axis1: self.axis1.resolve().context("axis1")?,
            axis2: self.axis2.resolve().context("axis2")?,
            fixed: fixed.clone(),
            samples_per_point: self.samples_per_point,
            seed,
        };
        grid.validate()?;
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub samples: usize,
    pub t_final: f64,
    /// Points of the common time grid the curves are averaged on.
    pub n_points: usize,
    /// Recorded samples per unit time of each trajectory.
    pub samples_per_time: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self { samples: 20, t_final: 20000.0, n_points: 401, samples_per_time: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteadyConfig {
    /// Atom positions in `λ_c`; the antinodes `0, ½, 1, …` when absent.
    pub positions: Option<Vec<f64>>,
}

impl Default for SteadyConfig {
    fn default() -> Self {
        Self { positions: None }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate().context("[system]")?;
        if let Some(m) = &self.trajectory.momenta {
            if m.len() != self.system.n_atoms {
                bail!("[trajectory] momenta has {} entries for {} atoms", m.len(), self.system.n_atoms);
            }
        }
        if let Some(m) = &self.spectrum.momenta {
            if m.len() != self.system.n_atoms {
                bail!("[spectrum] momenta has {} entries for {} atoms", m.len(), self.system.n_atoms);
            }
        }
        if let Some(p) = &self.steady.positions {
            if p.len() != self.system.n_atoms {
                bail!("[steady] positions has {} entries for {} atoms", p.len(), self.system.n_atoms);
            }
        }
        self.scan.axis1.resolve().context("[scan.axis1]")?;
        self.scan.axis2.resolve().context("[scan.axis2]")?;
        self.stability.axis1.resolve().context("[stability.axis1]")?;
        self.stability.axis2.resolve().context("[stability.axis2]")?;
        if !(self.sampler.p_bar0_ref > 0.0 && self.sampler.omega_r_ref > 0.0) {
            bail!("[sampler] p_bar0_ref and omega_r_ref must be > 0");
        }
        if !(self.comparison.samples_per_time > 0.0) {
            bail!("[comparison] samples_per_time must be > 0");
        }
        Ok(())
    }

    pub fn sampler(&self) -> MomentumSampler {
        MomentumSampler { p_bar0_ref: self.sampler.p_bar0_ref, omega_r_ref: self.sampler.omega_r_ref, seed: self.seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_baseline_parameters() {
        let c = RunConfig::parse("").unwrap();
        let s = &c.system;
        assert_eq!((s.n_atoms, s.omega_r, s.delta, s.coupling.g0, s.kappa, s.pump_rate), (3, 0.1, 10.0, 5.0, 10.0, 8.0));
    }

    #[test]
    fn negative_kappa_is_rejected() {
        let err = RunConfig::parse("[system]\nkappa = -1.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("kappa"), "{err:#}");
    }

    #[test]
    fn unknown_axis_is_rejected() {
        let text = "[scan.axis1]\nname = \"mass\"\nvalues = [1.0]\n";
        let err = RunConfig::parse(text).unwrap_err();
        assert!(format!("{err:#}").contains("unknown scan axis `mass`"), "{err:#}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("[system]\ndetuning = 3.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("detuning"), "{err:#}");
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.trajectory.momenta = Some(vec![1.0, -0.73, 1.18]);
        c.scan.axis2 = AxisConfig { name: "g0".into(), values: Some(vec![1.0, 2.5]), min: None, max: None, points: None };
        c.seed = 17;
        assert_eq!(RunConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
    }
}
