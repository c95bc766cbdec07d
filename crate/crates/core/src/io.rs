//! Delimited-text tables and JSON sidecars for trajectories, spectra, scans
//! and checkpoints.
//!
//! Tables are comma separated with one header row. Lengths are written in
//! units of `λ_c`, momenta in `ħk_a`, times in `1/Γ`, energies in `ħΓ` and
//! frequencies in `Γ` relative to the atomic resonance. Missing values are
//! written as `null`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Checkpoint, CoupledState, Diagnostics, SystemParams};
use crate::error::Result;
use crate::observables::{StabilityVerdict, Trajectory};
use crate::spectrum::{CorrelationSeries, LorentzianFit, SecondaryPeak, SpectrumResult};
use crate::sweep::{CellOptions, ComparisonResult, MomentumSampler, ScanResult};

/// Version of the file layouts written by this module.
pub const SCHEMA_VERSION: u32 = 1;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => "null".to_string(),
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Header of the trajectory table for `n` atoms.
pub fn trajectory_header(n: usize) -> String {
    let mut cols = vec!["t[1/Gamma]".to_string()];
    cols.extend((1..=n).map(|i| format!("r_{i}[lambda_c]")));
    cols.extend((1..=n).map(|i| format!("p_{i}[hbar*k_a]")));
    cols.extend(["E_kin[hbar*Gamma]".to_string(), "n".to_string(), "p_e".to_string()]);
    cols.join(",")
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let lambda = traj.params.wavelength();
    let mut out = trajectory_header(traj.params.n_atoms);
    out.push('\n');
    for k in 0..traj.len() {
        let m = &traj.motion[k];
        let _ = write!(out, "{}", traj.times[k]);
        for r in &m.positions {
            let _ = write!(out, ",{}", r / lambda);
        }
        for p in &m.momenta {
            let _ = write!(out, ",{p}");
        }
        let _ = writeln!(out, ",{},{},{}", traj.e_kin[k], traj.photons[k], traj.inversion[k]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub schema_version: u32,
    pub params: SystemParams,
    pub initial_momenta: Vec<f64>,
    pub stability: StabilityVerdict,
    pub completed: bool,
    pub n_samples: usize,
    /// Final cycle-averaged relative kinetic energy, if defined.
    pub e_kin_rel_final: Option<f64>,
    pub cycle_average_fallback: bool,
    pub diagnostics: Diagnostics,
}

impl TrajectoryMeta {
    pub fn of(traj: &Trajectory) -> Self {
        let rel = traj.relative_energy().ok();
        Self {
            schema_version: SCHEMA_VERSION,
            params: traj.params.clone(),
            initial_momenta: traj.initial_momenta.clone(),
            stability: traj.stability.clone(),
            completed: traj.completed,
            n_samples: traj.len(),
            e_kin_rel_final: rel.as_ref().and_then(|(_, r)| r.last().copied()),
            cycle_average_fallback: rel.as_ref().is_none_or(|(a, _)| a.fallback),
            diagnostics: traj.diagnostics.clone(),
        }
    }
}

/// Writes the table and its metadata sidecar.
pub fn write_trajectory(traj: &Trajectory, csv: &Path, meta: &Path) -> Result<()> {
    fs::write(csv, trajectory_csv(traj))?;
    write_json(meta, &TrajectoryMeta::of(traj))
}

pub fn correlation_csv(series: &CorrelationSeries) -> String {
    let mut out = String::from("tau[1/Gamma],re_g1,im_g1\n");
    for (t, g) in series.taus.iter().zip(&series.g1) {
        let _ = writeln!(out, "{t},{},{}", g.re, g.im);
    }
    out
}

pub fn spectrum_csv(result: &SpectrumResult) -> String {
    let mut out = String::from("omega[Gamma],S\n");
    for (w, s) in result.omegas.iter().zip(&result.s) {
        let _ = writeln!(out, "{w},{s}");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    pub schema_version: u32,
    pub params: SystemParams,
    pub fit: LorentzianFit,
    pub secondary_peak: Option<SecondaryPeak>,
    pub g1_zero_re: f64,
    pub g1_zero_im: f64,
    pub window_truncated: bool,
}

pub fn write_spectrum(result: &SpectrumResult, params: &SystemParams, csv: &Path, meta: &Path) -> Result<()> {
    fs::write(csv, spectrum_csv(result))?;
    write_json(
        meta,
        &SpectrumMeta {
            schema_version: SCHEMA_VERSION,
            params: params.clone(),
            fit: result.fit.clone(),
            secondary_peak: result.secondary_peak.clone(),
            g1_zero_re: result.g1_zero.re,
            g1_zero_im: result.g1_zero.im,
            window_truncated: result.truncated,
        },
    )
}

pub const SCAN_COLUMNS: &str = "axis1,axis2,e_kin_rel,stable_fraction,n,g2,p_e,gamma,delta0,n_stable";

pub fn scan_csv(result: &ScanResult) -> String {
    let mut out = String::from(SCAN_COLUMNS);
    out.push('\n');
    let g = &result.grid;
    for (i, j) in g.cells() {
        let c = result.cell(i, j);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            g.axis1.values[i],
            g.axis2.values[j],
            fmt_opt(c.e_kin_rel_final),
            c.stable_fraction,
            fmt_opt(c.n_mean),
            fmt_opt(c.g2_mean),
            fmt_opt(c.p_e_mean),
            fmt_opt(c.gamma_mean),
            fmt_opt(c.delta0_mean),
            c.n_stable
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanMeta {
    pub schema_version: u32,
    pub code_version: String,
    pub axis1: String,
    pub axis2: String,
    pub grid: crate::sweep::ScanGrid,
    pub sampler: MomentumSampler,
    pub options: CellOptions,
    pub cells: Vec<crate::sweep::ScanCell>,
}

pub fn write_scan(
    result: &ScanResult,
    sampler: &MomentumSampler,
    options: &CellOptions,
    csv: &Path,
    meta: &Path,
) -> Result<()> {
    fs::write(csv, scan_csv(result))?;
    write_json(
        meta,
        &ScanMeta {
            schema_version: SCHEMA_VERSION,
            code_version: CODE_VERSION.to_string(),
            axis1: result.grid.axis1.name.as_str().to_string(),
            axis2: result.grid.axis2.name.as_str().to_string(),
            grid: result.grid.clone(),
            sampler: MomentumSampler { seed: result.grid.seed, ..sampler.clone() },
            options: options.clone(),
            cells: result.cells.clone(),
        },
    )
}

pub fn comparison_csv(result: &ComparisonResult) -> String {
    let mut out = String::from("t[1/Gamma],e_kin_rel_collective,e_kin_rel_independent\n");
    for k in 0..result.times.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            result.times[k],
            fmt_opt(result.collective[k]),
            fmt_opt(result.independent[k])
        );
    }
    out
}

pub fn save_checkpoint(state: &CoupledState, path: &Path) -> Result<()> {
    write_json(path, &state.to_checkpoint())
}

pub fn load_checkpoint(path: &Path) -> Result<CoupledState> {
    let cp: Checkpoint = read_json(path)?;
    CoupledState::from_checkpoint(&cp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::{aggregate, AxisName, ScanAxis, ScanGrid, SampleOutcome};

    #[test]
    fn header_names_columns() {
        assert_eq!(
            trajectory_header(2),
            "t[1/Gamma],r_1[lambda_c],r_2[lambda_c],p_1[hbar*k_a],p_2[hbar*k_a],E_kin[hbar*Gamma],n,p_e"
        );
    }

    #[test]
    fn empty_scan_cells_are_null() {
        let grid = ScanGrid {
            axis1: ScanAxis { name: AxisName::Delta, values: vec![-5.0] },
            axis2: ScanAxis { name: AxisName::PumpRate, values: vec![8.0] },
            fixed: SystemParams::default(),
            samples_per_point: 1,
            seed: 3,
        };
        let unstable = SampleOutcome {
            index: 0,
            momenta: vec![0.0; 3],
            stable: false,
            e_kin_rel: None,
            degenerate: false,
            photons: 0.1,
            g2: None,
            p_e: 1.0,
            gamma: None,
            delta0: None,
            curve: None,
            error: None,
        };
        let result = ScanResult { grid, cells: vec![aggregate(&[unstable])] };
        let csv = scan_csv(&result);
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row, "-5,8,null,0,null,null,null,null,null,0");
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let params = SystemParams { fock_cutoff: 2, ..Default::default() };
        let mut state = CoupledState::initial(&params, &[0.1, -0.2, 0.3]).unwrap();
        state.time = 12.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cp.json");
        save_checkpoint(&state, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), state);
    }
}
