//! Derived quantities: kinetic energy, its cycle average, trap stability and
//! the cavity/atom expectation values recorded along a trajectory.

use serde::{Deserialize, Serialize};

use crate::dynamics::{CoupledState, Diagnostics, MotionState, SampleObservables, SystemParams};
use crate::error::{CavityError, Result};
use crate::operators::{QuantumState, C64};

/// Relative tolerance below which neighbouring samples count as a plateau.
pub const PLATEAU_TOL: f64 = 1e-9;

/// Which atoms stayed within `λ_c/4` of their starting point for the whole run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub per_atom: Vec<bool>,
    pub overall: bool,
}

impl StabilityVerdict {
    pub fn from_atoms(per_atom: Vec<bool>) -> Self {
        let overall = per_atom.iter().all(|&s| s);
        Self { per_atom, overall }
    }
}

/// Sampled trajectory of one coupled run.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub params: SystemParams,
    pub initial_momenta: Vec<f64>,
    pub times: Vec<f64>,
    pub motion: Vec<MotionState>,
    /// Kinetic energy in units of `ħΓ`.
    pub e_kin: Vec<f64>,
    pub photons: Vec<f64>,
    /// `⟨a†a†aa⟩`.
    pub photons2: Vec<f64>,
    pub inversion: Vec<f64>,
    /// Per sample, `⟨σᵢ⁺σᵢ⁻⟩` for every atom.
    pub populations: Vec<Vec<f64>>,
    /// Per sample, `⟨σᵢ⁺σⱼ⁻⟩` for the pairs `i < j`.
    pub coherences: Vec<Vec<C64>>,
    pub stability: StabilityVerdict,
    pub diagnostics: Diagnostics,
    pub final_state: Option<CoupledState>,
    /// False if the run was cut short once an atom left its well.
    pub completed: bool,
}

impl Trajectory {
    pub fn with_capacity(params: SystemParams, initial_momenta: Vec<f64>, n: usize) -> Self {
        let n_atoms = params.n_atoms;
        Self {
            params,
            initial_momenta,
            times: Vec::with_capacity(n),
            motion: Vec::with_capacity(n),
            e_kin: Vec::with_capacity(n),
            photons: Vec::with_capacity(n),
            photons2: Vec::with_capacity(n),
            inversion: Vec::with_capacity(n),
            populations: Vec::with_capacity(n),
            coherences: Vec::with_capacity(n),
            stability: StabilityVerdict::from_atoms(vec![true; n_atoms]),
            diagnostics: Diagnostics::default(),
            final_state: None,
            completed: true,
        }
    }

    pub fn push(&mut self, t: f64, motion: MotionState, obs: SampleObservables) {
        self.times.push(t);
        self.motion.push(motion);
        self.e_kin.push(obs.e_kin);
        self.photons.push(obs.photons);
        self.photons2.push(obs.photons2);
        self.inversion.push(obs.inversion);
        self.populations.push(obs.populations);
        self.coherences.push(obs.coherences);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Cycle-averaged kinetic energy relative to its first value.
    pub fn relative_energy(&self) -> Result<(CycleAverage, Vec<f64>)> {
        let avg = cycle_averaged_energy(&self.times, &self.e_kin)?;
        let rel = relative_energy(&avg.values)?;
        Ok((avg, rel))
    }
}

/// `Σᵢ pᵢ²/2m = ħω_r Σᵢ (pᵢ/ħk_a)²`, in units of `ħΓ`.
pub fn kinetic_energy(motion: &MotionState, params: &SystemParams) -> f64 {
    params.omega_r * motion.momenta.iter().map(|p| p * p).sum::<f64>()
}

/// Midpoints between adjacent extrema of a sampled series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleAverage {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Fewer than two extrema were found; `values` holds the plain mean.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug)]
struct Extremum {
    t: f64,
    value: f64,
}

fn parabola_vertex(t: [f64; 3], y: [f64; 3]) -> Extremum {
    let h0 = t[0] - t[1];
    let h2 = t[2] - t[1];
    let d0 = y[0] - y[1];
    let d2 = y[2] - y[1];
    let det = h0 * h2 * (h0 - h2);
    let a = (d0 * h2 - d2 * h0) / det;
    let b = (d2 * h0 * h0 - d0 * h2 * h2) / det;
    if a == 0.0 || !a.is_finite() {
        return Extremum { t: t[1], value: y[1] };
    }
    let s = (-b / (2.0 * a)).clamp(h0, h2);
    Extremum { t: t[1] + s, value: y[1] + s * (b + a * s) }
}

fn find_extrema(times: &[f64], y: &[f64]) -> Vec<Extremum> {
    let scale = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = PLATEAU_TOL * scale;
    let mut out = Vec::new();
    let mut last_sign = 0i8;
    // first index of the current flat run
    let mut run_start = 0usize;
    for i in 1..y.len() {
        let d = y[i] - y[i - 1];
        let s = if d > tol {
            1
        } else if d < -tol {
            -1
        } else {
            0
        };
        if s == 0 {
            continue;
        }
        if last_sign != 0 && s != last_sign {
            let end = i - 1;
            if run_start == end {
                let k = end;
                out.push(parabola_vertex(
                    [times[k - 1], times[k], times[k + 1]],
                    [y[k - 1], y[k], y[k + 1]],
                ));
            } else {
                let n = (end - run_start + 1) as f64;
                out.push(Extremum {
                    t: 0.5 * (times[run_start] + times[end]),
                    value: y[run_start..=end].iter().sum::<f64>() / n,
                });
            }
        }
        last_sign = s;
        run_start = i;
    }
    out
}

/// Midpoints `(E_max + E_min)/2` of every pair of adjacent extrema, stamped
/// at the midpoint time. Extremum positions are refined with a parabola
/// through the three surrounding samples.
pub fn cycle_averaged_energy(times: &[f64], energies: &[f64]) -> Result<CycleAverage> {
    if energies.len() < 3 {
        return Err(CavityError::TooFewSamples { needed: 3, got: energies.len() });
    }
    if times.len() != energies.len() {
        return Err(CavityError::InvalidParameter {
            name: "times",
            reason: format!("{} times for {} samples", times.len(), energies.len()),
        });
    }
    let ext = find_extrema(times, energies);
    if ext.len() < 2 {
        let mean = energies.iter().sum::<f64>() / energies.len() as f64;
        let t = 0.5 * (times[0] + times[times.len() - 1]);
        return Ok(CycleAverage { times: vec![t], values: vec![mean], fallback: true });
    }
    let (times, values) = ext
        .windows(2)
        .map(|w| (0.5 * (w[0].t + w[1].t), 0.5 * (w[0].value + w[1].value)))
        .unzip();
    Ok(CycleAverage { times, values, fallback: false })
}

/// `Ē(t)/Ē(0)`.
pub fn relative_energy(smoothed: &[f64]) -> Result<Vec<f64>> {
    let first = *smoothed.first().ok_or(CavityError::TooFewSamples { needed: 1, got: 0 })?;
    if !(first > 0.0) || !first.is_finite() {
        return Err(CavityError::ZeroInitialEnergy(first));
    }
    Ok(smoothed.iter().map(|v| v / first).collect())
}

/// An atom is stable if it never moves more than `λ_c/4` from its initial position.
pub fn classify_stability(traj: &Trajectory) -> StabilityVerdict {
    let n = traj.params.n_atoms;
    let Some(first) = traj.motion.first() else {
        return StabilityVerdict::from_atoms(vec![true; n]);
    };
    let radius = 0.25 * traj.params.wavelength();
    let per_atom = (0..n)
        .map(|i| {
            let r0 = first.positions[i];
            traj.motion.iter().all(|m| (m.positions[i] - r0).abs() < radius)
        })
        .collect();
    StabilityVerdict::from_atoms(per_atom)
}

/// `⟨a†a⟩`.
pub fn photon_number(state: &QuantumState) -> f64 {
    let layout = state.layout();
    let rho = state.rho();
    (0..layout.total_dim()).map(|k| layout.photons(k) as f64 * rho[(k, k)].re).sum()
}

/// `⟨a†a†aa⟩/⟨a†a⟩²`.
pub fn g2_zero(state: &QuantumState) -> Result<f64> {
    let layout = state.layout();
    let rho = state.rho();
    let (mut n1, mut n2) = (0.0, 0.0);
    for k in 0..layout.total_dim() {
        let n = layout.photons(k) as f64;
        n1 += n * rho[(k, k)].re;
        n2 += n * (n - 1.0) * rho[(k, k)].re;
    }
    g2_from_moments(n1, n2)
}

pub fn g2_from_moments(photons: f64, photons2: f64) -> Result<f64> {
    if !(photons > 1e-12) {
        return Err(CavityError::UndefinedCorrelation { photons });
    }
    Ok(photons2 / (photons * photons))
}

/// `p_e = Σᵢ ⟨σᵢ⁺σᵢ⁻⟩`.
pub fn inversion(state: &QuantumState) -> f64 {
    let layout = state.layout();
    let rho = state.rho();
    (0..layout.total_dim()).map(|k| layout.excited_atoms(k) as f64 * rho[(k, k)].re).sum()
}
