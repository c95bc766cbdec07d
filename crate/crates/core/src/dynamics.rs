//! Coupled evolution of the internal quantum state (master equation) and the
//! classical positions and momenta of the atoms along the cavity axis.
//!
//! Units: `ħ = 1`, rates in units of `Γ` (with `Γ` itself a parameter),
//! positions in the length unit fixed by `k_a`/`k_c` (the defaults make it
//! `1/k_a`), momenta in units of `ħk_a`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::couplings::{
    self, collective_decay, collective_decay_gradient, dipole_shift, dipole_shift_gradient,
    mode_amplitude, CouplingParams,
};
use crate::error::{CavityError, Result};
use crate::integrator::{Dopri5, OdeSystem, StepStats, Tolerances};
use crate::liouvillian::{
    CoefficientMap, Generator, GeneratorTerms, ModelOperators, PackedObservable, Support,
};
use crate::observables::{classify_stability, kinetic_energy, Trajectory};
use crate::operators::{
    DenseOperator, HilbertLayout, QuantumState, SparseOperator, StateSnapshot, C64, FOCK_TAIL_WARNING,
};

/// Diagonal entries below this abort a run.
pub const POSITIVITY_ABORT: f64 = -1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemParams {
    pub coupling: CouplingParams,
    /// Cavity-atom detuning `Δ = ω_c − ω_a`.
    pub delta: f64,
    /// Incoherent pump rate `R`.
    pub pump_rate: f64,
    /// Cavity field decay rate `κ` (photon number decays at `2κ`).
    pub kappa: f64,
    /// Recoil frequency `ω_r = ħk_a²/2m`.
    pub omega_r: f64,
    pub n_atoms: usize,
    pub fock_cutoff: usize,
    /// Include the collective-decay force term `−∂Γ_ij·Im⟨σᵢ⁺σⱼ⁻⟩`.
    pub collective_force_decay_term: bool,
    /// Switch off dipole-dipole couplings (`Ω_ij = 0`, `Γ_ij = δ_ij Γ`).
    pub independent_atoms: bool,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            coupling: CouplingParams::default(),
            delta: 10.0,
            pump_rate: 8.0,
            kappa: 10.0,
            omega_r: 0.1,
            n_atoms: 3,
            fock_cutoff: crate::operators::DEFAULT_FOCK_CUTOFF,
            collective_force_decay_term: false,
            independent_atoms: false,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        let nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(CavityError::InvalidParameter { name, reason: format!("must be >= 0, got {v}") })
            }
        };
        nonneg("pump_rate", self.pump_rate)?;
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(CavityError::InvalidParameter {
                name: "kappa",
                reason: format!("must be > 0, got {}", self.kappa),
            });
        }
        if !(self.omega_r.is_finite() && self.omega_r > 0.0) {
            return Err(CavityError::InvalidParameter {
                name: "omega_r",
                reason: format!("must be > 0, got {}", self.omega_r),
            });
        }
        if !self.delta.is_finite() {
            return Err(CavityError::InvalidParameter { name: "delta", reason: "not finite".into() });
        }
        self.layout()?;
        Ok(())
    }

    pub fn layout(&self) -> Result<HilbertLayout> {
        HilbertLayout::new(self.n_atoms, self.fock_cutoff)
    }

    /// Cavity wavelength `λ_c`.
    pub fn wavelength(&self) -> f64 {
        self.coupling.wavelength()
    }

    /// Antinodes spaced by `λ_c/2`, starting at the origin.
    pub fn antinode_positions(&self) -> Vec<f64> {
        let half = 0.5 * self.wavelength();
        (0..self.n_atoms).map(|i| i as f64 * half).collect()
    }

    /// `ṙ = 2ω_r p/(ħk_a²)` with `p` in units of `ħk_a`.
    pub fn velocity(&self, momentum: f64) -> f64 {
        2.0 * self.omega_r * momentum / self.coupling.k_a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionState {
    pub positions: Vec<f64>,
    pub momenta: Vec<f64>,
}

impl MotionState {
    pub fn new(positions: Vec<f64>, momenta: Vec<f64>) -> Result<Self> {
        if positions.len() != momenta.len() {
            return Err(CavityError::InvalidState(format!(
                "{} positions but {} momenta",
                positions.len(),
                momenta.len()
            )));
        }
        Ok(Self { positions, momenta })
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.momenta).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledState {
    pub quantum: QuantumState,
    pub motion: MotionState,
    pub time: f64,
}

impl CoupledState {
    /// Atoms in the ground state at the antinodes, empty cavity, given momenta.
    pub fn initial(params: &SystemParams, momenta: &[f64]) -> Result<Self> {
        let layout = params.layout()?;
        if momenta.len() != params.n_atoms {
            return Err(CavityError::InvalidState(format!(
                "expected {} momenta, got {}",
                params.n_atoms,
                momenta.len()
            )));
        }
        Ok(Self {
            quantum: QuantumState::ground(layout),
            motion: MotionState::new(params.antinode_positions(), momenta.to_vec())?,
            time: 0.0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            time: self.time,
            positions: self.motion.positions.clone(),
            momenta: self.motion.momenta.clone(),
            quantum: self.quantum.to_snapshot(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Self> {
        let quantum = QuantumState::from_snapshot(&cp.quantum)?;
        let motion = MotionState::new(cp.positions.clone(), cp.momenta.clone())?;
        if motion.n_atoms() != quantum.layout().n_atoms() {
            return Err(CavityError::LayoutMismatch("motion and quantum state disagree on N".into()));
        }
        Ok(Self { quantum, motion, time: cp.time })
    }
}

/// Serialised [`CoupledState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub time: f64,
    pub positions: Vec<f64>,
    pub momenta: Vec<f64>,
    pub quantum: StateSnapshot,
}

/// Coefficients `c_k` of the generator pieces for the given positions.
pub(crate) fn fill_coefficients(
    params: &SystemParams,
    cmap: &CoefficientMap,
    positions: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let cp = &params.coupling;
    out[CoefficientMap::DETUNING] = params.delta;
    out[CoefficientMap::PUMP] = params.pump_rate;
    out[CoefficientMap::CAVITY_LOSS] = params.kappa;
    out[CoefficientMap::ATOM_DECAY] = cp.gamma;
    for (i, &r) in positions.iter().enumerate() {
        out[cmap.mode(i)] = mode_amplitude(cp, r);
    }
    for (p, (i, j)) in cmap.pairs().enumerate() {
        if params.independent_atoms {
            out[cmap.shift(p)] = 0.0;
            out[cmap.collective_decay(p)] = 0.0;
            continue;
        }
        let (r, _) = couplings::separation(positions, i, j);
        if !(r > cp.r_min()) {
            return Err(CavityError::NearField { pair: Some((i, j)), separation: r, r_min: cp.r_min() });
        }
        out[cmap.shift(p)] = dipole_shift(cp, r)?;
        out[cmap.collective_decay(p)] = collective_decay(cp, r);
    }
    Ok(())
}

/// Momentum rates `dpᵢ/dt` (units `ħk_a·Γ`) from the relevant expectation values.
///
/// `mode_coherence[i] = ⟨aσᵢ⁺ + a†σᵢ⁻⟩`; `pair_coherence[p] = ⟨σᵢ⁺σⱼ⁻⟩` for
/// the pairs `i < j` in [`CoefficientMap::pairs`] order.
pub fn force_from_expectations(
    params: &SystemParams,
    positions: &[f64],
    mode_coherence: &[f64],
    pair_coherence: &[C64],
    out: &mut [f64],
) -> Result<()> {
    let cp = &params.coupling;
    let k_a = cp.k_a;
    for (i, f) in out.iter_mut().enumerate() {
        // −∂_r g(r) = g0 k_c sin(k_c r)
        *f = cp.g0 * cp.k_c * (cp.k_c * positions[i]).sin() * mode_coherence[i];
    }
    if !params.independent_atoms {
        let cmap = CoefficientMap::new(positions.len());
        for (p, (i, j)) in cmap.pairs().enumerate() {
            let (r, sign) = couplings::separation(positions, i, j);
            let c = pair_coherence[p];
            // ∂_{r_i} Ω(r_ij) = sign·Ω'(r); ∂_{r_j} = −sign·Ω'(r)
            let d_omega = sign * dipole_shift_gradient(cp, r).map_err(|_| CavityError::NearField {
                pair: Some((i, j)),
                separation: r,
                r_min: cp.r_min(),
            })?;
            let pull = 2.0 * d_omega * c.re;
            out[i] -= pull;
            out[j] += pull;
            if params.collective_force_decay_term {
                // Im⟨σⱼ⁺σᵢ⁻⟩ = −Im⟨σᵢ⁺σⱼ⁻⟩
                let d_gamma = sign * collective_decay_gradient(cp, r);
                out[i] -= d_gamma * c.im;
                out[j] -= d_gamma * c.im;
            }
        }
    }
    for f in out.iter_mut() {
        *f /= k_a;
    }
    Ok(())
}

/// Packed observables needed during propagation.
struct ObservableSet {
    trace: PackedObservable,
    number: PackedObservable,
    number2: PackedObservable,
    populations: Vec<PackedObservable>,
    mode: Vec<PackedObservable>,
    pairs: Vec<PackedObservable>,
    diagonal: Vec<u32>,
    tail: Vec<u32>,
    mirror: Vec<(u32, u32)>,
}

impl ObservableSet {
    fn new(ops: &ModelOperators, support: &Support) -> Self {
        let layout = support.layout();
        let d = layout.total_dim();
        let n = layout.n_atoms();
        let cmap = CoefficientMap::new(n);
        let identity = SparseOperator::identity(d);
        let number2 = ops.a_dag.mul(&ops.a_dag).mul(&ops.a).mul(&ops.a);
        let diagonal: Vec<u32> = (0..d).filter_map(|k| support.index(k, k)).map(|i| i as u32).collect();
        let tail = (0..d)
            .filter(|&k| layout.photons(k) == layout.fock_cutoff())
            .filter_map(|k| support.index(k, k))
            .map(|i| i as u32)
            .collect();
        let mut mirror = Vec::new();
        for k in 0..d {
            for l in (k + 1)..d {
                if let (Some(a), Some(b)) = (support.index(k, l), support.index(l, k)) {
                    mirror.push((a as u32, b as u32));
                }
            }
        }
        Self {
            trace: PackedObservable::new(&identity, support),
            number: PackedObservable::new(&ops.number, support),
            number2: PackedObservable::new(&number2, support),
            populations: (0..n)
                .map(|i| PackedObservable::new(&ops.raise[i].mul(&ops.lower[i]), support))
                .collect(),
            mode: (0..n).map(|i| PackedObservable::new(&ops.a.mul(&ops.raise[i]), support)).collect(),
            pairs: cmap
                .pairs()
                .map(|(i, j)| PackedObservable::new(&ops.raise[i].mul(&ops.lower[j]), support))
                .collect(),
            diagonal,
            tail,
            mirror,
        }
    }

    fn min_diagonal(&self, x: &[f64]) -> f64 {
        self.diagonal.iter().map(|&i| x[2 * i as usize]).fold(f64::INFINITY, f64::min)
    }
}

/// Whether the classical motion is integrated or held fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    #[default]
    Free,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveOptions {
    pub tolerances: Tolerances,
    /// Number of recorded samples, both end points included.
    pub n_samples: usize,
    pub motion: MotionMode,
    pub terms: GeneratorTerms,
    /// Optional cap on the internal step size.
    pub dt_max: Option<f64>,
    /// End the run at the first recorded sample where an atom has left its well.
    pub stop_when_unstable: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            tolerances: Tolerances::default(),
            n_samples: 2000,
            motion: MotionMode::Free,
            terms: GeneratorTerms::default(),
            dt_max: None,
            stop_when_unstable: false,
        }
    }
}

/// Observables evaluated at one recording time.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleObservables {
    pub e_kin: f64,
    pub photons: f64,
    pub photons2: f64,
    pub inversion: f64,
    pub populations: Vec<f64>,
    pub coherences: Vec<C64>,
    pub trace: C64,
}

/// Health of a run, accumulated over recorded samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_trace_drift: f64,
    pub max_hermiticity_defect: f64,
    pub min_diagonal: f64,
    pub max_fock_tail: f64,
    pub fock_tail_warning: bool,
    /// Largest `|Im⟨σᵢ⁺σⱼ⁻⟩|` seen at a recording time.
    pub max_imag_coherence: f64,
    pub stats: StepStats,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            max_trace_drift: 0.0,
            max_hermiticity_defect: 0.0,
            min_diagonal: f64::INFINITY,
            max_fock_tail: 0.0,
            fock_tail_warning: false,
            max_imag_coherence: 0.0,
            stats: StepStats::default(),
        }
    }
}

struct Model {
    params: SystemParams,
    cmap: CoefficientMap,
    generator: Generator,
    probe: Option<Generator>,
    motion: MotionMode,
    n_quantum: usize,
    n_atoms: usize,
    obs: ObservableSet,
    coeffs: Vec<f64>,
    mode_coherence: Vec<f64>,
    pair_coherence: Vec<C64>,
    forces: Vec<f64>,
}

impl Model {
    fn motion_offset(&self) -> usize {
        self.n_quantum
    }

    fn probe_offset(&self) -> usize {
        self.n_quantum + 2 * self.n_atoms
    }
}

impl OdeSystem for Model {
    fn rhs(&mut self, _t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.n_atoms;
        let mo = self.motion_offset();
        let (q, rest) = y.split_at(mo);
        let positions = &rest[..n];
        let momenta = &rest[n..2 * n];
        fill_coefficients(&self.params, &self.cmap, positions, &mut self.coeffs)?;
        let (dq, drest) = dy.split_at_mut(mo);
        self.generator.apply(&self.coeffs, q, dq);
        match self.motion {
            MotionMode::Frozen => drest[..2 * n].fill(0.0),
            MotionMode::Free => {
                for i in 0..n {
                    drest[i] = self.params.velocity(momenta[i]);
                    self.mode_coherence[i] = 2.0 * self.obs.mode[i].eval(q).re;
                }
                for (p, o) in self.obs.pairs.iter().enumerate() {
                    self.pair_coherence[p] = o.eval(q);
                }
                force_from_expectations(
                    &self.params,
                    positions,
                    &self.mode_coherence,
                    &self.pair_coherence,
                    &mut self.forces,
                )?;
                drest[n..2 * n].copy_from_slice(&self.forces);
            }
        }
        if let Some(probe) = &self.probe {
            let po = 2 * n;
            probe.apply(&self.coeffs, &rest[po..], &mut drest[po..]);
        }
        Ok(())
    }
}

/// Stateful integrator of one [`CoupledState`], optionally carrying a second
/// operator `ρ̄` propagated under the same generator along the same positions
/// (no force feedback from `ρ̄`).
pub struct Propagator {
    model: Model,
    solver: Dopri5,
    y: Vec<f64>,
    t: f64,
    layout: HilbertLayout,
    probe_support: Option<Support>,
    probe_readout: Option<PackedObservable>,
    dt_max: Option<f64>,
    diagnostics: Diagnostics,
}

impl Propagator {
    pub fn new(params: &SystemParams, initial: &CoupledState, options: &EvolveOptions) -> Result<Self> {
        Self::build(params, initial, None, options)
    }

    /// Propagator that also evolves `probe` (e.g. `a·ρ`) and reads out
    /// `trace(a†·probe)`.
    pub fn with_probe(
        params: &SystemParams,
        initial: &CoupledState,
        probe: &DMatrix<C64>,
        options: &EvolveOptions,
    ) -> Result<Self> {
        Self::build(params, initial, Some(probe), options)
    }

    fn build(
        params: &SystemParams,
        initial: &CoupledState,
        probe: Option<&DMatrix<C64>>,
        options: &EvolveOptions,
    ) -> Result<Self> {
        params.validate()?;
        let layout = params.layout()?;
        if *initial.quantum.layout() != layout {
            return Err(CavityError::LayoutMismatch(
                "initial state does not match the parameters' layout".into(),
            ));
        }
        if initial.motion.n_atoms() != params.n_atoms {
            return Err(CavityError::LayoutMismatch("motion state has the wrong atom count".into()));
        }
        if !initial.motion.is_finite() {
            return Err(CavityError::NonFinite { t: initial.time });
        }
        let rho = initial.quantum.rho();
        let mut support = Support::for_matrix(&layout, rho, 0, 0.0);
        let probe_support = match probe {
            Some(m) => {
                let s = match support.sector_offset() {
                    Some(sec) => Support::for_matrix(&layout, m, sec - 1, 0.0),
                    None => Support::full(&layout),
                };
                if s.sector_offset().is_none() {
                    support = Support::full(&layout);
                }
                Some(s)
            }
            None => None,
        };
        let ops = ModelOperators::new(&layout);
        let obs = ObservableSet::new(&ops, &support);
        let probe_readout = probe_support.as_ref().map(|s| PackedObservable::new(&ops.a_dag, s));
        let generator = Generator::new(support.clone(), options.terms);
        let probe_gen = probe_support.as_ref().map(|s| Generator::new(s.clone(), options.terms));
        let n = params.n_atoms;
        let n_quantum = 2 * support.len();
        let n_probe = probe_support.as_ref().map_or(0, |s| 2 * s.len());
        let mut y = vec![0.0; n_quantum + 2 * n + n_probe];
        support.pack(rho, &mut y[..n_quantum]);
        y[n_quantum..n_quantum + n].copy_from_slice(&initial.motion.positions);
        y[n_quantum + n..n_quantum + 2 * n].copy_from_slice(&initial.motion.momenta);
        if let (Some(m), Some(s)) = (probe, &probe_support) {
            s.pack(m, &mut y[n_quantum + 2 * n..]);
        }
        let cmap = CoefficientMap::new(n);
        let model = Model {
            params: params.clone(),
            cmap,
            generator,
            probe: probe_gen,
            motion: options.motion,
            n_quantum,
            n_atoms: n,
            obs,
            coeffs: vec![0.0; cmap.len()],
            mode_coherence: vec![0.0; n],
            pair_coherence: vec![C64::new(0.0, 0.0); cmap.n_pairs()],
            forces: vec![0.0; n],
        };
        let solver = Dopri5::new(y.len(), options.tolerances);
        let mut prop = Self {
            model,
            solver,
            y,
            t: initial.time,
            layout,
            probe_support,
            probe_readout,
            dt_max: options.dt_max,
            diagnostics: Diagnostics::default(),
        };
        // reject near-field starting configurations up front
        let mut coeffs = prop.model.coeffs.clone();
        fill_coefficients(params, &cmap, &initial.motion.positions, &mut coeffs)?;
        prop.track_diagnostics();
        Ok(prop)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn params(&self) -> &SystemParams {
        &self.model.params
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn stats(&self) -> StepStats {
        self.solver.stats()
    }

    /// One accepted adaptive step no longer than `dt_max`.
    pub fn step(&mut self, dt_max: f64) -> Result<f64> {
        let cap = self.dt_max.map_or(dt_max, |d| d.min(dt_max));
        let h = self.solver.step(&mut self.model, &mut self.t, &mut self.y, cap)?;
        self.check_step()?;
        Ok(h)
    }

    /// Integrates up to exactly `t_end`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        while self.t < t_end {
            let remaining = t_end - self.t;
            if remaining <= 1e-13 * t_end.abs().max(1.0) {
                self.t = t_end;
                break;
            }
            let taken = self.step(remaining)?;
            if taken >= remaining {
                self.t = t_end;
            }
        }
        Ok(())
    }

    fn check_step(&mut self) -> Result<()> {
        if !self.y.iter().all(|v| v.is_finite()) {
            return Err(CavityError::NonFinite { t: self.t });
        }
        let q = &self.y[..self.model.n_quantum];
        let min_diag = self.model.obs.min_diagonal(q);
        if min_diag < POSITIVITY_ABORT {
            return Err(CavityError::PositivityViolation { t: self.t, min_diag });
        }
        Ok(())
    }

    /// Updates the run diagnostics from the current state; called at recording times.
    pub fn track_diagnostics(&mut self) {
        let q = &self.y[..self.model.n_quantum];
        let obs = &self.model.obs;
        let d = &mut self.diagnostics;
        let drift = (obs.trace.eval(q) - C64::new(1.0, 0.0)).norm();
        if drift > crate::operators::TRACE_TOL && drift > d.max_trace_drift {
            log::warn!("trace drift {drift:e} at t = {}", self.t);
        }
        d.max_trace_drift = d.max_trace_drift.max(drift);
        let herm = obs
            .mirror
            .iter()
            .map(|&(a, b)| {
                let (a, b) = (2 * a as usize, 2 * b as usize);
                (q[a] - q[b]).hypot(q[a + 1] + q[b + 1])
            })
            .fold(0.0, f64::max);
        d.max_hermiticity_defect = d.max_hermiticity_defect.max(herm);
        d.min_diagonal = d.min_diagonal.min(obs.min_diagonal(q));
        let tail: f64 = obs.tail.iter().map(|&i| q[2 * i as usize]).sum();
        d.max_fock_tail = d.max_fock_tail.max(tail);
        if tail > FOCK_TAIL_WARNING && !d.fock_tail_warning {
            d.fock_tail_warning = true;
            log::warn!(
                "population {tail:e} in the top Fock level at t = {}; consider a larger fock_cutoff",
                self.t
            );
        }
        for o in &obs.pairs {
            d.max_imag_coherence = d.max_imag_coherence.max(o.eval(q).im.abs());
        }
        d.stats = self.solver.stats();
    }

    pub fn motion(&self) -> MotionState {
        let n = self.model.n_atoms;
        let mo = self.model.motion_offset();
        MotionState {
            positions: self.y[mo..mo + n].to_vec(),
            momenta: self.y[mo + n..mo + 2 * n].to_vec(),
        }
    }

    pub fn quantum(&self) -> QuantumState {
        let rho = self.model.generator.support().unpack(&self.y[..self.model.n_quantum]);
        QuantumState::from_matrix_unchecked(self.layout, rho).expect("layout is consistent")
    }

    pub fn state(&self) -> CoupledState {
        CoupledState { quantum: self.quantum(), motion: self.motion(), time: self.t }
    }

    /// `trace(a†·ρ̄)` of the probe operator, if one is carried.
    pub fn probe_correlation(&self) -> Option<C64> {
        let readout = self.probe_readout.as_ref()?;
        Some(readout.eval(&self.y[self.model.probe_offset()..]))
    }

    /// Current `ρ̄`, if carried.
    pub fn probe(&self) -> Option<DMatrix<C64>> {
        let s = self.probe_support.as_ref()?;
        Some(s.unpack(&self.y[self.model.probe_offset()..]))
    }

    pub fn observables(&self) -> SampleObservables {
        let q = &self.y[..self.model.n_quantum];
        let obs = &self.model.obs;
        let populations: Vec<f64> = obs.populations.iter().map(|o| o.eval(q).re).collect();
        let motion = self.motion();
        SampleObservables {
            e_kin: kinetic_energy(&motion, &self.model.params),
            photons: obs.number.eval(q).re,
            photons2: obs.number2.eval(q).re,
            inversion: populations.iter().sum(),
            populations,
            coherences: obs.pairs.iter().map(|o| o.eval(q)).collect(),
            trace: obs.trace.eval(q),
        }
    }
}

/// View handed to a [`Recorder`] at each recording time.
pub struct Snapshot<'a> {
    propagator: &'a Propagator,
    pub observables: &'a SampleObservables,
}

impl Snapshot<'_> {
    pub fn time(&self) -> f64 {
        self.propagator.time()
    }

    pub fn motion(&self) -> MotionState {
        self.propagator.motion()
    }

    /// Full state; unpacks the density matrix on demand.
    pub fn state(&self) -> CoupledState {
        self.propagator.state()
    }
}

/// Callback invoked on the uniform recording grid.
pub trait Recorder {
    fn record(&mut self, t: f64, snapshot: &Snapshot<'_>);
}

impl<F: FnMut(f64, &Snapshot<'_>)> Recorder for F {
    fn record(&mut self, t: f64, snapshot: &Snapshot<'_>) {
        self(t, snapshot)
    }
}

/// Recorder that ignores every sample.
pub struct NoRecorder;

impl Recorder for NoRecorder {
    fn record(&mut self, _t: f64, _snapshot: &Snapshot<'_>) {}
}

/// `H = Δa†a + Σᵢ g(rᵢ)(aσᵢ⁺ + a†σᵢ⁻) + Σ_{i≠j} Ω_ij σᵢ⁺σⱼ⁻`.
pub fn hamiltonian(params: &SystemParams, positions: &[f64]) -> Result<DenseOperator> {
    let layout = params.layout()?;
    if positions.len() != params.n_atoms {
        return Err(CavityError::LayoutMismatch("one position per atom required".into()));
    }
    let ops = ModelOperators::new(&layout);
    let cmap = CoefficientMap::new(params.n_atoms);
    let mut c = vec![0.0; cmap.len()];
    fill_coefficients(params, &cmap, positions, &mut c)?;
    let re = |v: f64| C64::new(v, 0.0);
    let mut h = ops.number.scale(re(params.delta));
    for i in 0..params.n_atoms {
        h = h.add_scaled(&ops.mode_coupling(i), re(c[cmap.mode(i)]));
    }
    for (p, (i, j)) in cmap.pairs().enumerate() {
        h = h.add_scaled(&ops.exchange(i, j), re(c[cmap.shift(p)]));
    }
    Ok(DenseOperator::from_sparse(layout, &h))
}

/// `dρ/dt` from the full master equation at fixed positions.
pub fn liouvillian_apply(
    params: &SystemParams,
    positions: &[f64],
    state: &QuantumState,
    terms: GeneratorTerms,
) -> Result<DMatrix<C64>> {
    let layout = params.layout()?;
    if *state.layout() != layout {
        return Err(CavityError::LayoutMismatch("state does not match parameters".into()));
    }
    let support = Support::full(&layout);
    let generator = Generator::new(support, terms);
    let cmap = CoefficientMap::new(params.n_atoms);
    let mut c = vec![0.0; cmap.len()];
    fill_coefficients(params, &cmap, positions, &mut c)?;
    let s = generator.support();
    let mut x = vec![0.0; 2 * s.len()];
    s.pack(state.rho(), &mut x);
    let mut out = vec![0.0; x.len()];
    generator.apply(&c, &x, &mut out);
    Ok(s.unpack(&out))
}

/// Expectations entering the force: `⟨aσᵢ⁺ + a†σᵢ⁻⟩` per atom and `⟨σᵢ⁺σⱼ⁻⟩` per pair.
pub fn force_expectations(state: &QuantumState) -> (Vec<f64>, Vec<C64>) {
    let layout = state.layout();
    let ops = ModelOperators::new(layout);
    let support = Support::full(layout);
    let mut x = vec![0.0; 2 * support.len()];
    support.pack(state.rho(), &mut x);
    let n = layout.n_atoms();
    let mode = (0..n)
        .map(|i| PackedObservable::new(&ops.mode_coupling(i), &support).eval(&x).re)
        .collect();
    let pairs = CoefficientMap::new(n)
        .pairs()
        .map(|(i, j)| PackedObservable::new(&ops.raise[i].mul(&ops.lower[j]), &support).eval(&x))
        .collect();
    (mode, pairs)
}

/// Momentum rates `dpᵢ/dt` (units `ħk_a·Γ`) for the given state and positions.
pub fn force(params: &SystemParams, positions: &[f64], quantum: &QuantumState) -> Result<Vec<f64>> {
    if positions.len() != params.n_atoms || quantum.layout().n_atoms() != params.n_atoms {
        return Err(CavityError::LayoutMismatch("one position per atom required".into()));
    }
    let (mode, pairs) = force_expectations(quantum);
    let mut out = vec![0.0; params.n_atoms];
    force_from_expectations(params, positions, &mode, &pairs, &mut out)?;
    Ok(out)
}

/// Advances `state` by one accepted adaptive step of at most `dt_max`.
pub fn step(state: &CoupledState, params: &SystemParams, dt_max: f64) -> Result<CoupledState> {
    let mut prop = Propagator::new(params, state, &EvolveOptions::default())?;
    prop.step(dt_max)?;
    Ok(prop.state())
}

/// Evolves `initial` over a time span `t_final`, recording on a uniform grid
/// of `options.n_samples` points (both ends included).
pub fn evolve(
    initial: &CoupledState,
    params: &SystemParams,
    t_final: f64,
    options: &EvolveOptions,
    recorder: &mut dyn Recorder,
) -> Result<Trajectory> {
    if !(t_final > 0.0) {
        return Err(CavityError::InvalidParameter {
            name: "t_final",
            reason: format!("must be > 0, got {t_final}"),
        });
    }
    if options.n_samples < 2 {
        return Err(CavityError::TooFewSamples { needed: 2, got: options.n_samples });
    }
    let mut prop = Propagator::new(params, initial, options)?;
    let t0 = initial.time;
    let n = options.n_samples;
    let mut traj = Trajectory::with_capacity(params.clone(), initial.motion.momenta.clone(), n);
    let radius = 0.25 * params.wavelength();
    let r0 = initial.motion.positions.clone();
    for k in 0..n {
        let t = if k + 1 == n { t0 + t_final } else { t0 + t_final * k as f64 / (n - 1) as f64 };
        prop.advance_to(t)?;
        prop.track_diagnostics();
        let obs = prop.observables();
        recorder.record(t, &Snapshot { propagator: &prop, observables: &obs });
        let motion = prop.motion();
        let escaped = motion.positions.iter().zip(&r0).any(|(r, r0)| (r - r0).abs() >= radius);
        traj.push(t, motion, obs);
        if escaped && options.stop_when_unstable {
            traj.completed = false;
            break;
        }
    }
    traj.final_state = Some(prop.state());
    traj.diagnostics = prop.diagnostics().clone();
    traj.stability = classify_stability(&traj);
    Ok(traj)
}
