//! Ensemble runs over thermally sampled initial momenta, two-parameter scans,
//! the collective-versus-independent long-time comparison and a direct
//! steady-state solver used to cross-check the integrator.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::couplings::{build_coupling_matrices, mode_amplitude};
use crate::dynamics::{evolve, CoupledState, EvolveOptions, NoRecorder, SystemParams};
use crate::error::{CavityError, Result};
use crate::observables::{cycle_averaged_energy, g2_from_moments, g2_zero, inversion, photon_number, relative_energy};
use crate::operators::{atom_lowering, field_annihilation, HilbertLayout, QuantumState, C64};
use crate::spectrum::{spectrum_from_state, SpectrumOptions};

/// Thermal momentum distribution whose width follows `σ ∝ 1/√ω_r`, keeping
/// the mean kinetic energy independent of the recoil frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumSampler {
    /// Standard deviation at `omega_r_ref`, in units of `ħk_a`.
    pub p_bar0_ref: f64,
    pub omega_r_ref: f64,
    pub seed: u64,
}

impl Default for MomentumSampler {
    fn default() -> Self {
        Self { p_bar0_ref: 2.0, omega_r_ref: 0.1, seed: 0 }
    }
}

impl MomentumSampler {
    pub fn sigma(&self, omega_r: f64) -> f64 {
        self.p_bar0_ref * (self.omega_r_ref / omega_r).sqrt()
    }

    /// `n` momenta from the substream `stream` of the sampler's seed.
    pub fn draw(&self, omega_r: f64, n: usize, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let normal = Normal::new(0.0, self.sigma(omega_r)).expect("finite positive width");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    }
}

/// One set of initial momenta from the sampler's first substream.
pub fn sample_momenta(sampler: &MomentumSampler, params: &SystemParams, n_atoms: usize) -> Result<Vec<f64>> {
    if !(params.omega_r > 0.0) {
        return Err(CavityError::InvalidParameter { name: "omega_r", reason: "must be > 0".into() });
    }
    Ok(sampler.draw(params.omega_r, n_atoms, 0))
}

/// Substream index for sample `sample` of cell `(i, j)`.
pub fn stream_id(i: usize, j: usize, sample: usize) -> u64 {
    ((i as u64) << 40) | ((j as u64) << 20) | sample as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisName {
    Delta,
    PumpRate,
    G0,
    OmegaR,
}

impl AxisName {
    pub fn as_str(self) -> &'static str {
        match self {
            AxisName::Delta => "delta",
            AxisName::PumpRate => "pump_rate",
            AxisName::G0 => "g0",
            AxisName::OmegaR => "omega_r",
        }
    }

    pub fn apply(self, params: &mut SystemParams, value: f64) {
        match self {
            AxisName::Delta => params.delta = value,
            AxisName::PumpRate => params.pump_rate = value,
            AxisName::G0 => params.coupling.g0 = value,
            AxisName::OmegaR => params.omega_r = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanAxis {
    pub name: AxisName,
    pub values: Vec<f64>,
}

impl ScanAxis {
    pub fn linspace(name: AxisName, lo: f64, hi: f64, n: usize) -> Self {
        let values = match n {
            0 => Vec::new(),
            1 => vec![lo],
            _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
        };
        Self { name, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGrid {
    pub axis1: ScanAxis,
    pub axis2: ScanAxis,
    pub fixed: SystemParams,
    #[serde(default = "default_samples")]
    pub samples_per_point: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    100
}

impl ScanGrid {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_point == 0 {
            return Err(CavityError::InvalidParameter { name: "samples_per_point", reason: "must be >= 1".into() });
        }
        if self.axis1.values.is_empty() || self.axis2.values.is_empty() {
            return Err(CavityError::InvalidParameter { name: "axis", reason: "axes need at least one value".into() });
        }
        if self.axis1.name == self.axis2.name {
            return Err(CavityError::InvalidParameter { name: "axis", reason: "the two axes must differ".into() });
        }
        for (i, j) in self.cells() {
            self.params_at(i, j).validate()?;
        }
        Ok(())
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n2 = self.axis2.values.len();
        (0..self.axis1.values.len() * n2).map(move |c| (c / n2, c % n2))
    }

    pub fn params_at(&self, i: usize, j: usize) -> SystemParams {
        let mut p = self.fixed.clone();
        self.axis1.name.apply(&mut p, self.axis1.values[i]);
        self.axis2.name.apply(&mut p, self.axis2.values[j]);
        p
    }
}

/// What to evaluate for each sample of a cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellOptions {
    pub t_final: f64,
    pub evolve: EvolveOptions,
    /// Compute a spectrum from the final state of each stable sample.
    pub spectrum: Option<SpectrumOptions>,
    /// Keep each stable sample's `Ē_rel(t)` curve.
    pub keep_curves: bool,
}

impl Default for CellOptions {
    fn default() -> Self {
        Self {
            t_final: 500.0,
            evolve: EvolveOptions { stop_when_unstable: true, ..EvolveOptions::default() },
            spectrum: None,
            keep_curves: false,
        }
    }
}

/// Result of one ensemble member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub index: usize,
    pub momenta: Vec<f64>,
    pub stable: bool,
    /// Final cycle-averaged relative kinetic energy (unclamped).
    pub e_kin_rel: Option<f64>,
    /// Too few extrema or no initial kinetic energy to normalise by.
    pub degenerate: bool,
    pub photons: f64,
    pub g2: Option<f64>,
    pub p_e: f64,
    pub gamma: Option<f64>,
    pub delta0: Option<f64>,
    /// Midpoint times and `Ē_rel` values.
    pub curve: Option<(Vec<f64>, Vec<f64>)>,
    pub error: Option<String>,
}

fn failed(index: usize, momenta: Vec<f64>, err: &CavityError) -> SampleOutcome {
    SampleOutcome {
        index,
        momenta,
        stable: false,
        e_kin_rel: None,
        degenerate: false,
        photons: f64::NAN,
        g2: None,
        p_e: f64::NAN,
        gamma: None,
        delta0: None,
        curve: None,
        error: Some(err.to_string()),
    }
}

/// Evolves one sample and extracts the per-sample quantities.
pub fn run_sample(params: &SystemParams, momenta: &[f64], index: usize, options: &CellOptions) -> SampleOutcome {
    match try_sample(params, momenta, index, options) {
        Ok(o) => o,
        Err(e) => {
            log::warn!("sample {index} failed: {e}");
            failed(index, momenta.to_vec(), &e)
        }
    }
}

fn try_sample(params: &SystemParams, momenta: &[f64], index: usize, options: &CellOptions) -> Result<SampleOutcome> {
    let initial = CoupledState::initial(params, momenta)?;
    let traj = evolve(&initial, params, options.t_final, &options.evolve, &mut NoRecorder)?;
    let stable = traj.completed && traj.stability.overall;
    let last = traj.len() - 1;
    let mut out = SampleOutcome {
        index,
        momenta: momenta.to_vec(),
        stable,
        e_kin_rel: None,
        degenerate: false,
        photons: traj.photons[last],
        g2: g2_from_moments(traj.photons[last], traj.photons2[last]).ok(),
        p_e: traj.inversion[last],
        gamma: None,
        delta0: None,
        curve: None,
        error: None,
    };
    if !stable {
        return Ok(out);
    }
    let smoothed = cycle_averaged_energy(&traj.times, &traj.e_kin)?;
    let rel = if smoothed.fallback || !(traj.e_kin[0] > 0.0) { None } else { relative_energy(&smoothed.values).ok() };
    match rel {
        Some(rel) => {
            out.e_kin_rel = rel.last().copied();
            if options.keep_curves {
                out.curve = Some((smoothed.times, rel));
            }
        }
        None => out.degenerate = true,
    }
    if let Some(spec_opts) = &options.spectrum {
        let steady = traj.final_state.as_ref().expect("evolve stores the final state");
        let spec = spectrum_from_state(params, steady, spec_opts)?;
        if spec.fit.converged {
            out.gamma = Some(spec.fit.gamma);
            out.delta0 = Some(spec.fit.delta0);
        }
    }
    Ok(out)
}

/// Aggregate of one scan cell over its stable samples. `None` marks an
/// average with no contributing sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanCell {
    /// Mean final `Ē_rel`, clamped at 1.
    pub e_kin_rel_final: Option<f64>,
    pub stable_fraction: f64,
    pub n_mean: Option<f64>,
    pub g2_mean: Option<f64>,
    pub p_e_mean: Option<f64>,
    pub gamma_mean: Option<f64>,
    pub delta0_mean: Option<f64>,
    pub n_stable: usize,
    pub n_samples: usize,
    pub n_failed: usize,
    pub n_degenerate: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Averages over the stable members of `samples`; the result depends only
/// on the multiset of outcomes, summed in index order.
pub fn aggregate(samples: &[SampleOutcome]) -> ScanCell {
    let mut sorted: Vec<&SampleOutcome> = samples.iter().collect();
    sorted.sort_by_key(|s| s.index);
    let stable: Vec<&SampleOutcome> = sorted.iter().copied().filter(|s| s.stable).collect();
    let e_rel = mean(stable.iter().filter_map(|s| s.e_kin_rel));
    ScanCell {
        e_kin_rel_final: e_rel.map(|v| v.min(1.0)),
        stable_fraction: stable.len() as f64 / samples.len().max(1) as f64,
        n_mean: mean(stable.iter().map(|s| s.photons)),
        g2_mean: mean(stable.iter().filter_map(|s| s.g2)),
        p_e_mean: mean(stable.iter().map(|s| s.p_e)),
        gamma_mean: mean(stable.iter().filter_map(|s| s.gamma)),
        delta0_mean: mean(stable.iter().filter_map(|s| s.delta0)),
        n_stable: stable.len(),
        n_samples: samples.len(),
        n_failed: samples.iter().filter(|s| s.error.is_some()).count(),
        n_degenerate: stable.iter().filter(|s| s.degenerate).count(),
    }
}

/// Runs `samples` ensemble members for one parameter set; sample `k` draws
/// its momenta from substream `stream_id(cell.0, cell.1, k)`.
pub fn run_cell(
    params: &SystemParams,
    sampler: &MomentumSampler,
    samples: usize,
    cell: (usize, usize),
    options: &CellOptions,
) -> Result<(ScanCell, Vec<SampleOutcome>)> {
    params.validate()?;
    let outcomes: Vec<SampleOutcome> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let momenta = sampler.draw(params.omega_r, params.n_atoms, stream_id(cell.0, cell.1, k));
            run_sample(params, &momenta, k, options)
        })
        .collect();
    Ok((aggregate(&outcomes), outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub grid: ScanGrid,
    /// Row-major over `(axis1, axis2)`.
    pub cells: Vec<ScanCell>,
}

impl ScanResult {
    pub fn cell(&self, i: usize, j: usize) -> &ScanCell {
        &self.cells[i * self.grid.axis2.values.len() + j]
    }
}

/// Runs every cell of the grid. Work is distributed over samples of all
/// cells; results are collected by index so scheduling cannot change them.
pub fn run_scan(grid: &ScanGrid, sampler: &MomentumSampler, options: &CellOptions) -> Result<ScanResult> {
    grid.validate()?;
    let sampler = MomentumSampler { seed: grid.seed, ..sampler.clone() };
    let cells: Vec<(usize, usize)> = grid.cells().collect();
    let per = grid.samples_per_point;
    let outcomes: Vec<SampleOutcome> = (0..cells.len() * per)
        .into_par_iter()
        .map(|w| {
            let (i, j) = cells[w / per];
            let k = w % per;
            let params = grid.params_at(i, j);
            let momenta = sampler.draw(params.omega_r, params.n_atoms, stream_id(i, j, k));
            run_sample(&params, &momenta, k, options)
        })
        .collect();
    let cells = outcomes.chunks(per).map(aggregate).collect();
    Ok(ScanResult { grid: grid.clone(), cells })
}

/// Ensemble-averaged `Ē_rel(t)` for the collective and independent models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub times: Vec<f64>,
    pub collective: Vec<Option<f64>>,
    pub independent: Vec<Option<f64>>,
    pub n_stable_collective: usize,
    pub n_stable_independent: usize,
    pub samples: usize,
}

impl ComparisonResult {
    pub fn final_values(&self) -> (Option<f64>, Option<f64>) {
        (self.collective.last().copied().flatten(), self.independent.last().copied().flatten())
    }
}

/// Piecewise-linear interpolation, constant beyond the end points.
fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}

fn average_curves(outcomes: &[SampleOutcome], times: &[f64]) -> (Vec<Option<f64>>, usize) {
    let curves: Vec<&(Vec<f64>, Vec<f64>)> = outcomes.iter().filter(|o| o.stable).filter_map(|o| o.curve.as_ref()).collect();
    let n = outcomes.iter().filter(|o| o.stable).count();
    let avg = times
        .iter()
        .map(|&t| mean(curves.iter().map(|(xs, ys)| interpolate(xs, ys, t))))
        .collect();
    (avg, n)
}

/// Runs the same sampled initial momenta with and without dipole-dipole
/// couplings and averages each mode's `Ē_rel(t)` over its stable members on
/// `n_points` uniform times in `[0, t_final]`.
pub fn long_time_comparison(
    params: &SystemParams,
    sampler: &MomentumSampler,
    samples: usize,
    n_points: usize,
    options: &CellOptions,
) -> Result<ComparisonResult> {
    params.validate()?;
    let opts = CellOptions { keep_curves: true, ..options.clone() };
    let collective = SystemParams { independent_atoms: false, ..params.clone() };
    let independent = SystemParams { independent_atoms: true, ..params.clone() };
    let runs: Vec<SampleOutcome> = (0..2 * samples)
        .into_par_iter()
        .map(|w| {
            let (p, k) = if w < samples { (&collective, w) } else { (&independent, w - samples) };
            let momenta = sampler.draw(p.omega_r, p.n_atoms, stream_id(0, 0, k));
            run_sample(p, &momenta, k, &opts)
        })
        .collect();
    let times: Vec<f64> = (0..n_points).map(|k| opts.t_final * k as f64 / (n_points.max(2) - 1) as f64).collect();
    let (c, nc) = average_curves(&runs[..samples], &times);
    let (i, ni) = average_curves(&runs[samples..], &times);
    Ok(ComparisonResult {
        times,
        collective: c,
        independent: i,
        n_stable_collective: nc,
        n_stable_independent: ni,
        samples,
    })
}

/// Steady-state observables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteadyObservables {
    pub n: f64,
    pub g2: Option<f64>,
    pub p_e: f64,
}

impl SteadyObservables {
    pub fn of(state: &QuantumState) -> Self {
        Self { n: photon_number(state), g2: g2_zero(state).ok(), p_e: inversion(state) }
    }
}

/// Solves `L[ρ] = 0` at fixed positions by direct linear algebra on the
/// excitation-number-diagonal block, independently of the time integrator.
pub fn steady_state_oracle(params: &SystemParams, positions: &[f64]) -> Result<QuantumState> {
    params.validate()?;
    if positions.len() != params.n_atoms {
        return Err(CavityError::LayoutMismatch("one position per atom required".into()));
    }
    let layout = params.layout()?;
    let d = layout.total_dim();
    let cp = &params.coupling;
    let couplings = build_coupling_matrices(cp, positions, params.independent_atoms)?;
    let a = field_annihilation(&layout).into_matrix();
    let ad = a.adjoint();
    let sm: Vec<DMatrix<C64>> = (0..params.n_atoms).map(|i| atom_lowering(&layout, i).map(|o| o.into_matrix())).collect::<Result<_>>()?;
    let sp: Vec<DMatrix<C64>> = sm.iter().map(|m| m.adjoint()).collect();
    let re = |v: f64| C64::new(v, 0.0);

    let mut h = (&ad * &a) * re(params.delta);
    for i in 0..params.n_atoms {
        let g = mode_amplitude(cp, positions[i]);
        h += (&a * &sp[i] + &ad * &sm[i]) * re(g);
        for j in 0..params.n_atoms {
            if i != j {
                h += (&sp[i] * &sm[j]) * re(couplings.omega[(i, j)]);
            }
        }
    }
    let id = DMatrix::<C64>::identity(d, d);
    let i_unit = C64::new(0.0, 1.0);
    // dρ/dt = Σ A ρ B
    let mut terms: Vec<(DMatrix<C64>, DMatrix<C64>)> = vec![(&h * (-i_unit), id.clone()), (id.clone(), &h * i_unit)];
    let anti = |m: DMatrix<C64>, terms: &mut Vec<(DMatrix<C64>, DMatrix<C64>)>| {
        terms.push((&m * re(-0.5), id.clone()));
        terms.push((id.clone(), &m * re(-0.5)));
    };
    for i in 0..params.n_atoms {
        terms.push((&sp[i] * re(params.pump_rate), sm[i].clone()));
        anti(&sm[i] * &sp[i] * re(params.pump_rate), &mut terms);
        for j in 0..params.n_atoms {
            let gij = couplings.gamma[(i, j)];
            if gij != 0.0 {
                terms.push((&sm[i] * re(gij), sp[j].clone()));
                anti(&sp[i] * &sm[j] * re(gij), &mut terms);
            }
        }
    }
    terms.push((&a * re(2.0 * params.kappa), ad.clone()));
    anti(&ad * &a * re(2.0 * params.kappa), &mut terms);

    // unknowns: ρ_kl with equal total excitation number
    let pairs: Vec<(usize, usize)> = (0..d)
        .flat_map(|k| (0..d).map(move |l| (k, l)))
        .filter(|&(k, l)| layout.excitations(k) == layout.excitations(l))
        .collect();
    let mut col = vec![usize::MAX; d * d];
    for (c, &(k, l)) in pairs.iter().enumerate() {
        col[k * d + l] = c;
    }
    let n = pairs.len();
    let mut m = DMatrix::<C64>::zeros(n, n);
    for (row, &(k, l)) in pairs.iter().enumerate() {
        for (lhs, rhs) in &terms {
            for x in 0..d {
                let ak = lhs[(k, x)];
                if ak == C64::new(0.0, 0.0) {
                    continue;
                }
                for y in 0..d {
                    let b = rhs[(y, l)];
                    if b == C64::new(0.0, 0.0) {
                        continue;
                    }
                    let c = col[x * d + y];
                    if c != usize::MAX {
                        m[(row, c)] += ak * b;
                    }
                }
            }
        }
    }

    let sv = m.clone().singular_values();
    let smax = sv.max();
    let null_dim = sv.iter().filter(|&&s| s <= 1e-10 * smax).count();
    if null_dim != 1 {
        return Err(CavityError::DegenerateNullSpace { dim: null_dim });
    }
    // the diagonal equations sum to zero; replace the first by trace = 1
    let mut rhs = nalgebra::DVector::<C64>::zeros(n);
    let first_diag = pairs.iter().position(|&(k, l)| k == l).expect("diagonal present");
    for (c, &(k, l)) in pairs.iter().enumerate() {
        m[(first_diag, c)] = if k == l { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
    }
    rhs[first_diag] = C64::new(1.0, 0.0);
    let x = m.lu().solve(&rhs).ok_or_else(|| CavityError::Singular("steady-state system".into()))?;
    let mut rho = DMatrix::<C64>::zeros(d, d);
    for (c, &(k, l)) in pairs.iter().enumerate() {
        rho[(k, l)] = x[c];
    }
    let rho = (&rho + rho.adjoint()) * re(0.5);
    let tr = rho.trace();
    QuantumState::from_matrix(layout, rho / tr)
}

/// Layout helper shared with callers that only need the dimension.
pub fn oracle_unknowns(layout: &HilbertLayout) -> usize {
    let d = layout.total_dim();
    (0..d).flat_map(|k| (0..d).map(move |l| (k, l))).filter(|&(k, l)| layout.excitations(k) == layout.excitations(l)).count()
}
