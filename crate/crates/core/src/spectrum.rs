//! Emission spectrum from the first-order field correlation.
//!
//! `g¹(τ) = ⟨a†(t+τ)a(t)⟩` is obtained by evolving `ρ̄ = aρ` under the same
//! generator as `ρ`, along the positions produced by the ongoing coupled
//! evolution, and reading `trace(a†ρ̄(τ))`. The spectrum is
//! `S(ω) = 2 Re ∫₀^∞ e^{−iωτ} g¹(τ) dτ` in the atomic rotating frame.

use nalgebra::{Matrix3, Vector3};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::{evolve, CoupledState, EvolveOptions, MotionMode, NoRecorder, Propagator, SystemParams};
use crate::error::{CavityError, Result};
use crate::operators::{SparseOperator, C64};

/// Default quasi-steady-state time.
pub const T_STEADY: f64 = 500.0;

/// Minimum height of a secondary maximum relative to the primary one.
pub const SECONDARY_PEAK_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub taus: Vec<f64>,
    pub g1: Vec<C64>,
    /// `|g¹(τ_max)| > 0.01·|g¹(0)|`: the window is probably too short.
    pub truncated: bool,
}

impl CorrelationSeries {
    pub fn new(taus: Vec<f64>, g1: Vec<C64>) -> Result<Self> {
        if taus.len() != g1.len() {
            return Err(CavityError::InvalidParameter {
                name: "g1",
                reason: format!("{} delays for {} values", taus.len(), g1.len()),
            });
        }
        let truncated = match (g1.first(), g1.last()) {
            (Some(a), Some(b)) => b.norm() > 0.01 * a.norm(),
            _ => false,
        };
        Ok(Self { taus, g1, truncated })
    }

    pub fn step(&self) -> Result<f64> {
        uniform_step(&self.taus)
    }
}

fn uniform_step(taus: &[f64]) -> Result<f64> {
    if taus.len() < 2 {
        return Err(CavityError::TooFewSamples { needed: 2, got: taus.len() });
    }
    let dt = (taus[taus.len() - 1] - taus[0]) / (taus.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(CavityError::NonUniformGrid);
    }
    for (k, t) in taus.iter().enumerate() {
        if (t - (taus[0] + k as f64 * dt)).abs() > 1e-9 * dt.max(t.abs()) {
            return Err(CavityError::NonUniformGrid);
        }
    }
    Ok(dt)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    None,
    /// One-sided Hann taper `½(1 + cos(πτ/τ_max))`.
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumOptions {
    /// Time at which the quasi-steady state is taken.
    pub t_steady: f64,
    pub tau_max: f64,
    pub n_tau: usize,
    pub zero_pad: usize,
    pub window: Window,
    pub evolve: EvolveOptions,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self {
            t_steady: T_STEADY,
            tau_max: 50.0,
            n_tau: 4096,
            zero_pad: 4,
            window: Window::None,
            evolve: EvolveOptions::default(),
        }
    }
}

/// `g¹(τ)` on `n_tau` uniform delays in `[0, tau_max]`, starting from `steady`.
///
/// The coupled evolution of `ρ` and the motion continues over the window;
/// `ρ̄` follows the same positions without feeding back into the forces.
pub fn correlation(
    params: &SystemParams,
    steady: &CoupledState,
    tau_max: f64,
    n_tau: usize,
    options: &EvolveOptions,
) -> Result<CorrelationSeries> {
    if !(tau_max > 0.0) {
        return Err(CavityError::InvalidParameter { name: "tau_max", reason: format!("must be > 0, got {tau_max}") });
    }
    if n_tau < 2 {
        return Err(CavityError::TooFewSamples { needed: 2, got: n_tau });
    }
    let layout = steady.quantum.layout();
    let a = SparseOperator::field_annihilation(layout).to_dense();
    let probe = &a * steady.quantum.rho();
    let mut prop = Propagator::with_probe(params, steady, &probe, options)?;
    let t0 = steady.time;
    let mut taus = Vec::with_capacity(n_tau);
    let mut g1 = Vec::with_capacity(n_tau);
    for k in 0..n_tau {
        let tau = tau_max * k as f64 / (n_tau - 1) as f64;
        prop.advance_to(t0 + tau)?;
        taus.push(tau);
        g1.push(prop.probe_correlation().expect("probe is carried"));
    }
    let series = CorrelationSeries::new(taus, g1)?;
    if series.truncated {
        log::warn!(
            "correlation window too short: |g1(tau_max)| = {:e} vs g1(0) = {:e}",
            series.g1[n_tau - 1].norm(),
            series.g1[0].norm()
        );
    }
    let bound = series.g1[0].norm() * (1.0 + 1e-6);
    if let Some(k) = series.g1.iter().position(|g| g.norm() > bound) {
        log::warn!("|g1(tau)| exceeds g1(0) at tau = {}", series.taus[k]);
    }
    Ok(series)
}

/// Sampled spectral density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Frequencies relative to the atomic resonance, ascending.
    pub omegas: Vec<f64>,
    pub s: Vec<f64>,
}

impl Spectrum {
    /// Index of the global maximum.
    pub fn peak_index(&self) -> usize {
        self.s
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    /// `Σ S dω`.
    pub fn integral(&self) -> f64 {
        if self.omegas.len() < 2 {
            return 0.0;
        }
        let dw = self.omegas[1] - self.omegas[0];
        self.s.iter().sum::<f64>() * dw
    }
}

/// Discrete evaluation of `S(ω) = 2 Re ∫₀^{τ_max} e^{−iωτ} g¹(τ) dτ` with the
/// trapezoid rule and `zero_pad`-fold zero padding.
pub fn transform(series: &CorrelationSeries, zero_pad: usize, window: Window) -> Result<Spectrum> {
    let dt = series.step()?;
    let n = series.g1.len();
    let m = n * zero_pad.max(1);
    let tau_max = series.taus[n - 1] - series.taus[0];
    let mut buf = vec![C64::new(0.0, 0.0); m];
    for (k, g) in series.g1.iter().enumerate() {
        let taper = match window {
            Window::None => 1.0,
            Window::Hann => 0.5 * (1.0 + (std::f64::consts::PI * (series.taus[k] - series.taus[0]) / tau_max).cos()),
        };
        let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
        buf[k] = g * (w * taper * dt);
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let dw = 2.0 * std::f64::consts::PI / (m as f64 * dt);
    let half = m / 2;
    let mut omegas = Vec::with_capacity(m);
    let mut s = Vec::with_capacity(m);
    // fftshift: negative frequencies first
    for k in (half + 1..m).chain(0..=half) {
        let kk = if k > half { k as f64 - m as f64 } else { k as f64 };
        omegas.push(kk * dw);
        s.push(2.0 * buf[k].re);
    }
    Ok(Spectrum { omegas, s })
}

/// `A·(γ/2)²/((ω−δ₀)² + (γ/2)²)`.
pub fn lorentzian(omega: f64, amplitude: f64, delta0: f64, gamma: f64) -> f64 {
    let h = 0.5 * gamma;
    amplitude * h * h / ((omega - delta0).powi(2) + h * h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    pub amplitude: f64,
    pub delta0: f64,
    /// Full width at half maximum.
    pub gamma: f64,
    /// RMS residual over the fit window, relative to the peak height.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Half-maximum crossings around `peak`, linearly interpolated.
fn half_width(omegas: &[f64], s: &[f64], peak: usize, lo: usize, hi: usize) -> Option<(f64, f64)> {
    let half = 0.5 * s[peak];
    let mut left = None;
    for k in (lo..peak).rev() {
        if s[k] <= half {
            let f = (half - s[k]) / (s[k + 1] - s[k]);
            left = Some(omegas[k] + f * (omegas[k + 1] - omegas[k]));
            break;
        }
    }
    let mut right = None;
    for k in peak + 1..=hi {
        if s[k] <= half {
            let f = (s[k - 1] - half) / (s[k - 1] - s[k]);
            right = Some(omegas[k - 1] + f * (omegas[k] - omegas[k - 1]));
            break;
        }
    }
    match (left, right) {
        (Some(l), Some(r)) => Some((l, r)),
        (Some(l), None) => Some((l, 2.0 * omegas[peak] - l)),
        (None, Some(r)) => Some((2.0 * omegas[peak] - r, r)),
        (None, None) => None,
    }
}

/// Least-squares Lorentzian fit around the global maximum.
pub fn fit_lorentzian(spec: &Spectrum) -> Result<LorentzianFit> {
    let n = spec.s.len();
    if n < 3 {
        return Err(CavityError::TooFewSamples { needed: 3, got: n });
    }
    fit_lorentzian_in(spec, 0, n - 1, spec.peak_index())
}

/// Fit restricted to samples `lo..=hi`, seeded at `peak`.
pub fn fit_lorentzian_in(spec: &Spectrum, lo: usize, hi: usize, peak: usize) -> Result<LorentzianFit> {
    let (w, s) = (&spec.omegas, &spec.s);
    let height = s[peak];
    if !(height > 0.0) {
        return Err(CavityError::InvalidState("spectrum has no positive maximum".into()));
    }
    let (l, r) = half_width(w, s, peak, lo, hi).unwrap_or((w[lo], w[hi]));
    let fwhm0 = (r - l).max(w[1] - w[0]);
    let fallback = LorentzianFit {
        amplitude: height,
        delta0: w[peak],
        gamma: fwhm0,
        residual: f64::NAN,
        converged: false,
        iterations: 0,
    };
    // fit window: ±5 estimated widths, inside [lo, hi]
    let (wl, wr) = (w[peak] - 5.0 * fwhm0, w[peak] + 5.0 * fwhm0);
    let idx: Vec<usize> = (lo..=hi).filter(|&k| w[k] >= wl && w[k] <= wr).collect();
    if idx.len() < 4 {
        return Ok(fallback);
    }
    // normalised units: y = S/height, x = (ω − ω_peak)/fwhm0
    let xs: Vec<f64> = idx.iter().map(|&k| (w[k] - w[peak]) / fwhm0).collect();
    let ys: Vec<f64> = idx.iter().map(|&k| s[k] / height).collect();
    let cost = |p: &Vector3<f64>| -> f64 {
        xs.iter().zip(&ys).map(|(&x, &y)| (lorentzian(x, p[0], p[1], 2.0 * p[2]) - y).powi(2)).sum()
    };
    let mut p = Vector3::new(1.0, 0.0, 0.5);
    let mut c = cost(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..200 {
        iterations = it + 1;
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&x, &y) in xs.iter().zip(&ys) {
            let (a, d0, h) = (p[0], p[1], p[2]);
            let u = x - d0;
            let den = u * u + h * h;
            let f = a * h * h / den;
            let j = Vector3::new(h * h / den, 2.0 * a * h * h * u / (den * den), 2.0 * a * h * u * u / (den * den));
            jtj += j * j.transpose();
            jtr += j * (f - y);
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut m = jtj;
            for d in 0..3 {
                m[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(delta) = m.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = p + delta;
            let ct = cost(&trial);
            if ct.is_finite() && ct <= c && trial[2] > 0.0 {
                let small = delta.norm() <= 1e-14 * (p.norm() + 1e-14);
                let flat = c - ct <= 1e-15 * c.max(1e-300);
                p = trial;
                c = ct;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                if small || (flat && delta.norm() < 1e-10) {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no downhill step left: at a minimum to working precision
            converged = jtr.norm() < 1e-8 * (1.0 + c.sqrt());
            break;
        }
        if converged {
            break;
        }
    }
    if !converged {
        log::warn!("Lorentzian fit did not converge; using discrete peak estimates");
        return Ok(LorentzianFit { iterations, ..fallback });
    }
    Ok(LorentzianFit {
        amplitude: p[0] * height,
        delta0: w[peak] + p[1] * fwhm0,
        gamma: 2.0 * p[2].abs() * fwhm0,
        residual: (c / xs.len() as f64).sqrt(),
        converged,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondaryPeak {
    /// Position of the peak attributed to the cavity resonance.
    pub omega: f64,
    /// Offset from the cavity resonance, `ω − Δ`.
    pub delta_c: f64,
    /// Height of the cavity peak relative to the atomic one.
    pub relative_height: f64,
}

/// Two resolved maxima and which of them belongs to the atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakSplit {
    pub secondary: SecondaryPeak,
    pub atomic_index: usize,
    /// Sample range of the atomic peak, bounded by the dip towards the cavity peak.
    pub atomic_range: (usize, usize),
}

/// Looks for a second maximum above 5% of the primary, separated from it by
/// a dip. Of the two, the one nearer to `ω = Δ` is the cavity peak.
pub fn detect_second_peak(spec: &Spectrum, delta: f64) -> Option<PeakSplit> {
    let s = &spec.s;
    let w = &spec.omegas;
    let n = s.len();
    if n < 3 {
        return None;
    }
    let primary = spec.peak_index();
    let top = s[primary];
    if !(top > 0.0) {
        return None;
    }
    let mut best: Option<(usize, usize)> = None; // (index, dip index)
    for k in 1..n - 1 {
        if k == primary || !(s[k] > s[k - 1] && s[k] >= s[k + 1]) || s[k] <= SECONDARY_PEAK_THRESHOLD * top {
            continue;
        }
        let (a, b) = if k < primary { (k, primary) } else { (primary, k) };
        let dip = (a..=b).min_by(|&x, &y| s[x].total_cmp(&s[y])).unwrap();
        if s[dip] > 0.9 * s[k] {
            continue;
        }
        if best.is_none_or(|(bk, _)| s[k] > s[bk]) {
            best = Some((k, dip));
        }
    }
    let (other, dip) = best?;
    let (cavity, atomic) =
        if (w[other] - delta).abs() < (w[primary] - delta).abs() { (other, primary) } else { (primary, other) };
    let atomic_range = if atomic < dip { (0, dip) } else { (dip, n - 1) };
    Some(PeakSplit {
        secondary: SecondaryPeak { omega: w[cavity], delta_c: w[cavity] - delta, relative_height: s[cavity] / s[atomic] },
        atomic_index: atomic,
        atomic_range,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub omegas: Vec<f64>,
    pub s: Vec<f64>,
    pub fit: LorentzianFit,
    pub secondary_peak: Option<SecondaryPeak>,
    /// `g¹(0)`, equal to the photon number of the reference state.
    pub g1_zero: C64,
    pub truncated: bool,
}

/// Transform, peak-split detection and Lorentzian fit of a correlation series.
pub fn analyze(series: &CorrelationSeries, delta: f64, zero_pad: usize, window: Window) -> Result<SpectrumResult> {
    let spec = transform(series, zero_pad, window)?;
    let split = detect_second_peak(&spec, delta);
    let fit = match &split {
        Some(p) => fit_lorentzian_in(&spec, p.atomic_range.0, p.atomic_range.1, p.atomic_index)?,
        None => fit_lorentzian(&spec)?,
    };
    Ok(SpectrumResult {
        omegas: spec.omegas,
        s: spec.s,
        fit,
        secondary_peak: split.map(|p| p.secondary),
        g1_zero: series.g1.first().copied().unwrap_or_default(),
        truncated: series.truncated,
    })
}

/// Correlation and spectrum from an existing quasi-steady state.
pub fn spectrum_from_state(
    params: &SystemParams,
    steady: &CoupledState,
    options: &SpectrumOptions,
) -> Result<SpectrumResult> {
    let series = correlation(params, steady, options.tau_max, options.n_tau, &options.evolve)?;
    analyze(&series, params.delta, options.zero_pad, options.window)
}

/// Evolves from `initial` to the quasi-steady time, then computes the spectrum.
pub fn spectrum(params: &SystemParams, initial: &CoupledState, options: &SpectrumOptions) -> Result<SpectrumResult> {
    let span = options.t_steady - initial.time;
    let steady = if span > 0.0 {
        let traj = evolve(initial, params, span, &options.evolve, &mut NoRecorder)?;
        traj.final_state.expect("evolve stores the final state")
    } else {
        initial.clone()
    };
    spectrum_from_state(params, &steady, options)
}

/// Spectrum with the atoms frozen at the antinodes `0, λ_c/2, λ_c, …`.
pub fn fixed_position_spectrum(params: &SystemParams, options: &SpectrumOptions) -> Result<SpectrumResult> {
    let initial = CoupledState::initial(params, &vec![0.0; params.n_atoms])?;
    let mut opts = options.clone();
    opts.evolve.motion = MotionMode::Frozen;
    spectrum(params, &initial, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn synthetic(gamma0: f64, delta: f64, tau_max: f64, n: usize) -> CorrelationSeries {
        let taus: Vec<f64> = (0..n).map(|k| tau_max * k as f64 / (n - 1) as f64).collect();
        let g1 = taus.iter().map(|&t| C64::from_polar((-0.5 * gamma0 * t).exp(), delta * t)).collect();
        CorrelationSeries::new(taus, g1).unwrap()
    }

    #[test]
    fn exponential_correlation_gives_lorentzian() {
        // g¹ = e^{−γ₀τ/2 + iδτ}  →  S = γ₀/((ω−δ)² + γ₀²/4), peak 4/γ₀ at ω = δ
        let (g0, d) = (1.5, 3.0);
        let spec = transform(&synthetic(g0, d, 40.0 / g0, 4096), 4, Window::None).unwrap();
        let k = spec.peak_index();
        assert!((spec.omegas[k] - d).abs() <= spec.omegas[1] - spec.omegas[0]);
        let exact = 4.0 / g0;
        let peak = lorentzian(spec.omegas[k], exact, d, g0);
        assert!((spec.s[k] - peak).abs() / exact < 0.01);
        let fit = fit_lorentzian(&spec).unwrap();
        assert!(fit.converged);
        assert!((fit.gamma - g0).abs() / g0 < 0.01);
        assert!((fit.delta0 - d).abs() < 0.01);
    }

    #[test]
    fn parseval_is_exact() {
        let series = synthetic(0.7, -2.0, 30.0, 1000);
        let spec = transform(&series, 4, Window::None).unwrap();
        let total = spec.integral();
        assert_relative_eq!(total, 2.0 * std::f64::consts::PI, max_relative = 1e-10);
    }

    #[test]
    fn real_even_correlation_is_symmetric() {
        let taus: Vec<f64> = (0..2048).map(|k| k as f64 * 0.02).collect();
        let g1 = taus.iter().map(|&t| C64::new((-t * t).exp(), 0.0)).collect();
        let spec = transform(&CorrelationSeries::new(taus, g1).unwrap(), 4, Window::None).unwrap();
        let z = spec.omegas.iter().position(|&w| w == 0.0).unwrap();
        for j in 1..z {
            assert_relative_eq!(spec.omegas[z - j], -spec.omegas[z + j], max_relative = 1e-12);
            assert!((spec.s[z - j] - spec.s[z + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_and_bad_grids() {
        let taus: Vec<f64> = (0..64).map(|k| k as f64 * 0.1).collect();
        let zero = CorrelationSeries::new(taus.clone(), vec![C64::new(0.0, 0.0); 64]).unwrap();
        assert!(transform(&zero, 4, Window::None).unwrap().s.iter().all(|&v| v == 0.0));
        let mut bent = taus;
        bent[10] += 0.03;
        let s = CorrelationSeries::new(bent, vec![C64::new(1.0, 0.0); 64]).unwrap();
        assert!(matches!(transform(&s, 4, Window::None), Err(CavityError::NonUniformGrid)));
    }

    #[test]
    fn fit_recovers_exact_lorentzian() {
        let omegas: Vec<f64> = (0..4001).map(|k| -20.0 + 0.01 * k as f64).collect();
        for (a, d0, g) in [(2.5, 1.3, 2.0), (0.01, -4.0, 0.37), (1e3, 0.0, 9.0)] {
            let s = omegas.iter().map(|&w| lorentzian(w, a, d0, g)).collect();
            let fit = fit_lorentzian(&Spectrum { omegas: omegas.clone(), s }).unwrap();
            assert!(fit.converged);
            assert_relative_eq!(fit.amplitude, a, max_relative = 1e-6);
            assert_relative_eq!(fit.gamma, g, max_relative = 1e-6);
            assert!((fit.delta0 - d0).abs() <= 1e-6 * d0.abs().max(g));
        }
    }

    #[test]
    fn two_lorentzians_are_split() {
        let omegas: Vec<f64> = (0..6001).map(|k| -30.0 + 0.02 * k as f64).collect();
        let delta = 50.0;
        let s: Vec<f64> =
            omegas.iter().map(|&w| lorentzian(w, 1.0, 0.5, 3.0) + lorentzian(w, 0.3, 48.0, 6.0)).collect();
        let spec = Spectrum { omegas, s };
        let split = detect_second_peak(&spec, delta).unwrap();
        assert!((split.secondary.omega - 48.0).abs() < 0.1);
        assert!((split.secondary.delta_c + 2.0).abs() < 0.1);
        assert!(split.secondary.relative_height > 0.25 && split.secondary.relative_height < 0.35);
        assert!((spec.omegas[split.atomic_index] - 0.5).abs() < 0.05);

        let single: Vec<f64> = spec.omegas.iter().map(|&w| lorentzian(w, 1.0, 0.5, 3.0)).collect();
        assert!(detect_second_peak(&Spectrum { omegas: spec.omegas.clone(), s: single }, delta).is_none());
    }
}
