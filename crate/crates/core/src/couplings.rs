//! Position-dependent couplings: cavity mode function, vacuum-mediated
//! dipole-dipole shift `Ω_ij` and collective decay `Γ_ij`, with their spatial
//! derivatives.
//!
//! Both pair kernels are functions of `ξ = k_a·r_ij` and of the angle `Θ`
//! between the (parallel) dipoles and the separation vector.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CavityError, Result};

/// Below this `ξ` the collective decay kernel is evaluated by its Taylor series.
pub const SERIES_SWITCH: f64 = 1e-3;

/// Below this `ξ` the decay-kernel derivative is evaluated by its Taylor series.
const GRADIENT_SERIES_SWITCH: f64 = 0.05;

/// Minimum separation in units of `1/k_a` accepted by the dipole shift.
pub const R_MIN_XI: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingParams {
    /// Single-atom linewidth `Γ`.
    pub gamma: f64,
    /// Peak atom-cavity coupling `g`.
    pub g0: f64,
    /// Wavenumber of the atomic transition.
    pub k_a: f64,
    /// Wavenumber of the cavity mode.
    pub k_c: f64,
    /// Angle between dipoles and separation vector (radians).
    pub theta: f64,
}

impl Default for CouplingParams {
    fn default() -> Self {
        Self { gamma: 1.0, g0: 5.0, k_a: 1.0, k_c: 1.0, theta: PI / 2.0 }
    }
}

impl CouplingParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(CavityError::InvalidParameter { name, reason: format!("must be > 0, got {v}") })
            }
        };
        positive("gamma", self.gamma)?;
        positive("k_a", self.k_a)?;
        positive("k_c", self.k_c)?;
        if !(self.g0.is_finite() && self.g0 >= 0.0) {
            return Err(CavityError::InvalidParameter {
                name: "g0",
                reason: format!("must be >= 0, got {}", self.g0),
            });
        }
        if !self.theta.is_finite() {
            return Err(CavityError::InvalidParameter { name: "theta", reason: "not finite".into() });
        }
        Ok(())
    }

    /// Cavity wavelength `λ_c = 2π/k_c`.
    pub fn wavelength(&self) -> f64 {
        2.0 * PI / self.k_c
    }

    pub fn r_min(&self) -> f64 {
        R_MIN_XI / self.k_a
    }

    fn angular(&self) -> (f64, f64) {
        let c2 = self.theta.cos().powi(2);
        (1.0 - c2, 1.0 - 3.0 * c2)
    }
}

/// `g(r) = g0·cos(k_c r)`.
pub fn mode_amplitude(p: &CouplingParams, r: f64) -> f64 {
    p.g0 * (p.k_c * r).cos()
}

/// `dg/dr = −g0·k_c·sin(k_c r)`.
pub fn mode_amplitude_gradient(p: &CouplingParams, r: f64) -> f64 {
    -p.g0 * p.k_c * (p.k_c * r).sin()
}

fn check_separation(p: &CouplingParams, r: f64, pair: Option<(usize, usize)>) -> Result<()> {
    let r_min = p.r_min();
    if !(r > r_min) {
        return Err(CavityError::NearField { pair, separation: r, r_min });
    }
    Ok(())
}

/// Bracket of the dipole shift, `Ω = −(3Γ/4)·f(ξ)`.
fn shift_kernel(a: f64, b: f64, xi: f64) -> f64 {
    let (s, c) = xi.sin_cos();
    a * c / xi - b * (s / (xi * xi) + c / (xi * xi * xi))
}

fn shift_kernel_derivative(a: f64, b: f64, xi: f64) -> f64 {
    let (s, c) = xi.sin_cos();
    let x2 = xi * xi;
    let x3 = x2 * xi;
    let x4 = x3 * xi;
    a * (-s / xi - c / x2) - b * (c / x2 - 3.0 * s / x3 - 3.0 * c / x4)
}

/// Bracket of the collective decay, `Γ_ij = (3Γ/2)·h(ξ)`.
fn decay_kernel(a: f64, b: f64, xi: f64) -> f64 {
    if xi < SERIES_SWITCH {
        // sin ξ/ξ and cos ξ/ξ² − sin ξ/ξ³ expanded to O(ξ⁸)
        let x2 = xi * xi;
        let sinc = 1.0 - x2 / 6.0 + x2 * x2 / 120.0 - x2 * x2 * x2 / 5040.0;
        let rest = -1.0 / 3.0 + x2 / 30.0 - x2 * x2 / 840.0 + x2 * x2 * x2 / 45360.0;
        return a * sinc + b * rest;
    }
    let (s, c) = xi.sin_cos();
    a * s / xi + b * (c / (xi * xi) - s / (xi * xi * xi))
}

fn decay_kernel_derivative(a: f64, b: f64, xi: f64) -> f64 {
    if xi < GRADIENT_SERIES_SWITCH {
        let x2 = xi * xi;
        let dsinc = xi * (-1.0 / 3.0 + x2 / 30.0 - x2 * x2 / 840.0 + x2 * x2 * x2 / 45360.0);
        let drest = xi
            * (1.0 / 15.0 - x2 / 210.0 + x2 * x2 / 7560.0 - x2 * x2 * x2 / 498960.0);
        return a * dsinc + b * drest;
    }
    let (s, c) = xi.sin_cos();
    let x2 = xi * xi;
    let x3 = x2 * xi;
    let x4 = x3 * xi;
    a * (c / xi - s / x2) + b * (-s / x2 - 3.0 * c / x3 + 3.0 * s / x4)
}

/// Coherent dipole-dipole exchange rate `Ω_ij` at separation `r`.
pub fn dipole_shift(p: &CouplingParams, r: f64) -> Result<f64> {
    check_separation(p, r, None)?;
    let (a, b) = p.angular();
    Ok(-0.75 * p.gamma * shift_kernel(a, b, p.k_a * r))
}

/// `dΩ/dr` at separation `r`.
pub fn dipole_shift_gradient(p: &CouplingParams, r: f64) -> Result<f64> {
    check_separation(p, r, None)?;
    let (a, b) = p.angular();
    Ok(-0.75 * p.gamma * p.k_a * shift_kernel_derivative(a, b, p.k_a * r))
}

/// Collective decay rate `Γ_ij` at separation `r ≥ 0`; equals `Γ` at `r = 0`.
pub fn collective_decay(p: &CouplingParams, r: f64) -> f64 {
    let (a, b) = p.angular();
    1.5 * p.gamma * decay_kernel(a, b, p.k_a * r.abs())
}

/// `dΓ_ij/dr` at separation `r ≥ 0`.
pub fn collective_decay_gradient(p: &CouplingParams, r: f64) -> f64 {
    let (a, b) = p.angular();
    1.5 * p.gamma * p.k_a * decay_kernel_derivative(a, b, p.k_a * r.abs())
}

/// Pairwise coupling matrices for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingMatrices {
    /// `Ω_ij`, zero diagonal.
    pub omega: DMatrix<f64>,
    /// `Γ_ij`, diagonal equal to `Γ`.
    pub gamma: DMatrix<f64>,
}

/// Assembles `Ω` and `Γ` over all pairs. In independent-atom mode the
/// off-diagonal couplings are switched off.
pub fn build_coupling_matrices(
    p: &CouplingParams,
    positions: &[f64],
    independent: bool,
) -> Result<CouplingMatrices> {
    let n = positions.len();
    let mut omega = DMatrix::zeros(n, n);
    let mut gamma = DMatrix::from_diagonal_element(n, n, p.gamma);
    if independent {
        return Ok(CouplingMatrices { omega, gamma });
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let r = (positions[i] - positions[j]).abs();
            check_separation(p, r, Some((i, j)))?;
            let w = dipole_shift(p, r)?;
            let g = collective_decay(p, r);
            omega[(i, j)] = w;
            omega[(j, i)] = w;
            gamma[(i, j)] = g;
            gamma[(j, i)] = g;
        }
    }
    Ok(CouplingMatrices { omega, gamma })
}

/// Separation between atoms `i` and `j` together with the sign of `∂r_ij/∂r_i`.
pub(crate) fn separation(positions: &[f64], i: usize, j: usize) -> (f64, f64) {
    let d = positions[i] - positions[j];
    (d.abs(), if d >= 0.0 { 1.0 } else { -1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn perp() -> CouplingParams {
        CouplingParams::default()
    }

    fn parallel() -> CouplingParams {
        CouplingParams { theta: 0.0, ..CouplingParams::default() }
    }

    #[test]
    fn mode_function_nodes_and_antinodes() {
        let p = perp();
        let lc = p.wavelength();
        assert_abs_diff_eq!(mode_amplitude(&p, 0.0), 5.0);
        assert_abs_diff_eq!(mode_amplitude(&p, lc / 4.0), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(mode_amplitude(&p, lc / 2.0), -5.0, epsilon = 1e-14);
    }

    #[test]
    fn dipole_shift_reference_values() {
        // oracle: the kernel written out for the two geometries
        let perp_pi = 0.75 * (1.0 / PI - 1.0 / PI.powi(3));
        assert_relative_eq!(dipole_shift(&perp(), PI).unwrap(), perp_pi, max_relative = 1e-13);
        assert_abs_diff_eq!(perp_pi, 0.2145, epsilon = 1e-4);
        let par_pi = 1.5 / PI.powi(3);
        assert_relative_eq!(dipole_shift(&parallel(), PI).unwrap(), par_pi, max_relative = 1e-13);
        assert!(dipole_shift(&perp(), 1e4).unwrap().abs() < 1e-3);
    }

    #[test]
    fn dipole_shift_rejects_overlap() {
        let p = perp();
        assert!(matches!(dipole_shift(&p, 1e-4), Err(CavityError::NearField { .. })));
        assert!(dipole_shift(&p, 0.0).is_err());
        assert!(dipole_shift_gradient(&p, 5e-4).is_err());
    }

    #[test]
    fn collective_decay_reference_values() {
        let p = perp();
        assert_abs_diff_eq!(collective_decay(&p, 0.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(collective_decay(&parallel(), 1e-9), 1.0, epsilon = 1e-12);
        assert_relative_eq!(collective_decay(&p, PI), -1.5 / (PI * PI), max_relative = 1e-13);
        assert_relative_eq!(collective_decay(&p, 2.0 * PI), 1.5 / (4.0 * PI * PI), max_relative = 1e-12);
    }

    #[test]
    fn series_matches_closed_form_at_switchover() {
        for theta in [0.0, 0.4, 1.0, PI / 2.0] {
            let (a, b) = CouplingParams { theta, ..perp() }.angular();
            let xi = SERIES_SWITCH;
            let series = {
                let x2 = xi * xi;
                a * (1.0 - x2 / 6.0 + x2 * x2 / 120.0) + b * (-1.0 / 3.0 + x2 / 30.0 - x2 * x2 / 840.0)
            };
            let (s, c) = xi.sin_cos();
            let closed = a * s / xi + b * (c / (xi * xi) - s / (xi * xi * xi));
            assert_abs_diff_eq!(1.5 * series, 1.5 * closed, epsilon = 1e-9);
            assert_abs_diff_eq!(decay_kernel(a, b, xi * (1.0 - 1e-12)), closed, epsilon = 1e-9);
        }
    }

    fn centered(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn shift_gradient_matches_finite_difference() {
        let h = 1e-6;
        for p in [perp(), parallel(), CouplingParams { theta: 0.7, ..perp() }] {
            for r in [0.3, 1.0, PI, 2.0 * PI, 7.3] {
                let fd = centered(|x| dipole_shift(&p, x).unwrap(), r, h);
                let an = dipole_shift_gradient(&p, r).unwrap();
                assert_relative_eq!(an, fd, max_relative = 1e-6);
            }
        }
        assert!(dipole_shift_gradient(&perp(), 1e4).unwrap().abs() < 1e-3);
    }

    #[test]
    fn shift_gradient_vanishes_at_extremum() {
        // bracket a sign change of dΩ/dr and bisect on the analytic derivative
        let p = perp();
        let d = |r: f64| dipole_shift_gradient(&p, r).unwrap();
        let (mut lo, mut hi) = (5.0, 7.0);
        assert!(d(lo).signum() != d(hi).signum());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d(mid).signum() == d(lo).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r_ext = 0.5 * (lo + hi);
        assert!(d(r_ext).abs() < 1e-8);
        // it is an extremum of Ω: neighbours lie on the same side
        let w = dipole_shift(&p, r_ext).unwrap();
        let left = dipole_shift(&p, r_ext - 1e-3).unwrap();
        let right = dipole_shift(&p, r_ext + 1e-3).unwrap();
        assert_eq!((left - w).signum(), (right - w).signum());
    }

    #[test]
    fn decay_gradient_matches_finite_difference() {
        // the closed form loses digits near ξ ~ 1e-2, so use a wider stencil there
        for theta in [0.0, 0.9, PI / 2.0] {
            let p = CouplingParams { theta, ..perp() };
            for (r, h, eps) in [(0.01, 1e-3, 1e-6), (0.04, 1e-3, 1e-6), (0.06, 1e-4, 1e-7)] {
                let fd = centered(|x| collective_decay(&p, x), r, h);
                assert_abs_diff_eq!(collective_decay_gradient(&p, r), fd, epsilon = eps);
            }
            for r in [0.5, PI, 9.0] {
                let fd = centered(|x| collective_decay(&p, x), r, 1e-6);
                assert_abs_diff_eq!(collective_decay_gradient(&p, r), fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn matrices_for_three_atoms_at_antinodes() {
        let p = perp();
        let lc = p.wavelength();
        let m = build_coupling_matrices(&p, &[0.0, lc / 2.0, lc], false).unwrap();
        let w_pi = 0.75 * (1.0 / PI - 1.0 / PI.powi(3));
        // ξ = 2π: cos = 1, sin = 0
        let w_2pi = -0.75 * (1.0 / (2.0 * PI) - 1.0 / (2.0 * PI).powi(3));
        assert_relative_eq!(m.omega[(0, 1)], w_pi, max_relative = 1e-12);
        assert_relative_eq!(m.omega[(1, 2)], w_pi, max_relative = 1e-12);
        assert_relative_eq!(m.omega[(0, 2)], w_2pi, max_relative = 1e-12);
        assert_eq!(m.omega, m.omega.transpose());
        assert_eq!(m.gamma, m.gamma.transpose());
        for i in 0..3 {
            assert_eq!(m.gamma[(i, i)], 1.0);
            assert_eq!(m.omega[(i, i)], 0.0);
            for j in 0..3 {
                assert!(m.gamma[(i, j)].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn independent_and_single_atom_matrices() {
        let p = perp();
        let m = build_coupling_matrices(&p, &[0.0, 0.5, 1.0], true).unwrap();
        assert_eq!(m.omega, DMatrix::zeros(3, 3));
        assert_eq!(m.gamma, DMatrix::identity(3, 3));
        let one = build_coupling_matrices(&p, &[0.2], false).unwrap();
        assert_eq!(one.gamma[(0, 0)], 1.0);
        assert_eq!(one.omega[(0, 0)], 0.0);
    }

    #[test]
    fn near_field_error_names_pair() {
        let err = build_coupling_matrices(&perp(), &[0.0, 3.0, 3.0 + 1e-5], false).unwrap_err();
        match err {
            CavityError::NearField { pair, .. } => assert_eq!(pair, Some((1, 2))),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn validation() {
        assert!(perp().validate().is_ok());
        assert!(CouplingParams { gamma: 0.0, ..perp() }.validate().is_err());
        assert!(CouplingParams { g0: -1.0, ..perp() }.validate().is_err());
        assert!(CouplingParams { k_c: f64::NAN, ..perp() }.validate().is_err());
    }
}
