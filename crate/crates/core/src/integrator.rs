//! Adaptive Dormand–Prince 5(4) integrator on a flat real state vector.
//!
//! Step-size control follows the PI controller of Hairer, Nørsett & Wanner
//! (DOPRI5). The first-same-as-last stage is reused between accepted steps.

use serde::{Deserialize, Serialize};

use crate::error::{CavityError, Result};

/// A first-order system `dy/dt = f(t, y)`.
pub trait OdeSystem {
    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: u64,
    pub rejected: u64,
    pub rhs_evals: u64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const MAX_REJECTS: u32 = 60;

pub struct Dopri5 {
    tol: Tolerances,
    n: usize,
    k: [Vec<f64>; 7],
    ytmp: Vec<f64>,
    ynew: Vec<f64>,
    h: Option<f64>,
    fsal: bool,
    facold: f64,
    stats: StepStats,
}

impl Dopri5 {
    pub fn new(n: usize, tol: Tolerances) -> Self {
        Self {
            tol,
            n,
            k: std::array::from_fn(|_| vec![0.0; n]),
            ytmp: vec![0.0; n],
            ynew: vec![0.0; n],
            h: None,
            fsal: false,
            facold: 1e-4,
            stats: StepStats::default(),
        }
    }

    pub fn stats(&self) -> StepStats {
        self.stats
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tol
    }

    /// Proposed size of the next step, once known.
    pub fn proposed_step(&self) -> Option<f64> {
        self.h
    }

    /// Forget the cached derivative, e.g. after the state was edited externally.
    pub fn invalidate(&mut self) {
        self.fsal = false;
    }

    fn error_norm(&self, y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            let e = E1 * self.k[0][i]
                + E3 * self.k[2][i]
                + E4 * self.k[3][i]
                + E5 * self.k[4][i]
                + E6 * self.k[5][i]
                + E7 * self.k[6][i];
            let sc = self.tol.atol + self.tol.rtol * y[i].abs().max(self.ynew[i].abs());
            let r = e / sc;
            acc += r * r;
        }
        (acc / self.n as f64).sqrt()
    }

    fn scaled_norm(&self, v: &[f64], y: &[f64]) -> f64 {
        let acc: f64 = v
            .iter()
            .zip(y)
            .map(|(vi, yi)| {
                let r = vi / (self.tol.atol + self.tol.rtol * yi.abs());
                r * r
            })
            .sum();
        (acc / self.n as f64).sqrt()
    }

    fn initial_step<S: OdeSystem>(&mut self, sys: &mut S, t: f64, y: &[f64], h_max: f64) -> Result<f64> {
        let d0 = self.scaled_norm(y, y);
        let d1 = self.scaled_norm(&self.k[0], y);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(h_max);
        for i in 0..self.n {
            self.ytmp[i] = y[i] + h0 * self.k[0][i];
        }
        let ytmp = std::mem::take(&mut self.ytmp);
        sys.rhs(t + h0, &ytmp, &mut self.k[1])?;
        self.ytmp = ytmp;
        self.stats.rhs_evals += 1;
        let diff: Vec<f64> = (0..self.n).map(|i| (self.k[1][i] - self.k[0][i]) / h0).collect();
        let d2 = self.scaled_norm(&diff, y);
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(h_max))
    }

    /// Performs one accepted step of size at most `h_max`, advancing `t` and `y`.
    /// Returns the size of the accepted step.
    pub fn step<S: OdeSystem>(&mut self, sys: &mut S, t: &mut f64, y: &mut [f64], h_max: f64) -> Result<f64> {
        debug_assert_eq!(y.len(), self.n);
        if !self.fsal {
            sys.rhs(*t, y, &mut self.k[0])?;
            self.stats.rhs_evals += 1;
            self.fsal = true;
        }
        let proposed = match self.h {
            Some(h) => h,
            None => self.initial_step(sys, *t, y, h_max)?,
        };
        let mut h = proposed.min(h_max);
        let clamped = h < proposed;
        let mut rejects = 0;
        loop {
            let h_floor = 1e-14 * t.abs().max(1.0);
            if !(h > h_floor) || !h.is_finite() {
                return Err(CavityError::StepUnderflow { t: *t, h });
            }
            self.stages(sys, *t, y, h)?;
            let err = self.error_norm(y);
            if !err.is_finite() {
                rejects += 1;
                self.stats.rejected += 1;
                if rejects > MAX_REJECTS {
                    return Err(CavityError::NonFinite { t: *t });
                }
                h *= FAC_MIN;
                continue;
            }
            let expo = 0.2 - BETA * 0.75;
            let fac11 = err.powf(expo);
            if err <= 1.0 {
                let fac = (fac11 / self.facold.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                let mut h_new = h / fac;
                if rejects > 0 {
                    h_new = h_new.min(h);
                }
                self.facold = err.max(1e-4);
                *t += h;
                y.copy_from_slice(&self.ynew);
                self.k.swap(0, 6);
                self.stats.accepted += 1;
                self.h = Some(if clamped { h_new.max(proposed) } else { h_new });
                return Ok(h);
            }
            rejects += 1;
            self.stats.rejected += 1;
            if rejects > MAX_REJECTS {
                return Err(CavityError::StepUnderflow { t: *t, h });
            }
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
        }
    }

    fn stages<S: OdeSystem>(&mut self, sys: &mut S, t: f64, y: &[f64], h: f64) -> Result<()> {
        let n = self.n;
        macro_rules! stage {
            ($dst:expr, $c:expr, $($a:expr => $j:expr),+) => {{
                for i in 0..n {
                    self.ytmp[i] = y[i] + h * (0.0 $(+ $a * self.k[$j][i])+);
                }
                let (ytmp, k) = (&self.ytmp, &mut self.k);
                sys.rhs(t + $c * h, ytmp, &mut k[$dst])?;
                self.stats.rhs_evals += 1;
            }};
        }
        stage!(1, C2, A21 => 0);
        stage!(2, C3, A31 => 0, A32 => 1);
        stage!(3, C4, A41 => 0, A42 => 1, A43 => 2);
        stage!(4, C5, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
        stage!(5, 1.0, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
        for i in 0..n {
            self.ynew[i] = y[i]
                + h * (A71 * self.k[0][i]
                    + A73 * self.k[2][i]
                    + A74 * self.k[3][i]
                    + A75 * self.k[4][i]
                    + A76 * self.k[5][i]);
        }
        let (ynew, k) = (&self.ynew, &mut self.k);
        sys.rhs(t + h, ynew, &mut k[6])?;
        self.stats.rhs_evals += 1;
        Ok(())
    }

    /// Integrates up to exactly `t_end`, never stepping beyond it.
    pub fn advance_to<S: OdeSystem>(&mut self, sys: &mut S, t: &mut f64, y: &mut [f64], t_end: f64) -> Result<()> {
        while *t < t_end {
            let remaining = t_end - *t;
            if remaining <= 1e-13 * t_end.abs().max(1.0) {
                *t = t_end;
                break;
            }
            let taken = self.step(sys, t, y, remaining)?;
            if taken >= remaining {
                *t = t_end;
            }
        }
        Ok(())
    }
}
