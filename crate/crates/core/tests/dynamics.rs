use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use cavlase_core::couplings::collective_decay;
use cavlase_core::dynamics::{
    evolve, force, hamiltonian, liouvillian_apply, step, CoupledState, EvolveOptions, MotionMode, MotionState,
    NoRecorder, Snapshot, SystemParams,
};
use cavlase_core::integrator::Tolerances;
use cavlase_core::liouvillian::GeneratorTerms;
use cavlase_core::operators::{atom_lowering, expectation, field_annihilation, DenseOperator, QuantumState, C64};
use nalgebra::DMatrix;

const TRAPPED: [f64; 3] = [1.00, -0.73, 1.18];

fn small(n_atoms: usize, fock_cutoff: usize) -> SystemParams {
    SystemParams { n_atoms, fock_cutoff, ..SystemParams::default() }
}

fn basis(params: &SystemParams, excited: &[bool], photons: usize) -> QuantumState {
    let layout = params.layout().unwrap();
    let k = layout.index(excited, photons).unwrap();
    QuantumState::basis(layout, k).unwrap()
}

fn expect(state: &QuantumState, m: DMatrix<C64>) -> C64 {
    expectation(state, &DenseOperator::new(state.layout().clone(), m).unwrap()).unwrap()
}

fn rate(params: &SystemParams, positions: &[f64], state: &QuantumState, terms: GeneratorTerms, op: &DMatrix<C64>) -> C64 {
    let drho = liouvillian_apply(params, positions, state, terms).unwrap();
    (op * drho).trace()
}

#[test]
fn hamiltonian_without_couplings_is_field_energy() {
    let mut params = SystemParams { independent_atoms: true, ..small(2, 3) };
    params.coupling.g0 = 0.0;
    let h = hamiltonian(&params, &[0.3, 2.0]).unwrap();
    let layout = params.layout().unwrap();
    let m = h.matrix();
    for k in 0..layout.total_dim() {
        for l in 0..layout.total_dim() {
            let expected = if k == l { params.delta * layout.photons(k) as f64 } else { 0.0 };
            assert_abs_diff_eq!(m[(k, l)].re, expected, epsilon = 1e-12);
            assert_eq!(m[(k, l)].im, 0.0);
        }
    }
}

#[test]
fn hamiltonian_at_nodes_has_no_cavity_coupling() {
    let params = small(2, 2);
    let lambda = params.wavelength();
    let h = hamiltonian(&params, &[lambda / 4.0, 3.0 * lambda / 4.0]).unwrap();
    let layout = params.layout().unwrap();
    for k in 0..layout.total_dim() {
        for l in 0..layout.total_dim() {
            if layout.photons(k) != layout.photons(l) {
                assert!(h.matrix()[(k, l)].norm() < 1e-14);
            }
        }
    }
    assert!(h.is_hermitian(1e-12));
}

#[test]
fn exchange_element_at_half_wavelength_separation() {
    let params = small(2, 1);
    let h = hamiltonian(&params, &[0.0, PI]).unwrap();
    let layout = params.layout().unwrap();
    let eg = layout.index(&[true, false], 0).unwrap();
    let ge = layout.index(&[false, true], 0).unwrap();
    // 0.75·(1/π − 1/π³)
    assert_abs_diff_eq!(h.matrix()[(eg, ge)].re, 0.2145, epsilon = 5e-5);
    assert_abs_diff_eq!(h.matrix()[(eg, ge)].re, 0.75 * (1.0 / PI - 1.0 / PI.powi(3)), epsilon = 1e-14);
    assert!(h.is_hermitian(1e-12));
}

#[test]
fn pump_rate_from_ground_state() {
    let mut params = SystemParams { pump_rate: 3.5, ..small(1, 1) };
    params.coupling.g0 = 0.0;
    let state = basis(&params, &[false], 0);
    let s = atom_lowering(state.layout(), 0).unwrap().into_matrix();
    let pop = s.adjoint() * &s;
    let terms = GeneratorTerms { pump: true, cavity_loss: false, atomic_decay: false };
    assert_abs_diff_eq!(rate(&params, &[0.0], &state, terms, &pop).re, 3.5, epsilon = 1e-12);
}

#[test]
fn cavity_loss_rate_of_one_photon() {
    let mut params = SystemParams { kappa: 2.5, ..small(1, 2) };
    params.coupling.g0 = 0.0;
    let state = basis(&params, &[false], 1);
    let a = field_annihilation(state.layout()).into_matrix();
    let n = a.adjoint() * &a;
    let terms = GeneratorTerms { pump: false, cavity_loss: true, atomic_decay: false };
    assert_abs_diff_eq!(rate(&params, &[0.0], &state, terms, &n).re, -5.0, epsilon = 1e-12);
}

#[test]
fn symmetric_dicke_state_decays_superradiantly() {
    let mut params = small(2, 1);
    params.coupling.g0 = 0.0;
    let layout = params.layout().unwrap();
    let d = layout.total_dim();
    let mut psi = vec![C64::new(0.0, 0.0); d];
    let amp = C64::new(0.5f64.sqrt(), 0.0);
    psi[layout.index(&[true, false], 0).unwrap()] = amp;
    psi[layout.index(&[false, true], 0).unwrap()] = amp;
    let state = QuantumState::pure(layout.clone(), &psi).unwrap();
    let r = 2e-3;
    let s1 = atom_lowering(&layout, 0).unwrap().into_matrix();
    let s2 = atom_lowering(&layout, 1).unwrap().into_matrix();
    let excited = s1.adjoint() * &s1 + s2.adjoint() * &s2;
    let terms = GeneratorTerms { pump: false, cavity_loss: false, atomic_decay: true };
    let expected = -(1.0 + collective_decay(&params.coupling, r));
    assert_abs_diff_eq!(rate(&params, &[0.0, r], &state, terms, &excited).re, expected, epsilon = 1e-12);
    assert_abs_diff_eq!(expected, -2.0, epsilon = 1e-5);
}

#[test]
fn generator_is_trace_free() {
    let params = small(3, 2);
    let state = basis(&params, &[true, false, true], 1);
    let drho = liouvillian_apply(&params, &[0.2, 3.3, 6.0], &state, GeneratorTerms::default()).unwrap();
    assert!(drho.trace().norm() < 1e-10);
}

#[test]
fn force_examples() {
    let params = small(1, 2);
    let layout = params.layout().unwrap();
    let d = layout.total_dim();
    // Coherent superposition with ⟨aσ⁺ + a†σ⁻⟩ ≠ 0.
    let mut psi = vec![C64::new(0.0, 0.0); d];
    psi[layout.index(&[true], 0).unwrap()] = C64::new(0.6, 0.0);
    psi[layout.index(&[false], 1).unwrap()] = C64::new(0.8, 0.0);
    let state = QuantumState::pure(layout.clone(), &psi).unwrap();
    let a = field_annihilation(&layout).into_matrix();
    let s = atom_lowering(&layout, 0).unwrap().into_matrix();
    let x = expect(&state, &a * s.adjoint() + a.adjoint() * &s).re;
    assert_abs_diff_eq!(x, 0.96, epsilon = 1e-12);

    assert_abs_diff_eq!(force(&params, &[0.0], &state).unwrap()[0], 0.0, epsilon = 1e-14);
    let r = params.wavelength() / 8.0;
    let f = force(&params, &[r], &state).unwrap()[0];
    assert_abs_diff_eq!(f, params.coupling.g0 * params.coupling.k_c / 2f64.sqrt() * x, epsilon = 1e-12);
}

#[test]
fn pair_forces_cancel_on_mirror_configuration() {
    let mut params = small(2, 1);
    params.coupling.g0 = 0.0;
    let layout = params.layout().unwrap();
    let mut psi = vec![C64::new(0.0, 0.0); layout.total_dim()];
    psi[layout.index(&[true, false], 0).unwrap()] = C64::new(0.5f64.sqrt(), 0.0);
    psi[layout.index(&[false, true], 0).unwrap()] = C64::new(0.5f64.sqrt(), 0.0);
    let state = QuantumState::pure(layout, &psi).unwrap();
    let f = force(&params, &[-1.1, 1.1], &state).unwrap();
    assert!(f[0].abs() > 1e-3);
    assert_abs_diff_eq!(f[0] + f[1], 0.0, epsilon = 1e-15);
}

#[test]
fn free_flight_is_linear() {
    let mut params = SystemParams { pump_rate: 0.0, independent_atoms: true, ..small(3, 1) };
    params.coupling.g0 = 0.0;
    let p0 = [0.7, -1.3, 2.1];
    let initial = CoupledState::initial(&params, &p0).unwrap();
    let options = EvolveOptions {
        n_samples: 11,
        terms: GeneratorTerms { atomic_decay: false, ..GeneratorTerms::default() },
        ..EvolveOptions::default()
    };
    let traj = evolve(&initial, &params, 10.0, &options, &mut NoRecorder).unwrap();
    for (t, m) in traj.times.iter().zip(&traj.motion) {
        for i in 0..3 {
            let expected = initial.motion.positions[i] + 2.0 * params.omega_r * p0[i] * t;
            assert_abs_diff_eq!(m.positions[i], expected, epsilon = 1e-12);
            assert_eq!(m.momenta[i], p0[i]);
        }
    }
}

#[test]
fn uncoupled_system_stays_constant() {
    let mut params = SystemParams { pump_rate: 0.0, independent_atoms: true, ..small(3, 2) };
    params.coupling.g0 = 0.0;
    let initial = CoupledState::initial(&params, &[0.0; 3]).unwrap();
    let options = EvolveOptions { n_samples: 50, ..EvolveOptions::default() };
    let traj = evolve(&initial, &params, 100.0, &options, &mut NoRecorder).unwrap();
    for k in 0..traj.len() {
        assert_eq!(traj.motion[k], initial.motion);
        assert_eq!(traj.photons[k], 0.0);
        assert_eq!(traj.inversion[k], 0.0);
        assert_eq!(traj.e_kin[k], 0.0);
    }
}

#[test]
fn frozen_positions_are_bit_identical() {
    let params = small(3, 3);
    let initial = CoupledState::initial(&params, &TRAPPED).unwrap();
    let options = EvolveOptions { n_samples: 40, motion: MotionMode::Frozen, ..EvolveOptions::default() };
    let traj = evolve(&initial, &params, 20.0, &options, &mut NoRecorder).unwrap();
    for m in &traj.motion {
        assert_eq!(m.positions, initial.motion.positions);
        assert_eq!(m.momenta, initial.motion.momenta);
    }
    assert!(traj.photons.last().unwrap() > &0.01);
}

#[test]
fn closed_system_conserves_energy() {
    let params = SystemParams { pump_rate: 0.0, ..small(3, 2) };
    let layout = params.layout().unwrap();
    let quantum = QuantumState::basis(layout.clone(), layout.index(&[true, false, true], 0).unwrap()).unwrap();
    let initial = CoupledState {
        quantum,
        motion: MotionState::new(vec![0.4, 3.3, 6.9], vec![1.0, -0.7, 1.2]).unwrap(),
        time: 0.0,
    };
    let options = EvolveOptions {
        n_samples: 101,
        terms: GeneratorTerms { pump: false, cavity_loss: false, atomic_decay: false },
        ..EvolveOptions::default()
    };
    let mut energies = Vec::new();
    let mut recorder = |_t: f64, snap: &Snapshot<'_>| {
        let s = snap.state();
        let h = hamiltonian(&params, &s.motion.positions).unwrap();
        let e_field = expectation(&s.quantum, &h).unwrap().re;
        energies.push(e_field + snap.observables.e_kin);
    };
    evolve(&initial, &params, 10.0, &options, &mut recorder).unwrap();
    let e0 = energies[0];
    let worst = energies.iter().map(|e| ((e - e0) / e0).abs()).fold(0.0, f64::max);
    assert_eq!(energies.len(), 101);
    assert!(worst < 1e-5, "relative energy drift {worst:e}");
}

#[test]
fn trapped_run_invariants_and_convergence() {
    let params = SystemParams::default();
    let initial = CoupledState::initial(&params, &TRAPPED).unwrap();
    let fine = evolve(&initial, &params, 500.0, &EvolveOptions::default(), &mut NoRecorder).unwrap();
    let d = &fine.diagnostics;
    assert!(fine.stability.overall);
    assert!(d.max_trace_drift < 1e-8, "trace drift {:e}", d.max_trace_drift);
    assert!(d.max_hermiticity_defect < 1e-10, "hermiticity {:e}", d.max_hermiticity_defect);
    assert!(d.max_imag_coherence < 0.05, "Im coherence {}", d.max_imag_coherence);

    let coarse_grid = EvolveOptions { n_samples: 250, ..EvolveOptions::default() };
    let coarse = evolve(&initial, &params, 500.0, &coarse_grid, &mut NoRecorder).unwrap();
    assert!(coarse.stability.overall);

    let tight = EvolveOptions {
        tolerances: Tolerances { rtol: 0.5e-8, atol: 0.5e-10 },
        ..EvolveOptions::default()
    };
    let halved = evolve(&initial, &params, 500.0, &tight, &mut NoRecorder).unwrap();
    let a = &fine.final_state.unwrap().motion.positions;
    let b = &halved.final_state.unwrap().motion.positions;
    let lambda = params.wavelength();
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-4 * lambda, "{x} vs {y}");
    }
}

#[test]
fn single_step_advances_time_and_keeps_trace() {
    let params = SystemParams::default();
    let initial = CoupledState::initial(&params, &TRAPPED).unwrap();
    let next = step(&initial, &params, 0.01).unwrap();
    assert!(next.time > 0.0 && next.time <= 0.01);
    assert!((next.quantum.trace().re - 1.0).abs() < 1e-12);
    assert!(next.motion.positions[0] > 0.0);
}

#[test]
fn near_field_configuration_is_rejected() {
    let params = SystemParams::default();
    let state = CoupledState::initial(&params, &TRAPPED).unwrap();
    let err = force(&params, &[0.0, 1e-5, 6.0], &state.quantum).unwrap_err();
    assert!(err.to_string().contains("between atoms 0 and 1"), "{err}");
}
