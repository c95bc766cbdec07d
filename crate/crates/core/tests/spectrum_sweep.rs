use cavlase_core::dynamics::{evolve, CoupledState, EvolveOptions, NoRecorder, SystemParams};
use cavlase_core::io::{load_checkpoint, save_checkpoint};
use cavlase_core::observables::{kinetic_energy, photon_number};
use cavlase_core::spectrum::{analyze, correlation, transform, Window};
use cavlase_core::sweep::{aggregate, run_cell, run_sample, stream_id, CellOptions, MomentumSampler};
use cavlase_core::MotionState;

fn quasi_steady() -> (SystemParams, CoupledState) {
    let params = SystemParams::default();
    let initial = CoupledState::initial(&params, &[1.00, -0.73, 1.18]).unwrap();
    let traj = evolve(&initial, &params, 500.0, &EvolveOptions::default(), &mut NoRecorder).unwrap();
    (params, traj.final_state.unwrap())
}

#[test]
fn correlation_invariants_on_trapped_run() {
    let (params, steady) = quasi_steady();
    let options = EvolveOptions::default();
    let series = correlation(&params, &steady, 50.0, 4096, &options).unwrap();

    let n = photon_number(&steady.quantum);
    assert!((series.g1[0].re - n).abs() < 1e-10);
    assert!(series.g1[0].im.abs() < 1e-10);

    let spec = transform(&series, 4, Window::None).unwrap();
    let total = spec.integral();
    let expected = 2.0 * std::f64::consts::PI * series.g1[0].re;
    assert!(((total - expected) / expected).abs() < 0.02, "{total} vs {expected}");

    // |g1| decays on the scale of the fitted width, which lies between Γ and R + Γ.
    let result = analyze(&series, params.delta, 4, Window::None).unwrap();
    assert!(result.fit.converged);
    assert!(result.fit.gamma > 1.0 && result.fit.gamma < params.pump_rate + 1.0, "{}", result.fit.gamma);

    let long = correlation(&params, &steady, 100.0, 8192, &options).unwrap();
    let longer = analyze(&long, params.delta, 4, Window::None).unwrap();
    let change = (longer.fit.gamma - result.fit.gamma).abs() / result.fit.gamma;
    assert!(change < 0.02, "width changed by {change}");
}

#[test]
fn replay_from_checkpoint_is_bit_identical() {
    let params = SystemParams::default();
    let initial = CoupledState::initial(&params, &[1.00, -0.73, 1.18]).unwrap();
    let traj = evolve(&initial, &params, 20.0, &EvolveOptions::default(), &mut NoRecorder).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("steady.json");
    save_checkpoint(traj.final_state.as_ref().unwrap(), &path).unwrap();
    let run = || {
        let state = load_checkpoint(&path).unwrap();
        correlation(&params, &state, 5.0, 257, &EvolveOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.taus, b.taus);
    assert!(a.g1.iter().zip(&b.g1).all(|(x, y)| x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()));
}

fn short_cell() -> CellOptions {
    CellOptions {
        t_final: 30.0,
        evolve: EvolveOptions { n_samples: 300, stop_when_unstable: true, ..EvolveOptions::default() },
        ..CellOptions::default()
    }
}

#[test]
fn cells_are_reproducible_and_split_exactly() {
    let params = SystemParams { omega_r: 1.0, ..SystemParams::default() };
    let sampler = MomentumSampler { seed: 8, ..MomentumSampler::default() };
    let options = short_cell();
    let (cell, outcomes) = run_cell(&params, &sampler, 4, (2, 3), &options).unwrap();
    let (again, _) = run_cell(&params, &sampler, 4, (2, 3), &options).unwrap();
    assert_eq!(cell, again);

    let half = |range: std::ops::Range<usize>| -> Vec<_> {
        range
            .map(|k| run_sample(&params, &sampler.draw(params.omega_r, 3, stream_id(2, 3, k)), k, &options))
            .collect()
    };
    let mut merged = half(2..4);
    merged.extend(half(0..2));
    assert_eq!(aggregate(&merged), cell);
    assert_eq!(merged.iter().find(|o| o.index == 1).unwrap(), &outcomes[1]);
}

#[test]
fn sampled_kinetic_energy_is_independent_of_recoil_frequency() {
    let sampler = MomentumSampler { seed: 21, ..MomentumSampler::default() };
    let n = 10_000;
    let target = sampler.p_bar0_ref.powi(2) * sampler.omega_r_ref;
    for omega_r in [0.1, 1.0, 4.0] {
        let params = SystemParams { omega_r, n_atoms: 1, ..SystemParams::default() };
        let mean: f64 = (0..n)
            .map(|k| {
                let p = sampler.draw(omega_r, 1, stream_id(0, 0, k));
                kinetic_energy(&MotionState::new(vec![0.0], p).unwrap(), &params)
            })
            .sum::<f64>()
            / n as f64;
        // E = ω_r p² has standard deviation √2·target for Gaussian p.
        let band = 3.0 * 2f64.sqrt() * target / (n as f64).sqrt();
        assert!((mean - target).abs() < band, "ω_r = {omega_r}: {mean} vs {target} ± {band}");
    }
}
