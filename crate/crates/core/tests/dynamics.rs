use num_complex::Complex64;
use proptest::prelude::*;

use ssne_core::ensemble::{estimate_ke_rate, run_ensemble, run_trajectory, EnsembleConfig, InitialState, Solver};
use ssne_core::gaussian::{self, AxisState, GaussianPropagator, GaussianState};
use ssne_core::grid::{self, branch_weights, init_cat, init_gaussian, CatState, GridSpec, QuadraticStepper, RunOptions};
use ssne_core::model::{self, Constants, MassProfile};
use ssne_core::noise::wiener_increments;
use ssne_core::{Units, Variant};

const NAT: Units = Units::natural();

#[test]
fn ssne_soliton_kinetic_energy_is_constant() {
    let cfg = EnsembleConfig::new(Variant::Ssne, Solver::Gaussian, 200, 4.0, 1e-3, 3);
    let recs = run_ensemble(&cfg).unwrap();
    let rate = estimate_ke_rate(&recs, None).unwrap();
    assert!(rate.estimate.abs() < 1e-12, "slope {}", rate.estimate);
    // Momentum variance ħ²|a|²/Re a of the stationary packet.
    let a = Variant::Ssne.soliton_width(&NAT);
    let p_var = NAT.hbar * NAT.hbar * a.norm_sqr() / a.re;
    assert!((recs[0].kinetic[0] - 0.5 * p_var).abs() < 1e-12);
}

#[test]
fn sne_kinetic_energy_has_no_slope() {
    let cfg = EnsembleConfig::new(Variant::Sne, Solver::Gaussian, 100, 2.0, 1e-3, 5);
    let recs = run_ensemble(&cfg).unwrap();
    assert_eq!(estimate_ke_rate(&recs, None).unwrap().estimate, 0.0);
}

#[test]
fn ensemble_order_matches_single_trajectories() {
    let mut cfg = EnsembleConfig::new(Variant::Gsse, Solver::Gaussian, 40, 1.0, 1e-3, 11);
    cfg.workers = Some(3);
    let all = run_ensemble(&cfg).unwrap();
    for i in [39u64, 0, 17, 5] {
        assert_eq!(run_trajectory(&cfg, i).unwrap(), all[i as usize]);
    }
    cfg.workers = Some(1);
    assert_eq!(run_ensemble(&cfg).unwrap(), all);
}

#[test]
fn large_gsse_ensemble_stays_finite() {
    let cfg = EnsembleConfig::new(Variant::Gsse, Solver::Gaussian, 1000, 5.0, 1e-3, 13);
    let recs = run_ensemble(&cfg).unwrap();
    assert_eq!(recs.len(), 1000);
    assert!(recs.iter().all(|r| r.all_finite()));
}

#[test]
fn cat_needs_grid_solver() {
    let mut cfg = EnsembleConfig::new(Variant::Gsse, Solver::Gaussian, 10, 1.0, 1e-3, 1);
    cfg.initial = InitialState::Cat(CatState::symmetric(Complex64::new(0.5, -0.5), 4.0).unwrap());
    assert!(run_ensemble(&cfg).is_err());
}

#[test]
fn gaussian_ball_self_energy() {
    // Density ∝ exp(-r²/2σ²): E_G = -G M² / (2√π σ).
    for sigma in [0.5, 1.0, 2.0] {
        let p = MassProfile::gaussian_ball(sigma, Constants::unit()).unwrap();
        let exact = -1.0 / (2.0 * std::f64::consts::PI.sqrt() * sigma);
        assert!((model::self_energy(&p) / exact - 1.0).abs() < 1e-8);
    }
}

#[test]
fn uniform_sphere_frequency_scales_with_radius() {
    for r in [0.5, 2.0] {
        let p = MassProfile::uniform_sphere(r, Constants::unit()).unwrap();
        assert!((model::omega_g(&p) - r.powf(-1.5)).abs() < 1e-9);
    }
}

#[test]
fn sne_grid_packet_keeps_its_shape_in_motion() {
    let spec = GridSpec::standard();
    let a = Variant::Sne.soliton_width(&NAT);
    let init = init_gaussian(spec, -2.0, 0.5, a, NAT.hbar).unwrap();
    let mut stepper = QuadraticStepper::new(spec, Variant::Sne, NAT, 1e-3).unwrap();
    let mut noise = wiener_increments(0, 0, 4000, 1e-3, 1).unwrap();
    noise.increments.iter_mut().for_each(|w| *w = 0.0);
    let rec = grid::simulate(&init, &mut stepper, &noise, &RunOptions { record_every: 1000, ..Default::default() }).unwrap();
    // Free drift of the centre at p̄/M.
    for (t, x) in rec.times.iter().zip(&rec.xbar) {
        assert!((x - (-2.0 + 0.5 * t)).abs() < 1e-6, "t = {t}: x̄ = {x}");
    }
    assert!(rec.dx.iter().all(|d| (d * d - 0.5).abs() < 1e-6));
}

#[test]
fn cat_weights_stay_normalized_under_collapse_noise() {
    let spec = GridSpec::standard();
    let cat = CatState::symmetric(Variant::Gsse.soliton_width(&NAT), 6.0).unwrap();
    let init = init_cat(spec, &cat, NAT.hbar).unwrap();
    let (l, r) = branch_weights(&init, &cat).unwrap();
    assert!((l - 0.5).abs() < 1e-12 && (r - 0.5).abs() < 1e-12);
    let mut stepper = QuadraticStepper::new(spec, Variant::Gsse, NAT, 1e-3).unwrap();
    let noise = wiener_increments(21, 0, 500, 1e-3, 1).unwrap();
    let opts = RunOptions { record_every: 50, cat: Some(cat), ..Default::default() };
    let rec = grid::simulate(&init, &mut stepper, &noise, &opts).unwrap();
    assert!(rec.branch_left.iter().all(|w| (0.0..=1.0).contains(w)));
    assert!(rec.all_finite());
}

#[test]
fn noise_streams_are_reproducible_and_distinct() {
    let a = wiener_increments(9, 4, 1000, 1e-2, 3).unwrap();
    assert_eq!(a, wiener_increments(9, 4, 1000, 1e-2, 3).unwrap());
    let b = wiener_increments(9, 5, 1000, 1e-2, 3).unwrap();
    let corr: f64 = a.increments.iter().zip(&b.increments).map(|(x, y)| x * y).sum::<f64>() / (3000.0 * 1e-2);
    assert!(corr.abs() < 0.1);
    let var = a.increments.iter().map(|x| x * x).sum::<f64>() / 3000.0;
    assert!((var / 1e-2 - 1.0).abs() < 0.1);
}

proptest! {
    #[test]
    fn width_step_keeps_packets_normalizable(re in 0.05f64..20.0, im in -10.0f64..10.0, dt in 1e-4f64..0.5) {
        for v in Variant::ALL {
            let prop = GaussianPropagator::new(v, NAT, dt).unwrap();
            let a = prop.advance_width(Complex64::new(re, im));
            prop_assert!(a.re > 0.0 && a.is_finite());
        }
    }

    #[test]
    fn single_step_is_deterministic(x in -3.0f64..3.0, p in -3.0f64..3.0, dw in -0.2f64..0.2) {
        let prop = GaussianPropagator::new(Variant::Gsse, NAT, 1e-2).unwrap();
        let init = AxisState { xbar: x, pbar: p, a: Complex64::new(1.0, 0.2) };
        let mut s1 = GaussianState::new(vec![init]).unwrap();
        let s2 = gaussian::step(&s1, Variant::Gsse, &NAT, 1e-2, &[dw]).unwrap();
        prop.step(&mut s1, &[dw]).unwrap();
        prop_assert_eq!(s1, s2);
    }
}
