//! Exact Gaussian-state propagation of the quadratic dynamics.
//!
//! A state `Ψ ∝ exp(-a (x - x̄)² + i p̄ x / ħ)` stays Gaussian under every
//! variant. Writing `d ln Ψ` with the Ito rule gives, per axis,
//!
//! ```text
//! da = (β - α a²) dt,                      α = 2iħ/M, β = κ + λ²/2
//! dx̄ = p̄/M dt + Re λ / (2 Re a) dW
//! dp̄ = ħ (Im λ - Re λ · Im a / Re a) dW
//! ```
//!
//! The width flow is a deterministic Riccati equation and is advanced in
//! closed form; the means take an Euler–Maruyama step with the width at the
//! start of the step.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::NoisePath;
use crate::record::TrajectoryRecord;
use crate::variant::{Units, Variant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("width parameter lost normalizability (a = {a}); time step too large")]
    Instability { a: Complex64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Moments of one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisState {
    pub xbar: f64,
    pub pbar: f64,
    pub a: Complex64,
}

impl AxisState {
    pub fn position_variance(&self) -> f64 {
        0.25 / self.a.re
    }

    pub fn momentum_variance(&self, hbar: f64) -> f64 {
        hbar * hbar * self.a.norm_sqr() / self.a.re
    }

    /// Symmetrized covariance `⟨x̂p̂ + p̂x̂⟩/2 - x̄p̄`.
    pub fn cov_xp(&self, hbar: f64) -> f64 {
        -hbar * self.a.im / (2.0 * self.a.re)
    }

    pub fn kinetic_energy(&self, u: &Units) -> f64 {
        (self.pbar * self.pbar + self.momentum_variance(u.hbar)) / (2.0 * u.mass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub axes: Vec<AxisState>,
}

impl GaussianState {
    pub fn new(axes: Vec<AxisState>) -> Result<Self, GaussianError> {
        if axes.is_empty() {
            return Err(GaussianError::InvalidInput("state needs at least one axis".into()));
        }
        if let Some(bad) = axes.iter().find(|s| !(s.a.re > 0.0)) {
            return Err(GaussianError::Instability { a: bad.a });
        }
        Ok(Self { axes })
    }

    pub fn single(xbar: f64, pbar: f64, a: Complex64) -> Result<Self, GaussianError> {
        Self::new(vec![AxisState { xbar, pbar, a }])
    }

    pub fn n_axes(&self) -> usize {
        self.axes.len()
    }
}

/// Stationary shape of `variant` at rest at the origin.
pub fn soliton_state(variant: Variant, units: &Units, n_axes: usize) -> GaussianState {
    let a = variant.soliton_width(units);
    GaussianState { axes: vec![AxisState { xbar: 0.0, pbar: 0.0, a }; n_axes.max(1)] }
}

/// `⟨p²⟩/2M` summed over axes.
pub fn kinetic_energy(state: &GaussianState, units: &Units) -> f64 {
    state.axes.iter().map(|s| s.kinetic_energy(units)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stability {
    Attracting,
    Neutral,
    Repelling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub a: Complex64,
    /// Linearization `d(δa)/dt = eigenvalue · δa`.
    pub eigenvalue: Complex64,
    pub stability: Stability,
    /// `Re a > 0`.
    pub normalizable: bool,
}

fn riccati_alpha(u: &Units) -> Complex64 {
    Complex64::new(0.0, 2.0 * u.hbar / u.mass)
}

/// Both roots of `β = α a²` with their linear stability.
pub fn width_flow_fixed_points(variant: Variant, units: &Units) -> Vec<FixedPoint> {
    let alpha = riccati_alpha(units);
    let star = variant.soliton_width(units);
    let scale = units.omega_g;
    [star, -star]
        .into_iter()
        .map(|a| {
            let eigenvalue = -2.0 * alpha * a;
            let stability = if eigenvalue.re < -1e-12 * scale {
                Stability::Attracting
            } else if eigenvalue.re > 1e-12 * scale {
                Stability::Repelling
            } else {
                Stability::Neutral
            };
            FixedPoint { a, eigenvalue, stability, normalizable: a.re > 0.0 }
        })
        .collect()
}

/// Fixed-step propagator for one variant. The Riccati map for `dt` is
/// precomputed.
#[derive(Debug, Clone)]
pub struct GaussianPropagator {
    variant: Variant,
    units: Units,
    dt: f64,
    star: Complex64,
    decay: Complex64,
    noise: Complex64,
}

impl GaussianPropagator {
    pub fn new(variant: Variant, units: Units, dt: f64) -> Result<Self, GaussianError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(GaussianError::InvalidInput(format!("dt = {dt}")));
        }
        let star = variant.soliton_width(&units);
        let mu = 2.0 * riccati_alpha(&units) * star;
        Ok(Self {
            variant,
            units,
            dt,
            star,
            decay: (-mu * dt).exp(),
            noise: variant.noise_coupling(&units),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn units(&self) -> &Units {
        &self.units
    }

    /// Exact Riccati flow over one step, written for the deviation
    /// `δ = a - a*`: `δ' = δ e^{-μ dt} / (1 + δ (1 - e^{-μ dt}) / 2a*)`.
    pub fn advance_width(&self, a: Complex64) -> Complex64 {
        let delta = a - self.star;
        if delta == Complex64::new(0.0, 0.0) {
            return a;
        }
        let next = delta * self.decay / (1.0 + delta * (1.0 - self.decay) / (2.0 * self.star));
        self.star + next
    }

    /// Position and momentum noise amplitudes for width `a`.
    pub fn noise_amplitudes(&self, a: Complex64) -> (f64, f64) {
        let l = self.noise;
        let sx = l.re / (2.0 * a.re);
        let sp = self.units.hbar * (l.im - l.re * (a.im / a.re));
        (sx, sp)
    }

    /// Advances the state by one step `dt` with increments `dw[axis]`.
    pub fn step(&self, state: &mut GaussianState, dw: &[f64]) -> Result<(), GaussianError> {
        if dw.len() < state.axes.len() {
            return Err(GaussianError::InvalidInput(format!(
                "{} noise increments for {} axes",
                dw.len(),
                state.axes.len()
            )));
        }
        for (s, &w) in state.axes.iter_mut().zip(dw) {
            let (sx, sp) = self.noise_amplitudes(s.a);
            s.xbar += s.pbar / self.units.mass * self.dt + sx * w;
            if sp != 0.0 {
                s.pbar += sp * w;
            }
            let a = self.advance_width(s.a);
            if !(a.re > 0.0) || !a.im.is_finite() {
                return Err(GaussianError::Instability { a });
            }
            s.a = a;
        }
        Ok(())
    }
}

/// One step without a cached propagator.
pub fn step(
    state: &GaussianState,
    variant: Variant,
    units: &Units,
    dt: f64,
    dw: &[f64],
) -> Result<GaussianState, GaussianError> {
    let mut next = state.clone();
    GaussianPropagator::new(variant, *units, dt)?.step(&mut next, dw)?;
    Ok(next)
}

fn push_sample(rec: &mut TrajectoryRecord, t: f64, s: &AxisState, u: &Units) {
    rec.times.push(t);
    rec.xbar.push(s.xbar);
    rec.pbar.push(s.pbar);
    rec.dx.push(s.position_variance().sqrt());
    rec.kinetic.push(s.kinetic_energy(u));
    rec.cov_xp.push(s.cov_xp(u.hbar));
    rec.width.push(s.a);
}

/// Runs a single-axis state along `noise`, sampling every `record_every`
/// steps (and at `t = 0`).
pub fn simulate(
    initial: &AxisState,
    propagator: &GaussianPropagator,
    noise: &NoisePath,
    record_every: usize,
) -> Result<TrajectoryRecord, GaussianError> {
    if (noise.dt - propagator.dt).abs() > 1e-15 * propagator.dt {
        return Err(GaussianError::InvalidInput("noise path and propagator use different dt".into()));
    }
    let every = record_every.max(1);
    let u = propagator.units;
    let mut state = GaussianState::new(vec![*initial])?;
    let mut rec = TrajectoryRecord::new(noise.trajectory_index);
    push_sample(&mut rec, 0.0, &state.axes[0], &u);
    for k in 0..noise.n_steps() {
        propagator.step(&mut state, noise.at(k))?;
        if (k + 1) % every == 0 {
            push_sample(&mut rec, (k + 1) as f64 * propagator.dt, &state.axes[0], &u);
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::wiener_increments;

    const NAT: Units = Units::natural();

    #[test]
    fn soliton_shapes() {
        let sne = soliton_state(Variant::Sne, &NAT, 1).axes[0];
        assert_eq!(sne.a, Complex64::new(0.5, 0.0));
        assert!((sne.position_variance() - 0.5).abs() < 1e-15);
        let gsse = soliton_state(Variant::Gsse, &NAT, 1).axes[0];
        assert!((gsse.position_variance() - 0.5).abs() < 1e-15);
        assert_eq!(gsse.a.im / gsse.a.re, -1.0);
        let ssne = soliton_state(Variant::Ssne, &NAT, 3).axes[2];
        assert!((ssne.position_variance() - 0.5f64.sqrt()).abs() < 1e-15);
        // The (1-i) width correlates x and p by ħ/2.
        assert!((gsse.cov_xp(1.0) - 0.5).abs() < 1e-15);
        assert!((ssne.cov_xp(1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kinetic_energy_values() {
        let gsse = soliton_state(Variant::Gsse, &NAT, 1);
        assert!((kinetic_energy(&gsse, &NAT) - 0.5).abs() < 1e-15);
        let sne = soliton_state(Variant::Sne, &NAT, 1);
        assert!((kinetic_energy(&sne, &NAT) - 0.25).abs() < 1e-15);
        assert!((kinetic_energy(&soliton_state(Variant::Sne, &NAT, 3), &NAT) - 0.75).abs() < 1e-15);
        let (p, q) = (0.8, -0.3);
        let mut moved = gsse.clone();
        moved.axes[0].pbar = p;
        let mut shifted = moved.clone();
        shifted.axes[0].pbar = p + q;
        let diff = kinetic_energy(&shifted, &NAT) - kinetic_energy(&moved, &NAT);
        assert!((diff - (2.0 * p * q + q * q) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_stability() {
        let expect = [
            (Variant::Sne, Stability::Neutral),
            (Variant::Gsse, Stability::Attracting),
            (Variant::Ssne, Stability::Attracting),
        ];
        for (v, s) in expect {
            let fps = width_flow_fixed_points(v, &NAT);
            let physical = fps.iter().find(|f| f.normalizable).unwrap();
            assert_eq!(physical.stability, s, "{v}");
            assert_eq!(physical.a, v.soliton_width(&NAT));
        }
        let ssne = width_flow_fixed_points(Variant::Ssne, &NAT)[0];
        let expected = Complex64::new(1.0, -1.0) * 2f64.sqrt() / 4.0;
        assert!((ssne.a - expected).norm() < 1e-15);
        assert!((ssne.eigenvalue.re + 2f64.sqrt()).abs() < 1e-12);
        let gsse = width_flow_fixed_points(Variant::Gsse, &NAT)[0];
        assert!((gsse.eigenvalue.re + 2.0).abs() < 1e-12);
        assert_eq!(width_flow_fixed_points(Variant::Gsse, &NAT)[1].stability, Stability::Repelling);
    }

    #[test]
    fn riccati_map_matches_fine_rk4() {
        // Oracle: RK4 on da/dt = β - α a² with a much smaller step.
        let u = Units { hbar: 1.0, mass: 1.7, omega_g: 0.8 };
        for v in Variant::ALL {
            let dt = 0.05;
            let prop = GaussianPropagator::new(v, u, dt).unwrap();
            let beta = v.log_drift(&u);
            let alpha = riccati_alpha(&u);
            let f = |a: Complex64| beta - alpha * a * a;
            let mut a_rk = Complex64::new(2.0, 0.7);
            let mut a_map = a_rk;
            let h = dt / 200.0;
            for _ in 0..40 {
                for _ in 0..200 {
                    let k1 = f(a_rk);
                    let k2 = f(a_rk + 0.5 * h * k1);
                    let k3 = f(a_rk + 0.5 * h * k2);
                    let k4 = f(a_rk + h * k3);
                    a_rk += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                }
                a_map = prop.advance_width(a_map);
            }
            assert!((a_rk - a_map).norm() < 1e-10, "{v}: {a_rk} vs {a_map}");
        }
    }

    #[test]
    fn sne_soliton_is_stationary_and_ballistic() {
        let prop = GaussianPropagator::new(Variant::Sne, NAT, 1e-3).unwrap();
        let mut s = soliton_state(Variant::Sne, &NAT, 1);
        s.axes[0].pbar = 0.3;
        let a0 = s.axes[0].a;
        for _ in 0..1000 {
            prop.step(&mut s, &[0.0]).unwrap();
        }
        assert_eq!(s.axes[0].a, a0);
        assert!((s.axes[0].xbar - 0.3).abs() < 1e-12);
        assert_eq!(s.axes[0].pbar, 0.3);
    }

    #[test]
    fn ssne_soliton_momentum_is_exactly_constant() {
        let prop = GaussianPropagator::new(Variant::Ssne, NAT, 1e-3).unwrap();
        let init = AxisState { xbar: 0.0, pbar: 0.37, a: Variant::Ssne.soliton_width(&NAT) };
        for seed in 0..5 {
            let path = wiener_increments(seed, 0, 2000, 1e-3, 1).unwrap();
            let rec = simulate(&init, &prop, &path, 1).unwrap();
            assert!(rec.pbar.iter().all(|&p| p == 0.37));
        }
    }

    #[test]
    fn soliton_noise_amplitudes() {
        let gsse = GaussianPropagator::new(Variant::Gsse, NAT, 1e-3).unwrap();
        assert_eq!(gsse.noise_amplitudes(Variant::Gsse.soliton_width(&NAT)), (1.0, 1.0));
        let u = Units { hbar: 2.0, mass: 0.5, omega_g: 3.0 };
        let (sx, sp) = GaussianPropagator::new(Variant::Gsse, u, 1e-3)
            .unwrap()
            .noise_amplitudes(Variant::Gsse.soliton_width(&u));
        assert!((sx - (u.hbar / u.mass).sqrt()).abs() < 1e-12);
        assert!((sp - (u.hbar * u.mass).sqrt() * u.omega_g).abs() < 1e-12);
        let ssne = GaussianPropagator::new(Variant::Ssne, u, 1e-3).unwrap();
        let (sx, sp) = ssne.noise_amplitudes(Variant::Ssne.soliton_width(&u));
        assert!((sx - (u.hbar / u.mass).sqrt()).abs() < 1e-12);
        assert_eq!(sp, 0.0);
    }

    #[test]
    fn width_flow_is_noise_independent_and_relaxes() {
        let prop = GaussianPropagator::new(Variant::Gsse, NAT, 1e-3).unwrap();
        let init = AxisState { xbar: 0.0, pbar: 0.0, a: Complex64::new(3.0, 1.0) };
        let r1 = simulate(&init, &prop, &wiener_increments(1, 0, 10_000, 1e-3, 1).unwrap(), 100).unwrap();
        let r2 = simulate(&init, &prop, &wiener_increments(2, 0, 10_000, 1e-3, 1).unwrap(), 100).unwrap();
        assert_eq!(r1.width, r2.width);
        assert!((r1.width.last().unwrap() - Variant::Gsse.soliton_width(&NAT)).norm() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(GaussianPropagator::new(Variant::Sne, NAT, 0.0).is_err());
        assert!(GaussianState::single(0.0, 0.0, Complex64::new(-1.0, 0.0)).is_err());
        let prop = GaussianPropagator::new(Variant::Gsse, NAT, 1e-3).unwrap();
        let mut s = soliton_state(Variant::Gsse, &NAT, 2);
        assert!(prop.step(&mut s, &[0.1]).is_err());
    }
}
