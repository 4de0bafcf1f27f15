//! Physical constants, spherical mass profiles and the static gravitational
//! kernels built on them.
//!
//! All double integrals over pairs of spherical densities are reduced to
//! one-dimensional radial quadratures through Newton's shell theorem: the
//! potential of a normalized profile `f` at radius `r` is
//! `-G M [m(r)/r + q(r)]` with `m` the enclosed fraction and
//! `q(r) = ∫_r^∞ 4π s f(s) ds`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{self, Tolerance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("constants must be finite and strictly positive (G={g}, hbar={hbar}, M={mass})")]
    InvalidConstants { g: f64, hbar: f64, mass: f64 },
    #[error("profile is not normalized: quadrature gives {integral}")]
    InvalidProfile { integral: f64 },
    #[error("invalid length {name} = {value}")]
    InvalidLength { name: &'static str, value: f64 },
}

/// Gravitational constant, reduced Planck constant and total mass in a
/// common unit system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub g: f64,
    pub hbar: f64,
    pub mass: f64,
}

impl Constants {
    pub fn new(g: f64, hbar: f64, mass: f64) -> Result<Self, ModelError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(g) && ok(hbar) && ok(mass) {
            Ok(Self { g, hbar, mass })
        } else {
            Err(ModelError::InvalidConstants { g, hbar, mass })
        }
    }

    /// `G = ħ = M = 1`.
    pub fn unit() -> Self {
        Self { g: 1.0, hbar: 1.0, mass: 1.0 }
    }

    pub fn with_mass(self, mass: f64) -> Self {
        Self { mass, ..self }
    }
}

/// Length, time and energy units in which `ħ = M = ω_G = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaturalScales {
    pub length: f64,
    pub time: f64,
    pub energy: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileKind {
    UniformSphere { radius: f64 },
    GaussianBall { sigma: f64 },
}

/// Normalized spherical density `f(r)` of a rigid body of total mass `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassProfile {
    pub kind: ProfileKind,
    pub constants: Constants,
}

const NORMALIZATION_TOL: f64 = 1e-8;

fn tight() -> Tolerance {
    Tolerance { abs: 1e-15, rel: 1e-13, max_intervals: 4000 }
}

impl MassProfile {
    /// Builds the profile and checks `∫ f d³r = 1` by radial quadrature.
    pub fn new(kind: ProfileKind, constants: Constants) -> Result<Self, ModelError> {
        let constants = Constants::new(constants.g, constants.hbar, constants.mass)?;
        let profile = Self { kind, constants };
        profile.check_normalization()?;
        Ok(profile)
    }

    pub fn uniform_sphere(radius: f64, constants: Constants) -> Result<Self, ModelError> {
        Self::new(ProfileKind::UniformSphere { radius }, constants)
    }

    pub fn gaussian_ball(sigma: f64, constants: Constants) -> Result<Self, ModelError> {
        Self::new(ProfileKind::GaussianBall { sigma }, constants)
    }

    /// `R` for the uniform sphere, `σ` for the Gaussian ball.
    pub fn scale(&self) -> f64 {
        match self.kind {
            ProfileKind::UniformSphere { radius } => radius,
            ProfileKind::GaussianBall { sigma } => sigma,
        }
    }

    /// Radius beyond which the density is zero or negligible (< e^-72 of peak).
    pub fn support(&self) -> f64 {
        match self.kind {
            ProfileKind::UniformSphere { radius } => radius,
            ProfileKind::GaussianBall { sigma } => 12.0 * sigma,
        }
    }

    /// Radii where `f` or its derivatives jump.
    fn kinks(&self) -> Vec<f64> {
        match self.kind {
            ProfileKind::UniformSphere { radius } => vec![radius],
            ProfileKind::GaussianBall { sigma } => vec![sigma, 3.0 * sigma],
        }
    }

    pub fn density(&self, r: f64) -> f64 {
        match self.kind {
            ProfileKind::UniformSphere { radius } => {
                if r < radius {
                    3.0 / (4.0 * PI * radius.powi(3))
                } else {
                    0.0
                }
            }
            ProfileKind::GaussianBall { sigma } => {
                (-r * r / (2.0 * sigma * sigma)).exp() / (2.0 * PI * sigma * sigma).powf(1.5)
            }
        }
    }

    /// Enclosed mass fraction `m(r) = ∫_0^r 4π s² f(s) ds`.
    pub fn enclosed(&self, r: f64) -> f64 {
        match self.kind {
            ProfileKind::UniformSphere { radius } => (r / radius).min(1.0).powi(3),
            ProfileKind::GaussianBall { sigma } => {
                let u = r / sigma;
                libm::erf(u / 2f64.sqrt()) - (2.0 / PI).sqrt() * u * (-0.5 * u * u).exp()
            }
        }
    }

    /// `q(r) = ∫_r^∞ 4π s f(s) ds`.
    fn outer_moment(&self, r: f64) -> f64 {
        match self.kind {
            ProfileKind::UniformSphere { radius } => {
                if r < radius {
                    1.5 * (radius * radius - r * r) / radius.powi(3)
                } else {
                    0.0
                }
            }
            ProfileKind::GaussianBall { sigma } => {
                (2.0 / PI).sqrt() / sigma * (-r * r / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    /// `∫_0^r 4π s³ f(s) ds`.
    fn third_moment(&self, r: f64) -> f64 {
        match self.kind {
            ProfileKind::UniformSphere { radius } => 0.75 * r.min(radius).powi(4) / radius.powi(3),
            ProfileKind::GaussianBall { sigma } => {
                let e = (-r * r / (2.0 * sigma * sigma)).exp();
                (2.0 / PI).sqrt() * (2.0 * sigma - (r * r / sigma + 2.0 * sigma) * e)
            }
        }
    }

    /// Newtonian potential of the normalized density per unit `G M`.
    pub fn unit_potential(&self, r: f64) -> f64 {
        if r == 0.0 {
            -self.outer_moment(0.0)
        } else {
            -(self.enclosed(r) / r + self.outer_moment(r))
        }
    }

    /// `∫_0^u s Φ(s) ds` for the unit potential, in closed form.
    fn potential_antiderivative(&self, u: f64) -> f64 {
        -(u * self.enclosed(u) + 0.5 * u * u * self.outer_moment(u) - 0.5 * self.third_moment(u))
    }

    fn radial<F: Fn(f64) -> f64>(&self, g: F, extra: &[f64]) -> f64 {
        let hi = self.support();
        let mut interior = self.kinks();
        interior.extend_from_slice(extra);
        let pts = quadrature::breakpoints(0.0, hi, &interior);
        quadrature::integrate_with_breaks(g, &pts, tight()).value
    }

    /// `∫ f d³r` by quadrature.
    pub fn normalization(&self) -> f64 {
        self.radial(|r| 4.0 * PI * r * r * self.density(r), &[])
    }

    fn check_normalization(&self) -> Result<(), ModelError> {
        let scale = self.scale();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ModelError::InvalidProfile { integral: f64::NAN });
        }
        let integral = self.normalization();
        if (integral - 1.0).abs() < NORMALIZATION_TOL {
            Ok(())
        } else {
            Err(ModelError::InvalidProfile { integral })
        }
    }

    /// `∫ f² d³r` by quadrature.
    pub fn density_square_integral(&self) -> f64 {
        self.radial(|r| 4.0 * PI * r * r * self.density(r).powi(2), &[])
    }

    pub fn natural_scales(&self) -> NaturalScales {
        let c = self.constants;
        let w = omega_g(self);
        NaturalScales {
            length: (c.hbar / (c.mass * w)).sqrt(),
            time: 1.0 / w,
            energy: c.hbar * w,
            momentum: (c.hbar * c.mass * w).sqrt(),
        }
    }
}

/// `ω_G = sqrt((4π/3) G M ∫ f² d³r)`.
pub fn omega_g(profile: &MassProfile) -> f64 {
    let c = profile.constants;
    (4.0 * PI / 3.0 * c.g * c.mass * profile.density_square_integral()).sqrt()
}

/// Gravitational self-energy `E_G = -(G M²/2) ∫∫ f f / |r - s|`, computed
/// as `-G M² ∫ m(r) f(r) 4π r dr`.
pub fn self_energy(profile: &MassProfile) -> f64 {
    let c = profile.constants;
    -c.g * c.mass * c.mass * profile.radial(|r| 4.0 * PI * r * profile.enclosed(r) * profile.density(r), &[])
}

/// Interaction energy of two copies of `M f` displaced by `d` along one axis.
///
/// For spherical `f` the angular integral collapses onto the antiderivative
/// `A(u) = ∫_0^u s Φ(s) ds` of the one-body potential:
/// `U(d) = (2π G M² / d) ∫ r f(r) [A(r + d) - A(|r - d|)] dr`.
pub fn mutual_potential(profile: &MassProfile, d: f64) -> Result<f64, ModelError> {
    if !(d.is_finite() && d >= 0.0) {
        return Err(ModelError::InvalidLength { name: "d", value: d });
    }
    let c = profile.constants;
    let gm2 = c.g * c.mass * c.mass;
    if d == 0.0 {
        return Ok(gm2 * profile.radial(|r| 4.0 * PI * r * r * profile.density(r) * profile.unit_potential(r), &[]));
    }
    let rs = profile.scale();
    let integral = profile.radial(
        |r| {
            r * profile.density(r)
                * (profile.potential_antiderivative(r + d) - profile.potential_antiderivative((r - d).abs()))
        },
        &[d, (rs - d).abs()],
    );
    Ok(gm2 * 2.0 * PI / d * integral)
}

/// Frequency and self-energy of the small-spread quadratic reduction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCoefficients {
    pub omega_g: f64,
    pub e_g: f64,
}

impl QuadraticCoefficients {
    pub fn of(profile: &MassProfile) -> Self {
        Self { omega_g: omega_g(profile), e_g: self_energy(profile) }
    }
}

/// Two copies of a profile separated by `ell`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatGeometry {
    pub ell: f64,
    pub profile: MassProfile,
}

impl CatGeometry {
    pub fn new(ell: f64, profile: MassProfile) -> Result<Self, ModelError> {
        if ell.is_finite() && ell >= 0.0 {
            Ok(Self { ell, profile })
        } else {
            Err(ModelError::InvalidLength { name: "ell", value: ell })
        }
    }
}

/// Self-energy of the difference of the two branch densities,
/// `ΔE_G = U(ℓ) - U(0)`.
pub fn delta_e_g(cat: &CatGeometry) -> Result<f64, ModelError> {
    if cat.ell == 0.0 {
        return Ok(0.0);
    }
    Ok(mutual_potential(&cat.profile, cat.ell)? - mutual_potential(&cat.profile, 0.0)?)
}

/// Outcome of comparing the full mean-field energy of a Gaussian state with
/// its quadratic expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCheck {
    pub dx: f64,
    /// `⟨V_Ψ⟩` from the full kernel.
    pub full: f64,
    /// `2 E_G + ½ M ω_G² (⟨x̂_c²⟩ + ⟨x_c²⟩)`.
    pub quadratic: f64,
    pub relative_error: f64,
    /// Set when `dx ≥ 0.1 ×` the profile scale.
    pub outside_domain: bool,
}

/// Mean-field energy `⟨V_Ψ⟩` of an isotropic Gaussian state with per-axis
/// spread `dx`, compared with its quadratic expansion.
///
/// Two independent draws from `|Ψ|²` differ by a Gaussian vector `z` of
/// per-axis variance `2 dx²`, so `⟨V_Ψ⟩ = E[U(|z|)]`. The operator part
/// `½ M ω_G² x̂_c²` and the mean-field source part `½ M ω_G² ⟨x_c²⟩` each
/// contribute `½ M ω_G² · 3 dx²` to the expectation.
pub fn quadratic_potential_check(profile: &MassProfile, dx: f64) -> Result<QuadraticCheck, ModelError> {
    if !(dx.is_finite() && dx > 0.0) {
        return Err(ModelError::InvalidLength { name: "dx", value: dx });
    }
    let s2 = 2.0 * dx * dx;
    let s = s2.sqrt();
    let norm = (2.0 * PI * s2).powf(-1.5);
    let tol = Tolerance { abs: 1e-14, rel: 1e-11, max_intervals: 400 };
    let full = quadrature::integrate_with_breaks(
        |r| {
            let radial = 4.0 * PI * r * r * norm * (-r * r / (2.0 * s2)).exp();
            if radial == 0.0 {
                return 0.0;
            }
            // r >= 0 inside the integration range, so the kernel cannot fail.
            radial * mutual_potential(profile, r).unwrap_or(f64::NAN)
        },
        &quadrature::breakpoints(0.0, 12.0 * s, &[s, 3.0 * s]),
        tol,
    )
    .value;
    let coeffs = QuadraticCoefficients::of(profile);
    let m = profile.constants.mass;
    let quadratic = 2.0 * coeffs.e_g + 0.5 * m * coeffs.omega_g.powi(2) * 3.0 * s2;
    Ok(QuadraticCheck {
        dx,
        full,
        quadratic,
        relative_error: ((full - quadratic) / quadratic).abs(),
        outside_domain: dx >= 0.1 * profile.scale(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(r: f64) -> MassProfile {
        MassProfile::uniform_sphere(r, Constants::unit()).unwrap()
    }

    /// Closed-form interaction of two overlapping uniform spheres.
    fn overlapping_spheres(d: f64, r: f64) -> f64 {
        if d >= 2.0 * r {
            return -1.0 / d;
        }
        let x = d / r;
        -(1.2 - 0.5 * x * x + 3.0 / 16.0 * x.powi(3) - x.powi(5) / 160.0) / r
    }

    #[test]
    fn rejects_bad_constants_and_profiles() {
        assert!(Constants::new(0.0, 1.0, 1.0).is_err());
        assert!(Constants::new(1.0, f64::NAN, 1.0).is_err());
        assert!(matches!(
            MassProfile::uniform_sphere(0.0, Constants::unit()),
            Err(ModelError::InvalidProfile { .. })
        ));
        assert!(MassProfile::gaussian_ball(-1.0, Constants::unit()).is_err());
        assert!(MassProfile::uniform_sphere(f64::INFINITY, Constants::unit()).is_err());
    }

    #[test]
    fn profiles_are_normalized() {
        for p in [uniform(1.0), uniform(3.7), MassProfile::gaussian_ball(0.4, Constants::unit()).unwrap()] {
            assert!((p.normalization() - 1.0).abs() < 1e-12);
            assert!((p.enclosed(p.support() * 2.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_uniform_and_gaussian() {
        assert!((omega_g(&uniform(1.0)) - 1.0).abs() < 1e-10);
        let g = MassProfile::gaussian_ball(1.0, Constants::unit()).unwrap();
        assert!((omega_g(&g).powi(2) - 1.0 / (6.0 * PI.sqrt())).abs() < 1e-10);
        let heavy = MassProfile::uniform_sphere(1.0, Constants::unit().with_mass(2.0)).unwrap();
        assert!((omega_g(&heavy) / omega_g(&uniform(1.0)) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn self_energy_scalings() {
        assert!((self_energy(&uniform(1.0)) + 0.6).abs() < 1e-10);
        assert!((self_energy(&uniform(2.0)) - self_energy(&uniform(1.0)) / 2.0).abs() < 1e-12);
        let heavy = MassProfile::uniform_sphere(1.0, Constants::unit().with_mass(2.0)).unwrap();
        assert!((self_energy(&heavy) - 4.0 * self_energy(&uniform(1.0))).abs() < 1e-12);
        // Gaussian ball: E_G = -G M² / (2 σ √π).
        let g = MassProfile::gaussian_ball(0.7, Constants::unit()).unwrap();
        assert!((self_energy(&g) + 1.0 / (2.0 * 0.7 * PI.sqrt())).abs() < 1e-10);
    }

    #[test]
    fn mutual_potential_matches_closed_forms() {
        let p = uniform(1.0);
        for d in [0.0, 0.1, 0.5, 1.0, 1.5, 1.99, 2.0, 4.0, 10.0] {
            let u = mutual_potential(&p, d).unwrap();
            assert!((u - overlapping_spheres(d, 1.0)).abs() < 1e-9, "d={d}: {u}");
        }
        let sigma = 0.8;
        let g = MassProfile::gaussian_ball(sigma, Constants::unit()).unwrap();
        for d in [0.05, 0.5, 2.0, 7.0] {
            let exact = -libm::erf(d / (2.0 * sigma)) / d;
            assert!((mutual_potential(&g, d).unwrap() - exact).abs() < 1e-9);
        }
        assert!(mutual_potential(&p, -1.0).is_err());
        assert!(mutual_potential(&p, 1e6).unwrap().abs() < 1.1e-6);
    }

    #[test]
    fn curvature_at_origin_is_mass_times_omega_squared() {
        // Central finite difference of U oracle-free: compare to M ω_G².
        let g = MassProfile::gaussian_ball(1.3, Constants::new(2.0, 1.0, 0.7).unwrap()).unwrap();
        let h = 1e-2;
        let u0 = mutual_potential(&g, 0.0).unwrap();
        let uh = mutual_potential(&g, h).unwrap();
        let curvature = 2.0 * (uh - u0) / (h * h);
        let expected = g.constants.mass * omega_g(&g).powi(2);
        assert!((curvature / expected - 1.0).abs() < 1e-3, "{curvature} vs {expected}");
    }

    #[test]
    fn delta_e_g_limits() {
        let p = uniform(1.0);
        assert_eq!(delta_e_g(&CatGeometry::new(0.0, p).unwrap()).unwrap(), 0.0);
        let far = delta_e_g(&CatGeometry::new(4.0, p).unwrap()).unwrap();
        assert!((far - 0.95).abs() < 1e-9);
        let huge = delta_e_g(&CatGeometry::new(1e7, p).unwrap()).unwrap();
        assert!((huge - 1.2).abs() < 1e-6);
        assert!(CatGeometry::new(-0.1, p).is_err());
    }

    #[test]
    fn quadratic_check_domain_flag() {
        let p = uniform(1.0);
        let inside = quadratic_potential_check(&p, 0.05).unwrap();
        assert!(!inside.outside_domain);
        let outside = quadratic_potential_check(&p, 0.3).unwrap();
        assert!(outside.outside_domain);
        assert!(quadratic_potential_check(&p, 0.0).is_err());
    }
}
