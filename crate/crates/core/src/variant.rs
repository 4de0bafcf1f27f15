//! The three quadratic single-body dynamics and their local generators.
//!
//! Each variant acts on the centred coordinate `x_c = x - ⟨x⟩` as
//! `dΨ = [-(i/ħ) H dt - κ x_c² dt + λ x_c dW] Ψ` with `H = p²/2M`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::model::{self, MassProfile};

/// Scales of the quadratic dynamics. Natural units set all three to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub hbar: f64,
    pub mass: f64,
    pub omega_g: f64,
}

impl Default for Units {
    fn default() -> Self {
        Self::natural()
    }
}

impl Units {
    pub const fn natural() -> Self {
        Self { hbar: 1.0, mass: 1.0, omega_g: 1.0 }
    }

    pub fn from_profile(profile: &MassProfile) -> Self {
        Self {
            hbar: profile.constants.hbar,
            mass: profile.constants.mass,
            omega_g: model::omega_g(profile),
        }
    }

    /// `M ω_G² / 2ħ`, the decoherence rate per unit squared separation.
    pub fn localization_rate(&self) -> f64 {
        self.mass * self.omega_g.powi(2) / (2.0 * self.hbar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Schrödinger–Newton: Hermitian self-attraction only.
    Sne,
    /// Gravity-related collapse: anti-Hermitian attraction and real noise.
    Gsse,
    /// Stochastic Schrödinger–Newton: both, with phase-rotated noise.
    Ssne,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sne, Variant::Gsse, Variant::Ssne];

    pub fn is_stochastic(self) -> bool {
        !matches!(self, Variant::Sne)
    }

    /// Coefficient `κ` of `-κ x_c²` in the state equation.
    pub fn kappa(self, u: &Units) -> Complex64 {
        let k = u.mass * u.omega_g.powi(2) / (2.0 * u.hbar);
        match self {
            Variant::Sne => Complex64::new(0.0, k),
            Variant::Gsse => Complex64::new(k, 0.0),
            Variant::Ssne => Complex64::new(k, k),
        }
    }

    /// Coefficient `λ` of `λ x_c dW`.
    pub fn noise_coupling(self, u: &Units) -> Complex64 {
        match self {
            Variant::Sne => Complex64::new(0.0, 0.0),
            Variant::Gsse => Complex64::new((u.mass / u.hbar).sqrt() * u.omega_g, 0.0),
            Variant::Ssne => {
                let r = (u.mass / (2.0 * u.hbar)).sqrt() * u.omega_g;
                Complex64::new(r, -r)
            }
        }
    }

    /// `β = κ + λ²/2`: the coefficient of `-x_c² dt` in `d ln Ψ` once the
    /// Ito term of the logarithm is included.
    pub fn log_drift(self, u: &Units) -> Complex64 {
        let l = self.noise_coupling(u);
        self.kappa(u) + 0.5 * l * l
    }

    /// Stationary width parameter `a*` of `Ψ ∝ exp(-a x²)`.
    pub fn soliton_width(self, u: &Units) -> Complex64 {
        let base = u.mass * u.omega_g / (2.0 * u.hbar);
        match self {
            Variant::Sne => Complex64::new(base, 0.0),
            Variant::Gsse => Complex64::new(base, -base),
            Variant::Ssne => {
                let k = base / 2f64.sqrt();
                Complex64::new(k, -k)
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Sne => "sne",
            Variant::Gsse => "gsse",
            Variant::Ssne => "ssne",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "sne" => Ok(Variant::Sne),
            "gsse" => Ok(Variant::Gsse),
            "ssne" => Ok(Variant::Ssne),
            other => Err(format!("unknown variant `{other}` (expected sne, gsse or ssne)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_is_preserved_in_the_ito_mean() {
        // d‖Ψ‖² ∝ (-2 Re κ + |λ|²) ⟨x_c²⟩ dt must vanish.
        let u = Units { hbar: 0.7, mass: 2.3, omega_g: 1.9 };
        for v in Variant::ALL {
            let drift = -2.0 * v.kappa(&u).re + v.noise_coupling(&u).norm_sqr();
            assert!(drift.abs() < 1e-12, "{v}: {drift}");
        }
    }

    #[test]
    fn soliton_widths_are_riccati_fixed_points() {
        let u = Units { hbar: 1.3, mass: 0.6, omega_g: 2.1 };
        for v in Variant::ALL {
            let a = v.soliton_width(&u);
            let alpha = Complex64::new(0.0, 2.0 * u.hbar / u.mass);
            let residual = v.log_drift(&u) - alpha * a * a;
            assert!(residual.norm() < 1e-12, "{v}: {residual}");
            assert!(a.re > 0.0);
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!("SSNE".parse::<Variant>().unwrap(), Variant::Ssne);
        assert_eq!("g-sse".parse::<Variant>().unwrap(), Variant::Gsse);
        assert!("csl".parse::<Variant>().is_err());
    }
}
