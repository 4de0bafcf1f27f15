//! Split-step solver for a wave function on a periodic 1D grid.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::NoisePath;
use crate::record::TrajectoryRecord;
use crate::variant::{Units, Variant};

/// Largest boundary amplitude tolerated by the containment check.
pub const CONTAINMENT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("wave function reached the {side} boundary (|psi| = {amplitude:e})")]
    Containment { side: &'static str, amplitude: f64 },
    #[error("norm deviation {deviation:e} exceeds bound {bound:e}; reduce dt")]
    StepSize { deviation: f64, bound: f64 },
    #[error("unitary step changed the norm by {0:e}")]
    NormDrift(f64),
    #[error("branches overlap: separation {ell} needs to exceed {min}")]
    IllDefinedBranches { ell: f64, min: f64 },
}

/// Uniform periodic grid `x_j = x_min + j·dx`, `j = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub x_min: f64,
    pub x_max: f64,
}

impl GridSpec {
    pub fn new(n: usize, x_min: f64, x_max: f64) -> Result<Self, GridError> {
        if n < 8 || n % 2 != 0 {
            return Err(GridError::InvalidInput(format!("grid size {n} must be even and at least 8")));
        }
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(GridError::InvalidInput(format!("domain [{x_min}, {x_max}]")));
        }
        Ok(Self { n, x_min, x_max })
    }

    /// 1024 points on [-20, 20].
    pub fn standard() -> Self {
        Self { n: 1024, x_min: -20.0, x_max: 20.0 }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.x(j)).collect()
    }

    /// Angular wavenumber of FFT bin `j`.
    pub fn k(&self, j: usize) -> f64 {
        let m = if j < self.n / 2 { j as f64 } else { j as f64 - self.n as f64 };
        2.0 * std::f64::consts::PI * m / (self.x_max - self.x_min)
    }

    /// Derivative wavenumber: as [`GridSpec::k`] but zero at Nyquist.
    fn k_odd(&self, j: usize) -> f64 {
        if j == self.n / 2 {
            0.0
        } else {
            self.k(j)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridState {
    pub spec: GridSpec,
    pub psi: Vec<Complex64>,
}

impl GridState {
    /// Wraps and normalizes raw amplitudes.
    pub fn from_amplitudes(spec: GridSpec, psi: Vec<Complex64>) -> Result<Self, GridError> {
        if psi.len() != spec.n {
            return Err(GridError::InvalidInput(format!("{} amplitudes for {} points", psi.len(), spec.n)));
        }
        let mut s = Self { spec, psi };
        let norm = s.norm_sq();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(GridError::InvalidInput("amplitudes are not normalizable".into()));
        }
        s.scale(norm.sqrt().recip());
        Ok(s)
    }

    pub fn dx_grid(&self) -> f64 {
        self.spec.dx()
    }

    pub fn x0(&self) -> f64 {
        self.spec.x_min
    }

    pub fn norm_sq(&self) -> f64 {
        self.psi.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.spec.dx()
    }

    fn scale(&mut self, f: f64) {
        self.psi.iter_mut().for_each(|c| *c *= f);
    }

    /// Rescales to unit norm and returns the deviation `‖ψ‖² - 1` beforehand.
    pub fn renormalize(&mut self) -> f64 {
        let n = self.norm_sq();
        self.scale(n.sqrt().recip());
        n - 1.0
    }

    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn check_containment(&self) -> Result<(), GridError> {
        let scale = self.norm_sq().sqrt();
        for (side, c) in [("left", self.psi[0]), ("right", self.psi[self.spec.n - 1])] {
            let amplitude = c.norm() / scale;
            if !(amplitude < CONTAINMENT_TOLERANCE) {
                return Err(GridError::Containment { side, amplitude });
            }
        }
        Ok(())
    }

    pub fn mean_x(&self) -> f64 {
        let w: f64 = self.psi.iter().map(|c| c.norm_sqr()).sum();
        self.psi.iter().enumerate().map(|(j, c)| self.spec.x(j) * c.norm_sqr()).sum::<f64>() / w
    }

    /// `|⟨self|other⟩|` for two states on the same grid.
    pub fn fidelity(&self, other: &GridState) -> f64 {
        let dot: Complex64 = self.psi.iter().zip(&other.psi).map(|(a, b)| a.conj() * b).sum();
        dot.norm() * self.spec.dx() / (self.norm_sq() * other.norm_sq()).sqrt()
    }

    /// `(x, Re ψ, Im ψ)` rows.
    pub fn snapshot(&self) -> Vec<[f64; 3]> {
        self.psi.iter().enumerate().map(|(j, c)| [self.spec.x(j), c.re, c.im]).collect()
    }
}

/// Discretized `exp(-a (x - x̄)² + i p̄ x / ħ)`, normalized.
pub fn init_gaussian(spec: GridSpec, xbar: f64, pbar: f64, a: Complex64, hbar: f64) -> Result<GridState, GridError> {
    if !(a.re > 0.0) {
        return Err(GridError::InvalidInput(format!("width {a} is not normalizable")));
    }
    let spread = (0.25 / a.re).sqrt();
    if xbar - 6.0 * spread < spec.x_min || xbar + 6.0 * spread > spec.x_max {
        return Err(GridError::Containment { side: if xbar < 0.5 * (spec.x_min + spec.x_max) { "left" } else { "right" }, amplitude: f64::NAN });
    }
    let psi = (0..spec.n)
        .map(|j| {
            let x = spec.x(j);
            let u = x - xbar;
            (-a * u * u + Complex64::new(0.0, pbar * x / hbar)).exp()
        })
        .collect();
    let s = GridState::from_amplitudes(spec, psi)?;
    s.check_containment()?;
    Ok(s)
}

/// Two Gaussian packets of width `a0` at `center ± ell/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatState {
    pub a0: Complex64,
    pub ell: f64,
    /// Weights of the left and right packets.
    pub weights: [f64; 2],
}

impl CatState {
    pub fn new(a0: Complex64, ell: f64, weights: [f64; 2]) -> Result<Self, GridError> {
        if !(a0.re > 0.0) {
            return Err(GridError::InvalidInput(format!("width {a0} is not normalizable")));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || ((weights[0] + weights[1]) - 1.0).abs() > 1e-12 {
            return Err(GridError::InvalidInput(format!("weights {weights:?} must be non-negative and sum to 1")));
        }
        let c = Self { a0, ell, weights };
        if !(ell > c.min_separation()) {
            return Err(GridError::IllDefinedBranches { ell, min: c.min_separation() });
        }
        Ok(c)
    }

    pub fn symmetric(a0: Complex64, ell: f64) -> Result<Self, GridError> {
        Self::new(a0, ell, [0.5, 0.5])
    }

    pub fn packet_spread(&self) -> f64 {
        (0.25 / self.a0.re).sqrt()
    }

    pub fn min_separation(&self) -> f64 {
        4.0 * self.packet_spread()
    }

    pub fn centers(&self) -> [f64; 2] {
        [-0.5 * self.ell, 0.5 * self.ell]
    }
}

pub fn init_cat(spec: GridSpec, cat: &CatState, hbar: f64) -> Result<GridState, GridError> {
    let [xl, xr] = cat.centers();
    let left = init_gaussian(spec, xl, 0.0, cat.a0, hbar)?;
    let right = init_gaussian(spec, xr, 0.0, cat.a0, hbar)?;
    let (wl, wr) = (cat.weights[0].sqrt(), cat.weights[1].sqrt());
    let psi = left.psi.iter().zip(&right.psi).map(|(l, r)| wl * l + wr * r).collect();
    GridState::from_amplitudes(spec, psi)
}

/// Probability to the left and right of the cat midpoint. A grid point on
/// the midpoint is shared equally.
pub fn branch_weights(state: &GridState, cat: &CatState) -> Result<(f64, f64), GridError> {
    if !(cat.ell > cat.min_separation()) {
        return Err(GridError::IllDefinedBranches { ell: cat.ell, min: cat.min_separation() });
    }
    Ok(split_weights(state, 0.0))
}

fn split_weights(state: &GridState, mid: f64) -> (f64, f64) {
    let (mut l, mut r) = (0.0, 0.0);
    let tol = 1e-9 * state.spec.dx();
    for (j, c) in state.psi.iter().enumerate() {
        let x = state.spec.x(j);
        let p = c.norm_sqr();
        if (x - mid).abs() <= tol {
            l += 0.5 * p;
            r += 0.5 * p;
        } else if x < mid {
            l += p;
        } else {
            r += p;
        }
    }
    let total = l + r;
    (l / total, r / total)
}

/// Centers of mass of the two half-domains split at `mid`.
pub fn branch_centers(state: &GridState, mid: f64) -> [f64; 2] {
    let mut acc = [[0.0; 2]; 2];
    for (j, c) in state.psi.iter().enumerate() {
        let x = state.spec.x(j);
        let side = usize::from(x >= mid);
        acc[side][0] += c.norm_sqr();
        acc[side][1] += x * c.norm_sqr();
    }
    acc.map(|[w, m]| m / w)
}

/// Spectral transforms with reusable scratch space. One per trajectory.
pub struct Workspace {
    spec: GridSpec,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    buffer: Vec<Complex64>,
}

impl Workspace {
    pub fn new(spec: GridSpec) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(spec.n);
        let inverse = planner.plan_fft_inverse(spec.n);
        let len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        Self {
            spec,
            forward,
            inverse,
            scratch: vec![Complex64::new(0.0, 0.0); len],
            buffer: vec![Complex64::new(0.0, 0.0); spec.n],
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    fn forward(&mut self, data: &mut [Complex64]) {
        self.forward.process_with_scratch(data, &mut self.scratch);
    }

    fn inverse(&mut self, data: &mut [Complex64]) {
        self.inverse.process_with_scratch(data, &mut self.scratch);
    }

    /// Multiplies by `phase[k]` in Fourier space; `phase` includes the
    /// `1/N` of the inverse transform.
    fn apply_spectral(&mut self, psi: &mut [Complex64], phase: &[Complex64]) {
        self.forward(psi);
        psi.iter_mut().zip(phase).for_each(|(c, p)| *c *= p);
        self.inverse(psi);
    }

    /// Ensemble-ready moments of `state`.
    pub fn moments(&mut self, state: &GridState, units: &Units) -> Moments {
        let spec = state.spec;
        let dx = spec.dx();
        let norm: f64 = state.psi.iter().map(|c| c.norm_sqr()).sum();
        let (mut mx, mut mx2) = (0.0, 0.0);
        for (j, c) in state.psi.iter().enumerate() {
            let x = spec.x(j);
            mx += x * c.norm_sqr();
            mx2 += x * x * c.norm_sqr();
        }
        mx /= norm;
        mx2 /= norm;

        let mut buf = std::mem::take(&mut self.buffer);
        buf.copy_from_slice(&state.psi);
        self.forward(&mut buf);
        let (mut mk, mut mk2) = (0.0, 0.0);
        for (j, c) in buf.iter().enumerate() {
            let p = c.norm_sqr();
            mk += spec.k_odd(j) * p;
            mk2 += spec.k(j).powi(2) * p;
        }
        let spectral_norm: f64 = buf.iter().map(|c| c.norm_sqr()).sum();
        mk /= spectral_norm;
        mk2 /= spectral_norm;
        // (−iħ∂ψ) on the grid, for the symmetrized ⟨xp⟩.
        let inv_n = 1.0 / spec.n as f64;
        for (j, c) in buf.iter_mut().enumerate() {
            *c *= Complex64::new(spec.k_odd(j) * inv_n, 0.0);
        }
        self.inverse(&mut buf);
        let xp: f64 = state
            .psi
            .iter()
            .zip(&buf)
            .enumerate()
            .map(|(j, (c, d))| spec.x(j) * (c.conj() * d).re)
            .sum::<f64>()
            / norm;
        self.buffer = buf;

        let hbar = units.hbar;
        let mean_p = hbar * mk;
        let mean_p2 = hbar * hbar * mk2;
        let _ = dx;
        Moments {
            mean_x: mx,
            dx: (mx2 - mx * mx).max(0.0).sqrt(),
            mean_p,
            dp: (mean_p2 - mean_p * mean_p).max(0.0).sqrt(),
            cov_xp: hbar * xp - mx * mean_p,
            kinetic: mean_p2 / (2.0 * units.mass),
        }
    }

    /// `⟨ψ| exp(i·shift·p̂/ħ) |ψ⟩ = Σ_k |ψ̂_k|² e^{i k shift}`, for a unit-norm
    /// state.
    pub fn momentum_characteristic(&mut self, state: &GridState, shift: f64) -> Complex64 {
        let mut buf = std::mem::take(&mut self.buffer);
        buf.copy_from_slice(&state.psi);
        self.forward(&mut buf);
        let spec = state.spec;
        let mut total = 0.0;
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, c) in buf.iter().enumerate() {
            let p = c.norm_sqr();
            total += p;
            acc += p * Complex64::from_polar(1.0, spec.k(j) * shift);
        }
        self.buffer = buf;
        acc / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean_x: f64,
    pub dx: f64,
    pub mean_p: f64,
    pub dp: f64,
    /// `⟨x̂p̂ + p̂x̂⟩/2 - ⟨x⟩⟨p⟩`.
    pub cov_xp: f64,
    /// `⟨p²⟩/2M`.
    pub kinetic: f64,
}

/// Effective Gaussian width parameter with the same second moments.
impl Moments {
    pub fn width(&self, hbar: f64) -> Complex64 {
        let re = 0.25 / (self.dx * self.dx);
        Complex64::new(re, -2.0 * re * self.cov_xp / hbar)
    }
}

fn kinetic_phase(spec: &GridSpec, units: &Units, dt: f64) -> Vec<Complex64> {
    let inv_n = 1.0 / spec.n as f64;
    (0..spec.n)
        .map(|j| Complex64::from_polar(inv_n, -units.hbar * spec.k(j).powi(2) * dt / (2.0 * units.mass)))
        .collect()
}

/// Multiplies `psi[j]` by `exp(c2 u² + c1 u)`, `u = x_j - center`, using an
/// incremental product refreshed every `BLOCK` points.
fn apply_quadratic_exponent(psi: &mut [Complex64], spec: &GridSpec, center: f64, c2: Complex64, c1: Complex64) {
    const BLOCK: usize = 64;
    let h = spec.dx();
    let step_ratio = (2.0 * c2 * h * h).exp();
    for (b, chunk) in psi.chunks_mut(BLOCK).enumerate() {
        let u0 = spec.x(b * BLOCK) - center;
        let mut m = (c2 * u0 * u0 + c1 * u0).exp();
        let mut r = (c2 * (2.0 * u0 * h + h * h) + c1 * h).exp();
        for c in chunk.iter_mut() {
            *c *= m;
            m *= r;
            r *= step_ratio;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `‖ψ‖² - 1` before renormalization.
    pub norm_deviation: f64,
    /// Centering position used for the stochastic generator.
    pub center: f64,
}

/// Strang-split stepper for the quadratic variants.
///
/// One step is: kinetic half step, centering on `⟨x⟩`, multiplication by
/// `exp(-β x_c² dt + λ x_c dW)` with the Ito-corrected drift
/// `β = κ + λ²/2`, kinetic half step, renormalization.
pub struct QuadraticStepper {
    variant: Variant,
    units: Units,
    dt: f64,
    workspace: Workspace,
    half_kick: Vec<Complex64>,
    beta: Complex64,
    lambda: Complex64,
}

impl QuadraticStepper {
    pub fn new(spec: GridSpec, variant: Variant, units: Units, dt: f64) -> Result<Self, GridError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(GridError::InvalidInput(format!("dt = {dt}")));
        }
        let phase_per_cell = units.hbar * dt / (2.0 * units.mass * spec.dx().powi(2));
        if phase_per_cell >= 0.5 {
            return Err(GridError::InvalidInput(format!(
                "dt = {dt} under-resolves the kinetic scale (ħ dt / 2M dx² = {phase_per_cell:.3})"
            )));
        }
        Ok(Self {
            variant,
            units,
            dt,
            workspace: Workspace::new(spec),
            half_kick: kinetic_phase(&spec, &units, 0.5 * dt),
            beta: variant.log_drift(&units),
            lambda: variant.noise_coupling(&units),
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

    pub fn workspace(&mut self) -> &mut Workspace {
        &mut self.workspace
    }

    pub fn step(&mut self, state: &mut GridState, dw: f64) -> Result<StepDiagnostics, GridError> {
        if state.spec != self.workspace.spec {
            return Err(GridError::InvalidInput("state and stepper grids differ".into()));
        }
        let kick = std::mem::take(&mut self.half_kick);
        self.workspace.apply_spectral(&mut state.psi, &kick);
        let center = state.mean_x();
        let spread2 = state
            .psi
            .iter()
            .enumerate()
            .map(|(j, c)| (state.spec.x(j) - center).powi(2) * c.norm_sqr())
            .sum::<f64>()
            * state.spec.dx();
        let c2 = -self.beta * self.dt;
        let c1 = self.lambda * dw;
        apply_quadratic_exponent(&mut state.psi, &state.spec, center, c2, c1);
        self.workspace.apply_spectral(&mut state.psi, &kick);
        self.half_kick = kick;

        let deviation = state.renormalize();
        // Leading-order size of the norm change of the exponential factor.
        let bound = 2.0 * spread2 * (self.beta.re.abs() * self.dt + self.lambda.re.powi(2) * dw * dw);
        if !(deviation.abs() <= 10.0 * bound + 1e-12) {
            return Err(GridError::StepSize { deviation, bound });
        }
        state.check_containment()?;
        Ok(StepDiagnostics { norm_deviation: deviation, center })
    }
}

/// Softened 1D gravitational kernel `-G M² / sqrt(Δ² + a_soft²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftKernelSpec {
    pub softening: f64,
    /// `G M²`.
    pub coupling: f64,
}

impl SoftKernelSpec {
    pub fn new(softening: f64, coupling: f64) -> Result<Self, GridError> {
        if !(softening.is_finite() && softening > 0.0) {
            return Err(GridError::InvalidInput(format!("softening length {softening}")));
        }
        if !(coupling.is_finite() && coupling >= 0.0) {
            return Err(GridError::InvalidInput(format!("coupling {coupling}")));
        }
        Ok(Self { softening, coupling })
    }

    pub fn kernel(&self, delta: f64) -> f64 {
        -self.coupling / (delta * delta + self.softening * self.softening).sqrt()
    }

    pub fn kernel_derivative(&self, delta: f64) -> f64 {
        self.coupling * delta / (delta * delta + self.softening * self.softening).powf(1.5)
    }
}

/// Deterministic Strang stepper for the nonlocal SNE with mean-field
/// potential `V = K_soft * |ψ|²`. The convolution is linear (not circular)
/// via zero padding to `2N`.
pub struct NonlocalStepper {
    units: Units,
    dt: f64,
    workspace: Workspace,
    half_kick: Vec<Complex64>,
    padded_forward: Arc<dyn Fft<f64>>,
    padded_inverse: Arc<dyn Fft<f64>>,
    padded_scratch: Vec<Complex64>,
    kernel_hat: Vec<Complex64>,
    padded: Vec<Complex64>,
}

impl NonlocalStepper {
    pub fn new(spec: GridSpec, kernel: SoftKernelSpec, units: Units, dt: f64) -> Result<Self, GridError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(GridError::InvalidInput(format!("dt = {dt}")));
        }
        if kernel.softening < 2.0 * spec.dx() {
            return Err(GridError::InvalidInput(format!(
                "softening {} is not resolved by dx = {}",
                kernel.softening,
                spec.dx()
            )));
        }
        let m = 2 * spec.n;
        let mut planner = FftPlanner::new();
        let padded_forward = planner.plan_fft_forward(m);
        let padded_inverse = planner.plan_fft_inverse(m);
        let scratch_len = padded_forward.get_inplace_scratch_len().max(padded_inverse.get_inplace_scratch_len());
        let mut padded_scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
        let h = spec.dx();
        // Lags 0..N-1 then -N..-1; the 1/M of the inverse and the dx of the
        // quadrature are folded in.
        let mut kernel_hat: Vec<Complex64> = (0..m)
            .map(|i| {
                let lag = if i < spec.n { i as f64 } else { i as f64 - m as f64 };
                Complex64::new(kernel.kernel(lag * h) * h / m as f64, 0.0)
            })
            .collect();
        padded_forward.process_with_scratch(&mut kernel_hat, &mut padded_scratch);
        Ok(Self {
            units,
            dt,
            workspace: Workspace::new(spec),
            half_kick: kinetic_phase(&spec, &units, 0.5 * dt),
            padded_forward,
            padded_inverse,
            padded_scratch,
            kernel_hat,
            padded: vec![Complex64::new(0.0, 0.0); m],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn workspace(&mut self) -> &mut Workspace {
        &mut self.workspace
    }

    /// Mean-field potential of `state` on its grid.
    pub fn potential(&mut self, state: &GridState) -> Vec<f64> {
        let n = state.spec.n;
        for (i, p) in self.padded.iter_mut().enumerate() {
            *p = if i < n { Complex64::new(state.psi[i].norm_sqr(), 0.0) } else { Complex64::new(0.0, 0.0) };
        }
        self.padded_forward.process_with_scratch(&mut self.padded, &mut self.padded_scratch);
        self.padded.iter_mut().zip(&self.kernel_hat).for_each(|(p, k)| *p *= k);
        self.padded_inverse.process_with_scratch(&mut self.padded, &mut self.padded_scratch);
        self.padded[..n].iter().map(|c| c.re).collect()
    }

    /// One unitary step; returns the norm change, which is checked against
    /// `1e-10`.
    pub fn step(&mut self, state: &mut GridState) -> Result<f64, GridError> {
        if state.spec != self.workspace.spec {
            return Err(GridError::InvalidInput("state and stepper grids differ".into()));
        }
        let before = state.norm_sq();
        let kick = std::mem::take(&mut self.half_kick);
        self.workspace.apply_spectral(&mut state.psi, &kick);
        let v = self.potential(state);
        let phase = -self.dt / self.units.hbar;
        state.psi.iter_mut().zip(&v).for_each(|(c, v)| *c *= Complex64::from_polar(1.0, phase * v));
        self.workspace.apply_spectral(&mut state.psi, &kick);
        self.half_kick = kick;
        let change = state.norm_sq() - before;
        if change.abs() > 1e-10 {
            return Err(GridError::NormDrift(change));
        }
        state.check_containment()?;
        Ok(change)
    }
}

/// Sampling options for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub record_every: usize,
    /// Two-branch geometry; adds the left branch weight to each sample.
    pub cat: Option<CatState>,
    /// Stops once the larger branch weight reaches this value.
    pub stop_at: Option<f64>,
    /// Records `⟨exp(i·shift·p̂/ħ)⟩` at each sample.
    pub coherence_shift: Option<f64>,
}

/// Runs the quadratic stepper along `noise`.
pub fn simulate(
    initial: &GridState,
    stepper: &mut QuadraticStepper,
    noise: &NoisePath,
    opts: &RunOptions,
) -> Result<TrajectoryRecord, GridError> {
    if (noise.dt - stepper.dt).abs() > 1e-15 * stepper.dt {
        return Err(GridError::InvalidInput("noise path and stepper use different dt".into()));
    }
    let every = opts.record_every.max(1);
    let units = stepper.units;
    let hbar = units.hbar;
    let mut state = initial.clone();
    let mut rec = TrajectoryRecord::new(noise.trajectory_index);
    let sample = |rec: &mut TrajectoryRecord, ws: &mut Workspace, state: &GridState, t: f64, worst: f64| -> Result<bool, GridError> {
        let m = ws.moments(state, &units);
        rec.times.push(t);
        rec.xbar.push(m.mean_x);
        rec.pbar.push(m.mean_p);
        rec.dx.push(m.dx);
        rec.kinetic.push(m.kinetic);
        rec.cov_xp.push(m.cov_xp);
        rec.width.push(m.width(hbar));
        rec.norm_deviation.push(worst);
        if let Some(shift) = opts.coherence_shift {
            rec.coherence.push(ws.momentum_characteristic(state, shift));
        }
        if let Some(c) = &opts.cat {
            let (l, r) = branch_weights(state, c)?;
            rec.branch_left.push(l);
            return Ok(opts.stop_at.is_some_and(|s| l.max(r) >= s));
        }
        Ok(false)
    };
    if sample(&mut rec, &mut stepper.workspace, &state, 0.0, 0.0)? {
        return Ok(rec);
    }
    let mut worst = 0.0f64;
    for k in 0..noise.n_steps() {
        let d = stepper.step(&mut state, noise.at(k)[0])?;
        worst = worst.max(d.norm_deviation.abs());
        if (k + 1) % every == 0 || k + 1 == noise.n_steps() {
            let t = (k + 1) as f64 * stepper.dt;
            if sample(&mut rec, &mut stepper.workspace, &state, t, worst)? {
                break;
            }
            worst = 0.0;
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NAT: Units = Units::natural();

    #[test]
    fn gaussian_moments_match_parameters() {
        let spec = GridSpec::standard();
        let mut ws = Workspace::new(spec);
        for v in Variant::ALL {
            let a = v.soliton_width(&NAT);
            let s = init_gaussian(spec, 1.3, -0.7, a, 1.0).unwrap();
            let m = ws.moments(&s, &NAT);
            let dx2 = 0.25 / a.re;
            assert!((m.mean_x - 1.3).abs() < 1e-10);
            assert!((m.mean_p + 0.7).abs() < 1e-10);
            assert!((m.dx * m.dx / dx2 - 1.0).abs() < 1e-10, "{v}");
            assert!((m.cov_xp + a.im / (2.0 * a.re)).abs() < 1e-10, "{v}: {}", m.cov_xp);
            assert!((m.width(1.0) - a).norm() < 1e-9);
            let ke = (0.49 + a.norm_sqr() / a.re) / 2.0;
            assert!((m.kinetic - ke).abs() < 1e-9);
        }
    }

    #[test]
    fn containment_is_enforced() {
        let spec = GridSpec::new(128, -5.0, 5.0).unwrap();
        assert!(init_gaussian(spec, 4.0, 0.0, Complex64::new(0.5, 0.0), 1.0).is_err());
        assert!(init_gaussian(spec, 0.0, 0.0, Complex64::new(2.0, 0.0), 1.0).is_ok());
        assert!(init_gaussian(spec, 0.0, 0.0, Complex64::new(-1.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn quadratic_exponent_recurrence_matches_direct() {
        let spec = GridSpec::new(300, -7.0, 9.0).unwrap();
        let mut psi = vec![Complex64::new(1.0, 0.0); spec.n];
        let (c2, c1) = (Complex64::new(-0.013, 0.004), Complex64::new(0.05, -0.05));
        apply_quadratic_exponent(&mut psi, &spec, 0.4, c2, c1);
        for (j, c) in psi.iter().enumerate() {
            let u = spec.x(j) - 0.4;
            let exact = (c2 * u * u + c1 * u).exp();
            assert!((c - exact).norm() < 1e-12 * exact.norm());
        }
    }

    #[test]
    fn cat_weights_and_validation() {
        let spec = GridSpec::standard();
        let a = Variant::Gsse.soliton_width(&NAT);
        let cat = CatState::symmetric(a, 6.0).unwrap();
        let s = init_cat(spec, &cat, 1.0).unwrap();
        let (l, r) = branch_weights(&s, &cat).unwrap();
        assert!((l - 0.5).abs() < 1e-12 && (l + r - 1.0).abs() < 1e-12);
        let skew = CatState::new(a, 12.0, [0.2, 0.8]).unwrap();
        let (l, _) = branch_weights(&init_cat(spec, &skew, 1.0).unwrap(), &skew).unwrap();
        assert!((l - 0.2).abs() < 1e-6);
        assert!(matches!(CatState::symmetric(a, 2.0), Err(GridError::IllDefinedBranches { .. })));
        assert!(CatState::new(a, 6.0, [0.5, 0.6]).is_err());
    }

    #[test]
    fn characteristic_function_of_gaussian() {
        let spec = GridSpec::standard();
        let mut ws = Workspace::new(spec);
        let s = init_gaussian(spec, 0.0, 0.0, Complex64::new(0.5, 0.0), 1.0).unwrap();
        // ⟨e^{iℓp}⟩ = exp(-ℓ² a/2) for real a.
        for shift in [0.0, 0.5, 2.0] {
            let c = ws.momentum_characteristic(&s, shift);
            assert!((c.re - (-0.25 * shift * shift).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn sne_soliton_stays_put() {
        let spec = GridSpec::standard();
        let a = Variant::Sne.soliton_width(&NAT);
        let init = init_gaussian(spec, 0.0, 0.0, a, 1.0).unwrap();
        let mut stepper = QuadraticStepper::new(spec, Variant::Sne, NAT, 1e-3).unwrap();
        let mut s = init.clone();
        for _ in 0..2000 {
            let d = stepper.step(&mut s, 0.0).unwrap();
            assert!(d.norm_deviation.abs() < 1e-12);
        }
        assert!(s.fidelity(&init) > 1.0 - 1e-9);
    }

    #[test]
    fn gsse_norm_change_is_small_and_centered() {
        let spec = GridSpec::standard();
        let a = Variant::Gsse.soliton_width(&NAT);
        let mut s = init_gaussian(spec, 0.0, 0.0, a, 1.0).unwrap();
        let dt = 1e-3;
        let mut stepper = QuadraticStepper::new(spec, Variant::Gsse, NAT, dt).unwrap();
        let path = crate::noise::wiener_increments(5, 0, 4000, dt, 1).unwrap();
        let devs: Vec<f64> = (0..4000).map(|k| stepper.step(&mut s, path.at(k)[0]).unwrap().norm_deviation).collect();
        let mean = devs.iter().sum::<f64>() / devs.len() as f64;
        let sd = (devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / devs.len() as f64).sqrt();
        assert!(sd < 5.0 * dt, "sd {sd}");
        assert!(mean.abs() < 4.0 * sd / (devs.len() as f64).sqrt() + 1e-6, "mean {mean} sd {sd}");
    }

    #[test]
    fn stepper_rejects_coarse_dt() {
        assert!(QuadraticStepper::new(GridSpec::standard(), Variant::Gsse, NAT, 0.01).is_err());
    }

    #[test]
    fn nonlocal_potential_matches_direct_sum() {
        let spec = GridSpec::new(256, -10.0, 10.0).unwrap();
        let kernel = SoftKernelSpec::new(0.5, 2.0).unwrap();
        let mut st = NonlocalStepper::new(spec, kernel, NAT, 1e-3).unwrap();
        let s = init_gaussian(spec, 1.0, 0.0, Complex64::new(0.8, 0.2), 1.0).unwrap();
        let v = st.potential(&s);
        let h = spec.dx();
        for j in (0..spec.n).step_by(17) {
            let direct: f64 = (0..spec.n).map(|i| kernel.kernel(spec.x(j) - spec.x(i)) * s.psi[i].norm_sqr() * h).sum();
            assert!((v[j] - direct).abs() < 1e-12, "{j}: {} {direct}", v[j]);
        }
    }

    #[test]
    fn nonlocal_step_is_unitary() {
        let spec = GridSpec::new(512, -15.0, 15.0).unwrap();
        let kernel = SoftKernelSpec::new(1.0, 1.0).unwrap();
        let mut st = NonlocalStepper::new(spec, kernel, NAT, 1e-3).unwrap();
        let cat = CatState::symmetric(Complex64::new(1.0, 0.0), 4.0).unwrap();
        let mut s = init_cat(spec, &cat, 1.0).unwrap();
        for _ in 0..200 {
            assert!(st.step(&mut s).unwrap().abs() < 1e-12);
        }
        assert!(s.mean_x().abs() < 1e-10);
    }
}
