//! Reproducible Wiener increments and the spatially correlated collapse
//! noise field.
//!
//! Every random number is addressed by a counter: normal number `c` of
//! stream `j` under base seed `s` is produced from ChaCha8 keyed by `s`,
//! stream `j`, word offset `4c`. Sequential and random-access generation
//! agree bit for bit, so results never depend on evaluation order.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, MassProfile};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise parameter: {0}")]
    InvalidParameter(String),
    #[error("grid does not resolve the profile: {0}")]
    Resolution(String),
}

fn uniform_open(x: u64) -> f64 {
    ((x >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> f64 {
    (-2.0 * uniform_open(a).ln()).sqrt() * (2.0 * PI * uniform_open(b)).cos()
}

/// Sequential reader of one counter-addressed normal stream.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(base_seed: u64, stream: u64, start: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(stream);
        rng.set_word_pos(4 * start as u128);
        Self { rng }
    }

    pub fn next_normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        box_muller(a, b)
    }
}

/// Standard normal number `counter` of `stream` under `base_seed`.
pub fn standard_normal_at(base_seed: u64, stream: u64, counter: u64) -> f64 {
    NormalStream::new(base_seed, stream, counter).next_normal()
}

/// Wiener increments of one trajectory, stored step-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePath {
    pub base_seed: u64,
    pub trajectory_index: u64,
    pub dt: f64,
    pub n_axes: usize,
    pub increments: Vec<f64>,
}

impl NoisePath {
    pub fn n_steps(&self) -> usize {
        self.increments.len() / self.n_axes
    }

    /// Increments of every axis at `step`.
    pub fn at(&self, step: usize) -> &[f64] {
        &self.increments[step * self.n_axes..(step + 1) * self.n_axes]
    }

    /// Sum of increments over steps `[from, to)` on one axis.
    pub fn integrated(&self, axis: usize, from: usize, to: usize) -> f64 {
        (from..to).map(|k| self.at(k)[axis]).sum()
    }
}

/// `n_steps × n_axes` independent `Normal(0, dt)` increments for trajectory
/// `trajectory_index`. Increment `(k, axis)` uses counter `k·n_axes + axis`.
pub fn wiener_increments(
    base_seed: u64,
    trajectory_index: u64,
    n_steps: usize,
    dt: f64,
    n_axes: usize,
) -> Result<NoisePath, NoiseError> {
    if n_steps == 0 || n_axes == 0 {
        return Err(NoiseError::InvalidParameter("n_steps and n_axes must be at least 1".into()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(NoiseError::InvalidParameter(format!("dt = {dt}")));
    }
    let sd = dt.sqrt();
    let mut stream = NormalStream::new(base_seed, trajectory_index, 0);
    let increments = (0..n_steps * n_axes).map(|_| sd * stream.next_normal()).collect();
    Ok(NoisePath { base_seed, trajectory_index, dt, n_axes, increments })
}

/// Periodic cubic grid of `n³` cells with the origin on cell `n/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiGrid {
    pub n: usize,
    pub spacing: f64,
}

impl PhiGrid {
    pub fn new(n: usize, spacing: f64) -> Result<Self, NoiseError> {
        if n < 4 || n % 2 != 0 {
            return Err(NoiseError::InvalidParameter(format!("grid size {n} must be even and >= 4")));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(NoiseError::InvalidParameter(format!("spacing = {spacing}")));
        }
        Ok(Self { n, spacing })
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn box_length(&self) -> f64 {
        self.n as f64 * self.spacing
    }

    pub fn volume(&self) -> f64 {
        self.box_length().powi(3)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n + j) * self.n + k
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) * self.spacing
    }

    /// Angular wavenumber of FFT bin `i`; the Nyquist bin maps to `-π/h`.
    pub fn wavenumber(&self, i: usize) -> f64 {
        let n = self.n as i64;
        let m = if (i as i64) < n / 2 { i as i64 } else { i as i64 - n };
        2.0 * PI * m as f64 / self.box_length()
    }

    /// Wavenumber used for derivatives: zero on the Nyquist bin.
    fn derivative_wavenumber(&self, i: usize) -> f64 {
        if i == self.n / 2 {
            0.0
        } else {
            self.wavenumber(i)
        }
    }
}

/// In-place 3D FFT along the three axes of a `PhiGrid` buffer.
struct Fft3 {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    n: usize,
}

impl Fft3 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n), n }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let fft = if inverse { &self.inverse } else { &self.forward };
        // Contiguous axis.
        fft.process(data);
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for (stride, outer) in [(n, n * n), (n * n, 1)] {
            for block in 0..n * n {
                let base = if outer == 1 {
                    block
                } else {
                    (block / n) * outer + block % n
                };
                for (t, v) in line.iter_mut().enumerate() {
                    *v = data[base + t * stride];
                }
                fft.process(&mut line);
                for (t, v) in line.iter().enumerate() {
                    data[base + t * stride] = *v;
                }
            }
        }
    }
}

/// One time step of the collapse noise field on a periodic grid.
///
/// `increments` holds `∫_t^{t+dt} Φ dt'` per cell; its covariance is the
/// lattice version of `G ħ dt / |r - s|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiFieldSample {
    pub grid: PhiGrid,
    pub dt: f64,
    pub increments: Vec<f64>,
}

/// Spectral filter `sqrt(4π G ħ / k²)`, zero on the uniform mode.
fn coulomb_filter(grid: &PhiGrid, g_hbar: f64, i: usize, j: usize, k: usize) -> f64 {
    let k2 = grid.wavenumber(i).powi(2) + grid.wavenumber(j).powi(2) + grid.wavenumber(k).powi(2);
    if k2 == 0.0 {
        0.0
    } else {
        (4.0 * PI * g_hbar / k2).sqrt()
    }
}

/// Spectral synthesis of field increments: white noise of cell variance
/// `dt/h³`, filtered by `sqrt(4π G ħ / k²)`.
pub struct PhiSampler {
    grid: PhiGrid,
    fft: Fft3,
    filter: Vec<f64>,
}

impl PhiSampler {
    pub fn new(grid: &PhiGrid, g_hbar: f64) -> Result<Self, NoiseError> {
        if !(g_hbar.is_finite() && g_hbar > 0.0) {
            return Err(NoiseError::InvalidParameter(format!("G·hbar = {g_hbar}")));
        }
        let scale = 1.0 / grid.len() as f64;
        let mut filter = vec![0.0; grid.len()];
        for i in 0..grid.n {
            for j in 0..grid.n {
                for k in 0..grid.n {
                    filter[grid.index(i, j, k)] = coulomb_filter(grid, g_hbar, i, j, k) * scale;
                }
            }
        }
        Ok(Self { grid: *grid, fft: Fft3::new(grid.n), filter })
    }

    /// Field increment `sample_index` of the stream keyed by `base_seed`.
    pub fn sample(&self, dt: f64, base_seed: u64, sample_index: u64) -> Result<PhiFieldSample, NoiseError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(NoiseError::InvalidParameter(format!("dt = {dt}")));
        }
        let cell_sd = (dt / self.grid.spacing.powi(3)).sqrt();
        let mut stream = NormalStream::new(base_seed, sample_index, 0);
        let mut data: Vec<Complex64> =
            (0..self.grid.len()).map(|_| Complex64::new(cell_sd * stream.next_normal(), 0.0)).collect();
        self.fft.run(&mut data, false);
        data.iter_mut().zip(&self.filter).for_each(|(d, f)| *d *= *f);
        self.fft.run(&mut data, true);
        Ok(PhiFieldSample { grid: self.grid, dt, increments: data.iter().map(|c| c.re).collect() })
    }
}

/// One-off version of [`PhiSampler::sample`].
pub fn sample_phi_field(
    grid: &PhiGrid,
    dt: f64,
    g_hbar: f64,
    base_seed: u64,
    sample_index: u64,
) -> Result<PhiFieldSample, NoiseError> {
    PhiSampler::new(grid, g_hbar)?.sample(dt, base_seed, sample_index)
}

/// Exact covariance per unit time of two lattice field samples separated by
/// `offset` cells: `(1/V) Σ_k (4π G ħ / k²) cos(k·r)`.
pub fn lattice_covariance(grid: &PhiGrid, g_hbar: f64, offset: [usize; 3]) -> f64 {
    let mut sum = 0.0;
    for i in 0..grid.n {
        for j in 0..grid.n {
            for k in 0..grid.n {
                let s = coulomb_filter(grid, g_hbar, i, j, k).powi(2);
                if s == 0.0 {
                    continue;
                }
                let phase = grid.wavenumber(i) * offset[0] as f64
                    + grid.wavenumber(j) * offset[1] as f64
                    + grid.wavenumber(k) * offset[2] as f64;
                sum += s * (phase * grid.spacing).cos();
            }
        }
    }
    sum / grid.volume()
}

/// Profile sampled at cell centres around the grid origin, rescaled so the
/// lattice sum `Σ f h³` is exactly one.
fn sampled_density(grid: &PhiGrid, profile: &MassProfile) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for i in 0..grid.n {
        let x = grid.coordinate(i);
        for j in 0..grid.n {
            let y = grid.coordinate(j);
            for k in 0..grid.n {
                let z = grid.coordinate(k);
                out[grid.index(i, j, k)] = profile.density((x * x + y * y + z * z).sqrt());
            }
        }
    }
    let total: f64 = out.iter().sum::<f64>() * grid.spacing.powi(3);
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn check_resolution(grid: &PhiGrid, profile: &MassProfile) -> Result<(), NoiseError> {
    let cells = profile.scale() / grid.spacing;
    if cells < 8.0 {
        return Err(NoiseError::Resolution(format!(
            "profile scale spans {cells:.2} cells, need at least 8"
        )));
    }
    if profile.support() + grid.spacing > 0.5 * grid.box_length() {
        return Err(NoiseError::Resolution(format!(
            "profile support {} does not fit in a periodic box of side {}",
            profile.support(),
            grid.box_length()
        )));
    }
    Ok(())
}

/// Projection of the field onto the profile gradient,
/// `w = sqrt(M/ħ) ω_G⁻¹ ∫ ∇f(r) Φ(r) d³r`.
///
/// The gradient of the lattice-sampled profile is taken spectrally once, so
/// each reduction is a real-space dot product. For field increments of
/// duration `dt` the result is a Wiener increment with covariance `I₃ dt`.
pub struct PhiReducer {
    grid: PhiGrid,
    density_hat: Vec<Complex64>,
    gradient: [Vec<f64>; 3],
    prefactor: f64,
}

impl PhiReducer {
    pub fn new(grid: &PhiGrid, profile: &MassProfile) -> Result<Self, NoiseError> {
        check_resolution(grid, profile)?;
        let fft = Fft3::new(grid.n);
        let mut density_hat: Vec<Complex64> =
            sampled_density(grid, profile).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        fft.run(&mut density_hat, false);
        let inv_n = 1.0 / grid.len() as f64;
        let gradient = [0usize, 1, 2].map(|axis| {
            let mut buf = density_hat.clone();
            for i in 0..grid.n {
                for j in 0..grid.n {
                    for k in 0..grid.n {
                        let kv = [i, j, k].map(|m| grid.derivative_wavenumber(m));
                        buf[grid.index(i, j, k)] *= Complex64::new(0.0, kv[axis] * inv_n);
                    }
                }
            }
            fft.run(&mut buf, true);
            buf.into_iter().map(|c| c.re).collect::<Vec<f64>>()
        });
        let c = profile.constants;
        let prefactor = (c.mass / c.hbar).sqrt() / model::omega_g(profile);
        Ok(Self { grid: *grid, density_hat, gradient, prefactor })
    }

    pub fn reduce(&self, field: &PhiFieldSample) -> Result<[f64; 3], NoiseError> {
        if field.grid != self.grid {
            return Err(NoiseError::InvalidParameter("field and reducer grids differ".into()));
        }
        let h3 = self.grid.spacing.powi(3);
        Ok([0, 1, 2].map(|axis| {
            let dot: f64 = self.gradient[axis].iter().zip(&field.increments).map(|(g, p)| g * p).sum();
            self.prefactor * h3 * dot
        }))
    }

    /// Exact covariance per unit time of the reduced noise on this lattice.
    pub fn expected_covariance(&self, g_hbar: f64) -> [[f64; 3]; 3] {
        let g = &self.grid;
        let h3 = g.spacing.powi(3);
        let mut cov = [[0.0; 3]; 3];
        for i in 0..g.n {
            for j in 0..g.n {
                for k in 0..g.n {
                    let s2 = coulomb_filter(g, g_hbar, i, j, k).powi(2);
                    if s2 == 0.0 {
                        continue;
                    }
                    let kv = [i, j, k].map(|m| g.derivative_wavenumber(m));
                    let w = s2 * (h3 * self.density_hat[g.index(i, j, k)]).norm_sqr();
                    for a in 0..3 {
                        for b in 0..3 {
                            cov[a][b] += w * kv[a] * kv[b];
                        }
                    }
                }
            }
        }
        let scale = self.prefactor.powi(2) / g.volume();
        cov.map(|row| row.map(|v| v * scale))
    }
}

/// Convenience wrapper over [`PhiReducer`] for a single sample.
pub fn reduce_phi_to_w(field: &PhiFieldSample, profile: &MassProfile) -> Result<[f64; 3], NoiseError> {
    PhiReducer::new(&field.grid, profile)?.reduce(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Constants;

    #[test]
    fn increments_are_reproducible_and_random_access() {
        let a = wiener_increments(7, 3, 100, 1e-3, 3).unwrap();
        let b = wiener_increments(7, 3, 100, 1e-3, 3).unwrap();
        assert_eq!(a, b);
        for (c, &v) in a.increments.iter().enumerate().step_by(37) {
            assert_eq!(v, 1e-3f64.sqrt() * standard_normal_at(7, 3, c as u64));
        }
        let other = wiener_increments(7, 4, 100, 1e-3, 3).unwrap();
        assert_ne!(a.increments, other.increments);
        assert_eq!(a.n_steps(), 100);
    }

    #[test]
    fn increments_reject_bad_input() {
        assert!(wiener_increments(0, 0, 0, 1e-3, 1).is_err());
        assert!(wiener_increments(0, 0, 10, -1.0, 1).is_err());
        assert!(wiener_increments(0, 0, 10, 1e-3, 0).is_err());
    }

    #[test]
    fn increment_moments() {
        let dt = 1e-3;
        let path = wiener_increments(2024, 0, 1_000_000, dt, 1).unwrap();
        let n = path.increments.len() as f64;
        let mean = path.increments.iter().sum::<f64>() / n;
        let var = path.increments.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 * (dt / n).sqrt(), "mean {mean}");
        assert!((var / dt - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn lattice_covariance_grows_at_contact_with_refinement() {
        let coarse = PhiGrid::new(8, 1.0).unwrap();
        let fine = PhiGrid::new(16, 0.5).unwrap();
        let c0 = lattice_covariance(&coarse, 1.0, [0, 0, 0]);
        let c1 = lattice_covariance(&fine, 1.0, [0, 0, 0]);
        assert!(c1 > 1.8 * c0, "{c0} {c1}");
    }

    #[test]
    fn reducer_enforces_resolution() {
        let p = MassProfile::uniform_sphere(1.0, Constants::unit()).unwrap();
        assert!(matches!(PhiReducer::new(&PhiGrid::new(32, 0.25).unwrap(), &p), Err(NoiseError::Resolution(_))));
        assert!(matches!(PhiReducer::new(&PhiGrid::new(16, 0.1).unwrap(), &p), Err(NoiseError::Resolution(_))));
        assert!(PhiReducer::new(&PhiGrid::new(32, 0.1).unwrap(), &p).is_ok());
    }

    #[test]
    fn sampled_two_point_covariance_matches_lattice() {
        let grid = PhiGrid::new(16, 1.0).unwrap();
        let sampler = PhiSampler::new(&grid, 1.0).unwrap();
        let dt = 0.5;
        let n_samples = 400;
        let offsets = [[0usize, 0, 0], [2, 0, 0], [1, 1, 0]];
        let mut acc = [0.0; 3];
        for m in 0..n_samples {
            let f = sampler.sample(dt, 11, m).unwrap();
            for (o, off) in offsets.iter().enumerate() {
                let mut sum = 0.0;
                for i in 0..grid.n {
                    for j in 0..grid.n {
                        for k in 0..grid.n {
                            let b = grid.index((i + off[0]) % grid.n, (j + off[1]) % grid.n, (k + off[2]) % grid.n);
                            sum += f.increments[grid.index(i, j, k)] * f.increments[b];
                        }
                    }
                }
                acc[o] += sum / grid.len() as f64;
            }
        }
        for (o, off) in offsets.iter().enumerate() {
            let empirical = acc[o] / (n_samples as f64 * dt);
            let exact = lattice_covariance(&grid, 1.0, *off);
            assert!((empirical / exact - 1.0).abs() < 0.05, "{off:?}: {empirical} vs {exact}");
        }
    }

    #[test]
    fn lattice_covariance_approaches_periodic_coulomb() {
        // Periodic 1/s with the uniform mode removed: the Ewald constant of
        // the simple cubic lattice plus the neutralizing-background term.
        let g_hbar = 2.0;
        let grid = PhiGrid::new(64, 0.5).unwrap();
        let l = grid.box_length();
        for cells in [12usize, 16, 20] {
            let s = cells as f64 * grid.spacing;
            let ewald = g_hbar * (1.0 / s - 2.837297 / l + 2.0 * PI / 3.0 * s * s / l.powi(3));
            let lattice = lattice_covariance(&grid, g_hbar, [cells, 0, 0]);
            assert!((lattice / ewald - 1.0).abs() < 0.03, "s={s}: {lattice} vs {ewald}");
        }
    }

    #[test]
    fn reduced_covariance_is_isotropic_and_mass_independent() {
        let grid = PhiGrid::new(24, 0.125).unwrap();
        let light = MassProfile::uniform_sphere(1.0, Constants::unit()).unwrap();
        let heavy = MassProfile::uniform_sphere(1.0, Constants::unit().with_mass(40.0)).unwrap();
        let c1 = PhiReducer::new(&grid, &light).unwrap().expected_covariance(1.0);
        let c2 = PhiReducer::new(&grid, &heavy).unwrap().expected_covariance(1.0);
        for a in 0..3 {
            assert!((c1[a][a] - c1[0][0]).abs() < 1e-12);
            assert!((c1[a][a] - c2[a][a]).abs() < 1e-12 * c1[a][a]);
            for b in 0..3 {
                if a != b {
                    assert!(c1[a][b].abs() < 1e-12);
                }
            }
        }
    }
}
