//! Trajectory ensembles and the estimators fitted to them.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{self, AxisState, GaussianError, GaussianPropagator};
use crate::grid::{self, CatState, GridError, GridSpec, QuadraticStepper, RunOptions};
use crate::noise::{wiener_increments, NoiseError};
use crate::record::{Observable, TrajectoryRecord};
use crate::variant::{Units, Variant};

/// Smallest ensemble accepted by the estimators.
pub const MIN_TRAJECTORIES: usize = 100;
/// Largest censored fraction accepted by [`collapse_time_stats`].
pub const MAX_CENSORED_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory {index}: {source}")]
    Trajectory { index: u64, source: SolverError },
    #[error("statistics: {0}")]
    Statistics(String),
    #[error("{censored} of {total} trajectories never reached the threshold")]
    Censored { censored: usize, total: usize },
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Gaussian,
    Grid,
}

impl std::str::FromStr for Solver {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Solver::Gaussian),
            "grid" => Ok(Solver::Grid),
            other => Err(format!("unknown solver `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialState {
    /// The variant's stationary packet at rest at the origin.
    Soliton,
    Gaussian { xbar: f64, pbar: f64, a: Complex64 },
    Cat(CatState),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub variant: Variant,
    pub solver: Solver,
    pub n_trajectories: usize,
    pub t_final: f64,
    pub dt: f64,
    pub base_seed: u64,
    pub initial: InitialState,
    pub observables: Vec<Observable>,
    pub record_every: usize,
    pub units: Units,
    pub grid: GridSpec,
    /// Stop a cat trajectory once its larger branch weight reaches this.
    pub stop_at: Option<f64>,
    /// Record `⟨exp(i·shift·p̂/ħ)⟩` (grid solver only).
    pub coherence_shift: Option<f64>,
    /// Thread count; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl EnsembleConfig {
    /// Soliton initial state in natural units on the standard grid,
    /// sampling every 10 steps.
    pub fn new(variant: Variant, solver: Solver, n_trajectories: usize, t_final: f64, dt: f64, base_seed: u64) -> Self {
        Self {
            variant,
            solver,
            n_trajectories,
            t_final,
            dt,
            base_seed,
            initial: InitialState::Soliton,
            observables: vec![Observable::Xbar, Observable::Pbar, Observable::Dx, Observable::Kinetic],
            record_every: 10,
            units: Units::natural(),
            grid: GridSpec::standard(),
            stop_at: None,
            coherence_shift: None,
            workers: None,
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let bad = |m: String| Err(EnsembleError::InvalidConfig(m));
        if self.n_trajectories < 2 {
            return bad(format!("n_trajectories = {} (need at least 2)", self.n_trajectories));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return bad(format!("t_final = {}", self.t_final));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) || self.n_steps() == 0 {
            return bad(format!("dt = {} for t_final = {}", self.dt, self.t_final));
        }
        if ((self.n_steps() as f64 * self.dt) / self.t_final - 1.0).abs() > 1e-9 {
            return bad(format!("t_final = {} is not a whole number of steps of {}", self.t_final, self.dt));
        }
        if self.solver == Solver::Gaussian {
            if matches!(self.initial, InitialState::Cat(_)) {
                return bad("cat states need the grid solver".into());
            }
            if self.coherence_shift.is_some() {
                return bad("coherence recording needs the grid solver".into());
            }
        }
        if self.stop_at.is_some() && !matches!(self.initial, InitialState::Cat(_)) {
            return bad("stop_at applies to cat states only".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        Ok(())
    }

    fn initial_axis(&self) -> AxisState {
        match self.initial {
            InitialState::Soliton => AxisState { xbar: 0.0, pbar: 0.0, a: self.variant.soliton_width(&self.units) },
            InitialState::Gaussian { xbar, pbar, a } => AxisState { xbar, pbar, a },
            InitialState::Cat(_) => unreachable!("validated"),
        }
    }
}

/// One trajectory of `cfg`, driven by the noise stream `(base_seed, index)`.
pub fn run_trajectory(cfg: &EnsembleConfig, index: u64) -> Result<TrajectoryRecord, SolverError> {
    let noise = wiener_increments(cfg.base_seed, index, cfg.n_steps(), cfg.dt, 1)?;
    match cfg.solver {
        Solver::Gaussian => {
            let prop = GaussianPropagator::new(cfg.variant, cfg.units, cfg.dt)?;
            Ok(gaussian::simulate(&cfg.initial_axis(), &prop, &noise, cfg.record_every)?)
        }
        Solver::Grid => {
            let mut stepper = QuadraticStepper::new(cfg.grid, cfg.variant, cfg.units, cfg.dt)?;
            let (initial, cat) = match cfg.initial {
                InitialState::Cat(c) => (grid::init_cat(cfg.grid, &c, cfg.units.hbar)?, Some(c)),
                _ => {
                    let s = cfg.initial_axis();
                    (grid::init_gaussian(cfg.grid, s.xbar, s.pbar, s.a, cfg.units.hbar)?, None)
                }
            };
            let opts = RunOptions {
                record_every: cfg.record_every,
                cat,
                stop_at: cfg.stop_at,
                coherence_shift: cfg.coherence_shift,
            };
            Ok(grid::simulate(&initial, &mut stepper, &noise, &opts)?)
        }
    }
}

/// Runs trajectories `0..n_trajectories`. The result is ordered by index
/// and does not depend on scheduling.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<Vec<TrajectoryRecord>, EnsembleError> {
    cfg.validate()?;
    let job = || {
        (0..cfg.n_trajectories as u64)
            .into_par_iter()
            .map(|i| run_trajectory(cfg, i).map_err(|source| EnsembleError::Trajectory { index: i, source }))
            .collect::<Result<Vec<_>, _>>()
    };
    match cfg.workers {
        None => job(),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| EnsembleError::InvalidConfig(format!("thread pool: {e}")))?
            .install(job),
    }
}

/// Point estimate with uncertainty and fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub quantity: String,
    pub estimate: f64,
    pub stderr: f64,
    pub fit_window: [f64; 2],
    pub r_squared: Option<f64>,
    /// Set when a significant trend is poorly described by the fit.
    pub residual_trend: bool,
    pub n_trajectories: usize,
    pub details: BTreeMap<String, f64>,
}

impl EstimatorResult {
    /// `|estimate - target| <= max(tolerance, 3·stderr)`.
    pub fn agrees_with(&self, target: f64, tolerance: f64) -> bool {
        (self.estimate - target).abs() <= tolerance.max(3.0 * self.stderr)
    }

    pub fn detail(&self, key: &str) -> Option<f64> {
        self.details.get(key).copied()
    }
}

/// Resampling controls for bootstrap standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for Bootstrap {
    fn default() -> Self {
        Self { resamples: 200, seed: 0x5eed }
    }
}

impl Bootstrap {
    /// Applies `stat` to `resamples` index resamplings of `0..n`.
    fn replicate<F: Fn(&[usize]) -> T, T>(&self, n: usize, stat: F) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = vec![0usize; n];
        (0..self.resamples)
            .map(|_| {
                idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
                stat(&idx)
            })
            .collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Least squares `y ≈ Σ c_i t^{p_i}`. Times are rescaled internally.
pub fn polyfit(ts: &[f64], ys: &[f64], powers: &[i32]) -> Vec<f64> {
    let scale = ts.iter().fold(0.0f64, |m, t| m.max(t.abs())).max(f64::MIN_POSITIVE);
    let d = powers.len();
    let mut ata = vec![vec![0.0; d]; d];
    let mut aty = vec![0.0; d];
    for (&t, &y) in ts.iter().zip(ys) {
        let row: Vec<f64> = powers.iter().map(|&p| (t / scale).powi(p)).collect();
        for i in 0..d {
            aty[i] += row[i] * y;
            for j in 0..d {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let c = solve_dense(ata, aty);
    c.iter().zip(powers).map(|(c, &p)| c / scale.powi(p)).collect()
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        if d == 0.0 {
            return vec![f64::NAN; n];
        }
        for row in col + 1..n {
            let f = a[row][col] / d;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn r_squared(ts: &[f64], ys: &[f64], powers: &[i32], coef: &[f64]) -> f64 {
    let m = mean(ys);
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&t, &y) in ts.iter().zip(ys) {
        let fit: f64 = coef.iter().zip(powers).map(|(c, &p)| c * t.powi(p)).sum();
        ss_res += (y - fit).powi(2);
        ss_tot += (y - m).powi(2);
    }
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

fn common_times(records: &[TrajectoryRecord]) -> Result<&[f64], EnsembleError> {
    if records.len() < MIN_TRAJECTORIES {
        return Err(EnsembleError::Statistics(format!(
            "{} trajectories, need at least {MIN_TRAJECTORIES}",
            records.len()
        )));
    }
    let t = &records[0].times;
    if records.iter().any(|r| r.times != *t) {
        return Err(EnsembleError::Statistics("records are sampled at different times".into()));
    }
    Ok(t)
}

fn window_indices(times: &[f64], window: Option<[f64; 2]>) -> Result<(Vec<usize>, [f64; 2]), EnsembleError> {
    let [lo, hi] = window.unwrap_or([times[0], *times.last().unwrap()]);
    let idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] >= lo - 1e-12 && times[i] <= hi + 1e-12).collect();
    if idx.len() < 3 {
        return Err(EnsembleError::Statistics(format!("fit window [{lo}, {hi}] holds {} samples", idx.len())));
    }
    Ok((idx.clone(), [times[idx[0]], times[*idx.last().unwrap()]]))
}

/// Growth rate of `⟨p²⟩/2M` per simulated axis: the mean of per-trajectory
/// least-squares slopes over `window`, with standard error `sd/√n`.
pub fn estimate_ke_rate(records: &[TrajectoryRecord], window: Option<[f64; 2]>) -> Result<EstimatorResult, EnsembleError> {
    let times = common_times(records)?;
    let (idx, fit_window) = window_indices(times, window)?;
    let ts: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
    let slopes: Vec<f64> = records
        .iter()
        .map(|r| {
            let ys: Vec<f64> = idx.iter().map(|&i| r.kinetic[i]).collect();
            polyfit(&ts, &ys, &[0, 1])[1]
        })
        .collect();
    let n = slopes.len() as f64;
    let estimate = mean(&slopes);
    let stderr = sample_sd(&slopes) / n.sqrt();
    let ens: Vec<f64> = idx.iter().map(|&i| records.iter().map(|r| r.kinetic[i]).sum::<f64>() / n).collect();
    let coef = polyfit(&ts, &ens, &[0, 1]);
    let r2 = r_squared(&ts, &ens, &[0, 1], &coef);
    let significant = estimate.abs() > 3.0 * stderr;
    let mut details = BTreeMap::new();
    details.insert("three_axis_rate".into(), 3.0 * estimate);
    details.insert("initial_mean".into(), ens[0]);
    Ok(EstimatorResult {
        quantity: "kinetic_energy_rate".into(),
        estimate,
        stderr,
        fit_window,
        r_squared: Some(r2),
        residual_trend: significant && r2 < 0.95,
        n_trajectories: records.len(),
        details,
    })
}

/// Shape of the variance law fitted by [`estimate_diffusion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceModel {
    /// `Var = c₁ t` (with an intercept when the window starts late).
    Linear,
    /// `Var = c₁ t + c₂ t² + c₃ t³`.
    Cubic,
}

fn variance_at(records: &[TrajectoryRecord], obs: Observable, i: usize, pick: &[usize]) -> f64 {
    let n = pick.len() as f64;
    let (mut s, mut s2) = (0.0, 0.0);
    for &k in pick {
        let v = records[k].series(obs)[i];
        s += v;
        s2 += v * v;
    }
    let m = s / n;
    (s2 - n * m * m) / (n - 1.0)
}

fn covariance_at(records: &[TrajectoryRecord], i: usize, pick: &[usize]) -> f64 {
    let n = pick.len() as f64;
    let (mut sx, mut sp, mut sxp) = (0.0, 0.0, 0.0);
    for &k in pick {
        let (x, p) = (records[k].xbar[i], records[k].pbar[i]);
        sx += x;
        sp += p;
        sxp += x * p;
    }
    (sxp - sx * sp / n) / (n - 1.0)
}

fn fit_moment_law<F: Fn(usize, &[usize]) -> f64>(
    records: &[TrajectoryRecord],
    window: Option<[f64; 2]>,
    powers_for: impl Fn(bool) -> Vec<i32>,
    moment: F,
    boot: Bootstrap,
) -> Result<(Vec<i32>, Vec<f64>, Vec<f64>, f64, [f64; 2]), EnsembleError> {
    let times = common_times(records)?;
    let (idx, fit_window) = window_indices(times, window)?;
    let from_start = idx[0] == 0;
    let powers = powers_for(from_start);
    let ts: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
    let all: Vec<usize> = (0..records.len()).collect();
    let curve = |pick: &[usize]| -> Vec<f64> { idx.iter().map(|&i| moment(i, pick)).collect() };
    let ys = curve(&all);
    let coef = polyfit(&ts, &ys, &powers);
    let r2 = r_squared(&ts, &ys, &powers, &coef);
    let reps = boot.replicate(records.len(), |pick| polyfit(&ts, &curve(pick), &powers));
    let stderr: Vec<f64> = (0..powers.len())
        .map(|j| sample_sd(&reps.iter().map(|c| c[j]).collect::<Vec<_>>()))
        .collect();
    Ok((powers, coef, stderr, r2, fit_window))
}

/// Fits the ensemble variance of `xbar` or `pbar` against time. The
/// estimate is the linear coefficient; bootstrap errors resample
/// trajectories. Higher coefficients are reported as `c2`, `c3`.
pub fn estimate_diffusion(
    records: &[TrajectoryRecord],
    obs: Observable,
    model: VarianceModel,
    window: Option<[f64; 2]>,
    boot: Bootstrap,
) -> Result<EstimatorResult, EnsembleError> {
    if !matches!(obs, Observable::Xbar | Observable::Pbar) {
        return Err(EnsembleError::Statistics(format!("diffusion of {} is not defined", obs.name())));
    }
    let powers_for = |from_start: bool| match (model, from_start) {
        (VarianceModel::Linear, true) => vec![1],
        (VarianceModel::Linear, false) => vec![0, 1],
        (VarianceModel::Cubic, true) => vec![1, 2, 3],
        (VarianceModel::Cubic, false) => vec![0, 1, 2, 3],
    };
    let (powers, coef, stderr, r2, fit_window) =
        fit_moment_law(records, window, powers_for, |i, pick| variance_at(records, obs, i, pick), boot)?;
    Ok(moment_result(format!("variance_rate_{}", obs.name()), &powers, &coef, &stderr, r2, fit_window, records.len()))
}

/// Fits `Cov(x̄, p̄) = c₁ t + c₂ t²`; the estimate is `c₁`.
pub fn estimate_cross_covariance(
    records: &[TrajectoryRecord],
    window: Option<[f64; 2]>,
    boot: Bootstrap,
) -> Result<EstimatorResult, EnsembleError> {
    let powers_for = |from_start: bool| if from_start { vec![1, 2] } else { vec![0, 1, 2] };
    let (powers, coef, stderr, r2, fit_window) =
        fit_moment_law(records, window, powers_for, |i, pick| covariance_at(records, i, pick), boot)?;
    Ok(moment_result("cross_covariance_rate".into(), &powers, &coef, &stderr, r2, fit_window, records.len()))
}

fn moment_result(
    quantity: String,
    powers: &[i32],
    coef: &[f64],
    stderr: &[f64],
    r2: f64,
    fit_window: [f64; 2],
    n: usize,
) -> EstimatorResult {
    let mut details = BTreeMap::new();
    let mut estimate = (0.0, 0.0);
    for ((&p, &c), &e) in powers.iter().zip(coef).zip(stderr) {
        if p == 1 {
            estimate = (c, e);
        } else {
            details.insert(format!("c{p}"), c);
            details.insert(format!("c{p}_stderr"), e);
        }
    }
    EstimatorResult {
        quantity,
        estimate: estimate.0,
        stderr: estimate.1,
        fit_window,
        r_squared: Some(r2),
        residual_trend: estimate.0.abs() > 3.0 * estimate.1 && r2 < 0.95,
        n_trajectories: n,
        details,
    }
}

/// True when every polynomial term above linear is within `sigmas`
/// standard errors of zero.
pub fn superlinear_terms_vanish(result: &EstimatorResult, sigmas: f64) -> bool {
    [2, 3].iter().all(|p| match (result.detail(&format!("c{p}")), result.detail(&format!("c{p}_stderr"))) {
        (Some(c), Some(e)) => c.abs() <= sigmas * e,
        _ => true,
    })
}

/// Normalized magnitude `|E⟨χ⟩(t)| / |E⟨χ⟩(0)|` of the recorded coherence.
fn coherence_curve(records: &[TrajectoryRecord], pick: &[usize]) -> Vec<f64> {
    let len = records[0].coherence.len();
    let avg = |i: usize| pick.iter().map(|&k| records[k].coherence[i]).sum::<Complex64>();
    let c0 = avg(0).norm();
    (0..len).map(|i| avg(i).norm() / c0).collect()
}

/// Ensemble coherence at every sample time.
pub fn coherence_series(records: &[TrajectoryRecord]) -> Result<(Vec<f64>, Vec<f64>), EnsembleError> {
    let times = common_times(records)?;
    if records.iter().any(|r| r.coherence.len() != times.len()) {
        return Err(EnsembleError::Statistics("records carry no coherence samples".into()));
    }
    let all: Vec<usize> = (0..records.len()).collect();
    Ok((times.to_vec(), coherence_curve(records, &all)))
}

/// Decay rate of the ensemble coherence: least-squares fit of
/// `-ln C(t) = Γ t` over `window`, with bootstrap errors.
pub fn estimate_decoherence_rate(
    records: &[TrajectoryRecord],
    window: Option<[f64; 2]>,
    boot: Bootstrap,
) -> Result<EstimatorResult, EnsembleError> {
    let (times, _) = coherence_series(records)?;
    let (idx, fit_window) = window_indices(&times, window)?;
    let ts: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
    let fit = |pick: &[usize]| {
        let c = coherence_curve(records, pick);
        let ys: Vec<f64> = idx.iter().map(|&i| -c[i].ln()).collect();
        polyfit(&ts, &ys, &[1])[0]
    };
    let all: Vec<usize> = (0..records.len()).collect();
    let estimate = fit(&all);
    let reps = boot.replicate(records.len(), fit);
    let c = coherence_curve(records, &all);
    let ys: Vec<f64> = idx.iter().map(|&i| -c[i].ln()).collect();
    let r2 = r_squared(&ts, &ys, &[1], &[estimate]);
    let mut details = BTreeMap::new();
    details.insert("final_coherence".into(), c[*idx.last().unwrap()]);
    Ok(EstimatorResult {
        quantity: "decoherence_rate".into(),
        estimate,
        stderr: sample_sd(&reps),
        fit_window,
        r_squared: Some(r2),
        residual_trend: r2 < 0.95,
        n_trajectories: records.len(),
        details,
    })
}

/// Runs `cfg` and returns the normalized ensemble coherence at the sample
/// time closest to `t`.
pub fn ensemble_density_offdiag(cfg: &EnsembleConfig, t: f64) -> Result<f64, EnsembleError> {
    if !matches!(cfg.variant, Variant::Gsse | Variant::Ssne) {
        return Err(EnsembleError::InvalidConfig("coherence decay needs a stochastic variant".into()));
    }
    if cfg.n_trajectories < MIN_TRAJECTORIES {
        return Err(EnsembleError::Statistics(format!(
            "{} trajectories, need at least {MIN_TRAJECTORIES}",
            cfg.n_trajectories
        )));
    }
    if cfg.coherence_shift.is_none() {
        return Err(EnsembleError::InvalidConfig("coherence_shift is not set".into()));
    }
    let records = run_ensemble(cfg)?;
    let (times, c) = coherence_series(&records)?;
    let i = (0..times.len()).min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs())).unwrap();
    Ok(c[i])
}

/// First sample at which the larger branch weight reaches `threshold`,
/// with the winning side.
pub fn first_passage(record: &TrajectoryRecord, threshold: f64) -> Option<(f64, bool)> {
    record
        .branch_left
        .iter()
        .zip(&record.times)
        .find(|(&l, _)| l.max(1.0 - l) >= threshold)
        .map(|(&l, &t)| (t, l > 0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseStats {
    pub threshold: f64,
    pub median: f64,
    /// Bootstrap 95% interval of the median.
    pub ci: [f64; 2],
    pub stderr: f64,
    pub left_fraction: f64,
    pub left_fraction_stderr: f64,
    pub censored: usize,
    pub n_trajectories: usize,
}

impl CollapseStats {
    pub fn to_estimator(&self) -> EstimatorResult {
        let mut details = BTreeMap::new();
        details.insert("ci_low".into(), self.ci[0]);
        details.insert("ci_high".into(), self.ci[1]);
        details.insert("left_fraction".into(), self.left_fraction);
        details.insert("left_fraction_stderr".into(), self.left_fraction_stderr);
        details.insert("censored".into(), self.censored as f64);
        details.insert("threshold".into(), self.threshold);
        EstimatorResult {
            quantity: "median_collapse_time".into(),
            estimate: self.median,
            stderr: self.stderr,
            fit_window: [0.0, self.ci[1]],
            r_squared: None,
            residual_trend: false,
            n_trajectories: self.n_trajectories,
            details,
        }
    }
}

fn median_of(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median first-passage time of the larger branch weight through
/// `threshold` and the winner split. Censored trajectories count as
/// infinitely late; more than 20% censored is an error.
pub fn collapse_time_stats(records: &[TrajectoryRecord], threshold: f64, boot: Bootstrap) -> Result<CollapseStats, EnsembleError> {
    if records.len() < MIN_TRAJECTORIES {
        return Err(EnsembleError::Statistics(format!(
            "{} trajectories, need at least {MIN_TRAJECTORIES}",
            records.len()
        )));
    }
    if records.iter().any(|r| r.branch_left.is_empty()) {
        return Err(EnsembleError::Statistics("records carry no branch weights".into()));
    }
    let passages: Vec<Option<(f64, bool)>> = records.iter().map(|r| first_passage(r, threshold)).collect();
    let censored = passages.iter().filter(|p| p.is_none()).count();
    if censored as f64 > MAX_CENSORED_FRACTION * records.len() as f64 {
        return Err(EnsembleError::Censored { censored, total: records.len() });
    }
    let times: Vec<f64> = passages.iter().map(|p| p.map_or(f64::INFINITY, |(t, _)| t)).collect();
    let median = median_of(&mut times.clone());
    let mut reps = boot.replicate(times.len(), |pick| median_of(&mut pick.iter().map(|&i| times[i]).collect::<Vec<_>>()));
    reps.sort_by(f64::total_cmp);
    let q = |f: f64| reps[((reps.len() - 1) as f64 * f).round() as usize];
    let finite: Vec<f64> = reps.iter().copied().filter(|v| v.is_finite()).collect();
    let decided: Vec<bool> = passages.iter().flatten().map(|&(_, left)| left).collect();
    let n = decided.len() as f64;
    let left_fraction = decided.iter().filter(|&&l| l).count() as f64 / n;
    Ok(CollapseStats {
        threshold,
        median,
        ci: [q(0.025), q(0.975)],
        stderr: if finite.len() > 1 { sample_sd(&finite) } else { f64::INFINITY },
        left_fraction,
        left_fraction_stderr: (left_fraction * (1.0 - left_fraction) / n).sqrt(),
        censored,
        n_trajectories: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyfit_recovers_polynomials() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.2).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 0.3 + 2.0 * t - 0.1 * t * t * t).collect();
        let c = polyfit(&ts, &ys, &[0, 1, 3]);
        assert!((c[0] - 0.3).abs() < 1e-10 && (c[1] - 2.0).abs() < 1e-10 && (c[2] + 0.1).abs() < 1e-12);
        assert!((r_squared(&ts, &ys, &[0, 1, 3], &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn median_and_bootstrap_are_deterministic() {
        assert_eq!(median_of(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_of(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        let b = Bootstrap::default();
        let r1 = b.replicate(10, |p| p.to_vec());
        assert_eq!(r1, b.replicate(10, |p| p.to_vec()));
        assert_eq!(r1.len(), 200);
    }

    #[test]
    fn config_validation() {
        let ok = EnsembleConfig::new(Variant::Gsse, Solver::Gaussian, 10, 1.0, 1e-3, 1);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.n_trajectories = 1;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.t_final = 0.0;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.dt = 0.3;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.initial = InitialState::Cat(CatState::symmetric(Complex64::new(0.5, -0.5), 4.0).unwrap());
        assert!(c.validate().is_err());
    }

    #[test]
    fn estimators_need_enough_trajectories() {
        let cfg = EnsembleConfig::new(Variant::Gsse, Solver::Gaussian, 20, 0.1, 1e-3, 1);
        let recs = run_ensemble(&cfg).unwrap();
        assert!(matches!(estimate_ke_rate(&recs, None), Err(EnsembleError::Statistics(_))));
    }

    #[test]
    fn first_passage_and_censoring() {
        let mut r = TrajectoryRecord::new(0);
        r.times = vec![0.0, 1.0, 2.0];
        r.branch_left = vec![0.5, 0.2, 0.005];
        assert_eq!(first_passage(&r, 0.99), Some((2.0, false)));
        let mut never = r.clone();
        never.branch_left = vec![0.5, 0.4, 0.6];
        assert_eq!(first_passage(&never, 0.99), None);
        let mut recs = vec![r.clone(); 70];
        recs.extend(vec![never.clone(); 30]);
        assert!(matches!(
            collapse_time_stats(&recs, 0.99, Bootstrap::default()),
            Err(EnsembleError::Censored { censored: 30, total: 100 })
        ));
        let mut recs = vec![r; 85];
        recs.extend(vec![never; 15]);
        let s = collapse_time_stats(&recs, 0.99, Bootstrap::default()).unwrap();
        assert_eq!((s.median, s.censored, s.left_fraction), (2.0, 15, 0.0));
    }
}
