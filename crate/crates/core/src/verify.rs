//! End-to-end checks of the model's quantitative claims.
//!
//! Every check returns a [`CriterionOutcome`] holding its measurements, a
//! pass/fail verdict at the stated tolerance, and the data files behind it.

use std::collections::BTreeMap;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    self, collapse_time_stats, estimate_cross_covariance, estimate_decoherence_rate, estimate_diffusion,
    estimate_ke_rate, polyfit, run_ensemble, superlinear_terms_vanish, Bootstrap, EnsembleConfig, InitialState, Solver,
    VarianceModel,
};
use crate::grid::{
    self, branch_centers, init_cat, init_gaussian, CatState, GridSpec, NonlocalStepper, QuadraticStepper, RunOptions,
    SoftKernelSpec,
};
use crate::model::{self, CatGeometry, Constants, MassProfile};
use crate::noise::{wiener_increments, PhiGrid, PhiReducer, PhiSampler};
use crate::output::{long_csv, table_csv};
use crate::record::{Observable, TrajectoryRecord};
use crate::variant::{Units, Variant};

const NAT: Units = Units::natural();

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub workers: Option<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 20240917, workers: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// One `name value [ok|FAIL] (expectation)` entry per check.
    pub checks: Vec<String>,
    pub measurements: BTreeMap<String, f64>,
    pub artifacts: Vec<Artifact>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl CriterionOutcome {
    pub fn report_line(&self) -> String {
        format!("{} ({:.1} s)", self.report_line_without_timing(), self.seconds)
    }

    /// Like [`report_line`](Self::report_line) but reproducible across runs.
    pub fn report_line_without_timing(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let body = match &self.error {
            Some(e) => format!("error: {e}"),
            None => self.checks.join("; "),
        };
        format!("{verdict} [{:>2}] {}: {body}", self.id, self.name)
    }
}

type Outcome = Result<Checks, String>;

#[derive(Default)]
struct Checks {
    passed: bool,
    lines: Vec<String>,
    values: BTreeMap<String, f64>,
    artifacts: Vec<Artifact>,
}

impl Checks {
    fn new() -> Self {
        Self { passed: true, ..Self::default() }
    }

    fn check(&mut self, name: &str, value: f64, ok: bool, expectation: impl std::fmt::Display) {
        self.passed &= ok;
        self.values.insert(name.to_string(), value);
        self.lines.push(format!("{name}={value:.6e} [{}] ({expectation})", if ok { "ok" } else { "FAIL" }));
    }

    fn note(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }

    fn artifact(&mut self, name: &str, contents: String) {
        self.artifacts.push(Artifact { name: name.to_string(), contents });
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    run: fn(&VerifyOptions) -> Outcome,
}

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, name: "statics", run: statics },
        Criterion { id: 2, name: "quadratic-expansion", run: quadratic_expansion },
        Criterion { id: 3, name: "reduced-noise-covariance", run: reduced_noise },
        Criterion { id: 4, name: "sne-soliton-stationarity", run: sne_stationarity },
        Criterion { id: 5, name: "gsse-kinetic-energy-growth", run: ke_growth },
        Criterion { id: 6, name: "gsse-momentum-diffusion", run: momentum_diffusion },
        Criterion { id: 7, name: "ssne-momentum-cancellation", run: ssne_cancellation },
        Criterion { id: 8, name: "ssne-position-diffusion", run: ssne_position_diffusion },
        Criterion { id: 9, name: "soliton-widths", run: soliton_widths },
        Criterion { id: 10, name: "solver-equivalence", run: solver_equivalence },
        Criterion { id: 11, name: "decoherence-rate", run: decoherence },
        Criterion { id: 12, name: "collapse-statistics", run: collapse },
        Criterion { id: 13, name: "cat-attraction", run: attraction },
        Criterion { id: 14, name: "determinism", run: determinism },
    ]
}

pub fn run_criterion(c: &Criterion, opts: &VerifyOptions) -> CriterionOutcome {
    let start = Instant::now();
    let result = match opts.workers {
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(|| (c.run)(opts)),
            Err(e) => Err(e.to_string()),
        },
        None => (c.run)(opts),
    };
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(ch) => CriterionOutcome {
            id: c.id,
            name: c.name,
            passed: ch.passed,
            checks: ch.lines,
            measurements: ch.values,
            artifacts: ch.artifacts,
            seconds,
            error: None,
        },
        Err(e) => CriterionOutcome {
            id: c.id,
            name: c.name,
            passed: false,
            checks: Vec::new(),
            measurements: BTreeMap::new(),
            artifacts: Vec::new(),
            seconds,
            error: Some(e),
        },
    }
}

/// Runs the selected criteria (all when `only` is empty), calling
/// `on_done` as each finishes.
pub fn run_suite(opts: &VerifyOptions, only: &[u8], mut on_done: impl FnMut(&CriterionOutcome)) -> Vec<CriterionOutcome> {
    criteria()
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.id))
        .map(|c| {
            let o = run_criterion(c, opts);
            on_done(&o);
            o
        })
        .collect()
}

fn unit_sphere() -> Result<MassProfile, String> {
    MassProfile::uniform_sphere(1.0, Constants::unit()).map_err(err)
}

fn statics(_: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let p = unit_sphere()?;
    let w = model::omega_g(&p);
    c.check("omega_g", w, (w - 1.0).abs() < 1e-6, "1 ± 1e-6");
    let e = model::self_energy(&p);
    c.check("e_g", e, (e + 0.6).abs() < 1e-6, "-0.6 ± 1e-6");
    let de = |ell: f64| CatGeometry::new(ell, p).and_then(|g| model::delta_e_g(&g)).map_err(err);
    let d4 = de(4.0)?;
    c.check("delta_e_g_ell4", d4, (d4 - 0.95).abs() < 1e-3, "0.95 ± 1e-3");
    let ells: Vec<f64> = (1..=12).map(|i| 0.02 * i as f64).collect();
    let ratios: Vec<f64> = ells.iter().map(|&l| de(l).map(|d| d / (l * l))).collect::<Result<_, _>>()?;
    let fit = polyfit(&ells, &ratios, &[0, 1, 2, 3]);
    c.check("small_ell_curvature", fit[0], (fit[0] / 0.5 - 1.0).abs() < 0.01, "0.5 ± 1%");
    let mut rows = Vec::new();
    for i in 0..=40 {
        let ell = 0.1 * i as f64;
        rows.push(vec![ell, model::mutual_potential(&p, ell).map_err(err)?, de(ell)?]);
    }
    c.artifact("statics_uniform_sphere.csv", table_csv(&["ell", "mutual_potential", "delta_e_g"], &rows));
    Ok(c)
}

fn quadratic_expansion(_: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let p = unit_sphere()?;
    let mut rows = Vec::new();
    let mut previous = f64::INFINITY;
    let mut decreasing = true;
    for dx in [0.05, 0.025, 0.0125] {
        let q = model::quadratic_potential_check(&p, dx).map_err(err)?;
        decreasing &= q.relative_error < previous;
        previous = q.relative_error;
        rows.push(vec![dx, q.full, q.quadratic, q.relative_error]);
        c.note(&format!("relative_error_dx{dx}"), q.relative_error);
        if dx == 0.05 {
            c.check("relative_error_dx0.05", q.relative_error, q.relative_error < 1e-2, "< 1e-2");
        }
    }
    c.check("decreasing_under_refinement", f64::from(u8::from(decreasing)), decreasing, "errors shrink as dx halves");
    c.artifact("quadratic_expansion.csv", table_csv(&["dx", "full", "quadratic", "relative_error"], &rows));
    Ok(c)
}

fn reduced_noise(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let p = unit_sphere()?;
    let grid = PhiGrid::new(40, 0.125).map_err(err)?;
    let reducer = PhiReducer::new(&grid, &p).map_err(err)?;
    let sampler = PhiSampler::new(&grid, p.constants.g * p.constants.hbar).map_err(err)?;
    let n = 10_000u64;
    let dt = 1.0;
    let ws: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| sampler.sample(dt, opts.seed, i).and_then(|f| reducer.reduce(&f)))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let mut cov = [[0.0; 3]; 3];
    for w in &ws {
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += w[a] * w[b] / (n as f64 * dt);
            }
        }
    }
    let exact = reducer.expected_covariance(p.constants.g * p.constants.hbar);
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((cov[a][b] - target).abs());
            rows.push(vec![a as f64, b as f64, cov[a][b], exact[a][b]]);
        }
    }
    c.check("max_entry_deviation", worst, worst <= 0.05, "identity ± 0.05 per entry");
    c.note("lattice_diagonal", exact[0][0]);
    c.artifact("reduced_noise_covariance.csv", table_csv(&["row", "col", "empirical", "lattice_exact"], &rows));
    Ok(c)
}

/// Overlap with the reference packet `a` moved to the state's mean
/// position and momentum.
fn comoving_fidelity(state: &grid::GridState, ws: &mut grid::Workspace, a: Complex64) -> Result<f64, String> {
    let m = ws.moments(state, &NAT);
    let reference = init_gaussian(state.spec, m.mean_x, m.mean_p, a, NAT.hbar).map_err(err)?;
    Ok(state.fidelity(&reference))
}

fn sne_stationarity(_: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let spec = GridSpec::standard();
    let a = Variant::Sne.soliton_width(&NAT);
    let mut s = init_gaussian(spec, 0.0, 0.0, a, NAT.hbar).map_err(err)?;
    let mut stepper = QuadraticStepper::new(spec, Variant::Sne, NAT, 1e-3).map_err(err)?;
    let mut rows = Vec::new();
    let mut lowest: f64 = 1.0;
    for k in 0..=10_000 {
        if k % 500 == 0 {
            let f = comoving_fidelity(&s, stepper.workspace(), a)?;
            lowest = lowest.min(f);
            rows.push(vec![k as f64 * 1e-3, f]);
        }
        if k < 10_000 {
            stepper.step(&mut s, 0.0).map_err(err)?;
        }
    }
    c.check("min_comoving_fidelity", lowest, lowest >= 1.0 - 1e-6, ">= 1 - 1e-6 up to t = 10");
    c.artifact("sne_fidelity.csv", table_csv(&["time", "fidelity"], &rows));
    Ok(c)
}

fn ensemble_cfg(variant: Variant, solver: Solver, n: usize, t_final: f64, dt: f64, every: usize, seed: u64, opts: &VerifyOptions) -> EnsembleConfig {
    let mut cfg = EnsembleConfig::new(variant, solver, n, t_final, dt, seed);
    cfg.record_every = every;
    cfg.workers = opts.workers;
    cfg
}

fn mean_series(records: &[TrajectoryRecord], obs: Observable) -> Vec<f64> {
    let n = records.len() as f64;
    (0..records[0].len()).map(|i| records.iter().map(|r| r.series(obs)[i]).sum::<f64>() / n).collect()
}

fn ke_growth(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let g = run_ensemble(&ensemble_cfg(Variant::Gsse, Solver::Gaussian, 1000, 4.0, 1e-3, 40, opts.seed, opts)).map_err(err)?;
    let eg = estimate_ke_rate(&g, None).map_err(err)?;
    c.check("gaussian_rate", eg.estimate, eg.agrees_with(0.5, 0.05), format!("0.5 ± 10%, stderr {:.3e}", eg.stderr));
    let r = run_ensemble(&ensemble_cfg(Variant::Gsse, Solver::Grid, 200, 2.0, 1e-3, 50, opts.seed ^ 0x5, opts)).map_err(err)?;
    let er = estimate_ke_rate(&r, None).map_err(err)?;
    let combined = (eg.stderr.powi(2) + er.stderr.powi(2)).sqrt();
    let diff = (eg.estimate - er.estimate).abs();
    c.check("grid_rate", er.estimate, diff <= 3.0 * combined, format!("gaussian ± 3·{combined:.3e}"));
    c.note("gaussian_rate_stderr", eg.stderr);
    c.note("grid_rate_stderr", er.stderr);
    c.note("gaussian_rate_three_axes", 3.0 * eg.estimate);
    let gm = mean_series(&g, Observable::Kinetic);
    let rm = mean_series(&r, Observable::Kinetic);
    let rows: Vec<Vec<f64>> = g[0].times.iter().zip(&gm).map(|(t, k)| vec![*t, *k]).collect();
    c.artifact("ke_gaussian.csv", table_csv(&["time", "mean_kinetic"], &rows));
    let rows: Vec<Vec<f64>> = r[0].times.iter().zip(&rm).map(|(t, k)| vec![*t, *k]).collect();
    c.artifact("ke_grid.csv", table_csv(&["time", "mean_kinetic"], &rows));
    Ok(c)
}

/// Per-sample ensemble variances of `x̄`, `p̄` and their covariance.
pub fn moment_table(records: &[TrajectoryRecord]) -> String {
    let n = records.len() as f64;
    let rows: Vec<Vec<f64>> = (0..records[0].len())
        .map(|i| {
            let mx = records.iter().map(|r| r.xbar[i]).sum::<f64>() / n;
            let mp = records.iter().map(|r| r.pbar[i]).sum::<f64>() / n;
            let vx = records.iter().map(|r| (r.xbar[i] - mx).powi(2)).sum::<f64>() / (n - 1.0);
            let vp = records.iter().map(|r| (r.pbar[i] - mp).powi(2)).sum::<f64>() / (n - 1.0);
            let cxp = records.iter().map(|r| (r.xbar[i] - mx) * (r.pbar[i] - mp)).sum::<f64>() / (n - 1.0);
            vec![records[0].times[i], vx, vp, cxp]
        })
        .collect();
    table_csv(&["time", "var_xbar", "var_pbar", "cov_xp"], &rows)
}

fn momentum_diffusion(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let recs = run_ensemble(&ensemble_cfg(Variant::Gsse, Solver::Gaussian, 1000, 2.0, 1e-3, 20, opts.seed ^ 0x6, opts)).map_err(err)?;
    let boot = Bootstrap::default();
    let vp = estimate_diffusion(&recs, Observable::Pbar, VarianceModel::Linear, None, boot).map_err(err)?;
    c.check("var_pbar_slope", vp.estimate, vp.agrees_with(1.0, 0.1), format!("1.0 ± 10%, stderr {:.3e}", vp.stderr));
    let cx = estimate_cross_covariance(&recs, None, boot).map_err(err)?;
    c.check("cov_xp_linear", cx.estimate, cx.agrees_with(1.0, 0.1), format!("1.0 ± 10%, stderr {:.3e}", cx.stderr));
    let n = recs.len() as f64;
    let positive = (1..recs[0].len()).all(|i| {
        let mx = recs.iter().map(|r| r.xbar[i]).sum::<f64>() / n;
        let mp = recs.iter().map(|r| r.pbar[i]).sum::<f64>() / n;
        recs.iter().map(|r| (r.xbar[i] - mx) * (r.pbar[i] - mp)).sum::<f64>() > 0.0
    });
    c.check("cov_xp_positive", f64::from(u8::from(positive)), positive, "Cov(x̄, p̄) > 0 for t > 0");
    if let Some(c2) = cx.detail("c2") {
        c.note("cov_xp_quadratic", c2);
    }
    c.artifact("gsse_moments.csv", moment_table(&recs));
    Ok(c)
}

fn ssne_cancellation(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let recs = run_ensemble(&ensemble_cfg(Variant::Ssne, Solver::Gaussian, 1000, 10.0, 1e-3, 100, opts.seed ^ 0x7, opts)).map_err(err)?;
    let worst = recs.iter().flat_map(|r| r.pbar.iter().map(move |p| (p - r.pbar[0]).abs())).fold(0.0, f64::max);
    c.check("gaussian_max_pbar_change", worst, worst == 0.0, "exactly 0");
    let spec = GridSpec::standard();
    let a = Variant::Ssne.soliton_width(&NAT);
    let init = init_gaussian(spec, 0.0, 0.0, a, NAT.hbar).map_err(err)?;
    let mut rows = Vec::new();
    let (mut coarse_worst, mut fine_worst) = (0.0f64, 0.0f64);
    let mut shrinking = true;
    for traj in 0..3u64 {
        let fine = wiener_increments(opts.seed ^ 0x77, traj, 20_000, 5e-4, 1).map_err(err)?;
        let mut coarse = fine.clone();
        coarse.dt = 1e-3;
        coarse.increments = fine.increments.chunks(2).map(|p| p[0] + p[1]).collect();
        let mut drift = [0.0; 2];
        for (slot, path) in [&coarse, &fine].into_iter().enumerate() {
            let mut stepper = QuadraticStepper::new(spec, Variant::Ssne, NAT, path.dt).map_err(err)?;
            let every = (0.1 / path.dt).round() as usize;
            let r = grid::simulate(&init, &mut stepper, path, &RunOptions { record_every: every, ..Default::default() }).map_err(err)?;
            drift[slot] = r.pbar.iter().map(|p| (p - r.pbar[0]).abs()).fold(0.0, f64::max);
        }
        shrinking &= drift[1] < drift[0];
        coarse_worst = coarse_worst.max(drift[0]);
        fine_worst = fine_worst.max(drift[1]);
        rows.push(vec![traj as f64, drift[0], drift[1]]);
    }
    c.check("grid_pbar_drift_dt1e-3", coarse_worst, coarse_worst <= 1e-2, "<= 1e-2 over t = 10");
    c.check("grid_pbar_drift_dt5e-4", fine_worst, shrinking, "smaller than at dt = 1e-3 on every path");
    c.artifact("ssne_grid_drift.csv", table_csv(&["trajectory", "drift_dt1e-3", "drift_dt5e-4"], &rows));
    Ok(c)
}

fn ssne_position_diffusion(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let recs = run_ensemble(&ensemble_cfg(Variant::Ssne, Solver::Gaussian, 1000, 4.0, 1e-3, 20, opts.seed ^ 0x8, opts)).map_err(err)?;
    let boot = Bootstrap::default();
    let lin = estimate_diffusion(&recs, Observable::Xbar, VarianceModel::Linear, None, boot).map_err(err)?;
    c.check("var_xbar_slope", lin.estimate, lin.agrees_with(1.0, 0.1), format!("1.0 ± 10%, stderr {:.3e}", lin.stderr));
    let cubic = estimate_diffusion(&recs, Observable::Xbar, VarianceModel::Cubic, None, boot).map_err(err)?;
    let vanish = superlinear_terms_vanish(&cubic, 3.0);
    let c2 = cubic.detail("c2").unwrap_or(f64::NAN);
    let c3 = cubic.detail("c3").unwrap_or(f64::NAN);
    c.check(
        "superlinear_terms",
        f64::from(u8::from(vanish)),
        vanish,
        format!(
            "c2 = {c2:.3e} ± {:.3e}, c3 = {c3:.3e} ± {:.3e} consistent with 0 at 3σ",
            cubic.detail("c2_stderr").unwrap_or(f64::NAN),
            cubic.detail("c3_stderr").unwrap_or(f64::NAN)
        ),
    );
    c.note("c2", c2);
    c.note("c3", c3);
    c.artifact("ssne_moments.csv", moment_table(&recs));
    Ok(c)
}

fn soliton_widths(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    // Wide enough for the centre's random walk over t = 8.
    let spec = GridSpec::new(2048, -40.0, 40.0).map_err(err)?;
    let targets = [(Variant::Sne, 0.5), (Variant::Gsse, 0.5), (Variant::Ssne, 0.5f64.sqrt())];
    let perturbed = Complex64::new(1.5, 0.4);
    let mut rows = Vec::new();
    for (v, target) in targets {
        let mut worst: f64 = 0.0;
        let (seeds, start, a0) = if v.is_stochastic() { (5u64, 5.0, perturbed) } else { (1, 0.0, v.soliton_width(&NAT)) };
        for traj in 0..seeds {
            let init = init_gaussian(spec, 0.0, 0.0, a0, NAT.hbar).map_err(err)?;
            let mut stepper = QuadraticStepper::new(spec, v, NAT, 1e-3).map_err(err)?;
            let noise = if v.is_stochastic() {
                wiener_increments(opts.seed ^ 0x9, traj, 8000, 1e-3, 1).map_err(err)?
            } else {
                let mut z = wiener_increments(0, 0, 8000, 1e-3, 1).map_err(err)?;
                z.increments.iter_mut().for_each(|w| *w = 0.0);
                z
            };
            let r = grid::simulate(&init, &mut stepper, &noise, &RunOptions { record_every: 100, ..Default::default() }).map_err(err)?;
            for (t, dx) in r.times.iter().zip(&r.dx) {
                if *t >= start - 1e-9 {
                    worst = worst.max((dx * dx / target - 1.0).abs());
                }
                if traj == 0 {
                    rows.push(vec![f64::from(v as u8), *t, dx * dx]);
                }
            }
        }
        c.check(&format!("{v}_width_deviation"), worst, worst <= 0.01, format!("Δx² = {target:.4} ± 1% after relaxation, every seed"));
    }
    // Width flow is the same for every seed and reaches the fixed point.
    for v in [Variant::Gsse, Variant::Ssne] {
        let mut cfg = ensemble_cfg(v, Solver::Gaussian, 1000, 12.0, 1e-3, 1000, opts.seed ^ 0x99, opts);
        cfg.initial = InitialState::Gaussian { xbar: 0.0, pbar: 0.0, a: perturbed };
        let recs = run_ensemble(&cfg).map_err(err)?;
        let same = recs.iter().all(|r| r.width == recs[0].width);
        let star = v.soliton_width(&NAT);
        let dist = recs.iter().map(|r| (r.width.last().unwrap() - star).norm() / star.norm()).fold(0.0, f64::max);
        c.check(&format!("{v}_flow_convergence"), dist, same && dist < 1e-6, "identical across 1000 seeds, |a - a*|/|a*| < 1e-6 at t = 12");
    }
    c.artifact("soliton_widths.csv", table_csv(&["variant", "time", "dx2"], &rows));
    Ok(c)
}

fn solver_equivalence(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let spec = GridSpec::new(2048, -40.0, 40.0).map_err(err)?;
    let initial = InitialState::Gaussian { xbar: 0.2, pbar: 0.1, a: Complex64::new(1.2, 0.3) };
    let pairs: Vec<(Variant, u64)> = [Variant::Gsse, Variant::Ssne].iter().flat_map(|&v| (0..2u64).map(move |i| (v, i))).collect();
    let results: Vec<(Variant, u64, TrajectoryRecord, TrajectoryRecord)> = pairs
        .par_iter()
        .map(|&(v, i)| {
            let mut cfg = EnsembleConfig::new(v, Solver::Grid, 2, 5.0, 1e-4, opts.seed ^ 0xa);
            cfg.grid = spec;
            cfg.initial = initial;
            cfg.record_every = 500;
            let grid_rec = ensemble::run_trajectory(&cfg, i).map_err(err)?;
            cfg.solver = Solver::Gaussian;
            let gauss_rec = ensemble::run_trajectory(&cfg, i).map_err(err)?;
            Ok((v, i, grid_rec, gauss_rec))
        })
        .collect::<Result<_, String>>()?;
    let mut worst = [0.0f64; 3];
    let mut rows = Vec::new();
    for (v, i, g, a) in &results {
        for k in 0..g.len() {
            let d = [(g.xbar[k] - a.xbar[k]).abs(), (g.pbar[k] - a.pbar[k]).abs(), (g.dx[k] - a.dx[k]).abs()];
            for j in 0..3 {
                worst[j] = worst[j].max(d[j]);
            }
            rows.push(vec![f64::from(*v as u8), *i as f64, g.times[k], g.xbar[k], a.xbar[k], g.pbar[k], a.pbar[k], g.dx[k], a.dx[k]]);
        }
    }
    for (name, w) in ["max_dxbar", "max_dpbar", "max_ddx"].iter().zip(worst) {
        c.check(name, w, w < 1e-3, "< 1e-3 over t ∈ [0, 5]");
    }
    c.artifact(
        "solver_equivalence.csv",
        table_csv(&["variant", "trajectory", "time", "grid_xbar", "gauss_xbar", "grid_pbar", "gauss_pbar", "grid_dx", "gauss_dx"], &rows),
    );
    Ok(c)
}

/// Cat of packets `a0 = 8/ℓ²` (fixed ratio ℓ/Δx) sampled over one
/// predicted decay time.
pub fn coherence_config(variant: Variant, ell: f64, n: usize, seed: u64) -> Result<EnsembleConfig, String> {
    let rate = NAT.localization_rate() * ell * ell;
    let t_final = 1.0 / rate;
    let mut cfg = EnsembleConfig::new(variant, Solver::Grid, n, t_final, t_final / 600.0, seed);
    cfg.record_every = 12;
    cfg.grid = GridSpec::new(1024, -40.0, 40.0).map_err(err)?;
    cfg.initial = InitialState::Cat(CatState::symmetric(Complex64::new(8.0 / (ell * ell), 0.0), ell).map_err(err)?);
    cfg.coherence_shift = Some(ell);
    Ok(cfg)
}

fn coherence_run(variant: Variant, ell: f64, n: usize, opts: &VerifyOptions) -> Result<(EnsembleConfig, Vec<TrajectoryRecord>), String> {
    let mut cfg = coherence_config(variant, ell, n, opts.seed ^ 0xb)?;
    cfg.workers = opts.workers;
    let recs = run_ensemble(&cfg).map_err(err)?;
    Ok((cfg, recs))
}

fn decoherence(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let boot = Bootstrap::default();
    let mut rates = Vec::new();
    let mut rows = Vec::new();
    for (variant, ell) in [(Variant::Gsse, 1.0), (Variant::Gsse, 2.0), (Variant::Gsse, 4.0), (Variant::Ssne, 2.0)] {
        let (_, recs) = coherence_run(variant, ell, 1000, opts)?;
        let est = estimate_decoherence_rate(&recs, None, boot).map_err(err)?;
        let (ts, cs) = ensemble::coherence_series(&recs).map_err(err)?;
        for (t, v) in ts.iter().zip(&cs) {
            rows.push(vec![f64::from(variant as u8), ell, *t, *v]);
        }
        c.note(&format!("{variant}_rate_ell{ell}"), est.estimate);
        c.note(&format!("{variant}_rate_ell{ell}_stderr"), est.stderr);
        rates.push((variant, ell, est));
    }
    let g2 = &rates[1].2;
    c.check("gsse_rate_ell2", g2.estimate, g2.agrees_with(2.0, 0.2), format!("2.0 ± 10%, stderr {:.3e}", g2.stderr));
    let s2 = &rates[3].2;
    let combined = (g2.stderr.powi(2) + s2.stderr.powi(2)).sqrt();
    c.check(
        "ssne_rate_ell2",
        s2.estimate,
        (s2.estimate - g2.estimate).abs() <= 3.0 * combined,
        format!("equal to the G-SSE rate within 3·{combined:.3e}"),
    );
    let (ls, lr): (Vec<f64>, Vec<f64>) = rates[..3].iter().map(|(_, l, e)| (l.ln(), e.estimate.ln())).unzip();
    let slope = polyfit(&ls, &lr, &[0, 1])[1];
    let rel = |e: &ensemble::EstimatorResult| e.stderr / e.estimate;
    let slope_err = (rel(&rates[0].2).powi(2) + rel(&rates[2].2).powi(2)).sqrt() / 4f64.ln();
    c.check(
        "ell_exponent",
        slope,
        (slope - 2.0).abs() <= 0.2f64.max(3.0 * slope_err),
        format!("2 ± max(10%, 3·{slope_err:.2e}) over ℓ ∈ {{1, 2, 4}}"),
    );
    c.artifact("coherence.csv", table_csv(&["variant", "ell", "time", "coherence"], &rows));
    Ok(c)
}

pub const COLLAPSE_THRESHOLD: f64 = 0.99;

/// G-SSE cat of soliton packets with the time step and horizon scaled as
/// `ℓ⁻²`; trajectories stop at the collapse threshold.
pub fn collapse_config(ell: f64, n: usize, seed: u64) -> Result<EnsembleConfig, String> {
    let s = (4.0 / ell).powi(2);
    let mut cfg = EnsembleConfig::new(Variant::Gsse, Solver::Grid, n, 1.0 * s, 2.5e-4 * s, seed);
    cfg.initial = InitialState::Cat(CatState::symmetric(Variant::Gsse.soliton_width(&NAT), ell).map_err(err)?);
    cfg.stop_at = Some(COLLAPSE_THRESHOLD);
    cfg.record_every = 2;
    Ok(cfg)
}

fn collapse(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let boot = Bootstrap::default();
    let mut stats = Vec::new();
    let mut rows = Vec::new();
    for (ell, n) in [(6.0, 1000), (12.0, 400), (24.0, 400)] {
        let mut cfg = collapse_config(ell, n, opts.seed ^ 0xc)?;
        cfg.workers = opts.workers;
        let recs = run_ensemble(&cfg).map_err(err)?;
        let st = collapse_time_stats(&recs, COLLAPSE_THRESHOLD, boot).map_err(err)?;
        let target = NAT.hbar / (0.5 * NAT.mass * NAT.omega_g.powi(2) * ell * ell);
        let ratio = st.median / target;
        c.check(&format!("median_ratio_ell{ell}"), ratio, (0.5..=2.0).contains(&ratio), format!("median {:.4e} within ×2 of {target:.4e}", st.median));
        c.note(&format!("censored_ell{ell}"), st.censored as f64);
        for r in &recs {
            if let Some((t, left)) = ensemble::first_passage(r, COLLAPSE_THRESHOLD) {
                rows.push(vec![ell, r.trajectory as f64, t, f64::from(u8::from(left))]);
            }
        }
        stats.push((ell, st));
    }
    let first = &stats[0].1;
    c.check(
        "left_fraction",
        first.left_fraction,
        (first.left_fraction - 0.5).abs() <= 0.05,
        format!("0.5 ± 0.05 over {} trajectories (binomial stderr {:.3})", first.n_trajectories, first.left_fraction_stderr),
    );
    let (ls, lm): (Vec<f64>, Vec<f64>) = stats.iter().map(|(l, s)| (l.ln(), s.median.ln())).unzip();
    let slope = polyfit(&ls, &lm, &[0, 1])[1];
    let last = &stats[2].1;
    let slope_err = ((first.stderr / first.median).powi(2) + (last.stderr / last.median).powi(2)).sqrt() / 4f64.ln();
    c.check(
        "ell_exponent",
        slope,
        (slope + 2.0).abs() <= 0.2f64.max(3.0 * slope_err),
        format!("-2 ± max(10%, 3·{slope_err:.2e}) over ℓ ∈ {{6, 12, 24}}"),
    );
    c.artifact("collapse_times.csv", table_csv(&["ell", "trajectory", "first_passage", "left_won"], &rows));
    Ok(c)
}

/// `dU/dℓ` for two Gaussian packets of position variance `var` each, with
/// the softened kernel; composite Simpson over the relative coordinate.
pub fn smeared_force(kernel: &SoftKernelSpec, var: f64, ell: f64) -> f64 {
    let s2 = 2.0 * var;
    let half = 12.0 * s2.sqrt();
    let n = 20_000;
    let h = 2.0 * half / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let u = -half + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let density = (-u * u / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
        acc += w * density * kernel.kernel_derivative(u + ell);
    }
    acc * h / 3.0
}

/// Symmetric two-packet run of the nonlocal SNE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPacketSetup {
    pub grid: GridSpec,
    pub kernel: SoftKernelSpec,
    pub a0: f64,
    pub ell: f64,
    pub dt: f64,
    pub steps: usize,
    pub sample_every: usize,
}

impl TwoPacketSetup {
    pub fn standard() -> Result<Self, String> {
        Ok(Self {
            grid: GridSpec::new(2048, -40.0, 40.0).map_err(err)?,
            kernel: SoftKernelSpec::new(1.0, 5.0).map_err(err)?,
            a0: 0.25,
            ell: 8.0,
            dt: 1e-3,
            steps: 6000,
            sample_every: 20,
        })
    }

    /// Sample times, branch separations and the largest `|⟨x⟩|`.
    pub fn run(&self) -> Result<(Vec<f64>, Vec<f64>, f64), String> {
        let cat = CatState::symmetric(Complex64::new(self.a0, 0.0), self.ell).map_err(err)?;
        let mut s = init_cat(self.grid, &cat, NAT.hbar).map_err(err)?;
        let mut stepper = NonlocalStepper::new(self.grid, self.kernel, NAT, self.dt).map_err(err)?;
        let (mut ts, mut seps) = (Vec::new(), Vec::new());
        let mut drift: f64 = 0.0;
        let every = self.sample_every.max(1);
        for k in 0..=self.steps {
            if k % every == 0 {
                let centers = branch_centers(&s, 0.0);
                ts.push(k as f64 * self.dt);
                seps.push(centers[1] - centers[0]);
                drift = drift.max(s.mean_x().abs());
            }
            if k < self.steps {
                stepper.step(&mut s).map_err(err)?;
            }
        }
        Ok((ts, seps, drift))
    }

    /// Classical initial relative acceleration of the two smeared packets.
    pub fn classical_acceleration(&self) -> f64 {
        -smeared_force(&self.kernel, 0.25 / self.a0, self.ell) / NAT.mass
    }
}

/// Initial relative acceleration from an even fit of the separation over
/// `t ≤ window`.
pub fn fitted_acceleration(ts: &[f64], seps: &[f64], window: f64) -> f64 {
    let early = ts.iter().filter(|&&t| t <= window + 1e-12).count();
    2.0 * polyfit(&ts[..early], &seps[..early], &[0, 2, 3, 4])[1]
}

fn attraction(_: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let setup = TwoPacketSetup::standard()?;
    let (ts, seps, drift) = setup.run()?;
    let (spec, kernel, dt) = (setup.grid, setup.kernel, setup.dt);
    let monotone = seps.windows(2).all(|w| w[1] < w[0]);
    c.check("separation_decrease", seps[0] - seps.last().unwrap(), monotone, "strictly decreasing up to t = 6");
    let measured = fitted_acceleration(&ts, &seps, 0.5);
    let oracle = setup.classical_acceleration();
    let ratio = measured / oracle;
    c.check("initial_acceleration_ratio", ratio, (ratio - 1.0).abs() < 0.05, format!("measured {measured:.4e} vs classical {oracle:.4e} within 5%"));
    c.check("center_of_mass_drift", drift, drift < 1e-6, "< 1e-6");

    let mut single = init_gaussian(spec, 1.5, 0.3, Complex64::new(0.5, 0.1), NAT.hbar).map_err(err)?;
    let mut stepper = NonlocalStepper::new(spec, kernel, NAT, dt).map_err(err)?;
    let p0 = stepper.workspace().moments(&single, &NAT).mean_p;
    let mut self_force: f64 = 0.0;
    for _ in 0..3000 {
        stepper.step(&mut single).map_err(err)?;
        self_force = self_force.max((stepper.workspace().moments(&single, &NAT).mean_p - p0).abs());
    }
    c.check("single_packet_momentum_drift", self_force, self_force < 1e-8, "< 1e-8 over t = 3");
    let rows: Vec<Vec<f64>> = ts.iter().zip(&seps).map(|(t, s)| vec![*t, *s]).collect();
    c.artifact("attraction_separation.csv", table_csv(&["time", "separation"], &rows));
    Ok(c)
}

fn determinism(opts: &VerifyOptions) -> Outcome {
    let mut c = Checks::new();
    let cheap = [1u8, 6, 8, 9, 13];
    let all = criteria();
    let mut identical = true;
    let mut files = 0usize;
    for id in cheap {
        let crit = all.iter().find(|k| k.id == id).unwrap();
        let a = run_criterion(crit, &VerifyOptions { workers: Some(1), ..*opts });
        let b = run_criterion(crit, &VerifyOptions { workers: opts.workers, ..*opts });
        identical &= a.error.is_none() && a.artifacts == b.artifacts && a.measurements == b.measurements;
        files += a.artifacts.len();
    }
    let mut cfg = collapse_config(12.0, 100, opts.seed ^ 0xe)?;
    cfg.workers = Some(1);
    let first = long_csv(&run_ensemble(&cfg).map_err(err)?, &Observable::ALL);
    cfg.workers = Some(2);
    let second = long_csv(&run_ensemble(&cfg).map_err(err)?, &Observable::ALL);
    identical &= first == second;
    files += 1;
    c.check("identical_files", files as f64, identical, "byte-identical reruns with 1 and default/2 workers");
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn criteria_are_unique_and_ordered() {
        let ids: Vec<u8> = criteria().iter().map(|c| c.id).collect();
        assert_eq!(ids, (1..=14).collect::<Vec<_>>());
    }

    #[test]
    fn smeared_force_tends_to_point_force() {
        let k = SoftKernelSpec::new(1.0, 2.0).unwrap();
        let f = smeared_force(&k, 1e-6, 3.0);
        assert!((f / k.kernel_derivative(3.0) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn failing_criterion_reports_error() {
        let c = Criterion { id: 99, name: "broken", run: |_| Err("boom".into()) };
        let o = run_criterion(&c, &VerifyOptions::default());
        assert!(!o.passed);
        assert!(o.report_line_without_timing().starts_with("FAIL [99] broken: error: boom"));
    }
}
