use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use ssne_core::ensemble::{
    self, collapse_time_stats, estimate_cross_covariance, estimate_decoherence_rate, estimate_diffusion,
    estimate_ke_rate, run_ensemble, Bootstrap, EnsembleConfig, EstimatorResult, InitialState, Solver, VarianceModel,
};
use ssne_core::gaussian::{width_flow_fixed_points, AxisState};
use ssne_core::model::{self, CatGeometry, Constants, MassProfile};
use ssne_core::output::{long_csv, metadata_json, summary_json, table_csv, write_file, RunMetadata};
use ssne_core::verify::{self, TwoPacketSetup, VerifyOptions, COLLAPSE_THRESHOLD};
use ssne_core::{Observable, Units, Variant};

#[derive(Parser, Debug)]
#[command(name = "ssne", version, about = "Experiments with Schrödinger-Newton and gravity-related collapse dynamics")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching key of
/// the `--config` file.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// TOML file with any of the keys below (snake_case).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    #[arg(long, global = true)]
    trajectories: Option<usize>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    /// Sphere radius, or the Gaussian ball's σ.
    #[arg(long, global = true)]
    radius: Option<f64>,
    #[arg(long, global = true)]
    solver: Option<Solver>,
    #[arg(long, global = true)]
    t_final: Option<f64>,
    #[arg(long, global = true)]
    record_every: Option<usize>,
    /// Cat separation.
    #[arg(long, global = true)]
    ell: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// ω_G, E_G, U(d) and ΔE_G for a mass profile.
    Statics {
        #[arg(long, default_value_t = 6.0)]
        d_max: f64,
        #[arg(long, default_value_t = 61)]
        points: usize,
    },
    /// Width relaxation towards the stationary packet.
    Solitons {
        /// Real and imaginary part of the initial width parameter; the
        /// variant's soliton when omitted.
        #[arg(long, num_args = 2, value_names = ["RE", "IM"], allow_negative_numbers = true)]
        width: Option<Vec<f64>>,
    },
    /// Ensemble variances of x̄ and p̄ and their linear growth rates.
    Diffusion,
    /// Growth rate of the mean kinetic energy.
    KeRate,
    /// Collapse-time or decoherence study of a two-branch superposition.
    Cat {
        #[arg(long, value_enum, default_value_t = Study::Collapse)]
        study: Study,
    },
    /// Two packets attracting under the nonlocal Schrödinger-Newton equation.
    Attract {
        #[arg(long)]
        coupling: Option<f64>,
        #[arg(long)]
        softening: Option<f64>,
    },
    /// Run the acceptance criteria and write a pass/fail report.
    Verify {
        /// Comma-separated criterion numbers; all when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Profile {
    Uniform,
    Gaussian,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Study {
    Collapse,
    Decoherence,
}

/// Effective settings after merging file and flags. Worker count and
/// output location do not change results and are kept out of summaries.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Settings {
    seed: Option<u64>,
    #[serde(skip_serializing)]
    workers: Option<usize>,
    #[serde(skip_serializing)]
    out_dir: Option<PathBuf>,
    dt: Option<f64>,
    trajectories: Option<usize>,
    variant: Option<Variant>,
    profile: Option<Profile>,
    radius: Option<f64>,
    solver: Option<Solver>,
    t_final: Option<f64>,
    record_every: Option<usize>,
    ell: Option<f64>,
}

const DEFAULT_SEED: u64 = 1;

impl Settings {
    fn load(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => Settings::default(),
        };
        Ok(Settings {
            seed: args.seed.or(file.seed),
            workers: args.workers.or(file.workers),
            out_dir: args.out_dir.clone().or(file.out_dir),
            dt: args.dt.or(file.dt),
            trajectories: args.trajectories.or(file.trajectories),
            variant: args.variant.or(file.variant),
            profile: args.profile.or(file.profile),
            radius: args.radius.or(file.radius),
            solver: args.solver.or(file.solver),
            t_final: args.t_final.or(file.t_final),
            record_every: args.record_every.or(file.record_every),
            ell: args.ell.or(file.ell),
        })
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("ssne-out"))
    }

    fn mass_profile(&self) -> Result<MassProfile> {
        let r = self.radius.unwrap_or(1.0);
        Ok(match self.profile.unwrap_or(Profile::Uniform) {
            Profile::Uniform => MassProfile::uniform_sphere(r, Constants::unit())?,
            Profile::Gaussian => MassProfile::gaussian_ball(r, Constants::unit())?,
        })
    }

    fn units(&self) -> Result<Units> {
        Ok(Units::from_profile(&self.mass_profile()?))
    }

    /// Ensemble with command defaults filled in where no setting is given.
    fn ensemble(&self, variant: Variant, solver: Solver, n: usize, t_final: f64, every: usize) -> Result<EnsembleConfig> {
        let mut cfg = EnsembleConfig::new(
            self.variant.unwrap_or(variant),
            self.solver.unwrap_or(solver),
            self.trajectories.unwrap_or(n),
            self.t_final.unwrap_or(t_final),
            self.dt.unwrap_or(1e-3),
            self.seed(),
        );
        cfg.record_every = self.record_every.unwrap_or(every);
        cfg.units = self.units()?;
        cfg.workers = self.workers;
        Ok(cfg)
    }

    fn metadata(&self, command: &str, units: Units) -> RunMetadata {
        RunMetadata::new(command, units, self.seed()).parameter("settings", self)
    }
}

struct Output {
    dir: PathBuf,
    workers: Option<usize>,
}

impl Output {
    fn new(dir: PathBuf, workers: Option<usize>) -> Self {
        Self { dir, workers }
    }

    fn stamped(&self, meta: &RunMetadata) -> RunMetadata {
        meta.clone().parameter("out_dir", &self.dir).parameter("workers", self.workers).stamped()
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        write_file(&self.dir, name, contents).with_context(|| format!("writing {}", self.dir.join(name).display()))
    }

    fn finish(&self, meta: &RunMetadata, results: &[EstimatorResult]) -> Result<()> {
        self.write("summary.json", &summary_json(meta, results))?;
        self.write("metadata.json", &metadata_json(&self.stamped(meta)))
    }
}

fn ensemble_meta(s: &Settings, command: &str, cfg: &EnsembleConfig) -> RunMetadata {
    let cfg = EnsembleConfig { workers: None, ..cfg.clone() };
    let mut meta = s.metadata(command, cfg.units).parameter("ensemble", &cfg);
    meta.dt = Some(cfg.dt);
    if cfg.solver == Solver::Grid {
        meta.grid = Some(cfg.grid);
    }
    meta
}

fn statics(s: &Settings, out: &Output, d_max: f64, points: usize) -> Result<()> {
    if points < 2 || !(d_max > 0.0) {
        bail!("need --points >= 2 and --d-max > 0");
    }
    let p = s.mass_profile()?;
    let omega = model::omega_g(&p);
    let e_g = model::self_energy(&p);
    let kind = match s.profile.unwrap_or(Profile::Uniform) {
        Profile::Uniform => "uniform",
        Profile::Gaussian => "gaussian",
    };
    out.write("statics.csv", &format!("profile,scale,omega_g,self_energy\n{kind},{},{omega},{e_g}\n", p.scale()))?;
    let mut rows = Vec::with_capacity(points);
    for i in 0..points {
        let d = d_max * i as f64 / (points - 1) as f64;
        let de = model::delta_e_g(&CatGeometry::new(d, p)?)?;
        rows.push(vec![d, model::mutual_potential(&p, d)?, de]);
    }
    out.write("potential.csv", &table_csv(&["d", "mutual_potential", "delta_e_g"], &rows))?;
    println!("profile={kind} scale={} omega_g={omega} self_energy={e_g}", p.scale());
    let meta = s.metadata("statics", Units::from_profile(&p)).parameter("profile", p);
    out.finish(&meta, &[])
}

fn solitons(s: &Settings, out: &Output, width: Option<Vec<f64>>) -> Result<()> {
    let mut cfg = s.ensemble(Variant::Gsse, Solver::Grid, 5, 8.0, 100)?;
    let star = cfg.variant.soliton_width(&cfg.units);
    let target = AxisState { xbar: 0.0, pbar: 0.0, a: star }.position_variance();
    if let Some(w) = width {
        cfg.initial = InitialState::Gaussian { xbar: 0.0, pbar: 0.0, a: Complex64::new(w[0], w[1]) };
    }
    cfg.observables = vec![Observable::Dx, Observable::Kinetic];
    let recs = run_ensemble(&cfg)?;
    out.write("trajectories.csv", &long_csv(&recs, &cfg.observables))?;
    let n = recs.len() as f64;
    let finals: Vec<f64> = recs.iter().map(|r| r.dx.last().copied().unwrap_or(f64::NAN).powi(2)).collect();
    let mean = finals.iter().sum::<f64>() / n;
    let sd = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut details = BTreeMap::new();
    details.insert("target".into(), target);
    details.insert("soliton_width_re".into(), star.re);
    details.insert("soliton_width_im".into(), star.im);
    let result = EstimatorResult {
        quantity: "final_position_variance".into(),
        estimate: mean,
        stderr: sd / n.sqrt(),
        fit_window: [cfg.t_final, cfg.t_final],
        r_squared: None,
        residual_trend: false,
        n_trajectories: recs.len(),
        details,
    };
    println!("final Δx² = {mean:.6} (stationary {target:.6})");
    let meta = ensemble_meta(s, "solitons", &cfg).parameter("fixed_points", width_flow_fixed_points(cfg.variant, &cfg.units));
    out.finish(&meta, &[result])
}

fn diffusion(s: &Settings, out: &Output) -> Result<()> {
    let cfg = s.ensemble(Variant::Gsse, Solver::Gaussian, 1000, 2.0, 20)?;
    let recs = run_ensemble(&cfg)?;
    let boot = Bootstrap::default();
    let results = vec![
        estimate_diffusion(&recs, Observable::Xbar, VarianceModel::Linear, None, boot)?,
        estimate_diffusion(&recs, Observable::Pbar, VarianceModel::Linear, None, boot)?,
        estimate_diffusion(&recs, Observable::Xbar, VarianceModel::Cubic, None, boot)?,
        estimate_cross_covariance(&recs, None, boot)?,
    ];
    out.write("moments.csv", &verify::moment_table(&recs))?;
    out.write("trajectories.csv", &long_csv(&recs, &[Observable::Xbar, Observable::Pbar]))?;
    for r in &results {
        println!("{} = {:.6} ± {:.6}", r.quantity, r.estimate, r.stderr);
    }
    out.finish(&ensemble_meta(s, "diffusion", &cfg), &results)
}

fn ke_rate(s: &Settings, out: &Output) -> Result<()> {
    let mut cfg = s.ensemble(Variant::Gsse, Solver::Gaussian, 1000, 4.0, 40)?;
    cfg.observables = vec![Observable::Kinetic];
    let recs = run_ensemble(&cfg)?;
    let result = estimate_ke_rate(&recs, None)?;
    out.write("trajectories.csv", &long_csv(&recs, &cfg.observables))?;
    println!("{} = {:.6} ± {:.6} per axis", result.quantity, result.estimate, result.stderr);
    out.finish(&ensemble_meta(s, "ke-rate", &cfg), &[result])
}

fn cat(s: &Settings, out: &Output, study: Study) -> Result<()> {
    let seed = s.seed();
    let ell = s.ell;
    let mut cfg = match study {
        Study::Collapse => verify::collapse_config(ell.unwrap_or(12.0), s.trajectories.unwrap_or(400), seed),
        Study::Decoherence => verify::coherence_config(
            s.variant.unwrap_or(Variant::Gsse),
            ell.unwrap_or(2.0),
            s.trajectories.unwrap_or(400),
            seed,
        ),
    }
    .map_err(anyhow::Error::msg)?;
    if study == Study::Collapse {
        if let Some(v) = s.variant {
            cfg.variant = v;
        }
    }
    if let Some(dt) = s.dt {
        cfg.dt = dt;
    }
    if let Some(t) = s.t_final {
        cfg.t_final = t;
    }
    if let Some(k) = s.record_every {
        cfg.record_every = k;
    }
    cfg.workers = s.workers;
    let recs = run_ensemble(&cfg)?;
    let boot = Bootstrap::default();
    let result = match study {
        Study::Collapse => {
            let rows: Vec<Vec<f64>> = recs
                .iter()
                .map(|r| match ensemble::first_passage(r, COLLAPSE_THRESHOLD) {
                    Some((t, left)) => vec![r.trajectory as f64, t, f64::from(u8::from(left))],
                    None => vec![r.trajectory as f64, f64::INFINITY, f64::NAN],
                })
                .collect();
            out.write("collapse_times.csv", &table_csv(&["trajectory", "first_passage", "left_won"], &rows))?;
            out.write("trajectories.csv", &long_csv(&recs, &[Observable::BranchLeft]))?;
            let st = collapse_time_stats(&recs, COLLAPSE_THRESHOLD, boot)?;
            println!(
                "median collapse time {:.6} (95% CI {:.6}..{:.6}), left fraction {:.3}, censored {}",
                st.median, st.ci[0], st.ci[1], st.left_fraction, st.censored
            );
            st.to_estimator()
        }
        Study::Decoherence => {
            let (ts, cs) = ensemble::coherence_series(&recs)?;
            let rows: Vec<Vec<f64>> = ts.iter().zip(&cs).map(|(t, c)| vec![*t, *c]).collect();
            out.write("coherence.csv", &table_csv(&["time", "coherence"], &rows))?;
            let r = estimate_decoherence_rate(&recs, None, boot)?;
            println!("{} = {:.6} ± {:.6}", r.quantity, r.estimate, r.stderr);
            r
        }
    };
    let mut meta = ensemble_meta(s, "cat", &cfg);
    if study == Study::Collapse {
        meta.thresholds.insert("collapse".into(), COLLAPSE_THRESHOLD);
    }
    out.finish(&meta, &[result])
}

fn attract(s: &Settings, out: &Output, coupling: Option<f64>, softening: Option<f64>) -> Result<()> {
    let mut setup = TwoPacketSetup::standard().map_err(anyhow::Error::msg)?;
    if coupling.is_some() || softening.is_some() {
        setup.kernel = ssne_core::grid::SoftKernelSpec::new(
            softening.unwrap_or(setup.kernel.softening),
            coupling.unwrap_or(setup.kernel.coupling),
        )?;
    }
    if let Some(ell) = s.ell {
        setup.ell = ell;
    }
    if let Some(dt) = s.dt {
        setup.dt = dt;
    }
    let t_final = s.t_final.unwrap_or(setup.steps as f64 * 1e-3);
    setup.steps = (t_final / setup.dt).round() as usize;
    if let Some(k) = s.record_every {
        setup.sample_every = k;
    }
    let (ts, seps, com) = setup.run().map_err(anyhow::Error::msg)?;
    out.write(
        "separation.csv",
        &table_csv(&["time", "separation"], &ts.iter().zip(&seps).map(|(t, d)| vec![*t, *d]).collect::<Vec<_>>()),
    )?;
    let window = 0.5f64.min(t_final);
    let measured = verify::fitted_acceleration(&ts, &seps, window);
    let classical = setup.classical_acceleration();
    let mut details = BTreeMap::new();
    details.insert("classical".into(), classical);
    details.insert("center_of_mass_drift".into(), com);
    details.insert("monotone".into(), f64::from(u8::from(seps.windows(2).all(|w| w[1] < w[0]))));
    let result = EstimatorResult {
        quantity: "initial_relative_acceleration".into(),
        estimate: measured,
        stderr: 0.0,
        fit_window: [0.0, window],
        r_squared: None,
        residual_trend: false,
        n_trajectories: 1,
        details,
    };
    println!("initial relative acceleration {measured:.6} (classical smeared force {classical:.6})");
    let mut meta = s.metadata("attract", Units::natural()).parameter("setup", setup);
    meta.dt = Some(setup.dt);
    meta.grid = Some(setup.grid);
    out.finish(&meta, &[result])
}

#[derive(Serialize)]
struct ReportEntry<'a> {
    id: u8,
    name: &'a str,
    passed: bool,
    checks: &'a [String],
    measurements: &'a BTreeMap<String, f64>,
    error: Option<&'a str>,
}

fn verify_cmd(s: &Settings, out: &Output, only: &[u8]) -> Result<bool> {
    let opts = VerifyOptions { seed: s.seed.unwrap_or(VerifyOptions::default().seed), workers: s.workers };
    let outcomes = verify::run_suite(&opts, only, |o| println!("{}", o.report_line()));
    if outcomes.is_empty() {
        bail!("no criterion matches {only:?}");
    }
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&o.report_line_without_timing());
        text.push('\n');
        for a in &o.artifacts {
            out.write(&a.name, &a.contents)?;
        }
    }
    out.write("report.txt", &text)?;
    let entries: Vec<ReportEntry> = outcomes
        .iter()
        .map(|o| ReportEntry {
            id: o.id,
            name: o.name,
            passed: o.passed,
            checks: &o.checks,
            measurements: &o.measurements,
            error: o.error.as_deref(),
        })
        .collect();
    out.write("report.json", &(serde_json::to_string_pretty(&entries)? + "\n"))?;
    let timings: BTreeMap<String, f64> = outcomes.iter().map(|o| (o.name.to_string(), o.seconds)).collect();
    let meta = s.metadata("verify", Units::natural()).parameter("only", only);
    out.write("metadata.json", &metadata_json(&out.stamped(&meta.parameter("seconds", timings))))?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    let settings = Settings::load(&cli.common)?;
    if settings.workers == Some(0) {
        bail!("--workers must be positive");
    }
    let out = Output::new(settings.out_dir(), settings.workers);
    match cli.command {
        Command::Statics { d_max, points } => statics(&settings, &out, d_max, points)?,
        Command::Solitons { width } => solitons(&settings, &out, width)?,
        Command::Diffusion => diffusion(&settings, &out)?,
        Command::KeRate => ke_rate(&settings, &out)?,
        Command::Cat { study } => cat(&settings, &out, study)?,
        Command::Attract { coupling, softening } => attract(&settings, &out, coupling, softening)?,
        Command::Verify { only } => return verify_cmd(&settings, &out, &only),
    }
    println!("wrote {}", display(&out.dir));
    Ok(true)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
