use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use risloc::bounds::crlb_stage1;
use risloc::channel::{assemble_q_physics, assemble_q_synthetic, NoiseModel, PhysicsNoise, SyntheticNoise};
use risloc::estimation::{stage1_solve, Mode, DEFAULT_ITERATIONS};
use risloc::geometry::forward_measurements;
use risloc::scattering::{
    subris_rcs, to_dbm2, write_rcs_csv, AngleSweep, IncidenceGeometry, PhasePolicy, SizeSweep, SurfaceKind,
};
use risloc::scenario::{load_scenario, tables23};
use risloc::simulation::{
    noisy_measurements, run_monte_carlo, run_preset, stage2_scenario, write_sweep_csv, Deployment, ExperimentSpec,
    McConfig, Preset, RmseReport, Stage2Snapshot, SweepRow,
};
use risloc::{Angles, Error, Scenario};

const EXIT_ERROR: u8 = 1;
const EXIT_THRESHOLD: u8 = 3;

#[derive(Parser)]
#[command(name = "risloc", version, about = "RIS-aided joint localization and sensing experiments")]
struct Cli {
    /// Master seed; fixes every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "RISLOC_OUT", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// RCS sweeps over angle or surface size.
    Rcs(RcsArgs),
    /// Stage-1 CRLB of a scenario.
    Crlb(SolveArgs),
    /// One stage-1 solve; prints the estimate as JSON.
    Localize(SolveArgs),
    /// Monte Carlo RMSE against the CRLB for one scenario.
    Montecarlo(McArgs),
    /// Run a named experiment sweep.
    Preset(PresetArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Angle,
    Size,
}

#[derive(Args)]
struct RcsArgs {
    #[arg(long, value_enum)]
    sweep: SweepKind,
    /// Incidence elevation in degrees.
    #[arg(long, default_value_t = 0.0)]
    theta_t: f64,
    /// Elements per side for the angle sweep.
    #[arg(long, default_value_t = 40)]
    k: usize,
    /// Largest side for the size sweep.
    #[arg(long, default_value_t = 100)]
    k_max: usize,
    /// Observation elevation for the size sweep, degrees.
    #[arg(long, default_value_t = 45.0)]
    theta_r: f64,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum NoiseKind {
    Zero,
    Synthetic,
    Physics,
}

#[derive(Args)]
struct SolveArgs {
    /// Scenario TOML, or `tables23` / `stage2` for the bundled worlds.
    #[arg(long, default_value = "tables23")]
    scenario: String,
    #[arg(long, value_enum, default_value = "synthetic")]
    noise: NoiseKind,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.1)]
    q: f64,
    #[arg(long, default_value = "hybrid")]
    mode: Mode,
    /// RIS phase policy for physics noise.
    #[arg(long, default_value = "continuous")]
    phases: PhasePolicy,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iters: usize,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    solve: SolveArgs,
    #[arg(long, default_value_t = 200)]
    trials: usize,
}

#[derive(Args)]
struct PresetArgs {
    preset: Preset,
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    deployment: Option<Deployment>,
    #[arg(long)]
    phases: Option<PhasePolicy>,
    /// Stage-2 path measurements: fresh or reused.
    #[arg(long, default_value = "fresh")]
    snapshot: Stage2Snapshot,
}

fn load(name: &str) -> Result<Scenario, Error> {
    match name {
        "tables23" => Ok(tables23()),
        "stage2" => Ok(stage2_scenario()),
        path => load_scenario(Path::new(path)),
    }
}

fn noise_model(sc: &Scenario, a: &SolveArgs, seed: u64) -> Result<NoiseModel, Error> {
    match a.noise {
        NoiseKind::Physics => {
            assemble_q_physics(sc, &PhysicsNoise { policy: a.phases, seed, ..PhysicsNoise::default() })
        }
        NoiseKind::Zero | NoiseKind::Synthetic => {
            assemble_q_synthetic(sc.n_bs(), sc.n_scatterers(), &SyntheticNoise::from_rho(a.rho, a.q))
        }
    }
}

// Quietly stops on a closed pipe (`risloc localize | head`).
fn emit_json(v: &serde_json::Value) {
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("plain record"));
}

fn create(path: &Path) -> Result<fs::File, Error> {
    fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn cmd_rcs(a: &RcsArgs, out: &Path, seed: u64) -> Result<u8, Error> {
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let (rows, path, x_name, k) = match a.sweep {
        SweepKind::Angle => {
            let s = AngleSweep { k: a.k, theta_t_deg: a.theta_t, step_deg: a.step, seed, ..AngleSweep::default() };
            (s.run()?, out.join(format!("rcs_angle_t{}.csv", a.theta_t)), "theta_r_deg", a.k)
        }
        SweepKind::Size => {
            let s = SizeSweep {
                ks: (1..=a.k_max).collect(),
                theta_t_deg: a.theta_t,
                theta_r_deg: a.theta_r,
                ..SizeSweep::default()
            };
            (s.run()?, out.join("rcs_size.csv"), "k", a.k_max)
        }
    };
    write_rcs_csv(&rows, x_name, std::io::BufWriter::new(create(&path)?))?;
    let sweep = AngleSweep { k, ..AngleSweep::default() };
    let ris = sweep.surface(SurfaceKind::Ris);
    let broadside = IncidenceGeometry::from_angles(Angles::new(0.0, 0.0), Angles::new(0.0, 0.0));
    let n = (k * k) as f64;
    println!("wrote {} ({} rows)", path.display(), rows.len());
    println!(
        "upper bound (KM)²σ_sub for K=M={k}: {:.2} dBm²",
        to_dbm2(n * n * subris_rcs(&broadside, &ris, sweep.wavelength))
    );
    Ok(0)
}

fn cmd_crlb(a: &SolveArgs, seed: u64) -> Result<u8, Error> {
    let sc = load(&a.scenario)?;
    let noise = noise_model(&sc, a, seed)?;
    let c = crlb_stage1(&sc, &noise.q(), a.mode)?;
    let s: Vec<f64> = (0..c.n_paths()).map(|p| c.s(p)).collect();
    let rec = json!({ "mode": a.mode, "crlb_u": c.u(), "crlb_u_dot": c.u_dot(), "crlb_s": s });
    emit_json(&rec);
    Ok(0)
}

fn cmd_localize(a: &SolveArgs, seed: u64) -> Result<u8, Error> {
    let sc = load(&a.scenario)?;
    let noise = noise_model(&sc, a, seed)?;
    let m0 = forward_measurements(&sc, false)?.with_cov(noise.q())?;
    let m = if a.noise == NoiseKind::Zero { m0 } else { noisy_measurements(&m0, &noise, seed)? };
    let est = stage1_solve(&m, &sc.bs, a.mode, a.iters)?;
    let err = json!({
        "u": (est.u - sc.ue_pos).norm(),
        "u_dot": est.u_dot.map(|v| (v - sc.ue_vel).norm()),
    });
    let rec = json!({ "estimate": est, "error": err, "seed": seed });
    emit_json(&rec);
    Ok(0)
}

fn report_rows(x: f64, r: &RmseReport) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    let mut add = |series: &str, rmse: f64, crlb: f64| {
        rows.push(SweepRow { sweep_var: x, series: series.into(), rmse, crlb, trials: r.trials, failures: r.failures })
    };
    add("u", r.rmse_u, r.crlb_u);
    if let (Some(e), Some(c)) = (r.rmse_u_dot, r.crlb_u_dot) {
        add("u_dot", e, c);
    }
    if !r.rmse_s.is_empty() {
        add("s_all", r.rmse_s_all, r.crlb_s_all);
    }
    rows
}

fn cmd_montecarlo(a: &McArgs, out: &Path, seed: u64) -> Result<u8, Error> {
    let s = &a.solve;
    if s.noise == NoiseKind::Zero {
        return Err(Error::InvalidArgument("montecarlo needs --noise synthetic or physics".into()));
    }
    let sc = load(&s.scenario)?;
    let noise = noise_model(&sc, s, seed)?;
    let cfg = McConfig { mode: s.mode, iters: s.iters, ..McConfig::new(a.trials, seed) };
    let r = run_monte_carlo(&sc, &noise, &cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let csv = out.join("montecarlo.csv");
    write_sweep_csv(&report_rows(s.rho, &r), std::io::BufWriter::new(create(&csv)?))?;
    let manifest = json!({
        "scenario": s.scenario,
        "noise": match s.noise { NoiseKind::Physics => "physics", _ => "synthetic" },
        "rho": s.rho,
        "q": s.q,
        "config": cfg,
        "report": r,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let js = out.join("montecarlo.json");
    fs::write(&js, serde_json::to_string_pretty(&manifest).expect("plain record") + "\n")
        .map_err(|e| Error::Io(format!("{}: {e}", js.display())))?;
    println!("RMSE(u) {:.4e} m, CRLB {:.4e} m", r.rmse_u, r.crlb_u);
    if let (Some(e), Some(c)) = (r.rmse_u_dot, r.crlb_u_dot) {
        println!("RMSE(u̇) {e:.4e} m/s, CRLB {c:.4e} m/s");
    }
    println!("{} trials, {} failed; wrote {} and {}", r.trials, r.failures, csv.display(), js.display());
    if r.failure_exceeded() {
        eprintln!("error: trial failure rate above threshold");
        return Ok(EXIT_THRESHOLD);
    }
    Ok(0)
}

fn cmd_preset(a: &PresetArgs, out: &Path, seed: u64) -> Result<u8, Error> {
    let mut spec = ExperimentSpec::new(a.preset);
    if a.paper_scale {
        spec = spec.paper_scale();
    }
    spec.seed = seed;
    spec.snapshot = a.snapshot;
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(d) = a.deployment {
        spec.deployments = vec![d];
    }
    if let Some(p) = a.phases {
        spec.policies = vec![p];
    }
    let done = run_preset(&spec, out)?;
    for f in &done.files {
        println!("wrote {}", f.display());
    }
    if done.failure_exceeded {
        eprintln!("error: trial failure rate above threshold in at least one sweep point");
        return Ok(EXIT_THRESHOLD);
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    }
    let res = match &cli.command {
        Command::Rcs(a) => cmd_rcs(a, &cli.out, cli.seed),
        Command::Crlb(a) => cmd_crlb(a, cli.seed),
        Command::Localize(a) => cmd_localize(a, cli.seed),
        Command::Montecarlo(a) => cmd_montecarlo(a, &cli.out, cli.seed),
        Command::Preset(a) => cmd_preset(a, &cli.out, cli.seed),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
