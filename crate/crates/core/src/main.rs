use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use twolane::harness::{self, Bounds, Mode, ScenarioConfig, ScenarioKind};
use twolane::kernels::{control_kernels_cached, observer_kernels_cached, KernelSettings};
use twolane::model::{compute_steady_state_with, fundamental_diagram_samples, linearize, FdSample, PER_KM, KMH};
use twolane::pde_sim::PlantKind;
use twolane::Grid;

#[derive(Parser)]
#[command(name = "twolane", version, about = "Two-lane ARZ traffic model with boundary VSL control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the equilibrium and its balance residuals.
    Steady(Common),
    /// Print the linearized coefficients, speed ordering and time bounds.
    Linearize(Common),
    /// Solve (or load cached) kernels and print residual reports.
    Kernels {
        #[command(flatten)]
        common: Common,
        /// Nodes per kernel mesh edge.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Run one or more scenarios and write their run directories.
    Simulate(SimulateArgs),
    /// Write speed and flux curves of the single-lane reference and both lanes.
    FundamentalDiagram {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 201)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    StopAndGo,
    Bottleneck,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OpenLoop,
    FullState,
    Observer,
    OutputFeedback,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlantArg {
    Nonlinear,
    Linearized,
}

#[derive(Args)]
struct SimulateArgs {
    /// Config file; repeat to run a batch in parallel.
    #[arg(long)]
    config: Vec<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    plant: Option<PlantArg>,
    /// Number of cells.
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    cfl: Option<f64>,
    /// Final time (s).
    #[arg(long)]
    t_end: Option<f64>,
    /// Output directory. With several configs, one subdirectory per config
    /// is created underneath.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed of the measurement noise.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(path: Option<&Path>) -> anyhow::Result<ScenarioConfig> {
    Ok(match path {
        Some(p) => harness::load_config(p)?,
        None => harness::parse_config("")?,
    })
}

fn apply_overrides(cfg: &mut ScenarioConfig, a: &SimulateArgs) -> anyhow::Result<()> {
    if let Some(s) = a.scenario {
        cfg.scenario.kind = match s {
            ScenarioArg::StopAndGo => ScenarioKind::StopAndGo,
            ScenarioArg::Bottleneck => ScenarioKind::Bottleneck,
        };
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::OpenLoop => Mode::OpenLoop,
            ModeArg::FullState => Mode::FullState,
            ModeArg::Observer => Mode::Observer,
            ModeArg::OutputFeedback => Mode::OutputFeedback,
        };
    }
    if let Some(p) = a.plant {
        cfg.plant = match p {
            PlantArg::Nonlinear => PlantKind::Nonlinear,
            PlantArg::Linearized => PlantKind::Linearized,
        };
        cfg.sim.scheme = cfg.plant.default_scheme();
    }
    if let Some(nx) = a.nx {
        cfg.sim.grid = Grid::new(nx, cfg.model.seg_length)?;
    }
    if let Some(c) = a.cfl {
        cfg.sim.cfl = c;
    }
    if let Some(t) = a.t_end {
        cfg.sim.t_end = t;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(())
}

fn simulate(a: &SimulateArgs) -> anyhow::Result<serde_json::Value> {
    let paths: Vec<Option<&Path>> = if a.config.is_empty() {
        vec![None]
    } else {
        a.config.iter().map(|p| Some(p.as_path())).collect()
    };
    let mut configs = Vec::with_capacity(paths.len());
    for (k, p) in paths.iter().enumerate() {
        let mut cfg = load(*p)?;
        apply_overrides(&mut cfg, a)?;
        match (&a.out, paths.len()) {
            (Some(out), 1) => cfg.out_dir = Some(out.clone()),
            (Some(out), _) => {
                let stem = p.and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned());
                cfg.out_dir = Some(out.join(stem.unwrap_or_else(|| format!("run{k}"))));
            }
            (None, _) => {}
        }
        if cfg.out_dir.is_none() {
            bail!("no output directory: pass --out or set run.out_dir");
        }
        configs.push(cfg);
    }
    let results = harness::run_batch(&configs)?;
    let mut runs = Vec::new();
    for (cfg, r) in configs.iter().zip(results) {
        let m = r.with_context(|| format!("run writing to {}", cfg.out_dir.as_ref().unwrap().display()))?;
        runs.push(json!({
            "out": cfg.out_dir,
            "mode": cfg.mode,
            "plant": cfg.plant,
            "scenario": cfg.scenario.kind,
            "t_f": m.bounds.t_f,
            "t_o": m.bounds.t_o,
            "t_out": m.bounds.t_out,
            "final_ratio": m.final_ratio,
            "convergence_time": m.convergence_time,
            "final_estimation_error": m.final_estimation_error,
            "saturated_steps": m.saturated_steps,
        }));
    }
    Ok(json!({ "runs": runs }))
}

fn write_fd(path: &Path, samples: &[FdSample]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    w.write_record(["rho_veh_per_km", "speed_kmh", "flux_veh_per_h"])?;
    for s in samples {
        w.write_record([
            format!("{}", s.rho / PER_KM),
            format!("{}", s.speed / KMH),
            format!("{}", s.flux * 3600.0),
        ])?;
    }
    w.flush().with_context(|| path.display().to_string())?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    match cli.command {
        Command::Steady(c) => {
            let cfg = load(c.config.as_deref())?;
            let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady)?;
            let residuals = ss.balance_residuals(&cfg.model);
            Ok(json!({ "steady": ss, "balance_residuals": residuals }))
        }
        Command::Linearize(c) => {
            let cfg = load(c.config.as_deref())?;
            let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady)?;
            let lc = linearize(&cfg.model, &ss)?;
            Ok(json!({
                "coeffs": lc,
                "speed_ordering_holds": lc.speed_ordering_holds(),
                "bounds": Bounds::new(&lc),
            }))
        }
        Command::Kernels { common, n, cache_dir } => {
            let cfg = load(common.config.as_deref())?;
            let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady)?;
            let lc = linearize(&cfg.model, &ss)?;
            let settings = KernelSettings {
                n: n.unwrap_or(cfg.kernels.n),
                ..cfg.kernels
            };
            settings.validate()?;
            let dir = cache_dir.or(cfg.kernel_cache);
            let ks = control_kernels_cached(&lc, &settings, dir.as_deref())?;
            let oks = observer_kernels_cached(&lc, &settings, dir.as_deref())?;
            Ok(json!({
                "n": settings.n,
                "control": { "iterations": ks.iterations(), "residual": ks.residual },
                "observer": { "iterations": oks.iterations(), "residual": oks.residual },
            }))
        }
        Command::Simulate(a) => simulate(&a),
        Command::FundamentalDiagram { common, samples, out } => {
            let cfg = load(common.config.as_deref())?;
            let ss = compute_steady_state_with(&cfg.model, cfg.rho_star_slow, &cfg.steady)?;
            let fd = fundamental_diagram_samples(&cfg.model, &ss, samples)?;
            std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            let mut files = Vec::new();
            for (name, s) in [("single", &fd.single), ("slow", &fd.slow), ("fast", &fd.fast)] {
                let p = out.join(format!("fd_{name}.csv"));
                write_fd(&p, s)?;
                files.push(p);
            }
            Ok(json!({ "files": files }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let report = json!({ "error": "usage", "message": e.render().to_string().trim_end() });
            eprintln!("{report}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<twolane::Error>())
                .map(|e| e.kind())
                .unwrap_or("other");
            let report = json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
