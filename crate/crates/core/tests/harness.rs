use std::path::{Path, PathBuf};
use std::process::Command;

use twolane::harness::{
    load_config, make_initial_condition, parse_config, prepare, run_batch, run_scenario, write_trace, Bounds, Mode,
    ScenarioConfig, ScenarioKind,
};
use twolane::model::{compute_steady_state_with, linearize, PER_KM};
use twolane::pde_sim::PlantKind;
use twolane::{Error, Grid};

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("kernel-cache")
}

/// Small, quick configuration with coarse kernels.
fn quick(mode: Mode, plant: PlantKind) -> ScenarioConfig {
    let mut c = parse_config("").unwrap();
    c.mode = mode;
    c.plant = plant;
    c.sim.scheme = plant.default_scheme();
    c.sim.grid = Grid::new(60, c.model.seg_length).unwrap();
    c.sim.t_end = 60.0;
    c.kernels.n = 33;
    c.kernel_cache = Some(cache_dir());
    c
}

#[test]
fn config_file_loads_with_units() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "[model]\nv_max_kmh = 120.0\n[steady]\nrho_star_slow_veh_per_km = 170.0\n[run]\nmode = \"open_loop\"\nt_end_s = 90.0\n[control]\nsaturation_kmh = 36.0\n",
    )
    .unwrap();
    let c = load_config(&path).unwrap();
    assert!((c.model.v_max - 120.0 / 3.6).abs() < 1e-12);
    assert!((c.rho_star_slow - 0.17).abs() < 1e-15);
    assert_eq!(c.mode, Mode::OpenLoop);
    assert_eq!(c.sim.t_end, 90.0);
    assert!((c.saturation.unwrap() - 10.0).abs() < 1e-12);

    let saved = dir.path().join("saved.toml");
    c.save(&saved).unwrap();
    assert_eq!(load_config(&saved).unwrap(), c);
}

#[test]
fn missing_config_reports_path() {
    let err = load_config(Path::new("/nonexistent/run.toml")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/run.toml"));
}

#[test]
fn zero_amplitude_is_the_steady_state() {
    for kind in [ScenarioKind::StopAndGo, ScenarioKind::Bottleneck] {
        let mut c = parse_config("").unwrap();
        c.scenario.kind = kind;
        c.scenario.amplitude = 0.0;
        c.scenario.downstream_rise = 0.0;
        c.scenario.upstream_drop = 0.0;
        c.scenario.pulse_amplitude = 0.0;
        let (ss, _, f) = prepare(&c).unwrap();
        for i in 0..2 {
            assert!(f.rho[i].iter().all(|&r| r == ss.rho_star[i]));
            assert!(f.v[i].iter().all(|&v| v == ss.v_star[i]));
        }
    }
}

#[test]
fn sine_peak_is_ten_percent_above() {
    let c = parse_config("").unwrap();
    let (ss, _, f) = prepare(&c).unwrap();
    let peak = f.rho[0].iter().cloned().fold(f64::MIN, f64::max);
    // n_cells = 200 puts a node exactly on the crest at L/4.
    assert!((peak - 1.1 * ss.rho_star[0]).abs() < 1e-12 * ss.rho_star[0]);
    let low = f.v[0].iter().cloned().fold(f64::MAX, f64::min);
    assert!((low - 0.9 * ss.v_star[0]).abs() < 1e-12 * ss.v_star[0]);
}

#[test]
fn wide_bottleneck_front_flattens() {
    let mut c = parse_config("[scenario]\nkind = \"bottleneck\"\n").unwrap();
    c.scenario.shock_width = 0.99;
    c.scenario.pulse_amplitude = 0.0;
    let (ss, _, f) = prepare(&c).unwrap();
    let rel: Vec<f64> = f.rho[0].iter().map(|r| r / ss.rho_star[0] - 1.0).collect();
    let spread = rel.iter().cloned().fold(f64::MIN, f64::max) - rel.iter().cloned().fold(f64::MAX, f64::min);
    let step = c.scenario.downstream_rise + c.scenario.upstream_drop;
    assert!(spread < 0.5 * step, "spread {spread}");

    c.scenario.shock_width = 0.01;
    let (_, _, sharp) = prepare(&c).unwrap();
    let first = sharp.rho[0][0] / ss.rho_star[0] - 1.0;
    let last = sharp.rho[0][200] / ss.rho_star[0] - 1.0;
    assert!((first + c.scenario.upstream_drop).abs() < 1e-12);
    assert!((last - c.scenario.downstream_rise).abs() < 1e-12);
}

#[test]
fn bottleneck_has_dense_slow_downstream_and_fast_pulse() {
    let c = parse_config("[scenario]\nkind = \"bottleneck\"\n").unwrap();
    let (ss, _, f) = prepare(&c).unwrap();
    assert!(f.rho[0][190] > ss.rho_star[0] && f.v[0][190] < ss.v_star[0]);
    assert!(f.rho[0][10] < ss.rho_star[0]);
    let j = 60; // pulse centre at 0.3 L
    assert!((f.rho[1][j] / ss.rho_star[1] - 1.2).abs() < 1e-12);
}

#[test]
fn amplitude_leaving_lane_range_is_rejected() {
    let mut c = parse_config("").unwrap();
    let base = compute_steady_state_with(&c.model, c.rho_star_slow, &c.steady).unwrap();
    c.rho_star_slow = base.rho_max[0] / 1.4;
    c.scenario.amplitude = 0.5;
    let ss = compute_steady_state_with(&c.model, c.rho_star_slow, &c.steady).unwrap();
    let err = make_initial_condition(&c, &ss).unwrap_err();
    assert!(matches!(err, Error::Invalid { .. }), "{err}");
}

#[test]
fn bounds_follow_transport_times() {
    let c = parse_config("").unwrap();
    let ss = compute_steady_state_with(&c.model, c.rho_star_slow, &c.steady).unwrap();
    let lc = linearize(&c.model, &ss).unwrap();
    let b = Bounds::new(&lc);
    let l = lc.length;
    assert_eq!(b.t_f, l / lc.eps[0] + l / lc.mu[1] + l / lc.mu[0]);
    assert_eq!(b.t_o, l / lc.eps[0] + l / lc.eps[1] + l / lc.mu[1]);
    assert_eq!(b.t_out, b.t_o + b.t_f);
}

#[test]
fn steady_run_writes_constant_columns() {
    let mut c = quick(Mode::OpenLoop, PlantKind::Nonlinear);
    c.scenario.amplitude = 0.0;
    let out = run_scenario(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_trace(&out, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("rho_slow.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let header = rows.headers().unwrap().clone();
    assert_eq!(header.len(), 1 + c.sim.grid.n_cells + 1);
    assert_eq!(&header[0], "t_s");
    let want = out.steady.rho_star[0];
    let mut n_rows = 0;
    for rec in rows.records() {
        let rec = rec.unwrap();
        assert_eq!(rec.len(), header.len());
        for v in rec.iter().skip(1) {
            assert!((v.parse::<f64>().unwrap() - want).abs() < 1e-12 * want);
        }
        n_rows += 1;
    }
    assert_eq!(n_rows, out.trace.times.len());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["bounds"]["t_f"].as_f64().unwrap() > 0.0);
    assert_eq!(metrics["reported_bounds"]["t_out"].as_f64(), Some(570.0));
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["hash"].as_str(), Some(c.hash().as_str()));
}

#[test]
fn observer_mode_writes_estimates() {
    let c = quick(Mode::Observer, PlantKind::Linearized);
    let out = run_scenario(&c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = write_trace(&out, dir.path()).unwrap();
    for name in ["rho_slow_est.csv", "v_fast_est.csv", "commands.csv", "norms.csv"] {
        assert!(files.contains(&dir.path().join(name)), "{name} missing");
    }
    // Open-loop plant: the commands stay at zero.
    assert!(out.trace.commands.iter().all(|u| u.u_slow == 0.0 && u.u_fast == 0.0));
    assert!(out.metrics.initial_estimation_error.unwrap() > 0.0);
}

#[test]
fn saturation_bounds_commands() {
    let mut c = quick(Mode::FullState, PlantKind::Linearized);
    c.saturation = Some(0.05);
    let out = run_scenario(&c).unwrap();
    assert!(out.metrics.saturated_steps > 0);
    assert!(out.trace.commands.iter().all(|u| u.u_slow.abs() <= 0.05 && u.u_fast.abs() <= 0.05));
}

#[test]
fn noise_is_seeded() {
    let mut c = quick(Mode::OutputFeedback, PlantKind::Linearized);
    c.noise = 0.5 * PER_KM;
    let a = run_scenario(&c).unwrap();
    let b = run_scenario(&c).unwrap();
    assert_eq!(a.trace.deviation, b.trace.deviation);
    c.seed = 7;
    let d = run_scenario(&c).unwrap();
    assert_ne!(a.trace.deviation, d.trace.deviation);
}

#[test]
fn batch_needs_distinct_directories() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = quick(Mode::OpenLoop, PlantKind::Linearized);
    a.out_dir = Some(dir.path().join("same"));
    let b = a.clone();
    let err = run_batch(&[a.clone(), b]).unwrap_err();
    assert!(err.to_string().contains("more than one"), "{err}");

    let mut b = a.clone();
    b.out_dir = Some(dir.path().join("other"));
    b.scenario.kind = ScenarioKind::Bottleneck;
    let results = run_batch(&[a, b]).unwrap();
    assert!(results.iter().all(|r| r.is_ok()));
    assert!(dir.path().join("other/metrics.json").exists());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twolane"))
}

#[test]
fn cli_reports_errors_as_json() {
    let out = cli().args(["simulate", "--cfl", "1.5", "--out", "/tmp/unused"]).output().unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid");
    assert!(err["message"].as_str().unwrap().contains("cfl"));

    let out = cli().args(["simulate", "--mode", "sideways"]).output().unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}

#[test]
fn cli_steady_and_linearize() {
    let out = cli().arg("steady").output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((v["steady"]["rho_star"][0].as_f64().unwrap() - 0.18).abs() < 1e-15);

    let out = cli().arg("linearize").output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["speed_ordering_holds"], true);
    assert!(v["bounds"]["t_out"].as_f64().unwrap() > 0.0);
}

#[test]
fn cli_simulate_and_fundamental_diagram() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    std::fs::write(
        &cfg,
        format!(
            "[run]\nmode = \"full_state\"\n[kernels]\nn = 33\ncache_dir = \"{}\"\n",
            cache_dir().display()
        ),
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = cli()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--nx", "50", "--t-end", "30", "--plant", "nonlinear", "--out"])
        .arg(&run_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("v_fast.csv").exists());

    let fd_dir = dir.path().join("fd");
    let out = cli().args(["fundamental-diagram", "--samples", "11", "--out"]).arg(&fd_dir).output().unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(fd_dir.join("fd_slow.csv")).unwrap();
    assert_eq!(text.lines().count(), 12);
}
