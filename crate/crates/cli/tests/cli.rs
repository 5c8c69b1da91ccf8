//! End-to-end dispatch tests over temporary output directories with
//! desk-scale configurations kept tiny.

use mflab_cli::{run, Cli, Command, EXIT_ERROR, EXIT_PASS};

fn cli(command: Command, config: Option<&std::path::Path>, out: &std::path::Path) -> Cli {
    Cli {
        config: config.map(|p| p.to_path_buf()),
        seed: Some(7),
        out: out.to_path_buf(),
        threads: None,
        command,
    }
}

fn write_config(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn check_assumptions_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&cli(Command::CheckAssumptions, None, dir.path()));
    assert_eq!(code, EXIT_PASS);
    let report = std::fs::read_to_string(
        dir.path().join("check-assumptions/admissibility.json"),
    )
    .unwrap();
    assert!(report.contains("\"pass\": true"));
    assert!(report.contains("config_sha256"));
    // the resolved config echo is written next to the report
    let echo =
        std::fs::read_to_string(dir.path().join("check-assumptions/config_echo.toml")).unwrap();
    assert!(echo.contains("[kernel]"));
}

#[test]
fn invalid_kernel_is_a_runtime_error_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[kernel]\ns = 1.5\n");
    let code = run(&cli(Command::CheckAssumptions, Some(&config), dir.path()));
    assert_eq!(code, EXIT_ERROR);
    let err =
        std::fs::read_to_string(dir.path().join("check-assumptions/error.json")).unwrap();
    assert!(err.contains("sub-Coulombic"), "{err}");
}

#[test]
fn simulate_sde_writes_positions_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
[sde]
n_particles = 8
dt = 1e-3
t_final = 0.01
snapshots = [0.005, 0.01]
"#,
    );
    let code = run(&cli(Command::SimulateSde, Some(&config), dir.path()));
    assert_eq!(code, EXIT_PASS);
    let csv =
        std::fs::read_to_string(dir.path().join("simulate-sde/positions.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("t,particle,x1,x2,x3"));
    let sidecar =
        std::fs::read_to_string(dir.path().join("simulate-sde/trajectory.json")).unwrap();
    assert!(sidecar.contains("min_dist"));
}

#[test]
fn simulate_sde_reruns_are_byte_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let body = r#"
[sde]
n_particles = 6
dt = 1e-3
t_final = 0.01
snapshots = [0.01]
"#;
    let config_a = write_config(dir_a.path(), body);
    let config_b = write_config(dir_b.path(), body);
    assert_eq!(run(&cli(Command::SimulateSde, Some(&config_a), dir_a.path())), EXIT_PASS);
    assert_eq!(run(&cli(Command::SimulateSde, Some(&config_b), dir_b.path())), EXIT_PASS);
    let a = std::fs::read(dir_a.path().join("simulate-sde/positions.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("simulate-sde/positions.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn solve_pde_writes_manifest_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
[grid]
n = 16
box_size = 12.0
[pde]
t_final = 0.04
dt = 0.02
snapshots = [0.02, 0.04]
"#,
    );
    let code = run(&cli(Command::SolvePde, Some(&config), dir.path()));
    assert_eq!(code, EXIT_PASS);
    let manifest =
        std::fs::read_to_string(dir.path().join("solve-pde/manifest.json")).unwrap();
    assert!(manifest.contains("snapshot_0000.bin"));
    let diag =
        std::fs::read_to_string(dir.path().join("solve-pde/diagnostics.csv")).unwrap();
    assert!(diag.starts_with("t,mass,lp_1"));
}

#[test]
fn modulated_energy_reports_components() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
[grid]
n = 16
box_size = 12.0
[sde]
n_particles = 8
"#,
    );
    let code = run(&cli(Command::ModulatedEnergy, Some(&config), dir.path()));
    assert_eq!(code, EXIT_PASS);
    let json = std::fs::read_to_string(
        dir.path().join("modulated-energy/modulated_energy.json"),
    )
    .unwrap();
    assert!(json.contains("particle_particle"));
    assert!(json.contains("sobolev_surrogate"));
    let csv = std::fs::read_to_string(
        dir.path().join("modulated-energy/modulated_energy.csv"),
    )
    .unwrap();
    assert!(csv.contains("f_n,particle_particle"));
}

#[test]
fn decay_with_interaction_disabled_saturates_from_below() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
[dynamics]
coupling = 0.0
[grid]
n = 16
box_size = 12.0
[initial]
std = 0.5
[study]
t_final = 0.4
snapshots = [0.2, 0.4]
pde_dt = 0.02
sde_dt = 0.02
runs = 30
n_sweep = [8]
"#,
    );
    let code = run(&cli(Command::Decay, Some(&config), dir.path()));
    assert_eq!(code, EXIT_PASS);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("decay/decay.json")).unwrap(),
    )
    .unwrap();
    let max_ratio = report["report"]["max_ratio"].as_f64().unwrap();
    assert!(max_ratio <= 1.0 + 1e-6, "heat flow ratio {max_ratio}");
}

#[test]
fn converge_tiny_sweep_passes() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"
[grid]
n = 16
box_size = 12.0
[dynamics]
sigma = 0.5
[study]
n_sweep = [8, 32]
runs = 32
t_final = 0.1
snapshots = [0.1]
pde_dt = 0.01
sde_dt = 5e-3
"#,
    );
    let code = run(&cli(Command::Converge, Some(&config), dir.path()));
    assert_eq!(code, EXIT_PASS, "tiny converge study should pass");
    let csv = std::fs::read_to_string(dir.path().join("converge/convergence.csv")).unwrap();
    assert!(csv.contains("n,t,mean_abs"));
}
