//! End-to-end tests that drive the installed binary the way a shell user
//! would: write a config, run a subcommand, inspect exit codes and the
//! files it leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use photonstat::{read_stream, EmitterModel, SimulationConfig};
use serde_json::Value;
use tempfile::TempDir;

struct CliRun {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run_cli(args: &[&str]) -> CliRun {
    let output = Command::new(env!("CARGO_BIN_EXE_photonstat"))
        .args(args)
        .output()
        .expect("binary should spawn");
    CliRun {
        code: output.status.code().expect("no exit code"),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn write_config(dir: &Path, name: &str, config: &SimulationConfig) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, toml::to_string(config).unwrap()).unwrap();
    path
}

fn simulate_stream(dir: &Path, name: &str, config: &SimulationConfig) -> PathBuf {
    let config_path = write_config(dir, &format!("{name}.toml"), config);
    let out = dir.join(format!("{name}.pstr"));
    let run = run_cli(&[
        "simulate",
        config_path.to_str().unwrap(),
        out.to_str().unwrap(),
    ]);
    assert_eq!(run.code, 0, "simulate failed: {}", run.stderr);
    out
}

fn load_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn quick_config(seed: u64) -> SimulationConfig {
    SimulationConfig {
        duration: 2.0,
        seed,
        ..SimulationConfig::default()
    }
}

fn blinking_config(seed: u64) -> SimulationConfig {
    SimulationConfig {
        model: EmitterModel {
            lifetime_bright: 10.2e-9,
            lifetime_dim: 1.3e-9,
            lifetime_biexciton: 0.5e-9,
            quantum_yield_bright: 0.9,
            quantum_yield_dim: 0.225,
            biexciton_yield: 0.0,
            rate_charge: 1.0,
            rate_discharge: 1.5,
        },
        sync_rate: 2.5e6,
        duration: 30.0,
        mean_excitons: 0.3,
        detection_efficiency: 0.05,
        background_rate: 50.0,
        irf_fwhm: 0.0,
        microtime_resolution: 126e-12,
        channel_count: 2,
        seed,
    }
}

#[test]
fn simulate_writes_a_readable_stream_and_manifest() {
    let dir = TempDir::new().unwrap();
    let config = quick_config(11);
    let out = simulate_stream(dir.path(), "emitter", &config);

    let stream = read_stream(&out).expect("output should parse and validate");
    assert_eq!(stream.header.channel_count, config.channel_count);
    assert_eq!(stream.header.sync_rate, config.sync_rate);
    assert_eq!(stream.header.record_count as usize, stream.records.len());
    assert!(stream.records.len() > 10_000);

    let manifest = load_json(&dir.path().join("emitter.manifest.json"));
    assert_eq!(manifest["subcommand"], "simulate");
    assert_eq!(manifest["seed"], 11);
    assert!(manifest["wall_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn equal_seeds_give_byte_identical_streams() {
    let dir = TempDir::new().unwrap();
    let first = simulate_stream(dir.path(), "a", &quick_config(21));
    let second = simulate_stream(dir.path(), "b", &quick_config(21));
    let third = simulate_stream(dir.path(), "c", &quick_config(22));

    let bytes_a = fs::read(&first).unwrap();
    assert_eq!(bytes_a, fs::read(&second).unwrap());
    assert_ne!(bytes_a, fs::read(&third).unwrap());
}

#[test]
fn unknown_config_field_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "duration = 1.0\n[model]\nlifetime_brite = 1e-9\n").unwrap();
    let out = dir.path().join("bad.pstr");
    let run = run_cli(&["simulate", path.to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(
        run.stderr.contains("lifetime_brite"),
        "stderr: {}",
        run.stderr
    );
    assert!(!out.exists());
}

#[test]
fn invalid_parameter_value_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "duration = -1.0\n").unwrap();
    let out = dir.path().join("bad.pstr");
    let run = run_cli(&["simulate", path.to_str().unwrap(), out.to_str().unwrap()]);
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(run.stderr.contains("duration"), "stderr: {}", run.stderr);
}

#[test]
fn missing_stream_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let ghost = dir.path().join("ghost.pstr");
    let run = run_cli(&["g2", ghost.to_str().unwrap()]);
    assert_eq!(run.code, 3, "stderr: {}", run.stderr);
    assert!(!run.stderr.is_empty());
}

#[test]
fn pulsed_g2_reports_low_purity_for_a_clean_emitter() {
    let dir = TempDir::new().unwrap();
    let config = SimulationConfig {
        model: EmitterModel {
            quantum_yield_bright: 0.9,
            quantum_yield_dim: 0.9,
            biexciton_yield: 0.0,
            rate_charge: 0.0,
            rate_discharge: 0.0,
            ..EmitterModel::default()
        },
        duration: 20.0,
        mean_excitons: 0.3,
        detection_efficiency: 0.1,
        background_rate: 0.0,
        irf_fwhm: 0.0,
        seed: 31,
        ..SimulationConfig::default()
    };
    let stream = simulate_stream(dir.path(), "clean", &config);
    let run = run_cli(&["g2", stream.to_str().unwrap()]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);

    let report = load_json(&dir.path().join("clean.g2.json"));
    assert_eq!(report["mode"], "pulsed");
    assert!(report["g2_zero_raw"].as_f64().unwrap() < 0.02);
    assert!(report["g2_zero_corrected"].as_f64().unwrap() < 0.02);

    let csv = fs::read_to_string(dir.path().join("clean.g2.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("tau_s,counts,normalization,g2"));
    assert!(lines.count() > 100);
}

#[test]
fn long_mode_g2_is_flat_for_poisson_background() {
    let dir = TempDir::new().unwrap();
    let config = SimulationConfig {
        duration: 20.0,
        detection_efficiency: 0.0,
        background_rate: 20_000.0,
        irf_fwhm: 0.0,
        seed: 41,
        ..SimulationConfig::default()
    };
    let stream = simulate_stream(dir.path(), "poisson", &config);
    let run = run_cli(&[
        "g2",
        stream.to_str().unwrap(),
        "--mode",
        "long",
        "--tau-min",
        "1e-3",
        "--tau-max",
        "1.0",
    ]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);

    let csv = fs::read_to_string(dir.path().join("poisson.g2.csv")).unwrap();
    let mut bins = 0;
    for line in csv.lines().skip(1) {
        let g2: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert!((0.97..=1.03).contains(&g2), "g2 {g2} off unity in: {line}");
        bins += 1;
    }
    assert!(bins >= 25, "only {bins} bins");
}

#[test]
fn trace_row_counts_follow_the_bin_time() {
    let dir = TempDir::new().unwrap();
    let stream = simulate_stream(dir.path(), "emitter", &quick_config(51));
    let run = run_cli(&["trace", stream.to_str().unwrap(), "--bin-time", "0.05"]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);

    let intensity = fs::read_to_string(dir.path().join("emitter.intensity.csv")).unwrap();
    let arrival = fs::read_to_string(dir.path().join("emitter.arrival.csv")).unwrap();
    assert_eq!(intensity.lines().count(), 41);
    assert_eq!(arrival.lines().count(), 41);
    assert_eq!(intensity.lines().next(), Some("time_s,counts"));
    assert_eq!(arrival.lines().next(), Some("time_s,arrival_s"));
}

#[test]
fn trace_decays_orders_the_state_lifetimes() {
    let dir = TempDir::new().unwrap();
    let stream = simulate_stream(dir.path(), "blinky", &blinking_config(61));
    let run = run_cli(&["trace", stream.to_str().unwrap(), "--decays"]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(dir.path().join("blinky.segments.json").exists());
    assert!(dir.path().join("blinky.decay_high.csv").exists());
    assert!(dir.path().join("blinky.decay_low.csv").exists());

    let fits = load_json(&dir.path().join("blinky.decays.json"));
    let tau_of = |state: &str| -> f64 {
        let entry = fits
            .as_array()
            .unwrap()
            .iter()
            .find(|e| e["state"] == state)
            .unwrap();
        assert_eq!(entry["fit"]["converged"], true);
        entry["fit"]["parameters"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["name"] == "tau")
            .unwrap()["value"]
            .as_f64()
            .unwrap()
    };
    let tau_high = tau_of("high");
    let tau_low = tau_of("low");
    assert!(
        (tau_high - 10.2e-9).abs() / 10.2e-9 < 0.15,
        "tau_high {tau_high}"
    );
    assert!(
        (tau_low - 1.3e-9).abs() / 1.3e-9 < 0.15,
        "tau_low {tau_low}"
    );
    assert!(tau_high > 2.0 * tau_low);
}

#[test]
fn trace_segment_notices_unimodal_streams() {
    let dir = TempDir::new().unwrap();
    let config = SimulationConfig {
        model: EmitterModel {
            rate_charge: 0.0,
            rate_discharge: 0.0,
            ..EmitterModel::default()
        },
        duration: 10.0,
        seed: 71,
        ..SimulationConfig::default()
    };
    let stream = simulate_stream(dir.path(), "steady", &config);
    let run = run_cli(&["trace", stream.to_str().unwrap(), "--segment"]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(run.stdout.contains("unimodal"), "stdout: {}", run.stdout);
    assert!(!dir.path().join("steady.segments.json").exists());
    assert!(!dir.path().join("steady.decays.json").exists());
    assert!(dir.path().join("steady.intensity.csv").exists());
}

#[test]
fn flid_grid_normalization_and_determinism() {
    let dir = TempDir::new().unwrap();
    let stream = simulate_stream(dir.path(), "blinky", &blinking_config(81));
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    for prefix in [&first, &second] {
        let run = run_cli(&[
            "flid",
            stream.to_str().unwrap(),
            "--grid",
            "64",
            "--out-prefix",
            prefix.to_str().unwrap(),
        ]);
        assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    }

    let report = load_json(&dir.path().join("first.flid.json"));
    assert_eq!(report["grid"], serde_json::json!([64, 64]));
    let norm = report["normalization"].as_f64().unwrap();
    assert!((norm - 1.0).abs() < 1e-6, "normalization {norm}");

    let csv = fs::read_to_string(dir.path().join("first.flid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 64);
    assert!(csv.lines().all(|l| l.split(',').count() == 64));

    assert_eq!(
        fs::read(dir.path().join("first.flid.csv")).unwrap(),
        fs::read(dir.path().join("second.flid.csv")).unwrap()
    );
    let pgm = fs::read(dir.path().join("first.flid.pgm")).unwrap();
    let ppm = fs::read(dir.path().join("first.flid.ppm")).unwrap();
    assert!(pgm.starts_with(b"P5"));
    assert!(ppm.starts_with(b"P6"));
}

#[test]
fn fit_saturation_recovers_the_power_curve() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("sat.csv");
    let mut body = String::from("power,intensity\n");
    for p in [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0] {
        let y = 1e5 * (1.0 - (-p / 1.0f64).exp()) + 1e3 * p;
        body.push_str(&format!("{p},{y}\n"));
    }
    fs::write(&path, body).unwrap();

    let run = run_cli(&["fit", "--saturation", path.to_str().unwrap()]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = load_json(&dir.path().join("sat.fit.json"));
    assert_eq!(report["kind"], "saturation");
    let value_of = |name: &str| -> f64 {
        report["fit"]["parameters"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["name"] == name)
            .unwrap()["value"]
            .as_f64()
            .unwrap()
    };
    assert!((value_of("p_sat") - 1.0).abs() < 0.05);
    assert!((value_of("amplitude") - 1e5).abs() / 1e5 < 0.05);
}

#[test]
fn fit_spectrum_recovers_center_and_width() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("spectrum.csv");
    let sigma = 15.0 / (8.0 * 2f64.ln()).sqrt();
    let mut body = String::from("wavelength_nm,intensity\n");
    for step in 0..=130 {
        let wl = 480.0 + step as f64 * 0.5;
        let y = 50.0 + 1000.0 * (-((wl - 512.0) / sigma).powi(2) / 2.0).exp();
        body.push_str(&format!("{wl},{y}\n"));
    }
    fs::write(&path, body).unwrap();

    let run = run_cli(&["fit", "--spectrum", path.to_str().unwrap()]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = load_json(&dir.path().join("spectrum.fit.json"));
    assert_eq!(report["kind"], "spectrum");
    let cew = report["fit"]["cew"].as_f64().unwrap();
    let fwhm = report["fit"]["fwhm"].as_f64().unwrap();
    assert!((cew - 512.0).abs() < 0.5, "cew {cew}");
    assert!((fwhm - 15.0).abs() < 1.0, "fwhm {fwhm}");
}

#[test]
fn sparse_saturation_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("sparse.csv");
    fs::write(&path, "0.5,100\n1.0,180\n2.0,250\n3.0,280\n").unwrap();
    let run = run_cli(&["fit", "--saturation", path.to_str().unwrap()]);
    assert_eq!(run.code, 2, "stderr: {}", run.stderr);
    assert!(
        run.stderr.contains("too few points"),
        "stderr: {}",
        run.stderr
    );
}
