//! Command-line entry point.
//!
//! One binary with five subcommands (`simulate`, `g2`, `trace`, `flid`,
//! `fit`) that compose the library into file-based workflows. Every run
//! writes its primary artifacts plus one JSON manifest recording inputs,
//! parameters, outputs, and wall-clock time.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 I/O error, 4 analysis
//! failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::correlate::{self, CorrectionMode, CorrelateError};
use crate::flid::{build_flid, FlidError};
use crate::sim::{simulate, SimError, SimulationConfig};
use crate::stream::{read_stream, write_stream, PhotonStream, StreamError};
use crate::trace::{
    bin_intensity, decay_histogram, fit_decay, fit_saturation, fit_spectrum, mean_arrival_trace,
    segment_states, DecayModel, DecaySelection, StateLabel, TraceError,
};

/// Photon-stream statistics for pulsed single-photon emitters.
#[derive(Parser)]
#[command(name = "photonstat", version, about)]
pub struct Cli {
    /// Cap on worker threads; PHOTONSTAT_THREADS is the fallback.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a blinking-emitter photon stream into a PSTR file.
    Simulate(SimulateArgs),
    /// Correlate a stream and export the g2 histogram and purity.
    G2(G2Args),
    /// Bin a stream into traces; optionally segment states and fit decays.
    Trace(TraceArgs),
    /// Build a fluorescence lifetime-intensity distribution map.
    Flid(FlidArgs),
    /// Fit a saturation or spectrum curve from a two-column CSV.
    Fit(FitArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML file with the simulation parameters.
    config: PathBuf,
    /// Output PSTR path.
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Pulsed,
    Long,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum CorrectionArg {
    None,
    Plateau,
    Amplitude,
}

impl From<CorrectionArg> for CorrectionMode {
    fn from(value: CorrectionArg) -> Self {
        match value {
            CorrectionArg::None => CorrectionMode::None,
            CorrectionArg::Plateau => CorrectionMode::Plateau,
            CorrectionArg::Amplitude => CorrectionMode::Amplitude,
        }
    }
}

#[derive(Args)]
struct G2Args {
    /// Input PSTR stream.
    stream: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Pulsed)]
    mode: ModeArg,
    /// First correlator input channel.
    #[arg(long, default_value_t = 0)]
    channel_a: u8,
    /// Second correlator input channel.
    #[arg(long, default_value_t = 1)]
    channel_b: u8,
    /// Histogram bin width in seconds (pulsed mode).
    #[arg(long, default_value_t = 1e-9)]
    bin_width: f64,
    /// Half-span of the delay axis in sync periods (pulsed mode).
    #[arg(long, default_value_t = 10.0)]
    span_periods: f64,
    /// Background correction applied to the purity (pulsed mode).
    #[arg(long, value_enum, default_value_t = CorrectionArg::Plateau)]
    correction: CorrectionArg,
    /// Shortest delay in seconds (long mode).
    #[arg(long, default_value_t = 10e-9)]
    tau_min: f64,
    /// Longest delay in seconds (long mode); defaults to duration / 10.
    #[arg(long)]
    tau_max: Option<f64>,
    /// Logarithmic bins per decade of delay (long mode).
    #[arg(long, default_value_t = 10)]
    bins_per_decade: usize,
    /// Output prefix; defaults to the input path minus its extension.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Input PSTR stream.
    stream: PathBuf,
    /// Trace bin time in seconds.
    #[arg(long, default_value_t = 10e-3)]
    bin_time: f64,
    /// Segment bright and dim states from the count histogram.
    #[arg(long)]
    segment: bool,
    /// Fit state-resolved decay curves; implies --segment.
    #[arg(long)]
    decays: bool,
    /// Output prefix; defaults to the input path minus its extension.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
struct FlidArgs {
    /// Input PSTR stream.
    stream: PathBuf,
    /// Trace bin time in seconds.
    #[arg(long, default_value_t = 10e-3)]
    bin_time: f64,
    /// Cells per axis of the square density grid.
    #[arg(long, default_value_t = 256)]
    grid: usize,
    /// Kernel bandwidths "intensity,lifetime" overriding Silverman's rule.
    #[arg(long, value_parser = parse_pair)]
    bandwidth: Option<(f64, f64)>,
    /// Output prefix; defaults to the input path minus its extension.
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FitArgs {
    /// Saturation points CSV (power, intensity).
    #[arg(long)]
    saturation: Option<PathBuf>,
    /// Emission spectrum CSV (wavelength, intensity).
    #[arg(long)]
    spectrum: Option<PathBuf>,
    /// Output JSON path; defaults to the input with a .fit.json suffix.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pair(text: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err("expected two comma-separated numbers".to_string());
    }
    let a = parts[0].trim().parse().map_err(|e| format!("{e}"))?;
    let b = parts[1].trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

/// Classified failure carrying the process exit code.
enum CliError {
    Config(String),
    Io(String),
    Analysis(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Analysis(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Analysis(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CorrelateError> for CliError {
    fn from(e: CorrelateError) -> Self {
        match e {
            CorrelateError::Io(inner) => CliError::Io(inner.to_string()),
            CorrelateError::UnknownChannel { .. }
            | CorrelateError::InvalidBin { .. }
            | CorrelateError::SpanTooShort { .. }
            | CorrelateError::DurationTooShort { .. }
            | CorrelateError::ModeMismatch { .. } => CliError::Config(e.to_string()),
            CorrelateError::InsufficientCounts
            | CorrelateError::NoPlateau
            | CorrelateError::InsufficientRange { .. } => CliError::Analysis(e.to_string()),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(inner) => CliError::Io(inner.to_string()),
            TraceError::TooFewBins { .. }
            | TraceError::InsufficientPoints { .. }
            | TraceError::MismatchedSeries { .. } => CliError::Config(e.to_string()),
            TraceError::Unimodal
            | TraceError::EmptySelection
            | TraceError::InsufficientCounts { .. }
            | TraceError::NoPeak
            | TraceError::FitDiverged => CliError::Analysis(e.to_string()),
        }
    }
}

impl From<FlidError> for CliError {
    fn from(e: FlidError) -> Self {
        match e {
            FlidError::Io(inner) => CliError::Io(inner.to_string()),
            FlidError::InvalidParameter { .. } => CliError::Config(e.to_string()),
            FlidError::MismatchedTraces { .. } | FlidError::TooFewSamples { .. } => {
                CliError::Analysis(e.to_string())
            }
        }
    }
}

/// Run metadata written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    tool_version: String,
    inputs: Vec<String>,
    parameters: serde_json::Value,
    seed: Option<u64>,
    outputs: Vec<String>,
    wall_seconds: f64,
}

/// Parses arguments from the process environment and runs one command.
pub fn run() -> i32 {
    let cli = Cli::parse();
    configure_threads(cli.threads);
    let started = Instant::now();
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args, started),
        Command::G2(args) => cmd_g2(args, started),
        Command::Trace(args) => cmd_trace(args, started),
        Command::Flid(args) => cmd_flid(args, started),
        Command::Fit(args) => cmd_fit(args, started),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("PHOTONSTAT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{}", prefix.display(), suffix))
}

fn out_prefix(flag: &Option<PathBuf>, input: &Path) -> PathBuf {
    flag.clone().unwrap_or_else(|| input.with_extension(""))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    writeln!(out)?;
    Ok(())
}

fn write_manifest(
    path: &Path,
    subcommand: &str,
    inputs: &[&Path],
    parameters: serde_json::Value,
    seed: Option<u64>,
    outputs: &[PathBuf],
    started: Instant,
) -> Result<(), CliError> {
    let manifest = RunManifest {
        subcommand: subcommand.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        parameters,
        seed,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(path, &manifest)
}

fn load_stream(path: &Path) -> Result<PhotonStream, CliError> {
    Ok(read_stream(path)?)
}

fn cmd_simulate(args: &SimulateArgs, started: Instant) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Io(format!("{}: {e}", args.config.display())))?;
    let config: SimulationConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config: {e}")))?;
    let stream = simulate(&config)?;
    write_stream(&stream, &args.out)?;
    println!(
        "wrote {} ({} records)",
        args.out.display(),
        stream.records.len()
    );

    let params = serde_json::to_value(&config)
        .map_err(|e| CliError::Config(format!("config serialization: {e}")))?;
    write_manifest(
        &args.out.with_extension("manifest.json"),
        "simulate",
        &[&args.config],
        params,
        Some(config.seed),
        std::slice::from_ref(&args.out),
        started,
    )
}

fn cmd_g2(args: &G2Args, started: Instant) -> Result<(), CliError> {
    let stream = load_stream(&args.stream)?;
    let prefix = out_prefix(&args.out_prefix, &args.stream);
    let csv_path = suffixed(&prefix, ".g2.csv");
    let json_path = suffixed(&prefix, ".g2.json");

    let summary = match args.mode {
        ModeArg::Pulsed => {
            let span = args.span_periods * stream.header.sync_period();
            let hist = correlate::correlate_pulsed(
                &stream,
                args.channel_a,
                args.channel_b,
                args.bin_width,
                span,
            )?;
            let purity = correlate::subtract_background(&hist, args.correction.into())?;
            hist.write_csv(&csv_path)?;
            json!({
                "mode": "pulsed",
                "g2_zero_raw": purity.g2_raw,
                "g2_zero_corrected": purity.g2_corrected,
                "purity": purity,
                "bins": hist.tau.len(),
            })
        }
        ModeArg::Long => {
            let tau_max = args.tau_max.unwrap_or(stream.header.duration / 10.0);
            let hist = correlate::correlate_long_delay(
                &stream,
                args.channel_a,
                args.channel_b,
                args.tau_min,
                tau_max,
                args.bins_per_decade,
            )?;
            hist.write_csv(&csv_path)?;
            // The flicker fit needs delays beyond one period; report it
            // when available rather than failing the run.
            let flicker = correlate::fit_flicker(&hist).ok();
            json!({
                "mode": "long_delay",
                "bins": hist.tau.len(),
                "flicker": flicker,
            })
        }
    };
    write_json(&json_path, &summary)?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());

    let params = json!({
        "mode": match args.mode { ModeArg::Pulsed => "pulsed", ModeArg::Long => "long" },
        "channel_a": args.channel_a,
        "channel_b": args.channel_b,
        "bin_width": args.bin_width,
        "span_periods": args.span_periods,
        "tau_min": args.tau_min,
        "tau_max": args.tau_max,
        "bins_per_decade": args.bins_per_decade,
    });
    write_manifest(
        &suffixed(&prefix, ".g2.manifest.json"),
        "g2",
        &[&args.stream],
        params,
        None,
        &[csv_path, json_path],
        started,
    )
}

fn cmd_trace(args: &TraceArgs, started: Instant) -> Result<(), CliError> {
    if !(args.bin_time.is_finite() && args.bin_time > 0.0) {
        return Err(CliError::Config("bin-time must be positive".to_string()));
    }
    let stream = load_stream(&args.stream)?;
    let prefix = out_prefix(&args.out_prefix, &args.stream);
    let mut outputs = Vec::new();

    let intensity = bin_intensity(&stream, args.bin_time);
    let arrival = mean_arrival_trace(&stream, args.bin_time);
    let intensity_path = suffixed(&prefix, ".intensity.csv");
    let arrival_path = suffixed(&prefix, ".arrival.csv");
    intensity.write_csv(&intensity_path)?;
    arrival.write_csv(&arrival_path)?;
    println!("wrote {}", intensity_path.display());
    println!("wrote {}", arrival_path.display());
    outputs.push(intensity_path);
    outputs.push(arrival_path);

    if args.segment || args.decays {
        match segment_states(&intensity) {
            Ok(seg) => {
                let seg_path = suffixed(&prefix, ".segments.json");
                write_json(
                    &seg_path,
                    &json!({
                        "bin_time": seg.bin_time,
                        "threshold_low": seg.threshold_low,
                        "threshold_high": seg.threshold_high,
                        "low_mean": seg.low_mean,
                        "high_mean": seg.high_mean,
                        "low_sigma": seg.low_sigma,
                        "high_sigma": seg.high_sigma,
                        "high_fraction": seg.high_fraction(),
                        "bins": {
                            "low": seg.count(StateLabel::Low),
                            "high": seg.count(StateLabel::High),
                            "excluded": seg.count(StateLabel::Excluded),
                        },
                    }),
                )?;
                println!("wrote {}", seg_path.display());
                outputs.push(seg_path);

                if args.decays {
                    let mut fits = Vec::new();
                    for (label, name) in [(StateLabel::High, "high"), (StateLabel::Low, "low")] {
                        let hist = decay_histogram(&stream, DecaySelection::Labeled(&seg, label))?;
                        let path = suffixed(&prefix, &format!(".decay_{name}.csv"));
                        hist.write_csv(&path)?;
                        println!("wrote {}", path.display());
                        outputs.push(path);
                        let fit = fit_decay(&hist, DecayModel::Mono, true)?;
                        fits.push(json!({ "state": name, "fit": fit }));
                    }
                    let fits_path = suffixed(&prefix, ".decays.json");
                    write_json(&fits_path, &fits)?;
                    println!("wrote {}", fits_path.display());
                    outputs.push(fits_path);
                }
            }
            Err(TraceError::Unimodal) => {
                println!(
                    "notice: intensity histogram is unimodal; skipping state segmentation \
                     and decay fits"
                );
            }
            Err(e) => return Err(e.into()),
        }
    }

    let params = json!({
        "bin_time": args.bin_time,
        "segment": args.segment,
        "decays": args.decays,
    });
    write_manifest(
        &suffixed(&prefix, ".trace.manifest.json"),
        "trace",
        &[&args.stream],
        params,
        None,
        &outputs,
        started,
    )
}

fn cmd_flid(args: &FlidArgs, started: Instant) -> Result<(), CliError> {
    if !(args.bin_time.is_finite() && args.bin_time > 0.0) {
        return Err(CliError::Config("bin-time must be positive".to_string()));
    }
    let stream = load_stream(&args.stream)?;
    let prefix = out_prefix(&args.out_prefix, &args.stream);

    let intensity = bin_intensity(&stream, args.bin_time);
    let arrival = mean_arrival_trace(&stream, args.bin_time);
    let map = build_flid(&intensity, &arrival, (args.grid, args.grid), args.bandwidth)?;

    let csv_path = suffixed(&prefix, ".flid.csv");
    let pgm_path = suffixed(&prefix, ".flid.pgm");
    let ppm_path = suffixed(&prefix, ".flid.ppm");
    let json_path = suffixed(&prefix, ".flid.json");
    map.write_csv(&csv_path)?;
    map.write_pgm(&pgm_path)?;
    map.write_ppm(&ppm_path)?;
    write_json(
        &json_path,
        &json!({
            "grid": [map.intensity_axis.len(), map.lifetime_axis.len()],
            "intensity_range": [0.0, map.intensity_axis.last().unwrap()
                + 0.5 * (map.intensity_axis[1] - map.intensity_axis[0])],
            "lifetime_range": [0.0, map.lifetime_axis.last().unwrap()
                + 0.5 * (map.lifetime_axis[1] - map.lifetime_axis[0])],
            "bandwidths": [map.bandwidths.0, map.bandwidths.1],
            "sample_count": map.sample_count,
            "normalization": map.quadrature(),
            "modes": map.modes(),
        }),
    )?;
    for p in [&csv_path, &pgm_path, &ppm_path, &json_path] {
        println!("wrote {}", p.display());
    }

    let params = json!({
        "bin_time": args.bin_time,
        "grid": args.grid,
        "bandwidth": args.bandwidth.map(|(a, b)| vec![a, b]),
    });
    write_manifest(
        &suffixed(&prefix, ".flid.manifest.json"),
        "flid",
        &[&args.stream],
        params,
        None,
        &[csv_path, pgm_path, ppm_path, json_path],
        started,
    )
}

fn read_xy_csv(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut points = Vec::new();
    for line in text.lines() {
        let mut cols = line.split(',');
        let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
            continue;
        };
        // Header rows and comments simply fail to parse and are skipped.
        if let (Ok(x), Ok(y)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            points.push((x, y));
        }
    }
    Ok(points)
}

fn cmd_fit(args: &FitArgs, started: Instant) -> Result<(), CliError> {
    let (input, kind) = match (&args.saturation, &args.spectrum) {
        (Some(p), None) => (p.clone(), "saturation"),
        (None, Some(p)) => (p.clone(), "spectrum"),
        _ => unreachable!("clap enforces exactly one input"),
    };
    let points = read_xy_csv(&input)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| suffixed(&input.with_extension(""), ".fit.json"));

    let report = match kind {
        "saturation" => {
            let fit = fit_saturation(&points)?;
            json!({ "kind": "saturation", "points": points.len(), "fit": fit })
        }
        _ => {
            let (wl, inten): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
            let fit = fit_spectrum(&wl, &inten)?;
            json!({ "kind": "spectrum", "points": points.len(), "fit": fit })
        }
    };
    write_json(&out, &report)?;
    println!("wrote {}", out.display());

    write_manifest(
        &out.with_extension("manifest.json"),
        "fit",
        &[&input],
        json!({ "kind": kind }),
        None,
        std::slice::from_ref(&out),
        started,
    )
}
