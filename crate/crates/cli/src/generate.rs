use std::path::PathBuf;

use clap::{Args, ValueEnum};
use modal_core::bench::{random_channel_specs, Range};
use modal_core::signal_model::{synthesize_window, ChannelSpec, Mode, ModeSet, NoiseSpec};
use serde::Serialize;

use crate::csv_io::write_curves;
use crate::error::{CliError, CliResult};
use crate::manifest::{create_dir, to_value, write_json, RunManifest};

pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenerateArgs {
    /// Sample rate in Hz.
    #[arg(long, default_value_t = 30.0)]
    pub fs: f64,
    /// Window length in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 5)]
    pub channels: usize,
    /// Per-channel SNR in dB.
    #[arg(long, default_value_t = 50.0)]
    pub snr: f64,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub noise: Switch,
    /// Mode as FREQ_HZ:SIGMA; repeat for several modes. Defaults to 2 Hz, σ = 0.0126.
    #[arg(long = "mode", value_name = "FREQ_HZ:SIGMA", value_parser = parse_mode)]
    pub modes: Vec<ModeArg>,
    /// Channel scale range as LOW:HIGH.
    #[arg(long, value_name = "LOW:HIGH", default_value = "0.5:2", value_parser = parse_range)]
    pub scale: Range,
    /// Phase range in radians as LOW:HIGH.
    #[arg(long, value_name = "LOW:HIGH", default_value = "-1.5707963267948966:1.5707963267948966", value_parser = parse_range)]
    pub phase: Range,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeArg {
    pub freq_hz: f64,
    pub sigma: f64,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn parse_mode(s: &str) -> Result<ModeArg, String> {
    parse_pair(s).map(|(freq_hz, sigma)| ModeArg { freq_hz, sigma })
}

fn parse_range(s: &str) -> Result<Range, String> {
    parse_pair(s).map(|(low, high)| Range { low, high })
}

#[derive(Debug, Serialize)]
struct TruthMode {
    freq_hz: f64,
    omega: f64,
    sigma: f64,
    damping_ratio: Option<f64>,
}

#[derive(Debug, Serialize)]
struct TruthChannel {
    scale: f64,
    amplitudes: Vec<f64>,
    phases: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct Truth {
    modes: Vec<TruthMode>,
    channels: Vec<TruthChannel>,
    seed: u64,
    noise_seed: u64,
    config: serde_json::Value,
}

pub fn run(args: &GenerateArgs) -> CliResult<()> {
    if !(args.duration.is_finite() && args.duration > 0.0) {
        return Err(CliError::validation("duration must be positive"));
    }
    if args.channels == 0 {
        return Err(CliError::validation("at least one channel required"));
    }
    let modes = if args.modes.is_empty() {
        vec![Mode::from_hz(2.0, 0.0126)]
    } else {
        args.modes.iter().map(|m| Mode::from_hz(m.freq_hz, m.sigma)).collect()
    };
    let modes = ModeSet::new(modes)?;
    let n = (args.duration * args.fs).round() as usize;
    let (specs, noise_seed) = random_channel_specs(args.seed, args.channels, modes.len(), args.scale, args.phase)?;
    let noise = match args.noise {
        Switch::On => NoiseSpec::SnrDb(args.snr),
        Switch::Off => NoiseSpec::Off,
    };
    let syn = synthesize_window(&modes, &specs, args.fs, n, noise, noise_seed)?;

    create_dir(&args.out_dir)?;
    let times: Vec<f64> = (0..n).map(|k| k as f64 / args.fs).collect();
    write_curves(&args.out_dir.join(MEASUREMENTS_FILE), &times, &syn.window.samples)?;
    let config = to_value(args);
    let truth = Truth {
        modes: modes
            .modes()
            .iter()
            .map(|m| TruthMode {
                freq_hz: m.freq_hz(),
                omega: m.omega,
                sigma: m.sigma,
                damping_ratio: m.damping_ratio().ok(),
            })
            .collect(),
        channels: specs.iter().map(truth_channel).collect(),
        seed: args.seed,
        noise_seed,
        config: config.clone(),
    };
    write_json(&args.out_dir.join(TRUTH_FILE), &truth)?;
    RunManifest::new("generate", config, args.seed, &[MEASUREMENTS_FILE, TRUTH_FILE]).write(&args.out_dir)?;
    log::info!("wrote {} samples × {} channels to {}", n, args.channels, args.out_dir.display());
    Ok(())
}

fn truth_channel(spec: &ChannelSpec) -> TruthChannel {
    TruthChannel {
        scale: spec.scale,
        amplitudes: spec.components.iter().map(|p| p.amplitude).collect(),
        phases: spec.components.iter().map(|p| p.phase).collect(),
    }
}
