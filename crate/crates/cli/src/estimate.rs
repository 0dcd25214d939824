use std::path::PathBuf;

use clap::{Args, ValueEnum};
use modal_core::baselines::{admm_prony, prony_fit_with, residue_curve, residue_fit, AdmmSettings};
use modal_core::bench::{BENCH_DISTRIBUTED, BENCH_PRONY_ORDER};
use modal_core::cekf::{cekf_run, EstimateTrace, Tuning};
use modal_core::distributed::{
    consensus_spread, dekf_run, dekfr_run, mean_modes, reduce_states, ConsensusSpread, DiffusionWeights, ReducedDiffusionWeights,
    Topology, TopologySpec,
};
use modal_core::init_detect::{
    fft_mode_scan, initial_full_state, preprocess, ScanOptions, SpectralPeak, DEFAULT_MAX_MODES, DEFAULT_PROMINENCE,
};
use modal_core::signal_model::{MeasurementWindow, Mode};
use serde::Serialize;

use crate::csv_io::{read_window, write_curves};
use crate::error::{CliError, CliResult};
use crate::manifest::{create_dir, to_value, write_json, RunManifest};

pub const REPORT_FILE: &str = "report.json";
pub const FITTED_FILE: &str = "fitted.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cekf,
    Dekf,
    Dekfr,
    Prony,
    Admm,
}

impl Method {
    fn is_kalman(self) -> bool {
        matches!(self, Self::Cekf | Self::Dekf | Self::Dekfr)
    }

    fn is_distributed(self) -> bool {
        matches!(self, Self::Dekf | Self::Dekfr)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    /// Measurement CSV with header t,ch0,ch1,…
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// ring:M, complete:M or an edge-list file; required for dekf and dekfr.
    #[arg(long)]
    pub topology: Option<String>,
    /// Number of modes. Without it the count comes from the spectrum.
    #[arg(long, conflicts_with = "auto_detect")]
    pub modes: Option<usize>,
    #[arg(long)]
    pub auto_detect: bool,
    /// Upper bound on detected modes.
    #[arg(long, default_value_t = DEFAULT_MAX_MODES)]
    pub max_modes: usize,
    /// Peak threshold as a multiple of the median spectrum.
    #[arg(long, default_value_t = DEFAULT_PROMINENCE)]
    pub threshold: f64,
    /// Process noise on each ω and σ entry.
    #[arg(long)]
    pub q_mode: Option<f64>,
    /// Measurement noise variance per channel (on normalized data).
    #[arg(long)]
    pub r_meas: Option<f64>,
    /// Initial covariance applied to every state entry.
    #[arg(long)]
    pub p0: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Prediction order for prony and admm; defaults to the benchmark order
    /// (at least 2L), or 2L when the window is too short for it.
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl EstimateArgs {
    fn tuning(&self) -> Tuning {
        let mut t = if self.method.is_distributed() {
            BENCH_DISTRIBUTED
        } else {
            Tuning::default()
        };
        if let Some(q) = self.q_mode {
            t.q_mode = q;
        }
        if let Some(r) = self.r_meas {
            t.r = r;
        }
        if let Some(p) = self.p0 {
            t.p0_amplitude = p;
            t.p0_omega = p;
            t.p0_sigma = p;
        }
        t
    }

    fn prony_order(&self, samples: usize, modes: usize) -> usize {
        self.order.unwrap_or_else(|| {
            let wide = BENCH_PRONY_ORDER.max(2 * modes);
            if samples > 2 * wide + 2 {
                wide
            } else {
                2 * modes
            }
        })
    }

    fn admm(&self, samples: usize, modes: usize) -> AdmmSettings {
        let d = AdmmSettings::default();
        AdmmSettings {
            rho: self.rho.unwrap_or(d.rho),
            tol: self.tol.unwrap_or(d.tol),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            order: Some(self.prony_order(samples, modes)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub freq_hz: f64,
    pub omega: f64,
    pub sigma: f64,
    pub damping_ratio: Option<f64>,
    /// Per-channel amplitude at the first sample, in input units.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub amplitudes: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<f64>,
}

impl ModeReport {
    fn bare(mode: &Mode) -> Self {
        Self {
            freq_hz: mode.freq_hz(),
            omega: mode.omega,
            sigma: mode.sigma,
            damping_ratio: mode.damping_ratio().ok(),
            amplitudes: Vec::new(),
            phases: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeReport {
    pub node: usize,
    pub modes: Vec<ModeReport>,
}

#[derive(Debug, Clone, Serialize)]
struct Detection {
    auto: bool,
    peaks: Vec<SpectralPeak>,
}

#[derive(Debug, Clone, Serialize)]
struct Fit {
    file: String,
    /// Root-mean-square residual per channel, in input units.
    rmse: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct Report {
    method: Method,
    input: String,
    samples: usize,
    channels: usize,
    fs: f64,
    t0: f64,
    modes: Vec<ModeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_node: Option<Vec<NodeReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spread: Option<ConsensusSpread>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    detection: Option<Detection>,
    fit: Fit,
    seed: u64,
    config: serde_json::Value,
}

struct Estimate {
    modes: Vec<Mode>,
    traces: Option<Vec<EstimateTrace>>,
    iterations: Option<usize>,
}

pub fn run(args: &EstimateArgs) -> CliResult<()> {
    let result = execute(args);
    if let Err(CliError::Divergence { diagnostic, .. }) = &result {
        create_dir(&args.out_dir)?;
        write_json(&args.out_dir.join(DIAGNOSTIC_FILE), diagnostic)?;
    }
    result
}

fn execute(args: &EstimateArgs) -> CliResult<()> {
    let topology = match (&args.topology, args.method.is_distributed()) {
        (Some(spec), true) => Some(spec.parse::<TopologySpec>()?.build(|p| std::fs::read_to_string(p))?),
        (None, true) => return Err(CliError::validation("--topology is required for dekf and dekfr")),
        (Some(_), false) => {
            log::warn!("--topology ignored for {:?}", args.method);
            None
        }
        (None, false) => None,
    };
    if args.modes == Some(0) {
        return Err(CliError::validation("--modes must be at least 1"));
    }

    let (raw, times) = read_window(&args.input)?;
    let (window, normalization) = preprocess(&raw)?;
    if let Some(t) = &topology {
        if t.node_count() != window.channels() {
            return Err(CliError::validation(format!(
                "topology has {} nodes but the input has {} channels",
                t.node_count(),
                window.channels()
            )));
        }
    }

    let detection = detect(args, &window)?;
    let l = args.modes.unwrap_or_else(|| detection.as_ref().map_or(0, |d| d.peaks.len()));
    let estimate = estimate(args, &window, topology.as_ref(), detection.as_ref(), l)?;

    let residues = residue_fit(&window, &estimate.modes)?;
    let curves = normalization.denormalize(&residue_curve(&estimate.modes, &residues, window.fs, window.len()));
    let rmse = (0..raw.channels())
        .map(|c| ((curves.row(c) - raw.samples.row(c)).norm_squared() / raw.len() as f64).sqrt())
        .collect();
    let modes = estimate
        .modes
        .iter()
        .enumerate()
        .map(|(l, mode)| ModeReport {
            amplitudes: residues
                .iter()
                .enumerate()
                .map(|(c, r)| normalization.denormalize_amplitude(c, r[l].amplitude))
                .collect(),
            phases: residues.iter().map(|r| r[l].phase).collect(),
            ..ModeReport::bare(mode)
        })
        .collect();
    let (per_node, spread) = match &estimate.traces {
        Some(traces) => (
            Some(
                traces
                    .iter()
                    .enumerate()
                    .map(|(node, t)| NodeReport {
                        node,
                        modes: sorted(t.modes.clone()).iter().map(ModeReport::bare).collect(),
                    })
                    .collect(),
            ),
            Some(consensus_spread(traces)?),
        ),
        None => (None, None),
    };

    create_dir(&args.out_dir)?;
    write_curves(&args.out_dir.join(FITTED_FILE), &times, &curves)?;
    let config = resolved_config(args, raw.len(), l);
    let report = Report {
        method: args.method,
        input: args.input.display().to_string(),
        samples: raw.len(),
        channels: raw.channels(),
        fs: raw.fs,
        t0: raw.t0,
        modes,
        per_node,
        spread,
        iterations: estimate.iterations,
        detection,
        fit: Fit {
            file: FITTED_FILE.to_string(),
            rmse,
        },
        seed: args.seed,
        config: config.clone(),
    };
    write_json(&args.out_dir.join(REPORT_FILE), &report)?;
    RunManifest::new("estimate", config, args.seed, &[REPORT_FILE, FITTED_FILE]).write(&args.out_dir)?;
    for m in &report.modes {
        log::info!("mode {:.4} Hz, sigma {:.4}", m.freq_hz, m.sigma);
    }
    Ok(())
}

/// Spectral scan, needed for Kalman initialization and for counting modes.
fn detect(args: &EstimateArgs, window: &MeasurementWindow) -> CliResult<Option<Detection>> {
    let auto = args.modes.is_none();
    if !auto && !args.method.is_kalman() {
        return Ok(None);
    }
    let options = ScanOptions {
        max_modes: args.modes.unwrap_or(args.max_modes),
        prominence_threshold: args.threshold,
        channel: None,
    };
    let peaks = fft_mode_scan(window, &options)?;
    if peaks.is_empty() {
        return Err(CliError::validation("no oscillation found in the spectrum"));
    }
    if let Some(l) = args.modes {
        if peaks.len() < l {
            return Err(CliError::validation(format!(
                "spectrum shows {} peak(s) but {l} modes were requested",
                peaks.len()
            )));
        }
    }
    Ok(Some(Detection { auto, peaks }))
}

fn estimate(
    args: &EstimateArgs,
    window: &MeasurementWindow,
    topology: Option<&Topology>,
    detection: Option<&Detection>,
    l: usize,
) -> CliResult<Estimate> {
    let m = window.channels();
    let kalman_init = || {
        let peaks = &detection.expect("Kalman methods always scan").peaks;
        initial_full_state(peaks, window)
    };
    let out = match args.method {
        Method::Prony => Estimate {
            modes: prony_fit_with(window, l, Some(args.prony_order(window.len(), l)))?,
            traces: None,
            iterations: None,
        },
        Method::Admm => {
            let outcome = admm_prony(window, l, &args.admm(window.len(), l))?;
            Estimate {
                modes: outcome.modes,
                traces: None,
                iterations: Some(outcome.iterations),
            }
        }
        Method::Cekf => {
            let trace = cekf_run(window, &kalman_init()?, &args.tuning().config(m, l))?;
            Estimate {
                modes: trace.modes,
                traces: None,
                iterations: None,
            }
        }
        Method::Dekf | Method::Dekfr => {
            let topology = topology.expect("checked before");
            let init = kalman_init()?;
            let inits = vec![init; m];
            let configs = vec![args.tuning().config(m, l); m];
            let weights = DiffusionWeights::uniform(topology);
            let traces = if args.method == Method::Dekf {
                dekf_run(window, topology, &weights, &inits, &configs)?
            } else {
                let reduced = reduce_states(topology, &inits)?;
                let rw = ReducedDiffusionWeights::uniform(topology);
                dekfr_run(window, topology, &weights, &rw, &reduced, &configs)?
            };
            Estimate {
                modes: mean_modes(&traces),
                traces: Some(traces),
                iterations: None,
            }
        }
    };
    Ok(Estimate {
        modes: sorted(out.modes),
        ..out
    })
}

fn sorted(mut modes: Vec<Mode>) -> Vec<Mode> {
    modes.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    modes
}

fn resolved_config(args: &EstimateArgs, samples: usize, modes: usize) -> serde_json::Value {
    let mut config = to_value(args);
    config["modes"] = modes.into();
    match args.method {
        Method::Cekf | Method::Dekf | Method::Dekfr => config["tuning"] = to_value(&args.tuning()),
        Method::Prony => config["order"] = args.prony_order(samples, modes).into(),
        Method::Admm => config["admm"] = to_value(&args.admm(samples, modes)),
    }
    config
}
