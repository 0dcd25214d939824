//! Monte Carlo comparison of the estimators on a single damped sinusoid
//! observed by a ring of PMUs.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{admm_prony, prony_fit_with, AdmmSettings};
use crate::cekf::{cekf_run, Tuning, DEFAULT_P0, DEFAULT_Q_MODE, DEFAULT_R};
use crate::distributed::{
    dekf_run, dekfr_run, mean_modes, reduce_states, DiffusionWeights, ReducedDiffusionWeights,
    Topology,
};
use crate::error::{validation, Error, Result};
use crate::signal_model::{
    synthesize_window, ChannelSpec, Mode, ModeComponent, ModeSet, NoiseSpec, Polar, SystemState,
};

/// Environment variable that sets the worker count when none is given explicitly.
pub const THREADS_ENV: &str = "MODAL_DEKF_THREADS";
/// Relative frequency error beyond which an estimate counts as unmatched.
pub const MATCH_LIMIT: f64 = 0.5;
/// Overmodeled prediction order used by the Prony-family baselines.
pub const BENCH_PRONY_ORDER: usize = 16;
/// Centralized filter tuning for initial errors of up to 70%: the library
/// defaults with a wide frequency prior, so the first samples can pull ω
/// across the whole perturbation range.
pub const BENCH_CEKF: Tuning = Tuning {
    r: DEFAULT_R,
    q_mode: DEFAULT_Q_MODE,
    p0_amplitude: DEFAULT_P0,
    p0_omega: 100.0,
    p0_sigma: DEFAULT_P0,
};
/// Diffusion filter tuning: lower R and higher Q, same priors.
pub const BENCH_DISTRIBUTED: Tuning = Tuning {
    r: 1e-4,
    q_mode: 1e-8,
    ..BENCH_CEKF
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Prony,
    Admm,
    Cekf,
    Dekf,
    Dekfr,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [Self::Prony, Self::Admm, Self::Cekf, Self::Dekf, Self::Dekfr];

    pub fn label(self) -> &'static str {
        match self {
            Self::Prony => "PRONY",
            Self::Admm => "ADMM",
            Self::Cekf => "CEKF",
            Self::Dekf => "DEKF",
            Self::Dekfr => "DEKF-R",
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prony" => Ok(Self::Prony),
            "admm" => Ok(Self::Admm),
            "cekf" | "ekf" => Ok(Self::Cekf),
            "dekf" => Ok(Self::Dekf),
            "dekfr" | "dekf-r" => Ok(Self::Dekfr),
            other => Err(validation(format!("unknown estimator '{other}'"))),
        }
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Closed interval for uniform draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

impl Range {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low <= self.high) {
            return Err(validation(format!("{what}: invalid range [{}, {}]", self.low, self.high)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(Uniform::new_inclusive(self.low, self.high))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub snr_db: Vec<f64>,
    /// When false the SNR list only labels the columns and no noise is added.
    pub noise: bool,
    pub runs: usize,
    pub estimators: Vec<Estimator>,
    pub omega: f64,
    pub sigma: f64,
    pub fs: f64,
    pub duration_s: f64,
    pub channels: usize,
    pub seed: u64,
    pub scale: Range,
    pub phase: Range,
    /// Multiplicative perturbation applied independently to every initial state entry.
    pub init: Range,
    /// Prediction order of the Prony baseline; `None` means `2L`.
    pub prony_order: Option<usize>,
    pub cekf: Tuning,
    pub distributed: Tuning,
    pub admm: AdmmSettings,
    /// Worker threads; `None` defers to the environment, then to rayon's default.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            snr_db: vec![50.0, 40.0, 30.0, 20.0],
            noise: true,
            runs: 1000,
            estimators: Estimator::ALL.to_vec(),
            omega: 4.0 * PI,
            sigma: 0.0126,
            fs: 30.0,
            duration_s: 10.0,
            channels: 5,
            seed: 0,
            scale: Range::new(0.5, 2.0),
            phase: Range::new(-FRAC_PI_2, FRAC_PI_2),
            init: Range::new(0.3, 1.3),
            prony_order: Some(BENCH_PRONY_ORDER),
            cekf: BENCH_CEKF,
            distributed: BENCH_DISTRIBUTED,
            admm: AdmmSettings {
                order: Some(BENCH_PRONY_ORDER),
                ..AdmmSettings::default()
            },
            threads: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(validation("runs must be at least 1"));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(validation("SNR levels must be finite"));
        }
        if self.channels < 2 {
            return Err(validation("the ring topology needs at least two channels"));
        }
        if !(self.fs > 0.0 && self.fs.is_finite() && self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(validation("sample rate and duration must be positive"));
        }
        if !(self.omega > 0.0 && self.omega.is_finite() && self.sigma.is_finite()) {
            return Err(validation("truth mode must have positive finite frequency"));
        }
        if self.threads == Some(0) {
            return Err(validation("threads must be at least 1"));
        }
        self.scale.validate("scale")?;
        self.phase.validate("phase")?;
        self.init.validate("init")?;
        if self.scale.low <= 0.0 {
            return Err(validation("channel scales must be positive"));
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeError {
    pub freq_err_pct: f64,
    pub damp_err_pct: f64,
}

/// Greedy nearest-frequency matching of estimates to truth modes. `None`
/// when some truth mode has no estimate within [`MATCH_LIMIT`].
pub fn error_metrics(estimated: &[Mode], truth: &[Mode]) -> Option<Vec<ModeError>> {
    if estimated.len() < truth.len() {
        return None;
    }
    let mut used = vec![false; estimated.len()];
    let mut out = Vec::with_capacity(truth.len());
    for t in truth {
        let (best, rel) = estimated
            .iter()
            .enumerate()
            .filter(|(i, e)| !used[*i] && e.omega.is_finite() && e.sigma.is_finite())
            .map(|(i, e)| (i, ((e.omega - t.omega) / t.omega).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        if rel > MATCH_LIMIT {
            return None;
        }
        used[best] = true;
        let e = estimated[best];
        let damp = if t.sigma == 0.0 {
            if e.sigma == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            100.0 * ((e.sigma - t.sigma) / t.sigma).abs()
        };
        out.push(ModeError {
            freq_err_pct: 100.0 * rel,
            damp_err_pct: damp,
        });
    }
    Some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: Option<f64>,
    /// Sample standard deviation; needs two values.
    pub std: Option<f64>,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: None, std: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Self { mean: Some(mean), std }
    }
}

/// One estimator at one SNR level. Raw errors are `None` for diverged runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub estimator: Estimator,
    pub snr_db: f64,
    pub freq: Stats,
    pub damping: Stats,
    pub divergences: usize,
    pub freq_errors: Vec<Option<f64>>,
    pub damp_errors: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<Cell>,
}

impl BenchReport {
    pub fn cell(&self, estimator: Estimator, snr_db: f64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.estimator == estimator && c.snr_db == snr_db)
    }
}

/// Everything one Monte Carlo run needs, drawn from its own substream.
struct Scenario {
    window: crate::signal_model::MeasurementWindow,
    truth: SystemState,
    /// Independently perturbed initial states, index 0 for the centralized filter
    /// and `1..=M` for the distributed nodes.
    inits: Vec<SystemState>,
}

fn perturb(truth: &SystemState, range: Range, rng: &mut ChaCha8Rng) -> SystemState {
    let amplitudes = truth
        .amplitudes
        .iter()
        .map(|ch| {
            crate::signal_model::ChannelAmplitude(
                ch.0.iter()
                    .map(|c| ModeComponent {
                        xc: c.xc * range.sample(rng),
                        xs: c.xs * range.sample(rng),
                    })
                    .collect(),
            )
        })
        .collect();
    let modes = truth
        .modes
        .iter()
        .map(|m| Mode::new(m.omega * range.sample(rng), m.sigma * range.sample(rng)))
        .collect();
    SystemState { amplitudes, modes }
}

/// Per channel: a scale, then one phase per mode; unit mode amplitudes.
fn draw_specs(rng: &mut ChaCha8Rng, channels: usize, modes: usize, scale: Range, phase: Range) -> Vec<ChannelSpec> {
    (0..channels)
        .map(|_| {
            let scale = scale.sample(rng);
            ChannelSpec {
                scale,
                components: (0..modes)
                    .map(|_| Polar {
                        amplitude: 1.0,
                        phase: phase.sample(rng),
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Seeded channel scales and phases as drawn by the benchmark, plus a seed
/// for the noise stream.
pub fn random_channel_specs(
    seed: u64,
    channels: usize,
    modes: usize,
    scale: Range,
    phase: Range,
) -> Result<(Vec<ChannelSpec>, u64)> {
    scale.validate("scale")?;
    phase.validate("phase")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = draw_specs(&mut rng, channels, modes, scale, phase);
    Ok((specs, rng.gen()))
}

fn scenario(config: &BenchConfig, snr: f64, stream: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let modes = ModeSet::single(config.omega, config.sigma)?;
    let specs = draw_specs(&mut rng, config.channels, 1, config.scale, config.phase);
    let noise = if config.noise { NoiseSpec::SnrDb(snr) } else { NoiseSpec::Off };
    let noise_seed = rng.gen();
    let syn = synthesize_window(&modes, &specs, config.fs, config.samples(), noise, noise_seed)?;
    let inits = (0..=config.channels)
        .map(|_| perturb(&syn.truth, config.init, &mut rng))
        .collect();
    Ok(Scenario {
        window: syn.window,
        truth: syn.truth,
        inits,
    })
}

fn estimate(config: &BenchConfig, estimator: Estimator, sc: &Scenario, topology: &Topology) -> Result<Vec<Mode>> {
    let modes = sc.truth.modes.len();
    let m = sc.window.channels();
    match estimator {
        Estimator::Prony => prony_fit_with(&sc.window, modes, config.prony_order),
        Estimator::Admm => admm_prony(&sc.window, modes, &config.admm).map(|o| o.modes),
        Estimator::Cekf => cekf_run(&sc.window, &sc.inits[0], &config.cekf.config(m, modes)).map(|t| t.modes),
        Estimator::Dekf => {
            let configs = vec![config.distributed.config(m, modes); m];
            let weights = DiffusionWeights::uniform(topology);
            dekf_run(&sc.window, topology, &weights, &sc.inits[1..], &configs).map(|t| mean_modes(&t))
        }
        Estimator::Dekfr => {
            let configs = vec![config.distributed.config(m, modes); m];
            let inits = reduce_states(topology, &sc.inits[1..])?;
            let weights = DiffusionWeights::uniform(topology);
            let reduced = ReducedDiffusionWeights::uniform(topology);
            dekfr_run(&sc.window, topology, &weights, &reduced, &inits, &configs).map(|t| mean_modes(&t))
        }
    }
}

/// Per-run outcome: `(freq_err_pct, damp_err_pct)` per estimator, `None` on divergence.
type RunErrors = Vec<Option<(f64, f64)>>;

fn run_once(config: &BenchConfig, snr: f64, stream: u64, topology: &Topology) -> Result<RunErrors> {
    let sc = scenario(config, snr, stream)?;
    Ok(config
        .estimators
        .iter()
        .map(|&est| match estimate(config, est, &sc, topology) {
            Ok(modes) => match error_metrics(&modes, &sc.truth.modes) {
                Some(errs) => Some((errs[0].freq_err_pct, errs[0].damp_err_pct)),
                None => {
                    debug!("{est} run {stream}: estimate {modes:?} unmatched");
                    None
                }
            },
            Err(e) => {
                debug!("{est} run {stream}: {e}");
                None
            }
        })
        .collect())
}

/// Worker count: explicit setting, then the environment, then rayon's default.
pub fn worker_count(explicit: Option<usize>) -> Result<Option<usize>> {
    if explicit.is_some() {
        return Ok(explicit);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(validation(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

pub fn monte_carlo(config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let topology = Topology::ring(config.channels)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count(config.threads)? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| Error::Internal(e.to_string()))?;
    let started = Instant::now();

    let mut cells = Vec::with_capacity(config.snr_db.len() * config.estimators.len());
    for (s, &snr) in config.snr_db.iter().enumerate() {
        let base = (s * config.runs) as u64;
        let runs: Vec<RunErrors> = pool.install(|| {
            (0..config.runs as u64)
                .into_par_iter()
                .map(|r| run_once(config, snr, base + r, &topology))
                .collect::<Result<_>>()
        })?;
        for (e, &estimator) in config.estimators.iter().enumerate() {
            let freq_errors: Vec<Option<f64>> = runs.iter().map(|r| r[e].map(|v| v.0)).collect();
            let damp_errors: Vec<Option<f64>> = runs.iter().map(|r| r[e].map(|v| v.1)).collect();
            let ok_freq: Vec<f64> = freq_errors.iter().flatten().copied().collect();
            let ok_damp: Vec<f64> = damp_errors.iter().flatten().copied().collect();
            cells.push(Cell {
                estimator,
                snr_db: snr,
                freq: Stats::of(&ok_freq),
                damping: Stats::of(&ok_damp),
                divergences: config.runs - ok_freq.len(),
                freq_errors,
                damp_errors,
            });
        }
        info!("SNR {snr} dB: {} runs done after {:.1?}", config.runs, started.elapsed());
    }
    Ok(BenchReport {
        config: config.clone(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "txt" => Ok(Self::Text),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(validation(format!("unknown table format '{other}'"))),
        }
    }
}

fn table_rows(report: &BenchReport) -> Vec<(String, Vec<Option<f64>>)> {
    let mut rows = Vec::new();
    for &est in &report.config.estimators {
        for (stat, pick) in [("Mean", 0usize), ("Std", 1)] {
            let mut values = Vec::new();
            for &snr in &report.config.snr_db {
                let cell = report.cell(est, snr);
                for stats in [cell.map(|c| c.freq), cell.map(|c| c.damping)] {
                    values.push(stats.and_then(|s| if pick == 0 { s.mean } else { s.std }));
                }
            }
            rows.push((format!("{stat} ({est})"), values));
        }
    }
    rows
}

/// Renders the report as a table with Mean/Std rows per estimator and a
/// frequency/damping column pair per SNR level.
pub fn report_table(report: &BenchReport, format: TableFormat) -> Result<String> {
    if format == TableFormat::Json {
        return serde_json::to_string_pretty(report).map_err(|e| Error::Internal(e.to_string()));
    }
    let rows = table_rows(report);
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("row");
            for snr in &report.config.snr_db {
                write!(out, ",freq_{snr}db,damping_{snr}db").unwrap();
            }
            out.push('\n');
            for (label, values) in rows {
                out.push_str(&label);
                for v in values {
                    out.push(',');
                    if let Some(v) = v {
                        write!(out, "{v}").unwrap();
                    }
                }
                out.push('\n');
            }
        }
        TableFormat::Text => {
            write!(out, "{:<14}", "SNR (dB)").unwrap();
            for snr in &report.config.snr_db {
                write!(out, "{:>22}", snr).unwrap();
            }
            out.push('\n');
            write!(out, "{:<14}", "").unwrap();
            for _ in &report.config.snr_db {
                write!(out, "{:>11}{:>11}", "Freq", "Damping").unwrap();
            }
            out.push('\n');
            for (label, values) in rows {
                write!(out, "{label:<14}").unwrap();
                for v in values {
                    match v {
                        Some(v) => write!(out, "{:>10.2}%", v).unwrap(),
                        None => write!(out, "{:>11}", "-").unwrap(),
                    }
                }
                out.push('\n');
            }
            for &est in &report.config.estimators {
                let div: Vec<String> = report
                    .config
                    .snr_db
                    .iter()
                    .map(|&s| report.cell(est, s).map_or(0, |c| c.divergences).to_string())
                    .collect();
                if div.iter().any(|d| d != "0") {
                    writeln!(out, "divergences ({est}): {}", div.join(" / ")).unwrap();
                }
            }
        }
        TableFormat::Json => unreachable!(),
    }
    Ok(out)
}
