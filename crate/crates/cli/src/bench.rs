use std::path::PathBuf;

use clap::Args;
use modal_core::bench::{monte_carlo, report_table, BenchConfig, Estimator, TableFormat};

use crate::error::{CliError, CliResult};
use crate::manifest::{create_dir, to_value, RunManifest};

pub const TEXT_FILE: &str = "bench.txt";
pub const CSV_FILE: &str = "bench.csv";
pub const JSON_FILE: &str = "bench.json";

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// JSON file with a full or partial benchmark configuration; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Comma-separated SNR levels in dB.
    #[arg(long, value_delimiter = ',')]
    pub snr: Option<Vec<f64>>,
    /// Comma-separated subset of prony, admm, cekf, dekf, dekfr.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<Estimator>>,
    /// Worker threads; overrides MODAL_DEKF_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

impl BenchArgs {
    fn resolve(&self) -> CliResult<BenchConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?
            }
            None => BenchConfig::default(),
        };
        if let Some(runs) = self.runs {
            config.runs = runs;
        }
        if let Some(snr) = &self.snr {
            config.snr_db = snr.clone();
        }
        if let Some(estimators) = &self.estimators {
            config.estimators = estimators.clone();
        }
        if self.threads.is_some() {
            config.threads = self.threads;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    let config = args.resolve()?;
    let report = monte_carlo(&config)?;
    create_dir(&args.out_dir)?;
    let mut text = String::new();
    for (file, format) in [
        (TEXT_FILE, TableFormat::Text),
        (CSV_FILE, TableFormat::Csv),
        (JSON_FILE, TableFormat::Json),
    ] {
        let table = report_table(&report, format)?;
        let path = args.out_dir.join(file);
        std::fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
        if format == TableFormat::Text {
            text = table;
        }
    }
    RunManifest::new("bench", to_value(&config), config.seed, &[TEXT_FILE, CSV_FILE, JSON_FILE])
        .write(&args.out_dir)?;
    print!("{text}");
    Ok(())
}
