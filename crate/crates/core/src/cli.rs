//! Command-line entry points.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use crate::checkpoint::{read_checkpoint, write_checkpoint, write_quantized, Checkpoint, QuantizedCheckpoint};
use crate::config::{load_config, Config, RunManifest, RunSpec};
use crate::data::{partition, partition_indices, skew_stats, write_assignment_csv};
use crate::denoiser::Denoiser;
use crate::diffusion::{build_linear_schedule, sample};
use crate::error::{Error, Result};
use crate::federation::{broadcast_params, run_experiment, Variant};
use crate::quantizer::{calibrate_weights, quantize_model};
use crate::report::{write_report, MANIFEST_FILE, METRICS_FILE};
use crate::rng::derive_seed;
use crate::verify::{run_all, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const QUANTIZED_FILE: &str = "checkpoint.quant.bin";
const SAMPLES_FILE: &str = "samples.csv";
const VERIFY_BUDGET_SECS: f64 = 300.0;

#[derive(Debug, Parser)]
#[command(name = "feddm", version, about = "Federated diffusion training on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every entry of the configured grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum grid entries trained at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarise completed runs as Markdown plus SVG charts.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suite.
    Verify {
        /// Also write the results to `<out>/verify.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the dataset and its client assignment as CSV.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from a saved checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::ContractionViolation(_) => EXIT_VERIFY,
        _ => EXIT_RUNTIME,
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("FEDDM_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run { config, out, seed, jobs } => {
            cmd_run(&config, &out, seed, jobs)?;
            Ok(EXIT_OK)
        }
        Command::Report { out } => {
            for path in write_report(&out)? {
                println!("{}", path.display());
            }
            Ok(EXIT_OK)
        }
        Command::Verify { out, seed } => cmd_verify(out.as_deref(), seed),
        Command::Partition { config, out, seed } => {
            cmd_partition(&config, &out, seed)?;
            Ok(EXIT_OK)
        }
        Command::Sample { checkpoint, out, samples, seed } => {
            cmd_sample(&checkpoint, &out, samples, seed)?;
            Ok(EXIT_OK)
        }
    }
}

fn load_with_seed(path: &Path, seed: Option<u64>) -> Result<Config> {
    let cfg = load_config(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write_points_csv(path: &Path, points: &[Vec<f64>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let dim = points.first().map_or(0, Vec::len);
    let header: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for p in points {
        let row: Vec<String> = p.iter().map(f64::to_string).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Trains one grid entry into `dir`.
pub fn execute_run(config: &Config, spec: &RunSpec, dir: &Path) -> Result<RunManifest> {
    let started = chrono::Utc::now().to_rfc3339();
    std::fs::create_dir_all(dir)?;
    let exp = &spec.experiment;
    let data = config.data.load(exp.fed.seed)?;
    info!("{}: {} points, {} clients", spec.name, data.len(), exp.fed.clients);
    let log = run_experiment(exp, &data, &spec.partition)?;

    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    log.write_metrics_csv(&mut metrics, config.output.record_wall_time)?;
    metrics.flush()?;

    let ck = Checkpoint {
        model: exp.model.clone(),
        diffusion: exp.diffusion,
        params: log.final_params.clone(),
    };
    write_checkpoint(BufWriter::new(File::create(dir.join(CHECKPOINT_FILE))?), &ck)?;
    let mut outputs = vec![METRICS_FILE.to_string(), CHECKPOINT_FILE.to_string()];
    if exp.fed.variant == Variant::Quant {
        let calib = if exp.fed.quant_calibrate {
            Some(calibrate_weights(&log.final_params, exp.fed.bits)?)
        } else {
            None
        };
        let q = QuantizedCheckpoint {
            model: exp.model.clone(),
            diffusion: exp.diffusion,
            quantized: quantize_model(&log.final_params, exp.fed.bits, calib.as_ref())?,
        };
        write_quantized(BufWriter::new(File::create(dir.join(QUANTIZED_FILE))?), &q)?;
        outputs.push(QUANTIZED_FILE.to_string());
    }

    let deployed = broadcast_params(&log.final_params, &exp.fed)?;
    let sched = build_linear_schedule(&exp.diffusion)?;
    let model = Denoiser { arch: &exp.model, params: &deployed };
    let points = sample(&model, &sched, config.output.samples, exp.model.data_dim, derive_seed(exp.fed.seed, &[0x5a]))?;
    write_points_csv(&dir.join(SAMPLES_FILE), &points)?;
    outputs.push(SAMPLES_FILE.to_string());

    let manifest = RunManifest {
        name: spec.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: exp.fed.seed,
        config: config.clone(),
        run: spec.clone(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        outputs,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(fid) = log.final_fid() {
        info!("{}: final fid {fid:.6}", spec.name);
    }
    Ok(manifest)
}

pub fn cmd_run(config_path: &Path, out: &Path, seed: Option<u64>, jobs: usize) -> Result<Vec<RunManifest>> {
    let config = load_with_seed(config_path, seed)?;
    let runs = config.runs()?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.ini"), config.to_config_string())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Argument(e.to_string()))?;
    info!("{} grid entries, {} at a time", runs.len(), jobs.max(1));
    pool.install(|| {
        runs.par_iter()
            .map(|spec| execute_run(&config, spec, &out.join(&spec.name)))
            .collect()
    })
}

pub fn cmd_verify(out: Option<&Path>, seed: u64) -> Result<i32> {
    let results = run_all(VerifyOptions { seed, ..Default::default() });
    let mut text = String::new();
    for r in &results {
        println!("{r}");
        text.push_str(&format!("{r}\n"));
    }
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    if total > VERIFY_BUDGET_SECS {
        warn!("verification took {total:.1}s, over the {VERIFY_BUDGET_SECS}s budget");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("verify.txt"), &text)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("failed families: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

pub fn cmd_partition(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_with_seed(config_path, seed)?;
    let data = config.data.load(config.fed.seed)?;
    let spec = config.partition_spec();
    std::fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("data.csv"))?);
    data.write_csv(&mut w)?;
    w.flush()?;
    let shards = partition_indices(&data, &spec)?;
    let mut w = BufWriter::new(File::create(out.join("assignment.csv"))?);
    write_assignment_csv(&shards, &mut w)?;
    w.flush()?;
    let stats = skew_stats(&partition(&data, &spec)?)?;
    std::fs::write(out.join("partition.json"), serde_json::to_string_pretty(&stats)?)?;
    info!("{} shards, sizes {:?}", shards.len(), stats.sizes);
    Ok(())
}

pub fn cmd_sample(checkpoint: &Path, out: &Path, n: usize, seed: u64) -> Result<()> {
    let ck = read_checkpoint(std::io::BufReader::new(File::open(checkpoint)?))?;
    let sched = build_linear_schedule(&ck.diffusion)?;
    let model = Denoiser { arch: &ck.model, params: &ck.params };
    let points = sample(&model, &sched, n, ck.model.data_dim, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_points_csv(out, &points)
}
