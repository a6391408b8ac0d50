//! Sectioned `key = value` configuration files and experiment grids.
//!
//! ```text
//! [federation]
//! clients = 10
//! per_round = 6
//! variant = vanilla
//!
//! [grid]
//! variant = vanilla, prox
//! skew = iid, 3, non_iid
//! ```
//!
//! Every key is optional. Lines starting with `#` or `;` are comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{circle_centers, make_gaussian_mixture, LabeledDataset, PartitionMode, PartitionSpec};
use crate::denoiser::{Activation, MlpDenoiser};
use crate::diffusion::{DiffusionConfig, SigmaMode};
use crate::error::{Error, Result};
use crate::federation::{EvalConfig, Experiment, FedConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Equal-weight isotropic Gaussians centred on a circle.
    Mixture,
    /// `x1,...,xd,label` rows with a header line.
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub samples: usize,
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
    /// Falls back to the federation seed.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Mixture,
            samples: 16_000,
            modes: 8,
            radius: 1.0,
            std: 0.1,
            seed: None,
        }
    }
}

impl DataConfig {
    pub fn load(&self, fallback_seed: u64) -> Result<LabeledDataset> {
        match &self.source {
            DataSource::Mixture => make_gaussian_mixture(
                self.samples,
                &circle_centers(self.modes, self.radius),
                self.std,
                self.seed.unwrap_or(fallback_seed),
            ),
            DataSource::Csv(path) => {
                let file = std::fs::File::open(path)?;
                LabeledDataset::read_csv(std::io::BufReader::new(file))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.source == DataSource::Mixture {
            if self.modes == 0 || self.samples < self.modes {
                return Err(Error::Config(format!(
                    "data needs modes >= 1 and samples >= modes, got {} and {}",
                    self.modes, self.samples
                )));
            }
            if !(self.std > 0.0) || !self.radius.is_finite() {
                return Err(Error::Config("data std must be > 0 and radius finite".into()));
            }
        }
        Ok(())
    }
}

/// Value lists swept as a cross product. Empty lists keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub clients: Vec<usize>,
    pub per_round: Vec<usize>,
    /// Fractions of `K` contributing per round; `k = round(fraction · K)`.
    pub contribution: Vec<f64>,
    pub rounds: Vec<usize>,
    pub local_epochs: Vec<usize>,
    pub variant: Vec<Variant>,
    pub bits: Vec<u8>,
    pub skew: Vec<PartitionMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Write measured wall times to the metrics CSV instead of zeros.
    pub record_wall_time: bool,
    pub samples: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            record_wall_time: false,
            samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub fed: FedConfig,
    pub diffusion: DiffusionConfig,
    pub model: MlpDenoiser,
    pub data: DataConfig,
    pub partition: PartitionMode,
    pub eval: EvalConfig,
    pub grid: ExperimentGrid,
    pub output: OutputConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            fed: FedConfig {
                lr: 0.01,
                ..FedConfig::default()
            },
            diffusion: DiffusionConfig::default(),
            model: MlpDenoiser::default(),
            data: DataConfig::default(),
            partition: PartitionMode::Iid,
            eval: EvalConfig::default(),
            grid: ExperimentGrid::default(),
            output: OutputConfig::default(),
        }
    }
}

/// One fully specified grid entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub name: String,
    pub experiment: Experiment,
    pub partition: PartitionSpec,
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("cannot parse `{s}`")))
        .collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

fn parse_one<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("cannot parse `{value}`"))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header `{line}`")))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{key}` in [{section}]")));
            }
            cfg.set(&section, key, value).map_err(|msg| match msg {
                SetError::Unknown => Error::Config(format!("line {line_no}: unknown key `{key}` in [{section}]")),
                SetError::Bad(m) => Error::Config(format!("line {line_no}: key `{key}`: {m}")),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), SetError> {
        let f = &mut self.fed;
        match (section, key) {
            ("federation", "clients") => f.clients = parse_one(v)?,
            ("federation", "per_round") => f.per_round = parse_one(v)?,
            ("federation", "rounds") => f.rounds = parse_one(v)?,
            ("federation", "local_epochs") => f.local_epochs = parse_one(v)?,
            ("federation", "lr") => f.lr = parse_one(v)?,
            ("federation", "mu") => f.mu = parse_one(v)?,
            ("federation", "variant") => f.variant = parse_one(v)?,
            ("federation", "bits") => f.bits = parse_one(v)?,
            ("federation", "batch_size") => f.batch_size = parse_one(v)?,
            ("federation", "seed") => f.seed = parse_one(v)?,
            ("federation", "calib_samples") => f.calib_samples = parse_one(v)?,
            ("federation", "quant_calibrate") => f.quant_calibrate = parse_bool(v)?,
            ("diffusion", "steps") => self.diffusion.steps = parse_one(v)?,
            ("diffusion", "beta_start") => self.diffusion.beta_start = parse_one(v)?,
            ("diffusion", "beta_end") => self.diffusion.beta_end = parse_one(v)?,
            ("diffusion", "sigma") => self.diffusion.sigma_mode = parse_one::<SigmaMode>(v)?,
            ("model", "hidden") => self.model.hidden = parse_list(v)?,
            ("model", "activation") => self.model.activation = parse_one::<Activation>(v)?,
            ("model", "time_features") => self.model.time_features = parse_one(v)?,
            ("data", "source") => {
                self.data.source = match v {
                    "mixture" => DataSource::Mixture,
                    other => match other.strip_prefix("csv:") {
                        Some(p) => DataSource::Csv(PathBuf::from(p.trim())),
                        None => return Err(SetError::Bad(format!("expected `mixture` or `csv:<path>`, got `{v}`"))),
                    },
                }
            }
            ("data", "samples") => self.data.samples = parse_one(v)?,
            ("data", "modes") => self.data.modes = parse_one(v)?,
            ("data", "radius") => self.data.radius = parse_one(v)?,
            ("data", "std") => self.data.std = parse_one(v)?,
            ("data", "seed") => self.data.seed = Some(parse_one(v)?),
            ("partition", "mode") => self.partition = parse_one(v)?,
            ("eval", "samples") => self.eval.samples = parse_one(v)?,
            ("eval", "every") => self.eval.every = parse_one(v)?,
            ("grid", "clients") => self.grid.clients = parse_list(v)?,
            ("grid", "per_round") => self.grid.per_round = parse_list(v)?,
            ("grid", "contribution") => self.grid.contribution = parse_list(v)?,
            ("grid", "rounds") => self.grid.rounds = parse_list(v)?,
            ("grid", "local_epochs") => self.grid.local_epochs = parse_list(v)?,
            ("grid", "variant") => self.grid.variant = parse_list(v)?,
            ("grid", "bits") => self.grid.bits = parse_list(v)?,
            ("grid", "skew") => self.grid.skew = parse_list(v)?,
            ("output", "record_wall_time") => self.output.record_wall_time = parse_bool(v)?,
            ("output", "samples") => self.output.samples = parse_one(v)?,
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// Canonical text form; `Config::parse` of the result gives back `self`.
    pub fn to_config_string(&self) -> String {
        let f = &self.fed;
        let mut s = String::new();
        let _ = writeln!(s, "[federation]");
        let _ = writeln!(s, "clients = {}", f.clients);
        let _ = writeln!(s, "per_round = {}", f.per_round);
        let _ = writeln!(s, "rounds = {}", f.rounds);
        let _ = writeln!(s, "local_epochs = {}", f.local_epochs);
        let _ = writeln!(s, "lr = {}", f.lr);
        let _ = writeln!(s, "mu = {}", f.mu);
        let _ = writeln!(s, "variant = {}", f.variant);
        let _ = writeln!(s, "bits = {}", f.bits);
        let _ = writeln!(s, "batch_size = {}", f.batch_size);
        let _ = writeln!(s, "seed = {}", f.seed);
        let _ = writeln!(s, "calib_samples = {}", f.calib_samples);
        let _ = writeln!(s, "quant_calibrate = {}", f.quant_calibrate);
        let _ = writeln!(s, "\n[diffusion]");
        let _ = writeln!(s, "steps = {}", self.diffusion.steps);
        let _ = writeln!(s, "beta_start = {}", self.diffusion.beta_start);
        let _ = writeln!(s, "beta_end = {}", self.diffusion.beta_end);
        let _ = writeln!(s, "sigma = {}", self.diffusion.sigma_mode);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "hidden = {}", join(&self.model.hidden));
        let _ = writeln!(s, "activation = {}", self.model.activation);
        let _ = writeln!(s, "time_features = {}", self.model.time_features);
        let _ = writeln!(s, "\n[data]");
        match &self.data.source {
            DataSource::Mixture => {
                let _ = writeln!(s, "source = mixture");
            }
            DataSource::Csv(p) => {
                let _ = writeln!(s, "source = csv:{}", p.display());
            }
        }
        let _ = writeln!(s, "samples = {}", self.data.samples);
        let _ = writeln!(s, "modes = {}", self.data.modes);
        let _ = writeln!(s, "radius = {}", self.data.radius);
        let _ = writeln!(s, "std = {}", self.data.std);
        if let Some(seed) = self.data.seed {
            let _ = writeln!(s, "seed = {seed}");
        }
        let _ = writeln!(s, "\n[partition]");
        let _ = writeln!(s, "mode = {}", self.partition);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "samples = {}", self.eval.samples);
        let _ = writeln!(s, "every = {}", self.eval.every);
        let g = &self.grid;
        let _ = writeln!(s, "\n[grid]");
        let lists: [(&str, String, bool); 8] = [
            ("clients", join(&g.clients), g.clients.is_empty()),
            ("per_round", join(&g.per_round), g.per_round.is_empty()),
            ("contribution", join(&g.contribution), g.contribution.is_empty()),
            ("rounds", join(&g.rounds), g.rounds.is_empty()),
            ("local_epochs", join(&g.local_epochs), g.local_epochs.is_empty()),
            ("variant", join(&g.variant), g.variant.is_empty()),
            ("bits", join(&g.bits), g.bits.is_empty()),
            ("skew", join(&g.skew), g.skew.is_empty()),
        ];
        for (key, value, empty) in lists {
            if !empty {
                let _ = writeln!(s, "{key} = {value}");
            }
        }
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "record_wall_time = {}", self.output.record_wall_time);
        let _ = writeln!(s, "samples = {}", self.output.samples);
        s
    }

    /// Checks the base configuration and every grid combination.
    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        self.data.validate()?;
        if self.eval.samples < 2 {
            return Err(Error::Config("eval samples must be >= 2".into()));
        }
        if self.eval.every == 0 {
            return Err(Error::Config("eval every must be >= 1".into()));
        }
        if !self.grid.per_round.is_empty() && !self.grid.contribution.is_empty() {
            return Err(Error::Config("grid sets both per_round and contribution".into()));
        }
        if let Some(c) = self.grid.contribution.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
            return Err(Error::Config(format!("contribution {c} must lie in (0, 1]")));
        }
        self.runs().map(|_| ())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            parts: self.fed.clients,
            mode: self.partition,
            seed: self.fed.seed,
        }
    }

    /// Overrides the master seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.fed.seed = seed;
        self
    }

    /// Expands the grid into fully specified runs, in a fixed order.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let g = &self.grid;
        let base = &self.fed;
        let or = |xs: &[usize], x: usize| if xs.is_empty() { vec![x] } else { xs.to_vec() };
        let variants = if g.variant.is_empty() { vec![base.variant] } else { g.variant.clone() };
        let bits = if g.bits.is_empty() { vec![base.bits] } else { g.bits.clone() };
        let skews = if g.skew.is_empty() { vec![self.partition] } else { g.skew.clone() };

        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &clients in &or(&g.clients, base.clients) {
            let ks: Vec<usize> = if !g.contribution.is_empty() {
                g.contribution.iter().map(|c| ((c * clients as f64).round() as usize).max(1)).collect()
            } else {
                or(&g.per_round, base.per_round)
            };
            for &per_round in &ks {
                for &rounds in &or(&g.rounds, base.rounds) {
                    for &local_epochs in &or(&g.local_epochs, base.local_epochs) {
                        for &variant in &variants {
                            for &b in &bits {
                                let b = if variant == Variant::Quant { b } else { 32 };
                                for &mode in &skews {
                                    let fed = FedConfig {
                                        clients,
                                        per_round,
                                        rounds,
                                        local_epochs,
                                        variant,
                                        bits: b,
                                        ..base.clone()
                                    };
                                    let name = format!(
                                        "{variant}_K{clients}_k{per_round}_R{rounds}_E{local_epochs}_b{b}_{mode}"
                                    );
                                    if !seen.insert(name.clone()) {
                                        continue;
                                    }
                                    let ctx = |e: Error| Error::Config(format!("grid entry {name}: {e}"));
                                    fed.validate().map_err(ctx)?;
                                    if variant == Variant::Prox && !(fed.mu > 0.0) {
                                        return Err(ctx(Error::Config("prox variant needs mu > 0".into())));
                                    }
                                    let partition = PartitionSpec { parts: clients, mode, seed: fed.seed };
                                    partition.validate().map_err(ctx)?;
                                    if mode == PartitionMode::NonIid && self.data.source == DataSource::Mixture && self.data.modes < clients {
                                        return Err(ctx(Error::Config(format!(
                                            "non_iid needs at least K = {clients} labels, data has {}",
                                            self.data.modes
                                        ))));
                                    }
                                    let mut model = self.model.clone();
                                    if self.data.source == DataSource::Mixture {
                                        model.data_dim = 2;
                                    }
                                    model.validate().map_err(ctx)?;
                                    out.push(RunSpec {
                                        name,
                                        experiment: Experiment {
                                            fed,
                                            model,
                                            diffusion: self.diffusion,
                                            eval: self.eval,
                                        },
                                        partition,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

enum SetError {
    Unknown,
    Bad(String),
}

impl From<String> for SetError {
    fn from(s: String) -> Self {
        SetError::Bad(s)
    }
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Config::parse(&text)
}

/// Everything needed to reproduce a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub version: String,
    pub seed: u64,
    pub config: Config,
    pub run: RunSpec,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
}
