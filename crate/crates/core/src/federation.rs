//! Round orchestration for the vanilla, proximal and quantized protocols.
//!
//! Every selected client starts from the model broadcast in that round, runs
//! `E` epochs of minibatch SGD on its shard and returns its parameters. The
//! server averages them with weights `n_i = |D_i| / Σ_j |D_j|` over the
//! selected set, summing in ascending client id.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition, LabeledDataset, PartitionSpec};
use crate::denoiser::{prox_grad, sgd_step, Denoiser, MlpDenoiser, ParamVector, TrainBatch};
use crate::diffusion::{build_linear_schedule, sample, DiffusionConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{fit_gaussian, frechet_distance, GaussianStats};
use crate::quantizer::{
    calibrate, calibrate_weights, code_payload_size, dequantize_model, quantize_model, CalibrationParams,
};
use crate::rng::{derive_seed, normal_vec, rng_from, Rng, TAG_CALIB, TAG_CENTRAL, TAG_CLIENT, TAG_EVAL, TAG_INIT, TAG_SELECT};

/// Bytes per parameter for full-precision transfers.
pub const FULL_PRECISION_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Vanilla,
    Prox,
    Quant,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Vanilla => "vanilla",
            Variant::Prox => "prox",
            Variant::Quant => "quant",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "prox" => Ok(Variant::Prox),
            "quant" => Ok(Variant::Quant),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Total clients `K`.
    pub clients: usize,
    /// Clients selected per round `k`.
    pub per_round: usize,
    /// Global rounds `R`.
    pub rounds: usize,
    /// Local epochs `E`.
    pub local_epochs: usize,
    pub lr: f64,
    pub mu: f64,
    pub variant: Variant,
    /// Wire bitwidth for the quantized variant.
    pub bits: u8,
    pub batch_size: usize,
    pub seed: u64,
    /// Reverse-chain samples drawn by each client while calibrating.
    pub calib_samples: usize,
    /// When false the quantized variant uses raw min/max ranges.
    pub quant_calibrate: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            per_round: 6,
            rounds: 16,
            local_epochs: 10,
            lr: 1e-3,
            mu: 0.0,
            variant: Variant::Vanilla,
            bits: 32,
            batch_size: 64,
            seed: 0,
            calib_samples: 8,
            quant_calibrate: true,
        }
    }
}

impl FedConfig {
    /// Structural checks. `rounds = 0`, `lr = 0` and `mu = 0` are accepted
    /// here; the config loader applies the stricter user-facing rules.
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("clients (K) must be >= 1".into()));
        }
        if self.per_round == 0 || self.per_round > self.clients {
            return Err(Error::Config(format!(
                "per_round k = {} must lie in [1, K = {}]",
                self.per_round, self.clients
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs (E) must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu {} must be finite and >= 0", self.mu)));
        }
        if self.variant == Variant::Quant {
            if !matches!(self.bits, 8 | 16 | 32) {
                return Err(Error::Config(format!("bits {} must be 8, 16 or 32", self.bits)));
            }
            if self.quant_calibrate && self.calib_samples == 0 {
                return Err(Error::Config("calib_samples must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub shard: LabeledDataset,
    pub rng_seed: u64,
}

impl ClientState {
    pub fn size(&self) -> usize {
        self.shard.len()
    }
}

pub fn make_clients(shards: Vec<LabeledDataset>, seed: u64) -> Vec<ClientState> {
    shards
        .into_iter()
        .enumerate()
        .map(|(id, shard)| ClientState {
            id,
            shard,
            rng_seed: derive_seed(seed, &[TAG_CLIENT, id as u64]),
        })
        .collect()
}

/// `k` distinct client ids drawn uniformly without replacement, ascending.
pub fn select_clients(total: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::Config(format!("cannot select {k} of {total} clients")));
    }
    let mut rng = rng_from(seed);
    let mut ids = rand::seq::index::sample(&mut rng, total, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `n_i = |D_i| / Σ_{j ∈ selected} |D_j|`, keyed by client id.
pub fn aggregation_weights(sizes: &[usize], selected: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if selected.is_empty() {
        return Err(Error::Argument("no clients selected".into()));
    }
    let mut total = 0usize;
    for &id in selected {
        let s = *sizes
            .get(id)
            .ok_or_else(|| Error::Argument(format!("unknown client id {id}")))?;
        if s == 0 {
            return Err(Error::Argument(format!("client {id} has an empty dataset")));
        }
        total += s;
    }
    Ok(selected
        .iter()
        .map(|&id| (id, sizes[id] as f64 / total as f64))
        .collect())
}

/// `Σ_j n_j θ_j`, accumulated in ascending client id.
pub fn aggregate(updates: &BTreeMap<usize, ParamVector>, weights: &BTreeMap<usize, f64>) -> Result<ParamVector> {
    let first = updates
        .values()
        .next()
        .ok_or_else(|| Error::Argument("no updates to aggregate".into()))?;
    if updates.len() != weights.len() || updates.keys().any(|id| !weights.contains_key(id)) {
        return Err(Error::Argument("updates and weights cover different clients".into()));
    }
    let mut acc = vec![0.0; first.len()];
    for (id, theta) in updates {
        first.check_layout(theta)?;
        let w = weights[id];
        for (a, v) in acc.iter_mut().zip(theta.values()) {
            *a += w * v;
        }
    }
    first.with_values(acc)
}

/// Outcome of a run of minibatch SGD.
#[derive(Debug, Clone)]
pub struct LocalResult {
    pub params: ParamVector,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Options shared by local and centralized training.
#[derive(Debug, Clone, Copy)]
pub struct SgdOptions<'a> {
    pub lr: f64,
    pub batch_size: usize,
    /// Proximal anchor and coefficient.
    pub prox: Option<(&'a ParamVector, f64)>,
}

fn minibatch(points: &[Vec<f64>], idx: &[usize], sched: &NoiseSchedule, rng: &mut Rng) -> TrainBatch {
    let mut batch = TrainBatch::default();
    for &i in idx {
        let t = rng.random_range(1..=sched.steps());
        let noise = normal_vec(rng, points[i].len());
        batch.push(points[i].clone(), t, noise);
    }
    batch
}

/// Runs epochs of shuffled minibatch SGD, stopping early once `max_steps`
/// updates have been taken.
pub fn train_sgd(
    arch: &MlpDenoiser,
    start: &ParamVector,
    points: &[Vec<f64>],
    epochs: usize,
    max_steps: Option<usize>,
    opts: SgdOptions<'_>,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LocalResult> {
    if points.is_empty() {
        return Err(Error::Data("cannot train on an empty shard".into()));
    }
    let mut theta = start.clone();
    let mut order: Vec<usize> = (0..points.len()).collect();
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    'outer: for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opts.batch_size) {
            if max_steps.is_some_and(|m| steps >= m) {
                break 'outer;
            }
            let batch = minibatch(points, chunk, sched, rng);
            let (loss, mut grad) = arch.loss_and_grad(&theta, &batch, sched)?;
            if let Some((anchor, mu)) = opts.prox {
                grad = prox_grad(&grad, &theta, anchor, mu)?;
            }
            theta = sgd_step(&theta, &grad, opts.lr)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(LocalResult {
        params: theta,
        mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
        steps,
    })
}

/// Per-client, per-round RNG seed.
pub fn client_round_seed(client: &ClientState, round: usize) -> u64 {
    derive_seed(client.rng_seed, &[round as u64])
}

/// `E` local epochs starting from the broadcast model; `theta_global` is untouched.
pub fn local_update(
    theta_global: &ParamVector,
    client: &ClientState,
    cfg: &FedConfig,
    arch: &MlpDenoiser,
    sched: &NoiseSchedule,
    round: usize,
) -> Result<LocalResult> {
    let mut rng = rng_from(client_round_seed(client, round));
    let prox = (cfg.variant == Variant::Prox && cfg.mu > 0.0).then_some((theta_global, cfg.mu));
    let opts = SgdOptions {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        prox,
    };
    train_sgd(arch, theta_global, &client.shard.points, cfg.local_epochs, None, opts, sched, &mut rng)
}

/// Centralized baseline: `steps` SGD updates over the whole dataset.
pub fn train_centralized(
    arch: &MlpDenoiser,
    start: &ParamVector,
    data: &LabeledDataset,
    lr: f64,
    batch_size: usize,
    steps: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<LocalResult> {
    let per_epoch = data.len().div_ceil(batch_size.max(1));
    let epochs = steps.div_ceil(per_epoch.max(1));
    let opts = SgdOptions { lr, batch_size, prox: None };
    let mut rng = rng_from(seed);
    train_sgd(arch, start, &data.points, epochs, Some(steps), opts, sched, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<usize>,
    pub weights: BTreeMap<usize, f64>,
    pub mean_local_loss: f64,
    pub bytes_down: usize,
    pub bytes_up: usize,
    /// Bit-packed code bytes only, excluding per-tensor headers.
    pub code_bytes_down: usize,
    pub code_bytes_up: usize,
    pub local_steps: usize,
    pub wall_time: f64,
}

fn selection_for_round(cfg: &FedConfig, round: usize) -> Result<Vec<usize>> {
    select_clients(cfg.clients, cfg.per_round, derive_seed(cfg.seed, &[TAG_SELECT, round as u64]))
}

fn mean_loss(results: &BTreeMap<usize, LocalResult>) -> f64 {
    results.values().map(|r| r.mean_loss).sum::<f64>() / results.len() as f64
}

/// One round of the full-precision protocol (vanilla or proximal).
pub fn run_round_vanilla(
    theta: &ParamVector,
    clients: &[ClientState],
    cfg: &FedConfig,
    arch: &MlpDenoiser,
    sched: &NoiseSchedule,
    round: usize,
) -> Result<(ParamVector, RoundReport)> {
    if cfg.variant == Variant::Quant {
        return Err(Error::Config("run_round_vanilla called with the quant variant".into()));
    }
    let start = Instant::now();
    let selected = selection_for_round(cfg, round)?;
    let sizes: Vec<usize> = clients.iter().map(ClientState::size).collect();
    let weights = aggregation_weights(&sizes, &selected)?;
    let results: BTreeMap<usize, LocalResult> = selected
        .par_iter()
        .map(|&id| local_update(theta, &clients[id], cfg, arch, sched, round).map(|r| (id, r)))
        .collect::<Result<_>>()?;
    let updates = results.iter().map(|(id, r)| (*id, r.params.clone())).collect();
    let next = aggregate(&updates, &weights)?;
    let payload = theta.len() * FULL_PRECISION_BYTES * selected.len();
    let report = RoundReport {
        round,
        mean_local_loss: mean_loss(&results),
        local_steps: results.values().map(|r| r.steps).sum(),
        selected,
        weights,
        bytes_down: payload,
        bytes_up: payload,
        code_bytes_down: payload,
        code_bytes_up: payload,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((next, report))
}

fn server_calibration(theta: &ParamVector, cfg: &FedConfig) -> Result<Option<CalibrationParams>> {
    if cfg.quant_calibrate {
        calibrate_weights(theta, cfg.bits).map(Some)
    } else {
        Ok(None)
    }
}

/// The model a client would receive: the quantized broadcast, dequantized.
pub fn broadcast_params(theta: &ParamVector, cfg: &FedConfig) -> Result<ParamVector> {
    if cfg.variant != Variant::Quant {
        return Ok(theta.clone());
    }
    let calib = server_calibration(theta, cfg)?;
    dequantize_model(&quantize_model(theta, cfg.bits, calib.as_ref())?)
}

/// One round of the quantized protocol.
pub fn run_round_quant(
    theta: &ParamVector,
    clients: &[ClientState],
    cfg: &FedConfig,
    arch: &MlpDenoiser,
    sched: &NoiseSchedule,
    round: usize,
) -> Result<(ParamVector, RoundReport)> {
    if cfg.variant != Variant::Quant {
        return Err(Error::Config("run_round_quant needs the quant variant".into()));
    }
    let start = Instant::now();
    let server_calib = server_calibration(theta, cfg)?;
    let global_q = quantize_model(theta, cfg.bits, server_calib.as_ref())?;
    let received = dequantize_model(&global_q)?;

    let selected = selection_for_round(cfg, round)?;
    let sizes: Vec<usize> = clients.iter().map(ClientState::size).collect();
    let weights = aggregation_weights(&sizes, &selected)?;

    let uploads: BTreeMap<usize, (LocalResult, usize, usize, ParamVector)> = selected
        .par_iter()
        .map(|&id| {
            let client = &clients[id];
            let local = local_update(&received, client, cfg, arch, sched, round)?;
            let calib = if cfg.quant_calibrate {
                let seed = derive_seed(client_round_seed(client, round), &[TAG_CALIB]);
                Some(calibrate(&local.params, arch, sched, cfg.calib_samples, cfg.bits, seed)?)
            } else {
                None
            };
            let q = quantize_model(&local.params, cfg.bits, calib.as_ref())?;
            let restored = dequantize_model(&q)?;
            Ok((id, (local, q.payload_bytes, code_payload_size(&q), restored)))
        })
        .collect::<Result<_>>()?;

    let updates = uploads.iter().map(|(id, u)| (*id, u.3.clone())).collect();
    let next = aggregate(&updates, &weights)?;
    let results: BTreeMap<usize, LocalResult> = uploads.iter().map(|(id, u)| (*id, u.0.clone())).collect();
    let k = selected.len();
    let report = RoundReport {
        round,
        mean_local_loss: mean_loss(&results),
        local_steps: results.values().map(|r| r.steps).sum(),
        selected,
        weights,
        bytes_down: k * global_q.payload_bytes,
        bytes_up: uploads.values().map(|u| u.1).sum(),
        code_bytes_down: k * code_payload_size(&global_q),
        code_bytes_up: uploads.values().map(|u| u.2).sum(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((next, report))
}

pub fn run_round(
    theta: &ParamVector,
    clients: &[ClientState],
    cfg: &FedConfig,
    arch: &MlpDenoiser,
    sched: &NoiseSchedule,
    round: usize,
) -> Result<(ParamVector, RoundReport)> {
    match cfg.variant {
        Variant::Quant => run_round_quant(theta, clients, cfg, arch, sched, round),
        _ => run_round_vanilla(theta, clients, cfg, arch, sched, round),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Generated samples per evaluation.
    pub samples: usize,
    /// Evaluate after every `every` rounds (and after the last one).
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 4096, every: 1 }
    }
}

/// Everything needed to run one federated training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub fed: FedConfig,
    pub model: MlpDenoiser,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub round: usize,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub variant: Variant,
    pub reports: Vec<RoundReport>,
    pub evaluations: Vec<Evaluation>,
    pub final_params: ParamVector,
}

impl TrainingLog {
    pub fn total_bytes(&self) -> usize {
        self.reports.iter().map(|r| r.bytes_up + r.bytes_down).sum()
    }

    pub fn total_code_bytes(&self) -> usize {
        self.reports.iter().map(|r| r.code_bytes_up + r.code_bytes_down).sum()
    }

    pub fn total_local_steps(&self) -> usize {
        self.reports.iter().map(|r| r.local_steps).sum()
    }

    pub fn final_fid(&self) -> Option<f64> {
        self.evaluations.last().map(|e| e.fid)
    }

    pub fn best_fid(&self) -> Option<f64> {
        self.evaluations.iter().map(|e| e.fid).reduce(f64::min)
    }

    /// Columns `round,variant,mean_local_loss,fid,bytes_up,bytes_down,wall_time`.
    /// Row 0 holds the evaluation of the initial model. Wall times are written
    /// as zero unless `record_wall_time` is set, keeping reruns byte-identical.
    pub fn write_metrics_csv<W: Write>(&self, mut out: W, record_wall_time: bool) -> Result<()> {
        let fid_at = |round: usize| {
            self.evaluations
                .iter()
                .find(|e| e.round == round)
                .map(|e| e.fid.to_string())
                .unwrap_or_default()
        };
        writeln!(out, "round,variant,mean_local_loss,fid,bytes_up,bytes_down,wall_time")?;
        writeln!(out, "0,{},,{},0,0,0", self.variant, fid_at(0))?;
        for r in &self.reports {
            let wall = if record_wall_time { r.wall_time } else { 0.0 };
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.round + 1,
                self.variant,
                r.mean_local_loss,
                fid_at(r.round + 1),
                r.bytes_up,
                r.bytes_down,
                wall
            )?;
        }
        Ok(())
    }
}

/// Fréchet distance between a dataset and samples drawn from a model.
pub fn evaluate_fid(
    arch: &MlpDenoiser,
    params: &ParamVector,
    sched: &NoiseSchedule,
    real: &GaussianStats,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let model = Denoiser { arch, params };
    let generated = sample(&model, sched, samples, arch.data_dim, seed)?;
    frechet_distance(real, &fit_gaussian(&generated)?)
}

pub fn initial_params(exp: &Experiment) -> Result<ParamVector> {
    exp.model.init_params(derive_seed(exp.fed.seed, &[TAG_INIT]))
}

pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[TAG_EVAL])
}

/// Partitions the data, trains for `R` rounds and evaluates along the way.
pub fn run_experiment(exp: &Experiment, data: &LabeledDataset, part: &PartitionSpec) -> Result<TrainingLog> {
    let cfg = &exp.fed;
    cfg.validate()?;
    exp.model.validate()?;
    if part.parts != cfg.clients {
        return Err(Error::Config(format!(
            "partition count {} differs from K = {}",
            part.parts, cfg.clients
        )));
    }
    if data.dim() != exp.model.data_dim {
        return Err(Error::Shape(format!(
            "data dimension {} differs from model dimension {}",
            data.dim(),
            exp.model.data_dim
        )));
    }
    let sched = build_linear_schedule(&exp.diffusion)?;
    let clients = make_clients(partition(data, part)?, cfg.seed);
    let real = fit_gaussian(&data.points)?;
    let every = exp.eval.every.max(1);
    let eval_seed = eval_seed(cfg.seed);
    let eval = |params: &ParamVector, round: usize| -> Result<Evaluation> {
        let deployed = broadcast_params(params, cfg)?;
        let fid = evaluate_fid(&exp.model, &deployed, &sched, &real, exp.eval.samples, eval_seed)?;
        info!("{} round {round}: fid {fid:.5}", cfg.variant);
        Ok(Evaluation { round, fid })
    };

    let mut theta = initial_params(exp)?;
    let mut evaluations = vec![eval(&theta, 0)?];
    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let (next, report) = run_round(&theta, &clients, cfg, &exp.model, &sched, round)?;
        debug!(
            "round {} selected {:?} loss {:.5} up {} down {}",
            round, report.selected, report.mean_local_loss, report.bytes_up, report.bytes_down
        );
        theta = next;
        reports.push(report);
        let done = round + 1;
        if done % every == 0 || done == cfg.rounds {
            evaluations.push(eval(&theta, done)?);
        }
    }
    Ok(TrainingLog {
        variant: cfg.variant,
        reports,
        evaluations,
        final_params: theta,
    })
}

/// Centralized baseline matched to a federated log: one SGD stream over the
/// full dataset, evaluated whenever its step count reaches the cumulative
/// local-step count of a federated evaluation.
pub fn run_matched_centralized(exp: &Experiment, data: &LabeledDataset, log: &TrainingLog) -> Result<Vec<Evaluation>> {
    let sched = build_linear_schedule(&exp.diffusion)?;
    let real = fit_gaussian(&data.points)?;
    let seed = eval_seed(exp.fed.seed);
    let opts = SgdOptions { lr: exp.fed.lr, batch_size: exp.fed.batch_size, prox: None };
    let mut rng = rng_from(derive_seed(exp.fed.seed, &[TAG_CENTRAL]));
    let mut theta = initial_params(exp)?;
    let mut done = 0usize;
    let mut out = Vec::with_capacity(log.evaluations.len());
    for ev in &log.evaluations {
        let target: usize = log.reports.iter().take(ev.round).map(|r| r.local_steps).sum();
        let todo = target - done;
        if todo > 0 {
            let epochs = todo.div_ceil(data.len().div_ceil(opts.batch_size));
            theta = train_sgd(&exp.model, &theta, &data.points, epochs, Some(todo), opts, &sched, &mut rng)?.params;
            done = target;
        }
        let fid = evaluate_fid(&exp.model, &theta, &sched, &real, exp.eval.samples, seed)?;
        debug!("centralized step {done}: fid {fid:.5}");
        out.push(Evaluation { round: ev.round, fid });
    }
    Ok(out)
}
