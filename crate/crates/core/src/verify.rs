//! Property suite behind the `verify` subcommand.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::Rng as _;

use crate::data::{make_gaussian_mixture, partition_indices, skew_counts, LabeledDataset, PartitionMode, PartitionSpec};
use crate::denoiser::{Activation, MlpDenoiser, ParamVector, TensorSpec, TrainBatch};
use crate::diffusion::{build_linear_schedule, DiffusionConfig, NoiseSchedule};
use crate::error::Result;
use crate::federation::{aggregate, local_update, make_clients, FedConfig, run_round_vanilla};
use crate::metrics::{frechet_distance, trace_sqrt_product, verify_contraction_bound, GaussianStats, PointMap};
use crate::quantizer::{code_payload_size, quantize_model, quantize_with_rounding, dequantize, Rounding};
use crate::rng::{derive_seed, normal_vec, rng_from};

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for FamilyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<12} {} ({:.2}s)", self.name, self.detail, self.seconds)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub rounding: Rounding,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            rounding: Rounding::HalfAwayFromZero,
        }
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> FamilyResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    FamilyResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` with central differences of step `h`.
pub fn finite_difference_error(
    arch: &MlpDenoiser,
    theta: &ParamVector,
    batch: &TrainBatch,
    sched: &NoiseSchedule,
    h: f64,
) -> Result<f64> {
    let (_, g) = arch.loss_and_grad(theta, batch, sched)?;
    let mut diff = 0.0;
    let mut nn = 0.0;
    let mut values = theta.values().to_vec();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let lp = arch.loss_and_grad(&theta.with_values(values.clone())?, batch, sched)?.0;
        values[i] = orig - h;
        let lm = arch.loss_and_grad(&theta.with_values(values.clone())?, batch, sched)?.0;
        values[i] = orig;
        let num = (lp - lm) / (2.0 * h);
        diff += (g.values()[i] - num).powi(2);
        nn += num * num;
    }
    let ng = g.values().iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(diff.sqrt() / ng.max(nn.sqrt()).max(f64::MIN_POSITIVE))
}

pub fn gradient_family(seed: u64) -> FamilyResult {
    timed("gradient", || {
        let sched = build_linear_schedule(&DiffusionConfig { steps: 50, ..Default::default() })?;
        let mut worst: f64 = 0.0;
        let cases = 20;
        for case in 0..cases {
            let mut rng = rng_from(derive_seed(seed, &[case]));
            let depth = rng.random_range(1..=3);
            let arch = MlpDenoiser {
                data_dim: rng.random_range(1..=3),
                hidden: (0..depth).map(|_| rng.random_range(2..=6)).collect(),
                activation: if case % 2 == 0 { Activation::Tanh } else { Activation::Relu },
                time_features: rng.random_range(0..=2),
            };
            // generic point: zero biases can put ReLU pre-activations exactly on the kink
            let n = arch.num_params();
            let theta = ParamVector::new(normal_vec(&mut rng, n).iter().map(|v| 0.5 * v).collect(), arch.layout())?;
            let mut batch = TrainBatch::default();
            for _ in 0..rng.random_range(1..=5) {
                let x0 = normal_vec(&mut rng, arch.data_dim);
                let noise = normal_vec(&mut rng, arch.data_dim);
                batch.push(x0, rng.random_range(1..=sched.steps()), noise);
            }
            worst = worst.max(finite_difference_error(&arch, &theta, &batch, &sched, 1e-6)?);
        }
        Ok((worst <= 1e-5, format!("{cases} cases, worst relative error {worst:.2e}")))
    })
}

pub fn quantizer_family(seed: u64, rounding: Rounding) -> FamilyResult {
    timed("round-trip", || {
        let mut rng = rng_from(seed);
        let mut worst_ratio: f64 = 0.0;
        let tensors = 1000;
        for i in 0..tensors {
            let n = rng.random_range(1..=256);
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let w: Vec<f64> = normal_vec(&mut rng, n).into_iter().map(|v| v * scale).collect();
            let bits = if i % 2 == 0 { 8 } else { 16 };
            let q = quantize_with_rounding(&w, &[n], bits, None, rounding)?;
            let back = dequantize(&q);
            let err = w.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if q.delta > 0.0 {
                worst_ratio = worst_ratio.max(err / q.delta);
            } else if err > 0.0 {
                worst_ratio = f64::INFINITY;
            }
        }
        let layout = vec![
            TensorSpec { name: "a".into(), shape: vec![17, 3], offset: 0 },
            TensorSpec { name: "b".into(), shape: vec![5], offset: 51 },
        ];
        let theta = ParamVector::new(normal_vec(&mut rng, 56), layout)?;
        let b32 = code_payload_size(&quantize_model(&theta, 32, None)?);
        let b8 = code_payload_size(&quantize_model(&theta, 8, None)?);
        let ok = worst_ratio <= 0.5 + 1e-9 && b32 == 4 * b8;
        Ok((ok, format!("{tensors} tensors, worst |err|/Δ {worst_ratio:.4}, code bytes 32:8 = {b32}:{b8}")))
    })
}

pub fn aggregation_family(seed: u64) -> FamilyResult {
    timed("aggregation", || {
        let mut rng = rng_from(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let n = rng.random_range(1..=40);
            let k = rng.random_range(1..=8);
            let layout = vec![TensorSpec { name: "w".into(), shape: vec![n], offset: 0 }];
            let mut updates = BTreeMap::new();
            let mut raw = BTreeMap::new();
            for id in 0..k {
                let v = normal_vec(&mut rng, n);
                raw.insert(id, rng.random_range(0.1..5.0));
                updates.insert(id, ParamVector::new(v, layout.clone())?);
            }
            let total: f64 = raw.values().sum();
            let weights: BTreeMap<usize, f64> = raw.iter().map(|(i, w)| (*i, w / total)).collect();
            let got = aggregate(&updates, &weights)?;
            for j in 0..n {
                let mut want = 0.0;
                for (id, u) in &updates {
                    want += weights[id] * u.values()[j];
                }
                worst = worst.max((got.values()[j] - want).abs());
            }
        }

        // a single always-selected client is plain SGD over its shard
        let arch = MlpDenoiser { hidden: vec![6], time_features: 1, ..Default::default() };
        let sched = build_linear_schedule(&DiffusionConfig { steps: 20, ..Default::default() })?;
        let data = make_gaussian_mixture(40, &[vec![0.0, 0.0], vec![1.0, 1.0]], 0.2, seed)?;
        let cfg = FedConfig { clients: 1, per_round: 1, local_epochs: 2, lr: 0.05, batch_size: 8, seed, ..Default::default() };
        let clients = make_clients(vec![data], seed);
        let mut fed = arch.init_params(seed)?;
        let mut direct = fed.clone();
        for round in 0..3 {
            fed = run_round_vanilla(&fed, &clients, &cfg, &arch, &sched, round)?.0;
            direct = local_update(&direct, &clients[0], &cfg, &arch, &sched, round)?.params;
        }
        let exact = fed == direct;
        Ok((worst <= 1e-12 && exact, format!("max deviation {worst:.1e}, single-client replay exact: {exact}")))
    })
}

pub fn partition_family(seed: u64) -> FamilyResult {
    timed("partition", || {
        let k = 10;
        let per_label = 5000;
        let labels = 10;
        let points = vec![vec![0.0]; per_label * labels];
        let label_ids = (0..per_label * labels).map(|i| i / per_label).collect();
        let data = LabeledDataset::new(points, label_ids, labels)?;
        let mut problems = Vec::new();
        for level in [1u32, 3, 5] {
            let s = 1usize << (level - 1);
            let small = per_label / (s + k - 1);
            let expected: Vec<usize> = (0..k).map(|i| if i + 1 < k { small } else { per_label - (k - 1) * small }).collect();
            if skew_counts(per_label, k, level) != expected {
                problems.push(format!("skew{level} formula"));
            }
            let shards = partition_indices(&data, &PartitionSpec { parts: k, mode: PartitionMode::Skew(level), seed })?;
            for l in 0..labels {
                let counts: Vec<usize> = shards.iter().map(|sh| sh.iter().filter(|&&i| i / per_label == l).count()).collect();
                if counts != expected {
                    problems.push(format!("skew{level} label {l}"));
                }
            }
        }
        let shards = partition_indices(&data, &PartitionSpec { parts: k, mode: PartitionMode::NonIid, seed })?;
        for l in 0..labels {
            let owners = shards.iter().filter(|sh| sh.iter().any(|&i| i / per_label == l)).count();
            if owners != 1 {
                problems.push(format!("non_iid label {l} split over {owners} shards"));
            }
        }
        let three = skew_counts(per_label, k, 3);
        let detail = if problems.is_empty() {
            format!("skew3 per label {:?}", three)
        } else {
            problems.join("; ")
        };
        Ok((problems.is_empty(), detail))
    })
}

pub fn frechet_family(seed: u64) -> FamilyResult {
    timed("frechet", || {
        let mut rng = rng_from(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let d = rng.random_range(1..=4);
            let m: Vec<Vec<f64>> = (0..d).map(|_| normal_vec(&mut rng, d)).collect();
            let cov: Vec<Vec<f64>> = (0..d)
                .map(|i| (0..d).map(|j| (0..d).map(|k| m[i][k] * m[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 }).collect())
                .collect();
            let a = GaussianStats { mean: normal_vec(&mut rng, d), cov: cov.clone() };
            worst = worst.max(frechet_distance(&a, &a)?);
            let shift = normal_vec(&mut rng, d);
            let b = GaussianStats { mean: a.mean.iter().zip(&shift).map(|(x, s)| x + s).collect(), cov };
            let want: f64 = shift.iter().map(|s| s * s).sum();
            worst = worst.max((frechet_distance(&a, &b)? - want).abs());
        }
        let r = GaussianStats { mean: vec![0.0], cov: vec![vec![4.0]] };
        let g = GaussianStats { mean: vec![0.0], cov: vec![vec![1.0]] };
        let trace_term = 4.0 + 1.0 - 2.0 * trace_sqrt_product(&r, &g);
        worst = worst.max((trace_term - 1.0).abs());
        Ok((worst <= 1e-9, format!("max identity deviation {worst:.1e}")))
    })
}

pub fn contraction_family(seed: u64) -> FamilyResult {
    timed("contraction", || {
        let rates = [0.3, 0.5, 0.8];
        let centers = [[1.0, -1.0], [0.5, 2.0], [-2.0, 0.0]];
        let maps: Vec<Box<PointMap>> = rates
            .iter()
            .zip(centers)
            .map(|(&l, c)| Box::new(move |x: &[f64]| vec![l * (x[0] - c[0]) + c[0], l * (x[1] - c[1]) + c[1]]) as Box<PointMap>)
            .collect();
        let refs: Vec<&PointMap> = maps.iter().map(|m| m.as_ref()).collect();
        let weights = [0.2, 0.5, 0.3];
        let x0 = [6.0, -4.0];
        let exact = verify_contraction_bound(&refs, &weights, 0.0, &x0, 30, 1, seed)?;
        let noisy = verify_contraction_bound(&refs, &weights, 0.1, &x0, 30, 10_000, seed)?;
        let ok = exact.bound_holds == Some(true) && noisy.bound_holds == Some(true);
        Ok((ok, format!("L̄ = {:.4}, σ=0 and σ=0.1 bounds hold: {ok}", exact.aggregate_estimate)))
    })
}

pub fn run_all(opts: VerifyOptions) -> Vec<FamilyResult> {
    let s = opts.seed;
    vec![
        gradient_family(derive_seed(s, &[1])),
        quantizer_family(derive_seed(s, &[2]), opts.rounding),
        aggregation_family(derive_seed(s, &[3])),
        partition_family(derive_seed(s, &[4])),
        frechet_family(derive_seed(s, &[5])),
        contraction_family(derive_seed(s, &[6])),
    ]
}
