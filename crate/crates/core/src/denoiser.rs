//! Dense noise-prediction network with hand-derived backpropagation.
//!
//! Parameters live in a single flat [`ParamVector`]; the network shape is
//! described by [`MlpDenoiser`]. The time step enters the network as `t/T`
//! followed by `time_features` sine/cosine pairs at octave frequencies.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, NoiseModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flattened trainable parameters plus the tensor layout that carves them up.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<TensorSpec>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<TensorSpec>) -> Result<Self> {
        let mut next = 0;
        for spec in &layout {
            if spec.offset != next {
                return Err(Error::Shape(format!(
                    "tensor `{}` starts at {} but previous tensor ended at {next}",
                    spec.name, spec.offset
                )));
            }
            next += spec.numel();
        }
        if next != values.len() {
            return Err(Error::Shape(format!(
                "layout covers {next} values, vector holds {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("parameter {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<TensorSpec>) -> Self {
        let n = layout.iter().map(TensorSpec::numel).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self::zeros(other.layout.clone())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn tensor(&self, i: usize) -> &[f64] {
        let s = &self.layout[i];
        &self.values[s.offset..s.offset + s.numel()]
    }

    /// Replaces the values while keeping the layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    pub fn l2_distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

/// Architecture of the dense denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDenoiser {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
}

impl Default for MlpDenoiser {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            time_features: 4,
        }
    }
}

impl MlpDenoiser {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(
                "denoiser needs at least one non-empty hidden layer".into(),
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + 1 + 2 * self.time_features
    }

    /// `[input, hidden.., data_dim]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim());
        dims.extend(&self.hidden);
        dims.push(self.data_dim);
        dims
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let dims = self.layer_dims();
        let mut out = Vec::new();
        let mut offset = 0;
        for (l, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push(TensorSpec {
                name: format!("layers.{l}.weight"),
                shape: vec![fan_out, fan_in],
                offset,
            });
            offset += fan_in * fan_out;
            out.push(TensorSpec {
                name: format!("layers.{l}.bias"),
                shape: vec![fan_out],
                offset,
            });
            offset += fan_out;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(TensorSpec::numel).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        self.validate()?;
        let layout = self.layout();
        let mut values = vec![0.0; layout.iter().map(TensorSpec::numel).sum()];
        let mut rng = rng_from(seed);
        for spec in layout.iter().filter(|s| s.shape.len() == 2) {
            let (fan_out, fan_in) = (spec.shape[0], spec.shape[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut values[spec.offset..spec.offset + spec.numel()] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        ParamVector::new(values, layout)
    }

    pub fn time_embedding(&self, t: usize, steps: usize) -> Vec<f64> {
        let s = t as f64 / steps as f64;
        let mut out = Vec::with_capacity(1 + 2 * self.time_features);
        out.push(s);
        for j in 0..self.time_features {
            let w = PI * (1u64 << j) as f64 * s;
            out.push(w.sin());
            out.push(w.cos());
        }
        out
    }

    fn check_params(&self, theta: &ParamVector) -> Result<()> {
        if theta.layout() != self.layout().as_slice() {
            return Err(Error::Shape(
                "parameter layout does not match architecture".into(),
            ));
        }
        Ok(())
    }

    /// Forward pass that keeps every layer output (`acts[0]` is the input).
    fn forward(&self, theta: &[f64], input: Vec<f64>, pre: &mut Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let dims = self.layer_dims();
        let n_layers = dims.len() - 1;
        let mut acts = Vec::with_capacity(dims.len());
        acts.push(input);
        pre.clear();
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let w = &theta[offset..offset + fan_in * fan_out];
            let b = &theta[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let a_prev = &acts[l];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(a_prev).fold(b[o], |acc, (wi, ai)| acc + wi * ai)
                })
                .collect();
            let a = if l + 1 < n_layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            acts.push(a);
        }
        acts
    }

    fn input_features(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        if x.len() != self.data_dim {
            return Err(Error::Shape(format!(
                "point has dimension {}, denoiser expects {}",
                x.len(),
                self.data_dim
            )));
        }
        sched.check_t(t)?;
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x);
        input.extend(self.time_embedding(t, sched.steps()));
        Ok(input)
    }

    /// `ε_θ(x, t)`.
    pub fn predict_noise(
        &self,
        theta: &ParamVector,
        x: &[f64],
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        self.check_params(theta)?;
        let input = self.input_features(x, t, sched)?;
        let mut pre = Vec::new();
        let mut acts = self.forward(theta.values(), input, &mut pre);
        Ok(acts.pop().expect("at least one layer"))
    }

    /// Mean over the batch of `‖noise − ε_θ(x_t, t)‖²` and its exact gradient.
    ///
    /// Batch elements are reduced in a canonical order (sorted by `t`, then
    /// the clean point, then the noise), so the result is bitwise independent
    /// of the order in which the batch was assembled.
    pub fn loss_and_grad(
        &self,
        theta: &ParamVector,
        batch: &TrainBatch,
        sched: &NoiseSchedule,
    ) -> Result<(f64, ParamVector)> {
        self.check_params(theta)?;
        batch.validate(sched)?;
        let n = batch.len();
        let inv_n = 1.0 / n as f64;
        let dims = self.layer_dims();
        let n_layers = dims.len() - 1;
        let params = theta.values();
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let mut pre = Vec::new();

        for i in batch.canonical_order() {
            let x_t = forward_sample(&batch.x0s[i], batch.ts[i], &batch.noises[i], sched)?;
            let input = self.input_features(&x_t, batch.ts[i], sched)?;
            let acts = self.forward(params, input, &mut pre);
            let out = &acts[n_layers];
            let mut delta: Vec<f64> = out
                .iter()
                .zip(&batch.noises[i])
                .map(|(o, e)| o - e)
                .collect();
            loss += delta.iter().map(|r| r * r).sum::<f64>();
            for d in &mut delta {
                *d *= 2.0 * inv_n;
            }

            // Walk layers backwards; offsets are recomputed from the end.
            let mut end = params.len();
            for l in (0..n_layers).rev() {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let b_off = end - fan_out;
                let w_off = b_off - fan_in * fan_out;
                end = w_off;
                let a_prev = &acts[l];
                for o in 0..fan_out {
                    let d = delta[o];
                    grad[b_off + o] += d;
                    let g_row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (g, a) in g_row.iter_mut().zip(a_prev) {
                        *g += d * a;
                    }
                }
                if l > 0 {
                    let w = &params[w_off..b_off];
                    let mut prev = vec![0.0; fan_in];
                    for o in 0..fan_out {
                        let d = delta[o];
                        for (p, wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                            *p += wi * d;
                        }
                    }
                    for (j, p) in prev.iter_mut().enumerate() {
                        *p *= self.activation.derivative(pre[l - 1][j], acts[l][j]);
                    }
                    delta = prev;
                }
            }
        }
        Ok((loss * inv_n, theta.with_values(grad)?))
    }
}

/// A denoiser bound to concrete parameters.
#[derive(Debug, Clone)]
pub struct Denoiser<'a> {
    pub arch: &'a MlpDenoiser,
    pub params: &'a ParamVector,
}

impl NoiseModel for Denoiser<'_> {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        self.arch.predict_noise(self.params, x, t, sched)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainBatch {
    pub x0s: Vec<Vec<f64>>,
    pub ts: Vec<usize>,
    pub noises: Vec<Vec<f64>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn push(&mut self, x0: Vec<f64>, t: usize, noise: Vec<f64>) {
        self.x0s.push(x0);
        self.ts.push(t);
        self.noises.push(noise);
    }

    fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Argument("empty training batch".into()));
        }
        if self.x0s.len() != self.ts.len() || self.noises.len() != self.ts.len() {
            return Err(Error::Shape("batch fields have unequal lengths".into()));
        }
        for &t in &self.ts {
            sched.check_t(t)?;
        }
        Ok(())
    }

    fn canonical_order(&self) -> Vec<usize> {
        fn lex(a: &[f64], b: &[f64]) -> Ordering {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or_else(|| a.len().cmp(&b.len()))
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&i, &j| {
            self.ts[i]
                .cmp(&self.ts[j])
                .then_with(|| lex(&self.x0s[i], &self.x0s[j]))
                .then_with(|| lex(&self.noises[i], &self.noises[j]))
        });
        idx
    }
}

/// `grad + μ(θ − θ_global)`, the gradient of the proximal penalty `μ/2‖θ − θ_global‖²`.
pub fn prox_grad(
    grad: &ParamVector,
    theta: &ParamVector,
    theta_global: &ParamVector,
    mu: f64,
) -> Result<ParamVector> {
    grad.check_layout(theta)?;
    grad.check_layout(theta_global)?;
    if !(mu >= 0.0) {
        return Err(Error::Argument(format!("proximal coefficient {mu} must be >= 0")));
    }
    if mu == 0.0 {
        return Ok(grad.clone());
    }
    let values = grad
        .values()
        .iter()
        .zip(theta.values())
        .zip(theta_global.values())
        .map(|((g, t), tg)| g + mu * (t - tg))
        .collect();
    grad.with_values(values)
}

/// `θ − η·grad`.
pub fn sgd_step(theta: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    theta.check_layout(grad)?;
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::Argument(format!("learning rate {lr} must be finite and >= 0")));
    }
    let mut out = theta.clone();
    for (v, g) in out.values_mut().iter_mut().zip(grad.values()) {
        *v -= lr * g;
    }
    if out.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("SGD step produced non-finite parameters".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_linear_schedule, DiffusionConfig};
    use crate::rng::normal_vec;
    use approx::assert_abs_diff_eq;

    fn sched() -> NoiseSchedule {
        build_linear_schedule(&DiffusionConfig {
            steps: 50,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_arch(act: Activation) -> MlpDenoiser {
        MlpDenoiser {
            data_dim: 2,
            hidden: vec![5, 4],
            activation: act,
            time_features: 2,
        }
    }

    fn random_batch(n: usize, dim: usize, steps: usize, seed: u64) -> TrainBatch {
        let mut rng = rng_from(seed);
        let mut b = TrainBatch::default();
        for _ in 0..n {
            let t = rng.random_range(1..=steps);
            b.push(normal_vec(&mut rng, dim), t, normal_vec(&mut rng, dim));
        }
        b
    }

    fn fd_relative_error(arch: &MlpDenoiser, theta: &ParamVector, batch: &TrainBatch, s: &NoiseSchedule) -> f64 {
        let (_, g) = arch.loss_and_grad(theta, batch, s).unwrap();
        let h = 1e-6;
        let mut num = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut plus = theta.values().to_vec();
            let mut minus = theta.values().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let lp = arch.loss_and_grad(&theta.with_values(plus).unwrap(), batch, s).unwrap().0;
            let lm = arch.loss_and_grad(&theta.with_values(minus).unwrap(), batch, s).unwrap().0;
            num.push((lp - lm) / (2.0 * h));
        }
        let diff: f64 = g.values().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na: f64 = g.values().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    #[test]
    fn layout_partitions_params() {
        let arch = MlpDenoiser::default();
        let layout = arch.layout();
        let mut next = 0;
        for s in &layout {
            assert_eq!(s.offset, next);
            next += s.numel();
        }
        assert_eq!(next, arch.num_params());
        assert_eq!(arch.input_dim(), 2 + 1 + 8);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = MlpDenoiser::default();
        let a = arch.init_params(11).unwrap();
        assert_eq!(a, arch.init_params(11).unwrap());
        assert_ne!(a, arch.init_params(12).unwrap());
        for (i, s) in a.layout().iter().enumerate() {
            if s.shape.len() == 1 {
                assert!(a.tensor(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_weight_variance_matches_uniform_moments() {
        let arch = MlpDenoiser {
            data_dim: 2,
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            time_features: 4,
        };
        let p = arch.init_params(5).unwrap();
        let spec_idx = p.layout().iter().position(|s| s.name == "layers.1.weight").unwrap();
        let w = p.tensor(spec_idx);
        assert!(w.len() >= 10_000);
        // Var of U(-a, a) = a²/3 = 2 / (fan_in + fan_out)
        let want = 2.0 / 256.0;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!((var - want).abs() / want < 0.1, "var {var} vs {want}");
    }

    #[test]
    fn zero_network_predicts_zero() {
        let arch = MlpDenoiser::default();
        let s = sched();
        let theta = ParamVector::zeros(arch.layout());
        assert_eq!(arch.predict_noise(&theta, &[3.0, -1.0], 7, &s).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(arch.predict_noise(&theta, &[1.0], 7, &s), Err(Error::Shape(_))));
        assert!(matches!(arch.predict_noise(&theta, &[1.0, 1.0], 0, &s), Err(Error::Index { .. })));
    }

    #[test]
    fn hand_computed_affine_map() {
        // data_dim 2, no time features, one hidden layer of width 2 with relu.
        let arch = MlpDenoiser {
            data_dim: 2,
            hidden: vec![2],
            activation: Activation::Relu,
            time_features: 0,
        };
        // input = (x1, x2, t/T); hidden = relu(W0 input + b0); out = W1 hidden + b1
        let w0 = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let b0 = [1.0, 2.0];
        let w1 = [2.0, 1.0, -1.0, 3.0];
        let b1 = [0.5, -0.5];
        let values: Vec<f64> = w0.iter().chain(&b0).chain(&w1).chain(&b1).copied().collect();
        let theta = ParamVector::new(values, arch.layout()).unwrap();
        let s = sched();
        let out = arch.predict_noise(&theta, &[0.5, 1.0], 10, &s).unwrap();
        // hidden = (1.5, 3.0); out = (2*1.5 + 1*3 + 0.5, -1.5 + 9 - 0.5)
        assert_eq!(out, vec![6.5, 7.0]);
    }

    #[test]
    fn outputs_finite_for_large_inputs() {
        let arch = MlpDenoiser::default();
        let theta = arch.init_params(1).unwrap();
        let out = arch.predict_noise(&theta, &[1e6, -1e6], 1, &sched()).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = sched();
        for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu)] {
            let arch = small_arch(act);
            let theta = arch.init_params(seed).unwrap();
            // non-zero biases so every parameter sees a gradient
            let values: Vec<f64> = theta.values().iter().enumerate().map(|(i, v)| v + 0.01 * (i as f64).sin()).collect();
            let theta = theta.with_values(values).unwrap();
            let batch = random_batch(2, 2, 50, seed + 10);
            let err = fd_relative_error(&arch, &theta, &batch, &s);
            assert!(err <= 1e-5, "{act}: relative error {err}");
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        // Zero network and zero noise: prediction equals target everywhere.
        let arch = small_arch(Activation::Tanh);
        let theta = ParamVector::zeros(arch.layout());
        let mut b = TrainBatch::default();
        b.push(vec![1.0, 2.0], 3, vec![0.0, 0.0]);
        b.push(vec![-1.0, 0.5], 9, vec![0.0, 0.0]);
        let (loss, g) = arch.loss_and_grad(&theta, &b, &sched()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_rejected() {
        let arch = small_arch(Activation::Tanh);
        let theta = arch.init_params(0).unwrap();
        let r = arch.loss_and_grad(&theta, &TrainBatch::default(), &sched());
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn duplicated_batch_keeps_mean() {
        let arch = small_arch(Activation::Tanh);
        let theta = arch.init_params(3).unwrap();
        let s = sched();
        let b = random_batch(6, 2, 50, 4);
        let mut d = b.clone();
        for i in 0..b.len() {
            d.push(b.x0s[i].clone(), b.ts[i], b.noises[i].clone());
        }
        let (l1, g1) = arch.loss_and_grad(&theta, &b, &s).unwrap();
        let (l2, g2) = arch.loss_and_grad(&theta, &d, &s).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-12 * l1.abs().max(1.0));
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_order_does_not_matter() {
        let arch = small_arch(Activation::Tanh);
        let theta = arch.init_params(3).unwrap();
        let s = sched();
        let b = random_batch(9, 2, 50, 8);
        let mut r = TrainBatch::default();
        for i in (0..b.len()).rev() {
            r.push(b.x0s[i].clone(), b.ts[i], b.noises[i].clone());
        }
        assert_eq!(arch.loss_and_grad(&theta, &b, &s).unwrap(), arch.loss_and_grad(&theta, &r, &s).unwrap());
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(
            v.to_vec(),
            vec![TensorSpec {
                name: "w".into(),
                shape: vec![v.len()],
                offset: 0,
            }],
        )
        .unwrap()
    }

    #[test]
    fn prox_gradient_formula() {
        let g = pv(&[0.0, 0.0]);
        let theta = pv(&[1.0, -2.0]);
        let global = pv(&[0.0, 0.0]);
        assert_eq!(prox_grad(&g, &theta, &global, 0.1).unwrap().values(), &[0.1, -0.2]);
        let g = pv(&[0.3, 0.4]);
        assert_eq!(prox_grad(&g, &theta, &global, 0.0).unwrap(), g);
        assert_eq!(prox_grad(&g, &theta, &theta, 5.0).unwrap(), g);
        assert!(prox_grad(&g, &pv(&[1.0]), &global, 1.0).is_err());
    }

    #[test]
    fn sgd_step_formula() {
        let theta = pv(&[1.0, 1.0]);
        assert_eq!(sgd_step(&theta, &pv(&[2.0, -2.0]), 0.5).unwrap().values(), &[0.0, 2.0]);
        assert_eq!(sgd_step(&theta, &pv(&[0.0, 0.0]), 0.5).unwrap(), theta);
        let g1 = pv(&[0.25, -0.5]);
        let g2 = pv(&[0.5, 0.125]);
        let two = sgd_step(&sgd_step(&theta, &g1, 0.5).unwrap(), &g2, 0.5).unwrap();
        let one = sgd_step(&theta, &pv(&[0.75, -0.375]), 0.5).unwrap();
        assert_eq!(two, one);
        assert!(sgd_step(&theta, &pv(&[1.0]), 0.1).is_err());
    }

    #[test]
    fn proximal_pull_shrinks_distance() {
        let global = pv(&[0.5, -1.0, 2.0]);
        let zero = pv(&[0.0; 3]);
        for (lr, mu) in [(0.1, 1.0), (0.5, 3.9), (1.0, 0.01)] {
            let mut theta = pv(&[3.0, 1.0, -4.0]);
            for _ in 0..5 {
                let before = theta.l2_distance(&global);
                let g = prox_grad(&zero, &theta, &global, mu).unwrap();
                theta = sgd_step(&theta, &g, lr).unwrap();
                assert!(theta.l2_distance(&global) < before);
            }
        }
    }
}
