//! Forward noising, reverse sampling and the linear variance schedule.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T`, and `alpha_bar(0) == 1`
//! stands for clean data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_vec, rng_from};

/// Choice of the reverse-process standard deviation `σ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t = sqrt(β_t)`
    #[default]
    Beta,
    /// `σ_t = sqrt(β̃_t)` with `β̃_t = (1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t`
    BetaTilde,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SigmaMode::Beta),
            "beta_tilde" => Ok(SigmaMode::BetaTilde),
            other => Err(Error::Config(format!("unknown sigma_mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SigmaMode::Beta => "beta",
            SigmaMode::BetaTilde => "beta_tilde",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.beta_start) || !in_unit(self.beta_end) {
            return Err(Error::Config(format!(
                "beta bounds must lie in (0, 1), got [{}, {}]",
                self.beta_start, self.beta_end
            )));
        }
        if self.beta_start > self.beta_end {
            return Err(Error::Config(format!(
                "beta_start {} exceeds beta_end {}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Precomputed variance schedule. Index `t - 1` of each vector holds step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma_mode: SigmaMode,
}

/// Builds betas equally spaced from `beta_start` to `beta_end`.
pub fn build_linear_schedule(cfg: &DiffusionConfig) -> Result<NoiseSchedule> {
    cfg.validate()?;
    let n = cfg.steps;
    let betas: Vec<f64> = if n == 1 {
        vec![cfg.beta_start]
    } else {
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    cfg.beta_end
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(n);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
        sigma_mode: cfg.sigma_mode,
    })
}

impl NoiseSchedule {
    /// Number of timesteps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        match self.sigma_mode {
            SigmaMode::Beta => self.beta(t).sqrt(),
            SigmaMode::BetaTilde => {
                let tilde =
                    (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t);
                tilde.sqrt()
            }
        }
    }
}

/// Anything that predicts the noise component of a noisy point.
pub trait NoiseModel: Sync {
    fn data_dim(&self) -> usize;
    fn predict(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>>;
}

fn check_same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Closed-form forward marginal: `sqrt(ᾱ_t)·x0 + sqrt(1 - ᾱ_t)·noise`.
pub fn forward_sample(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_same_len(x0, noise, "forward_sample")?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
}

/// One ancestral step `x_t -> x_{t-1}` in the ε-parameterisation.
pub fn reverse_step(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &NoiseSchedule,
    z: &[f64],
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_same_len(x_t, eps_hat, "reverse_step eps")?;
    check_same_len(x_t, z, "reverse_step z")?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let sigma = sched.sigma(t);
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((x, e), zi)| (x - coef * e) * inv_sqrt_alpha + sigma * zi)
        .collect())
}

/// Runs the reverse chain from `x_T ~ N(0, I)` down to `x_{stop}`.
pub fn sample_until(
    model: &dyn NoiseModel,
    sched: &NoiseSchedule,
    dim: usize,
    stop: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = rng_from(seed);
    let mut x = normal_vec(&mut rng, dim);
    let zero = vec![0.0; dim];
    for t in (stop + 1..=sched.steps()).rev() {
        let eps = model.predict(&x, t, sched)?;
        x = if t > 1 {
            let z = normal_vec(&mut rng, dim);
            reverse_step(&x, t, &eps, sched, &z)?
        } else {
            reverse_step(&x, t, &eps, sched, &zero)?
        };
    }
    Ok(x)
}

/// Draws `n` samples of dimension `dim`. Point `i` uses its own RNG stream,
/// so results do not depend on thread scheduling.
pub fn sample(
    model: &dyn NoiseModel,
    sched: &NoiseSchedule,
    n: usize,
    dim: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    (0..n)
        .into_par_iter()
        .map(|i| sample_until(model, sched, dim, 0, derive_seed(seed, &[i as u64])))
        .collect()
}
