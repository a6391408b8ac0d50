//! Fréchet distance between Gaussian fits and the empirical contraction probe.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_step, NoiseModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, normal_vec, rng_from};

/// A map `R^d -> R^d` that can be shared across threads.
pub type PointMap<'a> = dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.cov[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d || self.cov.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("covariance is not {d}x{d}")));
        }
        for i in 0..d {
            for j in 0..i {
                if (self.cov[i][j] - self.cov[j][i]).abs() > 1e-10 {
                    return Err(Error::Data(format!("covariance asymmetric at ({i}, {j})")));
                }
            }
        }
        let eig = SymmetricEigen::new(self.cov_matrix()).eigenvalues;
        let scale = eig.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if let Some(v) = eig.iter().find(|&&v| v < -1e-10 * scale) {
            return Err(Error::Data(format!("covariance has negative eigenvalue {v}")));
        }
        Ok(())
    }
}

/// Sample mean and unbiased (n − 1) covariance.
pub fn fit_gaussian(samples: &[Vec<f64>]) -> Result<GaussianStats> {
    if samples.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Shape("samples have mixed dimensions".into()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..=i {
                cov[i][j] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..=i {
            cov[i][j] /= n - 1.0;
            cov[j][i] = cov[i][j];
        }
    }
    Ok(GaussianStats { mean, cov })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `Tr((Σ_r Σ_g)^{1/2})`, computed as the nuclear norm of `sqrt(Σ_r) sqrt(Σ_g)`.
/// Square roots of the eigenvalues of `sqrt(Σ_r) Σ_g sqrt(Σ_r)` lose half the
/// precision near singular covariances; singular values do not.
pub fn trace_sqrt_product(r: &GaussianStats, g: &GaussianStats) -> f64 {
    let m = sym_sqrt(&r.cov_matrix()) * sym_sqrt(&g.cov_matrix());
    m.svd(false, false).singular_values.sum()
}

/// `‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2(Σ_r Σ_g)^{1/2})`, clamped at zero.
pub fn frechet_distance(r: &GaussianStats, g: &GaussianStats) -> Result<f64> {
    if r.dim() != g.dim() {
        return Err(Error::Shape(format!(
            "dimensions {} and {} differ",
            r.dim(),
            g.dim()
        )));
    }
    r.validate()?;
    g.validate()?;
    let mean_term: f64 = r.mean.iter().zip(&g.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr_r: f64 = (0..r.dim()).map(|i| r.cov[i][i]).sum();
    let tr_g: f64 = (0..g.dim()).map(|i| g.cov[i][i]).sum();
    let fd = mean_term + tr_r + tr_g - 2.0 * trace_sqrt_product(r, g);
    Ok(fd.max(0.0))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest `‖f(x) − f(y)‖ / ‖x − y‖` over `pairs` random distinct pairs.
/// This is a lower bound on the true Lipschitz constant.
pub fn estimate_lipschitz(map: &PointMap, domain: &[Vec<f64>], pairs: usize, seed: u64) -> Result<f64> {
    if domain.len() < 2 {
        return Err(Error::Argument("need at least 2 domain samples".into()));
    }
    if domain.iter().all(|p| p == &domain[0]) {
        return Err(Error::Argument("all domain samples are identical".into()));
    }
    let images: Vec<Vec<f64>> = domain.par_iter().map(|x| map(x)).collect();
    let mut rng = rng_from(seed);
    let n = domain.len();
    let mut best = 0.0f64;
    let mut used = 0;
    let mut attempts = 0;
    while used < pairs.max(1) && attempts < 20 * pairs.max(1) {
        attempts += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let dx = dist(&domain[i], &domain[j]);
        if i == j || dx == 0.0 {
            continue;
        }
        used += 1;
        best = best.max(dist(&images[i], &images[j]) / dx);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionProbe {
    pub lipschitz_estimates: Vec<f64>,
    pub aggregate_estimate: f64,
    pub noise_std: f64,
    pub fixed_point: Option<Vec<f64>>,
    /// Mean over trials of `‖x_t − x*‖`, starting at `t = 0`.
    pub trajectory: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// `L̄^t‖x0 − x*‖ + σ/(1 − L̄)` per step.
    pub bound: Vec<f64>,
    pub bound_holds: Option<bool>,
    pub contractive: bool,
}

fn fixed_point(map: &PointMap, x0: &[f64], lip: f64) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    for _ in 0..1_000_000 {
        let next = map(&x);
        let step = dist(&next, &x);
        x = next;
        if !step.is_finite() || norm(&x) > 1e12 {
            return Err(Error::ContractionViolation(lip));
        }
        if step <= 1e-13 * (1.0 + norm(&x)) {
            return Ok(x);
        }
    }
    Err(Error::ContractionViolation(lip))
}

fn probe_domain(x0: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed);
    let scale = norm(x0).max(1.0);
    let mut pts = vec![x0.to_vec()];
    for _ in 0..63 {
        let z = normal_vec(&mut rng, x0.len());
        pts.push(x0.iter().zip(&z).map(|(a, b)| a + scale * b).collect());
    }
    pts
}

/// Iterates `x_{t+1} = Σ_i w_i ε_i(x_t) + ζ_t` with `ζ_t ~ N(0, σ²/d·I)` and
/// checks `E‖x_t − x*‖ ≤ L̄^t‖x_0 − x*‖ + σ/(1 − L̄)` at every step, allowing
/// three standard errors of Monte Carlo slack.
pub fn verify_contraction_bound(
    maps: &[&PointMap],
    weights: &[f64],
    sigma: f64,
    x0: &[f64],
    steps: usize,
    trials: usize,
    seed: u64,
) -> Result<ContractionProbe> {
    if maps.is_empty() || maps.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} maps but {} weights",
            maps.len(),
            weights.len()
        )));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Argument("weights must be non-negative and sum to 1".into()));
    }
    if !(sigma >= 0.0) || trials == 0 {
        return Err(Error::Argument("need sigma >= 0 and at least one trial".into()));
    }
    let d = x0.len();
    let domain = probe_domain(x0, derive_seed(seed, &[u64::MAX]));
    let estimates = maps
        .iter()
        .enumerate()
        .map(|(i, m)| estimate_lipschitz(*m, &domain, 2000, derive_seed(seed, &[u64::MAX - 1, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    for (i, l) in estimates.iter().enumerate() {
        if *l >= 1.0 {
            warn!("map {i} is not contractive on the probe domain (L = {l:.4})");
        }
    }
    let lbar: f64 = estimates.iter().zip(weights).map(|(l, w)| l * w).sum();
    if lbar >= 1.0 {
        return Err(Error::ContractionViolation(lbar));
    }

    let averaged = |x: &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; d];
        for (m, w) in maps.iter().zip(weights) {
            for (a, v) in acc.iter_mut().zip(m(x)) {
                *a += w * v;
            }
        }
        acc
    };
    let xstar = fixed_point(&averaged, x0, lbar)?;
    let noise_scale = if d > 0 { sigma / (d as f64).sqrt() } else { 0.0 };

    let runs: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = rng_from(derive_seed(seed, &[trial as u64]));
            let mut x = x0.to_vec();
            let mut out = Vec::with_capacity(steps + 1);
            out.push(dist(&x, &xstar));
            for _ in 0..steps {
                x = averaged(&x);
                if noise_scale > 0.0 {
                    for (xi, z) in x.iter_mut().zip(normal_vec(&mut rng, d)) {
                        *xi += noise_scale * z;
                    }
                }
                out.push(dist(&x, &xstar));
            }
            out
        })
        .collect();

    let n = trials as f64;
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut std_errors = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let mean = runs.iter().map(|r| r[t]).sum::<f64>() / n;
        let se = if trials > 1 {
            let var = runs.iter().map(|r| (r[t] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        trajectory.push(mean);
        std_errors.push(se);
    }
    let d0 = dist(x0, &xstar);
    let bound: Vec<f64> = (0..=steps)
        .map(|t| lbar.powi(t as i32) * d0 + sigma / (1.0 - lbar))
        .collect();
    let holds = trajectory
        .iter()
        .zip(&std_errors)
        .zip(&bound)
        .all(|((m, se), b)| m - 3.0 * se <= b + 1e-9);

    Ok(ContractionProbe {
        lipschitz_estimates: estimates,
        aggregate_estimate: lbar,
        noise_std: sigma,
        fixed_point: Some(xstar),
        trajectory,
        std_errors,
        bound,
        bound_holds: Some(holds),
        contractive: true,
    })
}

/// Measures the Lipschitz constant of one deterministic reverse step at
/// `t = T` of a trained denoiser. Diagnostic only.
pub fn probe_trained_model(
    model: &dyn NoiseModel,
    sched: &NoiseSchedule,
    samples: usize,
    seed: u64,
) -> Result<ContractionProbe> {
    let t = sched.steps();
    let d = model.data_dim();
    let zero = vec![0.0; d];
    let map = |x: &[f64]| -> Vec<f64> {
        let eps = model.predict(x, t, sched).expect("dimension checked by caller");
        reverse_step(x, t, &eps, sched, &zero).expect("timestep in range")
    };
    let mut rng = rng_from(seed);
    let domain: Vec<Vec<f64>> = (0..samples.max(2)).map(|_| normal_vec(&mut rng, d)).collect();
    let lip = estimate_lipschitz(&map, &domain, 4 * samples.max(2), derive_seed(seed, &[1]))?;
    let contractive = lip < 1.0;
    let (fixed, trajectory) = if contractive {
        let xstar = fixed_point(&map, &domain[0], lip)?;
        let mut x = domain[0].clone();
        let mut traj = vec![dist(&x, &xstar)];
        for _ in 0..32 {
            x = map(&x);
            traj.push(dist(&x, &xstar));
        }
        (Some(xstar), traj)
    } else {
        (None, Vec::new())
    };
    Ok(ContractionProbe {
        lipschitz_estimates: vec![lip],
        aggregate_estimate: lip,
        noise_std: sched.sigma(t),
        fixed_point: fixed,
        trajectory,
        std_errors: Vec::new(),
        bound: Vec::new(),
        bound_holds: None,
        contractive,
    })
}
