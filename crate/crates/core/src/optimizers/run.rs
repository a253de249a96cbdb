//! Optimization loops and their per-iteration records.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, global_norm, AdamConfig, AdamState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulatorKind {
    Model,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    /// Ground-truth evaluation period in iterations; 0 disables it.
    pub eval_every: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            adam: AdamConfig::default(),
            steps: 300,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub population: usize,
    pub elite_fraction: f64,
    /// Starting mean; `None` means the zero vector.
    pub initial_mean: Option<Vec<f64>>,
    /// Starting per-dimension std; a single entry is used for every dimension.
    pub initial_sigma: Vec<f64>,
    /// Exponential smoothing factor: weight of the elite statistics against the
    /// previous distribution. 1 replaces the distribution with the elite fit.
    pub smoothing: f64,
    pub steps: usize,
    pub simulator: SimulatorKind,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 20,
            elite_fraction: 0.1,
            initial_mean: None,
            initial_sigma: vec![0.5],
            smoothing: 0.1,
            steps: 300,
            simulator: SimulatorKind::Model,
            seed: 0,
            eval_every: 0,
        }
    }
}

pub const SIGMA_FLOOR: f64 = 1e-6;

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        ((self.elite_fraction * self.population as f64).floor() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.elite_count() > self.population {
            return Err(Error::config(
                "CEM population must be positive and at least the elite count",
            ));
        }
        if !(0.0..=1.0).contains(&self.elite_fraction) {
            return Err(Error::config("elite fraction must lie in [0, 1]"));
        }
        if !(self.smoothing > 0.0 && self.smoothing <= 1.0) {
            return Err(Error::config("evolution smoothing must lie in (0, 1]"));
        }
        if self.initial_sigma.is_empty() || self.initial_sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("initial sigma entries must be positive"));
        }
        Ok(())
    }

    fn start(&self, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let mu = self.initial_mean.clone().unwrap_or_else(|| vec![0.0; dim]);
        let sigma = match self.initial_sigma.len() {
            1 => vec![self.initial_sigma[0]; dim],
            _ => self.initial_sigma.clone(),
        };
        if mu.len() != dim || sigma.len() != dim {
            return Err(Error::config(format!(
                "CEM start does not match {dim} design parameters"
            )));
        }
        Ok((mu, sigma))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptIteration {
    pub iteration: usize,
    pub phi: Vec<f64>,
    pub j_model: Option<f64>,
    pub j_oracle: Option<f64>,
    /// Pre-clip gradient norm for gradient descent, sampling std norm for CEM.
    pub grad_norm_or_sigma: f64,
    pub evals: usize,
    pub wallclock_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptRunRecord {
    pub iterations: Vec<OptIteration>,
    /// Design with the best objective seen; the initial design if nothing was evaluated.
    pub best_phi: Vec<f64>,
    pub best_value: Option<f64>,
    /// Design after the last update.
    pub final_phi: Vec<f64>,
    /// Message of the error that stopped the run early.
    pub failure: Option<String>,
}

impl OptRunRecord {
    fn new(phi: &[f64]) -> Self {
        OptRunRecord {
            best_phi: phi.to_vec(),
            final_phi: phi.to_vec(),
            ..Default::default()
        }
    }

    fn offer(&mut self, phi: &[f64], value: f64) {
        if value.is_finite() && self.best_value.map_or(true, |b| value > b) {
            self.best_value = Some(value);
            self.best_phi = phi.to_vec();
        }
    }

    pub fn total_evals(&self) -> usize {
        self.iterations.iter().map(|r| r.evals).sum()
    }

    /// Best objective seen up to and including each iteration.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.iterations
            .iter()
            .map(|r| {
                let v = r.j_model.or(r.j_oracle).unwrap_or(f64::NEG_INFINITY);
                best = best.max(v);
                best
            })
            .collect()
    }

    /// `iteration,j_model,j_oracle,grad_norm_or_sigma,evals,wallclock_ms`; timing is
    /// written as 0 when `timing` is off so the file is reproducible.
    pub fn write_csv(&self, path: &Path, timing: bool) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut body =
            String::from("iteration,j_model,j_oracle,grad_norm_or_sigma,evals,wallclock_ms\n");
        for r in &self.iterations {
            body.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration,
                opt(r.j_model),
                opt(r.j_oracle),
                r.grad_norm_or_sigma,
                r.evals,
                if timing { r.wallclock_ms } else { 0.0 }
            ));
        }
        f.write_all(body.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// A finished or aborted run. `error` is set when a step failed; the record
/// keeps every iteration completed before it.
#[derive(Debug)]
pub struct OptOutcome {
    pub record: OptRunRecord,
    pub error: Option<Error>,
}

impl OptOutcome {
    pub fn into_result(self) -> Result<OptRunRecord> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.record),
        }
    }
}

fn elapsed_ms(start: &Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Adam ascent on `objective`, which returns the value and gradient to maximize.
/// `oracle`, when given, scores the current design every `eval_every` iterations.
pub fn gd_optimize<F, O>(
    initial: &[f64],
    mut objective: F,
    oracle: Option<O>,
    cfg: &GdConfig,
) -> OptOutcome
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    O: Fn(&[f64]) -> Result<f64>,
{
    let mut record = OptRunRecord::new(initial);
    if let Err(e) = cfg.adam.validate() {
        return OptOutcome {
            record,
            error: Some(e),
        };
    }
    let start = Instant::now();
    let mut phi = initial.to_vec();
    let mut state = AdamState::new(phi.len());
    for it in 0..cfg.steps {
        let step = (|| {
            let (value, grad) = objective(&phi)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: "objective",
                    phase: "gradient descent",
                });
            }
            let j_oracle = match &oracle {
                Some(o) if cfg.eval_every > 0 && it % cfg.eval_every == 0 => Some(o(&phi)?),
                _ => None,
            };
            let norm = global_norm(&grad);
            let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
            let before = phi.clone();
            adam_step(&mut phi, &ascent, &mut state, &cfg.adam)?;
            Ok((before, value, j_oracle, norm))
        })();
        match step {
            Ok((before, value, j_oracle, norm)) => {
                record.offer(&before, value);
                record.iterations.push(OptIteration {
                    iteration: it,
                    phi: before,
                    j_model: Some(value),
                    j_oracle,
                    grad_norm_or_sigma: norm,
                    evals: 1,
                    wallclock_ms: elapsed_ms(&start),
                });
                record.final_phi = phi.clone();
            }
            Err(e) => {
                record.failure = Some(e.to_string());
                return OptOutcome {
                    record,
                    error: Some(e),
                };
            }
        }
    }
    OptOutcome {
        record,
        error: None,
    }
}

/// Indices of the `count` largest values, ties going to the lower index.
/// Non-finite values rank below every finite one.
pub fn select_elites(values: &[f64], count: usize) -> Vec<usize> {
    let key = |v: f64| if v.is_finite() { v } else { f64::NEG_INFINITY };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Keys are never NaN, and `partial_cmp` treats -0.0 and 0.0 as a tie.
    idx.sort_by(|&a, &b| {
        key(values[b])
            .partial_cmp(&key(values[a]))
            .expect("non-NaN keys")
            .then(a.cmp(&b))
    });
    idx.truncate(count);
    idx
}

/// Refits the sampling distribution to the elites of one population.
pub fn cem_step(
    mu: &[f64],
    sigma: &[f64],
    values: &[f64],
    samples: &[Vec<f64>],
    cfg: &CemConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != samples.len() || samples.is_empty() {
        return Err(Error::config("CEM needs one objective value per sample"));
    }
    let elites = select_elites(values, cfg.elite_count().min(samples.len()));
    let k = elites.len() as f64;
    let beta = cfg.smoothing;
    let mut new_mu = vec![0.0; mu.len()];
    let mut new_sigma = vec![0.0; mu.len()];
    for d in 0..mu.len() {
        let mean = elites.iter().map(|&e| samples[e][d]).sum::<f64>() / k;
        let var = elites
            .iter()
            .map(|&e| (samples[e][d] - mean).powi(2))
            .sum::<f64>()
            / k;
        new_mu[d] = beta * mean + (1.0 - beta) * mu[d];
        new_sigma[d] = (beta * var.sqrt() + (1.0 - beta) * sigma[d]).max(SIGMA_FLOOR);
    }
    Ok((new_mu, new_sigma))
}

/// Candidate `j` of iteration `it`, drawn from its own counter-based stream.
pub fn cem_sample(seed: u64, it: usize, j: usize, mu: &[f64], sigma: &[f64]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((it as u64) << 32) | j as u64);
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            m + s * z
        })
        .collect()
}

/// Cross-entropy maximization of `objective` over `dim` parameters.
///
/// Population members are scored in parallel. A member whose rollout diverges
/// scores `-inf`; any other error stops the run.
pub fn cem_optimize<F, O>(
    dim: usize,
    objective: F,
    oracle: Option<O>,
    cfg: &CemConfig,
) -> OptOutcome
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
    O: Fn(&[f64]) -> Result<f64>,
{
    let (mut mu, mut sigma) = match cfg.start(dim) {
        Ok(s) => s,
        Err(e) => {
            return OptOutcome {
                record: OptRunRecord::new(&vec![0.0; dim]),
                error: Some(e),
            }
        }
    };
    let mut record = OptRunRecord::new(&mu);
    let start = Instant::now();
    for it in 0..cfg.steps {
        let samples: Vec<Vec<f64>> = (0..cfg.population)
            .map(|j| cem_sample(cfg.seed, it, j, &mu, &sigma))
            .collect();
        let scored: Result<Vec<f64>> = samples
            .par_iter()
            .map(|s| match objective(s) {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) | Err(Error::Divergence { .. }) | Err(Error::NonFinite { .. }) => {
                    Ok(f64::NEG_INFINITY)
                }
                Err(e) => Err(e),
            })
            .collect();
        let step = scored.and_then(|values| {
            let best = select_elites(&values, 1)[0];
            let (m, s) = cem_step(&mu, &sigma, &values, &samples, cfg)?;
            let j_oracle = match &oracle {
                Some(o) if cfg.eval_every > 0 && it % cfg.eval_every == 0 => {
                    Some(o(&samples[best])?)
                }
                _ => None,
            };
            Ok((values[best], best, m, s, j_oracle))
        });
        match step {
            Ok((value, best, m, s, j_oracle)) => {
                record.offer(&samples[best], value);
                let (j_model, j_oracle) = match cfg.simulator {
                    SimulatorKind::Model => (Some(value), j_oracle),
                    SimulatorKind::Oracle => (None, Some(value)),
                };
                mu = m;
                sigma = s;
                record.iterations.push(OptIteration {
                    iteration: it,
                    phi: samples[best].clone(),
                    j_model,
                    j_oracle,
                    grad_norm_or_sigma: global_norm(&sigma),
                    evals: cfg.population,
                    wallclock_ms: elapsed_ms(&start),
                });
                record.final_phi = mu.clone();
            }
            Err(e) => {
                record.failure = Some(e.to_string());
                return OptOutcome {
                    record,
                    error: Some(e),
                };
            }
        }
    }
    OptOutcome {
        record,
        error: None,
    }
}
