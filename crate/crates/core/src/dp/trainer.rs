use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::accountant::{calibrate_sigma, AccountantError, AccountantState};
use crate::autodiff::{grad_params, AutodiffError, ParamVector};
use crate::data::{Dataset, Sample};
use crate::models::{ModelError, ModelState};

#[derive(Debug, thiserror::Error)]
pub enum DpError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("checkpoint at step {step} precedes step {last}")]
    CheckpointOrder { step: u64, last: u64 },
    #[error("checkpoint store is full (capacity {0})")]
    CheckpointFull(usize),
}

/// Privacy settings for one training run. When both `epsilon` and
/// `noise_multiplier` are present the noise multiplier wins and `epsilon`
/// is only reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyParams {
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub delta: f64,
    pub clip_norm: f64,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
}

impl PrivacyParams {
    pub fn with_epsilon(epsilon: f64, delta: f64, clip_norm: f64) -> Self {
        Self {
            epsilon: Some(epsilon),
            delta,
            clip_norm,
            noise_multiplier: None,
        }
    }

    pub fn with_sigma(noise_multiplier: f64, delta: f64, clip_norm: f64) -> Self {
        Self {
            epsilon: None,
            delta,
            clip_norm,
            noise_multiplier: Some(noise_multiplier),
        }
    }

    pub fn validate(&self) -> Result<(), DpError> {
        let bad = |m: String| Err(DpError::Config(m));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        match (self.epsilon, self.noise_multiplier) {
            (None, None) => bad("privacy needs epsilon or noise_multiplier".into()),
            (Some(e), _) if !(e > 0.0 && e.is_finite()) => bad(format!("epsilon must be positive, got {e}")),
            (_, Some(s)) if !(s >= 0.0 && s.is_finite()) => bad(format!("noise_multiplier must be >= 0, got {s}")),
            _ => Ok(()),
        }
    }

    /// Noise multiplier for a run of `steps` steps at rate `q`.
    pub fn resolve_sigma(&self, q: f64, steps: u64) -> Result<f64, DpError> {
        self.validate()?;
        match (self.noise_multiplier, self.epsilon) {
            (Some(s), _) => Ok(s),
            (None, Some(e)) => Ok(calibrate_sigma(e, self.delta, q, steps)?),
            (None, None) => unreachable!("validated"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr: f64,
    /// Poisson inclusion probability per step.
    pub sample_rate: f64,
    /// Number of evenly spaced snapshots to keep (K).
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default)]
    pub privacy: Option<PrivacyParams>,
}

fn default_checkpoints() -> usize {
    10
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(DpError::Config(format!("sample_rate must lie in (0, 1], got {}", self.sample_rate)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DpError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(p) = &self.privacy {
            p.validate()?;
        }
        Ok(())
    }
}

/// Steps for `epochs` passes at rate `q`: `epochs · ⌈1/q⌉`.
pub fn steps_for(epochs: u32, q: f64) -> u64 {
    u64::from(epochs) * (1.0 / q).ceil() as u64
}

/// `K` evenly spaced step indices in `1..=steps`, the last equal to `steps`.
/// Indices repeat when `steps < K`.
pub fn checkpoint_schedule(steps: u64, k: usize) -> Vec<u64> {
    let k = k as u64;
    (1..=k).map(|i| (i * steps).div_ceil(k)).collect()
}

/// Independent sampling and noise streams, keyed by the run seed. Parameter
/// initialization uses stream 0 of the same key.
#[derive(Debug, Clone)]
pub struct TrainRngs {
    pub sampling: ChaCha20Rng,
    pub noise: ChaCha20Rng,
}

impl TrainRngs {
    pub fn from_seed(seed: u64) -> Self {
        let mut sampling = ChaCha20Rng::seed_from_u64(seed);
        sampling.set_stream(1);
        let mut noise = ChaCha20Rng::seed_from_u64(seed);
        noise.set_stream(2);
        Self { sampling, noise }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub state: ModelState,
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    capacity: usize,
    entries: Vec<Checkpoint>,
}

impl CheckpointStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
        }
    }

    pub fn from_states(states: Vec<(u64, ModelState)>) -> Result<Self, DpError> {
        let mut store = Self::new(states.len());
        for (step, state) in states {
            store.push(step, state)?;
        }
        Ok(store)
    }

    /// Steps must be nondecreasing.
    pub fn push(&mut self, step: u64, state: ModelState) -> Result<(), DpError> {
        if self.entries.len() == self.capacity {
            return Err(DpError::CheckpointFull(self.capacity));
        }
        if let Some(last) = self.entries.last() {
            if step < last.step {
                return Err(DpError::CheckpointOrder { step, last: last.step });
            }
        }
        self.entries.push(Checkpoint { step, state });
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Checkpoint] {
        &self.entries
    }

    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|c| c.step).collect()
    }
}

/// Returns `grad · min(1, C/‖grad‖₂)`.
pub fn clip_per_sample(grad: &ParamVector, clip_norm: f64) -> ParamVector {
    let mut g = grad.clone();
    clip_in_place(&mut g, clip_norm);
    g
}

pub fn clip_in_place(grad: &mut ParamVector, clip_norm: f64) {
    let norm = grad.norm_l2();
    if norm > clip_norm {
        grad.scale(clip_norm / norm);
    }
}

/// Indices included by independent Bernoulli(`q`) draws.
pub fn poisson_sample(n: usize, q: f64, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).filter(|_| rng.random::<f64>() < q).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mechanism {
    /// Plain SGD with the same Poisson batches and denominator.
    Off,
    Gaussian { sigma: f64, clip_norm: f64 },
}

const CHUNK: usize = 8;

/// Sum of (clipped) per-sample gradients, in a fixed association order.
fn gradient_sum(state: &ModelState, samples: &[Sample], batch: &[usize], clip: Option<f64>) -> Result<ParamVector, DpError> {
    let layout = state.params.layout().clone();
    let partials: Vec<ParamVector> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ParamVector::zeros(layout.clone());
            for &i in chunk {
                let s = &samples[i];
                let mut g = grad_params(state.model.as_ref(), &state.params, &s.image, s.label)?;
                if let Some(c) = clip {
                    clip_in_place(&mut g, c);
                }
                acc.axpy(1.0, &g);
            }
            Ok(acc)
        })
        .collect::<Result<_, DpError>>()?;
    let mut total = ParamVector::zeros(layout);
    for p in &partials {
        total.axpy(1.0, p);
    }
    Ok(total)
}

/// One step `θ ← θ − lr · (Σᵢ clip(gᵢ) + N(0, σ²C²I)) / (q·n)` over the
/// given batch, where `n = samples.len()`. Private steps append one ledger
/// entry.
#[allow(clippy::too_many_arguments)]
pub fn dp_sgd_step(
    state: &ModelState,
    samples: &[Sample],
    batch: &[usize],
    mechanism: Mechanism,
    sample_rate: f64,
    lr: f64,
    noise_rng: &mut impl Rng,
    accountant: &mut AccountantState,
    phase: Option<&str>,
) -> Result<ModelState, DpError> {
    if samples.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    let clip = match mechanism {
        Mechanism::Off => None,
        Mechanism::Gaussian { clip_norm, .. } => Some(clip_norm),
    };
    let mut update = gradient_sum(state, samples, batch, clip)?;
    if let Mechanism::Gaussian { sigma, clip_norm } = mechanism {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma * clip_norm)
                .map_err(|e| DpError::Config(format!("noise distribution: {e}")))?;
            for v in update.data_mut() {
                *v += normal.sample(noise_rng);
            }
        }
    }
    let denom = sample_rate * samples.len() as f64;
    let mut params = state.params.clone();
    params.axpy(-lr / denom, &update);
    if let Mechanism::Gaussian { sigma, .. } = mechanism {
        accountant.record(sample_rate, sigma, 1, phase);
    }
    Ok(state.with_params(params))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub state: ModelState,
    pub checkpoints: CheckpointStore,
    pub steps: u64,
    /// Noise multiplier used, when private.
    pub sigma: Option<f64>,
}

/// Trains for `config.epochs · ⌈1/q⌉` Poisson-sampled steps, snapshotting
/// at [`checkpoint_schedule`]. A private config without a noise multiplier
/// is calibrated to its target ε over this run alone.
pub fn train(
    state: &ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    rngs: &mut TrainRngs,
    accountant: &mut AccountantState,
    phase: Option<&str>,
) -> Result<TrainOutput, DpError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(DpError::EmptyDataset);
    }
    let q = config.sample_rate;
    let steps = steps_for(config.epochs, q);
    let mechanism = match &config.privacy {
        None => Mechanism::Off,
        Some(p) => {
            if p.delta >= 1.0 / dataset.len() as f64 {
                log::warn!("delta {} is not below 1/n = {}", p.delta, 1.0 / dataset.len() as f64);
            }
            let sigma = if steps == 0 && p.noise_multiplier.is_none() {
                0.0
            } else {
                p.resolve_sigma(q, steps)?
            };
            Mechanism::Gaussian {
                sigma,
                clip_norm: p.clip_norm,
            }
        }
    };
    let schedule = checkpoint_schedule(steps, config.checkpoints);
    let mut store = CheckpointStore::new(config.checkpoints);
    let mut current = state.clone();
    let mut next = schedule.iter().peekable();
    while next.peek().is_some_and(|&&s| s == 0) {
        store.push(0, current.clone())?;
        next.next();
    }
    for t in 1..=steps {
        let batch = poisson_sample(dataset.len(), q, &mut rngs.sampling);
        current = dp_sgd_step(
            &current,
            &dataset.samples,
            &batch,
            mechanism,
            q,
            config.lr,
            &mut rngs.noise,
            accountant,
            phase,
        )?;
        if !current.params.data().iter().all(|v| v.is_finite()) {
            return Err(DpError::Config(format!("parameters diverged at step {t}; lower lr")));
        }
        while next.peek().is_some_and(|&&s| s == t) {
            store.push(t, current.clone())?;
            next.next();
        }
    }
    let sigma = match mechanism {
        Mechanism::Off => None,
        Mechanism::Gaussian { sigma, .. } => Some(sigma),
    };
    Ok(TrainOutput {
        state: current,
        checkpoints: store,
        steps,
        sigma,
    })
}

/// [`train`] with fresh streams from `seed` and a fresh ledger.
pub fn train_seeded(
    state: &ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<(TrainOutput, AccountantState), DpError> {
    let mut rngs = TrainRngs::from_seed(seed);
    let mut acc = AccountantState::new();
    let out = train(state, dataset, config, &mut rngs, &mut acc, None)?;
    Ok((out, acc))
}
