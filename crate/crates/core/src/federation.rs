//! Simulated federated training (FedAvg over Poisson-sampled DP-SGD
//! clients) and reward allocation from released scores.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dp::{
    checkpoint_schedule, steps_for, train, AccountantState, CheckpointStore, DpError, PrivacyParams, TrainConfig,
    TrainRngs,
};
use crate::models::ModelState;
use crate::release::ReleasedScores;
use crate::valuation::format_float;

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("cannot split {samples} samples over {clients} clients")]
    TooManyClients { clients: usize, samples: usize },
    #[error("need at least one client")]
    NoClients,
    #[error("dirichlet concentration must be positive, got {0}")]
    Alpha(f64),
    #[error("partition left a client empty after {0} draws")]
    EmptyClient(usize),
    #[error("client models differ in architecture")]
    SpecMismatch,
    #[error("aggregation weights must be finite, non-negative and not all zero")]
    Weights,
    #[error("released scores lack sample {0}")]
    MissingScore(u64),
    #[error("reward pool must be finite and non-negative, got {0}")]
    Pool(f64),
    #[error("client {client}: {source}")]
    Client { client: usize, source: DpError },
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error("client csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartitionStrategy {
    Iid,
    Dirichlet { alpha: f64 },
}

/// Exact assignment of sample ids to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub strategy: PartitionStrategy,
    pub clients: Vec<Vec<u64>>,
}

impl ClientPartition {
    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_of(&self) -> BTreeMap<u64, usize> {
        self.clients
            .iter()
            .enumerate()
            .flat_map(|(c, ids)| ids.iter().map(move |&id| (id, c)))
            .collect()
    }

    pub fn client_dataset(&self, dataset: &Dataset, client: usize) -> Dataset {
        let keep: BTreeSet<u64> = self.clients[client].iter().copied().collect();
        let mut d = dataset.retain_ids(&keep);
        d.samples.iter_mut().for_each(|s| s.client = client as u32);
        d
    }
}

/// Splits `counts` by proportions `p`: floors, then the remainder to the
/// largest fractional parts (lower index first on ties).
fn apportion(n: usize, p: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub const MAX_PARTITION_DRAWS: usize = 100;

/// `Iid` shuffles and cuts into near-equal contiguous blocks. `Dirichlet`
/// draws per-class client proportions from Dirichlet(α·1) (normalized
/// Gamma(α, 1) draws) and redraws while any client is empty.
pub fn partition_dataset(
    dataset: &Dataset,
    n_clients: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<ClientPartition, FederationError> {
    if n_clients == 0 {
        return Err(FederationError::NoClients);
    }
    if n_clients > dataset.len() {
        return Err(FederationError::TooManyClients {
            clients: n_clients,
            samples: dataset.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ids: Vec<u64> = dataset.samples.iter().map(|s| s.id).collect();
    match strategy {
        PartitionStrategy::Iid => {
            ids.shuffle(&mut rng);
            let sizes = apportion(ids.len(), &vec![1.0 / n_clients as f64; n_clients]);
            let mut clients = Vec::with_capacity(n_clients);
            let mut rest = ids.as_slice();
            for s in sizes {
                let (head, tail) = rest.split_at(s);
                let mut c = head.to_vec();
                c.sort_unstable();
                clients.push(c);
                rest = tail;
            }
            Ok(ClientPartition { strategy, clients })
        }
        PartitionStrategy::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(FederationError::Alpha(alpha));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|_| FederationError::Alpha(alpha))?;
            let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
            for s in &dataset.samples {
                by_class.entry(s.label).or_default().push(s.id);
            }
            for _ in 0..MAX_PARTITION_DRAWS {
                let mut clients = vec![Vec::new(); n_clients];
                for members in by_class.values() {
                    let mut members = members.clone();
                    members.shuffle(&mut rng);
                    let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                    let total: f64 = draws.iter().sum();
                    let p: Vec<f64> = if total > 0.0 {
                        draws.iter().map(|d| d / total).collect()
                    } else {
                        vec![1.0 / n_clients as f64; n_clients]
                    };
                    let mut rest = members.as_slice();
                    for (c, k) in apportion(members.len(), &p).into_iter().enumerate() {
                        let (head, tail) = rest.split_at(k);
                        clients[c].extend_from_slice(head);
                        rest = tail;
                    }
                }
                if clients.iter().all(|c| !c.is_empty()) {
                    clients.iter_mut().for_each(|c| c.sort_unstable());
                    return Ok(ClientPartition { strategy, clients });
                }
            }
            Err(FederationError::EmptyClient(MAX_PARTITION_DRAWS))
        }
    }
}

/// Parameter-wise mean with weights normalized to sum 1.
pub fn fedavg_aggregate(states: &[ModelState], weights: &[f64]) -> Result<ModelState, FederationError> {
    let first = states.first().ok_or(FederationError::NoClients)?;
    if weights.len() != states.len()
        || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
        || weights.iter().sum::<f64>() <= 0.0
    {
        return Err(FederationError::Weights);
    }
    if states.iter().any(|s| s.spec() != first.spec() || !s.params.same_layout(&first.params)) {
        return Err(FederationError::SpecMismatch);
    }
    let total: f64 = weights.iter().sum();
    let mut params = first.params.clone();
    params.data_mut().iter_mut().for_each(|v| *v = 0.0);
    for (s, w) in states.iter().zip(weights) {
        if *w > 0.0 {
            params.axpy(w / total, &s.params);
        }
    }
    Ok(first.with_params(params))
}

/// Per-round local training settings shared by all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub epochs: u32,
    pub lr: f64,
    pub sample_rate: f64,
    #[serde(default)]
    pub privacy: Option<PrivacyParams>,
}

#[derive(Debug, Clone)]
pub struct FederatedOutput {
    pub state: ModelState,
    /// Global model after evenly spaced rounds.
    pub checkpoints: CheckpointStore,
    pub accountants: Vec<AccountantState>,
    pub sigma: Option<f64>,
}

/// Seed of client `c`'s sampling and noise streams; client 0 uses the run seed.
pub fn client_seed(seed: u64, client: usize) -> u64 {
    seed.wrapping_add((client as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Each round every client trains locally from the global state on its own
/// persistent streams; the global state is the sample-count-weighted FedAvg.
/// Private clients calibrate σ over all their rounds.
pub fn federated_train(
    initial: &ModelState,
    dataset: &Dataset,
    partition: &ClientPartition,
    rounds: u32,
    local: &LocalConfig,
    checkpoints: usize,
    seed: u64,
) -> Result<FederatedOutput, FederationError> {
    let data: Vec<Dataset> = (0..partition.n_clients())
        .map(|c| partition.client_dataset(dataset, c))
        .collect();
    let weights: Vec<f64> = data.iter().map(|d| d.len() as f64).collect();
    let per_round = steps_for(local.epochs, local.sample_rate);
    let total_steps = per_round * u64::from(rounds);
    let privacy = match &local.privacy {
        Some(p) => {
            let sigma = if total_steps == 0 && p.noise_multiplier.is_none() {
                0.0
            } else {
                p.resolve_sigma(local.sample_rate, total_steps)?
            };
            Some(PrivacyParams {
                noise_multiplier: Some(sigma),
                ..p.clone()
            })
        }
        None => None,
    };
    let sigma = privacy.as_ref().and_then(|p| p.noise_multiplier);
    let cfg = TrainConfig {
        epochs: local.epochs,
        lr: local.lr,
        sample_rate: local.sample_rate,
        checkpoints: 1,
        privacy,
    };
    let mut streams: Vec<(TrainRngs, AccountantState)> = (0..partition.n_clients())
        .map(|c| (TrainRngs::from_seed(client_seed(seed, c)), AccountantState::new()))
        .collect();
    let schedule = checkpoint_schedule(u64::from(rounds), checkpoints);
    let mut store = CheckpointStore::new(checkpoints);
    let mut global = initial.clone();
    let mut next = schedule.iter().peekable();
    while next.peek().is_some_and(|&&s| s == 0) {
        store.push(0, global.clone())?;
        next.next();
    }
    for round in 1..=u64::from(rounds) {
        let locals: Vec<ModelState> = streams
            .par_iter_mut()
            .zip(data.par_iter())
            .enumerate()
            .map(|(c, ((rngs, acc), d))| {
                train(&global, d, &cfg, rngs, acc, None)
                    .map(|o| o.state)
                    .map_err(|source| FederationError::Client { client: c, source })
            })
            .collect::<Result<_, _>>()?;
        global = fedavg_aggregate(&locals, &weights)?;
        while next.peek().is_some_and(|&&s| s == round) {
            store.push(round, global.clone())?;
            next.next();
        }
    }
    Ok(FederatedOutput {
        state: global,
        checkpoints: store,
        accountants: streams.into_iter().map(|(_, a)| a).collect(),
        sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub n_samples: usize,
    pub metric: String,
    pub score_sum_released: f64,
    pub reward: f64,
    /// Release ε charged to this client's samples.
    pub epsilon_spent: f64,
}

/// Proportional rewards: `pool · max(sᵢ, 0) / Σⱼ max(sⱼ, 0)` where `sᵢ` is the
/// client's sum of released scores; an all-zero total splits equally.
pub fn allocate_rewards(
    released: &ReleasedScores,
    partition: &ClientPartition,
    pool: f64,
) -> Result<Vec<ClientReport>, FederationError> {
    if !(pool >= 0.0 && pool.is_finite()) {
        return Err(FederationError::Pool(pool));
    }
    let by_id: BTreeMap<u64, f64> = released.scores.iter().map(|s| (s.sample_id, s.value)).collect();
    let mut sums = Vec::with_capacity(partition.n_clients());
    for ids in &partition.clients {
        let mut s = 0.0;
        for id in ids {
            s += by_id.get(id).ok_or(FederationError::MissingScore(*id))?;
        }
        sums.push(s);
    }
    let floored: Vec<f64> = sums.iter().map(|s| s.max(0.0)).collect();
    let total: f64 = floored.iter().sum();
    let n = partition.n_clients() as f64;
    Ok(partition
        .clients
        .iter()
        .enumerate()
        .map(|(c, ids)| ClientReport {
            client_id: c,
            n_samples: ids.len(),
            metric: released.metric.to_string(),
            score_sum_released: sums[c],
            reward: if total > 0.0 { pool * floored[c] / total } else { pool / n },
            epsilon_spent: released.epsilon * ids.len() as f64,
        })
        .collect())
}

/// `client_id,n_samples,metric,score_sum_released,reward,epsilon_spent`.
pub fn write_client_csv<W: Write>(reports: &[ClientReport], w: W) -> Result<(), FederationError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["client_id", "n_samples", "metric", "score_sum_released", "reward", "epsilon_spent"])?;
    for r in reports {
        out.write_record([
            r.client_id.to_string(),
            r.n_samples.to_string(),
            r.metric.clone(),
            format_float(r.score_sum_released),
            format_float(r.reward),
            format_float(r.epsilon_spent),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
