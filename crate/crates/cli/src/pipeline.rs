//! Experiment orchestration: each `run_*` returns the report plus side files
//! in memory; [`write_outcome`] puts them on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::time::Instant;

use fedval_core::consistency::{compare_selections, pearson, topk_ids, topk_overlap, ScoreView};
use fedval_core::data::{load_cifar_bin, load_idx, synth_dataset, Dataset};
use fedval_core::dp::{
    calibrate_sigma_schedule, convert_rdp_to_dp, steps_for, train, train_seeded, AccountantState, LedgerEntry,
    PrivacyParams, TrainConfig, TrainOutput, TrainRngs,
};
use fedval_core::federation::{allocate_rewards, federated_train, partition_dataset, write_client_csv, LocalConfig};
use fedval_core::models::{accuracy, init_model, ModelState};
use fedval_core::release::{dp_variance_query, release_scores, MechanismTag, ReleaseBudget, ReleasedScores};
use fedval_core::valuation::{score_samples, Metric, ScoreTable, ScoringOptions};
use fedval_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::config::{CompareColumn, DatasetConfig, ExperimentConfig};
use crate::report::{canonical_string, Report};
use crate::PipelineError;

trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError>;
}

impl<T, E: Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Stage {
            stage,
            message: e.to_string(),
        })
    }
}

/// Command-line switches that change what a run reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Flags {
    /// Stages after the release read only released scores.
    pub released_only: bool,
    /// Report release ε added to the training ε.
    pub compose_with_training: bool,
}

/// Test seams. `after_release` may mutate the raw score table once the
/// release stage has finished.
#[derive(Default)]
pub struct Hooks<'a> {
    pub after_release: Option<&'a dyn Fn(&mut ScoreTable)>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    /// Side files relative to the output directory.
    pub files: BTreeMap<String, Vec<u8>>,
    /// Wall-clock seconds per stage; kept out of the report so reports stay
    /// byte-identical across runs.
    pub timings: BTreeMap<String, f64>,
}

impl Outcome {
    pub fn report_text(&self) -> Result<String, PipelineError> {
        self.report.to_canonical_string().stage("report")
    }
}

pub fn write_outcome(outcome: &Outcome, dir: &Path) -> Result<(), PipelineError> {
    let io = |path: &Path, e: std::io::Error| PipelineError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let report = dir.join("report.json");
    std::fs::write(&report, outcome.report_text()?).map_err(|e| io(&report, e))?;
    for (name, bytes) in &outcome.files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| io(&p, e))?;
    }
    let t = dir.join("timings.json");
    let text = canonical_string(&outcome.timings).stage("report")?;
    std::fs::write(&t, text).map_err(|e| io(&t, e))
}

struct Clock(BTreeMap<String, f64>);

impl Clock {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.0.insert(stage.to_owned(), start.elapsed().as_secs_f64());
        out
    }
}

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut it = parts.into_iter();
    let mut first = it.next().expect("at least one part");
    for d in it {
        first.classes = first.classes.max(d.classes);
        first.samples.extend(d.samples);
    }
    for (i, s) in first.samples.iter_mut().enumerate() {
        s.id = i as u64;
    }
    first
}

/// Training and held-out sets. Without test files, a seeded
/// `test_fraction` split is held out before anything else happens.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data, PipelineError> {
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(train_images, train_labels).stage("load")?;
            match (test_images, test_labels) {
                (Some(i), Some(l)) => (train, load_idx(i, l).stage("load")?),
                _ => split(train, cfg),
            }
        }
        DatasetConfig::CifarBin { train, test } => {
            let tr = concat(train.iter().map(load_cifar_bin).collect::<Result<_, _>>().stage("load")?);
            if test.is_empty() {
                split(tr, cfg)
            } else {
                (tr, concat(test.iter().map(load_cifar_bin).collect::<Result<_, _>>().stage("load")?))
            }
        }
        DatasetConfig::Synthetic(spec) => split(synth_dataset(spec, cfg.data_seed()).stage("load")?, cfg),
    };
    let train = match cfg.subset {
        Some(n) => train.take(n),
        None => train,
    };
    if train.is_empty() || test.is_empty() {
        return Err(PipelineError::Stage {
            stage: "load",
            message: format!("empty split: {} train, {} test samples", train.len(), test.len()),
        });
    }
    if train.input_shape != test.input_shape {
        return Err(PipelineError::Stage {
            stage: "load",
            message: "train and test image shapes differ".into(),
        });
    }
    Ok(Data { train, test })
}

fn split(all: Dataset, cfg: &ExperimentConfig) -> (Dataset, Dataset) {
    all.split(cfg.test_fraction, cfg.data_seed())
}

fn initial_model(cfg: &ExperimentConfig, data: &Data) -> Result<ModelState, PipelineError> {
    let classes = data.train.classes.max(data.test.classes);
    init_model(cfg.model.spec(data.train.input_shape, classes), cfg.seed).stage("model")
}

/// Noise level and spend of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct PrivacySummary {
    pub sigma: f64,
    pub delta: f64,
    pub clip_norm: f64,
    pub target_epsilon: Option<f64>,
    pub epsilon: f64,
    pub ledger: Vec<LedgerEntry>,
}

fn privacy_summary(p: &PrivacyParams, sigma: f64, acc: &AccountantState) -> Result<Option<PrivacySummary>, PipelineError> {
    if acc.is_empty() {
        return Ok(None);
    }
    Ok(Some(PrivacySummary {
        sigma,
        delta: p.delta,
        clip_norm: p.clip_norm,
        target_epsilon: p.epsilon,
        epsilon: convert_rdp_to_dp(acc, p.delta).stage("accountant")?,
        ledger: acc.summary(),
    }))
}

#[derive(Debug, Clone, Serialize)]
struct TrainSummary {
    n_train: usize,
    n_test: usize,
    classes: usize,
    param_count: usize,
    steps: u64,
    checkpoint_steps: Vec<u64>,
    train_accuracy: f64,
    test_accuracy: f64,
    privacy: Option<PrivacySummary>,
}

struct Trained {
    out: TrainOutput,
    summary: TrainSummary,
}

fn train_stage(cfg: &ExperimentConfig, data: &Data, clock: &mut Clock) -> Result<Trained, PipelineError> {
    let init = initial_model(cfg, data)?;
    let tc = cfg.train_config(cfg.train.epochs);
    let (out, accountant) = clock.time("train", || train_seeded(&init, &data.train, &tc, cfg.seed)).stage("train")?;
    let privacy = match (&cfg.privacy, out.sigma) {
        (Some(p), Some(s)) => privacy_summary(p, s, &accountant)?,
        _ => None,
    };
    let summary = TrainSummary {
        n_train: data.train.len(),
        n_test: data.test.len(),
        classes: init.spec().classes,
        param_count: init.params.len(),
        steps: out.steps,
        checkpoint_steps: out.checkpoints.steps(),
        train_accuracy: accuracy(&out.state, &data.train.samples).stage("evaluate")?,
        test_accuracy: accuracy(&out.state, &data.test.samples).stage("evaluate")?,
        privacy,
    };
    Ok(Trained { out, summary })
}

fn checkpoint_bytes(state: &ModelState) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    state.write_checkpoint(&mut buf).stage("checkpoint")?;
    Ok(buf)
}

pub fn run_train(cfg: &ExperimentConfig, flags: Flags) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let mut clock = Clock(BTreeMap::new());
    let data = clock.time("load", || load_data(cfg))?;
    let t = train_stage(cfg, &data, &mut clock)?;
    let files = BTreeMap::from([("final.ckpt".to_owned(), checkpoint_bytes(&t.out.state)?)]);
    #[derive(Serialize)]
    struct R {
        train: TrainSummary,
        checkpoint: &'static str,
    }
    let results = R {
        train: t.summary,
        checkpoint: "final.ckpt",
    };
    Ok(Outcome {
        report: Report::new("train", cfg, &flags, &results).stage("report")?,
        files,
        timings: clock.0,
    })
}

fn scoring_options(cfg: &ExperimentConfig, sigma: Option<f64>) -> ScoringOptions {
    ScoringOptions {
        vog_mode: cfg.scoring.vog_mode(),
        plis_sigma: sigma.filter(|s| *s > 0.0).unwrap_or(1.0),
        nested: cfg.scoring.nested,
    }
}

#[derive(Debug, Clone, Serialize)]
struct MetricSummary {
    raw_min: f64,
    raw_mean: f64,
    raw_max: f64,
}

fn score_summary(table: &ScoreTable) -> BTreeMap<Metric, MetricSummary> {
    table
        .metrics()
        .into_iter()
        .map(|m| {
            let raw = &table.column(m).expect("listed").raw;
            let s = MetricSummary {
                raw_min: raw.iter().copied().fold(f64::INFINITY, f64::min),
                raw_mean: raw.iter().sum::<f64>() / raw.len() as f64,
                raw_max: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            (m, s)
        })
        .collect()
}

fn table_csv(table: &ScoreTable) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf).stage("score")?;
    Ok(buf)
}

struct Scored {
    trained: Trained,
    table: ScoreTable,
    scored: usize,
}

fn score_stage(cfg: &ExperimentConfig, data: &Data, clock: &mut Clock) -> Result<Scored, PipelineError> {
    let trained = train_stage(cfg, data, clock)?;
    let samples = match cfg.scoring.subset {
        Some(n) => &data.train.samples[..n.min(data.train.len())],
        None => &data.train.samples[..],
    };
    let opts = scoring_options(cfg, trained.out.sigma);
    let table = clock
        .time("score", || {
            score_samples(&trained.out.state, Some(&trained.out.checkpoints), samples, &cfg.metrics, &opts)
        })
        .stage("score")?;
    Ok(Scored {
        trained,
        table,
        scored: samples.len(),
    })
}

pub fn run_scoring(cfg: &ExperimentConfig, flags: Flags) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let mut clock = Clock(BTreeMap::new());
    let data = clock.time("load", || load_data(cfg))?;
    let s = score_stage(cfg, &data, &mut clock)?;
    #[derive(Serialize)]
    struct R {
        train: TrainSummary,
        scored_samples: usize,
        plis_sigma: f64,
        vog_mode: fedval_core::valuation::VogMode,
        metrics: BTreeMap<Metric, MetricSummary>,
        scores_csv: &'static str,
    }
    let results = R {
        plis_sigma: scoring_options(cfg, s.trained.out.sigma).plis_sigma,
        vog_mode: cfg.scoring.vog_mode(),
        metrics: score_summary(&s.table),
        scored_samples: s.scored,
        train: s.trained.summary,
        scores_csv: "scores.csv",
    };
    Ok(Outcome {
        report: Report::new("score", cfg, &flags, &results).stage("report")?,
        files: BTreeMap::from([("scores.csv".to_owned(), table_csv(&s.table)?)]),
        timings: clock.0,
    })
}

fn released_csv(r: &ReleasedScores) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    r.write_csv(&mut buf).stage("release")?;
    Ok(buf)
}

struct Released {
    scores: ReleasedScores,
    budget: ReleaseBudget,
    variance: Option<f64>,
}

/// Laplace release of the normalized column plus the optional variance query.
fn release_stage(cfg: &ExperimentConfig, table: &ScoreTable) -> Result<Released, PipelineError> {
    let r = &cfg.release;
    let col = table.column(r.metric).ok_or_else(|| {
        PipelineError::Config(format!("release metric {} is not among the computed metrics", r.metric))
    })?;
    let mut budget = ReleaseBudget::new(r.cap);
    let scores = release_scores(table.ids(), &col.normalized, r.metric, r.bound, r.epsilon, cfg.seed, &mut budget)
        .stage("release")?;
    let variance = match r.variance_epsilon {
        Some(e) => {
            budget
                .spend(e, MechanismTag::DpVariance, format!("variance:{}", r.metric))
                .stage("release")?;
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream(4);
            Some(dp_variance_query(&col.normalized, r.bound, e, r.variance_split, &mut rng).stage("release")?)
        }
        None => None,
    };
    Ok(Released {
        scores,
        budget,
        variance,
    })
}

#[derive(Debug, Clone, Serialize)]
struct ReleasedView {
    metric: Metric,
    epsilon_per_score: f64,
    bound: f64,
    mechanism: MechanismTag,
    seed_commitment: String,
    released_mean: f64,
    dp_variance: Option<f64>,
    topk: Vec<u64>,
    release_epsilon_total: f64,
}

fn released_view(rel: &Released, k: usize) -> Result<ReleasedView, PipelineError> {
    let s = &rel.scores;
    let values = s.values();
    Ok(ReleasedView {
        metric: s.metric,
        epsilon_per_score: s.epsilon,
        bound: s.bound,
        mechanism: s.mechanism,
        seed_commitment: s.seed_commitment.clone(),
        released_mean: values.iter().sum::<f64>() / values.len() as f64,
        dp_variance: rel.variance,
        topk: topk_ids(&s.ids(), &values, k.min(values.len())).stage("release")?,
        release_epsilon_total: rel.budget.total(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct RawDiagnostics {
    normalized_mean: f64,
    topk: Vec<u64>,
    topk_overlap_with_released: usize,
    /// `None` when either column has zero variance.
    pearson_raw_vs_released: Option<f64>,
}

fn raw_diagnostics(table: &ScoreTable, rel: &ReleasedScores, k: usize) -> Result<RawDiagnostics, PipelineError> {
    let col = &table.column(rel.metric).expect("released metric present").normalized;
    let k = k.min(col.len());
    let released = rel.values();
    Ok(RawDiagnostics {
        normalized_mean: col.iter().sum::<f64>() / col.len() as f64,
        topk: topk_ids(table.ids(), col, k).stage("diagnostics")?,
        topk_overlap_with_released: topk_overlap(table.ids(), col, &released, k).stage("diagnostics")?,
        pearson_raw_vs_released: pearson(col, &released).ok(),
    })
}

#[derive(Debug, Clone, Serialize)]
struct Composition {
    method: &'static str,
    training_epsilon: Option<f64>,
    release_epsilon: f64,
    total_epsilon_upper_bound: f64,
    delta: Option<f64>,
}

fn composition(train: &TrainSummary, budget: &ReleaseBudget) -> Composition {
    let te = train.privacy.as_ref().map(|p| p.epsilon);
    Composition {
        method: "simple additive upper bound over heterogeneous mechanisms",
        training_epsilon: te,
        release_epsilon: budget.total(),
        total_epsilon_upper_bound: te.unwrap_or(0.0) + budget.total(),
        delta: train.privacy.as_ref().map(|p| p.delta),
    }
}

pub fn run_release(cfg: &ExperimentConfig, flags: Flags) -> Result<Outcome, PipelineError> {
    run_release_with_hooks(cfg, flags, &Hooks::default())
}

pub fn run_release_with_hooks(cfg: &ExperimentConfig, flags: Flags, hooks: &Hooks) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let mut clock = Clock(BTreeMap::new());
    let data = clock.time("load", || load_data(cfg))?;
    let mut s = score_stage(cfg, &data, &mut clock)?;
    let scores_csv = table_csv(&s.table)?;
    let rel = clock.time("release", || release_stage(cfg, &s.table))?;
    if let Some(h) = hooks.after_release {
        h(&mut s.table);
    }
    #[derive(Serialize)]
    struct R {
        train: TrainSummary,
        released: ReleasedView,
        raw_diagnostics: Option<RawDiagnostics>,
        composition: Option<Composition>,
        scores_csv: &'static str,
        released_csv: &'static str,
    }
    let results = R {
        released: released_view(&rel, cfg.release.k)?,
        raw_diagnostics: if flags.released_only {
            None
        } else {
            Some(raw_diagnostics(&s.table, &rel.scores, cfg.release.k)?)
        },
        composition: flags.compose_with_training.then(|| composition(&s.trained.summary, &rel.budget)),
        train: s.trained.summary,
        scores_csv: "scores.csv",
        released_csv: "released.csv",
    };
    Ok(Outcome {
        report: Report::new("release", cfg, &flags, &results).stage("report")?,
        files: BTreeMap::from([
            ("scores.csv".to_owned(), scores_csv),
            ("released.csv".to_owned(), released_csv(&rel.scores)?),
        ]),
        timings: clock.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RemovalResult {
    pub criterion: String,
    pub removed: usize,
    pub removed_atypical: usize,
    pub removed_mislabeled: usize,
    pub remaining: usize,
    pub retrain_sample_rate: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Covers warmup and retraining.
    pub privacy: Option<PrivacySummary>,
}

/// Ids of the `n` samples a criterion removes.
fn removal_ids(criterion: &str, n: usize, table: &ScoreTable, train: &Dataset, seed: u64) -> Vec<u64> {
    if n == 0 {
        return Vec::new();
    }
    match criterion {
        "none" => Vec::new(),
        "random" => {
            let mut ids: Vec<u64> = train.samples.iter().map(|s| s.id).collect();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(5);
            ids.shuffle(&mut rng);
            ids.truncate(n);
            ids
        }
        "oracle_atypical" => {
            let flags: Vec<f64> = train.samples.iter().map(|s| f64::from(u8::from(s.atypical))).collect();
            let ids: Vec<u64> = train.samples.iter().map(|s| s.id).collect();
            topk_ids(&ids, &flags, n).expect("n within range")
        }
        m => {
            let metric: Metric = m.parse().expect("criterion is a metric");
            let col = &table.column(metric).expect("scored").normalized;
            topk_ids(table.ids(), col, n).expect("n within range")
        }
    }
}

/// Warmup on the full set, score, then for each criterion remove the
/// top `fraction` and resume training from the warmup state.
pub fn run_prune_retrain(cfg: &ExperimentConfig, flags: Flags) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let mut clock = Clock(BTreeMap::new());
    let data = clock.time("load", || load_data(cfg))?;
    let init = initial_model(cfg, &data)?;
    let p = &cfg.prune;
    let n = data.train.len();
    let q = cfg.train.sample_rate;
    let batch = q * n as f64;
    let n_removed = ((p.fraction * n as f64).round() as usize).min(n - 1);
    let q2 = (batch / (n - n_removed) as f64).min(1.0);
    let (t1, t2) = (steps_for(p.warmup_epochs, q), steps_for(p.retrain_epochs, q2));
    let privacy = match &cfg.privacy {
        Some(pp) => {
            let sigma = match (pp.noise_multiplier, pp.epsilon) {
                (Some(s), _) => s,
                (None, Some(e)) => calibrate_sigma_schedule(e, pp.delta, &[(q, t1), (q2, t2)]).stage("calibrate")?,
                (None, None) => return Err(PipelineError::Config("privacy needs epsilon or noise_multiplier".into())),
            };
            Some(PrivacyParams {
                noise_multiplier: Some(sigma),
                ..pp.clone()
            })
        }
        None => None,
    };
    let warm_cfg = TrainConfig {
        epochs: p.warmup_epochs,
        privacy: privacy.clone(),
        ..cfg.train_config(p.warmup_epochs)
    };
    let mut rngs = TrainRngs::from_seed(cfg.seed);
    let mut acc = AccountantState::new();
    let warm = clock
        .time("warmup", || train(&init, &data.train, &warm_cfg, &mut rngs, &mut acc, Some("warmup")))
        .stage("warmup")?;
    let mut needed = p.metrics.clone();
    needed.sort();
    needed.dedup();
    let opts = scoring_options(cfg, warm.sigma);
    let table = clock
        .time("score", || {
            score_samples(&warm.state, Some(&warm.checkpoints), &data.train.samples, &needed, &opts)
        })
        .stage("score")?;
    let mut criteria: Vec<String> = p.metrics.iter().map(|m| m.to_string()).collect();
    if p.random_control {
        criteria.push("random".into());
    }
    if p.oracle_control {
        criteria.push("oracle_atypical".into());
    }
    if p.baseline {
        criteria.push("none".into());
    }
    let atypical: BTreeSet<u64> = data.train.samples.iter().filter(|s| s.atypical).map(|s| s.id).collect();
    let mislabeled: BTreeSet<u64> = data.train.samples.iter().filter(|s| s.mislabeled).map(|s| s.id).collect();
    let mut removals = Vec::with_capacity(criteria.len());
    for c in &criteria {
        let removed = removal_ids(c, n_removed, &table, &data.train, cfg.seed);
        let gone: BTreeSet<u64> = removed.iter().copied().collect();
        let keep: BTreeSet<u64> = data.train.samples.iter().map(|s| s.id).filter(|id| !gone.contains(id)).collect();
        let rest = data.train.retain_ids(&keep);
        let q_v = (batch / rest.len() as f64).min(1.0);
        let cfg2 = TrainConfig {
            epochs: p.retrain_epochs,
            lr: cfg.train.lr,
            sample_rate: q_v,
            checkpoints: 1,
            privacy: privacy.clone(),
        };
        let mut rngs_v = rngs.clone();
        let mut acc_v = acc.clone();
        let out = clock
            .time(&format!("retrain:{c}"), || {
                train(&warm.state, &rest, &cfg2, &mut rngs_v, &mut acc_v, Some("retrain"))
            })
            .stage("retrain")?;
        let privacy_v = match &privacy {
            Some(pp) => privacy_summary(pp, pp.noise_multiplier.expect("resolved"), &acc_v)?,
            None => None,
        };
        removals.push(RemovalResult {
            criterion: c.clone(),
            removed: removed.len(),
            removed_atypical: removed.iter().filter(|id| atypical.contains(id)).count(),
            removed_mislabeled: removed.iter().filter(|id| mislabeled.contains(id)).count(),
            remaining: rest.len(),
            retrain_sample_rate: q_v,
            train_accuracy: accuracy(&out.state, &rest.samples).stage("evaluate")?,
            test_accuracy: accuracy(&out.state, &data.test.samples).stage("evaluate")?,
            privacy: privacy_v,
        });
    }
    #[derive(Serialize)]
    struct R {
        n_train: usize,
        n_test: usize,
        fraction: f64,
        warmup_steps: u64,
        warmup_test_accuracy: f64,
        sigma: Option<f64>,
        removals: Vec<RemovalResult>,
        scores_csv: &'static str,
    }
    let results = R {
        n_train: n,
        n_test: data.test.len(),
        fraction: p.fraction,
        warmup_steps: warm.steps,
        warmup_test_accuracy: accuracy(&warm.state, &data.test.samples).stage("evaluate")?,
        sigma: warm.sigma,
        removals,
        scores_csv: "scores.csv",
    };
    Ok(Outcome {
        report: Report::new("prune-retrain", cfg, &flags, &results).stage("report")?,
        files: BTreeMap::from([("scores.csv".to_owned(), table_csv(&table)?)]),
        timings: clock.0,
    })
}

pub fn run_federated(cfg: &ExperimentConfig, flags: Flags) -> Result<Outcome, PipelineError> {
    run_federated_with_hooks(cfg, flags, &Hooks::default())
}

pub fn run_federated_with_hooks(cfg: &ExperimentConfig, flags: Flags, hooks: &Hooks) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let mut clock = Clock(BTreeMap::new());
    let data = clock.time("load", || load_data(cfg))?;
    let init = initial_model(cfg, &data)?;
    let f = &cfg.federation;
    let partition = partition_dataset(&data.train, f.clients, f.strategy, cfg.seed).stage("partition")?;
    let local = LocalConfig {
        epochs: f.local_epochs,
        lr: cfg.train.lr,
        sample_rate: cfg.train.sample_rate,
        privacy: cfg.privacy.clone(),
    };
    let fed = clock
        .time("federate", || {
            federated_train(&init, &data.train, &partition, f.rounds, &local, cfg.train.checkpoints, cfg.seed)
        })
        .stage("federate")?;
    let opts = scoring_options(cfg, fed.sigma);
    let mut metrics = cfg.metrics.clone();
    metrics.push(cfg.release.metric);
    let mut table = clock
        .time("score", || {
            score_samples(&fed.state, Some(&fed.checkpoints), &data.train.samples, &metrics, &opts)
        })
        .stage("score")?;
    let scores_csv = table_csv(&table)?;
    let rel = clock.time("release", || release_stage(cfg, &table))?;
    if let Some(h) = hooks.after_release {
        h(&mut table);
    }
    let rewards = allocate_rewards(&rel.scores, &partition, f.pool).stage("rewards")?;
    let mut clients_csv = Vec::new();
    write_client_csv(&rewards, &mut clients_csv).stage("rewards")?;

    #[derive(Serialize)]
    struct Client {
        client_id: usize,
        n_samples: usize,
        label_counts: BTreeMap<usize, usize>,
        training_epsilon: Option<f64>,
        score_sum_released: f64,
        reward: f64,
        release_epsilon: f64,
        raw_normalized_sum: Option<f64>,
    }
    let labels: BTreeMap<u64, usize> = data.train.samples.iter().map(|s| (s.id, s.label)).collect();
    let raw: BTreeMap<u64, f64> = table
        .ids()
        .iter()
        .copied()
        .zip(table.column(cfg.release.metric).expect("scored").normalized.iter().copied())
        .collect();
    let mut clients = Vec::with_capacity(rewards.len());
    for (r, ids) in rewards.iter().zip(&partition.clients) {
        let mut label_counts = BTreeMap::new();
        for id in ids {
            *label_counts.entry(labels[id]).or_insert(0) += 1;
        }
        let training_epsilon = match &cfg.privacy {
            Some(p) if !fed.accountants[r.client_id].is_empty() => {
                Some(convert_rdp_to_dp(&fed.accountants[r.client_id], p.delta).stage("accountant")?)
            }
            _ => None,
        };
        clients.push(Client {
            client_id: r.client_id,
            n_samples: r.n_samples,
            label_counts,
            training_epsilon,
            score_sum_released: r.score_sum_released,
            reward: r.reward,
            release_epsilon: r.epsilon_spent,
            raw_normalized_sum: (!flags.released_only).then(|| ids.iter().map(|id| raw[id]).sum()),
        });
    }
    #[derive(Serialize)]
    struct R {
        strategy: fedval_core::federation::PartitionStrategy,
        rounds: u32,
        local_epochs: u32,
        sigma: Option<f64>,
        checkpoint_rounds: Vec<u64>,
        test_accuracy: f64,
        reward_rule: &'static str,
        pool: f64,
        released: ReleasedView,
        clients: Vec<Client>,
        scores_csv: &'static str,
        released_csv: &'static str,
        clients_csv: &'static str,
    }
    let results = R {
        strategy: f.strategy,
        rounds: f.rounds,
        local_epochs: f.local_epochs,
        sigma: fed.sigma,
        checkpoint_rounds: fed.checkpoints.steps(),
        test_accuracy: accuracy(&fed.state, &data.test.samples).stage("evaluate")?,
        reward_rule: "pool share proportional to the client's released score sum, floored at 0",
        pool: f.pool,
        released: released_view(&rel, cfg.release.k)?,
        clients,
        scores_csv: "scores.csv",
        released_csv: "released.csv",
        clients_csv: "clients.csv",
    };
    Ok(Outcome {
        report: Report::new("federate", cfg, &flags, &results).stage("report")?,
        files: BTreeMap::from([
            ("scores.csv".to_owned(), scores_csv),
            ("released.csv".to_owned(), released_csv(&rel.scores)?),
            ("clients.csv".to_owned(), clients_csv),
        ]),
        timings: clock.0,
    })
}

fn read_view(path: &Path, setting: &str, metric: Metric, column: CompareColumn) -> Result<ScoreView, PipelineError> {
    let file = std::fs::File::open(path).map_err(|e| PipelineError::Stage {
        stage: "compare",
        message: format!("{}: {e}", path.display()),
    })?;
    let (ids, scores) = match column {
        CompareColumn::Released => {
            let r = ReleasedScores::read_csv(file).stage("compare")?;
            if r.metric != metric {
                return Err(PipelineError::Stage {
                    stage: "compare",
                    message: format!("{} holds {} scores, not {metric}", path.display(), r.metric),
                });
            }
            (r.ids(), r.values())
        }
        CompareColumn::Normalized | CompareColumn::Raw => {
            let t = ScoreTable::read_csv(file).stage("compare")?;
            let col = t.column(metric).ok_or_else(|| PipelineError::Stage {
                stage: "compare",
                message: format!("{} has no {metric} column", path.display()),
            })?;
            let v = if column == CompareColumn::Raw {
                col.raw.clone()
            } else {
                col.normalized.clone()
            };
            (t.ids().to_vec(), v)
        }
    };
    Ok(ScoreView {
        setting: setting.to_owned(),
        ids,
        scores,
    })
}

pub fn run_compare(cfg: &ExperimentConfig, flags: Flags) -> Result<Outcome, PipelineError> {
    cfg.validate()?;
    let c = cfg
        .compare
        .as_ref()
        .ok_or_else(|| PipelineError::Config("compare needs a `compare` section".into()))?;
    let mut clock = Clock(BTreeMap::new());
    let data = clock.time("load", || load_data(cfg))?;
    let a = read_view(&c.a, &c.setting_a, c.metric, c.column)?;
    let b = read_view(&c.b, &c.setting_b, c.metric, c.column)?;
    let images: BTreeMap<u64, &Tensor> = data.train.samples.iter().map(|s| (s.id, &s.image)).collect();
    let cmp = clock
        .time("compare", || {
            compare_selections(&a, &b, c.metric.as_str(), c.k, c.pairing, |id| images.get(&id).copied())
        })
        .stage("compare")?;
    #[derive(Serialize)]
    struct R {
        column: CompareColumn,
        comparison: fedval_core::consistency::SelectionComparison,
    }
    let results = R {
        column: c.column,
        comparison: cmp,
    };
    Ok(Outcome {
        report: Report::new("compare", cfg, &flags, &results).stage("report")?,
        files: BTreeMap::new(),
        timings: clock.0,
    })
}
