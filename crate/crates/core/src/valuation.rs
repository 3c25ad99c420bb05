//! Per-sample scores: VoG, PLIS, loss and gradient norm, with per-class
//! min-max normalization.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_input, grad_input_of_sq_param_grad_norm, loss_and_param_grad, AutodiffError, NestedMethod};
use crate::data::Sample;
use crate::dp::CheckpointStore;
use crate::models::ModelState;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ValuationError {
    #[error("VoG needs at least 2 checkpoints, got {0}")]
    TooFewCheckpoints(usize),
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("sample {id}: {source}")]
    Sample { id: u64, source: AutodiffError },
    #[error("trace tensors disagree in shape: {0:?} vs {1:?}")]
    TraceShape(Vec<usize>, Vec<usize>),
    #[error("{metric} score for sample {id} is {value}")]
    BadScore { metric: Metric, id: u64, value: f64 },
    #[error("column has {actual} entries, table has {expected}")]
    Length { expected: usize, actual: usize },
    #[error("checkpoint model differs from the scored model")]
    ModelMismatch,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("score csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("score csv: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Vog,
    Plis,
    Loss,
    Gradnorm,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Vog, Metric::Plis, Metric::Loss, Metric::Gradnorm];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Vog => "vog",
            Metric::Plis => "plis",
            Metric::Loss => "loss",
            Metric::Gradnorm => "gradnorm",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = ValuationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ValuationError::UnknownMetric(s.to_owned()))
    }
}

/// How the per-pixel VoG statistic treats the radical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VogMode {
    /// `sqrt((1/K) Σ_t (S_t − μ)²)`, the per-pixel standard deviation.
    #[default]
    Std,
    /// `sqrt(1/K) · Σ_t (S_t − μ)²`.
    Literal,
}

/// Input gradients of one sample at each checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTrace {
    pub sample_id: u64,
    pub grads: Vec<Tensor>,
    pub steps: Vec<u64>,
}

pub fn compute_trace(checkpoints: &CheckpointStore, sample: &Sample) -> Result<GradTrace, ValuationError> {
    if checkpoints.len() < 2 {
        return Err(ValuationError::TooFewCheckpoints(checkpoints.len()));
    }
    let wrap = |source| ValuationError::Sample { id: sample.id, source };
    let grads = checkpoints
        .entries()
        .iter()
        .map(|c| grad_input(c.state.model.as_ref(), &c.state.params, &sample.image, sample.label).map_err(wrap))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GradTrace {
        sample_id: sample.id,
        grads,
        steps: checkpoints.steps(),
    })
}

/// Per-pixel spread of the trace over checkpoints.
pub fn vog_pixelwise(trace: &GradTrace, mode: VogMode) -> Result<Tensor, ValuationError> {
    let k = trace.grads.len();
    if k < 2 {
        return Err(ValuationError::TooFewCheckpoints(k));
    }
    let shape = trace.grads[0].shape().to_vec();
    if let Some(t) = trace.grads.iter().find(|t| t.shape() != shape.as_slice()) {
        return Err(ValuationError::TraceShape(shape, t.shape().to_vec()));
    }
    let n = trace.grads[0].len();
    let kf = k as f64;
    let mut out = vec![0.0; n];
    for (p, o) in out.iter_mut().enumerate() {
        let mean = trace.grads.iter().map(|t| t.data()[p]).sum::<f64>() / kf;
        let ss: f64 = trace.grads.iter().map(|t| (t.data()[p] - mean).powi(2)).sum();
        *o = match mode {
            VogMode::Std => (ss / kf).sqrt(),
            VogMode::Literal => (1.0 / kf).sqrt() * ss,
        };
    }
    Ok(Tensor::new(shape, out).expect("finite inputs give finite spread"))
}

/// Mean over pixels.
pub fn vog_scalar(pixelwise: &Tensor) -> f64 {
    pixelwise.mean()
}

/// `∇_x ‖∇_θ ℓ‖² / σ²`.
pub fn plis_matrix(state: &ModelState, sample: &Sample, sigma: f64, method: NestedMethod) -> Result<Tensor, ValuationError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ValuationError::Sigma(sigma));
    }
    let m = grad_input_of_sq_param_grad_norm(state.model.as_ref(), &state.params, &sample.image, sample.label, method)
        .map_err(|source| ValuationError::Sample { id: sample.id, source })?;
    Ok(m.scale(1.0 / (sigma * sigma)))
}

/// Largest singular value of a matrix given row-major.
pub fn spectral_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    if rows == 1 || cols == 1 {
        return data.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    DMatrix::from_row_slice(rows, cols, data)
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Spectral norm of each `H×W` channel slice, averaged over channels.
/// Rank-1 tensors use the vector 2-norm, rank-2 a single matrix.
pub fn plis_score(matrix: &Tensor) -> f64 {
    match *matrix.shape() {
        [h, w] => spectral_norm(h, w, matrix.data()),
        [c, h, w] => {
            let sum: f64 = matrix.data().chunks(h * w).map(|s| spectral_norm(h, w, s)).sum();
            sum / c as f64
        }
        _ => matrix.norm_l2(),
    }
}

pub fn loss_score(state: &ModelState, sample: &Sample) -> Result<f64, ValuationError> {
    crate::autodiff::per_sample_loss(state.model.as_ref(), &state.params, &sample.image, sample.label)
        .map_err(|source| ValuationError::Sample { id: sample.id, source })
}

pub fn gradnorm_score(state: &ModelState, sample: &Sample) -> Result<f64, ValuationError> {
    loss_and_param_grad(state.model.as_ref(), &state.params, &sample.image, sample.label)
        .map(|(_, g)| g.norm_l2())
        .map_err(|source| ValuationError::Sample { id: sample.id, source })
}

/// Min-max rescale within each label; a class whose scores are all equal
/// maps to 0.5.
pub fn normalize_per_class(raw: &[f64], labels: &[usize]) -> Vec<f64> {
    assert_eq!(raw.len(), labels.len(), "one label per score");
    let mut range: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for (&x, &l) in raw.iter().zip(labels) {
        let r = range.entry(l).or_insert((x, x));
        r.0 = r.0.min(x);
        r.1 = r.1.max(x);
    }
    raw.iter()
        .zip(labels)
        .map(|(&x, l)| {
            let (lo, hi) = range[l];
            if hi > lo {
                ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.5
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreColumn {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Scores of a fixed sample list, one column per metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    ids: Vec<u64>,
    labels: Vec<usize>,
    columns: BTreeMap<Metric, ScoreColumn>,
}

impl ScoreTable {
    pub fn new(ids: Vec<u64>, labels: Vec<usize>) -> Self {
        assert_eq!(ids.len(), labels.len(), "one label per sample");
        Self {
            ids,
            labels,
            columns: BTreeMap::new(),
        }
    }

    /// Stores `raw` and its per-class normalization. Raw values must be
    /// finite, and non-negative for every metric but loss.
    pub fn insert(&mut self, metric: Metric, raw: Vec<f64>) -> Result<(), ValuationError> {
        if raw.len() != self.ids.len() {
            return Err(ValuationError::Length {
                expected: self.ids.len(),
                actual: raw.len(),
            });
        }
        if let Some((i, &value)) = raw
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || (metric != Metric::Loss && **v < 0.0))
        {
            return Err(ValuationError::BadScore {
                metric,
                id: self.ids[i],
                value,
            });
        }
        let normalized = normalize_per_class(&raw, &self.labels);
        self.columns.insert(metric, ScoreColumn { raw, normalized });
        Ok(())
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn metrics(&self) -> Vec<Metric> {
        self.columns.keys().copied().collect()
    }

    pub fn column(&self, metric: Metric) -> Option<&ScoreColumn> {
        self.columns.get(&metric)
    }

    /// `sample_id,label,metric,raw,normalized`, one row per (sample, metric).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ValuationError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sample_id", "label", "metric", "raw", "normalized"])?;
        for (i, (&id, &label)) in self.ids.iter().zip(&self.labels).enumerate() {
            for (m, col) in &self.columns {
                out.write_record([
                    id.to_string(),
                    label.to_string(),
                    m.to_string(),
                    format_float(col.raw[i]),
                    format_float(col.normalized[i]),
                ])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Inverse of [`ScoreTable::write_csv`]; normalized values are taken
    /// from the file as written.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, ValuationError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut ids: Vec<u64> = Vec::new();
        let mut labels = Vec::new();
        let mut cols: BTreeMap<Metric, ScoreColumn> = BTreeMap::new();
        let parse = |s: &str| s.parse::<f64>().map_err(|e| ValuationError::Parse(format!("{s}: {e}")));
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(ValuationError::Parse(format!("expected 5 fields, got {}", rec.len())));
            }
            let id: u64 = rec[0].parse().map_err(|e| ValuationError::Parse(format!("sample_id: {e}")))?;
            let label: usize = rec[1].parse().map_err(|e| ValuationError::Parse(format!("label: {e}")))?;
            let metric: Metric = rec[2].parse()?;
            if ids.last() != Some(&id) {
                ids.push(id);
                labels.push(label);
            }
            let col = cols.entry(metric).or_insert_with(|| ScoreColumn {
                raw: Vec::new(),
                normalized: Vec::new(),
            });
            col.raw.push(parse(&rec[3])?);
            col.normalized.push(parse(&rec[4])?);
        }
        if let Some(col) = cols.values().find(|c| c.raw.len() != ids.len()) {
            return Err(ValuationError::Length {
                expected: ids.len(),
                actual: col.raw.len(),
            });
        }
        Ok(Self { ids, labels, columns: cols })
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub vog_mode: VogMode,
    /// Noise multiplier dividing the PLIS matrix; 1 for non-private runs.
    pub plis_sigma: f64,
    pub nested: NestedMethod,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            vog_mode: VogMode::Std,
            plis_sigma: 1.0,
            nested: NestedMethod::Reverse,
        }
    }
}

/// Computes every requested metric for `samples`. VoG reads `checkpoints`;
/// the other metrics use `final_state`.
pub fn score_samples(
    final_state: &ModelState,
    checkpoints: Option<&CheckpointStore>,
    samples: &[Sample],
    metrics: &[Metric],
    options: &ScoringOptions,
) -> Result<ScoreTable, ValuationError> {
    let mut table = ScoreTable::new(samples.iter().map(|s| s.id).collect(), samples.iter().map(|s| s.label).collect());
    let mut wanted: Vec<Metric> = metrics.to_vec();
    wanted.sort();
    wanted.dedup();
    if wanted.contains(&Metric::Vog) {
        let store = checkpoints.ok_or(ValuationError::TooFewCheckpoints(0))?;
        if store.len() < 2 {
            return Err(ValuationError::TooFewCheckpoints(store.len()));
        }
        if store.entries().iter().any(|c| c.state.spec() != final_state.spec()) {
            return Err(ValuationError::ModelMismatch);
        }
    }
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            wanted
                .iter()
                .map(|&m| match m {
                    Metric::Vog => {
                        let trace = compute_trace(checkpoints.expect("checked"), s)?;
                        Ok(vog_scalar(&vog_pixelwise(&trace, options.vog_mode)?))
                    }
                    Metric::Plis => Ok(plis_score(&plis_matrix(final_state, s, options.plis_sigma, options.nested)?)),
                    Metric::Loss => loss_score(final_state, s),
                    Metric::Gradnorm => gradnorm_score(final_state, s),
                })
                .collect()
        })
        .collect::<Result<_, ValuationError>>()?;
    for (j, &m) in wanted.iter().enumerate() {
        table.insert(m, rows.iter().map(|r| r[j]).collect())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(vals: &[&[f64]]) -> GradTrace {
        GradTrace {
            sample_id: 0,
            grads: vals.iter().map(|v| Tensor::vector(v.to_vec()).unwrap()).collect(),
            steps: (0..vals.len() as u64).collect(),
        }
    }

    #[test]
    fn vog_hand_cases() {
        let t = trace(&[&[0.0, 5.0], &[2.0, 5.0]]);
        assert_eq!(vog_pixelwise(&t, VogMode::Std).unwrap().data(), &[1.0, 0.0]);
        let lit = vog_pixelwise(&t, VogMode::Literal).unwrap();
        assert!((lit.data()[0] - 2.0 / 2f64.sqrt()).abs() < 1e-15);
        let shifted = trace(&[&[3.0, 8.0], &[5.0, 8.0]]);
        assert_eq!(vog_pixelwise(&shifted, VogMode::Std).unwrap().data(), &[1.0, 0.0]);
        assert!(matches!(
            vog_pixelwise(&trace(&[&[1.0]]), VogMode::Std),
            Err(ValuationError::TooFewCheckpoints(1))
        ));
        assert_eq!(vog_scalar(&Tensor::vector(vec![0.0, 2.0]).unwrap()), 1.0);
    }

    #[test]
    fn spectral_norm_cases() {
        let id = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        assert!((plis_score(&id) - 1.0).abs() < 1e-12);
        let d = Tensor::new(vec![2, 2], vec![3., 0., 0., 4.]).unwrap();
        assert!((plis_score(&d) - 4.0).abs() < 1e-12);
        let u = [0.6, 0.8];
        let v = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt(), 0.0];
        let r1: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        assert!((plis_score(&Tensor::new(vec![1, 2, 3], r1).unwrap()) - 1.0).abs() < 1e-12);
        let col = Tensor::new(vec![1, 2, 1], vec![3.0, 4.0]).unwrap();
        assert!((plis_score(&col) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize_per_class(&[2.0, 4.0, 6.0], &[0, 0, 0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_per_class(&[7.0], &[3]), vec![0.5]);
        assert_eq!(
            normalize_per_class(&[0.0, 5.0, 10.0, 6.0], &[0, 1, 0, 1]),
            vec![0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn table_rejects_bad_scores_and_round_trips() {
        let mut t = ScoreTable::new(vec![4, 9], vec![0, 1]);
        assert!(matches!(
            t.insert(Metric::Vog, vec![1.0, -1.0]),
            Err(ValuationError::BadScore { id: 9, .. })
        ));
        assert!(matches!(t.insert(Metric::Loss, vec![f64::NAN, 1.0]), Err(ValuationError::BadScore { .. })));
        t.insert(Metric::Loss, vec![0.1, 0.7]).unwrap();
        t.insert(Metric::Vog, vec![1.0 / 3.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,label,metric,raw,normalized\n4,0,vog,"));
        assert_eq!(ScoreTable::read_csv(buf.as_slice()).unwrap(), t);
        assert_eq!("plis".parse::<Metric>().unwrap(), Metric::Plis);
        assert!("pl".parse::<Metric>().is_err());
    }
}
