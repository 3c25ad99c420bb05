//! Pure-DP publication of scores: clamped Laplace release, a bounded
//! variance query and an additive budget ledger.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::valuation::{format_float, Metric};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReleaseError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("clip bound must be positive, got {0}")]
    Bound(f64),
    #[error("variance query needs at least 2 values, got {0}")]
    TooFew(usize),
    #[error("budget split must lie in (0, 1), got {0}")]
    Split(f64),
    #[error("release of {requested} would exceed cap {cap} (spent {spent})")]
    CapExceeded { requested: f64, spent: f64, cap: f64 },
    #[error("{0} ids for {1} values")]
    Length(usize, usize),
    #[error("released csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MechanismTag {
    Laplace,
    DpVariance,
}

impl MechanismTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MechanismTag::Laplace => "laplace",
            MechanismTag::DpVariance => "dp-variance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleaseEntry {
    pub epsilon: f64,
    pub mechanism: MechanismTag,
    pub label: String,
}

/// Additive (basic composition) ledger of pure-DP releases with an optional cap.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReleaseBudget {
    pub cap: Option<f64>,
    ledger: Vec<ReleaseEntry>,
}

impl ReleaseBudget {
    pub fn new(cap: Option<f64>) -> Self {
        Self { cap, ledger: Vec::new() }
    }

    pub fn total(&self) -> f64 {
        self.ledger.iter().map(|e| e.epsilon).sum()
    }

    pub fn ledger(&self) -> &[ReleaseEntry] {
        &self.ledger
    }

    /// Spent ε on entries whose label satisfies `pred`.
    pub fn total_where(&self, pred: impl Fn(&str) -> bool) -> f64 {
        self.ledger.iter().filter(|e| pred(&e.label)).map(|e| e.epsilon).sum()
    }

    fn check(&self, requested: f64) -> Result<(), ReleaseError> {
        if let Some(cap) = self.cap {
            let spent = self.total();
            // Relative slack absorbs summation rounding of many small spends.
            if spent + requested > cap * (1.0 + 1e-12) {
                return Err(ReleaseError::CapExceeded { requested, spent, cap });
            }
        }
        Ok(())
    }

    pub fn spend(&mut self, epsilon: f64, mechanism: MechanismTag, label: impl Into<String>) -> Result<(), ReleaseError> {
        self.spend_all(vec![(epsilon, mechanism, label.into())])
    }

    /// Appends all entries or none.
    pub fn spend_all(&mut self, entries: Vec<(f64, MechanismTag, String)>) -> Result<(), ReleaseError> {
        if let Some(&(e, _, _)) = entries.iter().find(|(e, _, _)| !(*e > 0.0 && e.is_finite())) {
            return Err(ReleaseError::Epsilon(e));
        }
        self.check(entries.iter().map(|(e, _, _)| e).sum())?;
        self.ledger.extend(entries.into_iter().map(|(epsilon, mechanism, label)| ReleaseEntry {
            epsilon,
            mechanism,
            label,
        }));
        Ok(())
    }
}

/// Laplace(0, `scale`) by inverse CDF.
pub fn sample_laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.sample::<f64, _>(rand_distr::Open01) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn check_params(bound: f64, epsilon: f64) -> Result<(), ReleaseError> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(ReleaseError::Bound(bound));
    }
    if !(epsilon > 0.0) {
        return Err(ReleaseError::Epsilon(epsilon));
    }
    Ok(())
}

/// Each value clamped to `[0, bound]` plus Laplace(`bound/ε`) noise.
pub fn laplace_release(values: &[f64], bound: f64, epsilon: f64, rng: &mut impl Rng) -> Result<Vec<f64>, ReleaseError> {
    check_params(bound, epsilon)?;
    let scale = bound / epsilon;
    Ok(values
        .iter()
        .map(|v| v.clamp(0.0, bound) + sample_laplace(scale, rng))
        .collect())
}

/// Population variance of the clamped values from a noisy `Σx`
/// (sensitivity `b`, budget `split·ε`) and a noisy `Σx²` (sensitivity `b²`,
/// the rest), floored at 0.
pub fn dp_variance_query(
    values: &[f64],
    bound: f64,
    epsilon: f64,
    split: f64,
    rng: &mut impl Rng,
) -> Result<f64, ReleaseError> {
    check_params(bound, epsilon)?;
    if values.len() < 2 {
        return Err(ReleaseError::TooFew(values.len()));
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(ReleaseError::Split(split));
    }
    let clamped: Vec<f64> = values.iter().map(|v| v.clamp(0.0, bound)).collect();
    let n = clamped.len() as f64;
    let s1 = clamped.iter().sum::<f64>() + sample_laplace(bound / (split * epsilon), rng);
    let s2 = clamped.iter().map(|v| v * v).sum::<f64>() + sample_laplace(bound * bound / ((1.0 - split) * epsilon), rng);
    let mean = s1 / n;
    Ok((s2 / n - mean * mean).max(0.0))
}

/// Hex SHA-256 of the little-endian seed bytes.
pub fn seed_commitment(seed: u64) -> String {
    hex::encode(Sha256::digest(seed.to_le_bytes()))
}

/// Release-noise stream for `seed`, distinct from the training streams.
pub fn release_rng(seed: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleasedScore {
    pub sample_id: u64,
    pub value: f64,
}

/// Noised scores of one metric. Downstream consumers read only this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReleasedScores {
    pub metric: Metric,
    pub epsilon: f64,
    pub bound: f64,
    pub mechanism: MechanismTag,
    pub seed_commitment: String,
    pub scores: Vec<ReleasedScore>,
}

impl ReleasedScores {
    pub fn value(&self, sample_id: u64) -> Option<f64> {
        self.scores.iter().find(|s| s.sample_id == sample_id).map(|s| s.value)
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.value).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.scores.iter().map(|s| s.sample_id).collect()
    }

    /// `sample_id,metric,released_value,epsilon,mechanism`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ReleaseError> {
        let err = |e: csv::Error| ReleaseError::Csv(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sample_id", "metric", "released_value", "epsilon", "mechanism"])
            .map_err(err)?;
        for s in &self.scores {
            out.write_record([
                s.sample_id.to_string(),
                self.metric.to_string(),
                format_float(s.value),
                format_float(self.epsilon),
                self.mechanism.as_str().to_owned(),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| ReleaseError::Csv(e.to_string()))
    }

    /// Reads a file written by [`ReleasedScores::write_csv`]. Bound and
    /// seed commitment are not part of the CSV and come back empty.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, ReleaseError> {
        let bad = |m: String| ReleaseError::Csv(m);
        let mut rdr = csv::Reader::from_reader(r);
        let mut scores = Vec::new();
        let mut meta: Option<(Metric, f64, MechanismTag)> = None;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", rec.len())));
            }
            let metric: Metric = rec[1].parse().map_err(|e: crate::valuation::ValuationError| bad(e.to_string()))?;
            let eps: f64 = rec[3].parse().map_err(|e| bad(format!("epsilon: {e}")))?;
            let mech = match &rec[4] {
                "laplace" => MechanismTag::Laplace,
                "dp-variance" => MechanismTag::DpVariance,
                m => return Err(bad(format!("unknown mechanism `{m}`"))),
            };
            if meta.is_some_and(|m| m != (metric, eps, mech)) {
                return Err(bad("mixed metric, epsilon or mechanism".into()));
            }
            meta = Some((metric, eps, mech));
            scores.push(ReleasedScore {
                sample_id: rec[0].parse().map_err(|e| bad(format!("sample_id: {e}")))?,
                value: rec[2].parse().map_err(|e| bad(format!("released_value: {e}")))?,
            });
        }
        let (metric, epsilon, mechanism) = meta.ok_or_else(|| bad("no rows".into()))?;
        Ok(Self {
            metric,
            epsilon,
            bound: f64::NAN,
            mechanism,
            seed_commitment: String::new(),
            scores,
        })
    }
}

/// Laplace-releases one metric column. Spends `ε` per published scalar,
/// labeled `<metric>:<sample_id>`; on refusal nothing is drawn or spent.
pub fn release_scores(
    ids: &[u64],
    values: &[f64],
    metric: Metric,
    bound: f64,
    epsilon: f64,
    seed: u64,
    budget: &mut ReleaseBudget,
) -> Result<ReleasedScores, ReleaseError> {
    if ids.len() != values.len() {
        return Err(ReleaseError::Length(ids.len(), values.len()));
    }
    check_params(bound, epsilon)?;
    budget.spend_all(
        ids.iter()
            .map(|id| (epsilon, MechanismTag::Laplace, format!("{metric}:{id}")))
            .collect(),
    )?;
    let noised = laplace_release(values, bound, epsilon, &mut release_rng(seed))?;
    Ok(ReleasedScores {
        metric,
        epsilon,
        bound,
        mechanism: MechanismTag::Laplace,
        seed_commitment: seed_commitment(seed),
        scores: ids
            .iter()
            .zip(noised)
            .map(|(&sample_id, value)| ReleasedScore { sample_id, value })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_before_noising() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let out = laplace_release(&[5.0, -3.0, 0.25], 1.0, 1e12, &mut rng).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9);
        assert!(out[1].abs() < 1e-9);
        assert!((out[2] - 0.25).abs() < 1e-9);
        assert_eq!(laplace_release(&[1.0], 0.0, 1.0, &mut rng), Err(ReleaseError::Bound(0.0)));
        assert_eq!(laplace_release(&[1.0], 1.0, -1.0, &mut rng), Err(ReleaseError::Epsilon(-1.0)));
    }

    #[test]
    fn variance_query_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let v = dp_variance_query(&[0.0, 1.0], 1.0, 1e9, 0.5, &mut rng).unwrap();
        assert!((v - 0.25).abs() < 1e-6);
        let c = dp_variance_query(&[0.3; 10], 1.0, 1e9, 0.5, &mut rng).unwrap();
        assert!(c < 1e-6);
        assert_eq!(dp_variance_query(&[0.3], 1.0, 1.0, 0.5, &mut rng), Err(ReleaseError::TooFew(1)));
        for _ in 0..200 {
            assert!(dp_variance_query(&[0.5; 3], 1.0, 0.1, 0.5, &mut rng).unwrap() >= 0.0);
        }
    }

    #[test]
    fn budget_composes_and_refuses_atomically() {
        let mut b = ReleaseBudget::new(Some(1.0));
        assert_eq!(b.total(), 0.0);
        b.spend(0.5, MechanismTag::Laplace, "a").unwrap();
        b.spend(0.5, MechanismTag::Laplace, "b").unwrap();
        assert_eq!(b.total(), 1.0);
        let before = b.clone();
        assert!(matches!(b.spend(0.5, MechanismTag::Laplace, "c"), Err(ReleaseError::CapExceeded { .. })));
        assert_eq!(b, before);
    }

    #[test]
    fn refused_release_spends_nothing() {
        let mut b = ReleaseBudget::new(Some(1.0));
        let err = release_scores(&[1, 2, 3], &[0.1, 0.2, 0.3], Metric::Vog, 1.0, 0.5, 7, &mut b).unwrap_err();
        assert!(matches!(err, ReleaseError::CapExceeded { .. }));
        assert!(b.ledger().is_empty());
        let r = release_scores(&[1, 2], &[0.1, 0.2], Metric::Vog, 1.0, 0.5, 7, &mut b).unwrap();
        assert_eq!(b.ledger().len(), 2);
        assert_eq!(b.ledger()[1].label, "vog:2");
        assert_eq!(r.seed_commitment.len(), 64);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let back = ReleasedScores::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.scores, r.scores);
        assert_eq!(back.epsilon, 0.5);
    }

    #[test]
    fn seeded_release_is_reproducible() {
        let mut b = ReleaseBudget::default();
        let a = release_scores(&[1, 2], &[0.1, 0.2], Metric::Loss, 1.0, 1.0, 3, &mut b).unwrap();
        let c = release_scores(&[1, 2], &[0.1, 0.2], Metric::Loss, 1.0, 1.0, 3, &mut b).unwrap();
        assert_eq!(a, c);
        assert_eq!(b.total(), 4.0);
    }
}
