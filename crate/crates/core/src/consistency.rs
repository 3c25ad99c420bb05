//! Agreement between sample selections: windowed SSIM, Bhattacharyya
//! distance of pixel histograms, Pearson correlation and top-k overlap.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConsistencyError {
    #[error("image shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("image {shape:?} is smaller than the {window}x{window} window")]
    TooSmall { shape: Vec<usize>, window: usize },
    #[error("image set is empty")]
    EmptySet,
    #[error("series lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("correlation needs at least 2 points, got {0}")]
    TooFew(usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("k = {k} invalid for {n} samples")]
    K { k: usize, n: usize },
    #[error("score tables cover different samples")]
    IdMismatch,
    #[error("no image for sample {0}")]
    MissingImage(u64),
}

pub const SSIM_WINDOW: usize = 8;
pub const HIST_BINS: usize = 64;
pub const BC_FLOOR: f64 = 1e-12;

fn split_chw(t: &Tensor) -> (usize, usize, usize) {
    match *t.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        [n] => (1, 1, n),
        _ => (1, 1, t.len()),
    }
}

/// Mean SSIM over all `8×8` windows (stride 1) of each channel, averaged over
/// channels, with `L = 1`, `C1 = 0.01²`, `C2 = 0.03²` and population
/// (co)variances.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, ConsistencyError> {
    if a.shape() != b.shape() {
        return Err(ConsistencyError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    let (c, h, w) = split_chw(a);
    let win = SSIM_WINDOW;
    if h < win || w < win {
        return Err(ConsistencyError::TooSmall {
            shape: a.shape().to_vec(),
            window: win,
        });
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let np = (win * win) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let xa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let xb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        for i in 0..=h - win {
            for j in 0..=w - win {
                let (mut ma, mut mb) = (0.0, 0.0);
                for r in i..i + win {
                    for s in j..j + win {
                        ma += xa[r * w + s];
                        mb += xb[r * w + s];
                    }
                }
                ma /= np;
                mb /= np;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for r in i..i + win {
                    for s in j..j + win {
                        let (da, db) = (xa[r * w + s] - ma, xb[r * w + s] - mb);
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= np;
                vb /= np;
                cov /= np;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
        total += acc / ((h - win + 1) * (w - win + 1)) as f64;
    }
    Ok(total / c as f64)
}

/// Normalized `bins`-bucket histogram of all pixels, clamped to `[0, 1]`.
pub fn pixel_histogram(images: &[&Tensor], bins: usize) -> Result<Vec<f64>, ConsistencyError> {
    let total: usize = images.iter().map(|t| t.len()).sum();
    if images.is_empty() || total == 0 {
        return Err(ConsistencyError::EmptySet);
    }
    let mut hist = vec![0.0; bins];
    for t in images {
        for &v in t.data() {
            let idx = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            hist[idx] += 1.0;
        }
    }
    hist.iter_mut().for_each(|v| *v /= total as f64);
    Ok(hist)
}

/// `−ln max(Σ √(pᵢqᵢ), 1e-12)` after rescaling both to unit mass, so
/// identical inputs give exactly 0.
pub fn bhattacharyya_from_histograms(p: &[f64], q: &[f64]) -> Result<f64, ConsistencyError> {
    if p.len() != q.len() {
        return Err(ConsistencyError::Length(p.len(), q.len()));
    }
    let (sp, sq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
    if !(sp > 0.0 && sq > 0.0) {
        return Err(ConsistencyError::EmptySet);
    }
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum::<f64>() / (sp * sq).sqrt();
    let d = -bc.max(BC_FLOOR).ln();
    Ok(if d > 0.0 { d } else { 0.0 })
}

pub fn bhattacharyya_distance(a: &[&Tensor], b: &[&Tensor], bins: usize) -> Result<f64, ConsistencyError> {
    bhattacharyya_from_histograms(&pixel_histogram(a, bins)?, &pixel_histogram(b, bins)?)
}

/// Sample Pearson correlation; zero variance is an error, not 0.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, ConsistencyError> {
    if xs.len() != ys.len() {
        return Err(ConsistencyError::Length(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(ConsistencyError::TooFew(xs.len()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ConsistencyError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Ids of the `k` highest scores, ties broken by ascending id.
pub fn topk_ids(ids: &[u64], scores: &[f64], k: usize) -> Result<Vec<u64>, ConsistencyError> {
    if ids.len() != scores.len() {
        return Err(ConsistencyError::Length(ids.len(), scores.len()));
    }
    if k == 0 || k > ids.len() {
        return Err(ConsistencyError::K { k, n: ids.len() });
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(ids[i].cmp(&ids[j])));
    Ok(order[..k].iter().map(|&i| ids[i]).collect())
}

/// `|top-k(A) ∩ top-k(B)|` over a shared id list.
pub fn topk_overlap(ids: &[u64], a: &[f64], b: &[f64], k: usize) -> Result<usize, ConsistencyError> {
    let ta: BTreeSet<u64> = topk_ids(ids, a, k)?.into_iter().collect();
    Ok(topk_ids(ids, b, k)?.into_iter().filter(|id| ta.contains(id)).count())
}

/// How SSIM pairs the two top-k image lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// i-th ranked image of A against i-th ranked image of B.
    #[default]
    RankAligned,
    /// Each image against its most similar counterpart, averaged over both
    /// directions.
    BestMatch,
}

/// One setting's scores for a metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreView {
    pub setting: String,
    pub ids: Vec<u64>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionComparison {
    pub settings: [String; 2],
    pub metric: String,
    pub k: usize,
    pub pairing: Pairing,
    pub ssim_mean: f64,
    pub bd: f64,
    /// `None` when either score vector has zero variance.
    pub pearson_r: Option<f64>,
    pub topk_overlap: usize,
    pub topk_a: Vec<u64>,
    pub topk_b: Vec<u64>,
}

fn aligned(a: &ScoreView, b: &ScoreView) -> Result<(Vec<u64>, Vec<f64>, Vec<f64>), ConsistencyError> {
    let mb: BTreeMap<u64, f64> = b.ids.iter().copied().zip(b.scores.iter().copied()).collect();
    if a.ids.len() != a.scores.len() || b.ids.len() != b.scores.len() {
        return Err(ConsistencyError::Length(a.ids.len(), a.scores.len()));
    }
    if mb.len() != a.ids.len() || a.ids.iter().collect::<BTreeSet<_>>().len() != a.ids.len() {
        return Err(ConsistencyError::IdMismatch);
    }
    let mut ids = Vec::with_capacity(a.ids.len());
    let (mut xa, mut xb) = (Vec::new(), Vec::new());
    for (&id, &s) in a.ids.iter().zip(&a.scores) {
        let t = *mb.get(&id).ok_or(ConsistencyError::IdMismatch)?;
        ids.push(id);
        xa.push(s);
        xb.push(t);
    }
    Ok((ids, xa, xb))
}

/// Compares the top-`k` selections of two settings over the same samples.
pub fn compare_selections<'a>(
    a: &ScoreView,
    b: &ScoreView,
    metric: &str,
    k: usize,
    pairing: Pairing,
    image: impl Fn(u64) -> Option<&'a Tensor> + Sync,
) -> Result<SelectionComparison, ConsistencyError> {
    let (ids, xa, xb) = aligned(a, b)?;
    let topk_a = topk_ids(&ids, &xa, k)?;
    let topk_b = topk_ids(&ids, &xb, k)?;
    let fetch = |list: &[u64]| -> Result<Vec<&'a Tensor>, ConsistencyError> {
        list.iter()
            .map(|&id| image(id).ok_or(ConsistencyError::MissingImage(id)))
            .collect()
    };
    let (ia, ib) = (fetch(&topk_a)?, fetch(&topk_b)?);
    let ssim_mean = match pairing {
        Pairing::RankAligned => {
            let v: Vec<f64> = ia
                .par_iter()
                .zip(ib.par_iter())
                .map(|(x, y)| ssim(x, y))
                .collect::<Result<_, _>>()?;
            v.iter().sum::<f64>() / k as f64
        }
        Pairing::BestMatch => {
            let best = |from: &[&Tensor], to: &[&Tensor]| -> Result<f64, ConsistencyError> {
                let v: Vec<f64> = from
                    .par_iter()
                    .map(|x| {
                        to.iter()
                            .map(|y| ssim(x, y))
                            .try_fold(f64::NEG_INFINITY, |m, s| s.map(|s| m.max(s)))
                    })
                    .collect::<Result<_, _>>()?;
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            };
            0.5 * (best(&ia, &ib)? + best(&ib, &ia)?)
        }
    };
    let bd = bhattacharyya_distance(&ia, &ib, HIST_BINS)?;
    let pearson_r = match pearson(&xa, &xb) {
        Ok(r) => Some(r),
        Err(ConsistencyError::ZeroVariance) => None,
        Err(e) => return Err(e),
    };
    let overlap = topk_b.iter().filter(|id| topk_a.contains(id)).count();
    Ok(SelectionComparison {
        settings: [a.setting.clone(), b.setting.clone()],
        metric: metric.to_owned(),
        k,
        pairing,
        ssim_mean,
        bd,
        pearson_r,
        topk_overlap: overlap,
        topk_a,
        topk_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn ssim_cases() {
        let a = img(10, 9, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let ca = Tensor::full(&[1, 8, 8], 0.5);
        let cb = Tensor::full(&[1, 8, 8], 0.25);
        let want = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        assert!((ssim(&ca, &cb).unwrap() - want).abs() < 1e-12);
        let b = img(10, 9, |r, c| (r + c) as f64 / 20.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(matches!(
            ssim(&Tensor::zeros(&[1, 7, 9]), &Tensor::zeros(&[1, 7, 9])),
            Err(ConsistencyError::TooSmall { .. })
        ));
        assert!(matches!(ssim(&a, &ca), Err(ConsistencyError::Shape(..))));
    }

    #[test]
    fn bd_cases() {
        let d = bhattacharyya_from_histograms(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((d + 0.5f64.sqrt().ln()).abs() < 1e-15);
        let z = Tensor::zeros(&[1, 2, 2]);
        let o = Tensor::full(&[1, 2, 2], 1.0);
        assert_eq!(bhattacharyya_distance(&[&z], &[&z], 64).unwrap(), 0.0);
        assert!((bhattacharyya_distance(&[&z], &[&o], 64).unwrap() - 27.631021115928547).abs() < 1e-9);
        assert_eq!(bhattacharyya_distance(&[], &[&o], 64), Err(ConsistencyError::EmptySet));
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pearson(&[1., 1.], &[1., 2.]), Err(ConsistencyError::ZeroVariance));
    }

    #[test]
    fn topk_cases() {
        let ids = [10, 11, 12, 13];
        let a = [4.0, 3.0, 2.0, 1.0];
        let b = [4.0, 2.0, 3.0, 1.0];
        assert_eq!(topk_overlap(&ids, &a, &b, 2).unwrap(), 1);
        assert_eq!(topk_overlap(&ids, &a, &a, 3).unwrap(), 3);
        let rev = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(topk_overlap(&ids, &a, &rev, 2).unwrap(), 0);
        assert_eq!(topk_ids(&ids, &[1.0, 1.0, 1.0, 0.0], 2).unwrap(), vec![10, 11]);
        assert!(matches!(topk_overlap(&ids, &a, &b, 5), Err(ConsistencyError::K { .. })));
    }

    #[test]
    fn same_table_compares_perfectly() {
        let imgs: Vec<Tensor> = (0..6).map(|k| img(8, 8, |r, c| ((r * c + k) % 5) as f64 / 4.0)).collect();
        let v = ScoreView {
            setting: "a".into(),
            ids: (0..6).collect(),
            scores: vec![0.3, 0.9, 0.1, 0.5, 0.7, 0.2],
        };
        for pairing in [Pairing::RankAligned, Pairing::BestMatch] {
            let c = compare_selections(&v, &v, "vog", 3, pairing, |id| imgs.get(id as usize)).unwrap();
            assert!((c.ssim_mean - 1.0).abs() < 1e-9);
            assert_eq!(c.bd, 0.0);
            assert!((c.pearson_r.unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(c.topk_overlap, 3);
            assert_eq!(c.topk_a, vec![1, 4, 3]);
        }
    }
}
