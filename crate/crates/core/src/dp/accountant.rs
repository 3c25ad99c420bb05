//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::{erf::erfc, gamma::ln_gamma};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AccountantError {
    #[error("Rényi order must exceed 1, got {0}")]
    Order(f64),
    #[error("noise multiplier must be positive, got {0}")]
    Sigma(f64),
    #[error("sample rate must lie in [0, 1], got {0}")]
    SampleRate(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    Delta(f64),
    #[error("cannot report epsilon for an empty ledger")]
    EmptyLedger,
    #[error("target epsilon must be positive, got {0}")]
    Target(f64),
    #[error("target epsilon {target} unreachable with noise multiplier <= {max_sigma} (reaches {reached})")]
    Unreachable { target: f64, max_sigma: f64, reached: f64 },
}

/// Orders at which RDP is tracked: 1.5 and every integer 2..=64.
///
/// Adding orders can only lower the converted ε, since conversion takes a
/// minimum over this grid.
pub fn rdp_orders() -> Vec<f64> {
    std::iter::once(1.5).chain((2..=64).map(f64::from)).collect()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a − e^b)` for `a >= b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln(erfc(x))`, switching to the asymptotic series where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return erfc(x).ln();
    }
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2) + 105.0 / (16.0 * x2.powi(4));
    -x2 - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

fn ln_binom(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// `ln A_α` for integer α via the finite binomial expansion
/// `A_α = Σ_k C(α,k) (1−q)^(α−k) q^k exp((k²−k)/(2σ²))`.
fn log_a_int(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        let kf = f64::from(k);
        let term = ln_binom(a, kf) + kf * q.ln() + (a - kf) * (1.0 - q).ln() + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

/// `ln A_α` for fractional α: the two-sided infinite series split at
/// `z0 = σ² ln(1/q − 1) + 1/2`, each tail weighted by a Gaussian `erfc`.
fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let mut coef = 1.0f64;
    let root2_sigma = std::f64::consts::SQRT_2 * sigma;
    for i in 0..100_000u32 {
        let fi = f64::from(i);
        if i > 0 {
            coef *= (alpha - fi + 1.0) / fi;
        }
        if coef == 0.0 {
            break;
        }
        let log_coef = coef.abs().ln();
        let j = alpha - fi;
        let log_t0 = log_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / root2_sigma);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / root2_sigma);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if coef > 0.0 {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

/// RDP of one subsampled-Gaussian step at order `alpha`.
fn rdp_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 && alpha <= f64::from(u32::MAX) {
        log_a_int(q, sigma, alpha as u32)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

/// Rényi ε at order `alpha` after `steps` compositions of the Gaussian
/// mechanism with noise multiplier `sigma` under Poisson sampling rate `q`.
pub fn rdp_epsilon(q: f64, sigma: f64, steps: u64, alpha: f64) -> Result<f64, AccountantError> {
    if !(alpha > 1.0) {
        return Err(AccountantError::Order(alpha));
    }
    if !(sigma > 0.0) {
        return Err(AccountantError::Sigma(sigma));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(AccountantError::SampleRate(q));
    }
    Ok(steps as f64 * rdp_step(q, sigma, alpha))
}

/// One recorded mechanism invocation (or a run of identical ones).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
    /// Training phase that produced the entry, e.g. `warmup` or `retrain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
}

/// Append-only ledger of subsampled-Gaussian invocations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    entries: Vec<LedgerEntry>,
}

impl AccountantState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, sample_rate: f64, noise_multiplier: f64, steps: u64, phase: Option<&str>) {
        self.entries.push(LedgerEntry {
            sample_rate,
            noise_multiplier,
            steps,
            phase: phase.map(str::to_owned),
        });
    }

    pub fn extend(&mut self, other: &AccountantState) {
        self.entries.extend(other.entries.iter().cloned());
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_steps(&self) -> u64 {
        self.entries.iter().map(|e| e.steps).sum()
    }

    /// Entries merged by `(q, σ, phase)`, in first-appearance order.
    pub fn summary(&self) -> Vec<LedgerEntry> {
        let mut out: Vec<LedgerEntry> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|o| {
                o.sample_rate == e.sample_rate && o.noise_multiplier == e.noise_multiplier && o.phase == e.phase
            }) {
                Some(o) => o.steps += e.steps,
                None => out.push(e.clone()),
            }
        }
        out
    }

    /// Total RDP at each order of [`rdp_orders`].
    pub fn rdp(&self) -> Vec<f64> {
        let orders = rdp_orders();
        let mut grouped: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        for e in &self.entries {
            *grouped
                .entry((e.sample_rate.to_bits(), e.noise_multiplier.to_bits()))
                .or_default() += e.steps;
        }
        orders
            .iter()
            .map(|&a| {
                grouped
                    .iter()
                    .map(|(&(q, s), &steps)| steps as f64 * rdp_step(f64::from_bits(q), f64::from_bits(s), a))
                    .sum()
            })
            .collect()
    }
}

/// `min_α [ε_α + ln(1/δ)/(α−1)]` over the order grid, with the minimizing α.
pub fn convert_with_order(acc: &AccountantState, delta: f64) -> Result<(f64, f64), AccountantError> {
    if acc.is_empty() {
        return Err(AccountantError::EmptyLedger);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AccountantError::Delta(delta));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let best = rdp_orders()
        .into_iter()
        .zip(acc.rdp())
        .map(|(a, r)| (r + log_inv_delta / (a - 1.0), a))
        .fold((f64::INFINITY, f64::NAN), |best, cur| if cur.0 < best.0 { cur } else { best });
    Ok(best)
}

pub fn convert_rdp_to_dp(acc: &AccountantState, delta: f64) -> Result<f64, AccountantError> {
    convert_with_order(acc, delta).map(|(eps, _)| eps)
}

fn epsilon_for(sigma: f64, delta: f64, schedule: &[(f64, u64)]) -> Result<f64, AccountantError> {
    let mut acc = AccountantState::new();
    for &(q, steps) in schedule {
        acc.record(q, sigma, steps, None);
    }
    convert_rdp_to_dp(&acc, delta)
}

pub const MAX_SIGMA: f64 = 1e4;

/// Smallest noise multiplier (bisection to 1e-6) whose converted ε after
/// `steps` steps at rate `q` does not exceed `target_epsilon`.
pub fn calibrate_sigma(target_epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64, AccountantError> {
    calibrate_sigma_schedule(target_epsilon, delta, &[(q, steps)])
}

/// [`calibrate_sigma`] for a schedule of `(q, steps)` phases sharing one σ.
pub fn calibrate_sigma_schedule(target_epsilon: f64, delta: f64, schedule: &[(f64, u64)]) -> Result<f64, AccountantError> {
    if !(target_epsilon > 0.0) {
        return Err(AccountantError::Target(target_epsilon));
    }
    if schedule.is_empty() {
        return Err(AccountantError::EmptyLedger);
    }
    if let Some(&(q, _)) = schedule.iter().find(|(q, _)| !(0.0..=1.0).contains(q)) {
        return Err(AccountantError::SampleRate(q));
    }
    let eps = |s: f64| epsilon_for(s, delta, schedule);
    let at_max = eps(MAX_SIGMA)?;
    if at_max > target_epsilon {
        return Err(AccountantError::Unreachable {
            target: target_epsilon,
            max_sigma: MAX_SIGMA,
            reached: at_max,
        });
    }
    let mut hi = MAX_SIGMA;
    let mut lo = MAX_SIGMA;
    while eps(lo)? <= target_epsilon {
        hi = lo;
        lo /= 2.0;
        if lo < 1e-6 {
            return Ok(hi);
        }
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if eps(mid)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
