//! Insurance fund balance, coverage waterfall and newsvendor sizing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shares of each revenue stream diverted to the fund.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundParams {
    pub alpha_liq: f64,
    pub beta_fund: f64,
    pub eta_trade: f64,
}

impl FundParams {
    pub fn new(alpha_liq: f64, beta_fund: f64, eta_trade: f64) -> Result<Self> {
        for (name, v) in [("alpha_liq", alpha_liq), ("beta_fund", beta_fund), ("eta_trade", eta_trade)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(FundParams { alpha_liq, beta_fund, eta_trade })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FundState {
    pub balance: f64,
    pub breach_count: u64,
}

impl FundState {
    pub fn new(balance: f64) -> Result<Self> {
        if !(balance >= 0.0) || !balance.is_finite() {
            return Err(Error::domain("fund balance must be finite and >= 0"));
        }
        Ok(FundState { balance, breach_count: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundStep {
    pub state: FundState,
    pub inflow: f64,
    pub coverage: f64,
    pub residual: f64,
}

/// Advances the fund one period.
///
/// Coverage draws on the balance held before this period's inflow; the inflow
/// is credited afterwards. When the deficit exceeds the balance the residual is
/// rounded once and coverage is taken as `D − residual`, which keeps
/// `coverage + residual == D` exact in floating point.
pub fn fund_step(
    state: FundState,
    liq_fees: f64,
    trade_notional: f64,
    funding_notional: f64,
    deficit: f64,
    params: &FundParams,
) -> Result<FundStep> {
    for (name, v) in [
        ("liquidation fees", liq_fees),
        ("trade notional", trade_notional),
        ("funding notional", funding_notional),
        ("deficit", deficit),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::domain(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let inflow =
        params.alpha_liq * liq_fees + params.eta_trade * trade_notional + params.beta_fund * funding_notional;
    let (coverage, residual, kept) = if deficit <= state.balance {
        (deficit, 0.0, state.balance - deficit)
    } else {
        let residual = deficit - state.balance;
        (deficit - residual, residual, 0.0)
    };
    let breach_count = state.breach_count + u64::from(residual > 0.0);
    Ok(FundStep { state: FundState { balance: kept + inflow, breach_count }, inflow, coverage, residual })
}

/// One row of a fund trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundRow {
    pub t: usize,
    pub balance: f64,
    pub inflow: f64,
    pub deficit: f64,
    pub coverage: f64,
    pub residual: f64,
}

/// Newsvendor fund size `K* = VaR_{1 − r/κ}` of the deficit samples, zero when `r ≥ κ`.
pub fn optimal_fund_size(deficit_samples: &[f64], r: f64, kappa: f64) -> Result<f64> {
    if deficit_samples.is_empty() {
        return Err(Error::Empty("deficit samples"));
    }
    if !(kappa > 0.0) {
        return Err(Error::param("kappa must be > 0"));
    }
    if !(r >= 0.0) {
        return Err(Error::param("capital cost r must be >= 0"));
    }
    if r >= kappa {
        return Ok(0.0);
    }
    lower_quantile(deficit_samples, 1.0 - r / kappa)
}

/// Smallest sample `x` with empirical `P(D ≤ x) ≥ level`.
pub fn lower_quantile(samples: &[f64], level: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::param("quantile level must lie in [0, 1]"));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::domain("samples contain NaN"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // The small slack absorbs rounding in level·n so exact multiples stay put.
    let k = ((level * n as f64) - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[k.min(n) - 1])
}

/// Newsvendor objective `rK + κ·mean((D − K)₊)`.
pub fn newsvendor_cost(deficit_samples: &[f64], k: f64, r: f64, kappa: f64) -> f64 {
    let n = deficit_samples.len() as f64;
    let tail = crate::num::sum(deficit_samples.iter().map(|d| (d - k).max(0.0)));
    r * k + kappa * tail / n
}
