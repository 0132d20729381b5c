//! One-round ADL allocation rules over winner endowments.
//!
//! Every allocator returns haircut fractions `h` and seized amounts `x = h·w`
//! whose sum meets the budget. The continuous rules are water-fillings: a
//! level `τ` is found such that `Σ w_i min(β_i, τ·w̃_i) = B`, with unit weights
//! for capped pro-rata, leverages for levered pro-rata and risk weights for RAP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::PositionId;
use crate::num::{self, CompensatedSum};

/// What a haircut may seize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Numeraire {
    /// Positive PNL only; principal is protected.
    #[default]
    PnlOnly,
    /// Whole positive equity, used only for the wealth-space diagnostic.
    Equity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinnerSlice {
    pub id: PositionId,
    pub cash: f64,
    pub pnl: f64,
    pub endowment: f64,
    pub cap: f64,
    pub score: f64,
    pub leverage: f64,
    pub equity: f64,
}

impl WinnerSlice {
    /// Uncapped winner with unit leverage and zero score.
    pub fn new(id: PositionId, cash: f64, pnl: f64, numeraire: Numeraire) -> Self {
        let equity = cash + pnl;
        let endowment = match numeraire {
            Numeraire::PnlOnly => num::pos(pnl),
            Numeraire::Equity => num::pos(equity),
        };
        WinnerSlice { id, cash, pnl, endowment, cap: 1.0, score: 0.0, leverage: 1.0, equity }
    }

    /// Applies a haircut ceiling `h̄` and a post-ADL equity floor `ē`.
    pub fn with_limits(mut self, max_haircut: f64, equity_floor: f64) -> Self {
        self.cap = effective_cap(self.endowment, self.cash, max_haircut, equity_floor);
        self
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.cap = cap.clamp(0.0, 1.0);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_leverage(mut self, leverage: f64) -> Self {
        self.leverage = leverage;
        self
    }
}

/// `β = min(h̄, 1 − (ē − cash)/w)` clamped to `[0, 1]`, zero without endowment.
pub fn effective_cap(endowment: f64, cash: f64, max_haircut: f64, equity_floor: f64) -> f64 {
    if endowment <= 0.0 {
        return 0.0;
    }
    max_haircut.min(1.0 - (equity_floor - cash) / endowment).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdlAllocation {
    pub severity: Option<f64>,
    pub budget: f64,
    pub ids: Vec<PositionId>,
    pub haircuts: Vec<f64>,
    pub seized: Vec<f64>,
}

impl AdlAllocation {
    fn zero(winners: &[WinnerSlice], severity: Option<f64>) -> Self {
        AdlAllocation {
            severity,
            budget: 0.0,
            ids: winners.iter().map(|w| w.id).collect(),
            haircuts: vec![0.0; winners.len()],
            seized: vec![0.0; winners.len()],
        }
    }

    pub fn total_seized(&self) -> f64 {
        num::sum(self.seized.iter().copied())
    }

    /// Endowment left to each winner, `w − x`.
    pub fn survivors(&self, winners: &[WinnerSlice]) -> Vec<f64> {
        winners.iter().zip(&self.seized).map(|(w, x)| num::pos(w.endowment - x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeficitSummary {
    /// `D = Σ (−e)₊`.
    pub deficit: f64,
    /// `Δ = max (−e)₊`.
    pub max_shortfall: f64,
    /// `U = Σ w`.
    pub capacity: f64,
    /// `υ = max w`.
    pub top_endowment: f64,
}

pub fn deficit_and_capacity(equities: &[f64], endowments: &[f64]) -> Result<DeficitSummary> {
    if equities.len() != endowments.len() {
        return Err(Error::domain(format!(
            "{} equities but {} endowments",
            equities.len(),
            endowments.len()
        )));
    }
    let short = || equities.iter().map(|e| num::pos(-e));
    Ok(DeficitSummary {
        deficit: num::sum(short()),
        max_shortfall: short().fold(0.0, f64::max),
        capacity: num::sum(endowments.iter().map(|w| num::pos(*w))),
        top_endowment: endowments.iter().fold(0.0, |a, w| a.max(*w)),
    })
}

fn check_budget(budget: f64) -> Result<()> {
    if budget >= 0.0 && budget.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("budget must be finite and >= 0, got {budget}")))
    }
}

fn check_feasible(budget: f64, capacity: f64) -> Result<()> {
    if budget > capacity * (1.0 + 1e-12) + 1e-12 {
        return Err(Error::Infeasible { budget, capacity });
    }
    Ok(())
}

/// Total seizable amount `Σ w β`.
pub fn capped_capacity(winners: &[WinnerSlice]) -> f64 {
    num::sum(winners.iter().map(|w| w.endowment * w.cap))
}

/// Moves a leftover rounding residual onto the single account with the most room.
fn close_budget(winners: &[WinnerSlice], caps: &[f64], seized: &mut [f64], budget: f64) {
    let residual = budget - num::sum(seized.iter().copied());
    if residual == 0.0 || residual.abs() > 1e-9 * budget.max(1.0) {
        return;
    }
    let room = |i: usize| {
        if residual > 0.0 {
            winners[i].endowment * caps[i] - seized[i]
        } else {
            seized[i]
        }
    };
    if let Some(best) = (0..seized.len()).max_by(|&a, &b| room(a).total_cmp(&room(b))) {
        if room(best) >= residual.abs() {
            seized[best] += residual;
        }
    }
}

fn finish(
    winners: &[WinnerSlice],
    caps: &[f64],
    haircuts: Vec<f64>,
    budget: f64,
    severity: Option<f64>,
) -> AdlAllocation {
    let mut seized: Vec<f64> = winners.iter().zip(&haircuts).map(|(w, h)| h * w.endowment).collect();
    close_budget(winners, caps, &mut seized, budget);
    let haircuts = winners
        .iter()
        .zip(&seized)
        .map(|(w, x)| if w.endowment > 0.0 { x / w.endowment } else { 0.0 })
        .collect();
    AdlAllocation { severity, budget, ids: winners.iter().map(|w| w.id).collect(), haircuts, seized }
}

/// Queue order: score descending, then id ascending.
pub fn queue_order(winners: &[WinnerSlice]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..winners.len()).collect();
    order.sort_by(|&a, &b| {
        winners[b].score.total_cmp(&winners[a].score).then(winners[a].id.cmp(&winners[b].id))
    });
    order
}

/// Greedy waterfall down the score ranking.
pub fn queue_allocate(winners: &[WinnerSlice], budget: f64) -> Result<AdlAllocation> {
    check_budget(budget)?;
    check_feasible(budget, capped_capacity(winners))?;
    let mut seized = vec![0.0; winners.len()];
    let mut remaining = budget;
    for i in queue_order(winners) {
        if remaining <= 0.0 {
            break;
        }
        let take = (winners[i].endowment * winners[i].cap).min(remaining);
        seized[i] = take;
        remaining -= take;
    }
    let haircuts = winners
        .iter()
        .zip(&seized)
        .map(|(w, x)| if w.endowment > 0.0 { x / w.endowment } else { 0.0 })
        .collect();
    Ok(AdlAllocation { severity: None, budget, ids: winners.iter().map(|w| w.id).collect(), haircuts, seized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreVariant {
    BinanceBankruptcy,
    HyperliquidEntry,
    HyperliquidRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreInputs {
    pub mark: f64,
    pub entry: f64,
    pub bankruptcy: f64,
    pub leverage: f64,
    pub notional: f64,
    pub account_value: f64,
}

/// Ranking score; a zero reference price or non-positive account value ranks first.
pub fn adl_score(inputs: &ScoreInputs, variant: ScoreVariant) -> f64 {
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { f64::INFINITY };
    match variant {
        ScoreVariant::BinanceBankruptcy => inputs.leverage * ratio(inputs.mark, inputs.bankruptcy),
        ScoreVariant::HyperliquidEntry => inputs.leverage * ratio(inputs.mark, inputs.entry),
        ScoreVariant::HyperliquidRatio => {
            ratio(inputs.mark, inputs.entry) * ratio(inputs.notional, inputs.account_value)
        }
    }
}

/// Uniform haircut `h = θD/U` on every positive endowment.
pub fn pro_rata(winners: &[WinnerSlice], theta: f64, deficit: f64) -> Result<AdlAllocation> {
    let budget = severity_budget(theta, deficit)?;
    let capacity = num::sum(winners.iter().map(|w| w.endowment));
    check_feasible(budget, capacity)?;
    if budget == 0.0 {
        return Ok(AdlAllocation::zero(winners, Some(theta)));
    }
    let h = (budget / capacity).min(1.0);
    let haircuts = winners.iter().map(|w| if w.endowment > 0.0 { h } else { 0.0 }).collect();
    Ok(finish(winners, &vec![1.0; winners.len()], haircuts, budget, Some(theta)))
}

fn severity_budget(theta: f64, deficit: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::domain(format!("severity must lie in [0, 1], got {theta}")));
    }
    if !(deficit >= 0.0) {
        return Err(Error::domain("deficit must be >= 0"));
    }
    Ok(theta * deficit)
}

/// Seizure proportional to `ℓ·w`, clamped at full haircut with the excess spread over the rest.
pub fn levered_pro_rata(winners: &[WinnerSlice], theta: f64, deficit: f64) -> Result<AdlAllocation> {
    let budget = severity_budget(theta, deficit)?;
    if winners.iter().any(|w| !(w.leverage >= 0.0)) {
        return Err(Error::domain("leverage must be >= 0"));
    }
    let caps = vec![1.0; winners.len()];
    let weights: Vec<f64> = winners.iter().map(|w| w.leverage).collect();
    let mut a = water_fill_with(winners, &caps, &weights, budget)?;
    a.severity = Some(theta);
    Ok(a)
}

/// Water level solution of `Σ w_i min(β_i, τ·w̃_i) = B`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaterLevel {
    pub level: f64,
    pub haircuts: Vec<f64>,
}

/// Exact segment walk over the sorted ratios `β/w̃`.
///
/// Accounts with no endowment, no cap or zero weight never receive a haircut.
/// When the budget equals the capacity every account sits at its cap and the
/// level is the largest finite ratio.
pub fn water_level(endowments: &[f64], caps: &[f64], weights: &[f64], budget: f64) -> Result<WaterLevel> {
    let n = endowments.len();
    if caps.len() != n || weights.len() != n {
        return Err(Error::domain("endowments, caps and weights must align"));
    }
    if weights.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::domain("risk weights must be >= 0"));
    }
    check_budget(budget)?;
    let active: Vec<usize> =
        (0..n).filter(|&i| endowments[i] > 0.0 && caps[i] > 0.0 && weights[i] > 0.0).collect();
    let capacity = num::sum(active.iter().map(|&i| endowments[i] * caps[i]));
    check_feasible(budget, capacity)?;
    let mut haircuts = vec![0.0; n];
    if budget == 0.0 {
        return Ok(WaterLevel { level: 0.0, haircuts });
    }

    let mut order = active;
    order.sort_by(|&a, &b| (caps[a] / weights[a]).total_cmp(&(caps[b] / weights[b])).then(a.cmp(&b)));

    let mut slope = CompensatedSum::new();
    for &i in &order {
        slope.add(endowments[i] * weights[i]);
    }
    let mut fixed = CompensatedSum::new();
    let mut level = f64::NAN;
    let mut saturated = 0;
    for (k, &i) in order.iter().enumerate() {
        let ratio = caps[i] / weights[i];
        let at_break = fixed.value() + slope.value() * ratio;
        if at_break >= budget {
            level = (budget - fixed.value()) / slope.value();
            saturated = k;
            break;
        }
        fixed.add(endowments[i] * caps[i]);
        slope.add(-endowments[i] * weights[i]);
        saturated = k + 1;
    }
    if level.is_nan() {
        // Budget at (rounded) capacity: everyone capped.
        level = order.last().map_or(0.0, |&i| caps[i] / weights[i]);
    }
    for (k, &i) in order.iter().enumerate() {
        haircuts[i] = if k < saturated { caps[i] } else { (level * weights[i]).min(caps[i]) };
    }
    Ok(WaterLevel { level, haircuts })
}

fn water_fill_with(winners: &[WinnerSlice], caps: &[f64], weights: &[f64], budget: f64) -> Result<AdlAllocation> {
    let w: Vec<f64> = winners.iter().map(|x| x.endowment).collect();
    let wl = water_level(&w, caps, weights, budget)?;
    Ok(finish(winners, caps, wl.haircuts, budget, None))
}

/// `h_i = min(η, β_i)` with the water level `η` meeting the budget.
pub fn capped_pro_rata(winners: &[WinnerSlice], budget: f64) -> Result<AdlAllocation> {
    let caps: Vec<f64> = winners.iter().map(|w| w.cap).collect();
    water_fill_with(winners, &caps, &vec![1.0; winners.len()], budget)
}

/// Risk-aware pro-rata: `h_i = min(β_i, τ·w̃_i)`.
pub fn rap_allocate(winners: &[WinnerSlice], risk_weights: &[f64], budget: f64) -> Result<AdlAllocation> {
    if risk_weights.len() != winners.len() {
        return Err(Error::domain("one risk weight per winner is required"));
    }
    let caps: Vec<f64> = winners.iter().map(|w| w.cap).collect();
    water_fill_with(winners, &caps, risk_weights, budget)
}

/// Risk shape `g` in the RAP weight `λ·g(λ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskShape {
    Linear,
    Power { exponent: f64 },
    Cvar { threshold: f64 },
}

impl RiskShape {
    pub fn g(&self, lambda: f64) -> f64 {
        match *self {
            RiskShape::Linear => lambda,
            RiskShape::Power { exponent } => lambda.powf(exponent),
            RiskShape::Cvar { threshold } => num::pos(lambda - threshold),
        }
    }

    pub fn weight(&self, lambda: f64) -> f64 {
        lambda * self.g(lambda)
    }
}

pub fn rap_weights(lambdas: &[f64], shape: RiskShape) -> Vec<f64> {
    lambdas.iter().map(|&l| shape.weight(l)).collect()
}

/// Normalized seizure shares `∝ e·w̃` that RAP assigns while no cap binds.
pub fn rap_shares(equities: &[f64], risk_weights: &[f64]) -> Result<Vec<f64>> {
    if equities.len() != risk_weights.len() {
        return Err(Error::domain("equities and weights must align"));
    }
    let raw: Vec<f64> = equities.iter().zip(risk_weights).map(|(e, w)| num::pos(*e) * w).collect();
    let total = num::sum(raw.iter().copied());
    if total <= 0.0 {
        return Err(Error::UndefinedRatio("rap shares"));
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Perspective transform `ρ_i = λ_i ψ(1/λ_i)`.
pub fn perspective_weights(lambdas: &[f64], psi: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    lambdas
        .iter()
        .map(|&l| {
            if l > 0.0 {
                Ok(l * psi(1.0 / l))
            } else {
                Err(Error::domain(format!("leverage must be > 0, got {l}")))
            }
        })
        .collect()
}

/// `g*(λ) = ρ(λ)/λ = ψ(1/λ)`.
pub fn g_star(lambda: f64, psi: impl Fn(f64) -> f64) -> f64 {
    psi(1.0 / lambda)
}

/// Net solvency gain per unit equity: `yield − λ·cost`.
pub fn net_solvency_gain(yield_rate: f64, lambda: f64, insurance_cost: f64) -> f64 {
    yield_rate - lambda * insurance_cost
}

/// `e′ = cash + pnl − x`.
pub fn post_adl_equity(cash: &[f64], pnl: &[f64], seized: &[f64], numeraire: Numeraire) -> Result<Vec<f64>> {
    if cash.len() != pnl.len() || cash.len() != seized.len() {
        return Err(Error::domain("cash, pnl and seizure sequences must align"));
    }
    (0..cash.len())
        .map(|i| {
            let limit = match numeraire {
                Numeraire::PnlOnly => num::pos(pnl[i]),
                Numeraire::Equity => num::pos(cash[i] + pnl[i]),
            };
            if seized[i] < 0.0 || seized[i] > limit * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::domain(format!(
                    "account {i}: seizure {} exceeds endowment {limit}",
                    seized[i]
                )));
            }
            Ok(cash[i] + pnl[i] - seized[i])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub budget_residual: f64,
    pub balanced: bool,
    pub feasible: bool,
    pub cap_violations: Vec<PositionId>,
    pub endowment_violations: Vec<PositionId>,
}

impl Diagnostics {
    pub fn ok(&self) -> bool {
        self.balanced && self.feasible && self.cap_violations.is_empty() && self.endowment_violations.is_empty()
    }
}

/// Checks budget balance, feasibility and caps without changing anything.
pub fn validate(alloc: &AdlAllocation, winners: &[WinnerSlice]) -> Diagnostics {
    let residual = alloc.budget - alloc.total_seized();
    let capacity = num::sum(winners.iter().map(|w| w.endowment));
    let tol = 1e-6 * alloc.budget.abs().max(1e-9);
    let mut cap_violations = Vec::new();
    let mut endowment_violations = Vec::new();
    for ((w, h), x) in winners.iter().zip(&alloc.haircuts).zip(&alloc.seized) {
        if *h > w.cap + 1e-9 || *h < -1e-12 {
            cap_violations.push(w.id);
        }
        if *x > w.endowment * (1.0 + 1e-9) + 1e-12 {
            endowment_violations.push(w.id);
        }
    }
    Diagnostics {
        budget_residual: residual,
        balanced: residual.abs() <= tol,
        feasible: alloc.budget <= capacity * (1.0 + 1e-12) + 1e-12,
        cap_violations,
        endowment_violations,
    }
}
