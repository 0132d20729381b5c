//! Liquidation prices, fees, slice sizing and the per-tick liquidation loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::{self, Book, MarginParams, Position, PositionId, PricePath, Side};
use crate::num;

/// Lowest execution price a fill may print at.
pub const EXEC_PRICE_FLOOR: f64 = 1e-9;

/// Linear price impact: a slice of `Δq` contracts moves the average fill by `(α/2)Δq`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ImpactModel {
    pub alpha: f64,
}

impl ImpactModel {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::param("impact alpha must be finite and >= 0"));
        }
        Ok(ImpactModel { alpha })
    }
}

/// Affine liquidation fee. Rates are fractions, so 40 bps is `0.004`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FeeSchedule {
    pub fixed_fee: f64,
    pub mark_rate: f64,
    pub exec_rate: f64,
}

impl FeeSchedule {
    pub fn new(fixed_fee: f64, mark_rate: f64, exec_rate: f64) -> Result<Self> {
        if [fixed_fee, mark_rate, exec_rate].iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::param("fee schedule entries must be finite and >= 0"));
        }
        Ok(FeeSchedule { fixed_fee, mark_rate, exec_rate })
    }

    pub fn from_bps(fixed_fee: f64, mark_bps: f64, exec_bps: f64) -> Result<Self> {
        Self::new(fixed_fee, mark_bps * 1e-4, exec_bps * 1e-4)
    }
}

fn require_quantity(pos: &Position) -> Result<()> {
    if pos.quantity > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("position {} has zero quantity", pos.id)))
    }
}

/// `max(p − (c + Γ)/(b q), 0)`.
pub fn bankruptcy_price(pos: &Position, collateral_now: f64, funding_accrued: f64, p: f64) -> Result<f64> {
    require_quantity(pos)?;
    Ok(num::pos(p - (collateral_now + funding_accrued) / pos.signed_quantity()))
}

/// Mark at which the position first touches maintenance, written against its entry price.
pub fn liquidation_price(
    pos: &Position,
    collateral_now: f64,
    funding_accrued: f64,
    margin: &MarginParams,
) -> Result<f64> {
    require_quantity(pos)?;
    let mu = margin.maintenance;
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::param("maintenance ratio must lie in [0, 1)"));
    }
    let cushion = (collateral_now + funding_accrued) / pos.quantity;
    Ok(match pos.side {
        Side::Long => num::pos((pos.entry_price - cushion) / (1.0 - mu)),
        Side::Short => (pos.entry_price + cushion) / (1.0 + mu),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecPrice {
    pub price: f64,
    /// Set when the raw impact price fell below [`EXEC_PRICE_FLOOR`].
    pub degenerate: bool,
}

/// Average fill for closing `slice` contracts of a `side` position at mark `p`.
pub fn execution_price(p: f64, slice: f64, side: Side, impact: &ImpactModel) -> Result<ExecPrice> {
    if !(slice >= 0.0) {
        return Err(Error::domain("slice must be >= 0"));
    }
    let raw = p - side.sign() * 0.5 * impact.alpha * slice;
    if raw < EXEC_PRICE_FLOOR {
        Ok(ExecPrice { price: EXEC_PRICE_FLOOR, degenerate: true })
    } else {
        Ok(ExecPrice { price: raw, degenerate: false })
    }
}

pub fn liquidation_fee(slice: f64, p_mark: f64, p_exec: f64, sched: &FeeSchedule) -> f64 {
    if slice <= 0.0 {
        return 0.0;
    }
    sched.fixed_fee + sched.mark_rate * p_mark * slice + sched.exec_rate * p_exec * slice
}

/// Smallest slice restoring maintenance on the remainder.
///
/// Impact makes the post-slice equity quadratic in `Δq`. Fees are linearized at
/// the mark, so the execution-notional fee is charged on `p` rather than the
/// fill. With no admissible root the whole position is closed.
pub fn greedy_liquidation_size(
    pos: &Position,
    equity: f64,
    p: f64,
    margin: &MarginParams,
    impact: &ImpactModel,
    sched: &FeeSchedule,
) -> f64 {
    let q = pos.quantity;
    let mu = margin.maintenance;
    let c0 = mu * p * q - equity + sched.fixed_fee;
    if c0 <= 0.0 {
        return 0.0;
    }
    let b = (sched.mark_rate + sched.exec_rate - mu) * p;
    let a = 0.5 * impact.alpha;
    let root = if a == 0.0 {
        if b < 0.0 {
            c0 / -b
        } else {
            return q;
        }
    } else {
        let disc = b * b - 4.0 * a * c0;
        if disc < 0.0 || b >= 0.0 {
            return q;
        }
        // Smaller root in the cancellation-free form.
        2.0 * c0 / (-b + disc.sqrt())
    };
    root.min(q)
}

/// Closed-form slice when the fill price is known in advance, uncapped.
pub fn slice_for_fixed_exec(
    pos: &Position,
    equity: f64,
    p: f64,
    p_exec: f64,
    margin: &MarginParams,
    sched: &FeeSchedule,
) -> Option<f64> {
    let mu = margin.maintenance;
    let numerator = mu * p * pos.quantity - equity + sched.fixed_fee;
    let per_contract =
        pos.sign() * (p_exec - p) - sched.mark_rate * p - sched.exec_rate * p_exec + mu * p;
    if numerator <= 0.0 {
        return Some(0.0);
    }
    (per_contract > 0.0).then(|| numerator / per_contract)
}

/// [`slice_for_fixed_exec`] capped at the position size.
pub fn greedy_size_fixed_exec(
    pos: &Position,
    equity: f64,
    p: f64,
    p_exec: f64,
    margin: &MarginParams,
    sched: &FeeSchedule,
) -> f64 {
    slice_for_fixed_exec(pos, equity, p, p_exec, margin, sched).map_or(pos.quantity, |s| s.min(pos.quantity))
}

/// Loss from filling `slice` on the wrong side of the bankruptcy price.
pub fn slice_bad_debt(p_exec: f64, p_bk: f64, slice: f64, side: Side) -> f64 {
    let gap = match side {
        Side::Long => p_bk - p_exec,
        Side::Short => p_exec - p_bk,
    };
    num::pos(gap) * slice.max(0.0)
}

/// `ẽ = e + b Δq (p_exec − p) − τ`.
pub fn adjusted_equity(equity: f64, slice: f64, side: Side, p: f64, p_exec: f64, fee: f64) -> f64 {
    equity + side.sign() * slice * (p_exec - p) - fee
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidationOutcome {
    pub t: usize,
    pub position_id: PositionId,
    pub side: Side,
    pub slice: f64,
    pub exec_price: f64,
    pub fee: f64,
    pub bad_debt: f64,
    pub adjusted_equity: f64,
    pub full_close: bool,
    pub degenerate_fill: bool,
    /// True for the forced full close that follows a slice which left the remainder in breach.
    pub retry: bool,
}

/// How a breached position's slice is chosen.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum SliceStrategy {
    #[default]
    Greedy,
    /// Full close on every breach.
    FullClose,
    /// Fixed sizes keyed by `(t, id)`; breached positions without an entry are left alone.
    Scripted(BTreeMap<(usize, PositionId), f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidationConfig {
    pub margin: MarginParams,
    pub impact: ImpactModel,
    pub fees: FeeSchedule,
    pub strategy: SliceStrategy,
    pub retry: bool,
}

impl LiquidationConfig {
    pub fn new(margin: MarginParams, impact: ImpactModel, fees: FeeSchedule) -> Self {
        LiquidationConfig { margin, impact, fees, strategy: SliceStrategy::Greedy, retry: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TickReport {
    pub outcomes: Vec<LiquidationOutcome>,
}

impl TickReport {
    /// Period bad debt `D_t`.
    pub fn bad_debt(&self) -> f64 {
        num::sum(self.outcomes.iter().map(|o| o.bad_debt))
    }

    pub fn fees(&self) -> f64 {
        num::sum(self.outcomes.iter().map(|o| o.fee))
    }
}

struct Fill {
    slice: f64,
    exec: ExecPrice,
    fee: f64,
    adjusted: f64,
}

fn fill(equity: f64, slice: f64, side: Side, p: f64, cfg: &LiquidationConfig) -> Result<Fill> {
    let exec = execution_price(p, slice, side, &cfg.impact)?;
    let fee = liquidation_fee(slice, p, exec.price, &cfg.fees);
    let adjusted = adjusted_equity(equity, slice, side, p, exec.price, fee);
    Ok(Fill { slice, exec, fee, adjusted })
}

/// Runs one liquidation pass at step `t` in identifier order.
///
/// A filled position is re-based at the mark: its remainder keeps `max(ẽ, 0)`
/// as collateral with entry `p_t` and open time `t`, which leaves its equity
/// unchanged at `t` and starts funding afresh. Any negative `ẽ` is booked as bad
/// debt. With `retry` on, a partial slice whose remainder is still in breach is
/// followed by a single full close, and the shortfall is booked there instead.
pub fn liquidation_tick(
    book: &mut Book,
    path: &PricePath,
    rates: &[f64],
    t: usize,
    cfg: &LiquidationConfig,
) -> Result<TickReport> {
    let p = path.mark(t)?;
    let mu = cfg.margin.maintenance;
    let ids: Vec<PositionId> = book.positions().iter().map(|q| q.id).collect();
    let mut report = TickReport::default();

    for id in ids {
        let pos = book.get(id).expect("id taken from book").clone();
        if pos.quantity <= 0.0 || pos.open_time > t {
            continue;
        }
        let collateral = book.collateral_at(id, t).unwrap_or(pos.collateral);
        let equity = collateral + exchange::pnl(&pos, path, rates, t)?;
        if !exchange::maintenance_breach(&pos, equity, p, &cfg.margin) {
            continue;
        }
        let slice = match &cfg.strategy {
            SliceStrategy::Greedy => {
                greedy_liquidation_size(&pos, equity, p, &cfg.margin, &cfg.impact, &cfg.fees)
            }
            SliceStrategy::FullClose => pos.quantity,
            SliceStrategy::Scripted(script) => match script.get(&(t, id)) {
                Some(s) => s.clamp(0.0, pos.quantity),
                None => continue,
            },
        };
        if slice <= 0.0 {
            continue;
        }

        let first = fill(equity, slice, pos.side, p, cfg)?;
        let remaining = pos.quantity - slice;
        let full = remaining <= 0.0;
        let still_breached = !full && first.adjusted <= mu * p * remaining;

        if cfg.retry && still_breached {
            let second = fill(first.adjusted, remaining, pos.side, p, cfg)?;
            report.outcomes.push(outcome(t, &pos, &first, false, 0.0, false));
            let debt = num::pos(-second.adjusted);
            report.outcomes.push(outcome(t, &pos, &second, true, debt, true));
            rebase(book, id, t, p, 0.0, num::pos(second.adjusted));
        } else {
            let debt = num::pos(-first.adjusted);
            report.outcomes.push(outcome(t, &pos, &first, full, debt, false));
            rebase(book, id, t, p, remaining.max(0.0), num::pos(first.adjusted));
        }
    }
    Ok(report)
}

fn outcome(t: usize, pos: &Position, f: &Fill, full_close: bool, bad_debt: f64, retry: bool) -> LiquidationOutcome {
    LiquidationOutcome {
        t,
        position_id: pos.id,
        side: pos.side,
        slice: f.slice,
        exec_price: f.exec.price,
        fee: f.fee,
        bad_debt,
        adjusted_equity: f.adjusted,
        full_close,
        degenerate_fill: f.exec.degenerate,
        retry,
    }
}

fn rebase(book: &mut Book, id: PositionId, t: usize, p: f64, quantity: f64, collateral: f64) {
    book.fold_collateral_events(id, t);
    let pos = book.get_mut(id).expect("id taken from book");
    pos.quantity = quantity;
    pos.collateral = collateral;
    pos.entry_price = p;
    pos.open_time = t;
}
