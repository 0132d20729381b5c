//! Exchange book: positions, prices, funding, PNL, equity and leverage masses.
//!
//! Time is a discrete index shared by every series. A position opened at
//! `open_time` accrues funding from `open_time + 1` onward and marks against
//! its entry price.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{self, CompensatedSum};

pub type PositionId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Long,
    Short,
}

impl Side {
    /// `+1` for longs, `-1` for shorts.
    pub fn sign(self) -> f64 {
        match self {
            Side::Long => 1.0,
            Side::Short => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub id: PositionId,
    pub quantity: f64,
    pub collateral: f64,
    pub open_time: usize,
    pub side: Side,
    pub entry_price: f64,
}

impl Position {
    pub fn new(
        id: PositionId,
        quantity: f64,
        collateral: f64,
        open_time: usize,
        side: Side,
        entry_price: f64,
    ) -> Result<Self> {
        let pos = Position { id, quantity, collateral, open_time, side, entry_price };
        pos.validate()?;
        Ok(pos)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.quantity >= 0.0) || !self.quantity.is_finite() {
            return Err(Error::domain(format!("position {}: quantity must be >= 0", self.id)));
        }
        if !(self.collateral >= 0.0) || !self.collateral.is_finite() {
            return Err(Error::domain(format!("position {}: collateral must be >= 0", self.id)));
        }
        if !(self.entry_price > 0.0) || !self.entry_price.is_finite() {
            return Err(Error::domain(format!("position {}: entry price must be > 0", self.id)));
        }
        Ok(())
    }

    pub fn sign(&self) -> f64 {
        self.side.sign()
    }

    /// Signed contract count `b·q`.
    pub fn signed_quantity(&self) -> f64 {
        self.sign() * self.quantity
    }

    /// Leverage at open: `entry·q / c`. Infinite for zero collateral.
    pub fn opening_leverage(&self) -> f64 {
        if self.collateral == 0.0 {
            return f64::INFINITY;
        }
        self.entry_price * self.quantity / self.collateral
    }

    /// Checks `m_I · entry · q ≤ c`.
    pub fn check_initial_margin(&self, margin: &MarginParams) -> Result<()> {
        let required = margin.initial * self.entry_price * self.quantity;
        if required > self.collateral * (1.0 + 1e-12) {
            return Err(Error::domain(format!(
                "position {}: initial margin {required} exceeds collateral {}",
                self.id, self.collateral
            )));
        }
        Ok(())
    }
}

/// Paired mark and oracle series on one clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePath {
    mark: Vec<f64>,
    oracle: Vec<f64>,
}

impl PricePath {
    pub fn new(mark: Vec<f64>, oracle: Vec<f64>) -> Result<Self> {
        if mark.len() != oracle.len() {
            return Err(Error::domain(format!(
                "mark has {} points but oracle has {}",
                mark.len(),
                oracle.len()
            )));
        }
        if mark.iter().chain(&oracle).any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::domain("prices must be finite and > 0"));
        }
        Ok(PricePath { mark, oracle })
    }

    /// Path whose oracle equals the mark at every step.
    pub fn from_marks(mark: Vec<f64>) -> Result<Self> {
        let oracle = mark.clone();
        Self::new(mark, oracle)
    }

    pub fn len(&self) -> usize {
        self.mark.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mark.is_empty()
    }

    pub fn mark(&self, t: usize) -> Result<f64> {
        self.mark.get(t).copied().ok_or(Error::Bounds { index: t, len: self.len() })
    }

    pub fn oracle(&self, t: usize) -> Result<f64> {
        self.oracle.get(t).copied().ok_or(Error::Bounds { index: t, len: self.len() })
    }

    pub fn marks(&self) -> &[f64] {
        &self.mark
    }

    pub fn oracles(&self) -> &[f64] {
        &self.oracle
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub initial: f64,
    pub maintenance: f64,
}

impl MarginParams {
    pub fn new(initial: f64, maintenance: f64) -> Result<Self> {
        let m = MarginParams { initial, maintenance };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial < 1.0) {
            return Err(Error::param("initial margin ratio must lie in (0, 1)"));
        }
        if !(self.maintenance >= 0.0 && self.maintenance < 1.0) {
            return Err(Error::param("maintenance margin ratio must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn max_leverage(&self) -> f64 {
        1.0 / self.initial
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundingParams {
    pub kappa: f64,
}

impl FundingParams {
    /// `kappa = 0` switches funding off.
    pub fn new(kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::param("funding kappa must be finite and >= 0"));
        }
        Ok(FundingParams { kappa })
    }
}

/// A collateral top-up (positive) or withdrawal (negative) effective from `time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollateralEvent {
    pub time: usize,
    pub id: PositionId,
    pub delta: f64,
}

/// The position book, ordered by identifier.
///
/// The venue's own net inventory is a single signed contract count kept only
/// for zero-sum bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Book {
    positions: Vec<Position>,
    collateral_events: Vec<CollateralEvent>,
    venue_net_quantity: f64,
}

impl Book {
    pub fn new(mut positions: Vec<Position>) -> Result<Self> {
        for p in &positions {
            p.validate()?;
        }
        positions.sort_by_key(|p| p.id);
        if positions.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::domain("position identifiers must be unique"));
        }
        Ok(Book { positions, collateral_events: Vec::new(), venue_net_quantity: 0.0 })
    }

    pub fn with_venue_inventory(mut self, signed_quantity: f64) -> Self {
        self.venue_net_quantity = signed_quantity;
        self
    }

    pub fn venue_net_quantity(&self) -> f64 {
        self.venue_net_quantity
    }

    pub fn push_collateral_event(&mut self, event: CollateralEvent) -> Result<()> {
        if self.get(event.id).is_none() {
            return Err(Error::domain(format!("collateral event for unknown position {}", event.id)));
        }
        self.collateral_events.push(event);
        self.collateral_events.sort_by_key(|e| (e.time, e.id));
        Ok(())
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn get(&self, id: PositionId) -> Option<&Position> {
        self.positions.binary_search_by_key(&id, |p| p.id).ok().map(|i| &self.positions[i])
    }

    pub fn get_mut(&mut self, id: PositionId) -> Option<&mut Position> {
        match self.positions.binary_search_by_key(&id, |p| p.id) {
            Ok(i) => Some(&mut self.positions[i]),
            Err(_) => None,
        }
    }

    /// Collateral of `id` after applying every event with `time ≤ t`, floored at zero.
    pub fn collateral_at(&self, id: PositionId, t: usize) -> Option<f64> {
        let base = self.get(id)?.collateral;
        let delta = num::sum(
            self.collateral_events.iter().filter(|e| e.id == id && e.time <= t).map(|e| e.delta),
        );
        Some(num::pos(base + delta))
    }

    /// Drops events for `id` up to and including `t` once they are folded into its collateral.
    pub(crate) fn fold_collateral_events(&mut self, id: PositionId, t: usize) {
        self.collateral_events.retain(|e| e.id != id || e.time > t);
    }

    /// Per-position state at horizon `t`.
    pub fn states_at(&self, path: &PricePath, rates: &[f64], t: usize) -> Result<Vec<AccountState>> {
        let p = path.mark(t)?;
        self.positions
            .iter()
            .filter(|pos| pos.open_time <= t)
            .map(|pos| {
                let pnl = pnl(pos, path, rates, t)?;
                let collateral = self.collateral_at(pos.id, t).unwrap_or(pos.collateral);
                Ok(AccountState {
                    id: pos.id,
                    side: pos.side,
                    quantity: pos.quantity,
                    notional: p * pos.quantity,
                    collateral,
                    pnl,
                    equity: collateral + pnl,
                })
            })
            .collect()
    }
}

/// Snapshot of one position at a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountState {
    pub id: PositionId,
    pub side: Side,
    pub quantity: f64,
    pub notional: f64,
    pub collateral: f64,
    pub pnl: f64,
    pub equity: f64,
}

impl AccountState {
    /// Current effective leverage `n / e`; `None` when equity is not positive.
    pub fn leverage(&self) -> Option<f64> {
        (self.equity > 0.0).then(|| self.notional / self.equity)
    }
}

fn check_price(p: f64) -> Result<()> {
    if p > 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("price must be > 0, got {p}")))
    }
}

/// Gross dollar size `p · q`.
pub fn notional_exposure(pos: &Position, p: f64) -> Result<f64> {
    check_price(p)?;
    Ok(p * pos.quantity)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenInterest {
    pub long: f64,
    pub short: f64,
    pub total: f64,
}

/// Long, short and total open interest at price `p` over every position in the book.
pub fn open_interest(book: &Book, p: f64) -> Result<OpenInterest> {
    open_interest_filtered(book, p, |_| true)
}

fn open_interest_filtered(book: &Book, p: f64, keep: impl Fn(&Position) -> bool) -> Result<OpenInterest> {
    check_price(p)?;
    let mut long = CompensatedSum::new();
    let mut short = CompensatedSum::new();
    for pos in book.positions().iter().filter(|q| keep(q)) {
        match pos.side {
            Side::Long => long.add(pos.quantity * p),
            Side::Short => short.add(pos.quantity * p),
        }
    }
    let (long, short) = (long.value(), short.value());
    Ok(OpenInterest { long, short, total: long + short })
}

/// Funding rate `γ = κ (L/S − p/p̂)`; positive means shorts pay longs.
pub fn funding_rate(book: &Book, p: f64, oracle: f64, params: &FundingParams) -> Result<f64> {
    rate_from_oi(&open_interest(book, p)?, p, oracle, params)
}

fn rate_from_oi(oi: &OpenInterest, p: f64, oracle: f64, params: &FundingParams) -> Result<f64> {
    check_price(oracle)?;
    if oi.short <= 0.0 {
        return Err(Error::UndefinedRate);
    }
    Ok(params.kappa * (oi.long / oi.short - p / oracle))
}

/// Funding rate at every step of `path`, counting only positions already open.
///
/// A step with no short open interest gets rate zero rather than failing, since
/// nobody is on the paying side; [`funding_rate`] still reports the error.
pub fn funding_rates(book: &Book, path: &PricePath, params: &FundingParams) -> Result<Vec<f64>> {
    (0..path.len()).map(|t| funding_rate_at(book, path, t, params)).collect()
}

/// Rate at step `t` of `path` over positions open at `t`, zero without shorts.
pub fn funding_rate_at(book: &Book, path: &PricePath, t: usize, params: &FundingParams) -> Result<f64> {
    let p = path.mark(t)?;
    let oi = open_interest_filtered(book, p, |pos| pos.open_time <= t)?;
    match rate_from_oi(&oi, p, path.oracle(t)?, params) {
        Err(Error::UndefinedRate) => Ok(0.0),
        other => other,
    }
}

fn check_window(path: &PricePath, rates: &[f64], from: usize, to: usize) -> Result<()> {
    if to >= path.len() {
        return Err(Error::Bounds { index: to, len: path.len() });
    }
    if to >= rates.len() {
        return Err(Error::Bounds { index: to, len: rates.len() });
    }
    if from > to {
        return Err(Error::domain(format!("window start {from} is after end {to}")));
    }
    Ok(())
}

/// Funding cash of `pos` at the single step `s`: `b q γ_s p_s`.
pub fn funding_cash(pos: &Position, path: &PricePath, rates: &[f64], s: usize) -> Result<f64> {
    check_window(path, rates, s, s)?;
    Ok(pos.signed_quantity() * rates[s] * path.mark(s)?)
}

/// Accrued funding `Γ = Σ_{s=from+1..=to} b q γ_s p_s`.
pub fn funding_accrual(pos: &Position, path: &PricePath, rates: &[f64], from: usize, to: usize) -> Result<f64> {
    check_window(path, rates, from, to)?;
    let bq = pos.signed_quantity();
    Ok(num::sum((from + 1..=to).map(|s| bq * rates[s] * path.marks()[s])))
}

/// `b q (p_T − p_entry) + Γ(open, T)`.
pub fn pnl(pos: &Position, path: &PricePath, rates: &[f64], horizon: usize) -> Result<f64> {
    if horizon < pos.open_time {
        return Err(Error::domain(format!(
            "horizon {horizon} precedes open time {} of position {}",
            pos.open_time, pos.id
        )));
    }
    let gamma = funding_accrual(pos, path, rates, pos.open_time, horizon)?;
    Ok(pos.signed_quantity() * (path.mark(horizon)? - pos.entry_price) + gamma)
}

/// Collateral plus PNL.
pub fn equity(pos: &Position, path: &PricePath, rates: &[f64], horizon: usize) -> Result<f64> {
    Ok(pos.collateral + pnl(pos, path, rates, horizon)?)
}

/// `e ≤ μ p |q|` (inclusive boundary).
pub fn maintenance_breach(pos: &Position, equity: f64, p: f64, margin: &MarginParams) -> bool {
    equity <= margin.maintenance * p * pos.quantity.abs()
}

/// Volume-weighted price of the first `q` contracts walked through `levels`.
pub fn vwap_fill(levels: &[(f64, f64)], q: f64) -> Result<f64> {
    if !(q > 0.0) {
        return Err(Error::domain("fill quantity must be > 0"));
    }
    let available = num::sum(levels.iter().map(|l| l.1));
    if available < q {
        return Err(Error::Liquidity { requested: q, available });
    }
    let mut remaining = q;
    let mut cost = CompensatedSum::new();
    for &(price, size) in levels {
        if remaining <= 0.0 {
            break;
        }
        let take = size.min(remaining);
        cost.add(price * take);
        remaining -= take;
    }
    Ok(cost.value() / q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeverageMasses {
    pub plus: f64,
    pub minus: f64,
    pub winners: Vec<PositionId>,
    pub losers: Vec<PositionId>,
}

/// Winner and loser leverage masses `ℓ± = Σ n/|e|` at horizon `t`.
/// Positions with exactly zero equity are in neither set.
pub fn leverage_masses(book: &Book, path: &PricePath, rates: &[f64], t: usize) -> Result<LeverageMasses> {
    let states = book.states_at(path, rates, t)?;
    Ok(leverage_masses_of(&states))
}

pub fn leverage_masses_of(states: &[AccountState]) -> LeverageMasses {
    let mut plus = CompensatedSum::new();
    let mut minus = CompensatedSum::new();
    let mut winners = Vec::new();
    let mut losers = Vec::new();
    for s in states {
        if s.equity > 0.0 {
            plus.add(s.notional / s.equity);
            winners.push(s.id);
        } else if s.equity < 0.0 {
            minus.add(s.notional / -s.equity);
            losers.push(s.id);
        }
    }
    LeverageMasses { plus: plus.value(), minus: minus.value(), winners, losers }
}
