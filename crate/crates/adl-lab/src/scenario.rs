//! Declarative JSON scenarios and the drivers that run them end to end.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::control::{self, Comparator, Trace, TwoRegimeStream};
use crate::error::{Error, Result};
use crate::exchange::{
    self, Book, CollateralEvent, FundingParams, MarginParams, Position, PositionId, PricePath, Side,
};
use crate::insurance::{self, FundParams, FundRow, FundState};
use crate::liquidation::{
    self, FeeSchedule, ImpactModel, LiquidationConfig, LiquidationOutcome, SliceStrategy,
};
use crate::metrics::{self, RiskSample, ScalingConfig};
use crate::num;
use crate::policies::{self, AdlAllocation, Numeraire, RiskShape, ScoreInputs, ScoreVariant, WinnerSlice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSpec {
    pub id: PositionId,
    #[serde(default)]
    pub label: Option<String>,
    pub quantity: f64,
    pub collateral: f64,
    #[serde(default)]
    pub open_time: usize,
    pub side: Side,
    pub entry_price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub mark: Vec<f64>,
    /// Defaults to the mark path.
    #[serde(default)]
    pub oracle: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategySpec {
    #[default]
    Greedy,
    FullClose,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub t: usize,
    pub id: PositionId,
    pub slice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiquidationSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default = "yes")]
    pub retry: bool,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
}

impl Default for LiquidationSpec {
    fn default() -> Self {
        LiquidationSpec { enabled: true, strategy: StrategySpec::Greedy, retry: true, script: Vec::new() }
    }
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundSpec {
    #[serde(default)]
    pub initial_balance: f64,
    #[serde(default)]
    pub alpha_liq: f64,
    #[serde(default)]
    pub beta_fund: f64,
    #[serde(default)]
    pub eta_trade: f64,
    /// Traded notional per step; missing steps count as zero.
    #[serde(default)]
    pub trade_notional: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Queue,
    ProRata,
    LeveredProRata,
    CappedProRata,
    Rap { shape: RiskShape },
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Queue => "queue".into(),
            PolicySpec::ProRata => "pro_rata".into(),
            PolicySpec::LeveredProRata => "levered_pro_rata".into(),
            PolicySpec::CappedProRata => "capped_pro_rata".into(),
            PolicySpec::Rap { shape } => match shape {
                RiskShape::Linear => "rap_linear".into(),
                RiskShape::Power { exponent } => format!("rap_power_{exponent}"),
                RiskShape::Cvar { threshold } => format!("rap_cvar_{threshold}"),
            },
        }
    }

    /// Allocates `θ·D` over `winners`.
    pub fn allocate(&self, winners: &[WinnerSlice], theta: f64, deficit: f64) -> Result<AdlAllocation> {
        let budget = theta * deficit;
        let mut a = match *self {
            PolicySpec::Queue => policies::queue_allocate(winners, budget)?,
            PolicySpec::ProRata => policies::pro_rata(winners, theta, deficit)?,
            PolicySpec::LeveredProRata => policies::levered_pro_rata(winners, theta, deficit)?,
            PolicySpec::CappedProRata => policies::capped_pro_rata(winners, budget)?,
            PolicySpec::Rap { shape } => {
                let lambdas: Vec<f64> = winners.iter().map(|w| w.leverage).collect();
                policies::rap_allocate(winners, &policies::rap_weights(&lambdas, shape), budget)?
            }
        };
        a.severity = Some(theta);
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdlSpec {
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    /// Policies run side by side by `policy-compare`.
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    #[serde(default = "one")]
    pub theta: f64,
    #[serde(default)]
    pub numeraire: Numeraire,
    #[serde(default = "one")]
    pub max_haircut: f64,
    #[serde(default)]
    pub equity_floor: f64,
}

impl Default for AdlSpec {
    fn default() -> Self {
        AdlSpec {
            policy: None,
            policies: Vec::new(),
            theta: 1.0,
            numeraire: Numeraire::PnlOnly,
            max_haircut: 1.0,
            equity_floor: 0.0,
        }
    }
}

/// Wealth-space account for policy comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountSpec {
    pub id: PositionId,
    pub cash: f64,
    pub pnl: f64,
    #[serde(default)]
    pub score: f64,
    #[serde(default = "one")]
    pub leverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub scaling: Option<ScalingConfig>,
    #[serde(default)]
    pub regret: Option<RegretSweep>,
}

/// Severity controllers on the two-regime stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSweep {
    pub theta_bar: f64,
    pub rounds: usize,
    /// Static severities to score alongside OMD.
    pub statics: Vec<f64>,
    /// Random regime draws seeded from the scenario seed instead of alternation.
    #[serde(default)]
    pub random: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRow {
    pub controller: String,
    pub theta: Option<f64>,
    /// Regret against the per-round best.
    pub regret_per_round: f64,
    /// Regret against the best fixed severity on a 101-point grid.
    pub regret_best_fixed: f64,
}

pub fn run_regret_sweep(spec: &RegretSweep, seed: u64) -> Result<Vec<RegretRow>> {
    if !(spec.theta_bar > 0.0) || spec.rounds == 0 {
        return Err(Error::param("regret sweep needs theta_bar > 0 and rounds > 0"));
    }
    let stream = if spec.random {
        TwoRegimeStream::random(spec.theta_bar, spec.rounds, seed)
    } else {
        TwoRegimeStream::alternating(spec.theta_bar, spec.rounds)
    };
    let best = stream.per_round_best();
    let grid: Vec<f64> = (0..=100).map(|i| spec.theta_bar * i as f64 / 100.0).collect();
    let loss = |t: usize, th: f64| stream.loss(t, th);
    let score = |name: String, theta: Option<f64>, trace: Trace| -> Result<RegretRow> {
        Ok(RegretRow {
            controller: name,
            theta,
            regret_per_round: control::regret(&trace.losses, &Comparator::PerRoundBest(&best))?,
            regret_best_fixed: control::regret(&trace.losses, &Comparator::BestFixed { grid: &grid, loss: &loss })?,
        })
    };
    let mut rows = vec![score("omd".into(), None, control::omd_on_stream(&stream, 0.5 * spec.theta_bar))?];
    for &th in &spec.statics {
        if !(0.0..=spec.theta_bar).contains(&th) {
            return Err(Error::param(format!("static severity {th} outside [0, theta_bar]")));
        }
        rows.push(score("static".into(), Some(th), control::static_on_stream(&stream, th))?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub positions: Vec<PositionSpec>,
    #[serde(default)]
    pub path: Option<PathSpec>,
    #[serde(default = "default_margin")]
    pub margin: MarginParams,
    #[serde(default = "default_funding")]
    pub funding: FundingParams,
    #[serde(default)]
    pub fees: FeeSchedule,
    #[serde(default)]
    pub impact: ImpactModel,
    #[serde(default)]
    pub liquidation: LiquidationSpec,
    #[serde(default)]
    pub collateral_events: Vec<CollateralEvent>,
    #[serde(default)]
    pub fund: Option<FundSpec>,
    #[serde(default)]
    pub adl: AdlSpec,
    #[serde(default)]
    pub accounts: Vec<AccountSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_margin() -> MarginParams {
    MarginParams { initial: 0.1, maintenance: 0.05 }
}

fn default_funding() -> FundingParams {
    FundingParams { kappa: 1.0 }
}

impl ScenarioConfig {
    /// Parses and validates a scenario. In strict mode any key the schema
    /// does not know is an error; otherwise unknown keys are returned.
    pub fn from_json(text: &str, strict: bool) -> Result<(Self, Vec<String>)> {
        let mut de = serde_json::Deserializer::from_str(text);
        let mut unknown = Vec::new();
        let cfg: ScenarioConfig = serde_ignored::deserialize(&mut de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Input(format!("scenario: {e}")))?;
        de.end().map_err(|e| Error::Input(format!("scenario: {e}")))?;
        if strict && !unknown.is_empty() {
            return Err(Error::Input(format!("unknown keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok((cfg, unknown))
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        FundingParams::new(self.funding.kappa)?;
        FeeSchedule::new(self.fees.fixed_fee, self.fees.mark_rate, self.fees.exec_rate)?;
        ImpactModel::new(self.impact.alpha)?;
        if !(0.0..=1.0).contains(&self.adl.theta) {
            return Err(Error::param("adl.theta must lie in [0, 1]"));
        }
        if let Some(f) = &self.fund {
            FundParams::new(f.alpha_liq, f.beta_fund, f.eta_trade)?;
            FundState::new(f.initial_balance)?;
        }
        if !self.positions.is_empty() && self.path.is_none() {
            return Err(Error::Input("positions given without a price path".into()));
        }
        Ok(())
    }

    pub fn book(&self) -> Result<Book> {
        let positions = self
            .positions
            .iter()
            .map(|p| Position::new(p.id, p.quantity, p.collateral, p.open_time, p.side, p.entry_price))
            .collect::<Result<Vec<_>>>()?;
        let mut book = Book::new(positions)?;
        for ev in &self.collateral_events {
            book.push_collateral_event(*ev)?;
        }
        Ok(book)
    }

    pub fn price_path(&self) -> Result<Option<PricePath>> {
        self.path
            .as_ref()
            .map(|p| PricePath::new(p.mark.clone(), p.oracle.clone().unwrap_or_else(|| p.mark.clone())))
            .transpose()
    }

    pub fn liquidation_config(&self) -> LiquidationConfig {
        let strategy = match self.liquidation.strategy {
            StrategySpec::Greedy => SliceStrategy::Greedy,
            StrategySpec::FullClose => SliceStrategy::FullClose,
            StrategySpec::Scripted => {
                SliceStrategy::Scripted(self.liquidation.script.iter().map(|s| ((s.t, s.id), s.slice)).collect())
            }
        };
        LiquidationConfig { margin: self.margin, impact: self.impact, fees: self.fees, strategy, retry: self.liquidation.retry }
    }

    fn label(&self, id: PositionId) -> String {
        self.positions
            .iter()
            .find(|p| p.id == id)
            .and_then(|p| p.label.clone())
            .unwrap_or_else(|| id.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub id: PositionId,
    pub label: String,
    pub quantity: f64,
    pub collateral: f64,
    pub pnl: f64,
    pub equity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationAccount {
    pub id: PositionId,
    pub w: f64,
    pub beta: f64,
    pub h: f64,
    pub x: f64,
    pub e_before: f64,
    pub e_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub t: usize,
    pub policy: String,
    pub theta: f64,
    pub budget: f64,
    pub accounts: Vec<AllocationAccount>,
}

impl AllocationRecord {
    pub fn new(t: usize, policy: String, theta: f64, winners: &[WinnerSlice], a: &AdlAllocation) -> Self {
        let accounts = winners
            .iter()
            .zip(a.haircuts.iter().zip(&a.seized))
            .map(|(w, (h, x))| AllocationAccount {
                id: w.id,
                w: w.endowment,
                beta: w.cap,
                h: *h,
                x: *x,
                e_before: w.equity,
                e_after: w.equity - x,
            })
            .collect();
        AllocationRecord { t, policy, theta, budget: a.budget, accounts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassRow {
    pub t: usize,
    pub plus: f64,
    pub minus: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub funding_rates: Vec<f64>,
    pub trajectory: Vec<TrajectoryRow>,
    pub liquidations: Vec<LiquidationOutcome>,
    pub fund: Vec<FundRow>,
    pub allocations: Vec<AllocationRecord>,
    pub leverage_masses: Vec<MassRow>,
}

/// Runs the exchange step by step: funding rate, liquidation pass, fund
/// waterfall, then ADL on whatever the fund could not cover.
///
/// The funding rate at `t` is taken over the book as it stands before the
/// liquidation pass at `t`. The fund's funding stream is the absolute
/// funding cash exchanged at `t`. Seized amounts leave the winners as
/// collateral withdrawals dated `t`, so the equities recorded for `t` are
/// post-ADL.
pub fn run_simulation(cfg: &ScenarioConfig) -> Result<SimulationOutput> {
    let mut out = SimulationOutput::default();
    let Some(path) = cfg.price_path()? else {
        return Ok(out);
    };
    let mut book = cfg.book()?;
    let liq = cfg.liquidation_config();
    let mut fund = match &cfg.fund {
        Some(f) => Some((FundParams::new(f.alpha_liq, f.beta_fund, f.eta_trade)?, FundState::new(f.initial_balance)?)),
        None => None,
    };
    let mut rates = Vec::with_capacity(path.len());

    for t in 0..path.len() {
        rates.push(exchange::funding_rate_at(&book, &path, t, &cfg.funding)?);
        let tick = if cfg.liquidation.enabled {
            liquidation::liquidation_tick(&mut book, &path, &rates, t, &liq)?
        } else {
            Default::default()
        };
        let deficit = tick.bad_debt();
        out.liquidations.extend(tick.outcomes.iter().cloned());

        let mut residual = deficit;
        if let Some((params, state)) = fund.as_mut() {
            let funding_flow = if t == 0 {
                0.0
            } else {
                num::sum(
                    book.positions()
                        .iter()
                        .filter(|p| p.open_time < t)
                        .map(|p| exchange::funding_cash(p, &path, &rates, t).map(f64::abs))
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            let traded = cfg.fund.as_ref().and_then(|f| f.trade_notional.get(t).copied()).unwrap_or(0.0);
            let step = insurance::fund_step(*state, tick.fees(), traded, funding_flow, deficit, params)?;
            *state = step.state;
            residual = step.residual;
            out.fund.push(FundRow {
                t,
                balance: step.state.balance,
                inflow: step.inflow,
                deficit,
                coverage: step.coverage,
                residual: step.residual,
            });
        }

        if residual > 0.0 {
            if let Some(policy) = cfg.adl.policy {
                let states = book.states_at(&path, &rates, t)?;
                let winners = winners_from_states(&states, &book, &path, t, &cfg.adl)?;
                let a = policy.allocate(&winners, cfg.adl.theta, residual)?;
                for (w, x) in winners.iter().zip(&a.seized) {
                    if *x > 0.0 {
                        book.push_collateral_event(CollateralEvent { time: t, id: w.id, delta: -x })?;
                    }
                }
                out.allocations.push(AllocationRecord::new(t, policy.name(), cfg.adl.theta, &winners, &a));
            }
        }

        let states = book.states_at(&path, &rates, t)?;
        let m = exchange::leverage_masses_of(&states);
        out.leverage_masses.push(MassRow { t, plus: m.plus, minus: m.minus });
        out.trajectory.extend(states.iter().map(|s| TrajectoryRow {
            t,
            id: s.id,
            label: cfg.label(s.id),
            quantity: s.quantity,
            collateral: s.collateral,
            pnl: s.pnl,
            equity: s.equity,
        }));
    }
    out.funding_rates = rates;
    Ok(out)
}

fn winners_from_states(
    states: &[exchange::AccountState],
    book: &Book,
    path: &PricePath,
    t: usize,
    adl: &AdlSpec,
) -> Result<Vec<WinnerSlice>> {
    let p = path.mark(t)?;
    states
        .iter()
        .map(|s| {
            let entry = book.get(s.id).map_or(p, |pos| pos.entry_price);
            let leverage = s.leverage().unwrap_or(0.0);
            let score = policies::adl_score(
                &ScoreInputs {
                    mark: p,
                    entry,
                    bankruptcy: 0.0,
                    leverage,
                    notional: s.notional,
                    account_value: s.equity,
                },
                ScoreVariant::HyperliquidEntry,
            );
            Ok(WinnerSlice::new(s.id, s.collateral, s.pnl, adl.numeraire)
                .with_limits(adl.max_haircut, adl.equity_floor)
                .with_score(score)
                .with_leverage(leverage))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub budget: f64,
    pub ptsr: Option<f64>,
    pub pmr: Option<f64>,
    pub top_survivor: Option<f64>,
    /// Top-winner survivor of this policy minus that of the first policy.
    pub survivor_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceCell {
    pub left: String,
    pub right: String,
    /// Mass-weighted haircut profile of `left` is weakly submajorized by `right`.
    pub submajorized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyComparison {
    pub deficit: f64,
    pub max_shortfall: f64,
    pub capacity: f64,
    pub theta: f64,
    /// `B(1 − w₍₁₎/U)` when the budget is at most the largest endowment.
    pub predicted_queue_gap: Option<f64>,
    pub rows: Vec<CompareRow>,
    pub dominance: Vec<DominanceCell>,
    pub allocations: Vec<AllocationRecord>,
}

/// Runs every listed policy at the same severity on the wealth-space book.
pub fn compare_policies(cfg: &ScenarioConfig) -> Result<PolicyComparison> {
    if cfg.adl.policies.len() < 2 {
        return Err(Error::Input("policy-compare needs at least two policies".into()));
    }
    let winners: Vec<WinnerSlice> = cfg
        .accounts
        .iter()
        .map(|a| {
            WinnerSlice::new(a.id, a.cash, a.pnl, cfg.adl.numeraire)
                .with_limits(cfg.adl.max_haircut, cfg.adl.equity_floor)
                .with_score(a.score)
                .with_leverage(a.leverage)
        })
        .collect();
    let equities: Vec<f64> = winners.iter().map(|w| w.equity).collect();
    let endowments: Vec<f64> = winners.iter().map(|w| w.endowment).collect();
    let summary = policies::deficit_and_capacity(&equities, &endowments)?;
    let theta = cfg.adl.theta;
    let budget = theta * summary.deficit;

    let mut allocations = Vec::new();
    let mut rows: Vec<CompareRow> = Vec::new();
    for p in &cfg.adl.policies {
        let a = p.allocate(&winners, theta, summary.deficit)?;
        let post: Vec<f64> = endowments.iter().zip(&a.seized).map(|(w, x)| num::pos(w - x)).collect();
        let sample = RiskSample { winners_post: post, d_pi: budget, delta_pi: theta * summary.max_shortfall };
        let top = metrics::top_winner_survivor(&endowments, &a.seized);
        let first = rows.first().and_then(|r| r.top_survivor);
        rows.push(CompareRow {
            policy: p.name(),
            budget,
            ptsr: metrics::ptsr(&sample).ok(),
            pmr: metrics::pmr(&sample).ok(),
            top_survivor: top,
            survivor_gap: top.zip(first).map(|(a, b)| a - b).or(top.map(|_| 0.0)),
        });
        allocations.push(AllocationRecord::new(0, p.name(), theta, &winners, &a));
    }

    let profiles: Vec<Vec<(f64, f64)>> = allocations
        .iter()
        .map(|r| r.accounts.iter().map(|a| (a.h, a.w)).collect())
        .collect();
    let mut dominance = Vec::new();
    for (i, a) in allocations.iter().enumerate() {
        for (j, b) in allocations.iter().enumerate() {
            if i != j {
                dominance.push(DominanceCell {
                    left: a.policy.clone(),
                    right: b.policy.clone(),
                    submajorized: metrics::mass_submajorizes(&profiles[i], &profiles[j], 1e-9),
                });
            }
        }
    }
    Ok(PolicyComparison {
        deficit: summary.deficit,
        max_shortfall: summary.max_shortfall,
        capacity: summary.capacity,
        theta,
        predicted_queue_gap: metrics::queue_top_gap(&endowments, budget),
        rows,
        dominance,
        allocations,
    })
}

/// Equities per label at step `t`, for quick lookups in tests and reports.
pub fn equities_at(out: &SimulationOutput, t: usize) -> BTreeMap<String, f64> {
    out.trajectory.iter().filter(|r| r.t == t).map(|r| (r.label.clone(), r.equity)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_depend_on_mode() {
        let text = r#"{"name":"x","bogus":1,"adl":{"theta":0.5,"extra":true}}"#;
        let (_, unknown) = ScenarioConfig::from_json(text, false).unwrap();
        assert_eq!(unknown, vec!["bogus".to_string(), "adl.extra".to_string()]);
        assert!(matches!(ScenarioConfig::from_json(text, true), Err(Error::Input(_))));
    }

    #[test]
    fn empty_scenario_runs() {
        let (cfg, _) = ScenarioConfig::from_json("{}", true).unwrap();
        let out = run_simulation(&cfg).unwrap();
        assert!(out.trajectory.is_empty() && out.funding_rates.is_empty());
    }

    #[test]
    fn malformed_and_invalid_rejected() {
        assert!(ScenarioConfig::from_json("{", false).is_err());
        assert!(ScenarioConfig::from_json(r#"{"adl":{"theta":2}}"#, false).is_err());
        assert!(ScenarioConfig::from_json(
            r#"{"positions":[{"id":1,"quantity":1,"collateral":1,"side":"long","entry_price":1}]}"#,
            false
        )
        .is_err());
    }
}
