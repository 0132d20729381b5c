//! Multi-round severity control and the small strategic models around it.
//!
//! Severity rules map the information available at a round to `θ_t`. The
//! online controllers treat each round's loss as convex in `θ` and run mirror
//! descent on it; [`mdic_step`] also carries winner weights on the simplex and
//! dual prices for long-run constraints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{self, CompensatedSum};
use crate::policies::{self, Numeraire, RiskShape, WinnerSlice};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundState {
    pub t: usize,
    pub deficit: f64,
    pub winners: Vec<WinnerSlice>,
    pub shock_count: u32,
}

/// `min(1, U/D)`, or 1 with no deficit.
pub fn severity_match(state: &RoundState) -> Result<f64> {
    if !(state.deficit >= 0.0) {
        return Err(Error::domain("deficit must be >= 0"));
    }
    if state.deficit == 0.0 {
        return Ok(1.0);
    }
    let capacity = num::sum(state.winners.iter().map(|w| w.endowment));
    Ok((capacity / state.deficit).min(1.0))
}

/// `θ₀ α^k`.
pub fn severity_backoff(theta0: f64, decay: f64, shock_count: u32) -> Result<f64> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::param("decay must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&theta0) {
        return Err(Error::param("theta0 must lie in [0, 1]"));
    }
    Ok(theta0 * decay.powi(shock_count as i32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub t: usize,
    pub theta: f64,
    pub weights: Vec<f64>,
    pub duals: Vec<f64>,
    pub eta: f64,
    pub gamma: f64,
    /// Set when a weight update collapsed to zero mass and was floored.
    pub floored: bool,
}

impl ControllerState {
    /// Uniform weights over `k` winners, zero duals, round counter at zero.
    pub fn uniform(theta: f64, k: usize, n_constraints: usize) -> Self {
        ControllerState {
            t: 0,
            theta,
            weights: vec![1.0 / k.max(1) as f64; k],
            duals: vec![0.0; n_constraints],
            eta: 0.0,
            gamma: 0.0,
            floored: false,
        }
    }
}

/// Step-size constants: `η_t = D_max/(G√t)` for `θ`, `η_scale/√t` and `γ_scale/√t` for MDIC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub d_max: f64,
    pub g_bound: f64,
    pub eta_scale: f64,
    pub gamma_scale: f64,
}

impl StepSizes {
    pub fn severity(d_max: f64, g_bound: f64) -> Self {
        StepSizes { d_max, g_bound, eta_scale: 1.0, gamma_scale: 1.0 }
    }

    fn theta_step(&self, t: usize) -> f64 {
        self.d_max / (self.g_bound * (t as f64).sqrt())
    }
}

/// Euclidean mirror step `θ ← clamp(θ − η_t g, [0, Θ])`.
pub fn omd_severity_step(state: &ControllerState, g: f64, cap: f64, steps: &StepSizes) -> ControllerState {
    let t = state.t + 1;
    let eta = steps.theta_step(t);
    ControllerState { t, theta: (state.theta - eta * g).clamp(0.0, cap), eta, ..state.clone() }
}

/// Residual value kept when a budget is seized cheapest-first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualValue {
    pub value: f64,
    /// Derivative of the kept value in the budget: minus the marginal unit value.
    pub subgradient: f64,
}

/// Fractional knapsack: seize `budget` from accounts holding `caps[i]` units
/// worth `unit_values[i]` each, lowest value first.
pub fn residual_value(unit_values: &[f64], caps: &[f64], budget: f64) -> Result<ResidualValue> {
    if unit_values.len() != caps.len() {
        return Err(Error::domain("values and caps must align"));
    }
    let capacity = num::sum(caps.iter().copied());
    if budget > capacity * (1.0 + 1e-12) {
        return Err(Error::Infeasible { budget, capacity });
    }
    let mut order: Vec<usize> = (0..caps.len()).filter(|&i| caps[i] > 0.0).collect();
    order.sort_by(|&a, &b| unit_values[a].total_cmp(&unit_values[b]).then(a.cmp(&b)));
    let mut kept = CompensatedSum::new();
    for i in 0..caps.len() {
        kept.add(unit_values[i] * caps[i]);
    }
    let mut left = budget;
    let mut marginal = order.first().map_or(0.0, |&i| unit_values[i]);
    for &i in &order {
        if left <= 0.0 {
            break;
        }
        let take = caps[i].min(left);
        kept.add(-unit_values[i] * take);
        left -= take;
        marginal = unit_values[i];
    }
    Ok(ResidualValue { value: kept.value(), subgradient: -marginal })
}

/// Long-run constraint with its current value and gradient in the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEval {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Primal–dual update: entropic step on the weights, Euclidean step on `θ`,
/// projected ascent on the duals.
pub fn mdic_step(
    state: &ControllerState,
    grad_theta: f64,
    grad_weights: &[f64],
    constraints: &[ConstraintEval],
    cap: f64,
    steps: &StepSizes,
) -> Result<ControllerState> {
    let k = state.weights.len();
    if grad_weights.len() != k || constraints.iter().any(|c| c.grad.len() != k) {
        return Err(Error::domain("gradient length must match the weight vector"));
    }
    if constraints.len() != state.duals.len() {
        return Err(Error::domain("one dual per constraint is required"));
    }
    if constraints.iter().any(|c| !c.value.is_finite()) {
        return Err(Error::domain("constraint values must be finite"));
    }
    let t = state.t + 1;
    let root = (t as f64).sqrt();
    let eta = steps.eta_scale / root;
    let gamma = steps.gamma_scale / root;

    let mut weights: Vec<f64> = (0..k)
        .map(|i| {
            let lagr = grad_weights[i]
                + constraints.iter().zip(&state.duals).map(|(c, l)| l * c.grad[i]).sum::<f64>();
            state.weights[i] * (-eta * lagr).exp()
        })
        .collect();
    let mut floored = false;
    let mut mass = num::sum(weights.iter().copied());
    if !(mass > 0.0) || !mass.is_finite() {
        weights.iter_mut().for_each(|w| *w = w.max(1e-12));
        floored = true;
        mass = num::sum(weights.iter().copied());
    }
    weights.iter_mut().for_each(|w| *w /= mass);

    let duals = state.duals.iter().zip(constraints).map(|(l, c)| num::pos(l + gamma * c.value)).collect();
    let theta = (state.theta - steps.theta_step(t) * grad_theta).clamp(0.0, cap);
    Ok(ControllerState { t, theta, weights, duals, eta, gamma, floored })
}

/// `KL(p ‖ q)` on the simplex.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    num::sum(p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()))
}

pub enum Comparator<'a> {
    PerRoundBest(&'a [f64]),
    /// Best single `θ` from `grid` under `loss(t, θ)`.
    BestFixed { grid: &'a [f64], loss: &'a dyn Fn(usize, f64) -> f64 },
}

pub fn regret(played: &[f64], comparator: &Comparator) -> Result<f64> {
    if played.is_empty() {
        return Err(Error::Empty("played losses"));
    }
    let total = num::sum(played.iter().copied());
    let bench = match comparator {
        Comparator::PerRoundBest(best) => {
            if best.len() != played.len() {
                return Err(Error::domain("per-round benchmark length mismatch"));
            }
            num::sum(best.iter().copied())
        }
        Comparator::BestFixed { grid, loss } => grid
            .iter()
            .map(|&th| num::sum((0..played.len()).map(|t| loss(t, th))))
            .fold(f64::INFINITY, f64::min),
    };
    Ok(total - bench)
}

/// Loss stream that switches between `f = θ` (regime A) and `f = θ̄ − θ` (regime B).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoRegimeStream {
    pub theta_bar: f64,
    /// `true` marks regime A.
    pub regimes: Vec<bool>,
}

impl TwoRegimeStream {
    pub fn alternating(theta_bar: f64, rounds: usize) -> Self {
        TwoRegimeStream { theta_bar, regimes: (0..rounds).map(|t| t % 2 == 0).collect() }
    }

    pub fn random(theta_bar: f64, rounds: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TwoRegimeStream { theta_bar, regimes: (0..rounds).map(|_| rng.random::<bool>()).collect() }
    }

    pub fn len(&self) -> usize {
        self.regimes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimes.is_empty()
    }

    pub fn loss(&self, t: usize, theta: f64) -> f64 {
        if self.regimes[t] {
            theta
        } else {
            self.theta_bar - theta
        }
    }

    pub fn gradient(&self, t: usize) -> f64 {
        if self.regimes[t] {
            1.0
        } else {
            -1.0
        }
    }

    /// Per-round minimum, which is zero in both regimes.
    pub fn per_round_best(&self) -> Vec<f64> {
        vec![0.0; self.len()]
    }
}

/// Trace of a controller over a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub thetas: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Plays OMD on `stream` from `θ₀` with `D_max = θ̄`, `G = 1`.
pub fn omd_on_stream(stream: &TwoRegimeStream, theta0: f64) -> Trace {
    let steps = StepSizes::severity(stream.theta_bar, 1.0);
    let mut state = ControllerState::uniform(theta0, 0, 0);
    let mut trace = Trace { thetas: Vec::with_capacity(stream.len()), losses: Vec::with_capacity(stream.len()) };
    for t in 0..stream.len() {
        trace.thetas.push(state.theta);
        trace.losses.push(stream.loss(t, state.theta));
        state = omd_severity_step(&state, stream.gradient(t), stream.theta_bar, &steps);
    }
    trace
}

/// Static severity played on every round.
pub fn static_on_stream(stream: &TwoRegimeStream, theta: f64) -> Trace {
    Trace { thetas: vec![theta; stream.len()], losses: (0..stream.len()).map(|t| stream.loss(t, theta)).collect() }
}

/// Synthetic MDIC workload: `k` winners with mean loss `−ρ_i`, constraint `s·v ≤ s̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdicScenario {
    pub rho: Vec<f64>,
    pub s: Vec<f64>,
    pub s_bar: f64,
    pub noise: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl MdicScenario {
    pub fn reference() -> Self {
        MdicScenario {
            rho: vec![0.2, 0.5, 0.9, 1.4, 2.0],
            s: vec![0.1, 0.3, 0.5, 0.8, 1.0],
            s_bar: 0.5,
            noise: 0.3,
            rounds: 20_000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdicRun {
    /// Constraint value `s·v_t − s̄` at each round.
    pub violations: Vec<f64>,
    pub min_weight_sum: f64,
    pub max_weight_sum: f64,
    pub min_dual: f64,
    pub floored_rounds: usize,
}

impl MdicRun {
    /// `(Σ_{u≤t} c_u)₊ / t` for `t = 1..T`.
    pub fn average_violation(&self) -> Vec<f64> {
        let mut acc = CompensatedSum::new();
        self.violations
            .iter()
            .enumerate()
            .map(|(i, c)| {
                acc.add(*c);
                num::pos(acc.value()) / (i + 1) as f64
            })
            .collect()
    }

    /// Running supremum from the right of the average violation.
    pub fn violation_envelope(&self) -> Vec<f64> {
        let avg = self.average_violation();
        let mut env = avg.clone();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        env
    }

    /// Log-log slope of the envelope over rounds `from..=to` (1-based).
    pub fn envelope_slope(&self, from: usize, to: usize) -> f64 {
        let env = self.violation_envelope();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for t in from..=to.min(env.len()) {
            if env[t - 1] > 0.0 {
                x.push((t as f64).ln());
                y.push(env[t - 1].ln());
            }
        }
        num::ols_slope(&x, &y)
    }
}

pub fn run_mdic(sc: &MdicScenario) -> Result<MdicRun> {
    let k = sc.rho.len();
    if sc.s.len() != k || k == 0 {
        return Err(Error::param("rho and s must be nonempty and aligned"));
    }
    let noise = Normal::new(0.0, sc.noise).map_err(|e| Error::param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let steps = StepSizes { d_max: 1.0, g_bound: 1.0, eta_scale: 1.0, gamma_scale: 1.0 };
    let mut state = ControllerState::uniform(1.0, k, 1);
    let mut run = MdicRun {
        violations: Vec::with_capacity(sc.rounds),
        min_weight_sum: f64::INFINITY,
        max_weight_sum: f64::NEG_INFINITY,
        min_dual: f64::INFINITY,
        floored_rounds: 0,
    };
    for _ in 0..sc.rounds {
        let c = num::sum(state.weights.iter().zip(&sc.s).map(|(v, s)| v * s)) - sc.s_bar;
        run.violations.push(c);
        let grad: Vec<f64> = sc.rho.iter().map(|r| -r + noise.sample(&mut rng)).collect();
        let cons = [ConstraintEval { value: c, grad: sc.s.clone() }];
        state = mdic_step(&state, 0.0, &grad, &cons, 1.0, &steps)?;
        let mass = num::sum(state.weights.iter().copied());
        run.min_weight_sum = run.min_weight_sum.min(mass);
        run.max_weight_sum = run.max_weight_sum.max(mass);
        run.min_dual = run.min_dual.min(state.duals.iter().copied().fold(f64::INFINITY, f64::min));
        run.floored_rounds += usize::from(state.floored);
    }
    Ok(run)
}

/// Two-player unwind game outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationGame {
    /// Pure Nash profiles `(leader, follower)` of the simultaneous game.
    pub nash: Vec<(u8, u8)>,
    /// Subgame-perfect outcome when the leader moves first.
    pub spe: (u8, u8),
    pub leader_cost: f64,
    pub follower_cost: f64,
}

/// Each player pays `f·x_i + c·[x_1 + x_2 < T]` for `x_i ∈ {0, 1}`.
pub fn stackelberg_coordination(f: f64, c: f64, threshold: f64) -> Result<CoordinationGame> {
    if !(c > f && f > 0.0) {
        return Err(Error::param("need c > f > 0"));
    }
    if !(threshold > 1.0 && threshold <= 2.0) {
        return Err(Error::param("threshold must lie in (1, 2]"));
    }
    let cost = |mine: u8, other: u8| {
        let shortfall = f64::from(mine + other) < threshold;
        f * f64::from(mine) + if shortfall { c } else { 0.0 }
    };
    let mut nash = Vec::new();
    for a in 0..=1u8 {
        for b in 0..=1u8 {
            if cost(a, b) <= cost(1 - a, b) && cost(b, a) <= cost(1 - b, a) {
                nash.push((a, b));
            }
        }
    }
    // Follower best response; ties resolve to not acting.
    let respond = |a: u8| if cost(1, a) < cost(0, a) { 1 } else { 0 };
    let lead = if cost(1, respond(1)) < cost(0, respond(0)) { 1 } else { 0 };
    let follow = respond(lead);
    Ok(CoordinationGame { nash, spe: (lead, follow), leader_cost: cost(lead, follow), follower_cost: cost(follow, lead) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trader {
    pub equity: f64,
    pub leverage: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdversePolicy {
    ProRata,
    Rap { shape: RiskShape },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdverseRound {
    pub t: usize,
    pub active: Vec<usize>,
    /// Haircut mass per trader; zero for traders no longer active.
    pub masses: Vec<f64>,
    pub utilities: Vec<Option<f64>>,
    pub exits: Vec<usize>,
    pub welfare: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdverseReport {
    pub rounds: Vec<AdverseRound>,
    pub insolvent: bool,
}

/// Repeated full socialization over the traders still active.
///
/// Equities stay at their initial level between rounds. A trader whose round
/// utility `μ − H` falls below `u0` leaves before the next round.
pub fn adverse_selection_sim(
    traders: &[Trader],
    deficits: &[f64],
    u0: f64,
    policy: AdversePolicy,
) -> Result<AdverseReport> {
    let mut active: Vec<usize> = (0..traders.len()).collect();
    let mut report = AdverseReport { rounds: Vec::new(), insolvent: false };
    for (t, &d) in deficits.iter().enumerate() {
        let winners: Vec<WinnerSlice> = active
            .iter()
            .map(|&i| WinnerSlice::new(i as u32, 0.0, traders[i].equity, Numeraire::PnlOnly))
            .collect();
        let alloc = match policy {
            AdversePolicy::ProRata => policies::pro_rata(&winners, 1.0, d),
            AdversePolicy::Rap { shape } => {
                let w: Vec<f64> = active.iter().map(|&i| shape.weight(traders[i].leverage)).collect();
                policies::rap_allocate(&winners, &w, d)
            }
        };
        let alloc = match alloc {
            Ok(a) => a,
            Err(Error::Infeasible { .. }) => {
                report.insolvent = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let mut masses = vec![0.0; traders.len()];
        let mut utilities = vec![None; traders.len()];
        let mut exits = Vec::new();
        for (slot, &i) in active.iter().enumerate() {
            masses[i] = alloc.seized[slot];
            let u = traders[i].utility - alloc.seized[slot];
            utilities[i] = Some(u);
            if u < u0 {
                exits.push(i);
            }
        }
        let welfare = num::sum(utilities.iter().flatten().copied());
        report.rounds.push(AdverseRound { t, active: active.clone(), masses, utilities, exits: exits.clone(), welfare });
        active.retain(|i| !exits.contains(i));
    }
    Ok(report)
}

/// True when waiting pays: `θD ≤ E[future] − Γ`.
pub fn no_wait_check(theta: f64, deficit: f64, expected_future: f64, premium: f64) -> Result<bool> {
    if [theta, deficit, expected_future, premium].iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::domain("no-wait inputs must be >= 0"));
    }
    if premium >= expected_future {
        return Ok(false);
    }
    Ok(theta * deficit <= expected_future - premium)
}

/// Retention `r(h)` of revenue after a haircut fraction `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Retention {
    Exponential { beta: f64 },
    Quadratic,
}

impl Retention {
    pub fn retain(&self, h: f64) -> f64 {
        match *self {
            Retention::Exponential { beta } => (-beta * h).exp(),
            Retention::Quadratic => 1.0 - h * h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtvModel {
    pub discount: f64,
    pub retention: Retention,
}

impl LtvModel {
    /// Defaults to exponential churn with `β = 1`.
    pub fn new(discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::param("discount must lie in (0, 1]"));
        }
        Ok(LtvModel { discount, retention: Retention::Exponential { beta: 1.0 } })
    }

    /// Revenue proxy `Σ e·r(h)` for one round.
    pub fn round_revenue(&self, equities: &[f64], haircuts: &[f64]) -> f64 {
        num::sum(equities.iter().zip(haircuts).map(|(e, h)| e * self.retention.retain(*h)))
    }

    /// Discounted cumulative value `Σ_t β^t Σ_i e r(h)` over `(equities, haircuts)` rounds.
    pub fn ltv(&self, rounds: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
        let mut acc = CompensatedSum::new();
        let mut disc = 1.0;
        rounds
            .iter()
            .map(|(e, h)| {
                acc.add(disc * self.round_revenue(e, h));
                disc *= self.discount;
                acc.value()
            })
            .collect()
    }
}

/// First solvency and revenue recovery rounds at or after `start`; `None` if never.
pub fn recovery_clocks(
    fund: &[f64],
    ltv: &[f64],
    delta: f64,
    eps: f64,
    ltv_pre: f64,
    start: usize,
) -> Result<(Option<usize>, Option<usize>)> {
    if fund.is_empty() && ltv.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    let solv = fund.iter().enumerate().skip(start).find(|(_, f)| **f >= delta).map(|(t, _)| t);
    let rev = ltv.iter().enumerate().skip(start).find(|(_, l)| **l >= (1.0 - eps) * ltv_pre).map(|(t, _)| t);
    Ok((solv, rev))
}
