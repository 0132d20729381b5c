//! Risk metrics for ADL outcomes and the Monte-Carlo scaling experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Pareto};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::num::{self, CompensatedSum};
use crate::policies::{self, Numeraire, WinnerSlice};

/// Post-ADL endowments together with the socialized totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSample {
    pub winners_post: Vec<f64>,
    /// Total socialized loss `D^π`.
    pub d_pi: f64,
    /// Largest socialized shortfall `Δ^π`.
    pub delta_pi: f64,
}

fn top(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, x| a.max(*x))
}

pub fn ptsr(sample: &RiskSample) -> Result<f64> {
    if !(sample.d_pi > 0.0) {
        return Err(Error::UndefinedRatio("PTSR"));
    }
    Ok(top(&sample.winners_post) / sample.d_pi)
}

pub fn pmr(sample: &RiskSample) -> Result<f64> {
    if !(sample.delta_pi > 0.0) {
        return Err(Error::UndefinedRatio("PMR"));
    }
    Ok(top(&sample.winners_post) / sample.delta_pi)
}

/// Lower-quantile VaR at tail probability `alpha` and the mean of samples at or above it.
pub fn var_es(samples: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha must lie in (0, 1)"));
    }
    let var = crate::insurance::lower_quantile(samples, 1.0 - alpha)?;
    let tail: Vec<f64> = samples.iter().copied().filter(|x| *x >= var).collect();
    let es = num::sum(tail.iter().copied()) / tail.len() as f64;
    Ok((var, es))
}

fn sorted_desc(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// Weak submajorization `x ≺_w y` on plain vectors, padding the shorter with zeros.
pub fn submajorizes(x: &[f64], y: &[f64]) -> bool {
    submajorizes_tol(x, y, 0.0)
}

pub fn submajorizes_tol(x: &[f64], y: &[f64], tol: f64) -> bool {
    let xs = sorted_desc(x);
    let ys = sorted_desc(y);
    let n = xs.len().max(ys.len());
    let (mut sx, mut sy) = (CompensatedSum::new(), CompensatedSum::new());
    for k in 0..n {
        sx.add(xs.get(k).copied().unwrap_or(0.0));
        sy.add(ys.get(k).copied().unwrap_or(0.0));
        if sx.value() > sy.value() + tol {
            return false;
        }
    }
    true
}

/// Submajorization of haircut profiles spread over endowment mass.
///
/// Each `(value, mass)` pair is a block of height `value` and width `mass`.
/// After sorting blocks by height the running integral of `x` must stay below
/// that of `y` at every mass level. A book where every winner carries the same
/// mass reduces to [`submajorizes`].
pub fn mass_submajorizes(x: &[(f64, f64)], y: &[(f64, f64)], tol: f64) -> bool {
    let prof = |v: &[(f64, f64)]| {
        let mut v: Vec<(f64, f64)> = v.iter().copied().filter(|b| b.1 > 0.0).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    };
    let (px, py) = (prof(x), prof(y));
    let mut grid: Vec<f64> = Vec::with_capacity(px.len() + py.len());
    for p in [&px, &py] {
        let mut acc = 0.0;
        for b in p.iter() {
            acc += b.1;
            grid.push(acc);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid.into_iter().all(|m| integral(&px, m) <= integral(&py, m) + tol)
}

fn integral(profile: &[(f64, f64)], mass: f64) -> f64 {
    let mut left = mass;
    let mut acc = CompensatedSum::new();
    for &(h, w) in profile {
        if left <= 0.0 {
            break;
        }
        let take = w.min(left);
        acc.add(h * take);
        left -= take;
    }
    acc.value()
}

/// One post-ADL winner for the next-deficit computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostAccount {
    pub equity: f64,
    pub notional: f64,
    pub leverage: f64,
}

impl PostAccount {
    /// Post-haircut state of a winner whose whole equity is shrunk by `h`, leverage unchanged.
    pub fn shrunk(equity: f64, notional: f64, h: f64) -> Self {
        PostAccount { equity: (1.0 - h) * equity, notional: (1.0 - h) * notional, leverage: notional / equity }
    }
}

/// Per-winner return shock `Z` for the next step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShockModel {
    /// `Z = ξζ` with one fair sign `ξ` shared by every winner.
    CommonSign { magnitude: f64 },
    /// Independent fair signs per winner.
    IndependentSign { magnitude: f64 },
    /// `Z ~ Uniform[−a, a]`, independent.
    Uniform { half_width: f64 },
    Gaussian { sigma: f64 },
    None,
}

impl ShockModel {
    fn draw(&self, rng: &mut impl Rng, n: usize, out: &mut Vec<f64>) {
        out.clear();
        match *self {
            ShockModel::CommonSign { magnitude } => {
                let z = if rng.random::<bool>() { magnitude } else { -magnitude };
                out.resize(n, z);
            }
            ShockModel::IndependentSign { magnitude } => {
                out.extend((0..n).map(|_| if rng.random::<bool>() { magnitude } else { -magnitude }));
            }
            ShockModel::Uniform { half_width } => {
                out.extend((0..n).map(|_| rng.random_range(-half_width..=half_width)));
            }
            ShockModel::Gaussian { sigma } => {
                let d = Normal::new(0.0, sigma).expect("sigma validated");
                out.extend((0..n).map(|_| d.sample(rng)));
            }
            ShockModel::None => out.resize(n, 0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ShockModel::CommonSign { magnitude } | ShockModel::IndependentSign { magnitude } => magnitude >= 0.0,
            ShockModel::Uniform { half_width } => half_width >= 0.0,
            ShockModel::Gaussian { sigma } => sigma > 0.0,
            ShockModel::None => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid shock model {self:?}")))
        }
    }
}

/// Monte-Carlo `E[Σ ñ (1/λ + Z)₋]` with a seeded ChaCha stream.
pub fn next_deficit(book: &[PostAccount], shock: &ShockModel, n_samples: usize, seed: u64) -> Result<f64> {
    shock.validate()?;
    if n_samples == 0 {
        return Err(Error::param("n_samples must be > 0"));
    }
    if book.iter().any(|a| !(a.leverage > 0.0)) {
        return Err(Error::domain("leverage must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Vec::with_capacity(book.len());
    let mut total = CompensatedSum::new();
    for _ in 0..n_samples {
        shock.draw(&mut rng, book.len(), &mut z);
        for (a, zi) in book.iter().zip(&z) {
            total.add(a.notional * num::pos(-(1.0 / a.leverage + zi)));
        }
    }
    Ok(total.value() / n_samples as f64)
}

/// Linear next-deficit proxy `δ(h) = Σ (1 − h_i) e_i ρ_i` used for one-step comparisons.
pub fn linear_next_deficit(equities: &[f64], rho: &[f64], haircuts: &[f64]) -> f64 {
    num::sum(equities.iter().zip(rho).zip(haircuts).map(|((e, r), h)| (1.0 - h) * e * r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TailModel {
    Pareto { alpha: f64, scale: f64 },
    Gaussian { sigma: f64 },
    Exponential { rate: f64 },
}

impl TailModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TailModel::Pareto { alpha, scale } => alpha > 0.0 && scale > 0.0,
            TailModel::Gaussian { sigma } => sigma > 0.0,
            TailModel::Exponential { rate } => rate > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("invalid tail model {self:?}")))
        }
    }

    /// Draws `n` nonnegative magnitudes; the Gaussian family is folded.
    pub fn sample_n(&self, rng: &mut impl Rng, n: usize) -> Vec<f64> {
        match *self {
            TailModel::Pareto { alpha, scale } => {
                let d = Pareto::new(scale, alpha).expect("validated");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            TailModel::Gaussian { sigma } => {
                let d = Normal::new(0.0, sigma).expect("validated");
                (0..n).map(|_| d.sample(rng).abs()).collect()
            }
            TailModel::Exponential { rate } => {
                let d = Exp::new(rate).expect("validated");
                (0..n).map(|_| d.sample(rng)).collect()
            }
        }
    }
}

/// Upper-quantile normalizer `b_n = F⁻¹(1 − 1/n)`.
pub fn ev_scale(model: &TailModel, n: f64) -> Result<f64> {
    model.validate()?;
    if !(n >= 2.0) {
        return Err(Error::param("n must be >= 2"));
    }
    Ok(match *model {
        TailModel::Pareto { alpha, scale } => scale * n.powf(1.0 / alpha),
        TailModel::Gaussian { sigma } => {
            sigma * StatNormal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - 1.0 / n)
        }
        TailModel::Exponential { rate } => n.ln() / rate,
    })
}

/// How severity scales with book size in a scaling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaSchedule {
    Fixed { theta: f64 },
    /// `θ_n = c·b_n/n`, clipped to `[0, 1]`.
    EvScaled { c: f64 },
}

impl ThetaSchedule {
    pub fn theta(&self, n: usize, b_n: f64) -> f64 {
        match *self {
            ThetaSchedule::Fixed { theta } => theta,
            ThetaSchedule::EvScaled { c } => (c * b_n / n as f64).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub winners: TailModel,
    pub losers: TailModel,
    pub theta: ThetaSchedule,
    pub n_grid: Vec<usize>,
    pub seeds: u64,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRun {
    pub n: usize,
    pub seed: u64,
    pub theta: f64,
    pub ptsr: f64,
    pub pmr: f64,
    pub b_n: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    pub mean_ptsr: f64,
    pub mean_pmr: f64,
    pub theoretical_scale: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub runs: Vec<ScalingRun>,
    /// Fitted slope of `log mean PTSR` against `log n`.
    pub slope_vs_n: f64,
    /// Fitted slope of `log mean PTSR` against `log(b_n/(θ_n n))`.
    pub slope_vs_scale: f64,
}

/// Seed for run `(n, s)`, mixed so neighbouring runs share no stream prefix.
pub fn run_seed(base: u64, n: usize, s: u64) -> u64 {
    let mut z = base ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ s.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One simulated book of `n/2` winners and `n/2` losers under pro-rata.
pub fn scaling_run(cfg: &ScalingConfig, n: usize, s: u64) -> Result<ScalingRun> {
    let seed = run_seed(cfg.base_seed, n, s);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = (n / 2).max(1);
    let m = (n - n / 2).max(1);
    let w = cfg.winners.sample_n(&mut rng, k);
    let losses = cfg.losers.sample_n(&mut rng, m);
    let b_n = ev_scale(&cfg.winners, n as f64)?;
    let theta = cfg.theta.theta(n, b_n);
    let deficit = num::sum(losses.iter().copied());
    let max_loss = losses.iter().fold(0.0_f64, |a, x| a.max(*x));
    let winners: Vec<WinnerSlice> =
        w.iter().enumerate().map(|(i, &x)| WinnerSlice::new(i as u32, 0.0, x, Numeraire::PnlOnly)).collect();
    let alloc = policies::pro_rata(&winners, theta, deficit)?;
    let sample = RiskSample {
        winners_post: alloc.survivors(&winners),
        d_pi: theta * deficit,
        delta_pi: theta * max_loss,
    };
    Ok(ScalingRun { n, seed, theta, ptsr: ptsr(&sample)?, pmr: pmr(&sample)?, b_n, kappa: severity_load(theta, n, b_n)? })
}

/// Seed-parallel PTSR scaling sweep. Results do not depend on the thread count.
pub fn ptsr_scaling_experiment(cfg: &ScalingConfig) -> Result<ScalingTable> {
    cfg.winners.validate()?;
    cfg.losers.validate()?;
    if cfg.n_grid.is_empty() || cfg.n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("n grid must be nonempty and strictly increasing"));
    }
    if cfg.n_grid[0] < 2 || cfg.seeds == 0 {
        return Err(Error::param("n must be >= 2 and at least one seed is required"));
    }
    let jobs: Vec<(usize, u64)> =
        cfg.n_grid.iter().flat_map(|&n| (0..cfg.seeds).map(move |s| (n, s))).collect();
    let runs: Vec<ScalingRun> = jobs.par_iter().map(|&(n, s)| scaling_run(cfg, n, s)).collect::<Result<_>>()?;

    let rows: Vec<ScalingRow> = cfg
        .n_grid
        .iter()
        .map(|&n| {
            let group: Vec<&ScalingRun> = runs.iter().filter(|r| r.n == n).collect();
            let len = group.len() as f64;
            let first = group[0];
            ScalingRow {
                n,
                mean_ptsr: num::sum(group.iter().map(|r| r.ptsr)) / len,
                mean_pmr: num::sum(group.iter().map(|r| r.pmr)) / len,
                theoretical_scale: first.b_n / (first.theta * n as f64),
                runs: group.len(),
            }
        })
        .collect();
    let log_ptsr: Vec<f64> = rows.iter().map(|r| r.mean_ptsr.ln()).collect();
    let log_n: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let log_scale: Vec<f64> = rows.iter().map(|r| r.theoretical_scale.ln()).collect();
    let slope_vs_n = num::ols_slope(&log_n, &log_ptsr);
    let slope_vs_scale = num::ols_slope(&log_scale, &log_ptsr);
    Ok(ScalingTable { rows, runs, slope_vs_n, slope_vs_scale })
}

/// Severity load `κ = θ n / b_n`.
pub fn severity_load(theta: f64, n: usize, b_n: f64) -> Result<f64> {
    if !(b_n > 0.0) {
        return Err(Error::param("b_n must be > 0"));
    }
    Ok(theta * n as f64 / b_n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub max_load: f64,
    pub leverage_lo: f64,
    pub leverage_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    StaticOk,
    DynamicRequired,
}

/// Static severity suffices when the load is bounded and the leverage ratio sits in `[c, C]`.
pub fn classify(kappa: f64, leverage_ratio: f64, th: &RegimeThresholds) -> Regime {
    if kappa <= th.max_load && (th.leverage_lo..=th.leverage_hi).contains(&leverage_ratio) {
        Regime::StaticOk
    } else {
        Regime::DynamicRequired
    }
}

/// Survivor of the largest endowment (lowest id on ties).
pub fn top_winner_survivor(endowments: &[f64], seized: &[f64]) -> Option<f64> {
    let top = (0..endowments.len()).max_by(|&a, &b| endowments[a].total_cmp(&endowments[b]).then(b.cmp(&a)))?;
    Some(num::pos(endowments[top] - seized[top]))
}

/// Predicted gap `B(1 − w₍₁₎/U)` between pro-rata and an endowment-ranked queue, for `B ≤ w₍₁₎`.
pub fn queue_top_gap(endowments: &[f64], budget: f64) -> Option<f64> {
    let u = num::sum(endowments.iter().copied());
    let w1 = top(endowments);
    (u > 0.0 && budget <= w1).then(|| budget * (1.0 - w1 / u))
}
