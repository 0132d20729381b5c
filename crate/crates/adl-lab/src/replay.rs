//! Replay of recorded ADL fills: waves, deficits, needed budgets, the
//! no-ADL counterfactual, benchmark allocators and per-wave reports.
//!
//! A fill row describes the winner side of an ADL execution: `user` is the
//! deleveraged account, `side` the direction of its closing trade and
//! `liquidated_user` the loser whose shortfall the fill socializes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{self, CompensatedSum};
use crate::policies::{self, Numeraire, WinnerSlice};

/// Largest distance, in ms, to borrow a mark price from a neighbouring fill.
pub const MARK_FALLBACK_MS: i64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillSide {
    Buy,
    Sell,
}

impl FillSide {
    /// `+1` for a sell (closing a long), `−1` for a buy (closing a short).
    fn closing_sign(self) -> f64 {
        match self {
            FillSide::Sell => 1.0,
            FillSide::Buy => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillRecord {
    pub time_ms: i64,
    pub coin: String,
    pub side: FillSide,
    pub px: f64,
    pub mark_px: Option<f64>,
    pub sz: f64,
    pub user: String,
    pub is_adl: bool,
    pub liquidated_user: Option<String>,
    pub liquidated_total_equity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPosition {
    pub coin: String,
    pub qty: f64,
    pub entry_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountSnapshot {
    pub user: String,
    pub ts_ms: i64,
    pub equity: f64,
    pub unrealized_pnl: f64,
    pub positions: Vec<SnapshotPosition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub index: usize,
    pub start_ms: i64,
    pub end_ms: i64,
    pub fills: Vec<FillRecord>,
}

/// Counts of rows the pipeline could not use as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DataQuality {
    pub mark_fallbacks: usize,
    pub missing_marks: usize,
    pub missing_snapshots: usize,
    pub zero_equity_rows: usize,
    pub unknown_columns: usize,
}

impl DataQuality {
    fn merge(&mut self, o: &DataQuality) {
        self.mark_fallbacks += o.mark_fallbacks;
        self.missing_marks += o.missing_marks;
        self.missing_snapshots += o.missing_snapshots;
        self.zero_equity_rows += o.zero_equity_rows;
        self.unknown_columns += o.unknown_columns;
    }

    /// Problems that strict mode refuses; fallbacks that succeeded are not among them.
    pub fn strict_failures(&self) -> usize {
        self.missing_marks + self.missing_snapshots + self.unknown_columns
    }
}

// ---------------------------------------------------------------- ingestion

const FILL_COLUMNS: [&str; 10] = [
    "time_ms",
    "coin",
    "side",
    "px",
    "markPx",
    "sz",
    "user",
    "is_adl",
    "liquidated_user",
    "liquidated_total_equity",
];
const SNAPSHOT_COLUMNS: [&str; 7] = ["user", "equity", "unrealized_pnl", "coin", "position_qty", "entry_px", "ts_ms"];

struct Columns {
    index: BTreeMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord, known: &[&str], strict: bool, dq: &mut DataQuality) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, h) in headers.iter().enumerate() {
            let h = h.trim();
            if known.contains(&h) {
                index.insert(h.to_string(), i);
            } else {
                dq.unknown_columns += 1;
                if strict {
                    return Err(Error::DataQuality(format!("unknown column '{h}'")));
                }
            }
        }
        Ok(Columns { index })
    }

    fn require(&self, names: &[&str]) -> Result<()> {
        for n in names {
            if !self.index.contains_key(*n) {
                return Err(Error::Input(format!("missing required column '{n}'")));
            }
        }
        Ok(())
    }

    fn get<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        let v = rec.get(*self.index.get(name)?)?.trim();
        (!v.is_empty()).then_some(v)
    }
}

fn parse<T: std::str::FromStr>(raw: Option<&str>, name: &str, row: usize) -> Result<T> {
    let raw = raw.ok_or_else(|| Error::Input(format!("row {row}: missing {name}")))?;
    raw.parse().map_err(|_| Error::Input(format!("row {row}: cannot parse {name} '{raw}'")))
}

fn parse_opt<T: std::str::FromStr>(raw: Option<&str>, name: &str, row: usize) -> Result<Option<T>> {
    raw.map(|r| parse(Some(r), name, row)).transpose()
}

fn parse_bool(raw: Option<&str>, row: usize) -> Result<bool> {
    match raw.map(str::to_ascii_lowercase).as_deref() {
        None | Some("0") | Some("false") => Ok(false),
        Some("1") | Some("true") => Ok(true),
        Some(other) => Err(Error::Input(format!("row {row}: cannot parse is_adl '{other}'"))),
    }
}

/// Reads the fills CSV. Row numbers in errors count the header as row 1.
pub fn read_fills(reader: impl Read, strict: bool) -> Result<(Vec<FillRecord>, DataQuality)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut dq = DataQuality::default();
    let headers = rdr.headers().map_err(|e| Error::Input(e.to_string()))?.clone();
    let cols = Columns::new(&headers, &FILL_COLUMNS, strict, &mut dq)?;
    cols.require(&["time_ms", "coin", "side", "px", "sz", "user"])?;
    let mut fills = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Input(format!("row {row}: {e}")))?;
        let side = match cols.get(&rec, "side").map(str::to_ascii_lowercase).as_deref() {
            Some("buy") | Some("b") => FillSide::Buy,
            Some("sell") | Some("s") | Some("a") => FillSide::Sell,
            other => return Err(Error::Input(format!("row {row}: bad side {other:?}"))),
        };
        let fill = FillRecord {
            time_ms: parse(cols.get(&rec, "time_ms"), "time_ms", row)?,
            coin: parse(cols.get(&rec, "coin"), "coin", row)?,
            side,
            px: parse(cols.get(&rec, "px"), "px", row)?,
            mark_px: parse_opt(cols.get(&rec, "markPx"), "markPx", row)?,
            sz: parse(cols.get(&rec, "sz"), "sz", row)?,
            user: parse(cols.get(&rec, "user"), "user", row)?,
            is_adl: parse_bool(cols.get(&rec, "is_adl"), row)?,
            liquidated_user: parse_opt(cols.get(&rec, "liquidated_user"), "liquidated_user", row)?,
            liquidated_total_equity: parse_opt(
                cols.get(&rec, "liquidated_total_equity"),
                "liquidated_total_equity",
                row,
            )?,
        };
        if !(fill.px > 0.0) || !(fill.sz > 0.0) || fill.mark_px.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::Input(format!("row {row}: px, markPx and sz must be > 0")));
        }
        fills.push(fill);
    }
    fills.sort_by_key(|f| f.time_ms);
    Ok((fills, dq))
}

/// Reads the snapshots CSV, one row per `(user, coin)` position. Rows sharing
/// `(user, ts_ms)` form one snapshot; a blank coin marks a flat account.
pub fn read_snapshots(reader: impl Read, strict: bool) -> Result<(Vec<AccountSnapshot>, DataQuality)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut dq = DataQuality::default();
    let headers = rdr.headers().map_err(|e| Error::Input(e.to_string()))?.clone();
    let cols = Columns::new(&headers, &SNAPSHOT_COLUMNS, strict, &mut dq)?;
    cols.require(&["user", "equity", "unrealized_pnl"])?;
    let mut by_key: BTreeMap<(String, i64), AccountSnapshot> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Input(format!("row {row}: {e}")))?;
        let user: String = parse(cols.get(&rec, "user"), "user", row)?;
        let ts_ms: i64 = parse_opt(cols.get(&rec, "ts_ms"), "ts_ms", row)?.unwrap_or(0);
        let equity: f64 = parse(cols.get(&rec, "equity"), "equity", row)?;
        let unrealized_pnl: f64 = parse(cols.get(&rec, "unrealized_pnl"), "unrealized_pnl", row)?;
        let snap = by_key.entry((user.clone(), ts_ms)).or_insert_with(|| AccountSnapshot {
            user,
            ts_ms,
            equity,
            unrealized_pnl,
            positions: Vec::new(),
        });
        if snap.equity != equity || snap.unrealized_pnl != unrealized_pnl {
            return Err(Error::Input(format!("row {row}: equity differs from earlier rows of the same snapshot")));
        }
        if let Some(coin) = cols.get(&rec, "coin") {
            snap.positions.push(SnapshotPosition {
                coin: coin.to_string(),
                qty: parse(cols.get(&rec, "position_qty"), "position_qty", row)?,
                entry_px: parse(cols.get(&rec, "entry_px"), "entry_px", row)?,
            });
        }
    }
    Ok((by_key.into_values().collect(), dq))
}

// ------------------------------------------------------------------- waves

/// Splits time-sorted fills into maximal runs whose gaps are at most `gap_ms`.
pub fn partition_waves(fills: &[FillRecord], gap_ms: i64) -> Vec<Wave> {
    let mut sorted = fills.to_vec();
    sorted.sort_by_key(|f| f.time_ms);
    let mut waves: Vec<Wave> = Vec::new();
    for f in sorted {
        match waves.last_mut() {
            Some(w) if f.time_ms - w.end_ms <= gap_ms => {
                w.end_ms = f.time_ms;
                w.fills.push(f);
            }
            _ => waves.push(Wave { index: waves.len(), start_ms: f.time_ms, end_ms: f.time_ms, fills: vec![f] }),
        }
    }
    waves
}

/// `Σ_u (−min equity_u)₊` over liquidated users seen in the wave.
pub fn loser_deficit(wave: &Wave) -> f64 {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for f in &wave.fills {
        if let (Some(u), Some(e)) = (&f.liquidated_user, f.liquidated_total_equity) {
            let slot = worst.entry(u.as_str()).or_insert(e);
            *slot = slot.min(e);
        }
    }
    num::sum(worst.values().map(|e| num::pos(-e)))
}

/// Mark price per coin over time, built from every fill that carries one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MarkPath {
    by_coin: BTreeMap<String, Vec<(i64, f64)>>,
}

impl MarkPath {
    pub fn from_fills(fills: &[FillRecord]) -> Self {
        let mut by_coin: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
        for f in fills {
            if let Some(m) = f.mark_px {
                by_coin.entry(f.coin.clone()).or_default().push((f.time_ms, m));
            }
        }
        for v in by_coin.values_mut() {
            v.sort_by_key(|p| p.0);
        }
        MarkPath { by_coin }
    }

    /// Last recorded mark at or before `t`.
    pub fn at_or_before(&self, coin: &str, t: i64) -> Option<f64> {
        let v = self.by_coin.get(coin)?;
        let k = v.partition_point(|p| p.0 <= t);
        (k > 0).then(|| v[k - 1].1)
    }

    /// Nearest recorded mark within `radius` ms; earlier wins a tie.
    pub fn nearest(&self, coin: &str, t: i64, radius: i64) -> Option<f64> {
        let v = self.by_coin.get(coin)?;
        v.iter()
            .filter(|p| (p.0 - t).abs() <= radius)
            .min_by_key(|p| ((p.0 - t).abs(), p.0))
            .map(|p| p.1)
    }
}

/// Mark for a fill: its own, else the nearest within [`MARK_FALLBACK_MS`].
fn fill_mark(f: &FillRecord, path: &MarkPath, dq: &mut DataQuality) -> Option<f64> {
    if let Some(m) = f.mark_px {
        return Some(m);
    }
    match path.nearest(&f.coin, f.time_ms, MARK_FALLBACK_MS) {
        Some(m) => {
            dq.mark_fallbacks += 1;
            Some(m)
        }
        None => {
            dq.missing_marks += 1;
            None
        }
    }
}

/// `Σ |mark − px|·sz` over the wave's ADL fills.
pub fn needed_budget(wave: &Wave, path: &MarkPath, dq: &mut DataQuality) -> f64 {
    let mut acc = CompensatedSum::new();
    for f in wave.fills.iter().filter(|f| f.is_adl) {
        if let Some(m) = fill_mark(f, path, dq) {
            acc.add((m - f.px).abs() * f.sz);
        }
    }
    acc.value()
}

// --------------------------------------------------------------- two-pass

/// Latest snapshot per user taken no later than `t`.
pub fn snapshots_as_of(snapshots: &[AccountSnapshot], t: i64) -> BTreeMap<&str, &AccountSnapshot> {
    let mut out: BTreeMap<&str, &AccountSnapshot> = BTreeMap::new();
    for s in snapshots.iter().filter(|s| s.ts_ms <= t) {
        match out.get(s.user.as_str()) {
            Some(prev) if prev.ts_ms >= s.ts_ms => {}
            _ => {
                out.insert(s.user.as_str(), s);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDiff {
    pub user: String,
    /// `e^{no-ADL} − e^{ADL}` at the evaluation time.
    pub diff: f64,
    /// No-ADL equity at the evaluation time.
    pub equity_no_adl: f64,
    /// `diff / e^{no-ADL}` when that equity is positive.
    pub induced_haircut: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPass {
    pub horizon_ms: i64,
    pub h_prod: f64,
    pub users: Vec<UserDiff>,
    pub excluded_users: Vec<String>,
}

/// Production wealth removed by the wave's ADL fills, marked `horizon_ms` after the wave ends.
///
/// Both passes share the recorded price path, so only the ADL fills differ:
/// with ADL the closed size was realized at `px`; without it the size is still
/// held and marked at the evaluation mark. Funding is frozen over the horizon.
pub fn two_pass_replay(
    wave: &Wave,
    snapshots: &[AccountSnapshot],
    path: &MarkPath,
    horizon_ms: i64,
) -> Result<TwoPass> {
    if horizon_ms < 0 {
        return Err(Error::domain("horizon must be >= 0"));
    }
    let t_eval = wave.end_ms + horizon_ms;
    let snaps = snapshots_as_of(snapshots, wave.end_ms);
    let mut diffs: BTreeMap<&str, CompensatedSum> = BTreeMap::new();
    for f in wave.fills.iter().filter(|f| f.is_adl) {
        let mark = path
            .at_or_before(&f.coin, t_eval)
            .ok_or_else(|| Error::DataQuality(format!("no mark for {} by {t_eval}", f.coin)))?;
        diffs.entry(f.user.as_str()).or_default().add(f.side.closing_sign() * f.sz * (mark - f.px));
    }
    let mut users = Vec::new();
    let mut excluded = Vec::new();
    let mut h_prod = CompensatedSum::new();
    for (user, d) in diffs {
        let Some(snap) = snaps.get(user) else {
            excluded.push(user.to_string());
            continue;
        };
        let diff = d.value();
        let mut revalued = CompensatedSum::new();
        revalued.add(snap.equity - snap.unrealized_pnl);
        for p in &snap.positions {
            let m = path.at_or_before(&p.coin, t_eval).unwrap_or(p.entry_px);
            revalued.add(p.qty * (m - p.entry_px));
        }
        let e_no = revalued.value();
        h_prod.add(num::pos(diff));
        users.push(UserDiff {
            user: user.to_string(),
            diff,
            equity_no_adl: e_no,
            induced_haircut: (e_no > 0.0).then(|| diff / e_no),
        });
    }
    Ok(TwoPass { horizon_ms, h_prod: h_prod.value(), users, excluded_users: excluded })
}

/// `min(U₊, E₊)` in PNL mode, `E₊` in equity mode.
pub fn capacity_proxy(snapshot: &AccountSnapshot, numeraire: Numeraire) -> f64 {
    match numeraire {
        Numeraire::PnlOnly => num::pos(snapshot.unrealized_pnl).min(num::pos(snapshot.equity)),
        Numeraire::Equity => num::pos(snapshot.equity),
    }
}

// ------------------------------------------------------------- benchmarks

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkPolicy {
    WealthProRata,
    VectorProjection,
    ContractProRata,
    MinMaxInteger,
}

impl BenchmarkPolicy {
    pub const ALL: [BenchmarkPolicy; 4] = [
        BenchmarkPolicy::WealthProRata,
        BenchmarkPolicy::VectorProjection,
        BenchmarkPolicy::ContractProRata,
        BenchmarkPolicy::MinMaxInteger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkPolicy::WealthProRata => "wealth_pro_rata",
            BenchmarkPolicy::VectorProjection => "vector_projection",
            BenchmarkPolicy::ContractProRata => "contract_pro_rata",
            BenchmarkPolicy::MinMaxInteger => "min_max_integer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown policy '{s}'")))
    }
}

/// A winner as the benchmarks see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchWinner {
    pub user: String,
    pub capacity: f64,
    /// Whole contracts held.
    pub contracts: u64,
    /// USD value of one contract at the wave-start mark.
    pub contract_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchAllocation {
    pub policy: BenchmarkPolicy,
    pub budget: f64,
    pub amounts: Vec<f64>,
    pub contracts: Option<Vec<u64>>,
    pub allocated: f64,
    /// `allocated − budget`; negative means under-allocation.
    pub shortfall: f64,
    pub max_haircut: f64,
}

fn bench_result(
    policy: BenchmarkPolicy,
    winners: &[BenchWinner],
    budget: f64,
    amounts: Vec<f64>,
    contracts: Option<Vec<u64>>,
) -> BenchAllocation {
    let allocated = num::sum(amounts.iter().copied());
    let max_haircut = winners
        .iter()
        .zip(&amounts)
        .filter(|(w, _)| w.capacity > 0.0)
        .map(|(w, x)| x / w.capacity)
        .fold(0.0, f64::max);
    BenchAllocation { policy, budget, amounts, contracts, allocated, shortfall: allocated - budget, max_haircut }
}

pub fn allocate_benchmark(winners: &[BenchWinner], budget: f64, policy: BenchmarkPolicy) -> Result<BenchAllocation> {
    if !(budget >= 0.0) {
        return Err(Error::domain("budget must be >= 0"));
    }
    let caps: Vec<f64> = winners.iter().map(|w| num::pos(w.capacity)).collect();
    match policy {
        BenchmarkPolicy::WealthProRata => {
            let slices: Vec<WinnerSlice> = winners
                .iter()
                .enumerate()
                .map(|(i, w)| WinnerSlice::new(i as u32, 0.0, w.capacity, Numeraire::PnlOnly))
                .collect();
            let a = policies::capped_pro_rata(&slices, budget)?;
            Ok(bench_result(policy, winners, budget, a.seized, None))
        }
        BenchmarkPolicy::VectorProjection => {
            // Nearest point to the origin on {x ∈ [0,1]^n : cᵀx = B} is x = clip(νc, 0, 1).
            let wl = policies::water_level(&caps, &vec![1.0; caps.len()], &caps, budget)?;
            let amounts = caps.iter().zip(&wl.haircuts).map(|(c, x)| c * x).collect();
            Ok(bench_result(policy, winners, budget, amounts, None))
        }
        BenchmarkPolicy::ContractProRata => {
            let total = num::sum(caps.iter().copied());
            if budget > total * (1.0 + 1e-12) {
                return Err(Error::Infeasible { budget, capacity: total });
            }
            let k: Vec<u64> = winners
                .iter()
                .zip(&caps)
                .map(|(w, c)| {
                    if total <= 0.0 || w.contract_value <= 0.0 {
                        return 0;
                    }
                    let share = budget * c / total;
                    ((share / w.contract_value + 1e-9).floor() as u64).min(w.contracts)
                })
                .collect();
            let amounts = winners.iter().zip(&k).map(|(w, k)| *k as f64 * w.contract_value).collect();
            Ok(bench_result(policy, winners, budget, amounts, Some(k)))
        }
        BenchmarkPolicy::MinMaxInteger => {
            let k = min_max_integer(winners, budget)?;
            let amounts = winners.iter().zip(&k).map(|(w, k)| *k as f64 * w.contract_value).collect();
            Ok(bench_result(policy, winners, budget, amounts, Some(k)))
        }
    }
}

/// Contracts closable at haircut level `φ`: `min(K, ⌊φ c / v⌋)`.
fn closable(w: &BenchWinner, phi: f64) -> u64 {
    if w.capacity <= 0.0 || w.contract_value <= 0.0 {
        return 0;
    }
    ((phi * w.capacity / w.contract_value + 1e-12).floor().max(0.0) as u64).min(w.contracts)
}

fn level_of(w: &BenchWinner, k: u64) -> f64 {
    if k == 0 {
        0.0
    } else {
        k as f64 * w.contract_value / w.capacity
    }
}

/// Integer closures meeting the budget with the smallest maximum haircut
/// fraction, then the smallest overshoot at that level.
///
/// The level is found by bisection; since per-account closures are
/// monotone step functions, the smallest feasible level is the largest
/// account level of the bisected solution. Overshoot is then trimmed exactly
/// by a bounded subset search, falling back to greedy trimming on large books.
pub fn min_max_integer(winners: &[BenchWinner], budget: f64) -> Result<Vec<u64>> {
    let value = |k: &[u64]| num::sum(winners.iter().zip(k).map(|(w, k)| *k as f64 * w.contract_value));
    let full: Vec<u64> = winners.iter().map(|w| closable(w, f64::INFINITY)).collect();
    let capacity = value(&full);
    if budget > capacity + 1e-9 * budget.max(1.0) {
        return Err(Error::Infeasible { budget, capacity });
    }
    if budget <= 0.0 {
        return Ok(vec![0; winners.len()]);
    }
    let mut hi = winners.iter().zip(&full).map(|(w, k)| level_of(w, *k)).fold(0.0, f64::max);
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let k: Vec<u64> = winners.iter().map(|w| closable(w, mid)).collect();
        if value(&k) + 1e-9 >= budget {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let upper: Vec<u64> = winners.iter().map(|w| closable(w, hi)).collect();
    Ok(trim_overshoot(winners, &upper, budget))
}

fn trim_overshoot(winners: &[BenchWinner], upper: &[u64], budget: f64) -> Vec<u64> {
    let combos: f64 = upper.iter().map(|k| (*k + 1) as f64).product();
    let value = |k: &[u64]| num::sum(winners.iter().zip(k).map(|(w, k)| *k as f64 * w.contract_value));
    let phi_star = winners.iter().zip(upper).map(|(w, k)| level_of(w, *k)).fold(0.0, f64::max);
    if combos <= 200_000.0 {
        let mut best = upper.to_vec();
        let mut best_val = value(&best);
        let mut cur = vec![0u64; upper.len()];
        loop {
            let v = value(&cur);
            let phi = winners.iter().zip(&cur).map(|(w, k)| level_of(w, *k)).fold(0.0, f64::max);
            if v + 1e-9 >= budget && phi <= phi_star + 1e-12 && v < best_val - 1e-12 {
                best_val = v;
                best = cur.clone();
            }
            let mut i = 0;
            while i < cur.len() {
                if cur[i] < upper[i] {
                    cur[i] += 1;
                    break;
                }
                cur[i] = 0;
                i += 1;
            }
            if i == cur.len() {
                break;
            }
        }
        return best;
    }
    let mut k = upper.to_vec();
    let mut order: Vec<usize> = (0..k.len()).collect();
    order.sort_by(|&a, &b| winners[b].contract_value.total_cmp(&winners[a].contract_value));
    for i in order {
        while k[i] > 0 && value(&k) - winners[i].contract_value + 1e-9 >= budget {
            k[i] -= 1;
        }
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretDecomposition {
    /// `max_i (x_i − x^PR_i)/e_i` over rows with positive equity.
    pub fairness: f64,
    /// `B_policy − B_needed`, signed.
    pub overshoot: f64,
    pub excluded_rows: usize,
}

impl RegretDecomposition {
    pub fn total(&self) -> f64 {
        self.fairness + self.overshoot
    }
}

pub fn regret_decomposition(
    policy_usd: &[f64],
    pro_rata_usd: &[f64],
    equities: &[f64],
    policy_budget: f64,
    needed: f64,
) -> Result<RegretDecomposition> {
    if policy_usd.len() != pro_rata_usd.len() || policy_usd.len() != equities.len() {
        return Err(Error::domain("allocations must cover the same winners"));
    }
    let mut fairness = 0.0_f64;
    let mut excluded = 0;
    for i in 0..equities.len() {
        if equities[i] > 0.0 {
            fairness = fairness.max((policy_usd[i] - pro_rata_usd[i]) / equities[i]);
        } else {
            excluded += 1;
        }
    }
    Ok(RegretDecomposition { fairness, overshoot: policy_budget - needed, excluded_rows: excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnEstimate {
    pub exit_probabilities: Vec<f64>,
    pub retained_fees: f64,
    pub expected_exits: f64,
}

/// `p = 1 − exp(−β h/w)` per account and the fee income of those who stay.
/// A haircut on an account with no capacity counts as a certain exit.
pub fn churn_revenue_proxy(
    haircuts: &[f64],
    capacities: &[f64],
    beta: f64,
    notionals: &[f64],
    fee_rate: f64,
) -> Result<ChurnEstimate> {
    if haircuts.len() != capacities.len() || haircuts.len() != notionals.len() {
        return Err(Error::domain("churn inputs must align"));
    }
    let mut probs = Vec::with_capacity(haircuts.len());
    for (h, w) in haircuts.iter().zip(capacities) {
        let p = if *h <= 0.0 {
            0.0
        } else if *w > 0.0 {
            1.0 - (-beta * h / w).exp()
        } else {
            1.0
        };
        probs.push(p);
    }
    let retained = num::sum(notionals.iter().zip(&probs).map(|(n, p)| n * fee_rate * (1.0 - p)));
    let expected = num::sum(probs.iter().copied());
    Ok(ChurnEstimate { exit_probabilities: probs, retained_fees: retained, expected_exits: expected })
}

// ----------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub gap_ms: i64,
    pub horizons_ms: Vec<i64>,
    pub policies: Vec<BenchmarkPolicy>,
    pub numeraire: Numeraire,
    pub strict: bool,
    /// Contract size used by the integer benchmarks.
    pub contract_size: f64,
    pub churn_beta: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            gap_ms: 5_000,
            horizons_ms: vec![0, 500, 1_000, 2_000, 5_000],
            policies: BenchmarkPolicy::ALL.to_vec(),
            numeraire: Numeraire::PnlOnly,
            strict: false,
            contract_size: 1.0,
            churn_beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    pub budget: f64,
    pub overshoot: f64,
    pub fairness_regret: f64,
    pub overshoot_regret: f64,
    pub max_haircut: f64,
    pub infeasible: bool,
    /// USD taken from each of the wave's winners, aligned with [`WaveReport::winners`].
    pub amounts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveReport {
    pub t: usize,
    pub start_ms: i64,
    pub end_ms: i64,
    pub adl_fills: usize,
    pub deficit: f64,
    pub b_needed: f64,
    /// `(Δ, H_prod(Δ))` per horizon.
    pub h_prod: Vec<(i64, f64)>,
    pub policies: Vec<PolicyRow>,
    pub churn_expected_exits: f64,
    pub excluded_users: usize,
    pub winners: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub numeraire: Numeraire,
    pub label: String,
    pub waves: usize,
    pub total_deficit: f64,
    pub total_b_needed: f64,
    pub total_h_prod: Vec<(i64, f64)>,
    /// `O(Δ) = Σ H_prod(Δ) − Σ B_needed`.
    pub overshoot: Vec<(i64, f64)>,
    pub policy_budgets: BTreeMap<String, f64>,
    pub policy_overshoots: BTreeMap<String, f64>,
    pub data_quality: DataQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub waves: Vec<WaveReport>,
    pub aggregate: Aggregate,
}

fn bench_winners(
    wave: &Wave,
    snaps: &BTreeMap<&str, &AccountSnapshot>,
    path: &MarkPath,
    cfg: &ReplayConfig,
) -> (Vec<BenchWinner>, Vec<f64>) {
    let mut first_coin: BTreeMap<&str, &str> = BTreeMap::new();
    for f in wave.fills.iter().filter(|f| f.is_adl) {
        first_coin.entry(f.user.as_str()).or_insert(f.coin.as_str());
    }
    let mut winners = Vec::new();
    let mut equities = Vec::new();
    for (user, coin) in first_coin {
        let Some(snap) = snaps.get(user) else { continue };
        let qty = snap.positions.iter().filter(|p| p.coin == coin).map(|p| p.qty.abs()).sum::<f64>();
        let mark = path.at_or_before(coin, wave.start_ms).unwrap_or(0.0);
        winners.push(BenchWinner {
            user: user.to_string(),
            capacity: capacity_proxy(snap, cfg.numeraire),
            contracts: (qty / cfg.contract_size + 1e-9).floor() as u64,
            contract_value: mark * cfg.contract_size,
        });
        equities.push(snap.equity);
    }
    (winners, equities)
}

/// Full per-wave analysis.
///
/// Benchmarks allocate the wave's needed budget over the winners found in the
/// snapshots; their regrets are measured against wealth pro-rata on the same
/// winners. The production row uses the realized `H_prod(0)`.
pub fn event_report(fills: &[FillRecord], snapshots: &[AccountSnapshot], cfg: &ReplayConfig) -> Result<EventReport> {
    let path = MarkPath::from_fills(fills);
    let adl: Vec<FillRecord> = fills.iter().filter(|f| f.is_adl).cloned().collect();
    let waves = partition_waves(&adl, cfg.gap_ms);
    let mut dq = DataQuality::default();
    let mut reports = Vec::with_capacity(waves.len());

    for wave in &waves {
        let mut wdq = DataQuality::default();
        let deficit = loser_deficit(wave);
        let b_needed = needed_budget(wave, &path, &mut wdq);
        let mut h_prod = Vec::with_capacity(cfg.horizons_ms.len());
        let mut base = None;
        for &h in &cfg.horizons_ms {
            let tp = two_pass_replay(wave, snapshots, &path, h)?;
            h_prod.push((h, tp.h_prod));
            if base.is_none() {
                base = Some(tp);
            }
        }
        let base = match base {
            Some(b) => b,
            None => two_pass_replay(wave, snapshots, &path, 0)?,
        };
        wdq.missing_snapshots += base.excluded_users.len();

        let snaps = snapshots_as_of(snapshots, wave.end_ms);
        let (winners, equities) = bench_winners(wave, &snaps, &path, cfg);
        wdq.zero_equity_rows += equities.iter().filter(|e| **e <= 0.0).count();
        let reference = allocate_benchmark(&winners, b_needed, BenchmarkPolicy::WealthProRata).ok();

        let mut rows = Vec::new();
        let prod_usd: Vec<f64> = winners
            .iter()
            .map(|w| base.users.iter().find(|u| u.user == w.user).map_or(0.0, |u| num::pos(u.diff)))
            .collect();
        let prod_budget = base.h_prod;
        rows.push(policy_row("production", &winners, &equities, &prod_usd, prod_budget, b_needed, reference.as_ref())?);
        for &p in &cfg.policies {
            match allocate_benchmark(&winners, b_needed, p) {
                Ok(a) => rows.push(policy_row(p.name(), &winners, &equities, &a.amounts, a.allocated, b_needed, reference.as_ref())?),
                Err(Error::Infeasible { .. }) => rows.push(PolicyRow {
                    policy: p.name().to_string(),
                    budget: 0.0,
                    overshoot: -b_needed,
                    fairness_regret: 0.0,
                    overshoot_regret: -b_needed,
                    max_haircut: 0.0,
                    infeasible: true,
                    amounts: vec![0.0; winners.len()],
                }),
                Err(e) => return Err(e),
            }
        }
        let caps: Vec<f64> = winners.iter().map(|w| w.capacity).collect();
        let churn = churn_revenue_proxy(&prod_usd, &caps, cfg.churn_beta, &vec![0.0; caps.len()], 0.0)?;
        dq.merge(&wdq);
        reports.push(WaveReport {
            t: wave.index,
            start_ms: wave.start_ms,
            end_ms: wave.end_ms,
            adl_fills: wave.fills.len(),
            deficit,
            b_needed,
            h_prod,
            policies: rows,
            churn_expected_exits: churn.expected_exits,
            excluded_users: base.excluded_users.len(),
            winners: winners.iter().map(|w| w.user.clone()).collect(),
        });
    }
    if cfg.strict && dq.strict_failures() > 0 {
        return Err(Error::DataQuality(format!(
            "{} missing marks, {} missing snapshots",
            dq.missing_marks, dq.missing_snapshots
        )));
    }
    let aggregate = aggregate(&reports, cfg, dq);
    Ok(EventReport { waves: reports, aggregate })
}

fn policy_row(
    name: &str,
    winners: &[BenchWinner],
    equities: &[f64],
    usd: &[f64],
    budget: f64,
    needed: f64,
    reference: Option<&BenchAllocation>,
) -> Result<PolicyRow> {
    let pr = reference.map_or_else(|| vec![0.0; usd.len()], |r| r.amounts.clone());
    let reg = regret_decomposition(usd, &pr, equities, budget, needed)?;
    let max_haircut = winners
        .iter()
        .zip(usd)
        .filter(|(w, _)| w.capacity > 0.0)
        .map(|(w, x)| x / w.capacity)
        .fold(0.0, f64::max);
    Ok(PolicyRow {
        policy: name.to_string(),
        budget,
        overshoot: budget - needed,
        fairness_regret: reg.fairness,
        overshoot_regret: reg.overshoot,
        max_haircut,
        infeasible: false,
        amounts: usd.to_vec(),
    })
}

fn aggregate(reports: &[WaveReport], cfg: &ReplayConfig, dq: DataQuality) -> Aggregate {
    let total_deficit = num::sum(reports.iter().map(|r| r.deficit));
    let total_b_needed = num::sum(reports.iter().map(|r| r.b_needed));
    let total_h_prod: Vec<(i64, f64)> = cfg
        .horizons_ms
        .iter()
        .enumerate()
        .map(|(k, &h)| (h, num::sum(reports.iter().map(|r| r.h_prod[k].1))))
        .collect();
    let overshoot = total_h_prod.iter().map(|&(h, v)| (h, v - total_b_needed)).collect();
    let mut policy_budgets: BTreeMap<String, f64> = BTreeMap::new();
    let mut policy_overshoots: BTreeMap<String, f64> = BTreeMap::new();
    let names: BTreeSet<&str> = reports.iter().flat_map(|r| r.policies.iter().map(|p| p.policy.as_str())).collect();
    for name in names {
        let rows = || reports.iter().flat_map(|r| r.policies.iter().filter(move |p| p.policy == name));
        policy_budgets.insert(name.to_string(), num::sum(rows().map(|p| p.budget)));
        policy_overshoots.insert(name.to_string(), num::sum(rows().map(|p| p.overshoot)));
    }
    let label = match cfg.numeraire {
        Numeraire::PnlOnly => "pnl-only".to_string(),
        Numeraire::Equity => "equity-mode diagnostic".to_string(),
    };
    Aggregate {
        numeraire: cfg.numeraire,
        label,
        waves: reports.len(),
        total_deficit,
        total_b_needed,
        total_h_prod,
        overshoot,
        policy_budgets,
        policy_overshoots,
        data_quality: dq,
    }
}

/// One CSV row per `(wave, policy)` with the wave columns repeated, followed
/// by one `h_prod_<Δ>` column per horizon.
pub fn write_wave_csv(out: impl Write, report: &EventReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let horizons: Vec<i64> = report.aggregate.total_h_prod.iter().map(|p| p.0).collect();
    let mut header: Vec<String> = ["t", "start_ms", "end_ms", "adl_fills", "deficit", "b_needed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(horizons.iter().map(|h| format!("h_prod_{h}")));
    header.extend(
        ["policy", "budget", "overshoot", "fairness_regret", "overshoot_regret", "max_haircut", "infeasible", "churn_expected_exits"]
            .iter()
            .map(|s| s.to_string()),
    );
    let io = |e: csv::Error| Error::Input(e.to_string());
    w.write_record(&header).map_err(io)?;
    for r in &report.waves {
        for p in &r.policies {
            let mut rec = vec![
                r.t.to_string(),
                r.start_ms.to_string(),
                r.end_ms.to_string(),
                r.adl_fills.to_string(),
                r.deficit.to_string(),
                r.b_needed.to_string(),
            ];
            rec.extend(r.h_prod.iter().map(|x| x.1.to_string()));
            rec.extend([
                p.policy.clone(),
                p.budget.to_string(),
                p.overshoot.to_string(),
                p.fairness_regret.to_string(),
                p.overshoot_regret.to_string(),
                p.max_haircut.to_string(),
                p.infeasible.to_string(),
                r.churn_expected_exits.to_string(),
            ]);
            w.write_record(&rec).map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::Input(e.to_string()))?;
    Ok(())
}

/// Per-policy allocation rows: wave, user, capacity and USD taken.
pub fn write_allocation_csv(out: impl Write, report: &EventReport, policy: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Input(e.to_string());
    w.write_record(["t", "user", "amount"]).map_err(io)?;
    for r in &report.waves {
        if let Some(p) = r.policies.iter().find(|p| p.policy == policy) {
            for (user, x) in r.winners.iter().zip(&p.amounts) {
                w.write_record([r.t.to_string(), user.clone(), x.to_string()]).map_err(io)?;
            }
        }
    }
    w.flush().map_err(|e| Error::Input(e.to_string()))?;
    Ok(())
}
