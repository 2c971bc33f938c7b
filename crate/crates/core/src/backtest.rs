//! Commission-aware multi-period wealth simulation.
//!
//! One engine executes every strategy so commission incidence and
//! compounding are identical across comparisons. A strategy plays a
//! simplex over `[cash, stock_0, ..]` for each record of the test
//! range; the backtester rebalances the running book to those
//! proportions, charges commission on traded stock value (buys plus
//! sells; movements of the cash slot are free), applies the record's
//! price relatives, and records the marked value. Reports use the
//! metrics module at zero risk-free rate, annualized.
//!
//! The composed cluster strategy is reduced to the same interface:
//! each cluster's trained agent replays its signal-driven book over
//! the test range, the books are normalized to simplices, the hedger
//! (or a uniform stand-in) weighs the clusters, and the combined
//! portfolio is scattered onto the global stock layout with all
//! per-cluster cash slots merged. Stocks outside every cluster keep
//! weight zero.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::a3c::{actor_spec, run_signals, A3cConfig};
use crate::baselines::{Baseline, BaselineState};
use crate::diffcomp::ParamSet;
use crate::error::{Error, Result};
use crate::hedge::{
    actor_weights, combine_portfolios, hedge_actor_spec, ClusterAggregateTensor, DdpgConfig,
};
use crate::linalg::{Matrix, Tensor3};
use crate::market::{StateTensor, STATE_CHANNELS};
use crate::math;
use crate::metrics::{compute_report, MetricsReport};
use crate::trading::{apply_market, Portfolio, Side, TradeEntry, TradeLedger};

/// Risk-free rate used for all report ratios.
const RISK_FREE: f64 = 0.0;
/// Weight vectors must sum to 1 within this bound.
const SIMPLEX_TOL: f64 = 1e-9;

/// Anything that can be driven through the backtester: weights for
/// record `t` are requested first, the record's price relatives are
/// revealed through `observe` afterwards, so weights can only depend
/// on strictly past data.
pub trait WeightStrategy {
    /// Number of stocks the strategy allocates across.
    fn assets(&self) -> usize;

    /// Simplex over `[cash, stock_0, ..]` to hold through record `t`.
    fn weights(&mut self, t: usize) -> Result<Vec<f64>>;

    /// Price relatives of record `t`, revealed after trading.
    fn observe(&mut self, t: usize, x: &[f64]) -> Result<()>;
}

/// A precomputed weight row per record of a contiguous range.
#[derive(Debug, Clone)]
pub struct ScheduledWeights {
    start: usize,
    rows: Vec<Vec<f64>>,
}

impl ScheduledWeights {
    /// `rows[k]` is played at record `start + k`; every row must have
    /// the same `1 + stocks` layout.
    pub fn new(start: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        if width < 2 {
            return Err(Error::Parameter(
                "a weight schedule needs rows of at least [cash, one stock]".into(),
            ));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged weight schedule".into()));
        }
        Ok(ScheduledWeights { start, rows })
    }
}

impl WeightStrategy for ScheduledWeights {
    fn assets(&self) -> usize {
        self.rows[0].len() - 1
    }

    fn weights(&mut self, t: usize) -> Result<Vec<f64>> {
        t.checked_sub(self.start)
            .and_then(|k| self.rows.get(k))
            .cloned()
            .ok_or_else(|| Error::Validation(format!("record {t} is outside the schedule")))
    }

    fn observe(&mut self, _t: usize, _x: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// A classical rule behind the strategy interface. The rules are fully
/// invested, so the cash slot is always zero.
#[derive(Debug, Clone)]
pub struct BaselineStrategy {
    inner: BaselineState,
}

impl BaselineStrategy {
    pub fn new(kind: Baseline, assets: usize, seed: u64) -> Result<Self> {
        Ok(BaselineStrategy { inner: BaselineState::new(kind, assets, seed)? })
    }

    pub fn kind(&self) -> Baseline {
        self.inner.kind()
    }
}

impl WeightStrategy for BaselineStrategy {
    fn assets(&self) -> usize {
        self.inner.weights().len()
    }

    fn weights(&mut self, _t: usize) -> Result<Vec<f64>> {
        let mut w = Vec::with_capacity(1 + self.inner.weights().len());
        w.push(0.0);
        w.extend_from_slice(self.inner.weights());
        Ok(w)
    }

    fn observe(&mut self, _t: usize, x: &[f64]) -> Result<()> {
        self.inner.observe(x)
    }
}

/// Run parameters shared by every strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    pub initial_value: f64,
    pub commission: f64,
    /// Record indices driven through, one period per record.
    pub test: Range<usize>,
    /// Seed for strategies that sample (the mixture grid above five
    /// assets); the engine itself is deterministic.
    pub seed: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig { initial_value: 1e6, commission: 5e-4, test: 0..0, seed: 0 }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_value > 0.0) || !self.initial_value.is_finite() {
            return Err(Error::Parameter(format!(
                "initial value {} must be positive",
                self.initial_value
            )));
        }
        if !(0.0..=0.01).contains(&self.commission) {
            return Err(Error::Parameter(format!(
                "commission rate {} outside [0, 0.01]",
                self.commission
            )));
        }
        if self.test.is_empty() {
            return Err(Error::Parameter("empty test range".into()));
        }
        Ok(())
    }
}

/// Marked portfolio value per period; entry 0 is the initial value.
pub type WealthCurve = Vec<f64>;

/// Everything one strategy produced over the test range.
#[derive(Debug, Clone)]
pub struct BacktestRun {
    pub curve: WealthCurve,
    /// The `[cash, stocks..]` vector played each period.
    pub weights: Vec<Vec<f64>>,
    pub ledger: TradeLedger,
    pub report: MetricsReport,
}

fn check_weight_vector(w: &[f64], stocks: usize, t: usize) -> Result<()> {
    if w.len() != stocks + 1 {
        return Err(Error::Shape(format!(
            "weight vector of {} entries for cash plus {stocks} stocks",
            w.len()
        )));
    }
    if w.iter().any(|v| !v.is_finite() || *v < -1e-12) {
        return Err(Error::Validation(format!(
            "weights at record {t} must be non-negative and finite: {w:?}"
        )));
    }
    let sum: f64 = w.iter().sum();
    if math::abs(sum - 1.0) > SIMPLEX_TOL {
        return Err(Error::Validation(format!(
            "weights at record {t} sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Rebalances the book to the target proportions: commission accrues on
/// the intended value change of every stock, the post-commission value
/// is then split exactly by the target weights.
fn rebalance(
    book: &mut Portfolio,
    w: &[f64],
    rate: f64,
    ledger: &mut TradeLedger,
    t: usize,
) -> Result<()> {
    let value = book.value();
    let mut cost = 0.0;
    for (j, pos) in book.positions.iter().enumerate() {
        let target = w[1 + j].max(0.0) * value;
        let delta = target - pos;
        if delta != 0.0 {
            let commission = rate * math::abs(delta);
            cost += commission;
            ledger.entries.push(TradeEntry {
                stock: j,
                side: if delta > 0.0 { Side::Buy } else { Side::Sell },
                notional: math::abs(delta),
                commission,
            });
        }
    }
    let after = value - cost;
    if !(after > 0.0) {
        return Err(Error::Numeric(format!(
            "commissions exhausted the portfolio at record {t}"
        )));
    }
    for (j, pos) in book.positions.iter_mut().enumerate() {
        *pos = w[1 + j].max(0.0) * after;
    }
    book.cash = w[0].max(0.0) * after;
    Ok(())
}

/// Drives `strategy` through `cfg.test`. `ratios` rows are indexed by
/// record; row `t` holds each stock's price relative across period `t`.
pub fn run_backtest(
    cfg: &BacktestConfig,
    ratios: &Matrix,
    strategy: &mut dyn WeightStrategy,
) -> Result<BacktestRun> {
    cfg.validate()?;
    if strategy.assets() != ratios.cols {
        return Err(Error::Shape(format!(
            "strategy covers {} stocks but the market has {}",
            strategy.assets(),
            ratios.cols
        )));
    }
    if cfg.test.end > ratios.rows {
        return Err(Error::Validation(format!(
            "test range ends at {} but the market has {} records",
            cfg.test.end, ratios.rows
        )));
    }

    let mut book = Portfolio::all_cash(ratios.cols, cfg.initial_value);
    let mut curve = vec![cfg.initial_value];
    let mut weights = Vec::with_capacity(cfg.test.len());
    let mut ledger = TradeLedger::default();
    for t in cfg.test.clone() {
        let w = strategy.weights(t)?;
        check_weight_vector(&w, ratios.cols, t)?;
        rebalance(&mut book, &w, cfg.commission, &mut ledger, t)?;
        book = apply_market(&book, ratios.row(t))?;
        let value = book.value();
        if !(value > 0.0) {
            return Err(Error::Numeric(format!(
                "portfolio value {value} at record {t}"
            )));
        }
        curve.push(value);
        weights.push(w);
        strategy.observe(t, ratios.row(t))?;
    }
    let report = compute_report(&curve, RISK_FREE, true)?;
    Ok(BacktestRun { curve, weights, ledger, report })
}

/// Trained hedger plus the features it reads.
#[derive(Debug, Clone, Copy)]
pub struct HedgeArtifacts<'a> {
    pub actor: &'a ParamSet,
    pub cfg: &'a DdpgConfig,
    pub aggregate: &'a ClusterAggregateTensor,
}

/// Trained components of the composed cluster strategy. `clusters`
/// lists global stock indices per cluster; stocks listed nowhere are
/// noise and stay untraded. Without `hedge` the clusters are weighed
/// uniformly.
#[derive(Debug, Clone, Copy)]
pub struct CadArtifacts<'a> {
    pub clusters: &'a [Vec<usize>],
    pub actors: &'a [ParamSet],
    pub a3c: &'a A3cConfig,
    pub states: &'a StateTensor,
    pub hedge: Option<HedgeArtifacts<'a>>,
}

fn validate_artifacts(art: &CadArtifacts, ratios: &Matrix, test: &Range<usize>) -> Result<()> {
    let n_stocks = art.states.stocks();
    if art.clusters.is_empty() {
        return Err(Error::Parameter("no clusters to trade".into()));
    }
    if art.actors.len() != art.clusters.len() {
        return Err(Error::Shape(format!(
            "{} actors for {} clusters",
            art.actors.len(),
            art.clusters.len()
        )));
    }
    let mut taken = vec![false; n_stocks];
    for (c, members) in art.clusters.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::Parameter(format!("cluster {c} has no stocks")));
        }
        for &j in members {
            if j >= n_stocks {
                return Err(Error::Validation(format!(
                    "cluster {c} lists stock {j} but the universe has {n_stocks}"
                )));
            }
            if taken[j] {
                return Err(Error::Validation(format!(
                    "stock {j} appears in more than one cluster"
                )));
            }
            taken[j] = true;
        }
    }
    if ratios.rows != art.states.records() || ratios.cols != n_stocks {
        return Err(Error::Shape(format!(
            "ratio matrix {}x{} against a {}-record, {}-stock universe",
            ratios.rows,
            ratios.cols,
            art.states.records(),
            n_stocks
        )));
    }
    if test.start < art.a3c.window {
        return Err(Error::Validation(format!(
            "test range starts at {} but the agents need a {}-record window",
            test.start, art.a3c.window
        )));
    }
    if let Some(h) = &art.hedge {
        if h.aggregate.clusters() != art.clusters.len() {
            return Err(Error::Shape(format!(
                "aggregate tensor covers {} clusters, assignment has {}",
                h.aggregate.clusters(),
                art.clusters.len()
            )));
        }
        if h.aggregate.records() != art.states.records() {
            return Err(Error::Shape(format!(
                "aggregate tensor has {} records, universe has {}",
                h.aggregate.records(),
                art.states.records()
            )));
        }
        if test.start < h.cfg.window {
            return Err(Error::Validation(format!(
                "test range starts at {} but the hedger needs a {}-record window",
                test.start, h.cfg.window
            )));
        }
    }
    Ok(())
}

/// The records x members view of one cluster.
fn cluster_states(states: &StateTensor, members: &[usize]) -> StateTensor {
    let records = states.records();
    let mut data = Tensor3::zeros(records, members.len(), STATE_CHANNELS);
    for r in 0..records {
        for (m, &j) in members.iter().enumerate() {
            for c in 0..STATE_CHANNELS {
                data.set(r, m, c, states.data.get(r, j, c));
            }
        }
    }
    let symbols = members.iter().map(|&j| states.symbols[j].clone()).collect();
    StateTensor { symbols, data }
}

fn cluster_ratios(ratios: &Matrix, members: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(ratios.rows, members.len());
    for r in 0..ratios.rows {
        for (m, &j) in members.iter().enumerate() {
            out.set(r, m, ratios.get(r, j));
        }
    }
    out
}

/// Book proportions as a `[cash, members..]` simplex.
fn book_simplex(book: &Portfolio) -> Result<Vec<f64>> {
    let value = book.value();
    if !(value > 0.0) {
        return Err(Error::Numeric(format!("book value {value} cannot be normalized")));
    }
    let mut s = Vec::with_capacity(1 + book.positions.len());
    s.push(book.cash / value);
    s.extend(book.positions.iter().map(|p| p / value));
    Ok(s)
}

/// Builds the composed strategy's weight rows for the test range:
/// per-cluster signal replay, book normalization, hedger (or uniform)
/// cluster weights, combination, and scatter onto the global layout.
pub fn cad_schedule(
    cfg: &BacktestConfig,
    art: &CadArtifacts,
    ratios: &Matrix,
) -> Result<ScheduledWeights> {
    cfg.validate()?;
    validate_artifacts(art, ratios, &cfg.test)?;
    let n_stocks = art.states.stocks();
    let n_c = art.clusters.len();
    let spec = actor_spec(art.a3c)?;

    // One signal replay per cluster; the window precondition makes the
    // replay's decision records line up with the test range exactly.
    let mut books: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_c);
    for (c, members) in art.clusters.iter().enumerate() {
        let sub_states = cluster_states(art.states, members);
        let sub_ratios = cluster_ratios(ratios, members);
        let run = run_signals(
            &sub_states,
            &sub_ratios,
            cfg.test.clone(),
            art.a3c.window,
            cfg.commission,
            &spec,
            &art.actors[c],
        )?;
        debug_assert_eq!(run.steps.first(), Some(&cfg.test.start));
        debug_assert_eq!(run.steps.len(), cfg.test.len());
        books.push(run.post_trade.iter().map(book_simplex).collect::<Result<Vec<_>>>()?);
    }

    let hedge_spec = match &art.hedge {
        Some(h) => Some(hedge_actor_spec(h.cfg, n_c)?),
        None => None,
    };
    let mut rows = Vec::with_capacity(cfg.test.len());
    for (k, t) in cfg.test.clone().enumerate() {
        let wprime = match (&art.hedge, &hedge_spec) {
            (Some(h), Some(hs)) => {
                actor_weights(hs, h.actor, &h.aggregate.window(t - h.cfg.window, t))?
            }
            _ => vec![1.0 / n_c as f64; n_c],
        };
        let period_books: Vec<Vec<f64>> = (0..n_c).map(|c| books[c][k].clone()).collect();
        let combined = combine_portfolios(&wprime, &period_books)?;

        // Scatter the concatenated per-cluster slots onto [cash,
        // stocks..], merging the cash slots: cash is one asset no
        // matter how many clusters fund it.
        let mut w = vec![0.0; 1 + n_stocks];
        let mut off = 0;
        for members in art.clusters {
            w[0] += combined[off];
            off += 1;
            for &j in members {
                w[1 + j] = combined[off];
                off += 1;
            }
        }
        rows.push(w);
    }
    ScheduledWeights::new(cfg.test.start, rows)
}

/// Backtests the composed cluster strategy.
pub fn run_cad(cfg: &BacktestConfig, art: &CadArtifacts, ratios: &Matrix) -> Result<BacktestRun> {
    let mut schedule = cad_schedule(cfg, art, ratios)?;
    run_backtest(cfg, ratios, &mut schedule)
}

/// One comparison row.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRow {
    pub name: String,
    pub report: MetricsReport,
}

/// Reports for several strategies over the same market and config.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<StrategyRow>,
}

/// Metric columns in report order, with the direction that counts as
/// better: drawdown shrinks, everything else grows.
const COLUMNS: [(&str, bool); 6] = [
    ("final_value_pct", true),
    ("max_drawdown", false),
    ("sharpe", true),
    ("sortino", true),
    ("calmar", true),
    ("positive_days", true),
];

fn column_value(report: &MetricsReport, column: usize) -> Option<f64> {
    match column {
        0 => Some(report.final_value_pct),
        1 => Some(report.max_drawdown),
        2 => report.sharpe,
        3 => report.sortino,
        4 => report.calmar,
        _ => Some(report.positive_days),
    }
}

/// Best and second-best defined values of one column.
fn podium(values: &[Option<f64>], higher_better: bool) -> (Option<f64>, Option<f64>) {
    let mut defined: Vec<f64> = values.iter().flatten().copied().collect();
    defined.sort_unstable_by(|a, b| {
        if higher_better { b.partial_cmp(a) } else { a.partial_cmp(b) }
            .expect("metric values are finite")
    });
    defined.dedup();
    (defined.first().copied(), defined.get(1).copied())
}

impl Comparison {
    /// Machine-readable flat table: a header with the exact metric
    /// field names, one comma-separated row per strategy, floats in
    /// shortest round-trip form, undefined ratios as "undefined".
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy");
        for (name, _) in COLUMNS {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.name);
            for column in 0..COLUMNS.len() {
                out.push(',');
                match column_value(&row.report, column) {
                    Some(v) => out.push_str(&format!("{v}")),
                    None => out.push_str("undefined"),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text table; the best value per column is marked `*`,
    /// the second best `+`.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = Vec::with_capacity(self.rows.len() + 1);
        let mut header = vec![String::from("strategy")];
        header.extend(COLUMNS.iter().map(|(n, _)| String::from(*n)));
        cells.push(header);

        let podiums: Vec<(Option<f64>, Option<f64>)> = (0..COLUMNS.len())
            .map(|column| {
                let values: Vec<Option<f64>> =
                    self.rows.iter().map(|r| column_value(&r.report, column)).collect();
                podium(&values, COLUMNS[column].1)
            })
            .collect();
        for row in &self.rows {
            let mut line = vec![row.name.clone()];
            for (column, (best, second)) in podiums.iter().enumerate() {
                let cell = match column_value(&row.report, column) {
                    None => String::from("undef"),
                    Some(v) => {
                        let mark = if Some(v) == *best {
                            "*"
                        } else if Some(v) == *second {
                            "+"
                        } else {
                            ""
                        };
                        format!("{v:.4}{mark}")
                    }
                };
                line.push(cell);
            }
            cells.push(line);
        }

        let mut widths = vec![0usize; cells[0].len()];
        for line in &cells {
            for (i, cell) in line.iter().enumerate() {
                widths[i] = widths[i].max(cell.len());
            }
        }
        let mut out = String::new();
        for line in &cells {
            for (i, cell) in line.iter().enumerate() {
                if i > 0 {
                    out.push_str("  ");
                }
                out.push_str(cell);
                for _ in cell.len()..widths[i] {
                    out.push(' ');
                }
            }
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
        }
        out
    }
}

/// Backtests each named strategy over the same market and produces the
/// comparison rows in input order.
pub fn compare_strategies(
    cfg: &BacktestConfig,
    ratios: &Matrix,
    strategies: Vec<(String, Box<dyn WeightStrategy>)>,
) -> Result<Comparison> {
    if strategies.is_empty() {
        return Err(Error::Parameter("nothing to compare".into()));
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for (name, mut strategy) in strategies {
        let run = run_backtest(cfg, ratios, strategy.as_mut())?;
        rows.push(StrategyRow { name, report: run.report });
    }
    Ok(Comparison { rows })
}

/// Serializes a wealth curve as "period,value" rows.
pub fn curve_to_csv(curve: &[f64]) -> String {
    let mut out = String::from("period,value\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

/// Parses the output of [`curve_to_csv`] back, bit-exactly.
pub fn curve_from_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("period,value") => {}
        other => {
            return Err(Error::Validation(format!(
                "expected a 'period,value' header, got {other:?}"
            )))
        }
    }
    let mut curve = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (period, value) = line
            .split_once(',')
            .ok_or_else(|| Error::Validation(format!("bad curve row '{line}'")))?;
        let period: usize = period
            .parse()
            .map_err(|_| Error::Validation(format!("bad period '{period}'")))?;
        if period != curve.len() {
            return Err(Error::Validation(format!(
                "period {period} out of order at row {}",
                curve.len()
            )));
        }
        let value: f64 = value
            .parse()
            .map_err(|_| Error::Validation(format!("bad value '{value}'")))?;
        curve.push(value);
    }
    if curve.is_empty() {
        return Err(Error::Validation("curve with no rows".into()));
    }
    Ok(curve)
}
