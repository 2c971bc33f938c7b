//! The fixed 25-column technical indicator panel.
//!
//! Columns are computed over the raw series, then the first
//! `WARMUP_RECORDS` rows are dropped so every surviving record has all
//! lookbacks fully formed. Values in the warm-up prefix use shortened
//! windows purely to stay finite; they never leave this module.
//!
//! Conventions, pinned here once: EMA seeds at the first value with
//! alpha = 2/(n+1); RSI, ATR and MFI use Wilder smoothing; Bollinger bands
//! use the population standard deviation; degenerate denominators fall back
//! to the neutral value of each oscillator (50 for RSI/%K/MFI, -50 for
//! Williams %R, 0.5 for %B, 0 for CCI) so constant inputs yield constant,
//! finite columns.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::math;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use super::{Date, OhlcvSeries};

/// Number of indicator columns.
pub const INDICATOR_COUNT: usize = 25;

/// Records dropped from the front of every series: the longest lookback.
pub const WARMUP_RECORDS: usize = 26;

/// Canonical column names, in panel order.
pub const INDICATOR_NAMES: [&str; INDICATOR_COUNT] = [
    "ma5",
    "ma10",
    "ma20",
    "ema12",
    "ema26",
    "macd",
    "macd_signal",
    "macd_hist",
    "rsi14",
    "stoch_k14",
    "stoch_d3",
    "williams_r14",
    "roc10",
    "momentum10",
    "boll_upper",
    "boll_lower",
    "boll_pct_b",
    "atr14",
    "obv",
    "cci20",
    "mfi14",
    "vwap20",
    "log_return",
    "volatility20",
    "close_over_ma5",
];

/// Per-stock indicator table: one row per post-warm-up record.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorPanel {
    pub symbol: String,
    pub dates: Vec<Date>,
    /// records x INDICATOR_COUNT
    pub values: Matrix,
}

impl IndicatorPanel {
    pub fn records(&self) -> usize {
        self.values.rows
    }
}

fn sma(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut running = 0.0;
    for t in 0..xs.len() {
        running += xs[t];
        if t >= window {
            running -= xs[t - window];
        }
        let n = (t + 1).min(window);
        out.push(running / n as f64);
    }
    out
}

fn ema(xs: &[f64], n: usize) -> Vec<f64> {
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(xs.len());
    let mut e = xs[0];
    out.push(e);
    for &x in &xs[1..] {
        e = alpha * x + (1.0 - alpha) * e;
        out.push(e);
    }
    out
}

/// Wilder running average: plain mean over the first `n` samples, then
/// avg <- (avg*(n-1) + x)/n.
fn wilder(xs: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut avg = 0.0;
    for (t, &x) in xs.iter().enumerate() {
        if t < n {
            avg = (avg * t as f64 + x) / (t as f64 + 1.0);
        } else {
            avg = (avg * (n as f64 - 1.0) + x) / n as f64;
        }
        out.push(avg);
    }
    out
}

fn window_start(t: usize, window: usize) -> usize {
    (t + 1).saturating_sub(window)
}

/// Computes the full panel for one series and trims the warm-up prefix.
pub fn compute_indicators(series: &OhlcvSeries) -> Result<IndicatorPanel> {
    let n = series.rows.len();
    if n <= WARMUP_RECORDS {
        return Err(Error::InsufficientData { needed: WARMUP_RECORDS + 1, got: n });
    }
    let close: Vec<f64> = series.rows.iter().map(|r| r.close).collect();
    let high: Vec<f64> = series.rows.iter().map(|r| r.high).collect();
    let low: Vec<f64> = series.rows.iter().map(|r| r.low).collect();
    let volume: Vec<f64> = series.rows.iter().map(|r| r.volume).collect();
    let typical: Vec<f64> = (0..n).map(|t| (high[t] + low[t] + close[t]) / 3.0).collect();

    let ma5 = sma(&close, 5);
    let ma10 = sma(&close, 10);
    let ma20 = sma(&close, 20);
    let ema12 = ema(&close, 12);
    let ema26 = ema(&close, 26);
    let macd: Vec<f64> = (0..n).map(|t| ema12[t] - ema26[t]).collect();
    let macd_signal = ema(&macd, 9);
    let macd_hist: Vec<f64> = (0..n).map(|t| macd[t] - macd_signal[t]).collect();

    // RSI(14), Wilder smoothing over close-to-close gains and losses.
    let mut gains = vec![0.0; n];
    let mut losses = vec![0.0; n];
    for t in 1..n {
        let d = close[t] - close[t - 1];
        gains[t] = d.max(0.0);
        losses[t] = (-d).max(0.0);
    }
    let avg_gain = wilder(&gains[1..], 14);
    let avg_loss = wilder(&losses[1..], 14);
    let rsi: Vec<f64> = (0..n)
        .map(|t| {
            if t == 0 {
                return 50.0;
            }
            let (g, l) = (avg_gain[t - 1], avg_loss[t - 1]);
            if g == 0.0 && l == 0.0 {
                50.0
            } else if l == 0.0 {
                100.0
            } else {
                100.0 - 100.0 / (1.0 + g / l)
            }
        })
        .collect();

    // Stochastic %K(14), %D(3), Williams %R(14) over the high/low channel.
    let mut stoch_k = Vec::with_capacity(n);
    let mut williams = Vec::with_capacity(n);
    for t in 0..n {
        let s = window_start(t, 14);
        let hh = high[s..=t].iter().cloned().fold(f64::MIN, f64::max);
        let ll = low[s..=t].iter().cloned().fold(f64::MAX, f64::min);
        if hh > ll {
            stoch_k.push(100.0 * (close[t] - ll) / (hh - ll));
            williams.push(-100.0 * (hh - close[t]) / (hh - ll));
        } else {
            stoch_k.push(50.0);
            williams.push(-50.0);
        }
    }
    let stoch_d = sma(&stoch_k, 3);

    let roc10: Vec<f64> =
        (0..n).map(|t| 100.0 * (close[t] / close[window_start(t, 11)] - 1.0)).collect();
    let momentum10: Vec<f64> = (0..n).map(|t| close[t] - close[window_start(t, 11)]).collect();

    // Bollinger(20, 2) with population deviation.
    let mut boll_upper = Vec::with_capacity(n);
    let mut boll_lower = Vec::with_capacity(n);
    let mut boll_pct_b = Vec::with_capacity(n);
    for t in 0..n {
        let s = window_start(t, 20);
        let w = &close[s..=t];
        let m = math::mean(w);
        let var = w.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / w.len() as f64;
        let sd = math::sqrt(var);
        let (up, lo) = (m + 2.0 * sd, m - 2.0 * sd);
        boll_upper.push(up);
        boll_lower.push(lo);
        boll_pct_b.push(if up > lo { (close[t] - lo) / (up - lo) } else { 0.5 });
    }

    // ATR(14): true range smoothed the Wilder way.
    let mut tr = Vec::with_capacity(n);
    tr.push(high[0] - low[0]);
    for t in 1..n {
        let hl = high[t] - low[t];
        let hc = math::abs(high[t] - close[t - 1]);
        let lc = math::abs(low[t] - close[t - 1]);
        tr.push(hl.max(hc).max(lc));
    }
    let atr = wilder(&tr, 14);

    // On-balance volume from a zero base.
    let mut obv = Vec::with_capacity(n);
    obv.push(0.0);
    for t in 1..n {
        let step = if close[t] > close[t - 1] {
            volume[t]
        } else if close[t] < close[t - 1] {
            -volume[t]
        } else {
            0.0
        };
        obv.push(obv[t - 1] + step);
    }

    // CCI(20) over the typical price.
    let mut cci = Vec::with_capacity(n);
    for t in 0..n {
        let s = window_start(t, 20);
        let w = &typical[s..=t];
        let m = math::mean(w);
        let md = w.iter().map(|x| math::abs(x - m)).sum::<f64>() / w.len() as f64;
        cci.push(if md > 0.0 { (typical[t] - m) / (0.015 * md) } else { 0.0 });
    }

    // MFI(14) over signed money flow.
    let mut pos_flow = vec![0.0; n];
    let mut neg_flow = vec![0.0; n];
    for t in 1..n {
        let flow = typical[t] * volume[t];
        if typical[t] > typical[t - 1] {
            pos_flow[t] = flow;
        } else if typical[t] < typical[t - 1] {
            neg_flow[t] = flow;
        }
    }
    let mut mfi = Vec::with_capacity(n);
    for t in 0..n {
        let s = window_start(t, 14).max(1);
        if t == 0 {
            mfi.push(50.0);
            continue;
        }
        let p: f64 = pos_flow[s..=t].iter().sum();
        let q: f64 = neg_flow[s..=t].iter().sum();
        mfi.push(if p == 0.0 && q == 0.0 {
            50.0
        } else if q == 0.0 {
            100.0
        } else if p == 0.0 {
            0.0
        } else {
            100.0 - 100.0 / (1.0 + p / q)
        });
    }

    // Rolling VWAP(20); zero traded volume falls back to the typical price.
    let mut vwap = Vec::with_capacity(n);
    for t in 0..n {
        let s = window_start(t, 20);
        let pv: f64 = (s..=t).map(|i| typical[i] * volume[i]).sum();
        let v: f64 = volume[s..=t].iter().sum();
        vwap.push(if v > 0.0 { pv / v } else { typical[t] });
    }

    let mut log_return = Vec::with_capacity(n);
    log_return.push(0.0);
    for t in 1..n {
        log_return.push(math::ln(close[t] / close[t - 1]));
    }

    // Rolling volatility: sample std of the last 20 one-day log returns.
    let mut volatility = Vec::with_capacity(n);
    for t in 0..n {
        let s = window_start(t, 20).max(1);
        volatility.push(if t >= 2 { math::sample_std(&log_return[s..=t]) } else { 0.0 });
    }

    let close_over_ma5: Vec<f64> = (0..n).map(|t| close[t] / ma5[t]).collect();

    let columns: [&Vec<f64>; INDICATOR_COUNT] = [
        &ma5,
        &ma10,
        &ma20,
        &ema12,
        &ema26,
        &macd,
        &macd_signal,
        &macd_hist,
        &rsi,
        &stoch_k,
        &stoch_d,
        &williams,
        &roc10,
        &momentum10,
        &boll_upper,
        &boll_lower,
        &boll_pct_b,
        &atr,
        &obv,
        &cci,
        &mfi,
        &vwap,
        &log_return,
        &volatility,
        &close_over_ma5,
    ];

    let records = n - WARMUP_RECORDS;
    let mut values = Matrix::zeros(records, INDICATOR_COUNT);
    for r in 0..records {
        let t = r + WARMUP_RECORDS;
        for (c, col) in columns.iter().enumerate() {
            let v = col[t];
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{}: indicator {} is not finite at {}",
                    series.symbol, INDICATOR_NAMES[c], series.rows[t].date
                )));
            }
            values.set(r, c, v);
        }
    }
    Ok(IndicatorPanel {
        symbol: series.symbol.clone(),
        dates: series.rows[WARMUP_RECORDS..].iter().map(|r| r.date).collect(),
        values,
    })
}

/// Frozen per-column normalization statistics of one stock.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-scores every column using statistics from the training range only.
///
/// Columns that are constant over the training range map to zero rather
/// than dividing by a vanishing deviation.
pub fn normalize_panel(
    panel: &IndicatorPanel,
    train: Range<usize>,
) -> Result<(IndicatorPanel, IndicatorStats)> {
    if train.end > panel.records() || train.is_empty() {
        return Err(Error::Parameter(format!(
            "training range {}..{} outside panel of {} records",
            train.start,
            train.end,
            panel.records()
        )));
    }
    let mut mean = Vec::with_capacity(INDICATOR_COUNT);
    let mut std = Vec::with_capacity(INDICATOR_COUNT);
    for c in 0..INDICATOR_COUNT {
        let col: Vec<f64> = train.clone().map(|r| panel.values.get(r, c)).collect();
        mean.push(math::mean(&col));
        std.push(math::sample_std(&col));
    }
    let mut values = Matrix::zeros(panel.records(), INDICATOR_COUNT);
    for r in 0..panel.records() {
        for c in 0..INDICATOR_COUNT {
            let z = if std[c] > 1e-12 { (panel.values.get(r, c) - mean[c]) / std[c] } else { 0.0 };
            values.set(r, c, z);
        }
    }
    Ok((
        IndicatorPanel { symbol: panel.symbol.clone(), dates: panel.dates.clone(), values },
        IndicatorStats { mean, std },
    ))
}
