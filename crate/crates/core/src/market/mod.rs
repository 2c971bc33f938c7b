//! Market data: OHLCV series, calendar alignment, price ratios, indicator
//! panels, normalization, state tensors, and the train/validation/test split.

mod date;
mod indicators;
mod tensor;

pub use date::Date;
pub use indicators::{
    compute_indicators, normalize_panel, IndicatorPanel, IndicatorStats, INDICATOR_COUNT,
    INDICATOR_NAMES, WARMUP_RECORDS,
};
pub use tensor::{build_state_tensor, StateTensor, STATE_CHANNELS};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Range;

/// One trading day of a single symbol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhlcvRow {
    pub date: Date,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

/// A validated daily series for one symbol: dates strictly increase, prices
/// are positive, high/low bound open and close, volume is non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct OhlcvSeries {
    pub symbol: String,
    pub rows: Vec<OhlcvRow>,
}

impl OhlcvSeries {
    pub fn new(symbol: &str, rows: Vec<OhlcvRow>) -> Result<Self> {
        let series = OhlcvSeries { symbol: symbol.to_string(), rows };
        series.validate()?;
        Ok(series)
    }

    fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            let at = |what: &str| {
                Error::Validation(format!("{} row {} ({}): {}", self.symbol, i + 1, row.date, what))
            };
            if !(row.open > 0.0 && row.high > 0.0 && row.low > 0.0 && row.close > 0.0) {
                return Err(at("prices must be positive"));
            }
            if !(row.open.is_finite()
                && row.high.is_finite()
                && row.low.is_finite()
                && row.close.is_finite()
                && row.volume.is_finite())
            {
                return Err(at("non-finite field"));
            }
            if row.volume < 0.0 {
                return Err(at("volume must be non-negative"));
            }
            if row.high < row.open.max(row.close) {
                return Err(at("high below open/close"));
            }
            if row.low > row.open.min(row.close) {
                return Err(at("low above open/close"));
            }
            if i > 0 && self.rows[i - 1].date >= row.date {
                return Err(at("dates must strictly increase"));
            }
        }
        Ok(())
    }

    pub fn closes(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.close).collect()
    }

    /// Renders the series in the exact format [`parse_ohlcv`] reads;
    /// floats use the shortest round-trip form, so a parse of the
    /// output reproduces the series bit for bit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(OHLCV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.date, r.open, r.high, r.low, r.close, r.volume
            ));
        }
        out
    }
}

/// Exact header required of every OHLCV file.
pub const OHLCV_HEADER: &str = "date,open,high,low,close,volume";

/// Parses the headerful `date,open,high,low,close,volume` text format.
///
/// Line numbers in errors are 1-based and count the header.
pub fn parse_ohlcv(text: &str, symbol: &str) -> Result<OhlcvSeries> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty input".to_string() })?;
    if header.trim_end() != OHLCV_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be exactly '{OHLCV_HEADER}', got '{header}'"),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let date = Date::parse(fields[0])
            .map_err(|e| Error::Parse { line: lineno, msg: format!("{e}") })?;
        let mut nums = [0.0f64; 5];
        for (k, raw) in fields[1..].iter().enumerate() {
            nums[k] = raw.trim().parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("field '{raw}' is not a number"),
            })?;
        }
        rows.push(OhlcvRow {
            date,
            open: nums[0],
            high: nums[1],
            low: nums[2],
            close: nums[3],
            volume: nums[4],
        });
    }
    OhlcvSeries::new(symbol, rows)
}

/// Restricts every series to the trading days present in all of them.
///
/// Per-stock gaps are resolved by calendar intersection before any
/// computation; an empty intersection is an error.
pub fn align_universe(series: Vec<OhlcvSeries>) -> Result<Vec<OhlcvSeries>> {
    if series.is_empty() {
        return Err(Error::Validation("universe is empty".to_string()));
    }
    let mut names = BTreeSet::new();
    for s in &series {
        if !names.insert(s.symbol.clone()) {
            return Err(Error::Validation(format!("duplicate symbol {}", s.symbol)));
        }
    }
    let mut common: BTreeSet<Date> = series[0].rows.iter().map(|r| r.date).collect();
    for s in &series[1..] {
        let dates: BTreeSet<Date> = s.rows.iter().map(|r| r.date).collect();
        common = common.intersection(&dates).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::Validation("no trading days shared by all symbols".to_string()));
    }
    series
        .into_iter()
        .map(|s| {
            let symbol = s.symbol.clone();
            let rows = s.rows.into_iter().filter(|r| common.contains(&r.date)).collect();
            OhlcvSeries::new(&symbol, rows)
        })
        .collect()
}

/// Gross price ratios close[t]/close[t-1] across one aligned universe.
///
/// Defined for t >= 1; the first record has no predecessor.
pub fn price_ratio(closes_by_stock: &[Vec<f64>], t: usize) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::Parameter("price ratio needs t >= 1".to_string()));
    }
    closes_by_stock
        .iter()
        .enumerate()
        .map(|(j, closes)| {
            if t >= closes.len() {
                return Err(Error::Parameter(format!(
                    "t = {t} beyond series of stock {j} (len {})",
                    closes.len()
                )));
            }
            Ok(closes[t] / closes[t - 1])
        })
        .collect()
}

/// Ratio matrix aligned with indicator-panel records: row r holds
/// close[offset + r] / close[offset + r - 1] per stock, so with
/// `offset = WARMUP_RECORDS` every panel record has a ratio.
pub fn ratio_matrix(series: &[OhlcvSeries], offset: usize) -> Result<Matrix> {
    if offset == 0 {
        return Err(Error::Parameter("ratio matrix needs offset >= 1".to_string()));
    }
    let n_records = series
        .iter()
        .map(|s| s.rows.len().saturating_sub(offset))
        .min()
        .unwrap_or(0);
    if n_records == 0 {
        return Err(Error::InsufficientData { needed: offset + 1, got: 0 });
    }
    let mut out = Matrix::zeros(n_records, series.len());
    for (j, s) in series.iter().enumerate() {
        for r in 0..n_records {
            let t = offset + r;
            out.set(r, j, s.rows[t].close / s.rows[t - 1].close);
        }
    }
    Ok(out)
}

/// Contiguous train / validation / test ranges over panel records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

/// Default split sizes: 1620 training, 180 validation, 360 test records.
pub const DEFAULT_SPLIT: (usize, usize, usize) = (1620, 180, 360);

/// Cuts `n_records` into contiguous ranges of the requested sizes, anchored
/// at the start; surplus trailing records are left unused.
pub fn split_dataset(n_records: usize, sizes: (usize, usize, usize)) -> Result<DataSplit> {
    let (a, b, c) = sizes;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::Parameter("split sizes must all be positive".to_string()));
    }
    let total = a + b + c;
    if n_records < total {
        return Err(Error::InsufficientData { needed: total, got: n_records });
    }
    Ok(DataSplit { train: 0..a, validation: a..a + b, test: a + b..total })
}
