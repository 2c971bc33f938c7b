//! Evaluation metrics over wealth curves.
//!
//! Drawdown is reported in relative (fractional) form. Sharpe, Sortino and
//! Calmar use sample statistics (n - 1) over per-period excess returns and,
//! when `annualize` is set (the default in reports), scale by sqrt(252) —
//! Calmar's numerator by 252. Metrics whose denominators vanish are errors,
//! surfaced as `undefined` in serialized reports rather than silent zeros.

use crate::error::{Error, Result};
use crate::math;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Trading periods per year used by the annualization flag.
pub const PERIODS_PER_YEAR: f64 = 252.0;

fn validate_curve(curve: &[f64]) -> Result<()> {
    if curve.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: curve.len() });
    }
    if curve.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Validation("wealth curve must be strictly positive".to_string()));
    }
    Ok(())
}

/// Simple per-period returns V_t/V_{t-1} - 1.
pub fn returns_from_curve(curve: &[f64]) -> Result<Vec<f64>> {
    validate_curve(curve)?;
    Ok(curve.windows(2).map(|w| w[1] / w[0] - 1.0).collect())
}

/// Terminal wealth as a percentage of initial wealth.
pub fn final_value(curve: &[f64]) -> Result<f64> {
    validate_curve(curve)?;
    Ok(curve[curve.len() - 1] / curve[0] * 100.0)
}

/// Largest peak-to-trough loss as a fraction of the peak.
pub fn max_drawdown(curve: &[f64]) -> Result<f64> {
    validate_curve(curve)?;
    let mut peak = curve[0];
    let mut worst: f64 = 0.0;
    for &v in curve {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    Ok(worst)
}

/// Mean excess return over its sample deviation.
pub fn sharpe(returns: &[f64], rf: f64, annualize: bool) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: returns.len() });
    }
    let excess: Vec<f64> = returns.iter().map(|r| r - rf).collect();
    let sd = math::sample_std(&excess);
    if sd <= 0.0 {
        return Err(Error::UndefinedMetric("sharpe: zero return variance".to_string()));
    }
    let raw = math::mean(&excess) / sd;
    Ok(if annualize { raw * math::sqrt(PERIODS_PER_YEAR) } else { raw })
}

/// Mean excess return over the deviation of clipped (downside) excess.
pub fn sortino(returns: &[f64], rf: f64, annualize: bool) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: returns.len() });
    }
    let excess: Vec<f64> = returns.iter().map(|r| r - rf).collect();
    if !excess.iter().any(|e| *e < 0.0) {
        return Err(Error::UndefinedMetric("sortino: no negative excess returns".to_string()));
    }
    let clipped: Vec<f64> = excess.iter().map(|&e| e.min(0.0)).collect();
    let downside = math::sample_std(&clipped);
    if downside <= 0.0 {
        return Err(Error::UndefinedMetric("sortino: zero downside deviation".to_string()));
    }
    let raw = math::mean(&excess) / downside;
    Ok(if annualize { raw * math::sqrt(PERIODS_PER_YEAR) } else { raw })
}

/// Mean excess return (annualized by x252 under the flag) over max drawdown.
pub fn calmar(returns: &[f64], rf: f64, curve: &[f64], annualize: bool) -> Result<f64> {
    let mdd = max_drawdown(curve)?;
    if mdd <= 0.0 {
        return Err(Error::UndefinedMetric("calmar: max drawdown is zero".to_string()));
    }
    let excess: Vec<f64> = returns.iter().map(|r| r - rf).collect();
    let numer = math::mean(&excess) * if annualize { PERIODS_PER_YEAR } else { 1.0 };
    Ok(numer / mdd)
}

/// Fraction of periods with a strictly positive return.
pub fn positive_days(curve: &[f64]) -> Result<f64> {
    validate_curve(curve)?;
    let ups = curve.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(ups as f64 / (curve.len() - 1) as f64)
}

/// The six metrics of one backtest. Ratio metrics that are undefined on the
/// given curve (zero variance, no downside, zero drawdown) are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub final_value_pct: f64,
    pub max_drawdown: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub calmar: Option<f64>,
    pub positive_days: f64,
}

fn defined_or_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Computes the full report for one wealth curve.
pub fn compute_report(curve: &[f64], rf: f64, annualize: bool) -> Result<MetricsReport> {
    let returns = returns_from_curve(curve)?;
    Ok(MetricsReport {
        final_value_pct: final_value(curve)?,
        max_drawdown: max_drawdown(curve)?,
        sharpe: defined_or_none(sharpe(&returns, rf, annualize))?,
        sortino: defined_or_none(sortino(&returns, rf, annualize))?,
        calmar: defined_or_none(calmar(&returns, rf, curve, annualize))?,
        positive_days: positive_days(curve)?,
    })
}

fn fmt_field(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "undefined".to_string(),
    }
}

fn parse_field(s: &str) -> Result<Option<f64>> {
    if s == "undefined" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Validation(format!("bad metric value '{s}'")))
}

impl MetricsReport {
    /// Flat `key=value` text with one field per line, in canonical order.
    /// Float formatting is Rust's shortest round-trip form, so equal reports
    /// serialize byte-identically.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("final_value_pct={}\n", self.final_value_pct));
        out.push_str(&format!("max_drawdown={}\n", self.max_drawdown));
        out.push_str(&format!("sharpe={}\n", fmt_field(self.sharpe)));
        out.push_str(&format!("sortino={}\n", fmt_field(self.sortino)));
        out.push_str(&format!("calmar={}\n", fmt_field(self.calmar)));
        out.push_str(&format!("positive_days={}\n", self.positive_days));
        out
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut fields: [Option<&str>; 6] = [None; 6];
        const NAMES: [&str; 6] =
            ["final_value_pct", "max_drawdown", "sharpe", "sortino", "calmar", "positive_days"];
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("bad report line '{line}'")))?;
            let idx = NAMES
                .iter()
                .position(|n| *n == key)
                .ok_or_else(|| Error::Validation(format!("unknown report field '{key}'")))?;
            fields[idx] = Some(value);
        }
        let get = |i: usize| -> Result<&str> {
            fields[i].ok_or_else(|| Error::Validation(format!("missing report field {}", NAMES[i])))
        };
        let required = |i: usize| -> Result<f64> {
            parse_field(get(i)?)?
                .ok_or_else(|| Error::Validation(format!("field {} cannot be undefined", NAMES[i])))
        };
        Ok(MetricsReport {
            final_value_pct: required(0)?,
            max_drawdown: required(1)?,
            sharpe: parse_field(get(2)?)?,
            sortino: parse_field(get(3)?)?,
            calmar: parse_field(get(4)?)?,
            positive_days: required(5)?,
        })
    }
}
