//! Signal-driven portfolio updates with cash handling and commissions.
//!
//! SELL liquidates a position in full; the proceeds net of sell commission
//! join the cash pool, which is split equally across all BUY-flagged stocks
//! with buy commission deducted from each allocation. With no buyers the
//! pool simply stays in cash. Trading moves money, never creates it: the
//! new value plus all commissions equals the old value.

use crate::error::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// Per-stock trading decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Sell,
    Hold,
    Buy,
}

impl Signal {
    /// The conventional {-1, 0, +1} encoding.
    pub fn as_i8(self) -> i8 {
        match self {
            Signal::Sell => -1,
            Signal::Hold => 0,
            Signal::Buy => 1,
        }
    }
}

/// Capital allocation: currency per stock plus an explicit cash slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub positions: Vec<f64>,
    pub cash: f64,
}

impl Portfolio {
    /// Everything in cash.
    pub fn all_cash(n_stocks: usize, cash: f64) -> Self {
        Portfolio { positions: alloc::vec![0.0; n_stocks], cash }
    }

    pub fn value(&self) -> f64 {
        self.positions.iter().sum::<f64>() + self.cash
    }

    /// Position proportions of total value; all zero for a worthless book.
    pub fn proportions(&self) -> Vec<f64> {
        let v = self.value();
        if v <= 0.0 {
            return alloc::vec![0.0; self.positions.len()];
        }
        self.positions.iter().map(|p| p / v).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.positions.iter().any(|p| *p < 0.0 || !p.is_finite()) || self.cash < 0.0 {
            return Err(Error::Validation(format!(
                "portfolio entries must be non-negative and finite: {:?} cash {}",
                self.positions, self.cash
            )));
        }
        Ok(())
    }
}

/// Side of a ledger entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Buy => "BUY",
            Side::Sell => "SELL",
        }
    }
}

/// One executed trade. Commission is exactly `rate * notional`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeEntry {
    pub stock: usize,
    pub side: Side,
    pub notional: f64,
    pub commission: f64,
}

/// All trades of one portfolio update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TradeLedger {
    pub entries: Vec<TradeEntry>,
}

impl TradeLedger {
    pub fn total_commission(&self) -> f64 {
        self.entries.iter().map(|e| e.commission).sum()
    }
}

/// Applies one signal vector to a portfolio.
///
/// Steps: liquidate SELL positions (proceeds R), net out sell commission,
/// pool with cash, split the pool equally over the n BUY stocks with buy
/// commission deducted from each allocation. n = 0 leaves the pool in cash.
pub fn update_portfolio(
    b_prev: &Portfolio,
    signals: &[Signal],
    commission_rate: f64,
) -> Result<(Portfolio, TradeLedger)> {
    b_prev.validate()?;
    if signals.len() != b_prev.positions.len() {
        return Err(Error::Shape(format!(
            "{} signals for {} positions",
            signals.len(),
            b_prev.positions.len()
        )));
    }
    if !(0.0..=0.01).contains(&commission_rate) {
        return Err(Error::Parameter(format!(
            "commission rate {commission_rate} outside [0, 0.01]"
        )));
    }

    let mut next = b_prev.clone();
    let mut ledger = TradeLedger::default();
    let mut pool = b_prev.cash;
    for (j, (&sig, pos)) in signals.iter().zip(&b_prev.positions).enumerate() {
        if sig == Signal::Sell && *pos > 0.0 {
            let commission = commission_rate * pos;
            pool += pos - commission;
            next.positions[j] = 0.0;
            ledger.entries.push(TradeEntry {
                stock: j,
                side: Side::Sell,
                notional: *pos,
                commission,
            });
        } else if sig == Signal::Sell {
            next.positions[j] = 0.0;
        }
    }

    let buyers: Vec<usize> = signals
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == Signal::Buy)
        .map(|(j, _)| j)
        .collect();
    if buyers.is_empty() || pool <= 0.0 {
        next.cash = pool;
        return Ok((next, ledger));
    }

    let allocation = pool / buyers.len() as f64;
    for &j in &buyers {
        let commission = commission_rate * allocation;
        next.positions[j] += allocation - commission;
        ledger.entries.push(TradeEntry {
            stock: j,
            side: Side::Buy,
            notional: allocation,
            commission,
        });
    }
    next.cash = 0.0;
    Ok((next, ledger))
}

/// Total capital in the book.
pub fn portfolio_value(b: &Portfolio) -> f64 {
    b.value()
}

/// Marks positions to the next period's prices; cash is unaffected.
pub fn apply_market(b: &Portfolio, ratios: &[f64]) -> Result<Portfolio> {
    if ratios.len() != b.positions.len() {
        return Err(Error::Shape(format!(
            "{} ratios for {} positions",
            ratios.len(),
            b.positions.len()
        )));
    }
    if ratios.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(Error::Validation("price ratios must be positive and finite".into()));
    }
    Ok(Portfolio {
        positions: b.positions.iter().zip(ratios).map(|(p, x)| p * x).collect(),
        cash: b.cash,
    })
}
