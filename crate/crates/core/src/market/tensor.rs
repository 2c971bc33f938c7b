//! Per-cluster state tensors fed to the trading agents.
//!
//! Channels 0..24 carry the normalized indicator columns; channel 25 carries
//! the proportion of capital held in each stock and is rewritten in place as
//! an agent trades through the records.

use crate::error::{Error, Result};
use crate::linalg::Tensor3;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::indicators::{IndicatorPanel, INDICATOR_COUNT};

/// Channels per stock: 25 indicators plus the holdings proportion.
pub const STATE_CHANNELS: usize = INDICATOR_COUNT + 1;

/// Observation tensor of one cluster: (records x stocks x STATE_CHANNELS).
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub symbols: Vec<String>,
    pub data: Tensor3,
}

impl StateTensor {
    pub fn records(&self) -> usize {
        self.data.d0
    }

    pub fn stocks(&self) -> usize {
        self.data.d1
    }

    /// Overwrites the holdings channel of one record.
    ///
    /// Proportions are of total capital, so the row sums to at most 1; the
    /// slack is the cash position.
    pub fn set_holdings(&mut self, record: usize, proportions: &[f64]) -> Result<()> {
        if proportions.len() != self.stocks() {
            return Err(Error::Shape(format!(
                "holdings row has {} entries for {} stocks",
                proportions.len(),
                self.stocks()
            )));
        }
        let sum: f64 = proportions.iter().sum();
        if proportions.iter().any(|p| !(0.0..=1.0 + 1e-9).contains(p)) || sum > 1.0 + 1e-9 {
            return Err(Error::Validation(format!(
                "holdings proportions must lie in [0,1] and sum to at most 1, got sum {sum}"
            )));
        }
        for (j, &p) in proportions.iter().enumerate() {
            self.data.set(record, j, INDICATOR_COUNT, p);
        }
        Ok(())
    }

    /// The 64-style observation window [lo, hi) as its own tensor.
    pub fn window(&self, lo: usize, hi: usize) -> Tensor3 {
        self.data.slice_planes(lo, hi)
    }
}

/// Assembles the tensor for one cluster from normalized member panels.
///
/// Panels must cover identical date ranges (the universe is aligned before
/// indicator computation). The holdings channel starts at
/// `initial_holdings` on every record and is maintained by the caller from
/// then on.
pub fn build_state_tensor(
    panels: &[&IndicatorPanel],
    initial_holdings: &[f64],
) -> Result<StateTensor> {
    if panels.is_empty() {
        return Err(Error::Validation("state tensor needs at least one stock".into()));
    }
    let records = panels[0].records();
    for p in panels {
        if p.records() != records || p.dates != panels[0].dates {
            return Err(Error::Validation(format!(
                "panel {} does not share the cluster's date range",
                p.symbol
            )));
        }
    }
    if initial_holdings.len() != panels.len() {
        return Err(Error::Shape(format!(
            "{} initial holdings for {} stocks",
            initial_holdings.len(),
            panels.len()
        )));
    }
    let mut data = Tensor3::zeros(records, panels.len(), STATE_CHANNELS);
    for (j, panel) in panels.iter().enumerate() {
        for r in 0..records {
            for c in 0..INDICATOR_COUNT {
                data.set(r, j, c, panel.values.get(r, c));
            }
        }
    }
    let mut tensor = StateTensor {
        symbols: panels.iter().map(|p| p.symbol.clone()).collect(),
        data,
    };
    for r in 0..records {
        tensor.set_holdings(r, initial_holdings)?;
    }
    Ok(tensor)
}
