//! Synthetic daily markets: seeded geometric walks with per-stock drift
//! and volatility, dressed up as valid OHLCV series.
//!
//! Closes follow `close_t = close_{t-1} * (1 + drift) * exp(vol * z_t)`
//! with standard-normal `z`, so zero volatility compounds the drift
//! exactly and zero drift on top of that freezes the price. Opens carry
//! the previous close, highs and lows pad the open/close bracket by a
//! volatility-scaled margin, and volume is drawn independently. All
//! draws come from one named substream of the given seed in a fixed
//! order, so the same inputs regenerate the same series bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::market::{Date, OhlcvRow, OhlcvSeries};
use crate::math;
use crate::rng::{normal, substream, Stream};

/// One stock of the synthetic universe.
#[derive(Debug, Clone, PartialEq)]
pub struct StockSpec {
    pub symbol: String,
    /// First close, also the first open.
    pub initial: f64,
    /// Fractional price change per period before noise.
    pub drift: f64,
    /// Scale of the log-price noise per period.
    pub vol: f64,
}

/// Universe-level generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub periods: usize,
    /// Calendar day of the first record; records land on consecutive days.
    pub start: Date,
    pub seed: u64,
}

fn validate(specs: &[StockSpec], cfg: &SynthConfig) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Parameter("no stocks to generate".into()));
    }
    if cfg.periods < 2 {
        return Err(Error::Parameter(format!(
            "{} periods; a walk needs at least 2",
            cfg.periods
        )));
    }
    for (i, spec) in specs.iter().enumerate() {
        if !(spec.initial > 0.0) || !spec.initial.is_finite() {
            return Err(Error::Parameter(format!(
                "{}: initial price {} must be positive",
                spec.symbol, spec.initial
            )));
        }
        if !(spec.drift > -1.0) || !spec.drift.is_finite() {
            return Err(Error::Parameter(format!(
                "{}: drift {} must exceed -1",
                spec.symbol, spec.drift
            )));
        }
        if spec.vol < 0.0 || !spec.vol.is_finite() {
            return Err(Error::Parameter(format!(
                "{}: volatility {} must be non-negative",
                spec.symbol, spec.vol
            )));
        }
        if specs[..i].iter().any(|other| other.symbol == spec.symbol) {
            return Err(Error::Validation(format!("duplicate symbol {}", spec.symbol)));
        }
    }
    Ok(())
}

/// Shares traded per record, independent of the price path.
fn draw_volume(stream: &mut Stream) -> f64 {
    math::round(1e6 * (0.5 + stream.gen::<f64>()))
}

/// Generates one validated series per spec. Every series shares the
/// same consecutive-day calendar; draws are ordered stock by stock, so
/// a universe is reproducible from `(specs, cfg)` alone.
pub fn make_synthetic_market(specs: &[StockSpec], cfg: &SynthConfig) -> Result<Vec<OhlcvSeries>> {
    validate(specs, cfg)?;
    let mut stream = substream(cfg.seed, "market");
    let mut universe = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut rows = Vec::with_capacity(cfg.periods);
        let mut date = cfg.start;
        let mut close = spec.initial;
        for t in 0..cfg.periods {
            let open = close;
            if t > 0 {
                close = close * (1.0 + spec.drift) * math::exp(spec.vol * normal(&mut stream));
            }
            let high = open.max(close) * (1.0 + 0.5 * spec.vol * stream.gen::<f64>());
            let low = open.min(close) / (1.0 + 0.5 * spec.vol * stream.gen::<f64>());
            let volume = draw_volume(&mut stream);
            rows.push(OhlcvRow { date, open, high, low, close, volume });
            date = date.succ();
        }
        universe.push(OhlcvSeries::new(&spec.symbol, rows)?);
    }
    Ok(universe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::parse_ohlcv;

    fn day_one() -> Date {
        Date::new(2015, 1, 5).unwrap()
    }

    fn spec(symbol: &str, drift: f64, vol: f64) -> StockSpec {
        StockSpec { symbol: symbol.into(), initial: 100.0, drift, vol }
    }

    fn config(periods: usize, seed: u64) -> SynthConfig {
        SynthConfig { periods, start: day_one(), seed }
    }

    #[test]
    fn degenerate_walk_freezes_the_price() {
        let series = make_synthetic_market(&[spec("FLAT", 0.0, 0.0)], &config(10, 1)).unwrap();
        for row in &series[0].rows {
            assert_eq!(row.open.to_bits(), 100.0f64.to_bits());
            assert_eq!(row.high.to_bits(), 100.0f64.to_bits());
            assert_eq!(row.low.to_bits(), 100.0f64.to_bits());
            assert_eq!(row.close.to_bits(), 100.0f64.to_bits());
        }
    }

    #[test]
    fn pure_drift_compounds_exactly() {
        let series = make_synthetic_market(&[spec("UP", 0.01, 0.0)], &config(50, 1)).unwrap();
        let rows = &series[0].rows;
        let mut expected = 100.0f64;
        for (t, row) in rows.iter().enumerate() {
            assert_eq!(row.close.to_bits(), expected.to_bits(), "record {t}");
            assert!((row.close - 100.0 * 1.01f64.powi(t as i32)).abs() / row.close < 1e-12);
            expected *= 1.01;
        }
        for t in 1..rows.len() {
            assert_eq!(rows[t].open.to_bits(), rows[t - 1].close.to_bits());
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let specs = [spec("A", 0.002, 0.02), spec("B", -0.001, 0.05)];
        let once = make_synthetic_market(&specs, &config(40, 9)).unwrap();
        let again = make_synthetic_market(&specs, &config(40, 9)).unwrap();
        assert_eq!(once, again);
        let reseeded = make_synthetic_market(&specs, &config(40, 10)).unwrap();
        assert_ne!(once, reseeded);
    }

    #[test]
    fn calendars_are_shared_and_consecutive() {
        let specs = [spec("A", 0.0, 0.01), spec("B", 0.0, 0.01)];
        let universe = make_synthetic_market(&specs, &config(15, 3)).unwrap();
        let mut date = day_one();
        for t in 0..15 {
            assert_eq!(universe[0].rows[t].date, date);
            assert_eq!(universe[1].rows[t].date, date);
            date = date.succ();
        }
    }

    #[test]
    fn drift_separates_final_prices_through_the_noise() {
        let specs = [spec("GROW", 0.01, 0.005), spec("IDLE", 0.0, 0.003)];
        let universe = make_synthetic_market(&specs, &config(300, 5)).unwrap();
        let last = |s: &OhlcvSeries| s.rows.last().unwrap().close;
        assert!(last(&universe[0]) > 2.0 * last(&universe[1]));
    }

    #[test]
    fn volume_is_positive_and_varies() {
        let universe = make_synthetic_market(&[spec("A", 0.0, 0.0)], &config(20, 7)).unwrap();
        let volumes: Vec<f64> = universe[0].rows.iter().map(|r| r.volume).collect();
        assert!(volumes.iter().all(|v| *v > 0.0));
        assert!(volumes.iter().any(|v| *v != volumes[0]));
    }

    #[test]
    fn generated_series_round_trip_through_the_parser() {
        let specs = [spec("A", 0.004, 0.03)];
        let universe = make_synthetic_market(&specs, &config(25, 11)).unwrap();
        let text = universe[0].to_csv();
        let back = parse_ohlcv(&text, "A").unwrap();
        assert_eq!(universe[0], back);
    }

    #[test]
    fn bad_parameters_are_named() {
        let ok = [spec("A", 0.0, 0.01)];
        assert!(make_synthetic_market(&[], &config(10, 1)).is_err());
        assert!(make_synthetic_market(&ok, &config(1, 1)).is_err());
        assert!(make_synthetic_market(&[spec("A", 0.0, -0.1)], &config(10, 1)).is_err());
        assert!(make_synthetic_market(&[spec("A", -1.0, 0.1)], &config(10, 1)).is_err());
        let zero_price = [StockSpec { symbol: "A".into(), initial: 0.0, drift: 0.0, vol: 0.0 }];
        assert!(make_synthetic_market(&zero_price, &config(10, 1)).is_err());
        let twins = [spec("A", 0.0, 0.0), spec("A", 0.01, 0.0)];
        assert!(matches!(
            make_synthetic_market(&twins, &config(10, 1)),
            Err(Error::Validation(_))
        ));
    }
}
