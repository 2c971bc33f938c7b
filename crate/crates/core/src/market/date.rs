//! Minimal calendar date: parse, order, format, successor.

use crate::error::{Error, Result};
use alloc::format;
use core::fmt;

/// A proleptic Gregorian calendar day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Date {
    pub year: i32,
    pub month: u8,
    pub day: u8,
}

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

fn days_in_month(year: i32, month: u8) -> u8 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 => {
            if is_leap(year) {
                29
            } else {
                28
            }
        }
        _ => 0,
    }
}

impl Date {
    pub fn new(year: i32, month: u8, day: u8) -> Result<Self> {
        if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
            return Err(Error::Validation(format!(
                "invalid calendar day {year:04}-{month:02}-{day:02}"
            )));
        }
        Ok(Date { year, month, day })
    }

    /// Parses the fixed `YYYY-MM-DD` layout.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("date '{s}' is not YYYY-MM-DD"));
        let bytes = s.as_bytes();
        if bytes.len() != 10 || bytes[4] != b'-' || bytes[7] != b'-' {
            return Err(bad());
        }
        let year: i32 = s[0..4].parse().map_err(|_| bad())?;
        let month: u8 = s[5..7].parse().map_err(|_| bad())?;
        let day: u8 = s[8..10].parse().map_err(|_| bad())?;
        Date::new(year, month, day)
    }

    /// The next calendar day.
    pub fn succ(self) -> Date {
        if self.day < days_in_month(self.year, self.month) {
            Date { day: self.day + 1, ..self }
        } else if self.month < 12 {
            Date { year: self.year, month: self.month + 1, day: 1 }
        } else {
            Date { year: self.year + 1, month: 1, day: 1 }
        }
    }
}

impl fmt::Display for Date {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display_round_trip() {
        let d = Date::parse("2019-02-28").unwrap();
        assert_eq!(d.to_string(), "2019-02-28");
    }

    #[test]
    fn rejects_malformed_and_impossible_dates() {
        assert!(Date::parse("2019/01/01").is_err());
        assert!(Date::parse("2019-13-01").is_err());
        assert!(Date::parse("2019-02-29").is_err());
        assert!(Date::parse("19-02-02").is_err());
    }

    #[test]
    fn successor_handles_leap_and_year_ends() {
        assert_eq!(Date::parse("2020-02-28").unwrap().succ().to_string(), "2020-02-29");
        assert_eq!(Date::parse("2021-02-28").unwrap().succ().to_string(), "2021-03-01");
        assert_eq!(Date::parse("2020-12-31").unwrap().succ().to_string(), "2021-01-01");
    }

    #[test]
    fn ordering_is_chronological() {
        let a = Date::parse("2019-12-31").unwrap();
        let b = Date::parse("2020-01-01").unwrap();
        assert!(a < b);
    }
}
