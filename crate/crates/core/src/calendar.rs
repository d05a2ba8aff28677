//! Calendar helpers: delivery months, expiry dates, year fractions and the
//! daily contract grid.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DAYS_PER_YEAR: f64 = 365.0;

/// A futures delivery month, used as the maturity identifier of a contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    year: i32,
    month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::domain(format!("month {month} out of range")));
        }
        Ok(Self { year, month })
    }

    pub fn of(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn year(self) -> i32 {
        self.year
    }

    /// Calendar month, 1-based.
    pub fn month(self) -> u32 {
        self.month
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid month")
    }

    pub fn succ(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    pub fn add_months(self, n: u32) -> Self {
        (0..n).fold(self, |m, _| m.succ())
    }

    pub fn days(self) -> i64 {
        (self.succ().first_day() - self.first_day()).num_days()
    }

    /// Inclusive range of months between two endpoints.
    pub fn range(from: Month, to: Month) -> Vec<Month> {
        let mut out = Vec::new();
        let mut m = from;
        while m <= to {
            out.push(m);
            m = m.succ();
        }
        out
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::domain(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.trim().split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        Month::new(year, month)
    }
}

/// Last trading date of a contract, as an offset in days from the first day
/// of its delivery month. The default offset 0 expires a contract on the
/// first calendar day of delivery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExpiryRule {
    pub offset_days: i64,
}

impl ExpiryRule {
    pub fn expiry(&self, m: Month) -> NaiveDate {
        m.first_day() + Duration::days(self.offset_days)
    }

    /// A contract is live on `date` while `date < expiry`; the prompt rolls on
    /// the expiry date itself.
    pub fn is_live(&self, m: Month, date: NaiveDate) -> bool {
        date < self.expiry(m)
    }
}

/// Calendar-phase year fraction: `year + (day of year - 1) / days in year`.
pub fn year_fraction<T: Real>(date: NaiveDate) -> T {
    let days_in_year = if NaiveDate::from_ymd_opt(date.year(), 2, 29).is_some() {
        366.0
    } else {
        365.0
    };
    T::lit(date.year() as f64 + date.ordinal0() as f64 / days_in_year)
}

/// Elapsed time between two dates in years of [`DAYS_PER_YEAR`] days.
pub fn years_between<T: Real>(from: NaiveDate, to: NaiveDate) -> T {
    T::lit((to - from).num_days() as f64 / DAYS_PER_YEAR)
}

/// Evenly spaced calendar grid `t_0 < t_1 < ... < t_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    dates: Vec<NaiveDate>,
    times: Vec<T>,
    dt_days: u32,
}

impl<T: Real> TimeGrid<T> {
    /// Grid from `start` stepping `dt_days` while not past `end`.
    pub fn daily(start: NaiveDate, end: NaiveDate, dt_days: u32) -> Result<Self> {
        if dt_days == 0 {
            return Err(Error::domain("grid step must be positive"));
        }
        if end <= start {
            return Err(Error::domain(format!("grid end {end} not after start {start}")));
        }
        let mut dates = Vec::new();
        let mut d = start;
        while d <= end {
            dates.push(d);
            d += Duration::days(dt_days as i64);
        }
        let times = dates.iter().map(|&d| year_fraction(d)).collect();
        Ok(Self {
            dates,
            times,
            dt_days,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    /// Year-fraction coordinate of every grid date.
    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Number of decision steps, one fewer than the number of grid dates.
    pub fn steps(&self) -> usize {
        self.dates.len().saturating_sub(1)
    }

    pub fn dt_days(&self) -> u32 {
        self.dt_days
    }

    /// Step length in years.
    pub fn dt_years(&self) -> T {
        T::lit(self.dt_days as f64 / DAYS_PER_YEAR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn month_parse_and_display() {
        let m: Month = "2007-04".parse().unwrap();
        assert_eq!(m, Month::new(2007, 4).unwrap());
        assert_eq!(m.to_string(), "2007-04");
        assert!("2007-4".parse::<Month>().is_err());
        assert!("2007-13".parse::<Month>().is_err());
        assert_eq!(Month::new(2007, 12).unwrap().succ(), Month::new(2008, 1).unwrap());
        assert_eq!(Month::new(2008, 2).unwrap().days(), 29);
    }

    #[test]
    fn roll_on_expiry_date() {
        let rule = ExpiryRule::default();
        let apr = Month::new(2007, 4).unwrap();
        assert!(rule.is_live(apr, d(2007, 3, 31)));
        assert!(!rule.is_live(apr, d(2007, 4, 1)));
        let nymex_like = ExpiryRule { offset_days: -3 };
        assert!(!nymex_like.is_live(apr, d(2007, 3, 29)));
    }

    #[test]
    fn grid_spans_lease() {
        let g = TimeGrid::<f64>::daily(d(2007, 4, 1), d(2008, 4, 1), 1).unwrap();
        assert_eq!(g.len(), 367);
        assert_eq!(g.steps(), 366);
        let t0 = g.times()[0];
        assert!((t0 - (2007.0 + 90.0 / 365.0)).abs() < 1e-12);
        assert!(TimeGrid::<f64>::daily(d(2007, 4, 1), d(2007, 4, 1), 1).is_err());
    }
}
