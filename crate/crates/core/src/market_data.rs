//! Historical spot and futures-curve data: CSV ingestion, rolling
//! prompt/back series and spike detection on the spot-prompt spread.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{Datelike, NaiveDate};

use crate::calendar::{ExpiryRule, Month};
use crate::error::{Error, Result};
use crate::scalar::{mean, sample_std, Real};

/// CSV layouts accepted by the loaders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsvSchema {
    /// `date,price`
    Spot,
    /// `date,maturity_month,price`
    Curve,
}

impl CsvSchema {
    pub fn header(self) -> &'static [&'static str] {
        match self {
            CsvSchema::Spot => &["date", "price"],
            CsvSchema::Curve => &["date", "maturity_month", "price"],
        }
    }
}

/// Futures curve observed on one date, sorted by maturity.
pub type Curve<T> = Vec<(Month, T)>;

/// Daily spot prices together with the futures curve observed on each date.
/// Prices are in USD/MMBtu.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceHistory<T> {
    dates: Vec<NaiveDate>,
    spot: Vec<T>,
    curves: Vec<Curve<T>>,
}

impl<T: Real> PriceHistory<T> {
    pub fn new(dates: Vec<NaiveDate>, spot: Vec<T>, curves: Vec<Curve<T>>) -> Result<Self> {
        if dates.len() != spot.len() || dates.len() != curves.len() {
            return Err(Error::domain("dates, spot and curves differ in length"));
        }
        for (i, w) in dates.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Ordering {
                    path: PathBuf::new(),
                    line: i as u64 + 2,
                    date: w[1],
                });
            }
        }
        for ((&d, &s), curve) in dates.iter().zip(&spot).zip(&curves) {
            if !(s > T::zero()) {
                return Err(Error::domain(format!("non-positive spot {s} on {d}")));
            }
            if curve.len() < 2 {
                return Err(Error::InsufficientCurve {
                    date: d,
                    message: format!("{} maturities, need at least 2", curve.len()),
                });
            }
            if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::domain(format!("curve on {d} not sorted by maturity")));
            }
            if curve[0].0 < Month::of(d) {
                return Err(Error::domain(format!(
                    "curve on {d} lists maturity {} before the observation month",
                    curve[0].0
                )));
            }
            if let Some((m, p)) = curve.iter().find(|(_, p)| !(*p > T::zero())) {
                return Err(Error::domain(format!("non-positive futures price {p} for {m} on {d}")));
            }
        }
        Ok(Self {
            dates,
            spot,
            curves,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn spot(&self) -> &[T] {
        &self.spot
    }

    pub fn curves(&self) -> &[Curve<T>] {
        &self.curves
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    pub fn price(&self, index: usize, maturity: Month) -> Option<T> {
        let curve = &self.curves[index];
        curve
            .binary_search_by(|(m, _)| m.cmp(&maturity))
            .ok()
            .map(|i| curve[i].1)
    }

    /// Sub-history restricted to `[from, to]`.
    pub fn between(&self, from: NaiveDate, to: NaiveDate) -> Self {
        let lo = self.dates.partition_point(|&d| d < from);
        let hi = self.dates.partition_point(|&d| d <= to);
        Self {
            dates: self.dates[lo..hi].to_vec(),
            spot: self.spot[lo..hi].to_vec(),
            curves: self.curves[lo..hi].to_vec(),
        }
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, schema: CsvSchema, path: &Path) -> Result<()> {
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let got: Vec<&str> = header.iter().collect();
    if got.is_empty() || (got.len() == 1 && got[0].is_empty()) {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    if got != schema.header() {
        return Err(parse_err(
            path,
            1,
            format!("expected header {:?}, got {:?}", schema.header().join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_date(s: &str, path: &Path, line: u64) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| parse_err(path, line, format!("bad date {s:?}: {e}")))
}

fn parse_price<T: Real>(s: &str, path: &Path, line: u64) -> Result<T> {
    let v: f64 = s
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad price {s:?}")))?;
    if !v.is_finite() || v <= 0.0 {
        return Err(parse_err(path, line, format!("price must be positive, got {s}")));
    }
    Ok(T::lit(v))
}

/// Reads a `spot` schema table. Dates must be strictly increasing.
pub fn read_spot_csv<T: Real, R: Read>(reader: R, path: &Path) -> Result<Vec<(NaiveDate, T)>> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, CsvSchema::Spot, path)?;
    let mut out: Vec<(NaiveDate, T)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_err(path, line, format!("expected 2 fields, got {}", rec.len())));
        }
        let date = parse_date(&rec[0], path, line)?;
        let price = parse_price(&rec[1], path, line)?;
        if let Some(&(prev, _)) = out.last() {
            if date <= prev {
                return Err(Error::Ordering {
                    path: path.to_path_buf(),
                    line,
                    date,
                });
            }
        }
        out.push((date, price));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    Ok(out)
}

/// Reads a `curve` schema table. Rows of one date must be contiguous and
/// dates non-decreasing; maturities may appear in any order within a date.
pub fn read_curve_csv<T: Real, R: Read>(reader: R, path: &Path) -> Result<Vec<(NaiveDate, Curve<T>)>> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, CsvSchema::Curve, path)?;
    let mut out: Vec<(NaiveDate, Curve<T>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let date = parse_date(&rec[0], path, line)?;
        let maturity: Month = rec[1]
            .parse()
            .map_err(|e: Error| parse_err(path, line, e.to_string()))?;
        let price = parse_price(&rec[2], path, line)?;
        match out.last_mut() {
            Some((d, curve)) if *d == date => {
                if curve.iter().any(|(m, _)| *m == maturity) {
                    return Err(parse_err(path, line, format!("duplicate maturity {maturity} on {date}")));
                }
                curve.push((maturity, price));
            }
            Some((d, _)) if *d > date => {
                return Err(Error::Ordering {
                    path: path.to_path_buf(),
                    line,
                    date,
                })
            }
            _ => {
                if out.iter().any(|(d, _)| *d == date) {
                    return Err(Error::Ordering {
                        path: path.to_path_buf(),
                        line,
                        date,
                    });
                }
                out.push((date, vec![(maturity, price)]));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.to_path_buf()));
    }
    for (_, curve) in &mut out {
        curve.sort_by_key(|(m, _)| *m);
    }
    Ok(out)
}

/// Loads a spot table and a curve table and joins them on date. Dates present
/// in only one of the files are dropped.
pub fn load_price_history<T: Real>(spot_path: &Path, curve_path: &Path) -> Result<PriceHistory<T>> {
    let spot_file = File::open(spot_path).map_err(|e| Error::io(spot_path, e))?;
    let spot = read_spot_csv::<T, _>(spot_file, spot_path)?;
    let curve_file = File::open(curve_path).map_err(|e| Error::io(curve_path, e))?;
    let curves = read_curve_csv::<T, _>(curve_file, curve_path)?;
    join_history(spot, curves)
}

pub fn join_history<T: Real>(
    spot: Vec<(NaiveDate, T)>,
    curves: Vec<(NaiveDate, Curve<T>)>,
) -> Result<PriceHistory<T>> {
    let (mut dates, mut s, mut c) = (Vec::new(), Vec::new(), Vec::new());
    let mut j = 0;
    let mut dropped = 0usize;
    for (d, price) in spot {
        while j < curves.len() && curves[j].0 < d {
            j += 1;
            dropped += 1;
        }
        if j < curves.len() && curves[j].0 == d {
            dates.push(d);
            s.push(price);
            c.push(curves[j].1.clone());
            j += 1;
        } else {
            dropped += 1;
        }
    }
    dropped += curves.len() - j;
    if dropped > 0 {
        log::warn!("{dropped} dates present in only one of the spot/curve files were dropped");
    }
    if dates.is_empty() {
        return Err(Error::EmptyInput(PathBuf::from("<joined history>")));
    }
    PriceHistory::new(dates, s, c)
}

pub fn write_spot_csv<T: Real, W: Write>(mut w: W, h: &PriceHistory<T>) -> std::io::Result<()> {
    writeln!(w, "date,price")?;
    for (d, s) in h.dates.iter().zip(&h.spot) {
        writeln!(w, "{d},{}", s.f64())?;
    }
    Ok(())
}

pub fn write_curve_csv<T: Real, W: Write>(mut w: W, h: &PriceHistory<T>) -> std::io::Result<()> {
    writeln!(w, "date,maturity_month,price")?;
    for (d, curve) in h.dates.iter().zip(&h.curves) {
        for (m, p) in curve {
            writeln!(w, "{d},{m},{}", p.f64())?;
        }
    }
    Ok(())
}

/// Prompt (`P_t`), back (`B_t`) and spot-prompt spread `x_t = (S_t - P_t) / P_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingSeries<T> {
    pub dates: Vec<NaiveDate>,
    pub prompt: Vec<T>,
    pub back: Vec<T>,
    pub spread: Vec<T>,
    pub prompt_maturity: Vec<Month>,
}

/// The prompt on date `t` is the earliest contract still trading, i.e. with
/// `t < expiry`; the back is the next one listed.
pub fn rolling_series<T: Real>(h: &PriceHistory<T>, rule: ExpiryRule) -> Result<RollingSeries<T>> {
    let n = h.len();
    let mut out = RollingSeries {
        dates: h.dates.clone(),
        prompt: Vec::with_capacity(n),
        back: Vec::with_capacity(n),
        spread: Vec::with_capacity(n),
        prompt_maturity: Vec::with_capacity(n),
    };
    for ((&d, &s), curve) in h.dates.iter().zip(&h.spot).zip(&h.curves) {
        let mut live = curve.iter().filter(|(m, _)| rule.is_live(*m, d));
        let (pm, p) = *live.next().ok_or_else(|| Error::InsufficientCurve {
            date: d,
            message: "no live contract".into(),
        })?;
        let (_, b) = *live.next().ok_or_else(|| Error::InsufficientCurve {
            date: d,
            message: format!("no live contract after prompt {pm}"),
        })?;
        out.prompt.push(p);
        out.back.push(b);
        out.spread.push((s - p) / p);
        out.prompt_maturity.push(pm);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpikeSign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeEvent<T> {
    pub date: NaiveDate,
    /// Deviation of the spread from its sample mean; its sign is the spike sign.
    pub relative_size: T,
    /// Raw spread value `x_t` on the spike date.
    pub spread: T,
    pub sign: SpikeSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeReport<T> {
    pub events: Vec<SpikeEvent<T>>,
    /// Counts per calendar month (index 0 = January) as `[positive, negative]`.
    pub monthly: [[usize; 2]; 12],
    pub mean: T,
    pub std: T,
}

impl<T: Real> SpikeReport<T> {
    pub fn is_spike(&self, date: NaiveDate) -> bool {
        self.events.iter().any(|e| e.date == date)
    }
}

pub const MIN_SPIKE_SAMPLE: usize = 30;

/// Flags `t` as a spike when `|x_t - mean(x)| > k * std(x)` (sample std).
pub fn detect_spikes<T: Real>(dates: &[NaiveDate], series: &[T], k: T) -> Result<SpikeReport<T>> {
    if series.len() < MIN_SPIKE_SAMPLE {
        return Err(Error::InsufficientData {
            needed: MIN_SPIKE_SAMPLE,
            got: series.len(),
        });
    }
    if dates.len() != series.len() {
        return Err(Error::domain("dates and series differ in length"));
    }
    if !(k > T::zero()) {
        return Err(Error::domain("spike threshold must be positive"));
    }
    let m = mean(series);
    let sd = sample_std(series);
    let mut events = Vec::new();
    let mut monthly = [[0usize; 2]; 12];
    for (&date, &x) in dates.iter().zip(series) {
        let dev = x - m;
        if dev.abs() > k * sd {
            let sign = if dev > T::zero() {
                SpikeSign::Positive
            } else {
                SpikeSign::Negative
            };
            monthly[date.month0() as usize][(sign == SpikeSign::Negative) as usize] += 1;
            events.push(SpikeEvent {
                date,
                relative_size: dev,
                spread: x,
                sign,
            });
        }
    }
    Ok(SpikeReport {
        events,
        monthly,
        mean: m,
        std: sd,
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use chrono::Duration;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn spread_reconstructs_spot(spot in 0.5f64..50.0, prompt in 0.5f64..50.0, back in 0.5f64..50.0) {
            let d0 = NaiveDate::from_ymd_opt(2010, 1, 5).unwrap();
            let h = PriceHistory::new(
                vec![d0],
                vec![spot],
                vec![vec![(Month::new(2010, 2).unwrap(), prompt), (Month::new(2010, 3).unwrap(), back)]],
            ).unwrap();
            let r = rolling_series(&h, ExpiryRule::default()).unwrap();
            let rebuilt = r.spread[0] * r.prompt[0] + r.prompt[0];
            prop_assert!((rebuilt - spot).abs() <= 4.0 * f64::EPSILON * spot.max(prompt));
        }

        #[test]
        fn spikes_scale_free_and_counted(
            spots in proptest::collection::vec(1.0f64..20.0, 40..120),
            scale in 0.1f64..100.0,
        ) {
            let n = spots.len();
            let d0 = NaiveDate::from_ymd_opt(2005, 1, 1).unwrap();
            let ds: Vec<NaiveDate> = (0..n).map(|i| d0 + Duration::days(i as i64)).collect();
            let prompt = 7.0;
            let x: Vec<f64> = spots.iter().map(|s| (s - prompt) / prompt).collect();
            let xs: Vec<f64> = spots.iter().map(|s| (s * scale - prompt * scale) / (prompt * scale)).collect();
            let a = detect_spikes(&ds, &x, 2.0).unwrap();
            let b = detect_spikes(&ds, &xs, 2.0).unwrap();
            let da: Vec<_> = a.events.iter().map(|e| (e.date, e.sign)).collect();
            let db: Vec<_> = b.events.iter().map(|e| (e.date, e.sign)).collect();
            prop_assert_eq!(da, db);
            let total: usize = a.monthly.iter().map(|m| m[0] + m[1]).sum();
            prop_assert_eq!(total, a.events.len());
        }
    }
}
