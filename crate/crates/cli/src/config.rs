//! Run configuration: a flat key-value file merged with command-line overrides.

use std::path::PathBuf;

use chrono::{Datelike, NaiveDate};
use gas_storage::calendar::{ExpiryRule, Month};
use gas_storage::hedging::DeltaKind;
use gas_storage::params_io::KeyValues;
use gas_storage::pipeline::Seeds;
use gas_storage::spot::SpotModel;
use gas_storage::storage::{StorageSpec, DEFAULT_NODE_CAP};
use gas_storage::{Error, Result};

pub const MIN_PATHS: usize = 100;
pub const DEFAULT_PATHS: usize = 5000;

/// Every key the configuration understands.
pub const KNOWN_KEYS: &[&str] = &[
    "spot_csv",
    "curve_csv",
    "futures_params",
    "spot_params",
    "preset",
    "v_min",
    "v_max",
    "a_inj",
    "a_with",
    "v_start",
    "v_end",
    "cost_inj",
    "cost_with",
    "start",
    "end",
    "model",
    "n_paths",
    "seed_backward",
    "seed_forward",
    "seed_risk",
    "delta",
    "node_cap",
    "expiry_offset_days",
    "years",
    "family_size",
    "epsilon",
    "ks_level",
    "curve_level",
    "curve_amplitude",
    "s0",
    "history_start",
    "history_end",
    "spike_k",
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Canonical merged key-values; hashed into the manifest.
    pub kv: KeyValues,
    pub spot_csv: Option<PathBuf>,
    pub curve_csv: Option<PathBuf>,
    pub futures_params: Option<PathBuf>,
    pub spot_params: Option<PathBuf>,
    pub spec: StorageSpec<f64>,
    pub model: SpotModel,
    pub n_paths: usize,
    pub seeds: Seeds,
    pub seed_risk: u64,
    pub delta: DeltaKind,
    pub node_cap: usize,
    pub rule: ExpiryRule,
    pub years: Vec<i32>,
    pub family_size: usize,
    pub epsilon: f64,
    pub ks_level: f64,
    /// Synthetic curve used when no market data is supplied.
    pub curve_level: f64,
    pub curve_amplitude: f64,
    pub s0: Option<f64>,
    /// Span of a generated synthetic history.
    pub history_start: NaiveDate,
    pub history_end: NaiveDate,
    pub spike_k: Option<f64>,
}

fn date(kv: &KeyValues, key: &str) -> Result<Option<NaiveDate>> {
    kv.get(key)
        .map(|s| {
            s.parse::<NaiveDate>()
                .map_err(|e| Error::Config(format!("{key} = {s:?}: {e}")))
        })
        .transpose()
}

fn or<V: std::str::FromStr>(kv: &KeyValues, key: &str, default: V) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    Ok(kv.parsed(key)?.unwrap_or(default))
}

impl RunConfig {
    pub fn from_kv(kv: KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown configuration key {k:?}")));
        }
        let path = |k: &str| kv.get(k).map(PathBuf::from);
        let start = date(&kv, "start")?.unwrap_or_else(|| NaiveDate::from_ymd_opt(2007, 4, 1).expect("valid date"));
        let preset = kv.get("preset").unwrap_or("fast");
        let mut spec = StorageSpec::<f64>::named(preset, start)?;
        for (key, slot) in [
            ("v_min", &mut spec.v_min),
            ("v_max", &mut spec.v_max),
            ("a_inj", &mut spec.a_inj),
            ("a_with", &mut spec.a_with),
            ("v_start", &mut spec.v_start),
            ("v_end", &mut spec.v_end),
            ("cost_inj", &mut spec.cost_inj),
            ("cost_with", &mut spec.cost_with),
        ] {
            if let Some(v) = kv.parsed::<f64>(key)? {
                *slot = v;
            }
        }
        if let Some(end) = date(&kv, "end")? {
            spec.end_date = end;
        }
        spec.validate()?;
        let model = SpotModel::from_id(or(&kv, "model", 2u8)?)?;
        let n_paths = or(&kv, "n_paths", DEFAULT_PATHS)?;
        if n_paths < MIN_PATHS {
            return Err(Error::Config(format!("n_paths = {n_paths} is below the minimum of {MIN_PATHS}")));
        }
        let seeds = Seeds::new(or(&kv, "seed_backward", 1u64)?, or(&kv, "seed_forward", 2u64)?)?;
        let seed_risk = or(&kv, "seed_risk", 3u64)?;
        let delta = DeltaKind::parse(kv.get("delta").unwrap_or("delta2"))?;
        let node_cap = or(&kv, "node_cap", DEFAULT_NODE_CAP)?;
        if node_cap < 2 {
            return Err(Error::Config("node_cap must be at least 2".into()));
        }
        let rule = ExpiryRule {
            offset_days: or(&kv, "expiry_offset_days", 0i64)?,
        };
        let years = match kv.get("years") {
            Some(s) => s
                .split([',', ' '])
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<i32>().map_err(|e| Error::Config(format!("years: {t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let family_size = or(&kv, "family_size", 30usize)?;
        if family_size == 0 {
            return Err(Error::Config("family_size must be positive".into()));
        }
        let epsilon = or(&kv, "epsilon", 0.05)?;
        let ks_level = or(&kv, "ks_level", 0.05)?;
        let history_start = date(&kv, "history_start")?.unwrap_or_else(|| {
            NaiveDate::from_ymd_opt(start.year() - 1, 1, 1).expect("valid date")
        });
        let history_end = date(&kv, "history_end")?.unwrap_or(spec.end_date);
        if history_end <= history_start {
            return Err(Error::Config("history_end must be after history_start".into()));
        }
        let spike_k = match kv.get("spike_k") {
            Some("none") => None,
            _ => Some(or(&kv, "spike_k", 3.0)?),
        };
        Ok(Self {
            spot_csv: path("spot_csv"),
            curve_csv: path("curve_csv"),
            futures_params: path("futures_params"),
            spot_params: path("spot_params"),
            spec,
            model,
            n_paths,
            seeds,
            seed_risk,
            delta,
            node_cap,
            rule,
            years,
            family_size,
            epsilon,
            ks_level,
            curve_level: or(&kv, "curve_level", 7.5)?,
            curve_amplitude: or(&kv, "curve_amplitude", 1.2)?,
            s0: kv.parsed("s0")?,
            history_start,
            history_end,
            spike_k,
            kv,
        })
    }

    /// Synthetic seasonal curve whose first maturity is the month of `from`.
    pub fn synthetic_curve(&self, from: NaiveDate, months: u32) -> Vec<(Month, f64)> {
        gas_storage::pipeline::seasonal_curve(self.curve_level, self.curve_amplitude, Month::of(from), months)
    }

    /// The same configuration with the lease moved to `start`, keeping its length.
    pub fn with_start(&self, start: NaiveDate) -> Self {
        let mut c = self.clone();
        let months = Month::of(self.spec.end_date).year() * 12 + Month::of(self.spec.end_date).month() as i32
            - (Month::of(self.spec.start_date).year() * 12 + Month::of(self.spec.start_date).month() as i32);
        c.spec.start_date = start;
        c.spec.end_date = start + chrono::Months::new(months.max(1) as u32);
        c
    }
}
