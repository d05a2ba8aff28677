//! Subcommand implementations. Each writes its reports and a manifest.

use std::fmt::Write as _;
use std::path::PathBuf;

use chrono::{Datelike, NaiveDate};
use serde_json::{json, Value};

use gas_storage::calendar::Month;
use gas_storage::f64::{Experiment, GabillonParams, PriceHistory, SpotParams};
use gas_storage::futures::{calibrate_mle, MleConfig};
use gas_storage::intrinsic::{intrinsic_value, rolling_intrinsic, window_curve, Binding};
use gas_storage::linalg::Matrix;
use gas_storage::market_data::{detect_spikes, load_price_history, rolling_series, write_curve_csv, write_spot_csv};
use gas_storage::model_risk::{generate_family, risk_pi1, risk_pi2, FamilyConfig};
use gas_storage::params_io::{futures_from_kv, futures_to_kv, spot_from_kv, spot_to_kv, KeyValues};
use gas_storage::pipeline::{run_historical, synthetic_history};
use gas_storage::spot::{estimate_spot, spot_dataset, SpotEstimation, SpotModel, SPOT_THETA_NAMES};
use gas_storage::valuation::ValuationConfig;
use gas_storage::{Error, Result};

use crate::config::{RunConfig, MIN_PATHS};
use crate::output::{num, OutputDir};

/// Months of synthetic curve generated beyond the span that needs it.
const CURVE_MARGIN_MONTHS: u32 = 16;

pub struct Context {
    pub cfg: RunConfig,
    pub out: OutputDir,
    inputs: Vec<(String, PathBuf)>,
}

impl Context {
    pub fn new(cfg: RunConfig, out: OutputDir) -> Self {
        Self {
            cfg,
            out,
            inputs: Vec::new(),
        }
    }

    fn input(&mut self, key: &str, p: &PathBuf) {
        self.inputs.push((key.to_string(), p.clone()));
    }

    pub fn finish(self, command: &str) -> Result<()> {
        let s = self.cfg.seeds;
        let seeds = json!({ "backward": s.backward, "forward": s.forward, "risk": self.cfg.seed_risk });
        let text = self.cfg.kv.to_text();
        self.out.finish(command, &text, seeds, &self.inputs)
    }

    fn history(&mut self) -> Result<Option<PriceHistory>> {
        match (self.cfg.spot_csv.clone(), self.cfg.curve_csv.clone()) {
            (Some(s), Some(c)) => {
                self.input("spot_csv", &s);
                self.input("curve_csv", &c);
                Ok(Some(load_price_history(&s, &c)?))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Config("spot_csv and curve_csv must be given together".into())),
        }
    }

    fn require_history(&mut self, what: &str) -> Result<PriceHistory> {
        self.history()?
            .ok_or_else(|| Error::Config(format!("{what} needs market data (spot_csv and curve_csv)")))
    }

    fn futures_params(&mut self, h: Option<&PriceHistory>) -> Result<(GabillonParams, Option<Matrix<f64>>)> {
        if let Some(p) = self.cfg.futures_params.clone() {
            self.input("futures_params", &p);
            return futures_from_kv(&KeyValues::load(&p)?);
        }
        match h {
            Some(h) => {
                log::info!("no futures parameter file, calibrating on the supplied history");
                let fit = calibrate_mle(h, &GabillonParams::reference(), &self.mle_config())?;
                Ok((fit.params, Some(fit.covariance)))
            }
            None => Ok((GabillonParams::reference(), None)),
        }
    }

    fn spot_params(&mut self, h: Option<&PriceHistory>) -> Result<(SpotParams, Option<Matrix<f64>>)> {
        if let Some(p) = self.cfg.spot_params.clone() {
            self.input("spot_params", &p);
            let (sp, cov) = spot_from_kv(&KeyValues::load(&p)?)?;
            if sp.model != self.cfg.model {
                log::warn!("spot parameter file is for model {}, config asks for model {}", sp.model.id(), self.cfg.model.id());
            }
            return Ok((sp, cov));
        }
        match h {
            Some(h) => {
                log::info!("no spot parameter file, estimating on the supplied history");
                let fit = estimate_spot(h, self.cfg.model, &self.spot_estimation())?;
                Ok((fit.params, Some(fit.covariance)))
            }
            None => Ok((default_spot(self.cfg.model), None)),
        }
    }

    fn mle_config(&self) -> MleConfig<f64> {
        MleConfig {
            rule: self.cfg.rule,
            ..MleConfig::default()
        }
    }

    fn spot_estimation(&self) -> SpotEstimation<f64> {
        SpotEstimation {
            rule: self.cfg.rule,
            spike_k: self.cfg.spike_k,
            ..SpotEstimation::default()
        }
    }

    /// Curve and spot observed on `date`, from the history if present.
    fn market_on(&self, h: Option<&PriceHistory>, cfg: &RunConfig, date: NaiveDate) -> Result<(Vec<(Month, f64)>, f64)> {
        match h {
            Some(h) => {
                let i = h.index_of(date).ok_or_else(|| Error::Gap {
                    date,
                    message: "lease start date missing from the history".into(),
                })?;
                Ok((h.curves()[i].clone(), h.spot()[i]))
            }
            None => {
                let months = months_between(date, cfg.spec.end_date) + CURVE_MARGIN_MONTHS;
                let curve = cfg.synthetic_curve(date, months);
                let s0 = cfg.s0.unwrap_or_else(|| {
                    curve
                        .iter()
                        .find(|(m, _)| cfg.rule.is_live(*m, date))
                        .map_or(cfg.curve_level, |c| c.1)
                });
                Ok((curve, s0))
            }
        }
    }

    fn experiment(&self, cfg: &RunConfig, futures: GabillonParams, spot: SpotParams, curve: Vec<(Month, f64)>, s0: f64) -> Experiment {
        Experiment {
            spec: cfg.spec.clone(),
            futures,
            initial_curve: curve,
            s0,
            spot,
            rule: cfg.rule,
            n_paths: cfg.n_paths,
            valuation: ValuationConfig {
                node_cap: cfg.node_cap,
                min_paths: MIN_PATHS,
            },
            hedge: cfg.delta,
        }
    }
}

fn default_spot(model: SpotModel) -> SpotParams {
    match model {
        SpotModel::One => SpotParams::reference_model1(),
        SpotModel::Two => SpotParams::default_model2(),
    }
}

fn months_between(a: NaiveDate, b: NaiveDate) -> u32 {
    let (ma, mb) = (Month::of(a), Month::of(b));
    ((mb.year() - ma.year()) * 12 + mb.month() as i32 - ma.month() as i32).max(0) as u32
}

fn named(names: &[&str], vals: &[f64]) -> Value {
    Value::Object(names.iter().zip(vals).map(|(n, v)| (n.to_string(), json!(v))).collect())
}

pub fn calibrate_futures(ctx: &mut Context) -> Result<()> {
    let h = ctx.require_history("calibrate-futures")?;
    let fit = calibrate_mle(&h, &GabillonParams::reference(), &ctx.mle_config())?;
    ctx.out
        .write("futures.params", futures_to_kv(&fit.params, Some(&fit.covariance)).to_text().as_bytes())?;
    let names = gas_storage::futures::THETA_NAMES;
    let theta = gas_storage::futures::theta_of(&fit.params);
    ctx.out.write_json(
        "calibrate_futures.json",
        &json!({
            "estimates": named(&names, &theta),
            "std_errors": named(&names, &fit.std_errors()),
            "objective": fit.objective,
            "residual_var": fit.residual_var,
            "n_obs": fit.n_obs,
            "evaluations": fit.evaluations,
            "at_bounds": fit.at_bounds,
        }),
    )
}

pub fn calibrate_spot(ctx: &mut Context) -> Result<()> {
    let h = ctx.require_history("calibrate-spot")?;
    let fit = estimate_spot(&h, ctx.cfg.model, &ctx.spot_estimation())?;
    ctx.out
        .write("spot.params", spot_to_kv(&fit.params, Some(&fit.covariance)).to_text().as_bytes())?;
    ctx.out.write_json(
        "calibrate_spot.json",
        &json!({
            "model": fit.params.model.id(),
            "estimates": named(&SPOT_THETA_NAMES, &fit.params.theta()),
            "std_errors": named(&SPOT_THETA_NAMES, &fit.std_errors()),
            "loglik": fit.loglik,
            "n_obs": fit.dataset.len(),
            "excised": fit.dataset.excised,
            "spikes": fit.spikes.as_ref().map_or(0, |s| s.events.len()),
            "spike_pos_intensity": fit.params.spike_pos.intensity,
            "spike_neg_intensity": fit.params.spike_neg.intensity,
        }),
    )
}

/// Writes one synthetic daily history as `spot.csv` and `curves.csv`.
pub fn simulate(ctx: &mut Context) -> Result<()> {
    let (futures, _) = ctx.futures_params(None)?;
    let (spot, _) = ctx.spot_params(None)?;
    let cfg = &ctx.cfg;
    let (start, end) = (cfg.history_start, cfg.history_end);
    let curve = cfg.synthetic_curve(start, months_between(start, end) + CURVE_MARGIN_MONTHS);
    let s0 = cfg.s0.unwrap_or(curve[0].1);
    let h = synthetic_history(&futures, &spot, &curve, s0, start, end, cfg.rule, cfg.seeds.forward)?;
    let mut buf = Vec::new();
    write_spot_csv(&mut buf, &h).expect("writing to memory");
    ctx.out.write("spot.csv", &buf)?;
    buf.clear();
    write_curve_csv(&mut buf, &h).expect("writing to memory");
    ctx.out.write("curves.csv", &buf)?;
    ctx.out.write_json(
        "simulate.json",
        &json!({
            "first_date": h.dates()[0].to_string(),
            "last_date": h.dates()[h.len() - 1].to_string(),
            "n_dates": h.len(),
            "seed": cfg.seeds.forward,
            "model": spot.model.id(),
        }),
    )
}

pub fn value(ctx: &mut Context) -> Result<()> {
    let h = ctx.history()?;
    let (futures, _) = ctx.futures_params(h.as_ref())?;
    let (spot, _) = ctx.spot_params(h.as_ref())?;
    let cfg = ctx.cfg.clone();
    let (curve, s0) = ctx.market_on(h.as_ref(), &cfg, cfg.spec.start_date)?;
    let exp = ctx.experiment(&cfg, futures, spot, curve, s0);
    let r = exp.run(cfg.seeds)?;
    let mut policy = Vec::new();
    r.policy.write_to(&mut policy).expect("writing to memory");
    ctx.out.write("policy.txt", &policy)?;
    let mut plan = Vec::new();
    r.plan.write_to(&mut plan).expect("writing to memory");
    ctx.out.write("hedge.txt", &plan)?;
    let mut csv = String::from("path,spot_wealth,hedge_leg,hedged_wealth\n");
    for (m, ((w, l), hw)) in r.report.per_path_wealth.iter().zip(&r.hedge_leg).zip(&r.hedged_wealth).enumerate() {
        let _ = writeln!(csv, "{m},{},{},{}", num(*w), num(*l), num(*hw));
    }
    ctx.out.write("wealth.csv", csv.as_bytes())?;
    let mean_hedged = r.hedged_wealth.iter().sum::<f64>() / r.hedged_wealth.len() as f64;
    ctx.out.write_json(
        "report.json",
        &json!({
            "extrinsic_value": r.report.extrinsic_value,
            "std_error": r.report.std_error(),
            "backward_value": r.policy.backward_value(),
            "std_unhedged": r.report.std_unhedged,
            "std_hedged": r.report.std_hedged,
            "mean_hedged": mean_hedged,
            "n_paths": r.report.n_paths,
            "delta": cfg.delta.as_str(),
            "model": exp.spot.model.id(),
            "start": cfg.spec.start_date.to_string(),
            "end": cfg.spec.end_date.to_string(),
            "s0": s0,
        }),
    )
}

fn binding_str(b: &Binding, months: &[(Month, f64)]) -> String {
    let m = |k: usize| months[k].0.to_string();
    match *b {
        Binding::RateLower(k) => format!("withdrawal_rate:{}", m(k)),
        Binding::RateUpper(k) => format!("injection_rate:{}", m(k)),
        Binding::VolumeMin(k) => format!("volume_min:{}", m(k)),
        Binding::VolumeMax(k) => format!("volume_max:{}", m(k)),
    }
}

pub fn intrinsic(ctx: &mut Context) -> Result<()> {
    let h = ctx.history()?;
    let cfg = ctx.cfg.clone();
    let date = cfg.spec.start_date;
    let (curve, _) = ctx.market_on(h.as_ref(), &cfg, date)?;
    let live = window_curve(&curve, cfg.rule, date, &cfg.spec);
    let sol = intrinsic_value(&live, cfg.spec.v_start, &cfg.spec)?;
    let mut csv = String::from("maturity,alpha\n");
    for (m, a) in &sol.positions {
        let _ = writeln!(csv, "{m},{}", num(*a));
    }
    ctx.out.write("intrinsic.csv", csv.as_bytes())?;
    let binding: Vec<String> = sol.binding.iter().map(|b| binding_str(b, &sol.positions)).collect();
    ctx.out.write_json(
        "intrinsic.json",
        &json!({ "date": date.to_string(), "value": sol.value, "binding": binding }),
    )
}

fn curve_series(h: &PriceHistory, from: NaiveDate, to: NaiveDate) -> Vec<(NaiveDate, Vec<(Month, f64)>)> {
    h.dates()
        .iter()
        .zip(h.curves())
        .filter(|(d, _)| **d >= from && **d < to)
        .map(|(d, c)| (*d, c.clone()))
        .collect()
}

pub fn rolling(ctx: &mut Context) -> Result<()> {
    let h = ctx.require_history("rolling-intrinsic")?;
    let cfg = &ctx.cfg;
    let series = curve_series(&h, cfg.spec.start_date, cfg.spec.end_date);
    let r = rolling_intrinsic(&series, &cfg.spec, cfg.rule)?;
    let mut csv = String::from("date,iv,ri\n");
    for ((d, iv), ri) in r.dates.iter().zip(&r.iv).zip(&r.ri) {
        let _ = writeln!(csv, "{d},{},{}", num(*iv), num(*ri));
    }
    ctx.out.write("rolling_intrinsic.csv", csv.as_bytes())?;
    let mut pos = String::from("maturity,alpha\n");
    for (m, a) in &r.positions {
        let _ = writeln!(pos, "{m},{}", num(*a));
    }
    ctx.out.write("rolling_positions.csv", pos.as_bytes())?;
    ctx.out.write_json(
        "rolling_intrinsic.json",
        &json!({
            "initial_iv": r.iv[0],
            "final_ri": r.final_value(),
            "rebalances": r.rebalances,
            "n_dates": r.dates.len(),
        }),
    )
}

struct YearRow {
    year: i32,
    start: NaiveDate,
    iv: f64,
    ev_sim: f64,
    ev_sim_stderr: f64,
    iv_hist: f64,
    ev_hist: f64,
    ev_hist_hedged: f64,
    std_unhedged: f64,
    std_hedged: f64,
}

fn backtest_year(ctx: &Context, h: &PriceHistory, futures: &GabillonParams, spot: &SpotParams, year: i32) -> Result<YearRow> {
    let base = ctx.cfg.spec.start_date;
    let start = NaiveDate::from_ymd_opt(year, base.month(), base.day())
        .ok_or_else(|| Error::Config(format!("no lease start in {year}")))?;
    let cfg = ctx.cfg.with_start(start);
    let (curve, s0) = ctx.market_on(Some(h), &cfg, start)?;
    let iv = intrinsic_value(&window_curve(&curve, cfg.rule, start, &cfg.spec), cfg.spec.v_start, &cfg.spec)?.value;
    let exp = ctx.experiment(&cfg, *futures, spot.clone(), curve, s0);
    let r = exp.run(cfg.seeds)?;
    let hist = run_historical(&r.policy, &r.plan, h, cfg.rule)?;
    let series = curve_series(h, start, cfg.spec.end_date);
    let iv_hist = rolling_intrinsic(&series, &cfg.spec, cfg.rule)?.final_value();
    Ok(YearRow {
        year,
        start,
        iv,
        ev_sim: r.report.extrinsic_value,
        ev_sim_stderr: r.report.std_error(),
        iv_hist,
        ev_hist: hist.spot_wealth,
        ev_hist_hedged: hist.hedged_wealth(),
        std_unhedged: r.report.std_unhedged,
        std_hedged: r.report.std_hedged.unwrap_or(f64::NAN),
    })
}

/// One row per lease year; failing years are listed separately and do not
/// stop the others.
pub fn backtest(ctx: &mut Context) -> Result<()> {
    if ctx.cfg.years.is_empty() {
        return Err(Error::Config("backtest needs a non-empty years list".into()));
    }
    let h = ctx.require_history("backtest")?;
    let (futures, _) = ctx.futures_params(Some(&h))?;
    let (spot, _) = ctx.spot_params(Some(&h))?;
    let mut csv = String::from(
        "year,start,iv,ev_sim,ev_sim_stderr,iv_hist,ev_hist,ev_hist_hedged,std_unhedged,std_hedged\n",
    );
    let mut failures = Vec::new();
    let mut ok = 0;
    for &year in &ctx.cfg.years {
        match backtest_year(ctx, &h, &futures, &spot, year) {
            Ok(r) => {
                ok += 1;
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.year,
                    r.start,
                    num(r.iv),
                    num(r.ev_sim),
                    num(r.ev_sim_stderr),
                    num(r.iv_hist),
                    num(r.ev_hist),
                    num(r.ev_hist_hedged),
                    num(r.std_unhedged),
                    num(r.std_hedged)
                );
            }
            Err(e) => {
                log::error!("backtest year {year}: {e}");
                failures.push(json!({ "year": year, "error": e.kind(), "message": e.to_string() }));
            }
        }
    }
    ctx.out.write("backtest.csv", csv.as_bytes())?;
    ctx.out.write_json(
        "backtest.json",
        &json!({ "processed": ok, "failed": failures.len(), "failures": failures }),
    )?;
    if ok == 0 {
        return Err(Error::Domain("no backtest year could be processed".into()));
    }
    Ok(())
}

pub fn model_risk(ctx: &mut Context) -> Result<()> {
    let h = ctx.require_history("model-risk")?;
    let (futures, _) = ctx.futures_params(Some(&h))?;
    let (base, cov) = ctx.spot_params(Some(&h))?;
    let cov = cov.ok_or_else(|| Error::Config("spot parameters carry no covariance to perturb with".into()))?;
    let cfg = ctx.cfg.clone();
    let spikes = match cfg.spike_k {
        Some(k) => Some(detect_spikes(h.dates(), &rolling_series(&h, cfg.rule)?.spread, k)?),
        None => None,
    };
    let ds = spot_dataset(&h, base.model, cfg.rule, spikes.as_ref())?;
    let fcfg = FamilyConfig {
        n_target: cfg.family_size,
        epsilon: cfg.epsilon,
        ks_level: cfg.ks_level,
        max_attempts: None,
    };
    let fam = generate_family(&base, &cov, &ds, &fcfg, cfg.seed_risk)?;
    let (curve, s0) = ctx.market_on(Some(&h), &cfg, cfg.spec.start_date)?;
    let exp = ctx.experiment(&cfg, futures, base.clone(), curve, s0);
    let pi1 = risk_pi1(&fam, &exp, cfg.seeds)?;
    let pi2 = risk_pi2(&fam, &exp, &h, cfg.seeds)?;
    let mut csv = String::from("member_id,J_star,wealth_hist,accepted,reject_reason\n");
    let _ = writeln!(csv, "base,{},{},true,", num(pi1.base), num(pi2.base));
    let mut k = 0;
    for (i, d) in fam.draws.iter().enumerate() {
        match d.rejected {
            None => {
                let _ = writeln!(csv, "{i},{},{},true,", num(pi1.members[k]), num(pi2.members[k]));
                k += 1;
            }
            Some(r) => {
                let _ = writeln!(csv, "{i},,,false,{}", r.as_str());
            }
        }
    }
    ctx.out.write("model_risk.csv", csv.as_bytes())?;
    use gas_storage::model_risk::RejectReason::*;
    ctx.out.write_json(
        "model_risk.json",
        &json!({
            "pi1": pi1.pi,
            "pi2": pi2.pi,
            "base_value": pi1.base,
            "base_wealth_hist": pi2.base,
            "members": fam.members.len(),
            "draws": fam.draws.len(),
            "rejected": {
                "non_stationary": fam.rejected(NonStationary),
                "normality": fam.rejected(Normality),
                "likelihood": fam.rejected(Likelihood),
            },
            "epsilon": fam.epsilon,
            "ks_level": fam.ks_level,
            "base_loglik": fam.base_loglik,
            "model": base.model.id(),
        }),
    )
}
