//! End-to-end valuation: simulate a backward path set, fit the policy and
//! the hedge on it, then evaluate both on an independent forward set.

use crate::calendar::{ExpiryRule, Month};
use crate::error::{Error, Result};
use chrono::NaiveDate;

use crate::calendar::TimeGrid;
use crate::futures::{curve_for_window, path_as_history, simulate_curves, CurvePathSet, GabillonParams};
use crate::hedging::{curves_from_history, fit_hedge, hedge_leg, DeltaKind, HedgePlan};
use crate::market_data::PriceHistory;
use crate::scalar::Real;
use crate::spot::{simulate_spot_paths, SpotParams};
use crate::storage::StorageSpec;
use crate::valuation::{
    evaluate_policy_forward, fit_policy_backward, population_std, MarketScenarios, Policy, Trajectories,
    ValuationConfig, ValuationReport,
};

#[derive(Debug, Clone)]
pub struct Experiment<T> {
    pub spec: StorageSpec<T>,
    pub futures: GabillonParams<T>,
    /// Futures curve observed on the lease start date.
    pub initial_curve: Vec<(Month, T)>,
    /// Spot on the lease start date.
    pub s0: T,
    pub spot: SpotParams<T>,
    pub rule: ExpiryRule,
    pub n_paths: usize,
    pub valuation: ValuationConfig,
    pub hedge: DeltaKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub backward: u64,
    pub forward: u64,
}

impl Seeds {
    pub fn new(backward: u64, forward: u64) -> Result<Self> {
        if backward == forward {
            return Err(Error::Config("backward and forward seeds must differ".into()));
        }
        Ok(Self { backward, forward })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult<T> {
    pub policy: Policy<T>,
    pub plan: HedgePlan<T>,
    /// Forward report; `std_hedged` is filled.
    pub report: ValuationReport<T>,
    pub hedge_leg: Vec<T>,
    pub hedged_wealth: Vec<T>,
}

impl<T: Real> Experiment<T> {
    fn simulate(&self, seed: u64) -> Result<(MarketScenarios<T>, CurvePathSet<T>)> {
        let grid = self.spec.grid()?;
        let curve = curve_for_window(&self.initial_curve, self.rule, self.spec.start_date, self.spec.end_date)?;
        let curves = simulate_curves(&self.futures, &curve, self.rule, &grid, self.n_paths, seed)?;
        let spot = simulate_spot_paths(&self.spot, &curves, self.s0, seed)?;
        let scen = MarketScenarios::from_paths(&spot, &curves)?;
        Ok((scen, curves))
    }

    /// Policy and hedge fitted on the backward set only.
    pub fn fit(&self, seed: u64) -> Result<(Policy<T>, HedgePlan<T>)> {
        let (scen, curves) = self.simulate(seed)?;
        let policy = fit_policy_backward(&scen, &self.spec, &self.valuation)?;
        let (_, tr) = evaluate_policy_forward(&policy, &scen)?;
        let plan = fit_hedge(self.hedge, &scen, &curves, &tr)?;
        Ok((policy, plan))
    }

    /// Forward evaluation of a fitted policy and hedge on fresh paths.
    pub fn evaluate(&self, policy: Policy<T>, plan: HedgePlan<T>, seed: u64) -> Result<ExperimentResult<T>> {
        let (scen, curves) = self.simulate(seed)?;
        let (mut report, tr) = evaluate_policy_forward(&policy, &scen)?;
        let leg = hedge_leg(&plan, &scen, &curves, &tr)?;
        let hedged: Vec<T> = report.per_path_wealth.iter().zip(&leg).map(|(&w, &l)| w + l).collect();
        report.std_hedged = Some(population_std(&hedged));
        Ok(ExperimentResult {
            policy,
            plan,
            report,
            hedge_leg: leg,
            hedged_wealth: hedged,
        })
    }

    pub fn run(&self, seeds: Seeds) -> Result<ExperimentResult<T>> {
        let (policy, plan) = self.fit(seeds.backward)?;
        self.evaluate(policy, plan, seeds.forward)
    }
}

/// Realized outcome of a fitted policy and hedge on the historical path.
#[derive(Debug, Clone)]
pub struct HistoricalOutcome<T> {
    pub spot_wealth: T,
    pub hedge_leg: T,
    pub trajectories: Trajectories<T>,
}

impl<T: Real> HistoricalOutcome<T> {
    pub fn hedged_wealth(&self) -> T {
        self.spot_wealth + self.hedge_leg
    }
}

pub fn run_historical<T: Real>(
    policy: &Policy<T>,
    plan: &HedgePlan<T>,
    h: &PriceHistory<T>,
    rule: ExpiryRule,
) -> Result<HistoricalOutcome<T>> {
    let spec = policy.spec();
    let scen = MarketScenarios::from_history(h, spec, rule)?;
    let (rep, tr) = evaluate_policy_forward(policy, &scen)?;
    let curves = curves_from_history(h, &spec.grid()?, plan.maturities(), rule)?;
    let leg = hedge_leg(plan, &scen, &curves, &tr)?;
    Ok(HistoricalOutcome {
        spot_wealth: rep.per_path_wealth[0],
        hedge_leg: leg[0],
        trajectories: tr,
    })
}

/// Seasonal curve `level + amplitude cos 2π(month - 1)/12` for `n` months
/// from `first`, peaking in January.
pub fn seasonal_curve<T: Real>(level: T, amplitude: T, first: Month, n: u32) -> Vec<(Month, T)> {
    (0..n)
        .map(|k| {
            let m = first.add_months(k);
            let phase = T::lit(std::f64::consts::TAU * (m.month() as f64 - 1.0) / 12.0);
            (m, level + amplitude * phase.cos())
        })
        .collect()
}

/// One simulated daily history on `[start, end]`, spot included, from a
/// curve observed on `start`. Suitable as stand-in market data.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_history<T: Real>(
    futures: &GabillonParams<T>,
    spot: &SpotParams<T>,
    initial_curve: &[(Month, T)],
    s0: T,
    start: NaiveDate,
    end: NaiveDate,
    rule: ExpiryRule,
    seed: u64,
) -> Result<PriceHistory<T>> {
    let grid = TimeGrid::daily(start, end, 1)?;
    // every live maturity is kept so the curve stays long until the end
    curve_for_window(initial_curve, rule, start, end)?;
    let curve: Vec<(Month, T)> = initial_curve.iter().copied().filter(|&(m, _)| rule.is_live(m, start)).collect();
    let curves = simulate_curves(futures, &curve, rule, &grid, 1, seed)?;
    let s = simulate_spot_paths(spot, &curves, s0, seed)?;
    path_as_history(&curves, 0, s.spiked(0))
}
