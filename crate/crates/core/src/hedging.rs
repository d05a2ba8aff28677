//! Futures deltas from expected volume changes per delivery month and the
//! combined spot plus futures wealth.

use std::io::{BufRead, Write};

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::calendar::{ExpiryRule, Month, TimeGrid};
use crate::error::{Error, Result};
use crate::futures::CurvePathSet;
use crate::market_data::PriceHistory;
use crate::regression::{quadratic_len, Design, Standardizer, QUADRATIC_BASIS};
use crate::scalar::Real;
use crate::valuation::{parse_floats, population_std, MarketScenarios, Trajectories, STATE_VARS};

pub const HEDGE_HEADER: &str = "# gas-storage hedge v1";

const HEDGE_VARS: usize = STATE_VARS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaKind {
    /// Expected volume change over the delivery month.
    Volume,
    /// Volume changes weighted by the futures price ratio.
    Tangent,
}

impl DeltaKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DeltaKind::Volume => "delta1",
            DeltaKind::Tangent => "delta2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "delta1" | "1" => Ok(DeltaKind::Volume),
            "delta2" | "2" => Ok(DeltaKind::Tangent),
            other => Err(Error::Config(format!("unknown hedge {other:?} (expected delta1 or delta2)"))),
        }
    }
}

/// Regression coefficients for `Δ(t_i, T_j)` on the state
/// `(log S, log P, volume)` at `t_i`.
#[derive(Debug, Clone)]
pub struct HedgePlan<T> {
    kind: DeltaKind,
    dates: Vec<NaiveDate>,
    maturities: Vec<Month>,
    expiries: Vec<NaiveDate>,
    basis: Vec<Standardizer<T>>,
    /// `[step][maturity]`; `None` is a zero delta.
    coef: Vec<Vec<Option<Vec<T>>>>,
}

impl<T: Real> HedgePlan<T> {
    /// A plan that never trades futures.
    pub fn zero(curves: &CurvePathSet<T>, kind: DeltaKind) -> Self {
        let n = curves.n_times() - 1;
        Self {
            kind,
            dates: curves.dates().to_vec(),
            maturities: curves.maturities().to_vec(),
            expiries: curves.expiries().to_vec(),
            basis: vec![Standardizer::constant(HEDGE_VARS); n],
            coef: vec![vec![None; curves.maturities().len()]; n],
        }
    }

    pub fn kind(&self) -> DeltaKind {
        self.kind
    }

    pub fn maturities(&self) -> &[Month] {
        &self.maturities
    }

    pub fn steps(&self) -> usize {
        self.coef.len()
    }

    /// `Δ(t_i, T_j)` for a raw state; zero from the expiry on.
    pub fn delta(&self, i: usize, j: usize, state: &[T; HEDGE_VARS]) -> T {
        if self.dates[i] >= self.expiries[j] {
            return T::zero();
        }
        match &self.coef[i][j] {
            None => T::zero(),
            Some(beta) => {
                let mut f = [T::zero(); quadratic_len(HEDGE_VARS)];
                self.basis[i].features(state, &mut f);
                crate::linalg::dot(&f, beta)
            }
        }
    }

    fn check_curves(&self, curves: &CurvePathSet<T>) -> Result<()> {
        if curves.dates() != self.dates.as_slice() {
            return Err(Error::Grid("futures paths and hedge plan have different dates".into()));
        }
        if curves.maturities() != self.maturities.as_slice() {
            return Err(Error::Grid("futures paths and hedge plan have different maturities".into()));
        }
        Ok(())
    }
}

fn hedge_state<T: Real>(scen: &MarketScenarios<T>, tr: &Trajectories<T>, m: usize, i: usize) -> [T; HEDGE_VARS] {
    let [a, b] = scen.state(m, i);
    [a, b, tr.volumes(m)[i]]
}

/// Step range `[lo, hi)` over which each maturity is the prompt.
fn buckets<T: Real>(curves: &CurvePathSet<T>) -> Result<Vec<Option<(usize, usize)>>> {
    let pb = curves.prompt_back()?;
    let n = curves.n_times() - 1;
    let mut out: Vec<Option<(usize, usize)>> = vec![None; curves.maturities().len()];
    for (l, &(p, _)) in pb.iter().enumerate().take(n) {
        out[p] = Some(match out[p] {
            None => (l, l + 1),
            Some((lo, _)) => (lo, l + 1),
        });
    }
    Ok(out)
}

/// Fits `Δ₁` or `Δ₂` on the backward paths and the volume trajectories the
/// policy produced on them.
pub fn fit_hedge<T: Real>(
    kind: DeltaKind,
    scen: &MarketScenarios<T>,
    curves: &CurvePathSet<T>,
    tr: &Trajectories<T>,
) -> Result<HedgePlan<T>> {
    let n = tr.n_steps;
    let np = scen.n_paths();
    if curves.n_times() != n + 1 || scen.n_times() != n + 1 || curves.n_paths() != np {
        return Err(Error::Grid(format!(
            "hedge inputs disagree: {} curve dates, {} scenario dates, {} steps",
            curves.n_times(),
            scen.n_times(),
            n
        )));
    }
    let nm = curves.maturities().len();
    let bk = buckets(curves)?;
    // suffix[j][m][l - lo]: sum over bucket steps l' >= l of the weighted
    // volume change, weight F(t_l', T_j) for Δ₂ and 1 for Δ₁.
    let suffix: Vec<Option<Vec<Vec<T>>>> = (0..nm)
        .into_par_iter()
        .map(|j| {
            bk[j].map(|(lo, hi)| {
                (0..np)
                    .map(|m| {
                        let v = tr.volumes(m);
                        let mut s = vec![T::zero(); hi - lo + 1];
                        for l in (lo..hi).rev() {
                            let w = match kind {
                                DeltaKind::Volume => T::one(),
                                DeltaKind::Tangent => curves.price(m, l, j),
                            };
                            s[l - lo] = s[l - lo + 1] + (v[l + 1] - v[l]) * w;
                        }
                        s
                    })
                    .collect()
            })
        })
        .collect();
    let fitted: Vec<(Standardizer<T>, Vec<Option<Vec<T>>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut vars = scen.state_columns(i);
            vars.push((0..np).map(|m| tr.volumes(m)[i]).collect());
            let st = Standardizer::fit(&vars);
            let cols = st.columns(&vars);
            let design = Design::new(&cols, &st.active())?;
            let mut row = vec![None; nm];
            for j in 0..nm {
                let Some((lo, hi)) = bk[j] else { continue };
                if i >= hi || curves.dates()[i] >= curves.expiries()[j] {
                    continue;
                }
                let s = suffix[j].as_ref().expect("bucket has sums");
                let from = i.max(lo) - lo;
                let y: Vec<T> = (0..np)
                    .map(|m| {
                        let base = match kind {
                            DeltaKind::Volume => T::one(),
                            DeltaKind::Tangent => curves.price(m, i, j),
                        };
                        s[m][from] / base
                    })
                    .collect();
                if y.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                row[j] = Some(design.fit(&y)?);
            }
            Ok((st, row))
        })
        .collect::<Result<_>>()?;
    let (basis, coef) = fitted.into_iter().unzip();
    Ok(HedgePlan {
        kind,
        dates: curves.dates().to_vec(),
        maturities: curves.maturities().to_vec(),
        expiries: curves.expiries().to_vec(),
        basis,
        coef,
    })
}

pub fn fit_delta1<T: Real>(
    scen: &MarketScenarios<T>,
    curves: &CurvePathSet<T>,
    tr: &Trajectories<T>,
) -> Result<HedgePlan<T>> {
    fit_hedge(DeltaKind::Volume, scen, curves, tr)
}

pub fn fit_delta2<T: Real>(
    scen: &MarketScenarios<T>,
    curves: &CurvePathSet<T>,
    tr: &Trajectories<T>,
) -> Result<HedgePlan<T>> {
    fit_hedge(DeltaKind::Tangent, scen, curves, tr)
}

/// Futures P&L per path, `Σ_i Σ_j Δ(t_i, T_j) (F(t_{i+1}, T_j) - F(t_i, T_j))`,
/// with deltas evaluated on each path's own state.
pub fn hedge_leg<T: Real>(
    plan: &HedgePlan<T>,
    scen: &MarketScenarios<T>,
    curves: &CurvePathSet<T>,
    tr: &Trajectories<T>,
) -> Result<Vec<T>> {
    plan.check_curves(curves)?;
    if tr.n_steps != plan.steps() || scen.n_paths() != curves.n_paths() || tr.volumes.len() != curves.n_paths() * (tr.n_steps + 1) {
        return Err(Error::Grid("hedge evaluation inputs disagree in size".into()));
    }
    let nm = plan.maturities.len();
    Ok((0..curves.n_paths())
        .into_par_iter()
        .map(|m| {
            let mut leg = T::zero();
            for i in 0..plan.steps() {
                let state = hedge_state(scen, tr, m, i);
                for j in 0..nm {
                    let d = plan.delta(i, j, &state);
                    if d != T::zero() {
                        leg += d * (curves.price(m, i + 1, j) - curves.price(m, i, j));
                    }
                }
            }
            leg
        })
        .collect())
}

/// Spot wealth plus the futures leg, per path.
pub fn hedged_wealth<T: Real>(
    spot_wealth: &[T],
    plan: &HedgePlan<T>,
    scen: &MarketScenarios<T>,
    curves: &CurvePathSet<T>,
    tr: &Trajectories<T>,
) -> Result<Vec<T>> {
    if spot_wealth.len() != curves.n_paths() {
        return Err(Error::Grid("spot wealth and futures paths differ in count".into()));
    }
    let leg = hedge_leg(plan, scen, curves, tr)?;
    Ok(spot_wealth.iter().zip(leg).map(|(&w, l)| w + l).collect())
}

/// Standard deviation used in reports (population form).
pub fn wealth_std<T: Real>(w: &[T]) -> T {
    population_std(w)
}

/// Futures prices from history on the given grid for a fixed maturity
/// list. A contract's price is carried flat after its expiry; a live
/// contract missing from the curve is a gap.
pub fn curves_from_history<T: Real>(
    h: &PriceHistory<T>,
    grid: &TimeGrid<T>,
    maturities: &[Month],
    rule: ExpiryRule,
) -> Result<CurvePathSet<T>> {
    let nm = maturities.len();
    let mut data = Vec::with_capacity(grid.len() * nm);
    let mut last: Vec<Option<T>> = vec![None; nm];
    for &d in grid.dates() {
        let k = h.index_of(d).ok_or_else(|| Error::Gap {
            date: d,
            message: "no curve row on this contract date".into(),
        })?;
        for (j, &mat) in maturities.iter().enumerate() {
            let price = if rule.is_live(mat, d) {
                h.price(k, mat).ok_or_else(|| Error::Gap {
                    date: d,
                    message: format!("live maturity {mat} missing from the curve"),
                })?
            } else {
                last[j].or_else(|| h.price(k, mat)).ok_or_else(|| Error::Gap {
                    date: d,
                    message: format!("maturity {mat} expired before the window and has no price"),
                })?
            };
            last[j] = Some(price);
            data.push(price);
        }
    }
    CurvePathSet::from_parts(grid, maturities.to_vec(), rule, 1, data, 0)
}

fn fmt<T: Real>(v: T) -> String {
    format!("{:?}", v.f64())
}

impl<T: Real> HedgePlan<T> {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{HEDGE_HEADER}")?;
        writeln!(w, "kind {}", self.kind.as_str())?;
        writeln!(w, "basis {QUADRATIC_BASIS} vars {HEDGE_VARS}")?;
        let ds: Vec<String> = self.dates.iter().map(|d| d.to_string()).collect();
        writeln!(w, "dates {}", ds.join(" "))?;
        for (m, e) in self.maturities.iter().zip(&self.expiries) {
            writeln!(w, "maturity {m} {e}")?;
        }
        for (i, st) in self.basis.iter().enumerate() {
            let vals: Vec<String> = st
                .mean
                .iter()
                .chain(&st.inv_std)
                .chain(&st.lo)
                .chain(&st.hi)
                .map(|&v| fmt(v))
                .collect();
            writeln!(w, "step {i} {}", vals.join(" "))?;
            for (j, c) in self.coef[i].iter().enumerate() {
                if let Some(c) = c {
                    let c: Vec<String> = c.iter().map(|&v| fmt(v)).collect();
                    writeln!(w, "coef {i} {j} {}", c.join(" "))?;
                }
            }
        }
        writeln!(w, "end hedge")
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("hedge plan: {m}"));
        let mut lines = Vec::new();
        let mut buf = String::new();
        loop {
            buf.clear();
            if r.read_line(&mut buf).map_err(|e| bad(e.to_string()))? == 0 {
                return Err(bad("missing `end hedge`".into()));
            }
            let line = buf.trim_end().to_string();
            if line == "end hedge" {
                break;
            }
            if !line.is_empty() {
                lines.push(line);
            }
        }
        if lines.first().map(String::as_str) != Some(HEDGE_HEADER) {
            return Err(bad(format!("expected header {HEDGE_HEADER:?}")));
        }
        let mut kind = None;
        let mut dates = Vec::new();
        let mut maturities = Vec::new();
        let mut expiries = Vec::new();
        let mut basis = Vec::new();
        let mut rows = Vec::new();
        for line in &lines[1..] {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "kind" => kind = Some(DeltaKind::parse(toks.get(1).copied().unwrap_or(""))?),
                "basis" => {
                    if toks.get(1) != Some(&QUADRATIC_BASIS) || toks.get(3).and_then(|t| t.parse().ok()) != Some(HEDGE_VARS) {
                        return Err(bad(format!("unsupported basis line {line:?}")));
                    }
                }
                "dates" => {
                    dates = toks[1..]
                        .iter()
                        .map(|t| t.parse::<NaiveDate>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<_>>()?
                }
                "maturity" if toks.len() == 3 => {
                    maturities.push(toks[1].parse::<Month>()?);
                    expiries.push(toks[2].parse::<NaiveDate>().map_err(|e| bad(e.to_string()))?);
                }
                "step" => {
                    let v = parse_floats::<T>(&toks[2..])?;
                    if v.len() != 4 * HEDGE_VARS {
                        return Err(bad(format!("bad step line {line:?}")));
                    }
                    let k = HEDGE_VARS;
                    basis.push(Standardizer {
                        mean: v[..k].to_vec(),
                        inv_std: v[k..2 * k].to_vec(),
                        lo: v[2 * k..3 * k].to_vec(),
                        hi: v[3 * k..].to_vec(),
                    });
                }
                "coef" if toks.len() > 3 => {
                    let i: usize = toks[1].parse().map_err(|_| bad(format!("bad index in {line:?}")))?;
                    let j: usize = toks[2].parse().map_err(|_| bad(format!("bad index in {line:?}")))?;
                    rows.push((i, j, parse_floats::<T>(&toks[3..])?));
                }
                _ => return Err(bad(format!("unexpected line {line:?}"))),
            }
        }
        let n = basis.len();
        if dates.len() != n + 1 {
            return Err(bad(format!("{} dates for {n} steps", dates.len())));
        }
        let mut coef = vec![vec![None; maturities.len()]; n];
        for (i, j, c) in rows {
            if i >= n || j >= maturities.len() || c.len() != quadratic_len(HEDGE_VARS) {
                return Err(bad(format!("coefficient row ({i}, {j}) out of range")));
            }
            coef[i][j] = Some(c);
        }
        Ok(Self {
            kind: kind.ok_or_else(|| bad("missing kind".into()))?,
            dates,
            maturities,
            expiries,
            basis,
            coef,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::Action;
    use chrono::Duration;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2007, 4, 1).unwrap()
    }

    /// Deterministic world: flat prices, a curve of three monthly contracts
    /// whose prices follow `f(i, j)`, and the same volume path on all paths.
    fn world(
        days: i64,
        n_paths: usize,
        f: impl Fn(usize, usize) -> f64,
        volumes: &[f64],
    ) -> (MarketScenarios<f64>, CurvePathSet<f64>, Trajectories<f64>) {
        let grid = TimeGrid::daily(start(), start() + Duration::days(days), 1).unwrap();
        let mats = Month::range(Month::new(2007, 5).unwrap(), Month::new(2007, 8).unwrap());
        let nt = grid.len();
        let mut data = Vec::new();
        for _ in 0..n_paths {
            for i in 0..nt {
                for j in 0..mats.len() {
                    data.push(f(i, j));
                }
            }
        }
        let curves = CurvePathSet::from_parts(&grid, mats, ExpiryRule::default(), n_paths, data, 0).unwrap();
        let scen = MarketScenarios::deterministic(&vec![5.0; nt], n_paths).unwrap();
        let tr = Trajectories {
            n_steps: nt - 1,
            actions: vec![Action::No; n_paths * (nt - 1)],
            volumes: (0..n_paths).flat_map(|_| volumes.iter().copied()).collect(),
            flows: vec![0.0; n_paths * (nt - 1)],
        };
        (scen, curves, tr)
    }

    #[test]
    fn idle_policy_has_zero_deltas() {
        let (scen, curves, tr) = world(60, 20, |_, _| 5.0, &[0.0; 61]);
        let plan = fit_delta1(&scen, &curves, &tr).unwrap();
        let state = [0.0, 0.0, 0.0];
        for i in 0..60 {
            for j in 0..4 {
                assert_eq!(plan.delta(i, j, &state), 0.0);
            }
        }
    }

    #[test]
    fn injecting_every_day_of_a_month() {
        // April is the May contract's bucket; inject 4 on each April day.
        let vols: Vec<f64> = (0..=45).map(|k| 4.0 * (k.min(30)) as f64).collect();
        let (scen, curves, tr) = world(45, 20, |_, _| 5.0, &vols);
        let plan = fit_delta1(&scen, &curves, &tr).unwrap();
        for i in 0..45 {
            let st = [5.0f64.ln(), 5.0f64.ln(), vols[i]];
            let expect = if i < 30 { 4.0 * (30 - i) as f64 } else { 0.0 };
            assert!((plan.delta(i, 0, &st) - expect).abs() < 1e-9, "step {i}");
            assert_eq!(plan.delta(i, 1, &st), 0.0);
        }
        // constant futures: the tangent delta is the same
        let p2 = fit_delta2(&scen, &curves, &tr).unwrap();
        for i in 0..30 {
            let st = [5.0f64.ln(), 5.0f64.ln(), vols[i]];
            assert!((p2.delta(i, 0, &st) - plan.delta(i, 0, &st)).abs() < 1e-9);
        }
    }

    #[test]
    fn tangent_weighting_doubles() {
        // one unit injected on day 10 while the May contract has doubled
        let vols: Vec<f64> = (0..=20).map(|k| if k > 10 { 1.0 } else { 0.0 }).collect();
        let (scen, curves, tr) = world(20, 20, |i, _| if i >= 10 { 10.0 } else { 5.0 }, &vols);
        let st = [5.0f64.ln(), 5.0f64.ln(), 0.0];
        let d1 = fit_delta1(&scen, &curves, &tr).unwrap().delta(2, 0, &st);
        let d2 = fit_delta2(&scen, &curves, &tr).unwrap().delta(2, 0, &st);
        assert!((d1 - 1.0).abs() < 1e-9);
        assert!((d2 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_plan_and_constant_futures() {
        let vols: Vec<f64> = (0..=45).map(|k| 4.0 * (k.min(30)) as f64).collect();
        let (scen, curves, tr) = world(45, 20, |_, _| 5.0, &vols);
        let spot_w = vec![3.0; 20];
        let zero = HedgePlan::zero(&curves, DeltaKind::Volume);
        assert_eq!(hedged_wealth(&spot_w, &zero, &scen, &curves, &tr).unwrap(), spot_w);
        let plan = fit_delta1(&scen, &curves, &tr).unwrap();
        assert_eq!(hedged_wealth(&spot_w, &plan, &scen, &curves, &tr).unwrap(), spot_w);
    }

    #[test]
    fn expiry_zeroes_delta_and_round_trip() {
        let vols: Vec<f64> = (0..=45).map(|k| 4.0 * (k.min(30)) as f64).collect();
        let (scen, curves, tr) = world(45, 20, |i, j| 5.0 + 0.01 * (i + j) as f64, &vols);
        let plan = fit_delta2(&scen, &curves, &tr).unwrap();
        for i in 30..45 {
            assert_eq!(plan.delta(i, 0, &[1.0, 1.0, 50.0]), 0.0);
        }
        let mut buf = Vec::new();
        plan.write_to(&mut buf).unwrap();
        let again = HedgePlan::<f64>::read_from(&mut buf.as_slice()).unwrap();
        let st = [5.0f64.ln(), 1.7, 12.0];
        for i in 0..45 {
            assert_eq!(plan.delta(i, 0, &st), again.delta(i, 0, &st));
        }
    }

    #[test]
    fn history_curves_carry_expired_prices() {
        let dates: Vec<NaiveDate> = (0..45).map(|k| start() + Duration::days(k)).collect();
        let may = Month::new(2007, 5).unwrap();
        let curves: Vec<Vec<(Month, f64)>> = dates
            .iter()
            .enumerate()
            .map(|(k, &d)| {
                let mut c = vec![(may.succ(), 6.0 + k as f64), (may.add_months(2), 7.0)];
                if d < may.first_day() {
                    c.insert(0, (may, 5.0 + k as f64));
                }
                c
            })
            .collect();
        let h = PriceHistory::new(dates.clone(), vec![5.0; 45], curves).unwrap();
        let grid = TimeGrid::daily(start(), start() + Duration::days(44), 1).unwrap();
        let cs = curves_from_history(&h, &grid, &[may, may.succ()], ExpiryRule::default()).unwrap();
        assert_eq!(cs.price(0, 40, 0), 5.0 + 29.0);
        assert_eq!(cs.price(0, 40, 1), 46.0);
        let missing = curves_from_history(&h, &grid, &[may, may.add_months(3)], ExpiryRule::default());
        assert!(matches!(missing, Err(Error::Gap { .. })));
    }
}
