//! Regression Monte Carlo for the storage dynamic program: a backward pass
//! that fits continuation values per volume node, and forward evaluation of
//! the resulting decision rule on fresh or historical paths.

use std::io::{BufRead, Write};

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::calendar::ExpiryRule;
use crate::error::{Error, Result};
use crate::futures::CurvePathSet;
use crate::market_data::{rolling_series, PriceHistory};
use crate::regression::{quadratic_len, Design, Standardizer, QUADRATIC_BASIS};
use crate::scalar::{mean, Real};
use crate::spot::SpotPathSet;
use crate::storage::{nearest_node, Action, StorageSpec, VolumeLattice, DEFAULT_NODE_CAP};

/// Number of raw state variables in the policy basis.
pub const STATE_VARS: usize = 2;

/// Header line of the policy container format.
pub const POLICY_HEADER: &str = "# gas-storage policy v1";

/// Spot and prompt prices on the contract grid, `[path][time]`.
#[derive(Debug, Clone)]
pub struct MarketScenarios<T> {
    n_paths: usize,
    n_times: usize,
    spot: Vec<T>,
    prompt: Vec<T>,
}

impl<T: Real> MarketScenarios<T> {
    pub fn new(n_paths: usize, n_times: usize, spot: Vec<T>, prompt: Vec<T>) -> Result<Self> {
        let want = n_paths * n_times;
        if spot.len() != want || prompt.len() != want {
            return Err(Error::Grid(format!(
                "scenario data sizes {} / {} do not match {n_paths} x {n_times}",
                spot.len(),
                prompt.len()
            )));
        }
        if spot.iter().chain(&prompt).any(|v| !(*v > T::zero())) {
            return Err(Error::domain("scenario prices must be positive"));
        }
        Ok(Self {
            n_paths,
            n_times,
            spot,
            prompt,
        })
    }

    /// The same price path for spot and prompt on every path.
    pub fn deterministic(prices: &[T], n_paths: usize) -> Result<Self> {
        let data: Vec<T> = (0..n_paths).flat_map(|_| prices.iter().copied()).collect();
        Self::new(n_paths, prices.len(), data.clone(), data)
    }

    /// Pairs simulated spot paths (spikes included) with the prompt of the
    /// matching curve path.
    pub fn from_paths(spot: &SpotPathSet<T>, curves: &CurvePathSet<T>) -> Result<Self> {
        if spot.n_paths() != curves.n_paths() || spot.n_times() != curves.n_times() {
            return Err(Error::Grid(format!(
                "spot paths {} x {} vs curve paths {} x {}",
                spot.n_paths(),
                spot.n_times(),
                curves.n_paths(),
                curves.n_times()
            )));
        }
        let pb = curves.prompt_back()?;
        let nt = curves.n_times();
        let mut s = Vec::with_capacity(spot.n_paths() * nt);
        let mut p = Vec::with_capacity(spot.n_paths() * nt);
        for m in 0..spot.n_paths() {
            s.extend_from_slice(spot.spiked(m));
            p.extend((0..nt).map(|i| curves.price(m, i, pb[i].0)));
        }
        Self::new(spot.n_paths(), nt, s, p)
    }

    /// One path read from history on every grid date of the lease.
    pub fn from_history(h: &PriceHistory<T>, spec: &StorageSpec<T>, rule: ExpiryRule) -> Result<Self> {
        let grid = spec.grid()?;
        let window = history_window(h, grid.dates())?;
        let r = rolling_series(&window, rule)?;
        Self::new(1, grid.len(), window.spot().to_vec(), r.prompt)
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn spot(&self, path: usize) -> &[T] {
        &self.spot[path * self.n_times..(path + 1) * self.n_times]
    }

    pub fn prompt(&self, path: usize) -> &[T] {
        &self.prompt[path * self.n_times..(path + 1) * self.n_times]
    }

    /// Raw state `(log S, log P)` at time `i` on one path. The spread
    /// `(S - P) / P` is a smooth function of these two, so adding it as a
    /// third variable makes the quadratic basis nearly singular.
    #[inline]
    pub fn state(&self, path: usize, i: usize) -> [T; STATE_VARS] {
        let k = path * self.n_times + i;
        [self.spot[k].ln(), self.prompt[k].ln()]
    }

    /// State variables at time `i` across paths, `vars[v][m]`.
    pub fn state_columns(&self, i: usize) -> Vec<Vec<T>> {
        let mut vars = vec![Vec::with_capacity(self.n_paths); STATE_VARS];
        for m in 0..self.n_paths {
            for (v, x) in vars.iter_mut().zip(self.state(m, i)) {
                v.push(x);
            }
        }
        vars
    }
}

/// The rows of `h` on exactly the given dates; a missing date is a gap.
pub fn history_window<T: Real>(h: &PriceHistory<T>, dates: &[NaiveDate]) -> Result<PriceHistory<T>> {
    let mut spot = Vec::with_capacity(dates.len());
    let mut curves = Vec::with_capacity(dates.len());
    for &d in dates {
        let k = h.index_of(d).ok_or_else(|| Error::Gap {
            date: d,
            message: "no spot/curve row on this contract date".into(),
        })?;
        spot.push(h.spot()[k]);
        curves.push(h.curves()[k].clone());
    }
    PriceHistory::new(dates.to_vec(), spot, curves)
}

#[derive(Debug, Clone)]
pub struct ValuationConfig {
    pub node_cap: usize,
    /// Smallest backward path set accepted.
    pub min_paths: usize,
}

impl Default for ValuationConfig {
    fn default() -> Self {
        Self {
            node_cap: DEFAULT_NODE_CAP,
            min_paths: 500,
        }
    }
}

/// Fitted decision rule: for each step `i` and each feasible node `k` of
/// step `i + 1`, coefficients of the continuation value of landing on `k`
/// as a function of the state at `t_i`. Candidate actions from any node are
/// priced through the node they lead to.
#[derive(Debug, Clone)]
pub struct Policy<T> {
    spec: StorageSpec<T>,
    lattice: VolumeLattice<T>,
    node_cap: usize,
    basis: Vec<Standardizer<T>>,
    coef: Vec<Vec<Option<Vec<T>>>>,
    backward_value: T,
}

impl<T: Real> Policy<T> {
    pub fn spec(&self) -> &StorageSpec<T> {
        &self.spec
    }

    pub fn lattice(&self) -> &VolumeLattice<T> {
        &self.lattice
    }

    pub fn steps(&self) -> usize {
        self.lattice.steps()
    }

    /// Mean realized backward wealth over the fitting paths.
    pub fn backward_value(&self) -> T {
        self.backward_value
    }

    pub fn basis(&self, i: usize) -> &Standardizer<T> {
        &self.basis[i]
    }

    /// Continuation coefficients for reaching node `k` of step `i + 1`.
    pub fn coefficients(&self, i: usize, k: usize) -> Option<&[T]> {
        self.coef[i][k].as_deref()
    }

    /// Best action at step `i` from volume `v` given the raw state.
    /// Returns the action and the volume it leads to.
    pub fn decide(&self, i: usize, v: T, spot: T, state: &[T; STATE_VARS]) -> (Action, T) {
        let st = &self.basis[i];
        let mut f = vec![T::zero(); st.n_features()];
        st.features(state, &mut f);
        let exact = !self.lattice.coarsened();
        let l = nearest_node(self.lattice.nodes(i), v);
        let mut best: Option<(T, Action, T)> = None;
        for a in Action::ALL {
            let (k, next) = if exact {
                let k = self.lattice.next(i, l, a);
                (k, self.lattice.nodes(i + 1)[k])
            } else {
                let next = self.spec.step(v, a);
                (nearest_node(self.lattice.nodes(i + 1), next), next)
            };
            let Some(beta) = &self.coef[i][k] else { continue };
            let value = self.spec.flow(spot, v, a) + crate::linalg::dot(&f, beta);
            if best.as_ref().is_none_or(|(bv, _, _)| value > *bv) {
                best = Some((value, a, next));
            }
        }
        match best {
            Some((_, a, next)) => (a, next),
            None => {
                log::warn!("no feasible action at step {i} from volume {v}; holding");
                (Action::No, v)
            }
        }
    }
}

/// Backward regression pass over `scen`. Returns the fitted policy; its
/// [`Policy::backward_value`] is the in-sample estimate of the optimal value.
pub fn fit_policy_backward<T: Real>(
    scen: &MarketScenarios<T>,
    spec: &StorageSpec<T>,
    cfg: &ValuationConfig,
) -> Result<Policy<T>> {
    spec.validate()?;
    let grid = spec.grid()?;
    if scen.n_times() != grid.len() {
        return Err(Error::Grid(format!(
            "scenarios have {} dates, contract grid has {}",
            scen.n_times(),
            grid.len()
        )));
    }
    if scen.n_paths() < cfg.min_paths {
        return Err(Error::InsufficientData {
            needed: cfg.min_paths,
            got: scen.n_paths(),
        });
    }
    let n = grid.steps();
    let lat = VolumeLattice::build(spec, n, cfg.node_cap)?;
    if !lat.is_feasible(0, 0) {
        return Err(Error::Infeasible {
            prefix: n,
            message: format!("end volume {} unreachable from {}", spec.v_end, spec.v_start),
        });
    }
    let np = scen.n_paths();
    // Realized wealth-to-go per node of step i + 1, empty when infeasible.
    let mut w_next: Vec<Vec<T>> = (0..lat.nodes(n).len())
        .map(|k| if lat.is_feasible(n, k) { vec![T::zero(); np] } else { Vec::new() })
        .collect();
    let mut basis = vec![Standardizer::constant(STATE_VARS); n];
    let mut coef: Vec<Vec<Option<Vec<T>>>> = vec![Vec::new(); n];
    let mut reduced_steps = 0usize;
    for i in (0..n).rev() {
        let vars = scen.state_columns(i);
        let st = Standardizer::fit(&vars);
        let cols = st.columns(&vars);
        let design = Design::new(&cols, &st.active())?;
        if design.dropped() > 0 {
            reduced_steps += 1;
        }
        let fits: Vec<Option<(Vec<T>, Vec<T>)>> = w_next
            .par_iter()
            .map(|w| {
                if w.is_empty() {
                    return Ok(None);
                }
                let beta = design.fit(w)?;
                let pred = design.predict(&beta);
                Ok(Some((beta, pred)))
            })
            .collect::<Result<_>>()?;
        let spot: Vec<T> = (0..np).map(|m| scen.spot(m)[i]).collect();
        let nodes = lat.nodes(i);
        let w_here: Vec<Vec<T>> = (0..nodes.len())
            .into_par_iter()
            .map(|l| {
                if !lat.is_feasible(i, l) {
                    return Vec::new();
                }
                let v = nodes[l];
                let cands: Vec<(usize, Action)> = Action::ALL
                    .iter()
                    .map(|&a| (lat.next(i, l, a), a))
                    .filter(|&(k, _)| fits[k].is_some())
                    .collect();
                (0..np)
                    .map(|m| {
                        let mut best: Option<(T, T, usize)> = None;
                        for &(k, a) in &cands {
                            let phi = spec.flow(spot[m], v, a);
                            let pred = fits[k].as_ref().map(|f| f.1[m]).unwrap_or(T::zero());
                            let val = phi + pred;
                            if best.as_ref().is_none_or(|(bv, _, _)| val > *bv) {
                                best = Some((val, phi, k));
                            }
                        }
                        let (_, phi, k) = best.expect("feasible node has a feasible action");
                        phi + w_next[k][m]
                    })
                    .collect()
            })
            .collect();
        coef[i] = fits.into_iter().map(|f| f.map(|(b, _)| b)).collect();
        basis[i] = st;
        w_next = w_here;
    }
    if reduced_steps > 0 {
        log::debug!("dependent basis columns dropped on {reduced_steps} of {n} steps");
    }
    let backward_value = mean(&w_next[0]);
    Ok(Policy {
        spec: spec.clone(),
        lattice: lat,
        node_cap: cfg.node_cap,
        basis,
        coef,
        backward_value,
    })
}

#[derive(Debug, Clone)]
pub struct ValuationReport<T> {
    /// Mean of `per_path_wealth`.
    pub extrinsic_value: T,
    pub std_unhedged: T,
    /// Filled in once a hedge has been applied.
    pub std_hedged: Option<T>,
    pub per_path_wealth: Vec<T>,
    pub n_paths: usize,
}

impl<T: Real> ValuationReport<T> {
    pub fn from_wealth(per_path_wealth: Vec<T>) -> Self {
        Self {
            extrinsic_value: mean(&per_path_wealth),
            std_unhedged: population_std(&per_path_wealth),
            std_hedged: None,
            n_paths: per_path_wealth.len(),
            per_path_wealth,
        }
    }

    /// Monte Carlo standard error of the mean.
    pub fn std_error(&self) -> T {
        self.std_unhedged / T::of(self.n_paths).sqrt()
    }
}

pub(crate) fn population_std<T: Real>(xs: &[T]) -> T {
    if xs.is_empty() {
        return T::nan();
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::of(xs.len())).sqrt()
}

/// Actions, volumes and cash flows of a forward run, `[path][step]`.
#[derive(Debug, Clone)]
pub struct Trajectories<T> {
    pub n_steps: usize,
    pub actions: Vec<Action>,
    /// `n_steps + 1` volumes per path.
    pub volumes: Vec<T>,
    pub flows: Vec<T>,
}

impl<T: Real> Trajectories<T> {
    pub fn actions(&self, path: usize) -> &[Action] {
        &self.actions[path * self.n_steps..(path + 1) * self.n_steps]
    }

    pub fn volumes(&self, path: usize) -> &[T] {
        &self.volumes[path * (self.n_steps + 1)..(path + 1) * (self.n_steps + 1)]
    }

    pub fn flows(&self, path: usize) -> &[T] {
        &self.flows[path * self.n_steps..(path + 1) * self.n_steps]
    }
}

/// Wealth as the sum of cash flows, added from the last step backwards in
/// the same order as the backward pass accumulates them.
pub fn wealth_of_flows<T: Real>(flows: &[T]) -> T {
    flows.iter().rev().fold(T::zero(), |acc, &f| f + acc)
}

/// Applies the policy on every path of `scen`.
pub fn evaluate_policy_forward<T: Real>(
    policy: &Policy<T>,
    scen: &MarketScenarios<T>,
) -> Result<(ValuationReport<T>, Trajectories<T>)> {
    let n = policy.steps();
    if scen.n_times() != n + 1 {
        return Err(Error::Grid(format!(
            "scenarios have {} dates, policy expects {}",
            scen.n_times(),
            n + 1
        )));
    }
    let spec = &policy.spec;
    let runs: Vec<(Vec<Action>, Vec<T>, Vec<T>)> = (0..scen.n_paths())
        .into_par_iter()
        .map(|m| {
            let mut v = spec.v_start;
            let mut acts = Vec::with_capacity(n);
            let mut vols = Vec::with_capacity(n + 1);
            let mut flows = Vec::with_capacity(n);
            vols.push(v);
            let spot = scen.spot(m);
            for i in 0..n {
                let (a, next) = policy.decide(i, v, spot[i], &scen.state(m, i));
                flows.push(spec.flow(spot[i], v, a));
                acts.push(a);
                v = if policy.lattice.coarsened() { spec.step(v, a) } else { next };
                vols.push(v);
            }
            (acts, vols, flows)
        })
        .collect();
    let mut tr = Trajectories {
        n_steps: n,
        actions: Vec::with_capacity(n * runs.len()),
        volumes: Vec::with_capacity((n + 1) * runs.len()),
        flows: Vec::with_capacity(n * runs.len()),
    };
    let mut wealth = Vec::with_capacity(runs.len());
    for (a, v, f) in runs {
        wealth.push(wealth_of_flows(&f));
        tr.actions.extend(a);
        tr.volumes.extend(v);
        tr.flows.extend(f);
    }
    Ok((ValuationReport::from_wealth(wealth), tr))
}

/// The policy applied to the realized history over the lease window.
pub fn run_on_historical<T: Real>(
    policy: &Policy<T>,
    h: &PriceHistory<T>,
    rule: ExpiryRule,
) -> Result<(T, Trajectories<T>)> {
    let scen = MarketScenarios::from_history(h, &policy.spec, rule)?;
    let (rep, tr) = evaluate_policy_forward(policy, &scen)?;
    Ok((rep.per_path_wealth[0], tr))
}

fn fmt<T: Real>(v: T) -> String {
    format!("{:?}", v.f64())
}

pub(crate) fn write_spec<T: Real, W: Write>(w: &mut W, s: &StorageSpec<T>) -> std::io::Result<()> {
    writeln!(
        w,
        "spec v_min={} v_max={} a_inj={} a_with={} v_start={} v_end={} start={} end={} dt_days={} cost_inj={} cost_with={}",
        fmt(s.v_min),
        fmt(s.v_max),
        fmt(s.a_inj),
        fmt(s.a_with),
        fmt(s.v_start),
        fmt(s.v_end),
        s.start_date,
        s.end_date,
        s.dt_days,
        fmt(s.cost_inj),
        fmt(s.cost_with)
    )
}

pub(crate) fn parse_spec<T: Real>(line: &str) -> Result<StorageSpec<T>> {
    let mut kv = std::collections::HashMap::new();
    for tok in line.split_whitespace().skip(1) {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad spec token {tok:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Config(format!("spec missing {k}")));
    let num = |k: &str| -> Result<T> {
        get(k)?
            .parse::<f64>()
            .map(T::lit)
            .map_err(|e| Error::Config(format!("spec {k}: {e}")))
    };
    let date = |k: &str| -> Result<NaiveDate> {
        get(k)?.parse().map_err(|e| Error::Config(format!("spec {k}: {e}")))
    };
    let s = StorageSpec {
        v_min: num("v_min")?,
        v_max: num("v_max")?,
        a_inj: num("a_inj")?,
        a_with: num("a_with")?,
        v_start: num("v_start")?,
        v_end: num("v_end")?,
        start_date: date("start")?,
        end_date: date("end")?,
        dt_days: get("dt_days")?
            .parse()
            .map_err(|e| Error::Config(format!("spec dt_days: {e}")))?,
        cost_inj: num("cost_inj")?,
        cost_with: num("cost_with")?,
    };
    s.validate()?;
    Ok(s)
}

pub(crate) fn parse_floats<T: Real>(toks: &[&str]) -> Result<Vec<T>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .map(T::lit)
                .map_err(|e| Error::Config(format!("bad number {t:?}: {e}")))
        })
        .collect()
}

impl<T: Real> Policy<T> {
    /// Text container: header, contract, per-step standardization and one
    /// coefficient row per feasible next node.
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{POLICY_HEADER}")?;
        writeln!(w, "basis {QUADRATIC_BASIS} vars {STATE_VARS}")?;
        write_spec(w, &self.spec)?;
        writeln!(w, "node_cap {}", self.node_cap)?;
        writeln!(w, "steps {}", self.steps())?;
        writeln!(w, "backward_value {}", fmt(self.backward_value))?;
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
            for (k, c) in self.coef[i].iter().enumerate() {
                if let Some(c) = c {
                    let c: Vec<String> = c.iter().map(|&v| fmt(v)).collect();
                    writeln!(w, "coef {i} {k} {}", c.join(" "))?;
                }
            }
        }
        writeln!(w, "end policy")
    }

    /// Reads a policy written by [`Policy::write_to`]; the lattice is rebuilt
    /// from the stored contract. Stops after the `end policy` line.
    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = Vec::new();
        let mut buf = String::new();
        loop {
            buf.clear();
            let n = r
                .read_line(&mut buf)
                .map_err(|e| Error::Config(format!("reading policy: {e}")))?;
            if n == 0 {
                return Err(Error::Config("policy ends without `end policy`".into()));
            }
            let line = buf.trim_end().to_string();
            if line == "end policy" {
                break;
            }
            lines.push(line);
        }
        if lines.first().map(String::as_str) != Some(POLICY_HEADER) {
            return Err(Error::Config(format!("expected header {POLICY_HEADER:?}")));
        }
        let mut spec = None;
        let mut node_cap = DEFAULT_NODE_CAP;
        let mut backward_value = T::nan();
        let mut basis: Vec<Standardizer<T>> = Vec::new();
        let mut coef_rows: Vec<(usize, usize, Vec<T>)> = Vec::new();
        for line in &lines[1..] {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.first().copied() {
                Some("basis") => {
                    if toks.get(1) != Some(&QUADRATIC_BASIS) || toks.get(3).and_then(|t| t.parse().ok()) != Some(STATE_VARS) {
                        return Err(Error::Config(format!("unsupported basis line {line:?}")));
                    }
                }
                Some("spec") => spec = Some(parse_spec::<T>(line)?),
                Some("node_cap") => {
                    node_cap = toks
                        .get(1)
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Config("bad node_cap".into()))?
                }
                Some("steps") => {}
                Some("backward_value") => backward_value = parse_floats::<T>(&toks[1..2])?[0],
                Some("step") => {
                    let v = parse_floats::<T>(&toks[2..])?;
                    let k = STATE_VARS;
                    if v.len() != 4 * k {
                        return Err(Error::Config(format!("bad step line {line:?}")));
                    }
                    basis.push(Standardizer {
                        mean: v[..k].to_vec(),
                        inv_std: v[k..2 * k].to_vec(),
                        lo: v[2 * k..3 * k].to_vec(),
                        hi: v[3 * k..].to_vec(),
                    });
                }
                Some("coef") => {
                    let idx = |t: &str| t.parse::<usize>().map_err(|e| Error::Config(format!("bad index: {e}")));
                    coef_rows.push((idx(toks[1])?, idx(toks[2])?, parse_floats(&toks[3..])?));
                }
                _ => return Err(Error::Config(format!("unexpected policy line {line:?}"))),
            }
        }
        let spec = spec.ok_or_else(|| Error::Config("policy has no spec line".into()))?;
        let n = spec.grid()?.steps();
        let lattice = VolumeLattice::build(&spec, n, node_cap)?;
        if basis.len() != n {
            return Err(Error::Config(format!("policy has {} steps, contract has {n}", basis.len())));
        }
        let mut coef: Vec<Vec<Option<Vec<T>>>> = (0..n).map(|i| vec![None; lattice.nodes(i + 1).len()]).collect();
        for (i, k, c) in coef_rows {
            let slot = coef
                .get_mut(i)
                .and_then(|row| row.get_mut(k))
                .ok_or_else(|| Error::Config(format!("coefficient index ({i}, {k}) outside lattice")))?;
            if c.len() != quadratic_len(STATE_VARS) || c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("bad coefficients at ({i}, {k})")));
            }
            *slot = Some(c);
        }
        Ok(Self {
            spec,
            lattice,
            node_cap,
            basis,
            coef,
            backward_value,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2007, 4, 1).unwrap()
    }

    fn short_spec(steps: i64, cap: f64, inj: f64, with: f64) -> StorageSpec<f64> {
        StorageSpec {
            v_max: cap,
            a_inj: inj,
            a_with: with,
            end_date: start() + Duration::days(steps),
            ..StorageSpec::fast(start())
        }
    }

    fn cfg() -> ValuationConfig {
        ValuationConfig {
            min_paths: 1,
            ..ValuationConfig::default()
        }
    }

    /// Best wealth over every action sequence that ends on the target.
    fn enumerate(spec: &StorageSpec<f64>, prices: &[f64]) -> Option<f64> {
        let n = prices.len() - 1;
        let mut best: Option<f64> = None;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let mut v = spec.v_start;
            let mut w = 0.0;
            for &p in &prices[..n] {
                let a = Action::ALL[c % 3];
                c /= 3;
                w += spec.flow(p, v, a);
                v = spec.step(v, a);
            }
            if (v - spec.v_end).abs() < 1e-9 && best.is_none_or(|b| w > b) {
                best = Some(w);
            }
        }
        best
    }

    #[test]
    fn deterministic_matches_enumeration() {
        let spec = short_spec(4, 100.0, 4.0, 6.0);
        let prices = [3.0, 3.0, 5.0, 5.0, 5.0];
        let scen = MarketScenarios::deterministic(&prices, 3).unwrap();
        let pol = fit_policy_backward(&scen, &spec, &cfg()).unwrap();
        let oracle = enumerate(&spec, &prices).unwrap();
        assert!((oracle - 16.0).abs() < 1e-12);
        assert!((pol.backward_value() - oracle).abs() < 1e-9);
        let (rep, tr) = evaluate_policy_forward(&pol, &scen).unwrap();
        for (m, &w) in rep.per_path_wealth.iter().enumerate() {
            assert!((w - oracle).abs() < 1e-9);
            let replay: f64 = tr.flows(m).iter().rev().sum();
            assert_eq!(replay, w);
            assert_eq!(*tr.volumes(m).last().unwrap(), spec.v_end);
        }
    }

    #[test]
    fn flat_and_decreasing_prices_are_worthless() {
        let spec = short_spec(5, 100.0, 4.0, 6.0);
        for prices in [[4.0; 6], [9.0, 8.0, 7.0, 6.0, 5.0, 4.0]] {
            let scen = MarketScenarios::deterministic(&prices, 2).unwrap();
            let pol = fit_policy_backward(&scen, &spec, &cfg()).unwrap();
            assert!(pol.backward_value().abs() < 1e-12);
            let (rep, tr) = evaluate_policy_forward(&pol, &scen).unwrap();
            assert!(rep.per_path_wealth.iter().all(|w| w.abs() < 1e-12));
            if prices[0] > prices[5] {
                assert!(tr.actions.iter().all(|&a| a != Action::Inj));
            }
        }
    }

    #[test]
    fn grid_and_size_errors() {
        let spec = short_spec(4, 100.0, 4.0, 6.0);
        let scen = MarketScenarios::deterministic(&[3.0; 4], 3).unwrap();
        assert!(matches!(fit_policy_backward(&scen, &spec, &cfg()), Err(Error::Grid(_))));
        let scen = MarketScenarios::deterministic(&[3.0; 5], 3).unwrap();
        assert!(matches!(
            fit_policy_backward(&scen, &spec, &ValuationConfig::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn hand_computed_dip_and_peak() {
        // 10 steps, rates 1 in, 2 out, capacity 3: buy the three cheap days,
        // sell on the two expensive ones.
        let spec = short_spec(10, 3.0, 1.0, 2.0);
        let prices = [5.0, 2.0, 2.0, 2.0, 5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 5.0];
        let scen = MarketScenarios::deterministic(&prices, 1).unwrap();
        let pol = fit_policy_backward(&scen, &spec, &cfg()).unwrap();
        let expect = -3.0 * 2.0 + 9.0 * 3.0;
        assert!((pol.backward_value() - expect).abs() < 1e-9);
        let h = {
            let dates: Vec<NaiveDate> = (0..11).map(|k| start() + Duration::days(k)).collect();
            let curves = dates
                .iter()
                .zip(prices)
                .map(|(_, p)| {
                    vec![
                        (crate::calendar::Month::new(2007, 5).unwrap(), p),
                        (crate::calendar::Month::new(2007, 6).unwrap(), p),
                    ]
                })
                .collect();
            PriceHistory::new(dates, prices.to_vec(), curves).unwrap()
        };
        let (w, tr) = run_on_historical(&pol, &h, ExpiryRule::default()).unwrap();
        assert!((w - expect).abs() < 1e-9);
        assert_eq!(tr.actions(0)[1..4], [Action::Inj; 3]);
    }

    #[test]
    fn historical_gap_is_an_error() {
        let spec = short_spec(4, 100.0, 4.0, 6.0);
        let scen = MarketScenarios::deterministic(&[3.0; 5], 1).unwrap();
        let pol = fit_policy_backward(&scen, &spec, &cfg()).unwrap();
        let dates: Vec<NaiveDate> = [0, 1, 3, 4].iter().map(|&k| start() + Duration::days(k)).collect();
        let m = crate::calendar::Month::new(2007, 5).unwrap();
        let curves = vec![vec![(m, 3.0), (m.succ(), 3.0)]; 4];
        let h = PriceHistory::new(dates, vec![3.0; 4], curves).unwrap();
        assert!(matches!(run_on_historical(&pol, &h, ExpiryRule::default()), Err(Error::Gap { .. })));
    }

    #[test]
    fn unreachable_target() {
        let mut spec = short_spec(2, 100.0, 4.0, 6.0);
        spec.v_end = 50.0;
        let scen = MarketScenarios::deterministic(&[3.0; 3], 1).unwrap();
        assert!(matches!(
            fit_policy_backward(&scen, &spec, &cfg()),
            Err(Error::Infeasible { .. })
        ));
    }

    fn noisy(n_paths: usize, n_times: usize, seed: u64) -> MarketScenarios<f64> {
        use crate::rng::{normal, path_rng, Stream};
        let mut s = Vec::new();
        let mut p = Vec::new();
        for m in 0..n_paths {
            let mut rng = path_rng(seed, Stream::Spot, m);
            let mut x = 0.0f64;
            for i in 0..n_times {
                let season = 1.0 + 0.3 * (i as f64 * 0.9).sin();
                s.push(5.0 * season * x.exp());
                p.push(5.0 * season);
                x = 0.7 * x + 0.08 * normal(&mut rng);
            }
        }
        MarketScenarios::new(n_paths, n_times, s, p).unwrap()
    }

    #[test]
    fn forward_is_low_biased_and_rates_are_monotone() {
        let slow = short_spec(12, 20.0, 2.0, 3.0);
        let fast = short_spec(12, 20.0, 4.0, 6.0);
        let back = noisy(2000, 13, 1);
        let fresh = noisy(2000, 13, 2);
        let c = ValuationConfig::default();
        let ps = fit_policy_backward(&back, &slow, &c).unwrap();
        let pf = fit_policy_backward(&back, &fast, &c).unwrap();
        let (rs, _) = evaluate_policy_forward(&ps, &fresh).unwrap();
        let (rf, _) = evaluate_policy_forward(&pf, &fresh).unwrap();
        assert!(rf.extrinsic_value + 2.0 * rf.std_error() >= rs.extrinsic_value);
        assert!(rs.extrinsic_value <= ps.backward_value() + 3.0 * rs.std_error());
        assert!(rs.extrinsic_value > 0.0);
    }

    #[test]
    fn policy_round_trip() {
        let spec = short_spec(12, 20.0, 4.0, 6.0);
        let back = noisy(600, 13, 5);
        let pol = fit_policy_backward(&back, &spec, &ValuationConfig::default()).unwrap();
        let mut buf = Vec::new();
        pol.write_to(&mut buf).unwrap();
        let again = Policy::<f64>::read_from(&mut buf.as_slice()).unwrap();
        let fresh = noisy(300, 13, 6);
        let (a, _) = evaluate_policy_forward(&pol, &fresh).unwrap();
        let (b, _) = evaluate_policy_forward(&again, &fresh).unwrap();
        assert_eq!(a.per_path_wealth, b.per_path_wealth);
        let mut buf2 = Vec::new();
        again.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn fast_preset_lattice_runs() {
        let spec = StorageSpec::<f64>::fast(start());
        let n = spec.grid().unwrap().len();
        let scen = noisy(500, n, 3);
        let pol = fit_policy_backward(&scen, &spec, &ValuationConfig::default()).unwrap();
        assert!(pol.backward_value() > 0.0);
        let (rep, tr) = evaluate_policy_forward(&pol, &noisy(200, n, 4)).unwrap();
        for m in 0..200 {
            assert_eq!(*tr.volumes(m).last().unwrap(), 0.0);
            assert!(tr.volumes(m).iter().all(|&v| (0.0..=100.0).contains(&v)));
        }
        assert!(rep.extrinsic_value <= pol.backward_value() + 3.0 * rep.std_error());
    }
}
