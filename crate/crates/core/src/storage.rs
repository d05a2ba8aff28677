//! Storage facility: physical limits, volume transitions, cash flows and the
//! lattice of attainable volumes.

use chrono::{Months, NaiveDate};

use crate::calendar::TimeGrid;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Tolerance used to merge volumes produced by different action sequences.
pub const VOLUME_TOL: f64 = 1e-9;
/// Default cap on attainable volumes per step before coarsening.
pub const DEFAULT_NODE_CAP: usize = 2000;

/// Daily decision. The declaration order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    No,
    Inj,
    With,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::No, Action::Inj, Action::With];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::No => "no",
            Action::Inj => "inj",
            Action::With => "with",
        }
    }
}

/// Storage lease. Volumes in 10^6 MMBtu, rates per day.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageSpec<T> {
    pub v_min: T,
    pub v_max: T,
    pub a_inj: T,
    pub a_with: T,
    pub v_start: T,
    pub v_end: T,
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
    pub dt_days: u32,
    /// Cost per unit injected, in money per 10^6 MMBtu.
    pub cost_inj: T,
    /// Cost per unit withdrawn.
    pub cost_with: T,
}

impl<T: Real> StorageSpec<T> {
    /// Fast unit: capacity 100, injection 4/day, withdrawal 6/day, empty at
    /// both ends of a one-year lease.
    pub fn fast(start: NaiveDate) -> Self {
        Self::preset(start, 4.0, 6.0)
    }

    /// Slow unit: capacity 100, injection 0.8/day, withdrawal 1.2/day.
    pub fn slow(start: NaiveDate) -> Self {
        Self::preset(start, 0.8, 1.2)
    }

    pub fn named(name: &str, start: NaiveDate) -> Result<Self> {
        match name {
            "fast" => Ok(Self::fast(start)),
            "slow" => Ok(Self::slow(start)),
            other => Err(Error::Config(format!("unknown storage preset {other:?} (expected fast or slow)"))),
        }
    }

    fn preset(start: NaiveDate, inj: f64, with: f64) -> Self {
        Self {
            v_min: T::zero(),
            v_max: T::lit(100.0),
            a_inj: T::lit(inj),
            a_with: T::lit(with),
            v_start: T::zero(),
            v_end: T::zero(),
            start_date: start,
            end_date: start + Months::new(12),
            dt_days: 1,
            cost_inj: T::zero(),
            cost_with: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::domain(format!("storage spec: {m}")));
        if !(self.v_min <= self.v_max) {
            return bad("v_min > v_max");
        }
        if !(self.v_min <= self.v_start && self.v_start <= self.v_max) {
            return bad("v_start outside [v_min, v_max]");
        }
        if !(self.v_min <= self.v_end && self.v_end <= self.v_max) {
            return bad("v_end outside [v_min, v_max]");
        }
        if !(self.a_inj > T::zero() && self.a_with > T::zero()) {
            return bad("rates must be positive");
        }
        if self.end_date <= self.start_date {
            return bad("end_date must be after start_date");
        }
        if self.dt_days == 0 {
            return bad("dt must be positive");
        }
        if self.cost_inj < T::zero() || self.cost_with < T::zero() {
            return bad("costs must be non-negative");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid<T>> {
        TimeGrid::daily(self.start_date, self.end_date, self.dt_days)
    }

    pub fn inj_step(&self) -> T {
        self.a_inj * T::of(self.dt_days as usize)
    }

    pub fn with_step(&self) -> T {
        self.a_with * T::of(self.dt_days as usize)
    }

    fn check_volume(&self, v: T) -> Result<()> {
        let tol = T::lit(VOLUME_TOL);
        if v < self.v_min - tol || v > self.v_max + tol || v.is_nan() {
            return Err(Error::domain(format!(
                "volume {v} outside [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        Ok(())
    }

    pub fn next_volume(&self, v: T, a: Action) -> Result<T> {
        self.check_volume(v)?;
        Ok(self.step(v, a))
    }

    /// Transition without the bounds check.
    #[inline]
    pub(crate) fn step(&self, v: T, a: Action) -> T {
        match a {
            Action::No => v,
            Action::Inj => (v + self.inj_step()).min(self.v_max),
            Action::With => (v - self.with_step()).max(self.v_min),
        }
    }

    /// `S (v - v')` less any per-unit costs: injecting pays, withdrawing earns.
    pub fn cash_flow(&self, spot: T, v: T, a: Action) -> Result<T> {
        self.check_volume(v)?;
        Ok(self.flow(spot, v, a))
    }

    #[inline]
    pub(crate) fn flow(&self, spot: T, v: T, a: Action) -> T {
        let next = self.step(v, a);
        let moved = next - v;
        let cost = if moved > T::zero() {
            self.cost_inj * moved
        } else {
            self.cost_with * (-moved)
        };
        spot * (v - next) - cost
    }

    /// The set of volumes reachable after `i` steps, sorted.
    pub fn attainable_volumes(&self, i: usize) -> Vec<T> {
        let mut set = vec![self.v_start];
        for _ in 0..i {
            set = expand(self, &set);
        }
        set
    }
}

fn dedup_sorted<T: Real>(mut vs: Vec<T>) -> Vec<T> {
    vs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let tol = T::lit(VOLUME_TOL);
    let mut out: Vec<T> = Vec::with_capacity(vs.len());
    for v in vs {
        match out.last() {
            Some(&last) if (v - last).abs() <= tol => {}
            _ => out.push(v),
        }
    }
    out
}

fn expand<T: Real>(s: &StorageSpec<T>, set: &[T]) -> Vec<T> {
    let next: Vec<T> = set
        .iter()
        .flat_map(|&v| Action::ALL.iter().map(move |&a| s.step(v, a)))
        .collect();
    dedup_sorted(next)
}

/// Index of the node closest to `v` in a sorted node list.
pub fn nearest_node<T: Real>(nodes: &[T], v: T) -> usize {
    let p = nodes.partition_point(|&x| x < v);
    if p == 0 {
        0
    } else if p == nodes.len() {
        nodes.len() - 1
    } else if (v - nodes[p - 1]) <= (nodes[p] - v) {
        p - 1
    } else {
        p
    }
}

/// Attainable volumes for every step of the lease, the transitions between
/// them and whether the terminal target can still be met from each node.
#[derive(Debug, Clone)]
pub struct VolumeLattice<T> {
    nodes: Vec<Vec<T>>,
    /// `next[i][l][a]`: node index at step `i + 1` reached from node `l` at step `i`.
    next: Vec<Vec<[usize; 3]>>,
    feasible: Vec<Vec<bool>>,
    coarsened: bool,
}

impl<T: Real> VolumeLattice<T> {
    pub fn build(s: &StorageSpec<T>, steps: usize, node_cap: usize) -> Result<Self> {
        s.validate()?;
        if node_cap < 2 {
            return Err(Error::domain("node cap must be at least 2"));
        }
        let mut nodes = Vec::with_capacity(steps + 1);
        let mut coarsened = false;
        nodes.push(vec![s.v_start]);
        for i in 0..steps {
            let mut set = expand(s, &nodes[i]);
            if set.len() > node_cap {
                coarsened = true;
                let (lo, hi) = (set[0], set[set.len() - 1]);
                let delta = (hi - lo) / T::of(node_cap - 1);
                set = (0..node_cap).map(|k| lo + delta * T::of(k)).collect();
            }
            nodes.push(set);
        }
        if coarsened {
            log::info!("volume lattice coarsened to at most {node_cap} nodes per step");
        }
        let next: Vec<Vec<[usize; 3]>> = (0..steps)
            .map(|i| {
                nodes[i]
                    .iter()
                    .map(|&v| Action::ALL.map(|a| nearest_node(&nodes[i + 1], s.step(v, a))))
                    .collect()
            })
            .collect();
        let mut feasible: Vec<Vec<bool>> = nodes.iter().map(|n| vec![false; n.len()]).collect();
        let tol = if coarsened {
            let last = &nodes[steps];
            let spacing = if last.len() > 1 { last[1] - last[0] } else { T::zero() };
            spacing * T::half() + T::lit(VOLUME_TOL)
        } else {
            T::lit(VOLUME_TOL)
        };
        for (f, &v) in feasible[steps].iter_mut().zip(&nodes[steps]) {
            *f = (v - s.v_end).abs() <= tol;
        }
        for i in (0..steps).rev() {
            for l in 0..nodes[i].len() {
                feasible[i][l] = next[i][l].iter().any(|&k| feasible[i + 1][k]);
            }
        }
        Ok(Self {
            nodes,
            next,
            feasible,
            coarsened,
        })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self, i: usize) -> &[T] {
        &self.nodes[i]
    }

    pub fn next(&self, i: usize, l: usize, a: Action) -> usize {
        self.next[i][l][a.index()]
    }

    pub fn is_feasible(&self, i: usize, l: usize) -> bool {
        self.feasible[i][l]
    }

    pub fn coarsened(&self) -> bool {
        self.coarsened
    }

    pub fn max_nodes(&self) -> usize {
        self.nodes.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> NaiveDate {
        NaiveDate::from_ymd_opt(2007, 4, 1).unwrap()
    }

    #[test]
    fn presets() {
        let f = StorageSpec::<f64>::fast(start());
        assert_eq!(f.end_date, NaiveDate::from_ymd_opt(2008, 4, 1).unwrap());
        assert!(f.validate().is_ok());
        let s = StorageSpec::<f64>::slow(start());
        assert_eq!((s.a_inj, s.a_with), (0.8, 1.2));
        assert!(StorageSpec::<f64>::named("medium", start()).is_err());
    }

    #[test]
    fn transitions_clamp() {
        let f = StorageSpec::<f64>::fast(start());
        assert_eq!(f.next_volume(0.0, Action::Inj).unwrap(), 4.0);
        assert_eq!(f.next_volume(100.0, Action::Inj).unwrap(), 100.0);
        assert_eq!(f.next_volume(0.0, Action::With).unwrap(), 0.0);
        assert_eq!(f.next_volume(50.0, Action::No).unwrap(), 50.0);
        assert!(f.next_volume(101.0, Action::No).is_err());
    }

    #[test]
    fn cash_flows() {
        let f = StorageSpec::<f64>::fast(start());
        assert_eq!(f.cash_flow(5.0, 0.0, Action::Inj).unwrap(), -20.0);
        assert_eq!(f.cash_flow(5.0, 100.0, Action::With).unwrap(), 30.0);
        assert_eq!(f.cash_flow(7.3, 42.0, Action::No).unwrap(), 0.0);
        let mut costly = f.clone();
        costly.cost_inj = 0.1;
        assert!((costly.cash_flow(5.0, 0.0, Action::Inj).unwrap() + 20.4).abs() < 1e-12);
    }

    #[test]
    fn attainable_small_steps() {
        let f = StorageSpec::<f64>::fast(start());
        assert_eq!(f.attainable_volumes(0), vec![0.0]);
        assert_eq!(f.attainable_volumes(1), vec![0.0, 4.0]);
        assert_eq!(f.attainable_volumes(2), vec![0.0, 4.0, 8.0]);
    }

    #[test]
    fn lattice_sizes_for_presets() {
        let f = StorageSpec::<f64>::fast(start());
        let lat = VolumeLattice::build(&f, 366, DEFAULT_NODE_CAP).unwrap();
        // multiples of gcd(4, 6) = 2 in [0, 100]
        assert_eq!(lat.max_nodes(), 51);
        assert!(!lat.coarsened());
        assert!(lat.is_feasible(0, 0));
        let s = StorageSpec::<f64>::slow(start());
        let lat = VolumeLattice::build(&s, 366, DEFAULT_NODE_CAP).unwrap();
        assert_eq!(lat.max_nodes(), 251);
    }

    #[test]
    fn terminal_pruning() {
        let mut f = StorageSpec::<f64>::fast(start());
        f.end_date = start() + chrono::Duration::days(3);
        let lat = VolumeLattice::build(&f, 3, DEFAULT_NODE_CAP).unwrap();
        // step 2 nodes {0,4,8}: 8 cannot be emptied in one withdrawal of 6
        assert_eq!(lat.nodes(2), &[0.0, 4.0, 8.0]);
        assert_eq!(
            (0..3).map(|l| lat.is_feasible(2, l)).collect::<Vec<_>>(),
            vec![true, true, false]
        );
    }

    #[test]
    fn coarsening_caps_nodes() {
        let mut s = StorageSpec::<f64>::fast(start());
        s.a_inj = 0.37;
        s.a_with = 0.53;
        let lat = VolumeLattice::build(&s, 200, 50).unwrap();
        assert!(lat.coarsened());
        assert!(lat.max_nodes() <= 50);
        assert!(lat.is_feasible(0, 0));
    }

    #[test]
    fn f32_spec() {
        let f = StorageSpec::<f32>::fast(start());
        assert_eq!(f.attainable_volumes(2), vec![0.0f32, 4.0, 8.0]);
    }
}
