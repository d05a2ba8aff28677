//! Futures-only valuation: the static intrinsic linear program and the
//! rolling intrinsic recursion.

use std::collections::BTreeMap;

use chrono::NaiveDate;

use crate::calendar::{ExpiryRule, Month};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::storage::StorageSpec;

const LP_TOL: f64 = 1e-9;

/// `max c·x` subject to `A x = b`, `lower <= x <= upper`, all bounds finite.
#[derive(Debug, Clone)]
pub struct BoundedLp<T> {
    pub c: Vec<T>,
    /// Row-major constraint rows.
    pub a: Vec<Vec<T>>,
    pub b: Vec<T>,
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome<T> {
    Optimal { x: Vec<T>, value: T },
    Infeasible,
}

struct Tableau<T> {
    /// `B^{-1} A`, m x n.
    t: Vec<Vec<T>>,
    basis: Vec<usize>,
    x: Vec<T>,
    lower: Vec<T>,
    upper: Vec<T>,
}

impl<T: Real> Tableau<T> {
    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.t[r][col];
        for v in self.t[r].iter_mut() {
            *v /= p;
        }
        let row = self.t[r].clone();
        for (i, ti) in self.t.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = ti[col];
            if f != T::zero() {
                for (v, &rv) in ti.iter_mut().zip(&row) {
                    *v -= f * rv;
                }
            }
        }
        self.basis[r] = col;
    }

    /// Primal bounded simplex with Bland's rule; maximizes `c·x`.
    fn optimize(&mut self, c: &[T]) -> Result<()> {
        let tol = T::lit(LP_TOL);
        let n = c.len();
        let max_iter = 50 * (n + self.t.len()) + 1000;
        for _ in 0..max_iter {
            let in_basis: Vec<bool> = {
                let mut v = vec![false; n];
                for &j in &self.basis {
                    v[j] = true;
                }
                v
            };
            // reduced costs
            let mut entering = None;
            for j in 0..n {
                if in_basis[j] || self.upper[j] - self.lower[j] <= tol {
                    continue;
                }
                let d = c[j]
                    - self
                        .basis
                        .iter()
                        .zip(&self.t)
                        .map(|(&bi, row)| c[bi] * row[j])
                        .sum::<T>();
                let at_lower = self.x[j] <= self.lower[j] + tol;
                let at_upper = self.x[j] >= self.upper[j] - tol;
                if d > tol && !at_upper {
                    entering = Some((j, T::one()));
                    break;
                }
                if d < -tol && !at_lower {
                    entering = Some((j, -T::one()));
                    break;
                }
            }
            let Some((j, dir)) = entering else { return Ok(()) };
            // ratio test
            let mut step = self.upper[j] - self.lower[j];
            let mut leave: Option<(usize, T)> = None;
            for (r, row) in self.t.iter().enumerate() {
                let rate = -dir * row[j];
                if rate.abs() <= tol {
                    continue;
                }
                let bi = self.basis[r];
                let (room, bound) = if rate < T::zero() {
                    ((self.x[bi] - self.lower[bi]) / -rate, self.lower[bi])
                } else {
                    ((self.upper[bi] - self.x[bi]) / rate, self.upper[bi])
                };
                let room = room.max(T::zero());
                let better = match leave {
                    None => room < step || (room <= step && room < step + tol),
                    Some((lr, _)) => room < step - tol || (room <= step + tol && bi < self.basis[lr]),
                };
                if better && room <= step + tol {
                    step = room.min(step);
                    leave = Some((r, bound));
                }
            }
            if !step.is_finite() {
                return Err(Error::domain("linear program is unbounded"));
            }
            for (r, row) in self.t.iter().enumerate() {
                let bi = self.basis[r];
                self.x[bi] -= dir * row[j] * step;
            }
            self.x[j] += dir * step;
            if let Some((r, bound)) = leave {
                let out = self.basis[r];
                self.x[out] = bound;
                self.pivot(r, j);
            }
        }
        Err(Error::Convergence {
            iterations: max_iter,
            best_value: f64::NAN,
            best: Vec::new(),
        })
    }
}

impl<T: Real> BoundedLp<T> {
    /// Two-phase solve: artificial variables absorb the initial residual,
    /// are driven to zero, then pinned at zero for the second phase.
    pub fn solve(&self) -> Result<LpOutcome<T>> {
        let m = self.a.len();
        let n = self.c.len();
        let tol = T::lit(LP_TOL);
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::domain("LP bounds must be finite with lower <= upper"));
        }
        let mut x: Vec<T> = self.lower.clone();
        let mut t = Vec::with_capacity(m);
        let mut lower = self.lower.clone();
        let mut upper = self.upper.clone();
        for (i, row) in self.a.iter().enumerate() {
            let resid = self.b[i] - row.iter().zip(&x).map(|(&a, &v)| a * v).sum::<T>();
            let sign = if resid < T::zero() { -T::one() } else { T::one() };
            let mut r: Vec<T> = row.iter().map(|&a| a * sign).collect();
            r.extend((0..m).map(|k| if k == i { T::one() } else { T::zero() }));
            t.push(r);
            x.push(resid.abs());
            lower.push(T::zero());
            upper.push(resid.abs());
        }
        let mut tab = Tableau {
            t,
            basis: (n..n + m).collect(),
            x,
            lower,
            upper,
        };
        let phase1: Vec<T> = (0..n + m).map(|j| if j < n { T::zero() } else { -T::one() }).collect();
        tab.optimize(&phase1)?;
        let infeas: T = tab.x[n..].iter().copied().sum();
        let scale = self.b.iter().fold(T::one(), |a, &v| a.max(v.abs()));
        if infeas > T::lit(1e-7) * scale {
            return Ok(LpOutcome::Infeasible);
        }
        for k in n..n + m {
            tab.upper[k] = T::zero();
            tab.x[k] = tab.x[k].max(T::zero()).min(T::zero());
        }
        let mut phase2 = self.c.clone();
        phase2.extend(std::iter::repeat_n(T::zero(), m));
        tab.optimize(&phase2)?;
        let mut sol: Vec<T> = tab.x[..n].to_vec();
        for (v, (&l, &u)) in sol.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.max(l).min(u);
            if (*v - l).abs() <= tol {
                *v = l;
            } else if (*v - u).abs() <= tol {
                *v = u;
            }
        }
        let value = self.c.iter().zip(&sol).map(|(&c, &v)| c * v).sum();
        Ok(LpOutcome::Optimal { x: sol, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    RateLower(usize),
    RateUpper(usize),
    /// Cumulative volume at the minimum after the first `n + 1` months.
    VolumeMin(usize),
    VolumeMax(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicSolution<T> {
    pub value: T,
    /// Signed volumes per delivery month, positive for purchases.
    pub positions: Vec<(Month, T)>,
    pub binding: Vec<Binding>,
}

/// Rate bounds `[-a_with ΔT_j, a_inj ΔT_j]` where `ΔT_j` counts the
/// delivery days of month `j` inside the lease.
pub fn position_bounds<T: Real>(months: &[Month], spec: &StorageSpec<T>) -> Vec<(T, T)> {
    months
        .iter()
        .map(|&m| {
            let from = m.first_day().max(spec.start_date);
            let to = m.succ().first_day().min(spec.end_date);
            let days = T::of((to - from).num_days().max(0) as usize);
            (-spec.a_with * days, spec.a_inj * days)
        })
        .collect()
}

/// Maturities live on `date` whose delivery month starts before the lease ends.
pub fn window_curve<T: Real>(
    curve: &[(Month, T)],
    rule: ExpiryRule,
    date: NaiveDate,
    spec: &StorageSpec<T>,
) -> Vec<(Month, T)> {
    curve
        .iter()
        .copied()
        .filter(|&(m, _)| rule.is_live(m, date) && m.first_day() < spec.end_date)
        .collect()
}

/// Interval propagation: the first prefix after which the end volume can no
/// longer be met, if any.
fn first_infeasible_prefix<T: Real>(bounds: &[(T, T)], v0: T, spec: &StorageSpec<T>) -> Option<usize> {
    let tol = T::lit(LP_TOL);
    let n = bounds.len();
    // volumes at prefix k from which the end volume is reachable
    let mut need = vec![(spec.v_end, spec.v_end); n + 1];
    for k in (0..n).rev() {
        let (lo, hi) = need[k + 1];
        let (dl, du) = bounds[k];
        need[k] = ((lo - du).max(spec.v_min), (hi - dl).min(spec.v_max));
    }
    let (mut lo, mut hi) = (v0, v0);
    for k in 0..=n {
        if lo > need[k].1 + tol || hi < need[k].0 - tol {
            return Some(k);
        }
        if k < n {
            lo = (lo + bounds[k].0).max(spec.v_min);
            hi = (hi + bounds[k].1).min(spec.v_max);
        }
    }
    None
}

/// Solves the static problem for the given curve from volume `v_current`,
/// with the final volume pinned to `spec.v_end`.
pub fn intrinsic_value<T: Real>(curve: &[(Month, T)], v_current: T, spec: &StorageSpec<T>) -> Result<IntrinsicSolution<T>> {
    spec.validate()?;
    let tol = T::lit(LP_TOL);
    if v_current < spec.v_min - tol || v_current > spec.v_max + tol {
        return Err(Error::domain(format!("volume {v_current} outside capacity")));
    }
    if curve.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::domain("curve maturities must be strictly increasing"));
    }
    if curve.iter().any(|&(_, f)| !(f > T::zero())) {
        return Err(Error::domain("futures prices must be positive"));
    }
    let months: Vec<Month> = curve.iter().map(|&(m, _)| m).collect();
    let n = months.len();
    let bounds = position_bounds(&months, spec);
    if let Some(k) = first_infeasible_prefix(&bounds, v_current, spec) {
        return Err(Error::Infeasible {
            prefix: k,
            message: format!(
                "end volume {} unreachable from {} after {} of {} delivery months",
                spec.v_end, v_current, k, n
            ),
        });
    }
    if n == 0 {
        return Ok(IntrinsicSolution {
            value: T::zero(),
            positions: Vec::new(),
            binding: Vec::new(),
        });
    }
    // variables: α_1..α_n, then prefix sums s_1..s_n with s_k - Σ_{j<=k} α_j = 0
    let mut c: Vec<T> = curve.iter().map(|&(_, f)| -f).collect();
    c.extend(std::iter::repeat_n(T::zero(), n));
    let mut lower: Vec<T> = bounds.iter().map(|b| b.0).collect();
    let mut upper: Vec<T> = bounds.iter().map(|b| b.1).collect();
    for k in 0..n {
        if k + 1 == n {
            lower.push(spec.v_end - v_current);
            upper.push(spec.v_end - v_current);
        } else {
            lower.push(spec.v_min - v_current);
            upper.push(spec.v_max - v_current);
        }
    }
    let a: Vec<Vec<T>> = (0..n)
        .map(|k| {
            let mut row = vec![T::zero(); 2 * n];
            for r in row.iter_mut().take(k + 1) {
                *r = -T::one();
            }
            row[n + k] = T::one();
            row
        })
        .collect();
    let lp = BoundedLp {
        c,
        a,
        b: vec![T::zero(); n],
        lower,
        upper,
    };
    let (x, value) = match lp.solve()? {
        LpOutcome::Optimal { x, value } => (x, value),
        LpOutcome::Infeasible => {
            return Err(Error::Infeasible {
                prefix: n,
                message: "intrinsic program infeasible".into(),
            })
        }
    };
    let alpha = &x[..n];
    let mut binding = Vec::new();
    let mut cum = v_current;
    for k in 0..n {
        if (alpha[k] - bounds[k].0).abs() <= tol && bounds[k].0 != T::zero() {
            binding.push(Binding::RateLower(k));
        }
        if (alpha[k] - bounds[k].1).abs() <= tol && bounds[k].1 != T::zero() {
            binding.push(Binding::RateUpper(k));
        }
        cum += alpha[k];
        if (cum - spec.v_min).abs() <= tol {
            binding.push(Binding::VolumeMin(k));
        }
        if (cum - spec.v_max).abs() <= tol {
            binding.push(Binding::VolumeMax(k));
        }
    }
    Ok(IntrinsicSolution {
        value,
        positions: months.iter().copied().zip(alpha.iter().copied()).collect(),
        binding,
    })
}

#[derive(Debug, Clone)]
pub struct RollingIntrinsic<T> {
    pub dates: Vec<NaiveDate>,
    /// Rolling intrinsic value after each date.
    pub ri: Vec<T>,
    /// Static intrinsic value re-solved on each date.
    pub iv: Vec<T>,
    /// Positions held after the last date, including delivered months.
    pub positions: Vec<(Month, T)>,
    pub rebalances: usize,
}

impl<T: Real> RollingIntrinsic<T> {
    pub fn final_value(&self) -> T {
        *self.ri.last().expect("at least two dates")
    }
}

/// Re-solves the program on each curve date and switches to the new
/// positions whenever that gains more than the tolerance at current prices.
pub fn rolling_intrinsic<T: Real>(
    series: &[(NaiveDate, Vec<(Month, T)>)],
    spec: &StorageSpec<T>,
    rule: ExpiryRule,
) -> Result<RollingIntrinsic<T>> {
    if series.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: series.len(),
        });
    }
    let tol = T::lit(LP_TOL);
    let mut held: BTreeMap<Month, T> = BTreeMap::new();
    let mut out = RollingIntrinsic {
        dates: Vec::with_capacity(series.len()),
        ri: Vec::with_capacity(series.len()),
        iv: Vec::with_capacity(series.len()),
        positions: Vec::new(),
        rebalances: 0,
    };
    for (k, (date, curve)) in series.iter().enumerate() {
        let live = window_curve(curve, rule, *date, spec);
        let delivered: T = held
            .iter()
            .filter(|(m, _)| !live.iter().any(|(lm, _)| lm == *m))
            .map(|(_, &a)| a)
            .sum();
        for (m, &a) in &held {
            if a != T::zero() && rule.is_live(*m, *date) && !live.iter().any(|(lm, _)| lm == m) {
                return Err(Error::InsufficientCurve {
                    date: *date,
                    message: format!("held maturity {m} missing from the curve"),
                });
            }
        }
        let v_now = spec.v_start + delivered;
        let sol = intrinsic_value(&live, v_now, spec)?;
        if k == 0 {
            out.ri.push(sol.value);
            for &(m, a) in &sol.positions {
                held.insert(m, a);
            }
        } else {
            let gain: T = live
                .iter()
                .zip(&sol.positions)
                .map(|(&(m, f), &(_, new))| (held.get(&m).copied().unwrap_or(T::zero()) - new) * f)
                .sum();
            let prev = *out.ri.last().expect("pushed on first date");
            if gain > tol {
                out.rebalances += 1;
                for &(m, a) in &sol.positions {
                    held.insert(m, a);
                }
                out.ri.push(prev + gain);
            } else {
                out.ri.push(prev);
            }
        }
        out.iv.push(sol.value);
        out.dates.push(*date);
    }
    out.positions = held.into_iter().collect();
    Ok(out)
}
