//! Seasonal two-factor futures-curve model: simulation, rough moment
//! estimates and maximum-likelihood calibration.

use chrono::NaiveDate;
use rayon::prelude::*;

use crate::calendar::{year_fraction, years_between, ExpiryRule, Month, TimeGrid};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, ThinQr};
use crate::market_data::PriceHistory;
use crate::optimize::{hessian, nelder_mead_whitened, Bounds, NelderMeadOptions};
use crate::rng::{normal, path_rng, Stream};
use crate::scalar::{mean, Real};

/// `dF/F = e^{-λ(T-t)} φ(t) σ_S dW^S + (1 - e^{-λ(T-t)}) σ_L dW^L`, with
/// `d<W^S, W^L> = ρ dt` and `φ(t) = 1 + μ1 cos 2π(t - t1) + μ2 cos 4π(t - t2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GabillonParams<T> {
    pub lambda: T,
    pub mu1: T,
    pub mu2: T,
    /// Winter anchor as a year fraction (0 = 1 January).
    pub t1: T,
    /// Summer anchor as a year fraction.
    pub t2: T,
    pub sigma_s: T,
    pub sigma_l: T,
    pub rho: T,
}

pub const RHO_BOUND: f64 = 0.999;

impl<T: Real> GabillonParams<T> {
    /// Estimates fitted on 1997-2007 NYMEX curves.
    pub fn reference() -> Self {
        Self {
            lambda: T::lit(0.7896),
            mu1: T::lit(0.0246),
            mu2: T::lit(0.0038),
            t1: T::zero(),
            t2: T::lit(7.0 / 12.0),
            sigma_s: T::lit(0.4580),
            sigma_l: T::lit(0.1655),
            rho: T::lit(0.4113),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::domain(format!("futures parameters: {m}")));
        if !(self.sigma_s > T::zero()) || !(self.sigma_l > T::zero()) {
            return bad("volatilities must be positive".into());
        }
        if !(self.lambda > T::zero()) {
            return bad("lambda must be positive".into());
        }
        if !(self.rho.abs() <= T::one()) {
            return bad(format!("rho {} outside [-1, 1]", self.rho));
        }
        if let Some(t) = (0..1000)
            .map(|k| T::of(k) / T::lit(1000.0))
            .find(|&t| !(self.seasonal_vol(t) > T::zero()))
        {
            return bad(format!("seasonal weight not positive at t = {t}"));
        }
        Ok(())
    }

    pub fn seasonal_vol(&self, t: T) -> T {
        let two_pi = T::two() * T::PI();
        T::one() + self.mu1 * (two_pi * (t - self.t1)).cos() + self.mu2 * (T::two() * two_pi * (t - self.t2)).cos()
    }

    /// Short and long factor loadings for time `t` and time to maturity `tau`.
    #[inline]
    pub fn loadings(&self, t: T, tau: T) -> (T, T) {
        let e = (-self.lambda * tau).exp();
        (e * self.seasonal_vol(t) * self.sigma_s, (T::one() - e) * self.sigma_l)
    }

    /// Instantaneous variance of `dF/F` implied by the loadings.
    #[inline]
    pub fn variance(&self, a: T, b: T) -> T {
        a * a + b * b + T::two() * self.rho * a * b
    }
}

pub fn seasonal_vol<T: Real>(t: T, p: &GabillonParams<T>) -> T {
    p.seasonal_vol(t)
}

/// Simulated futures curves, stored path-major as `[path][time][maturity]`.
#[derive(Debug, Clone)]
pub struct CurvePathSet<T> {
    dates: Vec<NaiveDate>,
    times: Vec<T>,
    maturities: Vec<Month>,
    expiries: Vec<NaiveDate>,
    n_paths: usize,
    data: Vec<T>,
    seed: u64,
}

impl<T: Real> CurvePathSet<T> {
    /// Wraps externally produced curves. `data` is `[path][time][maturity]`.
    pub fn from_parts(
        grid: &TimeGrid<T>,
        maturities: Vec<Month>,
        rule: ExpiryRule,
        n_paths: usize,
        data: Vec<T>,
        seed: u64,
    ) -> Result<Self> {
        if data.len() != n_paths * grid.len() * maturities.len() {
            return Err(Error::Grid(format!(
                "curve data has {} values, expected {} paths x {} dates x {} maturities",
                data.len(),
                n_paths,
                grid.len(),
                maturities.len()
            )));
        }
        if data.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::domain("curve prices must be positive"));
        }
        Ok(Self {
            dates: grid.dates().to_vec(),
            times: grid.times().to_vec(),
            expiries: maturities.iter().map(|&m| rule.expiry(m)).collect(),
            maturities,
            n_paths,
            data,
            seed,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.dates.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn maturities(&self) -> &[Month] {
        &self.maturities
    }

    pub fn expiries(&self) -> &[NaiveDate] {
        &self.expiries
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn price(&self, path: usize, time: usize, maturity: usize) -> T {
        let nm = self.maturities.len();
        self.data[(path * self.dates.len() + time) * nm + maturity]
    }

    /// Curve of one path at one time.
    pub fn curve(&self, path: usize, time: usize) -> &[T] {
        let nm = self.maturities.len();
        let start = (path * self.dates.len() + time) * nm;
        &self.data[start..start + nm]
    }

    pub fn is_live(&self, time: usize, maturity: usize) -> bool {
        self.dates[time] < self.expiries[maturity]
    }

    /// Index of the `k`-th live maturity on a grid date (0 = prompt, 1 = back).
    pub fn live_index(&self, time: usize, k: usize) -> Option<usize> {
        (0..self.maturities.len())
            .filter(|&j| self.is_live(time, j))
            .nth(k)
    }

    /// Prompt and back maturity indices for every grid date.
    pub fn prompt_back(&self) -> Result<Vec<(usize, usize)>> {
        (0..self.n_times())
            .map(|i| match (self.live_index(i, 0), self.live_index(i, 1)) {
                (Some(p), Some(b)) => Ok((p, b)),
                _ => Err(Error::InsufficientCurve {
                    date: self.dates[i],
                    message: "simulated curve has fewer than two live maturities".into(),
                }),
            })
            .collect()
    }
}

/// Initial curve entries whose contracts are live on the first grid date,
/// plus every later maturity needed to keep a back contract until the end.
pub fn curve_for_window<T: Real>(
    curve: &[(Month, T)],
    rule: ExpiryRule,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<Vec<(Month, T)>> {
    let live: Vec<(Month, T)> = curve
        .iter()
        .copied()
        .filter(|&(m, _)| rule.is_live(m, start))
        .collect();
    let needed = live.iter().filter(|&&(m, _)| !rule.is_live(m, end)).count() + 2;
    if live.len() < needed {
        return Err(Error::InsufficientCurve {
            date: start,
            message: format!(
                "{} live maturities, {} needed to keep prompt and back until {end}",
                live.len(),
                needed
            ),
        });
    }
    Ok(live[..needed].to_vec())
}

/// Log-Euler simulation with the exact per-step variance, so each contract
/// is a martingale. Contracts stop moving once expired.
pub fn simulate_curves<T: Real>(
    p: &GabillonParams<T>,
    initial: &[(Month, T)],
    rule: ExpiryRule,
    grid: &TimeGrid<T>,
    n_paths: usize,
    seed: u64,
) -> Result<CurvePathSet<T>> {
    p.validate()?;
    if n_paths == 0 {
        return Err(Error::domain("need at least one path"));
    }
    if let Some((m, f)) = initial.iter().find(|(_, f)| !(*f > T::zero())) {
        return Err(Error::domain(format!("initial price {f} for {m} is not positive")));
    }
    let nm = initial.len();
    let nt = grid.len();
    let dates = grid.dates();
    let expiries: Vec<NaiveDate> = initial.iter().map(|&(m, _)| rule.expiry(m)).collect();

    // Per step: (sqrt dt, phase time) and per maturity (a, b, drift) or None if frozen.
    let mut coefs: Vec<Vec<Option<(T, T, T)>>> = Vec::with_capacity(nt.saturating_sub(1));
    for i in 0..nt.saturating_sub(1) {
        let dt: T = years_between(dates[i], dates[i + 1]);
        let sq = dt.sqrt();
        let t = grid.times()[i];
        coefs.push(
            expiries
                .iter()
                .map(|&e| {
                    if dates[i + 1] < e {
                        let tau: T = years_between(dates[i], e);
                        let (a, b) = p.loadings(t, tau);
                        let drift = -T::half() * p.variance(a, b) * dt;
                        Some((a * sq, b * sq, drift))
                    } else {
                        None
                    }
                })
                .collect(),
        );
    }

    let rho = p.rho;
    let rho_c = (T::one() - rho * rho).max(T::zero()).sqrt();
    let mut data = vec![T::zero(); n_paths * nt * nm];
    data.par_chunks_mut(nt * nm).enumerate().for_each(|(m, path)| {
        let mut rng = path_rng(seed, Stream::Curve, m);
        for (j, &(_, f0)) in initial.iter().enumerate() {
            path[j] = f0;
        }
        for (i, step) in coefs.iter().enumerate() {
            let z1 = T::lit(normal(&mut rng));
            let z2 = T::lit(normal(&mut rng));
            let zs = z1;
            let zl = rho * z1 + rho_c * z2;
            let (prev, next) = path[i * nm..(i + 2) * nm].split_at_mut(nm);
            for j in 0..nm {
                next[j] = match step[j] {
                    Some((a, b, drift)) => prev[j] * (drift + a * zs + b * zl).exp(),
                    None => prev[j],
                };
            }
        }
    });
    Ok(CurvePathSet {
        dates: dates.to_vec(),
        times: grid.times().to_vec(),
        maturities: initial.iter().map(|&(m, _)| m).collect(),
        expiries,
        n_paths,
        data,
        seed,
    })
}

/// Starting values for the volatility parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoughEstimates<T> {
    pub sigma_s: T,
    pub sigma_l: T,
    /// Undefined when either return series has zero variance.
    pub rho: Option<T>,
    pub n_obs: usize,
}

pub const MIN_ROUGH_OBS: usize = 60;

/// Moment estimates from paired prompt and long-dated log-returns, each
/// normalized by the square root of its step length.
pub fn rough_from_returns<T: Real>(z_prompt: &[T], z_long: &[T], dt: &[T]) -> RoughEstimates<T> {
    let np: Vec<T> = z_prompt.iter().zip(dt).map(|(&z, &d)| z / d.sqrt()).collect();
    let nl: Vec<T> = z_long.iter().zip(dt).map(|(&z, &d)| z / d.sqrt()).collect();
    let m = np.len();
    let (mp, ml) = (mean(&np), mean(&nl));
    let denom = T::of(m.saturating_sub(1).max(1));
    let var_p = np.iter().map(|&x| (x - mp) * (x - mp)).sum::<T>() / denom;
    let var_l = nl.iter().map(|&x| (x - ml) * (x - ml)).sum::<T>() / denom;
    let cov = np
        .iter()
        .zip(&nl)
        .map(|(&a, &b)| (a - mp) * (b - ml))
        .sum::<T>()
        / denom;
    let (sigma_s, sigma_l) = (var_p.sqrt(), var_l.sqrt());
    let scale = sigma_s * sigma_l;
    let rho = if scale > T::lit(1e-300) && scale.is_finite() {
        Some((cov / scale).max(-T::one()).min(T::one()))
    } else {
        None
    };
    RoughEstimates {
        sigma_s,
        sigma_l,
        rho,
        n_obs: m,
    }
}

/// Rough estimates from a history: prompt returns and returns of the contract
/// whose time to expiry is closest to `long_horizon` years. Each return is
/// taken on one contract between consecutive dates.
pub fn rough_estimates<T: Real>(
    h: &PriceHistory<T>,
    rule: ExpiryRule,
    long_horizon: T,
) -> Result<RoughEstimates<T>> {
    let dates = h.dates();
    let (mut zp, mut zl, mut dts) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..h.len().saturating_sub(1) {
        let (d0, d1) = (dates[i], dates[i + 1]);
        let live: Vec<(Month, T)> = h.curves()[i]
            .iter()
            .copied()
            .filter(|&(m, _)| rule.is_live(m, d0))
            .collect();
        let Some(&(pm, p0)) = live.first() else {
            return Err(Error::InsufficientCurve {
                date: d0,
                message: "no live contract".into(),
            });
        };
        let tau = |m: Month| -> T { years_between(d0, rule.expiry(m)) };
        let longest = live.iter().map(|&(m, _)| tau(m)).fold(T::zero(), T::max);
        if longest < long_horizon * T::half() {
            return Err(Error::InsufficientCurve {
                date: d0,
                message: format!(
                    "longest maturity is {:.2}y, need a contract near {:.2}y",
                    longest.f64(),
                    long_horizon.f64()
                ),
            });
        }
        let &(lm, l0) = live
            .iter()
            .min_by(|a, b| {
                (tau(a.0) - long_horizon)
                    .abs()
                    .partial_cmp(&(tau(b.0) - long_horizon).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("non-empty");
        if !rule.is_live(pm, d1) || !rule.is_live(lm, d1) {
            continue;
        }
        let (Some(p1), Some(l1)) = (h.price(i + 1, pm), h.price(i + 1, lm)) else {
            continue;
        };
        zp.push((p1 / p0).ln());
        zl.push((l1 / l0).ln());
        dts.push(years_between(d0, d1));
    }
    if zp.len() < MIN_ROUGH_OBS {
        return Err(Error::InsufficientData {
            needed: MIN_ROUGH_OBS,
            got: zp.len(),
        });
    }
    Ok(rough_from_returns(&zp, &zl, &dts))
}

/// Least-squares factor innovations `x = (H^T H)^{-1} H^T z`, with `H` given
/// by its two columns.
pub fn invert_factors<T: Real>(z: &[T], h_short: &[T], h_long: &[T]) -> Result<[T; 2]> {
    let n = z.len();
    if n < 2 || h_short.len() != n || h_long.len() != n {
        return Err(Error::domain("invert_factors needs n >= 2 and matching lengths"));
    }
    let qr = ThinQr::factor(&[h_short.to_vec(), h_long.to_vec()], T::lit(1e-10))
        .ok_or_else(|| Error::Singular("loading matrix is rank deficient".into()))?;
    let x = qr.solve(z);
    Ok([x[0], x[1]])
}

/// One daily curve return used by the likelihood.
#[derive(Debug, Clone)]
pub struct CurveReturn<T> {
    /// Calendar phase of the observation date.
    pub t: T,
    pub dt: T,
    /// Time to expiry of every contract used, in years.
    pub taus: Vec<T>,
    /// Log returns `log(F_{t+1} / F_t)`; the simulator steps in log space.
    pub z: Vec<T>,
}

/// Seasonal anchors are not estimated; they stay at the initial values.
#[derive(Debug, Clone)]
pub struct MleConfig<T> {
    pub rule: ExpiryRule,
    /// Number of nearest live contracts used per date.
    pub max_maturities: usize,
    pub max_evals: usize,
    pub ftol: T,
}

impl<T: Real> Default for MleConfig<T> {
    fn default() -> Self {
        Self {
            rule: ExpiryRule::default(),
            max_maturities: 12,
            max_evals: 20_000,
            ftol: T::lit(1e-10),
        }
    }
}

pub const MIN_MLE_DATES: usize = 100;
pub const MIN_MLE_MATURITIES: usize = 3;

/// Daily returns of the nearest `max_maturities` contracts live on both days.
pub fn curve_returns<T: Real>(h: &PriceHistory<T>, cfg: &MleConfig<T>) -> Result<Vec<CurveReturn<T>>> {
    if h.len() < MIN_MLE_DATES {
        return Err(Error::InsufficientData {
            needed: MIN_MLE_DATES,
            got: h.len(),
        });
    }
    let dates = h.dates();
    let mut out = Vec::with_capacity(h.len());
    for i in 0..h.len() - 1 {
        let (d0, d1) = (dates[i], dates[i + 1]);
        let (mut taus, mut z) = (Vec::new(), Vec::new());
        for &(m, f0) in &h.curves()[i] {
            if taus.len() == cfg.max_maturities {
                break;
            }
            if !cfg.rule.is_live(m, d1) {
                continue;
            }
            if let Some(f1) = h.price(i + 1, m) {
                taus.push(years_between(d0, cfg.rule.expiry(m)));
                z.push((f1 / f0).ln());
            }
        }
        if z.len() < MIN_MLE_MATURITIES {
            return Err(Error::InsufficientCurve {
                date: d0,
                message: format!("{} contracts live on consecutive days, need {MIN_MLE_MATURITIES}", z.len()),
            });
        }
        out.push(CurveReturn {
            t: year_fraction(d0),
            dt: years_between(d0, d1),
            taus,
            z,
        });
    }
    Ok(out)
}

/// Parameter vector order used by the likelihood and its covariance.
pub const THETA_NAMES: [&str; 6] = ["lambda", "mu1", "mu2", "sigma_s", "sigma_l", "rho"];

fn unpack<T: Real>(theta: &[T], anchors: (T, T)) -> GabillonParams<T> {
    GabillonParams {
        lambda: theta[0],
        mu1: theta[1],
        mu2: theta[2],
        t1: anchors.0,
        t2: anchors.1,
        sigma_s: theta[3],
        sigma_l: theta[4],
        rho: theta[5],
    }
}

/// Mean negative log-likelihood (times two, constants dropped) of the curve
/// returns under `z ~ N(0, H Σ H^T + s² I)`. `theta` holds the six model
/// parameters followed by `log s²`. As `s² → 0` this reduces to the factor
/// objective `log det Σ + x^T Σ^{-1} x` plus the volume term `log det H^T H`
/// and a residual penalty.
pub fn neg_log_likelihood<T: Real>(data: &[CurveReturn<T>], theta: &[T], anchors: (T, T)) -> T {
    let mut total = T::zero();
    for obs in data {
        total += obs_term(obs, theta, anchors);
    }
    total / T::of(data.len())
}

/// Contribution of each observation to [`neg_log_likelihood`].
pub fn obs_terms<T: Real>(data: &[CurveReturn<T>], theta: &[T], anchors: (T, T)) -> Vec<T> {
    data.iter().map(|obs| obs_term(obs, theta, anchors)).collect()
}

fn obs_term<T: Real>(obs: &CurveReturn<T>, theta: &[T], anchors: (T, T)) -> T {
    let p = unpack(theta, anchors);
    let s2 = theta[6].exp();
    if !(p.lambda > T::zero() && p.sigma_s > T::zero() && p.sigma_l > T::zero() && p.rho.abs() < T::one()) {
        return T::infinity();
    }
    let rho = p.rho;
    let det_sigma = T::one() - rho * rho;
    let phi = p.seasonal_vol(obs.t);
    if !(phi > T::zero()) {
        return T::infinity();
    }
    let sq = obs.dt.sqrt();
    // Accumulate H^T H, H^T z and z^T z.
    let (mut g11, mut g12, mut g22, mut u1, mut u2, mut zz) =
        (T::zero(), T::zero(), T::zero(), T::zero(), T::zero(), T::zero());
    for (&tau, &z) in obs.taus.iter().zip(&obs.z) {
        let e = (-p.lambda * tau).exp();
        let a = e * phi * p.sigma_s * sq;
        let b = (T::one() - e) * p.sigma_l * sq;
        g11 += a * a;
        g12 += a * b;
        g22 += b * b;
        u1 += a * z;
        u2 += b * z;
        zz += z * z;
    }
    // M = s² Σ^{-1} + H^T H
    let inv = T::one() / det_sigma;
    let m11 = s2 * inv + g11;
    let m12 = -s2 * rho * inv + g12;
    let m22 = s2 * inv + g22;
    let det_m = m11 * m22 - m12 * m12;
    if !(det_m > T::zero()) {
        return T::infinity();
    }
    let quad_m = (m22 * u1 * u1 - T::two() * m12 * u1 * u2 + m11 * u2 * u2) / det_m;
    let n = T::of(obs.z.len());
    // log det(s² I + H Σ H^T) = (n - 2) log s² + log det Σ + log det M
    let log_det = (n - T::two()) * s2.ln() + det_sigma.ln() + det_m.ln();
    let quad = ((zz - quad_m) / s2).max(T::zero());
    log_det + quad
}

/// Outer product of per-observation gradients, `mean(∇ℓ_t ∇ℓ_t^T)`.
fn score_outer<T: Real>(data: &[CurveReturn<T>], x: &[T], steps: &[T], anchors: (T, T)) -> Matrix<T> {
    let k = x.len();
    let m = data.len();
    let mut grads = vec![vec![T::zero(); k]; m];
    let mut probe = x.to_vec();
    for i in 0..k {
        probe[i] = x[i] + steps[i];
        let up = obs_terms(data, &probe, anchors);
        probe[i] = x[i] - steps[i];
        let down = obs_terms(data, &probe, anchors);
        probe[i] = x[i];
        for t in 0..m {
            grads[t][i] = (up[t] - down[t]) / (T::two() * steps[i]);
        }
    }
    let mut out = Matrix::zeros(k, k);
    for g in &grads {
        for r in 0..k {
            for c in 0..k {
                out[(r, c)] += g[r] * g[c];
            }
        }
    }
    out.scale(T::one() / T::of(m))
}

#[derive(Debug, Clone)]
pub struct MleFit<T> {
    pub params: GabillonParams<T>,
    /// Covariance of `(λ, μ1, μ2, σ_S, σ_L, ρ)`, robust (sandwich) form.
    pub covariance: Matrix<T>,
    /// Inverse-Hessian covariance, valid only if the residual model is exact.
    pub covariance_hessian: Matrix<T>,
    /// Objective value at the optimum.
    pub objective: T,
    /// Per-contract residual variance of daily returns not explained by the factors.
    pub residual_var: T,
    pub n_obs: usize,
    pub evaluations: usize,
    /// Names of parameters sitting on a bound at the optimum.
    pub at_bounds: Vec<&'static str>,
}

impl<T: Real> MleFit<T> {
    pub fn std_errors(&self) -> Vec<T> {
        self.covariance.diagonal().into_iter().map(|v| v.max(T::zero()).sqrt()).collect()
    }

    /// 95% Wald intervals in `THETA_NAMES` order.
    pub fn intervals(&self) -> Vec<(T, T)> {
        let x = theta_of(&self.params);
        let z = T::lit(1.959963984540054);
        x.iter()
            .zip(self.std_errors())
            .map(|(&v, se)| (v - z * se, v + z * se))
            .collect()
    }
}

fn hess_steps<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| match i {
            1 | 2 => T::lit(1e-3),
            6 => T::lit(1e-2),
            _ => (v.abs() * T::lit(1e-3)).max(T::lit(1e-5)),
        })
        .collect()
}

pub fn theta_of<T: Real>(p: &GabillonParams<T>) -> [T; 6] {
    [p.lambda, p.mu1, p.mu2, p.sigma_s, p.sigma_l, p.rho]
}

fn mle_bounds<T: Real>() -> Bounds<T> {
    Bounds {
        lower: [1e-3, -0.9, -0.9, 1e-4, 1e-4, -RHO_BOUND, -40.0].map(T::lit).to_vec(),
        upper: [50.0, 0.9, 0.9, 5.0, 5.0, RHO_BOUND, 0.0].map(T::lit).to_vec(),
    }
}

/// Maximum-likelihood fit of the six curve parameters starting from `init`.
pub fn calibrate_mle<T: Real>(
    h: &PriceHistory<T>,
    init: &GabillonParams<T>,
    cfg: &MleConfig<T>,
) -> Result<MleFit<T>> {
    let data = curve_returns(h, cfg)?;
    calibrate_on_returns(&data, init, cfg)
}

pub fn calibrate_on_returns<T: Real>(
    data: &[CurveReturn<T>],
    init: &GabillonParams<T>,
    cfg: &MleConfig<T>,
) -> Result<MleFit<T>> {
    let anchors = (init.t1, init.t2);
    let bounds = mle_bounds::<T>();
    let f = |x: &[T]| neg_log_likelihood(data, x, anchors);

    // Start the residual variance from what the initial factors leave over.
    let mut x0: Vec<T> = theta_of(init).to_vec();
    let mut best_s = (T::zero(), T::infinity());
    for k in 0..=16 {
        let ls = T::lit(-4.0 - 2.0 * k as f64);
        x0.push(ls);
        let v = f(&x0);
        x0.pop();
        if v < best_s.1 {
            best_s = (ls, v);
        }
    }
    x0.push(best_s.0);
    bounds.project(&mut x0);

    let steps: Vec<T> = x0
        .iter()
        .enumerate()
        .map(|(i, &v)| match i {
            1 | 2 => T::lit(0.05),
            5 => T::lit(0.1),
            6 => T::one(),
            _ => (v.abs() * T::lit(0.2)).max(T::lit(0.01)),
        })
        .collect();
    let opts = NelderMeadOptions {
        max_evals: cfg.max_evals,
        ftol: cfg.ftol,
        xtol: T::lit(1e-6),
        steps,
        restarts: 2,
    };
    let min = nelder_mead_whitened(&f, &x0, &bounds, &opts, hess_steps, 4);
    if !min.converged {
        return Err(Error::Convergence {
            iterations: min.evaluations,
            best_value: min.value.f64(),
            best: min.x.iter().map(|v| v.f64()).collect(),
        });
    }
    let x = min.x;
    let names: [&'static str; 7] = [
        THETA_NAMES[0],
        THETA_NAMES[1],
        THETA_NAMES[2],
        THETA_NAMES[3],
        THETA_NAMES[4],
        THETA_NAMES[5],
        "residual_var",
    ];
    let at_bounds: Vec<&'static str> = bounds.active(&x, T::lit(1e-6)).into_iter().map(|i| names[i]).collect();
    if !at_bounds.is_empty() {
        log::warn!("futures MLE optimum on bounds: {at_bounds:?}");
    }

    let hsteps = hess_steps(&x);
    let hess = hessian(&f, &x, &hsteps, Some(&bounds));
    let m = T::of(data.len());
    let hinv = hess.inverse()?;
    let naive = hinv.scale(T::two() / m);
    let outer = score_outer(data, &x, &hsteps, anchors);
    let robust = hinv.matmul(&outer).matmul(&hinv).scale(T::one() / m);
    let block = |full: &Matrix<T>| {
        let mut cov = Matrix::zeros(6, 6);
        for r in 0..6 {
            for c in 0..6 {
                cov[(r, c)] = full[(r, c)];
            }
        }
        cov
    };
    let (cov, cov_h) = (block(&robust), block(&naive));
    if !cov.is_finite() || !cov_h.is_finite() {
        return Err(Error::Singular("likelihood Hessian not invertible".into()));
    }
    Ok(MleFit {
        params: unpack(&x, anchors),
        covariance: cov,
        covariance_hessian: cov_h,
        objective: min.value,
        residual_var: x[6].exp(),
        n_obs: data.len(),
        evaluations: min.evaluations,
        at_bounds,
    })
}

/// Turns one simulated path of a curve set into a price history, with a
/// spot column supplied by the caller.
pub fn path_as_history<T: Real>(curves: &CurvePathSet<T>, path: usize, spot: &[T]) -> Result<PriceHistory<T>> {
    let mut cs = Vec::with_capacity(curves.n_times());
    for i in 0..curves.n_times() {
        let c: Vec<(Month, T)> = (0..curves.maturities.len())
            .filter(|&j| curves.is_live(i, j))
            .map(|j| (curves.maturities[j], curves.price(path, i, j)))
            .collect();
        cs.push(c);
    }
    PriceHistory::new(curves.dates.clone(), spot.to_vec(), cs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    fn curve(start: Month, n: u32) -> Vec<(Month, f64)> {
        (0..n).map(|k| (start.add_months(k), 7.0 + (k as f64) * 0.1)).collect()
    }

    #[test]
    fn seasonal_weight_examples() {
        let mut p = GabillonParams::<f64>::reference();
        p.mu1 = 0.0;
        p.mu2 = 0.0;
        assert_eq!(p.seasonal_vol(0.37), 1.0);
        p.mu1 = 0.3;
        p.t1 = 0.1;
        assert!((p.seasonal_vol(0.1) - 1.3).abs() < 1e-15);
        assert!((p.seasonal_vol(0.35) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn validate_rejects_bad_params() {
        let mut p = GabillonParams::<f64>::reference();
        assert!(p.validate().is_ok());
        p.mu1 = 1.2;
        assert!(p.validate().is_err());
        let mut q = GabillonParams::<f64>::reference();
        q.rho = 1.2;
        assert!(q.validate().is_err());
    }

    #[test]
    fn zero_vol_keeps_initial_curve() {
        let mut p = GabillonParams::<f64>::reference();
        p.sigma_s = 1e-300;
        p.sigma_l = 1e-300;
        let g = TimeGrid::daily(d(2007, 4, 1), d(2007, 6, 1), 1).unwrap();
        let c = curve(Month::new(2007, 5).unwrap(), 6);
        let s = simulate_curves(&p, &c, ExpiryRule::default(), &g, 3, 1).unwrap();
        for m in 0..3 {
            for i in 0..g.len() {
                for (j, &(_, f)) in c.iter().enumerate() {
                    assert_eq!(s.price(m, i, j), f);
                }
            }
        }
    }

    #[test]
    fn expired_contracts_freeze_and_prompt_rolls() {
        let p = GabillonParams::<f64>::reference();
        let g = TimeGrid::daily(d(2007, 4, 1), d(2007, 6, 15), 1).unwrap();
        let c = curve(Month::new(2007, 5).unwrap(), 4);
        let s = simulate_curves(&p, &c, ExpiryRule::default(), &g, 2, 3).unwrap();
        let may1 = g.dates().iter().position(|&x| x == d(2007, 5, 1)).unwrap();
        for i in may1 - 1..g.len() {
            assert_eq!(s.price(0, i, 0), s.price(0, may1 - 1, 0));
        }
        assert_eq!(s.live_index(may1 - 1, 0), Some(0));
        assert_eq!(s.live_index(may1, 0), Some(1));
        assert_ne!(s.price(0, may1, 1), s.price(0, may1 - 1, 1));
    }

    #[test]
    fn rejects_nonpositive_initial() {
        let p = GabillonParams::<f64>::reference();
        let g = TimeGrid::daily(d(2007, 4, 1), d(2007, 5, 1), 1).unwrap();
        let c = vec![(Month::new(2007, 5).unwrap(), 0.0)];
        assert!(simulate_curves(&p, &c, ExpiryRule::default(), &g, 1, 1).is_err());
    }

    #[test]
    fn seeded_determinism_and_exact_start() {
        let p = GabillonParams::<f64>::reference();
        let g = TimeGrid::daily(d(2007, 4, 1), d(2007, 5, 1), 1).unwrap();
        let c = curve(Month::new(2007, 5).unwrap(), 5);
        let a = simulate_curves(&p, &c, ExpiryRule::default(), &g, 4, 9).unwrap();
        let b = simulate_curves(&p, &c, ExpiryRule::default(), &g, 4, 9).unwrap();
        assert_eq!(a.data, b.data);
        for m in 0..4 {
            assert_eq!(a.curve(m, 0), c.iter().map(|x| x.1).collect::<Vec<_>>().as_slice());
        }
        let other = simulate_curves(&p, &c, ExpiryRule::default(), &g, 4, 10).unwrap();
        assert_ne!(a.data, other.data);
    }

    #[test]
    fn long_factor_dominates_when_short_loading_vanishes() {
        // ρ = 1 and e^{-λ(T-t)} ≈ 0: daily log-return std ≈ σ_L √dt
        let mut p = GabillonParams::<f64>::reference();
        p.rho = 1.0;
        p.lambda = 40.0;
        let g = TimeGrid::daily(d(2007, 4, 1), d(2007, 10, 1), 1).unwrap();
        let c = vec![(Month::new(2009, 4).unwrap(), 7.0), (Month::new(2009, 5).unwrap(), 7.0)];
        let s = simulate_curves(&p, &c, ExpiryRule::default(), &g, 200, 5).unwrap();
        let mut rets = Vec::new();
        for m in 0..200 {
            for i in 0..g.len() - 1 {
                rets.push((s.price(m, i + 1, 0) / s.price(m, i, 0)).ln());
            }
        }
        let sd = crate::scalar::sample_std(&rets) / (1.0f64 / 365.0).sqrt();
        assert!((sd - p.sigma_l).abs() < 0.01 * p.sigma_l, "{sd}");
    }

    #[test]
    fn invert_factors_examples() {
        let hs = vec![1.0, 0.5, 0.2, 0.1];
        let hl = vec![0.1, 0.4, 0.7, 0.9];
        let z: Vec<f64> = hs.iter().zip(&hl).map(|(a, b)| 0.3 * a - 1.2 * b).collect();
        let x = invert_factors(&z, &hs, &hl).unwrap();
        assert!((x[0] - 0.3).abs() < 1e-12 && (x[1] + 1.2).abs() < 1e-12);
        // orthonormal columns
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let (a, b) = (vec![r, r, 0.0], vec![r, -r, 0.0]);
        let z = vec![0.2, 0.7, -1.0];
        let x = invert_factors(&z, &a, &b).unwrap();
        assert!((x[0] - (0.2 * r + 0.7 * r)).abs() < 1e-12);
        assert!((x[1] - (0.2 * r - 0.7 * r)).abs() < 1e-12);
        assert!(matches!(
            invert_factors(&z, &a, &a.iter().map(|v| 2.0 * v).collect::<Vec<_>>()),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn invert_factors_matches_normal_equations() {
        use crate::rng::{normal, path_rng, Stream};
        let mut rng = path_rng(3, Stream::Family, 0);
        let mut g = || normal(&mut rng);
        let hs: Vec<f64> = (0..6).map(|_| g()).collect();
        let hl: Vec<f64> = (0..6).map(|_| g()).collect();
        let z: Vec<f64> = (0..6).map(|_| g()).collect();
        let x = invert_factors(&z, &hs, &hl).unwrap();
        // Cramer's rule on the 2x2 normal equations.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (a11, a12, a22) = (dot(&hs, &hs), dot(&hs, &hl), dot(&hl, &hl));
        let (b1, b2) = (dot(&hs, &z), dot(&hl, &z));
        let det = a11 * a22 - a12 * a12;
        assert!((x[0] - (b1 * a22 - b2 * a12) / det).abs() < 1e-10);
        assert!((x[1] - (a11 * b2 - a12 * b1) / det).abs() < 1e-10);
    }

    #[test]
    fn rough_constant_prices_give_zero() {
        let z = vec![0.0; 100];
        let dt = vec![1.0 / 365.0; 100];
        let r = rough_from_returns(&z, &z, &dt);
        assert_eq!((r.sigma_s, r.sigma_l, r.rho), (0.0, 0.0, None));
        let constant: Vec<f64> = vec![0.01; 100];
        assert!(rough_from_returns(&constant, &z, &dt).sigma_s < 1e-12);
    }

    #[test]
    fn rough_recovers_factor_vols() {
        use crate::rng::{normal, path_rng, Stream};
        let (ss, sl, rho): (f64, f64, f64) = (0.45, 0.17, 0.4);
        let dt: f64 = 1.0 / 365.0;
        let mut rng = path_rng(17, Stream::Curve, 0);
        let (mut zp, mut zl) = (Vec::new(), Vec::new());
        for _ in 0..2000 {
            let (z1, z2) = (normal(&mut rng), normal(&mut rng));
            zp.push(ss * dt.sqrt() * z1);
            zl.push(sl * dt.sqrt() * (rho * z1 + (1.0 - rho * rho).sqrt() * z2));
        }
        let r = rough_from_returns(&zp, &zl, &vec![dt; 2000]);
        assert!((r.sigma_s / ss - 1.0).abs() < 0.2);
        assert!((r.sigma_l / sl - 1.0).abs() < 0.2);
        assert!((r.rho.unwrap() / rho - 1.0).abs() < 0.2);
    }

    fn history_from_sim(p: &GabillonParams<f64>, days: i64, seed: u64) -> PriceHistory<f64> {
        let start = d(2000, 1, 3);
        let g = TimeGrid::daily(start, start + Duration::days(days), 1).unwrap();
        let months = Month::range(Month::new(2000, 2).unwrap(), Month::of(start + Duration::days(days)).add_months(14));
        let c: Vec<(Month, f64)> = months.iter().map(|&m| (m, 6.0)).collect();
        let s = simulate_curves(p, &c, ExpiryRule::default(), &g, 1, seed).unwrap();
        path_as_history(&s, 0, &vec![6.0; g.len()]).unwrap()
    }

    #[test]
    fn rough_estimates_need_long_contract() {
        let h = history_from_sim(&GabillonParams::reference(), 200, 1);
        assert!(matches!(
            rough_estimates(&h, ExpiryRule::default(), 4.0),
            Err(Error::InsufficientCurve { .. })
        ));
        let r = rough_estimates(&h, ExpiryRule::default(), 1.0).unwrap();
        assert!(r.sigma_s > 0.0 && r.sigma_l > 0.0);
    }

    #[test]
    fn mle_recovers_reference_parameters() {
        let truth = GabillonParams::<f64>::reference();
        let h = history_from_sim(&truth, 1200, 21);
        let cfg = MleConfig::default();
        let mut init = truth;
        init.lambda = 1.2;
        init.sigma_s = 0.35;
        init.sigma_l = 0.2;
        init.rho = 0.2;
        init.mu1 = 0.0;
        init.mu2 = 0.0;
        let fit = calibrate_mle(&h, &init, &cfg).unwrap();
        let data = curve_returns(&h, &cfg).unwrap();
        let mut true_theta = theta_of(&truth).to_vec();
        true_theta.push(fit.residual_var.ln());
        let mut opt_theta = theta_of(&fit.params).to_vec();
        opt_theta.push(fit.residual_var.ln());
        assert!(neg_log_likelihood(&data, &true_theta, (truth.t1, truth.t2)) >= fit.objective);
        assert!(neg_log_likelihood(&data, &opt_theta, (truth.t1, truth.t2)) == fit.objective);
        let iv = fit.intervals();
        let t = theta_of(&truth);
        let covered = (0..6).filter(|&k| iv[k].0 <= t[k] && t[k] <= iv[k].1).count();
        assert!(covered >= 5, "{:?} vs {:?}", fit.params, iv);
    }

    #[test]
    fn f32_simulation() {
        let p = GabillonParams::<f32>::reference();
        let g = TimeGrid::<f32>::daily(d(2007, 4, 1), d(2007, 5, 1), 1).unwrap();
        let c = vec![(Month::new(2007, 5).unwrap(), 7.0f32), (Month::new(2007, 6).unwrap(), 7.5)];
        let s = simulate_curves(&p, &c, ExpiryRule::default(), &g, 2, 1).unwrap();
        assert!(s.data.iter().all(|v| v.is_finite() && *v > 0.0));
    }
}
