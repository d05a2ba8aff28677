//! Discrete spot models driven by the prompt contract, GARCH(1,1) noise and
//! seasonal spike overlays.

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;

use crate::calendar::{years_between, ExpiryRule};
use crate::error::{Error, Result};
use crate::futures::CurvePathSet;
use crate::linalg::{Matrix, ThinQr};
use crate::market_data::{detect_spikes, rolling_series, PriceHistory, SpikeReport, SpikeSign};
use crate::optimize::{hessian, nelder_mead_whitened, Bounds, NelderMeadOptions};
use crate::rng::{normal, path_rng, poisson, Stream};
use crate::scalar::{mean, sample_std, Real};

/// Floor applied to the simulated spot-prompt spread of model 2.
pub const SPREAD_FLOOR: f64 = -0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpotModel {
    /// Log-return regression on the spot-prompt log gap and the prompt return.
    One,
    /// Spot-prompt spread regression on its lag and the front-back spread.
    Two,
}

impl SpotModel {
    pub fn id(self) -> u8 {
        match self {
            SpotModel::One => 1,
            SpotModel::Two => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(SpotModel::One),
            2 => Ok(SpotModel::Two),
            other => Err(Error::Config(format!("model_id must be 1 or 2, got {other}"))),
        }
    }
}

/// `σ_t² = κ + Σ γ_i σ_{t-i}² + Σ α_i ε_{t-i}²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GarchParams<T> {
    pub kappa: T,
    pub gamma: Vec<T>,
    pub alpha: Vec<T>,
}

impl<T: Real> GarchParams<T> {
    pub fn garch11(kappa: T, gamma: T, alpha: T) -> Self {
        Self {
            kappa,
            gamma: vec![gamma],
            alpha: vec![alpha],
        }
    }

    pub fn persistence(&self) -> T {
        self.gamma.iter().copied().sum::<T>() + self.alpha.iter().copied().sum::<T>()
    }

    pub fn is_stationary(&self) -> bool {
        self.kappa > T::zero()
            && self.gamma.iter().chain(&self.alpha).all(|&c| c >= T::zero())
            && self.persistence() < T::one()
    }

    pub fn unconditional_var(&self) -> T {
        self.kappa / (T::one() - self.persistence())
    }

    fn check(&self) -> Result<()> {
        if !self.is_stationary() {
            return Err(Error::domain(format!(
                "GARCH coefficients not stationary (kappa {}, persistence {})",
                self.kappa,
                self.persistence()
            )));
        }
        Ok(())
    }
}

/// Conditional variances and standardized residuals. Pre-sample variances
/// and squared residuals are set to `initial_var`, and `σ_0² = initial_var`.
pub fn garch_filter<T: Real>(eps: &[T], g: &GarchParams<T>, initial_var: T) -> Result<(Vec<T>, Vec<T>)> {
    g.check()?;
    if !(initial_var > T::zero()) {
        return Err(Error::domain("initial variance must be positive"));
    }
    Ok(garch_filter_unchecked(eps, g, initial_var))
}

fn garch_filter_unchecked<T: Real>(eps: &[T], g: &GarchParams<T>, initial_var: T) -> (Vec<T>, Vec<T>) {
    let n = eps.len();
    let mut var = Vec::with_capacity(n);
    for t in 0..n {
        let v = if t == 0 {
            initial_var
        } else {
            let mut v = g.kappa;
            for (i, &gi) in g.gamma.iter().enumerate() {
                v += gi * if t > i { var[t - 1 - i] } else { initial_var };
            }
            for (i, &ai) in g.alpha.iter().enumerate() {
                v += ai * if t > i { eps[t - 1 - i] * eps[t - 1 - i] } else { initial_var };
            }
            v
        };
        var.push(v);
    }
    let z = eps.iter().zip(&var).map(|(&e, &v)| e / v.sqrt()).collect();
    (var, z)
}

/// Inverse of [`garch_filter`]: rebuilds residuals from standardized noise.
pub fn garch_unfilter<T: Real>(z: &[T], g: &GarchParams<T>, initial_var: T) -> Result<(Vec<T>, Vec<T>)> {
    g.check()?;
    let n = z.len();
    let (mut var, mut eps): (Vec<T>, Vec<T>) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for t in 0..n {
        let v = if t == 0 {
            initial_var
        } else {
            let mut v = g.kappa;
            for (i, &gi) in g.gamma.iter().enumerate() {
                v += gi * if t > i { var[t - 1 - i] } else { initial_var };
            }
            for (i, &ai) in g.alpha.iter().enumerate() {
                v += ai * if t > i { eps[t - 1 - i] * eps[t - 1 - i] } else { initial_var };
            }
            v
        };
        var.push(v);
        eps.push(z[t] * v.sqrt());
    }
    Ok((eps, var))
}

/// Gaussian log-likelihood of residuals under a GARCH variance path.
pub fn garch_loglik<T: Real>(eps: &[T], g: &GarchParams<T>, initial_var: T) -> T {
    if !g.is_stationary() || !(initial_var > T::zero()) {
        return T::neg_infinity();
    }
    let (var, _) = garch_filter_unchecked(eps, g, initial_var);
    let ln2pi = (T::two() * T::PI()).ln();
    -T::half()
        * eps
            .iter()
            .zip(&var)
            .map(|(&e, &v)| ln2pi + v.ln() + e * e / v)
            .sum::<T>()
}

/// Mean-reverting jump process `dY = -β Y dt + dZ` whose jumps only count
/// when they arrive in one of the window months.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeParams<T> {
    /// Reversion speed per year.
    pub beta: T,
    /// Jump arrival rate per year.
    pub intensity: T,
    /// Mean of the log-scale jump size.
    pub jump_mean: T,
    pub jump_std: T,
    /// Calendar months (1-12) in which jumps count.
    pub window: Vec<u32>,
}

impl<T: Real> SpikeParams<T> {
    pub fn disabled() -> Self {
        Self {
            beta: T::lit(300.0),
            intensity: T::zero(),
            jump_mean: T::zero(),
            jump_std: T::zero(),
            window: Vec::new(),
        }
    }

    /// Positive spikes of the reference calibration, in January, February and June.
    pub fn reference_positive() -> Self {
        Self {
            beta: T::lit(300.0),
            intensity: T::lit(0.8331),
            jump_mean: T::lit(0.2579),
            jump_std: T::lit(0.3910),
            window: vec![1, 2, 6],
        }
    }

    /// Negative spikes of the reference calibration, in September to November.
    pub fn reference_negative() -> Self {
        Self {
            beta: T::lit(300.0),
            intensity: T::lit(2.9488),
            jump_mean: T::lit(-0.7624),
            jump_std: T::lit(0.6402),
            window: vec![9, 10, 11],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::domain(format!("spike parameters: {m}")));
        if !(self.beta > T::zero()) {
            return bad("beta must be positive");
        }
        if !(self.intensity >= T::zero()) {
            return bad("intensity must be non-negative");
        }
        if !(self.jump_std >= T::zero()) {
            return bad("jump std must be non-negative");
        }
        if self.intensity > T::zero() && self.window.is_empty() {
            return bad("window must be non-empty when intensity > 0");
        }
        if self.window.iter().any(|m| !(1..=12).contains(m)) {
            return bad("window months must be in 1..=12");
        }
        Ok(())
    }

    pub fn in_window(&self, date: NaiveDate) -> bool {
        self.window.contains(&date.month())
    }
}

/// Spike path on a date grid given explicit arrivals `(grid index, size)`.
/// A jump arriving at index `k` enters `Y` at `t_k` and decays afterwards;
/// jumps outside the window are dropped.
pub fn spike_path<T: Real>(sp: &SpikeParams<T>, dates: &[NaiveDate], arrivals: &[(usize, T)]) -> Vec<T> {
    let mut y = vec![T::zero(); dates.len()];
    for i in 1..dates.len() {
        let dt: T = years_between(dates[i - 1], dates[i]);
        y[i] = y[i - 1] * (-sp.beta * dt).exp();
        if sp.in_window(dates[i]) {
            for &(k, j) in arrivals {
                if k == i {
                    y[i] += j;
                }
            }
        }
    }
    y
}

/// Simulated spike paths, `[path][time]`.
pub fn simulate_spikes<T: Real>(
    sp: &SpikeParams<T>,
    dates: &[NaiveDate],
    n_paths: usize,
    seed: u64,
    stream: Stream,
) -> Result<Vec<T>> {
    sp.validate()?;
    let nt = dates.len();
    let mut out = vec![T::zero(); n_paths * nt];
    if sp.intensity == T::zero() {
        return Ok(out);
    }
    out.par_chunks_mut(nt).enumerate().for_each(|(m, y)| {
        let mut rng = path_rng(seed, stream, m);
        spike_steps(sp, dates, &mut rng, y);
    });
    Ok(out)
}

fn spike_steps<T: Real, R: rand::Rng>(sp: &SpikeParams<T>, dates: &[NaiveDate], rng: &mut R, y: &mut [T]) {
    y[0] = T::zero();
    for i in 1..dates.len() {
        let dt: T = years_between(dates[i - 1], dates[i]);
        y[i] = y[i - 1] * (-sp.beta * dt).exp();
        let count = poisson(rng, (sp.intensity * dt).f64());
        for _ in 0..count {
            let j = sp.jump_mean + sp.jump_std * T::lit(normal(rng));
            if sp.in_window(dates[i]) {
                y[i] += j;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotParams<T> {
    pub model: SpotModel,
    pub a1: T,
    pub a2: T,
    pub a3: T,
    pub garch: GarchParams<T>,
    pub spike_pos: SpikeParams<T>,
    pub spike_neg: SpikeParams<T>,
}

/// Names of the estimated spot parameters, in covariance order.
pub const SPOT_THETA_NAMES: [&str; 6] = ["a1", "a2", "a3", "kappa", "gamma1", "alpha1"];

impl<T: Real> SpotParams<T> {
    /// Model 1 estimates on 1997-2007 data.
    pub fn reference_model1() -> Self {
        Self {
            model: SpotModel::One,
            a1: T::lit(-0.0044),
            a2: T::lit(0.2622),
            a3: T::lit(0.4467),
            garch: GarchParams::garch11(T::lit(1.6928e-5), T::lit(0.8764), T::lit(0.1138)),
            spike_pos: SpikeParams::reference_positive(),
            spike_neg: SpikeParams::reference_negative(),
        }
    }

    /// Model 2 defaults: a persistent spread with a small front-back loading,
    /// with the model 1 noise and spike blocks.
    pub fn default_model2() -> Self {
        Self {
            model: SpotModel::Two,
            a1: T::zero(),
            a2: T::lit(0.75),
            a3: T::lit(0.1),
            ..Self::reference_model1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.garch.gamma.len() != 1 || self.garch.alpha.len() != 1 {
            return Err(Error::Config(format!(
                "only GARCH(1,1) is supported, got p = {}, q = {}",
                self.garch.gamma.len(),
                self.garch.alpha.len()
            )));
        }
        self.garch.check()?;
        if ![self.a1, self.a2, self.a3].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("regression coefficients must be finite"));
        }
        self.spike_pos.validate()?;
        self.spike_neg.validate()
    }

    pub fn theta(&self) -> [T; 6] {
        [
            self.a1,
            self.a2,
            self.a3,
            self.garch.kappa,
            self.garch.gamma[0],
            self.garch.alpha[0],
        ]
    }

    pub fn with_theta(&self, theta: &[T]) -> Self {
        Self {
            a1: theta[0],
            a2: theta[1],
            a3: theta[2],
            garch: GarchParams::garch11(theta[3], theta[4], theta[5]),
            ..self.clone()
        }
    }
}

/// Simulated spot paths, `[path][time]`.
#[derive(Debug, Clone)]
pub struct SpotPathSet<T> {
    n_paths: usize,
    n_times: usize,
    base: Vec<T>,
    spiked: Vec<T>,
    garch_var: Vec<T>,
    floors: Vec<u32>,
    seed: u64,
}

impl<T: Real> SpotPathSet<T> {
    /// Wraps externally produced spot paths with no spikes.
    pub fn from_base(n_paths: usize, n_times: usize, base: Vec<T>) -> Result<Self> {
        if base.len() != n_paths * n_times {
            return Err(Error::Grid(format!(
                "spot data has {} values, expected {n_paths} x {n_times}",
                base.len()
            )));
        }
        if base.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::domain("spot prices must be positive"));
        }
        Ok(Self {
            n_paths,
            n_times,
            spiked: base.clone(),
            garch_var: vec![T::zero(); base.len()],
            base,
            floors: vec![0; n_paths],
            seed: 0,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base(&self, path: usize) -> &[T] {
        &self.base[path * self.n_times..(path + 1) * self.n_times]
    }

    /// Spot including spikes; the price the storage trades at.
    pub fn spiked(&self, path: usize) -> &[T] {
        &self.spiked[path * self.n_times..(path + 1) * self.n_times]
    }

    pub fn garch_var(&self, path: usize) -> &[T] {
        &self.garch_var[path * self.n_times..(path + 1) * self.n_times]
    }

    /// Number of model 2 steps floored per path.
    pub fn floors(&self) -> &[u32] {
        &self.floors
    }
}

/// Simulates spot paths on the curve grid; path `m` uses the prompt and back
/// of curve path `m`. `s0` is the spot on the first grid date.
pub fn simulate_spot_paths<T: Real>(
    p: &SpotParams<T>,
    curves: &CurvePathSet<T>,
    s0: T,
    seed: u64,
) -> Result<SpotPathSet<T>> {
    p.validate()?;
    if !(s0 > T::zero()) {
        return Err(Error::domain("initial spot must be positive"));
    }
    let pb = curves.prompt_back()?;
    let nt = curves.n_times();
    let n = curves.n_paths();
    let dates = curves.dates();
    let var0 = p.garch.unconditional_var();
    let (kappa, gamma, alpha) = (p.garch.kappa, p.garch.gamma[0], p.garch.alpha[0]);
    let floor = T::lit(SPREAD_FLOOR);

    let mut base = vec![T::zero(); n * nt];
    let mut spiked = vec![T::zero(); n * nt];
    let mut var = vec![T::zero(); n * nt];
    let mut floors = vec![0u32; n];
    base.par_chunks_mut(nt)
        .zip(spiked.par_chunks_mut(nt))
        .zip(var.par_chunks_mut(nt))
        .zip(floors.par_iter_mut())
        .enumerate()
        .for_each(|(m, (((s, st), v), fl))| {
            let mut rng = path_rng(seed, Stream::Spot, m);
            let prompt = |i: usize| curves.price(m, i, pb[i].0);
            let back = |i: usize| curves.price(m, i, pb[i].1);
            s[0] = s0;
            v[0] = var0;
            let mut eps_prev2 = var0;
            let mut y_prev = (s0 - prompt(0)) / prompt(0);
            for i in 1..nt {
                let sig2 = kappa + gamma * v[i - 1] + alpha * eps_prev2;
                v[i] = sig2;
                let sig = sig2.sqrt();
                let (p0, p1) = (prompt(i - 1), prompt(i));
                let eps;
                match p.model {
                    SpotModel::One => {
                        let mu = p.a1 + p.a2 * (p0 / s[i - 1]).ln() + p.a3 * (p1 / p0).ln();
                        eps = sig * T::lit(normal(&mut rng));
                        s[i] = s[i - 1] * (mu + eps).exp();
                    }
                    SpotModel::Two => {
                        let b0 = back(i - 1);
                        let mu = p.a1 + p.a2 * y_prev + p.a3 * (p0 - b0) / b0;
                        let mut e = sig * T::lit(normal(&mut rng));
                        if mu + e <= floor {
                            e = sig * T::lit(normal(&mut rng));
                        }
                        let mut y = mu + e;
                        if y <= floor {
                            y = floor;
                            e = y - mu;
                            *fl += 1;
                        }
                        eps = e;
                        y_prev = y;
                        s[i] = p1 * (T::one() + y);
                    }
                }
                eps_prev2 = eps * eps;
            }
            let mut yp = vec![T::zero(); nt];
            let mut yn = vec![T::zero(); nt];
            if p.spike_pos.intensity > T::zero() {
                spike_steps(&p.spike_pos, dates, &mut path_rng(seed, Stream::SpikeUp, m), &mut yp);
            }
            if p.spike_neg.intensity > T::zero() {
                spike_steps(&p.spike_neg, dates, &mut path_rng(seed, Stream::SpikeDown, m), &mut yn);
            }
            for i in 0..nt {
                st[i] = s[i] * (yp[i] + yn[i]).exp();
            }
        });
    let total: u32 = floors.iter().sum();
    if total > 0 {
        log::warn!("model 2 spread floored on {total} steps across {n} paths");
    }
    Ok(SpotPathSet {
        n_paths: n,
        n_times: nt,
        base,
        spiked,
        garch_var: var,
        floors,
        seed,
    })
}

/// Regression sample `y_t = a1 + a2 x_{t,1} + a3 x_{t,2} + ε_t`.
#[derive(Debug, Clone)]
pub struct SpotDataset<T> {
    pub model: SpotModel,
    pub dates: Vec<NaiveDate>,
    pub y: Vec<T>,
    pub x1: Vec<T>,
    pub x2: Vec<T>,
    /// Dates dropped because they or their predecessor were flagged as spikes.
    pub excised: usize,
}

impl<T: Real> SpotDataset<T> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn residuals(&self, a: [T; 3]) -> Vec<T> {
        (0..self.len())
            .map(|t| self.y[t] - a[0] - a[1] * self.x1[t] - a[2] * self.x2[t])
            .collect()
    }

    /// Gaussian GARCH(1,1) log-likelihood of `θ = (a1, a2, a3, κ, γ1, α1)`,
    /// started from the unconditional variance.
    pub fn loglik(&self, theta: &[T]) -> T {
        let g = GarchParams::garch11(theta[3], theta[4], theta[5]);
        if !g.is_stationary() {
            return T::neg_infinity();
        }
        let eps = self.residuals([theta[0], theta[1], theta[2]]);
        garch_loglik(&eps, &g, g.unconditional_var())
    }

    /// Standardized GARCH residuals for `θ`.
    pub fn standardized(&self, theta: &[T]) -> Result<Vec<T>> {
        let g = GarchParams::garch11(theta[3], theta[4], theta[5]);
        let eps = self.residuals([theta[0], theta[1], theta[2]]);
        let (_, z) = garch_filter(&eps, &g, g.unconditional_var())?;
        Ok(z)
    }
}

pub const MIN_SPOT_OBS: usize = 250;

/// Builds the regression sample of a spot model. With `spikes`, dates where
/// `t` or `t - 1` is a spike are excised.
pub fn spot_dataset<T: Real>(
    h: &PriceHistory<T>,
    model: SpotModel,
    rule: ExpiryRule,
    spikes: Option<&SpikeReport<T>>,
) -> Result<SpotDataset<T>> {
    if h.len() < MIN_SPOT_OBS {
        return Err(Error::InsufficientData {
            needed: MIN_SPOT_OBS,
            got: h.len(),
        });
    }
    let r = rolling_series(h, rule)?;
    let s = h.spot();
    let flagged: Vec<bool> = match spikes {
        Some(rep) => {
            let mut f = vec![false; h.len()];
            let mut k = 0;
            for (i, &d) in h.dates().iter().enumerate() {
                while k < rep.events.len() && rep.events[k].date < d {
                    k += 1;
                }
                f[i] = k < rep.events.len() && rep.events[k].date == d;
            }
            f
        }
        None => vec![false; h.len()],
    };
    let mut ds = SpotDataset {
        model,
        dates: Vec::new(),
        y: Vec::new(),
        x1: Vec::new(),
        x2: Vec::new(),
        excised: 0,
    };
    for t in 1..h.len() {
        if flagged[t] || flagged[t - 1] {
            ds.excised += 1;
            continue;
        }
        let (y, x1, x2) = match model {
            SpotModel::One => (
                (s[t] / s[t - 1]).ln(),
                (r.prompt[t - 1] / s[t - 1]).ln(),
                (r.prompt[t] / r.prompt[t - 1]).ln(),
            ),
            SpotModel::Two => (
                r.spread[t],
                r.spread[t - 1],
                (r.prompt[t - 1] - r.back[t - 1]) / r.back[t - 1],
            ),
        };
        ds.dates.push(h.dates()[t]);
        ds.y.push(y);
        ds.x1.push(x1);
        ds.x2.push(x2);
    }
    if ds.len() < MIN_SPOT_OBS {
        return Err(Error::InsufficientData {
            needed: MIN_SPOT_OBS,
            got: ds.len(),
        });
    }
    Ok(ds)
}

/// Ordinary least squares for `(a1, a2, a3)`.
pub fn ols<T: Real>(ds: &SpotDataset<T>) -> Result<[T; 3]> {
    let cols = vec![vec![T::one(); ds.len()], ds.x1.clone(), ds.x2.clone()];
    let qr = ThinQr::factor(&cols, T::lit(1e-10))
        .ok_or_else(|| Error::Singular("spot regressors are collinear".into()))?;
    let a = qr.solve(&ds.y);
    Ok([a[0], a[1], a[2]])
}

fn garch_bounds<T: Real>() -> Bounds<T> {
    Bounds {
        lower: [1e-12, 0.0, 0.0].map(T::lit).to_vec(),
        upper: [1.0, 0.9999, 0.9999].map(T::lit).to_vec(),
    }
}

/// Gaussian quasi-MLE of GARCH(1,1) on fixed residuals.
pub fn fit_garch<T: Real>(eps: &[T]) -> Result<GarchParams<T>> {
    let v = eps.iter().map(|&e| e * e).sum::<T>() / T::of(eps.len());
    if !(v > T::zero()) {
        return Err(Error::domain("residuals have zero variance"));
    }
    // Work with κ scaled by the sample variance so all coordinates are O(1).
    let f = |x: &[T]| {
        let g = GarchParams::garch11(x[0] * v, x[1], x[2]);
        -garch_loglik(eps, &g, g.unconditional_var())
    };
    let bounds = Bounds {
        lower: [1e-8, 0.0, 0.0].map(T::lit).to_vec(),
        upper: [1.0, 0.9999, 0.9999].map(T::lit).to_vec(),
    };
    let mut best: Option<(Vec<T>, T)> = None;
    for &(g0, a0) in &[(0.85, 0.1), (0.5, 0.2), (0.1, 0.05)] {
        let x0 = vec![T::lit(1.0 - g0 - a0), T::lit(g0), T::lit(a0)];
        let opts = NelderMeadOptions {
            max_evals: 4000,
            ftol: T::lit(1e-9),
            xtol: T::lit(1e-7),
            steps: vec![T::lit(0.02), T::lit(0.05), T::lit(0.03)],
            restarts: 3,
        };
        let m = crate::optimize::nelder_mead(f, &x0, &bounds, &opts);
        if best.as_ref().is_none_or(|(_, bv)| m.value < *bv) {
            best = Some((m.x, m.value));
        }
    }
    let (x, _) = best.expect("at least one start");
    Ok(GarchParams::garch11(x[0] * v, x[1], x[2]))
}

#[derive(Debug, Clone)]
pub struct SpotFit<T> {
    pub params: SpotParams<T>,
    /// Maximized log-likelihood of the regression with GARCH noise.
    pub loglik: T,
    /// Covariance of `(a1, a2, a3, κ, γ1, α1)`.
    pub covariance: Matrix<T>,
    pub dataset: SpotDataset<T>,
    pub spikes: Option<SpikeReport<T>>,
}

impl<T: Real> SpotFit<T> {
    pub fn std_errors(&self) -> Vec<T> {
        self.covariance.diagonal().into_iter().map(|v| v.max(T::zero()).sqrt()).collect()
    }
}

/// Estimation settings for [`estimate_spot`].
#[derive(Debug, Clone)]
pub struct SpotEstimation<T> {
    pub rule: ExpiryRule,
    /// Spike threshold in sample standard deviations; `None` disables excision
    /// and spike fitting.
    pub spike_k: Option<T>,
    /// Reversion speed, fixed rather than estimated.
    pub beta: T,
    pub window_pos: Vec<u32>,
    pub window_neg: Vec<u32>,
    /// Jump laws used when fewer than three spikes of a sign are found.
    pub fallback_pos: SpikeParams<T>,
    pub fallback_neg: SpikeParams<T>,
}

impl<T: Real> Default for SpotEstimation<T> {
    fn default() -> Self {
        Self {
            rule: ExpiryRule::default(),
            spike_k: Some(T::lit(3.0)),
            beta: T::lit(300.0),
            window_pos: vec![1, 2, 6],
            window_neg: vec![9, 10, 11],
            fallback_pos: SpikeParams::reference_positive(),
            fallback_neg: SpikeParams::reference_negative(),
        }
    }
}

/// Spike blocks from detected events: intensity is the count of in-window
/// events per window-year; jump sizes are `log(1 + x_t)` on flagged dates.
pub fn fit_spikes<T: Real>(
    dates: &[NaiveDate],
    report: &SpikeReport<T>,
    cfg: &SpotEstimation<T>,
) -> (SpikeParams<T>, SpikeParams<T>) {
    let fit = |sign: SpikeSign, window: &[u32], fallback: &SpikeParams<T>| {
        let window_days = dates.iter().filter(|d| window.contains(&d.month())).count();
        let years = T::of(window_days) / T::lit(crate::calendar::DAYS_PER_YEAR);
        let sizes: Vec<T> = report
            .events
            .iter()
            .filter(|e| e.sign == sign && window.contains(&e.date.month()))
            .map(|e| (T::one() + e.spread).ln())
            .collect();
        let intensity = if years > T::zero() {
            T::of(sizes.len()) / years
        } else {
            T::zero()
        };
        let (jump_mean, jump_std) = if sizes.len() >= 3 {
            (mean(&sizes), sample_std(&sizes))
        } else {
            log::warn!(
                "{} {sign:?} spikes in window, keeping default jump law",
                sizes.len()
            );
            (fallback.jump_mean, fallback.jump_std)
        };
        SpikeParams {
            beta: cfg.beta,
            intensity,
            jump_mean,
            jump_std,
            window: window.to_vec(),
        }
    };
    (
        fit(SpikeSign::Positive, &cfg.window_pos, &cfg.fallback_pos),
        fit(SpikeSign::Negative, &cfg.window_neg, &cfg.fallback_neg),
    )
}

/// Spike detection, OLS, GARCH quasi-MLE, then a joint maximum-likelihood
/// polish of all six parameters whose Hessian gives the covariance.
pub fn estimate_spot<T: Real>(
    h: &PriceHistory<T>,
    model: SpotModel,
    cfg: &SpotEstimation<T>,
) -> Result<SpotFit<T>> {
    let spikes = match cfg.spike_k {
        Some(k) => {
            let r = rolling_series(h, cfg.rule)?;
            Some(detect_spikes(h.dates(), &r.spread, k)?)
        }
        None => None,
    };
    let ds = spot_dataset(h, model, cfg.rule, spikes.as_ref())?;
    let a = ols(&ds)?;
    let g = fit_garch(&ds.residuals(a))?;
    let theta0 = [a[0], a[1], a[2], g.kappa, g.gamma[0], g.alpha[0]];
    let (theta, ll, cov) = polish(&ds, &theta0)?;
    let (spike_pos, spike_neg) = match &spikes {
        Some(rep) => fit_spikes(h.dates(), rep, cfg),
        None => (SpikeParams::disabled(), SpikeParams::disabled()),
    };
    let params = SpotParams {
        model,
        a1: theta[0],
        a2: theta[1],
        a3: theta[2],
        garch: GarchParams::garch11(theta[3], theta[4], theta[5]),
        spike_pos,
        spike_neg,
    };
    Ok(SpotFit {
        params,
        loglik: ll,
        covariance: cov,
        dataset: ds,
        spikes,
    })
}

/// Joint likelihood maximization in coordinates where κ is scaled by the
/// residual variance.
fn polish<T: Real>(ds: &SpotDataset<T>, theta0: &[T; 6]) -> Result<(Vec<T>, T, Matrix<T>)> {
    let v = theta0[3] / (T::one() - theta0[4] - theta0[5]);
    let scale = [T::one(), T::one(), T::one(), v, T::one(), T::one()];
    let to_theta = |x: &[T]| -> Vec<T> { x.iter().zip(&scale).map(|(&a, &s)| a * s).collect() };
    let f = |x: &[T]| -ds.loglik(&to_theta(x)) / T::of(ds.len());
    let x0: Vec<T> = theta0.iter().zip(&scale).map(|(&a, &s)| a / s).collect();
    let gb = garch_bounds::<T>();
    let big = T::lit(1e6);
    let bounds = Bounds {
        lower: vec![-big, -big, -big, gb.lower[0] / v, gb.lower[1], gb.lower[2]],
        upper: vec![big, big, big, gb.upper[0] / v, gb.upper[1], gb.upper[2]],
    };
    let steps = |x: &[T]| -> Vec<T> { x.iter().map(|&c| (c.abs() * T::lit(1e-3)).max(T::lit(1e-5))).collect() };
    let opts = NelderMeadOptions {
        max_evals: 20_000,
        ftol: T::lit(1e-12),
        xtol: T::lit(1e-7),
        steps: x0.iter().map(|&c| (c.abs() * T::lit(0.05)).max(T::lit(1e-3))).collect(),
        restarts: 2,
    };
    let m = nelder_mead_whitened(&f, &x0, &bounds, &opts, steps, 3);
    let x = if m.value <= f(&x0) { m.x } else { x0 };
    let hs = steps(&x);
    let hess = hessian(&f, &x, &hs, Some(&bounds));
    // f is the mean negative log-likelihood: cov_x = (n H)^{-1}.
    let cov_x = hess.inverse()?.scale(T::one() / T::of(ds.len()));
    let mut cov = Matrix::zeros(6, 6);
    for r in 0..6 {
        for c in 0..6 {
            cov[(r, c)] = cov_x[(r, c)] * scale[r] * scale[c];
        }
    }
    if !cov.is_finite() {
        return Err(Error::Singular("spot likelihood Hessian not invertible".into()));
    }
    let theta = to_theta(&x);
    let ll = ds.loglik(&theta);
    Ok((theta, ll, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::{Month, TimeGrid};
    use crate::futures::{simulate_curves, GabillonParams};
    use chrono::Duration;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn garch_constant_variance() {
        let g = GarchParams::<f64>::garch11(0.3, 0.0, 0.0);
        let (v, _) = garch_filter(&[1.0, -2.0, 0.5], &g, 0.3).unwrap();
        assert_eq!(v, vec![0.3, 0.3, 0.3]);
    }

    #[test]
    fn garch_one_step() {
        let g = GarchParams::<f64>::garch11(0.1, 0.5, 0.2);
        let (v, z) = garch_filter(&[1.0, 0.4], &g, 1.0).unwrap();
        assert!((v[1] - 0.8).abs() < 1e-15);
        assert!((z[1] - 0.4 / 0.8f64.sqrt()).abs() < 1e-15);
        assert!(garch_filter(&[1.0], &GarchParams::garch11(0.1, 0.6, 0.5), 1.0).is_err());
    }

    #[test]
    fn garch_higher_order_filter() {
        let g = GarchParams::<f64> {
            kappa: 0.1,
            gamma: vec![0.2, 0.1],
            alpha: vec![0.3, 0.1],
        };
        let (v, _) = garch_filter(&[1.0, 2.0, 3.0], &g, 0.5).unwrap();
        assert!((v[1] - (0.1 + 0.2 * 0.5 + 0.1 * 0.5 + 0.3 * 1.0 + 0.1 * 0.5)).abs() < 1e-15);
        assert!((v[2] - (0.1 + 0.2 * v[1] + 0.1 * 0.5 + 0.3 * 4.0 + 0.1 * 1.0)).abs() < 1e-15);
        let mut p = SpotParams::<f64>::reference_model1();
        p.garch = g;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn garch_stationary_variance() {
        let g = GarchParams::garch11(1.6928e-5, 0.8764, 0.1138);
        let mut rng = path_rng(5, Stream::Spot, 0);
        let z: Vec<f64> = (0..400_000).map(|_| normal(&mut rng)).collect();
        let (eps, _) = garch_unfilter(&z, &g, g.unconditional_var()).unwrap();
        let v = eps.iter().map(|e| e * e).sum::<f64>() / eps.len() as f64;
        let target = g.unconditional_var();
        // persistence 0.9902 makes the sample variance converge slowly
        assert!((v / target - 1.0).abs() < 0.1, "{v} vs {target}");
    }

    #[test]
    fn spike_single_jump_closed_form() {
        let sp = SpikeParams::<f64>::reference_positive();
        let dates: Vec<NaiveDate> = (0..40).map(|k| d(2007, 1, 10) + Duration::days(k)).collect();
        let y = spike_path(&sp, &dates, &[(5, 0.7)]);
        for (i, &v) in y.iter().enumerate() {
            let expect = if i < 5 {
                0.0
            } else {
                0.7 * (-300.0 * (i - 5) as f64 / 365.0).exp()
            };
            assert!((v - expect).abs() < 1e-10);
        }
        let off: Vec<NaiveDate> = (0..10).map(|k| d(2007, 4, 1) + Duration::days(k)).collect();
        assert!(spike_path(&sp, &off, &[(3, 0.7)]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_intensity_spikes() {
        let mut sp = SpikeParams::<f64>::reference_negative();
        sp.intensity = 0.0;
        let dates: Vec<NaiveDate> = (0..30).map(|k| d(2007, 9, 1) + Duration::days(k)).collect();
        assert!(simulate_spikes(&sp, &dates, 5, 1, Stream::SpikeDown).unwrap().iter().all(|&v| v == 0.0));
    }

    fn curves(n_paths: usize, days: i64, seed: u64) -> CurvePathSet<f64> {
        let start = d(2007, 4, 1);
        let g = TimeGrid::daily(start, start + Duration::days(days), 1).unwrap();
        let months = Month::range(Month::new(2007, 5).unwrap(), Month::of(start + Duration::days(days)).add_months(3));
        let c: Vec<(Month, f64)> = months.iter().enumerate().map(|(k, &m)| (m, 7.0 + 0.05 * k as f64)).collect();
        simulate_curves(&GabillonParams::reference(), &c, ExpiryRule::default(), &g, n_paths, seed).unwrap()
    }

    fn quiet(model: SpotModel) -> SpotParams<f64> {
        SpotParams {
            model,
            a1: 0.0,
            a2: 0.0,
            a3: 0.0,
            garch: GarchParams::garch11(1e-300, 0.0, 0.0),
            spike_pos: SpikeParams::disabled(),
            spike_neg: SpikeParams::disabled(),
        }
    }

    #[test]
    fn model1_without_drift_or_noise_is_constant() {
        let c = curves(3, 60, 1);
        let s = simulate_spot_paths(&quiet(SpotModel::One), &c, 6.5, 2).unwrap();
        for m in 0..3 {
            assert!(s.base(m).iter().all(|&v| (v - 6.5).abs() < 1e-12));
        }
    }

    #[test]
    fn model2_unit_persistence_freezes_spread() {
        let c = curves(2, 90, 1);
        let mut p = quiet(SpotModel::Two);
        p.a2 = 1.0;
        let pb = c.prompt_back().unwrap();
        let s0 = 7.7;
        let y0 = (s0 - c.price(0, 0, pb[0].0)) / c.price(0, 0, pb[0].0);
        let s = simulate_spot_paths(&p, &c, s0, 2).unwrap();
        for i in 0..c.n_times() {
            let expect = c.price(0, i, pb[i].0) * (1.0 + y0);
            assert!((s.base(0)[i] - expect).abs() < 1e-10 * expect);
        }
    }

    #[test]
    fn spiked_is_base_times_exp_y_and_deterministic() {
        let c = curves(4, 200, 1);
        let mut p = SpotParams::<f64>::reference_model1();
        p.spike_pos.window = (1..=12).collect();
        p.spike_pos.intensity = 20.0;
        let a = simulate_spot_paths(&p, &c, 7.0, 11).unwrap();
        let b = simulate_spot_paths(&p, &c, 7.0, 11).unwrap();
        assert_eq!(a.spiked, b.spiked);
        let mut any_spike = false;
        for m in 0..4 {
            let mut up = vec![0.0; c.n_times()];
            spike_steps(&p.spike_pos, c.dates(), &mut path_rng(11, Stream::SpikeUp, m), &mut up);
            let mut dn = vec![0.0; c.n_times()];
            spike_steps(&p.spike_neg, c.dates(), &mut path_rng(11, Stream::SpikeDown, m), &mut dn);
            for i in 0..c.n_times() {
                let ratio = a.spiked(m)[i] / a.base(m)[i];
                let expect = (up[i] + dn[i]).exp();
                assert!((ratio / expect - 1.0).abs() < 1e-12);
                any_spike |= up[i] != 0.0;
            }
        }
        assert!(any_spike);
    }

    #[test]
    fn spike_decay_between_arrivals() {
        let sp = SpikeParams::<f64> {
            intensity: 30.0,
            window: (1..=12).collect(),
            ..SpikeParams::reference_positive()
        };
        let dates: Vec<NaiveDate> = (0..300).map(|k| d(2007, 1, 1) + Duration::days(k)).collect();
        let y = simulate_spikes(&sp, &dates, 1, 4, Stream::SpikeUp).unwrap();
        let mut rng = path_rng(4, Stream::SpikeUp, 0);
        let decay = (-300.0f64 / 365.0).exp();
        for i in 1..dates.len() {
            let n = poisson(&mut rng, 30.0 / 365.0);
            for _ in 0..n {
                normal(&mut rng);
            }
            if n == 0 {
                assert_eq!(y[i], y[i - 1] * decay);
            }
        }
    }

    #[test]
    fn model2_floor_keeps_prices_positive() {
        let c = curves(20, 120, 3);
        let mut p = SpotParams::<f64>::default_model2();
        p.a1 = -0.5;
        p.garch = GarchParams::garch11(0.05, 0.1, 0.1);
        let s = simulate_spot_paths(&p, &c, 7.0, 5).unwrap();
        assert!(s.base.iter().all(|&v| v > 0.0));
        assert!(s.floors().iter().sum::<u32>() > 0);
    }

    fn synthetic_history(p: &SpotParams<f64>, days: i64, seed: u64) -> PriceHistory<f64> {
        let start = d(1995, 1, 2);
        let end = start + Duration::days(days);
        let g = TimeGrid::daily(start, end, 1).unwrap();
        let months = Month::range(Month::new(1995, 2).unwrap(), Month::of(end).add_months(3));
        let c: Vec<(Month, f64)> = months.iter().map(|&m| (m, 5.0)).collect();
        let cs = simulate_curves(&GabillonParams::reference(), &c, ExpiryRule::default(), &g, 1, seed).unwrap();
        let s = simulate_spot_paths(p, &cs, 5.0, seed + 1).unwrap();
        crate::futures::path_as_history(&cs, 0, s.spiked(0)).unwrap()
    }

    #[test]
    fn model1_recovery() {
        let mut truth = SpotParams::<f64>::reference_model1();
        truth.spike_pos = SpikeParams::disabled();
        truth.spike_neg = SpikeParams::disabled();
        let h = synthetic_history(&truth, 5000, 31);
        let cfg = SpotEstimation {
            spike_k: None,
            ..SpotEstimation::default()
        };
        let fit = estimate_spot(&h, SpotModel::One, &cfg).unwrap();
        let se = fit.std_errors();
        let est = fit.params.theta();
        let t = truth.theta();
        assert!((est[1] - t[1]).abs() < 2.0 * se[1], "a2 {} ± {}", est[1], se[1]);
        assert!(fit.loglik >= fit.dataset.loglik(&t));
    }

    #[test]
    fn spike_fit_from_detected_events() {
        let h = synthetic_history(&SpotParams::reference_model1(), 3000, 8);
        let fit = estimate_spot(&h, SpotModel::One, &SpotEstimation::default()).unwrap();
        assert!(fit.dataset.excised > 0);
        assert!(fit.params.spike_pos.intensity > 0.0);
        assert!(fit.params.spike_neg.jump_mean < 0.0);
        assert_eq!(fit.params.spike_pos.beta, 300.0);
    }
}
