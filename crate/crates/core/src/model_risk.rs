//! Perturbed spot-model families and the value and wealth ranges across them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::market_data::PriceHistory;
use crate::pipeline::{run_historical, Experiment, Seeds};
use crate::rng::{normal, path_rng, Stream};
use crate::scalar::Real;
use crate::spot::{GarchParams, SpotDataset, SpotParams};
use crate::stats::ks_standard_normal;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyConfig<T> {
    pub n_target: usize,
    /// Relative log-likelihood slack: accept when `ll >= ll* - ε |ll*|`.
    pub epsilon: T,
    /// Significance level of the normality test on standardized residuals.
    pub ks_level: f64,
    /// Draw cap; `None` means `50 n_target`.
    pub max_attempts: Option<usize>,
}

impl<T: Real> FamilyConfig<T> {
    pub fn new(n_target: usize) -> Self {
        Self {
            n_target,
            epsilon: T::lit(0.05),
            ks_level: 0.05,
            max_attempts: None,
        }
    }

    pub fn attempt_cap(&self) -> usize {
        self.max_attempts.unwrap_or(50 * self.n_target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    NonStationary,
    Normality,
    Likelihood,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::NonStationary => "non_stationary",
            RejectReason::Normality => "normality",
            RejectReason::Likelihood => "likelihood",
        }
    }
}

/// One perturbation draw and its test results.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw<T> {
    pub theta: [T; 6],
    pub loglik: T,
    pub ks_p_value: f64,
    pub rejected: Option<RejectReason>,
}

#[derive(Debug, Clone)]
pub struct ModelFamily<T> {
    pub base: SpotParams<T>,
    pub base_loglik: T,
    pub members: Vec<SpotParams<T>>,
    /// Every draw in order, accepted or not.
    pub draws: Vec<Draw<T>>,
    pub epsilon: T,
    pub ks_level: f64,
}

impl<T: Real> ModelFamily<T> {
    pub fn rejected(&self, reason: RejectReason) -> usize {
        self.draws.iter().filter(|d| d.rejected == Some(reason)).count()
    }

    /// The first `n` members, for enlargement checks.
    pub fn truncated(&self, n: usize) -> Self {
        let mut f = self.clone();
        f.members.truncate(n);
        f
    }

    /// Likelihood threshold members must reach.
    pub fn threshold(&self) -> T {
        self.base_loglik - self.epsilon * self.base_loglik.abs()
    }
}

fn admissible<T: Real>(theta: &[T; 6]) -> bool {
    let g = GarchParams::garch11(theta[3], theta[4], theta[5]);
    theta[3] > T::zero() && theta[4] >= T::zero() && theta[5] >= T::zero() && g.is_stationary()
}

/// Draws `θ* + L z` with `L L' = Σ*` and keeps draws whose standardized
/// residuals on `data` pass the normality test and whose log-likelihood is
/// within the slack. Only the six regression and GARCH parameters move.
pub fn generate_family<T: Real>(
    base: &SpotParams<T>,
    sigma: &Matrix<T>,
    data: &SpotDataset<T>,
    cfg: &FamilyConfig<T>,
    seed: u64,
) -> Result<ModelFamily<T>> {
    base.validate()?;
    if cfg.n_target == 0 {
        return Err(Error::Config("family size must be positive".into()));
    }
    if !(cfg.epsilon >= T::zero()) || !(cfg.ks_level > 0.0 && cfg.ks_level < 1.0) {
        return Err(Error::Config("epsilon must be >= 0 and ks_level in (0, 1)".into()));
    }
    if sigma.rows() != 6 || sigma.cols() != 6 {
        return Err(Error::domain("perturbation covariance must be 6 x 6"));
    }
    let chol = sigma.cholesky_psd(T::lit(1e-12))?;
    let theta_star = base.theta();
    let base_loglik = data.loglik(&theta_star);
    if !base_loglik.is_finite() {
        return Err(Error::domain("base parameters have non-finite likelihood on the data"));
    }
    let mut fam = ModelFamily {
        base: base.clone(),
        base_loglik,
        members: Vec::with_capacity(cfg.n_target),
        draws: Vec::new(),
        epsilon: cfg.epsilon,
        ks_level: cfg.ks_level,
    };
    let threshold = fam.threshold();
    let cap = cfg.attempt_cap();
    for attempt in 0..cap {
        if fam.members.len() == cfg.n_target {
            break;
        }
        let mut rng = path_rng(seed, Stream::Family, attempt);
        let z: Vec<T> = (0..6).map(|_| T::lit(normal(&mut rng))).collect();
        let shift = chol.matvec(&z);
        let mut theta = theta_star;
        for (t, s) in theta.iter_mut().zip(&shift) {
            *t += *s;
        }
        let mut d = Draw {
            theta,
            loglik: T::neg_infinity(),
            ks_p_value: f64::NAN,
            rejected: None,
        };
        if !admissible(&theta) {
            d.rejected = Some(RejectReason::NonStationary);
        } else {
            let resid = data.standardized(&theta)?;
            d.ks_p_value = ks_standard_normal(&resid).p_value;
            d.loglik = data.loglik(&theta);
            if d.ks_p_value < cfg.ks_level {
                d.rejected = Some(RejectReason::Normality);
            } else if !(d.loglik >= threshold) {
                d.rejected = Some(RejectReason::Likelihood);
            }
        }
        if d.rejected.is_none() {
            fam.members.push(base.with_theta(&theta));
        }
        fam.draws.push(d);
    }
    log::info!(
        "family: {} accepted of {} draws (non-stationary {}, normality {}, likelihood {})",
        fam.members.len(),
        fam.draws.len(),
        fam.rejected(RejectReason::NonStationary),
        fam.rejected(RejectReason::Normality),
        fam.rejected(RejectReason::Likelihood)
    );
    if fam.members.is_empty() {
        return Err(Error::FamilyConstruction {
            attempts: fam.draws.len(),
            non_stationary: fam.rejected(RejectReason::NonStationary),
            normality: fam.rejected(RejectReason::Normality),
            likelihood: fam.rejected(RejectReason::Likelihood),
        });
    }
    Ok(fam)
}

/// `(max - min) / |base|` over member values.
pub fn relative_range<T: Real>(values: &[T], base: T) -> Result<T> {
    if values.is_empty() {
        return Err(Error::domain("no member values"));
    }
    if base == T::zero() || !base.is_finite() {
        return Err(Error::domain(format!("base value {base} cannot normalize a range")));
    }
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    Ok((hi - lo) / base.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskMeasure<T> {
    /// Value of the base model.
    pub base: T,
    /// Value per member, in family order.
    pub members: Vec<T>,
    pub pi: T,
}

impl<T: Real> RiskMeasure<T> {
    pub fn new(base: T, members: Vec<T>) -> Result<Self> {
        let pi = relative_range(&members, base)?;
        Ok(Self { base, members, pi })
    }

    /// Recomputes the measure on the first `n` members.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(self.base, self.members[..n.min(self.members.len())].to_vec())
    }
}

fn with_spot<T: Real>(exp: &Experiment<T>, p: &SpotParams<T>) -> Experiment<T> {
    let mut e = exp.clone();
    e.spot = p.clone();
    e
}

fn member_err(member: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Member {
        member,
        source: Box::new(e),
    }
}

/// Simulated extrinsic value under every member, with common random numbers
/// across members.
pub fn risk_pi1<T: Real>(family: &ModelFamily<T>, exp: &Experiment<T>, seeds: Seeds) -> Result<RiskMeasure<T>> {
    let value = |p: &SpotParams<T>| -> Result<T> { Ok(with_spot(exp, p).run(seeds)?.report.extrinsic_value) };
    let base = value(&family.base)?;
    let members = family
        .members
        .par_iter()
        .enumerate()
        .map(|(k, p)| value(p).map_err(member_err(k)))
        .collect::<Result<Vec<T>>>()?;
    RiskMeasure::new(base, members)
}

/// Hedged wealth realized on the historical path by the policy and hedge
/// fitted under every member.
pub fn risk_pi2<T: Real>(
    family: &ModelFamily<T>,
    exp: &Experiment<T>,
    h: &PriceHistory<T>,
    seeds: Seeds,
) -> Result<RiskMeasure<T>> {
    let wealth = |p: &SpotParams<T>| -> Result<T> {
        let (policy, plan) = with_spot(exp, p).fit(seeds.backward)?;
        Ok(run_historical(&policy, &plan, h, exp.rule)?.hedged_wealth())
    };
    let base = wealth(&family.base)?;
    let members = family
        .members
        .par_iter()
        .enumerate()
        .map(|(k, p)| wealth(p).map_err(member_err(k)))
        .collect::<Result<Vec<T>>>()?;
    RiskMeasure::new(base, members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spot::SpotModel;
    use chrono::{Duration, NaiveDate};

    /// Model-1 style sample simulated from known parameters.
    fn dataset(theta: [f64; 6], n: usize) -> SpotDataset<f64> {
        let g = GarchParams::garch11(theta[3], theta[4], theta[5]);
        let mut rng = path_rng(17, Stream::Spot, 0);
        let z: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let (eps, _) = crate::spot::garch_unfilter(&z, &g, g.unconditional_var()).unwrap();
        let x1: Vec<f64> = (0..n).map(|t| (t as f64 * 0.37).sin()).collect();
        let x2: Vec<f64> = (0..n).map(|t| (t as f64 * 0.11).cos()).collect();
        let y: Vec<f64> = (0..n).map(|t| theta[0] + theta[1] * x1[t] + theta[2] * x2[t] + eps[t]).collect();
        let d0 = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        SpotDataset {
            model: SpotModel::One,
            dates: (0..n).map(|t| d0 + Duration::days(t as i64)).collect(),
            y,
            x1,
            x2,
            excised: 0,
        }
    }

    fn base() -> SpotParams<f64> {
        SpotParams::reference_model1().with_theta(&[0.01, 0.5, -0.3, 0.0004, 0.85, 0.1])
    }

    fn sigma(scale: f64) -> Matrix<f64> {
        Matrix::from_diagonal(&[1e-6, 1e-4, 1e-4, 1e-10, 1e-4, 1e-4]).scale(scale)
    }

    #[test]
    fn zero_covariance_accepts_base_copies() {
        let b = base();
        let ds = dataset(b.theta(), 1500);
        let fam = generate_family(&b, &sigma(0.0), &ds, &FamilyConfig::new(5), 1).unwrap();
        assert_eq!(fam.members.len(), 5);
        assert!(fam.members.iter().all(|m| m.theta() == b.theta()));
        assert_eq!(fam.draws.len(), 5);
    }

    #[test]
    fn members_pass_both_tests() {
        let b = base();
        let ds = dataset(b.theta(), 1500);
        let fam = generate_family(&b, &sigma(1.0), &ds, &FamilyConfig::new(30), 2).unwrap();
        assert_eq!(fam.members.len(), 30);
        for m in &fam.members {
            assert!(ds.loglik(&m.theta()) >= fam.threshold());
            let p = ks_standard_normal(&ds.standardized(&m.theta()).unwrap()).p_value;
            assert!(p >= fam.ks_level);
        }
        assert!(fam.members.iter().any(|m| m.theta() != b.theta()));
    }

    #[test]
    fn zero_slack_rejects_perturbations() {
        let b = base();
        let ds = dataset(b.theta(), 1500);
        let mut cfg = FamilyConfig::new(3);
        cfg.epsilon = 0.0;
        cfg.max_attempts = Some(40);
        // the data are not fitted exactly, so draws may beat θ*; they must
        // never fall below it
        match generate_family(&b, &sigma(100.0), &ds, &cfg, 3) {
            Ok(fam) => {
                for m in &fam.members {
                    assert!(ds.loglik(&m.theta()) >= fam.base_loglik);
                }
            }
            Err(Error::FamilyConstruction { attempts, .. }) => assert_eq!(attempts, 40),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn nonstationary_draws_are_counted() {
        let b = base().with_theta(&[0.01, 0.5, -0.3, 0.0004, 0.89, 0.1]);
        let ds = dataset(b.theta(), 800);
        let mut cfg = FamilyConfig::new(10);
        cfg.epsilon = 1.0;
        cfg.ks_level = 1e-9;
        let fam = generate_family(&b, &sigma(4.0), &ds, &cfg, 4).unwrap();
        assert!(fam.rejected(RejectReason::NonStationary) > 0);
        assert!(fam
            .members
            .iter()
            .all(|m| m.garch.is_stationary() && m.garch.kappa > 0.0));
    }

    #[test]
    fn empty_family_reports_breakdown() {
        let b = base();
        let ds = dataset(b.theta(), 800);
        let mut cfg = FamilyConfig::new(2);
        cfg.epsilon = 0.0;
        cfg.max_attempts = Some(5);
        let s = Matrix::from_diagonal(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        match generate_family(&b, &s, &ds, &cfg, 5) {
            Err(Error::FamilyConstruction {
                attempts,
                normality,
                likelihood,
                ..
            }) => {
                assert_eq!(attempts, 5);
                assert_eq!(normality + likelihood, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let b = base();
        let ds = dataset(b.theta(), 800);
        let cfg = FamilyConfig::new(8);
        let a = generate_family(&b, &sigma(1.0), &ds, &cfg, 9).unwrap();
        let c = generate_family(&b, &sigma(1.0), &ds, &cfg, 9).unwrap();
        assert_eq!(a.draws, c.draws);
    }

    #[test]
    fn range_arithmetic() {
        assert_eq!(relative_range(&[5.0], 100.0).unwrap(), 0.0);
        assert!((relative_range(&[110.0f64, 90.0], 100.0).unwrap() - 0.2).abs() < 1e-15);
        assert!(relative_range(&[1.0], 0.0).is_err());
        let m = RiskMeasure::new(100.0, vec![100.0, 104.0, 97.0, 112.0]).unwrap();
        let mut last = 0.0;
        for n in 1..=4 {
            let p = m.truncated(n).unwrap().pi;
            assert!(p >= last);
            last = p;
        }
    }
}
