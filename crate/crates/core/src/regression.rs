//! Least-squares conditional expectations on a quadratic polynomial basis.

use crate::error::{Error, Result};
use crate::linalg::ThinQr;
use crate::scalar::Real;

/// Identifier written into policy files for the quadratic basis.
pub const QUADRATIC_BASIS: &str = "quadratic";

/// Relative residual norm below which a column counts as dependent.
pub const DEPENDENCE_TOL: f64 = 1e-4;

/// Number of quadratic features in `k` raw variables: intercept, linear
/// terms and every product `z_i z_j` with `i <= j`.
pub const fn quadratic_len(k: usize) -> usize {
    1 + k + k * (k + 1) / 2
}

/// Writes the quadratic features of standardized variables `z` into `out`.
pub fn quadratic_features<T: Real>(z: &[T], out: &mut [T]) {
    let k = z.len();
    out[0] = T::one();
    out[1..=k].copy_from_slice(z);
    let mut c = k + 1;
    for i in 0..k {
        for j in i..k {
            out[c] = z[i] * z[j];
            c += 1;
        }
    }
}

/// Per-variable centring and scaling fitted on one cross-section. Variables
/// with no spread get a zero scale, which zeroes every feature using them.
/// Inputs are clamped to the fitted range so the polynomial never
/// extrapolates.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Real> Standardizer<T> {
    /// `vars[v][m]`: value of variable `v` on path `m`.
    pub fn fit(vars: &[Vec<T>]) -> Self {
        let mut mean = Vec::with_capacity(vars.len());
        let mut inv_std = Vec::with_capacity(vars.len());
        let mut lo = Vec::with_capacity(vars.len());
        let mut hi = Vec::with_capacity(vars.len());
        for x in vars {
            lo.push(x.iter().copied().fold(T::infinity(), T::min));
            hi.push(x.iter().copied().fold(T::neg_infinity(), T::max));
            let n = T::of(x.len().max(1));
            let m = x.iter().copied().sum::<T>() / n;
            let var = x.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
            let sd = var.sqrt();
            let floor = T::lit(1e-12) * (m.abs() + T::one());
            mean.push(m);
            inv_std.push(if sd > floor { T::one() / sd } else { T::zero() });
        }
        Self { mean, inv_std, lo, hi }
    }

    /// A standardizer that maps every input to zero.
    pub fn constant(k: usize) -> Self {
        Self {
            mean: vec![T::zero(); k],
            inv_std: vec![T::zero(); k],
            lo: vec![T::neg_infinity(); k],
            hi: vec![T::infinity(); k],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    pub fn n_features(&self) -> usize {
        quadratic_len(self.n_vars())
    }

    /// Feature mask: false for features that involve a constant variable.
    pub fn active(&self) -> Vec<bool> {
        let live: Vec<bool> = self.inv_std.iter().map(|&s| s != T::zero()).collect();
        let k = live.len();
        let mut out = vec![true; quadratic_len(k)];
        for i in 0..k {
            out[1 + i] = live[i];
        }
        let mut c = k + 1;
        for i in 0..k {
            for j in i..k {
                out[c] = live[i] && live[j];
                c += 1;
            }
        }
        out
    }

    pub fn features(&self, raw: &[T], out: &mut [T]) {
        let z: Vec<T> = raw
            .iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(((&x, &m), &s), (&lo, &hi))| (x.max(lo).min(hi) - m) * s)
            .collect();
        quadratic_features(&z, out);
    }

    /// Feature columns for a cross-section, `cols[f][m]`.
    pub fn columns(&self, vars: &[Vec<T>]) -> Vec<Vec<T>> {
        let n = vars.first().map_or(0, Vec::len);
        let p = self.n_features();
        let mut cols = vec![vec![T::zero(); n]; p];
        let mut raw = vec![T::zero(); vars.len()];
        let mut f = vec![T::zero(); p];
        for m in 0..n {
            for (r, v) in raw.iter_mut().zip(vars) {
                *r = v[m];
            }
            self.features(&raw, &mut f);
            for (c, &fv) in cols.iter_mut().zip(&f) {
                c[m] = fv;
            }
        }
        cols
    }
}

/// A design matrix factored once and reused for many right-hand sides.
/// Columns that are numerically dependent on earlier ones are dropped, so
/// near-collinear quadratic terms cannot produce large cancelling
/// coefficients.
pub struct Design<'a, T> {
    cols: Vec<&'a [T]>,
    active: Vec<usize>,
    n_features: usize,
    qr: ThinQr<T>,
    dropped: usize,
}

impl<'a, T: Real> Design<'a, T> {
    /// `columns[f]` are feature columns; only `active` ones enter the fit.
    pub fn new(columns: &'a [Vec<T>], active: &[bool]) -> Result<Self> {
        let idx: Vec<usize> = (0..columns.len()).filter(|&f| active[f]).collect();
        let n = columns.first().map_or(0, Vec::len);
        if n < idx.len() {
            return Err(Error::InsufficientData {
                needed: idx.len(),
                got: n,
            });
        }
        let candidates: Vec<&[T]> = idx.iter().map(|&f| columns[f].as_slice()).collect();
        let (qr, kept) = ThinQr::factor_greedy(&candidates, T::lit(DEPENDENCE_TOL));
        let dropped = idx.len() - kept.len();
        if dropped > 0 {
            log::trace!("dropped {dropped} dependent regression columns");
        }
        Ok(Self {
            cols: kept.iter().map(|&k| candidates[k]).collect(),
            active: kept.iter().map(|&k| idx[k]).collect(),
            n_features: columns.len(),
            qr,
            dropped,
        })
    }

    /// Number of candidate columns dropped as dependent.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Full-length coefficients, zero on inactive or dropped features.
    pub fn fit(&self, y: &[T]) -> Result<Vec<T>> {
        let b = self.qr.solve(y);
        let mut out = vec![T::zero(); self.n_features];
        for (&f, v) in self.active.iter().zip(b) {
            out[f] = v;
        }
        Ok(out)
    }

    /// Fitted values `X β`.
    pub fn predict(&self, beta: &[T]) -> Vec<T> {
        let n = self.cols.first().map_or(0, |c| c.len());
        let mut out = vec![T::zero(); n];
        for (&f, c) in self.active.iter().zip(&self.cols) {
            let b = beta[f];
            for (o, &x) in out.iter_mut().zip(c.iter()) {
                *o += b * x;
            }
        }
        out
    }
}

/// Least-squares coefficients of `targets` on all feature columns.
pub fn regress_condexp<T: Real>(columns: &[Vec<T>], targets: &[T]) -> Result<Vec<T>> {
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("regression targets must be finite"));
    }
    let active = vec![true; columns.len()];
    Design::new(columns, &active)?.fit(targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, path_rng, Stream};

    #[test]
    fn feature_count_and_order() {
        assert_eq!(quadratic_len(3), 10);
        assert_eq!(quadratic_len(4), 15);
        let mut f = [0.0; 10];
        quadratic_features(&[2.0, 3.0, 5.0], &mut f);
        assert_eq!(f, [1.0, 2.0, 3.0, 5.0, 4.0, 6.0, 10.0, 9.0, 15.0, 25.0]);
    }

    fn cross_section(n: usize) -> Vec<Vec<f64>> {
        let mut rng = path_rng(3, Stream::Spot, 0);
        (0..3).map(|_| (0..n).map(|_| normal(&mut rng)).collect()).collect()
    }

    #[test]
    fn constant_targets() {
        let vars = cross_section(200);
        let st = Standardizer::fit(&vars);
        let cols = st.columns(&vars);
        let b = regress_condexp(&cols, &vec![7.5; 200]).unwrap();
        assert!((b[0] - 7.5).abs() < 1e-12);
        assert!(b[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_target_recovered() {
        let vars = cross_section(300);
        let st = Standardizer::fit(&vars);
        let cols = st.columns(&vars);
        let b = regress_condexp(&cols, &cols[2]).unwrap();
        for (f, v) in b.iter().enumerate() {
            let expect = if f == 2 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_target_fits() {
        let mut rng = path_rng(9, Stream::Spot, 1);
        let s: Vec<f64> = (0..1000).map(|_| 5.0 * (0.3 * normal(&mut rng)).exp()).collect();
        let vars = vec![s.iter().map(|v| v.ln()).collect::<Vec<_>>(), s.clone()];
        let st = Standardizer::fit(&vars);
        let cols = st.columns(&vars);
        let y: Vec<f64> = s.iter().map(|v| v * v).collect();
        let b = regress_condexp(&cols, &y).unwrap();
        let design = Design::new(&cols, &[true; 6]).unwrap();
        let fit = design.predict(&b);
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        let ss_res: f64 = y.iter().zip(&fit).map(|(a, b)| (a - b).powi(2)).sum();
        let ss_tot: f64 = y.iter().map(|a| (a - ybar).powi(2)).sum();
        assert!(1.0 - ss_res / ss_tot > 0.999);
    }

    #[test]
    fn inputs_clamped_to_fitted_range() {
        let vars = vec![vec![0.0, 1.0, 2.0, 3.0]];
        let st = Standardizer::fit(&vars);
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        st.features(&[3.0], &mut a);
        st.features(&[50.0], &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn constant_variable_is_dropped() {
        let mut vars = cross_section(100);
        vars[1] = vec![4.0; 100];
        let st = Standardizer::fit(&vars);
        let active = st.active();
        assert_eq!(active.iter().filter(|&&a| a).count(), 6);
        let cols = st.columns(&vars);
        assert!(cols[2].iter().all(|&v| v == 0.0));
        let d = Design::new(&cols, &active).unwrap();
        assert_eq!(d.dropped(), 0);
    }

    #[test]
    fn collinear_column_is_dropped() {
        let mut vars = cross_section(100);
        vars[1] = vars[0].iter().map(|v| 2.0 * v + 1.0).collect();
        let st = Standardizer::fit(&vars);
        let cols = st.columns(&vars);
        let d = Design::new(&cols, &st.active()).unwrap();
        assert!(d.dropped() > 0);
        let y: Vec<f64> = vars[0].iter().map(|v| 3.0 * v).collect();
        let fit = d.predict(&d.fit(&y).unwrap());
        assert!(fit.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
