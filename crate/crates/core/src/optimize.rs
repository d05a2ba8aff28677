//! Derivative-free minimization (Nelder-Mead with box projection) and
//! finite-difference Hessians.

use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct Bounds<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
}

impl<T: Real> Bounds<T> {
    pub fn project(&self, x: &mut [T]) {
        for ((v, &lo), &hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.max(lo).min(hi);
        }
    }

    /// Names of coordinates sitting on a bound (within `tol` of the range).
    pub fn active(&self, x: &[T], tol: T) -> Vec<usize> {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .enumerate()
            .filter(|(_, (&v, (&lo, &hi)))| {
                let span = (hi - lo).abs().max(T::one());
                (v - lo).abs() <= tol * span || (hi - v).abs() <= tol * span
            })
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct NelderMeadOptions<T> {
    pub max_evals: usize,
    /// Absolute tolerance on the spread of simplex values.
    pub ftol: T,
    /// Tolerance on the simplex extent, relative to `steps`.
    pub xtol: T,
    /// Initial simplex edge per coordinate.
    pub steps: Vec<T>,
    /// Number of restarts from the incumbent once converged.
    pub restarts: usize,
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub evaluations: usize,
    pub converged: bool,
}

pub fn nelder_mead<T, F>(
    f: F,
    x0: &[T],
    bounds: &Bounds<T>,
    opts: &NelderMeadOptions<T>,
) -> Minimum<T>
where
    T: Real,
    F: Fn(&[T]) -> T,
{
    let eval = |x: &[T]| {
        let v = f(x);
        if v.is_nan() {
            T::infinity()
        } else {
            v
        }
    };
    let mut start = x0.to_vec();
    bounds.project(&mut start);
    let mut total = 0usize;
    let mut best = Minimum {
        value: eval(&start),
        x: start,
        evaluations: 1,
        converged: false,
    };
    for _ in 0..=opts.restarts {
        let budget = opts.max_evals.saturating_sub(total);
        if budget == 0 {
            break;
        }
        let run = nelder_mead_once(&eval, &best.x, bounds, opts, budget);
        total += run.evaluations;
        let improved = run.value < best.value;
        let converged = run.converged;
        if improved || run.value == best.value {
            best = run;
        }
        best.converged = converged;
        if converged && !improved {
            break;
        }
    }
    best.evaluations = total;
    best
}

fn nelder_mead_once<T, F>(
    f: &F,
    x0: &[T],
    bounds: &Bounds<T>,
    opts: &NelderMeadOptions<T>,
    max_evals: usize,
) -> Minimum<T>
where
    T: Real,
    F: Fn(&[T]) -> T,
{
    let n = x0.len();
    let (alpha, gamma, rho, sigma) = (T::one(), T::two(), T::half(), T::half());
    let evals = std::cell::Cell::new(0usize);
    let call = |x: &[T]| {
        evals.set(evals.get() + 1);
        f(x)
    };

    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.steps[i];
        bounds.project(&mut v);
        if v[i] == x0[i] {
            v[i] -= opts.steps[i];
            bounds.project(&mut v);
        }
        simplex.push(v);
    }
    let mut values: Vec<T> = simplex.iter().map(|x| call(x)).collect();
    let mut converged = false;

    while evals.get() < max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| {
            values[a]
                .partial_cmp(&values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = (values[n] - values[0]).abs();
        let extent = (1..=n)
            .map(|k| {
                (0..n)
                    .map(|i| (simplex[k][i] - simplex[0][i]).abs() / opts.steps[i].abs())
                    .fold(T::zero(), T::max)
            })
            .fold(T::zero(), T::max);
        if spread <= opts.ftol && extent <= opts.xtol {
            converged = true;
            break;
        }

        let mut centroid = vec![T::zero(); n];
        for x in &simplex[..n] {
            for (c, &v) in centroid.iter_mut().zip(x) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= T::of(n));

        let along = |coef: T| -> Vec<T> {
            let mut p: Vec<T> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(&c, &w)| c + coef * (c - w))
                .collect();
            bounds.project(&mut p);
            p
        };

        let xr = along(alpha);
        let fr = call(&xr);
        if fr < values[0] {
            let xe = along(gamma);
            let fe = call(&xe);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let xc = along(rho);
                let fc = call(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = call(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                let best = simplex[0].clone();
                for k in 1..=n {
                    for i in 0..n {
                        simplex[k][i] = best[i] + sigma * (simplex[k][i] - best[i]);
                    }
                    values[k] = call(&simplex[k]);
                }
            }
        }
    }

    let (ib, _) = values
        .iter()
        .enumerate()
        .fold((0, T::infinity()), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
    Minimum {
        x: simplex[ib].clone(),
        value: values[ib],
        evaluations: evals.get(),
        converged,
    }
}

/// Nelder-Mead followed by rounds restarted in coordinates whitened by the
/// finite-difference Hessian at the incumbent. Helps on narrow curved valleys
/// where plain simplex search stalls.
pub fn nelder_mead_whitened<T, F>(
    f: F,
    x0: &[T],
    bounds: &Bounds<T>,
    opts: &NelderMeadOptions<T>,
    hess_steps: impl Fn(&[T]) -> Vec<T>,
    rounds: usize,
) -> Minimum<T>
where
    T: Real,
    F: Fn(&[T]) -> T,
{
    let mut best = nelder_mead(&f, x0, bounds, opts);
    let mut total = best.evaluations;
    for _ in 0..rounds {
        let Some(back) = whitening(&f, &best.x, &hess_steps(&best.x), bounds) else {
            break;
        };
        let n = best.x.len();
        let origin = best.x.clone();
        let inside = |x: &[T]| {
            x.iter()
                .zip(bounds.lower.iter().zip(&bounds.upper))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
        };
        let to_x = |y: &[T]| -> Vec<T> {
            let dx = back.matvec(y);
            origin.iter().zip(dx).map(|(&o, d)| o + d).collect()
        };
        let g = |y: &[T]| {
            let x = to_x(y);
            if inside(&x) {
                f(&x)
            } else {
                T::infinity()
            }
        };
        let wide = Bounds {
            lower: vec![T::lit(-1e12); n],
            upper: vec![T::lit(1e12); n],
        };
        let wopts = NelderMeadOptions {
            steps: vec![T::one(); n],
            ..opts.clone()
        };
        let run = nelder_mead(g, &vec![T::zero(); n], &wide, &wopts);
        total += run.evaluations;
        let gain = best.value - run.value;
        if run.value <= best.value {
            best = Minimum {
                x: to_x(&run.x),
                value: run.value,
                evaluations: 0,
                converged: run.converged,
            };
        }
        if run.converged && gain <= opts.ftol {
            best.converged = true;
            break;
        }
    }
    best.evaluations = total;
    best
}

/// `(L^T)^{-1}` for `H = L L^T`, regularizing `H` until it is positive definite.
fn whitening<T, F>(f: &F, x: &[T], steps: &[T], bounds: &Bounds<T>) -> Option<Matrix<T>>
where
    T: Real,
    F: Fn(&[T]) -> T,
{
    let h = hessian(f, x, steps, Some(bounds));
    if !h.is_finite() {
        return None;
    }
    let n = x.len();
    let trace = h.diagonal().into_iter().map(|v| v.abs()).fold(T::zero(), |a, b| a + b) / T::of(n);
    let mut shift = T::zero();
    for _ in 0..12 {
        let mut reg = h.clone();
        for i in 0..n {
            reg[(i, i)] += shift;
        }
        if let Ok(l) = reg.cholesky_psd(T::zero()) {
            if (0..n).all(|i| l[(i, i)] > T::zero()) {
                return l.transpose().inverse().ok();
            }
        }
        shift = if shift == T::zero() { trace * T::lit(1e-8) } else { shift * T::lit(10.0) };
    }
    None
}

/// Central finite-difference Hessian. Steps shrink near the bounds so every
/// probe stays feasible.
pub fn hessian<T, F>(f: F, x: &[T], steps: &[T], bounds: Option<&Bounds<T>>) -> Matrix<T>
where
    T: Real,
    F: Fn(&[T]) -> T,
{
    let n = x.len();
    let h: Vec<T> = (0..n)
        .map(|i| {
            let mut hi = steps[i];
            if let Some(b) = bounds {
                let room = (x[i] - b.lower[i]).min(b.upper[i] - x[i]);
                if room > T::zero() {
                    hi = hi.min(room * T::half());
                }
            }
            hi
        })
        .collect();
    let f0 = f(x);
    let mut out = Matrix::zeros(n, n);
    let mut probe = x.to_vec();
    for i in 0..n {
        probe[i] = x[i] + h[i];
        let fp = f(&probe);
        probe[i] = x[i] - h[i];
        let fm = f(&probe);
        probe[i] = x[i];
        out[(i, i)] = (fp - T::two() * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let mut g = |si: T, sj: T| {
                probe[i] = x[i] + si * h[i];
                probe[j] = x[j] + sj * h[j];
                let v = f(&probe);
                probe[i] = x[i];
                probe[j] = x[j];
                v
            };
            let v = (g(T::one(), T::one()) - g(T::one(), -T::one()) - g(-T::one(), T::one())
                + g(-T::one(), -T::one()))
                / (T::lit(4.0) * h[i] * h[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(n: usize) -> NelderMeadOptions<f64> {
        NelderMeadOptions {
            max_evals: 5000,
            ftol: 1e-14,
            xtol: 1e-8,
            steps: vec![0.5; n],
            restarts: 2,
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let b = Bounds {
            lower: vec![-5.0, -5.0],
            upper: vec![5.0, 5.0],
        };
        let m = nelder_mead(f, &[-1.2, 1.0], &b, &opts(2));
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| (x[0] + 3.0).powi(2);
        let b = Bounds {
            lower: vec![0.0],
            upper: vec![1.0],
        };
        let m = nelder_mead(f, &[0.5], &b, &opts(1));
        assert_eq!(m.x[0], 0.0);
        assert_eq!(b.active(&m.x, 1e-9), vec![0]);
    }

    #[test]
    fn quadratic_hessian() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] + 2.0 * x[0] * x[1] + x[1] * x[1];
        let h = hessian(f, &[0.3, -0.2], &[1e-3, 1e-3], None);
        assert!((h[(0, 0)] - 6.0).abs() < 1e-6);
        assert!((h[(0, 1)] - 2.0).abs() < 1e-6);
        assert!((h[(1, 1)] - 2.0).abs() < 1e-6);
    }
}
