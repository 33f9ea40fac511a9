//! Central finite differences, used as the independent oracle for every
//! analytic gradient and for the Hessian at the reverse-KL optimum.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::input("h", format!("step {h} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn eval<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64]) -> Result<f64> {
    let v = f(x);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective at {x:?}")));
    }
    Ok(v)
}

/// `g_i = (f(θ + h e_i) − f(θ − h e_i)) / 2h`.
pub fn gradient<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], h: f64) -> Result<DVector<f64>> {
    check_step(h)?;
    let n = theta.len();
    let mut g = DVector::zeros(n);
    let mut x = theta.to_vec();
    for i in 0..n {
        x[i] = theta[i] + h;
        let fp = eval(&mut f, &x)?;
        x[i] = theta[i] - h;
        let fm = eval(&mut f, &x)?;
        x[i] = theta[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Second-order central stencil, returned symmetrized.
pub fn hessian<F: FnMut(&[f64]) -> f64>(mut f: F, theta: &[f64], h: f64) -> Result<DMatrix<f64>> {
    check_step(h)?;
    let n = theta.len();
    let f0 = eval(&mut f, theta)?;
    let mut hm = DMatrix::zeros(n, n);
    let mut x = theta.to_vec();
    for i in 0..n {
        x[i] = theta[i] + h;
        let fp = eval(&mut f, &x)?;
        x[i] = theta[i] - h;
        let fm = eval(&mut f, &x)?;
        x[i] = theta[i];
        hm[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut corner = |si: f64, sj: f64, x: &mut Vec<f64>| -> Result<f64> {
                x[i] = theta[i] + si * h;
                x[j] = theta[j] + sj * h;
                let v = eval(&mut f, x);
                x[i] = theta[i];
                x[j] = theta[j];
                v
            };
            let pp = corner(1.0, 1.0, &mut x)?;
            let pm = corner(1.0, -1.0, &mut x)?;
            let mp = corner(-1.0, 1.0, &mut x)?;
            let mm = corner(-1.0, -1.0, &mut x)?;
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    Ok(hm)
}

/// Gradient and Hessian in one call.
pub fn finite_difference_oracle<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    theta: &[f64],
    h: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let g = gradient(&mut f, theta, h)?;
    let hm = hessian(&mut f, theta, h)?;
    Ok((g, hm))
}

/// Jacobian of a vector field by central differences (columns are partials).
pub fn jacobian<F: FnMut(&[f64]) -> DVector<f64>>(mut f: F, theta: &[f64], h: f64) -> Result<DMatrix<f64>> {
    check_step(h)?;
    let n = theta.len();
    let mut x = theta.to_vec();
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        x[i] = theta[i] + h;
        let fp = f(&x);
        x[i] = theta[i] - h;
        let fm = f(&x);
        x[i] = theta[i];
        if fp.iter().chain(fm.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite field at {theta:?}")));
        }
        cols.push((fp - fm) / (2.0 * h));
    }
    let m = cols.first().map(|c| c.len()).unwrap_or(0);
    let mut j = DMatrix::zeros(m, n);
    for (i, c) in cols.iter().enumerate() {
        j.set_column(i, c);
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let (g, h) = finite_difference_oracle(f, &[0.3, -1.2, 2.0], 1e-4).unwrap();
        assert!((g - DVector::from_column_slice(&[0.3, -1.2, 2.0])).amax() < 1e-6);
        assert!((h - DMatrix::identity(3, 3)).amax() < 1e-6);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(gradient(|x: &[f64]| x[0], &[0.0], 0.1).is_err());
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let r = gradient(|x: &[f64]| (x[0]).ln(), &[0.0], 1e-4);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
