//! Small least-squares helpers shared by the sweep and fit routines.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Least-squares solution with diagnostics.
#[derive(Clone, Debug)]
pub struct LstsqResult {
    pub coeffs: Vec<f64>,
    pub residual_norm: f64,
    pub cond: f64,
}

/// Solves `min ‖A x − b‖` through the SVD, rejecting ill-conditioned systems.
pub fn lstsq(a: &DMatrix<f64>, b: &[f64], max_cond: f64) -> Result<LstsqResult> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::IllConditioned {
            cond: f64::INFINITY,
            hint: format!("{m} samples for {n} unknowns"),
        });
    }
    // column scaling keeps the condition number meaningful
    let scales: Vec<f64> = (0..n)
        .map(|j| {
            let s = a.column(j).norm();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = a.clone();
    for j in 0..n {
        scaled.column_mut(j).scale_mut(1.0 / scales[j]);
    }
    let svd = scaled.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= max_cond) {
        return Err(Error::IllConditioned { cond, hint: "refine the lattice or widen the sample set".into() });
    }
    let bv = DVector::from_column_slice(b);
    let x = svd.solve(&bv, 0.0).map_err(|e| Error::Invalid(e.to_string()))?;
    let r = &scaled * &x - &bv;
    let coeffs = (0..n).map(|j| x[j] / scales[j]).collect();
    Ok(LstsqResult { coeffs, residual_norm: r.norm(), cond })
}

/// `y ≈ C x^p` fitted in log-log space.
#[derive(Clone, Debug, Serialize)]
pub struct PowerFit {
    pub rate: f64,
    pub prefactor: f64,
    pub residual: f64,
}

pub fn fit_power(x: &[f64], y: &[f64]) -> Result<PowerFit> {
    if x.len() < 2 || x.len() != y.len() {
        return Err(Error::Invalid("power fit needs at least two paired samples".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Invalid("power fit needs positive samples".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let lin = fit_linear(&lx, &ly)?;
    Ok(PowerFit { rate: lin.slope, prefactor: lin.intercept.exp(), residual: lin.residual })
}

#[derive(Clone, Debug, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residual: f64,
}

pub fn fit_linear(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return Err(Error::Invalid("linear fit needs at least two paired samples".into()));
    }
    let a = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
    let sol = lstsq(&a, y, 1e12)?;
    let mean = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res = sol.residual_norm.powi(2);
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit { slope: sol.coeffs[1], intercept: sol.coeffs[0], r_squared, residual: sol.residual_norm })
}

/// Polynomial coefficients `c_0 … c_deg` of a least-squares fit.
pub fn fit_polynomial(x: &[f64], y: &[f64], deg: usize, max_cond: f64) -> Result<LstsqResult> {
    let a = DMatrix::from_fn(x.len(), deg + 1, |i, j| x[i].powi(j as i32));
    lstsq(&a, y, max_cond)
}

/// Result of fitting `y(λ) = λ^κ Σ_{j≤m} c_j log(λ)^j`.
#[derive(Clone, Debug, Serialize)]
pub struct AlmostHomogeneousFit {
    pub kappa: f64,
    pub log_degree: usize,
    pub coeffs: Vec<f64>,
    pub residual: f64,
}

fn projected_residual(lambdas: &[f64], y: &[f64], kappa: f64, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let a = DMatrix::from_fn(n, m + 1, |i, j| lambdas[i].powf(kappa) * lambdas[i].ln().powi(j as i32));
    let sol = lstsq(&a, y, 1e14)?;
    let x = DVector::from_vec(sol.coeffs.clone());
    let r = &a * x - DVector::from_column_slice(y);
    Ok((sol.coeffs, r.as_slice().to_vec()))
}

fn fit_fixed_degree(lambdas: &[f64], y: &[f64], m: usize, kappa0: f64) -> Result<AlmostHomogeneousFit> {
    let norm2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let cost = |k: f64| projected_residual(lambdas, y, k, m).map(|(_, r)| norm2(&r));
    // coarse scan, then golden section around the best grid point
    let steps = 160;
    let mut best = (kappa0, f64::INFINITY);
    for i in 0..=steps {
        let k = kappa0 - 4.0 + 8.0 * i as f64 / steps as f64;
        if let Ok(c) = cost(k) {
            if c < best.1 {
                best = (k, c);
            }
        }
    }
    let mut lo = best.0 - 0.05;
    let mut hi = best.0 + 0.05;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let mut fc = cost(c)?;
    let mut fd = cost(d)?;
    for _ in 0..80 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = cost(c)?;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = cost(d)?;
        }
    }
    let mut kappa = 0.5 * (lo + hi);
    // Gauss-Newton polish on the projected residual
    for _ in 0..20 {
        let h = 1e-6;
        let (_, r0) = projected_residual(lambdas, y, kappa, m)?;
        let (_, rp) = projected_residual(lambdas, y, kappa + h, m)?;
        let (_, rm) = projected_residual(lambdas, y, kappa - h, m)?;
        let jac: Vec<f64> = rp.iter().zip(&rm).map(|(p, q)| (p - q) / (2.0 * h)).collect();
        let jj: f64 = jac.iter().map(|v| v * v).sum();
        if jj == 0.0 {
            break;
        }
        let step = -jac.iter().zip(&r0).map(|(j, r)| j * r).sum::<f64>() / jj;
        let trial = kappa + step;
        if norm2(&projected_residual(lambdas, y, trial, m)?.1) <= norm2(&r0) {
            kappa = trial;
        }
        if step.abs() < 1e-14 {
            break;
        }
    }
    let (coeffs, r) = projected_residual(lambdas, y, kappa, m)?;
    Ok(AlmostHomogeneousFit { kappa, log_degree: m, coeffs, residual: norm2(&r).sqrt() })
}

/// Fits the smallest log-degree whose relative residual falls below `rel_tol`.
pub fn fit_almost_homogeneous(
    lambdas: &[f64],
    values: &[f64],
    max_log_degree: usize,
    rel_tol: f64,
) -> Result<AlmostHomogeneousFit> {
    if lambdas.len() != values.len() || lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::Invalid("λ-grid must be positive and match the values".into()));
    }
    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Ok(AlmostHomogeneousFit { kappa: 0.0, log_degree: 0, coeffs: vec![0.0], residual: 0.0 });
    }
    // start from the endpoint log-log slope
    let (i0, i1) = (0, lambdas.len() - 1);
    let kappa0 = if values[i0] * values[i1] > 0.0 {
        (values[i1] / values[i0]).abs().ln() / (lambdas[i1] / lambdas[i0]).ln()
    } else {
        0.0
    };
    let mut best: Option<AlmostHomogeneousFit> = None;
    for m in 0..=max_log_degree {
        if lambdas.len() < m + 2 {
            return Err(Error::IllConditioned {
                cond: f64::INFINITY,
                hint: format!("log-degree {m} needs at least {} λ values", m + 2),
            });
        }
        let fit = fit_fixed_degree(lambdas, values, m, kappa0)?;
        let done = fit.residual <= rel_tol * scale;
        best = Some(fit);
        if done {
            break;
        }
    }
    Ok(best.expect("at least one degree tried"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law() {
        let a = [0.1, 0.05, 0.025];
        let y: Vec<f64> = a.iter().map(|v| v * v).collect();
        let f = fit_power(&a, &y).unwrap();
        assert!((f.rate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn almost_homogeneous_recovers_log_term() {
        let l: Vec<f64> = (0..7).map(|i| 0.5 * 1.3f64.powi(i)).collect();
        let y: Vec<f64> = l.iter().map(|x| x.powf(2.0) * (1.5 + 0.4 * x.ln())).collect();
        let f = fit_almost_homogeneous(&l, &y, 3, 1e-10).unwrap();
        assert_eq!(f.log_degree, 1);
        assert!((f.kappa - 2.0).abs() < 1e-8, "{}", f.kappa);
        assert!((f.coeffs[1] - 0.4).abs() < 1e-7);
        let y0: Vec<f64> = l.iter().map(|x| 3.0 * x.powf(0.5)).collect();
        let f0 = fit_almost_homogeneous(&l, &y0, 3, 1e-10).unwrap();
        assert_eq!(f0.log_degree, 0);
        assert!((f0.kappa - 0.5).abs() < 1e-10);
    }
}
