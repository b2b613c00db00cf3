//! Brute-force reference computations: Gaussian moments by pairings and by
//! sampling, first-order spectral perturbation, refinement sweeps and
//! finite-difference derivatives.

use crate::error::{Error, Result};
use crate::fit::{fit_linear, fit_power};
use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Largest number of factors accepted by [`isserlis_moment`].
pub const MAX_ISSERLIS_FACTORS: usize = 12;

/// All perfect matchings of `0..n` as lists of pairs.
pub fn matchings(n: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(rest: &[usize], cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        let a = rest[0];
        for i in 1..rest.len() {
            let b = rest[i];
            let next: Vec<usize> = rest[1..].iter().copied().filter(|&v| v != b).collect();
            cur.push((a, b));
            rec(&next, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n % 2 == 1 {
        return out;
    }
    let idx: Vec<usize> = (0..n).collect();
    rec(&idx, &mut Vec::new(), &mut out);
    out
}

/// `E[Π_i ⟨v_i, φ⟩_μ]` for a centred Gaussian with covariance kernel `cov`.
pub fn isserlis_moment(cov: &DMatrix<f64>, vectors: &[Vec<f64>], mu: &[f64]) -> Result<f64> {
    if vectors.len() > MAX_ISSERLIS_FACTORS {
        return Err(Error::DegreeCap { degree: vectors.len(), cap: MAX_ISSERLIS_FACTORS });
    }
    let n = cov.nrows();
    if mu.len() != n || vectors.iter().any(|v| v.len() != n) {
        return Err(Error::LatticeMismatch("moment vectors and covariance differ in size".into()));
    }
    let weighted: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(mu).map(|(a, b)| a * b).collect()).collect();
    let m = vectors.len();
    let mut pair = DMatrix::zeros(m, m);
    for i in 0..m {
        let ci = cov * nalgebra::DVector::from_column_slice(&weighted[i]);
        for j in 0..m {
            pair[(i, j)] = weighted[j].iter().zip(ci.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(matchings(m).iter().map(|mt| mt.iter().map(|&(a, b)| pair[(a, b)]).product::<f64>()).sum())
}

/// Samples of a centred Gaussian field with covariance kernel `cov`.
pub struct GaussianSampler {
    chol: DMatrix<f64>,
    rng: ChaCha8Rng,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>, seed: u64) -> Result<Self> {
        let sym = (cov + cov.transpose()) * 0.5;
        let chol = Cholesky::new(sym)
            .ok_or_else(|| Error::Invalid("covariance is not positive definite".into()))?
            .l();
        Ok(GaussianSampler { chol, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn sample(&mut self) -> Vec<f64> {
        let n = self.chol.nrows();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        (&self.chol * nalgebra::DVector::from_vec(z)).iter().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

fn summarize(values: impl Iterator<Item = f64>) -> McEstimate {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    McEstimate { mean, stderr: (var / n.max(1) as f64).sqrt(), samples: n }
}

/// `E[F(φ)]` by sampling.
pub fn mc_expectation(sampler: &mut GaussianSampler, f: &dyn Fn(&[f64]) -> f64, samples: usize) -> McEstimate {
    summarize((0..samples).map(|_| f(&sampler.sample())))
}

/// `E[F G] − E[F] E[G]` by sampling, with a delta-method error.
pub fn mc_covariance(
    sampler: &mut GaussianSampler,
    f: &dyn Fn(&[f64]) -> f64,
    g: &dyn Fn(&[f64]) -> f64,
    samples: usize,
) -> McEstimate {
    let pairs: Vec<(f64, f64)> = (0..samples)
        .map(|_| {
            let phi = sampler.sample();
            (f(&phi), g(&phi))
        })
        .collect();
    let ef = pairs.iter().map(|p| p.0).sum::<f64>() / samples as f64;
    let eg = pairs.iter().map(|p| p.1).sum::<f64>() / samples as f64;
    summarize(pairs.iter().map(|(a, b)| (a - ef) * (b - eg)))
}

/// First-order change of the Green kernel: `−G M E₁ G`.
pub fn spectral_perturbation(g: &DMatrix<f64>, mu: &[f64], e1: &DMatrix<f64>) -> DMatrix<f64> {
    let mut gm = g.clone();
    for j in 0..gm.ncols() {
        gm.column_mut(j).scale_mut(mu[j]);
    }
    -(gm * e1 * g)
}

/// Convergence of a sequence of refinements.
#[derive(Clone, Debug, Serialize)]
pub struct RefinementSweep {
    pub spacings: Vec<f64>,
    pub values: Vec<f64>,
    /// Successive differences `|v_{i+1} − v_i|`.
    pub differences: Vec<f64>,
    /// Fitted exponent of the differences in the spacing.
    pub rate: Option<f64>,
    /// Richardson-extrapolated limit.
    pub limit: Option<f64>,
    pub monotone: bool,
}

pub fn refinement_sweep(spacings: &[f64], values: &[f64]) -> Result<RefinementSweep> {
    if spacings.len() != values.len() || spacings.len() < 2 {
        return Err(Error::Invalid("a sweep needs at least two matching spacings and values".into()));
    }
    let differences: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let monotone = differences.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    let rate = if differences.len() >= 2 && differences.iter().all(|d| *d > 0.0) {
        let xs: Vec<f64> = spacings[..differences.len()].to_vec();
        fit_power(&xs, &differences).ok().map(|f| f.rate)
    } else {
        None
    };
    let limit = rate.filter(|r| *r > 0.0).map(|r| {
        let n = values.len();
        let q = (spacings[n - 2] / spacings[n - 1]).powf(r);
        values[n - 1] + (values[n - 1] - values[n - 2]) / (q - 1.0)
    });
    Ok(RefinementSweep { spacings: spacings.to_vec(), values: values.to_vec(), differences, rate, limit, monotone })
}

/// Slope and quality of `v` against `log a`.
pub fn log_fit(spacings: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    let x: Vec<f64> = spacings.iter().map(|a| a.ln()).collect();
    let f = fit_linear(&x, values)?;
    Ok((f.slope, f.r_squared))
}

/// Four-point central derivative.
pub fn central_derivative(f: &dyn Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x - 2.0 * h)? - 8.0 * f(x - h)? + 8.0 * f(x + h)? - f(x + 2.0 * h)?) / (12.0 * h))
}

/// Three-point second derivative.
pub fn central_second_derivative(f: &dyn Fn(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x - h)? - 2.0 * f(x)? + f(x + h)?) / (h * h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_counts() {
        let counts: Vec<usize> = (0..=8).map(|n| matchings(n).len()).collect();
        assert_eq!(counts, vec![1, 0, 1, 0, 3, 0, 15, 0, 105]);
    }

    #[test]
    fn fourth_moment_of_a_scalar() {
        let cov = DMatrix::from_element(1, 1, 2.0);
        let v = vec![vec![1.0]; 4];
        assert!((isserlis_moment(&cov, &v, &[1.0]).unwrap() - 12.0).abs() < 1e-14);
    }

    #[test]
    fn sampled_second_moment() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mut s = GaussianSampler::new(&cov, 7).unwrap();
        let est = mc_expectation(&mut s, &|p| p[0] * p[1], 40_000);
        assert!((est.mean - 0.5).abs() < 4.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn sweep_rate() {
        let a = [0.4, 0.2, 0.1, 0.05];
        let v: Vec<f64> = a.iter().map(|x| 1.0 + 3.0 * x * x).collect();
        let s = refinement_sweep(&a, &v).unwrap();
        assert!((s.rate.unwrap() - 2.0).abs() < 1e-9);
        assert!((s.limit.unwrap() - 1.0).abs() < 1e-12);
        assert!(s.monotone);
    }
}
