//! Extension of rotation-invariant singular kernels across the origin.
//!
//! A kernel `u(y) = A |y|^{−α} log^m |y|` on `R^n` is paired with a test
//! function by a lattice sum over a cubic patch. When `α ≥ n` the test
//! function is Taylor-subtracted inside a sharp ball; different balls differ
//! by multiples of derivatives of the test function at the origin.

use crate::error::{Error, Result};
use crate::fit::{fit_polynomial, fit_power};
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

/// Highest Taylor subtraction order handled.
pub const MAX_SUBTRACTION_ORDER: i32 = 2;
/// Largest number of lattice points summed in one pairing.
pub const MAX_GRID_POINTS: u64 = 400_000_000;

fn gamma_half(x: f64) -> f64 {
    let twice = (2.0 * x).round() as i64;
    let (mut v, mut t) = if twice % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while t < x - 1e-12 {
        v *= t;
        t += 1.0;
    }
    v
}

/// Area of the unit sphere in `R^n`.
pub fn sphere_area(n: usize) -> f64 {
    2.0 * PI.powf(n as f64 / 2.0) / gamma_half(n as f64 / 2.0)
}

/// `u(y) = amplitude · |y|^{−α} · log^m |y|` on `R^{ambient_dim}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RadialKernel {
    pub alpha: f64,
    pub log_power: u32,
    pub amplitude: f64,
    pub ambient_dim: usize,
}

impl RadialKernel {
    pub fn new(alpha: f64, log_power: u32, amplitude: f64, ambient_dim: usize) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Invalid("α must be a finite non-negative number".into()));
        }
        if ambient_dim == 0 || ambient_dim > 6 {
            return Err(Error::Unsupported(format!("ambient dimension {ambient_dim}")));
        }
        Ok(RadialKernel { alpha, log_power, amplitude, ambient_dim })
    }

    pub fn at(&self, r: f64) -> f64 {
        self.amplitude * r.powf(-self.alpha) * r.ln().powi(self.log_power as i32)
    }

    pub fn scaling_degree(&self) -> f64 {
        self.alpha
    }

    /// The extension is unique iff `sd < n`.
    pub fn unique_extension(&self) -> bool {
        self.alpha < self.ambient_dim as f64
    }

    /// `max(⌈sd⌉ − n, −1)`.
    pub fn subtraction_order(&self) -> i32 {
        ((self.alpha.ceil() as i64) - self.ambient_dim as i64).max(-1) as i32
    }

    /// `∫_{r0<|y|<r1} u(y) |y|^{2p} g(|y|) dy` for a radial weight `g`.
    fn shell_integral(&self, r0: f64, r1: f64, p: i32, g: &dyn Fn(f64) -> f64) -> f64 {
        let n = self.ambient_dim as i32;
        let out = quadrature::double_exponential::integrate(
            |r| r.powi(n - 1 + 2 * p) * self.at(r) * g(r),
            r0,
            r1,
            1e-13,
        );
        sphere_area(self.ambient_dim) * out.integral
    }
}

/// Cubic patch `[−L, L]^n` with spacing `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LatticePatch {
    pub spacing: f64,
    pub half_width: f64,
}

/// Value, gradient and Hessian of a test function at the origin.
#[derive(Clone, Debug, Serialize)]
pub struct TaylorData {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
}

impl TaylorData {
    /// Central differences with step `h`.
    pub fn at_origin(f: &dyn Fn(&[f64]) -> f64, n: usize, h: f64) -> Self {
        let e = |i: usize, s: f64| {
            let mut y = vec![0.0; n];
            y[i] = s;
            y
        };
        let value = f(&vec![0.0; n]);
        let gradient = (0..n).map(|i| (f(&e(i, h)) - f(&e(i, -h))) / (2.0 * h)).collect();
        let mut hessian = vec![vec![0.0; n]; n];
        for i in 0..n {
            hessian[i][i] = (f(&e(i, h)) - 2.0 * value + f(&e(i, -h))) / (h * h);
            for j in 0..i {
                let at = |si: f64, sj: f64| {
                    let mut y = vec![0.0; n];
                    y[i] = si;
                    y[j] = sj;
                    f(&y)
                };
                let v = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
                hessian[i][j] = v;
                hessian[j][i] = v;
            }
        }
        TaylorData { value, gradient, hessian }
    }

    fn polynomial(&self, y: &[f64], order: i32) -> f64 {
        let mut v = self.value;
        if order >= 1 {
            v += self.gradient.iter().zip(y).map(|(g, x)| g * x).sum::<f64>();
        }
        if order >= 2 {
            for i in 0..y.len() {
                for j in 0..y.len() {
                    v += 0.5 * self.hessian[i][j] * y[i] * y[j];
                }
            }
        }
        v
    }
}

/// Coefficient of `∂^β f(0)` in the shift between two subtraction balls.
#[derive(Clone, Debug, Serialize)]
pub struct Counterterm {
    pub multi_index: Vec<usize>,
    pub coefficient: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExtensionResult {
    pub value: f64,
    pub subtraction_order: i32,
    pub radius: Option<f64>,
    pub taylor: Option<TaylorData>,
    /// `value(R) = value(1) + Σ_β a_β ∂^β f(0)` for the sharp-ball weights.
    pub counterterms: Vec<Counterterm>,
    pub spacing: f64,
}

fn multi_indices(n: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; n]];
    if order >= 1 {
        for i in 0..n {
            let mut b = vec![0; n];
            b[i] = 1;
            out.push(b);
        }
    }
    if order >= 2 {
        for i in 0..n {
            for j in i..n {
                let mut b = vec![0; n];
                b[i] += 1;
                b[j] += 1;
                out.push(b);
            }
        }
    }
    out
}

/// `a_β(R) = −(1/β!) ∫_{B_R ∖ B_1} u(y) y^β dy` (oriented).
pub fn counterterm_table(kernel: &RadialKernel, order: i32, radius: f64) -> Vec<Counterterm> {
    if order < 0 {
        return Vec::new();
    }
    let n = kernel.ambient_dim;
    let one = |_: f64| 1.0;
    multi_indices(n, order as usize)
        .into_iter()
        .map(|b| {
            let deg: usize = b.iter().sum();
            let coefficient = match deg {
                0 => -kernel.shell_integral(1.0, radius, 0, &one),
                // odd moments vanish, mixed second moments too
                1 => 0.0,
                _ if b.iter().any(|v| *v == 2) => {
                    // ∫ y_i² = |y|² / n over spheres, with 1/β! = 1/2
                    -0.5 * kernel.shell_integral(1.0, radius, 1, &one) / n as f64
                }
                _ => 0.0,
            };
            Counterterm { multi_index: b, coefficient }
        })
        .collect()
}

fn grid_count(n: usize, k: i64) -> u64 {
    ((2 * k + 1) as u64).saturating_pow(n as u32)
}

/// `Σ_{y ≠ 0} a^n u(y) [f(y) − T(y) 1_{|y|<R}]` over the patch.
fn lattice_sum(
    kernel: &RadialKernel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    patch: LatticePatch,
    subtraction: Option<(&TaylorData, i32, f64)>,
) -> Result<f64> {
    let n = kernel.ambient_dim;
    let a = patch.spacing;
    let k = (patch.half_width / a).round() as i64;
    if grid_count(n, k) > MAX_GRID_POINTS {
        return Err(Error::SiteCap { count: grid_count(n, k) as usize, cap: MAX_GRID_POINTS as usize });
    }
    let side = 2 * k + 1;
    let inner = (side as u64).pow(n as u32 - 1);
    let vol = a.powi(n as i32);
    let total: f64 = (0..side)
        .into_par_iter()
        .map(|i0| {
            let mut y = vec![0.0; n];
            let mut acc = 0.0;
            let mut comp = 0.0;
            for rest in 0..inner {
                y[0] = (i0 - k) as f64 * a;
                let mut r = rest;
                let mut origin = i0 == k;
                for d in 1..n {
                    let c = (r % side as u64) as i64 - k;
                    r /= side as u64;
                    y[d] = c as f64 * a;
                    origin &= c == 0;
                }
                if origin {
                    continue;
                }
                let rad = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut g = f(&y);
                if let Some((t, order, big_r)) = subtraction {
                    if rad < big_r {
                        g -= t.polynomial(&y, order);
                    }
                }
                // Kahan summation
                let term = kernel.at(rad) * g - comp;
                let next = acc + term;
                comp = (next - acc) - term;
                acc = next;
            }
            acc
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(total * vol)
}

fn check_decay(f: &dyn Fn(&[f64]) -> f64, n: usize, half_width: f64) -> Result<()> {
    let f0 = f(&vec![0.0; n]).abs().max(1e-300);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut y = vec![0.0; n];
            y[i] = s * half_width;
            worst = worst.max(f(&y).abs());
            let y2: Vec<f64> = vec![s * half_width; n];
            worst = worst.max(f(&y2).abs());
        }
    }
    if worst > 1e-10 * f0.max(1.0) {
        return Err(Error::Invalid(format!(
            "test function does not decay within the patch (|f| = {worst:.2e} on the boundary)"
        )));
    }
    Ok(())
}

/// Extended pairing `⟨ũ, f⟩` at one lattice spacing.
///
/// `radius` selects the sharp subtraction ball. It is required when
/// `sd ≥ n`; for `sd < n` it is optional and the subtracted constant is
/// added back through the exact radial integral, so every ball gives the
/// same continuum value.
pub fn extend(
    kernel: &RadialKernel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    patch: LatticePatch,
    radius: Option<f64>,
) -> Result<ExtensionResult> {
    let n = kernel.ambient_dim;
    if !(patch.spacing > 0.0) || patch.half_width <= patch.spacing {
        return Err(Error::Invalid("patch needs a positive spacing below its half width".into()));
    }
    check_decay(f, n, patch.half_width)?;
    let order = kernel.subtraction_order();
    if order > MAX_SUBTRACTION_ORDER {
        return Err(Error::Unsupported(format!(
            "subtraction order {order} exceeds the available Taylor data ({MAX_SUBTRACTION_ORDER})"
        )));
    }
    if let Some(r) = radius {
        if !(r > 0.0) || r >= patch.half_width {
            return Err(Error::Invalid("subtraction radius must lie inside the patch".into()));
        }
    }
    if order >= 0 {
        let r = radius.ok_or_else(|| {
            Error::NeedsExtension(format!("sd = {} ≥ {n}: a subtraction radius is required", kernel.alpha))
        })?;
        let t = TaylorData::at_origin(f, n, 1e-3);
        let value = lattice_sum(kernel, f, patch, Some((&t, order, r)))?;
        return Ok(ExtensionResult {
            value,
            subtraction_order: order,
            radius: Some(r),
            counterterms: counterterm_table(kernel, order, r),
            taylor: Some(t),
            spacing: patch.spacing,
        });
    }
    let (value, taylor) = match radius {
        None => (lattice_sum(kernel, f, patch, None)?, None),
        Some(r) => {
            let t = TaylorData::at_origin(f, n, 1e-3);
            let back = t.value * kernel.shell_integral(0.0, r, 0, &|_| 1.0);
            (lattice_sum(kernel, f, patch, Some((&t, 0, r)))? + back, Some(t))
        }
    };
    Ok(ExtensionResult {
        value,
        subtraction_order: order,
        radius,
        taylor,
        counterterms: Vec::new(),
        spacing: patch.spacing,
    })
}

/// Lattice values at several spacings and their Richardson limit.
#[derive(Clone, Debug, Serialize)]
pub struct RefinedExtension {
    pub spacings: Vec<f64>,
    pub values: Vec<f64>,
    pub exponents: Vec<f64>,
    pub limit: f64,
}

/// Pairing for `sd < n` with the origin value carried by a Gaussian weight:
/// `Σ a^n u (f − f(0) w) + f(0) ∫ u w`, `w = exp(−|y|²/ρ²)`.
pub fn extend_weighted(
    kernel: &RadialKernel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    patch: LatticePatch,
    width: f64,
) -> Result<f64> {
    if !kernel.unique_extension() {
        return Err(Error::NeedsExtension("weighted subtraction without counterterms needs sd < n".into()));
    }
    if !(width > 0.0) || 6.0 * width > patch.half_width {
        return Err(Error::Invalid("weight width must be positive and at most a sixth of the patch".into()));
    }
    check_decay(f, kernel.ambient_dim, patch.half_width)?;
    let f0 = f(&vec![0.0; kernel.ambient_dim]);
    let w = |r2: f64| (-r2 / (width * width)).exp();
    let g = |y: &[f64]| f(y) - f0 * w(y.iter().map(|v| v * v).sum());
    let back = f0 * kernel.shell_integral(0.0, 12.0 * width, 0, &|r| w(r * r));
    Ok(lattice_sum(kernel, &g, patch, None)? + back)
}

/// Pairing for `sd < n` extrapolated with the error exponents `n − sd + 2j`
/// of lattice sums around an integrable singularity. `weight` selects
/// [`extend_weighted`] instead of the plain sum.
pub fn extend_refined(
    kernel: &RadialKernel,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    half_width: f64,
    spacings: &[f64],
    weight: Option<f64>,
) -> Result<RefinedExtension> {
    if !kernel.unique_extension() {
        return Err(Error::NeedsExtension("refinement limit exists only for sd < n".into()));
    }
    if spacings.len() < 2 {
        return Err(Error::Invalid("at least two spacings are needed".into()));
    }
    let values = spacings
        .iter()
        .map(|&a| {
            let patch = LatticePatch { spacing: a, half_width };
            match weight {
                None => extend(kernel, f, patch, None).map(|r| r.value),
                Some(w) => extend_weighted(kernel, f, patch, w),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let base = kernel.ambient_dim as f64 - kernel.alpha;
    let exponents: Vec<f64> = (0..spacings.len() - 1).map(|j| base + 2.0 * j as f64).collect();
    // solve v_i = L + Σ_j c_j a_i^{p_j}
    let m = spacings.len();
    let a = nalgebra::DMatrix::from_fn(m, m, |i, j| if j == 0 { 1.0 } else { spacings[i].powf(exponents[j - 1]) });
    let sol = crate::fit::lstsq(&a, &values, 1e14)?;
    Ok(RefinedExtension { spacings: spacings.to_vec(), values, exponents, limit: sol.coeffs[0] })
}

/// `∫ u f` for a radial test function by tanh-sinh quadrature, with the same
/// sharp-ball subtraction as [`extend`] (`f_rad''(0)` is needed at order 2).
pub fn radial_oracle(
    kernel: &RadialKernel,
    f_rad: &dyn Fn(f64) -> f64,
    radius: Option<f64>,
    r_max: f64,
) -> Result<f64> {
    let order = kernel.subtraction_order();
    match (order, radius) {
        (o, None) if o < 0 => Ok(kernel.shell_integral(0.0, r_max, 0, f_rad)),
        (o, Some(r)) if o <= MAX_SUBTRACTION_ORDER => {
            let f0 = f_rad(0.0);
            let h = 1e-3;
            let f2 = 2.0 * (f_rad(h) - f0) / (h * h);
            let o = o.max(0);
            let sub = |x: f64| {
                let mut v = f_rad(x) - f0;
                if o >= 2 {
                    v -= 0.5 * f2 * x * x;
                }
                v
            };
            let mut v = kernel.shell_integral(0.0, r, 0, &sub) + kernel.shell_integral(r, r_max, 0, f_rad);
            if order < 0 {
                v += f0 * kernel.shell_integral(0.0, r, 0, &|_| 1.0);
            }
            Ok(v)
        }
        _ => Err(Error::Invalid("radius required for sd ≥ n".into())),
    }
}

/// Difference between two subtraction balls fitted against `f(0)` over a set
/// of test functions.
#[derive(Clone, Debug, Serialize)]
pub struct CountertermFit {
    pub slope: f64,
    pub residual: f64,
    pub predicted: f64,
}

/// `value(R₂) − value(R₁) = c f(0)` across test functions.
pub fn fit_counterterm(
    kernel: &RadialKernel,
    tests: &[&(dyn Fn(&[f64]) -> f64 + Sync)],
    patch: LatticePatch,
    r1: f64,
    r2: f64,
) -> Result<CountertermFit> {
    let mut f0 = Vec::new();
    let mut diff = Vec::new();
    for f in tests {
        let a = extend(kernel, *f, patch, Some(r1))?;
        let b = extend(kernel, *f, patch, Some(r2))?;
        f0.push(a.taylor.as_ref().map(|t| t.value).unwrap_or(0.0));
        diff.push(b.value - a.value);
    }
    // fit through the origin
    let num: f64 = f0.iter().zip(&diff).map(|(x, y)| x * y).sum();
    let den: f64 = f0.iter().map(|x| x * x).sum();
    if den == 0.0 {
        return Err(Error::Invalid("all test functions vanish at the origin".into()));
    }
    let slope = num / den;
    let residual = f0.iter().zip(&diff).map(|(x, y)| (y - slope * x).powi(2)).sum::<f64>().sqrt();
    // the larger ball removes f(0) ∫_{r1<|y|<r2} u
    let predicted = -kernel.shell_integral(r1, r2, 0, &|_| 1.0);
    Ok(CountertermFit { slope, residual, predicted })
}

/// `t(r) ≈ Σ_k A_k r^{k−α} + r_m(r)`.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingExpansion {
    pub alpha: f64,
    pub amplitudes: Vec<f64>,
    /// Fitted scaling degree of the remainder.
    pub remainder_degree: f64,
}

/// Dilation expansion of a radial kernel sampled through `t`.
///
/// `τ_k(r) = A_k r^{k−α}` are the Taylor coefficients in `s` of
/// `s^α t(s r)`, recovered from a polynomial fit of `r^α t(r)` on
/// Chebyshev radii in `(0, r_max]`.
pub fn scaling_expansion_flat(t: &dyn Fn(f64) -> f64, alpha: f64, order: usize, r_max: f64) -> Result<ScalingExpansion> {
    let deg = order + 8;
    let samples = 3 * deg;
    let x: Vec<f64> = (0..samples)
        .map(|i| 0.5 * (1.0 - (PI * (i as f64 + 0.5) / samples as f64).cos()))
        .collect();
    let y: Vec<f64> = x.iter().map(|u| (u * r_max).powf(alpha) * t(u * r_max)).collect();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("kernel samples are not finite".into()));
    }
    let fit = fit_polynomial(&x, &y, deg, 1e14)?;
    let amplitudes: Vec<f64> = (0..=order).map(|k| fit.coeffs[k] / r_max.powi(k as i32)).collect();
    let rem = |r: f64| t(r) - amplitudes.iter().enumerate().map(|(k, a)| a * r.powf(k as f64 - alpha)).sum::<f64>();
    let radii: Vec<f64> = (0..6).map(|i| r_max / 4.0 * 0.7f64.powi(i)).collect();
    let vals: Vec<f64> = radii.iter().map(|r| rem(*r).abs()).collect();
    let remainder_degree = if vals.iter().all(|v| *v > 1e-300) {
        -fit_power(&radii, &vals)?.rate
    } else {
        f64::NEG_INFINITY
    };
    Ok(ScalingExpansion { alpha, amplitudes, remainder_degree })
}
