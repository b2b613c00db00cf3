//! Hadamard-subtracted Wick powers, their renormalization freedom and the
//! Wick-ordered products of several powers.

use crate::algebra::{rescaled_observable, star_product_kernel, ContractionOperator, EquivariantObservable};
use crate::background::{BackgroundGeometry, LatticeSpace};
use crate::error::{Error, Result};
use crate::fit::{fit_almost_homogeneous, AlmostHomogeneousFit};
use crate::functional::{FieldSpace, PolynomialFunctional};
use crate::parametrix::{coincidence, Parametrix};
use crate::C64;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::Arc;

/// Highest Wick degree handled by the closed forms.
pub const MAX_WICK_DEGREE: usize = 8;

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// How one coefficient `c_j` is produced on a given lattice.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum CoefficientRule {
    /// Explicit per-site values.
    Field(Vec<f64>),
    /// `β · c(x)^power`, with `c` the local mass term of the parametrix.
    MassPower { beta: f64, power: u32 },
}

/// The freedom `{c_j}_{j≥2}` between two admissible Wick prescriptions.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AmbiguityCoefficients {
    pub rules: BTreeMap<usize, CoefficientRule>,
}

impl AmbiguityCoefficients {
    pub fn zero() -> Self {
        Self::default()
    }

    fn check_index(j: usize) -> Result<()> {
        if j < 2 {
            return Err(Error::Invalid(format!("ambiguity coefficient c_{j} is not allowed; indices start at 2")));
        }
        if j > MAX_WICK_DEGREE {
            return Err(Error::DegreeCap { degree: j, cap: MAX_WICK_DEGREE });
        }
        Ok(())
    }

    pub fn with_field(mut self, j: usize, values: Vec<f64>) -> Result<Self> {
        Self::check_index(j)?;
        self.rules.insert(j, CoefficientRule::Field(values));
        Ok(self)
    }

    pub fn with_mass_power(mut self, j: usize, beta: f64, power: u32) -> Result<Self> {
        Self::check_index(j)?;
        self.rules.insert(j, CoefficientRule::MassPower { beta, power });
        Ok(self)
    }

    /// Coefficients built from the mass term only, each with dimension `j(D−2)/2`.
    ///
    /// A `β_j` whose dimension is not an even integer has no polynomial
    /// realization and is rejected.
    pub fn mass_polynomial(dim: usize, betas: &[(usize, f64)]) -> Result<Self> {
        let mut out = Self::zero();
        for &(j, beta) in betas {
            let twice = j * dim.saturating_sub(2);
            if twice % 4 != 0 {
                return Err(Error::Invalid(format!(
                    "c_{j} has dimension {}/2 in D={dim}, not a power of the mass term",
                    twice
                )));
            }
            out = out.with_mass_power(j, beta, (twice / 4) as u32)?;
        }
        Ok(out)
    }

    pub fn is_zero(&self) -> bool {
        self.rules.values().all(|r| match r {
            CoefficientRule::Field(v) => v.iter().all(|x| *x == 0.0),
            CoefficientRule::MassPower { beta, .. } => *beta == 0.0,
        })
    }

    pub fn max_index(&self) -> usize {
        self.rules.keys().copied().max().unwrap_or(0)
    }

    /// `c_j` at every site; `mass` is the local `c(x)`.
    pub fn resolve(&self, j: usize, n: usize, mass: Option<&[f64]>) -> Result<Vec<f64>> {
        match self.rules.get(&j) {
            None => Ok(vec![0.0; n]),
            Some(CoefficientRule::Field(v)) => {
                if v.len() != n {
                    return Err(Error::LatticeMismatch(format!("c_{j} has {} entries, lattice {n}", v.len())));
                }
                Ok(v.clone())
            }
            Some(CoefficientRule::MassPower { beta, power }) => {
                let c = mass.ok_or_else(|| {
                    Error::Invalid("mass-power coefficients need a parametrix with local mass data".into())
                })?;
                Ok(c.iter().map(|m| beta * m.powi(*power as i32)).collect())
            }
        }
    }

    /// Coefficients of the single redefinition equal to `self` followed by `other`.
    pub fn compose(&self, other: &Self, n: usize, mass: Option<&[f64]>) -> Result<Self> {
        let top = self.max_index() + other.max_index();
        let top = top.min(MAX_WICK_DEGREE);
        let get = |c: &Self, j: usize| -> Result<Vec<f64>> {
            match j {
                0 => Ok(vec![1.0; n]),
                1 => Ok(vec![0.0; n]),
                _ => c.resolve(j, n, mass),
            }
        };
        let mut out = Self::zero();
        for j in 2..=top {
            let mut v = vec![0.0; n];
            for i in 0..=j {
                let a = get(self, i)?;
                let b = get(other, j - i)?;
                let w = binomial(j, i);
                for x in 0..n {
                    v[x] += w * a[x] * b[x];
                }
            }
            out.rules.insert(j, CoefficientRule::Field(v));
        }
        Ok(out)
    }
}

/// A Wick prescription: the Hadamard one followed by a stack of redefinitions.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WickFamily {
    pub layers: Vec<AmbiguityCoefficients>,
}

impl WickFamily {
    /// `exp[Υ_{W_P}] φ^k`.
    pub fn hadamard() -> Self {
        Self::default()
    }

    /// `Φ̂^k(f) = Φ^k(f) + Σ_{j=0}^{k−2} C(k,j) Φ^j(c_{k−j} f)`.
    pub fn redefine(&self, c: AmbiguityCoefficients) -> Self {
        let mut layers = self.layers.clone();
        layers.push(c);
        WickFamily { layers }
    }

    /// Per-power smearings `a_m` with `Φ^k(f) = Σ_m ∫ a_m φ^m μ`.
    pub fn power_coefficients(
        &self,
        k: usize,
        f: &[C64],
        w: &[f64],
        mass: Option<&[f64]>,
    ) -> Result<Vec<Vec<C64>>> {
        if k > MAX_WICK_DEGREE {
            return Err(Error::DegreeCap { degree: k, cap: MAX_WICK_DEGREE });
        }
        if f.len() != w.len() {
            return Err(Error::LatticeMismatch("smearing and coincidence data differ in length".into()));
        }
        self.coefficients_at(self.layers.len(), k, f, w, mass)
    }

    fn coefficients_at(
        &self,
        depth: usize,
        k: usize,
        f: &[C64],
        w: &[f64],
        mass: Option<&[f64]>,
    ) -> Result<Vec<Vec<C64>>> {
        let n = f.len();
        let mut out = vec![vec![C64::new(0.0, 0.0); n]; k + 1];
        if depth == 0 {
            for p in 0..=k / 2 {
                let m = k - 2 * p;
                let comb = factorial(k) / (2f64.powi(p as i32) * factorial(p) * factorial(m));
                for x in 0..n {
                    out[m][x] = f[x] * comb * w[x].powi(p as i32);
                }
            }
            return Ok(out);
        }
        let base = self.coefficients_at(depth - 1, k, f, w, mass)?;
        for (m, b) in base.into_iter().enumerate() {
            out[m] = b;
        }
        let layer = &self.layers[depth - 1];
        for j in 0..k.saturating_sub(1) {
            let c = layer.resolve(k - j, n, mass)?;
            if c.iter().all(|v| *v == 0.0) {
                continue;
            }
            let cf: Vec<C64> = f.iter().zip(&c).map(|(a, b)| a * b).collect();
            let inner = self.coefficients_at(depth - 1, j, &cf, w, mass)?;
            let bin = binomial(k, j);
            for (m, a) in inner.into_iter().enumerate() {
                for x in 0..n {
                    out[m][x] += a[x] * bin;
                }
            }
        }
        Ok(out)
    }

    /// `Φ^k(f)` at the parametrix with coincidence values `w`.
    pub fn functional(
        &self,
        space: &Arc<FieldSpace>,
        k: usize,
        f: &[C64],
        w: &[f64],
        mass: Option<&[f64]>,
    ) -> Result<PolynomialFunctional> {
        let coeffs = self.power_coefficients(k, f, w, mass)?;
        let mut out = PolynomialFunctional::zero(space);
        for (m, a) in coeffs.iter().enumerate() {
            if a.iter().all(|v| v.norm() == 0.0) {
                continue;
            }
            out = out.checked_add(&PolynomialFunctional::local_power_complex(space, a, m as u32)?)?;
        }
        Ok(out.compact())
    }
}

fn mass_of(p: &Parametrix) -> Option<&[f64]> {
    p.local.as_ref().map(|l| l.c.as_slice())
}

/// `:Φ^k:(f)` as an observable anchored at the parametrix it was ordered with.
#[derive(Clone, Debug)]
pub struct WickPower {
    pub k: usize,
    pub smearing: Vec<C64>,
    pub observable: EquivariantObservable,
}

impl WickPower {
    /// Orders `φ^k` with the coincidence limit of `p`.
    pub fn new(k: usize, f: &[C64], p: &Parametrix, family: &WickFamily) -> Result<Self> {
        let w = coincidence(p)?;
        Self::with_coincidence(k, f, p, &w, family)
    }

    pub fn real(k: usize, f: &[f64], p: &Parametrix, family: &WickFamily) -> Result<Self> {
        let fc: Vec<C64> = f.iter().map(|v| C64::new(*v, 0.0)).collect();
        Self::new(k, &fc, p, family)
    }

    /// Orders `φ^k` with externally supplied `[W_P]`.
    pub fn with_coincidence(k: usize, f: &[C64], p: &Parametrix, w: &[f64], family: &WickFamily) -> Result<Self> {
        if f.len() != p.n() {
            return Err(Error::LatticeMismatch(format!("smearing has {} entries, lattice {}", f.len(), p.n())));
        }
        let space = FieldSpace::new(p.lattice.clone(), 0)?;
        let functional = family.functional(&space, k, f, w, mass_of(p))?;
        let observable = EquivariantObservable::new(p.clone(), functional, format!(":phi^{k}:"))?;
        Ok(WickPower { k, smearing: f.to_vec(), observable })
    }

    pub fn functional(&self) -> &PolynomialFunctional {
        &self.observable.functional
    }

    pub fn at(&self, q: &Parametrix) -> Result<PolynomialFunctional> {
        self.observable.at(q)
    }

    pub fn evaluate(&self, phi: &[f64]) -> Result<C64> {
        self.observable.functional.evaluate(phi)
    }
}

/// `|⟨Φ^k(f)'[φ₁], φ₂⟩ − k Φ^{k−1}(φ₂ f)(φ₁)|`.
pub fn wick_derivative_axiom_check(
    k: usize,
    f: &[C64],
    p: &Parametrix,
    family: &WickFamily,
    phi1: &[f64],
    phi2: &[f64],
) -> Result<f64> {
    let w = coincidence(p)?;
    wick_derivative_residual(k, f, p, &w, family, phi1, phi2)
}

pub fn wick_derivative_residual(
    k: usize,
    f: &[C64],
    p: &Parametrix,
    w: &[f64],
    family: &WickFamily,
    phi1: &[f64],
    phi2: &[f64],
) -> Result<f64> {
    if k == 0 {
        let wp = WickPower::with_coincidence(0, f, p, w, family)?;
        return Ok(wp.functional().directional_derivative(phi2)?.evaluate(phi1)?.norm());
    }
    let wp = WickPower::with_coincidence(k, f, p, w, family)?;
    let lhs = wp.functional().directional_derivative(phi2)?.evaluate(phi1)?;
    let f2: Vec<C64> = f.iter().zip(phi2).map(|(a, b)| a * b).collect();
    let lower = WickPower::with_coincidence(k - 1, &f2, p, w, family)?;
    let rhs = lower.evaluate(phi1)? * k as f64;
    Ok((lhs - rhs).norm())
}

/// Injected coefficients recovered from two families.
#[derive(Clone, Debug, Serialize)]
pub struct ExtractedAmbiguity {
    pub coefficients: AmbiguityCoefficients,
    /// Largest first-derivative norm of the differences `C_k`.
    pub derivative_residual: f64,
}

/// Recovers `c_j` with `A^k = B^k + Σ_j C(k,j) B^j(c_{k−j} ·)` for `k ≤ kmax`.
pub fn extract_ambiguity(
    a: &WickFamily,
    b: &WickFamily,
    p: &Parametrix,
    kmax: usize,
    probe: &[f64],
) -> Result<ExtractedAmbiguity> {
    let w = coincidence(p)?;
    extract_ambiguity_with(a, b, p, &w, kmax, probe)
}

pub fn extract_ambiguity_with(
    a: &WickFamily,
    b: &WickFamily,
    p: &Parametrix,
    w: &[f64],
    kmax: usize,
    probe: &[f64],
) -> Result<ExtractedAmbiguity> {
    let n = p.n();
    let mass = mass_of(p);
    let space = FieldSpace::new(p.lattice.clone(), 0)?;
    let one = vec![C64::new(1.0, 0.0); n];
    // Φ^1 must agree
    let d1 = a
        .functional(&space, 1, &one, w, mass)?
        .checked_sub(&b.functional(&space, 1, &one, w, mass)?)?;
    if d1.gradient(probe)?.iter().any(|v| v.norm() > 1e-12) || d1.evaluate(probe)?.norm() > 1e-12 {
        return Err(Error::Invalid("families disagree at k=1; not related by a redefinition".into()));
    }
    let mut out = AmbiguityCoefficients::zero();
    let mut worst: f64 = 0.0;
    let mu = p.lattice.volume_weight.clone();
    for k in 2..=kmax {
        // per site: C_k(δ_x) with δ_x = e_x / μ_x
        let mut ck = vec![0.0; n];
        for x in 0..n {
            let mut f = vec![C64::new(0.0, 0.0); n];
            f[x] = C64::new(1.0 / mu[x], 0.0);
            let mut diff = a.functional(&space, k, &f, w, mass)?.checked_sub(&b.functional(&space, k, &f, w, mass)?)?;
            for j in 1..k - 1 {
                let c = out.resolve(k - j, n, mass)?;
                let cf: Vec<C64> = f.iter().zip(&c).map(|(v, cj)| v * cj).collect();
                diff = diff.checked_sub(&b.functional(&space, j, &cf, w, mass)?.scale(C64::new(binomial(k, j), 0.0)))?;
            }
            let g = diff.gradient(probe)?;
            worst = worst.max(g.iter().map(|v| v.norm()).fold(0.0, f64::max));
            ck[x] = diff.evaluate(probe)?.re;
        }
        if ck.iter().any(|v| *v != 0.0) {
            out.rules.insert(k, CoefficientRule::Field(ck));
        }
    }
    if worst > 1e-8 {
        return Err(Error::Invalid(format!(
            "differences are not c-numbers (derivative norm {worst:.3e}); families not related by a redefinition"
        )));
    }
    Ok(ExtractedAmbiguity { coefficients: out, derivative_residual: worst })
}

/// Largest contraction count for which the lattice diagonal is used unextended.
fn check_extension_needed(ks: &[usize], supports: &[Vec<bool>], dim: usize) -> Result<()> {
    for i in 0..ks.len() {
        for j in i + 1..ks.len() {
            let overlap = supports[i].iter().zip(&supports[j]).any(|(a, b)| *a && *b);
            if !overlap {
                continue;
            }
            let n = ks[i].min(ks[j]);
            let sd = n * dim.saturating_sub(2);
            if n >= 1 && sd >= dim {
                return Err(Error::NeedsExtension(format!(
                    "factors {i} and {j} overlap with a contraction of scaling degree {sd} ≥ {dim}"
                )));
            }
        }
    }
    Ok(())
}

/// Wick-ordered product `Φ^{k_1}(f_1) ⋯ Φ^{k_n}(f_n)` at `p`.
///
/// Cross contractions between different factors carry `P`; self
/// contractions carry `W_P`. Overlapping supports are accepted while the
/// contracted kernel stays integrable, `n(D−2) < D`.
pub fn wick_monomial(
    ks: &[usize],
    smearings: &[Vec<C64>],
    p: &Parametrix,
    w: &[f64],
    family: &WickFamily,
) -> Result<PolynomialFunctional> {
    if ks.len() != smearings.len() || ks.is_empty() {
        return Err(Error::Invalid("one smearing per Wick degree is required".into()));
    }
    let supports: Vec<Vec<bool>> = smearings.iter().map(|f| f.iter().map(|v| v.norm() != 0.0).collect()).collect();
    check_extension_needed(ks, &supports, p.lattice.dim)?;
    let op = ContractionOperator::parametrix(p);
    let mut acc = WickPower::with_coincidence(ks[0], &smearings[0], p, w, family)?.observable.functional;
    for (k, f) in ks.iter().zip(smearings).skip(1) {
        let next = WickPower::with_coincidence(*k, f, p, w, family)?.observable.functional;
        acc = star_product_kernel(&acc, &next, &op)?;
    }
    Ok(acc)
}

/// `⟨T'[φ₁], ψ⟩ − Σ_j k_j T(k − e_j; f_j ψ)(φ₁)` for the Wick-ordered product.
pub fn monomial_derivative_residual(
    ks: &[usize],
    smearings: &[Vec<C64>],
    p: &Parametrix,
    w: &[f64],
    family: &WickFamily,
    phi: &[f64],
    psi: &[f64],
) -> Result<f64> {
    let t = wick_monomial(ks, smearings, p, w, family)?;
    let lhs = t.directional_derivative(psi)?.evaluate(phi)?;
    let mut rhs = C64::new(0.0, 0.0);
    for j in 0..ks.len() {
        if ks[j] == 0 {
            continue;
        }
        let mut k2 = ks.to_vec();
        k2[j] -= 1;
        let mut f2 = smearings.to_vec();
        f2[j] = f2[j].iter().zip(psi).map(|(a, b)| a * b).collect();
        rhs += wick_monomial(&k2, &f2, p, w, family)?.evaluate(phi)? * ks[j] as f64;
    }
    Ok((lhs - rhs).norm())
}

/// Sides of the discrete Leibniz identity.
#[derive(Clone, Debug, Serialize)]
pub struct LeibnizReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

fn forward_gradient(lattice: &LatticeSpace, axis: usize, g: &[f64]) -> Vec<f64> {
    let a = lattice.spacing[axis];
    (0..lattice.n())
        .map(|x| match lattice.neighbor(x, axis, 1) {
            Some(y) => (g[y] - g[x]) / a,
            None => -g[x] / a,
        })
        .collect()
}

/// `−div` as the adjoint of the forward gradient under the `μ` pairing.
fn minus_divergence(lattice: &LatticeSpace, v: &[Vec<f64>]) -> Vec<f64> {
    let mu = &lattice.volume_weight;
    let mut out = vec![0.0; lattice.n()];
    for (axis, va) in v.iter().enumerate() {
        let a = lattice.spacing[axis];
        for y in 0..lattice.n() {
            let back = lattice.neighbor(y, axis, -1).map(|z| mu[z] * va[z]).unwrap_or(0.0);
            out[y] += (back - mu[y] * va[y]) / (a * mu[y]);
        }
    }
    out
}

/// `Φ^k(−div(f X))(φ)` against `⟨Φ^k(f)'[φ], X·∇φ⟩` with forward differences.
///
/// `w` is the coincidence data `[W_P]` and `mass` the local mass term, both
/// per site, so that no dense kernel is needed.
#[allow(clippy::too_many_arguments)]
pub fn leibniz_check(
    k: usize,
    f: &[f64],
    x_field: &[Vec<f64>],
    lattice: &LatticeSpace,
    w: &[f64],
    mass: Option<&[f64]>,
    family: &WickFamily,
    phi: &[f64],
) -> Result<LeibnizReport> {
    let lat = lattice;
    if x_field.len() != lat.dim {
        return Err(Error::Invalid(format!("vector field needs {} components", lat.dim)));
    }
    let space = FieldSpace::new(lat.clone(), 0)?;
    let fx: Vec<Vec<f64>> = x_field.iter().map(|xa| xa.iter().zip(f).map(|(a, b)| a * b).collect()).collect();
    let g = minus_divergence(lat, &fx);
    let gc: Vec<C64> = g.iter().map(|v| C64::new(*v, 0.0)).collect();
    let lhs = family.functional(&space, k, &gc, w, mass)?.evaluate(phi)?.re;
    let mut dir = vec![0.0; lat.n()];
    for (axis, xa) in x_field.iter().enumerate() {
        let d = forward_gradient(lat, axis, phi);
        for i in 0..lat.n() {
            dir[i] += xa[i] * d[i];
        }
    }
    let fc: Vec<C64> = f.iter().map(|v| C64::new(*v, 0.0)).collect();
    let rhs = family.functional(&space, k, &fc, w, mass)?.directional_derivative(&dir)?.evaluate(phi)?.re;
    Ok(LeibnizReport { lhs, rhs, residual: (lhs - rhs).abs() })
}

/// Finite-difference derivative estimates of a scalar function of `s` at 0.
#[derive(Clone, Debug, Serialize)]
pub struct SmoothnessReport {
    pub steps: Vec<f64>,
    /// `estimates[order − 1][step]`.
    pub estimates: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub smooth: bool,
}

fn central_derivative(v: &dyn Fn(f64) -> Result<f64>, order: usize, h: f64) -> Result<f64> {
    // standard second-order central stencils
    let (pts, w): (Vec<f64>, Vec<f64>) = match order {
        1 => (vec![-1.0, 1.0], vec![-0.5, 0.5]),
        2 => (vec![-1.0, 0.0, 1.0], vec![1.0, -2.0, 1.0]),
        3 => (vec![-2.0, -1.0, 1.0, 2.0], vec![-0.5, 1.0, -1.0, 0.5]),
        _ => return Err(Error::Unsupported(format!("derivative order {order}"))),
    };
    let mut acc = 0.0;
    for (p, c) in pts.iter().zip(&w) {
        acc += c * v(p * h)?;
    }
    Ok(acc / h.powi(order as i32))
}

/// Checks that derivatives up to order 3 of `values(s)` settle under step halving.
pub fn smoothness_check(values: &dyn Fn(f64) -> Result<f64>, h0: f64) -> Result<SmoothnessReport> {
    let steps: Vec<f64> = (0..4).map(|i| h0 / 2f64.powi(i)).collect();
    let mut estimates = Vec::new();
    let mut converged = Vec::new();
    for order in 1..=3 {
        let est: Vec<f64> = steps.iter().map(|h| central_derivative(values, order, *h)).collect::<Result<_>>()?;
        let scale = est.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let diffs: Vec<f64> = est.windows(2).map(|p| (p[1] - p[0]).abs()).collect();
        // Cauchy: successive differences shrink, or are already at roundoff
        let noise = 1e-6 * scale;
        let ok = diffs.windows(2).all(|d| d[1] <= 0.6 * d[0] || d[1] < noise);
        estimates.push(est);
        converged.push(ok);
    }
    let smooth = converged.iter().all(|c| *c);
    Ok(SmoothnessReport { steps, estimates, converged, smooth })
}

/// `:Φ^k:` on `h_λ` with a fixed `ν`, for the rescaling sweep.
fn wick_builder(
    k: usize,
    nu: f64,
) -> impl Fn(&BackgroundGeometry, &LatticeSpace, &[f64]) -> Result<EquivariantObservable> {
    move |h, lat, f| {
        let p = Parametrix::green(h, lat)?.with_nu(nu)?;
        Ok(WickPower::real(k, f, &p, &WickFamily::hadamard())?.observable)
    }
}

/// Values and fit of a rescaling sweep.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingSweep {
    pub lambdas: Vec<f64>,
    pub values: Vec<f64>,
    pub fit: AlmostHomogeneousFit,
}

/// `λ ↦ (S_λ :Φ^k:)(f)(G, φ)` and its almost-homogeneous fit.
pub fn scaling_sweep(
    k: usize,
    geometry: &BackgroundGeometry,
    lattice: &LatticeSpace,
    f: &[f64],
    phi: &[f64],
    lambdas: &[f64],
) -> Result<ScalingSweep> {
    let g = Parametrix::green(geometry, lattice)?;
    let nu = g.nu;
    let values = lambdas
        .iter()
        .map(|&l| {
            let o = rescaled_observable(geometry, lattice, f, l, wick_builder(k, nu))?;
            Ok(o.evaluate(&g, phi)?.re)
        })
        .collect::<Result<Vec<f64>>>()?;
    let fit = fit_almost_homogeneous(lambdas, &values, k, 1e-9)?;
    Ok(ScalingSweep { lambdas: lambdas.to_vec(), values, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::build_lattice;
    use crate::parametrix::affine_shift;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, n: usize) -> (BackgroundGeometry, LatticeSpace, Parametrix) {
        let g = BackgroundGeometry::torus(vec![4.0; dim], 1.0).unwrap();
        let l = build_lattice(&g, n).unwrap();
        let p = Parametrix::green(&g, &l).unwrap();
        (g, l, p)
    }

    fn rc(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
        (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    fn rv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn vacuum_values() {
        let (_, l, p) = setup(2, 8);
        let w = coincidence(&p).unwrap();
        let f: Vec<f64> = (0..l.n()).map(|i| 1.0 + 0.1 * i as f64).collect();
        let zero = vec![0.0; l.n()];
        let fam = WickFamily::hadamard();
        let two = WickPower::real(2, &f, &p, &fam).unwrap().evaluate(&zero).unwrap();
        let want: f64 = (0..l.n()).map(|x| w[x] * f[x] * l.volume_weight[x]).sum();
        assert!((two.re - want).abs() < 1e-12);
        assert_eq!(WickPower::real(3, &f, &p, &fam).unwrap().evaluate(&zero).unwrap(), C64::new(0.0, 0.0));
        let four = WickPower::real(4, &f, &p, &fam).unwrap().evaluate(&zero).unwrap();
        let want4: f64 = (0..l.n()).map(|x| 3.0 * w[x] * w[x] * f[x] * l.volume_weight[x]).sum();
        assert!((four.re - want4).abs() < 1e-10);
        let c0 = vec![0.3; l.n()];
        let v = WickPower::real(2, &f, &p, &fam).unwrap().evaluate(&c0).unwrap();
        let fm: f64 = (0..l.n()).map(|x| f[x] * l.volume_weight[x]).sum();
        assert!((v.re - (0.09 * fm + want)).abs() < 1e-12);
    }

    #[test]
    fn derivative_axiom_and_equivariance() {
        let (_, l, p) = setup(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fam = WickFamily::hadamard();
        let f = rc(&mut rng, l.n());
        let (a, b) = (rv(&mut rng, l.n()), rv(&mut rng, l.n()));
        for k in 1..=4 {
            assert!(wick_derivative_axiom_check(k, &f, &p, &fam, &a, &b).unwrap() < 1e-10);
        }
        let s = DMatrix::from_fn(l.n(), l.n(), |i, j| 0.01 * ((i + 2 * j) as f64).cos() + 0.01 * ((j + 2 * i) as f64).cos());
        let q = affine_shift(&p, &s).unwrap();
        let wp = WickPower::new(3, &f, &p, &fam).unwrap();
        let wq = WickPower::new(3, &f, &q, &fam).unwrap();
        let moved = wp.at(&q).unwrap();
        let d = (moved.evaluate(&a).unwrap() - wq.evaluate(&a).unwrap()).norm();
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn redefinitions_compose_and_extract() {
        let (_, l, p) = setup(2, 6);
        let w = coincidence(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = l.n();
        let c = AmbiguityCoefficients::zero()
            .with_field(2, rv(&mut rng, n))
            .unwrap()
            .with_field(3, rv(&mut rng, n))
            .unwrap()
            .with_field(4, rv(&mut rng, n))
            .unwrap();
        let c2 = AmbiguityCoefficients::zero().with_field(2, rv(&mut rng, n)).unwrap().with_field(4, rv(&mut rng, n)).unwrap();
        let base = WickFamily::hadamard();
        let twice = base.redefine(c.clone()).redefine(c2.clone());
        let once = base.redefine(c.compose(&c2, n, None).unwrap());
        let f = rc(&mut rng, n);
        let phi = rv(&mut rng, n);
        let sp = FieldSpace::new(l.clone(), 0).unwrap();
        for k in 0..=4 {
            let a = twice.functional(&sp, k, &f, &w, None).unwrap().evaluate(&phi).unwrap();
            let b = once.functional(&sp, k, &f, &w, None).unwrap().evaluate(&phi).unwrap();
            assert!((a - b).norm() < 1e-12, "k={k}");
        }
        let got = extract_ambiguity(&base.redefine(c.clone()), &base, &p, 4, &phi).unwrap();
        for j in 2..=4 {
            let want = c.resolve(j, n, None).unwrap();
            let have = got.coefficients.resolve(j, n, None).unwrap();
            for x in 0..n {
                assert!((want[x] - have[x]).abs() < 1e-12);
            }
        }
        assert!(got.derivative_residual < 1e-10);
        assert!(extract_ambiguity(&base, &base, &p, 4, &phi).unwrap().coefficients.is_zero());
    }

    #[test]
    fn disjoint_monomial_factorizes() {
        let (_, l, p) = setup(2, 6);
        let w = coincidence(&p).unwrap();
        let fam = WickFamily::hadamard();
        let mut f = vec![C64::new(0.0, 0.0); l.n()];
        let mut g = f.clone();
        f[0] = C64::new(1.0, 0.0);
        f[1] = C64::new(0.5, 0.0);
        g[20] = C64::new(2.0, 0.0);
        let t = wick_monomial(&[1, 1], &[f.clone(), g.clone()], &p, &w, &fam).unwrap();
        let phi: Vec<f64> = (0..l.n()).map(|i| (0.3 * i as f64).sin()).collect();
        let fr: Vec<f64> = f.iter().map(|v| v.re).collect();
        let gr: Vec<f64> = g.iter().map(|v| v.re).collect();
        let lin = |h: &[f64]| -> f64 { (0..l.n()).map(|x| h[x] * phi[x] * l.volume_weight[x]).sum() };
        let want = lin(&fr) * lin(&gr) + p.pair(&fr, &gr);
        assert!((t.evaluate(&phi).unwrap().re - want).abs() < 1e-12);
        let t20 = wick_monomial(&[2, 0], &[f.clone(), g.clone()], &p, &w, &fam).unwrap();
        let two = WickPower::with_coincidence(2, &f, &p, &w, &fam).unwrap().evaluate(&phi).unwrap();
        assert!((t20.evaluate(&phi).unwrap() - two * gr.iter().zip(&l.volume_weight).map(|(a, b)| a * b).sum::<f64>()).norm() < 1e-12);
        let res = monomial_derivative_residual(&[2, 2], &[f.clone(), f.clone()], &p, &w, &fam, &phi, &fr).unwrap();
        assert!(res < 1e-10);
    }

    #[test]
    fn leibniz_first_power_is_exact() {
        let (_, l, p) = setup(2, 8);
        let w = coincidence(&p).unwrap();
        let f = l.sample(|x| (0.5 * x[0]).sin() + 1.0);
        let x = vec![l.sample(|x| x[1].cos()), l.sample(|_| 0.5)];
        let phi = l.sample(|x| (x[0] * 1.5).sin() * x[1].cos());
        let r = leibniz_check(1, &f, &x, &l, &w, None, &WickFamily::hadamard(), &phi).unwrap();
        assert!(r.residual < 1e-13, "{r:?}");
        let zero = vec![vec![0.0; l.n()]; 2];
        let r0 = leibniz_check(3, &f, &zero, &l, &w, None, &WickFamily::hadamard(), &phi).unwrap();
        assert_eq!(r0.residual, 0.0);
    }

    #[test]
    fn smoothness_detects_kinks() {
        let smooth = smoothness_check(&|s: f64| Ok((2.0 * s).exp()), 0.1).unwrap();
        assert!(smooth.smooth);
        let kink = smoothness_check(&|s: f64| Ok(s.abs()), 0.1).unwrap();
        assert!(!kink.smooth);
    }

    #[test]
    fn three_dimensional_scaling() {
        let g = BackgroundGeometry::torus(vec![4.0; 3], 1.0).unwrap();
        let l = build_lattice(&g, 6).unwrap();
        let f = l.sample(|x| 1.0 + 0.2 * x[0].cos());
        let phi = l.sample(|x| 0.3 + 0.1 * x[2].sin());
        let lambdas: Vec<f64> = (0..6).map(|i| 0.6 * 1.25f64.powi(i)).collect();
        let sw = scaling_sweep(2, &g, &l, &f, &phi, &lambdas).unwrap();
        assert_eq!(sw.fit.log_degree, 0);
        assert!((sw.fit.kappa - 1.0).abs() < 1e-6, "{}", sw.fit.kappa);
    }

    #[test]
    fn leibniz_second_power_is_first_order() {
        use crate::parametrix::{homogeneous_coincidence, DEFAULT_FIT_DEGREE, DEFAULT_HADAMARD_ORDER};
        use crate::spectral::HomogeneousTorus;
        let g = BackgroundGeometry::torus(vec![6.0; 3], 1.0).unwrap();
        let mut res = Vec::new();
        for n in [8, 16] {
            let l = build_lattice(&g, n).unwrap();
            let t = HomogeneousTorus::new(&g, &l).unwrap();
            let w0 = homogeneous_coincidence(&t, &l, DEFAULT_HADAMARD_ORDER, g.default_nu(), DEFAULT_FIT_DEGREE).unwrap();
            let w = vec![w0; l.n()];
            let k = std::f64::consts::TAU / 6.0;
            let f = l.sample(|x| 1.0 + 0.5 * (k * x[0]).cos());
            let xf = vec![l.sample(|x| (k * x[1]).sin()), l.sample(|_| 1.0), l.sample(|_| 0.0)];
            let phi = l.sample(|x| (k * x[0]).sin() + (k * x[1]).cos());
            res.push(leibniz_check(2, &f, &xf, &l, &w, None, &WickFamily::hadamard(), &phi).unwrap().residual);
        }
        let ratio = res[0] / res[1];
        assert!((ratio - 2.0).abs() < 0.4, "{res:?}");
    }

    #[test]
    fn four_dimensional_scaling_has_logs() {
        let g = BackgroundGeometry::torus(vec![4.0; 4], 1.0).unwrap();
        let l = build_lattice(&g, 6).unwrap();
        let f = l.sample(|x| 1.0 + 0.2 * x[0].cos());
        let phi = vec![0.0; l.n()];
        let lambdas: Vec<f64> = (0..6).map(|i| 0.6 * 1.25f64.powi(i)).collect();
        let sw = scaling_sweep(2, &g, &l, &f, &phi, &lambdas).unwrap();
        assert!((sw.fit.kappa - 2.0).abs() < 1e-6, "{:?}", sw.fit);
        assert!(sw.fit.log_degree >= 1 && sw.fit.coeffs[1].abs() > 1e-6, "{:?}", sw.fit);
    }
}
