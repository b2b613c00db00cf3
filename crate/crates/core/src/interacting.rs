//! Formal power series of observables: the partition functional, the
//! Møller map relative to a fundamental solution, the perturbative
//! parametrix of a family and the maps used to compare Wick powers along it.

use crate::algebra::{gamma_exp_graded, star_product_graded, star_product_kernel, ContractionOperator, KernelComponent};
use crate::background::{LatticeSpace, SmoothFamily};
use crate::error::{Error, Result};
use crate::functional::{Locality, PolynomialFunctional};
use crate::parametrix::{
    coincidence, family_green, local_counterterm_dc, CoincidenceWindow, Parametrix, DEFAULT_FIT_DEGREE,
};
use crate::wick::WickFamily;
use crate::C64;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

/// Default cap on the coupling order.
pub const MAX_LAMBDA_ORDER: usize = 4;
/// Default cap on the deformation order.
pub const MAX_S_ORDER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SeriesVariable {
    Lambda,
    S,
}

/// `Σ_n c_n t^n`, known up to `order`.
#[derive(Clone, Debug)]
pub struct FormalSeries {
    pub variable: SeriesVariable,
    pub coefficients: Vec<PolynomialFunctional>,
}

impl FormalSeries {
    pub fn new(variable: SeriesVariable, coefficients: Vec<PolynomialFunctional>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::Invalid("a series needs at least one coefficient".into()));
        }
        for c in &coefficients[1..] {
            coefficients[0].check_space(c)?;
        }
        Ok(FormalSeries { variable, coefficients })
    }

    /// `F + 0·t + … ` up to `order`.
    pub fn constant(variable: SeriesVariable, f: PolynomialFunctional, order: usize) -> Self {
        let zero = PolynomialFunctional::zero(f.space());
        let mut coefficients = vec![zero; order + 1];
        coefficients[0] = f;
        FormalSeries { variable, coefficients }
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn truncate(&self, order: usize) -> Self {
        let n = (order + 1).min(self.coefficients.len());
        FormalSeries { variable: self.variable, coefficients: self.coefficients[..n].to_vec() }
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.variable != other.variable {
            return Err(Error::Invalid("series in different variables".into()));
        }
        self.coefficients[0].check_space(&other.coefficients[0])
    }

    /// Sum, truncated at the lower of the two orders.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        let n = self.order().min(other.order());
        let coefficients = (0..=n)
            .map(|i| self.coefficients[i].checked_add(&other.coefficients[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(FormalSeries { variable: self.variable, coefficients })
    }

    pub fn scale(&self, c: C64) -> Self {
        FormalSeries { variable: self.variable, coefficients: self.coefficients.iter().map(|f| f.scale(c)).collect() }
    }

    /// Cauchy product for an arbitrary bilinear product of coefficients.
    pub fn product(
        &self,
        other: &Self,
        prod: &dyn Fn(&PolynomialFunctional, &PolynomialFunctional) -> Result<PolynomialFunctional>,
    ) -> Result<Self> {
        self.check(other)?;
        let n = self.order().min(other.order());
        let mut coefficients = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let mut acc = PolynomialFunctional::zero(self.coefficients[0].space());
            for i in 0..=k {
                if self.coefficients[i].is_zero() || other.coefficients[k - i].is_zero() {
                    continue;
                }
                acc = acc.checked_add(&prod(&self.coefficients[i], &other.coefficients[k - i])?)?;
            }
            coefficients.push(acc.compact());
        }
        Ok(FormalSeries { variable: self.variable, coefficients })
    }

    /// Inverse for the given product; the leading coefficient must be the unit.
    pub fn inverse(
        &self,
        prod: &dyn Fn(&PolynomialFunctional, &PolynomialFunctional) -> Result<PolynomialFunctional>,
    ) -> Result<Self> {
        let c0 = &self.coefficients[0];
        let probe = vec![0.0; c0.space().n()];
        if c0.degree() != 0 || (c0.evaluate(&probe)? - C64::new(1.0, 0.0)).norm() > 1e-14 {
            return Err(Error::Invalid("series inverse needs a unit leading coefficient".into()));
        }
        let space = c0.space();
        let mut inv = vec![PolynomialFunctional::unit(space)];
        for n in 1..=self.order() {
            let mut acc = PolynomialFunctional::zero(space);
            for k in 1..=n {
                if self.coefficients[k].is_zero() || inv[n - k].is_zero() {
                    continue;
                }
                acc = acc.checked_sub(&prod(&self.coefficients[k], &inv[n - k])?)?;
            }
            inv.push(acc.compact());
        }
        Ok(FormalSeries { variable: self.variable, coefficients: inv })
    }

    pub fn evaluate(&self, phi: &[f64]) -> Result<Vec<C64>> {
        self.coefficients.iter().map(|c| c.evaluate(phi)).collect()
    }
}

/// A self-adjoint local interaction `V`.
#[derive(Clone, Debug)]
pub struct InteractionTerm {
    pub v: PolynomialFunctional,
    pub label: String,
}

impl InteractionTerm {
    pub fn new(v: PolynomialFunctional, label: impl Into<String>) -> Result<Self> {
        if v.locality() != Locality::LocalDiagonal {
            return Err(Error::Invalid("interaction must be local".into()));
        }
        let n = v.space().n();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..3 {
            let phi: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let val = v.evaluate(&phi)?;
            if val.im.abs() > 1e-12 * val.norm().max(1.0) {
                return Err(Error::Invalid("interaction is not self-adjoint".into()));
            }
        }
        Ok(InteractionTerm { v, label: label.into() })
    }

    /// `½ ∫ ρ φ² μ`.
    pub fn mass_perturbation(space: &Arc<crate::functional::FieldSpace>, rho: &[f64]) -> Result<Self> {
        let half: Vec<f64> = rho.iter().map(|r| 0.5 * r).collect();
        Self::new(PolynomialFunctional::local_power(space, &half, 2)?, "mass")
    }
}

fn check_order(order: usize, cap: usize) -> Result<()> {
    if order > cap {
        return Err(Error::OrderCap { order, cap });
    }
    Ok(())
}

fn product_for(op: ContractionOperator) -> impl Fn(&PolynomialFunctional, &PolynomialFunctional) -> Result<PolynomialFunctional> {
    move |a, b| star_product_kernel(a, b, &op)
}

/// `Z_V[P] = exp_{⋅P}(λV)` up to `order`.
pub fn partition_function(v: &InteractionTerm, p: &Parametrix, order: usize) -> Result<FormalSeries> {
    check_order(order, MAX_LAMBDA_ORDER)?;
    let prod = product_for(ContractionOperator::parametrix(p));
    let space = v.v.space();
    let mut coefficients = vec![PolynomialFunctional::unit(space)];
    for n in 1..=order {
        let next = prod(&coefficients[n - 1], &v.v)?.scale(C64::new(1.0 / n as f64, 0.0));
        coefficients.push(next.compact());
    }
    Ok(FormalSeries { variable: SeriesVariable::Lambda, coefficients })
}

/// `F ⋅_{P−G} G` on series.
pub fn relative_star_product(
    a: &FormalSeries,
    b: &FormalSeries,
    p: &Parametrix,
    g_fund: &Parametrix,
) -> Result<FormalSeries> {
    let prod = product_for(ContractionOperator::difference(p, g_fund)?);
    a.product(b, &prod)
}

/// `R_V(F)[P] = Z^{⋅_{P−G} −1} ⋅_{P−G} (Z ⋅_P F)` for a series `F`.
pub fn moller_map_series(
    f: &FormalSeries,
    v: &InteractionTerm,
    p: &Parametrix,
    g_fund: &Parametrix,
    order: usize,
) -> Result<FormalSeries> {
    check_order(order, MAX_LAMBDA_ORDER)?;
    p.check_compatible(g_fund)?;
    let f = if f.order() >= order {
        f.truncate(order)
    } else {
        let mut c = f.coefficients.clone();
        c.resize(order + 1, PolynomialFunctional::zero(f.coefficients[0].space()));
        FormalSeries { variable: f.variable, coefficients: c }
    };
    let z = partition_function(v, p, order)?;
    let star_p = product_for(ContractionOperator::parametrix(p));
    let rel = product_for(ContractionOperator::difference(p, g_fund)?);
    let zf = z.product(&f, &star_p)?;
    let zinv = z.inverse(&rel)?;
    zinv.product(&zf, &rel)
}

pub fn moller_map(
    f: &PolynomialFunctional,
    v: &InteractionTerm,
    p: &Parametrix,
    g_fund: &Parametrix,
    order: usize,
) -> Result<FormalSeries> {
    moller_map_series(&FormalSeries::constant(SeriesVariable::Lambda, f.clone(), order), v, p, g_fund, order)
}

/// Coefficients of `P_[[s]] = Σ_n (−P M ΔE_s)ⁿ P` along `direction`.
#[derive(Clone, Debug)]
pub struct ParametrixSeries {
    pub kernels: Vec<DMatrix<f64>>,
}

impl ParametrixSeries {
    /// `Σ_{k≤order} s^k P_k`.
    pub fn at(&self, s: f64, order: usize) -> DMatrix<f64> {
        let mut out = self.kernels[0].clone();
        for k in 1..=order.min(self.kernels.len() - 1) {
            out += &self.kernels[k] * s.powi(k as i32);
        }
        out
    }

    /// Largest asymmetry among the coefficients.
    pub fn asymmetry(&self) -> f64 {
        self.kernels.iter().map(|k| (k - k.transpose()).amax()).fold(0.0, f64::max)
    }

    /// `Υ` for `Σ_{k≥1} s^k P_k`, graded by the power of `s`.
    pub fn contraction(&self) -> ContractionOperator {
        let components = self
            .kernels
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, m)| KernelComponent { order: k, kernel: Arc::new(m.clone()), coincidence: None, singular: false })
            .collect();
        ContractionOperator::series(components, "P[[s]]-P")
    }

    /// `⋅_{P_[[s]]}` including the order-zero parametrix.
    pub fn product_operator(&self, p: &Parametrix) -> ContractionOperator {
        let mut components = vec![KernelComponent { order: 0, kernel: p.kernel.clone(), coincidence: None, singular: true }];
        components.extend(self.contraction().components);
        ContractionOperator::series(components, "P[[s]]")
    }
}

pub fn perturbative_parametrix(
    p: &Parametrix,
    family: &SmoothFamily,
    lattice: &LatticeSpace,
    direction: &[f64],
    order: usize,
) -> Result<ParametrixSeries> {
    check_order(order, MAX_S_ORDER.max(order.min(6)))?;
    if p.background_id != family.base.background_id() {
        return Err(Error::BackgroundMismatch { left: p.background_id.clone(), right: family.base.background_id() });
    }
    let es = family.operator_series(lattice, direction, order)?;
    let mu = &lattice.volume_weight;
    // −P M E_j
    let steps: Vec<DMatrix<f64>> = es
        .iter()
        .map(|e| {
            let mut pm = p.kernel.as_ref().clone();
            for j in 0..pm.ncols() {
                pm.column_mut(j).scale_mut(mu[j]);
            }
            -(pm * e)
        })
        .collect();
    let mut kernels = vec![p.kernel.as_ref().clone()];
    for k in 1..=order {
        let mut acc = DMatrix::zeros(p.n(), p.n());
        for j in 1..=k {
            acc += &steps[j] * &kernels[k - j];
        }
        kernels.push(acc);
    }
    Ok(ParametrixSeries { kernels })
}

/// `‖E_s P_[[s]]^{(≤n)} M − I‖_max` at each `s`.
pub fn parametrix_series_residual(
    series: &ParametrixSeries,
    family: &SmoothFamily,
    lattice: &LatticeSpace,
    direction: &[f64],
    order: usize,
    s_grid: &[f64],
) -> Result<Vec<f64>> {
    let mu = &lattice.volume_weight;
    s_grid
        .iter()
        .map(|&s| {
            let point: Vec<f64> = direction.iter().map(|d| d * s).collect();
            let e = family.operator_at(lattice, &point)?;
            let mut pm = series.at(s, order);
            for j in 0..pm.ncols() {
                pm.column_mut(j).scale_mut(mu[j]);
            }
            let r = &e.matrix * pm - DMatrix::identity(lattice.n(), lattice.n());
            Ok(r.amax())
        })
        .collect()
}

/// `(β_s F)[P_s] = exp[Υ_{P_s − P}] F[P]`, graded in `s`.
pub fn beta_map(f: &PolynomialFunctional, series: &ParametrixSeries, order: usize) -> Result<FormalSeries> {
    check_order(order, MAX_S_ORDER.max(order.min(6)))?;
    let coefficients = gamma_exp_graded(&series.contraction(), f, order)?;
    Ok(FormalSeries { variable: SeriesVariable::S, coefficients })
}

/// `β_s(F ⋅_P G)` and `β_sF ⋅_{P_s} β_sG`, order by order.
pub fn beta_homomorphism_defect(
    f: &PolynomialFunctional,
    g: &PolynomialFunctional,
    p: &Parametrix,
    series: &ParametrixSeries,
    order: usize,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let fg = star_product_kernel(f, g, &ContractionOperator::parametrix(p))?;
    let lhs = beta_map(&fg, series, order)?;
    let bf = beta_map(f, series, order)?;
    let bg = beta_map(g, series, order)?;
    let op = series.product_operator(p);
    // grade of a cross contraction adds to the grades of the factors
    let mut rhs = vec![PolynomialFunctional::zero(f.space()); order + 1];
    for i in 0..=order {
        for j in 0..=order - i {
            let parts = star_product_graded(&bf.coefficients[i], &bg.coefficients[j], &op, order - i - j)?;
            for (k, part) in parts.into_iter().enumerate() {
                rhs[i + j + k] = rhs[i + j + k].checked_add(&part)?;
            }
        }
    }
    (0..=order)
        .map(|k| Ok((lhs.coefficients[k].evaluate(phi)? - rhs[k].evaluate(phi)?).norm()))
        .collect()
}

/// Outcome of the perturbative-agreement comparison for one Wick power.
#[derive(Clone, Debug, Serialize)]
pub struct PpaReport {
    pub k: usize,
    /// Residual density at `φ = 0`: wick side minus `β` side, per site.
    pub residual_density: Vec<f64>,
    /// Same quantity from exact Green functions of `E_s` and the resolvent identity.
    pub oracle_density: Vec<f64>,
    /// Largest residual coefficient of any field power, per site.
    pub residual_field_terms: Vec<f64>,
    pub support: Vec<bool>,
    pub max_outside_support: f64,
    pub max_oracle_mismatch: f64,
    pub vanishes: bool,
}

fn deriv4(v: &dyn Fn(f64) -> Result<Vec<Vec<C64>>>, h: f64) -> Result<Vec<Vec<C64>>> {
    let a = v(-2.0 * h)?;
    let b = v(-h)?;
    let c = v(h)?;
    let d = v(2.0 * h)?;
    Ok((0..a.len())
        .map(|m| {
            (0..a[m].len())
                .map(|x| (a[m][x] - b[m][x] * 8.0 + c[m][x] * 8.0 - d[m][x]) / (12.0 * h))
                .collect()
        })
        .collect())
}

/// `d/ds Φ^k[h_s](f, P_s)|₀` against `d/ds β_s[Φ^k[h](f)](P_s)|₀` for a
/// mass-type family, with `P = G` and the perturbative parametrix as `P_s`.
pub fn ppa_check(
    k: usize,
    f: &[f64],
    wick: &WickFamily,
    family: &SmoothFamily,
    lattice: &LatticeSpace,
) -> Result<PpaReport> {
    if !family.is_mass_type() {
        return Err(Error::Unsupported(
            "families that vary the metric or the covector need the second-order path; only mass families are checked"
                .into(),
        ));
    }
    if family.d != 1 {
        return Err(Error::Invalid("perturbative agreement is checked along one-parameter families".into()));
    }
    let n = lattice.n();
    let g = family_green(family, lattice, &[0.0])?;
    let local = g.local.clone().ok_or_else(|| Error::NeedsSmoothPart("no local data for this background".into()))?;
    let w0 = coincidence(&g)?;
    let series = perturbative_parametrix(&g, family, lattice, &[1.0], 1)?;
    let p1_diag: Vec<f64> = (0..n).map(|x| series.kernels[1][(x, x)]).collect();
    let window = CoincidenceWindow::default_for(lattice, DEFAULT_FIT_DEGREE)?;
    let dh = local_counterterm_dc(&local, &window, g.order, g.nu)?;
    let c_plus = family.scalar_c_at(&[1.0]);
    let cdot: Vec<f64> = c_plus.iter().zip(&local.c).map(|(a, b)| a - b).collect();
    // d[W_{P_s}]/ds = diag P_1 − h'(c) ċ
    let wdot: Vec<f64> = (0..n).map(|x| p1_diag[x] - dh[x] * cdot[x]).collect();
    let fc: Vec<C64> = f.iter().map(|v| C64::new(*v, 0.0)).collect();
    let wick_side = deriv4(
        &|e: f64| {
            let w: Vec<f64> = (0..n).map(|x| w0[x] + e * wdot[x]).collect();
            let c: Vec<f64> = (0..n).map(|x| local.c[x] + e * cdot[x]).collect();
            wick.power_coefficients(k, &fc, &w, Some(&c))
        },
        1e-3,
    )?;
    // Υ_{P_1} on Σ_m ∫ a_m φ^m: a_m m(m−1)/2 diag P_1 moves to power m−2
    let base = wick.power_coefficients(k, &fc, &w0, Some(&local.c))?;
    let mut beta_side = vec![vec![C64::new(0.0, 0.0); n]; k + 1];
    for m in 2..=k {
        let w = (m * (m - 1)) as f64 / 2.0;
        for x in 0..n {
            beta_side[m - 2][x] += base[m][x] * w * p1_diag[x];
        }
    }
    let mu = &lattice.volume_weight;
    let residual_density: Vec<f64> = (0..n).map(|x| (wick_side[0][x] - beta_side[0][x]).re).collect();
    let residual_field_terms: Vec<f64> = (0..n)
        .map(|x| (1..=k).map(|m| (wick_side[m][x] - beta_side[m][x]).norm()).fold(0.0, f64::max))
        .collect();
    // oracle: finite differences of exact Green functions along the family
    let h = 1e-2;
    let coinc_at = |s: f64| -> Result<Vec<f64>> { coincidence(&family_green(family, lattice, &[s])?) };
    let (a, b, c, d) = (coinc_at(-2.0 * h)?, coinc_at(-h)?, coinc_at(h)?, coinc_at(2.0 * h)?);
    let dw_exact: Vec<f64> = (0..n).map(|x| (a[x] - 8.0 * b[x] + 8.0 * c[x] - d[x]) / (12.0 * h)).collect();
    let e1 = family.operator_series(lattice, &[1.0], 1)?;
    let dg = crate::oracle::spectral_perturbation(&g.kernel, mu, &e1[1]);
    let oracle = deriv4(
        &|e: f64| {
            let w: Vec<f64> = (0..n).map(|x| w0[x] + e * dw_exact[x]).collect();
            let c: Vec<f64> = (0..n).map(|x| local.c[x] + e * cdot[x]).collect();
            wick.power_coefficients(k, &fc, &w, Some(&c))
        },
        1e-3,
    )?;
    // Υ_{G_1} with G_1 = dG/ds exactly
    let oracle_density: Vec<f64> = (0..n)
        .map(|x| {
            let mut beta = C64::new(0.0, 0.0);
            if k >= 2 {
                beta = base[2][x] * dg[(x, x)];
            }
            (oracle[0][x] - beta).re
        })
        .collect();
    let support: Vec<bool> = cdot.iter().map(|v| *v != 0.0).collect();
    let max_outside_support = (0..n)
        .filter(|&x| !support[x])
        .map(|x| residual_density[x].abs().max(residual_field_terms[x]))
        .fold(0.0, f64::max);
    let max_oracle_mismatch =
        (0..n).map(|x| (residual_density[x] - oracle_density[x]).abs()).fold(0.0, f64::max);
    let scale = residual_density.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(PpaReport {
        k,
        vanishes: scale < 1e-12,
        residual_density,
        oracle_density,
        residual_field_terms,
        support,
        max_outside_support,
        max_oracle_mismatch,
    })
}
