//! Parametrices, exact Green kernels and the Hadamard decomposition `P = H + W_P`.
//!
//! Kernels are two-point values: the operator attached to a kernel `P` acts as
//! `(P̃f)(x) = Σ_y P(x,y) f(y) μ(y)`. With `E = M⁻¹K` the exact Green kernel is
//! `K⁻¹`, which is symmetric whatever the measure.

use crate::background::{
    elliptic_operator, BackgroundGeometry, EllipticOperator, GeometryKind, LatticeSpace, SiteField,
    SmoothFamily,
};
use crate::error::{invalid, Error, Result};
use crate::fit::lstsq;
use crate::spectral::HomogeneousTorus;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

pub const DEFAULT_HADAMARD_ORDER: usize = 2;
pub const MAX_HADAMARD_ORDER: usize = 8;
pub const DEFAULT_FIT_DEGREE: usize = 2;
const MAX_FIT_COND: f64 = 1e10;

/// Constant-coefficient torus data used to build local counterterms.
#[derive(Clone, Debug)]
pub struct LocalData {
    pub torus: HomogeneousTorus,
    /// Per-site `c`.
    pub c: Vec<f64>,
}

impl LocalData {
    pub fn from_geometry(geometry: &BackgroundGeometry, lattice: &LatticeSpace) -> Option<Self> {
        if geometry.kind != GeometryKind::FlatTorus {
            return None;
        }
        let a = match &geometry.covector_a {
            SiteField::Constant(a) => a.clone(),
            _ => return None,
        };
        let c: Vec<f64> = (0..lattice.n()).map(|i| *geometry.scalar_c.at(i)).collect();
        Some(LocalData {
            torus: HomogeneousTorus {
                dim: lattice.dim,
                n: lattice.sites_per_axis,
                spacing: lattice.spacing.clone(),
                metric_diag: lattice.metric_diag.clone(),
                a,
                c: 0.0,
                mu: lattice.volume_weight[0],
            },
            c,
        })
    }

    /// Effective continuum mass `c + g^{jk}A_j A_k` for a local `c`.
    pub fn m2(&self, c: f64) -> f64 {
        c + self.torus.a.iter().zip(&self.torus.metric_diag).map(|(a, g)| a * a / g).sum::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct Parametrix {
    pub kernel: Arc<DMatrix<f64>>,
    pub background_id: String,
    pub nu: f64,
    /// Hadamard truncation order used for coincidence limits.
    pub order: usize,
    pub is_exact_green: bool,
    pub lattice: LatticeSpace,
    pub local: Option<LocalData>,
}

/// Header written next to a parametrix kernel block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametrixHeader {
    pub background_id: String,
    pub nu: f64,
    pub order: usize,
    pub is_exact_green: bool,
}

fn default_nu_of(lattice: &LatticeSpace) -> f64 {
    lattice.physical_extent().into_iter().fold(f64::INFINITY, f64::min) / (2.0 * PI)
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return invalid(format!("{what} must be square"));
    }
    let scale = m.amax().max(1e-300);
    if max_asymmetry(m) > 1e-12 * scale {
        return invalid(format!("{what} is not symmetric"));
    }
    Ok(())
}

impl Parametrix {
    /// Wraps a symmetric kernel.
    pub fn from_kernel(kernel: DMatrix<f64>, lattice: &LatticeSpace, nu: Option<f64>) -> Result<Self> {
        check_symmetric(&kernel, "parametrix kernel")?;
        if kernel.nrows() != lattice.n() {
            return Err(Error::LatticeMismatch("kernel size differs from the site count".into()));
        }
        let nu = nu.unwrap_or_else(|| default_nu_of(lattice));
        if !(nu > 0.0) {
            return invalid("ν must be positive");
        }
        Ok(Parametrix {
            kernel: Arc::new(kernel),
            background_id: lattice.background_id.clone(),
            nu,
            order: DEFAULT_HADAMARD_ORDER,
            is_exact_green: false,
            lattice: lattice.clone(),
            local: None,
        })
    }

    /// Exact Green kernel of the background, with local data attached.
    pub fn green(geometry: &BackgroundGeometry, lattice: &LatticeSpace) -> Result<Self> {
        let local = LocalData::from_geometry(geometry, lattice);
        let kernel = match HomogeneousTorus::new(geometry, lattice) {
            Ok(t) => circulant(lattice, &t.green_column()?),
            Err(_) => {
                let op = elliptic_operator(lattice, geometry)?;
                return Ok(Parametrix { local, nu: geometry.default_nu(), ..exact_green(&op, lattice)? });
            }
        };
        Ok(Parametrix {
            kernel: Arc::new(kernel),
            background_id: geometry.background_id(),
            nu: geometry.default_nu(),
            order: DEFAULT_HADAMARD_ORDER,
            is_exact_green: true,
            lattice: lattice.clone(),
            local,
        })
    }

    pub fn with_nu(mut self, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return invalid("ν must be positive");
        }
        self.nu = nu;
        Ok(self)
    }

    pub fn with_order(mut self, order: usize) -> Result<Self> {
        if order > MAX_HADAMARD_ORDER {
            return Err(Error::OrderCap { order, cap: MAX_HADAMARD_ORDER });
        }
        self.order = order;
        Ok(self)
    }

    pub fn header(&self) -> ParametrixHeader {
        ParametrixHeader {
            background_id: self.background_id.clone(),
            nu: self.nu,
            order: self.order,
            is_exact_green: self.is_exact_green,
        }
    }

    pub fn n(&self) -> usize {
        self.kernel.nrows()
    }

    /// `(P̃f)(x) = Σ_y P(x,y) f(y) μ(y)`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let fm: Vec<f64> = f.iter().zip(&self.lattice.volume_weight).map(|(a, m)| a * m).collect();
        (self.kernel.as_ref() * DVector::from_vec(fm)).as_slice().to_vec()
    }

    /// `⟨f, P g⟩ = Σ f(x) μ(x) P(x,y) g(y) μ(y)`.
    pub fn pair(&self, f: &[f64], g: &[f64]) -> f64 {
        self.lattice.inner(f, &self.apply(g))
    }

    pub fn check_compatible(&self, other: &Parametrix) -> Result<()> {
        if self.background_id != other.background_id {
            return Err(Error::BackgroundMismatch {
                left: self.background_id.clone(),
                right: other.background_id.clone(),
            });
        }
        self.lattice.check_same(&other.lattice)
    }
}

fn circulant(lattice: &LatticeSpace, col: &[f64]) -> DMatrix<f64> {
    let n = lattice.n();
    let t_index = |off: &[i64]| {
        let m = lattice.sites_per_axis as i64;
        off.iter().fold(0usize, |acc, &d| acc * lattice.sites_per_axis + d.rem_euclid(m) as usize)
    };
    DMatrix::from_fn(n, n, |x, y| col[t_index(&lattice.offset(y, x))])
}

/// Exact Green kernel `K⁻¹` by Cholesky factorization of the quadratic form.
pub fn exact_green(op: &EllipticOperator, lattice: &LatticeSpace) -> Result<Parametrix> {
    if op.form.nrows() != lattice.n() {
        return Err(Error::LatticeMismatch("operator size differs from the site count".into()));
    }
    let chol = op.form.clone().cholesky().filter(|ch| {
        let d = ch.l_dirty().diagonal();
        d.min() * d.min() > 1e-12 * d.max() * d.max()
    });
    let kernel = match chol {
        Some(ch) => ch.inverse(),
        None => {
            // report the offending eigenvalue of E itself
            let s: Vec<f64> = op.mu.iter().map(|m| 1.0 / m.sqrt()).collect();
            let sym = DMatrix::from_fn(op.form.nrows(), op.form.ncols(), |i, j| s[i] * op.form[(i, j)] * s[j]);
            let ev = sym.symmetric_eigen().eigenvalues;
            return Err(Error::Singular { eigenvalue: ev.min() });
        }
    };
    let mut kernel = kernel;
    symmetrize(&mut kernel);
    Ok(Parametrix {
        kernel: Arc::new(kernel),
        background_id: op.background_id.clone(),
        nu: default_nu_of(lattice),
        order: DEFAULT_HADAMARD_ORDER,
        is_exact_green: true,
        lattice: lattice.clone(),
        local: None,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Defect `E P̃ − Id` as a matrix acting on site values.
pub fn defect(op: &EllipticOperator, p: &Parametrix) -> Result<DMatrix<f64>> {
    if op.background_id != p.background_id {
        return Err(Error::BackgroundMismatch { left: op.background_id.clone(), right: p.background_id.clone() });
    }
    let n = p.n();
    let mut d = &op.matrix * p.kernel.as_ref();
    for j in 0..n {
        let m = p.lattice.volume_weight[j];
        for i in 0..n {
            d[(i, j)] *= m;
        }
        d[(j, j)] -= 1.0;
    }
    Ok(d)
}

/// `P + S` for a symmetric `S`.
pub fn affine_shift(p: &Parametrix, s: &DMatrix<f64>) -> Result<Parametrix> {
    check_symmetric(s, "shift")?;
    if s.shape() != p.kernel.shape() {
        return Err(Error::LatticeMismatch("shift size differs from the parametrix".into()));
    }
    Ok(Parametrix { kernel: Arc::new(p.kernel.as_ref() + s), is_exact_green: false, ..p.clone() })
}

fn deformed_id(base: &str, family: &SmoothFamily, s: &[f64]) -> String {
    let mut h = Sha256::new();
    h.update(base.as_bytes());
    h.update(serde_json::to_vec(&family.terms).unwrap_or_default());
    h.update(serde_json::to_vec(s).unwrap_or_default());
    let d = h.finalize();
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Background id of `h_s`.
pub fn family_background_id(family: &SmoothFamily, s: &[f64]) -> String {
    if s.iter().all(|v| *v == 0.0) {
        family.base.background_id()
    } else {
        deformed_id(&family.base.background_id(), family, s)
    }
}

/// Exact Green kernel of `E_s`.
pub fn family_green(family: &SmoothFamily, lattice: &LatticeSpace, s: &[f64]) -> Result<Parametrix> {
    if s.iter().all(|v| *v == 0.0) {
        return Parametrix::green(&family.base, lattice);
    }
    let op = family.operator_at(lattice, s)?;
    let mut g = exact_green(&op, lattice)?;
    g.background_id = family_background_id(family, s);
    g.nu = family.base.default_nu();
    g.local = LocalData::from_geometry(&family.base, lattice).filter(|_| family.is_mass_type()).map(|mut l| {
        l.c = family.scalar_c_at(s);
        l
    });
    Ok(g)
}

/// `R_s P = G_s + (P − G)`.
pub fn parametrix_transport(
    p: &Parametrix,
    family: &SmoothFamily,
    lattice: &LatticeSpace,
    s: &[f64],
) -> Result<Parametrix> {
    if p.background_id != family.base.background_id() {
        return Err(Error::BackgroundMismatch { left: p.background_id.clone(), right: family.base.background_id() });
    }
    if s.iter().all(|v| *v == 0.0) {
        return Ok(p.clone());
    }
    let g = family_green(family, lattice, &vec![0.0; s.len()])?;
    let gs = family_green(family, lattice, s)?;
    let kernel = gs.kernel.as_ref() + (p.kernel.as_ref() - g.kernel.as_ref());
    Ok(Parametrix {
        kernel: Arc::new(kernel),
        background_id: gs.background_id,
        nu: p.nu,
        order: p.order,
        is_exact_green: p.is_exact_green,
        lattice: lattice.clone(),
        local: gs.local,
    })
}

fn gamma_half_integer(x: f64) -> f64 {
    // Γ on positive integers and half-integers
    let twice = (2.0 * x).round() as i64;
    assert!(twice > 0 && ((2.0 * x) - twice as f64).abs() < 1e-12, "Γ argument {x} not a positive half-integer");
    let (mut v, mut t) = if twice % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    while t < x - 1e-12 {
        v *= t;
        t += 1.0;
    }
    v
}

/// Flat-space Hadamard coefficients for `−Δ + m²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HadamardExpansion {
    pub dim: usize,
    pub m2: f64,
    pub nu: f64,
    pub truncation_order: usize,
    /// `U_n`, multiplying `σ^{n − (D−2)/2}`.
    pub u: Vec<f64>,
    /// `V_n`, multiplying `σ^n log(σ/ν²)`. Empty for odd `D`.
    pub v: Vec<f64>,
}

impl HadamardExpansion {
    pub fn new(dim: usize, m2: f64, order: usize, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return invalid("ν must be positive");
        }
        if order > MAX_HADAMARD_ORDER {
            return Err(Error::OrderCap { order, cap: MAX_HADAMARD_ORDER });
        }
        let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
        let half = 0.5 * m2;
        let (u, v) = if dim % 2 == 1 {
            let d = dim as f64;
            let u0 = gamma_half_integer(0.5 * d - 1.0) / (4.0 * PI.powf(0.5 * d) * 2f64.powf(0.5 * (d - 2.0)));
            let mut u = Vec::with_capacity(order + 1);
            let mut poch = 1.0;
            for n in 0..=order {
                if n > 0 {
                    poch *= 2.0 - 0.5 * d + (n - 1) as f64;
                }
                u.push(u0 * half.powi(n as i32) / (fact(n) * poch));
            }
            (u, vec![])
        } else if dim == 2 {
            let v = (0..=order).map(|n| -half.powi(n as i32) / (4.0 * PI * fact(n).powi(2))).collect();
            (vec![], v)
        } else if dim == 4 {
            let v = (0..=order)
                .map(|n| m2 / (16.0 * PI * PI) * half.powi(n as i32) / (fact(n) * fact(n + 1)))
                .collect();
            (vec![1.0 / (8.0 * PI * PI)], v)
        } else {
            return Err(Error::Unsupported(format!("Hadamard coefficients for even D = {dim} > 4")));
        };
        Ok(HadamardExpansion { dim, m2, nu, truncation_order: order, u, v })
    }

    fn lead(&self) -> f64 {
        0.5 * (self.dim as f64 - 2.0)
    }

    /// `H` as a function of `σ > 0`.
    pub fn at_sigma(&self, sigma: f64) -> f64 {
        let p = self.lead();
        let mut h = 0.0;
        for (n, un) in self.u.iter().enumerate() {
            h += un * sigma.powf(n as f64 - p);
        }
        let lg = (sigma / (self.nu * self.nu)).ln();
        for (n, vn) in self.v.iter().enumerate() {
            h += vn * sigma.powi(n as i32) * lg;
        }
        h
    }

    /// `V(σ)` without the logarithm.
    pub fn v_at_sigma(&self, sigma: f64) -> f64 {
        self.v.iter().enumerate().map(|(n, vn)| vn * sigma.powi(n as i32)).sum()
    }

    /// `∂H/∂m²` at fixed `σ` and `ν`.
    pub fn d_m2_at_sigma(&self, sigma: f64) -> f64 {
        let h = 1e-6 * (1.0 + self.m2.abs());
        let up = HadamardExpansion::new(self.dim, self.m2 + h, self.truncation_order, self.nu).unwrap();
        let dn = HadamardExpansion::new(self.dim, self.m2 - h, self.truncation_order, self.nu).unwrap();
        if self.u.len() <= 1 && self.v.is_empty() {
            return 0.0;
        }
        // all coefficients are polynomials in m², so the centered difference
        // is exact up to roundoff for degree ≤ 2 and very accurate beyond
        (up.at_sigma(sigma) - dn.at_sigma(sigma)) / (2.0 * h)
    }

    /// `H(x,y)` on the lattice; zero on the diagonal.
    pub fn kernel_matrix(&self, lattice: &LatticeSpace) -> DMatrix<f64> {
        let n = lattice.n();
        DMatrix::from_fn(n, n, |x, y| if x == y { 0.0 } else { self.at_sigma(lattice.sigma(x, y)) })
    }
}

/// Hadamard expansion of a homogeneous flat background.
pub fn hadamard_kernel(
    geometry: &BackgroundGeometry,
    lattice: &LatticeSpace,
    order: usize,
    nu: Option<f64>,
) -> Result<HadamardExpansion> {
    if lattice.background_id != geometry.background_id() {
        return Err(Error::BackgroundMismatch { left: lattice.background_id.clone(), right: geometry.background_id() });
    }
    geometry.metric_diagonal()?;
    let m2 = geometry
        .effective_mass2()
        .ok_or_else(|| Error::Unsupported("Hadamard coefficients need constant A and c".into()))?;
    HadamardExpansion::new(geometry.dim, m2, order, nu.unwrap_or_else(|| geometry.default_nu()))
}

/// Least-squares extrapolation `σ → 0` over a fixed window of offsets.
#[derive(Clone, Debug)]
pub struct CoincidenceWindow {
    pub offsets: Vec<Vec<i64>>,
    pub sigma: Vec<f64>,
    /// Intercept weights: the extrapolated value is `Σ_i weights[i] · values[i]`.
    pub weights: Vec<f64>,
    pub degree: usize,
    pub cond: f64,
    pub radii: (f64, f64),
}

impl CoincidenceWindow {
    /// Offsets with physical length in `[r_lo, r_hi]`, widened until the fit is determined.
    pub fn new(lattice: &LatticeSpace, degree: usize, r_lo: f64, r_hi: f64) -> Result<Self> {
        let d = lattice.dim;
        let amin = lattice
            .spacing
            .iter()
            .zip(&lattice.metric_diag)
            .map(|(a, g)| a * g.sqrt())
            .fold(f64::INFINITY, f64::min);
        let half = (lattice.sites_per_axis / 2) as i64;
        let mut lo = r_lo.max(amin * 0.999);
        let mut hi = r_hi.max(lo);
        for _ in 0..64 {
            let mut offsets = Vec::new();
            let mut sigma = Vec::new();
            let reach: Vec<i64> = (0..d)
                .map(|j| {
                    let step = lattice.spacing[j] * lattice.metric_diag[j].sqrt();
                    let r = (hi / step).ceil() as i64;
                    if lattice.periodic[j] {
                        r.min(half - if lattice.sites_per_axis % 2 == 0 { 1 } else { 0 }).max(0)
                    } else {
                        r.min(lattice.sites_per_axis as i64 - 1)
                    }
                })
                .collect();
            let mut off = vec![0i64; d];
            let total: usize = reach.iter().map(|r| (2 * r + 1) as usize).product();
            for idx in 0..total {
                let mut rem = idx;
                for j in (0..d).rev() {
                    let w = (2 * reach[j] + 1) as usize;
                    off[j] = (rem % w) as i64 - reach[j];
                    rem /= w;
                }
                let s = lattice.sigma_of_offset(&off);
                let r = (2.0 * s).sqrt();
                if s > 0.0 && r >= lo * (1.0 - 1e-12) && r <= hi * (1.0 + 1e-12) {
                    offsets.push(off.clone());
                    sigma.push(s);
                }
            }
            let mut shells: Vec<f64> = sigma.clone();
            shells.sort_by(|a, b| a.partial_cmp(b).unwrap());
            shells.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
            if shells.len() > degree {
                let a = DMatrix::from_fn(sigma.len(), degree + 1, |i, k| sigma[i].powi(k as i32));
                let cond = match lstsq(&a, &vec![0.0; sigma.len()], MAX_FIT_COND) {
                    Ok(r) => r.cond,
                    Err(Error::IllConditioned { cond, .. }) => {
                        return Err(Error::IllConditioned {
                            cond,
                            hint: "coincidence fit window too narrow; use a finer lattice".into(),
                        })
                    }
                    Err(e) => return Err(e),
                };
                // intercept row of the pseudo-inverse, computed on unit-norm columns
                let scales: Vec<f64> = (0..=degree).map(|k| a.column(k).norm()).collect();
                let mut scaled = a.clone();
                for (k, sc) in scales.iter().enumerate() {
                    scaled.column_mut(k).scale_mut(1.0 / sc);
                }
                let pinv = scaled.pseudo_inverse(1e-14).map_err(|e| Error::Invalid(e.to_string()))?;
                let weights: Vec<f64> = (0..sigma.len()).map(|i| pinv[(0, i)] / scales[0]).collect();
                return Ok(CoincidenceWindow { offsets, sigma, weights, degree, cond, radii: (lo, hi) });
            }
            hi += amin;
            lo = (lo - amin).max(amin * 0.999);
        }
        Err(Error::IllConditioned {
            cond: f64::INFINITY,
            hint: "lattice too small for the coincidence fit".into(),
        })
    }

    /// Window `[ℓ/8, ℓ/4]` with `ℓ` the smallest physical extent.
    pub fn default_for(lattice: &LatticeSpace, degree: usize) -> Result<Self> {
        let l = lattice.physical_extent().into_iter().fold(f64::INFINITY, f64::min);
        Self::new(lattice, degree, l / 8.0, l / 4.0)
    }

    pub fn extrapolate(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Extrapolated value of `y ↦ k(x, y)` towards `y = x`.
    pub fn at_site(&self, lattice: &LatticeSpace, x: usize, k: impl Fn(usize, f64) -> f64) -> Result<f64> {
        let mut vals = Vec::with_capacity(self.offsets.len());
        for (off, s) in self.offsets.iter().zip(&self.sigma) {
            let y = lattice
                .shifted(x, off)
                .ok_or_else(|| Error::Invalid("coincidence window leaves the patch; move the site inward".into()))?;
            vals.push(k(y, *s));
        }
        Ok(self.extrapolate(&vals))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoincidenceMethod {
    /// `P(x,x)` minus the local counterterm of a constant-coefficient torus.
    LocalCounterterm,
    /// Radial least-squares extrapolation of `P − H` at every site.
    ShellFit,
}

/// `W_P = P − H` with its coincidence limit.
#[derive(Clone, Debug)]
pub struct SmoothPart {
    /// Off-diagonal `P − H`, diagonal replaced by the coincidence values.
    pub kernel: Arc<DMatrix<f64>>,
    pub coincidence: Vec<f64>,
    pub method: CoincidenceMethod,
    pub nu: f64,
}

impl SmoothPart {
    /// Smooth part of `P + S`: both the kernel and its diagonal shift by `S`.
    pub fn shift(&self, s: &DMatrix<f64>) -> SmoothPart {
        let coincidence = self.coincidence.iter().enumerate().map(|(i, c)| c + s[(i, i)]).collect();
        SmoothPart { kernel: Arc::new(self.kernel.as_ref() + s), coincidence, method: self.method, nu: self.nu }
    }

    /// Coincidence data only, no kernel.
    pub fn from_coincidence(coincidence: Vec<f64>, nu: f64, method: CoincidenceMethod) -> SmoothPart {
        let n = coincidence.len();
        let kernel = DMatrix::from_fn(n, n, |i, j| if i == j { coincidence[i] } else { 0.0 });
        SmoothPart { kernel: Arc::new(kernel), coincidence, method, nu }
    }
}

fn window_for(p: &Parametrix) -> Result<CoincidenceWindow> {
    CoincidenceWindow::default_for(&p.lattice, DEFAULT_FIT_DEGREE)
}

/// `h(x) = G_c(0) − ℓ[G_c − H_c]` for the constant-coefficient torus with `c = c(x)`.
pub fn local_counterterm(local: &LocalData, window: &CoincidenceWindow, order: usize, nu: f64) -> Result<Vec<f64>> {
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut out = Vec::with_capacity(local.c.len());
    for &c in &local.c {
        if let Some(v) = cache.get(&c.to_bits()) {
            out.push(*v);
            continue;
        }
        let t = local.torus.with_c(c);
        let col = t.green_column()?;
        let h = HadamardExpansion::new(t.dim, local.m2(c), order, nu)?;
        let vals: Vec<f64> =
            window.offsets.iter().zip(&window.sigma).map(|(o, s)| col[t.index_of(o)] - h.at_sigma(*s)).collect();
        let v = col[0] - window.extrapolate(&vals);
        cache.insert(c.to_bits(), v);
        out.push(v);
    }
    Ok(out)
}

/// `dh/dc` per site, analytic through the spectral column of `−1/λ²`.
pub fn local_counterterm_dc(local: &LocalData, window: &CoincidenceWindow, order: usize, nu: f64) -> Result<Vec<f64>> {
    let mut cache: HashMap<u64, f64> = HashMap::new();
    let mut out = Vec::with_capacity(local.c.len());
    for &c in &local.c {
        if let Some(v) = cache.get(&c.to_bits()) {
            out.push(*v);
            continue;
        }
        let t = local.torus.with_c(c);
        let col = t.green_column_dc()?;
        let h = HadamardExpansion::new(t.dim, local.m2(c), order, nu)?;
        let vals: Vec<f64> = window
            .offsets
            .iter()
            .zip(&window.sigma)
            .map(|(o, s)| col[t.index_of(o)] - h.d_m2_at_sigma(*s))
            .collect();
        let v = col[0] - window.extrapolate(&vals);
        cache.insert(c.to_bits(), v);
        out.push(v);
    }
    Ok(out)
}

/// Smooth part by radial extrapolation of `P − H` at every site.
pub fn smooth_part_fit(p: &Parametrix, h: &HadamardExpansion, window: &CoincidenceWindow) -> Result<SmoothPart> {
    let n = p.n();
    let mut kernel = DMatrix::from_fn(n, n, |x, y| if x == y { 0.0 } else { p.kernel[(x, y)] - h.at_sigma(p.lattice.sigma(x, y)) });
    let mut coincidence = Vec::with_capacity(n);
    for x in 0..n {
        coincidence.push(window.at_site(&p.lattice, x, |y, s| p.kernel[(x, y)] - h.at_sigma(s))?);
    }
    for x in 0..n {
        kernel[(x, x)] = coincidence[x];
    }
    Ok(SmoothPart { kernel: Arc::new(kernel), coincidence, method: CoincidenceMethod::ShellFit, nu: h.nu })
}

/// `W_P = P − H` and `[W_P]`.
///
/// Uses the local counterterm when the parametrix carries constant-coefficient
/// torus data, the per-site shell fit otherwise.
pub fn smooth_part(p: &Parametrix, h: &HadamardExpansion) -> Result<SmoothPart> {
    if (p.nu - h.nu).abs() > 1e-14 * p.nu {
        return invalid(format!("ν mismatch: parametrix {} vs expansion {}", p.nu, h.nu));
    }
    if h.dim != p.lattice.dim {
        return Err(Error::LatticeMismatch("expansion dimension differs from the lattice".into()));
    }
    let window = window_for(p)?;
    match &p.local {
        Some(local) => {
            let counter = local_counterterm(local, &window, h.truncation_order, h.nu)?;
            let coincidence: Vec<f64> = (0..p.n()).map(|x| p.kernel[(x, x)] - counter[x]).collect();
            let n = p.n();
            let kernel = DMatrix::from_fn(n, n, |x, y| {
                if x == y {
                    coincidence[x]
                } else {
                    p.kernel[(x, y)] - h.at_sigma(p.lattice.sigma(x, y))
                }
            });
            Ok(SmoothPart { kernel: Arc::new(kernel), coincidence, method: CoincidenceMethod::LocalCounterterm, nu: h.nu })
        }
        None => smooth_part_fit(p, h, &window),
    }
}

/// Coincidence values only, without materializing `W_P`.
pub fn coincidence(p: &Parametrix) -> Result<Vec<f64>> {
    let local = p
        .local
        .as_ref()
        .ok_or_else(|| Error::NeedsSmoothPart("parametrix carries no constant-coefficient torus data".into()))?;
    let window = window_for(p)?;
    let counter = local_counterterm(local, &window, p.order, p.nu)?;
    Ok((0..p.n()).map(|x| p.kernel[(x, x)] - counter[x]).collect())
}

/// `[W_G]` of a homogeneous torus without building any dense matrix.
pub fn homogeneous_coincidence(torus: &HomogeneousTorus, lattice: &LatticeSpace, order: usize, nu: f64, degree: usize) -> Result<f64> {
    let window = CoincidenceWindow::default_for(lattice, degree)?;
    let col = torus.green_column()?;
    let m2 = torus.c + torus.a.iter().zip(&torus.metric_diag).map(|(a, g)| a * a / g).sum::<f64>();
    let h = HadamardExpansion::new(torus.dim, m2, order, nu)?;
    let vals: Vec<f64> =
        window.offsets.iter().zip(&window.sigma).map(|(o, s)| col[torus.index_of(o)] - h.at_sigma(*s)).collect();
    Ok(window.extrapolate(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::build_lattice;

    fn torus(dim: usize, n: usize, l: f64, m2: f64) -> (BackgroundGeometry, LatticeSpace) {
        let g = BackgroundGeometry::torus(vec![l; dim], m2).unwrap();
        let lat = build_lattice(&g, n).unwrap();
        (g, lat)
    }

    #[test]
    fn green_matches_direct_solve() {
        let (g, l) = torus(2, 8, 4.0, 1.0);
        let fast = Parametrix::green(&g, &l).unwrap();
        let op = elliptic_operator(&l, &g).unwrap();
        let slow = exact_green(&op, &l).unwrap();
        assert!((fast.kernel.as_ref() - slow.kernel.as_ref()).amax() < 1e-10);
        assert!(defect(&op, &fast).unwrap().amax() < 1e-10);
    }

    #[test]
    fn identity_operator_inverts_to_identity() {
        let (g, l) = torus(2, 3, 3.0, 1.0);
        let n = l.n();
        let op = EllipticOperator {
            matrix: DMatrix::identity(n, n),
            form: DMatrix::identity(n, n),
            mu: vec![1.0; n],
            background_id: g.background_id(),
            warnings: vec![],
        };
        let p = exact_green(&op, &l).unwrap();
        assert!((p.kernel.as_ref() - DMatrix::<f64>::identity(n, n)).amax() < 1e-14);
    }

    #[test]
    fn singular_operator_names_eigenvalue() {
        let (g, l) = torus(2, 4, 4.0, 0.0);
        let op = elliptic_operator(&l, &g).unwrap();
        assert!(!op.warnings.is_empty());
        match exact_green(&op, &l) {
            Err(Error::Singular { eigenvalue }) => assert!(eigenvalue.abs() < 1e-10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hadamard_leading_terms() {
        let h3 = HadamardExpansion::new(3, 0.0, 2, 1.0).unwrap();
        let r: f64 = 0.3;
        assert!((h3.at_sigma(0.5 * r * r) - 1.0 / (4.0 * PI * r)).abs() < 1e-14);
        assert!(h3.v.is_empty());
        let h2 = HadamardExpansion::new(2, 0.0, 2, 0.7).unwrap();
        let want = -(r.ln()) / (2.0 * PI) + (2.0f64 * 0.49).ln() / (4.0 * PI);
        assert!((h2.at_sigma(0.5 * r * r) - want).abs() < 1e-14);
        assert!(h2.u.is_empty());
        // massive D=3: U_1 σ^{1/2} reproduces m² r / 8π
        let m3 = HadamardExpansion::new(3, 2.0, 1, 1.0).unwrap();
        assert!((m3.u[1] * (0.5 * r * r).sqrt() - 2.0 * r / (8.0 * PI)).abs() < 1e-14);
        assert!(HadamardExpansion::new(6, 1.0, 1, 1.0).is_err());
    }

    #[test]
    fn shell_fit_recovers_smooth_shift() {
        let (g, l) = torus(2, 16, 4.0, 1.0);
        let h = hadamard_kernel(&g, &l, 2, None).unwrap();
        let q = |p: &[f64]| 0.1 * p[0] + 0.05 * p[1] * p[1];
        let s = DMatrix::from_fn(l.n(), l.n(), |x, y| {
            0.3 + q(&l.position(x)) + q(&l.position(y)) + 0.2 * l.sigma(x, y)
        });
        let p = Parametrix::from_kernel(&h.kernel_matrix(&l) + &s, &l, Some(h.nu)).unwrap();
        let w = CoincidenceWindow::default_for(&l, 2).unwrap();
        let sp = smooth_part_fit(&p, &h, &w).unwrap();
        // away from the periodic seam S is a quadratic polynomial in the offset
        for x in 0..l.n() {
            let c = l.coords(x);
            if c.iter().all(|&v| (4..12).contains(&v)) {
                assert!((sp.coincidence[x] - s[(x, x)]).abs() < 1e-6, "{x}");
            }
        }
    }

    #[test]
    fn counterterm_coincidence_is_homogeneous_and_affine() {
        let (g, l) = torus(2, 8, 4.0, 1.0);
        let p = Parametrix::green(&g, &l).unwrap();
        let h = hadamard_kernel(&g, &l, 2, None).unwrap();
        let w = smooth_part(&p, &h).unwrap();
        let c0 = w.coincidence[0];
        assert!(w.coincidence.iter().all(|c| (c - c0).abs() < 1e-12));
        let fit = smooth_part_fit(&p, &h, &CoincidenceWindow::default_for(&l, 2).unwrap()).unwrap();
        assert!((fit.coincidence[3] - c0).abs() < 1e-10);
        let s = DMatrix::from_fn(l.n(), l.n(), |x, y| 0.01 * ((x + y) as f64).sin());
        let ps = affine_shift(&p, &s).unwrap();
        let ws = smooth_part(&ps, &h).unwrap();
        let shifted = w.shift(&s);
        for x in 0..l.n() {
            assert!((ws.coincidence[x] - w.coincidence[x] - s[(x, x)]).abs() < 1e-12);
            assert!((shifted.coincidence[x] - ws.coincidence[x]).abs() < 1e-12);
        }
    }

    #[test]
    fn nu_covariance_in_even_dimension() {
        let (g, l) = torus(2, 8, 4.0, 1.0);
        let p = Parametrix::green(&g, &l).unwrap();
        let h1 = hadamard_kernel(&g, &l, 2, Some(0.5)).unwrap();
        let h2 = hadamard_kernel(&g, &l, 2, Some(0.8)).unwrap();
        let w1 = smooth_part(&p.clone().with_nu(0.5).unwrap(), &h1).unwrap();
        let w2 = smooth_part(&p.with_nu(0.8).unwrap(), &h2).unwrap();
        let (x, y) = (0, 3);
        let s = l.sigma(x, y);
        let want = h1.v_at_sigma(s) * (0.64f64 / 0.25).ln();
        assert!((w2.kernel[(x, y)] - w1.kernel[(x, y)] - want).abs() < 1e-13);
    }
}
