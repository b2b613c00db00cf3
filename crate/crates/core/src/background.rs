//! Backgrounds `h = (g, A, c)`, their lattice discretization and the
//! elliptic operator
//!
//! ```text
//! E = -(∇_j - A_j) g^{jk} (∇_k + A_k) + c
//! ```
//!
//! The first-order factor `L_k = ∇_k + A_k` lives on lattice links: a forward
//! difference plus the link average of `A_k`. `-(∇_j - A_j)` is its formal
//! adjoint, so the quadratic form `K = Σ_k L_kᵀ W_k L_k + diag(μ c)` is
//! symmetric by construction and `E = M⁻¹ K` with `M = diag(μ)`.

use crate::error::{invalid, Error, Result};
use crate::taylor::Taylor;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Default cap on the number of lattice sites.
pub const MAX_SITES: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    FlatTorus,
    FlatPatch,
}

/// A background field that is either constant or sampled per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiteField<T> {
    Constant(T),
    Sampled { n: usize, values: Vec<T> },
}

impl<T: Clone> SiteField<T> {
    pub fn at(&self, site: usize) -> &T {
        match self {
            SiteField::Constant(v) => v,
            SiteField::Sampled { values, .. } => &values[site],
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, SiteField::Constant(_))
    }

    fn sampled_n(&self) -> Option<(usize, usize)> {
        match self {
            SiteField::Constant(_) => None,
            SiteField::Sampled { n, values } => Some((*n, values.len())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundGeometry {
    pub dim: usize,
    pub kind: GeometryKind,
    /// Coordinate length of each axis.
    pub extent: Vec<f64>,
    /// Constant metric sample, row-major `dim × dim`.
    pub metric: Vec<f64>,
    /// Covector `A` (inverse length).
    pub covector_a: SiteField<Vec<f64>>,
    /// Scalar `c` (inverse length squared).
    pub scalar_c: SiteField<f64>,
}

/// Engineering dimensions of the field, the covector and the scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EngineeringDimensions {
    pub d_phi: f64,
    pub d_a: f64,
    pub d_c: f64,
}

pub fn engineering_dimensions(dim: usize) -> EngineeringDimensions {
    EngineeringDimensions { d_phi: (dim as f64 - 2.0) / 2.0, d_a: 0.0, d_c: 2.0 }
}

impl BackgroundGeometry {
    /// Flat background with Euclidean metric, constant `A` and constant `c`.
    pub fn flat(kind: GeometryKind, extent: Vec<f64>, a: Vec<f64>, c: f64) -> Result<Self> {
        let dim = extent.len();
        let mut metric = vec![0.0; dim * dim];
        for j in 0..dim {
            metric[j * dim + j] = 1.0;
        }
        let g = BackgroundGeometry {
            dim,
            kind,
            extent,
            metric,
            covector_a: SiteField::Constant(a),
            scalar_c: SiteField::Constant(c),
        };
        g.validate()?;
        Ok(g)
    }

    /// Flat torus with `A = 0` and `c = m²`.
    pub fn torus(extent: Vec<f64>, m2: f64) -> Result<Self> {
        let dim = extent.len();
        Self::flat(GeometryKind::FlatTorus, extent, vec![0.0; dim], m2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return invalid(format!("dimension {} < 2", self.dim));
        }
        if self.extent.len() != self.dim || self.extent.iter().any(|&l| !(l > 0.0)) {
            return invalid("extent must have one positive entry per axis");
        }
        if self.metric.len() != self.dim * self.dim {
            return invalid("metric must be dim × dim");
        }
        let g = DMatrix::from_row_slice(self.dim, self.dim, &self.metric);
        if (&g - g.transpose()).amax() > 1e-14 * g.amax() {
            return invalid("metric is not symmetric");
        }
        if g.cholesky().is_none() {
            return invalid("metric is not positive-definite");
        }
        let check_a = |a: &Vec<f64>| a.len() == self.dim;
        match &self.covector_a {
            SiteField::Constant(a) if !check_a(a) => return invalid("A must have dim components"),
            SiteField::Sampled { values, .. } if !values.iter().all(check_a) => {
                return invalid("A samples must have dim components")
            }
            _ => {}
        }
        for f in [self.covector_a.sampled_n(), self.scalar_c.sampled_n()].into_iter().flatten() {
            if f.0.checked_pow(self.dim as u32) != Some(f.1) {
                return invalid("sampled field length must be n^dim");
            }
        }
        Ok(())
    }

    /// Stable identifier derived from the serialized geometry.
    pub fn background_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("geometry serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn metric_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.metric)
    }

    /// Diagonal of the metric, or an error if the metric is not diagonal.
    pub fn metric_diagonal(&self) -> Result<Vec<f64>> {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                if i != j && self.metric[i * d + j] != 0.0 {
                    return Err(Error::Unsupported(
                        "non-diagonal metrics; rotate coordinates so the metric is diagonal".into(),
                    ));
                }
            }
        }
        Ok((0..d).map(|i| self.metric[i * d + i]).collect())
    }

    /// True when `A` and `c` are constant (translation-invariant operator).
    pub fn is_homogeneous(&self) -> bool {
        self.covector_a.is_constant() && self.scalar_c.is_constant()
    }

    /// Physical side lengths `L_j √g_jj` for diagonal metrics.
    pub fn physical_extent(&self) -> Vec<f64> {
        let d = self.dim;
        (0..d).map(|j| self.extent[j] * self.metric[j * d + j].sqrt()).collect()
    }

    /// Default reference length: smallest physical side over 2π.
    pub fn default_nu(&self) -> f64 {
        self.physical_extent().into_iter().fold(f64::INFINITY, f64::min) / (2.0 * std::f64::consts::PI)
    }

    /// Continuum effective mass squared `c + g^{jk} A_j A_k` for homogeneous data.
    pub fn effective_mass2(&self) -> Option<f64> {
        match (&self.covector_a, &self.scalar_c) {
            (SiteField::Constant(a), SiteField::Constant(c)) => {
                let ginv = self.metric_matrix().try_inverse()?;
                let mut s = *c;
                for j in 0..self.dim {
                    for k in 0..self.dim {
                        s += ginv[(j, k)] * a[j] * a[k];
                    }
                }
                Some(s)
            }
            _ => None,
        }
    }
}

/// `h_λ = (λ⁻² g, A, λ² c)`.
pub fn scale_background(h: &BackgroundGeometry, lambda: f64) -> Result<BackgroundGeometry> {
    if !(lambda > 0.0) {
        return invalid(format!("scale factor must be positive, got {lambda}"));
    }
    let l2 = lambda * lambda;
    let scalar_c = match &h.scalar_c {
        SiteField::Constant(c) => SiteField::Constant(c * l2),
        SiteField::Sampled { n, values } => {
            SiteField::Sampled { n: *n, values: values.iter().map(|c| c * l2).collect() }
        }
    };
    Ok(BackgroundGeometry {
        metric: h.metric.iter().map(|g| g / l2).collect(),
        scalar_c,
        ..h.clone()
    })
}

/// Finite lattice over a background.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeSpace {
    pub dim: usize,
    pub sites_per_axis: usize,
    /// Coordinate spacing per axis.
    pub spacing: Vec<f64>,
    pub site_count: usize,
    pub volume_weight: Vec<f64>,
    pub periodic: Vec<bool>,
    pub extent: Vec<f64>,
    /// Constant metric diagonal used for σ and physical lengths.
    pub metric_diag: Vec<f64>,
    pub background_id: String,
}

pub fn build_lattice(geometry: &BackgroundGeometry, sites_per_axis: usize) -> Result<LatticeSpace> {
    build_lattice_capped(geometry, sites_per_axis, MAX_SITES)
}

pub fn build_lattice_capped(
    geometry: &BackgroundGeometry,
    sites_per_axis: usize,
    cap: usize,
) -> Result<LatticeSpace> {
    geometry.validate()?;
    if sites_per_axis < 2 {
        return invalid("sites_per_axis must be at least 2");
    }
    let count = sites_per_axis
        .checked_pow(geometry.dim as u32)
        .ok_or(Error::SiteCap { count: usize::MAX, cap })?;
    if count > cap {
        return Err(Error::SiteCap { count, cap });
    }
    for f in [geometry.covector_a.sampled_n(), geometry.scalar_c.sampled_n()].into_iter().flatten()
    {
        if f.0 != sites_per_axis {
            return Err(Error::LatticeMismatch(format!(
                "sampled field has n={} but lattice has n={sites_per_axis}",
                f.0
            )));
        }
    }
    let metric_diag = geometry.metric_diagonal()?;
    let spacing: Vec<f64> = geometry.extent.iter().map(|l| l / sites_per_axis as f64).collect();
    let sqrt_det = geometry.metric_matrix().determinant().sqrt();
    let mu = spacing.iter().product::<f64>() * sqrt_det;
    let periodic = vec![geometry.kind == GeometryKind::FlatTorus; geometry.dim];
    Ok(LatticeSpace {
        dim: geometry.dim,
        sites_per_axis,
        spacing,
        site_count: count,
        volume_weight: vec![mu; count],
        periodic,
        extent: geometry.extent.clone(),
        metric_diag,
        background_id: geometry.background_id(),
    })
}

impl LatticeSpace {
    pub fn n(&self) -> usize {
        self.site_count
    }

    /// Uniform spacing, if all axes agree.
    pub fn uniform_spacing(&self) -> Option<f64> {
        let a = self.spacing[0];
        self.spacing.iter().all(|&b| (b - a).abs() <= 1e-14 * a).then_some(a)
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        let mut c = vec![0; self.dim];
        let mut r = site;
        for j in (0..self.dim).rev() {
            c[j] = r % self.sites_per_axis;
            r /= self.sites_per_axis;
        }
        c
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.sites_per_axis + c)
    }

    /// Coordinate position of a site.
    pub fn position(&self, site: usize) -> Vec<f64> {
        self.coords(site).iter().zip(&self.spacing).map(|(&c, a)| c as f64 * a).collect()
    }

    /// Site at `site + offset` (integer lattice units), `None` off an open patch.
    pub fn shifted(&self, site: usize, offset: &[i64]) -> Option<usize> {
        let n = self.sites_per_axis as i64;
        let mut c = self.coords(site);
        for j in 0..self.dim {
            let v = c[j] as i64 + offset[j];
            if self.periodic[j] {
                c[j] = v.rem_euclid(n) as usize;
            } else if v < 0 || v >= n {
                return None;
            } else {
                c[j] = v as usize;
            }
        }
        Some(self.index(&c))
    }

    pub fn neighbor(&self, site: usize, axis: usize, step: i64) -> Option<usize> {
        let mut off = vec![0i64; self.dim];
        off[axis] = step;
        self.shifted(site, &off)
    }

    /// Minimal-image integer offset from `x` to `y`.
    pub fn offset(&self, x: usize, y: usize) -> Vec<i64> {
        let n = self.sites_per_axis as i64;
        let cx = self.coords(x);
        let cy = self.coords(y);
        (0..self.dim)
            .map(|j| {
                let mut d = cy[j] as i64 - cx[j] as i64;
                if self.periodic[j] {
                    d = d.rem_euclid(n);
                    if d > n / 2 {
                        d -= n;
                    }
                }
                d
            })
            .collect()
    }

    /// Half the squared physical length of an integer offset.
    pub fn sigma_of_offset(&self, off: &[i64]) -> f64 {
        0.5 * off
            .iter()
            .enumerate()
            .map(|(j, &d)| {
                let x = d as f64 * self.spacing[j];
                self.metric_diag[j] * x * x
            })
            .sum::<f64>()
    }

    /// Half the squared minimal-image geodesic distance.
    pub fn sigma(&self, x: usize, y: usize) -> f64 {
        self.sigma_of_offset(&self.offset(x, y))
    }

    pub fn distance(&self, x: usize, y: usize) -> f64 {
        (2.0 * self.sigma(x, y)).sqrt()
    }

    /// Full σ table (N × N).
    pub fn sigma_table(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.sigma(i, j))
    }

    pub fn total_volume(&self) -> f64 {
        self.volume_weight.iter().sum()
    }

    pub fn physical_extent(&self) -> Vec<f64> {
        self.extent.iter().zip(&self.metric_diag).map(|(l, g)| l * g.sqrt()).collect()
    }

    /// Samples a function of the coordinate position at every site.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.n()).map(|i| f(&self.position(i))).collect()
    }

    /// Σ_x μ(x) f(x) g(x).
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).zip(&self.volume_weight).map(|((a, b), m)| a * b * m).sum()
    }

    pub fn check_same(&self, other: &LatticeSpace) -> Result<()> {
        if self.site_count != other.site_count || self.dim != other.dim {
            return Err(Error::LatticeMismatch(format!(
                "{} sites in {}D vs {} sites in {}D",
                self.site_count, self.dim, other.site_count, other.dim
            )));
        }
        Ok(())
    }
}

/// Matrix of the discretized elliptic operator together with its quadratic form.
#[derive(Clone, Debug)]
pub struct EllipticOperator {
    /// `E` acting on site values.
    pub matrix: DMatrix<f64>,
    /// `K = M E`, symmetric.
    pub form: DMatrix<f64>,
    /// Volume weights used for `M`.
    pub mu: Vec<f64>,
    pub background_id: String,
    pub warnings: Vec<String>,
}

impl EllipticOperator {
    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(phi);
        (&self.matrix * v).as_slice().to_vec()
    }
}

/// Per-site coefficient series along a one-parameter line of deformations.
struct CoefficientSeries {
    c: Vec<Taylor>,
    a: Vec<Vec<Taylor>>,
    conformal: Vec<Taylor>,
}

impl CoefficientSeries {
    fn constant(lattice: &LatticeSpace, geometry: &BackgroundGeometry, order: usize) -> Self {
        let n = lattice.n();
        CoefficientSeries {
            c: (0..n).map(|i| Taylor::constant(*geometry.scalar_c.at(i), order)).collect(),
            a: (0..n)
                .map(|i| {
                    geometry.covector_a.at(i).iter().map(|&v| Taylor::constant(v, order)).collect()
                })
                .collect(),
            conformal: vec![Taylor::constant(1.0, order); n],
        }
    }
}

/// Sparse series-valued form entries and measure.
struct Assembled {
    entries: Vec<(usize, usize, Taylor)>,
    mu: Vec<Taylor>,
}

fn assemble(
    lattice: &LatticeSpace,
    coeff: &CoefficientSeries,
    order: usize,
) -> Result<Assembled> {
    let d = lattice.dim;
    let n = lattice.n();
    let g = &lattice.metric_diag;
    let vol: f64 = lattice.spacing.iter().product();
    let sqrt_det: f64 = g.iter().product::<f64>().sqrt();
    let half_dim = d as f64 / 2.0;
    let mu: Vec<Taylor> =
        coeff.conformal.iter().map(|om| om.powf(half_dim).scale(vol * sqrt_det)).collect();
    // ω_k(x) = vol √det g g^{kk} Ω^{D/2-1}
    let omega: Vec<Taylor> =
        coeff.conformal.iter().map(|om| om.powf(half_dim - 1.0).scale(vol * sqrt_det)).collect();
    let mut entries = Vec::new();
    let half = Taylor::constant(0.5, order);
    for x in 0..n {
        for k in 0..d {
            let inv_a = 1.0 / lattice.spacing[k];
            let wk = omega[x].scale(1.0 / g[k]);
            // forward link (x, x+e_k), or a ghost link to a Dirichlet zero
            let fwd = lattice.neighbor(x, k, 1);
            let links: Vec<(Option<usize>, bool)> = match fwd {
                Some(y) => vec![(Some(y), true)],
                None => vec![(None, true)],
            };
            let mut all_links = links;
            if !lattice.periodic[k] && lattice.neighbor(x, k, -1).is_none() {
                all_links.push((None, false));
            }
            for (other, forward) in all_links {
                let (w, a_link) = match other {
                    Some(y) => {
                        let wy = omega[y].scale(1.0 / g[k]);
                        (&(&wk + &wy) * &half, &(&coeff.a[x][k] + &coeff.a[y][k]) * &half)
                    }
                    None => (wk.clone(), coeff.a[x][k].clone()),
                };
                // link value L φ = α φ(head) + β φ(tail)
                let a_half = &a_link * &half;
                let alpha = &Taylor::constant(inv_a, order) + &a_half;
                let beta = &Taylor::constant(-inv_a, order) + &a_half;
                let (tail, head) = if forward { (Some(x), other) } else { (other, Some(x)) };
                let coeffs = [(head, alpha), (tail, beta)];
                for (p, cp) in coeffs.iter() {
                    for (q, cq) in coeffs.iter() {
                        if let (Some(p), Some(q)) = (p, q) {
                            entries.push((*p, *q, &(&w * cp) * cq));
                        }
                    }
                }
            }
        }
        entries.push((x, x, &mu[x] * &coeff.c[x]));
    }
    Ok(Assembled { entries, mu })
}

fn dense_coefficient(n: usize, entries: &[(usize, usize, Taylor)], k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (i, j, t) in entries {
        m[(*i, *j)] += t.c[k];
    }
    m
}

fn symmetrize_checked(m: &mut DMatrix<f64>, what: &str) -> Result<()> {
    let asym = (&*m - m.transpose()).amax();
    let scale = m.amax().max(1.0);
    if asym > 1e-12 * scale {
        return Err(Error::Invalid(format!("{what} discretization is not symmetric ({asym:e})")));
    }
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
    Ok(())
}

/// Discretized `E` on a lattice built from `geometry`.
pub fn elliptic_operator(
    lattice: &LatticeSpace,
    geometry: &BackgroundGeometry,
) -> Result<EllipticOperator> {
    if lattice.background_id != geometry.background_id() {
        return Err(Error::BackgroundMismatch {
            left: lattice.background_id.clone(),
            right: geometry.background_id(),
        });
    }
    let coeff = CoefficientSeries::constant(lattice, geometry, 0);
    operator_from_coefficients(lattice, geometry, &coeff)
}

fn operator_from_coefficients(
    lattice: &LatticeSpace,
    geometry: &BackgroundGeometry,
    coeff: &CoefficientSeries,
) -> Result<EllipticOperator> {
    let asm = assemble(lattice, coeff, 0)?;
    let n = lattice.n();
    let mut form = dense_coefficient(n, &asm.entries, 0);
    symmetrize_checked(&mut form, "elliptic operator")?;
    let mu: Vec<f64> = asm.mu.iter().map(|t| t.value()).collect();
    let mut matrix = form.clone();
    for i in 0..n {
        let inv = 1.0 / mu[i];
        for j in 0..n {
            matrix[(i, j)] *= inv;
        }
    }
    let mut warnings = Vec::new();
    let a_zero = (0..n).all(|i| coeff.a[i].iter().all(|t| t.value() == 0.0));
    if a_zero && coeff.c.iter().all(|t| t.value() <= 0.0) {
        warnings.push("c <= 0 everywhere with A = 0: E has a nontrivial kernel".to_string());
    }
    Ok(EllipticOperator { matrix, form, mu, background_id: geometry.background_id(), warnings })
}

/// What a family term deforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyTarget {
    /// Additive change of `c`.
    Mass,
    /// Additive change of `A_axis`.
    Covector(usize),
    /// Additive change of the conformal factor `Ω` in `g_s = Ω g`.
    Conformal,
}

/// One monomial `s^β · profile` of a deformation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyTerm {
    pub target: FamilyTarget,
    pub powers: Vec<u32>,
    pub profile: Vec<f64>,
}

/// Polynomial `d`-parameter family of compactly supported variations of a background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothFamily {
    pub base: BackgroundGeometry,
    pub sites_per_axis: usize,
    pub d: usize,
    pub terms: Vec<FamilyTerm>,
}

/// Result of differentiating a family operator.
#[derive(Clone, Debug)]
pub struct FamilyDerivative {
    pub matrix: DMatrix<f64>,
    pub notice: Option<String>,
}

impl SmoothFamily {
    pub fn new(
        base: BackgroundGeometry,
        sites_per_axis: usize,
        d: usize,
        terms: Vec<FamilyTerm>,
    ) -> Result<Self> {
        let fam = SmoothFamily { base, sites_per_axis, d, terms };
        fam.validate()?;
        Ok(fam)
    }

    /// `c_s = c + s ρ`.
    pub fn mass(base: BackgroundGeometry, sites_per_axis: usize, rho: Vec<f64>) -> Result<Self> {
        Self::new(
            base,
            sites_per_axis,
            1,
            vec![FamilyTerm { target: FamilyTarget::Mass, powers: vec![1], profile: rho }],
        )
    }

    /// `g_s = (1 + s χ) g`.
    pub fn conformal(base: BackgroundGeometry, sites_per_axis: usize, chi: Vec<f64>) -> Result<Self> {
        Self::new(
            base,
            sites_per_axis,
            1,
            vec![FamilyTerm { target: FamilyTarget::Conformal, powers: vec![1], profile: chi }],
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let n = self
            .sites_per_axis
            .checked_pow(self.base.dim as u32)
            .ok_or_else(|| Error::Invalid("family lattice too large".into()))?;
        for t in &self.terms {
            if t.powers.len() != self.d {
                return invalid("family term multi-index must have d entries");
            }
            if t.powers.iter().all(|&p| p == 0) {
                return invalid("family deformation must vanish at s = 0");
            }
            if t.profile.len() != n {
                return invalid("family profile length must equal the site count");
            }
            if let FamilyTarget::Covector(k) = t.target {
                if k >= self.base.dim {
                    return invalid("covector axis out of range");
                }
            }
        }
        Ok(())
    }

    /// Sites where some deformation profile is nonzero.
    pub fn support_mask(&self) -> Vec<bool> {
        let n = self.terms.first().map(|t| t.profile.len()).unwrap_or(0);
        let mut mask = vec![false; n];
        for t in &self.terms {
            for (m, &v) in mask.iter_mut().zip(&t.profile) {
                *m |= v != 0.0;
            }
        }
        mask
    }

    /// Degree of `E_s` as a polynomial in `s`, `None` when not polynomial.
    pub fn polynomial_degree(&self) -> Option<usize> {
        let mut deg = 0usize;
        for t in &self.terms {
            let p: usize = t.powers.iter().map(|&p| p as usize).sum();
            match t.target {
                FamilyTarget::Mass => deg = deg.max(p),
                FamilyTarget::Covector(_) => deg = deg.max(2 * p),
                FamilyTarget::Conformal => {
                    if self.base.dim == 2 {
                        deg = deg.max(p);
                    } else {
                        return None;
                    }
                }
            }
        }
        Some(deg)
    }

    fn series_along(
        &self,
        lattice: &LatticeSpace,
        direction: &[f64],
        order: usize,
    ) -> Result<CoefficientSeries> {
        if direction.len() != self.d {
            return invalid("direction must have d components");
        }
        let mut coeff = CoefficientSeries::constant(lattice, &self.base, order);
        for term in &self.terms {
            let p: usize = term.powers.iter().map(|&p| p as usize).sum();
            if p > order {
                continue;
            }
            let w: f64 = term.powers.iter().zip(direction).map(|(&k, v)| v.powi(k as i32)).product();
            for (x, &r) in term.profile.iter().enumerate() {
                let slot = match term.target {
                    FamilyTarget::Mass => &mut coeff.c[x],
                    FamilyTarget::Covector(k) => &mut coeff.a[x][k],
                    FamilyTarget::Conformal => &mut coeff.conformal[x],
                };
                slot.c[p] += w * r;
            }
        }
        Ok(coeff)
    }

    fn check_lattice(&self, lattice: &LatticeSpace) -> Result<()> {
        if lattice.background_id != self.base.background_id()
            || lattice.sites_per_axis != self.sites_per_axis
        {
            return Err(Error::LatticeMismatch("family lattice differs from the given lattice".into()));
        }
        Ok(())
    }

    /// Taylor coefficients `E_0, …, E_order` of `E_{t·direction}` in `t`.
    pub fn operator_series(
        &self,
        lattice: &LatticeSpace,
        direction: &[f64],
        order: usize,
    ) -> Result<Vec<DMatrix<f64>>> {
        self.check_lattice(lattice)?;
        let coeff = self.series_along(lattice, direction, order)?;
        let asm = assemble(lattice, &coeff, order)?;
        let n = lattice.n();
        let inv_mu: Vec<Taylor> = asm.mu.iter().map(|m| m.recip()).collect();
        let mut out = vec![DMatrix::zeros(n, n); order + 1];
        for (i, j, t) in &asm.entries {
            let e = &inv_mu[*i] * t;
            for k in 0..=order {
                out[k][(*i, *j)] += e.c[k];
            }
        }
        Ok(out)
    }

    /// Volume weights along the line, as Taylor coefficients.
    pub fn measure_series(
        &self,
        lattice: &LatticeSpace,
        direction: &[f64],
        order: usize,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_lattice(lattice)?;
        let coeff = self.series_along(lattice, direction, order)?;
        let asm = assemble(lattice, &coeff, order)?;
        Ok((0..=order).map(|k| asm.mu.iter().map(|t| t.c[k]).collect()).collect())
    }

    /// Operator of the deformed background at parameter `s`.
    pub fn operator_at(&self, lattice: &LatticeSpace, s: &[f64]) -> Result<EllipticOperator> {
        self.check_lattice(lattice)?;
        let order = self
            .terms
            .iter()
            .map(|t| t.powers.iter().map(|&p| p as usize).sum::<usize>())
            .max()
            .unwrap_or(0);
        let series = self.series_along(lattice, s, order)?;
        // collapse each coefficient series at t = 1
        let collapse = |t: &Taylor| Taylor::constant(t.eval(1.0), 0);
        let coeff = CoefficientSeries {
            c: series.c.iter().map(collapse).collect(),
            a: series.a.iter().map(|v| v.iter().map(collapse).collect()).collect(),
            conformal: series.conformal.iter().map(collapse).collect(),
        };
        if coeff.conformal.iter().any(|t| t.value() <= 0.0) {
            return invalid("conformal factor became non-positive");
        }
        operator_from_coefficients(lattice, &self.base, &coeff)
    }

    /// Per-site `c` at parameter `s`.
    pub fn scalar_c_at(&self, s: &[f64]) -> Vec<f64> {
        let n = self.sites_per_axis.pow(self.base.dim as u32);
        let mut c: Vec<f64> = (0..n).map(|i| *self.base.scalar_c.at(i)).collect();
        for t in &self.terms {
            if t.target == FamilyTarget::Mass {
                let w: f64 = t.powers.iter().zip(s).map(|(&k, v)| v.powi(k as i32)).product();
                for (ci, r) in c.iter_mut().zip(&t.profile) {
                    *ci += w * r;
                }
            }
        }
        c
    }

    /// True when only `c` is deformed.
    pub fn is_mass_type(&self) -> bool {
        self.terms.iter().all(|t| t.target == FamilyTarget::Mass)
    }
}

/// `dⁿE_s/dsⁿ` at `s = 0` along `direction`.
pub fn family_operator_derivative(
    family: &SmoothFamily,
    lattice: &LatticeSpace,
    order: usize,
    direction: &[f64],
) -> Result<FamilyDerivative> {
    if order == 0 {
        return invalid("derivative order must be at least 1");
    }
    let series = family.operator_series(lattice, direction, order)?;
    let fact: f64 = (1..=order).map(|k| k as f64).product();
    let matrix = &series[order] * fact;
    let notice = match family.polynomial_degree() {
        Some(deg) if order > deg => {
            Some(format!("order {order} exceeds the polynomial degree {deg}; derivative is zero"))
        }
        _ => None,
    };
    Ok(FamilyDerivative { matrix, notice })
}
