//! Polynomial functionals of a lattice field.
//!
//! A functional is a finite sum of terms. Each term is a small graph: vertices
//! carry a per-site weight (including the volume factor) and a number of field
//! legs per jet slot, edges carry two-point kernels raised to integer powers.
//! The value of a term at `φ` is
//!
//! ```text
//! c · Σ_{x_1..x_V} Π_v w_v(x_v) Π_slot (j_slot φ)(x_v)^{legs} · Π_e K_e(x_a, x_b)^{p_e}
//! ```
//!
//! Local functionals are single-vertex terms without edges. Regular ones have at
//! most one leg per vertex. Products and contractions only ever concatenate
//! vertices or add edges, so every operation of the algebra stays exact.

mod network;

use crate::background::LatticeSpace;
use crate::error::{Error, Result};
use crate::C64;
use nalgebra::DMatrix;
use network::Factor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

pub const DEFAULT_DEGREE_CAP: usize = 6;
pub const MAX_JET_ORDER: usize = 1;

/// One-dimensional finite-difference stencil for a jet component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JetStencil {
    pub order: usize,
    /// Coefficients on offsets `-order..=order`, in units of `1/a^order`.
    pub weights: Vec<f64>,
}

impl JetStencil {
    pub fn new(order: usize) -> Result<Self> {
        let weights = match order {
            0 => vec![1.0],
            1 => vec![-0.5, 0.0, 0.5],
            _ => {
                return Err(Error::Unsupported(format!(
                    "jet order {order} exceeds the stencil table (max {MAX_JET_ORDER})"
                )))
            }
        };
        Ok(JetStencil { order, weights })
    }

    /// Applies the stencil to samples `u(x + i a)` for `i = -order..=order`.
    pub fn apply(&self, samples: &[f64], a: f64) -> f64 {
        let s: f64 = self.weights.iter().zip(samples).map(|(w, u)| w * u).sum();
        s / a.powi(self.order as i32)
    }
}

/// Lattice together with the jet slots functionals may depend on.
///
/// Slot 0 is the field value, slots `1..=D` the centered gradient components.
#[derive(Clone, Debug)]
pub struct FieldSpace {
    pub lattice: LatticeSpace,
    pub jet_order: usize,
}

impl FieldSpace {
    pub fn new(lattice: LatticeSpace, jet_order: usize) -> Result<Arc<Self>> {
        JetStencil::new(jet_order)?;
        Ok(Arc::new(FieldSpace { lattice, jet_order }))
    }

    pub fn n(&self) -> usize {
        self.lattice.n()
    }

    pub fn slots(&self) -> usize {
        1 + self.jet_order * self.lattice.dim
    }

    pub fn mu(&self) -> &[f64] {
        &self.lattice.volume_weight
    }

    fn same(&self, other: &FieldSpace) -> bool {
        self.lattice.background_id == other.lattice.background_id
            && self.lattice.site_count == other.lattice.site_count
            && self.lattice.spacing == other.lattice.spacing
            && self.jet_order == other.jet_order
    }

    fn stencil_entries(&self, slot: usize, x: usize) -> Vec<(usize, f64)> {
        if slot == 0 {
            return vec![(x, 1.0)];
        }
        let axis = slot - 1;
        let h = 0.5 / self.lattice.spacing[axis];
        let mut out = Vec::with_capacity(2);
        if let Some(p) = self.lattice.neighbor(x, axis, 1) {
            out.push((p, h));
        }
        if let Some(m) = self.lattice.neighbor(x, axis, -1) {
            out.push((m, -h));
        }
        out
    }

    /// `(j_slot φ)(x)` at every site. Off-patch neighbors count as zero.
    pub fn jet(&self, slot: usize, phi: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|x| self.stencil_entries(slot, x).iter().map(|&(y, w)| w * phi[y]).sum())
            .collect()
    }

    /// Transpose of [`FieldSpace::jet`] with respect to the plain sum.
    pub fn jet_transpose(&self, slot: usize, v: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.n()];
        for x in 0..self.n() {
            for (y, w) in self.stencil_entries(slot, x) {
                out[y] += v[x] * w;
            }
        }
        out
    }

    /// Matrix of the slot operator.
    pub fn jet_matrix(&self, slot: usize) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for x in 0..n {
            for (y, w) in self.stencil_entries(slot, x) {
                m[(x, y)] += w;
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct Vertex {
    /// Per-site weight, volume factor included.
    pub weight: Arc<Vec<C64>>,
    /// Number of field legs on each jet slot.
    pub legs: Vec<u32>,
}

impl Vertex {
    pub fn degree(&self) -> usize {
        self.legs.iter().map(|&l| l as usize).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    /// Kernel indexed `(x_a, x_b)`.
    pub kernel: Arc<DMatrix<f64>>,
    pub power: u32,
}

#[derive(Clone, Debug)]
pub struct Term {
    pub coeff: C64,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

impl Term {
    pub fn degree(&self) -> usize {
        self.vertices.iter().map(Vertex::degree).sum()
    }

    fn is_local(&self) -> bool {
        self.vertices.len() <= 1 && self.edges.is_empty()
    }

    fn is_regular(&self) -> bool {
        self.vertices.iter().all(|v| v.degree() <= 1)
    }

    fn scaled(&self, s: C64) -> Term {
        Term { coeff: self.coeff * s, ..self.clone() }
    }

    fn check(&self, n: usize, slots: usize) -> Result<()> {
        for v in &self.vertices {
            if v.weight.len() != n || v.legs.len() != slots {
                return Err(Error::LatticeMismatch("vertex weight or jet slots do not match the lattice".into()));
            }
        }
        for e in &self.edges {
            if e.a == e.b || e.a >= self.vertices.len() || e.b >= self.vertices.len() {
                return Err(Error::Invalid("edge must join two distinct vertices".into()));
            }
            if e.kernel.shape() != (n, n) {
                return Err(Error::LatticeMismatch("edge kernel does not match the lattice".into()));
            }
        }
        Ok(())
    }
}

/// Coarse locality class of a functional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Locality {
    LocalDiagonal,
    RegularDense,
    Mixed,
}

#[derive(Clone, Debug)]
pub struct PolynomialFunctional {
    space: Arc<FieldSpace>,
    terms: Vec<Term>,
}

fn c1() -> C64 {
    C64::new(1.0, 0.0)
}

fn complexify(f: &[f64]) -> Vec<C64> {
    f.iter().map(|&v| C64::new(v, 0.0)).collect()
}

impl PolynomialFunctional {
    pub fn from_terms(space: Arc<FieldSpace>, terms: Vec<Term>) -> Result<Self> {
        let n = space.n();
        let slots = space.slots();
        for t in &terms {
            t.check(n, slots)?;
        }
        Ok(PolynomialFunctional { space, terms })
    }

    pub(crate) fn from_terms_unchecked(space: Arc<FieldSpace>, terms: Vec<Term>) -> Self {
        PolynomialFunctional { space, terms }
    }

    pub fn zero(space: &Arc<FieldSpace>) -> Self {
        PolynomialFunctional { space: space.clone(), terms: vec![] }
    }

    pub fn constant(space: &Arc<FieldSpace>, c: C64) -> Self {
        PolynomialFunctional { space: space.clone(), terms: vec![Term { coeff: c, vertices: vec![], edges: vec![] }] }
    }

    /// The unit functional `Id`.
    pub fn unit(space: &Arc<FieldSpace>) -> Self {
        Self::constant(space, c1())
    }

    /// `∫ f_μ Π_slot (j_slot φ)^{legs}` with a complex smearing.
    pub fn local_jet(space: &Arc<FieldSpace>, f: &[C64], legs: &[u32]) -> Result<Self> {
        if f.len() != space.n() {
            return Err(Error::LatticeMismatch(format!("smearing has {} entries, lattice {}", f.len(), space.n())));
        }
        if legs.len() != space.slots() {
            return Err(Error::Unsupported(format!(
                "{} jet slots requested, space has {}",
                legs.len(),
                space.slots()
            )));
        }
        let weight: Vec<C64> = f.iter().zip(space.mu()).map(|(v, m)| v * m).collect();
        let vertex = Vertex { weight: Arc::new(weight), legs: legs.to_vec() };
        Ok(PolynomialFunctional {
            space: space.clone(),
            terms: vec![Term { coeff: c1(), vertices: vec![vertex], edges: vec![] }],
        })
    }

    /// `∫ f φ^k μ`.
    pub fn local_power(space: &Arc<FieldSpace>, f: &[f64], k: u32) -> Result<Self> {
        Self::local_power_complex(space, &complexify(f), k)
    }

    pub fn local_power_complex(space: &Arc<FieldSpace>, f: &[C64], k: u32) -> Result<Self> {
        let mut legs = vec![0; space.slots()];
        legs[0] = k;
        Self::local_jet(space, f, &legs)
    }

    /// `Φ(f) = ∫ f φ μ`.
    pub fn linear(space: &Arc<FieldSpace>, f: &[f64]) -> Result<Self> {
        Self::local_power(space, f, 1)
    }

    pub fn linear_complex(space: &Arc<FieldSpace>, f: &[C64]) -> Result<Self> {
        Self::local_power_complex(space, f, 1)
    }

    /// `Σ_{x,y} μ(x) μ(y) K(x,y) φ(x) φ(y)`.
    pub fn quadratic(space: &Arc<FieldSpace>, kernel: DMatrix<f64>) -> Result<Self> {
        let n = space.n();
        if kernel.shape() != (n, n) {
            return Err(Error::LatticeMismatch("quadratic kernel does not match the lattice".into()));
        }
        let mut legs = vec![0; space.slots()];
        legs[0] = 1;
        let w = Arc::new(complexify(space.mu()));
        let v = Vertex { weight: w, legs };
        Ok(PolynomialFunctional {
            space: space.clone(),
            terms: vec![Term {
                coeff: c1(),
                vertices: vec![v.clone(), v],
                edges: vec![Edge { a: 0, b: 1, kernel: Arc::new(kernel), power: 1 }],
            }],
        })
    }

    /// `Φ(f_1) ⋯ Φ(f_k)` as a pointwise product.
    pub fn product_of_linears(space: &Arc<FieldSpace>, fs: &[Vec<f64>]) -> Result<Self> {
        let mut out = Self::unit(space);
        for f in fs {
            out = out.product_with_cap(&Self::linear(space, f)?, usize::MAX)?;
        }
        Ok(out)
    }

    pub fn space(&self) -> &Arc<FieldSpace> {
        &self.space
    }

    pub fn lattice(&self) -> &LatticeSpace {
        &self.space.lattice
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn into_terms(self) -> Vec<Term> {
        self.terms
    }

    pub fn degree(&self) -> usize {
        self.terms.iter().map(Term::degree).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff == C64::new(0.0, 0.0))
    }

    pub fn locality(&self) -> Locality {
        if self.terms.iter().all(Term::is_local) {
            Locality::LocalDiagonal
        } else if self.terms.iter().all(Term::is_regular) {
            Locality::RegularDense
        } else {
            Locality::Mixed
        }
    }

    /// Sites where some vertex weight is nonzero.
    pub fn support(&self) -> Vec<bool> {
        let mut s = vec![false; self.space.n()];
        for t in &self.terms {
            if t.coeff == C64::new(0.0, 0.0) {
                continue;
            }
            for v in &t.vertices {
                for (i, w) in v.weight.iter().enumerate() {
                    if *w != C64::new(0.0, 0.0) {
                        s[i] = true;
                    }
                }
            }
        }
        s
    }

    pub fn check_space(&self, other: &Self) -> Result<()> {
        if Arc::ptr_eq(&self.space, &other.space) || self.space.same(&other.space) {
            Ok(())
        } else {
            Err(Error::LatticeMismatch("functionals live on different lattices".into()))
        }
    }

    fn check_field(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.space.n() {
            return Err(Error::LatticeMismatch(format!(
                "field has {} samples, lattice has {}",
                phi.len(),
                self.space.n()
            )));
        }
        Ok(())
    }

    fn jets(&self, phi: &[f64]) -> Vec<Vec<f64>> {
        (0..self.space.slots()).map(|s| self.space.jet(s, phi)).collect()
    }

    fn term_factors(&self, term: &Term, jets: &[Vec<f64>]) -> Vec<Factor> {
        let n = self.space.n();
        let mut factors = Vec::with_capacity(term.vertices.len() + term.edges.len());
        for (i, v) in term.vertices.iter().enumerate() {
            let mut data: Vec<C64> = v.weight.as_ref().clone();
            for (slot, &l) in v.legs.iter().enumerate() {
                if l == 0 {
                    continue;
                }
                for (d, j) in data.iter_mut().zip(&jets[slot]) {
                    *d *= j.powi(l as i32);
                }
            }
            factors.push(Factor { vars: vec![i], data });
        }
        // merge parallel edges into one pair factor
        let mut pairs: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for e in &term.edges {
            let (lo, hi, transpose) = if e.a < e.b { (e.a, e.b, false) } else { (e.b, e.a, true) };
            let entry = pairs.entry((lo, hi)).or_insert_with(|| vec![1.0; n * n]);
            for x in 0..n {
                for y in 0..n {
                    let k = if transpose { e.kernel[(y, x)] } else { e.kernel[(x, y)] };
                    entry[x * n + y] *= k.powi(e.power as i32);
                }
            }
        }
        let mut keys: Vec<_> = pairs.keys().cloned().collect();
        keys.sort_unstable();
        for key in keys {
            let data = pairs.remove(&key).unwrap();
            factors.push(Factor { vars: vec![key.0, key.1], data: complexify(&data) });
        }
        factors
    }

    fn term_value(&self, term: &Term, jets: &[Vec<f64>]) -> Result<C64> {
        if term.coeff == C64::new(0.0, 0.0) {
            return Ok(C64::new(0.0, 0.0));
        }
        let factors = self.term_factors(term, jets);
        let out = network::contract(self.space.n(), term.vertices.len(), factors, None)?;
        Ok(term.coeff * out[0])
    }

    /// `F(φ)`.
    pub fn evaluate(&self, phi: &[f64]) -> Result<C64> {
        self.check_field(phi)?;
        let jets = self.jets(phi);
        let vals: Result<Vec<C64>> = self.terms.par_iter().map(|t| self.term_value(t, &jets)).collect();
        Ok(vals?.into_iter().sum())
    }

    /// Raw first derivative `∂F/∂φ(y)` at `φ`, so `⟨F^{(1)}[φ], ψ⟩ = Σ_y grad(y) ψ(y)`.
    pub fn gradient(&self, phi: &[f64]) -> Result<Vec<C64>> {
        self.check_field(phi)?;
        let jets = self.jets(phi);
        let n = self.space.n();
        let parts: Result<Vec<Vec<C64>>> = self
            .terms
            .par_iter()
            .map(|term| {
                let mut acc = vec![C64::new(0.0, 0.0); n];
                if term.coeff == C64::new(0.0, 0.0) {
                    return Ok(acc);
                }
                for (vi, v) in term.vertices.iter().enumerate() {
                    for (slot, &l) in v.legs.iter().enumerate() {
                        if l == 0 {
                            continue;
                        }
                        let mut t = term.clone();
                        t.vertices[vi].legs[slot] -= 1;
                        let factors = self.term_factors(&t, &jets);
                        let open = network::contract(n, t.vertices.len(), factors, Some(vi))?;
                        let scale = term.coeff * l as f64;
                        let open: Vec<C64> = open.into_iter().map(|z| z * scale).collect();
                        for (a, b) in acc.iter_mut().zip(self.space.jet_transpose(slot, &open)) {
                            *a += b;
                        }
                    }
                }
                Ok(acc)
            })
            .collect();
        let mut out = vec![C64::new(0.0, 0.0); n];
        for p in parts? {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// The functional `φ ↦ ⟨F^{(1)}[φ], ψ⟩`.
    pub fn directional_derivative(&self, psi: &[f64]) -> Result<Self> {
        self.check_field(psi)?;
        let jets = self.jets(psi);
        let mut terms = Vec::new();
        for term in &self.terms {
            for (vi, v) in term.vertices.iter().enumerate() {
                for (slot, &l) in v.legs.iter().enumerate() {
                    if l == 0 {
                        continue;
                    }
                    let mut t = term.clone();
                    let w: Vec<C64> = v.weight.iter().zip(&jets[slot]).map(|(a, b)| a * b).collect();
                    t.vertices[vi].weight = Arc::new(w);
                    t.vertices[vi].legs[slot] -= 1;
                    t.coeff *= l as f64;
                    terms.push(t);
                }
            }
        }
        Ok(PolynomialFunctional { space: self.space.clone(), terms }.compact())
    }

    /// `⟨F^{(k)}[φ], ψ_1 ⊗ ⋯ ⊗ ψ_k⟩`.
    pub fn derivative_pairing(&self, phi: &[f64], psis: &[Vec<f64>]) -> Result<C64> {
        let mut f = self.clone();
        for p in psis {
            f = f.directional_derivative(p)?;
        }
        f.evaluate(phi)
    }

    /// Raw k-th derivative tensor, row-major over `N^k` entries.
    pub fn derivative_kernel(&self, phi: &[f64], k: usize) -> Result<Vec<C64>> {
        let n = self.space.n();
        if k == 0 {
            return Ok(vec![self.evaluate(phi)?]);
        }
        let size = (n as f64).powi(k as i32);
        if size > (1u64 << 22) as f64 {
            return Err(Error::Unsupported(format!("derivative kernel of order {k} on {n} sites is too large")));
        }
        if k > self.degree() {
            return Ok(vec![C64::new(0.0, 0.0); n.pow(k as u32)]);
        }
        if k == 1 {
            return self.gradient(phi);
        }
        let mut out = Vec::with_capacity(n.pow(k as u32));
        for y in 0..n {
            let mut e = vec![0.0; n];
            e[y] = 1.0;
            out.extend(self.directional_derivative(&e)?.derivative_kernel(phi, k - 1)?);
        }
        Ok(out)
    }

    pub fn scale(&self, s: C64) -> Self {
        PolynomialFunctional { space: self.space.clone(), terms: self.terms.iter().map(|t| t.scaled(s)).collect() }
    }

    pub fn checked_add(&self, other: &Self) -> Result<Self> {
        self.check_space(other)?;
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(PolynomialFunctional { space: self.space.clone(), terms }.compact())
    }

    pub fn checked_sub(&self, other: &Self) -> Result<Self> {
        self.checked_add(&other.scale(C64::new(-1.0, 0.0)))
    }

    /// Pointwise product, rejecting degrees above [`DEFAULT_DEGREE_CAP`].
    pub fn pointwise_product(&self, other: &Self) -> Result<Self> {
        self.product_with_cap(other, DEFAULT_DEGREE_CAP)
    }

    pub fn product_with_cap(&self, other: &Self, cap: usize) -> Result<Self> {
        self.check_space(other)?;
        let degree = self.degree() + other.degree();
        if degree > cap {
            return Err(Error::DegreeCap { degree, cap });
        }
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                terms.push(concat_terms(a, b));
            }
        }
        Ok(PolynomialFunctional { space: self.space.clone(), terms }.compact())
    }

    /// `F*`: complex conjugation of coefficients and weights.
    pub fn involution(&self) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|t| Term {
                coeff: t.coeff.conj(),
                vertices: t
                    .vertices
                    .iter()
                    .map(|v| Vertex { weight: Arc::new(v.weight.iter().map(|z| z.conj()).collect()), legs: v.legs.clone() })
                    .collect(),
                edges: t.edges.clone(),
            })
            .collect();
        PolynomialFunctional { space: self.space.clone(), terms }
    }

    /// Functional `φ ↦ F(φ ∘ τ)`.
    pub fn pullback(&self, tau: &LatticeIsometry) -> Result<Self> {
        let n = self.space.n();
        if tau.image.len() != n {
            return Err(Error::LatticeMismatch("isometry acts on a different lattice".into()));
        }
        let inv = tau.inverse_map();
        let d = self.space.lattice.dim;
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let mut coeff = t.coeff;
            let vertices = t
                .vertices
                .iter()
                .map(|v| {
                    let weight: Vec<C64> = (0..n).map(|y| v.weight[inv[y]]).collect();
                    let mut legs = vec![0; v.legs.len()];
                    legs[0] = v.legs[0];
                    for j in 0..d.min(v.legs.len().saturating_sub(1)) {
                        let l = v.legs[1 + j];
                        legs[1 + tau.axis_perm[j]] += l;
                        if tau.axis_sign[j] < 0 && l % 2 == 1 {
                            coeff = -coeff;
                        }
                    }
                    Vertex { weight: Arc::new(weight), legs }
                })
                .collect();
            let edges = t
                .edges
                .iter()
                .map(|e| Edge {
                    a: e.a,
                    b: e.b,
                    kernel: Arc::new(DMatrix::from_fn(n, n, |y1, y2| e.kernel[(inv[y1], inv[y2])])),
                    power: e.power,
                })
                .collect();
            terms.push(Term { coeff, vertices, edges });
        }
        Ok(PolynomialFunctional { space: self.space.clone(), terms })
    }

    /// Keeps only the terms of total degree `k`.
    pub fn homogeneous_part(&self, k: usize) -> Self {
        let terms = self.terms.iter().filter(|t| t.degree() == k).cloned().collect();
        PolynomialFunctional { space: self.space.clone(), terms }
    }

    /// Merges structurally equal terms and folds local terms together.
    pub fn compact(self) -> Self {
        let zero = C64::new(0.0, 0.0);
        let n = self.space.n();
        let mut constant = zero;
        let mut has_constant = false;
        let mut local: HashMap<Vec<u32>, Vec<C64>> = HashMap::new();
        let mut local_order: Vec<Vec<u32>> = Vec::new();
        let mut other: Vec<Term> = Vec::new();
        let mut keys: HashMap<Vec<usize>, usize> = HashMap::new();
        for t in self.terms {
            if t.coeff == zero {
                continue;
            }
            if t.vertices.is_empty() {
                constant += t.coeff;
                has_constant = true;
            } else if t.vertices.len() == 1 && t.edges.is_empty() {
                let v = &t.vertices[0];
                let acc = local.entry(v.legs.clone()).or_insert_with(|| {
                    local_order.push(v.legs.clone());
                    vec![zero; n]
                });
                for (a, w) in acc.iter_mut().zip(v.weight.iter()) {
                    *a += t.coeff * w;
                }
            } else {
                let key = structure_key(&t);
                match keys.get(&key) {
                    Some(&i) => other[i].coeff += t.coeff,
                    None => {
                        keys.insert(key, other.len());
                        other.push(t);
                    }
                }
            }
        }
        let mut terms = Vec::new();
        if has_constant && constant != zero {
            terms.push(Term { coeff: constant, vertices: vec![], edges: vec![] });
        }
        for legs in local_order {
            let w = local.remove(&legs).unwrap();
            if w.iter().all(|z| *z == zero) {
                continue;
            }
            terms.push(Term { coeff: C64::new(1.0, 0.0), vertices: vec![Vertex { weight: Arc::new(w), legs }], edges: vec![] });
        }
        terms.extend(other.into_iter().filter(|t| t.coeff != zero));
        PolynomialFunctional { space: self.space, terms }
    }
}

fn structure_key(t: &Term) -> Vec<usize> {
    let mut key = Vec::new();
    for v in &t.vertices {
        key.push(Arc::as_ptr(&v.weight) as usize);
        key.extend(v.legs.iter().map(|&l| l as usize));
        key.push(usize::MAX);
    }
    for e in &t.edges {
        key.extend([e.a, e.b, Arc::as_ptr(&e.kernel) as usize, e.power as usize]);
    }
    key
}

/// Term of the pointwise product of two terms.
pub(crate) fn concat_terms(a: &Term, b: &Term) -> Term {
    let off = a.vertices.len();
    let mut vertices = a.vertices.clone();
    vertices.extend(b.vertices.iter().cloned());
    let mut edges = a.edges.clone();
    edges.extend(b.edges.iter().map(|e| Edge { a: e.a + off, b: e.b + off, ..e.clone() }));
    Term { coeff: a.coeff * b.coeff, vertices, edges }
}

impl std::ops::Add for &PolynomialFunctional {
    type Output = PolynomialFunctional;
    /// Panics when the operands live on different lattices.
    fn add(self, o: &PolynomialFunctional) -> PolynomialFunctional {
        self.checked_add(o).expect("adding functionals on different lattices")
    }
}

impl std::ops::Sub for &PolynomialFunctional {
    type Output = PolynomialFunctional;
    fn sub(self, o: &PolynomialFunctional) -> PolynomialFunctional {
        self.checked_sub(o).expect("subtracting functionals on different lattices")
    }
}

impl std::ops::Neg for &PolynomialFunctional {
    type Output = PolynomialFunctional;
    fn neg(self) -> PolynomialFunctional {
        self.scale(C64::new(-1.0, 0.0))
    }
}

/// Bijection of lattice sites of the form `x ↦ R x + t` with `R` a signed
/// permutation of axes.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeIsometry {
    /// `image[x] = τ(x)`.
    pub image: Vec<usize>,
    /// `R e_j = axis_sign[j] e_{axis_perm[j]}`.
    pub axis_perm: Vec<usize>,
    pub axis_sign: Vec<i64>,
}

impl LatticeIsometry {
    pub fn identity(lattice: &LatticeSpace) -> Self {
        LatticeIsometry {
            image: (0..lattice.n()).collect(),
            axis_perm: (0..lattice.dim).collect(),
            axis_sign: vec![1; lattice.dim],
        }
    }

    pub fn translation(lattice: &LatticeSpace, shift: &[i64]) -> Result<Self> {
        Self::affine(lattice, &(0..lattice.dim).collect::<Vec<_>>(), &vec![1; lattice.dim], shift)
    }

    /// `x_axis ↦ -x_axis` on a torus, mirrored about the center on a patch.
    pub fn reflection(lattice: &LatticeSpace, axis: usize) -> Result<Self> {
        let mut sign = vec![1; lattice.dim];
        sign[axis] = -1;
        let mut shift = vec![0; lattice.dim];
        if !lattice.periodic[axis] {
            shift[axis] = lattice.sites_per_axis as i64 - 1;
        }
        Self::affine(lattice, &(0..lattice.dim).collect::<Vec<_>>(), &sign, &shift)
    }

    /// General signed axis permutation followed by a translation.
    pub fn affine(lattice: &LatticeSpace, perm: &[usize], sign: &[i64], shift: &[i64]) -> Result<Self> {
        let d = lattice.dim;
        if perm.len() != d || sign.len() != d || shift.len() != d {
            return Err(Error::Invalid("isometry data must have one entry per axis".into()));
        }
        let mut seen = vec![false; d];
        for (j, &p) in perm.iter().enumerate() {
            if p >= d || seen[p] || sign[j].abs() != 1 {
                return Err(Error::Invalid("not a signed axis permutation".into()));
            }
            seen[p] = true;
            if (lattice.spacing[j] - lattice.spacing[p]).abs() > 1e-14 * lattice.spacing[j]
                || (lattice.metric_diag[j] - lattice.metric_diag[p]).abs() > 1e-14 * lattice.metric_diag[j]
                || lattice.periodic[j] != lattice.periodic[p]
            {
                return Err(Error::Invalid("axis permutation does not preserve the metric".into()));
            }
        }
        let n = lattice.sites_per_axis as i64;
        let mut image = Vec::with_capacity(lattice.n());
        for x in 0..lattice.n() {
            let c = lattice.coords(x);
            let mut out = vec![0usize; d];
            for j in 0..d {
                let k = perm[j];
                let v = sign[j] * c[j] as i64 + shift[k];
                out[k] = if lattice.periodic[k] {
                    v.rem_euclid(n) as usize
                } else if (0..n).contains(&v) {
                    v as usize
                } else {
                    return Err(Error::Invalid("map leaves the patch".into()));
                };
            }
            image.push(lattice.index(&out));
        }
        Ok(LatticeIsometry { image, axis_perm: perm.to_vec(), axis_sign: sign.to_vec() })
    }

    /// Checks a raw site permutation and recovers its affine form.
    pub fn from_permutation(lattice: &LatticeSpace, image: Vec<usize>) -> Result<Self> {
        let n = lattice.n();
        let mut hit = vec![false; n];
        if image.len() != n || image.iter().any(|&y| y >= n || std::mem::replace(&mut hit[y], true)) {
            return Err(Error::Invalid("not a bijection of lattice sites".into()));
        }
        for x in 0..n {
            for y in 0..n {
                if (lattice.sigma(x, y) - lattice.sigma(image[x], image[y])).abs() > 1e-12 * (1.0 + lattice.sigma(x, y)) {
                    return Err(Error::Invalid("permutation is not an isometry".into()));
                }
            }
        }
        let d = lattice.dim;
        let o = lattice.coords(image[0]);
        let mut perm = vec![0; d];
        let mut sign = vec![1; d];
        for j in 0..d {
            let Some(ej) = lattice.neighbor(0, j, 1) else {
                return Err(Error::Invalid("lattice too small to recover the axis map".into()));
            };
            let off = lattice.offset(image[0], image[ej]);
            let k = off.iter().position(|&v| v != 0).ok_or_else(|| Error::Invalid("degenerate axis image".into()))?;
            perm[j] = k;
            sign[j] = off[k].signum();
        }
        let shift: Vec<i64> = o.iter().map(|&v| v as i64).collect();
        let candidate = Self::affine(lattice, &perm, &sign, &shift)?;
        if candidate.image != image {
            return Err(Error::Invalid("permutation is not a signed axis map plus translation".into()));
        }
        Ok(candidate)
    }

    pub fn inverse_map(&self) -> Vec<usize> {
        let mut inv = vec![0; self.image.len()];
        for (x, &y) in self.image.iter().enumerate() {
            inv[y] = x;
        }
        inv
    }

    /// `φ ∘ τ`.
    pub fn pull_field(&self, phi: &[f64]) -> Vec<f64> {
        self.image.iter().map(|&y| phi[y]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::{build_lattice, BackgroundGeometry};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(dim: usize, n: usize, jet: usize) -> Arc<FieldSpace> {
        let g = BackgroundGeometry::torus(vec![2.0; dim], 1.0).unwrap();
        FieldSpace::new(build_lattice(&g, n).unwrap(), jet).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn stencil_exact_on_quadratics() {
        let s = JetStencil::new(1).unwrap();
        let a = 0.3;
        let u = |x: f64| 2.0 + 3.0 * x - 1.5 * x * x;
        let x0 = 0.7;
        let d = s.apply(&[u(x0 - a), u(x0), u(x0 + a)], a);
        assert!((d - (3.0 - 3.0 * x0)).abs() < 1e-12);
        assert!(JetStencil::new(2).is_err());
    }

    #[test]
    fn linear_evaluation_and_derivatives() {
        let sp = space(2, 4, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_vec(&mut rng, 16);
        let phi = rand_vec(&mut rng, 16);
        let lf = PolynomialFunctional::linear(&sp, &f).unwrap();
        let want: f64 = (0..16).map(|i| f[i] * phi[i] * sp.mu()[i]).sum();
        assert!((lf.evaluate(&phi).unwrap().re - want).abs() < 1e-14);
        let g = lf.gradient(&phi).unwrap();
        for i in 0..16 {
            assert!((g[i].re - f[i] * sp.mu()[i]).abs() < 1e-15);
        }
        assert!(lf.derivative_kernel(&phi, 2).unwrap().iter().all(|z| z.norm() == 0.0));
        let sq = lf.pointwise_product(&lf).unwrap();
        let k2 = sq.derivative_kernel(&vec![0.0; 16], 2).unwrap();
        for x in 0..16 {
            for y in 0..16 {
                let w = 2.0 * f[x] * sp.mu()[x] * f[y] * sp.mu()[y];
                assert!((k2[x * 16 + y].re - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_energy_on_a_fourier_mode() {
        let sp = space(2, 8, 1);
        let lat = &sp.lattice;
        let l = 2.0;
        let a = lat.spacing[0];
        let phi = lat.sample(|x| (2.0 * std::f64::consts::PI * x[0] / l).sin());
        let f = vec![C64::new(1.0, 0.0); lat.n()];
        let gx = PolynomialFunctional::local_jet(&sp, &f, &[0, 2, 0]).unwrap();
        let gy = PolynomialFunctional::local_jet(&sp, &f, &[0, 0, 2]).unwrap();
        let energy = (&gx + &gy).evaluate(&phi).unwrap().re;
        // centered difference of sin(kx) is sin(ka)/a cos(kx)
        let k = 2.0 * std::f64::consts::PI / l;
        let want = (k * a).sin().powi(2) / (a * a) * 0.5 * l * l;
        assert!((energy - want).abs() < 1e-10, "{energy} vs {want}");
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        let sp = space(2, 3, 1);
        let n = sp.n();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let k = &k + k.transpose();
        let q = PolynomialFunctional::quadratic(&sp, k).unwrap();
        let f = rand_vec(&mut rng, n);
        let cubic = PolynomialFunctional::local_power(&sp, &f, 2).unwrap();
        let fc: Vec<C64> = rand_vec(&mut rng, n).into_iter().map(|v| C64::new(v, 0.3)).collect();
        let jet = PolynomialFunctional::local_jet(&sp, &fc, &[1, 1, 0]).unwrap();
        let big = q.pointwise_product(&cubic).unwrap();
        let big = &big + &jet.pointwise_product(&cubic).unwrap();
        assert_eq!(big.degree(), 4);
        let phi = rand_vec(&mut rng, n);
        let p1 = rand_vec(&mut rng, n);
        let p2 = rand_vec(&mut rng, n);
        let exact = big.derivative_pairing(&phi, &[p1.clone(), p2.clone()]).unwrap();
        let eps = 1e-3;
        let at = |s: f64, t: f64| {
            let x: Vec<f64> = (0..n).map(|i| phi[i] + s * p1[i] + t * p2[i]).collect();
            big.evaluate(&x).unwrap()
        };
        let fd = (at(eps, eps) - at(eps, -eps) - at(-eps, eps) + at(-eps, -eps)) / (4.0 * eps * eps);
        assert!((fd - exact).norm() < 1e-6 * exact.norm().max(1.0), "{fd} vs {exact}");
        let g = big.gradient(&phi).unwrap();
        let pairing: C64 = g.iter().zip(&p1).map(|(a, b)| a * b).sum();
        let d1 = big.derivative_pairing(&phi, &[p1.clone()]).unwrap();
        assert!((pairing - d1).norm() < 1e-11 * d1.norm().max(1.0));
    }

    #[test]
    fn locality_classes() {
        let sp = space(2, 3, 0);
        let f = vec![1.0; 9];
        let l2 = PolynomialFunctional::local_power(&sp, &f, 2).unwrap();
        let l1 = PolynomialFunctional::linear(&sp, &f).unwrap();
        assert_eq!(l2.locality(), Locality::LocalDiagonal);
        assert_eq!(l1.pointwise_product(&l1).unwrap().locality(), Locality::RegularDense);
        assert_eq!(l2.pointwise_product(&l1).unwrap().locality(), Locality::Mixed);
        let one = PolynomialFunctional::unit(&sp);
        let phi: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let p = l2.pointwise_product(&one).unwrap();
        assert!((p.evaluate(&phi).unwrap() - l2.evaluate(&phi).unwrap()).norm() < 1e-15);
        let big = PolynomialFunctional::local_power(&sp, &f, 4).unwrap();
        assert!(matches!(big.pointwise_product(&l2.pointwise_product(&l1).unwrap()), Err(Error::DegreeCap { .. })));
    }

    #[test]
    fn isometries() {
        let sp = space(2, 4, 0);
        let lat = &sp.lattice;
        let t = LatticeIsometry::translation(lat, &[1, -1]).unwrap();
        let back = LatticeIsometry::from_permutation(lat, t.image.clone()).unwrap();
        assert_eq!(back, t);
        let mut bad: Vec<usize> = (0..16).collect();
        bad.swap(0, 5);
        assert!(LatticeIsometry::from_permutation(lat, bad).is_err());
        let swap = LatticeIsometry::affine(lat, &[1, 0], &[1, -1], &[2, 0]).unwrap();
        assert!(LatticeIsometry::from_permutation(lat, swap.image.clone()).is_ok());
    }
}
