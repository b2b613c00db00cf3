//! Contractions, the parametrix-indexed product and the maps between algebras.
//!
//! All operations act term by term on the graph representation of
//! [`PolynomialFunctional`]. Legs of a term are grouped into classes
//! `(vertex, slot)`. A contraction pattern fixes how many pairs join every
//! pair of classes through every kernel component; each pattern turns into one
//! new term with the combinatorial weight
//!
//! ```text
//! Π_α c_α!/(c_α − r_α)!  /  Π n_{αβ,c}!  /  Π_α 2^{n_{αα,c}}
//! ```
//!
//! where `c_α` is the number of legs in class `α` and `r_α` how many of them
//! are used.

use crate::background::{scale_background, BackgroundGeometry, LatticeSpace};
use crate::error::{Error, Result};
use crate::functional::{concat_terms, Edge, FieldSpace, PolynomialFunctional, Term};
use crate::parametrix::{Parametrix, SmoothPart};
use crate::C64;
use nalgebra::DMatrix;
use std::collections::HashMap;
use std::sync::Arc;

/// One kernel entering a contraction operator, tagged with a grading order.
#[derive(Clone, Debug)]
pub struct KernelComponent {
    pub order: usize,
    pub kernel: Arc<DMatrix<f64>>,
    /// Value-slot coincidence values replacing the diagonal in self-contractions.
    pub coincidence: Option<Arc<Vec<f64>>>,
    /// Singular on the diagonal: self-contractions need coincidence data.
    pub singular: bool,
}

/// `Υ_S` for a symmetric kernel `S`, possibly a graded sum `Σ_k S_k`.
#[derive(Clone, Debug)]
pub struct ContractionOperator {
    pub components: Vec<KernelComponent>,
    pub label: String,
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1e-300);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Invalid("contraction kernel is not symmetric".into()));
            }
        }
    }
    Ok(())
}

impl ContractionOperator {
    /// Smooth symmetric kernel.
    pub fn new(kernel: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        if !kernel.is_square() {
            return Err(Error::Invalid("contraction kernel must be square".into()));
        }
        check_symmetric(&kernel)?;
        Ok(Self::from_component(KernelComponent {
            order: 1,
            kernel: Arc::new(kernel),
            coincidence: None,
            singular: false,
        }, label))
    }

    pub fn from_component(c: KernelComponent, label: impl Into<String>) -> Self {
        ContractionOperator { components: vec![c], label: label.into() }
    }

    /// The parametrix kernel itself, flagged singular on the diagonal.
    pub fn parametrix(p: &Parametrix) -> Self {
        Self::from_component(
            KernelComponent { order: 1, kernel: p.kernel.clone(), coincidence: None, singular: true },
            "P",
        )
    }

    /// `P − Q`, smooth when both share the singular part.
    pub fn difference(p: &Parametrix, q: &Parametrix) -> Result<Self> {
        p.check_compatible(q)?;
        Ok(Self::from_component(
            KernelComponent {
                order: 1,
                kernel: Arc::new(p.kernel.as_ref() - q.kernel.as_ref()),
                coincidence: None,
                singular: false,
            },
            "P-Q",
        ))
    }

    /// `W_P` with its coincidence limit on the diagonal.
    pub fn smooth_part(w: &SmoothPart) -> Self {
        Self::from_component(
            KernelComponent {
                order: 1,
                kernel: w.kernel.clone(),
                coincidence: Some(Arc::new(w.coincidence.clone())),
                singular: false,
            },
            "W",
        )
    }

    /// Graded sum `Σ_k S_k` with explicit component orders.
    pub fn series(components: Vec<KernelComponent>, label: impl Into<String>) -> Self {
        ContractionOperator { components, label: label.into() }
    }

    /// `t · S`.
    pub fn scaled(&self, t: f64) -> Self {
        let components = self
            .components
            .iter()
            .map(|c| KernelComponent {
                order: c.order,
                kernel: Arc::new(c.kernel.as_ref() * t),
                coincidence: c.coincidence.as_ref().map(|v| Arc::new(v.iter().map(|x| x * t).collect())),
                singular: c.singular,
            })
            .collect();
        ContractionOperator { components, label: format!("{}*{t}", self.label) }
    }

    /// Concatenates the components of two operators.
    pub fn plus(&self, other: &Self) -> Self {
        let mut components = self.components.clone();
        components.extend(other.components.iter().cloned());
        ContractionOperator { components, label: format!("{}+{}", self.label, other.label) }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    All,
    /// Only pairs joining a vertex below `split` with one at or above it.
    Cross(usize),
}

/// Caches jet-applied kernels `D_i S D_jᵀ` and their diagonals.
struct KernelCache<'a> {
    space: &'a FieldSpace,
    comps: &'a [KernelComponent],
    mats: HashMap<(usize, usize, usize), Arc<DMatrix<f64>>>,
    diags: HashMap<(usize, usize, usize), Arc<Vec<f64>>>,
    jets: HashMap<usize, DMatrix<f64>>,
}

impl<'a> KernelCache<'a> {
    fn new(space: &'a FieldSpace, comps: &'a [KernelComponent]) -> Self {
        KernelCache { space, comps, mats: HashMap::new(), diags: HashMap::new(), jets: HashMap::new() }
    }

    fn jet(&mut self, slot: usize) -> &DMatrix<f64> {
        let space = self.space;
        self.jets.entry(slot).or_insert_with(|| space.jet_matrix(slot))
    }

    fn matrix(&mut self, c: usize, si: usize, sj: usize) -> Arc<DMatrix<f64>> {
        if si == 0 && sj == 0 {
            return self.comps[c].kernel.clone();
        }
        if let Some(m) = self.mats.get(&(c, si, sj)) {
            return m.clone();
        }
        let k = self.comps[c].kernel.clone();
        let mut m = k.as_ref().clone();
        if si != 0 {
            m = self.jet(si) * m;
        }
        if sj != 0 {
            m = m * self.jet(sj).transpose();
        }
        let m = Arc::new(m);
        self.mats.insert((c, si, sj), m.clone());
        m
    }

    fn diagonal(&mut self, c: usize, si: usize, sj: usize) -> Result<Arc<Vec<f64>>> {
        let comp = &self.comps[c];
        if si == 0 && sj == 0 {
            if let Some(co) = &comp.coincidence {
                return Ok(co.clone());
            }
        }
        if comp.singular {
            return Err(Error::NeedsSmoothPart(
                "self-contraction of a local vertex with a singular kernel; supply coincidence data".into(),
            ));
        }
        if let Some(d) = self.diags.get(&(c, si, sj)) {
            return Ok(d.clone());
        }
        let m = self.matrix(c, si, sj);
        let d = Arc::new((0..m.nrows()).map(|i| m[(i, i)]).collect::<Vec<_>>());
        self.diags.insert((c, si, sj), d.clone());
        Ok(d)
    }
}

fn falling(c: u32, r: u32) -> f64 {
    (0..r).map(|i| (c - i) as f64).product()
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// All contraction patterns of one term, returned with their grade.
fn contract_term(
    term: &Term,
    cache: &mut KernelCache,
    mode: Mode,
    max_grade: usize,
) -> Result<Vec<(usize, Term)>> {
    // leg classes
    let mut classes: Vec<(usize, usize, u32)> = Vec::new();
    for (v, vert) in term.vertices.iter().enumerate() {
        for (s, &l) in vert.legs.iter().enumerate() {
            if l > 0 {
                classes.push((v, s, l));
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..classes.len() {
        for j in i..classes.len() {
            let ok = match mode {
                Mode::All => true,
                Mode::Cross(split) => {
                    let (vi, vj) = (classes[i].0, classes[j].0);
                    (vi < split) != (vj < split)
                }
            };
            if ok {
                pairs.push((i, j));
            }
        }
    }
    let ncomp = cache.comps.len();
    let vars: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|p| (0..ncomp).map(move |c| (p, c))).collect();
    let mut out = Vec::new();
    let mut rem: Vec<u32> = classes.iter().map(|c| c.2).collect();
    let mut assign = vec![0u32; vars.len()];
    enumerate(0, 0, &vars, &pairs, cache.comps, max_grade, &mut rem, &mut assign, &mut |assign, grade| {
        out.push((grade, assign.to_vec()));
    });
    let mut terms = Vec::with_capacity(out.len());
    for (grade, assign) in out {
        terms.push((grade, build_term(term, &classes, &pairs, &vars, &assign, cache)?));
    }
    Ok(terms)
}

#[allow(clippy::too_many_arguments)]
fn enumerate(
    k: usize,
    grade: usize,
    vars: &[(usize, usize)],
    pairs: &[(usize, usize)],
    comps: &[KernelComponent],
    max_grade: usize,
    rem: &mut Vec<u32>,
    assign: &mut Vec<u32>,
    emit: &mut dyn FnMut(&[u32], usize),
) {
    if k == vars.len() {
        emit(assign, grade);
        return;
    }
    let (p, c) = vars[k];
    let (i, j) = pairs[p];
    let order = comps[c].order;
    let mut n = 0u32;
    loop {
        let g = grade + order * n as usize;
        if g > max_grade {
            break;
        }
        assign[k] = n;
        enumerate(k + 1, g, vars, pairs, comps, max_grade, rem, assign, emit);
        // take one more pair
        if i == j {
            if rem[i] < 2 {
                break;
            }
            rem[i] -= 2;
        } else {
            if rem[i] < 1 || rem[j] < 1 {
                break;
            }
            rem[i] -= 1;
            rem[j] -= 1;
        }
        n += 1;
    }
    // restore
    if i == j {
        rem[i] += 2 * n;
    } else {
        rem[i] += n;
        rem[j] += n;
    }
    assign[k] = 0;
}

fn build_term(
    term: &Term,
    classes: &[(usize, usize, u32)],
    pairs: &[(usize, usize)],
    vars: &[(usize, usize)],
    assign: &[u32],
    cache: &mut KernelCache,
) -> Result<Term> {
    let mut used = vec![0u32; classes.len()];
    let mut denom = 1.0;
    for (k, &n) in assign.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let (i, j) = pairs[vars[k].0];
        if i == j {
            used[i] += 2 * n;
            denom *= 2f64.powi(n as i32);
        } else {
            used[i] += n;
            used[j] += n;
        }
        denom *= factorial(n);
    }
    let mut mult = 1.0;
    for (c, u) in classes.iter().zip(&used) {
        mult *= falling(c.2, *u);
    }
    let mut t = term.clone();
    t.coeff *= mult / denom;
    for (c, u) in classes.iter().zip(&used) {
        t.vertices[c.0].legs[c.1] -= u;
    }
    let mut new_weights: HashMap<usize, Vec<C64>> = HashMap::new();
    for (k, &n) in assign.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let (p, comp) = vars[k];
        let (i, j) = pairs[p];
        let (vi, si, _) = classes[i];
        let (vj, sj, _) = classes[j];
        if vi == vj {
            let d = cache.diagonal(comp, si, sj)?;
            let w = new_weights.entry(vi).or_insert_with(|| t.vertices[vi].weight.as_ref().clone());
            for (a, b) in w.iter_mut().zip(d.iter()) {
                *a *= b.powi(n as i32);
            }
        } else {
            t.edges.push(Edge { a: vi, b: vj, kernel: cache.matrix(comp, si, sj), power: n });
        }
    }
    for (v, w) in new_weights {
        t.vertices[v].weight = Arc::new(w);
    }
    Ok(t)
}

fn graded(
    f: &PolynomialFunctional,
    terms: Vec<(usize, Term)>,
    max_grade: usize,
) -> Vec<PolynomialFunctional> {
    let mut buckets: Vec<Vec<Term>> = vec![Vec::new(); max_grade + 1];
    for (g, t) in terms {
        buckets[g].push(t);
    }
    buckets
        .into_iter()
        .map(|ts| PolynomialFunctional::from_terms_unchecked(f.space().clone(), ts).compact())
        .collect()
}

fn check_kernel_size(space: &FieldSpace, s: &ContractionOperator) -> Result<()> {
    for c in &s.components {
        if c.kernel.nrows() != space.n() || c.kernel.ncols() != space.n() {
            return Err(Error::LatticeMismatch("contraction kernel does not match the lattice".into()));
        }
    }
    Ok(())
}

/// `exp[Υ_S] F` split by grade `Σ order·(number of contractions)`, up to `max_grade`.
pub fn gamma_exp_graded(
    s: &ContractionOperator,
    f: &PolynomialFunctional,
    max_grade: usize,
) -> Result<Vec<PolynomialFunctional>> {
    check_kernel_size(f.space(), s)?;
    let mut cache = KernelCache::new(f.space(), &s.components);
    let mut all = Vec::new();
    for t in f.terms() {
        all.extend(contract_term(t, &mut cache, Mode::All, max_grade)?);
    }
    Ok(graded(f, all, max_grade))
}

/// `exp[Υ_S] F = Σ_n 1/(2ⁿ n!) ⟨S^{⊗n}, F^{(2n)}⟩`.
pub fn gamma_exp(s: &ContractionOperator, f: &PolynomialFunctional) -> Result<PolynomialFunctional> {
    let max_order = s.components.iter().map(|c| c.order).max().unwrap_or(1);
    let max_grade = max_order * (f.degree() / 2);
    let parts = gamma_exp_graded(s, f, max_grade)?;
    let mut terms = Vec::new();
    for p in parts {
        terms.extend(p.into_terms());
    }
    Ok(PolynomialFunctional::from_terms_unchecked(f.space().clone(), terms).compact())
}

fn overlap_check(f: &PolynomialFunctional, g: &PolynomialFunctional) -> Result<()> {
    let heavy = |p: &PolynomialFunctional| {
        let mut mask = vec![false; p.space().n()];
        for t in p.terms() {
            for v in &t.vertices {
                if v.degree() >= 2 {
                    for (i, w) in v.weight.iter().enumerate() {
                        if w.norm() != 0.0 {
                            mask[i] = true;
                        }
                    }
                }
            }
        }
        mask
    };
    let (a, b) = (heavy(f), heavy(g));
    if a.iter().zip(&b).any(|(x, y)| *x && *y) {
        return Err(Error::NeedsExtension(
            "both factors have vertices of degree ≥ 2 on common sites; use the Wick E-product".into(),
        ));
    }
    Ok(())
}

/// Cross contractions of `F ⊗ G` split by grade.
pub fn star_product_graded(
    f: &PolynomialFunctional,
    g: &PolynomialFunctional,
    s: &ContractionOperator,
    max_grade: usize,
) -> Result<Vec<PolynomialFunctional>> {
    f.check_space(g)?;
    check_kernel_size(f.space(), s)?;
    let mut cache = KernelCache::new(f.space(), &s.components);
    let mut all = Vec::new();
    for a in f.terms() {
        for b in g.terms() {
            let t = concat_terms(a, b);
            all.extend(contract_term(&t, &mut cache, Mode::Cross(a.vertices.len()), max_grade)?);
        }
    }
    Ok(graded(f, all, max_grade))
}

/// `F ⋅_S G` for an arbitrary symmetric kernel, without the overlap check.
pub fn star_product_kernel(
    f: &PolynomialFunctional,
    g: &PolynomialFunctional,
    s: &ContractionOperator,
) -> Result<PolynomialFunctional> {
    let max_order = s.components.iter().map(|c| c.order).max().unwrap_or(1);
    let max_grade = max_order * f.degree().min(g.degree());
    let parts = star_product_graded(f, g, s, max_grade)?;
    let mut terms = Vec::new();
    for p in parts {
        terms.extend(p.into_terms());
    }
    Ok(PolynomialFunctional::from_terms_unchecked(f.space().clone(), terms).compact())
}

/// `F ⋅_P G = F·G + Σ_k 1/k! ⟨F^{(k)}, P^{⊗k} G^{(k)}⟩`.
pub fn star_product(f: &PolynomialFunctional, g: &PolynomialFunctional, p: &Parametrix) -> Result<PolynomialFunctional> {
    if p.lattice.background_id != f.lattice().background_id {
        return Err(Error::BackgroundMismatch {
            left: p.lattice.background_id.clone(),
            right: f.lattice().background_id.clone(),
        });
    }
    overlap_check(f, g)?;
    star_product_kernel(f, g, &ContractionOperator::parametrix(p))
}

/// `α_P^Q F = exp[Υ_{P−Q}] F`.
pub fn change_of_parametrix(f_at_q: &PolynomialFunctional, q: &Parametrix, p: &Parametrix) -> Result<PolynomialFunctional> {
    gamma_exp(&ContractionOperator::difference(p, q)?, f_at_q)
}

/// `F*`.
pub fn involution(f: &PolynomialFunctional) -> PolynomialFunctional {
    f.involution()
}

/// A functional stored at one reference parametrix.
#[derive(Clone, Debug)]
pub struct EquivariantObservable {
    pub reference: Parametrix,
    pub functional: PolynomialFunctional,
    pub label: String,
}

impl EquivariantObservable {
    pub fn new(reference: Parametrix, functional: PolynomialFunctional, label: impl Into<String>) -> Result<Self> {
        if reference.lattice.background_id != functional.lattice().background_id {
            return Err(Error::BackgroundMismatch {
                left: reference.lattice.background_id.clone(),
                right: functional.lattice().background_id.clone(),
            });
        }
        Ok(EquivariantObservable { reference, functional, label: label.into() })
    }

    /// `F(P) = α_P^Q F(Q)`.
    pub fn at(&self, p: &Parametrix) -> Result<PolynomialFunctional> {
        change_of_parametrix(&self.functional, &self.reference, p)
    }

    pub fn evaluate(&self, p: &Parametrix, phi: &[f64]) -> Result<C64> {
        self.at(p)?.evaluate(phi)
    }

    /// Same observable anchored at `p`.
    pub fn reanchor(&self, p: &Parametrix) -> Result<Self> {
        Ok(EquivariantObservable { reference: p.clone(), functional: self.at(p)?, label: self.label.clone() })
    }

    pub fn involution(&self) -> Self {
        EquivariantObservable {
            reference: self.reference.clone(),
            functional: self.functional.involution(),
            label: format!("{}*", self.label),
        }
    }
}

/// `ς_λ`: an observable on `h_λ` viewed on `h`, `(ς_λF)(P, φ) = F(λ^{D−2}P, λ^{(D−2)/2}φ)`
/// with kernels given as two-point values.
pub fn scaling_map(
    obs: &EquivariantObservable,
    lambda: f64,
    geometry: &BackgroundGeometry,
    lattice: &LatticeSpace,
) -> Result<EquivariantObservable> {
    if !(lambda > 0.0) {
        return Err(Error::Invalid("λ must be positive".into()));
    }
    let scaled = scale_background(geometry, lambda)?;
    if obs.reference.lattice.background_id != scaled.background_id() {
        return Err(Error::BackgroundMismatch {
            left: obs.reference.lattice.background_id.clone(),
            right: scaled.background_id(),
        });
    }
    if lattice.background_id != geometry.background_id() {
        return Err(Error::BackgroundMismatch { left: lattice.background_id.clone(), right: geometry.background_id() });
    }
    let d = geometry.dim as f64;
    let dphi = 0.5 * (d - 2.0);
    let mut reference = Parametrix::from_kernel(
        obs.reference.kernel.as_ref() * lambda.powf(-(d - 2.0)),
        lattice,
        Some(obs.reference.nu),
    )?;
    reference.order = obs.reference.order;
    let space = FieldSpace::new(lattice.clone(), obs.functional.space().jet_order)?;
    let terms = obs
        .functional
        .terms()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.coeff *= lambda.powf(dphi * t.degree() as f64);
            t
        })
        .collect();
    let functional = PolynomialFunctional::from_terms(space, terms)?;
    Ok(EquivariantObservable { reference, functional, label: format!("scaled({})", obs.label) })
}

/// `(S_λ O)[h](f) = ς_λ[O[h_λ](λ^D f)]`, with `build` producing `O` on any background.
pub fn rescaled_observable<B>(
    geometry: &BackgroundGeometry,
    lattice: &LatticeSpace,
    f: &[f64],
    lambda: f64,
    build: B,
) -> Result<EquivariantObservable>
where
    B: Fn(&BackgroundGeometry, &LatticeSpace, &[f64]) -> Result<EquivariantObservable>,
{
    let scaled = scale_background(geometry, lambda)?;
    let lat = crate::background::build_lattice_capped(&scaled, lattice.sites_per_axis, usize::MAX)?;
    let fl: Vec<f64> = f.iter().map(|v| v * lambda.powi(geometry.dim as i32)).collect();
    let obs = build(&scaled, &lat, &fl)?;
    scaling_map(&obs, lambda, geometry, lattice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::background::build_lattice;
    use crate::parametrix::affine_shift;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (BackgroundGeometry, LatticeSpace, Arc<FieldSpace>, Parametrix) {
        let g = BackgroundGeometry::torus(vec![4.0, 4.0], 1.0).unwrap();
        let l = build_lattice(&g, n).unwrap();
        let sp = FieldSpace::new(l.clone(), 0).unwrap();
        let p = Parametrix::green(&g, &l).unwrap();
        (g, l, sp, p)
    }

    fn rv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn linear_star_linear() {
        let (_, l, sp, p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rv(&mut rng, l.n());
        let g = rv(&mut rng, l.n());
        let phi = rv(&mut rng, l.n());
        let a = PolynomialFunctional::linear(&sp, &f).unwrap();
        let b = PolynomialFunctional::linear(&sp, &g).unwrap();
        let ab = star_product(&a, &b, &p).unwrap();
        let want = a.evaluate(&phi).unwrap() * b.evaluate(&phi).unwrap() + p.pair(&f, &g);
        assert!((ab.evaluate(&phi).unwrap() - want).norm() < 1e-12);
        let one = PolynomialFunctional::unit(&sp);
        let a1 = star_product(&a, &one, &p).unwrap();
        assert!((a1.evaluate(&phi).unwrap() - a.evaluate(&phi).unwrap()).norm() < 1e-14);
    }

    #[test]
    fn gamma_exp_on_local_square() {
        let (_, l, sp, p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rv(&mut rng, l.n());
        let s = DMatrix::from_fn(l.n(), l.n(), |i, j| ((i + j) as f64 * 0.3).cos());
        let op = ContractionOperator::new(s.clone(), "S").unwrap();
        let sq = PolynomialFunctional::local_power(&sp, &f, 2).unwrap();
        let out = gamma_exp(&op, &sq).unwrap();
        let phi = rv(&mut rng, l.n());
        let shift: f64 = (0..l.n()).map(|x| f[x] * s[(x, x)] * l.volume_weight[x]).sum();
        assert!((out.evaluate(&phi).unwrap().re - sq.evaluate(&phi).unwrap().re - shift).abs() < 1e-13);
        let lin = PolynomialFunctional::linear(&sp, &f).unwrap();
        let same = gamma_exp(&op, &lin).unwrap();
        assert!((same.evaluate(&phi).unwrap() - lin.evaluate(&phi).unwrap()).norm() < 1e-15);
        assert!(matches!(
            gamma_exp(&ContractionOperator::parametrix(&p), &sq),
            Err(Error::NeedsSmoothPart(_))
        ));
    }

    #[test]
    fn overlapping_local_factors_rejected() {
        let (_, l, sp, p) = setup(4);
        let f = vec![1.0; l.n()];
        let sq = PolynomialFunctional::local_power(&sp, &f, 2).unwrap();
        assert!(matches!(star_product(&sq, &sq, &p), Err(Error::NeedsExtension(_))));
        let mut g = vec![0.0; l.n()];
        g[0] = 1.0;
        let mut h = vec![0.0; l.n()];
        h[5] = 1.0;
        let a = PolynomialFunctional::local_power(&sp, &g, 2).unwrap();
        let b = PolynomialFunctional::local_power(&sp, &h, 2).unwrap();
        let ab = star_product(&a, &b, &p).unwrap();
        let phi = vec![0.0; l.n()];
        let want = 2.0 * p.kernel[(0, 5)].powi(2) * l.volume_weight[0] * l.volume_weight[5];
        assert!((ab.evaluate(&phi).unwrap().re - want).abs() < 1e-14);
    }

    #[test]
    fn change_of_parametrix_is_a_homomorphism() {
        let (_, l, sp, p) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = DMatrix::from_fn(l.n(), l.n(), |i, j| 0.05 * ((i * j) as f64 * 0.1).sin());
        let s = &s + s.transpose();
        let q = affine_shift(&p, &s).unwrap();
        let f = PolynomialFunctional::product_of_linears(&sp, &[rv(&mut rng, l.n()), rv(&mut rng, l.n())]).unwrap();
        let g = PolynomialFunctional::product_of_linears(&sp, &[rv(&mut rng, l.n()), rv(&mut rng, l.n())]).unwrap();
        let lhs = change_of_parametrix(&star_product(&f, &g, &q).unwrap(), &q, &p).unwrap();
        let rhs = star_product(
            &change_of_parametrix(&f, &q, &p).unwrap(),
            &change_of_parametrix(&g, &q, &p).unwrap(),
            &p,
        )
        .unwrap();
        let phi = rv(&mut rng, l.n());
        assert!((lhs.evaluate(&phi).unwrap() - rhs.evaluate(&phi).unwrap()).norm() < 1e-12);
    }

    #[test]
    fn scaling_map_on_linear() {
        let (g, l, sp, p) = setup(4);
        let f = vec![0.7; l.n()];
        let d = 2.0;
        let build = |h: &BackgroundGeometry, lat: &LatticeSpace, fl: &[f64]| {
            let s = FieldSpace::new(lat.clone(), 0)?;
            EquivariantObservable::new(Parametrix::green(h, lat)?, PolynomialFunctional::linear(&s, fl)?, "Phi")
        };
        let phi: Vec<f64> = (0..l.n()).map(|i| (i as f64).sin()).collect();
        let base = PolynomialFunctional::linear(&sp, &f).unwrap().evaluate(&phi).unwrap();
        for lam in [0.5, 2.0, 3.0] {
            let o = rescaled_observable(&g, &l, &f, lam, build).unwrap();
            let v = o.evaluate(&p, &phi).unwrap();
            assert!((v - base * lam.powf(0.5 * (d - 2.0))).norm() < 1e-12);
        }
    }
}
