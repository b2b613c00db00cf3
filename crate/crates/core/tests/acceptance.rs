//! Acceptance run: one PASS/FAIL line per criterion.

use eqft::algebra::{gamma_exp, star_product_kernel};
use eqft::background::build_lattice_capped;
use eqft::extension::{extend_refined, fit_counterterm, radial_oracle};
use eqft::functional::FieldSpace;
use eqft::interacting::{
    beta_homomorphism_defect, moller_map, moller_map_series, parametrix_series_residual, perturbative_parametrix,
    ppa_check, FormalSeries, InteractionTerm, SeriesVariable,
};
use eqft::oracle::{isserlis_moment, log_fit, mc_covariance, refinement_sweep, GaussianSampler};
use eqft::parametrix::{
    affine_shift, coincidence, homogeneous_coincidence, DEFAULT_FIT_DEGREE, DEFAULT_HADAMARD_ORDER,
};
use eqft::spectral::HomogeneousTorus;
use eqft::wick::{
    extract_ambiguity, leibniz_check, scaling_sweep, wick_derivative_axiom_check, AmbiguityCoefficients,
};
use eqft::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;

type Check = Result<(bool, String)>;

fn rv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rc(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
    (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

fn torus(dim: usize, n: usize) -> Result<(BackgroundGeometry, LatticeSpace, Arc<FieldSpace>, Parametrix)> {
    let g = BackgroundGeometry::torus(vec![4.0; dim], 1.0)?;
    let l = build_lattice(&g, n)?;
    let sp = FieldSpace::new(l.clone(), 0)?;
    let p = Parametrix::green(&g, &l)?;
    Ok((g, l, sp, p))
}

fn diff(a: &PolynomialFunctional, b: &PolynomialFunctional, phi: &[f64]) -> Result<f64> {
    Ok((a.evaluate(phi)? - b.evaluate(phi)?).norm())
}

fn algebra_suite() -> Check {
    let (_, l, sp, p) = torus(2, 8)?;
    let n = l.n();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pick = |rng: &mut ChaCha8Rng| -> Result<PolynomialFunctional> {
        let a = PolynomialFunctional::product_of_linears(&sp, &[rv(rng, n), rv(rng, n)])?;
        let b = PolynomialFunctional::linear_complex(&sp, &rc(rng, n))?;
        let mut site = vec![0.0; n];
        site[rng.gen_range(0..n)] = 1.0;
        let c = PolynomialFunctional::local_power(&sp, &site, 2)?;
        Ok(a.checked_add(&b)?.checked_add(&c)?.checked_add(&PolynomialFunctional::constant(&sp, C64::new(0.3, -0.2)))?)
    };
    let (f, g, h) = (pick(&mut rng)?, pick(&mut rng)?, pick(&mut rng)?);
    let op = ContractionOperator::parametrix(&p);
    let prod = |a: &PolynomialFunctional, b: &PolynomialFunctional| star_product_kernel(a, b, &op);
    let phi = rv(&mut rng, n);
    let comm = diff(&prod(&f, &g)?, &prod(&g, &f)?, &phi)?;
    let assoc = diff(&prod(&prod(&f, &g)?, &h)?, &prod(&f, &prod(&g, &h)?)?, &phi)?;
    let sym = |rng: &mut ChaCha8Rng| {
        let s = DMatrix::from_fn(n, n, |_, _| 0.01 * rng.gen_range(-1.0..1.0));
        &s + s.transpose()
    };
    let q = affine_shift(&p, &sym(&mut rng))?;
    let r = affine_shift(&p, &sym(&mut rng))?;
    let qop = ContractionOperator::parametrix(&q);
    // α_P^Q(F ⋅_Q G) = α_P^Q F ⋅_P α_P^Q G
    let hom = diff(
        &change_of_parametrix(&star_product_kernel(&f, &g, &qop)?, &q, &p)?,
        &prod(&change_of_parametrix(&f, &q, &p)?, &change_of_parametrix(&g, &q, &p)?)?,
        &phi,
    )?;
    let cocycle = diff(
        &change_of_parametrix(&change_of_parametrix(&f, &r, &q)?, &q, &p)?,
        &change_of_parametrix(&f, &r, &p)?,
        &phi,
    )?;
    let inv_inv = diff(&involution(&involution(&f)), &f, &phi)?;
    let inv_prod = diff(&involution(&prod(&f, &g)?), &prod(&involution(&g), &involution(&f))?, &phi)?;
    let inv_conj = (involution(&f).evaluate(&phi)? - f.evaluate(&phi)?.conj()).norm();
    let ok = comm < 1e-12 && assoc < 1e-10 && hom < 1e-12 && cocycle < 1e-12 && inv_inv == 0.0 && inv_conj == 0.0 && inv_prod < 1e-12;
    Ok((
        ok,
        format!(
            "comm {comm:.1e}, assoc {assoc:.1e}, hom {hom:.1e}, cocycle {cocycle:.1e}, (F*)* {inv_inv:.0e}, conj {inv_conj:.0e}, (FG)* {inv_prod:.1e}"
        ),
    ))
}

fn gaussian_oracle() -> Check {
    let (_, l, sp, p) = torus(2, 8)?;
    let n = l.n();
    let mu = l.volume_weight.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let op = ContractionOperator::parametrix(&p);
    let zero = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for deg in [2usize, 4, 6] {
        let fs: Vec<Vec<f64>> = (0..deg).map(|_| rv(&mut rng, n)).collect();
        let want = isserlis_moment(&p.kernel, &fs, &mu)?;
        let mut acc = PolynomialFunctional::linear(&sp, &fs[0])?;
        for f in &fs[1..] {
            acc = star_product_kernel(&acc, &PolynomialFunctional::linear(&sp, f)?, &op)?;
        }
        worst = worst.max((acc.evaluate(&zero)?.re - want).abs() / want.abs().max(1.0));
        // E[F H] = (Γ_G F ⋅_G Γ_G H)(0) with F, H pointwise products of pairs
        let full_g = ContractionOperator::new(p.kernel.as_ref().clone(), "G")?;
        let pairs: Vec<PolynomialFunctional> = fs
            .chunks(2)
            .map(|c| gamma_exp(&full_g, &PolynomialFunctional::product_of_linears(&sp, c)?))
            .collect::<Result<_>>()?;
        let mut prod = pairs[0].clone();
        for q in &pairs[1..] {
            prod = star_product_kernel(&prod, q, &op)?;
        }
        worst = worst.max((prod.evaluate(&zero)?.re - want).abs() / want.abs().max(1.0));
    }
    Ok((worst < 1e-12, format!("N = {n}, degrees 2/4/6, worst relative deviation {worst:.1e}")))
}

fn wick_axioms() -> Check {
    let (_, l, _, p) = torus(2, 6)?;
    let n = l.n();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fam = WickFamily::hadamard();
    let f = rc(&mut rng, n);
    let (a, b) = (rv(&mut rng, n), rv(&mut rng, n));
    let mut deriv: f64 = 0.0;
    for k in 1..=4 {
        deriv = deriv.max(wick_derivative_axiom_check(k, &f, &p, &fam, &a, &b)?);
    }
    let fbar: Vec<C64> = f.iter().map(|v| v.conj()).collect();
    let mut herm: f64 = 0.0;
    let mut odd: f64 = 0.0;
    let mut even: f64 = 0.0;
    let w = coincidence(&p)?;
    let zero = vec![0.0; n];
    let fr = rv(&mut rng, n);
    for k in 0..=4 {
        let wp = WickPower::new(k, &f, &p, &fam)?;
        let wc = WickPower::new(k, &fbar, &p, &fam)?;
        herm = herm.max((involution(wp.functional()).evaluate(&a)? - wc.evaluate(&a)?).norm());
        let v = WickPower::real(k, &fr, &p, &fam)?.evaluate(&zero)?;
        if k % 2 == 1 {
            odd = odd.max(v.norm());
        } else {
            let m = k / 2;
            let dfact: f64 = (1..=k).filter(|i| i % 2 == 1).map(|i| i as f64).product();
            let want: f64 = (0..n).map(|x| dfact * w[x].powi(m as i32) * fr[x] * l.volume_weight[x]).sum();
            even = even.max((v.re - want).abs());
        }
    }
    let s = DMatrix::from_fn(n, n, |i, j| 0.01 * ((i + 2 * j) as f64).cos() + 0.01 * ((j + 2 * i) as f64).cos());
    let q = affine_shift(&p, &s)?;
    let mut equi: f64 = 0.0;
    for k in 1..=4 {
        let moved = WickPower::new(k, &f, &p, &fam)?.at(&q)?;
        equi = equi.max((moved.evaluate(&a)? - WickPower::new(k, &f, &q, &fam)?.evaluate(&a)?).norm());
    }
    let ok = deriv < 1e-10 && herm == 0.0 && odd == 0.0 && even < 1e-8 && equi < 1e-10;
    Ok((
        ok,
        format!("derivative {deriv:.1e}, hermiticity {herm:.0e}, odd {odd:.0e}, even {even:.1e}, equivariance {equi:.1e}"),
    ))
}

fn scaling() -> Check {
    let lambdas: Vec<f64> = (0..6).map(|i| 0.6 * 1.25f64.powi(i)).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    let g3 = BackgroundGeometry::torus(vec![4.0; 3], 1.0)?;
    let l3 = build_lattice(&g3, 6)?;
    let f3 = l3.sample(|x| 1.0 + 0.2 * x[0].cos());
    let phi3 = l3.sample(|x| 0.3 + 0.1 * x[2].sin());
    for k in 1..=3 {
        let sw = scaling_sweep(k, &g3, &l3, &f3, &phi3, &lambdas)?;
        let want = k as f64 * 0.5;
        ok &= (sw.fit.kappa - want).abs() < 1e-6 && sw.fit.log_degree == 0;
        parts.push(format!("D=3 k={k}: {:.8} (log {})", sw.fit.kappa, sw.fit.log_degree));
    }
    let g4 = BackgroundGeometry::torus(vec![4.0; 4], 1.0)?;
    let l4 = build_lattice(&g4, 6)?;
    let f4 = l4.sample(|x| 1.0 + 0.2 * x[0].cos());
    let zero = vec![0.0; l4.n()];
    let sw = scaling_sweep(2, &g4, &l4, &f4, &zero, &lambdas)?;
    let logc = sw.fit.coeffs.get(1).copied().unwrap_or(0.0);
    ok &= (sw.fit.kappa - 2.0).abs() < 1e-6 && sw.fit.log_degree >= 1 && sw.fit.log_degree <= 2 && logc.abs() > 1e-6;
    parts.push(format!("D=4 k=2: {:.8} (log {}, coefficient {logc:.3e})", sw.fit.kappa, sw.fit.log_degree));
    Ok((ok, format!("{} λ points; {}", lambdas.len(), parts.join("; "))))
}

fn ambiguity_round_trip() -> Check {
    let (_, l, _, p) = torus(2, 6)?;
    let n = l.n();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = AmbiguityCoefficients::zero()
        .with_field(2, rv(&mut rng, n))?
        .with_field(3, rv(&mut rng, n))?
        .with_field(4, rv(&mut rng, n))?;
    let base = WickFamily::hadamard();
    let phi = rv(&mut rng, n);
    let got = extract_ambiguity(&base.redefine(c.clone()), &base, &p, 4, &phi)?;
    let mut worst: f64 = 0.0;
    for j in 2..=4 {
        let want = c.resolve(j, n, None)?;
        let have = got.coefficients.resolve(j, n, None)?;
        worst = worst.max(want.iter().zip(&have).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok((
        worst < 1e-12 && got.derivative_residual < 1e-10,
        format!("recovery {worst:.1e}, derivative of C_k {:.1e}", got.derivative_residual),
    ))
}

fn continuum_laws() -> Check {
    let g3 = BackgroundGeometry::torus(vec![4.0; 3], 1.0)?;
    let (mut a3, mut diag3, mut w3) = (Vec::new(), Vec::new(), Vec::new());
    for n in [8usize, 16, 32] {
        let l = build_lattice_capped(&g3, n, usize::MAX)?;
        let t = HomogeneousTorus::new(&g3, &l)?;
        a3.push(4.0 / n as f64);
        diag3.push(t.green_diagonal()?);
        w3.push(homogeneous_coincidence(&t, &l, DEFAULT_HADAMARD_ORDER, g3.default_nu(), DEFAULT_FIT_DEGREE)?);
    }
    let div = refinement_sweep(&a3, &diag3)?;
    let rate = div.rate.unwrap_or(f64::NAN);
    let wconv = refinement_sweep(&a3, &w3)?;
    let wrate = wconv.rate.unwrap_or(f64::NAN);
    let g2 = BackgroundGeometry::torus(vec![4.0; 2], 1.0)?;
    let (mut a2, mut diag2) = (Vec::new(), Vec::new());
    for n in [8usize, 16, 32, 64] {
        let l = build_lattice_capped(&g2, n, usize::MAX)?;
        let t = HomogeneousTorus::new(&g2, &l)?;
        a2.push(4.0 / n as f64);
        diag2.push(t.green_diagonal()?);
    }
    let (slope, r2) = log_fit(&a2, &diag2)?;
    let ok = (rate + 1.0).abs() < 0.1 && wrate > 0.0 && r2 > 0.99 && slope < 0.0;
    Ok((
        ok,
        format!(
            "D=3 P(x,x) rate {rate:.3} ({:.4} {:.4} {:.4}), [W_P] rate {wrate:.2} ({:.6} {:.6} {:.6}); D=2 slope vs log a {slope:.4}, R² {r2:.6}",
            diag3[0], diag3[1], diag3[2], w3[0], w3[1], w3[2]
        ),
    ))
}

fn gauss(y: &[f64]) -> f64 {
    (-y.iter().map(|v| v * v).sum::<f64>()).exp()
}

fn extension_check() -> Check {
    let k = RadialKernel::new(2.0, 0, 1.0, 3)?;
    let oracle = radial_oracle(&k, &|r: f64| (-r * r).exp(), None, 8.0)?;
    let spacings = [0.2, 0.1, 0.05, 0.025];
    let refined = extend_refined(&k, &gauss, 6.0, &spacings, None)?;
    let dev = (refined.limit - oracle).abs();
    let mut weight: f64 = 0.0;
    for width in [0.5, 1.0] {
        let w = extend_refined(&k, &gauss, 6.0, &spacings, Some(width))?;
        weight = weight.max((w.limit - refined.limit).abs());
    }
    let k4 = RadialKernel::new(4.0, 0, 1.0, 4)?;
    let p4 = LatticePatch { spacing: 0.25, half_width: 5.0 };
    let f1 = |y: &[f64]| gauss(y);
    let f2 = |y: &[f64]| 0.5 * (-1.5 * y.iter().map(|v| v * v).sum::<f64>()).exp();
    let fit = fit_counterterm(&k4, &[&f1, &f2], p4, 1.0, 2.0)?;
    let slope_dev = (fit.slope / fit.predicted - 1.0).abs();
    let ok = dev < 1e-6 && weight < 1e-6 && fit.residual < 1e-6 && slope_dev < 2e-3;
    Ok((
        ok,
        format!(
            "r^-2 in 3D: limit {:.10} vs quadrature {oracle:.10} ({dev:.1e}), Gaussian weights {weight:.1e}; r^-4 in 4D: slope {:.8} vs {:.8}, residual {:.1e}",
            refined.limit, fit.slope, fit.predicted, fit.residual
        ),
    ))
}

fn leibniz() -> Check {
    let (_, l, _, p) = torus(2, 8)?;
    let w = coincidence(&p)?;
    let f = l.sample(|x| (0.5 * x[0]).sin() + 1.0);
    let xf = vec![l.sample(|x| x[1].cos()), l.sample(|_| 0.5)];
    let phi = l.sample(|x| (x[0] * 1.5).sin() * x[1].cos());
    let r1 = leibniz_check(1, &f, &xf, &l, &w, None, &WickFamily::hadamard(), &phi)?.residual;
    let g = BackgroundGeometry::torus(vec![6.0; 3], 1.0)?;
    let mut res = Vec::new();
    for n in [8, 16] {
        let l = build_lattice(&g, n)?;
        let t = HomogeneousTorus::new(&g, &l)?;
        let w0 = homogeneous_coincidence(&t, &l, DEFAULT_HADAMARD_ORDER, g.default_nu(), DEFAULT_FIT_DEGREE)?;
        let w = vec![w0; l.n()];
        let kk = std::f64::consts::TAU / 6.0;
        let f = l.sample(|x| 1.0 + 0.5 * (kk * x[0]).cos());
        let xf = vec![l.sample(|x| (kk * x[1]).sin()), l.sample(|_| 1.0), l.sample(|_| 0.0)];
        let phi = l.sample(|x| (kk * x[0]).sin() + (kk * x[1]).cos());
        res.push(leibniz_check(2, &f, &xf, &l, &w, None, &WickFamily::hadamard(), &phi)?.residual);
    }
    let ratio = res[0] / res[1];
    Ok((
        r1 < 1e-13 && (ratio - 2.0).abs() <= 0.4,
        format!("k=1 residual {r1:.1e}; k=2 residuals {:.3e} -> {:.3e}, ratio {ratio:.3}", res[0], res[1]),
    ))
}

fn moller() -> Check {
    let (g, l, sp, p) = torus(2, 6)?;
    let n = l.n();
    let rho = l.sample(|x| 0.3 + 0.2 * x[0].cos());
    let f = l.sample(|x| (x[1] * 0.7).sin() + 0.2);
    let v = InteractionTerm::mass_perturbation(&sp, &rho)?;
    let phi = l.sample(|x| 0.4 * x[0].cos() - 0.1 * x[1]);
    let lin = PolynomialFunctional::linear(&sp, &f)?;
    let none = InteractionTerm::new(PolynomialFunctional::zero(&sp), "0")?;
    let same = moller_map(&lin, &none, &p, &p, 3)?;
    let identity = diff(&same.coefficients[0], &lin, &phi)? == 0.0 && same.coefficients[1..].iter().all(|c| c.is_zero());
    let r = moller_map(&lin, &v, &p, &p, 2)?;
    let gf = p.apply(&f);
    let born_w: Vec<f64> = rho.iter().zip(&gf).map(|(a, b)| a * b).collect();
    let born = diff(&r.coefficients[1], &PolynomialFunctional::linear(&sp, &born_w)?, &phi)?;
    let op = elliptic_operator(&l, &g)?;
    let ef = op.apply(&f);
    let big_f = PolynomialFunctional::linear(&sp, &ef)?;
    let corr = v.v.directional_derivative(&f)?.scale(C64::new(-1.0, 0.0));
    let series = FormalSeries::new(SeriesVariable::Lambda, vec![big_f.clone(), corr, PolynomialFunctional::zero(&sp)])?;
    let out = moller_map_series(&series, &v, &p, &p, 2)?;
    let mut inter = diff(&out.coefficients[0], &big_f, &phi)?;
    for c in &out.coefficients[1..] {
        inter = inter.max(c.evaluate(&phi)?.norm());
    }
    // order-λ two-point function against sampling
    let h = l.sample(|x| (x[0] * 0.9).cos());
    let two = star_product(&lin, &PolynomialFunctional::linear(&sp, &h)?, &p)?;
    let r2 = moller_map(&two, &v, &p, &p, 1)?;
    let exact = r2.coefficients[1].evaluate(&vec![0.0; n])?.re;
    let mut sampler = GaussianSampler::new(&p.kernel, 2024)?;
    let mu = l.volume_weight.clone();
    let pair = |a: &[f64], b: &[f64]| -> f64 { (0..a.len()).map(|x| a[x] * b[x] * mu[x]).sum() };
    let est = mc_covariance(
        &mut sampler,
        &|ph| (0..n).map(|x| 0.5 * rho[x] * ph[x] * ph[x] * mu[x]).sum(),
        &|ph| pair(&f, ph) * pair(&h, ph),
        100_000,
    );
    let sigma = (est.mean - exact).abs() / est.stderr;
    let ok = identity && born < 1e-10 && inter < 1e-10 && sigma < 3.0;
    Ok((
        ok,
        format!(
            "V=0 identity {identity}, Born {born:.1e}, intertwiner {inter:.1e}, two-point {exact:.5} vs MC {:.5} ± {:.5} ({sigma:.2}σ, {} samples)",
            est.mean, est.stderr, est.samples
        ),
    ))
}

fn ppa() -> Check {
    let (g, l, sp, p) = torus(2, 6)?;
    let rho = l.sample(|x| (-(x[0] - 2.0).powi(2)).exp());
    let fam = SmoothFamily::mass(g, 6, rho)?;
    let s = perturbative_parametrix(&p, &fam, &l, &[1.0], 2)?;
    let grid: Vec<f64> = (0..6).map(|i| 0.02 * 1.5f64.powi(i)).collect();
    let res = parametrix_series_residual(&s, &fam, &l, &[1.0], 2, &grid)?;
    let rate = eqft::fit::fit_power(&grid, &res)?.rate;
    let f1 = l.sample(|x| x[0].cos());
    let f2 = l.sample(|x| x[1].sin() + 0.3);
    let a = PolynomialFunctional::product_of_linears(&sp, &[f1.clone(), f2.clone()])?;
    let b = PolynomialFunctional::linear(&sp, &f2)?;
    let phi = l.sample(|x| 0.2 * x[0] - 0.1);
    let hom = beta_homomorphism_defect(&a, &b, &p, &s, 1, &phi)?[1];
    let g3 = BackgroundGeometry::torus(vec![4.0; 3], 1.0)?;
    let l3 = build_lattice(&g3, 6)?;
    let rho3 = l3.sample(|x| if x[0] < 1.5 { (1.5 - x[0]).powi(2) } else { 0.0 });
    let fam3 = SmoothFamily::mass(g3, 6, rho3)?;
    let ones = vec![1.0; l3.n()];
    let mut outside: f64 = 0.0;
    let mut mismatch: f64 = 0.0;
    let mut size: f64 = 0.0;
    for k in [2, 4] {
        let r = ppa_check(k, &ones, &WickFamily::hadamard(), &fam3, &l3)?;
        outside = outside.max(r.max_outside_support);
        mismatch = mismatch.max(r.max_oracle_mismatch);
        size = size.max(r.residual_density.iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    let ok = (rate - 3.0).abs() <= 0.2 && hom < 1e-10 && outside < 1e-12 && mismatch < 1e-6;
    Ok((
        ok,
        format!(
            "residual exponent {rate:.3}, β order-1 defect {hom:.1e}; ppa residual max {size:.3e}, outside supp ρ {outside:.1e}, vs spectral oracle {mismatch:.1e}"
        ),
    ))
}

fn main() {
    let checks: Vec<(&str, fn() -> Check)> = vec![
        ("algebra suite", algebra_suite),
        ("Gaussian oracle equivalence", gaussian_oracle),
        ("Wick axioms", wick_axioms),
        ("scaling", scaling),
        ("ambiguity round-trip", ambiguity_round_trip),
        ("continuum laws", continuum_laws),
        ("extension", extension_check),
        ("Leibniz", leibniz),
        ("Møller map", moller),
        ("perturbative agreement", ppa),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match check() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
