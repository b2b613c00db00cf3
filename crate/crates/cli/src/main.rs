mod config;
mod report;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{load_config, RunConfig};
use eqft::background::build_lattice_capped;
use eqft::extension::{counterterm_table, extend, LatticePatch, RadialKernel};
use eqft::functional::FieldSpace;
use eqft::interacting::{moller_map, InteractionTerm};
use eqft::io::{functional_from_json, functional_to_json, read_parametrix, write_csv, write_parametrix};
use eqft::parametrix::{coincidence, defect, homogeneous_coincidence, DEFAULT_FIT_DEGREE};
use eqft::spectral::HomogeneousTorus;
use eqft::verify::{algebra_checks, moller_checks, ppa_checks, wick_checks, CheckOutcome, VerifySetup};
use eqft::wick::{leibniz_check, scaling_sweep};
use eqft::{elliptic_operator, BackgroundGeometry, PolynomialFunctional, WickFamily, WickPower, C64};
use report::{emit, hash_of, Report};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "eqft", version, about = "Euclidean scalar field pipelines on lattice backgrounds")]
struct Cli {
    /// Worker threads for parallel sums (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a parametrix, measure its defect or its coincidence values.
    Parametrix {
        #[command(subcommand)]
        action: ParametrixCmd,
    },
    /// Product laws of the parametrix-indexed algebra.
    Algebra {
        #[command(subcommand)]
        action: AlgebraCmd,
    },
    /// Wick powers, their axioms, scaling and Leibniz checks.
    Wick {
        #[command(subcommand)]
        action: WickCmd,
    },
    /// Extend a radial kernel `|y|^-α log^p|y|` against a Gaussian test function.
    Extend(ExtendArgs),
    /// Perturbative Møller map.
    Moller {
        #[command(subcommand)]
        action: MollerCmd,
    },
    /// Pass/fail ledger for a group of checks.
    Verify {
        #[arg(value_enum)]
        group: VerifyGroup,
        #[command(flatten)]
        cfg: ConfigArg,
        /// Samples for the sampled two-point check (default: `mc_samples` or 100000).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Plot-ready CSV sweeps.
    Sweep {
        #[command(subcommand)]
        action: SweepCmd,
    },
}

#[derive(Subcommand)]
enum ParametrixCmd {
    /// Write the configured parametrix as a header plus binary block.
    Build {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        file: PathBuf,
    },
    /// `‖E P̃ − 1‖` of a parametrix file.
    Defect {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        file: PathBuf,
    },
    /// Coincidence values `[W_P]` as CSV.
    Coincidence {
        #[command(flatten)]
        cfg: ConfigArg,
    },
}

#[derive(Subcommand)]
enum AlgebraCmd {
    Check {
        #[command(flatten)]
        cfg: ConfigArg,
    },
}

#[derive(Subcommand)]
enum WickCmd {
    /// Write `:Φ^k:(f)` as a functional file.
    Order {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        k: usize,
        /// CSV with one smearing value per site; `f = 1` when absent.
        #[arg(long)]
        smearing: Option<PathBuf>,
    },
    Axioms {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Fitted scaling dimension of `:Φ^k:` on a flat torus.
    ScalingSweep {
        #[command(flatten)]
        args: ScalingArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the λ-grid and values as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    Leibniz {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        k: usize,
    },
}

#[derive(Args, Serialize)]
struct ExtendArgs {
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    dim: usize,
    /// Counterterm table order; defaults to the subtraction order of the kernel.
    #[arg(long)]
    order: Option<i32>,
    #[arg(long, default_value_t = 0)]
    log_power: u32,
    #[arg(long, default_value_t = 0.25)]
    spacing: f64,
    #[arg(long, default_value_t = 5.0)]
    half_width: f64,
    /// Subtraction ball radius; required when the kernel is not integrable.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MollerCmd {
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value_t = 2)]
        order: usize,
        /// Functional file with the interaction; `½ ∫ 0.3 φ² μ` when absent.
        #[arg(long)]
        interaction: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SweepCmd {
    /// `P(x,x)` and `[W_P]` over a refinement list of the configured torus.
    Refinement {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',', default_values_t = vec![8usize, 16, 32])]
        ns: Vec<usize>,
    },
    /// `λ ↦ (S_λ :Φ^k:)(f)` on a flat torus as CSV.
    Scaling(ScalingArgs),
}

#[derive(Args, Serialize)]
struct ScalingArgs {
    #[arg(long = "D", alias = "dim")]
    dim: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    points: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifyGroup {
    All,
    Algebra,
    Wick,
    Moller,
    Ppa,
}

fn setup(cfg: &RunConfig) -> Result<VerifySetup> {
    let (g, l) = cfg.background()?;
    Ok(VerifySetup::new(g, l, cfg.seed, cfg.tolerances.clone())?)
}

fn ledger(command: &str, cfg: &RunConfig, checks: Vec<CheckOutcome>, out: &Option<PathBuf>) -> Result<bool> {
    let report = Report::new(command, hash_of(cfg)?, Some(cfg.seed), checks, serde_json::Value::Null);
    let pass = report.pass;
    emit(&report, out)?;
    Ok(pass)
}

fn run_scaling(args: &ScalingArgs) -> Result<eqft::wick::ScalingSweep> {
    if args.points < 6 {
        bail!("the scaling fit needs at least 6 λ points");
    }
    let g = BackgroundGeometry::torus(vec![4.0; args.dim], 1.0)?;
    let l = eqft::build_lattice(&g, args.n)?;
    let f = l.sample(|x| 1.0 + 0.2 * x[0].cos());
    let phi = l.sample(|x| 0.3 + 0.1 * x[x.len() - 1].sin());
    let lambdas: Vec<f64> = (0..args.points).map(|i| 0.6 * 1.25f64.powi(i as i32)).collect();
    Ok(scaling_sweep(args.k, &g, &l, &f, &phi, &lambdas)?)
}

fn out_path(cfg: &ConfigArg, rc: &RunConfig) -> Option<PathBuf> {
    cfg.out.clone().or_else(|| rc.output.clone())
}

fn smearing_or_one(path: &Option<PathBuf>, n: usize) -> Result<Vec<f64>> {
    match path {
        None => Ok(vec![1.0; n]),
        Some(p) => {
            let v = config::read_values(p)?;
            if v.len() != n {
                bail!("smearing has {} values, lattice has {n} sites", v.len());
            }
            Ok(v)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Parametrix { action } => match action {
            ParametrixCmd::Build { cfg, file } => {
                let rc = load_config(&cfg.config)?;
                let (g, l) = rc.background()?;
                let p = rc.parametrix(&g, &l)?;
                write_parametrix(&file, &p)?;
                let data = serde_json::json!({ "file": file, "header": p.header(), "sites": l.n() });
                emit(&Report::new("parametrix build", hash_of(&rc)?, None, vec![], data), &out_path(&cfg, &rc))?;
                Ok(true)
            }
            ParametrixCmd::Defect { cfg, file } => {
                let rc = load_config(&cfg.config)?;
                let (g, l) = rc.background()?;
                let p = read_parametrix(&file, &l)?;
                let op = elliptic_operator(&l, &g)?;
                let d = defect(&op, &p)?;
                let data = serde_json::json!({
                    "max_abs": d.amax(),
                    "frobenius": d.norm(),
                    "is_exact_green": p.is_exact_green,
                });
                emit(&Report::new("parametrix defect", hash_of(&rc)?, None, vec![], data), &out_path(&cfg, &rc))?;
                Ok(true)
            }
            ParametrixCmd::Coincidence { cfg } => {
                let rc = load_config(&cfg.config)?;
                let (g, l) = rc.background()?;
                let p = rc.parametrix(&g, &l)?;
                let w = coincidence(&p)?;
                let rows: Vec<Vec<f64>> = (0..l.n())
                    .map(|x| {
                        let mut r = l.position(x);
                        r.push(w[x]);
                        r
                    })
                    .collect();
                let mut header: Vec<String> = (0..l.dim).map(|i| format!("x{i}")).collect();
                header.push("w".into());
                let header: Vec<&str> = header.iter().map(String::as_str).collect();
                report::with_writer(&out_path(&cfg, &rc), |w| Ok(write_csv(w, &header, &rows)?))?;
                Ok(true)
            }
        },
        Command::Algebra { action: AlgebraCmd::Check { cfg } } => {
            let rc = load_config(&cfg.config)?;
            ledger("algebra check", &rc, algebra_checks(&setup(&rc)?)?, &out_path(&cfg, &rc))
        }
        Command::Wick { action } => match action {
            WickCmd::Order { cfg, k, smearing } => {
                let rc = load_config(&cfg.config)?;
                let (g, l) = rc.background()?;
                let p = rc.parametrix(&g, &l)?;
                let f: Vec<C64> = smearing_or_one(&smearing, l.n())?.into_iter().map(|v| C64::new(v, 0.0)).collect();
                let wp = WickPower::new(k, &f, &p, &WickFamily::hadamard())?;
                let json = functional_to_json(wp.functional())?;
                report::with_writer(&out_path(&cfg, &rc), |w| {
                    w.write_all(json.as_bytes())?;
                    w.write_all(b"\n")?;
                    Ok(())
                })?;
                Ok(true)
            }
            WickCmd::Axioms { cfg } => {
                let rc = load_config(&cfg.config)?;
                ledger("wick axioms", &rc, wick_checks(&setup(&rc)?)?, &out_path(&cfg, &rc))
            }
            WickCmd::ScalingSweep { args, out, csv } => {
                let sw = run_scaling(&args)?;
                let (dim, k) = (args.dim, args.k);
                let want = k as f64 * (dim as f64 - 2.0) / 2.0;
                let mut check = CheckOutcome {
                    name: "scaling dimension".into(),
                    reference: "S_λ :Φ^k: = λ^{k(D−2)/2} × polynomial in log λ".into(),
                    pass: (sw.fit.kappa - want).abs() <= 1e-6 && sw.fit.log_degree <= k,
                    value: (sw.fit.kappa - want).abs(),
                    tolerance: 1e-6,
                    metrics: Default::default(),
                };
                check.metrics.insert("kappa".into(), sw.fit.kappa);
                check.metrics.insert("log_degree".into(), sw.fit.log_degree as f64);
                if let Some(path) = &csv {
                    let rows: Vec<Vec<f64>> = sw.lambdas.iter().zip(&sw.values).map(|(a, b)| vec![*a, *b]).collect();
                    report::with_writer(&Some(path.clone()), |w| Ok(write_csv(w, &["lambda", "value"], &rows)?))?;
                }
                let report = Report::new("wick scaling-sweep", hash_of(&args)?, None, vec![check], serde_json::to_value(&sw)?);
                let pass = report.pass;
                emit(&report, &out)?;
                Ok(pass)
            }
            WickCmd::Leibniz { cfg, k } => {
                let rc = load_config(&cfg.config)?;
                let (g, l) = rc.background()?;
                let residual = |l: &eqft::LatticeSpace| -> Result<eqft::wick::LeibnizReport> {
                    let p = rc.parametrix(&g, l)?;
                    let w = coincidence(&p)?;
                    let ext = l.physical_extent();
                    let tau = std::f64::consts::TAU;
                    let f = l.sample(|x| 1.0 + 0.5 * (tau * x[0] / ext[0]).cos());
                    let xf: Vec<Vec<f64>> = (0..l.dim)
                        .map(|i| l.sample(|x| (tau * x[(i + 1) % x.len()] / ext[(i + 1) % ext.len()]).sin() + 0.5))
                        .collect();
                    let phi = l.sample(|x| (tau * x[0] / ext[0]).sin() + (tau * x[l.dim - 1] / ext[l.dim - 1]).cos());
                    Ok(leibniz_check(k, &f, &xf, l, &w, None, &WickFamily::hadamard(), &phi)?)
                };
                let r = residual(&l)?;
                let reference = "Φ^k(−div(f X)) = ⟨Φ^k(f)', X·∇φ⟩";
                let mut check = if k <= 1 {
                    CheckOutcome {
                        name: "Leibniz".into(),
                        reference: reference.into(),
                        pass: r.residual <= rc.tolerances.exact,
                        value: r.residual,
                        tolerance: rc.tolerances.exact,
                        metrics: Default::default(),
                    }
                } else {
                    if rc.background.c_field_file.is_some() {
                        bail!("the k ≥ 2 Leibniz check refines the lattice and needs a constant c");
                    }
                    let fine = eqft::build_lattice(&g, 2 * rc.background.n)?;
                    let rf = residual(&fine)?;
                    let ratio = r.residual / rf.residual;
                    let mut c = CheckOutcome {
                        name: "Leibniz, first-order convergence".into(),
                        reference: format!("{reference} up to O(a)"),
                        pass: (ratio - 2.0).abs() <= 0.4,
                        value: (ratio - 2.0).abs(),
                        tolerance: 0.4,
                        metrics: Default::default(),
                    };
                    c.metrics.insert("fine_residual".into(), rf.residual);
                    c.metrics.insert("ratio".into(), ratio);
                    c
                };
                check.metrics.insert("residual".into(), r.residual);
                check.metrics.insert("lhs".into(), r.lhs);
                check.metrics.insert("rhs".into(), r.rhs);
                ledger("wick leibniz", &rc, vec![check], &out_path(&cfg, &rc))
            }
        },
        Command::Extend(args) => {
            let kernel = RadialKernel::new(args.alpha, args.log_power, 1.0, args.dim)?;
            let patch = LatticePatch { spacing: args.spacing, half_width: args.half_width };
            let gauss = |y: &[f64]| (-y.iter().map(|v| v * v).sum::<f64>()).exp();
            let res = extend(&kernel, &gauss, patch, args.radius)?;
            let order = args.order.unwrap_or(res.subtraction_order);
            if order < res.subtraction_order {
                bail!("counterterm order {order} is below the subtraction order {}", res.subtraction_order);
            }
            let table = match res.radius {
                Some(r) => counterterm_table(&kernel, order, r),
                None => Vec::new(),
            };
            let data = serde_json::json!({
                "scaling_degree": kernel.scaling_degree(),
                "unique_extension": kernel.unique_extension(),
                "result": res,
                "counterterms": table,
            });
            emit(&Report::new("extend", hash_of(&args)?, None, vec![], data), &args.out)?;
            Ok(true)
        }
        Command::Moller { action: MollerCmd::Run { cfg, order, interaction } } => {
            let rc = load_config(&cfg.config)?;
            let (g, l) = rc.background()?;
            let s = VerifySetup::new(g.clone(), l.clone(), rc.seed, rc.tolerances.clone())?;
            let v = match &interaction {
                Some(path) => {
                    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    InteractionTerm::new(functional_from_json(&text, &l)?, "file")?
                }
                None => InteractionTerm::mass_perturbation(&FieldSpace::new(l.clone(), 0)?, &vec![0.3; l.n()])?,
            };
            let p = rc.parametrix(&g, &l)?;
            let f = l.sample(|x| 1.0 + 0.2 * x[0].cos());
            let lin = PolynomialFunctional::linear(&FieldSpace::new(l.clone(), 0)?, &f)?;
            let r = moller_map(&lin, &v, &p, &s.green, order)?;
            let zero = vec![0.0; l.n()];
            let mut rng_phi = l.sample(|x| 0.1 * x[0].sin());
            rng_phi.iter_mut().for_each(|v| *v += 0.05);
            let summary: Vec<serde_json::Value> = r
                .coefficients
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    Ok(serde_json::json!({
                        "order": i,
                        "terms": c.terms().len(),
                        "degree": c.degree(),
                        "at_zero": c.evaluate(&zero)?.re,
                        "at_probe": c.evaluate(&rng_phi)?.re,
                    }))
                })
                .collect::<eqft::Result<_>>()?;
            let checks = moller_checks(&s, 20_000)?;
            let data = serde_json::json!({ "interaction": v.label, "coefficients": summary });
            let report = Report::new("moller run", hash_of(&rc)?, Some(rc.seed), checks, data);
            let pass = report.pass;
            emit(&report, &out_path(&cfg, &rc))?;
            Ok(pass)
        }
        Command::Verify { group, cfg, samples } => {
            let rc = load_config(&cfg.config)?;
            let s = setup(&rc)?;
            let n_axis = s.lattice.sites_per_axis;
            let mut checks = Vec::new();
            let all = matches!(group, VerifyGroup::All);
            let tasks_empty = rc.tasks.as_ref().is_some_and(|t| t.is_empty());
            if !tasks_empty {
                let wants = |name: &str| rc.tasks.as_ref().map_or(true, |t| t.iter().any(|x| x == name));
                if (all || matches!(group, VerifyGroup::Algebra)) && wants("algebra") {
                    checks.extend(algebra_checks(&s)?);
                }
                if (all || matches!(group, VerifyGroup::Wick)) && wants("wick") {
                    checks.extend(wick_checks(&s)?);
                }
                if (all || matches!(group, VerifyGroup::Moller)) && wants("moller") {
                    checks.extend(moller_checks(&s, samples.or(rc.mc_samples).unwrap_or(100_000))?);
                }
                if (all || matches!(group, VerifyGroup::Ppa)) && wants("ppa") {
                    checks.extend(ppa_checks(&s, n_axis)?);
                }
            }
            ledger("verify", &rc, checks, &out_path(&cfg, &rc))
        }
        Command::Sweep { action: SweepCmd::Refinement { cfg, ns } } => {
            let rc = load_config(&cfg.config)?;
            let g = rc.geometry()?;
            let mut rows = Vec::new();
            for n in ns {
                let l = build_lattice_capped(&g, n, usize::MAX)?;
                let t = HomogeneousTorus::new(&g, &l)?;
                let order = rc.parametrix.order.unwrap_or(eqft::parametrix::DEFAULT_HADAMARD_ORDER);
                let nu = rc.parametrix.nu.unwrap_or_else(|| g.default_nu());
                let w = homogeneous_coincidence(&t, &l, order, nu, DEFAULT_FIT_DEGREE)?;
                rows.push(vec![n as f64, l.spacing[0], t.green_diagonal()?, w]);
            }
            report::with_writer(&out_path(&cfg, &rc), |w| Ok(write_csv(w, &["n", "spacing", "p_diagonal", "w_p"], &rows)?))?;
            Ok(true)
        }
        Command::Sweep { action: SweepCmd::Scaling(args) } => {
            let sw = run_scaling(&args)?;
            let rows: Vec<Vec<f64>> = sw.lambdas.iter().zip(&sw.values).map(|(a, b)| vec![*a, *b]).collect();
            report::with_writer(&None, |w| Ok(write_csv(w, &["lambda", "value"], &rows)?))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

