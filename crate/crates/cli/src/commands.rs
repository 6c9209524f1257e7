//! Subcommand pipelines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use twofluid::checkpoint;
use twofluid::closure::{closure_with, equilibrium_coefficients, phi, ClosureSolution, EquilibriumCoefficients, MixtureState};
use twofluid::config::RunConfig;
use twofluid::decay::{decay_experiment, fit_columns, predicted_exponent, DecayError, QuantityFit, SeriesTable};
use twofluid::grid::Spectral;
use twofluid::linsys::{
    block_decay_check, linear_besov_decay, lyapunov_dissipation_check, lyapunov_equivalence, default_weight,
    spectral_abscissa_scan, BlockCertificate, DecayCertificate, Equivalence, RadialProfile, Subspace, XiSamples,
    DEEPEST_BLOCK,
};
use twofluid::lpbesov::{AnnulusBump, DyadicDecomposition};

use crate::rundir::RunDir;
use crate::{CliError, Command, LinsymAction};

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::Closure => closure(cfg),
        Command::LpCheck => lp_check(cfg),
        Command::Linsym { action } => match action {
            LinsymAction::Scan => linsym_scan(cfg),
            LinsymAction::Decay => linsym_decay(cfg),
        },
        Command::Simulate { restart } => simulate(cfg, restart.as_deref()),
        Command::DecayFit { series, window } => decay_fit(cfg, series, *window),
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

fn open_run(cfg: &RunConfig, command: &str, arguments: &str) -> Result<RunDir, CliError> {
    // the output location and worker count do not change results
    let mut hashed = cfg.clone();
    hashed.run.output_dir.clear();
    hashed.run.threads = 0;
    Ok(RunDir::create(Path::new(&cfg.run.output_dir), command, arguments, &hashed.to_toml(), &cfg.to_toml(), cfg.run.threads)?)
}

/// Run `body`; on error the manifest records the failure.
fn with_run<F>(cfg: &RunConfig, command: &str, arguments: &str, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut RunDir) -> Result<(), CliError>,
{
    let mut dir = open_run(cfg, command, arguments)?;
    match body(&mut dir) {
        Ok(()) => {
            let path = dir.finish(None)?;
            eprintln!("outputs in {}", path.display());
            Ok(())
        }
        Err(e) => {
            let path = dir.finish(Some(&e.to_string()))?;
            eprintln!("partial outputs in {}", path.display());
            Err(e)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(|e| CliError::Io(std::io::Error::other(e)))?);
    Ok(())
}

fn coefficients(cfg: &RunConfig) -> Result<EquilibriumCoefficients, CliError> {
    let laws = cfg.laws().map_err(|e| CliError::Usage(e.to_string()))?;
    let visc = cfg.viscosities().map_err(|e| CliError::Usage(e.to_string()))?;
    equilibrium_coefficients(&laws, &visc).map_err(numerical)
}

#[derive(Serialize)]
struct ClosureOutput {
    r_plus: f64,
    r_minus: f64,
    gamma_plus: f64,
    gamma_minus: f64,
    path: String,
    #[serde(flatten)]
    solution: ClosureSolution,
    /// `|φ(ρ⁺)| / P`.
    relative_residual: f64,
    equilibrium: EquilibriumCoefficients,
}

fn closure(cfg: &RunConfig) -> Result<(), CliError> {
    with_run(cfg, "closure", "", |dir| {
        let laws = cfg.laws().map_err(|e| CliError::Usage(e.to_string()))?;
        let state = MixtureState::new(cfg.closure.r_plus, cfg.closure.r_minus).map_err(|e| CliError::Usage(e.to_string()))?;
        let path = cfg.closure_path().ok_or_else(|| CliError::Usage("bad closure.path".into()))?;
        let sol = closure_with(&state, &laws, cfg.closure.tol, path, None).map_err(numerical)?;
        let residual = phi(sol.rho_plus, &state, &laws).map_err(numerical)?.abs() / sol.pressure;
        let out = ClosureOutput {
            r_plus: state.r_plus,
            r_minus: state.r_minus,
            gamma_plus: laws.plus.gamma,
            gamma_minus: laws.minus.gamma,
            path: cfg.closure.path.clone(),
            solution: sol,
            relative_residual: residual,
            equilibrium: coefficients(cfg)?,
        };
        dir.write_json("closure.json", &out)?;
        print_json(&out)
    })
}

#[derive(Serialize)]
struct BernsteinRow {
    q: i32,
    ratio: f64,
}

#[derive(Serialize)]
struct LpOutput {
    points: usize,
    dims: usize,
    length: f64,
    q_min: i32,
    q_max: i32,
    q0: i32,
    partition_residual: f64,
    /// Relative `L²` error of `Σ_q Δ̇_q f` against `f` minus its mean, for a random field.
    reconstruction_error: f64,
    measured_support: (f64, f64),
    bernstein: Vec<BernsteinRow>,
    /// Largest relative spread of the Bernstein ratios across blocks.
    bernstein_spread: f64,
    passed: bool,
}

/// Partition, reconstruction and Bernstein checks on one grid.
fn lp_report(cfg: &RunConfig) -> Result<LpOutput, CliError> {
    let grid = cfg.grid().map_err(|e| CliError::Usage(e.to_string()))?;
    let sp = Spectral::new(&grid);
    let dec = DyadicDecomposition::new(&sp, cfg.diagnostics.q0).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    let field: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = sp.forward(&field);
    let mut sum = vec![Complex64::new(0.0, 0.0); spec.len()];
    for q in dec.q_min..=dec.q_max {
        for (s, v) in sum.iter_mut().zip(dec.block_project(&spec, q)) {
            *s += v;
        }
    }
    let mut target = spec.clone();
    target[Spectral::MEAN] = Complex64::new(0.0, 0.0);
    let diff: Vec<Complex64> = sum.iter().zip(&target).map(|(a, b)| a - b).collect();
    let reconstruction_error = sp.l2_norm(&diff) / sp.l2_norm(&target);
    let bernstein = dec
        .resolved_blocks()
        .into_iter()
        .map(|q| {
            let block = dec.block_project(&spec, q);
            dec.bernstein_check(&block, q).map(|ratio| BernsteinRow { q, ratio })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(numerical)?;
    let support = AnnulusBump.measured_support();
    let (lo, hi) = bernstein.iter().fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
    let spread = if bernstein.is_empty() { 0.0 } else { hi / lo - 1.0 };
    let partition_residual = dec.partition_residual();
    let passed = partition_residual <= 1e-10
        && reconstruction_error <= 1e-12
        && bernstein.iter().all(|r| r.ratio >= support.0 && r.ratio <= support.1)
        && spread <= 0.05;
    Ok(LpOutput {
        points: cfg.grid.points,
        dims: cfg.grid.dims,
        length: cfg.grid.length,
        q_min: dec.q_min,
        q_max: dec.q_max,
        q0: dec.q0,
        partition_residual,
        reconstruction_error,
        measured_support: support,
        bernstein,
        bernstein_spread: spread,
        passed,
    })
}

fn lp_check(cfg: &RunConfig) -> Result<(), CliError> {
    with_run(cfg, "lp-check", "", |dir| {
        let out = lp_report(cfg)?;
        dir.write_json("lp_check.json", &out)?;
        print_json(&out)
    })
}

fn samples(cfg: &RunConfig) -> Result<XiSamples, CliError> {
    let l = &cfg.linsym;
    XiSamples::log_spaced(cfg.grid.dims, l.r_min, l.r_max, l.radii).map_err(|e| CliError::Usage(e.to_string()))
}

#[derive(Serialize)]
struct ScanOutput {
    dims: usize,
    samples: usize,
    r_min: f64,
    r_max: f64,
    /// `max Re λ(A(ξ)) ≤ −c0·min(|ξ|², 1)`.
    scan: DecayCertificate,
    lyapunov_weight: f64,
    lyapunov_equivalence: Equivalence,
    lyapunov_dissipation: DecayCertificate,
}

fn linsym_scan(cfg: &RunConfig) -> Result<(), CliError> {
    with_run(cfg, "linsym scan", "", |dir| {
        let coeffs = coefficients(cfg)?;
        let xs = samples(cfg)?;
        let weight = default_weight(&coeffs);
        let out = ScanOutput {
            dims: cfg.grid.dims,
            samples: xs.points().len(),
            r_min: cfg.linsym.r_min,
            r_max: cfg.linsym.r_max,
            scan: spectral_abscissa_scan(&coeffs, &xs).map_err(numerical)?,
            lyapunov_weight: weight,
            lyapunov_equivalence: lyapunov_equivalence(&coeffs, &xs, weight).map_err(numerical)?,
            lyapunov_dissipation: lyapunov_dissipation_check(&coeffs, &xs).map_err(numerical)?,
        };
        dir.write_json("scan.json", &out)?;
        print_json(&out)
    })
}

#[derive(Serialize)]
struct DecayTableOutput {
    dims: usize,
    s: f64,
    q0: i32,
    window: [f64; 2],
    predicted: f64,
    /// Least-squares slope of `log norm` against `log ⟨t⟩` over the window.
    measured: f64,
    max_weighted: f64,
    blocks_full: DecayCertificate,
    blocks_decaying: DecayCertificate,
    block_rates: Vec<BlockCertificate>,
}

fn linsym_decay(cfg: &RunConfig) -> Result<(), CliError> {
    with_run(cfg, "linsym decay", "", |dir| {
        let coeffs = coefficients(cfg)?;
        let l = &cfg.linsym;
        let n = cfg.grid.dims;
        let q0 = cfg.diagnostics.q0;
        let t_grid: Vec<f64> = (0..l.t_count)
            .map(|i| (l.t_min.ln() + (l.t_max / l.t_min).ln() * i as f64 / (l.t_count - 1) as f64).exp())
            .collect();
        let table = linear_besov_decay(&t_grid, l.s, n, q0, &coeffs, &RadialProfile::default()).map_err(numerical)?;
        let mut csv = String::from("t");
        for q in DEEPEST_BLOCK..=q0 {
            let _ = write!(csv, ",q{q}");
        }
        csv.push_str(",norm,weighted\n");
        for r in &table.rows {
            let _ = write!(csv, "{:e}", r.t);
            for b in &r.blocks {
                let _ = write!(csv, ",{b:e}");
            }
            let _ = writeln!(csv, ",{:e},{:e}", r.norm, r.weighted);
        }
        dir.write("decay_table.csv", csv.as_bytes())?;
        let q_list: Vec<i32> = (l.q_min..=l.q_max).collect();
        let block_t: Vec<f64> = (0..20).map(|i| 10f64.powf(-1.0 + 0.25 * i as f64)).collect();
        let (full, _) = block_decay_check(&q_list, &block_t, n, &coeffs, 8, Subspace::Full).map_err(numerical)?;
        let (decaying, rates) = block_decay_check(&q_list, &block_t, n, &coeffs, 8, Subspace::Decaying).map_err(numerical)?;
        let out = DecayTableOutput {
            dims: n,
            s: l.s,
            q0,
            window: [l.t_min, l.t_max],
            predicted: predicted_exponent(n, l.s),
            measured: table.slope_between(l.t_min, l.t_max),
            max_weighted: table.max_weighted(),
            blocks_full: full,
            blocks_decaying: decaying,
            block_rates: rates,
        };
        dir.write_json("decay.json", &out)?;
        print_json(&out)
    })
}

fn decay_error(e: DecayError) -> CliError {
    match e {
        DecayError::Unresolvable { .. } | DecayError::Lp(_) | DecayError::Grid(_) => CliError::Usage(e.to_string()),
        DecayError::Series(_) | DecayError::EmptyWindow(..) | DecayError::TooFewSamples { .. } | DecayError::NonPositive { .. } => {
            CliError::Usage(e.to_string())
        }
        _ => CliError::Numerical(e.to_string()),
    }
}

fn simulate(cfg: &RunConfig, restart: Option<&Path>) -> Result<(), CliError> {
    let initial = match restart {
        Some(p) => {
            let cp = checkpoint::load(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let grid = cfg.grid().map_err(|e| CliError::Usage(e.to_string()))?;
            if cp.points != grid.points() || cp.lengths != grid.lengths() {
                return Err(CliError::Usage(format!("checkpoint {} does not match the configured grid", p.display())));
            }
            Some(cp.state)
        }
        None => None,
    };
    let arguments = match (restart, &initial) {
        (Some(_), Some(s)) => format!("restart at t = {}", s.time),
        _ => String::new(),
    };
    with_run(cfg, "simulate", &arguments, |dir| {
        let grid = cfg.grid().map_err(|e| CliError::Usage(e.to_string()))?;
        let stride = cfg.checkpoint_stride();
        let dt = cfg.integrator.dt;
        let mut written: Vec<String> = Vec::new();
        let dir_path: PathBuf = dir.path().to_path_buf();
        let outcome = decay_experiment(cfg, initial, |state, rec| {
            let k = (state.time / dt).round() as u64;
            if let Some(s) = stride {
                if k.is_multiple_of(s) {
                    let name = format!("checkpoint_{k:08}.bfc");
                    checkpoint::save(&dir_path.join(&name), &grid, state)
                        .map_err(|e| twofluid::solver::SolverError::Shape(e.to_string()))?;
                    written.push(name);
                }
            }
            if k.is_multiple_of(100) {
                eprintln!("t = {:>10.3}  L2(c+) = {:.6e}  D = {:.6e}", rec.t, rec.l2[0], rec.d_sup());
            }
            Ok(())
        });
        for name in &written {
            dir.register(name);
        }
        match outcome {
            Ok(o) => {
                dir.write("series.csv", SeriesTable::from_records(&o.records).to_csv().as_bytes())?;
                checkpoint::save(&dir.file("final.bfc"), &grid, &o.final_state).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
                dir.register("final.bfc");
                dir.write_json("report.json", &o.report)?;
                print_json(&o.report)
            }
            Err(err) => {
                dir.write_partial("series.csv", SeriesTable::from_records(&err.records).to_csv().as_bytes())?;
                if let Some(last) = &err.last {
                    checkpoint::save(&dir.file("last_good.bfc"), &grid, last).map_err(|e| CliError::Io(std::io::Error::other(e)))?;
                    dir.register("last_good.bfc");
                }
                Err(decay_error(err.source))
            }
        }
    })
}

#[derive(Serialize)]
struct FitOutput {
    series: String,
    dims: usize,
    window: [f64; 2],
    fits: Vec<QuantityFit>,
    skipped: Vec<(String, String)>,
}

fn decay_fit(cfg: &RunConfig, series: &Path, window: Option<[f64; 2]>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(series).map_err(|e| CliError::Usage(format!("{}: {e}", series.display())))?;
    let table = SeriesTable::from_csv(&text).map_err(decay_error)?;
    let window = window.unwrap_or(cfg.diagnostics.fit_window);
    let arguments = format!("series {} window {},{}", series.display(), window[0], window[1]);
    with_run(cfg, "decay-fit", &arguments, |dir| {
        let mut fits = Vec::new();
        let mut skipped = Vec::new();
        for (name, fit) in fit_columns(&table, cfg.grid.dims, window, false) {
            match fit {
                Ok(f) => fits.push(f),
                Err(e) => skipped.push((name, e.to_string())),
            }
        }
        if fits.is_empty() {
            let why = skipped.first().map(|s| s.1.clone()).unwrap_or_else(|| "no fittable columns".into());
            return Err(CliError::Usage(format!("nothing to fit: {why}")));
        }
        let out = FitOutput {
            series: series.display().to_string(),
            dims: cfg.grid.dims,
            window,
            fits,
            skipped,
        };
        dir.write_json("fit.json", &out)?;
        print_json(&out)
    })
}
