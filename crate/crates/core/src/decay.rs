//! Initial data, time-weighted diagnostics and decay-exponent fits.
//!
//! Time norms are discrete surrogates: `L̃∞` components are per-record
//! suprema of blockwise-summed norms, `L¹` components are trapezoidal sums
//! between records, and the weighted `D` components are running maxima.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closure::ClosureError;
use crate::config::{DataConfig, DiagnosticsConfig, PhaseMode, RunConfig};
use crate::grid::{GridError, Spectral, Spectrum};
use crate::linsys::{spectral_abscissa_scan, LinsysError, XiSamples};
use crate::lpbesov::{BlockNorms, DyadicDecomposition, LpError, Summability};
use crate::solver::{Integrator, Model, RunError, SolverError, State};

#[derive(Debug, Error)]
pub enum DecayError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Linsys(#[from] LinsysError),
    #[error(transparent)]
    Closure(#[from] ClosureError),
    #[error("spectrum |xi| <= {cutoff} is not resolvable: grid resolves [{k_min}, {k_dealiased}]")]
    Unresolvable { cutoff: f64, k_min: f64, k_dealiased: f64 },
    #[error("no samples in the fit window [{0}, {1}]")]
    EmptyWindow(f64, f64),
    #[error("only {found} samples in the fit window, at least {needed} required")]
    TooFewSamples { found: usize, needed: usize },
    #[error("non-positive value {value} at t = {t}")]
    NonPositive { t: f64, value: f64 },
    #[error("malformed series: {0}")]
    Series(String),
}

/// Minimum number of samples for [`fit_exponent`].
pub const MIN_FIT_SAMPLES: usize = 10;

/// `⟨t⟩ = (1 + t²)^{1/2}`.
pub fn japanese(t: f64) -> f64 {
    (1.0 + t * t).sqrt()
}

/// Weight exponent of the high-frequency entry of `D`: `min{2 + N/4, N/2 + 1/2 − ε}`.
pub fn high_weight_exponent(n: usize, eps: f64) -> f64 {
    let n = n as f64;
    (2.0 + n / 4.0).min(n / 2.0 + 0.5 - eps)
}

/// Predicted algebraic rate `−(N/4 + s/2)`.
pub fn predicted_exponent(n: usize, s: f64) -> f64 {
    -(n as f64 / 4.0 + s / 2.0)
}

/// Norm in which smallness of the data is measured:
/// `‖(c⁺,c⁻)‖_{B̃^{N/2−1,N/2}} + ‖(u⁺,u⁻)‖_{Ḃ^{N/2−1}}`.
pub fn data_norm(dec: &DyadicDecomposition, spec: &[Spectrum], n: usize) -> f64 {
    let h = n as f64 / 2.0;
    let (c, u) = split_phases(spec, n);
    let bc = dec.block_norms(&c, 0.0);
    let bu = dec.block_norms(&u, 0.0);
    bc.hybrid(h - 1.0, h, dec.q0) + bu.besov(h - 1.0, Summability::One)
}

/// `(densities, velocity components)` of a spectral state in field order.
fn split_phases(spec: &[Spectrum], n: usize) -> (Vec<&[Complex64]>, Vec<&[Complex64]>) {
    let c = vec![spec[0].as_slice(), spec[n + 1].as_slice()];
    let u = spec[1..=n].iter().chain(&spec[n + 2..]).map(|s| s.as_slice()).collect();
    (c, u)
}

/// Random-phase data with `|Û₀|` constant on `|ξ| ≤ cutoff`, real in physical
/// space, scaled so that [`data_norm`] equals the amplitude.
pub fn generate_data(spec: &DataConfig, spectral: &Spectral, q0: i32) -> Result<State, DecayError> {
    let grid = spectral.grid();
    let n = grid.dims();
    if spec.amplitude == 0.0 {
        return Ok(State::zeros(grid));
    }
    let (k_min, k_dealiased) = (grid.k_min(), grid.k_dealiased());
    if spec.cutoff < k_min || spec.cutoff >= k_dealiased {
        return Err(DecayError::Unresolvable {
            cutoff: spec.cutoff,
            k_min,
            k_dealiased,
        });
    }
    let len = spectral.len();
    let size = 2 * n + 2;
    let weight = |f: usize| match f {
        0 => spec.weights[0],
        f if f <= n => spec.weights[1],
        f if f == n + 1 => spec.weights[2],
        _ => spec.weights[3],
    };
    let mut fields: Vec<Spectrum> = vec![vec![Complex64::new(0.0, 0.0); len]; size];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let neg = spectral.negated();
    let keep = spectral.keep();
    let mut phases = vec![0.0; size];
    for m in 0..len {
        let nm = neg[m];
        if nm <= m || !keep[m] || spectral.radius(m) > spec.cutoff {
            continue;
        }
        match spec.phases {
            PhaseMode::Shared => phases.fill(rng.random_range(0.0..std::f64::consts::TAU)),
            PhaseMode::Independent => phases.iter_mut().for_each(|p| *p = rng.random_range(0.0..std::f64::consts::TAU)),
        }
        for (f, field) in fields.iter_mut().enumerate() {
            let v = Complex64::from_polar(weight(f), phases[f]);
            field[m] = v;
            field[nm] = v.conj();
        }
    }
    let dec = DyadicDecomposition::new(spectral, q0)?;
    let norm = data_norm(&dec, &fields, n);
    if norm == 0.0 {
        return Err(DecayError::Unresolvable {
            cutoff: spec.cutoff,
            k_min,
            k_dealiased,
        });
    }
    let scale = spec.amplitude / norm;
    for field in fields.iter_mut() {
        field.iter_mut().for_each(|v| *v *= scale);
    }
    let refs: Vec<&[Complex64]> = fields.iter().map(|f| f.as_slice()).collect();
    Ok(State::from_fields(spectral.inverse_many(&refs), 0.0)?)
}

/// Low and high parts of the `Ḃ^s_{2,1}` norm of the full state at one `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BesovEntry {
    pub s: f64,
    pub low: f64,
    pub high: f64,
}

/// Components of the discrete `X` functional.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct XComponents {
    /// `sup_τ ‖(c,u)‖^ℓ_{Ḃ^{N/2−1}}`
    pub low_sup: f64,
    /// `∫ ‖(c,u)‖^ℓ_{Ḃ^{N/2+1}}`
    pub low_int: f64,
    /// `sup_τ ‖u‖^h_{Ḃ^{N/2−1}}`
    pub high_u_sup: f64,
    /// `sup_τ ‖c‖^h_{Ḃ^{N/2}}`
    pub high_c_sup: f64,
    /// `∫ ‖u‖^h_{Ḃ^{N/2+1}}`
    pub high_u_int: f64,
    /// `∫ ‖c‖^h_{Ḃ^{N/2}}`
    pub high_c_int: f64,
}

impl XComponents {
    pub fn total(&self) -> f64 {
        self.low_sup + self.low_int + self.high_u_sup + self.high_c_sup + self.high_u_int + self.high_c_int
    }
}

/// Components of the discrete `D` functional.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DComponents {
    /// `sup_s ⟨t⟩^{N/4+s/2} ‖(c,u)‖^ℓ_{Ḃ^s}` over sampled `s ∈ (ε−N/2, 2]`.
    pub low: f64,
    /// `⟨t⟩^α ‖(∇c,u)‖^h_{Ḃ^{N/2−1}}`.
    pub high: f64,
    /// `t ‖∇u‖^h_{Ḃ^{N/2}}`.
    pub gradient: f64,
}

impl DComponents {
    pub fn total(&self) -> f64 {
        self.low + self.high + self.gradient
    }

    fn max(&self, o: &DComponents) -> DComponents {
        DComponents {
            low: self.low.max(o.low),
            high: self.high.max(o.high),
            gradient: self.gradient.max(o.gradient),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    /// `‖c⁺‖, ‖u⁺‖, ‖c⁻‖, ‖u⁻‖` in `L²`.
    pub l2: [f64; 4],
    /// `‖∇c⁺‖, ‖∇c⁻‖` in `L²`.
    pub grad_l2: [f64; 2],
    pub besov: Vec<BesovEntry>,
    pub mass_plus: f64,
    pub mass_minus: f64,
    /// Instantaneous part of `X`: `‖(c,u)‖^ℓ_{Ḃ^{N/2−1}} + ‖u‖^h_{Ḃ^{N/2−1}} + ‖c‖^h_{Ḃ^{N/2}}`.
    pub x_inst: f64,
    pub x: XComponents,
    pub d_inst: DComponents,
    /// Running maxima of `d_inst`.
    pub d: DComponents,
}

impl DiagnosticsRecord {
    pub fn x_acc(&self) -> f64 {
        self.x.total()
    }

    pub fn d_sup(&self) -> f64 {
        self.d.total()
    }
}

/// Accumulates [`DiagnosticsRecord`]s along a run.
pub struct Recorder {
    spectral: Spectral,
    dec: DyadicDecomposition,
    cfg: DiagnosticsConfig,
    s_samples: Vec<f64>,
    alpha: f64,
    records: Vec<DiagnosticsRecord>,
    /// Integrands of the `L¹` components at the previous record.
    last: Option<(f64, [f64; 3])>,
}

impl Recorder {
    pub fn new(spectral: &Spectral, cfg: &DiagnosticsConfig) -> Result<Self, DecayError> {
        let n = spectral.grid().dims();
        let dec = DyadicDecomposition::new(spectral, cfg.q0)?;
        // (ε − N/2, 2]: open at the bottom, closed at the top
        let lo = cfg.epsilon - n as f64 / 2.0;
        let k = cfg.d_samples.max(2);
        let s_samples = (1..=k).map(|i| lo + (2.0 - lo) * i as f64 / k as f64).collect();
        Ok(Self {
            spectral: spectral.clone(),
            dec,
            cfg: cfg.clone(),
            s_samples,
            alpha: high_weight_exponent(n, cfg.epsilon),
            records: Vec::new(),
            last: None,
        })
    }

    pub fn decomposition(&self) -> &DyadicDecomposition {
        &self.dec
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn records(&self) -> &[DiagnosticsRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<DiagnosticsRecord> {
        self.records
    }

    /// Low-frequency `D` samples of `s`.
    pub fn s_samples(&self) -> &[f64] {
        &self.s_samples
    }

    pub fn record(&mut self, state: &State) -> &DiagnosticsRecord {
        let sp = &self.spectral;
        let grid = sp.grid();
        let n = grid.dims();
        let h = n as f64 / 2.0;
        let q0 = self.cfg.q0;
        let spec = sp.forward_many(&state.fields());
        let (c, u) = split_phases(&spec, n);
        let (up, um) = (&u[..n], &u[n..]);
        let dec = &self.dec;
        let bc = [dec.block_norms(&c[..1], 0.0), dec.block_norms(&c[1..], 0.0)];
        let bu = [dec.block_norms(up, 0.0), dec.block_norms(um, 0.0)];
        let gc = [dec.block_norms(&c[..1], 1.0), dec.block_norms(&c[1..], 1.0)];
        let gu = [dec.block_norms(up, 1.0), dec.block_norms(um, 1.0)];
        let all = BlockNorms::root_sum_square(&[&bc[0], &bu[0], &bc[1], &bu[1]]);
        let c_pair = BlockNorms::root_sum_square(&[&bc[0], &bc[1]]);
        let u_pair = BlockNorms::root_sum_square(&[&bu[0], &bu[1]]);
        let gc_u = BlockNorms::root_sum_square(&[&gc[0], &bu[0], &gc[1], &bu[1]]);
        let gu_pair = BlockNorms::root_sum_square(&[&gu[0], &gu[1]]);

        let t = state.time;
        let l2_vec = |comps: &[&[Complex64]]| comps.iter().map(|f| sp.l2_norm(f).powi(2)).sum::<f64>().sqrt();
        let grad = |f: &[Complex64]| (grid.volume() * f.iter().zip(sp.k2()).map(|(v, k2)| v.norm_sqr() * k2).sum::<f64>()).sqrt();
        let (mass_plus, mass_minus) = state.masses(grid);

        let x_inst = all.low(h - 1.0, q0) + u_pair.high(h - 1.0, q0) + c_pair.high(h, q0);
        let integrands = [all.low(h + 1.0, q0), u_pair.high(h + 1.0, q0), c_pair.high(h, q0)];
        let prev = self.records.last();
        let mut x = prev.map(|r| r.x).unwrap_or_default();
        x.low_sup = x.low_sup.max(all.low(h - 1.0, q0));
        x.high_u_sup = x.high_u_sup.max(u_pair.high(h - 1.0, q0));
        x.high_c_sup = x.high_c_sup.max(c_pair.high(h, q0));
        if let Some((t0, f0)) = self.last {
            let dt = t - t0;
            x.low_int += 0.5 * dt * (f0[0] + integrands[0]);
            x.high_u_int += 0.5 * dt * (f0[1] + integrands[1]);
            x.high_c_int += 0.5 * dt * (f0[2] + integrands[2]);
        }
        self.last = Some((t, integrands));

        let jt = japanese(t);
        let low = self
            .s_samples
            .iter()
            .map(|&s| jt.powf(n as f64 / 4.0 + s / 2.0) * all.low(s, q0))
            .fold(0.0, f64::max);
        let d_inst = DComponents {
            low,
            high: jt.powf(self.alpha) * gc_u.high(h - 1.0, q0),
            gradient: t * gu_pair.high(h, q0),
        };
        let d = prev.map(|r| r.d.max(&d_inst)).unwrap_or(d_inst);

        let rec = DiagnosticsRecord {
            t,
            l2: [l2_vec(&c[..1]), l2_vec(up), l2_vec(&c[1..]), l2_vec(um)],
            grad_l2: [grad(c[0]), grad(c[1])],
            besov: self
                .cfg
                .s_list
                .iter()
                .map(|&s| BesovEntry {
                    s,
                    low: all.low(s, q0),
                    high: all.high(s, q0),
                })
                .collect(),
            mass_plus,
            mass_minus,
            x_inst,
            x,
            d_inst,
            d,
        };
        self.records.push(rec);
        self.records.last().unwrap()
    }
}

/// Least-squares power law `norm ≈ e^{intercept} t^{exponent}` on a window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub exponent: f64,
    pub intercept: f64,
    pub window: [f64; 2],
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub samples: usize,
    pub predicted: Option<f64>,
}

/// Fit `log(norm)` against `log(t)` over samples with `t ∈ [a, b]`.
pub fn fit_exponent(series: &[(f64, f64)], window: [f64; 2]) -> Result<DecayFit, DecayError> {
    let [a, b] = window;
    let inside: Vec<(f64, f64)> = series.iter().copied().filter(|&(t, _)| t >= a && t <= b).collect();
    if inside.is_empty() {
        return Err(DecayError::EmptyWindow(a, b));
    }
    if let Some(&(t, value)) = inside.iter().find(|&&(t, v)| !(v > 0.0) || !(t > 0.0)) {
        return Err(DecayError::NonPositive { t, value });
    }
    if inside.len() < MIN_FIT_SAMPLES {
        return Err(DecayError::TooFewSamples {
            found: inside.len(),
            needed: MIN_FIT_SAMPLES,
        });
    }
    let pts: Vec<(f64, f64)> = inside.iter().map(|&(t, v)| (t.ln(), v.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(DecayError::TooFewSamples {
            found: 1,
            needed: MIN_FIT_SAMPLES,
        });
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let residual = (pts.iter().map(|p| (p.1 - intercept - exponent * p.0).powi(2)).sum::<f64>() / k).sqrt();
    Ok(DecayFit {
        exponent,
        intercept,
        window,
        residual,
        samples: pts.len(),
        predicted: None,
    })
}

/// Exponential rate `−d log(norm)/dt` fitted on `t ∈ [a, b]`.
pub fn fit_rate(series: &[(f64, f64)], window: [f64; 2]) -> Result<f64, DecayError> {
    let inside: Vec<(f64, f64)> = series.iter().copied().filter(|&(t, _)| t >= window[0] && t <= window[1]).collect();
    if inside.len() < 2 {
        return Err(DecayError::EmptyWindow(window[0], window[1]));
    }
    if let Some(&(t, value)) = inside.iter().find(|&&(_, v)| !(v > 0.0)) {
        return Err(DecayError::NonPositive { t, value });
    }
    let pts: Vec<(f64, f64)> = inside.iter().map(|&(t, v)| (t, v.ln())).collect();
    Ok(-crate::linsys::least_squares_slope(&pts))
}

/// Named time series, one per CSV column.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SeriesTable {
    pub fn from_records(records: &[DiagnosticsRecord]) -> Self {
        let mut columns: Vec<String> = ["t", "L2_c_plus", "L2_u_plus", "L2_c_minus", "L2_u_minus"].map(String::from).to_vec();
        if let Some(r) = records.first() {
            for b in &r.besov {
                columns.push(format!("B{}_low", b.s));
                columns.push(format!("B{}_high", b.s));
            }
        }
        columns.extend(
            [
                "mass_plus",
                "mass_minus",
                "X_acc",
                "D_sup",
                "grad_c_plus",
                "grad_c_minus",
                "X_inst",
                "D_low",
                "D_high",
                "D_gradient",
            ]
            .map(String::from),
        );
        let rows = records
            .iter()
            .map(|r| {
                let mut row = vec![r.t, r.l2[0], r.l2[1], r.l2[2], r.l2[3]];
                for b in &r.besov {
                    row.push(b.low);
                    row.push(b.high);
                }
                row.extend([
                    r.mass_plus,
                    r.mass_minus,
                    r.x_acc(),
                    r.d_sup(),
                    r.grad_l2[0],
                    r.grad_l2[1],
                    r.x_inst,
                    r.d.low,
                    r.d.high,
                    r.d.gradient,
                ]);
                row
            })
            .collect();
        Self { columns, rows }
    }

    pub fn column(&self, name: &str) -> Option<Vec<(f64, f64)>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| (r[0], r[j])).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let line: Vec<String> = r.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, DecayError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| DecayError::Series("empty file".into()))?;
        let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
        if columns.first().map(String::as_str) != Some("t") {
            return Err(DecayError::Series("first column must be t".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| DecayError::Series(format!("row {}: {e}", i + 1)))?;
            if row.len() != columns.len() {
                return Err(DecayError::Series(format!("row {} has {} values, expected {}", i + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

/// Predicted exponent for a named series column, when one applies.
pub fn column_prediction(name: &str, n: usize) -> Option<f64> {
    match name {
        "L2_c_plus" | "L2_u_plus" | "L2_c_minus" | "L2_u_minus" => Some(predicted_exponent(n, 0.0)),
        "grad_c_plus" | "grad_c_minus" => Some(predicted_exponent(n, 1.0)),
        _ => {
            let s = name.strip_prefix('B')?.strip_suffix("_low")?;
            s.parse::<f64>().ok().map(|s| predicted_exponent(n, s))
        }
    }
}

/// One fitted quantity of a decay report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityFit {
    pub quantity: String,
    pub predicted: Option<f64>,
    pub measured: f64,
    pub window: [f64; 2],
    pub residual: f64,
    pub intercept: f64,
    pub samples: usize,
    /// Set when the window starts inside the initial transient or ends past the finite-size cutoff.
    pub flagged: bool,
}

/// Fit every column with a known prediction over one window.
pub fn fit_columns(table: &SeriesTable, n: usize, window: [f64; 2], flagged: bool) -> Vec<(String, Result<QuantityFit, DecayError>)> {
    table
        .columns
        .iter()
        .filter_map(|name| column_prediction(name, n).map(|p| (name, p)))
        .map(|(name, p)| {
            let fit = fit_exponent(&table.column(name).unwrap(), window).map(|f| QuantityFit {
                quantity: name.clone(),
                predicted: Some(p),
                measured: f.exponent,
                window: f.window,
                residual: f.residual,
                intercept: f.intercept,
                samples: f.samples,
                flagged,
            });
            (name.clone(), fit)
        })
        .collect()
}

/// Exponential tail past the finite-size cutoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub window: [f64; 2],
    pub rate: f64,
    /// `c0·k_min²`.
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub dims: usize,
    pub points: usize,
    pub length: f64,
    pub amplitude: f64,
    pub seed: u64,
    pub scheme: String,
    pub dt: f64,
    pub t_end: f64,
    /// Rate from the symbol scan used for the cutoff (stationary modes excluded when present).
    pub c0: f64,
    pub stationary_modes: usize,
    pub k_min: f64,
    pub t_cut: f64,
    /// Smallness norm of the realised data.
    pub data_norm: f64,
    /// `‖U₀‖^ℓ_{Ḃ^{−N/2}_{2,∞}}`.
    pub d0: f64,
    pub alpha: f64,
    pub fits: Vec<QuantityFit>,
    pub d_sup: f64,
    /// `D(t_end)/D(t_mid) − 1` over the second half of the fit window.
    pub d_growth_final_half: f64,
    pub d_bounded: bool,
    /// Largest relative increase of `X_inst` between consecutive records after the transient.
    pub x_inst_max_rise: f64,
    pub x_inst_non_increasing: bool,
    pub min_density: f64,
    pub mass_drift: [f64; 2],
    pub tail: Option<TailFit>,
}

/// Relative growth of the running `D` supremum over the second half of `[a, b]`.
pub fn d_growth(records: &[DiagnosticsRecord], window: [f64; 2]) -> f64 {
    let b = window[1].min(records.last().map_or(0.0, |r| r.t));
    let mid = 0.5 * (window[0] + b);
    let at = |t: f64| {
        records
            .iter().rfind(|r| r.t <= t)
            .map(|r| r.d_sup())
            .unwrap_or(0.0)
    };
    let (dm, de) = (at(mid), at(b));
    if dm > 0.0 {
        de / dm - 1.0
    } else {
        0.0
    }
}

/// Largest relative increase of `X_inst` between consecutive records with `t ≥ t0`.
pub fn x_inst_max_rise(records: &[DiagnosticsRecord], t0: f64) -> f64 {
    records
        .windows(2)
        .filter(|w| w[0].t >= t0 && w[0].x_inst > 0.0)
        .map(|w| (w[1].x_inst - w[0].x_inst) / w[0].x_inst)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Tolerated relative growth of `D` over the final half of the window.
pub const D_GROWTH_TOL: f64 = 0.05;

/// Completed experiment.
pub struct DecayOutcome {
    pub report: DecayReport,
    pub records: Vec<DiagnosticsRecord>,
    pub final_state: State,
}

/// Failed experiment with whatever was recorded.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct ExperimentError {
    #[source]
    pub source: DecayError,
    pub records: Vec<DiagnosticsRecord>,
    pub last: Option<Box<State>>,
}

impl From<DecayError> for ExperimentError {
    fn from(source: DecayError) -> Self {
        Self {
            source,
            records: Vec::new(),
            last: None,
        }
    }
}

/// Rate used for the finite-size cutoff: the symbol-scan `c0`, or its
/// stationary-free counterpart when the scan finds stationary modes.
pub fn cutoff_rate(cfg: &RunConfig) -> Result<(f64, usize), DecayError> {
    let model_coeffs = crate::closure::equilibrium_coefficients(&cfg.laws()?, &cfg.viscosities()?)?;
    let l = &cfg.linsym;
    let samples = XiSamples::log_spaced(cfg.grid.dims, l.r_min, l.r_max, l.radii)?;
    let cert = spectral_abscissa_scan(&model_coeffs, &samples)?;
    let c0 = if cert.c0 > 0.0 { cert.c0 } else { cert.c0_complement };
    Ok((c0, cert.stationary_modes))
}

/// Generate data, run the solver, record diagnostics and fit exponents.
/// `observer` sees every recorded state with its diagnostics.
pub fn decay_experiment<F>(cfg: &RunConfig, initial: Option<State>, mut observer: F) -> Result<DecayOutcome, ExperimentError>
where
    F: FnMut(&State, &DiagnosticsRecord) -> Result<(), SolverError>,
{
    cfg.validate().map_err(|e| DecayError::Series(e.to_string()))?;
    let grid = cfg.grid().map_err(DecayError::from)?;
    let model = Model::new(&grid, cfg.laws().map_err(DecayError::from)?, cfg.viscosities().map_err(DecayError::from)?, cfg.closure.tol)
        .map_err(DecayError::from)?;
    let n = grid.dims();
    let (c0, stationary_modes) = cutoff_rate(cfg)?;
    let k_min = grid.k_min();
    let t_cut = cfg.diagnostics.kappa / (c0 * k_min * k_min);
    let state0 = match initial {
        Some(s) => s,
        None => generate_data(&cfg.data, model.spectral(), cfg.diagnostics.q0)?,
    };
    let mut recorder = Recorder::new(model.spectral(), &cfg.diagnostics)?;
    let spec0 = model.spectral().forward_many(&state0.fields());
    let norm0 = data_norm(recorder.decomposition(), &spec0, n);
    let d0 = recorder.decomposition().block_norms(&spec0.iter().map(|s| s.as_slice()).collect::<Vec<_>>(), 0.0).low_sup(-(n as f64) / 2.0, cfg.diagnostics.q0);
    let mut integrator = Integrator::new(model, cfg.integrator.scheme);
    let mut min_density = f64::INFINITY;
    let result = integrator.run(state0, cfg.integrator.dt, cfg.integrator.t_end, cfg.record_stride(), |s| {
        min_density = min_density.min(s.min_density().0);
        let rec = recorder.record(s);
        observer(s, rec)
    });
    let final_state = match result {
        Ok(s) => s,
        Err(RunError { source, last }) => {
            return Err(ExperimentError {
                source: source.into(),
                records: recorder.into_records(),
                last: Some(last),
            })
        }
    };
    let alpha = recorder.alpha();
    let records = recorder.into_records();
    let report = build_report(cfg, &records, min_density, c0, stationary_modes, t_cut, norm0, d0, alpha);
    Ok(DecayOutcome {
        report,
        records,
        final_state,
    })
}

#[allow(clippy::too_many_arguments)]
fn build_report(
    cfg: &RunConfig,
    records: &[DiagnosticsRecord],
    min_density: f64,
    c0: f64,
    stationary_modes: usize,
    t_cut: f64,
    data_norm: f64,
    d0: f64,
    alpha: f64,
) -> DecayReport {
    let n = cfg.grid.dims;
    let window = cfg.diagnostics.fit_window;
    let flagged = window[0] < 10.0 * cfg.integrator.dt || window[1] > t_cut;
    let table = SeriesTable::from_records(records);
    let fits = fit_columns(&table, n, window, flagged).into_iter().filter_map(|(_, f)| f.ok()).collect();
    let k_min = 2.0 * std::f64::consts::PI / cfg.grid.length;
    let tail = (cfg.integrator.t_end > t_cut)
        .then(|| {
            let w = [t_cut, cfg.integrator.t_end];
            fit_rate(&table.column("L2_c_plus").unwrap(), w).ok().map(|rate| TailFit {
                window: w,
                rate,
                predicted: c0 * k_min * k_min,
            })
        })
        .flatten();
    let first = &records[0];
    let last = records.last().unwrap();
    let d_growth_final_half = d_growth(records, window);
    let d_sup = last.d_sup();
    let rise = x_inst_max_rise(records, window[0]);
    DecayReport {
        dims: n,
        points: cfg.grid.points,
        length: cfg.grid.length,
        amplitude: cfg.data.amplitude,
        seed: cfg.data.seed,
        scheme: cfg.integrator.scheme.name().into(),
        dt: cfg.integrator.dt,
        t_end: cfg.integrator.t_end,
        c0,
        stationary_modes,
        k_min,
        t_cut,
        data_norm,
        d0,
        alpha,
        fits,
        d_sup,
        d_growth_final_half,
        d_bounded: d_sup.is_finite() && d_growth_final_half <= D_GROWTH_TOL,
        x_inst_max_rise: rise,
        x_inst_non_increasing: rise <= 0.0,
        min_density,
        mass_drift: [
            (last.mass_plus - first.mass_plus) / first.mass_plus,
            (last.mass_minus - first.mass_minus) / first.mass_minus,
        ],
        tail,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::{equilibrium_coefficients, PressureLaws, Viscosities};
    use crate::grid::Grid;
    use crate::linsys::{linear_besov_decay, RadialProfile};
    use crate::lpbesov::block_range;
    use std::f64::consts::PI;

    fn spectral(n: usize, l: f64) -> Spectral {
        Spectral::new(&Grid::cubic(2, n, l, 2.0 / 3.0).unwrap())
    }

    fn data(amplitude: f64, seed: u64) -> DataConfig {
        DataConfig {
            amplitude,
            seed,
            ..RunConfig::default().data
        }
    }

    fn small_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.grid.points = 32;
        c.grid.length = 2.0 * PI * 4.0;
        c.integrator.t_end = 20.0;
        c.diagnostics.fit_window = [2.0, 20.0];
        c.linsym.radii = 40;
        c
    }

    #[test]
    fn zero_amplitude_gives_zero_state() {
        let sp = spectral(16, 2.0 * PI * 4.0);
        let s = generate_data(&data(0.0, 3), &sp, 0).unwrap();
        assert_eq!(s, State::zeros(sp.grid()));
    }

    #[test]
    fn data_is_normalised_and_real() {
        let sp = spectral(64, 2.0 * PI * 8.0);
        let dec = DyadicDecomposition::new(&sp, 0).unwrap();
        for phases in [PhaseMode::Shared, PhaseMode::Independent] {
            let mut d = data(1e-3, 5);
            d.phases = phases;
            let s = generate_data(&d, &sp, 0).unwrap();
            let spec = sp.forward_many(&s.fields());
            assert!((data_norm(&dec, &spec, 2) / 1e-3 - 1.0).abs() < 1e-12);
            for f in &spec {
                assert!(f[Spectral::MEAN].norm() < 1e-18);
                // nothing above the cutoff
                for (m, v) in f.iter().enumerate() {
                    if sp.radius(m) > 1.0 {
                        assert!(v.norm() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn seeds_give_distinct_fields_with_equal_norms() {
        let sp = spectral(64, 2.0 * PI * 8.0);
        let dec = DyadicDecomposition::new(&sp, 0).unwrap();
        let a = generate_data(&data(2e-3, 1), &sp, 0).unwrap();
        let b = generate_data(&data(2e-3, 2), &sp, 0).unwrap();
        assert_ne!(a.c_plus, b.c_plus);
        let na = data_norm(&dec, &sp.forward_many(&a.fields()), 2);
        let nb = data_norm(&dec, &sp.forward_many(&b.fields()), 2);
        assert!((na - nb).abs() < 1e-12 * na);
        assert_eq!(generate_data(&data(2e-3, 1), &sp, 0).unwrap(), a);
    }

    #[test]
    fn flat_spectrum_has_uniform_negative_index_blocks() {
        let sp = spectral(256, 2.0 * PI * 32.0);
        let dec = DyadicDecomposition::new(&sp, 0).unwrap();
        let s = generate_data(&data(1e-3, 9), &sp, 0).unwrap();
        let spec = sp.forward_many(&s.fields());
        let refs: Vec<&[Complex64]> = spec.iter().map(|f| f.as_slice()).collect();
        let b = dec.block_norms(&refs, 0.0);
        // blocks whose annulus lies inside |ξ| ≤ 1 and well above k_min
        let scaled: Vec<f64> = (dec.q_min + 2..=-2).map(|q| (-(q as f64)).exp2() * b.get(q)).collect();
        let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0f64), |(a, c), &v| (a.min(v), c.max(v)));
        assert!(scaled.len() >= 3);
        assert!(hi / lo < 1.25, "{scaled:?}");
        assert!(b.low_sup(-1.0, 0).is_finite() && b.low_sup(-1.0, 0) > 0.0);
    }

    #[test]
    fn unresolvable_spectrum_is_rejected() {
        let sp = spectral(16, PI);
        assert!(matches!(generate_data(&data(1e-3, 0), &sp, 0), Err(DecayError::Unresolvable { .. })));
        let sp = spectral(16, 2.0 * PI * 4.0);
        let mut d = data(1e-3, 0);
        d.cutoff = 0.1;
        assert!(matches!(generate_data(&d, &sp, 0), Err(DecayError::Unresolvable { .. })));
    }

    #[test]
    fn weight_exponent() {
        assert!((high_weight_exponent(2, 0.01) - 1.49).abs() < 1e-15);
        assert!((high_weight_exponent(3, 0.01) - 1.99).abs() < 1e-15);
        assert_eq!(predicted_exponent(2, 1.0), -1.0);
    }

    #[test]
    fn zero_state_records_zero() {
        let sp = spectral(16, 2.0 * PI * 4.0);
        let mut r = Recorder::new(&sp, &RunConfig::default().diagnostics).unwrap();
        let mut z = State::zeros(sp.grid());
        r.record(&z);
        z.time = 1.0;
        let rec = r.record(&z).clone();
        assert_eq!(rec.l2, [0.0; 4]);
        assert_eq!(rec.grad_l2, [0.0; 2]);
        assert!(rec.besov.iter().all(|b| b.low == 0.0 && b.high == 0.0));
        assert_eq!(rec.x_acc(), 0.0);
        assert_eq!(rec.d_sup(), 0.0);
        assert_eq!(rec.x_inst, 0.0);
    }

    #[test]
    fn exclusive_annulus_mode_has_exact_hybrid_weight() {
        let l = 2.0 * PI * 32.0;
        let sp = spectral(256, l);
        let g = sp.grid().clone();
        let dec = DyadicDecomposition::new(&sp, 0).unwrap();
        let cfg = RunConfig::default().diagnostics;
        for q in [-2, 1] {
            // radius in [4/3, 3/2]·2^q carries weight one in block q only
            let r = 1.4 * (q as f64).exp2();
            let j = (r * l / (2.0 * PI)).round();
            let k = 2.0 * PI / l * j;
            assert!(k > 4.0 / 3.0 * (q as f64).exp2() && k < 1.5 * (q as f64).exp2());
            let mut s = State::zeros(&g);
            for m in 0..g.len() {
                s.c_plus[m] = (k * g.coordinate(m)[0]).cos();
            }
            let l2 = sp.l2_norm(&sp.forward(&s.c_plus));
            let mut rec = Recorder::new(&sp, &cfg).unwrap();
            let out = rec.record(&s);
            for b in &out.besov {
                let expected = (q as f64 * b.s).exp2() * l2;
                let (hit, miss) = if q <= 0 { (b.low, b.high) } else { (b.high, b.low) };
                assert!((hit - expected).abs() < 1e-12 * expected, "q {q} s {}: {hit} vs {expected}", b.s);
                assert!(miss < 1e-12 * expected);
            }
            let spec = sp.forward_many(&s.fields());
            let t = if q <= 0 { 0.0 } else { 1.0 };
            let hybrid = data_norm(&dec, &spec, 2);
            assert!((hybrid - (q as f64 * t).exp2() * l2).abs() < 1e-12 * l2);
        }
    }

    #[test]
    fn low_and_high_parts_reconstruct_the_full_norm() {
        let sp = spectral(64, 2.0 * PI * 2.0);
        let dec = DyadicDecomposition::new(&sp, 0).unwrap();
        let mut d = data(1e-2, 4);
        d.cutoff = 5.0;
        let s = generate_data(&d, &sp, 0).unwrap();
        let mut r = Recorder::new(&sp, &RunConfig::default().diagnostics).unwrap();
        let rec = r.record(&s).clone();
        let spec = sp.forward_many(&s.fields());
        let refs: Vec<&[Complex64]> = spec.iter().map(|f| f.as_slice()).collect();
        let b = dec.block_norms(&refs, 0.0);
        for e in &rec.besov {
            let full = b.besov(e.s, Summability::One);
            assert!(e.high > 0.0 && e.low > 0.0);
            assert!((e.low + e.high - full).abs() < 1e-12 * full);
        }
    }

    #[test]
    fn exact_power_law_fit() {
        let series: Vec<(f64, f64)> = (1..=40).map(|i| i as f64).map(|t| (t, 7.0 * t.powf(-0.5))).collect();
        let f = fit_exponent(&series, [1.0, 40.0]).unwrap();
        assert!((f.exponent + 0.5).abs() < 1e-13);
        assert!((f.intercept - 7f64.ln()).abs() < 1e-12);
        assert!(f.residual < 1e-13);
        assert_eq!(f.samples, 40);
    }

    #[test]
    fn cutoff_window_rule() {
        let series: Vec<(f64, f64)> = (0..400)
            .map(|i| (10f64).powf(1.0 + 2.7 * i as f64 / 399.0))
            .map(|t| (t, t.powf(-0.5) * (-t / 1000.0).exp()))
            .collect();
        let early = fit_exponent(&series, [10.0, 100.0]).unwrap();
        assert!((early.exponent + 0.5).abs() < 0.05, "{}", early.exponent);
        let late = fit_exponent(&series, [500.0, 5000.0]).unwrap();
        assert!(late.exponent < -1.0, "{}", late.exponent);
        let rate = fit_rate(&series.iter().map(|&(t, v)| (t, v * t.sqrt())).collect::<Vec<_>>(), [500.0, 5000.0]).unwrap();
        assert!((rate - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn fit_errors() {
        let series: Vec<(f64, f64)> = (1..=20).map(|i| (i as f64, 1.0 / i as f64)).collect();
        assert!(matches!(fit_exponent(&series, [100.0, 200.0]), Err(DecayError::EmptyWindow(..))));
        assert!(matches!(fit_exponent(&series, [1.0, 5.0]), Err(DecayError::TooFewSamples { found: 5, .. })));
        let mut bad = series.clone();
        bad[3].1 = 0.0;
        assert!(matches!(fit_exponent(&bad, [1.0, 20.0]), Err(DecayError::NonPositive { .. })));
    }

    #[test]
    fn fit_of_linear_quadrature_table() {
        let c = equilibrium_coefficients(&PressureLaws::new(2.0, 2.0).unwrap(), &Viscosities::new(1.0, 1.0, 0.0, 0.0).unwrap()).unwrap();
        let t_grid: Vec<f64> = (0..21).map(|i| 10f64.powf(4.0 * i as f64 / 20.0)).collect();
        let table = linear_besov_decay(&t_grid, 0.0, 2, 0, &c, &RadialProfile::default()).unwrap();
        let series: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.t, r.norm)).collect();
        let f = fit_exponent(&series, [1.0, 1e4]).unwrap();
        assert!((f.exponent + 0.5).abs() < 0.03, "{}", f.exponent);
    }

    #[test]
    fn csv_round_trip_and_predictions() {
        let cfg = small_config();
        let sp = Spectral::new(&cfg.grid().unwrap());
        let s = generate_data(&cfg.data, &sp, 0).unwrap();
        let mut r = Recorder::new(&sp, &cfg.diagnostics).unwrap();
        r.record(&s);
        let table = SeriesTable::from_records(r.records());
        assert_eq!(
            &table.columns[..11],
            &["t", "L2_c_plus", "L2_u_plus", "L2_c_minus", "L2_u_minus", "B0_low", "B0_high", "B1_low", "B1_high", "mass_plus", "mass_minus"]
        );
        assert_eq!(&table.columns[11..13], &["X_acc", "D_sup"]);
        let back = SeriesTable::from_csv(&table.to_csv()).unwrap();
        assert_eq!(back, table);
        assert_eq!(column_prediction("B1_low", 2), Some(-1.0));
        assert_eq!(column_prediction("B0.5_low", 3), Some(-1.0));
        assert_eq!(column_prediction("B1_high", 2), None);
        assert_eq!(column_prediction("grad_c_minus", 2), Some(-1.0));
        assert!(SeriesTable::from_csv("x,y\n1,2\n").is_err());
        assert!(SeriesTable::from_csv("t,y\n1\n").is_err());
    }

    #[test]
    fn experiment_is_deterministic_with_monotone_suprema() {
        let cfg = small_config();
        let run = |c: &RunConfig| decay_experiment(c, None, |_, _| Ok(())).unwrap();
        let a = run(&cfg);
        let b = run(&cfg);
        assert_eq!(a.records, b.records);
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert_eq!(a.records.len(), 41);
        for w in a.records.windows(2) {
            assert!(w[1].d.low >= w[0].d.low && w[1].d.high >= w[0].d.high && w[1].d.gradient >= w[0].d.gradient);
            assert!(w[1].x_acc() >= w[0].x_acc());
        }
        assert!(a.report.fits.iter().all(|f| f.flagged));
        assert!(a.report.t_cut > 0.0 && a.report.tail.is_none());
        assert!(a.report.mass_drift.iter().all(|d| d.abs() < 1e-12));
        assert!((a.report.data_norm / cfg.data.amplitude - 1.0).abs() < 1e-12);
        assert!(a.report.d0 > 0.0);
        let (q_min, _) = block_range(&cfg.grid().unwrap());
        assert!(q_min < 0);
    }

    #[test]
    fn halving_the_cadence_barely_moves_x() {
        let mut cfg = small_config();
        cfg.integrator.dt = 0.25;
        cfg.integrator.record_every = 0.25;
        let fine = decay_experiment(&cfg, None, |_, _| Ok(())).unwrap();
        cfg.integrator.record_every = 0.5;
        let coarse = decay_experiment(&cfg, None, |_, _| Ok(())).unwrap();
        let (xf, xc) = (fine.records.last().unwrap().x, coarse.records.last().unwrap().x);
        assert!((xf.total() - xc.total()).abs() < 0.01 * xf.total());
        // components below 1e-6 of X are transient-dominated round-off for the trapezoid rule
        let floor = 1e-6 * xf.total();
        for (a, b) in [(xf.low_int, xc.low_int), (xf.high_u_int, xc.high_u_int), (xf.high_c_int, xc.high_c_int)] {
            assert!((a - b).abs() <= 0.01 * a.max(floor), "{a} vs {b}");
        }
    }

    #[test]
    fn observer_errors_keep_partial_records() {
        let cfg = small_config();
        let err = decay_experiment(&cfg, None, |s, _| {
            if s.time >= 2.0 {
                Err(SolverError::TimeStep(-1.0))
            } else {
                Ok(())
            }
        })
        .err()
        .unwrap();
        assert_eq!(err.records.len(), 5);
        assert!(err.last.is_some());
    }
}
