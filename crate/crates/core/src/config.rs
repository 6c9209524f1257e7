//! Run configuration: TOML sections with defaults, `section.key=value`
//! overrides and aggregated validation.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::closure::{ClosurePath, PressureLaws, Viscosities};
use crate::grid::Grid;
use crate::lpbesov::block_range;
use crate::solver::Scheme;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub dims: usize,
    /// Points per axis (a power of two).
    pub points: usize,
    /// Box length per axis.
    pub length: f64,
    /// Fraction of the resolved wavenumbers kept by the dealiasing mask.
    pub dealias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluidConfig {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosureConfig {
    pub tol: f64,
    /// `auto` or `root-find`.
    pub path: String,
    /// Mixture state used by the `closure` subcommand.
    pub r_plus: f64,
    pub r_minus: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    /// Diagnostics cadence in time units (a multiple of `dt`).
    pub record_every: f64,
    /// Checkpoint cadence in time units; `0` writes only the final state.
    pub checkpoint_every: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    /// One random phase per wavenumber, shared by all components.
    Shared,
    /// Independent phases per component.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub amplitude: f64,
    pub seed: u64,
    /// `|Û₀|` is constant on `|ξ| ≤ cutoff` and zero above.
    pub cutoff: f64,
    /// Weights of `c⁺, u⁺, c⁻, u⁻`.
    pub weights: [f64; 4],
    pub phases: PhaseMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsConfig {
    pub s_list: Vec<f64>,
    /// Low/high frequency threshold block.
    pub q0: i32,
    /// `ε` in the high-frequency weight exponent and the lower end of the low-frequency `s` range.
    pub epsilon: f64,
    /// `t_cut = κ / (c0 k_min²)`.
    pub kappa: f64,
    /// Number of `s` values sampled for the low-frequency supremum.
    pub d_samples: usize,
    pub fit_window: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinsymConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub radii: usize,
    /// Regularity index of the decay table.
    pub s: f64,
    pub q_min: i32,
    pub q_max: i32,
    pub t_min: f64,
    pub t_max: f64,
    pub t_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSection {
    /// Worker threads; `0` uses every core.
    pub threads: usize,
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub fluid: FluidConfig,
    pub closure: ClosureConfig,
    pub integrator: IntegratorConfig,
    pub data: DataConfig,
    pub diagnostics: DiagnosticsConfig,
    pub linsym: LinsymConfig,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig {
                dims: 2,
                points: 512,
                length: 2.0 * PI * 64.0,
                dealias: 2.0 / 3.0,
            },
            fluid: FluidConfig {
                gamma_plus: 2.0,
                gamma_minus: 2.0,
                mu_plus: 1.0,
                mu_minus: 1.0,
                lambda_plus: 0.0,
                lambda_minus: 0.0,
            },
            closure: ClosureConfig {
                tol: 1e-12,
                path: "auto".into(),
                r_plus: 1.0,
                r_minus: 1.0,
            },
            integrator: IntegratorConfig {
                scheme: Scheme::Imex1,
                dt: 0.5,
                t_end: 500.0,
                record_every: 0.5,
                checkpoint_every: 0.0,
            },
            data: DataConfig {
                amplitude: 1e-3,
                seed: 0,
                cutoff: 1.0,
                weights: [1.0; 4],
                phases: PhaseMode::Shared,
            },
            diagnostics: DiagnosticsConfig {
                s_list: vec![0.0, 1.0],
                q0: 0,
                epsilon: 0.01,
                kappa: 1.0,
                d_samples: 16,
                fit_window: [10.0, 500.0],
            },
            linsym: LinsymConfig {
                r_min: 1e-3,
                r_max: 1e3,
                radii: 400,
                s: 0.0,
                q_min: -6,
                q_max: 0,
                t_min: 1.0,
                t_max: 1e4,
                t_count: 41,
            },
            run: RunSection {
                threads: 0,
                output_dir: "runs".into(),
            },
        }
    }
}

fn float(v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(format!("expected a number, found {}", other.type_str())),
    }
}

fn integer(v: &Value) -> Result<i64, String> {
    match v {
        Value::Integer(i) => Ok(*i),
        other => Err(format!("expected an integer, found {}", other.type_str())),
    }
}

fn count(v: &Value) -> Result<usize, String> {
    let i = integer(v)?;
    usize::try_from(i).map_err(|_| format!("expected a non-negative integer, found {i}"))
}

fn block(v: &Value) -> Result<i32, String> {
    let i = integer(v)?;
    i32::try_from(i).map_err(|_| format!("{i} is out of range"))
}

fn string(v: &Value) -> Result<String, String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        other => Err(format!("expected a string, found {}", other.type_str())),
    }
}

fn floats(v: &Value) -> Result<Vec<f64>, String> {
    match v {
        Value::Array(a) => a.iter().map(float).collect(),
        other => Err(format!("expected an array of numbers, found {}", other.type_str())),
    }
}

fn fixed<const K: usize>(v: &Value) -> Result<[f64; K], String> {
    let xs = floats(v)?;
    xs.try_into().map_err(|xs: Vec<f64>| format!("expected {K} numbers, found {}", xs.len()))
}

fn multiple_of(x: f64, dt: f64) -> bool {
    let k = x / dt;
    (k - k.round()).abs() < 1e-9 && k.round() >= 1.0
}

impl RunConfig {
    fn apply(&mut self, section: &str, key: &str, v: &Value) -> Result<(), String> {
        match (section, key) {
            ("grid", "dims") => self.grid.dims = count(v)?,
            ("grid", "points") => self.grid.points = count(v)?,
            ("grid", "length") => self.grid.length = float(v)?,
            ("grid", "dealias") => self.grid.dealias = float(v)?,
            ("fluid", "gamma_plus") => self.fluid.gamma_plus = float(v)?,
            ("fluid", "gamma_minus") => self.fluid.gamma_minus = float(v)?,
            ("fluid", "mu_plus") => self.fluid.mu_plus = float(v)?,
            ("fluid", "mu_minus") => self.fluid.mu_minus = float(v)?,
            ("fluid", "lambda_plus") => self.fluid.lambda_plus = float(v)?,
            ("fluid", "lambda_minus") => self.fluid.lambda_minus = float(v)?,
            ("closure", "tol") => self.closure.tol = float(v)?,
            ("closure", "path") => self.closure.path = string(v)?,
            ("closure", "r_plus") => self.closure.r_plus = float(v)?,
            ("closure", "r_minus") => self.closure.r_minus = float(v)?,
            ("integrator", "scheme") => {
                let s = string(v)?;
                self.integrator.scheme =
                    Scheme::parse(&s).ok_or_else(|| format!("unknown scheme {s:?} (imex1, imex2, rk4-oracle)"))?
            }
            ("integrator", "dt") => self.integrator.dt = float(v)?,
            ("integrator", "t_end") => self.integrator.t_end = float(v)?,
            ("integrator", "record_every") => self.integrator.record_every = float(v)?,
            ("integrator", "checkpoint_every") => self.integrator.checkpoint_every = float(v)?,
            ("data", "amplitude") => self.data.amplitude = float(v)?,
            ("data", "seed") => {
                let i = integer(v)?;
                self.data.seed = u64::try_from(i).map_err(|_| format!("seed must be non-negative, found {i}"))?
            }
            ("data", "cutoff") => self.data.cutoff = float(v)?,
            ("data", "weights") => self.data.weights = fixed::<4>(v)?,
            ("data", "phases") => {
                self.data.phases = match string(v)?.as_str() {
                    "shared" => PhaseMode::Shared,
                    "independent" => PhaseMode::Independent,
                    s => return Err(format!("unknown phase mode {s:?} (shared, independent)")),
                }
            }
            ("diagnostics", "s_list") => self.diagnostics.s_list = floats(v)?,
            ("diagnostics", "q0") => self.diagnostics.q0 = block(v)?,
            ("diagnostics", "epsilon") => self.diagnostics.epsilon = float(v)?,
            ("diagnostics", "kappa") => self.diagnostics.kappa = float(v)?,
            ("diagnostics", "d_samples") => self.diagnostics.d_samples = count(v)?,
            ("diagnostics", "fit_window") => self.diagnostics.fit_window = fixed::<2>(v)?,
            ("linsym", "r_min") => self.linsym.r_min = float(v)?,
            ("linsym", "r_max") => self.linsym.r_max = float(v)?,
            ("linsym", "radii") => self.linsym.radii = count(v)?,
            ("linsym", "s") => self.linsym.s = float(v)?,
            ("linsym", "q_min") => self.linsym.q_min = block(v)?,
            ("linsym", "q_max") => self.linsym.q_max = block(v)?,
            ("linsym", "t_min") => self.linsym.t_min = float(v)?,
            ("linsym", "t_max") => self.linsym.t_max = float(v)?,
            ("linsym", "t_count") => self.linsym.t_count = count(v)?,
            ("run", "threads") => self.run.threads = count(v)?,
            ("run", "output_dir") => self.run.output_dir = string(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Apply every key of `table`, collecting errors instead of stopping at the first.
    fn apply_table(&mut self, table: &Table, errors: &mut Vec<String>) {
        for (section, body) in table {
            let Value::Table(body) = body else {
                errors.push(format!("{section}: expected a [section] table"));
                continue;
            };
            if !SECTIONS.contains(&section.as_str()) {
                errors.push(format!("{section}: unknown section"));
                continue;
            }
            for (key, v) in body {
                if let Err(e) = self.apply(section, key, v) {
                    errors.push(format!("{section}.{key}: {e}"));
                }
            }
        }
    }

    /// Constraint violations, all of them.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        let g = &self.grid;
        check((1..=3).contains(&g.dims), format!("grid.dims must be 1, 2 or 3 (got {})", g.dims));
        check(
            g.points >= 16 && g.points.is_power_of_two(),
            format!("grid.points must be a power of two >= 16 (got {})", g.points),
        );
        check(g.length > 0.0 && g.length.is_finite(), format!("grid.length must be positive (got {})", g.length));
        check(g.dealias > 0.0 && g.dealias <= 1.0, format!("grid.dealias must lie in (0, 1] (got {})", g.dealias));
        let f = &self.fluid;
        if let Err(e) = PressureLaws::new(f.gamma_plus, f.gamma_minus) {
            check(false, format!("fluid: {e}"));
        }
        if let Err(e) = Viscosities::new(f.mu_plus, f.mu_minus, f.lambda_plus, f.lambda_minus) {
            check(false, format!("fluid: {e}"));
        }
        let c = &self.closure;
        check(c.tol > 0.0 && c.tol <= 1e-3, format!("closure.tol must lie in (0, 1e-3] (got {})", c.tol));
        check(
            self.closure_path().is_some(),
            format!("closure.path must be \"auto\" or \"root-find\" (got {:?})", c.path),
        );
        check(
            c.r_plus > 0.0 && c.r_minus > 0.0,
            format!("closure.r_plus and closure.r_minus must be positive (got {}, {})", c.r_plus, c.r_minus),
        );
        let it = &self.integrator;
        check(it.dt > 0.0 && it.dt.is_finite(), format!("integrator.dt must be positive (got {})", it.dt));
        check(it.t_end >= 0.0 && it.t_end.is_finite(), format!("integrator.t_end must be >= 0 (got {})", it.t_end));
        if it.dt > 0.0 {
            check(
                multiple_of(it.record_every, it.dt),
                format!("integrator.record_every must be a positive multiple of dt (got {})", it.record_every),
            );
            check(
                it.checkpoint_every == 0.0 || multiple_of(it.checkpoint_every, it.dt),
                format!("integrator.checkpoint_every must be 0 or a multiple of dt (got {})", it.checkpoint_every),
            );
        }
        let d = &self.data;
        check(d.amplitude >= 0.0 && d.amplitude.is_finite(), format!("data.amplitude must be >= 0 (got {})", d.amplitude));
        check(d.cutoff > 0.0 && d.cutoff.is_finite(), format!("data.cutoff must be positive (got {})", d.cutoff));
        check(
            d.weights.iter().all(|w| *w >= 0.0 && w.is_finite()) && d.weights.iter().any(|w| *w > 0.0),
            format!("data.weights must be non-negative and not all zero (got {:?})", d.weights),
        );
        let dg = &self.diagnostics;
        check(
            !dg.s_list.is_empty() && dg.s_list.iter().all(|s| s.is_finite()),
            "diagnostics.s_list must be a non-empty list of numbers".into(),
        );
        check(dg.epsilon > 0.0 && dg.epsilon < 0.5, format!("diagnostics.epsilon must lie in (0, 0.5) (got {})", dg.epsilon));
        check(dg.kappa > 0.0 && dg.kappa.is_finite(), format!("diagnostics.kappa must be positive (got {})", dg.kappa));
        check(dg.d_samples >= 2, format!("diagnostics.d_samples must be >= 2 (got {})", dg.d_samples));
        let [a, b] = dg.fit_window;
        check(a > 0.0 && b > a && b.is_finite(), format!("diagnostics.fit_window must satisfy 0 < a < b (got [{a}, {b}])"));
        if let Ok(grid) = self.grid() {
            let (q_min, q_max) = block_range(&grid);
            check(
                (q_min..=q_max).contains(&dg.q0),
                format!("diagnostics.q0 = {} lies outside the resolved blocks [{q_min}, {q_max}]", dg.q0),
            );
        }
        let l = &self.linsym;
        check(
            l.r_min > 0.0 && l.r_max > l.r_min && l.r_max.is_finite(),
            format!("linsym radii must satisfy 0 < r_min < r_max (got {}, {})", l.r_min, l.r_max),
        );
        check(l.radii >= 2, format!("linsym.radii must be >= 2 (got {})", l.radii));
        check(l.q_min <= l.q_max, format!("linsym.q_min must not exceed q_max (got {}, {})", l.q_min, l.q_max));
        check(
            l.t_min > 0.0 && l.t_max > l.t_min && l.t_max.is_finite(),
            format!("linsym times must satisfy 0 < t_min < t_max (got {}, {})", l.t_min, l.t_max),
        );
        check(l.t_count >= 2, format!("linsym.t_count must be >= 2 (got {})", l.t_count));
        check(!self.run.output_dir.is_empty(), "run.output_dir must not be empty".into());
        bad
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    /// Parse TOML text, then apply `section.key=value` overrides, then validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut errors = Vec::new();
        for o in overrides {
            match parse_override(o) {
                Ok((section, key, value)) => {
                    let entry = table.entry(section.clone()).or_insert_with(|| Value::Table(Table::new()));
                    match entry {
                        Value::Table(t) => {
                            t.insert(key, value);
                        }
                        _ => errors.push(format!("{section}: expected a [section] table")),
                    }
                }
                Err(e) => errors.push(e),
            }
        }
        let mut cfg = Self::default();
        cfg.apply_table(&table, &mut errors);
        if errors.is_empty() {
            errors = cfg.violations();
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// `path = None` starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// The effective configuration as TOML; parsing it back gives the same config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn grid(&self) -> Result<Grid, crate::grid::GridError> {
        let g = &self.grid;
        Grid::cubic(g.dims, g.points, g.length, g.dealias)
    }

    pub fn laws(&self) -> Result<PressureLaws, crate::closure::ClosureError> {
        PressureLaws::new(self.fluid.gamma_plus, self.fluid.gamma_minus)
    }

    pub fn viscosities(&self) -> Result<Viscosities, crate::closure::ClosureError> {
        let f = &self.fluid;
        Viscosities::new(f.mu_plus, f.mu_minus, f.lambda_plus, f.lambda_minus)
    }

    pub fn closure_path(&self) -> Option<ClosurePath> {
        match self.closure.path.as_str() {
            "auto" => Some(ClosurePath::Auto),
            "root-find" => Some(ClosurePath::RootFind),
            _ => None,
        }
    }

    /// Diagnostics are recorded every this many steps.
    pub fn record_stride(&self) -> u64 {
        (self.integrator.record_every / self.integrator.dt).round() as u64
    }

    pub fn checkpoint_stride(&self) -> Option<u64> {
        (self.integrator.checkpoint_every > 0.0).then(|| (self.integrator.checkpoint_every / self.integrator.dt).round() as u64)
    }
}

const SECTIONS: [&str; 8] = ["grid", "fluid", "closure", "integrator", "data", "diagnostics", "linsym", "run"];

/// Split `section.key=value`; the value is read as a TOML value, falling back to a bare string.
pub fn parse_override(text: &str) -> Result<(String, String, Value), String> {
    let (lhs, rhs) = text.split_once('=').ok_or_else(|| format!("override {text:?} is not of the form section.key=value"))?;
    let (section, key) = lhs
        .trim()
        .split_once('.')
        .ok_or_else(|| format!("override key {:?} is not of the form section.key", lhs.trim()))?;
    let rhs = rhs.trim();
    let value = match format!("v = {rhs}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(rhs.into())),
        Err(_) => Value::String(rhs.into()),
    };
    Ok((section.trim().into(), key.trim().into(), value))
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}
