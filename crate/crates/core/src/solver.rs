//! Pseudo-spectral integrator for the perturbation system on a periodic box.
//!
//! The linear part is advanced exactly per Fourier mode (exponential
//! integrator); the source terms are evaluated in physical space and
//! dealiased with the grid's mask.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Matrix4, SMatrix};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closure::{
    equilibrium_coefficients, ClosureError, ClosurePath, CoefficientEvaluator, EquilibriumCoefficients,
    NonlinearCoefficients, PressureLaws, Viscosities,
};
use crate::grid::{Grid, GridError, Spectral, Spectrum};

type C = Complex64;

/// Abort when `min(1 + c±)` drops below this.
pub const POSITIVITY_FLOOR: f64 = 0.05;
/// Advective CFL limit `max|u|·dt/Δx`.
pub const CFL_LIMIT: f64 = 0.5;
/// Maximum number of step halvings tried when the CFL limit is exceeded.
pub const MAX_HALVINGS: u32 = 8;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("closure failed at grid point {index} (c+ = {c_plus}, c- = {c_minus}): {source}")]
    Closure {
        index: usize,
        c_plus: f64,
        c_minus: f64,
        #[source]
        source: ClosureError,
    },
    #[error(transparent)]
    Coefficients(#[from] ClosureError),
    #[error("positivity violated at t = {time}: min(1 + c) = {min} at grid point {index}")]
    Positivity { time: f64, min: f64, index: usize },
    #[error("CFL number {cfl} exceeds {limit} even after {halvings} halvings of dt = {dt}")]
    Cfl { cfl: f64, limit: f64, dt: f64, halvings: u32 },
    #[error("state shape does not match the grid: {0}")]
    Shape(String),
    #[error("invalid time step {0}")]
    TimeStep(f64),
    #[error("non-finite value in state at t = {0}")]
    NonFinite(f64),
}

/// Perturbation fields `c± = R± − 1` and velocities `u±`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub c_plus: Vec<f64>,
    pub u_plus: Vec<Vec<f64>>,
    pub c_minus: Vec<f64>,
    pub u_minus: Vec<Vec<f64>>,
    pub time: f64,
}

impl State {
    pub fn zeros(grid: &Grid) -> Self {
        let len = grid.len();
        Self {
            c_plus: vec![0.0; len],
            u_plus: vec![vec![0.0; len]; grid.dims()],
            c_minus: vec![0.0; len],
            u_minus: vec![vec![0.0; len]; grid.dims()],
            time: 0.0,
        }
    }

    pub fn dims(&self) -> usize {
        self.u_plus.len()
    }

    pub fn len(&self) -> usize {
        self.c_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_plus.is_empty()
    }

    /// Fields in the fixed order `c⁺, u⁺₁..u⁺_N, c⁻, u⁻₁..u⁻_N`.
    pub fn fields(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.c_plus];
        out.extend(self.u_plus.iter().map(|v| v.as_slice()));
        out.push(&self.c_minus);
        out.extend(self.u_minus.iter().map(|v| v.as_slice()));
        out
    }

    pub fn from_fields(mut fields: Vec<Vec<f64>>, time: f64) -> Result<Self, SolverError> {
        if fields.len() < 4 || !fields.len().is_multiple_of(2) {
            return Err(SolverError::Shape(format!("{} fields", fields.len())));
        }
        let n = fields.len() / 2 - 1;
        let minus: Vec<Vec<f64>> = fields.split_off(n + 1);
        let mut plus = fields.into_iter();
        let c_plus = plus.next().unwrap_or_default();
        let u_plus: Vec<Vec<f64>> = plus.collect();
        let mut minus = minus.into_iter();
        let c_minus = minus.next().unwrap_or_default();
        let u_minus: Vec<Vec<f64>> = minus.collect();
        let s = Self {
            c_plus,
            u_plus,
            c_minus,
            u_minus,
            time,
        };
        let len = s.len();
        if s.fields().iter().any(|f| f.len() != len) {
            return Err(SolverError::Shape("fields of unequal length".into()));
        }
        Ok(s)
    }

    pub fn check_shape(&self, grid: &Grid) -> Result<(), SolverError> {
        if self.dims() != grid.dims() || self.u_minus.len() != grid.dims() {
            return Err(SolverError::Shape(format!("{} velocity components for a {}-d grid", self.dims(), grid.dims())));
        }
        if self.fields().iter().any(|f| f.len() != grid.len()) {
            return Err(SolverError::Shape(format!("fields must have {} points", grid.len())));
        }
        Ok(())
    }

    /// The same state with the two phases exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            c_plus: self.c_minus.clone(),
            u_plus: self.u_minus.clone(),
            c_minus: self.c_plus.clone(),
            u_minus: self.u_plus.clone(),
            time: self.time,
        }
    }

    /// `(min(1 + c), grid index)` over both phases.
    pub fn min_density(&self) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for c in [&self.c_plus, &self.c_minus] {
            for (i, v) in c.iter().enumerate() {
                if 1.0 + v < best.0 {
                    best = (1.0 + v, i);
                }
            }
        }
        best
    }

    pub fn max_speed(&self) -> f64 {
        let n = self.len();
        let mut m: f64 = 0.0;
        for u in [&self.u_plus, &self.u_minus] {
            for i in 0..n {
                let s: f64 = u.iter().map(|comp| comp[i] * comp[i]).sum();
                m = m.max(s.sqrt());
            }
        }
        m
    }

    /// `(∫R⁺, ∫R⁻)` with `R± = 1 + c±`, summed in index order.
    pub fn masses(&self, grid: &Grid) -> (f64, f64) {
        let dv = grid.volume() / grid.len() as f64;
        let f = |c: &[f64]| c.iter().fold(0.0, |acc, v| acc + (1.0 + v)) * dv;
        (f(&self.c_plus), f(&self.c_minus))
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|f| f.iter().all(|v| v.is_finite()))
    }
}

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Exponential Euler.
    Imex1,
    /// Second-order exponential Runge-Kutta (midpoint nonlinear evaluation).
    Imex2,
    /// Classical fourth-order Runge-Kutta on the full right-hand side.
    Rk4Oracle,
}

impl Scheme {
    pub fn order(self) -> u32 {
        match self {
            Scheme::Imex1 => 1,
            Scheme::Imex2 => 2,
            Scheme::Rk4Oracle => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "imex1" => Some(Scheme::Imex1),
            "imex2" => Some(Scheme::Imex2),
            "rk4-oracle" => Some(Scheme::Rk4Oracle),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Imex1 => "imex1",
            Scheme::Imex2 => "imex2",
            Scheme::Rk4Oracle => "rk4-oracle",
        }
    }
}

/// Physical parameters and discretisation shared by every step.
pub struct Model {
    spectral: Spectral,
    laws: PressureLaws,
    visc: Viscosities,
    coeffs: EquilibriumCoefficients,
    evaluator: CoefficientEvaluator,
    /// `∂ρ⁺/∂R⁺`, `∂ρ⁺/∂R⁻` at equilibrium, for warm-starting the root finder.
    warm: [f64; 3],
    nonlinear: bool,
}

impl Model {
    pub fn new(grid: &Grid, laws: PressureLaws, visc: Viscosities, closure_tol: f64) -> Result<Self, SolverError> {
        visc.validate()?;
        let coeffs = equilibrium_coefficients(&laws, &visc)?;
        let evaluator = CoefficientEvaluator::new(laws, closure_tol, ClosurePath::Auto)?;
        let eq = *evaluator.equilibrium();
        let scale = eq.c2 / eq.s2_plus;
        Ok(Self {
            spectral: Spectral::new(grid),
            laws,
            visc,
            coeffs,
            evaluator,
            warm: [eq.rho_plus, scale * eq.rho_minus, scale * eq.rho_plus],
            nonlinear: true,
        })
    }

    /// Drop the source terms (pure linear evolution).
    pub fn linear_only(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn is_nonlinear(&self) -> bool {
        self.nonlinear
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn grid(&self) -> &Grid {
        self.spectral.grid()
    }

    pub fn coeffs(&self) -> &EquilibriumCoefficients {
        &self.coeffs
    }

    pub fn laws(&self) -> &PressureLaws {
        &self.laws
    }

    pub fn viscosities(&self) -> &Viscosities {
        &self.visc
    }

    fn dims(&self) -> usize {
        self.grid().dims()
    }

    /// Forward transform of every field, dealiased.
    pub fn to_spectral(&self, state: &State) -> Vec<Spectrum> {
        let mut out = self.spectral.forward_many(&state.fields());
        for s in out.iter_mut() {
            self.spectral.dealias_in_place(s);
        }
        out
    }

    pub fn from_spectral(&self, spec: &[Spectrum], time: f64) -> Result<State, SolverError> {
        let refs: Vec<&[C]> = spec.iter().map(|s| s.as_slice()).collect();
        let fields = self.spectral.inverse_many(&refs);
        State::from_fields(fields, time)
    }

    fn coefficients(&self, cp: &[f64], cm: &[f64]) -> Result<Vec<NonlinearCoefficients>, SolverError> {
        let [rho0, drp, drm] = self.warm;
        let res: Vec<Result<NonlinearCoefficients, ClosureError>> = cp
            .par_iter()
            .zip(cm.par_iter())
            .map(|(&a, &b)| {
                let guess = rho0 + drp * a + drm * b;
                self.evaluator.evaluate_with_guess(a, b, Some(guess)).map(|r| r.0)
            })
            .collect();
        res.into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|source| SolverError::Closure {
                    index: i,
                    c_plus: cp[i],
                    c_minus: cm[i],
                    source,
                })
            })
            .collect()
    }

    /// Dealiased spectra of `(H₁, H₂, H₃, H₄)` in the field order.
    pub fn nonlinear_spectra(&self, u_hat: &[Spectrum]) -> Result<Vec<Spectrum>, SolverError> {
        let n = self.dims();
        let sp = &self.spectral;
        if !self.nonlinear {
            return Ok(vec![vec![C::new(0.0, 0.0); sp.len()]; 2 * n + 2]);
        }
        // per phase: c, ∂_j c, u_i, ∂_j u_i, Δu_i, ∂_i div u
        let mut jobs: Vec<Spectrum> = Vec::new();
        for p in 0..2 {
            let base = p * (n + 1);
            let c = &u_hat[base];
            jobs.push(c.clone());
            for j in 0..n {
                jobs.push(sp.derivative(c, j));
            }
            for i in 0..n {
                jobs.push(u_hat[base + 1 + i].clone());
            }
            for i in 0..n {
                for j in 0..n {
                    jobs.push(sp.derivative(&u_hat[base + 1 + i], j));
                }
            }
            for i in 0..n {
                jobs.push(sp.laplacian(&u_hat[base + 1 + i]));
            }
            for i in 0..n {
                let mut acc = vec![C::new(0.0, 0.0); sp.len()];
                for j in 0..n {
                    for (a, v) in acc.iter_mut().zip(sp.second_derivative(&u_hat[base + 1 + j], i, j)) {
                        *a += v;
                    }
                }
                jobs.push(acc);
            }
        }
        let refs: Vec<&[C]> = jobs.iter().map(|s| s.as_slice()).collect();
        let phys = sp.inverse_many(&refs);
        let per = 1 + n + n + n * n + n + n;
        let view = |p: usize| PhaseFields {
            c: &phys[p * per],
            dc: &phys[p * per + 1..p * per + 1 + n],
            u: &phys[p * per + 1 + n..p * per + 1 + 2 * n],
            du: &phys[p * per + 1 + 2 * n..p * per + 1 + 2 * n + n * n],
            lap: &phys[p * per + 1 + 2 * n + n * n..p * per + 1 + 3 * n + n * n],
            gdiv: &phys[p * per + 1 + 3 * n + n * n..(p + 1) * per],
        };
        let (plus, minus) = (view(0), view(1));
        let coeffs = self.coefficients(plus.c, minus.c)?;

        // physical products: c u_j for the mass fluxes, then the momentum sources
        let mut products: Vec<Vec<f64>> = Vec::with_capacity(4 * n);
        for ph in [&plus, &minus] {
            for j in 0..n {
                products.push(ph.c.iter().zip(&ph.u[j]).map(|(a, b)| a * b).collect());
            }
        }
        for (p, (own, other)) in [(&plus, &minus), (&minus, &plus)].into_iter().enumerate() {
            let (mu, lambda) = if p == 0 {
                (self.visc.mu_plus, self.visc.lambda_plus)
            } else {
                (self.visc.mu_minus, self.visc.lambda_minus)
            };
            for i in 0..n {
                products.push(momentum_source(own, other, &coeffs, p, i, mu, lambda));
            }
        }
        let refs: Vec<&[f64]> = products.iter().map(|f| f.as_slice()).collect();
        let spectra = sp.forward_many(&refs);
        let mut out = Vec::with_capacity(2 * n + 2);
        for p in 0..2 {
            let flux = &spectra[p * n..(p + 1) * n];
            let mut h = sp.divergence(flux);
            for v in h.iter_mut() {
                *v = -*v;
            }
            out.push(h);
            for i in 0..n {
                out.push(spectra[2 * n + p * n + i].clone());
            }
        }
        for s in out.iter_mut() {
            sp.dealias_in_place(s);
        }
        Ok(out)
    }

    /// Physical `(H₁, H₂, H₃, H₄)` in the field order.
    pub fn nonlinear_terms(&self, state: &State) -> Result<Vec<Vec<f64>>, SolverError> {
        state.check_shape(self.grid())?;
        let h = self.nonlinear_spectra(&self.to_spectral(state))?;
        Ok(h.par_iter().map(|s| self.spectral.inverse(s)).collect())
    }

    /// `A(D)Û` mode by mode.
    pub fn linear_action(&self, u_hat: &[Spectrum]) -> Vec<Spectrum> {
        let n = self.dims();
        let sp = &self.spectral;
        let beta = [[self.coeffs.beta1, self.coeffs.beta2], [self.coeffs.beta3, self.coeffs.beta4]];
        let nu1 = [self.coeffs.nu1_plus, self.coeffs.nu1_minus];
        let nu2 = [self.coeffs.nu2_plus, self.coeffs.nu2_minus];
        let mut out = Vec::with_capacity(2 * n + 2);
        let grads: Vec<Vec<Spectrum>> = (0..2)
            .map(|p| (0..n).map(|i| sp.derivative(&u_hat[p * (n + 1)], i)).collect())
            .collect();
        for p in 0..2 {
            let base = p * (n + 1);
            let mut dc = sp.divergence(&u_hat[base + 1..base + 1 + n]);
            for v in dc.iter_mut() {
                *v = -*v;
            }
            out.push(dc);
            for i in 0..n {
                let lap = sp.laplacian(&u_hat[base + 1 + i]);
                let mut gd = vec![C::new(0.0, 0.0); sp.len()];
                for j in 0..n {
                    for (a, v) in gd.iter_mut().zip(sp.second_derivative(&u_hat[base + 1 + j], i, j)) {
                        *a += v;
                    }
                }
                let comp: Spectrum = (0..sp.len())
                    .map(|m| {
                        -(grads[0][i][m] * beta[p][0] + grads[1][i][m] * beta[p][1]) + lap[m] * nu1[p] + gd[m] * nu2[p]
                    })
                    .collect();
                out.push(comp);
            }
        }
        for s in out.iter_mut() {
            sp.dealias_in_place(s);
        }
        out
    }

    fn full_rhs(&self, u_hat: &[Spectrum]) -> Result<Vec<Spectrum>, SolverError> {
        let mut lin = self.linear_action(u_hat);
        let h = self.nonlinear_spectra(u_hat)?;
        for (l, hh) in lin.iter_mut().zip(&h) {
            for (a, b) in l.iter_mut().zip(hh) {
                *a += b;
            }
        }
        Ok(lin)
    }

    /// Physical time derivative of the state.
    pub fn rhs(&self, state: &State) -> Result<Vec<Vec<f64>>, SolverError> {
        state.check_shape(self.grid())?;
        let r = self.full_rhs(&self.to_spectral(state))?;
        Ok(r.par_iter().map(|s| self.spectral.inverse(s)).collect())
    }
}

struct PhaseFields<'a> {
    c: &'a [f64],
    dc: &'a [Vec<f64>],
    u: &'a [Vec<f64>],
    /// `du[i*n + j] = ∂_j u_i`
    du: &'a [Vec<f64>],
    lap: &'a [Vec<f64>],
    gdiv: &'a [Vec<f64>],
}

/// Component `i` of the momentum source of phase `p` (0 = +, 1 = −).
fn momentum_source(
    own: &PhaseFields,
    other: &PhaseFields,
    coeffs: &[NonlinearCoefficients],
    p: usize,
    i: usize,
    mu: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = own.u.len();
    (0..own.c.len())
        .map(|x| {
            let k = &coeffs[x];
            // g on the own density gradient, g̃ on the other; h/k weight own/other gradients
            let (g_own, w_own, w_other, l) = if p == 0 {
                (k.g_plus, k.h_plus, k.k_plus, k.l_plus)
            } else {
                (k.g_minus, k.k_minus, k.h_minus, k.l_minus)
            };
            let mut div = 0.0;
            for j in 0..n {
                div += own.du[j * n + j][x];
            }
            let mut v = -g_own * own.dc[i][x] - k.g_tilde * other.dc[i][x];
            for j in 0..n {
                v -= own.u[j][x] * own.du[i * n + j][x];
            }
            for j in 0..n {
                let grad_mix = w_own * own.dc[j][x] + w_other * other.dc[j][x];
                v += mu * grad_mix * (own.du[i * n + j][x] + own.du[j * n + i][x]);
            }
            v += lambda * (w_own * own.dc[i][x] + w_other * other.dc[i][x]) * div;
            v += mu * l * own.lap[i][x] + (mu + lambda) * l * own.gdiv[i][x];
            v
        })
        .collect()
}

/// `(E, φ₁, φ₂)` of `hA(ξ)` restricted to one radius: a 4×4 longitudinal block
/// in `(ĉ⁺, ω·û⁺, ĉ⁻, ω·û⁻)` and scalar heat factors on the transverse velocity.
#[derive(Debug, Clone, Copy)]
struct ModeOps {
    long: [Matrix4<C>; 3],
    trans: [[f64; 2]; 3],
}

fn phi_scalars(z: f64) -> [f64; 3] {
    let e = z.exp();
    if z.abs() < 1e-3 {
        let p1 = 1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0;
        let p2 = 0.5 + z / 6.0 + z * z / 24.0 + z * z * z / 120.0;
        [e, p1, p2]
    } else {
        let p1 = z.exp_m1() / z;
        [e, p1, (p1 - 1.0) / z]
    }
}

fn mode_ops(r2: f64, h: f64, coeffs: &EquilibriumCoefficients) -> ModeOps {
    let r = r2.sqrt();
    let zero = C::new(0.0, 0.0);
    let mi = |x: f64| C::new(0.0, -x);
    let g = Matrix4::new(
        zero, mi(r), zero, zero,
        mi(r * coeffs.beta1), C::new(-coeffs.nu_bar_plus() * r2, 0.0), mi(r * coeffs.beta2), zero,
        zero, zero, zero, mi(r),
        mi(r * coeffs.beta3), zero, mi(r * coeffs.beta4), C::new(-coeffs.nu_bar_minus() * r2, 0.0),
    ) * C::new(h, 0.0);
    let mut aug = SMatrix::<C, 12, 12>::zeros();
    aug.fixed_view_mut::<4, 4>(0, 0).copy_from(&g);
    for d in 0..4 {
        aug[(d, 4 + d)] = C::new(1.0, 0.0);
        aug[(4 + d, 8 + d)] = C::new(1.0, 0.0);
    }
    let ex = aug.exp();
    let long = [
        ex.fixed_view::<4, 4>(0, 0).into_owned(),
        ex.fixed_view::<4, 4>(0, 4).into_owned(),
        ex.fixed_view::<4, 4>(0, 8).into_owned(),
    ];
    let tp = phi_scalars(-coeffs.nu1_plus * r2 * h);
    let tm = phi_scalars(-coeffs.nu1_minus * r2 * h);
    ModeOps {
        long,
        trans: [[tp[0], tm[0]], [tp[1], tm[1]], [tp[2], tm[2]]],
    }
}

/// Propagators for one step size, shared between modes of equal `|k|²`.
struct PropagatorTable {
    ops: Vec<ModeOps>,
    /// Index into `ops` per mode; `u32::MAX` for removed (dealiased) modes.
    index: Vec<u32>,
}

impl PropagatorTable {
    fn new(spectral: &Spectral, h: f64, coeffs: &EquilibriumCoefficients) -> Self {
        let mut keys: HashMap<u64, u32> = HashMap::new();
        let mut radii: Vec<f64> = Vec::new();
        let index = spectral
            .k2()
            .iter()
            .zip(spectral.keep())
            .map(|(&k2, &keep)| {
                if !keep {
                    return u32::MAX;
                }
                *keys.entry(k2.to_bits()).or_insert_with(|| {
                    radii.push(k2);
                    (radii.len() - 1) as u32
                })
            })
            .collect();
        let ops = radii.par_iter().map(|&k2| mode_ops(k2, h, coeffs)).collect();
        Self { ops, index }
    }
}

/// One propagator applied to one mode: `Σ_k F_k x_k` for `(F_k, x_k)` pairs.
fn apply_mode(
    terms: &[(usize, f64, &[Spectrum])],
    op: &ModeOps,
    m: usize,
    omega: &[f64],
    n: usize,
    out: &mut [C],
) {
    for o in out.iter_mut() {
        *o = C::new(0.0, 0.0);
    }
    for &(which, scale, x) in terms {
        let mut long = nalgebra::Vector4::<C>::zeros();
        let mut trans = [[C::new(0.0, 0.0); 3]; 2];
        for p in 0..2 {
            let base = p * (n + 1);
            let mut w = C::new(0.0, 0.0);
            for j in 0..n {
                w += x[base + 1 + j][m] * omega[j];
            }
            long[2 * p] = x[base][m];
            long[2 * p + 1] = w;
            for j in 0..n {
                trans[p][j] = x[base + 1 + j][m] - w * omega[j];
            }
        }
        let y = op.long[which] * long;
        for p in 0..2 {
            let base = p * (n + 1);
            let t = op.trans[which][p];
            out[base] += y[2 * p] * scale;
            for j in 0..n {
                out[base + 1 + j] += (y[2 * p + 1] * omega[j] + trans[p][j] * t) * scale;
            }
        }
    }
}

/// Scheme, step size bookkeeping and propagator caches on top of a [`Model`].
pub struct Integrator {
    model: Model,
    scheme: Scheme,
    tables: HashMap<u64, Arc<PropagatorTable>>,
}

impl Integrator {
    pub fn new(model: Model, scheme: Scheme) -> Self {
        Self {
            model,
            scheme,
            tables: HashMap::new(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    fn table(&mut self, h: f64) -> Arc<PropagatorTable> {
        let key = h.to_bits();
        if let Some(t) = self.tables.get(&key) {
            return t.clone();
        }
        let t = Arc::new(PropagatorTable::new(&self.model.spectral, h, &self.model.coeffs));
        self.tables.insert(key, t.clone());
        t
    }

    /// `Σ_k scale_k · F_k(h) x_k` over all modes, where `F ∈ {E, φ₁, φ₂}`.
    fn propagate(&self, table: &PropagatorTable, terms: &[(usize, f64, &[Spectrum])]) -> Vec<Spectrum> {
        let sp = &self.model.spectral;
        let n = self.model.dims();
        let size = 2 * n + 2;
        let len = sp.len();
        let k: Vec<&[f64]> = (0..n).map(|d| sp.k(d)).collect();
        let k2 = sp.k2();
        let per_mode: Vec<[C; 8]> = (0..len)
            .into_par_iter()
            .map(|m| {
                let mut out = [C::new(0.0, 0.0); 8];
                let idx = table.index[m];
                if idx == u32::MAX {
                    return out;
                }
                let r = k2[m].sqrt();
                let mut omega = [0.0; 3];
                if r > 0.0 {
                    for d in 0..n {
                        omega[d] = k[d][m] / r;
                    }
                }
                apply_mode(terms, &table.ops[idx as usize], m, &omega[..n], n, &mut out[..size]);
                out
            })
            .collect();
        (0..size).map(|f| per_mode.iter().map(|v| v[f]).collect()).collect()
    }

    fn advance(&mut self, u: &[Spectrum], h: f64) -> Result<Vec<Spectrum>, SolverError> {
        match self.scheme {
            Scheme::Imex1 => {
                let tab = self.table(h);
                let n0 = self.model.nonlinear_spectra(u)?;
                Ok(self.propagate(&tab, &[(0, 1.0, u), (1, h, &n0)]))
            }
            Scheme::Imex2 => {
                let full = self.table(h);
                let half = self.table(0.5 * h);
                let n0 = self.model.nonlinear_spectra(u)?;
                let a = self.propagate(&half, &[(0, 1.0, u), (1, 0.5 * h, &n0)]);
                let na = self.model.nonlinear_spectra(&a)?;
                let diff: Vec<Spectrum> = na
                    .iter()
                    .zip(&n0)
                    .map(|(x, y)| x.iter().zip(y).map(|(a, b)| a - b).collect())
                    .collect();
                // E u + h φ₁ N(u) + 2h φ₂ (N(a) − N(u))
                Ok(self.propagate(&full, &[(0, 1.0, u), (1, h, &n0), (2, 2.0 * h, &diff)]))
            }
            Scheme::Rk4Oracle => {
                let m = &self.model;
                let axpy = |x: &[Spectrum], a: f64, y: &[Spectrum]| -> Vec<Spectrum> {
                    x.iter().zip(y).map(|(p, q)| p.iter().zip(q).map(|(s, t)| s + t * a).collect()).collect()
                };
                let k1 = m.full_rhs(u)?;
                let k2 = m.full_rhs(&axpy(u, 0.5 * h, &k1))?;
                let k3 = m.full_rhs(&axpy(u, 0.5 * h, &k2))?;
                let k4 = m.full_rhs(&axpy(u, h, &k3))?;
                let mut out = u.to_vec();
                for f in 0..out.len() {
                    for i in 0..out[f].len() {
                        out[f][i] += (k1[f][i] + (k2[f][i] + k3[f][i]) * 2.0 + k4[f][i]) * (h / 6.0);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Advance `state` by `dt`, subdividing when the advective CFL limit would be exceeded.
    pub fn imex_step(&mut self, state: &State, dt: f64) -> Result<State, SolverError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SolverError::TimeStep(dt));
        }
        state.check_shape(self.model.grid())?;
        let dx = self.model.grid().min_spacing();
        let speed = state.max_speed();
        let mut halvings = 0;
        while speed * dt / (1u64 << halvings) as f64 / dx >= CFL_LIMIT {
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(SolverError::Cfl {
                    cfl: speed * dt / dx,
                    limit: CFL_LIMIT,
                    dt,
                    halvings: MAX_HALVINGS,
                });
            }
        }
        let sub = 1u64 << halvings;
        let h = dt / sub as f64;
        let mut u = self.model.to_spectral(state);
        for _ in 0..sub {
            u = self.advance(&u, h)?;
            for s in u.iter_mut() {
                self.model.spectral.dealias_in_place(s);
            }
        }
        let next = self.model.from_spectral(&u, state.time + dt)?;
        if !next.is_finite() {
            return Err(SolverError::NonFinite(next.time));
        }
        let (min, index) = next.min_density();
        if min < POSITIVITY_FLOOR {
            return Err(SolverError::Positivity {
                time: next.time,
                min,
                index,
            });
        }
        Ok(next)
    }

    /// Advance from `state.time` to `t_end` in steps of `dt`, calling `record`
    /// at the start and every `record_every` steps. Times are `k·dt` for the
    /// integer step counter `k`, so a restart from any recorded state follows
    /// the same trajectory bit for bit.
    pub fn run<F>(&mut self, state: State, dt: f64, t_end: f64, record_every: u64, mut record: F) -> Result<State, RunError>
    where
        F: FnMut(&State) -> Result<(), SolverError>,
    {
        let fail = |source, last: &State| RunError {
            source,
            last: Box::new(last.clone()),
        };
        if !(dt > 0.0 && dt.is_finite()) || record_every == 0 {
            return Err(fail(SolverError::TimeStep(dt), &state));
        }
        let mut k = (state.time / dt).round() as u64;
        let k_end = (t_end / dt).round() as u64;
        let mut cur = state;
        cur.time = k as f64 * dt;
        record(&cur).map_err(|e| fail(e, &cur))?;
        while k < k_end {
            let mut next = self.imex_step(&cur, dt).map_err(|e| fail(e, &cur))?;
            k += 1;
            next.time = k as f64 * dt;
            cur = next;
            if k.is_multiple_of(record_every) || k == k_end {
                record(&cur).map_err(|e| fail(e, &cur))?;
            }
        }
        Ok(cur)
    }
}

/// A failed run together with the last good state.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct RunError {
    #[source]
    pub source: SolverError,
    pub last: Box<State>,
}
