//! Fourier symbol of the linearised two-fluid system, its Lyapunov form and
//! decay certificates for the associated semigroup.
//!
//! Unknowns per mode are ordered `(ĉ⁺, û⁺₁..û⁺_N, ĉ⁻, û⁻₁..û⁻_N)`.

use nalgebra::{DMatrix, DVector, Matrix4, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::closure::EquilibriumCoefficients;
use crate::lpbesov::AnnulusBump;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinsysError {
    #[error("dimension must be 1, 2 or 3 (got {0})")]
    Dimension(usize),
    #[error("eigenvalue solver failed at |xi| = {0:e}")]
    Eigen(f64),
    #[error("Lyapunov form is not positive definite at |xi| = {radius:e} (min eigenvalue {min_eig:e})")]
    NotDefinite { radius: f64, min_eig: f64 },
    #[error("weight A must be positive (got {0})")]
    Weight(f64),
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("quadrature did not converge on [{a:e}, {b:e}]")]
    Quadrature { a: f64, b: f64 },
    #[error("empty sample set")]
    NoSamples,
}

type C = Complex64;

const I: C = C { re: 0.0, im: 1.0 };

fn c(re: f64) -> C {
    C::new(re, 0.0)
}

fn norm2(xi: &[f64]) -> f64 {
    xi.iter().map(|x| x * x).sum()
}

/// `A(ξ)` with `d/dt Û = A(ξ) Û`.
#[derive(Debug, Clone)]
pub struct SymbolMatrix {
    pub xi: Vec<f64>,
    pub entries: DMatrix<C>,
}

impl SymbolMatrix {
    pub fn dims(&self) -> usize {
        self.xi.len()
    }

    pub fn radius(&self) -> f64 {
        norm2(&self.xi).sqrt()
    }

    /// Eigenvalues from a complex Schur factorisation.
    pub fn eigenvalues(&self) -> Result<Vec<C>, LinsysError> {
        // shifting away from the stationary eigenvalue helps deflation
        let n = self.entries.nrows();
        let shift = c(self.entries.norm());
        let m = &self.entries + DMatrix::<C>::identity(n, n) * shift;
        let schur = nalgebra::Schur::try_new(m, f64::EPSILON, 10_000).ok_or(LinsysError::Eigen(self.radius()))?;
        let (_, t) = schur.unpack();
        Ok((0..n).map(|i| t[(i, i)] - shift).collect())
    }
}

#[inline]
fn c_index(n: usize, phase: usize) -> usize {
    phase * (n + 1)
}

#[inline]
fn u_index(n: usize, phase: usize, j: usize) -> usize {
    phase * (n + 1) + 1 + j
}

pub fn symbol_matrix(xi: &[f64], coeffs: &EquilibriumCoefficients) -> Result<SymbolMatrix, LinsysError> {
    let n = xi.len();
    if !(1..=3).contains(&n) {
        return Err(LinsysError::Dimension(n));
    }
    let k2 = norm2(xi);
    let size = 2 * n + 2;
    let mut a = DMatrix::<C>::zeros(size, size);
    let beta = [[coeffs.beta1, coeffs.beta2], [coeffs.beta3, coeffs.beta4]];
    let nu1 = [coeffs.nu1_plus, coeffs.nu1_minus];
    let nu2 = [coeffs.nu2_plus, coeffs.nu2_minus];
    for p in 0..2 {
        let ci = c_index(n, p);
        for j in 0..n {
            a[(ci, u_index(n, p, j))] = -I * xi[j];
        }
        for i in 0..n {
            let row = u_index(n, p, i);
            a[(row, c_index(n, 0))] = -I * (xi[i] * beta[p][0]);
            a[(row, c_index(n, 1))] = -I * (xi[i] * beta[p][1]);
            for j in 0..n {
                let mut v = -nu2[p] * xi[i] * xi[j];
                if i == j {
                    v -= nu1[p] * k2;
                }
                a[(row, u_index(n, p, j))] = c(v);
            }
        }
    }
    Ok(SymbolMatrix { xi: xi.to_vec(), entries: a })
}

/// Real 4×4 generator of the longitudinal dynamics at radius `r`, in the
/// variables `(y⁺, w⁺, y⁻, w⁻)` where `ĉ± = i y±` and `w± = ω·û±`.
pub fn longitudinal_block(r: f64, coeffs: &EquilibriumCoefficients) -> Matrix4<f64> {
    let (nbp, nbm) = (coeffs.nu_bar_plus(), coeffs.nu_bar_minus());
    Matrix4::new(
        0.0, -r, 0.0, 0.0,
        r * coeffs.beta1, -nbp * r * r, r * coeffs.beta2, 0.0,
        0.0, 0.0, 0.0, -r,
        r * coeffs.beta3, 0.0, r * coeffs.beta4, -nbm * r * r,
    )
}

/// Eigenvalues of `A(ξ)` assembled from the longitudinal block and the transverse heat modes.
pub fn block_eigenvalues(r: f64, n: usize, coeffs: &EquilibriumCoefficients) -> Vec<C> {
    let mut out: Vec<C> = longitudinal_block(r, coeffs).complex_eigenvalues().iter().copied().collect();
    for _ in 1..n {
        out.push(c(-coeffs.nu1_plus * r * r));
        out.push(c(-coeffs.nu1_minus * r * r));
    }
    out
}

/// `exp(t A(ξ)) Û₀`.
pub fn semigroup_apply(
    t: f64,
    xi: &[f64],
    coeffs: &EquilibriumCoefficients,
    u0: &DVector<C>,
) -> Result<DVector<C>, LinsysError> {
    Ok(semigroup_matrix(t, xi, coeffs)? * u0)
}

pub fn semigroup_matrix(t: f64, xi: &[f64], coeffs: &EquilibriumCoefficients) -> Result<DMatrix<C>, LinsysError> {
    if t < 0.0 {
        return Err(LinsysError::NegativeTime(t));
    }
    let a = symbol_matrix(xi, coeffs)?;
    Ok((a.entries * c(t)).exp())
}

/// Spectral norm of a complex matrix.
fn operator_norm(m: &DMatrix<C>) -> f64 {
    m.clone().singular_values().max()
}

/// Which part of the state space a decay bound is asserted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Subspace {
    Full,
    /// Complement of the stationary modes (range of the spectral projector onto `Re λ < 0`).
    Decaying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Low,
    High,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayCertificate {
    pub c0: f64,
    #[serde(rename = "C")]
    pub prefactor: f64,
    pub regime: Regime,
    /// Worst violation found; `≤ 0` for a passing certificate.
    pub residual: f64,
    pub passed: bool,
    /// Number of eigenvalues with `|λ|` at round-off level, summed over samples.
    pub stationary_modes: usize,
    /// Rate measured with the stationary modes excluded.
    pub c0_complement: f64,
}

/// Wavenumber sample set: log-spaced radii times unit directions.
#[derive(Debug, Clone)]
pub struct XiSamples {
    pub radii: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
}

impl XiSamples {
    pub fn log_spaced(n: usize, r_min: f64, r_max: f64, count: usize) -> Result<Self, LinsysError> {
        if !(1..=3).contains(&n) {
            return Err(LinsysError::Dimension(n));
        }
        let radii = if count == 1 {
            vec![r_min]
        } else {
            (0..count)
                .map(|i| (r_min.ln() + (r_max / r_min).ln() * i as f64 / (count - 1) as f64).exp())
                .collect()
        };
        Ok(Self {
            radii,
            directions: default_directions(n),
        })
    }

    /// 400 radii on `[1e-3, 1e3]`.
    pub fn standard(n: usize) -> Result<Self, LinsysError> {
        Self::log_spaced(n, 1e-3, 1e3, 400)
    }

    pub fn dims(&self) -> usize {
        self.directions[0].len()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.radii.len() * self.directions.len());
        for &r in &self.radii {
            for d in &self.directions {
                out.push(d.iter().map(|x| x * r).collect());
            }
        }
        out
    }
}

/// 2 directions in 1D, 8 in 2D, 26 in 3D.
pub fn default_directions(n: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut v = Vec::new();
            for a in -1i32..=1 {
                for b in -1i32..=1 {
                    for d in -1i32..=1 {
                        if a == 0 && b == 0 && d == 0 {
                            continue;
                        }
                        let s = ((a * a + b * b + d * d) as f64).sqrt();
                        v.push(vec![a as f64 / s, b as f64 / s, d as f64 / s]);
                    }
                }
            }
            v
        }
    }
}

/// Eigenvalues with `|λ| ≤ tol·‖A‖` count as stationary.
const STATIONARY_TOL: f64 = 1e-10;

struct SampleSpectrum {
    m: f64,
    max_re: f64,
    max_re_decaying: f64,
    stationary: usize,
}

fn sample_spectrum(xi: &[f64], coeffs: &EquilibriumCoefficients) -> Result<SampleSpectrum, LinsysError> {
    let a = symbol_matrix(xi, coeffs)?;
    let eig = a.eigenvalues()?;
    let scale = a.entries.norm();
    let mut max_re = f64::NEG_INFINITY;
    let mut max_dec = f64::NEG_INFINITY;
    let mut stationary = 0;
    for l in eig {
        max_re = max_re.max(l.re);
        if l.norm() <= STATIONARY_TOL * scale {
            stationary += 1;
        } else {
            max_dec = max_dec.max(l.re);
        }
    }
    Ok(SampleSpectrum {
        m: a.radius().powi(2).min(1.0),
        max_re,
        max_re_decaying: max_dec,
        stationary,
    })
}

/// Largest `c0` with `max Re λ(A(ξ)) ≤ −c0·min(|ξ|², 1)` on every sample.
pub fn spectral_abscissa_scan(
    coeffs: &EquilibriumCoefficients,
    samples: &XiSamples,
) -> Result<DecayCertificate, LinsysError> {
    let pts = samples.points();
    if pts.is_empty() {
        return Err(LinsysError::NoSamples);
    }
    let spectra: Vec<SampleSpectrum> = pts
        .par_iter()
        .map(|xi| sample_spectrum(xi, coeffs))
        .collect::<Result<_, _>>()?;
    let mut c0 = f64::INFINITY;
    let mut c0c = f64::INFINITY;
    let mut stationary = 0;
    let mut nonneg = false;
    for s in &spectra {
        c0 = c0.min(-s.max_re / s.m);
        c0c = c0c.min(-s.max_re_decaying / s.m);
        stationary += s.stationary;
        if s.max_re >= 0.0 || s.stationary > 0 {
            nonneg = true;
        }
    }
    let c0 = c0.max(0.0);
    let residual = spectra.iter().map(|s| s.max_re + c0 * s.m).fold(f64::NEG_INFINITY, f64::max);
    Ok(DecayCertificate {
        c0,
        prefactor: 1.0,
        regime: Regime::Full,
        residual,
        passed: !nonneg && c0 > 0.0,
        stationary_modes: stationary,
        c0_complement: c0c,
    })
}

/// Hermitian matrix `M(ξ)` of the Lyapunov quadratic form.
#[derive(Debug, Clone)]
pub struct LyapunovForm {
    pub a_param: f64,
    pub m: DMatrix<C>,
}

/// `¼ min(ν₂⁺, ν₂⁻)`.
pub fn default_weight(coeffs: &EquilibriumCoefficients) -> f64 {
    0.25 * coeffs.nu2_plus.min(coeffs.nu2_minus)
}

pub fn lyapunov_form(xi: &[f64], coeffs: &EquilibriumCoefficients) -> Result<LyapunovForm, LinsysError> {
    lyapunov_form_with(xi, coeffs, default_weight(coeffs))
}

pub fn lyapunov_form_with(xi: &[f64], coeffs: &EquilibriumCoefficients, a: f64) -> Result<LyapunovForm, LinsysError> {
    let n = xi.len();
    if !(1..=3).contains(&n) {
        return Err(LinsysError::Dimension(n));
    }
    if a <= 0.0 || !a.is_finite() {
        return Err(LinsysError::Weight(a));
    }
    let k2 = norm2(xi);
    let size = 2 * n + 2;
    let mut m = DMatrix::<C>::zeros(size, size);
    let (cp, cm) = (c_index(n, 0), c_index(n, 1));
    m[(cp, cp)] = c(coeffs.beta1 + a * coeffs.nu_bar_plus() * k2);
    m[(cm, cm)] = c(coeffs.beta4 + a * coeffs.nu_bar_minus() * k2);
    m[(cp, cm)] = c(coeffs.beta2);
    m[(cm, cp)] = c(coeffs.beta2);
    for p in 0..2 {
        let ci = c_index(n, p);
        for j in 0..n {
            let uj = u_index(n, p, j);
            m[(uj, uj)] = c(1.0);
            // 2A Re((iξ ĉ)·conj(û))
            m[(uj, ci)] = I * (a * xi[j]);
            m[(ci, uj)] = -I * (a * xi[j]);
        }
    }
    Ok(LyapunovForm { a_param: a, m })
}

fn hermitian_eigenvalues(m: &DMatrix<C>) -> Vec<f64> {
    let h = (m + m.adjoint()) * c(0.5);
    SymmetricEigen::new(h).eigenvalues.iter().copied().collect()
}

/// Normaliser for the Lyapunov equivalence: `1 + |ξ|²` on densities, 1 on velocities.
fn natural_weights(xi: &[f64]) -> Vec<f64> {
    let n = xi.len();
    let k2 = norm2(xi);
    (0..2 * n + 2)
        .map(|i| if i % (n + 1) == 0 { 1.0 + k2 } else { 1.0 })
        .collect()
}

/// Equivalence constants of `M(ξ)` against the natural weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Equivalence {
    pub c1: f64,
    pub c2: f64,
    /// Smallest raw eigenvalue of `M` seen.
    pub min_eig: f64,
    /// Radius where `c1` is attained.
    pub c1_radius: f64,
}

pub fn lyapunov_equivalence(
    coeffs: &EquilibriumCoefficients,
    samples: &XiSamples,
    a: f64,
) -> Result<Equivalence, LinsysError> {
    let pts = samples.points();
    if pts.is_empty() {
        return Err(LinsysError::NoSamples);
    }
    let per: Vec<(f64, f64, f64, f64)> = pts
        .par_iter()
        .map(|xi| {
            let f = lyapunov_form_with(xi, coeffs, a)?;
            let raw = hermitian_eigenvalues(&f.m);
            let w = natural_weights(xi);
            let s = DMatrix::<C>::from_fn(w.len(), w.len(), |i, j| f.m[(i, j)] * c(1.0 / (w[i] * w[j]).sqrt()));
            let e = hermitian_eigenvalues(&s);
            let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let raw_lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
            Ok((lo, hi, raw_lo, norm2(xi).sqrt()))
        })
        .collect::<Result<_, LinsysError>>()?;
    let mut out = Equivalence {
        c1: f64::INFINITY,
        c2: 0.0,
        min_eig: f64::INFINITY,
        c1_radius: 0.0,
    };
    for (lo, hi, raw, r) in per {
        if lo < out.c1 {
            out.c1 = lo;
            out.c1_radius = r;
        }
        out.c2 = out.c2.max(hi);
        out.min_eig = out.min_eig.min(raw);
    }
    Ok(out)
}

/// Largest `c0` with `AᴴM + MA ⪯ −2c0·min(|ξ|²,1)·M` on every sample.
pub fn lyapunov_dissipation_check(
    coeffs: &EquilibriumCoefficients,
    samples: &XiSamples,
) -> Result<DecayCertificate, LinsysError> {
    lyapunov_dissipation_check_with(coeffs, samples, default_weight(coeffs))
}

pub fn lyapunov_dissipation_check_with(
    coeffs: &EquilibriumCoefficients,
    samples: &XiSamples,
    a: f64,
) -> Result<DecayCertificate, LinsysError> {
    let pts = samples.points();
    if pts.is_empty() {
        return Err(LinsysError::NoSamples);
    }
    // (m, largest generalised eigenvalue, stationary count, largest excluding stationary)
    let per: Vec<(f64, f64, usize, f64)> = pts
        .par_iter()
        .map(|xi| {
            let r = norm2(xi).sqrt();
            let form = lyapunov_form_with(xi, coeffs, a)?;
            let chol = form.m.clone().cholesky().ok_or_else(|| LinsysError::NotDefinite {
                radius: r,
                min_eig: hermitian_eigenvalues(&form.m).into_iter().fold(f64::INFINITY, f64::min),
            })?;
            let sym = symbol_matrix(xi, coeffs)?;
            let q = sym.entries.adjoint() * &form.m + &form.m * &sym.entries;
            // L⁻¹ Q L⁻ᴴ
            let l = chol.l();
            let linv = l.clone().try_inverse().ok_or(LinsysError::Eigen(r))?;
            let g = &linv * q * linv.adjoint();
            let ev = hermitian_eigenvalues(&g);
            let scale = g.norm().max(f64::MIN_POSITIVE);
            let mut top = f64::NEG_INFINITY;
            let mut top_dec = f64::NEG_INFINITY;
            let mut stat = 0;
            for e in ev {
                top = top.max(e);
                if e.abs() <= STATIONARY_TOL * scale {
                    stat += 1;
                } else {
                    top_dec = top_dec.max(e);
                }
            }
            Ok((r * r, top, stat, top_dec))
        })
        .collect::<Result<_, LinsysError>>()?;
    let mut c0 = f64::INFINITY;
    let mut c0c = f64::INFINITY;
    let mut stationary = 0;
    for &(k2, top, stat, top_dec) in &per {
        let m = k2.min(1.0);
        c0 = c0.min(-top / (2.0 * m));
        c0c = c0c.min(-top_dec / (2.0 * m));
        stationary += stat;
    }
    let c0 = c0.max(0.0);
    let residual = per
        .iter()
        .map(|&(k2, top, _, _)| top + 2.0 * c0 * k2.min(1.0))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DecayCertificate {
        c0,
        prefactor: 1.0,
        regime: Regime::Full,
        residual,
        passed: c0 > 0.0 && stationary == 0,
        stationary_modes: stationary,
        c0_complement: c0c,
    })
}

/// Radially symmetric initial spectrum: `|Û₀| = amplitude` on `|ξ| ≤ cutoff`,
/// split equally over the `2N+2` components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RadialProfile {
    pub cutoff: f64,
    pub amplitude: f64,
}

impl Default for RadialProfile {
    fn default() -> Self {
        Self {
            cutoff: 1.0,
            amplitude: 1.0,
        }
    }
}

impl RadialProfile {
    /// Component value `a` with `(2N+2) a² = amplitude²`.
    pub fn component(&self, n: usize) -> f64 {
        self.amplitude / ((2 * n + 2) as f64).sqrt()
    }

    /// `Û₀` at a point of the support.
    pub fn vector(&self, n: usize) -> DVector<C> {
        DVector::from_element(2 * n + 2, c(self.component(n)))
    }
}

/// Direction-averaged `|exp(tA(rω))Û₀|²` for the radial profile, via the
/// longitudinal block and transverse heat factors.
pub fn averaged_mode_energy(t: f64, r: f64, n: usize, coeffs: &EquilibriumCoefficients, profile: &RadialProfile) -> f64 {
    if r > profile.cutoff {
        return 0.0;
    }
    let a = profile.component(n);
    if r == 0.0 {
        return (2 * n + 2) as f64 * a * a;
    }
    let e = (longitudinal_block(r, coeffs) * t).exp();
    // ĉ = a ⇒ y = −i a; ω·û = a Σω_j, and ⟨(Σω_j)²⟩ = 1 over the sphere
    let dens = e * nalgebra::Vector4::new(1.0, 0.0, 1.0, 0.0);
    let vel = e * nalgebra::Vector4::new(0.0, 1.0, 0.0, 1.0);
    let heat = (n as f64 - 1.0) * ((-2.0 * coeffs.nu1_plus * r * r * t).exp() + (-2.0 * coeffs.nu1_minus * r * r * t).exp());
    a * a * (dens.norm_squared() + vel.norm_squared() + heat)
}

fn sphere_area(n: usize) -> f64 {
    use std::f64::consts::PI;
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel: f64, abs: f64) -> Result<f64, LinsysError> {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Option<f64> {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if delta.abs() <= 15.0 * tol {
            return Some(left + right + delta / 15.0);
        }
        if depth == 0 {
            return None;
        }
        Some(rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)? + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    if b <= a {
        return Ok(0.0);
    }
    // coarse pass fixes the absolute tolerance
    let n = 16;
    let h = (b - a) / n as f64;
    let xs: Vec<f64> = (0..=2 * n).map(|i| a + 0.5 * h * i as f64).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let coarse: f64 = (0..n).map(|i| h / 6.0 * (fs[2 * i] + 4.0 * fs[2 * i + 1] + fs[2 * i + 2])).sum();
    let tol = (rel * coarse.abs()).max(abs).max(f64::MIN_POSITIVE);
    let mut total = 0.0;
    for i in 0..n {
        let whole = h / 6.0 * (fs[2 * i] + 4.0 * fs[2 * i + 1] + fs[2 * i + 2]);
        total += rec(f, xs[2 * i], xs[2 * i + 2], fs[2 * i], fs[2 * i + 1], fs[2 * i + 2], whole, tol / n as f64, 40)
            .ok_or(LinsysError::Quadrature { a, b })?;
    }
    Ok(total)
}

/// Continuum block norm `‖Δ̇_q exp(tA(D))U₀‖_{L²}` for a radial profile.
pub fn continuum_block_norm(
    t: f64,
    q: i32,
    n: usize,
    coeffs: &EquilibriumCoefficients,
    profile: &RadialProfile,
) -> Result<f64, LinsysError> {
    let bump = AnnulusBump;
    let s = (q as f64).exp2();
    let (a, b) = (AnnulusBump::INNER * s, (AnnulusBump::OUTER * s).min(profile.cutoff));
    if b <= a {
        return Ok(0.0);
    }
    let f = |r: f64| {
        let w = bump.eval(r / s);
        w * w * r.powi(n as i32 - 1) * averaged_mode_energy(t, r, n, coeffs, profile)
    };
    // exp(tA) carries round-off of order ε·‖exp(tA)‖ ≥ ε, so resolve |Û|² only down to ~ε² of the data
    let data_scale = profile.amplitude.powi(2) * (b.powi(n as i32) - a.powi(n as i32)) / n as f64;
    let integral = adaptive_simpson(&f, a, b, 1e-8, 1e-28 * data_scale)?;
    let norm_const = sphere_area(n) / (2.0 * std::f64::consts::PI).powi(n as i32);
    Ok((norm_const * integral).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayRow {
    pub t: f64,
    pub q_min: i32,
    pub blocks: Vec<f64>,
    pub norm: f64,
    /// `⟨t⟩^{N/4+s/2}·norm`.
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayTable {
    pub n: usize,
    pub s: f64,
    pub q0: i32,
    pub rows: Vec<DecayRow>,
}

impl DecayTable {
    /// Least-squares slope of `log norm` against `log ⟨t⟩`, `⟨t⟩ = √(1+t²)`.
    pub fn slope(&self) -> f64 {
        self.slope_between(0.0, f64::INFINITY)
    }

    /// Same fit restricted to `t ∈ [t0, t1]`.
    pub fn slope_between(&self, t0: f64, t1: f64) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.t >= t0 && r.t <= t1 && r.norm > 0.0)
            .map(|r| ((1.0 + r.t * r.t).sqrt().ln(), r.norm.ln()))
            .collect();
        least_squares_slope(&pts)
    }

    pub fn max_weighted(&self) -> f64 {
        self.rows.iter().map(|r| r.weighted).fold(0.0, f64::max)
    }
}

pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Deepest block included in low-frequency sums.
pub const DEEPEST_BLOCK: i32 = -48;

/// `‖exp(tA(D))U₀‖^ℓ_{Ḃ^s_{2,1}} = Σ_{q ≤ q0} 2^{qs}‖Δ̇_q …‖` for every `t` in the grid.
pub fn linear_besov_decay(
    t_grid: &[f64],
    s: f64,
    n: usize,
    q0: i32,
    coeffs: &EquilibriumCoefficients,
    profile: &RadialProfile,
) -> Result<DecayTable, LinsysError> {
    if !(1..=3).contains(&n) {
        return Err(LinsysError::Dimension(n));
    }
    let qs: Vec<i32> = (DEEPEST_BLOCK..=q0).collect();
    let rows = t_grid
        .par_iter()
        .map(|&t| {
            if t < 0.0 {
                return Err(LinsysError::NegativeTime(t));
            }
            let blocks = qs
                .iter()
                .map(|&q| continuum_block_norm(t, q, n, coeffs, profile))
                .collect::<Result<Vec<_>, _>>()?;
            let norm: f64 = qs.iter().zip(&blocks).map(|(&q, b)| (q as f64 * s).exp2() * b).sum();
            let weight = (1.0 + t * t).sqrt().powf(n as f64 / 4.0 + s / 2.0);
            Ok(DecayRow {
                t,
                q_min: DEEPEST_BLOCK,
                blocks,
                norm,
                weighted: weight * norm,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DecayTable { n, s, q0, rows })
}

/// Spectral projector onto the eigenvalues of `a` away from zero.
fn decaying_projector(a: &DMatrix<C>) -> Result<DMatrix<C>, LinsysError> {
    let size = a.nrows();
    let scale = a.norm();
    let svd = a.clone().svd(true, true);
    let (u, vt) = (svd.u.ok_or(LinsysError::Eigen(scale))?, svd.v_t.ok_or(LinsysError::Eigen(scale))?);
    let sv = &svd.singular_values;
    let mut p = DMatrix::<C>::identity(size, size);
    for k in 0..size {
        if sv[k] > STATIONARY_TOL * scale {
            continue;
        }
        // right null vector v, left null vector l; projector v lᴴ / (lᴴ v)
        let v = vt.row(k).adjoint();
        let l = u.column(k).into_owned();
        let denom = (l.adjoint() * &v)[(0, 0)];
        if denom.norm() < 1e-12 {
            return Err(LinsysError::Eigen(scale));
        }
        p -= &v * l.adjoint() / denom;
    }
    Ok(p)
}

/// Per-block certificate: rate and prefactor of `‖exp(tA(ξ))‖ ≤ C e^{−c0 t}` on an annulus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCertificate {
    pub q: i32,
    /// Rate per unit `2^{2q}`: the bound is `C e^{−c0·2^{2q} t}`.
    pub c0: f64,
    /// Absolute rate `c0·2^{2q}`.
    pub rate: f64,
    #[serde(rename = "C")]
    pub prefactor: f64,
    pub stationary: bool,
}

/// Annulus radii used by the per-block check.
pub fn annulus_radii(q: i32, count: usize) -> Vec<f64> {
    let s = (q as f64).exp2();
    let (a, b) = (AnnulusBump::INNER * s, AnnulusBump::OUTER * s);
    (0..count)
        .map(|i| a * (b / a).powf(i as f64 / (count - 1).max(1) as f64))
        .collect()
}

/// Fraction of the spectral gap used as the certified rate.
const RATE_SAFETY: f64 = 0.9;

/// Largest `rate·t` sampled on the decaying subspace: past it `e^{−rate·t}` is
/// below the ~1e-16 leakage of the stationary mode through the projector.
const ROUNDOFF_HORIZON: f64 = 30.0;

pub fn block_certificate(
    q: i32,
    t_grid: &[f64],
    n: usize,
    coeffs: &EquilibriumCoefficients,
    radial_count: usize,
    subspace: Subspace,
) -> Result<BlockCertificate, LinsysError> {
    let dirs = default_directions(n);
    let scale4 = (2 * q) as f64;
    let mut gap = f64::INFINITY;
    let mut stationary = false;
    let mut ops = Vec::new();
    for r in annulus_radii(q, radial_count) {
        for d in &dirs {
            let xi: Vec<f64> = d.iter().map(|x| x * r).collect();
            let sym = symbol_matrix(&xi, coeffs)?;
            let sp = sample_spectrum(&xi, coeffs)?;
            let proj = match subspace {
                Subspace::Full => {
                    gap = gap.min(-sp.max_re);
                    stationary |= sp.stationary > 0;
                    None
                }
                Subspace::Decaying => {
                    gap = gap.min(-sp.max_re_decaying);
                    Some(decaying_projector(&sym.entries)?)
                }
            };
            ops.push((sym, proj));
        }
    }
    let rate = if stationary { 0.0 } else { (RATE_SAFETY * gap).max(0.0) };
    let mut prefactor: f64 = 1.0;
    for (sym, proj) in &ops {
        for &t in t_grid {
            if proj.is_some() && rate * t > ROUNDOFF_HORIZON {
                continue;
            }
            let mut e = (&sym.entries * c(t)).exp();
            if let Some(p) = proj {
                e *= p;
            }
            prefactor = prefactor.max(operator_norm(&e) * (rate * t).exp());
        }
    }
    Ok(BlockCertificate {
        q,
        c0: rate / scale4.exp2(),
        rate,
        prefactor,
        stationary,
    })
}

/// Certificates for every block of `q_list` plus a summary: `c0` is the
/// smallest per-block rate, `C` the largest prefactor, and `residual` the worst
/// log-deviation of `rate_q / 2^{2q}` from its geometric mean.
pub fn block_decay_check(
    q_list: &[i32],
    t_grid: &[f64],
    n: usize,
    coeffs: &EquilibriumCoefficients,
    radial_count: usize,
    subspace: Subspace,
) -> Result<(DecayCertificate, Vec<BlockCertificate>), LinsysError> {
    if q_list.is_empty() || t_grid.is_empty() {
        return Err(LinsysError::NoSamples);
    }
    let blocks: Vec<BlockCertificate> = q_list
        .par_iter()
        .map(|&q| block_certificate(q, t_grid, n, coeffs, radial_count, subspace))
        .collect::<Result<_, _>>()?;
    let c0 = blocks.iter().map(|b| b.c0).fold(f64::INFINITY, f64::min);
    let c_max = blocks.iter().map(|b| b.prefactor).fold(0.0, f64::max);
    let stationary = blocks.iter().filter(|b| b.stationary).count();
    let spread = rate_spread(&blocks);
    let passed = c0 > 0.0 && stationary == 0 && c_max.is_finite() && spread <= 2f64.ln();
    Ok((
        DecayCertificate {
            c0,
            prefactor: c_max,
            regime: Regime::Low,
            residual: spread - 2f64.ln(),
            passed,
            stationary_modes: stationary,
            c0_complement: f64::NAN,
        },
        blocks,
    ))
}

/// Largest `|ln(c0_q / ĉ)|` where `ĉ` is the geometric mean of the per-block `c0_q`.
pub fn rate_spread(blocks: &[BlockCertificate]) -> f64 {
    if blocks.iter().any(|b| b.c0 <= 0.0) {
        return f64::INFINITY;
    }
    let mean = blocks.iter().map(|b| b.c0.ln()).sum::<f64>() / blocks.len() as f64;
    blocks.iter().map(|b| (b.c0.ln() - mean).abs()).fold(0.0, f64::max)
}

/// `sup_t Σ_{q_min ≤ q ≤ 0} t^{σ/2} 2^{qσ} e^{−c0 2^{2q} t}` over the grid.
pub fn weighted_dyadic_sup(sigma: f64, c0: f64, t_grid: &[f64], q_min: i32) -> f64 {
    t_grid
        .iter()
        .map(|&t| {
            (q_min..=0)
                .map(|q| {
                    let s = (q as f64).exp2();
                    t.powf(sigma / 2.0) * s.powf(sigma) * (-c0 * s * s * t).exp()
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}
