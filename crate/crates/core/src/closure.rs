//! Pressure-equilibrium closure for the two-fluid mixture.
//!
//! Given the partial densities `R± = α±ρ±` and two barotropic laws
//! `P±(ρ) = ρ^γ±`, the phase densities are fixed by `α⁺ + α⁻ = 1` and
//! `P⁺(ρ⁺) = P⁻(ρ⁻)`. Eliminating `ρ⁻ = R⁻ρ⁺/(ρ⁺ − R⁺)` leaves a scalar,
//! strictly increasing residual on `(R⁺, ∞)` whose unique zero is found by
//! a bracketed Newton iteration.
//!
//! Everything downstream (linear coefficients, source-term coefficient
//! functions) is evaluated from a [`ClosureSolution`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relative tolerance on the pressure residual.
pub const DEFAULT_TOL: f64 = 1e-12;

const MAX_ITER: usize = 200;
const BRACKET_DELTA: f64 = 1e-12;
const BRACKET_K: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClosureError {
    #[error("partial densities must be positive (R+ = {r_plus}, R- = {r_minus})")]
    NonPositiveDensity { r_plus: f64, r_minus: f64 },
    #[error("phase density {rho_plus} lies outside the admissible range (R+ = {r_plus}, inf)")]
    OutOfDomain { rho_plus: f64, r_plus: f64 },
    #[error("adiabatic exponent must be >= 1, got {0}")]
    InvalidGamma(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("could not bracket the pressure root for R+ = {r_plus}, R- = {r_minus}")]
    NoBracket { r_plus: f64, r_minus: f64 },
    #[error("closure did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("viscosities violate mu > 0, lambda + 2 mu > 0 ({0})")]
    InadmissibleViscosity(String),
    #[error("perturbation c = ({c_plus}, {c_minus}) leaves the admissible region c > -1")]
    PerturbationOutOfRange { c_plus: f64, c_minus: f64 },
}

/// Barotropic law `P(ρ) = ρ^γ` (the pressure coefficient is normalised to one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureLaw {
    pub gamma: f64,
}

impl PressureLaw {
    pub fn new(gamma: f64) -> Result<Self, ClosureError> {
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(ClosureError::InvalidGamma(gamma));
        }
        Ok(Self { gamma })
    }

    #[inline]
    pub fn pressure(&self, rho: f64) -> f64 {
        rho.powf(self.gamma)
    }

    /// Squared sound speed `dP/dρ = γP/ρ`.
    #[inline]
    pub fn sound_speed_sq(&self, rho: f64) -> f64 {
        self.gamma * rho.powf(self.gamma - 1.0)
    }
}

/// The pair of pressure laws, `plus` for phase `+` and `minus` for phase `-`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureLaws {
    pub plus: PressureLaw,
    pub minus: PressureLaw,
}

impl PressureLaws {
    pub fn new(gamma_plus: f64, gamma_minus: f64) -> Result<Self, ClosureError> {
        Ok(Self {
            plus: PressureLaw::new(gamma_plus)?,
            minus: PressureLaw::new(gamma_minus)?,
        })
    }

    /// Exact comparison on the configured exponents.
    #[inline]
    pub fn equal_gamma(&self) -> bool {
        self.plus.gamma == self.minus.gamma
    }

    pub fn swapped(&self) -> Self {
        Self {
            plus: self.minus,
            minus: self.plus,
        }
    }
}

/// Partial densities `(R⁺, R⁻)` at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureState {
    pub r_plus: f64,
    pub r_minus: f64,
}

impl MixtureState {
    pub fn new(r_plus: f64, r_minus: f64) -> Result<Self, ClosureError> {
        let s = Self { r_plus, r_minus };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), ClosureError> {
        if !(self.r_plus > 0.0 && self.r_minus > 0.0) || !self.r_plus.is_finite() || !self.r_minus.is_finite() {
            return Err(ClosureError::NonPositiveDensity {
                r_plus: self.r_plus,
                r_minus: self.r_minus,
            });
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            r_plus: self.r_minus,
            r_minus: self.r_plus,
        }
    }
}

/// Full algebraic state recovered from `(R⁺, R⁻)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureSolution {
    pub rho_plus: f64,
    pub rho_minus: f64,
    pub alpha_plus: f64,
    pub alpha_minus: f64,
    pub pressure: f64,
    pub s2_plus: f64,
    pub s2_minus: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
}

impl ClosureSolution {
    /// The same physical state seen with the phase labels exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            rho_plus: self.rho_minus,
            rho_minus: self.rho_plus,
            alpha_plus: self.alpha_minus,
            alpha_minus: self.alpha_plus,
            pressure: self.pressure,
            s2_plus: self.s2_minus,
            s2_minus: self.s2_plus,
            c2: self.c2,
        }
    }
}

fn check_domain(rho_plus: f64, state: &MixtureState) -> Result<(), ClosureError> {
    state.validate()?;
    if !(rho_plus > state.r_plus) || !rho_plus.is_finite() {
        return Err(ClosureError::OutOfDomain {
            rho_plus,
            r_plus: state.r_plus,
        });
    }
    Ok(())
}

#[inline]
fn rho_minus_of(rho_plus: f64, state: &MixtureState) -> f64 {
    state.r_minus * rho_plus / (rho_plus - state.r_plus)
}

/// Pressure residual `P⁺(ρ⁺) − P⁻(R⁻ρ⁺/(ρ⁺ − R⁺))`.
pub fn phi(rho_plus: f64, state: &MixtureState, laws: &PressureLaws) -> Result<f64, ClosureError> {
    check_domain(rho_plus, state)?;
    Ok(phi_unchecked(rho_plus, state, laws))
}

#[inline]
fn phi_unchecked(rho_plus: f64, state: &MixtureState, laws: &PressureLaws) -> f64 {
    laws.plus.pressure(rho_plus) - laws.minus.pressure(rho_minus_of(rho_plus, state))
}

/// Derivative of [`phi`]: `s⁺² + s⁻² R⁻R⁺/(ρ⁺ − R⁺)²`.
pub fn phi_prime(rho_plus: f64, state: &MixtureState, laws: &PressureLaws) -> Result<f64, ClosureError> {
    check_domain(rho_plus, state)?;
    Ok(phi_prime_unchecked(rho_plus, state, laws))
}

#[inline]
fn phi_prime_unchecked(rho_plus: f64, state: &MixtureState, laws: &PressureLaws) -> f64 {
    let gap = rho_plus - state.r_plus;
    let rho_minus = rho_minus_of(rho_plus, state);
    laws.plus.sound_speed_sq(rho_plus)
        + laws.minus.sound_speed_sq(rho_minus) * state.r_minus * state.r_plus / (gap * gap)
}

/// Solve `φ(ρ⁺) = 0` on `(R⁺, ∞)`.
pub fn solve_rho_plus(state: &MixtureState, laws: &PressureLaws, tol: f64) -> Result<f64, ClosureError> {
    solve_rho_plus_from(state, laws, tol, None)
}

/// As [`solve_rho_plus`], starting Newton from `guess` when it lies inside the bracket.
pub fn solve_rho_plus_from(
    state: &MixtureState,
    laws: &PressureLaws,
    tol: f64,
    guess: Option<f64>,
) -> Result<f64, ClosureError> {
    state.validate()?;
    if !(tol > 0.0) {
        return Err(ClosureError::InvalidTolerance(tol));
    }
    let (rp, rm) = (state.r_plus, state.r_minus);
    let converged = |x: f64, f: f64| f.abs() <= tol * laws.plus.pressure(x);

    // Warm start: a guess that already satisfies the tolerance is returned as is.
    if let Some(g) = guess {
        if g > rp && g.is_finite() {
            let f = phi_unchecked(g, state, laws);
            if converged(g, f) {
                return Ok(g);
            }
        }
    }

    let mut delta = BRACKET_DELTA;
    let mut lo = rp * (1.0 + delta);
    let mut f_lo = phi_unchecked(lo, state, laws);
    while !(f_lo < 0.0) {
        if converged(lo, f_lo) {
            return Ok(lo);
        }
        delta *= 1e-2;
        if delta < f64::EPSILON {
            return Err(ClosureError::NoBracket { r_plus: rp, r_minus: rm });
        }
        lo = rp * (1.0 + delta);
        f_lo = phi_unchecked(lo, state, laws);
    }
    let mut span = rm * (rp + rm).max(1.0) * BRACKET_K;
    let mut hi = rp + span;
    let mut f_hi = phi_unchecked(hi, state, laws);
    let mut expansions = 0;
    while !(f_hi > 0.0) {
        if converged(hi, f_hi) {
            return Ok(hi);
        }
        // Everything to the left of a non-positive point is negative too.
        lo = hi;
        span *= 2.0;
        hi = rp + span;
        f_hi = phi_unchecked(hi, state, laws);
        expansions += 1;
        if expansions > 200 || !hi.is_finite() {
            return Err(ClosureError::NoBracket { r_plus: rp, r_minus: rm });
        }
    }

    let mut x = match guess {
        Some(g) if g > lo && g < hi => g,
        _ => 0.5 * (lo + hi),
    };
    let mut last_residual = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let f = phi_unchecked(x, state, laws);
        last_residual = f;
        if converged(x, f) {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            // Bracket exhausted at machine resolution; the better endpoint wins.
            let (fl, fh) = (phi_unchecked(lo, state, laws), phi_unchecked(hi, state, laws));
            let best = if fl.abs() <= fh.abs() { lo } else { hi };
            let fb = fl.abs().min(fh.abs());
            if converged(best, fb) {
                return Ok(best);
            }
            return Err(ClosureError::NoConvergence {
                iterations: MAX_ITER,
                residual: fb,
            });
        }
        let d = phi_prime_unchecked(x, state, laws);
        let newton = x - f / d;
        x = if newton > lo && newton < hi && newton.is_finite() {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Err(ClosureError::NoConvergence {
        iterations: MAX_ITER,
        residual: last_residual,
    })
}

/// Assemble the closure quantities from a known `ρ⁺`.
pub fn solution_from_rho_plus(rho_plus: f64, state: &MixtureState, laws: &PressureLaws) -> ClosureSolution {
    solution_from_densities(rho_plus, rho_minus_of(rho_plus, state), state, laws)
}

fn solution_from_densities(rho_plus: f64, rho_minus: f64, state: &MixtureState, laws: &PressureLaws) -> ClosureSolution {
    let alpha_plus = state.r_plus / rho_plus;
    let alpha_minus = state.r_minus / rho_minus;
    let s2_plus = laws.plus.sound_speed_sq(rho_plus);
    let s2_minus = laws.minus.sound_speed_sq(rho_minus);
    let c2 = s2_minus * s2_plus / (alpha_minus * rho_plus * s2_plus + alpha_plus * rho_minus * s2_minus);
    ClosureSolution {
        rho_plus,
        rho_minus,
        alpha_plus,
        alpha_minus,
        pressure: laws.plus.pressure(rho_plus),
        s2_plus,
        s2_minus,
        c2,
    }
}

/// Solve the closure with the root finder (no closed-form shortcut).
pub fn closure_solution(state: &MixtureState, laws: &PressureLaws, tol: f64) -> Result<ClosureSolution, ClosureError> {
    let rho_plus = solve_rho_plus(state, laws, tol)?;
    Ok(solution_from_rho_plus(rho_plus, state, laws))
}

/// How [`nonlinear_coefficients`] obtains `ρ⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClosurePath {
    /// Closed form `ρ⁺ = R⁺ + R⁻` when `γ⁺ = γ⁻`, root finding otherwise.
    #[default]
    Auto,
    /// Always root-find.
    RootFind,
}

/// Closure at `(R⁺, R⁻)`, honouring the equal-γ shortcut and an optional warm start.
pub fn closure_with(
    state: &MixtureState,
    laws: &PressureLaws,
    tol: f64,
    path: ClosurePath,
    guess: Option<f64>,
) -> Result<ClosureSolution, ClosureError> {
    state.validate()?;
    if path == ClosurePath::Auto && laws.equal_gamma() {
        // both phases share ρ = R⁺ + R⁻; setting ρ⁻ directly keeps the ± symmetry exact
        let rho = state.r_plus + state.r_minus;
        return Ok(solution_from_densities(rho, rho, state, laws));
    }
    let rho_plus = solve_rho_plus_from(state, laws, tol, guess)?;
    Ok(solution_from_rho_plus(rho_plus, state, laws))
}

/// Shear and bulk viscosities of both phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Viscosities {
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
}

impl Viscosities {
    pub fn new(mu_plus: f64, mu_minus: f64, lambda_plus: f64, lambda_minus: f64) -> Result<Self, ClosureError> {
        let v = Self {
            mu_plus,
            mu_minus,
            lambda_plus,
            lambda_minus,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<(), ClosureError> {
        let mut bad = Vec::new();
        if !(self.mu_plus > 0.0) {
            bad.push(format!("mu+ = {}", self.mu_plus));
        }
        if !(self.mu_minus > 0.0) {
            bad.push(format!("mu- = {}", self.mu_minus));
        }
        if !(self.lambda_plus + 2.0 * self.mu_plus > 0.0) {
            bad.push(format!("lambda+ + 2 mu+ = {}", self.lambda_plus + 2.0 * self.mu_plus));
        }
        if !(self.lambda_minus + 2.0 * self.mu_minus > 0.0) {
            bad.push(format!("lambda- + 2 mu- = {}", self.lambda_minus + 2.0 * self.mu_minus));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ClosureError::InadmissibleViscosity(bad.join(", ")))
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            mu_plus: self.mu_minus,
            mu_minus: self.mu_plus,
            lambda_plus: self.lambda_minus,
            lambda_minus: self.lambda_plus,
        }
    }
}

/// Constants of the linearisation about `R± = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCoefficients {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub beta4: f64,
    pub nu1_plus: f64,
    pub nu1_minus: f64,
    pub nu2_plus: f64,
    pub nu2_minus: f64,
}

impl EquilibriumCoefficients {
    #[inline]
    pub fn nu_bar_plus(&self) -> f64 {
        self.nu1_plus + self.nu2_plus
    }

    #[inline]
    pub fn nu_bar_minus(&self) -> f64 {
        self.nu1_minus + self.nu2_minus
    }

    pub fn swapped(&self) -> Self {
        Self {
            beta1: self.beta4,
            beta2: self.beta3,
            beta3: self.beta2,
            beta4: self.beta1,
            nu1_plus: self.nu1_minus,
            nu1_minus: self.nu1_plus,
            nu2_plus: self.nu2_minus,
            nu2_minus: self.nu2_plus,
        }
    }
}

/// Closure at the background state `R± = 1`.
pub fn equilibrium_closure(laws: &PressureLaws, tol: f64) -> Result<ClosureSolution, ClosureError> {
    closure_with(&MixtureState { r_plus: 1.0, r_minus: 1.0 }, laws, tol, ClosurePath::Auto, None)
}

pub fn equilibrium_coefficients(
    laws: &PressureLaws,
    visc: &Viscosities,
) -> Result<EquilibriumCoefficients, ClosureError> {
    visc.validate()?;
    let eq = equilibrium_closure(laws, DEFAULT_TOL)?;
    Ok(linearised_coefficients(&eq, visc))
}

/// Linearisation constants about the constant state described by `eq`.
pub fn linearised_coefficients(eq: &ClosureSolution, visc: &Viscosities) -> EquilibriumCoefficients {
    let c2 = eq.c2;
    EquilibriumCoefficients {
        beta1: c2 * eq.rho_minus / eq.rho_plus,
        beta2: c2,
        beta3: c2,
        beta4: c2 * eq.rho_plus / eq.rho_minus,
        nu1_plus: visc.mu_plus / eq.rho_plus,
        nu1_minus: visc.mu_minus / eq.rho_minus,
        nu2_plus: (visc.mu_plus + visc.lambda_plus) / eq.rho_plus,
        nu2_minus: (visc.mu_minus + visc.lambda_minus) / eq.rho_minus,
    }
}

/// Coefficient functions of the source terms at one point `(c⁺, c⁻)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NonlinearCoefficients {
    pub g_plus: f64,
    pub g_minus: f64,
    pub g_tilde: f64,
    pub h_plus: f64,
    pub h_minus: f64,
    pub k_plus: f64,
    pub k_minus: f64,
    pub l_plus: f64,
    pub l_minus: f64,
}

/// Precomputed background values so that pointwise evaluation only needs the local closure.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientEvaluator {
    pub laws: PressureLaws,
    pub tol: f64,
    pub path: ClosurePath,
    equilibrium: ClosureSolution,
}

impl CoefficientEvaluator {
    pub fn new(laws: PressureLaws, tol: f64, path: ClosurePath) -> Result<Self, ClosureError> {
        if !(tol > 0.0) {
            return Err(ClosureError::InvalidTolerance(tol));
        }
        let equilibrium = closure_with(&MixtureState { r_plus: 1.0, r_minus: 1.0 }, &laws, tol, path, None)?;
        Ok(Self {
            laws,
            tol,
            path,
            equilibrium,
        })
    }

    pub fn equilibrium(&self) -> &ClosureSolution {
        &self.equilibrium
    }

    /// Evaluate at `(c⁺, c⁻)`; also returns `ρ⁺` for warm starting the next call.
    pub fn evaluate_with_guess(
        &self,
        c_plus: f64,
        c_minus: f64,
        guess: Option<f64>,
    ) -> Result<(NonlinearCoefficients, f64), ClosureError> {
        if !(c_plus > -1.0 && c_minus > -1.0) {
            return Err(ClosureError::PerturbationOutOfRange { c_plus, c_minus });
        }
        let state = MixtureState {
            r_plus: 1.0 + c_plus,
            r_minus: 1.0 + c_minus,
        };
        let sol = closure_with(&state, &self.laws, self.tol, self.path, guess)?;
        Ok((coefficients_at(&sol, &state, &self.equilibrium), sol.rho_plus))
    }

    pub fn evaluate(&self, c_plus: f64, c_minus: f64) -> Result<NonlinearCoefficients, ClosureError> {
        self.evaluate_with_guess(c_plus, c_minus, None).map(|(c, _)| c)
    }
}

fn coefficients_at(sol: &ClosureSolution, state: &MixtureState, eq: &ClosureSolution) -> NonlinearCoefficients {
    let c2 = sol.c2;
    NonlinearCoefficients {
        g_plus: c2 * sol.rho_minus / sol.rho_plus - eq.c2 * eq.rho_minus / eq.rho_plus,
        g_minus: c2 * sol.rho_plus / sol.rho_minus - eq.c2 * eq.rho_plus / eq.rho_minus,
        g_tilde: c2 - eq.c2,
        h_plus: c2 * sol.alpha_minus / (state.r_plus * sol.s2_minus),
        h_minus: -c2 / (sol.rho_minus * sol.s2_minus),
        // (1/R⁺)∂α⁺/∂R⁻ = −𝒞²α⁺/(R⁺s⁺²) = −𝒞²/(ρ⁺s⁺²); mirror image of h₋.
        k_plus: -c2 / (sol.rho_plus * sol.s2_plus),
        k_minus: sol.alpha_plus * c2 / (state.r_minus * sol.s2_plus),
        l_plus: 1.0 / sol.rho_plus - 1.0 / eq.rho_plus,
        l_minus: 1.0 / sol.rho_minus - 1.0 / eq.rho_minus,
    }
}

/// One-shot evaluation of the coefficient functions at `(c⁺, c⁻)`.
pub fn nonlinear_coefficients(
    c_plus: f64,
    c_minus: f64,
    laws: &PressureLaws,
    tol: f64,
) -> Result<NonlinearCoefficients, ClosureError> {
    CoefficientEvaluator::new(*laws, tol, ClosurePath::Auto)?.evaluate(c_plus, c_minus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn laws(gp: f64, gm: f64) -> PressureLaws {
        PressureLaws::new(gp, gm).unwrap()
    }

    fn st(rp: f64, rm: f64) -> MixtureState {
        MixtureState::new(rp, rm).unwrap()
    }

    #[test]
    fn phi_vanishes_for_equal_gamma_at_sum() {
        assert_eq!(phi(2.0, &st(1.0, 1.0), &laws(2.0, 2.0)).unwrap(), 0.0);
    }

    #[test]
    fn phi_unequal_gamma_arithmetic() {
        let v = phi(2.0, &st(1.0, 1.0), &laws(1.4, 2.0)).unwrap();
        assert_relative_eq!(v, 2f64.powf(1.4) - 4.0, epsilon = 1e-14);
        assert_relative_eq!(v, -1.3609841784542116, epsilon = 1e-12);
    }

    #[test]
    fn phi_limits() {
        let s = st(1.0, 1.0);
        let l = laws(1.4, 2.0);
        assert!(phi(1.0 + 1e-9, &s, &l).unwrap() < -1e12);
        assert!(phi(1e8, &s, &l).unwrap() > 1e10);
    }

    #[test]
    fn phi_domain_error() {
        let s = st(1.0, 1.0);
        assert!(matches!(phi(1.0, &s, &laws(2.0, 2.0)), Err(ClosureError::OutOfDomain { .. })));
        assert!(matches!(phi_prime(0.5, &s, &laws(2.0, 2.0)), Err(ClosureError::OutOfDomain { .. })));
    }

    #[test]
    fn phi_prime_arithmetic() {
        assert_relative_eq!(phi_prime(2.0, &st(1.0, 1.0), &laws(2.0, 2.0)).unwrap(), 8.0, epsilon = 1e-14);
    }

    #[test]
    fn phi_prime_second_order_convergence() {
        let s = st(0.7, 1.3);
        let l = laws(1.4, 2.6);
        let x = 2.1;
        let d = phi_prime(x, &s, &l).unwrap();
        let err = |h: f64| {
            let fd = (phi(x + h, &s, &l).unwrap() - phi(x - h, &s, &l).unwrap()) / (2.0 * h);
            (fd - d).abs()
        };
        let (e1, e2) = (err(1e-2), err(5e-3));
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn solve_equal_gamma_cases() {
        let r = solve_rho_plus(&st(1.0, 1.0), &laws(2.0, 2.0), 1e-12).unwrap();
        assert_relative_eq!(r, 2.0, max_relative = 1e-12);
        let r = solve_rho_plus(&st(0.3, 0.9), &laws(1.4, 1.4), 1e-12).unwrap();
        assert_relative_eq!(r, 1.2, max_relative = 1e-12);
    }

    #[test]
    fn solve_unequal_gamma_matches_bisection_oracle() {
        let s = st(1.0, 1.0);
        let l = laws(1.4, 2.0);
        // plain bisection on the residual formula
        let f = |p: f64| p.powf(1.4) - (p / (p - 1.0)).powi(2);
        let (mut lo, mut hi) = (2.0, 3.0);
        assert!(f(lo) < 0.0 && f(hi) > 0.0);
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if f(m) < 0.0 {
                lo = m
            } else {
                hi = m
            }
        }
        let r = solve_rho_plus(&s, &l, 1e-12).unwrap();
        assert!(r > 2.0 && r < 3.0);
        assert_relative_eq!(r, lo, max_relative = 1e-11);
        assert_relative_eq!(r, 2.280604391808174, max_relative = 1e-11);
    }

    #[test]
    fn solver_rejects_bad_input() {
        let l = laws(2.0, 2.0);
        let bad = MixtureState { r_plus: 0.0, r_minus: 1.0 };
        assert!(matches!(solve_rho_plus(&bad, &l, 1e-12), Err(ClosureError::NonPositiveDensity { .. })));
        assert!(matches!(solve_rho_plus(&st(1.0, 1.0), &l, 0.0), Err(ClosureError::InvalidTolerance(_))));
        assert!(PressureLaw::new(0.9).is_err());
    }

    #[test]
    fn warm_start_agrees_with_cold() {
        let s = st(1.3, 0.6);
        let l = laws(1.2, 2.7);
        let cold = solve_rho_plus(&s, &l, 1e-13).unwrap();
        for g in [cold, cold * 1.01, cold * 0.5, 1e9, -3.0] {
            let warm = solve_rho_plus_from(&s, &l, 1e-13, Some(g)).unwrap();
            assert_relative_eq!(warm, cold, max_relative = 1e-12);
        }
    }

    #[test]
    fn closure_examples() {
        let c = closure_solution(&st(1.0, 1.0), &laws(2.0, 2.0), 1e-12).unwrap();
        assert_relative_eq!(c.rho_plus, 2.0, max_relative = 1e-12);
        assert_relative_eq!(c.rho_minus, 2.0, max_relative = 1e-12);
        assert_relative_eq!(c.alpha_plus, 0.5, max_relative = 1e-12);
        assert_relative_eq!(c.s2_plus, 4.0, max_relative = 1e-12);
        assert_relative_eq!(c.s2_minus, 4.0, max_relative = 1e-12);
        assert_relative_eq!(c.c2, 2.0, max_relative = 1e-12);

        let c = closure_solution(&st(0.5, 0.5), &laws(2.0, 2.0), 1e-12).unwrap();
        assert_relative_eq!(c.rho_plus, 1.0, max_relative = 1e-12);
        assert_relative_eq!(c.alpha_minus, 0.5, max_relative = 1e-12);
        assert_relative_eq!(c.s2_plus, 2.0, max_relative = 1e-12);
        // P = ρ² with ρ = R⁺ + R⁻ = 1, so dP = 2(dR⁺ + dR⁻) and ρ± = 1
        assert_relative_eq!(c.c2, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn equilibrium_coefficient_examples() {
        let l = laws(2.0, 2.0);
        let e = equilibrium_coefficients(&l, &Viscosities::new(1.0, 1.0, 0.0, 0.0).unwrap()).unwrap();
        for b in [e.beta1, e.beta2, e.beta3, e.beta4] {
            assert_relative_eq!(b, 2.0, max_relative = 1e-12);
        }
        for n in [e.nu1_plus, e.nu1_minus, e.nu2_plus, e.nu2_minus] {
            assert_relative_eq!(n, 0.5, max_relative = 1e-12);
        }
        let e = equilibrium_coefficients(&l, &Viscosities::new(2.0, 1.0, -1.0, 0.0).unwrap()).unwrap();
        assert_relative_eq!(e.nu2_plus, 0.5, max_relative = 1e-12);
        assert_relative_eq!(e.nu1_plus, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn viscosity_admissibility() {
        assert!(Viscosities::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Viscosities::new(1.0, 1.0, -2.0, 0.0).is_err());
        assert!(Viscosities::new(1.0, 1.0, -1.9, 0.0).is_ok());
    }

    #[test]
    fn nonlinear_coefficients_vanish_at_equilibrium() {
        for (gp, gm) in [(2.0, 2.0), (1.4, 2.0), (1.0, 3.0)] {
            let n = nonlinear_coefficients(0.0, 0.0, &laws(gp, gm), 1e-13).unwrap();
            for v in [n.g_plus, n.g_minus, n.g_tilde, n.l_plus, n.l_minus] {
                assert!(v.abs() < 1e-12, "{gp} {gm}: {n:?}");
            }
        }
    }

    #[test]
    fn h_plus_at_equilibrium() {
        let n = nonlinear_coefficients(0.0, 0.0, &laws(2.0, 2.0), 1e-12).unwrap();
        assert_relative_eq!(n.h_plus, 0.25, max_relative = 1e-12);
        assert_relative_eq!(n.h_minus, -0.25, max_relative = 1e-12);
        assert_relative_eq!(n.k_plus, -0.25, max_relative = 1e-12);
        assert_relative_eq!(n.k_minus, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn perturbation_domain() {
        assert!(matches!(
            nonlinear_coefficients(-1.0, 0.0, &laws(2.0, 2.0), 1e-12),
            Err(ClosureError::PerturbationOutOfRange { .. })
        ));
    }

    #[test]
    fn fast_path_matches_root_find() {
        use rand::{Rng, SeedableRng};
        let l = laws(1.4, 1.4);
        let fast = CoefficientEvaluator::new(l, 1e-14, ClosurePath::Auto).unwrap();
        let slow = CoefficientEvaluator::new(l, 1e-14, ClosurePath::RootFind).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let cp = rng.random_range(-0.5..0.5);
            let cm = rng.random_range(-0.5..0.5);
            let a = fast.evaluate(cp, cm).unwrap();
            let b = slow.evaluate(cp, cm).unwrap();
            let pairs = [
                (a.g_plus, b.g_plus),
                (a.g_minus, b.g_minus),
                (a.g_tilde, b.g_tilde),
                (a.h_plus, b.h_plus),
                (a.h_minus, b.h_minus),
                (a.k_plus, b.k_plus),
                (a.k_minus, b.k_minus),
                (a.l_plus, b.l_plus),
                (a.l_minus, b.l_minus),
            ];
            for (x, y) in pairs {
                assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn coefficients_mirror_under_phase_swap() {
        let l = laws(1.3, 2.4);
        let ev = CoefficientEvaluator::new(l, 1e-14, ClosurePath::Auto).unwrap();
        let sw = CoefficientEvaluator::new(l.swapped(), 1e-14, ClosurePath::Auto).unwrap();
        let a = ev.evaluate(0.2, -0.15).unwrap();
        let b = sw.evaluate(-0.15, 0.2).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-10 * (1.0 + x.abs());
        assert!(close(a.g_plus, b.g_minus));
        assert!(close(a.g_tilde, b.g_tilde));
        assert!(close(a.h_plus, b.k_minus));
        assert!(close(a.k_plus, b.h_minus));
        assert!(close(a.l_plus, b.l_minus));
    }

    proptest! {
        #[test]
        fn residual_is_monotone(rp in 0.1f64..10.0, rm in 0.1f64..10.0, gp in 1.0f64..3.0, gm in 1.0f64..3.0,
                                a in 1e-6f64..5.0, b in 1e-6f64..5.0) {
            let s = st(rp, rm);
            let l = laws(gp, gm);
            let xa = rp + a.min(b) * rp;
            let xb = rp + a.max(b) * rp + 1e-6 * rp;
            prop_assert!(phi(xb, &s, &l).unwrap() > phi(xa, &s, &l).unwrap());
            prop_assert!(phi_prime(xa, &s, &l).unwrap() > 0.0);
        }

        #[test]
        fn closure_round_trip(rp in 0.1f64..10.0, rm in 0.1f64..10.0, gp in 1.0f64..3.0, gm in 1.0f64..3.0) {
            let s = st(rp, rm);
            let l = laws(gp, gm);
            let c = closure_solution(&s, &l, 1e-12).unwrap();
            prop_assert!(c.rho_plus > rp);
            prop_assert!((c.alpha_plus * c.rho_plus - rp).abs() <= 1e-10 * rp);
            prop_assert!((c.alpha_minus * c.rho_minus - rm).abs() <= 1e-10 * rm);
            prop_assert!((c.alpha_plus + c.alpha_minus - 1.0).abs() <= 1e-12);
            let pm = l.minus.pressure(c.rho_minus);
            prop_assert!((c.pressure - pm).abs() <= 1e-12 * c.pressure * 4.0);
        }

        #[test]
        fn closure_swap_symmetry(rp in 0.1f64..10.0, rm in 0.1f64..10.0, gp in 1.0f64..3.0, gm in 1.0f64..3.0) {
            let l = laws(gp, gm);
            let a = closure_solution(&st(rp, rm), &l, 1e-13).unwrap();
            let b = closure_solution(&st(rm, rp), &l.swapped(), 1e-13).unwrap().swapped();
            prop_assert!((a.rho_plus - b.rho_plus).abs() <= 1e-10 * a.rho_plus);
            prop_assert!((a.rho_minus - b.rho_minus).abs() <= 1e-10 * a.rho_minus);
            prop_assert!((a.c2 - b.c2).abs() <= 1e-9 * a.c2);
        }

        #[test]
        fn beta_identity(gp in 1.0f64..3.0, gm in 1.0f64..3.0) {
            let e = equilibrium_coefficients(&laws(gp, gm), &Viscosities::new(1.0, 1.0, 0.0, 0.0).unwrap()).unwrap();
            prop_assert_eq!(e.beta2, e.beta3);
            prop_assert!((e.beta2 * e.beta2 - e.beta1 * e.beta4).abs() <= 4.0 * f64::EPSILON * e.beta2 * e.beta2);
        }
    }
}
