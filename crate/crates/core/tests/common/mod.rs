#![allow(dead_code)]

use std::f64::consts::PI;

use twofluid::closure::{PressureLaws, Viscosities};
use twofluid::grid::Grid;
use twofluid::solver::{Integrator, Model, Scheme, State};

pub fn model(grid: &Grid) -> Model {
    let laws = PressureLaws::new(2.0, 2.0).unwrap();
    let visc = Viscosities::new(1.0, 1.0, 0.0, 0.0).unwrap();
    Model::new(grid, laws, visc, 1e-13).unwrap()
}

/// Analytic, non-band-limited data built from exponentials of trigonometric functions.
pub fn analytic_state(g: &Grid, eps: f64) -> State {
    let mut s = State::zeros(g);
    for m in 0..g.len() {
        let x = g.coordinate(m);
        let (a, b) = (x[0], x[1]);
        s.c_plus[m] = eps * (a.sin().exp() - 1.0);
        s.c_minus[m] = eps * 0.7 * ((b + 0.4).cos().exp() - 1.0);
        s.u_plus[0][m] = eps * ((0.5 * (a + b).sin()).exp() - 1.0);
        s.u_plus[1][m] = eps * 0.6 * (a - 0.3).cos() * b.sin().exp();
        s.u_minus[0][m] = eps * 0.6 * (0.5 * (2.0 * b).cos()).exp() * a.cos();
        s.u_minus[1][m] = eps * -0.4 * (0.3 * a.sin()).exp() * (b + a).cos();
    }
    s
}

pub fn integrate(it: &mut Integrator, s0: &State, dt: f64, t: f64) -> State {
    it.run(s0.clone(), dt, t, u64::MAX, |_| Ok(())).unwrap()
}

pub fn l2_distance(a: &State, b: &State) -> f64 {
    a.fields()
        .iter()
        .zip(b.fields())
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

/// Observed order of `scheme` against a fine-step RK4 reference on a 32² periodic box.
/// Returns the order and the errors at `T/8 … T/64`.
pub fn temporal_order(scheme: Scheme) -> (f64, Vec<f64>) {
    let g = Grid::cubic(2, 32, 2.0 * PI, 2.0 / 3.0).unwrap();
    let s0 = analytic_state(&g, 0.1);
    let t = 0.5;
    let reference = integrate(&mut Integrator::new(model(&g), Scheme::Rk4Oracle), &s0, t / 512.0, t);
    let dts: Vec<f64> = [8.0, 16.0, 32.0, 64.0].iter().map(|k| t / k).collect();
    let mut it = Integrator::new(model(&g), scheme);
    let errs: Vec<f64> = dts.iter().map(|&dt| l2_distance(&integrate(&mut it, &s0, dt, t), &reference)).collect();
    (log_slope(&dts, &errs), errs)
}

/// Slope of the nonlinear-minus-linear deviation against amplitude over `ε ∈ {1e-2, 1e-3, 1e-4}`.
pub fn deviation_slope() -> (f64, Vec<f64>) {
    let g = Grid::cubic(2, 32, 2.0 * PI, 2.0 / 3.0).unwrap();
    let (dt, t) = (0.05, 1.0);
    let mut full = Integrator::new(model(&g), Scheme::Imex2);
    let mut lin = Integrator::new(model(&g).linear_only(), Scheme::Imex2);
    let eps = [1e-2, 1e-3, 1e-4];
    let dev: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let s0 = analytic_state(&g, e);
            l2_distance(&integrate(&mut full, &s0, dt, t), &integrate(&mut lin, &s0, dt, t))
        })
        .collect();
    (log_slope(&eps, &dev), dev)
}
