use std::f64::consts::PI;

use twofluid::closure::equilibrium_coefficients;
use twofluid::config::RunConfig;
use twofluid::decay::{decay_experiment, fit_exponent};
use twofluid::linsys::{linear_besov_decay, RadialProfile};

fn small_box() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid.points = 256;
    cfg.grid.length = 2.0 * PI * 128.0;
    cfg.data.amplitude = 1e-6;
    cfg.data.cutoff = 0.5;
    cfg.integrator.t_end = 100.0;
    cfg.diagnostics.fit_window = [10.0, 100.0];
    cfg
}

#[test]
fn tiny_data_follows_linear_quadrature_exponents() {
    let cfg = small_box();
    let out = decay_experiment(&cfg, None, |_, _| Ok(())).unwrap();
    assert!(out.report.t_cut > cfg.diagnostics.fit_window[1]);
    let coeffs = equilibrium_coefficients(&cfg.laws().unwrap(), &cfg.viscosities().unwrap()).unwrap();
    let t_grid: Vec<f64> = (0..=40).map(|i| 10.0 * 10f64.powf(i as f64 / 40.0)).collect();
    let profile = RadialProfile {
        cutoff: cfg.data.cutoff,
        amplitude: 1.0,
    };
    for s in [0.0, 1.0] {
        let table = linear_besov_decay(&t_grid, s, 2, cfg.diagnostics.q0, &coeffs, &profile).unwrap();
        let series: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.t, r.norm)).collect();
        let linear = fit_exponent(&series, cfg.diagnostics.fit_window).unwrap().exponent;
        let name = format!("B{s}_low");
        let fit = out.report.fits.iter().find(|f| f.quantity == name).unwrap();
        assert!(!fit.flagged);
        assert!((fit.measured - linear).abs() <= 0.05, "{name}: {} vs {linear}", fit.measured);
    }
}
