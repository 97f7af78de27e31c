//! Shared fixtures and independent oracles for the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use snailopt::network::CellImmittance;
use snailopt::DeviceParams;

/// The optimized device quoted for the reference design.
pub fn reference_device() -> DeviceParams {
    DeviceParams::from_array([0.49, 0.9, 0.23, 9.0, 1.5, 1.0, 3.0], 360)
}

/// `[S11, S12, S21, S22]` of a ladder of L-sections (series element, then
/// shunt to ground) from nodal analysis with matched port terminations.
///
/// Node 0 is port 1 and node `n` is port 2. Each port is driven in turn by
/// a 2 V source behind `z0`, so the incident wave is 1 and
/// `V_port = a + b`.
pub fn nodal_s_params(cells: &[CellImmittance], f: f64, z0: f64) -> [Complex64; 4] {
    let n = cells.len();
    let w = 2.0 * PI * f;
    let mut y = DMatrix::<Complex64>::zeros(n + 1, n + 1);
    for (i, c) in cells.iter().enumerate() {
        // series branch i -> i+1: inductor in parallel with a capacitor
        let ys = Complex64::new(0.0, -1.0 / (w * c.series_inductance))
            + Complex64::new(0.0, w * c.series_capacitance);
        y[(i, i)] += ys;
        y[(i + 1, i + 1)] += ys;
        y[(i, i + 1)] -= ys;
        y[(i + 1, i)] -= ys;
        y[(i + 1, i + 1)] += Complex64::new(0.0, w * c.shunt_capacitance);
    }
    let g = Complex64::new(1.0 / z0, 0.0);
    y[(0, 0)] += g;
    y[(n, n)] += g;
    let lu = y.lu();
    let solve = |node: usize| {
        let mut rhs = DVector::<Complex64>::zeros(n + 1);
        rhs[node] = Complex64::new(2.0 / z0, 0.0);
        lu.solve(&rhs).expect("nodal matrix is nonsingular")
    };
    let v1 = solve(0);
    let v2 = solve(n);
    let one = Complex64::new(1.0, 0.0);
    [v1[0] - one, v2[0], v1[n], v2[n] - one]
}

/// Independent SNAIL potential derivatives (Es = 1, El = Es/α) at phase
/// `phi` and external flux `flux` in Φ0; index `d` is the derivative order.
pub fn snail_derivative(alpha: f64, flux: f64, phi: f64, d: u32) -> f64 {
    let el = 1.0 / alpha;
    let u = (2.0 * PI * flux - phi) / 3.0;
    match d {
        1 => phi.sin() - el * u.sin(),
        2 => phi.cos() + el / 3.0 * u.cos(),
        3 => -phi.sin() + el / 9.0 * u.sin(),
        4 => -phi.cos() - el / 27.0 * u.cos(),
        _ => unreachable!(),
    }
}

/// Phase minimum by Newton iteration on the first derivative.
pub fn snail_minimum(alpha: f64, flux: f64) -> f64 {
    // the minimum sits between 0 and the flux-driven offset
    let mut phi = 2.0 * PI * flux * alpha / (1.0 + 3.0 * alpha);
    for _ in 0..100 {
        let step = snail_derivative(alpha, flux, phi, 1) / snail_derivative(alpha, flux, phi, 2);
        phi -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    phi
}

/// `(c2, c3, c4)` relative to Es from the closed-form derivatives.
pub fn snail_coefficients(alpha: f64, flux: f64) -> (f64, f64, f64) {
    let phi = snail_minimum(alpha, flux);
    (
        snail_derivative(alpha, flux, phi, 2) / 2.0,
        snail_derivative(alpha, flux, phi, 3) / 6.0,
        snail_derivative(alpha, flux, phi, 4) / 24.0,
    )
}

/// Prints a uniform one-line verdict and fails the test on `false`.
pub fn verdict(id: u32, name: &str, ok: bool, detail: impl std::fmt::Display) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {id:>2} {name}: {detail}");
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}
