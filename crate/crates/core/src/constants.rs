//! Physical constants in SI units (CODATA 2018 exact/recommended values).

use std::f64::consts::PI;

/// Magnetic flux quantum h/2e in Wb.
pub const FLUX_QUANTUM: f64 = 2.067_833_848e-15;

/// Vacuum permittivity in F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Reduced flux quantum Φ0/2π in Wb.
pub const REDUCED_FLUX_QUANTUM: f64 = FLUX_QUANTUM / (2.0 * PI);

pub const MICRO: f64 = 1e-6;
pub const NANO: f64 = 1e-9;
pub const GIGA: f64 = 1e9;
/// 1 µm² in m².
pub const SQUARE_MICRON: f64 = 1e-12;
