//! Single SNAIL loop physics.
//!
//! A SNAIL is one small junction (area `A_J`) in parallel with a chain of
//! three larger junctions (area `A_J / α` each), threaded by an external flux.
//! Taking the small-junction phase `φ` as the coordinate and splitting the
//! remaining loop phase evenly over the large junctions, the potential is
//!
//! ```text
//! U(φ) = -E_Js cos φ - 3 E_Jl cos((φ_ext - φ) / 3),   E_Jl = E_Js / α
//! ```
//!
//! Around the minimum `φ_min` we use `U(φ_min + δ) = U0 + c2 δ² + c3 δ³ + c4 δ⁴`,
//! i.e. `cn = U⁽ⁿ⁾(φ_min) / n!`. All coefficients are in joules per radianⁿ.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constants::{MICRO, REDUCED_FLUX_QUANTUM};
use crate::error::{Error, Result};

/// Number of large junctions in the SNAIL chain.
pub const LARGE_JUNCTIONS: u32 = 3;

/// Samples per `2π` used when scanning the potential for its minimum.
const PHASE_SCAN_PER_2PI: usize = 2048;
/// Points used to bracket the Kerr-free flux.
const KERR_SCAN_POINTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JunctionSpec {
    /// Junction area in µm².
    pub area_um2: f64,
    /// Critical current density in µA/µm².
    pub current_density: f64,
}

impl JunctionSpec {
    pub fn new(area_um2: f64, current_density: f64) -> Result<Self> {
        if !(area_um2 > 0.0 && area_um2.is_finite()) {
            return Err(Error::Domain(format!(
                "junction area must be > 0, got {area_um2}"
            )));
        }
        if !(current_density > 0.0 && current_density.is_finite()) {
            return Err(Error::Domain(format!(
                "critical current density must be > 0, got {current_density}"
            )));
        }
        Ok(Self {
            area_um2,
            current_density,
        })
    }

    /// Same junction with its area multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.area_um2 * factor, self.current_density)
    }
}

/// Critical current `I_c = ρ_Ic · A_J` in µA.
pub fn critical_current(j: &JunctionSpec) -> f64 {
    j.area_um2 * j.current_density
}

/// Josephson inductance `Φ0 / (2π I_c)` in henry, for `i_c` in µA.
pub fn josephson_inductance(i_c_ua: f64) -> Result<f64> {
    if !(i_c_ua > 0.0) {
        return Err(Error::Domain(format!(
            "critical current must be > 0 µA, got {i_c_ua}"
        )));
    }
    Ok(REDUCED_FLUX_QUANTUM / (i_c_ua * MICRO))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnailSpec {
    pub small_junction: JunctionSpec,
    /// Small-to-large junction area ratio, in (0, 1).
    pub alpha: f64,
    /// External flux in units of Φ0, in [0, 1).
    pub flux_ext: f64,
}

impl SnailSpec {
    pub fn new(small_junction: JunctionSpec, alpha: f64, flux_ext: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if !(0.0..1.0).contains(&flux_ext) {
            return Err(Error::Domain(format!(
                "external flux must lie in [0, 1) Φ0, got {flux_ext}"
            )));
        }
        Ok(Self {
            small_junction,
            alpha,
            flux_ext,
        })
    }

    pub fn n_large(&self) -> u32 {
        LARGE_JUNCTIONS
    }

    /// Josephson energy of the small junction, `Φ0 I_c / 2π`, in joules.
    pub fn small_energy(&self) -> f64 {
        REDUCED_FLUX_QUANTUM * critical_current(&self.small_junction) * MICRO
    }

    /// Josephson energy of one large junction in joules.
    pub fn large_energy(&self) -> f64 {
        self.small_energy() / self.alpha
    }

    fn external_phase(&self) -> f64 {
        2.0 * PI * self.flux_ext
    }

    /// `[U', U'', U''', U'''']` at `phi`.
    fn derivatives(&self, phi: f64) -> [f64; 4] {
        let (es, el) = (self.small_energy(), self.large_energy());
        let n = f64::from(LARGE_JUNCTIONS);
        let u = (self.external_phase() - phi) / n;
        let (sp, cp) = phi.sin_cos();
        let (su, cu) = u.sin_cos();
        [
            es * sp - el * su,
            es * cp + el * cu / n,
            -es * sp + el * su / (n * n),
            -es * cp - el * cu / (n * n * n),
        ]
    }
}

/// Taylor coefficients of the SNAIL potential around its minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialExpansion {
    pub phi_min: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl PotentialExpansion {
    /// `c3 / c2` in 1/rad. Independent of junction area at fixed α and flux.
    pub fn cubic_ratio(&self) -> f64 {
        self.c3 / self.c2
    }
}

/// Potential energy in joules at small-junction phase `phi`.
pub fn potential(s: &SnailSpec, phi: f64) -> f64 {
    let n = f64::from(LARGE_JUNCTIONS);
    -s.small_energy() * phi.cos() - n * s.large_energy() * ((s.external_phase() - phi) / n).cos()
}

/// Phase of the global potential minimum, refined to `|U'| < 1e-12 E_Js`.
///
/// The potential has period `2π·3` in `φ`; one period centred on zero is
/// scanned for sign changes of `U'` and the deepest well is refined by
/// bisection followed by Newton polishing. Ties go to the well nearest zero.
pub fn find_phase_minimum(s: &SnailSpec) -> Result<f64> {
    let n = LARGE_JUNCTIONS as usize;
    let m = PHASE_SCAN_PER_2PI * n;
    let h = 2.0 * PI * n as f64 / m as f64;
    let grid = |j: usize| (j as f64 - (m / 2) as f64) * h;

    let mut best: Option<(f64, f64, f64)> = None; // (U, |φ|, φ)
    let mut consider = |phi: f64| {
        let key = (potential(s, phi), phi.abs());
        match best {
            Some((u, a, _)) if (key.0, key.1) >= (u, a) => {}
            _ => best = Some((key.0, key.1, phi)),
        }
    };

    let mut d_prev = s.derivatives(grid(0))[0];
    for j in 0..m {
        let (lo, hi) = (grid(j), grid(j + 1));
        let d_hi = s.derivatives(hi)[0];
        if d_prev == 0.0 && s.derivatives(lo)[1] > 0.0 {
            consider(lo);
        } else if d_prev < 0.0 && d_hi > 0.0 {
            consider(refine_root(s, lo, hi));
        }
        d_prev = d_hi;
    }

    let (_, _, phi) = best.ok_or_else(|| {
        Error::Numerical(format!(
            "no potential minimum bracketed for alpha={}, flux={} Φ0",
            s.alpha, s.flux_ext
        ))
    })?;
    let d = s.derivatives(phi);
    let tol = 1e-12 * s.small_energy();
    if d[0].abs() >= tol || d[1] <= 0.0 {
        return Err(Error::Numerical(format!(
            "minimum refinement failed: U'={:e} J/rad (tolerance {:e}), U''={:e} at phi={phi}",
            d[0], tol, d[1]
        )));
    }
    Ok(phi)
}

fn refine_root(s: &SnailSpec, mut lo: f64, mut hi: f64) -> f64 {
    // U' < 0 at lo, > 0 at hi
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if s.derivatives(mid)[0] < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut phi = 0.5 * (lo + hi);
    for _ in 0..3 {
        let d = s.derivatives(phi);
        if d[0] == 0.0 {
            break;
        }
        let next = phi - d[0] / d[1];
        if next < lo || next > hi || s.derivatives(next)[0].abs() >= d[0].abs() {
            break;
        }
        phi = next;
    }
    phi
}

/// Analytic Taylor coefficients `c2..c4` at the potential minimum.
pub fn expand_potential(s: &SnailSpec) -> Result<PotentialExpansion> {
    let phi_min = find_phase_minimum(s)?;
    let d = s.derivatives(phi_min);
    Ok(PotentialExpansion {
        phi_min,
        c2: d[1] / 2.0,
        c3: d[2] / 6.0,
        c4: d[3] / 24.0,
    })
}

/// Small-signal inductance `(Φ0/2π)² / (2 c2)` in henry.
pub fn effective_inductance(e: &PotentialExpansion) -> Result<f64> {
    if !(e.c2 > 0.0) {
        return Err(Error::Domain(format!(
            "no stable minimum: c2 = {:e} J must be > 0",
            e.c2
        )));
    }
    Ok(REDUCED_FLUX_QUANTUM * REDUCED_FLUX_QUANTUM / (2.0 * e.c2))
}

/// Normalized quartic coefficient `c4 / c2` at the given flux.
fn quartic_ratio(alpha: f64, junction: &JunctionSpec, flux: f64) -> Result<(f64, f64)> {
    let e = expand_potential(&SnailSpec::new(*junction, alpha, flux)?)?;
    Ok((e.c4 / e.c2, e.c3 / e.c2))
}

/// Kerr-free flux bias `g_bias(α)` in Φ0: the smallest flux in (0, 0.5) where
/// `c4` changes sign while `c3` stays finite.
pub fn kerr_free_flux(alpha: f64, junction: &JunctionSpec) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let flux_at = |i: usize| 0.5 * i as f64 / KERR_SCAN_POINTS as f64;
    let mut prev = quartic_ratio(alpha, junction, flux_at(1))?.0;
    for i in 1..KERR_SCAN_POINTS - 1 {
        let (mut lo, mut hi) = (flux_at(i), flux_at(i + 1));
        let next = quartic_ratio(alpha, junction, hi)?.0;
        if prev.signum() != next.signum() || next == 0.0 {
            let lo_sign = prev.signum();
            while hi - lo > 1e-13 {
                let mid = 0.5 * (lo + hi);
                let v = quartic_ratio(alpha, junction, mid)?.0;
                if v.signum() == lo_sign {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            let (_, c3_ratio) = quartic_ratio(alpha, junction, root)?;
            if c3_ratio.abs() > 1e-6 {
                return Ok(root);
            }
        }
        prev = next;
    }
    Err(Error::Numerical(format!(
        "no Kerr-free point in (0, 0.5) Φ0 for alpha={alpha}"
    )))
}
