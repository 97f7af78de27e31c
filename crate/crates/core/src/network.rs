//! Linear two-port model of a loaded SNAIL transmission line.
//!
//! Each unit cell is an L-section: the SNAIL's small-signal inductance in
//! series, followed by a parallel-plate ground capacitance. A macrocell is
//! `P - 1` unloaded cells followed by one loaded cell, and the device is
//! `N / P` macrocells in a chain.

use std::f64::consts::PI;
use std::ops::Mul;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::{SQUARE_MICRON, VACUUM_PERMITTIVITY};
use crate::error::{Error, Result};
use crate::snail::{self, JunctionSpec, SnailSpec};

const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Entries are renormalized once they exceed this magnitude.
const RESCALE_THRESHOLD: f64 = 1e150;

/// Names of the design dimensions in their canonical order.
pub const PARAM_NAMES: [&str; 7] = ["A_J", "rho_Ic", "alpha", "t", "L_load", "C_load", "pitch"];

/// One point of the design space plus the cell count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    /// Small junction area in µm².
    #[serde(rename = "A_J_um2")]
    pub junction_area: f64,
    /// Critical current density in µA/µm².
    #[serde(rename = "rho_Ic_uA_um2")]
    pub current_density: f64,
    pub alpha: f64,
    /// Dielectric thickness in nm.
    #[serde(rename = "t_nm")]
    pub dielectric_thickness: f64,
    #[serde(rename = "L_load")]
    pub inductance_load_ratio: f64,
    #[serde(rename = "C_load")]
    pub capacitance_load_ratio: f64,
    pub pitch: u32,
    pub cell_count: u32,
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("junction area", self.junction_area),
            ("current density", self.current_density),
            ("dielectric thickness", self.dielectric_thickness),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("inductance load ratio", self.inductance_load_ratio),
            ("capacitance load ratio", self.capacitance_load_ratio),
        ] {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.pitch < 2 {
            return Err(Error::Config(format!("pitch must be >= 2, got {}", self.pitch)));
        }
        if self.cell_count == 0 {
            return Err(Error::Config("cell count must be > 0".into()));
        }
        if self.cell_count % self.pitch != 0 {
            return Err(Error::Config(format!(
                "cell count {} is not divisible by pitch {}",
                self.cell_count, self.pitch
            )));
        }
        Ok(())
    }

    pub fn junction(&self) -> Result<JunctionSpec> {
        JunctionSpec::new(self.junction_area, self.current_density)
    }

    /// Design coordinates in [`PARAM_NAMES`] order.
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.junction_area,
            self.current_density,
            self.alpha,
            self.dielectric_thickness,
            self.inductance_load_ratio,
            self.capacitance_load_ratio,
            f64::from(self.pitch),
        ]
    }

    /// Inverse of [`DeviceParams::as_array`].
    pub fn from_array(v: [f64; 7], cell_count: u32) -> Self {
        Self {
            junction_area: v[0],
            current_density: v[1],
            alpha: v[2],
            dielectric_thickness: v[3],
            inductance_load_ratio: v[4],
            capacitance_load_ratio: v[5],
            pitch: v[6].round() as u32,
            cell_count,
        }
    }
}

/// Geometry and material constants that turn design parameters into cell
/// immittances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellConfig {
    pub relative_permittivity: f64,
    /// Ground-capacitor pad area in µm².
    pub pad_area_um2: f64,
    /// Small-junction capacitance in fF. Large junctions scale with area.
    pub junction_capacitance_ff: f64,
    /// Flux-line coupling in Φ0 per µA of line current.
    pub flux_line_mutual: Option<f64>,
    /// Port reference impedance in Ω.
    pub ref_impedance: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            relative_permittivity: 9.8,
            pad_area_um2: 30.0,
            junction_capacitance_ff: 0.0,
            flux_line_mutual: None,
            ref_impedance: 50.0,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.relative_permittivity > 0.0) || !(self.pad_area_um2 > 0.0) {
            return Err(Error::Config(
                "relative permittivity and pad area must be > 0".into(),
            ));
        }
        if !(self.junction_capacitance_ff >= 0.0) {
            return Err(Error::Config("junction capacitance must be >= 0".into()));
        }
        if !(self.ref_impedance > 0.0) {
            return Err(Error::Config("reference impedance must be > 0".into()));
        }
        Ok(())
    }

    /// Parallel-plate ground capacitance for a dielectric of `thickness_nm`.
    pub fn ground_capacitance(&self, thickness_nm: f64) -> f64 {
        VACUUM_PERMITTIVITY * self.relative_permittivity * self.pad_area_um2 * SQUARE_MICRON
            / (thickness_nm * 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellImmittance {
    /// Series inductance in H.
    pub series_inductance: f64,
    /// Shunt capacitance to ground in F.
    pub shunt_capacitance: f64,
    /// Capacitance in parallel with the series inductance in F (usually 0).
    #[serde(default)]
    pub series_capacitance: f64,
}

impl CellImmittance {
    pub fn new(series_inductance: f64, shunt_capacitance: f64) -> Self {
        Self {
            series_inductance,
            shunt_capacitance,
            series_capacitance: 0.0,
        }
    }

    pub fn series_impedance(&self, omega: f64) -> Complex64 {
        let l = self.series_inductance;
        Complex64::new(0.0, omega * l) / (1.0 - omega * omega * l * self.series_capacitance)
    }

    pub fn shunt_admittance(&self, omega: f64) -> Complex64 {
        Complex64::new(0.0, omega * self.shunt_capacitance)
    }
}

/// Uniform frequency grid `start + i·step`, `i = 0..=floor((stop-start)/step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl FrequencyGrid {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(stop > start) || !(start >= 0.0) {
            return Err(Error::Config(format!(
                "invalid frequency grid: start={start}, stop={stop}, step={step}"
            )));
        }
        Ok(Self { start, stop, step })
    }

    pub fn len(&self) -> usize {
        ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn freq(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.freq(i)).collect()
    }
}

/// 2×2 chain (ABCD) matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Abcd {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl Abcd {
    pub const IDENTITY: Abcd = Abcd {
        a: ONE,
        b: ZERO,
        c: ZERO,
        d: ONE,
    };

    pub fn series(z: Complex64) -> Self {
        Abcd {
            b: z,
            ..Self::IDENTITY
        }
    }

    pub fn shunt(y: Complex64) -> Self {
        Abcd {
            c: y,
            ..Self::IDENTITY
        }
    }

    pub fn det(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }

    fn max_norm(&self) -> f64 {
        self.a
            .norm()
            .max(self.b.norm())
            .max(self.c.norm())
            .max(self.d.norm())
    }

    fn scale(&self, s: f64) -> Self {
        Abcd {
            a: self.a * s,
            b: self.b * s,
            c: self.c * s,
            d: self.d * s,
        }
    }
}

impl Mul for Abcd {
    type Output = Abcd;

    fn mul(self, r: Abcd) -> Abcd {
        Abcd {
            a: self.a * r.a + self.b * r.c,
            b: self.a * r.b + self.b * r.d,
            c: self.c * r.a + self.d * r.c,
            d: self.c * r.b + self.d * r.d,
        }
    }
}

/// A cascaded chain matrix `exp(log_scale) · abcd` with its determinant
/// tracked separately, since `ad - bc` cancels catastrophically inside
/// stopbands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainMatrix {
    pub abcd: Abcd,
    pub log_scale: f64,
    pub det: Complex64,
}

impl ChainMatrix {
    fn from_abcd(m: Abcd) -> Self {
        ChainMatrix {
            abcd: m,
            log_scale: 0.0,
            det: m.det(),
        }
    }

    fn compose(&self, r: &ChainMatrix) -> ChainMatrix {
        let mut out = ChainMatrix {
            abcd: self.abcd * r.abcd,
            log_scale: self.log_scale + r.log_scale,
            det: self.det * r.det,
        };
        let m = out.abcd.max_norm();
        if m > RESCALE_THRESHOLD {
            out.abcd = out.abcd.scale(1.0 / m);
            out.log_scale += m.ln();
        }
        out
    }

    fn pow(&self, mut n: u32) -> ChainMatrix {
        let mut result = ChainMatrix::from_abcd(Abcd::IDENTITY);
        let mut base = *self;
        while n > 0 {
            if n & 1 == 1 {
                result = result.compose(&base);
            }
            n >>= 1;
            if n > 0 {
                base = base.compose(&base);
            }
        }
        result
    }

    /// Unscaled matrix; overflows to infinity for very deep stopbands.
    pub fn unscaled(&self) -> Abcd {
        self.abcd.scale(self.log_scale.exp())
    }
}

/// Unloaded and loaded cell immittances for `p` at external flux `flux_ext`.
pub fn build_cells(
    p: &DeviceParams,
    flux_ext: f64,
    cfg: &CellConfig,
) -> Result<(CellImmittance, CellImmittance)> {
    p.validate()?;
    cfg.validate()?;
    let junction = p.junction()?;
    let inductance = |j: JunctionSpec| -> Result<f64> {
        let e = snail::expand_potential(&SnailSpec::new(j, p.alpha, flux_ext)?)?;
        snail::effective_inductance(&e)
    };
    // small junction plus three large ones (each A/α) in series
    let loop_capacitance = |area_factor: f64| {
        let cj = cfg.junction_capacitance_ff * 1e-15 * area_factor;
        cj + cj / (3.0 * p.alpha)
    };
    let cg = cfg.ground_capacitance(p.dielectric_thickness);

    let unloaded = CellImmittance {
        series_inductance: inductance(junction)?,
        shunt_capacitance: cg,
        series_capacitance: loop_capacitance(1.0),
    };
    let loaded = if p.inductance_load_ratio == 1.0 && p.capacitance_load_ratio == 1.0 {
        unloaded
    } else {
        let factor = 1.0 / p.inductance_load_ratio;
        CellImmittance {
            series_inductance: inductance(junction.scaled(factor)?)?,
            shunt_capacitance: cg * p.capacitance_load_ratio,
            series_capacitance: loop_capacitance(factor),
        }
    };
    for c in [&unloaded, &loaded] {
        if !(c.series_inductance > 0.0 && c.shunt_capacitance > 0.0) {
            return Err(Error::Domain(format!("nonpositive cell immittance: {c:?}")));
        }
    }
    Ok((unloaded, loaded))
}

/// L-section chain matrix: series impedance first, then shunt admittance.
pub fn cell_abcd(c: &CellImmittance, f: f64) -> Abcd {
    let omega = 2.0 * PI * f;
    Abcd::series(c.series_impedance(omega)) * Abcd::shunt(c.shunt_admittance(omega))
}

/// Left-to-right product over an arbitrary list of cells.
pub fn cascade_cells(cells: &[CellImmittance], f: f64) -> ChainMatrix {
    cells
        .iter()
        .fold(ChainMatrix::from_abcd(Abcd::IDENTITY), |acc, c| {
            acc.compose(&ChainMatrix::from_abcd(cell_abcd(c, f)))
        })
}

/// Total chain matrix of the periodic line at one frequency.
pub fn macrocell_chain(
    p: &DeviceParams,
    unloaded: &CellImmittance,
    loaded: &CellImmittance,
    f: f64,
) -> ChainMatrix {
    let u = ChainMatrix::from_abcd(cell_abcd(unloaded, f));
    let l = ChainMatrix::from_abcd(cell_abcd(loaded, f));
    let macro_cell = u.pow(p.pitch - 1).compose(&l);
    macro_cell.pow(p.cell_count / p.pitch)
}

/// Per-frequency total chain matrices `(U^(P-1) L)^(N/P)`.
pub fn cascade(
    p: &DeviceParams,
    grid: &FrequencyGrid,
    cells: (&CellImmittance, &CellImmittance),
) -> Result<Vec<ChainMatrix>> {
    p.validate()?;
    Ok((0..grid.len())
        .into_par_iter()
        .map(|i| macrocell_chain(p, cells.0, cells.1, grid.freq(i)))
        .collect())
}

/// `[S11, S12, S21, S22]` of a chain matrix at reference impedance `z0`.
pub fn abcd_to_s(m: &ChainMatrix, z0: f64) -> Result<[Complex64; 4]> {
    if !(z0 > 0.0) {
        return Err(Error::Domain(format!(
            "reference impedance must be > 0, got {z0}"
        )));
    }
    let Abcd { a, b, c, d } = m.abcd;
    let (bz, cz) = (b / z0, c * z0);
    let den = a + bz + cz + d;
    if !(den.norm() > 0.0) || !den.is_finite() {
        return Err(Error::Numerical(format!(
            "singular S-parameter denominator {den}"
        )));
    }
    let inv_scale = (-m.log_scale).exp();
    Ok([
        (a + bz - cz - d) / den,
        m.det * 2.0 * inv_scale / den,
        2.0 * inv_scale / den,
        (-a + bz - cz + d) / den,
    ])
}

/// Scattering parameters on an ascending frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPortResponse {
    pub freqs: Vec<f64>,
    pub s11: Vec<Complex64>,
    pub s12: Vec<Complex64>,
    pub s21: Vec<Complex64>,
    pub s22: Vec<Complex64>,
    pub ref_impedance: f64,
}

impl TwoPortResponse {
    pub fn len(&self) -> usize {
        self.freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs.is_empty()
    }

    /// Largest `||S11|² + |S21|² - 1|` over the grid.
    pub fn max_power_imbalance(&self) -> f64 {
        self.s11
            .iter()
            .zip(&self.s21)
            .map(|(a, b)| (a.norm_sqr() + b.norm_sqr() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|S12 - S21|` over the grid.
    pub fn max_reciprocity_error(&self) -> f64 {
        self.s12
            .iter()
            .zip(&self.s21)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Half-trace of the total chain matrix recovered from the S-parameters.
    fn chain_half_trace(&self, i: usize) -> Complex64 {
        let (s11, s12, s21, s22) = (self.s11[i], self.s12[i], self.s21[i], self.s22[i]);
        (ONE - s11 * s22 + s12 * s21) / (s21 * 2.0)
    }
}

/// Linear response of the device at external flux `flux_ext` (Φ0).
pub fn simulate_linear(
    p: &DeviceParams,
    flux_ext: f64,
    grid: &FrequencyGrid,
    cfg: &CellConfig,
) -> Result<TwoPortResponse> {
    let (unloaded, loaded) = build_cells(p, flux_ext, cfg)?;
    let chain = cascade(p, grid, (&unloaded, &loaded))?;
    let n = chain.len();
    let mut resp = TwoPortResponse {
        freqs: grid.points(),
        s11: Vec::with_capacity(n),
        s12: Vec::with_capacity(n),
        s21: Vec::with_capacity(n),
        s22: Vec::with_capacity(n),
        ref_impedance: cfg.ref_impedance,
    };
    for (i, m) in chain.iter().enumerate() {
        let [s11, s12, s21, s22] = abcd_to_s(m, cfg.ref_impedance)
            .map_err(|e| Error::Numerical(format!("at f = {} Hz: {e}", resp.freqs[i])))?;
        resp.s11.push(s11);
        resp.s12.push(s12);
        resp.s21.push(s21);
        resp.s22.push(s22);
    }
    Ok(resp)
}

/// Per-cell wavenumber versus frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionCurve {
    pub freqs: Vec<f64>,
    /// Bloch wavenumber in rad/cell.
    pub k: Vec<f64>,
    /// `-unwrap(arg S21) / N` in rad/cell, before Bloch refinement.
    pub k_raw: Vec<f64>,
}

impl DispersionCurve {
    /// Linearly interpolated wavenumber at `f`.
    pub fn k_at(&self, f: f64) -> Result<f64> {
        crate::util::interp(&self.freqs, &self.k, f).ok_or_else(|| {
            Error::Coverage(format!(
                "frequency {f} Hz outside dispersion grid [{}, {}] Hz",
                self.freqs.first().copied().unwrap_or(f64::NAN),
                self.freqs.last().copied().unwrap_or(f64::NAN)
            ))
        })
    }
}

fn wrap_phase(x: f64) -> f64 {
    let y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y - 2.0 * PI
    } else {
        y
    }
}

/// Wavenumber `k(f) = -arg S21(f) / N`, unwrapped from DC.
///
/// For a lossless periodic chain, `(A + D) / 2 = cos Φ` where `Φ` is the
/// total Bloch phase and `-arg S21` lies in the same quadrant as `Φ`. The
/// unwrapped transmission phase therefore picks the branch of `acos`, which
/// removes the impedance-mismatch ripple from the extracted wavenumber.
/// Inside stopbands `Φ` is pinned to a multiple of π.
pub fn dispersion(resp: &TwoPortResponse, n_cells: u32) -> Result<DispersionCurve> {
    if resp.is_empty() || resp.freqs[0] != 0.0 {
        return Err(Error::Config("dispersion requires DC-anchored grid".into()));
    }
    if n_cells == 0 {
        return Err(Error::Config("cell count must be > 0".into()));
    }
    let n = resp.len();
    let cells = f64::from(n_cells);
    let mut k = Vec::with_capacity(n);
    let mut k_raw = Vec::with_capacity(n);

    let raw_phase = |i: usize| -> Option<f64> {
        let s = resp.s21[i];
        (s.norm() > 0.0 && s.is_finite()).then(|| -s.arg())
    };

    let mut total = 0.0_f64;
    let mut prev_total: Option<f64> = None;
    let mut raw_total = raw_phase(0).unwrap_or(0.0);
    let mut last_raw = raw_phase(0);
    k.push(0.0);
    k_raw.push(raw_total / cells);

    for i in 1..n {
        let raw = raw_phase(i);
        let raw_step = match (last_raw, raw) {
            (Some(prev), Some(cur)) => {
                let d = wrap_phase(cur - prev);
                raw_total += d;
                Some(d)
            }
            _ => None,
        };
        if raw.is_some() {
            last_raw = raw;
        }
        // S21 phase is distorted near the finite-chain resonances, so the
        // extracted phase itself is extrapolated once two points exist
        let predicted = match prev_total {
            Some(p) if total > p => Some(2.0 * total - p),
            _ => raw_step.map(|d| total + d),
        };
        let half_trace = resp.chain_half_trace(i).re;
        prev_total = Some(total);
        total = pick_branch(total, predicted, half_trace);
        k.push(total / cells);
        k_raw.push(raw_total / cells);
    }
    Ok(DispersionCurve {
        freqs: resp.freqs.clone(),
        k,
        k_raw,
    })
}

/// Chooses the total Bloch phase `>= prev` consistent with `cos Φ = c`,
/// closest to `predicted` (or smallest when no prediction is available).
fn pick_branch(prev: f64, predicted: Option<f64>, c: f64) -> f64 {
    let floor = prev - 1e-9 * prev.abs().max(1.0);
    let target = predicted.unwrap_or(prev).max(prev);
    let mut best: Option<f64> = None;
    let mut offer = |cand: f64| {
        if cand < floor {
            return;
        }
        let better = match best {
            None => true,
            Some(b) => {
                let (db, dc) = ((b - target).abs(), (cand - target).abs());
                if predicted.is_some() {
                    dc < db
                } else {
                    cand < b
                }
            }
        };
        if better {
            best = Some(cand);
        }
    };
    let m0 = (target / (2.0 * PI)).floor();
    if c.is_finite() && c.abs() <= 1.0 {
        let base = c.acos();
        for m in -1..=2 {
            let centre = 2.0 * PI * (m0 + f64::from(m));
            offer(centre + base);
            offer(centre - base);
        }
    } else {
        // stopband: cos Φ = ±cosh(γ); the first multiple of π at or above
        // the previous phase whose parity follows the sign
        let want_even = !c.is_finite() || c > 0.0;
        let mut m = (floor / PI).ceil();
        if c.is_finite() && (m.rem_euclid(2.0) == 0.0) != want_even {
            m += 1.0;
        }
        return m * PI;
    }
    best.unwrap_or(prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn pstar() -> DeviceParams {
        DeviceParams {
            junction_area: 0.49,
            current_density: 0.9,
            alpha: 0.23,
            dielectric_thickness: 9.0,
            inductance_load_ratio: 1.5,
            capacitance_load_ratio: 1.0,
            pitch: 3,
            cell_count: 360,
        }
    }

    fn uniform(n: u32) -> DeviceParams {
        DeviceParams {
            inductance_load_ratio: 1.0,
            capacitance_load_ratio: 1.0,
            pitch: 2,
            cell_count: n,
            ..pstar()
        }
    }

    #[test]
    fn identity_ratios_give_identical_cells() {
        let (u, l) = build_cells(&uniform(10), 0.38, &CellConfig::default()).unwrap();
        assert_eq!(u, l);
    }

    #[test]
    fn ground_capacitance_follows_inverse_thickness() {
        let cfg = CellConfig::default();
        assert_relative_eq!(
            cfg.ground_capacitance(18.0),
            cfg.ground_capacitance(9.0) / 2.0,
            max_relative = 1e-15
        );
        let p = DeviceParams {
            dielectric_thickness: 18.0,
            ..pstar()
        };
        let (a, _) = build_cells(&pstar(), 0.38, &cfg).unwrap();
        let (b, _) = build_cells(&p, 0.38, &cfg).unwrap();
        assert_relative_eq!(
            b.shunt_capacitance,
            a.shunt_capacitance / 2.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn loaded_cell_scales_inductance() {
        let (u, l) = build_cells(&pstar(), 0.384, &CellConfig::default()).unwrap();
        let ratio = l.series_inductance / u.series_inductance;
        assert!((ratio - 1.5).abs() < 0.03, "{ratio}");
        assert_eq!(l.shunt_capacitance, u.shunt_capacitance);
    }

    #[test]
    fn cell_abcd_limits() {
        let cell = CellImmittance::new(1e-9, 3e-13);
        assert_eq!(cell_abcd(&cell, 0.0), Abcd::IDENTITY);
        let zero = CellImmittance::new(0.0, 0.0);
        assert_eq!(cell_abcd(&zero, 7e9), Abcd::IDENTITY);
        for f in [1e9, 5e9, 3e10] {
            assert!((cell_abcd(&cell, f).det() - ONE).norm() < 1e-14);
        }
    }

    #[test]
    fn periodic_cascade_matches_naive_product() {
        let p = DeviceParams {
            cell_count: 8,
            pitch: 2,
            ..pstar()
        };
        let (u, l) = build_cells(&p, 0.3, &CellConfig::default()).unwrap();
        for f in [0.5e9, 6e9, 11.5e9, 19e9] {
            let fast = macrocell_chain(&p, &u, &l, f).unscaled();
            let mut naive = Abcd::IDENTITY;
            for i in 0..8 {
                let cell = if i % 2 == 1 { &l } else { &u };
                naive = naive * cell_abcd(cell, f);
            }
            for (x, y) in [
                (fast.a, naive.a),
                (fast.b, naive.b),
                (fast.c, naive.c),
                (fast.d, naive.d),
            ] {
                assert!((x - y).norm() < 1e-12 * (1.0 + y.norm()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn cascade_rejects_indivisible_pitch() {
        let p = DeviceParams {
            cell_count: 10,
            ..pstar()
        };
        let grid = FrequencyGrid::new(0.0, 1e9, 1e8).unwrap();
        let cell = CellImmittance::new(1e-9, 1e-13);
        match cascade(&p, &grid, (&cell, &cell)) {
            Err(Error::Config(msg)) => assert!(msg.contains("not divisible")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn abcd_to_s_closed_forms() {
        let s = abcd_to_s(&ChainMatrix::from_abcd(Abcd::IDENTITY), 50.0).unwrap();
        assert_eq!(s[0], ZERO);
        assert_eq!(s[2], ONE);

        let s = abcd_to_s(&ChainMatrix::from_abcd(Abcd::series(c(50.0, 0.0))), 50.0).unwrap();
        assert!((s[0] - c(1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!((s[2] - c(2.0 / 3.0, 0.0)).norm() < 1e-15);

        let s = abcd_to_s(&ChainMatrix::from_abcd(Abcd::series(c(0.0, 100.0))), 50.0).unwrap();
        assert_relative_eq!(s[2].norm(), 1.0 / 2f64.sqrt(), max_relative = 1e-15);
        assert_eq!(s[1], s[2]);
    }

    #[test]
    fn abcd_to_s_rejects_singular_denominator() {
        let m = Abcd {
            a: ZERO,
            b: ZERO,
            c: ZERO,
            d: ZERO,
        };
        assert!(abcd_to_s(&ChainMatrix::from_abcd(m), 50.0).is_err());
        assert!(abcd_to_s(&ChainMatrix::from_abcd(Abcd::IDENTITY), 0.0).is_err());
    }

    #[test]
    fn zero_cells_rejected() {
        let p = DeviceParams {
            cell_count: 0,
            ..pstar()
        };
        let grid = FrequencyGrid::new(0.0, 1e9, 1e8).unwrap();
        assert!(simulate_linear(&p, 0.3, &grid, &CellConfig::default()).is_err());
    }

    #[test]
    fn uniform_line_transmission_matches_bloch_formula() {
        // |S21|^-2 = cos²Φ + X² sin²Φ for the L-section chain, X from the
        // Bloch analysis of a single cell.
        let p = uniform(40);
        let cfg = CellConfig::default();
        let (cell, _) = build_cells(&p, 0.2, &cfg).unwrap();
        let grid = FrequencyGrid::new(0.0, 8e9, 0.1e9).unwrap();
        let resp = simulate_linear(&p, 0.2, &grid, &cfg).unwrap();
        let (l, cap, z0) = (cell.series_inductance, cell.shunt_capacitance, cfg.ref_impedance);
        for (i, &f) in resp.freqs.iter().enumerate().skip(1) {
            let w = 2.0 * PI * f;
            let theta = (1.0 - w * w * l * cap / 2.0).acos();
            let x = (w * l / z0 + w * cap * z0) / (2.0 * theta.sin());
            let phi = 40.0 * theta;
            let expect = 1.0 / (phi.cos().powi(2) + x * x * phi.sin().powi(2)).sqrt();
            assert_relative_eq!(resp.s21[i].norm(), expect, max_relative = 1e-10);
            assert!(resp.s21[i].norm() >= 1.0 / x - 1e-12);
        }
    }

    #[test]
    fn pstar_response_is_lossless_and_reciprocal() {
        let grid = FrequencyGrid::new(0.0, 24e9, 10e6).unwrap();
        let flux = snail::kerr_free_flux(0.23, &pstar().junction().unwrap()).unwrap();
        let resp = simulate_linear(&pstar(), flux, &grid, &CellConfig::default()).unwrap();
        assert_eq!(resp.len(), 2401);
        assert!(
            resp.max_power_imbalance() < 1e-9,
            "{}",
            resp.max_power_imbalance()
        );
        assert!(
            resp.max_reciprocity_error() < 1e-12,
            "{}",
            resp.max_reciprocity_error()
        );
    }

    #[test]
    fn determinant_stays_unimodular() {
        let p = pstar();
        let (u, l) = build_cells(&p, 0.38, &CellConfig::default()).unwrap();
        let grid = FrequencyGrid::new(0.0, 24e9, 50e6).unwrap();
        for m in cascade(&p, &grid, (&u, &l)).unwrap() {
            assert!((m.det - ONE).norm() < 1e-9);
        }
        // direct determinant on a short passband chain
        let short = DeviceParams { cell_count: 12, ..p };
        for f in [1e9, 4e9, 8e9] {
            let m = macrocell_chain(&short, &u, &l, f).unscaled();
            assert!((m.det() - ONE).norm() < 1e-9);
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let grid = FrequencyGrid::new(0.0, 24e9, 100e6).unwrap();
        let cfg = CellConfig::default();
        let a = simulate_linear(&pstar(), 0.38, &grid, &cfg).unwrap();
        let b = simulate_linear(&pstar(), 0.38, &grid, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dispersion_requires_dc() {
        let grid = FrequencyGrid::new(1e9, 2e9, 1e8).unwrap();
        let resp = simulate_linear(&uniform(10), 0.3, &grid, &CellConfig::default()).unwrap();
        let err = dispersion(&resp, 10).unwrap_err();
        assert!(err.to_string().contains("DC-anchored"));
    }

    #[test]
    fn uniform_ladder_dispersion_matches_bloch() {
        let p = uniform(60);
        let cfg = CellConfig::default();
        let (cell, _) = build_cells(&p, 0.3, &cfg).unwrap();
        let grid = FrequencyGrid::new(0.0, 30e9, 10e6).unwrap();
        let resp = simulate_linear(&p, 0.3, &grid, &cfg).unwrap();
        let disp = dispersion(&resp, 60).unwrap();
        assert_eq!(disp.k[0], 0.0);
        let lc = cell.series_inductance * cell.shunt_capacitance;
        let cutoff = 1.0 / (PI * lc.sqrt());
        for (i, &f) in disp.freqs.iter().enumerate() {
            if f > 0.9 * cutoff {
                break;
            }
            let w = 2.0 * PI * f;
            let exact = (1.0 - w * w * lc / 2.0).acos();
            assert!(
                (disp.k[i] - exact).abs() < 1e-6,
                "f={f}: {} vs {exact}",
                disp.k[i]
            );
        }
    }

    #[test]
    fn loaded_line_has_stopband() {
        let p = pstar();
        let grid = FrequencyGrid::new(0.0, 24e9, 10e6).unwrap();
        let resp = simulate_linear(&p, 0.384, &grid, &CellConfig::default()).unwrap();
        let disp = dispersion(&resp, p.cell_count).unwrap();
        // inside the first gap k is pinned to π/P and transmission vanishes
        let gap: Vec<usize> = (0..resp.len())
            .filter(|&i| resp.s21[i].norm() < 1e-6 && resp.freqs[i] < 16e9)
            .collect();
        assert!(!gap.is_empty());
        for &i in &gap[2..gap.len() - 2] {
            assert!((disp.k[i] - PI / 3.0).abs() < 1e-9, "{}", disp.k[i]);
        }
        // monotone, with a flat segment at the gap
        assert!(disp.k.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }
}
