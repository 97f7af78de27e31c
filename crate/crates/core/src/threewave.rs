//! Stage 3: three-wave-mixing gain from coupled-mode equations.
//!
//! Signal, idler and pump amplitudes obey
//!
//! ```text
//! dA_s/dx = iκ A_p A_i* e^{-iΔk x}
//! dA_i/dx = iκ A_p A_s* e^{-iΔk x}
//! dA_p/dx = iκ A_s A_i  e^{+iΔk x}
//! ```
//!
//! with `x` in cells, `A_p(0) = ξ = I_p / (2 I_c)` and
//! `κ = |c3 / (2 c2)| √(k_s k_i)`, so that the small-signal gain rate is
//! `g0 = κ ξ`. Wavenumbers come from the linear dispersion of the device.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{dispersion, simulate_linear, CellConfig, DeviceParams, DispersionCurve, FrequencyGrid};
use crate::snail::{critical_current, expand_potential, PotentialExpansion, SnailSpec};
use crate::util::trapezoid_mean;

/// RK4 step in cells.
pub const STEP: f64 = 0.05;
/// Signal seed relative to the pump amplitude.
pub const SEED_RATIO: f64 = 1e-6;
/// Largest accepted step-halving disagreement before integration fails.
pub const MAX_STEP_ERROR: f64 = 1e-6;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Pump and bias settings for one nonlinear run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    /// Pump frequency in Hz.
    pub pump_freq: f64,
    /// Pump amplitude relative to twice the small-junction critical current.
    pub xi: f64,
    /// External flux in Φ0.
    pub flux: f64,
    /// Signal band `[f_lo, f_hi]` in Hz.
    pub signal_band: [f64; 2],
    pub signal_step: f64,
}

impl DriveSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.xi < 1.0) {
            return Err(Error::Domain(format!(
                "pump ratio ξ must lie in [0, 1), got {}",
                self.xi
            )));
        }
        let [lo, hi] = self.signal_band;
        if !(lo > 0.0 && lo < hi && hi < self.pump_freq) {
            return Err(Error::Domain(format!(
                "signal band [{lo}, {hi}] Hz must lie inside (0, f_p = {})",
                self.pump_freq
            )));
        }
        if !(self.signal_step > 0.0) {
            return Err(Error::Domain("signal grid step must be > 0".into()));
        }
        Ok(())
    }

    pub fn signal_freqs(&self) -> Vec<f64> {
        let [lo, hi] = self.signal_band;
        let n = ((hi - lo) / self.signal_step + 1e-9).floor() as usize;
        (0..=n).map(|i| lo + i as f64 * self.signal_step).collect()
    }
}

/// Pump ratio `ξ = I_p / (2 I_c)` for a pump current in µA.
pub fn pump_ratio(pump_ua: f64, critical_current_ua: f64) -> Result<f64> {
    if !(critical_current_ua > 0.0) || !(pump_ua >= 0.0) {
        return Err(Error::Domain(format!(
            "need I_p >= 0 and I_c > 0, got {pump_ua} µA and {critical_current_ua} µA"
        )));
    }
    Ok(pump_ua / (2.0 * critical_current_ua))
}

/// Flux in Φ0 from a bias-line current, given the mutual coefficient in Φ0/µA.
pub fn flux_from_current(current_ua: f64, mutual_phi0_per_ua: Option<f64>) -> Result<f64> {
    match mutual_phi0_per_ua {
        Some(m) => Ok(current_ua * m),
        None => Err(Error::Config(
            "bias current given in µA but no flux-line mutual coefficient configured; \
             give the flux in Φ0 instead"
                .into(),
        )),
    }
}

/// `|c3 / (2 c2)| √(k_s k_i)`, the coupling per unit pump amplitude.
fn coupling_per_pump(e: &PotentialExpansion, k_s: f64, k_i: f64) -> f64 {
    (e.c3 / (2.0 * e.c2)).abs() * (k_s * k_i).max(0.0).sqrt()
}

/// Small-signal gain rate `g0 = |c3 / (2 c2)| ξ √(k_s k_i)` in rad/cell.
pub fn coupling_constant(e: &PotentialExpansion, xi: f64, k_s: f64, k_i: f64) -> f64 {
    coupling_per_pump(e, k_s, k_i) * xi
}

/// Power gain `|cosh(gN) + i (Δk / 2g) sinh(gN)|²`, `g² = g0² - (Δk/2)²`,
/// continued analytically when the mismatch dominates.
pub fn undepleted_gain(g0: f64, delta_k: f64, n_cells: f64) -> f64 {
    let h = delta_k / 2.0;
    let g2 = g0 * g0 - h * h;
    if g2 > 0.0 {
        let g = g2.sqrt();
        let (c, s) = ((g * n_cells).cosh(), (g * n_cells).sinh());
        c * c + (h / g).powi(2) * s * s
    } else if g2 < 0.0 {
        let q = (-g2).sqrt();
        let (c, s) = ((q * n_cells).cos(), (q * n_cells).sin());
        c * c + (h / q).powi(2) * s * s
    } else {
        // g → 0 limit: sinh(gN)/g → N
        1.0 + (h * n_cells).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmeInputs {
    pub k_s: f64,
    pub k_i: f64,
    pub k_p: f64,
    /// `k_p - k_s - k_i` in rad/cell.
    pub delta_k: f64,
    /// `κ` in rad/cell per unit amplitude.
    pub kappa: f64,
    pub cell_count: u32,
}

impl CmeInputs {
    pub fn from_dispersion(
        disp: &DispersionCurve,
        e: &PotentialExpansion,
        f_signal: f64,
        f_pump: f64,
        cell_count: u32,
    ) -> Result<Self> {
        let k_s = disp.k_at(f_signal)?;
        let k_i = disp.k_at(f_pump - f_signal)?;
        let k_p = disp.k_at(f_pump)?;
        Ok(Self {
            k_s,
            k_i,
            k_p,
            delta_k: k_p - k_s - k_i,
            kappa: coupling_per_pump(e, k_s, k_i),
            cell_count,
        })
    }

    pub fn g0(&self, xi: f64) -> f64 {
        self.kappa * xi
    }
}

/// Signal, idler and pump amplitudes.
pub type Amplitudes = [Complex64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmeTrajectory {
    /// Positions 0, 1, ..., N in cells.
    pub x: Vec<f64>,
    pub amplitudes: Vec<Amplitudes>,
    /// Relative change of the output amplitudes when the step is halved.
    pub step_error: f64,
}

impl CmeTrajectory {
    pub fn output(&self) -> Amplitudes {
        *self.amplitudes.last().expect("trajectory includes x = 0")
    }

    /// Largest deviation of `|A_s|² - |A_i|²` and `|A_s|² + |A_p|²` from
    /// their input values.
    pub fn manley_rowe_drift(&self) -> (f64, f64) {
        let inv = |a: &Amplitudes| {
            (
                a[0].norm_sqr() - a[1].norm_sqr(),
                a[0].norm_sqr() + a[2].norm_sqr(),
            )
        };
        let (d0, s0) = inv(&self.amplitudes[0]);
        self.amplitudes.iter().fold((0.0, 0.0), |(md, ms), a| {
            let (d, s) = inv(a);
            (md.max((d - d0).abs()), ms.max((s - s0).abs()))
        })
    }
}

fn rhs(inp: &CmeInputs, x: f64, a: &Amplitudes) -> Amplitudes {
    let rot = Complex64::from_polar(1.0, -inp.delta_k * x);
    let k = I * inp.kappa;
    [
        k * a[2] * a[1].conj() * rot,
        k * a[2] * a[0].conj() * rot,
        k * a[0] * a[1] * rot.conj(),
    ]
}

fn rk4_step(inp: &CmeInputs, x: f64, a: &Amplitudes, h: f64) -> Amplitudes {
    let add = |a: &Amplitudes, k: &Amplitudes, s: f64| [a[0] + k[0] * s, a[1] + k[1] * s, a[2] + k[2] * s];
    let k1 = rhs(inp, x, a);
    let k2 = rhs(inp, x + h / 2.0, &add(a, &k1, h / 2.0));
    let k3 = rhs(inp, x + h / 2.0, &add(a, &k2, h / 2.0));
    let k4 = rhs(inp, x + h, &add(a, &k3, h));
    let mut out = *a;
    for j in 0..3 {
        out[j] += (k1[j] + (k2[j] + k3[j]) * 2.0 + k4[j]) * (h / 6.0);
    }
    out
}

/// Integrates from `x = 0` to `N` with `steps_per_cell` steps, sampling at
/// every cell boundary when `samples` is given.
fn propagate(
    inp: &CmeInputs,
    init: Amplitudes,
    steps_per_cell: usize,
    mut samples: Option<&mut Vec<Amplitudes>>,
) -> Amplitudes {
    let h = 1.0 / steps_per_cell as f64;
    let mut a = init;
    for cell in 0..inp.cell_count {
        for s in 0..steps_per_cell {
            let x = f64::from(cell) + s as f64 * h;
            a = rk4_step(inp, x, &a, h);
        }
        if let Some(out) = samples.as_deref_mut() {
            out.push(a);
        }
    }
    a
}

/// Fixed-step RK4 solution on `[0, N]`, verified by step halving.
pub fn integrate_cme(inp: &CmeInputs, init: Amplitudes) -> Result<CmeTrajectory> {
    if init.iter().any(|a| !a.is_finite()) || !inp.kappa.is_finite() || !inp.delta_k.is_finite() {
        return Err(Error::Domain(
            "CME inputs and initial amplitudes must be finite".into(),
        ));
    }
    if inp.cell_count == 0 {
        return Err(Error::Domain("cell count must be > 0".into()));
    }
    let steps = (1.0 / STEP).round() as usize;
    let mut amplitudes = Vec::with_capacity(inp.cell_count as usize + 1);
    amplitudes.push(init);
    let coarse = propagate(inp, init, steps, Some(&mut amplitudes));
    let fine = propagate(inp, init, 2 * steps, None);
    let scale = fine.iter().map(|a| a.norm()).fold(0.0, f64::max);
    let diff = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    let step_error = if scale > 0.0 { diff / scale } else { 0.0 };
    if step_error > MAX_STEP_ERROR {
        return Err(Error::Numerical(format!(
            "CME step-halving disagreement {step_error:e} exceeds {MAX_STEP_ERROR:e}; \
             a smaller step is needed (Δk = {}, κ = {})",
            inp.delta_k, inp.kappa
        )));
    }
    Ok(CmeTrajectory {
        x: (0..=inp.cell_count).map(f64::from).collect(),
        amplitudes,
        step_error,
    })
}

/// Signal gain and pump depletion for one signal frequency at pump ratio `xi`.
pub fn signal_gain(inp: &CmeInputs, xi: f64) -> Result<(f64, f64)> {
    let seed = if xi > 0.0 { SEED_RATIO * xi } else { SEED_RATIO };
    let init = [
        Complex64::new(seed, 0.0),
        Complex64::new(0.0, 0.0),
        Complex64::new(xi, 0.0),
    ];
    let out = integrate_cme(inp, init)?.output();
    let gain = out[0].norm_sqr() / (seed * seed);
    let depletion = if xi > 0.0 {
        1.0 - out[2].norm_sqr() / (xi * xi)
    } else {
        0.0
    };
    Ok((gain, depletion))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainProfile {
    pub freqs: Vec<f64>,
    pub gain_db: Vec<f64>,
    pub pump_depletion: Vec<f64>,
}

impl GainProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("f_signal_Hz,gain_dB,pump_depletion\n");
        for i in 0..self.freqs.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                crate::util::fmt17(self.freqs[i]),
                crate::util::fmt17(self.gain_db[i]),
                crate::util::fmt17(self.pump_depletion[i])
            ));
        }
        out
    }
}

/// Linear artifacts of the optimized device needed by the nonlinear stage.
#[derive(Debug, Clone)]
pub struct LinearDevice {
    pub params: DeviceParams,
    pub flux: f64,
    pub expansion: PotentialExpansion,
    pub dispersion: DispersionCurve,
}

impl LinearDevice {
    /// Simulates `params` at `flux` on `grid` (which must start at DC).
    pub fn build(params: &DeviceParams, flux: f64, grid: &FrequencyGrid, cell: &CellConfig) -> Result<Self> {
        let resp = simulate_linear(params, flux, grid, cell)?;
        let dispersion = dispersion(&resp, params.cell_count)?;
        let expansion = expand_potential(&SnailSpec::new(params.junction()?, params.alpha, flux)?)?;
        Ok(Self {
            params: *params,
            flux,
            expansion,
            dispersion,
        })
    }

    /// Small-junction critical current in µA.
    pub fn critical_current(&self) -> Result<f64> {
        Ok(critical_current(&self.params.junction()?))
    }

    pub fn cme_inputs(&self, f_signal: f64, f_pump: f64) -> Result<CmeInputs> {
        CmeInputs::from_dispersion(
            &self.dispersion,
            &self.expansion,
            f_signal,
            f_pump,
            self.params.cell_count,
        )
    }
}

/// Gain across the signal band; the device flux is used, `drive.flux` is
/// only checked for consistency.
pub fn gain_profile(dev: &LinearDevice, drive: &DriveSpec) -> Result<GainProfile> {
    drive.validate()?;
    if (drive.flux - dev.flux).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "drive flux {} Φ0 differs from the device's linearization flux {} Φ0",
            drive.flux, dev.flux
        )));
    }
    let freqs = drive.signal_freqs();
    let rows: Vec<(f64, f64)> = freqs
        .par_iter()
        .map(|&f| {
            let inp = dev.cme_inputs(f, drive.pump_freq)?;
            signal_gain(&inp, drive.xi)
        })
        .collect::<Result<_>>()?;
    Ok(GainProfile {
        freqs,
        gain_db: rows.iter().map(|r| 10.0 * r.0.log10()).collect(),
        pump_depletion: rows.iter().map(|r| r.1).collect(),
    })
}

/// Band-averaged gain in dB (trapezoidal mean).
pub fn performance(profile: &GainProfile, band: [f64; 2]) -> Result<f64> {
    let (lo, hi) = match (profile.freqs.first(), profile.freqs.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::Coverage("empty gain profile".into())),
    };
    if !(band[0] < band[1]) || band[0] < lo - 1e-6 || band[1] > hi + 1e-6 {
        return Err(Error::Coverage(format!(
            "band [{}, {}] Hz not covered by profile [{lo}, {hi}] Hz",
            band[0], band[1]
        )));
    }
    Ok(trapezoid_mean(
        &profile.freqs,
        &profile.gain_db,
        band[0].max(lo),
        band[1].min(hi),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingPoint {
    pub pump_amplitude_ua: f64,
    pub xi: f64,
    pub flux: f64,
    /// NaN when the point failed.
    pub performance_db: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingPointSearch {
    pub table: Vec<WorkingPoint>,
    pub best: usize,
    pub profiles: Vec<Option<GainProfile>>,
}

impl WorkingPointSearch {
    pub fn best_point(&self) -> &WorkingPoint {
        &self.table[self.best]
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("pump_amplitude_uA,flux_phi0,performance_dB\n");
        for w in &self.table {
            out.push_str(&format!(
                "{},{},{}\n",
                crate::util::fmt17(w.pump_amplitude_ua),
                crate::util::fmt17(w.flux),
                crate::util::fmt17(w.performance_db)
            ));
        }
        out
    }
}

/// Evaluates every pump amplitude (µA) and returns the best performance;
/// ties go to the smaller amplitude.
pub fn optimize_working_point(
    dev: &LinearDevice,
    pump_amplitudes_ua: &[f64],
    template: &DriveSpec,
) -> Result<WorkingPointSearch> {
    if pump_amplitudes_ua.is_empty() {
        return Err(Error::Config("pump amplitude grid is empty".into()));
    }
    let ic = dev.critical_current()?;
    let runs: Vec<(WorkingPoint, Option<GainProfile>)> = pump_amplitudes_ua
        .par_iter()
        .map(|&ua| {
            let outcome = pump_ratio(ua, ic).and_then(|xi| {
                let drive = DriveSpec {
                    xi,
                    flux: dev.flux,
                    ..*template
                };
                let profile = gain_profile(dev, &drive)?;
                let perf = performance(&profile, template.signal_band)?;
                Ok((xi, perf, profile))
            });
            match outcome {
                Ok((xi, perf, profile)) => (
                    WorkingPoint {
                        pump_amplitude_ua: ua,
                        xi,
                        flux: dev.flux,
                        performance_db: perf,
                        failed: false,
                    },
                    Some(profile),
                ),
                Err(e) => {
                    log::warn!("working point {ua} µA failed: {e}");
                    (
                        WorkingPoint {
                            pump_amplitude_ua: ua,
                            xi: ua / (2.0 * ic),
                            flux: dev.flux,
                            performance_db: f64::NAN,
                            failed: true,
                        },
                        None,
                    )
                }
            }
        })
        .collect();
    let (table, profiles): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let mut best: Option<usize> = None;
    for (i, w) in table.iter().enumerate() {
        if w.failed {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let wb = &table[b];
                let better = w.performance_db > wb.performance_db
                    || (w.performance_db == wb.performance_db && w.pump_amplitude_ua < wb.pump_amplitude_ua);
                Some(if better { i } else { b })
            }
        };
    }
    let best = best.ok_or_else(|| Error::Numerical("every working point failed".into()))?;
    Ok(WorkingPointSearch {
        table,
        best,
        profiles,
    })
}

/// Bisects the pump ratio in `(lo, hi)` until the band-averaged gain lands
/// within `tol` dB of `target_db`. Relies on gain increasing with ξ.
pub fn pump_for_target_gain(
    dev: &LinearDevice,
    template: &DriveSpec,
    target_db: f64,
    tol: f64,
    (mut lo, mut hi): (f64, f64),
) -> Result<(f64, f64)> {
    let perf = |xi: f64| -> Result<f64> {
        let drive = DriveSpec {
            xi,
            flux: dev.flux,
            ..*template
        };
        performance(&gain_profile(dev, &drive)?, template.signal_band)
    };
    let f_hi = perf(hi)?;
    if f_hi < target_db - tol {
        return Err(Error::Numerical(format!(
            "band gain at ξ = {hi} is only {f_hi:.3} dB, below the {target_db} dB target"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = perf(mid)?;
        if (f - target_db).abs() <= tol {
            return Ok((mid, f));
        }
        if f < target_db {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Numerical(format!(
        "pump bisection did not reach {target_db} ± {tol} dB"
    )))
}
