//! Device metric scoring impedance matching, phase matching and
//! second-harmonic suppression of a linear response.
//!
//! ```text
//! M = matching + b·Δk + c·|S11(2 f_p)|
//! matching = a / |⟨S11⟩_band|   (verbatim)
//!          = a · |⟨S11⟩_band|   (direct)
//! Δk = |k(f_p) - 2 k(f_p/2)|
//! ```
//!
//! `total` is evaluated as `(matching + phase) + harmonic`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DispersionCurve, TwoPortResponse};
use crate::util;

/// Smallest band-mean |S11| the verbatim matching term divides by.
pub const VERBATIM_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchingMode {
    /// `a / |mean S11|`, which grows as matching improves.
    Verbatim,
    /// `a · |mean S11|`, which decreases as matching improves.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub weight_a: f64,
    pub weight_b: f64,
    pub weight_c: f64,
    /// Signal band `[f_lo, f_hi]` in Hz.
    pub band: [f64; 2],
    /// Pump frequency in Hz.
    pub pump_freq: f64,
    pub matching_mode: MatchingMode,
    /// Optional filter threshold on the total metric.
    pub cutoff: Option<f64>,
    /// Penalize `|S21(2 f_p)|` instead of `|S11(2 f_p)|`.
    pub harmonic_uses_s21: bool,
}

impl MetricConfig {
    /// Weights a = c = 10, b = 1; band 4.75-6.75 GHz; pump 11.5 GHz.
    pub fn reference(matching_mode: MatchingMode) -> Self {
        Self {
            weight_a: 10.0,
            weight_b: 1.0,
            weight_c: 10.0,
            band: [4.75e9, 6.75e9],
            pump_freq: 11.5e9,
            matching_mode,
            cutoff: None,
            harmonic_uses_s21: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.band[0] < self.band[1]) {
            return Err(Error::Config(format!(
                "metric band must satisfy f_lo < f_hi, got {:?}",
                self.band
            )));
        }
        if !(self.weight_a > 0.0 && self.weight_b > 0.0 && self.weight_c > 0.0) {
            return Err(Error::Config("metric weights must be > 0".into()));
        }
        if !(self.pump_freq > 0.0) {
            return Err(Error::Config("pump frequency must be > 0".into()));
        }
        if let Some(c) = self.cutoff {
            if !c.is_finite() {
                return Err(Error::Config("metric cutoff must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBreakdown {
    pub matching_term: f64,
    pub phase_term: f64,
    pub harmonic_term: f64,
    pub total: f64,
    pub band_mean_s11: Complex64,
    pub delta_k: f64,
    /// Set when the verbatim matching term hit [`VERBATIM_FLOOR`].
    pub matching_capped: bool,
}

fn check_coverage(freqs: &[f64], f: f64, what: &str) -> Result<()> {
    let (lo, hi) = match (freqs.first(), freqs.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::Coverage("empty frequency grid".into())),
    };
    if f < lo || f > hi {
        return Err(Error::Coverage(format!(
            "{what} = {f} Hz outside simulated grid [{lo}, {hi}] Hz"
        )));
    }
    Ok(())
}

/// Trapezoidal mean of complex S11 over `band`.
pub fn band_mean_s11(resp: &TwoPortResponse, band: [f64; 2]) -> Result<Complex64> {
    check_coverage(&resp.freqs, band[0], "lower band edge")?;
    check_coverage(&resp.freqs, band[1], "upper band edge")?;
    if !(band[1] > band[0]) {
        return Err(Error::Config(format!("empty band {band:?}")));
    }
    Ok(util::trapezoid_mean(&resp.freqs, &resp.s11, band[0], band[1]))
}

/// Phase mismatch `|k(f_p) - 2 k(f_p/2)|` in rad/cell.
pub fn delta_k(disp: &DispersionCurve, pump_freq: f64) -> Result<f64> {
    let kp = disp.k_at(pump_freq)?;
    let kh = disp.k_at(pump_freq / 2.0)?;
    Ok((kp - 2.0 * kh).abs())
}

pub fn evaluate_metric(
    resp: &TwoPortResponse,
    disp: &DispersionCurve,
    cfg: &MetricConfig,
) -> Result<MetricBreakdown> {
    cfg.validate()?;
    let harmonic_freq = 2.0 * cfg.pump_freq;
    check_coverage(&resp.freqs, harmonic_freq, "second harmonic 2·f_p")?;

    let mean = band_mean_s11(resp, cfg.band)?;
    let dk = delta_k(disp, cfg.pump_freq)?;
    let harmonic_s = if cfg.harmonic_uses_s21 {
        &resp.s21
    } else {
        &resp.s11
    };
    let at_harmonic = util::interp(&resp.freqs, harmonic_s, harmonic_freq)
        .expect("coverage checked")
        .norm();

    let magnitude = mean.norm();
    let (matching_term, matching_capped) = match cfg.matching_mode {
        MatchingMode::Direct => (cfg.weight_a * magnitude, false),
        MatchingMode::Verbatim if magnitude < VERBATIM_FLOOR => {
            log::warn!("band-mean |S11| = {magnitude:e} below floor; matching term capped");
            (cfg.weight_a / VERBATIM_FLOOR, true)
        }
        MatchingMode::Verbatim => (cfg.weight_a / magnitude, false),
    };
    let phase_term = cfg.weight_b * dk;
    let harmonic_term = cfg.weight_c * at_harmonic;
    Ok(MetricBreakdown {
        matching_term,
        phase_term,
        harmonic_term,
        total: (matching_term + phase_term) + harmonic_term,
        band_mean_s11: mean,
        delta_k: dk,
        matching_capped,
    })
}
