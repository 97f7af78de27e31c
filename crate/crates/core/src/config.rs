//! Run configuration: one strict JSON document in user-facing units
//! (µm², µA/µm², nm, GHz, MHz, µA), converted to SI once on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayesopt::{BoConfig, ContinuousDim, EnumeratedDim, SearchSpace};
use crate::constants::GIGA;
use crate::error::{Error, Result};
use crate::metric::{MatchingMode, MetricConfig};
use crate::network::{CellConfig, FrequencyGrid};
use crate::sweep::{GridDim, ParameterGrid, SimConfig};
use crate::threewave::DriveSpec;

/// `min..=max` in steps of `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl RangeSpec {
    pub const fn new(min: f64, max: f64, step: f64) -> Self {
        Self { min, max, step }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(rename = "A_J_um2")]
    pub junction_area: RangeSpec,
    #[serde(rename = "rho_Ic_uA_um2")]
    pub current_density: RangeSpec,
    pub alpha: RangeSpec,
    #[serde(rename = "t_nm")]
    pub dielectric_thickness: RangeSpec,
    #[serde(rename = "L_load")]
    pub inductance_load_ratio: RangeSpec,
    #[serde(rename = "C_load")]
    pub capacitance_load_ratio: RangeSpec,
    pub pitch: RangeSpec,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::from_grid(&ParameterGrid::table())
    }
}

impl GridSpec {
    pub fn from_grid(g: &ParameterGrid) -> Self {
        let r = |i: usize| RangeSpec::new(g.dims[i].min, g.dims[i].max, g.dims[i].step);
        Self {
            junction_area: r(0),
            current_density: r(1),
            alpha: r(2),
            dielectric_thickness: r(3),
            inductance_load_ratio: r(4),
            capacitance_load_ratio: r(5),
            pitch: r(6),
        }
    }

    pub fn to_grid(&self) -> ParameterGrid {
        let ranges = [
            self.junction_area,
            self.current_density,
            self.alpha,
            self.dielectric_thickness,
            self.inductance_load_ratio,
            self.capacitance_load_ratio,
            self.pitch,
        ];
        ParameterGrid {
            dims: crate::network::PARAM_NAMES
                .iter()
                .zip(ranges)
                .map(|(n, r)| GridDim::new(n, r.min, r.max, r.step))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencySpec {
    pub start_ghz: f64,
    pub stop_ghz: f64,
    pub step_mhz: f64,
}

impl Default for FrequencySpec {
    fn default() -> Self {
        Self {
            start_ghz: 0.0,
            stop_ghz: 24.0,
            step_mhz: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    #[serde(default = "ten")]
    pub weight_a: f64,
    #[serde(default = "one")]
    pub weight_b: f64,
    #[serde(default = "ten")]
    pub weight_c: f64,
    #[serde(default = "default_band")]
    pub band_ghz: [f64; 2],
    #[serde(default = "default_pump")]
    pub pump_ghz: f64,
    /// Required: there is deliberately no default.
    pub matching_mode: MatchingMode,
    #[serde(default)]
    pub cutoff: Option<f64>,
    #[serde(default)]
    pub harmonic_uses_s21: bool,
}

fn ten() -> f64 {
    10.0
}
fn one() -> f64 {
    1.0
}
fn default_band() -> [f64; 2] {
    [4.75, 6.75]
}
fn default_pump() -> f64 {
    11.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    /// Evaluations per enumerated combination, warm start included.
    pub budget: usize,
    pub seed: u64,
    pub max_warm_start: Option<usize>,
    pub initial_design: usize,
    pub candidates: usize,
    pub refit_every: usize,
    pub log_transform: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        let d = BoConfig::default();
        Self {
            budget: d.budget,
            seed: d.seed,
            max_warm_start: d.max_warm_start,
            initial_design: d.initial_design,
            candidates: d.candidates,
            refit_every: d.refit_every,
            log_transform: d.log_transform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriveSweepSpec {
    pub pump_amplitudes_ua: RangeSpec,
    /// Flux override in Φ0; the Kerr-free bias of the optimized α otherwise.
    pub flux_phi0: Option<f64>,
    /// Flux given as bias-line current; needs `cell.flux_line_mutual`.
    pub flux_bias_ua: Option<f64>,
    /// Defaults to the metric band.
    pub signal_band_ghz: Option<[f64; 2]>,
    pub signal_step_mhz: f64,
}

impl Default for DriveSweepSpec {
    fn default() -> Self {
        Self {
            pump_amplitudes_ua: RangeSpec::new(0.1, 0.5, 0.05),
            flux_phi0: None,
            flux_bias_ua: None,
            signal_band_ghz: None,
            signal_step_mhz: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Spec {
    /// Metric cutoff for the correlation/histogram analysis.
    pub cutoff: Option<f64>,
    /// Record per-point wall time (breaks bitwise reproducibility).
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_cells")]
    pub cell_count: u32,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub frequency: FrequencySpec,
    #[serde(default)]
    pub cell: CellConfig,
    pub metric: MetricSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub drive: DriveSweepSpec,
    #[serde(default)]
    pub stage1: Stage1Spec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("snailopt-run")
}
fn default_cells() -> u32 {
    360
}

/// A parsed configuration with the hash of its exact bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub bytes: Vec<u8>,
    pub hash: String,
    pub path: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads, parses and validates a config file. Parse failures carry the
    /// line and column of the offending field.
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(path, e))?;
        // serde_json messages already end with "at line L column C"
        let config = Self::from_json(text).map_err(|e| Error::parse(path, e))?;
        config.validate()?;
        Ok(LoadedConfig {
            config,
            hash: sha256_hex(&bytes),
            bytes,
            path: path.to_path_buf(),
        })
    }

    pub fn parameter_grid(&self) -> ParameterGrid {
        self.grid.to_grid()
    }

    pub fn frequency_grid(&self) -> Result<FrequencyGrid> {
        let f = &self.frequency;
        FrequencyGrid::new(f.start_ghz * GIGA, f.stop_ghz * GIGA, f.step_mhz * 1e6)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            cell_count: self.cell_count,
            grid: self.frequency_grid()?,
            cell: self.cell,
        })
    }

    pub fn metric_config(&self) -> MetricConfig {
        let m = &self.metric;
        MetricConfig {
            weight_a: m.weight_a,
            weight_b: m.weight_b,
            weight_c: m.weight_c,
            band: [m.band_ghz[0] * GIGA, m.band_ghz[1] * GIGA],
            pump_freq: m.pump_ghz * GIGA,
            matching_mode: m.matching_mode,
            cutoff: m.cutoff,
            harmonic_uses_s21: m.harmonic_uses_s21,
        }
    }

    pub fn bo_config(&self) -> BoConfig {
        let o = &self.optimizer;
        BoConfig {
            budget: o.budget,
            seed: o.seed,
            max_warm_start: o.max_warm_start,
            initial_design: o.initial_design,
            candidates: o.candidates,
            refit_every: o.refit_every,
            log_transform: o.log_transform,
            ..BoConfig::default()
        }
    }

    /// A_J, ρ and t continuous over the grid ranges; α, load ratios and
    /// pitch enumerated at their grid values.
    pub fn search_space(&self) -> Result<SearchSpace> {
        let grid = self.parameter_grid();
        let values = grid.values()?;
        let cont = |i: usize| ContinuousDim {
            name: grid.dims[i].name.clone(),
            lo: grid.dims[i].min,
            hi: values[i].last().copied().unwrap_or(grid.dims[i].max),
        };
        let enumerated = |i: usize| EnumeratedDim {
            name: grid.dims[i].name.clone(),
            values: values[i].clone(),
        };
        Ok(SearchSpace {
            continuous: vec![cont(0), cont(1), cont(3)],
            enumerated: vec![enumerated(2), enumerated(4), enumerated(5), enumerated(6)],
        })
    }

    pub fn pump_amplitudes(&self) -> Result<Vec<f64>> {
        let r = self.drive.pump_amplitudes_ua;
        GridDim::new("pump_amplitude_uA", r.min, r.max, r.step).values()
    }

    pub fn signal_band(&self) -> [f64; 2] {
        let b = self.drive.signal_band_ghz.unwrap_or(self.metric.band_ghz);
        [b[0] * GIGA, b[1] * GIGA]
    }

    /// Drive template at `flux` with ξ = 0; the working-point search fills
    /// in ξ per pump amplitude.
    pub fn drive_template(&self, flux: f64) -> DriveSpec {
        DriveSpec {
            pump_freq: self.metric.pump_ghz * GIGA,
            xi: 0.0,
            flux,
            signal_band: self.signal_band(),
            signal_step: self.drive.signal_step_mhz * 1e6,
        }
    }

    /// Flux override for Stage 3, if any, in Φ0.
    pub fn drive_flux_override(&self) -> Result<Option<f64>> {
        match (self.drive.flux_phi0, self.drive.flux_bias_ua) {
            (Some(_), Some(_)) => Err(Error::Config(
                "drive: give either flux_phi0 or flux_bias_ua, not both".into(),
            )),
            (Some(f), None) => Ok(Some(f)),
            (None, Some(ua)) => crate::threewave::flux_from_current(ua, self.cell.flux_line_mutual).map(Some),
            (None, None) => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.parameter_grid();
        grid.validate()?;
        self.cell.validate()?;
        let fgrid = self.frequency_grid()?;
        if fgrid.start != 0.0 {
            return Err(Error::Config(
                "frequency.start_ghz must be 0: dispersion is unwrapped from DC".into(),
            ));
        }
        if self.cell_count == 0 {
            return Err(Error::Config("cell_count must be > 0".into()));
        }
        for pitch in &grid.values()?[6] {
            let p = pitch.round() as u32;
            if p < 2 || (pitch - f64::from(p)).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "grid.pitch values must be integers >= 2, got {pitch}"
                )));
            }
            if self.cell_count % p != 0 {
                return Err(Error::Config(format!(
                    "cell_count {} is not divisible by pitch {p}",
                    self.cell_count
                )));
            }
        }
        let metric = self.metric_config();
        metric.validate()?;
        let stop = fgrid.freq(fgrid.len() - 1);
        for (what, f) in [
            ("metric.band_ghz upper edge", metric.band[1]),
            ("metric.pump_ghz", metric.pump_freq),
            ("second harmonic of metric.pump_ghz", 2.0 * metric.pump_freq),
        ] {
            if f > stop {
                return Err(Error::Config(format!(
                    "{what} = {} GHz lies above the simulated grid (stop {} GHz)",
                    f / GIGA,
                    stop / GIGA
                )));
            }
        }
        self.bo_config().validate()?;
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(Error::Config("workers must be >= 1".into()));
            }
        }
        let amps = self.pump_amplitudes()?;
        if amps.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Config("drive.pump_amplitudes_ua must be >= 0".into()));
        }
        if !(self.drive.signal_step_mhz > 0.0) {
            return Err(Error::Config("drive.signal_step_mhz must be > 0".into()));
        }
        let band = self.signal_band();
        if !(band[0] > 0.0 && band[0] < band[1] && band[1] < metric.pump_freq) {
            return Err(Error::Config(format!(
                "drive signal band [{}, {}] GHz must lie inside (0, f_p)",
                band[0] / GIGA,
                band[1] / GIGA
            )));
        }
        self.drive_flux_override()?;
        Ok(())
    }

    /// The reduced configuration used for quick end-to-end runs.
    pub fn desk(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            output_dir: output_dir.into(),
            workers: None,
            cell_count: 120,
            grid: GridSpec::from_grid(&ParameterGrid::desk()),
            frequency: FrequencySpec {
                start_ghz: 0.0,
                stop_ghz: 24.0,
                step_mhz: 50.0,
            },
            cell: CellConfig::default(),
            metric: MetricSpec {
                weight_a: 10.0,
                weight_b: 1.0,
                weight_c: 10.0,
                band_ghz: default_band(),
                pump_ghz: default_pump(),
                matching_mode: MatchingMode::Direct,
                cutoff: None,
                harmonic_uses_s21: false,
            },
            optimizer: OptimizerSpec {
                budget: 60,
                seed: 1,
                max_warm_start: Some(30),
                ..OptimizerSpec::default()
            },
            drive: DriveSweepSpec::default(),
            stage1: Stage1Spec::default(),
        }
    }
}
