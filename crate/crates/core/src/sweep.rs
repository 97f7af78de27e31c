//! Stage 1: exhaustive linear sweep over a rectangular design grid, plus
//! the correlation and metric-weighted histogram analyses of its results.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metric::{evaluate_metric, MetricBreakdown, MetricConfig};
use crate::network::{dispersion, simulate_linear, CellConfig, DeviceParams, FrequencyGrid, PARAM_NAMES};
use crate::snail::{kerr_free_flux, JunctionSpec};
use crate::util::{fmt17, write_atomic};

pub const CSV_HEADER: &str = "index,A_J_um2,rho_Ic_uA_um2,alpha,t_nm,L_load,C_load,pitch,flux_ext_phi0,\
matching_term,phase_term,harmonic_term,metric_total,failed,wall_time_s";

const CHECKPOINT_MAGIC: &str = "# snailopt sweep checkpoint";

/// One axis of the design grid, in the units of [`DeviceParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDim {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridDim {
    pub fn new(name: &str, min: f64, max: f64, step: f64) -> Self {
        Self {
            name: name.to_string(),
            min,
            max,
            step,
        }
    }

    pub fn single(name: &str, value: f64) -> Self {
        Self::new(name, value, value, 1.0)
    }

    /// `round((max - min) / step) + 1`.
    pub fn count(&self) -> Result<usize> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!(
                "grid dimension {}: step must be > 0",
                self.name
            )));
        }
        if !(self.min <= self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Config(format!(
                "grid dimension {}: empty range [{}, {}]",
                self.name, self.min, self.max
            )));
        }
        Ok(((self.max - self.min) / self.step).round() as usize + 1)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        let n = self.count()?;
        // snap to 12 significant digits so 0.1 + 3 * 0.05 prints as 0.25
        Ok((0..n)
            .map(|i| {
                let v = self.min + i as f64 * self.step;
                format!("{v:.11e}").parse().expect("formatted float parses")
            })
            .collect())
    }
}

/// Rectangular grid over the seven design dimensions in [`PARAM_NAMES`]
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterGrid {
    pub dims: Vec<GridDim>,
}

impl ParameterGrid {
    /// The full design space: 11·11·2·20·2·2·2 points.
    pub fn table() -> Self {
        Self {
            dims: vec![
                GridDim::new("A_J", 0.1, 0.6, 0.05),
                GridDim::new("rho_Ic", 0.5, 1.5, 0.1),
                GridDim::new("alpha", 0.23, 0.25, 0.02),
                GridDim::new("t", 1.0, 20.0, 1.0),
                GridDim::new("L_load", 1.5, 2.0, 0.5),
                GridDim::new("C_load", 1.0, 1.5, 0.5),
                GridDim::new("pitch", 2.0, 3.0, 1.0),
            ],
        }
    }

    /// A 2048-point subsample of the same ranges for quick runs.
    pub fn desk() -> Self {
        Self {
            dims: vec![
                GridDim::new("A_J", 0.1, 0.55, 0.15),
                GridDim::new("rho_Ic", 0.5, 1.4, 0.3),
                GridDim::new("alpha", 0.23, 0.25, 0.02),
                GridDim::new("t", 2.0, 16.0, 2.0),
                GridDim::new("L_load", 1.5, 2.0, 0.5),
                GridDim::new("C_load", 1.0, 1.5, 0.5),
                GridDim::new("pitch", 2.0, 3.0, 1.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.dims.iter().map(|d| d.name.as_str()).collect();
        if names != PARAM_NAMES {
            return Err(Error::Config(format!(
                "grid dimensions must be {PARAM_NAMES:?} in order, got {names:?}"
            )));
        }
        for d in &self.dims {
            d.count()?;
        }
        Ok(())
    }

    pub fn len(&self) -> Result<usize> {
        self.validate()?;
        self.dims.iter().try_fold(1usize, |acc, d| Ok(acc * d.count()?))
    }

    pub fn is_empty(&self) -> bool {
        matches!(self.len(), Ok(0) | Err(_))
    }

    pub fn values(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        self.dims.iter().map(GridDim::values).collect()
    }

    /// Grid point closest to `x` when each axis is scaled by its step.
    pub fn nearest(&self, x: &[f64; 7]) -> Result<[f64; 7]> {
        let values = self.values()?;
        let mut out = [0.0; 7];
        for (i, vals) in values.iter().enumerate() {
            out[i] = *vals
                .iter()
                .min_by(|a, b| (*a - x[i]).abs().total_cmp(&(*b - x[i]).abs()))
                .expect("nonempty axis");
        }
        Ok(out)
    }
}

/// All grid points in lexicographic order, the last dimension varying
/// fastest.
pub fn enumerate_grid(grid: &ParameterGrid, cell_count: u32) -> Result<Vec<DeviceParams>> {
    let values = grid.values()?;
    let total: usize = values.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = [0usize; 7];
    for _ in 0..total {
        let mut v = [0.0; 7];
        for d in 0..7 {
            v[d] = values[d][idx[d]];
        }
        out.push(DeviceParams::from_array(v, cell_count));
        for d in (0..7).rev() {
            idx[d] += 1;
            if idx[d] < values[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

/// Everything a single linear evaluation needs besides the design point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub cell_count: u32,
    pub grid: FrequencyGrid,
    pub cell: CellConfig,
}

/// Kerr-free flux bias for `alpha` (independent of junction size).
pub fn flux_bias(alpha: f64) -> Result<f64> {
    kerr_free_flux(alpha, &JunctionSpec::new(1.0, 1.0)?)
}

/// Memoized [`flux_bias`] for a fixed set of α values.
#[derive(Debug, Clone, Default)]
pub struct BiasTable {
    table: HashMap<u64, f64>,
}

impl BiasTable {
    pub fn for_alphas(alphas: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut table = HashMap::new();
        for a in alphas {
            if let std::collections::hash_map::Entry::Vacant(e) = table.entry(a.to_bits()) {
                e.insert(flux_bias(a)?);
            }
        }
        Ok(Self { table })
    }

    pub fn get(&self, alpha: f64) -> Result<f64> {
        match self.table.get(&alpha.to_bits()) {
            Some(&f) => Ok(f),
            None => flux_bias(alpha),
        }
    }
}

/// Linear simulation, dispersion and metric for one design at `flux`.
pub fn evaluate_design(
    p: &DeviceParams,
    flux: f64,
    sim: &SimConfig,
    metric: &MetricConfig,
) -> Result<MetricBreakdown> {
    let p = DeviceParams {
        cell_count: sim.cell_count,
        ..*p
    };
    let resp = simulate_linear(&p, flux, &sim.grid, &sim.cell)?;
    let disp = dispersion(&resp, p.cell_count)?;
    evaluate_metric(&resp, &disp, metric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub index: usize,
    pub params: DeviceParams,
    pub flux_ext: f64,
    pub matching_term: f64,
    pub phase_term: f64,
    pub harmonic_term: f64,
    /// `+inf` for failed points.
    pub metric_total: f64,
    pub failed: bool,
    pub wall_time_s: f64,
}

impl SweepRecord {
    fn failed(index: usize, params: DeviceParams, flux_ext: f64, wall_time_s: f64) -> Self {
        Self {
            index,
            params,
            flux_ext,
            matching_term: f64::NAN,
            phase_term: f64::NAN,
            harmonic_term: f64::NAN,
            metric_total: f64::INFINITY,
            failed: true,
            wall_time_s,
        }
    }

    pub fn to_csv_row(&self) -> String {
        let p = &self.params;
        let mut cols = vec![self.index.to_string()];
        cols.extend(p.as_array()[..6].iter().map(|&v| fmt17(v)));
        cols.push(p.pitch.to_string());
        for v in [
            self.flux_ext,
            self.matching_term,
            self.phase_term,
            self.harmonic_term,
            self.metric_total,
        ] {
            cols.push(fmt17(v));
        }
        cols.push(u8::from(self.failed).to_string());
        cols.push(fmt17(self.wall_time_s));
        cols.join(",")
    }

    pub fn from_csv_row(row: &str, cell_count: u32) -> std::result::Result<Self, String> {
        let cols: Vec<&str> = row.trim_end().split(',').collect();
        if cols.len() != 15 {
            return Err(format!("expected 15 columns, got {}", cols.len()));
        }
        let num = |i: usize| -> std::result::Result<f64, String> {
            cols[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| format!("column {}: bad number `{}`", i + 1, cols[i]))
        };
        let index = cols[0]
            .trim()
            .parse()
            .map_err(|_| format!("bad index `{}`", cols[0]))?;
        let pitch: u32 = cols[7]
            .trim()
            .parse()
            .map_err(|_| format!("bad pitch `{}`", cols[7]))?;
        let failed = match cols[13].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(format!("bad failed flag `{other}`")),
        };
        Ok(Self {
            index,
            params: DeviceParams::from_array(
                [
                    num(1)?,
                    num(2)?,
                    num(3)?,
                    num(4)?,
                    num(5)?,
                    num(6)?,
                    f64::from(pitch),
                ],
                cell_count,
            ),
            flux_ext: num(8)?,
            matching_term: num(9)?,
            phase_term: num(10)?,
            harmonic_term: num(11)?,
            metric_total: num(12)?,
            failed,
            wall_time_s: num(14)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOptions {
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Append-only record log used to resume an interrupted sweep.
    pub checkpoint: Option<PathBuf>,
    /// Store measured wall time per point (makes output nondeterministic).
    pub record_wall_time: bool,
    /// Evaluate at most this many not-yet-checkpointed points, then return
    /// only what is complete. Used to split a sweep into sessions.
    pub limit: Option<usize>,
}

fn fingerprint(grid: &ParameterGrid, sim: &SimConfig, metric: &MetricConfig) -> String {
    let doc = serde_json::json!({ "grid": grid, "sim": sim, "metric": metric });
    hex::encode(Sha256::digest(doc.to_string().as_bytes()))
}

fn load_checkpoint(path: &Path, fp: &str, cell_count: u32) -> Result<BTreeMap<usize, SweepRecord>> {
    let mut done = BTreeMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        None => return Ok(done),
        Some(first) => {
            let first = first.map_err(|e| Error::io(path, e))?;
            if first != format!("{CHECKPOINT_MAGIC} {fp}") {
                return Err(Error::Config(format!(
                    "checkpoint {} belongs to a different grid or configuration",
                    path.display()
                )));
            }
        }
    }
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        // a torn final line from an interrupted write is simply redone
        if let Ok(rec) = SweepRecord::from_csv_row(&line, cell_count) {
            done.insert(rec.index, rec);
        }
    }
    Ok(done)
}

/// Runs the linear sweep. Records come back in grid order; failed points are
/// flagged, never dropped.
pub fn run_sweep(
    grid: &ParameterGrid,
    sim: &SimConfig,
    metric: &MetricConfig,
    opts: &SweepOptions,
) -> Result<Vec<SweepRecord>> {
    metric.validate()?;
    sim.cell.validate()?;
    let points = enumerate_grid(grid, sim.cell_count)?;
    let bias = BiasTable::for_alphas(points.iter().map(|p| p.alpha))?;
    let fp = fingerprint(grid, sim, metric);

    let mut done = match &opts.checkpoint {
        Some(path) => load_checkpoint(path, &fp, sim.cell_count)?,
        None => BTreeMap::new(),
    };
    let mut todo: Vec<usize> = (0..points.len()).filter(|i| !done.contains_key(i)).collect();
    if let Some(limit) = opts.limit {
        todo.truncate(limit);
    }
    log::info!(
        "sweep: {} points, {} already done, {} to evaluate",
        points.len(),
        done.len(),
        todo.len()
    );

    let evaluate = |i: usize| -> SweepRecord {
        let p = points[i];
        let start = Instant::now();
        let flux = bias.get(p.alpha).unwrap_or(f64::NAN);
        let result = evaluate_design(&p, flux, sim, metric);
        let wall = if opts.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        match result {
            Ok(b) => SweepRecord {
                index: i,
                params: p,
                flux_ext: flux,
                matching_term: b.matching_term,
                phase_term: b.phase_term,
                harmonic_term: b.harmonic_term,
                metric_total: b.total,
                failed: false,
                wall_time_s: wall,
            },
            Err(e) => {
                log::warn!("grid point {i} failed: {e}");
                SweepRecord::failed(i, p, flux, wall)
            }
        }
    };

    let fresh: Vec<SweepRecord> = std::thread::scope(|scope| -> Result<Vec<SweepRecord>> {
        let (tx, rx) = mpsc::channel::<String>();
        let writer = match &opts.checkpoint {
            Some(path) => {
                let new_file = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let mut file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?;
                if new_file {
                    writeln!(file, "{CHECKPOINT_MAGIC} {fp}").map_err(|e| Error::io(path, e))?;
                } else {
                    // start on a fresh line in case the last write was torn
                    writeln!(file).map_err(|e| Error::io(path, e))?;
                }
                let path = path.clone();
                Some(scope.spawn(move || -> Result<()> {
                    for line in rx {
                        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
                    }
                    file.sync_all().map_err(|e| Error::io(&path, e))
                }))
            }
            None => {
                drop(rx);
                None
            }
        };
        let run = || -> Vec<SweepRecord> {
            todo.par_iter()
                .map_with(tx.clone(), |tx, &i| {
                    let rec = evaluate(i);
                    // the receiver only disappears if the writer failed,
                    // which is reported below
                    let _ = tx.send(rec.to_csv_row());
                    rec
                })
                .collect()
        };
        let fresh = match opts.workers {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
                .install(run),
            None => run(),
        };
        drop(tx);
        if let Some(w) = writer {
            w.join().expect("checkpoint writer panicked")?;
        }
        Ok(fresh)
    })?;

    for rec in fresh {
        done.insert(rec.index, rec);
    }
    Ok(done.into_values().collect())
}

pub fn sweep_csv(records: &[SweepRecord]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 360);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn write_sweep_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    write_atomic(path, sweep_csv(records).as_bytes())
}

pub fn read_sweep_csv(path: &Path, cell_count: u32) -> Result<Vec<SweepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::parse(path, "missing or unexpected Stage-1 header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            SweepRecord::from_csv_row(l, cell_count)
                .map_err(|m| Error::parse(path, format!("line {}: {m}", n + 2)))
        })
        .collect()
}

/// Records whose total is below `cutoff`; an infinite cutoff keeps all.
pub fn filter_by_cutoff(records: &[SweepRecord], cutoff: f64) -> Vec<SweepRecord> {
    records
        .iter()
        .filter(|r| cutoff == f64::INFINITY || r.metric_total < cutoff)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Columns with zero variance; their off-diagonal entries are 0.
    pub constant_columns: Vec<String>,
}

/// Pearson correlation between equally long columns.
pub fn pearson_matrix(names: &[&str], columns: &[Vec<f64>]) -> Result<CorrelationMatrix> {
    let n = columns.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::Domain("correlation needs a nonempty subset".into()));
    }
    let d = columns.len();
    let centred: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centred
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let constant: Vec<bool> = norms
        .iter()
        .zip(columns)
        .map(|(&s, c)| {
            let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
            s <= 1e-12 * scale * (n as f64).sqrt()
        })
        .collect();
    let mut values = vec![vec![0.0; d]; d];
    for i in 0..d {
        values[i][i] = 1.0;
        for j in 0..i {
            let r = if constant[i] || constant[j] {
                0.0
            } else {
                let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: names.iter().map(|s| s.to_string()).collect(),
        values,
        constant_columns: names
            .iter()
            .zip(&constant)
            .filter(|(_, &c)| c)
            .map(|(s, _)| s.to_string())
            .collect(),
    })
}

pub fn correlation_matrix(subset: &[SweepRecord]) -> Result<CorrelationMatrix> {
    let columns: Vec<Vec<f64>> = (0..7)
        .map(|d| subset.iter().map(|r| r.params.as_array()[d]).collect())
        .collect();
    pearson_matrix(&PARAM_NAMES, &columns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    /// `(grid value, Σ 1/M)` in ascending value order.
    pub bins: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedHistograms {
    pub histograms: Vec<Histogram>,
    /// Records skipped because their metric is not positive and finite.
    pub excluded: usize,
}

/// Per dimension and grid value, the sum of `1 / metric_total`.
pub fn weighted_histograms(subset: &[SweepRecord]) -> Result<WeightedHistograms> {
    if subset.is_empty() {
        return Err(Error::Domain("histograms need a nonempty subset".into()));
    }
    let usable: Vec<&SweepRecord> = subset
        .iter()
        .filter(|r| r.metric_total > 0.0 && r.metric_total.is_finite())
        .collect();
    let excluded = subset.len() - usable.len();
    if excluded > 0 {
        log::warn!("{excluded} records with nonpositive or non-finite metric left out of histograms");
    }
    let histograms = (0..7)
        .map(|d| {
            let mut bins: Vec<(f64, f64)> = Vec::new();
            let mut seen: HashSet<u64> = HashSet::new();
            let mut order: Vec<f64> = subset.iter().map(|r| r.params.as_array()[d]).collect();
            order.sort_by(f64::total_cmp);
            order.retain(|v| seen.insert(v.to_bits()));
            for v in order {
                let w: f64 = usable
                    .iter()
                    .filter(|r| r.params.as_array()[d] == v)
                    .map(|r| 1.0 / r.metric_total)
                    .sum();
                bins.push((v, w));
            }
            Histogram {
                name: PARAM_NAMES[d].to_string(),
                bins,
            }
        })
        .collect();
    Ok(WeightedHistograms { histograms, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub cutoff: Option<f64>,
    pub total_count: usize,
    pub failed_count: usize,
    pub filtered_count: usize,
    pub correlation: CorrelationMatrix,
    pub histograms: WeightedHistograms,
}

pub fn analyze(records: &[SweepRecord], cutoff: Option<f64>) -> Result<AnalysisReport> {
    let subset = filter_by_cutoff(records, cutoff.unwrap_or(f64::INFINITY));
    let subset: Vec<SweepRecord> = subset.into_iter().filter(|r| !r.failed).collect();
    if subset.is_empty() {
        return Err(Error::Domain(format!(
            "no successful records below cutoff {cutoff:?}; cannot analyze"
        )));
    }
    Ok(AnalysisReport {
        cutoff,
        total_count: records.len(),
        failed_count: records.iter().filter(|r| r.failed).count(),
        filtered_count: subset.len(),
        correlation: correlation_matrix(&subset)?,
        histograms: weighted_histograms(&subset)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::MatchingMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_grid() -> ParameterGrid {
        ParameterGrid {
            dims: vec![
                GridDim::new("A_J", 0.2, 0.3, 0.1),
                GridDim::new("rho_Ic", 0.5, 0.7, 0.1),
                GridDim::single("alpha", 0.23),
                GridDim::single("t", 9.0),
                GridDim::single("L_load", 1.5),
                GridDim::single("C_load", 1.0),
                GridDim::single("pitch", 3.0),
            ],
        }
    }

    fn sim() -> SimConfig {
        SimConfig {
            cell_count: 60,
            grid: FrequencyGrid::new(0.0, 24e9, 100e6).unwrap(),
            cell: CellConfig::default(),
        }
    }

    fn record(values: [f64; 7], total: f64) -> SweepRecord {
        SweepRecord {
            index: 0,
            params: DeviceParams::from_array(values, 120),
            flux_ext: 0.38,
            matching_term: total,
            phase_term: 0.0,
            harmonic_term: 0.0,
            metric_total: total,
            failed: false,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn table_grid_size() {
        let g = ParameterGrid::table();
        let counts: Vec<usize> = g.dims.iter().map(|d| d.count().unwrap()).collect();
        assert_eq!(counts, vec![11, 11, 2, 20, 2, 2, 2]);
        assert_eq!(g.len().unwrap(), 38_720);
        assert_eq!(ParameterGrid::desk().len().unwrap(), 2048);
    }

    #[test]
    fn grid_values_are_clean() {
        let v = GridDim::new("A_J", 0.1, 0.6, 0.05).values().unwrap();
        assert_eq!(v[3], 0.25);
        assert_eq!(v[10], 0.6);
    }

    #[test]
    fn toy_enumeration_order() {
        let pts = enumerate_grid(&toy_grid(), 120).unwrap();
        let got: Vec<(f64, f64)> = pts.iter().map(|p| (p.junction_area, p.current_density)).collect();
        assert_eq!(
            got,
            vec![
                (0.2, 0.5),
                (0.2, 0.6),
                (0.2, 0.7),
                (0.3, 0.5),
                (0.3, 0.6),
                (0.3, 0.7)
            ]
        );
        let single = ParameterGrid {
            dims: toy_grid()
                .dims
                .iter()
                .map(|d| GridDim::single(&d.name, d.min))
                .collect(),
        };
        assert_eq!(enumerate_grid(&single, 120).unwrap().len(), 1);
    }

    #[test]
    fn rejects_bad_grids() {
        let mut g = toy_grid();
        g.dims[0].max = 0.1;
        assert!(enumerate_grid(&g, 120).is_err());
        let mut g = toy_grid();
        g.dims.swap(0, 1);
        assert!(g.validate().is_err());
    }

    #[test]
    fn one_point_sweep_matches_direct_call() {
        let mut g = toy_grid();
        g.dims[0] = GridDim::single("A_J", 0.2);
        g.dims[1] = GridDim::single("rho_Ic", 0.5);
        let metric = MetricConfig::reference(MatchingMode::Direct);
        let recs = run_sweep(&g, &sim(), &metric, &SweepOptions::default()).unwrap();
        assert_eq!(recs.len(), 1);
        let p = enumerate_grid(&g, 60).unwrap()[0];
        let flux = flux_bias(0.23).unwrap();
        let resp = simulate_linear(&p, flux, &sim().grid, &sim().cell).unwrap();
        let disp = dispersion(&resp, 60).unwrap();
        let b = evaluate_metric(&resp, &disp, &metric).unwrap();
        assert_eq!(recs[0].metric_total, b.total);
        assert_eq!(recs[0].flux_ext, flux);
    }

    #[test]
    fn failures_are_flagged_not_dropped() {
        let metric = MetricConfig::reference(MatchingMode::Direct);
        // 2 f_p = 23 GHz lies outside a 20 GHz grid
        let narrow = SimConfig {
            grid: FrequencyGrid::new(0.0, 20e9, 100e6).unwrap(),
            ..sim()
        };
        let recs = run_sweep(&toy_grid(), &narrow, &metric, &SweepOptions::default()).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| r.failed && r.metric_total == f64::INFINITY));
        assert!(sweep_csv(&recs).lines().nth(1).unwrap().contains(",inf,1,"));
    }

    #[test]
    fn resume_reproduces_uninterrupted_csv() {
        let dir = tempfile::tempdir().unwrap();
        let metric = MetricConfig::reference(MatchingMode::Direct);
        let full = run_sweep(&toy_grid(), &sim(), &metric, &SweepOptions::default()).unwrap();

        let ckpt = dir.path().join("sweep.ckpt");
        let first = SweepOptions {
            checkpoint: Some(ckpt.clone()),
            limit: Some(4),
            workers: Some(2),
            ..Default::default()
        };
        assert_eq!(run_sweep(&toy_grid(), &sim(), &metric, &first).unwrap().len(), 4);
        // simulate a torn write
        OpenOptions::new()
            .append(true)
            .open(&ckpt)
            .unwrap()
            .write_all(b"5,0.3,0.")
            .unwrap();
        let second = SweepOptions {
            checkpoint: Some(ckpt.clone()),
            ..Default::default()
        };
        let resumed = run_sweep(&toy_grid(), &sim(), &metric, &second).unwrap();
        assert_eq!(sweep_csv(&resumed), sweep_csv(&full));

        let other = MetricConfig::reference(MatchingMode::Verbatim);
        assert!(run_sweep(&toy_grid(), &sim(), &other, &second).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.csv");
        let mut recs = vec![record([0.2, 0.5, 0.23, 9.0, 1.5, 1.0, 3.0], 1.0 / 3.0)];
        recs.push(SweepRecord::failed(1, recs[0].params, 0.38, 0.0));
        write_sweep_csv(&recs, &path).unwrap();
        let back = read_sweep_csv(&path, 120).unwrap();
        assert_eq!(back[0], recs[0]);
        assert!(back[1].failed && back[1].matching_term.is_nan());
    }

    #[test]
    fn cutoff_filter() {
        let recs: Vec<SweepRecord> = [3.0, 1.0, 2.0, 5.0]
            .iter()
            .map(|&m| record([0.2, 0.5, 0.23, 9.0, 1.5, 1.0, 3.0], m))
            .collect();
        assert_eq!(filter_by_cutoff(&recs, f64::INFINITY).len(), 4);
        assert!(filter_by_cutoff(&recs, 0.5).is_empty());
        let kept: Vec<f64> = filter_by_cutoff(&recs, 2.5)
            .iter()
            .map(|r| r.metric_total)
            .collect();
        assert_eq!(kept, vec![1.0, 2.0]);
    }

    #[test]
    fn correlation_conventions() {
        let a = vec![1.0, 2.0, 3.0, 5.0];
        let c = pearson_matrix(&["a", "b", "k"], &[a.clone(), a, vec![4.0; 4]]).unwrap();
        assert!((c.values[0][1] - 1.0).abs() < 1e-15);
        assert_eq!(c.values[0][2], 0.0);
        assert_eq!(c.values[2][2], 1.0);
        assert_eq!(c.constant_columns, vec!["k".to_string()]);
        assert!(pearson_matrix(&["a"], &[vec![]]).is_err());
    }

    #[test]
    fn independent_columns_are_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..1000).map(|_| rng.random::<f64>()).collect())
            .collect();
        let c = pearson_matrix(&["x", "y", "z"], &cols).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(c.values[i][j].abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn histogram_examples() {
        let base = [0.2, 0.5, 0.23, 9.0, 1.5, 1.0, 3.0];
        let h = weighted_histograms(&[record(base, 2.0)]).unwrap();
        assert!(h.histograms.iter().all(|t| t.bins == vec![(t.bins[0].0, 0.5)]));
        let h = weighted_histograms(&[record(base, 1.0), record(base, 1.0)]).unwrap();
        assert_eq!(h.histograms[0].bins, vec![(0.2, 2.0)]);
        let h = weighted_histograms(&[record(base, 1.0), record(base, -1.0)]).unwrap();
        assert_eq!(h.excluded, 1);
    }

    proptest! {
        #[test]
        fn histogram_matches_brute_force(
            rows in prop::collection::vec((0usize..3, 0usize..2, 0.1f64..10.0), 1..40)
        ) {
            let area = [0.1, 0.2, 0.3];
            let pitch = [2.0, 3.0];
            let recs: Vec<SweepRecord> = rows
                .iter()
                .map(|&(a, p, m)| record([area[a], 0.5, 0.23, 9.0, 1.5, 1.0, pitch[p]], m))
                .collect();
            let h = weighted_histograms(&recs).unwrap();
            let total: f64 = rows.iter().map(|r| 1.0 / r.2).sum();
            for t in &h.histograms {
                let s: f64 = t.bins.iter().map(|b| b.1).sum();
                prop_assert!((s - total).abs() <= 1e-12 * total);
            }
            for &(v, w) in &h.histograms[0].bins {
                let brute: f64 = rows.iter().filter(|r| area[r.0] == v).map(|r| 1.0 / r.2).sum();
                prop_assert!((w - brute).abs() <= 1e-12 * brute.max(1.0));
            }
        }

        #[test]
        fn correlation_is_symmetric_and_bounded(
            data in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 2..30)
        ) {
            let cols: Vec<Vec<f64>> = (0..4).map(|j| data.iter().map(|r| r[j]).collect()).collect();
            let c = pearson_matrix(&["a", "b", "c", "d"], &cols).unwrap();
            for i in 0..4 {
                prop_assert!((c.values[i][i] - 1.0).abs() < 1e-12);
                for j in 0..4 {
                    prop_assert_eq!(c.values[i][j], c.values[j][i]);
                    prop_assert!(c.values[i][j].abs() <= 1.0);
                }
            }
        }
    }
}
