//! Stage orchestration, run-directory layout and report export.
//!
//! A run directory holds:
//!
//! ```text
//! config.json              exact bytes of the config used
//! manifest.json            stage status, file hashes, seeds
//! stage1.csv               one row per grid point
//! stage1_analysis.json     correlation matrix and weighted histograms
//! pstar.json               optimized device
//! optimize_trace.csv       every optimizer evaluation
//! stage3/gain_NN.csv       gain profile per pump amplitude
//! stage3/working_points.csv
//! qstar.json               selected working point
//! report/                  plot-ready exports
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayesopt::{optimize_metric, trace_csv, Observation, OptResult};
use crate::config::{sha256_hex, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, RunLock};
use crate::metric::MetricBreakdown;
use crate::network::{simulate_linear, DeviceParams, DispersionCurve};
use crate::sweep::{
    analyze, evaluate_design, read_sweep_csv, run_sweep, write_sweep_csv, AnalysisReport, BiasTable,
    SweepOptions, SweepRecord,
};
use crate::threewave::{optimize_working_point, LinearDevice, WorkingPoint};
use crate::util::{fmt17, write_atomic};

pub const STAGE1: &str = "stage1";
pub const OPTIMIZE: &str = "optimize";
pub const STAGE3: &str = "stage3";
pub const REPORT: &str = "report";

pub const CONFIG_FILE: &str = "config.json";
pub const STAGE1_CSV: &str = "stage1.csv";
pub const STAGE1_ANALYSIS: &str = "stage1_analysis.json";
pub const STAGE1_CHECKPOINT: &str = "stage1.checkpoint";
pub const PSTAR_FILE: &str = "pstar.json";
pub const TRACE_FILE: &str = "optimize_trace.csv";
pub const WORKING_POINTS_FILE: &str = "stage3/working_points.csv";
pub const QSTAR_FILE: &str = "qstar.json";

/// A loaded configuration bound to a run directory.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: RunConfig,
    pub config_bytes: Vec<u8>,
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub workers: Option<usize>,
}

impl RunContext {
    /// Loads `config_path`; `out` overrides the configured output directory.
    pub fn load(config_path: &Path, out: Option<&Path>) -> Result<Self> {
        let loaded = RunConfig::load(config_path)?;
        let run_dir = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| loaded.config.output_dir.clone());
        Ok(Self {
            workers: loaded.config.workers,
            config: loaded.config,
            config_bytes: loaded.bytes,
            config_hash: loaded.hash,
            run_dir,
        })
    }

    /// Context for an in-memory config, hashed over its JSON serialization.
    pub fn from_config(config: RunConfig, run_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let bytes = serde_json::to_vec_pretty(&config).expect("config serializes");
        Ok(Self {
            workers: config.workers,
            config_hash: sha256_hex(&bytes),
            config_bytes: bytes,
            config,
            run_dir: run_dir.into(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.workers {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
                .install(f),
            None => f(),
        }
    }

    /// Writes `config.json` unless an identical copy is already there.
    fn write_config_copy(&self) -> Result<()> {
        let path = self.path(CONFIG_FILE);
        if std::fs::read(&path)
            .map(|b| b == self.config_bytes)
            .unwrap_or(false)
        {
            return Ok(());
        }
        write_atomic(&path, &self.config_bytes)
    }

    fn open(&self, force: bool) -> Result<(RunLock, Manifest)> {
        let lock = RunLock::acquire(&self.run_dir)?;
        let manifest = Manifest::open(&self.run_dir, &self.config_hash, force)?;
        self.write_config_copy()?;
        Ok((lock, manifest))
    }
}

/// Path of `p` relative to `run_dir` when inside it, else as given.
fn manifest_path(run_dir: &Path, p: &Path) -> String {
    p.strip_prefix(run_dir)
        .unwrap_or(p)
        .to_string_lossy()
        .into_owned()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_atomic(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::parse(path, e))
}

/// Runs `body` as stage `name`, recording start, outputs and failure.
fn tracked<T>(
    ctx: &RunContext,
    manifest: &mut Manifest,
    name: &str,
    inputs: &[&str],
    body: impl FnOnce(&mut Manifest) -> Result<(T, Vec<String>)>,
) -> Result<T> {
    manifest.begin_stage(&ctx.run_dir, name, inputs)?;
    match body(manifest) {
        Ok((value, outputs)) => {
            manifest.finish_stage(&ctx.run_dir, name, &outputs)?;
            Ok(value)
        }
        Err(e) => {
            let _ = manifest.fail_stage(&ctx.run_dir, name);
            Err(e)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub records: Vec<SweepRecord>,
    pub analysis: Option<AnalysisReport>,
}

impl Stage1Outcome {
    pub fn failed_count(&self) -> usize {
        self.records.iter().filter(|r| r.failed).count()
    }
}

fn stage1_body(ctx: &RunContext) -> Result<(Stage1Outcome, Vec<String>)> {
    let cfg = &ctx.config;
    let checkpoint = ctx.path(STAGE1_CHECKPOINT);
    let opts = SweepOptions {
        workers: ctx.workers,
        checkpoint: Some(checkpoint.clone()),
        record_wall_time: cfg.stage1.record_wall_time,
        limit: None,
    };
    let records = run_sweep(
        &cfg.parameter_grid(),
        &cfg.sim_config()?,
        &cfg.metric_config(),
        &opts,
    )?;
    write_sweep_csv(&records, &ctx.path(STAGE1_CSV))?;
    let mut outputs = vec![STAGE1_CSV.to_string()];
    let cutoff = cfg.stage1.cutoff.or(cfg.metric.cutoff);
    let analysis = match analyze(&records, cutoff) {
        Ok(a) => {
            write_json(&ctx.path(STAGE1_ANALYSIS), &a)?;
            outputs.push(STAGE1_ANALYSIS.to_string());
            Some(a)
        }
        Err(e) => {
            log::warn!("stage 1 analysis skipped: {e}");
            None
        }
    };
    std::fs::remove_file(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    Ok((Stage1Outcome { records, analysis }, outputs))
}

/// Linear grid sweep. Resumes from `stage1.checkpoint` after interruption.
pub fn run_stage1(ctx: &RunContext, force: bool) -> Result<Stage1Outcome> {
    let (_lock, mut manifest) = ctx.open(force)?;
    tracked(ctx, &mut manifest, STAGE1, &[CONFIG_FILE], |_| stage1_body(ctx))
}

/// Optimizer settings that may be overridden from the command line.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OptimizeOverrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub cold_start: bool,
}

/// The optimized device `p*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PStar {
    pub params: DeviceParams,
    /// Kerr-free flux of the optimized α, in Φ0.
    pub flux_ext: f64,
    pub metric: MetricBreakdown,
    /// Closest Stage-1 grid point.
    pub nearest_grid_point: DeviceParams,
    pub combo_id: usize,
    pub seed: u64,
    pub budget: usize,
    pub evaluations: usize,
    pub warm_start_points: usize,
}

fn device_from(cont: &[f64], en: &[f64], cell_count: u32) -> DeviceParams {
    DeviceParams::from_array(
        [cont[0], cont[1], en[0], cont[2], en[1], en[2], en[3]],
        cell_count,
    )
}

/// Stage-1 rows as optimizer observations (failed rows dropped).
pub fn observations(records: &[SweepRecord]) -> Vec<Observation> {
    records
        .iter()
        .filter(|r| !r.failed && r.metric_total.is_finite())
        .map(|r| {
            let p = &r.params;
            Observation {
                continuous: vec![p.junction_area, p.current_density, p.dielectric_thickness],
                enumerated: vec![
                    p.alpha,
                    p.inductance_load_ratio,
                    p.capacitance_load_ratio,
                    f64::from(p.pitch),
                ],
                metric: r.metric_total,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub pstar: PStar,
    pub result: OptResult,
}

fn optimize_body(
    ctx: &RunContext,
    manifest: &mut Manifest,
    stage1_csv: Option<&Path>,
    over: OptimizeOverrides,
) -> Result<(OptimizeOutcome, Vec<String>)> {
    let cfg = &ctx.config;
    let mut bo = cfg.bo_config();
    if let Some(s) = over.seed {
        bo.seed = s;
    }
    if let Some(b) = over.budget {
        bo.budget = b;
    }
    bo.validate()?;
    let warm = match (stage1_csv, over.cold_start) {
        (Some(path), false) => observations(&read_sweep_csv(path, cfg.cell_count)?),
        _ => Vec::new(),
    };
    let space = cfg.search_space()?;
    let bias = BiasTable::for_alphas(space.enumerated[0].values.iter().copied())?;
    let sim = cfg.sim_config()?;
    let metric = cfg.metric_config();
    let objective = |c: &[f64], e: &[f64]| -> Result<f64> {
        let p = device_from(c, e, cfg.cell_count);
        Ok(evaluate_design(&p, bias.get(p.alpha)?, &sim, &metric)?.total)
    };
    let result = ctx.install(|| optimize_metric(&space, objective, &bo, &warm))?;

    let params = device_from(&result.best_continuous, &result.best_enumerated, cfg.cell_count);
    let flux_ext = bias.get(params.alpha)?;
    let breakdown = evaluate_design(&params, flux_ext, &sim, &metric)?;
    let nearest = cfg.parameter_grid().nearest(&params.as_array())?;
    let pstar = PStar {
        params,
        flux_ext,
        metric: breakdown,
        nearest_grid_point: DeviceParams::from_array(nearest, cfg.cell_count),
        combo_id: result.best_combo,
        seed: bo.seed,
        budget: bo.budget,
        evaluations: result.history.iter().filter(|e| !e.warm_start).count(),
        warm_start_points: result.history.iter().filter(|e| e.warm_start).count(),
    };
    write_json(&ctx.path(PSTAR_FILE), &pstar)?;
    write_atomic(&ctx.path(TRACE_FILE), trace_csv(&space, &result).as_bytes())?;
    manifest.seeds.insert(OPTIMIZE.to_string(), bo.seed);
    Ok((
        OptimizeOutcome { pstar, result },
        vec![PSTAR_FILE.into(), TRACE_FILE.into()],
    ))
}

/// Bayesian optimization warm-started from a Stage-1 CSV unless
/// `cold_start` is set or no CSV is given.
pub fn run_optimize(
    ctx: &RunContext,
    stage1_csv: Option<&Path>,
    over: OptimizeOverrides,
    force: bool,
) -> Result<OptimizeOutcome> {
    let (_lock, mut manifest) = ctx.open(force)?;
    let input = stage1_csv
        .filter(|_| !over.cold_start)
        .map(|p| manifest_path(&ctx.run_dir, p));
    let mut inputs = vec![CONFIG_FILE];
    inputs.extend(input.as_deref());
    tracked(ctx, &mut manifest, OPTIMIZE, &inputs, |m| {
        optimize_body(ctx, m, stage1_csv, over)
    })
}

/// The selected working point `q*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QStar {
    pub params: DeviceParams,
    pub pump_amplitude_ua: f64,
    pub xi: f64,
    pub flux: f64,
    pub performance_db: f64,
    pub critical_current_ua: f64,
    pub pump_ghz: f64,
    pub signal_band_ghz: [f64; 2],
    /// Gain profile of `q*`, relative to the run directory.
    pub gain_file: String,
}

#[derive(Debug, Clone)]
pub struct Stage3Outcome {
    pub qstar: QStar,
    pub table: Vec<WorkingPoint>,
}

pub fn gain_file(i: usize) -> String {
    format!("stage3/gain_{i:02}.csv")
}

/// Flux for Stage 3: the configured override, else the Kerr-free bias.
pub fn stage3_flux(cfg: &RunConfig, pstar: &PStar) -> Result<f64> {
    match cfg.drive_flux_override()? {
        Some(f) => Ok(f),
        None => Ok(pstar.flux_ext),
    }
}

fn stage3_body(ctx: &RunContext, pstar_path: &Path) -> Result<(Stage3Outcome, Vec<String>)> {
    let cfg = &ctx.config;
    let pstar: PStar = read_json(pstar_path)?;
    let flux = stage3_flux(cfg, &pstar)?;
    let dev = LinearDevice::build(&pstar.params, flux, &cfg.frequency_grid()?, &cfg.cell)?;
    let template = cfg.drive_template(flux);
    let search = ctx.install(|| optimize_working_point(&dev, &cfg.pump_amplitudes()?, &template))?;

    let mut outputs = Vec::new();
    for (i, profile) in search.profiles.iter().enumerate() {
        if let Some(p) = profile {
            let name = gain_file(i);
            write_atomic(&ctx.path(&name), p.to_csv().as_bytes())?;
            outputs.push(name);
        }
    }
    write_atomic(&ctx.path(WORKING_POINTS_FILE), search.table_csv().as_bytes())?;
    outputs.push(WORKING_POINTS_FILE.into());

    let best = search.best_point();
    let band = cfg.signal_band();
    let qstar = QStar {
        params: pstar.params,
        pump_amplitude_ua: best.pump_amplitude_ua,
        xi: best.xi,
        flux,
        performance_db: best.performance_db,
        critical_current_ua: dev.critical_current()?,
        pump_ghz: cfg.metric.pump_ghz,
        signal_band_ghz: [band[0] / 1e9, band[1] / 1e9],
        gain_file: gain_file(search.best),
    };
    write_json(&ctx.path(QSTAR_FILE), &qstar)?;
    outputs.push(QSTAR_FILE.into());
    Ok((
        Stage3Outcome {
            qstar,
            table: search.table,
        },
        outputs,
    ))
}

/// Nonlinear gain over the pump-amplitude grid for the device in `pstar_path`.
pub fn run_stage3(ctx: &RunContext, pstar_path: &Path, force: bool) -> Result<Stage3Outcome> {
    let (_lock, mut manifest) = ctx.open(force)?;
    let input = manifest_path(&ctx.run_dir, pstar_path);
    tracked(ctx, &mut manifest, STAGE3, &[CONFIG_FILE, &input], |_| {
        stage3_body(ctx, pstar_path)
    })
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// Stages executed in this invocation (the rest were reused).
    pub ran: Vec<&'static str>,
    pub failed_rows: usize,
    pub pstar: PStar,
    pub qstar: QStar,
}

/// All three stages plus the report. Stages whose recorded outputs are
/// intact under the same config are skipped.
pub fn run_pipeline(ctx: &RunContext, force: bool) -> Result<PipelineOutcome> {
    let (lock, mut manifest) = ctx.open(force)?;
    let mut ran = Vec::new();

    if !manifest.stage_is_current(&ctx.run_dir, STAGE1) {
        tracked(ctx, &mut manifest, STAGE1, &[CONFIG_FILE], |_| stage1_body(ctx))?;
        ran.push(STAGE1);
    }
    let failed_rows = read_sweep_csv(&ctx.path(STAGE1_CSV), ctx.config.cell_count)?
        .iter()
        .filter(|r| r.failed)
        .count();

    let stage1_csv = ctx.path(STAGE1_CSV);
    if ran.contains(&STAGE1) || !manifest.stage_is_current(&ctx.run_dir, OPTIMIZE) {
        tracked(ctx, &mut manifest, OPTIMIZE, &[CONFIG_FILE, STAGE1_CSV], |m| {
            optimize_body(ctx, m, Some(&stage1_csv), OptimizeOverrides::default())
        })?;
        ran.push(OPTIMIZE);
    }

    let pstar_path = ctx.path(PSTAR_FILE);
    if ran.contains(&OPTIMIZE) || !manifest.stage_is_current(&ctx.run_dir, STAGE3) {
        tracked(ctx, &mut manifest, STAGE3, &[CONFIG_FILE, PSTAR_FILE], |_| {
            stage3_body(ctx, &pstar_path)
        })?;
        ran.push(STAGE3);
    }

    if ran.contains(&STAGE3) || !manifest.stage_is_current(&ctx.run_dir, REPORT) {
        let inputs = report_inputs(&ctx.run_dir);
        let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        tracked(ctx, &mut manifest, REPORT, &inputs, |_| {
            report_body(&ctx.run_dir, &ctx.config)
        })?;
        ran.push(REPORT);
    }
    drop(lock);

    Ok(PipelineOutcome {
        ran,
        failed_rows,
        pstar: read_json(&pstar_path)?,
        qstar: read_json(&ctx.path(QSTAR_FILE))?,
    })
}

fn report_inputs(run_dir: &Path) -> Vec<String> {
    [CONFIG_FILE, STAGE1_ANALYSIS, PSTAR_FILE, QSTAR_FILE]
        .into_iter()
        .filter(|f| run_dir.join(f).exists())
        .map(String::from)
        .collect()
}

/// Dispersion with a marker column for the pump and half-pump frequencies,
/// inserted as interpolated rows when they fall between grid points.
pub fn dispersion_csv(disp: &DispersionCurve, pump_freq: f64) -> Result<String> {
    let slope = disp
        .freqs
        .iter()
        .zip(&disp.k)
        .find(|(f, _)| **f > 0.0)
        .map(|(f, k)| k / f)
        .unwrap_or(0.0);
    let mut rows: Vec<(f64, f64, f64, &str)> = disp
        .freqs
        .iter()
        .zip(disp.k.iter().zip(&disp.k_raw))
        .map(|(&f, (&k, &kr))| (f, k, kr, ""))
        .collect();
    for (f, label) in [(pump_freq / 2.0, "half_pump"), (pump_freq, "pump")] {
        match rows.iter_mut().find(|r| (r.0 - f).abs() <= 1e-3) {
            Some(r) => r.3 = label,
            None => {
                let k = disp.k_at(f)?;
                let kr = crate::util::interp(&disp.freqs, &disp.k_raw, f).unwrap_or(f64::NAN);
                rows.push((f, k, kr, label));
            }
        }
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = String::from("f_Hz,k_rad_per_cell,k_raw_rad_per_cell,k_linear_ref,marker\n");
    for (f, k, kr, label) in rows {
        out.push_str(&format!(
            "{},{},{},{},{label}\n",
            fmt17(f),
            fmt17(k),
            fmt17(kr),
            fmt17(slope * f)
        ));
    }
    Ok(out)
}

pub fn correlation_csv(a: &AnalysisReport) -> String {
    let c = &a.correlation;
    let mut out = format!("parameter,{}\n", c.names.join(","));
    for (name, row) in c.names.iter().zip(&c.values) {
        out.push_str(name);
        for v in row {
            out.push(',');
            out.push_str(&fmt17(*v));
        }
        out.push('\n');
    }
    out
}

pub fn histograms_csv(a: &AnalysisReport) -> String {
    let mut out = String::from("parameter,value,weight\n");
    for h in &a.histograms.histograms {
        for (v, w) in &h.bins {
            out.push_str(&format!("{},{},{}\n", h.name, fmt17(*v), fmt17(*w)));
        }
    }
    out
}

pub const REPORT_DISPERSION: &str = "report/dispersion.csv";
pub const REPORT_CORRELATION: &str = "report/correlation.csv";
pub const REPORT_HISTOGRAMS: &str = "report/histograms.csv";
pub const REPORT_GAIN: &str = "report/gain_qstar.csv";
pub const REPORT_S2P: &str = "report/pstar.s2p";

fn report_body(run_dir: &Path, cfg: &RunConfig) -> Result<((), Vec<String>)> {
    let mut outputs = Vec::new();
    let pstar_path = run_dir.join(PSTAR_FILE);
    if pstar_path.exists() {
        let pstar: PStar = read_json(&pstar_path)?;
        let resp = simulate_linear(&pstar.params, pstar.flux_ext, &cfg.frequency_grid()?, &cfg.cell)?;
        let disp = crate::network::dispersion(&resp, pstar.params.cell_count)?;
        write_atomic(
            &run_dir.join(REPORT_DISPERSION),
            dispersion_csv(&disp, cfg.metric.pump_ghz * 1e9)?.as_bytes(),
        )?;
        crate::touchstone::export_touchstone(&resp, &run_dir.join(REPORT_S2P))?;
        outputs.push(REPORT_DISPERSION.to_string());
        outputs.push(REPORT_S2P.to_string());
    }
    let analysis_path = run_dir.join(STAGE1_ANALYSIS);
    if analysis_path.exists() {
        let a: AnalysisReport = read_json(&analysis_path)?;
        write_atomic(&run_dir.join(REPORT_CORRELATION), correlation_csv(&a).as_bytes())?;
        write_atomic(&run_dir.join(REPORT_HISTOGRAMS), histograms_csv(&a).as_bytes())?;
        outputs.push(REPORT_CORRELATION.to_string());
        outputs.push(REPORT_HISTOGRAMS.to_string());
    }
    let qstar_path = run_dir.join(QSTAR_FILE);
    if qstar_path.exists() {
        let q: QStar = read_json(&qstar_path)?;
        let src = run_dir.join(&q.gain_file);
        let bytes = std::fs::read(&src).map_err(|e| Error::io(&src, e))?;
        write_atomic(&run_dir.join(REPORT_GAIN), &bytes)?;
        outputs.push(REPORT_GAIN.to_string());
    }
    if outputs.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no stage outputs to report on",
            run_dir.display()
        )));
    }
    Ok(((), outputs))
}

/// Regenerates `report/` from an existing run directory, using the
/// `config.json` stored there.
pub fn report(run_dir: &Path) -> Result<Vec<String>> {
    let config_path = run_dir.join(CONFIG_FILE);
    let ctx = RunContext::load(&config_path, Some(run_dir))?;
    let _lock = RunLock::acquire(run_dir)?;
    let mut manifest = Manifest::open(run_dir, &ctx.config_hash, false)?;
    let inputs = report_inputs(run_dir);
    let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    tracked(&ctx, &mut manifest, REPORT, &inputs, |_| {
        report_body(run_dir, &ctx.config)
    })?;
    Ok(manifest.stages[REPORT]
        .outputs
        .iter()
        .map(|f| f.path.clone())
        .collect())
}
