//! Stage 2: expected-improvement Bayesian optimization.
//!
//! Low-cardinality dimensions are enumerated; each combination gets its own
//! GP-driven search over the continuous dimensions, normalized to the unit
//! cube. Combinations run in parallel, each with its own seeded RNG, so the
//! whole history is a pure function of the inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_gp_with, FitOptions, GpModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDim {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumeratedDim {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub continuous: Vec<ContinuousDim>,
    pub enumerated: Vec<EnumeratedDim>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.continuous.is_empty() {
            return Err(Error::Config("search space needs a continuous dimension".into()));
        }
        for d in &self.continuous {
            if !(d.lo < d.hi) || !d.lo.is_finite() || !d.hi.is_finite() {
                return Err(Error::Config(format!(
                    "dimension {}: need lo < hi, got [{}, {}]",
                    d.name, d.lo, d.hi
                )));
            }
        }
        for d in &self.enumerated {
            if d.values.is_empty() {
                return Err(Error::Config(format!("dimension {} has no values", d.name)));
            }
        }
        let mut names: Vec<&str> = self.names();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "search-space dimension names must be unique".into(),
            ));
        }
        Ok(())
    }

    /// Continuous names followed by enumerated names.
    pub fn names(&self) -> Vec<&str> {
        self.continuous
            .iter()
            .map(|d| d.name.as_str())
            .chain(self.enumerated.iter().map(|d| d.name.as_str()))
            .collect()
    }

    /// Every combination of enumerated values, last dimension fastest.
    pub fn combos(&self) -> Vec<Vec<f64>> {
        self.enumerated.iter().fold(vec![Vec::new()], |acc, dim| {
            acc.iter()
                .flat_map(|prefix| {
                    dim.values.iter().map(move |&v| {
                        let mut c = prefix.clone();
                        c.push(v);
                        c
                    })
                })
                .collect()
        })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.continuous)
            .map(|(v, d)| (v - d.lo) / (d.hi - d.lo))
            .collect()
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.continuous)
            .map(|(v, d)| (d.lo + v.clamp(0.0, 1.0) * (d.hi - d.lo)).clamp(d.lo, d.hi))
            .collect()
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.continuous.len()
            && x.iter().zip(&self.continuous).all(|(v, d)| {
                let tol = 1e-9 * (d.hi - d.lo);
                *v >= d.lo - tol && *v <= d.hi + tol
            })
    }
}

fn same_combo(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Evaluations per enumerated combination, warm-start points included.
    pub budget: usize,
    pub seed: u64,
    /// Keep only the best this-many warm-start points per combination.
    pub max_warm_start: Option<usize>,
    /// Latin-hypercube points used when fewer than two warm-start points exist.
    pub initial_design: usize,
    pub candidates: usize,
    pub local_candidates: usize,
    /// Standard deviation of the incumbent perturbations (unit-cube units).
    pub local_sigma: f64,
    /// Full multi-start hyperparameter fit every this-many iterations; in
    /// between, a single local refinement from the previous hyperparameters.
    pub refit_every: usize,
    /// Model `ln(metric)` instead of the metric.
    pub log_transform: bool,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            budget: 80,
            seed: 0,
            max_warm_start: Some(40),
            initial_design: 8,
            candidates: 4096,
            local_candidates: 16,
            local_sigma: 0.05,
            refit_every: 10,
            log_transform: true,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget < 10 {
            return Err(Error::Config(format!(
                "BO budget must be >= 10 per combination, got {}",
                self.budget
            )));
        }
        if self.candidates == 0 || self.initial_design < 2 || self.refit_every == 0 {
            return Err(Error::Config(
                "BO needs candidates > 0, initial_design >= 2 and refit_every > 0".into(),
            ));
        }
        if !(self.local_sigma > 0.0) {
            return Err(Error::Config("local_sigma must be > 0".into()));
        }
        Ok(())
    }
}

/// A known design point and its metric, e.g. from Stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub continuous: Vec<f64>,
    pub enumerated: Vec<f64>,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub combo_id: usize,
    /// 0 for warm-start points, then 1, 2, ... for new evaluations.
    pub iteration: usize,
    pub continuous: Vec<f64>,
    pub enumerated: Vec<f64>,
    /// `+inf` when the objective failed.
    pub metric: f64,
    pub failed: bool,
    pub warm_start: bool,
    /// This evaluation became the combination's best so far.
    pub is_incumbent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboResult {
    pub combo_id: usize,
    pub enumerated: Vec<f64>,
    pub best_continuous: Vec<f64>,
    pub best_metric: f64,
    pub new_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best_combo: usize,
    pub best_continuous: Vec<f64>,
    pub best_enumerated: Vec<f64>,
    pub best_metric: f64,
    pub history: Vec<Evaluation>,
    pub per_combo: Vec<ComboResult>,
}

/// Index and value of the largest EI among `candidates` (first on ties).
pub fn select_by_ei(model: &GpModel, candidates: &[Vec<f64>], best_y: f64) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, p) in model.posterior_batch(candidates).iter().enumerate() {
        let ei = crate::gp::expected_improvement(p.mean, p.variance.sqrt(), best_y);
        if ei > best.1 {
            best = (i, ei);
        }
    }
    best
}

/// Maximizes EI over uniform candidates plus Gaussian perturbations of the
/// incumbent, all in the unit cube. Returns the point and its EI.
pub fn propose_next(
    model: &GpModel,
    incumbent: &[f64],
    best_y: f64,
    cfg: &BoConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let d = model.dims();
    let mut cands: Vec<Vec<f64>> = Vec::with_capacity(cfg.candidates + cfg.local_candidates);
    for _ in 0..cfg.candidates {
        cands.push((0..d).map(|_| rng.random::<f64>()).collect());
    }
    let jitter = Normal::new(0.0, cfg.local_sigma).expect("sigma checked positive");
    for _ in 0..cfg.local_candidates {
        cands.push(
            incumbent
                .iter()
                .map(|&x| (x + jitter.sample(rng)).clamp(0.0, 1.0))
                .collect(),
        );
    }
    let (i, ei) = select_by_ei(model, &cands, best_y);
    (cands.swap_remove(i), ei)
}

/// `n` stratified points in the unit cube, one per row and column slice.
#[allow(clippy::needless_range_loop)] // fills column by column
pub fn latin_hypercube(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        for (i, p) in perm.into_iter().enumerate() {
            pts[i][j] = (p as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

fn combo_seed(seed: u64, combo: usize) -> u64 {
    // splitmix64 step so neighbouring combos get unrelated streams
    let mut z = seed ^ (combo as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct ComboRun<'a, F> {
    space: &'a SearchSpace,
    objective: &'a F,
    cfg: &'a BoConfig,
    combo_id: usize,
    enumerated: Vec<f64>,
    history: Vec<Evaluation>,
    inputs: Vec<Vec<f64>>,
    best: Option<(f64, usize)>,
}

impl<F> ComboRun<'_, F>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    fn record(&mut self, x_unit: Vec<f64>, continuous: Vec<f64>, metric: Result<f64>, warm: bool) {
        let (metric, failed) = match metric {
            Ok(m) if m.is_finite() => (m, false),
            Ok(m) => {
                log::warn!("combo {}: objective returned {m}; flagged", self.combo_id);
                (f64::INFINITY, true)
            }
            Err(e) => {
                log::warn!("combo {}: objective failed: {e}", self.combo_id);
                (f64::INFINITY, true)
            }
        };
        let improves = !failed && self.best.map_or(true, |(b, _)| metric < b);
        if improves {
            self.best = Some((metric, self.inputs.len()));
        }
        self.history.push(Evaluation {
            combo_id: self.combo_id,
            iteration: if warm {
                0
            } else {
                self.history.iter().filter(|e| !e.warm_start).count() + 1
            },
            continuous,
            enumerated: self.enumerated.clone(),
            metric,
            failed,
            warm_start: warm,
            is_incumbent: improves,
        });
        self.inputs.push(x_unit);
    }

    fn evaluate(&mut self, x_unit: Vec<f64>) {
        let x = self.space.denormalize(&x_unit);
        let m = (self.objective)(&x, &self.enumerated);
        self.record(x_unit, x, m, false);
    }

    /// GP targets, with failures replaced by ten times the worst success.
    fn targets(&self) -> Vec<f64> {
        let ok: Vec<f64> = self
            .history
            .iter()
            .filter(|e| !e.failed)
            .map(|e| e.metric)
            .collect();
        let worst = ok.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sentinel = if worst.is_finite() && worst != 0.0 {
            10.0 * worst.abs()
        } else {
            1.0
        };
        let raw: Vec<f64> = self
            .history
            .iter()
            .map(|e| if e.failed { sentinel } else { e.metric })
            .collect();
        if self.cfg.log_transform && raw.iter().all(|&m| m > 0.0) {
            raw.iter().map(|m| m.ln()).collect()
        } else {
            raw
        }
    }
}

fn run_combo<F>(
    space: &SearchSpace,
    objective: &F,
    cfg: &BoConfig,
    combo_id: usize,
    enumerated: Vec<f64>,
    warm: &[Observation],
) -> Result<(ComboResult, Vec<Evaluation>)>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    let mut rng = ChaCha8Rng::seed_from_u64(combo_seed(cfg.seed, combo_id));
    let mut warm: Vec<&Observation> = warm
        .iter()
        .filter(|o| same_combo(&o.enumerated, &enumerated) && space.contains(&o.continuous))
        .collect();
    warm.sort_by(|a, b| a.metric.total_cmp(&b.metric));
    if let Some(cap) = cfg.max_warm_start {
        warm.truncate(cap);
    }

    let mut run = ComboRun {
        space,
        objective,
        cfg,
        combo_id,
        enumerated,
        history: Vec::new(),
        inputs: Vec::new(),
        best: None,
    };
    for o in &warm {
        let u = space.normalize(&o.continuous);
        run.record(u, o.continuous.clone(), Ok(o.metric), true);
    }
    if run.history.len() < 2 {
        let d = space.continuous.len();
        let room = cfg.budget.saturating_sub(run.history.len());
        for x in latin_hypercube(cfg.initial_design.min(room), d, &mut rng) {
            run.evaluate(x);
        }
    }

    let mut hyper = None;
    let mut since_full = usize::MAX;
    while run.history.len() < cfg.budget {
        let y = run.targets();
        let full = since_full >= cfg.refit_every || hyper.is_none();
        let opts = if full {
            FitOptions {
                seed: rng.random(),
                ..FitOptions::default()
            }
        } else {
            FitOptions {
                starts: 1,
                warm_start: hyper.clone(),
                initial_step: 0.25,
                ..FitOptions::default()
            }
        };
        let model = fit_gp_with(&run.inputs, &y, &opts)?;
        since_full = if full { 1 } else { since_full + 1 };
        hyper = Some(model.hyperparameters().clone());

        let (best_y, incumbent) = y
            .iter()
            .zip(&run.inputs)
            .min_by(|a, b| a.0.total_cmp(b.0))
            .map(|(v, x)| (*v, x.clone()))
            .expect("nonempty history");
        let (x, _) = propose_next(&model, &incumbent, best_y, cfg, &mut rng);
        run.evaluate(x);
    }

    let new_evaluations = run.history.iter().filter(|e| !e.warm_start).count();
    let (best_metric, best_continuous) = match run.best {
        Some((m, i)) => (m, run.history[i].continuous.clone()),
        None => (
            f64::INFINITY,
            run.history
                .first()
                .map(|e| e.continuous.clone())
                .unwrap_or_default(),
        ),
    };
    let result = ComboResult {
        combo_id,
        enumerated: run.enumerated.clone(),
        best_continuous,
        best_metric,
        new_evaluations,
    };
    Ok((result, run.history))
}

/// Minimizes `objective(continuous, enumerated)` over `space`.
///
/// Each enumerated combination is warm-started from the matching
/// `warm_start` observations inside the bounds (best first, up to
/// `max_warm_start`), or from a Latin hypercube when fewer than two exist.
pub fn optimize_metric<F>(
    space: &SearchSpace,
    objective: F,
    cfg: &BoConfig,
    warm_start: &[Observation],
) -> Result<OptResult>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    space.validate()?;
    cfg.validate()?;
    let combos = space.combos();
    let runs: Vec<Result<(ComboResult, Vec<Evaluation>)>> = combos
        .into_par_iter()
        .enumerate()
        .map(|(id, enumerated)| run_combo(space, &objective, cfg, id, enumerated, warm_start))
        .collect();

    let mut per_combo = Vec::with_capacity(runs.len());
    let mut history = Vec::new();
    for r in runs {
        let (c, h) = r?;
        per_combo.push(c);
        history.extend(h);
    }
    let best = per_combo
        .iter()
        .filter(|c| c.best_metric.is_finite())
        .min_by(|a, b| a.best_metric.total_cmp(&b.best_metric))
        .ok_or_else(|| Error::Numerical("every objective evaluation failed".into()))?;
    Ok(OptResult {
        best_combo: best.combo_id,
        best_continuous: best.best_continuous.clone(),
        best_enumerated: best.enumerated.clone(),
        best_metric: best.best_metric,
        history,
        per_combo,
    })
}

/// Trace CSV: `combo_id,iteration,<names>,metric_total,is_incumbent`.
pub fn trace_csv(space: &SearchSpace, result: &OptResult) -> String {
    let mut out = String::from("combo_id,iteration,");
    out.push_str(&space.names().join(","));
    out.push_str(",metric_total,is_incumbent\n");
    for e in &result.history {
        out.push_str(&format!("{},{}", e.combo_id, e.iteration));
        for v in e.continuous.iter().chain(&e.enumerated) {
            out.push(',');
            out.push_str(&crate::util::fmt17(*v));
        }
        out.push(',');
        out.push_str(&crate::util::fmt17(e.metric));
        out.push_str(if e.is_incumbent { ",1\n" } else { ",0\n" });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{GpModel, Hyperparameters};

    fn cube(d: usize) -> SearchSpace {
        SearchSpace {
            continuous: (0..d)
                .map(|i| ContinuousDim {
                    name: format!("x{i}"),
                    lo: 0.0,
                    hi: 1.0,
                })
                .collect(),
            enumerated: vec![],
        }
    }

    fn quadratic(x: &[f64], _: &[f64]) -> Result<f64> {
        Ok(x.iter().map(|v| (v - 0.3).powi(2)).sum())
    }

    #[test]
    fn combos_are_lexicographic() {
        let s = SearchSpace {
            continuous: cube(1).continuous,
            enumerated: vec![
                EnumeratedDim {
                    name: "a".into(),
                    values: vec![1.0, 2.0],
                },
                EnumeratedDim {
                    name: "b".into(),
                    values: vec![5.0, 6.0, 7.0],
                },
            ],
        };
        let c = s.combos();
        assert_eq!(c.len(), 6);
        assert_eq!(c[1], vec![1.0, 6.0]);
        assert_eq!(c[3], vec![2.0, 5.0]);
        assert_eq!(cube(2).combos(), vec![Vec::<f64>::new()]);
    }

    #[test]
    fn validation() {
        let mut s = cube(2);
        s.continuous[1].name = "x0".into();
        assert!(s.validate().is_err());
        let mut s = cube(1);
        s.continuous[0].hi = 0.0;
        assert!(s.validate().is_err());
        let cfg = BoConfig {
            budget: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn argmax_picks_the_only_improving_candidate() {
        // noiseless model whose data all equal the incumbent: EI = 0 at the
        // training inputs, positive only at the one fresh point
        let x = vec![vec![0.1], vec![0.5], vec![0.9]];
        let h = Hyperparameters::isotropic(1, 1.0, 0.05, 1e-10);
        let m = GpModel::with_hyperparameters(&x, &[1.0, 1.0, 2.0], h).unwrap();
        let mut cands = x.clone();
        cands.insert(1, vec![0.3]);
        let (i, ei) = select_by_ei(&m, &cands, 1.0);
        assert_eq!(i, 1);
        assert!(ei > 0.0);
        // EI at a training point on the incumbent is σ φ(0) with σ set by the
        // 1e-10 noise floor
        assert!(m.expected_improvement(&x[0], 1.0) < 1e-5);
    }

    #[test]
    fn proposal_is_deterministic() {
        let x = vec![vec![0.1, 0.2], vec![0.6, 0.3], vec![0.4, 0.9]];
        let m = crate::gp::fit_gp(&x, &[1.0, 0.2, 3.0]).unwrap();
        let cfg = BoConfig::default();
        let a = propose_next(&m, &x[1], 0.2, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let b = propose_next(&m, &x[1], 0.2, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.0.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn latin_hypercube_is_stratified() {
        let pts = latin_hypercube(8, 3, &mut ChaCha8Rng::seed_from_u64(1));
        for j in 0..3 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[j] * 8.0) as usize).collect();
            bins.sort_unstable();
            assert_eq!(bins, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn one_dimensional_quadratic_brackets_minimum() {
        // the objective reaches 0, where ln(metric) is singular
        let cfg = BoConfig {
            budget: 18,
            seed: 4,
            log_transform: false,
            ..Default::default()
        };
        let r = optimize_metric(&cube(1), quadratic, &cfg, &[]).unwrap();
        assert_eq!(r.history.len(), 18);
        // the tenth proposal lands between the initial-design points that
        // bracket 0.3
        let last = r.history.last().unwrap();
        let xs: Vec<f64> = r.history[..8].iter().map(|e| e.continuous[0]).collect();
        let lo = xs.iter().cloned().filter(|&x| x <= 0.3).fold(0.0, f64::max);
        let hi = xs.iter().cloned().filter(|&x| x >= 0.3).fold(1.0, f64::min);
        let p = last.continuous[0];
        assert!(p >= lo && p <= hi, "proposal {p} outside [{lo}, {hi}]");
        assert!((r.best_continuous[0] - 0.3).abs() < 0.02);
    }

    #[test]
    fn budget_equal_to_warm_start_returns_best_warm_point() {
        let warm: Vec<Observation> = (0..10)
            .map(|i| {
                let x = vec![i as f64 / 10.0, 0.5];
                Observation {
                    metric: quadratic(&x, &[]).unwrap(),
                    continuous: x,
                    enumerated: vec![],
                }
            })
            .collect();
        let cfg = BoConfig {
            budget: 10,
            max_warm_start: None,
            ..Default::default()
        };
        let calls = std::sync::atomic::AtomicUsize::new(0);
        let r = optimize_metric(
            &cube(2),
            |x, e| {
                calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                quadratic(x, e)
            },
            &cfg,
            &warm,
        )
        .unwrap();
        assert_eq!(calls.into_inner(), 0);
        assert_eq!(r.per_combo[0].new_evaluations, 0);
        assert_eq!(r.best_continuous, vec![0.3, 0.5]);
    }

    #[test]
    fn failures_use_sentinel_and_are_flagged() {
        let cfg = BoConfig {
            budget: 12,
            seed: 9,
            ..Default::default()
        };
        let r = optimize_metric(
            &cube(2),
            |x, e| {
                if x[0] > 0.7 {
                    Err(Error::Numerical("boom".into()))
                } else {
                    quadratic(x, e)
                }
            },
            &cfg,
            &[],
        )
        .unwrap();
        assert!(r.best_metric.is_finite());
        let min = r.history.iter().map(|e| e.metric).fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_metric, min);
        for e in &r.history {
            assert_eq!(e.failed, e.metric.is_infinite());
        }
    }

    #[test]
    fn enumerated_combos_and_trace() {
        let space = SearchSpace {
            continuous: cube(1).continuous,
            enumerated: vec![EnumeratedDim {
                name: "shift".into(),
                values: vec![0.0, 1.0],
            }],
        };
        let cfg = BoConfig {
            budget: 10,
            seed: 2,
            ..Default::default()
        };
        let f = |x: &[f64], e: &[f64]| Ok((x[0] - 0.6).powi(2) + e[0]);
        let a = optimize_metric(&space, f, &cfg, &[]).unwrap();
        let b = optimize_metric(&space, f, &cfg, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_combo.len(), 2);
        assert_eq!(a.best_enumerated, vec![0.0]);
        let csv = trace_csv(&space, &a);
        assert!(csv.starts_with("combo_id,iteration,x0,shift,metric_total,is_incumbent\n"));
        assert_eq!(csv.lines().count(), 21);
    }
}
