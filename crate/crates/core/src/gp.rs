//! Gaussian-process regression with an anisotropic squared-exponential
//! kernel, used as the surrogate model for Bayesian optimization.
//!
//! Targets are standardized internally; predictions are returned in the
//! original target units. Hyperparameters are fitted by maximizing the log
//! marginal likelihood with a bounded multi-start coordinate (pattern)
//! search in log space.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub const LENGTH_SCALE_BOUNDS: (f64, f64) = (0.01, 10.0);
pub const SIGNAL_VARIANCE_BOUNDS: (f64, f64) = (1e-3, 1e2);
pub const NOISE_VARIANCE_BOUNDS: (f64, f64) = (1e-10, 1.0);
const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl Hyperparameters {
    pub fn isotropic(dims: usize, signal_variance: f64, length_scale: f64, noise_variance: f64) -> Self {
        Self {
            signal_variance,
            length_scales: vec![length_scale; dims],
            noise_variance,
        }
    }

    fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.length_scales.len() + 2);
        v.push(self.signal_variance.ln());
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v
    }

    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            signal_variance: v[0].exp(),
            length_scales: v[1..=d].iter().map(|x| x.exp()).collect(),
            noise_variance: v[d + 1].exp(),
        }
    }
}

fn log_bounds(dims: usize) -> Vec<(f64, f64)> {
    let ln = |(a, b): (f64, f64)| (a.ln(), b.ln());
    let mut b = vec![ln(SIGNAL_VARIANCE_BOUNDS)];
    b.extend(std::iter::repeat(ln(LENGTH_SCALE_BOUNDS)).take(dims));
    b.push(ln(NOISE_VARIANCE_BOUNDS));
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub starts: usize,
    /// Maximum coordinate sweeps per start.
    pub max_iters: usize,
    pub seed: u64,
    /// Replaces the default first start; with `starts == 1` this is a pure
    /// local refinement from the given point.
    pub warm_start: Option<Hyperparameters>,
    /// Initial log-space step of the pattern search.
    pub initial_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 8,
            max_iters: 200,
            seed: 0x5eed,
            warm_start: None,
            initial_step: 1.0,
        }
    }
}

/// Converged log marginal likelihood of every start, and the winner's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub start_lml: Vec<f64>,
    pub best_lml: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
    /// Variance came out negative from round-off and was clamped to zero.
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    y_mean: f64,
    y_scale: f64,
    hyper: Hyperparameters,
    jitter: f64,
    chol_l: DMatrix<f64>,
    chol_l_inv: DMatrix<f64>,
    weights: DVector<f64>,
    lml: f64,
    report: Option<FitReport>,
}

fn sq_exp(a: &[f64], b: &[f64], h: &Hyperparameters) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&h.length_scales)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum();
    h.signal_variance * (-0.5 * r2).exp()
}

struct Factorization {
    l: DMatrix<f64>,
    weights: DVector<f64>,
    jitter: f64,
    lml: f64,
}

fn factorize(inputs: &[Vec<f64>], y: &DVector<f64>, h: &Hyperparameters) -> Result<Factorization> {
    let n = inputs.len();
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = sq_exp(&inputs[i], &inputs[j], h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    for jitter in JITTER_LADDER {
        let mut kk = k.clone();
        for i in 0..n {
            kk[(i, i)] += h.noise_variance + jitter;
        }
        if let Some(chol) = kk.cholesky() {
            let weights = chol.solve(y);
            let l = chol.unpack();
            let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * y.dot(&weights) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();
            return Ok(Factorization {
                l,
                weights,
                jitter,
                lml,
            });
        }
    }
    let min_diag = (0..n).map(|i| k[(i, i)]).fold(f64::INFINITY, f64::min);
    Err(Error::Numerical(format!(
        "covariance not positive definite after jitter {:e}: n={n}, min diagonal {min_diag:e}, \
         signal variance {:e}, noise variance {:e}",
        JITTER_LADDER[JITTER_LADDER.len() - 1],
        h.signal_variance,
        h.noise_variance
    )))
}

fn standardize(targets: &[f64]) -> (f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 };
    (mean, scale)
}

fn check_training_data(inputs: &[Vec<f64>], targets: &[f64]) -> Result<usize> {
    if inputs.len() < 2 || inputs.len() != targets.len() {
        return Err(Error::Domain(format!(
            "GP needs >= 2 matching inputs/targets, got {} inputs and {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let d = inputs[0].len();
    if d == 0 || inputs.iter().any(|x| x.len() != d) {
        return Err(Error::Domain("GP inputs must share a nonzero dimension".into()));
    }
    if targets.iter().any(|y| !y.is_finite()) || inputs.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Domain("GP training data must be finite".into()));
    }
    Ok(d)
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on the training data.
    pub fn with_hyperparameters(
        inputs: &[Vec<f64>],
        targets: &[f64],
        hyper: Hyperparameters,
    ) -> Result<Self> {
        let d = check_training_data(inputs, targets)?;
        if hyper.length_scales.len() != d {
            return Err(Error::Domain(format!(
                "expected {d} length scales, got {}",
                hyper.length_scales.len()
            )));
        }
        let (y_mean, y_scale) = standardize(targets);
        let y = DVector::from_iterator(targets.len(), targets.iter().map(|t| (t - y_mean) / y_scale));
        let f = factorize(inputs, &y, &hyper)?;
        let n = inputs.len();
        let chol_l_inv =
            f.l.solve_lower_triangular(&DMatrix::identity(n, n))
                .expect("Cholesky factor has a positive diagonal");
        Ok(Self {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            y_mean,
            y_scale,
            hyper,
            jitter: f.jitter,
            chol_l: f.l,
            chol_l_inv,
            weights: f.weights,
            lml: f.lml,
            report: None,
        })
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn fit_report(&self) -> Option<&FitReport> {
        self.report.as_ref()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn dims(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn posterior(&self, x: &[f64]) -> Posterior {
        let n = self.inputs.len();
        let kstar = DVector::from_iterator(n, self.inputs.iter().map(|xi| sq_exp(x, xi, &self.hyper)));
        let mean = kstar.dot(&self.weights);
        let v = self
            .chol_l
            .solve_lower_triangular(&kstar)
            .expect("Cholesky factor has a positive diagonal");
        let var = self.hyper.signal_variance - v.norm_squared();
        let (var, clamped) = if var < 0.0 { (0.0, true) } else { (var, false) };
        Posterior {
            mean: self.y_mean + self.y_scale * mean,
            variance: self.y_scale * self.y_scale * var,
            clamped,
        }
    }

    /// [`GpModel::posterior`] for many points at once.
    pub fn posterior_batch(&self, xs: &[Vec<f64>]) -> Vec<Posterior> {
        let n = self.inputs.len();
        let kstar = DMatrix::from_fn(n, xs.len(), |i, j| sq_exp(&xs[j], &self.inputs[i], &self.hyper));
        let means = kstar.tr_mul(&self.weights);
        let v = &self.chol_l_inv * &kstar;
        (0..xs.len())
            .map(|j| {
                let var = self.hyper.signal_variance - v.column(j).norm_squared();
                let (var, clamped) = if var < 0.0 { (0.0, true) } else { (var, false) };
                Posterior {
                    mean: self.y_mean + self.y_scale * means[j],
                    variance: self.y_scale * self.y_scale * var,
                    clamped,
                }
            })
            .collect()
    }

    /// Expected improvement below `best_y` at `x`.
    pub fn expected_improvement(&self, x: &[f64], best_y: f64) -> f64 {
        let p = self.posterior(x);
        expected_improvement(p.mean, p.variance.sqrt(), best_y)
    }
}

/// `EI = (best - μ) Φ(z) + σ φ(z)`, `z = (best - μ) / σ`; `max(best - μ, 0)`
/// when `σ = 0`.
pub fn expected_improvement(mean: f64, sigma: f64, best_y: f64) -> f64 {
    let gain = best_y - mean;
    if !(sigma > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
    (gain * cdf + sigma * pdf).max(0.0)
}

/// Fits hyperparameters with the default options.
pub fn fit_gp(inputs: &[Vec<f64>], targets: &[f64]) -> Result<GpModel> {
    fit_gp_with(inputs, targets, &FitOptions::default())
}

pub fn fit_gp_with(inputs: &[Vec<f64>], targets: &[f64], opts: &FitOptions) -> Result<GpModel> {
    let d = check_training_data(inputs, targets)?;
    let (y_mean, y_scale) = standardize(targets);
    let y = DVector::from_iterator(targets.len(), targets.iter().map(|t| (t - y_mean) / y_scale));
    let bounds = log_bounds(d);
    let clamp = |v: &mut [f64]| {
        for (x, (lo, hi)) in v.iter_mut().zip(&bounds) {
            *x = x.clamp(*lo, *hi);
        }
    };
    let lml_at = |theta: &[f64]| -> f64 {
        factorize(inputs, &y, &Hyperparameters::from_log(theta))
            .map(|f| f.lml)
            .unwrap_or(f64::NEG_INFINITY)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (inputs.len() as u64).wrapping_mul(0x9e37_79b9));
    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(opts.starts.max(1));
    starts.push(
        opts.warm_start
            .clone()
            .unwrap_or_else(|| Hyperparameters::isotropic(d, 1.0, 0.3, 1e-4))
            .to_log(),
    );
    while starts.len() < opts.starts.max(1) {
        starts.push(bounds.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect());
    }

    let mut start_lml = Vec::with_capacity(starts.len());
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mut theta in starts {
        clamp(&mut theta);
        let mut value = lml_at(&theta);
        let mut step = opts.initial_step;
        for _ in 0..opts.max_iters {
            let mut improved = false;
            for j in 0..theta.len() {
                for dir in [1.0, -1.0] {
                    let mut trial = theta.clone();
                    trial[j] = (trial[j] + dir * step).clamp(bounds[j].0, bounds[j].1);
                    if trial[j] == theta[j] {
                        continue;
                    }
                    let v = lml_at(&trial);
                    if v > value + 1e-12 {
                        theta = trial;
                        value = v;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < 1e-2 {
                    break;
                }
            }
        }
        start_lml.push(value);
        if best.as_ref().map_or(true, |(b, _)| value > *b) {
            best = Some((value, theta));
        }
    }
    let (best_lml, theta) = best.expect("at least one start");
    if !best_lml.is_finite() {
        // every start failed to factorize; surface the diagnostics
        factorize(inputs, &y, &Hyperparameters::from_log(&theta))?;
    }
    let mut model = GpModel::with_hyperparameters(inputs, targets, Hyperparameters::from_log(&theta))?;
    model.report = Some(FitReport { start_lml, best_lml });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expected_improvement_closed_forms() {
        assert_eq!(expected_improvement(1.0, 0.0, 1.0), 0.0);
        assert_eq!(expected_improvement(0.0, 0.0, 1.0), 1.0);
        let ei = expected_improvement(2.0, 1.0, 2.0);
        assert!((ei - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((ei - 0.3989).abs() < 1e-4);
        assert!(expected_improvement(10.0, 1e-3, 0.0) >= 0.0);
    }

    #[test]
    fn rejects_too_little_data() {
        assert!(fit_gp(&[vec![0.1]], &[1.0]).is_err());
        assert!(fit_gp(&[vec![0.1], vec![0.2]], &[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn duplicate_inputs_with_conflicting_targets_raise_noise() {
        let m = fit_gp(&[vec![0.5], vec![0.5]], &[0.0, 1.0]).unwrap();
        assert!(
            m.hyperparameters().noise_variance > 0.1,
            "{:?}",
            m.hyperparameters()
        );
    }

    #[test]
    fn constant_targets_give_flat_posterior() {
        let x = vec![vec![0.1], vec![0.4], vec![0.9]];
        let m = fit_gp(&x, &[3.0, 3.0, 3.0]).unwrap();
        for xi in &x {
            let p = m.posterior(xi);
            assert!((p.mean - 3.0).abs() < 1e-9);
            assert!(p.variance < 1e-6);
        }
        assert!((m.posterior(&[0.65]).mean - 3.0).abs() < 1e-9);
    }

    #[test]
    fn interpolates_training_points_without_noise() {
        let x = vec![vec![0.0, 0.1], vec![0.5, 0.7], vec![0.9, 0.2], vec![0.3, 0.3]];
        let y = [1.0, -2.0, 0.5, 4.0];
        let h = Hyperparameters::isotropic(2, 1.0, 0.3, 1e-10);
        let m = GpModel::with_hyperparameters(&x, &y, h).unwrap();
        for (xi, yi) in x.iter().zip(y) {
            let p = m.posterior(xi);
            assert!((p.mean - yi).abs() < 1e-6);
            assert!(p.variance < 1e-6);
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let x = vec![vec![0.0], vec![0.1], vec![0.2]];
        let y = [1.0, 2.0, 6.0];
        let h = Hyperparameters::isotropic(1, 1.5, 0.05, 1e-8);
        let m = GpModel::with_hyperparameters(&x, &y, h).unwrap();
        let p = m.posterior(&[50.0]);
        let (mean, scale) = standardize(&y);
        assert!((p.mean - mean).abs() < 1e-12);
        assert!((p.variance - 1.5 * scale * scale).abs() < 1e-9);
    }

    #[test]
    fn winner_beats_every_start() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
        let y: Vec<f64> = x.iter().map(|v| (6.0 * v[0]).sin()).collect();
        let m = fit_gp(&x, &y).unwrap();
        let r = m.fit_report().unwrap();
        assert_eq!(r.start_lml.len(), 8);
        assert!(r.start_lml.iter().all(|&v| r.best_lml >= v));
        assert!((m.log_marginal_likelihood() - r.best_lml).abs() < 1e-9);
        let h = m.hyperparameters();
        assert!(h.length_scales[0] >= 0.01 && h.length_scales[0] <= 10.0);
    }
}
