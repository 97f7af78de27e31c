//! Gaussian-process checks against independent dense linear algebra and
//! synthetic data drawn from a known kernel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use snailopt::gp::{fit_gp_with, FitOptions, GpModel, Hyperparameters};

fn kernel(a: &[f64], b: &[f64], h: &Hyperparameters) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&h.length_scales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    h.signal_variance * (-0.5 * r2).exp()
}

#[test]
fn posterior_matches_dense_inverse() {
    let xs = vec![vec![0.0], vec![0.4], vec![1.0]];
    let ys = vec![1.0, -0.5, 2.0];
    let h = Hyperparameters {
        signal_variance: 1.3,
        length_scales: vec![0.35],
        noise_variance: 1e-4,
    };
    let gp = GpModel::with_hyperparameters(&xs, &ys, h.clone()).unwrap();

    // the model standardizes targets; undo that on the oracle side
    let mean_y = ys.iter().sum::<f64>() / 3.0;
    let std_y = (ys.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / 3.0).sqrt();
    let z = DVector::from_iterator(3, ys.iter().map(|y| (y - mean_y) / std_y));
    let k = DMatrix::from_fn(3, 3, |i, j| {
        kernel(&xs[i], &xs[j], &h) + if i == j { h.noise_variance } else { 0.0 }
    });
    let k_inv = k.try_inverse().unwrap();
    for x in [-0.3, 0.1, 0.4, 0.77, 1.5] {
        let ks = DVector::from_iterator(3, xs.iter().map(|xi| kernel(&[x], xi, &h)));
        let mean = mean_y + std_y * (ks.transpose() * &k_inv * &z)[(0, 0)];
        let var = std_y * std_y * (h.signal_variance - (ks.transpose() * &k_inv * &ks)[(0, 0)]);
        let p = gp.posterior(&[x]);
        assert!((p.mean - mean).abs() < 1e-10, "mean at {x}: {} vs {mean}", p.mean);
        assert!(
            (p.variance - var).abs() < 1e-10,
            "variance at {x}: {} vs {var}",
            p.variance
        );
    }
}

#[test]
fn recovers_length_scales_of_sampled_function() {
    let truth = Hyperparameters {
        signal_variance: 1.0,
        length_scales: vec![0.2, 0.5],
        noise_variance: 1e-6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random(), rng.random()]).collect();
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        kernel(&xs[i], &xs[j], &truth) + if i == j { truth.noise_variance } else { 0.0 }
    });
    let l = k.cholesky().unwrap().l();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let ys: Vec<f64> = (l * z).iter().copied().collect();

    let gp = fit_gp_with(&xs, &ys, &FitOptions::default()).unwrap();
    let fitted = &gp.hyperparameters().length_scales;
    for (f, t) in fitted.iter().zip(&truth.length_scales) {
        let ratio = f / t;
        assert!(
            (0.5..=2.0).contains(&ratio),
            "fitted {fitted:?} vs true {:?}",
            truth.length_scales
        );
    }
}
