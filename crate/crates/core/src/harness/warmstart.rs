//! Offline logistic fit of the gate on pseudo-labelled rollouts.

use super::config::Config;
use super::episode::{run_episode_detailed, WarmSample};
use super::{Method, VariantTag};
use rayon::prelude::*;
use crate::error::{Error, Result};
use crate::gate::{predict, FeatureVector, GateParams, FEATURE_DIM};

pub const MIN_WARM_SAMPLES: usize = 500;
const MAX_ITERATIONS: usize = 10_000;
const RELATIVE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: GateParams,
    pub iterations: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub positives: usize,
    pub samples: usize,
}

/// Mean of the per-sample regularised log-loss.
pub fn batch_loss(params: &GateParams, samples: &[WarmSample]) -> f64 {
    samples.iter().map(|s| params.loss(&s.features, f64::from(s.label))).sum::<f64>() / samples.len() as f64
}

/// Gradient of [`batch_loss`] with respect to `(w, b)`.
pub fn batch_gradient(params: &GateParams, samples: &[WarmSample]) -> ([f64; FEATURE_DIM], f64) {
    let mut gw = [0.0; FEATURE_DIM];
    let mut gb = 0.0;
    for s in samples {
        let (w, b) = params.gradient(&s.features, f64::from(s.label));
        for k in 0..FEATURE_DIM {
            gw[k] += w[k];
        }
        gb += b;
    }
    let n = samples.len() as f64;
    (gw.map(|g| g / n), gb / n)
}

fn accuracy(params: &GateParams, samples: &[WarmSample]) -> f64 {
    let hits = samples.iter().filter(|s| u8::from(predict(params, &s.features) >= 0.5) == s.label).count();
    hits as f64 / samples.len() as f64
}

/// Batch gradient descent on the regularised log-loss, starting from zero.
/// Stops when the relative loss change drops below 1e-6 or after 10k
/// iterations. Single-class data yields a bias-only fit.
pub fn warm_start_fit(samples: &[WarmSample], base: &GateParams) -> Result<FitReport> {
    if samples.len() < MIN_WARM_SAMPLES {
        return Err(Error::Config(format!("warm start needs {MIN_WARM_SAMPLES} samples, got {}", samples.len())));
    }
    let positives = samples.iter().filter(|s| s.label == 1).count();
    let mut params = GateParams { weights: [0.0; FEATURE_DIM], bias: 0.0, ..base.clone() };
    if positives == 0 || positives == samples.len() {
        log::warn!("warm start: all {} labels are {}; fitting the bias only", samples.len(), u8::from(positives > 0));
        let n = samples.len() as f64;
        params.bias = ((positives as f64 + 0.5) / (n - positives as f64 + 0.5)).ln();
        let loss = batch_loss(&params, samples);
        let accuracy = accuracy(&params, samples);
        return Ok(FitReport { params, iterations: 0, loss, accuracy, positives, samples: samples.len() });
    }
    // Inverse Lipschitz bound of the mean log-loss gradient.
    let max_sq = samples.iter().map(|s| 1.0 + s.features.0.iter().map(|x| x * x).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / (0.25 * max_sq + base.l2);
    let mut loss = batch_loss(&params, samples);
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (gw, gb) = batch_gradient(&params, samples);
        for k in 0..FEATURE_DIM {
            params.weights[k] -= step * gw[k];
        }
        params.bias -= step * gb;
        let next = batch_loss(&params, samples);
        let change = (loss - next).abs() / loss.abs().max(f64::MIN_POSITIVE);
        loss = next;
        if change < RELATIVE_TOLERANCE {
            break;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFiniteUpdate);
    }
    let accuracy = accuracy(&params, samples);
    Ok(FitReport { params, iterations, loss, accuracy, positives, samples: samples.len() })
}

/// Rolls out cold, adaptive `Full` episodes and keeps every sample whose
/// surrogate score cleared the update margin.
pub fn collect_warm_samples(config: &Config, seeds: &[u64], obstacle_counts: &[usize], workers: usize) -> Result<Vec<WarmSample>> {
    let tag = VariantTag::new(Method::Full).with_gate(false, true);
    let cold = config.gate.cold_params();
    let mut jobs = Vec::new();
    for &count in obstacle_counts {
        for &seed in seeds {
            let mut c = config.clone();
            c.scenario.dynamic_obstacles = count;
            jobs.push((c, seed));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    let batches: Vec<Result<Vec<WarmSample>>> = pool.install(|| {
        jobs.par_iter().map(|(c, seed)| run_episode_detailed(c, tag, *seed, &cold).map(|o| o.samples)).collect()
    });
    let mut out = Vec::new();
    for b in batches {
        out.extend(b?);
    }
    Ok(out)
}

/// Convenience for tests and callers holding raw pairs.
pub fn samples_from_pairs(pairs: &[([f64; FEATURE_DIM], u8)]) -> Vec<WarmSample> {
    pairs.iter().map(|(z, y)| WarmSample { features: FeatureVector(*z), label: *y }).collect()
}
