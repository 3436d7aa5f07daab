//! Monte-Carlo verification of the class-similarity expectation.
//!
//! Class members are drawn at Gaussian angular offsets from a random unit
//! center c in R^n; a probe feature f sits at a fixed angle alpha from c.
//! The mean inner product <x, f> over the draws is compared against the
//! factored form cos(alpha) * E[cos(theta)], using the same theta draws for
//! the expectation so the gap isolates the vanishing cross-term.

use rand_chacha::ChaCha8Rng;

use crate::rng::{self, standard_normal, streams};

use super::HarnessError;

#[derive(Clone, Copy, Debug)]
pub struct McSimilaritySpec {
    /// Angle between the probe feature and the class center, radians.
    pub alpha: f64,
    /// Standard deviation of the angular offset theta ~ N(0, sigma^2),
    /// truncated to [-pi, pi].
    pub sigma: f64,
    /// Feature dimension n.
    pub dim: usize,
    /// Number of class members drawn.
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct McSimilarityResult {
    /// Mean of <x, f> over the draws.
    pub empirical: f64,
    /// cos(alpha) * mean(cos(theta)) over the same draws.
    pub predicted: f64,
    /// |empirical - predicted|.
    pub gap: f64,
    pub mean_cos_theta: f64,
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A unit vector orthogonal to `axis` (uniform over the orthogonal sphere).
fn orthogonal_unit(axis: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..axis.len()).map(|_| standard_normal(rng)).collect();
        let dot: f64 = g.iter().zip(axis.iter()).map(|(a, b)| a * b).sum();
        let mut v: Vec<f64> = g.iter().zip(axis.iter()).map(|(g, c)| g - dot * c).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            return v;
        }
    }
}

/// theta ~ N(0, sigma^2) rejected outside [-pi, pi].
fn truncated_angle(sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let t = sigma * standard_normal(rng);
        if t.abs() <= std::f64::consts::PI {
            return t;
        }
    }
}

pub fn mc_verify_similarity(spec: &McSimilaritySpec) -> Result<McSimilarityResult, HarnessError> {
    if !(spec.sigma > 0.0) {
        return Err(HarnessError::Config(format!("sigma {} must be > 0", spec.sigma)));
    }
    if spec.samples == 0 {
        return Err(HarnessError::Config("samples must be >= 1".into()));
    }
    if spec.dim < 3 {
        return Err(HarnessError::Config("dim must be >= 3".into()));
    }

    let mut rng = rng::stream(spec.seed, streams::MC);
    let center = unit_vector(spec.dim, &mut rng);
    let probe_dir = orthogonal_unit(&center, &mut rng);
    // f = cos(alpha) c + sin(alpha) v
    let (sin_a, cos_a) = spec.alpha.sin_cos();
    let probe: Vec<f64> = center
        .iter()
        .zip(probe_dir.iter())
        .map(|(c, v)| cos_a * c + sin_a * v)
        .collect();

    let mut dot_sum = 0.0;
    let mut cos_sum = 0.0;
    for _ in 0..spec.samples {
        let theta = truncated_angle(spec.sigma, &mut rng);
        let (sin_t, cos_t) = theta.sin_cos();
        let u = orthogonal_unit(&center, &mut rng);
        // x = cos(theta) c + sin(theta) u, a unit vector at angle theta
        let dot: f64 = center
            .iter()
            .zip(u.iter())
            .zip(probe.iter())
            .map(|((c, u), f)| (cos_t * c + sin_t * u) * f)
            .sum();
        dot_sum += dot;
        cos_sum += cos_t;
    }

    let empirical = dot_sum / spec.samples as f64;
    let mean_cos_theta = cos_sum / spec.samples as f64;
    let predicted = cos_a * mean_cos_theta;
    Ok(McSimilarityResult { empirical, predicted, gap: (empirical - predicted).abs(), mean_cos_theta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3};

    #[test]
    fn orthogonal_probe_has_vanishing_similarity() {
        let spec = McSimilaritySpec { alpha: FRAC_PI_2, sigma: 0.5, dim: 32, samples: 100_000, seed: 7 };
        let result = mc_verify_similarity(&spec).unwrap();
        let bound = 3.0 / (spec.samples as f64).sqrt();
        assert!(result.empirical.abs() < bound, "{} !< {bound}", result.empirical);
    }

    #[test]
    fn tiny_spread_recovers_cos_alpha() {
        let spec = McSimilaritySpec { alpha: FRAC_PI_3, sigma: 1e-9, dim: 16, samples: 2_000, seed: 8 };
        let result = mc_verify_similarity(&spec).unwrap();
        assert!((result.empirical - 0.5).abs() < 1e-6, "{}", result.empirical);
    }

    #[test]
    fn factored_form_matches_within_tolerance() {
        let spec = McSimilaritySpec { alpha: FRAC_PI_3, sigma: 0.5, dim: 32, samples: 100_000, seed: 9 };
        let result = mc_verify_similarity(&spec).unwrap();
        assert!(result.gap < 0.02, "gap {}", result.gap);
        // the untruncated-Gaussian characteristic function value; truncation
        // is negligible at sigma = 0.5
        let closed_form = 0.5 * (-0.125f64).exp();
        assert!((result.empirical - closed_form).abs() < 0.02);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let ok = McSimilaritySpec { alpha: 0.1, sigma: 0.5, dim: 8, samples: 10, seed: 1 };
        assert!(mc_verify_similarity(&McSimilaritySpec { sigma: 0.0, ..ok }).is_err());
        assert!(mc_verify_similarity(&McSimilaritySpec { samples: 0, ..ok }).is_err());
        assert!(mc_verify_similarity(&McSimilaritySpec { dim: 2, ..ok }).is_err());
    }
}
