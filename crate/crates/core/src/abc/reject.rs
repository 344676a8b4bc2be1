use log::warn;
use nalgebra::{Vector2, Vector3};
use rand::Rng;

use crate::config;
use crate::error::{Error, Result};
use crate::priors::PriorSpec;
use crate::scene::TableFrame;
use crate::trajectory::{Trajectory, TrajectorySource};

use super::InferenceConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RejectOutcome<Z> {
    pub accepted: Vec<Z>,
    pub draws: usize,
    /// The draw budget ran out before `n_samples` were accepted: epsilon is
    /// too small or the prior too broad.
    pub starved: bool,
}

/// Rejection ABC: draw from the prior, simulate, keep draws whose simulated
/// data lies closer than `epsilon` to the observation.
///
/// `simulate` returns `None` for draws outside the generator's support; those
/// count as rejected.
pub fn abc_reject<Z, X, R: Rng + ?Sized>(
    rng: &mut R,
    n_samples: usize,
    max_draws: usize,
    epsilon: f64,
    mut draw_prior: impl FnMut(&mut R) -> Z,
    mut simulate: impl FnMut(&Z, &mut R) -> Result<Option<X>>,
    mut distance: impl FnMut(&X) -> f64,
) -> Result<RejectOutcome<Z>> {
    if n_samples == 0 || max_draws < n_samples {
        return Err(Error::Parameter(format!(
            "need 1 <= n_samples <= max_draws, got {n_samples} and {max_draws}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut accepted = Vec::with_capacity(n_samples);
    let mut draws = 0;
    while accepted.len() < n_samples && draws < max_draws {
        draws += 1;
        let z = draw_prior(rng);
        if let Some(x) = simulate(&z, rng)? {
            if distance(&x) < epsilon {
                accepted.push(z);
            }
        }
    }
    let starved = accepted.len() < n_samples;
    if starved {
        warn!(
            "rejection sampler starved: {} of {n_samples} accepted after {draws} draws",
            accepted.len()
        );
    }
    Ok(RejectOutcome {
        accepted,
        draws,
        starved,
    })
}

/// Rejection ABC over reach targets on the table plane, comparing the last
/// `config.window` observed points with the generated trajectory.
pub fn infer_reject<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &PriorSpec,
    source: &dyn TrajectorySource,
    config: &InferenceConfig,
    observed: &Trajectory,
) -> Result<RejectOutcome<Vector2<f64>>> {
    if observed.is_empty() {
        return Err(Error::InsufficientData("no observed points".into()));
    }
    let table = TableFrame::workspace();
    let w = config.window.get();
    abc_reject(
        rng,
        config.n_samples,
        config.max_draws,
        config.epsilon,
        |rng| prior.sample(rng),
        |z, _| {
            let target = Vector3::new(z.x, z.y, config::TABLE_HEIGHT);
            if !table.contains(&target, 0.0) {
                return Ok(None);
            }
            match source.generate(&target) {
                Ok(t) => Ok(Some(t)),
                Err(Error::Domain(_)) => Ok(None),
                Err(e) => Err(e),
            }
        },
        |generated: &Trajectory| super::held_mse(&observed.points, &generated.points, w),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abc::InferenceConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

    /// Two-sample Kolmogorov–Smirnov p-value from the asymptotic distribution.
    pub(crate) fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (n, m) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / n - j as f64 / m).abs());
        }
        let lambda = d * (n * m / (n + m)).sqrt();
        let mut p = 0.0;
        for k in 1..200 {
            let k = k as f64;
            p += 2.0 * (-1.0f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn discrete_toy_matches_brute_force_posterior() {
        let prior = [0.2, 0.3, 0.5];
        let sigma = 1.0;
        let observed = 1.2;
        let epsilon: f64 = 0.5;
        let half = epsilon.sqrt();
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = abc_reject(
            &mut rng,
            20_000,
            1_000_000,
            epsilon,
            |rng| {
                let u: f64 = rng.random();
                if u < 0.2 {
                    0usize
                } else if u < 0.5 {
                    1
                } else {
                    2
                }
            },
            |&z, rng| Ok(Some(z as f64 + noise.sample(rng))),
            |x| (x - observed).powi(2),
        )
        .unwrap();
        assert!(!out.starved);

        let normal = StatNormal::new(0.0, sigma).unwrap();
        let unnorm: Vec<f64> = (0..3)
            .map(|z| {
                let c = observed - z as f64;
                prior[z] * (normal.cdf(c + half) - normal.cdf(c - half))
            })
            .collect();
        let total: f64 = unnorm.iter().sum();
        let mut counts = [0.0; 3];
        for &z in &out.accepted {
            counts[z] += 1.0;
        }
        let tv: f64 = (0..3).map(|z| (counts[z] / 20_000.0 - unnorm[z] / total).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.03, "tv {tv}");
    }

    #[test]
    fn separable_toy_accepts_only_the_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = abc_reject(
            &mut rng,
            500,
            10_000,
            0.5,
            |rng| rng.random_bool(0.5),
            |&a, _| Ok(Some(if a { 0.0 } else { 1.0 })),
            |x: &f64| x * x,
        )
        .unwrap();
        assert!(out.accepted.iter().all(|&a| a));
        assert_eq!(out.accepted.len(), 500);
    }

    /// ABC posterior of the 1-D toy, integrated over histogram bins.
    fn toy_posterior_bins(edges: &[f64], observed: f64, sigma: f64, half: f64) -> Vec<f64> {
        let prior = StatNormal::new(0.0, 1.0).unwrap();
        let noise = StatNormal::new(0.0, sigma).unwrap();
        let density = |z: f64| {
            use statrs::distribution::Continuous;
            prior.pdf(z) * (noise.cdf(observed + half - z) - noise.cdf(observed - half - z))
        };
        let mut bins: Vec<f64> = edges
            .windows(2)
            .map(|e| {
                let steps = 200;
                let h = (e[1] - e[0]) / steps as f64;
                (0..steps).map(|k| density(e[0] + (k as f64 + 0.5) * h) * h).sum()
            })
            .collect();
        let total: f64 = bins.iter().sum();
        bins.iter_mut().for_each(|b| *b /= total);
        bins
    }

    pub(crate) fn toy_gaussian_run(seed: u64, n: usize, epsilon: f64) -> RejectOutcome<f64> {
        let prior = Normal::new(0.0, 1.0).unwrap();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        abc_reject(
            &mut rng,
            n,
            100 * n,
            epsilon,
            |rng| prior.sample(rng),
            |z, rng| Ok(Some(z + noise.sample(rng))),
            |x| (x - 0.5f64).powi(2),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_toy_matches_quadrature() {
        let epsilon: f64 = 0.01;
        let out = toy_gaussian_run(5, 10_000, epsilon);
        let edges: Vec<f64> = (0..=40).map(|k| -1.0 + k as f64 * 0.075).collect();
        let oracle = toy_posterior_bins(&edges, 0.5, 0.1, epsilon.sqrt());
        let mut hist = vec![0.0; oracle.len()];
        for z in &out.accepted {
            let k = ((z - edges[0]) / 0.075).floor();
            if k >= 0.0 && (k as usize) < hist.len() {
                hist[k as usize] += 1.0 / out.accepted.len() as f64;
            }
        }
        let tv: f64 = hist.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0
            + (1.0 - hist.iter().sum::<f64>()) / 2.0;
        assert!(tv <= 0.05, "tv {tv}");
    }

    #[test]
    fn infinite_epsilon_reproduces_the_prior() {
        let mut accepted = toy_gaussian_run(9, 5_000, f64::INFINITY).accepted;
        let prior = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut direct: Vec<f64> = (0..5_000).map(|_| prior.sample(&mut rng)).collect();
        let p = ks_two_sample(&mut accepted, &mut direct);
        assert!(p > 0.01, "p {p}");
    }

    #[test]
    fn grid_weights_agree_with_rejection_on_a_noise_free_toy() {
        use crate::abc::{kernel_weights, Kernel};
        use statrs::distribution::Continuous;
        let epsilon = 0.01;
        let loss = |z: f64| (z - 0.5f64).powi(2);
        // Grid path: prior density times indicator at 1 mm spacing, binned to 2 cm.
        let prior = StatNormal::new(0.0, 1.0).unwrap();
        let zs: Vec<f64> = (0..3000).map(|k| -1.0 + (k as f64 + 0.5) * 0.001).collect();
        let densities: Vec<f64> = zs.iter().map(|&z| prior.pdf(z)).collect();
        let losses: Vec<f64> = zs.iter().map(|&z| loss(z)).collect();
        let (weights, degenerate) = kernel_weights(&densities, &losses, Kernel::Indicator, epsilon);
        assert!(!degenerate);
        let bin = |z: f64| ((z + 1.0) / 0.02).floor() as usize;
        let mut grid_hist = vec![0.0; 150];
        for (z, w) in zs.iter().zip(&weights) {
            grid_hist[bin(*z)] += w;
        }
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let out = abc_reject(&mut rng, 10_000, 2_000_000, epsilon, |rng| normal.sample(rng), |z, _| Ok(Some(*z)), |z| loss(*z))
            .unwrap();
        let mut reject_hist = vec![0.0; 150];
        for z in &out.accepted {
            reject_hist[bin(*z)] += 1.0 / out.accepted.len() as f64;
        }
        let tv: f64 = grid_hist.iter().zip(&reject_hist).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv <= 0.05, "tv {tv}");
    }

    #[test]
    fn starvation_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = abc_reject(&mut rng, 10, 100, 1e-9, |rng| rng.random::<f64>(), |z, _| Ok(Some(*z)), |x| 1.0 + x)
            .unwrap();
        assert!(out.starved);
        assert!(out.accepted.is_empty());
        assert_eq!(out.draws, 100);
        assert!(abc_reject(&mut rng, 10, 5, 1.0, |_| 0.0, |z, _| Ok(Some(*z)), |x| *x).is_err());
    }

    #[test]
    fn intent_reject_recovers_a_target() {
        use crate::priors::default_proximity_prior;
        use crate::scene::Scene;
        use crate::trajectory::Simulator;
        let sim = Simulator::standard(Scene::empty());
        let truth = Vector3::new(0.1, 0.35, 0.0);
        let observed = sim.generate(&truth).unwrap().prefix(45);
        let config = InferenceConfig {
            n_samples: 20,
            max_draws: 20_000,
            ..InferenceConfig::indicator(0.0025)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = infer_reject(&mut rng, &default_proximity_prior(), &sim, &config, &observed).unwrap();
        assert!(!out.starved);
        for z in &out.accepted {
            assert!((z - truth.xy()).norm() < 0.08, "{z:?}");
        }
    }
}
