//! Monte-Carlo ground truth for the bounds computed elsewhere.
//!
//! Trials run in fixed blocks of [`BLOCK`] with one derived stream per block,
//! so counts depend only on `(seed, trials)` and not on thread scheduling.
//! Cost is linear in `trials`; pick `trials ≈ p(1-p)/stderr²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geom::{segment_hits_polytope, Polyline};
use crate::pgdf::{sample_obstacle, PgdfObstacle};
use crate::prob::{binom_upper_ci, chi2_upper_quantile, RngStream};

pub const BLOCK: u64 = 4096;

/// Confidence of [`McReport::upper_ci`].
pub const REPORT_CONFIDENCE: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub trials: u64,
    pub hits: u64,
    pub p_hat: f64,
    pub upper_ci: f64,
    pub seed: u64,
}

impl McReport {
    pub fn from_counts(hits: u64, trials: u64, seed: u64) -> Self {
        let p_hat = if trials == 0 { 0.0 } else { hits as f64 / trials as f64 };
        let upper_ci = if trials == 0 {
            1.0
        } else {
            binom_upper_ci(hits, trials, REPORT_CONFIDENCE).max(p_hat)
        };
        Self {
            trials,
            hits,
            p_hat,
            upper_ci,
            seed,
        }
    }

    /// Binomial standard error `√(p̂(1-p̂)/N)`.
    pub fn stderr(&self) -> f64 {
        if self.trials == 0 {
            return 0.0;
        }
        (self.p_hat * (1.0 - self.p_hat) / self.trials as f64).sqrt()
    }
}

/// Runs `trials` Bernoulli trials in parallel blocks and counts successes.
pub fn count_trials<F>(trials: u64, seed: u64, trial: F) -> u64
where
    F: Fn(&mut RngStream) -> bool + Sync,
{
    let blocks = trials.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::derive(seed, b);
            let n = BLOCK.min(trials - b * BLOCK);
            (0..n).filter(|_| trial(&mut rng)).count() as u64
        })
        .sum()
}

/// Like [`count_trials`] but each trial yields a small vector of counters.
pub fn count_trials_multi<F>(trials: u64, seed: u64, width: usize, trial: F) -> Vec<u64>
where
    F: Fn(&mut RngStream, &mut [u64]) + Sync,
{
    let blocks = trials.div_ceil(BLOCK);
    (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::derive(seed, b);
            let n = BLOCK.min(trials - b * BLOCK);
            let mut acc = vec![0u64; width];
            for _ in 0..n {
                trial(&mut rng, &mut acc);
            }
            acc
        })
        .reduce(
            || vec![0u64; width],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

/// Frequency with which `vol` collides with a joint draw of all obstacles.
pub fn mc_collision_prob(obstacles: &[PgdfObstacle], vol: &Polyline, trials: u64, seed: u64) -> McReport {
    let hits = count_trials(trials, seed, |rng| {
        obstacles.iter().any(|o| {
            let s = sample_obstacle(o, rng);
            vol.segments().any(|seg| segment_hits_polytope(&seg, &s.normals))
        })
    });
    McReport::from_counts(hits, trials, seed)
}

/// Frequency with which a drawn obstacle lies inside its `eps`-shadow, each
/// face tested by the exact cone condition at level `q(eps/m)`.
pub fn mc_containment(obstacle: &PgdfObstacle, eps: f64, trials: u64, seed: u64) -> McReport {
    let m = obstacle.face_count();
    let q = chi2_upper_quantile(eps / m as f64, obstacle.homo_dim() as u32)
        .expect("risk must lie in (0, 1)");
    let hits = count_trials(trials, seed, |rng| {
        let s = sample_obstacle(obstacle, rng);
        obstacle
            .faces()
            .iter()
            .zip(&s.normals)
            .all(|(f, n)| f.halfspace_in_cone(n, q))
    });
    McReport::from_counts(hits, trials, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{HomoVec, Point};
    use crate::pgdf::GaussianFace;

    fn square(var: f64) -> PgdfObstacle {
        let faces = [[1.0, 0.0, -1.0], [-1.0, 0.0, -1.0], [0.0, 1.0, -1.0], [0.0, -1.0, -1.0]]
            .iter()
            .map(|m| GaussianFace::isotropic(m, var).unwrap())
            .collect();
        PgdfObstacle::new("sq", faces).unwrap()
    }

    #[test]
    fn counts_are_schedule_independent() {
        let a = count_trials(10_000, 3, |r| r.uniform() < 0.3);
        let b = count_trials(10_000, 3, |r| r.uniform() < 0.3);
        assert_eq!(a, b);
        let per_block: u64 = (0..10_000u64.div_ceil(BLOCK))
            .map(|blk| {
                let mut r = RngStream::derive(3, blk);
                let n = BLOCK.min(10_000 - blk * BLOCK);
                (0..n).filter(|_| r.uniform() < 0.3).count() as u64
            })
            .sum();
        assert_eq!(a, per_block);
    }

    #[test]
    fn trivial_collision_cases() {
        let o = square(0.0);
        let inside = Polyline::point(Point::xy(0.0, 0.0));
        assert_eq!(mc_collision_prob(&[o], &inside, 1000, 1).p_hat, 1.0);
        assert_eq!(mc_collision_prob(&[], &inside, 1000, 1).p_hat, 0.0);
    }

    #[test]
    fn exact_obstacles_are_always_contained() {
        let r = mc_containment(&square(0.0), 0.05, 2000, 4);
        assert_eq!(r.hits, r.trials);
    }

    #[test]
    fn containment_meets_the_guarantee() {
        let r = mc_containment(&square(0.02), 0.05, 100_000, 6);
        assert!(r.p_hat >= 0.95, "{r:?}");
    }

    #[test]
    fn containment_near_one_is_rare() {
        let o = PgdfObstacle::new(
            "f",
            vec![GaussianFace::isotropic(&[1.0, 0.0, -1.0], 0.05).unwrap()],
        )
        .unwrap();
        let r = mc_containment(&o, 1.0 - 1e-12, 20_000, 2);
        assert!(r.p_hat < 0.01);
    }

    #[test]
    fn disjoint_seeds_agree() {
        let f = GaussianFace::new(
            HomoVec::new(&[-1.0, 0.0, 1.2]).unwrap(),
            crate::geom::SymMatrix::diagonal(&[0.0, 0.0, 0.04]).unwrap(),
        )
        .unwrap();
        let o = PgdfObstacle::new("wall", vec![f]).unwrap();
        let vol = Polyline::point(Point::xy(1.0, 0.0));
        let a = mc_collision_prob(std::slice::from_ref(&o), &vol, 50_000, 100);
        let b = mc_collision_prob(std::slice::from_ref(&o), &vol, 50_000, 200);
        let se = (a.stderr().powi(2) + b.stderr().powi(2)).sqrt();
        assert!((a.p_hat - b.p_hat).abs() <= 6.0 * se);
        // P(1.2 + 0.2 z ≤ 1) = Φ(-1)
        let exact = 0.158_655_253_931_457_05;
        assert!((a.p_hat - exact).abs() < 4.0 * a.stderr());
        assert!(a.upper_ci >= a.p_hat);
    }
}
