//! χ² and Gaussian numerics, the seeded random stream, and binomial
//! confidence bounds for Monte-Carlo estimates.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::geom::{cholesky, Cholesky, GeomError, HomoVec, SymMatrix, MAX_HOMO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbError {
    #[error("probability {0} outside the open interval (0, 1)")]
    ProbabilityOutOfRange(f64),
    #[error("degrees of freedom must be positive")]
    ZeroDof,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

const GAMMA_EPS: f64 = 1e-16;
const GAMMA_TINY: f64 = 1e-300;
const GAMMA_MAX_ITER: usize = 10_000;

/// Regularized incomplete gamma pair `(P(a, x), Q(a, x))`.
///
/// Series for `x < a + 1`, Lentz continued fraction otherwise; the value not
/// computed directly is the complement, so the small one is always accurate.
fn regularized_gamma(a: f64, x: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 1.0);
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..GAMMA_MAX_ITER {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * GAMMA_EPS {
                break;
            }
        }
        let p = (sum * log_prefactor.exp()).min(1.0);
        (p, 1.0 - p)
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / GAMMA_TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..GAMMA_MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < GAMMA_TINY {
                d = GAMMA_TINY;
            }
            c = b + an / c;
            if c.abs() < GAMMA_TINY {
                c = GAMMA_TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < GAMMA_EPS {
                break;
            }
        }
        let q = (log_prefactor.exp() * h).min(1.0);
        (1.0 - q, q)
    }
}

/// CDF of the χ² distribution with `k` degrees of freedom.
pub fn chi2_cdf(x: f64, k: u32) -> f64 {
    assert!(k >= 1, "chi2_cdf needs k ≥ 1");
    regularized_gamma(0.5 * k as f64, 0.5 * x.max(0.0)).0
}

/// Survival function `1 - CDF`, accurate in the far tail.
pub fn chi2_sf(x: f64, k: u32) -> f64 {
    assert!(k >= 1, "chi2_sf needs k ≥ 1");
    regularized_gamma(0.5 * k as f64, 0.5 * x.max(0.0)).1
}

fn bisect_increasing(mut lo: f64, mut hi: f64, too_low: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..400 {
        if hi - lo <= 1e-15 * hi.abs() {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if too_low(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

fn upper_bracket(k: u32, too_low: impl Fn(f64) -> bool) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = 2.0 * k as f64 + 2.0;
    while too_low(hi) {
        lo = hi;
        hi *= 2.0;
    }
    (lo, hi)
}

thread_local! {
    static UPPER_QUANTILE_CACHE: RefCell<HashMap<(u64, u32), f64>> = RefCell::new(HashMap::new());
}

/// The `x` with `chi2_sf(x, k) = tail`, by bisection on the survival
/// function. Returns the upper end of the final bracket, so
/// `chi2_sf(result, k) ≤ tail` always holds.
pub fn chi2_upper_quantile(tail: f64, k: u32) -> Result<f64, ProbError> {
    if k == 0 {
        return Err(ProbError::ZeroDof);
    }
    if !(tail > 0.0 && tail < 1.0) {
        return Err(ProbError::ProbabilityOutOfRange(tail));
    }
    let key = (tail.to_bits(), k);
    if let Some(q) = UPPER_QUANTILE_CACHE.with(|c| c.borrow().get(&key).copied()) {
        return Ok(q);
    }
    let too_low = |x: f64| chi2_sf(x, k) > tail;
    let (lo, hi) = upper_bracket(k, too_low);
    let q = bisect_increasing(lo, hi, too_low);
    UPPER_QUANTILE_CACHE.with(|c| {
        let mut c = c.borrow_mut();
        if c.len() > 1 << 16 {
            c.clear();
        }
        c.insert(key, q);
    });
    Ok(q)
}

/// Inverse CDF: the `x` with `chi2_cdf(x, k) = p`.
pub fn chi2_quantile(p: f64, k: u32) -> Result<f64, ProbError> {
    if k == 0 {
        return Err(ProbError::ZeroDof);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbError::ProbabilityOutOfRange(p));
    }
    if p >= 0.5 {
        // 1 - p is exact here
        return chi2_upper_quantile(1.0 - p, k);
    }
    let too_low = |x: f64| chi2_cdf(x, k) < p;
    let (lo, hi) = upper_bracket(k, too_low);
    Ok(bisect_increasing(lo, hi, too_low))
}

/// A reproducible random stream. Equal seeds (and stream ids) give
/// bit-identical sequences.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::derive(seed, 0)
    }

    /// An independent stream for task `stream` under the same seed.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            stream,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via the Box–Muller transform.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fills `out` with i.i.d. standard normals.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for z in out.iter_mut() {
            *z = self.standard_normal();
        }
    }
}

/// Draws from `N(mu, sigma)` with a precomputed square root of `sigma`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianSampler {
    mu: HomoVec,
    root: Cholesky,
}

impl GaussianSampler {
    pub fn new(mu: HomoVec, sigma: &SymMatrix) -> Result<Self, ProbError> {
        if mu.len() != sigma.dim() {
            return Err(GeomError::DimensionMismatch {
                expected: sigma.dim(),
                got: mu.len(),
            }
            .into());
        }
        Ok(Self {
            mu,
            root: cholesky(sigma)?,
        })
    }

    pub fn mean(&self) -> &HomoVec {
        &self.mu
    }

    pub fn root(&self) -> &Cholesky {
        &self.root
    }

    pub fn sample(&self, rng: &mut RngStream) -> HomoVec {
        let mut z = [0.0; MAX_HOMO];
        let n = self.mu.len();
        rng.fill_normal(&mut z[..n]);
        self.mu.add(&self.root.factor().apply(&z[..n]))
    }

    /// `mu + F z` for a caller-supplied standard-normal vector `z`.
    pub fn sample_with(&self, z: &[f64]) -> HomoVec {
        self.mu.add(&self.root.factor().apply(z))
    }
}

/// One draw from `N(mu, sigma)`.
pub fn sample_gaussian(
    mu: &HomoVec,
    sigma: &SymMatrix,
    rng: &mut RngStream,
) -> Result<HomoVec, ProbError> {
    Ok(GaussianSampler::new(*mu, sigma)?.sample(rng))
}

fn bisect_unit(target: impl Fn(f64) -> bool) -> f64 {
    // target(p) is true on [p*, 1]; returns the smallest such p to ~1e-15.
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if target(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// One-sided Clopper–Pearson upper bound on a binomial proportion.
pub fn binom_upper_ci(successes: u64, trials: u64, conf: f64) -> f64 {
    assert!(trials >= 1 && successes <= trials);
    if successes == trials {
        return 1.0;
    }
    if successes == 0 {
        return 1.0 - (1.0 - conf).powf(1.0 / trials as f64);
    }
    let a = successes as f64 + 1.0;
    let b = (trials - successes) as f64;
    bisect_unit(|p| beta_reg(a, b, p) >= conf)
}

/// One-sided Clopper–Pearson lower bound on a binomial proportion.
pub fn binom_lower_ci(successes: u64, trials: u64, conf: f64) -> f64 {
    assert!(trials >= 1 && successes <= trials);
    if successes == 0 {
        return 0.0;
    }
    if successes == trials {
        return (1.0 - conf).powf(1.0 / trials as f64);
    }
    let a = successes as f64;
    let b = (trials - successes) as f64 + 1.0;
    bisect_unit(|p| beta_reg(a, b, p) >= 1.0 - conf)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson integration of the χ² density: the independent oracle.
    fn chi2_cdf_by_quadrature(x: f64, k: u32) -> f64 {
        let kf = k as f64;
        let log_norm = -(0.5 * kf) * 2f64.ln() - ln_gamma(0.5 * kf);
        let pdf = |t: f64| {
            if t <= 0.0 {
                if k == 2 {
                    0.5
                } else {
                    0.0
                }
            } else {
                (log_norm + (0.5 * kf - 1.0) * t.ln() - 0.5 * t).exp()
            }
        };
        // substitute t = u² to remove the √t singularity for k = 1, 3
        let g = |u: f64| {
            if u == 0.0 && k == 1 {
                2.0 * (0.5 / std::f64::consts::PI).sqrt()
            } else {
                2.0 * u * pdf(u * u)
            }
        };
        let n = 20_000;
        let ub = x.sqrt();
        let h = ub / n as f64;
        let mut acc = g(0.0) + g(ub);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * g(i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(chi2_cdf(0.0, 3), 0.0);
        assert!((chi2_cdf(2.0 * 2f64.ln(), 2) - 0.5).abs() < 1e-14);
        let oracle = chi2_cdf_by_quadrature(7.8147, 3);
        assert!((oracle - 0.95).abs() < 1e-4);
        assert!((chi2_cdf(7.8147, 3) - oracle).abs() < 1e-10);
    }

    #[test]
    fn cdf_matches_quadrature_on_grid() {
        for k in [1, 2, 3, 4] {
            for x in [0.1, 0.7, 1.5, 3.0, 6.0, 11.0, 20.0] {
                let q = chi2_cdf_by_quadrature(x, k);
                assert!((chi2_cdf(x, k) - q).abs() < 1e-10, "k={k} x={x}");
            }
        }
    }

    #[test]
    fn survival_matches_closed_forms_in_the_tail() {
        // k = 2: Q = exp(-x/2); k = 4: Q = exp(-x/2)(1 + x/2)
        for x in [1.0f64, 10.0, 40.0, 80.0] {
            let e = (-0.5 * x).exp();
            assert!((chi2_sf(x, 2) / e - 1.0).abs() < 1e-12);
            assert!((chi2_sf(x, 4) / (e * (1.0 + 0.5 * x)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantile_examples() {
        let q95 = chi2_quantile(0.95, 2).unwrap();
        assert!((q95 - (-2.0 * 0.05f64.ln())).abs() < 1e-9);
        assert!((chi2_quantile(0.5, 2).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-9);
        let q3 = chi2_quantile(0.95, 3).unwrap();
        assert!((chi2_cdf_by_quadrature(q3, 3) - 0.95).abs() < 1e-9);
        assert!((q3 - 7.8147).abs() < 1e-4);
        assert!(chi2_quantile(0.0, 3).is_err());
        assert!(chi2_quantile(1.0, 3).is_err());
    }

    #[test]
    fn quantile_round_trip_and_monotone() {
        let ps = [1e-6, 1e-4, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999];
        for k in [2, 3, 4] {
            let mut prev = 0.0;
            for p in ps {
                let x = chi2_quantile(p, k).unwrap();
                assert!((chi2_cdf(x, k) - p).abs() <= 1e-9, "p={p} k={k}");
                assert!(x > prev);
                prev = x;
            }
        }
        for p in ps {
            let xs: Vec<f64> = (2..=4).map(|k| chi2_quantile(p, k).unwrap()).collect();
            assert!(xs[0] < xs[1] && xs[1] < xs[2]);
        }
    }

    #[test]
    fn upper_quantile_is_conservative_in_far_tail() {
        for tail in [1e-3, 1e-6, 1e-9, 2.5e-10] {
            let x = chi2_upper_quantile(tail, 3).unwrap();
            let s = chi2_sf(x, 3);
            assert!(s <= tail && s > tail * (1.0 - 1e-9), "tail={tail} sf={s}");
        }
    }

    #[test]
    fn rng_replay() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..1000 {
            assert_eq!(a.standard_normal().to_bits(), b.standard_normal().to_bits());
        }
        let mut c = RngStream::derive(42, 1);
        let mut d = RngStream::new(42);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn gaussian_zero_covariance_returns_mean() {
        let mu = HomoVec::new(&[1.0, -2.0, 3.0]).unwrap();
        let mut rng = RngStream::new(7);
        for _ in 0..10 {
            let s = sample_gaussian(&mu, &SymMatrix::zeros(3), &mut rng).unwrap();
            assert_eq!(s, mu);
        }
    }

    #[test]
    fn gaussian_moments() {
        let mu = HomoVec::new(&[1.0, -2.0, 0.5]).unwrap();
        let sigma =
            SymMatrix::from_row_major(3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]).unwrap();
        let sampler = GaussianSampler::new(mu, &sigma).unwrap();
        let mut rng = RngStream::new(2024);
        let n = 100_000;
        let draws: Vec<HomoVec> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
        let mut mean = [0.0; 3];
        for d in &draws {
            for i in 0..3 {
                mean[i] += d[i] / n as f64;
            }
        }
        let max_diag: f64 = (0..3).map(|i| sigma.get(i, i)).fold(0.0, f64::max);
        let tol = 4.0 * (max_diag / n as f64).sqrt();
        for i in 0..3 {
            assert!((mean[i] - mu[i]).abs() < tol);
        }
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let c: f64 = draws
                    .iter()
                    .map(|d| (d[i] - mean[i]) * (d[j] - mean[j]))
                    .sum::<f64>()
                    / (n as f64 - 1.0);
                err += (c - sigma.get(i, j)).powi(2);
                norm += sigma.get(i, j).powi(2);
            }
        }
        assert!((err / norm).sqrt() < 0.05);
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let mu = HomoVec::new(&[0.0, 0.0, 1.0]).unwrap();
        let sigma = SymMatrix::diagonal(&[1.0, -1.0, 1.0]).unwrap();
        let mut rng = RngStream::new(1);
        assert!(sample_gaussian(&mu, &sigma, &mut rng).is_err());
    }

    /// Clopper–Pearson bound from summing the binomial pmf: independent of
    /// the incomplete-beta route.
    fn cp_upper_by_pmf(s: u64, n: u64, conf: f64) -> f64 {
        let cdf = |p: f64| {
            let mut acc = 0.0;
            for i in 0..=s {
                let ln_c = ln_gamma(n as f64 + 1.0)
                    - ln_gamma(i as f64 + 1.0)
                    - ln_gamma((n - i) as f64 + 1.0);
                acc += (ln_c + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp();
            }
            acc
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) > 1.0 - conf {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    #[test]
    fn binomial_bounds() {
        let n = 250;
        assert!((binom_upper_ci(0, n, 0.95) - (1.0 - 0.05f64.powf(1.0 / n as f64))).abs() < 1e-15);
        assert_eq!(binom_upper_ci(n, n, 0.95), 1.0);
        let u = binom_upper_ci(5, 100, 0.95);
        assert!((u - cp_upper_by_pmf(5, 100, 0.95)).abs() < 1e-9);
        assert!((u - 0.102253).abs() < 1e-5);
        let l = binom_lower_ci(5, 100, 0.95);
        assert!(l < 0.05 && l > 0.0);
        assert_eq!(binom_lower_ci(0, 10, 0.95), 0.0);
    }
}
