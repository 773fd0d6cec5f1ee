//! Per-obstacle risk allocation and safety certificates.
//!
//! Shadows shrink as ε grows, so the smallest ε whose shadow misses a swept
//! volume is found by bisection. A certificate lists one such ε per obstacle;
//! the probability of any collision along the volume is at most their sum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geom::Polyline;
use crate::oracle::count_trials_multi;
use crate::pgdf::{sample_obstacle, PgdfObstacle};
use crate::prob::{chi2_sf, chi2_upper_quantile};
use crate::shadow::ObstacleShadow;

pub const DEFAULT_EPS_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertifyError {
    #[error("certificate digest {recorded} does not match the volume ({actual})")]
    DigestMismatch { recorded: String, actual: String },
    #[error("precision {0} must be positive")]
    BadPrecision(f64),
    #[error("risk floor {0} must lie in (0, 1)")]
    BadFloor(f64),
    #[error("obstacle dimension {obstacle} does not match volume dimension {volume}")]
    DimensionMismatch { obstacle: usize, volume: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CertStatus {
    Certified,
    /// The volume touches the mean polytope; risk is reported as 1.
    Uncertifiable,
    /// Already the floor shadow misses; the true requirement is below it.
    DegenerateFloor,
}

/// Bisection schedule for the risk search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// Arithmetic midpoints.
    #[default]
    Additive,
    /// Geometric midpoints while the bracket spans more than a factor of 4.
    LogScale,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub eps_floor: f64,
    pub schedule: Schedule,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            eps_floor: DEFAULT_EPS_FLOOR,
            schedule: Schedule::Additive,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleCert {
    pub id: String,
    pub eps_i: f64,
    pub per_face_q: Vec<f64>,
    pub status: CertStatus,
    /// Shadow/volume intersection tests spent by the search.
    pub calls: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyCertificate {
    pub volume_digest: String,
    pub eps_precision: f64,
    pub per_obstacle: Vec<ObstacleCert>,
    pub total_eps: f64,
}

impl SafetyCertificate {
    /// No obstacle is uncertifiable.
    pub fn is_certified(&self) -> bool {
        self.per_obstacle
            .iter()
            .all(|c| c.status != CertStatus::Uncertifiable)
    }

    pub fn entry(&self, id: &str) -> Option<&ObstacleCert> {
        self.per_obstacle.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// SHA-256 over the dimension and the IEEE bits of every waypoint.
pub fn volume_digest(vol: &Polyline) -> String {
    let mut h = Sha256::new();
    h.update((vol.dim() as u64).to_le_bytes());
    h.update((vol.len() as u64).to_le_bytes());
    for p in vol.waypoints() {
        for c in p.coords() {
            h.update(c.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Sum rounded up: never below the exact real sum of the inputs.
pub fn sum_round_up(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0_f64;
    let mut c = 0.0_f64;
    for v in values {
        let t = s + v;
        // Neumaier: accumulate the rounding error of each addition
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    // two-sum: r + e == s + c exactly
    let r = s + c;
    let bb = r - s;
    let e = (s - (r - bb)) + (c - bb);
    if e > 0.0 {
        r.next_up()
    } else {
        r
    }
}

fn shadow_at(o: &PgdfObstacle, eps: f64) -> ObstacleShadow<'_> {
    if eps >= 1.0 {
        ObstacleShadow::mean(o)
    } else {
        ObstacleShadow::new(o, eps).expect("risk in (0, 1)")
    }
}

struct Search {
    eps: f64,
    status: CertStatus,
    calls: u32,
}

/// Smallest ε in `[floor, 1]` for which `hits(ε)` is false, assuming
/// `hits` is monotone non-increasing. `hits(1.0)` is the mean-polytope test.
fn bisect_min_eps(hits: impl Fn(f64) -> bool, precision: f64, cfg: &SearchConfig) -> Search {
    let mut calls = 1;
    if !hits(cfg.eps_floor) {
        return Search {
            eps: cfg.eps_floor,
            status: CertStatus::DegenerateFloor,
            calls,
        };
    }
    calls += 1;
    if hits(1.0) {
        return Search {
            eps: 1.0,
            status: CertStatus::Uncertifiable,
            calls,
        };
    }
    // invariant: lo hits, hi misses
    let (mut lo, mut hi) = (cfg.eps_floor, 1.0_f64);
    while hi - lo > precision {
        let mid = match cfg.schedule {
            Schedule::LogScale if hi > 4.0 * lo => (lo * hi).sqrt(),
            _ => 0.5 * (lo + hi),
        };
        if mid <= lo || mid >= hi {
            break;
        }
        calls += 1;
        if hits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Search {
        eps: hi,
        status: CertStatus::Certified,
        calls,
    }
}

fn levels_for(o: &PgdfObstacle, eps: f64) -> Vec<f64> {
    if eps >= 1.0 {
        vec![0.0; o.face_count()]
    } else {
        shadow_at(o, eps).levels()
    }
}

fn check_inputs(obstacles: &[PgdfObstacle], vol: &Polyline, eps_p: f64, cfg: &SearchConfig) -> Result<(), CertifyError> {
    if !(eps_p > 0.0) {
        return Err(CertifyError::BadPrecision(eps_p));
    }
    if !(cfg.eps_floor > 0.0 && cfg.eps_floor < 1.0) {
        return Err(CertifyError::BadFloor(cfg.eps_floor));
    }
    if let Some(o) = obstacles.iter().find(|o| o.dim() != vol.dim()) {
        return Err(CertifyError::DimensionMismatch {
            obstacle: o.dim(),
            volume: vol.dim(),
        });
    }
    Ok(())
}

/// The smallest certified risk for one obstacle, to additive precision `eps_p`.
pub fn find_maximal_shadow(
    o: &PgdfObstacle,
    vol: &Polyline,
    eps_p: f64,
    cfg: &SearchConfig,
) -> Result<ObstacleCert, CertifyError> {
    check_inputs(std::slice::from_ref(o), vol, eps_p, cfg)?;
    Ok(search_obstacle(o, vol, eps_p, cfg))
}

fn search_obstacle(o: &PgdfObstacle, vol: &Polyline, eps_p: f64, cfg: &SearchConfig) -> ObstacleCert {
    let s = bisect_min_eps(|e| shadow_at(o, e).hits_volume(vol), eps_p, cfg);
    ObstacleCert {
        id: o.id().to_string(),
        eps_i: s.eps,
        per_face_q: levels_for(o, s.eps),
        status: s.status,
        calls: s.calls,
    }
}

/// Searches each obstacle independently at precision `eps_p / n`, so the
/// total is within `eps_p` of the best allocation in this shadow family.
pub fn find_maximal_shadow_set(
    obstacles: &[PgdfObstacle],
    vol: &Polyline,
    eps_p: f64,
    cfg: &SearchConfig,
) -> Result<SafetyCertificate, CertifyError> {
    check_inputs(obstacles, vol, eps_p, cfg)?;
    let per = eps_p / obstacles.len().max(1) as f64;
    let mut entries: Vec<ObstacleCert> = obstacles
        .par_iter()
        .map(|o| search_obstacle(o, vol, per, cfg))
        .collect();
    Ok(assemble(vol, eps_p, &mut entries))
}

/// One common ε for every obstacle, the smallest for which all shadows miss.
pub fn find_uniform_allocation(
    obstacles: &[PgdfObstacle],
    vol: &Polyline,
    eps_p: f64,
    cfg: &SearchConfig,
) -> Result<SafetyCertificate, CertifyError> {
    check_inputs(obstacles, vol, eps_p, cfg)?;
    let n = obstacles.len().max(1) as f64;
    let s = bisect_min_eps(
        |e| obstacles.par_iter().any(|o| shadow_at(o, e).hits_volume(vol)),
        eps_p / n,
        cfg,
    );
    let mut entries: Vec<ObstacleCert> = obstacles
        .iter()
        .map(|o| {
            let mean_hit = s.status == CertStatus::Uncertifiable && ObstacleShadow::mean(o).hits_volume(vol);
            ObstacleCert {
                id: o.id().to_string(),
                eps_i: s.eps,
                per_face_q: levels_for(o, s.eps),
                status: if mean_hit { CertStatus::Uncertifiable } else { s.status },
                calls: s.calls,
            }
        })
        .collect();
    Ok(assemble(vol, eps_p, &mut entries))
}

fn assemble(vol: &Polyline, eps_p: f64, entries: &mut Vec<ObstacleCert>) -> SafetyCertificate {
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    SafetyCertificate {
        volume_digest: volume_digest(vol),
        eps_precision: eps_p,
        total_eps: sum_round_up(entries.iter().map(|c| c.eps_i)),
        per_obstacle: std::mem::take(entries),
    }
}

/// Re-checks a certificate with one intersection test per obstacle.
///
/// Each recorded level must be at least the level implied by its `eps_i`,
/// the shadow at the recorded levels must miss the volume, and the total
/// must equal the rounded-up sum.
pub fn verify_certificate(
    cert: &SafetyCertificate,
    obstacles: &[PgdfObstacle],
    vol: &Polyline,
) -> Result<bool, CertifyError> {
    let actual = volume_digest(vol);
    if cert.volume_digest != actual {
        return Err(CertifyError::DigestMismatch {
            recorded: cert.volume_digest.clone(),
            actual,
        });
    }
    if cert.per_obstacle.len() != obstacles.len() {
        return Ok(false);
    }
    for o in obstacles {
        let Some(c) = cert.entry(o.id()) else { return Ok(false) };
        if !entry_holds(c, o, vol) {
            return Ok(false);
        }
    }
    Ok(cert.total_eps == sum_round_up(cert.per_obstacle.iter().map(|c| c.eps_i)))
}

fn entry_holds(c: &ObstacleCert, o: &PgdfObstacle, vol: &Polyline) -> bool {
    if c.status == CertStatus::Uncertifiable || c.eps_i >= 1.0 {
        return c.eps_i == 1.0;
    }
    if !(c.eps_i > 0.0) || c.per_face_q.len() != o.face_count() {
        return false;
    }
    let m = o.face_count() as f64;
    let Ok(required) = chi2_upper_quantile(c.eps_i / m, o.homo_dim() as u32) else {
        return false;
    };
    if c.per_face_q.iter().any(|&q| !(q >= required)) {
        return false;
    }
    !ObstacleShadow::with_levels(o, c.eps_i, &c.per_face_q).hits_volume(vol)
}

/// Joint law of face draws used by [`union_bound_gap_estimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// The obstacles' own generative model (independent faces unless a joint
    /// covariance is attached).
    Independent,
    /// One shared uniform drives every face's Mahalanobis radius.
    Comonotone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub trials: u64,
    /// Σ ε_i from the certificate.
    pub union_bound: f64,
    /// Estimated probability that some obstacle escapes.
    pub p_hat: f64,
    pub stderr: f64,
    pub gap: f64,
}

/// Monte-Carlo estimate of how loose the union bound is.
///
/// Obstacle `i` "escapes" when some face draw leaves its confidence
/// ellipsoid at the recorded level. Each face event has probability at most
/// `ε_i/m`, so `Σ ε_i` bounds the escape probability by the union bound and
/// the gap measures its slack.
pub fn union_bound_gap_estimate(
    obstacles: &[PgdfObstacle],
    cert: &SafetyCertificate,
    trials: u64,
    seed: u64,
    coupling: Coupling,
) -> GapEstimate {
    let levels: Vec<(&PgdfObstacle, &[f64])> = obstacles
        .iter()
        .filter_map(|o| cert.entry(o.id()).map(|c| (o, c.per_face_q.as_slice())))
        .collect();
    let counts = match coupling {
        Coupling::Independent => count_trials_multi(trials, seed, 1, |rng, acc| {
            let escaped = levels.iter().any(|(o, qs)| {
                let s = sample_obstacle(o, rng);
                o.faces()
                    .iter()
                    .zip(&s.normals)
                    .zip(qs.iter())
                    .any(|((f, n), &q)| !f.in_ellipsoid(n, q))
            });
            acc[0] += escaped as u64;
        }),
        Coupling::Comonotone => {
            // a face's Mahalanobis radius is χ² with rank(Σ) dof; it exceeds q
            // iff the shared uniform falls below the tail at q
            let tails: Vec<f64> = levels
                .iter()
                .flat_map(|(o, qs)| o.faces().iter().zip(qs.iter()).map(|(f, &q)| chi2_sf(q, f.rank() as u32)))
                .collect();
            count_trials_multi(trials, seed, 1, |rng, acc| {
                let u = rng.uniform();
                acc[0] += tails.iter().any(|&t| u < t) as u64;
            })
        }
    };
    let p_hat = counts[0] as f64 / trials as f64;
    let union_bound = cert.total_eps;
    GapEstimate {
        trials,
        union_bound,
        p_hat,
        stderr: (p_hat * (1.0 - p_hat) / trials as f64).sqrt(),
        gap: union_bound - p_hat,
    }
}
