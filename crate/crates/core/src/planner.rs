//! Risk-bounded RRT.
//!
//! Every tree node caches, per obstacle, the certified ε of the path from
//! the root to that node. Extending by one segment only needs the new
//! segment's requirement: the path's ε for an obstacle is the larger of the
//! two, because shadows are nested and the path misses a shadow iff every
//! segment does.
//!
//! A tree is accepted at `Σ cached ≤ ε_safe - ε_p`. A from-scratch search at
//! per-obstacle precision `ε_p/n` can land up to `ε_p/n` above the cached
//! value per obstacle, so the margin keeps the recertified path within
//! `ε_safe`.
//!
//! Failure to find a path says nothing about whether one exists.

use thiserror::Error;

use crate::certify::{find_maximal_shadow, sum_round_up, CertStatus, CertifyError, SearchConfig};
use crate::geom::{Point, Polyline, Segment};
use crate::pgdf::PgdfObstacle;
use crate::prob::RngStream;
use crate::shadow::ObstacleShadow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error("start point needs risk {risk}, above the admissible {limit}")]
    StartUncertifiable { risk: f64, limit: f64 },
    #[error("invalid planner configuration: {0}")]
    BadConfig(String),
}

/// Axis-aligned sampling region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Point,
    pub max: Point,
}

impl Bounds {
    pub fn diagonal(&self) -> f64 {
        self.min.distance(&self.max)
    }
}

#[derive(Clone, Debug)]
pub struct PlannerConfig {
    pub eps_safe: f64,
    /// Total search precision; each obstacle gets `eps_p / n`.
    pub eps_p: f64,
    pub step_size: f64,
    pub goal_bias: f64,
    pub max_iterations: usize,
    pub workspace: Bounds,
    pub goal_radius: f64,
    pub search: SearchConfig,
}

impl PlannerConfig {
    /// Step size and goal radius 5% of the workspace diagonal, goal bias 0.05.
    pub fn with_defaults(eps_safe: f64, workspace: Bounds) -> Self {
        let eta = 0.05 * workspace.diagonal();
        Self {
            eps_safe,
            eps_p: eps_safe * 1e-2,
            step_size: eta,
            goal_bias: 0.05,
            max_iterations: 5000,
            workspace,
            goal_radius: eta,
            search: SearchConfig::default(),
        }
    }

    fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::BadConfig(m.into()));
        if !(self.eps_safe > 0.0 && self.eps_safe < 1.0) {
            return bad("eps_safe must lie in (0, 1)");
        }
        if !(self.eps_p > 0.0 && self.eps_p < self.eps_safe) {
            return bad("eps_p must lie in (0, eps_safe)");
        }
        if !(self.step_size > 0.0) {
            return bad("step size must be positive");
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return bad("goal bias must lie in [0, 1]");
        }
        if !(self.goal_radius >= 0.0) {
            return bad("goal radius must be non-negative");
        }
        let (lo, hi) = (self.workspace.min.coords(), self.workspace.max.coords());
        if lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(b > a)) {
            return bad("workspace box is empty");
        }
        Ok(())
    }

    /// The largest cached total a node may carry.
    pub fn admission_limit(&self) -> f64 {
        self.eps_safe - self.eps_p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeNode {
    pub config: Point,
    pub parent: Option<usize>,
    /// Per-obstacle ε for the root-to-node path, in obstacle order.
    pub cached_eps: Vec<f64>,
}

impl TreeNode {
    pub fn risk(&self) -> f64 {
        sum_round_up(self.cached_eps.iter().copied())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn path_to(&self, mut idx: usize) -> Polyline {
        let mut pts = vec![self.nodes[idx].config];
        while let Some(p) = self.nodes[idx].parent {
            pts.push(self.nodes[p].config);
            idx = p;
        }
        pts.reverse();
        Polyline::new(pts).expect("non-empty")
    }

    /// Edges as `(parent, child)` point pairs, for rendering.
    pub fn edges(&self) -> Vec<(Point, Point)> {
        self.nodes
            .iter()
            .filter_map(|n| n.parent.map(|p| (self.nodes[p].config, n.config)))
            .collect()
    }
}

/// Uniform in the box, or the goal with probability `goal_bias`.
pub fn random_state(cfg: &PlannerConfig, goal: &Point, rng: &mut RngStream) -> Point {
    if cfg.goal_bias > 0.0 && rng.uniform() < cfg.goal_bias {
        return *goal;
    }
    let (lo, hi) = (cfg.workspace.min.coords(), cfg.workspace.max.coords());
    let c: Vec<f64> = lo.iter().zip(hi).map(|(&a, &b)| rng.uniform_in(a, b)).collect();
    Point::new(&c).expect("finite box")
}

/// Closest node; ties go to the lowest index.
pub fn nearest_neighbor(tree: &Tree, x: &Point) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, n) in tree.nodes.iter().enumerate() {
        let d = n.config.distance_sq(x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Steps at most `eta` from `near` toward `target`. The flag is false when
/// `target == near`.
pub fn extend(near: &Point, target: &Point, eta: f64) -> (Point, bool) {
    if near == target {
        return (*near, false);
    }
    if near.distance(target) <= eta {
        return (*target, true);
    }
    (near.step_toward(target, eta), true)
}

/// Smallest certified ε of one segment for one obstacle, given that the
/// path so far already needs `cached`. Returns `max(cached, segment ε)`.
fn composed_eps(o: &PgdfObstacle, seg: &Segment, cached: f64, precision: f64) -> f64 {
    let hits = |e: f64| {
        let s = if e >= 1.0 {
            ObstacleShadow::mean(o)
        } else {
            ObstacleShadow::new(o, e).expect("risk in (0, 1)")
        };
        s.hits_segment(seg)
    };
    if cached >= 1.0 || !hits(cached) {
        return cached;
    }
    if hits(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (cached, 1.0_f64);
    while hi - lo > precision {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if hits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Outcome of a single extension attempt.
#[derive(Clone, Debug, PartialEq)]
pub enum Extension {
    Accepted(usize),
    Rejected { risk: f64 },
}

/// Adds `x_new` as a child of `near` when the composed risk is admissible.
pub fn try_extend(
    tree: &mut Tree,
    near: usize,
    x_new: Point,
    obstacles: &[PgdfObstacle],
    cfg: &PlannerConfig,
) -> Extension {
    let from = tree.nodes[near].config;
    let seg = Segment::new(from, x_new).expect("matching dimensions");
    let per = cfg.eps_p / obstacles.len().max(1) as f64;
    let cached: Vec<f64> = obstacles
        .iter()
        .zip(&tree.nodes[near].cached_eps)
        .map(|(o, &c)| composed_eps(o, &seg, c, per))
        .collect();
    let risk = sum_round_up(cached.iter().copied());
    if risk > cfg.admission_limit() {
        return Extension::Rejected { risk };
    }
    tree.nodes.push(TreeNode {
        config: x_new,
        parent: Some(near),
        cached_eps: cached,
    });
    Extension::Accepted(tree.nodes.len() - 1)
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    /// Root-to-goal path, or `None` when the iteration budget ran out.
    pub path: Option<Polyline>,
    pub tree: Tree,
    pub iterations: usize,
    /// Cached risk of the returned path.
    pub risk: Option<f64>,
}

fn root_node(start: &Point, obstacles: &[PgdfObstacle], cfg: &PlannerConfig) -> Result<TreeNode, PlannerError> {
    let vol = Polyline::point(*start);
    let per = cfg.eps_p / obstacles.len().max(1) as f64;
    let mut cached = Vec::with_capacity(obstacles.len());
    for o in obstacles {
        let c = find_maximal_shadow(o, &vol, per, &cfg.search)?;
        cached.push(if c.status == CertStatus::Uncertifiable { 1.0 } else { c.eps_i });
    }
    let node = TreeNode {
        config: *start,
        parent: None,
        cached_eps: cached,
    };
    let risk = node.risk();
    if risk > cfg.admission_limit() {
        return Err(PlannerError::StartUncertifiable {
            risk,
            limit: cfg.admission_limit(),
        });
    }
    Ok(node)
}

/// Grows a tree from `start` until a node lands within `goal_radius` of the
/// goal, then tries to finish exactly at the goal.
pub fn plan(
    obstacles: &[PgdfObstacle],
    start: &Point,
    goal: &Point,
    cfg: &PlannerConfig,
    rng: &mut RngStream,
) -> Result<PlanOutcome, PlannerError> {
    cfg.validate()?;
    let mut tree = Tree {
        nodes: vec![root_node(start, obstacles, cfg)?],
    };
    let finish = |tree: &Tree, idx: usize, iterations: usize| PlanOutcome {
        path: Some(tree.path_to(idx)),
        risk: Some(tree.nodes[idx].risk()),
        tree: tree.clone(),
        iterations,
    };
    if start.distance(goal) <= cfg.goal_radius {
        return Ok(finish(&tree, 0, 0));
    }
    for it in 1..=cfg.max_iterations {
        let x_rand = random_state(cfg, goal, rng);
        let near = nearest_neighbor(&tree, &x_rand);
        let (x_new, moved) = extend(&tree.nodes[near].config, &x_rand, cfg.step_size);
        if !moved {
            continue;
        }
        let Extension::Accepted(idx) = try_extend(&mut tree, near, x_new, obstacles, cfg) else {
            continue;
        };
        if x_new.distance(goal) <= cfg.goal_radius {
            if x_new != *goal {
                if let Extension::Accepted(g) = try_extend(&mut tree, idx, *goal, obstacles, cfg) {
                    return Ok(finish(&tree, g, it));
                }
            }
            return Ok(finish(&tree, idx, it));
        }
    }
    Ok(PlanOutcome {
        path: None,
        tree,
        iterations: cfg.max_iterations,
        risk: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certify::find_maximal_shadow_set;
    use crate::pgdf::GaussianFace;

    fn bounds(lo: f64, hi: f64) -> Bounds {
        Bounds {
            min: Point::xy(lo, lo),
            max: Point::xy(hi, hi),
        }
    }

    fn block(id: &str, x0: f64, x1: f64, y0: f64, y1: f64, var: f64) -> PgdfObstacle {
        let faces = [[1.0, 0.0, -x1], [-1.0, 0.0, x0], [0.0, 1.0, -y1], [0.0, -1.0, y0]]
            .iter()
            .map(|m| GaussianFace::isotropic(m, var).unwrap())
            .collect();
        PgdfObstacle::new(id, faces).unwrap()
    }

    #[test]
    fn random_state_behaviour() {
        let mut cfg = PlannerConfig::with_defaults(0.01, bounds(-2.0, 4.0));
        let goal = Point::xy(3.0, 3.0);
        cfg.goal_bias = 1.0;
        let mut rng = RngStream::new(1);
        assert!((0..100).all(|_| random_state(&cfg, &goal, &mut rng) == goal));
        cfg.goal_bias = 0.0;
        let n = 100_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let p = random_state(&cfg, &goal, &mut rng);
            sx += p.x();
            sy += p.y();
        }
        // uniform on [-2, 4]: mean 1, sd √3
        let tol = 4.0 * 3f64.sqrt() / (n as f64).sqrt();
        assert!((sx / n as f64 - 1.0).abs() < tol);
        assert!((sy / n as f64 - 1.0).abs() < tol);
        let mut a = RngStream::new(5);
        let mut b = RngStream::new(5);
        for _ in 0..10 {
            assert_eq!(random_state(&cfg, &goal, &mut a), random_state(&cfg, &goal, &mut b));
        }
    }

    #[test]
    fn nearest_matches_linear_oracle() {
        let mut rng = RngStream::new(2);
        let tree = Tree {
            nodes: (0..1000)
                .map(|_| TreeNode {
                    config: Point::xy(rng.uniform_in(0.0, 1.0), rng.uniform_in(0.0, 1.0)),
                    parent: None,
                    cached_eps: vec![],
                })
                .collect(),
        };
        for _ in 0..200 {
            let q = Point::xy(rng.uniform_in(0.0, 1.0), rng.uniform_in(0.0, 1.0));
            let oracle = (0..tree.nodes.len())
                .min_by(|&i, &j| {
                    tree.nodes[i]
                        .config
                        .distance(&q)
                        .total_cmp(&tree.nodes[j].config.distance(&q))
                })
                .unwrap();
            assert_eq!(nearest_neighbor(&tree, &q), oracle);
        }
        assert_eq!(nearest_neighbor(&tree, &tree.nodes[17].config), 17);
    }

    #[test]
    fn extend_examples() {
        let a = Point::xy(0.0, 0.0);
        assert_eq!(extend(&a, &Point::xy(0.3, 0.0), 1.0), (Point::xy(0.3, 0.0), true));
        let (p, _) = extend(&a, &Point::xy(2.0, 0.0), 1.0);
        assert!((p.x() - 1.0).abs() < 1e-15 && p.y() == 0.0);
        assert_eq!(extend(&a, &a, 1.0), (a, false));
        let mut rng = RngStream::new(3);
        for _ in 0..10_000 {
            let n = Point::xy(rng.uniform_in(-5.0, 5.0), rng.uniform_in(-5.0, 5.0));
            let r = Point::xy(rng.uniform_in(-5.0, 5.0), rng.uniform_in(-5.0, 5.0));
            let eta = rng.uniform_in(0.01, 3.0);
            assert!(extend(&n, &r, eta).0.distance(&n) <= eta * (1.0 + 1e-12));
        }
    }

    #[test]
    fn extension_into_the_mean_polytope_is_rejected() {
        let obs = vec![block("b", 1.0, 2.0, -1.0, 1.0, 1e-4)];
        let cfg = PlannerConfig::with_defaults(0.01, bounds(-5.0, 5.0));
        let mut tree = Tree {
            nodes: vec![root_node(&Point::xy(0.0, 0.0), &obs, &cfg).unwrap()],
        };
        match try_extend(&mut tree, 0, Point::xy(1.5, 0.0), &obs, &cfg) {
            Extension::Rejected { risk } => assert!(risk >= 1.0),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn empty_scene_extension_costs_nothing() {
        let cfg = PlannerConfig::with_defaults(0.01, bounds(-5.0, 5.0));
        let mut tree = Tree {
            nodes: vec![root_node(&Point::xy(0.0, 0.0), &[], &cfg).unwrap()],
        };
        assert_eq!(try_extend(&mut tree, 0, Point::xy(1.0, 0.0), &[], &cfg), Extension::Accepted(1));
        assert_eq!(tree.nodes[1].risk(), 0.0);
    }

    #[test]
    fn cached_risk_matches_from_scratch_search() {
        let obs = vec![
            block("a", 1.0, 2.0, -1.0, 1.0, 0.002),
            block("b", -3.0, -2.0, 1.0, 3.0, 0.004),
            block("c", 0.0, 1.0, 2.5, 3.5, 0.001),
        ];
        let mut cfg = PlannerConfig::with_defaults(0.3, bounds(-5.0, 5.0));
        cfg.eps_p = 1e-4;
        let mut rng = RngStream::new(7);
        let mut tree = Tree {
            nodes: vec![root_node(&Point::xy(0.0, 0.0), &obs, &cfg).unwrap()],
        };
        let mut checked = 0;
        while checked < 500 {
            let near = (rng.uniform() * tree.nodes.len() as f64) as usize;
            let x = Point::xy(rng.uniform_in(-5.0, 5.0), rng.uniform_in(-5.0, 5.0));
            let (x_new, _) = extend(&tree.nodes[near].config, &x, 1.0);
            let Extension::Accepted(idx) = try_extend(&mut tree, near, x_new, &obs, &cfg) else {
                continue;
            };
            let path = tree.path_to(idx);
            let cert = find_maximal_shadow_set(&obs, &path, cfg.eps_p, &cfg.search).unwrap();
            let cached = tree.nodes[idx].risk();
            assert!((cert.total_eps - cached).abs() <= cfg.eps_p, "{} vs {cached}", cert.total_eps);
            let parent = tree.nodes[idx].parent.unwrap();
            for (a, b) in tree.nodes[parent].cached_eps.iter().zip(&tree.nodes[idx].cached_eps) {
                assert!(b >= a);
            }
            checked += 1;
        }
    }

    #[test]
    fn goal_at_start_returns_a_point() {
        let obs = vec![block("a", 1.0, 2.0, -1.0, 1.0, 0.002)];
        let cfg = PlannerConfig::with_defaults(0.05, bounds(-5.0, 5.0));
        let s = Point::xy(-1.0, 0.0);
        let out = plan(&obs, &s, &s, &cfg, &mut RngStream::new(1)).unwrap();
        let path = out.path.unwrap();
        assert_eq!(path.len(), 1);
        let cert = find_maximal_shadow_set(&obs, &path, cfg.eps_p, &cfg.search).unwrap();
        assert!((out.risk.unwrap() - cert.total_eps).abs() <= cfg.eps_p);
    }

    #[test]
    fn plans_are_deterministic_and_recertify() {
        let obs = vec![block("wall", -0.5, 0.5, -4.0, 2.0, 0.001)];
        let cfg = PlannerConfig::with_defaults(0.01, bounds(-5.0, 5.0));
        let (s, g) = (Point::xy(-3.0, 0.0), Point::xy(3.0, 0.0));
        let a = plan(&obs, &s, &g, &cfg, &mut RngStream::new(11)).unwrap();
        let b = plan(&obs, &s, &g, &cfg, &mut RngStream::new(11)).unwrap();
        assert_eq!(a.path, b.path);
        assert_eq!(a.tree.nodes, b.tree.nodes);
        let path = a.path.expect("open scene has a path");
        assert_eq!(path.last(), g);
        let cert = find_maximal_shadow_set(&obs, &path, cfg.eps_p, &cfg.search).unwrap();
        assert!(cert.total_eps <= cfg.eps_safe);
        for n in &a.tree.nodes {
            assert!(n.risk() <= cfg.admission_limit());
        }
    }

    #[test]
    fn blocked_goal_is_not_found() {
        let obs = vec![block("big", 1.0, 5.0, -2.0, 2.0, 1e-4)];
        let mut cfg = PlannerConfig::with_defaults(0.01, bounds(-5.0, 6.0));
        cfg.max_iterations = 500;
        let out = plan(&obs, &Point::xy(-3.0, 0.0), &Point::xy(3.0, 0.0), &cfg, &mut RngStream::new(2)).unwrap();
        assert!(out.path.is_none());
    }

    #[test]
    fn start_inside_obstacle_is_an_error() {
        let obs = vec![block("big", -1.0, 1.0, -1.0, 1.0, 1e-4)];
        let cfg = PlannerConfig::with_defaults(0.01, bounds(-5.0, 5.0));
        let err = plan(&obs, &Point::xy(0.0, 0.0), &Point::xy(3.0, 3.0), &cfg, &mut RngStream::new(2)).unwrap_err();
        assert!(matches!(err, PlannerError::StartUncertifiable { .. }));
    }
}
