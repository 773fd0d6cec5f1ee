//! ε-shadows of Gaussian faces and of whole PGDF obstacles.
//!
//! For a face `n ~ N(μ, Σ)` and level `q`, the shadow is the union of all
//! obstacle halfspaces `{x : αᵀx̃ ≤ 0}` whose parameter `α` lies in the
//! confidence ellipsoid `(α-μ)ᵀΣ⁺(α-μ) ≤ q`. Its membership test is the
//! closed form
//!
//! ```text
//! h(x) = -μᵀx̃ + √(q · x̃ᵀΣx̃) ≥ 0
//! ```
//!
//! `h` is affine plus the norm of an affine map, hence convex along any
//! segment, so the part of a segment outside a face shadow is one interval.
//! A face is degenerate at `q` when the ellipsoid contains the origin; its
//! shadow is then the whole space.

use std::collections::HashMap;

use thiserror::Error;

use crate::geom::{HomoVec, Point, Polyline, Segment};
use crate::pgdf::{GaussianFace, PgdfObstacle};
use crate::prob::{chi2_upper_quantile, ProbError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShadowError {
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("risk {0} must lie in (0, 1)")]
    RiskOutOfRange(f64),
    #[error("boundary extraction needs a 2-D obstacle, got dimension {0}")]
    NotPlanar(usize),
    #[error("invalid window: {0}")]
    Window(String),
}

/// Shadow of one face at risk `eps`.
#[derive(Clone, Copy, Debug)]
pub struct FaceShadow<'a> {
    face: &'a GaussianFace,
    eps: f64,
    q: f64,
    degenerate: bool,
}

impl<'a> FaceShadow<'a> {
    /// `q` is the upper `eps` quantile of χ² with `d+1` degrees of freedom.
    pub fn new(face: &'a GaussianFace, eps: f64) -> Result<Self, ShadowError> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(ShadowError::RiskOutOfRange(eps));
        }
        let q = chi2_upper_quantile(eps, face.dof())?;
        Ok(Self::with_q(face, eps, q))
    }

    /// Shadow at an explicit level; `q = 0` gives the mean halfspace.
    pub fn with_q(face: &'a GaussianFace, eps: f64, q: f64) -> Self {
        let q = q.max(0.0);
        Self {
            face,
            eps,
            q,
            degenerate: face.is_degenerate_at(q),
        }
    }

    pub fn face(&self) -> &'a GaussianFace {
        self.face
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// `h(x̃)`; `+∞` for a degenerate shadow.
    pub fn margin_homo(&self, x: &HomoVec) -> f64 {
        if self.degenerate {
            return f64::INFINITY;
        }
        let s = self.face.sigma().quad(x).max(0.0);
        -self.face.mu().dot(x) + (self.q * s).sqrt()
    }

    pub fn margin(&self, x: &Point) -> f64 {
        self.margin_homo(&x.lift())
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.margin(x) >= 0.0
    }

    /// The closed sub-interval `[t0, t1]` of a segment lying strictly outside
    /// this face shadow (`h < 0` on all of it), or `None`.
    ///
    /// Interior endpoints are refined so that `h` at them is negative and
    /// within a few ulps of a zero crossing.
    pub fn segment_gap(&self, s: &Segment) -> Option<(f64, f64)> {
        if self.degenerate {
            return None;
        }
        let u = s.a.lift();
        let w = s.b.lift();
        let h = |t: f64| {
            let x = if t == 1.0 { w } else { lerp_homo(&u, &w, t) };
            self.margin_homo(&x)
        };
        let h0 = h(0.0);
        if s.is_zero_length() {
            return (h0 < 0.0).then_some((0.0, 1.0));
        }
        let h1 = h(1.0);
        if h0 < 0.0 && h1 < 0.0 {
            // convexity: the whole segment is outside
            return Some((0.0, 1.0));
        }

        let v = w.sub(&u);
        let mu = self.face.mu();
        let sigma = self.face.sigma();
        let (g0, g1) = (mu.dot(&u), mu.dot(&v));
        let (s0, s1, s2) = (sigma.quad(&u), sigma.bilinear(&u, &v), sigma.quad(&v));
        let q = self.q;
        // h = 0 ⇒ g² = q·s with g ≥ 0
        let mut cuts: Vec<f64> = quadratic_roots(g1 * g1 - q * s2, g0 * g1 - q * s1, g0 * g0 - q * s0)
            .into_iter()
            .filter(|&t| t > 0.0 && t < 1.0 && g0 + g1 * t >= 0.0)
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let mut knots = Vec::with_capacity(cuts.len() + 2);
        knots.push(0.0);
        knots.extend(cuts);
        knots.push(1.0);
        let mut first = None;
        let mut last = None;
        for k in 0..knots.len() - 1 {
            let mid = 0.5 * (knots[k] + knots[k + 1]);
            if h(mid) < 0.0 {
                first.get_or_insert(k);
                last = Some(k);
            }
        }
        let (first, last) = match (first, last) {
            (Some(f), Some(l)) => (f, l),
            _ => return None,
        };
        let inner_left = 0.5 * (knots[first] + knots[first + 1]);
        let inner_right = 0.5 * (knots[last] + knots[last + 1]);
        let t0 = if first == 0 && h0 < 0.0 {
            0.0
        } else {
            refine_crossing(&h, knots[first], inner_left, 0.0)
        };
        let t1 = if last == knots.len() - 2 && h1 < 0.0 {
            1.0
        } else {
            refine_crossing(&h, knots[last + 1], inner_right, 1.0)
        };
        Some((t0, t1))
    }
}

fn lerp_homo(u: &HomoVec, w: &HomoVec, t: f64) -> HomoVec {
    let mut x = *u;
    for i in 0..u.len() {
        x[i] = u[i] + t * (w[i] - u[i]);
    }
    x
}

/// Real roots of `a·t² + 2b·t + c`.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 || !scale.is_finite() {
        return Vec::new();
    }
    if a.abs() <= 1e-14 * scale {
        return if b != 0.0 { vec![-c / (2.0 * b)] } else { Vec::new() };
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        return if disc >= -1e-12 * b * b { vec![-b / a] } else { Vec::new() };
    }
    let k = -(b + b.signum() * disc.sqrt());
    if k == 0.0 {
        return vec![0.0];
    }
    vec![k / a, c / k]
}

/// Moves an approximate zero `r` of `h` to the last point on the `inner`
/// side with `h < 0`. `h(inner) < 0`; `bound` caps the outward search.
fn refine_crossing(h: &impl Fn(f64) -> f64, r: f64, inner: f64, bound: f64) -> f64 {
    let dir = if inner > r { 1.0 } else { -1.0 };
    let clamp_in = |t: f64| if dir > 0.0 { t.min(inner) } else { t.max(inner) };
    let clamp_out = |t: f64| if dir > 0.0 { t.max(bound) } else { t.min(bound) };
    let mut step = 1e-13;
    let mut a = clamp_in(r + dir * step);
    while h(a) >= 0.0 {
        step *= 4.0;
        a = clamp_in(r + dir * step);
    }
    step = 1e-13;
    let mut b = clamp_out(r - dir * step);
    while h(b) < 0.0 {
        if b == bound {
            return bound;
        }
        step *= 4.0;
        b = clamp_out(r - dir * step);
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        if h(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    a
}

/// Shadow of an obstacle: the intersection of its face shadows, each built at
/// risk `eps/m`.
#[derive(Clone, Debug)]
pub struct ObstacleShadow<'a> {
    faces: Vec<FaceShadow<'a>>,
    eps: f64,
}

impl<'a> ObstacleShadow<'a> {
    pub fn new(o: &'a PgdfObstacle, eps: f64) -> Result<Self, ShadowError> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(ShadowError::RiskOutOfRange(eps));
        }
        let per_face = eps / o.face_count() as f64;
        let faces = o
            .faces()
            .iter()
            .map(|f| FaceShadow::new(f, per_face))
            .collect::<Result<_, _>>()?;
        Ok(Self { faces, eps })
    }

    /// Rebuilds a shadow from recorded per-face levels.
    pub fn with_levels(o: &'a PgdfObstacle, eps: f64, qs: &[f64]) -> Self {
        debug_assert_eq!(qs.len(), o.face_count());
        let per_face = eps / o.face_count() as f64;
        Self {
            faces: o
                .faces()
                .iter()
                .zip(qs)
                .map(|(f, &q)| FaceShadow::with_q(f, per_face, q))
                .collect(),
            eps,
        }
    }

    /// The mean polytope, the `ε → 1` limit of the family.
    pub fn mean(o: &'a PgdfObstacle) -> Self {
        Self::with_levels(o, 1.0, &vec![0.0; o.face_count()])
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn face_shadows(&self) -> &[FaceShadow<'a>] {
        &self.faces
    }

    pub fn levels(&self) -> Vec<f64> {
        self.faces.iter().map(|f| f.q()).collect()
    }

    /// `min_i h_i(x)`; non-negative exactly on the shadow.
    pub fn margin(&self, x: &Point) -> f64 {
        let xt = x.lift();
        self.faces
            .iter()
            .map(|f| f.margin_homo(&xt))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.faces.iter().all(|f| f.contains(x))
    }

    pub fn hits_segment(&self, s: &Segment) -> bool {
        let mut gaps = Vec::with_capacity(self.faces.len());
        for f in &self.faces {
            match f.segment_gap(s) {
                Some((lo, hi)) if lo <= 0.0 && hi >= 1.0 => return false,
                Some(g) => gaps.push(g),
                None => {}
            }
        }
        !covers_unit_interval(&mut gaps)
    }

    /// Whether any point of the polyline lies in the shadow.
    pub fn hits_volume(&self, vol: &Polyline) -> bool {
        vol.segments().any(|s| self.hits_segment(&s))
    }
}

/// Free-function forms matching the operation names used across the crate.
pub fn make_obstacle_shadow(o: &PgdfObstacle, eps: f64) -> Result<ObstacleShadow<'_>, ShadowError> {
    ObstacleShadow::new(o, eps)
}

pub fn segment_face_gap(fs: &FaceShadow<'_>, s: &Segment) -> Option<(f64, f64)> {
    fs.segment_gap(s)
}

pub fn shadow_hits_volume(os: &ObstacleShadow<'_>, vol: &Polyline) -> bool {
    os.hits_volume(vol)
}

/// Closed intervals covering `[0, 1]`.
fn covers_unit_interval(gaps: &mut [(f64, f64)]) -> bool {
    gaps.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut reach = f64::NEG_INFINITY;
    for &(lo, hi) in gaps.iter() {
        if reach == f64::NEG_INFINITY {
            if lo > 0.0 {
                return false;
            }
        } else if lo > reach {
            return false;
        }
        reach = reach.max(hi);
        if reach >= 1.0 {
            return true;
        }
    }
    false
}

/// Axis-aligned 2-D box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Window {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Self, ShadowError> {
        let ok = (0..2).all(|i| min[i].is_finite() && max[i].is_finite() && max[i] > min[i]);
        if !ok {
            return Err(ShadowError::Window(format!("{min:?} .. {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

/// Contour of `{x : f(x) = 0}` by marching squares on a `res × res` grid,
/// chained into polylines. Linear interpolation along cell edges.
pub fn contour_2d(
    f: impl Fn(&Point) -> f64,
    window: &Window,
    res: usize,
) -> Result<Vec<Polyline>, ShadowError> {
    if res == 0 {
        return Err(ShadowError::Window("resolution must be at least 1".into()));
    }
    let n = res + 1;
    let dx = window.width() / res as f64;
    let dy = window.height() / res as f64;
    let coord = |i: usize, j: usize| {
        let x = if i == res { window.max[0] } else { window.min[0] + i as f64 * dx };
        let y = if j == res { window.max[1] } else { window.min[1] + j as f64 * dy };
        Point::xy(x, y)
    };
    let mut val = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            val[j * n + i] = f(&coord(i, j));
        }
    }
    let at = |i: usize, j: usize| val[j * n + i];
    let inside = |v: f64| v >= 0.0;

    // edges: (i, j, 0) horizontal from (i,j) to (i+1,j); (i, j, 1) vertical
    type Edge = (usize, usize, u8);
    let edge_point = |e: Edge| {
        let (i, j, dir) = e;
        let (i2, j2) = if dir == 0 { (i + 1, j) } else { (i, j + 1) };
        let (v1, v2) = (at(i, j), at(i2, j2));
        let t = if v1.is_finite() && v2.is_finite() && v1 != v2 {
            (v1 / (v1 - v2)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        coord(i, j).lerp(&coord(i2, j2), t)
    };

    let mut segs: Vec<(Edge, Edge)> = Vec::new();
    for j in 0..res {
        for i in 0..res {
            let (v00, v10, v11, v01) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
            let code = inside(v00) as u8
                | (inside(v10) as u8) << 1
                | (inside(v11) as u8) << 2
                | (inside(v01) as u8) << 3;
            let bottom = (i, j, 0);
            let right = (i + 1, j, 1);
            let top = (i, j + 1, 0);
            let left = (i, j, 1);
            let centre_inside = inside(0.25 * (v00 + v10 + v11 + v01));
            match code {
                0 | 15 => {}
                1 | 14 => segs.push((left, bottom)),
                2 | 13 => segs.push((bottom, right)),
                3 | 12 => segs.push((left, right)),
                4 | 11 => segs.push((right, top)),
                6 | 9 => segs.push((bottom, top)),
                7 | 8 => segs.push((left, top)),
                5 => {
                    if centre_inside {
                        segs.push((left, top));
                        segs.push((bottom, right));
                    } else {
                        segs.push((left, bottom));
                        segs.push((right, top));
                    }
                }
                10 => {
                    if centre_inside {
                        segs.push((left, bottom));
                        segs.push((right, top));
                    } else {
                        segs.push((left, top));
                        segs.push((bottom, right));
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    let mut by_edge: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segs.iter().enumerate() {
        by_edge.entry(*a).or_default().push(k);
        by_edge.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segs.len()];
    let mut out = Vec::new();
    let next_from = |e: Edge, used: &[bool]| -> Option<usize> {
        by_edge.get(&e)?.iter().copied().find(|&k| !used[k])
    };
    for start in 0..segs.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let (a, b) = segs[start];
        let mut chain = std::collections::VecDeque::from([a, b]);
        // grow forward then backward
        for forward in [true, false] {
            loop {
                let end = if forward { *chain.back().unwrap() } else { *chain.front().unwrap() };
                let Some(k) = next_from(end, &used) else { break };
                used[k] = true;
                let (p, q) = segs[k];
                let other = if p == end { q } else { p };
                if forward {
                    chain.push_back(other);
                } else {
                    chain.push_front(other);
                }
            }
        }
        let pts: Vec<Point> = chain.into_iter().map(edge_point).collect();
        out.push(Polyline::new(pts).expect("non-empty chain"));
    }
    Ok(out)
}

/// Outline of an obstacle shadow inside `window`, for rendering only.
pub fn shadow_boundary_2d(
    os: &ObstacleShadow<'_>,
    window: &Window,
    resolution: usize,
) -> Result<Vec<Polyline>, ShadowError> {
    let d = os.faces.first().map(|f| f.face().homo_dim() - 1).unwrap_or(0);
    if d != 2 {
        return Err(ShadowError::NotPlanar(d));
    }
    contour_2d(|x| os.margin(x), window, resolution)
}
