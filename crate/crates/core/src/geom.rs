//! Fixed-capacity linear algebra for 2-D and 3-D workspaces.
//!
//! Points live in ℝᵈ with d ∈ {2, 3}. Halfspaces are stored as homogeneous
//! vectors `n` of length d+1; a point `x` lies in the halfspace when
//! `n · (x, 1) ≤ 0`. An obstacle is the intersection of such halfspaces.
//! Every test here is closed (`≤`), so boundary points count as inside.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

/// Largest supported workspace dimension.
pub const MAX_DIM: usize = 3;
/// Largest homogeneous dimension (`MAX_DIM + 1`).
pub const MAX_HOMO: usize = MAX_DIM + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("workspace dimension {0} is not supported (expected 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value")]
    NonFinite,
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is indefinite (smallest eigenvalue {0:e})")]
    Indefinite(f64),
    #[error("a polyline needs at least one waypoint")]
    EmptyPolyline,
}

fn check_workspace_dim(d: usize) -> Result<(), GeomError> {
    if d == 2 || d == 3 {
        Ok(())
    } else {
        Err(GeomError::UnsupportedDimension(d))
    }
}

/// A point in the 2-D or 3-D workspace.
#[derive(Clone, Copy, PartialEq)]
pub struct Point {
    dim: u8,
    c: [f64; MAX_DIM],
}

impl Point {
    pub fn new(coords: &[f64]) -> Result<Self, GeomError> {
        check_workspace_dim(coords.len())?;
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let mut c = [0.0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Ok(Self {
            dim: coords.len() as u8,
            c,
        })
    }

    /// Planar point. Panics on non-finite input.
    pub fn xy(x: f64, y: f64) -> Self {
        Self::new(&[x, y]).expect("finite planar point")
    }

    /// Spatial point. Panics on non-finite input.
    pub fn xyz(x: f64, y: f64, z: f64) -> Self {
        Self::new(&[x, y, z]).expect("finite spatial point")
    }

    pub fn dim(&self) -> usize {
        self.dim as usize
    }

    pub fn coords(&self) -> &[f64] {
        &self.c[..self.dim()]
    }

    pub fn x(&self) -> f64 {
        self.c[0]
    }

    pub fn y(&self) -> f64 {
        self.c[1]
    }

    /// Homogeneous lift `(x, 1)`.
    pub fn lift(&self) -> HomoVec {
        let d = self.dim();
        let mut c = [0.0; MAX_HOMO];
        c[..d].copy_from_slice(self.coords());
        c[d] = 1.0;
        HomoVec {
            len: (d + 1) as u8,
            c,
        }
    }

    /// `(1 - t)·self + t·other`.
    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        let mut out = *self;
        for i in 0..self.dim() {
            out.c[i] = self.c[i] + t * (other.c[i] - self.c[i]);
        }
        out
    }

    pub fn distance(&self, other: &Point) -> f64 {
        self.distance_sq(other).sqrt()
    }

    pub fn distance_sq(&self, other: &Point) -> f64 {
        (0..self.dim())
            .map(|i| (self.c[i] - other.c[i]).powi(2))
            .sum()
    }

    /// Moves `self` toward `target` by `step` (Euclidean length).
    pub fn step_toward(&self, target: &Point, step: f64) -> Point {
        let dist = self.distance(target);
        if dist <= step || dist == 0.0 {
            return *target;
        }
        self.lerp(target, step / dist)
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Point{:?}", self.coords())
    }
}

/// A vector in homogeneous coordinates, length d+1.
///
/// Used both for lifted points and for halfspace parameters. Halfspace
/// parameters are only meaningful up to positive scaling.
#[derive(Clone, Copy, PartialEq)]
pub struct HomoVec {
    len: u8,
    c: [f64; MAX_HOMO],
}

impl HomoVec {
    pub fn new(coords: &[f64]) -> Result<Self, GeomError> {
        if !(1..=MAX_HOMO).contains(&coords.len()) {
            return Err(GeomError::DimensionMismatch {
                expected: MAX_HOMO,
                got: coords.len(),
            });
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let mut c = [0.0; MAX_HOMO];
        c[..coords.len()].copy_from_slice(coords);
        Ok(Self {
            len: coords.len() as u8,
            c,
        })
    }

    pub fn zeros(len: usize) -> Self {
        assert!((1..=MAX_HOMO).contains(&len));
        Self {
            len: len as u8,
            c: [0.0; MAX_HOMO],
        }
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.c[..self.len()]
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let n = self.len();
        &mut self.c[..n]
    }

    pub fn dot(&self, other: &HomoVec) -> f64 {
        debug_assert_eq!(self.len, other.len);
        (0..self.len()).map(|i| self.c[i] * other.c[i]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> HomoVec {
        let mut out = *self;
        out.c.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn add(&self, other: &HomoVec) -> HomoVec {
        let mut out = *self;
        for i in 0..self.len() {
            out.c[i] += other.c[i];
        }
        out
    }

    pub fn sub(&self, other: &HomoVec) -> HomoVec {
        let mut out = *self;
        for i in 0..self.len() {
            out.c[i] -= other.c[i];
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for HomoVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.as_slice()[i]
    }
}

impl std::ops::IndexMut<usize> for HomoVec {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.as_mut_slice()[i]
    }
}

impl fmt::Debug for HomoVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HomoVec{:?}", self.as_slice())
    }
}

/// A straight segment between two workspace points. `a == b` is allowed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn new(a: Point, b: Point) -> Result<Self, GeomError> {
        if a.dim() != b.dim() {
            return Err(GeomError::DimensionMismatch {
                expected: a.dim(),
                got: b.dim(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn is_zero_length(&self) -> bool {
        self.a == self.b
    }

    pub fn point_at(&self, t: f64) -> Point {
        self.a.lerp(&self.b, t)
    }

    pub fn length(&self) -> f64 {
        self.a.distance(&self.b)
    }
}

/// An ordered list of waypoints standing in for a swept volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    waypoints: Vec<Point>,
}

impl Polyline {
    pub fn new(waypoints: Vec<Point>) -> Result<Self, GeomError> {
        let first = waypoints.first().ok_or(GeomError::EmptyPolyline)?;
        let d = first.dim();
        if let Some(bad) = waypoints.iter().find(|p| p.dim() != d) {
            return Err(GeomError::DimensionMismatch {
                expected: d,
                got: bad.dim(),
            });
        }
        Ok(Self { waypoints })
    }

    pub fn point(p: Point) -> Self {
        Self { waypoints: vec![p] }
    }

    pub fn dim(&self) -> usize {
        self.waypoints[0].dim()
    }

    pub fn waypoints(&self) -> &[Point] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn first(&self) -> Point {
        self.waypoints[0]
    }

    pub fn last(&self) -> Point {
        *self.waypoints.last().expect("non-empty polyline")
    }

    /// Segments between consecutive waypoints. A single waypoint yields one
    /// zero-length segment so that every polyline covers at least one point.
    pub fn segments(&self) -> impl Iterator<Item = Segment> + '_ {
        let single = (self.waypoints.len() == 1).then(|| Segment {
            a: self.waypoints[0],
            b: self.waypoints[0],
        });
        self.waypoints
            .windows(2)
            .map(|w| Segment { a: w[0], b: w[1] })
            .chain(single)
    }

    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| w[0].distance(&w[1]))
            .sum()
    }

    pub fn push(&mut self, p: Point) {
        assert_eq!(p.dim(), self.dim());
        self.waypoints.push(p);
    }

    /// Concatenates `other`, dropping its first waypoint when it repeats our last.
    pub fn extend_with(&mut self, other: &Polyline) {
        let skip = usize::from(other.first() == self.last());
        self.waypoints.extend_from_slice(&other.waypoints[skip..]);
    }
}

/// A symmetric (n×n) matrix, n ≤ 4.
#[derive(Clone, Copy, PartialEq)]
pub struct SymMatrix {
    n: u8,
    e: [[f64; MAX_HOMO]; MAX_HOMO],
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!((1..=MAX_HOMO).contains(&n));
        Self {
            n: n as u8,
            e: [[0.0; MAX_HOMO]; MAX_HOMO],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.e[i][i] = 1.0;
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self, GeomError> {
        if !(1..=MAX_HOMO).contains(&diag.len()) {
            return Err(GeomError::DimensionMismatch {
                expected: MAX_HOMO,
                got: diag.len(),
            });
        }
        if diag.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let mut m = Self::zeros(diag.len());
        for (i, v) in diag.iter().enumerate() {
            m.e[i][i] = *v;
        }
        Ok(m)
    }

    /// Builds from `n*n` row-major entries. Entries must be symmetric to
    /// 1e-12 relative; the stored matrix is the exact symmetrization.
    pub fn from_row_major(n: usize, entries: &[f64]) -> Result<Self, GeomError> {
        if !(1..=MAX_HOMO).contains(&n) || entries.len() != n * n {
            return Err(GeomError::DimensionMismatch {
                expected: n * n,
                got: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        let scale = entries.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mut m = Self::zeros(n);
        let mut asym = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let a = entries[i * n + j];
                let b = entries[j * n + i];
                asym = asym.max((a - b).abs());
                m.e[i][j] = 0.5 * (a + b);
            }
        }
        if asym > 1e-12 * scale {
            return Err(GeomError::NotSymmetric(asym));
        }
        Ok(m)
    }

    /// `v vᵀ`.
    pub fn outer(v: &HomoVec) -> Self {
        let n = v.len();
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.e[i][j] = v[i] * v[j];
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n as usize
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.e[i][j]
    }

    pub fn row_major(&self) -> Vec<f64> {
        let n = self.dim();
        (0..n * n).map(|k| self.e[k / n][k % n]).collect()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        for row in out.e.iter_mut() {
            row.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        assert_eq!(self.n, other.n);
        let mut out = *self;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                out.e[i][j] += other.e[i][j];
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.e[i][i]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.row_major().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `M v`.
    pub fn mul_vec(&self, v: &HomoVec) -> HomoVec {
        debug_assert_eq!(self.dim(), v.len());
        let mut out = HomoVec::zeros(v.len());
        for i in 0..self.dim() {
            out[i] = (0..self.dim()).map(|j| self.e[i][j] * v[j]).sum();
        }
        out
    }

    /// `vᵀ M v` without a dimension check (debug-asserted).
    #[inline]
    pub fn quad(&self, v: &HomoVec) -> f64 {
        debug_assert_eq!(self.dim(), v.len());
        self.bilinear(v, v)
    }

    /// `uᵀ M v`.
    #[inline]
    pub fn bilinear(&self, u: &HomoVec, v: &HomoVec) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.e[i][j] * v.c[j];
            }
            acc += u.c[i] * row;
        }
        acc
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.e[i][j])
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut out = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.e[i][j] = 0.5 * (m[(i, j)] + m[(j, i)]);
            }
        }
        out
    }

    /// Eigenvalues (ascending) with unit eigenvectors.
    pub fn eigen(&self) -> Vec<(f64, HomoVec)> {
        let eig = SymmetricEigen::new(self.to_nalgebra());
        let mut pairs: Vec<(f64, HomoVec)> = (0..self.dim())
            .map(|k| {
                let col = eig.eigenvectors.column(k);
                let v = HomoVec::new(col.as_slice()).expect("finite eigenvector");
                (eig.eigenvalues[k], v)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen()[0].0
    }

    /// Positive semidefinite up to an eigenvalue floor of `-1e-10·trace`.
    pub fn check_psd(&self) -> Result<(), GeomError> {
        let min = self.min_eigenvalue();
        if min < -1e-10 * self.trace().abs().max(f64::MIN_POSITIVE) {
            Err(GeomError::Indefinite(min))
        } else {
            Ok(())
        }
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.dim();
        let rows: Vec<&[f64]> = (0..n).map(|i| &self.e[i][..n]).collect();
        write!(f, "SymMatrix{rows:?}")
    }
}

/// `vᵀ M v`, checking dimensions.
pub fn quad_form(m: &SymMatrix, v: &HomoVec) -> Result<f64, GeomError> {
    if m.dim() != v.len() {
        return Err(GeomError::DimensionMismatch {
            expected: m.dim(),
            got: v.len(),
        });
    }
    Ok(m.quad(v))
}

/// A square factor `F` with `F Fᵀ = M`.
#[derive(Clone, Copy, PartialEq)]
pub struct SquareFactor {
    n: u8,
    e: [[f64; MAX_HOMO]; MAX_HOMO],
}

impl SquareFactor {
    pub fn dim(&self) -> usize {
        self.n as usize
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.e[i][j]
    }

    /// `F z`.
    #[inline]
    pub fn apply(&self, z: &[f64]) -> HomoVec {
        let n = self.dim();
        let mut out = HomoVec::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += self.e[i][j] * z[j];
            }
            out.c[i] = acc;
        }
        out
    }

    /// `‖Fᵀ v‖²`.
    pub fn transpose_norm_sq(&self, v: &HomoVec) -> f64 {
        let n = self.dim();
        (0..n)
            .map(|j| (0..n).map(|i| self.e[i][j] * v[i]).sum::<f64>().powi(2))
            .sum()
    }

    /// `F Fᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.dim();
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.e[i][j] = (0..n).map(|k| self.e[i][k] * self.e[j][k]).sum();
            }
        }
        m
    }

    pub fn is_lower_triangular(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (i + 1..n).all(|j| self.e[i][j] == 0.0))
    }
}

impl fmt::Debug for SquareFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.dim();
        let rows: Vec<&[f64]> = (0..n).map(|i| &self.e[i][..n]).collect();
        write!(f, "SquareFactor{rows:?}")
    }
}

/// Result of [`cholesky`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cholesky {
    /// Positive definite: lower-triangular `L` with `L Lᵀ = M`.
    Full(SquareFactor),
    /// Singular PSD: a square root from the eigendecomposition, not triangular.
    Degenerate(SquareFactor),
}

impl Cholesky {
    pub fn factor(&self) -> &SquareFactor {
        match self {
            Cholesky::Full(f) | Cholesky::Degenerate(f) => f,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Cholesky::Degenerate(_))
    }
}

/// Factors a PSD matrix. Singular inputs fall back to `V·diag(√λ)` from the
/// eigendecomposition; indefinite inputs are rejected.
pub fn cholesky(m: &SymMatrix) -> Result<Cholesky, GeomError> {
    let n = m.dim();
    let tol = 1e-13 * m.trace().abs().max(m.max_abs());
    let mut l = SquareFactor {
        n: m.n,
        e: [[0.0; MAX_HOMO]; MAX_HOMO],
    };
    let mut ok = m.max_abs() > 0.0;
    'outer: for j in 0..n {
        let mut diag = m.e[j][j];
        for k in 0..j {
            diag -= l.e[j][k] * l.e[j][k];
        }
        if !(diag > tol) {
            ok = false;
            break 'outer;
        }
        let ljj = diag.sqrt();
        l.e[j][j] = ljj;
        for i in j + 1..n {
            let mut s = m.e[i][j];
            for k in 0..j {
                s -= l.e[i][k] * l.e[j][k];
            }
            l.e[i][j] = s / ljj;
        }
    }
    if ok {
        return Ok(Cholesky::Full(l));
    }
    m.check_psd()?;
    let mut root = SquareFactor {
        n: m.n,
        e: [[0.0; MAX_HOMO]; MAX_HOMO],
    };
    for (k, (w, v)) in m.eigen().into_iter().enumerate() {
        let s = w.max(0.0).sqrt();
        for i in 0..n {
            root.e[i][k] = v[i] * s;
        }
    }
    Ok(Cholesky::Degenerate(root))
}

/// Closed membership test for the polytope `⋂ {x : nᵢ·(x,1) ≤ 0}`.
pub fn point_in_polytope(x: &Point, faces: &[HomoVec]) -> bool {
    let lifted = x.lift();
    faces.iter().all(|n| n.dot(&lifted) <= 0.0)
}

/// Whether some point of the segment lies in the polytope, by clipping the
/// parameter interval `[0, 1]` against each face.
pub fn segment_hits_polytope(s: &Segment, faces: &[HomoVec]) -> bool {
    segment_polytope_overlap(s, faces).is_some()
}

/// Parameter interval `[lo, hi] ⊆ [0, 1]` of the segment inside the polytope.
pub fn segment_polytope_overlap(s: &Segment, faces: &[HomoVec]) -> Option<(f64, f64)> {
    let a = s.a.lift();
    let b = s.b.lift();
    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    for n in faces {
        let fa = n.dot(&a);
        let fb = n.dot(&b);
        let slope = fb - fa;
        if slope == 0.0 {
            if fa > 0.0 {
                return None;
            }
        } else if slope > 0.0 {
            hi = hi.min(-fa / slope);
        } else {
            lo = lo.max(-fa / slope);
        }
        if lo > hi {
            return None;
        }
    }
    Some((lo, hi))
}
