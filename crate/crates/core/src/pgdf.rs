//! Polytopes whose face parameters are Gaussian.
//!
//! Each face `i` of an obstacle is a random homogeneous vector
//! `nᵢ ~ N(μᵢ, Σᵢ)`; a realization of the obstacle is `⋂ {x : nᵢ·(x,1) ≤ 0}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::geom::{GeomError, HomoVec, Point, SymMatrix, MAX_HOMO};
use crate::prob::{GaussianSampler, ProbError, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PgdfError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("an obstacle needs at least one face")]
    NoFaces,
    #[error("face {face}: dimension {got} does not match {expected}")]
    FaceDimension {
        face: usize,
        expected: usize,
        got: usize,
    },
    #[error("joint covariance: {0}")]
    JointCovariance(String),
    #[error("noise standard deviation must be positive, got {0}")]
    NonPositiveNoise(f64),
    #[error("prior covariance is singular on the regressed coordinates")]
    SingularPrior,
}

/// Relative eigenvalue threshold below which a covariance direction is null.
const NULL_EIGEN_RTOL: f64 = 1e-12;
/// Allowed residual along null directions, relative to `max(1, ‖μ‖)`.
const NULL_RESIDUAL_RTOL: f64 = 1e-9;

/// Gaussian belief over one face's homogeneous parameters.
#[derive(Clone, Debug)]
pub struct GaussianFace {
    mu: HomoVec,
    sigma: SymMatrix,
    sampler: GaussianSampler,
    // eigenpairs of sigma, null directions first
    eig_vals: [f64; MAX_HOMO],
    eig_vecs: [HomoVec; MAX_HOMO],
    null_count: usize,
}

impl GaussianFace {
    pub fn new(mu: HomoVec, sigma: SymMatrix) -> Result<Self, PgdfError> {
        if mu.len() < 3 || mu.len() != sigma.dim() {
            return Err(GeomError::DimensionMismatch {
                expected: sigma.dim(),
                got: mu.len(),
            }
            .into());
        }
        sigma.check_psd()?;
        let sampler = GaussianSampler::new(mu, &sigma)?;
        let n = mu.len();
        let pairs = sigma.eigen();
        let w_max = pairs.last().map(|p| p.0).unwrap_or(0.0).max(0.0);
        let mut eig_vals = [0.0; MAX_HOMO];
        let mut eig_vecs = [HomoVec::zeros(n); MAX_HOMO];
        let mut null_count = 0;
        for (k, (w, v)) in pairs.into_iter().enumerate() {
            eig_vals[k] = w;
            eig_vecs[k] = v;
            if w <= NULL_EIGEN_RTOL * w_max || w_max == 0.0 {
                null_count = k + 1;
            }
        }
        Ok(Self {
            mu,
            sigma,
            sampler,
            eig_vals,
            eig_vecs,
            null_count,
        })
    }

    /// A face with no uncertainty.
    pub fn exact(mu: HomoVec) -> Result<Self, PgdfError> {
        Self::new(mu, SymMatrix::zeros(mu.len()))
    }

    /// Isotropic covariance `variance · I`.
    pub fn isotropic(mu: &[f64], variance: f64) -> Result<Self, PgdfError> {
        let mu = HomoVec::new(mu)?;
        Self::new(mu, SymMatrix::identity(mu.len()).scaled(variance))
    }

    pub fn mu(&self) -> &HomoVec {
        &self.mu
    }

    pub fn sigma(&self) -> &SymMatrix {
        &self.sigma
    }

    /// Homogeneous dimension d+1.
    pub fn homo_dim(&self) -> usize {
        self.mu.len()
    }

    /// χ² degrees of freedom used for this face's ellipsoids.
    pub fn dof(&self) -> u32 {
        self.mu.len() as u32
    }

    pub fn sample(&self, rng: &mut RngStream) -> HomoVec {
        self.sampler.sample(rng)
    }

    /// Rank of `Σ`, the dof of the Mahalanobis radius of a draw.
    pub fn rank(&self) -> usize {
        self.homo_dim() - self.null_count
    }

    fn residual_tol(&self) -> f64 {
        NULL_RESIDUAL_RTOL * self.mu.norm().max(1.0)
    }

    fn range(&self) -> impl Iterator<Item = (f64, &HomoVec)> {
        (self.null_count..self.homo_dim()).map(move |k| (self.eig_vals[k], &self.eig_vecs[k]))
    }

    fn null(&self) -> impl Iterator<Item = &HomoVec> {
        self.eig_vecs[..self.null_count].iter()
    }

    /// `δᵀ Σ⁺ δ`, or `+∞` when `δ` leaves the range of `Σ`.
    pub fn mahalanobis_sq(&self, delta: &HomoVec) -> f64 {
        let null_sq: f64 = self.null().map(|v| v.dot(delta).powi(2)).sum();
        if null_sq.sqrt() > self.residual_tol() {
            return f64::INFINITY;
        }
        self.range().map(|(w, v)| v.dot(delta).powi(2) / w).sum()
    }

    /// Whether `n` lies in the confidence ellipsoid `(n-μ)ᵀΣ⁺(n-μ) ≤ q`.
    pub fn in_ellipsoid(&self, n: &HomoVec, q: f64) -> bool {
        self.mahalanobis_sq(&n.sub(&self.mu)) <= q
    }

    /// `μᵀ Σ⁺ μ`: the origin lies in the ellipsoid at level `q` iff this is `≤ q`.
    pub fn origin_mahalanobis_sq(&self) -> f64 {
        self.mahalanobis_sq(&self.mu)
    }

    /// Whether the ellipsoid at level `q` swallows the origin, so that the
    /// shadow at that level is the whole space.
    pub fn is_degenerate_at(&self, q: f64) -> bool {
        self.origin_mahalanobis_sq() <= q
    }

    /// Tests `n ∈ C`, the cone spanned by the ellipsoid at level `q`: some
    /// `λ > 0` has `(λn - μ)ᵀΣ⁻¹(λn - μ) ≤ q`. Then the halfspace of `n`
    /// lies inside the face shadow at that level.
    pub fn halfspace_in_cone(&self, n: &HomoVec, q: f64) -> bool {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for (w, v) in self.range() {
            let pn = v.dot(n);
            let pm = v.dot(&self.mu);
            a += pn * pn / w;
            b += pn * pm / w;
            c += pm * pm / w;
        }
        let (mut nn, mut nm, mut mm) = (0.0, 0.0, 0.0);
        for v in self.null() {
            let pn = v.dot(n);
            let pm = v.dot(&self.mu);
            nn += pn * pn;
            nm += pn * pm;
            mm += pm * pm;
        }
        let tol = self.residual_tol();
        let n_norm = n.norm();
        if nn.sqrt() <= 1e-12 * n_norm {
            if mm.sqrt() > tol {
                return false;
            }
            // unconstrained quadratic a·λ² - 2b·λ + c over λ > 0
            if a <= 0.0 || b <= 0.0 {
                // infimum c approached as λ → 0⁺, never attained
                return c < q;
            }
            return c - b * b / a <= q;
        }
        let lambda = nm / nn;
        let residual = (mm - nm * nm / nn).max(0.0).sqrt();
        if lambda <= 0.0 || residual > tol {
            return false;
        }
        lambda * lambda * a - 2.0 * lambda * b + c <= q
    }
}

/// Free-function form of [`GaussianFace::halfspace_in_cone`].
pub fn halfspace_in_cone(n: &HomoVec, face: &GaussianFace, q: f64) -> bool {
    face.halfspace_in_cone(n, q)
}

/// Joint Gaussian over the concatenated parameters of all faces.
#[derive(Clone, Debug)]
struct JointLaw {
    root: DMatrix<f64>,
}

/// An uncertain polytope: an ordered list of Gaussian faces.
#[derive(Clone, Debug)]
pub struct PgdfObstacle {
    id: String,
    faces: Vec<GaussianFace>,
    joint: Option<JointLaw>,
}

impl PgdfObstacle {
    pub fn new(id: impl Into<String>, faces: Vec<GaussianFace>) -> Result<Self, PgdfError> {
        let first = faces.first().ok_or(PgdfError::NoFaces)?;
        let n = first.homo_dim();
        if let Some((i, f)) = faces.iter().enumerate().find(|(_, f)| f.homo_dim() != n) {
            return Err(PgdfError::FaceDimension {
                face: i,
                expected: n,
                got: f.homo_dim(),
            });
        }
        if n != 3 && n != 4 {
            return Err(GeomError::UnsupportedDimension(n - 1).into());
        }
        Ok(Self {
            id: id.into(),
            faces,
            joint: None,
        })
    }

    /// Attaches a joint covariance over all face parameters (row-major,
    /// `(m(d+1))²` entries). Its diagonal blocks must equal the face
    /// covariances.
    pub fn with_joint_covariance(mut self, entries: &[f64]) -> Result<Self, PgdfError> {
        let k = self.homo_dim();
        let total = k * self.faces.len();
        if entries.len() != total * total {
            return Err(PgdfError::JointCovariance(format!(
                "expected {} entries, got {}",
                total * total,
                entries.len()
            )));
        }
        let m = DMatrix::from_row_slice(total, total, entries);
        let scale = m.amax().max(1.0);
        if (&m - m.transpose()).amax() > 1e-12 * scale {
            return Err(PgdfError::JointCovariance("not symmetric".into()));
        }
        for (f, face) in self.faces.iter().enumerate() {
            for i in 0..k {
                for j in 0..k {
                    let joint = m[(f * k + i, f * k + j)];
                    if (joint - face.sigma().get(i, j)).abs() > 1e-12 * scale {
                        return Err(PgdfError::JointCovariance(format!(
                            "diagonal block {f} differs from the face covariance"
                        )));
                    }
                }
            }
        }
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.min();
        if min < -1e-10 * eig.eigenvalues.sum().abs().max(f64::MIN_POSITIVE) {
            return Err(PgdfError::JointCovariance(format!(
                "indefinite (smallest eigenvalue {min:e})"
            )));
        }
        let sqrt_w = DMatrix::from_diagonal(&eig.eigenvalues.map(|w| w.max(0.0).sqrt()));
        self.joint = Some(JointLaw {
            root: &eig.eigenvectors * sqrt_w,
        });
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn faces(&self) -> &[GaussianFace] {
        &self.faces
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn homo_dim(&self) -> usize {
        self.faces[0].homo_dim()
    }

    /// Workspace dimension d.
    pub fn dim(&self) -> usize {
        self.homo_dim() - 1
    }

    pub fn has_joint_covariance(&self) -> bool {
        self.joint.is_some()
    }

    pub fn joint_covariance_row_major(&self) -> Option<Vec<f64>> {
        self.joint.as_ref().map(|j| {
            let c = &j.root * j.root.transpose();
            let n = c.nrows();
            (0..n * n).map(|k| c[(k / n, k % n)]).collect()
        })
    }

    /// The polytope of face means.
    pub fn mean_faces(&self) -> Vec<HomoVec> {
        self.faces.iter().map(|f| *f.mu()).collect()
    }

    /// Replaces face beliefs wholesale, keeping the id.
    pub fn with_faces(&self, faces: Vec<GaussianFace>) -> Result<Self, PgdfError> {
        Self::new(self.id.clone(), faces)
    }
}

/// One concrete draw of an obstacle's faces.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledObstacle {
    pub normals: Vec<HomoVec>,
}

impl SampledObstacle {
    pub fn contains(&self, x: &Point) -> bool {
        crate::geom::point_in_polytope(x, &self.normals)
    }
}

/// Draws every face of `o`. Faces are independent unless the obstacle
/// carries a joint covariance.
pub fn sample_obstacle(o: &PgdfObstacle, rng: &mut RngStream) -> SampledObstacle {
    match &o.joint {
        None => SampledObstacle {
            normals: o.faces.iter().map(|f| f.sample(rng)).collect(),
        },
        Some(joint) => {
            let k = o.homo_dim();
            let total = joint.root.nrows();
            let mut z = DVector::zeros(total);
            for v in z.iter_mut() {
                *v = rng.standard_normal();
            }
            let offs = &joint.root * z;
            let normals = o
                .faces
                .iter()
                .enumerate()
                .map(|(f, face)| {
                    let mut n = *face.mu();
                    for i in 0..k {
                        n[i] += offs[f * k + i];
                    }
                    n
                })
                .collect();
            SampledObstacle { normals }
        }
    }
}

/// Points measured on one face, with a Gaussian prior on its parameters.
#[derive(Clone, Debug)]
pub struct FacePointCloud {
    pub points: Vec<Point>,
    pub noise_sd: f64,
    pub prior: GaussianFace,
}

#[cfg_attr(not(test), allow(dead_code))]
struct FaceFit {
    face: GaussianFace,
    prior_precision: DMatrix<f64>,
    data_precision: DMatrix<f64>,
    posterior_precision: DMatrix<f64>,
}

/// Conjugate Bayesian regression of a face plane from its points.
///
/// Plane parameters are scale-free, so the coordinate of the prior mean with
/// the largest magnitude is pinned to its prior value and the remaining `d`
/// coordinates are regressed. Each point contributes the observation
/// `n·(x,1) = 0` with Gaussian noise of standard deviation `noise_sd`. The
/// returned covariance is zero along the pinned coordinate.
pub fn fit_face(cloud: &FacePointCloud) -> Result<GaussianFace, PgdfError> {
    Ok(fit_face_detailed(cloud)?.face)
}

fn fit_face_detailed(cloud: &FacePointCloud) -> Result<FaceFit, PgdfError> {
    if !(cloud.noise_sd > 0.0) {
        return Err(PgdfError::NonPositiveNoise(cloud.noise_sd));
    }
    let prior = &cloud.prior;
    prior.sigma().check_psd()?;
    let k = prior.homo_dim();
    if let Some(p) = cloud.points.iter().find(|p| p.dim() + 1 != k) {
        return Err(GeomError::DimensionMismatch {
            expected: k - 1,
            got: p.dim(),
        }
        .into());
    }
    let mu0 = prior.mu();
    let pin = (0..k)
        .max_by(|&i, &j| mu0[i].abs().total_cmp(&mu0[j].abs()))
        .expect("non-empty");
    let free: Vec<usize> = (0..k).filter(|&i| i != pin).collect();
    let nf = free.len();
    let s = prior.sigma();
    // prior on the free block, conditioned on the pinned coordinate at its mean
    let s_pp = s.get(pin, pin);
    let cond = DMatrix::from_fn(nf, nf, |a, b| {
        let (i, j) = (free[a], free[b]);
        if s_pp > 0.0 {
            s.get(i, j) - s.get(i, pin) * s.get(pin, j) / s_pp
        } else {
            s.get(i, j)
        }
    });
    let mu_free = DVector::from_fn(nf, |a, _| mu0[free[a]]);
    if cloud.points.is_empty() {
        let zero = DMatrix::zeros(nf, nf);
        return Ok(FaceFit {
            face: prior.clone(),
            prior_precision: zero.clone(),
            data_precision: zero.clone(),
            posterior_precision: zero,
        });
    }
    let prior_precision = cond
        .clone()
        .cholesky()
        .ok_or(PgdfError::SingularPrior)?
        .inverse();
    let inv_var = 1.0 / (cloud.noise_sd * cloud.noise_sd);
    let mut data_precision = DMatrix::zeros(nf, nf);
    let mut data_info = DVector::zeros(nf);
    for p in &cloud.points {
        let x = p.lift();
        let row = DVector::from_fn(nf, |a, _| x[free[a]]);
        let target = -mu0[pin] * x[pin];
        data_precision += &row * row.transpose() * inv_var;
        data_info += &row * (target * inv_var);
    }
    let posterior_precision = &prior_precision + &data_precision;
    let chol = posterior_precision
        .clone()
        .cholesky()
        .ok_or(PgdfError::SingularPrior)?;
    let post_cov = chol.inverse();
    let info = &prior_precision * &mu_free + data_info;
    let theta = chol.solve(&info);

    let mut mu = *mu0;
    let mut cov = vec![0.0; k * k];
    for (a, &i) in free.iter().enumerate() {
        mu[i] = theta[a];
        for (b, &j) in free.iter().enumerate() {
            cov[i * k + j] = 0.5 * (post_cov[(a, b)] + post_cov[(b, a)]);
        }
    }
    let face = GaussianFace::new(mu, SymMatrix::from_row_major(k, &cov)?)?;
    Ok(FaceFit {
        face,
        prior_precision,
        data_precision,
        posterior_precision,
    })
}
