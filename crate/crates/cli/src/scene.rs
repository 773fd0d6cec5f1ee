//! Scene documents.
//!
//! A scene is one JSON document. Covariances are row-major with an explicit
//! length of `(d+1)²`; nothing is reshaped implicitly. [`SceneFile`] is the
//! raw document and round-trips bit-exactly; [`Scene`] is its validated form.

use std::path::Path;

use eshadow::certify::SearchConfig;
use eshadow::geom::{HomoVec, Point, Polyline, SymMatrix};
use eshadow::online::{ObservationUpdate, PolicyScript, PolicyStep};
use eshadow::pgdf::{fit_face, FacePointCloud, GaussianFace, PgdfObstacle};
use eshadow::planner::{Bounds, PlannerConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("at `{path}` (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{location}: {message}")]
    Invalid { location: String, message: String },
}

fn invalid(location: impl Into<String>, message: impl ToString) -> SceneError {
    SceneError::Invalid {
        location: location.into(),
        message: message.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub dimension: usize,
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner: Option<PlannerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub id: String,
    pub faces: Vec<FaceSpec>,
    /// Joint covariance over the concatenated face parameters, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_sigma: Option<Vec<f64>>,
}

/// Either `{mu, sigma}` or `{cloud}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud: Option<CloudSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    pub points: Vec<Vec<f64>>,
    pub noise_sd: f64,
    pub prior: PriorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSpec {
    pub start: Vec<f64>,
    pub goal: Vec<f64>,
    pub eps_safe: f64,
    pub workspace: BoundsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_bias: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSpec {
    pub contract_eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_precision: Option<f64>,
    pub initial_plan: Vec<Vec<f64>>,
    #[serde(default)]
    pub steps: Vec<StepSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSpec {
    pub at_waypoint: usize,
    #[serde(default)]
    pub updates: Vec<UpdateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_plan: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSpec {
    pub obstacle_id: String,
    pub time: f64,
    pub faces: Vec<FaceSpec>,
}

#[derive(Clone, Debug)]
pub struct PlannerSetup {
    pub start: Point,
    pub goal: Point,
    pub config: PlannerConfig,
}

#[derive(Clone, Debug)]
pub struct OnlineSetup {
    pub contract_eps: f64,
    pub eps_precision: Option<f64>,
    pub script: PolicyScript,
}

/// A validated scene.
#[derive(Clone, Debug)]
pub struct Scene {
    pub dimension: usize,
    pub obstacles: Vec<PgdfObstacle>,
    pub trajectory: Option<Polyline>,
    pub planner: Option<PlannerSetup>,
    pub online: Option<OnlineSetup>,
    pub file: SceneFile,
}

impl Scene {
    pub fn to_json(&self) -> String {
        self.file.to_json()
    }
}

impl SceneFile {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            obstacles: Vec::new(),
            trajectory: None,
            planner: None,
            online: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(self) -> Result<Scene, SceneError> {
        validate(self)
    }

    /// Replaces every point-cloud face by its fitted Gaussian.
    pub fn fitted(&self) -> Result<SceneFile, SceneError> {
        let d = self.dimension;
        let mut out = self.clone();
        for (i, o) in out.obstacles.iter_mut().enumerate() {
            for (j, f) in o.faces.iter_mut().enumerate() {
                let at = format!("obstacle {:?} (obstacles[{i}]).faces[{j}]", o.id);
                *f = FaceSpec::from_face(&face_from_spec(f, d, &at)?);
            }
        }
        if let Some(on) = out.online.as_mut() {
            for (s, step) in on.steps.iter_mut().enumerate() {
                for (u, up) in step.updates.iter_mut().enumerate() {
                    for (j, f) in up.faces.iter_mut().enumerate() {
                        let at = format!("online.steps[{s}].updates[{u}].faces[{j}]");
                        *f = FaceSpec::from_face(&face_from_spec(f, d, &at)?);
                    }
                }
            }
        }
        Ok(out)
    }
}

impl FaceSpec {
    pub fn from_face(f: &GaussianFace) -> Self {
        Self {
            mu: Some(f.mu().as_slice().to_vec()),
            sigma: Some(f.sigma().row_major()),
            cloud: None,
        }
    }
}

impl ObstacleSpec {
    pub fn from_obstacle(o: &PgdfObstacle) -> Self {
        Self {
            id: o.id().to_string(),
            faces: o.faces().iter().map(FaceSpec::from_face).collect(),
            joint_sigma: o.joint_covariance_row_major(),
        }
    }
}

pub fn waypoints_of(p: &Polyline) -> Vec<Vec<f64>> {
    p.waypoints().iter().map(|w| w.coords().to_vec()).collect()
}

/// Parses and validates a scene document.
pub fn parse_scene(text: &str) -> Result<Scene, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: SceneFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        SceneError::Parse {
            path,
            line: inner.line(),
            column: inner.column(),
            message: inner.to_string(),
        }
    })?;
    validate(file)
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene(&text)
}

fn point(v: &[f64], d: usize, at: &str) -> Result<Point, SceneError> {
    if v.len() != d {
        return Err(invalid(at, format!("expected {d} coordinates, got {}", v.len())));
    }
    Point::new(v).map_err(|e| invalid(at, e))
}

fn polyline(ws: &[Vec<f64>], d: usize, at: &str) -> Result<Polyline, SceneError> {
    if ws.is_empty() {
        return Err(invalid(at, "needs at least one waypoint"));
    }
    let pts = ws
        .iter()
        .enumerate()
        .map(|(i, w)| point(w, d, &format!("{at}[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Polyline::new(pts).map_err(|e| invalid(at, e))
}

fn gaussian(mu: &[f64], sigma: &[f64], d: usize, at: &str) -> Result<GaussianFace, SceneError> {
    let k = d + 1;
    if mu.len() != k {
        return Err(invalid(format!("{at}.mu"), format!("expected {k} entries, got {}", mu.len())));
    }
    if sigma.len() != k * k {
        return Err(invalid(
            format!("{at}.sigma"),
            format!("expected {} row-major entries, got {}", k * k, sigma.len()),
        ));
    }
    let mu = HomoVec::new(mu).map_err(|e| invalid(format!("{at}.mu"), e))?;
    let sigma = SymMatrix::from_row_major(k, sigma).map_err(|e| invalid(format!("{at}.sigma"), e))?;
    GaussianFace::new(mu, sigma).map_err(|e| invalid(format!("{at}.sigma"), e))
}

fn face_from_spec(f: &FaceSpec, d: usize, at: &str) -> Result<GaussianFace, SceneError> {
    match (&f.mu, &f.sigma, &f.cloud) {
        (Some(mu), Some(sigma), None) => gaussian(mu, sigma, d, at),
        (None, None, Some(c)) => {
            let prior = gaussian(&c.prior.mu, &c.prior.sigma, d, &format!("{at}.cloud.prior"))?;
            let points = c
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| point(p, d, &format!("{at}.cloud.points[{i}]")))
                .collect::<Result<Vec<_>, _>>()?;
            let cloud = FacePointCloud {
                points,
                noise_sd: c.noise_sd,
                prior,
            };
            fit_face(&cloud).map_err(|e| invalid(format!("{at}.cloud"), e))
        }
        _ => Err(invalid(at, "a face is either {mu, sigma} or {cloud}")),
    }
}

fn positive_risk(v: f64, at: &str) -> Result<f64, SceneError> {
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(invalid(at, format!("risk {v} outside (0, 1)")))
    }
}

fn validate(file: SceneFile) -> Result<Scene, SceneError> {
    let d = file.dimension;
    if !(2..=3).contains(&d) {
        return Err(invalid("dimension", format!("must be 2 or 3, got {d}")));
    }
    let mut obstacles = Vec::with_capacity(file.obstacles.len());
    for (i, o) in file.obstacles.iter().enumerate() {
        let at = format!("obstacle {:?} (obstacles[{i}])", o.id);
        if obstacles.iter().any(|p: &PgdfObstacle| p.id() == o.id) {
            return Err(invalid(at, "duplicate id"));
        }
        let faces = o
            .faces
            .iter()
            .enumerate()
            .map(|(j, f)| face_from_spec(f, d, &format!("{at}.faces[{j}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let mut obstacle = PgdfObstacle::new(o.id.clone(), faces).map_err(|e| invalid(&at, e))?;
        if let Some(j) = &o.joint_sigma {
            obstacle = obstacle
                .with_joint_covariance(j)
                .map_err(|e| invalid(format!("{at}.joint_sigma"), e))?;
        }
        obstacles.push(obstacle);
    }

    let trajectory = file
        .trajectory
        .as_ref()
        .map(|t| polyline(&t.waypoints, d, "trajectory.waypoints"))
        .transpose()?;

    let planner = match &file.planner {
        None => None,
        Some(p) => {
            let workspace = Bounds {
                min: point(&p.workspace.min, d, "planner.workspace.min")?,
                max: point(&p.workspace.max, d, "planner.workspace.max")?,
            };
            let mut config = PlannerConfig::with_defaults(positive_risk(p.eps_safe, "planner.eps_safe")?, workspace);
            if let Some(v) = p.eps_precision {
                config.eps_p = v;
            }
            if let Some(v) = p.step_size {
                config.step_size = v;
            }
            if let Some(v) = p.goal_bias {
                config.goal_bias = v;
            }
            if let Some(v) = p.goal_radius {
                config.goal_radius = v;
            }
            if let Some(v) = p.max_iterations {
                config.max_iterations = v;
            }
            Some(PlannerSetup {
                start: point(&p.start, d, "planner.start")?,
                goal: point(&p.goal, d, "planner.goal")?,
                config,
            })
        }
    };

    let online = match &file.online {
        None => None,
        Some(on) => {
            positive_risk(on.contract_eps, "online.contract_eps")?;
            let initial_plan = polyline(&on.initial_plan, d, "online.initial_plan")?;
            let mut steps = Vec::with_capacity(on.steps.len());
            for (s, st) in on.steps.iter().enumerate() {
                let at = format!("online.steps[{s}]");
                let mut updates = Vec::with_capacity(st.updates.len());
                for (u, up) in st.updates.iter().enumerate() {
                    let uat = format!("{at}.updates[{u}]");
                    let Some(target) = obstacles.iter().find(|o| o.id() == up.obstacle_id) else {
                        return Err(invalid(uat, format!("unknown obstacle {:?}", up.obstacle_id)));
                    };
                    if up.faces.len() != target.face_count() {
                        return Err(invalid(
                            uat,
                            format!("expected {} faces, got {}", target.face_count(), up.faces.len()),
                        ));
                    }
                    let faces = up
                        .faces
                        .iter()
                        .enumerate()
                        .map(|(j, f)| face_from_spec(f, d, &format!("{uat}.faces[{j}]")))
                        .collect::<Result<Vec<_>, _>>()?;
                    updates.push(ObservationUpdate {
                        obstacle_id: up.obstacle_id.clone(),
                        faces,
                        time: up.time,
                    });
                }
                let new_plan = st
                    .new_plan
                    .as_ref()
                    .map(|p| polyline(p, d, &format!("{at}.new_plan")))
                    .transpose()?;
                steps.push(PolicyStep {
                    at_waypoint: st.at_waypoint,
                    updates,
                    new_plan,
                });
            }
            Some(OnlineSetup {
                contract_eps: on.contract_eps,
                eps_precision: on.eps_precision,
                script: PolicyScript { initial_plan, steps },
            })
        }
    };

    Ok(Scene {
        dimension: d,
        obstacles,
        trajectory,
        planner,
        online,
        file,
    })
}

/// Search settings shared by commands.
pub fn search_config(schedule: eshadow::certify::Schedule) -> SearchConfig {
    SearchConfig {
        schedule,
        ..SearchConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dimension": 2,
        "obstacles": [{"id": "a", "faces": [{"mu": [1, 0, -1], "sigma": [0.01,0,0, 0,0.01,0, 0,0,0.01]}]}]
    }"#;

    #[test]
    fn minimal_scene_loads() {
        let s = parse_scene(MINIMAL).unwrap();
        assert_eq!(s.dimension, 2);
        assert_eq!(s.obstacles.len(), 1);
        assert_eq!(s.obstacles[0].face_count(), 1);
        assert!(s.trajectory.is_none() && s.planner.is_none() && s.online.is_none());
    }

    #[test]
    fn indefinite_sigma_names_obstacle_and_face() {
        let text = r#"{"dimension": 2, "obstacles": [{"id": "wall", "faces": [
            {"mu": [1, 0, -1], "sigma": [0.01,0,0, 0,0.01,0, 0,0,0.01]},
            {"mu": [0, 1, -1], "sigma": [-0.1,0,0, 0,0.01,0, 0,0,0.01]}]}]}"#;
        let msg = parse_scene(text).unwrap_err().to_string();
        assert!(msg.contains("\"wall\"") && msg.contains("faces[1]"), "{msg}");
    }

    #[test]
    fn schema_errors_carry_the_path() {
        let text = r#"{"dimension": 2, "obstacles": [{"id": "a", "faces": [{"mu": [1, "x", -1]}]}]}"#;
        match parse_scene(text).unwrap_err() {
            SceneError::Parse { path, line, .. } => {
                assert_eq!(path, "obstacles[0].faces[0].mu[1]");
                assert_eq!(line, 1);
            }
            e => panic!("{e}"),
        }
        let text = r#"{"dimension": 2, "obstacles": [], "extra": 1}"#;
        assert!(matches!(parse_scene(text), Err(SceneError::Parse { .. })));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let wrong_sigma = r#"{"dimension": 2, "obstacles": [{"id": "a", "faces": [{"mu": [1, 0, -1], "sigma": [1,0,0,1]}]}]}"#;
        assert!(parse_scene(wrong_sigma).unwrap_err().to_string().contains("sigma"));
        let wrong_mu = r#"{"dimension": 3, "obstacles": [{"id": "a", "faces": [{"mu": [1, 0, -1], "sigma": [0,0,0,0,0,0,0,0,0]}]}]}"#;
        assert!(parse_scene(wrong_mu).is_err());
        let bad_traj = r#"{"dimension": 2, "obstacles": [], "trajectory": {"waypoints": [[0, 0], [1, 2, 3]]}}"#;
        assert!(parse_scene(bad_traj).unwrap_err().to_string().contains("waypoints[1]"));
        let both = r#"{"dimension": 2, "obstacles": [{"id": "a", "faces": [{"mu": [1, 0, -1]}]}]}"#;
        assert!(parse_scene(both).is_err());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut file = SceneFile::new(2);
        let mu = [0.1_f64, -1.0 / 3.0, std::f64::consts::PI];
        let sigma = [1e-300, 0.0, 0.0, 0.0, 2.0 / 7.0, 0.0, 0.0, 0.0, 5e-17];
        file.obstacles.push(ObstacleSpec {
            id: "o".into(),
            faces: vec![FaceSpec {
                mu: Some(mu.to_vec()),
                sigma: Some(sigma.to_vec()),
                cloud: None,
            }],
            joint_sigma: None,
        });
        file.trajectory = Some(TrajectorySpec {
            waypoints: vec![vec![0.1 + 0.2, 1e-9], vec![f64::MAX, -0.0]],
        });
        let once = parse_scene(&file.to_json()).unwrap();
        let twice = parse_scene(&once.to_json()).unwrap();
        assert_eq!(once.file, file);
        assert_eq!(twice.file, file);
        let m = once.obstacles[0].faces()[0].mu();
        for (a, b) in m.as_slice().iter().zip(mu) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn clouds_are_fitted() {
        let text = r#"{"dimension": 2, "obstacles": [{"id": "a", "faces": [{"cloud": {
            "points": [[1, -1], [1, 0], [1, 1], [1, 2]],
            "noise_sd": 0.01,
            "prior": {"mu": [1, 0, -0.8], "sigma": [0,0,0, 0,0.1,0, 0,0,0.1]}}}]}]}"#;
        let s = parse_scene(text).unwrap();
        let mu = s.obstacles[0].faces()[0].mu();
        assert!((mu[2] + 1.0).abs() < 0.01, "{mu:?}");
        let fitted = s.file.fitted().unwrap();
        assert!(fitted.obstacles[0].faces[0].cloud.is_none());
        let refit = fitted.validate().unwrap();
        assert_eq!(refit.obstacles[0].faces()[0].mu(), mu);
    }

    #[test]
    fn online_updates_are_checked_against_obstacles() {
        let text = r#"{"dimension": 2,
            "obstacles": [{"id": "a", "faces": [{"mu": [1, 0, -1], "sigma": [0,0,0,0,0,0,0,0,0.01]}]}],
            "online": {"contract_eps": 0.1, "initial_plan": [[0, 0], [0, 1]],
                "steps": [{"at_waypoint": 1, "updates": [{"obstacle_id": "b", "time": 1, "faces": []}]}]}}"#;
        assert!(parse_scene(text).unwrap_err().to_string().contains("unknown obstacle"));
    }
}
