//! Command bodies. Each returns an exit code and a human report; `main`
//! only parses flags and prints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use eshadow::certify::{
    find_maximal_shadow_set, find_uniform_allocation, verify_certificate, CertifyError, SafetyCertificate, Schedule,
};
use eshadow::geom::{Point, Polyline};
use eshadow::online::{simulate_policy, OnlineConfig, OnlineError, SimulationReport};
use eshadow::oracle::{mc_collision_prob, McReport};
use eshadow::planner::{plan, PlanOutcome, PlannerError};
use eshadow::prob::{binom_lower_ci, RngStream};
use eshadow::shadow::Window;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{mean_polygon, render_svg, RenderError, RenderInput, ShadowLayer};
use crate::scene::{load_scene, search_config, waypoints_of, Scene, SceneError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GATE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

pub const DEFAULT_EPS_PRECISION: f64 = 1e-4;
/// Confidence of the lower bound used by `mc-validate`.
pub const VALIDATE_CONFIDENCE: f64 = 0.999;

/// Every error maps to exit code 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Online(#[from] OnlineError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("{0}")]
    Input(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub code: i32,
    pub report: String,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn trajectory(scene: &Scene) -> Result<&Polyline, CliError> {
    scene
        .trajectory
        .as_ref()
        .ok_or_else(|| CliError::Input("scene has no trajectory".into()))
}

#[derive(Clone, Debug)]
pub struct CertifyArgs {
    pub eps_precision: f64,
    pub max_risk: Option<f64>,
    pub uniform_allocation: bool,
    pub schedule: Schedule,
}

impl Default for CertifyArgs {
    fn default() -> Self {
        Self {
            eps_precision: DEFAULT_EPS_PRECISION,
            max_risk: None,
            uniform_allocation: false,
            schedule: Schedule::Additive,
        }
    }
}

pub fn certify_scene(scene: &Scene, args: &CertifyArgs) -> Result<SafetyCertificate, CliError> {
    let vol = trajectory(scene)?;
    let cfg = search_config(args.schedule);
    let cert = if args.uniform_allocation {
        find_uniform_allocation(&scene.obstacles, vol, args.eps_precision, &cfg)?
    } else {
        find_maximal_shadow_set(&scene.obstacles, vol, args.eps_precision, &cfg)?
    };
    Ok(cert)
}

pub fn certificate_report(cert: &SafetyCertificate) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>14} {:>6}  status", "obstacle", "eps_i", "calls");
    for c in &cert.per_obstacle {
        let _ = writeln!(s, "{:<16} {:>14.6e} {:>6}  {:?}", c.id, c.eps_i, c.calls, c.status);
    }
    let _ = writeln!(s, "total eps {:.6e} (precision {:e})", cert.total_eps, cert.eps_precision);
    s
}

pub fn cmd_certify(scene: &Path, args: &CertifyArgs, out: Option<&Path>) -> Result<Outcome, CliError> {
    let scene = load_scene(scene)?;
    let cert = certify_scene(&scene, args)?;
    if let Some(p) = out {
        write(p, &cert.to_json())?;
    }
    let mut report = certificate_report(&cert);
    let code = match args.max_risk {
        Some(gate) if !(cert.total_eps <= gate) => {
            let _ = writeln!(report, "FAIL: total exceeds the gate {gate:e}");
            EXIT_GATE
        }
        Some(gate) => {
            let _ = writeln!(report, "PASS: total within the gate {gate:e}");
            EXIT_OK
        }
        None => EXIT_OK,
    };
    Ok(Outcome { code, report })
}

/// Written by `plan`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub found: bool,
    pub waypoints: Vec<Vec<f64>>,
    pub iterations: usize,
    pub tree_size: usize,
    pub tree_edges: Vec<[Vec<f64>; 2]>,
    pub certificate: Option<SafetyCertificate>,
}

pub fn plan_scene(scene: &Scene, seed: u64) -> Result<(PlanOutcome, Option<SafetyCertificate>), CliError> {
    let setup = scene
        .planner
        .as_ref()
        .ok_or_else(|| CliError::Input("scene has no planner section".into()))?;
    let mut rng = RngStream::new(seed);
    let out = plan(&scene.obstacles, &setup.start, &setup.goal, &setup.config, &mut rng)?;
    let cert = match &out.path {
        Some(p) => Some(find_maximal_shadow_set(
            &scene.obstacles,
            p,
            setup.config.eps_p,
            &setup.config.search,
        )?),
        None => None,
    };
    Ok((out, cert))
}

pub fn cmd_plan(scene: &Path, seed: u64, out: Option<&Path>) -> Result<Outcome, CliError> {
    let scene = load_scene(scene)?;
    let (outcome, cert) = plan_scene(&scene, seed)?;
    let file = PlanFile {
        found: outcome.path.is_some(),
        waypoints: outcome.path.as_ref().map(waypoints_of).unwrap_or_default(),
        iterations: outcome.iterations,
        tree_size: outcome.tree.nodes.len(),
        tree_edges: outcome
            .tree
            .edges()
            .iter()
            .map(|(a, b)| [a.coords().to_vec(), b.coords().to_vec()])
            .collect(),
        certificate: cert.clone(),
    };
    if let Some(p) = out {
        write(p, &serde_json::to_string_pretty(&file).expect("plan serializes"))?;
    }
    let mut report = String::new();
    match (&outcome.path, &cert) {
        (Some(path), Some(cert)) => {
            let _ = writeln!(
                report,
                "path found after {} iterations: {} waypoints, tree size {}",
                outcome.iterations,
                path.len(),
                outcome.tree.nodes.len()
            );
            report.push_str(&certificate_report(cert));
            Ok(Outcome { code: EXIT_OK, report })
        }
        _ => {
            let _ = writeln!(
                report,
                "NOT_FOUND after {} iterations (tree size {})",
                outcome.iterations,
                outcome.tree.nodes.len()
            );
            Ok(Outcome {
                code: EXIT_GATE,
                report,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimulateArgs {
    pub trials: u64,
    pub seed: u64,
    pub disable_ledger: bool,
    pub eps_precision: Option<f64>,
    pub schedule: Schedule,
}

pub fn simulate_scene(scene: &Scene, args: &SimulateArgs) -> Result<SimulationReport, CliError> {
    let setup = scene
        .online
        .as_ref()
        .ok_or_else(|| CliError::Input("scene has no online section".into()))?;
    let cfg = OnlineConfig {
        contract_eps: setup.contract_eps,
        eps_p: args
            .eps_precision
            .or(setup.eps_precision)
            .unwrap_or(DEFAULT_EPS_PRECISION),
        search: search_config(args.schedule),
        ledger_enabled: !args.disable_ledger,
    };
    Ok(simulate_policy(&scene.obstacles, &setup.script, &cfg, args.trials, args.seed)?)
}

/// Exit 1 when some stop time's frequency exceeds the contract by more than
/// three standard errors.
pub fn cmd_simulate_online(scene: &Path, args: &SimulateArgs, out: Option<&Path>) -> Result<Outcome, CliError> {
    let scene = load_scene(scene)?;
    let rep = simulate_scene(&scene, args)?;
    if let Some(p) = out {
        write(p, &serde_json::to_string_pretty(&rep).expect("report serializes"))?;
    }
    let mut report = String::new();
    let _ = writeln!(
        report,
        "contract {:e}, ledger {}, initial plan eps {:.6e}",
        rep.contract_eps,
        if rep.ledger_enabled { "on" } else { "off" },
        rep.initial_eps
    );
    for s in &rep.steps {
        let _ = writeln!(
            report,
            "step {}: {} (eps1 {}, eps2 {:.6e})",
            s.step,
            if s.accepted { "accepted" } else { "rejected" },
            s.eps1.map(|e| format!("{e:.6e}")).unwrap_or_else(|| "-".into()),
            s.eps2
        );
    }
    for s in &rep.stop_times {
        let _ = writeln!(
            report,
            "stop after {:>2} steps: p_hat {:.5} ± {:.5} (upper {:.5})",
            s.tau,
            s.mc.p_hat,
            s.mc.stderr(),
            s.mc.upper_ci
        );
    }
    let worst = rep.worst_excess_in_stderr();
    let code = if worst > 3.0 { EXIT_GATE } else { EXIT_OK };
    let _ = writeln!(report, "worst stop time exceeds the contract by {worst:.2} stderr");
    Ok(Outcome { code, report })
}

#[derive(Clone, Debug)]
pub struct RenderArgs {
    pub certificate: Option<PathBuf>,
    pub eps: Vec<f64>,
    pub window: Option<[f64; 4]>,
    pub resolution: usize,
    pub plan: Option<PathBuf>,
}

fn bounding_window(scene: &Scene, extra: &[Polyline]) -> Result<Window, CliError> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut add = |x: f64, y: f64| {
        lo = [lo[0].min(x), lo[1].min(y)];
        hi = [hi[0].max(x), hi[1].max(y)];
    };
    let far = Window::new([-1e3, -1e3], [1e3, 1e3]).expect("valid");
    for o in &scene.obstacles {
        for v in mean_polygon(o, &far) {
            add(v[0], v[1]);
        }
    }
    let mut lines: Vec<&Polyline> = extra.iter().collect();
    lines.extend(scene.trajectory.iter());
    for l in lines {
        for w in l.waypoints() {
            add(w.x(), w.y());
        }
    }
    if let Some(p) = &scene.planner {
        for w in [p.config.workspace.min, p.config.workspace.max] {
            add(w.x(), w.y());
        }
    }
    if !lo[0].is_finite() {
        return Ok(Window::new([-1.0, -1.0], [1.0, 1.0]).expect("valid"));
    }
    let pad = 0.1 * (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    Window::new([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad]).map_err(|e| CliError::Input(e.to_string()))
}

fn polyline_of(ws: &[Vec<f64>]) -> Result<Polyline, CliError> {
    let pts = ws
        .iter()
        .map(|w| Point::new(w).map_err(|e| CliError::Input(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Polyline::new(pts).map_err(|e| CliError::Input(e.to_string()))
}

pub fn render_scene(scene: &Scene, args: &RenderArgs) -> Result<String, CliError> {
    if scene.dimension != 2 {
        return Err(RenderError::NotPlanar(scene.dimension).into());
    }
    let mut layers = Vec::new();
    if let Some(path) = &args.certificate {
        let cert = SafetyCertificate::from_json(&read(path)?).map_err(|e| CliError::Input(e.to_string()))?;
        for c in &cert.per_obstacle {
            let idx = scene
                .obstacles
                .iter()
                .position(|o| o.id() == c.id)
                .ok_or_else(|| CliError::Input(format!("certificate names unknown obstacle {:?}", c.id)))?;
            layers.push(ShadowLayer {
                obstacle: idx,
                eps: c.eps_i,
                levels: (c.eps_i < 1.0).then(|| c.per_face_q.clone()),
            });
        }
    }
    for &e in &args.eps {
        if !(e > 0.0 && e <= 1.0) {
            return Err(CliError::Input(format!("risk {e} outside (0, 1]")));
        }
        layers.extend((0..scene.obstacles.len()).map(|i| ShadowLayer {
            obstacle: i,
            eps: e,
            levels: None,
        }));
    }
    let mut paths: Vec<Polyline> = scene.trajectory.iter().cloned().collect();
    let mut tree_edges = Vec::new();
    if let Some(p) = &args.plan {
        let pf: PlanFile = serde_json::from_str(&read(p)?).map_err(|e| CliError::Input(e.to_string()))?;
        if !pf.waypoints.is_empty() {
            paths.push(polyline_of(&pf.waypoints)?);
        }
        for [a, b] in &pf.tree_edges {
            let a = Point::new(a).map_err(|e| CliError::Input(e.to_string()))?;
            let b = Point::new(b).map_err(|e| CliError::Input(e.to_string()))?;
            tree_edges.push((a, b));
        }
    }
    let window = match args.window {
        Some(w) => Window::new([w[0], w[1]], [w[2], w[3]]).map_err(|e| CliError::Input(e.to_string()))?,
        None => bounding_window(scene, &paths)?,
    };
    Ok(render_svg(&RenderInput {
        obstacles: &scene.obstacles,
        layers,
        paths,
        tree_edges,
        window,
        resolution: args.resolution,
    })?)
}

pub fn cmd_render(scene: &Path, args: &RenderArgs, out: &Path) -> Result<Outcome, CliError> {
    let scene = load_scene(scene)?;
    let svg = render_scene(&scene, args)?;
    write(out, &svg)?;
    Ok(Outcome {
        code: EXIT_OK,
        report: format!("wrote {}\n", out.display()),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total_eps: f64,
    pub mc: McReport,
    pub lower_ci: f64,
    pub certificate_verifies: bool,
    pub pass: bool,
}

/// Passes iff the one-sided lower confidence bound on the collision
/// frequency does not exceed the certified total.
pub fn validate_scene(
    scene: &Scene,
    cert: &SafetyCertificate,
    trials: u64,
    seed: u64,
) -> Result<ValidationReport, CliError> {
    let vol = trajectory(scene)?;
    let certificate_verifies = verify_certificate(cert, &scene.obstacles, vol)?;
    let mc = mc_collision_prob(&scene.obstacles, vol, trials, seed);
    let lower_ci = if trials == 0 {
        0.0
    } else {
        binom_lower_ci(mc.hits, mc.trials, VALIDATE_CONFIDENCE)
    };
    Ok(ValidationReport {
        total_eps: cert.total_eps,
        pass: lower_ci <= cert.total_eps,
        mc,
        lower_ci,
        certificate_verifies,
    })
}

pub fn cmd_mc_validate(scene: &Path, cert: &Path, trials: u64, seed: u64) -> Result<Outcome, CliError> {
    let scene = load_scene(scene)?;
    let cert = SafetyCertificate::from_json(&read(cert)?).map_err(|e| CliError::Input(e.to_string()))?;
    let r = validate_scene(&scene, &cert, trials, seed)?;
    let report = format!(
        "certified {:.6e}; MC p_hat {:.6e} over {} trials (lower {:.6e}, upper {:.6e}); certificate {}\n{}\n",
        r.total_eps,
        r.mc.p_hat,
        r.mc.trials,
        r.lower_ci,
        r.mc.upper_ci,
        if r.certificate_verifies { "verifies" } else { "does not verify" },
        if r.pass { "PASS" } else { "FAIL" }
    );
    Ok(Outcome {
        code: if r.pass { EXIT_OK } else { EXIT_GATE },
        report,
    })
}

pub fn cmd_fit(scene: &Path, out: &Path) -> Result<Outcome, CliError> {
    let scene = load_scene(scene)?;
    let fitted = scene.file.fitted()?;
    write(out, &fitted.to_json())?;
    Ok(Outcome {
        code: EXIT_OK,
        report: format!("wrote {}\n", out.display()),
    })
}
