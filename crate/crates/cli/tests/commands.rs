use std::path::{Path, PathBuf};
use std::process::Command;

use eshadow::certify::{find_maximal_shadow_set, SafetyCertificate, SearchConfig};
use eshadow::online::SimulationReport;
use eshadow_cli::commands::PlanFile;
use eshadow_cli::fixtures;
use eshadow_cli::scene::{load_scene, ObstacleSpec, SceneFile, TrajectorySpec};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_eshadow")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scene(dir: &Path, name: &str, f: &SceneFile) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, f.to_json()).unwrap();
    p
}

#[test]
fn fig6_optimal_certifies_and_uniform_fails() {
    let f = fixture("fig6.json");
    let gate = fixtures::FIG6_GATE.to_string();
    let (code, out, _) = run(&["certify", s(&f), "--max-risk", &gate]);
    assert_eq!(code, 0, "{out}");
    let (code, out, _) = run(&["certify", s(&f), "--max-risk", &gate, "--uniform-allocation"]);
    assert_eq!(code, 1, "{out}");
}

#[test]
fn distant_obstacles_cost_the_floor() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let (code, _, _) = run(&["certify", s(&fixture("distant.json")), "--out", s(&out)]);
    assert_eq!(code, 0);
    let cert = SafetyCertificate::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let n = cert.per_obstacle.len() as f64;
    assert!((cert.total_eps - n * 1e-9).abs() <= 1e-20);
    assert!(cert.per_obstacle.iter().all(|c| c.calls <= 2));
}

#[test]
fn cli_certificate_equals_library_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.json");
    let f = fixture("extreme_three.json");
    let (code, _, _) = run(&["certify", s(&f), "--eps-precision", "1e-6", "--out", s(&out)]);
    assert_eq!(code, 0);
    let cli = SafetyCertificate::from_json(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let scene = load_scene(&f).unwrap();
    let lib = find_maximal_shadow_set(&scene.obstacles, scene.trajectory.as_ref().unwrap(), 1e-6, &SearchConfig::default())
        .unwrap();
    assert_eq!(cli, lib);
    assert_eq!(cli.total_eps.to_bits(), lib.total_eps.to_bits());
}

#[test]
fn missing_trajectory_and_bad_scenes_exit_2() {
    let (code, _, err) = run(&["certify", s(&fixture("box_two_exits.json"))]);
    assert_eq!(code, 2);
    assert!(err.contains("trajectory"));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"dimension": 2, "obstacles": [{"id": "w", "faces": [{"mu": [1, 0, -1], "sigma": [-0.1,0,0, 0,0.01,0, 0,0,0.01]}]}], "trajectory": {"waypoints": [[0, 0]]}}"#,
    )
    .unwrap();
    let (code, _, err) = run(&["certify", s(&bad)]);
    assert_eq!(code, 2);
    assert!(err.contains("\"w\"") && err.contains("faces[0]"), "{err}");
    let (code, _, _) = run(&["certify", "/nonexistent/scene.json"]);
    assert_eq!(code, 2);
}

#[test]
fn plan_is_deterministic_and_recertified() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let f = fixture("box_two_exits.json");
    assert_eq!(run(&["plan", s(&f), "--seed", "4", "--out", s(&a)]).0, 0);
    assert_eq!(run(&["plan", s(&f), "--seed", "4", "--out", s(&b)]).0, 0);
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let p: PlanFile = serde_json::from_slice(&ta).unwrap();
    assert!(p.found);
    assert!(p.certificate.unwrap().total_eps <= fixtures::BOX_EPS_SAFE);
}

#[test]
fn blocked_goal_is_not_found() {
    let mut f = fixtures::box_two_exits();
    f.obstacles.push(ObstacleSpec {
        id: "over_goal".into(),
        faces: fixtures::box_two_exits().obstacles[0].faces.iter().enumerate().map(|(i, face)| {
            let mut face = face.clone();
            // [-3, 3] × [6.5, 9.5] around the goal
            let offs = [-3.0, -3.0, -9.5, 6.5];
            face.mu.as_mut().unwrap()[2] = offs[i];
            face
        }).collect(),
        joint_sigma: None,
    });
    f.planner.as_mut().unwrap().max_iterations = Some(1500);
    let dir = tempfile::tempdir().unwrap();
    let p = write_scene(dir.path(), "blocked.json", &f);
    let (code, out, _) = run(&["plan", s(&p), "--seed", "1"]);
    assert_eq!(code, 1);
    assert!(out.contains("NOT_FOUND"));
}

#[test]
fn uncertifiable_start_is_an_input_error() {
    let mut f = fixtures::box_two_exits();
    f.planner.as_mut().unwrap().start = vec![-5.25, 0.0];
    let dir = tempfile::tempdir().unwrap();
    let p = write_scene(dir.path(), "start.json", &f);
    assert_eq!(run(&["plan", s(&p)]).0, 2);
}

fn simulate(name: &str, extra: &[&str]) -> (i32, SimulationReport) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let f = fixture(name);
    let mut args = vec!["simulate-online", s(&f), "--trials", "20000", "--out", s(&out)];
    args.extend_from_slice(extra);
    let (code, _, err) = run(&args);
    assert_ne!(code, 2, "{err}");
    (code, serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap())
}

#[test]
fn fig9_replan_is_accepted_and_the_ledger_balances() {
    let (code, rep) = simulate("fig9.json", &[]);
    assert_eq!(code, 0);
    assert!(rep.steps[0].accepted);
    for e in rep.ledger_history.unwrap() {
        assert!(e.spent + e.committed_future <= rep.contract_eps);
    }
}

#[test]
fn widened_posterior_keeps_the_old_plan() {
    let (_, rep) = simulate("fig9_widened.json", &[]);
    let s = &rep.steps[0];
    assert!(!s.accepted);
    assert!(s.eps1.unwrap() + s.eps2 > rep.contract_eps);
}

#[test]
fn fig7_needs_the_ledger() {
    let (code, off) = simulate("fig7.json", &["--disable-ledger"]);
    assert_eq!(code, 1);
    assert!(off.worst_excess_in_stderr() > 5.0);
    let (code, on) = simulate("fig7.json", &[]);
    assert_eq!(code, 0);
    assert!(on.worst_excess_in_stderr() <= 3.0);
}

fn polylines(svg: &str, eps: &str) -> Vec<Vec<(f64, f64)>> {
    let key = format!("data-eps=\"{eps}\"");
    svg.lines()
        .filter(|l| l.starts_with("<polyline") && l.contains(&key))
        .map(|l| {
            let pts = l.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
            pts.split(' ')
                .map(|p| {
                    let (x, y) = p.split_once(',').unwrap();
                    (x.parse().unwrap(), y.parse().unwrap())
                })
                .collect()
        })
        .collect()
}

fn exact_square() -> SceneFile {
    let mut f = fixtures::coverage_four_face();
    for face in &mut f.obstacles[0].faces {
        face.sigma = Some(vec![0.0; 9]);
    }
    f
}

#[test]
fn exact_obstacle_outline_traces_the_polygon() {
    let dir = tempfile::tempdir().unwrap();
    let scene = write_scene(dir.path(), "sq.json", &exact_square());
    let svg = dir.path().join("o.svg");
    let res = 100;
    let (code, _, err) = run(&[
        "render", s(&scene), "--eps", "0.1", "--window", "-2,-2,2,2", "--resolution", &res.to_string(), "--out", s(&svg),
    ]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(&svg).unwrap();
    // window 4 wide on an 800 px canvas: one grid cell is 8 px; square at ±1 → 200..600 px
    let cell = 800.0 / res as f64;
    let lines = polylines(&text, "1e-1");
    assert!(!lines.is_empty());
    for (x, y) in lines.into_iter().flatten() {
        let dx = (x - 200.0).abs().min((x - 600.0).abs());
        let dy = (y - 200.0).abs().min((y - 600.0).abs());
        let inside = |v: f64| (200.0 - 2.0 * cell..=600.0 + 2.0 * cell).contains(&v);
        assert!(inside(x) && inside(y));
        assert!(dx.min(dy) <= 2.0 * cell, "({x}, {y})");
    }
}

#[test]
fn risk_list_gives_nested_outlines_and_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture("coverage_four_face.json");
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    for out in [&a, &b] {
        let args = ["render", s(&f), "--eps", "0.5,0.1,0.01", "--window", "-4,-4,4,4", "--out", s(out)];
        assert_eq!(run(&args).0, 0);
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.as_bytes(), std::fs::read(&b).unwrap().as_slice());
    // nested: each outline's x-extent contains the next, higher-risk one
    let extent = |eps: &str| {
        let pts: Vec<_> = polylines(&text, eps).into_iter().flatten().collect();
        assert!(!pts.is_empty(), "{eps}");
        let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (e1, e2, e3) = (extent("1e-2"), extent("1e-1"), extent("5e-1"));
    assert!(e1.0 < e2.0 && e2.0 < e3.0 && e3.1 < e2.1 && e2.1 < e1.1);
}

#[test]
fn render_rejects_spatial_scenes() {
    let mut f = SceneFile::new(3);
    f.trajectory = Some(TrajectorySpec {
        waypoints: vec![vec![0.0, 0.0, 0.0]],
    });
    let dir = tempfile::tempdir().unwrap();
    let p = write_scene(dir.path(), "3d.json", &f);
    let out = dir.path().join("x.svg");
    assert_eq!(run(&["render", s(&p), "--out", s(&out)]).0, 2);
}

#[test]
fn mc_validate_cases() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture("fig6.json");
    let cert = dir.path().join("c.json");
    run(&["certify", s(&f), "--out", s(&cert)]);
    assert_eq!(run(&["mc-validate", s(&f), s(&cert), "--trials", "20000"]).0, 0);

    // a risky trajectory through the near obstacle's margin
    let mut risky = fixtures::fig6();
    risky.trajectory = Some(TrajectorySpec {
        waypoints: vec![vec![-3.0, -0.4], vec![3.0, -0.4]],
    });
    let rp = write_scene(dir.path(), "risky.json", &risky);
    let rc = dir.path().join("rc.json");
    run(&["certify", s(&rp), "--out", s(&rc)]);
    let mut c = SafetyCertificate::from_json(&std::fs::read_to_string(&rc).unwrap()).unwrap();
    c.total_eps = 1e-6;
    std::fs::write(&rc, c.to_json()).unwrap();
    assert_eq!(run(&["mc-validate", s(&rp), s(&rc), "--trials", "20000"]).0, 1);

    // certificate for another trajectory
    assert_eq!(run(&["mc-validate", s(&f), s(&rc)]).0, 2);

    let mut empty = SceneFile::new(2);
    empty.trajectory = Some(TrajectorySpec {
        waypoints: vec![vec![0.0, 0.0], vec![1.0, 1.0]],
    });
    let ep = write_scene(dir.path(), "empty.json", &empty);
    let ec = dir.path().join("ec.json");
    run(&["certify", s(&ep), "--out", s(&ec)]);
    let (code, out, _) = run(&["mc-validate", s(&ep), s(&ec), "--trials", "1000"]);
    assert_eq!(code, 0);
    assert!(out.contains("p_hat 0.000000e0"), "{out}");
}

#[test]
fn fit_replaces_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fitted.json");
    assert_eq!(run(&["fit", s(&fixture("clouds.json")), "--out", s(&out)]).0, 0);
    let fitted = load_scene(&out).unwrap();
    assert!(fitted.file.obstacles[0].faces.iter().all(|f| f.cloud.is_none()));
    let original = load_scene(&fixture("clouds.json")).unwrap();
    for (a, b) in fitted.obstacles[0].faces().iter().zip(original.obstacles[0].faces()) {
        assert_eq!(a.mu(), b.mu());
    }
    // the fitted square sits near ±1
    let c = run(&["certify", s(&out)]);
    assert_eq!(c.0, 0);
}

#[test]
fn seeded_commands_are_reproducible() {
    let f = fixture("fig6.json");
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("c.json");
    run(&["certify", s(&f), "--out", s(&cert)]);
    let a = run(&["mc-validate", s(&f), s(&cert), "--trials", "5000", "--seed", "8"]);
    let b = run(&["mc-validate", s(&f), s(&cert), "--trials", "5000", "--seed", "8"]);
    assert_eq!(a, b);
}
