//! Bundled scenes.
//!
//! The figures being reproduced carry no numeric parameters, so every scene
//! here is our own and only matches them qualitatively. The JSON files under
//! `fixtures/` are generated from these builders; a test keeps them in sync
//! and `ESHADOW_BLESS=1` rewrites them.

use crate::scene::{
    BoundsSpec, CloudSpec, FaceSpec, ObstacleSpec, OnlineSpec, PlannerSpec, PriorSpec, SceneFile, StepSpec,
    TrajectorySpec, UpdateSpec,
};

fn face(mu: [f64; 3], diag: [f64; 3]) -> FaceSpec {
    FaceSpec {
        mu: Some(mu.to_vec()),
        sigma: Some(vec![diag[0], 0.0, 0.0, 0.0, diag[1], 0.0, 0.0, 0.0, diag[2]]),
        cloud: None,
    }
}

/// Faces of `[x0, x1] × [y0, y1]`, each with covariance `diag`.
fn rect_faces(x0: f64, x1: f64, y0: f64, y1: f64, diag: [f64; 3]) -> Vec<FaceSpec> {
    vec![
        face([1.0, 0.0, -x1], diag),
        face([-1.0, 0.0, x0], diag),
        face([0.0, 1.0, -y1], diag),
        face([0.0, -1.0, y0], diag),
    ]
}

fn rect(id: &str, x0: f64, x1: f64, y0: f64, y1: f64, diag: [f64; 3]) -> ObstacleSpec {
    ObstacleSpec {
        id: id.into(),
        faces: rect_faces(x0, x1, y0, y1, diag),
        joint_sigma: None,
    }
}

fn wp(pts: &[[f64; 2]]) -> Vec<Vec<f64>> {
    pts.iter().map(|p| p.to_vec()).collect()
}

fn trajectory(pts: &[[f64; 2]]) -> Option<TrajectorySpec> {
    Some(TrajectorySpec { waypoints: wp(pts) })
}

/// Risk gate used with [`fig6`].
pub const FIG6_GATE: f64 = 0.05;

/// A trajectory grazing one obstacle while another sits far away. The near
/// obstacle alone needs about 0.03; splitting risk evenly doubles that.
pub fn fig6() -> SceneFile {
    let offset = [0.0, 0.0, 0.145 * 0.145];
    let mut s = SceneFile::new(2);
    s.obstacles.push(rect("near", -1.0, 1.0, -2.5, -0.5, offset));
    s.obstacles.push(rect("far", -1.0, 1.0, 5.0, 7.0, offset));
    s.trajectory = trajectory(&[[-3.0, 0.0], [3.0, 0.0]]);
    s
}

/// Contract used with [`fig7`].
pub const FIG7_CONTRACT: f64 = 0.3;
pub const FIG7_WALLS: usize = 16;
const FIG7_REACH: f64 = 0.961;

fn fig7_point(k: usize) -> [f64; 2] {
    let th = 2.0 * std::f64::consts::PI * k as f64 / FIG7_WALLS as f64;
    [FIG7_REACH * th.cos(), FIG7_REACH * th.sin()]
}

/// A robot in a ring of walls probing one wall per stage. Each excursion
/// certifies just under the contract on its own.
pub fn fig7() -> SceneFile {
    let mut s = SceneFile::new(2);
    for k in 0..FIG7_WALLS {
        let th = 2.0 * std::f64::consts::PI * k as f64 / FIG7_WALLS as f64;
        s.obstacles.push(ObstacleSpec {
            id: format!("wall{k:02}"),
            faces: vec![face([-th.cos(), -th.sin(), 1.0], [1e-5, 1e-5, 0.02 * 0.02])],
            joint_sigma: None,
        });
    }
    let stage = |k: usize| wp(&[[0.0, 0.0], fig7_point(k), [0.0, 0.0]]);
    s.online = Some(OnlineSpec {
        contract_eps: FIG7_CONTRACT,
        eps_precision: Some(1e-4),
        initial_plan: stage(0),
        steps: (1..FIG7_WALLS)
            .map(|k| StepSpec {
                at_waypoint: 2,
                updates: vec![],
                new_plan: Some(stage(k)),
            })
            .collect(),
    });
    s
}

/// Contract used with [`fig9`].
pub const FIG9_CONTRACT: f64 = 0.01;

fn fig9_with_update(offset_sd: f64) -> SceneFile {
    let mut s = SceneFile::new(2);
    s.obstacles.push(rect("block", -1.0, 1.0, -1.0, 1.0, [0.0, 0.0, 0.2 * 0.2]));
    let initial = [[-4.0, 0.0], [-2.0, 0.0], [-2.0, 3.0], [2.0, 3.0], [2.0, 0.0], [4.0, 0.0]];
    s.trajectory = trajectory(&initial);
    s.online = Some(OnlineSpec {
        contract_eps: FIG9_CONTRACT,
        eps_precision: Some(1e-5),
        initial_plan: wp(&initial),
        steps: vec![StepSpec {
            at_waypoint: 1,
            updates: vec![UpdateSpec {
                obstacle_id: "block".into(),
                time: 1.0,
                faces: rect_faces(-1.0, 1.0, -1.0, 1.0, [0.0, 0.0, offset_sd * offset_sd]),
            }],
            new_plan: Some(wp(&[[-2.0, 0.0], [-2.0, 1.5], [2.0, 1.5], [2.0, 0.0], [4.0, 0.0]])),
        }],
    });
    s
}

/// A detour around an uncertain block; after a close look the block's
/// posterior tightens and the shorter path becomes affordable.
pub fn fig9() -> SceneFile {
    fig9_with_update(0.05)
}

/// [`fig9`] with an observation that widens the posterior instead.
pub fn fig9_widened() -> SceneFile {
    fig9_with_update(0.3)
}

pub const BOX_EPS_SAFE: f64 = 0.005;
/// x-range of the narrow and the wide opening in the top wall.
pub const BOX_NARROW_EXIT: (f64, f64) = (-3.5, -2.0);
pub const BOX_WIDE_EXIT: (f64, f64) = (1.0, 4.0);
pub const BOX_TOP_WALL: (f64, f64) = (5.0, 5.5);

/// A walled room with a narrow and a wide opening in the top wall.
pub fn box_two_exits() -> SceneFile {
    let sig = [0.0005, 0.0005, 0.04];
    let (t0, t1) = BOX_TOP_WALL;
    let mut s = SceneFile::new(2);
    s.obstacles = vec![
        rect("left", -5.5, -5.0, -5.5, 5.5, sig),
        rect("right", 5.0, 5.5, -5.5, 5.5, sig),
        rect("bottom", -5.5, 5.5, -5.5, -5.0, sig),
        rect("top_left", -5.5, BOX_NARROW_EXIT.0, t0, t1, sig),
        rect("top_mid", BOX_NARROW_EXIT.1, BOX_WIDE_EXIT.0, t0, t1, sig),
        rect("top_right", BOX_WIDE_EXIT.1, 5.5, t0, t1, sig),
    ];
    s.planner = Some(PlannerSpec {
        start: vec![0.0, -2.0],
        goal: vec![0.0, 8.0],
        eps_safe: BOX_EPS_SAFE,
        workspace: BoundsSpec {
            min: vec![-6.0, -6.0],
            max: vec![6.0, 9.0],
        },
        eps_precision: Some(1e-4),
        step_size: None,
        goal_bias: None,
        goal_radius: None,
        max_iterations: Some(5000),
    });
    s
}

/// Three boxes passed at a distance of several standard deviations.
pub fn extreme_three() -> SceneFile {
    let offset = [0.0, 0.0, 0.01];
    let mut s = SceneFile::new(2);
    s.obstacles = vec![
        rect("desk", -1.0, 1.0, 0.55, 1.5, offset),
        rect("chair", 2.0, 3.0, -1.5, -0.55, offset),
        rect("shelf", 4.5, 5.5, 0.55, 1.5, offset),
    ];
    s.trajectory = trajectory(&[[-2.0, 0.0], [6.5, 0.0]]);
    s
}

/// Obstacles far from a short trajectory.
pub fn distant(n: usize) -> SceneFile {
    let mut s = SceneFile::new(2);
    for i in 0..n {
        let x = 20.0 * i as f64;
        s.obstacles.push(rect(&format!("d{i}"), x, x + 1.0, 50.0, 51.0, [1e-3, 1e-3, 1e-3]));
    }
    s.trajectory = trajectory(&[[0.0, 0.0], [1.0, 0.0]]);
    s
}

/// A single uncertain halfplane.
pub fn coverage_one_face() -> SceneFile {
    let mut s = SceneFile::new(2);
    s.obstacles.push(ObstacleSpec {
        id: "halfplane".into(),
        faces: vec![face([1.0, 0.2, -1.0], [0.01, 0.02, 0.03])],
        joint_sigma: None,
    });
    s
}

/// A triangle with correlated face covariances.
pub fn coverage_three_face() -> SceneFile {
    let sig = |a: f64, b: f64, c: f64| FaceSpec {
        mu: None,
        sigma: Some(vec![a, 0.3 * a, 0.0, 0.3 * a, b, 0.2 * c, 0.0, 0.2 * c, c]),
        cloud: None,
    };
    let faces = [([0.0, -1.0, -0.5], (0.004, 0.002, 0.01)),
        ([0.866, 0.5, -0.5], (0.003, 0.005, 0.02)),
        ([-0.866, 0.5, -0.5], (0.006, 0.003, 0.015))]
    .iter()
    .map(|&(mu, (a, b, c))| FaceSpec {
        mu: Some(mu.to_vec()),
        ..sig(a, b, c)
    })
    .collect();
    let mut s = SceneFile::new(2);
    s.obstacles.push(ObstacleSpec {
        id: "triangle".into(),
        faces,
        joint_sigma: None,
    });
    s
}

/// A square with anisotropic face covariances.
pub fn coverage_four_face() -> SceneFile {
    let mut s = SceneFile::new(2);
    s.obstacles.push(ObstacleSpec {
        id: "square".into(),
        faces: vec![
            face([1.0, 0.0, -1.0], [0.002, 0.001, 0.01]),
            face([-1.0, 0.0, -1.0], [0.001, 0.003, 0.02]),
            face([0.0, 1.0, -1.0], [0.004, 0.001, 0.005]),
            face([0.0, -1.0, -1.0], [0.001, 0.002, 0.03]),
        ],
        joint_sigma: None,
    });
    s
}

/// A square whose faces are measured as noisy points.
pub fn clouds() -> SceneFile {
    // no prior variance on the pinned (largest) coordinate
    let prior = |mu: [f64; 3]| {
        let pin = if mu[0].abs() >= mu[1].abs() { 0 } else { 1 };
        let mut sigma = vec![0.0; 9];
        for i in (0..3).filter(|&i| i != pin) {
            sigma[4 * i] = 0.05;
        }
        PriorSpec { mu: mu.to_vec(), sigma }
    };
    let side = |pts: Vec<[f64; 2]>, mu: [f64; 3]| FaceSpec {
        mu: None,
        sigma: None,
        cloud: Some(CloudSpec {
            points: wp(&pts),
            noise_sd: 0.02,
            prior: prior(mu),
        }),
    };
    // deterministic jitter in ±0.01
    let jitter = |i: usize| ((i * 7919) % 21) as f64 * 1e-3 - 0.01;
    let along = |f: &dyn Fn(f64, f64) -> [f64; 2]| -> Vec<[f64; 2]> {
        (0..8).map(|i| f(-0.9 + 0.25 * i as f64, jitter(i))).collect()
    };
    let faces = vec![
        side(along(&|t, e| [1.0 + e, t]), [1.0, 0.0, -0.8]),
        side(along(&|t, e| [-1.0 + e, t]), [-1.0, 0.0, -0.8]),
        side(along(&|t, e| [t, 1.0 + e]), [0.0, 1.0, -0.8]),
        side(along(&|t, e| [t, -1.0 + e]), [0.0, -1.0, -0.8]),
    ];
    let mut s = SceneFile::new(2);
    s.obstacles.push(ObstacleSpec {
        id: "scanned".into(),
        faces,
        joint_sigma: None,
    });
    s.trajectory = trajectory(&[[-3.0, 1.6], [3.0, 1.6]]);
    s
}

/// Every bundled fixture with its file name.
pub fn all() -> Vec<(&'static str, SceneFile)> {
    vec![
        ("fig6.json", fig6()),
        ("fig7.json", fig7()),
        ("fig9.json", fig9()),
        ("fig9_widened.json", fig9_widened()),
        ("box_two_exits.json", box_two_exits()),
        ("extreme_three.json", extreme_three()),
        ("distant.json", distant(5)),
        ("coverage_one_face.json", coverage_one_face()),
        ("coverage_three_face.json", coverage_three_face()),
        ("coverage_four_face.json", coverage_four_face()),
        ("clouds.json", clouds()),
    ]
}
