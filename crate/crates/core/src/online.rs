//! Absolute-safety accounting for plans that change during execution.
//!
//! A [`RiskLedger`] tracks risk already spent on the executed prefix and the
//! certified risk of the committed remainder. A plan or replan is accepted
//! only when `spent + certified ≤ contract`. Amounts are held as integer
//! multiples of 10⁻¹⁸ rounded conservatively, so transfers between the two
//! balances conserve their sum exactly.
//!
//! Risk is attributed to an executed prefix by recertifying the remaining
//! suffix under the beliefs held at commitment, capping each obstacle at its
//! committed ε. The difference moves from the future balance to `spent`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::certify::{
    find_maximal_shadow, find_maximal_shadow_set, sum_round_up, CertifyError, SafetyCertificate,
    SearchConfig,
};
use crate::geom::{Point, Polyline};
use crate::oracle::{count_trials_multi, McReport};
use crate::pgdf::{sample_obstacle, GaussianFace, PgdfError, PgdfObstacle};

/// Ledger resolution: one unit is 10⁻¹⁸ of risk.
pub const UNITS_PER_RISK: f64 = 1e18;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OnlineError {
    #[error(transparent)]
    Certify(#[from] CertifyError),
    #[error(transparent)]
    Pgdf(#[from] PgdfError),
    #[error("contract risk {0} must lie in (0, 1]")]
    BadContract(f64),
    #[error("no plan has been committed")]
    NoActivePlan,
    #[error("executed path is not a prefix of the committed trajectory: {0}")]
    NotPrefix(String),
    #[error("new plan starts at {got:?}, robot is at {at:?}")]
    PlanStart { at: Vec<f64>, got: Vec<f64> },
    #[error("update names unknown obstacle {0}")]
    UnknownObstacle(String),
    #[error("initial plan rejected: risk {total} exceeds contract {contract}")]
    InitialPlanRejected { total: f64, contract: f64 },
    #[error("step {step}: waypoint {index} is behind the robot or past the plan")]
    BadWaypoint { step: usize, index: usize },
}

fn units_up(x: f64) -> u128 {
    if !(x > 0.0) {
        return 0;
    }
    let mut u = (x * UNITS_PER_RISK).ceil() as u128;
    while (u as f64) / UNITS_PER_RISK < x {
        u += 1;
    }
    u
}

fn units_down(x: f64) -> u128 {
    if !(x > 0.0) {
        return 0;
    }
    let mut u = (x * UNITS_PER_RISK).floor() as u128;
    while u > 0 && (u as f64) / UNITS_PER_RISK > x {
        u -= 1;
    }
    u
}

fn risk(u: u128) -> f64 {
    u as f64 / UNITS_PER_RISK
}

fn same_point(a: &Point, b: &Point) -> bool {
    let scale = a
        .coords()
        .iter()
        .chain(b.coords())
        .fold(1.0_f64, |m, c| m.max(c.abs()));
    a.distance(b) <= 1e-9 * scale
}

/// Replacement posteriors for one obstacle's faces.
#[derive(Clone, Debug)]
pub struct ObservationUpdate {
    pub obstacle_id: String,
    pub faces: Vec<GaussianFace>,
    pub time: f64,
}

/// Applies updates wholesale; untouched obstacles keep their beliefs.
pub fn apply_updates(
    beliefs: &[PgdfObstacle],
    updates: &[ObservationUpdate],
) -> Result<Vec<PgdfObstacle>, OnlineError> {
    let mut out = beliefs.to_vec();
    for u in updates {
        let slot = out
            .iter_mut()
            .find(|o| o.id() == u.obstacle_id)
            .ok_or_else(|| OnlineError::UnknownObstacle(u.obstacle_id.clone()))?;
        *slot = slot.with_faces(u.faces.clone())?;
    }
    Ok(out)
}

/// Position of the robot along a committed trajectory.
#[derive(Clone, Debug)]
struct Cursor {
    committed: Polyline,
    /// First committed waypoint not yet reached.
    next: usize,
    position: Point,
}

impl Cursor {
    fn new(committed: Polyline) -> Self {
        Self {
            position: committed.first(),
            committed,
            next: 1,
        }
    }

    fn is_complete(&self) -> bool {
        self.next >= self.committed.len()
    }

    fn remaining(&self) -> Polyline {
        let mut pts = vec![self.position];
        pts.extend_from_slice(&self.committed.waypoints()[self.next..]);
        Polyline::new(pts).expect("non-empty")
    }

    /// Walks along `executed`, which must start at the current position and
    /// follow the committed waypoints; its last point may stop mid-segment.
    fn walk(&self, executed: &Polyline) -> Result<Cursor, OnlineError> {
        if !same_point(&executed.first(), &self.position) {
            return Err(OnlineError::NotPrefix("does not start at the current position".into()));
        }
        let wp = self.committed.waypoints();
        let mut next = self.next;
        let mut position = self.position;
        let pts = executed.waypoints();
        for (k, p) in pts.iter().enumerate().skip(1) {
            if next < wp.len() && same_point(p, &wp[next]) {
                position = wp[next];
                next += 1;
            } else if same_point(p, &position) {
                continue;
            } else if k == pts.len() - 1 && next < wp.len() && on_segment(p, &position, &wp[next]) {
                position = *p;
            } else {
                return Err(OnlineError::NotPrefix(format!("point {k} leaves the trajectory")));
            }
        }
        Ok(Cursor {
            committed: self.committed.clone(),
            next,
            position,
        })
    }

    /// Path from the current position through committed waypoint `index`.
    fn to_waypoint(&self, index: usize) -> Option<Polyline> {
        if index + 1 < self.next || index >= self.committed.len() {
            return None;
        }
        let mut pts = vec![self.position];
        if index >= self.next {
            pts.extend_from_slice(&self.committed.waypoints()[self.next..=index]);
        }
        Some(Polyline::new(pts).expect("non-empty"))
    }
}

fn on_segment(p: &Point, a: &Point, b: &Point) -> bool {
    let len = a.distance(b);
    len > 0.0 && (a.distance(p) + p.distance(b) - len).abs() <= 1e-9 * len.max(1.0)
}

#[derive(Clone, Debug)]
struct ActivePlan {
    cursor: Cursor,
    beliefs: Vec<PgdfObstacle>,
    /// Per-obstacle certified ε for the remaining trajectory, in belief order.
    caps: Vec<f64>,
    eps_p: f64,
    search: SearchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LedgerEventKind {
    Commit { total_eps: f64 },
    Reject { eps1: f64, eps2: f64 },
    Advance { transferred: f64, remaining_waypoints: usize },
    Complete { transferred: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: LedgerEventKind,
    pub spent: f64,
    pub committed_future: f64,
}

/// Outcome of a commit or replan request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub accepted: bool,
    /// Risk already spent.
    pub eps1: f64,
    /// Certified risk of the proposed remainder.
    pub eps2: f64,
}

/// Online risk budget: `spent + committed_future ≤ contract` at all times.
#[derive(Clone, Debug)]
pub struct RiskLedger {
    contract: u128,
    contract_eps: f64,
    spent: u128,
    future: u128,
    active: Option<ActivePlan>,
    history: Vec<LedgerEvent>,
}

impl RiskLedger {
    pub fn new(contract_eps: f64) -> Result<Self, OnlineError> {
        if !(contract_eps > 0.0 && contract_eps <= 1.0) {
            return Err(OnlineError::BadContract(contract_eps));
        }
        Ok(Self {
            contract: units_down(contract_eps),
            contract_eps,
            spent: 0,
            future: 0,
            active: None,
            history: Vec::new(),
        })
    }

    pub fn contract_eps(&self) -> f64 {
        self.contract_eps
    }

    pub fn spent(&self) -> f64 {
        risk(self.spent)
    }

    pub fn committed_future(&self) -> f64 {
        risk(self.future)
    }

    /// `spent + committed_future` in ledger units.
    pub fn balance_units(&self) -> u128 {
        self.spent + self.future
    }

    pub fn invariant_holds(&self) -> bool {
        self.spent + self.future <= self.contract
    }

    pub fn history(&self) -> &[LedgerEvent] {
        &self.history
    }

    pub fn history_json(&self) -> String {
        serde_json::to_string_pretty(&self.history).expect("history serializes")
    }

    /// Current position, if a plan has been committed.
    pub fn position(&self) -> Option<Point> {
        self.active.as_ref().map(|a| a.cursor.position)
    }

    /// Remaining committed trajectory, starting at the current position.
    pub fn remaining(&self) -> Option<Polyline> {
        self.active.as_ref().map(|a| a.cursor.remaining())
    }

    pub fn plan_complete(&self) -> bool {
        self.active.as_ref().is_none_or(|a| a.cursor.is_complete())
    }

    /// Beliefs under which the active plan was certified.
    pub fn committed_beliefs(&self) -> Option<&[PgdfObstacle]> {
        self.active.as_ref().map(|a| a.beliefs.as_slice())
    }

    fn log(&mut self, kind: LedgerEventKind) {
        let seq = self.history.len() as u64;
        self.history.push(LedgerEvent {
            seq,
            kind,
            spent: self.spent(),
            committed_future: self.committed_future(),
        });
    }

    fn decide(&self, cert: &SafetyCertificate) -> (Decision, u128) {
        let need = units_up(cert.total_eps);
        let ok = self.spent.checked_add(need).is_some_and(|s| s <= self.contract);
        (
            Decision {
                accepted: ok,
                eps1: self.spent(),
                eps2: cert.total_eps,
            },
            need,
        )
    }

    /// Commits `trajectory` with its certificate under `beliefs`. Accepted
    /// iff `spent + cert.total_eps ≤ contract`; a rejection changes nothing
    /// but the history. The trajectory must start at the current position.
    pub fn commit_plan(
        &mut self,
        trajectory: &Polyline,
        beliefs: &[PgdfObstacle],
        cert: &SafetyCertificate,
        eps_p: f64,
        search: &SearchConfig,
    ) -> Result<Decision, OnlineError> {
        if let Some(at) = self.position() {
            if !same_point(&at, &trajectory.first()) {
                return Err(OnlineError::PlanStart {
                    at: at.coords().to_vec(),
                    got: trajectory.first().coords().to_vec(),
                });
            }
        }
        let digest = crate::certify::volume_digest(trajectory);
        if digest != cert.volume_digest {
            return Err(CertifyError::DigestMismatch {
                recorded: cert.volume_digest.clone(),
                actual: digest,
            }
            .into());
        }
        let (decision, need) = self.decide(cert);
        if !decision.accepted {
            self.log(LedgerEventKind::Reject {
                eps1: decision.eps1,
                eps2: decision.eps2,
            });
            return Ok(decision);
        }
        let caps = beliefs
            .iter()
            .map(|o| cert.entry(o.id()).map(|c| c.eps_i).unwrap_or(1.0))
            .collect();
        self.future = need;
        self.active = Some(ActivePlan {
            cursor: Cursor::new(trajectory.clone()),
            beliefs: beliefs.to_vec(),
            caps,
            eps_p,
            search: *search,
        });
        self.log(LedgerEventKind::Commit {
            total_eps: cert.total_eps,
        });
        Ok(decision)
    }

    /// Moves risk of the executed prefix from the future balance to `spent`.
    pub fn advance(&mut self, executed: &Polyline) -> Result<(), OnlineError> {
        let active = self.active.as_ref().ok_or(OnlineError::NoActivePlan)?;
        let cursor = active.cursor.walk(executed)?;
        if cursor.next == active.cursor.next && same_point(&cursor.position, &active.cursor.position) {
            return Ok(());
        }
        let (new_future, caps) = if cursor.is_complete() {
            (0, vec![0.0; active.caps.len()])
        } else {
            let suffix = cursor.remaining();
            let per = active.eps_p / active.beliefs.len().max(1) as f64;
            let mut caps = Vec::with_capacity(active.caps.len());
            for (o, &cap) in active.beliefs.iter().zip(&active.caps) {
                let c = find_maximal_shadow(o, &suffix, per, &active.search)?;
                caps.push(c.eps_i.min(cap));
            }
            (units_up(sum_round_up(caps.iter().copied())).min(self.future), caps)
        };
        let transferred = self.future - new_future;
        self.spent += transferred;
        self.future = new_future;
        let complete = cursor.is_complete();
        let remaining_waypoints = cursor.committed.len() - cursor.next;
        let active = self.active.as_mut().expect("checked above");
        active.cursor = cursor;
        active.caps = caps;
        self.log(if complete {
            LedgerEventKind::Complete {
                transferred: risk(transferred),
            }
        } else {
            LedgerEventKind::Advance {
                transferred: risk(transferred),
                remaining_waypoints,
            }
        });
        Ok(())
    }

    /// Executes the rest of the committed trajectory.
    pub fn execute_remaining(&mut self) -> Result<(), OnlineError> {
        let active = self.active.as_ref().ok_or(OnlineError::NoActivePlan)?;
        let end = active.cursor.committed.len() - 1;
        self.advance_to_waypoint(end)
    }

    /// Executes the committed trajectory up to and including waypoint `index`.
    pub fn advance_to_waypoint(&mut self, index: usize) -> Result<(), OnlineError> {
        let active = self.active.as_ref().ok_or(OnlineError::NoActivePlan)?;
        let path = active
            .cursor
            .to_waypoint(index)
            .ok_or_else(|| OnlineError::NotPrefix(format!("waypoint {index} is not ahead")))?;
        self.advance(&path)
    }
}

/// Certifies `remaining` under updated beliefs and commits it when
/// `spent + ε₂ ≤ contract`; otherwise the previous plan stays active.
pub fn replan_online(
    ledger: &mut RiskLedger,
    beliefs: &[PgdfObstacle],
    remaining: &Polyline,
    eps_p: f64,
    search: &SearchConfig,
) -> Result<(SafetyCertificate, Decision), OnlineError> {
    let cert = find_maximal_shadow_set(beliefs, remaining, eps_p, search)?;
    let decision = ledger.commit_plan(remaining, beliefs, &cert, eps_p, search)?;
    Ok((cert, decision))
}

/// One scripted decision point of an online policy.
#[derive(Clone, Debug)]
pub struct PolicyStep {
    /// Waypoint of the active committed trajectory at which this step fires.
    pub at_waypoint: usize,
    pub updates: Vec<ObservationUpdate>,
    /// Proposed replacement for the rest of the trajectory. Without one, the
    /// remainder of the active plan is recertified under the new beliefs.
    pub new_plan: Option<Polyline>,
}

#[derive(Clone, Debug)]
pub struct PolicyScript {
    pub initial_plan: Polyline,
    pub steps: Vec<PolicyStep>,
}

#[derive(Clone, Copy, Debug)]
pub struct OnlineConfig {
    pub contract_eps: f64,
    pub eps_p: f64,
    pub search: SearchConfig,
    /// Without the ledger a replan is accepted when its own certificate is
    /// within the contract, ignoring risk already spent.
    pub ledger_enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub accepted: bool,
    /// Spent risk at the decision; absent when the ledger is disabled.
    pub eps1: Option<f64>,
    pub eps2: f64,
}

/// Deterministic part of a policy run.
#[derive(Clone, Debug)]
pub struct PolicyRun {
    /// `paths[τ]`: the executed path when information stops after τ steps.
    pub paths: Vec<Polyline>,
    pub steps: Vec<StepRecord>,
    pub initial_eps: f64,
    pub final_beliefs: Vec<PgdfObstacle>,
    pub ledger: Option<RiskLedger>,
}

fn join(prefix: &Polyline, rest: &Polyline) -> Polyline {
    let mut p = prefix.clone();
    let skip = same_point(&prefix.last(), &rest.first()) as usize;
    for w in &rest.waypoints()[skip..] {
        p.push(*w);
    }
    p
}

/// Runs a script once, recording the path the robot would follow for every
/// stop time.
pub fn run_policy(
    obstacles: &[PgdfObstacle],
    script: &PolicyScript,
    cfg: &OnlineConfig,
) -> Result<PolicyRun, OnlineError> {
    let mut beliefs = obstacles.to_vec();
    let cert = find_maximal_shadow_set(&beliefs, &script.initial_plan, cfg.eps_p, &cfg.search)?;
    if cert.total_eps > cfg.contract_eps {
        return Err(OnlineError::InitialPlanRejected {
            total: cert.total_eps,
            contract: cfg.contract_eps,
        });
    }
    let mut ledger = if cfg.ledger_enabled {
        let mut l = RiskLedger::new(cfg.contract_eps)?;
        let d = l.commit_plan(&script.initial_plan, &beliefs, &cert, cfg.eps_p, &cfg.search)?;
        if !d.accepted {
            return Err(OnlineError::InitialPlanRejected {
                total: cert.total_eps,
                contract: cfg.contract_eps,
            });
        }
        Some(l)
    } else {
        None
    };
    let mut cursor = Cursor::new(script.initial_plan.clone());
    let mut executed = Polyline::point(cursor.position);
    let mut paths = vec![join(&executed, &script.initial_plan)];
    let mut records = Vec::new();

    for (k, step) in script.steps.iter().enumerate() {
        let leg = cursor
            .to_waypoint(step.at_waypoint)
            .ok_or(OnlineError::BadWaypoint {
                step: k,
                index: step.at_waypoint,
            })?;
        cursor = cursor.walk(&leg)?;
        if let Some(l) = ledger.as_mut() {
            l.advance(&leg)?;
        }
        executed = join(&executed, &leg);

        beliefs = apply_updates(&beliefs, &step.updates)?;
        let proposal = step.new_plan.clone().unwrap_or_else(|| cursor.remaining());
        if !same_point(&proposal.first(), &cursor.position) {
            return Err(OnlineError::PlanStart {
                at: cursor.position.coords().to_vec(),
                got: proposal.first().coords().to_vec(),
            });
        }
        let cert = find_maximal_shadow_set(&beliefs, &proposal, cfg.eps_p, &cfg.search)?;
        let (accepted, eps1) = match ledger.as_mut() {
            Some(l) => {
                let d = l.commit_plan(&proposal, &beliefs, &cert, cfg.eps_p, &cfg.search)?;
                (d.accepted, Some(d.eps1))
            }
            None => (cert.total_eps <= cfg.contract_eps, None),
        };
        if accepted {
            cursor = Cursor::new(proposal);
        }
        records.push(StepRecord {
            step: k,
            accepted,
            eps1,
            eps2: cert.total_eps,
        });
        paths.push(join(&executed, &cursor.remaining()));
    }
    if let Some(l) = ledger.as_mut() {
        l.execute_remaining()?;
    }
    Ok(PolicyRun {
        paths,
        steps: records,
        initial_eps: cert.total_eps,
        final_beliefs: beliefs,
        ledger,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopTimeReport {
    pub tau: usize,
    pub mc: McReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub contract_eps: f64,
    pub ledger_enabled: bool,
    pub initial_eps: f64,
    pub steps: Vec<StepRecord>,
    pub stop_times: Vec<StopTimeReport>,
    pub ledger_history: Option<Vec<LedgerEvent>>,
}

impl SimulationReport {
    /// The full policy, with no early stop.
    pub fn overall(&self) -> &McReport {
        &self.stop_times.last().expect("at least the initial stop time").mc
    }

    /// Largest `(p̂ - contract) / stderr` over stop times. A zero standard
    /// error falls back to the one a frequency equal to the contract has.
    pub fn worst_excess_in_stderr(&self) -> f64 {
        self.stop_times
            .iter()
            .map(|s| {
                let c = self.contract_eps;
                let se = match s.mc.stderr() {
                    se if se > 0.0 => se,
                    _ => (c * (1.0 - c) / s.mc.trials.max(1) as f64).sqrt(),
                };
                (s.mc.p_hat - self.contract_eps) / se
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Monte-Carlo collision frequency of the policy under every stop time.
///
/// Obstacles are drawn from the beliefs held after the last scripted update,
/// once per trial, and every stop-time path is checked against that draw.
pub fn simulate_policy(
    obstacles: &[PgdfObstacle],
    script: &PolicyScript,
    cfg: &OnlineConfig,
    trials: u64,
    seed: u64,
) -> Result<SimulationReport, OnlineError> {
    let run = run_policy(obstacles, script, cfg)?;
    let truth = &run.final_beliefs;
    let width = run.paths.len();
    let counts = count_trials_multi(trials, seed, width, |rng, acc| {
        let draws: Vec<_> = truth.iter().map(|o| sample_obstacle(o, rng)).collect();
        for (tau, path) in run.paths.iter().enumerate() {
            let hit = draws.iter().any(|d| {
                path.segments()
                    .any(|s| crate::geom::segment_hits_polytope(&s, &d.normals))
            });
            acc[tau] += hit as u64;
        }
    });
    Ok(SimulationReport {
        contract_eps: cfg.contract_eps,
        ledger_enabled: cfg.ledger_enabled,
        initial_eps: run.initial_eps,
        steps: run.steps,
        stop_times: counts
            .into_iter()
            .enumerate()
            .map(|(tau, hits)| StopTimeReport {
                tau,
                mc: McReport::from_counts(hits, trials, seed),
            })
            .collect(),
        ledger_history: run.ledger.map(|l| l.history().to_vec()),
    })
}
