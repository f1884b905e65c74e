//! World stepping, event detection and reward.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{RdarError, Result};
use crate::geometry::Vec2;
use crate::scenario::{agent_state_at, ScenarioSpec};
use crate::scene::{is_served, LightPhase, SceneState, STOPPED_SPEED};

/// Longitudinal accelerations selectable by the driving policy (m/s²).
pub const ACCEL_BINS: [f64; 6] = [-4.0, -2.0, -0.5, 0.0, 1.0, 2.0];
pub const N_ACTIONS: usize = ACCEL_BINS.len();
pub const V_MAX: f64 = 15.0;
pub const OFF_ROAD_LATERAL: f64 = 2.5;
/// Largest possible |Δaccel| between two bins.
pub const MAX_ACCEL_CHANGE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct DrivingAction {
    accel_bin: usize,
}

impl DrivingAction {
    pub fn new(accel_bin: usize) -> Result<Self> {
        if accel_bin >= N_ACTIONS {
            return Err(RdarError::Range(format!("accel bin {accel_bin} out of range")));
        }
        Ok(DrivingAction { accel_bin })
    }

    pub fn bin(self) -> usize {
        self.accel_bin
    }

    pub fn accel(self) -> f64 {
        ACCEL_BINS[self.accel_bin]
    }

    /// The bin whose acceleration equals `a` exactly, if any.
    pub fn from_accel(a: f64) -> Option<Self> {
        ACCEL_BINS
            .iter()
            .position(|&b| b == a)
            .map(|accel_bin| DrivingAction { accel_bin })
    }
}

impl TryFrom<usize> for DrivingAction {
    type Error = RdarError;
    fn try_from(b: usize) -> Result<Self> {
        DrivingAction::new(b)
    }
}

impl From<DrivingAction> for usize {
    fn from(a: DrivingAction) -> usize {
        a.accel_bin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Events {
    pub collision: bool,
    pub off_road: bool,
    pub ran_red_light: bool,
    pub skipped_stop_line: bool,
}

impl Events {
    pub fn is_empty(&self) -> bool {
        *self == Events::default()
    }

    pub fn union(self, o: Events) -> Events {
        Events {
            collision: self.collision || o.collision,
            off_road: self.off_road || o.off_road,
            ran_red_light: self.ran_red_light || o.ran_red_light,
            skipped_stop_line: self.skipped_stop_line || o.skipped_stop_line,
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.collision {
            v.push("collision");
        }
        if self.off_road {
            v.push("off_road");
        }
        if self.ran_red_light {
            v.push("ran_red_light");
        }
        if self.skipped_stop_line {
            v.push("skipped_stop_line");
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub progress: f64,
    pub collision: f64,
    pub off_road: f64,
    pub red_light: f64,
    pub stop_line: f64,
    pub jerk: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            progress: 1.0,
            collision: 100.0,
            off_road: 20.0,
            red_light: 20.0,
            stop_line: 10.0,
            jerk: 0.5,
        }
    }
}

impl RewardWeights {
    /// Upper bound on |r| for a single step of length `dt`.
    pub fn step_bound(&self, dt: f64) -> f64 {
        self.progress * V_MAX * dt
            + self.collision
            + self.off_road
            + self.red_light
            + self.stop_line
            + self.jerk * MAX_ACCEL_CHANGE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_scene: SceneState,
    pub reward: f64,
    pub events: Events,
    pub done: bool,
}

/// Pure-pursuit curvature towards the route point `lookahead` metres ahead.
fn pursuit_curvature(scene: &SceneState, lookahead: f64) -> f64 {
    let target = scene.route.waypoints.point_at(scene.ego.route_progress + lookahead);
    let local = scene.ego.to_local(target);
    let d2 = local.dot(local);
    if d2 < 1e-12 {
        0.0
    } else {
        2.0 * local.y / d2
    }
}

pub fn step(scene: &SceneState, action: DrivingAction, spec: &ScenarioSpec) -> Result<StepOutcome> {
    step_with(scene, action, spec, &RewardWeights::default())
}

pub fn step_with(
    scene: &SceneState,
    action: DrivingAction,
    spec: &ScenarioSpec,
    weights: &RewardWeights,
) -> Result<StepOutcome> {
    if scene.terminal || scene.time_index >= spec.horizon {
        return Err(RdarError::Lifecycle(format!(
            "cannot step a finished episode (t={})",
            scene.time_index
        )));
    }
    let dt = scene.dt;
    let a = action.accel();
    let ego = scene.ego;
    let speed = (ego.speed + a * dt).clamp(0.0, V_MAX);
    let dist = speed * dt;

    let mut next_ego = ego;
    next_ego.speed = speed;
    // effective acceleration, so braking at rest is not counted as motion
    next_ego.accel = (speed - ego.speed) / dt;
    if dist > 0.0 {
        let kappa = pursuit_curvature(scene, (0.8 * speed).max(4.0));
        let h0 = ego.heading;
        let h1 = h0 + kappa * dist;
        let delta = if kappa.abs() < 1e-9 {
            Vec2::from_angle(h0) * dist
        } else {
            Vec2::new(h1.sin() - h0.sin(), h0.cos() - h1.cos()) * (1.0 / kappa)
        };
        next_ego.position = ego.position + delta;
        next_ego.heading = crate::geometry::wrap_angle(h1);
        next_ego.curvature = kappa;
        next_ego.route_progress = scene
            .route
            .waypoints
            .project_window(next_ego.position, ego.route_progress - 5.0, ego.route_progress + dist + 5.0)
            .s;
    }
    if speed < STOPPED_SPEED {
        next_ego.last_stop_progress = Some(next_ego.route_progress);
    }

    let t1 = scene.time_index + 1;
    let mut agents = scene.agents.clone();
    for (i, track) in spec.scripted_tracks.iter().enumerate() {
        agents[track.slot] = agent_state_at(spec, i, t1);
    }
    let mut next = SceneState {
        ego: next_ego,
        agents,
        route: scene.route.clone(),
        time_index: t1,
        dt,
        terminal: false,
    };

    let mut events = detect_infractions(scene, &next);
    events.collision = detect_collision(&next);
    let reward = compute_reward_with(scene, &next, &events, weights);
    let done = events.collision || t1 >= spec.horizon;
    next.terminal = done;
    Ok(StepOutcome {
        next_scene: next,
        reward,
        events,
        done,
    })
}

pub fn detect_collision(scene: &SceneState) -> bool {
    let ego = scene.ego.rect();
    scene
        .agents
        .iter()
        .filter(|a| a.exists)
        .any(|a| ego.intersects(&a.rect()))
}

/// Off-road, red-light and stop-line events for the transition
/// `prev -> next`. The collision flag is left unset.
pub fn detect_infractions(prev: &SceneState, next: &SceneState) -> Events {
    let (p0, p1) = (prev.ego.route_progress, next.ego.route_progress);
    let crossed = |s: f64| p0 < s && s <= p1;
    let ran_red_light = next
        .route
        .traffic_lights
        .iter()
        .any(|l| crossed(l.position) && l.phase_at(prev.time()) == LightPhase::Red);
    let skipped_stop_line = next
        .route
        .stop_lines
        .iter()
        .any(|&s| crossed(s) && !is_served(s, prev.ego.last_stop_progress));
    Events {
        collision: false,
        off_road: next.lateral_offset().abs() > OFF_ROAD_LATERAL,
        ran_red_light,
        skipped_stop_line,
    }
}

pub fn compute_reward(prev: &SceneState, next: &SceneState, events: &Events) -> f64 {
    compute_reward_with(prev, next, events, &RewardWeights::default())
}

pub fn compute_reward_with(prev: &SceneState, next: &SceneState, events: &Events, w: &RewardWeights) -> f64 {
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    w.progress * (next.ego.route_progress - prev.ego.route_progress)
        - w.collision * ind(events.collision)
        - w.off_road * ind(events.off_road)
        - w.red_light * ind(events.ran_red_light)
        - w.stop_line * ind(events.skipped_stop_line)
        - w.jerk * (next.ego.accel - prev.ego.accel).abs()
}

/// One executed step as seen by the comfort metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    pub accel: f64,
    pub speed: f64,
    pub curvature: f64,
}

impl MotionSample {
    pub fn straight(action: DrivingAction, speed: f64) -> Self {
        MotionSample {
            accel: action.accel(),
            speed,
            curvature: 0.0,
        }
    }

    pub fn lateral_accel(&self) -> f64 {
        self.curvature * self.speed * self.speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComfortConfig {
    pub long_bound: f64,
    pub lat_bound: f64,
    pub jerk_bound: f64,
    pub w_long: f64,
    pub w_lat: f64,
    pub w_long_jerk: f64,
    pub w_lat_jerk: f64,
}

impl Default for ComfortConfig {
    fn default() -> Self {
        ComfortConfig {
            long_bound: 4.0,
            lat_bound: 3.0,
            jerk_bound: 30.0,
            w_long: 0.4,
            w_lat: 0.3,
            w_long_jerk: 0.15,
            w_lat_jerk: 0.15,
        }
    }
}

/// Smoothness of a driven trace in [0, 1], 1 meaning no acceleration at all.
pub fn comfort_score(trace: &[MotionSample], dt: f64, cfg: &ComfortConfig) -> Result<f64> {
    if trace.is_empty() {
        return Err(RdarError::Argument("comfort of an empty trace".into()));
    }
    if !(dt > 0.0) {
        return Err(RdarError::Argument("dt must be positive".into()));
    }
    let n = trace.len() as f64;
    let mean_long = trace.iter().map(|m| m.accel.abs()).sum::<f64>() / n;
    let mean_lat = trace.iter().map(|m| m.lateral_accel().abs()).sum::<f64>() / n;
    let (jl, jt) = if trace.len() > 1 {
        let m = (trace.len() - 1) as f64;
        let jl = trace.windows(2).map(|w| (w[1].accel - w[0].accel).abs() / dt).sum::<f64>() / m;
        let jt = trace
            .windows(2)
            .map(|w| (w[1].lateral_accel() - w[0].lateral_accel()).abs() / dt)
            .sum::<f64>()
            / m;
        (jl, jt)
    } else {
        (0.0, 0.0)
    };
    let wsum = cfg.w_long + cfg.w_lat + cfg.w_long_jerk + cfg.w_lat_jerk;
    let weighted = (cfg.w_long * mean_long / cfg.long_bound
        + cfg.w_lat * mean_lat / cfg.lat_bound
        + cfg.w_long_jerk * jl / cfg.jerk_bound
        + cfg.w_lat_jerk * jt / cfg.jerk_bound)
        / wsum;
    Ok((1.0 - weighted).clamp(0.0, 1.0))
}

/// One line of an exported rollout trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub scene_digest: String,
    pub action: DrivingAction,
    pub reward: f64,
    pub events: Vec<String>,
}

impl TraceRecord {
    pub fn new(prev: &SceneState, action: DrivingAction, outcome: &StepOutcome) -> Result<Self> {
        Ok(TraceRecord {
            t: prev.time_index,
            scene_digest: scene_digest(prev)?,
            action,
            reward: outcome.reward,
            events: outcome.events.names().into_iter().map(String::from).collect(),
        })
    }
}

/// CRC-32 of the scene's canonical JSON, as 8 hex digits.
pub fn scene_digest(scene: &SceneState) -> Result<String> {
    let bytes = serde_json::to_vec(scene)?;
    Ok(format!("{:08x}", crc32fast::hash(&bytes)))
}

pub fn write_trace_jsonl<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
