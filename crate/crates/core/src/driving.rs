//! The frozen rule-based driving policy.
//!
//! Utilities per acceleration bin come from three rules: track the cruise
//! speed, stop before stop lines and red lights, and stay clear of visible
//! agents whose constant-velocity prediction enters the route corridor. Each
//! constraint penalty is non-decreasing in acceleration and zero for the
//! hardest braking bin. Utilities go through a softmax with temperature.
//!
//! Only slots whose exists flag is set are read, so masked agents cannot
//! influence the output.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec2;
use crate::scene::{
    SceneFeatures, ABSENT_DISTANCE, EGO_LENGTH, E_RED_LIGHT, E_SPEED, E_STOP_LINE, F_COS, F_LENGTH,
    F_POS_X, F_POS_Y, F_SIN, F_VEL_X, F_VEL_Y, F_WIDTH, N_MAX, ROUTE_POINTS,
};
use crate::sim::{DrivingAction, ACCEL_BINS, N_ACTIONS, V_MAX};

/// Probability of each acceleration bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub probs: [f64; N_ACTIONS],
}

impl ActionDistribution {
    /// Most likely bin; ties go to the stronger braking bin.
    pub fn argmax(&self) -> DrivingAction {
        let mut best = 0;
        for i in 1..N_ACTIONS {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        DrivingAction::new(best).expect("bin index in range")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub target_speed: f64,
    pub temperature: f64,
    /// Speed error (m/s) that costs one unit of utility.
    pub speed_scale: f64,
    /// Seconds of constant-velocity agent prediction.
    pub prediction_horizon: f64,
    pub corridor_half_width: f64,
    /// Longitudinal clearance kept to a conflicting agent (m).
    pub gap: f64,
    /// Deceleration assumed for the pessimistic agent forecast (m/s²).
    pub agent_brake: f64,
    /// Steps a candidate acceleration is held before the fallback brake.
    pub hold_steps: usize,
    /// Conflict penalty floor; exceeds the largest speed-tracking spread so
    /// a conflict always outweighs the wish to keep moving.
    pub conflict_base: f64,
    pub conflict_urgency: f64,
    /// Deceleration (m/s²) above which approaching a stop is penalized.
    pub comfortable_decel: f64,
    pub stop_penalty: f64,
    /// Centre stops this far before a stop line or light.
    pub stop_margin: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            target_speed: 10.0,
            temperature: 0.5,
            speed_scale: 2.0,
            prediction_horizon: 3.0,
            corridor_half_width: 2.5,
            gap: 2.0,
            agent_brake: 3.0,
            hold_steps: 2,
            conflict_base: 30.0,
            conflict_urgency: 10.0,
            comfortable_decel: 2.5,
            stop_penalty: 30.0,
            stop_margin: 1.0,
        }
    }
}

const DT: f64 = 0.2;
const MAX_BRAKE: f64 = 4.0;
const BRAKE_BIN: usize = 0;

/// The route features as segments with cached directions, for fast
/// projection of many predicted points.
struct RouteFrame {
    start: [Vec2; ROUTE_POINTS - 1],
    dir: [Vec2; ROUTE_POINTS - 1],
    len: [f64; ROUTE_POINTS - 1],
    cum: [f64; ROUTE_POINTS - 1],
}

impl RouteFrame {
    fn new(f: &SceneFeatures) -> Self {
        let mut rf = RouteFrame {
            start: [Vec2::ZERO; ROUTE_POINTS - 1],
            dir: [Vec2::ZERO; ROUTE_POINTS - 1],
            len: [0.0; ROUTE_POINTS - 1],
            cum: [0.0; ROUTE_POINTS - 1],
        };
        let mut acc = 0.0;
        for i in 0..ROUTE_POINTS - 1 {
            let a = Vec2::new(f.route[i][0], f.route[i][1]);
            let b = Vec2::new(f.route[i + 1][0], f.route[i + 1][1]);
            let d = b - a;
            let l = d.norm().max(1e-9);
            rf.start[i] = a;
            rf.dir[i] = d * (1.0 / l);
            rf.len[i] = l;
            rf.cum[i] = acc;
            acc += l;
        }
        rf
    }

    /// Arclength, signed lateral offset and unit direction of the closest
    /// segment; the end segments extend to infinity.
    fn project(&self, p: Vec2) -> (f64, f64, Vec2) {
        let last = ROUTE_POINTS - 2;
        let mut best = (f64::INFINITY, 0.0, 0.0, Vec2::ZERO);
        for i in 0..=last {
            let rel = p - self.start[i];
            let mut t = rel.dot(self.dir[i]);
            if i != 0 {
                t = t.max(0.0);
            }
            if i != last {
                t = t.min(self.len[i]);
            }
            let off = rel - self.dir[i] * t;
            let d2 = off.dot(off);
            if d2 < best.0 {
                best = (d2, self.cum[i] + t, self.dir[i].cross(rel), self.dir[i]);
            }
        }
        (best.1, best.2, best.3)
    }
}

/// Predicted occupancy of the corridor by one agent: for each prediction
/// step, the ego centre arclength at which the ego would come too close, or
/// `None` when the agent is outside the corridor or behind the ego.
fn conflict_limits(f: &SceneFeatures, slot: usize, route: &RouteFrame, ego_speed: f64, cfg: &PolicyConfig, steps: usize) -> Vec<Option<f64>> {
    let row = &f.agents[slot];
    let pos = Vec2::new(row[F_POS_X], row[F_POS_Y]);
    let vel = Vec2::new(row[F_VEL_X] + ego_speed, row[F_VEL_Y]);
    let facing = Vec2::new(row[F_COS], row[F_SIN]);
    let (len, wid) = (row[F_LENGTH], row[F_WIDTH]);
    let speed = vel.norm();
    let heading = if speed > 0.0 { vel * (1.0 / speed) } else { Vec2::ZERO };
    let limit_at = |p: Vec2| {
        let (s_a, lat, dir) = route.project(p);
        let c = dir.dot(facing).abs();
        let s = dir.cross(facing).abs();
        let half_lat = 0.5 * (len * s + wid * c);
        let half_lon = 0.5 * (len * c + wid * s);
        let in_corridor = lat.abs() - half_lat <= cfg.corridor_half_width;
        let ahead = s_a + half_lon >= -0.5 * EGO_LENGTH;
        (in_corridor && ahead).then(|| s_a - half_lon - cfg.gap - 0.5 * EGO_LENGTH)
    };
    (0..=steps)
        .map(|n| {
            let tau = n as f64 * DT;
            // The agent either keeps its velocity or brakes to a stop; the
            // ego has to be safe against both.
            let t_stop = (speed / cfg.agent_brake).min(tau);
            let braked = pos + heading * (speed * t_stop - 0.5 * cfg.agent_brake * t_stop * t_stop);
            match (limit_at(pos + vel * tau), limit_at(braked)) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            }
        })
        .collect()
}

/// Ego arclength after each step when holding `accel` for the configured
/// number of steps and braking fully afterwards.
fn ego_profile(v0: f64, accel: f64, cfg: &PolicyConfig, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let (mut s, mut v) = (0.0, v0);
    out.push(s);
    for n in 0..steps {
        let a = if n < cfg.hold_steps { accel } else { -MAX_BRAKE };
        v = (v + a * DT).clamp(0.0, V_MAX);
        s += v * DT;
        out.push(s);
    }
    out
}

/// Penalty for approaching a stop point `d` metres ahead with each bin.
fn stop_penalties(d: f64, v: f64, cfg: &PolicyConfig) -> [f64; N_ACTIONS] {
    let mut pen = [0.0; N_ACTIONS];
    for (b, &a) in ACCEL_BINS.iter().enumerate().skip(1) {
        let v1 = (v + a * DT).clamp(0.0, V_MAX);
        let r = d - cfg.stop_margin - v1 * DT;
        let need = if v1 == 0.0 {
            0.0
        } else if r <= 0.0 {
            f64::INFINITY
        } else {
            v1 * v1 / (2.0 * r)
        };
        if need > cfg.comfortable_decel {
            let excess = ((need - cfg.comfortable_decel) / MAX_BRAKE).min(1.0);
            pen[b] = cfg.stop_penalty * (1.0 + excess);
        }
    }
    pen
}

/// Whether full braking can still stop before arclength `d`.
fn can_stop_before(d: f64, v: f64) -> bool {
    let v1 = (v - MAX_BRAKE * DT).max(0.0);
    let r = d - v1 * DT;
    v1 == 0.0 || (r > 0.0 && v1 * v1 / (2.0 * r) <= MAX_BRAKE)
}

pub fn utilities(f: &SceneFeatures, cfg: &PolicyConfig) -> [f64; N_ACTIONS] {
    let v = f.ego[E_SPEED];
    let mut u = [0.0; N_ACTIONS];
    for (b, &a) in ACCEL_BINS.iter().enumerate() {
        let err = ((v + a).clamp(0.0, V_MAX) - cfg.target_speed) / cfg.speed_scale;
        u[b] = -err * err;
    }

    let d_stop = f.ego[E_STOP_LINE];
    if d_stop < ABSENT_DISTANCE {
        let p = stop_penalties(d_stop, v, cfg);
        (0..N_ACTIONS).for_each(|b| u[b] -= p[b]);
    }
    let d_red = f.ego[E_RED_LIGHT];
    if d_red < ABSENT_DISTANCE && can_stop_before(d_red, v) {
        let p = stop_penalties(d_red, v, cfg);
        (0..N_ACTIONS).for_each(|b| u[b] -= p[b]);
    }

    let visible: Vec<usize> = (0..N_MAX).filter(|&i| f.exists(i)).collect();
    if !visible.is_empty() {
        let route = RouteFrame::new(f);
        let steps = (cfg.prediction_horizon / DT).round() as usize;
        let profiles: Vec<Vec<f64>> = ACCEL_BINS.iter().map(|&a| ego_profile(v, a, cfg, steps)).collect();
        for slot in visible {
            let limits = conflict_limits(f, slot, &route, v, cfg, steps);
            for b in 0..N_ACTIONS {
                if b == BRAKE_BIN {
                    continue;
                }
                let hit = limits
                    .iter()
                    .zip(&profiles[b])
                    .position(|(lim, &s)| lim.map_or(false, |l| s >= l));
                if let Some(n) = hit {
                    let tau = n as f64 * DT;
                    u[b] -= cfg.conflict_base + cfg.conflict_urgency * (1.0 - tau / cfg.prediction_horizon);
                }
            }
        }
    }
    u
}

pub fn policy_distribution(f: &SceneFeatures) -> ActionDistribution {
    policy_distribution_with(f, &PolicyConfig::default())
}

pub fn policy_distribution_with(f: &SceneFeatures, cfg: &PolicyConfig) -> ActionDistribution {
    softmax_utilities(&utilities(f, cfg), cfg.temperature)
}

fn softmax_utilities(u: &[f64; N_ACTIONS], temperature: f64) -> ActionDistribution {
    let m = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; N_ACTIONS];
    for b in 0..N_ACTIONS {
        probs[b] = ((u[b] - m) / temperature).exp();
    }
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    ActionDistribution { probs }
}

pub fn act(f: &SceneFeatures) -> DrivingAction {
    policy_distribution(f).argmax()
}

pub fn act_with(f: &SceneFeatures, cfg: &PolicyConfig) -> DrivingAction {
    policy_distribution_with(f, cfg).argmax()
}
