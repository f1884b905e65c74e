//! Seeded generator of synthetic driving scenarios.
//!
//! Every scenario has a single ego route, open-loop scripted agents, and at
//! least one agent whose track crosses the ego route plus at least one that
//! is irrelevant by construction (moving away behind the ego). The rest are
//! background traffic: parked cars, oncoming vehicles, sidewalk pedestrians
//! and bike-lane cyclists, several of which sit closer to the ego than the
//! conflicting agents do.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RdarError, Result};
use crate::geometry::{Polyline, Vec2};
use crate::rng::{self, tag, StreamRng};
use crate::scene::{
    AgentKind, AgentState, EgoState, Extent, LightPhase, RouteSpec, SceneState, TrafficLight,
    DEFAULT_DT, N_MAX,
};

pub const DEFAULT_HORIZON: usize = 50;
pub const MIN_AGENTS: usize = 4;
/// Agents farther than this from the ego start position despawn.
pub const DESPAWN_RADIUS: f64 = 100.0;
/// Scenario seeds at or above this value are reserved for evaluation.
pub const EVAL_SEED_BASE: u64 = 1_000_000;
pub const VALIDATION_SEED_BASE: u64 = 2_000_000;

const ROUTE_LENGTH: f64 = 280.0;
const ROUTE_SPACING: f64 = 2.0;
const EGO_START_S: f64 = 30.0;
/// Route speed limit shared by every template.
pub const CRUISE_SPEED: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    StraightCrosswalk,
    FourWayIntersection,
    StopLineQueue,
    MixedUrban,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::StraightCrosswalk,
        Template::FourWayIntersection,
        Template::StopLineQueue,
        Template::MixedUrban,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::StraightCrosswalk => "straight_crosswalk",
            Template::FourWayIntersection => "four_way_intersection",
            Template::StopLineQueue => "stop_line_queue",
            Template::MixedUrban => "mixed_urban",
        }
    }

    fn index(self) -> u64 {
        Template::ALL.iter().position(|&t| t == self).unwrap() as u64
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = RdarError;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| RdarError::Config(format!("unknown template '{s}'")))
    }
}

/// Why an agent was placed in the scenario. Used by tests and corpus
/// statistics only; no model or policy reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackRole {
    /// Track crosses or follows the ego route ahead of the ego.
    Conflict,
    /// Moving away behind the ego.
    Irrelevant,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    pub kind: AgentKind,
    pub extent: Extent,
    pub slot: usize,
    pub role: TrackRole,
    /// One entry per timestep in `[0, horizon)`.
    pub points: Vec<TrackPoint>,
    /// First timestep at which the agent no longer exists.
    pub despawn_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub template: Template,
    pub n_agents: usize,
    pub horizon: usize,
    pub dt: f64,
    pub route: Arc<RouteSpec>,
    pub ego: EgoState,
    pub scripted_tracks: Vec<AgentTrack>,
}

impl ScenarioSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.route.validate()?;
        if !(MIN_AGENTS..=N_MAX).contains(&self.n_agents) || self.scripted_tracks.len() != self.n_agents {
            return Err(RdarError::Config("scenario agent count mismatch".into()));
        }
        let mut used = [false; N_MAX];
        for t in &self.scripted_tracks {
            if t.points.len() != self.horizon {
                return Err(RdarError::Config(format!("track {} has wrong length", t.id)));
            }
            if t.slot >= N_MAX || used[t.slot] {
                return Err(RdarError::Config(format!("track {} has invalid slot", t.id)));
            }
            used[t.slot] = true;
        }
        Ok(())
    }

    /// Scene at timestep 0.
    pub fn initial_scene(&self) -> SceneState {
        let mut agents = vec![AgentState::absent(); N_MAX];
        for i in 0..self.scripted_tracks.len() {
            let a = agent_state_at(self, i, 0);
            agents[self.scripted_tracks[i].slot] = a;
        }
        SceneState {
            ego: self.ego,
            agents,
            route: Arc::clone(&self.route),
            time_index: 0,
            dt: self.dt,
            terminal: false,
        }
    }
}

/// The precomputed state of scripted agent `agent_index` at timestep `t`.
pub fn scripted_step(spec: &ScenarioSpec, agent_index: usize, t: usize) -> Result<AgentState> {
    if t >= spec.horizon {
        return Err(RdarError::Range(format!("timestep {t} >= horizon {}", spec.horizon)));
    }
    if agent_index >= spec.scripted_tracks.len() {
        return Err(RdarError::Range(format!("no scripted agent {agent_index}")));
    }
    Ok(agent_state_at(spec, agent_index, t))
}

/// Like [`scripted_step`] but also defined at `t == horizon`, where the last
/// track entry is extrapolated at constant velocity; the simulator needs the
/// agents there to check the final transition.
pub(crate) fn agent_state_at(spec: &ScenarioSpec, agent_index: usize, t: usize) -> AgentState {
    let track = &spec.scripted_tracks[agent_index];
    let exists = track.despawn_at.map_or(true, |d| t < d);
    let last = track.points.len() - 1;
    let p = if t <= last {
        track.points[t]
    } else {
        let q = track.points[last];
        let dt = (t - last) as f64 * spec.dt;
        TrackPoint {
            position: q.position + Vec2::from_angle(q.heading) * (q.speed * dt),
            ..q
        }
    };
    AgentState {
        id: track.id,
        kind: track.kind,
        position: p.position,
        heading: p.heading,
        speed: p.speed,
        extent: track.extent,
        exists,
    }
}

/// Route-frame description of an agent's motion.
#[derive(Debug, Clone)]
enum Motion {
    /// Constant position.
    Parked { s: f64, l: f64, heading_offset: f64 },
    /// Moves along the route at fixed lateral offset; negative speed drives
    /// against the route direction.
    Along { s0: f64, l: f64, speed: f64 },
    /// Crosses the route perpendicular at arclength `s`.
    Crossing { s: f64, l0: f64, lat_speed: f64 },
    /// Follows the route, brakes to a stop at `stop_s`, waits, then pulls
    /// away.
    Leader {
        s0: f64,
        speed: f64,
        stop_s: f64,
        decel: f64,
        wait: f64,
        accel: f64,
        cruise: f64,
    },
}

struct Placed {
    kind: AgentKind,
    role: TrackRole,
    motion: Motion,
}

fn extent_for(kind: AgentKind, rng: &mut StreamRng) -> Extent {
    match kind {
        AgentKind::Vehicle => Extent {
            length: rng.gen_range(4.2..5.0),
            width: rng.gen_range(1.8..2.0),
        },
        AgentKind::Pedestrian => Extent {
            length: 0.5,
            width: 0.5,
        },
        AgentKind::Cyclist => Extent {
            length: 1.8,
            width: 0.6,
        },
    }
}

struct RouteFrame {
    line: Polyline,
}

impl RouteFrame {
    fn point(&self, s: f64, l: f64) -> Vec2 {
        let h = self.line.heading_at(s);
        self.line.point_at(s) + Vec2::from_angle(h).perp() * l
    }

    fn heading(&self, s: f64) -> f64 {
        self.line.heading_at(s)
    }
}

/// Longitudinal profile of a [`Motion::Leader`] sampled every `dt`.
fn leader_profile(m: &Motion, dt: f64, steps: usize) -> Vec<(f64, f64)> {
    let Motion::Leader {
        s0,
        speed,
        stop_s,
        decel,
        wait,
        accel,
        cruise,
    } = *m
    else {
        unreachable!()
    };
    let sub = 20;
    let h = dt / sub as f64;
    let (mut s, mut v) = (s0, speed);
    let mut phase = 0u8; // 0 cruise, 1 braking, 2 waiting, 3 pulling away
    let mut waited = 0.0;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push((s, v));
        for _ in 0..sub {
            match phase {
                0 => {
                    if v * v / (2.0 * decel) >= stop_s - s {
                        phase = 1;
                    }
                }
                1 => {
                    v = (v - decel * h).max(0.0);
                    if v == 0.0 {
                        phase = 2;
                    }
                }
                2 => {
                    waited += h;
                    if waited >= wait {
                        phase = 3;
                    }
                }
                _ => v = (v + accel * h).min(cruise),
            }
            if phase == 1 && s >= stop_s {
                v = 0.0;
                phase = 2;
            }
            s += v * h;
        }
    }
    out
}

fn build_track(frame: &RouteFrame, m: &Motion, dt: f64, horizon: usize) -> Vec<TrackPoint> {
    match *m {
        Motion::Parked { s, l, heading_offset } => {
            let p = TrackPoint {
                position: frame.point(s, l),
                heading: frame.heading(s) + heading_offset,
                speed: 0.0,
            };
            vec![p; horizon]
        }
        Motion::Along { s0, l, speed } => (0..horizon)
            .map(|t| {
                let s = s0 + speed * t as f64 * dt;
                TrackPoint {
                    position: frame.point(s, l),
                    heading: frame.heading(s) + if speed < 0.0 { PI } else { 0.0 },
                    speed: speed.abs(),
                }
            })
            .collect(),
        Motion::Crossing { s, l0, lat_speed } => {
            let base = frame.line.point_at(s);
            let normal = Vec2::from_angle(frame.heading(s)).perp();
            let heading = frame.heading(s) + if lat_speed >= 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 };
            (0..horizon)
                .map(|t| TrackPoint {
                    position: base + normal * (l0 + lat_speed * t as f64 * dt),
                    heading,
                    speed: lat_speed.abs(),
                })
                .collect()
        }
        Motion::Leader { .. } => leader_profile(m, dt, horizon)
            .into_iter()
            .map(|(s, v)| TrackPoint {
                position: frame.point(s, 0.0),
                heading: frame.heading(s),
                speed: v,
            })
            .collect(),
    }
}

fn route_points(template: Template, rng: &mut StreamRng) -> Vec<Vec2> {
    let n = (ROUTE_LENGTH / ROUTE_SPACING) as usize;
    let (bend_start, bend_len, curvature) = match template {
        Template::MixedUrban => {
            let radius = rng.gen_range(120.0..250.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (
                EGO_START_S + rng.gen_range(20.0..60.0),
                rng.gen_range(30.0..70.0),
                sign / radius,
            )
        }
        _ => (0.0, 0.0, 0.0),
    };
    let mut pts = Vec::with_capacity(n + 1);
    let mut p = Vec2::ZERO;
    let mut heading = 0.0;
    pts.push(p);
    for i in 0..n {
        let s = i as f64 * ROUTE_SPACING;
        if s >= bend_start && s < bend_start + bend_len {
            heading += curvature * ROUTE_SPACING;
        }
        p = p + Vec2::from_angle(heading) * ROUTE_SPACING;
        pts.push(p);
    }
    pts
}

/// Crossing pedestrian entering the ego corridor (|l| < 2.5 m) at `t_enter`.
fn crossing_pedestrian(rng: &mut StreamRng, s: f64, t_enter: f64) -> Motion {
    let v = rng.gen_range(1.0..1.6);
    let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let l0 = -dir * (2.5 + v * t_enter.max(0.3));
    Motion::Crossing {
        s,
        l0,
        lat_speed: dir * v,
    }
}

fn background(rng: &mut StreamRng, s0: f64) -> Placed {
    match rng.gen_range(0..5) {
        0 | 1 => Placed {
            kind: AgentKind::Vehicle,
            role: TrackRole::Background,
            motion: Motion::Parked {
                s: s0 + rng.gen_range(-12.0..80.0),
                l: -rng.gen_range(3.6..4.2),
                heading_offset: rng.gen_range(-0.05..0.05),
            },
        },
        2 => Placed {
            kind: AgentKind::Vehicle,
            role: TrackRole::Background,
            motion: Motion::Along {
                s0: s0 + rng.gen_range(10.0..90.0),
                l: rng.gen_range(3.6..4.0),
                speed: -rng.gen_range(6.0..11.0),
            },
        },
        3 => Placed {
            kind: AgentKind::Pedestrian,
            role: TrackRole::Background,
            motion: Motion::Along {
                s0: s0 + rng.gen_range(-15.0..70.0),
                l: if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(5.5..7.5),
                speed: if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(1.0..1.6),
            },
        },
        _ => Placed {
            kind: AgentKind::Cyclist,
            role: TrackRole::Background,
            motion: Motion::Along {
                s0: s0 + rng.gen_range(5.0..60.0),
                l: -rng.gen_range(2.9..3.2),
                speed: rng.gen_range(3.5..5.5),
            },
        },
    }
}

/// Agent moving away behind the ego.
fn behind_agent(rng: &mut StreamRng, s0: f64) -> Placed {
    if rng.gen_bool(0.5) {
        let v = rng.gen_range(1.0..1.6);
        let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        Placed {
            kind: AgentKind::Pedestrian,
            role: TrackRole::Irrelevant,
            motion: Motion::Crossing {
                s: s0 - rng.gen_range(8.0..20.0),
                l0: -dir * rng.gen_range(0.0..4.0),
                lat_speed: dir * v,
            },
        }
    } else {
        Placed {
            kind: AgentKind::Vehicle,
            role: TrackRole::Irrelevant,
            motion: Motion::Along {
                s0: s0 - rng.gen_range(6.0..25.0),
                l: rng.gen_range(3.6..4.0),
                speed: -rng.gen_range(5.0..10.0),
            },
        }
    }
}

fn template_agents(template: Template, rng: &mut StreamRng, route: &mut RouteSpec, v0: f64) -> Vec<Placed> {
    let s0 = EGO_START_S;
    let mut out = Vec::new();
    let conflict = |kind, motion| Placed {
        kind,
        role: TrackRole::Conflict,
        motion,
    };
    match template {
        Template::StraightCrosswalk => {
            let s_cw = s0 + rng.gen_range(30.0..65.0);
            let t_arrive = (s_cw - s0 - 5.0) / v0;
            let t_enter = (t_arrive - rng.gen_range(0.0..2.5)).clamp(0.5, 6.0);
            out.push(conflict(AgentKind::Pedestrian, crossing_pedestrian(rng, s_cw, t_enter)));
            if rng.gen_bool(0.5) {
                let t2 = t_enter + rng.gen_range(0.5..3.0);
                let s2 = s_cw + rng.gen_range(-1.5..1.5);
                out.push(conflict(AgentKind::Pedestrian, crossing_pedestrian(rng, s2, t2)));
            }
            out.push(behind_agent(rng, s0));
        }
        Template::FourWayIntersection => {
            let s_int = s0 + rng.gen_range(40.0..65.0);
            route.stop_lines.push(s_int - 7.0);
            let v = rng.gen_range(7.0..10.0);
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            // Rough time at which the ego, having stopped at the line, pulls
            // into the crossing path.
            let d_line = s_int - 7.0 - s0;
            let t_line = (d_line - 1.0 - v0 * v0 / 5.0) / v0 + v0 / 2.5 + 0.6;
            let t_enter = (t_line + 2.5 + rng.gen_range(-1.5..0.3)).clamp(2.0, 9.5);
            out.push(conflict(
                AgentKind::Vehicle,
                Motion::Crossing {
                    s: s_int + rng.gen_range(-1.0..1.0),
                    l0: -dir * (2.5 + 2.3 + v * t_enter),
                    lat_speed: dir * v,
                },
            ));
            // cyclist that already cleared the intersection
            let cdir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            out.push(Placed {
                kind: AgentKind::Cyclist,
                role: TrackRole::Irrelevant,
                motion: Motion::Crossing {
                    s: s_int + rng.gen_range(-2.0..2.0),
                    l0: cdir * rng.gen_range(4.0..8.0),
                    lat_speed: cdir * rng.gen_range(4.0..5.5),
                },
            });
            // cross traffic waiting at its own stop line
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            out.push(Placed {
                kind: AgentKind::Vehicle,
                role: TrackRole::Background,
                motion: Motion::Parked {
                    s: s_int + side * 2.0,
                    l: side * rng.gen_range(8.0..10.0),
                    heading_offset: -side * FRAC_PI_2,
                },
            });
            out.push(behind_agent(rng, s0));
        }
        Template::StopLineQueue => {
            let s_line = s0 + rng.gen_range(45.0..75.0);
            route.stop_lines.push(s_line);
            let lead_s = s0 + rng.gen_range(12.0..22.0);
            let speed = rng.gen_range(5.0..8.0);
            let decel = rng.gen_range(1.5..2.5);
            let wait = rng.gen_range(1.5..3.0);
            let accel = rng.gen_range(1.5..2.5);
            let cruise = rng.gen_range(8.0..11.0);
            let leader = |start: f64, stop_s: f64, wait: f64| Motion::Leader {
                s0: start,
                speed,
                stop_s,
                decel,
                wait,
                accel,
                cruise,
            };
            if rng.gen_bool(0.4) {
                // two-car queue: the front car stops at the line, the rear
                // one a car length behind and leaves after it
                let spacing = rng.gen_range(9.0..14.0);
                let queue_gap = rng.gen_range(6.5..8.0);
                out.push(conflict(AgentKind::Vehicle, leader(lead_s + spacing, s_line - 3.5, wait)));
                out.push(conflict(
                    AgentKind::Vehicle,
                    leader(lead_s, s_line - 3.5 - queue_gap, wait + 1.0),
                ));
            } else {
                out.push(conflict(AgentKind::Vehicle, leader(lead_s, s_line - 3.5, wait)));
            }
            out.push(behind_agent(rng, s0));
        }
        Template::MixedUrban => {
            let s_light = s0 + rng.gen_range(50.0..90.0);
            let green0 = rng.gen_range(0.5..6.0);
            route.traffic_lights.push(TrafficLight {
                position: s_light,
                schedule: vec![
                    (LightPhase::Green, green0),
                    (LightPhase::Red, rng.gen_range(4.0..7.0)),
                    (LightPhase::Green, 30.0),
                ],
            });
            let s_cw = s0 + rng.gen_range(25.0..42.0);
            let t_arrive = (s_cw - s0 - 5.0) / v0;
            let t_enter = (t_arrive - rng.gen_range(0.0..2.0)).clamp(0.5, 6.0);
            out.push(conflict(AgentKind::Pedestrian, crossing_pedestrian(rng, s_cw, t_enter)));
            if rng.gen_bool(0.5) {
                out.push(conflict(
                    AgentKind::Vehicle,
                    Motion::Along {
                        s0: s0 + rng.gen_range(25.0..45.0),
                        l: 0.0,
                        speed: rng.gen_range(4.0..7.0),
                    },
                ));
            }
            out.push(behind_agent(rng, s0));
        }
    }
    out
}

/// Builds the scenario for `(seed, template, n_agents)`; a pure function of
/// its arguments.
pub fn generate(seed: u64, template: Template, n_agents: usize) -> Result<ScenarioSpec> {
    if !(MIN_AGENTS..=N_MAX).contains(&n_agents) {
        return Err(RdarError::Config(format!(
            "n_agents must be in [{MIN_AGENTS}, {N_MAX}], got {n_agents}"
        )));
    }
    let mut rng = rng::stream(seed, &[tag::SCENARIO, template.index(), n_agents as u64]);
    let dt = DEFAULT_DT;
    let horizon = DEFAULT_HORIZON;

    let local = Polyline::new(route_points(template, &mut rng)).expect("generated route is valid");
    let frame = RouteFrame { line: local };
    let v0 = rng.gen_range(6.0..10.0);
    let mut route = RouteSpec {
        waypoints: frame.line.clone(),
        target_speed: CRUISE_SPEED,
        stop_lines: vec![],
        traffic_lights: vec![],
    };

    let mut placed = template_agents(template, &mut rng, &mut route, v0);
    placed.truncate(n_agents);
    // Keep at least one irrelevant agent even when n_agents is tight.
    if !placed.iter().any(|p| p.role == TrackRole::Irrelevant) {
        let last = placed.len() - 1;
        placed[last] = behind_agent(&mut rng, EGO_START_S);
    }
    while placed.len() < n_agents {
        placed.push(background(&mut rng, EGO_START_S));
    }

    // Rigid world transform so that nothing is axis aligned.
    let rot = rng.gen_range(-PI..PI);
    let shift = Vec2::new(rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0));
    let to_world = |p: Vec2| p.rotate(rot) + shift;

    let mut slots: Vec<usize> = (0..N_MAX).collect();
    slots.shuffle(&mut rng);
    let mut ids: Vec<u32> = (1..=n_agents as u32).collect();
    ids.shuffle(&mut rng);

    let ego_start = to_world(frame.point(EGO_START_S, 0.0));
    let tracks = placed
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let points: Vec<TrackPoint> = build_track(&frame, &p.motion, dt, horizon)
                .into_iter()
                .map(|tp| TrackPoint {
                    position: to_world(tp.position),
                    heading: crate::geometry::wrap_angle(tp.heading + rot),
                    speed: tp.speed,
                })
                .collect();
            let despawn_at = points
                .iter()
                .position(|tp| (tp.position - ego_start).norm() > DESPAWN_RADIUS);
            AgentTrack {
                id: ids[i],
                kind: p.kind,
                extent: extent_for(p.kind, &mut rng),
                slot: slots[i],
                role: p.role,
                points,
                despawn_at,
            }
        })
        .collect();

    let world_route = RouteSpec {
        waypoints: Polyline::new(frame.line.points().iter().map(|&p| to_world(p)).collect())
            .expect("rigid transform keeps the route valid"),
        ..route
    };
    let ego = EgoState {
        position: ego_start,
        heading: crate::geometry::wrap_angle(frame.heading(EGO_START_S) + rot),
        speed: v0,
        accel: 0.0,
        curvature: 0.0,
        route_progress: EGO_START_S,
        last_stop_progress: None,
    };
    let spec = ScenarioSpec {
        seed,
        template,
        n_agents,
        horizon,
        dt,
        route: Arc::new(world_route),
        ego,
        scripted_tracks: tracks,
    };
    spec.validate()?;
    Ok(spec)
}

/// One scenario reference in a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub seed: u64,
    pub template: Template,
    pub n_agents: usize,
    pub path: Option<String>,
}

impl CorpusEntry {
    pub fn build(&self) -> Result<ScenarioSpec> {
        generate(self.seed, self.template, self.n_agents)
    }
}

/// Draws an agent count uniformly in `[lo, hi]` for a scenario seed.
pub fn draw_n_agents(seed: u64, lo: usize, hi: usize) -> usize {
    rng::stream(seed, &[tag::CORPUS]).gen_range(lo..=hi)
}

/// The held-out evaluation corpus: `per_template` consecutive seeds from
/// [`EVAL_SEED_BASE`] for every template.
pub fn eval_corpus(per_template: usize, n_agents: (usize, usize)) -> Vec<CorpusEntry> {
    seeded_corpus(EVAL_SEED_BASE, per_template, n_agents)
}

/// Scenarios for choosing among checkpoints, disjoint from the held-out
/// corpus.
pub fn validation_corpus(per_template: usize, n_agents: (usize, usize)) -> Vec<CorpusEntry> {
    seeded_corpus(VALIDATION_SEED_BASE, per_template, n_agents)
}

fn seeded_corpus(base: u64, per_template: usize, n_agents: (usize, usize)) -> Vec<CorpusEntry> {
    Template::ALL
        .iter()
        .flat_map(|&template| {
            (0..per_template).map(move |i| {
                let seed = base + template.index() * 100_000 + i as u64;
                CorpusEntry {
                    seed,
                    template,
                    n_agents: draw_n_agents(seed, n_agents.0, n_agents.1),
                    path: None,
                }
            })
        })
        .collect()
}
