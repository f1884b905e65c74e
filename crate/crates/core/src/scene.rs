//! Scene state shared by the simulator, the driving policy and the relevance
//! model, plus featurization into the ego frame.
//!
//! Ego frame convention: origin at the ego centre, x forward along the ego
//! heading, y to the left.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{RdarError, Result};
use crate::geometry::{wrap_angle, OrientedRect, Polyline, Vec2};
use crate::selection::KSample;

/// Number of agent slots in every scene.
pub const N_MAX: usize = 32;
/// Numbers per agent slot in [`SceneFeatures::agents`].
pub const AGENT_FEATURE_DIM: usize = 12;
/// Numbers in [`SceneFeatures::ego`].
pub const EGO_FEATURE_DIM: usize = 5;
/// Route samples in [`SceneFeatures::route`].
pub const ROUTE_POINTS: usize = 16;
/// Arclength covered by the route samples, ahead of the ego.
pub const ROUTE_LOOKAHEAD: f64 = 50.0;
/// Distance reported when there is no stop line or red light ahead.
pub const ABSENT_DISTANCE: f64 = 1000.0;
/// Default simulation step (5 Hz).
pub const DEFAULT_DT: f64 = 0.2;

pub const EGO_LENGTH: f64 = 4.6;
pub const EGO_WIDTH: f64 = 2.0;

// Agent feature layout.
pub const F_POS_X: usize = 0;
pub const F_POS_Y: usize = 1;
pub const F_VEL_X: usize = 2;
pub const F_VEL_Y: usize = 3;
pub const F_COS: usize = 4;
pub const F_SIN: usize = 5;
pub const F_LENGTH: usize = 6;
pub const F_WIDTH: usize = 7;
pub const F_KIND: usize = 8;
pub const F_EXISTS: usize = 11;

// Ego feature layout.
pub const E_SPEED: usize = 0;
pub const E_STOP_LINE: usize = 1;
pub const E_RED_LIGHT: usize = 2;
pub const E_LATERAL: usize = 3;
pub const E_HEADING_ERR: usize = 4;

/// Speed below which the ego counts as stopped.
pub const STOPPED_SPEED: f64 = 0.1;
/// A stop line is served by stopping within this distance before it.
pub const STOP_WINDOW: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub fn index(self) -> usize {
        match self {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
            AgentKind::Cyclist => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub length: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub kind: AgentKind,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub extent: Extent,
    pub exists: bool,
}

impl AgentState {
    /// An empty slot.
    pub fn absent() -> Self {
        AgentState {
            id: 0,
            kind: AgentKind::Vehicle,
            position: Vec2::ZERO,
            heading: 0.0,
            speed: 0.0,
            extent: Extent {
                length: 1.0,
                width: 1.0,
            },
            exists: false,
        }
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn rect(&self) -> OrientedRect {
        OrientedRect::new(self.position, self.heading, self.extent.length, self.extent.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    /// Longitudinal acceleration applied during the last step.
    pub accel: f64,
    /// Path curvature applied during the last step (1/m).
    pub curvature: f64,
    pub route_progress: f64,
    /// Route progress at the most recent step the ego was stopped.
    pub last_stop_progress: Option<f64>,
}

impl EgoState {
    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.heading) * self.speed
    }

    pub fn rect(&self) -> OrientedRect {
        OrientedRect::new(self.position, self.heading, EGO_LENGTH, EGO_WIDTH)
    }

    /// Maps a world point into the ego frame.
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position).rotate(-self.heading)
    }

    /// Maps an ego-frame point back to world coordinates.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.heading) + self.position
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightPhase {
    Red,
    Green,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    /// Arclength along the route.
    pub position: f64,
    /// Cyclic schedule of (phase, duration in seconds).
    pub schedule: Vec<(LightPhase, f64)>,
}

impl TrafficLight {
    pub fn phase_at(&self, time: f64) -> LightPhase {
        let cycle: f64 = self.schedule.iter().map(|(_, d)| d).sum();
        if self.schedule.is_empty() || cycle <= 0.0 {
            return LightPhase::Green;
        }
        let mut t = time.rem_euclid(cycle);
        for &(phase, d) in &self.schedule {
            if t < d {
                return phase;
            }
            t -= d;
        }
        self.schedule.last().unwrap().0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteSpec {
    pub waypoints: Polyline,
    pub target_speed: f64,
    pub stop_lines: Vec<f64>,
    pub traffic_lights: Vec<TrafficLight>,
}

impl RouteSpec {
    pub fn validate(&self) -> Result<()> {
        let len = self.waypoints.length();
        let inside = |s: f64| (0.0..=len).contains(&s);
        if !(self.target_speed > 0.0) {
            return Err(RdarError::Config("route target speed must be positive".into()));
        }
        if !self.stop_lines.iter().all(|&s| inside(s)) {
            return Err(RdarError::Config("stop line outside route".into()));
        }
        for light in &self.traffic_lights {
            if !inside(light.position) {
                return Err(RdarError::Config("traffic light outside route".into()));
            }
            if light.schedule.iter().any(|&(_, d)| !(d > 0.0)) {
                return Err(RdarError::Config("light phase durations must be positive".into()));
            }
        }
        Ok(())
    }

    /// Next stop line strictly ahead of `progress` that has not been served
    /// by a stop recorded at `last_stop`.
    pub fn next_stop_line(&self, progress: f64, last_stop: Option<f64>) -> Option<f64> {
        self.stop_lines
            .iter()
            .copied()
            .filter(|&s| s > progress)
            .filter(|&s| !is_served(s, last_stop))
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))))
    }

    /// The first light strictly ahead of `progress`.
    pub fn next_light(&self, progress: f64) -> Option<&TrafficLight> {
        self.traffic_lights
            .iter()
            .filter(|l| l.position > progress)
            .min_by(|a, b| a.position.total_cmp(&b.position))
    }
}

/// Whether a stop at `last_stop` satisfies the stop line at `line`.
pub fn is_served(line: f64, last_stop: Option<f64>) -> bool {
    last_stop.map_or(false, |p| p >= line - STOP_WINDOW && p <= line)
}

/// Full simulator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub ego: EgoState,
    /// Exactly [`N_MAX`] slots.
    pub agents: Vec<AgentState>,
    pub route: Arc<RouteSpec>,
    pub time_index: usize,
    pub dt: f64,
    /// Set once the episode ended by collision.
    #[serde(default)]
    pub terminal: bool,
}

impl SceneState {
    pub fn time(&self) -> f64 {
        self.time_index as f64 * self.dt
    }

    pub fn existing_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.agents.iter().enumerate().filter(|(_, a)| a.exists).map(|(i, _)| i)
    }

    pub fn existing_count(&self) -> usize {
        self.agents.iter().filter(|a| a.exists).count()
    }

    pub fn lateral_offset(&self) -> f64 {
        self.route.waypoints.project_window(
            self.ego.position,
            self.ego.route_progress - 10.0,
            self.ego.route_progress + 10.0,
        )
        .lateral
    }

    /// Persistent ids per slot, `None` for empty slots.
    pub fn agent_ids(&self) -> [Option<u32>; N_MAX] {
        let mut ids = [None; N_MAX];
        for (slot, a) in self.agents.iter().enumerate().take(N_MAX) {
            if a.exists {
                ids[slot] = Some(a.id);
            }
        }
        ids
    }
}

/// Per-slot agent features; see the `F_*` constants for the layout.
pub type AgentFeatures = [[f64; AGENT_FEATURE_DIM]; N_MAX];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFeatures {
    pub agents: AgentFeatures,
    pub ego: [f64; EGO_FEATURE_DIM],
    pub route: [[f64; 2]; ROUTE_POINTS],
}

impl SceneFeatures {
    pub fn exists(&self, slot: usize) -> bool {
        self.agents[slot][F_EXISTS] == 1.0
    }

    pub fn existing_slots(&self) -> Vec<usize> {
        (0..N_MAX).filter(|&i| self.exists(i)).collect()
    }

    pub fn existing_count(&self) -> usize {
        (0..N_MAX).filter(|&i| self.exists(i)).count()
    }
}

/// Rigid transform of the scene into the ego frame.
pub fn to_ego_frame(scene: &SceneState) -> SceneFeatures {
    let ego = &scene.ego;
    let ego_vel = ego.velocity();
    let mut agents = [[0.0; AGENT_FEATURE_DIM]; N_MAX];
    for (slot, a) in scene.agents.iter().enumerate().take(N_MAX) {
        if !a.exists {
            continue;
        }
        let row = &mut agents[slot];
        let rel = ego.to_local(a.position);
        let vel = (a.velocity() - ego_vel).rotate(-ego.heading);
        let dh = a.heading - ego.heading;
        row[F_POS_X] = rel.x;
        row[F_POS_Y] = rel.y;
        row[F_VEL_X] = vel.x;
        row[F_VEL_Y] = vel.y;
        row[F_COS] = dh.cos();
        row[F_SIN] = dh.sin();
        row[F_LENGTH] = a.extent.length;
        row[F_WIDTH] = a.extent.width;
        row[F_KIND + a.kind.index()] = 1.0;
        row[F_EXISTS] = 1.0;
    }

    let route = &scene.route;
    let progress = ego.route_progress;
    let d_stop = route
        .next_stop_line(progress, ego.last_stop_progress)
        .map_or(ABSENT_DISTANCE, |s| s - progress);
    let d_red = route
        .next_light(progress)
        .filter(|l| l.phase_at(scene.time()) == LightPhase::Red)
        .map_or(ABSENT_DISTANCE, |l| l.position - progress);
    let frenet = route
        .waypoints
        .project_window(ego.position, progress - 10.0, progress + 10.0);
    let heading_err = wrap_angle(ego.heading - route.waypoints.heading_at(frenet.s));

    let mut route_pts = [[0.0; 2]; ROUTE_POINTS];
    let step = ROUTE_LOOKAHEAD / (ROUTE_POINTS - 1) as f64;
    for (i, p) in route_pts.iter_mut().enumerate() {
        let local = ego.to_local(route.waypoints.point_at(progress + step * i as f64));
        *p = [local.x, local.y];
    }

    SceneFeatures {
        agents,
        ego: [ego.speed, d_stop, d_red, frenet.lateral, heading_err],
        route: route_pts,
    }
}

/// Keeps only the agent slots in `sample`; all other slots are zeroed.
pub fn mask_agents(features: &SceneFeatures, sample: &KSample) -> Result<SceneFeatures> {
    let mut keep = [false; N_MAX];
    for &i in sample.indices() {
        if i >= N_MAX || !features.exists(i) {
            return Err(RdarError::InvalidSample(format!(
                "slot {i} does not hold an existing agent"
            )));
        }
        keep[i] = true;
    }
    let mut out = features.clone();
    for (slot, row) in out.agents.iter_mut().enumerate() {
        if !keep[slot] {
            *row = [0.0; AGENT_FEATURE_DIM];
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn agent_at_ego_pose_maps_to_origin() {
        let mut ego = ego_at(20.0, 5.0);
        ego.heading = 0.4;
        let a = agent(1, AgentKind::Vehicle, ego.position, 0.4, 5.0);
        let f = to_ego_frame(&scene_with(ego, &[(0, a)]));
        let row = f.agents[0];
        assert!(row[F_POS_X].abs() < 1e-12 && row[F_POS_Y].abs() < 1e-12);
        assert_eq!((row[F_COS], row[F_SIN]), (1.0, 0.0));
        assert!(row[F_VEL_X].abs() < 1e-12 && row[F_VEL_Y].abs() < 1e-12);
    }

    #[test]
    fn agent_ahead_of_north_facing_ego_is_on_positive_x() {
        let mut ego = ego_at(0.0, 0.0);
        ego.position = Vec2::new(3.0, 4.0);
        ego.heading = FRAC_PI_2;
        let a = agent(1, AgentKind::Pedestrian, Vec2::new(3.0, 14.0), 0.0, 0.0);
        let f = to_ego_frame(&scene_with(ego, &[(0, a)]));
        assert!((f.agents[0][F_POS_X] - 10.0).abs() < 1e-12);
        assert!(f.agents[0][F_POS_Y].abs() < 1e-12);
        assert_eq!(f.agents[0][F_KIND + 1], 1.0);
    }

    #[test]
    fn absent_slots_are_all_zero() {
        let ego = ego_at(10.0, 3.0);
        let a = agent(1, AgentKind::Cyclist, Vec2::new(15.0, 2.0), 0.0, 4.0);
        let f = to_ego_frame(&scene_with(ego, &[(3, a)]));
        for slot in (0..N_MAX).filter(|&s| s != 3) {
            assert_eq!(f.agents[slot], [0.0; AGENT_FEATURE_DIM]);
        }
        assert_eq!(f.existing_slots(), vec![3]);
    }

    #[test]
    fn absent_stop_line_and_light_use_sentinel() {
        let f = to_ego_frame(&scene_with(ego_at(10.0, 3.0), &[]));
        assert_eq!(f.ego[E_STOP_LINE], ABSENT_DISTANCE);
        assert_eq!(f.ego[E_RED_LIGHT], ABSENT_DISTANCE);
        assert!(f.ego.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn stop_line_distance_and_service() {
        let mut scene = scene_with(ego_at(10.0, 3.0), &[]);
        let mut route = (*scene.route).clone();
        route.stop_lines = vec![30.0, 60.0];
        route.traffic_lights = vec![TrafficLight {
            position: 25.0,
            schedule: vec![(LightPhase::Red, 5.0), (LightPhase::Green, 5.0)],
        }];
        scene.route = Arc::new(route);
        let f = to_ego_frame(&scene);
        assert!((f.ego[E_STOP_LINE] - 20.0).abs() < 1e-12);
        assert!((f.ego[E_RED_LIGHT] - 15.0).abs() < 1e-12);
        scene.ego.last_stop_progress = Some(29.0);
        let f = to_ego_frame(&scene);
        assert!((f.ego[E_STOP_LINE] - 50.0).abs() < 1e-12);
        scene.time_index = 30; // 6 s: green
        let f = to_ego_frame(&scene);
        assert_eq!(f.ego[E_RED_LIGHT], ABSENT_DISTANCE);
    }

    #[test]
    fn route_samples_start_at_ego() {
        let f = to_ego_frame(&scene_with(ego_at(10.0, 3.0), &[]));
        assert!(f.route[0][0].abs() < 1e-12);
        assert!((f.route[ROUTE_POINTS - 1][0] - ROUTE_LOOKAHEAD).abs() < 1e-9);
    }

    fn two_agent_scene() -> SceneState {
        let ego = ego_at(10.0, 3.0);
        let agents: Vec<(usize, AgentState)> = (0..6)
            .map(|i| {
                (
                    i,
                    agent(i as u32 + 1, AgentKind::Vehicle, Vec2::new(20.0 + 5.0 * i as f64, 3.5), 0.0, 1.0),
                )
            })
            .collect();
        scene_with(ego, &agents)
    }

    #[test]
    fn mask_keeps_exactly_the_sampled_slots() {
        let f = to_ego_frame(&two_agent_scene());
        let m = mask_agents(&f, &KSample::new(vec![2, 5])).unwrap();
        for slot in 0..N_MAX {
            if slot == 2 || slot == 5 {
                assert_eq!(m.agents[slot], f.agents[slot]);
            } else {
                assert_eq!(m.agents[slot], [0.0; AGENT_FEATURE_DIM]);
            }
        }
        assert_eq!(m.ego, f.ego);
        assert_eq!(m.route, f.route);
    }

    #[test]
    fn mask_with_all_agents_is_identity_and_empty_mask_clears() {
        let f = to_ego_frame(&two_agent_scene());
        let all = KSample::new(f.existing_slots());
        assert_eq!(mask_agents(&f, &all).unwrap(), f);
        let none = mask_agents(&f, &KSample::new(vec![])).unwrap();
        assert_eq!(none.existing_count(), 0);
    }

    #[test]
    fn mask_rejects_missing_slot() {
        let f = to_ego_frame(&two_agent_scene());
        assert!(matches!(
            mask_agents(&f, &KSample::new(vec![7])),
            Err(RdarError::InvalidSample(_))
        ));
    }

    fn arb_agent() -> impl Strategy<Value = AgentState> {
        (
            -80.0..80.0f64,
            -80.0..80.0f64,
            -3.2..3.2f64,
            0.0..12.0f64,
            0..3usize,
        )
            .prop_map(|(x, y, h, v, k)| {
                let kind = [AgentKind::Vehicle, AgentKind::Pedestrian, AgentKind::Cyclist][k];
                agent(7, kind, Vec2::new(x, y), h, v)
            })
    }

    proptest! {
        #[test]
        fn inverse_transform_recovers_world_position(
            ex in -100.0..100.0f64, ey in -100.0..100.0f64, eh in -3.2..3.2f64,
            a in arb_agent(),
        ) {
            let mut ego = ego_at(0.0, 4.0);
            ego.position = Vec2::new(ex, ey);
            ego.heading = eh;
            let f = to_ego_frame(&scene_with(ego, &[(0, a)]));
            let back = ego.to_world(Vec2::new(f.agents[0][F_POS_X], f.agents[0][F_POS_Y]));
            prop_assert!((back - a.position).norm() < 1e-9);
        }

        #[test]
        fn featurization_is_permutation_equivariant(
            a in arb_agent(), b in arb_agent(), s1 in 0..N_MAX, s2 in 0..N_MAX,
        ) {
            prop_assume!(s1 != s2);
            let ego = ego_at(5.0, 6.0);
            let f = to_ego_frame(&scene_with(ego, &[(s1, a), (s2, b)]));
            let g = to_ego_frame(&scene_with(ego, &[(s2, a), (s1, b)]));
            prop_assert_eq!(f.agents[s1], g.agents[s2]);
            prop_assert_eq!(f.agents[s2], g.agents[s1]);
            prop_assert_eq!(f.ego, g.ego);
        }

        #[test]
        fn masking_is_idempotent(mask_bits in proptest::collection::vec(any::<bool>(), 6)) {
            let f = to_ego_frame(&two_agent_scene());
            let keep: Vec<usize> = (0..6).filter(|&i| mask_bits[i]).collect();
            let s = KSample::new(keep);
            let once = mask_agents(&f, &s).unwrap();
            let twice = mask_agents(&once, &s).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
