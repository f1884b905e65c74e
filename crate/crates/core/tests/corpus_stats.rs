//! Corpus statistics: nearness alone must not be enough at small k.

use rdar_core::baselines::closest_k;
use rdar_core::driving::act;
use rdar_core::scenario::{draw_n_agents, generate, Template, TrackRole};
use rdar_core::scene::to_ego_frame;
use rdar_core::sim;

/// True when, at some step where the unfiltered policy brakes, a
/// conflicting agent sits outside the `k` nearest.
fn closest_misses_conflict(seed: u64, template: Template, k: usize) -> bool {
    let spec = generate(seed, template, draw_n_agents(seed, 6, 16)).unwrap();
    let conflict_slots: Vec<usize> = spec
        .scripted_tracks
        .iter()
        .filter(|t| t.role == TrackRole::Conflict)
        .map(|t| t.slot)
        .collect();
    let mut scene = spec.initial_scene();
    loop {
        let action = act(&to_ego_frame(&scene));
        if action.accel() < 0.0 && scene.existing_count() > k {
            let near = closest_k(&scene, k).unwrap();
            if conflict_slots.iter().any(|&s| scene.agents[s].exists && !near.contains(s)) {
                return true;
            }
        }
        let out = sim::step(&scene, action, &spec).unwrap();
        if out.done {
            return false;
        }
        scene = out.next_scene;
    }
}

#[test]
fn closest_two_misses_a_conflict_in_every_template() {
    let seeds = 200;
    for template in Template::ALL {
        let hits = (0..seeds).filter(|&s| closest_misses_conflict(s, template, 2)).count();
        let frac = hits as f64 / seeds as f64;
        assert!(frac >= 0.05, "{template}: {frac:.3} of seeds");
    }
}
