//! Closed-loop evaluation of agent selectors, k sweeps and relevance
//! visualization.
//!
//! Every selector runs as a filter in front of the frozen driving policy:
//! at each step it picks k agents, the others are masked out, and the
//! policy acts on what is left. `progress_ratio` compares route progress
//! against the unfiltered run of the same scenario, since synthetic
//! scenarios have no human log to compare against.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::baselines::{attribution_from_features, closest_k, random_k};
use crate::driving;
use crate::error::{RdarError, Result};
use crate::model::{self, ModelParams};
use crate::rng::{self, tag};
use crate::scenario::{CorpusEntry, ScenarioSpec, Template};
use crate::scene::{mask_agents, to_ego_frame, SceneState, EGO_LENGTH, EGO_WIDTH, N_MAX};
use crate::selection::{greedy_topk, KSample, ScoreVector};
use crate::sim::{self, ComfortConfig, Events, MotionSample};

#[derive(Debug, Clone)]
pub enum Selector {
    /// No filtering; every agent is visible.
    None,
    Closest,
    Random { seed: u64 },
    Attribution,
    /// Greedy top-k of a trained relevance model.
    Rdar(Arc<ModelParams>),
}

impl Selector {
    pub fn id(&self) -> &'static str {
        match self {
            Selector::None => "none",
            Selector::Closest => "closest",
            Selector::Random { .. } => "random",
            Selector::Attribution => "attribution",
            Selector::Rdar(_) => "rdar",
        }
    }

    /// Builds a selector from its name; `rdar` needs parameters.
    pub fn parse(name: &str, seed: u64, params: Option<Arc<ModelParams>>) -> Result<Self> {
        match name {
            "none" => Ok(Selector::None),
            "closest" => Ok(Selector::Closest),
            "random" => Ok(Selector::Random { seed }),
            "attribution" => Ok(Selector::Attribution),
            "rdar" => params
                .map(Selector::Rdar)
                .ok_or_else(|| RdarError::Config("selector rdar needs a checkpoint".into())),
            other => Err(RdarError::Config(format!(
                "unknown selector '{other}' (expected none, closest, random, attribution or rdar)"
            ))),
        }
    }
}

/// Selector work spent on one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub present: usize,
    pub policy_evaluations: usize,
    pub model_forwards: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub seed: u64,
    pub template: Template,
    pub events: Events,
    pub comfort: f64,
    pub progress: f64,
    pub actions: Vec<usize>,
    pub costs: Vec<StepCost>,
}

fn select(selector: &Selector, scene: &SceneState, k: usize, rng: &mut rng::StreamRng) -> Result<(Option<KSample>, StepCost)> {
    let features_present = scene.existing_count();
    let k = k.min(features_present);
    let mut cost = StepCost {
        present: features_present,
        ..StepCost::default()
    };
    let sample = match selector {
        Selector::None => None,
        Selector::Closest => Some(closest_k(scene, k)?),
        Selector::Random { .. } => Some(random_k(scene, k, rng)?),
        Selector::Attribution => {
            let a = attribution_from_features(&to_ego_frame(scene))?;
            cost.policy_evaluations = a.evaluations;
            Some(if k == 0 { KSample::new(Vec::new()) } else { greedy_topk(&a.as_scores(), k)? })
        }
        Selector::Rdar(params) => {
            let out = model::forward(params, &to_ego_frame(scene))?;
            cost.model_forwards = 1;
            Some(greedy_topk(&out.scores, k)?)
        }
    };
    Ok((sample, cost))
}

/// One closed-loop episode with `selector` keeping at most `k` agents.
pub fn run_episode(selector: &Selector, k: usize, spec: &ScenarioSpec) -> Result<EpisodeResult> {
    let seed = match selector {
        Selector::Random { seed } => *seed,
        _ => 0,
    };
    let mut rng = rng::stream(seed, &[tag::RANDOM_SELECTOR, spec.seed]);
    let mut scene = spec.initial_scene();
    let start = scene.ego.route_progress;
    let mut events = Events::default();
    let mut motion = Vec::with_capacity(spec.horizon);
    let mut actions = Vec::with_capacity(spec.horizon);
    let mut costs = Vec::with_capacity(spec.horizon);
    loop {
        let (sample, cost) = select(selector, &scene, k, &mut rng)?;
        let features = to_ego_frame(&scene);
        let action = match sample {
            Some(s) => driving::act(&mask_agents(&features, &s)?),
            None => driving::act(&features),
        };
        let out = sim::step(&scene, action, spec)?;
        events = events.union(out.events);
        let e = &out.next_scene.ego;
        motion.push(MotionSample {
            accel: e.accel,
            speed: e.speed,
            curvature: e.curvature,
        });
        actions.push(action.bin());
        costs.push(cost);
        scene = out.next_scene;
        if out.done {
            break;
        }
    }
    Ok(EpisodeResult {
        seed: spec.seed,
        template: spec.template,
        events,
        comfort: sim::comfort_score(&motion, spec.dt, &ComfortConfig::default())?,
        progress: scene.ego.route_progress - start,
        actions,
        costs,
    })
}

/// Runs `f` over `0..n` on up to `workers` threads; results keep index
/// order, so the outcome does not depend on scheduling.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every index evaluated"))
        .collect()
}

/// Evaluation scenarios plus their unfiltered reference runs.
#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub specs: Vec<ScenarioSpec>,
    pub reference: Vec<EpisodeResult>,
}

impl EvalCorpus {
    pub fn from_specs(specs: Vec<ScenarioSpec>, workers: usize) -> Result<Self> {
        let reference = par_map(specs.len(), workers, |i| run_episode(&Selector::None, N_MAX, &specs[i]))?;
        Ok(EvalCorpus { specs, reference })
    }

    pub fn build(entries: &[CorpusEntry], workers: usize) -> Result<Self> {
        let specs = par_map(entries.len(), workers, |i| entries[i].build())?;
        Self::from_specs(specs, workers)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub selector: String,
    /// Agents kept per step; `none` reports the slot count.
    pub k: usize,
    pub n_scenarios: usize,
    pub collisions_pct: f64,
    pub offroad_pct: f64,
    pub traffic_light_pct: f64,
    pub stop_line_pct: f64,
    pub comfort: f64,
    pub progress_ratio: f64,
}

impl MetricsReport {
    pub fn aggregate(selector: &str, k: usize, episodes: &[EpisodeResult], reference: &[EpisodeResult]) -> Self {
        let n = episodes.len();
        let nf = n.max(1) as f64;
        let pct = |f: &dyn Fn(&Events) -> bool| 100.0 * episodes.iter().filter(|e| f(&e.events)).count() as f64 / nf;
        let ratio = episodes
            .iter()
            .zip(reference)
            .map(|(e, r)| if r.progress.abs() < 1e-9 { 1.0 } else { e.progress / r.progress })
            .sum::<f64>()
            / nf;
        MetricsReport {
            selector: selector.to_string(),
            k,
            n_scenarios: n,
            collisions_pct: pct(&|e| e.collision),
            offroad_pct: pct(&|e| e.off_road),
            traffic_light_pct: pct(&|e| e.ran_red_light),
            stop_line_pct: pct(&|e| e.skipped_stop_line),
            comfort: episodes.iter().map(|e| e.comfort).sum::<f64>() / nf,
            progress_ratio: ratio.max(0.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub episodes: Vec<EpisodeResult>,
}

pub fn run_closed_loop(selector: &Selector, k: usize, corpus: &EvalCorpus, workers: usize) -> Result<EvalRun> {
    if k == 0 && !matches!(selector, Selector::None) {
        return Err(RdarError::Config("k must be at least 1".into()));
    }
    let k = if matches!(selector, Selector::None) { N_MAX } else { k.min(N_MAX) };
    let episodes = par_map(corpus.len(), workers, |i| run_episode(selector, k, &corpus.specs[i]))?;
    Ok(EvalRun {
        report: MetricsReport::aggregate(selector.id(), k, &episodes, &corpus.reference),
        episodes,
    })
}

/// Every selector at every k; `none` is evaluated once.
pub fn k_sweep(selectors: &[Selector], k_values: &[usize], corpus: &EvalCorpus, workers: usize) -> Result<Vec<MetricsReport>> {
    let mut out = Vec::new();
    for s in selectors {
        if matches!(s, Selector::None) {
            out.push(run_closed_loop(s, N_MAX, corpus, workers)?.report);
            continue;
        }
        for &k in k_values {
            out.push(run_closed_loop(s, k, corpus, workers)?.report);
        }
    }
    Ok(out)
}

pub fn write_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in reports {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricsReport>> {
    csv::Reader::from_reader(r).deserialize().map(|r| r.map_err(RdarError::from)).collect()
}

pub fn write_json<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    serde_json::to_writer_pretty(w, reports)?;
    Ok(())
}

/// Index of the candidate with the fewest collisions at `k` on `corpus`.
/// Ties go to the progress ratio nearest 1, then to the earlier candidate.
/// Returns the per-candidate reports alongside.
pub fn select_checkpoint(
    candidates: &[Arc<ModelParams>],
    k: usize,
    corpus: &EvalCorpus,
    workers: usize,
) -> Result<(usize, Vec<MetricsReport>)> {
    if candidates.is_empty() {
        return Err(RdarError::Argument("no checkpoints to choose from".into()));
    }
    let reports = candidates
        .iter()
        .map(|p| Ok(run_closed_loop(&Selector::Rdar(p.clone()), k, corpus, workers)?.report))
        .collect::<Result<Vec<_>>>()?;
    let key = |r: &MetricsReport| (r.collisions_pct, (r.progress_ratio - 1.0).abs());
    let best = (1..reports.len()).fold(0, |b, i| {
        let (ci, pi) = key(&reports[i]);
        let (cb, pb) = key(&reports[b]);
        if ci < cb || (ci == cb && pi < pb) {
            i
        } else {
            b
        }
    });
    Ok((best, reports))
}

const LIGHT_BLUE: [f64; 3] = [173.0, 216.0, 230.0];
const RED: [f64; 3] = [255.0, 0.0, 0.0];

fn lerp_color(t: f64) -> String {
    let c: Vec<u8> = (0..3).map(|i| (LIGHT_BLUE[i] + (RED[i] - LIGHT_BLUE[i]) * t).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn rect_points(center: crate::geometry::Vec2, heading: f64, length: f64, width: f64, map: &dyn Fn(crate::geometry::Vec2) -> (f64, f64)) -> String {
    let r = crate::geometry::OrientedRect::new(center, heading, length, width);
    r.corners()
        .iter()
        .map(|&p| {
            let (x, y) = map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Top-down view centred on the ego: ego in black, route polyline, agents
/// in grey, and a dot above each of the k most relevant agents coloured
/// from light blue (lowest selected score) to red (highest).
pub fn render_relevance_svg(scene: &SceneState, scores: &ScoreVector, k: usize) -> Result<String> {
    const SIZE: f64 = 600.0;
    const SCALE: f64 = 6.0;
    let ego = scene.ego.position;
    let map = move |p: crate::geometry::Vec2| (SIZE / 2.0 + (p.x - ego.x) * SCALE, SIZE / 2.0 - (p.y - ego.y) * SCALE);
    let k = k.min(scores.existing_count());
    let selected = greedy_topk(scores, k)?;
    let sel_scores: Vec<f64> = selected.indices().iter().map(|&i| scores.logits[i]).collect();
    let lo = sel_scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sel_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##);
    let route: Vec<String> = scene
        .route
        .waypoints
        .points()
        .iter()
        .map(|&p| {
            let (x, y) = map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(
        s,
        r##"<polyline class="route" points="{}" fill="none" stroke="#9e9e9e" stroke-width="2"/>"##,
        route.join(" ")
    );
    for (i, a) in scene.agents.iter().enumerate() {
        if !a.exists {
            continue;
        }
        let _ = writeln!(
            s,
            r##"<polygon class="agent" data-slot="{i}" points="{}" fill="#d0d0d0" stroke="#606060"/>"##,
            rect_points(a.position, a.heading, a.extent.length, a.extent.width, &map)
        );
    }
    let _ = writeln!(
        s,
        r##"<polygon class="ego" points="{}" fill="#000000"/>"##,
        rect_points(ego, scene.ego.heading, EGO_LENGTH, EGO_WIDTH, &map)
    );
    for &i in selected.indices() {
        let t = if hi > lo { (scores.logits[i] - lo) / (hi - lo) } else { 1.0 };
        let (x, y) = map(scene.agents[i].position);
        let _ = writeln!(
            s,
            r#"<circle class="relevance-dot" data-slot="{i}" cx="{x:.2}" cy="{:.2}" r="5" fill="{}"/>"#,
            y - 14.0,
            lerp_color(t)
        );
    }
    let _ = writeln!(
        s,
        r##"<defs><linearGradient id="relevance-scale"><stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"##,
        lerp_color(0.0),
        lerp_color(1.0)
    );
    let _ = writeln!(
        s,
        r##"<g class="legend"><rect x="12" y="{:.0}" width="120" height="10" fill="url(#relevance-scale)"/><text x="12" y="{:.0}" font-size="10">low</text><text x="112" y="{:.0}" font-size="10">high</text></g>"##,
        SIZE - 30.0,
        SIZE - 8.0,
        SIZE - 8.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// SVG frames of an RDAR closed-loop run, one per step.
pub fn relevance_frames(params: &ModelParams, spec: &ScenarioSpec, k: usize) -> Result<Vec<String>> {
    let mut scene = spec.initial_scene();
    let mut frames = Vec::new();
    loop {
        let features = to_ego_frame(&scene);
        let out = model::forward(params, &features)?;
        let kk = k.min(features.existing_count());
        frames.push(render_relevance_svg(&scene, &out.scores, kk)?);
        let sample = greedy_topk(&out.scores, kk)?;
        let step = sim::step(&scene, driving::act(&mask_agents(&features, &sample)?), spec)?;
        scene = step.next_scene;
        if step.done {
            break;
        }
    }
    Ok(frames)
}
