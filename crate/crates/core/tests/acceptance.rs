//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured quantity and the pinned tolerance.
//!
//! Criteria 8 and 9 share one desk-preset training run. The checkpoint with
//! the fewest validation collisions at k=4 is evaluated on the held-out
//! corpus. `RDAR_ACCEPT_UPDATES` overrides the preset's update budget.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::Rng;
use rdar_core::driving::policy_distribution;
use rdar_core::evaluation::{run_closed_loop, select_checkpoint, write_csv, EvalCorpus, MetricsReport, Selector};
use rdar_core::model::{self, checkpoint, init_params, Architecture, ModelParams};
use rdar_core::rng;
use rdar_core::scenario::{self, eval_corpus, validation_corpus, CorpusEntry, Template};
use rdar_core::scene::{mask_agents, to_ego_frame, AGENT_FEATURE_DIM, F_EXISTS, N_MAX};
use rdar_core::selection::{gumbel_topk, log_likelihood, ordered_samples, sample_probability, softmax_scores, KSample, ScoreVector};
use rdar_core::sim::{self, DrivingAction};
use rdar_core::trainer::{self, compute_losses_with_targets, vtrace, vtrace_from, SmoothingTarget, TrainerConfig, Transition};

const WORKERS: usize = 8;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn scores(logits: &[f64]) -> ScoreVector {
    let mut s = ScoreVector {
        logits: [0.0; N_MAX],
        exists: [false; N_MAX],
    };
    s.logits[..logits.len()].copy_from_slice(logits);
    s.exists[..logits.len()].iter_mut().for_each(|e| *e = true);
    s
}

/// Sequential draw probability computed from scratch.
fn sequential_probability(logits: &[f64], sample: &[usize]) -> f64 {
    let w: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
    let mut remaining: f64 = w.iter().sum();
    let mut p = 1.0;
    for &i in sample {
        p *= w[i] / remaining;
        remaining -= w[i];
    }
    p
}

#[test]
fn criterion_1_gumbel_matches_sequential_law() {
    let start = Instant::now();
    let cases = [
        vec![0.0, 0.0, 0.0, 0.0, 0.0],
        vec![2.0, 1.0, 0.0, -1.0, -2.0],
        vec![-0.3, 1.7, 0.4, 3.1, -2.2],
    ];
    let draws = 1_000_000;
    let mut worst: f64 = 0.0;
    for (c, logits) in cases.iter().enumerate() {
        let s = scores(logits);
        let mut r = rng::stream(100 + c as u64, &[]);
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for _ in 0..draws {
            let k = gumbel_topk(&s, 2, &mut r).unwrap();
            *counts.entry((k.indices()[0], k.indices()[1])).or_default() += 1;
        }
        let mut tv = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    let emp = *counts.get(&(i, j)).unwrap_or(&0) as f64 / draws as f64;
                    tv += (emp - sequential_probability(logits, &[i, j])).abs();
                }
            }
        }
        worst = worst.max(0.5 * tv);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 0.005 && secs < 30.0;
    report(1, pass, format!("max TV {worst:.5} (< 0.005), {secs:.1}s (< 30s)"));
    assert!(pass);
}

#[test]
fn criterion_2_likelihood_consistency() {
    let mut r = rng::stream(2, &[]);
    let mut worst_ll: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=12);
        let logits: Vec<f64> = (0..n).map(|_| r.gen_range(-4.0..4.0)).collect();
        let s = scores(&logits);
        let k = r.gen_range(1..=n);
        let sample = gumbel_topk(&s, k, &mut r).unwrap();
        let d = softmax_scores(&s).unwrap();
        let gap = (log_likelihood(&d, &sample).unwrap().exp() - sample_probability(&d, &sample).unwrap()).abs();
        worst_ll = worst_ll.max(gap);
    }
    let mut worst_sum: f64 = 0.0;
    for n in 1..=7 {
        for k in 1..=n {
            let logits: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
            let d = softmax_scores(&scores(&logits)).unwrap();
            let items: Vec<usize> = (0..n).collect();
            let total: f64 = ordered_samples(&items, k)
                .into_iter()
                .map(|s| sample_probability(&d, &KSample::new(s)).unwrap())
                .sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
    }
    let pass = worst_ll <= 1e-12 && worst_sum <= 1e-12;
    report(2, pass, format!("|exp(ll) - P| max {worst_ll:.2e}, |sum - 1| max {worst_sum:.2e} (<= 1e-12)"));
    assert!(pass);
}

fn perturbed(arch: Architecture, seed: u64) -> ModelParams {
    let mut p = init_params(seed, arch);
    let mut r = rng::stream(seed, &[7]);
    for v in p.values.iter_mut() {
        *v += r.gen_range(-0.2..0.2);
    }
    p
}

/// Three agents over three steps; the first agent leaves before the last.
fn fixture(params: &ModelParams) -> Vec<Transition> {
    let spec = scenario::generate(11, Template::MixedUrban, 6).unwrap();
    let mut scene = spec.initial_scene();
    let keep: Vec<usize> = scene.existing_slots().take(3).collect();
    for (i, a) in scene.agents.iter_mut().enumerate() {
        a.exists &= keep.contains(&i);
    }
    let mut out = Vec::new();
    for t in 0..3 {
        let mut f = to_ego_frame(&scene);
        let mut ids = scene.agent_ids();
        if t == 2 {
            f.agents[keep[0]] = [0.0; AGENT_FEATURE_DIM];
        }
        for s in 0..N_MAX {
            if f.agents[s][F_EXISTS] == 0.0 {
                ids[s] = None;
            }
        }
        let fwd = model::forward(params, &f).unwrap();
        let sample = KSample::new(f.existing_slots().into_iter().rev().take(2).collect());
        let ll = log_likelihood(&softmax_scores(&fwd.scores).unwrap(), &sample).unwrap();
        out.push(Transition {
            features: f,
            sample,
            behavior_log_likelihood: ll - 0.3 + 0.2 * t as f64,
            reward: [1.5, -0.7, 2.0][t],
            value_estimate: fwd.value,
            done: t == 2,
            k_used: 2,
            scores_behavior: fwd.scores,
            agent_ids: ids,
        });
        scene = sim::step(&scene, DrivingAction::new(4).unwrap(), &spec).unwrap().next_scene;
    }
    out
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6)
}

fn central_difference(p: &ModelParams, i: usize, f: &dyn Fn(&ModelParams) -> f64) -> f64 {
    let h = 1e-5;
    let mut a = p.clone();
    a.values[i] += h;
    let mut b = p.clone();
    b.values[i] -= h;
    (f(&a) - f(&b)) / (2.0 * h)
}

#[test]
fn criterion_3_gradient_suite() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut where_worst = String::new();
    let mut note = |e: f64, what: String| {
        if e > worst {
            worst = e;
            where_worst = what;
        }
    };

    // model gradients for every architecture
    for arch in Architecture::ALL {
        let p = perturbed(arch, 3);
        let f = fixture(&p)[0].features.clone();
        let out = model::forward(&p, &f).unwrap();
        let mut dl = [0.0; N_MAX];
        for (j, s) in out.scores.existing_slots().into_iter().enumerate() {
            dl[s] = 0.9 - 0.55 * j as f64;
        }
        let dv = 0.6;
        let objective = |q: &ModelParams| {
            let o = model::forward(q, &f).unwrap();
            (0..N_MAX).filter(|&i| o.scores.exists[i]).map(|i| dl[i] * o.scores.logits[i]).sum::<f64>() + dv * o.value
        };
        let g = model::backward(&p, &out.tape, &dl, dv).unwrap();
        for i in 0..p.values.len() {
            note(rel_err(g[i], central_difference(&p, i, &objective)), format!("{arch} model param {i}"));
        }
    }

    // every loss component, each smoothing target
    let p = perturbed(Architecture::AgentFeatures, 21);
    let tr = fixture(&p);
    let vt = vtrace(&tr, &None, &p, &TrainerConfig::default()).unwrap();
    let components = [("policy", 0.0, 0.0, 0.0), ("critic", 1.0, 0.0, 0.0), ("entropy", 0.0, 1.0, 0.0), ("smoothing", 0.0, 0.0, 1.0)];
    for target in [SmoothingTarget::Logits, SmoothingTarget::Probabilities] {
        let base = TrainerConfig {
            lambda_critic: 0.0,
            lambda_entropy: 0.0,
            lambda_smoothing: 0.0,
            smoothing_on: target,
            ..TrainerConfig::default()
        };
        let (_, g_policy) = compute_losses_with_targets(&[&tr], &[vt.clone()], &p, &base).unwrap();
        for (name, wc, we, ws) in components {
            let cfg = TrainerConfig {
                lambda_critic: wc,
                lambda_entropy: we,
                lambda_smoothing: ws,
                ..base.clone()
            };
            let (_, g) = compute_losses_with_targets(&[&tr], &[vt.clone()], &p, &cfg).unwrap();
            let objective = |q: &ModelParams| {
                let (rep, _) = compute_losses_with_targets(&[&tr], &[vt.clone()], q, &cfg).unwrap();
                match name {
                    "policy" => rep.policy,
                    "critic" => rep.critic,
                    "entropy" => rep.entropy,
                    _ => rep.smoothing,
                }
            };
            for i in 0..p.values.len() {
                let analytic = if name == "policy" { g[i] } else { g[i] - g_policy[i] };
                note(rel_err(analytic, central_difference(&p, i, &objective)), format!("{name} loss ({target:?}) param {i}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 120.0;
    report(3, pass, format!("worst relative error {worst:.2e} at {where_worst} (< 1e-4), {secs:.1}s (< 120s)"));
    assert!(pass);
}

fn discounted_recursion(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        if dones[t] {
            next = 0.0;
        }
        out[t] = rewards[t] + gamma * next;
        next = out[t];
    }
    out
}

#[test]
fn criterion_4_vtrace_on_policy() {
    let mut r = rng::stream(4, &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = 50;
        let rewards: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| r.gen_range(-20.0..20.0)).collect();
        let mut dones = vec![false; n];
        if r.gen_bool(0.5) {
            dones[n - 1] = true;
        }
        let bootstrap = r.gen_range(-10.0..10.0);
        let out = vtrace_from(&rewards, &values, &vec![0.0; n], &dones, bootstrap, 0.95, 1.0, 1.0).unwrap();
        let oracle = discounted_recursion(&rewards, &dones, bootstrap, 0.95);
        for t in 0..n {
            worst = worst.max((out.value_targets[t] - oracle[t]).abs());
        }
    }
    let pass = worst <= 1e-10;
    report(4, pass, format!("max |v_s - G_s| {worst:.2e} (<= 1e-10)"));
    assert!(pass);
}

#[test]
fn criterion_5_masking_invariance() {
    let params = perturbed(Architecture::AgentFeatures, 5);
    let mut r = rng::stream(5, &[]);
    let mut failures = 0;
    for trial in 0..1000u64 {
        let spec = scenario::generate(trial, Template::ALL[trial as usize % 4], r.gen_range(4..=16)).unwrap();
        let mut scene = spec.initial_scene();
        let slots: Vec<usize> = scene.existing_slots().collect();
        let hidden = slots[r.gen_range(0..slots.len())];
        let kept: Vec<usize> = slots.iter().copied().filter(|&s| s != hidden && r.gen_bool(0.6)).collect();
        let sample = KSample::new(kept.clone());
        let before = mask_agents(&to_ego_frame(&scene), &sample).unwrap();
        let a = &mut scene.agents[hidden];
        a.position.x += r.gen_range(-50.0..50.0);
        a.position.y += r.gen_range(-50.0..50.0);
        a.heading = r.gen_range(-3.0..3.0);
        a.speed = r.gen_range(0.0..15.0);
        let after = mask_agents(&to_ego_frame(&scene), &sample).unwrap();
        let same_policy = policy_distribution(&before).probs.map(f64::to_bits) == policy_distribution(&after).probs.map(f64::to_bits);
        let (lb, la) = (model::forward(&params, &before).unwrap(), model::forward(&params, &after).unwrap());
        let same_logits = kept.iter().all(|&s| lb.scores.logits[s].to_bits() == la.scores.logits[s].to_bits());
        if !(same_policy && same_logits) {
            failures += 1;
        }
    }
    let pass = failures == 0;
    report(5, pass, format!("{failures} of 1000 trials differ (0 allowed)"));
    assert!(pass);
}

fn small_corpus(n: usize) -> EvalCorpus {
    let entries: Vec<CorpusEntry> = eval_corpus(n.div_ceil(4), (6, 16)).into_iter().take(n).collect();
    EvalCorpus::build(&entries, WORKERS).unwrap()
}

#[test]
fn criterion_6_no_filter_equivalence() {
    let corpus = small_corpus(100);
    let none = run_closed_loop(&Selector::None, N_MAX, &corpus, WORKERS).unwrap();
    let params = Arc::new(perturbed(Architecture::FullScene, 6));
    let mut mismatches = 0;
    for s in [Selector::Rdar(params), Selector::Closest, Selector::Random { seed: 6 }] {
        let run = run_closed_loop(&s, N_MAX, &corpus, WORKERS).unwrap();
        for (a, b) in run.episodes.iter().zip(&none.episodes) {
            let same = a.actions == b.actions
                && a.events == b.events
                && a.progress.to_bits() == b.progress.to_bits()
                && a.comfort.to_bits() == b.comfort.to_bits();
            if !same {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report(6, pass, format!("{mismatches} of 300 rollouts differ from selector=none (0 allowed)"));
    assert!(pass);
}

#[test]
fn criterion_7_complexity_accounting() {
    let corpus = small_corpus(40);
    let params = Arc::new(perturbed(Architecture::FullScene, 7));
    let mut bad_steps = 0;
    let mut steps = 0;
    for k in [1, 4] {
        for e in run_closed_loop(&Selector::Attribution, k, &corpus, WORKERS).unwrap().episodes {
            for c in e.costs {
                steps += 1;
                bad_steps += usize::from(c.policy_evaluations != c.present + 1 || c.model_forwards != 0);
            }
        }
        for e in run_closed_loop(&Selector::Rdar(params.clone()), k, &corpus, WORKERS).unwrap().episodes {
            for c in e.costs {
                steps += 1;
                bad_steps += usize::from(c.model_forwards != 1 || c.policy_evaluations != 0);
            }
        }
    }
    let pass = bad_steps == 0;
    report(7, pass, format!("{bad_steps} of {steps} steps with wrong counters (0 allowed)"));
    assert!(pass);
}

struct Trained {
    chosen: String,
    corpus: EvalCorpus,
    rdar: HashMap<usize, MetricsReport>,
    closest4: MetricsReport,
    random4: MetricsReport,
    none: MetricsReport,
    updates: usize,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let updates = std::env::var("RDAR_ACCEPT_UPDATES")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(TrainerConfig::desk().total_steps);
        let cfg = TrainerConfig {
            total_steps: updates,
            seed: 1,
            ..TrainerConfig::desk()
        };
        let dir = tempfile::tempdir().unwrap();
        let out = trainer::train(&cfg, Some(dir.path())).unwrap();
        let candidates: Vec<Arc<ModelParams>> = out.checkpoints.iter().map(|p| Arc::new(checkpoint::load(p).unwrap())).collect();
        let validation = EvalCorpus::build(&validation_corpus(100, (6, 16)), WORKERS).unwrap();
        let (best, _) = select_checkpoint(&candidates, 4, &validation, WORKERS).unwrap();
        let params = candidates[best].clone();
        let chosen = out.checkpoints[best].file_name().unwrap().to_string_lossy().into_owned();
        let corpus = EvalCorpus::build(&eval_corpus(500, (6, 16)), WORKERS).unwrap();
        let rdar = [2, 4, 8, 16]
            .into_iter()
            .map(|k| (k, run_closed_loop(&Selector::Rdar(params.clone()), k, &corpus, WORKERS).unwrap().report))
            .collect();
        let closest4 = run_closed_loop(&Selector::Closest, 4, &corpus, WORKERS).unwrap().report;
        let random4 = run_closed_loop(&Selector::Random { seed: 1 }, 4, &corpus, WORKERS).unwrap().report;
        let none = run_closed_loop(&Selector::None, N_MAX, &corpus, WORKERS).unwrap().report;
        Trained {
            chosen,
            corpus,
            rdar,
            closest4,
            random4,
            none,
            updates,
        }
    })
}

#[test]
fn criterion_8_table_ordering() {
    let t = trained();
    let r = &t.rdar[&4];
    let (c, rnd) = (t.closest4.collisions_pct, t.random4.collisions_pct);
    let pass = r.collisions_pct <= c && r.collisions_pct <= 0.25 * rnd && (0.9..=1.1).contains(&r.progress_ratio);
    report(
        8,
        pass,
        format!(
            "k=4 on {} scenarios, {} of {} updates: collisions rdar {:.2}% closest {:.2}% random {:.2}% (need rdar <= closest and <= {:.2}), progress ratio {:.3} (need [0.9, 1.1])",
            t.corpus.len(),
            t.chosen,
            t.updates,
            r.collisions_pct,
            c,
            rnd,
            0.25 * rnd,
            r.progress_ratio
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_k_trend() {
    let t = trained();
    let ks = [2, 4, 8, 16];
    let coll: Vec<f64> = ks.iter().map(|k| t.rdar[k].collisions_pct).collect();
    let monotone = coll.windows(2).all(|w| w[1] <= w[0] + 1.0);
    let near_none = (coll[3] - t.none.collisions_pct).abs() <= 1.0;
    let pass = monotone && near_none;
    report(
        9,
        pass,
        format!(
            "rdar collisions at k=2,4,8,16: {:.2?} (non-increasing within 1 point), none {:.2}% (k=16 within 1 point)",
            coll, t.none.collisions_pct
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let entries: Vec<CorpusEntry> = eval_corpus(5, (6, 16));
        let cfg = TrainerConfig {
            total_steps: 20,
            seed: 10,
            checkpoint_interval: 10,
            ..TrainerConfig::desk()
        };
        let trained = trainer::train(&cfg, Some(&out)).unwrap();
        let params = Arc::new(checkpoint::load(trained.checkpoints.last().unwrap()).unwrap());
        let corpus = EvalCorpus::build(&entries, WORKERS).unwrap();
        let reports: Vec<MetricsReport> = [Selector::Rdar(params), Selector::Closest, Selector::Random { seed: 10 }]
            .iter()
            .map(|s| run_closed_loop(s, 4, &corpus, WORKERS).unwrap().report)
            .collect();
        let mut csv = Vec::new();
        write_csv(&mut csv, &reports).unwrap();
        let ckpts: Vec<Vec<u8>> = trained.checkpoints.iter().map(|p| std::fs::read(p).unwrap()).collect();
        (ckpts, csv)
    };
    let (a_ckpt, a_csv) = run("a");
    let (b_ckpt, b_csv) = run("b");
    let pass = a_ckpt == b_ckpt && a_csv == b_csv && !a_ckpt.is_empty();
    report(10, pass, format!("{} checkpoints and the CSV report byte-identical across two runs: {pass}", a_ckpt.len()));
    assert!(pass);
}
