//! Off-policy actor-critic training with V-trace corrections.
//!
//! Actors roll out episodes under a parameter snapshot, sampling k agents
//! per step with Gumbel top-k and letting the frozen driving policy act on
//! the masked scene. The learner recomputes log-likelihoods under the
//! current parameters, corrects for snapshot staleness with clipped
//! importance ratios and minimizes
//!
//! ```text
//! policy + λc·critic − λe·entropy + λs·smoothing
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use crossbeam_channel::{bounded, RecvTimeoutError};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::driving;
use crate::error::{RdarError, Result};
use crate::model::{self, checkpoint, Architecture, ForwardOutput, ModelParams};
use crate::rng::{self, tag};
use crate::scenario::{self, ScenarioSpec, Template};
use crate::scene::{mask_agents, to_ego_frame, SceneFeatures, N_MAX};
use crate::selection::{entropy_with_grad, gumbel_topk, log_likelihood_with_grad, KSample, ScoreVector};
use crate::sim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingTarget {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub lambda_critic: f64,
    pub lambda_entropy: f64,
    pub lambda_smoothing: f64,
    pub gamma: f64,
    /// Multiplies every reward before the return computation.
    pub reward_scale: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
    /// Maximum steps per rollout; episodes shorter than this end at `done`.
    pub rollout_length: usize,
    /// Episodes per learner update.
    pub batch_size: usize,
    /// Number of learner updates.
    pub total_steps: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub architecture: Architecture,
    pub seed: u64,
    pub templates: Vec<Template>,
    pub n_agents_min: usize,
    pub n_agents_max: usize,
    pub actors: usize,
    /// Single-threaded collection with the learner's own parameters.
    pub synchronous: bool,
    /// Updates between snapshot publications.
    pub snapshot_interval: usize,
    /// Updates between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub queue_capacity: usize,
    pub starvation_timeout_ms: u64,
    pub smoothing_on: SmoothingTarget,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 2e-5,
            lambda_critic: 0.1,
            lambda_entropy: 0.2,
            lambda_smoothing: 0.05,
            gamma: 0.95,
            reward_scale: 1.0,
            rho_bar: 1.0,
            c_bar: 1.0,
            rollout_length: scenario::DEFAULT_HORIZON,
            batch_size: 4,
            total_steps: 1000,
            k_min: 1,
            k_max: 8,
            architecture: Architecture::FullScene,
            seed: 0,
            templates: Template::ALL.to_vec(),
            n_agents_min: 6,
            n_agents_max: 16,
            actors: 1,
            synchronous: true,
            snapshot_interval: 1,
            checkpoint_interval: 0,
            queue_capacity: 8,
            starvation_timeout_ms: 60_000,
            smoothing_on: SmoothingTarget::Logits,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl TrainerConfig {
    /// Settings that learn within a desk-scale update budget: a larger step,
    /// rewards scaled so a collision costs 2, truncated traces, a weaker
    /// entropy bonus, larger batches and a checkpoint every 100 updates for
    /// validation-based selection.
    pub fn desk() -> Self {
        TrainerConfig {
            learning_rate: 1e-3,
            reward_scale: 0.02,
            c_bar: 0.5,
            lambda_entropy: 0.05,
            batch_size: 8,
            total_steps: 1500,
            checkpoint_interval: 100,
            ..TrainerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RdarError::Config(m.to_string()));
        let finite = [
            self.learning_rate,
            self.lambda_critic,
            self.lambda_entropy,
            self.lambda_smoothing,
            self.gamma,
            self.reward_scale,
            self.rho_bar,
            self.c_bar,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_epsilon,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("trainer settings must be finite");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.lambda_critic < 0.0 || self.lambda_entropy < 0.0 || self.lambda_smoothing < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(self.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.c_bar > 0.0 && self.rho_bar >= self.c_bar) {
            return bad("clipping thresholds need rho_bar >= c_bar > 0");
        }
        if self.rollout_length == 0 || self.batch_size == 0 || self.actors == 0 || self.queue_capacity == 0 {
            return bad("rollout_length, batch_size, actors and queue_capacity must be at least 1");
        }
        if self.snapshot_interval == 0 {
            return bad("snapshot_interval must be at least 1");
        }
        if self.k_min == 0 || self.k_min > self.k_max || self.k_max > N_MAX {
            return bad("k range must satisfy 1 <= k_min <= k_max <= 32");
        }
        if self.templates.is_empty() {
            return bad("at least one template is required");
        }
        if self.n_agents_min < scenario::MIN_AGENTS || self.n_agents_min > self.n_agents_max || self.n_agents_max > N_MAX {
            return bad("agent count range must lie within [4, 32]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_epsilon > 0.0) {
            return bad("optimizer decay rates must lie in [0, 1) and epsilon must be positive");
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("max_grad_norm must be positive");
            }
        }
        if self.starvation_timeout_ms == 0 {
            return bad("starvation_timeout_ms must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: SceneFeatures,
    pub sample: KSample,
    /// Log-likelihood of `sample` under the behavior snapshot.
    pub behavior_log_likelihood: f64,
    pub reward: f64,
    pub value_estimate: f64,
    pub done: bool,
    pub k_used: usize,
    pub scores_behavior: ScoreVector,
    /// Persistent agent id per slot, for pairing across steps.
    pub agent_ids: [Option<u32>; N_MAX],
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub episode: u64,
    pub template: Template,
    pub k: usize,
    pub transitions: Vec<Transition>,
    /// Features after the last transition when the rollout was cut short.
    pub bootstrap: Option<SceneFeatures>,
    pub behavior_version: u64,
    pub collided: bool,
    /// Forward passes of the behavior snapshot, kept when the learner can
    /// reuse them.
    forwards: Option<Vec<ForwardOutput>>,
}

impl Trajectory {
    pub fn episode_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VTraceOutputs {
    pub value_targets: Vec<f64>,
    pub advantages: Vec<f64>,
    pub rhos: Vec<f64>,
}

/// Uniform k over `{k_min, ..., min(k_max, existing_count)}`; 0 when no
/// agent exists.
pub fn randomize_k<R: Rng + ?Sized>(rng: &mut R, existing_count: usize, cfg: &TrainerConfig) -> usize {
    let hi = cfg.k_max.min(existing_count);
    if hi == 0 {
        return 0;
    }
    let lo = cfg.k_min.min(hi);
    rng.gen_range(lo..=hi)
}

struct Rollout {
    transitions: Vec<Transition>,
    forwards: Vec<ForwardOutput>,
    bootstrap: Option<SceneFeatures>,
    collided: bool,
}

fn rollout<R: Rng + ?Sized>(
    params: &ModelParams,
    spec: &ScenarioSpec,
    k: usize,
    rng: &mut R,
    max_len: usize,
    keep_forwards: bool,
) -> Result<Rollout> {
    let mut scene = spec.initial_scene();
    let mut out = Rollout {
        transitions: Vec::with_capacity(max_len.min(spec.horizon)),
        forwards: Vec::new(),
        bootstrap: None,
        collided: false,
    };
    let mut done = false;
    while out.transitions.len() < max_len {
        let features = to_ego_frame(&scene);
        let fwd = model::forward(params, &features)?;
        let k_used = k.min(features.existing_count());
        let sample = gumbel_topk(&fwd.scores, k_used, rng)?;
        let (ll, _) = log_likelihood_with_grad(&fwd.scores, &sample)?;
        let action = driving::act(&mask_agents(&features, &sample)?);
        let step = sim::step(&scene, action, spec)?;
        out.collided |= step.events.collision;
        out.transitions.push(Transition {
            sample,
            behavior_log_likelihood: ll,
            reward: step.reward,
            value_estimate: fwd.value,
            done: step.done,
            k_used,
            scores_behavior: fwd.scores.clone(),
            agent_ids: scene.agent_ids(),
            features,
        });
        if keep_forwards {
            out.forwards.push(fwd);
        }
        scene = step.next_scene;
        if step.done {
            done = true;
            break;
        }
    }
    if !done {
        out.bootstrap = Some(to_ego_frame(&scene));
    }
    Ok(out)
}

/// One closed-loop episode under `params`, sampling `k` agents per step
/// (fewer when fewer exist).
pub fn collect_rollout<R: Rng + ?Sized>(
    params: &ModelParams,
    spec: &ScenarioSpec,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    Ok(rollout(params, spec, k, rng, spec.horizon, false)?.transitions)
}

/// The scenario, k and rollout stream of training episode `episode`.
pub fn training_episode(cfg: &TrainerConfig, episode: u64) -> Result<(ScenarioSpec, usize, rng::StreamRng)> {
    let mut draw = rng::stream(cfg.seed, &[tag::EPISODE, episode]);
    let template = cfg.templates[draw.gen_range(0..cfg.templates.len())];
    let n_agents = draw.gen_range(cfg.n_agents_min..=cfg.n_agents_max);
    let spec = scenario::generate(rng::mix(cfg.seed, &[tag::SCENARIO, episode]), template, n_agents)?;
    let existing = spec.initial_scene().existing_count();
    let k = randomize_k(&mut rng::stream(cfg.seed, &[tag::K_DRAW, episode]), existing, cfg);
    Ok((spec, k, rng::stream(cfg.seed, &[tag::ROLLOUT, episode])))
}

fn run_episode(cfg: &TrainerConfig, episode: u64, params: &ModelParams, version: u64, keep: bool) -> Result<Trajectory> {
    let (spec, k, mut r) = training_episode(cfg, episode)?;
    let ro = rollout(params, &spec, k, &mut r, cfg.rollout_length, keep)?;
    Ok(Trajectory {
        episode,
        template: spec.template,
        k,
        transitions: ro.transitions,
        bootstrap: ro.bootstrap,
        behavior_version: version,
        collided: ro.collided,
        forwards: keep.then_some(ro.forwards),
    })
}

/// V-trace targets from per-step rewards, values under the current
/// parameters and log importance ratios `log π − log μ`.
#[allow(clippy::too_many_arguments)]
pub fn vtrace_from(
    rewards: &[f64],
    values: &[f64],
    log_ratios: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    rho_bar: f64,
    c_bar: f64,
) -> Result<VTraceOutputs> {
    let n = rewards.len();
    if n == 0 || values.len() != n || log_ratios.len() != n || dones.len() != n {
        return Err(RdarError::Argument("vtrace needs equally long, non-empty inputs".into()));
    }
    let mut rhos = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for &lr in log_ratios {
        let ratio = lr.exp();
        if !ratio.is_finite() || ratio.is_nan() {
            return Err(RdarError::numeric("importance ratio"));
        }
        rhos.push(ratio.min(rho_bar));
        cs.push(ratio.min(c_bar));
    }
    let next_value = |t: usize| -> f64 {
        if dones[t] {
            0.0
        } else if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap
        }
    };
    let mut targets = vec![0.0; n];
    let mut carry = 0.0;
    for t in (0..n).rev() {
        if dones[t] {
            carry = 0.0;
        }
        let delta = rhos[t] * (rewards[t] + gamma * next_value(t) - values[t]);
        carry = delta + gamma * cs[t] * carry;
        targets[t] = values[t] + carry;
    }
    let advantages = (0..n)
        .map(|t| {
            let v_next = if dones[t] {
                0.0
            } else if t + 1 < n {
                targets[t + 1]
            } else {
                bootstrap
            };
            rhos[t] * (rewards[t] + gamma * v_next - values[t])
        })
        .collect::<Vec<_>>();
    if targets.iter().chain(&advantages).any(|v| !v.is_finite()) {
        return Err(RdarError::numeric("v-trace targets"));
    }
    Ok(VTraceOutputs {
        value_targets: targets,
        advantages,
        rhos,
    })
}

/// Current-parameter evaluation of one step.
struct StepEval {
    fwd: ForwardOutput,
    ll: f64,
    dll: [f64; N_MAX],
}

fn eval_step(fwd: ForwardOutput, sample: &KSample) -> Result<StepEval> {
    let (ll, dll) = log_likelihood_with_grad(&fwd.scores, sample)?;
    Ok(StepEval { fwd, ll, dll })
}

fn evaluate(transitions: &[Transition], params: &ModelParams) -> Result<Vec<StepEval>> {
    transitions
        .iter()
        .map(|t| eval_step(model::forward(params, &t.features)?, &t.sample))
        .collect()
}

fn bootstrap_value(bootstrap: &Option<SceneFeatures>, params: &ModelParams) -> Result<f64> {
    match bootstrap {
        Some(f) => Ok(model::forward(params, f)?.value),
        None => Ok(0.0),
    }
}

fn vtrace_evals(
    transitions: &[Transition],
    evals: &[StepEval],
    bootstrap: f64,
    cfg: &TrainerConfig,
) -> Result<VTraceOutputs> {
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward * cfg.reward_scale).collect();
    let values: Vec<f64> = evals.iter().map(|e| e.fwd.value).collect();
    let log_ratios: Vec<f64> = transitions
        .iter()
        .zip(evals)
        .map(|(t, e)| e.ll - t.behavior_log_likelihood)
        .collect();
    let dones: Vec<bool> = transitions.iter().map(|t| t.done).collect();
    vtrace_from(&rewards, &values, &log_ratios, &dones, bootstrap, cfg.gamma, cfg.rho_bar, cfg.c_bar)
}

/// V-trace targets of a trajectory under `params`.
pub fn vtrace(
    transitions: &[Transition],
    bootstrap: &Option<SceneFeatures>,
    params: &ModelParams,
    cfg: &TrainerConfig,
) -> Result<VTraceOutputs> {
    if transitions.is_empty() {
        return Err(RdarError::Argument("vtrace on an empty trajectory".into()));
    }
    let evals = evaluate(transitions, params)?;
    vtrace_evals(transitions, &evals, bootstrap_value(bootstrap, params)?, cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub policy: f64,
    /// Mean squared value error.
    pub critic: f64,
    /// Mean negative entropy, the term added to the total.
    pub entropy: f64,
    pub smoothing: f64,
}

/// Softmax over existing slots of a score vector, zero elsewhere.
fn probs_of(scores: &ScoreVector) -> [f64; N_MAX] {
    let mut p = [0.0; N_MAX];
    let slots = scores.existing_slots();
    if slots.is_empty() {
        return p;
    }
    let max = slots.iter().map(|&i| scores.logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &i in &slots {
        p[i] = (scores.logits[i] - max).exp();
        z += p[i];
    }
    for &i in &slots {
        p[i] /= z;
    }
    p
}

/// Pairs of (slot at t−1, slot at t) holding the same agent.
fn matched_slots(prev: &Transition, cur: &Transition) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (j, id) in cur.agent_ids.iter().enumerate() {
        let Some(id) = id else { continue };
        if let Some(i) = prev.agent_ids.iter().position(|p| *p == Some(*id)) {
            if prev.features.exists(i) && cur.features.exists(j) {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

fn losses_from(
    batch: &[(&[Transition], &[StepEval], &VTraceOutputs)],
    params: &ModelParams,
    cfg: &TrainerConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let n_steps: usize = batch.iter().map(|b| b.0.len()).sum();
    let n_pairs: usize = batch.iter().map(|b| b.0.len().saturating_sub(1)).sum();
    if n_steps == 0 {
        return Err(RdarError::Argument("loss over an empty batch".into()));
    }
    let inv_n = 1.0 / n_steps as f64;
    let inv_p = if n_pairs > 0 { 1.0 / n_pairs as f64 } else { 0.0 };
    let mut rep = LossReport::default();
    let mut grad = vec![0.0; params.values.len()];

    for (trans, evals, vt) in batch {
        let t_len = trans.len();
        let mut dlogits = vec![[0.0; N_MAX]; t_len];
        let mut dvalues = vec![0.0; t_len];
        let phis: Vec<[f64; N_MAX]> = match cfg.smoothing_on {
            SmoothingTarget::Logits => evals.iter().map(|e| e.fwd.scores.logits).collect(),
            SmoothingTarget::Probabilities => evals.iter().map(|e| probs_of(&e.fwd.scores)).collect(),
        };
        let mut dphis = vec![[0.0; N_MAX]; t_len];

        for t in 0..t_len {
            let e = &evals[t];
            let coef = vt.rhos[t] * vt.advantages[t];
            rep.policy -= coef * e.ll * inv_n;
            for s in 0..N_MAX {
                dlogits[t][s] -= coef * e.dll[s] * inv_n;
            }

            let err = e.fwd.value - vt.value_targets[t];
            rep.critic += err * err * inv_n;
            dvalues[t] += cfg.lambda_critic * 2.0 * err * inv_n;

            let (h, dh) = entropy_with_grad(&e.fwd.scores);
            rep.entropy -= h * inv_n;
            for s in 0..N_MAX {
                dlogits[t][s] -= cfg.lambda_entropy * dh[s] * inv_n;
            }

            if t > 0 {
                for (i, j) in matched_slots(&trans[t - 1], &trans[t]) {
                    let d = phis[t][j] - phis[t - 1][i];
                    rep.smoothing += d * d * inv_p;
                    let g = cfg.lambda_smoothing * 2.0 * d * inv_p;
                    dphis[t][j] += g;
                    dphis[t - 1][i] -= g;
                }
            }
        }

        for t in 0..t_len {
            let dphi = &dphis[t];
            match cfg.smoothing_on {
                SmoothingTarget::Logits => {
                    for s in 0..N_MAX {
                        dlogits[t][s] += dphi[s];
                    }
                }
                SmoothingTarget::Probabilities => {
                    let p = &phis[t];
                    let dot: f64 = (0..N_MAX).map(|s| p[s] * dphi[s]).sum();
                    for s in 0..N_MAX {
                        dlogits[t][s] += p[s] * (dphi[s] - dot);
                    }
                }
            }
            model::backward_into(params, &evals[t].fwd.tape, &dlogits[t], dvalues[t], &mut grad)?;
        }
    }

    for (v, name) in [
        (rep.policy, "policy loss"),
        (rep.critic, "critic loss"),
        (rep.entropy, "entropy loss"),
        (rep.smoothing, "smoothing loss"),
    ] {
        if !v.is_finite() {
            return Err(RdarError::numeric(name));
        }
    }
    rep.total = rep.policy + cfg.lambda_critic * rep.critic + cfg.lambda_entropy * rep.entropy + cfg.lambda_smoothing * rep.smoothing;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(RdarError::numeric("loss gradient"));
    }
    Ok((rep, grad))
}

/// Losses and their parameter gradient with the V-trace quantities held
/// fixed, which makes the loss an ordinary function of the parameters.
pub fn compute_losses_with_targets(
    batch: &[&[Transition]],
    targets: &[VTraceOutputs],
    params: &ModelParams,
    cfg: &TrainerConfig,
) -> Result<(LossReport, Vec<f64>)> {
    if batch.len() != targets.len() {
        return Err(RdarError::Argument("one set of targets per trajectory is required".into()));
    }
    let evals = batch.iter().map(|t| evaluate(t, params)).collect::<Result<Vec<_>>>()?;
    let items: Vec<_> = batch
        .iter()
        .zip(&evals)
        .zip(targets)
        .map(|((t, e), v)| (*t, e.as_slice(), v))
        .collect();
    losses_from(&items, params, cfg)
}

/// Full learner loss: V-trace under `params`, then all four components.
pub fn compute_losses(batch: &[Trajectory], params: &ModelParams, cfg: &TrainerConfig) -> Result<(LossReport, Vec<f64>)> {
    let (rep, grad, _) = learner_losses(batch, params, None, cfg)?;
    Ok((rep, grad))
}

/// As [`compute_losses`], reusing stored behavior forward passes when they
/// were produced by the current parameter version. Also returns the mean
/// clipped ratio.
fn learner_losses(
    batch: &[Trajectory],
    params: &ModelParams,
    version: Option<u64>,
    cfg: &TrainerConfig,
) -> Result<(LossReport, Vec<f64>, f64)> {
    let mut evals = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for traj in batch {
        if traj.transitions.is_empty() {
            return Err(RdarError::Argument("empty trajectory in batch".into()));
        }
        let ev = match (&traj.forwards, version) {
            (Some(f), Some(v)) if v == traj.behavior_version => f
                .iter()
                .zip(&traj.transitions)
                .map(|(fw, t)| eval_step(fw.clone(), &t.sample))
                .collect::<Result<Vec<_>>>()?,
            _ => evaluate(&traj.transitions, params)?,
        };
        let vt = vtrace_evals(&traj.transitions, &ev, bootstrap_value(&traj.bootstrap, params)?, cfg)?;
        evals.push(ev);
        targets.push(vt);
    }
    let rho_sum: f64 = targets.iter().flat_map(|t| &t.rhos).sum();
    let rho_n: usize = targets.iter().map(|t| t.rhos.len()).sum();
    let items: Vec<_> = batch
        .iter()
        .zip(&evals)
        .zip(&targets)
        .map(|((t, e), v)| (t.transitions.as_slice(), e.as_slice(), v))
        .collect();
    let (rep, grad) = losses_from(&items, params, cfg)?;
    Ok((rep, grad, rho_sum / rho_n as f64))
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainerConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_epsilon,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub update: usize,
    pub total: f64,
    pub policy: f64,
    pub critic: f64,
    pub entropy: f64,
    pub smoothing: f64,
    pub mean_episode_reward: f64,
    pub collision_rate: f64,
    pub mean_k: f64,
    pub mean_rho: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

struct Snapshot {
    version: u64,
    params: ModelParams,
}

/// Output files of a training run.
struct Outputs {
    dir: PathBuf,
    log: BufWriter<fs::File>,
    checkpoints: Vec<PathBuf>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            log: BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?),
            checkpoints: Vec::new(),
        })
    }

    fn record(&mut self, r: &TrainLogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, r)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    fn checkpoint(&mut self, params: &ModelParams, name: &str) -> Result<()> {
        let path = self.dir.join("checkpoints").join(name);
        checkpoint::save(params, &path)?;
        self.checkpoints.push(path);
        Ok(())
    }
}

struct Learner<'a> {
    cfg: &'a TrainerConfig,
    params: ModelParams,
    adam: Adam,
    log: Vec<TrainLogRecord>,
    out: Option<Outputs>,
}

impl Learner<'_> {
    /// One update; on a non-finite loss or parameter the current
    /// parameters are kept.
    fn update(&mut self, u: usize, batch: &[Trajectory]) -> Result<()> {
        let cfg = self.cfg;
        let res = learner_losses(batch, &self.params, Some(u as u64), cfg).and_then(|(rep, mut grad, rho)| {
            if let Some(c) = cfg.max_grad_norm {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    grad.iter_mut().for_each(|g| *g *= c / norm);
                }
            }
            let mut next = self.params.values.clone();
            let mut adam = self.adam.clone();
            adam.step(&mut next, &grad);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(RdarError::numeric("parameter update"));
            }
            Ok((rep, rho, next, adam))
        });
        let (rep, rho, next, adam) = res?;
        self.params.values = next;
        self.adam = adam;
        let n = batch.len() as f64;
        let rec = TrainLogRecord {
            update: u,
            total: rep.total,
            policy: rep.policy,
            critic: rep.critic,
            entropy: rep.entropy,
            smoothing: rep.smoothing,
            mean_episode_reward: batch.iter().map(Trajectory::episode_reward).sum::<f64>() / n,
            collision_rate: batch.iter().filter(|t| t.collided).count() as f64 / n,
            mean_k: batch.iter().map(|t| t.k as f64).sum::<f64>() / n,
            mean_rho: rho,
        };
        if let Some(out) = &mut self.out {
            out.record(&rec)?;
            if cfg.checkpoint_interval > 0 && (u + 1) % cfg.checkpoint_interval == 0 {
                out.checkpoint(&self.params, &format!("ckpt_{:06}.rdar", u + 1))?;
            }
        }
        self.log.push(rec);
        Ok(())
    }

    fn finish(mut self) -> Result<TrainOutcome> {
        let mut checkpoints = Vec::new();
        if let Some(mut out) = self.out.take() {
            out.checkpoint(&self.params, "final.rdar")?;
            out.log.flush()?;
            checkpoints = out.checkpoints;
        }
        Ok(TrainOutcome {
            params: self.params,
            log: self.log,
            checkpoints,
        })
    }
}

/// Trains from freshly initialized parameters. With `out_dir` set, writes
/// `train_log.jsonl` and `checkpoints/` beneath it.
pub fn train(cfg: &TrainerConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_from(cfg, model::init_params(cfg.seed, cfg.architecture), out_dir)
}

pub fn train_from(cfg: &TrainerConfig, init: ModelParams, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.validate()?;
    if init.arch != cfg.architecture {
        return Err(RdarError::Config("initial parameters do not match the configured architecture".into()));
    }
    let n = init.values.len();
    let mut learner = Learner {
        cfg,
        params: init,
        adam: Adam::new(n, cfg),
        log: Vec::with_capacity(cfg.total_steps),
        out: out_dir.map(Outputs::create).transpose()?,
    };
    let run = if cfg.synchronous {
        train_sync(&mut learner)
    } else {
        train_async(&mut learner)
    };
    if let Err(e) = run {
        if let Some(out) = &mut learner.out {
            out.checkpoint(&learner.params, "last_good.rdar")?;
            out.log.flush()?;
        }
        return Err(e);
    }
    learner.finish()
}

fn train_sync(l: &mut Learner) -> Result<()> {
    let cfg = l.cfg;
    let mut behavior = Snapshot {
        version: 0,
        params: l.params.clone(),
    };
    for u in 0..cfg.total_steps {
        if u % cfg.snapshot_interval == 0 {
            behavior = Snapshot {
                version: u as u64,
                params: l.params.clone(),
            };
        }
        let batch = (0..cfg.batch_size)
            .map(|b| {
                let e = (u * cfg.batch_size + b) as u64;
                run_episode(cfg, e, &behavior.params, behavior.version, true)
            })
            .collect::<Result<Vec<_>>>()?;
        l.update(u, &batch)?;
    }
    Ok(())
}

fn train_async(l: &mut Learner) -> Result<()> {
    let cfg = l.cfg;
    let snapshot = RwLock::new(Arc::new(Snapshot {
        version: 0,
        params: l.params.clone(),
    }));
    let next_episode = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    let timeout = Duration::from_millis(cfg.starvation_timeout_ms);
    let (tx, rx) = bounded::<Result<Trajectory>>(cfg.queue_capacity);

    std::thread::scope(|s| {
        for _ in 0..cfg.actors {
            let tx = tx.clone();
            let (snapshot, next_episode, stop) = (&snapshot, &next_episode, &stop);
            s.spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let e = next_episode.fetch_add(1, Ordering::Relaxed);
                    let snap = Arc::clone(&snapshot.read().expect("snapshot lock"));
                    let traj = run_episode(cfg, e, &snap.params, snap.version, false);
                    let failed = traj.is_err();
                    if tx.send(traj).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(tx);

        let result = (|| {
            for u in 0..cfg.total_steps {
                let mut batch = Vec::with_capacity(cfg.batch_size);
                while batch.len() < cfg.batch_size {
                    match rx.recv_timeout(timeout) {
                        Ok(t) => batch.push(t?),
                        Err(RecvTimeoutError::Timeout) => return Err(RdarError::Starved(timeout)),
                        Err(RecvTimeoutError::Disconnected) => {
                            return Err(RdarError::Lifecycle("all actors stopped".into()))
                        }
                    }
                }
                l.update(u, &batch)?;
                if (u + 1) % cfg.snapshot_interval == 0 {
                    let snap = Arc::new(Snapshot {
                        version: u as u64 + 1,
                        params: l.params.clone(),
                    });
                    *snapshot.write().expect("snapshot lock") = snap;
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        drop(rx);
        result
    })
}

pub fn write_log_jsonl<W: Write>(mut w: W, log: &[TrainLogRecord]) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::scene::F_EXISTS;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> TrainerConfig {
        TrainerConfig {
            architecture: Architecture::AgentFeatures,
            total_steps: 3,
            batch_size: 2,
            learning_rate: 1e-3,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        TrainerConfig::default().validate().unwrap();
        TrainerConfig::desk().validate().unwrap();
        let bad = [
            TrainerConfig { gamma: 0.0, ..Default::default() },
            TrainerConfig { gamma: 1.5, ..Default::default() },
            TrainerConfig { lambda_entropy: -1.0, ..Default::default() },
            TrainerConfig { rho_bar: 0.5, c_bar: 1.0, ..Default::default() },
            TrainerConfig { k_min: 0, ..Default::default() },
            TrainerConfig { k_min: 5, k_max: 4, ..Default::default() },
            TrainerConfig { templates: vec![], ..Default::default() },
            TrainerConfig { learning_rate: f64::NAN, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(RdarError::Config(_))), "{c:?}");
        }
        let unknown = r#"{"learning_rate": 0.1, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainerConfig>(unknown).is_err());
    }

    #[test]
    fn randomize_k_ranges() {
        let mut r = rng::stream(1, &[]);
        let fixed = TrainerConfig { k_min: 4, k_max: 4, ..Default::default() };
        assert!((0..100).all(|_| randomize_k(&mut r, 10, &fixed) == 4));
        let wide = TrainerConfig { k_min: 1, k_max: 8, ..Default::default() };
        assert!((0..1000).all(|_| (1..=3).contains(&randomize_k(&mut r, 3, &wide))));
        assert_eq!(randomize_k(&mut r, 0, &wide), 0);
    }

    #[test]
    fn randomize_k_is_uniform() {
        let cfg = TrainerConfig { k_min: 1, k_max: 8, ..Default::default() };
        let mut r = rng::stream(2, &[]);
        let n = 100_000;
        let mut counts = [0usize; 9];
        for _ in 0..n {
            counts[randomize_k(&mut r, 10, &cfg)] += 1;
        }
        for c in &counts[1..] {
            assert!((*c as f64 / n as f64 - 0.125).abs() < 0.01, "{counts:?}");
        }
    }

    fn spec() -> ScenarioSpec {
        scenario::generate(3, Template::StraightCrosswalk, 6).unwrap()
    }

    #[test]
    fn rollout_runs_to_horizon_without_collision() {
        let p = init_params(1, Architecture::AgentFeatures);
        let s = spec();
        // k = 32 shows every agent, so the policy never collides here
        let tr = collect_rollout(&p, &s, N_MAX, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(tr.len(), s.horizon);
        assert!(tr.last().unwrap().done);
        assert!(tr[..tr.len() - 1].iter().all(|t| !t.done));
        assert!(tr.iter().all(|t| t.behavior_log_likelihood <= 0.0));
    }

    #[test]
    fn rollout_stops_at_collision() {
        let p = init_params(1, Architecture::AgentFeatures);
        // with no agent visible the ego drives into the crossing pedestrian
        let found = (0..40u64).find_map(|seed| {
            let s = scenario::generate(seed, Template::StraightCrosswalk, 6).unwrap();
            let tr = collect_rollout(&p, &s, 0, &mut rng::stream(seed, &[])).unwrap();
            (tr.len() < s.horizon).then_some(tr)
        });
        let tr = found.expect("some scenario ends in a collision when blind");
        assert!(tr.last().unwrap().done);
        assert!(tr.last().unwrap().reward < -50.0);
    }

    #[test]
    fn rollout_is_deterministic() {
        let p = init_params(4, Architecture::AgentEncoder);
        let s = spec();
        let a = collect_rollout(&p, &s, 2, &mut rng::stream(9, &[])).unwrap();
        let b = collect_rollout(&p, &s, 2, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
    }

    fn mc_returns(rewards: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
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

    proptest! {
        #[test]
        fn vtrace_on_policy_is_the_bootstrap_recursion(
            rewards in proptest::collection::vec(-5.0..5.0f64, 1..60),
            seed in 0u64..1000,
            truncated in any::<bool>(),
        ) {
            let n = rewards.len();
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..n).map(|_| r.gen_range(-10.0..10.0)).collect();
            let mut dones = vec![false; n];
            if !truncated {
                dones[n - 1] = true;
            }
            let boot = if truncated { 3.5 } else { 0.0 };
            let out = vtrace_from(&rewards, &values, &vec![0.0; n], &dones, boot, 0.95, 1.0, 1.0).unwrap();
            let mc = mc_returns(&rewards, &dones, boot, 0.95);
            for t in 0..n {
                prop_assert!((out.value_targets[t] - mc[t]).abs() < 1e-10);
                prop_assert_eq!(out.rhos[t], 1.0);
            }
        }

        #[test]
        fn clipped_ratios_never_exceed_rho_bar(
            log_ratios in proptest::collection::vec(-3.0..3.0f64, 1..30),
            rho_bar in 0.5..2.0f64,
        ) {
            let n = log_ratios.len();
            let out = vtrace_from(&vec![1.0; n], &vec![0.5; n], &log_ratios, &vec![false; n], 0.0, 0.9, rho_bar, rho_bar.min(1.0)).unwrap();
            prop_assert!(out.rhos.iter().all(|&r| r > 0.0 && r <= rho_bar));
        }
    }

    #[test]
    fn vtrace_null_signal_and_single_step() {
        let z = vtrace_from(&[0.0; 5], &[0.0; 5], &[0.2; 5], &[false, false, false, false, true], 0.0, 0.95, 1.0, 1.0).unwrap();
        assert!(z.value_targets.iter().chain(&z.advantages).all(|&v| v == 0.0));

        let (r, v, lr) = (2.0, 0.7, -0.4f64);
        let out = vtrace_from(&[r], &[v], &[lr], &[true], 0.0, 0.95, 1.0, 1.0).unwrap();
        let rho = lr.exp();
        assert!((out.value_targets[0] - (v + rho * (r - v))).abs() < 1e-15);
        assert!(matches!(
            vtrace_from(&[0.0], &[0.0], &[f64::INFINITY], &[true], 0.0, 0.9, 1.0, 1.0),
            Err(RdarError::Numeric { .. })
        ));
    }

    /// A three-step, three-agent trajectory with agents entering and leaving.
    pub(crate) fn fixture_trajectory(params: &ModelParams) -> (Vec<Transition>, VTraceOutputs) {
        let s = scenario::generate(11, Template::MixedUrban, 6).unwrap();
        let mut scene = s.initial_scene();
        let keep: Vec<usize> = scene.existing_slots().take(3).collect();
        for (i, a) in scene.agents.iter_mut().enumerate() {
            if !keep.contains(&i) {
                a.exists = false;
            }
        }
        let mut out = Vec::new();
        for t in 0..3 {
            let mut f = to_ego_frame(&scene);
            let mut ids = scene.agent_ids();
            if t == 2 {
                // the first agent leaves
                f.agents[keep[0]] = [0.0; crate::scene::AGENT_FEATURE_DIM];
                ids[keep[0]] = None;
            }
            for s in 0..N_MAX {
                if f.agents[s][F_EXISTS] == 0.0 {
                    ids[s] = None;
                }
            }
            let fwd = model::forward(params, &f).unwrap();
            let exists: Vec<usize> = f.existing_slots();
            let sample = KSample::new(exists.iter().rev().take(2).copied().collect());
            let (ll, _) = log_likelihood_with_grad(&fwd.scores, &sample).unwrap();
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
            scene = sim::step(&scene, sim::DrivingAction::new(4).unwrap(), &s).unwrap().next_scene;
        }
        let vt = vtrace(&out, &None, params, &TrainerConfig::default()).unwrap();
        (out, vt)
    }

    fn perturbed(arch: Architecture, seed: u64) -> ModelParams {
        let mut p = init_params(seed, arch);
        let mut r = rng::stream(seed, &[5]);
        for v in p.values.iter_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
        p
    }

    /// Gradient of each loss component alone against central differences.
    fn fd_losses(arch: Architecture, smoothing_on: SmoothingTarget) {
        let p = perturbed(arch, 21);
        let (tr, vt) = fixture_trajectory(&p);
        let weights = [(1.0, 0.0, 0.0, 0.0), (0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0), (0.0, 0.0, 0.0, 1.0), (1.0, 0.1, 0.2, 0.05)];
        for (wp, wc, we, ws) in weights {
            let cfg = TrainerConfig {
                lambda_critic: wc,
                lambda_entropy: we,
                lambda_smoothing: ws,
                smoothing_on,
                ..TrainerConfig::default()
            };
            let loss = |q: &ModelParams| {
                let (rep, _) = compute_losses_with_targets(&[&tr], &[vt.clone()], q, &cfg).unwrap();
                wp * rep.policy + wc * rep.critic + we * rep.entropy + ws * rep.smoothing
            };
            let (_, g) = compute_losses_with_targets(&[&tr], &[vt.clone()], &p, &cfg).unwrap();
            let g: Vec<f64> = if wp == 0.0 {
                // remove the policy part, which is always present
                let pol = TrainerConfig { lambda_critic: 0.0, lambda_entropy: 0.0, lambda_smoothing: 0.0, ..cfg.clone() };
                let (_, gp) = compute_losses_with_targets(&[&tr], &[vt.clone()], &p, &pol).unwrap();
                g.iter().zip(&gp).map(|(a, b)| a - b).collect()
            } else {
                g
            };
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            // a strided subset keeps the larger architectures fast while
            // still touching every parameter block
            let stride = (p.values.len() / 1500).max(1);
            for i in (0..p.values.len()).step_by(stride) {
                let mut a = p.clone();
                a.values[i] += h;
                let mut b = p.clone();
                b.values[i] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max((fd - g[i]).abs() / denom);
            }
            assert!(worst < 1e-4, "{arch} {smoothing_on:?} weights {:?}: {worst}", (wp, wc, we, ws));
        }
    }

    #[test]
    fn loss_gradients_agent_features() {
        fd_losses(Architecture::AgentFeatures, SmoothingTarget::Logits);
        fd_losses(Architecture::AgentFeatures, SmoothingTarget::Probabilities);
    }

    #[test]
    fn loss_gradients_attention_models() {
        fd_losses(Architecture::AgentEncoder, SmoothingTarget::Logits);
        fd_losses(Architecture::FullScene, SmoothingTarget::Logits);
    }

    #[test]
    fn trivial_loss_values() {
        let p = init_params(2, Architecture::AgentFeatures);
        let (tr, mut vt) = fixture_trajectory(&p);
        vt.advantages.iter_mut().for_each(|a| *a = 0.0);
        let cfg = TrainerConfig::default();
        let (rep, _) = compute_losses_with_targets(&[&tr], &[vt], &p, &cfg).unwrap();
        assert_eq!(rep.policy, 0.0);
        // freshly initialized logits are uniform and constant over time
        assert_eq!(rep.smoothing, 0.0);
        let f = &tr[0];
        let (_, dh) = entropy_with_grad(&model::forward(&p, &f.features).unwrap().scores);
        assert!(dh.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn entropy_ascent_drives_logits_to_uniform() {
        let cfg = TrainerConfig {
            lambda_critic: 0.0,
            lambda_smoothing: 0.0,
            lambda_entropy: 1.0,
            learning_rate: 1e-2,
            ..TrainerConfig::default()
        };
        let mut p = perturbed(Architecture::AgentFeatures, 8);
        let (mut tr, _) = fixture_trajectory(&p);
        tr.iter_mut().for_each(|t| t.reward = 0.0);
        let spread = |p: &ModelParams| {
            let s = model::forward(p, &tr[0].features).unwrap().scores;
            let l: Vec<f64> = s.existing_slots().iter().map(|&i| s.logits[i]).collect();
            l.iter().cloned().fold(f64::MIN, f64::max) - l.iter().cloned().fold(f64::MAX, f64::min)
        };
        let before = spread(&p);
        let mut adam = Adam::new(p.values.len(), &cfg);
        for _ in 0..300 {
            let zero = VTraceOutputs { value_targets: vec![0.0; 3], advantages: vec![0.0; 3], rhos: vec![1.0; 3] };
            let (_, g) = compute_losses_with_targets(&[&tr], &[zero], &p, &cfg).unwrap();
            adam.step(&mut p.values, &g);
        }
        let after = spread(&p);
        assert!(before > 0.05 && after < 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn synchronous_single_actor_is_on_policy_and_deterministic() {
        let cfg = tiny_cfg();
        let a = train(&cfg, None).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert!(a.log.iter().all(|r| r.mean_rho == 1.0));
    }

    #[test]
    fn reused_forwards_match_recomputation() {
        let cfg = tiny_cfg();
        let p = perturbed(Architecture::AgentFeatures, 3);
        let batch: Vec<Trajectory> = (0..2).map(|e| run_episode(&cfg, e, &p, 7, true).unwrap()).collect();
        let (ra, ga, _) = learner_losses(&batch, &p, Some(7), &cfg).unwrap();
        let (rb, gb) = compute_losses(&batch, &p, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn asynchronous_training_runs() {
        let cfg = TrainerConfig {
            synchronous: false,
            actors: 2,
            snapshot_interval: 2,
            total_steps: 4,
            ..tiny_cfg()
        };
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.log.len(), 4);
        assert!(out.log.iter().all(|r| r.mean_rho > 0.0 && r.mean_rho <= cfg.rho_bar));
    }

    #[test]
    fn outputs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainerConfig { checkpoint_interval: 2, total_steps: 4, ..tiny_cfg() };
        let out = train(&cfg, Some(dir.path())).unwrap();
        let names: Vec<String> = out
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["ckpt_000002.rdar", "ckpt_000004.rdar", "final.rdar"]);
        assert_eq!(checkpoint::load(&out.checkpoints[2]).unwrap(), out.params);
        let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        let recs: Vec<TrainLogRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs, out.log);
    }

    #[test]
    fn non_finite_update_keeps_last_good_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainerConfig { learning_rate: 1e300, adam_epsilon: 1e-300, ..tiny_cfg() };
        let err = train(&cfg, Some(dir.path())).unwrap_err();
        assert!(matches!(err, RdarError::Numeric { .. }), "{err}");
        let last = checkpoint::load(&dir.path().join("checkpoints/last_good.rdar")).unwrap();
        assert!(last.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn driving_policy_is_untouched_by_training() {
        let s = spec();
        let f = to_ego_frame(&s.initial_scene());
        let before = driving::policy_distribution(&f);
        train(&tiny_cfg(), None).unwrap();
        assert_eq!(before, driving::policy_distribution(&f));
    }
}
