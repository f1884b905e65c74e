//! Comparison selectors: closest-k, random-k and leave-one-out attribution.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::driving::{policy_distribution, ActionDistribution};
use crate::error::{RdarError, Result};
use crate::scene::{mask_agents, to_ego_frame, SceneFeatures, SceneState, N_MAX};
use crate::selection::{greedy_topk, KSample, ScoreVector};
use crate::sim::N_ACTIONS;

fn check_k(existing: usize, k: usize) -> Result<()> {
    if k > existing {
        return Err(RdarError::Argument(format!("k = {k} exceeds the {existing} existing agents")));
    }
    Ok(())
}

/// The k existing agents nearest to the ego centre, nearest first; ties
/// by slot index.
pub fn closest_k(scene: &SceneState, k: usize) -> Result<KSample> {
    let mut d: Vec<(f64, usize)> = scene
        .existing_slots()
        .map(|i| ((scene.agents[i].position - scene.ego.position).norm(), i))
        .collect();
    check_k(d.len(), k)?;
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(KSample::new(d.into_iter().take(k).map(|(_, i)| i).collect()))
}

/// Uniform ordered sample of k existing agents without replacement.
pub fn random_k<R: Rng + ?Sized>(scene: &SceneState, k: usize, rng: &mut R) -> Result<KSample> {
    let mut slots: Vec<usize> = scene.existing_slots().collect();
    check_k(slots.len(), k)?;
    let (chosen, _) = slots.partial_shuffle(rng, k);
    Ok(KSample::new(chosen.to_vec()))
}

fn kl_term(p: f64, m: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (p / m).ln()
    }
}

/// Jensen–Shannon divergence in nats, bounded by ln 2.
pub fn js_divergence(p: &ActionDistribution, q: &ActionDistribution) -> f64 {
    let mut js = 0.0;
    for i in 0..N_ACTIONS {
        let m = 0.5 * (p.probs[i] + q.probs[i]);
        js += 0.5 * kl_term(p.probs[i], m) + 0.5 * kl_term(q.probs[i], m);
    }
    js.clamp(0.0, std::f64::consts::LN_2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionScores {
    /// Divergence caused by removing each agent; 0 on empty slots.
    pub scores: [f64; N_MAX],
    pub exists: [bool; N_MAX],
    /// Driving-policy evaluations spent.
    pub evaluations: usize,
}

impl AttributionScores {
    pub fn as_scores(&self) -> ScoreVector {
        ScoreVector {
            logits: self.scores,
            exists: self.exists,
        }
    }
}

/// Leave-one-out attribution on precomputed features.
pub fn attribution_from_features(features: &SceneFeatures) -> Result<AttributionScores> {
    let slots = features.existing_slots();
    let mut evaluations = 0;
    let mut eval = |f: &SceneFeatures| {
        evaluations += 1;
        policy_distribution(f)
    };
    let nominal = eval(features);
    let mut scores = [0.0; N_MAX];
    let mut exists = [false; N_MAX];
    for &i in &slots {
        let others = KSample::new(slots.iter().copied().filter(|&j| j != i).collect());
        scores[i] = js_divergence(&nominal, &eval(&mask_agents(features, &others)?));
        exists[i] = true;
    }
    Ok(AttributionScores {
        scores,
        exists,
        evaluations,
    })
}

/// Scores each existing agent by how much the driving policy's action
/// distribution moves when that agent alone is hidden.
pub fn attribution_scores(scene: &SceneState) -> Result<AttributionScores> {
    if scene.existing_count() == 0 {
        return Err(RdarError::Argument("attribution needs at least one agent".into()));
    }
    attribution_from_features(&to_ego_frame(scene))
}

/// Top-k agents by attribution score, highest first; ties by slot index.
pub fn attribution_topk(scene: &SceneState, k: usize) -> Result<KSample> {
    check_k(scene.existing_count(), k)?;
    if k == 0 {
        return Ok(KSample::new(Vec::new()));
    }
    greedy_topk(&attribution_scores(scene)?.as_scores(), k)
}
