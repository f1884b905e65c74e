//! Sampling mathematics for the subset-selection action: softmax over
//! relevance logits, ordered sampling without replacement (sequential law,
//! its log-likelihood, and the Gumbel top-k sampler), and greedy top-k.
//!
//! Gumbel noise perturbs the logits, not the probabilities; only the logit
//! form reproduces the sequential without-replacement law.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RdarError, Result};
use crate::scene::N_MAX;

/// Ordered list of distinct selected slot indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct KSample {
    indices: Vec<usize>,
}

impl KSample {
    pub fn new(indices: Vec<usize>) -> Self {
        KSample { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.indices.contains(&slot)
    }

    /// Checks distinctness and that every index is an existing slot.
    pub fn validate(&self, exists: &[bool; N_MAX]) -> Result<()> {
        let mut seen = [false; N_MAX];
        for &i in &self.indices {
            if i >= N_MAX || !exists[i] {
                return Err(RdarError::InvalidSample(format!("slot {i} is not an existing agent")));
            }
            if seen[i] {
                return Err(RdarError::InvalidSample(format!("slot {i} selected twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Equivalent binary mask over slots.
    pub fn to_mask(&self) -> [bool; N_MAX] {
        let mut m = [false; N_MAX];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }
}

/// Relevance logits per slot plus the existence mask. Logits of absent
/// slots are never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub logits: [f64; N_MAX],
    pub exists: [bool; N_MAX],
}

impl ScoreVector {
    pub fn existing_slots(&self) -> Vec<usize> {
        (0..N_MAX).filter(|&i| self.exists[i]).collect()
    }

    pub fn existing_count(&self) -> usize {
        self.exists.iter().filter(|&&e| e).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDistribution {
    pub probs: [f64; N_MAX],
    pub exists: [bool; N_MAX],
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax over existing slots; absent slots get exactly 0.
pub fn softmax_scores(scores: &ScoreVector) -> Result<SelectionDistribution> {
    let slots = scores.existing_slots();
    if slots.is_empty() {
        return Err(RdarError::Argument("softmax over zero existing slots".into()));
    }
    let max = slots.iter().map(|&i| scores.logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut probs = [0.0; N_MAX];
    let mut total = 0.0;
    for &i in &slots {
        probs[i] = (scores.logits[i] - max).exp();
        total += probs[i];
    }
    for &i in &slots {
        probs[i] /= total;
    }
    Ok(SelectionDistribution {
        probs,
        exists: scores.exists,
    })
}

/// Probability of drawing the ordered sample sequentially without
/// replacement, renormalizing after each draw.
pub fn sample_probability(dist: &SelectionDistribution, sample: &KSample) -> Result<f64> {
    sample.validate(&dist.exists)?;
    let mut prob = 1.0;
    let mut taken = 0.0;
    for &a in sample.indices() {
        let denom = 1.0 - taken;
        if !(denom > 0.0) {
            return Err(RdarError::DegenerateDistribution(format!(
                "renormalization mass {denom} before drawing slot {a}"
            )));
        }
        prob *= dist.probs[a] / denom;
        taken += dist.probs[a];
    }
    Ok(prob)
}

/// Log of [`sample_probability`], accumulated in log space. The
/// renormalization mass is summed over the slots still available rather
/// than formed as `1 - prefix`, which avoids cancellation.
pub fn log_likelihood(dist: &SelectionDistribution, sample: &KSample) -> Result<f64> {
    sample.validate(&dist.exists)?;
    let mut available = dist.exists;
    let mut ll = 0.0;
    for &a in sample.indices() {
        let remaining: f64 = (0..N_MAX).filter(|&j| available[j]).map(|j| dist.probs[j]).sum();
        if !(remaining > 0.0) {
            return Err(RdarError::DegenerateDistribution(format!(
                "renormalization mass {remaining} before drawing slot {a}"
            )));
        }
        ll += dist.probs[a].ln() - remaining.ln();
        available[a] = false;
    }
    Ok(ll)
}

/// Log-likelihood of an ordered sample directly from logits, with its
/// gradient with respect to every logit (zero on absent slots).
///
/// Each draw contributes `phi[a_i] - logsumexp(phi over slots not yet
/// drawn)`, which equals the sequential renormalized law.
pub fn log_likelihood_with_grad(scores: &ScoreVector, sample: &KSample) -> Result<(f64, [f64; N_MAX])> {
    sample.validate(&scores.exists)?;
    let mut available = scores.exists;
    let mut ll = 0.0;
    let mut grad = [0.0; N_MAX];
    for &a in sample.indices() {
        let avail: Vec<usize> = (0..N_MAX).filter(|&j| available[j]).collect();
        let lse = log_sum_exp(avail.iter().map(|&j| scores.logits[j]));
        ll += scores.logits[a] - lse;
        grad[a] += 1.0;
        for &j in &avail {
            grad[j] -= (scores.logits[j] - lse).exp();
        }
        available[a] = false;
    }
    if !ll.is_finite() {
        return Err(RdarError::numeric("sample log-likelihood"));
    }
    Ok((ll, grad))
}

/// Shannon entropy (nats) of the softmax over existing slots, and its
/// gradient with respect to the logits. Zero when no slot exists.
pub fn entropy_with_grad(scores: &ScoreVector) -> (f64, [f64; N_MAX]) {
    let slots = scores.existing_slots();
    let mut grad = [0.0; N_MAX];
    if slots.is_empty() {
        return (0.0, grad);
    }
    let lse = log_sum_exp(slots.iter().map(|&i| scores.logits[i]));
    let mut h = 0.0;
    for &i in &slots {
        let logp = scores.logits[i] - lse;
        h -= logp.exp() * logp;
    }
    for &i in &slots {
        let logp = scores.logits[i] - lse;
        grad[i] = -logp.exp() * (logp + h);
    }
    (h, grad)
}

fn check_k(scores: &ScoreVector, k: usize) -> Result<Vec<usize>> {
    let slots = scores.existing_slots();
    if k > slots.len() {
        return Err(RdarError::Argument(format!(
            "k = {k} exceeds the {} existing agents",
            slots.len()
        )));
    }
    Ok(slots)
}

fn top_k_by(mut keyed: Vec<(f64, usize)>, k: usize) -> KSample {
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    KSample::new(keyed.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Ordered sample without replacement by perturbing each existing logit with
/// independent Gumbel noise and taking the k largest.
pub fn gumbel_topk<R: Rng + ?Sized>(scores: &ScoreVector, k: usize, rng: &mut R) -> Result<KSample> {
    let slots = check_k(scores, k)?;
    let keyed = slots
        .into_iter()
        .map(|i| {
            let u: f64 = rng.sample(Open01);
            (scores.logits[i] - (-u.ln()).ln(), i)
        })
        .collect();
    Ok(top_k_by(keyed, k))
}

/// The k largest logits, ties broken by ascending slot index.
pub fn greedy_topk(scores: &ScoreVector, k: usize) -> Result<KSample> {
    let slots = check_k(scores, k)?;
    Ok(top_k_by(slots.into_iter().map(|i| (scores.logits[i], i)).collect(), k))
}

/// Every ordered k-sample of `items`, in lexicographic order.
pub fn ordered_samples(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for (j, &it) in items.iter().enumerate() {
            if !used[j] {
                used[j] = true;
                cur.push(it);
                rec(items, k, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(items, k, &mut vec![false; items.len()], &mut Vec::new(), &mut out);
    out
}
