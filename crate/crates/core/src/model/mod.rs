//! The relevance scoring model: per-agent logits plus a scalar value.
//!
//! Three encoders share the same input normalization, scoring head and
//! value head:
//!
//! * `agent_features`: each agent row is projected and scored on its own.
//! * `agent_encoder`: one self-attention block over the agents present,
//!   followed by a residual MLP.
//! * `full_scene`: ego and route tokens join the self-attention; the mean
//!   over all tokens forms a latent scene embedding, and agent tokens
//!   cross-attend to that latent together with the encoded tokens.
//!
//! Only existing slots are gathered into the token matrix, so absent slots
//! never influence any output.

pub mod checkpoint;
pub mod tape;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{RdarError, Result};
use crate::rng::{self, tag};
use crate::scene::{
    SceneFeatures, ABSENT_DISTANCE, AGENT_FEATURE_DIM, EGO_FEATURE_DIM, E_HEADING_ERR, E_LATERAL,
    E_RED_LIGHT, E_SPEED, E_STOP_LINE, N_MAX, ROUTE_POINTS,
};
use crate::selection::ScoreVector;
use tape::{Matrix, NodeId, Tape};

pub const HIDDEN: usize = 32;
const ROUTE_DIM: usize = 2 * ROUTE_POINTS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    AgentFeatures,
    AgentEncoder,
    FullScene,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::AgentFeatures,
        Architecture::AgentEncoder,
        Architecture::FullScene,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::AgentFeatures => "agent_features",
            Architecture::AgentEncoder => "agent_encoder",
            Architecture::FullScene => "full_scene",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Architecture::AgentFeatures => 0,
            Architecture::AgentEncoder => 1,
            Architecture::FullScene => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Architecture::ALL.into_iter().find(|a| a.tag() == t)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = RdarError;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| RdarError::Config(format!("unknown architecture '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_bias(&self) -> bool {
        self.name.ends_with(".b") || self.name.ends_with(".bo") || self.name.ends_with(".b1") || self.name.ends_with(".b2")
    }
}

/// Ordered parameter blocks of an architecture.
pub fn layout(arch: Architecture) -> Vec<ParamBlock> {
    let mut v = Vec::new();
    let mut add = |name: &str, rows, cols| {
        v.push(ParamBlock {
            name: name.to_string(),
            rows,
            cols,
        })
    };
    add("proj.w", AGENT_FEATURE_DIM, HIDDEN);
    add("proj.b", 1, HIDDEN);
    if arch != Architecture::AgentFeatures {
        if arch == Architecture::FullScene {
            add("ego.w", EGO_FEATURE_DIM, HIDDEN);
            add("ego.b", 1, HIDDEN);
            add("route.w", ROUTE_DIM, HIDDEN);
            add("route.b", 1, HIDDEN);
        }
        for m in ["wq", "wk", "wv", "wo"] {
            add(&format!("attn.{m}"), HIDDEN, HIDDEN);
        }
        add("attn.bo", 1, HIDDEN);
        add("mlp.w", HIDDEN, HIDDEN);
        add("mlp.b", 1, HIDDEN);
        if arch == Architecture::FullScene {
            for m in ["wq", "wk", "wv", "wo"] {
                add(&format!("cross.{m}"), HIDDEN, HIDDEN);
            }
            add("cross.bo", 1, HIDDEN);
            add("cross_mlp.w", HIDDEN, HIDDEN);
            add("cross_mlp.b", 1, HIDDEN);
        }
    }
    add("score.w1", HIDDEN, HIDDEN);
    add("score.b1", 1, HIDDEN);
    add("score.w2", HIDDEN, 1);
    add("score.b2", 1, 1);
    add("value.w1", HIDDEN + EGO_FEATURE_DIM, HIDDEN);
    add("value.b1", 1, HIDDEN);
    add("value.w2", HIDDEN, 1);
    add("value.b2", 1, 1);
    v
}

pub fn param_count(arch: Architecture) -> usize {
    layout(arch).iter().map(ParamBlock::len).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub layout: Vec<ParamBlock>,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams {
            arch,
            layout: layout(arch),
            values: vec![0.0; param_count(arch)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout != layout(self.arch) {
            return Err(RdarError::Config(format!("layout does not match architecture {}", self.arch)));
        }
        if self.values.len() != param_count(self.arch) {
            return Err(RdarError::Config("parameter count does not match layout".into()));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(RdarError::numeric("parameters"));
        }
        Ok(())
    }

    fn offset(&self, name: &str) -> (usize, usize, usize) {
        let mut off = 0;
        for b in &self.layout {
            if b.name == name {
                return (off, b.rows, b.cols);
            }
            off += b.len();
        }
        panic!("no parameter block '{name}'")
    }
}

/// Deterministic initialization: weights N(0, 1/fan_in), biases zero, and
/// the last scoring layer zero so that initial logits are all equal.
pub fn init_params(seed: u64, arch: Architecture) -> ModelParams {
    let mut rng = rng::stream(seed, &[tag::INIT, arch.tag() as u64]);
    let mut p = ModelParams::zeros(arch);
    let mut off = 0;
    for b in p.layout.clone() {
        let zero = b.is_bias() || b.name == "score.w2";
        let scale = 1.0 / (b.rows as f64).sqrt();
        for v in &mut p.values[off..off + b.len()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = if zero { 0.0 } else { z * scale };
        }
        off += b.len();
    }
    p
}

/// Fixed input scaling so every feature is of order one.
fn normalize_agent(row: &[f64; AGENT_FEATURE_DIM]) -> [f64; AGENT_FEATURE_DIM] {
    const SCALE: [f64; AGENT_FEATURE_DIM] = [20.0, 20.0, 10.0, 10.0, 1.0, 1.0, 5.0, 2.0, 1.0, 1.0, 1.0, 1.0];
    let mut out = [0.0; AGENT_FEATURE_DIM];
    for i in 0..AGENT_FEATURE_DIM {
        out[i] = row[i] / SCALE[i];
    }
    out
}

pub fn normalize_ego(ego: &[f64; EGO_FEATURE_DIM]) -> [f64; EGO_FEATURE_DIM] {
    let dist = |d: f64| d.min(100.0) / 50.0;
    debug_assert!(ABSENT_DISTANCE > 100.0);
    let mut out = [0.0; EGO_FEATURE_DIM];
    out[E_SPEED] = ego[E_SPEED] / 10.0;
    out[E_STOP_LINE] = dist(ego[E_STOP_LINE]);
    out[E_RED_LIGHT] = dist(ego[E_RED_LIGHT]);
    out[E_LATERAL] = ego[E_LATERAL] / 2.0;
    out[E_HEADING_ERR] = ego[E_HEADING_ERR];
    out
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    tape: Tape,
    logits: NodeId,
    value: NodeId,
    slots: Vec<usize>,
    arch: Architecture,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub scores: ScoreVector,
    pub value: f64,
    pub tape: ForwardTape,
}

struct Builder<'a> {
    t: Tape,
    p: &'a ModelParams,
}

impl Builder<'_> {
    fn w(&mut self, name: &str) -> NodeId {
        let (off, r, c) = self.p.offset(name);
        self.t.param(&self.p.values, off, r, c)
    }

    /// `tanh(x W + b)`
    fn dense_tanh(&mut self, x: NodeId, prefix: &str, w: &str, b: &str) -> NodeId {
        let w = self.w(&format!("{prefix}.{w}"));
        let b = self.w(&format!("{prefix}.{b}"));
        let h = self.t.matmul(x, w);
        let h = self.t.add_row(h, b);
        self.t.tanh(h)
    }

    /// Residual single-head attention of `q_src` over `kv_src`.
    fn attention(&mut self, q_src: NodeId, kv_src: NodeId, prefix: &str) -> NodeId {
        let (wq, wk, wv, wo, bo) = (
            self.w(&format!("{prefix}.wq")),
            self.w(&format!("{prefix}.wk")),
            self.w(&format!("{prefix}.wv")),
            self.w(&format!("{prefix}.wo")),
            self.w(&format!("{prefix}.bo")),
        );
        let q = self.t.matmul(q_src, wq);
        let k = self.t.matmul(kv_src, wk);
        let v = self.t.matmul(kv_src, wv);
        let s = self.t.matmul_bt(q, k);
        let s = self.t.scale(s, 1.0 / (HIDDEN as f64).sqrt());
        let a = self.t.softmax_rows(s);
        let o = self.t.matmul(a, v);
        let o = self.t.matmul(o, wo);
        let o = self.t.add_row(o, bo);
        self.t.add(q_src, o)
    }

    /// `x + tanh(x W + b)`
    fn residual_mlp(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let h = self.dense_tanh(x, prefix, "w", "b");
        self.t.add(x, h)
    }

    fn checked(&self, id: NodeId, layer: &str) -> Result<NodeId> {
        self.t.check(id, layer)?;
        Ok(id)
    }
}

pub fn forward(params: &ModelParams, features: &SceneFeatures) -> Result<ForwardOutput> {
    if params.values.len() != param_count(params.arch) {
        return Err(RdarError::Config("parameter count does not match architecture".into()));
    }
    let arch = params.arch;
    let slots = features.existing_slots();
    let n = slots.len();
    let mut b = Builder {
        t: Tape::new(params.values.len()),
        p: params,
    };

    let x: Vec<f64> = slots.iter().flat_map(|&s| normalize_agent(&features.agents[s])).collect();
    let x = b.t.input(Matrix::from_vec(n, AGENT_FEATURE_DIM, x));
    let ego_norm = b.t.input(Matrix::from_vec(1, EGO_FEATURE_DIM, normalize_ego(&features.ego).to_vec()));

    let h = b.dense_tanh(x, "proj", "w", "b");
    let agents = b.checked(h, "agent projection")?;
    let agents = match arch {
        Architecture::AgentFeatures => agents,
        Architecture::AgentEncoder => {
            let h = b.attention(agents, agents, "attn");
            let h = b.checked(h, "self-attention")?;
            let h = b.residual_mlp(h, "mlp");
            b.checked(h, "encoder mlp")?
        }
        Architecture::FullScene => {
            let ego_tok = b.dense_tanh(ego_norm, "ego", "w", "b");
            let route: Vec<f64> = features.route.iter().flat_map(|p| [p[0] / 25.0, p[1] / 25.0]).collect();
            let route = b.t.input(Matrix::from_vec(1, ROUTE_DIM, route));
            let route_tok = b.dense_tanh(route, "route", "w", "b");
            let tokens = b.t.concat_rows(&[agents, ego_tok, route_tok]);
            let tokens = b.checked(tokens, "scene tokens")?;
            let h = b.attention(tokens, tokens, "attn");
            let h = b.checked(h, "self-attention")?;
            let enc = b.residual_mlp(h, "mlp");
            let enc = b.checked(enc, "encoder mlp")?;
            let latent = b.t.mean_rows(enc);
            let kv = b.t.concat_rows(&[latent, enc]);
            let agent_tok = b.t.slice_rows(enc, 0, n);
            let h = b.attention(agent_tok, kv, "cross");
            let h = b.checked(h, "cross-attention")?;
            let h = b.residual_mlp(h, "cross_mlp");
            b.checked(h, "cross mlp")?
        }
    };

    let z = b.dense_tanh(agents, "score", "w1", "b1");
    let w2 = b.w("score.w2");
    let b2 = b.w("score.b2");
    let logits = b.t.matmul(z, w2);
    let logits = b.t.add_row(logits, b2);
    let logits = b.checked(logits, "scoring head")?;

    let pool = b.t.mean_rows(agents);
    let vin = b.t.concat_cols(pool, ego_norm);
    let hv = b.dense_tanh(vin, "value", "w1", "b1");
    let w2 = b.w("value.w2");
    let b2 = b.w("value.b2");
    let v = b.t.matmul(hv, w2);
    let v = b.t.add_row(v, b2);
    let v = b.checked(v, "value head")?;

    let mut scores = ScoreVector {
        logits: [0.0; N_MAX],
        exists: [false; N_MAX],
    };
    for (i, &s) in slots.iter().enumerate() {
        scores.logits[s] = b.t.value(logits).data[i];
        scores.exists[s] = true;
    }
    let value = b.t.value(v).data[0];
    Ok(ForwardOutput {
        scores,
        value,
        tape: ForwardTape {
            tape: b.t,
            logits,
            value: v,
            slots,
            arch,
        },
    })
}

/// Gradient of a scalar loss with respect to the parameters, given the
/// loss gradients with respect to the logits (absent slots ignored) and the
/// value.
pub fn backward(params: &ModelParams, tape: &ForwardTape, dlogits: &[f64; N_MAX], dvalue: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.values.len()];
    backward_into(params, tape, dlogits, dvalue, &mut out)?;
    Ok(out)
}

/// As [`backward`], accumulating into `grad`.
pub fn backward_into(
    params: &ModelParams,
    tape: &ForwardTape,
    dlogits: &[f64; N_MAX],
    dvalue: f64,
    grad: &mut [f64],
) -> Result<()> {
    if tape.arch != params.arch || tape.tape.param_len() != params.values.len() || grad.len() != params.values.len() {
        return Err(RdarError::Lifecycle("tape does not belong to these parameters".into()));
    }
    let g_logits: Vec<f64> = tape.slots.iter().map(|&s| dlogits[s]).collect();
    let seeds = [
        (tape.logits, Matrix::from_vec(tape.slots.len(), 1, g_logits)),
        (tape.value, Matrix::from_vec(1, 1, vec![dvalue])),
    ];
    tape.tape.backward_into(&seeds, grad);
    Ok(())
}
